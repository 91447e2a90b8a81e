//! Word-vector table, label tokenization, and the semantic relatedness
//! matrix between unseen and seen label embeddings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

/// Token → vector map with a single fixed dimensionality.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

/// A class label embedded as the mean of its in-vocabulary token vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedding {
    pub class_id: usize,
    pub label: String,
    pub vector: Vec<f64>,
    /// Tokens found in the table. Always ≥ 1.
    pub covered_tokens: usize,
    pub total_tokens: usize,
}

/// On-disk form of an embedded label set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub labels: Vec<EmbeddingRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub class_id: usize,
    pub label: String,
    pub vector: Vec<f64>,
}

impl WordVectorTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    /// Tokens in sorted order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Build a table from (token, vector) pairs. Tokens are lowercased;
    /// on duplicates the first occurrence wins.
    pub fn from_entries<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut entries: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut dim = None;
        for (token, vector) in pairs {
            let token = token.to_lowercase();
            if token.is_empty() {
                return Err(Error::Format("empty token".into()));
            }
            let d = *dim.get_or_insert(vector.len());
            if vector.len() != d || vector.is_empty() {
                return Err(Error::Format(format!(
                    "vector for {token:?} has length {}, expected {d}",
                    vector.len()
                )));
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("non-finite value for {token:?}")));
            }
            if entries.contains_key(&token) {
                log::warn!("duplicate word vector for {token:?}; keeping the first");
                continue;
            }
            entries.insert(token, vector);
        }
        match dim {
            Some(dim) if !entries.is_empty() => Ok(WordVectorTable { dim, entries }),
            _ => Err(Error::Format("no word vectors supplied".into())),
        }
    }

    /// Load the text format: one `token v1 .. vd` entry per line, with an
    /// optional `count dim` header line that is detected and skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        if let Some((_, first)) = lines.peek() {
            let fields: Vec<&str> = first.split_whitespace().collect();
            if fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                lines.next();
            }
        }
        let mut pairs = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-empty line").to_string();
            let vector: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Format(format!("line {}: bad number {f:?}", no + 1)))
                })
                .collect::<Result<_>>()?;
            if vector.is_empty() {
                return Err(Error::Format(format!("line {}: token without vector", no + 1)));
            }
            pairs.push((token, vector));
        }
        Self::from_entries(pairs)
    }

    /// Mean of the label's in-vocabulary token vectors.
    ///
    /// Out-of-vocabulary tokens are skipped and counted rather than
    /// zero-filled; a label with no covered tokens at all is an error.
    pub fn embed_label(&self, class_id: usize, label: &str) -> Result<LabelEmbedding> {
        let tokens = tokenize_label(label)?;
        let mut vector = vec![0.0; self.dim];
        let mut covered = 0usize;
        for token in &tokens {
            if let Some(v) = self.entries.get(token) {
                for (acc, x) in vector.iter_mut().zip(v) {
                    *acc += x;
                }
                covered += 1;
            }
        }
        if covered == 0 {
            return Err(Error::Coverage(label.to_string()));
        }
        for v in vector.iter_mut() {
            *v /= covered as f64;
        }
        Ok(LabelEmbedding {
            class_id,
            label: label.to_string(),
            vector,
            covered_tokens: covered,
            total_tokens: tokens.len(),
        })
    }

    /// Embed every label, class_id = position in the list.
    pub fn embed_labels(&self, labels: &[String]) -> Result<Vec<LabelEmbedding>> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| self.embed_label(i, l))
            .collect()
    }
}

/// Lowercase, split on whitespace / underscore / hyphen, strip punctuation.
pub fn tokenize_label(label: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = label
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .map(|piece| piece.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(Error::Format(format!("label {label:?} has no usable tokens")));
    }
    Ok(tokens)
}

/// Pairwise cosine similarities: row j, column i holds
/// `cos(unseen[j], seen[i])`. Label texts must not overlap between the
/// two sets (case-insensitive).
pub fn relatedness_matrix(unseen: &[LabelEmbedding], seen: &[LabelEmbedding]) -> Result<Tensor> {
    if unseen.is_empty() || seen.is_empty() {
        return Err(Error::Contract("relatedness of an empty label set".into()));
    }
    let dim = unseen[0].vector.len();
    if unseen
        .iter()
        .chain(seen)
        .any(|e| e.vector.len() != dim)
    {
        return Err(Error::Shape("embedding dims differ".into()));
    }
    for u in unseen {
        if seen
            .iter()
            .any(|s| s.label.eq_ignore_ascii_case(&u.label))
        {
            return Err(Error::Disjointness(u.label.clone()));
        }
    }
    let mut data = Vec::with_capacity(unseen.len() * seen.len());
    for u in unseen {
        for s in seen {
            data.push(cosine(&u.vector, &s.vector)?);
        }
    }
    Tensor::new(vec![unseen.len(), seen.len()], data)
}

/// Serialize an embedded label set with its shared dimensionality.
pub fn to_embedding_file(embeddings: &[LabelEmbedding]) -> Result<EmbeddingFile> {
    let dim = embeddings
        .first()
        .map(|e| e.vector.len())
        .ok_or_else(|| Error::Contract("no embeddings to write".into()))?;
    Ok(EmbeddingFile {
        dim,
        labels: embeddings
            .iter()
            .map(|e| EmbeddingRecord {
                class_id: e.class_id,
                label: e.label.clone(),
                vector: e.vector.clone(),
            })
            .collect(),
    })
}

impl EmbeddingFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: EmbeddingFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.labels.iter().any(|l| l.vector.len() != self.dim) {
            return Err(Error::Format("embedding dim mismatch".into()));
        }
        Ok(())
    }

    /// Back to working form; coverage counts are not stored on disk.
    pub fn embeddings(&self) -> Vec<LabelEmbedding> {
        self.labels
            .iter()
            .map(|l| LabelEmbedding {
                class_id: l.class_id,
                label: l.label.clone(),
                vector: l.vector.clone(),
                covered_tokens: 0,
                total_tokens: 0,
            })
            .collect()
    }
}
