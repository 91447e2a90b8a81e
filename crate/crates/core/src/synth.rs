//! Synthetic corpus with known structure: every unseen class is an exact
//! mixture of a few seen "anchor" classes, in the word space and in the
//! feature space alike, so the whole pipeline can be checked end to end
//! against ground truth.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::embeddings::WordVectorTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub instances_per_class: usize,
    pub frames_per_instance: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    /// Seen classes mixed into each unseen class.
    pub components: usize,
    /// Per-coordinate noise scale around each class centre.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            num_seen: 20,
            num_unseen: 8,
            instances_per_class: 16,
            frames_per_instance: 6,
            feature_dim: 16,
            word_dim: 12,
            components: 3,
            noise: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (value, name) in [
            (self.num_seen, "num_seen"),
            (self.num_unseen, "num_unseen"),
            (self.instances_per_class, "instances_per_class"),
            (self.frames_per_instance, "frames_per_instance"),
            (self.feature_dim, "feature_dim"),
            (self.word_dim, "word_dim"),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_unseen < 2 {
            return Err(Error::Config("num_unseen must be at least 2".into()));
        }
        if self.components < 2 || self.components > self.num_seen {
            return Err(Error::Config(format!(
                "components {} outside 2..={}",
                self.components, self.num_seen
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The hidden structure behind a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub seen_centers: Vec<Vec<f64>>,
    pub unseen_centers: Vec<Vec<f64>>,
    /// Seen classes mixed into each unseen class, ascending.
    pub anchors: Vec<Vec<usize>>,
}

#[derive(Debug)]
pub struct SynthOutput {
    pub train: Dataset,
    pub test: Dataset,
    pub seen_labels: Vec<String>,
    pub unseen_labels: Vec<String>,
    pub word_vectors: WordVectorTable,
    pub truth: SynthTruth,
}

impl SynthOutput {
    /// Word vectors in the plain text format: a count/dim header, then one
    /// token with its values per line.
    pub fn word_vectors_text(&self) -> String {
        let mut out = format!("{} {}\n", self.word_vectors.len(), self.word_vectors.dim());
        for token in self.word_vectors.tokens() {
            let values = self.word_vectors.get(token).expect("token comes from the table");
            out.push_str(token);
            for v in values {
                out.push(' ');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize, normal: &Normal<f64>) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit scale is valid");

    let seen_labels: Vec<String> = (0..config.num_seen).map(|i| format!("cls{i}")).collect();
    let word_vectors = WordVectorTable::from_entries(
        seen_labels
            .iter()
            .map(|l| (l.clone(), unit_vector(&mut rng, config.word_dim, &normal))),
    )?;
    let seen_centers: Vec<Vec<f64>> = (0..config.num_seen)
        .map(|_| unit_vector(&mut rng, config.feature_dim, &normal))
        .collect();

    // Anchor sets: consecutive chunks of a shuffled class list, wrapping
    // around, so different unseen classes overlap as little as possible.
    let mut shuffled: Vec<usize> = (0..config.num_seen).collect();
    shuffled.shuffle(&mut rng);
    let anchors: Vec<Vec<usize>> = (0..config.num_unseen)
        .map(|j| {
            let mut set: Vec<usize> = (0..config.components)
                .map(|t| shuffled[(j * config.components + t) % config.num_seen])
                .collect();
            set.sort_unstable();
            set
        })
        .collect();
    let unseen_labels: Vec<String> = anchors
        .iter()
        .map(|set| {
            set.iter()
                .map(|&i| seen_labels[i].clone())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let unseen_centers: Vec<Vec<f64>> = anchors
        .iter()
        .map(|set| {
            let mut center = vec![0.0; config.feature_dim];
            for &i in set {
                for (c, v) in center.iter_mut().zip(&seen_centers[i]) {
                    *c += v / config.components as f64;
                }
            }
            center
        })
        .collect();

    let make_instances = |prefix: &str, centers: &[Vec<f64>], rng: &mut ChaCha8Rng| {
        let mut instances = Vec::with_capacity(centers.len() * config.instances_per_class);
        for (class_id, center) in centers.iter().enumerate() {
            for i in 0..config.instances_per_class {
                let frames = (0..config.frames_per_instance)
                    .map(|_| {
                        center
                            .iter()
                            .map(|&c| c + config.noise * normal.sample(rng))
                            .collect()
                    })
                    .collect();
                instances.push(Instance {
                    id: format!("{prefix}{class_id}_{i}"),
                    class_id,
                    frames,
                });
            }
        }
        instances
    };
    let train = Dataset {
        feature_dim: config.feature_dim,
        labels: seen_labels.clone(),
        instances: make_instances("seen", &seen_centers, &mut rng),
    };
    let test = Dataset {
        feature_dim: config.feature_dim,
        labels: unseen_labels.clone(),
        instances: make_instances("unseen", &unseen_centers, &mut rng),
    };
    train.validate()?;
    test.validate()?;

    Ok(SynthOutput {
        train,
        test,
        seen_labels,
        unseen_labels,
        word_vectors,
        truth: SynthTruth { seen_centers, unseen_centers, anchors },
    })
}
