//! The cross-modal encoder: a post-LN transformer over
//! [[CLS], visual frames, label words] with modality-specific attention,
//! trained with a classification loss plus a masked-token loss.

mod checkpoint;
mod forward;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    encode_item, forward, loss_cls, loss_mtl, register, represent, total_loss, ForwardOutput,
    ItemEncoding, ParamVars,
};
pub use params::{LayerParams, ModelParams};
pub use train::{
    train, write_log_csv, EpochRecord, OptimAlgorithm, OptimizerSettings,
};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionScheme;
use crate::error::{Error, Result};

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-5;

pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    ClsOnly,
    MlmOnly,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub input_feature_dim: usize,
    pub vocab_size: usize,
    pub max_visual_len: usize,
    pub max_word_len: usize,
    pub num_seen_classes: usize,
    pub attention_scheme: AttentionScheme,
    pub loss_mode: LossMode,
    pub omega_mtl: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: small enough for exhaustive gradient checks and
    /// minute-scale CPU training.
    pub fn desk(
        input_feature_dim: usize,
        vocab_size: usize,
        max_visual_len: usize,
        max_word_len: usize,
        num_seen_classes: usize,
        seed: u64,
    ) -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 4,
            mlp_dim: 64,
            input_feature_dim,
            vocab_size,
            max_visual_len,
            max_word_len,
            num_seen_classes,
            attention_scheme: AttentionScheme::ModalitySpecific,
            loss_mode: LossMode::Joint,
            omega_mtl: 0.5,
            mask_prob: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.num_heads == 0
            || self.mlp_dim == 0
            || self.input_feature_dim == 0
            || self.max_visual_len == 0
            || self.max_word_len == 0
            || self.num_seen_classes == 0
        {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(
                "vocabulary needs at least one word plus the two specials".into(),
            ));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!(
                "mask_prob {} outside (0, 1)",
                self.mask_prob
            )));
        }
        if !(self.omega_mtl >= 0.0 && self.omega_mtl.is_finite()) {
            return Err(Error::Config(format!(
                "omega_mtl {} must be finite and nonnegative",
                self.omega_mtl
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Word-token ids for the label text side: sorted content tokens first,
/// then [PAD] and [MASK].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Union of tokenized labels, deterministically ordered.
    pub fn build(seen_labels: &[String]) -> Result<Self> {
        let mut set = std::collections::BTreeSet::new();
        for label in seen_labels {
            for token in crate::embeddings::tokenize_label(label)? {
                set.insert(token);
            }
        }
        if set.is_empty() {
            return Err(Error::Format("no tokens in any label".into()));
        }
        let mut tokens: Vec<String> = set.into_iter().collect();
        tokens.push(PAD_TOKEN.to_string());
        tokens.push(MASK_TOKEN.to_string());
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        self.ids[PAD_TOKEN]
    }

    pub fn mask_id(&self) -> usize {
        self.ids[MASK_TOKEN]
    }

    /// Token ids of one label; every token must be in the vocabulary.
    pub fn encode_label(&self, label: &str) -> Result<Vec<usize>> {
        crate::embeddings::tokenize_label(label)?
            .into_iter()
            .map(|t| {
                self.id(&t).ok_or_else(|| {
                    Error::Contract(format!("token {t:?} missing from vocabulary"))
                })
            })
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.ids.clone()
    }

    /// Rebuild from a token → id map; ids must be dense from 0 and the
    /// specials present.
    pub fn from_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![String::new(); map.len()];
        for (token, &id) in &map {
            if id >= map.len() || !tokens[id].is_empty() {
                return Err(Error::Format("vocabulary ids are not dense".into()));
            }
            tokens[id] = token.clone();
        }
        if !map.contains_key(PAD_TOKEN) || !map.contains_key(MASK_TOKEN) {
            return Err(Error::Format("vocabulary lacks the special tokens".into()));
        }
        Ok(Vocabulary { tokens, ids: map })
    }
}

/// Which word positions get masked for one item, with the tokens they
/// originally held.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingPlan {
    /// Word-block indices (0-based within the word block), sorted.
    pub positions: Vec<usize>,
    pub original_tokens: Vec<usize>,
}

/// Mask each position independently with `mask_prob`; if none is chosen,
/// mask one uniformly-random position so the plan is never empty.
pub fn make_masking_plan<R: Rng>(
    word_ids: &[usize],
    mask_prob: f64,
    rng: &mut R,
) -> MaskingPlan {
    let mut positions: Vec<usize> = (0..word_ids.len())
        .filter(|_| rng.gen::<f64>() < mask_prob)
        .collect();
    if positions.is_empty() {
        positions.push(rng.gen_range(0..word_ids.len()));
    }
    let original_tokens = positions.iter().map(|&p| word_ids[p]).collect();
    MaskingPlan {
        positions,
        original_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_config_is_valid() {
        let c = EncoderConfig::desk(16, 10, 6, 4, 20, 7);
        c.validate().unwrap();
        assert_eq!((c.num_layers, c.hidden_dim, c.num_heads, c.mlp_dim), (2, 32, 4, 64));
        assert_eq!(c.head_dim(), 8);
    }

    #[test]
    fn config_rejects_indivisible_heads_and_bad_probs() {
        let mut c = EncoderConfig::desk(16, 10, 6, 4, 20, 7);
        c.num_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = EncoderConfig::desk(16, 10, 6, 4, 20, 7);
        c.mask_prob = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = EncoderConfig::desk(16, 10, 6, 4, 20, 7);
        c.omega_mtl = -0.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn vocabulary_sorts_tokens_then_appends_specials() {
        let v = Vocabulary::build(&["jump".into(), "run fast".into()]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("fast"), Some(0));
        assert_eq!(v.id("jump"), Some(1));
        assert_eq!(v.id("run"), Some(2));
        assert_eq!(v.pad_id(), 3);
        assert_eq!(v.mask_id(), 4);
    }

    #[test]
    fn vocabulary_deduplicates_across_labels() {
        let v = Vocabulary::build(&["run fast".into(), "run slow".into()]).unwrap();
        assert_eq!(v.len(), 5); // fast, run, slow + 2 specials
    }

    #[test]
    fn vocabulary_map_roundtrip() {
        let v = Vocabulary::build(&["hop skip".into()]).unwrap();
        let back = Vocabulary::from_map(v.to_map()).unwrap();
        assert_eq!(back, v);

        let mut broken = v.to_map();
        broken.remove(MASK_TOKEN);
        assert!(Vocabulary::from_map(broken).is_err());
    }

    #[test]
    fn encode_label_maps_known_tokens() {
        let v = Vocabulary::build(&["run fast".into()]).unwrap();
        assert_eq!(v.encode_label("fast run").unwrap(), vec![0, 1]);
        assert!(v.encode_label("sprint").is_err());
    }

    #[test]
    fn single_word_is_always_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let plan = make_masking_plan(&[7], 0.15, &mut rng);
            assert_eq!(plan.positions, [0]);
            assert_eq!(plan.original_tokens, [7]);
        }
    }

    #[test]
    fn masking_plan_is_reproducible_under_a_fixed_seed() {
        let ids = [4, 2, 9, 1];
        let a = make_masking_plan(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(5));
        let b = make_masking_plan(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn masking_rate_matches_the_minimum_one_procedure() {
        // Per-position rate for 4 words at p = 0.15:
        // p + (1-p)^4 / 4 = 0.28050625 exactly.
        let ids = [0usize, 1, 2, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let draws = 100_000;
        let mut hits = [0usize; 4];
        for _ in 0..draws {
            let plan = make_masking_plan(&ids, 0.15, &mut rng);
            assert!(!plan.positions.is_empty());
            for &p in &plan.positions {
                hits[p] += 1;
            }
        }
        let expected = 0.15 + 0.85f64.powi(4) / 4.0;
        for (p, &h) in hits.iter().enumerate() {
            let rate = h as f64 / draws as f64;
            assert!(
                (rate - expected).abs() < 0.01,
                "position {p}: rate {rate}, expected {expected}"
            );
            assert!((0.15..=0.33).contains(&rate), "position {p}: rate {rate}");
        }
    }
}
