//! Trainable weights and their deterministic initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight standard deviation at initialization.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Frame features → hidden. [p, D] plus bias [D].
    pub visual_proj_w: Tensor,
    pub visual_proj_b: Tensor,
    /// Learned classification token, [1, D].
    pub cls_token: Tensor,
    /// [V, D].
    pub word_emb: Tensor,
    /// Positions 0..=T_max; row 0 belongs to [CLS]. [(T_max+1), D].
    pub pos_visual: Tensor,
    /// Word positions 0..W_max. [W_max, D].
    pub pos_word: Tensor,
    /// Row 0 = visual block (incl. [CLS]), row 1 = word block. [2, D].
    pub seg: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    /// Classifier head: D → D (GeLU) → κ.
    pub cls_head_w1: Tensor,
    pub cls_head_b1: Tensor,
    pub cls_head_w2: Tensor,
    pub cls_head_b2: Tensor,
    /// Masked-token head: D → V, untied from word_emb.
    pub mtl_w: Tensor,
    pub mtl_b: Tensor,
}

impl ModelParams {
    /// Weights ~ N(0, 0.02²), biases 0, layer-norm gain 1 / bias 0.
    /// Bitwise deterministic for a given config seed.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut sample = |shape: &[usize]| {
            let len = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape/data agree")
        };
        let (d, p, v) = (config.hidden_dim, config.input_feature_dim, config.vocab_size);
        let kappa = config.num_seen_classes;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                wq: sample(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: sample(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: sample(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: sample(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(&[d]),
                mlp_w1: sample(&[d, config.mlp_dim]),
                mlp_b1: Tensor::zeros(&[config.mlp_dim]),
                mlp_w2: sample(&[config.mlp_dim, d]),
                mlp_b2: Tensor::zeros(&[d]),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(ModelParams {
            visual_proj_w: sample(&[p, d]),
            visual_proj_b: Tensor::zeros(&[d]),
            cls_token: sample(&[1, d]),
            word_emb: sample(&[v, d]),
            pos_visual: sample(&[config.max_visual_len + 1, d]),
            pos_word: sample(&[config.max_word_len, d]),
            seg: sample(&[2, d]),
            layers,
            final_ln_gain: ones(d),
            final_ln_bias: Tensor::zeros(&[d]),
            cls_head_w1: sample(&[d, d]),
            cls_head_b1: Tensor::zeros(&[d]),
            cls_head_w2: sample(&[d, kappa]),
            cls_head_b2: Tensor::zeros(&[kappa]),
            mtl_w: sample(&[d, v]),
            mtl_b: Tensor::zeros(&[v]),
        })
    }

    /// Every tensor with a stable name, in a fixed order. The checkpoint
    /// format and the optimizer both rely on this ordering.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("visual_proj_w".into(), &self.visual_proj_w),
            ("visual_proj_b".into(), &self.visual_proj_b),
            ("cls_token".into(), &self.cls_token),
            ("word_emb".into(), &self.word_emb),
            ("pos_visual".into(), &self.pos_visual),
            ("pos_word".into(), &self.pos_word),
            ("seg".into(), &self.seg),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in layer_fields(l) {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.extend([
            ("final_ln_gain".to_string(), &self.final_ln_gain),
            ("final_ln_bias".to_string(), &self.final_ln_bias),
            ("cls_head_w1".to_string(), &self.cls_head_w1),
            ("cls_head_b1".to_string(), &self.cls_head_b1),
            ("cls_head_w2".to_string(), &self.cls_head_w2),
            ("cls_head_b2".to_string(), &self.cls_head_b2),
            ("mtl_w".to_string(), &self.mtl_w),
            ("mtl_b".to_string(), &self.mtl_b),
        ]);
        out
    }

    /// Mutable view in the same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("visual_proj_w".into(), &mut self.visual_proj_w),
            ("visual_proj_b".into(), &mut self.visual_proj_b),
            ("cls_token".into(), &mut self.cls_token),
            ("word_emb".into(), &mut self.word_emb),
            ("pos_visual".into(), &mut self.pos_visual),
            ("pos_word".into(), &mut self.pos_word),
            ("seg".into(), &mut self.seg),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in layer_fields_mut(l) {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.extend([
            ("final_ln_gain".to_string(), &mut self.final_ln_gain),
            ("final_ln_bias".to_string(), &mut self.final_ln_bias),
            ("cls_head_w1".to_string(), &mut self.cls_head_w1),
            ("cls_head_b1".to_string(), &mut self.cls_head_b1),
            ("cls_head_w2".to_string(), &mut self.cls_head_w2),
            ("cls_head_b2".to_string(), &mut self.cls_head_b2),
            ("mtl_w".to_string(), &mut self.mtl_w),
            ("mtl_b".to_string(), &mut self.mtl_b),
        ]);
        out
    }

    /// Reassemble from named tensors, checking shapes against the config.
    pub fn from_named(
        config: &EncoderConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut template = ModelParams::init(config)?;
        for (name, tensor) in template.named_mut() {
            let loaded = lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            if loaded.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
            *tensor = loaded;
        }
        Ok(template)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("shape/data agree")
}

fn layer_fields(l: &LayerParams) -> Vec<(&'static str, &Tensor)> {
    vec![
        ("wq", &l.wq),
        ("bq", &l.bq),
        ("wk", &l.wk),
        ("bk", &l.bk),
        ("wv", &l.wv),
        ("bv", &l.bv),
        ("wo", &l.wo),
        ("bo", &l.bo),
        ("ln1_gain", &l.ln1_gain),
        ("ln1_bias", &l.ln1_bias),
        ("mlp_w1", &l.mlp_w1),
        ("mlp_b1", &l.mlp_b1),
        ("mlp_w2", &l.mlp_w2),
        ("mlp_b2", &l.mlp_b2),
        ("ln2_gain", &l.ln2_gain),
        ("ln2_bias", &l.ln2_bias),
    ]
}

fn layer_fields_mut(l: &mut LayerParams) -> Vec<(&'static str, &mut Tensor)> {
    vec![
        ("wq", &mut l.wq),
        ("bq", &mut l.bq),
        ("wk", &mut l.wk),
        ("bk", &mut l.bk),
        ("wv", &mut l.wv),
        ("bv", &mut l.bv),
        ("wo", &mut l.wo),
        ("bo", &mut l.bo),
        ("ln1_gain", &mut l.ln1_gain),
        ("ln1_bias", &mut l.ln1_bias),
        ("mlp_w1", &mut l.mlp_w1),
        ("mlp_b1", &mut l.mlp_b1),
        ("mlp_w2", &mut l.mlp_w2),
        ("mlp_b2", &mut l.mlp_b2),
        ("ln2_gain", &mut l.ln2_gain),
        ("ln2_bias", &mut l.ln2_bias),
    ]
}
