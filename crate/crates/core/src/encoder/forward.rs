//! Input assembly, the post-LN transformer stack, heads, and losses.
//!
//! Block order per layer: z' = LN(MSA(z) + z), z = LN(MLP(z') + z'),
//! and the pooled representation is x = LN(z_L at position 0).

use crate::attention::{build_mask, SequenceLayout};
use crate::encoder::params::ModelParams;
use crate::encoder::{EncoderConfig, LossMode, MaskingPlan, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Graph handles for every model tensor, in the structure of [`ModelParams`].
pub struct ParamVars {
    pub visual_proj_w: Var,
    pub visual_proj_b: Var,
    pub cls_token: Var,
    pub word_emb: Var,
    pub pos_visual: Var,
    pub pos_word: Var,
    pub seg: Var,
    pub layers: Vec<LayerVars>,
    pub final_ln_gain: Var,
    pub final_ln_bias: Var,
    pub cls_head_w1: Var,
    pub cls_head_b1: Var,
    pub cls_head_w2: Var,
    pub cls_head_b2: Var,
    pub mtl_w: Var,
    pub mtl_b: Var,
}

pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Put every model tensor on the graph, trainable or frozen.
pub fn register(g: &Graph, params: &ModelParams, trainable: bool) -> ParamVars {
    let put = |t: &Tensor| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    ParamVars {
        visual_proj_w: put(&params.visual_proj_w),
        visual_proj_b: put(&params.visual_proj_b),
        cls_token: put(&params.cls_token),
        word_emb: put(&params.word_emb),
        pos_visual: put(&params.pos_visual),
        pos_word: put(&params.pos_word),
        seg: put(&params.seg),
        layers: params
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: put(&l.wq),
                bq: put(&l.bq),
                wk: put(&l.wk),
                bk: put(&l.bk),
                wv: put(&l.wv),
                bv: put(&l.bv),
                wo: put(&l.wo),
                bo: put(&l.bo),
                ln1_gain: put(&l.ln1_gain),
                ln1_bias: put(&l.ln1_bias),
                mlp_w1: put(&l.mlp_w1),
                mlp_b1: put(&l.mlp_b1),
                mlp_w2: put(&l.mlp_w2),
                mlp_b2: put(&l.mlp_b2),
                ln2_gain: put(&l.ln2_gain),
                ln2_bias: put(&l.ln2_bias),
            })
            .collect(),
        final_ln_gain: put(&params.final_ln_gain),
        final_ln_bias: put(&params.final_ln_bias),
        cls_head_w1: put(&params.cls_head_w1),
        cls_head_b1: put(&params.cls_head_b1),
        cls_head_w2: put(&params.cls_head_w2),
        cls_head_b2: put(&params.cls_head_b2),
        mtl_w: put(&params.mtl_w),
        mtl_b: put(&params.mtl_b),
    }
}

impl ParamVars {
    /// All handles in [`ModelParams::named`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![
            self.visual_proj_w,
            self.visual_proj_b,
            self.cls_token,
            self.word_emb,
            self.pos_visual,
            self.pos_word,
            self.seg,
        ];
        for l in &self.layers {
            out.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_gain, l.ln1_bias,
                l.mlp_w1, l.mlp_b1, l.mlp_w2, l.mlp_b2, l.ln2_gain, l.ln2_bias,
            ]);
        }
        out.extend([
            self.final_ln_gain,
            self.final_ln_bias,
            self.cls_head_w1,
            self.cls_head_b1,
            self.cls_head_w2,
            self.cls_head_b2,
            self.mtl_w,
            self.mtl_b,
        ]);
        out
    }
}

/// One item's graph outputs.
pub struct ItemEncoding {
    /// Pooled representation, [1, D].
    pub x: Var,
    /// [1, κ].
    pub cls_logits: Var,
    /// [masked, V]; present when a masking plan was supplied.
    pub mtl_logits: Option<Var>,
}

/// Values extracted from a one-shot forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub x: Tensor,
    pub cls_logits: Tensor,
    pub mtl_logits: Option<Tensor>,
}

/// Encode one (frames, words) pair on an existing graph.
pub fn encode_item(
    g: &Graph,
    pv: &ParamVars,
    config: &EncoderConfig,
    mask_id: usize,
    frames: &[Vec<f64>],
    word_ids: &[usize],
    plan: Option<&MaskingPlan>,
) -> Result<ItemEncoding> {
    let t = frames.len();
    let n_words = word_ids.len();
    if t == 0 || t > config.max_visual_len {
        return Err(Error::Config(format!(
            "{t} frames outside 1..={}",
            config.max_visual_len
        )));
    }
    if n_words == 0 || n_words > config.max_word_len {
        return Err(Error::Config(format!(
            "{n_words} words outside 1..={}",
            config.max_word_len
        )));
    }
    if frames.iter().any(|f| f.len() != config.input_feature_dim) {
        return Err(Error::Shape("frame width differs from input_feature_dim".into()));
    }
    if word_ids.iter().chain([&mask_id]).any(|&id| id >= config.vocab_size) {
        return Err(Error::Index("word id outside the vocabulary".into()));
    }
    if let Some(plan) = plan {
        if plan.positions.is_empty()
            || plan.positions.len() != plan.original_tokens.len()
            || plan.positions.iter().any(|&p| p >= n_words)
        {
            return Err(Error::Contract("masking plan does not fit the word block".into()));
        }
    }

    let layout = SequenceLayout::new(t, n_words)?;
    let mask = build_mask(layout, config.attention_scheme);

    // [CLS] row: learned token + position 0 + visual segment.
    let seg_visual = g.select_rows(pv.seg, &[0])?;
    let seg_word = g.select_rows(pv.seg, &[1])?;
    let cls = g.add(
        g.add(pv.cls_token, g.select_rows(pv.pos_visual, &[0])?)?,
        seg_visual,
    )?;

    // Visual rows: projected frames + positions 1..=T + visual segment.
    let frame_data: Vec<f64> = frames.iter().flatten().copied().collect();
    let frames_t = g.constant(Tensor::new(vec![t, config.input_feature_dim], frame_data)?);
    let projected = g.add_row(g.matmul(frames_t, pv.visual_proj_w)?, pv.visual_proj_b)?;
    let vis_pos: Vec<usize> = (1..=t).collect();
    let visual = g.add_row(
        g.add(projected, g.select_rows(pv.pos_visual, &vis_pos)?)?,
        seg_visual,
    )?;

    // Word rows: embeddings (with [MASK] substituted) + positions + segment.
    let mut input_ids = word_ids.to_vec();
    if let Some(plan) = plan {
        for &p in &plan.positions {
            input_ids[p] = mask_id;
        }
    }
    let word_pos: Vec<usize> = (0..n_words).collect();
    let words = g.add_row(
        g.add(
            g.select_rows(pv.word_emb, &input_ids)?,
            g.select_rows(pv.pos_word, &word_pos)?,
        )?,
        seg_word,
    )?;

    let mut z = g.concat_rows(&[cls, visual, words])?;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    for layer in &pv.layers {
        z = encoder_block(g, config, layer, z, mask.as_flat(), scale)?;
    }

    let x = g.layer_norm(
        g.select_rows(z, &[0])?,
        pv.final_ln_gain,
        pv.final_ln_bias,
        LN_EPS,
    )?;
    let hidden = g.gelu(g.add_row(g.matmul(x, pv.cls_head_w1)?, pv.cls_head_b1)?)?;
    let cls_logits = g.add_row(g.matmul(hidden, pv.cls_head_w2)?, pv.cls_head_b2)?;

    let mtl_logits = match plan {
        Some(plan) => {
            let global: Vec<usize> = plan
                .positions
                .iter()
                .map(|&p| layout.word_start() + p)
                .collect();
            let rows = g.select_rows(z, &global)?;
            Some(g.add_row(g.matmul(rows, pv.mtl_w)?, pv.mtl_b)?)
        }
        None => None,
    };

    Ok(ItemEncoding { x, cls_logits, mtl_logits })
}

fn encoder_block(
    g: &Graph,
    config: &EncoderConfig,
    l: &LayerVars,
    z: Var,
    mask: &[bool],
    scale: f64,
) -> Result<Var> {
    let q = g.add_row(g.matmul(z, l.wq)?, l.bq)?;
    let k = g.add_row(g.matmul(z, l.wk)?, l.bk)?;
    let v = g.add_row(g.matmul(z, l.wv)?, l.bv)?;
    let dh = config.head_dim();
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.scale(g.matmul(qh, g.transpose(kh)?)?, scale)?;
        let probs = g.softmax_masked(scores, mask)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let msa = g.add_row(g.matmul(g.concat_cols(&heads)?, l.wo)?, l.bo)?;
    let zp = g.layer_norm(g.add(msa, z)?, l.ln1_gain, l.ln1_bias, LN_EPS)?;
    let h1 = g.gelu(g.add_row(g.matmul(zp, l.mlp_w1)?, l.mlp_b1)?)?;
    let h2 = g.add_row(g.matmul(h1, l.mlp_w2)?, l.mlp_b2)?;
    g.layer_norm(g.add(h2, zp)?, l.ln2_gain, l.ln2_bias, LN_EPS)
}

/// One-shot forward pass on frozen parameters.
pub fn forward(
    params: &ModelParams,
    config: &EncoderConfig,
    mask_id: usize,
    frames: &[Vec<f64>],
    word_ids: &[usize],
    plan: Option<&MaskingPlan>,
) -> Result<ForwardOutput> {
    let g = Graph::new();
    let pv = register(&g, params, false);
    let enc = encode_item(&g, &pv, config, mask_id, frames, word_ids, plan)?;
    Ok(ForwardOutput {
        x: g.value(enc.x),
        cls_logits: g.value(enc.cls_logits),
        mtl_logits: enc.mtl_logits.map(|v| g.value(v)),
    })
}

/// Inference-time representation: the word block is a single [MASK] token.
pub fn represent(
    params: &ModelParams,
    config: &EncoderConfig,
    mask_id: usize,
    frames: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let out = forward(params, config, mask_id, frames, &[mask_id], None)?;
    Ok(out.x.data().to_vec())
}

/// Classification loss for one item.
pub fn loss_cls(g: &Graph, cls_logits: Var, class_id: usize) -> Result<Var> {
    g.cross_entropy(cls_logits, &[class_id])
}

/// Masked-token loss: mean cross-entropy of the original tokens at the
/// masked positions.
pub fn loss_mtl(g: &Graph, mtl_logits: Var, original_tokens: &[usize]) -> Result<Var> {
    let rows = g.value(mtl_logits).rows();
    if rows != original_tokens.len() {
        return Err(Error::Contract(format!(
            "{rows} logit rows for {} masked tokens",
            original_tokens.len()
        )));
    }
    g.cross_entropy(mtl_logits, original_tokens)
}

/// Combine the two losses per the configured mode.
pub fn total_loss(
    g: &Graph,
    l_cls: Var,
    l_mtl: Option<Var>,
    config: &EncoderConfig,
) -> Result<Var> {
    match config.loss_mode {
        LossMode::ClsOnly => Ok(l_cls),
        LossMode::MlmOnly => {
            l_mtl.ok_or_else(|| Error::Contract("masked-token loss required but missing".into()))
        }
        LossMode::Joint => {
            let mtl = l_mtl
                .ok_or_else(|| Error::Contract("masked-token loss required but missing".into()))?;
            g.add(l_cls, g.scale(mtl, config.omega_mtl)?)
        }
    }
}
