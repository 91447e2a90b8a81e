//! Attention masking over the token sequence [[CLS], r_1..r_T, w_1..w_Nw].
//!
//! The classification token is grouped with the visual block: it attends to
//! every visual token and never to a word token, so the pooled output stays
//! text-independent. Word tokens see [CLS], all visual tokens, and word
//! positions up to and including their own.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions in the encoder input: index 0 is [CLS], then `n_visual` frame
/// tokens, then `n_words` word tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    n_visual: usize,
    n_words: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScheme {
    /// [CLS] and visual rows are blind to word tokens; word rows are causal.
    ModalitySpecific,
    /// Ablation: [CLS] and visual rows attend everywhere; word rows unchanged.
    FullCross,
}

/// Boolean allow-matrix: `allow[q][k]` means query q may attend to key k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    allow: Vec<bool>,
    total: usize,
    scheme: AttentionScheme,
}

impl SequenceLayout {
    pub fn new(n_visual: usize, n_words: usize) -> Result<Self> {
        if n_visual == 0 || n_words == 0 {
            return Err(Error::Contract(
                "sequence needs at least one visual and one word token".into(),
            ));
        }
        Ok(SequenceLayout { n_visual, n_words })
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn total(&self) -> usize {
        1 + self.n_visual + self.n_words
    }

    /// First word position (global index).
    pub fn word_start(&self) -> usize {
        1 + self.n_visual
    }

    /// True for [CLS] and visual positions.
    pub fn in_visual_block(&self, idx: usize) -> bool {
        idx < self.word_start()
    }
}

/// The allow-matrix a layout and scheme prescribe.
pub fn build_mask(layout: SequenceLayout, scheme: AttentionScheme) -> AttentionMask {
    let total = layout.total();
    let ws = layout.word_start();
    let mut allow = vec![false; total * total];
    for q in 0..total {
        for k in 0..total {
            allow[q * total + k] = if q < ws {
                match scheme {
                    AttentionScheme::ModalitySpecific => k < ws,
                    AttentionScheme::FullCross => true,
                }
            } else {
                // Word rows: [CLS] + visual block, then causal-inclusive
                // word positions. k < ws is subsumed by k <= q.
                k <= q
            };
        }
    }
    AttentionMask { allow, total, scheme }
}

impl AttentionMask {
    pub fn scheme(&self) -> AttentionScheme {
        self.scheme
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.total + k]
    }

    /// Row-major flat view, sized total², for masked softmax.
    pub fn as_flat(&self) -> &[bool] {
        &self.allow
    }

    /// The mask as lines of space-separated 0/1, one row per query.
    pub fn grid_string(&self) -> String {
        let mut out = String::new();
        for q in 0..self.total {
            let row: Vec<&str> = (0..self.total)
                .map(|k| if self.allows(q, k) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    #[cfg(test)]
    fn set(&mut self, q: usize, k: usize, value: bool) {
        let total = self.total;
        self.allow[q * total + k] = value;
    }
}

/// Check a mask cell-by-cell against the rules its scheme prescribes.
pub fn validate_mask(mask: &AttentionMask, layout: SequenceLayout) -> Result<()> {
    if mask.total != layout.total() {
        return Err(Error::Shape(format!(
            "mask is {}x{0}, layout wants {1}x{1}",
            mask.total,
            layout.total()
        )));
    }
    for q in 0..mask.total {
        if !mask.allows(q, q) {
            return Err(Error::MaskValidation {
                q,
                k: q,
                reason: "token does not attend to itself".into(),
            });
        }
    }
    let expected = build_mask(layout, mask.scheme);
    for q in 0..mask.total {
        if (0..mask.total).all(|k| !mask.allows(q, k)) {
            return Err(Error::MaskValidation {
                q,
                k: 0,
                reason: "row allows nothing".into(),
            });
        }
        for k in 0..mask.total {
            if mask.allows(q, k) != expected.allows(q, k) {
                let reason = if expected.allows(q, k) {
                    "required attention edge is blocked"
                } else {
                    "forbidden attention edge is allowed"
                };
                return Err(Error::MaskValidation {
                    q,
                    k,
                    reason: reason.into(),
                });
            }
        }
    }
    Ok(())
}
