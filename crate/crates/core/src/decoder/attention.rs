use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Additive attention gate `[K × M]` with entries `0` (attend) or `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    additive: Vec<f64>,
}

impl AttentionMask {
    /// A mask that lets every query attend to every key.
    pub fn open(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            additive: vec![0.0; rows * cols],
        }
    }

    /// Builds a mask from a predicate saying which `(query, key)` pairs attend.
    pub fn from_open(rows: usize, cols: usize, open: impl Fn(usize, usize) -> bool) -> Self {
        let additive = (0..rows * cols)
            .map(|i| {
                if open(i / cols, i % cols) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Self { rows, cols, additive }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn additive(&self) -> &[f64] {
        &self.additive
    }

    pub fn is_open(&self, row: usize, col: usize) -> bool {
        self.additive[row * self.cols + col] == 0.0
    }

    /// Columns reordered so that new column `j` is old column `perm[j]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Self {
        let mut additive = Vec::with_capacity(self.additive.len());
        for r in 0..self.rows {
            additive.extend(perm.iter().map(|&c| self.additive[r * self.cols + c]));
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            additive,
        }
    }
}

/// Thresholds the previous head's masks: attend where `mask >= tau`.
pub fn build_attention_mask(prev_masks: &Tensor, tau: f64) -> AttentionMask {
    let additive = prev_masks
        .data()
        .iter()
        .map(|&m| if m >= tau { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    AttentionMask {
        rows: prev_masks.rows(),
        cols: prev_masks.cols(),
        additive,
    }
}

/// Multi-head attention projections `ψ_Q, ψ_K, ψ_V` and the output map.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            // A key bias adds the same logit to every key of a query, which
            // softmax cancels, so it would be a parameter without gradient.
            key: Linear::without_bias(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
        })
    }
}

/// Result of one attention block: output `[K × D]` and the attention
/// weights averaged over heads `[K × M]`.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Tensor,
}

/// `softmax(Q Kᵀ / sqrt(d) + A) V` per head with head width `d = D / heads`,
/// heads concatenated and passed through the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    queries: Var,
    memory: Var,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let q = params.query.forward(tape, bound, queries)?;
    let k = params.key.forward(tape, bound, memory)?;
    let v = params.value.forward(tape, bound, memory)?;
    let dim = tape.value(q).cols();
    let (rows, cols) = (tape.value(q).rows(), tape.value(k).rows());
    let head_dim = dim / params.heads;
    let zeros;
    let additive: &[f64] = match mask {
        Some(m) => {
            if m.rows != rows || m.cols != cols {
                return Err(Error::Dimension(format!(
                    "attention mask [{}, {}] for {rows} queries and {cols} keys",
                    m.rows, m.cols
                )));
            }
            &m.additive
        }
        None => {
            zeros = vec![0.0; rows * cols];
            &zeros
        }
    };
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(params.heads);
    let mut weights = Tensor::zeros(&[rows, cols]);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.masked_softmax_rows(logits, additive)?;
        for (w, a) in weights.data_mut().iter_mut().zip(tape.value(attn).data()) {
            *w += a / params.heads as f64;
        }
        outputs.push(tape.matmul(attn, vh)?);
    }
    let joined = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    let output = params.output.forward(tape, bound, joined)?;
    Ok(AttentionOutput { output, weights })
}
