//! Causal masked self-attention over frames, plus the per-row top-K score
//! pruning that keeps, for every frame, itself and the K most relevant
//! past frames.

use crate::numcore::{init_uniform, DiffTensor, Rng, Tape, Tensor};
use crate::{Error, Result};

/// Per-frame feature projections; all three are N×N.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttentionParams {
    pub fn init(n: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            w_q: init_uniform(&[n, n], n, rng),
            w_k: init_uniform(&[n, n], n, rng),
            w_v: init_uniform(&[n, n], n, rng),
        }
    }

    pub fn zeros(n: usize) -> Self {
        AttentionParams {
            w_q: Tensor::zeros(&[n, n]),
            w_k: Tensor::zeros(&[n, n]),
            w_v: Tensor::zeros(&[n, n]),
        }
    }
}

/// Tape handles for watched [`AttentionParams`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionHandles {
    pub w_q: DiffTensor,
    pub w_k: DiffTensor,
    pub w_v: DiffTensor,
}

impl AttentionHandles {
    pub fn watch(tape: &mut Tape, p: &AttentionParams) -> Self {
        AttentionHandles {
            w_q: tape.leaf(&p.w_q),
            w_k: tape.leaf(&p.w_k),
            w_v: tape.leaf(&p.w_v),
        }
    }
}

/// Lower-triangular score matrix after pruning, together with the per-row
/// retained column indices (always including the diagonal).
#[derive(Clone, Debug)]
pub struct MaskedAttention {
    pub s_mask: DiffTensor,
    pub support: Vec<Vec<usize>>,
}

impl MaskedAttention {
    pub fn frames(&self) -> usize {
        self.support.len()
    }
}

pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut mask = vec![false; t * t];
    for r in 0..t {
        for c in 0..=r {
            mask[r * t + c] = true;
        }
    }
    mask
}

/// Scaled dot-product attention over frames with a causal mask inside the
/// softmax. `h` is T×N; returns the attended features H_in = S·V and the
/// masked score matrix S (strict upper triangle exactly zero, rows
/// normalized over frames 0..=t).
pub fn self_attention(
    tape: &mut Tape,
    h: DiffTensor,
    params: &AttentionHandles,
) -> Result<(DiffTensor, DiffTensor)> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("self_attention wants T×N input, got {shape:?}")));
    }
    let (t, n) = (shape[0], shape[1]);
    let q = tape.matmul(h, params.w_q)?;
    let k = tape.matmul(h, params.w_k)?;
    let v = tape.matmul(h, params.w_v)?;
    let logits = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(logits, 1.0 / (n as f64).sqrt())?;
    let scores = tape.masked_softmax(scaled, &causal_mask(t), t)?;
    let h_in = tape.matmul(scores, v)?;
    Ok((h_in, scores))
}

/// Per row t of a masked softmax output, pick the K largest strictly-past
/// positive entries (ties toward the smaller frame index) plus the
/// diagonal. Rows with at most K positive past entries keep everything.
pub fn topk_support(scores: &[f64], t: usize, k: usize) -> Vec<Vec<usize>> {
    let mut support = Vec::with_capacity(t);
    for r in 0..t {
        let row = &scores[r * t..(r + 1) * t];
        let mut past: Vec<usize> = (0..r).filter(|&u| row[u] > 0.0).collect();
        // Descending by score; ties go to the smaller frame index because
        // sort_by is stable and `past` is index-ordered.
        past.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite scores"));
        past.truncate(k);
        past.push(r);
        past.sort_unstable();
        support.push(past);
    }
    support
}

/// Apply a fixed support set to a score matrix: entries outside the
/// support become exactly zero and contribute zero gradient; retained
/// entries keep their values and full gradient path.
pub fn prune_with_support(
    tape: &mut Tape,
    scores: DiffTensor,
    support: Vec<Vec<usize>>,
) -> Result<MaskedAttention> {
    let t = support.len();
    if tape.data(scores).len() != t * t {
        return Err(Error::Shape(format!(
            "prune: support for {t} frames vs {} scores",
            tape.data(scores).len()
        )));
    }
    let mut mask = vec![0.0; t * t];
    for (r, cols) in support.iter().enumerate() {
        if !cols.contains(&r) {
            return Err(Error::Contract(format!("support row {r} is missing its diagonal")));
        }
        for &c in cols {
            mask[r * t + c] = 1.0;
        }
    }
    let s_mask = tape.mask_mul(scores, &mask)?;
    Ok(MaskedAttention { s_mask, support })
}

/// Top-K pruning of a lower-triangular score matrix. The selection is
/// discrete and treated as a constant in backward; the retained entries
/// keep their gradient path.
pub fn topk_prune(tape: &mut Tape, scores: DiffTensor, k: usize) -> Result<MaskedAttention> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("topk_prune wants a square matrix, got {shape:?}")));
    }
    let t = shape[0];
    let support = topk_support(tape.data(scores), t, k);
    prune_with_support(tape, scores, support)
}
