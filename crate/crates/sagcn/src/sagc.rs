//! Block-sparse sequence adjacency and the five-layer degree-normalized
//! graph convolution stack.
//!
//! The whole-sequence adjacency couples joints within a frame through the
//! bone matrix Ā and couples each joint to the same joint in the retained
//! past frames through scaled identity blocks. Expanded, block (t, u)
//! equals s_{t,u}·Ā when u = t and s_{t,u}·I when u < t is retained; all
//! other blocks are absent. The convolution averages neighbor features by
//! dividing each node row by its degree before the channel mixing matmul,
//! and gradients flow through the features, the weights, and the attention
//! scalars — including through the degree.

use crate::attention::{self_attention, topk_prune, AttentionHandles, MaskedAttention};
use crate::numcore::{
    gemm_acc, init_uniform, BackwardCtx, CustomOp, DiffTensor, Rng, Tape, Tensor,
};
use crate::skeleton::IntraFrameAdjacency;
use crate::{Error, Result};

const MIN_DEGREE: f64 = 1e-12;

/// Block-sparse (N·T)×(N·T) sequence adjacency. Scalars live in the tape
/// node `scores` (the pruned score matrix); this struct only records which
/// blocks exist and the shared intra-frame matrix.
#[derive(Clone, Debug)]
pub struct SparseBlockAdjacency {
    pub t: usize,
    pub n: usize,
    /// Pruned T×T score node; entry (t, u) weights block (t, u).
    pub scores: DiffTensor,
    /// Retained block columns per block-row, diagonal always present.
    pub support: Vec<Vec<usize>>,
    /// Dense Ā, row-major N×N.
    pub intra: Vec<f64>,
    /// Row sums of Ā (1 + bone degree).
    pub intra_rowsum: Vec<f64>,
}

impl SparseBlockAdjacency {
    /// Expand to the dense (N·T)×(N·T) matrix. Test and debugging aid;
    /// the compute path never materializes this.
    pub fn to_dense(&self, tape: &Tape) -> Vec<f64> {
        let (t, n) = (self.t, self.n);
        let s = tape.data(self.scores);
        let dim = n * t;
        let mut dense = vec![0.0; dim * dim];
        for (row, cols) in self.support.iter().enumerate() {
            for &u in cols {
                let w = s[row * t + u];
                for i in 0..n {
                    if u == row {
                        for j in 0..n {
                            dense[(row * n + i) * dim + u * n + j] = w * self.intra[i * n + j];
                        }
                    } else {
                        dense[(row * n + i) * dim + u * n + i] = w;
                    }
                }
            }
        }
        dense
    }
}

/// Build the block-sparse adjacency from pruned attention and the
/// intra-frame bone matrix.
pub fn assemble_adjacency(
    tape: &Tape,
    att: &MaskedAttention,
    intra: &IntraFrameAdjacency,
) -> Result<SparseBlockAdjacency> {
    let t = att.frames();
    let s = tape.data(att.s_mask);
    if s.len() != t * t {
        return Err(Error::Shape(format!(
            "adjacency: {t} support rows vs {} scores",
            s.len()
        )));
    }
    for (row, cols) in att.support.iter().enumerate() {
        if !cols.contains(&row) || s[row * t + row] <= 0.0 {
            return Err(Error::Contract(format!(
                "adjacency: block-row {row} is missing a positive diagonal"
            )));
        }
        for &u in cols {
            if u > row {
                return Err(Error::Contract(format!(
                    "adjacency: block ({row}, {u}) above the diagonal"
                )));
            }
            if s[row * t + u] <= 0.0 {
                return Err(Error::Contract(format!(
                    "adjacency: retained score ({row}, {u}) is not positive"
                )));
            }
        }
    }
    Ok(SparseBlockAdjacency {
        t,
        n: intra.n,
        scores: att.s_mask,
        support: att.support.clone(),
        intra: intra.matrix().to_vec(),
        intra_rowsum: intra.row_sums(),
    })
}

// ── degree-normalized block-sparse apply ────────────────────────────

#[derive(Debug)]
struct NormAvgPlan {
    scores: DiffTensor,
    support: Vec<Vec<usize>>,
}

/// out = D⁻¹·Ã_s·H computed block-sparsely for a batch of adjacencies
/// sharing T, N, and Ā. `h` is (B·T·N)×C, batch-major then frame-major.
#[derive(Debug)]
struct NormAvgOp {
    h: DiffTensor,
    out: DiffTensor,
    plans: Vec<NormAvgPlan>,
    t: usize,
    n: usize,
    c: usize,
    intra: Vec<f64>,
    intra_rowsum: Vec<f64>,
}

impl NormAvgOp {
    /// Degrees for block-row `row` of batch element `b`:
    /// deg(i) = s_{t,t}·rowsum_Ā(i) + Σ_{u≠t} s_{t,u}.
    fn degrees(&self, s: &[f64], row: usize, cols: &[usize]) -> Vec<f64> {
        let t = self.t;
        let diag = s[row * t + row];
        let past_sum: f64 = cols
            .iter()
            .filter(|&&u| u != row)
            .map(|&u| s[row * t + u])
            .sum();
        self.intra_rowsum
            .iter()
            .map(|&rs| diag * rs + past_sum)
            .collect()
    }
}

impl CustomOp for NormAvgOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let (t, n, c) = (self.t, self.n, self.c);
        let g_out = ctx.grad(self.out).to_vec();
        let m_out = ctx.data(self.out);
        let h_data = ctx.data(self.h);
        let mut g_h = vec![0.0; h_data.len()];
        let mut g_scores: Vec<Vec<f64>> = self.plans.iter().map(|_| vec![0.0; t * t]).collect();

        let mut d_r = vec![0.0; n * c];
        let mut abar_dr = vec![0.0; n * c];
        let mut abar_h = vec![0.0; n * c];
        for (b, plan) in self.plans.iter().enumerate() {
            let s = ctx.data(plan.scores);
            for (row, cols) in plan.support.iter().enumerate() {
                let deg = self.degrees(s, row, cols);
                let base = (b * t + row) * n;
                // dR = dM / deg per node row; d(deg_i) couples through M.
                let mut d_deg = vec![0.0; n];
                for i in 0..n {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let idx = (base + i) * c + ch;
                        d_r[i * c + ch] = g_out[idx] / deg[i];
                        dot += g_out[idx] * m_out[idx];
                    }
                    d_deg[i] = -dot / deg[i];
                }
                // Ā·dR and Ā·H_row for the diagonal block (Ā symmetric).
                let h_row = &h_data[base * c..(base + n) * c];
                gemm_acc(&mut abar_dr, &self.intra, &d_r, n, n, c, false, false, 1.0, 0.0);
                gemm_acc(&mut abar_h, &self.intra, h_row, n, n, c, false, false, 1.0, 0.0);

                let s_diag = s[row * t + row];
                let mut ds_diag = 0.0;
                for i in 0..n {
                    for ch in 0..c {
                        g_h[(base + i) * c + ch] += s_diag * abar_dr[i * c + ch];
                        ds_diag += abar_h[i * c + ch] * d_r[i * c + ch];
                    }
                    ds_diag += self.intra_rowsum[i] * d_deg[i];
                }
                g_scores[b][row * t + row] += ds_diag;

                let d_deg_sum: f64 = d_deg.iter().sum();
                for &u in cols.iter().filter(|&&u| u != row) {
                    let s_u = s[row * t + u];
                    let ubase = (b * t + u) * n;
                    let mut ds_u = 0.0;
                    for i in 0..n {
                        for ch in 0..c {
                            g_h[(ubase + i) * c + ch] += s_u * d_r[i * c + ch];
                            ds_u += h_data[(ubase + i) * c + ch] * d_r[i * c + ch];
                        }
                    }
                    g_scores[b][row * t + u] += ds_u + d_deg_sum;
                }
            }
        }
        ctx.add_grad(self.h, &g_h);
        for (plan, g) in self.plans.iter().zip(&g_scores) {
            ctx.add_grad(plan.scores, g);
        }
    }
}

/// Forward of D⁻¹·Ã_s·H for a batch of sequences stacked along rows.
pub fn norm_adjacency_apply(
    tape: &mut Tape,
    adjs: &[&SparseBlockAdjacency],
    h: DiffTensor,
) -> Result<DiffTensor> {
    let first = adjs.first().ok_or_else(|| Error::Shape("empty adjacency batch".into()))?;
    let (t, n) = (first.t, first.n);
    for a in adjs {
        if a.t != t || a.n != n {
            return Err(Error::Shape("adjacency batch mixes T or N".into()));
        }
    }
    let rows = tape.shape(h)[0..tape.shape(h).len() - 1].iter().product::<usize>();
    let c = *tape.shape(h).last().unwrap();
    if rows != adjs.len() * t * n {
        return Err(Error::Shape(format!(
            "norm_adjacency_apply: {} feature rows vs {} sequences × {t} frames × {n} joints",
            rows,
            adjs.len()
        )));
    }

    let h_data = tape.data(h).to_vec();
    let mut out = vec![0.0; rows * c];
    let mut numer = vec![0.0; n * c];
    for (b, adj) in adjs.iter().enumerate() {
        let s = tape.data(adj.scores);
        for (row, cols) in adj.support.iter().enumerate() {
            let base = (b * t + row) * n;
            // Numerator: s_tt·(Ā·H_t) + Σ_{u≠t} s_tu·H_u.
            let h_row = &h_data[base * c..(base + n) * c];
            gemm_acc(&mut numer, &adj.intra, h_row, n, n, c, false, false, s[row * t + row], 0.0);
            for &u in cols.iter().filter(|&&u| u != row) {
                let s_u = s[row * t + u];
                let ubase = (b * t + u) * n;
                for i in 0..n * c {
                    numer[i] += s_u * h_data[ubase * c + i];
                }
            }
            // Degrees; positive by the diagonal-block contract.
            let diag = s[row * t + row];
            let past_sum: f64 = cols
                .iter()
                .filter(|&&u| u != row)
                .map(|&u| s[row * t + u])
                .sum();
            for i in 0..n {
                let deg = diag * adj.intra_rowsum[i] + past_sum;
                if deg <= MIN_DEGREE {
                    return Err(Error::Contract(format!(
                        "zero-degree node: frame {row}, joint {i}"
                    )));
                }
                for ch in 0..c {
                    out[(base + i) * c + ch] = numer[i * c + ch] / deg;
                }
            }
        }
    }

    let plans: Vec<NormAvgPlan> = adjs
        .iter()
        .map(|a| NormAvgPlan { scores: a.scores, support: a.support.clone() })
        .collect();
    let (t0, n0, c0) = (t, n, c);
    let intra = first.intra.clone();
    let intra_rowsum = first.intra_rowsum.clone();
    tape.custom(out, &[rows, c], "norm_adjacency_apply", move |out_handle| {
        Box::new(NormAvgOp {
            h,
            out: out_handle,
            plans,
            t: t0,
            n: n0,
            c: c0,
            intra,
            intra_rowsum,
        })
    })
}

/// One graph convolution without activation: D⁻¹·Ã_s·H·W for a batch.
pub fn gc_linear_batch(
    tape: &mut Tape,
    adjs: &[&SparseBlockAdjacency],
    h: DiffTensor,
    w: DiffTensor,
) -> Result<DiffTensor> {
    let m = norm_adjacency_apply(tape, adjs, h)?;
    tape.matmul(m, w)
}

/// Spec surface for a single sequence: ReLU(D⁻¹·Ã_s·H·W). `h` may be
/// shaped [T, N, C] or [T·N, C].
pub fn gc_layer(
    tape: &mut Tape,
    adj: &SparseBlockAdjacency,
    h: DiffTensor,
    w: DiffTensor,
) -> Result<DiffTensor> {
    let pre = gc_linear_batch(tape, &[adj], h, w)?;
    let out = tape.relu(pre)?;
    let c_out = *tape.shape(out).last().unwrap();
    tape.reshape(out, &[adj.t, adj.n, c_out])
}

// ── five-layer stack ────────────────────────────────────────────────

pub const GC_WIDTHS: [usize; 5] = [32, 64, 64, 128, 128];

/// Weights of the five GC layers plus the two residual channel
/// projections (32→64 feeding layer 3, 64→128 feeding layer 5).
#[derive(Clone, Debug)]
pub struct GcStackParams {
    pub w: Vec<Tensor>,
    pub proj1: Tensor,
    pub proj2: Tensor,
    pub c_in: usize,
}

impl GcStackParams {
    pub fn init(c_in: usize, rng: &mut Rng) -> Self {
        let mut w = Vec::with_capacity(5);
        let mut prev = c_in;
        for &width in &GC_WIDTHS {
            w.push(init_uniform(&[prev, width], prev, rng));
            prev = width;
        }
        GcStackParams {
            w,
            proj1: init_uniform(&[GC_WIDTHS[0], GC_WIDTHS[1]], GC_WIDTHS[0], rng),
            proj2: init_uniform(&[GC_WIDTHS[2], GC_WIDTHS[3]], GC_WIDTHS[2], rng),
            c_in,
        }
    }

    pub fn zeros(c_in: usize) -> Self {
        let mut w = Vec::with_capacity(5);
        let mut prev = c_in;
        for &width in &GC_WIDTHS {
            w.push(Tensor::zeros(&[prev, width]));
            prev = width;
        }
        GcStackParams {
            w,
            proj1: Tensor::zeros(&[GC_WIDTHS[0], GC_WIDTHS[1]]),
            proj2: Tensor::zeros(&[GC_WIDTHS[2], GC_WIDTHS[3]]),
            c_in,
        }
    }

    pub fn out_channels(&self) -> usize {
        GC_WIDTHS[4]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GcStackHandles {
    pub w: [DiffTensor; 5],
    pub proj1: DiffTensor,
    pub proj2: DiffTensor,
}

impl GcStackHandles {
    pub fn watch(tape: &mut Tape, p: &GcStackParams) -> Self {
        GcStackHandles {
            w: [
                tape.leaf(&p.w[0]),
                tape.leaf(&p.w[1]),
                tape.leaf(&p.w[2]),
                tape.leaf(&p.w[3]),
                tape.leaf(&p.w[4]),
            ],
            proj1: tape.leaf(&p.proj1),
            proj2: tape.leaf(&p.proj2),
        }
    }
}

/// Attention + pruning + adjacency assembly for one T×N feature matrix.
pub fn build_adjacency(
    tape: &mut Tape,
    h: DiffTensor,
    att: &AttentionHandles,
    intra: &IntraFrameAdjacency,
    k: usize,
) -> Result<(DiffTensor, SparseBlockAdjacency)> {
    let (h_in, scores) = self_attention(tape, h, att)?;
    let pruned = topk_prune(tape, scores, k)?;
    let adj = assemble_adjacency(tape, &pruned, intra)?;
    Ok((h_in, adj))
}

/// Full block for a batch of per-sequence T×N features: one attention and
/// adjacency per sequence, then five shared-adjacency GC layers with
/// residual skips into layers 3 and 5 added before their activations.
/// Returns (B·T·N)×128 features.
pub fn sagc_forward_batch(
    tape: &mut Tape,
    hs: &[DiffTensor],
    att: &AttentionHandles,
    intra: &IntraFrameAdjacency,
    params: &GcStackHandles,
    k: usize,
) -> Result<DiffTensor> {
    if hs.is_empty() {
        return Err(Error::Shape("sagc_forward_batch: empty batch".into()));
    }
    let mut adjs = Vec::with_capacity(hs.len());
    let mut features = Vec::with_capacity(hs.len());
    for &h in hs {
        let (h_in, adj) = build_adjacency(tape, h, att, intra, k)?;
        let (t, n) = (adj.t, adj.n);
        features.push(tape.reshape(h_in, &[t * n, 1])?);
        adjs.push(adj);
    }
    let adj_refs: Vec<&SparseBlockAdjacency> = adjs.iter().collect();
    let h0 = tape.concat_rows(&features)?;

    let pre1 = gc_linear_batch(tape, &adj_refs, h0, params.w[0])?;
    let h1 = tape.relu(pre1)?;
    let pre2 = gc_linear_batch(tape, &adj_refs, h1, params.w[1])?;
    let h2 = tape.relu(pre2)?;
    let pre3 = gc_linear_batch(tape, &adj_refs, h2, params.w[2])?;
    let res1 = tape.matmul(h1, params.proj1)?;
    let pre3 = tape.add(pre3, res1)?;
    let h3 = tape.relu(pre3)?;
    let pre4 = gc_linear_batch(tape, &adj_refs, h3, params.w[3])?;
    let h4 = tape.relu(pre4)?;
    let pre5 = gc_linear_batch(tape, &adj_refs, h4, params.w[4])?;
    let res2 = tape.matmul(h3, params.proj2)?;
    let pre5 = tape.add(pre5, res2)?;
    tape.relu(pre5)
}

/// Single-sequence form returning [T, N, 128].
pub fn sagc_forward(
    tape: &mut Tape,
    h: DiffTensor,
    att: &AttentionHandles,
    intra: &IntraFrameAdjacency,
    params: &GcStackHandles,
    k: usize,
) -> Result<DiffTensor> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("sagc_forward wants T×N input, got {shape:?}")));
    }
    let out = sagc_forward_batch(tape, &[h], att, intra, params, k)?;
    tape.reshape(out, &[shape[0], shape[1], GC_WIDTHS[4]])
}
