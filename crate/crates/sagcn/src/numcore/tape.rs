//! Reverse-mode gradient tape over dense f64 tensors.
//!
//! The tape owns every value produced during a forward pass. Ops append a
//! record and a fresh node; `backward` replays the records in exact reverse
//! append order, accumulating gradients per node. One tape per training
//! step; tapes are not shared across threads.

use crate::{Error, Result};

use super::tensor::{gemm_acc, Tensor};

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful for the
/// tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiffTensor {
    id: usize,
}


struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Node {
    fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }
}

/// Op with a hand-derived backward, defined outside this module.
/// Input nodes must have smaller ids than the output node.
pub trait CustomOp: std::fmt::Debug {
    fn backward(&self, ctx: &mut BackwardCtx<'_>);
}

/// View of the tape handed to [`CustomOp::backward`].
pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Vec<f64>],
}

impl BackwardCtx<'_> {
    pub fn data(&self, x: DiffTensor) -> &[f64] {
        &self.nodes[x.id].data
    }

    pub fn shape(&self, x: DiffTensor) -> &[usize] {
        &self.nodes[x.id].shape
    }

    /// Current accumulated gradient (the output's upstream gradient during
    /// the reverse sweep).
    pub fn grad(&self, x: DiffTensor) -> &[f64] {
        &self.grads[x.id]
    }

    pub fn add_grad(&mut self, x: DiffTensor, contribution: &[f64]) {
        let g = &mut self.grads[x.id];
        assert_eq!(g.len(), contribution.len(), "gradient length mismatch");
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }
}

enum Op {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { a: usize, c: f64, out: usize },
    AddRow { a: usize, bias: usize, out: usize, rows: usize, cols: usize },
    Relu { a: usize, out: usize },
    Tanh { a: usize, out: usize },
    Sigmoid { a: usize, out: usize },
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    /// out = A·Bᵀ with A m×k and B n×k.
    MatmulNt { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Reshape { a: usize, out: usize },
    SliceRows { a: usize, out: usize, start: usize, rows: usize, cols: usize },
    SliceCols { a: usize, out: usize, start: usize, cols_out: usize, rows: usize, cols_in: usize },
    ConcatRows { inputs: Vec<(usize, usize)>, out: usize, cols: usize },
    ConcatCols { a: usize, b: usize, out: usize, rows: usize, ca: usize, cb: usize },
    GatherRows { a: usize, out: usize, indices: Vec<usize>, cols: usize },
    GroupMeanRows { a: usize, out: usize, group: usize, rows_out: usize, cols: usize },
    SumAll { a: usize, out: usize },
    MeanAll { a: usize, out: usize },
    MaskedSoftmax { a: usize, out: usize, t: usize, mask: Vec<bool> },
    /// Elementwise product with a fixed 0/1 mask; the mask is a constant.
    MaskMul { a: usize, out: usize, mask: Vec<f64> },
    BceWithLogits { logits: usize, out: usize, targets: Vec<f64> },
    SoftmaxXent { logits: usize, out: usize, labels: Vec<usize>, classes: usize },
    Custom(Box<dyn CustomOp>),
}

/// Gradient tape: ordered op records plus the node arena.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>) -> DiffTensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape });
        DiffTensor { id }
    }

    fn checked(&mut self, data: Vec<f64>, shape: Vec<usize>, op: &str) -> Result<DiffTensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value produced by {op}")));
        }
        Ok(self.push(data, shape))
    }

    /// Register a tensor as a tape node (parameter, input, or constant).
    pub fn leaf(&mut self, t: &Tensor) -> DiffTensor {
        self.push(t.data().to_vec(), t.shape().to_vec())
    }

    pub fn leaf_from(&mut self, data: Vec<f64>, shape: &[usize]) -> DiffTensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape.to_vec())
    }

    pub fn scalar(&mut self, v: f64) -> DiffTensor {
        self.push(vec![v], vec![1])
    }

    pub fn data(&self, x: DiffTensor) -> &[f64] {
        &self.nodes[x.id].data
    }

    pub fn shape(&self, x: DiffTensor) -> &[usize] {
        &self.nodes[x.id].shape
    }

    pub fn scalar_value(&self, x: DiffTensor) -> f64 {
        self.nodes[x.id].data[0]
    }

    pub fn to_tensor(&self, x: DiffTensor) -> Tensor {
        Tensor::from_vec(self.nodes[x.id].data.clone(), &self.nodes[x.id].shape)
            .expect("node invariant: shape matches data")
    }

    /// Accumulated gradient for `x` after [`Tape::backward`]. Zero for any
    /// node the loss does not depend on.
    pub fn grad(&self, x: DiffTensor) -> &[f64] {
        assert!(
            !self.grads.is_empty(),
            "grad() queried before backward() ran"
        );
        &self.grads[x.id]
    }

    pub fn grad_tensor(&self, x: DiffTensor) -> Tensor {
        Tensor::from_vec(self.grad(x).to_vec(), &self.nodes[x.id].shape)
            .expect("grad matches node shape")
    }

    fn dims2(&self, x: DiffTensor) -> (usize, usize) {
        self.nodes[x.id].dims2()
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, a: DiffTensor, b: DiffTensor, op: &str) -> Result<()> {
        if self.nodes[a.id].data.len() != self.nodes[b.id].data.len() {
            return Err(Error::Shape(format!(
                "{op}: operand sizes {} vs {}",
                self.nodes[a.id].data.len(),
                self.nodes[b.id].data.len()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "add")?;
        self.ops.push(Op::Add { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "sub")?;
        self.ops.push(Op::Sub { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    pub fn mul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "mul")?;
        self.ops.push(Op::Mul { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    pub fn scale(&mut self, a: DiffTensor, c: f64) -> Result<DiffTensor> {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| c * x).collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "scale")?;
        self.ops.push(Op::Scale { a: a.id, c, out: out.id });
        Ok(out)
    }

    /// Broadcast add of a length-`cols` bias onto every row of `a`.
    pub fn add_row(&mut self, a: DiffTensor, bias: DiffTensor) -> Result<DiffTensor> {
        let (rows, cols) = self.dims2(a);
        if self.nodes[bias.id].data.len() != cols {
            return Err(Error::Shape(format!(
                "add_row: bias length {} vs {cols} columns",
                self.nodes[bias.id].data.len()
            )));
        }
        let mut data = self.nodes[a.id].data.clone();
        for r in 0..rows {
            for (j, bv) in self.nodes[bias.id].data.iter().enumerate() {
                data[r * cols + j] += bv;
            }
        }
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "add_row")?;
        self.ops.push(Op::AddRow { a: a.id, bias: bias.id, out: out.id, rows, cols });
        Ok(out)
    }

    pub fn relu(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "relu")?;
        self.ops.push(Op::Relu { a: a.id, out: out.id });
        Ok(out)
    }

    pub fn tanh(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "tanh")?;
        self.ops.push(Op::Tanh { a: a.id, out: out.id });
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "sigmoid")?;
        self.ops.push(Op::Sigmoid { a: a.id, out: out.id });
        Ok(out)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul: inner axes {ka} vs {kb}")));
        }
        let mut data = vec![0.0; m * n];
        gemm_acc(
            &mut data,
            &self.nodes[a.id].data,
            &self.nodes[b.id].data,
            m,
            ka,
            n,
            false,
            false,
            1.0,
            0.0,
        );
        let out = self.checked(data, vec![m, n], "matmul")?;
        self.ops.push(Op::Matmul { a: a.id, b: b.id, out: out.id, m, k: ka, n });
        Ok(out)
    }

    /// out = a · bᵀ; `a` is m×k and `b` is n×k.
    pub fn matmul_nt(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let (m, ka) = self.dims2(a);
        let (n, kb) = self.dims2(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul_nt: inner axes {ka} vs {kb}")));
        }
        let mut data = vec![0.0; m * n];
        gemm_acc(
            &mut data,
            &self.nodes[a.id].data,
            &self.nodes[b.id].data,
            m,
            ka,
            n,
            false,
            true,
            1.0,
            0.0,
        );
        let out = self.checked(data, vec![m, n], "matmul_nt")?;
        self.ops.push(Op::MatmulNt { a: a.id, b: b.id, out: out.id, m, k: ka, n });
        Ok(out)
    }

    // ── shape plumbing ──────────────────────────────────────────────

    pub fn reshape(&mut self, a: DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.id].data.len() {
            return Err(Error::Shape(format!(
                "reshape: {} values to {:?}",
                self.nodes[a.id].data.len(),
                shape
            )));
        }
        let data = self.nodes[a.id].data.clone();
        let out = self.push(data, shape.to_vec());
        self.ops.push(Op::Reshape { a: a.id, out: out.id });
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: DiffTensor, start: usize, rows: usize) -> Result<DiffTensor> {
        let (rows_in, cols) = self.dims2(a);
        if start + rows > rows_in {
            return Err(Error::Shape(format!(
                "slice_rows: rows {start}..{} of {rows_in}",
                start + rows
            )));
        }
        let data = self.nodes[a.id].data[start * cols..(start + rows) * cols].to_vec();
        let out = self.push(data, vec![rows, cols]);
        self.ops.push(Op::SliceRows { a: a.id, out: out.id, start, rows, cols });
        Ok(out)
    }

    pub fn slice_cols(&mut self, a: DiffTensor, start: usize, cols_out: usize) -> Result<DiffTensor> {
        let (rows, cols_in) = self.dims2(a);
        if start + cols_out > cols_in {
            return Err(Error::Shape(format!(
                "slice_cols: cols {start}..{} of {cols_in}",
                start + cols_out
            )));
        }
        let src = &self.nodes[a.id].data;
        let mut data = Vec::with_capacity(rows * cols_out);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols_in + start..r * cols_in + start + cols_out]);
        }
        let out = self.push(data, vec![rows, cols_out]);
        self.ops.push(Op::SliceCols { a: a.id, out: out.id, start, cols_out, rows, cols_in });
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no inputs".into()));
        }
        let (_, cols) = self.dims2(parts[0]);
        let mut data = Vec::new();
        let mut inputs = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != cols {
                return Err(Error::Shape(format!("concat_rows: columns {c} vs {cols}")));
            }
            data.extend_from_slice(&self.nodes[p.id].data);
            inputs.push((p.id, r));
        }
        let rows: usize = inputs.iter().map(|&(_, r)| r).sum();
        let out = self.push(data, vec![rows, cols]);
        self.ops.push(Op::ConcatRows { inputs, out: out.id, cols });
        Ok(out)
    }

    pub fn concat_cols(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor> {
        let (ra, ca) = self.dims2(a);
        let (rb, cb) = self.dims2(b);
        if ra != rb {
            return Err(Error::Shape(format!("concat_cols: rows {ra} vs {rb}")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.nodes[a.id].data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.id].data[r * cb..(r + 1) * cb]);
        }
        let out = self.push(data, vec![ra, ca + cb]);
        self.ops.push(Op::ConcatCols { a: a.id, b: b.id, out: out.id, rows: ra, ca, cb });
        Ok(out)
    }

    /// Row gather: out row i = a row indices[i]. Backward scatter-adds.
    pub fn gather_rows(&mut self, a: DiffTensor, indices: &[usize]) -> Result<DiffTensor> {
        let (rows_in, cols) = self.dims2(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows_in) {
            return Err(Error::Shape(format!("gather_rows: index {bad} of {rows_in}")));
        }
        let src = &self.nodes[a.id].data;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = self.push(data, vec![indices.len(), cols]);
        self.ops.push(Op::GatherRows { a: a.id, out: out.id, indices: indices.to_vec(), cols });
        Ok(out)
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, a: DiffTensor, group: usize) -> Result<DiffTensor> {
        let (rows_in, cols) = self.dims2(a);
        if group == 0 || rows_in % group != 0 {
            return Err(Error::Shape(format!(
                "group_mean_rows: {rows_in} rows not divisible by group {group}"
            )));
        }
        let rows_out = rows_in / group;
        let src = &self.nodes[a.id].data;
        let mut data = vec![0.0; rows_out * cols];
        for r in 0..rows_in {
            let o = r / group;
            for j in 0..cols {
                data[o * cols + j] += src[r * cols + j] / group as f64;
            }
        }
        let out = self.checked(data, vec![rows_out, cols], "group_mean_rows")?;
        self.ops.push(Op::GroupMeanRows { a: a.id, out: out.id, group, rows_out, cols });
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let s: f64 = self.nodes[a.id].data.iter().sum();
        let out = self.checked(vec![s], vec![1], "sum_all")?;
        self.ops.push(Op::SumAll { a: a.id, out: out.id });
        Ok(out)
    }

    pub fn mean_all(&mut self, a: DiffTensor) -> Result<DiffTensor> {
        let n = self.nodes[a.id].data.len();
        if n == 0 {
            return Err(Error::Shape("mean_all of empty tensor".into()));
        }
        let s: f64 = self.nodes[a.id].data.iter().sum::<f64>() / n as f64;
        let out = self.checked(vec![s], vec![1], "mean_all")?;
        self.ops.push(Op::MeanAll { a: a.id, out: out.id });
        Ok(out)
    }

    // ── structured ops ──────────────────────────────────────────────

    /// Row-wise softmax over the square t×t matrix `a`, restricted to the
    /// entries where `mask` is true. Masked entries are exactly 0 in the
    /// output and receive no gradient. A fully-masked row is a contract
    /// violation.
    pub fn masked_softmax(&mut self, a: DiffTensor, mask: &[bool], t: usize) -> Result<DiffTensor> {
        if self.nodes[a.id].data.len() != t * t || mask.len() != t * t {
            return Err(Error::Shape(format!(
                "masked_softmax: expected {t}×{t} logits and mask"
            )));
        }
        let src = &self.nodes[a.id].data;
        let mut data = vec![0.0; t * t];
        for r in 0..t {
            let row = &src[r * t..(r + 1) * t];
            let mrow = &mask[r * t..(r + 1) * t];
            let mut max = f64::NEG_INFINITY;
            for (v, &ok) in row.iter().zip(mrow) {
                if ok && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("masked_softmax: row {r} fully masked")));
            }
            let mut sum = 0.0;
            for (j, (&v, &ok)) in row.iter().zip(mrow).enumerate() {
                if ok {
                    let e = (v - max).exp();
                    data[r * t + j] = e;
                    sum += e;
                }
            }
            for (j, &ok) in mrow.iter().enumerate() {
                if ok {
                    data[r * t + j] /= sum;
                }
            }
        }
        let out = self.checked(data, vec![t, t], "masked_softmax")?;
        self.ops.push(Op::MaskedSoftmax { a: a.id, out: out.id, t, mask: mask.to_vec() });
        Ok(out)
    }

    /// Elementwise product with a fixed 0/1 mask. The mask is treated as a
    /// constant in backward (straight-through over the kept set).
    pub fn mask_mul(&mut self, a: DiffTensor, mask: &[f64]) -> Result<DiffTensor> {
        if self.nodes[a.id].data.len() != mask.len() {
            return Err(Error::Shape(format!(
                "mask_mul: {} values vs mask {}",
                self.nodes[a.id].data.len(),
                mask.len()
            )));
        }
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.checked(data, shape, "mask_mul")?;
        self.ops.push(Op::MaskMul { a: a.id, out: out.id, mask: mask.to_vec() });
        Ok(out)
    }

    /// Mean binary cross-entropy with logits against constant targets,
    /// computed in the numerically stable max/softplus form.
    pub fn bce_with_logits(&mut self, logits: DiffTensor, targets: &[f64]) -> Result<DiffTensor> {
        let n = self.nodes[logits.id].data.len();
        if n != targets.len() || n == 0 {
            return Err(Error::Shape(format!(
                "bce_with_logits: {n} logits vs {} targets",
                targets.len()
            )));
        }
        let mut acc = 0.0;
        for (&l, &y) in self.nodes[logits.id].data.iter().zip(targets) {
            acc += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        }
        let out = self.checked(vec![acc / n as f64], vec![1], "bce_with_logits")?;
        self.ops.push(Op::BceWithLogits { logits: logits.id, out: out.id, targets: targets.to_vec() });
        Ok(out)
    }

    /// Mean softmax cross-entropy of B×C logits against constant labels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: DiffTensor,
        labels: &[usize],
    ) -> Result<DiffTensor> {
        let (rows, classes) = self.dims2(logits);
        if rows != labels.len() || rows == 0 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {rows} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: label {bad} of {classes} classes"
            )));
        }
        let src = &self.nodes[logits.id].data;
        let mut acc = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            acc += lse - row[y];
        }
        let out = self.checked(vec![acc / rows as f64], vec![1], "softmax_cross_entropy")?;
        self.ops.push(Op::SoftmaxXent {
            logits: logits.id,
            out: out.id,
            labels: labels.to_vec(),
            classes,
        });
        Ok(out)
    }

    /// Record an op whose forward value was computed by the caller and
    /// whose backward is implemented by the [`CustomOp`] built from the
    /// freshly created output handle.
    pub fn custom(
        &mut self,
        data: Vec<f64>,
        shape: &[usize],
        opname: &str,
        make_op: impl FnOnce(DiffTensor) -> Box<dyn CustomOp>,
    ) -> Result<DiffTensor> {
        let out = self.checked(data, shape.to_vec(), opname)?;
        self.ops.push(Op::Custom(make_op(out)));
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Run the reverse sweep from a scalar loss. Gradients of earlier
    /// backward calls on the same tape are discarded first.
    pub fn backward(&mut self, loss: DiffTensor) -> Result<()> {
        if self.nodes[loss.id].data.len() != 1 {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        self.grads[loss.id][0] = 1.0;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for op in self.ops.iter().rev() {
            backward_op(op, nodes, grads);
        }
        Ok(())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Split the grad arena at `out` so the output gradient can be read while
/// input gradients are accumulated. Ops always create their output after
/// their inputs, so every input id is strictly below `out`.
fn split_out(grads: &mut [Vec<f64>], out: usize) -> (&mut [Vec<f64>], &[f64]) {
    let (lo, hi) = grads.split_at_mut(out);
    (lo, &hi[0])
}

fn backward_op(op: &Op, nodes: &[Node], grads: &mut Vec<Vec<f64>>) {
    match op {
        Op::Add { a, b, out } => {
            let (lo, g) = split_out(grads, *out);
            if *a == *b {
                for (ga, &gi) in lo[*a].iter_mut().zip(g) {
                    *ga += 2.0 * gi;
                }
            } else {
                let (first, second) = if a < b { (*a, *b) } else { (*b, *a) };
                let (l2, h2) = lo.split_at_mut(second);
                for (ga, &gi) in l2[first].iter_mut().zip(g.iter()) {
                    *ga += gi;
                }
                for (gb, &gi) in h2[0].iter_mut().zip(g.iter()) {
                    *gb += gi;
                }
            }
        }
        Op::Sub { a, b, out } => {
            let (lo, g) = split_out(grads, *out);
            if *a == *b {
                // a - a: gradients cancel.
            } else {
                for (i, &gi) in g.iter().enumerate() {
                    lo[*a][i] += gi;
                }
                for (i, &gi) in g.iter().enumerate() {
                    lo[*b][i] -= gi;
                }
            }
        }
        Op::Mul { a, b, out } => {
            let (lo, g) = split_out(grads, *out);
            let av = &nodes[*a].data;
            let bv = &nodes[*b].data;
            for (i, &gi) in g.iter().enumerate() {
                lo[*a][i] += gi * bv[i];
            }
            for (i, &gi) in g.iter().enumerate() {
                lo[*b][i] += gi * av[i];
            }
        }
        Op::Scale { a, c, out } => {
            let (lo, g) = split_out(grads, *out);
            for (ga, &gi) in lo[*a].iter_mut().zip(g) {
                *ga += c * gi;
            }
        }
        Op::AddRow { a, bias, out, rows, cols } => {
            let (lo, g) = split_out(grads, *out);
            for (ga, &gi) in lo[*a].iter_mut().zip(g.iter()) {
                *ga += gi;
            }
            for r in 0..*rows {
                for j in 0..*cols {
                    lo[*bias][j] += g[r * cols + j];
                }
            }
        }
        Op::Relu { a, out } => {
            let (lo, g) = split_out(grads, *out);
            let av = &nodes[*a].data;
            for (i, &gi) in g.iter().enumerate() {
                if av[i] > 0.0 {
                    lo[*a][i] += gi;
                }
            }
        }
        Op::Tanh { a, out } => {
            let (lo, g) = split_out(grads, *out);
            let ov = &nodes[*out].data;
            for (i, &gi) in g.iter().enumerate() {
                lo[*a][i] += gi * (1.0 - ov[i] * ov[i]);
            }
        }
        Op::Sigmoid { a, out } => {
            let (lo, g) = split_out(grads, *out);
            let ov = &nodes[*out].data;
            for (i, &gi) in g.iter().enumerate() {
                lo[*a][i] += gi * ov[i] * (1.0 - ov[i]);
            }
        }
        Op::Matmul { a, b, out, m, k, n } => {
            let (lo, g) = split_out(grads, *out);
            // dA += dC·Bᵀ ; dB += Aᵀ·dC
            gemm_acc(&mut lo[*a], g, &nodes[*b].data, *m, *n, *k, false, true, 1.0, 1.0);
            gemm_acc(&mut lo[*b], &nodes[*a].data, g, *k, *m, *n, true, false, 1.0, 1.0);
        }
        Op::MatmulNt { a, b, out, m, k, n } => {
            let (lo, g) = split_out(grads, *out);
            // C = A·Bᵀ: dA += dC·B ; dB += dCᵀ·A
            gemm_acc(&mut lo[*a], g, &nodes[*b].data, *m, *n, *k, false, false, 1.0, 1.0);
            gemm_acc(&mut lo[*b], g, &nodes[*a].data, *n, *m, *k, true, false, 1.0, 1.0);
        }
        Op::Reshape { a, out } => {
            let (lo, g) = split_out(grads, *out);
            for (ga, &gi) in lo[*a].iter_mut().zip(g) {
                *ga += gi;
            }
        }
        Op::SliceRows { a, out, start, rows, cols } => {
            let (lo, g) = split_out(grads, *out);
            let base = start * cols;
            for i in 0..rows * cols {
                lo[*a][base + i] += g[i];
            }
        }
        Op::SliceCols { a, out, start, cols_out, rows, cols_in } => {
            let (lo, g) = split_out(grads, *out);
            for r in 0..*rows {
                for j in 0..*cols_out {
                    lo[*a][r * cols_in + start + j] += g[r * cols_out + j];
                }
            }
        }
        Op::ConcatRows { inputs, out, cols } => {
            let (lo, g) = split_out(grads, *out);
            let mut offset = 0;
            for &(id, rows) in inputs {
                let n = rows * cols;
                for i in 0..n {
                    lo[id][i] += g[offset + i];
                }
                offset += n;
            }
        }
        Op::ConcatCols { a, b, out, rows, ca, cb } => {
            let (lo, g) = split_out(grads, *out);
            let cols = ca + cb;
            for r in 0..*rows {
                for j in 0..*ca {
                    lo[*a][r * ca + j] += g[r * cols + j];
                }
                for j in 0..*cb {
                    lo[*b][r * cb + j] += g[r * cols + ca + j];
                }
            }
        }
        Op::GatherRows { a, out, indices, cols } => {
            let (lo, g) = split_out(grads, *out);
            for (r, &src) in indices.iter().enumerate() {
                for j in 0..*cols {
                    lo[*a][src * cols + j] += g[r * cols + j];
                }
            }
        }
        Op::GroupMeanRows { a, out, group, rows_out, cols } => {
            let (lo, g) = split_out(grads, *out);
            let inv = 1.0 / *group as f64;
            for o in 0..*rows_out {
                for r in 0..*group {
                    for j in 0..*cols {
                        lo[*a][(o * group + r) * cols + j] += g[o * cols + j] * inv;
                    }
                }
            }
        }
        Op::SumAll { a, out } => {
            let (lo, g) = split_out(grads, *out);
            let gi = g[0];
            for ga in lo[*a].iter_mut() {
                *ga += gi;
            }
        }
        Op::MeanAll { a, out } => {
            let (lo, g) = split_out(grads, *out);
            let gi = g[0] / nodes[*a].data.len() as f64;
            for ga in lo[*a].iter_mut() {
                *ga += gi;
            }
        }
        Op::MaskedSoftmax { a, out, t, mask } => {
            let (lo, g) = split_out(grads, *out);
            let p = &nodes[*out].data;
            for r in 0..*t {
                let base = r * t;
                let mut dot = 0.0;
                for j in 0..*t {
                    if mask[base + j] {
                        dot += p[base + j] * g[base + j];
                    }
                }
                for j in 0..*t {
                    if mask[base + j] {
                        lo[*a][base + j] += p[base + j] * (g[base + j] - dot);
                    }
                }
            }
        }
        Op::MaskMul { a, out, mask } => {
            let (lo, g) = split_out(grads, *out);
            for (i, &gi) in g.iter().enumerate() {
                lo[*a][i] += gi * mask[i];
            }
        }
        Op::BceWithLogits { logits, out, targets } => {
            let (lo, g) = split_out(grads, *out);
            let scale = g[0] / targets.len() as f64;
            let lv = &nodes[*logits].data;
            for (i, &y) in targets.iter().enumerate() {
                lo[*logits][i] += scale * (stable_sigmoid(lv[i]) - y);
            }
        }
        Op::SoftmaxXent { logits, out, labels, classes } => {
            let (lo, g) = split_out(grads, *out);
            let scale = g[0] / labels.len() as f64;
            let lv = &nodes[*logits].data;
            for (r, &y) in labels.iter().enumerate() {
                let row = &lv[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for j in 0..*classes {
                    let p = (row[j] - max).exp() / sum;
                    let target = if j == y { 1.0 } else { 0.0 };
                    lo[*logits][r * classes + j] += scale * (p - target);
                }
            }
        }
        Op::Custom(op) => {
            let mut ctx = BackwardCtx { nodes, grads };
            op.backward(&mut ctx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{central_diff, max_rel_err};
    use crate::numcore::rng::Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.leaf(&t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(&t2(&[vec![1.0, 2.0]]));
        let b = tape.leaf(&t2(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    /// Finite-difference check of a scalar function of one flattened input.
    fn check_grad<F>(shape: &[usize], seed: u64, f: F, tol: f64)
    where
        F: Fn(&mut Tape, DiffTensor) -> Result<DiffTensor>,
    {
        let mut rng = Rng::from_seed(seed);
        let x0 = rng.gaussian_tensor(shape);
        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let loss = f(&mut tape, x).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).to_vec();

        let numeric = central_diff(
            &mut |v: &[f64]| {
                let mut t = Tape::new();
                let x = t.leaf_from(v.to_vec(), shape);
                let loss = f(&mut t, x)?;
                Ok(t.scalar_value(loss))
            },
            x0.data(),
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric, 1e-8);
        assert!(err < tol, "rel err {err} exceeds {tol}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // 4×3 · 3×2 against a fixed second operand, reduced by sum.
        let mut rng = Rng::from_seed(42);
        let w = rng.gaussian_tensor(&[3, 2]);
        check_grad(
            &[4, 3],
            1,
            move |tape, x| {
                let wl = tape.leaf(&w);
                let y = tape.matmul(x, wl)?;
                let y2 = tape.mul(y, y)?;
                tape.sum_all(y2)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_and_activation_gradients() {
        check_grad(
            &[3, 4],
            2,
            |tape, x| {
                let t = tape.tanh(x)?;
                let s = tape.sigmoid(t)?;
                let r = tape.relu(s)?;
                let m = tape.mul(r, x)?;
                tape.mean_all(m)
            },
            1e-6,
        );
    }

    #[test]
    fn shape_op_gradients() {
        check_grad(
            &[4, 6],
            3,
            |tape, x| {
                let a = tape.slice_cols(x, 1, 3)?;
                let b = tape.slice_rows(x, 0, 2)?;
                let br = tape.reshape(b, &[4, 3])?;
                let c = tape.add(a, br)?;
                let g = tape.gather_rows(c, &[0, 0, 2, 3, 1])?;
                let d = tape.concat_rows(&[c, g])?;
                let e = tape.group_mean_rows(d, 3)?;
                let s = tape.mul(e, e)?;
                tape.sum_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn concat_cols_and_add_row_gradients() {
        let mut rng = Rng::from_seed(9);
        let other = rng.gaussian_tensor(&[3, 2]);
        check_grad(
            &[3, 5],
            4,
            move |tape, x| {
                let o = tape.leaf(&other);
                let c = tape.concat_cols(x, o)?;
                let bias = tape.slice_rows(x, 0, 1)?;
                let bias = tape.reshape(bias, &[5])?;
                let xb = tape.add_row(x, bias)?;
                let y = tape.mul(xb, xb)?;
                let s1 = tape.sum_all(y)?;
                let s2 = tape.sum_all(c)?;
                tape.add(s1, s2)
            },
            1e-6,
        );
    }

    #[test]
    fn masked_softmax_single_entry_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2.7], &[1, 1]);
        let s = tape.masked_softmax(x, &[true], 1).unwrap();
        assert_eq!(tape.data(s), &[1.0]);
    }

    #[test]
    fn masked_softmax_uniform_over_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![0.5; 9], &[3, 3]);
        let mask = causal_mask(3);
        let s = tape.masked_softmax(x, &mask, 3).unwrap();
        let d = tape.data(s);
        // Row 2 allows three equal logits.
        for j in 0..3 {
            assert!((d[6 + j] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    fn causal_mask(t: usize) -> Vec<bool> {
        let mut m = vec![false; t * t];
        for r in 0..t {
            for c in 0..=r {
                m[r * t + c] = true;
            }
        }
        m
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_upper_triangle_zero() {
        let mut rng = Rng::from_seed(5);
        let x0 = rng.gaussian_tensor(&[4, 4]);
        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let s = tape.masked_softmax(x, &causal_mask(4), 4).unwrap();
        let d = tape.data(s);
        for r in 0..4 {
            let sum: f64 = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            for c in r + 1..4 {
                assert_eq!(d[r * 4 + c], 0.0);
            }
        }
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_contract_violation() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![0.0; 4], &[2, 2]);
        let err = tape.masked_softmax(x, &[true, false, false, false], 2);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn masked_softmax_gradient_matches_finite_differences() {
        let mask = causal_mask(4);
        check_grad(
            &[4, 4],
            6,
            move |tape, x| {
                let s = tape.masked_softmax(x, &mask, 4)?;
                let w = tape.mul(s, s)?;
                tape.sum_all(w)
            },
            1e-6,
        );
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        let logits = tape.leaf_from(vec![0.0, 0.0], &[2]);
        let loss = tape.bce_with_logits(logits, &[1.0, 0.0]).unwrap();
        assert!((tape.scalar_value(loss) - (2f64).ln()).abs() < 1e-15);

        // Saturated logits drive the loss to ~0.
        let good = tape.leaf_from(vec![30.0, -30.0], &[2]);
        let loss = tape.bce_with_logits(good, &[1.0, 0.0]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-12);
    }

    #[test]
    fn bce_and_xent_gradients() {
        check_grad(
            &[6],
            7,
            |tape, x| tape.bce_with_logits(x, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]),
            1e-6,
        );
        check_grad(
            &[4, 3],
            8,
            |tape, x| tape.softmax_cross_entropy(x, &[0, 2, 1, 2]),
            1e-6,
        );
    }

    #[test]
    fn tape_linearity_of_backward() {
        let mut rng = Rng::from_seed(10);
        let x0 = rng.gaussian_tensor(&[3, 3]);
        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let a = tape.tanh(x).unwrap();
        let la = tape.sum_all(a).unwrap();
        let b = tape.mul(x, x).unwrap();
        let lb = tape.mean_all(b).unwrap();
        let lsum = tape.add(la, lb).unwrap();

        tape.backward(la).unwrap();
        let ga = tape.grad(x).to_vec();
        tape.backward(lb).unwrap();
        let gb = tape.grad(x).to_vec();
        tape.backward(lsum).unwrap();
        let gs = tape.grad(x).to_vec();
        for i in 0..gs.len() {
            assert!((gs[i] - (ga[i] + gb[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn unused_tensor_gets_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf_from(vec![1.0, 2.0], &[2]);
        let unused = tape.leaf_from(vec![3.0, 4.0], &[2]);
        let loss = tape.sum_all(used).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_op_output_is_numeric_error() {
        let mut tape = Tape::new();
        let big = tape.leaf_from(vec![1e308], &[1]);
        let r = tape.mul(big, big);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn self_add_accumulates_both_paths() {
        // f(x) = sum(x + x) has gradient 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1.0, -2.0], &[2]);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[2.0, 2.0]);
    }
}
