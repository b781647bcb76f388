//! Generation quality metrics: unbiased MMD² two-sample estimates with a
//! mixture-of-RBF kernel, a recognition classifier trained on real data,
//! and label-mixing sweeps scored by that classifier.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::gan::DiscConfig;
use crate::generator::{
    generate_batch, Checkpoint, Conditioning, GenConfig, GeneratorParams,
};
use crate::numcore::{
    gru_cell, init_uniform, AdamState, DiffTensor, GruHandles, GruParams, Rng, Tape, Tensor,
};
use crate::skeleton::{ActionSequence, Dataset, SkeletonTopology};
use crate::{Error, Result};

// ── kernels ─────────────────────────────────────────────────────────

/// Normalized mixture of RBF kernels: k(x, y) = mean_i exp(−γ_i·‖x−y‖²).
/// Values lie in (0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureRbf {
    gammas: Vec<f64>,
    bandwidths: Vec<f64>,
}

/// Bandwidth factors applied to the median pairwise distance.
pub const BANDWIDTH_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl MixtureRbf {
    /// Single-component kernel exp(−γ·d²).
    pub fn from_gamma(gamma: f64) -> Self {
        let sigma = (0.5 / gamma).sqrt();
        MixtureRbf { gammas: vec![gamma], bandwidths: vec![sigma] }
    }

    /// Bandwidths σ_i with k_i(x,y) = exp(−‖x−y‖² / (2σ_i²)).
    pub fn from_bandwidths(bandwidths: &[f64]) -> Self {
        MixtureRbf {
            gammas: bandwidths.iter().map(|s| 0.5 / (s * s)).collect(),
            bandwidths: bandwidths.to_vec(),
        }
    }

    /// Median-pairwise-distance heuristic over the pooled samples, scaled
    /// by [`BANDWIDTH_FACTORS`].
    pub fn median_heuristic(x: &[Vec<f64>], y: &[Vec<f64>]) -> Self {
        let mut dists = Vec::new();
        let pooled: Vec<&Vec<f64>> = x.iter().chain(y.iter()).collect();
        for i in 0..pooled.len() {
            for j in i + 1..pooled.len() {
                dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let median = if dists.is_empty() {
            1.0
        } else {
            let mid = dists.len() / 2;
            if dists.len() % 2 == 0 {
                0.5 * (dists[mid - 1] + dists[mid])
            } else {
                dists[mid]
            }
        };
        let median = if median > 1e-12 { median } else { 1.0 };
        let bandwidths: Vec<f64> = BANDWIDTH_FACTORS.iter().map(|f| f * median).collect();
        MixtureRbf::from_bandwidths(&bandwidths)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2 = sq_dist(a, b);
        let sum: f64 = self.gammas.iter().map(|g| (-g * d2).exp()).sum();
        sum / self.gammas.len() as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ── MMD estimators ──────────────────────────────────────────────────

/// Deterministic ordering of sample sets (length, then data bits) so the
/// estimator can canonicalize its operands: float accumulation order then
/// no longer depends on which set is passed first.
fn set_order(a: &[Vec<f64>], b: &[Vec<f64>]) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        for (va, vb) in a.iter().zip(b) {
            for (xa, xb) in va.iter().zip(vb) {
                let c = xa.to_bits().cmp(&xb.to_bits());
                if c != std::cmp::Ordering::Equal {
                    return c;
                }
            }
        }
        std::cmp::Ordering::Equal
    })
}

/// Unbiased U-statistic estimate of MMD² between two vector sets. May be
/// slightly negative for close distributions. Exactly symmetric in its
/// arguments.
pub fn mmd_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], kernel: &MixtureRbf) -> Result<f64> {
    let (x, y) = if set_order(x, y) == std::cmp::Ordering::Greater {
        (y, x)
    } else {
        (x, y)
    };
    let (n, m) = (x.len(), y.len());
    if n < 2 || m < 2 {
        return Err(Error::Config(format!(
            "mmd_unbiased needs at least 2 samples per side, got {n} and {m}"
        )));
    }
    let dim = x[0].len();
    for v in x.iter().chain(y.iter()) {
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "mmd_unbiased: vector length {} vs {dim}",
                v.len()
            )));
        }
    }
    let mut xx = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            xx += kernel.eval(&x[i], &x[j]);
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            yy += kernel.eval(&y[i], &y[j]);
        }
    }
    let mut xy = 0.0;
    for xi in x {
        for yj in y {
            xy += kernel.eval(xi, yj);
        }
    }
    Ok(2.0 * xx / (n as f64 * (n - 1) as f64) + 2.0 * yy / (m as f64 * (m - 1) as f64)
        - 2.0 * xy / (n as f64 * m as f64))
}

/// Unbiased MMD² with the median-heuristic mixture kernel.
pub fn mmd_unbiased_median(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let kernel = MixtureRbf::median_heuristic(x, y);
    mmd_unbiased(x, y, &kernel)
}

fn check_equal_frames(real: &[&ActionSequence], gen: &[&ActionSequence]) -> Result<usize> {
    let first = real
        .first()
        .or(gen.first())
        .ok_or_else(|| Error::Config("empty sequence sets".into()))?;
    let t = first.frames();
    for s in real.iter().chain(gen.iter()) {
        if s.frames() != t {
            return Err(Error::Shape(format!(
                "sequence length mismatch: {} vs {t}",
                s.frames()
            )));
        }
    }
    Ok(t)
}

/// Mean over frame indices of the per-frame MMD² between flattened N·D
/// frame vectors.
pub fn mmd_avg(real: &[&ActionSequence], gen: &[&ActionSequence]) -> Result<f64> {
    let t = check_equal_frames(real, gen)?;
    let frame_vecs = |seqs: &[&ActionSequence], frame: usize| -> Vec<Vec<f64>> {
        seqs.iter()
            .map(|s| {
                let nd = s.joints() * s.dims();
                s.coords.data()[frame * nd..(frame + 1) * nd].to_vec()
            })
            .collect()
    };
    let mut acc = 0.0;
    for frame in 0..t {
        let x = frame_vecs(real, frame);
        let y = frame_vecs(gen, frame);
        acc += mmd_unbiased_median(&x, &y)?;
    }
    Ok(acc / t as f64)
}

/// MMD² between whole sequences flattened to T·N·D vectors.
pub fn mmd_seq(real: &[&ActionSequence], gen: &[&ActionSequence]) -> Result<f64> {
    check_equal_frames(real, gen)?;
    let flatten = |seqs: &[&ActionSequence]| -> Vec<Vec<f64>> {
        seqs.iter().map(|s| s.coords.data().to_vec()).collect()
    };
    mmd_unbiased_median(&flatten(real), &flatten(gen))
}

/// Summary of both MMD statistics for a real/generated comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct MmdReport {
    pub mmd_avg: f64,
    pub mmd_seq: f64,
    pub n_real: usize,
    pub n_gen: usize,
    /// Bandwidths of the sequence-level kernel.
    pub bandwidths: Vec<f64>,
}

pub fn mmd_report(real: &[&ActionSequence], gen: &[&ActionSequence]) -> Result<MmdReport> {
    check_equal_frames(real, gen)?;
    let flatten = |seqs: &[&ActionSequence]| -> Vec<Vec<f64>> {
        seqs.iter().map(|s| s.coords.data().to_vec()).collect()
    };
    let x = flatten(real);
    let y = flatten(gen);
    let kernel = MixtureRbf::median_heuristic(&x, &y);
    Ok(MmdReport {
        mmd_avg: mmd_avg(real, gen)?,
        mmd_seq: mmd_unbiased(&x, &y, &kernel)?,
        n_real: real.len(),
        n_gen: gen.len(),
        bandwidths: kernel.bandwidths().to_vec(),
    })
}

impl MmdReport {
    /// Human-readable lines followed by a machine-readable key=value block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "MMD comparison over {} real / {} generated sequences", self.n_real, self.n_gen);
        let _ = writeln!(out, "  per-frame average MMD^2: {:.6}", self.mmd_avg);
        let _ = writeln!(out, "  whole-sequence MMD^2:    {:.6}", self.mmd_seq);
        let bw: Vec<String> = self.bandwidths.iter().map(|b| format!("{b:.6e}")).collect();
        let _ = writeln!(out, "mmd_avg={:.12e}", self.mmd_avg);
        let _ = writeln!(out, "mmd_seq={:.12e}", self.mmd_seq);
        let _ = writeln!(out, "n_real={}", self.n_real);
        let _ = writeln!(out, "n_gen={}", self.n_gen);
        let _ = writeln!(out, "bandwidths={}", bw.join(","));
        out
    }
}

/// Parse the key=value block of a rendered report.
pub fn parse_key_values(text: &str) -> HashMap<String, String> {
    let mut map = HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if !k.contains(' ') {
                map.insert(k.to_string(), v.to_string());
            }
        }
    }
    map
}

// ── recognition classifier ──────────────────────────────────────────

/// Sequence classifier: the video discriminator architecture without label
/// conditioning and with a C-way head.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub gru: GruParams,
    pub head1_w: Tensor,
    pub head1_b: Tensor,
    pub head2_w: Tensor,
    pub head2_b: Tensor,
    pub classes: usize,
    pub frame_dim: usize,
    /// Sequences are centered on the frame-0 root joint before scoring.
    pub center: bool,
}

impl ClassifierParams {
    pub fn init(
        classes: usize,
        frame_dim: usize,
        cfg: &DiscConfig,
        center: bool,
        rng: &mut Rng,
    ) -> Self {
        ClassifierParams {
            gru: GruParams::init(frame_dim, cfg.hidden, rng),
            head1_w: init_uniform(&[cfg.hidden, cfg.head_hidden], cfg.hidden, rng),
            head1_b: Tensor::zeros(&[cfg.head_hidden]),
            head2_w: init_uniform(&[cfg.head_hidden, classes], cfg.head_hidden, rng),
            head2_b: Tensor::zeros(&[classes]),
            classes,
            frame_dim,
            center,
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("gru.w_x".into(), &self.gru.w_x),
            ("gru.w_h".into(), &self.gru.w_h),
            ("gru.bias".into(), &self.gru.bias),
            ("head1.w".into(), &self.head1_w),
            ("head1.b".into(), &self.head1_b),
            ("head2.w".into(), &self.head2_w),
            ("head2.b".into(), &self.head2_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gru.w_x".into(), &mut self.gru.w_x),
            ("gru.w_h".into(), &mut self.gru.w_h),
            ("gru.bias".into(), &mut self.gru.bias),
            ("head1.w".into(), &mut self.head1_w),
            ("head1.b".into(), &mut self.head1_b),
            ("head2.w".into(), &mut self.head2_w),
            ("head2.b".into(), &mut self.head2_b),
        ]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "classifier".into(),
            meta: vec![
                ("classes".into(), self.classes as f64),
                ("frame_dim".into(), self.frame_dim as f64),
                ("hidden".into(), self.gru.hidden as f64),
                ("head_hidden".into(), self.head1_b.len() as f64),
                ("center".into(), self.center as u8 as f64),
            ],
            tensors: self
                .named()
                .into_iter()
                .map(|(k, v)| (format!("cls.{k}"), v.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "classifier" {
            return Err(Error::Format(format!(
                "expected a `classifier` checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let classes = ckpt.meta_usize("classes")?;
        let frame_dim = ckpt.meta_usize("frame_dim")?;
        let cfg = DiscConfig {
            embed_dim: 1,
            hidden: ckpt.meta_usize("hidden")?,
            head_hidden: ckpt.meta_usize("head_hidden")?,
            frame_hidden: 1,
        };
        let center = ckpt.meta_usize("center")? != 0;
        let mut params =
            ClassifierParams::init(classes, frame_dim, &cfg, center, &mut Rng::from_seed(0));
        let map = ckpt.tensor_map();
        for (name, slot) in params.named_mut() {
            let key = format!("cls.{name}");
            let found = map
                .get(key.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor `{key}`")))?;
            if found.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{key}` has shape {:?}, expected {:?}",
                    found.shape(),
                    slot.shape()
                )));
            }
            *slot = (*found).clone();
        }
        Ok(params)
    }
}

#[derive(Clone, Copy, Debug)]
struct ClassifierHandles {
    gru: GruHandles,
    head1_w: DiffTensor,
    head1_b: DiffTensor,
    head2_w: DiffTensor,
    head2_b: DiffTensor,
}

impl ClassifierHandles {
    fn watch(tape: &mut Tape, p: &ClassifierParams) -> Self {
        ClassifierHandles {
            gru: GruHandles::watch(tape, &p.gru),
            head1_w: tape.leaf(&p.head1_w),
            head1_b: tape.leaf(&p.head1_b),
            head2_w: tape.leaf(&p.head2_w),
            head2_b: tape.leaf(&p.head2_b),
        }
    }

    fn all(&self) -> Vec<DiffTensor> {
        vec![
            self.gru.w_x,
            self.gru.w_h,
            self.gru.bias,
            self.head1_w,
            self.head1_b,
            self.head2_w,
            self.head2_b,
        ]
    }
}

fn cls_logits_batch(
    tape: &mut Tape,
    h: &ClassifierHandles,
    coords: DiffTensor,
    batch: usize,
    t: usize,
    frame_dim: usize,
) -> Result<DiffTensor> {
    let frames = tape.reshape(coords, &[batch * t, frame_dim])?;
    let mut state = tape.leaf(&Tensor::zeros(&[batch, h.gru.hidden]));
    for step in 0..t {
        let rows: Vec<usize> = (0..batch).map(|bi| bi * t + step).collect();
        let frame = tape.gather_rows(frames, &rows)?;
        state = gru_cell(tape, frame, state, &h.gru)?;
    }
    let l1 = tape.matmul(state, h.head1_w)?;
    let l1 = tape.add_row(l1, h.head1_b)?;
    let l1 = tape.relu(l1)?;
    let logits = tape.matmul(l1, h.head2_w)?;
    tape.add_row(logits, h.head2_b)
}

fn batch_coords(seqs: &[&ActionSequence], center: bool) -> (Vec<f64>, usize, usize) {
    let t = seqs[0].frames();
    let frame_dim = seqs[0].joints() * seqs[0].dims();
    let mut flat = Vec::with_capacity(seqs.len() * t * frame_dim);
    for s in seqs {
        if center {
            flat.extend_from_slice(s.centered_on_root().coords.data());
        } else {
            flat.extend_from_slice(s.coords.data());
        }
    }
    (flat, t, frame_dim)
}

/// Softmax class probabilities for a batch of sequences.
pub fn classify(params: &ClassifierParams, seqs: &[&ActionSequence]) -> Result<Vec<Vec<f64>>> {
    if seqs.is_empty() {
        return Err(Error::Config("classify: empty input".into()));
    }
    let (flat, t, frame_dim) = batch_coords(seqs, params.center);
    if frame_dim != params.frame_dim {
        return Err(Error::Shape(format!(
            "classifier expects frame dim {}, got {frame_dim}",
            params.frame_dim
        )));
    }
    let mut tape = Tape::new();
    let h = ClassifierHandles::watch(&mut tape, params);
    let coords = tape.leaf_from(flat, &[seqs.len() * t, frame_dim]);
    let logits = cls_logits_batch(&mut tape, &h, coords, seqs.len(), t, frame_dim)?;
    let data = tape.data(logits);
    let c = params.classes;
    let mut probs = Vec::with_capacity(seqs.len());
    for row in data.chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        probs.push(exps.iter().map(|e| e / sum).collect());
    }
    Ok(probs)
}

pub fn predict(params: &ClassifierParams, seqs: &[&ActionSequence]) -> Result<Vec<usize>> {
    Ok(classify(params, seqs)?
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .expect("non-empty class list")
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct ClassifierTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub head_hidden: usize,
    pub center: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 500,
            batch: 32,
            lr: 1e-3,
            seed: 11,
            hidden: 64,
            head_hidden: 64,
            center: true,
        }
    }
}

pub struct ClassifierTrainOutput {
    pub params: ClassifierParams,
    /// Accuracy on the dataset's held-out split (train split when no test
    /// split exists).
    pub held_out_accuracy: f64,
}

/// Cross-entropy training of the recognition classifier on the train
/// split, reporting held-out accuracy.
pub fn train_classifier(
    dataset: &Dataset,
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierTrainOutput> {
    dataset.validate()?;
    if dataset.classes() < 2 {
        return Err(Error::Config(
            "classifier training needs at least 2 classes".into(),
        ));
    }
    if dataset.split.train.is_empty() {
        return Err(Error::Config("dataset has no training sequences".into()));
    }
    let frame_dim = dataset.topology.n_joints * dataset.topology.coord_dims;
    let arch = DiscConfig {
        embed_dim: 1,
        hidden: cfg.hidden,
        head_hidden: cfg.head_hidden,
        frame_hidden: 1,
    };
    let mut rng = Rng::from_seed(cfg.seed);
    let mut params =
        ClassifierParams::init(dataset.classes(), frame_dim, &arch, cfg.center, &mut rng);
    let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::new(cfg.lr, &shape_refs);

    let train: Vec<&ActionSequence> = dataset.train_sequences().collect();
    let t = train[0].frames();
    for _ in 0..cfg.steps {
        let picks: Vec<&ActionSequence> =
            (0..cfg.batch).map(|_| train[rng.below(train.len())]).collect();
        let labels: Vec<usize> = picks.iter().map(|s| s.label).collect();
        let (flat, _, _) = batch_coords(&picks, cfg.center);
        let mut tape = Tape::new();
        let h = ClassifierHandles::watch(&mut tape, &params);
        let coords = tape.leaf_from(flat, &[cfg.batch * t, frame_dim]);
        let logits = cls_logits_batch(&mut tape, &h, coords, cfg.batch, t, frame_dim)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = h.all().iter().map(|&p| tape.grad_tensor(p)).collect();
        let mut named = params.named_mut();
        let mut refs: Vec<(&str, &mut Tensor)> =
            named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        adam.step(&mut refs, &grads)?;
    }

    let held_out: Vec<&ActionSequence> = if dataset.split.test.is_empty() {
        dataset.train_sequences().collect()
    } else {
        dataset.test_sequences().collect()
    };
    let preds = predict(&params, &held_out)?;
    let correct = preds
        .iter()
        .zip(&held_out)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(ClassifierTrainOutput {
        params,
        held_out_accuracy: correct as f64 / held_out.len() as f64,
    })
}

// ── recognition accuracy ────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct RecognitionReport {
    /// (sequence count, correct count) per class index.
    pub per_class: Vec<(usize, usize)>,
    /// Average of per-class accuracies over classes that appear.
    pub mean_accuracy: f64,
    /// Plain fraction of correctly recognized sequences.
    pub overall_accuracy: f64,
}

impl RecognitionReport {
    pub fn render(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        for (c, (count, correct)) in self.per_class.iter().enumerate() {
            if *count == 0 {
                continue;
            }
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
            let _ = writeln!(
                out,
                "  {name}: {:.3} ({correct}/{count})",
                *correct as f64 / *count as f64
            );
        }
        let _ = writeln!(out, "recognition_mean={:.12e}", self.mean_accuracy);
        let _ = writeln!(out, "recognition_overall={:.12e}", self.overall_accuracy);
        out
    }
}

/// Fraction of generated sequences classified into their conditioning
/// label, per class and averaged.
pub fn recognition_accuracy(
    classifier: &ClassifierParams,
    generated: &[&ActionSequence],
) -> Result<RecognitionReport> {
    if generated.is_empty() {
        return Err(Error::Config("recognition_accuracy: empty input".into()));
    }
    if let Some(bad) = generated.iter().find(|s| s.label >= classifier.classes) {
        return Err(Error::Config(format!(
            "label {} outside classifier's {} classes",
            bad.label, classifier.classes
        )));
    }
    let preds = predict(classifier, generated)?;
    let mut per_class = vec![(0usize, 0usize); classifier.classes];
    for (pred, seq) in preds.iter().zip(generated) {
        per_class[seq.label].0 += 1;
        if *pred == seq.label {
            per_class[seq.label].1 += 1;
        }
    }
    let present: Vec<f64> = per_class
        .iter()
        .filter(|(count, _)| *count > 0)
        .map(|(count, correct)| *correct as f64 / *count as f64)
        .collect();
    let overall_correct: usize = per_class.iter().map(|(_, c)| c).sum();
    Ok(RecognitionReport {
        mean_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        overall_accuracy: overall_correct as f64 / generated.len() as f64,
        per_class,
    })
}

// ── mixing sweep ────────────────────────────────────────────────────

/// For each λ, generate sequences conditioned on λ·y1 + (1−λ)·y2 and
/// record the classifier's mean probability mass on y1.
#[allow(clippy::too_many_arguments)]
pub fn mixing_sweep(
    gen_params: &GeneratorParams,
    gen_cfg: &GenConfig,
    topo: &SkeletonTopology,
    y1: usize,
    y2: usize,
    lambdas: &[f64],
    n_per_lambda: usize,
    classifier: &ClassifierParams,
    rng: &mut Rng,
) -> Result<Vec<(f64, f64)>> {
    if y1 == y2 {
        return Err(Error::Config("mixing_sweep requires two distinct classes".into()));
    }
    if n_per_lambda == 0 {
        return Err(Error::Config("n_per_lambda must be positive".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mix = crate::generator::mix_labels(y1, y2, lambda, gen_cfg.classes)?;
        let cond = Conditioning::Mixtures(vec![mix; n_per_lambda]);
        let seqs = generate_batch(gen_params, gen_cfg, topo, &cond, rng)?;
        let refs: Vec<&ActionSequence> = seqs.iter().collect();
        let probs = classify(classifier, &refs)?;
        let mean_p1 = probs.iter().map(|p| p[y1]).sum::<f64>() / probs.len() as f64;
        rows.push((lambda, mean_p1));
    }
    Ok(rows)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// i.i.d. standard-Gaussian sequences matching a shape; the noise baseline
/// for MMD comparisons.
pub fn gaussian_noise_sequences(
    count: usize,
    t: usize,
    n: usize,
    d: usize,
    classes: usize,
    rng: &mut Rng,
) -> Vec<ActionSequence> {
    (0..count)
        .map(|i| {
            ActionSequence::new(rng.gaussian_tensor(&[t, n, d]), i % classes)
                .expect("gaussian draws are finite")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{synth_dataset, SynthConfig};

    fn gaussian_set(n: usize, dim: usize, mean: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| mean + rng.gaussian()).collect())
            .collect()
    }

    #[test]
    fn hand_computed_two_point_case() {
        // X = {0, 0}, Y = {1, 1}, single RBF with γ = 0.5:
        // xx = k(0,0) = 1, yy = 1, xy = e^{-0.5}
        // MMD² = 1 + 1 − 2e^{-0.5} = 2(1 − e^{-0.5})
        let x = vec![vec![0.0], vec![0.0]];
        let y = vec![vec![1.0], vec![1.0]];
        let kernel = MixtureRbf::from_gamma(0.5);
        let v = mmd_unbiased(&x, &y, &kernel).unwrap();
        let expect = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn same_distribution_is_near_zero() {
        let mut rng = Rng::from_seed(5);
        let x = gaussian_set(200, 8, 0.0, &mut rng);
        let y = gaussian_set(200, 8, 0.0, &mut rng);
        let v = mmd_unbiased_median(&x, &y).unwrap();
        assert!(v.abs() < 0.05, "same-distribution MMD² {v}");
        // The unbiased estimator may dip slightly negative but no further.
        assert!(v > -1e-2);
    }

    #[test]
    fn shifted_gaussians_are_separated() {
        let mut values = Vec::new();
        for seed in 0..10 {
            let mut rng = Rng::from_seed(100 + seed);
            let x = gaussian_set(200, 8, 0.0, &mut rng);
            let y = gaussian_set(200, 8, 3.0, &mut rng);
            values.push(mmd_unbiased_median(&x, &y).unwrap());
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = values[values.len() / 2];
        assert!(median > 0.5, "shifted-distribution median MMD² {median}");
    }

    #[test]
    fn mmd_is_exactly_symmetric() {
        let mut rng = Rng::from_seed(9);
        let x = gaussian_set(20, 4, 0.0, &mut rng);
        let y = gaussian_set(25, 4, 0.5, &mut rng);
        let a = mmd_unbiased_median(&x, &y).unwrap();
        let b = mmd_unbiased_median(&y, &x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn kernel_values_in_unit_interval_and_gram_symmetric() {
        let mut rng = Rng::from_seed(13);
        let pts = gaussian_set(15, 3, 0.0, &mut rng);
        let kernel = MixtureRbf::median_heuristic(&pts, &pts);
        for a in &pts {
            for b in &pts {
                let v = kernel.eval(a, b);
                assert!(v > 0.0 && v <= 1.0);
                assert_eq!(v.to_bits(), kernel.eval(b, a).to_bits());
            }
        }
    }

    #[test]
    fn small_sets_and_dim_mismatch_are_rejected() {
        let k = MixtureRbf::from_gamma(1.0);
        assert!(mmd_unbiased(&[vec![0.0]], &[vec![1.0], vec![2.0]], &k).is_err());
        assert!(mmd_unbiased(
            &[vec![0.0], vec![1.0]],
            &[vec![1.0, 2.0], vec![2.0, 3.0]],
            &k
        )
        .is_err());
    }

    fn jittered_sequences(count: usize, t: usize, seed: u64) -> Vec<ActionSequence> {
        let cfg = SynthConfig {
            classes: 2,
            joints: 3,
            frames: t,
            train_per_class: count / 2,
            test_per_class: 0,
            sigma: 0.1,
            amplitude: 0.5,
        };
        synth_dataset(&cfg, &mut Rng::from_seed(seed)).unwrap().sequences
    }

    #[test]
    fn mmd_avg_identity_and_offset_monotonicity() {
        let real = jittered_sequences(120, 4, 3);
        let gen = jittered_sequences(120, 4, 4);
        let real_refs: Vec<&ActionSequence> = real.iter().collect();
        let gen_refs: Vec<&ActionSequence> = gen.iter().collect();
        let same = mmd_avg(&real_refs, &gen_refs).unwrap();
        assert!(same.abs() < 0.05, "same-distribution mmd_avg {same}");

        let mut shifted: Vec<ActionSequence> = gen.clone();
        for s in &mut shifted {
            for v in s.coords.data_mut() {
                *v += 1.0;
            }
        }
        let shifted_refs: Vec<&ActionSequence> = shifted.iter().collect();
        let far = mmd_avg(&real_refs, &shifted_refs).unwrap();
        assert!(far > same, "offset must increase mmd_avg: {far} vs {same}");

        let far_seq = mmd_seq(&real_refs, &shifted_refs).unwrap();
        let same_seq = mmd_seq(&real_refs, &gen_refs).unwrap();
        assert!(far_seq > same_seq);
    }

    #[test]
    fn single_frame_mmd_seq_equals_mmd_avg_bitwise() {
        let real = jittered_sequences(40, 1, 5);
        let gen = jittered_sequences(40, 1, 6);
        let real_refs: Vec<&ActionSequence> = real.iter().collect();
        let gen_refs: Vec<&ActionSequence> = gen.iter().collect();
        let a = mmd_avg(&real_refs, &gen_refs).unwrap();
        let s = mmd_seq(&real_refs, &gen_refs).unwrap();
        assert_eq!(a.to_bits(), s.to_bits());
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let a = jittered_sequences(10, 4, 7);
        let b = jittered_sequences(10, 5, 8);
        let ar: Vec<&ActionSequence> = a.iter().collect();
        let br: Vec<&ActionSequence> = b.iter().collect();
        assert!(mmd_seq(&ar, &br).is_err());
    }

    #[test]
    fn report_renders_and_parses_back() {
        let real = jittered_sequences(30, 3, 9);
        let gen = jittered_sequences(30, 3, 10);
        let rr: Vec<&ActionSequence> = real.iter().collect();
        let gr: Vec<&ActionSequence> = gen.iter().collect();
        let report = mmd_report(&rr, &gr).unwrap();
        let text = report.render();
        let kv = parse_key_values(&text);
        let avg: f64 = kv["mmd_avg"].parse().unwrap();
        let seq: f64 = kv["mmd_seq"].parse().unwrap();
        assert!((avg - report.mmd_avg).abs() < 1e-9);
        assert!((seq - report.mmd_seq).abs() < 1e-9);
        assert_eq!(kv["n_real"], "30");
    }

    fn small_dataset(classes: usize, per_class: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            classes,
            joints: 3,
            frames: 6,
            train_per_class: per_class,
            test_per_class: per_class / 2,
            sigma: 0.05,
            amplitude: 0.5,
        };
        synth_dataset(&cfg, &mut Rng::from_seed(seed)).unwrap()
    }

    #[test]
    fn untrained_classifier_sits_at_chance_on_independent_labels() {
        // Labels independent of the sequences: accuracy is 1/C in
        // expectation no matter what the classifier does.
        let ds = small_dataset(3, 10, 21);
        let cfg = ClassifierTrainConfig {
            steps: 0,
            hidden: 8,
            head_hidden: 8,
            ..ClassifierTrainConfig::default()
        };
        let out = train_classifier(&ds, &cfg).unwrap();
        let mut rng = Rng::from_seed(3);
        let seqs: Vec<ActionSequence> = (0..300)
            .map(|_| {
                ActionSequence::new(rng.gaussian_tensor(&[6, 3, 2]), rng.below(3)).unwrap()
            })
            .collect();
        let refs: Vec<&ActionSequence> = seqs.iter().collect();
        let report = recognition_accuracy(&out.params, &refs).unwrap();
        // Binomial 99.9% band around 1/3 at n = 300 is roughly ±0.09.
        assert!(
            (report.overall_accuracy - 1.0 / 3.0).abs() < 0.1,
            "chance-level accuracy, got {}",
            report.overall_accuracy
        );
    }

    #[test]
    fn separable_two_class_set_is_learned() {
        let ds = small_dataset(2, 16, 23);
        let cfg = ClassifierTrainConfig {
            steps: 500,
            batch: 8,
            lr: 2e-3,
            hidden: 12,
            head_hidden: 12,
            ..ClassifierTrainConfig::default()
        };
        let out = train_classifier(&ds, &cfg).unwrap();
        assert!(
            out.held_out_accuracy >= 0.95,
            "held-out accuracy {}",
            out.held_out_accuracy
        );
    }

    #[test]
    fn classifier_training_is_deterministic() {
        let ds = small_dataset(2, 6, 25);
        let cfg = ClassifierTrainConfig {
            steps: 20,
            batch: 4,
            hidden: 6,
            head_hidden: 6,
            ..ClassifierTrainConfig::default()
        };
        let a = train_classifier(&ds, &cfg).unwrap();
        let b = train_classifier(&ds, &cfg).unwrap();
        for ((_, x), (_, y)) in a.params.named().iter().zip(b.params.named().iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let ds = small_dataset(1, 6, 27);
        assert!(train_classifier(&ds, &ClassifierTrainConfig::default()).is_err());
    }

    #[test]
    fn recognition_with_biased_classifier() {
        // Head bias forces every prediction to class 0.
        let mut rng = Rng::from_seed(31);
        let arch = DiscConfig { embed_dim: 1, hidden: 4, head_hidden: 4, frame_hidden: 1 };
        let mut cls = ClassifierParams::init(3, 6, &arch, false, &mut rng);
        cls.head2_w = Tensor::zeros(&[4, 3]);
        cls.head2_b = Tensor::from_vec(vec![10.0, 0.0, 0.0], &[3]).unwrap();

        let mut seq_rng = Rng::from_seed(32);
        let zeros: Vec<ActionSequence> = (0..10)
            .map(|_| ActionSequence::new(seq_rng.gaussian_tensor(&[5, 3, 2]), 0).unwrap())
            .collect();
        let refs: Vec<&ActionSequence> = zeros.iter().collect();
        let report = recognition_accuracy(&cls, &refs).unwrap();
        assert_eq!(report.mean_accuracy, 1.0);
        assert_eq!(report.per_class[0], (10, 10));

        let ones: Vec<ActionSequence> = (0..10)
            .map(|_| ActionSequence::new(seq_rng.gaussian_tensor(&[5, 3, 2]), 1).unwrap())
            .collect();
        let refs: Vec<&ActionSequence> = ones.iter().collect();
        let report = recognition_accuracy(&cls, &refs).unwrap();
        assert_eq!(report.mean_accuracy, 0.0);
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::from_seed(41);
        let arch = DiscConfig { embed_dim: 1, hidden: 5, head_hidden: 4, frame_hidden: 1 };
        let cls = ClassifierParams::init(3, 6, &arch, true, &mut rng);
        let path = dir.path().join("cls.ckpt");
        crate::generator::save_checkpoint(&path, &cls.to_checkpoint()).unwrap();
        let back =
            ClassifierParams::from_checkpoint(&crate::generator::load_checkpoint(&path).unwrap())
                .unwrap();
        assert_eq!(back.classes, 3);
        assert_eq!(back.center, true);
        for ((_, a), (_, b)) in cls.named().iter().zip(back.named().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn mixing_sweep_shapes_and_endpoints() {
        let mut cfg = GenConfig::new(3, 3, 2);
        cfg.seq_len = 5;
        cfg.noise_dim = 4;
        cfg.embed_dim = 3;
        cfg.hidden = 6;
        let topo = crate::skeleton::presets::chain(3);
        let mut rng = Rng::from_seed(51);
        let gen = GeneratorParams::init(&cfg, &mut rng);
        let arch = DiscConfig { embed_dim: 1, hidden: 4, head_hidden: 4, frame_hidden: 1 };
        let cls = ClassifierParams::init(3, 6, &arch, false, &mut rng);
        let rows = mixing_sweep(
            &gen,
            &cfg,
            &topo,
            0,
            1,
            &[1.0, 0.5, 0.0],
            4,
            &cls,
            &mut Rng::from_seed(5),
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].0, 1.0);
        for (_, p) in &rows {
            assert!(*p >= 0.0 && *p <= 1.0);
        }
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[0.1, 0.4, 0.9]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[0.9, 0.4, 0.1]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[0.1, 0.2, 0.3]), 0.0);
    }
}
