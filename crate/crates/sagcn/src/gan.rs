//! Dual discriminators, adversarial losses, and the training loop.
//!
//! Each iteration runs one video-discriminator step, one
//! frame-discriminator step, and one generator step, each on its own tape
//! so an update to one network leaves the others bit-identical.
//! Discriminator losses are BCE(real→1) + BCE(fake→0); the generator
//! trains on the non-saturating BCE(fake→1) summed over both
//! discriminators. Everything is driven by a single seeded RNG stream, so
//! a run is fully reproducible.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::generator::{
    draw_noise, forward_batch, gen_config_meta, gen_params_from_tensors, Checkpoint, Conditioning,
    GenConfig, GenHandles, GeneratorParams,
};
use crate::numcore::{
    gru_cell, init_uniform, AdamState, DiffTensor, GruHandles, GruParams, Rng, Tape, Tensor,
};
use crate::skeleton::{build_intra_adjacency, ActionSequence, Dataset, IntraFrameAdjacency};
use crate::{Error, Result};

/// Architecture widths for both discriminators.
#[derive(Clone, Debug)]
pub struct DiscConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub frame_hidden: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            embed_dim: 32,
            hidden: 128,
            head_hidden: 64,
            frame_hidden: 128,
        }
    }
}

/// Sequence-level discriminator: GRU over frames, two-layer head to one
/// logit. Conditions on its own label embedding.
#[derive(Clone, Debug)]
pub struct VideoDiscriminatorParams {
    pub embed: Tensor,
    pub gru: GruParams,
    pub head1_w: Tensor,
    pub head1_b: Tensor,
    pub head2_w: Tensor,
    pub head2_b: Tensor,
}

impl VideoDiscriminatorParams {
    pub fn init(classes: usize, frame_dim: usize, cfg: &DiscConfig, rng: &mut Rng) -> Self {
        let input = frame_dim + cfg.embed_dim;
        VideoDiscriminatorParams {
            embed: init_uniform(&[classes, cfg.embed_dim], cfg.embed_dim, rng),
            gru: GruParams::init(input, cfg.hidden, rng),
            head1_w: init_uniform(&[cfg.hidden, cfg.head_hidden], cfg.hidden, rng),
            head1_b: Tensor::zeros(&[cfg.head_hidden]),
            head2_w: init_uniform(&[cfg.head_hidden, 1], cfg.head_hidden, rng),
            head2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(classes: usize, frame_dim: usize, cfg: &DiscConfig) -> Self {
        let input = frame_dim + cfg.embed_dim;
        VideoDiscriminatorParams {
            embed: Tensor::zeros(&[classes, cfg.embed_dim]),
            gru: GruParams::zeros(input, cfg.hidden),
            head1_w: Tensor::zeros(&[cfg.hidden, cfg.head_hidden]),
            head1_b: Tensor::zeros(&[cfg.head_hidden]),
            head2_w: Tensor::zeros(&[cfg.head_hidden, 1]),
            head2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("embed".into(), &self.embed),
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
            ("embed".into(), &mut self.embed),
            ("gru.w_x".into(), &mut self.gru.w_x),
            ("gru.w_h".into(), &mut self.gru.w_h),
            ("gru.bias".into(), &mut self.gru.bias),
            ("head1.w".into(), &mut self.head1_w),
            ("head1.b".into(), &mut self.head1_b),
            ("head2.w".into(), &mut self.head2_w),
            ("head2.b".into(), &mut self.head2_b),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VideoDiscHandles {
    pub embed: DiffTensor,
    pub gru: GruHandles,
    pub head1_w: DiffTensor,
    pub head1_b: DiffTensor,
    pub head2_w: DiffTensor,
    pub head2_b: DiffTensor,
}

impl VideoDiscHandles {
    pub fn watch(tape: &mut Tape, p: &VideoDiscriminatorParams) -> Self {
        VideoDiscHandles {
            embed: tape.leaf(&p.embed),
            gru: GruHandles::watch(tape, &p.gru),
            head1_w: tape.leaf(&p.head1_w),
            head1_b: tape.leaf(&p.head1_b),
            head2_w: tape.leaf(&p.head2_w),
            head2_b: tape.leaf(&p.head2_b),
        }
    }

    pub fn all(&self) -> Vec<DiffTensor> {
        vec![
            self.embed,
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

/// Frame-level discriminator: per-frame MLP to one logit, averaged over a
/// random subset of frames per sequence.
#[derive(Clone, Debug)]
pub struct FrameDiscriminatorParams {
    pub embed: Tensor,
    pub mlp1_w: Tensor,
    pub mlp1_b: Tensor,
    pub mlp2_w: Tensor,
    pub mlp2_b: Tensor,
}

impl FrameDiscriminatorParams {
    pub fn init(classes: usize, frame_dim: usize, cfg: &DiscConfig, rng: &mut Rng) -> Self {
        let input = frame_dim + cfg.embed_dim;
        FrameDiscriminatorParams {
            embed: init_uniform(&[classes, cfg.embed_dim], cfg.embed_dim, rng),
            mlp1_w: init_uniform(&[input, cfg.frame_hidden], input, rng),
            mlp1_b: Tensor::zeros(&[cfg.frame_hidden]),
            mlp2_w: init_uniform(&[cfg.frame_hidden, 1], cfg.frame_hidden, rng),
            mlp2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(classes: usize, frame_dim: usize, cfg: &DiscConfig) -> Self {
        let input = frame_dim + cfg.embed_dim;
        FrameDiscriminatorParams {
            embed: Tensor::zeros(&[classes, cfg.embed_dim]),
            mlp1_w: Tensor::zeros(&[input, cfg.frame_hidden]),
            mlp1_b: Tensor::zeros(&[cfg.frame_hidden]),
            mlp2_w: Tensor::zeros(&[cfg.frame_hidden, 1]),
            mlp2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("embed".into(), &self.embed),
            ("mlp1.w".into(), &self.mlp1_w),
            ("mlp1.b".into(), &self.mlp1_b),
            ("mlp2.w".into(), &self.mlp2_w),
            ("mlp2.b".into(), &self.mlp2_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("embed".into(), &mut self.embed),
            ("mlp1.w".into(), &mut self.mlp1_w),
            ("mlp1.b".into(), &mut self.mlp1_b),
            ("mlp2.w".into(), &mut self.mlp2_w),
            ("mlp2.b".into(), &mut self.mlp2_b),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FrameDiscHandles {
    pub embed: DiffTensor,
    pub mlp1_w: DiffTensor,
    pub mlp1_b: DiffTensor,
    pub mlp2_w: DiffTensor,
    pub mlp2_b: DiffTensor,
}

impl FrameDiscHandles {
    pub fn watch(tape: &mut Tape, p: &FrameDiscriminatorParams) -> Self {
        FrameDiscHandles {
            embed: tape.leaf(&p.embed),
            mlp1_w: tape.leaf(&p.mlp1_w),
            mlp1_b: tape.leaf(&p.mlp1_b),
            mlp2_w: tape.leaf(&p.mlp2_w),
            mlp2_b: tape.leaf(&p.mlp2_b),
        }
    }

    pub fn all(&self) -> Vec<DiffTensor> {
        vec![self.embed, self.mlp1_w, self.mlp1_b, self.mlp2_w, self.mlp2_b]
    }
}

// ── discriminator forwards ──────────────────────────────────────────

/// Batched video-discriminator logits. `coords` is a (B·T·N)×D (or
/// equivalently (B·T)×(N·D)) node laid out batch-major; returns B×1.
pub fn dv_logits_batch(
    tape: &mut Tape,
    h: &VideoDiscHandles,
    coords: DiffTensor,
    labels: &[usize],
    t: usize,
    frame_dim: usize,
) -> Result<DiffTensor> {
    let b = labels.len();
    let frames = tape.reshape(coords, &[b * t, frame_dim])?;
    let emb = tape.gather_rows(h.embed, labels)?;
    let hidden = h.gru.hidden;
    let mut state = tape.leaf(&Tensor::zeros(&[b, hidden]));
    for step in 0..t {
        let rows: Vec<usize> = (0..b).map(|bi| bi * t + step).collect();
        let frame = tape.gather_rows(frames, &rows)?;
        let x = tape.concat_cols(frame, emb)?;
        state = gru_cell(tape, x, state, &h.gru)?;
    }
    let l1 = tape.matmul(state, h.head1_w)?;
    let l1 = tape.add_row(l1, h.head1_b)?;
    let l1 = tape.relu(l1)?;
    let logit = tape.matmul(l1, h.head2_w)?;
    tape.add_row(logit, h.head2_b)
}

/// Batched frame-discriminator logits: per-sequence mean of the logits of
/// the selected frames. `selections[b]` holds the frame indices sampled
/// for sequence b; all selections must share one length.
pub fn df_logits_batch(
    tape: &mut Tape,
    h: &FrameDiscHandles,
    coords: DiffTensor,
    labels: &[usize],
    selections: &[Vec<usize>],
    t: usize,
    frame_dim: usize,
) -> Result<DiffTensor> {
    let b = labels.len();
    if selections.len() != b {
        return Err(Error::Shape(format!(
            "{} frame selections for {b} sequences",
            selections.len()
        )));
    }
    let k = selections.first().map_or(0, |s| s.len());
    if k == 0 {
        return Err(Error::Config("frame selection is empty".into()));
    }
    let frames = tape.reshape(coords, &[b * t, frame_dim])?;
    let mut rows = Vec::with_capacity(b * k);
    let mut emb_rows = Vec::with_capacity(b * k);
    for (bi, sel) in selections.iter().enumerate() {
        if sel.len() != k {
            return Err(Error::Shape("ragged frame selections".into()));
        }
        for &f in sel {
            if f >= t {
                return Err(Error::Config(format!("frame index {f} out of range (T={t})")));
            }
            rows.push(bi * t + f);
            emb_rows.push(labels[bi]);
        }
    }
    let picked = tape.gather_rows(frames, &rows)?;
    let emb = tape.gather_rows(h.embed, &emb_rows)?;
    let x = tape.concat_cols(picked, emb)?;
    let l1 = tape.matmul(x, h.mlp1_w)?;
    let l1 = tape.add_row(l1, h.mlp1_b)?;
    let l1 = tape.relu(l1)?;
    let logit = tape.matmul(l1, h.mlp2_w)?;
    let logit = tape.add_row(logit, h.mlp2_b)?;
    tape.group_mean_rows(logit, k)
}

fn sequence_node(tape: &mut Tape, seq: &ActionSequence) -> DiffTensor {
    let (t, n, d) = (seq.frames(), seq.joints(), seq.dims());
    tape.leaf_from(seq.coords.data().to_vec(), &[t * n, d])
}

/// Logit of the video discriminator for one sequence (σ of it estimates
/// the real probability given the label).
pub fn disc_video(
    params: &VideoDiscriminatorParams,
    seq: &ActionSequence,
    label: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let h = VideoDiscHandles::watch(&mut tape, params);
    let coords = sequence_node(&mut tape, seq);
    let frame_dim = seq.joints() * seq.dims();
    let logit = dv_logits_batch(&mut tape, &h, coords, &[label], seq.frames(), frame_dim)?;
    Ok(tape.scalar_value(logit))
}

/// Mean frame logit over `k_frame` distinct uniformly sampled frames.
pub fn disc_frame(
    params: &FrameDiscriminatorParams,
    seq: &ActionSequence,
    label: usize,
    k_frame: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let t = seq.frames();
    if k_frame > t {
        return Err(Error::Config(format!("k_frame {k_frame} exceeds sequence length {t}")));
    }
    let selection = rng.sample_distinct(k_frame, t);
    let mut tape = Tape::new();
    let h = FrameDiscHandles::watch(&mut tape, params);
    let coords = sequence_node(&mut tape, seq);
    let frame_dim = seq.joints() * seq.dims();
    let logit = df_logits_batch(&mut tape, &h, coords, &[label], &[selection], t, frame_dim)?;
    Ok(tape.scalar_value(logit))
}

// ── losses ──────────────────────────────────────────────────────────

/// BCE(real→1) + BCE(fake→0) for one discriminator's logit batches.
pub fn disc_loss(
    tape: &mut Tape,
    real_logits: DiffTensor,
    fake_logits: DiffTensor,
) -> Result<DiffTensor> {
    let n_real = tape.data(real_logits).len();
    let n_fake = tape.data(fake_logits).len();
    let real = tape.bce_with_logits(real_logits, &vec![1.0; n_real])?;
    let fake = tape.bce_with_logits(fake_logits, &vec![0.0; n_fake])?;
    tape.add(real, fake)
}

/// Non-saturating generator loss for one discriminator: BCE(fake→1).
pub fn gen_loss_part(tape: &mut Tape, fake_logits: DiffTensor) -> Result<DiffTensor> {
    let n = tape.data(fake_logits).len();
    tape.bce_with_logits(fake_logits, &vec![1.0; n])
}

/// All three losses on one shared fake batch (labels drawn uniformly,
/// one noise vector per sequence, frame selections drawn per sequence).
/// Returns (loss_G, loss_DV, loss_DF) values.
pub fn gan_losses(
    gen_params: &GeneratorParams,
    dv: &VideoDiscriminatorParams,
    df: &FrameDiscriminatorParams,
    real_batch: &[&ActionSequence],
    gen_cfg: &GenConfig,
    intra: &IntraFrameAdjacency,
    k_frame: usize,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    if real_batch.is_empty() {
        return Err(Error::Config("empty real batch".into()));
    }
    let t = gen_cfg.seq_len;
    let frame_dim = gen_cfg.joints * gen_cfg.coord_dims;
    if k_frame > t {
        return Err(Error::Config(format!("k_frame {k_frame} exceeds sequence length {t}")));
    }
    let b = real_batch.len();

    let fake_labels: Vec<usize> = (0..b).map(|_| rng.below(gen_cfg.classes)).collect();
    let z = draw_noise(gen_cfg, b, rng);
    let real_sel: Vec<Vec<usize>> = (0..b).map(|_| rng.sample_distinct(k_frame, t)).collect();
    let fake_sel: Vec<Vec<usize>> = (0..b).map(|_| rng.sample_distinct(k_frame, t)).collect();

    let mut tape = Tape::new();
    let gh = GenHandles::watch(&mut tape, gen_params);
    let dvh = VideoDiscHandles::watch(&mut tape, dv);
    let dfh = FrameDiscHandles::watch(&mut tape, df);

    let mut real_flat = Vec::new();
    let mut real_labels = Vec::with_capacity(b);
    for s in real_batch {
        real_flat.extend_from_slice(s.coords.data());
        real_labels.push(s.label);
    }
    let real = tape.leaf_from(real_flat, &[b * t * gen_cfg.joints, gen_cfg.coord_dims]);
    let fake = forward_batch(
        &mut tape,
        &gh,
        gen_cfg,
        intra,
        &Conditioning::Classes(fake_labels.clone()),
        &z,
    )?;

    let dv_real = dv_logits_batch(&mut tape, &dvh, real, &real_labels, t, frame_dim)?;
    let dv_fake = dv_logits_batch(&mut tape, &dvh, fake, &fake_labels, t, frame_dim)?;
    let df_real = df_logits_batch(&mut tape, &dfh, real, &real_labels, &real_sel, t, frame_dim)?;
    let df_fake = df_logits_batch(&mut tape, &dfh, fake, &fake_labels, &fake_sel, t, frame_dim)?;

    let loss_dv = disc_loss(&mut tape, dv_real, dv_fake)?;
    let loss_df = disc_loss(&mut tape, df_real, df_fake)?;
    let g_dv = gen_loss_part(&mut tape, dv_fake)?;
    let g_df = gen_loss_part(&mut tape, df_fake)?;
    let loss_g = tape.add(g_dv, g_df)?;

    Ok((
        tape.scalar_value(loss_g),
        tape.scalar_value(loss_dv),
        tape.scalar_value(loss_df),
    ))
}

// ── training ────────────────────────────────────────────────────────

/// Loop hyperparameters. Defaults mirror the full-scale recipe (batch 100,
/// lr 2e-4, 20 sampled frames); desk-scale runs shrink them explicitly.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub k_frame: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the initial and final.
    pub ckpt_every: u64,
    /// Center every real sequence on its frame-0 root joint.
    pub center: bool,
    pub disc: DiscConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 100,
            steps: 1000,
            lr: 2e-4,
            k_frame: 20,
            seed: 7,
            ckpt_every: 0,
            center: true,
            disc: DiscConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.k_frame == 0 {
            return Err(Error::Config("k_frame must be positive".into()));
        }
        Ok(())
    }
}

/// One metrics-log record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_g: f64,
    pub loss_dv: f64,
    pub loss_df: f64,
}

/// Deterministic line-oriented rendering of the metrics log.
pub fn render_metrics(metrics: &[StepMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        let _ = writeln!(
            out,
            "step={:06} loss_g={:.10e} loss_dv={:.10e} loss_df={:.10e}",
            m.step, m.loss_g, m.loss_dv, m.loss_df
        );
    }
    out
}

pub struct TrainOutput {
    pub gen: GeneratorParams,
    pub dv: VideoDiscriminatorParams,
    pub df: FrameDiscriminatorParams,
    pub metrics: Vec<StepMetrics>,
}

pub(crate) struct Trainer {
    gen_cfg: GenConfig,
    cfg: TrainConfig,
    intra: IntraFrameAdjacency,
    topology: crate::skeleton::SkeletonTopology,
    real: Vec<ActionSequence>,
    pub gen: GeneratorParams,
    pub dv: VideoDiscriminatorParams,
    pub df: FrameDiscriminatorParams,
    adam_gen: AdamState,
    adam_dv: AdamState,
    adam_df: AdamState,
    rng: Rng,
    step: u64,
}

impl Trainer {
    pub fn new(dataset: &Dataset, gen_cfg: &GenConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        gen_cfg.validate()?;
        dataset.validate()?;
        if dataset.split.train.is_empty() {
            return Err(Error::Config("dataset has no training sequences".into()));
        }
        if cfg.k_frame > gen_cfg.seq_len {
            return Err(Error::Config(format!(
                "k_frame {} exceeds sequence length {}",
                cfg.k_frame, gen_cfg.seq_len
            )));
        }
        let mut real = Vec::with_capacity(dataset.split.train.len());
        for s in dataset.train_sequences() {
            if s.frames() != gen_cfg.seq_len {
                return Err(Error::Config(format!(
                    "training sequence has {} frames, generator expects {}",
                    s.frames(),
                    gen_cfg.seq_len
                )));
            }
            real.push(if cfg.center { s.centered_on_root() } else { s.clone() });
        }
        let intra = build_intra_adjacency(&dataset.topology);
        let frame_dim = gen_cfg.joints * gen_cfg.coord_dims;

        let mut rng = Rng::from_seed(cfg.seed);
        let mut init_rng = rng.split();
        let gen = GeneratorParams::init(gen_cfg, &mut init_rng);
        let dv = VideoDiscriminatorParams::init(gen_cfg.classes, frame_dim, &cfg.disc, &mut init_rng);
        let df = FrameDiscriminatorParams::init(gen_cfg.classes, frame_dim, &cfg.disc, &mut init_rng);

        let shapes = |named: &[(String, &Tensor)]| -> Vec<Vec<usize>> {
            named.iter().map(|(_, t)| t.shape().to_vec()).collect()
        };
        fn as_refs(v: &[Vec<usize>]) -> Vec<&[usize]> {
            v.iter().map(|s| s.as_slice()).collect()
        }
        let gen_shapes = shapes(&gen.named());
        let dv_shapes = shapes(&dv.named());
        let df_shapes = shapes(&df.named());
        let adam_gen = AdamState::new(cfg.lr, &as_refs(&gen_shapes));
        let adam_dv = AdamState::new(cfg.lr, &as_refs(&dv_shapes));
        let adam_df = AdamState::new(cfg.lr, &as_refs(&df_shapes));

        Ok(Trainer {
            gen_cfg: gen_cfg.clone(),
            cfg: cfg.clone(),
            intra,
            topology: dataset.topology.clone(),
            real,
            gen,
            dv,
            df,
            adam_gen,
            adam_dv,
            adam_df,
            rng,
            step: 0,
        })
    }

    fn frame_dim(&self) -> usize {
        self.gen_cfg.joints * self.gen_cfg.coord_dims
    }

    fn real_minibatch(&mut self) -> (Vec<f64>, Vec<usize>) {
        let b = self.cfg.batch;
        let mut flat = Vec::with_capacity(b * self.gen_cfg.seq_len * self.frame_dim());
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let s = &self.real[self.rng.below(self.real.len())];
            flat.extend_from_slice(s.coords.data());
            labels.push(s.label);
        }
        (flat, labels)
    }

    /// Sample a fake batch without gradients: (coords, labels).
    fn fake_minibatch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let b = self.cfg.batch;
        let labels: Vec<usize> = (0..b).map(|_| self.rng.below(self.gen_cfg.classes)).collect();
        let z = draw_noise(&self.gen_cfg, b, &mut self.rng);
        let mut tape = Tape::new();
        let gh = GenHandles::watch(&mut tape, &self.gen);
        let out = forward_batch(
            &mut tape,
            &gh,
            &self.gen_cfg,
            &self.intra,
            &Conditioning::Classes(labels.clone()),
            &z,
        )?;
        Ok((tape.to_tensor(out), labels))
    }

    fn selections(&mut self) -> Vec<Vec<usize>> {
        (0..self.cfg.batch)
            .map(|_| self.rng.sample_distinct(self.cfg.k_frame, self.gen_cfg.seq_len))
            .collect()
    }

    pub(crate) fn step_dv(
        &mut self,
        real: &(Vec<f64>, Vec<usize>),
        fake: &(Tensor, Vec<usize>),
    ) -> Result<f64> {
        let t = self.gen_cfg.seq_len;
        let fd = self.frame_dim();
        let mut tape = Tape::new();
        let h = VideoDiscHandles::watch(&mut tape, &self.dv);
        let real_node = tape.leaf_from(real.0.clone(), &[self.cfg.batch * t * self.gen_cfg.joints, self.gen_cfg.coord_dims]);
        let fake_node = tape.leaf(&fake.0);
        let real_logits = dv_logits_batch(&mut tape, &h, real_node, &real.1, t, fd)?;
        let fake_logits = dv_logits_batch(&mut tape, &h, fake_node, &fake.1, t, fd)?;
        let loss = disc_loss(&mut tape, real_logits, fake_logits)?;
        let value = tape.scalar_value(loss);
        tape.backward(loss)?;
        let grads: Vec<Tensor> = h.all().iter().map(|&p| tape.grad_tensor(p)).collect();
        let mut named = self.dv.named_mut();
        let mut refs: Vec<(&str, &mut Tensor)> =
            named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        self.adam_dv.step(&mut refs, &grads)?;
        Ok(value)
    }

    pub(crate) fn step_df(
        &mut self,
        real: &(Vec<f64>, Vec<usize>),
        fake: &(Tensor, Vec<usize>),
    ) -> Result<f64> {
        let t = self.gen_cfg.seq_len;
        let fd = self.frame_dim();
        let real_sel = self.selections();
        let fake_sel = self.selections();
        let mut tape = Tape::new();
        let h = FrameDiscHandles::watch(&mut tape, &self.df);
        let real_node = tape.leaf_from(real.0.clone(), &[self.cfg.batch * t * self.gen_cfg.joints, self.gen_cfg.coord_dims]);
        let fake_node = tape.leaf(&fake.0);
        let real_logits = df_logits_batch(&mut tape, &h, real_node, &real.1, &real_sel, t, fd)?;
        let fake_logits = df_logits_batch(&mut tape, &h, fake_node, &fake.1, &fake_sel, t, fd)?;
        let loss = disc_loss(&mut tape, real_logits, fake_logits)?;
        let value = tape.scalar_value(loss);
        tape.backward(loss)?;
        let grads: Vec<Tensor> = h.all().iter().map(|&p| tape.grad_tensor(p)).collect();
        let mut named = self.df.named_mut();
        let mut refs: Vec<(&str, &mut Tensor)> =
            named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        self.adam_df.step(&mut refs, &grads)?;
        Ok(value)
    }

    pub(crate) fn step_gen(&mut self) -> Result<f64> {
        let b = self.cfg.batch;
        let t = self.gen_cfg.seq_len;
        let fd = self.frame_dim();
        let labels: Vec<usize> = (0..b).map(|_| self.rng.below(self.gen_cfg.classes)).collect();
        let z = draw_noise(&self.gen_cfg, b, &mut self.rng);
        let sel = self.selections();

        let mut tape = Tape::new();
        let gh = GenHandles::watch(&mut tape, &self.gen);
        let dvh = VideoDiscHandles::watch(&mut tape, &self.dv);
        let dfh = FrameDiscHandles::watch(&mut tape, &self.df);
        let fake = forward_batch(
            &mut tape,
            &gh,
            &self.gen_cfg,
            &self.intra,
            &Conditioning::Classes(labels.clone()),
            &z,
        )?;
        let dv_fake = dv_logits_batch(&mut tape, &dvh, fake, &labels, t, fd)?;
        let df_fake = df_logits_batch(&mut tape, &dfh, fake, &labels, &sel, t, fd)?;
        let g_dv = gen_loss_part(&mut tape, dv_fake)?;
        let g_df = gen_loss_part(&mut tape, df_fake)?;
        let loss = tape.add(g_dv, g_df)?;
        let value = tape.scalar_value(loss);
        tape.backward(loss)?;
        let grads: Vec<Tensor> = gh.all().iter().map(|&p| tape.grad_tensor(p)).collect();
        let mut named = self.gen.named_mut();
        let mut refs: Vec<(&str, &mut Tensor)> =
            named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        self.adam_gen.step(&mut refs, &grads)?;
        Ok(value)
    }

    /// One iteration: D_V update, D_F update, G update, in that order,
    /// sharing one sampled real batch and one sampled fake batch for the
    /// discriminator sides.
    pub fn iteration(&mut self) -> Result<StepMetrics> {
        self.step += 1;
        let step = self.step;
        let wrap = |component: &str, e: Error| -> Error {
            match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("step {step}, {component}: {msg}"))
                }
                other => other,
            }
        };
        let real = self.real_minibatch();
        let fake = self.fake_minibatch().map_err(|e| wrap("generator sampling", e))?;
        let loss_dv = self.step_dv(&real, &fake).map_err(|e| wrap("video discriminator", e))?;
        let loss_df = self.step_df(&real, &fake).map_err(|e| wrap("frame discriminator", e))?;
        let loss_g = self.step_gen().map_err(|e| wrap("generator", e))?;
        Ok(StepMetrics { step, loss_g, loss_dv, loss_df })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = gen_config_meta(&self.gen_cfg);
        meta.push(("disc.embed_dim".into(), self.cfg.disc.embed_dim as f64));
        meta.push(("disc.hidden".into(), self.cfg.disc.hidden as f64));
        meta.push(("disc.head_hidden".into(), self.cfg.disc.head_hidden as f64));
        meta.push(("disc.frame_hidden".into(), self.cfg.disc.frame_hidden as f64));
        meta.push(("step".into(), self.step as f64));
        let mut tensors = Vec::new();
        for (k, v) in self.gen.named() {
            tensors.push((format!("gen.{k}"), v.clone()));
        }
        for (k, v) in self.dv.named() {
            tensors.push((format!("dv.{k}"), v.clone()));
        }
        for (k, v) in self.df.named() {
            tensors.push((format!("df.{k}"), v.clone()));
        }
        // Bone edges travel with the weights so generation does not need a
        // separate topology file.
        let edges: Vec<f64> = self
            .topology
            .edges
            .iter()
            .flat_map(|&(a, b)| [a as f64, b as f64])
            .collect();
        let n_edges = self.topology.edges.len();
        tensors.push((
            "topo.edges".into(),
            Tensor::from_vec(edges, &[n_edges, 2]).expect("edge list shape"),
        ));
        Checkpoint { kind: "gan".into(), meta, tensors }
    }
}

/// Recover the skeleton topology stored in a training checkpoint; falls
/// back to a chain when the edge tensor is absent.
pub fn topology_from_checkpoint(ckpt: &Checkpoint) -> Result<crate::skeleton::SkeletonTopology> {
    let joints = ckpt.meta_usize("joints")?;
    let coord_dims = ckpt.meta_usize("coord_dims")?;
    match ckpt.tensor_map().get("topo.edges") {
        Some(t) => {
            let edges: Vec<(usize, usize)> = t
                .data()
                .chunks(2)
                .map(|p| (p[0] as usize, p[1] as usize))
                .collect();
            let names = (0..joints).map(|i| format!("j{i}")).collect();
            crate::skeleton::SkeletonTopology::new(names, &edges, coord_dims)
        }
        None => {
            let mut topo = crate::skeleton::presets::chain(joints);
            topo.coord_dims = coord_dims;
            Ok(topo)
        }
    }
}

/// Rebuild the generator (and its config) from a training checkpoint.
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<(GenConfig, GeneratorParams)> {
    if ckpt.kind != "gan" {
        return Err(Error::Format(format!(
            "expected a `gan` checkpoint, found `{}`",
            ckpt.kind
        )));
    }
    let cfg = crate::generator::gen_config_from_meta(ckpt)?;
    let params = gen_params_from_tensors(&cfg, "gen.", &ckpt.tensor_map())?;
    Ok((cfg, params))
}

/// Train the conditional GAN. When `out_dir` is given, checkpoints are
/// written there (initial, any cadence, final) along with `metrics.log`;
/// progress and timing go to stderr.
pub fn train(
    dataset: &Dataset,
    gen_cfg: &GenConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(dataset, gen_cfg, cfg)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        crate::generator::save_checkpoint(
            &dir.join("checkpoint_step000000.ckpt"),
            &trainer.checkpoint(),
        )?;
    }
    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    let started = Instant::now();
    for i in 0..cfg.steps {
        let m = trainer.iteration()?;
        if let Some(dir) = out_dir {
            if cfg.ckpt_every > 0 && m.step % cfg.ckpt_every == 0 && m.step != cfg.steps {
                crate::generator::save_checkpoint(
                    &dir.join(format!("checkpoint_step{:06}.ckpt", m.step)),
                    &trainer.checkpoint(),
                )?;
            }
        }
        if (i + 1) % 100 == 0 || i + 1 == cfg.steps {
            eprintln!(
                "step {:>6}/{} loss_g={:.4} loss_dv={:.4} loss_df={:.4} elapsed_ms={}",
                m.step,
                cfg.steps,
                m.loss_g,
                m.loss_dv,
                m.loss_df,
                started.elapsed().as_millis()
            );
        }
        metrics.push(m);
    }
    if let Some(dir) = out_dir {
        crate::generator::save_checkpoint(&dir.join("checkpoint_final.ckpt"), &trainer.checkpoint())?;
        std::fs::write(dir.join("metrics.log"), render_metrics(&metrics))?;
    }
    Ok(TrainOutput {
        gen: trainer.gen,
        dv: trainer.dv,
        df: trainer.df,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{presets, synth_dataset, SynthConfig};

    fn tiny_gen_cfg() -> GenConfig {
        let mut cfg = GenConfig::new(3, 4, 2);
        cfg.seq_len = 6;
        cfg.noise_dim = 5;
        cfg.embed_dim = 4;
        cfg.hidden = 8;
        cfg.top_k = 2;
        cfg
    }

    fn tiny_disc_cfg() -> DiscConfig {
        DiscConfig {
            embed_dim: 4,
            hidden: 8,
            head_hidden: 6,
            frame_hidden: 8,
        }
    }

    fn sample_seq(cfg: &GenConfig, seed: u64) -> ActionSequence {
        let coords = Rng::from_seed(seed).gaussian_tensor(&[cfg.seq_len, cfg.joints, cfg.coord_dims]);
        ActionSequence::new(coords, (seed % cfg.classes as u64) as usize).unwrap()
    }

    #[test]
    fn zero_video_discriminator_outputs_zero_logit() {
        let cfg = tiny_gen_cfg();
        let dv = VideoDiscriminatorParams::zeros(cfg.classes, 8, &tiny_disc_cfg());
        let seq = sample_seq(&cfg, 1);
        let logit = disc_video(&dv, &seq, 0).unwrap();
        assert_eq!(logit, 0.0);
    }

    #[test]
    fn video_discriminator_is_deterministic() {
        let cfg = tiny_gen_cfg();
        let mut rng = Rng::from_seed(2);
        let dv = VideoDiscriminatorParams::init(cfg.classes, 8, &tiny_disc_cfg(), &mut rng);
        let seq = sample_seq(&cfg, 3);
        let a = disc_video(&dv, &seq, 1).unwrap();
        let b = disc_video(&dv, &seq, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn video_discriminator_is_order_sensitive() {
        let cfg = tiny_gen_cfg();
        let mut rng = Rng::from_seed(4);
        let dv = VideoDiscriminatorParams::init(cfg.classes, 8, &tiny_disc_cfg(), &mut rng);
        let seq = sample_seq(&cfg, 5);
        // Reverse the frame order.
        let (t, n, d) = (seq.frames(), seq.joints(), seq.dims());
        let mut rev = Vec::with_capacity(t * n * d);
        for f in (0..t).rev() {
            rev.extend_from_slice(&seq.coords.data()[f * n * d..(f + 1) * n * d]);
        }
        let rev_seq = ActionSequence::new(Tensor::from_vec(rev, &[t, n, d]).unwrap(), seq.label)
            .unwrap();
        let a = disc_video(&dv, &seq, seq.label).unwrap();
        let b = disc_video(&dv, &rev_seq, seq.label).unwrap();
        assert!((a - b).abs() > 0.0, "permuting frames should change the logit");
    }

    #[test]
    fn frame_discriminator_full_selection_is_seed_independent() {
        let cfg = tiny_gen_cfg();
        let mut rng = Rng::from_seed(6);
        let df = FrameDiscriminatorParams::init(cfg.classes, 8, &tiny_disc_cfg(), &mut rng);
        let seq = sample_seq(&cfg, 7);
        let a = disc_frame(&df, &seq, 0, cfg.seq_len, &mut Rng::from_seed(1)).unwrap();
        let b = disc_frame(&df, &seq, 0, cfg.seq_len, &mut Rng::from_seed(999)).unwrap();
        assert!((a - b).abs() < 1e-12, "k_frame = T must average all frames");
    }

    #[test]
    fn frame_discriminator_constant_sequence_ignores_selection() {
        let cfg = tiny_gen_cfg();
        let mut rng = Rng::from_seed(8);
        let df = FrameDiscriminatorParams::init(cfg.classes, 8, &tiny_disc_cfg(), &mut rng);
        // Every frame identical.
        let one_frame: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let mut coords = Vec::new();
        for _ in 0..cfg.seq_len {
            coords.extend_from_slice(&one_frame);
        }
        let seq = ActionSequence::new(
            Tensor::from_vec(coords, &[cfg.seq_len, 4, 2]).unwrap(),
            1,
        )
        .unwrap();
        let a = disc_frame(&df, &seq, 1, 3, &mut Rng::from_seed(10)).unwrap();
        let b = disc_frame(&df, &seq, 1, 3, &mut Rng::from_seed(11)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn frame_discriminator_rejects_oversized_k() {
        let cfg = tiny_gen_cfg();
        let df = FrameDiscriminatorParams::zeros(cfg.classes, 8, &tiny_disc_cfg());
        let seq = sample_seq(&cfg, 9);
        assert!(disc_frame(&df, &seq, 0, cfg.seq_len + 1, &mut Rng::from_seed(1)).is_err());
    }

    #[test]
    fn losses_at_the_symmetric_point_are_two_ln_two() {
        let gen_cfg = tiny_gen_cfg();
        let mut rng = Rng::from_seed(12);
        let gen = GeneratorParams::init(&gen_cfg, &mut rng);
        let dv = VideoDiscriminatorParams::zeros(gen_cfg.classes, 8, &tiny_disc_cfg());
        let df = FrameDiscriminatorParams::zeros(gen_cfg.classes, 8, &tiny_disc_cfg());
        let intra = build_intra_adjacency(&presets::chain(gen_cfg.joints));
        let batch: Vec<ActionSequence> = (0..4).map(|i| sample_seq(&gen_cfg, 20 + i)).collect();
        let refs: Vec<&ActionSequence> = batch.iter().collect();
        let (loss_g, loss_dv, loss_df) =
            gan_losses(&gen, &dv, &df, &refs, &gen_cfg, &intra, 3, &mut rng).unwrap();
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        assert!((loss_g - two_ln2).abs() < 1e-12, "loss_g {loss_g}");
        assert!((loss_dv - two_ln2).abs() < 1e-12);
        assert!((loss_df - two_ln2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_drive_disc_loss_to_zero() {
        let mut tape = Tape::new();
        let real = tape.leaf_from(vec![30.0, 30.0], &[2, 1]);
        let fake = tape.leaf_from(vec![-30.0, -30.0], &[2, 1]);
        let loss = disc_loss(&mut tape, real, fake).unwrap();
        assert!(tape.scalar_value(loss) < 1e-12);
        // And all three losses are non-negative by construction.
        let g = gen_loss_part(&mut tape, fake).unwrap();
        assert!(tape.scalar_value(g) >= 0.0);
    }

    #[test]
    fn generator_gradient_is_nonzero_against_a_random_discriminator() {
        let gen_cfg = tiny_gen_cfg();
        let mut rng = Rng::from_seed(31);
        let gen = GeneratorParams::init(&gen_cfg, &mut rng);
        let dv = VideoDiscriminatorParams::init(gen_cfg.classes, 8, &tiny_disc_cfg(), &mut rng);
        let intra = build_intra_adjacency(&presets::chain(gen_cfg.joints));
        let labels = vec![0usize, 2];
        let z = draw_noise(&gen_cfg, 2, &mut rng);

        let mut tape = Tape::new();
        let gh = GenHandles::watch(&mut tape, &gen);
        let dvh = VideoDiscHandles::watch(&mut tape, &dv);
        let fake = forward_batch(
            &mut tape,
            &gh,
            &gen_cfg,
            &intra,
            &Conditioning::Classes(labels.clone()),
            &z,
        )
        .unwrap();
        let logits = dv_logits_batch(&mut tape, &dvh, fake, &labels, gen_cfg.seq_len, 8).unwrap();
        let loss = gen_loss_part(&mut tape, logits).unwrap();
        tape.backward(loss).unwrap();
        let max_grad = gh
            .all()
            .iter()
            .flat_map(|&p| tape.grad(p).iter().map(|g| g.abs()))
            .fold(0.0f64, f64::max);
        assert!(max_grad > 0.0, "generator must receive gradient");
    }

    fn tiny_dataset() -> Dataset {
        let synth = SynthConfig {
            classes: 3,
            joints: 4,
            frames: 6,
            train_per_class: 4,
            test_per_class: 2,
            sigma: 0.05,
            amplitude: 0.5,
        };
        synth_dataset(&synth, &mut Rng::from_seed(55)).unwrap()
    }

    fn tiny_train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            batch: 4,
            steps,
            lr: 1e-3,
            k_frame: 3,
            seed: 99,
            ckpt_every: 0,
            center: true,
            disc: tiny_disc_cfg(),
        }
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let ds = tiny_dataset();
        let gen_cfg = tiny_gen_cfg();
        let cfg = tiny_train_cfg(0);
        let out = train(&ds, &gen_cfg, &cfg, None).unwrap();
        assert!(out.metrics.is_empty());
        // Same seed re-init gives identical parameters: nothing moved.
        let trainer = Trainer::new(&ds, &gen_cfg, &cfg).unwrap();
        for ((_, a), (_, b)) in out.gen.named().iter().zip(trainer.gen.named().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn same_seed_gives_identical_metrics() {
        let ds = tiny_dataset();
        let gen_cfg = tiny_gen_cfg();
        let cfg = tiny_train_cfg(3);
        let a = train(&ds, &gen_cfg, &cfg, None).unwrap();
        let b = train(&ds, &gen_cfg, &cfg, None).unwrap();
        assert_eq!(render_metrics(&a.metrics), render_metrics(&b.metrics));
        for ((_, x), (_, y)) in a.gen.named().iter().zip(b.gen.named().iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn updates_are_isolated_between_networks() {
        let ds = tiny_dataset();
        let gen_cfg = tiny_gen_cfg();
        let cfg = tiny_train_cfg(1);
        let mut trainer = Trainer::new(&ds, &gen_cfg, &cfg).unwrap();

        let snap = |p: &GeneratorParams| -> Vec<Vec<f64>> {
            p.named().iter().map(|(_, t)| t.data().to_vec()).collect()
        };
        let dv_snap = |p: &VideoDiscriminatorParams| -> Vec<Vec<f64>> {
            p.named().iter().map(|(_, t)| t.data().to_vec()).collect()
        };
        let df_snap = |p: &FrameDiscriminatorParams| -> Vec<Vec<f64>> {
            p.named().iter().map(|(_, t)| t.data().to_vec()).collect()
        };

        let real = trainer.real_minibatch();
        let fake = trainer.fake_minibatch().unwrap();

        let gen_before = snap(&trainer.gen);
        let df_before = df_snap(&trainer.df);
        trainer.step_dv(&real, &fake).unwrap();
        assert_eq!(snap(&trainer.gen), gen_before, "D_V step must not touch G");
        assert_eq!(df_snap(&trainer.df), df_before, "D_V step must not touch D_F");

        let dv_after_dv = dv_snap(&trainer.dv);
        trainer.step_df(&real, &fake).unwrap();
        assert_eq!(snap(&trainer.gen), gen_before, "D_F step must not touch G");
        assert_eq!(dv_snap(&trainer.dv), dv_after_dv, "D_F step must not touch D_V");

        let dv_before_g = dv_snap(&trainer.dv);
        let df_before_g = df_snap(&trainer.df);
        trainer.step_gen().unwrap();
        assert_ne!(snap(&trainer.gen), gen_before, "G step must update G");
        assert_eq!(dv_snap(&trainer.dv), dv_before_g, "G step must not touch D_V");
        assert_eq!(df_snap(&trainer.df), df_before_g, "G step must not touch D_F");
    }

    #[test]
    fn losses_stay_non_negative_over_training() {
        let ds = tiny_dataset();
        let gen_cfg = tiny_gen_cfg();
        let cfg = tiny_train_cfg(5);
        let out = train(&ds, &gen_cfg, &cfg, None).unwrap();
        for m in &out.metrics {
            assert!(m.loss_g >= 0.0 && m.loss_dv >= 0.0 && m.loss_df >= 0.0);
        }
    }

    #[test]
    fn checkpoint_files_and_metrics_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let gen_cfg = tiny_gen_cfg();
        let mut cfg = tiny_train_cfg(2);
        cfg.ckpt_every = 1;
        train(&ds, &gen_cfg, &cfg, Some(dir.path())).unwrap();
        assert!(dir.path().join("checkpoint_step000000.ckpt").exists());
        assert!(dir.path().join("checkpoint_step000001.ckpt").exists());
        assert!(dir.path().join("checkpoint_final.ckpt").exists());
        let log = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(log.starts_with("step=000001 loss_g="));

        let ckpt = crate::generator::load_checkpoint(&dir.path().join("checkpoint_final.ckpt"))
            .unwrap();
        let (cfg2, _params) = generator_from_checkpoint(&ckpt).unwrap();
        assert_eq!(cfg2.seq_len, gen_cfg.seq_len);
        assert_eq!(cfg2.classes, gen_cfg.classes);
    }
}
