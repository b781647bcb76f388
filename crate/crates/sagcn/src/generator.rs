//! Conditional action generator: noise + label embedding → GRU → residual
//! coordinate accumulation → three linear layers → graph convolution stack
//! → per-joint coordinate head.
//!
//! One noise vector is drawn per sequence and fed at every timestep
//! (per-step redraws sit behind `per_step_noise`). The GRU emits o_t; the
//! accumulated features c_t = c_{t-1} + o_t carry absolute state while the
//! network only has to model frame-to-frame residuals.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::attention::{AttentionHandles, AttentionParams};
use crate::numcore::{
    gru_cell_from_gx, init_uniform, DiffTensor, GruHandles, GruParams, Rng, Tape, Tensor,
};
use crate::sagc::{sagc_forward_batch, GcStackHandles, GcStackParams, GC_WIDTHS};
use crate::skeleton::{build_intra_adjacency, ActionSequence, IntraFrameAdjacency, SkeletonTopology};
use crate::{Error, Result};

/// Architecture and sampling configuration of the generator.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub classes: usize,
    pub joints: usize,
    pub coord_dims: usize,
    pub seq_len: usize,
    pub noise_dim: usize,
    pub embed_dim: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub per_step_noise: bool,
}

impl GenConfig {
    pub fn new(classes: usize, joints: usize, coord_dims: usize) -> Self {
        GenConfig {
            classes,
            joints,
            coord_dims,
            seq_len: 50,
            noise_dim: 64,
            embed_dim: 32,
            top_k: 5,
            hidden: 128,
            per_step_noise: false,
        }
    }

    pub fn for_topology(classes: usize, topo: &SkeletonTopology) -> Self {
        GenConfig::new(classes, topo.n_joints, topo.coord_dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if self.classes == 0 || self.joints == 0 || self.coord_dims == 0 {
            return Err(Error::Config("classes, joints, coord_dims must be positive".into()));
        }
        if self.noise_dim == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("noise_dim, embed_dim, hidden must be positive".into()));
        }
        Ok(())
    }
}

/// All generator parameters.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub embed: Tensor,
    pub gru: GruParams,
    pub lin1_w: Tensor,
    pub lin1_b: Tensor,
    pub lin2_w: Tensor,
    pub lin2_b: Tensor,
    pub lin3_w: Tensor,
    pub lin3_b: Tensor,
    pub att: AttentionParams,
    pub gc: GcStackParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl GeneratorParams {
    pub fn init(cfg: &GenConfig, rng: &mut Rng) -> Self {
        let h = cfg.hidden;
        let n = cfg.joints;
        GeneratorParams {
            embed: init_uniform(&[cfg.classes, cfg.embed_dim], cfg.embed_dim, rng),
            gru: GruParams::init(cfg.noise_dim + cfg.embed_dim, h, rng),
            lin1_w: init_uniform(&[h, h], h, rng),
            lin1_b: Tensor::zeros(&[h]),
            lin2_w: init_uniform(&[h, h], h, rng),
            lin2_b: Tensor::zeros(&[h]),
            lin3_w: init_uniform(&[h, n], h, rng),
            lin3_b: Tensor::zeros(&[n]),
            att: AttentionParams::init(n, rng),
            gc: GcStackParams::init(1, rng),
            head_w: init_uniform(&[GC_WIDTHS[4], cfg.coord_dims], GC_WIDTHS[4], rng),
            head_b: Tensor::zeros(&[cfg.coord_dims]),
        }
    }

    pub fn zeros(cfg: &GenConfig) -> Self {
        let h = cfg.hidden;
        let n = cfg.joints;
        GeneratorParams {
            embed: Tensor::zeros(&[cfg.classes, cfg.embed_dim]),
            gru: GruParams::zeros(cfg.noise_dim + cfg.embed_dim, h),
            lin1_w: Tensor::zeros(&[h, h]),
            lin1_b: Tensor::zeros(&[h]),
            lin2_w: Tensor::zeros(&[h, h]),
            lin2_b: Tensor::zeros(&[h]),
            lin3_w: Tensor::zeros(&[h, n]),
            lin3_b: Tensor::zeros(&[n]),
            att: AttentionParams::zeros(n),
            gc: GcStackParams::zeros(1),
            head_w: Tensor::zeros(&[GC_WIDTHS[4], cfg.coord_dims]),
            head_b: Tensor::zeros(&[cfg.coord_dims]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("gru.w_x".into(), &self.gru.w_x),
            ("gru.w_h".into(), &self.gru.w_h),
            ("gru.bias".into(), &self.gru.bias),
            ("lin1.w".into(), &self.lin1_w),
            ("lin1.b".into(), &self.lin1_b),
            ("lin2.w".into(), &self.lin2_w),
            ("lin2.b".into(), &self.lin2_b),
            ("lin3.w".into(), &self.lin3_w),
            ("lin3.b".into(), &self.lin3_b),
            ("att.w_q".into(), &self.att.w_q),
            ("att.w_k".into(), &self.att.w_k),
            ("att.w_v".into(), &self.att.w_v),
        ];
        for (i, w) in self.gc.w.iter().enumerate() {
            out.push((format!("gc.w{}", i + 1), w));
        }
        out.push(("gc.proj1".into(), &self.gc.proj1));
        out.push(("gc.proj2".into(), &self.gc.proj2));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed".into(), &mut self.embed),
            ("gru.w_x".into(), &mut self.gru.w_x),
            ("gru.w_h".into(), &mut self.gru.w_h),
            ("gru.bias".into(), &mut self.gru.bias),
            ("lin1.w".into(), &mut self.lin1_w),
            ("lin1.b".into(), &mut self.lin1_b),
            ("lin2.w".into(), &mut self.lin2_w),
            ("lin2.b".into(), &mut self.lin2_b),
            ("lin3.w".into(), &mut self.lin3_w),
            ("lin3.b".into(), &mut self.lin3_b),
            ("att.w_q".into(), &mut self.att.w_q),
            ("att.w_k".into(), &mut self.att.w_k),
            ("att.w_v".into(), &mut self.att.w_v),
        ];
        for (i, w) in self.gc.w.iter_mut().enumerate() {
            out.push((format!("gc.w{}", i + 1), w));
        }
        out.push(("gc.proj1".into(), &mut self.gc.proj1));
        out.push(("gc.proj2".into(), &mut self.gc.proj2));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }
}

/// Tape handles for every generator parameter, in `named()` order.
#[derive(Clone, Debug)]
pub struct GenHandles {
    pub embed: DiffTensor,
    pub gru: GruHandles,
    pub lin1_w: DiffTensor,
    pub lin1_b: DiffTensor,
    pub lin2_w: DiffTensor,
    pub lin2_b: DiffTensor,
    pub lin3_w: DiffTensor,
    pub lin3_b: DiffTensor,
    pub att: AttentionHandles,
    pub gc: GcStackHandles,
    pub head_w: DiffTensor,
    pub head_b: DiffTensor,
}

impl GenHandles {
    pub fn watch(tape: &mut Tape, p: &GeneratorParams) -> Self {
        GenHandles {
            embed: tape.leaf(&p.embed),
            gru: GruHandles::watch(tape, &p.gru),
            lin1_w: tape.leaf(&p.lin1_w),
            lin1_b: tape.leaf(&p.lin1_b),
            lin2_w: tape.leaf(&p.lin2_w),
            lin2_b: tape.leaf(&p.lin2_b),
            lin3_w: tape.leaf(&p.lin3_w),
            lin3_b: tape.leaf(&p.lin3_b),
            att: AttentionHandles::watch(tape, &p.att),
            gc: GcStackHandles::watch(tape, &p.gc),
            head_w: tape.leaf(&p.head_w),
            head_b: tape.leaf(&p.head_b),
        }
    }

    /// Handles in the same order as [`GeneratorParams::named`].
    pub fn all(&self) -> Vec<DiffTensor> {
        let mut v = vec![
            self.embed,
            self.gru.w_x,
            self.gru.w_h,
            self.gru.bias,
            self.lin1_w,
            self.lin1_b,
            self.lin2_w,
            self.lin2_b,
            self.lin3_w,
            self.lin3_b,
            self.att.w_q,
            self.att.w_k,
            self.att.w_v,
        ];
        v.extend_from_slice(&self.gc.w);
        v.push(self.gc.proj1);
        v.push(self.gc.proj2);
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }
}

/// Class conditioning: hard labels or mixture weight rows (length C each).
#[derive(Clone, Debug)]
pub enum Conditioning {
    Classes(Vec<usize>),
    Mixtures(Vec<Vec<f64>>),
}

impl Conditioning {
    pub fn batch_size(&self) -> usize {
        match self {
            Conditioning::Classes(v) => v.len(),
            Conditioning::Mixtures(v) => v.len(),
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        match self {
            Conditioning::Classes(v) => {
                if let Some(&bad) = v.iter().find(|&&y| y >= classes) {
                    return Err(Error::Config(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
            }
            Conditioning::Mixtures(rows) => {
                for row in rows {
                    if row.len() != classes {
                        return Err(Error::Config(format!(
                            "mixture row has {} weights for {classes} classes",
                            row.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// y_mix = λ·onehot(y1) + (1−λ)·onehot(y2).
pub fn mix_labels(y1: usize, y2: usize, lambda: f64, classes: usize) -> Result<Vec<f64>> {
    if y1 == y2 {
        return Err(Error::Config("mix_labels requires two distinct classes".into()));
    }
    if y1 >= classes || y2 >= classes {
        return Err(Error::Config(format!(
            "labels {y1}/{y2} out of range for {classes} classes"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut v = vec![0.0; classes];
    v[y1] = lambda;
    v[y2] = 1.0 - lambda;
    Ok(v)
}

fn embed_conditioning(
    tape: &mut Tape,
    embed: DiffTensor,
    cond: &Conditioning,
) -> Result<DiffTensor> {
    match cond {
        Conditioning::Classes(labels) => tape.gather_rows(embed, labels),
        Conditioning::Mixtures(rows) => {
            let c = rows[0].len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let weights = tape.leaf_from(flat, &[rows.len(), c]);
            tape.matmul(weights, embed)
        }
    }
}

/// GRU backbone: returns the per-frame outputs o_t and the residual
/// accumulations c_t (each B×H). `z_steps` holds one B×Z tensor shared by
/// all frames, or one per frame.
pub fn backbone_frames(
    tape: &mut Tape,
    h: &GenHandles,
    cfg: &GenConfig,
    cond: &Conditioning,
    z_steps: &[Tensor],
) -> Result<(Vec<DiffTensor>, Vec<DiffTensor>)> {
    cfg.validate()?;
    cond.validate(cfg.classes)?;
    let b = cond.batch_size();
    if z_steps.len() != 1 && z_steps.len() != cfg.seq_len {
        return Err(Error::Shape(format!(
            "expected 1 or {} noise tensors, got {}",
            cfg.seq_len,
            z_steps.len()
        )));
    }
    for z in z_steps {
        if z.shape() != [b, cfg.noise_dim] {
            return Err(Error::Shape(format!(
                "noise shape {:?} vs [{b}, {}]",
                z.shape(),
                cfg.noise_dim
            )));
        }
    }

    let emb = embed_conditioning(tape, h.embed, cond)?;
    // Input-side GRU projection; computed once when the noise is shared.
    let mut gx_per_step = Vec::with_capacity(z_steps.len());
    for z in z_steps {
        let zl = tape.leaf(z);
        let x = tape.concat_cols(zl, emb)?;
        let gx = tape.matmul(x, h.gru.w_x)?;
        gx_per_step.push(tape.add_row(gx, h.gru.bias)?);
    }

    let mut state = tape.leaf(&Tensor::zeros(&[b, cfg.hidden]));
    let mut outputs = Vec::with_capacity(cfg.seq_len);
    let mut accum = Vec::with_capacity(cfg.seq_len);
    for t in 0..cfg.seq_len {
        let gx = gx_per_step[t % gx_per_step.len()];
        state = gru_cell_from_gx(tape, gx, state, &h.gru)?;
        outputs.push(state);
        let c = if t == 0 {
            state
        } else {
            tape.add(*accum.last().unwrap(), state)?
        };
        accum.push(c);
    }
    Ok((outputs, accum))
}

/// Remaining pipeline after residual accumulation: three linear layers per
/// frame, the graph convolution stack, and the coordinate head. Takes the
/// accumulated frames c_t and returns coordinates shaped (B·T·N)×D with
/// row order (b·T + t)·N + i.
pub fn forward_from_accum(
    tape: &mut Tape,
    h: &GenHandles,
    cfg: &GenConfig,
    intra: &IntraFrameAdjacency,
    accum: &[DiffTensor],
) -> Result<DiffTensor> {
    let t_len = accum.len();
    let b = tape.shape(accum[0])[0];
    let mut frame_feats = Vec::with_capacity(t_len);
    for &c in accum {
        let l1 = tape.matmul(c, h.lin1_w)?;
        let l1 = tape.add_row(l1, h.lin1_b)?;
        let l1 = tape.relu(l1)?;
        let l2 = tape.matmul(l1, h.lin2_w)?;
        let l2 = tape.add_row(l2, h.lin2_b)?;
        let l2 = tape.relu(l2)?;
        let l3 = tape.matmul(l2, h.lin3_w)?;
        frame_feats.push(tape.add_row(l3, h.lin3_b)?);
    }
    // Time-major stack (T·B)×N, then one T×N feature matrix per sequence.
    let stacked = tape.concat_rows(&frame_feats)?;
    let mut seqs = Vec::with_capacity(b);
    for bi in 0..b {
        let rows: Vec<usize> = (0..t_len).map(|t| t * b + bi).collect();
        seqs.push(tape.gather_rows(stacked, &rows)?);
    }
    let features = sagc_forward_batch(tape, &seqs, &h.att, intra, &h.gc, cfg.top_k)?;
    let coords = tape.matmul(features, h.head_w)?;
    tape.add_row(coords, h.head_b)
}

/// Full differentiable generator pass for a batch.
pub fn forward_batch(
    tape: &mut Tape,
    h: &GenHandles,
    cfg: &GenConfig,
    intra: &IntraFrameAdjacency,
    cond: &Conditioning,
    z_steps: &[Tensor],
) -> Result<DiffTensor> {
    let (_, accum) = backbone_frames(tape, h, cfg, cond, z_steps)?;
    forward_from_accum(tape, h, cfg, intra, &accum)
}

/// Draw the per-sequence (or per-step) noise for a batch.
pub fn draw_noise(cfg: &GenConfig, batch: usize, rng: &mut Rng) -> Vec<Tensor> {
    let steps = if cfg.per_step_noise { cfg.seq_len } else { 1 };
    (0..steps)
        .map(|_| rng.gaussian_tensor(&[batch, cfg.noise_dim]))
        .collect()
}

/// Sample sequences without gradients.
pub fn generate_batch(
    params: &GeneratorParams,
    cfg: &GenConfig,
    topo: &SkeletonTopology,
    cond: &Conditioning,
    rng: &mut Rng,
) -> Result<Vec<ActionSequence>> {
    let b = cond.batch_size();
    let intra = build_intra_adjacency(topo);
    let z = draw_noise(cfg, b, rng);
    let mut tape = Tape::new();
    let handles = GenHandles::watch(&mut tape, params);
    let out = forward_batch(&mut tape, &handles, cfg, &intra, cond, &z)?;
    let data = tape.data(out);
    let (t, n, d) = (cfg.seq_len, cfg.joints, cfg.coord_dims);
    let labels: Vec<usize> = match cond {
        Conditioning::Classes(v) => v.clone(),
        // A mixture has no single class; record the dominant component.
        Conditioning::Mixtures(rows) => rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite weights"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect(),
    };
    let mut out_seqs = Vec::with_capacity(b);
    for (bi, label) in labels.iter().enumerate() {
        let start = bi * t * n * d;
        let coords = Tensor::from_vec(data[start..start + t * n * d].to_vec(), &[t, n, d])?;
        out_seqs.push(ActionSequence::new(coords, *label)?);
    }
    Ok(out_seqs)
}

/// Sample a single sequence for a class label.
pub fn generate(
    params: &GeneratorParams,
    cfg: &GenConfig,
    topo: &SkeletonTopology,
    label: usize,
    rng: &mut Rng,
) -> Result<ActionSequence> {
    let mut seqs = generate_batch(params, cfg, topo, &Conditioning::Classes(vec![label]), rng)?;
    Ok(seqs.remove(0))
}

// ── checkpoint format ───────────────────────────────────────────────

pub const CKPT_MAGIC: &[u8; 4] = b"SGCK";
pub const CKPT_VERSION: u32 = 1;

/// Versioned binary dump of named parameter tensors plus scalar metadata.
/// Round-trips bit-exactly (f64 bit patterns are preserved).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, f64)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<f64> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_value(key)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("checkpoint missing meta key `{key}`")))
    }

    pub fn tensor_map(&self) -> HashMap<&str, &Tensor> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect()
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    write_str(&mut buf, &ckpt.kind);
    buf.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.meta {
        write_str(&mut buf, k);
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct CkptReader {
    bytes: Vec<u8>,
    pos: usize,
}

impl CkptReader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not utf-8".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let mut r = CkptReader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: bad checkpoint magic", path.display())));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = r.string()?;
    let n_meta = r.u32()? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = r.string()?;
        let v = r.f64()?;
        meta.push((k, v));
    }
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f64()?);
        }
        tensors.push((name, Tensor::from_vec(data, &shape)?));
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint { kind, meta, tensors })
}

/// Metadata entries describing a [`GenConfig`].
pub fn gen_config_meta(cfg: &GenConfig) -> Vec<(String, f64)> {
    vec![
        ("classes".into(), cfg.classes as f64),
        ("joints".into(), cfg.joints as f64),
        ("coord_dims".into(), cfg.coord_dims as f64),
        ("seq_len".into(), cfg.seq_len as f64),
        ("noise_dim".into(), cfg.noise_dim as f64),
        ("embed_dim".into(), cfg.embed_dim as f64),
        ("top_k".into(), cfg.top_k as f64),
        ("hidden".into(), cfg.hidden as f64),
        ("per_step_noise".into(), cfg.per_step_noise as u8 as f64),
    ]
}

pub fn gen_config_from_meta(ckpt: &Checkpoint) -> Result<GenConfig> {
    Ok(GenConfig {
        classes: ckpt.meta_usize("classes")?,
        joints: ckpt.meta_usize("joints")?,
        coord_dims: ckpt.meta_usize("coord_dims")?,
        seq_len: ckpt.meta_usize("seq_len")?,
        noise_dim: ckpt.meta_usize("noise_dim")?,
        embed_dim: ckpt.meta_usize("embed_dim")?,
        top_k: ckpt.meta_usize("top_k")?,
        hidden: ckpt.meta_usize("hidden")?,
        per_step_noise: ckpt.meta_usize("per_step_noise")? != 0,
    })
}

/// Rebuild generator parameters from named checkpoint tensors, validating
/// shapes against the config.
pub fn gen_params_from_tensors(
    cfg: &GenConfig,
    prefix: &str,
    tensors: &HashMap<&str, &Tensor>,
) -> Result<GeneratorParams> {
    let mut template = GeneratorParams::zeros(cfg);
    for (name, slot) in template.named_mut() {
        let key = format!("{prefix}{name}");
        let found = tensors
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
    Ok(template)
}
