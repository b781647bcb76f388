//! Skeleton topology, action-sequence data model, file formats, the
//! synthetic dataset generator, and per-frame SVG rendering.
//!
//! Sequence files ("SASQ") are little-endian binary: magic `SASQ`, then
//! u32 header fields version, classes, joints, coord dims, frames, record
//! count, then per record a u32 label followed by T·N·D f32 coordinates.
//! Coordinates are f32 on disk and f64 in memory; a load/save round trip
//! is byte-identical.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numcore::{Rng, Tensor};
use crate::{Error, Result};

pub const SASQ_MAGIC: &[u8; 4] = b"SASQ";
pub const SASQ_VERSION: u32 = 1;

/// Joint graph of one skeleton: names, undirected bone edges, and the
/// coordinate dimensionality of each joint.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTopology {
    pub n_joints: usize,
    pub joint_names: Vec<String>,
    /// Normalized unordered pairs (a < b), sorted, deduplicated.
    pub edges: Vec<(usize, usize)>,
    pub coord_dims: usize,
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    coord_dims: usize,
    joints: Vec<String>,
    edges: Vec<[usize; 2]>,
}

impl SkeletonTopology {
    /// Validates: edge indices in range, no self-loops, connected graph.
    pub fn new(
        joint_names: Vec<String>,
        edges: &[(usize, usize)],
        coord_dims: usize,
    ) -> Result<Self> {
        let n = joint_names.len();
        if n == 0 {
            return Err(Error::Config("topology has no joints".into()));
        }
        if coord_dims == 0 {
            return Err(Error::Config("coord_dims must be at least 1".into()));
        }
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Config(format!(
                    "edge ({a}, {b}) out of range for {n} joints"
                )));
            }
            if a == b {
                return Err(Error::Config(format!("self-loop on joint {a}")));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        normalized.dedup();

        // A skeleton is one body: require connectivity.
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &normalized {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    reached += 1;
                    queue.push_back(w);
                }
            }
        }
        if reached != n {
            return Err(Error::Config(format!(
                "skeleton graph is disconnected: reached {reached} of {n} joints"
            )));
        }
        Ok(SkeletonTopology {
            n_joints: n,
            joint_names,
            edges: normalized,
            coord_dims,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: TopologyFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("topology {}: {e}", path.display())))?;
        let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        SkeletonTopology::new(file.joints, &edges, file.coord_dims)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let file = TopologyFile {
            coord_dims: self.coord_dims,
            joints: self.joint_names.clone(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&file).expect("serializable"))?;
        Ok(())
    }

    pub fn degree(&self, joint: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == joint || b == joint)
            .count()
    }
}

/// Built-in topologies.
pub mod presets {
    use super::SkeletonTopology;

    /// 15-joint two-arm/two-leg tree in the style of common mocap skeletons.
    pub fn body15() -> SkeletonTopology {
        let names = [
            "root", "neck", "head", "lshoulder", "lelbow", "lwrist", "rshoulder", "relbow",
            "rwrist", "lhip", "lknee", "lankle", "rhip", "rknee", "rankle",
        ];
        let edges = [
            (0, 1),
            (1, 2),
            (1, 3),
            (3, 4),
            (4, 5),
            (1, 6),
            (6, 7),
            (7, 8),
            (0, 9),
            (9, 10),
            (10, 11),
            (0, 12),
            (12, 13),
            (13, 14),
        ];
        SkeletonTopology::new(names.iter().map(|s| s.to_string()).collect(), &edges, 2)
            .expect("preset is valid")
    }

    /// n-joint chain, the desk-scale skeleton.
    pub fn chain(n: usize) -> SkeletonTopology {
        let names = (0..n).map(|i| format!("j{i}")).collect();
        let edges: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        SkeletonTopology::new(names, &edges, 2).expect("chain is valid for n >= 1")
    }
}

/// Ā = A + I: symmetric 0/1 bone adjacency with self connections.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraFrameAdjacency {
    pub n: usize,
    matrix: Vec<f64>,
}

impl IntraFrameAdjacency {
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    /// Row sums of Ā, i.e. 1 + bone degree per joint.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.matrix[i * self.n..(i + 1) * self.n].iter().sum())
            .collect()
    }
}

pub fn build_intra_adjacency(topo: &SkeletonTopology) -> IntraFrameAdjacency {
    let n = topo.n_joints;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    for &(a, b) in &topo.edges {
        m[a * n + b] = 1.0;
        m[b * n + a] = 1.0;
    }
    IntraFrameAdjacency { n, matrix: m }
}

/// One labeled action: a T×N×D coordinate tensor plus its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSequence {
    pub coords: Tensor,
    pub label: usize,
}

impl ActionSequence {
    pub fn new(coords: Tensor, label: usize) -> Result<Self> {
        if coords.shape().len() != 3 || coords.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "action sequence wants shape [T, N, D] with T >= 1, got {:?}",
                coords.shape()
            )));
        }
        if !coords.all_finite() {
            return Err(Error::Numeric("non-finite coordinate in sequence".into()));
        }
        Ok(ActionSequence { coords, label })
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn dims(&self) -> usize {
        self.coords.shape()[2]
    }

    pub fn at(&self, t: usize, joint: usize, d: usize) -> f64 {
        let (n, dd) = (self.joints(), self.dims());
        self.coords.data()[(t * n + joint) * dd + d]
    }

    /// Copy shifted so the root joint of frame 0 sits at the origin.
    pub fn centered_on_root(&self) -> ActionSequence {
        let (t, n, d) = (self.frames(), self.joints(), self.dims());
        let root: Vec<f64> = (0..d).map(|k| self.at(0, 0, k)).collect();
        let mut data = self.coords.data().to_vec();
        for i in 0..t * n {
            for k in 0..d {
                data[i * d + k] -= root[k];
            }
        }
        ActionSequence {
            coords: Tensor::from_vec(data, &[t, n, d]).expect("same shape"),
            label: self.label,
        }
    }
}

/// Train/test partition over sequence indices; disjoint and exhaustive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<ActionSequence>,
    pub topology: SkeletonTopology,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_sequences(&self) -> impl Iterator<Item = &ActionSequence> {
        self.split.train.iter().map(|&i| &self.sequences[i])
    }

    pub fn test_sequences(&self) -> impl Iterator<Item = &ActionSequence> {
        self.split.test.iter().map(|&i| &self.sequences[i])
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        for (i, s) in self.sequences.iter().enumerate() {
            if s.joints() != self.topology.n_joints || s.dims() != self.topology.coord_dims {
                return Err(Error::Shape(format!(
                    "sequence {i}: {}x{} joints/dims vs topology {}x{}",
                    s.joints(),
                    s.dims(),
                    self.topology.n_joints,
                    self.topology.coord_dims
                )));
            }
            if s.label >= c {
                return Err(Error::Format(format!(
                    "sequence {i}: label {} out of range for {c} classes",
                    s.label
                )));
            }
        }
        let mut seen = vec![0u8; self.sequences.len()];
        for &i in self.split.train.iter().chain(&self.split.test) {
            if i >= seen.len() || seen[i] > 0 {
                return Err(Error::Contract(
                    "split indices must be disjoint and in range".into(),
                ));
            }
            seen[i] = 1;
        }
        if seen.iter().any(|&s| s == 0) {
            return Err(Error::Contract("split does not cover every sequence".into()));
        }
        Ok(())
    }
}

// ── SASQ binary format ──────────────────────────────────────────────

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Write sequences to a SASQ file. `frames` pins the header T so that an
/// empty record list still produces a valid file.
pub fn save_sequences(
    path: &Path,
    sequences: &[&ActionSequence],
    classes: usize,
    topo: &SkeletonTopology,
    frames: usize,
) -> Result<()> {
    if frames == 0 {
        return Err(Error::Config("SASQ frame count must be at least 1".into()));
    }
    let (n, d) = (topo.n_joints, topo.coord_dims);
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SASQ_MAGIC);
    for v in [
        SASQ_VERSION,
        classes as u32,
        n as u32,
        d as u32,
        frames as u32,
        sequences.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (i, s) in sequences.iter().enumerate() {
        if s.frames() != frames || s.joints() != n || s.dims() != d {
            return Err(Error::Shape(format!(
                "record {i}: shape {:?} vs header [{frames}, {n}, {d}]",
                s.coords.shape()
            )));
        }
        if s.label >= classes {
            return Err(Error::Format(format!(
                "record {i}: label {} out of range for {classes} classes",
                s.label
            )));
        }
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        for &v in s.coords.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Header fields of a SASQ file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SasqHeader {
    pub classes: usize,
    pub joints: usize,
    pub coord_dims: usize,
    pub frames: usize,
    pub records: usize,
}

/// Read only the header of a SASQ file.
pub fn sasq_header(path: &Path) -> Result<SasqHeader> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != SASQ_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut f)?;
    if version != SASQ_VERSION {
        return Err(Error::Format(format!("unsupported SASQ version {version}")));
    }
    Ok(SasqHeader {
        classes: read_u32(&mut f)? as usize,
        joints: read_u32(&mut f)? as usize,
        coord_dims: read_u32(&mut f)? as usize,
        frames: read_u32(&mut f)? as usize,
        records: read_u32(&mut f)? as usize,
    })
}

/// Load a SASQ file, validating against the provided topology. Invalid
/// records are reported together by index.
pub fn load_sequences(path: &Path, topo: &SkeletonTopology) -> Result<Dataset> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != SASQ_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut f)?;
    if version != SASQ_VERSION {
        return Err(Error::Format(format!("unsupported SASQ version {version}")));
    }
    let classes = read_u32(&mut f)? as usize;
    let n = read_u32(&mut f)? as usize;
    let d = read_u32(&mut f)? as usize;
    let t = read_u32(&mut f)? as usize;
    let count = read_u32(&mut f)? as usize;
    if n != topo.n_joints || d != topo.coord_dims {
        return Err(Error::Format(format!(
            "header joints/dims {n}x{d} vs topology {}x{}",
            topo.n_joints, topo.coord_dims
        )));
    }
    if t == 0 {
        return Err(Error::Format("header frame count is 0".into()));
    }

    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let rec_bytes = 4 + t * n * d * 4;
    if rest.len() != count * rec_bytes {
        return Err(Error::Format(format!(
            "expected {} record bytes, found {}",
            count * rec_bytes,
            rest.len()
        )));
    }

    let mut sequences = Vec::with_capacity(count);
    let mut bad: Vec<(usize, String)> = Vec::new();
    for i in 0..count {
        let rec = &rest[i * rec_bytes..(i + 1) * rec_bytes];
        let label = u32::from_le_bytes(rec[0..4].try_into().unwrap()) as usize;
        let mut coords = Vec::with_capacity(t * n * d);
        let mut finite = true;
        for c in rec[4..].chunks_exact(4) {
            let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            finite &= v.is_finite();
            coords.push(v);
        }
        if label >= classes {
            bad.push((i, format!("label {label} >= {classes}")));
            continue;
        }
        if !finite {
            bad.push((i, "non-finite coordinate".into()));
            continue;
        }
        sequences.push(ActionSequence {
            coords: Tensor::from_vec(coords, &[t, n, d]).expect("sized above"),
            label,
        });
    }
    if !bad.is_empty() {
        let listing: Vec<String> = bad.iter().map(|(i, why)| format!("{i}: {why}")).collect();
        return Err(Error::Format(format!(
            "{} invalid record(s) [{}]",
            bad.len(),
            listing.join(", ")
        )));
    }
    let split = Split {
        train: (0..sequences.len()).collect(),
        test: Vec::new(),
    };
    Ok(Dataset {
        sequences,
        topology: topo.clone(),
        class_names: (0..classes).map(|c| format!("class_{c}")).collect(),
        split,
    })
}

// ── synthetic dataset ───────────────────────────────────────────────

/// Parameters for the deterministic parametric-motion dataset. Each class
/// is a chain skeleton whose joint j at frame t is offset horizontally by
/// amplitude·sin(ω_c·t + φ_c·j), plus Gaussian jitter σ.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub classes: usize,
    pub joints: usize,
    pub frames: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sigma: f64,
    pub amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 3,
            joints: 5,
            frames: 16,
            train_per_class: 100,
            test_per_class: 100,
            sigma: 0.05,
            amplitude: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn class_motion(&self, class: usize) -> (f64, f64) {
        let omega = 0.30 + 0.25 * class as f64;
        let phi = 0.40 + 0.60 * class as f64;
        (omega, phi)
    }

    /// Noiseless trajectory of one class, shape [frames, joints, 2].
    pub fn mean_trajectory(&self, class: usize) -> Tensor {
        let (omega, phi) = self.class_motion(class);
        let (t, n) = (self.frames, self.joints);
        let mut data = Vec::with_capacity(t * n * 2);
        for frame in 0..t {
            for j in 0..n {
                let x = self.amplitude * (omega * frame as f64 + phi * j as f64).sin();
                let y = 0.6 - 0.25 * j as f64;
                data.push(x);
                data.push(y);
            }
        }
        Tensor::from_vec(data, &[t, n, 2]).expect("sized above")
    }
}

pub fn synth_dataset(cfg: &SynthConfig, rng: &mut Rng) -> Result<Dataset> {
    if cfg.sigma < 0.0 {
        return Err(Error::Config(format!("sigma must be >= 0, got {}", cfg.sigma)));
    }
    if cfg.classes == 0 || cfg.joints == 0 || cfg.frames == 0 {
        return Err(Error::Config("classes, joints, and frames must be positive".into()));
    }
    let topology = presets::chain(cfg.joints);
    let mut sequences = Vec::new();
    let mut split = Split::default();
    for class in 0..cfg.classes {
        let mean = cfg.mean_trajectory(class);
        let total = cfg.train_per_class + cfg.test_per_class;
        for i in 0..total {
            let mut data = mean.data().to_vec();
            for v in data.iter_mut() {
                *v += cfg.sigma * rng.gaussian();
            }
            let idx = sequences.len();
            sequences.push(ActionSequence {
                coords: Tensor::from_vec(data, &[cfg.frames, cfg.joints, 2]).expect("same shape"),
                label: class,
            });
            if i < cfg.train_per_class {
                split.train.push(idx);
            } else {
                split.test.push(idx);
            }
        }
    }
    let ds = Dataset {
        sequences,
        topology,
        class_names: (0..cfg.classes).map(|c| format!("class_{c}")).collect(),
        split,
    };
    ds.validate()?;
    Ok(ds)
}

// ── rendering ───────────────────────────────────────────────────────

const VIEW_PX: f64 = 400.0;
const WORLD_HALF: f64 = 2.0;

fn to_px(v: f64) -> f64 {
    (v + WORLD_HALF) / (2.0 * WORLD_HALF) * VIEW_PX
}

/// Render one SVG per frame into `out_dir`: joints as circles, bones as
/// line segments, fixed viewport mapping [-2, 2]² to 400×400 px with the
/// y axis pointing up.
pub fn render_sequence(
    seq: &ActionSequence,
    topo: &SkeletonTopology,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if seq.joints() != topo.n_joints || seq.dims() < 2 {
        return Err(Error::Shape(format!(
            "sequence {}x{} does not match topology {} joints (2D)",
            seq.joints(),
            seq.dims(),
            topo.n_joints
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::with_capacity(seq.frames());
    for t in 0..seq.frames() {
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n",
            VIEW_PX as u32
        ));
        svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        for &(a, b) in &topo.edges {
            let (x1, y1) = (to_px(seq.at(t, a, 0)), VIEW_PX - to_px(seq.at(t, a, 1)));
            let (x2, y2) = (to_px(seq.at(t, b, 0)), VIEW_PX - to_px(seq.at(t, b, 1)));
            svg.push_str(&format!(
                "  <line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"black\" stroke-width=\"2\"/>\n"
            ));
        }
        for j in 0..seq.joints() {
            let (cx, cy) = (to_px(seq.at(t, j, 0)), VIEW_PX - to_px(seq.at(t, j, 1)));
            svg.push_str(&format!(
                "  <circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"crimson\"/>\n"
            ));
        }
        svg.push_str("</svg>\n");
        let file = out_dir.join(format!("frame_{t:04}.svg"));
        fs::write(&file, svg)?;
        files.push(file);
    }
    Ok(files)
}
