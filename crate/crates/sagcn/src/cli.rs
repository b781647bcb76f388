//! Command implementations behind the `sagcn` binary: train, generate,
//! eval, mix, render. Settings resolve in order: built-in default, then
//! `--config` key=value file, then explicit flags.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::eval::{
    mixing_sweep, mmd_report, parse_key_values, recognition_accuracy, spearman, train_classifier,
    ClassifierParams, ClassifierTrainConfig,
};
use crate::gan::{generator_from_checkpoint, topology_from_checkpoint, train, TrainConfig};
use crate::generator::{generate_batch, load_checkpoint, save_checkpoint, Conditioning, GenConfig};
use crate::skeleton::{
    load_sequences, presets, render_sequence, sasq_header, save_sequences, ActionSequence,
    SkeletonTopology,
};
use crate::{Error, Result};

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_STEPS: u64 = 2000;
pub const DEFAULT_SEQ_LEN: usize = 50;
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_BATCH: usize = 100;
pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_K_FRAME: usize = 20;

#[derive(Parser, Debug)]
#[command(
    name = "sagcn",
    version,
    about = "Skeleton action generation with attention-sparsified graph convolutions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the conditional GAN on a SASQ dataset.
    Train(TrainArgs),
    /// Sample sequences from a trained checkpoint into a SASQ file.
    Generate(GenerateArgs),
    /// Compare real and generated SASQ files (MMD and recognition).
    Eval(EvalArgs),
    /// Sweep label mixtures and score them with a classifier.
    Mix(MixArgs),
    /// Render a sequence to one SVG per frame.
    Render(RenderArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// key=value config file; explicit flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// output directory or file [default: sagcn_out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// training dataset (SASQ)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// topology JSON path, or builtin "chain" / "body15" [default: chain]
    #[arg(long)]
    pub topology: Option<String>,
    /// training iterations [default: 2000]
    #[arg(long)]
    pub steps: Option<u64>,
    /// sequence length T [default: the dataset's frame count]
    #[arg(long = "seq-len")]
    pub seq_len: Option<usize>,
    /// past frames kept per row of the attention matrix [default: 5]
    #[arg(long = "top-k")]
    pub top_k: Option<usize>,
    /// minibatch size [default: 100]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate [default: 0.0002]
    #[arg(long)]
    pub lr: Option<f64>,
    /// frames sampled per sequence by the frame discriminator [default: 20]
    #[arg(long = "k-frame")]
    pub k_frame: Option<usize>,
    /// checkpoint cadence in steps; 0 keeps only initial and final [default: 0]
    #[arg(long = "ckpt-every")]
    pub ckpt_every: Option<u64>,
    /// center sequences on the frame-0 root joint [default: true]
    #[arg(long)]
    pub center: Option<bool>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// trained GAN checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// conditioning class index [default: 0]
    #[arg(long)]
    pub label: Option<usize>,
    /// number of sequences [default: 1]
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// real sequences (SASQ)
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// generated sequences (SASQ)
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// topology JSON path, or builtin "chain" / "body15" [default: chain]
    #[arg(long)]
    pub topology: Option<String>,
    /// recognition classifier checkpoint; omit to train one from --dataset
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// dataset for classifier training when --classifier is absent
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// classifier training steps [default: 500]
    #[arg(long = "classifier-steps")]
    pub classifier_steps: Option<u64>,
    /// save the freshly trained classifier here
    #[arg(long = "save-classifier")]
    pub save_classifier: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// trained GAN checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// recognition classifier checkpoint
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// first class of the mixture
    #[arg(long)]
    pub y1: Option<usize>,
    /// second class of the mixture
    #[arg(long)]
    pub y2: Option<usize>,
    /// number of lambda grid points in [0, 1] [default: 11]
    #[arg(long)]
    pub lambdas: Option<usize>,
    /// sequences generated per lambda [default: 50]
    #[arg(long = "n-per-lambda")]
    pub n_per_lambda: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// sequences file (SASQ)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// record index to render [default: 0]
    #[arg(long)]
    pub index: Option<usize>,
    /// topology JSON path, or builtin "chain" / "body15" [default: chain]
    #[arg(long)]
    pub topology: Option<String>,
}

/// Exit code mapping: configuration and input-validation problems are 1,
/// runtime/numeric failures are 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Mix(args) => cmd_mix(args),
        Command::Render(args) => cmd_render(args),
    }
}

// ── config file ─────────────────────────────────────────────────────

const KNOWN_KEYS: [&str; 14] = [
    "dataset",
    "topology",
    "out",
    "seed",
    "steps",
    "seq-len",
    "top-k",
    "batch",
    "lr",
    "k-frame",
    "ckpt-every",
    "center",
    "classifier-steps",
    "n-per-lambda",
];

pub fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "{}:{}: unknown config key `{key}`",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

struct Settings {
    map: HashMap<String, String>,
}

impl Settings {
    fn load(common: &CommonArgs) -> Result<Self> {
        let map = match &common.config {
            Some(path) => parse_config_file(path)?,
            None => HashMap::new(),
        };
        Ok(Settings { map })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{raw}`"))),
        }
    }

    /// flag value, else config value, else default.
    fn pick<T: std::str::FromStr + Clone>(
        &self,
        flag: &Option<T>,
        key: &str,
        default: T,
    ) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v.clone());
        }
        Ok(self.parsed::<T>(key)?.unwrap_or(default))
    }

    fn pick_opt<T: std::str::FromStr + Clone>(
        &self,
        flag: &Option<T>,
        key: &str,
    ) -> Result<Option<T>> {
        if let Some(v) = flag {
            return Ok(Some(v.clone()));
        }
        self.parsed::<T>(key)
    }
}

fn require_path(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let path = value.ok_or_else(|| Error::Config(format!("missing required flag {flag}")))?;
    if !path.exists() {
        return Err(Error::Config(format!(
            "{flag} {}: file does not exist",
            path.display()
        )));
    }
    Ok(path)
}

/// Resolve a topology argument: a JSON file path, one of the builtin names
/// ("chain", "body15"), or — when absent — a chain sized from the data.
pub fn resolve_topology(arg: Option<&str>, joints: usize, coord_dims: usize) -> Result<SkeletonTopology> {
    match arg {
        None | Some("chain") => {
            let mut topo = presets::chain(joints);
            topo.coord_dims = coord_dims;
            Ok(topo)
        }
        Some("body15") => Ok(presets::body15()),
        Some(path) => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "--topology {path}: file does not exist"
                )));
            }
            SkeletonTopology::from_file(p)
        }
    }
}

// ── commands ────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let dataset_path = require_path(
        args.dataset
            .clone()
            .or(s.parsed::<PathBuf>("dataset")?),
        "--dataset",
    )?;
    let header = sasq_header(&dataset_path)?;
    let topo_arg = s.pick_opt(&args.topology, "topology")?;
    let topo = resolve_topology(topo_arg.as_deref(), header.joints, header.coord_dims)?;
    let dataset = load_sequences(&dataset_path, &topo)?;
    if dataset.sequences.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }

    let seq_len = s.pick(&args.seq_len, "seq-len", header.frames)?;
    if seq_len != header.frames {
        return Err(Error::Config(format!(
            "--seq-len {seq_len} does not match the dataset's {} frames",
            header.frames
        )));
    }
    let mut gen_cfg = GenConfig::for_topology(dataset.classes(), &topo);
    gen_cfg.seq_len = seq_len;
    gen_cfg.top_k = s.pick(&args.top_k, "top-k", DEFAULT_TOP_K)?;

    let cfg = TrainConfig {
        batch: s.pick(&args.batch, "batch", DEFAULT_BATCH)?,
        steps: s.pick(&args.steps, "steps", DEFAULT_STEPS)?,
        lr: s.pick(&args.lr, "lr", DEFAULT_LR)?,
        k_frame: s.pick(&args.k_frame, "k-frame", DEFAULT_K_FRAME)?,
        seed: s.pick(&args.common.seed, "seed", DEFAULT_SEED)?,
        ckpt_every: s.pick(&args.ckpt_every, "ckpt-every", 0)?,
        center: s.pick(&args.center, "center", true)?,
        disc: Default::default(),
    };
    let out_dir = s
        .pick_opt(&args.common.out, "out")?
        .unwrap_or_else(|| PathBuf::from("sagcn_out"));
    let output = train(&dataset, &gen_cfg, &cfg, Some(&out_dir))?;
    println!(
        "trained {} steps; outputs in {}",
        output.metrics.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let ckpt_path = require_path(args.checkpoint.clone(), "--checkpoint")?;
    let label = args.label.unwrap_or(0);
    let n = args.n.unwrap_or(1);
    let seed = s.pick(&args.common.seed, "seed", DEFAULT_SEED)?;
    let out = s
        .pick_opt(&args.common.out, "out")?
        .unwrap_or_else(|| PathBuf::from("generated.sasq"));

    let ckpt = load_checkpoint(&ckpt_path)?;
    let (gen_cfg, params) = generator_from_checkpoint(&ckpt)?;
    let topo = topology_from_checkpoint(&ckpt)?;
    if label >= gen_cfg.classes {
        return Err(Error::Config(format!(
            "--label {label} out of range for {} classes",
            gen_cfg.classes
        )));
    }
    let mut rng = crate::numcore::Rng::from_seed(seed);
    let seqs = if n == 0 {
        Vec::new()
    } else {
        generate_batch(
            &params,
            &gen_cfg,
            &topo,
            &Conditioning::Classes(vec![label; n]),
            &mut rng,
        )?
    };
    let refs: Vec<&ActionSequence> = seqs.iter().collect();
    save_sequences(&out, &refs, gen_cfg.classes, &topo, gen_cfg.seq_len)?;
    println!("wrote {} sequence(s) to {}", refs.len(), out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let real_path = require_path(args.real.clone(), "--real")?;
    let gen_path = require_path(args.gen.clone(), "--gen")?;
    let rh = sasq_header(&real_path)?;
    let gh = sasq_header(&gen_path)?;
    if rh.frames != gh.frames {
        return Err(Error::Config(format!(
            "sequence length mismatch: real has {} frames, generated has {}",
            rh.frames, gh.frames
        )));
    }
    if rh.joints != gh.joints || rh.coord_dims != gh.coord_dims {
        return Err(Error::Config(format!(
            "shape mismatch: real {}x{} vs generated {}x{}",
            rh.joints, rh.coord_dims, gh.joints, gh.coord_dims
        )));
    }
    let topo_arg = s.pick_opt(&args.topology, "topology")?;
    let topo = resolve_topology(topo_arg.as_deref(), rh.joints, rh.coord_dims)?;
    let real = load_sequences(&real_path, &topo)?;
    let gen = load_sequences(&gen_path, &topo)?;
    if real.sequences.len() < 2 || gen.sequences.len() < 2 {
        return Err(Error::Config(
            "MMD needs at least 2 sequences on each side".into(),
        ));
    }

    let real_refs: Vec<&ActionSequence> = real.sequences.iter().collect();
    let gen_refs: Vec<&ActionSequence> = gen.sequences.iter().collect();
    let report = mmd_report(&real_refs, &gen_refs)?;
    let mut text = report.render();

    let classifier = match &args.classifier {
        Some(path) => {
            let path = require_path(Some(path.clone()), "--classifier")?;
            Some(ClassifierParams::from_checkpoint(&load_checkpoint(&path)?)?)
        }
        None => match &args.dataset {
            Some(ds_path) => {
                let ds_path = require_path(Some(ds_path.clone()), "--dataset")?;
                let train_ds = load_sequences(&ds_path, &topo)?;
                let cfg = ClassifierTrainConfig {
                    steps: s.pick(&args.classifier_steps, "classifier-steps", 500)?,
                    seed: s.pick(&args.common.seed, "seed", DEFAULT_SEED)?,
                    ..ClassifierTrainConfig::default()
                };
                let out = train_classifier(&train_ds, &cfg)?;
                if let Some(save) = &args.save_classifier {
                    save_checkpoint(save, &out.params.to_checkpoint())?;
                }
                Some(out.params)
            }
            None => None,
        },
    };
    match classifier {
        Some(cls) => {
            let rec = recognition_accuracy(&cls, &gen_refs)?;
            text.push_str("recognition accuracy on generated sequences:\n");
            text.push_str(&rec.render(&gen.class_names));
        }
        None => {
            text.push_str("recognition accuracy skipped (no --classifier or --dataset given)\n");
        }
    }

    print!("{text}");
    let out = s
        .pick_opt(&args.common.out, "out")?
        .unwrap_or_else(|| PathBuf::from("sagcn_eval.txt"));
    fs::write(&out, &text)?;
    // Guard against a report that cannot be parsed back.
    let kv = parse_key_values(&text);
    debug_assert!(kv.contains_key("mmd_seq"));
    Ok(())
}

fn cmd_mix(args: MixArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let ckpt_path = require_path(args.checkpoint.clone(), "--checkpoint")?;
    let cls_path = require_path(args.classifier.clone(), "--classifier")?;
    let y1 = args.y1.ok_or_else(|| Error::Config("missing required flag --y1".into()))?;
    let y2 = args.y2.ok_or_else(|| Error::Config("missing required flag --y2".into()))?;
    let grid = args.lambdas.unwrap_or(11);
    if grid < 2 {
        return Err(Error::Config("--lambdas must be at least 2".into()));
    }
    let n_per = s.pick(&args.n_per_lambda, "n-per-lambda", 50)?;
    let seed = s.pick(&args.common.seed, "seed", DEFAULT_SEED)?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let (gen_cfg, params) = generator_from_checkpoint(&ckpt)?;
    let topo = topology_from_checkpoint(&ckpt)?;
    let classifier = ClassifierParams::from_checkpoint(&load_checkpoint(&cls_path)?)?;
    if y1 == y2 || y1 >= gen_cfg.classes || y2 >= gen_cfg.classes {
        return Err(Error::Config(format!(
            "--y1 {y1} / --y2 {y2} must be distinct classes below {}",
            gen_cfg.classes
        )));
    }

    let lambdas: Vec<f64> = (0..grid)
        .map(|i| i as f64 / (grid - 1) as f64)
        .collect();
    let mut rng = crate::numcore::Rng::from_seed(seed);
    let rows = mixing_sweep(
        &params, &gen_cfg, &topo, y1, y2, &lambdas, n_per, &classifier, &mut rng,
    )?;
    let mut text = format!("lambda sweep: class {y1} vs class {y2}, {n_per} sequences per point\n");
    for (lambda, p) in &rows {
        text.push_str(&format!("lambda={lambda:.2} mean_p_y1={p:.6}\n"));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
    text.push_str(&format!("spearman={:.6}\n", spearman(&xs, &ys)));
    print!("{text}");
    if let Some(out) = s.pick_opt(&args.common.out, "out")? {
        fs::write(out, &text)?;
    }
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let input = require_path(args.input.clone(), "--input")?;
    let header = sasq_header(&input)?;
    let topo_arg = s.pick_opt(&args.topology, "topology")?;
    let topo = resolve_topology(topo_arg.as_deref(), header.joints, header.coord_dims)?;
    let ds = load_sequences(&input, &topo)?;
    let index = args.index.unwrap_or(0);
    let seq = ds.sequences.get(index).ok_or_else(|| {
        Error::Config(format!(
            "--index {index} out of range: file holds {} sequences",
            ds.sequences.len()
        ))
    })?;
    let out = s
        .pick_opt(&args.common.out, "out")?
        .unwrap_or_else(|| PathBuf::from("frames"));
    let files = render_sequence(seq, &topo, &out)?;
    println!("wrote {} frame(s) to {}", files.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parses_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nsteps=12\nlr = 0.001\n\nseq-len=16\n").unwrap();
        let map = parse_config_file(&path).unwrap();
        assert_eq!(map["steps"], "12");
        assert_eq!(map["lr"], "0.001");
        assert_eq!(map["seq-len"], "16");

        fs::write(&path, "bogus=1\n").unwrap();
        assert!(matches!(parse_config_file(&path), Err(Error::Config(_))));
        fs::write(&path, "no equals sign\n").unwrap();
        assert!(matches!(parse_config_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "steps=12\nbatch=3\n").unwrap();
        let common = CommonArgs {
            config: Some(path),
            seed: None,
            out: None,
        };
        let s = Settings::load(&common).unwrap();
        // Flag wins over config; config wins over default.
        assert_eq!(s.pick(&Some(99u64), "steps", 5).unwrap(), 99);
        assert_eq!(s.pick(&None::<u64>, "steps", 5).unwrap(), 12);
        assert_eq!(s.pick(&None::<usize>, "batch", 7).unwrap(), 3);
        assert_eq!(s.pick(&None::<u64>, "seed", 42).unwrap(), 42);
    }

    #[test]
    fn topology_resolution() {
        let chain = resolve_topology(None, 4, 2).unwrap();
        assert_eq!(chain.n_joints, 4);
        let body = resolve_topology(Some("body15"), 4, 2).unwrap();
        assert_eq!(body.n_joints, 15);
        assert!(resolve_topology(Some("/nonexistent/t.json"), 4, 2).is_err());
    }

    #[test]
    fn missing_required_flag_names_the_flag() {
        let err = require_path(None, "--dataset").unwrap_err();
        assert!(err.to_string().contains("--dataset"));
        assert_eq!(exit_code(&err), 1);
    }

    #[test]
    fn runtime_errors_map_to_code_two() {
        assert_eq!(exit_code(&Error::Numeric("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
    }
}
