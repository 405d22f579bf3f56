//! The `rvqa` command line: dataset generation, feature extraction, training,
//! evaluation, ensembling and gradient checking.
//!
//! Exit status is 0 on success, 1 on a usage or validation error and 2 when a
//! run fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_into, load_rvqw, save_rvqw};
use crate::config::KvConfig;
use crate::data::{self, load_split, load_vocab, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradsuite::{run_op, SuiteConfig, SuiteReport, OPS};
use crate::pipeline::{build_samples, detection_samples, detector_from_kv, extract_features, load_features, save_features};
use crate::region::Detector;
use crate::train::vqa::sidecar;
use crate::train::{
    evaluate, evaluate_ensemble, render_table, report_kv, train, Member, TableRow, TrainConfig,
    VqaModel, VqaModelConfig, VqaSample,
};

/// Detector weights and settings written next to extracted features.
pub const DETECTOR_WEIGHTS: &str = "detector.rvqw";
pub const DETECTOR_CONFIG: &str = "detector.cfg";

#[derive(Parser, Debug)]
#[command(name = "rvqa", version, about = "Region-feature visual question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    GenData {
        /// Spec file; defaults are used for missing keys.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train a detector (or load one) and write region features.
    Extract {
        /// Config with `data_dir` and `det_*` keys.
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Feature directory.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Existing detector weights to use instead of training.
        #[arg(long, value_name = "PATH")]
        checkpoints: Option<PathBuf>,
        /// Only extract this split.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Train an answer model on extracted features.
    Train {
        /// Config with `data_dir`, `features_dir`, model and training keys.
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Checkpoint path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Score one checkpoint on a split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoints: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Metrics file.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Score the probability average of several checkpoints on a split.
    Ensemble {
        #[arg(long, value_name = "PATH[,PATH...]", value_delimiter = ',', num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Optional `instances`, `step`, `tol` and `ops` keys.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Report file.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(io) if matches!(io.kind(), ErrorKind::NotFound | ErrorKind::InvalidData) => 1,
        Error::Json(_) => 1,
        e if e.is_validation() => 1,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Extract {
            config,
            seed,
            out,
            checkpoints,
            split,
        } => extract(&config, seed, &out, checkpoints.as_deref(), split.map(Split::from)),
        Command::Train { config, seed, out } => train_cmd(&config, seed, &out),
        Command::Eval { checkpoints, split, out } => {
            let (row, report) = score(&[checkpoints], split.into())?;
            emit(&row, &report, out.as_deref())
        }
        Command::Ensemble { checkpoints, split, out } => {
            let (row, report) = score(&checkpoints, split.into())?;
            emit(&row, &report, out.as_deref())
        }
        Command::Gradcheck { config, seed, out } => gradcheck(config.as_deref(), seed, out.as_deref()),
    }
}

fn load_kv(path: &Path) -> Result<KvConfig> {
    KvConfig::load(path).map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))
}

fn take_dir(kv: &mut KvConfig, key: &str, base: &Path) -> Result<PathBuf> {
    let dir: String = kv
        .take_opt(key)?
        .ok_or_else(|| Error::Config(format!("config must set '{key}'")))?;
    let p = PathBuf::from(dir);
    Ok(if p.is_absolute() { p } else { base.join(p) })
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(fs::canonicalize(p)?)
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut kv = match config {
        Some(p) => load_kv(p)?,
        None => KvConfig::default(),
    };
    let mut spec = SyntheticSpec::from_kv(&mut kv)?;
    kv.finish()?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    data::write_dataset(&spec, out)?;
    println!(
        "wrote {} train and {} val questions to {}",
        spec.train_images * spec.questions_per_image,
        spec.val_images * spec.questions_per_image,
        out.display()
    );
    Ok(())
}

fn load_spec(data_dir: &Path) -> Result<SyntheticSpec> {
    let mut kv = load_kv(&data_dir.join("spec.cfg"))?;
    let spec = SyntheticSpec::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(spec)
}

fn extract(config: &Path, seed: Option<u64>, out: &Path, weights: Option<&Path>, split: Option<Split>) -> Result<()> {
    let mut kv = load_kv(config)?;
    let data_dir = take_dir(&mut kv, "data_dir", &config_base(config))?;
    let spec = load_spec(&data_dir)?;
    let (det_cfg, mut det_train) = detector_from_kv(&mut kv, &spec)?;
    kv.finish()?;
    if let Some(s) = seed {
        det_train.seed = s;
    }
    let det = Detector::new(det_cfg.clone())?;
    let train_ex = load_split(&data_dir, Split::Train)?;
    let store = match weights {
        Some(p) => {
            let mut store = det.init_params::<f32>(det_train.seed);
            let n = load_into(&mut store, &load_rvqw(p)?)?;
            if n != store.len() {
                return Err(Error::Format(format!(
                    "detector weights {} hold {n} of {} tensors",
                    p.display(),
                    store.len()
                )));
            }
            store
        }
        None => {
            let (store, losses) = det.train(&detection_samples(&train_ex)?, &det_train)?;
            for (e, l) in losses.iter().enumerate() {
                println!("detector epoch {} loss {l:.6}", e + 1);
            }
            store
        }
    };
    let splits = match split {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Val],
    };
    let mut examples = Vec::new();
    for s in splits {
        if s == Split::Train {
            examples.extend(train_ex.iter().cloned());
        } else {
            examples.extend(load_split(&data_dir, s)?);
        }
    }
    let features = extract_features(&det, &store, &examples)?;
    save_features(out, &features)?;
    save_rvqw(&out.join(DETECTOR_WEIGHTS), &store)?;
    let mut info = KvConfig::default();
    info.set("det_fpn_dim", det_cfg.fpn_dim);
    info.set("det_embed_dim", det_cfg.embed_dim);
    info.set("det_attribute_head", det_cfg.attribute_head);
    info.set("det_multiscale", det_cfg.multiscale);
    fs::write(out.join(DETECTOR_CONFIG), info.render())?;
    println!("wrote features for {} images to {}", features.len(), out.display());
    Ok(())
}

fn visual_dim(features: &BTreeMap<u32, crate::region::RegionFeatureSet>) -> Result<usize> {
    features
        .values()
        .next()
        .map(|f| f.dim())
        .ok_or_else(|| Error::InvalidInput("no region features found".into()))
}

fn train_cmd(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut kv = load_kv(config)?;
    let base = config_base(config);
    let data_dir = take_dir(&mut kv, "data_dir", &base)?;
    let features_dir = take_dir(&mut kv, "features_dir", &base)?;
    let spec = load_spec(&data_dir)?;
    let vocab = load_vocab(&data_dir)?;
    let train_ex = load_split(&data_dir, Split::Train)?;
    let features = load_features(&features_dir, &train_ex)?;
    if !kv.contains("vocab_size") {
        kv.set("vocab_size", spec.vocab_size);
    }
    if !kv.contains("visual_dim") {
        kv.set("visual_dim", visual_dim(&features)?);
    }
    if !kv.contains("answers") {
        kv.set("answers", vocab.answers.join(","));
    }
    let model_cfg = VqaModelConfig::from_kv(&mut kv)?;
    let mut train_cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let model = VqaModel::new(model_cfg)?;
    let samples = build_samples(&model, &train_ex, &features)?;
    let outcome = train(&model, model.init_params(train_cfg.seed), &samples, &train_cfg)?;
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {l:.6}", e + 1);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut extra = KvConfig::default();
    extra.set("data_dir", absolute(&data_dir)?.display());
    extra.set("features_dir", absolute(&features_dir)?.display());
    model.save(out, &outcome.store, &extra)?;
    println!("wrote {} and {}", out.display(), sidecar(out).display());
    Ok(())
}

struct Loaded {
    model: VqaModel,
    store: crate::numerics::ParamStore<f32>,
    samples: Vec<VqaSample<f32>>,
    row: TableRow,
}

fn load_member(path: &Path, split: Split) -> Result<Loaded> {
    let (model, store, mut kv) = VqaModel::load(path)?;
    let data_dir = take_dir(&mut kv, "data_dir", &config_base(path))?;
    let features_dir = take_dir(&mut kv, "features_dir", &config_base(path))?;
    kv.finish()?;
    let examples = load_split(&data_dir, split)?;
    let features = load_features(&features_dir, &examples)?;
    let samples = build_samples(&model, &examples, &features)?;
    let mut det = match KvConfig::load(&features_dir.join(DETECTOR_CONFIG)) {
        Ok(kv) => kv,
        Err(_) => KvConfig::default(),
    };
    let multiscale: bool = det.take("det_multiscale", false)?;
    let row = TableRow {
        split: split.name().to_string(),
        backbone: if multiscale { "toy-conv (ms-train)".into() } else { "toy-conv".into() },
        fpn_dim: det.take_opt("det_fpn_dim")?,
        attribute: det.take_opt("det_attribute_head")?,
        language: Some(model.language_name().to_string()),
        report: Default::default(),
    };
    Ok(Loaded {
        model,
        store,
        samples,
        row,
    })
}

/// Loads every checkpoint and scores them; a single checkpoint is scored on
/// its own and keeps its setting labels.
fn score(paths: &[PathBuf], split: Split) -> Result<(TableRow, crate::train::EvalReport)> {
    let members = paths
        .iter()
        .map(|p| load_member(p, split))
        .collect::<Result<Vec<_>>>()?;
    if members.len() == 1 {
        let m = &members[0];
        let report = evaluate(&m.model, &m.store, &m.samples)?;
        return Ok((m.row.clone(), report));
    }
    let refs: Vec<Member<'_, f32>> = members
        .iter()
        .map(|m| Member {
            model: &m.model,
            store: &m.store,
            samples: &m.samples,
        })
        .collect();
    let report = evaluate_ensemble(&refs)?;
    let row = TableRow {
        split: split.name().to_string(),
        backbone: format!("Ensemble ({} models)", members.len()),
        fpn_dim: None,
        attribute: None,
        language: None,
        report: Default::default(),
    };
    Ok((row, report))
}

fn emit(row: &TableRow, report: &crate::train::EvalReport, out: Option<&Path>) -> Result<()> {
    let row = TableRow {
        report: report.clone(),
        ..row.clone()
    };
    print!("{}", render_table(&[row]));
    if let Some(p) = out {
        fs::write(p, report_kv(report).render())?;
    }
    Ok(())
}

fn gradcheck(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut kv = match config {
        Some(p) => load_kv(p)?,
        None => KvConfig::default(),
    };
    let d = SuiteConfig::default();
    let cfg = SuiteConfig {
        instances: kv.take("instances", d.instances)?,
        step: kv.take("step", d.step)?,
        tol: kv.take("tol", d.tol)?,
        seed: seed.unwrap_or(d.seed),
    };
    let ops: Vec<String> = kv.take_list("ops", OPS.iter().map(|s| s.to_string()).collect())?;
    kv.finish()?;
    let results = ops.iter().map(|op| run_op(op, &cfg)).collect::<Result<Vec<_>>>()?;
    let report = SuiteReport { results, tol: cfg.tol };
    let mut text = KvConfig::default();
    for r in &report.results {
        println!(
            "{:<20} {:>4} instances  max rel-err {:.3e}  {}",
            r.op,
            r.instances,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAILED" }
        );
        text.set(&format!("{}.max_rel_err", r.op), format!("{:e}", r.max_rel_err));
        text.set(&format!("{}.failures", r.op), r.failures);
    }
    println!(
        "max rel-err {:.3e} (tol {:e}, step {:e}) in {:.1}s: {}",
        report.max_rel_err(),
        cfg.tol,
        cfg.step,
        report.elapsed().as_secs_f64(),
        if report.passed() { "PASS" } else { "FAIL" }
    );
    text.set("max_rel_err", format!("{:e}", report.max_rel_err()));
    text.set("passed", report.passed());
    if let Some(p) = out {
        fs::write(p, text.render())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Backward(format!(
            "gradient check failed: max rel-err {:e} exceeds {:e}",
            report.max_rel_err(),
            cfg.tol
        )))
    }
}
