use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::report::SweepTable;
use super::verify::{run_checks, VerifyReport};
use super::RunConfig;
use crate::model::{write_atomic, Encoder};
use crate::objective::{LossBundle, Variant};
use crate::probe::{synthetic_benchmark, EvalReport, ProbeConfig};
use crate::synth::{gen_image_dataset, gen_motion_dataset, mix_seed, read_dataset, write_dataset, Dataset};
use crate::train::{run_pretrain, RunPaths, TrainData, TrainState};
use crate::{Error, Result};

/// Canonical config copy kept in every run directory.
pub const CONFIG_FILE: &str = "config.txt";
/// Seed stream for generated pretraining clips, apart from the probe splits.
pub const PRETRAIN_SPLIT: u64 = 3;
const IMAGE_SPLIT: u64 = 4;

/// Directory name for one (variant, seed) run, e.g. `kin-l1-s0`.
pub fn run_name(variant: Variant, seed: u64) -> String {
    let mut slug = String::new();
    for ch in variant.label().chars() {
        if ch.is_ascii_alphanumeric() {
            slug.push(ch.to_ascii_lowercase());
        } else if !slug.ends_with('-') {
            slug.push('-');
        }
    }
    format!("{}-s{seed}", slug.trim_end_matches('-'))
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(run_name(cfg.variant(), cfg.seed))
}

/// Files written by [`cmd_gendata`].
#[derive(Debug, Clone)]
pub struct GendataOutcome {
    pub files: Vec<PathBuf>,
    pub clips: Vec<usize>,
}

fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &data.clips)?;
    write_atomic(path, &bytes)
}

/// Writes the pretraining motion clips and still images under `out/data`.
pub fn cmd_gendata(cfg: &RunConfig) -> Result<GendataOutcome> {
    let dir = cfg.out.join("data");
    fs::create_dir_all(&dir)?;
    let mut sets = vec![("motion.synv", gen_motion_dataset(cfg.pretrain_n_per_class, mix_seed(cfg.seed, PRETRAIN_SPLIT))?)];
    if cfg.gen_images > 0 {
        sets.push(("images.synv", gen_image_dataset(cfg.gen_images, mix_seed(cfg.seed, IMAGE_SPLIT))?));
    }
    let mut out = GendataOutcome {
        files: Vec::new(),
        clips: Vec::new(),
    };
    for (name, data) in sets {
        let path = dir.join(name);
        save_dataset(&path, &data)?;
        out.files.push(path);
        out.clips.push(data.len());
    }
    Ok(out)
}

fn train_data(cfg: &RunConfig) -> Result<TrainData> {
    if cfg.datasets.is_empty() {
        return Ok(TrainData::single(gen_motion_dataset(
            cfg.pretrain_n_per_class,
            mix_seed(cfg.seed, PRETRAIN_SPLIT),
        )?));
    }
    let datasets = cfg
        .datasets
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let file = fs::File::open(p).map_err(|e| Error::Config(format!("cannot open dataset {}: {e}", p.display())))?;
            read_dataset(&mut BufReader::new(file), &name)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainData {
        datasets,
        weights: cfg.mixture_weights.clone(),
    })
}

/// Keeps the first `keep` lines of a metrics log, dropping any written
/// after the last checkpoint.
fn trim_log(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?).lines().take(keep).collect::<std::io::Result<_>>()?;
    if lines.len() < keep {
        return Err(Error::Format(format!(
            "{} has {} records but the checkpoint is at step {keep}",
            path.display(),
            lines.len()
        )));
    }
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(path, text.as_bytes())
}

/// Writes the config copy, or checks it against an existing one.
fn claim_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir)?;
    let path = dir.join(CONFIG_FILE);
    let text = cfg.serialize();
    if path.exists() {
        if fs::read_to_string(&path)? != text {
            return Err(Error::Config(format!("{} holds a different config", dir.display())));
        }
    } else {
        write_atomic(&path, text.as_bytes())?;
    }
    Ok(dir)
}

/// What [`cmd_pretrain`] did.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub dir: PathBuf,
    pub steps_run: usize,
    pub step: usize,
    pub last: Option<LossBundle>,
}

/// Trains the configured variant, resuming from the run's checkpoint when
/// one exists.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let dir = claim_run_dir(cfg)?;
    let paths = RunPaths::new(&dir);
    let wd = cfg.train.weight_decay;
    let state = if paths.checkpoint().exists() {
        TrainState::load(&paths.checkpoint(), cfg.model, cfg.objective.clone(), wd)?
    } else {
        TrainState::new(cfg.model, cfg.objective.clone(), wd, cfg.seed)?
    };
    trim_log(&paths.metrics(), state.step)?;
    let summary = run_pretrain(state, &cfg.train, &train_data(cfg)?, &paths, None)?;
    Ok(PretrainOutcome {
        dir,
        steps_run: summary.steps_run,
        step: summary.state.step,
        last: summary.last,
    })
}

/// The trained student of a run and its checkpoint id, `name@step`.
pub fn load_run_encoder(cfg: &RunConfig) -> Result<(Encoder, String)> {
    let dir = run_dir(cfg);
    let ckpt = RunPaths::new(&dir).checkpoint();
    if !ckpt.exists() {
        return Err(Error::Config(format!("no checkpoint in {}; run pretrain first", dir.display())));
    }
    let state = TrainState::load(&ckpt, cfg.model, cfg.objective.clone(), cfg.train.weight_decay)?;
    let id = format!("{}@{}", run_name(cfg.variant(), cfg.seed), state.step);
    Ok((state.student, id))
}

/// Scores the run's encoder on the 8-class motion task and writes
/// `probe-<kind>.json` into the run directory.
pub fn cmd_probe(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (encoder, id) = load_run_encoder(cfg)?;
    let probe = ProbeConfig {
        seed: cfg.seed,
        ..cfg.probe.clone()
    };
    let report = synthetic_benchmark(&encoder, cfg.probe_n_per_class, cfg.seed, cfg.probe_kind, &probe, &id)?;
    let path = run_dir(cfg).join(format!("probe-{}.json", cfg.probe_kind));
    write_atomic(&path, format!("{}\n", serde_json::to_string(&report)?).as_bytes())?;
    Ok(report)
}

/// Pretrains and probes every variant of `cfg.sweep` under the config
/// text, re-parsed per variant so its presets apply before the overrides.
/// `adjust` applies command-line settings to each parsed config.
pub fn cmd_sweep(text: &str, adjust: impl Fn(&mut RunConfig) + Sync) -> Result<Vec<(RunConfig, EvalReport)>> {
    let mut base = RunConfig::parse(text)?;
    adjust(&mut base);
    let configs = base
        .sweep
        .iter()
        .map(|&v| {
            let mut cfg = RunConfig::parse_with_variant(text, Some(v))?;
            adjust(&mut cfg);
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(configs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<EvalReport>>>> = Mutex::new(configs.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let outcome = cmd_pretrain(cfg).and_then(|_| cmd_probe(cfg));
                results.lock().expect("sweep results lock")[i] = Some(outcome);
            });
        }
    });
    let results = results.into_inner().expect("sweep results lock");
    configs
        .into_iter()
        .zip(results)
        .map(|(cfg, r)| {
            let report = r.ok_or_else(|| Error::Config(format!("{} did not run", cfg.variant().label())))??;
            Ok((cfg, report))
        })
        .collect()
}

fn collect_reports(out: &Path) -> Result<Vec<(Variant, u64, EvalReport)>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.sort();
    let mut results = Vec::new();
    for dir in dirs.iter().filter(|d| d.join(CONFIG_FILE).is_file()) {
        let cfg = RunConfig::parse(&fs::read_to_string(dir.join(CONFIG_FILE))?)
            .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.sort();
        for f in files {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with("probe-") && name.ends_with(".json") {
                let report: EvalReport = serde_json::from_str(&fs::read_to_string(&f)?)?;
                results.push((cfg.variant(), cfg.seed, report));
            }
        }
    }
    Ok(results)
}

/// Builds the sweep table from every probed run under `cfg.out`, writes
/// `report.txt` and `report.csv`, and re-reads the CSV to audit the deltas.
pub fn cmd_report(cfg: &RunConfig) -> Result<SweepTable> {
    let results = collect_reports(&cfg.out)?;
    if results.is_empty() {
        return Err(Error::Config(format!("no probed runs under {}", cfg.out.display())));
    }
    let table = SweepTable::from_reports(cfg.sweep_baseline, &results)?;
    let csv_path = cfg.out.join("report.csv");
    write_atomic(&cfg.out.join("report.txt"), table.to_text().as_bytes())?;
    write_atomic(&csv_path, table.to_csv().as_bytes())?;
    let reread = SweepTable::from_csv(&fs::read_to_string(&csv_path)?, cfg.sweep_baseline)?;
    let mut problems = reread.audit();
    if reread != table {
        problems.push("report.csv does not read back to the table".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(format!("report audit failed: {}", problems.join("; "))));
    }
    Ok(table)
}

/// Runs the invariant and gradient-check suite.
pub fn cmd_verify() -> VerifyReport {
    run_checks()
}
