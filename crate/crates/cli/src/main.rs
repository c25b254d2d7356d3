use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use jepalab::lab::{cmd_gendata, cmd_pretrain, cmd_probe, cmd_report, cmd_sweep, cmd_verify, RunConfig};

#[derive(Parser)]
#[command(name = "lab", about = "Pretrain, probe and compare video-JEPA variants")]
struct Cli {
    /// key=value run config; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write pretraining clips and still images under OUT/data.
    Gendata,
    /// Train the configured variant, resuming from its checkpoint.
    Pretrain,
    /// Score a trained run on the 8-class motion task.
    Probe,
    /// Run the invariant and gradient-check suite.
    Verify,
    /// Pretrain and probe every variant listed under `sweep`.
    Sweep,
    /// Tabulate probed runs under OUT with deltas against the baseline.
    Report,
}

impl Cli {
    fn text(&self) -> Result<String> {
        match &self.config {
            Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())),
            None => Ok(String::new()),
        }
    }

    fn adjust(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
    }

    fn run_config(&self, text: &str) -> Result<RunConfig> {
        let source = self.config.as_ref().map_or("defaults".into(), |p| p.display().to_string());
        let mut cfg = RunConfig::parse(text).with_context(|| format!("in {source}"))?;
        self.adjust(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let text = cli.text()?;
    match cli.command {
        Command::Gendata => {
            let made = cmd_gendata(&cli.run_config(&text)?)?;
            for (file, n) in made.files.iter().zip(&made.clips) {
                println!("wrote {n} clips to {}", file.display());
            }
        }
        Command::Pretrain => {
            let out = cmd_pretrain(&cli.run_config(&text)?)?;
            let total = out.last.map_or("n/a".into(), |b| format!("{:.6}", b.total));
            println!(
                "{}: ran {} steps, now at step {}, last total {total}",
                out.dir.display(),
                out.steps_run,
                out.step
            );
        }
        Command::Probe => {
            let report = cmd_probe(&cli.run_config(&text)?)?;
            println!(
                "{} {} probe on {}: top-1 {:.2}% over {} clips",
                report.checkpoint,
                report.probe,
                report.benchmark,
                100.0 * report.top1,
                report.n_samples
            );
        }
        Command::Verify => {
            let report = cmd_verify();
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            println!("{}/{} checks passed", report.passed(), report.checks.len());
            let failed: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                bail!("failed checks: {}", failed.join(", "));
            }
        }
        Command::Sweep => {
            cli.run_config(&text)?;
            for (cfg, report) in cmd_sweep(&text, |cfg| cli.adjust(cfg))? {
                println!("{:<20} top-1 {:.2}%", cfg.variant().label(), 100.0 * report.top1);
            }
        }
        Command::Report => {
            let cfg = cli.run_config(&text)?;
            let table = cmd_report(&cfg)?;
            print!("{}", table.to_text());
            println!("wrote {} and {}", cfg.out.join("report.txt").display(), cfg.out.join("report.csv").display());
        }
    }
    Ok(())
}
