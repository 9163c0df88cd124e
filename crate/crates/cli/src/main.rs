use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use taper_prune::container::Container;
use taper_prune::harness::report::{curve, format_report};
use taper_prune::harness::run::read_metrics;
use taper_prune::harness::sweep::{format_sweep, sweep};
use taper_prune::harness::{run_config, Experiment, RunConfig};
use taper_prune::resource::ResourceKind;

#[derive(Parser)]
#[command(name = "taper-prune", version, about = "Channel pruning under a tapering MAC budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Prune and fine-tune according to the configured phases.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from a snapshot written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare pruning speeds over the `[sweep]` mu values.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Print the resource-accuracy curve of a run.
    Report {
        /// metrics.csv, or a run directory containing it.
        metrics: PathBuf,
    },
    /// Write the dense pruned network of a snapshot.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: PathBuf,
    },
    /// Print per-layer MACs and the resource polynomial.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Evaluate at the pruning state of this snapshot.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(std::env::current_dir()?.join(o));
    }
    Ok(cfg)
}

fn metrics_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("metrics.csv")
    } else {
        p.to_path_buf()
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { common, resume } => {
            let cfg = load(&common)?;
            if cfg.out_dir.is_none() {
                bail!("no output directory: set `out_dir` in the config or pass --out");
            }
            let (exp, state) = run_config(cfg, resume.as_deref())?;
            let last = state.metrics.last().expect("final row");
            println!(
                "finished at iteration {}: F = {:.6} GMAC ({:.4} of initial), accuracy {:.4}",
                state.iteration,
                last.f / 1e9,
                last.f / state.f_initial,
                last.eval_accuracy
            );
            println!("outputs in {}", exp.cfg.out_dir().unwrap().display());
        }
        Command::Sweep { common } => {
            let cfg = load(&common)?;
            let Some(sw) = cfg.sweep.clone() else {
                bail!("the config has no [sweep] table");
            };
            let rows = sweep(&cfg, &sw, None, cfg.out_dir().as_deref())?;
            print!("{}", format_sweep(&rows));
        }
        Command::Report { metrics } => {
            let rows = read_metrics(&metrics_path(&metrics))?;
            let pts = curve(&rows)?;
            let f_initial = rows.first().map(|r| r.f).unwrap_or(1.0);
            print!("{}", format_report(&pts, f_initial));
        }
        Command::Extract { common, resume } => {
            let cfg = load(&common)?;
            let Some(out) = cfg.out_dir() else {
                bail!("no output directory: set `out_dir` in the config or pass --out");
            };
            let exp = Experiment::new(cfg)?;
            let state = exp.restore(&Container::read(&resume)?)?;
            let pruned = exp.write_extracted(&state, &out)?;
            let (g, _) = pruned.network()?;
            for (name, kept) in pruned.site_names.iter().zip(pruned.kept()) {
                println!("site {name}: {kept} channels kept");
            }
            println!("extracted network: {:.6} GMAC, written to {}", g.mac_count() as f64 / 1e9, out.display());
        }
        Command::Cost { common, resume } => {
            let cfg = load(&common)?;
            let exp = Experiment::new(cfg)?;
            println!("layer                     MACs (all open)");
            for l in exp.graph.layer_macs() {
                println!("{:<20} {:>18}", l.layer, l.macs);
            }
            println!("total: {} MACs ({:.6} GMAC)", exp.graph.mac_count(), exp.graph.mac_count() as f64 / 1e9);
            let poly = &exp.poly;
            println!(
                "polynomial ({}): {} quadratic, {} linear terms, constant {}",
                match poly.kind {
                    ResourceKind::Macs => "MACs",
                    ResourceKind::Weights => "weights",
                },
                poly.quadratic().len(),
                poly.linear().len(),
                poly.constant()
            );
            for &(a, b, c) in poly.quadratic() {
                println!("  {c:>14} * w[{}] * w[{}]", poly.group_label(a), poly.group_label(b));
            }
            for &(a, c) in poly.linear() {
                println!("  {c:>14} * w[{}]", poly.group_label(a));
            }
            if let Some(snap) = resume {
                let state = exp.restore(&Container::read(&snap)?)?;
                println!(
                    "at snapshot iteration {}: F = {:.1}, F at masks = {:.1}",
                    state.iteration,
                    exp.f(&state.sites),
                    exp.f_mask(&state.sites)
                );
            }
        }
    }
    Ok(())
}
