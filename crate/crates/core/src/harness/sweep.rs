//! Pruning-speed comparison over `mu`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{PhaseConfig, RunConfig, SweepConfig};
use super::report::window_accuracy;
use super::run::{Experiment, Outputs, RunState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::real::Real;

/// Outcome of one `(mu, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub mu: Real,
    pub seed: u64,
    /// Pruning iterations until `F <= target` first held.
    pub iterations: Option<u64>,
    /// Window-averaged test accuracy around the target.
    pub accuracy: Option<Real>,
    /// No evaluation fell inside the window; the nearest one was used.
    pub fallback: bool,
    pub error: Option<String>,
}

/// Per-`mu` aggregate over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub mu: Real,
    pub runs: Vec<SweepRun>,
    pub mean_iterations: Option<Real>,
    pub mean_accuracy: Option<Real>,
    /// Sample standard deviation of accuracy across seeds.
    pub accuracy_std: Option<Real>,
}

fn mean_std(v: &[Real]) -> (Option<Real>, Option<Real>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as Real;
    let m = v.iter().sum::<Real>() / n;
    let s = (v.len() > 1).then(|| (v.iter().map(|x| (x - m) * (x - m)).sum::<Real>() / (n - 1.0)).sqrt());
    (Some(m), s)
}

/// The sub-run configuration: one phase that stops just below the window.
pub fn sub_config(base: &RunConfig, sweep: &SweepConfig, mu: Real, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.controller.mu = mu;
    cfg.trace = true;
    cfg.sweep = None;
    cfg.phases = vec![PhaseConfig {
        name: Some("sweep".into()),
        f_below: Some(sweep.target * (1.0 - 1.25 * sweep.window)),
        ..Default::default()
    }];
    cfg
}

fn finish_run(exp: &Experiment, state: &RunState, sweep: &SweepConfig, mu: Real, seed: u64) -> SweepRun {
    let target = sweep.target * state.f_initial;
    let iterations = state.trace.iter().find(|t| t.f <= target).map(|t| t.iteration).or_else(|| {
        // Reached on the last update: the trace stores values before each update.
        (exp.f(&state.sites) <= target).then_some(state.iteration)
    });
    let acc = window_accuracy(&state.metrics, target, sweep.window);
    SweepRun {
        mu,
        seed,
        iterations,
        accuracy: acc.map(|a| a.0),
        fallback: acc.is_some_and(|a| a.1),
        error: None,
    }
}

/// Runs every `(mu, seed)` pair. Weight pretraining is shared between runs
/// with the same seed, or between all runs if `pretrain_seed` is set.
/// Failed runs are reported in their row, not raised.
pub fn sweep(base: &RunConfig, sweep: &SweepConfig, data: Option<Arc<Dataset>>, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let data = match data {
        Some(d) => d,
        None => Arc::new(Dataset::load(&base.data, &base.base_dir)?),
    };
    let mut runs: Vec<Vec<SweepRun>> = vec![Vec::new(); sweep.mu.len()];
    let pretrain = |seed: u64| -> Result<RunState> {
        let first = Experiment::with_data(sub_config(base, sweep, sweep.mu[0], seed), data.clone())?;
        let mut state = first.init_state();
        first.pretrain(&mut state)?;
        Ok(state)
    };
    let shared = sweep.pretrain_seed.map(pretrain);
    for &seed in &sweep.seeds {
        let own;
        let pretrained = match &shared {
            Some(p) => p,
            None => {
                own = pretrain(seed);
                &own
            }
        };
        for (mi, &mu) in sweep.mu.iter().enumerate() {
            let attempt = || -> Result<SweepRun> {
                let pretrained = pretrained.as_ref().map_err(|e| Error::Usage(format!("pretraining failed: {e}")))?;
                let exp = Experiment::with_data(sub_config(base, sweep, mu, seed), data.clone())?;
                let mut state = pretrained.clone();
                match out {
                    Some(dir) => {
                        let d = dir.join(format!("mu{mi}_seed{seed}"));
                        let mut o = Outputs::create(&d, &exp.cfg, &state)?;
                        exp.run(&mut state, Some(&mut o), None)?;
                    }
                    None => exp.run(&mut state, None, None)?,
                }
                Ok(finish_run(&exp, &state, sweep, mu, seed))
            };
            runs[mi].push(attempt().unwrap_or_else(|e| SweepRun {
                mu,
                seed,
                iterations: None,
                accuracy: None,
                fallback: false,
                error: Some(e.to_string()),
            }));
        }
    }
    let rows: Vec<SweepRow> = sweep
        .mu
        .iter()
        .zip(runs)
        .map(|(&mu, runs)| {
            let its: Vec<Real> = runs.iter().filter_map(|r| r.iterations.map(|i| i as Real)).collect();
            let accs: Vec<Real> = runs.iter().filter_map(|r| r.accuracy).collect();
            let (mean_accuracy, accuracy_std) = mean_std(&accs);
            SweepRow {
                mu,
                mean_iterations: mean_std(&its).0,
                mean_accuracy,
                accuracy_std,
                runs,
            }
        })
        .collect();
    if let Some(dir) = out {
        write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows.iter().flat_map(|r| &r.runs) {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::from)
}

/// Plain-text table of the aggregated rows.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let opt = |v: Option<Real>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    let mut out = String::from("        mu   iterations   accuracy   acc std   failures\n");
    for r in rows {
        let failures = r.runs.iter().filter(|x| x.error.is_some()).count();
        out.push_str(&format!(
            "{:>10.3e} {:>12} {:>10} {:>9} {:>10}\n",
            r.mu,
            opt(r.mean_iterations, 0),
            opt(r.mean_accuracy, 4),
            opt(r.accuracy_std, 4),
            failures
        ));
        for e in r.runs.iter().filter_map(|x| x.error.as_ref()) {
            out.push_str(&format!("    error: {e}\n"));
        }
    }
    out
}
