//! The prune / fine-tune loop.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::container::Container;
use crate::controller::{control_step, init_schedule, site_probs, ControlInputs, ControllerState, ScheduleKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{extract, Gating, InstrumentedGraph};
use crate::model::{evaluate, train_step};
use crate::real::Real;
use crate::resource::ResourcePolynomial;
use crate::rho::{PruningSiteState, RhoSolverConfig};
use crate::rng::StreamKey;
use crate::solver::WeightSolver;
use crate::tensor::Tensor;

pub const METRICS_VERSION: &str = "#taper-prune metrics v1";
pub const TRACE_VERSION: &str = "#taper-prune trace v1";

/// Minibatch streams: pruning iterations and weight-only pretraining.
const STREAM_PRUNE: u64 = 0;
const STREAM_PRETRAIN: u64 = 1;

/// One evaluation, written to `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub phase: usize,
    /// Expected resource cost `F(rho)`.
    pub f: Real,
    pub f_sched: Real,
    pub lambda_f: Real,
    /// Cost of the network kept by the `rho > 0` masks.
    pub f_mask: Real,
    /// Mean minibatch loss since the previous row.
    pub train_loss: Option<Real>,
    pub eval_loss: Real,
    pub eval_accuracy: Real,
}

/// One pruning iteration, written to `trace.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    /// `F(rho^i)` and `F_sched(i)` before the update.
    pub f: Real,
    pub f_sched: Real,
    /// Multiplier used by this iteration's update.
    pub lambda_f: Real,
    pub k: Real,
    pub loss: Real,
    pub fractional_rate: Real,
}

/// Everything that changes during a run; a snapshot stores exactly this.
#[derive(Clone, Debug)]
pub struct RunState {
    /// Pruning iterations completed.
    pub iteration: u64,
    /// Pretraining iterations completed.
    pub pretrained: u64,
    pub phase: usize,
    pub phase_start: u64,
    pub phase_entered: bool,
    pub finished: bool,
    pub params: Vec<Tensor>,
    pub solver: WeightSolver,
    pub sites: Vec<PruningSiteState>,
    pub controller: ControllerState,
    /// `F(rho^0)`.
    pub f_initial: Real,
    /// Current schedule asymptote.
    pub f0: Real,
    pub loss_sum: Real,
    pub loss_count: u64,
    pub metrics: Vec<MetricsRow>,
    pub trace: Vec<TraceRow>,
}

/// Immutable context of a run: configuration, graph and data.
pub struct Experiment {
    pub cfg: RunConfig,
    pub graph: InstrumentedGraph,
    pub poly: ResourcePolynomial,
    pub data: Arc<Dataset>,
    key: StreamKey,
}

/// Files written while a run progresses.
pub struct Outputs {
    dir: PathBuf,
    metrics: File,
    trace: Option<File>,
    timing: File,
    started: Instant,
}

fn csv_line<T: Serialize>(row: &T) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.serialize(row)?;
    let bytes = w.into_inner().map_err(|e| Error::Metrics(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Metrics(e.to_string()))
}

fn csv_header<T: Serialize>(row: &T) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    w.serialize(row)?;
    let bytes = w.into_inner().map_err(|e| Error::Metrics(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Metrics(e.to_string()))?;
    Ok(text.lines().next().unwrap_or_default().to_string() + "\n")
}

/// CSV text with version line and header.
pub fn rows_to_csv<T: Serialize>(version: &str, rows: &[T], sample: &T) -> Result<String> {
    let mut out = format!("{version}\n{}", csv_header(sample)?);
    for r in rows {
        out.push_str(&csv_line(r)?);
    }
    Ok(out)
}

/// Parses CSV written by [`rows_to_csv`]; the version line must match.
pub fn csv_to_rows<T: for<'de> Deserialize<'de>>(version: &str, text: &str) -> Result<Vec<T>> {
    match text.lines().next() {
        Some(first) if first == version => {}
        Some(first) => return Err(Error::Metrics(format!("expected `{version}`, found `{first}`"))),
        None => return Err(Error::Metrics("empty file".into())),
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    csv_to_rows(METRICS_VERSION, &std::fs::read_to_string(path)?)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    csv_to_rows(TRACE_VERSION, &std::fs::read_to_string(path)?)
}

fn blank_metrics() -> MetricsRow {
    MetricsRow {
        iteration: 0,
        phase: 0,
        f: 0.0,
        f_sched: 0.0,
        lambda_f: 0.0,
        f_mask: 0.0,
        train_loss: None,
        eval_loss: 0.0,
        eval_accuracy: 0.0,
    }
}

fn blank_trace() -> TraceRow {
    TraceRow {
        iteration: 0,
        f: 0.0,
        f_sched: 0.0,
        lambda_f: 0.0,
        k: 0.0,
        loss: 0.0,
        fractional_rate: 0.0,
    }
}

impl Outputs {
    /// Creates `dir` and writes the rows already present in `state`.
    pub fn create(dir: &Path, cfg: &RunConfig, state: &RunState) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        std::fs::write(
            dir.join("metrics.csv"),
            rows_to_csv(METRICS_VERSION, &state.metrics, &blank_metrics())?,
        )?;
        let trace = if cfg.trace {
            std::fs::write(dir.join("trace.csv"), rows_to_csv(TRACE_VERSION, &state.trace, &blank_trace())?)?;
            Some(OpenOptions::new().append(true).open(dir.join("trace.csv"))?)
        } else {
            None
        };
        std::fs::write(dir.join("timing.csv"), "iteration,wall_seconds\n")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: OpenOptions::new().append(true).open(dir.join("metrics.csv"))?,
            trace,
            timing: OpenOptions::new().append(true).open(dir.join("timing.csv"))?,
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn metrics_row(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.write_all(csv_line(row)?.as_bytes())?;
        self.metrics.flush()?;
        writeln!(self.timing, "{},{:.3}", row.iteration, self.started.elapsed().as_secs_f64())?;
        Ok(())
    }

    fn trace_row(&mut self, row: &TraceRow) -> Result<()> {
        if let Some(t) = &mut self.trace {
            t.write_all(csv_line(row)?.as_bytes())?;
        }
        Ok(())
    }
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let data = Arc::new(Dataset::load(&cfg.data, &cfg.base_dir)?);
        Self::with_data(cfg, data)
    }

    /// Builds the context around an already loaded dataset.
    pub fn with_data(cfg: RunConfig, data: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        let graph = InstrumentedGraph::build(&cfg.graph_spec()?)?;
        if graph.input_shape() != data.input_shape() {
            return Err(Error::Config(format!(
                "graph input {:?} does not match data samples {:?}",
                graph.input_shape(),
                data.input_shape()
            )));
        }
        if graph.classes() != data.classes {
            return Err(Error::Config(format!(
                "graph has {} outputs, data has {} classes",
                graph.classes(),
                data.classes
            )));
        }
        let poly = graph.polynomial(cfg.resource);
        let key = StreamKey::new(cfg.seed);
        Ok(Self {
            cfg,
            graph,
            poly,
            data,
            key,
        })
    }

    /// Fresh state: initialized weights, all gates open, no iterations run.
    pub fn init_state(&self) -> RunState {
        let params = self.graph.init_params(self.cfg.seed);
        let solver = WeightSolver::new(self.cfg.solver, &params);
        let sites = self.graph.open_sites(self.cfg.rho.rho_max);
        let controller = init_schedule(&self.poly, &sites);
        let f_initial = controller.f_sched;
        RunState {
            iteration: 0,
            pretrained: 0,
            phase: 0,
            phase_start: 0,
            phase_entered: false,
            finished: false,
            params,
            solver,
            sites,
            controller,
            f_initial,
            f0: self.cfg.controller.f0,
            loss_sum: 0.0,
            loss_count: 0,
            metrics: Vec::new(),
            trace: Vec::new(),
        }
    }

    /// Weight-only training with open gates, up to `cfg.pretrain` iterations.
    pub fn pretrain(&self, state: &mut RunState) -> Result<()> {
        while state.pretrained < self.cfg.pretrain {
            let i = state.pretrained;
            let (x, y) = self.data.minibatch(&self.key, STREAM_PRETRAIN, i, self.cfg.batch_size);
            let mut tape = crate::tape::Tape::new();
            let fwd = self.graph.forward(&mut tape, &state.params, x, Gating::Open)?;
            let loss = tape.softmax_cross_entropy(fwd.output, &y)?;
            let value = tape.value(loss).item().expect("scalar");
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "pretraining loss".into(),
                    detail: format!("{value} at pretraining iteration {i}"),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = fwd.params.iter().map(|v| tape.grad(*v).expect("param grad").clone()).collect();
            state.solver.step(&mut state.params, &grads)?;
            state.pretrained += 1;
        }
        Ok(())
    }

    pub fn f(&self, sites: &[PruningSiteState]) -> Real {
        self.poly.eval(&site_probs(sites))
    }

    pub fn f_mask(&self, sites: &[PruningSiteState]) -> Real {
        let masks: Vec<Vec<bool>> = sites.iter().map(|s| s.keep_mask()).collect();
        self.poly.eval_mask(&masks)
    }

    /// Evaluates on the test set with the deterministic `rho > 0` masks.
    pub fn metrics_row(&self, state: &RunState) -> Result<MetricsRow> {
        let ev = evaluate(
            &self.graph,
            &state.params,
            Gating::Eval { sites: &state.sites },
            &self.data.test_x,
            &self.data.test_y,
            self.cfg.eval_batch,
        )?;
        Ok(MetricsRow {
            iteration: state.iteration,
            phase: state.phase,
            f: self.f(&state.sites),
            f_sched: state.controller.f_sched,
            lambda_f: state.controller.lambda_f,
            f_mask: self.f_mask(&state.sites),
            train_loss: (state.loss_count > 0).then(|| state.loss_sum / state.loss_count as Real),
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
        })
    }

    fn record(&self, state: &mut RunState, out: &mut Option<&mut Outputs>) -> Result<()> {
        let row = self.metrics_row(state)?;
        state.loss_sum = 0.0;
        state.loss_count = 0;
        if let Some(o) = out {
            o.metrics_row(&row)?;
        }
        state.metrics.push(row);
        Ok(())
    }

    fn enter_phase(&self, state: &mut RunState) {
        let p = &self.cfg.phases[state.phase];
        state.phase_start = state.iteration;
        state.phase_entered = true;
        if let Some(lr) = p.lr {
            state.solver.set_lr(lr);
        }
        if p.freeze {
            state.f0 = self.f(&state.sites);
        } else if let Some(frac) = p.f0_fraction {
            state.f0 = frac * state.f_initial;
        }
    }

    fn phase_done(&self, state: &RunState) -> bool {
        let p = &self.cfg.phases[state.phase];
        let by_count = p.iterations.is_some_and(|n| state.iteration - state.phase_start >= n);
        let by_f = p.f_below.is_some_and(|frac| self.f(&state.sites) <= frac * state.f_initial);
        by_count || by_f
    }

    /// Advances through finished phases; returns false when the run is over.
    fn settle_phase(&self, state: &mut RunState) -> bool {
        loop {
            if state.finished {
                return false;
            }
            if !state.phase_entered {
                self.enter_phase(state);
            }
            if state.iteration >= self.cfg.max_iterations {
                state.finished = true;
                return false;
            }
            if !self.phase_done(state) {
                return true;
            }
            if state.phase + 1 == self.cfg.phases.len() {
                state.finished = true;
                return false;
            }
            state.phase += 1;
            state.phase_entered = false;
        }
    }

    /// One pruning iteration: weights, then controller and gates.
    pub fn step(&self, state: &mut RunState) -> Result<TraceRow> {
        let i = state.iteration;
        let phase = &self.cfg.phases[state.phase];
        let (x, y) = self.data.minibatch(&self.key, STREAM_PRUNE, i, self.cfg.batch_size);
        let ts = train_step(
            &self.graph,
            &state.params,
            &state.sites,
            &self.cfg.gate,
            &self.key,
            i,
            x,
            &y,
        )?;
        state.solver.step(&mut state.params, &ts.grads)?;
        let rho_cfg = if phase.fixed_gates {
            RhoSolverConfig {
                alpha: 0.0,
                ..self.cfg.rho
            }
        } else {
            self.cfg.rho
        };
        let kind = phase.schedule.unwrap_or(self.cfg.schedule);
        let rep = control_step(
            &mut state.controller,
            &mut state.sites,
            &self.poly,
            &rho_cfg,
            &self.cfg.controller,
            ControlInputs {
                l0p: &ts.l0p,
                kind: if phase.fixed_gates { ScheduleKind::Exponential } else { kind },
                f0: state.f0,
            },
        )?;
        state.iteration += 1;
        state.loss_sum += ts.loss;
        state.loss_count += 1;
        Ok(TraceRow {
            iteration: i,
            f: rep.f,
            f_sched: rep.f_sched,
            lambda_f: rep.lambda_f,
            k: rep.k,
            loss: ts.loss,
            fractional_rate: ts.fractional_rate,
        })
    }

    /// Runs until all phases finish, or until `stop_at` pruning iterations.
    ///
    /// Rows are kept in `state` and, if given, appended to the output files.
    /// Snapshots are written every `snapshot_interval` iterations. A
    /// non-finite loss writes `abort.bin` before returning the error.
    pub fn run(&self, state: &mut RunState, mut out: Option<&mut Outputs>, stop_at: Option<u64>) -> Result<()> {
        self.pretrain(state)?;
        if state.metrics.is_empty() {
            self.record(state, &mut out)?;
        }
        while self.settle_phase(state) {
            if stop_at.is_some_and(|s| state.iteration >= s) {
                return Ok(());
            }
            let row = match self.step(state) {
                Ok(r) => r,
                Err(e) => {
                    // A non-finite loss is detected before any state is modified.
                    if let Some(o) = &out {
                        self.snapshot(state).write(&o.dir.join("abort.bin"))?;
                    }
                    return Err(e);
                }
            };
            if let Some(o) = &mut out {
                o.trace_row(&row)?;
            }
            if self.cfg.trace {
                state.trace.push(row);
            }
            if state.iteration % self.cfg.eval_interval == 0 {
                self.record(state, &mut out)?;
            }
            let si = self.cfg.snapshot_interval;
            if si > 0 && state.iteration % si == 0 {
                if let Some(o) = &out {
                    self.snapshot(state).write(&o.dir.join(format!("snap_{}.bin", state.iteration)))?;
                }
            }
        }
        if state.metrics.last().map(|r| r.iteration) != Some(state.iteration) {
            self.record(state, &mut out)?;
        }
        if let Some(o) = &out {
            self.snapshot(state).write(&o.dir.join("final.bin"))?;
        }
        Ok(())
    }

    /// Serializes the state into the tensor container.
    pub fn snapshot(&self, s: &RunState) -> Container {
        let mut c = Container::new();
        c.insert_text("kind", "taper-prune snapshot");
        c.insert_text("config", &self.cfg.to_toml().unwrap_or_default());
        c.insert_u64s(
            "state/counters",
            &[
                s.iteration,
                s.pretrained,
                s.phase as u64,
                s.phase_start,
                s.phase_entered as u64,
                s.finished as u64,
                s.loss_count,
                s.controller.iteration,
                s.solver.steps,
            ],
        );
        c.insert_reals(
            "state/scalars",
            vec![6],
            &[
                s.f_initial,
                s.f0,
                s.loss_sum,
                s.controller.lambda_f,
                s.controller.f_sched,
                s.solver.kind.lr(),
            ],
        );
        for (info, p) in self.graph.params().iter().zip(&s.params) {
            c.insert_tensor(format!("param/{}", info.name), p);
        }
        for (i, m) in s.solver.first.iter().enumerate() {
            c.insert_tensor(format!("solver/first/{i}"), m);
        }
        for (i, m) in s.solver.second.iter().enumerate() {
            c.insert_tensor(format!("solver/second/{i}"), m);
        }
        for site in &s.sites {
            c.insert_reals(format!("site/{}/rho", site.name), vec![site.channels()], &site.rho);
            c.insert_reals(format!("site/{}/d", site.name), vec![site.channels()], &site.d);
        }
        let metrics = rows_to_csv(METRICS_VERSION, &s.metrics, &blank_metrics()).expect("rows serialize");
        c.insert_text("metrics", &metrics);
        let trace = rows_to_csv(TRACE_VERSION, &s.trace, &blank_trace()).expect("rows serialize");
        c.insert_text("trace", &trace);
        c
    }

    /// Rebuilds a state from [`Experiment::snapshot`] output.
    pub fn restore(&self, c: &Container) -> Result<RunState> {
        if c.text("kind")? != "taper-prune snapshot" {
            return Err(Error::Format("not a run snapshot".into()));
        }
        let n = c.u64s("state/counters")?;
        let r = c.reals("state/scalars")?;
        if n.len() != 9 || r.len() != 6 {
            return Err(Error::Format("snapshot state has the wrong layout".into()));
        }
        let params = self
            .graph
            .params()
            .iter()
            .map(|info| c.tensor(&format!("param/{}", info.name)))
            .collect::<Result<Vec<_>>>()?;
        self.graph.check_params(&params)?;
        let mut solver = WeightSolver::new(self.cfg.solver.with_lr(r[5]), &params);
        for i in 0..solver.first.len() {
            solver.first[i] = c.tensor(&format!("solver/first/{i}"))?;
        }
        for i in 0..solver.second.len() {
            solver.second[i] = c.tensor(&format!("solver/second/{i}"))?;
        }
        solver.steps = n[8];
        let mut sites = self.graph.open_sites(self.cfg.rho.rho_max);
        for site in &mut sites {
            site.rho = c.reals(&format!("site/{}/rho", site.name))?;
            site.d = c.reals(&format!("site/{}/d", site.name))?;
            if site.rho.len() != site.d.len() {
                return Err(Error::Format(format!("site `{}` has inconsistent state", site.name)));
            }
        }
        for (site, info) in sites.iter().zip(self.graph.sites()) {
            if site.channels() != info.channels {
                return Err(Error::Format(format!(
                    "site `{}` has {} channels in the snapshot, graph has {}",
                    info.name,
                    site.channels(),
                    info.channels
                )));
            }
        }
        if n[2] as usize >= self.cfg.phases.len() {
            return Err(Error::Format(format!("snapshot phase {} does not exist in the config", n[2])));
        }
        Ok(RunState {
            iteration: n[0],
            pretrained: n[1],
            phase: n[2] as usize,
            phase_start: n[3],
            phase_entered: n[4] != 0,
            finished: n[5] != 0,
            loss_count: n[6],
            controller: ControllerState {
                lambda_f: r[3],
                f_sched: r[4],
                iteration: n[7],
            },
            params,
            solver,
            sites,
            f_initial: r[0],
            f0: r[1],
            loss_sum: r[2],
            metrics: csv_to_rows(METRICS_VERSION, c.text("metrics")?)?,
            trace: csv_to_rows(TRACE_VERSION, c.text("trace")?)?,
        })
    }

    /// Writes the extracted network (`graph.toml`, `weights.bin`) to `dir`.
    pub fn write_extracted(&self, state: &RunState, dir: &Path) -> Result<crate::graph::PrunedConfiguration> {
        let pruned = extract(&self.graph, &state.params, &state.sites)?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("graph.toml"), pruned.spec.to_toml()?)?;
        let mut c = Container::new();
        c.insert_text("kind", "taper-prune weights");
        for (name, t) in &pruned.params {
            c.insert_tensor(name.as_str(), t);
        }
        for (name, mask) in pruned.site_names.iter().zip(&pruned.masks) {
            let m: Vec<u64> = mask.iter().map(|&k| k as u64).collect();
            c.insert_u64s(format!("mask/{name}"), &m);
        }
        c.write(&dir.join("weights.bin"))?;
        Ok(pruned)
    }
}

/// Runs a configuration from scratch (or from `resume`) and writes outputs.
pub fn run_config(cfg: RunConfig, resume: Option<&Path>) -> Result<(Experiment, RunState)> {
    let exp = Experiment::new(cfg)?;
    let mut state = match resume {
        Some(p) => exp.restore(&Container::read(p)?)?,
        None => exp.init_state(),
    };
    match exp.cfg.out_dir() {
        Some(dir) => {
            let mut out = Outputs::create(&dir, &exp.cfg, &state)?;
            exp.run(&mut state, Some(&mut out), None)?;
            exp.write_extracted(&state, &dir.join("pruned"))?;
        }
        None => exp.run(&mut state, None, None)?,
    }
    Ok((exp, state))
}
