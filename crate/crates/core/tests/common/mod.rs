#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taper_prune::gate::{GateConfig, GateSample};
use taper_prune::graph::{GraphSpec, InstrumentedGraph};
use taper_prune::tape::{Tape, Var};
use taper_prune::{Real, Tensor};

pub const FD_STEP: Real = 1e-5;
pub const FD_REL_TOL: Real = 1e-4;
/// Below this magnitude a gradient entry is compared absolutely.
const FD_FLOOR: Real = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
/// every element of every input. `build` maps leaf variables to a scalar loss.
pub fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> Real {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item().unwrap()
    };
    let mut worst: Real = 0.0;
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// `sum(proj * v)`: a scalar loss with a non-trivial upstream gradient.
pub fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let mut r = rng(seed ^ 0x9e37_79b9);
    let proj = tape.leaf(rand_tensor(&mut r, &shape));
    let m = tape.mul(v, proj).unwrap();
    tape.sum(m)
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of the step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.01..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, so max-pool winners are stable.
fn distinct_values(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<Real> = (0..n).map(|i| i as Real * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub struct FdResult {
    pub op: &'static str,
    pub instances: usize,
    pub worst: Real,
}

fn run(op: &'static str, instances: usize, mut one: impl FnMut(u64) -> Real) -> FdResult {
    let worst = (0..instances as u64).map(&mut one).fold(0.0, Real::max);
    FdResult { op, instances, worst }
}

/// Central-difference checks of every differentiable op on random instances.
pub fn fd_suite(instances: usize) -> Vec<FdResult> {
    let mut out = Vec::new();
    out.push(run("conv2d", instances, |s| {
        let mut r = rng(100 + s);
        let n = r.gen_range(1..=2);
        let c = r.gen_range(1..=3);
        let k = r.gen_range(1..=3);
        let kern = r.gen_range(1..=3);
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let h = r.gen_range(kern..=5);
        let w = r.gen_range(kern..=5);
        let x = rand_tensor(&mut r, &[n, c, h, w]);
        let wt = rand_tensor(&mut r, &[k, c, kern, kern]);
        let b = rand_tensor(&mut r, &[k]);
        fd_check(&[x, wt, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run("dense", instances, |s| {
        let mut r = rng(200 + s);
        let (n, i, o) = (r.gen_range(1..=4), r.gen_range(1..=6), r.gen_range(1..=5));
        let x = rand_tensor(&mut r, &[n, i]);
        let w = rand_tensor(&mut r, &[o, i]);
        let b = rand_tensor(&mut r, &[o]);
        fd_check(&[x, w, b], |t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run("relu", instances, |s| {
        let mut r = rng(300 + s);
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4), 3, 3];
        let x = away_from_zero(&mut r, &shape);
        fd_check(&[x], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, s)
        })
    }));
    out.push(run("max_pool", instances, |s| {
        let mut r = rng(400 + s);
        let kernel = r.gen_range(1..=3);
        let stride = r.gen_range(1..=kernel);
        let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(kernel..=6), r.gen_range(kernel..=6)];
        let x = distinct_values(&mut r, &shape);
        fd_check(&[x], |t, v| {
            let y = t.maxpool2d(v[0], kernel, stride).unwrap();
            project(t, y, s)
        })
    }));
    out.push(run("softmax_cross_entropy", instances, |s| {
        let mut r = rng(500 + s);
        let (n, k) = (r.gen_range(1..=5), r.gen_range(2..=6));
        let logits = Tensor::from_fn(&[n, k], |_| r.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        fd_check(&[logits], |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap())
    }));
    out.push(run("gate", instances, gate_instance));
    out
}

/// Gate with noise placed strictly inside or well outside each gap. The
/// derivative is checked w.r.t. the activations and the noise values.
fn gate_instance(seed: u64) -> Real {
    let mut r = rng(600 + seed);
    let cfg = GateConfig::default();
    let (n, c) = (r.gen_range(1..=3), r.gen_range(1..=4));
    let rho: Vec<Real> = (0..c).map(|_| r.gen_range(-4.0..4.0)).collect();
    let x: Vec<Real> = (0..n * c)
        .map(|i| {
            let (lo, hi) = taper_prune::gate::gate_boundaries(rho[i % c], &cfg);
            let g = hi - lo;
            match r.gen_range(0..4) {
                0 => (lo - 0.5 * g).max(0.0) * r.gen_range(0.0..0.9),
                1 => hi + (1.0 - hi) * r.gen_range(0.1..1.0),
                _ => lo + g * r.gen_range(0.05..0.95),
            }
        })
        .collect();
    let a = rand_tensor(&mut r, &[n, c, 2, 2]);
    let upstream = rand_tensor(&mut r, &[n, c, 2, 2]);
    // Analytic: tape gradient for activations, gate_noise_grad for the noise.
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let sample = GateSample::from_noise(&rho, n, x.clone(), &cfg).unwrap();
    let g = tape.gate(av, sample).unwrap();
    let u = tape.leaf(upstream.clone());
    let m = tape.mul(g, u).unwrap();
    let loss = tape.sum(m);
    tape.backward(loss).unwrap();
    let da = tape.grad(av).unwrap().clone();
    let dx = tape.gate_noise_grad(g).unwrap().to_vec();
    let f = |a: &Tensor, x: &[Real]| -> Real {
        let s = GateSample::from_noise(&rho, n, x.to_vec(), &cfg).unwrap();
        let out = taper_prune::gate::apply(a, &s).unwrap();
        out.data().iter().zip(upstream.data()).map(|(p, q)| p * q).sum()
    };
    let cmp = |an: Real, nu: Real| (an - nu).abs() / an.abs().max(nu.abs()).max(FD_FLOOR);
    let mut worst: Real = 0.0;
    for i in 0..a.len() {
        let (mut up, mut dn) = (a.clone(), a.clone());
        up.data_mut()[i] += FD_STEP;
        dn.data_mut()[i] -= FD_STEP;
        worst = worst.max(cmp(da.data()[i], (f(&up, &x) - f(&dn, &x)) / (2.0 * FD_STEP)));
    }
    for i in 0..x.len() {
        let (mut up, mut dn) = (x.clone(), x.clone());
        up[i] += FD_STEP;
        dn[i] -= FD_STEP;
        worst = worst.max(cmp(dx[i], (f(&a, &up) - f(&a, &dn)) / (2.0 * FD_STEP)));
    }
    worst
}

/// The desk-scale reference network.
pub fn toy_graph(width: usize) -> InstrumentedGraph {
    InstrumentedGraph::build(&GraphSpec::toy_cnn([3, 12, 12], [width, width, width], 10)).unwrap()
}

pub fn rel_err(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(Real::MIN_POSITIVE)
}

/// A small, fast run configuration on the toy network. `extra` holds TOML
/// tables and keys; top-level keys must come first.
pub fn small_config(width: usize, extra: &str) -> taper_prune::harness::RunConfig {
    let text = format!(
        r#"
graph_path = "unused"
{extra}
"#
    );
    let mut cfg = taper_prune::harness::RunConfig::from_toml(&text, std::path::Path::new(".")).unwrap();
    cfg.graph = Some(GraphSpec::toy_cnn([3, 12, 12], [width, width, width], 4));
    cfg.graph_path = None;
    cfg.validate().unwrap();
    cfg
}

pub const SMALL_DATA: &str = r#"
[data]
kind = "synthetic"
classes = 4
train = 256
test = 64
"#;
