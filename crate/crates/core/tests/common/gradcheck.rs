//! Central finite-difference checks for every graph operator and for the
//! full training loss.

use ncd_core::net::NcdModel;
use ncd_core::problem::{DonorPool, ProblemView};
use ncd_core::synth::{generate_all, GeneratorConfig};
use ncd_core::tensor::{dropout_mask, Float, Graph, Tensor, Var};
use ncd_core::trainer::{batch_loss, batch_loss_value, TrainConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(not(feature = "f64"))]
mod prec {
    pub const STEP: f64 = 1e-2;
    pub const LOSS_STEP: f64 = 1e-3;
    pub const TOL: f64 = 1e-2;
}
#[cfg(feature = "f64")]
mod prec {
    pub const STEP: f64 = 1e-6;
    pub const LOSS_STEP: f64 = 1e-6;
    pub const TOL: f64 = 1e-5;
}
pub use prec::{LOSS_STEP, STEP, TOL};

pub const TRIALS: u64 = 100;
/// Coordinates sampled per parameter tensor in the end-to-end check.
const COORDS: usize = 2;

fn rng(op: &str, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(u64::from(fnv1a(op)) << 32 | trial)
}

fn fnv1a(s: &str) -> u32 {
    s.bytes().fold(2166136261u32, |h, b| (h ^ u32::from(b)).wrapping_mul(16777619))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi) as Float).collect()).unwrap()
}

/// Values bounded away from zero so a step never crosses a ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            (if rng.gen_bool(0.5) { m } else { -m }) as Float
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=max)).collect()
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
type Case = (Vec<Tensor>, Build);

/// `sum(build(inputs) ⊙ r)` for a fixed random `r`, so every output element
/// contributes with its own weight.
fn weighted(build: &Build, inputs: &[Tensor], r: &Option<Tensor>) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = match r {
        Some(r) => {
            let rv = g.constant(r.clone());
            let m = g.mul(out, rv).unwrap();
            g.sum(m).unwrap()
        }
        None => out,
    };
    (g, vars, loss)
}

#[derive(Debug, Clone, Copy)]
pub struct Outcome {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl Outcome {
    /// Within tolerance on every trial, with at most one coordinate in fifty
    /// skipped for straddling a kink.
    pub fn passed(&self) -> bool {
        self.worst < TOL && self.checked > 0 && self.skipped * 50 <= self.checked
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ‖a − n‖ / max(‖a‖, ‖n‖, 1e-6).
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(n)).max(1e-6)
}

/// Central difference of `f` around `x0`, or `None` when the one-sided
/// slopes disagree, meaning the step straddles a kink.
fn central(f0: f64, fp: f64, fm: f64, h: f64) -> Option<f64> {
    let (up, down) = ((fp - f0) / h, (f0 - fm) / h);
    ((up - down).abs() <= 50.0 * h * (1.0 + up.abs().max(down.abs()))).then(|| (fp - fm) / (2.0 * h))
}

fn check_op(op: &str, instance: MakeCase) -> Outcome {
    let mut out = Outcome { worst: 0.0, checked: 0, skipped: 0 };
    for trial in 0..TRIALS {
        let mut rng = rng(op, trial);
        let (inputs, build) = instance(&mut rng, op);
        let shape = {
            let (g, _, l) = weighted(&build, &inputs, &None);
            g.value(l).shape().to_vec()
        };
        let r = if shape.is_empty() { None } else { Some(uniform(&mut rng, &shape, -1.0, 1.0)) };
        let (g, vars, loss) = weighted(&build, &inputs, &r);
        let l0 = f64::from(g.value(loss).data()[0]);
        let grads = g.backward(loss).unwrap();
        let eval = |inputs: &[Tensor]| {
            let (g, _, l) = weighted(&build, inputs, &r);
            f64::from(g.value(l).data()[0])
        };
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (i, v) in vars.iter().enumerate() {
            let ga = grads.get(*v).unwrap();
            for j in 0..inputs[i].numel() {
                let mut p = inputs.to_vec();
                p[i].data_mut()[j] += STEP as Float;
                let lp = eval(&p);
                p[i].data_mut()[j] -= 2.0 * STEP as Float;
                let lm = eval(&p);
                let Some(n) = central(l0, lp, lm, STEP) else {
                    out.skipped += 1;
                    continue;
                };
                analytic.push(f64::from(ga.data()[j]));
                numeric.push(n);
            }
        }
        out.checked += analytic.len();
        out.worst = out.worst.max(rel_err(&analytic, &numeric));
    }
    out
}

fn binary(rng: &mut ChaCha8Rng, op: &str) -> Case {
    let rank = rng.gen_range(1..=3);
    let s = dims(rng, rank, 4);
    let inputs = vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)];
    let f: Build = match op {
        "add" => Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        "sub" => Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
        _ => Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
    };
    (inputs, f)
}

fn unary(rng: &mut ChaCha8Rng, op: &str) -> Case {
    let s = dims(rng, 2, 5);
    let inputs = vec![uniform(rng, &s, -3.0, 3.0)];
    let factor = rng.gen_range(-2.0..2.0) as Float;
    let total = s[0] * s[1];
    let f: Build = match op {
        "scale" => Box::new(move |g, v| g.scale(v[0], factor).unwrap()),
        "sum" => Box::new(|g, v| g.sum(v[0]).unwrap()),
        "mean" => Box::new(|g, v| g.mean(v[0]).unwrap()),
        "sigmoid" => Box::new(|g, v| g.sigmoid(v[0]).unwrap()),
        _ => Box::new(move |g, v| g.reshape(v[0], &[total]).unwrap()),
    };
    (inputs, f)
}

fn relu(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let s = dims(rng, 2, 6);
    (vec![away_from_zero(rng, &s)], Box::new(|g, v| g.relu(v[0]).unwrap()))
}

fn avg_pool2(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let s = vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=7), rng.gen_range(2..=7)];
    (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.avg_pool2(v[0]).unwrap()))
}

fn global_avg_pool(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let s = vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
    (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(|g, v| g.global_avg_pool(v[0]).unwrap()))
}

fn affine(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let (n, d, m) = (rng.gen_range(1..=5), rng.gen_range(1..=6), rng.gen_range(1..=3));
    let inputs = vec![uniform(rng, &[n, d], -1.0, 1.0), uniform(rng, &[d, m], -1.0, 1.0), uniform(rng, &[m], -1.0, 1.0)];
    (inputs, Box::new(|g, v| g.affine(v[0], v[1], v[2]).unwrap()))
}

fn conv2d(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let stride: usize = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=1);
    let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (oh, ow) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    // Smallest extents at or above the target that the geometry accepts.
    let fit = |x: usize, k: usize| {
        let mut x = x.max(1);
        while x + 2 * padding < k || !(x + 2 * padding - k).is_multiple_of(stride) {
            x += 1;
        }
        x
    };
    let h = fit(((oh - 1) * stride + kh).saturating_sub(2 * padding), kh);
    let w = fit(((ow - 1) * stride + kw).saturating_sub(2 * padding), kw);
    let (n, c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let inputs = vec![uniform(rng, &[n, c, h, w], -1.0, 1.0), uniform(rng, &[o, c, kh, kw], -1.0, 1.0), uniform(rng, &[o], -1.0, 1.0)];
    (inputs, Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, padding).unwrap()))
}

fn dropout(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let s = dims(rng, 2, 6);
    let rate = rng.gen_range(0.0..0.9) as Float;
    let mask = dropout_mask(&s, rate, rng).unwrap();
    (vec![uniform(rng, &s, -1.0, 1.0)], Box::new(move |g, v| g.dropout_with_mask(v[0], &mask).unwrap()))
}

fn bce(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let (b, c) = (rng.gen_range(1..=4), rng.gen_range(1..=10));
    let targets = Tensor::new(vec![b, c], (0..b * c).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect()).unwrap();
    (vec![uniform(rng, &[b, c], -4.0, 4.0)], Box::new(move |g, v| g.bce_with_logits(v[0], &targets).unwrap()))
}

fn gather(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let (n, d) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
    let rows: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..n)).collect();
    (vec![uniform(rng, &[n, d], -1.0, 1.0)], Box::new(move |g, v| g.gather(v[0], &rows).unwrap()))
}

fn center_on_anchors(rng: &mut ChaCha8Rng, _: &str) -> Case {
    let group = rng.gen_range(2..=10);
    let anchors = rng.gen_range(1..=group);
    let (groups, d) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
    (vec![uniform(rng, &[groups * group, d], -1.0, 1.0)], Box::new(move |g, v| g.center_on_anchors(v[0], group, anchors).unwrap()))
}

type MakeCase = fn(&mut ChaCha8Rng, &str) -> Case;

pub const OPS: [(&str, MakeCase); 17] = [
    ("add", binary),
    ("sub", binary),
    ("mul", binary),
    ("scale", unary),
    ("sum", unary),
    ("mean", unary),
    ("sigmoid", unary),
    ("reshape", unary),
    ("relu", relu),
    ("avg_pool2", avg_pool2),
    ("global_avg_pool", global_avg_pool),
    ("affine", affine),
    ("conv2d", conv2d),
    ("dropout", dropout),
    ("bce_with_logits", bce),
    ("gather", gather),
    ("center_on_anchors", center_on_anchors),
];

pub fn op(name: &str) -> Outcome {
    let (_, f) = OPS.iter().find(|(n, _)| *n == name).unwrap();
    check_op(name, *f)
}

/// Full training loss on two-problem batches with negatives, dropout,
/// centering and column fusion drawn at random per trial. Every parameter
/// tensor contributes up to `COORDS` coordinates.
pub fn training_loss() -> Outcome {
    let problems = generate_all(11, 6, &GeneratorConfig::default()).unwrap();
    let views: Vec<ProblemView> = problems.iter().map(|p| p.unlabeled()).collect();
    let pool = DonorPool::new(&views);
    let mut out = Outcome { worst: 0.0, checked: 0, skipped: 0 };
    for trial in 0..TRIALS {
        let mut rng = rng("training_loss", trial);
        let config = TrainConfig {
            seed: trial,
            k: rng.gen_range(0..=8),
            use_negatives: rng.gen_bool(0.7),
            use_decentralization: rng.gen_bool(0.7),
            fuse_columns: rng.gen_bool(0.3),
            ..TrainConfig::default()
        };
        let mut model = NcdModel::init(trial, config.model_config());
        // Zero biases put every blank-background unit exactly on the ReLU
        // kink; random biases move the check point off it.
        for i in [1, 3, 5] {
            let shape = model.params.tensors[i].shape().to_vec();
            model.params.tensors[i] = uniform(&mut rng, &shape, -0.1, 0.1);
        }
        let start = rng.gen_range(0..views.len() - 1);
        let batch = &views[start..start + 2];
        let (l0, grads) = batch_loss(&model, batch, &pool, &config, trial).unwrap();
        let l0 = f64::from(l0);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (i, g) in grads.iter().enumerate() {
            let n = g.numel();
            for j in sample(&mut rng, n, n.min(COORDS)) {
                let orig = model.params.tensors[i].data()[j];
                let mut at = |v: f64| {
                    model.params.tensors[i].data_mut()[j] = v as Float;
                    f64::from(batch_loss_value(&model, batch, &pool, &config, trial).unwrap())
                };
                let (lp, lm) = (at(f64::from(orig) + LOSS_STEP), at(f64::from(orig) - LOSS_STEP));
                model.params.tensors[i].data_mut()[j] = orig;
                let Some(num) = central(l0, lp, lm, LOSS_STEP) else {
                    out.skipped += 1;
                    continue;
                };
                analytic.push(f64::from(g.data()[j]));
                numeric.push(num);
            }
        }
        out.checked += analytic.len();
        out.worst = out.worst.max(rel_err(&analytic, &numeric));
    }
    out
}
