//! Central finite-difference gradient checks (64-bit).
//!
//! Single ops are judged elementwise with
//! `|analytic − fd| / (|analytic| + |fd| + 1e-8)`. Whole networks are judged by
//! the same ratio taken over the gradient vector's Euclidean norms: directions
//! the loss is exactly invariant to (key biases under softmax, for one) have a
//! true gradient of zero, and there the elementwise ratio only measures
//! floating-point noise in the difference quotient.
//!
//! Network checks also compare the branch signature of the tape (ReLU and clamp
//! regions, pooling winners) at `x ± h` with the one at `x`. A probe whose
//! difference quotient spans two smooth pieces is not a derivative estimate; it
//! is skipped and counted, and a check with more than 5% such probes fails.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{NormMode, Tape, Var};
use crate::error::Result;
use crate::kernels::Padding;
use crate::params::{ParamKind, Parameters, Session};
use crate::loss::{compound_loss, one_hot};
use crate::tam::{tam_forward, TamConfig, TamParams};
use crate::tensor::Tensor;
use crate::unet::{backbone_forward, BackboneConfig, Slot, UNetParams};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-8;
/// At most one probe in this many may be skipped for straddling a kink.
const MAX_STRADDLED_DIVISOR: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Elementwise,
    Normwise,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub criterion: Criterion,
    /// Worst elementwise relative error seen.
    pub worst_elementwise: f64,
    /// Relative error of the whole gradient vector.
    pub normwise: f64,
    pub checked: usize,
    /// Probes skipped because `±STEP` crossed a ReLU, clamp or pooling boundary.
    pub straddled: usize,
    pub passed: bool,
}

#[derive(Default)]
struct Accum {
    worst: f64,
    diff_sq: f64,
    a_sq: f64,
    fd_sq: f64,
    checked: usize,
    straddled: usize,
}

impl Accum {
    fn add(&mut self, analytic: f64, fd: f64) {
        let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs() + FLOOR);
        self.worst = self.worst.max(rel);
        self.diff_sq += (analytic - fd).powi(2);
        self.a_sq += analytic * analytic;
        self.fd_sq += fd * fd;
        self.checked += 1;
    }

    fn finish(self, name: &str, criterion: Criterion) -> GradCheckReport {
        let normwise = self.diff_sq.sqrt() / (self.a_sq.sqrt() + self.fd_sq.sqrt() + FLOOR);
        let score = match criterion {
            Criterion::Elementwise => self.worst,
            Criterion::Normwise => normwise,
        };
        GradCheckReport {
            name: name.to_string(),
            criterion,
            worst_elementwise: self.worst,
            normwise,
            checked: self.checked,
            straddled: self.straddled,
            // NaN compares false, so a non-finite score fails
            passed: score < TOLERANCE && self.straddled * MAX_STRADDLED_DIVISOR <= self.checked + self.straddled,
        }
    }
}

/// Element indices to probe: all of them, or a seeded sample of `limit`.
fn probe_indices(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Checks the gradient of the scalar built by `f` with respect to each of `inputs`.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut acc = Accum::default();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - STEP;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            acc.add(analytic.data()[i], (plus - minus) / (2.0 * STEP));
        }
    }
    Ok(acc.finish(name, Criterion::Elementwise))
}

/// Checks gradients of every trainable tensor in `params` (optionally only a
/// seeded sample of `limit` elements per tensor) for the loss built by `f`.
/// Batch norm runs in training mode.
pub fn check_params<P, F>(name: &str, params: &mut P, limit: Option<usize>, seed: u64, f: F) -> Result<GradCheckReport>
where
    P: Parameters<f64>,
    F: Fn(&mut Session<f64>, &P) -> Result<Var>,
{
    let eval = |p: &P| -> Result<(f64, u64)> {
        let mut s = Session::with_mode(NormMode::Train, false);
        let out = f(&mut s, p)?;
        Ok((s.tape.value(out).item(), s.tape.branch_signature()))
    };
    let (grads, base) = {
        let mut s = Session::train();
        let loss = f(&mut s, params)?;
        s.backward(loss)?;
        (s.gradients(params), s.tape.branch_signature())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Accum::default();
    for (pname, g) in &grads {
        for i in probe_indices(g.len(), limit, &mut rng) {
            let mut orig = 0.0;
            set_element(params, pname, i, |v| {
                orig = *v;
                *v += STEP;
            });
            let (plus, sig_plus) = eval(params)?;
            set_element(params, pname, i, |v| *v = orig - STEP);
            let (minus, sig_minus) = eval(params)?;
            set_element(params, pname, i, |v| *v = orig);
            if sig_plus != base || sig_minus != base {
                acc.straddled += 1;
                continue;
            }
            acc.add(g.data()[i], (plus - minus) / (2.0 * STEP));
        }
    }
    Ok(acc.finish(name, Criterion::Normwise))
}

fn set_element<P: Parameters<f64>>(params: &mut P, name: &str, index: usize, mut f: impl FnMut(&mut f64)) {
    params.visit_mut("", &mut |n, t, kind| {
        if kind == ParamKind::Trainable && n == name {
            f(&mut t.data_mut()[index]);
        }
    });
}

/// Uniform values with magnitude in `[0.5, 1.5]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.5..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.5..1.5))
}

/// Weighted sum `Σ w ⊙ y` with fixed random weights, so every output element
/// contributes with a distinct coefficient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = away_from_zero(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, fn(&mut Tape<f64>, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |r| vec![away_from_zero(r, &[3, 4]), away_from_zero(r, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
        ("conv2d", |r| vec![away_from_zero(r, &[1, 5, 5]), away_from_zero(r, &[2, 1, 3, 3]), away_from_zero(r, &[2])], |t, v| {
            t.conv(v[0], v[1], Some(v[2]), 1, Padding::Same)
        }),
        ("conv2d_valid_stride2", |r| vec![away_from_zero(r, &[2, 6, 5]), away_from_zero(r, &[2, 2, 3, 3])], |t, v| {
            t.conv(v[0], v[1], None, 2, Padding::Valid)
        }),
        ("conv3d", |r| vec![away_from_zero(r, &[2, 3, 4, 3]), away_from_zero(r, &[2, 2, 3, 3, 3]), away_from_zero(r, &[2])], |t, v| {
            t.conv(v[0], v[1], Some(v[2]), 1, Padding::Same)
        }),
        ("conv1x1", |r| vec![away_from_zero(r, &[3, 4, 4]), away_from_zero(r, &[2, 3, 1, 1])], |t, v| {
            t.conv(v[0], v[1], None, 1, Padding::Same)
        }),
        ("add", |r| vec![away_from_zero(r, &[2, 3]), away_from_zero(r, &[2, 3])], |t, v| t.add(v[0], v[1])),
        ("add_scalar_operand", |r| vec![away_from_zero(r, &[2, 3]), away_from_zero(r, &[])], |t, v| t.add(v[0], v[1])),
        ("sub", |r| vec![away_from_zero(r, &[4]), away_from_zero(r, &[4])], |t, v| t.sub(v[0], v[1])),
        ("mul", |r| vec![away_from_zero(r, &[2, 3]), away_from_zero(r, &[2, 3])], |t, v| t.mul(v[0], v[1])),
        ("mul_scalar_operand", |r| vec![away_from_zero(r, &[]), away_from_zero(r, &[5])], |t, v| t.mul(v[0], v[1])),
        ("div", |r| vec![away_from_zero(r, &[3, 2]), positive(r, &[3, 2])], |t, v| t.div(v[0], v[1])),
        ("div_scalar_denominator", |r| vec![away_from_zero(r, &[4]), positive(r, &[])], |t, v| t.div(v[0], v[1])),
        ("scale", |r| vec![away_from_zero(r, &[6])], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", |r| vec![away_from_zero(r, &[6])], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        ("relu", |r| vec![away_from_zero(r, &[3, 3])], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", |r| vec![away_from_zero(r, &[3, 3])], |t, v| Ok(t.sigmoid(v[0]))),
        ("log", |r| vec![positive(r, &[3, 3])], |t, v| Ok(t.log(v[0]))),
        ("clamp", |r| vec![Tensor::from_fn(&[8], |i| {
            // keep clear of the clamp edges at ±1
            let m = if i % 2 == 0 { r.gen_range(0.2..0.9) } else { r.gen_range(1.1..1.8) };
            if r.gen_bool(0.5) { m } else { -m }
        })], |t, v| Ok(t.clamp(v[0], -1.0, 1.0))),
        ("softmax_axis0", |r| vec![away_from_zero(r, &[4, 3])], |t, v| t.softmax(v[0], 0)),
        ("softmax_axis1", |r| vec![away_from_zero(r, &[2, 5])], |t, v| t.softmax(v[0], 1)),
        ("mean_axis", |r| vec![away_from_zero(r, &[3, 4, 2])], |t, v| t.mean_axis(v[0], 1)),
        ("sum", |r| vec![away_from_zero(r, &[3, 4])], |t, v| Ok(t.sum(v[0]))),
        ("concat", |r| vec![away_from_zero(r, &[2, 2]), away_from_zero(r, &[3, 2])], |t, v| t.concat(&[v[0], v[1]], 0)),
        ("narrow", |r| vec![away_from_zero(r, &[2, 5, 2])], |t, v| t.narrow(v[0], 1, 1, 3)),
        ("reshape", |r| vec![away_from_zero(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        ("transpose", |r| vec![away_from_zero(r, &[2, 5])], |t, v| t.transpose(v[0])),
        ("batch_norm_train", |r| vec![away_from_zero(r, &[2, 3, 3]), away_from_zero(r, &[2]), away_from_zero(r, &[2])], |t, v| {
            let (rm, rv) = (Tensor::zeros(&[2]), Tensor::ones(&[2]));
            Ok(t.batch_norm(v[0], v[1], v[2], (&rm, &rv), NormMode::Train)?.0)
        }),
        ("batch_norm_eval", |r| vec![away_from_zero(r, &[2, 4]), away_from_zero(r, &[2]), away_from_zero(r, &[2])], |t, v| {
            let (rm, rv) = (Tensor::from_f64(&[2], &[0.3, -0.2])?, Tensor::from_f64(&[2], &[1.5, 0.7])?);
            Ok(t.batch_norm(v[0], v[1], v[2], (&rm, &rv), NormMode::Eval)?.0)
        }),
        ("max_pool", |r| vec![away_from_zero(r, &[2, 4, 4])], |t, v| t.max_pool(v[0], &[2, 2])),
        ("upsample_nearest", |r| vec![away_from_zero(r, &[2, 2, 3])], |t, v| t.upsample_nearest(v[0], &[2, 2])),
        ("compound_loss", |r| vec![away_from_zero(r, &[3, 4, 4])], |t, v| {
            let labels: Vec<u8> = (0..16).map(|i| (i * 7 % 3) as u8).collect();
            let truth = t.constant(one_hot(&labels, &[4, 4], 3)?);
            let probs = t.softmax(v[0], 0)?;
            compound_loss(t, truth, probs)
        }),
    ]
}

/// Every registered op, each over `seeds` random draws; one report per op
/// carrying the worst error across seeds.
pub fn op_suite(seeds: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (name, make, build) in op_cases() {
        let mut worst: Option<GradCheckReport> = None;
        let mut checked = 0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) + 11);
            let inputs = make(&mut rng);
            let report = check_inputs(name, &inputs, |t, v| {
                let y = build(t, v)?;
                weighted_sum(t, y, seed)
            })?;
            checked += report.checked;
            if worst.as_ref().map_or(true, |w| report.worst_elementwise > w.worst_elementwise || !report.passed) {
                worst = Some(report);
            }
        }
        let mut w = worst.expect("at least one seed");
        w.checked = checked;
        reports.push(w);
    }
    Ok(reports)
}

/// The temporal attention module with `T = 2` frames on a 4×4 grid, checked
/// over every trainable tensor for each seed.
pub fn tam_suite(seeds: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = TamConfig::new(4, 2, 2)?;
    (0..seeds)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(104_729) + 3);
            let mut params = TamParams::<f64>::init(&mut rng, &cfg);
            let frames: Vec<Tensor<f64>> = (0..2).map(|_| away_from_zero(&mut rng, &[4, 4, 4])).collect();
            check_params(&format!("tam_seed{seed}"), &mut params, None, seed, |s, p| {
                let vars: Vec<Var> = frames.iter().map(|f| s.input(f.clone())).collect();
                let out = tam_forward(s, &vars, p, &cfg)?;
                let stacked = s.tape.concat(&out.frames, 0)?;
                weighted_sum(&mut s.tape, stacked, seed)
            })
        })
        .collect()
}

/// Configuration of the tiny end-to-end check: three levels on 16×16 frames
/// with a TAM at the bottleneck.
pub fn end_to_end_config() -> BackboneConfig {
    BackboneConfig {
        channels: vec![2, 4, 4],
        classes: 3,
        heads: 2,
        insertion_set: [Slot::E3].into(),
        ..Default::default()
    }
}

/// Compound loss of the tiny network on two random frames against random
/// labels; `limit` elements sampled per parameter tensor.
pub fn end_to_end_suite(seeds: u64, limit: Option<usize>) -> Result<Vec<GradCheckReport>> {
    let cfg = end_to_end_config();
    (0..seeds)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(15_485_863) + 5);
            let mut params = UNetParams::<f64>::init(&mut rng, &cfg)?;
            let frames: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_fn(&[1, 16, 16], |_| rng.gen_range(0.0..1.0))).collect();
            let truths: Vec<Tensor<f64>> = (0..2)
                .map(|_| {
                    let labels: Vec<u8> = (0..256).map(|_| rng.gen_range(0..3)).collect();
                    one_hot(&labels, &[16, 16], 3)
                })
                .collect::<Result<_>>()?;
            check_params(&format!("end2end_seed{seed}"), &mut params, limit, seed, |s, p| {
                let vars: Vec<Var> = frames.iter().map(|f| s.input(f.clone())).collect();
                let probs = backbone_forward(s, &vars, &cfg, p)?;
                let mut losses = Vec::new();
                for (pr, truth) in probs.into_iter().zip(&truths) {
                    let t = s.tape.constant(truth.clone());
                    losses.push(compound_loss(&mut s.tape, t, pr)?);
                }
                let total = s.tape.add(losses[0], losses[1])?;
                Ok(s.tape.scale(total, 0.5))
            })
        })
        .collect()
}
