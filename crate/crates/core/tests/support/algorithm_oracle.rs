//! Straight-line temporal attention forward pass on plain `Vec<f64>` buffers,
//! written step by step from the algorithm without the tape, the kernels or
//! any helper of the library. Only 2D frames `[C, H, W]` are supported.

#![allow(dead_code)]

use tam_core::TamParams;

/// How the fusion batch norm normalizes.
#[derive(Clone, Copy, Debug)]
pub enum BnMode {
    /// Running statistics from the parameters.
    Running,
    /// Statistics of the current map (biased variance).
    Batch,
}

const EPS: f64 = 1e-5;

fn affine_1x1(w: &[f64], b: &[f64], x: &[f64], c_in: usize, c_out: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; c_out * n];
    for o in 0..c_out {
        for p in 0..n {
            let mut acc = b[o];
            for i in 0..c_in {
                acc += w[o * c_in + i] * x[i * n + p];
            }
            y[o * n + p] = acc;
        }
    }
    y
}

/// 3×3 cross-correlation with one pixel of zero padding.
fn conv3x3(w: &[f64], b: &[f64], x: &[f64], c_in: usize, c_out: usize, h: usize, wd: usize) -> Vec<f64> {
    let mut y = vec![0.0; c_out * h * wd];
    for o in 0..c_out {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = b[o];
                for i in 0..c_in {
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let (rr, cc) = (r as isize + dr as isize - 1, c as isize + dc as isize - 1);
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                continue;
                            }
                            let xv = x[i * h * wd + rr as usize * wd + cc as usize];
                            acc += w[((o * c_in + i) * 3 + dr) * 3 + dc] * xv;
                        }
                    }
                }
                y[o * h * wd + r * wd + c] = acc;
            }
        }
    }
    y
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Attention weights `[N, N]` (query rows, key columns) of one head.
pub fn head_weights(q: &[f64], k: &[f64], width: usize, n: usize) -> Vec<f64> {
    let scale = 1.0 / (width as f64).sqrt();
    let mut w = vec![0.0; n * n];
    for p in 0..n {
        let mut row: Vec<f64> = (0..n)
            .map(|qk| (0..width).map(|r| q[r * n + p] * k[r * n + qk]).sum::<f64>() * scale)
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for (qk, v) in row.iter().enumerate() {
            w[p * n + qk] = v / z;
        }
    }
    w
}

/// Refined frames, each `C·H·W` values in channel-major order.
pub fn tam_reference(frames: &[Vec<f64>], shape: [usize; 3], p: &TamParams<f64>, heads: usize, bn: BnMode) -> Vec<Vec<f64>> {
    let [c, h, wd] = shape;
    let n = h * wd;
    let d = p.query.weight.shape()[0];
    let width = d / heads;
    let t = frames.len();

    // Step 1: projections.
    let proj = |conv: &tam_core::params::ConvParams<f64>, f: &[f64]| affine_1x1(conv.weight.data(), conv.bias.data(), f, c, d, n);
    let q: Vec<Vec<f64>> = frames.iter().map(|f| proj(&p.query, f)).collect();
    let k: Vec<Vec<f64>> = frames.iter().map(|f| proj(&p.key, f)).collect();
    let v: Vec<Vec<f64>> = frames.iter().map(|f| proj(&p.value, f)).collect();

    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let mut avg = vec![0.0; c * n];
        for j in (0..t).filter(|&j| j != i) {
            // Step 2: per-head attention of frame i's queries over frame j.
            let mut a = vec![0.0; d * n];
            for hd in 0..heads {
                let rows = hd * width..(hd + 1) * width;
                let qh = &q[i][rows.start * n..rows.end * n];
                let kh = &k[j][rows.start * n..rows.end * n];
                let vh = &v[j][rows.start * n..rows.end * n];
                let w = head_weights(qh, kh, width, n);
                for r in 0..width {
                    for pos in 0..n {
                        a[(rows.start + r) * n + pos] = (0..n).map(|qk| w[pos * n + qk] * vh[r * n + qk]).sum();
                    }
                }
            }
            // Step 3: gate, concatenate with the target frame, fuse.
            let g = affine_1x1(p.gate.weight.data(), p.gate.bias.data(), &a, d, d, n);
            let gated: Vec<f64> = a.iter().zip(&g).map(|(x, z)| x * sigmoid(*z)).collect();
            let mut combined = frames[i].clone();
            combined.extend_from_slice(&gated);
            let mut r = conv3x3(p.fusion.weight.data(), p.fusion.bias.data(), &combined, c + d, c, h, wd);
            let bnp = &p.fusion_bn;
            for ch in 0..c {
                let xs = &mut r[ch * n..(ch + 1) * n];
                let (mean, var) = match bn {
                    BnMode::Running => (bnp.running_mean.data()[ch], bnp.running_var.data()[ch]),
                    BnMode::Batch => {
                        let m = xs.iter().sum::<f64>() / n as f64;
                        (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64)
                    }
                };
                let (gamma, beta) = (bnp.gamma.data()[ch], bnp.beta.data()[ch]);
                for x in xs.iter_mut() {
                    *x = ((*x - mean) / (var + EPS).sqrt() * gamma + beta).max(0.0);
                }
            }
            // Step 4 (accumulate): mean over contributing frames.
            for (acc, x) in avg.iter_mut().zip(&r) {
                *acc += x / (t - 1) as f64;
            }
        }
        out.push(affine_1x1(p.output.weight.data(), p.output.bias.data(), &avg, c, c, n));
    }
    out
}
