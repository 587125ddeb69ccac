//! Raw loops behind the differentiable ops: matrix products, im2col convolution
//! geometry, pooling and upsampling. Everything works on flat row-major slices.
//!
//! Spatial layouts of rank 1..=3 are padded to rank 3 internally so the loops
//! stay fixed-depth.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` with multiply-accumulate counting enabled on this thread and returns
/// the number of MACs executed by forward matrix products and convolutions.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let previous = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = MAC_COUNTER.with(|c| c.replace(previous)).unwrap_or(0);
    if let Some(outer) = previous {
        MAC_COUNTER.with(|c| c.set(Some(outer + counted)));
    }
    (out, counted)
}

#[inline]
fn record(macs: usize) {
    MAC_COUNTER.with(|c| {
        if let Some(n) = c.get() {
            c.set(Some(n + macs as u64));
        }
    });
}

/// `c[m×n] += a[m×k] · b[k×n]`. Counted when `count` is set.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, count: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut macs = 0;
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
            macs += n;
        }
    }
    if count {
        record(macs);
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `[k×m]` and `b` is `[k×n]`.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` where `a` is `[m×k]` and `b` is stored `[n×k]`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved shapes of one convolution, spatial axes padded to rank 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub rank: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

fn pad3(dims: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    let off = 3 - dims.len();
    out[off..].copy_from_slice(dims);
    out
}

impl ConvGeom {
    /// `input_shape` is `[C_in, spatial..]`, `kernel_shape` is `[C_out, C_in, k..]`.
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let rank = input_shape.len().saturating_sub(1);
        if !(1..=3).contains(&rank) {
            return Err(Error::invalid(
                "conv",
                format!("input must be [C, spatial..] with 1-3 spatial axes, got {input_shape:?}"),
            ));
        }
        if kernel_shape.len() != rank + 2 {
            return Err(Error::shape("conv", input_shape, kernel_shape));
        }
        if kernel_shape[1] != input_shape[0] {
            return Err(Error::shape("conv", input_shape, kernel_shape));
        }
        if stride == 0 {
            return Err(Error::invalid("conv", "stride must be positive"));
        }
        let spatial = &input_shape[1..];
        let ksp = &kernel_shape[2..];
        let mut pad = [0usize; 3];
        let mut output = [1usize; 3];
        let off = 3 - rank;
        for a in 0..rank {
            let k = ksp[a];
            if k == 0 {
                return Err(Error::invalid("conv", "zero kernel extent"));
            }
            let p = match padding {
                Padding::Valid => 0,
                Padding::Same => {
                    if k % 2 == 0 {
                        return Err(Error::invalid(
                            "conv",
                            format!("same padding needs odd kernel extents, got {ksp:?}"),
                        ));
                    }
                    (k - 1) / 2
                }
            };
            let padded = spatial[a] + 2 * p;
            if k > padded {
                return Err(Error::invalid(
                    "conv",
                    format!("kernel {ksp:?} larger than padded input {spatial:?}"),
                ));
            }
            pad[off + a] = p;
            output[off + a] = (padded - k) / stride + 1;
        }
        Ok(Self {
            rank,
            c_in: input_shape[0],
            c_out: kernel_shape[0],
            input: pad3(spatial, 1),
            kernel: pad3(ksp, 1),
            stride: pad3(&vec![stride; rank], 1),
            pad,
            output,
        })
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.c_out];
        shape.extend_from_slice(&self.output[3 - self.rank..]);
        shape
    }

    /// Plain 1×1, stride 1, unpadded: im2col is the identity.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_volume() == 1 && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// For each kernel tap along `axis`, the input coordinate of every output
    /// coordinate, or `None` where it falls into padding.
    fn tap_table(&self, axis: usize) -> Vec<Vec<Option<usize>>> {
        (0..self.kernel[axis])
            .map(|t| {
                (0..self.output[axis])
                    .map(|o| {
                        let pos = (o * self.stride[axis] + t) as isize - self.pad[axis] as isize;
                        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
                    })
                    .collect()
            })
            .collect()
    }

    /// Lays out receptive fields as a `[C_in·kvol, out_positions]` matrix.
    pub fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let kvol = self.kernel_volume();
        let out_n = self.out_positions();
        let in_n = self.in_positions();
        let mut cols = vec![T::ZERO; self.c_in * kvol * out_n];
        let tables = [self.tap_table(0), self.tap_table(1), self.tap_table(2)];
        let [_, h, w] = self.input;
        let [od, oh, ow] = self.output;
        for c in 0..self.c_in {
            let plane = &input[c * in_n..(c + 1) * in_n];
            for kd in 0..self.kernel[0] {
                for kh in 0..self.kernel[1] {
                    for kw in 0..self.kernel[2] {
                        let row = ((c * self.kernel[0] + kd) * self.kernel[1] + kh) * self.kernel[2] + kw;
                        let dst = &mut cols[row * out_n..(row + 1) * out_n];
                        let mut o = 0;
                        for zd in 0..od {
                            let Some(id) = tables[0][kd][zd] else {
                                o += oh * ow;
                                continue;
                            };
                            for zh in 0..oh {
                                let Some(ih) = tables[1][kh][zh] else {
                                    o += ow;
                                    continue;
                                };
                                let base = (id * h + ih) * w;
                                for &iw in &tables[2][kw] {
                                    if let Some(iw) = iw {
                                        dst[o] = plane[base + iw];
                                    }
                                    o += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back onto the input.
    pub fn col2im<T: Scalar>(&self, cols: &[T], dinput: &mut [T]) {
        let out_n = self.out_positions();
        let in_n = self.in_positions();
        let tables = [self.tap_table(0), self.tap_table(1), self.tap_table(2)];
        let [_, h, w] = self.input;
        let [od, oh, ow] = self.output;
        for c in 0..self.c_in {
            let plane = &mut dinput[c * in_n..(c + 1) * in_n];
            for kd in 0..self.kernel[0] {
                for kh in 0..self.kernel[1] {
                    for kw in 0..self.kernel[2] {
                        let row = ((c * self.kernel[0] + kd) * self.kernel[1] + kh) * self.kernel[2] + kw;
                        let src = &cols[row * out_n..(row + 1) * out_n];
                        let mut o = 0;
                        for zd in 0..od {
                            let Some(id) = tables[0][kd][zd] else {
                                o += oh * ow;
                                continue;
                            };
                            for zh in 0..oh {
                                let Some(ih) = tables[1][kh][zh] else {
                                    o += ow;
                                    continue;
                                };
                                let base = (id * h + ih) * w;
                                for &iw in &tables[2][kw] {
                                    if let Some(iw) = iw {
                                        plane[base + iw] += src[o];
                                    }
                                    o += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling over `[C, spatial..]` with per-axis windows.
/// Returns pooled values and the flat input index each one came from.
pub fn max_pool<T: Scalar>(input: &[T], shape: &[usize], window: &[usize]) -> Result<(Vec<T>, Vec<usize>, Vec<usize>)> {
    let rank = shape.len() - 1;
    if window.len() != rank || window.iter().any(|&w| w == 0) {
        return Err(Error::shape("max_pool", shape, window));
    }
    for (a, &w) in window.iter().enumerate() {
        if shape[1 + a] % w != 0 {
            return Err(Error::invalid(
                "max_pool",
                format!("extent {:?} not divisible by window {window:?}", &shape[1..]),
            ));
        }
    }
    let sp = pad3(&shape[1..], 1);
    let win = pad3(window, 1);
    let out = [sp[0] / win[0], sp[1] / win[1], sp[2] / win[2]];
    let c = shape[0];
    let in_n: usize = sp.iter().product();
    let out_n: usize = out.iter().product();
    let mut values = Vec::with_capacity(c * out_n);
    let mut argmax = Vec::with_capacity(c * out_n);
    for ch in 0..c {
        for d in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    let mut best = None::<(T, usize)>;
                    for wd in 0..win[0] {
                        for wy in 0..win[1] {
                            for wx in 0..win[2] {
                                let idx = ch * in_n
                                    + ((d * win[0] + wd) * sp[1] + y * win[1] + wy) * sp[2]
                                    + x * win[2]
                                    + wx;
                                let v = input[idx];
                                if best.map_or(true, |(b, _)| v > b) {
                                    best = Some((v, idx));
                                }
                            }
                        }
                    }
                    let (v, idx) = best.expect("window is nonempty");
                    values.push(v);
                    argmax.push(idx);
                }
            }
        }
    }
    let mut out_shape = vec![c];
    for a in 0..rank {
        out_shape.push(shape[1 + a] / window[a]);
    }
    Ok((values, argmax, out_shape))
}

/// Nearest-neighbour upsampling of `[C, spatial..]` by integer per-axis factors.
/// Returns values, the source index of every output element, and the new shape.
pub fn upsample_nearest<T: Scalar>(input: &[T], shape: &[usize], factors: &[usize]) -> Result<(Vec<T>, Vec<usize>, Vec<usize>)> {
    let rank = shape.len() - 1;
    if factors.len() != rank || factors.iter().any(|&f| f == 0) {
        return Err(Error::shape("upsample", shape, factors));
    }
    let sp = pad3(&shape[1..], 1);
    let fac = pad3(factors, 1);
    let out = [sp[0] * fac[0], sp[1] * fac[1], sp[2] * fac[2]];
    let c = shape[0];
    let in_n: usize = sp.iter().product();
    let out_n: usize = out.iter().product();
    let mut source = Vec::with_capacity(c * out_n);
    for ch in 0..c {
        for d in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    source.push(ch * in_n + ((d / fac[0]) * sp[1] + y / fac[1]) * sp[2] + x / fac[2]);
                }
            }
        }
    }
    let values = source.iter().map(|&i| input[i]).collect();
    let mut out_shape = vec![c];
    for a in 0..rank {
        out_shape.push(shape[1 + a] * factors[a]);
    }
    Ok((values, source, out_shape))
}
