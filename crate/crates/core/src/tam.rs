//! Temporal attention module: multi-headed cross-time attention between the
//! per-frame feature maps of a sequence.
//!
//! For every target frame `i` and every other frame `j`:
//!
//! 1. `Q_t`, `K_t`, `V_t` are 1×1 projections of `F_t` to `d_embed` channels,
//!    flattened to `d_embed × N` and split into heads of width `d_embed / H`.
//! 2. Per head, spatial positions are tokens: query position `p` of frame `i`
//!    attends over the key positions of frame `j` with weights
//!    `softmax_q(Q_i[:,p]·K_j[:,q] / √(d_embed/H))`, and reads `V_j` with them.
//! 3. The concatenated heads `A` are gated, `A ⊙ σ(W_G * A + b_G)`, stacked onto
//!    `F_i` along channels and fused by `ReLU(BN(W_R * ·))` back to `C` channels.
//! 4. The fused maps are averaged over `j ≠ i` and passed through the 1×1 `W_O`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::params::{join, load_bundle, to_bundle, BatchNormParams, ConvParams, HasBatchNorms, ParamKind, Parameters, Session};
use crate::tensor::{numel, Scalar, Tensor};
use crate::tnsr::Bundle;

/// Largest number of spatial positions a TAM slot will attend over.
pub const MAX_POSITIONS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamConfig {
    pub channels: usize,
    pub d_embed: usize,
    pub heads: usize,
    pub spatial_rank: usize,
}

impl TamConfig {
    /// `d_embed` defaults to the slot's channel count.
    pub fn new(channels: usize, heads: usize, spatial_rank: usize) -> Result<Self> {
        let cfg = Self {
            channels,
            d_embed: channels,
            heads,
            spatial_rank,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_d_embed(mut self, d_embed: usize) -> Result<Self> {
        self.d_embed = d_embed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("TAM needs at least one channel".into()));
        }
        if self.heads == 0 || self.d_embed < self.heads || self.d_embed % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_embed {} must be a positive multiple of the head count {}",
                self.d_embed, self.heads
            )));
        }
        if !(2..=3).contains(&self.spatial_rank) {
            return Err(Error::Config(format!("spatial rank must be 2 or 3, got {}", self.spatial_rank)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d_embed / self.heads
    }

    /// Kernel extents of the 3×3(×3) fusion convolution.
    pub fn fusion_kernel(&self) -> Vec<usize> {
        vec![3; self.spatial_rank]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TamParams<T> {
    pub query: ConvParams<T>,
    pub key: ConvParams<T>,
    pub value: ConvParams<T>,
    pub gate: ConvParams<T>,
    pub fusion: ConvParams<T>,
    pub fusion_bn: BatchNormParams<T>,
    pub output: ConvParams<T>,
}

impl<T: Scalar> TamParams<T> {
    pub fn init(rng: &mut impl Rng, cfg: &TamConfig) -> Self {
        let one = vec![1; cfg.spatial_rank];
        let (c, d) = (cfg.channels, cfg.d_embed);
        let mut gate = ConvParams::init(rng, d, d, &one);
        gate.bias = Tensor::zeros(&[d]);
        Self {
            query: ConvParams::init(rng, c, d, &one),
            key: ConvParams::init(rng, c, d, &one),
            value: ConvParams::init(rng, c, d, &one),
            gate,
            fusion: ConvParams::init(rng, c + d, c, &cfg.fusion_kernel()),
            fusion_bn: BatchNormParams::new(c),
            output: ConvParams::init(rng, c, c, &one),
        }
    }
}

impl<T: Scalar> Parameters<T> for TamParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        use ParamKind::*;
        for (w, b, conv) in [
            ("w_q", "b_q", &self.query),
            ("w_k", "b_k", &self.key),
            ("w_v", "b_v", &self.value),
            ("w_g", "b_g", &self.gate),
            ("w_r", "b_r", &self.fusion),
        ] {
            f(&join(prefix, w), &conv.weight, Trainable);
            f(&join(prefix, b), &conv.bias, Trainable);
        }
        f(&join(prefix, "bn_gamma"), &self.fusion_bn.gamma, Trainable);
        f(&join(prefix, "bn_beta"), &self.fusion_bn.beta, Trainable);
        f(&join(prefix, "bn_running_mean"), &self.fusion_bn.running_mean, Buffer);
        f(&join(prefix, "bn_running_var"), &self.fusion_bn.running_var, Buffer);
        f(&join(prefix, "w_o"), &self.output.weight, Trainable);
        f(&join(prefix, "b_o"), &self.output.bias, Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        use ParamKind::*;
        for (w, b, conv) in [
            ("w_q", "b_q", &mut self.query),
            ("w_k", "b_k", &mut self.key),
            ("w_v", "b_v", &mut self.value),
            ("w_g", "b_g", &mut self.gate),
            ("w_r", "b_r", &mut self.fusion),
        ] {
            f(&join(prefix, w), &mut conv.weight, Trainable);
            f(&join(prefix, b), &mut conv.bias, Trainable);
        }
        f(&join(prefix, "bn_gamma"), &mut self.fusion_bn.gamma, Trainable);
        f(&join(prefix, "bn_beta"), &mut self.fusion_bn.beta, Trainable);
        f(&join(prefix, "bn_running_mean"), &mut self.fusion_bn.running_mean, Buffer);
        f(&join(prefix, "bn_running_var"), &mut self.fusion_bn.running_var, Buffer);
        f(&join(prefix, "w_o"), &mut self.output.weight, Trainable);
        f(&join(prefix, "b_o"), &mut self.output.bias, Trainable);
    }
}

impl<T: Scalar> HasBatchNorms<T> for TamParams<T> {
    fn batch_norm_mut(&mut self, running_mean_name: &str) -> Option<&mut BatchNormParams<T>> {
        (running_mean_name == "bn_running_mean").then_some(&mut self.fusion_bn)
    }
}

impl<T: Scalar> TamParams<T> {
    /// Writes a bundle whose manifest header carries the module configuration.
    pub fn save(&self, path: &Path, cfg: &TamConfig) -> Result<()> {
        let header = serde_json::json!({ "kind": "tam", "config": cfg });
        to_bundle(self, header).save(path)
    }

    pub fn load(path: &Path) -> Result<(TamConfig, Self)> {
        let bundle = Bundle::load(path)?;
        let format_err = |msg: String| Error::Format {
            path: path.into(),
            msg,
        };
        if bundle.header.get("kind").and_then(|k| k.as_str()) != Some("tam") {
            return Err(format_err("not a TAM bundle".into()));
        }
        let cfg: TamConfig = serde_json::from_value(bundle.header["config"].clone()).map_err(|e| format_err(e.to_string()))?;
        cfg.validate()?;
        let mut params = Self::init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0), &cfg);
        load_bundle(&mut params, &bundle)?;
        Ok((cfg, params))
    }
}

/// Ordered per-frame feature maps, each `[C, spatial..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    pub frames: Vec<Tensor<T>>,
    /// Normalized cardiac phase of each frame, when known.
    pub frame_times: Option<Vec<f64>>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn new(frames: Vec<Tensor<T>>) -> Result<Self> {
        let stack = Self {
            frames,
            frame_times: None,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::invalid("feature stack", format!("needs T >= 2 frames, got {}", self.frames.len())));
        }
        let first = self.frames[0].shape();
        if let Some(bad) = self.frames.iter().find(|f| f.shape() != first) {
            return Err(Error::shape("feature stack", first, bad.shape()));
        }
        if let Some(times) = &self.frame_times {
            if times.len() != self.frames.len() || times.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::invalid("feature stack", "frame times must be one phase in [0,1] per frame"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Softmax weights of one head for one ordered frame pair, `[N_query, N_key]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMap {
    pub target: usize,
    pub source: usize,
    pub head: usize,
    pub weights: Var,
}

pub struct TamOutput {
    pub frames: Vec<Var>,
    pub attention: Vec<AttentionMap>,
}

fn check_frame<T: Scalar>(tape: &Tape<T>, f: Var, cfg: &TamConfig) -> Result<()> {
    let s = tape.shape(f);
    if s.len() != cfg.spatial_rank + 1 {
        return Err(Error::invalid(
            "tam",
            format!("expected [C, {} spatial axes], got {s:?}", cfg.spatial_rank),
        ));
    }
    if s[0] != cfg.channels {
        return Err(Error::shape("tam channels", s, &[cfg.channels]));
    }
    Ok(())
}

/// Projects one frame to `(Q, K, V)`, each `[d_embed, N]`.
pub fn project_qkv<T: Scalar>(s: &mut Session<T>, frame: Var, params: &TamParams<T>, cfg: &TamConfig) -> Result<(Var, Var, Var)> {
    check_frame(&s.tape, frame, cfg)?;
    let n = numel(&s.tape.shape(frame)[1..]);
    let mut project = |conv: &ConvParams<T>| -> Result<Var> {
        let y = s.conv(frame, conv, Padding::Valid)?;
        s.tape.reshape(y, &[cfg.d_embed, n])
    };
    Ok((project(&params.query)?, project(&params.key)?, project(&params.value)?))
}

/// Reshapes `[d_embed, N]` into `[heads, d_embed/heads, N]`; head `h` owns rows
/// `h·w .. (h+1)·w`.
pub fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || heads == 0 || s[0] % heads != 0 {
        return Err(Error::invalid("split_heads", format!("cannot split {s:?} into {heads} heads")));
    }
    tape.reshape(x, &[heads, s[0] / heads, s[1]])
}

/// Head `h` of a split tensor as `[d_embed/heads, N]`.
pub fn head<T: Scalar>(tape: &mut Tape<T>, split: Var, h: usize) -> Result<Var> {
    let s = tape.shape(split).to_vec();
    let one = tape.narrow(split, 0, h, 1)?;
    tape.reshape(one, &[s[1], s[2]])
}

/// Inverse of [`split_heads`]: `[heads, w, N]` back to `[heads·w, N]`.
pub fn merge_heads<T: Scalar>(tape: &mut Tape<T>, split: Var) -> Result<Var> {
    let s = tape.shape(split).to_vec();
    tape.reshape(split, &[s[0] * s[1], s[2]])
}

/// Scaled query-key logits `[N_query, N_key]` of one head.
pub fn attention_logits<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[0] != sk[0] {
        return Err(Error::shape("cross_time_attention", &sq, &sk));
    }
    let qt = tape.transpose(q)?;
    let raw = tape.matmul(qt, k)?;
    let scale = T::ONE / T::from_f64(sq[0] as f64).sqrt();
    Ok(tape.scale(raw, scale))
}

/// One head of cross-time attention. Returns the attended values `[w, N_query]`
/// and the weights `[N_query, N_key]`.
pub fn cross_time_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    if tape.shape(k) != tape.shape(v) {
        return Err(Error::shape("cross_time_attention", tape.shape(k), tape.shape(v)));
    }
    let logits = attention_logits(tape, q, k)?;
    let weights = tape.softmax(logits, 1)?;
    // out[:, p] = Σ_q weights[p, q] · V[:, q]
    let wt = tape.transpose(weights)?;
    let out = tape.matmul(v, wt)?;
    Ok((out, weights))
}

/// Self-gating and residual fusion of target features `[C, sp..]` with the
/// multi-head attention summary `[d_embed, sp..]`.
pub fn gate_and_fuse<T: Scalar>(s: &mut Session<T>, target: Var, attended: Var, params: &TamParams<T>) -> Result<Var> {
    let (st, sa) = (s.tape.shape(target).to_vec(), s.tape.shape(attended).to_vec());
    if st.len() != sa.len() || st[1..] != sa[1..] {
        return Err(Error::shape("gate_and_fuse", &st, &sa));
    }
    let gate_logits = s.conv(attended, &params.gate, Padding::Valid)?;
    let gate = s.tape.sigmoid(gate_logits);
    let gated = s.tape.mul(attended, gate)?;
    let combined = s.tape.concat(&[target, gated], 0)?;
    let fused = s.conv(combined, &params.fusion, Padding::Same)?;
    let normed = s.batch_norm(fused, &params.fusion_bn)?;
    Ok(s.tape.relu(normed))
}

/// Full module forward: `T` feature maps in, `T` refined maps of identical shape out.
pub fn tam_forward<T: Scalar>(s: &mut Session<T>, frames: &[Var], params: &TamParams<T>, cfg: &TamConfig) -> Result<TamOutput> {
    cfg.validate()?;
    let t = frames.len();
    if t < 2 {
        return Err(Error::invalid("tam_forward", format!("needs T >= 2 frames, got {t}")));
    }
    let shape = s.tape.shape(frames[0]).to_vec();
    for &f in frames {
        check_frame(&s.tape, f, cfg)?;
        if s.tape.shape(f) != shape.as_slice() {
            return Err(Error::shape("tam_forward", &shape, s.tape.shape(f)));
        }
    }
    let n = numel(&shape[1..]);
    if n > MAX_POSITIONS {
        return Err(Error::invalid(
            "tam_forward",
            format!("{n} spatial positions exceed the attention limit of {MAX_POSITIONS}; insert TAM at a coarser level"),
        ));
    }
    let mut attended_shape = shape.clone();
    attended_shape[0] = cfg.d_embed;

    let mut queries = Vec::with_capacity(t);
    let mut keys = Vec::with_capacity(t);
    let mut values = Vec::with_capacity(t);
    for &f in frames {
        let (q, k, v) = project_qkv(s, f, params, cfg)?;
        queries.push(split_heads(&mut s.tape, q, cfg.heads)?);
        keys.push(split_heads(&mut s.tape, k, cfg.heads)?);
        values.push(split_heads(&mut s.tape, v, cfg.heads)?);
    }
    let heads_of = |tape: &mut Tape<T>, split: Var| -> Result<Vec<Var>> { (0..cfg.heads).map(|h| head(tape, split, h)).collect() };
    let mut q_heads = Vec::with_capacity(t);
    let mut k_heads = Vec::with_capacity(t);
    let mut v_heads = Vec::with_capacity(t);
    for i in 0..t {
        q_heads.push(heads_of(&mut s.tape, queries[i])?);
        k_heads.push(heads_of(&mut s.tape, keys[i])?);
        v_heads.push(heads_of(&mut s.tape, values[i])?);
    }

    let mut out = Vec::with_capacity(t);
    let mut attention = Vec::new();
    let inv = T::ONE / T::from_f64((t - 1) as f64);
    for i in 0..t {
        let mut total: Option<Var> = None;
        for j in (0..t).filter(|&j| j != i) {
            let mut per_head = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (a, w) = cross_time_attention(&mut s.tape, q_heads[i][h], k_heads[j][h], v_heads[j][h])?;
                attention.push(AttentionMap {
                    target: i,
                    source: j,
                    head: h,
                    weights: w,
                });
                per_head.push(a);
            }
            let multi = s.tape.concat(&per_head, 0)?;
            let multi = s.tape.reshape(multi, &attended_shape)?;
            let fused = gate_and_fuse(s, frames[i], multi, params)?;
            total = Some(match total {
                None => fused,
                Some(acc) => s.tape.add(acc, fused)?,
            });
        }
        let avg = s.tape.scale(total.expect("T >= 2"), inv);
        out.push(s.conv(avg, &params.output, Padding::Valid)?);
    }
    Ok(TamOutput { frames: out, attention })
}

/// Convenience wrapper: runs the module on plain tensors in inference mode.
pub fn apply<T: Scalar>(stack: &FeatureStack<T>, params: &TamParams<T>, cfg: &TamConfig) -> Result<FeatureStack<T>> {
    stack.validate()?;
    let mut s = Session::eval();
    let vars: Vec<Var> = stack.frames.iter().map(|f| s.input(f.clone())).collect();
    let out = tam_forward(&mut s, &vars, params, cfg)?;
    Ok(FeatureStack {
        frames: out.frames.iter().map(|&v| s.tape.value(v).clone()).collect(),
        frame_times: stack.frame_times.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(TamConfig::new(8, 3, 2).is_err());
        assert!(TamConfig::new(8, 0, 2).is_err());
        assert!(TamConfig::new(8, 8, 4).is_err());
        assert!(TamConfig::new(8, 4, 2).unwrap().with_d_embed(2).is_err());
        assert_eq!(TamConfig::new(8, 4, 3).unwrap().head_width(), 2);
    }

    #[test]
    fn identity_query_projection_flattens_features() {
        let cfg = TamConfig::new(3, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = TamParams::<f64>::init(&mut rng, &cfg);
        p.query.weight = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        p.query.bias = Tensor::zeros(&[3]);
        let f = rand_tensor(&mut rng, &[3, 2, 5]);
        let mut s = Session::eval();
        let fv = s.input(f.clone());
        let (q, _, _) = project_qkv(&mut s, fv, &p, &cfg).unwrap();
        assert_eq!(s.tape.shape(q), &[3, 10]);
        assert_eq!(s.tape.value(q).data(), f.data());
    }

    #[test]
    fn projection_shapes_and_per_position_matvec() {
        let cfg = TamConfig::new(8, 4, 2).unwrap().with_d_embed(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = TamParams::<f64>::init(&mut rng, &cfg);
        let f = rand_tensor(&mut rng, &[8, 4, 4]);
        let mut s = Session::eval();
        let fv = s.input(f.clone());
        let (q, k, v) = project_qkv(&mut s, fv, &p, &cfg).unwrap();
        for var in [q, k, v] {
            assert_eq!(s.tape.shape(var), &[16, 16]);
        }
        let qv = s.tape.value(q);
        let w = p.query.weight.data();
        for pos in 0..16 {
            for row in 0..16 {
                let mut expect = p.query.bias.data()[row];
                for c in 0..8 {
                    expect += w[row * 8 + c] * f.data()[c * 16 + pos];
                }
                assert!((qv.at(&[row, pos]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let cfg = TamConfig::new(4, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = TamParams::<f64>::init(&mut rng, &cfg);
        let mut s = Session::eval();
        let fv = s.input(Tensor::zeros(&[3, 2, 2]));
        assert!(project_qkv(&mut s, fv, &p, &cfg).is_err());
    }

    #[test]
    fn split_heads_maps_contiguous_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[4, 3], |i| i as f64));
        let split = split_heads(&mut tape, x, 2).unwrap();
        let h0 = head(&mut tape, split, 0).unwrap();
        let h1 = head(&mut tape, split, 1).unwrap();
        assert_eq!(tape.value(h0).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(tape.value(h1).data(), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        let one = split_heads(&mut tape, x, 1).unwrap();
        let only = head(&mut tape, one, 0).unwrap();
        assert_eq!(tape.value(only), tape.value(x));
        let merged = merge_heads(&mut tape, split).unwrap();
        assert_eq!(tape.value(merged), tape.value(x));
        assert!(split_heads(&mut tape, x, 3).is_err());
    }

    #[test]
    fn single_key_position_copies_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[2, 1], &[0.3, -2.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[2, 1], &[1.5, 0.2]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[2, 1], &[7.0, -1.0]).unwrap());
        let (out, w) = cross_time_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(out).data(), &[7.0, -1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(rand_tensor(&mut rng, &[3, 5]));
        let k = tape.constant(Tensor::from_fn(&[3, 5], |i| [0.4, -1.0, 2.0][i / 5]));
        let vt = rand_tensor(&mut rng, &[3, 5]);
        let v = tape.constant(vt.clone());
        let (out, w) = cross_time_attention(&mut tape, q, k, v).unwrap();
        assert!(tape.value(w).data().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        for r in 0..3 {
            let mean: f64 = (0..5).map(|c| vt.at(&[r, c])).sum::<f64>() / 5.0;
            for p in 0..5 {
                assert!((tape.value(out).at(&[r, p]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_position_attention_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (qt, kt, vt) = (rand_tensor(&mut rng, &[2, 2]), rand_tensor(&mut rng, &[2, 2]), rand_tensor(&mut rng, &[2, 2]));
        let mut tape = Tape::<f64>::new();
        let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
        let (out, w) = cross_time_attention(&mut tape, q, k, v).unwrap();
        let scale = 1.0 / 2f64.sqrt();
        for p in 0..2 {
            let l: Vec<f64> = (0..2)
                .map(|j| (qt.at(&[0, p]) * kt.at(&[0, j]) + qt.at(&[1, p]) * kt.at(&[1, j])) * scale)
                .collect();
            let w0 = 1.0 / (1.0 + (l[1] - l[0]).exp());
            let w1 = 1.0 - w0;
            assert!((tape.value(w).at(&[p, 0]) - w0).abs() < 1e-12);
            assert!((tape.value(w).at(&[p, 1]) - w1).abs() < 1e-12);
            for r in 0..2 {
                let expect = w0 * vt.at(&[r, 0]) + w1 * vt.at(&[r, 1]);
                assert!((tape.value(out).at(&[r, p]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logits_scale_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (qt, kt) = (rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[4, 6]));
        let s = 3.0;
        let mut tape = Tape::<f64>::new();
        let (q, k) = (tape.constant(qt.clone()), tape.constant(kt.clone()));
        let base = attention_logits(&mut tape, q, k).unwrap();
        let (q2, k2) = (tape.constant(qt.map(|x| x * s)), tape.constant(kt.map(|x| x * s)));
        let scaled = attention_logits(&mut tape, q2, k2).unwrap();
        let expect = tape.value(base).map(|x| x * s * s);
        assert!(tape.value(scaled).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn gate_values_are_sigmoid_of_pointwise_conv() {
        let cfg = TamConfig::new(4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = TamParams::<f64>::init(&mut rng, &cfg);
        let a = rand_tensor(&mut rng, &[4, 3, 3]);
        let mut s = Session::eval();
        let av = s.input(a.clone());
        let g = s.conv(av, &p.gate, Padding::Valid).unwrap();
        let g = s.tape.sigmoid(g);
        let gate = s.tape.value(g);
        let w = p.gate.weight.data();
        for pos in 0..9 {
            for r in 0..4 {
                let mut z = p.gate.bias.data()[r];
                for c in 0..4 {
                    z += w[r * 4 + c] * a.data()[c * 9 + pos];
                }
                assert!((gate.data()[r * 9 + pos] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
            }
        }
    }

    fn fuse_with(gate_bias: f64, attended: &Tensor<f64>) -> Tensor<f64> {
        let cfg = TamConfig::new(4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = TamParams::<f64>::init(&mut rng, &cfg);
        p.gate.bias = Tensor::full(&[4], gate_bias);
        let f = rand_tensor(&mut rng, &[4, 3, 3]);
        let mut s = Session::eval();
        let (fv, av) = (s.input(f), s.input(attended.clone()));
        let out = gate_and_fuse(&mut s, fv, av, &p).unwrap();
        s.tape.value(out).clone()
    }

    #[test]
    fn open_gate_passes_attention_and_closed_gate_blocks_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_tensor(&mut rng, &[4, 3, 3]);
        let zero = Tensor::zeros(&[4, 3, 3]);
        // closed: output ignores the attention summary
        let closed = fuse_with(-60.0, &a);
        assert!(closed.max_abs_diff(&fuse_with(-60.0, &zero)) < 1e-12);
        // open: the summary passes through ungated, so it differs from zero input
        let open = fuse_with(60.0, &a);
        assert!(open.max_abs_diff(&fuse_with(60.0, &zero)) > 1e-3);
    }

    #[test]
    fn spatial_mismatch_in_fusion() {
        let cfg = TamConfig::new(4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = TamParams::<f64>::init(&mut rng, &cfg);
        let mut s = Session::eval();
        let f = s.input(Tensor::zeros(&[4, 3, 3]));
        let a = s.input(Tensor::zeros(&[4, 3, 2]));
        assert!(gate_and_fuse(&mut s, f, a, &p).is_err());
    }

    #[test]
    fn forward_rejects_single_frame_and_oversized_grids() {
        let cfg = TamConfig::new(2, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = TamParams::<f64>::init(&mut rng, &cfg);
        let mut s = Session::eval();
        let f = s.input(Tensor::zeros(&[2, 2, 2]));
        assert!(tam_forward(&mut s, &[f], &p, &cfg).is_err());
        let big = s.input(Tensor::zeros(&[2, 65, 64]));
        let err = tam_forward(&mut s, &[big, big], &p, &cfg).err().unwrap();
        assert!(err.to_string().contains("4096"));
    }

    #[test]
    fn parameter_names_follow_manifest_convention() {
        let cfg = TamConfig::new(4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = TamParams::<f32>::init(&mut rng, &cfg);
        let names: Vec<String> = p.named().keys().cloned().collect();
        assert_eq!(names.first().unwrap(), "w_q");
        assert_eq!(names.last().unwrap(), "b_o");
        assert!(p.gate.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn target_output_depends_on_other_frames() {
        let cfg = TamConfig::new(4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = TamParams::<f64>::init(&mut rng, &cfg);
        let f0 = rand_tensor(&mut rng, &[4, 3, 3]);
        let a = FeatureStack::new(vec![f0.clone(), rand_tensor(&mut rng, &[4, 3, 3])]).unwrap();
        let b = FeatureStack::new(vec![f0, rand_tensor(&mut rng, &[4, 3, 3])]).unwrap();
        let (ya, yb) = (apply(&a, &p, &cfg).unwrap(), apply(&b, &p, &cfg).unwrap());
        let d = ya.frames[0].max_abs_diff(&yb.frames[0]);
        assert!(d > 1e-6, "{d}");
    }

    #[test]
    fn bundle_roundtrip_restores_outputs() {
        let cfg = TamConfig::new(4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = TamParams::<f64>::init(&mut rng, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tam.tnsb");
        p.save(&path, &cfg).unwrap();
        let (cfg2, p2) = TamParams::<f64>::load(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p2, p);
        let stack = FeatureStack::new(vec![rand_tensor(&mut rng, &[4, 2, 2]), rand_tensor(&mut rng, &[4, 2, 2])]).unwrap();
        let a = apply(&stack, &p, &cfg).unwrap();
        let b = apply(&stack, &p2, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
