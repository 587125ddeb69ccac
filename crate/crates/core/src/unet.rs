//! Configurable UNet backbone with temporal attention insertion slots.
//!
//! Level `l` of the encoder (1-based, `L` levels) runs `2×(conv3 → BN → ReLU)`
//! and is followed by a 2× max-pool before level `l+1`; level `L` is the
//! bottleneck. Decoder level `l` (from `L−1` down to 1) upsamples 2× with
//! nearest neighbours, applies `conv3 → BN → ReLU`, concatenates the encoder
//! skip of level `l` and runs another two-conv block. A 1×1 head produces class
//! logits.
//!
//! All `T` frames share the backbone weights. Slot `E_l` refines the encoder
//! output of level `l` across frames before it is pooled and used as a skip;
//! slot `D_l` refines the upsampled decoder features of level `l` before the
//! skip concatenation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::params::{join, load_bundle, to_bundle, BatchNormParams, ConvParams, HasBatchNorms, ParamKind, Parameters, Session};
use crate::tam::{tam_forward, TamConfig, TamParams};
use crate::tensor::{Scalar, Tensor};
use crate::tnsr::Bundle;

pub const MIN_FRAMES: usize = 2;
pub const MAX_FRAMES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    E3,
    E4,
    E5,
    D3,
    D4,
}

impl Slot {
    pub const ALL: [Slot; 5] = [Slot::E3, Slot::E4, Slot::E5, Slot::D3, Slot::D4];

    pub fn level(self) -> usize {
        match self {
            Slot::E3 | Slot::D3 => 3,
            Slot::E4 | Slot::D4 => 4,
            Slot::E5 => 5,
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Slot::E3 | Slot::E4 | Slot::E5)
    }

    fn encoder(level: usize) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.is_encoder() && s.level() == level)
    }

    fn decoder(level: usize) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| !s.is_encoder() && s.level() == level)
    }

    /// Whether the slot exists in a network with `levels` levels.
    pub fn valid_for(self, levels: usize) -> bool {
        if self.is_encoder() {
            self.level() <= levels
        } else {
            self.level() < levels
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Slot::ALL
            .into_iter()
            .find(|slot| slot.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown insertion slot {s:?}; expected one of E3,E4,E5,D3,D4")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConfigId {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
    C9,
    C10,
    C11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Frames processed independently.
    Baseline,
    /// Time stacked as an extra convolution axis.
    TemporalConv,
    /// Frame-parallel backbone with TAM slots.
    Tam,
}

impl ConfigId {
    pub const ALL: [ConfigId; 11] = [
        ConfigId::C1,
        ConfigId::C2,
        ConfigId::C3,
        ConfigId::C4,
        ConfigId::C5,
        ConfigId::C6,
        ConfigId::C7,
        ConfigId::C8,
        ConfigId::C9,
        ConfigId::C10,
        ConfigId::C11,
    ];

    pub fn family(self) -> Family {
        match self {
            ConfigId::C1 => Family::Baseline,
            ConfigId::C2 => Family::TemporalConv,
            _ => Family::Tam,
        }
    }

    pub fn insertion_set(self) -> BTreeSet<Slot> {
        use Slot::*;
        let slots: &[Slot] = match self {
            ConfigId::C1 | ConfigId::C2 => &[],
            ConfigId::C3 => &[E5],
            ConfigId::C4 => &[E4, E5],
            ConfigId::C5 => &[E3, E4, E5],
            ConfigId::C6 => &[E5, D4],
            ConfigId::C7 => &[E5, D3, D4],
            ConfigId::C8 => &[E4, E5, D4],
            ConfigId::C9 => &[E4, E5, D3, D4],
            ConfigId::C10 => &[E3, E4, E5, D4],
            ConfigId::C11 => &[E3, E4, E5, D3, D4],
        };
        slots.iter().copied().collect()
    }

    pub fn description(self) -> String {
        match self.family() {
            Family::Baseline => "UNet without motion".into(),
            Family::TemporalConv => "UNet with time as an extra convolution axis".into(),
            Family::Tam => {
                let names: Vec<String> = self.insertion_set().iter().map(Slot::to_string).collect();
                format!("TAM at {}", names.join(", "))
            }
        }
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for ConfigId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConfigId::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown configuration {s:?}; expected C1..C11")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigEntry {
    pub id: ConfigId,
    pub family: Family,
    pub insertion_set: BTreeSet<Slot>,
    pub description: String,
}

/// The eleven named configurations.
pub fn list_configurations() -> Vec<ConfigEntry> {
    ConfigId::ALL
        .into_iter()
        .map(|id| ConfigEntry {
            id,
            family: id.family(),
            insertion_set: id.insertion_set(),
            description: id.description(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub spatial_rank: usize,
    pub in_channels: usize,
    /// Output channels of each level; its length is the number of levels.
    pub channels: Vec<usize>,
    pub classes: usize,
    pub insertion_set: BTreeSet<Slot>,
    pub heads: usize,
    /// Attention width per slot; `None` uses the slot's channel count.
    pub d_embed: Option<usize>,
    /// Extent of the time kernel; set only for the time-as-axis family.
    pub time_kernel: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            spatial_rank: 2,
            in_channels: 1,
            channels: vec![16, 32, 64, 128, 256],
            classes: 3,
            insertion_set: BTreeSet::new(),
            heads: 8,
            d_embed: None,
            time_kernel: None,
        }
    }
}

impl BackboneConfig {
    /// Applies a named configuration on top of the given widths and sizes.
    pub fn for_config(mut self, id: ConfigId) -> Self {
        self.insertion_set = id.insertion_set();
        self.time_kernel = (id.family() == Family::TemporalConv).then_some(3);
        self
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn family(&self) -> Family {
        if self.time_kernel.is_some() {
            Family::TemporalConv
        } else if self.insertion_set.is_empty() {
            Family::Baseline
        } else {
            Family::Tam
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.spatial_rank) {
            return Err(Error::Config(format!("spatial rank must be 2 or 3, got {}", self.spatial_rank)));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 || self.classes == 0 {
            return Err(Error::Config("levels, channels and classes must be positive".into()));
        }
        if let Some(bad) = self.insertion_set.iter().find(|s| !s.valid_for(self.levels())) {
            return Err(Error::Config(format!("slot {bad} does not exist in a {}-level network", self.levels())));
        }
        if let Some(k) = self.time_kernel {
            if k % 2 == 0 {
                return Err(Error::Config(format!("time kernel must be odd, got {k}")));
            }
            if !self.insertion_set.is_empty() {
                return Err(Error::Config("the time-as-axis baseline takes no TAM slots".into()));
            }
            if self.spatial_rank != 2 {
                return Err(Error::Config("the time-as-axis baseline supports 2D frames only".into()));
            }
        }
        for &slot in &self.insertion_set {
            self.tam_config(slot)?;
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.channels[level - 1]
    }

    pub fn tam_config(&self, slot: Slot) -> Result<TamConfig> {
        let c = self.level_channels(slot.level());
        TamConfig::new(c, self.heads.min(c), self.spatial_rank)?.with_d_embed(self.d_embed.unwrap_or(c))
    }

    /// Kernel extents of the 3×3(×3) convolutions, with time leading when present.
    pub fn kernel(&self, k: usize) -> Vec<usize> {
        let mut shape = Vec::new();
        if let Some(kt) = self.time_kernel {
            shape.push(if k == 1 { 1 } else { kt });
        }
        shape.extend(std::iter::repeat(k).take(self.spatial_rank));
        shape
    }

    /// Pool/upsample factors, with time left untouched.
    fn factors(&self) -> Vec<usize> {
        let mut f = Vec::new();
        if self.time_kernel.is_some() {
            f.push(1);
        }
        f.extend(std::iter::repeat(2).take(self.spatial_rank));
        f
    }

    /// Checks frame spatial extents and the frame count.
    pub fn check_input(&self, frames: usize, spatial: &[usize]) -> Result<()> {
        if !(MIN_FRAMES..=MAX_FRAMES).contains(&frames) {
            return Err(Error::invalid(
                "backbone_forward",
                format!("T must be in [{MIN_FRAMES},{MAX_FRAMES}], got {frames}"),
            ));
        }
        if spatial.len() != self.spatial_rank {
            return Err(Error::invalid(
                "backbone_forward",
                format!("expected {} spatial axes, got {spatial:?}", self.spatial_rank),
            ));
        }
        let div = 1usize << (self.levels() - 1);
        if spatial.iter().any(|&e| e == 0 || e % div != 0) {
            return Err(Error::invalid(
                "backbone_forward",
                format!("spatial extents {spatial:?} must be divisible by {div}"),
            ));
        }
        Ok(())
    }
}

/// `2×(conv3 → BN → ReLU)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv1: ConvParams<T>,
    pub bn1: BatchNormParams<T>,
    pub conv2: ConvParams<T>,
    pub bn2: BatchNormParams<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn init(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: &[usize]) -> Self {
        Self {
            conv1: ConvParams::init(rng, c_in, c_out, kernel),
            bn1: BatchNormParams::new(c_out),
            conv2: ConvParams::init(rng, c_out, c_out, kernel),
            bn2: BatchNormParams::new(c_out),
        }
    }

    fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let x = conv_bn_relu(s, x, &self.conv1, &self.bn1)?;
        conv_bn_relu(s, x, &self.conv2, &self.bn2)
    }
}

impl<T: Scalar> Parameters<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

/// Upsample followed by `conv3 → BN → ReLU`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock<T> {
    pub conv: ConvParams<T>,
    pub bn: BatchNormParams<T>,
}

impl<T: Scalar> Parameters<T> for UpBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

fn conv_bn_relu<T: Scalar>(s: &mut Session<T>, x: Var, conv: &ConvParams<T>, bn: &BatchNormParams<T>) -> Result<Var> {
    let y = s.conv(x, conv, Padding::Same)?;
    let y = s.batch_norm(y, bn)?;
    Ok(s.tape.relu(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T> {
    /// Index `l-1` holds encoder level `l`.
    pub encoder: Vec<ConvBlock<T>>,
    /// Index `l-1` holds decoder level `l`, for `l` in `1..L`.
    pub up: Vec<UpBlock<T>>,
    pub decoder: Vec<ConvBlock<T>>,
    pub head: ConvParams<T>,
    pub tams: BTreeMap<Slot, TamParams<T>>,
}

impl<T: Scalar> UNetParams<T> {
    pub fn init(rng: &mut impl Rng, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let k3 = cfg.kernel(3);
        let mut encoder = Vec::new();
        let mut c_prev = cfg.in_channels;
        for &c in &cfg.channels {
            encoder.push(ConvBlock::init(rng, c_prev, c, &k3));
            c_prev = c;
        }
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 1..cfg.levels() {
            let (c, below) = (cfg.level_channels(l), cfg.level_channels(l + 1));
            up.push(UpBlock {
                conv: ConvParams::init(rng, below, c, &k3),
                bn: BatchNormParams::new(c),
            });
            decoder.push(ConvBlock::init(rng, 2 * c, c, &k3));
        }
        let head = ConvParams::init(rng, cfg.channels[0], cfg.classes, &cfg.kernel(1));
        let mut tams = BTreeMap::new();
        for &slot in &cfg.insertion_set {
            tams.insert(slot, TamParams::init(rng, &cfg.tam_config(slot)?));
        }
        Ok(Self {
            encoder,
            up,
            decoder,
            head,
            tams,
        })
    }

    pub fn seeded(seed: u64, cfg: &BackboneConfig) -> Result<Self> {
        Self::init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), cfg)
    }

    pub fn save(&self, path: &Path, header: serde_json::Value) -> Result<()> {
        to_bundle(self, header).save(path)
    }

    /// Loads parameters for `cfg` from a bundle, checking every name and shape.
    pub fn load(path: &Path, cfg: &BackboneConfig) -> Result<(serde_json::Value, Self)> {
        let bundle = Bundle::load(path)?;
        let mut params = Self::seeded(0, cfg)?;
        load_bundle(&mut params, &bundle)?;
        Ok((bundle.header, params))
    }
}

impl<T: Scalar> Parameters<T> for UNetParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder{}", i + 1)), f);
        }
        for (i, (u, d)) in self.up.iter().zip(&self.decoder).enumerate() {
            u.visit(&join(prefix, &format!("up{}", i + 1)), f);
            d.visit(&join(prefix, &format!("decoder{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
        for (slot, t) in &self.tams {
            t.visit(&join(prefix, &format!("tam_{slot}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder{}", i + 1)), f);
        }
        for (i, (u, d)) in self.up.iter_mut().zip(&mut self.decoder).enumerate() {
            u.visit_mut(&join(prefix, &format!("up{}", i + 1)), f);
            d.visit_mut(&join(prefix, &format!("decoder{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
        for (slot, t) in &mut self.tams {
            t.visit_mut(&join(prefix, &format!("tam_{slot}")), f);
        }
    }
}

impl<T: Scalar> HasBatchNorms<T> for UNetParams<T> {
    fn batch_norm_mut(&mut self, name: &str) -> Option<&mut BatchNormParams<T>> {
        let (owner, rest) = name.split_once('.')?;
        if let Some(slot) = owner.strip_prefix("tam_") {
            return self.tams.get_mut(&slot.parse().ok()?)?.batch_norm_mut(rest);
        }
        let index = |p: &str| owner.strip_prefix(p).and_then(|n| n.parse::<usize>().ok()).filter(|&n| n >= 1);
        if let Some(i) = index("encoder") {
            return block_bn(self.encoder.get_mut(i - 1)?, rest);
        }
        if let Some(i) = index("decoder") {
            return block_bn(self.decoder.get_mut(i - 1)?, rest);
        }
        if let Some(i) = index("up") {
            return (rest == "bn.running_mean").then_some(&mut self.up.get_mut(i - 1)?.bn);
        }
        None
    }
}

fn block_bn<'a, T>(b: &'a mut ConvBlock<T>, rest: &str) -> Option<&'a mut BatchNormParams<T>> {
    match rest {
        "bn1.running_mean" => Some(&mut b.bn1),
        "bn2.running_mean" => Some(&mut b.bn2),
        _ => None,
    }
}

/// Per-frame class logits `[classes, spatial..]` of the frame-parallel backbone.
/// `frames` are `[in_channels, spatial..]` each.
pub fn backbone_logits<T: Scalar>(s: &mut Session<T>, frames: &[Var], cfg: &BackboneConfig, params: &UNetParams<T>) -> Result<Vec<Var>> {
    cfg.validate()?;
    if cfg.time_kernel.is_some() {
        return Err(Error::Config("use temporal_conv_baseline for the time-as-axis family".into()));
    }
    let shape = frames
        .first()
        .map(|&f| s.tape.shape(f).to_vec())
        .ok_or_else(|| Error::invalid("backbone_forward", "no frames"))?;
    cfg.check_input(frames.len(), &shape[1..])?;
    if shape[0] != cfg.in_channels {
        return Err(Error::shape("backbone_forward", &shape, &[cfg.in_channels]));
    }
    for &f in frames {
        if s.tape.shape(f) != shape.as_slice() {
            return Err(Error::shape("backbone_forward", &shape, s.tape.shape(f)));
        }
    }
    let window = cfg.factors();
    let levels = cfg.levels();

    let mut x: Vec<Var> = frames.to_vec();
    let mut skips: Vec<Vec<Var>> = Vec::with_capacity(levels);
    for l in 1..=levels {
        let block = &params.encoder[l - 1];
        x = x
            .into_iter()
            .map(|xi| {
                let xi = if l > 1 { s.tape.max_pool(xi, &window)? } else { xi };
                block.forward(s, xi)
            })
            .collect::<Result<_>>()?;
        if let Some(slot) = Slot::encoder(l).filter(|sl| cfg.insertion_set.contains(sl)) {
            x = refine(s, &x, cfg, params, slot)?;
        }
        skips.push(x.clone());
    }
    for l in (1..levels).rev() {
        let up = &params.up[l - 1];
        x = x
            .into_iter()
            .map(|xi| {
                let xi = s.tape.upsample_nearest(xi, &window)?;
                conv_bn_relu(s, xi, &up.conv, &up.bn)
            })
            .collect::<Result<_>>()?;
        if let Some(slot) = Slot::decoder(l).filter(|sl| cfg.insertion_set.contains(sl)) {
            x = refine(s, &x, cfg, params, slot)?;
        }
        let block = &params.decoder[l - 1];
        x = x
            .into_iter()
            .zip(&skips[l - 1])
            .map(|(xi, &skip)| {
                let cat = s.tape.concat(&[xi, skip], 0)?;
                block.forward(s, cat)
            })
            .collect::<Result<_>>()?;
    }
    x.into_iter().map(|xi| s.conv(xi, &params.head, Padding::Valid)).collect()
}

fn refine<T: Scalar>(s: &mut Session<T>, x: &[Var], cfg: &BackboneConfig, params: &UNetParams<T>, slot: Slot) -> Result<Vec<Var>> {
    let tam = params
        .tams
        .get(&slot)
        .ok_or_else(|| Error::Config(format!("parameters for slot {slot} are missing")))?;
    Ok(tam_forward(s, x, tam, &cfg.tam_config(slot)?)?.frames)
}

/// Per-frame class-probability maps (softmax over the class axis).
pub fn backbone_forward<T: Scalar>(s: &mut Session<T>, frames: &[Var], cfg: &BackboneConfig, params: &UNetParams<T>) -> Result<Vec<Var>> {
    let logits = backbone_logits(s, frames, cfg, params)?;
    logits.into_iter().map(|l| s.tape.softmax(l, 0)).collect()
}

/// Per-frame logits of the time-as-axis baseline. `frames` are
/// `[in_channels, H, W]` each and are stacked into `[in_channels, T, H, W]`.
pub fn temporal_conv_logits<T: Scalar>(s: &mut Session<T>, frames: &[Var], cfg: &BackboneConfig, params: &UNetParams<T>) -> Result<Vec<Var>> {
    cfg.validate()?;
    if cfg.time_kernel.is_none() {
        return Err(Error::Config("configuration has no time kernel".into()));
    }
    let shape = frames
        .first()
        .map(|&f| s.tape.shape(f).to_vec())
        .ok_or_else(|| Error::invalid("temporal_conv_baseline", "no frames"))?;
    cfg.check_input(frames.len(), &shape[1..])?;
    if shape[0] != cfg.in_channels {
        return Err(Error::shape("temporal_conv_baseline", &shape, &[cfg.in_channels]));
    }
    let mut expanded = Vec::with_capacity(frames.len());
    for &f in frames {
        if s.tape.shape(f) != shape.as_slice() {
            return Err(Error::shape("temporal_conv_baseline", &shape, s.tape.shape(f)));
        }
        let mut with_time = vec![shape[0], 1];
        with_time.extend_from_slice(&shape[1..]);
        expanded.push(s.tape.reshape(f, &with_time)?);
    }
    let stacked = s.tape.concat(&expanded, 1)?;
    let window = cfg.factors();
    let levels = cfg.levels();

    let mut x = stacked;
    let mut skips = Vec::with_capacity(levels);
    for l in 1..=levels {
        if l > 1 {
            x = s.tape.max_pool(x, &window)?;
        }
        x = params.encoder[l - 1].forward(s, x)?;
        skips.push(x);
    }
    for l in (1..levels).rev() {
        let up = &params.up[l - 1];
        x = s.tape.upsample_nearest(x, &window)?;
        x = conv_bn_relu(s, x, &up.conv, &up.bn)?;
        x = s.tape.concat(&[x, skips[l - 1]], 0)?;
        x = params.decoder[l - 1].forward(s, x)?;
    }
    let logits = s.conv(x, &params.head, Padding::Valid)?;
    let mut out_shape = vec![cfg.classes];
    out_shape.extend_from_slice(&shape[1..]);
    (0..frames.len())
        .map(|t| {
            let frame = s.tape.narrow(logits, 1, t, 1)?;
            s.tape.reshape(frame, &out_shape)
        })
        .collect()
}

/// Per-frame class-probability maps of the time-as-axis baseline.
pub fn temporal_conv_baseline<T: Scalar>(s: &mut Session<T>, frames: &[Var], cfg: &BackboneConfig, params: &UNetParams<T>) -> Result<Vec<Var>> {
    let logits = temporal_conv_logits(s, frames, cfg, params)?;
    logits.into_iter().map(|l| s.tape.softmax(l, 0)).collect()
}

/// Dispatches on the configuration family and returns per-frame logits.
pub fn network_logits<T: Scalar>(s: &mut Session<T>, frames: &[Var], cfg: &BackboneConfig, params: &UNetParams<T>) -> Result<Vec<Var>> {
    match cfg.family() {
        Family::TemporalConv => temporal_conv_logits(s, frames, cfg, params),
        _ => backbone_logits(s, frames, cfg, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny(id: ConfigId) -> BackboneConfig {
        BackboneConfig {
            channels: vec![2, 4, 4, 8, 8],
            heads: 2,
            ..Default::default()
        }
        .for_config(id)
    }

    fn frames(seed: u64, t: usize, shape: &[usize]) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))).collect()
    }

    fn run(cfg: &BackboneConfig, params: &UNetParams<f64>, input: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        run_in(Session::eval(), cfg, params, input)
    }

    fn run_in(mut s: Session<f64>, cfg: &BackboneConfig, params: &UNetParams<f64>, input: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let vars: Vec<Var> = input.iter().map(|f| s.input(f.clone())).collect();
        let out = network_logits(&mut s, &vars, cfg, params).unwrap();
        out.iter().map(|&v| s.tape.value(v).clone()).collect()
    }

    #[test]
    fn configuration_table() {
        use Slot::*;
        let table = list_configurations();
        assert_eq!(table.len(), 11);
        assert!(ConfigId::C1.insertion_set().is_empty());
        assert_eq!(ConfigId::C3.insertion_set(), [E5].into());
        assert_eq!(ConfigId::C4.insertion_set(), [E4, E5].into());
        assert_eq!(ConfigId::C7.insertion_set(), [E5, D3, D4].into());
        assert_eq!(ConfigId::C11.insertion_set(), Slot::ALL.into());
        assert_eq!(ConfigId::C2.family(), Family::TemporalConv);
        assert_eq!("c10".parse::<ConfigId>().unwrap(), ConfigId::C10);
        assert!("C12".parse::<ConfigId>().is_err());
    }

    #[test]
    fn slot_validity_depends_on_depth() {
        let mut cfg = BackboneConfig {
            channels: vec![2, 4, 8],
            ..Default::default()
        };
        cfg.insertion_set = [Slot::E3].into();
        assert!(cfg.validate().is_ok());
        cfg.insertion_set = [Slot::D3].into();
        assert!(cfg.validate().is_err());
        cfg.insertion_set = [Slot::E4].into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shape_contract() {
        let cfg = BackboneConfig {
            classes: 4,
            ..tiny(ConfigId::C3)
        };
        let p = UNetParams::seeded(1, &cfg).unwrap();
        let out = run(&cfg, &p, &frames(2, 2, &[1, 32, 32]));
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), &[4, 32, 32]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = tiny(ConfigId::C4);
        let p = UNetParams::seeded(3, &cfg).unwrap();
        let input = frames(4, 3, &[1, 16, 16]);
        let mut s = Session::eval();
        let vars: Vec<Var> = input.iter().map(|f| s.input(f.clone())).collect();
        let probs = backbone_forward(&mut s, &vars, &cfg, &p).unwrap();
        for &pv in &probs {
            let v = s.tape.value(pv);
            let n = 256;
            for pos in 0..n {
                let total: f64 = (0..3).map(|c| v.data()[c * n + pos]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn baseline_frames_are_independent() {
        let cfg = tiny(ConfigId::C1);
        let p = UNetParams::seeded(5, &cfg).unwrap();
        let a = frames(6, 2, &[1, 16, 16]);
        let mut b = a.clone();
        b[1] = b[1].map(|x| 1.0 - x);
        assert_eq!(run(&cfg, &p, &a)[0], run(&cfg, &p, &b)[0]);
        assert_eq!(run_in(Session::train(), &cfg, &p, &a)[0], run_in(Session::train(), &cfg, &p, &b)[0]);
    }

    #[test]
    fn attention_couples_frames() {
        let cfg = tiny(ConfigId::C3);
        let p = UNetParams::seeded(7, &cfg).unwrap();
        let a = frames(8, 2, &[1, 32, 32]);
        let mut b = a.clone();
        b[1] = b[1].map(|x| 1.0 - x);
        // batch statistics keep the untrained deep levels out of the dead-ReLU regime
        let ya = run_in(Session::train(), &cfg, &p, &a);
        let yb = run_in(Session::train(), &cfg, &p, &b);
        assert!(ya[0].max_abs_diff(&yb[0]) > 1e-9);
    }

    #[test]
    fn input_validation() {
        let cfg = tiny(ConfigId::C1);
        let p = UNetParams::<f64>::seeded(9, &cfg).unwrap();
        let mut s = Session::eval();
        let f = s.input(Tensor::zeros(&[1, 24, 16]));
        assert!(backbone_logits(&mut s, &[f, f], &cfg, &p).is_err());
        let g = s.input(Tensor::zeros(&[1, 16, 16]));
        assert!(backbone_logits(&mut s, &[g], &cfg, &p).is_err());
        assert!(backbone_logits(&mut s, &[g; 6], &cfg, &p).is_err());
    }

    #[test]
    fn parameter_counts_grow_with_slots() {
        let count = |id| UNetParams::<f32>::seeded(0, &tiny(id)).unwrap().trainable_count();
        assert!(count(ConfigId::C3) < count(ConfigId::C4));
        assert!(count(ConfigId::C4) < count(ConfigId::C5));
        assert!(count(ConfigId::C1) < count(ConfigId::C2));
    }

    #[test]
    fn temporal_baseline_shapes() {
        let cfg = BackboneConfig {
            classes: 4,
            ..tiny(ConfigId::C2)
        };
        let p = UNetParams::seeded(10, &cfg).unwrap();
        let out = run(&cfg, &p, &frames(11, 2, &[1, 32, 32]));
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].shape(), &[4, 32, 32]);
    }

    #[test]
    fn centre_time_slice_reduces_to_per_frame_model() {
        let cfg3 = tiny(ConfigId::C2);
        let cfg2 = tiny(ConfigId::C1);
        let mut p3 = UNetParams::<f64>::seeded(12, &cfg3).unwrap();
        let mut p2 = UNetParams::<f64>::seeded(13, &cfg2).unwrap();
        let mut slices = indexmap::IndexMap::new();
        p3.visit_mut("", &mut |name, t, _| {
            let s = t.shape().to_vec();
            if s.len() == 5 {
                let plane = s[3] * s[4];
                let mut centre = Vec::new();
                for chunk in t.data_mut().chunks_mut(s[2] * plane) {
                    for (k, v) in chunk.iter_mut().enumerate() {
                        if k / plane == s[2] / 2 {
                            centre.push(*v);
                        } else {
                            *v = 0.0;
                        }
                    }
                }
                slices.insert(name.to_string(), Tensor::new(vec![s[0], s[1], s[3], s[4]], centre).unwrap());
            } else {
                slices.insert(name.to_string(), t.clone());
            }
        });
        p2.load_named(&slices).unwrap();
        let input = frames(14, 3, &[1, 16, 16]);
        let a = run(&cfg3, &p3, &input);
        let b = run(&cfg2, &p2, &input);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_batch_norm_lookup() {
        let cfg = tiny(ConfigId::C6);
        let mut p = UNetParams::<f64>::seeded(15, &cfg).unwrap();
        assert!(p.batch_norm_mut("encoder2.bn1.running_mean").is_some());
        assert!(p.batch_norm_mut("up4.bn.running_mean").is_some());
        assert!(p.batch_norm_mut("tam_D4.bn_running_mean").is_some());
        assert!(p.batch_norm_mut("encoder9.bn1.running_mean").is_none());
        p.encoder[0].bn1.running_mean = Tensor::full(&[2], 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tnsb");
        p.save(&path, serde_json::json!({"config": "C6"})).unwrap();
        let (header, back) = UNetParams::<f64>::load(&path, &cfg).unwrap();
        assert_eq!(header["config"], "C6");
        assert_eq!(back, p);
        assert!(UNetParams::<f64>::load(&path, &tiny(ConfigId::C1)).is_err());
    }

    #[test]
    fn training_statistics_reach_every_layer() {
        let cfg = tiny(ConfigId::C6);
        let mut p = UNetParams::<f64>::seeded(16, &cfg).unwrap();
        let input = frames(17, 2, &[1, 16, 16]);
        let stats = {
            let mut s = Session::train();
            let vars: Vec<Var> = input.iter().map(|f| s.input(f.clone())).collect();
            backbone_logits(&mut s, &vars, &cfg, &p).unwrap();
            s.batch_stats(&p)
        };
        let layers: BTreeSet<&str> = stats.iter().map(|(n, _)| n.as_str()).collect();
        let mut expected = 0;
        p.visit("", &mut |n, _, _| expected += n.ends_with("running_mean") as usize);
        assert_eq!(layers.len(), expected);
        crate::params::apply_batch_stats(&mut p, &stats, 0.1);
        assert!(p.encoder[0].bn1.running_mean.data().iter().any(|&m| m != 0.0));
    }
}
