//! Closed-form multiply-accumulate and parameter counts.
//!
//! FLOPs are reported as `2·MACs`. Only convolutions and attention matrix
//! products enter the totals; normalization, activation, pooling and
//! upsampling work is listed per row as touched elements for information.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tam::TamConfig;
use crate::tensor::numel;
use crate::unet::{BackboneConfig, ConfigId, Family, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvCost {
    pub macs: u64,
    pub params: u64,
}

/// Cost of a `k^rank` convolution with bias producing `out_spatial` positions.
pub fn conv_cost(k: usize, c_in: usize, c_out: usize, out_spatial: &[usize], rank: usize) -> ConvCost {
    conv_cost_kernel(&vec![k; rank], c_in, c_out, out_spatial)
}

/// Cost of a convolution with an arbitrary kernel box.
pub fn conv_cost_kernel(kernel: &[usize], c_in: usize, c_out: usize, out_spatial: &[usize]) -> ConvCost {
    let taps = numel(kernel) as u64;
    ConvCost {
        macs: taps * (c_in * c_out) as u64 * numel(out_spatial) as u64,
        params: taps * (c_in * c_out) as u64 + c_out as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    pub ordered_pairs: u64,
    /// Query-key products plus weighted value sums over all pairs.
    pub macs: u64,
}

/// Attention cost of one slot. Head count splits `d_embed` without changing
/// the total: per pair both products cost `N²·d_embed`.
pub fn attention_cost(d_embed: usize, positions: usize, _heads: usize, frames: usize) -> AttentionCost {
    let pairs = (frames * frames.saturating_sub(1)) as u64;
    AttentionCost {
        ordered_pairs: pairs,
        macs: pairs * 2 * (positions * positions * d_embed) as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    /// Elements touched by excluded operations (norm, activation, resampling).
    pub aux_elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub architecture: String,
    pub frames: usize,
    pub spatial: Vec<usize>,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub total_params: u64,
    pub total_aux_elements: u64,
}

impl CostReport {
    fn new(architecture: String, frames: usize, spatial: &[usize]) -> Self {
        Self {
            architecture,
            frames,
            spatial: spatial.to_vec(),
            rows: Vec::new(),
            total_macs: 0,
            total_flops: 0,
            total_params: 0,
            total_aux_elements: 0,
        }
    }

    fn push(&mut self, name: impl Into<String>, macs: u64, params: u64, aux_elements: u64) {
        self.rows.push(CostRow {
            name: name.into(),
            macs,
            flops: 2 * macs,
            params,
            aux_elements,
        });
        self.total_macs += macs;
        self.total_flops += 2 * macs;
        self.total_params += params;
        self.total_aux_elements += aux_elements;
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{} (T={}, spatial {:?})\n", self.architecture, self.frames, self.spatial);
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        out.push_str(&format!("{:<w$} {:>16} {:>16} {:>12} {:>14}\n", "layer", "MACs", "FLOPs", "params", "aux elements"));
        for r in &self.rows {
            out.push_str(&format!("{:<w$} {:>16} {:>16} {:>12} {:>14}\n", r.name, r.macs, r.flops, r.params, r.aux_elements));
        }
        out.push_str(&format!(
            "{:<w$} {:>16} {:>16} {:>12} {:>14}\n",
            "total", self.total_macs, self.total_flops, self.total_params, self.total_aux_elements
        ));
        out
    }
}

/// Rows of one `conv → BN → ReLU` unit run `times` times.
fn conv_unit(r: &mut CostReport, name: &str, kernel: &[usize], c_in: usize, c_out: usize, out: &[usize], times: u64) {
    let c = conv_cost_kernel(kernel, c_in, c_out, out);
    let elems = (c_out * numel(out)) as u64 * times;
    r.push(format!("{name}.conv"), c.macs * times, c.params, 0);
    r.push(format!("{name}.bn_relu"), 0, 2 * c_out as u64, 2 * elems);
}

/// Rows of one TAM slot on `frames` maps of `spatial` positions each.
pub fn tam_cost(r_name: &str, cfg: &TamConfig, spatial: &[usize], frames: usize) -> Vec<CostRow> {
    let mut r = CostReport::new(String::new(), frames, spatial);
    push_tam(&mut r, r_name, cfg, spatial, frames);
    r.rows
}

fn push_tam(r: &mut CostReport, name: &str, cfg: &TamConfig, spatial: &[usize], frames: usize) {
    let (c, d) = (cfg.channels, cfg.d_embed);
    let n = numel(spatial);
    let t = frames as u64;
    let pairs = t * t.saturating_sub(1);
    let one = vec![1; cfg.spatial_rank];
    let proj = conv_cost_kernel(&one, c, d, spatial);
    r.push(format!("{name}.projections"), 3 * t * proj.macs, 3 * proj.params, 0);
    let att = attention_cost(d, n, cfg.heads, frames);
    r.push(format!("{name}.attention"), att.macs, 0, pairs * (cfg.heads * n * n) as u64);
    let gate = conv_cost_kernel(&one, d, d, spatial);
    r.push(format!("{name}.gate"), pairs * gate.macs, gate.params, 2 * pairs * (d * n) as u64);
    let fuse = conv_cost_kernel(&cfg.fusion_kernel(), c + d, c, spatial);
    r.push(format!("{name}.fusion"), pairs * fuse.macs, fuse.params, 0);
    r.push(format!("{name}.fusion_bn_relu"), 0, 2 * c as u64, 2 * pairs * (c * n) as u64);
    let out = conv_cost_kernel(&one, c, c, spatial);
    r.push(format!("{name}.output"), t * out.macs, out.params, 0);
}

/// Per-layer report of a backbone configuration on `frames` frames of `spatial`
/// extents. The time-as-axis family convolves once over the stacked volume.
pub fn network_cost(cfg: &BackboneConfig, spatial: &[usize], frames: usize) -> Result<CostReport> {
    cfg.validate()?;
    if spatial.len() != cfg.spatial_rank {
        return Err(Error::invalid("cost", format!("expected {} spatial axes", cfg.spatial_rank)));
    }
    let div = 1usize << (cfg.levels() - 1);
    if spatial.iter().any(|&e| e == 0 || e % div != 0) {
        return Err(Error::invalid("cost", format!("extents {spatial:?} must be divisible by {div}")));
    }
    if frames == 0 {
        return Err(Error::invalid("cost", "need at least one frame"));
    }
    let temporal = cfg.family() == Family::TemporalConv;
    let name = match cfg.family() {
        Family::Baseline => "baseline".to_string(),
        Family::TemporalConv => "temporal-conv".to_string(),
        Family::Tam => {
            let s: Vec<String> = cfg.insertion_set.iter().map(Slot::to_string).collect();
            format!("tam[{}]", s.join(","))
        }
    };
    let mut r = CostReport::new(name, frames, spatial);
    // The time-as-axis model runs once with time as a leading axis; the others run per frame.
    let (times, lead) = if temporal { (1u64, vec![frames]) } else { (frames as u64, vec![]) };
    let at_level = |l: usize| -> Vec<usize> {
        let mut s = lead.clone();
        s.extend(spatial.iter().map(|&e| e >> (l - 1)));
        s
    };
    let spatial_at = |l: usize| -> Vec<usize> { spatial.iter().map(|&e| e >> (l - 1)).collect() };
    let k3 = cfg.kernel(3);
    let levels = cfg.levels();
    let mut c_prev = cfg.in_channels;
    for l in 1..=levels {
        let c = cfg.level_channels(l);
        let out = at_level(l);
        if l > 1 {
            let pooled_in = numel(&at_level(l - 1)) * c_prev;
            r.push(format!("encoder{l}.pool"), 0, 0, pooled_in as u64 * times);
        }
        conv_unit(&mut r, &format!("encoder{l}.1"), &k3, c_prev, c, &out, times);
        conv_unit(&mut r, &format!("encoder{l}.2"), &k3, c, c, &out, times);
        if let Some(slot) = Slot::ALL.into_iter().find(|s| s.is_encoder() && s.level() == l && cfg.insertion_set.contains(s)) {
            push_tam(&mut r, &format!("tam_{slot}"), &cfg.tam_config(slot)?, &spatial_at(l), frames);
        }
        c_prev = c;
    }
    for l in (1..levels).rev() {
        let c = cfg.level_channels(l);
        let out = at_level(l);
        r.push(format!("up{l}.upsample"), 0, 0, (numel(&out) * cfg.level_channels(l + 1)) as u64 * times);
        conv_unit(&mut r, &format!("up{l}"), &k3, cfg.level_channels(l + 1), c, &out, times);
        if let Some(slot) = Slot::ALL.into_iter().find(|s| !s.is_encoder() && s.level() == l && cfg.insertion_set.contains(s)) {
            push_tam(&mut r, &format!("tam_{slot}"), &cfg.tam_config(slot)?, &spatial_at(l), frames);
        }
        conv_unit(&mut r, &format!("decoder{l}.1"), &k3, 2 * c, c, &out, times);
        conv_unit(&mut r, &format!("decoder{l}.2"), &k3, c, c, &out, times);
    }
    let head = conv_cost_kernel(&cfg.kernel(1), cfg.channels[0], cfg.classes, &at_level(1));
    r.push("head", head.macs * times, head.params, 0);
    Ok(r)
}

/// The terms of the coarse-slot condition `T² < L·k²·(k−1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CheapnessCondition {
    pub t_squared: u64,
    pub levels_k2_km1: u64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchitectureComparison {
    pub baseline: CostReport,
    pub temporal_conv: CostReport,
    pub tam: CostReport,
    pub tam_config: ConfigId,
    pub condition: CheapnessCondition,
    pub tam_cheaper_than_temporal: bool,
    /// `false` only when the condition holds yet TAM is not cheaper.
    pub consistent: bool,
}

/// Costs of the baseline, the time-as-axis model and one TAM configuration at
/// matched widths, depth and extents.
pub fn compare_architectures(base: &BackboneConfig, tam: ConfigId, spatial: &[usize], frames: usize) -> Result<ArchitectureComparison> {
    if tam.family() != Family::Tam {
        return Err(Error::Config(format!("{tam} is not a TAM configuration")));
    }
    let baseline = network_cost(&base.clone().for_config(ConfigId::C1), spatial, frames)?;
    let temporal_conv = network_cost(&base.clone().for_config(ConfigId::C2), spatial, frames)?;
    let tam_report = network_cost(&base.clone().for_config(tam), spatial, frames)?;
    let k = 3u64;
    let t2 = (frames * frames) as u64;
    let rhs = base.levels() as u64 * k * k * (k - 1);
    let cheaper = tam_report.total_flops < temporal_conv.total_flops;
    Ok(ArchitectureComparison {
        condition: CheapnessCondition {
            t_squared: t2,
            levels_k2_km1: rhs,
            holds: t2 < rhs,
        },
        tam_cheaper_than_temporal: cheaper,
        consistent: !(t2 < rhs) || cheaper,
        baseline,
        temporal_conv,
        tam: tam_report,
        tam_config: tam,
    })
}
