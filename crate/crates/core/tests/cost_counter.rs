//! Closed-form cost counts against the instrumented multiply-accumulate counter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tam_core::cost::{network_cost, tam_cost};
use tam_core::tam::tam_forward;
use tam_core::unet::{network_logits, BackboneConfig, ConfigId, UNetParams};
use tam_core::{count_macs, Parameters, Session, TamConfig, TamParams, Tensor, Var};

fn random_config(rng: &mut ChaCha8Rng) -> (BackboneConfig, Vec<usize>, usize) {
    loop {
        let levels = rng.gen_range(2..=5);
        let rank = if rng.gen_bool(0.25) { 3 } else { 2 };
        let heads = *[1usize, 2, 4].choose(rng).unwrap();
        let channels: Vec<usize> = (0..levels).map(|_| heads * rng.gen_range(1..=3)).collect();
        let id = *ConfigId::ALL.choose(rng).unwrap();
        let cfg = BackboneConfig {
            spatial_rank: rank,
            in_channels: rng.gen_range(1..=2),
            channels,
            classes: rng.gen_range(2..=4),
            heads,
            ..Default::default()
        }
        .for_config(id);
        if cfg.validate().is_err() {
            continue;
        }
        let div = 1 << (levels - 1);
        let max_mult = if rank == 3 { 1 } else { 2 };
        let spatial: Vec<usize> = (0..rank).map(|_| div * rng.gen_range(1..=max_mult)).collect();
        let frames = rng.gen_range(2..=5);
        return (cfg, spatial, frames);
    }
}

#[test]
fn network_counts_match_counter_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut families = std::collections::BTreeSet::new();
    for case in 0..10 {
        let (cfg, spatial, frames) = random_config(&mut rng);
        families.insert(format!("{:?}", cfg.family()));
        let params = UNetParams::<f64>::init(&mut rng, &cfg).unwrap();
        let mut shape = vec![cfg.in_channels];
        shape.extend_from_slice(&spatial);
        let inputs: Vec<Tensor<f64>> = (0..frames).map(|_| Tensor::from_fn(&shape, |_| rng.gen_range(0.0..1.0))).collect();
        let (_, counted) = count_macs(|| {
            let mut s = Session::eval();
            let vars: Vec<Var> = inputs.iter().map(|f| s.input(f.clone())).collect();
            network_logits(&mut s, &vars, &cfg, &params).unwrap();
        });
        let report = network_cost(&cfg, &spatial, frames).unwrap();
        assert_eq!(report.total_macs, counted, "case {case}: {cfg:?} spatial {spatial:?} T={frames}");
        assert_eq!(report.total_flops, 2 * counted);
        assert_eq!(report.total_params, params.trainable_count() as u64, "case {case}");
    }
    assert!(families.len() >= 2, "sampled families {families:?}");
}

#[test]
fn time_axis_and_tam_variants_match_counter() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for id in [ConfigId::C2, ConfigId::C11] {
        let cfg = BackboneConfig {
            channels: vec![2, 4, 4, 4, 8],
            heads: 2,
            ..Default::default()
        }
        .for_config(id);
        let params = UNetParams::<f64>::init(&mut rng, &cfg).unwrap();
        let inputs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[1, 32, 16], |_| rng.gen_range(0.0..1.0))).collect();
        let (_, counted) = count_macs(|| {
            let mut s = Session::eval();
            let vars: Vec<Var> = inputs.iter().map(|f| s.input(f.clone())).collect();
            network_logits(&mut s, &vars, &cfg, &params).unwrap();
        });
        assert_eq!(network_cost(&cfg, &[32, 16], 3).unwrap().total_macs, counted, "{id}");
    }
}

#[test]
fn tam_rows_match_counter_and_parameter_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (c, heads, d, t) in [(8, 2, 8, 2), (4, 4, 8, 3), (6, 3, 12, 5)] {
        let cfg = TamConfig::new(c, heads, 2).unwrap().with_d_embed(d).unwrap();
        let params = TamParams::<f64>::init(&mut rng, &cfg);
        let inputs: Vec<Tensor<f64>> = (0..t).map(|_| Tensor::from_fn(&[c, 3, 5], |_| rng.gen_range(-1.0..1.0))).collect();
        let (_, counted) = count_macs(|| {
            let mut s = Session::eval();
            let vars: Vec<Var> = inputs.iter().map(|f| s.input(f.clone())).collect();
            tam_forward(&mut s, &vars, &params, &cfg).unwrap();
        });
        let rows = tam_cost("tam", &cfg, &[3, 5], t);
        assert_eq!(rows.iter().map(|r| r.macs).sum::<u64>(), counted);
        assert_eq!(rows.iter().map(|r| r.params).sum::<u64>(), params.trainable_count() as u64);
    }
}

#[test]
fn desk_scale_ordering() {
    let base = BackboneConfig::default();
    let flops = |id: ConfigId| network_cost(&base.clone().for_config(id), &[64, 64], 2).unwrap().total_flops;
    let (c1, c2, c3) = (flops(ConfigId::C1), flops(ConfigId::C2), flops(ConfigId::C3));
    assert!(c1 < c3 && c3 < c2, "C1 {c1}, C3 {c3}, C2 {c2}");
}
