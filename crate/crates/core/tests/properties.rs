use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use stacksim_core::bvq::{decode_model, encode_model, kmeans_init, partition_blocks, planted_weights, BvqConfig};
use stacksim_core::hadamard::{fwht, HadamardLibrary};
use stacksim_core::memmodel::StackConfig;
use stacksim_core::quantizer::{quantize_value, symmetric_scale};
use stacksim_core::rng::{seeded, standard_normal};
use stacksim_core::rotation::{search_plan, LocalRotation, DEFAULT_DEPTH_CAP, DEFAULT_ORDERS};
use stacksim_core::simkernel::{simulate_run, Costing, DlmSource, Hardware, PassCost, Precision, WorkloadConfig};
use stacksim_core::specdec::{decode, Policy, SdPolicyConfig};
use stacksim_core::toymodel::{ToyConfig, ToyLm};
use stacksim_core::wdos::{self, Program};

fn small_toy() -> ToyConfig {
    ToyConfig {
        vocab: 64,
        dim: 16,
        layers: 2,
        heads: 2,
        max_context: 128,
    }
}

fn hardware(precision: Precision, dlm_source: DlmSource) -> Hardware {
    Hardware { precision, dlm_source }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantized_value_stays_on_grid(v in -100.0f64..100.0, peak in 0.1f64..100.0, bits in prop::sample::select(vec![4u8, 8])) {
        let scale = symmetric_scale([peak].iter(), bits);
        let q = quantize_value(v, scale, bits) as i32;
        let hi = (1 << (bits - 1)) - 1;
        prop_assert!((-hi - 1..=hi).contains(&q));
        if v.abs() <= peak {
            prop_assert!((q as f64 * scale - v).abs() <= scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn fwht_twice_scales_by_n(k in 0u32..8, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let x: Vec<f64> = (0..1usize << k).map(|_| standard_normal(&mut rng)).collect();
        let back = fwht(&fwht(&x, k).unwrap(), k).unwrap();
        let n = x.len() as f64;
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a * n - b).abs() <= 1e-9 * n);
        }
    }

    #[test]
    fn rotation_preserves_products(n in 1usize..1200, seed in any::<u64>()) {
        let orders: BTreeSet<usize> = DEFAULT_ORDERS.into_iter().collect();
        let Ok(plan) = search_plan(n, DEFAULT_DEPTH_CAP, &orders) else { return Ok(()) };
        prop_assert!(plan.validate().is_ok());
        let rot = LocalRotation::new(plan, &HadamardLibrary::new()).unwrap();
        let mut rng = seeded(seed);
        let x: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let w = Array2::from_shape_fn((n, 3), |_| standard_normal(&mut rng));
        let xr = rot.rotate_activation(&x).unwrap();
        let wr = rot.fold_weights(&w).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((norm(&x) - norm(&xr)).abs() <= 1e-9 * norm(&x).max(1.0));
        for c in 0..3 {
            let exact: f64 = (0..n).map(|r| x[r] * w[[r, c]]).sum();
            let got: f64 = (0..n).map(|r| xr[r] * wr[[r, c]]).sum();
            prop_assert!((exact - got).abs() <= 1e-9 * (1.0 + exact.abs()) * (n as f64).sqrt());
        }
    }

    #[test]
    fn out_of_order_never_slower(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = seeded(seed);
        let p = wdos::random_acyclic(&mut rng, n, 12, 3);
        let ooo = wdos::run(&p).unwrap();
        let ino = wdos::in_order_reference(&p).unwrap();
        prop_assert!(ooo.check(&p).is_ok());
        prop_assert!(ooo.makespan() <= ino.makespan());
        prop_assert!(ooo.makespan() <= p.total_duration());
        prop_assert_eq!(Program::parse(&p.to_text()).unwrap(), p);
    }

    #[test]
    fn latency_and_energy_monotone(d in 0.0f64..1e10, r in 0.0f64..1e10, o in 0.0f64..1e13, extra in 1.0f64..1e9) {
        let workload = WorkloadConfig::default();
        let stack = StackConfig::default();
        let c = Costing::new(&workload, &stack, hardware(Precision::W4a8, DlmSource::ReramBvq)).unwrap();
        let base = PassCost { dram_bytes: d, reram_bytes: r, ops: o };
        for bigger in [
            PassCost { dram_bytes: d + extra, ..base },
            PassCost { reram_bytes: r + extra, ..base },
            PassCost { ops: o + extra, ..base },
        ] {
            prop_assert!(c.latency(&bigger) >= c.latency(&base));
            prop_assert!(c.energy(&bigger) > c.energy(&base));
        }
        let (t_dram, t_reram, t_ops) = c.components(&base);
        prop_assert_eq!(c.latency(&base), t_dram.max(t_reram).max(t_ops));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bvq_container_round_trips(seed in any::<u64>(), entries in prop::sample::select(vec![2usize, 4, 16])) {
        let config = BvqConfig {
            codebook_entries: entries,
            kmeans_iters: 5,
            kmeans_restarts: 1,
            seed,
            ..BvqConfig::default()
        };
        let w = planted_weights(16, 32, config.vector_len, 3, 0.05, seed);
        let model = kmeans_init(&partition_blocks(&w, &config).unwrap(), &config).unwrap();
        let bytes = encode_model(&model).unwrap();
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn cheaper_hardware_is_never_slower(seed in 0u64..1000, noise in 0.0f64..0.3) {
        let tlm = ToyLm::build(seed, small_toy()).unwrap();
        let dlm = ToyLm::perturbed(&tlm, noise, seed + 1);
        let prompt = [1, 2, 3];
        let workload = WorkloadConfig::default();
        let stack = StackConfig { chips: 4, ..StackConfig::default() };
        for policy in Policy::ALL {
            let sd = SdPolicyConfig { policy, max_new_tokens: 24, ..SdPolicyConfig::default() };
            let trace = decode(&sd, &tlm, &dlm, &prompt).unwrap();
            let time = |h: Hardware| simulate_run(&trace, &Costing::new(&workload, &stack, h).unwrap()).unwrap().total_seconds;
            let bf16 = time(hardware(Precision::Bf16, DlmSource::Dram));
            let w4a8 = time(hardware(Precision::W4a8, DlmSource::Dram));
            let pnm = time(hardware(Precision::W4a8, DlmSource::ReramBvq));
            prop_assert!(w4a8 < bf16, "{:?}", policy);
            prop_assert!(pnm <= w4a8, "{:?}", policy);
        }
    }

    #[test]
    fn every_policy_matches_greedy(seed in 0u64..1000, noise in 0.0f64..0.5, gs in 1usize..5, gl in 1usize..10) {
        let tlm = ToyLm::build(seed, small_toy()).unwrap();
        let dlm = ToyLm::perturbed(&tlm, noise, seed ^ 0x55);
        let prompt = [7, 5];
        let reference = tlm.greedy_decode(&prompt, 20).unwrap();
        for policy in Policy::ALL {
            let sd = SdPolicyConfig { policy, gamma_short: gs, gamma_long: gl.max(gs), max_new_tokens: 20 };
            prop_assert_eq!(&decode(&sd, &tlm, &dlm, &prompt).unwrap().tokens, &reference);
        }
    }
}

#[test]
fn documented_program_runs() {
    let text = "# one draft round: load, compute, hand off\n\
                emac        40  -              verify\n\
                reram_load   6  -              load0\n\
                compute      4  reram_load:1   draft0\n\
                transceiver  1  emac:1,compute:1  handoff\n";
    let p = Program::parse(text).unwrap();
    assert_eq!(p.len(), 4);
    assert_eq!(wdos::run(&p).unwrap().makespan(), 41);
    assert_eq!(wdos::in_order_reference(&p).unwrap().makespan(), 51);
}
