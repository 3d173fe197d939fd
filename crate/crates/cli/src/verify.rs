//! Property suites run by `stacksim verify`.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use stacksim_core::hadamard::{constructible_orders, HadamardLibrary, HadamardMatrix};
use stacksim_core::memmodel::{cilm_bandwidth, fused_fetch_cycles, CbLayout, MappingMode, StackConfig};
use stacksim_core::quantizer::relative_l2;
use stacksim_core::rng::{seeded, standard_normal};
use stacksim_core::rotation::{LocalRotation, DEFAULT_DEPTH_CAP, DEFAULT_ORDERS};
use stacksim_core::specdec::SdPolicyConfig;
use stacksim_core::wdos::{self, WdosError};

use crate::config::DecodeScenario;
use crate::experiments::{random_plan, run_seed, INVARIANCE_TOLERANCE};

/// Deliberate defects for checking that the suites catch them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Negate the last entry of the first row of every Hadamard matrix.
    pub hadamard_sign_flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<22} {:>5} cases  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.cases,
            self.detail
        )
    }
}

fn suite(name: &'static str, run: impl FnOnce() -> (usize, usize, String)) -> SuiteResult {
    let t0 = Instant::now();
    let (cases, failures, detail) = run();
    SuiteResult {
        suite: name,
        passed: failures == 0 && cases > 0,
        cases,
        failures,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn matrices(faults: Faults) -> Vec<HadamardMatrix> {
    let lib = HadamardLibrary::new();
    constructible_orders(64)
        .into_iter()
        .map(|order| {
            let h = lib.get(order).expect("constructible");
            if faults.hadamard_sign_flip {
                h.with_flipped_entry(0, order - 1)
            } else {
                h
            }
        })
        .collect()
}

fn orthogonality(faults: Faults) -> SuiteResult {
    suite("hadamard_orthogonality", || {
        let hs = matrices(faults);
        let bad: Vec<usize> = hs.iter().filter(|h| !h.is_orthogonal()).map(|h| h.order()).collect();
        let detail = if bad.is_empty() {
            format!("H·Hᵀ = n·I for orders {:?}", hs.iter().map(|h| h.order()).collect::<Vec<_>>())
        } else {
            format!("not orthogonal: {bad:?}")
        };
        (hs.len(), bad.len(), detail)
    })
}

fn invariance(faults: Faults) -> SuiteResult {
    suite("rotation_invariance", || {
        let mut lib = HadamardLibrary::new();
        for h in matrices(faults) {
            lib.insert(h);
        }
        let mut rng = seeded(0x1a5);
        let mut worst = 0.0f64;
        let mut failures = 0;
        let mut cases = 0;
        for trial in 0..30 {
            let n = [448, 768, 1024][trial % 3];
            let plan = random_plan(&mut rng, n, &DEFAULT_ORDERS, DEFAULT_DEPTH_CAP).expect("coverable");
            let rot = LocalRotation::new(plan, &lib).expect("valid plan");
            let x: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
            let w = Array2::from_shape_fn((n, 16), |_| standard_normal(&mut rng));
            let exact = x_times(&x, &w);
            let got = x_times(&rot.rotate_activation(&x).unwrap(), &rot.fold_weights(&w).unwrap());
            let r = relative_l2(&exact, &got);
            worst = worst.max(r);
            cases += 1;
            if r.is_nan() || r > INVARIANCE_TOLERANCE {
                failures += 1;
            }
        }
        (cases, failures, format!("max residual {worst:.3e}"))
    })
}

fn x_times(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    w.columns()
        .into_iter()
        .map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn fusion() -> SuiteResult {
    suite("tile_fusion_halving", || {
        let config = StackConfig::default();
        let mut rng = seeded(0xf05);
        let (mut cases, mut failures) = (0, 0);
        for entries in [1u32, 4, 16, 64, 256] {
            let layout = CbLayout::new(&config, MappingMode::Vertical, true, 32, entries, &[1]).expect("fits");
            let mut trace: Vec<(u32, u32)> = (0..entries).flat_map(|e| [(2 * e, e), (2 * e + 1, e)]).collect();
            trace.shuffle(&mut rng);
            let (naive, fused) = fused_fetch_cycles(&trace, &layout).expect("valid trace");
            cases += 1;
            if fused * 2 != naive {
                failures += 1;
            }
        }
        let bw1 = cilm_bandwidth(&config, true);
        let bw4 = cilm_bandwidth(&StackConfig { chips: 4, ..config }, true);
        cases += 2;
        failures += usize::from(bw1 != 25_600_000_000) + usize::from(bw4 != 102_400_000_000);
        (cases, failures, format!("fused = naive / 2; {bw1} B/s per chip, {bw4} B/s at 4 chips"))
    })
}

fn scheduler() -> SuiteResult {
    suite("wdos_happens_before", || {
        let mut rng = seeded(0x5c4);
        let (mut cases, mut failures, mut strict) = (0, 0, 0);
        for _ in 0..300 {
            let n = rng.random_range(1..=40);
            let p = wdos::random_acyclic(&mut rng, n, 20, 3);
            cases += 1;
            let ok = match (wdos::run(&p), wdos::in_order_reference(&p)) {
                (Ok(s), Ok(r)) => {
                    let independent = p.has_independent_work();
                    strict += usize::from(independent);
                    s.check(&p).is_ok()
                        && s.makespan() <= r.makespan()
                        && (!independent || s.makespan() < r.makespan())
                }
                _ => false,
            };
            failures += usize::from(!ok);
        }
        for _ in 0..100 {
            let n = rng.random_range(2..=40);
            let p = wdos::random_cyclic(&mut rng, n, 20, 3);
            cases += 1;
            failures += usize::from(!matches!(wdos::run(&p), Err(WdosError::Deadlock { .. })));
        }
        (cases, failures, format!("{strict} programs with independent work all strictly faster"))
    })
}

fn equivalence() -> SuiteResult {
    suite("sd_equivalence", || {
        let decode = DecodeScenario {
            sd: SdPolicyConfig {
                max_new_tokens: 48,
                ..SdPolicyConfig::default()
            },
            ..DecodeScenario::default()
        };
        let (mut cases, mut failures) = (0, 0);
        for seed in 0..12u64 {
            let d = DecodeScenario {
                draft_noise: [0.0, 0.02, 0.05, 0.2][seed as usize % 4],
                ..decode.clone()
            };
            match run_seed(&d, 500 + seed) {
                Ok(run) => {
                    cases += run.traces.len();
                    failures += run.mismatches.len();
                }
                Err(_) => {
                    cases += 1;
                    failures += 1;
                }
            }
        }
        (cases, failures, "every policy reproduces greedy decoding".to_string())
    })
}

pub fn run_suites(faults: Faults) -> Vec<SuiteResult> {
    vec![orthogonality(faults), invariance(faults), fusion(), scheduler(), equivalence()]
}
