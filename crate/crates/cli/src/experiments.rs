//! The workloads behind each command, shared with the verify suite.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use stacksim_core::bvq::{
    compression_report, gumbel_refine, kmeans_init, mse, partition_blocks, BvqConfig, BvqError, BvqModel,
    CompressionReport,
};
use stacksim_core::hadamard::HadamardLibrary;
use stacksim_core::quantizer::{fake_quant_per_tensor, relative_l2, w4a8_matmul_error};
use stacksim_core::rng::{standard_normal, substream};
use stacksim_core::rotation::{search_plan, LocalRotation, RotationPlan, RotationSegment};
use stacksim_core::simkernel::{compare_policies, Costing, LadderRow, LadderSummary, Role};
use stacksim_core::specdec::{decode, rejection_stats, DecodeTrace, Policy, SdPolicyConfig};
use stacksim_core::toymodel::ToyLm;

use crate::config::{DecodeScenario, RotationScenario, ScenarioConfig};
use crate::CliError;

const PROMPT_STREAM: u64 = 0x70726f6d;
const ROTATION_STREAM: u64 = 0x726f74;
/// Draft model of seed `s` perturbs the target with seed `s + DRAFT_SEED_OFFSET`.
pub const DRAFT_SEED_OFFSET: u64 = 1000;

// ---- rotation ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRow {
    pub n: usize,
    /// Segments as `m x 2^k @ offset`, upper first.
    pub plan: String,
    pub segments: usize,
    pub overlap: usize,
    pub arithmetic_cost: usize,
}

impl PlanRow {
    pub fn new(plan: &RotationPlan) -> Self {
        Self {
            n: plan.n,
            plan: plan
                .segments()
                .map(|s| format!("{}x2^{}@{}", s.m, s.k, s.offset))
                .collect::<Vec<_>>()
                .join(" + "),
            segments: plan.segment_count(),
            overlap: plan.overlap(),
            arithmetic_cost: plan.arithmetic_cost(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotationTrial {
    pub n: usize,
    pub seed: u64,
    pub trial: usize,
    pub outlier_index: usize,
    pub outlier_factor: f64,
    /// `|x̂·Ŵ − x·W| / |x·W|` without quantization.
    pub invariance_residual: f64,
    pub plain_error: f64,
    pub rotated_error: f64,
}

impl RotationTrial {
    pub fn rotation_wins(&self) -> bool {
        self.rotated_error < self.plain_error
    }
}

pub fn library(r: &RotationScenario, config: &ScenarioConfig) -> Result<HadamardLibrary, CliError> {
    let mut lib = HadamardLibrary::new();
    for f in &r.hadamard_files {
        let path = config.resolve(f);
        let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        lib.load_text(&text).map_err(|e| CliError::Parse {
            origin: path.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    Ok(lib)
}

pub fn plan_for(n: usize, r: &RotationScenario) -> Result<RotationPlan, CliError> {
    let orders: BTreeSet<usize> = r.orders.iter().copied().collect();
    search_plan(n, r.depth_cap, &orders).map_err(|e| CliError::invalid("rotation.orders", e))
}

/// A uniformly chosen valid covering plan (single or two-segment) for `n`.
pub fn random_plan<R: Rng + ?Sized>(rng: &mut R, n: usize, orders: &[usize], depth_cap: u32) -> Option<RotationPlan> {
    let segs: Vec<(usize, u32)> = orders
        .iter()
        .flat_map(|&m| (0..=depth_cap).map(move |k| (m, k)))
        .filter(|&(m, k)| m > 0 && (m << k) <= n)
        .collect();
    let mut plans = Vec::new();
    for &(m1, k1) in &segs {
        let upper = RotationSegment { offset: 0, m: m1, k: k1 };
        if m1 << k1 == n {
            plans.push(RotationPlan { n, depth_cap, upper, lower: upper });
            continue;
        }
        for &(m2, k2) in &segs {
            let s2 = m2 << k2;
            if (m1 << k1) + s2 >= n && s2 < n {
                let lower = RotationSegment { offset: n - s2, m: m2, k: k2 };
                plans.push(RotationPlan { n, depth_cap, upper, lower });
            }
        }
    }
    if plans.is_empty() {
        None
    } else {
        Some(plans[rng.random_range(0..plans.len())])
    }
}

fn row_times(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    w.columns()
        .into_iter()
        .map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Gaussian activation with one coordinate pushed to `factor · (1 + |x_j|)`
/// (sign kept), Gaussian `n × out_features` weight.
pub fn outlier_case(n: usize, out_features: usize, seed: u64, trial: usize, min: f64, max: f64) -> (Vec<f64>, Array2<f64>, usize, f64) {
    let mut rng = substream(seed, ROTATION_STREAM ^ ((n as u64) << 20) ^ trial as u64);
    let mut x: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
    let j = rng.random_range(0..n);
    let factor = if max > min { rng.random_range(min..=max) } else { min };
    x[j] = factor * (1.0 + x[j].abs()) * if x[j] < 0.0 { -1.0 } else { 1.0 };
    let w = Array2::from_shape_fn((n, out_features), |_| standard_normal(&mut rng));
    (x, w, j, factor)
}

pub fn rotation_trial(
    rot: &LocalRotation,
    out_features: usize,
    seed: u64,
    trial: usize,
    min: f64,
    max: f64,
) -> Result<RotationTrial, CliError> {
    let n = rot.plan().n;
    let (x, w, j, factor) = outlier_case(n, out_features, seed, trial, min, max);
    let fail = |e: &dyn std::fmt::Display| CliError::Correctness(format!("rotation trial n={n}: {e}"));
    let exact = row_times(&x, &w);
    let xr = rot.rotate_activation(&x).map_err(|e| fail(&e))?;
    let wr = rot.fold_weights(&w).map_err(|e| fail(&e))?;
    let invariance_residual = relative_l2(&exact, &row_times(&xr, &wr));
    let plain = w4a8_matmul_error(&x, &w, None).map_err(|e| fail(&e))?;
    let rotated = w4a8_matmul_error(&x, &w, Some(rot)).map_err(|e| fail(&e))?;
    Ok(RotationTrial {
        n,
        seed,
        trial,
        outlier_index: j,
        outlier_factor: factor,
        invariance_residual,
        plain_error: plain.relative_l2,
        rotated_error: rotated.relative_l2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotationEval {
    pub plans: Vec<PlanRow>,
    pub trials: Vec<RotationTrial>,
    pub max_invariance_residual: f64,
    pub rotation_wins: usize,
}

pub const INVARIANCE_TOLERANCE: f64 = 1e-10;

pub fn rotation_eval(config: &ScenarioConfig) -> Result<RotationEval, CliError> {
    let r = &config.rotation;
    let lib = library(r, config)?;
    let mut plans = Vec::new();
    let mut rotations = Vec::new();
    for &n in &r.dims {
        let plan = plan_for(n, r)?;
        plans.push(PlanRow::new(&plan));
        rotations.push(LocalRotation::new(plan, &lib).map_err(|e| CliError::invalid("rotation.orders", e))?);
    }
    let jobs: Vec<(usize, u64, usize)> = (0..rotations.len())
        .flat_map(|d| config.seeds.iter().flat_map(move |&s| (0..r.trials).map(move |t| (d, s, t))))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(d, s, t)| rotation_trial(&rotations[d], r.out_features, s, t, r.outlier_min, r.outlier_max))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RotationEval {
        plans,
        max_invariance_residual: trials.iter().map(|t| t.invariance_residual).fold(0.0, f64::max),
        rotation_wins: trials.iter().filter(|t| t.rotation_wins()).count(),
        trials,
    })
}

// ---- bvq ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BvqTrainReport {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub init_mse: f64,
    pub final_mse: f64,
    /// Per-tensor symmetric INT4 of every element.
    pub direct_int4_mse: f64,
    pub beats_direct_int4: bool,
    pub best_step: Option<usize>,
    pub steps: usize,
    pub compression: CompressionReport,
}

pub fn train_bvq(w: &Array2<f64>, config: &BvqConfig) -> Result<(BvqModel, BvqTrainReport), BvqError> {
    let partition = partition_blocks(w, config)?;
    let init = kmeans_init(&partition, config)?;
    let (model, refine) = gumbel_refine(&init, w, config)?;
    let direct = mse(w, &fake_quant_per_tensor(w, 4)?);
    let final_mse = model.mse(w);
    let report = BvqTrainReport {
        rows: w.nrows(),
        cols: w.ncols(),
        seed: config.seed,
        init_mse: refine.initial_mse,
        final_mse,
        direct_int4_mse: direct,
        beats_direct_int4: final_mse <= direct,
        best_step: refine.best_step,
        steps: refine.steps,
        compression: compression_report(&model, 16),
    };
    Ok((model, report))
}

/// Reads a headerless CSV of numbers into a matrix.
pub fn read_matrix(path: &std::path::Path) -> Result<Array2<f64>, CliError> {
    let parse_err = |msg: String| CliError::Parse {
        origin: path.display().to_string(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CliError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => parse_err(e.to_string()),
        })?;
    let mut data = Vec::new();
    let mut cols = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(parse_err(format!("row {} has {} values, expected {}", i + 1, rec.len(), cols.unwrap())));
        }
        for field in rec.iter() {
            data.push(field.parse::<f64>().map_err(|e| parse_err(format!("row {}: {field:?}: {e}", i + 1)))?);
        }
    }
    let cols = cols.ok_or_else(|| parse_err("matrix is empty".into()))?;
    Array2::from_shape_vec((data.len() / cols, cols), data).map_err(|e| parse_err(e.to_string()))
}

// ---- speculative decoding ----

pub fn prompt_for(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = substream(seed, PROMPT_STREAM);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn toy_pair(decode: &DecodeScenario, seed: u64) -> Result<(ToyLm, ToyLm), CliError> {
    let tlm = ToyLm::build(seed, decode.toy).map_err(|e| CliError::invalid("decode.toy", e))?;
    let dlm = ToyLm::perturbed(&tlm, decode.draft_noise, seed.wrapping_add(DRAFT_SEED_OFFSET));
    Ok((tlm, dlm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    /// One trace per policy, in `Policy::ALL` order.
    pub traces: Vec<DecodeTrace>,
    /// Policies whose output differs from autoregressive decoding.
    pub mismatches: Vec<Policy>,
}

impl SeedRun {
    pub fn trace(&self, policy: Policy) -> &DecodeTrace {
        &self.traces[Policy::ALL.iter().position(|&p| p == policy).expect("policy listed")]
    }
}

pub fn run_seed(decode_cfg: &DecodeScenario, seed: u64) -> Result<SeedRun, CliError> {
    let (tlm, dlm) = toy_pair(decode_cfg, seed)?;
    let prompt = prompt_for(seed, decode_cfg.prompt_len, decode_cfg.toy.vocab);
    let traces = Policy::ALL
        .iter()
        .map(|&policy| {
            let sd = SdPolicyConfig {
                policy,
                ..decode_cfg.sd.clone()
            };
            decode(&sd, &tlm, &dlm, &prompt).map_err(|e| CliError::invalid("decode", e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reference = &traces[0].tokens;
    let mismatches = traces
        .iter()
        .filter(|t| &t.tokens != reference)
        .map(|t| t.policy)
        .collect();
    Ok(SeedRun { seed, traces, mismatches })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRejection {
    pub policy: Policy,
    pub mean_rejected_ratio: f64,
    pub mean_rejected_dlm_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equivalence {
    pub seeds: usize,
    pub policies: usize,
    pub mismatches: Vec<(u64, Policy)>,
}

impl Equivalence {
    pub fn holds(&self) -> bool {
        self.mismatches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimOutcome {
    pub rows: Vec<LadderRow>,
    pub summary: Vec<LadderSummary>,
    pub rejection: Vec<PolicyRejection>,
    /// Seeds where APSD rejects a strictly smaller share than parallel SD.
    pub apsd_below_parallel: usize,
    pub equivalence: Equivalence,
    #[serde(skip)]
    pub runs: Vec<SeedRun>,
}

pub fn simulate(config: &ScenarioConfig) -> Result<SimOutcome, CliError> {
    let runs = config
        .seeds
        .par_iter()
        .map(|&s| run_seed(&config.decode, s))
        .collect::<Result<Vec<_>, _>>()?;
    simulate_runs(config, runs)
}

pub fn simulate_runs(config: &ScenarioConfig, runs: Vec<SeedRun>) -> Result<SimOutcome, CliError> {
    let equivalence = Equivalence {
        seeds: runs.len(),
        policies: Policy::ALL.len(),
        mismatches: runs
            .iter()
            .flat_map(|r| r.mismatches.iter().map(move |&p| (r.seed, p)))
            .collect(),
    };
    let traces: Vec<(u64, Vec<DecodeTrace>)> = runs.iter().map(|r| (r.seed, r.traces.clone())).collect();
    let (rows, summary) = compare_policies(&config.ladder, &traces, &config.workload, &config.memory)
        .map_err(|e| CliError::invalid("workload", e))?;

    // Draft time is costed on the hardware of the last rung.
    let hw = config.ladder.last().expect("validated non-empty").hardware();
    let costing = Costing::new(&config.workload, &config.memory, hw).map_err(|e| CliError::invalid("workload", e))?;
    let t_d = costing.step_latency(Role::Dlm);
    let n = runs.len() as f64;
    let rejection = [Policy::VanillaSd, Policy::ParallelSd, Policy::Apsd]
        .into_iter()
        .map(|policy| {
            let stats: Vec<_> = runs.iter().map(|r| rejection_stats(r.trace(policy), t_d)).collect();
            PolicyRejection {
                policy,
                mean_rejected_ratio: stats.iter().map(|s| s.rejected_ratio).sum::<f64>() / n,
                mean_rejected_dlm_seconds: stats.iter().map(|s| s.rejected_dlm_seconds).sum::<f64>() / n,
            }
        })
        .collect();
    let apsd_below_parallel = runs
        .iter()
        .filter(|r| {
            rejection_stats(r.trace(Policy::Apsd), t_d).rejected_ratio
                < rejection_stats(r.trace(Policy::ParallelSd), t_d).rejected_ratio
        })
        .count();
    Ok(SimOutcome {
        rows,
        summary,
        rejection,
        apsd_below_parallel,
        equivalence,
        runs,
    })
}
