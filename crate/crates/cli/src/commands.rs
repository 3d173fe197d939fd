//! Subcommand bodies. Each writes its reports, then returns the lines to
//! print; correctness failures come back as errors after the reports exist.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use stacksim_core::bvq::{encode_model, planted_weights, BvqError};
use stacksim_core::simkernel::LadderSummary;

use crate::config::{Format, ScenarioConfig};
use crate::experiments::{self, read_matrix, SimOutcome, INVARIANCE_TOLERANCE};
use crate::report::ReportDir;
use crate::verify::{run_suites, Faults};
use crate::CliError;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
}

struct Prepared {
    config: ScenarioConfig,
    report: ReportDir,
    format: Format,
}

fn prepare(args: &RunArgs, command: &'static str) -> Result<Prepared, CliError> {
    let mut config = ScenarioConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    let format = args.format.unwrap_or(config.output.format);
    let report = ReportDir::create(config.out_dir(args.out.as_deref()), command, &config.name, &config.hash())?;
    let origin = args
        .config
        .as_ref()
        .map_or_else(|| "<bundled default>".to_string(), |p| p.display().to_string());
    report.write_meta(&origin)?;
    Ok(Prepared { config, report, format })
}

pub fn rotate_eval(args: &RunArgs) -> Result<Vec<String>, CliError> {
    let p = prepare(args, "rotate-eval")?;
    let eval = experiments::rotation_eval(&p.config)?;
    let passed = eval.max_invariance_residual <= INVARIANCE_TOLERANCE;

    #[derive(Serialize)]
    struct Body<'a> {
        plans: &'a [experiments::PlanRow],
        trials: &'a [experiments::RotationTrial],
        max_invariance_residual: f64,
        invariance_tolerance: f64,
        rotation_wins: usize,
        trial_count: usize,
        checks_passed: bool,
    }
    match p.format {
        Format::Json => p.report.write_json(
            "rotate_eval.json",
            &Body {
                plans: &eval.plans,
                trials: &eval.trials,
                max_invariance_residual: eval.max_invariance_residual,
                invariance_tolerance: INVARIANCE_TOLERANCE,
                rotation_wins: eval.rotation_wins,
                trial_count: eval.trials.len(),
                checks_passed: passed,
            },
        )?,
        Format::Csv => {
            p.report.write_csv("rotate_eval_plans.csv", &eval.plans)?;
            p.report.write_csv("rotate_eval.csv", &eval.trials)?
        }
    };
    let mut lines: Vec<String> = eval
        .plans
        .iter()
        .map(|r| format!("n={:<5} plan {} (overlap {})", r.n, r.plan, r.overlap))
        .collect();
    lines.push(format!(
        "invariance residual max {:.3e} (tolerance {INVARIANCE_TOLERANCE:e})",
        eval.max_invariance_residual
    ));
    lines.push(format!(
        "rotation lowers W4A8 error in {}/{} trials",
        eval.rotation_wins,
        eval.trials.len()
    ));
    if !passed {
        return Err(CliError::Correctness(format!(
            "invariance residual {:.3e} exceeds {INVARIANCE_TOLERANCE:e}",
            eval.max_invariance_residual
        )));
    }
    Ok(lines)
}

pub fn bvq_train(args: &RunArgs) -> Result<Vec<String>, CliError> {
    let p = prepare(args, "bvq-train")?;
    let b = &p.config.bvq;
    let seed = p.config.seeds[0];
    let w = match &b.matrix {
        Some(path) => read_matrix(&p.config.resolve(path))?,
        None => planted_weights(b.rows, b.cols, b.train.vector_len, b.prototypes, b.noise, seed),
    };
    let mut train = b.train.clone();
    train.seed = seed;
    let (model, report) = experiments::train_bvq(&w, &train).map_err(|e| match e {
        BvqError::Divisibility { .. } | BvqError::DegenerateCluster { .. } => {
            CliError::invalid(if b.matrix.is_some() { "bvq.matrix" } else { "bvq.rows/bvq.cols" }, e)
        }
        other => CliError::invalid("bvq.train", other),
    })?;
    let bytes = encode_model(&model).map_err(|e| CliError::invalid("bvq.train", e))?;
    let model_path = p.report.write_bytes("model.bvq", &bytes)?;
    match p.format {
        Format::Json => p.report.write_json("bvq_train.json", &report)?,
        Format::Csv => p.report.write_csv("bvq_train.csv", std::slice::from_ref(&report))?,
    };
    Ok(vec![
        format!(
            "{}x{} seed {}: mse {:.6e} after init {:.6e}, direct INT4 {:.6e}",
            report.rows, report.cols, seed, report.final_mse, report.init_mse, report.direct_int4_mse
        ),
        format!(
            "{:.3} bits/weight, {:.2}x smaller than BF16; model {} ({} bytes)",
            report.compression.bits_per_weight,
            report.compression.ratio,
            model_path.display(),
            bytes.len()
        ),
    ])
}

/// Flat per-seed row for CSV output.
#[derive(Serialize)]
struct SeedRow<'a> {
    seed: u64,
    rung: &'a str,
    policy: &'static str,
    new_tokens: usize,
    rounds: usize,
    prefill_seconds: f64,
    decode_seconds: f64,
    tokens_per_s: f64,
    energy_j: f64,
    j_per_token: f64,
    speedup_vs_base: f64,
    speedup_vs_prev: f64,
}

fn seed_rows(outcome: &SimOutcome) -> Vec<SeedRow<'_>> {
    outcome
        .rows
        .iter()
        .map(|r| SeedRow {
            seed: r.seed,
            rung: &r.rung,
            policy: r.report.policy.map_or("", |p| p.name()),
            new_tokens: r.report.new_tokens,
            rounds: r.report.rounds,
            prefill_seconds: r.report.prefill_seconds,
            decode_seconds: r.report.decode_seconds,
            tokens_per_s: r.report.tokens_per_s,
            energy_j: r.report.energy_j,
            j_per_token: r.report.j_per_token,
            speedup_vs_base: r.speedup_vs_base,
            speedup_vs_prev: r.speedup_vs_prev,
        })
        .collect()
}

fn summary_lines(summary: &[LadderSummary]) -> Vec<String> {
    summary
        .iter()
        .map(|s| {
            format!(
                "{:<12} x{:.3} vs base  x{:.3} vs prev  {:.2} tok/s  {:.4} J/tok",
                s.rung, s.geomean_speedup_vs_base, s.geomean_speedup_vs_prev, s.mean_tokens_per_s, s.mean_j_per_token
            )
        })
        .collect()
}

fn equivalence_error(outcome: &SimOutcome) -> CliError {
    let list: Vec<String> = outcome
        .equivalence
        .mismatches
        .iter()
        .map(|(s, p)| format!("seed {s} {}", p.name()))
        .collect();
    CliError::Correctness(format!("decoding differs from greedy: {}", list.join(", ")))
}

pub fn simulate(args: &RunArgs) -> Result<Vec<String>, CliError> {
    let p = prepare(args, "simulate")?;
    let outcome = experiments::simulate(&p.config)?;
    match p.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                seeds: &'a [u64],
                ladder: &'a [stacksim_core::simkernel::Rung],
                #[serde(flatten)]
                outcome: &'a SimOutcome,
            }
            p.report.write_json(
                "simulate.json",
                &Body {
                    seeds: &p.config.seeds,
                    ladder: &p.config.ladder,
                    outcome: &outcome,
                },
            )?
        }
        Format::Csv => {
            p.report.write_csv("simulate.csv", &seed_rows(&outcome))?;
            p.report.write_csv("simulate_rejection.csv", &outcome.rejection)?;
            p.report.write_csv("simulate_summary.csv", &outcome.summary)?
        }
    };
    if let Some(run) = outcome.runs.first() {
        p.report
            .write_bytes("trace.jsonl", run.trace(p.config.decode.sd.policy).to_json_lines().as_bytes())?;
    }

    let mut lines = summary_lines(&outcome.summary);
    for r in &outcome.rejection {
        lines.push(format!("{:<12} rejected draft ratio {:.3}", r.policy.name(), r.mean_rejected_ratio));
    }
    lines.push(format!(
        "equivalence with greedy decoding: {} ({} seeds x {} policies)",
        if outcome.equivalence.holds() { "holds" } else { "VIOLATED" },
        outcome.equivalence.seeds,
        outcome.equivalence.policies
    ));
    if !outcome.equivalence.holds() {
        return Err(equivalence_error(&outcome));
    }
    Ok(lines)
}

pub fn verify(args: &RunArgs, faults: Faults) -> Result<Vec<String>, CliError> {
    let p = prepare(args, "verify")?;
    let results = run_suites(faults);
    match p.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                suites: &'a [crate::verify::SuiteResult],
                passed: bool,
            }
            p.report.write_json(
                "verify.json",
                &Body {
                    suites: &results,
                    passed: results.iter().all(|r| r.passed),
                },
            )?
        }
        Format::Csv => p.report.write_csv("verify.csv", &results)?,
    };
    let lines: Vec<String> = results.iter().map(|r| r.line()).collect();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.suite).collect();
    if !failed.is_empty() {
        for l in &lines {
            println!("{l}");
        }
        return Err(CliError::Correctness(format!("suites failed: {}", failed.join(", "))));
    }
    Ok(lines)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub scenario: usize,
    pub draft_noise: f64,
    pub gamma_long: usize,
    pub chips: u64,
    pub dram_bandwidth_bytes_per_s: f64,
    pub rung: String,
    pub geomean_speedup_vs_base: f64,
    pub geomean_speedup_vs_prev: f64,
    pub mean_tokens_per_s: f64,
    pub mean_j_per_token: f64,
    pub apsd_rejected_ratio: f64,
    pub parallel_sd_rejected_ratio: f64,
    pub equivalence_holds: bool,
}

/// Cartesian product of the sweep lists, in declaration order with the
/// last list varying fastest.
pub fn sweep_scenarios(base: &ScenarioConfig) -> Vec<ScenarioConfig> {
    let s = &base.sweep;
    let or_base = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let noises = or_base(&s.draft_noise, base.decode.draft_noise);
    let gammas = if s.gamma_long.is_empty() { vec![base.decode.sd.gamma_long] } else { s.gamma_long.clone() };
    let chips = if s.chips.is_empty() { vec![base.memory.chips] } else { s.chips.clone() };
    let bws = or_base(&s.dram_bandwidth_bytes_per_s, base.memory.dram_bandwidth_bytes_per_s);
    let mut out = Vec::new();
    for &noise in &noises {
        for &gamma in &gammas {
            for &c in &chips {
                for &bw in &bws {
                    let mut cfg = base.clone();
                    cfg.decode.draft_noise = noise;
                    cfg.decode.sd.gamma_long = gamma;
                    cfg.memory.chips = c;
                    cfg.memory.dram_bandwidth_bytes_per_s = bw;
                    out.push(cfg);
                }
            }
        }
    }
    out
}

pub fn sweep(args: &RunArgs) -> Result<Vec<String>, CliError> {
    let p = prepare(args, "sweep")?;
    let scenarios = sweep_scenarios(&p.config);
    for (i, s) in scenarios.iter().enumerate() {
        s.validate().map_err(|e| match e {
            CliError::Invalid { field, msg } => CliError::Invalid {
                field: format!("sweep[{i}].{field}"),
                msg,
            },
            other => other,
        })?;
    }
    let outcomes = scenarios
        .par_iter()
        .map(experiments::simulate)
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (i, (cfg, o)) in scenarios.iter().zip(&outcomes).enumerate() {
        let ratio = |policy| {
            o.rejection
                .iter()
                .find(|r| r.policy == policy)
                .map_or(0.0, |r| r.mean_rejected_ratio)
        };
        for s in &o.summary {
            rows.push(SweepRow {
                scenario: i,
                draft_noise: cfg.decode.draft_noise,
                gamma_long: cfg.decode.sd.gamma_long,
                chips: cfg.memory.chips,
                dram_bandwidth_bytes_per_s: cfg.memory.dram_bandwidth_bytes_per_s,
                rung: s.rung.clone(),
                geomean_speedup_vs_base: s.geomean_speedup_vs_base,
                geomean_speedup_vs_prev: s.geomean_speedup_vs_prev,
                mean_tokens_per_s: s.mean_tokens_per_s,
                mean_j_per_token: s.mean_j_per_token,
                apsd_rejected_ratio: ratio(stacksim_core::specdec::Policy::Apsd),
                parallel_sd_rejected_ratio: ratio(stacksim_core::specdec::Policy::ParallelSd),
                equivalence_holds: o.equivalence.holds(),
            });
        }
    }
    match p.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                scenarios: usize,
                rows: &'a [SweepRow],
            }
            p.report.write_json(
                "sweep.json",
                &Body {
                    scenarios: scenarios.len(),
                    rows: &rows,
                },
            )?
        }
        Format::Csv => p.report.write_csv("sweep.csv", &rows)?,
    };
    let lines = rows
        .iter()
        .filter(|r| Some(&r.rung) == p.config.ladder.last().map(|l| &l.name))
        .map(|r| {
            format!(
                "scenario {:>3}: noise {:.3} gamma_long {:>2} chips {} -> {} x{:.3} vs base",
                r.scenario, r.draft_noise, r.gamma_long, r.chips, r.rung, r.geomean_speedup_vs_base
            )
        })
        .collect();
    if let Some(o) = outcomes.iter().find(|o| !o.equivalence.holds()) {
        return Err(equivalence_error(o));
    }
    Ok(lines)
}
