//! Timing and energy for decode traces.
//!
//! Each model pass is a roofline: `max(ops / throughput, dram bytes / dram
//! bandwidth, reram bytes / reram bandwidth)`. A verify over `n` drafts is
//! one target weight pass carrying `n + 1` positions of compute. Overlapped
//! rounds cost `max(drafting, verify)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memmodel::{cilm_bandwidth, fused_fetch_cycles, CbLayout, MappingMode, MemError, StackConfig};
use crate::specdec::{DecodeTrace, Event, Policy};
use crate::wdos::{self, Program, Queue, WdosError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid workload config: {0}")]
    Config(String),
    #[error("trace is inconsistent: {0}")]
    Trace(String),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Wdos(#[from] WdosError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Bf16,
    W4a8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DlmSource {
    /// Quantized at the TLM precision and streamed from DRAM.
    Dram,
    /// BVQ: codebook entries from ReRAM, indices from DRAM.
    ReramBvq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tlm,
    Dlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub tlm_params: f64,
    /// TLM parameters kept at 16 bits under W4A8 (output head).
    pub tlm_fp_params: f64,
    pub dlm_params: f64,
    pub dlm_fp_params: f64,
    pub compute_ops_per_s: f64,
    /// Operations per parameter per token (2 for one multiply-add).
    pub ops_per_param: f64,
    /// BVQ index geometry for the ReRAM-resident draft model.
    pub bvq_vector_len: u32,
    pub bvq_codebook_entries: u32,
    /// Token tiles sharing each fetched codebook entry.
    pub tiles_per_entry: u32,
    pub cilm: bool,
    /// Compose overlapped rounds through a WDOS program at 1 ns ticks.
    pub wdos_detail: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            tlm_params: 6.74e9,
            tlm_fp_params: 1.31e8,
            dlm_params: 1.1e9,
            dlm_fp_params: 6.55e7,
            compute_ops_per_s: 2.33e12,
            ops_per_param: 2.0,
            bvq_vector_len: 8,
            bvq_codebook_entries: 16,
            tiles_per_entry: 2,
            cilm: true,
            wdos_detail: false,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        for (v, name) in [
            (self.tlm_params, "tlm_params"),
            (self.dlm_params, "dlm_params"),
            (self.compute_ops_per_s, "compute_ops_per_s"),
            (self.ops_per_param, "ops_per_param"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(0.0..=self.tlm_params).contains(&self.tlm_fp_params) || !(0.0..=self.dlm_params).contains(&self.dlm_fp_params) {
            return bad("fp_params must lie in [0, params]");
        }
        if self.bvq_vector_len == 0 || !self.bvq_codebook_entries.is_power_of_two() || self.tiles_per_entry == 0 {
            return bad("bvq_vector_len and tiles_per_entry must be positive, bvq_codebook_entries a power of two");
        }
        Ok(())
    }
}

/// Hardware variant a run is costed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hardware {
    pub precision: Precision,
    pub dlm_source: DlmSource,
}

/// Bytes and ops of a single weight pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PassCost {
    pub dram_bytes: f64,
    pub reram_bytes: f64,
    pub ops: f64,
}

pub struct Costing<'a> {
    pub workload: &'a WorkloadConfig,
    pub stack: &'a StackConfig,
    pub hardware: Hardware,
    fused_fraction: f64,
}

fn weight_bytes(params: f64, fp_params: f64, precision: Precision) -> f64 {
    match precision {
        Precision::Bf16 => params * 2.0,
        Precision::W4a8 => (params - fp_params) * 0.5 + fp_params * 2.0,
    }
}

impl<'a> Costing<'a> {
    pub fn new(workload: &'a WorkloadConfig, stack: &'a StackConfig, hardware: Hardware) -> Result<Self, SimError> {
        workload.validate()?;
        stack.validate()?;
        // Fraction of codebook reads left after tile fusion, measured on a
        // trace where every entry serves `tiles_per_entry` tiles.
        let entries = workload.bvq_codebook_entries;
        let entry_bits = workload.bvq_vector_len as u64 * 4;
        let layout = CbLayout::new(stack, MappingMode::Vertical, workload.cilm, entry_bits, entries, &[1])?;
        let trace: Vec<(u32, u32)> = (0..entries * workload.tiles_per_entry)
            .map(|t| (t, t / workload.tiles_per_entry))
            .collect();
        let (naive, fused) = fused_fetch_cycles(&trace, &layout)?;
        Ok(Self {
            workload,
            stack,
            hardware,
            fused_fraction: fused as f64 / naive as f64,
        })
    }

    pub fn fused_fraction(&self) -> f64 {
        self.fused_fraction
    }

    /// One pass of `role` over `positions` tokens.
    pub fn pass(&self, role: Role, positions: usize) -> PassCost {
        let w = self.workload;
        let (params, fp) = match role {
            Role::Tlm => (w.tlm_params, w.tlm_fp_params),
            Role::Dlm => (w.dlm_params, w.dlm_fp_params),
        };
        let ops = params * w.ops_per_param * positions as f64;
        match (role, self.hardware.dlm_source) {
            (Role::Dlm, DlmSource::ReramBvq) => {
                let quantized = params - fp;
                let index_bits = w.bvq_codebook_entries.trailing_zeros() as f64;
                PassCost {
                    dram_bytes: quantized * index_bits / w.bvq_vector_len as f64 / 8.0 + fp * 2.0,
                    reram_bytes: quantized * 0.5 * self.fused_fraction,
                    ops,
                }
            }
            _ => PassCost {
                dram_bytes: weight_bytes(params, fp, self.hardware.precision),
                reram_bytes: 0.0,
                ops,
            },
        }
    }

    pub fn reram_bandwidth(&self) -> f64 {
        cilm_bandwidth(self.stack, self.workload.cilm) as f64
    }

    /// `(compute, dram, reram)` seconds of a pass.
    pub fn components(&self, c: &PassCost) -> (f64, f64, f64) {
        (
            c.ops / self.workload.compute_ops_per_s,
            c.dram_bytes / self.stack.dram_bandwidth_bytes_per_s,
            c.reram_bytes / self.reram_bandwidth(),
        )
    }

    pub fn latency(&self, c: &PassCost) -> f64 {
        let (a, b, d) = self.components(c);
        a.max(b).max(d)
    }

    pub fn energy(&self, c: &PassCost) -> f64 {
        let e = &self.stack.energy;
        (c.dram_bytes * e.dram_pj_per_byte + c.reram_bytes * e.reram_pj_per_byte + c.ops / 2.0 * e.pj_per_mac) * 1e-12
    }

    pub fn step_latency(&self, role: Role) -> f64 {
        self.latency(&self.pass(role, 1))
    }
}

/// Seconds spent in one overlapped round, composed through WDOS: target
/// weights stream on EMAC; each draft step loads (ReRAM or EMAC, by DLM
/// source) then computes; a transceiver hop hands the result back.
pub fn wdos_round_seconds(costing: &Costing<'_>, drafts: usize, verify: &PassCost) -> Result<(f64, f64), SimError> {
    let ticks = |s: f64| ((s * 1e9).ceil() as u64).max(1);
    let d = costing.pass(Role::Dlm, 1);
    let (dc, dd, dr) = costing.components(&d);
    let load_queue = match costing.hardware.dlm_source {
        DlmSource::ReramBvq => Queue::ReramLoad,
        DlmSource::Dram => Queue::Emac,
    };
    let mut p = Program::new();
    p.push(Queue::Emac, ticks(costing.latency(verify)), &[], "verify");
    for i in 0..drafts {
        p.push(load_queue, ticks(dd.max(dr)), &[], format!("dlm_load_{i}"));
        p.push(Queue::Compute, ticks(dc), &[(load_queue, (i + 1 + usize::from(load_queue == Queue::Emac)) as u64)], format!("dlm_step_{i}"));
    }
    let mut parents = vec![(Queue::Emac, 1)];
    if drafts > 0 {
        parents.push((Queue::Compute, drafts as u64));
    }
    p.push(Queue::Transceiver, 1, &parents, "handoff");
    let ooo = wdos::run(&p)?;
    let serial = wdos::in_order_reference(&p)?;
    Ok((ooo.makespan() as f64 * 1e-9, serial.makespan() as f64 * 1e-9))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimReport {
    pub policy: Option<Policy>,
    pub new_tokens: usize,
    pub rounds: usize,
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
    pub total_seconds: f64,
    pub tokens_per_s: f64,
    pub energy_j: f64,
    pub j_per_token: f64,
    pub tlm_seconds: f64,
    pub dlm_serial_seconds: f64,
    pub overlapped_seconds: f64,
    pub dram_bytes: f64,
    pub reram_bytes: f64,
    pub ops: f64,
}

impl SimReport {
    fn charge(&mut self, costing: &Costing<'_>, c: &PassCost) {
        self.dram_bytes += c.dram_bytes;
        self.reram_bytes += c.reram_bytes;
        self.ops += c.ops;
        self.energy_j += costing.energy(c);
    }
}

pub fn simulate_run(trace: &DecodeTrace, costing: &Costing<'_>) -> Result<SimReport, SimError> {
    let mut r = SimReport {
        policy: Some(trace.policy),
        new_tokens: trace.tokens.len() - trace.prompt_len,
        ..SimReport::default()
    };
    let t_d = costing.step_latency(Role::Dlm);

    // Prefill: one batched pass per model over the prompt.
    let uses_dlm = trace.events.iter().any(|e| matches!(e, Event::Draft { .. }));
    let pre_t = costing.pass(Role::Tlm, trace.prompt_len);
    r.prefill_seconds += costing.latency(&pre_t);
    r.charge(costing, &pre_t);
    if uses_dlm {
        let pre_d = costing.pass(Role::Dlm, trace.prompt_len);
        r.prefill_seconds += costing.latency(&pre_d);
        r.charge(costing, &pre_d);
    }

    let mut i = 0;
    let events = &trace.events;
    let mut produced = 0usize;
    while i < events.len() {
        match events[i] {
            Event::TlmStep { .. } => {
                let c = costing.pass(Role::Tlm, 1);
                let t = costing.latency(&c);
                r.decode_seconds += t;
                r.tlm_seconds += t;
                r.charge(costing, &c);
                r.rounds += 1;
                produced += 1;
                i += 1;
            }
            Event::Draft { tokens, overlapped: false, .. } => {
                let c = costing.pass(Role::Dlm, 1);
                for _ in 0..tokens {
                    r.charge(costing, &c);
                }
                r.decode_seconds += tokens as f64 * t_d;
                r.dlm_serial_seconds += tokens as f64 * t_d;
                i += 1;
            }
            Event::Draft { tokens, overlapped: true, round, .. } => {
                let Some(Event::Verify { drafted, accepted, round: vr, .. }) = events.get(i + 1).cloned() else {
                    return Err(SimError::Trace(format!("overlapped draft in round {round} is not followed by a verify")));
                };
                if vr != round {
                    return Err(SimError::Trace(format!("overlapped draft in round {round} pairs with verify of round {vr}")));
                }
                let dc = costing.pass(Role::Dlm, 1);
                for _ in 0..tokens {
                    r.charge(costing, &dc);
                }
                let vc = costing.pass(Role::Tlm, drafted + 1);
                r.charge(costing, &vc);
                let t_v = costing.latency(&vc);
                let t = if costing.workload.wdos_detail {
                    wdos_round_seconds(costing, tokens, &vc)?.0
                } else {
                    (tokens as f64 * t_d).max(t_v)
                };
                r.decode_seconds += t;
                r.overlapped_seconds += t;
                r.tlm_seconds += t_v;
                r.rounds += 1;
                produced += accepted + 1;
                i += 2;
            }
            Event::Verify { drafted, accepted, .. } => {
                let c = costing.pass(Role::Tlm, drafted + 1);
                let t = costing.latency(&c);
                r.decode_seconds += t;
                r.tlm_seconds += t;
                r.charge(costing, &c);
                r.rounds += 1;
                produced += accepted + 1;
                i += 1;
            }
            Event::ModeSwitch { .. } | Event::Discard { .. } => i += 1,
        }
    }
    if produced != r.new_tokens {
        return Err(SimError::Trace(format!(
            "events produce {produced} tokens but the trace holds {}",
            r.new_tokens
        )));
    }
    r.total_seconds = r.prefill_seconds + r.decode_seconds;
    r.tokens_per_s = if r.decode_seconds > 0.0 { r.new_tokens as f64 / r.decode_seconds } else { 0.0 };
    r.j_per_token = if r.new_tokens > 0 { r.energy_j / r.new_tokens as f64 } else { 0.0 };
    Ok(r)
}

/// One step of the comparison ladder: a hardware variant plus a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rung {
    pub name: String,
    pub precision: Precision,
    pub dlm_source: DlmSource,
    pub policy: Policy,
}

impl Rung {
    pub fn hardware(&self) -> Hardware {
        Hardware {
            precision: self.precision,
            dlm_source: self.dlm_source,
        }
    }
}

pub fn default_ladder() -> Vec<Rung> {
    let rung = |name: &str, precision, dlm_source, policy| Rung {
        name: name.to_string(),
        precision,
        dlm_source,
        policy,
    };
    vec![
        rung("bf16_sd", Precision::Bf16, DlmSource::Dram, Policy::VanillaSd),
        rung("w4a8_sd", Precision::W4a8, DlmSource::Dram, Policy::VanillaSd),
        rung("bvq_rs_pnm", Precision::W4a8, DlmSource::ReramBvq, Policy::VanillaSd),
        rung("apsd", Precision::W4a8, DlmSource::ReramBvq, Policy::Apsd),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub seed: u64,
    pub rung: String,
    pub report: SimReport,
    /// Decode-time speedup over the first rung.
    pub speedup_vs_base: f64,
    /// Decode-time speedup over the previous rung.
    pub speedup_vs_prev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderSummary {
    pub rung: String,
    pub geomean_speedup_vs_base: f64,
    pub geomean_speedup_vs_prev: f64,
    pub mean_tokens_per_s: f64,
    pub mean_j_per_token: f64,
}

pub fn geomean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    libm::exp(values.iter().map(|v| libm::log(*v)).sum::<f64>() / values.len() as f64)
}

/// Costs per-seed traces (one per policy) under each rung and summarizes.
pub fn compare_policies(
    ladder: &[Rung],
    traces: &[(u64, Vec<DecodeTrace>)],
    workload: &WorkloadConfig,
    stack: &StackConfig,
) -> Result<(Vec<LadderRow>, Vec<LadderSummary>), SimError> {
    let mut rows = Vec::new();
    for (seed, per_policy) in traces {
        let mut base = None;
        let mut prev = None;
        for rung in ladder {
            let trace = per_policy
                .iter()
                .find(|t| t.policy == rung.policy)
                .ok_or_else(|| SimError::Trace(format!("no {} trace for seed {seed}", rung.policy.name())))?;
            let costing = Costing::new(workload, stack, rung.hardware())?;
            let report = simulate_run(trace, &costing)?;
            let t = report.decode_seconds;
            let b = *base.get_or_insert(t);
            let p = prev.replace(t).unwrap_or(t);
            rows.push(LadderRow {
                seed: *seed,
                rung: rung.name.clone(),
                report,
                speedup_vs_base: b / t,
                speedup_vs_prev: p / t,
            });
        }
    }
    let summary = ladder
        .iter()
        .map(|rung| {
            let mine: Vec<&LadderRow> = rows.iter().filter(|r| r.rung == rung.name).collect();
            let n = mine.len().max(1) as f64;
            LadderSummary {
                rung: rung.name.clone(),
                geomean_speedup_vs_base: geomean(&mine.iter().map(|r| r.speedup_vs_base).collect::<Vec<_>>()),
                geomean_speedup_vs_prev: geomean(&mine.iter().map(|r| r.speedup_vs_prev).collect::<Vec<_>>()),
                mean_tokens_per_s: mine.iter().map(|r| r.report.tokens_per_s).sum::<f64>() / n,
                mean_j_per_token: mine.iter().map(|r| r.report.j_per_token).sum::<f64>() / n,
            }
        })
        .collect();
    Ok((rows, summary))
}
