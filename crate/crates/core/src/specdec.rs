//! Greedy speculative decoding policies.
//!
//! Verification is exact-match: a draft token is accepted while it equals
//! the target's greedy choice at that position, and the target's own token
//! is appended after the accepted run. Every policy therefore emits the same
//! tokens as plain greedy decoding; the policies differ only in how much is
//! drafted, when drafting overlaps verification, and what gets thrown away.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toymodel::{Session, ToyError, ToyLm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("invalid decoding config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ToyError),
}

/// Incremental greedy-prediction state over a token sequence.
pub trait Cursor {
    fn tokens(&self) -> &[u32];
    fn truncate(&mut self, len: usize);
    fn extend(&mut self, tokens: &[u32]) -> Result<(), ToyError>;
    /// Greedy next token after position `i`.
    fn prediction(&self, i: usize) -> u32;
}

pub trait GreedyModel {
    fn max_context(&self) -> usize;
    fn cursor(&self) -> Box<dyn Cursor + '_>;
}

impl Cursor for Session<'_> {
    fn tokens(&self) -> &[u32] {
        Session::tokens(self)
    }

    fn truncate(&mut self, len: usize) {
        Session::truncate(self, len)
    }

    fn extend(&mut self, tokens: &[u32]) -> Result<(), ToyError> {
        Session::extend(self, tokens).map(|_| ())
    }

    fn prediction(&self, i: usize) -> u32 {
        Session::prediction(self, i)
    }
}

impl GreedyModel for ToyLm {
    fn max_context(&self) -> usize {
        self.config().max_context
    }

    fn cursor(&self) -> Box<dyn Cursor + '_> {
        Box::new(Session::new(self))
    }
}

/// A model given directly as a prefix → next-token function.
pub struct FnModel<F: Fn(&[u32]) -> u32> {
    pub next: F,
    pub max_context: usize,
}

struct FnCursor<'a, F: Fn(&[u32]) -> u32> {
    model: &'a FnModel<F>,
    tokens: Vec<u32>,
    preds: Vec<u32>,
}

impl<F: Fn(&[u32]) -> u32> Cursor for FnCursor<'_, F> {
    fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    fn truncate(&mut self, len: usize) {
        self.tokens.truncate(len);
        self.preds.truncate(len);
    }

    fn extend(&mut self, tokens: &[u32]) -> Result<(), ToyError> {
        let len = self.tokens.len() + tokens.len();
        if len > self.model.max_context {
            return Err(ToyError::ContextOverflow {
                len,
                max: self.model.max_context,
            });
        }
        for &t in tokens {
            self.tokens.push(t);
            self.preds.push((self.model.next)(&self.tokens));
        }
        Ok(())
    }

    fn prediction(&self, i: usize) -> u32 {
        self.preds[i]
    }
}

impl<F: Fn(&[u32]) -> u32> GreedyModel for FnModel<F> {
    fn max_context(&self) -> usize {
        self.max_context
    }

    fn cursor(&self) -> Box<dyn Cursor + '_> {
        Box::new(FnCursor {
            model: self,
            tokens: Vec::new(),
            preds: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Autoregressive: one target step per token.
    Ad,
    /// Draft `gamma_short`, then verify; no overlap.
    VanillaSd,
    /// Always draft `gamma_long` concurrently with verification.
    ParallelSd,
    /// Adaptive switching between short serial drafts and long parallel ones.
    Apsd,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Ad, Policy::VanillaSd, Policy::ParallelSd, Policy::Apsd];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Ad => "ad",
            Policy::VanillaSd => "vanilla_sd",
            Policy::ParallelSd => "parallel_sd",
            Policy::Apsd => "apsd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdPolicyConfig {
    pub policy: Policy,
    pub gamma_short: usize,
    pub gamma_long: usize,
    pub max_new_tokens: usize,
}

impl Default for SdPolicyConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Apsd,
            gamma_short: 4,
            gamma_long: 8,
            max_new_tokens: 128,
        }
    }
}

impl SdPolicyConfig {
    pub fn validate(&self) -> Result<(), SpecError> {
        if !(1 <= self.gamma_short && self.gamma_short <= self.gamma_long && self.gamma_long <= 32) {
            return Err(SpecError::Config(format!(
                "need 1 <= gamma_short ({}) <= gamma_long ({}) <= 32",
                self.gamma_short, self.gamma_long
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NonParallel,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    /// One autoregressive target step.
    TlmStep { round: usize },
    /// Draft-model tokens; `overlapped` drafts run during the round's verify.
    Draft {
        round: usize,
        tokens: usize,
        overlapped: bool,
        mode: Mode,
    },
    /// One target pass over `drafted` tokens.
    Verify {
        round: usize,
        drafted: usize,
        accepted: usize,
        bonus: u32,
        mode: Mode,
    },
    ModeSwitch { round: usize, from: Mode, to: Mode },
    /// Overlapped draft tokens thrown away.
    Discard { round: usize, tokens: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecodeTrace {
    pub policy: Policy,
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
    pub events: Vec<Event>,
}

impl DecodeTrace {
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn rounds(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Verify { .. } | Event::TlmStep { .. }))
            .count()
    }

    /// Mode of each verify round, in order.
    pub fn verify_modes(&self) -> Vec<Mode> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::Verify { mode, .. } => Some(*mode),
                _ => None,
            })
            .collect()
    }

    pub fn new_tokens(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RejectionStats {
    pub drafted: u64,
    pub rejected_in_verify: u64,
    pub discarded: u64,
    /// `(rejected_in_verify + discarded) / drafted`, 0 with no drafts.
    pub rejected_ratio: f64,
    /// DLM time spent on tokens that were thrown away.
    pub rejected_dlm_seconds: f64,
    pub total_dlm_seconds: f64,
}

pub fn rejection_stats(trace: &DecodeTrace, seconds_per_draft_token: f64) -> RejectionStats {
    let (mut drafted, mut rejected, mut discarded) = (0u64, 0u64, 0u64);
    for e in &trace.events {
        match *e {
            Event::Draft { tokens, .. } => drafted += tokens as u64,
            Event::Verify { drafted: d, accepted, .. } => rejected += (d - accepted) as u64,
            Event::Discard { tokens, .. } => discarded += tokens as u64,
            _ => {}
        }
    }
    let lost = rejected + discarded;
    RejectionStats {
        drafted,
        rejected_in_verify: rejected,
        discarded,
        rejected_ratio: if drafted == 0 { 0.0 } else { lost as f64 / drafted as f64 },
        rejected_dlm_seconds: lost as f64 * seconds_per_draft_token,
        total_dlm_seconds: drafted as f64 * seconds_per_draft_token,
    }
}

/// Brings `cursor` to exactly `seq`, reusing the common prefix.
fn sync(cursor: &mut dyn Cursor, seq: &[u32]) -> Result<(), ToyError> {
    let common = cursor.tokens().iter().zip(seq).take_while(|(a, b)| a == b).count();
    cursor.truncate(common);
    cursor.extend(&seq[common..])
}

struct Engine<'m> {
    tlm: Box<dyn Cursor + 'm>,
    dlm: Box<dyn Cursor + 'm>,
    seq: Vec<u32>,
    target_len: usize,
    events: Vec<Event>,
    round: usize,
}

impl<'m> Engine<'m> {
    fn new(tlm: &'m dyn GreedyModel, dlm: &'m dyn GreedyModel, prompt: &[u32], steps: usize) -> Result<Self, SpecError> {
        if prompt.is_empty() {
            return Err(ToyError::EmptyPrefix.into());
        }
        let target_len = prompt.len() + steps;
        for max in [tlm.max_context(), dlm.max_context()] {
            if target_len > max {
                return Err(ToyError::ContextOverflow { len: target_len, max }.into());
            }
        }
        Ok(Self {
            tlm: tlm.cursor(),
            dlm: dlm.cursor(),
            seq: prompt.to_vec(),
            target_len,
            events: Vec::new(),
            round: 0,
        })
    }

    fn remaining(&self) -> usize {
        self.target_len - self.seq.len()
    }

    /// Greedy draft of `n` tokens continuing `base`.
    fn draft(&mut self, base: &[u32], n: usize) -> Result<Vec<u32>, SpecError> {
        sync(self.dlm.as_mut(), base)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let next = self.dlm.prediction(self.dlm.tokens().len() - 1);
            self.dlm.extend(&[next])?;
            out.push(next);
        }
        Ok(out)
    }

    /// Verifies `drafts` against the committed sequence and commits the
    /// accepted run plus the target's token. Returns `(accepted, bonus)`.
    fn verify(&mut self, drafts: &[u32], mode: Mode) -> Result<(usize, u32), SpecError> {
        sync(self.tlm.as_mut(), &self.seq)?;
        let base = self.seq.len();
        self.tlm.extend(drafts)?;
        let accepted = drafts
            .iter()
            .enumerate()
            .take_while(|&(i, &d)| self.tlm.prediction(base - 1 + i) == d)
            .count();
        let bonus = self.tlm.prediction(base - 1 + accepted);
        self.seq.extend_from_slice(&drafts[..accepted]);
        self.seq.push(bonus);
        self.events.push(Event::Verify {
            round: self.round,
            drafted: drafts.len(),
            accepted,
            bonus,
            mode,
        });
        Ok((accepted, bonus))
    }

    fn serial_draft(&mut self, gamma: usize, mode: Mode) -> Result<Vec<u32>, SpecError> {
        let n = gamma.min(self.remaining() - 1);
        let base = self.seq.clone();
        let drafts = self.draft(&base, n)?;
        self.events.push(Event::Draft {
            round: self.round,
            tokens: n,
            overlapped: false,
            mode,
        });
        Ok(drafts)
    }

    fn switch(&mut self, from: Mode, to: Mode) {
        self.events.push(Event::ModeSwitch {
            round: self.round,
            from,
            to,
        });
    }

    /// One overlapped round: verify `batch` while drafting up to `gamma`
    /// tokens past it. Returns the continuation to verify next, or `None`
    /// when the overlapped draft had to be discarded.
    fn parallel_round(&mut self, batch: Vec<u32>, gamma: usize) -> Result<Option<Vec<u32>>, SpecError> {
        let after = self.remaining() - batch.len() - 1;
        let c_len = gamma.min(after);
        let mut base = self.seq.clone();
        base.extend_from_slice(&batch);
        let concurrent = self.draft(&base, c_len)?;
        if c_len > 0 {
            self.events.push(Event::Draft {
                round: self.round,
                tokens: c_len,
                overlapped: true,
                mode: Mode::Parallel,
            });
        }
        let (accepted, bonus) = self.verify(&batch, Mode::Parallel)?;
        if c_len == 0 {
            return Ok(None);
        }
        if accepted == batch.len() && concurrent[0] == bonus {
            Ok(Some(concurrent[1..].to_vec()))
        } else {
            self.events.push(Event::Discard {
                round: self.round,
                tokens: c_len,
            });
            Ok(None)
        }
    }

    fn finish(self, policy: Policy, prompt_len: usize) -> DecodeTrace {
        DecodeTrace {
            policy,
            prompt_len,
            tokens: self.seq,
            events: self.events,
        }
    }
}

pub fn decode_ad(tlm: &dyn GreedyModel, prompt: &[u32], steps: usize) -> Result<DecodeTrace, SpecError> {
    let mut e = Engine::new(tlm, tlm, prompt, steps)?;
    while e.remaining() > 0 {
        sync(e.tlm.as_mut(), &e.seq)?;
        let next = e.tlm.prediction(e.seq.len() - 1);
        e.seq.push(next);
        e.events.push(Event::TlmStep { round: e.round });
        e.round += 1;
    }
    Ok(e.finish(Policy::Ad, prompt.len()))
}

pub fn decode_sd(
    tlm: &dyn GreedyModel,
    dlm: &dyn GreedyModel,
    prompt: &[u32],
    steps: usize,
    gamma: usize,
) -> Result<DecodeTrace, SpecError> {
    if gamma == 0 {
        return Err(SpecError::Config("gamma must be at least 1".into()));
    }
    let mut e = Engine::new(tlm, dlm, prompt, steps)?;
    while e.remaining() > 0 {
        let drafts = e.serial_draft(gamma, Mode::NonParallel)?;
        e.verify(&drafts, Mode::NonParallel)?;
        e.round += 1;
    }
    Ok(e.finish(Policy::VanillaSd, prompt.len()))
}

pub fn decode_parallel_sd(
    tlm: &dyn GreedyModel,
    dlm: &dyn GreedyModel,
    prompt: &[u32],
    steps: usize,
    gamma: usize,
) -> Result<DecodeTrace, SpecError> {
    if gamma == 0 {
        return Err(SpecError::Config("gamma must be at least 1".into()));
    }
    let mut e = Engine::new(tlm, dlm, prompt, steps)?;
    let mut pending: Option<Vec<u32>> = None;
    while e.remaining() > 0 {
        let batch = match pending.take() {
            Some(b) => b,
            None => e.serial_draft(gamma, Mode::Parallel)?,
        };
        pending = e.parallel_round(batch, gamma)?;
        e.round += 1;
    }
    Ok(e.finish(Policy::ParallelSd, prompt.len()))
}

pub fn decode_apsd(
    tlm: &dyn GreedyModel,
    dlm: &dyn GreedyModel,
    prompt: &[u32],
    steps: usize,
    gamma_short: usize,
    gamma_long: usize,
) -> Result<DecodeTrace, SpecError> {
    SdPolicyConfig {
        policy: Policy::Apsd,
        gamma_short,
        gamma_long,
        max_new_tokens: steps,
    }
    .validate()?;
    let mut e = Engine::new(tlm, dlm, prompt, steps)?;
    let mut mode = Mode::NonParallel;
    let mut pending: Option<Vec<u32>> = None;
    while e.remaining() > 0 {
        match mode {
            Mode::NonParallel => {
                let drafts = e.serial_draft(gamma_short, mode)?;
                let (accepted, _) = e.verify(&drafts, mode)?;
                if !drafts.is_empty() && accepted == drafts.len() && e.remaining() > 0 {
                    e.switch(mode, Mode::Parallel);
                    mode = Mode::Parallel;
                }
            }
            Mode::Parallel => {
                let batch = match pending.take() {
                    Some(b) => b,
                    None => e.serial_draft(gamma_long, mode)?,
                };
                pending = e.parallel_round(batch, gamma_long)?;
                if pending.is_none() && e.remaining() > 0 {
                    e.switch(mode, Mode::NonParallel);
                    mode = Mode::NonParallel;
                }
            }
        }
        e.round += 1;
    }
    Ok(e.finish(Policy::Apsd, prompt.len()))
}

pub fn decode(
    config: &SdPolicyConfig,
    tlm: &dyn GreedyModel,
    dlm: &dyn GreedyModel,
    prompt: &[u32],
) -> Result<DecodeTrace, SpecError> {
    config.validate()?;
    let steps = config.max_new_tokens;
    match config.policy {
        Policy::Ad => decode_ad(tlm, prompt, steps),
        Policy::VanillaSd => decode_sd(tlm, dlm, prompt, steps, config.gamma_short),
        Policy::ParallelSd => decode_parallel_sd(tlm, dlm, prompt, steps, config.gamma_long),
        Policy::Apsd => decode_apsd(tlm, dlm, prompt, steps, config.gamma_short, config.gamma_long),
    }
}
