//! Workload-decoupled out-of-order scheduling over four single-issue queues.
//!
//! A dependency is a threshold `(parent queue, count)`: the instruction may
//! issue once `count` instructions of the parent queue have completed. So
//! the threshold points at the `count`-th instruction of that queue (and,
//! through program order, everything before it). A program deadlocks exactly
//! when these edges plus program order contain a cycle.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Queue {
    Transceiver,
    Compute,
    ReramLoad,
    Emac,
}

impl Queue {
    /// Priority order for equal-cycle events.
    pub const ALL: [Queue; 4] = [Queue::Transceiver, Queue::Compute, Queue::ReramLoad, Queue::Emac];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Queue::Transceiver => "transceiver",
            Queue::Compute => "compute",
            Queue::ReramLoad => "reram_load",
            Queue::Emac => "emac",
        }
    }
}

impl fmt::Display for Queue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Queue {
    type Err = WdosError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Queue::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| WdosError::UnknownQueue(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockedHead {
    pub id: usize,
    pub queue: Queue,
    /// `(parent queue, required, completed)` for every unmet threshold.
    pub unmet: Vec<(Queue, u64, u64)>,
}

fn describe(blocked: &[BlockedHead]) -> String {
    blocked
        .iter()
        .map(|b| {
            let needs: Vec<String> = b
                .unmet
                .iter()
                .map(|(q, need, have)| format!("{q}>={need} (have {have})"))
                .collect();
            format!("#{} on {} waits for {}", b.id, b.queue, needs.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WdosError {
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error("instruction #{id}: malformed threshold: {msg}")]
    MalformedThreshold { id: usize, msg: String },
    #[error("instruction #{id}: duration must be at least one cycle")]
    ZeroDuration { id: usize },
    #[error("instruction #{id} waits for {count} completions of {queue}, which holds only {len}")]
    Unsatisfiable { id: usize, queue: Queue, count: u64, len: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("deadlock at cycle {cycle}: {}", describe(.blocked))]
    Deadlock { cycle: u64, blocked: Vec<BlockedHead> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instruction {
    pub id: usize,
    pub queue: Queue,
    pub duration: u64,
    pub parents: Vec<(Queue, u64)>,
    pub tag: String,
}

/// Per-queue ordered instruction lists. Ids are assigned in push order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    queues: [Vec<Instruction>; 4],
    next_id: usize,
}

impl Program {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to `queue` and returns the new instruction's id.
    pub fn push(&mut self, queue: Queue, duration: u64, parents: &[(Queue, u64)], tag: impl Into<String>) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.queues[queue.index()].push(Instruction {
            id,
            queue,
            duration,
            parents: parents.to_vec(),
            tag: tag.into(),
        });
        id
    }

    pub fn queue(&self, q: Queue) -> &[Instruction] {
        &self.queues[q.index()]
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Instructions by id.
    pub fn instructions(&self) -> Vec<&Instruction> {
        let mut all: Vec<&Instruction> = self.queues.iter().flatten().collect();
        all.sort_by_key(|i| i.id);
        all
    }

    pub fn total_duration(&self) -> u64 {
        self.queues.iter().flatten().map(|i| i.duration).sum()
    }

    /// Static checks: positive durations, thresholds in `1..=len(parent)`.
    pub fn validate(&self) -> Result<(), WdosError> {
        for ins in self.queues.iter().flatten() {
            if ins.duration == 0 {
                return Err(WdosError::ZeroDuration { id: ins.id });
            }
            for &(q, count) in &ins.parents {
                if count == 0 {
                    return Err(WdosError::MalformedThreshold {
                        id: ins.id,
                        msg: format!("{q}:0 is always satisfied; omit it"),
                    });
                }
                let len = self.queues[q.index()].len();
                if count > len as u64 {
                    return Err(WdosError::Unsatisfiable {
                        id: ins.id,
                        queue: q,
                        count,
                        len,
                    });
                }
            }
        }
        Ok(())
    }

    /// Direct predecessors of each instruction (by id): the previous
    /// instruction in its queue and the instruction each threshold names.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.next_id];
        for queue in &self.queues {
            for (k, ins) in queue.iter().enumerate() {
                if k > 0 {
                    preds[ins.id].push(queue[k - 1].id);
                }
                for &(q, count) in &ins.parents {
                    if let Some(p) = self.queues[q.index()].get(count as usize - 1) {
                        preds[ins.id].push(p.id);
                    }
                }
            }
        }
        preds
    }

    /// Reachability matrix: `before[a][b]` iff `a` must complete before `b`
    /// issues. `None` when the dependency graph has a cycle.
    pub fn happens_before(&self) -> Option<Vec<Vec<bool>>> {
        let n = self.next_id;
        let preds = self.predecessors();
        let mut indegree = vec![0usize; n];
        let mut succs = vec![Vec::new(); n];
        for (b, ps) in preds.iter().enumerate() {
            for &a in ps {
                succs[a].push(b);
                indegree[b] += 1;
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        while let Some(a) = ready.pop() {
            order.push(a);
            for &b in &succs[a] {
                indegree[b] -= 1;
                if indegree[b] == 0 {
                    ready.push(b);
                }
            }
        }
        if order.len() < n {
            return None;
        }
        let mut before = vec![vec![false; n]; n];
        for &b in &order {
            for &a in &preds[b] {
                before[a][b] = true;
                for x in 0..n {
                    if before[x][a] {
                        before[x][b] = true;
                    }
                }
            }
        }
        Some(before)
    }

    /// True when two instructions in different queues are unordered by
    /// happens-before, i.e. some work can overlap.
    pub fn has_independent_work(&self) -> bool {
        let Some(before) = self.happens_before() else {
            return false;
        };
        let all = self.instructions();
        all.iter().enumerate().any(|(i, a)| {
            all[i + 1..]
                .iter()
                .any(|b| a.queue != b.queue && !before[a.id][b.id] && !before[b.id][a.id])
        })
    }

    /// One instruction per line: `queue duration parents tag`, where
    /// `parents` is `-` or `queue:count[,queue:count...]`. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self, WdosError> {
        let mut program = Program::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| WdosError::Parse { line, msg };
            let fields: Vec<&str> = content.split_whitespace().collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(err(format!("expected `queue duration parents [tag]`, got {content:?}")));
            }
            let queue: Queue = fields[0].parse().map_err(|e: WdosError| err(e.to_string()))?;
            let duration: u64 = fields[1]
                .parse()
                .map_err(|_| err(format!("bad duration {:?}", fields[1])))?;
            let mut parents = Vec::new();
            if fields[2] != "-" {
                for item in fields[2].split(',') {
                    let (q, c) = item
                        .split_once(':')
                        .ok_or_else(|| err(format!("malformed threshold {item:?}")))?;
                    let q: Queue = q.parse().map_err(|e: WdosError| err(e.to_string()))?;
                    let c: u64 = c.parse().map_err(|_| err(format!("malformed threshold {item:?}")))?;
                    parents.push((q, c));
                }
            }
            program.push(queue, duration, &parents, fields.get(3).copied().unwrap_or(""));
        }
        Ok(program)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ins in self.instructions() {
            let parents = if ins.parents.is_empty() {
                "-".to_string()
            } else {
                ins.parents
                    .iter()
                    .map(|(q, c)| format!("{q}:{c}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let tag = if ins.tag.is_empty() { String::new() } else { format!(" {}", ins.tag) };
            out.push_str(&format!("{} {} {}{}\n", ins.queue, ins.duration, parents, tag));
        }
        out
    }
}

/// `counts[p][q]`: completions of queue `p` that queue `q` has been told of.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CounterMatrix {
    pub counts: [[u64; 4]; 4],
}

impl CounterMatrix {
    pub fn get(&self, parent: Queue, child: Queue) -> u64 {
        self.counts[parent.index()][child.index()]
    }

    /// Synchronous notification: every queue learns of the completion.
    fn complete(&mut self, parent: Queue) {
        for c in &mut self.counts[parent.index()] {
            *c += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Slot {
    pub id: usize,
    pub queue: Queue,
    pub issue: u64,
    pub complete: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schedule {
    /// Indexed by instruction id.
    pub slots: Vec<Slot>,
    pub counters: CounterMatrix,
}

impl Schedule {
    pub fn makespan(&self) -> u64 {
        self.slots.iter().map(|s| s.complete).max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,queue,issue,complete\n");
        for s in &self.slots {
            out.push_str(&format!("{},{},{},{}\n", s.id, s.queue, s.issue, s.complete));
        }
        out
    }

    /// Checks thresholds and per-queue program order against `program`.
    pub fn check(&self, program: &Program) -> Result<(), String> {
        for q in Queue::ALL {
            let list = program.queue(q);
            for (k, ins) in list.iter().enumerate() {
                let s = self.slots[ins.id];
                if s.complete != s.issue + ins.duration {
                    return Err(format!("#{} runs {} cycles, expected {}", ins.id, s.complete - s.issue, ins.duration));
                }
                if k > 0 && s.issue < self.slots[list[k - 1].id].complete {
                    return Err(format!("#{} issued before its queue predecessor completed", ins.id));
                }
                for &(p, count) in &ins.parents {
                    let parent = &program.queue(p)[count as usize - 1];
                    if s.issue < self.slots[parent.id].complete {
                        return Err(format!("#{} issued before #{} completed", ins.id, parent.id));
                    }
                }
            }
        }
        Ok(())
    }
}

fn unmet(ins: &Instruction, completed: &dyn Fn(Queue) -> u64) -> Vec<(Queue, u64, u64)> {
    ins.parents
        .iter()
        .filter(|&&(p, c)| completed(p) < c)
        .map(|&(p, c)| (p, c, completed(p)))
        .collect()
}

/// Discrete-event execution. At each cycle completions are processed first
/// (queue priority order), then every idle queue whose head is ready issues.
pub fn run(program: &Program) -> Result<Schedule, WdosError> {
    program.validate()?;
    let mut counters = CounterMatrix::default();
    let mut slots: Vec<Option<Slot>> = vec![None; program.next_id];
    let mut head = [0usize; 4];
    let mut busy_until: [Option<u64>; 4] = [None; 4];
    let mut now = 0u64;
    let mut remaining = program.len();
    while remaining > 0 {
        for q in Queue::ALL {
            if busy_until[q.index()] == Some(now) {
                busy_until[q.index()] = None;
                counters.complete(q);
                remaining -= 1;
            }
        }
        for q in Queue::ALL {
            let qi = q.index();
            if busy_until[qi].is_some() {
                continue;
            }
            let Some(ins) = program.queues[qi].get(head[qi]) else {
                continue;
            };
            if unmet(ins, &|p| counters.get(p, q)).is_empty() {
                slots[ins.id] = Some(Slot {
                    id: ins.id,
                    queue: q,
                    issue: now,
                    complete: now + ins.duration,
                });
                busy_until[qi] = Some(now + ins.duration);
                head[qi] += 1;
            }
        }
        match busy_until.iter().flatten().min() {
            Some(&t) => now = t,
            None if remaining == 0 => break,
            None => {
                let blocked = Queue::ALL
                    .into_iter()
                    .filter_map(|q| {
                        program.queues[q.index()].get(head[q.index()]).map(|ins| BlockedHead {
                            id: ins.id,
                            queue: q,
                            unmet: unmet(ins, &|p| counters.get(p, q)),
                        })
                    })
                    .collect();
                return Err(WdosError::Deadlock { cycle: now, blocked });
            }
        }
    }
    Ok(Schedule {
        slots: slots.into_iter().map(|s| s.expect("every instruction ran")).collect(),
        counters,
    })
}

/// Serial baseline: one instruction at a time, visiting queues round-robin
/// and taking the first ready head.
pub fn in_order_reference(program: &Program) -> Result<Schedule, WdosError> {
    program.validate()?;
    let mut counters = CounterMatrix::default();
    let mut slots: Vec<Option<Slot>> = vec![None; program.next_id];
    let mut head = [0usize; 4];
    let mut now = 0u64;
    let mut next = 0usize;
    for _ in 0..program.len() {
        let pick = (0..4).map(|k| (next + k) % 4).find(|&qi| {
            program.queues[qi]
                .get(head[qi])
                .is_some_and(|ins| unmet(ins, &|p| counters.get(p, Queue::ALL[qi])).is_empty())
        });
        let Some(qi) = pick else {
            let blocked = Queue::ALL
                .into_iter()
                .filter_map(|q| {
                    program.queues[q.index()].get(head[q.index()]).map(|ins| BlockedHead {
                        id: ins.id,
                        queue: q,
                        unmet: unmet(ins, &|p| counters.get(p, q)),
                    })
                })
                .collect();
            return Err(WdosError::Deadlock { cycle: now, blocked });
        };
        let ins = &program.queues[qi][head[qi]];
        slots[ins.id] = Some(Slot {
            id: ins.id,
            queue: ins.queue,
            issue: now,
            complete: now + ins.duration,
        });
        now += ins.duration;
        counters.complete(ins.queue);
        head[qi] += 1;
        next = (qi + 1) % 4;
    }
    Ok(Schedule {
        slots: slots.into_iter().map(|s| s.expect("every instruction ran")).collect(),
        counters,
    })
}

/// Random acyclic program: instructions are generated in a global order and
/// only ever wait on instructions generated earlier.
pub fn random_acyclic<R: Rng + ?Sized>(rng: &mut R, instructions: usize, max_duration: u64, max_parents: usize) -> Program {
    let mut program = Program::new();
    for _ in 0..instructions {
        let queue = Queue::ALL[rng.random_range(0..4)];
        let mut parents = Vec::new();
        for _ in 0..rng.random_range(0..=max_parents) {
            let p = Queue::ALL[rng.random_range(0..4)];
            let len = program.queue(p).len() as u64;
            if p != queue && len > 0 {
                parents.push((p, rng.random_range(1..=len)));
            }
        }
        program.push(queue, rng.random_range(1..=max_duration), &parents, "");
    }
    program
}

/// Random program guaranteed to contain a dependency cycle: an acyclic
/// base, then a fresh instruction `y` waiting on an existing `x` while `x`
/// is made to wait on `y`.
pub fn random_cyclic<R: Rng + ?Sized>(rng: &mut R, instructions: usize, max_duration: u64, max_parents: usize) -> Program {
    let mut program = random_acyclic(rng, instructions.max(1), max_duration, max_parents);
    let candidates: Vec<(Queue, usize)> = Queue::ALL
        .into_iter()
        .flat_map(|q| (0..program.queue(q).len()).map(move |k| (q, k)))
        .collect();
    let (xq, xk) = candidates[rng.random_range(0..candidates.len())];
    let others: Vec<Queue> = Queue::ALL.into_iter().filter(|&q| q != xq).collect();
    let yq = others[rng.random_range(0..others.len())];
    program.push(yq, rng.random_range(1..=max_duration), &[(xq, xk as u64 + 1)], "");
    let y_count = program.queue(yq).len() as u64;
    program.queues[xq.index()][xk].parents.push((yq, y_count));
    program
}
