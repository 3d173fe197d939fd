//! Acceptance suite: one PASS/FAIL line per criterion. Oracles are computed
//! here from first principles wherever the library's own checker would
//! otherwise be grading itself.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use stacksim_cli::config::{ScenarioConfig, SCHEMA};
use stacksim_cli::experiments::{outlier_case, plan_for, random_plan, run_seed, train_bvq};
use stacksim_core::bvq::{planted_weights, BvqConfig, Clustering, SoftAssignment};
use stacksim_core::hadamard::{construct_npt, construct_sylvester, HadamardLibrary, HadamardMatrix};
use stacksim_core::memmodel::{cilm_bandwidth, fused_fetch_cycles, CbLayout, MappingMode, StackConfig};
use stacksim_core::rng::{gumbel, seeded, standard_normal};
use stacksim_core::rotation::{LocalRotation, DEFAULT_DEPTH_CAP, DEFAULT_ORDERS};
use stacksim_core::specdec::{Event, Policy, SdPolicyConfig};
use stacksim_core::toymodel::{ToyConfig, ToyLm};
use stacksim_core::wdos::{self, Program, Queue, Schedule, WdosError};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

// ---- 1 ----

fn gram_is_scaled_identity(h: &HadamardMatrix) -> bool {
    let n = h.order();
    let e = h.entries();
    (0..n).all(|i| {
        (0..n).all(|j| {
            let dot: i64 = (0..n).map(|k| e[i * n + k] as i64 * e[j * n + k] as i64).sum();
            dot == if i == j { n as i64 } else { 0 }
        })
    })
}

fn hadamard_exactness() -> Outcome {
    let t0 = Instant::now();
    let mut checked = Vec::new();
    let mut ok = true;
    for k in 0..=6 {
        let h = construct_sylvester(k).unwrap();
        ok &= h.entries().iter().all(|&v| v == 1 || v == -1) && gram_is_scaled_identity(&h);
        checked.push(h.order());
    }
    for m in [12, 20, 28] {
        let h = construct_npt(m).unwrap();
        ok &= h.order() == m && h.entries().iter().all(|&v| v == 1 || v == -1) && gram_is_scaled_identity(&h);
        checked.push(m);
    }
    let el = t0.elapsed();
    outcome(ok && within(el, 5), format!("orders {checked:?} exact in i64, {:.2?}", el))
}

// ---- 2 ----

fn gemm(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|c| (0..w.nrows()).map(|r| x[r] * w[[r, c]]).sum())
        .collect()
}

fn rel_l2(exact: &[f64], got: &[f64]) -> f64 {
    let num: f64 = exact.iter().zip(got).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = exact.iter().map(|a| a * a).sum();
    (num / den).sqrt()
}

fn computational_invariance() -> Outcome {
    let t0 = Instant::now();
    let lib = HadamardLibrary::new();
    let mut rng = seeded(0xacc2);
    let mut worst = 0.0f64;
    let mut two_segment = 0;
    for t in 0..100 {
        let n = [448, 768, 1024][t % 3];
        let plan = random_plan(&mut rng, n, &DEFAULT_ORDERS, DEFAULT_DEPTH_CAP).unwrap();
        two_segment += usize::from(!plan.is_single());
        let rot = LocalRotation::new(plan, &lib).unwrap();
        let x: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let w = Array2::from_shape_fn((n, 24), |_| standard_normal(&mut rng));
        let got = gemm(&rot.rotate_activation(&x).unwrap(), &rot.fold_weights(&w).unwrap());
        let r = rel_l2(&gemm(&x, &w), &got);
        worst = if r.is_nan() { f64::INFINITY } else { worst.max(r) };
    }
    let el = t0.elapsed();
    outcome(
        worst <= 1e-10 && within(el, 30),
        format!("100 triples ({two_segment} two-segment plans), max residual {worst:.2e} <= 1e-10, {el:.2?}"),
    )
}

// ---- 3 ----

/// Reference W4A8 GEMM: INT8 activation with scale max|x|/127, INT4 weights
/// per output column with scale max|col|/7, both round-half-to-even.
fn w4a8_reference(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    let q = |v: f64, s: f64, lo: f64, hi: f64| if s == 0.0 { 0.0 } else { (v / s).round_ties_even().clamp(lo, hi) * s };
    let sx = x.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 127.0;
    let xq: Vec<f64> = x.iter().map(|&v| q(v, sx, -127.0, 127.0)).collect();
    let mut wq = w.clone();
    for mut col in wq.columns_mut() {
        let s = col.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 7.0;
        col.mapv_inplace(|v| q(v, s, -8.0, 7.0));
    }
    gemm(&xq, &wq)
}

fn rotation_benefit() -> Outcome {
    let t0 = Instant::now();
    let config = ScenarioConfig::load(None).unwrap();
    let r = &config.rotation;
    let lib = HadamardLibrary::new();
    let rots: Vec<LocalRotation> = r
        .dims
        .iter()
        .map(|&n| LocalRotation::new(plan_for(n, r).unwrap(), &lib).unwrap())
        .collect();
    let mut wins = 0;
    for t in 0..100 {
        let rot = &rots[t % rots.len()];
        let (x, w, _, factor) = outlier_case(rot.plan().n, r.out_features, t as u64, 0, 50.0, 200.0);
        assert!((50.0..=200.0).contains(&factor));
        let exact = gemm(&x, &w);
        let plain = rel_l2(&exact, &w4a8_reference(&x, &w));
        let xr = rot.rotate_activation(&x).unwrap();
        let wr = rot.fold_weights(&w).unwrap();
        let rotated = rel_l2(&exact, &w4a8_reference(&xr, &wr));
        wins += usize::from(rotated < plain);
    }
    outcome(
        wins >= 95,
        format!(
            "rotation lowers W4A8 error in {wins}/100 trials (need >= 95; dims {:?}, {} output columns), {:.2?}",
            r.dims,
            r.out_features,
            t0.elapsed()
        ),
    )
}

// ---- 4 ----

fn tile_fusion_halving() -> Outcome {
    let config = StackConfig::default();
    let mut rng = seeded(0xacc4);
    let mut ok = true;
    let mut traces = 0;
    for (books, entries) in [(1u32, 16u32), (4, 16), (8, 64), (3, 256)] {
        for mode in [MappingMode::Vertical, MappingMode::Horizontal] {
            let layout = CbLayout::new(&config, mode, true, 32, entries, &[books]).unwrap();
            let total = layout.entry_count();
            for _ in 0..5 {
                let mut trace: Vec<(u32, u32)> = (0..total).flat_map(|e| [(e, e), (e + total, e)]).collect();
                trace.shuffle(&mut rng);
                let (naive, fused) = fused_fetch_cycles(&trace, &layout).unwrap();
                ok &= naive == 2 * total as u64 * layout.entry_cycles() && fused * 2 == naive;
                traces += 1;
            }
        }
    }
    outcome(ok, format!("fused = 50% of naive exactly on {traces} traces"))
}

// ---- 5 ----

fn bandwidth_identities() -> Outcome {
    let one = StackConfig::default();
    let four = StackConfig { chips: 4, ..one.clone() };
    let per_chip = one.bump_bits_per_cycle * one.reram_clock_hz / 8;
    let a = cilm_bandwidth(&one, true);
    let b = cilm_bandwidth(&four, true);
    outcome(
        a == 25_600_000_000 && per_chip == a && b == 102_400_000_000,
        format!("{a} B/s at 1 chip (2048 b x 100 MHz), {b} B/s at 4 chips"),
    )
}

// ---- 6 ----

fn sd_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut mismatches = 0;
    let mut runs = 0;
    let noises = [0.0, 0.02, 0.05, 0.1, 0.3];
    for seed in 0..100u64 {
        let decode = stacksim_cli::config::DecodeScenario {
            toy: ToyConfig::default(),
            sd: SdPolicyConfig {
                gamma_short: 1 + (seed % 4) as usize,
                gamma_long: 4 + (seed % 5) as usize,
                max_new_tokens: 48,
                ..SdPolicyConfig::default()
            },
            draft_noise: noises[seed as usize % noises.len()],
            prompt_len: 1 + (seed % 8) as usize,
        };
        let run = run_seed(&decode, 10_000 + seed).unwrap();
        let tlm = ToyLm::build(10_000 + seed, decode.toy).unwrap();
        let prompt = &run.traces[0].tokens[..decode.prompt_len];
        let reference = tlm.greedy_decode(prompt, decode.sd.max_new_tokens).unwrap();
        for t in &run.traces {
            runs += 1;
            mismatches += usize::from(t.tokens != reference);
        }
    }
    let el = t0.elapsed();
    outcome(
        mismatches == 0 && runs == 400 && within(el, 120),
        format!("100 triples x 4 policies, {mismatches} mismatches against greedy decoding, {el:.2?}"),
    )
}

// ---- 7 ----

/// Each instruction's index in the flat list, and `closure[a][b]` when `a`
/// must complete before `b` starts (program order or dependency, transitive).
fn happens_before(p: &Program) -> Option<(Vec<(Queue, usize)>, Vec<Vec<bool>>)> {
    let ins = p.instructions();
    let n = ins.len();
    let pos = |q: Queue, k: usize| p.queue(q)[k].id;
    let mut edges = vec![Vec::new(); n];
    let mut place = vec![(Queue::Compute, 0); n];
    for q in Queue::ALL {
        for (k, i) in p.queue(q).iter().enumerate() {
            place[i.id] = (q, k);
            if k > 0 {
                edges[pos(q, k - 1)].push(i.id);
            }
            for &(pq, count) in &i.parents {
                if count == 0 {
                    continue;
                }
                let list = p.queue(pq);
                if count as usize > list.len() {
                    return None;
                }
                edges[list[count as usize - 1].id].push(i.id);
            }
        }
    }
    let mut indeg = vec![0; n];
    for e in &edges {
        for &b in e {
            indeg[b] += 1;
        }
    }
    let mut order = Vec::new();
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    while let Some(a) = ready.pop() {
        order.push(a);
        for &b in &edges[a] {
            indeg[b] -= 1;
            if indeg[b] == 0 {
                ready.push(b);
            }
        }
    }
    if order.len() < n {
        return None;
    }
    let mut closure = vec![vec![false; n]; n];
    for &a in order.iter().rev() {
        for &b in &edges[a] {
            closure[a][b] = true;
            let row = closure[b].clone();
            for (c, &v) in row.iter().enumerate() {
                closure[a][c] |= v;
            }
        }
    }
    Some((place, closure))
}

fn schedule_respects(p: &Program, s: &Schedule, closure: &[Vec<bool>]) -> bool {
    let ins = p.instructions();
    let slot = |id: usize| s.slots.iter().find(|x| x.id == id).copied();
    for i in &ins {
        let Some(si) = slot(i.id) else { return false };
        if si.complete != si.issue + i.duration || si.queue != i.queue {
            return false;
        }
        for j in &ins {
            if closure[j.id][i.id] {
                match slot(j.id) {
                    Some(sj) if sj.complete <= si.issue => {}
                    _ => return false,
                }
            }
        }
    }
    true
}

fn wdos_soundness() -> Outcome {
    let mut rng = seeded(0xacc7);
    let (mut sound, mut strict_needed, mut strict_ok, mut le_ok) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=48);
        let p = wdos::random_acyclic(&mut rng, n, 16, 3);
        let Some((place, closure)) = happens_before(&p) else { continue };
        let (Ok(ooo), Ok(ino)) = (wdos::run(&p), wdos::in_order_reference(&p)) else { continue };
        sound += usize::from(schedule_respects(&p, &ooo, &closure) && schedule_respects(&p, &ino, &closure));
        le_ok += usize::from(ooo.makespan() <= ino.makespan());
        let independent = (0..place.len()).any(|a| {
            (0..place.len()).any(|b| place[a].0 != place[b].0 && !closure[a][b] && !closure[b][a])
        });
        if independent {
            strict_needed += 1;
            strict_ok += usize::from(ooo.makespan() < ino.makespan());
        }
    }
    let (mut cyclic_flagged, mut cyclic_total) = (0, 0);
    for _ in 0..300 {
        let n = rng.random_range(2..=48);
        let p = wdos::random_cyclic(&mut rng, n, 16, 3);
        if happens_before(&p).is_some() {
            continue;
        }
        cyclic_total += 1;
        cyclic_flagged += usize::from(matches!(wdos::run(&p), Err(WdosError::Deadlock { .. })));
    }
    let ok = sound == 1000 && le_ok == 1000 && strict_ok == strict_needed && cyclic_total > 0 && cyclic_flagged == cyclic_total;
    outcome(
        ok,
        format!(
            "1000 acyclic: {sound} sound, {le_ok} with ooo <= in-order, {strict_ok}/{strict_needed} strictly faster with independent work; {cyclic_flagged}/{cyclic_total} cyclic flagged"
        ),
    )
}

// ---- 8 ----

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn bvq_gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = seeded(0xacc8 + seed);
        let (n, dim, c) = (rng.random_range(1..=5), rng.random_range(1..=6), rng.random_range(2..=6));
        let tau = rng.random_range(0.3..2.0);
        let targets: Vec<f64> = (0..n * dim).map(|_| standard_normal(&mut rng)).collect();
        let noise: Vec<f64> = (0..n * c).map(|_| gumbel(&mut rng)).collect();
        let logits: Vec<f64> = (0..n * c).map(|_| standard_normal(&mut rng)).collect();
        let book: Vec<f64> = (0..c * dim).map(|_| standard_normal(&mut rng)).collect();
        let prob = SoftAssignment {
            targets: &targets,
            noise: &noise,
            dim,
            entries: c,
            tau,
        };
        let (gz, gb) = prob.gradient(&logits, &book);
        let fz = central_difference(|z| prob.loss(z, &book), &logits, 1e-5);
        let fb = central_difference(|b| prob.loss(&logits, b), &book, 1e-5);
        worst = worst.max(max_rel(&gz, &fz)).max(max_rel(&gb, &fb));
    }
    outcome(worst <= 1e-4, format!("20 instances, max relative error {worst:.2e} <= 1e-4"))
}

// ---- 9 ----

fn direct_int4_mse(w: &Array2<f64>) -> f64 {
    let s = w.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 7.0;
    w.iter()
        .map(|&v| {
            let q = (v / s).round_ties_even().clamp(-8.0, 7.0) * s;
            (q - v) * (q - v)
        })
        .sum::<f64>()
        / w.len() as f64
}

fn bvq_quality() -> Outcome {
    let t0 = Instant::now();
    let config = ScenarioConfig::load(None).unwrap();
    let b = &config.bvq;
    let mut wins = 0;
    let mut worst_ratio = 0.0f64;
    for seed in 0..20u64 {
        let w = planted_weights(b.rows, b.cols, b.train.vector_len, b.prototypes, b.noise, seed);
        let train = BvqConfig {
            seed,
            clustering: Clustering::PerBlockRow,
            ..b.train.clone()
        };
        let (model, _) = train_bvq(&w, &train).unwrap();
        let rec = model.reconstruct();
        let mse = w.iter().zip(rec.iter()).map(|(a, r)| (a - r) * (a - r)).sum::<f64>() / w.len() as f64;
        let direct = direct_int4_mse(&w);
        worst_ratio = worst_ratio.max(mse / direct);
        wins += usize::from(mse <= direct);
    }
    outcome(
        wins == 20,
        format!(
            "BVQ MSE <= direct INT4 MSE in {wins}/20 seeds (worst ratio {worst_ratio:.3}, planted noise {}), {:.2?}",
            b.noise,
            t0.elapsed()
        ),
    )
}

// ---- 10 / 11 / 12 ----

fn stacksim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stacksim"))
        .env_remove("STACKSIM_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ratio_bands(out: &Path) -> Outcome {
    let t0 = Instant::now();
    let o = stacksim(&["simulate", "--out", out.to_str().unwrap()]);
    let el = t0.elapsed();
    if o.status.code() != Some(0) {
        return outcome(false, format!("simulate exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("simulate.json")).unwrap()).unwrap();
    let summary = report["summary"].as_array().unwrap();
    let get = |rung: &str, key: &str| {
        summary
            .iter()
            .find(|s| s["rung"] == rung)
            .and_then(|s| s[key].as_f64())
            .unwrap_or(f64::NAN)
    };
    let a = get("w4a8_sd", "geomean_speedup_vs_prev");
    let b = get("bvq_rs_pnm", "geomean_speedup_vs_prev");
    let c = get("apsd", "geomean_speedup_vs_prev");
    let d = get("apsd", "geomean_speedup_vs_base");
    let ok = (3.4..=4.2).contains(&a) && (1.05..=1.6).contains(&b) && (1.05..=1.4).contains(&c) && (3.5..=9.0).contains(&d);
    outcome(
        ok && within(el, 60),
        format!(
            "(a) W4A8/BF16 {a:.3} in [3.4, 4.2]; (b) RS-PNM/W4A8 {b:.3} in [1.05, 1.6]; (c) APSD/RS-PNM {c:.3} in [1.05, 1.4]; (d) ladder {d:.3} in [3.5, 9.0]; {el:.2?}"
        ),
    )
}

fn rejected_ratio(events: &[Event]) -> f64 {
    let (mut drafted, mut lost) = (0usize, 0usize);
    for e in events {
        match e {
            Event::Draft { tokens, .. } => drafted += tokens,
            Event::Verify { drafted: d, accepted, .. } => lost += d - accepted,
            Event::Discard { tokens, .. } => lost += tokens,
            _ => {}
        }
    }
    lost as f64 / drafted.max(1) as f64
}

fn apsd_rejection() -> Outcome {
    let config = ScenarioConfig::load(None).unwrap();
    let (mut apsd, mut par, mut below) = (0.0, 0.0, 0);
    for &seed in &config.seeds {
        let run = run_seed(&config.decode, seed).unwrap();
        let a = rejected_ratio(&run.trace(Policy::Apsd).events);
        let p = rejected_ratio(&run.trace(Policy::ParallelSd).events);
        apsd += a;
        par += p;
        below += usize::from(a < p);
    }
    let n = config.seeds.len() as f64;
    let (apsd, par) = (apsd / n, par / n);
    let reduction = par - apsd;
    outcome(
        apsd < par && reduction >= 0.05,
        format!(
            "mean rejected ratio APSD {apsd:.3} vs parallel SD {par:.3}, reduction {:.1} pp (need >= 5); APSD lower on {below}/{} seeds",
            reduction * 100.0,
            config.seeds.len()
        ),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "meta.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn cli_determinism(root: &Path) -> Outcome {
    let cfg = root.join("determinism.toml");
    std::fs::write(
        &cfg,
        format!(
            "schema = {SCHEMA:?}\nseeds = [11, 12]\n[rotation]\ndims = [448, 1024]\nout_features = 128\n\
             [bvq.train]\nsteps = 60\n[decode.sd]\nmax_new_tokens = 40\n[sweep]\ndraft_noise = [0.02, 0.1]\n"
        ),
    )
    .unwrap();
    let mut differing = Vec::new();
    let mut checked = 0;
    for cmd in ["rotate-eval", "bvq-train", "simulate", "verify", "sweep"] {
        for format in ["json", "csv"] {
            let mut outputs = Vec::new();
            for run in 0..2 {
                let out = root.join(format!("{cmd}-{format}-{run}"));
                let o = stacksim(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "11", "--format", format]);
                if o.status.code() != Some(0) {
                    differing.push(format!("{cmd} exited {:?}", o.status.code()));
                }
                // stdout names the output directory; everything else must match
                let stdout = String::from_utf8_lossy(&o.stdout).replace(out.to_str().unwrap(), "<out>");
                outputs.push((dir_bytes(&out), stdout));
            }
            checked += outputs[0].0.len();
            if outputs[0] != outputs[1] || outputs[0].0.is_empty() {
                differing.push(format!("{cmd}/{format}"));
            }
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("5 commands x 2 formats run twice: {checked} report files byte-identical (meta.json excluded)")
        } else {
            format!("differences: {differing:?}")
        },
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let sim_out = tmp.path().join("simulate-defaults");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("hadamard exactness", Box::new(hadamard_exactness)),
        ("computational invariance", Box::new(computational_invariance)),
        ("rotation benefit", Box::new(rotation_benefit)),
        ("tile-fusion halving", Box::new(tile_fusion_halving)),
        ("bandwidth identities", Box::new(bandwidth_identities)),
        ("SD/APSD correctness", Box::new(sd_correctness)),
        ("WDOS soundness", Box::new(wdos_soundness)),
        ("BVQ gradient check", Box::new(bvq_gradient_check)),
        ("BVQ quality", Box::new(bvq_quality)),
        ("calibrated ratio bands", Box::new(move || ratio_bands(&sim_out))),
        ("APSD rejection reduction", Box::new(apsd_rejection)),
        ("CLI determinism", Box::new({
            let root = tmp.path().to_path_buf();
            move || cli_determinism(&root)
        })),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let r = check();
        failed += usize::from(!r.passed);
        println!("{} criterion {:>2} {name}: {}", if r.passed { "PASS" } else { "FAIL" }, i + 1, r.detail);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
