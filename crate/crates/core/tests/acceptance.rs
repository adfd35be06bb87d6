//! Acceptance criteria, one line per criterion.
//!
//! Runs without the libtest harness so the report is printed on every
//! `cargo test`. Reference values come from oracles written here, not from
//! the library paths under test.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use fusedkv::attention::{attend_fused, AttentionConfig};
use fusedkv::cache_sharing::{
    init_equivalent, iterative_reconstruct, plan_for_strategy, reconstruct, AuxiliaryWeights, FusionWeight, Granularity,
    LayerCache, Strategy,
};
use fusedkv::costmodel::{roofline_latency, table1_costs, Bound, DeviceProfile, Method, WorkloadSpec};
use fusedkv::model::{build_model, decode, train, Example, LossObjective, Model, ModelConfig, Task, TrainConfig, TrainReport};
use fusedkv::numerics::{grad_check_extended, Tensor};
use fusedkv::rope::{fused_key_score, score_decomposed, score_direct, PairSymmetricWeight, RopeSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps the oracle inputs independent of the library sampler.
    (0..n)
        .map(|_| {
            let (u, v): (f64, f64) = (r.random::<f64>().max(1e-300), r.random());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

fn tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(r, n)).unwrap()
}

fn pair_symmetric(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    normal_vec(r, d / 2).into_iter().flat_map(|x| [x, x]).collect()
}

fn gate(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- oracles ----

/// Rotates one head vector to position `pos` pair by pair.
fn oracle_rotate(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for j in 0..d / 2 {
        let theta = base.powf(-2.0 * j as f64 / d as f64);
        let (s, c) = (pos as f64 * theta).sin_cos();
        out[2 * j] = x[2 * j] * c - x[2 * j + 1] * s;
        out[2 * j + 1] = x[2 * j] * s + x[2 * j + 1] * c;
    }
    out
}

/// `Σᵢ wᵢ (R_m q)ᵢ (R_n k)ᵢ`.
fn oracle_score(q: &[f64], k: &[f64], m: usize, n: usize, w: &[f64]) -> f64 {
    let (rq, rk) = (oracle_rotate(q, m, 10_000.0), oracle_rotate(k, n, 10_000.0));
    (0..q.len()).map(|i| w[i] * rq[i] * rk[i]).sum()
}

/// Causal attention of one query head over explicit key/value rows, all
/// positions already applied.
fn oracle_attention_head(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], qpos: &[usize], kpos: &[usize]) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .zip(qpos)
        .map(|(qi, &pi)| {
            let vis: Vec<usize> = (0..k.len()).filter(|&j| kpos[j] <= pi).collect();
            let s: Vec<f64> = vis
                .iter()
                .map(|&j| scale * qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (p, &j) in e.iter().zip(&vis) {
                for (o, x) in out.iter_mut().zip(&v[j]) {
                    *o += p / z * x;
                }
            }
            out
        })
        .collect()
}

fn rows(t: &Tensor, head: usize) -> Vec<Vec<f64>> {
    let (_, s, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..s).map(|i| (0..d).map(|c| t.get(&[head, i, c])).collect()).collect()
}

// ---- criteria ----

fn c1_rope_identity() -> Outcome {
    let s = RopeSchedule::with_default_base(16).unwrap();
    let mut r = rng(101);
    let (mut identity, mut vs_oracle): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let (q, k, w) = (normal_vec(&mut r, 16), normal_vec(&mut r, 16), normal_vec(&mut r, 16));
        let (m, n) = (r.random_range(0..8192), r.random_range(0..8192));
        let (qt, kt) = (Tensor::from_vec(q.clone()), Tensor::from_vec(k.clone()));
        let direct = score_direct(&qt, &kt, m, n, &w, &s).unwrap();
        let decomposed = score_decomposed(&qt, &kt, m, n, &w, &s).unwrap();
        identity = identity.max((direct - decomposed).abs());
        vs_oracle = vs_oracle.max((direct - oracle_score(&q, &k, m, n, &w)).abs());
    }
    gate(
        identity < 1e-10 && vs_oracle < 1e-10,
        format!("1000 draws: direct vs decomposed {identity:.2e}, direct vs oracle {vs_oracle:.2e} (tol 1e-10)"),
    )
}

fn c2_relative_position() -> Outcome {
    let s = RopeSchedule::with_default_base(16).unwrap();
    let mut r = rng(102);
    let mut dev: f64 = 0.0;
    for _ in 0..1000 {
        let (q, k, w) = (normal_vec(&mut r, 16), normal_vec(&mut r, 16), pair_symmetric(&mut r, 16));
        let (m, n, delta) = (r.random_range(0..4096), r.random_range(0..4096), r.random_range(1..4096));
        let (qt, kt) = (Tensor::from_vec(q), Tensor::from_vec(k));
        let a = score_direct(&qt, &kt, m, n, &w, &s).unwrap();
        let b = score_direct(&qt, &kt, m + delta, n + delta, &w, &s).unwrap();
        dev = dev.max((a - b).abs());
    }
    // First pair weighted (2, 0), q = k = e0, shifted from 0 to 1:
    // 2 - 2cos²(1) = 2sin²(1).
    let s4 = RopeSchedule::with_default_base(4).unwrap();
    let e0: Tensor = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
    let w = [2.0f64, 0.0, 1.0, 1.0];
    let pinned = (score_direct(&e0, &e0, 0, 0, &w, &s4).unwrap() - score_direct(&e0, &e0, 1, 1, &w, &s4).unwrap()).abs();
    let expected = 2.0 * 1f64.sin().powi(2);
    gate(
        dev < 1e-10 && pinned > 1e-3 && (pinned - expected).abs() < 1e-12,
        format!("symmetric shift {dev:.2e} (tol 1e-10); pinned asymmetric case {pinned:.4} (need > 1e-3)"),
    )
}

/// Fused attention with keys written at positions `start..`, computed by the
/// library and by the oracle (materialised fused keys and values).
fn shifted_attention(
    start: usize,
    q: &Tensor,
    keys: &[Tensor],
    values: &[Tensor],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
) -> (Tensor, Vec<Vec<Vec<f64>>>) {
    let (hq, hkv, s, d) = (q.shape()[0], keys[0].shape()[0], q.shape()[1], q.shape()[2]);
    let sched = RopeSchedule::with_default_base(d).unwrap();
    let pos: Vec<usize> = (start..start + s).collect();
    let qr = sched.rotate(q, &pos, false).unwrap();
    let caches: Vec<LayerCache> = keys
        .iter()
        .zip(values)
        .map(|(k, v)| LayerCache::starting_at(1, sched.rotate(k, &pos, false).unwrap(), v.clone(), start).unwrap())
        .collect();
    let fk: Vec<FusionWeight> = wk
        .iter()
        .map(|w| FusionWeight::PairSymmetric(PairSymmetricWeight::from_expanded(w).unwrap()))
        .collect();
    let fv: Vec<FusionWeight> = wv.iter().map(|w| FusionWeight::Vector(w.clone())).collect();
    let kt: Vec<_> = caches.iter().zip(&fk).collect();
    let vt: Vec<_> = caches.iter().zip(&fv).collect();
    let lib = attend_fused(&qr, &kt, &vt, &AttentionConfig::new(hq, hkv, d).unwrap(), &pos).unwrap();

    let group = hq / hkv;
    let oracle = (0..hq)
        .map(|h| {
            let g = h / group;
            let qh: Vec<Vec<f64>> = rows(q, h).iter().zip(&pos).map(|(x, &p)| oracle_rotate(x, p, 10_000.0)).collect();
            let mut kf = vec![vec![0.0; d]; s];
            let mut vf = vec![vec![0.0; d]; s];
            for (src, (w, u)) in wk.iter().zip(wv).enumerate() {
                for (t, &p) in pos.iter().enumerate() {
                    let kr = oracle_rotate(&rows(&keys[src], g)[t], p, 10_000.0);
                    let vr = &rows(&values[src], g)[t];
                    for c in 0..d {
                        kf[t][c] += w[c] * kr[c];
                        vf[t][c] += u[c] * vr[c];
                    }
                }
            }
            oracle_attention_head(&qh, &kf, &vf, &pos, &pos)
        })
        .collect();
    (lib, oracle)
}

fn c3_fused_linearity() -> Outcome {
    let s = RopeSchedule::with_default_base(16).unwrap();
    let mut r = rng(103);
    let mut lin: f64 = 0.0;
    for _ in 0..500 {
        let q = normal_vec(&mut r, 16);
        let keys: Vec<Vec<f64>> = (0..3).map(|_| normal_vec(&mut r, 16)).collect();
        let ws: Vec<Vec<f64>> = (0..3).map(|_| pair_symmetric(&mut r, 16)).collect();
        let (m, n) = (r.random_range(0..4096), r.random_range(0..4096));
        let kt: Vec<Tensor> = keys.iter().map(|k| Tensor::from_vec(k.clone())).collect();
        let pw: Vec<PairSymmetricWeight> = ws.iter().map(|w| PairSymmetricWeight::from_expanded(w).unwrap()).collect();
        let fused = fused_key_score(&Tensor::from_vec(q.clone()), &kt, (m, n), &pw, &s).unwrap();
        let parts: f64 = keys.iter().zip(&ws).map(|(k, w)| oracle_score(&q, k, m, n, w)).sum();
        lin = lin.max((fused - parts).abs());
    }
    let (mut shift, mut vs_oracle): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let q = tensor(&mut r, &[4, 6, 8]);
        let keys = [tensor(&mut r, &[2, 6, 8]), tensor(&mut r, &[2, 6, 8])];
        let values = [tensor(&mut r, &[2, 6, 8]), tensor(&mut r, &[2, 6, 8])];
        let wk = [pair_symmetric(&mut r, 8), pair_symmetric(&mut r, 8)];
        let wv = [normal_vec(&mut r, 8), normal_vec(&mut r, 8)];
        let base = r.random_range(0..1000);
        let (a, oracle_a) = shifted_attention(base, &q, &keys, &values, &wk, &wv);
        let (b, _) = shifted_attention(base + 7, &q, &keys, &values, &wk, &wv);
        shift = shift.max(a.max_abs_diff(&b).unwrap());
        for (h, head) in oracle_a.iter().enumerate() {
            for (t, row) in head.iter().enumerate() {
                for (c, x) in row.iter().enumerate() {
                    vs_oracle = vs_oracle.max((a.get(&[h, t, c]) - x).abs());
                }
            }
        }
    }
    gate(
        lin < 1e-12 && shift < 1e-10 && vs_oracle < 1e-10,
        format!("linearity {lin:.2e} (tol 1e-12); attention shift {shift:.2e}, vs oracle {vs_oracle:.2e} (tol 1e-10)"),
    )
}

fn c4_init_equivalence() -> Outcome {
    let plan = plan_for_strategy(Strategy::FusedKv, 8, 4).unwrap();
    let mut r = rng(104);
    let mut dev: f64 = 0.0;
    for draw in 0..100 {
        let g = if draw % 2 == 0 { Granularity::Vector } else { Granularity::Scalar };
        let aux = AuxiliaryWeights::sample_normal(&plan, 8, g, r.random()).unwrap();
        let w = init_equivalent(&plan, &aux).unwrap();
        let stored: BTreeMap<usize, LayerCache> = [1, 2, 3, 4]
            .into_iter()
            .map(|j| (j, LayerCache::new(j, tensor(&mut r, &[2, 5, 8]), tensor(&mut r, &[2, 5, 8])).unwrap()))
            .collect();
        let chain = iterative_reconstruct(&plan, &aux, &stored).unwrap();
        for i in 5..=8 {
            let std = reconstruct(&plan, &w, &stored, i).unwrap();
            dev = dev.max(std.k.max_abs_diff(&chain[&i].k).unwrap());
            dev = dev.max(std.v.max_abs_diff(&chain[&i].v).unwrap());
        }
    }
    gate(dev < 1e-12, format!("100 draws, layers 5..8: {dev:.2e} (tol 1e-12)"))
}

fn c5_cost_formulas() -> Outcome {
    let w = WorkloadSpec::new(24, 8192, 128, 16, 16).unwrap();
    // Expanded by hand at H_q = H_kv = H, with X = L·S·H·D and Y = L·(H·D)².
    let (l, s, d, h) = (24u128, 8192u128, 128u128, 16u128);
    let x = l * s * h * d;
    let y = l * h * h * d * d;
    let xs = x * s;
    let dec = l * h * d * s;
    let cells = [
        (Method::MhaGqa, [4 * xs + 8 * s * y, 4 * dec + 8 * y, 2 * x, 2 * x]),
        (Method::Yoco, [2 * xs + 4 * s * y + 2 * x + 2 * y, 4 * dec + 6 * y, x, 2 * x]),
        (Method::FusedKvLite, [2 * xs + 4 * s * y + 2 * x + 2 * y, 4 * dec + 6 * y, x, 2 * x]),
        (Method::FusedKv, [2 * xs + 4 * s * y + 5 * x + 2 * y, 7 * dec + 6 * y, x, 3 * x]),
    ];
    let mut mismatches = Vec::new();
    for (m, expect) in cells {
        let c = table1_costs(m, &w);
        let got = [c.prefill_flops, c.decode_flops, c.cache_memory, c.cache_io];
        for (k, (g, e)) in got.iter().zip(expect).enumerate() {
            if *g != e {
                mismatches.push(format!("{m} column {k}: {g} != {e}"));
            }
        }
    }
    let mha = table1_costs(Method::MhaGqa, &w);
    let fkv = table1_costs(Method::FusedKv, &w);
    let ratios = 2 * fkv.cache_memory == mha.cache_memory && 2 * fkv.cache_io == 3 * mha.cache_io;
    gate(
        mismatches.is_empty() && ratios,
        format!(
            "16 cells, mismatches {:?}; memory ratio {}, I/O ratio {}",
            mismatches,
            fkv.cache_memory as f64 / mha.cache_memory as f64,
            fkv.cache_io as f64 / mha.cache_io as f64
        ),
    )
}

/// Roofline ratio of one decode or prefill quantity from the hand formulas:
/// `max(flops/peak, bytes/bw)` with two-byte elements and no weight bytes.
fn oracle_time(flops: f64, elems: f64, dev: &DeviceProfile) -> (f64, bool) {
    let (c, m) = (flops / dev.peak_flops, 2.0 * elems / dev.bandwidth);
    (c.max(m), c >= m)
}

fn c6_roofline() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for name in DeviceProfile::PRESETS {
        let dev = DeviceProfile::preset(name).unwrap();
        let lat = |m: Method, w: &WorkloadSpec| roofline_latency(&table1_costs(m, w), &dev, 0.0).unwrap();

        let w = WorkloadSpec::new(24, 32768, 128, 16, 16).unwrap();
        let ttft = lat(Method::FusedKv, &w).ttft / lat(Method::MhaGqa, &w).ttft;
        let tpot = lat(Method::FusedKv, &w).tpot / lat(Method::MhaGqa, &w).tpot;

        // Independent check of the same ratios from the table rows.
        let (l, s, d, h) = (24.0, 32768.0, 128.0, 16.0);
        let (x, y) = (l * s * h * d, l * (h * d) * (h * d));
        let (t_mha, _) = oracle_time(4.0 * x * s + 8.0 * s * y, 2.0 * x, &dev);
        let (t_fkv, _) = oracle_time(2.0 * x * s + 4.0 * s * y + 5.0 * x + 2.0 * y, x, &dev);
        let (p_mha, _) = oracle_time(4.0 * l * h * d * s + 8.0 * y, 2.0 * x, &dev);
        let (p_fkv, _) = oracle_time(7.0 * l * h * d * s + 6.0 * y, 3.0 * x, &dev);
        let oracle_agrees = (ttft - t_fkv / t_mha).abs() < 1e-12 && (tpot - p_fkv / p_mha).abs() < 1e-12;

        let g = WorkloadSpec::new(24, 32768, 128, 128, 2).unwrap();
        let (a, b) = (lat(Method::FusedKv, &g), lat(Method::MhaGqa, &g));
        let compute_bound = a.decode_bound == Bound::Compute && b.decode_bound == Bound::Compute;
        let overhead = a.tpot / b.tpot;
        let limit = 1.0 + 3.0 / 256.0 + 0.01;

        ok &= (0.45..=0.55).contains(&ttft) && (1.45..=1.55).contains(&tpot) && oracle_agrees;
        // The third claim is about the compute-bound regime; H20 puts this
        // workload there, faster-compute parts do not.
        if compute_bound {
            ok &= overhead <= limit;
        } else {
            ok &= name != "h20";
        }
        lines.push(format!(
            "{name}: TTFT {ttft:.4}, TPOT {tpot:.4}, compute-bound TPOT {}",
            if compute_bound { format!("{overhead:.4} (<= {limit:.4})") } else { "n/a (memory-bound)".into() }
        ));
    }
    gate(ok, lines.join("; "))
}

/// Toy L=4 model with a wide init so gradients sit well above
/// finite-difference noise.
fn grad_check_config(s: Strategy) -> ModelConfig {
    ModelConfig {
        init_std: 0.3,
        ..ModelConfig::toy(s)
    }
}

const GRAD_STEP: f64 = 1e-6;

fn c7_gradients() -> Outcome {
    let mut r = rng(107);
    let cases: Vec<(Strategy, Model, [Example; 1])> = Strategy::CATALOG
        .into_iter()
        .map(|s| {
            let m: Model = build_model(&grad_check_config(s), r.random()).unwrap();
            let tokens: Vec<usize> = (0..6).map(|_| r.random_range(0..16)).collect();
            (s, m, [Example::dense(tokens)])
        })
        .collect();
    let errs: Vec<f64> = std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .iter()
            .map(|(_, m, ex)| {
                scope.spawn(move || {
                    let objective = LossObjective { model: m, examples: ex };
                    grad_check_extended(&objective, m.params(), GRAD_STEP).unwrap().max_rel_err
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let ok = errs.iter().all(|&e| e < 1e-4);
    let worst: Vec<String> = cases.iter().zip(&errs).map(|((s, _, _), e)| format!("{s} {e:.1e}")).collect();
    gate(ok, format!("max rel err (tol 1e-4): {}", worst.join(", ")))
}

fn c8_decode() -> Outcome {
    let mut r = rng(108);
    let mut worst: f64 = 0.0;
    for s in Strategy::CATALOG {
        let m: Model = build_model(&ModelConfig::toy(s), r.random()).unwrap();
        let prompt: Vec<usize> = (0..32).map(|_| r.random_range(0..16)).collect();
        let out = decode(&m, &prompt, 16).unwrap();
        let mut seq = prompt.clone();
        seq.extend(&out.tokens[..15]);
        let full = m.tape_logits(&seq).unwrap();
        worst = worst.max(out.prompt_logits.max_abs_diff(&m.tape_logits(&prompt).unwrap()).unwrap());
        for (k, row) in out.step_logits.iter().enumerate() {
            for (a, b) in row.iter().zip(full.row(prompt.len() - 1 + k)) {
                worst = worst.max((a - b).abs());
            }
        }
        if out.tokens.len() != 16 || out.step_logits.len() != 16 {
            return Err(format!("{s}: generated {} tokens", out.tokens.len()));
        }
    }
    gate(worst < 1e-10, format!("9 strategies, 32+16 tokens: {worst:.2e} (tol 1e-10)"))
}

fn c9_memory() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (l, middle) in [(4, 2), (8, 4)] {
        for s in Strategy::CATALOG {
            let cfg = ModelConfig {
                num_layers: l,
                middle,
                ..ModelConfig::toy(s)
            };
            let m: Model = build_model(&cfg, 9).unwrap();
            let out = decode(&m, &[1, 2, 3, 4, 5], 4).unwrap();
            // Storage layers written out by hand per strategy.
            let expected = match s {
                Strategy::Vanilla | Strategy::Gqa => l,
                _ => l / 2,
            };
            ok &= out.persistent_layers == expected && out.persistent_layers == m.plan().storage_layers().len();
            if l == 8 {
                notes.push(format!("{s}={}", out.persistent_layers));
            }
        }
    }
    gate(ok, format!("L=8: {}", notes.join(" ")))
}

fn smoke_config(strategy: Strategy) -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        middle: 2,
        ..ModelConfig::desk(strategy)
    }
}

fn smoke_run(strategy: Strategy) -> TrainReport {
    let mut m: Model = build_model(&smoke_config(strategy), 7).unwrap();
    let cfg = TrainConfig {
        seed: 7,
        ..TrainConfig::new(Task::Copy, 500)
    };
    train(&mut m, &cfg).unwrap()
}

fn c10_training() -> Outcome {
    let runs: Vec<(Strategy, TrainReport, TrainReport)> = std::thread::scope(|sc| {
        let handles: Vec<_> = [Strategy::Vanilla, Strategy::FusedKvLite]
            .into_iter()
            .map(|s| {
                let a = sc.spawn(move || smoke_run(s));
                let b = sc.spawn(move || smoke_run(s));
                (s, a, b)
            })
            .collect();
        handles
            .into_iter()
            .map(|(s, a, b)| (s, a.join().unwrap(), b.join().unwrap()))
            .collect()
    });
    let mut ok = true;
    let mut notes = Vec::new();
    for (s, a, b) in &runs {
        let deterministic = a.losses == b.losses;
        let (first, tail) = (a.initial_loss(), a.tail_loss(20));
        ok &= deterministic && tail < 0.2 * first;
        notes.push(format!("{s}: {first:.3} -> {tail:.3} (last-20 mean, need < {:.3}), repeatable {deterministic}", 0.2 * first));
    }
    gate(ok, notes.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("rope decomposition identity", c1_rope_identity),
        ("relative-position preservation", c2_relative_position),
        ("fused-key linearity and attention shift invariance", c3_fused_linearity),
        ("equivalent initialization", c4_init_equivalence),
        ("closed-form cost formulas", c5_cost_formulas),
        ("roofline latency ratios", c6_roofline),
        ("end-to-end gradient correctness", c7_gradients),
        ("incremental decode equivalence", c8_decode),
        ("persistent cache accounting", c9_memory),
        ("training smoke", c10_training),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} [{secs:.1}s]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} [{secs:.1}s]: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
