//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The desk search runs `CIRNAS_ACCEPT_STEPS` iterations per run (default 6000).

use std::time::Instant;

use cirnas_core::controller::{agreement, compute_phi, prefix_len, r2_penalty};
use cirnas_core::cost::{r1_form, r1_surrogate, supernet_flops, ArchFlops};
use cirnas_core::degrade::{procedural_corpus, sample_training_pair, ActiveTypes, SampleMode, Strategy};
use cirnas_core::eval::{build_test_set, eval_grid, EvalGrid, IdentityModel};
use cirnas_core::extract::masked_forward;
use cirnas_core::gradcheck::{check_gradients, check_gradients_against};
use cirnas_core::latency::bench_latency;
use cirnas_core::supernet::site_block_out;
use cirnas_core::trainer::{run_search, RunOutputs, SearchOutcome, TrainingData};
use cirnas_core::{
    ConsensusConfig, ConsensusState, ModulationModel, Resolution, SearchState, SliceMode, SuperNetConfig, Tape,
    TaskVector, Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    fn run(&mut self, name: &'static str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result =
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("FAIL {name} ({secs:.1}s): {detail}");
                self.failed.push(name);
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Desk model with perturbed weights, a controller that produces mixed
/// masks, and a consensus prefix of `prefix` sites.
fn random_state(seed: u64, prefix: usize) -> SearchState {
    let mut cfg = TrainConfig::desk();
    cfg.seed = seed;
    let mut st = SearchState::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in st.net.params_mut() {
        let noise = Tensor::<f32>::randn(p.shape().to_vec(), 0.1, &mut rng);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    let head_w_shape = st.controller.head_w.shape().to_vec();
    st.controller.head_w = Tensor::randn(head_w_shape, 0.5, &mut rng);
    let head_b_shape = st.controller.head_b.shape().to_vec();
    st.controller.head_b = Tensor::randn(head_b_shape, 1.0, &mut rng);
    let n = st.consensus.sites;
    st.consensus.za = (0..st.consensus.za.len())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    st.consensus.s = (0..n).map(|i| if i < prefix { 0.95 } else { 0.1 }).collect();
    st.consensus.phi = compute_phi(&st.consensus.s, st.consensus.config.gamma);
    assert_eq!(st.consensus.prefix_len(), prefix);
    st
}

fn random_tasks(count: usize, rng: &mut ChaCha8Rng) -> Vec<TaskVector> {
    (0..count)
        .map(|_| TaskVector(std::array::from_fn(|_| rng.random_range(0.0..=1.0))))
        .collect()
}

fn table_flops() -> Outcome {
    let cfg = SuperNetConfig::FULL;
    let cases = [
        ("HD", Resolution::HD, 1124.3),
        ("2K", Resolution::QHD_2K, 2698.4),
        ("4K", Resolution::UHD_4K, 10119.2),
        ("481x321", Resolution::new(481, 321).padded_to(cfg.head_stride), 189.1),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, res, reference) in cases {
        let g = supernet_flops(&cfg, res).map_err(err)? as f64 / 1e9;
        let rel = (g - reference) / reference;
        ok &= rel.abs() <= 0.05;
        lines.push(format!("{name} {g:.1}G vs {reference}G ({:+.2}%)", rel * 100.0));
    }
    check(ok, lines.join(", "))
}

fn amortization() -> Outcome {
    let st = random_state(11, 10);
    let model = ModulationModel::from_search(&st, SliceMode::Full).map_err(err)?;
    let x = Tensor::from_fn([1, 3, 32, 32], |i| ((i * 31) % 97) as f32 / 97.0);
    let tasks = EvalGrid::standard().tasks();
    let report = model.run(&x, &tasks).map_err(err)?.report;
    if report.prefix_flops == 0 {
        return Err("prefix is empty".into());
    }
    let m = tasks.len() as f64;
    let oracle = report.prefix_flops as f64 / m
        + report
            .tail_flops
            .iter()
            .map(|&t| (t + report.epsilon) as f64)
            .sum::<f64>()
            / m;
    let measured = report.flops_amortized(27).map_err(err)?;
    let single = (report.prefix_flops + report.tail_flops[0] + report.epsilon) as f64;

    // Task-specific special case: empty prefix, per-effect cost is network plus controller.
    let mut ts = random_state(11, 0);
    ts.config.lambda2 = 0.0;
    let tsm = ModulationModel::from_search(&ts, SliceMode::Full).map_err(err)?;
    let tr = tsm.run(&x, &tasks).map_err(err)?.report;
    let eq2 = tr.tail_flops.iter().map(|&t| (t + tr.epsilon) as f64).sum::<f64>() / m;
    let ts_measured = tr.flops_amortized(27).map_err(err)?;
    check(
        (measured - oracle).abs() <= 1e-9 * oracle && measured < single && tr.prefix_flops == 0 && ts_measured == eq2,
        format!("M=27 {measured:.0} vs oracle {oracle:.0}, M=1 {single:.0}; prefix-free {ts_measured:.0} vs {eq2:.0}"),
    )
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut randn = |shape: &[usize], std: f64| Tensor::<f64>::randn(shape.to_vec(), std, &mut rng);
    // Values bounded away from the kinks of relu, |.| and the gate.
    let away = |t: Tensor<f64>| t.map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v });
    let mut worst: Vec<(String, f64)> = Vec::new();
    let eps = 1e-6;
    macro_rules! grad {
        ($name:expr, $inputs:expr, $build:expr) => {
            worst.push((
                $name.into(),
                check_gradients(&$inputs, eps, $build).map_err(err)?.max_rel_err,
            ));
        };
    }
    let weights = randn(&[1, 3, 3, 3], 1.0);
    let wsum = move |t: &mut Tape<f64>, y, w: &Tensor<f64>| {
        let c = t.constant(w.clone());
        let p = t.mul(y, c)?;
        t.sum(p)
    };
    {
        let w = weights.clone();
        grad!(
            "conv2d",
            [randn(&[1, 2, 6, 5], 1.0), randn(&[3, 2, 3, 3], 0.5), randn(&[3], 0.5)],
            |t: &mut Tape<f64>, v: &[cirnas_core::Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                wsum(t, y, &w)
            }
        );
    }
    let lw = randn(&[2, 3], 1.0);
    grad!(
        "fully_connected",
        [randn(&[2, 4], 1.0), randn(&[3, 4], 0.5), randn(&[3], 0.5)],
        |t: &mut Tape<f64>, v: &[cirnas_core::Var]| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let c = t.constant(lw.clone());
            let p = t.mul(y, c)?;
            t.sum(p)
        }
    );
    let ew = randn(&[2, 5], 1.0);
    grad!(
        "relu",
        [away(randn(&[2, 5], 1.0))],
        |t: &mut Tape<f64>, v: &[cirnas_core::Var]| {
            let y = t.relu(v[0])?;
            let c = t.constant(ew.clone());
            let p = t.mul(y, c)?;
            t.sum(p)
        }
    );
    grad!(
        "sigmoid",
        [randn(&[2, 5], 2.0)],
        |t: &mut Tape<f64>, v: &[cirnas_core::Var]| {
            let y = t.sigmoid(v[0])?;
            let c = t.constant(ew.clone());
            let p = t.mul(y, c)?;
            t.sum(p)
        }
    );
    let sw = randn(&[1, 2, 4, 6], 1.0);
    grad!(
        "pixel_shuffle",
        [randn(&[1, 8, 2, 3], 1.0)],
        |t: &mut Tape<f64>, v: &[cirnas_core::Var]| {
            let y = t.pixel_shuffle(v[0], 2)?;
            let c = t.constant(sw.clone());
            let p = t.mul(y, c)?;
            t.sum(p)
        }
    );
    let target = randn(&[1, 3, 4, 4], 1.0);
    let pred = {
        let offset = away(randn(&[1, 3, 4, 4], 1.0));
        Tensor::new(
            [1, 3, 4, 4],
            target.data().iter().zip(offset.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap()
    };
    grad!("l1_loss", [pred], |t: &mut Tape<f64>, v: &[cirnas_core::Var]| {
        let c = t.constant(target.clone());
        t.l1_loss(v[0], c)
    });

    // Straight-through gate: backward is the sigmoid derivative.
    let z = away(randn(&[2, 5], 1.5));
    let gw = ew.clone();
    let ste = check_gradients_against(
        std::slice::from_ref(&z),
        eps,
        |t, v| {
            let g = t.ste_gate(v[0])?;
            let c = t.constant(gw.clone());
            let p = t.mul(g, c)?;
            t.sum(p)
        },
        |xs| {
            Ok(xs[0]
                .data()
                .iter()
                .zip(ew.data())
                .map(|(&v, &w)| w / (1.0 + (-v).exp()))
                .sum())
        },
    )
    .map_err(err)?;
    worst.push(("ste_gate".into(), ste.max_rel_err));

    // R1 surrogate: the quadratic cost evaluated at binary counts, moved by
    // the sigmoid of each logit.
    let cfg = SuperNetConfig {
        blocks: 2,
        channels: 4,
        kernel: 3,
        head_stride: 2,
    };
    let res = Resolution::new(8, 6);
    let (prefix, eps_c, effects) = (4, 123, 3);
    let rows = 2;
    let z0 = away(randn(&[rows, cfg.num_sites() * cfg.channels], 1.5));
    let form = r1_form::<f64>(&cfg, res, prefix, eps_c, effects).map_err(err)?;
    let base = z0.clone();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let r1 = check_gradients_against(
        std::slice::from_ref(&z0),
        eps,
        |t, v| r1_surrogate(t, v[0], &cfg, res, prefix, eps_c, effects),
        |xs| {
            let width = cfg.num_sites() * cfg.channels;
            let mut total = 0.0;
            for r in 0..rows {
                let counts: Vec<f64> = (0..cfg.num_sites())
                    .map(|n| {
                        (0..cfg.channels)
                            .map(|c| {
                                let k = r * width + n * cfg.channels + c;
                                let b = if base.data()[k] > 0.0 { 1.0 } else { 0.0 };
                                b + sig(xs[0].data()[k]) - sig(base.data()[k])
                            })
                            .sum()
                    })
                    .collect();
                total += form.eval(&counts);
            }
            Ok(total / rows as f64)
        },
    )
    .map_err(err)?;
    worst.push(("r1_surrogate".into(), r1.max_rel_err));

    let bad: Vec<_> = worst.iter().filter(|(_, e)| e.is_nan() || *e >= 1e-4).collect();
    let summary = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(bad.is_empty(), format!("max rel err: {summary}"))
}

fn consensus_traces() -> Outcome {
    let mut notes = Vec::new();
    let cfg = ConsensusConfig { alpha: 0.9, gamma: 0.9 };
    let rows = |m: usize, v: &[f32]| Tensor::new([m, v.len() / m], v.to_vec()).unwrap();

    // z^a EMA from zero.
    let mut st = ConsensusState::new(1, 2, cfg);
    st.update_za(&rows(2, &[1.0, 0.5, 1.0, 1.5])).map_err(err)?;
    let za_ok = (st.za[0] - 0.9).abs() < 1e-6 && (st.za[1] - 0.9).abs() < 1e-6;
    st.za = vec![0.0; 2];
    st.update_za(&rows(1, &[1.0, 1.0])).map_err(err)?;
    st.update_za(&rows(1, &[-1.0, -1.0])).map_err(err)?;
    let za_ok = za_ok && (st.za[0] + 0.81).abs() < 1e-6;
    notes.push(format!("za {}", if za_ok { "ok" } else { "BAD" }));

    // Agreement: 1.5 vs 1.8 fails; all-inactive consensus never agrees.
    let za = [1.0, 1.0, -1.0, -1.0];
    let disagree = !agreement(&rows(2, &[2.0, 2.0, -2.0, -2.0, 2.0, -2.0, -2.0, -2.0]), &za, 0, 0.9).map_err(err)?;
    let agree = agreement(&rows(2, &[2.0, 2.0, -2.0, -2.0, 3.0, 1.0, -1.0, -5.0]), &za, 0, 0.9).map_err(err)?;
    let degenerate = !agreement(&rows(1, &[1.0; 4]), &[-1.0; 4], 0, 0.9).map_err(err)?;
    let scaled = agreement(&rows(2, &[4.0, 4.0, -4.0, -4.0, 6.0, 2.0, -2.0, -10.0]), &za, 0, 0.9).map_err(err)?;
    let eta_ok = disagree && agree && degenerate && scaled;
    notes.push(format!("eta {}", if eta_ok { "ok" } else { "BAD" }));

    // s EMA for alternating eta.
    let mut st = ConsensusState::new(1, 1, cfg);
    let mut s_ok = true;
    for (e, want) in [(true, 0.9), (false, 0.09), (true, 0.909), (false, 0.0909)] {
        st.update_s(&[e]).map_err(err)?;
        s_ok &= (st.s[0] - want).abs() < 1e-12;
    }
    notes.push(format!("s {}", if s_ok { "ok" } else { "BAD" }));

    // Prefix rule: first failing site ends the prefix.
    let phi = compute_phi(&[0.95, 0.92, 0.8, 0.95], 0.9);
    let phi_ok = phi == [true, true, false, false]
        && prefix_len(&phi) == 2
        && prefix_len(&compute_phi(&[0.0; 4], 0.9)) == 0
        && prefix_len(&compute_phi(&[1.0; 4], 0.9)) == 4;
    notes.push(format!("phi {}", if phi_ok { "ok" } else { "BAD" }));

    // R2 with phi all false still charges site 0 (the input is shared).
    let mut tape = Tape::<f64>::new();
    let zs = tape.param(Tensor::new([1, 6], vec![-1.0, -1.0, -1.0, -1.0, -1.0, 1.0]).unwrap());
    let r = r2_penalty(&mut tape, zs, &[1.0; 6], &[false, false], 3).map_err(err)?;
    let first = tape.scalar_value(r);
    let mut tape = Tape::<f64>::new();
    let zs = tape.param(Tensor::new([1, 6], vec![-1.0, -1.0, -1.0, -1.0, -1.0, 1.0]).unwrap());
    let r = r2_penalty(&mut tape, zs, &[1.0; 6], &[true, false], 3).map_err(err)?;
    let both = tape.scalar_value(r);
    let r2_ok = first == 3.0 && both == 5.0;
    notes.push(format!("r2 {first}/{both}"));

    check(za_ok && eta_ok && s_ok && phi_ok && r2_ok, notes.join(", "))
}

fn masked_vs_sliced() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f32;
    let mut checked = 0;
    for (seed, prefix) in [(1, 0), (2, 7), (3, 14)] {
        let st = random_state(seed, prefix);
        let tasks = random_tasks(5, &mut rng);
        for mode in [SliceMode::Full, SliceMode::MiddleOnly] {
            let model = ModulationModel::from_search(&st, mode).map_err(err)?;
            for i in 0..10 {
                let x = Tensor::from_fn([1, 3, 16 + 2 * (i % 3), 12 + 2 * (i % 2)], |_| rng.random::<f32>());
                for t in &tasks {
                    let spec = model.tail_spec(t).map_err(err)?;
                    let sliced = model.tail(t).map_err(err)?.forward(&x, t).map_err(err)?;
                    let masked = masked_forward(&st.net, &spec, &x, t).map_err(err)?;
                    worst = worst.max(sliced.max_abs_diff(&masked).map_err(err)?);
                    checked += 1;
                }
            }
        }
    }
    check(
        worst <= 1e-5,
        format!("{checked} comparisons, max abs diff {worst:.2e}"),
    )
}

fn reuse_vs_recompute() -> Outcome {
    let mut worst = 0.0f32;
    let mut cached = 0;
    for (seed, prefix) in [(4, 5), (5, 11), (6, 15)] {
        let st = random_state(seed, prefix);
        let model = ModulationModel::from_search(&st, SliceMode::Full).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn([1, 3, 21, 30], |_| rng.random::<f32>());
        let tasks = EvalGrid::standard().tasks();
        let out = model.run(&x, &tasks).map_err(err)?;
        for (y, t) in out.images.iter().zip(&tasks) {
            let again = model.run_single(&x, t).map_err(err)?;
            worst = worst.max(y.max_abs_diff(&again).map_err(err)?);
        }
        cached = cached.max(model.cached_tails());
    }
    check(
        worst <= 1e-5,
        format!("M=27, max abs diff {worst:.2e}, {cached} cached tails"),
    )
}

fn accept_steps() -> u64 {
    std::env::var("CIRNAS_ACCEPT_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(6000)
}

fn desk_run(lambda1: f64, lambda2: f64) -> Result<SearchOutcome, String> {
    let mut cfg = TrainConfig::desk();
    cfg.lambda1 = lambda1;
    cfg.lambda2 = lambda2;
    cfg.total_iterations = accept_steps();
    cfg.lr_decay_step = None;
    cfg.seed = 0;
    cfg.data.active_types = ActiveTypes::DENOISE;
    let data = TrainingData::from_config(&cfg).map_err(err)?;
    run_search(SearchState::new(cfg).map_err(err)?, &data, &RunOutputs::default()).map_err(err)
}

fn searched_flops(state: &SearchState) -> Result<f64, String> {
    let model = ModulationModel::from_search(state, SliceMode::Full).map_err(err)?;
    let x = Tensor::zeros([1, 3, 256, 256]);
    let report = model.run(&x, &EvalGrid::standard().tasks()).map_err(err)?.report;
    report.flops_amortized(27).map_err(err)
}

fn desk_search(suite: &mut Suite) {
    let steps = accept_steps();
    println!("desk search: 3 runs of {steps} steps");
    let a = desk_run(TrainConfig::desk().lambda1, 1e-2);
    let b = desk_run(0.0, 1e-2);
    let c = desk_run(TrainConfig::desk().lambda1, 0.0);
    suite.run(
        "desk search (a): trained TA+TSNet >= identity + 1 dB on denoise grid",
        || {
            let a = a.as_ref().map_err(|e| e.clone())?;
            let model = ModulationModel::from_search(&a.state, SliceMode::Full).map_err(err)?;
            let grid = EvalGrid::standard();
            let held_out: Vec<_> = procedural_corpus(8, 0xe7a1)
                .into_iter()
                .enumerate()
                .map(|(i, img)| (format!("img{i}"), img))
                .collect();
            let test = build_test_set(&held_out, &grid.test_degradations(ActiveTypes::DENOISE), 7).map_err(err)?;
            let base = eval_grid(&IdentityModel, &grid, &test).map_err(err)?;
            let report = eval_grid(&model, &grid, &test).map_err(err)?;
            let gain = report.mean_best_psnr - base.mean_best_psnr;
            check(
                gain >= 1.0,
                format!(
                    "{} test images, identity {:.2} dB, model {:.2} dB ({gain:+.2} dB), prefix {} sites",
                    test.len(),
                    base.mean_best_psnr,
                    report.mean_best_psnr,
                    model.prefix_len()
                ),
            )
        },
    );
    suite.run("desk search (b): lambda1 lowers FLOPs, lambda2 keeps prefix >=", || {
        let (a, b, c) = (
            a.as_ref().map_err(|e| e.clone())?,
            b.as_ref().map_err(|e| e.clone())?,
            c.as_ref().map_err(|e| e.clone())?,
        );
        let (fa, fb) = (searched_flops(&a.state)?, searched_flops(&b.state)?);
        let (pa, pc) = (a.state.consensus.prefix_len(), c.state.consensus.prefix_len());
        check(
            fa < fb && pa >= pc,
            format!(
                "amortized FLOPs at 256x256 {:.1}M (lambda1>0) vs {:.1}M (lambda1=0); prefix {pa} (lambda2>0) vs {pc} (lambda2=0)",
                fa / 1e6,
                fb / 1e6
            ),
        )
    });
}

fn sampling() -> Outcome {
    let clean = procedural_corpus(1, 3).remove(0);
    let patch = cirnas_core::degrade::crop(&clean, 0, 0, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 3000;
    let mut counts = [0usize; 3];
    let mut exact = true;
    for _ in 0..draws {
        let p = sample_training_pair(&patch, 0, SampleMode::Relative, &ActiveTypes::ALL, &mut rng).map_err(err)?;
        for d in 0..3 {
            exact &= p.task.0[d] == p.provenance.l_in.0[d] - p.provenance.l_gt.0[d];
        }
        let k = Strategy::ALL.iter().position(|&s| s == p.provenance.strategy).unwrap();
        counts[k] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let within = freqs.iter().all(|f| (f - 1.0 / 3.0).abs() <= 0.03);
    check(
        exact && within,
        format!("t = l_in - l_gt on all {draws}: {exact}; strategy frequencies {freqs:.3?}"),
    )
}

fn latency() -> Outcome {
    // Prefix through the third block.
    let st = random_state(8, site_block_out(2) + 1);
    let model = ModulationModel::from_search(&st, SliceMode::Full).map_err(err)?;
    let res = Resolution::new(256, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tasks = random_tasks(5, &mut rng);
    let f: ArchFlops = model.tail(&tasks[0]).map_err(err)?.flops(res).map_err(err)?;
    let share = f.prefix as f64 / f.total() as f64;
    if share <= 0.2 {
        return Err(format!("precondition: prefix share {share:.2} <= 0.2"));
    }
    let report = bench_latency(&model, res, &tasks, 7, 2).map_err(err)?;
    check(
        report.subsequent.median < report.first.median,
        format!(
            "prefix {:.0}% of FLOPs; first {:.2} ms, subsequent {:.2} ms (median over {} reps)",
            share * 100.0,
            report.first.median * 1e3,
            report.subsequent.median * 1e3,
            report.repetitions
        ),
    )
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    suite.run(
        "cost model matches published super-network FLOPs within 5%",
        table_flops,
    );
    suite.run("amortized cost at M=27", amortization);
    suite.run("gradient suite (f64 central differences, rel err < 1e-4)", gradients);
    suite.run("consensus machinery hand traces", consensus_traces);
    suite.run("masked-vs-sliced oracle <= 1e-5", masked_vs_sliced);
    suite.run("reuse-vs-recompute oracle <= 1e-5 at M=27", reuse_vs_recompute);
    suite.run("relative-target sampling and strategy frequencies", sampling);
    suite.run("latency ordering at 256x256", latency);
    desk_search(&mut suite);
    if suite.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {:?}", suite.failed.len(), suite.failed);
        std::process::exit(1);
    }
}
