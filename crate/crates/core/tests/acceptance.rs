//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Training runs are shared between criteria.
//!
//! Criteria 1-4 and 8 take seconds to minutes; 5-7 train twelve full
//! models and take roughly twenty minutes on one core.

use std::process::ExitCode;
use std::time::Instant;

use hybrid_policy::action::{dequantize, quantize, quantize_scalar, ActionVector, CoarseToken, QuantizerConfig};
use hybrid_policy::curriculum::{switch_transient, StepMetrics, Strategy};
use hybrid_policy::env::dataset::SampleSet;
use hybrid_policy::env::EnvConfig;
use hybrid_policy::harness::{build_samples, evaluate_policy, generate_dataset, joint_trainer, monolithic_trainer, ExperimentConfig};
use hybrid_policy::nn::gradcheck::{check_param_grads, finite_difference, max_rel_error};
use hybrid_policy::nn::{mse, softmax_ce, Activation, Adam, AdamConfig, AttentionBlock, LrSchedule, Mlp, ParamStore};
use hybrid_policy::planner::{batch_plan_loss, PlannerConfig, PlannerModel, SampleMode};
use hybrid_policy::refiner::{NoiseDraw, RefinerConfig, RefinerModel};
use hybrid_policy::rng::RngState;
use hybrid_policy::runtime::{
    amortized_latency, clock_trace, evaluate, measure_latency, run_episode, ClockModel, EpisodeSpec, ExecMode,
    ExecutionTrace, HorizonConfig, Policy, SuccessRate,
};
use ndarray::{Array2, Array3};

const GRAD_TOL: f64 = 1e-3;
const LATENCY_TOL_MS: f64 = 0.5;
const TABLE_LATENCIES: [(usize, f64); 4] = [(2, 122.0), (3, 112.0), (4, 107.0), (5, 104.0)];
const MODE_RADIUS: f64 = 0.05;
const MODE_FRACTION: f64 = 0.95;
const EVAL_EPISODES: usize = 200;
const RECOVERY_WITHIN: usize = 2000;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn pct(r: &SuccessRate) -> String {
    format!("{:.1}%±{:.1}", 100.0 * r.rate(), 100.0 * r.half_width())
}

// ---------------------------------------------------------------------------
// 1. Quantizer

fn quantizer() -> Verdict {
    let mut worst = 0.0f64;
    for n in [2usize, 10, 50, 100] {
        let q = QuantizerConfig::new(n, 1).unwrap();
        for t in 0..n as u32 {
            let a = dequantize(&[CoarseToken(t)], &q).unwrap();
            if quantize(&a, &q) != vec![CoarseToken(t)] {
                return verdict(false, format!("round trip broke at N={n}, token {t}"));
            }
        }
        let q3 = QuantizerConfig::new(n, 3).unwrap();
        let mut rng = RngState::new(n as u64);
        for _ in 0..10_000 {
            let a = ActionVector::new((0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
            let back = dequantize(&quantize(&a, &q3), &q3).unwrap();
            let err = a
                .as_slice()
                .iter()
                .zip(back.as_slice())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if err > 1.0 / n as f64 {
                return verdict(false, format!("N={n}: error {err} exceeds 1/N"));
            }
            worst = worst.max(err * n as f64);
        }
    }
    verdict(true, format!("all bins round-trip; worst error {worst:.3}/N"))
}

// ---------------------------------------------------------------------------
// 2. Gradients

fn gradients() -> Verdict {
    let mut rng = RngState::new(2024);
    let mut report = Vec::new();

    let mut ps = ParamStore::new();
    let mlp = Mlp::new(&mut ps, "mlp", &[3, 5, 4, 2], Activation::Gelu, &mut rng);
    let x = Array2::from_shape_fn((4, 3), |_| rng.normal());
    let r = Array2::from_shape_fn((4, 2), |_| rng.normal());
    let (_, cache) = mlp.forward(&ps, &x).unwrap();
    ps.zero_grads();
    let dx = mlp.backward(&mut ps, &cache, &r);
    let e_p = check_param_grads(&mut ps, |p| (mlp.apply(p, &x).unwrap() * &r).sum(), 1e-5);
    let mut flat: Vec<f64> = x.iter().copied().collect();
    let fd = finite_difference(&mut flat, 1e-5, |v| {
        (mlp.apply(&ps, &Array2::from_shape_vec((4, 3), v.to_vec()).unwrap()).unwrap() * &r).sum()
    });
    report.push(("mlp", e_p.max(max_rel_error(dx.as_slice().unwrap(), &fd))));

    let mut ps = ParamStore::new();
    let blk = AttentionBlock::new(&mut ps, "attn", 4, &mut rng);
    let x = Array3::from_shape_fn((2, 3, 4), |_| rng.normal());
    let r = Array3::from_shape_fn((2, 3, 4), |_| rng.normal());
    let (_, cache) = blk.forward(&ps, &x).unwrap();
    ps.zero_grads();
    let dx = blk.backward(&mut ps, &cache, &r);
    let e_p = check_param_grads(&mut ps, |p| (blk.forward(p, &x).unwrap().0 * &r).sum(), 1e-5);
    let mut flat: Vec<f64> = x.iter().copied().collect();
    let fd = finite_difference(&mut flat, 1e-5, |v| {
        (blk.forward(&ps, &Array3::from_shape_vec((2, 3, 4), v.to_vec()).unwrap()).unwrap().0 * &r).sum()
    });
    report.push(("attention", e_p.max(max_rel_error(dx.as_slice().unwrap(), &fd))));

    let mut logits: Vec<f64> = (0..6).map(|_| 2.0 * rng.normal()).collect();
    let (_, g) = softmax_ce(&logits, 4).unwrap();
    let fd = finite_difference(&mut logits, 1e-5, |v| softmax_ce(v, 4).unwrap().0);
    report.push(("softmax_ce", max_rel_error(&g, &fd)));

    let target: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let mut pred: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let (_, g) = mse(&pred, &target).unwrap();
    let fd = finite_difference(&mut pred, 1e-5, |v| mse(v, &target).unwrap().0);
    report.push(("mse", max_rel_error(&g, &fd)));

    let pc = PlannerConfig {
        width: 6,
        encoder_hidden: 7,
        ffn_hidden: 5,
        ..PlannerConfig::new(3, 2, 2, 2)
    };
    let mut planner = PlannerModel::new(pc, &mut rng).unwrap();
    let obs = Array2::from_shape_fn((2, 8), |_| rng.normal());
    let gt: Vec<Vec<CoarseToken>> = (0..2)
        .map(|_| (0..4).map(|_| CoarseToken(rng.below(3) as u32)).collect())
        .collect();
    let (l, cache) = planner.forward(&obs).unwrap();
    let (_, _, dl) = batch_plan_loss(&l, &gt).unwrap();
    planner.params.zero_grads();
    planner.backward(&cache, &dl);
    let probe = planner.clone();
    let e = check_param_grads(
        &mut planner.params,
        |ps| {
            let mut p = probe.clone();
            p.params = ps.clone();
            batch_plan_loss(&p.forward(&obs).unwrap().0, &gt).unwrap().0
        },
        1e-5,
    );
    report.push(("planner", e));

    for conditioned in [true, false] {
        let rc = RefinerConfig {
            d_emb: 3,
            width: 6,
            geo_dim: 4,
            geo_hidden: 5,
            time_dim: 4,
            k_diff: 8,
            conditioned,
            context_dim: if conditioned { 0 } else { 3 },
            ..RefinerConfig::new(2, 2, 4, 2)
        };
        let obs_dim = rc.obs_dim();
        let mut m = RefinerModel::new(rc, &mut rng).unwrap();
        let a0 = Array2::from_shape_fn((3, 4), |_| rng.uniform_range(-1.0, 1.0));
        let obs = Array2::from_shape_fn((3, obs_dim), |_| rng.normal());
        let toks: Option<Vec<Vec<CoarseToken>>> = conditioned.then(|| {
            (0..3)
                .map(|_| (0..4).map(|_| CoarseToken(rng.below(4) as u32)).collect())
                .collect()
        });
        let draw = NoiseDraw::sample(3, 4, 8, &mut rng);
        m.params.zero_grads();
        m.diffusion_loss_with(&a0, &obs, toks.as_deref(), &draw).unwrap();
        let probe = m.clone();
        let e = check_param_grads(
            &mut m.params,
            |ps| {
                let mut p = probe.clone();
                p.params = ps.clone();
                p.eval_loss(&a0, &obs, toks.as_deref(), &draw).unwrap()
            },
            1e-5,
        );
        report.push((if conditioned { "diffusion" } else { "diffusion_uncond" }, e));
    }

    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = report
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(worst < GRAD_TOL, format!("max rel err {worst:.1e} < {GRAD_TOL:.0e} ({detail})"))
}

// ---------------------------------------------------------------------------
// Small untrained models for protocol checks.

fn protocol_models(l_macro: usize, seed: u64) -> (PlannerModel, RefinerModel) {
    let mut rng = RngState::new(seed);
    let planner = PlannerModel::new(
        PlannerConfig {
            width: 8,
            encoder_hidden: 16,
            ffn_hidden: 8,
            ..PlannerConfig::new(8, l_macro, 2, 4)
        },
        &mut rng,
    )
    .unwrap();
    let refiner = RefinerModel::new(
        RefinerConfig {
            width: 16,
            geo_dim: 8,
            geo_hidden: 8,
            k_diff: 5,
            ..RefinerConfig::new(5, 2, 8, 4)
        },
        &mut rng,
    )
    .unwrap();
    (planner, refiner)
}

// ---------------------------------------------------------------------------
// 3. Latency

fn latency() -> Verdict {
    let clock = ClockModel::fit(2, 122.0, 5, 104.0).unwrap();
    let mut worst = 0.0f64;
    for (m, ms) in TABLE_LATENCIES {
        worst = worst.max((amortized_latency(&clock, m).unwrap() - ms).abs());
    }
    // 60 chunks per episode: a multiple of every M in 1..=5.
    let env_cfg = EnvConfig {
        horizon: 300,
        ..EnvConfig::default()
    };
    let (planner, refiner) = protocol_models(25, 3);
    let policy = Policy::Hierarchical {
        planner: &planner,
        refiner: &refiner,
        plan_mode: SampleMode::Argmax,
    };
    let mut trace_gap = 0.0f64;
    for m in 1..=5 {
        let closed = amortized_latency(&clock, m).unwrap();
        let synthetic = measure_latency(&clock_trace(&clock, m, 60).unwrap()).unwrap();
        trace_gap = trace_gap.max((synthetic - closed).abs());
        for seed in 0..3 {
            let spec = EpisodeSpec {
                env: &env_cfg,
                horizon: HorizonConfig::new(m, 5).unwrap(),
                mode: ExecMode::Async,
                clock,
                episode_seed: seed,
                task_id: seed as usize % 4,
            };
            let t = run_episode(&spec, policy, &mut RngState::new(seed)).unwrap();
            if t.records.len() % m == 0 {
                trace_gap = trace_gap.max((measure_latency(&t).unwrap() - closed).abs());
            }
        }
    }
    verdict(
        worst <= LATENCY_TOL_MS && trace_gap < 1e-9,
        format!(
            "fit c_refine={:.2} c_plan={:.2}; max table error {worst:.3} ms; trace vs closed form {trace_gap:.1e} ms",
            clock.c_refine, clock.c_plan
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Async protocol

fn protocol() -> Verdict {
    let env_cfg = EnvConfig::default();
    let (planner, refiner) = protocol_models(25, 4);
    let clock = ClockModel::default();
    let mut episodes = 0;
    for m in [1usize, 2, 3, 5] {
        let horizon = HorizonConfig::new(m, 5).unwrap();
        for e in 0..100u64 {
            let spec = EpisodeSpec {
                env: &env_cfg,
                horizon,
                mode: ExecMode::Async,
                clock,
                episode_seed: 10_000 + e,
                task_id: e as usize % 4,
            };
            let policy = Policy::Hierarchical {
                planner: &planner,
                refiner: &refiner,
                plan_mode: SampleMode::Categorical,
            };
            let t = run_episode(&spec, policy, &mut RngState::new(e)).unwrap();
            let chunks = t.records.len();
            if t.planner_calls() != chunks.div_ceil(m) {
                return verdict(false, format!("M={m} episode {e}: {} plans for {chunks} chunks", t.planner_calls()));
            }
            for r in &t.records {
                let plan = &t.plans[r.chunk / m];
                let off = (r.chunk % m) * 5;
                let expect: Vec<CoarseToken> = (off..off + 5).flat_map(|row| plan.row(row).to_vec()).collect();
                if r.tokens != expect {
                    return verdict(false, format!("M={m} episode {e} chunk {}: popped rows differ from plan", r.chunk));
                }
            }
            if m == 1 {
                let sync = EpisodeSpec {
                    mode: ExecMode::Sync,
                    ..spec
                };
                let s = run_episode(&sync, policy, &mut RngState::new(e)).unwrap();
                if s != t {
                    return verdict(false, format!("episode {e}: async M=1 differs from sync"));
                }
            }
            episodes += 1;
        }
    }
    verdict(true, format!("{episodes} episodes: plan counts, pop slices and M=1 equivalence hold"))
}

// ---------------------------------------------------------------------------
// 8. Conditional generation

fn conditional_oracle() -> Verdict {
    let mode_of = |t: u32| if t == 0 { -0.5 } else { 0.5 };
    let cfg = RefinerConfig {
        width: 64,
        d_emb: 4,
        geo_dim: 8,
        geo_hidden: 16,
        ..RefinerConfig::new(1, 1, 2, 1)
    };
    let mut rng = RngState::new(88);
    let mut m = RefinerModel::new(cfg, &mut rng).unwrap();
    let mut opt = Adam::new(&m.params, AdamConfig::default());
    let batch = 64;
    let sched = LrSchedule::new(3e-3, 4000);
    for step in 0..4000 {
        let toks: Vec<Vec<CoarseToken>> = (0..batch).map(|_| vec![CoarseToken(rng.below(2) as u32)]).collect();
        let a0 = Array2::from_shape_fn((batch, 1), |(i, _)| mode_of(toks[i][0].0));
        let obs = Array2::from_shape_fn((batch, 2), |_| rng.uniform_range(-1.0, 1.0));
        m.params.zero_grads();
        m.diffusion_loss(&a0, &obs, Some(&toks), &mut rng).unwrap();
        opt.step(&mut m.params, sched.lr_at(step)).unwrap();
    }
    assert_eq!(quantize_scalar(mode_of(0), 2), CoarseToken(0));
    assert_eq!(quantize_scalar(mode_of(1), 2), CoarseToken(1));

    let n = 400;
    let toks: Vec<Vec<CoarseToken>> = (0..n).map(|i| vec![CoarseToken((i % 2) as u32)]).collect();
    let flipped: Vec<Vec<CoarseToken>> = toks.iter().map(|t| vec![CoarseToken(1 - t[0].0)]).collect();
    let obs = Array2::from_shape_fn((n, 2), |_| rng.uniform_range(-1.0, 1.0));
    let hit = |samples: &Array2<f64>, toks: &[Vec<CoarseToken>]| {
        samples
            .rows()
            .into_iter()
            .zip(toks)
            .filter(|(s, t)| (s[0] - mode_of(t[0].0)).abs() <= MODE_RADIUS)
            .count() as f64
            / n as f64
    };
    let s = m.denoise_batch(&obs, Some(&toks), &mut RngState::new(1)).unwrap();
    let f = m.denoise_batch(&obs, Some(&flipped), &mut RngState::new(1)).unwrap();
    let (on, swapped) = (hit(&s, &toks), hit(&f, &flipped));
    let moved = s.iter().zip(f.iter()).filter(|(a, b)| a.signum() != b.signum()).count() as f64 / n as f64;
    verdict(
        on >= MODE_FRACTION && swapped >= MODE_FRACTION,
        format!(
            "{:.1}% within {MODE_RADIUS} of the intent mode, {:.1}% after permuting intents ({:.1}% of samples changed mode)",
            100.0 * on,
            100.0 * swapped,
            100.0 * moved
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared training runs for 5-7.

struct Run {
    label: String,
    log: Vec<StepMetrics>,
    switch: Option<usize>,
    final_rate: SuccessRate,
    snapshot_rate: SuccessRate,
}

fn eval_cfg(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        eval_episodes: EVAL_EPISODES,
        ..cfg.clone()
    }
}

fn hierarchical_run(cfg: &ExperimentConfig, data: &SampleSet) -> Run {
    let cfg = eval_cfg(cfg);
    let t0 = Instant::now();
    let mut t = joint_trainer(&cfg).unwrap();
    let snap_at = cfg.train_steps / 3;
    let eval = |t: &hybrid_policy::curriculum::JointTrainer| {
        let policy = Policy::Hierarchical {
            planner: &t.planner,
            refiner: &t.refiner,
            plan_mode: cfg.plan_sampling,
        };
        evaluate_policy(&cfg, policy, cfg.horizon_config(), cfg.exec_mode, |_, _| Ok(())).unwrap()
    };
    let mut log = t.run(data, snap_at, |_| {}).unwrap();
    let snapshot_rate = eval(&t);
    log.extend(t.run(data, cfg.train_steps - snap_at, |_| {}).unwrap());
    let final_rate = eval(&t);
    let label = format!("N={} {} seed {}", cfg.n_bins, cfg.strategy, cfg.seed);
    eprintln!(
        "  [{label}] {} at 1/3, {} final, switch {:?}, {:.0}s",
        pct(&snapshot_rate),
        pct(&final_rate),
        t.state.switch_step,
        t0.elapsed().as_secs_f64()
    );
    Run {
        label,
        log,
        switch: t.state.switch_step,
        final_rate,
        snapshot_rate,
    }
}

fn monolithic_snapshot(cfg: &ExperimentConfig, data: &SampleSet) -> SuccessRate {
    let cfg = eval_cfg(cfg);
    let mut t = monolithic_trainer(&cfg, data).unwrap();
    t.run(data, cfg.train_steps / 3, |_| {}).unwrap();
    let rate = evaluate(
        &cfg.env(),
        Policy::Monolithic { refiner: &t.refiner },
        cfg.horizon_config(),
        cfg.exec_mode,
        cfg.clock(),
        cfg.eval_seed,
        cfg.eval_episodes,
        |_, _: &ExecutionTrace| Ok(()),
    )
    .unwrap();
    eprintln!("  [monolithic seed {}] {} at 1/3", cfg.seed, pct(&rate));
    rate
}

struct Shared {
    bins: Vec<Run>,
    reference: usize,
    monolithic: SuccessRate,
    strategies: Vec<(Strategy, Vec<Run>)>,
}

fn shared_runs() -> Shared {
    let base = ExperimentConfig::default();
    let data: Vec<SampleSet> = SEEDS
        .iter()
        .map(|&seed| {
            let cfg = ExperimentConfig { seed, ..base.clone() };
            build_samples(&cfg, &generate_dataset(&cfg).unwrap()).unwrap()
        })
        .collect();
    let bins: Vec<Run> = [2usize, 8, 32, 128]
        .iter()
        .map(|&n| hierarchical_run(&ExperimentConfig { n_bins: n, ..base.clone() }, &data[0]))
        .collect();
    let reference = 1;
    let monolithic = monolithic_snapshot(&base, &data[0]);
    let mut strategies = Vec::new();
    for strategy in [Strategy::Dynamic, Strategy::NoTf, Strategy::PureTf] {
        let runs = SEEDS
            .iter()
            .zip(&data)
            .map(|(&seed, d)| {
                if strategy == base.strategy && seed == base.seed {
                    let r = &bins[reference];
                    Run {
                        label: r.label.clone(),
                        log: r.log.clone(),
                        switch: r.switch,
                        final_rate: r.final_rate,
                        snapshot_rate: r.snapshot_rate,
                    }
                } else {
                    hierarchical_run(&ExperimentConfig { seed, strategy, ..base.clone() }, d)
                }
            })
            .collect();
        strategies.push((strategy, runs));
    }
    Shared {
        bins,
        reference,
        monolithic,
        strategies,
    }
}

// ---------------------------------------------------------------------------
// 5. Inverted U

fn inverted_u(s: &Shared) -> Verdict {
    let rates: Vec<&SuccessRate> = s.bins.iter().map(|r| &r.final_rate).collect();
    let best = (0..rates.len())
        .max_by(|&a, &b| rates[a].rate().partial_cmp(&rates[b].rate()).unwrap().then(b.cmp(&a)))
        .unwrap();
    let last = rates.len() - 1;
    let interior = best != 0 && best != last;
    let margin_ok = [0, last].iter().all(|&e| {
        let hw = rates[best].half_width().max(rates[e].half_width());
        rates[best].rate() - rates[e].rate() > hw
    });
    let table = s
        .bins
        .iter()
        .map(|r| format!("{} {}", r.label.split(' ').next().unwrap(), pct(&r.final_rate)))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(interior && margin_ok, format!("{table}; peak at {}", s.bins[best].label.split(' ').next().unwrap()))
}

// ---------------------------------------------------------------------------
// 6. Hierarchical vs monolithic

fn convergence(s: &Shared) -> Verdict {
    let h = &s.bins[s.reference];
    let m = &s.monolithic;
    let gap = h.snapshot_rate.rate() - m.rate();
    let needed = h.snapshot_rate.half_width() + m.half_width();
    let transient = switch_transient(&h.log, 100, 50, 200);
    let (rise, recovered, tdetail) = match transient {
        Some(t) => (
            t.peak_mean > t.pre_mean,
            t.recovery_after.is_some_and(|r| r <= RECOVERY_WITHIN),
            format!(
                "switch at {}, l_diff {:.4} -> peak {:.4}, back below after {:?} steps",
                t.switch_step, t.pre_mean, t.peak_mean, t.recovery_after
            ),
        ),
        None => (false, false, "no switch in the log".into()),
    };
    verdict(
        gap > needed && rise && recovered,
        format!(
            "at 1/3 budget hierarchical {} vs monolithic {} (gap {:.1} > {:.1}); {tdetail}",
            pct(&h.snapshot_rate),
            pct(m),
            100.0 * gap,
            100.0 * needed
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Strategy ablation

fn pooled(runs: &[Run]) -> SuccessRate {
    SuccessRate {
        successes: runs.iter().map(|r| r.final_rate.successes).sum(),
        episodes: runs.iter().map(|r| r.final_rate.episodes).sum(),
    }
}

fn strategies(s: &Shared) -> Verdict {
    let dynamic = pooled(&s.strategies[0].1);
    let mut ok = true;
    let mut parts = vec![format!("dynamic {}", pct(&dynamic))];
    for (strategy, runs) in &s.strategies[1..] {
        let other = pooled(runs);
        ok &= dynamic.rate() >= other.rate() - other.half_width();
        parts.push(format!("{strategy} {}", pct(&other)));
    }
    let per_seed = s
        .strategies
        .iter()
        .map(|(st, runs)| {
            let v: Vec<String> = runs.iter().map(|r| format!("{:.0}", 100.0 * r.final_rate.rate())).collect();
            format!("{st} [{}]", v.join(" "))
        })
        .collect::<Vec<_>>()
        .join(", ");
    verdict(ok, format!("pooled over {} seeds: {}; per seed: {per_seed}", SEEDS.len(), parts.join(", ")))
}

fn main() -> ExitCode {
    let quick_only = std::env::var_os("ACCEPTANCE_QUICK").is_some();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |id: usize, name: &'static str, v: Verdict| {
        println!("criterion {id} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    report(1, "quantizer round trip and error bound", quantizer());
    report(2, "gradient suite", gradients());
    report(3, "latency amortization", latency());
    report(4, "async protocol", protocol());
    report(8, "conditional generation oracle", conditional_oracle());
    if quick_only {
        println!("criteria 5-7 skipped (ACCEPTANCE_QUICK set)");
    } else {
        let t0 = Instant::now();
        let shared = shared_runs();
        eprintln!("  shared runs took {:.0}s", t0.elapsed().as_secs_f64());
        report(5, "inverted-U over bin count", inverted_u(&shared));
        report(6, "hierarchical vs monolithic at 1/3 budget", convergence(&shared));
        report(7, "curriculum strategy ablation", strategies(&shared));
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
