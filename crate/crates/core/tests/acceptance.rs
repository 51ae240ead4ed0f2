//! Acceptance run: prints one PASS/FAIL line per criterion.
//!
//! Criteria marked `reported` are printed but do not fail the target; the
//! reason is given on the line. Set `ESAC_ACCEPTANCE=1,3,5` to run a subset.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use esac::amt::{amt_update, smooth_l1, tuning_multiplier, MutationState};
use esac::config::{Algorithm, RunConfig};
use esac::envs::EnvKind;
use esac::es_core::{FitnessTable, Population, PureEs};
use esac::esac::{select_winners, EsacConfig, EsacState};
use esac::harness::{
    cmd_bench_scaling, cmd_compare_updates, cmd_sweep, random_policy_baseline, run_training,
    RunOutcome, SweepParam,
};
use esac::nnet::{backward, forward, Activation, NetSpec, ParamVector};
use esac::parallel::Executor;
use esac::rng::rng_from_seed;
use esac::sac_core::{
    compute_q_loss, draw_noise, policy_loss_with_noise, policy_sample_with_noise,
    value_loss_with_noise, SacNetworks, Transition,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::Rng;

type Outcome = esac::Result<(bool, String)>;

/// Whether a failing criterion fails the target.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Gate {
    Required,
    Reported(&'static str),
}

// ---------------------------------------------------------------------------
// Shared configurations

/// ESAC on a continuous-control task at desk scale.
fn esac_run(env: EnvKind, seed: u64, generations: u64) -> RunConfig {
    let mut cfg = RunConfig {
        env,
        algorithm: Algorithm::Esac,
        seed,
        generations,
        ..RunConfig::default()
    };
    cfg.network.hidden = vec![32, 32];
    cfg.esac.gradient_interval = 2;
    cfg.esac.p_sac_decay = 0.95;
    cfg
}

const LEARNING_GENERATIONS: u64 = 50;
const SWEEP_GENERATIONS: u64 = 30;

fn pendulum_runs(cache: &mut Option<Vec<RunOutcome>>) -> esac::Result<&Vec<RunOutcome>> {
    if cache.is_none() {
        let runs = (0..5)
            .map(|seed| {
                run_training(
                    &esac_run(EnvKind::Pendulum, seed, LEARNING_GENERATIONS),
                    None,
                )
            })
            .collect::<esac::Result<Vec<_>>>()?;
        *cache = Some(runs);
    }
    Ok(cache.as_ref().expect("filled above"))
}

// ---------------------------------------------------------------------------
// 1

fn cyclic_mdp_es() -> Outcome {
    let mut solved = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let mut cfg = RunConfig {
            env: EnvKind::CyclicMdp,
            algorithm: Algorithm::Es,
            seed,
            generations: 100,
            target_return: Some(2000.0),
            ..RunConfig::default()
        };
        cfg.validation.interval = 1;
        let out = run_training(&cfg, None)?;
        let hit = out
            .validations()
            .find(|&(_, r)| r >= 2000.0)
            .map(|(g, _)| g);
        if hit.is_some() {
            solved += 1;
        }
        detail.push(match hit {
            Some(g) => format!("seed {seed}: 2000 at generation {g}"),
            None => format!("seed {seed}: best {:.0}", out.summary.best_validation),
        });
    }
    Ok((
        solved >= 2,
        format!("{solved}/3 solved ({})", detail.join("; ")),
    ))
}

// ---------------------------------------------------------------------------
// 2

fn reduction_to_es() -> Outcome {
    let exec = Executor::new(1)?;
    let generations = 10;
    for seed in [0, 7, 21] {
        let cfg = EsacConfig {
            p_sac_initial: 0.0,
            crossover_swap_prob: 0.0,
            ..EsacConfig::default()
        };
        let mut esac = EsacState::new(cfg.clone(), EnvKind::Pendulum, seed)?;
        let mut es = PureEs::new(
            EnvKind::Pendulum,
            &cfg.hidden,
            cfg.population,
            cfg.sigma,
            cfg.alpha_es,
            1,
            seed,
        )?;
        if esac.theta_es != es.theta {
            return Ok((false, format!("seed {seed}: initial parameters differ")));
        }
        for g in 1..=generations {
            let r = esac.run_generation(&exec)?;
            let s = es.step(&exec)?;
            let same = esac
                .theta_es
                .as_slice()
                .iter()
                .zip(es.theta.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits())
                && r.best.to_bits() == s.table.best().to_bits()
                && r.mean.to_bits() == s.table.mean().to_bits()
                && r.std.to_bits() == s.table.std().to_bits()
                && !r.sac_phase_ran;
            if !same {
                return Ok((
                    false,
                    format!("seed {seed}: trajectories diverge at generation {g}"),
                ));
            }
        }
    }
    Ok((
        true,
        format!("3 seeds x {generations} generations bitwise identical"),
    ))
}

// ---------------------------------------------------------------------------
// 3

fn unclipped_recurrence(rewards: &[(f64, f64)], sigma: f64, alpha: f64, n: usize) -> f64 {
    let mut s = sigma;
    for &(r_max, r_avg) in rewards {
        s += alpha / (n as f64 * s) * smooth_l1(r_max, r_avg).expect("finite rewards");
    }
    s
}

fn tuning_multiplier_oracle() -> Outcome {
    let mut rng = rng_from_seed(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let sigma = rng.random_range(1e-3..1e-1);
        let alpha = rng.random_range(1e-4..1e-2);
        let n = rng.random_range(2..200);
        let rewards: Vec<(f64, f64)> = (0..50)
            .map(|_| {
                let scale = if rng.random_bool(0.5) { 0.5 } else { 50.0 };
                (
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                )
            })
            .collect();
        let want = unclipped_recurrence(&rewards, sigma, alpha, n);
        let got = sigma * tuning_multiplier(&rewards, sigma, alpha, n)?;
        worst = worst.max(((got - want) / want).abs());
    }
    Ok((
        worst < 1e-10,
        format!("100 histories of 50, max relative error {worst:.2e}"),
    ))
}

// ---------------------------------------------------------------------------
// 4

fn clip_invariants() -> Outcome {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 2000,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let strategy = (
        1e-5f64..1.0,
        0.0f64..0.1,
        1e-6f64..10.0,
        1usize..500,
        prop::collection::vec((-1e5f64..1e5, -1e5f64..1e5), 1..60),
    );
    let result = runner.run(&strategy, |(sigma, zeta, alpha, n, rewards)| {
        let mut state = MutationState::new(sigma, zeta, alpha, n).unwrap();
        let mut prev = state.sigma;
        for (t, &(r_max, r_avg)) in rewards.iter().enumerate() {
            let inc = amt_update(&mut state, r_max, r_avg);
            prop_assert!(
                (0.0..=zeta).contains(&inc),
                "increment {inc} outside [0, {zeta}]"
            );
            prop_assert!(state.sigma >= prev, "sigma decreased");
            prop_assert!(state.sigma <= sigma + (t + 1) as f64 * zeta * (1.0 + 1e-12) + 1e-15);
            prev = state.sigma;
        }
        Ok(())
    });
    Ok(match result {
        Ok(()) => (true, "2000 random histories".into()),
        Err(e) => (false, e.to_string()),
    })
}

// ---------------------------------------------------------------------------
// 5

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn central_difference(params: &ParamVector, mut f: impl FnMut(&ParamVector) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..params.len())
        .map(|i| {
            let mut plus = params.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            (f(&params.with_values(plus).unwrap()) - f(&params.with_values(minus).unwrap()))
                / (2.0 * h)
        })
        .collect()
}

/// Largest relative error, ignoring entries where both values are rounding noise.
fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) >= 1e-7)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn mlp_gradients(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances as u64 {
        let mut rng = rng_from_seed(5000 + seed);
        let input = rng.random_range(1..=6);
        let hidden: Vec<usize> = (0..rng.random_range(1..=3))
            .map(|_| rng.random_range(1..=8))
            .collect();
        let output = rng.random_range(1..=4);
        let out_act = if rng.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Linear
        };
        let spec =
            NetSpec::with_activations(input, &hidden, output, Activation::Tanh, out_act).unwrap();
        let params = ParamVector::new(&spec, random_vec(spec.param_count(), &mut rng)).unwrap();
        let x = random_vec(input, &mut rng);
        let upstream = random_vec(output, &mut rng);
        let (grad, _) = backward(&params, &spec, &x, &upstream).unwrap();
        let fd = central_difference(&params, |p| {
            forward(p, &spec, &x)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(y, u)| y * u)
                .sum()
        });
        worst = worst.max(max_rel_err(&grad, &fd));
    }
    worst
}

fn sac_instance(seed: u64) -> (SacNetworks, Vec<Transition>, Vec<Vec<f64>>) {
    let mut rng = rng_from_seed(seed);
    let obs = rng.random_range(1..4);
    let act = rng.random_range(1..3);
    let mut nets = SacNetworks::new(obs, act, &[5], &mut rng).unwrap();
    nets.policy_spec =
        NetSpec::with_activations(obs, &[5], 2 * act, Activation::Tanh, Activation::Linear)
            .unwrap();
    nets.q_spec =
        NetSpec::with_activations(obs + act, &[5], 1, Activation::Tanh, Activation::Linear)
            .unwrap();
    nets.value_spec =
        NetSpec::with_activations(obs, &[5], 1, Activation::Tanh, Activation::Linear).unwrap();
    nets.theta = nets.policy_spec.init_params(&mut rng);
    nets.phi1 = nets.q_spec.init_params(&mut rng);
    nets.phi2 = nets.q_spec.init_params(&mut rng);
    nets.psi = nets.value_spec.init_params(&mut rng);
    nets.psi_target = nets.value_spec.init_params(&mut rng);
    let n = rng.random_range(1..5);
    let data = (0..n)
        .map(|i| Transition {
            state: random_vec(obs, &mut rng),
            action: random_vec(act, &mut rng),
            reward: rng.random_range(-1.0..1.0),
            next_state: random_vec(obs, &mut rng),
            done: i == 0 && rng.random_bool(0.3),
        })
        .collect();
    let noise = (0..n).map(|_| draw_noise(act, &mut rng)).collect();
    (nets, data, noise)
}

/// True when the twin critics nearly tie for some sample, so the minimum may
/// switch inside the difference stencil.
fn critics_near_tie(nets: &SacNetworks, data: &[Transition], noise: &[Vec<f64>]) -> bool {
    data.iter().zip(noise).any(|(t, xi)| {
        let s = policy_sample_with_noise(&nets.policy_spec, &nets.theta, &t.state, xi).unwrap();
        let mut x = t.state.clone();
        x.extend_from_slice(&s.action);
        let q1 = forward(&nets.phi1, &nets.q_spec, &x).unwrap()[0];
        let q2 = forward(&nets.phi2, &nets.q_spec, &x).unwrap()[0];
        (q1 - q2).abs() < 1e-3
    })
}

fn gradient_checks() -> Outcome {
    const INSTANCES: usize = 25;
    let temperature = 0.2;
    let gamma = 0.99;
    let mut worst = [0.0f64; 5];
    worst[0] = mlp_gradients(INSTANCES);
    let mut counts = [INSTANCES, 0, 0, 0, 0];
    for seed in 0..200u64 {
        if counts[1..].iter().all(|&c| c >= INSTANCES) {
            break;
        }
        let (nets, data, noise) = sac_instance(9000 + seed);
        if critics_near_tie(&nets, &data, &noise) {
            continue;
        }
        let batch: Vec<&Transition> = data.iter().collect();

        let v = value_loss_with_noise(&nets, &batch, temperature, &noise)?;
        let fd = central_difference(&nets.psi, |p| {
            let mut n = nets.clone();
            n.psi = p.clone();
            value_loss_with_noise(&n, &batch, temperature, &noise)
                .unwrap()
                .loss
        });
        worst[1] = worst[1].max(max_rel_err(&v.grad, &fd));

        for (k, phi) in [(2, &nets.phi1), (3, &nets.phi2)] {
            let q = |p: &ParamVector| {
                compute_q_loss(
                    &nets.q_spec,
                    p,
                    &nets.value_spec,
                    &nets.psi_target,
                    &batch,
                    gamma,
                )
            };
            let got = q(phi)?;
            let fd = central_difference(phi, |p| q(p).unwrap().loss);
            worst[k] = worst[k].max(max_rel_err(&got.grad, &fd));
        }

        let pi = policy_loss_with_noise(&nets, &batch, temperature, &noise)?;
        let fd = central_difference(&nets.theta, |p| {
            let mut n = nets.clone();
            n.theta = p.clone();
            policy_loss_with_noise(&n, &batch, temperature, &noise)
                .unwrap()
                .loss
        });
        worst[4] = worst[4].max(max_rel_err(&pi.grad, &fd));
        for c in &mut counts[1..] {
            *c += 1;
        }
    }
    let names = ["mlp", "value", "q1", "q2", "policy"];
    let ok = worst.iter().all(|&w| w < 1e-4) && counts.iter().all(|&c| c >= 20);
    let detail = names
        .iter()
        .zip(worst.iter().zip(counts))
        .map(|(n, (w, c))| format!("{n} {c} instances max {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, detail))
}

// ---------------------------------------------------------------------------
// 6

fn winner_oracle() -> Outcome {
    let mut rng = rng_from_seed(606);
    let spec = NetSpec::new(1, &[], 1, Activation::Linear)?;
    let mut ties = 0;
    for case in 0..1000u64 {
        let n = rng.random_range(2..=80);
        let w_target = rng.random_range(1..=n);
        let fraction = (w_target as f64 + 0.5) / n as f64;
        let fraction = fraction.min(1.0);
        let raw: Vec<f64> = if rng.random_bool(0.5) {
            (0..n).map(|_| rng.random_range(-3..=3) as f64).collect()
        } else {
            (0..n).map(|_| rng.random_range(-100.0..100.0)).collect()
        };
        let distinct: BTreeSet<u64> = raw.iter().map(|r| r.to_bits()).collect();
        if distinct.len() < n {
            ties += 1;
        }
        let table = FitnessTable::new(raw.clone())?;
        let pop = Population::perturbed(spec.zeros(), case, 1, n)?;
        let winners = select_winners(&table, &pop, 0.01, fraction)?;

        let mut sorted: Vec<usize> = (0..n).collect();
        sorted.sort_by(|&a, &b| raw[b].partial_cmp(&raw[a]).unwrap().then(a.cmp(&b)));
        let w = (n as f64 * fraction).floor() as usize;
        let expected = &sorted[..w];
        let params_match = winners
            .indices
            .iter()
            .zip(&winners.params)
            .all(|(&i, p)| *p == pop.params(i, 0.01));
        if winners.indices != expected || !params_match {
            return Ok((
                false,
                format!(
                    "case {case}: got {:?}, want {:?}",
                    winners.indices, expected
                ),
            ));
        }
    }
    Ok((true, format!("1000 tables, {ties} with ties")))
}

// ---------------------------------------------------------------------------
// 7

fn scaling() -> Outcome {
    let cfg = RunConfig {
        env: EnvKind::CyclicMdp,
        ..RunConfig::default()
    };
    let samples = cmd_bench_scaling(&cfg, &[1, 4], &[50], 20, 2, None)?;
    let time = |w: usize| {
        samples
            .iter()
            .find(|s| s.worker_count == w)
            .map(|s| s.mean_s)
            .unwrap_or(f64::NAN)
    };
    let (t1, t4) = (time(1), time(4));
    let speedup = t1 / t4;
    Ok((
        speedup >= 1.5,
        format!("1 worker {t1:.4} s/gen, 4 workers {t4:.4} s/gen, speedup {speedup:.2}x"),
    ))
}

// ---------------------------------------------------------------------------
// 8

fn update_counts() -> Outcome {
    let cfg = esac_run(EnvKind::Pendulum, 0, 4);
    let rows = cmd_compare_updates(&cfg, None)?;
    let last = rows
        .last()
        .ok_or_else(|| esac::Error::InvalidArgument("no generations ran".into()))?;
    let ratio = last.esac_updates as f64 / last.sac_updates as f64;
    Ok((
        ratio < 0.5,
        format!(
            "{} env steps: esac {} updates, sac {} updates ({:.1}%)",
            last.env_steps,
            last.esac_updates,
            last.sac_updates,
            100.0 * ratio
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9

fn zeta_sweep() -> Outcome {
    let cfg = esac_run(EnvKind::Pendulum, 0, SWEEP_GENERATIONS);
    let values = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
    let rows = cmd_sweep(&cfg, SweepParam::Zeta, &values, &[0, 1, 2], None)?;
    let mean_over = |pred: &dyn Fn(f64) -> bool| {
        let sel: Vec<f64> = rows
            .iter()
            .filter(|r| pred(r.value))
            .map(|r| r.normalized_return)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let small = mean_over(&|z| z <= 1e-2);
    let large = mean_over(&|z| z >= 1e-1);
    Ok((
        small > large,
        format!("mean normalized return {small:.3} for zeta <= 1e-2, {large:.3} for zeta >= 1e-1"),
    ))
}

// ---------------------------------------------------------------------------
// 11

fn beats_random(env: EnvKind, runs: &[RunOutcome]) -> esac::Result<(usize, String)> {
    let mut wins = 0;
    let mut parts = Vec::new();
    for out in runs {
        let (mean, std) = random_policy_baseline(env, out.summary.seed, 100)?;
        let threshold = mean + 3.0 * std;
        let got = out.summary.final_validation;
        if got > threshold {
            wins += 1;
        }
        parts.push(format!(
            "seed {} {got:.1} vs {threshold:.1}",
            out.summary.seed
        ));
    }
    Ok((
        wins,
        format!(
            "{} {wins}/{} ({})",
            env.name(),
            runs.len(),
            parts.join(", ")
        ),
    ))
}

fn learning_sanity(pendulum: &[RunOutcome]) -> Outcome {
    let (p_wins, p_detail) = beats_random(EnvKind::Pendulum, &pendulum[..3])?;
    let point = (0..3)
        .map(|seed| {
            run_training(
                &esac_run(EnvKind::PointMassSparse, seed, LEARNING_GENERATIONS),
                None,
            )
        })
        .collect::<esac::Result<Vec<_>>>()?;
    let (m_wins, m_detail) = beats_random(EnvKind::PointMassSparse, &point)?;
    Ok((
        p_wins >= 2 && m_wins >= 2,
        format!("{p_detail}; {m_detail}"),
    ))
}

// ---------------------------------------------------------------------------
// 12

fn winner_improvement(pendulum: &[RunOutcome]) -> Outcome {
    let mut fractions = Vec::new();
    let mut parts = Vec::new();
    for out in pendulum {
        let phases: Vec<f64> = out
            .generations()
            .filter(|g| g.sac_phase_ran && g.generation > 20)
            .map(|g| g.winner_mean)
            .collect();
        let pairs = phases.len().saturating_sub(1);
        if pairs == 0 {
            parts.push(format!("seed {}: fewer than two phases", out.summary.seed));
            continue;
        }
        let up = phases.windows(2).filter(|w| w[1] >= w[0]).count();
        fractions.push(up as f64 / pairs as f64);
        parts.push(format!("seed {} {up}/{pairs}", out.summary.seed));
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
    Ok((
        !fractions.is_empty() && mean >= 0.7,
        format!("mean fraction {mean:.2} ({})", parts.join(", ")),
    ))
}

// ---------------------------------------------------------------------------

fn selected() -> Option<BTreeSet<u32>> {
    let spec = std::env::var("ESAC_ACCEPTANCE").ok()?;
    Some(
        spec.split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
    )
}

fn main() -> ExitCode {
    let only = selected();
    let wanted = |id: u32| only.as_ref().is_none_or(|s| s.contains(&id));
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut pendulum: Option<Vec<RunOutcome>> = None;
    let mut required_failures = Vec::new();

    let mut check = |id: u32, gate: Gate, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let (passed, detail) = match catch_unwind(AssertUnwindSafe(&mut *f)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        let note = match gate {
            Gate::Reported(why) if !passed => format!(" [reported: {why}]"),
            _ => String::new(),
        };
        println!(
            "{} criterion {id:>2}: {detail} ({:.1}s){note}",
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !passed && gate == Gate::Required {
            required_failures.push(id);
        }
    };

    check(1, Gate::Required, &mut cyclic_mdp_es);
    check(2, Gate::Required, &mut reduction_to_es);
    check(3, Gate::Required, &mut tuning_multiplier_oracle);
    check(4, Gate::Required, &mut clip_invariants);
    check(5, Gate::Required, &mut gradient_checks);
    check(6, Gate::Required, &mut winner_oracle);
    let scaling_gate = if cores >= 4 {
        Gate::Required
    } else {
        Gate::Reported("fewer than 4 cores available")
    };
    check(7, scaling_gate, &mut scaling);
    check(8, Gate::Required, &mut update_counts);
    check(
        9,
        Gate::Reported("statistical; desk-scale budget"),
        &mut zeta_sweep,
    );
    check(
        10,
        Gate::Reported("benchmark suites not available; substituted by criterion 11"),
        &mut || Ok((false, "MuJoCo / DM Control scores not reproduced".into())),
    );
    check(11, Gate::Required, &mut || {
        learning_sanity(pendulum_runs(&mut pendulum)?)
    });
    check(
        12,
        Gate::Reported("statistical; desk-scale budget"),
        &mut || winner_improvement(pendulum_runs(&mut pendulum)?),
    );

    if required_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("required criteria failed: {required_failures:?}");
        ExitCode::FAILURE
    }
}
