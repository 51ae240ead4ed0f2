//! Evolution strategies: Gaussian weight perturbations, population evaluation,
//! centered-rank fitness shaping and the score-function parameter update.

use rand_distr::{Distribution, StandardNormal};

use crate::envs::{run_episode, EnvKind};
use crate::error::{check_dim, Error, Result};
use crate::nnet::{NetSpec, ParamVector};
use crate::parallel::{parallel_map_fitness, EvalResult, EvalTask, Executor};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sac_core::{deterministic_action, policy_spec};

/// Standard-normal perturbation for one offspring, fixed by
/// `(seed, generation, index)`.
pub fn sample_perturbation(seed: u64, generation: u64, index: usize, dim: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::Perturbation, generation, index as u64);
    StandardNormal.sample_iter(&mut rng).take(dim).collect()
}

pub fn sample_perturbations(seed: u64, generation: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| sample_perturbation(seed, generation, i, dim))
        .collect()
}

/// Seed of episode `episode` for offspring `index` in `generation`.
pub fn episode_seed(seed: u64, generation: u64, index: usize, episode: usize) -> u64 {
    derive_seed(
        derive_seed(seed, Stream::Episode, generation, index as u64),
        Stream::Episode,
        episode as u64,
        0,
    )
}

/// Mean deterministic-policy return over `episodes` episodes and the number of
/// environment steps taken.
pub fn policy_return(
    spec: &NetSpec,
    params: &ParamVector,
    env: EnvKind,
    seed: u64,
    episodes: usize,
) -> Result<(f64, usize)> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be positive".into()));
    }
    let mut e = env.make();
    let mut total = 0.0;
    let mut steps = 0;
    for k in 0..episodes {
        let s = if k == 0 {
            seed
        } else {
            derive_seed(seed, Stream::Episode, k as u64, 1)
        };
        let out = run_episode(e.as_mut(), |obs| deterministic_action(spec, params, obs), s)?;
        total += out.episodic_return;
        steps += out.length;
    }
    Ok((total / episodes as f64, steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberOrigin {
    Sac,
    Crossover,
}

#[derive(Debug, Clone)]
pub enum Member {
    /// `base + sigma * epsilon`.
    Perturbed { epsilon: Vec<f64> },
    /// A fixed candidate evaluated as-is; contributes nothing to the ES update.
    Injected {
        params: ParamVector,
        origin: MemberOrigin,
    },
}

/// Base parameters plus `n` members.
#[derive(Debug, Clone)]
pub struct Population {
    base: ParamVector,
    members: Vec<Member>,
}

impl Population {
    /// `n` fresh perturbations of `base`.
    pub fn perturbed(base: ParamVector, seed: u64, generation: u64, n: usize) -> Result<Self> {
        Population::with_injected(base, Vec::new(), seed, generation, n)
    }

    /// Injected members take indices `0..m`; the remaining `n - m` members are
    /// fresh perturbations with indices `m..n`.
    pub fn with_injected(
        base: ParamVector,
        injected: Vec<(ParamVector, MemberOrigin)>,
        seed: u64,
        generation: u64,
        n: usize,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("es.population", "must be at least 2"));
        }
        if injected.len() > n {
            return Err(Error::config(
                "es.population",
                format!("{} injected members exceed population {n}", injected.len()),
            ));
        }
        for (p, _) in &injected {
            check_dim("injected member", base.len(), p.len())?;
        }
        let dim = base.len();
        let m = injected.len();
        let mut members: Vec<Member> = injected
            .into_iter()
            .map(|(params, origin)| Member::Injected { params, origin })
            .collect();
        members.extend((m..n).map(|i| Member::Perturbed {
            epsilon: sample_perturbation(seed, generation, i, dim),
        }));
        Ok(Population { base, members })
    }

    pub fn base(&self) -> &ParamVector {
        &self.base
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn epsilon(&self, i: usize) -> Option<&[f64]> {
        match &self.members[i] {
            Member::Perturbed { epsilon } => Some(epsilon),
            Member::Injected { .. } => None,
        }
    }

    /// Parameters actually evaluated for member `i`.
    pub fn params(&self, i: usize, sigma: f64) -> ParamVector {
        match &self.members[i] {
            Member::Perturbed { epsilon } => {
                let values = self
                    .base
                    .as_slice()
                    .iter()
                    .zip(epsilon)
                    .map(|(b, e)| b + sigma * e)
                    .collect();
                self.base
                    .with_values(values)
                    .expect("perturbation has base length")
            }
            Member::Injected { params, .. } => params.clone(),
        }
    }
}

/// Evaluates every member with the deterministic policy. Episode seeds depend
/// only on `(seed, generation, member index)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_population(
    executor: &Executor,
    spec: &NetSpec,
    pop: &Population,
    sigma: f64,
    env: EnvKind,
    episodes_per_offspring: usize,
    seed: u64,
    generation: u64,
) -> Result<Vec<EvalResult>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let tasks: Vec<EvalTask> = (0..pop.len())
        .map(|i| EvalTask {
            index: i,
            params: pop.params(i, sigma),
            env,
            seed: episode_seed(seed, generation, i, 0),
            episodes: episodes_per_offspring,
        })
        .collect();
    parallel_map_fitness(executor, spec, &tasks)
}

/// Centered ranks: the k-th smallest value (ties by index) maps to
/// `k / (n - 1) - 0.5`.
pub fn rank_normalize(raw: &[f64]) -> Result<Vec<f64>> {
    let n = raw.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "rank normalization needs n >= 2".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let denom = (n - 1) as f64;
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = rank as f64 / denom - 0.5;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessTable {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Member indices by raw return, best first; ties by lower index.
    pub order: Vec<usize>,
}

impl FitnessTable {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if let Some(i) = raw.iter().position(|r| !r.is_finite()) {
            return Err(Error::Numerical(format!(
                "offspring {i} has non-finite fitness"
            )));
        }
        let normalized = rank_normalize(&raw)?;
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
        Ok(FitnessTable {
            raw,
            normalized,
            order,
        })
    }

    pub fn best(&self) -> f64 {
        self.raw[self.order[0]]
    }

    pub fn mean(&self) -> f64 {
        self.raw.iter().sum::<f64>() / self.raw.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.raw.iter().map(|r| (r - m).powi(2)).sum::<f64>() / self.raw.len() as f64).sqrt()
    }
}

/// `theta + alpha / (n sigma) * sum_i F_i eps_i`, where `n = scores.len()` and
/// members without a perturbation (`None`) contribute zero.
pub fn es_update(
    theta: &ParamVector,
    scores: &[f64],
    perturbations: &[Option<&[f64]>],
    alpha: f64,
    sigma: f64,
) -> Result<ParamVector> {
    if sigma == 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ES update needs a finite non-zero sigma, got {sigma}"
        )));
    }
    let n = scores.len();
    if n < 2 {
        return Err(Error::InvalidArgument("ES update needs n >= 2".into()));
    }
    check_dim("ES perturbations", n, perturbations.len())?;
    let mut step = vec![0.0; theta.len()];
    for (&f, eps) in scores.iter().zip(perturbations) {
        if let Some(eps) = eps {
            check_dim("ES perturbation", theta.len(), eps.len())?;
            for (s, e) in step.iter_mut().zip(eps.iter()) {
                *s += f * e;
            }
        }
    }
    let scale = alpha / (n as f64 * sigma);
    let values = theta
        .as_slice()
        .iter()
        .zip(&step)
        .map(|(t, s)| t + scale * s)
        .collect();
    theta.with_values(values)
}

impl Population {
    pub fn es_update(&self, table: &FitnessTable, alpha: f64, sigma: f64) -> Result<ParamVector> {
        let eps: Vec<Option<&[f64]>> = (0..self.len()).map(|i| self.epsilon(i)).collect();
        es_update(&self.base, &table.normalized, &eps, alpha, sigma)
    }
}

/// Statistics of one ES generation.
#[derive(Debug, Clone, PartialEq)]
pub struct EsStep {
    pub table: FitnessTable,
    /// Evaluated parameters of the best member.
    pub best_params: ParamVector,
    pub env_steps: usize,
}

/// Plain ES on a deterministic policy network.
#[derive(Debug, Clone)]
pub struct PureEs {
    pub spec: NetSpec,
    pub theta: ParamVector,
    pub sigma: f64,
    pub alpha: f64,
    pub population: usize,
    pub env: EnvKind,
    pub episodes_per_offspring: usize,
    pub seed: u64,
    /// Completed generations.
    pub generation: u64,
}

impl PureEs {
    pub fn new(
        env: EnvKind,
        hidden: &[usize],
        population: usize,
        sigma: f64,
        alpha: f64,
        episodes_per_offspring: usize,
        seed: u64,
    ) -> Result<Self> {
        let spec = policy_spec(env.observation_dim(), env.action_dim(), hidden)?;
        let theta = spec.init_params(&mut stream_rng(seed, Stream::Init, 0, 0));
        Ok(PureEs {
            spec,
            theta,
            sigma,
            alpha,
            population,
            env,
            episodes_per_offspring,
            seed,
            generation: 0,
        })
    }

    /// Runs generation `self.generation + 1`.
    pub fn step(&mut self, executor: &Executor) -> Result<EsStep> {
        let generation = self.generation + 1;
        let pop =
            Population::perturbed(self.theta.clone(), self.seed, generation, self.population)?;
        let results = evaluate_population(
            executor,
            &self.spec,
            &pop,
            self.sigma,
            self.env,
            self.episodes_per_offspring,
            self.seed,
            generation,
        )?;
        let table = FitnessTable::new(results.iter().map(|r| r.fitness).collect())?;
        self.theta = pop.es_update(&table, self.alpha, self.sigma)?;
        self.generation = generation;
        Ok(EsStep {
            best_params: pop.params(table.order[0], self.sigma),
            table,
            env_steps: results.iter().map(|r| r.env_steps).sum(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::CyclicAction;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perturbations_are_deterministic_and_distinct() {
        let a = sample_perturbations(7, 3, 4, 16);
        assert_eq!(a, sample_perturbations(7, 3, 4, 16));
        assert_ne!(a[0], a[1]);
        assert_ne!(a[0], sample_perturbation(7, 4, 0, 16));
    }

    #[test]
    fn perturbation_moments() {
        let draws: Vec<f64> = (0..10_000)
            .map(|i| sample_perturbation(1, 0, i, 1)[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn centered_rank_examples() {
        assert_eq!(
            rank_normalize(&[10.0, -5.0, 3.0]).unwrap(),
            vec![0.5, -0.5, 0.0]
        );
        assert_eq!(
            rank_normalize(&[4.0, 4.0, 4.0]).unwrap(),
            vec![-0.5, 0.0, 0.5]
        );
        assert!(rank_normalize(&[1.0]).is_err());
    }

    #[test]
    fn fitness_order_breaks_ties_by_index() {
        let t = FitnessTable::new(vec![3.0, 9.0, 1.0, 9.0, 2.0]).unwrap();
        assert_eq!(t.order, vec![1, 3, 0, 4, 2]);
        assert_eq!(t.best(), 9.0);
        assert!(FitnessTable::new(vec![1.0, f64::NAN]).is_err());
    }

    fn spec2() -> NetSpec {
        NetSpec::new(1, &[], 2, crate::nnet::Activation::Linear).unwrap()
    }

    #[test]
    fn two_member_update_example() {
        // 1 -> 2 linear layer has four parameters; only the first two move.
        let spec = spec2();
        let theta = spec.zeros();
        let e1 = [1.0, 0.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0, 0.0];
        let out = es_update(
            &theta,
            &[0.5, -0.5],
            &[Some(&e1[..]), Some(&e2[..])],
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(out.as_slice(), &[0.25, -0.25, 0.0, 0.0]);
    }

    #[test]
    fn zero_scores_and_zero_sigma() {
        let spec = spec2();
        let theta = spec.init_params(&mut rng_from_seed(1));
        let e = [1.0, 2.0, 3.0, 4.0];
        let same = es_update(&theta, &[0.0, 0.0], &[Some(&e[..]), Some(&e[..])], 0.1, 0.2).unwrap();
        assert_eq!(same, theta);
        assert!(es_update(
            &theta,
            &[0.5, -0.5],
            &[Some(&e[..]), Some(&e[..])],
            0.1,
            0.0
        )
        .is_err());
    }

    #[test]
    fn update_matches_naive_sum() {
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let spec = NetSpec::new(3, &[4], 2, crate::nnet::Activation::Linear).unwrap();
            let theta = spec.init_params(&mut rng);
            let n = rng.random_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let eps: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..theta.len())
                        .map(|_| rng.random_range(-2.0..2.0))
                        .collect()
                })
                .collect();
            let refs: Vec<Option<&[f64]>> = eps.iter().map(|e| Some(e.as_slice())).collect();
            let (alpha, sigma) = (rng.random_range(0.001..0.1), rng.random_range(0.001..0.1));
            let got = es_update(&theta, &scores, &refs, alpha, sigma).unwrap();
            for j in 0..theta.len() {
                let mut s = 0.0;
                for i in 0..n {
                    s += scores[i] * eps[i][j];
                }
                let want = theta.as_slice()[j] + alpha / (n as f64 * sigma) * s;
                assert!((got.as_slice()[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_sigma_scores_match_base() {
        let exec = Executor::new(1).unwrap();
        let es = PureEs::new(EnvKind::Pendulum, &[8], 6, 1e-12, 0.01, 1, 3).unwrap();
        let pop = Population::perturbed(es.theta.clone(), 3, 0, 6).unwrap();
        let res =
            evaluate_population(&exec, &es.spec, &pop, 1e-12, EnvKind::Pendulum, 1, 3, 0).unwrap();
        for r in &res {
            let (base, _) = policy_return(
                &es.spec,
                &es.theta,
                EnvKind::Pendulum,
                episode_seed(3, 0, r.index, 0),
                1,
            )
            .unwrap();
            assert!((r.fitness - base).abs() < 1e-6, "{} vs {base}", r.fitness);
        }
    }

    /// Policy whose tanh-mean output always prefers clockwise.
    fn clockwise_policy(spec: &NetSpec) -> ParamVector {
        let mut values = vec![0.0; spec.param_count()];
        // No hidden layers: biases follow the 3x6 weight block.
        let bias = 3 * 6;
        values[bias..bias + 3].copy_from_slice(&[2.0, -2.0, -2.0]);
        ParamVector::new(spec, values).unwrap()
    }

    #[test]
    fn clockwise_population_scores_maximum() {
        let spec = policy_spec(3, 3, &[]).unwrap();
        let base = clockwise_policy(&spec);
        let a = deterministic_action(&spec, &base, &[1.0, 0.0, 0.0]).unwrap();
        let clockwise = CyclicAction::Clockwise.one_hot();
        assert!(a
            .iter()
            .zip(&clockwise)
            .all(|(x, c)| x.signum() == c.signum()));
        let pop = Population::perturbed(base, 9, 0, 10).unwrap();
        let exec = Executor::new(2).unwrap();
        let res =
            evaluate_population(&exec, &spec, &pop, 1e-3, EnvKind::CyclicMdp, 1, 9, 0).unwrap();
        assert!(res.iter().all(|r| r.fitness == 2000.0));
    }

    #[test]
    fn evaluation_order_does_not_change_scores() {
        let es = PureEs::new(EnvKind::Pendulum, &[8], 5, 0.1, 0.01, 1, 4).unwrap();
        let pop = Population::perturbed(es.theta.clone(), 4, 2, 5).unwrap();
        let forward: Vec<f64> = (0..5)
            .map(|i| {
                policy_return(
                    &es.spec,
                    &pop.params(i, 0.1),
                    es.env,
                    episode_seed(4, 2, i, 0),
                    1,
                )
                .unwrap()
                .0
            })
            .collect();
        let backward: Vec<f64> = (0..5)
            .rev()
            .map(|i| {
                policy_return(
                    &es.spec,
                    &pop.params(i, 0.1),
                    es.env,
                    episode_seed(4, 2, i, 0),
                    1,
                )
                .unwrap()
                .0
            })
            .collect();
        let mut reversed = backward.clone();
        reversed.reverse();
        assert_eq!(forward, reversed);
        let exec = Executor::new(3).unwrap();
        let pooled = evaluate_population(&exec, &es.spec, &pop, 0.1, es.env, 1, 4, 2).unwrap();
        assert_eq!(
            pooled.iter().map(|r| r.fitness).collect::<Vec<_>>(),
            forward
        );
    }

    #[test]
    fn injected_members_come_first_and_are_not_perturbed() {
        let spec = spec2();
        let base = spec.zeros();
        let fixed = ParamVector::new(&spec, vec![1.0; 4]).unwrap();
        let pop = Population::with_injected(
            base.clone(),
            vec![(fixed.clone(), MemberOrigin::Sac)],
            5,
            1,
            4,
        )
        .unwrap();
        assert_eq!(pop.params(0, 0.3), fixed);
        assert!(pop.epsilon(0).is_none());
        assert_eq!(
            pop.epsilon(2).unwrap(),
            sample_perturbation(5, 1, 2, 4).as_slice()
        );
        let too_many = vec![(fixed.clone(), MemberOrigin::Crossover); 3];
        assert!(Population::with_injected(base, too_many, 5, 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn centered_ranks_are_bounded_and_balanced(raw in prop::collection::vec(-1e6f64..1e6, 2..64)) {
            let f = rank_normalize(&raw).unwrap();
            prop_assert!(f.iter().sum::<f64>().abs() < 1e-12);
            prop_assert!(f.iter().all(|v| v.abs() <= 0.5));
        }

        #[test]
        fn update_is_linear_in_scores(
            scores in prop::collection::vec(-0.5f64..0.5, 3),
            a in -4.0f64..4.0,
            seed in 0u64..1000,
        ) {
            let spec = spec2();
            let theta = spec.zeros();
            let eps = sample_perturbations(seed, 0, 3, 4);
            let refs: Vec<Option<&[f64]>> = eps.iter().map(|e| Some(e.as_slice())).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| a * s).collect();
            let d1 = es_update(&theta, &scores, &refs, 0.3, 0.7).unwrap();
            let d2 = es_update(&theta, &scaled, &refs, 0.3, 0.7).unwrap();
            for (x, y) in d1.as_slice().iter().zip(d2.as_slice()) {
                prop_assert!((a * x - y).abs() < 1e-9);
            }
        }
    }
}
