//! Training runs and experiment drivers behind the command-line interface.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, RunConfig};
use crate::envs::{run_episode, EnvKind};
use crate::error::{Error, Result};
use crate::es_core::{policy_return, PureEs};
use crate::esac::{EsacState, GenerationRecord};
use crate::nnet::{NetSpec, ParamVector};
use crate::parallel::{measure_scaling, write_timing_csv, Executor, ScalingSetup, TimingSample};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sac_core::{SacAgent, SacNetworks, SacTrainer};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Generation(GenerationRecord),
    SacEpisode {
        episode: u64,
        episodic_return: f64,
        length: usize,
        env_steps: u64,
        total_gradient_updates: u64,
    },
    Validation {
        /// Generation, or episode count for `sac`.
        generation: u64,
        env_steps: u64,
        mean_return: f64,
        std_return: f64,
    },
}

/// JSON-lines writer that flushes after every record.
pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn disabled() -> Self {
        MetricsWriter { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub seed: u64,
    pub generations: u64,
    pub env_steps: u64,
    pub gradient_updates: u64,
    pub best_validation: f64,
    pub final_validation: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub records: Vec<MetricRecord>,
}

impl RunOutcome {
    pub fn generations(&self) -> impl Iterator<Item = &GenerationRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Generation(g) => Some(g),
            _ => None,
        })
    }

    pub fn validations(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Validation {
                generation,
                mean_return,
                ..
            } => Some((*generation, *mean_return)),
            _ => None,
        })
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Seed of validation episode `k`; the same episodes are used at every validation.
pub fn validation_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, Stream::Validation, k as u64, 0)
}

/// Mean and standard deviation of deterministic-policy returns.
pub fn validate_policy(
    spec: &NetSpec,
    params: &ParamVector,
    env: EnvKind,
    seed: u64,
    episodes: usize,
) -> Result<(f64, f64)> {
    let returns = (0..episodes)
        .map(|k| policy_return(spec, params, env, validation_seed(seed, k), 1).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&returns))
}

/// Returns of a policy drawing actions uniformly from `[-1, 1]^d`, on the
/// validation episodes.
pub fn random_policy_baseline(env: EnvKind, seed: u64, episodes: usize) -> Result<(f64, f64)> {
    let mut e = env.make();
    let dim = env.action_dim();
    let returns = (0..episodes)
        .map(|k| {
            let mut rng = stream_rng(seed, Stream::Baseline, k as u64, 1);
            run_episode(
                e.as_mut(),
                |_| Ok((0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()),
                validation_seed(seed, k),
            )
            .map(|o| o.episodic_return)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&returns))
}

struct RunOutputs {
    dir: Option<PathBuf>,
    metrics: MetricsWriter,
    records: Vec<MetricRecord>,
    best_validation: f64,
    last_validation: Option<(u64, f64)>,
}

impl RunOutputs {
    fn new(dir: Option<&Path>) -> Result<Self> {
        let metrics = match dir {
            Some(d) => {
                fs::create_dir_all(d.join("checkpoints"))?;
                MetricsWriter::create(&d.join("metrics.jsonl"))?
            }
            None => MetricsWriter::disabled(),
        };
        Ok(RunOutputs {
            dir: dir.map(Path::to_path_buf),
            metrics,
            records: Vec::new(),
            best_validation: f64::NAN,
            last_validation: None,
        })
    }

    fn emit(&mut self, record: MetricRecord) -> Result<()> {
        self.metrics.write(&record)?;
        if let MetricRecord::Validation {
            generation,
            mean_return,
            ..
        } = record
        {
            self.best_validation = self.best_validation.max(mean_return);
            if self.best_validation.is_nan() {
                self.best_validation = mean_return;
            }
            self.last_validation = Some((generation, mean_return));
        }
        self.records.push(record);
        Ok(())
    }

    fn checkpoint_path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoints").join(name))
    }

    fn validated_at(&self, generation: u64) -> bool {
        matches!(self.last_validation, Some((g, _)) if g == generation)
    }
}

fn validate_candidates(
    cfg: &RunConfig,
    spec: &NetSpec,
    candidates: &[&ParamVector],
) -> Result<(f64, f64)> {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for p in candidates {
        let r = validate_policy(spec, p, cfg.env, cfg.seed, cfg.validation.episodes)?;
        if r.0 > best.0 {
            best = r;
        }
    }
    Ok(best)
}

fn reached_target(cfg: &RunConfig, mean_return: f64) -> bool {
    cfg.target_return.is_some_and(|t| mean_return >= t)
}

fn within_budget(cfg: &RunConfig, env_steps: u64) -> bool {
    cfg.env_step_budget.is_none_or(|b| env_steps < b)
}

/// Runs the configured algorithm. Writes metrics and checkpoints under `out`
/// when given.
pub fn run_training(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut outputs = RunOutputs::new(out)?;
    let executor = Executor::new(cfg.workers)?;
    let (generations, env_steps, gradient_updates) = match cfg.algorithm {
        Algorithm::Esac => train_esac(cfg, &executor, &mut outputs)?,
        Algorithm::Es => train_es(cfg, &executor, &mut outputs)?,
        Algorithm::Sac => train_sac(cfg, &mut outputs)?,
    };
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        env: cfg.env,
        seed: cfg.seed,
        generations,
        env_steps,
        gradient_updates,
        best_validation: outputs.best_validation,
        final_validation: outputs.last_validation.map_or(f64::NAN, |v| v.1),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &outputs.dir {
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.serialize(&summary)?;
        w.flush()?;
    }
    Ok(RunOutcome {
        summary,
        records: outputs.records,
    })
}

fn train_esac(
    cfg: &RunConfig,
    executor: &Executor,
    outputs: &mut RunOutputs,
) -> Result<(u64, u64, u64)> {
    let mut state = EsacState::new(cfg.esac_config(), cfg.env, cfg.seed)?;
    let validate = |state: &EsacState, outputs: &mut RunOutputs| -> Result<bool> {
        let (mean_return, std_return) =
            validate_candidates(cfg, &state.spec, &state.validation_candidates())?;
        outputs.emit(MetricRecord::Validation {
            generation: state.generation,
            env_steps: state.env_steps,
            mean_return,
            std_return,
        })?;
        if let Some(p) = outputs.checkpoint_path("latest.ckpt") {
            state.checkpoint().save(&p)?;
        }
        Ok(reached_target(cfg, mean_return))
    };
    while state.generation < cfg.generations && within_budget(cfg, state.env_steps) {
        let record = state.run_generation(executor)?;
        log::debug!(
            "generation {} best {:.2} mean {:.2} sigma {:.5}",
            record.generation,
            record.best,
            record.mean,
            record.sigma
        );
        outputs.emit(MetricRecord::Generation(record))?;
        if state.generation % cfg.validation.interval == 0 && validate(&state, outputs)? {
            break;
        }
    }
    if state.generation > 0 && !outputs.validated_at(state.generation) {
        validate(&state, outputs)?;
    }
    if let Some(p) = outputs.checkpoint_path("final.ckpt") {
        state.checkpoint().save(&p)?;
    }
    Ok((
        state.generation,
        state.env_steps,
        state.agent.update_count(),
    ))
}

fn save_params(outputs: &RunOutputs, params: &ParamVector) -> Result<()> {
    if let Some(p) = outputs.checkpoint_path("final_policy.params") {
        let mut w = BufWriter::new(File::create(p)?);
        params.write_to(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn train_es(
    cfg: &RunConfig,
    executor: &Executor,
    outputs: &mut RunOutputs,
) -> Result<(u64, u64, u64)> {
    let mut es = PureEs::new(
        cfg.env,
        &cfg.network.hidden,
        cfg.es.population,
        cfg.es.sigma,
        cfg.es.alpha,
        cfg.es.episodes_per_offspring,
        cfg.seed,
    )?;
    let mut env_steps = 0u64;
    let mut best_member: Option<ParamVector> = None;
    let validate = |es: &PureEs,
                    best: &Option<ParamVector>,
                    steps: u64,
                    outputs: &mut RunOutputs|
     -> Result<bool> {
        let mut candidates = vec![&es.theta];
        candidates.extend(best.iter());
        let (mean_return, std_return) = validate_candidates(cfg, &es.spec, &candidates)?;
        outputs.emit(MetricRecord::Validation {
            generation: es.generation,
            env_steps: steps,
            mean_return,
            std_return,
        })?;
        Ok(reached_target(cfg, mean_return))
    };
    while es.generation < cfg.generations && within_budget(cfg, env_steps) {
        let started = Instant::now();
        let step = es.step(executor)?;
        env_steps += step.env_steps as u64;
        let t = &step.table;
        outputs.emit(MetricRecord::Generation(GenerationRecord {
            generation: es.generation,
            best: t.best(),
            mean: t.mean(),
            std: t.std(),
            winner_mean: t.best(),
            sigma: es.sigma,
            p_sac: 0.0,
            sac_phase_ran: false,
            gradient_updates: 0,
            total_gradient_updates: 0,
            duration_s: started.elapsed().as_secs_f64(),
            env_steps,
            sac_member_fitness: None,
        }))?;
        best_member = Some(step.best_params);
        if es.generation % cfg.validation.interval == 0
            && validate(&es, &best_member, env_steps, outputs)?
        {
            break;
        }
    }
    if es.generation > 0 && !outputs.validated_at(es.generation) {
        validate(&es, &best_member, env_steps, outputs)?;
    }
    save_params(outputs, &es.theta)?;
    Ok((es.generation, env_steps, 0))
}

fn sac_trainer(cfg: &RunConfig) -> Result<SacTrainer<crate::rng::StreamRng>> {
    let (obs, act) = (cfg.env.observation_dim(), cfg.env.action_dim());
    let nets = SacNetworks::new(
        obs,
        act,
        &cfg.network.hidden,
        &mut stream_rng(cfg.seed, Stream::Init, 1, 0),
    )?;
    let agent = SacAgent::new(nets, cfg.sac.clone())?;
    Ok(SacTrainer::new(
        agent,
        cfg.env.make(),
        stream_rng(cfg.seed, Stream::Baseline, 0, 0),
        cfg.seed,
    ))
}

fn train_sac(cfg: &RunConfig, outputs: &mut RunOutputs) -> Result<(u64, u64, u64)> {
    let mut trainer = sac_trainer(cfg)?;
    let validate = |trainer: &SacTrainer<_>, outputs: &mut RunOutputs| -> Result<bool> {
        let a = &trainer.agent;
        let (mean_return, std_return) =
            validate_candidates(cfg, &a.nets.policy_spec, &[&a.nets.theta])?;
        outputs.emit(MetricRecord::Validation {
            generation: trainer.episodes(),
            env_steps: trainer.env_steps(),
            mean_return,
            std_return,
        })?;
        Ok(reached_target(cfg, mean_return))
    };
    'episodes: while trainer.episodes() < cfg.generations {
        loop {
            if !within_budget(cfg, trainer.env_steps()) {
                break 'episodes;
            }
            if let Some(outcome) = trainer.step()? {
                outputs.emit(MetricRecord::SacEpisode {
                    episode: trainer.episodes(),
                    episodic_return: outcome.episodic_return,
                    length: outcome.length,
                    env_steps: trainer.env_steps(),
                    total_gradient_updates: trainer.agent.update_count(),
                })?;
                break;
            }
        }
        if trainer.episodes() % cfg.validation.interval == 0 && validate(&trainer, outputs)? {
            break;
        }
    }
    if trainer.episodes() > 0 && !outputs.validated_at(trainer.episodes()) {
        validate(&trainer, outputs)?;
    }
    save_params(outputs, &trainer.agent.nets.theta)?;
    Ok((
        trainer.episodes(),
        trainer.env_steps(),
        trainer.agent.update_count(),
    ))
}

/// Scaling benchmark over worker counts and population sizes; writes
/// `timing.csv` under `out` when given.
pub fn cmd_bench_scaling(
    cfg: &RunConfig,
    worker_counts: &[usize],
    population_sizes: &[usize],
    generations: usize,
    warmup_generations: usize,
    out: Option<&Path>,
) -> Result<Vec<TimingSample>> {
    cfg.validate()?;
    let setup = ScalingSetup {
        env: cfg.env,
        hidden: cfg.network.hidden.clone(),
        sigma: cfg.es.sigma,
        alpha_es: cfg.es.alpha,
        episodes_per_offspring: cfg.es.episodes_per_offspring,
        seed: cfg.seed,
        warmup_generations,
        generations,
    };
    let samples = measure_scaling(&setup, worker_counts, population_sizes)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_timing_csv(&samples, File::create(dir.join("timing.csv"))?)?;
    }
    Ok(samples)
}

/// Speedup of every sample relative to the fewest-worker sample of the same population.
pub fn speedup_report(samples: &[TimingSample]) -> String {
    let mut lines = Vec::new();
    for s in samples {
        let base = samples
            .iter()
            .filter(|b| b.population == s.population)
            .min_by_key(|b| b.worker_count)
            .expect("sample list contains s");
        lines.push(format!(
            "population {:>4}  workers {:>3}  {:.4} s/gen (sd {:.4})  speedup {:.2}x",
            s.population,
            s.worker_count,
            s.mean_s,
            s.std_s,
            base.mean_s / s.mean_s
        ));
    }
    lines.join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Zeta,
    Sigma,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeta" => Ok(SweepParam::Zeta),
            "sigma" => Ok(SweepParam::Sigma),
            other => Err(Error::config(
                "sweep.param",
                format!("expected `zeta` or `sigma`, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub final_return: f64,
    pub normalized_return: f64,
}

/// Divides by the best return when every return is positive; otherwise maps
/// the sweep's range onto `[0, 1]`.
pub fn normalize_returns(returns: &[f64]) -> Vec<f64> {
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = returns.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        returns.iter().map(|r| r / max).collect()
    } else if max > min {
        returns.iter().map(|r| (r - min) / (max - min)).collect()
    } else {
        vec![1.0; returns.len()]
    }
}

/// Final validation return for every `(value, seed)` pair, normalized across
/// the whole sweep. Writes `sweep.csv` under `out` when given.
pub fn cmd_sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::config("sweep.values", "need at least two values"));
    }
    if seeds.len() < 3 {
        return Err(Error::config("sweep.seeds", "need at least three seeds"));
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut run = cfg.clone();
            run.seed = seed;
            match param {
                SweepParam::Zeta => run.amt.zeta = value,
                SweepParam::Sigma => run.es.sigma = value,
            }
            let outcome = run_training(&run, None)?;
            log::info!(
                "sweep value {value} seed {seed}: {:.3}",
                outcome.summary.final_validation
            );
            rows.push(SweepRow {
                value,
                seed,
                final_return: outcome.summary.final_validation,
                normalized_return: f64::NAN,
            });
        }
    }
    let normalized = normalize_returns(&rows.iter().map(|r| r.final_return).collect::<Vec<_>>());
    for (row, n) in rows.iter_mut().zip(normalized) {
        row.normalized_return = n;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareRow {
    pub env_steps: u64,
    pub esac_updates: u64,
    pub sac_updates: u64,
}

/// Runs ESAC for the configured budget, then plain SAC for exactly the same
/// number of environment steps, and reports both cumulative gradient-update
/// counts at every ESAC generation boundary.
pub fn cmd_compare_updates(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<CompareRow>> {
    let mut cfg = cfg.clone();
    cfg.algorithm = Algorithm::Esac;
    cfg.validate()?;
    let executor = Executor::new(cfg.workers)?;
    let mut state = EsacState::new(cfg.esac_config(), cfg.env, cfg.seed)?;
    let mut marks = Vec::new();
    while state.generation < cfg.generations && within_budget(&cfg, state.env_steps) {
        state.run_generation(&executor)?;
        marks.push((state.env_steps, state.agent.update_count()));
    }

    let mut trainer = sac_trainer(&cfg)?;
    let mut rows = Vec::with_capacity(marks.len());
    for (steps, esac_updates) in marks {
        while trainer.env_steps() < steps {
            trainer.step()?;
        }
        rows.push(CompareRow {
            env_steps: steps,
            esac_updates,
            sac_updates: trainer.agent.update_count(),
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("compare_updates.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_returns(&[1.0, 2.0, 4.0]), vec![0.25, 0.5, 1.0]);
        assert_eq!(
            normalize_returns(&[-300.0, -100.0, -200.0]),
            vec![0.0, 1.0, 0.5]
        );
        assert_eq!(normalize_returns(&[-3.0, -3.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn metric_records_are_tagged() {
        let r = MetricRecord::Validation {
            generation: 5,
            env_steps: 10,
            mean_return: -1.5,
            std_return: 0.0,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.starts_with("{\"kind\":\"validation\""), "{line}");
        assert_eq!(serde_json::from_str::<MetricRecord>(&line).unwrap(), r);
    }

    #[test]
    fn sweep_preconditions() {
        let cfg = RunConfig::default();
        assert!(cmd_sweep(&cfg, SweepParam::Zeta, &[1e-3, 1e-2], &[0], None)
            .unwrap_err()
            .is_config());
        assert!(cmd_sweep(&cfg, SweepParam::Zeta, &[1e-3], &[0, 1, 2], None)
            .unwrap_err()
            .is_config());
        assert!("delta".parse::<SweepParam>().is_err());
    }

    #[test]
    fn zero_budget_sac_run_is_empty() {
        let cfg = RunConfig {
            algorithm: Algorithm::Sac,
            env_step_budget: Some(0),
            ..RunConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&cfg, Some(dir.path())).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.summary.env_steps, 0);
        assert_eq!(
            fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(),
            ""
        );
        assert!(dir.path().join("summary.csv").exists());
    }

    #[test]
    fn random_baseline_is_reproducible() {
        let a = random_policy_baseline(EnvKind::Pendulum, 3, 5).unwrap();
        assert_eq!(a, random_policy_baseline(EnvKind::Pendulum, 3, 5).unwrap());
        assert!(a.0 < 0.0 && a.1 > 0.0);
    }
}
