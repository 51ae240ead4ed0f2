//! Fixed-size worker pool for fitness evaluation, and the scaling benchmark.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::es_core::{policy_return, PureEs};
use crate::nnet::{NetSpec, ParamVector};

/// One offspring evaluation.
#[derive(Debug, Clone)]
pub struct EvalTask {
    pub index: usize,
    pub params: ParamVector,
    pub env: EnvKind,
    pub seed: u64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub index: usize,
    /// Mean undiscounted return over the task's episodes.
    pub fitness: f64,
    pub env_steps: usize,
}

pub struct Executor {
    pool: rayon::ThreadPool,
    workers: usize,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.workers)
            .finish()
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("esac-worker-{i}"))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
        Ok(Executor { pool, workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Applies `f` to every item and returns the results in input order. A
    /// failing or panicking item aborts the call with an error naming `key(item)`.
    pub fn map<T, U, F, K>(&self, items: &[T], key: K, f: F) -> Result<Vec<U>>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> Result<U> + Sync,
        K: Fn(&T) -> usize + Sync,
    {
        let run = |item: &T| -> Result<U> {
            match catch_unwind(AssertUnwindSafe(|| f(item))) {
                Ok(Ok(u)) => Ok(u),
                Ok(Err(e)) => Err(Error::Worker {
                    index: key(item),
                    message: e.to_string(),
                }),
                Err(payload) => Err(Error::Worker {
                    index: key(item),
                    message: panic_message(payload),
                }),
            }
        };
        if self.workers == 1 {
            return items.iter().map(run).collect();
        }
        let results: Vec<Result<U>> = self.pool.install(|| items.par_iter().map(run).collect());
        // Report the lowest failing index so diagnostics do not depend on scheduling.
        results.into_iter().collect()
    }
}

/// Deterministic-policy returns for every task, in task order.
pub fn parallel_map_fitness(
    executor: &Executor,
    spec: &NetSpec,
    tasks: &[EvalTask],
) -> Result<Vec<EvalResult>> {
    executor.map(
        tasks,
        |t| t.index,
        |t| {
            let (fitness, env_steps) = policy_return(spec, &t.params, t.env, t.seed, t.episodes)?;
            Ok(EvalResult {
                index: t.index,
                fitness,
                env_steps,
            })
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingSample {
    pub worker_count: usize,
    pub population: usize,
    /// Mean wall-clock seconds per generation.
    pub mean_s: f64,
    pub std_s: f64,
    pub samples: usize,
}

/// Settings shared by every cell of a scaling benchmark.
#[derive(Debug, Clone)]
pub struct ScalingSetup {
    pub env: EnvKind,
    pub hidden: Vec<usize>,
    pub sigma: f64,
    pub alpha_es: f64,
    pub episodes_per_offspring: usize,
    pub seed: u64,
    pub warmup_generations: usize,
    pub generations: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Times ES generations for every (worker count, population size) pair.
/// Warm-up generations are run first and excluded from the statistics.
pub fn measure_scaling(
    setup: &ScalingSetup,
    worker_counts: &[usize],
    population_sizes: &[usize],
) -> Result<Vec<TimingSample>> {
    if worker_counts.is_empty() || population_sizes.is_empty() {
        return Err(Error::InvalidArgument(
            "scaling benchmark needs at least one worker count and population size".into(),
        ));
    }
    if setup.generations == 0 {
        return Err(Error::InvalidArgument(
            "scaling benchmark needs generations > 0".into(),
        ));
    }
    let mut out = Vec::new();
    for &population in population_sizes {
        for &workers in worker_counts {
            let executor = Executor::new(workers)?;
            let mut es = PureEs::new(
                setup.env,
                &setup.hidden,
                population,
                setup.sigma,
                setup.alpha_es,
                setup.episodes_per_offspring,
                setup.seed,
            )?;
            for _ in 0..setup.warmup_generations {
                es.step(&executor)?;
            }
            let mut times = Vec::with_capacity(setup.generations);
            for _ in 0..setup.generations {
                let start = Instant::now();
                es.step(&executor)?;
                times.push(start.elapsed().as_secs_f64());
            }
            let (mean_s, std_s) = mean_std(&times);
            log::info!("scaling workers={workers} population={population} mean={mean_s:.4}s std={std_s:.4}s");
            out.push(TimingSample {
                worker_count: workers,
                population,
                mean_s,
                std_s,
                samples: times.len(),
            });
        }
    }
    Ok(out)
}

pub fn write_timing_csv<W: std::io::Write>(samples: &[TimingSample], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for s in samples {
        writer.serialize(s)?;
    }
    writer.flush()?;
    Ok(())
}
