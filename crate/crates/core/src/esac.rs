//! The combined generation loop: population evaluation, soft winner
//! selection, ES update, a gated SAC phase with mutation tuning, hindsight
//! crossovers and formation of the next population.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::amt::{amt_update, MutationState};
use crate::envs::EnvKind;
use crate::error::{check_dim, Error, Result};
use crate::es_core::{evaluate_population, FitnessTable, MemberOrigin, Population};
use crate::nnet::{NetSpec, ParamVector};
use crate::parallel::Executor;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sac_core::{q_spec, value_spec, SacAgent, SacConfig, SacNetworks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsacConfig {
    pub population: usize,
    pub winner_fraction: f64,
    pub sigma: f64,
    pub alpha_es: f64,
    pub zeta: f64,
    pub gradient_interval: u64,
    pub p_sac_initial: f64,
    pub p_sac_decay: f64,
    pub sac_episodes_per_phase: usize,
    pub crossover_swap_prob: f64,
    pub episodes_per_offspring: usize,
    pub hidden: Vec<usize>,
    pub sac: SacConfig,
}

impl Default for EsacConfig {
    fn default() -> Self {
        EsacConfig {
            population: 50,
            winner_fraction: 0.4,
            sigma: 5e-3,
            alpha_es: 5e-3,
            zeta: 5e-3,
            gradient_interval: 10,
            p_sac_initial: 1.0,
            p_sac_decay: 0.8,
            sac_episodes_per_phase: 5,
            crossover_swap_prob: 0.5,
            episodes_per_offspring: 1,
            hidden: vec![64, 64],
            sac: SacConfig::default(),
        }
    }
}

impl EsacConfig {
    pub fn winners(&self) -> usize {
        (self.population as f64 * self.winner_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::config("es.population", "must be at least 2"));
        }
        if !(self.winner_fraction > 0.0 && self.winner_fraction <= 1.0) {
            return Err(Error::config("es.winner_fraction", "must lie in (0, 1]"));
        }
        if self.winners() < 1 {
            return Err(Error::config(
                "es.winner_fraction",
                "population * winner_fraction must be at least 1",
            ));
        }
        if self.crossover_swap_prob > 0.0 && self.winners() + 1 > self.population {
            return Err(Error::config(
                "es.winner_fraction",
                "winners plus the SAC member must fit in the population",
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("es.sigma", "must be positive and finite"));
        }
        if !(self.alpha_es > 0.0 && self.alpha_es.is_finite()) {
            return Err(Error::config("es.alpha", "must be positive and finite"));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::config("amt.zeta", "must be finite and >= 0"));
        }
        if self.gradient_interval == 0 {
            return Err(Error::config(
                "esac.gradient_interval",
                "must be at least 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.p_sac_initial) {
            return Err(Error::config("esac.p_sac_initial", "must lie in [0, 1]"));
        }
        if !(self.p_sac_decay > 0.0 && self.p_sac_decay < 1.0) {
            return Err(Error::config("esac.p_sac_decay", "must lie in (0, 1)"));
        }
        if self.sac_episodes_per_phase == 0 {
            return Err(Error::config(
                "esac.sac_episodes_per_phase",
                "must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.crossover_swap_prob) {
            return Err(Error::config(
                "esac.crossover_swap_prob",
                "must lie in [0, 1]",
            ));
        }
        if self.episodes_per_offspring == 0 {
            return Err(Error::config(
                "es.episodes_per_offspring",
                "must be positive",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config(
                "network.hidden",
                "layer sizes must be positive",
            ));
        }
        self.sac.validate()
    }
}

/// Top members of a generation, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct WinnerSet {
    pub indices: Vec<usize>,
    /// The evaluated (perturbed) parameter vectors.
    pub params: Vec<ParamVector>,
    pub raw_returns: Vec<f64>,
}

impl WinnerSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        self.raw_returns.iter().sum::<f64>() / self.raw_returns.len() as f64
    }
}

/// The best `floor(n * e)` members by raw return, ties by index.
pub fn select_winners(
    table: &FitnessTable,
    pop: &Population,
    sigma: f64,
    winner_fraction: f64,
) -> Result<WinnerSet> {
    check_dim("winner selection", pop.len(), table.raw.len())?;
    let w = (pop.len() as f64 * winner_fraction).floor() as usize;
    if w < 1 || w > pop.len() {
        return Err(Error::config(
            "es.winner_fraction",
            format!("selects {w} winners from a population of {}", pop.len()),
        ));
    }
    let indices: Vec<usize> = table.order[..w].to_vec();
    Ok(WinnerSet {
        params: indices.iter().map(|&i| pop.params(i, sigma)).collect(),
        raw_returns: indices.iter().map(|&i| table.raw[i]).collect(),
        indices,
    })
}

/// True on generations divisible by `g` when a uniform draw falls below `p_sac`.
pub fn should_run_sac<R: Rng + ?Sized>(generation: u64, g: u64, p_sac: f64, rng: &mut R) -> bool {
    if g == 0 || generation % g != 0 {
        return false;
    }
    rng.random::<f64>() < p_sac
}

pub fn anneal_p_sac(p_sac_initial: f64, decay: f64, completed_phases: u64) -> f64 {
    p_sac_initial * decay.powi(completed_phases.min(i32::MAX as u64) as i32)
}

/// Element-wise: the winner's value with probability `swap_prob`, otherwise `theta_es`.
pub fn hindsight_crossover<R: Rng + ?Sized>(
    winner: &ParamVector,
    theta_es: &ParamVector,
    swap_prob: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    check_dim("crossover", theta_es.len(), winner.len())?;
    if !(0.0..=1.0).contains(&swap_prob) {
        return Err(Error::InvalidArgument(format!(
            "swap probability {swap_prob} outside [0, 1]"
        )));
    }
    let values = winner
        .as_slice()
        .iter()
        .zip(theta_es.as_slice())
        .map(|(&w, &t)| {
            if rng.random::<f64>() < swap_prob {
                w
            } else {
                t
            }
        })
        .collect();
    theta_es.with_values(values)
}

/// Fixed candidates for the next generation: the SAC policy (once it has been
/// trained) followed by the crossed-over winners.
pub fn form_population(
    theta_sac: Option<&ParamVector>,
    crossed_winners: Vec<ParamVector>,
    population: usize,
) -> Result<Vec<(ParamVector, MemberOrigin)>> {
    let mut injected = Vec::with_capacity(crossed_winners.len() + 1);
    if let Some(theta) = theta_sac {
        injected.push((theta.clone(), MemberOrigin::Sac));
    }
    injected.extend(
        crossed_winners
            .into_iter()
            .map(|p| (p, MemberOrigin::Crossover)),
    );
    if injected.len() > population {
        return Err(Error::config(
            "es.winner_fraction",
            format!(
                "{} injected members exceed population {population}",
                injected.len()
            ),
        ));
    }
    Ok(injected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    pub best: f64,
    pub mean: f64,
    pub std: f64,
    pub winner_mean: f64,
    /// Scale after this generation's tuning step.
    pub sigma: f64,
    /// Gate probability used this generation.
    pub p_sac: f64,
    pub sac_phase_ran: bool,
    pub gradient_updates: u64,
    pub total_gradient_updates: u64,
    pub duration_s: f64,
    pub env_steps: u64,
    /// Fitness of the injected SAC member, when present.
    pub sac_member_fitness: Option<f64>,
}

/// Full learner state between generations.
#[derive(Debug, Clone)]
pub struct EsacState {
    pub config: EsacConfig,
    pub env: EnvKind,
    pub seed: u64,
    pub spec: NetSpec,
    pub theta_es: ParamVector,
    pub agent: SacAgent,
    pub mutation: MutationState,
    /// Completed generations.
    pub generation: u64,
    pub p_sac: f64,
    pub sac_phases: u64,
    pub env_steps: u64,
    pub winners: Option<WinnerSet>,
    injected: Vec<(ParamVector, MemberOrigin)>,
}

impl EsacState {
    pub fn new(config: EsacConfig, env: EnvKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let (obs_dim, act_dim) = (env.observation_dim(), env.action_dim());
        let spec = crate::sac_core::policy_spec(obs_dim, act_dim, &config.hidden)?;
        let theta_es = spec.init_params(&mut stream_rng(seed, Stream::Init, 0, 0));
        let nets = SacNetworks::new(
            obs_dim,
            act_dim,
            &config.hidden,
            &mut stream_rng(seed, Stream::Init, 1, 0),
        )?;
        let agent = SacAgent::new(nets, config.sac.clone())?;
        let mutation = MutationState::new(
            config.sigma,
            config.zeta,
            config.alpha_es,
            config.population,
        )?;
        Ok(EsacState {
            p_sac: config.p_sac_initial,
            config,
            env,
            seed,
            spec,
            theta_es,
            agent,
            mutation,
            generation: 0,
            sac_phases: 0,
            env_steps: 0,
            winners: None,
            injected: Vec::new(),
        })
    }

    /// Candidates for validation: the ES parameters and the latest best winner.
    pub fn validation_candidates(&self) -> Vec<&ParamVector> {
        let mut out = vec![&self.theta_es];
        if let Some(w) = &self.winners {
            out.push(&w.params[0]);
        }
        out
    }

    /// One full generation; advances `self.generation` by one.
    pub fn run_generation(&mut self, executor: &Executor) -> Result<GenerationRecord> {
        let start = Instant::now();
        let generation = self.generation + 1;
        let cfg = self.config.clone();
        let sigma = self.mutation.sigma;

        let injected = std::mem::take(&mut self.injected);
        let sac_member = injected.iter().position(|(_, o)| *o == MemberOrigin::Sac);
        let pop = Population::with_injected(
            self.theta_es.clone(),
            injected,
            self.seed,
            generation,
            cfg.population,
        )?;
        let results = evaluate_population(
            executor,
            &self.spec,
            &pop,
            sigma,
            self.env,
            cfg.episodes_per_offspring,
            self.seed,
            generation,
        )?;
        self.env_steps += results.iter().map(|r| r.env_steps as u64).sum::<u64>();
        let table = FitnessTable::new(results.iter().map(|r| r.fitness).collect())?;
        let winners = select_winners(&table, &pop, sigma, cfg.winner_fraction)?;
        self.theta_es = pop.es_update(&table, cfg.alpha_es, sigma)?;

        let p_sac = self.p_sac;
        let mut gate = stream_rng(self.seed, Stream::SacGate, generation, 0);
        let run_sac = should_run_sac(generation, cfg.gradient_interval, p_sac, &mut gate);
        let updates_before = self.agent.update_count();
        if run_sac {
            self.sac_phase(generation)?;
            amt_update(&mut self.mutation, table.best(), table.mean());
            self.sac_phases += 1;
            self.p_sac = anneal_p_sac(cfg.p_sac_initial, cfg.p_sac_decay, self.sac_phases);
        }
        let gradient_updates = self.agent.update_count() - updates_before;

        let crossed = if cfg.crossover_swap_prob > 0.0 {
            winners
                .params
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let mut rng = stream_rng(self.seed, Stream::Crossover, generation, k as u64);
                    hindsight_crossover(w, &self.theta_es, cfg.crossover_swap_prob, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let trained = (self.agent.update_count() > 0).then_some(&self.agent.nets.theta);
        self.injected = form_population(trained, crossed, cfg.population)?;

        let record = GenerationRecord {
            generation,
            best: table.best(),
            mean: table.mean(),
            std: table.std(),
            winner_mean: winners.mean_return(),
            sigma: self.mutation.sigma,
            p_sac,
            sac_phase_ran: run_sac,
            gradient_updates,
            total_gradient_updates: self.agent.update_count(),
            duration_s: start.elapsed().as_secs_f64(),
            env_steps: self.env_steps,
            sac_member_fitness: sac_member.map(|i| table.raw[i]),
        };
        self.winners = Some(winners);
        self.generation = generation;
        Ok(record)
    }

    /// Stochastic-policy episodes into the replay buffer, then one gradient
    /// step per collected environment step.
    fn sac_phase(&mut self, generation: u64) -> Result<()> {
        let mut rng = stream_rng(self.seed, Stream::SacPhase, generation, 0);
        let mut env = self.env.make();
        let mut steps = 0usize;
        for ep in 0..self.config.sac_episodes_per_phase {
            let seed = derive_seed(self.seed, Stream::SacPhase, generation, ep as u64 + 1);
            steps += self
                .agent
                .collect_episode(env.as_mut(), seed, &mut rng)?
                .length;
        }
        self.env_steps += steps as u64;
        for _ in 0..steps {
            let m = self.agent.sac_update_step(&mut rng)?;
            if m.skipped {
                log::warn!(
                    "generation {generation}: replay buffer holds {} < batch {}; update skipped",
                    self.agent.buffer().len(),
                    self.agent.config.batch_size
                );
                break;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let n = &self.agent.nets;
        Checkpoint {
            header: CheckpointHeader {
                env: self.env,
                seed: self.seed,
                generation: self.generation,
                p_sac: self.p_sac,
                sac_phases: self.sac_phases,
                env_steps: self.env_steps,
                gradient_updates: self.agent.update_count(),
                mutation: self.mutation.clone(),
                hidden: self.config.hidden.clone(),
            },
            theta_es: self.theta_es.clone(),
            theta: n.theta.clone(),
            psi: n.psi.clone(),
            psi_target: n.psi_target.clone(),
            phi1: n.phi1.clone(),
            phi2: n.phi2.clone(),
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ESACCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub env: EnvKind,
    pub seed: u64,
    pub generation: u64,
    pub p_sac: f64,
    pub sac_phases: u64,
    pub env_steps: u64,
    pub gradient_updates: u64,
    pub mutation: MutationState,
    pub hidden: Vec<usize>,
}

/// Network parameters and loop counters. Random streams are derived from
/// `(seed, generation)`, so those two fields fix every future draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub theta_es: ParamVector,
    pub theta: ParamVector,
    pub psi: ParamVector,
    pub psi_target: ParamVector,
    pub phi1: ParamVector,
    pub phi2: ParamVector,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for p in [
            &self.theta_es,
            &self.theta,
            &self.psi,
            &self.psi_target,
            &self.phi1,
            &self.phi2,
        ] {
            p.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 26 {
            return Err(Error::Checkpoint("header too large".into()));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let (obs, act) = (header.env.observation_dim(), header.env.action_dim());
        let pspec = crate::sac_core::policy_spec(obs, act, &header.hidden)?;
        let qspec = q_spec(obs, act, &header.hidden)?;
        let vspec = value_spec(obs, &header.hidden)?;
        Ok(Checkpoint {
            theta_es: ParamVector::read_from(r, &pspec)?,
            theta: ParamVector::read_from(r, &pspec)?,
            psi: ParamVector::read_from(r, &vspec)?,
            psi_target: ParamVector::read_from(r, &vspec)?,
            phi1: ParamVector::read_from(r, &qspec)?,
            phi2: ParamVector::read_from(r, &qspec)?,
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read_from(&mut BufReader::new(File::open(path)?))
    }
}
