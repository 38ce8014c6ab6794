//! Intent-buffer execution: the planner refills a FIFO of coarse rows when it
//! runs dry, and the refiner consumes `H_chunk` rows per control chunk. Time
//! is simulated with fixed per-invocation costs.

use std::collections::VecDeque;
use std::io::Write;

use crate::action::{ActionVector, CoarseChunk, CoarseToken};
use crate::env::{self, Channel, EnvConfig, EnvState};
use crate::error::{config_err, Error, Result};
use crate::planner::{sample_coarse, PlannerModel, SampleMode};
use crate::refiner::RefinerModel;
use crate::rng::RngState;

/// FIFO of coarse token rows with a fixed capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentBuffer {
    rows: VecDeque<Vec<CoarseToken>>,
    capacity: usize,
    dims: usize,
}

impl IntentBuffer {
    pub fn new(capacity: usize, dims: usize) -> Self {
        Self {
            rows: VecDeque::with_capacity(capacity),
            capacity,
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    /// Push a freshly planned chunk. Only legal on an empty buffer.
    pub fn refill(&mut self, plan: &CoarseChunk) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::Protocol(format!(
                "refill requested with {} rows still buffered",
                self.len()
            )));
        }
        if plan.rows() > self.capacity || plan.dims() != self.dims {
            return Err(Error::Protocol(format!(
                "plan of {}x{} does not fit a {}x{} buffer",
                plan.rows(),
                plan.dims(),
                self.capacity,
                self.dims
            )));
        }
        self.rows.extend((0..plan.rows()).map(|t| plan.row(t).to_vec()));
        Ok(())
    }

    /// Remove and return the `h` oldest rows.
    pub fn pop_slice(&mut self, h: usize) -> Result<CoarseChunk> {
        if h > self.len() {
            return Err(Error::Protocol(format!(
                "pop of {h} rows from a buffer holding {}",
                self.len()
            )));
        }
        let rows: Vec<_> = self.rows.drain(..h).collect();
        CoarseChunk::new(h, self.dims, rows.concat())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HorizonConfig {
    pub m: usize,
    pub h_chunk: usize,
}

impl HorizonConfig {
    pub fn new(m: usize, h_chunk: usize) -> Result<Self> {
        if m == 0 || h_chunk == 0 {
            return Err(config_err("horizon factor and chunk length must be positive"));
        }
        Ok(Self { m, h_chunk })
    }

    pub fn l_macro(&self) -> usize {
        self.m * self.h_chunk
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockModel {
    pub c_refine: f64,
    pub c_plan: f64,
}

impl ClockModel {
    pub fn new(c_refine: f64, c_plan: f64) -> Result<Self> {
        if !(c_refine >= 0.0 && c_plan >= 0.0) {
            return Err(config_err("clock costs must be non-negative"));
        }
        Ok(Self { c_refine, c_plan })
    }

    /// Solve `c_refine + c_plan / m` through two measured points.
    pub fn fit(m1: usize, lat1: f64, m2: usize, lat2: f64) -> Result<Self> {
        if m1 == 0 || m2 == 0 || m1 == m2 {
            return Err(config_err("fit needs two distinct positive horizon factors"));
        }
        let (x1, x2) = (1.0 / m1 as f64, 1.0 / m2 as f64);
        let c_plan = (lat1 - lat2) / (x1 - x2);
        Self::new(lat1 - c_plan * x1, c_plan)
    }
}

impl Default for ClockModel {
    fn default() -> Self {
        Self {
            c_refine: 92.0,
            c_plan: 60.0,
        }
    }
}

pub fn amortized_latency(clock: &ClockModel, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(config_err("horizon factor must be >= 1"));
    }
    Ok(clock.c_refine + clock.c_plan / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Fresh plan before every chunk.
    Sync,
    /// Plan only when the buffer is empty.
    #[default]
    Async,
}

/// What drives the episode.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Hierarchical {
        planner: &'a PlannerModel,
        refiner: &'a RefinerModel,
        plan_mode: SampleMode,
    },
    /// Observation-only refiner over both observation channels.
    Monolithic { refiner: &'a RefinerModel },
    /// Scripted expert executed in chunks; never plans.
    Expert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecord {
    pub chunk: usize,
    pub planned: bool,
    /// Simulated clock after the chunk finished.
    pub clock_ms: f64,
    /// Coarse rows consumed, timestep-major; empty without a planner.
    pub tokens: Vec<CoarseToken>,
    /// Fine actions actually executed (may be cut short at episode end).
    pub actions: Vec<f64>,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub records: Vec<ChunkRecord>,
    /// Every plan pushed into the buffer, in order.
    pub plans: Vec<CoarseChunk>,
    pub success: bool,
    pub steps: usize,
}

impl ExecutionTrace {
    pub fn planner_calls(&self) -> usize {
        self.records.iter().filter(|r| r.planned).count()
    }

    pub fn total_ms(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.clock_ms)
    }
}

pub const TRACE_HEADER: &str = "chunk,planned,clock_ms,tokens,success";

pub fn write_trace<W: Write>(mut w: W, trace: &ExecutionTrace) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in &trace.records {
        let toks: Vec<String> = r.tokens.iter().map(|t| t.0.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            r.chunk,
            u8::from(r.planned),
            r.clock_ms,
            toks.join(" "),
            u8::from(r.success)
        )?;
    }
    Ok(())
}

/// Parse `(chunk, planned, clock_ms)` triples from a trace file.
pub fn read_trace_clock(text: &str) -> Result<Vec<(usize, bool, f64)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    if lines.next().map(str::trim) != Some(TRACE_HEADER) {
        return Err(Error::Parse("trace file lacks the expected header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("bad trace row `{l}`")));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("`{l}`: {e}"));
            Ok((
                f[0].parse().map_err(|e| bad(&e))?,
                f[1] == "1",
                f[2].parse().map_err(|e| bad(&e))?,
            ))
        })
        .collect()
}

/// Simulated milliseconds per chunk.
pub fn measure_latency(trace: &ExecutionTrace) -> Result<f64> {
    if trace.records.is_empty() {
        return Err(config_err("cannot measure latency of an empty trace"));
    }
    Ok(trace.total_ms() / trace.records.len() as f64)
}

/// Clock-only trace of `chunks` chunks where the planner runs before every
/// `m`-th chunk, starting with the first.
pub fn clock_trace(clock: &ClockModel, m: usize, chunks: usize) -> Result<ExecutionTrace> {
    if m == 0 {
        return Err(config_err("horizon factor must be positive"));
    }
    let mut ms = 0.0;
    let records = (0..chunks)
        .map(|chunk| {
            let planned = chunk % m == 0;
            if planned {
                ms += clock.c_plan;
            }
            ms += clock.c_refine;
            ChunkRecord {
                chunk,
                planned,
                clock_ms: ms,
                tokens: Vec::new(),
                actions: Vec::new(),
                success: false,
            }
        })
        .collect();
    Ok(ExecutionTrace {
        records,
        plans: Vec::new(),
        success: false,
        steps: 0,
    })
}

/// Everything needed to roll out one episode.
#[derive(Clone, Copy)]
pub struct EpisodeSpec<'a> {
    pub env: &'a EnvConfig,
    pub horizon: HorizonConfig,
    pub mode: ExecMode,
    pub clock: ClockModel,
    pub episode_seed: u64,
    pub task_id: usize,
}

fn plan(planner: &PlannerModel, state: &EnvState, env: &EnvConfig, rows: usize, mode: SampleMode, rng: &mut RngState) -> Result<CoarseChunk> {
    if rows > planner.cfg.l_macro {
        return Err(config_err(format!(
            "horizon of {rows} rows exceeds the planner's trained {}",
            planner.cfg.l_macro
        )));
    }
    let logits = planner.plan_forward(&env::observe(env, state, Channel::Planner))?;
    sample_coarse(&logits, rows, mode, rng)
}

fn monolithic_obs(env: &EnvConfig, state: &EnvState) -> Vec<f64> {
    let mut obs = env::observe(env, state, Channel::Planner);
    obs.extend(env::observe(env, state, Channel::Refiner));
    obs
}

/// Roll out one episode chunk by chunk. Buffered rows left when the episode
/// ends are discarded.
pub fn run_episode(spec: &EpisodeSpec, policy: Policy, rng: &mut RngState) -> Result<ExecutionTrace> {
    let env_cfg = spec.env;
    let h = spec.horizon.h_chunk;
    let d = env_cfg.dims;
    if let Policy::Hierarchical { refiner, planner, .. } = policy {
        if refiner.cfg.h_chunk != h || planner.cfg.dims != d {
            return Err(config_err("model shapes do not match the execution horizon"));
        }
    }
    if let Policy::Monolithic { refiner } = policy {
        if refiner.cfg.h_chunk != h {
            return Err(config_err("model chunk length does not match the execution horizon"));
        }
    }
    let rows_per_plan = match spec.mode {
        ExecMode::Sync => h,
        ExecMode::Async => spec.horizon.l_macro(),
    };
    let mut state = env::reset(env_cfg, spec.episode_seed, spec.task_id)?;
    let mut expert_rng = RngState::new(crate::rng::mix_seed(spec.episode_seed, 0xE4_9E27));
    let mut buffer = IntentBuffer::new(rows_per_plan, d);
    let mut trace = ExecutionTrace {
        records: Vec::new(),
        plans: Vec::new(),
        success: false,
        steps: 0,
    };
    let mut clock = 0.0;
    for chunk in 0.. {
        let mut planned = false;
        let (tokens, fine) = match policy {
            Policy::Hierarchical {
                planner,
                refiner,
                plan_mode,
            } => {
                if buffer.is_empty() {
                    let p = plan(planner, &state, env_cfg, rows_per_plan, plan_mode, rng)?;
                    buffer.refill(&p)?;
                    trace.plans.push(p);
                    planned = true;
                }
                let slice = buffer.pop_slice(h)?;
                let obs = env::observe(env_cfg, &state, Channel::Refiner);
                let fine = refiner.denoise_sample(&obs, Some(slice.tokens()), rng)?;
                (slice.tokens().to_vec(), refiner.compose_chunk(slice.tokens(), &fine)?)
            }
            Policy::Monolithic { refiner } => {
                let fine = refiner.denoise_sample(&monolithic_obs(env_cfg, &state), None, rng)?;
                (Vec::new(), fine)
            }
            Policy::Expert => (Vec::new(), Vec::new()),
        };
        if planned {
            clock += spec.clock.c_plan;
        }
        clock += spec.clock.c_refine;
        let mut executed = Vec::with_capacity(h * d);
        let mut done = false;
        for t in 0..h {
            let action = match policy {
                Policy::Expert => env::expert_action(env_cfg, &state, &mut expert_rng),
                _ => ActionVector::clipped(fine[t * d..(t + 1) * d].to_vec()),
            };
            executed.extend_from_slice(action.as_slice());
            let out = env::step(env_cfg, &state, &action);
            state = out.state;
            trace.steps += 1;
            if out.done {
                trace.success = out.success;
                done = true;
                break;
            }
        }
        trace.records.push(ChunkRecord {
            chunk,
            planned,
            clock_ms: clock,
            tokens,
            actions: executed,
            success: trace.success,
        });
        if done {
            break;
        }
    }
    Ok(trace)
}

/// Success counts with a normal-approximation binomial interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessRate {
    pub successes: usize,
    pub episodes: usize,
}

impl SuccessRate {
    pub fn rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    /// Half-width of the 95% interval.
    pub fn half_width(&self) -> f64 {
        if self.episodes == 0 {
            return 1.0;
        }
        let p = self.rate();
        1.96 * (p * (1.0 - p) / self.episodes as f64).sqrt()
    }

    pub fn interval(&self) -> (f64, f64) {
        let (p, hw) = (self.rate(), self.half_width());
        ((p - hw).max(0.0), (p + hw).min(1.0))
    }
}

/// Episode `e` uses seed `base_seed + e` and task `e mod G`.
pub fn evaluate(
    env_cfg: &EnvConfig,
    policy: Policy,
    horizon: HorizonConfig,
    mode: ExecMode,
    clock: ClockModel,
    base_seed: u64,
    episodes: usize,
    mut on_episode: impl FnMut(usize, &ExecutionTrace) -> Result<()>,
) -> Result<SuccessRate> {
    let mut successes = 0;
    for e in 0..episodes {
        let spec = EpisodeSpec {
            env: env_cfg,
            horizon,
            mode,
            clock,
            episode_seed: base_seed.wrapping_add(e as u64),
            task_id: e % env_cfg.num_targets,
        };
        let mut rng = RngState::new(crate::rng::mix_seed(spec.episode_seed, 0x5A_3B1E));
        let trace = run_episode(&spec, policy, &mut rng)?;
        successes += usize::from(trace.success);
        on_episode(e, &trace)?;
    }
    Ok(SuccessRate { successes, episodes })
}
