//! Expert episode files and the flattened training samples built from them.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "HPDS"
//! version      u8       1
//! hash_len     u16      length of the config hash string
//! config_hash  hash_len bytes (utf-8)
//! seed         u64
//! dims         u32
//! num_targets  u32
//! num_episodes u32
//! episode records, each:
//!   task_id    u32
//!   targets    num_targets * dims f64
//!   num_steps  u32
//!   positions  (num_steps + 1) * dims f64   agent position before each step, then final
//!   actions    num_steps * dims f64
//!   success    u8
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use super::{observe, Channel, EnvConfig, EnvState, Trajectory};
use crate::action::{quantize_scalar, ActionVector, CoarseToken};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HPDS";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub config_hash: String,
    pub seed: u64,
    pub dims: usize,
    pub num_targets: usize,
    pub episodes: Vec<Trajectory>,
}

impl DatasetFile {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        let hash = self.config_hash.as_bytes();
        let hash_len = u16::try_from(hash.len())
            .map_err(|_| Error::Config("config hash too long".into()))?;
        w.write_all(&hash_len.to_le_bytes())?;
        w.write_all(hash)?;
        w.write_all(&self.seed.to_le_bytes())?;
        write_u32(&mut w, self.dims)?;
        write_u32(&mut w, self.num_targets)?;
        write_u32(&mut w, self.episodes.len())?;
        for ep in &self.episodes {
            let first = ep.states.first().unwrap_or(&ep.final_state);
            write_u32(&mut w, first.task_id)?;
            for t in &first.targets {
                write_f64s(&mut w, t)?;
            }
            write_u32(&mut w, ep.actions.len())?;
            for s in &ep.states {
                write_f64s(&mut w, &s.agent_pos)?;
            }
            write_f64s(&mut w, &ep.final_state.agent_pos)?;
            for a in &ep.actions {
                write_f64s(&mut w, a.as_slice())?;
            }
            w.write_all(&[u8::from(ep.success)])?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse(format!(
                "bad dataset magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u8(&mut r)?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported dataset version {version}")));
        }
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len)?;
        let mut hash = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut hash)?;
        let config_hash =
            String::from_utf8(hash).map_err(|_| Error::Parse("config hash is not utf-8".into()))?;
        let mut seed = [0u8; 8];
        read_exact(&mut r, &mut seed)?;
        let seed = u64::from_le_bytes(seed);
        let dims = read_u32(&mut r)?;
        let num_targets = read_u32(&mut r)?;
        let n = read_u32(&mut r)?;
        let mut episodes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let task_id = read_u32(&mut r)?;
            if task_id >= num_targets {
                return Err(Error::Parse(format!("task_id {task_id} >= {num_targets}")));
            }
            let targets = (0..num_targets)
                .map(|_| read_f64s(&mut r, dims))
                .collect::<Result<Vec<_>>>()?;
            let steps = read_u32(&mut r)?;
            let positions = (0..=steps)
                .map(|_| read_f64s(&mut r, dims))
                .collect::<Result<Vec<_>>>()?;
            let actions = (0..steps)
                .map(|_| read_f64s(&mut r, dims).and_then(ActionVector::new))
                .collect::<Result<Vec<_>>>()?;
            let success = read_u8(&mut r)? != 0;
            let mut states: Vec<EnvState> = positions
                .into_iter()
                .enumerate()
                .map(|(i, agent_pos)| EnvState {
                    agent_pos,
                    targets: targets.clone(),
                    task_id,
                    step_count: i,
                })
                .collect();
            let final_state = states.pop().expect("steps + 1 positions");
            episodes.push(Trajectory {
                states,
                actions,
                final_state,
                success,
            });
        }
        Ok(Self {
            config_hash,
            seed,
            dims,
            num_targets,
            episodes,
        })
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Parse(format!("truncated dataset: {e}")))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            read_exact(r, &mut b)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

/// One row per (episode, timestep): both observation channels and the next
/// `horizon` expert actions. Rows past the episode end are zero actions,
/// i.e. holding position at the goal.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub planner_obs: Array2<f64>,
    pub refiner_obs: Array2<f64>,
    /// `horizon * dims` actions per row, timestep-major.
    pub actions: Array2<f64>,
    pub horizon: usize,
    pub dims: usize,
}

impl SampleSet {
    pub fn from_trajectories(cfg: &EnvConfig, episodes: &[Trajectory], horizon: usize) -> Self {
        let total: usize = episodes.iter().map(Trajectory::len).sum();
        let d = cfg.dims;
        let mut planner_obs = Array2::zeros((total, cfg.planner_obs_dim()));
        let mut refiner_obs = Array2::zeros((total, cfg.refiner_obs_dim()));
        let mut actions = Array2::zeros((total, horizon * d));
        let mut row = 0;
        for ep in episodes {
            for (t, state) in ep.states.iter().enumerate() {
                let p = observe(cfg, state, Channel::Planner);
                let r = observe(cfg, state, Channel::Refiner);
                planner_obs.row_mut(row).assign(&ndarray::aview1(&p));
                refiner_obs.row_mut(row).assign(&ndarray::aview1(&r));
                for (h, a) in ep.actions[t..].iter().take(horizon).enumerate() {
                    for (i, &v) in a.as_slice().iter().enumerate() {
                        actions[[row, h * d + i]] = v;
                    }
                }
                row += 1;
            }
        }
        Self {
            planner_obs,
            refiner_obs,
            actions,
            horizon,
            dims: d,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ground-truth bin indices of sample `i` for `rows` timesteps.
    pub fn tokens(&self, i: usize, rows: usize, num_bins: usize) -> Vec<CoarseToken> {
        self.actions
            .row(i)
            .iter()
            .take(rows * self.dims)
            .map(|&a| quantize_scalar(a, num_bins))
            .collect()
    }

    /// Fine-action targets of sample `i` for the first `rows` timesteps.
    pub fn fine_targets(&self, i: usize, rows: usize) -> Vec<f64> {
        self.actions.row(i).iter().take(rows * self.dims).copied().collect()
    }
}
