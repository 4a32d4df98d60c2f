//! Offline trajectory datasets and their binary file format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CGD1" | u32 version=1 | u32 obs_dim | u32 act_dim | u32 n_traj
//! per trajectory: u32 T | (T+1)·obs_dim f32 states | T·act_dim f32 actions
//! ```
//!
//! Provenance lives in a JSON sidecar next to the binary file.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{step, Expert, MazeSpec, Point};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub const MAGIC: &[u8; 4] = b"CGD1";
pub const VERSION: u32 = 1;
pub const GENERATOR_VERSION: u32 = 2;
const HEADER_BYTES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `(T+1)·obs_dim` values.
    pub states: Vec<f32>,
    /// `T·act_dim` values.
    pub actions: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub maze: String,
    pub noise_sigma: f64,
    pub seed: u64,
    pub generator_version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub provenance: Option<Provenance>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self, act_dim: usize) -> usize {
        self.actions.len() / act_dim
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

impl Dataset {
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len(self.act_dim)).sum()
    }

    pub fn n_states(&self) -> usize {
        self.trajectories.iter().map(|t| t.states.len() / self.obs_dim).sum()
    }

    pub fn traj_len(&self, i: usize) -> usize {
        self.trajectories[i].len(self.act_dim)
    }

    pub fn state(&self, traj: usize, t: usize) -> &[f32] {
        &self.trajectories[traj].states[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action(&self, traj: usize, t: usize) -> &[f32] {
        &self.trajectories[traj].actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    /// Exact size of the binary encoding.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self
                .trajectories
                .iter()
                .map(|t| 4 + 4 * (t.states.len() + t.actions.len()))
                .sum::<usize>()
    }

    /// Percentage of free cells holding at least one dataset state.
    pub fn coverage(&self, spec: &MazeSpec) -> f64 {
        let mut seen = vec![false; spec.n_cells()];
        for t in &self.trajectories {
            for s in t.states.chunks(self.obs_dim) {
                if let Some(c) = spec.cell_of([s[0] as f64, s[1] as f64]) {
                    seen[spec.cell_index(c)] = true;
                }
            }
        }
        let free = spec.free_cells();
        let hit = free.iter().filter(|&&c| seen[spec.cell_index(c)]).count();
        100.0 * hit as f64 / free.len().max(1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.obs_dim as u32,
            self.act_dim as u32,
            self.trajectories.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.trajectories {
            out.extend_from_slice(&(t.len(self.act_dim) as u32).to_le_bytes());
            for x in t.states.iter().chain(&t.actions) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected \"CGD1\""),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let obs_dim = r.u32("obs_dim")? as usize;
        let act_dim = r.u32("act_dim")? as usize;
        let n_traj = r.u32("n_traj")? as usize;
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Format {
                offset: 8,
                msg: "obs_dim and act_dim must be positive".into(),
            });
        }
        let mut trajectories = Vec::with_capacity(n_traj.min(1 << 16));
        for i in 0..n_traj {
            let t = r.u32("trajectory length")? as usize;
            let states = r.f32s((t + 1) * obs_dim, &format!("trajectory {i} states"))?;
            let actions = r.f32s(t * act_dim, &format!("trajectory {i} actions"))?;
            trajectories.push(Trajectory { states, actions });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Dataset {
            obs_dim,
            act_dim,
            trajectories,
            provenance: None,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))?;
    if let Some(p) = &ds.provenance {
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(p)?;
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = Dataset::from_bytes(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        ds.provenance = Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", side.display())))?,
        );
    }
    Ok(ds)
}

/// Round to f32 without leaving free space.
fn store(spec: &MazeSpec, exact: Point) -> [f32; 2] {
    let mut p = [exact[0] as f32, exact[1] as f32];
    for axis in 0..2 {
        let probe = |p: [f32; 2]| spec.is_wall_at([p[0] as f64, p[1] as f64]);
        if probe(p) {
            p[axis] = if (p[axis] as f64) > exact[axis] {
                p[axis].next_down()
            } else {
                p[axis].next_up()
            };
        }
    }
    p
}

/// Scripted-expert play data: random free start, random free waypoints,
/// re-goaling on arrival, exactly `max_episode_steps` steps per trajectory.
pub fn generate_dataset(
    spec: &MazeSpec,
    n_traj: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::Config("n_traj must be at least 1".into()));
    }
    if noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(Error::Config(format!("noise_sigma {noise_sigma} must be ≥ 0")));
    }
    let free = spec.free_cells();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let b = spec.action_bound;
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut rng = substream(seed, Stream::Data, i as u64);
        let mut expert = Expert::new(spec);
        // uniform over most of a random free cell, so the data also covers
        // the ends of dead ends rather than only cell centres
        let j = 0.4 * spec.cell_size;
        let free_point = |rng: &mut rand_pcg::Pcg64| -> Point {
            let c = spec.cell_centre(free[rng.random_range(0..free.len())]);
            [c[0] + rng.random_range(-j..j), c[1] + rng.random_range(-j..j)]
        };
        let start = store(spec, free_point(&mut rng));
        let mut s: Point = [start[0] as f64, start[1] as f64];
        let mut waypoint = free_point(&mut rng);

        let steps = spec.max_episode_steps;
        let mut states = Vec::with_capacity((steps + 1) * 2);
        let mut actions = Vec::with_capacity(steps * 2);
        states.extend_from_slice(&start);
        for _ in 0..steps {
            if expert.reached(s, waypoint) {
                waypoint = free_point(&mut rng);
            }
            let goal_cell = spec.cell_of(waypoint).unwrap();
            let sc = spec.cell_of(s).unwrap();
            if super::shortest_path_lengths(spec, goal_cell)[spec.cell_index(sc)].is_none() {
                return Err(Error::Data(format!(
                    "waypoint {waypoint:?} unreachable from {s:?} in maze '{}'",
                    spec.name
                )));
            }
            let a = expert.action(s, waypoint);
            let a = [
                ((a[0] + noise.sample(&mut rng)).clamp(-b, b)) as f32,
                ((a[1] + noise.sample(&mut rng)).clamp(-b, b)) as f32,
            ];
            let out = step(spec, s, [a[0] as f64, a[1] as f64], waypoint)?;
            let next = store(spec, out.state);
            actions.extend_from_slice(&a);
            states.extend_from_slice(&next);
            s = [next[0] as f64, next[1] as f64];
        }
        trajectories.push(Trajectory { states, actions });
    }
    Ok(Dataset {
        obs_dim: 2,
        act_dim: 2,
        trajectories,
        provenance: Some(Provenance {
            maze: spec.name.clone(),
            noise_sigma,
            seed,
            generator_version: GENERATOR_VERSION,
        }),
    })
}
