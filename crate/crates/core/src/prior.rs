//! Frozen surrogate policy standing in for a pretrained VLA backbone.
//!
//! The [`Prior`] trait is the integration surface the search consumes: a
//! latent readout for the value head, a proposed centre chunk, and a set of
//! candidate chunks with their ψ weights. [`SurrogatePrior`] implements it
//! with a fixed random projection for the readout and a one-chunk greedy
//! lookahead for proposals, corrupted toward the task's decoy region with
//! probability `epsilon`.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::chunks::{ChunkDistribution, ChunkLibrary};
use crate::envsim::{Family, GridSize, Observation, Pos, TaskSpec, World};
use crate::rng::stream;
use crate::{Error, Result};

pub const DEFAULT_LATENT_DIM: usize = 32;
const MAX_OBJECTS: usize = 2;
const TASK_ID_BITS: usize = 5;
/// gripper(2) + objects(2·2) + goal centre(2) + gripper→target(2)
/// + target→goal(2) + target→decoy(2) + held flags(2) + family one-hot(2)
/// + task-id bits.
pub const RAW_FEATURE_DIM: usize = 2 + 2 * MAX_OBJECTS + 2 + 2 + 2 + 2 + 2 + 2 + TASK_ID_BITS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentReadout(pub Vec<f64>);

impl LatentReadout {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorParams {
    /// Probability that a proposal heads for the decoy region.
    pub epsilon: f64,
    /// Temperature of the β / ψ softmax over chunk distances.
    pub tau: f64,
    /// Readout dimension.
    pub d: usize,
    /// Seed of the fixed readout projection.
    pub seed: u64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            tau: 1.0,
            d: DEFAULT_LATENT_DIM,
            seed: 0,
        }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.d == 0 {
            return Err(Error::config("readout dimension d must be positive"));
        }
        Ok(())
    }
}

/// Candidate chunks drawn for one expansion. `psi.support == chunks`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub center: usize,
    pub chunks: Vec<usize>,
    pub psi: ChunkDistribution,
}

/// What a policy prior must provide to the data pipeline and the search.
pub trait Prior: Send + Sync {
    fn library(&self) -> &ChunkLibrary;

    fn latent_dim(&self) -> usize;

    /// Summary vector of `(obs, task)`. Must be a pure function.
    fn readout(&self, obs: &Observation, task: &TaskSpec) -> LatentReadout;

    /// Library index of the chunk the policy would execute.
    fn propose_center(&self, obs: &Observation, task: &TaskSpec, rng: &mut dyn RngCore) -> usize;

    /// Draws `k` distinct library chunks without replacement from β centred
    /// on a fresh proposal, in draw order, with ψ over the drawn set.
    fn sample_candidates(
        &self,
        obs: &Observation,
        task: &TaskSpec,
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Candidates>;
}

/// Sequential weighted sampling without replacement.
pub fn sample_without_replacement(weights: &[f64], k: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k.min(weights.len()) {
        let total: f64 = remaining.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut choice = None;
        for (i, &w) in remaining.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            choice = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        // Rounding can leave `u` past the last positive weight; `choice` then
        // holds that last entry.
        let i = choice.expect("at least one positive weight remains");
        picked.push(i);
        remaining[i] = 0.0;
    }
    picked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Subgoal {
    Task,
    Decoy,
}

#[derive(Debug, Clone)]
pub struct SurrogatePrior {
    params: PriorParams,
    library: Arc<ChunkLibrary>,
    /// Row-major `d × RAW_FEATURE_DIM`.
    projection: Vec<f64>,
}

impl SurrogatePrior {
    pub fn new(params: PriorParams, library: Arc<ChunkLibrary>) -> Result<Self> {
        params.validate()?;
        // Reseed until the projection separates gripper displacements, so the
        // readout stays injective in the gripper position.
        let mut attempt = 0u64;
        loop {
            let projection = random_projection(params.d, params.seed, attempt);
            if separates_gripper(&projection, params.d) {
                return Ok(Self {
                    params,
                    library,
                    projection,
                });
            }
            attempt += 1;
        }
    }

    pub fn params(&self) -> &PriorParams {
        &self.params
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let params = PriorParams { epsilon, ..self.params };
        params.validate()?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn shared_library(&self) -> Arc<ChunkLibrary> {
        Arc::clone(&self.library)
    }

    /// Library chunk whose one-chunk lookahead most reduces the distance to
    /// the subgoal; ties go to the lowest index.
    fn greedy_chunk(&self, world: &World, task: &TaskSpec, subgoal: Subgoal) -> usize {
        let mut best = (i32::MAX, 0);
        for (i, chunk) in self.library.chunks().iter().enumerate() {
            let mut w = world.clone();
            for &a in chunk.actions() {
                w.apply(a);
                if subgoal == Subgoal::Task && w.task_solved(task) {
                    break;
                }
            }
            let phi = potential(&w, task, subgoal);
            if phi < best.0 {
                best = (phi, i);
            }
        }
        best.1
    }
}

/// Remaining low-level work toward the subgoal, assuming free motion.
fn potential(w: &World, task: &TaskSpec, subgoal: Subgoal) -> i32 {
    match subgoal {
        Subgoal::Task => {
            if w.task_solved(task) {
                return 0;
            }
            let t = task.target_object;
            let target = w.objects[t];
            let carry = task.goal_region.distance(target) + 1;
            match w.held {
                Some(h) if h == t => carry,
                Some(_) => 1 + w.gripper.manhattan(target) + 1 + carry,
                None => w.gripper.manhattan(target) + 1 + carry,
            }
        }
        Subgoal::Decoy => {
            let d = task.decoy_region.distance(w.gripper);
            if w.held.is_some() {
                d + 1
            } else {
                d
            }
        }
    }
}

fn random_projection(d: usize, seed: u64, attempt: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[0x9e0, attempt]);
    // Uniform entries with unit variance, scaled by 1/sqrt(fan-in).
    let half_width = 3f64.sqrt() / (RAW_FEATURE_DIM as f64).sqrt();
    (0..d * RAW_FEATURE_DIM)
        .map(|_| rng.gen_range(-half_width..half_width))
        .collect()
}

fn project(projection: &[f64], d: usize, raw: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|r| {
            projection[r * RAW_FEATURE_DIM..(r + 1) * RAW_FEATURE_DIM]
                .iter()
                .zip(raw)
                .map(|(w, x)| w * x)
                .sum()
        })
        .collect()
}

fn separates_gripper(projection: &[f64], d: usize) -> bool {
    let task = TaskSpec {
        task_id: 0,
        family: Family::Fetch,
        target_object: 0,
        goal_region: crate::envsim::Rect::new(0, 0, 1, 1),
        decoy_region: crate::envsim::Rect::new(10, 10, 11, 11),
        instruction: String::new(),
    };
    let obs = |g: Pos| Observation {
        gripper_pos: g,
        object_pos: vec![Pos::new(5, 5), Pos::new(7, 3)],
        held: None,
        goal_region: task.goal_region,
        step_index: 0,
        task_id: 0,
        grid_size: GridSize::default(),
    };
    let base = project(projection, d, &raw_features(&obs(Pos::new(4, 4)), &task));
    let ux: Vec<f64> = project(projection, d, &raw_features(&obs(Pos::new(5, 4)), &task))
        .iter()
        .zip(&base)
        .map(|(a, b)| a - b)
        .collect();
    let uy: Vec<f64> = project(projection, d, &raw_features(&obs(Pos::new(4, 5)), &task))
        .iter()
        .zip(&base)
        .map(|(a, b)| a - b)
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram = dot(&ux, &ux) * dot(&uy, &uy) - dot(&ux, &uy).powi(2);
    gram > 1e-6
}

fn norm_coord(v: i32, extent: i32) -> f64 {
    2.0 * f64::from(v) / f64::from((extent - 1).max(1)) - 1.0
}

/// Raw, unprojected features of `(obs, task)`.
pub fn raw_features(obs: &Observation, task: &TaskSpec) -> Vec<f64> {
    let grid = obs.grid_size;
    let sx = f64::from((grid.width - 1).max(1));
    let sy = f64::from((grid.height - 1).max(1));
    let mut f = Vec::with_capacity(RAW_FEATURE_DIM);
    f.push(norm_coord(obs.gripper_pos.x, grid.width));
    f.push(norm_coord(obs.gripper_pos.y, grid.height));
    for i in 0..MAX_OBJECTS {
        match obs.object_pos.get(i) {
            Some(p) => {
                f.push(norm_coord(p.x, grid.width));
                f.push(norm_coord(p.y, grid.height));
            }
            None => f.extend([0.0, 0.0]),
        }
    }
    let (gx, gy) = task.goal_region.center();
    f.push(2.0 * gx / sx - 1.0);
    f.push(2.0 * gy / sy - 1.0);
    let target = obs.object_pos[task.target_object];
    f.push(f64::from(target.x - obs.gripper_pos.x) / sx);
    f.push(f64::from(target.y - obs.gripper_pos.y) / sy);
    f.push((gx - f64::from(target.x)) / sx);
    f.push((gy - f64::from(target.y)) / sy);
    let (dx, dy) = task.decoy_region.center();
    f.push((dx - f64::from(target.x)) / sx);
    f.push((dy - f64::from(target.y)) / sy);
    let held_target = obs.held == Some(task.target_object);
    let held_other = obs.held.is_some() && !held_target;
    f.push(f64::from(u8::from(held_target)));
    f.push(f64::from(u8::from(held_other)));
    f.push(f64::from(u8::from(task.family == Family::Fetch)));
    f.push(f64::from(u8::from(task.family == Family::Spatial)));
    for bit in 0..TASK_ID_BITS {
        f.push(f64::from((task.task_id >> bit) & 1));
    }
    debug_assert_eq!(f.len(), RAW_FEATURE_DIM);
    f
}

impl Prior for SurrogatePrior {
    fn library(&self) -> &ChunkLibrary {
        &self.library
    }

    fn latent_dim(&self) -> usize {
        self.params.d
    }

    fn readout(&self, obs: &Observation, task: &TaskSpec) -> LatentReadout {
        let raw = raw_features(obs, task);
        LatentReadout(
            project(&self.projection, self.params.d, &raw)
                .into_iter()
                .map(f64::tanh)
                .collect(),
        )
    }

    fn propose_center(&self, obs: &Observation, task: &TaskSpec, rng: &mut dyn RngCore) -> usize {
        let subgoal = if rng.gen::<f64>() < self.params.epsilon {
            Subgoal::Decoy
        } else {
            Subgoal::Task
        };
        self.greedy_chunk(&obs.world(task), task, subgoal)
    }

    fn sample_candidates(
        &self,
        obs: &Observation,
        task: &TaskSpec,
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Candidates> {
        let m = self.library.len();
        if k == 0 || k > m {
            return Err(Error::config(format!("candidate count K={k} must lie in 1..={m}")));
        }
        let center = self.propose_center(obs, task, rng);
        let beta = self.library.beta_at(center, self.params.tau)?;
        let chunks = sample_without_replacement(&beta.probs, k, rng);
        let psi = self.library.psi_at(&chunks, center, self.params.tau)?;
        Ok(Candidates { center, chunks, psi })
    }
}
