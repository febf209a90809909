//! `ChunkGrid`: a deterministic grid-world pick-and-place environment.
//!
//! A gripper moves on a `width × height` grid holding at most one object.
//! Episodes end on success (the task's target object rests inside the goal
//! region, not held) or when the low-level step horizon is reached. The only
//! reward is the terminal one: 1 on success, 0 otherwise.
//!
//! The decoy region is absorbing: an object released inside it can no longer
//! be grasped. Placing the target there is the unrecoverable failure the
//! surrogate prior's bias produces.

mod layouts;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunks::ActionChunk;
use crate::{Error, Result};

pub use layouts::{Layout, LayoutSet, TaskDef, DEFAULT_LAYOUT_SEED};

pub const DEFAULT_HORIZON: u32 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Axis-aligned rectangle of grid cells, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub const fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    /// Manhattan distance from `p` to the nearest cell of the rectangle.
    pub fn distance(&self, p: Pos) -> i32 {
        let dx = (self.x0 - p.x).max(0).max(p.x - self.x1);
        let dy = (self.y0 - p.y).max(0).max(p.y - self.y1);
        dx + dy
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (
            f64::from(self.x0 + self.x1) / 2.0,
            f64::from(self.y0 + self.y1) / 2.0,
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn within(&self, grid: GridSize) -> bool {
        self.is_valid() && grid.contains(Pos::new(self.x0, self.y0)) && grid.contains(Pos::new(self.x1, self.y1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSize {
    pub width: i32,
    pub height: i32,
}

impl GridSize {
    pub fn contains(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }
}

impl Default for GridSize {
    fn default() -> Self {
        Self {
            width: 12,
            height: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LowLevelAction {
    Up,
    Down,
    Left,
    Right,
    Grasp,
    Release,
    Noop,
}

impl LowLevelAction {
    pub const ALL: [LowLevelAction; 7] = [
        LowLevelAction::Up,
        LowLevelAction::Down,
        LowLevelAction::Left,
        LowLevelAction::Right,
        LowLevelAction::Grasp,
        LowLevelAction::Release,
        LowLevelAction::Noop,
    ];

    pub const MOVES: [LowLevelAction; 4] = [
        LowLevelAction::Up,
        LowLevelAction::Down,
        LowLevelAction::Left,
        LowLevelAction::Right,
    ];

    /// Grid displacement of a move; `(0, 0)` for gripper commands.
    pub fn delta(self) -> (i32, i32) {
        match self {
            LowLevelAction::Up => (0, 1),
            LowLevelAction::Down => (0, -1),
            LowLevelAction::Left => (-1, 0),
            LowLevelAction::Right => (1, 0),
            _ => (0, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LowLevelAction::Up => "Up",
            LowLevelAction::Down => "Down",
            LowLevelAction::Left => "Left",
            LowLevelAction::Right => "Right",
            LowLevelAction::Grasp => "Grasp",
            LowLevelAction::Release => "Release",
            LowLevelAction::Noop => "Noop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Fetch,
    Spatial,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Fetch, Family::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            Family::Fetch => "fetch",
            Family::Spatial => "spatial",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub family: Family,
    pub target_object: usize,
    pub goal_region: Rect,
    pub decoy_region: Rect,
    pub instruction: String,
}

/// Positions of the gripper and objects, plus what the gripper holds.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct World {
    pub grid: GridSize,
    pub decoy: Rect,
    pub gripper: Pos,
    pub objects: Vec<Pos>,
    pub held: Option<usize>,
}

impl World {
    pub fn object_at(&self, p: Pos) -> Option<usize> {
        self.objects.iter().position(|&o| o == p)
    }

    /// True when object `i` rests inside the decoy region.
    pub fn is_locked(&self, i: usize) -> bool {
        self.held != Some(i) && self.decoy.contains(self.objects[i])
    }

    /// Applies one low-level action. Moves are clamped at the grid border and
    /// carry the held object along. Grasp only acts when the gripper is empty
    /// and shares a cell with an object outside the decoy region; Release
    /// only acts when something is held and no other object occupies the
    /// cell.
    pub fn apply(&mut self, action: LowLevelAction) {
        match action {
            LowLevelAction::Up | LowLevelAction::Down | LowLevelAction::Left | LowLevelAction::Right => {
                let (dx, dy) = action.delta();
                let next = Pos::new(
                    (self.gripper.x + dx).clamp(0, self.grid.width - 1),
                    (self.gripper.y + dy).clamp(0, self.grid.height - 1),
                );
                self.gripper = next;
                if let Some(i) = self.held {
                    self.objects[i] = next;
                }
            }
            LowLevelAction::Grasp => {
                if self.held.is_none() {
                    self.held = self.object_at(self.gripper).filter(|&i| !self.is_locked(i));
                }
            }
            LowLevelAction::Release => {
                if let Some(i) = self.held {
                    let blocked = self
                        .objects
                        .iter()
                        .enumerate()
                        .any(|(j, &o)| j != i && o == self.gripper);
                    if !blocked {
                        self.held = None;
                    }
                }
            }
            LowLevelAction::Noop => {}
        }
    }

    pub fn task_solved(&self, task: &TaskSpec) -> bool {
        self.held != Some(task.target_object) && task.goal_region.contains(self.objects[task.target_object])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub gripper_pos: Pos,
    pub object_pos: Vec<Pos>,
    pub held: Option<usize>,
    pub goal_region: Rect,
    pub step_index: u32,
    pub task_id: u32,
    pub grid_size: GridSize,
}

impl Observation {
    /// Rebuilds the kinematic world this observation describes.
    pub fn world(&self, task: &TaskSpec) -> World {
        World {
            grid: self.grid_size,
            decoy: task.decoy_region,
            gripper: self.gripper_pos,
            objects: self.object_pos.clone(),
            held: self.held,
        }
    }
}

/// Full environment state. A plain value: cloning yields an independent copy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    world: World,
    task: Arc<TaskSpec>,
    step_index: u32,
    horizon: u32,
    terminal: bool,
    reward: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub observation: Observation,
    pub terminal: bool,
    pub reward: u8,
}

impl EnvState {
    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn shared_task(&self) -> Arc<TaskSpec> {
        Arc::clone(&self.task)
    }

    pub fn step_index(&self) -> u32 {
        self.step_index
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Terminal reward: 1 once the task has been solved, 0 otherwise.
    pub fn reward(&self) -> u8 {
        self.reward
    }

    pub fn remaining_steps(&self) -> u32 {
        self.horizon - self.step_index
    }

    pub fn observation(&self) -> Observation {
        Observation {
            gripper_pos: self.world.gripper,
            object_pos: self.world.objects.clone(),
            held: self.world.held,
            goal_region: self.task.goal_region,
            step_index: self.step_index,
            task_id: self.task.task_id,
            grid_size: self.world.grid,
        }
    }

    /// Executes a chunk in place, stopping early on success or timeout.
    /// Returns the number of low-level actions applied.
    pub fn apply_chunk(&mut self, chunk: &ActionChunk) -> Result<usize> {
        if self.terminal {
            return Err(Error::usage("step_chunk called on a terminal state"));
        }
        let mut applied = 0;
        for &action in chunk.actions() {
            self.world.apply(action);
            self.step_index += 1;
            applied += 1;
            if self.world.task_solved(&self.task) {
                self.terminal = true;
                self.reward = 1;
                break;
            }
            if self.step_index >= self.horizon {
                self.terminal = true;
                break;
            }
        }
        Ok(applied)
    }

    pub fn step_chunk(&self, chunk: &ActionChunk) -> Result<Transition> {
        let mut next = self.clone();
        next.apply_chunk(chunk)?;
        let observation = next.observation();
        Ok(Transition {
            terminal: next.terminal,
            reward: next.reward,
            observation,
            state: next,
        })
    }

    pub fn is_success(&self) -> bool {
        self.world.task_solved(&self.task)
    }

    pub fn clone_state(&self) -> EnvState {
        self.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Low-level step budget per episode.
    pub horizon: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
        }
    }
}

/// The environment: a validated layout set plus the timeout horizon.
#[derive(Debug, Clone)]
pub struct ChunkGrid {
    layouts: Arc<LayoutSet>,
    tasks: Vec<Arc<TaskSpec>>,
    horizon: u32,
}

impl ChunkGrid {
    pub fn new(layouts: LayoutSet, config: EnvConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        layouts.validate()?;
        let tasks = layouts
            .tasks
            .iter()
            .map(|t| Arc::new(t.spec.clone()))
            .collect();
        Ok(Self {
            layouts: Arc::new(layouts),
            tasks,
            horizon: config.horizon,
        })
    }

    /// The shipped 2 × 10 × 10 layout set with the default horizon.
    pub fn shipped() -> Self {
        Self::new(LayoutSet::shipped(), EnvConfig::default()).expect("shipped layouts are valid")
    }

    pub fn layouts(&self) -> &LayoutSet {
        &self.layouts
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn grid(&self) -> GridSize {
        self.layouts.grid_size
    }

    pub fn task_ids(&self) -> Vec<u32> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }

    pub fn task(&self, task_id: u32) -> Result<&TaskSpec> {
        self.task_arc(task_id).map(|t| t.as_ref())
    }

    fn task_arc(&self, task_id: u32) -> Result<&Arc<TaskSpec>> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::config(format!("unknown task_id {task_id}")))
    }

    pub fn num_inits(&self, task_id: u32) -> Result<usize> {
        Ok(self.layouts.task(task_id)?.inits.len())
    }

    pub fn reset(&self, task_id: u32, init_id: usize) -> Result<(EnvState, Observation)> {
        let task = Arc::clone(self.task_arc(task_id)?);
        let def = self.layouts.task(task_id)?;
        let layout = def.inits.get(init_id).ok_or_else(|| {
            Error::config(format!(
                "unknown init_id {init_id} for task {task_id} ({} layouts)",
                def.inits.len()
            ))
        })?;
        let state = EnvState {
            world: World {
                grid: self.layouts.grid_size,
                decoy: task.decoy_region,
                gripper: layout.gripper,
                objects: layout.objects.clone(),
                held: None,
            },
            task,
            step_index: 0,
            horizon: self.horizon,
            terminal: false,
            reward: 0,
        };
        let obs = state.observation();
        Ok((state, obs))
    }
}
