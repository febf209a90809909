//! Task and initial-layout definitions, loadable from JSON.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Family, GridSize, Pos, Rect, TaskSpec};
use crate::rng::stream;
use crate::{Error, Result};

pub const DEFAULT_LAYOUT_SEED: u64 = 2024;

const SHIPPED_LAYOUTS: &str = include_str!("../../data/layouts.json");

const TASKS_PER_FAMILY: u32 = 10;
const INITS_PER_TASK: usize = 10;
const OBJECT_NAMES: [&str; 2] = ["red mug", "blue can"];

/// Initial gripper and object positions for one `(task, init)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub gripper: Pos,
    pub objects: Vec<Pos>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    #[serde(flatten)]
    pub spec: TaskSpec,
    pub inits: Vec<Layout>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSet {
    pub grid_size: GridSize,
    pub tasks: Vec<TaskDef>,
}

impl LayoutSet {
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_LAYOUTS).expect("shipped layouts parse")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: LayoutSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layouts serialize")
    }

    pub fn task(&self, task_id: u32) -> Result<&TaskDef> {
        self.tasks
            .iter()
            .find(|t| t.spec.task_id == task_id)
            .ok_or_else(|| Error::config(format!("unknown task_id {task_id}")))
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid_size;
        if grid.width < 2 || grid.height < 2 {
            return Err(Error::config("grid must be at least 2x2"));
        }
        let mut ids = HashSet::new();
        for def in &self.tasks {
            let t = &def.spec;
            let bad = |msg: &str| Error::config(format!("task {}: {msg}", t.task_id));
            if !ids.insert(t.task_id) {
                return Err(bad("duplicate task_id"));
            }
            if !t.goal_region.within(grid) || !t.decoy_region.within(grid) {
                return Err(bad("region outside grid"));
            }
            if t.goal_region.overlaps(&t.decoy_region) {
                return Err(bad("goal and decoy regions overlap"));
            }
            if def.inits.is_empty() {
                return Err(bad("no initial layouts"));
            }
            for (i, layout) in def.inits.iter().enumerate() {
                let bad = |msg: &str| Error::config(format!("task {} init {i}: {msg}", t.task_id));
                if t.target_object >= layout.objects.len() {
                    return Err(bad("target_object out of range"));
                }
                if !grid.contains(layout.gripper) || !layout.objects.iter().all(|&p| grid.contains(p)) {
                    return Err(bad("position outside grid"));
                }
                let cells: HashSet<_> = layout.objects.iter().collect();
                if cells.len() != layout.objects.len() {
                    return Err(bad("objects share a cell"));
                }
                if t.goal_region.contains(layout.objects[t.target_object]) {
                    return Err(bad("layout starts solved"));
                }
            }
        }
        Ok(())
    }

    /// Deterministically generates the default 2 families × 10 tasks × 10
    /// layouts. Goal and decoy regions sit side by side against one grid
    /// edge, so a decoy-biased step near the end of a carry places the
    /// object in the wrong region; objects start in a band away from that
    /// edge.
    pub fn generate(seed: u64) -> Self {
        let grid = GridSize::default();
        let mut tasks = Vec::new();
        for (fi, family) in Family::ALL.into_iter().enumerate() {
            for k in 0..TASKS_PER_FAMILY {
                let task_id = fi as u32 * TASKS_PER_FAMILY + k;
                tasks.push(generate_task(seed, task_id, family, grid));
            }
        }
        Self {
            grid_size: grid,
            tasks,
        }
    }
}

/// Maps (axis coordinate, cross coordinate) to a grid position.
fn place(along_x: bool, a: i32, c: i32) -> Pos {
    if along_x {
        Pos::new(a, c)
    } else {
        Pos::new(c, a)
    }
}

fn region(along_x: bool, a0: i32, c0: i32) -> Rect {
    let p0 = place(along_x, a0, c0);
    let p1 = place(along_x, a0 + 1, c0 + 1);
    Rect::new(p0.x, p0.y, p1.x, p1.y)
}

fn generate_task(seed: u64, task_id: u32, family: Family, grid: GridSize) -> TaskDef {
    let mut rng = stream(seed, &[u64::from(task_id)]);
    let along_x = rng.gen_bool(0.5);
    let extent = if along_x { grid.width } else { grid.height };
    let cross = if along_x { grid.height } else { grid.width };
    let edge_a = if rng.gen_bool(0.5) { 0 } else { extent - 2 };
    // Goal and decoy are 2-wide blocks along the edge, separated by a gap of
    // zero or one cell.
    let gap = rng.gen_range(0..2);
    let span = 4 + gap;
    let start = rng.gen_range(0..=cross - span);
    let (goal_c, decoy_c) = if rng.gen_bool(0.5) {
        (start, start + 2 + gap)
    } else {
        (start + 2 + gap, start)
    };
    let goal_region = region(along_x, edge_a, goal_c);
    let decoy_region = region(along_x, edge_a, decoy_c);
    let band = if edge_a == 0 { 4..extent - 1 } else { 1..extent - 4 };

    let (target_object, instruction, fixed_target) = match family {
        Family::Fetch => {
            let target = (task_id % 2) as usize;
            (target, format!("put the {} in the basket", OBJECT_NAMES[target]), None)
        }
        Family::Spatial => {
            let cell = place(along_x, rng.gen_range(band.clone()), rng.gen_range(0..cross));
            (
                0,
                format!("pick up the bowl at {cell} and place it on the plate"),
                Some(cell),
            )
        }
    };
    let spec = TaskSpec {
        task_id,
        family,
        target_object,
        goal_region,
        decoy_region,
        instruction,
    };

    let mut inits: Vec<Layout> = Vec::new();
    while inits.len() < INITS_PER_TASK {
        let mut draw = || place(along_x, rng.gen_range(band.clone()), rng.gen_range(0..cross));
        let mut objects = vec![draw(), draw()];
        if let Some(cell) = fixed_target {
            objects[target_object] = cell;
        }
        if objects[0] == objects[1] {
            continue;
        }
        let gripper = Pos::new(rng.gen_range(0..grid.width), rng.gen_range(0..grid.height));
        if goal_region.contains(gripper) || decoy_region.contains(gripper) {
            continue;
        }
        let target = objects[target_object];
        // Shortest low-level solution: reach, grasp, carry, release.
        let optimum = gripper.manhattan(target) + 1 + goal_region.distance(target) + 1;
        if !(18..=46).contains(&optimum) {
            continue;
        }
        if inits.iter().any(|l| l.objects == objects) {
            continue;
        }
        inits.push(Layout { gripper, objects });
    }
    TaskDef { spec, inits }
}
