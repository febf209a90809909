//! Prior-only episode collection, Monte Carlo value targets, and the
//! on-disk dataset format.
//!
//! Dataset CSV layout:
//!
//! ```text
//! d,gamma
//! 32,0.99
//! task_id,init_id,t,R,G,h_0,...,h_31
//! 0,0,0,1,0.9227446944279201,0.12,...
//! ```
//!
//! Floats are written in Rust's shortest round-trip form (at most 17
//! significant digits), so `load(save(x)) == x` exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunks::LibraryConfig;
use crate::envsim::{ChunkGrid, EnvConfig};
use crate::prior::{LatentReadout, Prior, PriorParams};
use crate::rng::stream;
use crate::valuehead::{balance, TrainingExample};
use crate::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.99;
const BALANCE_STREAM: u64 = 0xba1a;

/// One decision step. The last record of an episode holds the terminal
/// observation and no chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Low-level step index when the decision was taken.
    pub step_index: u32,
    pub readout: LatentReadout,
    /// Library index of the executed chunk.
    pub chunk: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub reward: u8,
    /// Chunks executed.
    pub decisions: usize,
    pub low_level_steps: u32,
}

impl EpisodeOutcome {
    pub fn is_success(&self) -> bool {
        self.reward == 1
    }
}

/// `(o_0, c_0, ..., o_T)` for one prior-only episode. The chunk indices are
/// the action history, enough to replay the episode in the deterministic
/// simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task_id: u32,
    pub init_id: u32,
    pub records: Vec<StepRecord>,
    pub outcome: EpisodeOutcome,
}

impl EpisodeTrace {
    pub fn actions(&self) -> Vec<usize> {
        self.records.iter().filter_map(|r| r.chunk).collect()
    }
}

/// Runs the prior's proposals without any planning until the episode ends.
pub fn run_episode(
    env: &ChunkGrid,
    task_id: u32,
    init_id: usize,
    prior: &dyn Prior,
    rng: &mut dyn RngCore,
) -> Result<EpisodeTrace> {
    let (mut state, mut obs) = env.reset(task_id, init_id)?;
    let task = state.shared_task();
    let mut records = Vec::new();
    while !state.is_terminal() {
        let chunk = prior.propose_center(&obs, &task, rng);
        records.push(StepRecord {
            step_index: state.step_index(),
            readout: prior.readout(&obs, &task),
            chunk: Some(chunk),
        });
        state.apply_chunk(prior.library().chunk(chunk))?;
        obs = state.observation();
    }
    records.push(StepRecord {
        step_index: state.step_index(),
        readout: prior.readout(&obs, &task),
        chunk: None,
    });
    Ok(EpisodeTrace {
        task_id,
        init_id: init_id as u32,
        outcome: EpisodeOutcome {
            reward: state.reward(),
            decisions: records.len() - 1,
            low_level_steps: state.step_index(),
        },
        records,
    })
}

/// Re-executes the recorded chunks and recomputes every readout.
pub fn replay_readouts(env: &ChunkGrid, prior: &dyn Prior, trace: &EpisodeTrace) -> Result<Vec<LatentReadout>> {
    let (mut state, mut obs) = env.reset(trace.task_id, trace.init_id as usize)?;
    let task = state.shared_task();
    let mut out = vec![prior.readout(&obs, &task)];
    for chunk in trace.actions() {
        state.apply_chunk(prior.library().chunk(chunk))?;
        obs = state.observation();
        out.push(prior.readout(&obs, &task));
    }
    Ok(out)
}

/// Discounted sparse returns for `T + 1` decision steps: `γ^(T−t)` after a
/// success, zero after a failure. Built by the backward recurrence
/// `G_T = 1, G_t = γ·G_{t+1}`.
pub fn discounted_returns(decisions: usize, success: bool, gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; decisions + 1];
    if success {
        g[decisions] = 1.0;
        for t in (0..decisions).rev() {
            g[t] = gamma * g[t + 1];
        }
    }
    g
}

pub fn mc_targets(trace: &EpisodeTrace, gamma: f64) -> Vec<f64> {
    discounted_returns(trace.records.len() - 1, trace.outcome.is_success(), gamma)
}

pub fn trace_examples(trace: &EpisodeTrace, gamma: f64) -> Vec<TrainingExample> {
    let targets = mc_targets(trace, gamma);
    trace
        .records
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(t, (rec, g))| TrainingExample {
            h: rec.readout.clone(),
            g,
            task_id: trace.task_id,
            init_id: trace.init_id,
            t: t as u32,
            r: trace.outcome.reward,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    /// Task ids to collect from; empty means every task.
    pub tasks: Vec<u32>,
    /// Init ids per task; empty means every init.
    pub inits: Vec<usize>,
    pub episodes_per_init: usize,
    pub gamma: f64,
    pub seed: u64,
    pub balance: bool,
    pub prior: PriorParams,
    pub library: LibraryConfig,
    pub env: EnvConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            inits: Vec::new(),
            episodes_per_init: 10,
            gamma: DEFAULT_GAMMA,
            seed: 0,
            balance: true,
            prior: PriorParams::default(),
            library: LibraryConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.episodes_per_init == 0 {
            return Err(Error::config("episodes_per_init must be positive"));
        }
        self.prior.validate()
    }

    /// `(task, init)` pairs to run, checked against the environment.
    pub fn layouts(&self, env: &ChunkGrid) -> Result<Vec<(u32, usize)>> {
        select_layouts(env, &self.tasks, &self.inits)
    }
}

/// Expands task and init selections into `(task, init)` pairs. An empty
/// selection means all of them.
pub fn select_layouts(env: &ChunkGrid, tasks: &[u32], inits: &[usize]) -> Result<Vec<(u32, usize)>> {
    let tasks = if tasks.is_empty() { env.task_ids() } else { tasks.to_vec() };
    let mut out = Vec::new();
    for task in tasks {
        let n = env.num_inits(task)?;
        if inits.is_empty() {
            out.extend((0..n).map(|i| (task, i)));
        } else {
            for &i in inits {
                if i >= n {
                    return Err(Error::config(format!("task {task} has no init {i}")));
                }
                out.push((task, i));
            }
        }
    }
    Ok(out)
}

/// Examples plus the discount they were computed with.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueDataset {
    pub d: usize,
    pub gamma: f64,
    pub examples: Vec<TrainingExample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_ids: Vec<u32>,
    pub success_examples: usize,
    pub failure_examples: usize,
}

impl ValueDataset {
    pub fn provenance(&self) -> Provenance {
        let task_ids: BTreeSet<u32> = self.examples.iter().map(|e| e.task_id).collect();
        let success_examples = self.examples.iter().filter(|e| e.is_success()).count();
        Provenance {
            task_ids: task_ids.into_iter().collect(),
            success_examples,
            failure_examples: self.examples.len() - success_examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Keeps only examples whose task is in `task_ids`.
    pub fn restrict(&self, task_ids: &[u32]) -> ValueDataset {
        ValueDataset {
            d: self.d,
            gamma: self.gamma,
            examples: self
                .examples
                .iter()
                .filter(|e| task_ids.contains(&e.task_id))
                .cloned()
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 + self.examples.len() * (self.d * 22 + 40));
        let _ = writeln!(out, "d,gamma\n{},{}", self.d, self.gamma);
        out.push_str("task_id,init_id,t,R,G");
        for i in 0..self.d {
            let _ = write!(out, ",h_{i}");
        }
        out.push('\n');
        for e in &self.examples {
            let _ = write!(out, "{},{},{},{},{}", e.task_id, e.init_id, e.t, e.r, e.g);
            for x in e.h.as_slice() {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses the CSV text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next_line = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("file ends before the {what}")))
        };
        let (n, head) = next_line("d,gamma header")?;
        if head.trim() != "d,gamma" {
            return Err(err(n, format!("expected `d,gamma`, found `{head}`")));
        }
        let (n, meta) = next_line("d,gamma values")?;
        let (d, gamma) = meta
            .split_once(',')
            .ok_or_else(|| err(n, "expected two fields `d,gamma`".into()))?;
        let d: usize = d.trim().parse().map_err(|e| err(n, format!("bad d: {e}")))?;
        let gamma: f64 = gamma.trim().parse().map_err(|e| err(n, format!("bad gamma: {e}")))?;
        if d == 0 {
            return Err(err(n, "d must be positive".into()));
        }
        let (n, columns) = next_line("column header")?;
        let width = columns.split(',').count();
        if width != 5 + d || !columns.starts_with("task_id,init_id,t,R,G") {
            return Err(err(n, format!("column header does not match d = {d}")));
        }
        let mut examples = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 + d {
                return Err(err(n, format!("row has {} fields, expected {}", fields.len(), 5 + d)));
            }
            let int = |i: usize, name: &str| -> Result<u32> {
                fields[i].trim().parse().map_err(|e| err(n, format!("bad {name} `{}`: {e}", fields[i])))
            };
            let float = |i: usize| -> Result<f64> {
                fields[i].trim().parse().map_err(|e| err(n, format!("bad number `{}`: {e}", fields[i])))
            };
            let r = int(3, "R")?;
            if r > 1 {
                return Err(err(n, format!("R must be 0 or 1, got {r}")));
            }
            let h = (5..5 + d).map(float).collect::<Result<Vec<_>>>()?;
            examples.push(TrainingExample {
                task_id: int(0, "task_id")?,
                init_id: int(1, "init_id")?,
                t: int(2, "t")?,
                r: r as u8,
                g: float(4)?,
                h: LatentReadout(h),
            });
        }
        Ok(ValueDataset { d, gamma, examples })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub episodes: usize,
    pub success_episodes: usize,
    pub examples_before_balance: usize,
    pub balance_warning: Option<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct Collection {
    pub dataset: ValueDataset,
    /// Traces in collection order, `(task, init, episode)` lexicographic.
    pub traces: Vec<EpisodeTrace>,
    pub summary: CollectSummary,
}

/// Runs `episodes_per_init` prior-only episodes from every selected layout,
/// in parallel, and concatenates their examples in a fixed order. Episode
/// `e` of `(task, init)` draws from its own stream of `config.seed`.
pub fn build_dataset(env: &ChunkGrid, prior: &dyn Prior, config: &CollectConfig) -> Result<Collection> {
    config.validate()?;
    let layouts = config.layouts(env)?;
    if layouts.is_empty() {
        return Err(Error::config("no tasks selected for collection"));
    }
    let jobs: Vec<(u32, usize, usize)> = layouts
        .iter()
        .flat_map(|&(t, i)| (0..config.episodes_per_init).map(move |e| (t, i, e)))
        .collect();
    let traces: Vec<EpisodeTrace> = jobs
        .par_iter()
        .map(|&(task, init, ep)| {
            let mut rng = stream(config.seed, &[u64::from(task), init as u64, ep as u64]);
            run_episode(env, task, init, prior, &mut rng)
        })
        .collect::<Result<_>>()?;
    let examples: Vec<TrainingExample> = traces.iter().flat_map(|t| trace_examples(t, config.gamma)).collect();
    let examples_before_balance = examples.len();
    let (examples, balance_warning) = if config.balance {
        let mut rng = stream(config.seed, &[BALANCE_STREAM]);
        let b = balance(examples, &mut rng)?;
        (b.examples, b.warning)
    } else {
        (examples, None)
    };
    let dataset = ValueDataset {
        d: prior.latent_dim(),
        gamma: config.gamma,
        examples,
    };
    let summary = CollectSummary {
        episodes: traces.len(),
        success_episodes: traces.iter().filter(|t| t.outcome.is_success()).count(),
        examples_before_balance,
        balance_warning,
        provenance: dataset.provenance(),
    };
    Ok(Collection {
        dataset,
        traces,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunks::ChunkLibrary;
    use crate::prior::SurrogatePrior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn prior(epsilon: f64) -> SurrogatePrior {
        let lib = Arc::new(ChunkLibrary::build(LibraryConfig::default()).unwrap());
        SurrogatePrior::new(PriorParams { epsilon, ..Default::default() }, lib).unwrap()
    }

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_returns(0, true, 0.99), vec![1.0]);
        assert_eq!(discounted_returns(3, false, 0.99), vec![0.0; 4]);
        let g = discounted_returns(2, true, 0.99);
        // 0.99² evaluated directly.
        assert!((g[0] - 0.9801).abs() < 1e-15);
        assert_eq!(g[1], 0.99);
        assert_eq!(g[2], 1.0);
        for n in [1usize, 5, 30] {
            let g = discounted_returns(n, true, 0.9);
            for (t, v) in g.iter().enumerate() {
                assert!((v - 0.9f64.powi((n - t) as i32)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn unbiased_prior_episode_succeeds() {
        let env = ChunkGrid::shipped();
        let p = prior(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = run_episode(&env, 0, 0, &p, &mut rng).unwrap();
        assert_eq!(trace.outcome.reward, 1);
        assert_eq!(trace.records.len(), trace.outcome.decisions + 1);
        assert!(trace.records.last().unwrap().chunk.is_none());
        assert!(trace.records.iter().all(|r| r.readout.dim() == 32));
    }

    #[test]
    fn fully_biased_prior_fails_within_horizon_bound() {
        let env = ChunkGrid::shipped();
        let p = prior(1.0);
        let bound = env.horizon().div_ceil(p.library().chunk_len() as u32) as usize;
        for task in [0, 5, 10, 19] {
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from(task));
            let trace = run_episode(&env, task, 3, &p, &mut rng).unwrap();
            assert_eq!(trace.outcome.reward, 0);
            assert!(trace.outcome.decisions <= bound);
            assert!(mc_targets(&trace, 0.99).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn replay_reproduces_readouts() {
        let env = ChunkGrid::shipped();
        let p = prior(0.3);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let trace = run_episode(&env, seed as u32 * 3, 1, &p, &mut rng).unwrap();
            let replayed = replay_readouts(&env, &p, &trace).unwrap();
            let stored: Vec<_> = trace.records.iter().map(|r| r.readout.clone()).collect();
            assert_eq!(replayed, stored);
        }
    }

    fn small_config() -> CollectConfig {
        CollectConfig {
            tasks: vec![1, 12],
            inits: vec![0, 4],
            episodes_per_init: 3,
            balance: false,
            prior: PriorParams { epsilon: 0.3, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn dataset_counting_and_provenance() {
        let env = ChunkGrid::shipped();
        let p = prior(0.3);
        let c = build_dataset(&env, &p, &small_config()).unwrap();
        assert_eq!(c.traces.len(), 12);
        assert!(c.dataset.len() <= 2 * 2 * 3 * 31);
        let prov = c.dataset.provenance();
        assert_eq!(prov.task_ids, vec![1, 12]);
        let from_traces: usize = c
            .traces
            .iter()
            .filter(|t| t.outcome.is_success())
            .map(|t| t.records.len())
            .sum();
        assert_eq!(prov.success_examples, from_traces);
        assert_eq!(prov.success_examples + prov.failure_examples, c.dataset.len());
    }

    #[test]
    fn same_seed_gives_identical_file_bytes() {
        let env = ChunkGrid::shipped();
        let p = prior(0.3);
        let a = build_dataset(&env, &p, &small_config()).unwrap().dataset.to_csv();
        let b = build_dataset(&env, &p, &small_config()).unwrap().dataset.to_csv();
        assert_eq!(a, b);
        let other = CollectConfig { seed: 9, ..small_config() };
        let c = build_dataset(&env, &p, &other).unwrap().dataset.to_csv();
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_layouts_are_config_errors() {
        let env = ChunkGrid::shipped();
        let p = prior(0.3);
        let bad = CollectConfig { tasks: vec![77], ..small_config() };
        assert!(matches!(build_dataset(&env, &p, &bad), Err(Error::Config(_))));
        let bad = CollectConfig { inits: vec![10], ..small_config() };
        assert!(matches!(build_dataset(&env, &p, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let env = ChunkGrid::shipped();
        let p = prior(0.3);
        let mut ds = build_dataset(&env, &p, &small_config()).unwrap().dataset;
        ds.examples.truncate(100);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        ds.save(&path).unwrap();
        assert_eq!(ValueDataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let path = Path::new("mem.csv");
        let good = "d,gamma\n2,0.99\ntask_id,init_id,t,R,G,h_0,h_1\n0,0,0,1,0.99,0.1,0.2\n";
        assert_eq!(ValueDataset::parse(good, path).unwrap().len(), 1);

        let truncated = format!("{good}0,0,1,1,1.0,0.3\n");
        match ValueDataset::parse(&truncated, path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        let wrong_header = "d,gamma\n3,0.99\ntask_id,init_id,t,R,G,h_0,h_1\n";
        assert!(matches!(ValueDataset::parse(wrong_header, path), Err(Error::Parse { line: 3, .. })));
        let bad_number = "d,gamma\n1,0.99\ntask_id,init_id,t,R,G,h_0\n0,0,0,1,x,0.5\n";
        assert!(matches!(ValueDataset::parse(bad_number, path), Err(Error::Parse { line: 4, .. })));
    }
}
