//! Experiment harness: runs each method over a grid of layouts, aggregates
//! success rates and simulation counts, and writes a run directory.
//!
//! Run directory contents:
//!
//! - `config.json`: the resolved experiment config
//! - `episodes.csv`: one row per episode,
//!   `method,task_id,family,init_id,rollout,success,decisions,low_level_steps,search_calls,simulations`
//!   (the last two are empty for prior-only execution)
//! - `search_calls.csv`: one row per search call,
//!   `method,task_id,init_id,rollout,call,simulations,success_found,plan_verified`
//! - `metrics.csv`, `metrics.md`: the metrics table
//! - `manifest.json`: SHA-256 of every model used and every file above
//! - `metadata.json`: wall-clock timestamps, the only nondeterministic file

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunks::{ChunkLibrary, LibraryConfig};
use crate::collect::{run_episode, select_layouts, EpisodeOutcome, ValueDataset};
use crate::envsim::{ChunkGrid, EnvConfig, EnvState, Family, LayoutSet};
use crate::prior::{LatentReadout, Prior, PriorParams, SurrogatePrior};
use crate::rng::{derive_seed, stream};
use crate::search::{act_episode, CallStats, SearchConfig, SearchMode, ValueFunction};
use crate::valuehead::ValueHead;
use crate::{Error, Result};

pub const DEFAULT_ROLLOUTS: usize = 10;
pub const DEFAULT_EVAL_EPSILON: f64 = 0.3;

/// One column of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    /// Absent for plain prior execution. `seed` is ignored: every episode
    /// gets its own seed derived from the experiment seed.
    #[serde(default)]
    pub search: Option<SearchConfig>,
    /// A single value head used for every task.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// One value head per task family.
    #[serde(default)]
    pub family_models: BTreeMap<Family, PathBuf>,
}

impl MethodSpec {
    pub fn vla_only() -> Self {
        Self {
            name: "vla-only".into(),
            search: None,
            model: None,
            family_models: BTreeMap::new(),
        }
    }

    pub fn vlaps() -> Self {
        Self {
            name: "vlaps".into(),
            search: Some(SearchConfig {
                mode: SearchMode::Vlaps,
                ..Default::default()
            }),
            model: None,
            family_models: BTreeMap::new(),
        }
    }

    pub fn is_search(&self) -> bool {
        self.search.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Empty selects every task.
    pub tasks: Vec<u32>,
    /// Empty selects every init.
    pub inits: Vec<usize>,
    pub rollouts: usize,
    pub methods: Vec<MethodSpec>,
    pub prior: PriorParams,
    pub library: LibraryConfig,
    pub env: EnvConfig,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            inits: Vec::new(),
            rollouts: DEFAULT_ROLLOUTS,
            methods: vec![MethodSpec::vla_only(), MethodSpec::vlaps()],
            prior: PriorParams {
                epsilon: DEFAULT_EVAL_EPSILON,
                ..Default::default()
            },
            library: LibraryConfig::default(),
            env: EnvConfig::default(),
            seed: 0,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without running an episode,
    /// including that every model file exists.
    pub fn validate(&self, env: &ChunkGrid) -> Result<()> {
        if self.rollouts == 0 {
            return Err(Error::config("rollouts must be at least 1"));
        }
        self.prior.validate()?;
        let layouts = select_layouts(env, &self.tasks, &self.inits)?;
        let families: BTreeSet<Family> = layouts
            .iter()
            .map(|&(t, _)| env.task(t).map(|s| s.family))
            .collect::<Result<_>>()?;
        let mut names = BTreeSet::new();
        for m in &self.methods {
            if m.name.is_empty() || m.name.contains([',', '"', '|', '\n', '\r']) {
                return Err(Error::config(format!("invalid method name {:?}", m.name)));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::config(format!("duplicate method name {:?}", m.name)));
            }
            let has_model = m.model.is_some() || !m.family_models.is_empty();
            match &m.search {
                None if has_model => {
                    return Err(Error::config(format!("method {}: models given without search", m.name)));
                }
                None => {}
                Some(s) => {
                    s.validate()?;
                    match s.mode {
                        SearchMode::Vlaps if has_model => {
                            return Err(Error::config(format!(
                                "method {}: baseline search does not use a value model",
                                m.name
                            )));
                        }
                        SearchMode::Vlaps => {}
                        SearchMode::VVlaps => {
                            if m.model.is_some() == !m.family_models.is_empty() {
                                return Err(Error::config(format!(
                                    "method {}: value-guided search needs exactly one of model or family_models",
                                    m.name
                                )));
                            }
                            for f in &families {
                                if m.model.is_none() && !m.family_models.contains_key(f) {
                                    return Err(Error::config(format!("method {}: no model for family {f}", m.name)));
                                }
                            }
                        }
                    }
                }
            }
            for path in m.model.iter().chain(m.family_models.values()) {
                if !path.is_file() {
                    return Err(Error::config(format!(
                        "method {}: model file {} does not exist",
                        m.name,
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Routes each state to the head trained on its task family.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyValue {
    pub heads: BTreeMap<Family, ValueHead>,
}

impl ValueFunction for FamilyValue {
    fn value(&self, readout: &LatentReadout, state: &EnvState) -> Result<f64> {
        let family = state.task().family;
        self.heads
            .get(&family)
            .ok_or_else(|| Error::config(format!("no value head for family {family}")))?
            .value(readout)
    }
}

/// A model file used by a run, identified by content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub method: String,
    /// `"all"` for a single head, otherwise the family name.
    pub scope: String,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn load_head(path: &Path, d: usize) -> Result<ValueHead> {
    let head = ValueHead::load(path)?;
    if head.d != d {
        return Err(Error::config(format!(
            "model {} expects readouts of dimension {}, prior produces {d}",
            path.display(),
            head.d
        )));
    }
    Ok(head)
}

enum LoadedValue {
    Joint(ValueHead),
    Family(FamilyValue),
}

impl LoadedValue {
    fn as_dyn(&self) -> &dyn ValueFunction {
        match self {
            LoadedValue::Joint(h) => h,
            LoadedValue::Family(f) => f,
        }
    }
}

fn load_values(m: &MethodSpec, d: usize, refs: &mut Vec<ModelRef>) -> Result<Option<LoadedValue>> {
    if let Some(path) = &m.model {
        refs.push(ModelRef {
            method: m.name.clone(),
            scope: "all".into(),
            path: path.clone(),
            sha256: hash_file(path)?,
        });
        return Ok(Some(LoadedValue::Joint(load_head(path, d)?)));
    }
    if m.family_models.is_empty() {
        return Ok(None);
    }
    let mut heads = BTreeMap::new();
    for (&family, path) in &m.family_models {
        refs.push(ModelRef {
            method: m.name.clone(),
            scope: family.name().into(),
            path: path.clone(),
            sha256: hash_file(path)?,
        });
        heads.insert(family, load_head(path, d)?);
    }
    Ok(Some(LoadedValue::Family(FamilyValue { heads })))
}

/// Outcome of one episode of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// Index into the experiment's method list.
    pub method: usize,
    pub task_id: u32,
    pub family: Family,
    pub init_id: usize,
    pub rollout: usize,
    pub outcome: EpisodeOutcome,
    /// `None` for prior-only execution.
    pub calls: Option<Vec<CallStats>>,
}

pub fn success_rate(outcomes: &[bool]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::usage("success rate of no episodes"));
    }
    let wins = outcomes.iter().filter(|&&s| s).count();
    Ok(100.0 * wins as f64 / outcomes.len() as f64)
}

/// Mean simulations per search call and per episode.
pub fn avg_simulations<'a>(records: impl IntoIterator<Item = &'a EpisodeRecord>) -> Result<(f64, f64)> {
    let (mut episodes, mut calls, mut sims) = (0usize, 0usize, 0usize);
    for r in records {
        let c = r
            .calls
            .as_ref()
            .ok_or_else(|| Error::usage("simulation counts of a method without search"))?;
        episodes += 1;
        calls += c.len();
        sims += c.iter().map(|c| c.simulations).sum::<usize>();
    }
    if episodes == 0 || calls == 0 {
        return Err(Error::usage("simulation counts of no search calls"));
    }
    Ok((sims as f64 / calls as f64, sims as f64 / episodes as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricCell {
    pub episodes: usize,
    pub success_rate: f64,
    pub sims_per_call: Option<f64>,
    pub sims_per_episode: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    /// Task id, family name, or `overall`.
    pub label: String,
    /// One cell per method, in method order.
    pub cells: Vec<MetricCell>,
}

type RowFilter = Box<dyn Fn(&EpisodeRecord) -> bool>;

/// Per-task rows, then per-family rows, then the overall row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub methods: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

pub const OVERALL: &str = "overall";

impl MetricsTable {
    pub fn from_log(methods: &[String], log: &[EpisodeRecord]) -> Result<Self> {
        let mut tasks: BTreeMap<u32, Family> = BTreeMap::new();
        for r in log {
            tasks.insert(r.task_id, r.family);
        }
        let families: BTreeSet<Family> = tasks.values().copied().collect();
        let mut groups: Vec<(String, RowFilter)> = Vec::new();
        for &t in tasks.keys() {
            groups.push((t.to_string(), Box::new(move |r| r.task_id == t)));
        }
        for &f in &families {
            groups.push((f.name().to_string(), Box::new(move |r| r.family == f)));
        }
        groups.push((OVERALL.to_string(), Box::new(|_| true)));
        let mut rows = Vec::with_capacity(groups.len());
        for (label, keep) in groups {
            let mut cells = Vec::with_capacity(methods.len());
            for m in 0..methods.len() {
                let sel: Vec<&EpisodeRecord> = log.iter().filter(|r| r.method == m && keep(r)).collect();
                let outcomes: Vec<bool> = sel.iter().map(|r| r.outcome.is_success()).collect();
                let searched = sel.first().is_some_and(|r| r.calls.is_some());
                let (per_call, per_episode) = if searched {
                    let (c, e) = avg_simulations(sel.iter().copied())?;
                    (Some(c), Some(e))
                } else {
                    (None, None)
                };
                cells.push(MetricCell {
                    episodes: sel.len(),
                    success_rate: success_rate(&outcomes)?,
                    sims_per_call: per_call,
                    sims_per_episode: per_episode,
                });
            }
            rows.push(MetricsRow { label, cells });
        }
        Ok(Self {
            methods: methods.to_vec(),
            rows,
        })
    }

    pub fn row(&self, label: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn overall(&self) -> Option<&MetricsRow> {
        self.row(OVERALL)
    }

    pub fn cell(&self, label: &str, method: &str) -> Option<&MetricCell> {
        let m = self.methods.iter().position(|n| n == method)?;
        self.row(label).map(|r| &r.cells[m])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

fn fmt_rate(x: f64) -> String {
    format!("{x:.2}")
}

fn fmt_sims(x: Option<f64>) -> String {
    x.map(|x| format!("{x:.3}")).unwrap_or_default()
}

/// Renders the table. Both formats share the same number formatting.
pub fn render_table(table: &MetricsTable, format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("task");
            for m in &table.methods {
                let _ = write!(out, ",{m}:success_pct,{m}:sims_per_call,{m}:sims_per_episode");
            }
            out.push('\n');
            for row in &table.rows {
                out.push_str(&row.label);
                for c in &row.cells {
                    let _ = write!(
                        out,
                        ",{},{},{}",
                        fmt_rate(c.success_rate),
                        fmt_sims(c.sims_per_call),
                        fmt_sims(c.sims_per_episode)
                    );
                }
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            type Getter = fn(&MetricCell) -> String;
            let sections: [(&str, Getter); 3] = [
                ("Success rate (%)", |c| fmt_rate(c.success_rate)),
                ("Mean simulations per search call", |c| fmt_sims(c.sims_per_call)),
                ("Mean simulations per episode", |c| fmt_sims(c.sims_per_episode)),
            ];
            for (i, (title, get)) in sections.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                let _ = writeln!(out, "### {title}\n");
                out.push_str("| Task |");
                for m in &table.methods {
                    let _ = write!(out, " {m} |");
                }
                out.push_str("\n|---|");
                for _ in &table.methods {
                    out.push_str("---:|");
                }
                out.push('\n');
                for row in &table.rows {
                    let label = if row.label == OVERALL { "**Overall**".to_string() } else { row.label.clone() };
                    let _ = write!(out, "| {label} |");
                    for c in &row.cells {
                        let v = get(c);
                        let _ = write!(out, " {} |", if v.is_empty() { "-" } else { &v });
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}

/// Everything a run produces besides timing.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub table: MetricsTable,
    /// In `(task, init, rollout, method)` order.
    pub log: Vec<EpisodeRecord>,
    pub models: Vec<ModelRef>,
}

/// Builds the environment an experiment runs in.
pub fn experiment_env(config: &ExperimentConfig) -> Result<ChunkGrid> {
    ChunkGrid::new(LayoutSet::shipped(), config.env)
}

/// Runs every method on every `(task, init, rollout)`. All methods see the
/// same per-episode seed. Episodes run on the current rayon pool and are
/// merged in a fixed order, so the result does not depend on thread count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    let env = experiment_env(config)?;
    config.validate(&env)?;
    let library = Arc::new(ChunkLibrary::build(config.library)?);
    let prior = SurrogatePrior::new(config.prior, library)?;
    let mut models = Vec::new();
    let values: Vec<Option<LoadedValue>> = config
        .methods
        .iter()
        .map(|m| load_values(m, prior.latent_dim(), &mut models))
        .collect::<Result<_>>()?;
    let layouts = select_layouts(&env, &config.tasks, &config.inits)?;
    let jobs: Vec<(u32, usize, usize, usize)> = layouts
        .iter()
        .flat_map(|&(t, i)| (0..config.rollouts).flat_map(move |r| (0..config.methods.len()).map(move |m| (t, i, r, m))))
        .collect();
    let log: Vec<EpisodeRecord> = jobs
        .par_iter()
        .map(|&(task_id, init_id, rollout, m)| {
            let seed = derive_seed(config.seed, &[u64::from(task_id), init_id as u64, rollout as u64]);
            let method = &config.methods[m];
            let (outcome, calls) = match &method.search {
                None => {
                    let mut rng = stream(seed, &[]);
                    (run_episode(&env, task_id, init_id, &prior, &mut rng)?.outcome, None)
                }
                Some(s) => {
                    let s = SearchConfig { seed, ..*s };
                    let value = values[m].as_ref().map(LoadedValue::as_dyn);
                    let ep = act_episode(&env, task_id, init_id, &s, &prior, value)?;
                    (ep.outcome, Some(ep.calls))
                }
            };
            Ok(EpisodeRecord {
                method: m,
                task_id,
                family: env.task(task_id)?.family,
                init_id,
                rollout,
                outcome,
                calls,
            })
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = config.methods.iter().map(|m| m.name.clone()).collect();
    let table = MetricsTable::from_log(&names, &log)?;
    Ok(ExperimentRun {
        config: config.clone(),
        table,
        log,
        models,
    })
}

fn bool01(b: bool) -> u8 {
    u8::from(b)
}

pub fn episodes_csv(run: &ExperimentRun) -> String {
    let mut out =
        String::from("method,task_id,family,init_id,rollout,success,decisions,low_level_steps,search_calls,simulations\n");
    for r in &run.log {
        let (calls, sims) = match &r.calls {
            Some(c) => (c.len().to_string(), c.iter().map(|c| c.simulations).sum::<usize>().to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{calls},{sims}",
            run.config.methods[r.method].name,
            r.task_id,
            r.family,
            r.init_id,
            r.rollout,
            bool01(r.outcome.is_success()),
            r.outcome.decisions,
            r.outcome.low_level_steps,
        );
    }
    out
}

pub fn search_calls_csv(run: &ExperimentRun) -> String {
    let mut out = String::from("method,task_id,init_id,rollout,call,simulations,success_found,plan_verified\n");
    for r in &run.log {
        for (i, c) in r.calls.iter().flatten().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{i},{},{},{}",
                run.config.methods[r.method].name,
                r.task_id,
                r.init_id,
                r.rollout,
                c.simulations,
                bool01(c.success_found),
                bool01(c.plan_verified),
            );
        }
    }
    out
}

#[derive(Serialize)]
struct FileRef {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    models: &'a [ModelRef],
    files: Vec<FileRef>,
}

/// Writes the run directory. Every file except `metadata.json` is a pure
/// function of the run.
pub fn write_run_dir(run: &ExperimentRun, dir: &Path, elapsed_secs: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // Where a run is written is not part of what it computes.
    let snapshot = ExperimentConfig {
        output: None,
        ..run.config.clone()
    };
    let files = [
        ("config.json", snapshot.to_json() + "\n"),
        ("episodes.csv", episodes_csv(run)),
        ("search_calls.csv", search_calls_csv(run)),
        ("metrics.csv", render_table(&run.table, TableFormat::Csv)),
        ("metrics.md", render_table(&run.table, TableFormat::Markdown)),
    ];
    let mut refs = Vec::new();
    for (name, text) in &files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        refs.push(FileRef {
            file: name.to_string(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = Manifest {
        models: &run.models,
        files: refs,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let finished = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({
        "finished_unix_secs": finished,
        "elapsed_secs": elapsed_secs,
        "crate_version": env!("CARGO_PKG_VERSION"),
    });
    let path = dir.join("metadata.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("json") + "\n").map_err(|e| Error::io(&path, e))
}

/// Runs the experiment and writes its directory.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<ExperimentRun> {
    let start = Instant::now();
    let run = run_experiment(config)?;
    write_run_dir(&run, dir, start.elapsed().as_secs_f64())?;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub decision: usize,
    pub step_index: u32,
    pub value: f64,
}

/// Predicted values along one prior-only episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTrace {
    pub task_id: u32,
    pub init_id: usize,
    pub success: bool,
    /// One point per decision plus the final state.
    pub points: Vec<TracePoint>,
}

impl ValueTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("decision,step_index,value\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.decision, p.step_index, p.value);
        }
        out
    }

    /// The final state's value is the largest along the trace.
    pub fn ends_at_max(&self) -> bool {
        match self.points.last() {
            Some(last) => self.points.iter().all(|p| p.value <= last.value),
            None => false,
        }
    }
}

pub fn value_trace(
    env: &ChunkGrid,
    task_id: u32,
    init_id: usize,
    head: &ValueHead,
    prior: &dyn Prior,
    rng: &mut dyn rand::RngCore,
) -> Result<ValueTrace> {
    let trace = run_episode(env, task_id, init_id, prior, rng)?;
    let points = trace
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(TracePoint {
                decision: i,
                step_index: r.step_index,
                value: head.value(&r.readout)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ValueTrace {
        task_id,
        init_id,
        success: trace.outcome.is_success(),
        points,
    })
}

/// Latent readouts with their targets for external projection:
/// `task_id,init_id,t,G,h_0,...,h_{d-1}`.
pub fn export_latents(dataset: &ValueDataset) -> String {
    let mut out = String::from("task_id,init_id,t,G");
    for i in 0..dataset.d {
        let _ = write!(out, ",h_{i}");
    }
    out.push('\n');
    for ex in &dataset.examples {
        let _ = write!(out, "{},{},{},{}", ex.task_id, ex.init_id, ex.t, ex.g);
        for x in &ex.h.0 {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

pub fn export_latents_file(dataset: &Path, out: &Path) -> Result<usize> {
    let data = ValueDataset::load(dataset)?;
    std::fs::write(out, export_latents(&data)).map_err(|e| Error::io(out, e))?;
    Ok(data.len())
}
