//! Monte Carlo tree search over action chunks.
//!
//! Edges are scored `Q + U` with `U = ψ·sqrt(N)/(1+N)`. In value-guided mode
//! `Q` is the value head's estimate of the child state, computed once when
//! the child is created. In the baseline mode `Q` is the mean backed-up
//! return `W/N` (0 while unvisited).
//!
//! Note that `U` vanishes at `N = 0`, so unvisited edges are ranked purely
//! by `Q`, and ties (all zero in the baseline) go to the lowest edge index.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::chunks::ActionChunk;
use crate::collect::EpisodeOutcome;
use crate::envsim::{ChunkGrid, EnvState, Observation};
use crate::prior::{LatentReadout, Prior};
use crate::rng::{derive_seed, stream};
use crate::valuehead::ValueHead;
use crate::{Error, Result};

pub const DEFAULT_BUDGET: usize = 32;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SearchMode {
    /// Visit-count search with backed-up returns as `Q`.
    #[serde(rename = "vlaps")]
    Vlaps,
    /// Value-guided search: `Q` is the learned value of the child state.
    #[serde(rename = "v-vlaps")]
    VVlaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Maximum simulations (restarts from the root) per search call.
    pub budget: usize,
    /// Candidates per expansion.
    pub k: usize,
    /// Maximum rollout length in chunks; `None` runs to the end of the episode.
    pub rollout_depth: Option<usize>,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::VVlaps,
            budget: DEFAULT_BUDGET,
            k: DEFAULT_K,
            rollout_depth: None,
            gamma: crate::collect::DEFAULT_GAMMA,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::config("search budget must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Estimates the value of a state for value-guided search.
pub trait ValueFunction: Send + Sync {
    fn value(&self, readout: &LatentReadout, state: &EnvState) -> Result<f64>;
}

impl ValueFunction for ValueHead {
    fn value(&self, readout: &LatentReadout, _state: &EnvState) -> Result<f64> {
        ValueHead::value(self, readout)
    }
}

pub fn u_term(psi: f64, n: u32) -> f64 {
    let n = f64::from(n);
    psi * n.sqrt() / (1.0 + n)
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Library index of the chunk.
    pub chunk: usize,
    pub psi: f64,
    pub n: u32,
    pub w: f64,
    pub child: Option<NodeId>,
    /// Value of the child state; only cached in value-guided mode.
    pub child_value: Option<f64>,
}

impl Edge {
    pub fn new(chunk: usize, psi: f64) -> Self {
        Self {
            chunk,
            psi,
            n: 0,
            w: 0.0,
            child: None,
            child_value: None,
        }
    }
}

pub fn edge_score(edge: &Edge, mode: SearchMode) -> Result<f64> {
    let q = match mode {
        SearchMode::VVlaps => edge
            .child_value
            .ok_or_else(|| Error::Invariant("value-guided score on an edge without a cached value".into()))?,
        SearchMode::Vlaps => {
            if edge.n > 0 {
                edge.w / f64::from(edge.n)
            } else {
                0.0
            }
        }
    };
    Ok(q + u_term(edge.psi, edge.n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub state: EnvState,
    pub obs: Observation,
    pub terminal: bool,
    pub reward: u8,
    pub edges: Vec<Edge>,
    pub expanded: bool,
    /// Simulations whose rollout started at this node.
    pub leaf_visits: u32,
    pub depth: usize,
}

impl SearchNode {
    fn new(state: EnvState, depth: usize) -> Self {
        Self {
            obs: state.observation(),
            terminal: state.is_terminal(),
            reward: state.reward(),
            state,
            edges: Vec::new(),
            expanded: false,
            leaf_visits: 0,
            depth,
        }
    }
}

/// Arena-allocated search tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
}

impl SearchTree {
    pub fn new(root: EnvState) -> Self {
        Self {
            nodes: vec![SearchNode::new(root, 0)],
        }
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    /// Index of the highest-scoring edge, lowest index on ties.
    pub fn select(&self, node: NodeId, mode: SearchMode) -> Result<usize> {
        let n = &self.nodes[node];
        if !n.expanded || n.edges.is_empty() {
            return Err(Error::usage("select on an unexpanded node"));
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, e) in n.edges.iter().enumerate() {
            let s = edge_score(e, mode)?;
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        Ok(best)
    }

    /// Draws K candidates, steps a copy of the node state through each, and
    /// attaches the children. In value-guided mode each child's value is
    /// evaluated and cached.
    pub fn expand(
        &mut self,
        node: NodeId,
        prior: &dyn Prior,
        value: Option<&dyn ValueFunction>,
        mode: SearchMode,
        k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let n = &self.nodes[node];
        if n.terminal {
            return Err(Error::usage("expand on a terminal node"));
        }
        if n.expanded {
            return Err(Error::usage("node already expanded"));
        }
        let value = match (mode, value) {
            (SearchMode::VVlaps, None) => {
                return Err(Error::config("value-guided search needs a value function"));
            }
            (SearchMode::VVlaps, v) => v,
            (SearchMode::Vlaps, _) => None,
        };
        let state = n.state.clone();
        let depth = n.depth + 1;
        let cands = prior.sample_candidates(&n.obs, state.task(), k, rng)?;
        let mut edges = Vec::with_capacity(cands.chunks.len());
        for (&chunk, &psi) in cands.chunks.iter().zip(&cands.psi.probs) {
            let transition = state.step_chunk(prior.library().chunk(chunk))?;
            let child_value = match value {
                Some(v) => {
                    let h = prior.readout(&transition.observation, transition.state.task());
                    Some(v.value(&h, &transition.state)?)
                }
                None => None,
            };
            let id = self.nodes.len();
            self.nodes.push(SearchNode::new(transition.state, depth));
            edges.push(Edge {
                child: Some(id),
                child_value,
                ..Edge::new(chunk, psi)
            });
        }
        let n = &mut self.nodes[node];
        n.edges = edges;
        n.expanded = true;
        Ok(())
    }

    /// `N += 1` and `W += γ^(edges below)·G` along `path` of `(node, edge)`.
    pub fn backpropagate(&mut self, path: &[(NodeId, usize)], g: f64, gamma: f64) {
        let mut discounted = g;
        for &(node, edge) in path.iter().rev() {
            let e = &mut self.nodes[node].edges[edge];
            e.n += 1;
            e.w += discounted;
            discounted *= gamma;
        }
    }

    /// Checks that every edge's visit count equals the simulations that
    /// ended at or passed through its child, and that the root accounts for
    /// `simulations`.
    pub fn check_visit_consistency(&self, simulations: usize) -> Result<()> {
        let through = |n: &SearchNode| n.leaf_visits as usize + n.edges.iter().map(|e| e.n as usize).sum::<usize>();
        if through(self.root()) != simulations {
            return Err(Error::Invariant(format!(
                "root accounts for {} simulations, expected {simulations}",
                through(self.root())
            )));
        }
        for node in &self.nodes {
            for e in &node.edges {
                let child = &self.nodes[e.child.expect("expanded edges have children")];
                if e.n as usize != through(child) {
                    return Err(Error::Invariant(format!(
                        "edge visited {} times but its child accounts for {}",
                        e.n,
                        through(child)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of a rollout: the discounted return, the chunks executed, and
/// whether the task was solved.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub ret: f64,
    pub chunks: Vec<usize>,
    pub success: bool,
}

/// Executes the prior's proposals from `state` until the episode ends or
/// `depth` chunks have run. Returns `γ^n` on success after `n` chunks.
pub fn rollout(
    state: &EnvState,
    prior: &dyn Prior,
    depth: Option<usize>,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<Rollout> {
    let mut s = state.clone();
    let mut chunks = Vec::new();
    let cap = depth.unwrap_or(usize::MAX);
    while !s.is_terminal() && chunks.len() < cap {
        let c = prior.propose_center(&s.observation(), s.task(), rng);
        s.apply_chunk(prior.library().chunk(c))?;
        chunks.push(c);
    }
    let success = s.reward() == 1;
    let ret = if success { gamma.powi(chunks.len() as i32) } else { 0.0 };
    Ok(Rollout { ret, chunks, success })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub chunk: usize,
    pub psi: f64,
    pub n: u32,
    pub w: f64,
    pub child_value: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Library indices: the full successful chunk sequence, or the single
    /// chosen root chunk.
    pub plan: Vec<usize>,
    pub simulations: usize,
    pub success_found: bool,
    pub root_edges: Vec<EdgeStats>,
    pub tree: SearchTree,
}

impl SearchResult {
    pub fn plan_chunks<'a>(&self, prior: &'a dyn Prior) -> Vec<&'a ActionChunk> {
        self.plan.iter().map(|&c| prior.library().chunk(c)).collect()
    }
}

/// Runs up to `config.budget` simulations from `root`. Each simulation
/// selects down the tree, expands the first unexpanded node it meets, steps
/// into the best new child and rolls out from there. The first simulated
/// trajectory that solves the task ends the search.
pub fn search(
    root: &EnvState,
    config: &SearchConfig,
    prior: &dyn Prior,
    value: Option<&dyn ValueFunction>,
) -> Result<SearchResult> {
    config.validate()?;
    if root.is_terminal() {
        return Err(Error::usage("search from a terminal state"));
    }
    if config.mode == SearchMode::VVlaps && value.is_none() {
        return Err(Error::config("value-guided search needs a value function"));
    }
    let mode = config.mode;
    let mut rng = stream(config.seed, &[]);
    let mut tree = SearchTree::new(root.clone());
    let mut path: Vec<(NodeId, usize)> = Vec::new();
    for sim in 1..=config.budget {
        path.clear();
        let mut cur = 0;
        while !tree.nodes[cur].terminal {
            let fresh = !tree.nodes[cur].expanded;
            if fresh {
                tree.expand(cur, prior, value, mode, config.k, &mut rng)?;
            }
            let e = tree.select(cur, mode)?;
            path.push((cur, e));
            cur = tree.nodes[cur].edges[e].child.expect("expanded edges have children");
            if fresh {
                break;
            }
        }
        let leaf = &tree.nodes[cur];
        let ro = rollout(&leaf.state, prior, config.rollout_depth, config.gamma, &mut rng)?;
        tree.nodes[cur].leaf_visits += 1;
        tree.backpropagate(&path, ro.ret, config.gamma);
        if ro.success {
            let mut plan: Vec<usize> = path.iter().map(|&(n, e)| tree.nodes[n].edges[e].chunk).collect();
            plan.extend(ro.chunks);
            return finish(tree, plan, sim, true, mode);
        }
    }
    let root_node = tree.root();
    let mut best = 0;
    for (i, e) in root_node.edges.iter().enumerate() {
        let b = &root_node.edges[best];
        if e.n > b.n || (e.n == b.n && edge_score(e, mode)? > edge_score(b, mode)?) {
            best = i;
        }
    }
    let plan = vec![root_node.edges[best].chunk];
    finish(tree, plan, config.budget, false, mode)
}

fn finish(tree: SearchTree, plan: Vec<usize>, simulations: usize, success_found: bool, mode: SearchMode) -> Result<SearchResult> {
    let root_edges = tree
        .root()
        .edges
        .iter()
        .map(|e| {
            Ok(EdgeStats {
                chunk: e.chunk,
                psi: e.psi,
                n: e.n,
                w: e.w,
                child_value: e.child_value,
                score: edge_score(e, mode)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SearchResult {
        plan,
        simulations,
        success_found,
        root_edges,
        tree,
    })
}

/// Statistics of one search call within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    pub simulations: usize,
    pub success_found: bool,
    /// Replaying the plan on a copy of the search root solved the task.
    /// Only meaningful when `success_found`.
    pub plan_verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEpisode {
    pub outcome: EpisodeOutcome,
    pub calls: Vec<CallStats>,
}

impl SearchEpisode {
    pub fn total_simulations(&self) -> usize {
        self.calls.iter().map(|c| c.simulations).sum()
    }
}

fn replay_solves(state: &EnvState, plan: &[usize], prior: &dyn Prior) -> Result<bool> {
    let mut s = state.clone();
    for &c in plan {
        if s.is_terminal() {
            break;
        }
        s.apply_chunk(prior.library().chunk(c))?;
    }
    Ok(s.reward() == 1)
}

/// Plays one episode, searching from the true state at every decision step.
/// A found plan is executed in full; otherwise the chosen root chunk is
/// executed and the search restarts. Call `i` uses seed
/// `derive_seed(config.seed, [i])`.
pub fn act_episode(
    env: &ChunkGrid,
    task_id: u32,
    init_id: usize,
    config: &SearchConfig,
    prior: &dyn Prior,
    value: Option<&dyn ValueFunction>,
) -> Result<SearchEpisode> {
    let (mut state, _) = env.reset(task_id, init_id)?;
    let mut calls = Vec::new();
    let mut decisions = 0;
    while !state.is_terminal() {
        let call_config = SearchConfig {
            seed: derive_seed(config.seed, &[calls.len() as u64]),
            ..*config
        };
        let result = search(&state, &call_config, prior, value)?;
        let plan_verified = result.success_found && replay_solves(&state, &result.plan, prior)?;
        calls.push(CallStats {
            simulations: result.simulations,
            success_found: result.success_found,
            plan_verified,
        });
        for &c in &result.plan {
            if state.is_terminal() {
                break;
            }
            state.apply_chunk(prior.library().chunk(c))?;
            decisions += 1;
        }
    }
    Ok(SearchEpisode {
        outcome: EpisodeOutcome {
            reward: state.reward(),
            decisions,
            low_level_steps: state.step_index(),
        },
        calls,
    })
}
