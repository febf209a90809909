//! Action chunks, the preset chunk library, flattened euclidean chunk
//! distances, and softmax-over-distance proposal distributions.
//!
//! A chunk of `H` low-level actions is flattened into an `H·3` vector by
//! concatenating per-action embeddings `(Δx, Δy, gripper)`. Proposal
//! distributions put mass `∝ exp(−d(center, c) / τ)` on each chunk `c`.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::LowLevelAction;
use crate::rng::stream;
use crate::{Error, Result};

pub const EMBED_DIM: usize = 3;
pub const DEFAULT_CHUNK_LEN: usize = 4;
pub const DEFAULT_LIBRARY_SIZE: usize = 64;

pub fn action_embedding(action: LowLevelAction) -> [f64; EMBED_DIM] {
    match action {
        LowLevelAction::Up => [0.0, 1.0, 0.0],
        LowLevelAction::Down => [0.0, -1.0, 0.0],
        LowLevelAction::Left => [-1.0, 0.0, 0.0],
        LowLevelAction::Right => [1.0, 0.0, 0.0],
        LowLevelAction::Grasp => [0.0, 0.0, 1.0],
        LowLevelAction::Release => [0.0, 0.0, -1.0],
        LowLevelAction::Noop => [0.0, 0.0, 0.0],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionChunk(Vec<LowLevelAction>);

impl ActionChunk {
    pub fn new(actions: Vec<LowLevelAction>) -> Self {
        Self(actions)
    }

    pub fn repeat(action: LowLevelAction, len: usize) -> Self {
        Self(vec![action; len])
    }

    pub fn actions(&self) -> &[LowLevelAction] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn embed(&self) -> Vec<f64> {
        embed_chunk(self)
    }
}

impl std::fmt::Display for ActionChunk {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<_> = self.0.iter().map(|a| a.name()).collect();
        write!(f, "[{}]", names.join(" "))
    }
}

pub fn embed_chunk(chunk: &ActionChunk) -> Vec<f64> {
    chunk.0.iter().flat_map(|&a| action_embedding(a)).collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// L2 distance between flattened chunk embeddings.
pub fn chunk_distance(a: &ActionChunk, b: &ActionChunk) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::usage(format!(
            "chunk length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(euclidean(&embed_chunk(a), &embed_chunk(b)))
}

/// A distribution over chunks. `support` holds chunk indices (into the
/// library, or into a candidate list for [`psi_distribution`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkDistribution {
    pub support: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ChunkDistribution {
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn prob_of(&self, index: usize) -> Option<f64> {
        self.support
            .iter()
            .position(|&s| s == index)
            .map(|i| self.probs[i])
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("softmax temperature must be > 0, got {tau}")))
    }
}

/// `softmax(−d / τ)`, shifted by the minimum distance for stability.
fn softmax_neg(distances: &[f64], tau: f64) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = distances.iter().map(|d| (-(d - min) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryConfig {
    pub size: usize,
    pub chunk_len: usize,
    pub seed: u64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_LIBRARY_SIZE,
            chunk_len: DEFAULT_CHUNK_LEN,
            seed: 0,
        }
    }
}

/// The preset, finite set of chunks the prior and the search draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkLibrary {
    chunk_len: usize,
    chunks: Vec<ActionChunk>,
    embeddings: Vec<Vec<f64>>,
    /// Row-major `M × M` pairwise distances.
    distances: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LibraryFile {
    chunk_len: usize,
    chunks: Vec<ActionChunk>,
}

impl ChunkLibrary {
    /// Builds the default library layout:
    ///
    /// 1. the seven single-action repetitions,
    /// 2. reach-then-act primitives `[d^k, g, Noop…]` for every move `d`,
    ///    `k ∈ 1..H`, gripper command `g ∈ {Grasp, Release}`, plus `[g, Noop…]`,
    /// 3. seeded uniformly random chunks until `size` distinct chunks exist.
    pub fn build(config: LibraryConfig) -> Result<Self> {
        let h = config.chunk_len;
        if h < 2 {
            return Err(Error::config("chunk_len must be at least 2"));
        }
        if config.size < LowLevelAction::ALL.len() {
            return Err(Error::config(format!(
                "library size must be at least {}",
                LowLevelAction::ALL.len()
            )));
        }
        let max_distinct = (LowLevelAction::ALL.len() as f64).powi(h as i32);
        if config.size as f64 > max_distinct {
            return Err(Error::config("library size exceeds the number of distinct chunks"));
        }

        let mut chunks: Vec<ActionChunk> = LowLevelAction::ALL
            .iter()
            .map(|&a| ActionChunk::repeat(a, h))
            .collect();
        let mut structured = Vec::new();
        for g in [LowLevelAction::Grasp, LowLevelAction::Release] {
            let mut base = vec![g];
            base.resize(h, LowLevelAction::Noop);
            structured.push(ActionChunk::new(base));
        }
        for g in [LowLevelAction::Grasp, LowLevelAction::Release] {
            for d in LowLevelAction::MOVES {
                for k in 1..h {
                    let mut actions = vec![d; k];
                    actions.push(g);
                    actions.resize(h, LowLevelAction::Noop);
                    structured.push(ActionChunk::new(actions));
                }
            }
        }
        let mut seen: HashSet<ActionChunk> = chunks.iter().cloned().collect();
        for c in structured {
            if chunks.len() >= config.size {
                break;
            }
            if seen.insert(c.clone()) {
                chunks.push(c);
            }
        }
        let mut rng = stream(config.seed, &[0x11b]);
        while chunks.len() < config.size {
            let c = ActionChunk::new(
                (0..h)
                    .map(|_| LowLevelAction::ALL[rng.gen_range(0..LowLevelAction::ALL.len())])
                    .collect(),
            );
            if seen.insert(c.clone()) {
                chunks.push(c);
            }
        }
        Self::from_chunks(chunks)
    }

    pub fn from_chunks(chunks: Vec<ActionChunk>) -> Result<Self> {
        let chunk_len = chunks
            .first()
            .map(ActionChunk::len)
            .ok_or_else(|| Error::config("empty chunk library"))?;
        if chunk_len == 0 || chunks.iter().any(|c| c.len() != chunk_len) {
            return Err(Error::config("library chunks must share one non-zero length"));
        }
        let embeddings: Vec<Vec<f64>> = chunks.iter().map(embed_chunk).collect();
        let mut seen = HashSet::new();
        for e in &embeddings {
            let key: Vec<u64> = e.iter().map(|x| x.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::config("library contains duplicate chunk embeddings"));
            }
        }
        let m = chunks.len();
        let mut distances = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                distances[i * m + j] = euclidean(&embeddings[i], &embeddings[j]);
            }
        }
        Ok(Self {
            chunk_len,
            chunks,
            embeddings,
            distances,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn chunks(&self) -> &[ActionChunk] {
        &self.chunks
    }

    pub fn chunk(&self, index: usize) -> &ActionChunk {
        &self.chunks[index]
    }

    pub fn embedding(&self, index: usize) -> &[f64] {
        &self.embeddings[index]
    }

    pub fn index_of(&self, chunk: &ActionChunk) -> Option<usize> {
        self.chunks.iter().position(|c| c == chunk)
    }

    /// Precomputed distance between library entries `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.chunks.len() + j]
    }

    /// β over the whole library, centred on library entry `center`.
    pub fn beta_at(&self, center: usize, tau: f64) -> Result<ChunkDistribution> {
        check_tau(tau)?;
        let m = self.len();
        let d = &self.distances[center * m..(center + 1) * m];
        Ok(ChunkDistribution {
            support: (0..m).collect(),
            probs: softmax_neg(d, tau),
        })
    }

    /// ψ restricted to the library entries in `candidates`.
    pub fn psi_at(&self, candidates: &[usize], center: usize, tau: f64) -> Result<ChunkDistribution> {
        check_tau(tau)?;
        if candidates.is_empty() {
            return Err(Error::usage("psi over an empty candidate set"));
        }
        let d: Vec<f64> = candidates.iter().map(|&c| self.distance(center, c)).collect();
        Ok(ChunkDistribution {
            support: candidates.to_vec(),
            probs: softmax_neg(&d, tau),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LibraryFile {
            chunk_len: self.chunk_len,
            chunks: self.chunks.clone(),
        })
        .expect("library serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: LibraryFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let lib = Self::from_chunks(file.chunks)?;
        if lib.chunk_len != file.chunk_len {
            return Err(Error::config("chunk_len does not match stored chunks"));
        }
        Ok(lib)
    }
}

/// β: softmax over the negative distances from `center` to every library
/// chunk. `center` need not be a library member.
pub fn beta_distribution(center: &ActionChunk, library: &ChunkLibrary, tau: f64) -> Result<ChunkDistribution> {
    check_tau(tau)?;
    let d = library
        .chunks()
        .iter()
        .map(|c| chunk_distance(center, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkDistribution {
        support: (0..library.len()).collect(),
        probs: softmax_neg(&d, tau),
    })
}

/// ψ: the same softmax restricted to, and renormalised over, `candidates`.
/// The support indexes into `candidates`.
pub fn psi_distribution(candidates: &[ActionChunk], center: &ActionChunk, tau: f64) -> Result<ChunkDistribution> {
    check_tau(tau)?;
    if candidates.is_empty() {
        return Err(Error::usage("psi over an empty candidate set"));
    }
    let d = candidates
        .iter()
        .map(|c| chunk_distance(center, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkDistribution {
        support: (0..candidates.len()).collect(),
        probs: softmax_neg(&d, tau),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use LowLevelAction::*;

    fn c(a: &[LowLevelAction]) -> ActionChunk {
        ActionChunk::new(a.to_vec())
    }

    fn arb_chunk() -> impl Strategy<Value = ActionChunk> {
        prop::collection::vec(0usize..7, 4).prop_map(|ix| ActionChunk::new(ix.into_iter().map(|i| LowLevelAction::ALL[i]).collect()))
    }

    #[test]
    fn embeddings() {
        assert_eq!(embed_chunk(&c(&[Noop; 4])), vec![0.0; 12]);
        assert_eq!(
            embed_chunk(&c(&[Up; 4])),
            [0.0, 1.0, 0.0].repeat(4)
        );
        assert_ne!(embed_chunk(&c(&[Up, Up, Up, Up])), embed_chunk(&c(&[Up, Up, Up, Grasp])));
    }

    #[test]
    fn distances() {
        let a = c(&[Up, Left, Grasp, Noop]);
        assert_eq!(chunk_distance(&a, &a).unwrap(), 0.0);
        // sqrt(4 · (1 − (−1))²) = 4
        assert_eq!(chunk_distance(&c(&[Up; 4]), &c(&[Down; 4])).unwrap(), 4.0);
        let b = c(&[Right, Right, Release, Up]);
        assert_eq!(chunk_distance(&a, &b).unwrap(), chunk_distance(&b, &a).unwrap());
        assert!(matches!(chunk_distance(&a, &c(&[Up; 3])), Err(Error::Usage(_))));
    }

    #[test]
    fn beta_three_chunk_library() {
        // Distances from the centre: 0, 1, 2.
        let lib = ChunkLibrary::from_chunks(vec![c(&[Noop; 4]), c(&[Up, Noop, Noop, Noop]), c(&[Up; 4])]).unwrap();
        let beta = beta_distribution(&c(&[Noop; 4]), &lib, 1.0).unwrap();
        let expected = [0.6652409557748218, 0.24472847105479764, 0.09003057317038046];
        for (p, e) in beta.probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-12, "{p} vs {e}");
        }
        assert_eq!(lib.beta_at(0, 1.0).unwrap(), beta);
    }

    #[test]
    fn beta_uniform_when_equidistant() {
        let lib = ChunkLibrary::from_chunks(vec![c(&[Up; 4]), c(&[Down; 4]), c(&[Left; 4]), c(&[Right; 4])]).unwrap();
        let beta = beta_distribution(&c(&[Noop; 4]), &lib, 0.7).unwrap();
        for p in &beta.probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_concentrates_as_tau_shrinks() {
        let lib = ChunkLibrary::build(LibraryConfig::default()).unwrap();
        let center = lib.chunk(10).clone();
        let beta = beta_distribution(&center, &lib, 1e-3).unwrap();
        assert!(beta.probs[10] > 1.0 - 1e-12);
    }

    #[test]
    fn bad_tau_is_config_error() {
        let lib = ChunkLibrary::build(LibraryConfig::default()).unwrap();
        assert!(matches!(beta_distribution(&c(&[Up; 4]), &lib, 0.0), Err(Error::Config(_))));
        assert!(matches!(lib.beta_at(0, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn psi_examples() {
        let center = c(&[Noop; 4]);
        let one = psi_distribution(&[c(&[Up; 4])], &center, 1.0).unwrap();
        assert_eq!(one.probs, vec![1.0]);
        let eq = psi_distribution(&[c(&[Up; 4]), c(&[Left; 4])], &center, 1.0).unwrap();
        assert!((eq.probs[0] - 0.5).abs() < 1e-12 && (eq.probs[1] - 0.5).abs() < 1e-12);
        // Distances 0 and 2.
        let two = psi_distribution(&[center.clone(), c(&[Up; 4])], &center, 1.0).unwrap();
        assert!((two.probs[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((two.probs[1] - 0.11920292202211755).abs() < 1e-12);
        assert!(matches!(psi_distribution(&[], &center, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn default_library_shape() {
        let lib = ChunkLibrary::build(LibraryConfig::default()).unwrap();
        assert_eq!(lib.len(), 64);
        assert_eq!(lib.chunk_len(), 4);
        for a in LowLevelAction::ALL {
            assert!(lib.index_of(&ActionChunk::repeat(a, 4)).is_some());
        }
        assert!(lib.index_of(&c(&[Right, Right, Grasp, Noop])).is_some());
        assert_eq!(lib, ChunkLibrary::build(LibraryConfig::default()).unwrap());
        let other = ChunkLibrary::build(LibraryConfig { seed: 9, ..Default::default() }).unwrap();
        assert_ne!(lib, other);
    }

    #[test]
    fn duplicate_chunks_rejected() {
        assert!(ChunkLibrary::from_chunks(vec![c(&[Up; 4]), c(&[Up; 4])]).is_err());
    }

    #[test]
    fn library_json_round_trip() {
        let lib = ChunkLibrary::build(LibraryConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.json");
        lib.save(&path).unwrap();
        assert_eq!(ChunkLibrary::load(&path).unwrap(), lib);
        assert!(lib.to_json().contains("\"Grasp\""));
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in arb_chunk(), b in arb_chunk(), c in arb_chunk()) {
            let ab = chunk_distance(&a, &b).unwrap();
            let bc = chunk_distance(&b, &c).unwrap();
            let ac = chunk_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn beta_is_a_distribution_and_permutation_equivariant(
            center in arb_chunk(),
            tau in 0.05f64..5.0,
            shift in 0usize..64,
        ) {
            let lib = ChunkLibrary::build(LibraryConfig::default()).unwrap();
            let beta = beta_distribution(&center, &lib, tau).unwrap();
            prop_assert!((beta.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(beta.probs.iter().all(|&p| p >= 0.0));

            let mut rotated = lib.chunks().to_vec();
            rotated.rotate_left(shift);
            let rlib = ChunkLibrary::from_chunks(rotated).unwrap();
            let rbeta = beta_distribution(&center, &rlib, tau).unwrap();
            for i in 0..lib.len() {
                let j = (i + lib.len() - shift) % lib.len();
                prop_assert!((beta.probs[i] - rbeta.probs[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn psi_is_beta_conditioned_on_candidates(
            center in 0usize..64,
            mask in prop::collection::vec(any::<bool>(), 64),
            tau in 0.05f64..5.0,
        ) {
            let lib = ChunkLibrary::build(LibraryConfig::default()).unwrap();
            let subset: Vec<usize> = (0..64).filter(|&i| mask[i]).collect();
            prop_assume!(!subset.is_empty());
            let beta = lib.beta_at(center, tau).unwrap();
            let psi = lib.psi_at(&subset, center, tau).unwrap();
            let mass: f64 = subset.iter().map(|&i| beta.probs[i]).sum();
            prop_assert!((psi.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (k, &i) in subset.iter().enumerate() {
                prop_assert!((psi.probs[k] - beta.probs[i] / mass).abs() < 1e-9);
            }
        }
    }
}
