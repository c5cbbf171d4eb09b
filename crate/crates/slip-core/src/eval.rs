//! Retrieval metrics and embedding-space structure analysis.
//!
//! Cross-modal retrieval ranks every candidate by dot-product similarity.
//! Ties are scored pessimistically: the true match ranks below every
//! candidate with an equal score, so inflated metrics cannot come from
//! degenerate constant embeddings. Hop-similarity analysis aggregates the
//! cross-modal similarity of node pairs grouped by graph distance.

use crate::error::{Result, SlipError};
use crate::graph::{hop_distance_matrix, InstanceGraph};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Retrieval direction: image query against text candidates, or the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::ImageToText => write!(f, "i2t"),
            Direction::TextToImage => write!(f, "t2i"),
        }
    }
}

impl FromStr for Direction {
    type Err = SlipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Direction::ImageToText),
            "t2i" => Ok(Direction::TextToImage),
            other => Err(SlipError::InvalidInput(format!(
                "unknown direction '{}', expected 'i2t' or 't2i'",
                other
            ))),
        }
    }
}

/// Cutoffs reported by recall@K.
pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

/// Retrieval metrics for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub direction: Direction,
    pub mrr: f64,
    /// Recall at each cutoff in [`RECALL_CUTOFFS`].
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    /// Lower median: the element at index floor((n-1)/2) of the sorted ranks.
    pub median_rank: f64,
}

/// Rank of each query's true match, 1-based, with pessimistic tie handling:
/// rank = 1 + (candidates scoring strictly higher) + (other candidates tied).
fn true_match_ranks(queries: &Tensor, candidates: &Tensor) -> Vec<usize> {
    let n = queries.rows();
    let scores = queries
        .matmul(&candidates.transpose())
        .expect("shapes checked by caller");
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let own = scores.get(i, i);
        let mut rank = 1;
        for j in 0..n {
            if j == i {
                continue;
            }
            if scores.get(i, j) >= own {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    ranks
}

fn metrics_from_ranks(direction: Direction, ranks: &[usize]) -> RetrievalResult {
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let mut recall_at = BTreeMap::new();
    for k in RECALL_CUTOFFS {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        recall_at.insert(k, hits as f64 / n);
    }
    let mean_rank = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let median_rank = sorted[(sorted.len() - 1) / 2] as f64;
    RetrievalResult {
        direction,
        mrr,
        recall_at,
        mean_rank,
        median_rank,
    }
}

/// Evaluate both retrieval directions over matched embedding matrices.
/// Row i of `e_v` and row i of `e_t` must describe the same item.
pub fn retrieval_eval(e_v: &Tensor, e_t: &Tensor) -> Result<(RetrievalResult, RetrievalResult)> {
    if e_v.shape() != e_t.shape() {
        return Err(SlipError::Shape(format!(
            "embedding shapes differ: {}x{} vs {}x{}",
            e_v.rows(),
            e_v.cols(),
            e_t.rows(),
            e_t.cols()
        )));
    }
    if e_v.rows() == 0 {
        return Err(SlipError::InvalidInput("cannot evaluate zero items".into()));
    }
    let i2t = metrics_from_ranks(
        Direction::ImageToText,
        &true_match_ranks(e_v, e_t),
    );
    let t2i = metrics_from_ranks(
        Direction::TextToImage,
        &true_match_ranks(e_t, e_v),
    );
    Ok((i2t, t2i))
}

/// Format retrieval results as a tab-separated metrics report: a header plus
/// one row per direction.
pub fn metrics_table(results: &[&RetrievalResult]) -> Vec<String> {
    let mut lines = vec!["direction\tmrr\tr@1\tr@5\tr@10\tmean_rank\tmedian_rank".to_string()];
    for r in results {
        lines.push(format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.direction,
            r.mrr,
            r.recall_at[&1],
            r.recall_at[&5],
            r.recall_at[&10],
            r.mean_rank,
            r.median_rank
        ));
    }
    lines
}

/// One row of a ranked candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    /// Candidate index (into the evaluated set).
    pub node: usize,
    pub score: f64,
    /// Whether this candidate is the query's true match.
    pub is_match: bool,
}

/// Top-k candidates for one query, ordered by descending score. Among tied
/// scores the true match sorts last, consistent with the pessimistic ranks of
/// [`retrieval_eval`]; remaining ties order by candidate index.
pub fn dump_ranked_list(
    e_v: &Tensor,
    e_t: &Tensor,
    query: usize,
    direction: Direction,
    k: usize,
) -> Result<Vec<RankedEntry>> {
    if e_v.shape() != e_t.shape() {
        return Err(SlipError::Shape(format!(
            "embedding shapes differ: {}x{} vs {}x{}",
            e_v.rows(),
            e_v.cols(),
            e_t.rows(),
            e_t.cols()
        )));
    }
    let n = e_v.rows();
    if query >= n {
        return Err(SlipError::InvalidInput(format!(
            "query {} out of range for {} items",
            query, n
        )));
    }
    if k == 0 {
        return Err(SlipError::InvalidInput("k must be at least 1".into()));
    }
    let (queries, candidates) = match direction {
        Direction::ImageToText => (e_v, e_t),
        Direction::TextToImage => (e_t, e_v),
    };
    let mut entries: Vec<RankedEntry> = (0..n)
        .map(|j| {
            let score: f64 = queries
                .row(query)
                .iter()
                .zip(candidates.row(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            RankedEntry {
                node: j,
                score,
                is_match: j == query,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| a.is_match.cmp(&b.is_match))
            .then_with(|| a.node.cmp(&b.node))
    });
    entries.truncate(k);
    Ok(entries)
}

/// Similarity statistics of node pairs at one graph distance.
#[derive(Debug, Clone, PartialEq)]
pub struct HopGroup {
    /// Graph distance; hop 0 is the matched image/text pair of one node.
    pub hop: u32,
    /// Number of pairs aggregated (after budget sampling).
    pub pairs: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Similarity histogram: 101 equal bins over [-1, 1].
    pub histogram: Vec<usize>,
    /// The raw similarities behind the summary, in pair-collection order,
    /// kept so density plots can be drawn outside the engine.
    pub samples: Vec<f64>,
}

/// Hop-similarity table over hops `0..=max_hop`.
#[derive(Debug, Clone, PartialEq)]
pub struct HopSimilarityTable {
    pub groups: Vec<HopGroup>,
}

/// Number of histogram bins over the similarity range [-1, 1].
pub const HISTOGRAM_BINS: usize = 101;

fn histogram_bin(s: f64) -> usize {
    let clamped = s.clamp(-1.0, 1.0);
    (((clamped + 1.0) / 2.0) * HISTOGRAM_BINS as f64).min(HISTOGRAM_BINS as f64 - 1.0) as usize
}

/// Cross-modal similarity by graph distance.
///
/// For every unordered node pair (i, j) at hop distance g in `graph`
/// (distances computed over the whole graph), the cross-modal similarity
/// `e_v[i] . e_t[j]` is assigned to group g; hop 0 collects the matched pairs
/// `e_v[i] . e_t[i]`. Groups 2 and above are uniformly subsampled down to
/// `sample_budget` pairs with the given seed. Embeddings should be unit-norm
/// for the similarity to be a cosine; values are clamped into [-1, 1] for the
/// histogram either way.
pub fn hop_similarity_analysis(
    e_v: &Tensor,
    e_t: &Tensor,
    graph: &InstanceGraph,
    max_hop: u32,
    sample_budget: usize,
    seed: u64,
) -> Result<HopSimilarityTable> {
    if e_v.shape() != e_t.shape() {
        return Err(SlipError::Shape(format!(
            "embedding shapes differ: {}x{} vs {}x{}",
            e_v.rows(),
            e_v.cols(),
            e_t.rows(),
            e_t.cols()
        )));
    }
    let n = graph.n();
    if e_v.rows() != n {
        return Err(SlipError::Shape(format!(
            "{} embedding rows for a graph of {} nodes",
            e_v.rows(),
            n
        )));
    }
    if max_hop == 0 {
        return Err(SlipError::InvalidInput("max hop must be at least 1".into()));
    }
    if sample_budget == 0 {
        return Err(SlipError::InvalidInput(
            "sample budget must be at least 1".into(),
        ));
    }

    // Distances over the full graph.
    let nodes: Vec<usize> = (0..n).collect();
    let dists = hop_distance_matrix(graph, &nodes, max_hop)?;

    // Collect unordered pairs per hop group.
    let mut pairs_by_hop: Vec<Vec<(usize, usize)>> = vec![Vec::new(); max_hop as usize + 1];
    for i in 0..n {
        pairs_by_hop[0].push((i, i));
        for j in i + 1..n {
            let d = dists.get(i, j);
            if d >= 1 && d <= max_hop {
                pairs_by_hop[d as usize].push((i, j));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(max_hop as usize + 1);
    for (hop, pairs) in pairs_by_hop.iter_mut().enumerate() {
        // Budget-subsample distant groups, which grow quadratically.
        if hop >= 2 && pairs.len() > sample_budget {
            for i in 0..sample_budget {
                let j = rng.gen_range(i..pairs.len());
                pairs.swap(i, j);
            }
            pairs.truncate(sample_budget);
        }
        let mut sims = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs.iter() {
            let s: f64 = e_v
                .row(i)
                .iter()
                .zip(e_t.row(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            sims.push(s);
        }
        let mut histogram = vec![0usize; HISTOGRAM_BINS];
        for &s in &sims {
            histogram[histogram_bin(s)] += 1;
        }
        let (mean, std) = if sims.is_empty() {
            (0.0, 0.0)
        } else {
            let m = sims.iter().sum::<f64>() / sims.len() as f64;
            let var = sims.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / sims.len() as f64;
            (m, var.sqrt())
        };
        groups.push(HopGroup {
            hop: hop as u32,
            pairs: sims.len(),
            mean,
            std,
            histogram,
            samples: sims,
        });
    }
    Ok(HopSimilarityTable { groups })
}
