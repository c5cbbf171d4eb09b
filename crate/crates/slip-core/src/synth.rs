//! Synthetic labeled datasets with planted cluster and complement structure.
//!
//! Items belong to clusters (the classification labels) and carry one of two
//! roles within their cluster, mimicking complementary product pairs. Each
//! item gets a latent vector composed of its cluster centroid, a role offset,
//! and a private identity component; image and text features are two
//! different near-isometric projections of that shared latent plus
//! independent Gaussian noise, so the modalities are correlated exactly
//! through the latent. Edges are sampled per pair: dense within clusters
//! (biased toward cross-role pairs), sparse across clusters.

use crate::encoders::{FeatureStore, Modality};
use crate::error::{Result, SlipError};
use crate::graph::InstanceGraph;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// The standard 60/10/30 split.
    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            train_frac: 0.6,
            val_frac: 0.1,
            test_frac: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train", self.train_frac),
            ("val", self.val_frac),
            ("test", self.test_frac),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(SlipError::InvalidInput(format!(
                    "{} fraction {} outside [0, 1]",
                    name, f
                )));
            }
        }
        let total = self.train_frac + self.val_frac + self.test_frac;
        if (total - 1.0).abs() > 1e-9 {
            return Err(SlipError::InvalidInput(format!(
                "split fractions sum to {}, expected 1",
                total
            )));
        }
        Ok(())
    }

    /// Partition `0..n` into disjoint sorted index lists. Train and val take
    /// the floor of their shares; test receives the remainder.
    pub fn split(&self, n: usize) -> Result<Split> {
        self.validate()?;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let n_train = (n as f64 * self.train_frac).floor() as usize;
        let n_val = (n as f64 * self.val_frac).floor() as usize;
        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
        let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(Split { train, val, test })
    }
}

/// Disjoint node index lists covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A graph plus aligned features, labels, and a split: everything training
/// and evaluation need.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub graph: InstanceGraph,
    pub image_features: FeatureStore,
    pub text_features: FeatureStore,
    /// Class label per node; empty when the dataset is unlabeled.
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    /// Number of classes (max label + 1), or 0 when unlabeled.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Recompute the split with different fractions or seed.
    pub fn resplit(&mut self, spec: &SplitSpec) -> Result<()> {
        self.split = spec.split(self.n())?;
        Ok(())
    }
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_clusters: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Baseline probability of an edge between same-cluster items; split
    /// between cross-role and same-role pairs by `complement_pair_fraction`.
    pub intra_cluster_edge_prob: f64,
    /// Probability of an edge between items of different clusters.
    pub inter_cluster_edge_prob: f64,
    /// Share of intra-cluster edge mass given to cross-role pairs: 0.5 treats
    /// roles equally, 1.0 connects only complementary (cross-role) pairs.
    pub complement_pair_fraction: f64,
    /// Standard deviation of the per-modality feature noise.
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_items: 200,
            n_clusters: 8,
            image_dim: 32,
            text_dim: 32,
            intra_cluster_edge_prob: 0.2,
            inter_cluster_edge_prob: 0.002,
            complement_pair_fraction: 0.5,
            feature_noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(SlipError::InvalidInput("need at least one item".into()));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return Err(SlipError::InvalidInput(format!(
                "cluster count {} must be in [1, {}]",
                self.n_clusters, self.n_items
            )));
        }
        if self.image_dim == 0 || self.text_dim == 0 {
            return Err(SlipError::InvalidInput(
                "feature dimensions must be positive".into(),
            ));
        }
        for (name, p) in [
            ("intra-cluster", self.intra_cluster_edge_prob),
            ("inter-cluster", self.inter_cluster_edge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SlipError::InvalidInput(format!(
                    "{} edge probability {} outside [0, 1]",
                    name, p
                )));
            }
        }
        if self.intra_cluster_edge_prob > 0.0
            && self.intra_cluster_edge_prob <= self.inter_cluster_edge_prob
        {
            return Err(SlipError::InvalidInput(
                "intra-cluster edges must be more likely than inter-cluster edges".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.complement_pair_fraction) {
            return Err(SlipError::InvalidInput(
                "complement pair fraction must be in [0, 1]".into(),
            ));
        }
        if self.feature_noise_sigma < 0.0 {
            return Err(SlipError::InvalidInput(
                "feature noise sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostics about a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthMeta {
    /// Role (0 or 1) per item.
    pub roles: Vec<usize>,
    pub intra_edges: usize,
    pub inter_edges: usize,
}

/// Scales of the latent components. The cluster block is deliberately weak —
/// the way a product photo or title pins down the item itself but only
/// faintly signals its category — so matched pairs under-determine category
/// structure and co-purchase edges carry genuinely complementary information
/// rather than a redundant copy of what every pair already shows. The role
/// offset separates complements inside a cluster; the identity part makes
/// every item distinguishable.
const CLUSTER_SCALE: f64 = 0.45;
const ROLE_SCALE: f64 = 0.4;
const ID_SCALE: f64 = 0.2;
const ID_DIM: usize = 8;

/// Build iid Gaussian columns and orthonormalize them (modified
/// Gram-Schmidt) so the map from latents to features preserves geometry.
/// Requires `rows >= cols`; callers fall back to a plain Gaussian map scaled
/// by 1/sqrt(cols) when the feature space is narrower than the latent space.
fn orthonormal_map<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    debug_assert!(rows >= cols);
    let mut cols_data: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while cols_data.len() < cols {
        let mut v: Vec<f64> = Tensor::randn(rows, 1, 1.0, rng).data().to_vec();
        for u in &cols_data {
            let dot: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // rare degenerate draw: try a fresh vector
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        cols_data.push(v);
    }
    let mut m = Tensor::zeros(rows, cols);
    for (c, v) in cols_data.iter().enumerate() {
        for r in 0..rows {
            m.set(r, c, v[r]);
        }
    }
    m
}

/// Generate a dataset plus generation diagnostics. Deterministic per spec
/// (including the seed); the split uses the standard 60/10/30 fractions with
/// the same seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(LabeledDataset, SynthMeta)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_items;
    let k = spec.n_clusters;
    let latent_dim = k + 1 + ID_DIM;

    // Cluster round-robin keeps sizes balanced; roles alternate within each
    // cluster so both roles are always populated.
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut per_cluster_count = vec![0usize; k];
    let roles: Vec<usize> = (0..n)
        .map(|i| {
            let c = labels[i];
            let r = per_cluster_count[c] % 2;
            per_cluster_count[c] += 1;
            r
        })
        .collect();

    // Shared latents.
    let mut latents = Tensor::zeros(n, latent_dim);
    for i in 0..n {
        latents.set(i, labels[i], CLUSTER_SCALE);
        let role_sign = if roles[i] == 0 { 1.0 } else { -1.0 };
        latents.set(i, k, role_sign * ROLE_SCALE);
        for d in 0..ID_DIM {
            let g: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            // Uniform in [-1, 1] scaled to keep the expected norm near ID_SCALE.
            latents.set(i, k + 1 + d, g * ID_SCALE / (ID_DIM as f64 / 3.0).sqrt());
        }
    }

    // Per-modality projections of the latent space.
    let project = |rng: &mut ChaCha8Rng, feat_dim: usize| -> Tensor {
        if feat_dim >= latent_dim {
            orthonormal_map(feat_dim, latent_dim, rng)
        } else {
            Tensor::randn(feat_dim, latent_dim, 1.0 / (latent_dim as f64).sqrt(), rng)
        }
    };
    let map_v = project(&mut rng, spec.image_dim);
    let map_t = project(&mut rng, spec.text_dim);

    let mut image_features = FeatureStore::new(Modality::Image, spec.image_dim, n)?;
    let mut text_features = FeatureStore::new(Modality::Text, spec.text_dim, n)?;
    for i in 0..n {
        let u = Tensor::new(latent_dim, 1, latents.row(i).to_vec())?;
        for (map, store) in [(&map_v, &mut image_features), (&map_t, &mut text_features)] {
            let mut x = map.matmul(&u)?;
            for v in x.data_mut() {
                let noise: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                *v += spec.feature_noise_sigma * noise;
            }
            store.insert(i, x.data().to_vec())?;
        }
    }

    // Edges. Within a cluster the baseline probability splits between
    // cross-role and same-role pairs; f = 0.5 treats both alike, f = 1 puts
    // all mass on complements. Probabilities clamp into [0, 1].
    let f = spec.complement_pair_fraction;
    let p_cross = (2.0 * f * spec.intra_cluster_edge_prob).clamp(0.0, 1.0);
    let p_same = (2.0 * (1.0 - f) * spec.intra_cluster_edge_prob).clamp(0.0, 1.0);
    let mut edges = Vec::new();
    let mut intra_edges = 0;
    let mut inter_edges = 0;
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] {
                if roles[i] != roles[j] {
                    p_cross
                } else {
                    p_same
                }
            } else {
                spec.inter_cluster_edge_prob
            };
            if p > 0.0 && rng.gen::<f64>() < p {
                edges.push((i as u32, j as u32, 1u32));
                if labels[i] == labels[j] {
                    intra_edges += 1;
                } else {
                    inter_edges += 1;
                }
            }
        }
    }

    let node_ids: Vec<String> = (0..n).map(|i| format!("item{:05}", i)).collect();
    let graph = InstanceGraph::from_edges(node_ids, &edges)?;
    let split = SplitSpec::standard(spec.seed).split(n)?;

    Ok((
        LabeledDataset {
            graph,
            image_features,
            text_features,
            labels,
            split,
        },
        SynthMeta {
            roles,
            intra_edges,
            inter_edges,
        },
    ))
}
