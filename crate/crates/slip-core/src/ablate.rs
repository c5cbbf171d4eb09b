//! Ablation grids: batch sizes x component variants x seeds, each cell a
//! full train-plus-test-evaluation run, reported as one table.
//!
//! Variants are deltas applied to a base config. The pair `wo-g`/`w-g`
//! toggles only the graph loss (the batch-size study); the ladder `base`,
//! `g`, `g-aux`, `g-aux-dlr` switches components on cumulatively (the
//! component study). Cells run independently — optionally on worker threads
//! — and a failed cell is recorded without stopping the grid.

use crate::error::{Result, SlipError};
use crate::eval::RetrievalResult;
use crate::synth::LabeledDataset;
use crate::trainer::{retrieval_on_nodes, train, TrainConfig};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

/// A named toggle delta on the base training config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Graph loss off; other toggles as configured.
    WithoutGraph,
    /// Graph loss on; other toggles as configured.
    WithGraph,
    /// All three components off: the plain contrastive baseline.
    Base,
    /// Graph supervision only.
    Graph,
    /// Graph supervision plus the auxiliary classifier.
    GraphAux,
    /// All components: graph, auxiliary classifier, discriminative rates.
    GraphAuxDlr,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::WithoutGraph,
        Variant::WithGraph,
        Variant::Base,
        Variant::Graph,
        Variant::GraphAux,
        Variant::GraphAuxDlr,
    ];

    /// Apply this variant's toggles to a config.
    pub fn apply(self, config: &mut TrainConfig) {
        match self {
            Variant::WithoutGraph => config.graph_loss = false,
            Variant::WithGraph => config.graph_loss = true,
            Variant::Base => {
                config.graph_loss = false;
                config.aux_loss = false;
                config.dlr = false;
            }
            Variant::Graph => {
                config.graph_loss = true;
                config.aux_loss = false;
                config.dlr = false;
            }
            Variant::GraphAux => {
                config.graph_loss = true;
                config.aux_loss = true;
                config.dlr = false;
            }
            Variant::GraphAuxDlr => {
                config.graph_loss = true;
                config.aux_loss = true;
                config.dlr = true;
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Variant::WithoutGraph => "wo-g",
            Variant::WithGraph => "w-g",
            Variant::Base => "base",
            Variant::Graph => "g",
            Variant::GraphAux => "g-aux",
            Variant::GraphAuxDlr => "g-aux-dlr",
        };
        write!(f, "{}", name)
    }
}

impl FromStr for Variant {
    type Err = SlipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wo-g" => Ok(Variant::WithoutGraph),
            "w-g" => Ok(Variant::WithGraph),
            "base" => Ok(Variant::Base),
            "g" => Ok(Variant::Graph),
            "g-aux" => Ok(Variant::GraphAux),
            "g-aux-dlr" => Ok(Variant::GraphAuxDlr),
            other => Err(SlipError::InvalidInput(format!(
                "unknown variant '{}', expected one of wo-g, w-g, base, g, g-aux, g-aux-dlr",
                other
            ))),
        }
    }
}

/// The grid to sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub batch_sizes: Vec<usize>,
    pub variants: Vec<Variant>,
    /// Number of seeds per cell; cell k uses `base.seed + k`.
    pub seeds: u64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() || self.variants.is_empty() || self.seeds == 0 {
            return Err(SlipError::InvalidInput(
                "the grid needs at least one batch size, one variant, and one seed".into(),
            ));
        }
        if self.batch_sizes.contains(&0) {
            return Err(SlipError::InvalidInput("batch size 0 in grid".into()));
        }
        Ok(())
    }

    fn cells(&self, base: &TrainConfig) -> Vec<(CellKey, TrainConfig)> {
        let mut cells = Vec::new();
        for &batch in &self.batch_sizes {
            for &variant in &self.variants {
                for k in 0..self.seeds {
                    let seed = base.seed.wrapping_add(k);
                    let mut config = base.clone();
                    config.batch_size = batch;
                    config.seed = seed;
                    variant.apply(&mut config);
                    cells.push((
                        CellKey {
                            batch,
                            variant,
                            seed,
                        },
                        config,
                    ));
                }
            }
        }
        cells
    }
}

/// Coordinates of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellKey {
    pub batch: usize,
    pub variant: Variant,
    pub seed: u64,
}

/// Test-split retrieval metrics of a finished cell, or the error that
/// stopped it.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub key: CellKey,
    pub outcome: std::result::Result<(RetrievalResult, RetrievalResult), String>,
}

impl CellResult {
    /// Mean MRR over both directions, when the cell succeeded.
    pub fn mean_mrr(&self) -> Option<f64> {
        self.outcome
            .as_ref()
            .ok()
            .map(|(i2t, t2i)| 0.5 * (i2t.mrr + t2i.mrr))
    }
}

fn run_cell(data: &LabeledDataset, config: &TrainConfig) -> Result<(RetrievalResult, RetrievalResult)> {
    let out = train(data, config)?;
    retrieval_on_nodes(&out.best, data, &data.split.test)
}

/// Run every cell of the grid, training on the dataset's train split and
/// evaluating the best checkpoint on its test split. `max_threads` caps
/// worker threads (1 = sequential); results come back in grid order
/// regardless of scheduling, and a failed cell records its error message
/// while the rest of the grid continues.
pub fn run_grid(
    data: &LabeledDataset,
    base: &TrainConfig,
    grid: &GridSpec,
    max_threads: usize,
) -> Result<Vec<CellResult>> {
    grid.validate()?;
    base.validate()?;
    if data.split.test.is_empty() {
        return Err(SlipError::InvalidInput(
            "the dataset has no test split to evaluate on".into(),
        ));
    }
    let cells = grid.cells(base);
    let workers = max_threads.max(1).min(cells.len());

    let results: Vec<Mutex<Option<CellResult>>> =
        (0..cells.len()).map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = {
                    let mut guard = next.lock().expect("queue lock");
                    let i = *guard;
                    if i >= cells.len() {
                        break;
                    }
                    *guard += 1;
                    i
                };
                let (key, config) = &cells[index];
                let outcome = run_cell(data, config).map_err(|e| e.to_string());
                *results[index].lock().expect("cell lock") = Some(CellResult {
                    key: *key,
                    outcome,
                });
            });
        }
    });

    Ok(results
        .into_iter()
        .map(|m| m.into_inner().expect("cell lock").expect("every cell ran"))
        .collect())
}

/// Format grid results as a tab-separated table: one row per cell plus one
/// `mean` row per (batch, variant) over its successful seeds. Failed cells
/// print `na` metrics; their errors are listed by [`grid_errors`].
pub fn format_ablation_table(results: &[CellResult]) -> Vec<String> {
    let mut lines = vec![
        "batch\tvariant\tseed\tmrr_i2t\tmrr_t2i\tmrr_mean\tmed_rank\tmean_rank\tr@1\tr@5\tr@10"
            .to_string(),
    ];
    // Metric columns in printing order.
    fn metric_row(i2t: &RetrievalResult, t2i: &RetrievalResult) -> Vec<f64> {
        vec![
            i2t.mrr,
            t2i.mrr,
            0.5 * (i2t.mrr + t2i.mrr),
            0.5 * (i2t.median_rank + t2i.median_rank),
            0.5 * (i2t.mean_rank + t2i.mean_rank),
            0.5 * (i2t.recall_at[&1] + t2i.recall_at[&1]),
            0.5 * (i2t.recall_at[&5] + t2i.recall_at[&5]),
            0.5 * (i2t.recall_at[&10] + t2i.recall_at[&10]),
        ]
    }
    let fmt_metrics = |m: &[f64]| -> String {
        m.iter()
            .map(|v| format!("{:.6}", v))
            .collect::<Vec<_>>()
            .join("\t")
    };
    let na = vec!["na"; 8].join("\t");

    // Group rows by (batch, variant) preserving first-appearance order.
    let mut groups: Vec<((usize, Variant), Vec<&CellResult>)> = Vec::new();
    for r in results {
        let key = (r.key.batch, r.key.variant);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }

    for ((batch, variant), members) in groups {
        let mut sums: Option<Vec<f64>> = None;
        let mut ok = 0usize;
        for r in members {
            match &r.outcome {
                Ok((i2t, t2i)) => {
                    let m = metric_row(i2t, t2i);
                    lines.push(format!(
                        "{}\t{}\t{}\t{}",
                        batch,
                        variant,
                        r.key.seed,
                        fmt_metrics(&m)
                    ));
                    let s = sums.get_or_insert_with(|| vec![0.0; m.len()]);
                    for (a, b) in s.iter_mut().zip(m.iter()) {
                        *a += b;
                    }
                    ok += 1;
                }
                Err(_) => {
                    lines.push(format!("{}\t{}\t{}\t{}", batch, variant, r.key.seed, na));
                }
            }
        }
        let mean_cols = match sums {
            Some(s) if ok > 0 => {
                let means: Vec<f64> = s.iter().map(|v| v / ok as f64).collect();
                fmt_metrics(&means)
            }
            _ => na.clone(),
        };
        lines.push(format!("{}\t{}\tmean\t{}", batch, variant, mean_cols));
    }
    lines
}

/// The failed cells, as `(key, message)` in grid order.
pub fn grid_errors(results: &[CellResult]) -> Vec<(CellKey, String)> {
    results
        .iter()
        .filter_map(|r| match &r.outcome {
            Err(msg) => Some((r.key, msg.clone())),
            Ok(_) => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn dataset() -> LabeledDataset {
        generate_synthetic(&SyntheticSpec {
            n_items: 50,
            n_clusters: 5,
            image_dim: 10,
            text_dim: 10,
            intra_cluster_edge_prob: 0.5,
            inter_cluster_edge_prob: 0.01,
            seed: 21,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .0
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            batch_size: 10,
            epochs: 2,
            warmup_steps: 1,
            base_lr: 1e-2,
            embed_dim: 8,
            gat_hidden: 8,
            gat_heads: 2,
            seed: 40,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("w/g".parse::<Variant>().is_err());
    }

    #[test]
    fn variants_set_the_toggles() {
        let mut cfg = TrainConfig::default();
        Variant::Base.apply(&mut cfg);
        assert!(!cfg.graph_loss && !cfg.aux_loss && !cfg.dlr);
        Variant::GraphAux.apply(&mut cfg);
        assert!(cfg.graph_loss && cfg.aux_loss && !cfg.dlr);
        Variant::GraphAuxDlr.apply(&mut cfg);
        assert!(cfg.graph_loss && cfg.aux_loss && cfg.dlr);
        // wo-g/w-g touch only the graph toggle.
        let mut cfg = TrainConfig::default();
        cfg.aux_loss = false;
        cfg.dlr = false;
        Variant::WithGraph.apply(&mut cfg);
        assert!(cfg.graph_loss && !cfg.aux_loss && !cfg.dlr);
        Variant::WithoutGraph.apply(&mut cfg);
        assert!(!cfg.graph_loss && !cfg.aux_loss && !cfg.dlr);
    }

    #[test]
    fn degenerate_grid_equals_a_single_run() {
        let data = dataset();
        let base = fast_config();
        let grid = GridSpec {
            batch_sizes: vec![10],
            variants: vec![Variant::WithGraph],
            seeds: 1,
        };
        let results = run_grid(&data, &base, &grid, 1).unwrap();
        assert_eq!(results.len(), 1);
        let (g_i2t, g_t2i) = results[0].outcome.as_ref().unwrap();

        let mut single = base.clone();
        single.batch_size = 10;
        Variant::WithGraph.apply(&mut single);
        let out = train(&data, &single).unwrap();
        let (i2t, t2i) = retrieval_on_nodes(&out.best, &data, &data.split.test).unwrap();
        assert_eq!(g_i2t.mrr, i2t.mrr);
        assert_eq!(g_t2i.mrr, t2i.mrr);
        assert_eq!(g_i2t.recall_at, i2t.recall_at);
    }

    #[test]
    fn grid_order_is_deterministic_and_thread_independent() {
        let data = dataset();
        let base = fast_config();
        let grid = GridSpec {
            batch_sizes: vec![8, 16],
            variants: vec![Variant::WithoutGraph, Variant::WithGraph],
            seeds: 2,
        };
        let sequential = run_grid(&data, &base, &grid, 1).unwrap();
        let threaded = run_grid(&data, &base, &grid, 4).unwrap();
        assert_eq!(sequential.len(), 8);
        for (a, b) in sequential.iter().zip(threaded.iter()) {
            assert_eq!(a.key, b.key);
            assert_eq!(a.mean_mrr(), b.mean_mrr());
        }
        // Expected cell order: batch-major, then variant, then seed.
        assert_eq!(sequential[0].key.batch, 8);
        assert_eq!(sequential[0].key.variant, Variant::WithoutGraph);
        assert_eq!(sequential[0].key.seed, 40);
        assert_eq!(sequential[1].key.seed, 41);
        assert_eq!(sequential[2].key.variant, Variant::WithGraph);
        assert_eq!(sequential[4].key.batch, 16);
    }

    #[test]
    fn failed_cells_are_recorded_and_grid_continues() {
        let mut data = dataset();
        data.labels.clear(); // unlabeled: any aux variant must fail
        let base = fast_config();
        let grid = GridSpec {
            batch_sizes: vec![10],
            variants: vec![Variant::Base, Variant::GraphAux, Variant::Graph],
            seeds: 1,
        };
        let results = run_grid(&data, &base, &grid, 1).unwrap();
        assert_eq!(results.len(), 3);
        assert!(results[0].outcome.is_ok());
        assert!(results[1].outcome.is_err());
        assert!(results[2].outcome.is_ok());
        let errors = grid_errors(&results);
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].0.variant, Variant::GraphAux);

        let table = format_ablation_table(&results);
        // Header + 3 seed rows + 3 mean rows.
        assert_eq!(table.len(), 7);
        let failed_row = table.iter().find(|l| l.contains("g-aux")).unwrap();
        assert!(failed_row.contains("na"));
        // The failed group's mean row is also na.
        let mean_rows: Vec<&String> = table.iter().filter(|l| l.contains("\tmean\t")).collect();
        assert_eq!(mean_rows.len(), 3);
        assert!(mean_rows[1].contains("na"));
    }

    #[test]
    fn table_layout_matches_the_header() {
        let data = dataset();
        let base = fast_config();
        let grid = GridSpec {
            batch_sizes: vec![8],
            variants: vec![Variant::WithoutGraph, Variant::WithGraph],
            seeds: 2,
        };
        let results = run_grid(&data, &base, &grid, 2).unwrap();
        let table = format_ablation_table(&results);
        let header_cols = table[0].split('\t').count();
        assert_eq!(header_cols, 11);
        for line in &table[1..] {
            assert_eq!(line.split('\t').count(), header_cols, "{}", line);
        }
        // Per group: 2 seed rows then a mean row whose mrr_mean is the
        // average of the seeds'.
        let get = |line: &str, col: usize| -> f64 {
            line.split('\t').nth(col).unwrap().parse().unwrap()
        };
        for g in 0..2 {
            let rows = &table[1 + g * 3..1 + g * 3 + 3];
            assert!(rows[2].contains("\tmean\t"));
            let mean_of_seeds = 0.5 * (get(&rows[0], 5) + get(&rows[1], 5));
            // Both sides were independently rounded to 6 decimals.
            assert!((get(&rows[2], 5) - mean_of_seeds).abs() < 2e-6);
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        let data = dataset();
        let base = fast_config();
        for grid in [
            GridSpec { batch_sizes: vec![], variants: vec![Variant::Base], seeds: 1 },
            GridSpec { batch_sizes: vec![8], variants: vec![], seeds: 1 },
            GridSpec { batch_sizes: vec![8], variants: vec![Variant::Base], seeds: 0 },
        ] {
            assert!(run_grid(&data, &base, &grid, 1).is_err());
        }
    }
}
