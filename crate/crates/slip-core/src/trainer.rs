//! The training loop: configuration, the per-step optimization cycle, and
//! per-epoch validation with early stopping.
//!
//! Each step samples a connected (or uniform) subgraph batch from the
//! training split, runs both encoder towers plus the optional structural
//! tower on a fresh tape, combines the enabled loss terms, and applies one
//! Adam update with per-group learning rates under a warmup/decay schedule.
//! Validation ranks the held-out split by cross-modal retrieval; the best
//! parameters by mean MRR are snapshotted for the final checkpoint.

use crate::encoders::Modality;
use crate::error::{Result, SlipError};
use crate::eval::{retrieval_eval, RetrievalResult};
use crate::gat::Activation;
use crate::graph::{build_masks, hop_distance_matrix, HopMasks};
use crate::losses::{
    alignment_score, aux_classification_loss, clip_infonce, structural_loss, total_loss,
    LossWeights, MAX_TEMP_SCALE,
};
use crate::model::{forward_batch, EncoderKind, ModelConfig, ModelParams, ModelVars};
use crate::optim::{assign_learning_rates, lr_schedule, Adam, EarlyStopping, LrConfig};
use crate::sampling::{sample_subgraph_batch, SamplingStrategy};
use crate::synth::{LabeledDataset, SplitSpec};
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::str::FromStr;

/// Every run setting, expressible as flat `key = value` text. Defaults match
/// the reference training protocol; small-scale runs typically lower
/// `warmup_steps` and raise `base_lr` because they take far fewer steps than
/// a full-scale fine-tune.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Upper bound on epochs; early stopping usually ends runs sooner.
    pub epochs: usize,
    pub base_lr: f64,
    /// Per-depth decay factor for discriminative encoder rates.
    pub layer_decay: f64,
    /// Rate for the structural tower and classifier head.
    pub graph_lr: f64,
    pub warmup_steps: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Positive-pair hop threshold h for the structural loss masks.
    pub hop_threshold: u32,
    pub seed: u64,
    /// Component toggles.
    pub graph_loss: bool,
    pub aux_loss: bool,
    pub dlr: bool,
    pub lambda_graph: f64,
    pub lambda_aux: f64,
    /// Exclude the anchor from the structural softmax denominator.
    pub exclude_self: bool,
    pub sampling: SamplingStrategy,
    pub embed_dim: usize,
    pub encoder: EncoderKind,
    pub gat_hidden: usize,
    pub gat_heads: usize,
    pub gat_dropout: f64,
    pub leaky_slope: f64,
    pub temp_init_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Split fractions and shuffle seed, consumed when a pipeline (re)splits
    /// a dataset; the core loop itself uses the split already attached to
    /// the dataset it receives.
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            base_lr: 1e-5,
            layer_decay: 0.8,
            graph_lr: 4e-3,
            warmup_steps: 500,
            patience: 10,
            min_delta: 0.001,
            hop_threshold: 1,
            seed: 0,
            graph_loss: true,
            aux_loss: true,
            dlr: true,
            lambda_graph: 0.05,
            lambda_aux: 0.1,
            exclude_self: false,
            sampling: SamplingStrategy::BfsExpand,
            embed_dim: 32,
            encoder: EncoderKind::Linear,
            gat_hidden: 64,
            gat_heads: 4,
            gat_dropout: 0.1,
            leaky_slope: 0.2,
            temp_init_scale: 1.0 / 0.07,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            train_frac: 0.6,
            val_frac: 0.1,
            test_frac: 0.3,
            split_seed: 0,
        }
    }
}

/// Maximum number of training epochs any configuration may request.
pub const MAX_EPOCHS: usize = 50;

/// All recognized configuration keys, sorted, as written by `to_lines`.
pub const CONFIG_KEYS: [&str; 31] = [
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "aux_loss",
    "base_lr",
    "batch_size",
    "dlr",
    "embed_dim",
    "encoder",
    "epochs",
    "exclude_self",
    "gat_dropout",
    "gat_heads",
    "gat_hidden",
    "graph_loss",
    "graph_lr",
    "hop_threshold",
    "lambda_aux",
    "lambda_graph",
    "layer_decay",
    "leaky_slope",
    "min_delta",
    "patience",
    "sampling",
    "seed",
    "split_seed",
    "temp_init_scale",
    "test_frac",
    "train_frac",
    "val_frac",
    "warmup_steps",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        SlipError::Config(format!("invalid value '{}' for key '{}'", value, key))
    })
}

impl TrainConfig {
    /// Assign one setting from its textual form. Unknown keys are rejected
    /// by name; values are parsed per the field's type.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "layer_decay" => self.layer_decay = parse_value(key, value)?,
            "graph_lr" => self.graph_lr = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "min_delta" => self.min_delta = parse_value(key, value)?,
            "hop_threshold" => self.hop_threshold = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "graph_loss" => self.graph_loss = parse_value(key, value)?,
            "aux_loss" => self.aux_loss = parse_value(key, value)?,
            "dlr" => self.dlr = parse_value(key, value)?,
            "lambda_graph" => self.lambda_graph = parse_value(key, value)?,
            "lambda_aux" => self.lambda_aux = parse_value(key, value)?,
            "exclude_self" => self.exclude_self = parse_value(key, value)?,
            "sampling" => self.sampling = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "encoder" => self.encoder = parse_value(key, value)?,
            "gat_hidden" => self.gat_hidden = parse_value(key, value)?,
            "gat_heads" => self.gat_heads = parse_value(key, value)?,
            "gat_dropout" => self.gat_dropout = parse_value(key, value)?,
            "leaky_slope" => self.leaky_slope = parse_value(key, value)?,
            "temp_init_scale" => self.temp_init_scale = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "train_frac" => self.train_frac = parse_value(key, value)?,
            "val_frac" => self.val_frac = parse_value(key, value)?,
            "test_frac" => self.test_frac = parse_value(key, value)?,
            "split_seed" => self.split_seed = parse_value(key, value)?,
            other => {
                return Err(SlipError::Config(format!(
                    "unknown config key '{}'",
                    other
                )))
            }
        }
        Ok(())
    }

    /// Serialize as sorted `key = value` lines.
    pub fn to_lines(&self) -> Vec<String> {
        let mut lines = vec![
            format!("adam_beta1 = {}", self.adam_beta1),
            format!("adam_beta2 = {}", self.adam_beta2),
            format!("adam_eps = {}", self.adam_eps),
            format!("aux_loss = {}", self.aux_loss),
            format!("base_lr = {}", self.base_lr),
            format!("batch_size = {}", self.batch_size),
            format!("dlr = {}", self.dlr),
            format!("embed_dim = {}", self.embed_dim),
            format!("encoder = {}", self.encoder),
            format!("epochs = {}", self.epochs),
            format!("exclude_self = {}", self.exclude_self),
            format!("gat_dropout = {}", self.gat_dropout),
            format!("gat_heads = {}", self.gat_heads),
            format!("gat_hidden = {}", self.gat_hidden),
            format!("graph_loss = {}", self.graph_loss),
            format!("graph_lr = {}", self.graph_lr),
            format!("hop_threshold = {}", self.hop_threshold),
            format!("lambda_aux = {}", self.lambda_aux),
            format!("lambda_graph = {}", self.lambda_graph),
            format!("layer_decay = {}", self.layer_decay),
            format!("leaky_slope = {}", self.leaky_slope),
            format!("min_delta = {}", self.min_delta),
            format!("patience = {}", self.patience),
            format!("sampling = {}", self.sampling),
            format!("seed = {}", self.seed),
            format!("split_seed = {}", self.split_seed),
            format!("temp_init_scale = {}", self.temp_init_scale),
            format!("test_frac = {}", self.test_frac),
            format!("train_frac = {}", self.train_frac),
            format!("val_frac = {}", self.val_frac),
            format!("warmup_steps = {}", self.warmup_steps),
        ];
        debug_assert_eq!(lines.len(), CONFIG_KEYS.len());
        lines.sort();
        lines
    }

    /// Build a config from `key = value` lines; starts from defaults, so
    /// omitted keys keep their default values. Blank lines and `#` comments
    /// are ignored.
    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for line in lines {
            let line = line.as_ref().trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SlipError::Config(format!("expected 'key = value', got '{}'", line))
            })?;
            cfg.set_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SlipError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs > MAX_EPOCHS {
            return Err(SlipError::Config(format!(
                "epochs {} exceeds the maximum of {}",
                self.epochs, MAX_EPOCHS
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("graph_lr", self.graph_lr),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SlipError::Config(format!("{} must be positive", name)));
            }
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(SlipError::Config("layer_decay must be in (0, 1]".into()));
        }
        if self.patience == 0 {
            return Err(SlipError::Config("patience must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(SlipError::Config("min_delta must be non-negative".into()));
        }
        if self.hop_threshold == 0 {
            return Err(SlipError::Config("hop_threshold must be at least 1".into()));
        }
        for (name, v) in [
            ("lambda_graph", self.lambda_graph),
            ("lambda_aux", self.lambda_aux),
        ] {
            if v < 0.0 {
                return Err(SlipError::Config(format!("{} must be non-negative", name)));
            }
        }
        if !(0.0..1.0).contains(&self.gat_dropout) {
            return Err(SlipError::Config("gat_dropout must be in [0, 1)".into()));
        }
        if self.leaky_slope < 0.0 {
            return Err(SlipError::Config("leaky_slope must be non-negative".into()));
        }
        if !(self.temp_init_scale > 0.0 && self.temp_init_scale <= MAX_TEMP_SCALE) {
            return Err(SlipError::Config(format!(
                "temp_init_scale must be in (0, {}]",
                MAX_TEMP_SCALE
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(SlipError::Config(format!("{} must be in [0, 1)", name)));
            }
        }
        self.split_spec().validate().map_err(|e| match e {
            SlipError::InvalidInput(msg) => SlipError::Config(msg),
            other => other,
        })?;
        Ok(())
    }

    /// The dataset split this config describes.
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.train_frac,
            val_frac: self.val_frac,
            test_frac: self.test_frac,
            seed: self.split_seed,
        }
    }

    /// Derive the model-shape settings for a concrete dataset. The structural
    /// tower exists exactly when the graph loss is enabled, and the
    /// classifier exactly when the auxiliary loss is enabled.
    pub fn model_config(&self, data: &LabeledDataset) -> Result<ModelConfig> {
        let config = ModelConfig {
            embed_dim: self.embed_dim,
            encoder_kind: self.encoder,
            image_feat_dim: data.image_features.dim(),
            text_feat_dim: data.text_features.dim(),
            n_items: data.n(),
            graph_enabled: self.graph_loss,
            gat_hidden: self.gat_hidden,
            gat_heads: self.gat_heads,
            gat_dropout: self.gat_dropout,
            leaky_slope: self.leaky_slope,
            fusion_activation: Activation::Elu,
            fusion_normalize: true,
            aux_enabled: self.aux_loss,
            n_classes: data.n_classes(),
            temp_init_scale: self.temp_init_scale,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Where a checkpoint was taken and how good it was. `val_metric` is NaN
/// when the run never evaluated a validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Optimizer steps completed when the snapshot was taken.
    pub step: usize,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    /// Mean validation MRR over both retrieval directions.
    pub val_metric: f64,
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters exactly as initialized, before any step.
    pub initial: ModelParams,
    /// Parameters at the best validation metric (last parameters when no
    /// validation ran).
    pub best: ModelParams,
    pub best_meta: CheckpointMeta,
    /// Parameters after the final step.
    pub last: ModelParams,
    pub last_meta: CheckpointMeta,
    /// One line per step: `step  L_total  L_clip  L_graph  L_aux  alignment  lr`,
    /// tab-separated; disabled loss terms log as 0; `lr` is the scheduled
    /// base encoder rate.
    pub step_log: Vec<String>,
    /// One line per validated epoch:
    /// `epoch  val_mrr_i2t  val_mrr_t2i  val_mean  status`.
    pub epoch_log: Vec<String>,
    pub stopped_early: bool,
    pub steps_run: usize,
}

/// Independent deterministic RNG streams derived from one run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLING: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// Encode two towers without dropout and rank the given nodes against each
/// other. Used for validation and test-split evaluation.
pub fn retrieval_on_nodes(
    params: &ModelParams,
    data: &LabeledDataset,
    nodes: &[usize],
) -> Result<(RetrievalResult, RetrievalResult)> {
    let e_v = params.encode_plain(Some(&data.image_features), Modality::Image, nodes)?;
    let e_t = params.encode_plain(Some(&data.text_features), Modality::Text, nodes)?;
    retrieval_eval(&e_v, &e_t)
}

/// Worst relative gradient errors of the full training objective, one entry
/// per parameter tensor, from a central finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(tensor name, worst relative error over its entries)`, in model
    /// traversal order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    /// The single worst relative error across all tensors.
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().fold(0.0, |acc, (_, e)| acc.max(*e))
    }
}

fn perturb_tensor(params: &mut ModelParams, target: &str, index: usize, delta: f64) {
    params.visit_mut(|name, _, tensor| {
        if name == target {
            tensor.data_mut()[index] += delta;
        }
    });
}

/// Check tape gradients of the complete training loss — both encoder towers,
/// the structural tower when enabled, fusion, and every enabled loss term —
/// against central finite differences for one batch of `ds_nodes`.
///
/// Parameters are freshly initialized from the config seed; dropout stays
/// active but is reseeded identically for every evaluation, so the objective
/// is a fixed deterministic function of the parameters. The relative error of
/// one entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// Piecewise-linear activations make the loss non-differentiable on a
/// measure-zero set; when a perturbation window happens to straddle such a
/// kink, the central difference reports a spurious error that shrinks
/// linearly with the step size. Entries above 1e-6 are therefore re-measured
/// at steps divided by 16 and 256, keeping the best of the three: a genuine
/// gradient defect persists across scales, a kink artifact does not.
pub fn full_loss_grad_check(
    data: &LabeledDataset,
    config: &TrainConfig,
    ds_nodes: &[usize],
    fd_step: f64,
) -> Result<GradCheckReport> {
    if fd_step <= 0.0 {
        return Err(SlipError::InvalidInput(format!(
            "finite-difference step must be positive, got {}",
            fd_step
        )));
    }
    if ds_nodes.is_empty() {
        return Err(SlipError::InvalidInput("empty batch".into()));
    }
    config.validate()?;
    let model_config = config.model_config(data)?;
    if config.aux_loss && data.labels.len() != data.n() {
        return Err(SlipError::InvalidInput(format!(
            "auxiliary loss needs one label per node: {} labels for {} nodes",
            data.labels.len(),
            data.n()
        )));
    }

    let mut init_rng = stream(config.seed, STREAM_INIT);
    let params = ModelParams::init(model_config, &mut init_rng)?;
    let adjacency = data.graph.induced_adjacency(ds_nodes)?;
    let distances = hop_distance_matrix(&data.graph, ds_nodes, config.hop_threshold)?;
    let masks = build_masks(&distances, config.hop_threshold)?;
    let weights = LossWeights {
        lambda_graph: config.lambda_graph,
        lambda_aux: config.lambda_aux,
        ..LossWeights::default()
    };

    let assemble = |p: &ModelParams, tape: &mut Tape| -> Result<(LossTerms, Vec<(String, crate::optim::ParamGroup, Var)>)> {
        let (vars, named) = p.register(tape)?;
        let mut dropout_rng = stream(config.seed, STREAM_DROPOUT);
        let terms = build_total_loss(
            tape,
            p,
            &vars,
            data,
            ds_nodes,
            &adjacency,
            &masks,
            config,
            &weights,
            &mut dropout_rng,
        )?;
        Ok((terms, named))
    };

    // Analytic gradients, gathered by tensor name.
    let mut tape = Tape::new();
    let (terms, named) = assemble(&params, &mut tape)?;
    tape.backward(terms.total)?;
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, _, var) in &named {
        let value = tape.value(*var);
        let grad = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()));
        analytic.insert(name.clone(), grad);
    }

    let loss_at = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let (terms, _) = assemble(p, &mut tape)?;
        tape.value(terms.total).item()
    };

    let mut names = Vec::new();
    params.visit(|name, _, _| names.push(name.to_string()));

    let mut per_tensor = Vec::with_capacity(names.len());
    for name in names {
        let grad = &analytic[&name];
        let mut worst = 0.0f64;
        for i in 0..grad.len() {
            let a = grad.data()[i];
            let mut best_err = f64::INFINITY;
            let mut h = fd_step;
            for _attempt in 0..3 {
                let mut plus = params.clone();
                perturb_tensor(&mut plus, &name, i, h);
                let mut minus = params.clone();
                perturb_tensor(&mut minus, &name, i, -h);
                let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                best_err = best_err.min((a - numeric).abs() / denom);
                if best_err < 1e-6 {
                    break;
                }
                h /= 16.0;
            }
            worst = worst.max(best_err);
        }
        per_tensor.push((name, worst));
    }
    Ok(GradCheckReport { per_tensor })
}

fn check_split(data: &LabeledDataset) -> Result<()> {
    let n = data.n();
    let mut seen = vec![false; n];
    for group in [&data.split.train, &data.split.val, &data.split.test] {
        for &v in group {
            if v >= n {
                return Err(SlipError::InvalidInput(format!(
                    "split references node {} but the dataset has {}",
                    v, n
                )));
            }
            if seen[v] {
                return Err(SlipError::InvalidInput(format!(
                    "node {} appears in two split groups",
                    v
                )));
            }
            seen[v] = true;
        }
    }
    Ok(())
}

struct StepStats {
    l_total: f64,
    l_clip: f64,
    l_graph: f64,
    l_aux: f64,
    alignment: f64,
}

/// Tape nodes of one assembled training objective.
struct LossTerms {
    total: Var,
    l_clip: Var,
    graph: Option<Var>,
    aux: Option<Var>,
    e_v: Var,
    e_t: Var,
}

/// Run the full forward pass and combine the enabled loss terms on `tape`.
#[allow(clippy::too_many_arguments)]
fn build_total_loss(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ModelVars,
    data: &LabeledDataset,
    ds_nodes: &[usize],
    adjacency: &Tensor,
    masks: &HopMasks,
    config: &TrainConfig,
    weights: &LossWeights,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    let fwd = forward_batch(
        tape,
        params,
        vars,
        Some(&data.image_features),
        Some(&data.text_features),
        ds_nodes,
        Some(adjacency),
        true,
        dropout_rng,
    )?;

    let l_clip = clip_infonce(tape, fwd.e_v, fwd.e_t, vars.temp_scale)?;
    let graph_term = if config.graph_loss {
        let z = fwd.z.ok_or_else(|| {
            SlipError::InvalidInput("graph loss enabled without a structural tower".into())
        })?;
        let l = structural_loss(tape, z, masks, vars.temp_scale, weights, config.exclude_self)?;
        Some((l, config.lambda_graph))
    } else {
        None
    };
    let aux_term = if config.aux_loss {
        let logits = fwd.logits.ok_or_else(|| {
            SlipError::InvalidInput("auxiliary loss enabled without a classifier".into())
        })?;
        let labels: Vec<usize> = ds_nodes.iter().map(|&v| data.labels[v]).collect();
        let l = aux_classification_loss(tape, logits, &labels)?;
        Some((l, config.lambda_aux))
    } else {
        None
    };
    let total = total_loss(tape, l_clip, graph_term, aux_term)?;
    Ok(LossTerms {
        total,
        l_clip,
        graph: graph_term.map(|(v, _)| v),
        aux: aux_term.map(|(v, _)| v),
        e_v: fwd.e_v,
        e_t: fwd.e_t,
    })
}

#[allow(clippy::too_many_arguments)]
fn training_step(
    params: &mut ModelParams,
    data: &LabeledDataset,
    ds_nodes: &[usize],
    adjacency: &Tensor,
    masks: &HopMasks,
    config: &TrainConfig,
    weights: &LossWeights,
    lr_cfg: &LrConfig,
    mult: f64,
    adam: &mut Adam,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let (vars, named) = params.register(&mut tape)?;
    let terms = build_total_loss(
        &mut tape,
        params,
        &vars,
        data,
        ds_nodes,
        adjacency,
        masks,
        config,
        weights,
        dropout_rng,
    )?;

    let stats = StepStats {
        l_total: tape.value(terms.total).item()?,
        l_clip: tape.value(terms.l_clip).item()?,
        l_graph: match terms.graph {
            Some(v) => tape.value(v).item()?,
            None => 0.0,
        },
        l_aux: match terms.aux {
            Some(v) => tape.value(v).item()?,
            None => 0.0,
        },
        alignment: alignment_score(tape.value(terms.e_v), tape.value(terms.e_t))?,
    };

    let total = terms.total;
    tape.backward(total)?;

    let groups: Vec<_> = named.iter().map(|(_, g, _)| *g).collect();
    let rates = assign_learning_rates(&groups, lr_cfg)?;
    let mut grads: BTreeMap<&str, (f64, &Tensor)> = BTreeMap::new();
    for ((name, _, var), rate) in named.iter().zip(rates.iter()) {
        if let Some(g) = tape.grad(*var) {
            grads.insert(name.as_str(), (*rate, g));
        }
    }

    adam.begin_step();
    let mut apply_err: Option<SlipError> = None;
    params.visit_mut(|name, _, tensor| {
        if apply_err.is_some() {
            return;
        }
        if let Some((rate, g)) = grads.get(name) {
            if let Err(e) = adam.update(name, tensor, g, rate * mult) {
                apply_err = Some(e);
            }
        }
    });
    if let Some(e) = apply_err {
        return Err(e);
    }
    params.temperature.clamp();
    Ok(stats)
}

/// Run the full optimization loop on the dataset's train split, validating
/// on its val split after every epoch. Deterministic for a given config:
/// initialization, batch sampling, and dropout draw from three independent
/// streams of the run seed.
pub fn train(data: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_split(data)?;
    let model_config = config.model_config(data)?;
    if config.aux_loss && data.labels.len() != data.n() {
        return Err(SlipError::InvalidInput(format!(
            "auxiliary loss needs one label per node: {} labels for {} nodes",
            data.labels.len(),
            data.n()
        )));
    }

    let mut init_rng = stream(config.seed, STREAM_INIT);
    let mut sample_rng = stream(config.seed, STREAM_SAMPLING);
    let mut dropout_rng = stream(config.seed, STREAM_DROPOUT);

    let mut params = ModelParams::init(model_config, &mut init_rng)?;
    let initial = params.clone();

    let never = CheckpointMeta {
        step: 0,
        epoch: 0,
        val_metric: f64::NAN,
    };
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            best: initial.clone(),
            best_meta: never.clone(),
            last: initial.clone(),
            last_meta: never,
            initial,
            step_log: Vec::new(),
            epoch_log: Vec::new(),
            stopped_early: false,
            steps_run: 0,
        });
    }

    let train_nodes = &data.split.train;
    if train_nodes.is_empty() {
        return Err(SlipError::InvalidInput("training split is empty".into()));
    }
    let train_graph = data.graph.induced(train_nodes)?;
    let eff_batch = config.batch_size.min(train_nodes.len());
    let steps_per_epoch = train_nodes.len().div_ceil(eff_batch);
    let total_steps = config.epochs * steps_per_epoch;
    if total_steps <= config.warmup_steps {
        return Err(SlipError::Config(format!(
            "total steps {} (epochs x steps-per-epoch) must exceed warmup_steps {}; \
             lower warmup_steps or raise epochs/batch count",
            total_steps, config.warmup_steps
        )));
    }

    let weights = LossWeights {
        lambda_graph: config.lambda_graph,
        lambda_aux: config.lambda_aux,
        ..LossWeights::default()
    };
    let lr_cfg = LrConfig {
        base_lr: config.base_lr,
        layer_decay: config.layer_decay,
        graph_lr: config.graph_lr,
        discriminative: config.dlr,
    };
    let mut adam = Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps)?;
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta)?;

    let mut step_log = Vec::new();
    let mut epoch_log = Vec::new();
    let mut best: Option<(ModelParams, CheckpointMeta)> = None;
    let mut last_val = f64::NAN;
    let mut stopped_early = false;
    let mut global_step = 0usize;
    let mut epochs_done = 0usize;

    'epochs: for epoch in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let mult = lr_schedule(global_step, total_steps, config.warmup_steps)?;
            let batch = sample_subgraph_batch(
                &train_graph,
                eff_batch,
                config.sampling,
                config.hop_threshold,
                &mut sample_rng,
            )?;
            let ds_nodes: Vec<usize> = batch.node_ids.iter().map(|&t| train_nodes[t]).collect();
            let stats = match training_step(
                &mut params,
                data,
                &ds_nodes,
                &batch.adjacency,
                &batch.masks,
                config,
                &weights,
                &lr_cfg,
                mult,
                &mut adam,
                &mut dropout_rng,
            ) {
                Ok(s) => s,
                Err(SlipError::NonFinite(_)) => {
                    return Err(SlipError::Divergence { step: global_step })
                }
                Err(e) => return Err(e),
            };
            step_log.push(format!(
                "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
                global_step,
                stats.l_total,
                stats.l_clip,
                stats.l_graph,
                stats.l_aux,
                stats.alignment,
                config.base_lr * mult
            ));
            global_step += 1;
        }
        epochs_done = epoch + 1;

        if !data.split.val.is_empty() {
            let (i2t, t2i) = retrieval_on_nodes(&params, data, &data.split.val)?;
            let metric = 0.5 * (i2t.mrr + t2i.mrr);
            last_val = metric;
            let decision = stopper.update(metric)?;
            let status = if decision.stop {
                "stop"
            } else if decision.improved {
                "improved"
            } else {
                "stale"
            };
            epoch_log.push(format!(
                "{}\t{:.6e}\t{:.6e}\t{:.6e}\t{}",
                epoch, i2t.mrr, t2i.mrr, metric, status
            ));
            if decision.improved {
                best = Some((
                    params.clone(),
                    CheckpointMeta {
                        step: global_step,
                        epoch: epochs_done,
                        val_metric: metric,
                    },
                ));
            }
            if decision.stop {
                stopped_early = true;
                break 'epochs;
            }
        }
    }

    let last_meta = CheckpointMeta {
        step: global_step,
        epoch: epochs_done,
        val_metric: last_val,
    };
    let (best, best_meta) = best.unwrap_or_else(|| (params.clone(), last_meta.clone()));
    Ok(TrainOutcome {
        initial,
        best,
        best_meta,
        last: params,
        last_meta,
        step_log,
        epoch_log,
        stopped_early,
        steps_run: global_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn tiny_dataset(seed: u64) -> LabeledDataset {
        let spec = SyntheticSpec {
            n_items: 60,
            n_clusters: 4,
            image_dim: 12,
            text_dim: 10,
            intra_cluster_edge_prob: 0.5,
            inter_cluster_edge_prob: 0.01,
            feature_noise_sigma: 0.05,
            seed,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec).unwrap().0
    }

    /// A config sized for a 60-node dataset: short warmup, few epochs, and a
    /// from-scratch-friendly encoder rate.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 3,
            warmup_steps: 2,
            base_lr: 1e-2,
            embed_dim: 8,
            gat_hidden: 8,
            gat_heads: 2,
            gat_dropout: 0.1,
            patience: 10,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn params_equal(a: &ModelParams, b: &ModelParams) -> bool {
        let mut av = Vec::new();
        a.visit(|name, _, t| av.push((name.to_string(), t.clone())));
        let mut bv = Vec::new();
        b.visit(|name, _, t| bv.push((name.to_string(), t.clone())));
        av == bv
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let data = tiny_dataset(3);
        let config = TrainConfig {
            embed_dim: 4,
            gat_hidden: 4,
            gat_heads: 2,
            ..tiny_config()
        };
        // A connected handful of nodes so the structural loss has positives.
        let anchor = data.split.train[0];
        let mut nodes = vec![anchor];
        for &n in data.graph.neighbors(anchor) {
            if nodes.len() < 5 {
                nodes.push(n as usize);
            }
        }
        let report = full_loss_grad_check(&data, &config, &nodes, 1e-5).unwrap();
        assert!(
            report.worst() < 1e-4,
            "worst relative gradient error {}",
            report.worst()
        );
        // Every parameter tensor was checked, classifier and all.
        assert!(report.per_tensor.iter().any(|(n, _)| n.starts_with("gat.")));
        assert!(report.per_tensor.iter().any(|(n, _)| n == "classifier.weight"));
        assert!(report.per_tensor.iter().any(|(n, _)| n == "temperature.t"));
    }

    #[test]
    fn config_lines_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 128;
        cfg.base_lr = 3e-4;
        cfg.sampling = SamplingStrategy::Uniform;
        cfg.encoder = EncoderKind::Table;
        cfg.graph_loss = false;
        let lines = cfg.to_lines();
        assert_eq!(lines.len(), CONFIG_KEYS.len());
        let back = TrainConfig::from_lines(&lines).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_keys_constant_matches_serialization() {
        let lines = TrainConfig::default().to_lines();
        let keys: Vec<&str> = lines
            .iter()
            .map(|l| l.split_once(" = ").unwrap().0)
            .collect();
        assert_eq!(keys, CONFIG_KEYS);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = TrainConfig::from_lines(&["learning_rate = 0.1"]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{}", err);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg =
            TrainConfig::from_lines(&["# a comment", "", "batch_size = 32", "seed = 5"]).unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set_key("batch_size", "many").is_err());
        assert!(cfg.set_key("graph_loss", "yes").is_err());
        assert!(cfg.set_key("sampling", "dfs").is_err());

        for (key, value) in [
            ("epochs", "51"),
            ("patience", "0"),
            ("base_lr", "0"),
            ("layer_decay", "1.5"),
            ("gat_dropout", "1"),
            ("hop_threshold", "0"),
            ("lambda_graph", "-0.1"),
            ("adam_beta1", "1"),
            ("train_frac", "0.9"),
        ] {
            let mut c = TrainConfig::default();
            c.set_key(key, value).unwrap();
            assert!(c.validate().is_err(), "{}={} should fail", key, value);
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = tiny_dataset(1);
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        cfg.graph_loss = false;
        cfg.aux_loss = false;
        cfg.dlr = false;
        let out = train(&data, &cfg).unwrap();
        assert!(out.step_log.is_empty());
        assert!(out.epoch_log.is_empty());
        assert_eq!(out.steps_run, 0);
        assert!(params_equal(&out.initial, &out.last));
        assert!(params_equal(&out.initial, &out.best));
        assert!(out.best_meta.val_metric.is_nan());
    }

    #[test]
    fn identical_runs_produce_identical_logs_and_params() {
        let data = tiny_dataset(2);
        let cfg = tiny_config();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.step_log, b.step_log);
        assert_eq!(a.epoch_log, b.epoch_log);
        assert!(params_equal(&a.last, &b.last));
        assert!(params_equal(&a.best, &b.best));
        assert_eq!(a.best_meta, b.best_meta);
    }

    #[test]
    fn different_seed_changes_the_run() {
        let data = tiny_dataset(2);
        let cfg = tiny_config();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &TrainConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.step_log, b.step_log);
    }

    #[test]
    fn step_log_shape_and_disabled_terms() {
        let data = tiny_dataset(3);
        let mut cfg = tiny_config();
        cfg.graph_loss = false;
        cfg.aux_loss = false;
        cfg.epochs = 1;
        cfg.warmup_steps = 1;
        let out = train(&data, &cfg).unwrap();
        // 36 train nodes (60 * 0.6), batch 16 -> ceil = 3 steps per epoch.
        assert_eq!(out.steps_run, 3);
        for (i, line) in out.step_log.iter().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 7);
            assert_eq!(cols[0], i.to_string());
            let l_graph: f64 = cols[3].parse().unwrap();
            let l_aux: f64 = cols[4].parse().unwrap();
            assert_eq!(l_graph, 0.0);
            assert_eq!(l_aux, 0.0);
        }
        // No structural parameters were created at all.
        let mut names = Vec::new();
        out.last.visit(|name, _, _| names.push(name.to_string()));
        assert!(names.iter().all(|n| !n.starts_with("gat.")));
        assert!(names.iter().all(|n| !n.starts_with("classifier.")));
    }

    #[test]
    fn scheduled_rate_rises_then_falls() {
        let data = tiny_dataset(4);
        let mut cfg = tiny_config();
        cfg.epochs = 4;
        cfg.warmup_steps = 3;
        let out = train(&data, &cfg).unwrap();
        let lrs: Vec<f64> = out
            .step_log
            .iter()
            .map(|l| l.split('\t').nth(6).unwrap().parse().unwrap())
            .collect();
        assert_eq!(lrs[0], 0.0);
        let peak = 3; // warmup boundary
        for w in lrs[..=peak].windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in lrs[peak..].windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(lrs[peak] <= cfg.base_lr + 1e-15);
    }

    #[test]
    fn training_improves_validation_retrieval() {
        let data = tiny_dataset(5);
        let mut cfg = tiny_config();
        cfg.epochs = 10;
        let out = train(&data, &cfg).unwrap();
        let (i2t0, t2i0) = retrieval_on_nodes(&out.initial, &data, &data.split.val).unwrap();
        let before = 0.5 * (i2t0.mrr + t2i0.mrr);
        let after = out.best_meta.val_metric;
        assert!(
            after > before + 0.05,
            "validation MRR did not improve: {} -> {}",
            before,
            after
        );
    }

    #[test]
    fn warmup_longer_than_run_is_rejected() {
        let data = tiny_dataset(6);
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        cfg.warmup_steps = 500;
        let err = train(&data, &cfg).unwrap_err();
        assert!(matches!(err, SlipError::Config(_)), "{}", err);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let mut data = tiny_dataset(7);
        data.split.val.append(&mut data.split.train);
        data.split.val.sort_unstable();
        let err = train(&data, &tiny_config()).unwrap_err();
        assert!(err.to_string().contains("training split"), "{}", err);
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let mut data = tiny_dataset(8);
        let stolen = data.split.test[0];
        data.split.train.push(stolen);
        assert!(train(&data, &tiny_config()).is_err());
    }

    #[test]
    fn loss_overflow_reports_divergence_with_step() {
        let data = tiny_dataset(9);
        let mut cfg = tiny_config();
        // A weight this large overflows the scaled loss term to infinity on
        // the very first step.
        cfg.lambda_graph = f64::MAX;
        cfg.lambda_aux = f64::MAX;
        match train(&data, &cfg) {
            Err(SlipError::Divergence { step }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn early_stopping_cuts_the_run_short() {
        let data = tiny_dataset(10);
        let mut cfg = tiny_config();
        // Zero learning rates produce identical parameters every epoch, so
        // the validation metric is flat and patience must trigger.
        cfg.base_lr = 1e-30;
        cfg.graph_lr = 1e-30;
        cfg.epochs = 10;
        cfg.patience = 2;
        cfg.warmup_steps = 1;
        let out = train(&data, &cfg).unwrap();
        assert!(out.stopped_early);
        // 1 improving epoch (first eval) + 2 stale epochs.
        assert_eq!(out.epoch_log.len(), 3);
        assert!(out.epoch_log[2].ends_with("stop"));
        assert_eq!(out.best_meta.epoch, 1);
    }

    #[test]
    fn clip_only_config_has_no_structural_or_classifier_state() {
        let data = tiny_dataset(11);
        let mut cfg = tiny_config();
        cfg.graph_loss = false;
        cfg.aux_loss = false;
        cfg.dlr = false;
        cfg.epochs = 1;
        cfg.warmup_steps = 1;
        let out = train(&data, &cfg).unwrap();
        let mut names = Vec::new();
        out.last.visit(|name, _, _| names.push(name.to_string()));
        // Image weight+bias, text weight+bias, temperature.
        assert_eq!(
            names,
            vec![
                "enc.image.weight",
                "enc.image.bias",
                "enc.text.weight",
                "enc.text.bias",
                "temperature.t"
            ]
        );
    }

    #[test]
    fn batch_larger_than_train_split_is_clamped() {
        let data = tiny_dataset(12);
        let mut cfg = tiny_config();
        cfg.batch_size = 10_000;
        cfg.epochs = 2;
        cfg.warmup_steps = 1;
        let out = train(&data, &cfg).unwrap();
        // One step per epoch once the batch covers the whole split.
        assert_eq!(out.steps_run, 2);
    }
}
