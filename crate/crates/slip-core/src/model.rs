//! The full dual-encoder model: per-modality encoders, the optional
//! structural tower, the optional auxiliary classifier, and the temperature.
//!
//! Parameters live here as plain tensors between steps; each training step
//! registers them on a fresh tape. Every tensor has a stable dotted name and
//! a learning-rate group, exposed through [`ModelParams::visit`] /
//! [`ModelParams::visit_mut`] in a fixed order, which keeps optimizer state,
//! checkpoints, and update application deterministic.

use crate::encoders::{
    encode_batch, register_encoder, EncoderParams, EncoderVars, FeatureStore, Modality,
};
use crate::error::{Result, SlipError};
use crate::gat::{
    forward_structural, register_structural, Activation, StructuralParams, StructuralVars,
};
use crate::losses::Temperature;
use crate::optim::ParamGroup;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// Which encoder family both towers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Linear projection of fixed per-item features.
    Linear,
    /// Learnable per-item embedding table.
    Table,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::Linear => write!(f, "linear"),
            EncoderKind::Table => write!(f, "table"),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = SlipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(EncoderKind::Linear),
            "table" => Ok(EncoderKind::Table),
            other => Err(SlipError::InvalidInput(format!(
                "unknown encoder kind '{}', expected 'linear' or 'table'",
                other
            ))),
        }
    }
}

/// Structure hyperparameters; everything needed to rebuild the parameter
/// shapes of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Shared embedding width d.
    pub embed_dim: usize,
    pub encoder_kind: EncoderKind,
    /// Raw feature width per modality (unused by table encoders).
    pub image_feat_dim: usize,
    pub text_feat_dim: usize,
    /// Item count (table encoders allocate one row per item).
    pub n_items: usize,
    /// Structural tower on/off and its shape.
    pub graph_enabled: bool,
    pub gat_hidden: usize,
    pub gat_heads: usize,
    pub gat_dropout: f64,
    pub leaky_slope: f64,
    pub fusion_activation: Activation,
    pub fusion_normalize: bool,
    /// Auxiliary classifier on/off and its label count.
    pub aux_enabled: bool,
    pub n_classes: usize,
    pub temp_init_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(SlipError::InvalidInput("embedding width must be positive".into()));
        }
        if self.encoder_kind == EncoderKind::Linear
            && (self.image_feat_dim == 0 || self.text_feat_dim == 0)
        {
            return Err(SlipError::InvalidInput(
                "linear encoders need positive feature dimensions".into(),
            ));
        }
        if self.encoder_kind == EncoderKind::Table && self.n_items == 0 {
            return Err(SlipError::InvalidInput(
                "table encoders need at least one item".into(),
            ));
        }
        if self.graph_enabled {
            if self.gat_heads == 0
                || self.gat_hidden % self.gat_heads != 0
                || self.embed_dim % self.gat_heads != 0
            {
                return Err(SlipError::InvalidInput(format!(
                    "hidden width {} and embedding width {} must be divisible by {} heads",
                    self.gat_hidden, self.embed_dim, self.gat_heads
                )));
            }
            if !(0.0..1.0).contains(&self.gat_dropout) {
                return Err(SlipError::InvalidInput(
                    "attention dropout must be in [0, 1)".into(),
                ));
            }
        }
        if self.aux_enabled && self.n_classes < 2 {
            return Err(SlipError::InvalidInput(
                "the classifier needs at least 2 classes".into(),
            ));
        }
        Ok(())
    }

    /// Serialize as sorted `key = value` lines (used inside checkpoints).
    pub fn to_lines(&self) -> Vec<String> {
        vec![
            format!("aux_enabled = {}", self.aux_enabled),
            format!("embed_dim = {}", self.embed_dim),
            format!("encoder_kind = {}", self.encoder_kind),
            format!("fusion_activation = {}", self.fusion_activation),
            format!("fusion_normalize = {}", self.fusion_normalize),
            format!("gat_dropout = {}", self.gat_dropout),
            format!("gat_heads = {}", self.gat_heads),
            format!("gat_hidden = {}", self.gat_hidden),
            format!("graph_enabled = {}", self.graph_enabled),
            format!("image_feat_dim = {}", self.image_feat_dim),
            format!("leaky_slope = {}", self.leaky_slope),
            format!("n_classes = {}", self.n_classes),
            format!("n_items = {}", self.n_items),
            format!("temp_init_scale = {}", self.temp_init_scale),
            format!("text_feat_dim = {}", self.text_feat_dim),
        ]
    }

    /// Parse the output of [`ModelConfig::to_lines`]. Every key must appear
    /// exactly once; unknown keys are rejected.
    pub fn from_lines(lines: &[String]) -> Result<Self> {
        let mut cfg = ModelConfig {
            embed_dim: 0,
            encoder_kind: EncoderKind::Linear,
            image_feat_dim: 0,
            text_feat_dim: 0,
            n_items: 0,
            graph_enabled: false,
            gat_hidden: 0,
            gat_heads: 1,
            gat_dropout: 0.0,
            leaky_slope: 0.2,
            fusion_activation: Activation::Elu,
            fusion_normalize: true,
            aux_enabled: false,
            n_classes: 0,
            temp_init_scale: 1.0,
        };
        let bad = |k: &str, v: &str| SlipError::Config(format!("bad value '{}' for key '{}'", v, k));
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SlipError::Config(format!("expected 'key = value', got '{}'", line)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "aux_enabled" => cfg.aux_enabled = value.parse().map_err(|_| bad(key, value))?,
                "embed_dim" => cfg.embed_dim = value.parse().map_err(|_| bad(key, value))?,
                "encoder_kind" => cfg.encoder_kind = value.parse()?,
                "fusion_activation" => cfg.fusion_activation = value.parse()?,
                "fusion_normalize" => {
                    cfg.fusion_normalize = value.parse().map_err(|_| bad(key, value))?
                }
                "gat_dropout" => cfg.gat_dropout = value.parse().map_err(|_| bad(key, value))?,
                "gat_heads" => cfg.gat_heads = value.parse().map_err(|_| bad(key, value))?,
                "gat_hidden" => cfg.gat_hidden = value.parse().map_err(|_| bad(key, value))?,
                "graph_enabled" => {
                    cfg.graph_enabled = value.parse().map_err(|_| bad(key, value))?
                }
                "image_feat_dim" => {
                    cfg.image_feat_dim = value.parse().map_err(|_| bad(key, value))?
                }
                "leaky_slope" => cfg.leaky_slope = value.parse().map_err(|_| bad(key, value))?,
                "n_classes" => cfg.n_classes = value.parse().map_err(|_| bad(key, value))?,
                "n_items" => cfg.n_items = value.parse().map_err(|_| bad(key, value))?,
                "temp_init_scale" => {
                    cfg.temp_init_scale = value.parse().map_err(|_| bad(key, value))?
                }
                "text_feat_dim" => {
                    cfg.text_feat_dim = value.parse().map_err(|_| bad(key, value))?
                }
                other => {
                    return Err(SlipError::Config(format!(
                        "unknown model config key '{}'",
                        other
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Weight/bias pair of the auxiliary classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub enc_image: EncoderParams,
    pub enc_text: EncoderParams,
    pub structural: Option<StructuralParams>,
    pub classifier: Option<LinearParams>,
    pub temperature: Temperature,
}

impl ModelParams {
    /// Fresh parameters per the config, Gaussian-initialized from `rng`.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (enc_image, enc_text) = match config.encoder_kind {
            EncoderKind::Linear => (
                EncoderParams::init_linear(config.image_feat_dim, config.embed_dim, rng),
                EncoderParams::init_linear(config.text_feat_dim, config.embed_dim, rng),
            ),
            EncoderKind::Table => (
                EncoderParams::init_table(config.n_items, config.embed_dim, rng),
                EncoderParams::init_table(config.n_items, config.embed_dim, rng),
            ),
        };
        let structural = if config.graph_enabled {
            let mut s = StructuralParams::init(
                config.embed_dim,
                config.gat_hidden,
                config.gat_heads,
                config.gat_dropout,
                config.leaky_slope,
                rng,
            )?;
            s.fusion.activation = config.fusion_activation;
            s.fusion.normalize = config.fusion_normalize;
            Some(s)
        } else {
            None
        };
        let classifier = if config.aux_enabled {
            let d_in = if config.graph_enabled {
                config.embed_dim
            } else {
                2 * config.embed_dim
            };
            let std = 1.0 / (d_in as f64).sqrt();
            Some(LinearParams {
                weight: Tensor::randn(d_in, config.n_classes, std, rng),
                bias: Tensor::zeros(1, config.n_classes),
            })
        } else {
            None
        };
        let temperature = Temperature::new(config.temp_init_scale)?;
        Ok(ModelParams {
            config,
            enc_image,
            enc_text,
            structural,
            classifier,
            temperature,
        })
    }

    /// Visit every tensor with its stable name and learning-rate group, in a
    /// fixed order.
    pub fn visit<F: FnMut(&str, ParamGroup, &Tensor)>(&self, mut f: F) {
        let enc = |f: &mut F, params: &EncoderParams, modality: Modality, prefix: &str| {
            let group = ParamGroup::Encoder { modality, depth: 0 };
            match params {
                EncoderParams::Linear { weight, bias, .. } => {
                    f(&format!("{}.weight", prefix), group, weight);
                    f(&format!("{}.bias", prefix), group, bias);
                }
                EncoderParams::Table { table, .. } => {
                    f(&format!("{}.table", prefix), group, table);
                }
            }
        };
        enc(&mut f, &self.enc_image, Modality::Image, "enc.image");
        enc(&mut f, &self.enc_text, Modality::Text, "enc.text");
        if let Some(s) = &self.structural {
            for (tower, layers) in [("image", &s.image_layers), ("text", &s.text_layers)] {
                for (li, layer) in layers.iter().enumerate() {
                    for (hi, head) in layer.heads.iter().enumerate() {
                        let base = format!("gat.{}.{}.h{}", tower, li, hi);
                        f(&format!("{}.weight", base), ParamGroup::Graph, &head.weight);
                        f(&format!("{}.attn_src", base), ParamGroup::Graph, &head.attn_src);
                        f(&format!("{}.attn_dst", base), ParamGroup::Graph, &head.attn_dst);
                    }
                }
            }
            f("fusion.weight", ParamGroup::Fusion, &s.fusion.weight);
            f("fusion.bias", ParamGroup::Fusion, &s.fusion.bias);
        }
        if let Some(c) = &self.classifier {
            f("classifier.weight", ParamGroup::Classifier, &c.weight);
            f("classifier.bias", ParamGroup::Classifier, &c.bias);
        }
        f("temperature.t", ParamGroup::Temperature, &self.temperature.t);
    }

    /// Mutable variant of [`ModelParams::visit`], same order.
    pub fn visit_mut<F: FnMut(&str, ParamGroup, &mut Tensor)>(&mut self, mut f: F) {
        let enc = |f: &mut F, params: &mut EncoderParams, modality: Modality, prefix: &str| {
            let group = ParamGroup::Encoder { modality, depth: 0 };
            match params {
                EncoderParams::Linear { weight, bias, .. } => {
                    f(&format!("{}.weight", prefix), group, weight);
                    f(&format!("{}.bias", prefix), group, bias);
                }
                EncoderParams::Table { table, .. } => {
                    f(&format!("{}.table", prefix), group, table);
                }
            }
        };
        enc(&mut f, &mut self.enc_image, Modality::Image, "enc.image");
        enc(&mut f, &mut self.enc_text, Modality::Text, "enc.text");
        if let Some(s) = &mut self.structural {
            for (tower, layers) in [
                ("image", &mut s.image_layers),
                ("text", &mut s.text_layers),
            ] {
                for (li, layer) in layers.iter_mut().enumerate() {
                    for (hi, head) in layer.heads.iter_mut().enumerate() {
                        let base = format!("gat.{}.{}.h{}", tower, li, hi);
                        f(&format!("{}.weight", base), ParamGroup::Graph, &mut head.weight);
                        f(
                            &format!("{}.attn_src", base),
                            ParamGroup::Graph,
                            &mut head.attn_src,
                        );
                        f(
                            &format!("{}.attn_dst", base),
                            ParamGroup::Graph,
                            &mut head.attn_dst,
                        );
                    }
                }
            }
            f("fusion.weight", ParamGroup::Fusion, &mut s.fusion.weight);
            f("fusion.bias", ParamGroup::Fusion, &mut s.fusion.bias);
        }
        if let Some(c) = &mut self.classifier {
            f("classifier.weight", ParamGroup::Classifier, &mut c.weight);
            f("classifier.bias", ParamGroup::Classifier, &mut c.bias);
        }
        f(
            "temperature.t",
            ParamGroup::Temperature,
            &mut self.temperature.t,
        );
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, t| n += t.len());
        n
    }

    /// Register everything on a tape. Returns the handles needed for forward
    /// passes plus the (name, group, var) list of trainable tensors, in visit
    /// order, for gradient collection.
    pub fn register(&self, tape: &mut Tape) -> Result<(ModelVars, Vec<(String, ParamGroup, Var)>)> {
        let mut named = Vec::new();

        let enc_image = register_encoder(tape, &self.enc_image)?;
        collect_encoder(&mut named, &enc_image, &self.enc_image, Modality::Image, "enc.image");
        let enc_text = register_encoder(tape, &self.enc_text)?;
        collect_encoder(&mut named, &enc_text, &self.enc_text, Modality::Text, "enc.text");

        let structural = match &self.structural {
            Some(s) => {
                let vars = register_structural(tape, s, true)?;
                for (tower, layers) in [("image", &vars.image_layers), ("text", &vars.text_layers)]
                {
                    for (li, layer) in layers.iter().enumerate() {
                        for (hi, head) in layer.heads.iter().enumerate() {
                            let base = format!("gat.{}.{}.h{}", tower, li, hi);
                            named.push((format!("{}.weight", base), ParamGroup::Graph, head.weight));
                            named.push((
                                format!("{}.attn_src", base),
                                ParamGroup::Graph,
                                head.attn_src,
                            ));
                            named.push((
                                format!("{}.attn_dst", base),
                                ParamGroup::Graph,
                                head.attn_dst,
                            ));
                        }
                    }
                }
                named.push(("fusion.weight".into(), ParamGroup::Fusion, vars.fusion.weight));
                named.push(("fusion.bias".into(), ParamGroup::Fusion, vars.fusion.bias));
                Some(vars)
            }
            None => None,
        };

        let classifier = match &self.classifier {
            Some(c) => {
                let weight = tape.param(c.weight.clone())?;
                let bias = tape.param(c.bias.clone())?;
                named.push(("classifier.weight".into(), ParamGroup::Classifier, weight));
                named.push(("classifier.bias".into(), ParamGroup::Classifier, bias));
                Some(ClassifierVars { weight, bias })
            }
            None => None,
        };

        let (t, scale) = self.temperature.register_scale(tape)?;
        if self.temperature.trainable {
            named.push(("temperature.t".into(), ParamGroup::Temperature, t));
        }

        Ok((
            ModelVars {
                enc_image,
                enc_text,
                structural,
                classifier,
                temp_scale: scale,
            },
            named,
        ))
    }

    /// Encode nodes with one tower outside any training step: no tape, no
    /// dropout. Returns unit-norm rows.
    pub fn encode_plain(
        &self,
        store: Option<&FeatureStore>,
        modality: Modality,
        node_ids: &[usize],
    ) -> Result<Tensor> {
        let params = match modality {
            Modality::Image => &self.enc_image,
            Modality::Text => &self.enc_text,
        };
        let raw = match params {
            EncoderParams::Linear { weight, bias, .. } => {
                let store = store.ok_or_else(|| {
                    SlipError::InvalidInput("linear encoder requires a feature store".into())
                })?;
                let x = store.batch_matrix(node_ids)?;
                let mut h = x.matmul(weight)?;
                for r in 0..h.rows() {
                    for c in 0..h.cols() {
                        let v = h.get(r, c) + bias.get(0, c);
                        h.set(r, c, v);
                    }
                }
                h
            }
            EncoderParams::Table { table, .. } => {
                let mut data = Vec::with_capacity(node_ids.len() * table.cols());
                for &v in node_ids {
                    if v >= table.rows() {
                        return Err(SlipError::InvalidInput(format!(
                            "node {} out of range for a table of {} rows",
                            v,
                            table.rows()
                        )));
                    }
                    data.extend_from_slice(table.row(v));
                }
                Tensor::new(node_ids.len(), table.cols(), data)?
            }
        };
        Ok(raw.l2_normalize_rows(crate::encoders::L2_EPS))
    }
}

fn collect_encoder(
    named: &mut Vec<(String, ParamGroup, Var)>,
    vars: &EncoderVars,
    params: &EncoderParams,
    modality: Modality,
    prefix: &str,
) {
    if !params.trainable() {
        return;
    }
    let group = ParamGroup::Encoder { modality, depth: 0 };
    match vars {
        EncoderVars::Linear { weight, bias } => {
            named.push((format!("{}.weight", prefix), group, *weight));
            named.push((format!("{}.bias", prefix), group, *bias));
        }
        EncoderVars::Table { table } => {
            named.push((format!("{}.table", prefix), group, *table));
        }
    }
}

/// Tape handles of the classifier head.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles of the whole model for one step.
pub struct ModelVars {
    pub enc_image: EncoderVars,
    pub enc_text: EncoderVars,
    pub structural: Option<StructuralVars>,
    pub classifier: Option<ClassifierVars>,
    /// Handle to exp(t), ready to scale similarity logits.
    pub temp_scale: Var,
}

/// Outputs of one training forward pass.
pub struct BatchForward {
    /// Encoder embeddings, b x d, unit rows.
    pub e_v: Var,
    pub e_t: Var,
    /// Fused structural embeddings, present when the tower is enabled.
    pub z: Option<Var>,
    /// Classifier logits, present when the auxiliary head is enabled.
    pub logits: Option<Var>,
}

/// Encode a batch through both towers and, when enabled, the structural
/// tower and classifier. `adjacency` is required when the tower is enabled.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch<R: Rng>(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ModelVars,
    image_store: Option<&FeatureStore>,
    text_store: Option<&FeatureStore>,
    node_ids: &[usize],
    adjacency: Option<&Tensor>,
    train: bool,
    rng: &mut R,
) -> Result<BatchForward> {
    let e_v = encode_batch(tape, image_store, &vars.enc_image, node_ids)?;
    let e_t = encode_batch(tape, text_store, &vars.enc_text, node_ids)?;

    let z = match (&params.structural, &vars.structural) {
        (Some(sp), Some(sv)) => {
            let adj = adjacency.ok_or_else(|| {
                SlipError::InvalidInput("structural forward needs the batch adjacency".into())
            })?;
            Some(forward_structural(tape, e_v, e_t, adj, sp, sv, train, rng)?)
        }
        (None, None) => None,
        _ => {
            return Err(SlipError::InvalidInput(
                "structural parameters and handles must be both present or both absent".into(),
            ))
        }
    };

    let logits = match &vars.classifier {
        Some(c) => {
            let input = match z {
                Some(z) => z,
                None => tape.concat_cols(e_v, e_t)?,
            };
            let h = tape.matmul(input, c.weight)?;
            Some(tape.add_bias(h, c.bias)?)
        }
        None => None,
    };

    Ok(BatchForward { e_v, e_t, z, logits })
}
