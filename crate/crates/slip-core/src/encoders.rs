//! Per-modality feature stores and batch encoders.
//!
//! The desk-scale stand-in for a heavyweight image or text backbone is a
//! single linear projection from fixed per-item feature vectors into the
//! shared embedding space, followed by row L2 normalization. A learnable
//! embedding table (one trainable row per item) is available as an
//! alternative for datasets without precomputed features.

use crate::error::{Result, SlipError};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// Norm floor used whenever rows are rescaled to unit length.
pub const L2_EPS: f64 = 1e-12;

/// Which tower a feature store or encoder belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Text => write!(f, "text"),
        }
    }
}

impl FromStr for Modality {
    type Err = SlipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(SlipError::InvalidInput(format!(
                "unknown modality '{}', expected 'image' or 'text'",
                other
            ))),
        }
    }
}

/// Fixed raw feature vectors for one modality, indexed by dense node id.
/// Slots start empty and are filled by [`FeatureStore::insert`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    modality: Modality,
    dim: usize,
    features: Vec<Option<Vec<f64>>>,
}

impl FeatureStore {
    /// An empty store with `n` slots of dimension `dim`.
    pub fn new(modality: Modality, dim: usize, n: usize) -> Result<Self> {
        if dim == 0 {
            return Err(SlipError::InvalidInput(
                "feature dimension must be at least 1".into(),
            ));
        }
        Ok(FeatureStore {
            modality,
            dim,
            features: vec![None; n],
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of slots (filled or not).
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Fill one slot. The vector must match the store dimension and be finite.
    pub fn insert(&mut self, node: usize, vec: Vec<f64>) -> Result<()> {
        if node >= self.features.len() {
            return Err(SlipError::InvalidInput(format!(
                "node {} out of range for {} slots",
                node,
                self.features.len()
            )));
        }
        if vec.len() != self.dim {
            return Err(SlipError::Shape(format!(
                "feature of dimension {} in a store of dimension {}",
                vec.len(),
                self.dim
            )));
        }
        if !vec.iter().all(|v| v.is_finite()) {
            return Err(SlipError::InvalidInput(format!(
                "non-finite feature value for node {}",
                node
            )));
        }
        self.features[node] = Some(vec);
        Ok(())
    }

    pub fn get(&self, node: usize) -> Option<&[f64]> {
        self.features.get(node).and_then(|f| f.as_deref())
    }

    /// Number of slots still missing a vector.
    pub fn missing_count(&self) -> usize {
        self.features.iter().filter(|f| f.is_none()).count()
    }

    /// Stack the features of `node_ids` into a b x dim matrix. Every
    /// requested node must have a stored vector.
    pub fn batch_matrix(&self, node_ids: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(node_ids.len() * self.dim);
        for &v in node_ids {
            match self.get(v) {
                Some(f) => data.extend_from_slice(f),
                None => {
                    return Err(SlipError::InvalidInput(format!(
                        "no {} feature stored for node {}",
                        self.modality, v
                    )))
                }
            }
        }
        Tensor::new(node_ids.len(), self.dim, data)
    }
}

/// Trainable parameters of one modality encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams {
    /// Linear projection of fixed features: `z = l2_normalize(x W + b)`.
    Linear {
        /// dim_in x d projection.
        weight: Tensor,
        /// 1 x d bias row.
        bias: Tensor,
        trainable: bool,
    },
    /// Free embedding table with one row per item, L2-normalized per batch.
    Table {
        /// n x d table.
        table: Tensor,
        trainable: bool,
    },
}

impl EncoderParams {
    /// Fresh linear encoder with Gaussian weights scaled by 1/sqrt(dim_in).
    pub fn init_linear<R: Rng>(dim_in: usize, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim_in as f64).sqrt();
        EncoderParams::Linear {
            weight: Tensor::randn(dim_in, d, std, rng),
            bias: Tensor::zeros(1, d),
            trainable: true,
        }
    }

    /// Fresh embedding table with Gaussian rows scaled by 1/sqrt(d).
    pub fn init_table<R: Rng>(n: usize, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        EncoderParams::Table {
            table: Tensor::randn(n, d, std, rng),
            trainable: true,
        }
    }

    /// Embedding dimension produced by this encoder.
    pub fn out_dim(&self) -> usize {
        match self {
            EncoderParams::Linear { weight, .. } => weight.cols(),
            EncoderParams::Table { table, .. } => table.cols(),
        }
    }

    pub fn trainable(&self) -> bool {
        match self {
            EncoderParams::Linear { trainable, .. } => *trainable,
            EncoderParams::Table { trainable, .. } => *trainable,
        }
    }
}

/// Tape handles for one registered encoder.
#[derive(Debug, Clone, Copy)]
pub enum EncoderVars {
    Linear { weight: Var, bias: Var },
    Table { table: Var },
}

/// Put the encoder's tensors onto a tape. Trainable parameters become tape
/// params (they receive gradients); frozen ones become constants.
pub fn register_encoder(tape: &mut Tape, params: &EncoderParams) -> Result<EncoderVars> {
    let reg = |tape: &mut Tape, t: &Tensor, trainable: bool| -> Result<Var> {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.input(t.clone())
        }
    };
    Ok(match params {
        EncoderParams::Linear {
            weight,
            bias,
            trainable,
        } => EncoderVars::Linear {
            weight: reg(tape, weight, *trainable)?,
            bias: reg(tape, bias, *trainable)?,
        },
        EncoderParams::Table { table, trainable } => EncoderVars::Table {
            table: reg(tape, table, *trainable)?,
        },
    })
}

/// Encode a batch of nodes into unit-norm embeddings (b x d).
///
/// Linear encoders read raw vectors from `store`; table encoders index their
/// own rows and ignore the store (pass `None`).
pub fn encode_batch(
    tape: &mut Tape,
    store: Option<&FeatureStore>,
    vars: &EncoderVars,
    node_ids: &[usize],
) -> Result<Var> {
    if node_ids.is_empty() {
        return Err(SlipError::InvalidInput("cannot encode an empty batch".into()));
    }
    let raw = match vars {
        EncoderVars::Linear { weight, bias } => {
            let store = store.ok_or_else(|| {
                SlipError::InvalidInput("linear encoder requires a feature store".into())
            })?;
            let x = tape.input(store.batch_matrix(node_ids)?)?;
            let h = tape.matmul(x, *weight)?;
            tape.add_bias(h, *bias)?
        }
        EncoderVars::Table { table } => tape.gather_rows(*table, node_ids)?,
    };
    tape.l2_normalize_rows(raw, L2_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(rows: &[Vec<f64>]) -> FeatureStore {
        let mut s = FeatureStore::new(Modality::Image, rows[0].len(), rows.len()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            s.insert(i, r.clone()).unwrap();
        }
        s
    }

    #[test]
    fn store_validates_inserts() {
        let mut s = FeatureStore::new(Modality::Text, 3, 2).unwrap();
        assert!(s.insert(0, vec![1.0, 2.0]).is_err());
        assert!(s.insert(5, vec![1.0, 2.0, 3.0]).is_err());
        assert!(s.insert(0, vec![1.0, f64::NAN, 3.0]).is_err());
        assert!(s.insert(0, vec![1.0, 2.0, 3.0]).is_ok());
        assert_eq!(s.missing_count(), 1);
    }

    #[test]
    fn batch_matrix_requires_all_features() {
        let mut s = FeatureStore::new(Modality::Image, 2, 3).unwrap();
        s.insert(0, vec![1.0, 2.0]).unwrap();
        assert!(s.batch_matrix(&[0]).is_ok());
        assert!(s.batch_matrix(&[0, 1]).is_err());
    }

    #[test]
    fn identity_projection_returns_normalized_features() {
        let s = store_with(&[vec![3.0, 0.0], vec![0.0, 5.0]]);
        let params = EncoderParams::Linear {
            weight: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            bias: Tensor::zeros(1, 2),
            trainable: true,
        };
        let mut tape = Tape::new();
        let vars = register_encoder(&mut tape, &params).unwrap();
        let z = encode_batch(&mut tape, Some(&s), &vars, &[0, 1]).unwrap();
        let zt = tape.value(z);
        assert!(zt.approx_eq(
            &Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn encoded_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|_| Tensor::randn(1, 5, 1.0, &mut rng).data().to_vec())
            .collect();
        let s = store_with(&feats);
        let params = EncoderParams::init_linear(5, 3, &mut rng);
        let mut tape = Tape::new();
        let vars = register_encoder(&mut tape, &params).unwrap();
        let z = encode_batch(&mut tape, Some(&s), &vars, &[0, 1, 2, 3, 4, 5]).unwrap();
        for r in 0..6 {
            assert!((tape.value(z).row_norm(r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn table_encoder_indexes_rows() {
        let params = EncoderParams::Table {
            table: Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            trainable: true,
        };
        let mut tape = Tape::new();
        let vars = register_encoder(&mut tape, &params).unwrap();
        let z = encode_batch(&mut tape, None, &vars, &[2, 0]).unwrap();
        let v = tape.value(z);
        let inv = 1.0 / 2.0f64.sqrt();
        assert!(v.approx_eq(
            &Tensor::from_rows(&[vec![inv, inv], vec![1.0, 0.0]]).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let s = store_with(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = EncoderParams::init_linear(2, 2, &mut rng);
        if let EncoderParams::Linear { trainable, .. } = &mut params {
            *trainable = false;
        }
        let mut tape = Tape::new();
        let vars = register_encoder(&mut tape, &params).unwrap();
        let z = encode_batch(&mut tape, Some(&s), &vars, &[0, 1]).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        if let EncoderVars::Linear { weight, .. } = vars {
            assert!(tape.grad(weight).is_none());
        }
    }

    #[test]
    fn linear_encoder_gradient_is_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<Vec<f64>> = (0..4)
            .map(|_| Tensor::randn(1, 3, 1.0, &mut rng).data().to_vec())
            .collect();
        let s = store_with(&feats);
        let w0 = Tensor::randn(3, 2, 0.5, &mut rng);
        let err = grad_check(
            |tape, w| {
                let bias = tape.input(Tensor::zeros(1, 2))?;
                let vars = EncoderVars::Linear { weight: w, bias };
                let z = encode_batch(tape, Some(&s), &vars, &[0, 1, 2, 3])?;
                let m = Tensor::from_rows(&[
                    vec![0.3, -0.7],
                    vec![1.1, 0.2],
                    vec![-0.5, 0.9],
                    vec![0.8, -0.1],
                ])
                .unwrap();
                tape.masked_sum(z, &m)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "gradient error {}", err);
    }

    #[test]
    fn table_encoder_gradient_touches_only_batch_rows() {
        let t0 = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.3, 2.0], vec![0.5, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let table = tape.param(t0).unwrap();
        let vars = EncoderVars::Table { table };
        let z = encode_batch(&mut tape, None, &vars, &[1]).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(table).unwrap();
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert_eq!(g.row(2), &[0.0, 0.0]);
        assert!(g.row(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn modality_round_trips_through_strings() {
        for m in [Modality::Image, Modality::Text] {
            assert_eq!(m.to_string().parse::<Modality>().unwrap(), m);
        }
        assert!("audio".parse::<Modality>().is_err());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let params = EncoderParams::Table {
            table: Tensor::zeros(2, 2),
            trainable: true,
        };
        let mut tape = Tape::new();
        let vars = register_encoder(&mut tape, &params).unwrap();
        assert!(encode_batch(&mut tape, None, &vars, &[]).is_err());
    }
}
