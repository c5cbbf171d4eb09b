//! Training objectives: symmetric InfoNCE over matched image/text pairs, the
//! structural contrastive term driven by hop masks, an auxiliary
//! classification term, and their weighted sum.
//!
//! All losses are built from tape operations so gradients flow back through
//! the encoders and the structural tower. Each term is the mean of negative
//! log-probabilities, hence non-negative.

use crate::error::{Result, SlipError};
use crate::graph::HopMasks;
use crate::tensor::{Tape, Tensor, Var};

/// Hard ceiling on the temperature's logit multiplier exp(t).
pub const MAX_TEMP_SCALE: f64 = 100.0;

/// Weights of the loss terms. A weight of exactly zero disables its term: the
/// corresponding forward pass is skipped entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_graph: f64,
    pub lambda_aux: f64,
    /// Added to the positive-pair count in the structural loss denominator
    /// so batches without positives stay finite.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_graph: 0.05,
            lambda_aux: 0.1,
            epsilon: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_graph < 0.0 || self.lambda_aux < 0.0 {
            return Err(SlipError::InvalidInput(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.epsilon <= 0.0 {
            return Err(SlipError::InvalidInput(
                "loss epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learnable softmax temperature, stored as the log of the logit multiplier:
/// similarity matrices are scaled by exp(t). The scale is clamped from above
/// after every optimizer step so it can never exceed [`MAX_TEMP_SCALE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    /// 1x1 tensor holding t = ln(scale).
    pub t: Tensor,
    pub trainable: bool,
}

impl Temperature {
    /// Start from a given multiplier; `initial_scale` must be positive and at
    /// most [`MAX_TEMP_SCALE`].
    pub fn new(initial_scale: f64) -> Result<Self> {
        if initial_scale <= 0.0 || initial_scale > MAX_TEMP_SCALE {
            return Err(SlipError::InvalidInput(format!(
                "temperature scale must be in (0, {}], got {}",
                MAX_TEMP_SCALE, initial_scale
            )));
        }
        Ok(Temperature {
            t: Tensor::scalar(initial_scale.ln()),
            trainable: true,
        })
    }

    /// Current logit multiplier exp(t).
    pub fn scale(&self) -> f64 {
        self.t.data()[0].exp()
    }

    /// Clamp the multiplier back to the ceiling if an update pushed it over.
    pub fn clamp(&mut self) {
        let max_t = MAX_TEMP_SCALE.ln();
        if self.t.data()[0] > max_t {
            self.t.data_mut()[0] = max_t;
        }
    }

    /// Register on a tape and return the handle to exp(t), the multiplier
    /// used by the similarity logits. Gradients reach t through the exp.
    pub fn register_scale(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let t = if self.trainable {
            tape.param(self.t.clone())?
        } else {
            tape.input(self.t.clone())?
        };
        let scale = tape.exp(t)?;
        Ok((t, scale))
    }
}

/// Symmetric InfoNCE over a batch of matched pairs.
///
/// Row i of `e_v` and row i of `e_t` are a positive pair; all other rows act
/// as in-batch negatives. Logits are `exp(t) * E_v E_t^T`; the loss averages
/// the image-to-text and text-to-image cross entropies against the diagonal.
/// `scale` must be the handle returned by [`Temperature::register_scale`].
pub fn clip_infonce(tape: &mut Tape, e_v: Var, e_t: Var, scale: Var) -> Result<Var> {
    let (b, d) = tape.value(e_v).shape();
    if tape.value(e_t).shape() != (b, d) {
        return Err(SlipError::Shape(format!(
            "embedding shapes differ: {}x{} vs {}x{}",
            b,
            d,
            tape.value(e_t).rows(),
            tape.value(e_t).cols()
        )));
    }
    if b == 0 {
        return Err(SlipError::InvalidInput("empty batch in contrastive loss".into()));
    }
    let et_t = tape.transpose(e_t)?;
    let sim = tape.matmul(e_v, et_t)?;
    let logits_v = tape.scale_by_var(sim, scale)?;
    let logits_t = tape.transpose(logits_v)?;

    let mut eye = Tensor::zeros(b, b);
    for i in 0..b {
        eye.set(i, i, 1.0);
    }
    let ce_against_diagonal = |tape: &mut Tape, logits: Var| -> Result<Var> {
        let lp = tape.row_log_softmax(logits)?;
        let picked = tape.masked_sum(lp, &eye)?;
        tape.scale(picked, -1.0 / b as f64)
    };
    let ce_v = ce_against_diagonal(tape, logits_v)?;
    let ce_t = ce_against_diagonal(tape, logits_t)?;
    let s = tape.add(ce_v, ce_t)?;
    tape.scale(s, 0.5)
}

/// Structural contrastive loss over fused embeddings.
///
/// Similarities `S = exp(t) * Z Z^T` are row-log-softmaxed and the
/// log-probabilities of all positive pairs (per `masks`) are averaged:
/// `-(sum over positives of log p) / (count + epsilon)`. By default the
/// softmax denominator runs over the whole row including the anchor itself;
/// `exclude_self` removes the anchor from the denominator.
pub fn structural_loss(
    tape: &mut Tape,
    z: Var,
    masks: &HopMasks,
    scale: Var,
    weights: &LossWeights,
    exclude_self: bool,
) -> Result<Var> {
    weights.validate()?;
    let b = tape.value(z).rows();
    if b == 0 {
        return Err(SlipError::InvalidInput("empty batch in structural loss".into()));
    }
    if masks.b() != b {
        return Err(SlipError::Shape(format!(
            "masks cover {} nodes, batch has {}",
            masks.b(),
            b
        )));
    }
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let mut logits = tape.scale_by_var(sim, scale)?;
    if exclude_self {
        let mut diag_off = Tensor::zeros(b, b);
        for i in 0..b {
            diag_off.set(i, i, crate::tensor::MASK_OFF);
        }
        let off = tape.input(diag_off)?;
        logits = tape.add(logits, off)?;
    }
    let lp = tape.row_log_softmax(logits)?;
    let pos = masks.pos_tensor();
    let total = tape.masked_sum(lp, &pos)?;
    let denom = masks.pos_count() as f64 + weights.epsilon;
    tape.scale(total, -1.0 / denom)
}

/// Mean cross entropy of a linear classifier's logits against integer labels.
/// Labels must lie in `[0, logits.cols())`.
pub fn aux_classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).shape();
    if labels.len() != b {
        return Err(SlipError::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            b
        )));
    }
    if b == 0 {
        return Err(SlipError::InvalidInput("empty batch in classification loss".into()));
    }
    let mut onehot = Tensor::zeros(b, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(SlipError::InvalidInput(format!(
                "label {} out of range for {} classes",
                y, c
            )));
        }
        onehot.set(i, y, 1.0);
    }
    let lp = tape.row_log_softmax(logits)?;
    let picked = tape.masked_sum(lp, &onehot)?;
    tape.scale(picked, -1.0 / b as f64)
}

/// Weighted sum of the loss terms. Optional terms come paired with their
/// weights; a `None` or a zero weight contributes nothing.
pub fn total_loss(
    tape: &mut Tape,
    l_clip: Var,
    graph_term: Option<(Var, f64)>,
    aux_term: Option<(Var, f64)>,
) -> Result<Var> {
    let mut total = l_clip;
    for (term, weight) in [graph_term, aux_term].into_iter().flatten() {
        if weight != 0.0 {
            let scaled = tape.scale(term, weight)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Mean dot product of matched rows: `(1/b) * sum_i e_v[i] . e_t[i]`. With
/// unit-norm rows this is the mean cosine similarity of matched pairs.
pub fn alignment_score(e_v: &Tensor, e_t: &Tensor) -> Result<f64> {
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
        return Err(SlipError::InvalidInput("empty batch in alignment score".into()));
    }
    let b = e_v.rows();
    let mut total = 0.0;
    for i in 0..b {
        total += e_v
            .row(i)
            .iter()
            .zip(e_t.row(i).iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    Ok(total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_masks, hop_distance_matrix, InstanceGraph};
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(rows, cols, 1.0, &mut rng).l2_normalize_rows(1e-12)
    }

    fn fixed_scale(tape: &mut Tape, s: f64) -> Var {
        let t = tape.input(Tensor::scalar(s.ln())).unwrap();
        tape.exp(t).unwrap()
    }

    /// Reference InfoNCE computed entry by entry with plain loops.
    fn clip_reference(e_v: &Tensor, e_t: &Tensor, scale: f64) -> f64 {
        let b = e_v.rows();
        let logits = e_v.matmul(&e_t.transpose()).unwrap().scale(scale);
        let lp_v = logits.row_log_softmax();
        let lp_t = logits.transpose().row_log_softmax();
        let mut total = 0.0;
        for i in 0..b {
            total += -lp_v.get(i, i) - lp_t.get(i, i);
        }
        total / (2.0 * b as f64)
    }

    #[test]
    fn clip_matches_loop_reference() {
        for seed in 0..5 {
            let b = 2 + seed as usize * 3;
            let e_v = unit_rows(b, 6, seed);
            let e_t = unit_rows(b, 6, seed + 50);
            for s in [1.0, 7.0] {
                let mut tape = Tape::new();
                let v = tape.input(e_v.clone()).unwrap();
                let t = tape.input(e_t.clone()).unwrap();
                let scale = fixed_scale(&mut tape, s);
                let loss = clip_infonce(&mut tape, v, t, scale).unwrap();
                let expected = clip_reference(&e_v, &e_t, s);
                assert!(
                    (tape.value(loss).item().unwrap() - expected).abs() <= 1e-10,
                    "seed {} scale {}",
                    seed,
                    s
                );
            }
        }
    }

    #[test]
    fn clip_single_pair_is_zero() {
        // One pair: softmax over a single logit is 1, so the loss vanishes.
        let mut tape = Tape::new();
        let v = tape.input(unit_rows(1, 4, 1)).unwrap();
        let t = tape.input(unit_rows(1, 4, 2)).unwrap();
        let scale = fixed_scale(&mut tape, 10.0);
        let loss = clip_infonce(&mut tape, v, t, scale).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn clip_identical_embeddings_closed_form() {
        // Two orthogonal pairs with E_v = E_t and scale 1: every row of the
        // logit matrix is a permutation of [1, 0], so each cross entropy is
        // ln(1 + e^-1)... computed directly instead: logits [[1,0],[0,1]].
        // Row softmax gives p(correct) = e / (e + 1), loss = ln(e + 1) - 1.
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.input(e.clone()).unwrap();
        let t = tape.input(e).unwrap();
        let scale = fixed_scale(&mut tape, 1.0);
        let loss = clip_infonce(&mut tape, v, t, scale).unwrap();
        let expected = (1.0 + std::f64::consts::E).ln() - 1.0;
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn clip_is_permutation_invariant() {
        let b = 5;
        let e_v = unit_rows(b, 4, 3);
        let e_t = unit_rows(b, 4, 4);
        let perm = [3usize, 1, 4, 0, 2];
        let permute = |m: &Tensor| {
            let mut out = Tensor::zeros(b, 4);
            for i in 0..b {
                for c in 0..4 {
                    out.set(i, c, m.get(perm[i], c));
                }
            }
            out
        };
        let run = |ev: &Tensor, et: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.input(ev.clone()).unwrap();
            let t = tape.input(et.clone()).unwrap();
            let scale = fixed_scale(&mut tape, 5.0);
            let loss = clip_infonce(&mut tape, v, t, scale).unwrap();
            tape.value(loss).item().unwrap()
        };
        let a = run(&e_v, &e_t);
        let b2 = run(&permute(&e_v), &permute(&e_t));
        assert!((a - b2).abs() < 1e-12);
    }

    #[test]
    fn clip_gradient_check_including_temperature() {
        let e_v = unit_rows(4, 3, 7);
        let e_t = unit_rows(4, 3, 8);
        // With respect to image embeddings.
        let err = grad_check(
            |tape, v| {
                let t = tape.input(e_t.clone())?;
                let scale = fixed_scale(tape, 3.0);
                clip_infonce(tape, v, t, scale)
            },
            &e_v,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "embedding gradient error {}", err);
        // With respect to the raw temperature parameter t.
        let t0 = Tensor::scalar(1.2);
        let err = grad_check(
            |tape, tv| {
                let v = tape.input(e_v.clone())?;
                let t = tape.input(e_t.clone())?;
                let scale = tape.exp(tv)?;
                clip_infonce(tape, v, t, scale)
            },
            &t0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "temperature gradient error {}", err);
    }

    fn masks_for_path(b: usize, h: u32) -> HopMasks {
        let ids: Vec<String> = (0..b).map(|i| format!("n{}", i)).collect();
        let edges: Vec<(u32, u32, u32)> = (0..b as u32 - 1).map(|i| (i, i + 1, 1)).collect();
        let g = InstanceGraph::from_edges(ids, &edges).unwrap();
        let nodes: Vec<usize> = (0..b).collect();
        let d = hop_distance_matrix(&g, &nodes, h).unwrap();
        build_masks(&d, h).unwrap()
    }

    /// Reference structural loss with explicit loops.
    fn structural_reference(
        z: &Tensor,
        masks: &HopMasks,
        scale: f64,
        eps: f64,
        exclude_self: bool,
    ) -> f64 {
        let b = z.rows();
        let s = z.matmul(&z.transpose()).unwrap().scale(scale);
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..b {
            // log softmax denominator over row i
            let mut denom = 0.0f64;
            let row_max = (0..b)
                .filter(|&k| !(exclude_self && k == i))
                .map(|k| s.get(i, k))
                .fold(f64::NEG_INFINITY, f64::max);
            for k in 0..b {
                if exclude_self && k == i {
                    continue;
                }
                denom += (s.get(i, k) - row_max).exp();
            }
            let log_denom = denom.ln() + row_max;
            for j in 0..b {
                if masks.pos(i, j) {
                    total += s.get(i, j) - log_denom;
                    count += 1;
                }
            }
        }
        assert_eq!(count, masks.pos_count());
        -total / (count as f64 + eps)
    }

    #[test]
    fn structural_matches_loop_reference() {
        for seed in 0..5 {
            let b = 4 + seed as usize * 2;
            let z = unit_rows(b, 5, seed + 20);
            let masks = masks_for_path(b, 1);
            let w = LossWeights::default();
            for exclude_self in [false, true] {
                let mut tape = Tape::new();
                let zv = tape.input(z.clone()).unwrap();
                let scale = fixed_scale(&mut tape, 4.0);
                let loss =
                    structural_loss(&mut tape, zv, &masks, scale, &w, exclude_self).unwrap();
                let expected = structural_reference(&z, &masks, 4.0, w.epsilon, exclude_self);
                assert!(
                    (tape.value(loss).item().unwrap() - expected).abs() <= 1e-10,
                    "seed {} exclude_self {}",
                    seed,
                    exclude_self
                );
            }
        }
    }

    #[test]
    fn structural_with_no_positives_is_zero() {
        // Two disconnected nodes: the positive mask is empty and epsilon in
        // the denominator keeps the loss finite, exactly zero.
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let g = InstanceGraph::from_edges(ids, &[(0, 1, 1)]).unwrap();
        let d = hop_distance_matrix(&g, &[0, 2], 1).unwrap();
        let masks = build_masks(&d, 1).unwrap();
        assert_eq!(masks.pos_count(), 0);

        let mut tape = Tape::new();
        let z = tape.input(unit_rows(2, 4, 30)).unwrap();
        let scale = fixed_scale(&mut tape, 2.0);
        let loss =
            structural_loss(&mut tape, z, &masks, scale, &LossWeights::default(), false).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn structural_duplicate_positive_rows_count_each() {
        // A triangle makes every ordered pair positive; the loss is the mean
        // over all six ordered positives.
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let g = InstanceGraph::from_edges(ids, &[(0, 1, 1), (1, 2, 1), (0, 2, 1)]).unwrap();
        let d = hop_distance_matrix(&g, &[0, 1, 2], 1).unwrap();
        let masks = build_masks(&d, 1).unwrap();
        assert_eq!(masks.pos_count(), 6);
        let z = unit_rows(3, 4, 31);
        let mut tape = Tape::new();
        let zv = tape.input(z.clone()).unwrap();
        let scale = fixed_scale(&mut tape, 1.0);
        let w = LossWeights::default();
        let loss = structural_loss(&mut tape, zv, &masks, scale, &w, false).unwrap();
        let expected = structural_reference(&z, &masks, 1.0, w.epsilon, false);
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn structural_gradient_check() {
        let masks = masks_for_path(5, 2);
        let z0 = unit_rows(5, 4, 32);
        let w = LossWeights::default();
        for exclude_self in [false, true] {
            let err = grad_check(
                |tape, z| {
                    let scale = fixed_scale(tape, 6.0);
                    structural_loss(tape, z, &masks, scale, &w, exclude_self)
                },
                &z0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "structural gradient error {}", err);
        }
    }

    #[test]
    fn structural_loss_is_non_negative() {
        for seed in 40..50 {
            let b = 6;
            let z = unit_rows(b, 3, seed);
            let masks = masks_for_path(b, 1);
            let mut tape = Tape::new();
            let zv = tape.input(z).unwrap();
            let scale = fixed_scale(&mut tape, 10.0);
            let loss =
                structural_loss(&mut tape, zv, &masks, scale, &LossWeights::default(), false)
                    .unwrap();
            assert!(tape.value(loss).item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn aux_uniform_logits_give_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::zeros(4, 7)).unwrap();
        let loss = aux_classification_loss(&mut tape, logits, &[0, 3, 6, 2]).unwrap();
        assert!((tape.value(loss).item().unwrap() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_confident_correct_logit_drives_loss_to_zero() {
        let mut m = Tensor::zeros(2, 3);
        m.set(0, 1, 50.0);
        m.set(1, 2, 50.0);
        let mut tape = Tape::new();
        let logits = tape.input(m).unwrap();
        let loss = aux_classification_loss(&mut tape, logits, &[1, 2]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-12);
    }

    #[test]
    fn aux_rejects_bad_labels() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::zeros(2, 3)).unwrap();
        assert!(aux_classification_loss(&mut tape, logits, &[0, 3]).is_err());
        assert!(aux_classification_loss(&mut tape, logits, &[0]).is_err());
    }

    #[test]
    fn aux_matches_loop_reference_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let logits0 = Tensor::randn(5, 4, 1.0, &mut rng);
        let labels = [2usize, 0, 3, 1, 1];
        // Loop reference.
        let lp = logits0.row_log_softmax();
        let expected = -(0..5).map(|i| lp.get(i, labels[i])).sum::<f64>() / 5.0;
        let mut tape = Tape::new();
        let l = tape.input(logits0.clone()).unwrap();
        let loss = aux_classification_loss(&mut tape, l, &labels).unwrap();
        assert!((tape.value(loss).item().unwrap() - expected).abs() <= 1e-10);
        // Gradient.
        let err = grad_check(
            |tape, l| aux_classification_loss(tape, l, &labels),
            &logits0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "classification gradient error {}", err);
    }

    #[test]
    fn total_loss_combines_weighted_terms() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::scalar(2.0)).unwrap();
        let b = tape.input(Tensor::scalar(3.0)).unwrap();
        let c = tape.input(Tensor::scalar(5.0)).unwrap();
        let total = total_loss(&mut tape, a, Some((b, 0.05)), Some((c, 0.1))).unwrap();
        assert!((tape.value(total).item().unwrap() - (2.0 + 0.15 + 0.5)).abs() < 1e-12);
        // Zero weight and None both contribute nothing.
        let total = total_loss(&mut tape, a, Some((b, 0.0)), None).unwrap();
        assert_eq!(tape.value(total).item().unwrap(), 2.0);
    }

    #[test]
    fn alignment_score_bounds_and_identity() {
        let e = unit_rows(6, 5, 70);
        assert!((alignment_score(&e, &e).unwrap() - 1.0).abs() < 1e-12);
        let neg = e.scale(-1.0);
        assert!((alignment_score(&e, &neg).unwrap() + 1.0).abs() < 1e-12);
        // Independent random unit vectors in 32 dimensions concentrate near 0.
        for seed in 0..10 {
            let a = unit_rows(64, 32, 100 + seed);
            let b = unit_rows(64, 32, 200 + seed);
            let s = alignment_score(&a, &b).unwrap();
            assert!(s.abs() < 0.15, "seed {} alignment {}", seed, s);
        }
    }

    #[test]
    fn temperature_clamps_at_ceiling() {
        let mut t = Temperature::new(50.0).unwrap();
        assert!((t.scale() - 50.0).abs() < 1e-12);
        t.t.data_mut()[0] = (250.0f64).ln();
        t.clamp();
        assert!((t.scale() - MAX_TEMP_SCALE).abs() < 1e-9);
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(150.0).is_err());
    }

    #[test]
    fn losses_stay_finite_under_extreme_temperature() {
        let e_v = unit_rows(4, 3, 80);
        let e_t = unit_rows(4, 3, 81);
        let mut tape = Tape::new();
        let v = tape.input(e_v).unwrap();
        let t = tape.input(e_t).unwrap();
        let scale = fixed_scale(&mut tape, MAX_TEMP_SCALE);
        let loss = clip_infonce(&mut tape, v, t, scale).unwrap();
        assert!(tape.value(loss).item().unwrap().is_finite());
    }
}
