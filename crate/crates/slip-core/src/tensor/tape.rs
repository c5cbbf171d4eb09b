//! Wengert tape for reverse-mode differentiation.
//!
//! Every operation pushes its result onto the tape and, when any input
//! requires a gradient, records a backward closure. [`Tape::backward`] seeds
//! the loss gradient with 1 and replays the records in reverse, accumulating
//! into per-value gradient buffers. Gradients of values reached along several
//! paths add up, which is exactly the multivariate chain rule.

use super::Tensor;
use crate::error::{Result, SlipError};
use rand::Rng;

/// Handle to a value stored on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient callback: receives all stored values, the gradient flowing into
/// the record's output, and the mutable gradient buffers to accumulate into.
type BackwardFn = Box<dyn Fn(&[Tensor], &Tensor, &mut [Option<Tensor>])>;

struct Record {
    out: usize,
    backward: BackwardFn,
}

/// Arena of tensors plus the operation records connecting them.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    requires: Vec<bool>,
    records: Vec<Record>,
    grads: Vec<Option<Tensor>>,
}

/// Logit offset used to exclude entries from a softmax. Finite so that every
/// intermediate stays finite, yet large enough that `exp` underflows to zero.
pub const MASK_OFF: f64 = -1e30;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of values stored so far.
    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, t: Tensor, requires: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(SlipError::NonFinite(
                "operation produced a non-finite value".into(),
            ));
        }
        self.vals.push(t);
        self.requires.push(requires);
        Ok(Var(self.vals.len() - 1))
    }

    /// Store a constant. No gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, false)
    }

    /// Store a trainable value. `backward` will produce a gradient for it.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, true)
    }

    /// Borrow the tensor behind a handle.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    /// `None` if backward has not run or nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    fn record(&mut self, out: Var, backward: BackwardFn) {
        self.records.push(Record { out: out.0, backward });
    }

    fn shape_err(&self, op: &str, vars: &[Var]) -> SlipError {
        let shapes: Vec<String> = vars
            .iter()
            .map(|v| {
                let (r, c) = self.vals[v.0].shape();
                format!("{}x{}", r, c)
            })
            .collect();
        SlipError::Shape(format!("{} on operands {}", op, shapes.join(", ")))
    }

    /// Matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.vals[a.0].matmul(&self.vals[b.0])?;
        let out = self.push(t, self.requires(&[a, b]))?;
        if self.requires(&[a, b]) {
            let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
            self.record(
                out,
                Box::new(move |vals, g, grads| {
                    if ra {
                        let da = g.matmul(&vals[b.0].transpose()).expect("matmul grad shape");
                        accumulate(grads, a.0, da);
                    }
                    if rb {
                        let db = vals[a.0].transpose().matmul(g).expect("matmul grad shape");
                        accumulate(grads, b.0, db);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.vals[x.0].transpose();
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            self.record(
                out,
                Box::new(move |_, g, grads| accumulate(grads, x.0, g.transpose())),
            );
        }
        Ok(out)
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.vals[a.0]
            .add(&self.vals[b.0])
            .map_err(|_| self.shape_err("add", &[a, b]))?;
        let out = self.push(t, self.requires(&[a, b]))?;
        if self.requires(&[a, b]) {
            let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
            self.record(
                out,
                Box::new(move |_, g, grads| {
                    if ra {
                        accumulate(grads, a.0, g.clone());
                    }
                    if rb {
                        accumulate(grads, b.0, g.clone());
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Add a 1 x cols bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = &self.vals[x.0];
        let bv = &self.vals[bias.0];
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(self.shape_err("add_bias", &[x, bias]));
        }
        let mut t = xv.clone();
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                let v = t.get(r, c) + bv.get(0, c);
                t.set(r, c, v);
            }
        }
        let out = self.push(t, self.requires(&[x, bias]))?;
        if self.requires(&[x, bias]) {
            let (rx, rb) = (self.requires[x.0], self.requires[bias.0]);
            self.record(
                out,
                Box::new(move |_, g, grads| {
                    if rx {
                        accumulate(grads, x.0, g.clone());
                    }
                    if rb {
                        let mut db = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for c in 0..g.cols() {
                                let v = db.get(0, c) + g.get(r, c);
                                db.set(0, c, v);
                            }
                        }
                        accumulate(grads, bias.0, db);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Elementwise (Hadamard) product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.vals[a.0]
            .mul(&self.vals[b.0])
            .map_err(|_| self.shape_err("mul", &[a, b]))?;
        let out = self.push(t, self.requires(&[a, b]))?;
        if self.requires(&[a, b]) {
            let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
            self.record(
                out,
                Box::new(move |vals, g, grads| {
                    if ra {
                        accumulate(grads, a.0, g.mul(&vals[b.0]).expect("mul grad shape"));
                    }
                    if rb {
                        accumulate(grads, b.0, g.mul(&vals[a.0]).expect("mul grad shape"));
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.vals[x.0].scale(c);
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            self.record(
                out,
                Box::new(move |_, g, grads| accumulate(grads, x.0, g.scale(c))),
            );
        }
        Ok(out)
    }

    /// Multiply every entry of `x` by a 1x1 tape value `s`. Both operands can
    /// receive gradients, which is how the learnable temperature trains.
    pub fn scale_by_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.vals[s.0].item().map_err(|_| self.shape_err("scale_by_var", &[s]))?;
        let t = self.vals[x.0].scale(sv);
        let out = self.push(t, self.requires(&[x, s]))?;
        if self.requires(&[x, s]) {
            let (rx, rs) = (self.requires[x.0], self.requires[s.0]);
            self.record(
                out,
                Box::new(move |vals, g, grads| {
                    let sv = vals[s.0].data()[0];
                    if rx {
                        accumulate(grads, x.0, g.scale(sv));
                    }
                    if rs {
                        let ds = g.mul(&vals[x.0]).expect("scale grad shape").sum();
                        accumulate(grads, s.0, Tensor::scalar(ds));
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.vals[x.0].map(f64::exp);
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            let out_idx = out.0;
            self.record(
                out,
                Box::new(move |vals, g, grads| {
                    accumulate(grads, x.0, g.mul(&vals[out_idx]).expect("exp grad shape"));
                }),
            );
        }
        Ok(out)
    }

    /// Horizontal concatenation `[a | b]`; row counts must match.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.vals[a.0];
        let bv = &self.vals[b.0];
        if av.rows() != bv.rows() {
            return Err(self.shape_err("concat_cols", &[a, b]));
        }
        let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let t = Tensor::new(rows, ca + cb, data)?;
        let out = self.push(t, self.requires(&[a, b]))?;
        if self.requires(&[a, b]) {
            let (ra, rb) = (self.requires[a.0], self.requires[b.0]);
            self.record(
                out,
                Box::new(move |_, g, grads| {
                    if ra {
                        let mut da = Tensor::zeros(rows, ca);
                        for r in 0..rows {
                            for c in 0..ca {
                                da.set(r, c, g.get(r, c));
                            }
                        }
                        accumulate(grads, a.0, da);
                    }
                    if rb {
                        let mut db = Tensor::zeros(rows, cb);
                        for r in 0..rows {
                            for c in 0..cb {
                                db.set(r, c, g.get(r, ca + c));
                            }
                        }
                        accumulate(grads, b.0, db);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Leaky ReLU with the given negative-side slope. At exactly zero the
    /// negative-side slope applies.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = self.vals[x.0].map(|v| if v > 0.0 { v } else { slope * v });
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            self.record(
                out,
                Box::new(move |vals, g, grads| {
                    let xv = &vals[x.0];
                    let mut d = g.clone();
                    for i in 0..d.len() {
                        if xv.data()[i] <= 0.0 {
                            d.data_mut()[i] *= slope;
                        }
                    }
                    accumulate(grads, x.0, d);
                }),
            );
        }
        Ok(out)
    }

    /// Exponential linear unit: x for x > 0, exp(x) - 1 otherwise.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let t = self.vals[x.0].map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            let out_idx = out.0;
            self.record(
                out,
                Box::new(move |vals, g, grads| {
                    let xv = &vals[x.0];
                    let yv = &vals[out_idx];
                    let mut d = g.clone();
                    for i in 0..d.len() {
                        if xv.data()[i] <= 0.0 {
                            // dy/dx = exp(x) = y + 1 on the negative side
                            d.data_mut()[i] *= yv.data()[i] + 1.0;
                        }
                    }
                    accumulate(grads, x.0, d);
                }),
            );
        }
        Ok(out)
    }

    /// Inverted dropout. In training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate) so the
    /// expectation is unchanged. In eval mode this is the identity and the
    /// RNG is not consumed. `rate` must lie in [0, 1).
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(SlipError::InvalidInput(format!(
                "dropout rate must be in [0, 1), got {}",
                rate
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let xv = &self.vals[x.0];
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let mask = Tensor::new(xv.rows(), xv.cols(), mask)?;
        let t = xv.mul(&mask)?;
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            self.record(
                out,
                Box::new(move |_, g, grads| {
                    accumulate(grads, x.0, g.mul(&mask).expect("dropout grad shape"));
                }),
            );
        }
        Ok(out)
    }

    /// Mean of all entries, as a 1x1 value.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.vals[x.0];
        if xv.is_empty() {
            return Err(SlipError::InvalidInput("mean of an empty tensor".into()));
        }
        let n = xv.len() as f64;
        let (rows, cols) = xv.shape();
        let t = Tensor::scalar(xv.sum() / n);
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            self.record(
                out,
                Box::new(move |_, g, grads| {
                    let gv = g.data()[0] / n;
                    accumulate(grads, x.0, Tensor::filled(rows, cols, gv));
                }),
            );
        }
        Ok(out)
    }

    /// Sum of `x` weighted entrywise by a constant mask of the same shape:
    /// `sum(x * mask)` as a 1x1 value. The mask gets no gradient.
    pub fn masked_sum(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xv = &self.vals[x.0];
        if xv.shape() != mask.shape() {
            return Err(SlipError::Shape(format!(
                "masked_sum on {}x{} with mask {}x{}",
                xv.rows(),
                xv.cols(),
                mask.rows(),
                mask.cols()
            )));
        }
        let t = Tensor::scalar(xv.mul(mask)?.sum());
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            let mask = mask.clone();
            self.record(
                out,
                Box::new(move |_, g, grads| {
                    accumulate(grads, x.0, mask.scale(g.data()[0]));
                }),
            );
        }
        Ok(out)
    }

    /// Sum of all entries, as a 1x1 value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor::filled(self.vals[x.0].rows(), self.vals[x.0].cols(), 1.0);
        self.masked_sum(x, &ones)
    }

    /// Log-softmax within each row.
    pub fn row_log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.vals[x.0];
        if xv.cols() == 0 || xv.rows() == 0 {
            return Err(SlipError::InvalidInput("log-softmax of an empty tensor".into()));
        }
        let t = xv.row_log_softmax();
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            let out_idx = out.0;
            self.record(
                out,
                Box::new(move |vals, g, grads| {
                    let y = &vals[out_idx];
                    let (rows, cols) = y.shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gsum: f64 = g.row(r).iter().sum();
                        for c in 0..cols {
                            let p = y.get(r, c).exp();
                            d.set(r, c, g.get(r, c) - p * gsum);
                        }
                    }
                    accumulate(grads, x.0, d);
                }),
            );
        }
        Ok(out)
    }

    /// L2-normalize each row; rows with norm at most `eps` are divided by
    /// `eps` instead, keeping the map differentiable everywhere.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(SlipError::InvalidInput(format!(
                "normalization eps must be positive, got {}",
                eps
            )));
        }
        let t = self.vals[x.0].l2_normalize_rows(eps);
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            let out_idx = out.0;
            self.record(
                out,
                Box::new(move |vals, g, grads| {
                    let xv = &vals[x.0];
                    let yv = &vals[out_idx];
                    let (rows, cols) = xv.shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let n = xv.row_norm(r);
                        if n > eps {
                            // d/dx (x/|x|) applied to g: (g - y (g.y)) / |x|
                            let gy: f64 = g
                                .row(r)
                                .iter()
                                .zip(yv.row(r).iter())
                                .map(|(a, b)| a * b)
                                .sum();
                            for c in 0..cols {
                                d.set(r, c, (g.get(r, c) - yv.get(r, c) * gy) / n);
                            }
                        } else {
                            for c in 0..cols {
                                d.set(r, c, g.get(r, c) / eps);
                            }
                        }
                    }
                    accumulate(grads, x.0, d);
                }),
            );
        }
        Ok(out)
    }

    /// Select rows of `x` by index, duplicates allowed. The backward pass
    /// scatter-adds gradients into the source rows, so a row selected twice
    /// accumulates both contributions.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = &self.vals[x.0];
        let cols = xv.cols();
        let src_rows = xv.rows();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= src_rows {
                return Err(SlipError::InvalidInput(format!(
                    "row index {} out of range for {} rows",
                    i, src_rows
                )));
            }
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(indices.len(), cols, data)?;
        let out = self.push(t, self.requires[x.0])?;
        if self.requires[x.0] {
            let indices = indices.to_vec();
            self.record(
                out,
                Box::new(move |_, g, grads| {
                    let mut d = Tensor::zeros(src_rows, cols);
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            let v = d.get(i, c) + g.get(r, c);
                            d.set(i, c, v);
                        }
                    }
                    accumulate(grads, x.0, d);
                }),
            );
        }
        Ok(out)
    }

    /// Run reverse accumulation from a 1x1 loss value. Clears any gradients
    /// from a previous call first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.vals[loss.0];
        if lv.shape() != (1, 1) {
            return Err(SlipError::Shape(format!(
                "backward requires a 1x1 loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        self.grads = vec![None; self.vals.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            if let Some(g) = self.grads[rec.out].clone() {
                (rec.backward)(&self.vals, &g, &mut self.grads);
            }
        }
        self.records = records;
        Ok(())
    }
}

/// Add `delta` into the gradient slot for value `idx`.
fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(g) => {
            *g = g.add(&delta).expect("gradient shape mismatch");
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
}
