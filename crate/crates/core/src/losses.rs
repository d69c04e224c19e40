//! Training objectives.
//!
//! The contrastive losses run entirely in `f64`: similarities and their
//! gradients go through `dgemm`, and the aggregator hands the resulting
//! embedding-level gradients back to each device as `f32` matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, log_softmax_slice, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// SimCLR-style denominator that also contains the positive pair.
    pub denominator_includes_positive: bool,
    /// Treat the centroid as a constant when differentiating.
    pub stop_gradient_centroid: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.2, denominator_includes_positive: false, stop_gradient_centroid: false }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { temperature: 3.0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Loss value with its gradient w.r.t. the (student) input.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
}

#[derive(Debug, Clone)]
pub struct ConsensusOutput {
    pub loss: f64,
    /// `∂L/∂z'_k` for every device, same shapes as the inputs
    pub grads: Vec<Matrix>,
    /// number of NT-Xent pair terms `l(·,·)` evaluated
    pub pair_terms: usize,
}

/// One NT-Xent term `l(z_i, z_j)`: positive pair `(z_i, z_j)` contrasted with
/// `z_i` against the other samples' embeddings `negatives`.
pub fn ntxent_term(
    z_i: &[f32],
    z_j: &[f32],
    negatives: &[&[f32]],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    cfg.validate()?;
    if negatives.is_empty() {
        return Err(Error::InvalidBatch("NT-Xent needs at least one negative".into()));
    }
    let pos = cosine_similarity(z_i, z_j)? / cfg.tau;
    let mut logits = negatives
        .iter()
        .map(|neg| cosine_similarity(z_i, neg).map(|s| s / cfg.tau))
        .collect::<Result<Vec<_>>>()?;
    if cfg.denominator_includes_positive {
        logits.push(pos);
    }
    Ok(crate::numerics::lse_slice(&logits) - pos)
}

/// Row-major `f64` matrix used by the contrastive kernels.
#[derive(Debug, Clone)]
struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `c += a · bᵀ` (when `bt`) or `c += a · b`, with `a` optionally transposed.
    fn gemm_into(a: &Dense, at: bool, b: &Dense, bt: bool, c: &mut Dense) {
        let (m, k) = if at { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let n = if bt { b.rows } else { b.cols };
        assert_eq!(if bt { b.cols } else { b.rows }, k);
        assert_eq!((c.rows, c.cols), (m, n));
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        let (rsa, csa) = if at { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if bt { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        // SAFETY: strides describe in-bounds views; shapes asserted above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                1.0,
                c.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Rows scaled to unit length, keeping the original norms.
struct UnitRows {
    unit: Dense,
    norms: Vec<f64>,
}

impl UnitRows {
    fn new(values: &Dense, what: &str) -> Result<Self> {
        let mut unit = values.clone();
        let mut norms = Vec::with_capacity(values.rows);
        for i in 0..values.rows {
            let row = &mut unit.data[i * values.cols..(i + 1) * values.cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateVector(format!("{what}: zero embedding at row {i}")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(Self { unit, norms })
    }

    /// Maps a gradient w.r.t. the unit rows to one w.r.t. the raw rows:
    /// `(g − (g·û)û) / ‖z‖`.
    fn backprop(&self, grad_unit: &Dense) -> Dense {
        let mut out = grad_unit.clone();
        for i in 0..out.rows {
            let u = self.unit.row(i);
            let g = &mut out.data[i * out.cols..(i + 1) * out.cols];
            let dot: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
            for (gv, uv) in g.iter_mut().zip(u) {
                *gv = (*gv - dot * uv) / self.norms[i];
            }
        }
        out
    }
}

/// Both directional NT-Xent sums over one pair of aligned embedding sets.
///
/// With `S[x][x'] = sim(P_x, Q_x')`, the forward direction `l(P_x, Q_x)`
/// contrasts row `x` of `S`, and the reverse direction `l(Q_x, P_x)`
/// contrasts column `x`. Returns the summed loss and `∂/∂S`, both scaled
/// by `scale`.
fn pair_terms(s: &Dense, cfg: &ContrastiveConfig, scale: f64) -> (f64, Dense) {
    let n = s.rows;
    let tau = cfg.tau;
    let mut grad = Dense::zeros(n, n);
    let mut total = 0.0;
    let mut logits = Vec::with_capacity(n);
    let mut idx = Vec::with_capacity(n);
    for x in 0..n {
        for transpose in [false, true] {
            logits.clear();
            idx.clear();
            for other in 0..n {
                if other == x && !cfg.denominator_includes_positive {
                    continue;
                }
                let (r, c) = if transpose { (other, x) } else { (x, other) };
                logits.push(s.data[r * n + c] / tau);
                idx.push(r * n + c);
            }
            let pos = s.data[x * n + x] / tau;
            let log_probs = log_softmax_slice(&logits);
            let lse = logits[0] - log_probs[0];
            total += lse - pos;
            for (&flat, lp) in idx.iter().zip(&log_probs) {
                grad.data[flat] += scale * lp.exp() / tau;
            }
            grad.data[x * n + x] -= scale / tau;
        }
    }
    (scale * total, grad)
}

fn to_dense(m: &Matrix) -> Dense {
    Dense { rows: m.rows(), cols: m.cols(), data: m.data().iter().map(|&v| f64::from(v)).collect() }
}

fn to_matrix(d: &Dense) -> Result<Matrix> {
    Matrix::from_vec(d.rows, d.cols, d.data.iter().map(|&v| v as f32).collect())
}

fn check_embeddings(embeddings: &[Matrix]) -> Result<(usize, usize)> {
    let k = embeddings.len();
    if k < 2 {
        return Err(Error::InvalidBatch(format!("consensus loss needs K >= 2 devices, got {k}")));
    }
    let (n, d) = embeddings[0].shape();
    if n < 2 {
        return Err(Error::InvalidBatch(format!("consensus loss needs N >= 2 samples, got {n}")));
    }
    if let Some(bad) = embeddings.iter().find(|e| e.shape() != (n, d)) {
        return Err(Error::shape(format!(
            "device embeddings {}x{} differ from {n}x{d}",
            bad.rows(),
            bad.cols()
        )));
    }
    Ok((n, d))
}

/// Centroid consensus loss
/// `L = (1/K) Σ_k (1/2N) Σ_x [l(z'_{k,x}, z̄_x) + l(z̄_x, z'_{k,x})]`
/// with `z̄_x` the mean embedding of sample `x` over devices, and its
/// gradient w.r.t. every device's embeddings (through the centroid unless
/// `stop_gradient_centroid`).
pub fn consensus_loss(embeddings: &[Matrix], cfg: &ContrastiveConfig) -> Result<ConsensusOutput> {
    cfg.validate()?;
    let (n, d) = check_embeddings(embeddings)?;
    let k = embeddings.len();
    let dense: Vec<Dense> = embeddings.iter().map(to_dense).collect();

    let mut centroid = Dense::zeros(n, d);
    for e in &dense {
        for (c, v) in centroid.data.iter_mut().zip(&e.data) {
            *c += v;
        }
    }
    centroid.data.iter_mut().for_each(|c| *c /= k as f64);
    let centroid_unit = UnitRows::new(&centroid, "centroid")?;

    let scale = 1.0 / (2.0 * n as f64 * k as f64);
    let mut loss = 0.0;
    let mut grad_centroid_unit = Dense::zeros(n, d);
    let mut grads_unit = Vec::with_capacity(k);
    let mut units = Vec::with_capacity(k);
    for (dev, e) in dense.iter().enumerate() {
        let unit = UnitRows::new(e, &format!("device {dev}"))?;
        let mut s = Dense::zeros(n, n);
        Dense::gemm_into(&unit.unit, false, &centroid_unit.unit, true, &mut s);
        let (value, g) = pair_terms(&s, cfg, scale);
        loss += value;
        let mut gu = Dense::zeros(n, d);
        Dense::gemm_into(&g, false, &centroid_unit.unit, false, &mut gu);
        Dense::gemm_into(&g, true, &unit.unit, false, &mut grad_centroid_unit);
        grads_unit.push(gu);
        units.push(unit);
    }

    let grad_centroid = centroid_unit.backprop(&grad_centroid_unit);
    let grads = units
        .iter()
        .zip(&grads_unit)
        .map(|(unit, gu)| {
            let mut g = unit.backprop(gu);
            if !cfg.stop_gradient_centroid {
                for (gv, c) in g.data.iter_mut().zip(&grad_centroid.data) {
                    *gv += c / k as f64;
                }
            }
            to_matrix(&g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsensusOutput { loss, grads, pair_terms: 2 * k * n })
}

/// Reference loss over all device pairs: the mean over the `K(K−1)/2` pairs
/// of the symmetric NT-Xent `(1/2N) Σ_x [l(z'_{i,x}, z'_{j,x}) + l(z'_{j,x}, z'_{i,x})]`.
pub fn pairwise_consensus_loss(embeddings: &[Matrix], cfg: &ContrastiveConfig) -> Result<ConsensusOutput> {
    cfg.validate()?;
    let (n, d) = check_embeddings(embeddings)?;
    let k = embeddings.len();
    let units = embeddings
        .iter()
        .enumerate()
        .map(|(dev, e)| UnitRows::new(&to_dense(e), &format!("device {dev}")))
        .collect::<Result<Vec<_>>>()?;
    let pairs = k * (k - 1) / 2;
    let scale = 1.0 / (2.0 * n as f64 * pairs as f64);
    let mut grads_unit: Vec<Dense> = (0..k).map(|_| Dense::zeros(n, d)).collect();
    let mut loss = 0.0;
    let mut pair_count = 0;
    for i in 0..k {
        for j in i + 1..k {
            let mut s = Dense::zeros(n, n);
            Dense::gemm_into(&units[i].unit, false, &units[j].unit, true, &mut s);
            let (value, g) = pair_terms(&s, cfg, scale);
            loss += value;
            pair_count += 2 * n;
            Dense::gemm_into(&g, false, &units[j].unit, false, &mut grads_unit[i]);
            Dense::gemm_into(&g, true, &units[i].unit, false, &mut grads_unit[j]);
        }
    }
    let grads = units
        .iter()
        .zip(&grads_unit)
        .map(|(u, g)| to_matrix(&u.backprop(g)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsensusOutput { loss, grads, pair_terms: pair_count })
}

/// `L = T² Σ_x KL(softmax(m'_x/T) ‖ softmax(m_x/T))`, summed over the batch,
/// with the student logits `m'` first and the teacher `m` held constant.
pub fn distill_loss(student: &Matrix, teacher: &Matrix, cfg: &DistillConfig) -> Result<LossOutput> {
    cfg.validate()?;
    if student.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "student {:?} vs teacher {:?} logits",
            student.shape(),
            teacher.shape()
        )));
    }
    student.ensure_finite("student logits")?;
    teacher.ensure_finite("teacher logits")?;
    let t = cfg.temperature;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let mut total = 0.0;
    for x in 0..student.rows() {
        let s: Vec<f64> = student.row(x).iter().map(|&v| f64::from(v) / t).collect();
        let p: Vec<f64> = teacher.row(x).iter().map(|&v| f64::from(v) / t).collect();
        let log_q = log_softmax_slice(&s);
        let log_p = log_softmax_slice(&p);
        let diff: Vec<f64> = log_q.iter().zip(&log_p).map(|(a, b)| a - b).collect();
        let kl: f64 = log_q.iter().zip(&diff).map(|(lq, a)| lq.exp() * a).sum();
        total += kl;
        for ((g, lq), a) in grad.row_mut(x).iter_mut().zip(&log_q).zip(&diff) {
            *g = (t * lq.exp() * (a - kl)) as f32;
        }
    }
    Ok(LossOutput { value: t * t * total, grad })
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy(logits: &Matrix, labels: &[u32]) -> Result<LossOutput> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    logits.ensure_finite("logits")?;
    let c = logits.cols();
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidLabel { label, num_classes: c });
    }
    let n = logits.rows().max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows(), c);
    let mut total = 0.0;
    for (x, &label) in labels.iter().enumerate() {
        let wide: Vec<f64> = logits.row(x).iter().map(|&v| f64::from(v)).collect();
        let log_p = log_softmax_slice(&wide);
        total -= log_p[label as usize];
        for (j, (g, lp)) in grad.row_mut(x).iter_mut().zip(&log_p).enumerate() {
            let onehot = if j == label as usize { 1.0 } else { 0.0 };
            *g = ((lp.exp() - onehot) / n) as f32;
        }
    }
    Ok(LossOutput { value: total / n, grad })
}

#[cfg(test)]
mod tests;
