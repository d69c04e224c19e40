use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::numerics::Rng;

fn check_finite(values: &[f32], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite logits")));
    }
    Ok(())
}

/// Temperature softmax with max subtraction, computed in `f64`.
pub fn softmax(logits: &[f32], temperature: f64) -> Result<Vec<f32>> {
    Ok(softmax_f64(logits, temperature)?.into_iter().map(|p| p as f32).collect())
}

pub fn softmax_f64(logits: &[f32], temperature: f64) -> Result<Vec<f64>> {
    check_finite(logits, "softmax")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("softmax temperature {temperature} must be positive")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    let scaled: Vec<f64> = logits.iter().map(|&v| f64::from(v) / temperature).collect();
    Ok(softmax_slice(&scaled))
}

/// Softmax of already finite `f64` values.
pub(crate) fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_softmax_slice(values: &[f64]) -> Vec<f64> {
    let lse = lse_slice(values);
    values.iter().map(|v| v - lse).collect()
}

pub(crate) fn lse_slice(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log Σ exp(m_i)`, stable under large magnitudes.
pub fn log_sum_exp(logits: &[f32]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("log_sum_exp of empty vector"));
    }
    check_finite(logits, "log_sum_exp")?;
    let wide: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
    Ok(lse_slice(&wide))
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// A zero vector has no direction, so it is an error rather than 0.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value by power iteration on `WᵀW`.
///
/// Stops once the estimate changes by less than `tol` relative between
/// iterations; otherwise returns the last estimate with `converged = false`.
pub fn spectral_norm(w: &Matrix, iters: usize, tol: f64) -> Result<SpectralNorm> {
    if w.is_empty() {
        return Err(Error::invalid("spectral norm of empty matrix"));
    }
    let (rows, cols) = w.shape();
    let a: Vec<f64> = w.data().iter().map(|&v| f64::from(v)).collect();

    // fixed pseudo-random start so the result is deterministic
    let mut rng = Rng::new(0x5EC7_0A11);
    let mut v: Vec<f64> = (0..cols).map(|_| 1.0 + 0.1 * rng.normal()).collect();
    normalize(&mut v);

    let mut sigma = 0.0f64;
    let mut wv = vec![0.0f64; rows];
    for it in 1..=iters.max(1) {
        for (i, out) in wv.iter_mut().enumerate() {
            *out = a[i * cols..(i + 1) * cols].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let mut next = vec![0.0f64; cols];
        for (i, &s) in wv.iter().enumerate() {
            for (n, x) in next.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
                *n += x * s;
            }
        }
        // Rayleigh quotient of WᵀW at unit v
        let estimate = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm = normalize(&mut next);
        if norm == 0.0 {
            // v is in the null space; W is zero on the whole start direction
            return Ok(SpectralNorm { value: estimate, converged: true, iterations: it });
        }
        v = next;
        if it > 1 && (estimate - sigma).abs() <= tol * estimate.max(f64::MIN_POSITIVE) {
            return Ok(SpectralNorm { value: estimate, converged: true, iterations: it });
        }
        sigma = estimate;
    }
    Ok(SpectralNorm { value: sigma, converged: false, iterations: iters })
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Elementwise ReLU.
pub fn relu(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&v| v.max(0.0)).collect()
}

/// Euclidean norm accumulated in `f64`.
pub fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

pub fn l2_distance(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
