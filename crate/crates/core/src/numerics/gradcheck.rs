use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|g_a - g_n| / max(1, |g_a|, |g_n|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares an analytic gradient against central differences.
///
/// `f` returns the scalar value and its analytic gradient (same shape as
/// `params`). Each coordinate is perturbed by `±h`; the difference quotient
/// divides by the step actually representable in `f32`, so rounding of the
/// perturbed parameter does not leak into the estimate.
pub fn grad_check<F>(f: F, params: &Matrix, h: f32) -> GradCheckReport
where
    F: FnMut(&Matrix) -> (f64, Matrix),
{
    check(f, params, h, false)
}

/// Like [`grad_check`], but combines central differences at `h` and `h/2`
/// (Richardson, `(4·D(h/2) − D(h)) / 3`) so the truncation error is
/// `O(h⁴)`. Needed when `f` runs in single precision: a step small enough
/// for plain central differences drowns in `f32` rounding of the value.
pub fn grad_check_richardson<F>(f: F, params: &Matrix, h: f32) -> GradCheckReport
where
    F: FnMut(&Matrix) -> (f64, Matrix),
{
    check(f, params, h, true)
}

fn check<F>(mut f: F, params: &Matrix, h: f32, richardson: bool) -> GradCheckReport
where
    F: FnMut(&Matrix) -> (f64, Matrix),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.shape(), params.shape(), "gradient shape must match params");

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = params.clone();
    let mut central = |probe: &mut Matrix, i: usize, step: f32| {
        let x = params.data()[i];
        let (plus, minus) = (x + step, x - step);
        probe.data_mut()[i] = plus;
        let (f_plus, _) = f(probe);
        probe.data_mut()[i] = minus;
        let (f_minus, _) = f(probe);
        probe.data_mut()[i] = x;
        (f_plus - f_minus) / (f64::from(plus) - f64::from(minus))
    };
    for i in 0..params.len() {
        let numeric = if richardson {
            let coarse = central(&mut probe, i, h);
            let fine = central(&mut probe, i, h / 2.0);
            (4.0 * fine - coarse) / 3.0
        } else {
            central(&mut probe, i, h)
        };
        let ga = f64::from(analytic.data()[i]);
        let rel = (ga - numeric).abs() / 1f64.max(ga.abs()).max(numeric.abs());
        if rel > report.max_rel_error || i == 0 {
            report = GradCheckReport { max_rel_error: rel, worst_index: i, analytic: ga, numeric };
        }
    }
    report
}
