//! Central finite-difference gradient checking.
//!
//! The function under test is evaluated in `f64` so that the difference
//! quotient is not swamped by `f32` rounding; the analytic gradient being
//! checked is whatever the `f32` implementation produced.

/// One evaluation of a differentiable fragment: its scalar value and the
/// on/off pattern of every piecewise-linear unit it contains. Coordinates
/// whose perturbation flips that pattern straddle a kink and are skipped.
#[derive(Debug, Clone)]
pub struct Probe {
    pub value: f64,
    pub pattern: Vec<bool>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self {
            value,
            pattern: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Compares `analytic` against central differences of `f` at `x`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)` with
/// `floor = 1e-2 · max_j |n_j|`, so coordinates whose true gradient is
/// vanishingly small relative to the rest are judged on an absolute scale.
pub fn gradcheck<F>(mut f: F, x: &[f64], analytic: &[f32], h: f64) -> GradcheckReport
where
    F: FnMut(&[f64]) -> Probe,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let base = f(x);
    let mut point = x.to_vec();
    let mut numeric = vec![0.0f64; x.len()];
    let mut usable = vec![true; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        if plus.pattern != base.pattern || minus.pattern != base.pattern {
            usable[i] = false;
            continue;
        }
        numeric[i] = (plus.value - minus.value) / (2.0 * h);
    }
    let scale = numeric
        .iter()
        .zip(&usable)
        .filter(|(_, &u)| u)
        .fold(0.0f64, |m, (n, _)| m.max(n.abs()));
    let floor = (1e-2 * scale).max(1e-12);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped_kinks: 0,
    };
    for i in 0..x.len() {
        if !usable[i] {
            report.skipped_kinks += 1;
            continue;
        }
        report.checked += 1;
        let a = analytic[i] as f64;
        let n = numeric[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = Σ x_i², ∇f = 2x
        let x = [0.3, -1.2, 2.0];
        let g: Vec<f32> = x.iter().map(|v| (2.0 * v) as f32).collect();
        let r = gradcheck(
            |p| Probe::smooth(p.iter().map(|v| v * v).sum()),
            &x,
            &g,
            1e-3,
        );
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_detected() {
        let x = [1.0, 2.0];
        let r = gradcheck(|p| Probe::smooth(p[0] * p[1]), &x, &[2.0, 2.0], 1e-3);
        assert!(r.max_rel_error > 0.4);
        assert_eq!(r.worst_index, Some(1));
    }

    #[test]
    fn kinks_are_skipped() {
        // |x| around 0 flips the sign pattern
        let x = [1e-4, 3.0];
        let f = |p: &[f64]| Probe {
            value: p[0].abs() + p[1],
            pattern: vec![p[0] > 0.0],
        };
        let r = gradcheck(f, &x, &[1.0, 1.0], 1e-3);
        assert_eq!(r.skipped_kinks, 1);
        assert!(r.max_rel_error < 1e-9);
    }
}
