//! Small fitting helpers shared by the estimators and checks.

/// Least-squares line `y = a + b·x`; `None` for fewer than two distinct abscissae.
pub fn line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

pub fn slope(points: &[(f64, f64)]) -> Option<f64> {
    line(points).map(|(_, b)| b)
}

/// Aitken's Δ² extrapolation of the last three terms.
pub fn aitken(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 3 {
        return None;
    }
    let (a, b, c) = (x[n - 3], x[n - 2], x[n - 1]);
    let denom = c - 2.0 * b + a;
    if denom == 0.0 || !denom.is_finite() {
        return Some(c);
    }
    let v = c - (c - b).powi(2) / denom;
    v.is_finite().then_some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_recovers_exact_fit() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 - 0.5 * i as f64)).collect();
        let (a, b) = line(&pts).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b + 0.5).abs() < 1e-12);
        assert!(line(&pts[..1]).is_none());
    }

    #[test]
    fn aitken_is_exact_on_geometric_sequences() {
        let x: Vec<f64> = (0..6).map(|n| 3.0 + 0.7_f64.powi(n)).collect();
        assert!((aitken(&x).unwrap() - 3.0).abs() < 1e-12);
    }
}
