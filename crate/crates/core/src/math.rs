//! Small numeric helpers shared across the crate.

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking logs
/// on any path that feeds a gradient.
pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

#[inline]
pub fn ln_clamped(p: f64) -> f64 {
    clamp_prob(p).ln()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

/// log σ(z), stable for large |z|.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// log(1 - exp(v)) for v <= 0.
#[inline]
pub fn log1mexp(v: f64) -> f64 {
    if v > -std::f64::consts::LN_2 {
        (-v.exp_m1()).ln()
    } else {
        (-v.exp()).ln_1p()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_logit_invert() {
        for &p in &[0.01, 0.3, 0.5, 0.9] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn log_helpers() {
        assert!((log_sigmoid(2.0) - sigmoid(2.0).ln()).abs() < 1e-14);
        assert!((log_sigmoid(-30.0) - sigmoid(-30.0).ln()).abs() < 1e-12);
        for &v in &[-1e-9, -0.1, -0.7, -5.0] {
            assert!(
                (log1mexp(v) - (1.0 - v.exp()).ln()).abs()
                    < 1e-6 * (1.0 - v.exp()).ln().abs().max(1.0)
            );
        }
        let lse = log_sum_exp(&[0.1f64.ln(), 0.2f64.ln(), 0.7f64.ln()]);
        assert!(lse.abs() < 1e-14);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
