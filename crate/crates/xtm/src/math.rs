//! Small numeric helpers shared across modules.

/// Floor used inside logarithms to guard against log(0).
pub const LOG_FLOOR: f64 = 1e-12;

/// Numerically stable softmax with max-subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Stable softplus ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm; returns false (leaving `v` untouched)
/// when the norm is zero.
pub fn l2_normalize(v: &mut [f64]) -> bool {
    let n = l2_norm(v);
    if n == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}

/// Median of a multiset; even counts average the two central values.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty multiset");
    values.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in median"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// KL(p || q) over discrete distributions with floored logs.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi.max(LOG_FLOOR).ln() - qi.max(LOG_FLOOR).ln())
            }
        })
        .sum()
}

/// Jensen-Shannon divergence in nats, bounded by ln 2.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let a = softmax(&[0.3, -1.2, 2.0]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let b = softmax(&[0.3 + 5.0, -1.2 + 5.0, 2.0 + 5.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_matches_naive_form() {
        for &x in &[-30.0, -1.0, 0.0, 0.5, 20.0] {
            let naive = (1.0 + (x as f64).exp()).ln();
            assert!((softplus(x) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_softplus_derivative() {
        let h = 1e-6;
        for &x in &[-2.0, 0.0, 1.3] {
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((sigmoid(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&mut [0.4, 0.1, 0.9]), 0.4);
        assert_eq!(median(&mut [1.0, 3.0]), 2.0);
        assert_eq!(median(&mut [7.0]), 7.0);
    }

    #[test]
    fn kl_zero_when_equal_and_positive_otherwise() {
        let p = [0.2, 0.3, 0.5];
        assert!(kl_divergence(&p, &p).abs() < 1e-12);
        let q = [0.5, 0.3, 0.2];
        assert!(kl_divergence(&p, &q) > 0.0);
    }

    #[test]
    fn jsd_symmetric_and_bounded() {
        let p = [1.0, 0.0];
        let q = [0.0, 1.0];
        let d = jensen_shannon(&p, &q);
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((jensen_shannon(&q, &p) - d).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        let mut v = [0.0, 0.0];
        assert!(!l2_normalize(&mut v));
        let mut w = [3.0, 4.0];
        assert!(l2_normalize(&mut w));
        assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 0.8).abs() < 1e-12);
    }
}
