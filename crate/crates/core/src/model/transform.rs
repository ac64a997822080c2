//! Unconstrained parameterisation of the bin probabilities and Pareto shapes.
//!
//! Probabilities use stick-breaking with a centring offset, so an all-zero
//! stick maps to equal probabilities. Shapes use `α = 1 + exp(s)`.

use serde::{Deserialize, Serialize};

/// Parameters on the unconstrained scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub stick: Vec<f64>,
    pub log_alpha_shift: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(n_bins: usize, n_pareto: usize) -> Self {
        Self {
            stick: vec![0.0; n_bins.saturating_sub(1)],
            log_alpha_shift: vec![0.0; n_pareto],
        }
    }

    pub fn len(&self) -> usize {
        self.stick.len() + self.log_alpha_shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.stick.clone();
        v.extend_from_slice(&self.log_alpha_shift);
        v
    }

    pub fn from_flat(flat: &[f64], n_bins: usize) -> Self {
        let split = n_bins - 1;
        Self {
            stick: flat[..split].to_vec(),
            log_alpha_shift: flat[split..].to_vec(),
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward stick-breaking state, kept for the reverse (gradient) pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct StickState {
    pub probs: Vec<f64>,
    /// Fraction broken off at each step.
    pub z: Vec<f64>,
    /// Stick remaining before each step.
    pub remaining: Vec<f64>,
    pub log_jacobian: f64,
}

impl StickState {
    #[cfg(test)]
    pub fn forward(stick: &[f64]) -> Self {
        let mut st = StickState::default();
        st.fill(stick);
        st
    }

    pub fn fill(&mut self, stick: &[f64]) {
        let k = stick.len() + 1;
        self.probs.clear();
        self.z.clear();
        self.remaining.clear();
        self.log_jacobian = 0.0;
        let mut r = 1.0;
        for (i, &y) in stick.iter().enumerate() {
            let offset = ((k - 1 - i) as f64).ln();
            let z = logistic(y - offset);
            self.remaining.push(r);
            self.z.push(z);
            self.probs.push(r * z);
            self.log_jacobian += z.ln() + (1.0 - z).ln() + r.ln();
            r *= 1.0 - z;
        }
        self.probs.push(r);
    }

    /// Chains `∂f/∂p` back to the stick coordinates, including the
    /// derivative of the log-Jacobian.
    pub fn backward(&self, d_probs: &[f64], d_stick: &mut [f64]) {
        let k = self.probs.len();
        let mut adj_r = d_probs[k - 1];
        for i in (0..k - 1).rev() {
            let z = self.z[i];
            let r = self.remaining[i];
            d_stick[i] = (d_probs[i] - adj_r) * r * z * (1.0 - z) + (1.0 - 2.0 * z);
            adj_r = d_probs[i] * z + adj_r * (1.0 - z) + 1.0 / r;
        }
    }
}

/// Stick coordinates reproducing `probs`.
pub fn stick_from_probs(probs: &[f64]) -> Vec<f64> {
    let k = probs.len();
    // tail sums taken from the end avoid cancellation in the remaining stick
    let mut tail = vec![0.0; k + 1];
    for i in (0..k).rev() {
        tail[i] = tail[i + 1] + probs[i];
    }
    (0..k - 1)
        .map(|i| {
            let offset = ((k - 1 - i) as f64).ln();
            probs[i].ln() - tail[i + 1].ln() + offset
        })
        .collect()
}

pub fn alpha_from_shift(s: f64) -> f64 {
    1.0 + s.exp()
}

pub fn shift_from_alpha(alpha: f64) -> f64 {
    (alpha - 1.0).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_stick_gives_equal_probabilities() {
        let st = StickState::forward(&[0.0, 0.0]);
        for p in &st.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // z = (1/3, 1/2), remaining = (1, 2/3)
        let expected = (1.0f64 / 3.0).ln() + (2.0f64 / 3.0).ln() + 0.0
            + (0.5f64).ln() + (0.5f64).ln() + (2.0f64 / 3.0).ln();
        assert!((st.log_jacobian - expected).abs() < 1e-14);
        let back = stick_from_probs(&st.probs);
        assert!(back.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(alpha_from_shift(0.0), 2.0);
    }

    #[test]
    fn stick_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let k = rng.random_range(2..14);
            let y: Vec<f64> = (0..k - 1).map(|_| rng.random_range(-4.0..4.0)).collect();
            let st = StickState::forward(&y);
            assert!((st.probs.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let back = stick_from_probs(&st.probs);
            for (a, b) in y.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
            let s: f64 = rng.random_range(-4.0..4.0);
            assert!((shift_from_alpha(alpha_from_shift(s)) - s).abs() < 1e-10);
        }
    }

    #[test]
    fn log_jacobian_matches_numerical_determinant() {
        // the Jacobian of y -> (p_1..p_{K-1}) by central differences
        let y = [0.3, -1.2, 0.8];
        let n = y.len();
        let h = 1e-6;
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut up = y;
            let mut dn = y;
            up[j] += h;
            dn[j] -= h;
            let pu = StickState::forward(&up).probs;
            let pd = StickState::forward(&dn).probs;
            for i in 0..n {
                jac[i][j] = (pu[i] - pd[i]) / (2.0 * h);
            }
        }
        // lower triangular: determinant is the diagonal product
        let det: f64 = (0..n).map(|i| jac[i][i]).product();
        for i in 0..n {
            for j in i + 1..n {
                assert!(jac[i][j].abs() < 1e-9);
            }
        }
        assert!((det.ln() - StickState::forward(&y).log_jacobian).abs() < 1e-7);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let y = [0.4, -0.7, 1.1, 0.0];
        let weights = [0.3, -1.0, 2.0, 0.5, -0.2];
        let f = |y: &[f64]| {
            let st = StickState::forward(y);
            st.probs.iter().zip(weights).map(|(p, w)| w * p.ln()).sum::<f64>() + st.log_jacobian
        };
        let st = StickState::forward(&y);
        let d_probs: Vec<f64> = st.probs.iter().zip(weights).map(|(p, w)| w / p).collect();
        let mut g = vec![0.0; y.len()];
        st.backward(&d_probs, &mut g);
        for i in 0..y.len() {
            let mut up = y;
            let mut dn = y;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((g[i] - fd).abs() < 1e-7, "{i}: {} vs {fd}", g[i]);
        }
    }
}
