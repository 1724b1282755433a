//! Adam optimizer over flattened network parameters.

use super::unet::UNetParams;
use super::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Real> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One bias-corrected Adam update of `params` with gradient `grads`.
    pub fn step(&mut self, params: &mut UNetParams<T>, grads: &UNetParams<T>, lr: f64) {
        let g = grads.to_flat();
        assert_eq!(g.len(), self.m.len(), "gradient size does not match optimizer state");
        self.t += 1;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let one = T::one();
        let c1 = one - T::of(BETA1.powi(self.t as i32));
        let c2 = one - T::of(BETA2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(EPSILON));
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_mut(|k, p| {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::unet::UNetArch;

    fn arch() -> UNetArch {
        UNetArch {
            widths: vec![1],
            bottom: 1,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = UNetParams::<f64>::init(&arch(), 2).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(p.n_params());
        s.step(&mut p, &UNetParams::zeros(&arch()).unwrap(), 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = UNetParams::<f64>::zeros(&arch()).unwrap();
        let mut g = UNetParams::<f64>::zeros(&arch()).unwrap();
        g.for_each_mut(|k, v| *v = if k % 2 == 0 { 3.0 } else { -0.01 });
        let mut s = AdamState::new(p.n_params());
        s.step(&mut p, &g, 1e-3);
        for (k, v) in p.to_flat().into_iter().enumerate() {
            let expected = if k % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!((v - expected).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn quadratic_follows_scalar_recursion() {
        // minimise ½‖θ‖², gradient θ, from θ = 1
        let mut p = UNetParams::<f64>::zeros(&arch()).unwrap();
        p.for_each_mut(|_, v| *v = 1.0);
        let mut s = AdamState::new(p.n_params());
        let (mut th, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut mags = Vec::new();
        for t in 1..=100 {
            let g = p.clone();
            s.step(&mut p, &g, 0.1);
            m = BETA1 * m + (1.0 - BETA1) * th;
            v = BETA2 * v + (1.0 - BETA2) * th * th;
            th -= 0.1 * (m / (1.0 - BETA1.powi(t))) / ((v / (1.0 - BETA2.powi(t))).sqrt() + EPSILON);
            assert!(p.to_flat().iter().all(|&x| x == th));
            mags.push(th.abs());
        }
        // straight descent until the first overshoot, then damped oscillation
        assert!(mags[..11].windows(2).all(|w| w[1] < w[0]));
        let peaks: Vec<f64> = (1..99)
            .filter(|&i| mags[i] > mags[i - 1] && mags[i] >= mags[i + 1])
            .map(|i| mags[i])
            .collect();
        assert!(peaks.len() >= 3 && peaks.windows(2).all(|w| w[1] < w[0]));
        assert!(mags[99] < 0.01);
    }
}
