use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam<S: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn for_tensors(tensors: &[&Tensor<S>], lr: f64) -> Self {
        let sizes: Vec<usize> = tensors.iter().map(|t| t.numel()).collect();
        Self::new(&sizes, lr)
    }

    /// One update. `skip[i]` elements at the start of tensor `i` are left
    /// untouched (used for the padding row).
    pub fn apply(
        &mut self,
        params: Vec<&mut Tensor<S>>,
        grads: &[Option<&[S]>],
        skip: &[usize],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            match g {
                None => return Err(Error::Contract(format!("missing gradient for tensor {i}"))),
                Some(g) if g.len() != self.m[i].len() => {
                    return Err(Error::Contract(format!(
                        "gradient size mismatch for tensor {i}"
                    )))
                }
                Some(g) if g.iter().any(|x| !x.is_finite()) => {
                    return Err(Error::NonFinite(format!("gradient of tensor {i}")))
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |x: f64| S::from_f64_lossy(x);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one_b1, one_b2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(t));
        let bc2 = c(1.0 - self.beta2.powi(t));
        let (lr, eps) = (c(self.lr), c(self.eps));
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].expect("checked above");
            let start = skip.get(i).copied().unwrap_or(0);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in start..g.len() {
                m[k] = b1 * m[k] + one_b1 * g[k];
                v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.data_mut()[k] = p.data()[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_fn(&[3], |i| i as f64);
        let before = p.clone();
        let mut opt = Adam::new(&[3], 1e-3);
        for _ in 0..3 {
            opt.apply(vec![&mut p], &[Some(&[0.0; 3])], &[0]).unwrap();
        }
        assert!(p.bits_eq(&before));
    }

    #[test]
    fn first_and_second_steps_match_hand_evaluation() {
        let mut p = Tensor::from_fn(&[1], |_| 1.0f64);
        let mut opt = Adam::new(&[1], 0.01);
        opt.apply(vec![&mut p], &[Some(&[0.5])], &[]).unwrap();
        // m̂ = 0.5, v̂ = 0.25 → step = lr · 0.5 / (0.5 + 1e-8)
        let first = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - first).abs() < 1e-7);
        opt.apply(vec![&mut p], &[Some(&[-1.0])], &[]).unwrap();
        let m: f64 = 0.9 * 0.05 - 0.1;
        let v: f64 = 0.999 * 0.00025 + 0.001 * 1.0;
        let step = 0.01 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p.data()[0] - (first - step)).abs() < 1e-7);
    }

    #[test]
    fn identical_gradients_identical_updates() {
        let mut a = Tensor::from_fn(&[2], |_| 0.3f32);
        let mut b = a.clone();
        let mut opt = Adam::new(&[2, 2], 1e-2);
        let g = [0.2f32, -0.7];
        opt.apply(vec![&mut a, &mut b], &[Some(&g), Some(&g)], &[])
            .unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn skip_prefix_and_errors() {
        let mut p = Tensor::from_fn(&[4], |_| 1.0f64);
        let mut opt = Adam::new(&[4], 0.1);
        opt.apply(vec![&mut p], &[Some(&[1.0; 4])], &[2]).unwrap();
        assert_eq!(&p.data()[..2], &[1.0, 1.0]);
        assert!(p.data()[2] < 1.0);
        assert!(matches!(
            opt.apply(vec![&mut p], &[None], &[]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            opt.apply(vec![&mut p], &[Some(&[f64::NAN; 4])], &[]),
            Err(Error::NonFinite(_))
        ));
    }
}
