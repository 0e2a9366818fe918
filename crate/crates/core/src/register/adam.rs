use crate::scalar::Real;

/// Adam with bias correction over a list of parameter arrays.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update `p -= lr * m̂ / (sqrt(v̂) + eps)`.
    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>], lr: f64) {
        self.step_scaled(params, grads, lr, 1.0);
    }

    /// Update for parameters `θ` when the optimized variables are `p = scale · θ`:
    /// the moments see `scale · ∂L/∂p` and `p` moves by `scale` times the `θ` step.
    pub fn step_scaled(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>], lr: f64, scale: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::lit(1.0 / (1.0 - self.beta2.powi(t)));
        let eps = T::lit(self.eps);
        let step = T::lit(lr * scale);
        let gs = T::lit(scale);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len());
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = gi * gs;
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let mhat = *mi * c1;
                let vhat = *vi * c2;
                *pi -= step * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
