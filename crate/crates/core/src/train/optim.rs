use crate::biencoder::{EncoderParams, GradientSet};

/// Adamax (infinity-norm Adam).
#[derive(Clone, Debug)]
pub struct Adamax {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl Adamax {
    pub fn new(params: &EncoderParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adamax {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            u: zeros,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &GradientSet) {
        self.step += 1;
        let clr = self.lr / (1.0 - self.beta1.powi(self.step));
        for (k, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            let (m, u) = (&mut self.m[k], &mut self.u[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                u[i] = (self.beta2 * u[i]).max(g[i].abs() + self.eps);
                p[i] -= clr * m[i] / u[i];
            }
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Halves the learning rate when the monitored metric has not improved for
/// more than `patience` consecutive evaluations.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        ReduceOnPlateau {
            factor,
            patience,
            best: f64::NEG_INFINITY,
            bad: 0,
        }
    }

    /// Returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad > self.patience {
            self.bad = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}
