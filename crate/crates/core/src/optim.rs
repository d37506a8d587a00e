//! Adam / AdamW, warmup-cosine learning-rate schedule and global-norm clipping.

use crate::policy::Matrix;

/// Linear warmup to `peak` at step `warmup_steps`, then cosine decay to zero
/// at `total_steps`. Steps are 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with optional decoupled weight decay. Decay pulls toward zero, or
/// toward a fixed anchor set with [`Adam::anchored_at`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    anchor: Option<Vec<Vec<f64>>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            anchor: None,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_tensors(tensors: &[&Matrix], weight_decay: f64) -> Self {
        let sizes: Vec<usize> = tensors.iter().map(|t| t.data.len()).collect();
        Self::new(&sizes, weight_decay)
    }

    /// Decays toward the current values of `tensors` instead of toward zero.
    pub fn anchored_at(mut self, tensors: &[&Matrix]) -> Self {
        assert_eq!(tensors.len(), self.m.len());
        self.anchor = Some(tensors.iter().map(|t| t.data.clone()).collect());
        self
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data.iter_mut().zip(&g.data).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                let centre = self.anchor.as_ref().map_or(0.0, |a| a[i][k]);
                *w -= lr * (update + self.weight_decay * (*w - centre));
            }
        }
    }
}

pub fn global_norm(grads: &[&Matrix]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_end_of_warmup() {
        let s = LrSchedule {
            peak: 5e-5,
            warmup_steps: 20,
            total_steps: 100,
        };
        assert_eq!(s.lr(20), 5e-5);
        assert!((s.lr(10) - 2.5e-5).abs() < 1e-20);
        assert!(s.lr(100).abs() < 1e-20);
        assert!(s.lr(60) < s.lr(30));
    }

    #[test]
    fn anchored_decay_leaves_the_anchor_fixed() {
        let mut p = Matrix {
            rows: 1,
            cols: 2,
            data: vec![2.0, -1.0],
        };
        let g = Matrix::zeros(1, 2);
        let mut adam = Adam::for_tensors(&[&p], 0.5).anchored_at(&[&p]);
        adam.step(&mut [&mut p], &[&g], 0.1);
        assert_eq!(p.data, vec![2.0, -1.0]);
        let mut plain = Adam::for_tensors(&[&p], 0.5);
        plain.step(&mut [&mut p], &[&g], 0.1);
        assert!((p.data[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Matrix::zeros(1, 2);
        let g = Matrix {
            rows: 1,
            cols: 2,
            data: vec![3.0, -0.5],
        };
        let mut opt = Adam::new(&[2], 0.0);
        opt.step(&mut [&mut p], &[&g], 0.1);
        assert!((p.data[0] + 0.1).abs() < 1e-6);
        assert!((p.data[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut a = Matrix {
            rows: 1,
            cols: 2,
            data: vec![3.0, 4.0],
        };
        let pre = clip_global_norm(&mut [&mut a], 1.0);
        assert_eq!(pre, 5.0);
        assert!(global_norm(&[&a]) <= 1.0 + 1e-12);
    }
}
