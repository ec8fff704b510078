//! AdamW with decoupled weight decay, global gradient clipping, and a
//! warmup-then-linear-decay learning-rate schedule.
//!
//! Moment buffers and all update arithmetic are `f64` regardless of the
//! parameter scalar type, so an `f32` and an `f64` instantiation of the same
//! model see the same optimizer trajectory up to storage rounding.

use serde::{Deserialize, Serialize};

use crate::linalg::Scalar;
use crate::nn::{TensorView, TensorViewMut};

/// Hyperparameters for [`AdamW`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied only to tensors flagged `decay`.
    pub weight_decay: f64,
    /// Global L2-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Steps of linear warmup from 0 to the peak rate.
    pub warmup_steps: usize,
    /// Total steps; the rate decays linearly to 0 here after warmup.
    /// Values of 0 or 1 mean "unset": trainers replace them with their own
    /// step count, so the default schedule decays over the actual run.
    pub total_steps: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            warmup_steps: 0,
            total_steps: 1,
        }
    }
}

impl OptimizerSettings {
    /// Fill an unset (≤ 1) total step count with the trainer's own horizon,
    /// so the decay schedule spans the run that actually happens. The
    /// schedule reaches zero one step past the horizon, keeping the final
    /// real step at a small but nonzero rate.
    pub fn with_horizon(mut self, total_steps: usize) -> Self {
        if self.total_steps <= 1 {
            self.total_steps = total_steps.max(1) + 1;
        }
        self
    }

    /// Learning rate at a 1-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps;
        if warm > 0 && step <= warm {
            return self.lr * step as f64 / warm as f64;
        }
        let total = self.total_steps.max(warm + 1);
        let span = (total - warm) as f64;
        let done = (step.min(total) - warm) as f64;
        self.lr * (1.0 - done / span).max(0.0)
    }
}

/// What one optimizer step did, for loss curves and logs.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// AdamW state: first/second moments per tensor, in the tensor order the
/// model enumerates. The enumeration order must be stable across steps.
pub struct AdamW {
    settings: OptimizerSettings,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(settings: OptimizerSettings) -> Self {
        AdamW {
            settings,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update. `params` and `grads` must enumerate the same tensors
    /// in the same order; gradients are read, parameters written in place.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut [TensorViewMut<'_, S>],
        grads: &[TensorView<'_, S>],
    ) -> StepStats {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        if self.m.is_empty() {
            for g in grads.iter() {
                self.m.push(vec![0.0; g.data.len()]);
                self.v.push(vec![0.0; g.data.len()]);
            }
        }

        self.step += 1;
        let lr = self.settings.lr_at(self.step);

        let mut sq_sum = 0.0f64;
        for g in grads.iter() {
            for x in g.data {
                let x = x.as_f64();
                sq_sum += x * x;
            }
        }
        let grad_norm = sq_sum.sqrt();
        let clip_scale = match self.settings.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        let OptimizerSettings {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.settings;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            assert_eq!(p.data.len(), g.data.len(), "tensor {} shape", p.name);
            let decay = if p.decay { weight_decay } else { 0.0 };
            for ((pv, gv), (mv, vv)) in p.data.iter_mut().zip(g.data).zip(m.iter_mut().zip(v.iter_mut())) {
                let grad = gv.as_f64() * clip_scale;
                *mv = beta1 * *mv + (1.0 - beta1) * grad;
                *vv = beta2 * *vv + (1.0 - beta2) * grad * grad;
                let mhat = *mv / bias1;
                let vhat = *vv / bias2;
                let mut x = pv.as_f64();
                x -= lr * (mhat / (vhat.sqrt() + eps) + decay * x);
                *pv = S::from_f64(x);
            }
        }
        StepStats { lr, grad_norm }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn views<'a>(
        p: &'a mut [f64],
        g: &'a [f64],
        decay: bool,
    ) -> (Vec<TensorViewMut<'a, f64>>, Vec<TensorView<'a, f64>>) {
        (
            vec![TensorViewMut {
                name: "p".into(),
                data: p,
                decay,
            }],
            vec![TensorView {
                name: "p".into(),
                data: g,
                decay,
            }],
        )
    }

    #[test]
    fn minimises_a_quadratic() {
        let target = [3.0, -1.5, 0.25, 8.0];
        let mut p = [0.0f64; 4];
        let mut opt = AdamW::new(OptimizerSettings {
            lr: 0.05,
            weight_decay: 0.0,
            grad_clip: None,
            total_steps: 4_000, // decays to zero by the end of the run
            ..OptimizerSettings::default()
        });
        for _ in 0..4_000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            let (mut pv, gv) = views(&mut p, &g, false);
            opt.step(&mut pv, &gv);
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3, "{x} vs {t}");
        }
    }

    #[test]
    fn clipping_bounds_the_applied_norm() {
        let mut p = [0.0f64; 2];
        let g = [3000.0f64, 4000.0]; // norm 5000
        let mut opt = AdamW::new(OptimizerSettings {
            lr: 1e-3,
            grad_clip: Some(1.0),
            weight_decay: 0.0,
            total_steps: 10,
            ..OptimizerSettings::default()
        });
        let (mut pv, gv) = views(&mut p, &g, false);
        let stats = opt.step(&mut pv, &gv);
        assert!((stats.grad_norm - 5000.0).abs() < 1e-9);
        // First Adam step moves each coordinate by about lr regardless of
        // magnitude, but clipping must not blow up or NaN anything.
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn weight_decay_applies_only_to_flagged_tensors() {
        let settings = OptimizerSettings {
            lr: 0.1,
            weight_decay: 0.5,
            grad_clip: None,
            total_steps: 10,
            ..OptimizerSettings::default()
        };
        let run = |decay: bool| {
            let mut p = [2.0f64];
            let g = [0.0f64];
            let mut opt = AdamW::new(settings.clone());
            let (mut pv, gv) = views(&mut p, &g, decay);
            opt.step(&mut pv, &gv);
            p[0]
        };
        assert_eq!(run(false), 2.0); // zero grad, no decay → unchanged
        let decayed = run(true);
        assert!(decayed < 2.0 && decayed > 1.8); // 2 − lr·wd·2 = 1.9
    }

    #[test]
    fn schedule_warms_up_then_decays_linearly_to_zero() {
        let s = OptimizerSettings {
            lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            ..OptimizerSettings::default()
        };
        assert!((s.lr_at(5) - 0.5).abs() < 1e-12);
        assert!((s.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(110) == 0.0);
        assert!(s.lr_at(9999) == 0.0);
    }

    #[test]
    fn unset_horizon_is_filled_and_every_step_keeps_a_nonzero_rate() {
        let s = OptimizerSettings::default().with_horizon(25);
        assert_eq!(s.total_steps, 26);
        for step in 1..=25 {
            assert!(s.lr_at(step) > 0.0, "step {step} got a zero rate");
        }
        // An explicit schedule is left alone.
        let explicit = OptimizerSettings {
            total_steps: 300,
            ..OptimizerSettings::default()
        };
        assert_eq!(explicit.with_horizon(25).total_steps, 300);
    }

    #[test]
    fn same_inputs_same_trajectory() {
        let run = || {
            let mut p = [1.0f64, -2.0];
            let mut opt = AdamW::new(OptimizerSettings::default());
            for i in 0..50 {
                let g = [(i as f64).sin(), (i as f64).cos()];
                let (mut pv, gv) = views(&mut p, &g, true);
                opt.step(&mut pv, &gv);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
