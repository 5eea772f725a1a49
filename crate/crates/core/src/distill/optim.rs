use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Optimization settings shared by teacher and student training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Peak learning rate. BERT-scale runs use 1e-5 to 2.8e-5 at batch 128.
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub temperature: f64,
    pub in_batch_negatives: bool,
    /// Evaluation interval in steps for training monitors; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 1.0,
            in_batch_negatives: false,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("warmup_frac must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be finite and non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).round() as usize
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.steps;
    if step > total {
        return Err(Error::invalid(format!(
            "step {step} outside schedule of {total} steps"
        )));
    }
    if total == 0 {
        return Ok(0.0);
    }
    let warmup = cfg.warmup_steps();
    Ok(if warmup > 0 && step <= warmup {
        cfg.lr * step as f64 / warmup as f64
    } else {
        cfg.lr * (total - step) as f64 / (total - warmup) as f64
    })
}

/// Adam with decoupled weight decay. Parameter groups are identified by
/// position, so callers must pass them in the same order every step.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

/// One parameter slice, its gradient and whether it receives weight decay.
pub struct ParamGroup<'a> {
    pub param: &'a mut [f64],
    pub grad: &'a [f64],
    pub decay: bool,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, groups: Vec<ParamGroup<'_>>, lr: f64) -> Result<()> {
        if groups.iter().any(|g| g.grad.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged {
                step: self.t as usize,
            });
        }
        if self.moments.is_empty() {
            self.moments = groups
                .iter()
                .map(|g| (vec![0.0; g.param.len()], vec![0.0; g.param.len()]))
                .collect();
        }
        if self.moments.len() != groups.len() {
            return Err(Error::invalid("parameter groups changed between steps"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (g, (m, v)) in groups.into_iter().zip(&mut self.moments) {
            check_len(m.len(), g.param.len())?;
            check_len(g.param.len(), g.grad.len())?;
            let decay = if g.decay { lr * self.weight_decay } else { 0.0 };
            for i in 0..g.param.len() {
                let gi = g.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                g.param[i] -= lr * update + decay * g.param[i];
            }
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// Cycles through shuffled example indices, reshuffling every epoch.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(n: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_frac: 0.1,
            lr: 2.0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(10, &cfg).unwrap(), 2.0);
        assert_eq!(lr_at(5, &cfg).unwrap(), 1.0);
        assert_eq!(lr_at(55, &cfg).unwrap(), 1.0);
        assert_eq!(lr_at(100, &cfg).unwrap(), 0.0);
        assert!(lr_at(101, &cfg).is_err());
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&cfg);
        let mut x = vec![3.0, -2.0];
        for _ in 0..5000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(
                vec![ParamGroup {
                    param: &mut x,
                    grad: &g,
                    decay: true,
                }],
                0.01,
            )
            .unwrap();
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn decay_skipped_when_disabled() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&cfg);
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        opt.step(
            vec![
                ParamGroup {
                    param: &mut a,
                    grad: &[0.0],
                    decay: true,
                },
                ParamGroup {
                    param: &mut b,
                    grad: &[0.0],
                    decay: false,
                },
            ],
            0.1,
        )
        .unwrap();
        assert!((a[0] - 0.95).abs() < 1e-15);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = AdamW::new(&TrainConfig::default());
        let mut x = vec![0.0];
        let err = opt.step(
            vec![ParamGroup {
                param: &mut x,
                grad: &[f64::NAN],
                decay: true,
            }],
            0.1,
        );
        assert!(matches!(err, Err(Error::Diverged { .. })));
    }

    #[test]
    fn batcher_covers_epoch() {
        let mut b = Batcher::new(10, Rng::new(0));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
