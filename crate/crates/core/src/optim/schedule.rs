use serde::{Deserialize, Serialize};

use super::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

/// Linear warm-up from 0 to `base_lr` over the warm-up steps, then cosine
/// annealing to 0 at the last step.
pub fn lr_schedule(cfg: &OptimizerConfig, step: usize, steps_per_epoch: usize) -> f64 {
    if cfg.schedule == ScheduleKind::Constant {
        return cfg.base_lr;
    }
    let warmup = (cfg.warmup_epochs * steps_per_epoch) as f64;
    let total = (cfg.total_epochs * steps_per_epoch) as f64;
    let s = step as f64;
    if s < warmup {
        return cfg.base_lr * s / warmup;
    }
    if total <= warmup {
        return cfg.base_lr;
    }
    let progress = ((s - warmup) / (total - warmup)).min(1.0);
    0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig {
            base_lr: 0.1,
            warmup_epochs: 5,
            total_epochs: 120,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn endpoints() {
        let c = cfg();
        assert_eq!(lr_schedule(&c, 0, 10), 0.0);
        assert_eq!(lr_schedule(&c, 50, 10), 0.1);
        assert!(lr_schedule(&c, 1200, 10).abs() < 1e-15);
        assert!(lr_schedule(&c, 1199, 10) < 1e-5);
    }

    #[test]
    fn monotone_after_warmup() {
        let c = cfg();
        let lrs: Vec<f64> = (50..=1200).map(|s| lr_schedule(&c, s, 10)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let warm: Vec<f64> = (0..=50).map(|s| lr_schedule(&c, s, 10)).collect();
        assert!(warm.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn no_warmup_starts_at_base() {
        let c = OptimizerConfig {
            warmup_epochs: 0,
            ..cfg()
        };
        assert_eq!(lr_schedule(&c, 0, 10), 0.1);
    }
}
