use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Fixed,
    /// Linear warmup over the first `warmup_fraction` of steps, then linear
    /// decay to zero.
    LinearDecay { warmup_fraction: f64 },
}

/// Element type used for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(bits: u8) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            b => Err(format!("precision must be 32 or 64, got {b}")),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub precision: Precision,
    /// Sequential per-example forwards. Gradients are summed in example
    /// order either way, so this only changes scheduling.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            schedule: LrSchedule::Fixed,
            batch_size: 16,
            epochs: 50,
            weight_decay: 0.1,
            adam_eps: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            grad_clip: None,
            freeze_backbone: true,
            seed: 0,
            precision: Precision::F32,
            deterministic: true,
        }
    }
}

/// Learning rates swept by the `--lr-grid` flag.
pub const LR_GRID: [f64; 4] = [5e-3, 1e-3, 5e-4, 1e-4];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.adam_beta1) || !open_unit(self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in (0, 1)".into()));
        }
        // lr = 0 is accepted as an explicit no-op run.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam_eps must be > 0 and weight_decay >= 0".into()));
        }
        if let LrSchedule::LinearDecay { warmup_fraction } = self.schedule {
            if !(0.0..=1.0).contains(&warmup_fraction) {
                return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
            }
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` out of `total` optimizer steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Fixed => self.lr,
            LrSchedule::LinearDecay { warmup_fraction } => {
                let warm = (warmup_fraction * total as f64).round() as usize;
                let s = step + 1;
                if s <= warm {
                    self.lr * s as f64 / warm as f64
                } else {
                    let rest = total.saturating_sub(warm).max(1);
                    self.lr * (total.saturating_sub(step)) as f64 / rest as f64
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            adam_beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let neg = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn linear_decay_shape() {
        let c = TrainConfig {
            lr: 1.0,
            schedule: LrSchedule::LinearDecay { warmup_fraction: 0.2 },
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..10).map(|s| c.lr_at(s, 10)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert_eq!(lrs[2], 1.0);
        assert_eq!(lrs[9], 1.0 / 8.0);
        assert!(lrs[2..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig {
            precision: Precision::F64,
            schedule: LrSchedule::LinearDecay { warmup_fraction: 0.06 },
            grad_clip: Some(1.0),
            ..TrainConfig::default()
        };
        let s = toml::to_string(&c).unwrap();
        assert!(s.contains("precision = 64"));
        assert_eq!(toml::from_str::<TrainConfig>(&s).unwrap(), c);
        assert!(toml::from_str::<TrainConfig>("precision = 16").is_err());
        assert!(toml::from_str::<TrainConfig>("lrr = 1.0").is_err());
    }
}
