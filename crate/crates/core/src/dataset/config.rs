//! Training defaults for the three task profiles.
//!
//! Detection: 150 epochs, batch 8, Adam. Refinement classifier: 100 epochs,
//! batch 16, SGD. Atypical classifier: 30 epochs, batch 32, Adam at 3e-5
//! with cosine annealing.
//!
//! Not given by the original recipe and chosen here: detector Adam learning
//! rate 1e-3, refinement SGD learning rate 0.01 with momentum 0.9.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network input side after resizing.
pub const INPUT_SIDE: u32 = 224;
/// Side of candidate patches cropped for the classifier.
pub const PATCH_SIDE: u32 = 50;
/// Side of the square box built from a point annotation for detector training.
pub const BOX_SIDE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingProfile {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl TrainingProfile {
    pub fn detection() -> Self {
        TrainingProfile {
            epochs: 150,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn refine_cls() -> Self {
        TrainingProfile {
            epochs: 100,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn atypical_cls() -> Self {
        TrainingProfile {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-5,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: LrSchedule::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// Learning rate for epoch `t` (0-based) of `self.epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => cosine_lr(self.learning_rate, epoch as f64, self.epochs as f64),
        }
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * t / T))`.
pub fn cosine_lr(lr0: f64, t: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * t / total).cos())
}

/// Named backbones. Only the bundled reference network can be built; the
/// others are accepted as names so configs can record what they stand in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneProfile {
    Reference,
    Resnet50,
    Resnet101,
    Resnext50,
    Resnext101,
    EfficientnetB0,
    EfficientnetB1,
    EfficientnetB2,
    EfficientnetB3,
    EfficientnetB4,
    Densenet121,
    Densenet169,
    VitB16,
    ConvnextBase,
    ConvnextBaseCbam,
    ConvnextLarge,
}

impl BackboneProfile {
    pub const ALL: [(&'static str, BackboneProfile); 16] = [
        ("reference", BackboneProfile::Reference),
        ("resnet50", BackboneProfile::Resnet50),
        ("resnet101", BackboneProfile::Resnet101),
        ("resnext50", BackboneProfile::Resnext50),
        ("resnext101", BackboneProfile::Resnext101),
        ("efficientnet_b0", BackboneProfile::EfficientnetB0),
        ("efficientnet_b1", BackboneProfile::EfficientnetB1),
        ("efficientnet_b2", BackboneProfile::EfficientnetB2),
        ("efficientnet_b3", BackboneProfile::EfficientnetB3),
        ("efficientnet_b4", BackboneProfile::EfficientnetB4),
        ("densenet121", BackboneProfile::Densenet121),
        ("densenet169", BackboneProfile::Densenet169),
        ("vit_b_16", BackboneProfile::VitB16),
        ("convnext_base", BackboneProfile::ConvnextBase),
        ("convnext_base_cbam", BackboneProfile::ConvnextBaseCbam),
        ("convnext_large", BackboneProfile::ConvnextLarge),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, p)| *p == self).map(|(n, _)| *n).unwrap_or("reference")
    }

    pub fn is_bundled(self) -> bool {
        self == BackboneProfile::Reference
    }

    pub fn ensure_bundled(self) -> Result<()> {
        if self.is_bundled() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "backbone `{}` is not bundled; plug it in through the Backbone trait or use `reference`",
                self.name()
            )))
        }
    }
}

impl FromStr for BackboneProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profiles() {
        let d = TrainingProfile::detection();
        assert_eq!((d.epochs, d.batch_size, d.optimizer), (150, 8, OptimizerKind::Adam));
        let r = TrainingProfile::refine_cls();
        assert_eq!((r.epochs, r.batch_size, r.optimizer), (100, 16, OptimizerKind::Sgd));
        let a = TrainingProfile::atypical_cls();
        assert_eq!((a.epochs, a.batch_size, a.optimizer, a.schedule), (30, 32, OptimizerKind::Adam, LrSchedule::Cosine));
        assert_eq!(a.learning_rate, 3e-5);
    }

    #[test]
    fn cosine_midpoint() {
        let a = TrainingProfile::atypical_cls();
        assert!((a.lr_at(15) - 1.5e-5).abs() < 1e-18);
        assert_eq!(a.lr_at(0), 3e-5);
        assert!(cosine_lr(3e-5, 30.0, 30.0).abs() < 1e-20);
        assert_eq!(TrainingProfile::refine_cls().lr_at(50), 0.01);
    }

    #[test]
    fn backbone_names() {
        assert_eq!("convnext_large".parse::<BackboneProfile>().unwrap(), BackboneProfile::ConvnextLarge);
        assert!("alexnet".parse::<BackboneProfile>().is_err());
        assert!(BackboneProfile::Resnet50.ensure_bundled().is_err());
        assert!(BackboneProfile::Reference.ensure_bundled().is_ok());
        for (n, p) in BackboneProfile::ALL {
            assert_eq!(p.name(), n);
        }
    }
}
