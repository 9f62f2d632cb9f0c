//! Atomic image augmentation operators and paired-view composition.
//!
//! The operator list order is canonical: it fixes both the order in which a
//! composition applies its operators and the mask column associated with each
//! operator inside a configured set.

mod ops;
mod plan;

use serde::{Deserialize, Serialize};

use crate::error::{MastError, Result};

pub use ops::{apply, OpParams};
pub use plan::{make_views, sample_composition, sample_params, CompositionPlan, ViewParams};

/// Identifier of one of the 19 supported operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpId {
    ColorJitter,
    GaussianBlur,
    RandomFlip,
    RandomGrayscale,
    RandomResizedCrop,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Invert,
    Sharpness,
    GaussianNoise,
    SobelFilter,
    Cutout,
    Solarize,
    Equalize,
    Posterize,
    MotionBlur,
}

impl OpId {
    pub const ALL: [OpId; 19] = [
        OpId::ColorJitter,
        OpId::GaussianBlur,
        OpId::RandomFlip,
        OpId::RandomGrayscale,
        OpId::RandomResizedCrop,
        OpId::ShearX,
        OpId::ShearY,
        OpId::TranslateX,
        OpId::TranslateY,
        OpId::Rotate,
        OpId::Invert,
        OpId::Sharpness,
        OpId::GaussianNoise,
        OpId::SobelFilter,
        OpId::Cutout,
        OpId::Solarize,
        OpId::Equalize,
        OpId::Posterize,
        OpId::MotionBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpId::ColorJitter => "color_jitter",
            OpId::GaussianBlur => "gaussian_blur",
            OpId::RandomFlip => "random_flip",
            OpId::RandomGrayscale => "random_grayscale",
            OpId::RandomResizedCrop => "random_resized_crop",
            OpId::ShearX => "shear_x",
            OpId::ShearY => "shear_y",
            OpId::TranslateX => "translate_x",
            OpId::TranslateY => "translate_y",
            OpId::Rotate => "rotate",
            OpId::Invert => "invert",
            OpId::Sharpness => "sharpness",
            OpId::GaussianNoise => "gaussian_noise",
            OpId::SobelFilter => "sobel_filter",
            OpId::Cutout => "cutout",
            OpId::Solarize => "solarize",
            OpId::Equalize => "equalize",
            OpId::Posterize => "posterize",
            OpId::MotionBlur => "motion_blur",
        }
    }

    pub fn parse(s: &str) -> Result<OpId> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        OpId::ALL
            .into_iter()
            .find(|op| op.name() == norm || op.name().replace('_', "") == norm)
            .ok_or_else(|| MastError::config("augmentations", format!("unknown operator `{s}`")))
    }

    /// Position in the canonical list.
    pub fn canonical_index(self) -> usize {
        self as usize
    }

    /// Values `apply` accepts for this operator's magnitude.
    pub fn limits(self) -> (f64, f64) {
        match self {
            OpId::ColorJitter => (0.0, 2.5),
            OpId::GaussianBlur => (1e-9, 10.0),
            OpId::RandomResizedCrop => (1e-3, 1.0),
            OpId::ShearX | OpId::ShearY => (-1.0, 1.0),
            OpId::TranslateX | OpId::TranslateY => (-1.0, 1.0),
            OpId::Rotate => (-180.0, 180.0),
            OpId::Sharpness => (0.0, 5.0),
            OpId::GaussianNoise => (0.0, 1.0),
            OpId::Cutout => (0.0, 1.0),
            OpId::Solarize => (0.0, 1.0),
            OpId::Posterize => (1.0, 8.0),
            OpId::MotionBlur => (1.0, 15.0),
            OpId::RandomFlip | OpId::RandomGrayscale | OpId::Invert | OpId::SobelFilter | OpId::Equalize => {
                (0.0, 1.0)
            }
        }
    }

    /// Magnitude at which the operator leaves every image unchanged, if any.
    pub fn identity_magnitude(self) -> Option<f64> {
        match self {
            OpId::ColorJitter => Some(0.0),
            OpId::GaussianBlur => Some(1e-6),
            OpId::RandomResizedCrop => Some(1.0),
            OpId::ShearX | OpId::ShearY | OpId::TranslateX | OpId::TranslateY | OpId::Rotate => Some(0.0),
            OpId::Sharpness => Some(1.0),
            OpId::GaussianNoise | OpId::Cutout => Some(0.0),
            OpId::Solarize => Some(1.0),
            OpId::MotionBlur => Some(1.0),
            OpId::RandomFlip | OpId::RandomGrayscale | OpId::Invert | OpId::SobelFilter | OpId::Equalize => {
                Some(0.0)
            }
            OpId::Posterize => None,
        }
    }

    /// Whether the magnitude is a signed displacement (strength applies with either sign).
    pub fn is_signed(self) -> bool {
        matches!(
            self,
            OpId::ShearX | OpId::ShearY | OpId::TranslateX | OpId::TranslateY | OpId::Rotate
        )
    }

    /// Operators whose magnitude varies continuously from an identity value.
    pub fn has_continuous_magnitude(self) -> bool {
        !matches!(self, OpId::RandomFlip | OpId::Posterize)
    }
}

impl std::fmt::Display for OpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An operator with its application probability and sampling range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationOp {
    pub id: OpId,
    pub probability: f64,
    pub magnitude_range: (f64, f64),
}

impl AugmentationOp {
    pub fn new(id: OpId) -> Self {
        let (probability, magnitude_range) = match id {
            // strength multiplier on brightness/contrast/saturation 0.4, hue 0.1
            OpId::ColorJitter => (0.8, (0.0, 1.0)),
            OpId::GaussianBlur => (0.5, (0.1, 2.0)),
            OpId::RandomFlip => (0.5, (1.0, 1.0)),
            OpId::RandomGrayscale => (0.2, (1.0, 1.0)),
            // fraction of the image area kept
            OpId::RandomResizedCrop => (1.0, (0.2, 1.0)),
            OpId::ShearX | OpId::ShearY => (0.5, (-0.3, 0.3)),
            // fraction of the extent
            OpId::TranslateX | OpId::TranslateY => (0.5, (-0.25, 0.25)),
            // degrees
            OpId::Rotate => (0.5, (-30.0, 30.0)),
            OpId::Invert => (0.5, (1.0, 1.0)),
            OpId::Sharpness => (0.5, (0.5, 2.0)),
            OpId::GaussianNoise => (0.5, (0.01, 0.1)),
            OpId::SobelFilter => (0.5, (1.0, 1.0)),
            // hole side as a fraction of the extent
            OpId::Cutout => (0.5, (0.1, 0.3)),
            OpId::Solarize => (0.5, (0.4, 0.9)),
            OpId::Equalize => (0.5, (1.0, 1.0)),
            // bits kept
            OpId::Posterize => (0.5, (3.0, 6.0)),
            // kernel length in pixels
            OpId::MotionBlur => (0.5, (3.0, 7.0)),
        };
        Self {
            id,
            probability,
            magnitude_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = format!("augmentations.{}", self.id);
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(MastError::config(field, "probability must lie in [0, 1]"));
        }
        let (lo, hi) = self.magnitude_range;
        let (llo, lhi) = self.id.limits();
        if lo > hi || lo < llo || hi > lhi {
            return Err(MastError::config(
                field,
                format!("magnitude range ({lo}, {hi}) outside operator limits ({llo}, {lhi})"),
            ));
        }
        Ok(())
    }

    /// Magnitude at relative strength `t` in `[0, 1]` between the identity
    /// value and the sampling-range end farthest from it. Signed operators
    /// take the sign of `sign`.
    pub fn magnitude_at(&self, t: f64, sign: f64) -> Result<f64> {
        let Some(id_mag) = self.id.identity_magnitude() else {
            return Err(MastError::contract(format!("{} has no identity magnitude", self.id)));
        };
        let (lo, hi) = self.magnitude_range;
        let far = if (hi - id_mag).abs() >= (lo - id_mag).abs() { hi } else { lo };
        let mut m = id_mag + t.clamp(0.0, 1.0) * (far - id_mag);
        if self.id.is_signed() {
            m = m.abs() * if sign < 0.0 { -1.0 } else { 1.0 };
        }
        Ok(m)
    }
}

/// The operators of a training run; position `k` owns mask column `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSet {
    ops: Vec<AugmentationOp>,
}

impl AugmentationSet {
    pub fn new(mut ops: Vec<AugmentationOp>) -> Result<Self> {
        if ops.is_empty() {
            return Err(MastError::config("augmentations", "set must not be empty"));
        }
        ops.sort_by_key(|o| o.id.canonical_index());
        for w in ops.windows(2) {
            if w[0].id == w[1].id {
                return Err(MastError::config("augmentations", format!("duplicate operator {}", w[0].id)));
            }
        }
        for op in &ops {
            op.validate()?;
        }
        Ok(Self { ops })
    }

    pub fn from_ids(ids: &[OpId]) -> Result<Self> {
        Self::new(ids.iter().map(|&id| AugmentationOp::new(id)).collect())
    }

    /// `mast5`, `mast15`, `mast19`, or a comma-separated operator list.
    pub fn named(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "mast5" => Self::from_ids(&OpId::ALL[..5]),
            "mast15" => Self::from_ids(&OpId::ALL[..15]),
            "mast19" => Self::from_ids(&OpId::ALL),
            other => {
                let ids = other
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(OpId::parse)
                    .collect::<Result<Vec<_>>>()?;
                Self::from_ids(&ids)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[AugmentationOp] {
        &self.ops
    }

    pub fn get(&self, k: usize) -> Option<&AugmentationOp> {
        self.ops.get(k)
    }

    pub fn position(&self, id: OpId) -> Option<usize> {
        self.ops.iter().position(|o| o.id == id)
    }

    pub fn ids(&self) -> Vec<OpId> {
        self.ops.iter().map(|o| o.id).collect()
    }

    /// The set with `id` removed.
    pub fn without(&self, id: OpId) -> Result<Self> {
        if self.position(id).is_none() {
            return Err(MastError::contract(format!("{id} is not in the augmentation set")));
        }
        if self.ops.len() == 1 {
            return Err(MastError::contract("cannot remove the only augmentation"));
        }
        Ok(Self {
            ops: self.ops.iter().copied().filter(|o| o.id != id).collect(),
        })
    }
}
