use serde::{Deserialize, Serialize};

use crate::datakit::image::{BinaryMask, Image};
use crate::error::{GlassError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source: String,
    pub scene: String,
    /// Glass fraction of the mask, when known at construction time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_ratio: Option<f64>,
}

/// One aligned RGB / thermal pair with an optional ground-truth glass mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbtSample {
    rgb: Image,
    thermal: Image,
    mask: Option<BinaryMask>,
    pub meta: SampleMeta,
}

impl RgbtSample {
    pub fn new(rgb: Image, thermal: Image, mask: Option<BinaryMask>, meta: SampleMeta) -> Result<Self> {
        if rgb.channels() != 3 {
            return Err(GlassError::invalid(format!(
                "rgb image must have 3 channels, got {}",
                rgb.channels()
            )));
        }
        if thermal.channels() != 1 {
            return Err(GlassError::invalid(format!(
                "thermal image must have 1 channel, got {}",
                thermal.channels()
            )));
        }
        if rgb.dims() != thermal.dims() {
            return Err(GlassError::shape(format!(
                "rgb {:?} and thermal {:?} dimensions differ",
                rgb.dims(),
                thermal.dims()
            )));
        }
        if let Some(m) = &mask {
            if m.dims() != rgb.dims() {
                return Err(GlassError::shape(format!(
                    "mask {:?} and rgb {:?} dimensions differ",
                    m.dims(),
                    rgb.dims()
                )));
            }
        }
        if let Some(v) = thermal.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GlassError::invalid(format!(
                "thermal value {v} outside [0, 1]; normalize first"
            )));
        }
        Ok(Self {
            rgb,
            thermal,
            mask,
            meta,
        })
    }

    pub fn rgb(&self) -> &Image {
        &self.rgb
    }

    pub fn thermal(&self) -> &Image {
        &self.thermal
    }

    pub fn mask(&self) -> Option<&BinaryMask> {
        self.mask.as_ref()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rgb.dims()
    }

    pub fn into_parts(self) -> (Image, Image, Option<BinaryMask>, SampleMeta) {
        (self.rgb, self.thermal, self.mask, self.meta)
    }
}
