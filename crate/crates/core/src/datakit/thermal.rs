use crate::datakit::image::Image;
use crate::error::{GlassError, Result};

/// Absolute temperature readings in °C, one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawThermal {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl RawThermal {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height * width == 0 || values.len() != height * width {
            return Err(GlassError::shape(format!(
                "thermal buffer of {} values does not match {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Per-image min-max normalization to `[0, 1]`.
///
/// A constant image carries no contrast and maps to all zeros.
pub fn normalize_thermal(raw: &RawThermal) -> Result<Image> {
    if let Some(i) = raw.values.iter().position(|v| !v.is_finite()) {
        return Err(GlassError::invalid(format!(
            "thermal reading at index {i} is not finite ({})",
            raw.values[i]
        )));
    }
    let (lo, hi) = raw
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi as f64) - (lo as f64);
    let data = if span > 0.0 {
        raw.values
            .iter()
            .map(|&v| (((v as f64) - lo as f64) / span).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        vec![0.0; raw.values.len()]
    };
    Image::new(raw.height, raw.width, 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f32]) -> RawThermal {
        RawThermal::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn maps_endpoints_and_midpoint() {
        let out = normalize_thermal(&row(&[0.0, 50.0, 100.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn four_point_ramp() {
        let out = normalize_thermal(&row(&[10.0, 20.0, 30.0, 40.0])).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_input_is_all_zero() {
        let out = normalize_thermal(&row(&[25.0; 6])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            normalize_thermal(&row(&[1.0, f32::NAN])),
            Err(GlassError::InvalidInput(_))
        ));
        assert!(normalize_thermal(&row(&[f32::INFINITY, 1.0])).is_err());
    }

    #[test]
    fn negative_temperatures() {
        let out = normalize_thermal(&row(&[-20.0, 120.0, 50.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.5]);
    }
}
