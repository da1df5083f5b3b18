//! Downstream uses of glass masks: plane-based depth correction and masking
//! glass out of colour images before semantic segmentation.

pub mod depth;
pub mod plane;

pub use depth::{read_depth, write_depth, write_point_cloud_ply, DepthMap};
pub use plane::{
    boundary_pixels, correct_depth, fit_glass_plane, fit_plane_points, CameraIntrinsics, ComponentFit,
    DepthCorrection, GlassPlane,
};

use crate::datakit::{BinaryMask, Image};
use crate::error::{GlassError, Result};

/// `rgb · (1 − mask)`: glass pixels set to zero in every channel.
pub fn mask_out_glass(rgb: &Image, mask: &BinaryMask) -> Result<Image> {
    if rgb.dims() != mask.dims() {
        return Err(GlassError::shape(format!(
            "image is {:?} but mask is {:?}",
            rgb.dims(),
            mask.dims()
        )));
    }
    let c = rgb.channels();
    let mut out = rgb.clone();
    for (i, px) in out.data_mut().chunks_mut(c).enumerate() {
        if mask.data()[i] == 1 {
            px.fill(0.0);
        }
    }
    Ok(out)
}
