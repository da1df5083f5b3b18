//! Plane-based depth correction for glass regions.
//!
//! Depth sensors and monocular estimators return unreliable values on glass.
//! Each glass component is modelled as a 3D plane fitted to the depths just
//! outside it, and the interior is replaced by the plane's depth along each
//! pixel ray.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apps::depth::DepthMap;
use crate::datakit::{label_components, BinaryMask};
use crate::error::{GlassError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(GlassError::invalid(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// `K⁻¹ (u, v, 1)`: the ray through pixel `(u, v)` with unit depth.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.ray(u, v) * depth
    }
}

/// `n · X = d`, with `|n| = 1` and `d ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlassPlane {
    pub normal: [f64; 3],
    pub offset: f64,
    pub inlier_count: usize,
    pub residual_rms: f64,
}

impl GlassPlane {
    fn n(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.n().dot(p) - self.offset
    }

    /// Depth at which `ray` meets the plane, if it does in front of the camera.
    pub fn depth_along(&self, ray: &Vector3<f64>) -> Option<f64> {
        let denom = self.n().dot(ray);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.offset / denom;
        (t > 0.0 && t.is_finite()).then_some(t)
    }
}

/// Non-glass pixels 8-adjacent to a glass pixel, in row-major order as `(y, x)`.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    ring(mask.height(), mask.width(), |y, x| mask.get(y, x))
}

fn ring(h: usize, w: usize, inside: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) {
                continue;
            }
            let touches = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| inside(yy, xx)));
            if touches {
                out.push((y, x));
            }
        }
    }
    out
}

const TRIM_SIGMA: f64 = 2.0;
const TRIM_ROUNDS: usize = 3;
const CONSENSUS_TRIALS: usize = 256;
const CONSENSUS_SEED: u64 = 0x9_1a55;

/// Least-squares plane through `points` (total least squares via SVD).
fn least_squares(points: &[Vector3<f64>]) -> Result<(Vector3<f64>, f64)> {
    if points.len() < 3 {
        return Err(GlassError::PlaneFit(format!("{} points cannot define a plane", points.len())));
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let q = p - centroid;
        cov += q * q.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (middle, largest) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if largest <= 0.0 || middle <= 1e-12 * largest {
        return Err(GlassError::PlaneFit("boundary points are collinear".into()));
    }
    let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned().normalize();
    let mut d = n.dot(&centroid);
    if d < 0.0 || (d == 0.0 && n.z < 0.0) {
        n = -n;
        d = -d;
    }
    Ok((n, d))
}

fn plane_through(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len < 1e-12 {
        return None;
    }
    let n = n / len;
    Some((n, n.dot(a)))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Robust plane fit to 3D points.
///
/// A least-median-of-squares search over point triples seeds the inlier
/// set, then the plane is refit by least squares with three rounds of
/// trimming at two standard deviations. Points are put in a canonical order
/// first, so the result does not depend on input order.
pub fn fit_plane_points(points: &[Vector3<f64>]) -> Result<GlassPlane> {
    let mut pts: Vec<Vector3<f64>> = points.iter().filter(|p| p.iter().all(|c| c.is_finite())).copied().collect();
    if pts.len() < 3 {
        return Err(GlassError::PlaneFit(format!("only {} valid boundary points", pts.len())));
    }
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z)));
    let (mut n, mut d) = least_squares(&pts)?;
    let mut inliers = pts.clone();

    let abs_res = |n: &Vector3<f64>, d: f64| -> Vec<f64> { pts.iter().map(|p| (n.dot(p) - d).abs()).collect() };
    if pts.len() > 3 {
        let mut rng = ChaCha8Rng::seed_from_u64(CONSENSUS_SEED);
        let mut best = median(abs_res(&n, d));
        for _ in 0..CONSENSUS_TRIALS {
            let i = rng.random_range(0..pts.len());
            let j = rng.random_range(0..pts.len());
            let k = rng.random_range(0..pts.len());
            if i == j || j == k || i == k {
                continue;
            }
            if let Some((cn, cd)) = plane_through(&pts[i], &pts[j], &pts[k]) {
                let m = median(abs_res(&cn, cd));
                if m < best {
                    best = m;
                    (n, d) = (cn, cd);
                }
            }
        }
        // Robust scale from the median residual seeds the inlier set.
        let scale = 1.4826 * best;
        let seed: Vec<Vector3<f64>> = pts
            .iter()
            .filter(|p| (n.dot(p) - d).abs() <= TRIM_SIGMA * 1.25 * scale.max(1e-12))
            .copied()
            .collect();
        if let Ok(fit) = least_squares(&seed) {
            (n, d) = fit;
            inliers = seed;
        }
    }

    for _ in 0..TRIM_ROUNDS {
        let res: Vec<f64> = abs_res(&n, d);
        let sigma = (inliers.iter().map(|p| (n.dot(p) - d).powi(2)).sum::<f64>() / inliers.len() as f64).sqrt();
        let kept: Vec<Vector3<f64>> = pts
            .iter()
            .zip(&res)
            .filter(|(_, &r)| r <= TRIM_SIGMA * sigma + 1e-12)
            .map(|(p, _)| *p)
            .collect();
        if kept.len() < 3 {
            break;
        }
        match least_squares(&kept) {
            Ok(fit) => {
                (n, d) = fit;
                inliers = kept;
            }
            Err(_) => break,
        }
    }
    let rms = (inliers.iter().map(|p| (n.dot(p) - d).powi(2)).sum::<f64>() / inliers.len() as f64).sqrt();
    let mut n = n;
    if d < 0.0 {
        n = -n;
        d = -d;
    }
    Ok(GlassPlane {
        normal: [n.x, n.y, n.z],
        offset: d,
        inlier_count: inliers.len(),
        residual_rms: rms,
    })
}

fn boundary_points(depth: &DepthMap, pixels: &[(usize, usize)], k: &CameraIntrinsics) -> Vec<Vector3<f64>> {
    pixels
        .iter()
        .filter_map(|&(y, x)| {
            let z = depth.get(y, x);
            (z > 0.0 && z.is_finite()).then(|| k.back_project(x as f64, y as f64, z))
        })
        .collect()
}

/// Fits one plane to the exterior boundary of every glass pixel in `mask`.
pub fn fit_glass_plane(depth: &DepthMap, mask: &BinaryMask, k: &CameraIntrinsics) -> Result<GlassPlane> {
    check_dims(depth, mask)?;
    fit_plane_points(&boundary_points(depth, &boundary_pixels(mask), k))
}

fn check_dims(depth: &DepthMap, mask: &BinaryMask) -> Result<()> {
    if depth.dims() != mask.dims() {
        return Err(GlassError::shape(format!(
            "depth is {:?} but mask is {:?}",
            depth.dims(),
            mask.dims()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentFit {
    pub label: u32,
    pub pixels: usize,
    pub plane: Option<GlassPlane>,
    /// Why the component was left untouched.
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DepthCorrection {
    pub depth: DepthMap,
    pub components: Vec<ComponentFit>,
}

impl DepthCorrection {
    pub fn failed(&self) -> impl Iterator<Item = &ComponentFit> {
        self.components.iter().filter(|c| c.failure.is_some())
    }
}

/// Replaces the depth inside each glass component by its fitted plane.
/// Pixels outside the mask, and components whose fit fails, keep their
/// input values.
pub fn correct_depth(depth: &DepthMap, mask: &BinaryMask, k: &CameraIntrinsics) -> Result<DepthCorrection> {
    check_dims(depth, mask)?;
    let labels = label_components(mask);
    let (h, w) = mask.dims();
    let mut out = depth.clone();
    let mut components = Vec::with_capacity(labels.count);
    for label in 1..=labels.count as u32 {
        let pixels = ring(h, w, |y, x| labels.label_at(y, x) == label);
        let members: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| labels.label_at(y, x) == label)
            .collect();
        let mut fit = ComponentFit {
            label,
            pixels: members.len(),
            plane: None,
            failure: None,
        };
        match fit_plane_points(&boundary_points(depth, &pixels, k)) {
            Ok(plane) => {
                let mut missed = 0;
                for &(y, x) in &members {
                    match plane.depth_along(&k.ray(x as f64, y as f64)) {
                        Some(z) => out.set(y, x, z),
                        None => missed += 1,
                    }
                }
                if missed > 0 {
                    fit.failure = Some(format!("{missed} pixel rays miss the plane"));
                }
                fit.plane = Some(plane);
            }
            Err(e) => {
                log::warn!("glass component {label}: {e}");
                fit.failure = Some(e.to_string());
            }
        }
        components.push(fit);
    }
    Ok(DepthCorrection { depth: out, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5).unwrap()
    }

    /// Depth map of the plane `n·X = d` seen through `k`.
    fn plane_depth(h: usize, w: usize, n: Vector3<f64>, d: f64) -> DepthMap {
        let k = k();
        DepthMap::from_fn(h, w, |y, x| d / n.dot(&k.ray(x as f64, y as f64)))
    }

    #[test]
    fn ring_around_center_block() {
        let mask = BinaryMask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        let ring = boundary_pixels(&mask);
        assert_eq!(ring.len(), 12);
        assert!(ring.iter().all(|&(y, x)| !mask.get(y, x)));
        assert!(boundary_pixels(&BinaryMask::zeros(4, 4)).is_empty());
        assert!(boundary_pixels(&BinaryMask::ones(4, 4)).is_empty());
    }

    #[test]
    fn fronto_parallel_plane() {
        let depth = DepthMap::filled(48, 64, 2.0);
        let mask = BinaryMask::from_fn(48, 64, |y, x| (10..30).contains(&y) && (20..40).contains(&x));
        let p = fit_glass_plane(&depth, &mask, &k()).unwrap();
        assert!((p.normal[2] - 1.0).abs() < 1e-6 && p.normal[0].abs() < 1e-6 && p.normal[1].abs() < 1e-6);
        assert!((p.offset - 2.0).abs() < 1e-6);
    }

    #[test]
    fn interior_is_replaced_outside_untouched() {
        let n = Vector3::new(0.2, -0.1, 1.0).normalize();
        let truth = plane_depth(48, 64, n, 1.5);
        let mask = BinaryMask::from_fn(48, 64, |y, x| (10..30).contains(&y) && (20..40).contains(&x));
        let mut corrupted = truth.clone();
        for y in 10..30 {
            for x in 20..40 {
                corrupted.set(y, x, 7.0 + (x * y % 5) as f64);
            }
        }
        let fixed = correct_depth(&corrupted, &mask, &k()).unwrap();
        assert_eq!(fixed.failed().count(), 0);
        for y in 0..48 {
            for x in 0..64 {
                if mask.get(y, x) {
                    assert!((fixed.depth.get(y, x) - truth.get(y, x)).abs() < 1e-6);
                } else {
                    assert_eq!(fixed.depth.get(y, x).to_bits(), corrupted.get(y, x).to_bits());
                }
            }
        }
        let again = correct_depth(&fixed.depth, &mask, &k()).unwrap();
        assert!(again.depth.data().iter().zip(fixed.depth.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn outliers_are_rejected() {
        let n = Vector3::new(0.3, 0.2, 1.0).normalize();
        let truth = plane_depth(48, 64, n, 2.0);
        let mask = BinaryMask::from_fn(48, 64, |y, x| (8..36).contains(&y) && (12..50).contains(&x));
        let mut depth = truth.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ring = boundary_pixels(&mask);
        ring.shuffle(&mut rng);
        for &(y, x) in &ring[..ring.len() * 3 / 10] {
            depth.set(y, x, rng.random_range(0.5..6.0));
        }
        let p = fit_glass_plane(&depth, &mask, &k()).unwrap();
        assert!((p.offset - 2.0).abs() < 0.05, "{p:?}");
    }

    #[test]
    fn too_few_or_collinear_points_fail() {
        let pts = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)];
        assert!(matches!(fit_plane_points(&pts), Err(GlassError::PlaneFit(_))));
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(matches!(fit_plane_points(&line), Err(GlassError::PlaneFit(_))));
        let empty = correct_depth(&DepthMap::filled(8, 8, 1.0), &BinaryMask::zeros(8, 8), &k()).unwrap();
        assert!(empty.depth.data().iter().all(|&v| v == 1.0));
        let no_depth = correct_depth(&DepthMap::filled(8, 8, 0.0), &BinaryMask::from_fn(8, 8, |y, x| y == 4 && x == 4), &k()).unwrap();
        assert_eq!(no_depth.failed().count(), 1);
    }
}
