//! Equidistant fisheye camera model and frame correction.
//!
//! The lens maps a ray at angle `θ` from the optical axis to the image radius
//! `θ_d = θ (1 + k1 θ² + k2 θ⁴ + k3 θ⁶ + k4 θ⁸)` (in focal-length units), the
//! four-coefficient Kannala-Brandt form also used by OpenCV's fisheye module.
//! Correction resamples the frame onto a pinhole image by inverse mapping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const NEWTON_TOLERANCE: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    pub k: [f64; 4],
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    /// Side-camera intrinsics of the collection robot: 1920x1080 sensor,
    /// focal length 410 px, principal point (383, 526), no extra distortion.
    fn default() -> Self {
        CameraIntrinsics {
            fx: 410.0,
            fy: 410.0,
            px: 383.0,
            py: 526.0,
            k: [0.0; 4],
            width: 1920,
            height: 1080,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.px >= 0.0
            && self.px < self.width as f64
            && self.py >= 0.0
            && self.py < self.height as f64
            && self.k.iter().all(|k| k.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid camera intrinsics {self:?}"
            )))
        }
    }

    /// Same lens geometry scaled to a sensor of a different resolution.
    pub fn scaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            px: self.px * sx,
            py: self.py * sy,
            k: self.k,
            width,
            height,
        }
    }

    /// Distorted angle `θ_d(θ)`.
    pub fn distort_angle(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    /// `dθ_d/dθ`.
    pub fn distort_angle_deriv(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    /// Solves `θ_d(θ) = theta_d` by Newton's method starting at `θ = θ_d`.
    /// Returns `None` when the iteration does not converge within 20 steps.
    pub fn undistort_angle(&self, theta_d: f64) -> Option<f64> {
        if theta_d == 0.0 {
            return Some(0.0);
        }
        if self.k == [0.0; 4] {
            return Some(theta_d);
        }
        let mut theta = theta_d;
        for _ in 0..NEWTON_MAX_ITER {
            let d = self.distort_angle_deriv(theta);
            if d <= 0.0 || !d.is_finite() {
                return None;
            }
            let step = (self.distort_angle(theta) - theta_d) / d;
            theta -= step;
            if !theta.is_finite() {
                return None;
            }
            if step.abs() < NEWTON_TOLERANCE {
                return (theta >= 0.0).then_some(theta);
            }
        }
        None
    }

    /// Largest ray angle (capped at π/2) up to which `θ_d(θ)` is strictly increasing.
    pub fn monotone_limit(&self) -> f64 {
        let cap = std::f64::consts::FRAC_PI_2;
        let steps = 20_000;
        let h = cap / steps as f64;
        let mut prev = 0.0;
        for i in 1..=steps {
            let t = i as f64 * h;
            if self.distort_angle_deriv(t) <= 0.0 {
                let (mut lo, mut hi) = (prev, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.distort_angle_deriv(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return lo;
            }
            prev = t;
        }
        cap
    }
}

/// Projects a camera-frame point (z along the optical axis) to fisheye pixels.
pub fn project_fisheye(point: [f64; 3], intr: &CameraIntrinsics) -> Result<[f64; 2]> {
    let [x, y, z] = point;
    if !(z > 0.0) {
        return Err(Error::Domain(format!(
            "point {point:?} must have positive depth"
        )));
    }
    let r = x.hypot(y);
    let theta = r.atan2(z);
    let theta_d = intr.distort_angle(theta);
    let (cos_phi, sin_phi) = if r > 0.0 { (x / r, y / r) } else { (1.0, 0.0) };
    Ok([
        intr.fx * theta_d * cos_phi + intr.px,
        intr.fy * theta_d * sin_phi + intr.py,
    ])
}

/// Back-projects a fisheye pixel to a unit ray, or `None` when the angle
/// inversion fails.
pub fn unproject_fisheye(pixel: [f64; 2], intr: &CameraIntrinsics) -> Option<[f64; 3]> {
    let mx = (pixel[0] - intr.px) / intr.fx;
    let my = (pixel[1] - intr.py) / intr.fy;
    let theta_d = mx.hypot(my);
    let theta = intr.undistort_angle(theta_d)?;
    let (cos_phi, sin_phi) = if theta_d > 0.0 {
        (mx / theta_d, my / theta_d)
    } else {
        (1.0, 0.0)
    };
    let s = theta.sin();
    Some([s * cos_phi, s * sin_phi, theta.cos()])
}

/// Geometry of the pinhole view produced by [`undistort`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UndistortConfig {
    /// Output focal length in pixels; `None` uses the input `fx`.
    pub focal: Option<f64>,
    /// Output `(width, height)`; `None` keeps the input size.
    pub output_size: Option<(usize, usize)>,
    /// Output optical centre; `None` keeps the input principal point.
    pub center: Option<(f64, f64)>,
    /// Centre crop `(width, height)` applied after correction.
    pub crop: (usize, usize),
}

impl Default for UndistortConfig {
    fn default() -> Self {
        UndistortConfig {
            focal: None,
            output_size: None,
            center: None,
            crop: (1000, 1000),
        }
    }
}

/// Fully resolved pinhole output geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeView {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeView {
    pub fn project(&self, point: [f64; 3]) -> Option<[f64; 2]> {
        (point[2] > 0.0).then(|| {
            [
                self.focal * point[0] / point[2] + self.cx,
                self.focal * point[1] / point[2] + self.cy,
            ]
        })
    }
}

impl UndistortConfig {
    pub fn resolve(&self, intr: &CameraIntrinsics) -> Result<PinholeView> {
        let (width, height) = self.output_size.unwrap_or((intr.width, intr.height));
        let (cx, cy) = self.center.unwrap_or((intr.px, intr.py));
        let focal = self.focal.unwrap_or(intr.fx);
        if !(focal > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "undistort output {width}x{height} with focal {focal}"
            )));
        }
        if self.crop.0 > width || self.crop.1 > height {
            return Err(Error::InvalidInput(format!(
                "crop {:?} exceeds output size {width}x{height}",
                self.crop
            )));
        }
        Ok(PinholeView {
            focal,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Result of [`undistort`].
#[derive(Debug, Clone)]
pub struct Undistorted {
    pub image: Image,
    /// Output pixels whose ray lies beyond the invertible range of the lens
    /// polynomial; these are filled with 0.
    pub unresolved_pixels: usize,
}

/// Resamples a fisheye frame onto a pinhole view. Each output pixel's ray is
/// pushed through [`project_fisheye`] and the source is sampled bilinearly;
/// samples outside the source are 0.
pub fn undistort(
    img: &Image,
    intr: &CameraIntrinsics,
    cfg: &UndistortConfig,
) -> Result<Undistorted> {
    intr.validate()?;
    if img.width() != intr.width || img.height() != intr.height {
        return Err(Error::Shape(format!(
            "image is {}x{} but intrinsics describe {}x{}",
            img.width(),
            img.height(),
            intr.width,
            intr.height
        )));
    }
    let view = cfg.resolve(intr)?;
    let theta_limit = intr.monotone_limit();
    let ch = img.channels();
    let mut out = Image::new(view.width, view.height, ch)?;
    let row_len = view.width * ch;
    let unresolved: usize = out
        .data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .map(|(y, row)| {
            let mut bad = 0;
            for x in 0..view.width {
                let ray = [
                    (x as f64 - view.cx) / view.focal,
                    (y as f64 - view.cy) / view.focal,
                    1.0,
                ];
                let theta = ray[0].hypot(ray[1]).atan();
                if theta >= theta_limit {
                    bad += 1;
                    continue;
                }
                let [u, v] = project_fisheye(ray, intr).expect("positive depth");
                for c in 0..ch {
                    row[x * ch + c] = img.sample_bilinear(u, v, c).unwrap_or(0.0);
                }
            }
            bad
        })
        .sum();
    Ok(Undistorted {
        image: out,
        unresolved_pixels: unresolved,
    })
}

/// Maps a fisheye pixel to its position in the pinhole view.
pub fn undistort_point(
    pixel: [f64; 2],
    intr: &CameraIntrinsics,
    view: &PinholeView,
) -> Option<[f64; 2]> {
    unproject_fisheye(pixel, intr).and_then(|ray| view.project(ray))
}

/// Renders a pinhole image through the fisheye lens: the inverse of
/// [`undistort`]. Returns the fisheye image and the number of pixels whose
/// angle inversion failed (filled with 0).
pub fn distort(
    pinhole: &Image,
    view: &PinholeView,
    intr: &CameraIntrinsics,
) -> Result<(Image, usize)> {
    intr.validate()?;
    if pinhole.width() != view.width || pinhole.height() != view.height {
        return Err(Error::Shape("pinhole image does not match its view".into()));
    }
    let ch = pinhole.channels();
    let mut out = Image::new(intr.width, intr.height, ch)?;
    let row_len = intr.width * ch;
    let failed = out
        .data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .map(|(v, row)| {
            let mut bad = 0;
            for u in 0..intr.width {
                let Some(ray) = unproject_fisheye([u as f64, v as f64], intr) else {
                    bad += 1;
                    continue;
                };
                let Some([x, y]) = (ray[2] > 1e-9).then(|| view.project(ray)).flatten() else {
                    continue;
                };
                for c in 0..ch {
                    row[u * ch + c] = pinhole.sample_bilinear(x, y, c).unwrap_or(0.0);
                }
            }
            bad
        })
        .sum();
    Ok((out, failed))
}

/// Offsets `(x0, y0)` of a centred crop: `floor((dim - crop) / 2)`.
pub fn crop_offsets(
    width: usize,
    height: usize,
    crop_w: usize,
    crop_h: usize,
) -> Result<(usize, usize)> {
    if crop_w > width || crop_h > height {
        return Err(Error::InvalidInput(format!(
            "crop {crop_w}x{crop_h} larger than image {width}x{height}"
        )));
    }
    Ok(((width - crop_w) / 2, (height - crop_h) / 2))
}

pub fn center_crop(img: &Image, crop_w: usize, crop_h: usize) -> Result<Image> {
    let (x0, y0) = crop_offsets(img.width(), img.height(), crop_w, crop_h)?;
    let ch = img.channels();
    let mut data = Vec::with_capacity(crop_w * crop_h * ch);
    for y in y0..y0 + crop_h {
        let start = img.index(x0, y, 0);
        data.extend_from_slice(&img.data()[start..start + crop_w * ch]);
    }
    Image::from_vec(crop_w, crop_h, ch, data)
}

/// Undistortion followed by the configured centre crop.
pub fn correct_frame(
    img: &Image,
    intr: &CameraIntrinsics,
    cfg: &UndistortConfig,
) -> Result<Undistorted> {
    let und = undistort(img, intr, cfg)?;
    Ok(Undistorted {
        image: center_crop(&und.image, cfg.crop.0, cfg.crop.1)?,
        unresolved_pixels: und.unresolved_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ray_at(theta: f64, phi: f64) -> [f64; 3] {
        [
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        ]
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = project_fisheye([0.0, 0.0, 1.0], &CameraIntrinsics::default()).unwrap();
        assert_eq!(p, [383.0, 526.0]);
    }

    #[test]
    fn equidistant_radius() {
        let intr = CameraIntrinsics::default();
        let [u, v] = project_fisheye(ray_at(0.5, 0.0), &intr).unwrap();
        assert!((u - 588.0).abs() < 1e-9 && (v - 526.0).abs() < 1e-9);
        let [u, v] = project_fisheye(ray_at(0.5, std::f64::consts::PI), &intr).unwrap();
        assert!((u - 178.0).abs() < 1e-9 && (v - 526.0).abs() < 1e-9);
    }

    #[test]
    fn non_positive_depth_is_domain_error() {
        let intr = CameraIntrinsics::default();
        assert!(matches!(
            project_fisheye([0.1, 0.0, 0.0], &intr),
            Err(Error::Domain(_))
        ));
        assert!(project_fisheye([0.1, 0.0, -1.0], &intr).is_err());
    }

    #[test]
    fn crop_window_on_sensor_frame() {
        assert_eq!(crop_offsets(1920, 1080, 1000, 1000).unwrap(), (460, 40));
        let img =
            Image::from_fn(1920, 1080, 1, |x, y, _| ((x + 3 * y) % 251) as f32 / 251.0).unwrap();
        let c = center_crop(&img, 1000, 1000).unwrap();
        assert_eq!(c.get(0, 0, 0), img.get(460, 40, 0));
        assert_eq!(c.get(999, 999, 0), img.get(1459, 1039, 0));
        assert!(center_crop(&img, 1921, 10).is_err());
    }

    #[test]
    fn crop_identity_and_centre() {
        let img = Image::from_fn(3, 3, 1, |x, y, _| (y * 3 + x) as f32 / 9.0).unwrap();
        assert_eq!(center_crop(&img, 3, 3).unwrap(), img);
        let c = center_crop(&img, 1, 1).unwrap();
        assert_eq!(c.get(0, 0, 0), img.get(1, 1, 0));
    }

    #[test]
    fn undistort_fixed_point_and_zero_image() {
        let intr = CameraIntrinsics::default().scaled(192, 108);
        let mut img = Image::new(192, 108, 1).unwrap();
        // principal point of the scaled camera is (38.3, 52.6); use an integer one
        let intr = CameraIntrinsics {
            px: 38.0,
            py: 52.0,
            ..intr
        };
        let cfg = UndistortConfig {
            crop: (10, 10),
            ..Default::default()
        };
        let zero = undistort(&img, &intr, &cfg).unwrap();
        assert!(zero.image.data().iter().all(|&v| v == 0.0));
        img.set(38, 52, 0, 0.75);
        let out = undistort(&img, &intr, &cfg).unwrap();
        assert_eq!(out.image.get(38, 52, 0), 0.75);
        assert_eq!(out.unresolved_pixels, 0);
    }

    #[test]
    fn undistort_rejects_dimension_mismatch() {
        let img = Image::new(10, 10, 1).unwrap();
        let r = undistort(
            &img,
            &CameraIntrinsics::default(),
            &UndistortConfig::default(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn folded_lens_marks_unresolved_pixels() {
        // strongly negative k1 makes θ_d(θ) turn over inside the field of view
        let intr = CameraIntrinsics {
            k: [-0.6, 0.0, 0.0, 0.0],
            ..CameraIntrinsics::default().scaled(96, 54)
        };
        let limit = intr.monotone_limit();
        assert!(limit < std::f64::consts::FRAC_PI_2);
        assert!(intr.distort_angle_deriv(limit).abs() < 1e-6);
        let img = Image::filled(96, 54, 1, 1.0).unwrap();
        let cfg = UndistortConfig {
            crop: (1, 1),
            focal: Some(10.0),
            ..Default::default()
        };
        let out = undistort(&img, &intr, &cfg).unwrap();
        assert!(out.unresolved_pixels > 0);
    }

    #[test]
    fn newton_gives_up_past_fold() {
        let intr = CameraIntrinsics {
            k: [-0.6, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        let peak = intr.distort_angle(intr.monotone_limit());
        assert!(intr.undistort_angle(peak * 1.2).is_none());
    }

    proptest! {
        #[test]
        fn rotational_equivariance(theta in 0.0f64..1.4, phi in -3.0f64..3.0, alpha in -3.0f64..3.0,
                                   k1 in -0.05f64..0.05, k2 in -0.05f64..0.05) {
            let intr = CameraIntrinsics { k: [k1, k2, 0.01, -0.01], ..Default::default() };
            let [u0, v0] = project_fisheye(ray_at(theta, phi), &intr).unwrap();
            let [u1, v1] = project_fisheye(ray_at(theta, phi + alpha), &intr).unwrap();
            let (dx, dy) = (u0 - intr.px, v0 - intr.py);
            let (ca, sa) = (alpha.cos(), alpha.sin());
            prop_assert!((ca * dx - sa * dy - (u1 - intr.px)).abs() < 1e-9);
            prop_assert!((sa * dx + ca * dy - (v1 - intr.py)).abs() < 1e-9);
        }

        #[test]
        fn unproject_then_project(k in proptest::array::uniform4(-0.05f64..0.05),
                                  theta in 0.0f64..1.0, phi in -3.2f64..3.2) {
            let intr = CameraIntrinsics { k, ..Default::default() };
            let px = project_fisheye(ray_at(theta, phi), &intr).unwrap();
            let ray = unproject_fisheye(px, &intr).unwrap();
            let back = project_fisheye(ray, &intr).unwrap();
            prop_assert!((back[0] - px[0]).abs() < 1e-6 && (back[1] - px[1]).abs() < 1e-6);
        }

        #[test]
        fn crop_is_idempotent(w in 1usize..30, h in 1usize..30, cw in 1usize..30, ch in 1usize..30) {
            prop_assume!(cw <= w && ch <= h);
            let img = Image::from_fn(w, h, 1, |x, y, _| (x * 31 + y) as f32 / 1000.0).unwrap();
            let once = center_crop(&img, cw, ch).unwrap();
            prop_assert_eq!(center_crop(&once, cw, ch).unwrap(), once);
        }
    }
}
