use proptest::prelude::*;
use soyscan::camera::{
    project_fisheye, undistort, unproject_fisheye, CameraIntrinsics, UndistortConfig,
};
use soyscan::counting::connected_blobs;
use soyscan::Image;

const DOT_SIGMA: f64 = 1.5;

/// Gaussian dots drawn directly in the fisheye image at the forward-projected
/// positions of `points`.
fn render_fisheye_dots(points: &[[f64; 3]], intr: &CameraIntrinsics) -> Image {
    let mut img = Image::new(intr.width, intr.height, 3).unwrap();
    let reach = (5.0 * DOT_SIGMA).ceil() as i64;
    for p in points {
        let [u, v] = project_fisheye(*p, intr).unwrap();
        for y in (v.round() as i64 - reach)..=(v.round() as i64 + reach) {
            for x in (u.round() as i64 - reach)..=(u.round() as i64 + reach) {
                if x < 0 || y < 0 || x >= intr.width as i64 || y >= intr.height as i64 {
                    continue;
                }
                let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                let val = (-d2 / (2.0 * DOT_SIGMA * DOT_SIGMA)).exp() as f32;
                for c in 0..3 {
                    let old = img.get(x as usize, y as usize, c);
                    img.set(x as usize, y as usize, c, old + val);
                }
            }
        }
    }
    img
}

/// Planar grid on z = 1, limited to 45 degrees off axis.
fn grid_points() -> Vec<[f64; 3]> {
    let mut pts = Vec::new();
    for i in -4..=4 {
        for j in -4..=4 {
            let (x, y) = (i as f64 * 0.2, j as f64 * 0.2);
            if x.hypot(y) <= 1.0 {
                pts.push([x, y, 1.0]);
            }
        }
    }
    pts
}

fn mean_reprojection_error(intr: &CameraIntrinsics) -> f64 {
    let pts = grid_points();
    let fish = render_fisheye_dots(&pts, intr);
    let cfg = UndistortConfig::default();
    let view = cfg.resolve(intr).unwrap();
    let out = undistort(&fish, intr, &cfg).unwrap().image;
    let blobs = connected_blobs(&out, 0.2);
    assert_eq!(blobs.len(), pts.len());
    let expected: Vec<[f64; 2]> = pts.iter().map(|p| view.project(*p).unwrap()).collect();
    let total: f64 = blobs
        .iter()
        .map(|b| {
            expected
                .iter()
                .map(|e| (b.centroid[0] - e[0]).hypot(b.centroid[1] - e[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / blobs.len() as f64
}

#[test]
fn undistorted_grid_matches_pinhole_render() {
    let err = mean_reprojection_error(&CameraIntrinsics::default());
    assert!(err < 0.5, "mean error {err} px");
}

#[test]
fn undistorted_grid_matches_pinhole_render_with_distortion() {
    let intr = CameraIntrinsics {
        k: [-0.03, 0.004, 0.0, 0.0],
        ..CameraIntrinsics::default()
    };
    let err = mean_reprojection_error(&intr);
    assert!(err < 0.5, "mean error {err} px");
}

fn lens() -> impl Strategy<Value = CameraIntrinsics> {
    (
        -0.05..0.05f64,
        -0.01..0.01f64,
        -1e-3..1e-3f64,
        -1e-4..1e-4f64,
    )
        .prop_map(|(k1, k2, k3, k4)| CameraIntrinsics {
            k: [k1, k2, k3, k4],
            ..CameraIntrinsics::default()
        })
}

proptest! {
    #[test]
    fn angle_inversion_round_trips(intr in lens(), theta in 0.0..1.2f64, phi in -std::f64::consts::PI..std::f64::consts::PI) {
        let r = intr.fx * intr.distort_angle(theta);
        let pixel = [intr.px + r * phi.cos(), intr.py + r * phi.sin()];
        let ray = unproject_fisheye(pixel, &intr).unwrap();
        let back = project_fisheye(ray, &intr).unwrap();
        let err = (back[0] - pixel[0]).hypot(back[1] - pixel[1]);
        prop_assert!(err < 1e-6, "error {} px", err);
    }
}
