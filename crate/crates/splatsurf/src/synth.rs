//! Synthetic plane-plus-sphere scene with an exact renderer.
//!
//! The analytic images double as ground truth for end-to-end training checks
//! and the generated point samples seed the anchor hierarchy, so the whole
//! pipeline can run without external data.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::colmap::{BundlePoint, Observation, SceneBundle};
use crate::scene::{project_point, CameraIntrinsics, CameraPose, ImageBuffer, PixelCoord, View};

/// Half extent of the ground square at y = 0.
pub const PLANE_HALF: f64 = 3.0;
pub const SPHERE_CENTER: Vector3<f64> = Vector3::new(0.0, 0.8, 0.0);
pub const SPHERE_RADIUS: f64 = 0.8;
/// Sky color, also the training background.
pub const BACKGROUND: [f64; 3] = [0.55, 0.6, 0.65];

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    /// Surface samples emitted as the sparse point cloud.
    pub n_points: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_views: 8,
            test_views: 2,
            width: 64,
            height: 64,
            n_points: 4000,
            seed: 7,
        }
    }
}

/// A colored surface sample.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    pub pos: Vector3<f64>,
    pub rgb: [f64; 3],
}

pub struct SynthScene {
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub points: Vec<SurfacePoint>,
    pub background: Vector3<f64>,
}

fn plane_color(x: f64, z: f64) -> [f64; 3] {
    [
        0.55 + 0.14 * (0.9 * x).sin() * (0.7 * z).cos(),
        0.5 + 0.12 * (0.6 * x + 0.8 * z).sin(),
        0.45 + 0.1 * (0.5 * z).cos(),
    ]
}

fn sphere_color(p: &Vector3<f64>) -> [f64; 3] {
    let n = (p - SPHERE_CENTER) / SPHERE_RADIUS;
    [
        0.55 + 0.15 * n.x,
        0.5 + 0.15 * n.y,
        0.6 - 0.12 * n.z,
    ]
}

/// Nearest hit of `o + t·d` against the scene, as (t, rgb).
fn trace(o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    // Ground square.
    if d.y.abs() > 1e-12 {
        let t = -o.y / d.y;
        if t > 1e-9 {
            let x = o.x + t * d.x;
            let z = o.z + t * d.z;
            if x.abs() <= PLANE_HALF && z.abs() <= PLANE_HALF {
                best = Some((t, plane_color(x, z)));
            }
        }
    }
    // Sphere.
    let oc = o - SPHERE_CENTER;
    let a = d.dot(d);
    let b = 2.0 * oc.dot(d);
    let c = oc.dot(&oc) - SPHERE_RADIUS * SPHERE_RADIUS;
    let disc = b * b - 4.0 * a * c;
    if disc > 0.0 {
        let t = (-b - disc.sqrt()) / (2.0 * a);
        if t > 1e-9 && best.map_or(true, |(tb, _)| t < tb) {
            let p = o + d * t;
            best = Some((t, sphere_color(&p)));
        }
    }
    best
}

/// Distance from a point to the analytic surface (ground square or sphere
/// shell, whichever is nearer).
pub fn surface_distance(p: &Vector3<f64>) -> f64 {
    let clamped = Vector3::new(
        p.x.clamp(-PLANE_HALF, PLANE_HALF),
        0.0,
        p.z.clamp(-PLANE_HALF, PLANE_HALF),
    );
    let d_plane = (p - clamped).norm();
    let d_sphere = ((p - SPHERE_CENTER).norm() - SPHERE_RADIUS).abs();
    d_plane.min(d_sphere)
}

/// Camera at `eye` with +z through `target` and image-down roughly along
/// world -y.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> CameraPose {
    let f = (target - eye).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let x = f.cross(&up).normalize();
    let y = f.cross(&x);
    let rot = Matrix3::from_columns(&[x, y, f]);
    CameraPose::new(rot, eye)
}

/// Exact color image of the scene from a camera.
pub fn render_exact(k: &CameraIntrinsics, pose: &CameraPose) -> ImageBuffer {
    let mut img = ImageBuffer::zeros(k.width, k.height, 3);
    let o = pose.center();
    for y in 0..k.height {
        for x in 0..k.width {
            let d_cam = k.ray_dir(PixelCoord::new(x as f64, y as f64));
            let d = pose.rotation * d_cam;
            let rgb = trace(&o, &d).map_or(BACKGROUND, |(_, c)| c);
            for c in 0..3 {
                img.set(x, y, c, rgb[c]);
            }
        }
    }
    img
}

/// Exact ray-depth map (camera-space z) with a hit mask.
pub fn depth_exact(k: &CameraIntrinsics, pose: &CameraPose) -> (ImageBuffer, Vec<bool>) {
    let mut depth = ImageBuffer::zeros(k.width, k.height, 1);
    let mut valid = vec![false; k.width * k.height];
    let o = pose.center();
    for y in 0..k.height {
        for x in 0..k.width {
            let d_cam = k.ray_dir(PixelCoord::new(x as f64, y as f64));
            let d = pose.rotation * d_cam;
            if let Some((t, _)) = trace(&o, &d) {
                // ray_dir has unit camera z, so t is the camera-space depth.
                depth.set(x, y, 0, t);
                valid[y * k.width + x] = true;
            }
        }
    }
    (depth, valid)
}

fn ring_pose(i: usize, n: usize, phase: f64) -> CameraPose {
    let ang = (i as f64 + phase) / n as f64 * std::f64::consts::TAU;
    let eye = Vector3::new(3.6 * ang.cos(), 2.6, 3.6 * ang.sin());
    look_at(eye, Vector3::new(0.0, 0.4, 0.0))
}

/// Generate the full scene: a training ring, held-out views between the
/// training azimuths, and surface samples for the initial hierarchy.
pub fn synth_scene(cfg: &SynthConfig) -> SynthScene {
    let c = |n: usize| (n as f64 - 1.0) / 2.0;
    let k = CameraIntrinsics::new(
        70.0,
        70.0,
        c(cfg.width),
        c(cfg.height),
        cfg.width,
        cfg.height,
    );
    let train: Vec<View> = (0..cfg.train_views)
        .map(|i| {
            let pose = ring_pose(i, cfg.train_views, 0.0);
            let img = render_exact(&k, &pose);
            View::new(i as u32, k, pose, img, i).unwrap()
        })
        .collect();
    let test: Vec<View> = (0..cfg.test_views)
        .map(|j| {
            let pose = ring_pose(
                j * cfg.train_views / cfg.test_views.max(1),
                cfg.train_views,
                0.5,
            );
            let img = render_exact(&k, &pose);
            View::new(1000 + j as u32, k, pose, img, 0).unwrap()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sphere_area = 4.0 * std::f64::consts::PI * SPHERE_RADIUS * SPHERE_RADIUS;
    let plane_area = (2.0 * PLANE_HALF) * (2.0 * PLANE_HALF);
    let p_sphere = sphere_area / (sphere_area + plane_area);
    let mut points = Vec::with_capacity(cfg.n_points);
    while points.len() < cfg.n_points {
        if rng.gen::<f64>() < p_sphere {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() < 1e-6 || v.norm() > 1.0 {
                continue;
            }
            let pos = SPHERE_CENTER + v.normalize() * SPHERE_RADIUS;
            points.push(SurfacePoint { pos, rgb: sphere_color(&pos) });
        } else {
            let x = rng.gen_range(-PLANE_HALF..PLANE_HALF);
            let z = rng.gen_range(-PLANE_HALF..PLANE_HALF);
            points.push(SurfacePoint {
                pos: Vector3::new(x, 0.0, z),
                rgb: plane_color(x, z),
            });
        }
    }

    SynthScene {
        train,
        test,
        points,
        background: Vector3::new(BACKGROUND[0], BACKGROUND[1], BACKGROUND[2]),
    }
}

/// Bundle the scene in sparse-reconstruction form: every surface sample
/// that is unoccluded and in frame in at least two views becomes a tracked
/// point. Views are ordered by id, train ring first, held-out views after.
pub fn synth_bundle(scene: &SynthScene) -> SceneBundle {
    let mut views: Vec<View> = scene.train.iter().chain(&scene.test).cloned().collect();
    views.sort_by_key(|v| v.id);
    for (i, v) in views.iter_mut().enumerate() {
        v.embedding_id = i;
    }
    let names = views
        .iter()
        .map(|v| format!("view_{:04}.ppm", v.id))
        .collect();
    let mut points = Vec::new();
    for p in &scene.points {
        let mut track = Vec::new();
        for (vi, v) in views.iter().enumerate() {
            let Ok((px, _)) = project_point(&v.intrinsics, &v.pose, &p.pos) else {
                continue;
            };
            if !v.intrinsics.contains(px) {
                continue;
            }
            // The sample lies on the surface, so it is visible exactly when
            // the eye ray's first hit is the sample itself (t = 1 along
            // eye→p).
            let o = v.pose.center();
            match trace(&o, &(p.pos - o)) {
                Some((t, _)) if (t - 1.0).abs() < 1e-7 => {
                    track.push(Observation { view: vi, pixel: px })
                }
                _ => {}
            }
        }
        if track.len() >= 2 {
            points.push(BundlePoint {
                pos: p.pos,
                rgb: p.rgb,
                error: 0.0,
                track,
            });
        }
    }
    SceneBundle {
        views,
        names,
        points,
        up_axis: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rays_through_scene_hit_what_they_should() {
        // Straight down onto the plane.
        let hit = trace(&Vector3::new(2.0, 3.0, 1.0), &Vector3::new(0.0, -1.0, 0.0)).unwrap();
        assert_relative_eq!(hit.0, 3.0, epsilon = 1e-12);
        // Through the sphere center.
        let hit = trace(&Vector3::new(0.0, 0.8, -5.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(hit.0, 5.0 - SPHERE_RADIUS, epsilon = 1e-12);
        // Off the edge of everything.
        assert!(trace(&Vector3::new(10.0, 3.0, 10.0), &Vector3::new(0.0, -1.0, 0.0)).is_none());
    }

    #[test]
    fn surface_distance_is_zero_on_both_surfaces() {
        assert_relative_eq!(
            surface_distance(&Vector3::new(1.0, 0.0, -2.0)),
            0.0,
            epsilon = 1e-12
        );
        let on_sphere = SPHERE_CENTER + Vector3::new(0.0, SPHERE_RADIUS, 0.0);
        assert_relative_eq!(surface_distance(&on_sphere), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            surface_distance(&Vector3::new(PLANE_HALF + 1.0, 0.0, 0.0)),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn look_at_points_camera_forward_and_down() {
        let pose = look_at(Vector3::new(3.0, 2.0, 0.0), Vector3::new(0.0, 0.0, 0.0));
        let fwd = pose.rotation * Vector3::z();
        assert_relative_eq!(
            fwd.dot(&Vector3::new(-3.0, -2.0, 0.0).normalize()),
            1.0,
            epsilon = 1e-12
        );
        // Image-down has a negative world-y component.
        let down = pose.rotation * Vector3::y();
        assert!(down.y < -0.5);
        // Proper rotation.
        let r = pose.rotation;
        assert_relative_eq!((r.transpose() * r - Matrix3::identity()).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn depth_map_backprojects_onto_the_surface() {
        let cfg = SynthConfig { width: 32, height: 32, ..Default::default() };
        let c = 15.5;
        let k = CameraIntrinsics::new(35.0, 35.0, c, c, 32, 32);
        let pose = ring_pose(0, 8, 0.0);
        let (depth, valid) = depth_exact(&k, &pose);
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..32 {
                if !valid[y * 32 + x] {
                    continue;
                }
                let d_cam = k.ray_dir(PixelCoord::new(x as f64, y as f64));
                let p = pose.center() + pose.rotation * (d_cam * depth.get(x, y, 0));
                assert!(surface_distance(&p) < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 200, "only {} valid depth pixels", checked);
        let _ = cfg;
    }

    #[test]
    fn scene_views_and_points_are_consistent() {
        let cfg = SynthConfig { n_points: 500, ..Default::default() };
        let scene = synth_scene(&cfg);
        assert_eq!(scene.train.len(), 8);
        assert_eq!(scene.test.len(), 2);
        for p in &scene.points {
            assert!(surface_distance(&p.pos) < 1e-9);
            for c in p.rgb {
                assert!((0.0..=1.0).contains(&c));
            }
        }
        // Every training view sees some non-background pixels.
        for v in &scene.train {
            let bg = v
                .image
                .data
                .chunks(3)
                .filter(|c| {
                    (c[0] - BACKGROUND[0]).abs() < 1e-12
                        && (c[1] - BACKGROUND[1]).abs() < 1e-12
                })
                .count();
            assert!(bg < 64 * 64, "view {} is pure sky", v.id);
        }
    }

    #[test]
    fn bundle_tracks_are_multiview_and_reproject_exactly() {
        let cfg = SynthConfig {
            train_views: 6,
            test_views: 2,
            width: 48,
            height: 48,
            n_points: 600,
            seed: 3,
        };
        let scene = synth_scene(&cfg);
        let bundle = synth_bundle(&scene);
        assert_eq!(bundle.views.len(), 8);
        for (i, v) in bundle.views.iter().enumerate() {
            assert_eq!(v.embedding_id, i);
            if i > 0 {
                assert!(v.id > bundle.views[i - 1].id);
            }
        }
        assert_eq!(bundle.names.len(), 8);
        assert!(bundle.names[0].ends_with(".ppm"));
        // Plane corners fall outside the ring cameras' frustums, so well
        // under half the samples survive; a third keeps the hierarchy fed.
        assert!(
            bundle.points.len() > scene.points.len() / 3,
            "only {} of {} samples kept",
            bundle.points.len(),
            scene.points.len()
        );
        let on_sphere = |p: &Vector3<f64>| ((p - SPHERE_CENTER).norm() - SPHERE_RADIUS).abs() < 1e-9;
        assert!(bundle.points.iter().any(|p| on_sphere(&p.pos)));
        assert!(bundle.points.iter().any(|p| !on_sphere(&p.pos)));
        for p in &bundle.points {
            assert!(p.track.len() >= 2);
        }
        let med = crate::io::colmap::median_reprojection_error(&bundle).unwrap();
        assert!(med < 1e-9, "median reprojection {}", med);
    }

    #[test]
    fn occluded_samples_are_not_observed() {
        let cfg = SynthConfig {
            n_points: 10,
            ..Default::default()
        };
        let scene = synth_scene(&cfg);
        let eye = scene.train[0].pose.center();
        let u = (SPHERE_CENTER - eye).normalize();
        let front = SPHERE_CENTER - u * SPHERE_RADIUS;
        let back = SPHERE_CENTER + u * SPHERE_RADIUS;
        let probe = SynthScene {
            train: scene.train.clone(),
            test: Vec::new(),
            points: vec![
                SurfacePoint { pos: front, rgb: [0.5; 3] },
                SurfacePoint { pos: back, rgb: [0.5; 3] },
            ],
            background: scene.background,
        };
        let bundle = synth_bundle(&probe);
        let sees = |pos: Vector3<f64>, view: usize| {
            bundle
                .points
                .iter()
                .find(|p| (p.pos - pos).norm() < 1e-12)
                .is_some_and(|p| p.track.iter().any(|o| o.view == view))
        };
        assert!(sees(front, 0), "near side of the sphere seen by its camera");
        assert!(!sees(back, 0), "far side must be hidden from camera 0");
    }

    #[test]
    fn bundle_survives_a_colmap_roundtrip() {
        let cfg = SynthConfig {
            train_views: 4,
            test_views: 1,
            width: 32,
            height: 32,
            n_points: 200,
            seed: 5,
        };
        let bundle = synth_bundle(&synth_scene(&cfg));
        let dir = tempfile::tempdir().unwrap();
        crate::io::colmap::write_colmap(&bundle, dir.path()).unwrap();
        let back = crate::io::colmap::parse_colmap(dir.path()).unwrap();
        assert_eq!(back.names, bundle.names);
        assert_eq!(back.points.len(), bundle.points.len());
        for (a, b) in bundle.views.iter().zip(&back.views) {
            assert_eq!(a.id, b.id);
            // Images pass through 8-bit pixmaps once.
            let worst = a
                .image
                .data
                .iter()
                .zip(&b.image.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-12, "quantization error {}", worst);
        }
        let med = crate::io::colmap::median_reprojection_error(&back).unwrap();
        assert!(med < 1e-9, "median reprojection {}", med);
    }
}
