//! COLMAP text-format bundles: cameras.txt, images.txt, points3D.txt plus the
//! referenced images, read into a [`SceneBundle`] and written back out.
//!
//! COLMAP stores world→camera rotations; poses are inverted to camera→world
//! on ingest and back on write.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::scene::{project_point, CameraIntrinsics, CameraPose, PixelCoord, View};

use super::ppm::{read_ppm_file, write_ppm_file};
use super::{malformed, IoError};

/// One 2D sighting of a sparse point.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Index into `SceneBundle::views`.
    pub view: usize,
    pub pixel: PixelCoord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundlePoint {
    pub pos: Vector3<f64>,
    pub rgb: [f64; 3],
    pub error: f64,
    pub track: Vec<Observation>,
}

/// A posed image set with its sparse points, ready for hierarchy building.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub views: Vec<View>,
    /// Image file names, aligned with `views`.
    pub names: Vec<String>,
    pub points: Vec<BundlePoint>,
    /// World axis treated as up (gravity-opposed); y after alignment.
    pub up_axis: usize,
}

fn quat_to_rotation(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
        .to_rotation_matrix()
        .into_inner()
}

/// Rotation matrix to quaternion with a deterministic sign (w ≥ 0).
fn rotation_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let q = q.quaternion();
    let mut out = [q.w, q.i, q.j, q.k];
    let flip = match out.iter().find(|c| **c != 0.0) {
        Some(c) => *c < 0.0,
        None => false,
    };
    if flip {
        for c in out.iter_mut() {
            *c = -*c;
        }
    }
    out
}

struct Tokens<'a> {
    toks: std::str::SplitWhitespace<'a>,
    path: &'a str,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(s: &'a str, path: &'a str, line: usize) -> Self {
        Self {
            toks: s.split_whitespace(),
            path,
            line,
        }
    }

    fn next(&mut self) -> Result<&'a str, IoError> {
        self.toks
            .next()
            .ok_or_else(|| malformed(self.path, self.line, "missing field"))
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, IoError> {
        let tok = self.next()?;
        tok.parse().map_err(|_| {
            malformed(
                self.path,
                self.line,
                format!("bad {}: {:?}", what, tok),
            )
        })
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_cameras(text: &str, path: &str) -> Result<BTreeMap<u32, CameraIntrinsics>, IoError> {
    let mut cams = BTreeMap::new();
    for (line, l) in data_lines(text) {
        let mut t = Tokens::new(l, path, line);
        let id: u32 = t.parse("camera id")?;
        let model = t.next()?.to_string();
        let width: usize = t.parse("width")?;
        let height: usize = t.parse("height")?;
        let k = match model.as_str() {
            "PINHOLE" => {
                let fx: f64 = t.parse("fx")?;
                let fy: f64 = t.parse("fy")?;
                let cx: f64 = t.parse("cx")?;
                let cy: f64 = t.parse("cy")?;
                CameraIntrinsics::new(fx, fy, cx, cy, width, height)
            }
            "SIMPLE_PINHOLE" => {
                let f: f64 = t.parse("f")?;
                let cx: f64 = t.parse("cx")?;
                let cy: f64 = t.parse("cy")?;
                CameraIntrinsics::new(f, f, cx, cy, width, height)
            }
            _ => return Err(IoError::UnsupportedCameraModel { id, model }),
        };
        cams.insert(id, k);
    }
    Ok(cams)
}

#[derive(Debug)]
struct RawImage {
    id: u32,
    pose: CameraPose,
    camera_id: u32,
    name: String,
    /// (pixel, point3d id), -1 for unmatched.
    obs: Vec<(PixelCoord, i64)>,
}

fn parse_images(text: &str, path: &str) -> Result<Vec<RawImage>, IoError> {
    let mut out: Vec<RawImage> = Vec::new();
    let mut expect_obs = false;
    // Images come as header/observations line pairs; the observations line
    // may be empty, so blank lines are skipped only between records.
    for (line, l) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if !expect_obs {
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let mut t = Tokens::new(l, path, line);
            let id: u32 = t.parse("image id")?;
            let qw: f64 = t.parse("qw")?;
            let qx: f64 = t.parse("qx")?;
            let qy: f64 = t.parse("qy")?;
            let qz: f64 = t.parse("qz")?;
            let tx: f64 = t.parse("tx")?;
            let ty: f64 = t.parse("ty")?;
            let tz: f64 = t.parse("tz")?;
            let camera_id: u32 = t.parse("camera id")?;
            let name = t.next()?.to_string();
            let r_wc = quat_to_rotation(qw, qx, qy, qz);
            let t_wc = Vector3::new(tx, ty, tz);
            let rot = r_wc.transpose();
            let pose = CameraPose::new(rot, -(rot * t_wc));
            out.push(RawImage {
                id,
                pose,
                camera_id,
                name,
                obs: Vec::new(),
            });
            expect_obs = true;
        } else {
            let img = out.last_mut().expect("observation line follows an image");
            let mut t = Tokens::new(l, path, line);
            let n_fields = l.split_whitespace().count();
            if n_fields % 3 != 0 {
                return Err(malformed(
                    path,
                    line,
                    "observations come in x y point3d_id triplets",
                ));
            }
            for _ in 0..n_fields / 3 {
                let x: f64 = t.parse("observation x")?;
                let y: f64 = t.parse("observation y")?;
                let pid: i64 = t.parse("point3d id")?;
                img.obs.push((PixelCoord::new(x, y), pid));
            }
            expect_obs = false;
        }
    }
    // A header at end of file simply has no observations.
    Ok(out)
}

#[derive(Debug)]
struct RawPoint {
    pos: Vector3<f64>,
    rgb: [f64; 3],
    error: f64,
    /// (image id, point2d index)
    track: Vec<(u32, usize)>,
    line: usize,
}

fn parse_points(text: &str, path: &str) -> Result<Vec<RawPoint>, IoError> {
    let mut out = Vec::new();
    for (line, l) in data_lines(text) {
        let mut t = Tokens::new(l, path, line);
        let _id: i64 = t.parse("point id")?;
        let x: f64 = t.parse("x")?;
        let y: f64 = t.parse("y")?;
        let z: f64 = t.parse("z")?;
        let r: u16 = t.parse("r")?;
        let g: u16 = t.parse("g")?;
        let b: u16 = t.parse("b")?;
        if r > 255 || g > 255 || b > 255 {
            return Err(malformed(path, line, "rgb out of byte range"));
        }
        let error: f64 = t.parse("error")?;
        let rest: Vec<&str> = l.split_whitespace().skip(8).collect();
        if rest.len() % 2 != 0 {
            return Err(malformed(
                path,
                line,
                "track comes in image_id point2d_idx pairs",
            ));
        }
        let mut track = Vec::with_capacity(rest.len() / 2);
        for pair in rest.chunks(2) {
            let img: u32 = pair[0]
                .parse()
                .map_err(|_| malformed(path, line, format!("bad image id {:?}", pair[0])))?;
            let idx: usize = pair[1]
                .parse()
                .map_err(|_| malformed(path, line, format!("bad point2d index {:?}", pair[1])))?;
            track.push((img, idx));
        }
        out.push(RawPoint {
            pos: Vector3::new(x, y, z),
            rgb: [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0],
            error,
            track,
            line,
        });
    }
    Ok(out)
}

/// Read a COLMAP text bundle from `dir` (cameras.txt, images.txt,
/// points3D.txt) and the referenced images (`dir/NAME` or
/// `dir/images/NAME`). Views come back sorted by image id; points with
/// fewer than two sightings are dropped.
pub fn parse_colmap(dir: &Path) -> Result<SceneBundle, IoError> {
    let read = |name: &str| -> Result<String, IoError> {
        std::fs::read_to_string(dir.join(name)).map_err(IoError::from)
    };
    let cameras = parse_cameras(&read("cameras.txt")?, "cameras.txt")?;
    let mut raw_images = parse_images(&read("images.txt")?, "images.txt")?;
    let raw_points = parse_points(&read("points3D.txt")?, "points3D.txt")?;

    raw_images.sort_by_key(|i| i.id);
    let mut views = Vec::with_capacity(raw_images.len());
    let mut names = Vec::with_capacity(raw_images.len());
    let mut id_to_index: BTreeMap<u32, usize> = BTreeMap::new();
    for (index, ri) in raw_images.iter().enumerate() {
        let k = *cameras
            .get(&ri.camera_id)
            .ok_or(IoError::UnknownCamera(ri.id, ri.camera_id))?;
        let img_path = [dir.join(&ri.name), dir.join("images").join(&ri.name)]
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| IoError::ImageMissing(ri.name.clone()))?;
        let image = read_ppm_file(&img_path)?;
        if image.width != k.width || image.height != k.height {
            return Err(IoError::ImageSizeMismatch {
                name: ri.name.clone(),
                got_w: image.width,
                got_h: image.height,
                want_w: k.width,
                want_h: k.height,
            });
        }
        views.push(
            View::new(ri.id, k, ri.pose.clone(), image, index)
                .expect("dimensions already checked"),
        );
        names.push(ri.name.clone());
        id_to_index.insert(ri.id, index);
    }

    let mut points = Vec::new();
    for rp in raw_points {
        if rp.track.len() < 2 {
            continue;
        }
        let mut track = Vec::with_capacity(rp.track.len());
        for &(img_id, p2d) in &rp.track {
            let &view = id_to_index.get(&img_id).ok_or_else(|| {
                malformed(
                    "points3D.txt",
                    rp.line,
                    format!("track references unknown image {}", img_id),
                )
            })?;
            let obs = raw_images[view].obs.get(p2d).ok_or_else(|| {
                malformed(
                    "points3D.txt",
                    rp.line,
                    format!("track index {} out of range for image {}", p2d, img_id),
                )
            })?;
            track.push(Observation {
                view,
                pixel: obs.0,
            });
        }
        points.push(BundlePoint {
            pos: rp.pos,
            rgb: rp.rgb,
            error: rp.error,
            track,
        });
    }

    Ok(SceneBundle {
        views,
        names,
        points,
        up_axis: 1,
    })
}

/// Write the bundle back out as a COLMAP text directory plus PPM images.
/// One PINHOLE camera per view; point ids are assigned sequentially.
pub fn write_colmap(bundle: &SceneBundle, dir: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    let mut cameras = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS\n");
    let mut images = String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n");
    // Per-view observation lists referenced by the points file.
    let mut obs: Vec<Vec<(PixelCoord, i64)>> = vec![Vec::new(); bundle.views.len()];
    let mut tracks: Vec<Vec<(u32, usize)>> = vec![Vec::new(); bundle.points.len()];
    for (pid, p) in bundle.points.iter().enumerate() {
        for o in &p.track {
            tracks[pid].push((bundle.views[o.view].id, obs[o.view].len()));
            obs[o.view].push((o.pixel, pid as i64 + 1));
        }
    }
    for (i, v) in bundle.views.iter().enumerate() {
        let k = &v.intrinsics;
        writeln!(
            cameras,
            "{} PINHOLE {} {} {} {} {} {}",
            i + 1,
            k.width,
            k.height,
            k.fx,
            k.fy,
            k.cx,
            k.cy
        )
        .unwrap();
        let r_wc = v.pose.rotation.transpose();
        let t_wc = -(r_wc * v.pose.translation);
        let q = rotation_to_quat(&r_wc);
        writeln!(
            images,
            "{} {} {} {} {} {} {} {} {} {}",
            v.id, q[0], q[1], q[2], q[3], t_wc.x, t_wc.y, t_wc.z, i + 1, bundle.names[i]
        )
        .unwrap();
        let mut line = String::new();
        for (px, pid) in &obs[i] {
            if !line.is_empty() {
                line.push(' ');
            }
            write!(line, "{} {} {}", px.u, px.v, pid).unwrap();
        }
        images.push_str(&line);
        images.push('\n');
        write_ppm_file(&v.image, &dir.join(&bundle.names[i]))?;
    }
    let mut points = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK\n");
    for (pid, p) in bundle.points.iter().enumerate() {
        write!(
            points,
            "{} {} {} {} {} {} {} {}",
            pid + 1,
            p.pos.x,
            p.pos.y,
            p.pos.z,
            (p.rgb[0] * 255.0).round() as u8,
            (p.rgb[1] * 255.0).round() as u8,
            (p.rgb[2] * 255.0).round() as u8,
            p.error
        )
        .unwrap();
        for &(img, idx) in &tracks[pid] {
            write!(points, " {} {}", img, idx).unwrap();
        }
        points.push('\n');
    }
    std::fs::write(dir.join("cameras.txt"), cameras)?;
    std::fs::write(dir.join("images.txt"), images)?;
    std::fs::write(dir.join("points3D.txt"), points)?;
    Ok(())
}

/// Rotation taking unit vector `from` onto unit vector `to`.
fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let axis = from.cross(to);
    let s2 = axis.norm_squared();
    let c = from.dot(to);
    if s2 < 1e-24 {
        if c > 0.0 {
            return Matrix3::identity();
        }
        // Antiparallel: half turn around any axis orthogonal to `to`.
        let helper = if to.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let axis = to.cross(&helper).normalize();
        return Rotation3::from_axis_angle(
            &nalgebra::Unit::new_unchecked(axis),
            std::f64::consts::PI,
        )
        .into_inner();
    }
    let k = Matrix3::new(
        0.0, -axis.z, axis.y,
        axis.z, 0.0, -axis.x,
        -axis.y, axis.x, 0.0,
    );
    Matrix3::identity() + k + k * k * ((1.0 - c) / s2)
}

/// Rigidly rotate the whole bundle so the dominant camera down direction
/// (mean of the views' image-down axes) maps to world −y.
pub fn manhattan_align(bundle: &SceneBundle) -> Result<SceneBundle, IoError> {
    if bundle.views.len() < 3 {
        return Err(IoError::TooFewCameras {
            have: bundle.views.len(),
            need: 3,
        });
    }
    let mut mean_down = Vector3::zeros();
    for v in &bundle.views {
        mean_down += v.pose.rotation * Vector3::y();
    }
    mean_down /= bundle.views.len() as f64;
    let norm = mean_down.norm();
    if norm < 0.1 {
        return Err(IoError::DegenerateOrientation { norm });
    }
    let align = rotation_between(&(mean_down / norm), &Vector3::new(0.0, -1.0, 0.0));
    let mut out = bundle.clone();
    for v in out.views.iter_mut() {
        v.pose = CameraPose::new(align * v.pose.rotation, align * v.pose.translation);
    }
    for p in out.points.iter_mut() {
        p.pos = align * p.pos;
    }
    out.up_axis = 1;
    Ok(out)
}

/// Median reprojection error in pixels over every track observation.
pub fn median_reprojection_error(bundle: &SceneBundle) -> Option<f64> {
    let mut errs = Vec::new();
    for p in &bundle.points {
        for o in &p.track {
            let v = &bundle.views[o.view];
            if let Ok((px, _)) = project_point(&v.intrinsics, &v.pose, &p.pos) {
                let du = px.u - o.pixel.u;
                let dv = px.v - o.pixel.v;
                errs.push((du * du + dv * dv).sqrt());
            }
        }
    }
    if errs.is_empty() {
        return None;
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(errs[errs.len() / 2])
}
