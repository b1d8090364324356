//! Pinhole camera, depth unprojection and point-splat reprojection.
//!
//! Camera optical frame: +x right, +y down, +z forward. Pixel `(u, v)` has its
//! center at image coordinate `(u, v)`, so the principal ray passes through
//! pixel `(cx, cy)`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::trajcore::Pose;

pub type Rigid3 = Isometry3<f64>;

pub const DEFAULT_D_MAX: f64 = 50.0;
pub const DEFAULT_SPLAT_PX: usize = 2;
pub const HOLE_COLOR: [f32; 3] = [0.5, 0.5, 0.5];

/// Camera mounting relative to the robot center (robot frame: +x forward, +y left, +z up).
/// Positive pitch tilts the optical axis down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsic {
    pub translation: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Extrinsic {
    pub const IDENTITY: Extrinsic = Extrinsic {
        translation: [0.0; 3],
        yaw: 0.0,
        pitch: 0.0,
        roll: 0.0,
    };

    /// robot <- camera-optical transform.
    pub fn robot_from_camera(&self) -> Rigid3 {
        // Columns: optical x (right) -> -y, optical y (down) -> -z, optical z -> +x.
        let axes = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let mount = Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw);
        let rot = mount * Rotation3::from_matrix_unchecked(axes);
        let [tx, ty, tz] = self.translation;
        Isometry3::from_parts(
            Translation3::new(tx, ty, tz),
            UnitQuaternion::from_rotation_matrix(&rot),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsic: Extrinsic,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsic: Extrinsic,
    ) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && cx >= 0.0
            && cx < width as f64
            && cy >= 0.0
            && cy < height as f64;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy} for {width}x{height}"
            )));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        })
    }

    /// Square image with the principal point at the center and a forward-looking
    /// camera `height_m` above ground, pitched down by `pitch` radians.
    pub fn forward_facing(size: usize, hfov: f64, height_m: f64, pitch: f64) -> Self {
        let f = size as f64 / 2.0 / (hfov / 2.0).tan();
        let c = (size as f64 - 1.0) / 2.0;
        CameraModel {
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            width: size,
            height: size,
            extrinsic: Extrinsic {
                translation: [0.2, 0.0, height_m],
                yaw: 0.0,
                pitch,
                roll: 0.0,
            },
        }
    }

    /// `[fx, fy, cx, cy, width, height, tx, ty, tz, yaw, pitch, roll, 0, 0, 0, 0]`.
    pub fn feature_vector(&self) -> [f64; 16] {
        let e = &self.extrinsic;
        [
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width as f64,
            self.height as f64,
            e.translation[0],
            e.translation[1],
            e.translation[2],
            e.yaw,
            e.pitch,
            e.roll,
            0.0,
            0.0,
            0.0,
            0.0,
        ]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame point for pixel `(u, v)` at depth `d`.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        [d * (u - self.cx) / self.fx, d * (v - self.cy) / self.fy, d]
    }

    /// Image coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] <= 1e-9 {
            return None;
        }
        Some((
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ))
    }
}

/// world <- robot transform for a planar pose (robot on the ground plane).
pub fn pose_to_rigid(pose: &Pose) -> Rigid3 {
    Isometry3::from_parts(
        Translation3::new(pose.x, pose.y, 0.0),
        UnitQuaternion::from_euler_angles(0.0, 0.0, pose.psi),
    )
}

/// camera <- world transform for a robot at `view_pose` carrying a camera mounted at `extrinsic`.
pub fn compose_rigid(view_pose: &Pose, extrinsic: &Extrinsic) -> Rigid3 {
    (pose_to_rigid(view_pose) * extrinsic.robot_from_camera()).inverse()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth has {} values for {width}x{height}",
                values.len()
            )));
        }
        Ok(DepthFrame {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, d: f64) -> Self {
        DepthFrame {
            width,
            height,
            values: vec![d; width * height],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn is_valid(d: f64, d_max: f64) -> bool {
        d.is_finite() && d > 0.0 && d <= d_max
    }

    pub fn valid_count(&self, d_max: f64) -> usize {
        self.values.iter().filter(|&&d| Self::is_valid(d, d_max)).count()
    }

    /// Writes the `MDPT1` format: magic, ASCII `width height`, newline, then
    /// row-major little-endian f32 meters.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = format!("MDPT1\n{} {}\n", self.width, self.height).into_bytes();
        buf.reserve(self.values.len() * 4);
        for &d in &self.values {
            buf.extend_from_slice(&(d as f32).to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = String::new();
        r.read_line(&mut magic).map_err(|e| Error::io(path, e))?;
        if magic.trim() != "MDPT1" {
            return Err(Error::format(&origin, "missing MDPT1 magic"));
        }
        let mut dims = String::new();
        r.read_line(&mut dims).map_err(|e| Error::io(path, e))?;
        let mut it = dims.split_whitespace().map(|t| t.parse::<usize>());
        let (w, h) = match (it.next(), it.next()) {
            (Some(Ok(w)), Some(Ok(h))) => (w, h),
            _ => return Err(Error::format(&origin, format!("bad dimensions `{}`", dims.trim()))),
        };
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        if raw.len() != w * h * 4 {
            return Err(Error::format(
                &origin,
                format!("expected {} bytes of depth, found {}", w * h * 4, raw.len()),
            ));
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        DepthFrame::new(w, h, values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl RgbFrame {
    pub fn filled(width: usize, height: usize, c: [f32; 3]) -> Self {
        RgbFrame {
            width,
            height,
            data: vec![c; width * height],
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "rgb has {} pixels for {width}x{height}",
                data.len()
            )));
        }
        Ok(RgbFrame {
            width,
            height,
            data,
        })
    }

    pub fn at(&self, u: usize, v: usize) -> [f32; 3] {
        self.data[v * self.width + u]
    }

    /// Writes binary PPM (P6), 8 bits per channel.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.reserve(self.data.len() * 3);
        for px in &self.data {
            for &c in px {
                buf.push(quantize(c));
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(&origin, "truncated PPM header"));
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if tokens[0] != "P6" {
            return Err(Error::format(&origin, "not a binary PPM (P6)"));
        }
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|e| Error::format(&origin, format!("bad header value `{t}`: {e}")))
        };
        let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(Error::format(&origin, "only 8-bit PPM is supported"));
        }
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() != w * h * 3 {
            return Err(Error::format(
                &origin,
                format!("expected {} pixel bytes, found {}", w * h * 3, body.len()),
            ));
        }
        let data = body
            .chunks_exact(3)
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect();
        RgbFrame::new(w, h, data)
    }
}

fn quantize(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColoredPoint {
    pub xyz: [f64; 3],
    pub rgb: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColoredPointCloud {
    pub points: Vec<ColoredPoint>,
    pub frame_id: String,
}

impl ColoredPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `iso` to every point and relabels the frame.
    pub fn transformed(&self, iso: &Rigid3, frame_id: impl Into<String>) -> ColoredPointCloud {
        ColoredPointCloud {
            points: self
                .points
                .iter()
                .map(|p| {
                    let q = iso * Point3::new(p.xyz[0], p.xyz[1], p.xyz[2]);
                    ColoredPoint {
                        xyz: [q.x, q.y, q.z],
                        rgb: p.rgb,
                    }
                })
                .collect(),
            frame_id: frame_id.into(),
        }
    }
}

fn check_dims(depth: &DepthFrame, rgb: &RgbFrame, cam: &CameraModel) -> Result<()> {
    if depth.width != cam.width
        || depth.height != cam.height
        || rgb.width != cam.width
        || rgb.height != cam.height
    {
        return Err(Error::DimensionMismatch(format!(
            "depth {}x{}, rgb {}x{}, camera {}x{}",
            depth.width, depth.height, rgb.width, rgb.height, cam.width, cam.height
        )));
    }
    Ok(())
}

/// Colored cloud in the robot frame from every valid depth pixel.
pub fn unproject(depth: &DepthFrame, rgb: &RgbFrame, cam: &CameraModel) -> Result<ColoredPointCloud> {
    unproject_clipped(depth, rgb, cam, DEFAULT_D_MAX)
}

pub fn unproject_clipped(
    depth: &DepthFrame,
    rgb: &RgbFrame,
    cam: &CameraModel,
    d_max: f64,
) -> Result<ColoredPointCloud> {
    check_dims(depth, rgb, cam)?;
    let robot_from_cam = cam.extrinsic.robot_from_camera();
    let mut points = Vec::with_capacity(depth.values.len());
    for v in 0..cam.height {
        for u in 0..cam.width {
            let i = v * cam.width + u;
            let d = depth.values[i];
            if !DepthFrame::is_valid(d, d_max) {
                continue;
            }
            let [x, y, z] = cam.back_project(u as f64, v as f64, d);
            let q = robot_from_cam * Point3::new(x, y, z);
            points.push(ColoredPoint {
                xyz: [q.x, q.y, q.z],
                rgb: rgb.data[i],
            });
        }
    }
    Ok(ColoredPointCloud {
        points,
        frame_id: "robot".to_string(),
    })
}

/// Result of a splat render: colors with holes filled, the coverage mask and
/// the winning depth per covered pixel (infinity elsewhere).
#[derive(Clone, Debug)]
pub struct SplatImage {
    pub rgb: RgbFrame,
    pub coverage: Vec<bool>,
    pub depth: Vec<f64>,
}

impl SplatImage {
    pub fn coverage_fraction(&self) -> f64 {
        self.coverage.iter().filter(|&&c| c).count() as f64 / self.coverage.len().max(1) as f64
    }
}

#[derive(Clone, Copy)]
struct Hit {
    z: f64,
    rgb: [f32; 3],
}

fn closer(a: &Hit, b: &Option<Hit>) -> bool {
    match b {
        None => true,
        Some(b) => match a.z.total_cmp(&b.z) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            // equal depth: order by color so the result never depends on point order
            std::cmp::Ordering::Equal => {
                (a.rgb[0], a.rgb[1], a.rgb[2])
                    .partial_cmp(&(b.rgb[0], b.rgb[1], b.rgb[2]))
                    .is_some_and(|o| o.is_lt())
            }
        },
    }
}

/// Renders a cloud (given in the frame `view_pose` lives in) into the camera
/// carried by a robot at `view_pose`.
///
/// Each point covers a `splat_px` x `splat_px` square of pixels. The pixel that
/// contains the projected point takes precedence over the square's fringe, and
/// within each class the nearest point wins. Uncovered pixels get [`HOLE_COLOR`].
pub fn splat_render(
    cloud: &ColoredPointCloud,
    cam: &CameraModel,
    view_pose: &Pose,
    splat_px: usize,
) -> SplatImage {
    let (w, h) = (cam.width, cam.height);
    let cam_from_world = compose_rigid(view_pose, &cam.extrinsic);
    let mut center: Vec<Option<Hit>> = vec![None; w * h];
    let mut fringe: Vec<Option<Hit>> = vec![None; w * h];
    let s = splat_px.max(1) as i64;
    let half = (s - 1) as f64 / 2.0;
    for p in &cloud.points {
        let q = cam_from_world * Point3::new(p.xyz[0], p.xyz[1], p.xyz[2]);
        let Some((u, v)) = cam.project([q.x, q.y, q.z]) else {
            continue;
        };
        if !u.is_finite() || !v.is_finite() {
            continue;
        }
        let hit = Hit { z: q.z, rgb: p.rgb };
        let (cu, cv) = (u.round() as i64, v.round() as i64);
        let (u0, v0) = ((u - half).round() as i64, (v - half).round() as i64);
        for py in v0..v0 + s {
            if py < 0 || py >= h as i64 {
                continue;
            }
            for px in u0..u0 + s {
                if px < 0 || px >= w as i64 {
                    continue;
                }
                let i = py as usize * w + px as usize;
                let buf = if px == cu && py == cv {
                    &mut center
                } else {
                    &mut fringe
                };
                if closer(&hit, &buf[i]) {
                    buf[i] = Some(hit);
                }
            }
        }
    }
    let mut data = Vec::with_capacity(w * h);
    let mut coverage = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for i in 0..w * h {
        match center[i].or(fringe[i]) {
            Some(hit) => {
                data.push(hit.rgb);
                coverage.push(true);
                depth.push(hit.z);
            }
            None => {
                data.push(HOLE_COLOR);
                coverage.push(false);
                depth.push(f64::INFINITY);
            }
        }
    }
    SplatImage {
        rgb: RgbFrame {
            width: w,
            height: h,
            data,
        },
        coverage,
        depth,
    }
}

/// Unit direction helper used by renderers: camera ray through pixel `(u, v)`
/// expressed in world coordinates, scaled so its camera-z component is 1.
pub fn pixel_ray_world(cam: &CameraModel, world_from_cam: &Rigid3, u: f64, v: f64) -> Vector3<f64> {
    let d = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    world_from_cam.rotation * d
}
