//! Camera-sphere pose enumeration and a deterministic software rasterizer.
//!
//! Every model is rendered from a grid of latitude/longitude viewpoints on a
//! sphere around the origin. Longitude is applied by turning the model
//! about +Z under a camera on the lon = 0 meridian, which gives the same
//! projected geometry as orbiting the camera but keeps the two lamps fixed
//! relative to the viewer's meridian. At the poles longitude is ignored, so
//! all pole views coincide. Shading is flat
//! Lambertian: `base · (ambient + Σ max(0, n·l)·intensity)`, with each lamp
//! treated as a directional light arriving from its position. Rasterization
//! samples pixel centers with a top-left fill rule and resolves visibility
//! with a 1/z depth buffer, so identical inputs give bit-identical images.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{sin_cos_deg, Vec3};
use crate::image::{quantize, Image, ImageError};
use crate::mesh::TriangleMesh;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("degree step {0} must divide 360 and be at most 180")]
    BadStep(u32),
    #[error("resolution {0} is below the 16 pixel minimum")]
    BadResolution(usize),
    #[error("camera radius {radius} does not clear the mesh bound {bound}")]
    DegenerateCamera { radius: f64, bound: f64 },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Degrees in [-90, 90].
    pub lat: f64,
    /// Degrees in [0, 360).
    pub lon: f64,
    pub radius: f64,
}

impl CameraPose {
    /// `{lat}_{lon}.png` with signed integer degrees.
    pub fn file_name(&self) -> String {
        format!("{}_{}.png", self.lat.round() as i64, self.lon.round() as i64)
    }
}

/// A step must tile the longitude circle. Latitudes start at the south pole
/// and stop at the last grid line not past +90, so 120° yields {-90, 30}.
pub fn check_step(step: u32) -> Result<(), RenderError> {
    if step == 0 || step > 180 || 360 % step != 0 {
        Err(RenderError::BadStep(step))
    } else {
        Ok(())
    }
}

/// Number of renders per artefact at a given degree step.
pub fn views_per_model(step: u32) -> Result<usize, RenderError> {
    check_step(step)?;
    Ok((180 / step as usize + 1) * (360 / step as usize))
}

/// Latitude-major grid of poses: lat in {-90, -90+step, ...} up to +90
/// crossed with lon in {0, step, ..., 360-step}. Poles are repeated for every
/// longitude.
pub fn camera_positions(step: u32, radius: f64) -> Result<Vec<CameraPose>, RenderError> {
    check_step(step)?;
    let lats = (0..=180 / step).map(|i| -90.0 + (i * step) as f64);
    Ok(lats
        .flat_map(|lat| {
            (0..360 / step).map(move |j| CameraPose {
                lat,
                lon: (j * step) as f64,
                radius,
            })
        })
        .collect())
}

/// Orthonormal camera frame looking at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub eye: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl ViewTransform {
    /// Camera-space coordinates `(x right, y up, z depth)`.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = p - self.eye;
        Vec3::new(d.dot(self.right), d.dot(self.up), d.dot(self.forward))
    }
}

pub fn pose_to_view(pose: &CameraPose) -> ViewTransform {
    let (slat, clat) = sin_cos_deg(pose.lat);
    let (slon, clon) = sin_cos_deg(pose.lon);
    let eye = Vec3::new(clat * clon, clat * slon, slat) * pose.radius;
    let forward = (-eye).normalized().unwrap_or(-Vec3::Z);
    let up_ref = if pose.lat.abs() == 90.0 { Vec3::X } else { Vec3::Z };
    let right = forward.cross(up_ref).normalized().unwrap_or(Vec3::X);
    let up = right.cross(forward);
    ViewTransform {
        eye,
        right,
        up,
        forward,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lamp {
    pub position: Vec3,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub lamps: [Lamp; 2],
    pub ambient: f64,
    /// Surface albedo in [0, 1].
    pub base_gray: f64,
}

impl Default for Lighting {
    /// Lamps at (4, 4, 4) and (-4.5, -4.5, -4.5) sharing 0.9 intensity,
    /// ambient 0.1, white surface.
    fn default() -> Self {
        Self {
            lamps: [
                Lamp {
                    position: Vec3::new(4.0, 4.0, 4.0),
                    intensity: 0.45,
                },
                Lamp {
                    position: Vec3::new(-4.5, -4.5, -4.5),
                    intensity: 0.45,
                },
            ],
            ambient: 0.1,
            base_gray: 1.0,
        }
    }
}

impl Lighting {
    /// Flat shade for a unit normal, in [0, 1].
    pub fn shade(&self, normal: Vec3) -> f64 {
        let direct: f64 = self
            .lamps
            .iter()
            .map(|lamp| {
                let l = lamp.position.normalized().unwrap_or(Vec3::Z);
                normal.dot(l).max(0.0) * lamp.intensity
            })
            .sum();
        (self.base_gray * (self.ambient + direct)).clamp(0.0, 1.0)
    }
}

pub struct Scene<'a> {
    pub mesh: &'a TriangleMesh,
    pub lighting: Lighting,
    pub camera: CameraPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub resolution: usize,
    pub step: u32,
    pub fov_y: f64,
    pub background: [u8; 3],
    pub camera_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: 540,
            step: 30,
            fov_y: 30.0,
            background: [128, 128, 128],
            camera_radius: 3.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        check_step(self.step)?;
        if self.resolution < 16 {
            return Err(RenderError::BadResolution(self.resolution));
        }
        Ok(())
    }
}

/// Screen-space position `(x, y)` in pixels (y down) and camera depth, or
/// `None` behind the camera.
pub fn project(view: &ViewTransform, config: &RenderConfig, p: Vec3) -> Option<(f64, f64, f64)> {
    let c = view.to_camera(p);
    if c.z <= 1e-9 {
        return None;
    }
    let focal = 1.0 / (config.fov_y.to_radians() * 0.5).tan();
    let size = config.resolution as f64;
    let sx = (c.x * focal / c.z + 1.0) * 0.5 * size;
    let sy = (1.0 - c.y * focal / c.z) * 0.5 * size;
    Some((sx, sy, c.z))
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// With positive-area ordering in y-down screen space, top edges run
/// horizontally rightwards and left edges run upwards.
fn is_top_left(a: (f64, f64), b: (f64, f64)) -> bool {
    let dx = b.0 - a.0;
    let dy = b.1 - a.1;
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

fn bound_radius(mesh: &TriangleMesh) -> f64 {
    mesh.triangles
        .iter()
        .flat_map(|t| t.iter())
        .map(|v| v.length())
        .fold(0.0, f64::max)
}

pub fn render(scene: &Scene<'_>, config: &RenderConfig) -> Result<Image, RenderError> {
    if config.resolution < 16 {
        return Err(RenderError::BadResolution(config.resolution));
    }
    let bound = bound_radius(scene.mesh);
    let radius = scene.camera.radius;
    if !(radius.is_finite() && radius > bound) {
        return Err(RenderError::DegenerateCamera { radius, bound });
    }
    let lon = if scene.camera.lat.abs() == 90.0 { 0.0 } else { scene.camera.lon };
    let view = pose_to_view(&CameraPose { lon: 0.0, ..scene.camera });
    let (sin, cos) = sin_cos_deg(-lon);
    let turn = |v: Vec3| Vec3::new(cos * v.x - sin * v.y, sin * v.x + cos * v.y, v.z);
    let size = config.resolution;
    let mut img = Image::filled(size, size, config.background);
    let mut depth = vec![0.0f64; size * size];

    for (i, tri) in scene.mesh.triangles.iter().enumerate() {
        let tri = tri.map(turn);
        let normal = match &scene.mesh.normals {
            Some(ns) => Some(turn(ns[i])),
            None => (tri[1] - tri[0]).cross(tri[2] - tri[0]).normalized(),
        };
        // Zero-area triangles are skipped.
        let Some(normal) = normal else { continue };
        let gray = quantize(scene.lighting.shade(normal) * 255.0);

        let mut pts = [(0.0, 0.0); 3];
        let mut inv_z = [0.0; 3];
        let mut visible = true;
        for (k, v) in tri.iter().enumerate() {
            match project(&view, config, *v) {
                Some((x, y, z)) => {
                    pts[k] = (x, y);
                    inv_z[k] = 1.0 / z;
                }
                None => visible = false,
            }
        }
        if !visible {
            continue;
        }
        let mut area = edge(pts[0], pts[1], pts[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            pts.swap(1, 2);
            inv_z.swap(1, 2);
            area = -area;
        }
        let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).floor().max(0.0) as usize;
        let y0 = (min_y - 0.5).floor().max(0.0) as usize;
        let x1 = ((max_x - 0.5).ceil().min(size as f64 - 1.0)).max(-1.0);
        let y1 = ((max_y - 0.5).ceil().min(size as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);

        let edges = [(1, 2), (2, 0), (0, 1)];
        let top_left = edges.map(|(a, b)| is_top_left(pts[a], pts[b]));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let mut w = [0.0; 3];
                let mut inside = true;
                for (k, &(a, b)) in edges.iter().enumerate() {
                    let e = edge(pts[a], pts[b], p);
                    if e < 0.0 || (e == 0.0 && !top_left[k]) {
                        inside = false;
                        break;
                    }
                    w[k] = e / area;
                }
                if !inside {
                    continue;
                }
                let z = w[0] * inv_z[0] + w[1] * inv_z[1] + w[2] * inv_z[2];
                let slot = py * size + px;
                if z > depth[slot] {
                    depth[slot] = z;
                    img.set(px, py, [gray; 3]);
                }
            }
        }
    }
    Ok(img)
}

/// Renders every pose of the configured step into `out_dir` as
/// `{lat}_{lon}.png`, returning paths in pose order.
pub fn render_views(
    mesh: &TriangleMesh,
    config: &RenderConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, RenderError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| RenderError::Io {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let poses = camera_positions(config.step, config.camera_radius)?;
    poses
        .par_iter()
        .map(|pose| {
            let scene = Scene {
                mesh,
                lighting: Lighting::default(),
                camera: *pose,
            };
            let img = render(&scene, config)?;
            let path = out_dir.join(pose.file_name());
            img.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

/// Per-model record written next to the renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderManifest {
    pub model_id: String,
    /// STL the renders were made from, when known.
    #[serde(default)]
    pub source_path: Option<PathBuf>,
    pub step: u32,
    pub resolution: usize,
    pub poses: Vec<CameraPose>,
    pub files: Vec<String>,
    pub render_seconds: f64,
}

pub const RENDER_MANIFEST: &str = "render.json";

/// Renders one model into `out_dir` and writes its [`RenderManifest`].
pub fn render_model(
    model_id: &str,
    source_path: Option<&Path>,
    mesh: &TriangleMesh,
    config: &RenderConfig,
    out_dir: &Path,
) -> Result<RenderManifest, RenderError> {
    let started = Instant::now();
    let paths = render_views(mesh, config, out_dir)?;
    let manifest = RenderManifest {
        model_id: model_id.to_string(),
        source_path: source_path.map(Path::to_path_buf),
        step: config.step,
        resolution: config.resolution,
        poses: camera_positions(config.step, config.camera_radius)?,
        files: paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
        render_seconds: started.elapsed().as_secs_f64(),
    };
    let path = out_dir.join(RENDER_MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| RenderError::Io {
        path,
        message: e.to_string(),
    })?;
    Ok(manifest)
}

/// The [`RenderManifest`] in `out_dir`, if present and readable.
pub fn read_manifest(out_dir: &Path) -> Option<RenderManifest> {
    let bytes = fs::read(out_dir.join(RENDER_MANIFEST)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// True when `out_dir` already holds a complete render set for `config`.
pub fn is_rendered(config: &RenderConfig, out_dir: &Path) -> bool {
    let Some(m) = read_manifest(out_dir) else {
        return false;
    };
    m.step == config.step
        && m.resolution == config.resolution
        && m.files.iter().all(|f| out_dir.join(f).is_file())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::normalize;
    use crate::shapes;

    fn config(resolution: usize, fov_y: f64) -> RenderConfig {
        RenderConfig {
            resolution,
            fov_y,
            ..RenderConfig::default()
        }
    }

    #[test]
    fn pose_counts() {
        assert_eq!(camera_positions(30, 3.0).unwrap().len(), 84);
        assert_eq!(camera_positions(90, 3.0).unwrap().len(), 12);
        assert_eq!(camera_positions(120, 3.0).unwrap().len(), 6);
        let p = camera_positions(180, 3.0).unwrap();
        let pairs: Vec<_> = p.iter().map(|c| (c.lat, c.lon)).collect();
        assert_eq!(pairs, vec![(-90.0, 0.0), (-90.0, 180.0), (90.0, 0.0), (90.0, 180.0)]);
        assert!(matches!(camera_positions(7, 3.0), Err(RenderError::BadStep(7))));
        assert!(matches!(camera_positions(0, 3.0), Err(RenderError::BadStep(0))));
        assert!(matches!(camera_positions(360, 3.0), Err(RenderError::BadStep(360))));
        assert!(matches!(camera_positions(25, 3.0), Err(RenderError::BadStep(25))));
        let lats: Vec<f64> = camera_positions(120, 3.0).unwrap().iter().map(|p| p.lat).collect();
        assert_eq!(lats, vec![-90.0, -90.0, -90.0, 30.0, 30.0, 30.0]);
    }

    #[test]
    fn view_examples() {
        let v = pose_to_view(&CameraPose { lat: 0.0, lon: 0.0, radius: 3.0 });
        assert_eq!(v.eye, Vec3::new(3.0, 0.0, 0.0));
        assert_eq!(v.forward, Vec3::new(-1.0, 0.0, 0.0));
        for lon in [0.0, 30.0, 200.0] {
            let v = pose_to_view(&CameraPose { lat: 90.0, lon, radius: 3.0 });
            assert_eq!(v.eye, Vec3::new(0.0, 0.0, 3.0));
            assert_eq!(v.up, Vec3::X);
        }
        let v = pose_to_view(&CameraPose { lat: 45.0, lon: 90.0, radius: 2.0 });
        let s2 = 2f64.sqrt();
        assert!((v.eye - Vec3::new(0.0, s2, s2)).length() < 1e-12);
    }

    #[test]
    fn frames_are_orthonormal() {
        for pose in camera_positions(30, 3.0).unwrap() {
            let v = pose_to_view(&pose);
            for (a, b) in [(v.right, v.up), (v.up, v.forward), (v.right, v.forward)] {
                assert!(a.dot(b).abs() < 1e-12);
            }
            for a in [v.right, v.up, v.forward] {
                assert!((a.length() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_mesh_leaves_background() {
        let mesh = normalize(&shapes::cube()).unwrap().map_vertices(|v| v * 1e-9);
        let scene = Scene {
            mesh: &mesh,
            lighting: Lighting::default(),
            camera: CameraPose { lat: 30.0, lon: 60.0, radius: 3.0 },
        };
        let img = render(&scene, &config(32, 30.0)).unwrap();
        assert_eq!(img, Image::filled(32, 32, [128; 3]));
    }

    #[test]
    fn camera_inside_bound_is_rejected() {
        let mesh = normalize(&shapes::cube()).unwrap();
        let scene = Scene {
            mesh: &mesh,
            lighting: Lighting::default(),
            camera: CameraPose { lat: 0.0, lon: 0.0, radius: 0.5 },
        };
        assert!(matches!(
            render(&scene, &config(32, 30.0)),
            Err(RenderError::DegenerateCamera { .. })
        ));
    }

    #[test]
    fn back_facing_triangle_is_ambient() {
        let l = Lighting::default();
        // Perpendicular to both lamp directions.
        let n = Vec3::new(1.0, -1.0, 0.0).normalized().unwrap();
        assert_eq!(l.shade(n), 0.1);
        assert!((l.shade(Vec3::new(1.0, 1.0, 1.0).normalized().unwrap()) - 0.55).abs() < 1e-12);
    }
}
