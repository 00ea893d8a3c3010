use proptest::prelude::*;
use surrogate_core::geom::Vec3;
use surrogate_core::image::Image;
use surrogate_core::mesh::{normalize, TriangleMesh};
use surrogate_core::render::{
    camera_positions, pose_to_view, project, render, render_views, CameraPose, Lighting, RenderConfig, Scene,
};
use surrogate_core::shapes;

const SIDE: usize = 64;

fn config() -> RenderConfig {
    RenderConfig {
        resolution: SIDE,
        ..RenderConfig::default()
    }
}

fn pose(lat: f64, lon: f64) -> CameraPose {
    CameraPose { lat, lon, radius: 3.0 }
}

fn draw(mesh: &TriangleMesh, camera: CameraPose) -> Image {
    let scene = Scene {
        mesh,
        lighting: Lighting::default(),
        camera,
    };
    render(&scene, &config()).unwrap()
}

/// Camera at (3, 0, 0) looking down -X: screen right is +Y, screen up is +Z.
fn oracle_project(p: Vec3) -> (f64, f64) {
    let f = 1.0 / 15f64.to_radians().tan();
    let depth = 3.0 - p.x;
    let n = SIDE as f64;
    ((p.y * f / depth + 1.0) * n / 2.0, (1.0 - p.z * f / depth) * n / 2.0)
}

/// Distance of `p` from the nearest edge of triangle `t`, negative outside.
fn signed_inside(t: [(f64, f64); 3], p: (f64, f64)) -> f64 {
    let area = (t[1].0 - t[0].0) * (t[2].1 - t[0].1) - (t[1].1 - t[0].1) * (t[2].0 - t[0].0);
    let s = area.signum();
    (0..3)
        .map(|i| {
            let (a, b) = (t[i], t[(i + 1) % 3]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            s * cross / ((b.0 - a.0).hypot(b.1 - a.1))
        })
        .fold(f64::INFINITY, f64::min)
}

fn shade_oracle(n: Vec3) -> u8 {
    let l1 = Vec3::new(1.0, 1.0, 1.0) * (1.0 / 3f64.sqrt());
    let d = 0.1 + 0.45 * n.dot(l1).max(0.0) + 0.45 * n.dot(-l1).max(0.0);
    (d.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[test]
fn triangle_lands_where_hand_projection_puts_it() {
    let tri = [
        Vec3::new(0.4, -0.2, -0.2),
        Vec3::new(-0.2, 0.4, -0.2),
        Vec3::new(-0.2, -0.2, 0.4),
    ];
    let view = pose_to_view(&pose(0.0, 0.0));
    for v in tri {
        let (x, y, z) = project(&view, &config(), v).unwrap();
        let (ox, oy) = oracle_project(v);
        assert!((x - ox).abs() < 1e-9 && (y - oy).abs() < 1e-9, "{v:?}");
        assert!((z - (3.0 - v.x)).abs() < 1e-12);
    }

    let n = Vec3::new(1.0, 1.0, 1.0) * (1.0 / 3f64.sqrt());
    let lit = shade_oracle(n);
    assert_eq!(lit, 140);
    let img = draw(&TriangleMesh::new(vec![tri]), pose(0.0, 0.0));
    let screen = tri.map(oracle_project);
    let mut covered = 0;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let d = signed_inside(screen, (x as f64 + 0.5, y as f64 + 0.5));
            let px = img.get(x, y)[0];
            if d > 1e-6 {
                assert_eq!(px, lit, "inside pixel ({x}, {y})");
                covered += 1;
            } else if d < -1e-6 {
                assert_eq!(px, 128, "outside pixel ({x}, {y})");
            }
        }
    }
    assert!(covered > 50);
    assert!(lit > 128);
}

#[test]
fn nearer_triangle_wins_in_either_order() {
    let near_n = Vec3::new(1.0, 1.0, 1.0) * (1.0 / 3f64.sqrt());
    let far_n = Vec3::X;
    let at = |x: f64| [Vec3::new(x, -0.3, -0.3), Vec3::new(x, 0.3, -0.3), Vec3::new(x, 0.0, 0.3)];
    let (near, far) = (at(2.0), at(1.0));
    for order in [[near, far], [far, near]] {
        let mut mesh = TriangleMesh::new(order.to_vec());
        mesh.normals = Some(if order[0] == near { vec![near_n, far_n] } else { vec![far_n, near_n] });
        let img = draw(&mesh, pose(0.0, 0.0));
        let (cx, cy) = (SIDE / 2, SIDE / 2);
        assert_eq!(img.get(cx, cy)[0], shade_oracle(near_n));
        let screen = near.map(oracle_project);
        for y in 0..SIDE {
            for x in 0..SIDE {
                if signed_inside(screen, (x as f64 + 0.5, y as f64 + 0.5)) > 1e-6 {
                    assert_eq!(img.get(x, y)[0], shade_oracle(near_n));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn farther_triangle_never_shows_through(
        d_near in 0.5f64..1.5,
        gap in 0.05f64..1.0,
        pts in proptest::array::uniform6(-0.4f64..0.4),
        near_first in any::<bool>(),
    ) {
        let tri = |x: f64| [
            Vec3::new(x, pts[0], pts[1]),
            Vec3::new(x, pts[2], pts[3]),
            Vec3::new(x, pts[4], pts[5]),
        ];
        let near = tri(3.0 - d_near);
        let far = tri(3.0 - d_near - gap);
        let near_n = Vec3::new(1.0, 1.0, 1.0) * (1.0 / 3f64.sqrt());
        let far_n = Vec3::X;
        let mut mesh = TriangleMesh::new(if near_first { vec![near, far] } else { vec![far, near] });
        mesh.normals = Some(if near_first { vec![near_n, far_n] } else { vec![far_n, near_n] });
        let img = draw(&mesh, pose(0.0, 0.0));
        let screen = near.map(oracle_project);
        for y in 0..SIDE {
            for x in 0..SIDE {
                if signed_inside(screen, (x as f64 + 0.5, y as f64 + 0.5)) > 1e-6 {
                    prop_assert_ne!(img.get(x, y)[0], shade_oracle(far_n));
                }
            }
        }
    }
}

#[test]
fn symmetric_cone_looks_the_same_from_every_quarter_turn() {
    let cone = normalize(&shapes::cone(0.5, 1.0, 32)).unwrap();
    for lat in [-60.0, -30.0, 0.0, 30.0, 60.0] {
        let reference = draw(&cone, pose(lat, 0.0));
        assert!(reference.pixels.iter().any(|&p| p != 128));
        for lon in [90.0, 180.0, 270.0] {
            assert!(draw(&cone, pose(lat, lon)) == reference, "lat {lat} lon {lon}");
        }
    }
}

#[test]
fn pole_views_ignore_longitude() {
    let bracket = normalize(&shapes::l_bracket()).unwrap();
    for lat in [-90.0, 90.0] {
        let reference = draw(&bracket, pose(lat, 0.0));
        for lon in [30.0, 60.0, 90.0, 300.0] {
            assert!(draw(&bracket, pose(lat, lon)) == reference);
        }
    }
}

#[test]
fn rendering_is_bit_identical_across_thread_counts() {
    let torus = normalize(&shapes::torus(0.35, 0.15, 12, 32)).unwrap();
    let cfg = RenderConfig {
        resolution: 48,
        step: 90,
        ..RenderConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (threads, dir) in [1, 4].into_iter().zip(&dirs) {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| render_views(&torus, &cfg, dir.path())).unwrap();
    }
    let poses = camera_positions(90, 3.0).unwrap();
    for p in poses {
        let a = std::fs::read(dirs[0].path().join(p.file_name())).unwrap();
        let b = std::fs::read(dirs[1].path().join(p.file_name())).unwrap();
        assert_eq!(a, b, "{}", p.file_name());
    }
}

#[test]
fn render_views_writes_one_png_per_pose_in_order() {
    let cube = normalize(&shapes::cube()).unwrap();
    for (step, expected) in [(60, 24), (120, 6)] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RenderConfig {
            resolution: 16,
            step,
            ..RenderConfig::default()
        };
        let paths = render_views(&cube, &cfg, dir.path()).unwrap();
        assert_eq!(paths.len(), expected);
        let names: Vec<String> = camera_positions(step, 3.0).unwrap().iter().map(|p| p.file_name()).collect();
        let got: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(got, names);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), expected);
    }
}
