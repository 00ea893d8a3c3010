//! Procedural meshes used as synthetic corpora: boxes, box unions and
//! surfaces of revolution, all wound counter-clockwise seen from outside.

use std::f64::consts::TAU;

use crate::geom::{sin_cos_deg, Vec3};
use crate::mesh::TriangleMesh;

fn v(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x, y, z)
}

fn push_quad(out: &mut Vec<[Vec3; 3]>, a: Vec3, b: Vec3, c: Vec3, d: Vec3) {
    out.push([a, b, c]);
    out.push([a, c, d]);
}

fn box_triangles(out: &mut Vec<[Vec3; 3]>, lo: [f64; 3], hi: [f64; 3]) {
    let [x0, y0, z0] = lo;
    let [x1, y1, z1] = hi;
    push_quad(out, v(x0, y0, z0), v(x0, y1, z0), v(x1, y1, z0), v(x1, y0, z0)); // -z
    push_quad(out, v(x0, y0, z1), v(x1, y0, z1), v(x1, y1, z1), v(x0, y1, z1)); // +z
    push_quad(out, v(x0, y0, z0), v(x1, y0, z0), v(x1, y0, z1), v(x0, y0, z1)); // -y
    push_quad(out, v(x0, y1, z0), v(x0, y1, z1), v(x1, y1, z1), v(x1, y1, z0)); // +y
    push_quad(out, v(x0, y0, z0), v(x0, y0, z1), v(x0, y1, z1), v(x0, y1, z0)); // -x
    push_quad(out, v(x1, y0, z0), v(x1, y1, z0), v(x1, y1, z1), v(x1, y0, z1)); // +x
}

/// Union of axis-aligned boxes as a triangle soup (interior faces kept).
pub fn boxes(parts: &[([f64; 3], [f64; 3])]) -> TriangleMesh {
    let mut tris = Vec::with_capacity(12 * parts.len());
    for (lo, hi) in parts {
        box_triangles(&mut tris, *lo, *hi);
    }
    TriangleMesh::new(tris)
}

/// Surface of revolution about +Z. `profile` is a list of `(radius, z)`
/// points traversed counter-clockwise in the (r, z) half-plane; closed
/// profiles (torus) repeat the first point at the end.
pub fn lathe(profile: &[(f64, f64)], segments: usize) -> TriangleMesh {
    let ring = |r: f64, z: f64, j: usize| {
        let (s, c) = if segments % 4 == 0 {
            sin_cos_deg(360.0 * j as f64 / segments as f64)
        } else {
            (TAU * j as f64 / segments as f64).sin_cos()
        };
        v(r * c, r * s, z)
    };
    let mut tris = Vec::new();
    for w in profile.windows(2) {
        let ((r0, z0), (r1, z1)) = (w[0], w[1]);
        for j in 0..segments {
            let k = (j + 1) % segments;
            let (a, b) = (ring(r0, z0, j), ring(r0, z0, k));
            let (c, d) = (ring(r1, z1, k), ring(r1, z1, j));
            if r0 > 0.0 {
                tris.push([a, b, c]);
            }
            if r1 > 0.0 {
                tris.push([a, c, d]);
            }
        }
    }
    TriangleMesh::new(tris)
}

pub fn cube() -> TriangleMesh {
    boxes(&[([0.0; 3], [1.0; 3])])
}

pub fn uv_sphere(rings: usize, segments: usize) -> TriangleMesh {
    let profile: Vec<(f64, f64)> = (0..=rings)
        .map(|i| {
            let (s, c) = sin_cos_deg(-90.0 + 180.0 * i as f64 / rings as f64);
            (c.max(0.0), s)
        })
        .collect();
    lathe(&profile, segments)
}

pub fn cone(radius: f64, height: f64, segments: usize) -> TriangleMesh {
    lathe(&[(0.0, 0.0), (radius, 0.0), (0.0, height)], segments)
}

pub fn cylinder(radius: f64, height: f64, segments: usize) -> TriangleMesh {
    lathe(
        &[(0.0, 0.0), (radius, 0.0), (radius, height), (0.0, height)],
        segments,
    )
}

pub fn torus(major: f64, minor: f64, rings: usize, segments: usize) -> TriangleMesh {
    let profile: Vec<(f64, f64)> = (0..=rings)
        .map(|i| {
            let (s, c) = (TAU * (i % rings) as f64 / rings as f64).sin_cos();
            (major + minor * c, minor * s)
        })
        .collect();
    lathe(&profile, segments)
}

pub fn l_bracket() -> TriangleMesh {
    boxes(&[
        ([0.0, 0.0, 0.0], [1.0, 0.4, 0.2]),
        ([0.0, 0.0, 0.2], [0.2, 0.4, 1.0]),
    ])
}

/// The `index`-th shape of an open-ended family of geometrically distinct
/// procedural models. The first five are cube, sphere, cone, torus and
/// L-bracket.
pub fn catalog_entry(index: usize) -> (String, TriangleMesh) {
    let fixed: Option<(&str, TriangleMesh)> = match index {
        0 => Some(("cube", cube())),
        1 => Some(("sphere", uv_sphere(12, 24))),
        2 => Some(("cone", cone(0.5, 1.0, 32))),
        3 => Some(("torus", torus(0.35, 0.15, 12, 32))),
        4 => Some(("l_bracket", l_bracket())),
        5 => Some(("cylinder", cylinder(0.3, 1.0, 32))),
        6 => Some(("pyramid", cone(0.6, 0.8, 4))),
        7 => Some(("hex_prism", cylinder(0.5, 0.4, 6))),
        8 => Some(("t_bracket", boxes(&[
            ([0.0, 0.0, 0.8], [1.0, 0.3, 1.0]),
            ([0.4, 0.0, 0.0], [0.6, 0.3, 0.8]),
        ]))),
        9 => Some(("plus", boxes(&[
            ([0.0, 0.4, 0.4], [1.0, 0.6, 0.6]),
            ([0.4, 0.0, 0.4], [0.6, 1.0, 0.6]),
            ([0.4, 0.4, 0.0], [0.6, 0.6, 1.0]),
        ]))),
        10 => Some(("stairs", boxes(&[
            ([0.0, 0.0, 0.0], [1.0, 0.5, 0.33]),
            ([0.33, 0.0, 0.33], [1.0, 0.5, 0.66]),
            ([0.66, 0.0, 0.66], [1.0, 0.5, 1.0]),
        ]))),
        11 => Some(("frame", boxes(&[
            ([0.0, 0.0, 0.0], [1.0, 0.15, 0.15]),
            ([0.0, 0.0, 0.85], [1.0, 0.15, 1.0]),
            ([0.0, 0.0, 0.15], [0.15, 0.15, 0.85]),
            ([0.85, 0.0, 0.15], [1.0, 0.15, 0.85]),
        ]))),
        12 => Some(("plate", boxes(&[([0.0, 0.0, 0.0], [1.0, 0.7, 0.08])]))),
        13 => Some(("rod", cylinder(0.08, 1.0, 16))),
        14 => Some(("hourglass", lathe(
            &[(0.0, 0.0), (0.5, 0.0), (0.08, 0.5), (0.5, 1.0), (0.0, 1.0)],
            32,
        ))),
        15 => Some(("mushroom", lathe(
            &[(0.0, 0.0), (0.12, 0.0), (0.12, 0.6), (0.5, 0.6), (0.3, 0.85), (0.0, 0.95)],
            32,
        ))),
        16 => Some(("ring", torus(0.4, 0.06, 10, 40))),
        17 => Some(("tri_prism", cylinder(0.55, 0.5, 3))),
        18 => Some(("u_channel", boxes(&[
            ([0.0, 0.0, 0.0], [1.0, 0.6, 0.12]),
            ([0.0, 0.0, 0.12], [0.12, 0.6, 0.7]),
            ([0.88, 0.0, 0.12], [1.0, 0.6, 0.7]),
        ]))),
        19 => Some(("bowl", lathe(
            &[(0.0, 0.0), (0.2, 0.0), (0.5, 0.45), (0.45, 0.45), (0.17, 0.06), (0.0, 0.06)],
            32,
        ))),
        20 => Some(("spindle", lathe(&[(0.0, 0.0), (0.25, 0.5), (0.0, 1.0)], 24))),
        21 => Some(("step_shaft", lathe(
            &[(0.0, 0.0), (0.4, 0.0), (0.4, 0.3), (0.25, 0.3), (0.25, 0.7), (0.1, 0.7), (0.1, 1.0), (0.0, 1.0)],
            32,
        ))),
        22 => Some(("tee_pipe", {
            let mut m = cylinder(0.15, 1.0, 16);
            let cross = cylinder(0.15, 0.8, 16)
                .map_vertices(|p| Vec3::new(p.z - 0.4, p.y, p.x + 0.5));
            m.triangles.extend(cross.triangles);
            m
        })),
        23 => Some(("wedge", lathe(&[(0.0, 0.0), (0.7, 0.0), (0.0, 0.25)], 5))),
        24 => Some(("flange", lathe(
            &[(0.0, 0.0), (0.5, 0.0), (0.5, 0.1), (0.2, 0.1), (0.2, 0.6), (0.0, 0.6)],
            8,
        ))),
        _ => None,
    };
    if let Some((name, mesh)) = fixed {
        return (name.to_string(), mesh);
    }
    // Beyond the hand-picked set: boxes with varying aspect and a notch.
    let k = index - 25;
    let a = 0.2 + 0.8 * ((k * 7 % 11) as f64 / 10.0);
    let b = 0.2 + 0.8 * ((k * 3 % 7) as f64 / 6.0);
    let notch = 0.1 + 0.5 * ((k % 5) as f64 / 4.0);
    (
        format!("block_{k:03}"),
        boxes(&[
            ([0.0, 0.0, 0.0], [1.0, a, b]),
            ([0.0, 0.0, b], [notch, a, b + notch]),
        ]),
    )
}

pub fn catalog(count: usize) -> Vec<(String, TriangleMesh)> {
    (0..count).map(catalog_entry).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{bounding_box, compute_normals};

    #[test]
    fn box_normals_point_outward() {
        let m = compute_normals(&cube());
        let center = Vec3::new(0.5, 0.5, 0.5);
        for (t, n) in m.triangles.iter().zip(m.normals.unwrap()) {
            let centroid = (t[0] + t[1] + t[2]) / 3.0;
            assert!((centroid - center).dot(n) > 0.0);
        }
    }

    #[test]
    fn lathe_normals_point_outward_and_skip_axis() {
        for mesh in [uv_sphere(8, 16), cone(0.5, 1.0, 16), cylinder(0.3, 1.0, 12)] {
            let m = compute_normals(&mesh);
            assert!(m.degenerate.is_empty());
            let bb = bounding_box(&m).unwrap();
            let center = bb.center();
            for (t, n) in m.triangles.iter().zip(m.normals.unwrap()) {
                let centroid = (t[0] + t[1] + t[2]) / 3.0;
                assert!((centroid - center).dot(n) > 0.0);
            }
        }
    }

    #[test]
    fn catalog_names_are_unique() {
        let names: std::collections::BTreeSet<_> =
            catalog(40).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 40);
    }
}
