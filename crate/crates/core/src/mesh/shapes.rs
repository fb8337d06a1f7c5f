//! Procedural test solids. All closed shapes are watertight with outward
//! orientation (positive signed volume).

use super::TriangleMesh;
use crate::geom::{vec3, RigidTransform, Vec3};
use std::collections::HashMap;

pub fn box_mesh(center: Vec3, half: Vec3) -> TriangleMesh {
    let (c, h) = (center, half);
    let vertices = vec![
        vec3(c.x - h.x, c.y - h.y, c.z - h.z),
        vec3(c.x + h.x, c.y - h.y, c.z - h.z),
        vec3(c.x + h.x, c.y + h.y, c.z - h.z),
        vec3(c.x - h.x, c.y + h.y, c.z - h.z),
        vec3(c.x - h.x, c.y - h.y, c.z + h.z),
        vec3(c.x + h.x, c.y - h.y, c.z + h.z),
        vec3(c.x + h.x, c.y + h.y, c.z + h.z),
        vec3(c.x - h.x, c.y + h.y, c.z + h.z),
    ];
    let triangles = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [3, 7, 6],
        [3, 6, 2],
        [0, 4, 7],
        [0, 7, 3],
        [1, 2, 6],
        [1, 6, 5],
    ];
    TriangleMesh::new(vertices, triangles)
}

/// Right triangular prism: cross-section legs along +x and +z, extruded in y.
pub fn wedge_mesh(center: Vec3, length: f64, height: f64, width: f64) -> TriangleMesh {
    let (l, h, w) = (length, height, width);
    let a = vec3(-l / 2.0, 0.0, -h / 2.0);
    let b = vec3(l / 2.0, 0.0, -h / 2.0);
    let cc = vec3(-l / 2.0, 0.0, h / 2.0);
    let dy = vec3(0.0, w / 2.0, 0.0);
    let vertices: Vec<Vec3> = vec![
        a - dy + center,
        b - dy + center,
        cc - dy + center,
        a + dy + center,
        b + dy + center,
        cc + dy + center,
    ];
    let triangles = vec![
        [0, 1, 2], // front y-
        [3, 5, 4], // back y+
        [0, 4, 1],
        [0, 3, 4], // bottom z-
        [0, 2, 5],
        [0, 5, 3], // left x-
        [1, 4, 5],
        [1, 5, 2], // hypotenuse
    ];
    TriangleMesh::new(vertices, triangles)
}

pub fn cylinder_mesh(center: Vec3, radius: f64, height: f64, segments: usize) -> TriangleMesh {
    assert!(segments >= 3);
    let n = segments as u32;
    let mut vertices = Vec::with_capacity(2 * segments + 2);
    for ring in 0..2 {
        let z = if ring == 0 { -height / 2.0 } else { height / 2.0 };
        for i in 0..segments {
            let th = std::f64::consts::TAU * i as f64 / segments as f64;
            vertices.push(center + vec3(radius * th.cos(), radius * th.sin(), z));
        }
    }
    let bottom_c = vertices.len() as u32;
    vertices.push(center + vec3(0.0, 0.0, -height / 2.0));
    let top_c = bottom_c + 1;
    vertices.push(center + vec3(0.0, 0.0, height / 2.0));

    let mut triangles = Vec::with_capacity(4 * segments);
    for i in 0..n {
        let j = (i + 1) % n;
        let (b0, b1, t0, t1) = (i, j, n + i, n + j);
        triangles.push([b0, b1, t1]);
        triangles.push([b0, t1, t0]);
        triangles.push([bottom_c, b1, b0]);
        triangles.push([top_c, t0, t1]);
    }
    TriangleMesh::new(vertices, triangles)
}

pub fn pyramid_mesh(center: Vec3, base_half: f64, height: f64) -> TriangleMesh {
    let a = base_half;
    let z0 = -height / 2.0;
    let vertices = vec![
        center + vec3(-a, -a, z0),
        center + vec3(a, -a, z0),
        center + vec3(a, a, z0),
        center + vec3(-a, a, z0),
        center + vec3(0.0, 0.0, height / 2.0),
    ];
    let triangles = vec![
        [0, 2, 1],
        [0, 3, 2],
        [0, 1, 4],
        [1, 2, 4],
        [2, 3, 4],
        [3, 0, 4],
    ];
    TriangleMesh::new(vertices, triangles)
}

pub fn torus_mesh(center: Vec3, major: f64, minor: f64, nu: usize, nv: usize) -> TriangleMesh {
    assert!(nu >= 3 && nv >= 3);
    let mut vertices = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let th = std::f64::consts::TAU * i as f64 / nu as f64;
        for j in 0..nv {
            let ph = std::f64::consts::TAU * j as f64 / nv as f64;
            let ring = major + minor * ph.cos();
            vertices.push(center + vec3(ring * th.cos(), ring * th.sin(), minor * ph.sin()));
        }
    }
    let idx = |i: usize, j: usize| (i % nu * nv + j % nv) as u32;
    let mut triangles = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriangleMesh::new(vertices, triangles)
}

/// Icosahedron subdivided `subdivisions` times and projected to the sphere.
/// Face count is 20 * 4^subdivisions (1280 at 3).
pub fn icosphere(radius: f64, subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        vec3(-1.0, t, 0.0),
        vec3(1.0, t, 0.0),
        vec3(-1.0, -t, 0.0),
        vec3(1.0, -t, 0.0),
        vec3(0.0, -1.0, t),
        vec3(0.0, 1.0, t),
        vec3(0.0, -1.0, -t),
        vec3(0.0, 1.0, -t),
        vec3(t, 0.0, -1.0),
        vec3(t, 0.0, 1.0),
        vec3(-t, 0.0, -1.0),
        vec3(-t, 0.0, 1.0),
    ]
    .iter()
    .map(|v| v.normalized() * radius)
    .collect();
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |i: u32, j: u32, vertices: &mut Vec<Vec3>| -> u32 {
            let key = (i.min(j), i.max(j));
            *midpoint.entry(key).or_insert_with(|| {
                let m = (vertices[i as usize] + vertices[j as usize]) * 0.5;
                vertices.push(m.normalized() * radius);
                (vertices.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for &[a, b, c] in &triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        triangles = next;
    }
    TriangleMesh::new(vertices, triangles)
}

/// Open z = 0 square, oriented +z. Deliberately not watertight.
pub fn plane_quad(half: f64) -> TriangleMesh {
    TriangleMesh::new(
        vec![
            vec3(-half, -half, 0.0),
            vec3(half, -half, 0.0),
            vec3(half, half, 0.0),
            vec3(-half, half, 0.0),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
}

pub fn transformed(mesh: &TriangleMesh, scale: f64, pose: &RigidTransform) -> TriangleMesh {
    let vertices = mesh
        .vertices
        .iter()
        .map(|&v| pose.apply(v * scale).expect("valid pose"))
        .collect();
    TriangleMesh::new(vertices, mesh.triangles.clone())
}
