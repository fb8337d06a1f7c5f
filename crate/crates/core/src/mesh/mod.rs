//! Triangle meshes: ASCII load/save, cleanup, normalization into the grid
//! domain, and area-proportional surface sampling.

pub mod shapes;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::{rng_from, RngExt};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

/// Uniform scale about `offset`: `apply(v) = (v - offset) * scale`.
#[derive(Clone, Copy, Debug)]
pub struct Similarity {
    pub scale: f64,
    pub offset: Vec3,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        scale: 1.0,
        offset: Vec3::ZERO,
    };

    pub fn apply(&self, v: Vec3) -> Vec3 {
        (v - self.offset) * self.scale
    }

    pub fn inverse_apply(&self, v: Vec3) -> Vec3 {
        v / self.scale + self.offset
    }
}

#[derive(Debug)]
pub struct LoadedMesh {
    pub mesh: TriangleMesh,
    /// Lines that were neither `v` nor `f` records.
    pub skipped_lines: usize,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> TriangleMesh {
        let m = TriangleMesh {
            vertices,
            triangles,
        };
        debug_assert!(m
            .triangles
            .iter()
            .all(|t| t.iter().all(|&i| (i as usize) < m.vertices.len())));
        m
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vec3; 3] {
        let [i, j, k] = self.triangles[t];
        [
            self.vertices[i as usize],
            self.vertices[j as usize],
            self.vertices[k as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn triangle_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle_vertices(t);
        (b - a).cross(c - a).normalized()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounds(&self) -> Result<(Vec3, Vec3)> {
        if self.vertices.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for &v in &self.vertices[1..] {
            lo = lo.min_by_component(v);
            hi = hi.max_by_component(v);
        }
        Ok((lo, hi))
    }

    pub fn max_edge_length(&self) -> f64 {
        let mut m = 0.0f64;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle_vertices(t);
            m = m.max((b - a).norm()).max((c - b).norm()).max((a - c).norm());
        }
        m
    }

    /// Signed volume by the divergence theorem; positive for outward-oriented
    /// watertight meshes.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle_vertices(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    /// Every undirected edge used by exactly two triangles, once per direction.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(u32, u32), (i32, i32)> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (i, j) = (t[e], t[(e + 1) % 3]);
                let entry = edges.entry((i.min(j), i.max(j))).or_insert((0, 0));
                if i < j {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }
        edges.values().all(|&(f, r)| f == 1 && r == 1)
    }

    /// Merges vertices closer than `tol` and drops degenerate triangles.
    /// Returns (merged vertices, dropped triangles).
    pub fn cleanup(&mut self, tol: f64) -> (usize, usize) {
        let mut key_to_new: HashMap<(i64, i64, i64), u32> = HashMap::new();
        let mut remap = vec![0u32; self.vertices.len()];
        let mut new_vertices = Vec::with_capacity(self.vertices.len());
        for (i, &v) in self.vertices.iter().enumerate() {
            let key = (
                (v.x / tol).round() as i64,
                (v.y / tol).round() as i64,
                (v.z / tol).round() as i64,
            );
            let idx = *key_to_new.entry(key).or_insert_with(|| {
                new_vertices.push(v);
                (new_vertices.len() - 1) as u32
            });
            remap[i] = idx;
        }
        let merged = self.vertices.len() - new_vertices.len();

        let scale = {
            let mut lo = Vec3::ZERO;
            let mut hi = Vec3::ZERO;
            if let Some(&v0) = new_vertices.first() {
                lo = v0;
                hi = v0;
            }
            for &v in &new_vertices {
                lo = lo.min_by_component(v);
                hi = hi.max_by_component(v);
            }
            (hi - lo).max_component().max(1e-30)
        };
        let area_floor = 1e-12 * scale * scale;

        let before = self.triangles.len();
        self.vertices = new_vertices;
        self.triangles = self
            .triangles
            .iter()
            .map(|t| [remap[t[0] as usize], remap[t[1] as usize], remap[t[2] as usize]])
            .filter(|t| {
                if t[0] == t[1] || t[1] == t[2] || t[2] == t[0] {
                    return false;
                }
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                0.5 * (b - a).cross(c - a).norm() > area_floor
            })
            .collect();
        (merged, before - self.triangles.len())
    }

    /// Centers the bounding box at the origin and scales the longest side to
    /// 1.9, leaving a margin inside the [-1, 1]^3 domain. Returns the applied
    /// similarity.
    pub fn normalize(&mut self) -> Result<Similarity> {
        if self.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let (lo, hi) = self.bounds()?;
        let extent = (hi - lo).max_component();
        if extent <= 0.0 {
            return Err(Error::EmptyMesh);
        }
        let sim = Similarity {
            scale: 1.9 / extent,
            offset: (lo + hi) * 0.5,
        };
        for v in &mut self.vertices {
            *v = sim.apply(*v);
        }
        Ok(sim)
    }

    /// `n` points drawn area-proportionally across triangles, uniform within
    /// each triangle, deterministic per seed.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<Vec<Vec3>> {
        if self.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut cum = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += self.triangle_area(t);
            cum.push(total);
        }
        let mut rng = rng_from(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.uniform() * total;
            let t = cum.partition_point(|&c| c < target).min(cum.len() - 1);
            let [a, b, c] = self.triangle_vertices(t);
            let s = rng.uniform().sqrt();
            let r = rng.uniform();
            out.push(a * (1.0 - s) + b * (s * (1.0 - r)) + c * (s * r));
        }
        Ok(out)
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<LoadedMesh> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut skipped = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let mut parts = line.split_whitespace();
        let Some(head) = parts.next() else { continue };
        let parse_err = |msg: &str| Error::Parse {
            line: lineno,
            msg: msg.to_string(),
        };
        match head {
            "v" => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    *c = parts
                        .next()
                        .ok_or_else(|| parse_err("vertex needs 3 coordinates"))?
                        .parse::<f64>()
                        .map_err(|_| parse_err("bad vertex coordinate"))?;
                    if !c.is_finite() {
                        return Err(parse_err("non-finite vertex coordinate"));
                    }
                }
                if parts.next().is_some() {
                    return Err(parse_err("vertex has extra fields"));
                }
                vertices.push(Vec3::from_array(coords));
            }
            "f" => {
                let mut idx = [0u32; 3];
                for i in &mut idx {
                    let raw: u64 = parts
                        .next()
                        .ok_or_else(|| parse_err("face needs 3 indices"))?
                        .parse()
                        .map_err(|_| parse_err("bad face index"))?;
                    if raw == 0 {
                        return Err(parse_err("face index 0 (indices are 1-based)"));
                    }
                    if raw > vertices.len() as u64 {
                        return Err(parse_err("face index out of range"));
                    }
                    *i = (raw - 1) as u32;
                }
                if parts.next().is_some() {
                    return Err(parse_err("only triangles are supported"));
                }
                triangles.push(idx);
            }
            _ => skipped += 1,
        }
    }

    let mut mesh = TriangleMesh::new(vertices, triangles);
    mesh.cleanup(1e-9);
    Ok(LoadedMesh {
        mesh,
        skipped_lines: skipped,
    })
}

pub fn save_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for v in &mesh.vertices {
        writeln!(w, "v {:.8e} {:.8e} {:.8e}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vec3;
    use approx::assert_relative_eq;

    #[test]
    fn cube_roundtrip_counts() {
        let cube = shapes::box_mesh(Vec3::ZERO, vec3(1.0, 1.0, 1.0));
        assert_eq!(cube.vertices.len(), 8);
        assert_eq!(cube.triangles.len(), 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.mesh");
        save_mesh(&cube, &path).unwrap();
        let loaded = load_mesh(&path).unwrap();
        assert_eq!(loaded.skipped_lines, 0);
        assert_eq!(loaded.mesh.vertices.len(), 8);
        assert_eq!(loaded.mesh.triangles.len(), 12);
        assert_eq!(loaded.mesh.triangles, cube.triangles);
        for (a, b) in loaded.mesh.vertices.iter().zip(&cube.vertices) {
            assert!((*a - *b).norm() < 1e-9);
        }
    }

    #[test]
    fn face_index_zero_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mesh");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n").unwrap();
        match load_mesh(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn face_index_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.mesh");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n").unwrap();
        assert!(matches!(load_mesh(&path), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn unknown_lines_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.mesh");
        std::fs::write(
            &path,
            "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1 2 3\n",
        )
        .unwrap();
        let loaded = load_mesh(&path).unwrap();
        assert_eq!(loaded.skipped_lines, 2);
        assert_eq!(loaded.mesh.triangles.len(), 1);
    }

    #[test]
    fn cleanup_merges_and_drops() {
        let mut mesh = TriangleMesh::new(
            vec![
                vec3(0.0, 0.0, 0.0),
                vec3(1.0, 0.0, 0.0),
                vec3(0.0, 1.0, 0.0),
                vec3(1e-12, 0.0, 0.0), // duplicate of vertex 0
            ],
            vec![[0, 1, 2], [3, 1, 0]], // second becomes degenerate after merge
        );
        let (merged, dropped) = mesh.cleanup(1e-9);
        assert_eq!(merged, 1);
        assert_eq!(dropped, 1);
        assert_eq!(mesh.triangles.len(), 1);
    }

    #[test]
    fn normalize_unit_cube_offsets() {
        let mut mesh = shapes::box_mesh(vec3(1.0, 1.0, 1.0), vec3(1.0, 1.0, 1.0));
        let sim = mesh.normalize().unwrap();
        let (lo, hi) = mesh.bounds().unwrap();
        for c in [lo.x, lo.y, lo.z] {
            assert_relative_eq!(c, -0.95, epsilon = 1e-12);
        }
        for c in [hi.x, hi.y, hi.z] {
            assert_relative_eq!(c, 0.95, epsilon = 1e-12);
        }
        // Mapping back restores original coordinates.
        let back = sim.inverse_apply(lo);
        assert!((back - Vec3::ZERO).norm() < 1e-12);
    }

    #[test]
    fn normalize_max_extent() {
        let mut mesh = shapes::box_mesh(vec3(0.3, -0.4, 0.1), vec3(0.5, 0.2, 0.1));
        mesh.normalize().unwrap();
        let (lo, hi) = mesh.bounds().unwrap();
        assert_relative_eq!((hi - lo).max_component(), 1.9, epsilon = 1e-9);
        let max_abs = lo.abs().max_by_component(hi.abs()).max_component();
        assert_relative_eq!(max_abs, 0.95, epsilon = 1e-9);
    }

    #[test]
    fn normalize_is_idempotent_up_to_margin() {
        let mut mesh = shapes::box_mesh(Vec3::ZERO, vec3(0.95, 0.4, 0.4));
        let sim = mesh.normalize().unwrap();
        assert_relative_eq!(sim.scale, 1.0, epsilon = 1e-12);
        assert!(sim.offset.norm() < 1e-12);
    }

    #[test]
    fn sample_single_triangle_in_plane() {
        let mesh = TriangleMesh::new(
            vec![vec3(0.0, 0.0, 0.3), vec3(1.0, 0.0, 0.3), vec3(0.0, 1.0, 0.3)],
            vec![[0, 1, 2]],
        );
        let pts = mesh.sample_surface(100, 5).unwrap();
        for p in &pts {
            assert!((p.z - 0.3).abs() < 1e-12);
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x + p.y <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn sample_area_proportional() {
        // Areas 4.5 and 0.5 -> 9:1 expected split.
        let mesh = TriangleMesh::new(
            vec![
                vec3(0.0, 0.0, 0.0),
                vec3(3.0, 0.0, 0.0),
                vec3(0.0, 3.0, 0.0),
                vec3(10.0, 0.0, 0.0),
                vec3(11.0, 0.0, 0.0),
                vec3(10.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let pts = mesh.sample_surface(100_000, 9).unwrap();
        let big = pts.iter().filter(|p| p.x < 5.0).count();
        let ratio = big as f64 / (100_000 - big) as f64;
        assert!((ratio - 9.0).abs() < 9.0 * 0.02, "ratio {ratio}");
    }

    #[test]
    fn sample_deterministic() {
        let mesh = shapes::icosphere(0.5, 1);
        let a = mesh.sample_surface(64, 123).unwrap();
        let b = mesh.sample_surface(64, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_mesh_errors() {
        let mesh = TriangleMesh::default();
        assert!(matches!(
            mesh.sample_surface(4, 0),
            Err(Error::EmptyMesh)
        ));
        let mut m2 = TriangleMesh::default();
        assert!(matches!(m2.normalize(), Err(Error::EmptyMesh)));
    }

    #[test]
    fn watertight_detects_open_mesh() {
        assert!(shapes::box_mesh(Vec3::ZERO, vec3(1.0, 1.0, 1.0)).is_watertight());
        assert!(!shapes::plane_quad(1.0).is_watertight());
        let mut open = shapes::box_mesh(Vec3::ZERO, vec3(1.0, 1.0, 1.0));
        open.triangles.pop();
        assert!(!open.is_watertight());
    }
}
