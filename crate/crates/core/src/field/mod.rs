//! The sparse voxel grid and the Coordinate Field: one learnable rigid frame
//! and one latent code per surface-intersecting cell.

mod init;

pub use init::{init_frames, init_frames_from_samples, InitStats};

use crate::binio::*;
use crate::error::{Error, Result};
use crate::geom::{vec3, Mat3, Quat, Vec3};
use crate::mesh::TriangleMesh;
use crate::rng::{child_seed, rng_from, RngExt};
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct VoxelGrid {
    v: u32,
    lower: Vec3,
    upper: Vec3,
    /// Sorted linear indices of cells that intersect the surface.
    valid: Vec<u32>,
    /// Dense index -> slot in `valid`, or -1.
    slot_of: Vec<i32>,
}

impl VoxelGrid {
    pub fn new(v: u32, lower: Vec3, upper: Vec3, mut valid: Vec<u32>) -> Result<VoxelGrid> {
        if v < 2 {
            return Err(Error::Format(format!("grid resolution {v} < 2")));
        }
        let total = (v as u64).pow(3);
        if upper.x <= lower.x || upper.y <= lower.y || upper.z <= lower.z {
            return Err(Error::Format("degenerate grid bounds".into()));
        }
        valid.sort_unstable();
        valid.dedup();
        if let Some(&last) = valid.last() {
            if last as u64 >= total {
                return Err(Error::Format(format!(
                    "valid cell {last} out of range for V={v}"
                )));
            }
        }
        let mut slot_of = vec![-1i32; total as usize];
        for (slot, &idx) in valid.iter().enumerate() {
            slot_of[idx as usize] = slot as i32;
        }
        Ok(VoxelGrid {
            v,
            lower,
            upper,
            valid,
            slot_of,
        })
    }

    pub fn unit_bounds(v: u32, valid: Vec<u32>) -> Result<VoxelGrid> {
        VoxelGrid::new(v, vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0), valid)
    }

    pub fn v(&self) -> u32 {
        self.v
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (self.lower, self.upper)
    }

    pub fn valid(&self) -> &[u32] {
        &self.valid
    }

    pub fn n_valid(&self) -> usize {
        self.valid.len()
    }

    pub fn cell_size(&self) -> Vec3 {
        (self.upper - self.lower) / self.v as f64
    }

    /// Half of the cell diagonal — the "radius" of a voxel.
    pub fn half_diagonal(&self) -> f64 {
        (self.cell_size() * 0.5).norm()
    }

    pub fn cell_coords(&self, idx: u32) -> (u32, u32, u32) {
        let v = self.v;
        (idx % v, (idx / v) % v, idx / (v * v))
    }

    pub fn cell_index(&self, ix: u32, iy: u32, iz: u32) -> u32 {
        ix + self.v * (iy + self.v * iz)
    }

    pub fn cell_center(&self, idx: u32) -> Vec3 {
        let (ix, iy, iz) = self.cell_coords(idx);
        let cs = self.cell_size();
        self.lower
            + vec3(
                (ix as f64 + 0.5) * cs.x,
                (iy as f64 + 0.5) * cs.y,
                (iz as f64 + 0.5) * cs.z,
            )
    }

    pub fn cell_bounds(&self, idx: u32) -> (Vec3, Vec3) {
        let (ix, iy, iz) = self.cell_coords(idx);
        let cs = self.cell_size();
        let lo = self.lower + vec3(ix as f64 * cs.x, iy as f64 * cs.y, iz as f64 * cs.z);
        (lo, lo + cs)
    }

    /// Cell owning `p`. Face points go to the higher-index cell; the exact
    /// upper bound clamps to the last cell; outside the bounds -> None.
    pub fn voxel_of(&self, p: Vec3) -> Option<u32> {
        let cs = self.cell_size();
        let mut coords = [0u32; 3];
        for axis in 0..3 {
            let (x, lo, hi, c) = match axis {
                0 => (p.x, self.lower.x, self.upper.x, cs.x),
                1 => (p.y, self.lower.y, self.upper.y, cs.y),
                _ => (p.z, self.lower.z, self.upper.z, cs.z),
            };
            if x < lo || x > hi {
                return None;
            }
            let i = ((x - lo) / c).floor() as i64;
            coords[axis] = i.clamp(0, self.v as i64 - 1) as u32;
        }
        Some(self.cell_index(coords[0], coords[1], coords[2]))
    }

    pub fn is_valid(&self, idx: u32) -> bool {
        self.slot_of.get(idx as usize).is_some_and(|&s| s >= 0)
    }

    /// Slot of `idx` in the valid list.
    pub fn slot(&self, idx: u32) -> Option<usize> {
        match self.slot_of.get(idx as usize) {
            Some(&s) if s >= 0 => Some(s as usize),
            _ => None,
        }
    }

    /// Valid cells among the 27-cell neighborhood of `idx`, ascending.
    pub fn valid_neighborhood(&self, idx: u32) -> Vec<u32> {
        let (ix, iy, iz) = self.cell_coords(idx);
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny, nz) = (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                    if nx < 0 || ny < 0 || nz < 0 {
                        continue;
                    }
                    let (nx, ny, nz) = (nx as u32, ny as u32, nz as u32);
                    if nx >= self.v || ny >= self.v || nz >= self.v {
                        continue;
                    }
                    let n = self.cell_index(nx, ny, nz);
                    if self.is_valid(n) {
                        out.push(n);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Separating-axis triangle vs. axis-aligned box test (touching counts as
/// intersecting).
pub fn tri_box_overlap(center: Vec3, half: Vec3, tri: [Vec3; 3]) -> bool {
    let v0 = tri[0] - center;
    let v1 = tri[1] - center;
    let v2 = tri[2] - center;

    for axis in 0..3 {
        let (p0, p1, p2, h) = (
            v0.get(axis),
            v1.get(axis),
            v2.get(axis),
            half.get(axis),
        );
        if p0.min(p1).min(p2) > h || p0.max(p1).max(p2) < -h {
            return false;
        }
    }

    let n = (v1 - v0).cross(v2 - v0);
    let d = n.dot(v0);
    let r = half.x * n.x.abs() + half.y * n.y.abs() + half.z * n.z.abs();
    if d.abs() > r {
        return false;
    }

    let edges = [v1 - v0, v2 - v1, v0 - v2];
    let verts = [v0, v1, v2];
    for e in edges {
        for axis in 0..3 {
            let a = match axis {
                0 => vec3(0.0, -e.z, e.y),
                1 => vec3(e.z, 0.0, -e.x),
                _ => vec3(-e.y, e.x, 0.0),
            };
            let r = half.x * a.x.abs() + half.y * a.y.abs() + half.z * a.z.abs();
            let (p0, p1, p2) = (a.dot(verts[0]), a.dot(verts[1]), a.dot(verts[2]));
            if p0.min(p1).min(p2) > r || p0.max(p1).max(p2) < -r {
                return false;
            }
        }
    }
    true
}

/// Valid cells = cells whose closed box intersects at least one triangle.
pub fn build_grid(mesh: &TriangleMesh, v: u32) -> Result<VoxelGrid> {
    build_grid_bounded(mesh, v, vec3(-1.0, -1.0, -1.0), vec3(1.0, 1.0, 1.0))
}

pub fn build_grid_bounded(
    mesh: &TriangleMesh,
    v: u32,
    lower: Vec3,
    upper: Vec3,
) -> Result<VoxelGrid> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let probe = VoxelGrid::new(v, lower, upper, Vec::new())?;
    let cs = probe.cell_size();
    let half = cs * 0.5;
    let mut valid = Vec::new();
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle_vertices(t);
        let lo = tri[0].min_by_component(tri[1]).min_by_component(tri[2]);
        let hi = tri[0].max_by_component(tri[1]).max_by_component(tri[2]);
        let range = |x: f64, l: f64, c: f64| -> (i64, i64) {
            let a = ((x - l) / c).floor() as i64 - 1;
            (a, a + 2)
        };
        let (x0, _) = range(lo.x, lower.x, cs.x);
        let (_, x1) = range(hi.x, lower.x, cs.x);
        let (y0, _) = range(lo.y, lower.y, cs.y);
        let (_, y1) = range(hi.y, lower.y, cs.y);
        let (z0, _) = range(lo.z, lower.z, cs.z);
        let (_, z1) = range(hi.z, lower.z, cs.z);
        for iz in z0.max(0)..=z1.min(v as i64 - 1) {
            for iy in y0.max(0)..=y1.min(v as i64 - 1) {
                for ix in x0.max(0)..=x1.min(v as i64 - 1) {
                    let idx = probe.cell_index(ix as u32, iy as u32, iz as u32);
                    let center = probe.cell_center(idx);
                    if tri_box_overlap(center, half, tri) {
                        valid.push(idx);
                    }
                }
            }
        }
    }
    VoxelGrid::new(v, lower, upper, valid)
}

/// Eq.-4-style local frame: rows of the world->local map are (n, t, n x t),
/// stored as the quaternion whose rotation has those vectors as columns.
#[derive(Clone, Copy, Debug)]
pub struct CoordinateFrame {
    pub rotation: Quat,
    pub origin: Vec3,
}

impl CoordinateFrame {
    pub fn identity_at(origin: Vec3) -> CoordinateFrame {
        CoordinateFrame {
            rotation: Quat::IDENTITY,
            origin,
        }
    }

    pub fn from_axes(n: Vec3, t: Vec3, origin: Vec3) -> CoordinateFrame {
        let b = n.cross(t);
        CoordinateFrame {
            rotation: Quat::from_rotation(&Mat3::from_columns(n, t, b)),
            origin,
        }
    }

    pub fn rotation_matrix(&self) -> Result<Mat3> {
        self.rotation.to_rotation()
    }

    /// x_v = R^T (p - o).
    pub fn world_to_local(&self, p: Vec3) -> Result<Vec3> {
        Ok(self.rotation_matrix()?.transpose_mul_vec(p - self.origin))
    }

    pub fn local_to_world(&self, x: Vec3) -> Result<Vec3> {
        Ok(self.rotation_matrix()?.mul_vec(x) + self.origin)
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateField {
    pub grid: VoxelGrid,
    latent_len: usize,
    frames: Vec<CoordinateFrame>,
    /// n_valid x latent_len, row per slot.
    latents: Vec<f64>,
}

impl CoordinateField {
    /// Identity frames at cell centers, latents ~ N(0, 0.01^2) seeded per cell.
    pub fn new(grid: VoxelGrid, latent_len: usize, seed: u64) -> CoordinateField {
        let frames = grid
            .valid()
            .iter()
            .map(|&idx| CoordinateFrame::identity_at(grid.cell_center(idx)))
            .collect();
        let mut latents = Vec::with_capacity(grid.n_valid() * latent_len);
        for &idx in grid.valid() {
            let mut rng = rng_from(child_seed(seed, idx as u64));
            for _ in 0..latent_len {
                latents.push(0.01 * rng.normal());
            }
        }
        CoordinateField {
            grid,
            latent_len,
            frames,
            latents,
        }
    }

    pub fn latent_len(&self) -> usize {
        self.latent_len
    }

    pub fn n_cells(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, slot: usize) -> &CoordinateFrame {
        &self.frames[slot]
    }

    pub fn frame_mut(&mut self, slot: usize) -> &mut CoordinateFrame {
        &mut self.frames[slot]
    }

    pub fn latent(&self, slot: usize) -> &[f64] {
        &self.latents[slot * self.latent_len..(slot + 1) * self.latent_len]
    }

    pub fn latent_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.latents[slot * self.latent_len..(slot + 1) * self.latent_len]
    }

    /// Frame + latent for the cell that owns `p`, if that cell is valid.
    pub fn lookup(&self, p: Vec3) -> Option<usize> {
        self.grid.voxel_of(p).and_then(|idx| self.grid.slot(idx))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write_magic(&mut w, b"CFFD", 1)?;
        write_u32(&mut w, self.grid.v())?;
        let (lo, hi) = self.grid.bounds();
        for c in [lo.x, lo.y, lo.z, hi.x, hi.y, hi.z] {
            write_f32(&mut w, c as f32)?;
        }
        write_u32(&mut w, self.latent_len as u32)?;
        write_u64(&mut w, self.grid.n_valid() as u64)?;
        for (slot, &idx) in self.grid.valid().iter().enumerate() {
            write_u32(&mut w, idx)?;
            let f = &self.frames[slot];
            for c in [f.rotation.w, f.rotation.x, f.rotation.y, f.rotation.z] {
                write_f32(&mut w, c as f32)?;
            }
            for c in [f.origin.x, f.origin.y, f.origin.z] {
                write_f32(&mut w, c as f32)?;
            }
            for &z in self.latent(slot) {
                write_f32(&mut w, z as f32)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CoordinateField> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let version = read_magic(&mut r, b"CFFD")?;
        expect_version(version, 1)?;
        let v = read_u32(&mut r)?;
        let mut b = [0.0f64; 6];
        for c in &mut b {
            *c = read_f32(&mut r)? as f64;
        }
        let latent_len = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;

        let mut indices = Vec::with_capacity(count);
        let mut frames = Vec::with_capacity(count);
        let mut latents = Vec::with_capacity(count * latent_len);
        for _ in 0..count {
            let idx = read_u32(&mut r)?;
            indices.push(idx);
            let mut q = [0.0f64; 4];
            for c in &mut q {
                *c = read_f32(&mut r)? as f64;
            }
            let mut o = [0.0f64; 3];
            for c in &mut o {
                *c = read_f32(&mut r)? as f64;
            }
            // f32 storage wobbles the norm at ~1e-8; restore the invariant.
            let rotation = Quat::new(q[0], q[1], q[2], q[3]).normalized()?;
            frames.push(CoordinateFrame {
                rotation,
                origin: Vec3::from_array(o),
            });
            for _ in 0..latent_len {
                latents.push(read_f32(&mut r)? as f64);
            }
        }
        let grid = VoxelGrid::new(
            v,
            vec3(b[0], b[1], b[2]),
            vec3(b[3], b[4], b[5]),
            indices.clone(),
        )?;
        if grid.n_valid() != count {
            return Err(Error::Format("duplicate cell indices in field file".into()));
        }
        // Files must list cells in ascending order so slots line up.
        if grid.valid() != indices.as_slice() {
            return Err(Error::Format("field file cells not sorted".into()));
        }
        Ok(CoordinateField {
            grid,
            latent_len,
            frames,
            latents,
        })
    }
}
