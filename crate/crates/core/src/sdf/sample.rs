//! Per-voxel supervision samples: an 80/20 mixture of noised surface points
//! and uniform free-space points inside the 1.5x-expanded voxel, each tagged
//! with its ground-truth signed distance.

use super::{closest_point_triangle, MeshSdf};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::field::VoxelGrid;
use crate::geom::{vec3, Vec3};
use crate::mesh::TriangleMesh;
use crate::rng::{child_seed, rng_from, RngExt};
use rayon::prelude::*;
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample {
    pub position: Vec3,
    pub sdf: f64,
    pub voxel: u32,
}

#[derive(Clone, Debug)]
pub struct SampleSet {
    v: u32,
    lower: Vec3,
    upper: Vec3,
    /// Grouped by voxel, voxels ascending.
    samples: Vec<SdfSample>,
    /// (voxel, start, len) per group.
    groups: Vec<(u32, usize, usize)>,
}

impl SampleSet {
    pub fn from_samples(v: u32, lower: Vec3, upper: Vec3, mut samples: Vec<SdfSample>) -> SampleSet {
        samples.sort_by_key(|s| s.voxel);
        let mut groups = Vec::new();
        let mut i = 0;
        while i < samples.len() {
            let voxel = samples[i].voxel;
            let start = i;
            while i < samples.len() && samples[i].voxel == voxel {
                i += 1;
            }
            groups.push((voxel, start, i - start));
        }
        SampleSet {
            v,
            lower,
            upper,
            samples,
            groups,
        }
    }

    pub fn v(&self) -> u32 {
        self.v
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (self.lower, self.upper)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SdfSample] {
        &self.samples
    }

    pub fn voxels(&self) -> impl Iterator<Item = u32> + '_ {
        self.groups.iter().map(|g| g.0)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, voxel: u32) -> Option<&[SdfSample]> {
        self.groups
            .binary_search_by_key(&voxel, |g| g.0)
            .ok()
            .map(|i| {
                let (_, start, len) = self.groups[i];
                &self.samples[start..start + len]
            })
    }

    pub fn groups(&self) -> impl Iterator<Item = (u32, &[SdfSample])> + '_ {
        self.groups
            .iter()
            .map(move |&(v, s, l)| (v, &self.samples[s..s + l]))
    }

    /// Grid whose valid set is exactly the sampled voxels.
    pub fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::new(
            self.v,
            self.lower,
            self.upper,
            self.groups.iter().map(|g| g.0).collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write_magic(&mut w, b"CFSM", 1)?;
        write_u32(&mut w, self.v)?;
        for c in [
            self.lower.x,
            self.lower.y,
            self.lower.z,
            self.upper.x,
            self.upper.y,
            self.upper.z,
        ] {
            write_f32(&mut w, c as f32)?;
        }
        write_u64(&mut w, self.samples.len() as u64)?;
        for s in &self.samples {
            write_u32(&mut w, s.voxel)?;
            write_f32(&mut w, s.position.x as f32)?;
            write_f32(&mut w, s.position.y as f32)?;
            write_f32(&mut w, s.position.z as f32)?;
            write_f32(&mut w, s.sdf as f32)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SampleSet> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let version = read_magic(&mut r, b"CFSM")?;
        expect_version(version, 1)?;
        let v = read_u32(&mut r)?;
        if v < 2 {
            return Err(Error::Format(format!("grid resolution {v} < 2")));
        }
        let mut b = [0.0f64; 6];
        for c in &mut b {
            *c = read_f32(&mut r)? as f64;
        }
        let (lower, upper) = (vec3(b[0], b[1], b[2]), vec3(b[3], b[4], b[5]));
        let count = read_u64(&mut r)? as usize;
        let total_cells = (v as u64).pow(3);
        let max_sdf = 2.0 * (upper - lower).norm();
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let voxel = read_u32(&mut r)?;
            if voxel as u64 >= total_cells {
                return Err(Error::Format(format!("sample voxel {voxel} out of range")));
            }
            let x = read_f32(&mut r)? as f64;
            let y = read_f32(&mut r)? as f64;
            let z = read_f32(&mut r)? as f64;
            let sdf = read_f32(&mut r)? as f64;
            if !(x.is_finite() && y.is_finite() && z.is_finite() && sdf.is_finite()) {
                return Err(Error::Format("non-finite sample".into()));
            }
            if sdf.abs() > max_sdf {
                return Err(Error::Format(format!("sample sdf {sdf} out of range")));
            }
            samples.push(SdfSample {
                position: vec3(x, y, z),
                sdf,
                voxel,
            });
        }
        Ok(SampleSet::from_samples(v, lower, upper, samples))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    /// Ball radius as a multiple of the voxel half-diagonal.
    pub radius_factor: f64,
    /// Fraction of samples near the surface (vs. uniform in the box).
    pub near_fraction: f64,
    /// Surface noise scale as a multiple of the cell edge length.
    pub sigma_cells: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            radius_factor: 1.5,
            near_fraction: 0.8,
            sigma_cells: 0.25,
        }
    }
}

pub struct SampleBuilder<'a> {
    mesh: &'a TriangleMesh,
    sdf: &'a MeshSdf,
    grid: &'a VoxelGrid,
    cfg: SamplerConfig,
}

impl<'a> SampleBuilder<'a> {
    pub fn new(
        mesh: &'a TriangleMesh,
        sdf: &'a MeshSdf,
        grid: &'a VoxelGrid,
        cfg: SamplerConfig,
    ) -> SampleBuilder<'a> {
        SampleBuilder {
            mesh,
            sdf,
            grid,
            cfg,
        }
    }

    /// Deterministic per (voxel, seed): the stream is keyed by the voxel index.
    pub fn sample_voxel(&self, voxel: u32, n: usize, seed: u64) -> Result<Vec<SdfSample>> {
        assert!(n > 0);
        let center = self.grid.cell_center(voxel);
        let ball_r = self.cfg.radius_factor * self.grid.half_diagonal();
        let cs = self.grid.cell_size();
        let sigma = self.cfg.sigma_cells * cs.x.min(cs.y).min(cs.z);
        let half_box = cs * (0.5 * self.cfg.radius_factor);

        // Triangles within reach of the expanded ball.
        let mut areas = Vec::new();
        let mut candidates = Vec::new();
        let mut total = 0.0;
        for t in 0..self.mesh.triangles.len() {
            let tri = self.mesh.triangle_vertices(t);
            let (cp, _) = closest_point_triangle(center, tri[0], tri[1], tri[2]);
            if (cp - center).norm() <= ball_r {
                let area = self.mesh.triangle_area(t);
                if area > 0.0 {
                    total += area;
                    candidates.push(tri);
                    areas.push(total);
                }
            }
        }
        if candidates.is_empty() {
            return Err(Error::NoSurfaceInVoxel { voxel });
        }

        let mut rng = rng_from(child_seed(seed, voxel as u64));
        let n_near = ((self.cfg.near_fraction * n as f64).round() as usize).min(n);
        let mut out = Vec::with_capacity(n);
        let max_tries = 10_000usize.max(1000 * n);
        let mut tries = 0;
        while out.len() < n_near {
            tries += 1;
            if tries > max_tries {
                return Err(Error::NoSurfaceInVoxel { voxel });
            }
            let target = rng.uniform() * total;
            let t = areas.partition_point(|&c| c < target).min(candidates.len() - 1);
            let [a, b, c] = candidates[t];
            let s = rng.uniform().sqrt();
            let r = rng.uniform();
            let q = a * (1.0 - s) + b * (s * (1.0 - r)) + c * (s * r);
            if (q - center).norm() > ball_r {
                continue;
            }
            let p = q + vec3(rng.normal(), rng.normal(), rng.normal()) * sigma;
            if (p - center).norm() > ball_r {
                continue;
            }
            out.push(SdfSample {
                position: p,
                sdf: self.sdf.value(p),
                voxel,
            });
        }
        while out.len() < n {
            let p = center
                + vec3(
                    rng.range(-half_box.x, half_box.x),
                    rng.range(-half_box.y, half_box.y),
                    rng.range(-half_box.z, half_box.z),
                );
            out.push(SdfSample {
                position: p,
                sdf: self.sdf.value(p),
                voxel,
            });
        }
        Ok(out)
    }

    /// Samples every valid voxel; groups merge in voxel order regardless of
    /// the parallel schedule.
    pub fn build(&self, per_voxel: usize, seed: u64) -> Result<SampleSet> {
        let per_cell: Result<Vec<Vec<SdfSample>>> = self
            .grid
            .valid()
            .par_iter()
            .map(|&voxel| self.sample_voxel(voxel, per_voxel, seed))
            .collect();
        let samples: Vec<SdfSample> = per_cell?.into_iter().flatten().collect();
        let (lower, upper) = self.grid.bounds();
        Ok(SampleSet::from_samples(self.grid.v(), lower, upper, samples))
    }
}

/// One-shot variant of [`SampleBuilder::sample_voxel`] with default mixture
/// parameters supplied explicitly.
#[allow(clippy::too_many_arguments)]
pub fn sample_voxel_points(
    mesh: &TriangleMesh,
    grid: &VoxelGrid,
    voxel: u32,
    n: usize,
    radius_factor: f64,
    near_fraction: f64,
    sigma_cells: f64,
    seed: u64,
) -> Result<Vec<SdfSample>> {
    let sdf = MeshSdf::new(mesh)?;
    SampleBuilder::new(
        mesh,
        &sdf,
        grid,
        SamplerConfig {
            radius_factor,
            near_fraction,
            sigma_cells,
        },
    )
    .sample_voxel(voxel, n, seed)
}

pub fn build_sample_set(
    mesh: &TriangleMesh,
    grid: &VoxelGrid,
    per_voxel: usize,
    seed: u64,
) -> Result<SampleSet> {
    let sdf = MeshSdf::new(mesh)?;
    SampleBuilder::new(mesh, &sdf, grid, SamplerConfig::default()).build(per_voxel, seed)
}
