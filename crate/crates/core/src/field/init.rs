//! Geometry-aware frame initialization: the local normal axis comes from the
//! second moment of SDF gradients at the cell's samples, the tangent from the
//! in-plane spread of the sample positions.

use super::{CoordinateField, CoordinateFrame};
use crate::geom::{vec3, Vec3};
use crate::linalg::{solve, sym_eigen};
use crate::sdf::{sdf_gradient, SampleSet};
use rayon::prelude::*;

#[derive(Debug, Default)]
pub struct InitStats {
    pub cells: usize,
    /// Cells with too few samples or vanishing gradient moments; left with
    /// the world-axis frame.
    pub degenerate: Vec<u32>,
    /// Cells whose in-plane position spread is isotropic; tangent chosen by
    /// the world-axis fallback rule.
    pub ambiguous_tangent: Vec<u32>,
}

enum Flag {
    Clean,
    Degenerate,
    Ambiguous,
}

/// PCA frames from an SDF oracle: per-sample central-difference gradients with
/// h = 1e-4 cells. Latents are untouched.
pub fn init_frames<F>(field: &mut CoordinateField, samples: &SampleSet, oracle: F) -> InitStats
where
    F: Fn(Vec3) -> f64 + Sync,
{
    let cs = field.grid.cell_size();
    let h = 1e-4 * cs.x.min(cs.y).min(cs.z);
    run_init(field, samples, |group| {
        group
            .iter()
            .map(|s| sdf_gradient(&oracle, s.position, h))
            .collect()
    })
}

/// Oracle-free variant for sample-only inputs: one affine fit of the sampled
/// SDF per cell supplies a shared gradient estimate.
pub fn init_frames_from_samples(field: &mut CoordinateField, samples: &SampleSet) -> InitStats {
    run_init(field, samples, |group| {
        let mut ata = [0.0f64; 16];
        let mut atb = [0.0f64; 4];
        for s in group {
            let row = [s.position.x, s.position.y, s.position.z, 1.0];
            for i in 0..4 {
                for j in 0..4 {
                    ata[i * 4 + j] += row[i] * row[j];
                }
                atb[i] += row[i] * s.sdf;
            }
        }
        match solve(4, &mut ata, &mut atb) {
            Ok(x) => vec![vec3(x[0], x[1], x[2]); group.len()],
            Err(_) => vec![Vec3::ZERO; group.len()],
        }
    })
}

fn run_init<G>(field: &mut CoordinateField, samples: &SampleSet, gradients_of: G) -> InitStats
where
    G: Fn(&[crate::sdf::SdfSample]) -> Vec<Vec3> + Sync,
{
    let scale = field.grid.cell_size().max_component();
    let cells: Vec<u32> = field.grid.valid().to_vec();
    let results: Vec<(CoordinateFrame, Flag)> = cells
        .par_iter()
        .map(|&cell| {
            let center = field.grid.cell_center(cell);
            let Some(group) = samples.group(cell) else {
                return (CoordinateFrame::identity_at(center), Flag::Degenerate);
            };
            if group.len() < 4 {
                return (CoordinateFrame::identity_at(center), Flag::Degenerate);
            }
            let positions: Vec<Vec3> = group.iter().map(|s| s.position).collect();
            let gradients = gradients_of(group);
            pca_frame(center, &positions, &gradients, scale)
        })
        .collect();

    let mut stats = InitStats {
        cells: cells.len(),
        ..Default::default()
    };
    for (slot, (frame, flag)) in results.into_iter().enumerate() {
        *field.frame_mut(slot) = frame;
        match flag {
            Flag::Clean => {}
            Flag::Degenerate => stats.degenerate.push(cells[slot]),
            Flag::Ambiguous => stats.ambiguous_tangent.push(cells[slot]),
        }
    }
    stats
}

fn pca_frame(
    center: Vec3,
    positions: &[Vec3],
    gradients: &[Vec3],
    scale: f64,
) -> (CoordinateFrame, Flag) {
    let nf = positions.len() as f64;
    let mut mean_g = Vec3::ZERO;
    for g in gradients {
        mean_g += *g;
    }
    mean_g = mean_g / nf;

    // Second moment plus the mean outer product. The extra term breaks the
    // tie for crease cells whose two gradient clusters are orthogonal: the
    // bisector (the mean direction) becomes strictly dominant.
    let mut m = [0.0f64; 9];
    for g in gradients {
        let ga = g.to_array();
        for i in 0..3 {
            for j in 0..3 {
                m[i * 3 + j] += ga[i] * ga[j] / nf;
            }
        }
    }
    let mg = mean_g.to_array();
    for i in 0..3 {
        for j in 0..3 {
            m[i * 3 + j] += mg[i] * mg[j];
        }
    }

    let (vals, vecs) = sym_eigen(3, &m);
    if vals[2] < 1e-12 {
        return (CoordinateFrame::identity_at(center), Flag::Degenerate);
    }
    let mut n = vec3(vecs[6], vecs[7], vecs[8]).normalized();
    if n.dot(mean_g) < 0.0 {
        n = -n;
    }

    let mut pbar = Vec3::ZERO;
    for p in positions {
        pbar += *p;
    }
    pbar = pbar / nf;
    let mut c = [0.0f64; 9];
    for p in positions {
        let d = (*p - pbar).to_array();
        for i in 0..3 {
            for j in 0..3 {
                c[i * 3 + j] += d[i] * d[j] / nf;
            }
        }
    }
    // Restrict to the plane orthogonal to n: C' = P C P, P = I - n n^T.
    let na = n.to_array();
    let mut p_mat = [0.0f64; 9];
    for i in 0..3 {
        for j in 0..3 {
            p_mat[i * 3 + j] = if i == j { 1.0 } else { 0.0 } - na[i] * na[j];
        }
    }
    let mut pc = [0.0f64; 9];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                pc[i * 3 + j] += p_mat[i * 3 + k] * c[k * 3 + j];
            }
        }
    }
    let mut cp = [0.0f64; 9];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                cp[i * 3 + j] += pc[i * 3 + k] * p_mat[k * 3 + j];
            }
        }
    }
    let (cvals, cvecs) = sym_eigen(3, &cp);

    let mut ambiguous = false;
    let top = cvals[2];
    let second = cvals[1];
    if top < 1e-12 * scale * scale || (top - second).abs() < 1e-6 * top.max(1e-300) {
        ambiguous = true;
    }
    let mut t = vec3(cvecs[6], cvecs[7], cvecs[8]);
    t = t - n * t.dot(n);
    if ambiguous || t.norm() < 1e-8 {
        ambiguous = true;
        // World axis least aligned with n, projected into the plane.
        let axes = [
            vec3(1.0, 0.0, 0.0),
            vec3(0.0, 1.0, 0.0),
            vec3(0.0, 0.0, 1.0),
        ];
        let e = axes
            .into_iter()
            .min_by(|a, b| {
                a.dot(n)
                    .abs()
                    .partial_cmp(&b.dot(n).abs())
                    .unwrap()
            })
            .unwrap();
        t = e - n * e.dot(n);
    }
    let t = t.normalized();
    let frame = CoordinateFrame::from_axes(n, t, center);
    (
        frame,
        if ambiguous { Flag::Ambiguous } else { Flag::Clean },
    )
}
