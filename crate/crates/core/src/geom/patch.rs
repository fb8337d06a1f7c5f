//! Quadratic height-field patches and their signed distances.
//!
//! A patch is the graph of h(u,v) = (a u^2 + c v^2 + 2 b u v)/2 (+ e u for
//! edge halves) over a disc of radius `radius` in its local frame. Two
//! signed distances are provided: the cheap second-order approximation
//! z - h(x,y) used throughout the paper-style analysis, and an exact
//! closest-point oracle (grid seeding + Newton) that the approximation is
//! tested against.

use super::{vec3, RigidTransform, Vec3};
use crate::error::{Error, Result};
use crate::rng::{rng_from, RngExt};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatchRegion {
    Disc,
    /// u >= 0 half-disc.
    HalfPos,
    /// u <= 0 half-disc.
    HalfNeg,
}

#[derive(Clone, Copy, Debug)]
pub struct QuadraticPatch {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub radius: f64,
    pub pose: RigidTransform,
}

impl QuadraticPatch {
    pub fn new(a: f64, b: f64, c: f64, radius: f64) -> QuadraticPatch {
        QuadraticPatch {
            a,
            b,
            c,
            radius,
            pose: RigidTransform::IDENTITY,
        }
    }

    pub fn with_pose(mut self, pose: RigidTransform) -> QuadraticPatch {
        self.pose = pose;
        self
    }

    pub fn height(&self, u: f64, v: f64) -> f64 {
        0.5 * (self.a * u * u + self.c * v * v + 2.0 * self.b * u * v)
    }

    /// Patch point in world coordinates.
    pub fn surface_point(&self, u: f64, v: f64) -> Result<Vec3> {
        self.pose.apply(vec3(u, v, self.height(u, v)))
    }

    /// Second-order signed-distance approximation z - h(x, y) in the local
    /// frame. Exact on the surface itself, O(|p|^3) accurate near the origin.
    pub fn sdf_approx(&self, p: Vec3) -> Result<f64> {
        let q = self.pose.inverse_apply(p)?;
        Ok(q.z - self.height(q.x, q.y))
    }

    /// Exact signed distance to the bounded patch. `tol` bounds the residual
    /// of the closest-point stationarity conditions.
    pub fn sdf_exact(&self, p: Vec3, tol: f64) -> Result<f64> {
        let q = self.pose.inverse_apply(p)?;
        let half = HalfPatch {
            a: self.a,
            b: self.b,
            c: self.c,
            e: 0.0,
            radius: self.radius,
            region: PatchRegion::Disc,
        };
        let best = half.closest(q, tol);
        best.signed(&half, q)
    }

    /// `n` points uniformly distributed (by parameter area) on the patch.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<Vec<Vec3>> {
        let mut rng = rng_from(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let rho = self.radius * rng.uniform().sqrt();
            let phi = rng.range(0.0, std::f64::consts::TAU);
            out.push(self.surface_point(rho * phi.cos(), rho * phi.sin())?);
        }
        Ok(out)
    }
}

/// Two quadratic halves meeting along u = 0 with a shared v^2 coefficient,
/// i.e. a patch with a sharp crease. Half 1 (a1, b1, e1) covers u <= 0,
/// half 2 (a2, b2, e2) covers u > 0. Local coordinates only.
#[derive(Clone, Copy, Debug)]
pub struct SharpEdgePatch {
    pub a1: f64,
    pub b1: f64,
    pub e1: f64,
    pub a2: f64,
    pub b2: f64,
    pub e2: f64,
    pub c1: f64,
    pub radius: f64,
}

impl SharpEdgePatch {
    pub fn height(&self, u: f64, v: f64) -> f64 {
        if u <= 0.0 {
            0.5 * (self.a1 * u * u + self.c1 * v * v + 2.0 * self.b1 * u * v) + self.e1 * u
        } else {
            0.5 * (self.a2 * u * u + self.c1 * v * v + 2.0 * self.b2 * u * v) + self.e2 * u
        }
    }

    pub fn surface_point(&self, u: f64, v: f64) -> Vec3 {
        vec3(u, v, self.height(u, v))
    }

    /// Piecewise approximation selected by the sign of x:
    /// z - h(x, y) with the coefficients of the half that owns x.
    pub fn sdf_approx(&self, p: Vec3) -> f64 {
        p.z - self.height(p.x, p.y)
    }

    fn halves(&self) -> [HalfPatch; 2] {
        [
            HalfPatch {
                a: self.a1,
                b: self.b1,
                c: self.c1,
                e: self.e1,
                radius: self.radius,
                region: PatchRegion::HalfNeg,
            },
            HalfPatch {
                a: self.a2,
                b: self.b2,
                c: self.c1,
                e: self.e2,
                radius: self.radius,
                region: PatchRegion::HalfPos,
            },
        ]
    }

    pub fn sdf_exact(&self, p: Vec3, tol: f64) -> Result<f64> {
        let halves = self.halves();
        let c0 = halves[0].closest(p, tol);
        let c1 = halves[1].closest(p, tol);
        if c0.dist_sq <= c1.dist_sq {
            c0.signed(&halves[0], p)
        } else {
            c1.signed(&halves[1], p)
        }
    }

    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                let rho = self.radius * rng.uniform().sqrt();
                let phi = rng.range(0.0, std::f64::consts::TAU);
                self.surface_point(rho * phi.cos(), rho * phi.sin())
            })
            .collect()
    }
}

/// One quadratic half f(u,v) = (u, v, h(u,v)), h = (a u^2 + c v^2 + 2b uv)/2 + e u,
/// restricted to `region` of the radius-`radius` disc.
struct HalfPatch {
    a: f64,
    b: f64,
    c: f64,
    e: f64,
    radius: f64,
    region: PatchRegion,
}

struct Candidate {
    u: f64,
    v: f64,
    dist_sq: f64,
    converged: bool,
}

const GRID_N: usize = 64;
const NEWTON_ITERS: usize = 30;
const NEWTON_SEEDS: usize = 5;

impl HalfPatch {
    fn height(&self, u: f64, v: f64) -> f64 {
        0.5 * (self.a * u * u + self.c * v * v + 2.0 * self.b * u * v) + self.e * u
    }

    fn point(&self, u: f64, v: f64) -> Vec3 {
        vec3(u, v, self.height(u, v))
    }

    fn tangents(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        (
            vec3(1.0, 0.0, self.a * u + self.b * v + self.e),
            vec3(0.0, 1.0, self.b * u + self.c * v),
        )
    }

    fn normal(&self, u: f64, v: f64) -> Vec3 {
        vec3(
            -(self.a * u + self.b * v + self.e),
            -(self.b * u + self.c * v),
            1.0,
        )
        .normalized()
    }

    fn in_region(&self, u: f64, v: f64, slack: f64) -> bool {
        if u * u + v * v > self.radius * self.radius + slack {
            return false;
        }
        match self.region {
            PatchRegion::Disc => true,
            PatchRegion::HalfPos => u >= -slack,
            PatchRegion::HalfNeg => u <= slack,
        }
    }

    fn u_range(&self) -> (f64, f64) {
        match self.region {
            PatchRegion::Disc => (-self.radius, self.radius),
            PatchRegion::HalfPos => (0.0, self.radius),
            PatchRegion::HalfNeg => (-self.radius, 0.0),
        }
    }

    fn arc_range(&self) -> (f64, f64) {
        use std::f64::consts::PI;
        match self.region {
            PatchRegion::Disc => (0.0, 2.0 * PI),
            PatchRegion::HalfPos => (-0.5 * PI, 0.5 * PI),
            PatchRegion::HalfNeg => (0.5 * PI, 1.5 * PI),
        }
    }

    /// Best closest-point candidate for local point `p`, combining interior
    /// Newton (seeded from the best grid cells), the rim arc, and, for half
    /// regions, the seam segment u = 0.
    fn closest(&self, p: Vec3, tol: f64) -> Candidate {
        let scale = p.norm().max(self.radius).max(1.0);
        let g_tol = tol * scale;

        let mut seeds: Vec<(f64, f64, f64)> = Vec::with_capacity(NEWTON_SEEDS + 1);
        let (ulo, uhi) = self.u_range();
        for i in 0..GRID_N {
            let u = ulo + (i as f64 + 0.5) / GRID_N as f64 * (uhi - ulo);
            for j in 0..GRID_N {
                let v = -self.radius + (j as f64 + 0.5) / GRID_N as f64 * (2.0 * self.radius);
                if u * u + v * v > self.radius * self.radius {
                    continue;
                }
                let d2 = (p - self.point(u, v)).norm_sq();
                if seeds.len() < NEWTON_SEEDS {
                    seeds.push((d2, u, v));
                    seeds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                } else if d2 < seeds[NEWTON_SEEDS - 1].0 {
                    seeds[NEWTON_SEEDS - 1] = (d2, u, v);
                    seeds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                }
            }
        }

        let mut best = Candidate {
            u: seeds.first().map_or(0.0, |s| s.1),
            v: seeds.first().map_or(0.0, |s| s.2),
            dist_sq: seeds.first().map_or(f64::INFINITY, |s| s.0),
            converged: false,
        };
        let consider = |c: Candidate, best: &mut Candidate| {
            if c.dist_sq < best.dist_sq - 1e-18 * scale * scale
                || (c.converged && !best.converged && c.dist_sq <= best.dist_sq + g_tol * scale)
            {
                *best = c;
            }
        };

        for &(_, su, sv) in &seeds {
            if let Some(c) = self.newton_interior(p, su, sv, g_tol) {
                consider(c, &mut best);
            }
        }
        for c in self.refine_arc(p, g_tol) {
            consider(c, &mut best);
        }
        if self.region != PatchRegion::Disc {
            for c in self.refine_seam(p, g_tol) {
                consider(c, &mut best);
            }
        }
        best
    }

    fn newton_interior(&self, p: Vec3, mut u: f64, mut v: f64, g_tol: f64) -> Option<Candidate> {
        let r2 = self.radius * self.radius;
        for _ in 0..NEWTON_ITERS {
            let d = p - self.point(u, v);
            let (fu, fv) = self.tangents(u, v);
            let g1 = d.dot(fu);
            let g2 = d.dot(fv);
            if g1.abs().max(g2.abs()) < g_tol {
                if self.in_region(u, v, 1e-12 * self.radius) {
                    return Some(Candidate {
                        u,
                        v,
                        dist_sq: d.norm_sq(),
                        converged: true,
                    });
                }
                return None;
            }
            let j11 = -fu.dot(fu) + d.z * self.a;
            let j12 = -fu.dot(fv) + d.z * self.b;
            let j22 = -fv.dot(fv) + d.z * self.c;
            let det = j11 * j22 - j12 * j12;
            if det.abs() < 1e-300 {
                return None;
            }
            let du = (-g1 * j22 + g2 * j12) / det;
            let dv = (-g2 * j11 + g1 * j12) / det;
            u += du;
            v += dv;
            // Project back into the region; the dedicated boundary solvers own
            // any foot point that truly lies on the rim or seam.
            match self.region {
                PatchRegion::HalfPos if u < 0.0 => return None,
                PatchRegion::HalfNeg if u > 0.0 => return None,
                _ => {}
            }
            if u * u + v * v > r2 {
                return None;
            }
            if du.abs().max(dv.abs()) < 1e-15 * self.radius {
                let d = p - self.point(u, v);
                return Some(Candidate {
                    u,
                    v,
                    dist_sq: d.norm_sq(),
                    converged: true,
                });
            }
        }
        None
    }

    /// 1D Newton on the rim circle u = r cos(phi), v = r sin(phi).
    fn refine_arc(&self, p: Vec3, g_tol: f64) -> Vec<Candidate> {
        let (lo, hi) = self.arc_range();
        let n = 128;
        let mut seeds: Vec<(f64, f64)> = Vec::new();
        for i in 0..=n {
            let phi = lo + (hi - lo) * i as f64 / n as f64;
            let (u, v) = (self.radius * phi.cos(), self.radius * phi.sin());
            let d2 = (p - self.point(u, v)).norm_sq();
            seeds.push((d2, phi));
        }
        seeds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        seeds.truncate(3);

        let mut out = Vec::new();
        for &(_, mut phi) in &seeds {
            let mut converged = false;
            for _ in 0..NEWTON_ITERS {
                let (cu, su) = (phi.cos(), phi.sin());
                let (u, v) = (self.radius * cu, self.radius * su);
                let (up, vp) = (-self.radius * su, self.radius * cu);
                let (upp, vpp) = (-u, -v);
                let hu = self.a * u + self.b * v + self.e;
                let hv = self.b * u + self.c * v;
                let hp = hu * up + hv * vp;
                let hpp = self.a * up * up
                    + 2.0 * self.b * up * vp
                    + self.c * vp * vp
                    + hu * upp
                    + hv * vpp;
                let gamma = vec3(u, v, self.height(u, v));
                let gp = vec3(up, vp, hp);
                let gpp = vec3(upp, vpp, hpp);
                let d = p - gamma;
                let dd = -2.0 * d.dot(gp);
                if dd.abs() < g_tol * self.radius {
                    converged = true;
                    break;
                }
                let ddd = 2.0 * gp.dot(gp) - 2.0 * d.dot(gpp);
                if ddd.abs() < 1e-300 {
                    break;
                }
                let step = -dd / ddd;
                let clamped = step.clamp(-0.5, 0.5);
                phi += clamped;
                phi = phi.clamp(lo, hi);
                if clamped.abs() < 1e-15 {
                    converged = true;
                    break;
                }
            }
            let (u, v) = (self.radius * phi.cos(), self.radius * phi.sin());
            let endpoint = phi <= lo + 1e-15 || phi >= hi - 1e-15;
            out.push(Candidate {
                u,
                v,
                dist_sq: (p - self.point(u, v)).norm_sq(),
                converged: converged || endpoint,
            });
        }
        out
    }

    /// 1D Newton along the seam u = 0 (half regions only). The objective is a
    /// cubic in v so Newton with a few seeds covers every local minimum.
    fn refine_seam(&self, p: Vec3, g_tol: f64) -> Vec<Candidate> {
        let mut out = Vec::new();
        let n = 64;
        let mut seeds: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let v = -self.radius + 2.0 * self.radius * i as f64 / n as f64;
                ((p - self.point(0.0, v)).norm_sq(), v)
            })
            .collect();
        seeds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        seeds.truncate(3);
        for &(_, mut v) in &seeds {
            let mut converged = false;
            for _ in 0..NEWTON_ITERS {
                // q(v) = (p - f(0,v)) . f_v(0,v), f(0,v) = (0, v, c v^2 / 2)
                let q = (p.y - v) + (p.z - 0.5 * self.c * v * v) * self.c * v;
                if q.abs() < g_tol {
                    converged = true;
                    break;
                }
                let qp = -1.0 + self.c * p.z - 1.5 * self.c * self.c * v * v;
                if qp.abs() < 1e-300 {
                    break;
                }
                let step = (-q / qp).clamp(-0.5 * self.radius, 0.5 * self.radius);
                v += step;
                v = v.clamp(-self.radius, self.radius);
                if step.abs() < 1e-15 * self.radius {
                    converged = true;
                    break;
                }
            }
            let endpoint = v.abs() >= self.radius - 1e-15;
            out.push(Candidate {
                u: 0.0,
                v,
                dist_sq: (p - self.point(0.0, v)).norm_sq(),
                converged: converged || endpoint,
            });
        }
        out
    }
}

impl Candidate {
    fn signed(&self, half: &HalfPatch, p: Vec3) -> Result<f64> {
        let d = p - half.point(self.u, self.v);
        let dist = d.norm();
        let value = if dist < 1e-15 {
            0.0
        } else {
            d.dot(half.normal(self.u, self.v)).signum() * dist
        };
        if self.converged {
            Ok(value)
        } else {
            Err(Error::NonConvergence { best: value })
        }
    }
}
