//! Numerical companion to the frame-fitting analysis: order-of-accuracy
//! sweeps for the patch SDF approximations, aligned (convex) vs unaligned
//! (non-convex) patch fitting, and the rotation-induced spurious critical
//! point of the 2D fitting landscape.

use crate::error::{Error, Result};
use crate::geom::{
    rotation_jacobian, vec3, Quat, QuadraticPatch, RigidTransform, SharpEdgePatch, Vec3,
};
use crate::linalg::{solve, sym_eigen};
use crate::rng::{child_seed, rng_from, RngExt};
use rayon::prelude::*;
use std::f64::consts::PI;

pub const QUAD_ORDER: usize = 16;

/// Gauss-Legendre nodes and weights on [-1, 1], ascending by node.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..60 {
            let (p, dp) = legendre(n, t);
            let dt = p / dp;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, t);
        out.push((t, 2.0 / ((1.0 - t * t) * dp * dp)));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

/// P_n(x) and its derivative by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for j in 2..=n {
        let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

// --- the 2D fitting landscape -----------------------------------------------

/// Parameters of the 2D curve fit: curve coefficient `k`, translation
/// (`t_x`, `t_y`), rotation `theta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandscapePoint {
    pub k: f64,
    pub t_x: f64,
    pub t_y: f64,
    pub theta: f64,
}

/// Distribution of the curve parameter x.
#[derive(Clone, Debug)]
pub enum XDist {
    /// Uniform on [-1, 1].
    Uniform,
    /// Atoms at -1 and +1 with equal weight.
    TwoPoint,
    /// Weighted atoms; weights are normalized on construction.
    Grid(Vec<(f64, f64)>),
}

/// Sampling law of the landscape experiment: x ~ p (one of [`XDist`]),
/// y ~ uniform on [y_lo, y_hi], ground-truth curve z = k0 x^2.
#[derive(Clone, Debug)]
pub struct SampleLaw {
    x: XDist,
    y_lo: f64,
    y_hi: f64,
    pub k0: f64,
}

impl SampleLaw {
    pub fn new(x: XDist, y_lo: f64, y_hi: f64, k0: f64) -> Result<SampleLaw> {
        if !(y_lo.is_finite() && y_hi.is_finite() && k0.is_finite()) || y_hi < y_lo {
            return Err(Error::Config("sample law needs finite y_lo <= y_hi".into()));
        }
        let x = match x {
            XDist::Grid(atoms) => {
                if atoms.is_empty()
                    || atoms
                        .iter()
                        .any(|&(x, w)| !x.is_finite() || !(w > 0.0) || !w.is_finite())
                {
                    return Err(Error::Config(
                        "grid law needs finite atoms with positive weights".into(),
                    ));
                }
                let total: f64 = atoms.iter().map(|a| a.1).sum();
                XDist::Grid(atoms.into_iter().map(|(x, w)| (x, w / total)).collect())
            }
            other => other,
        };
        Ok(SampleLaw { x, y_lo, y_hi, k0 })
    }

    pub fn uniform(k0: f64) -> SampleLaw {
        SampleLaw::new(XDist::Uniform, 0.0, 0.02, k0).unwrap()
    }

    /// Expectation nodes (value, weight) for x.
    pub fn x_nodes(&self) -> Vec<(f64, f64)> {
        match &self.x {
            XDist::Uniform => gauss_legendre(QUAD_ORDER)
                .into_iter()
                .map(|(t, w)| (t, 0.5 * w))
                .collect(),
            XDist::TwoPoint => vec![(-1.0, 0.5), (1.0, 0.5)],
            XDist::Grid(atoms) => atoms.clone(),
        }
    }

    /// Expectation nodes (value, weight) for y.
    pub fn y_nodes(&self) -> Vec<(f64, f64)> {
        if self.y_hi == self.y_lo {
            return vec![(self.y_lo, 1.0)];
        }
        let mid = 0.5 * (self.y_lo + self.y_hi);
        let half = 0.5 * (self.y_hi - self.y_lo);
        gauss_legendre(QUAD_ORDER)
            .into_iter()
            .map(|(t, w)| (mid + half * t, 0.5 * w))
            .collect()
    }

    pub fn expect(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for &(x, wx) in &self.x_nodes() {
            for &(y, wy) in &self.y_nodes() {
                acc += wx * wy * f(x, y);
            }
        }
        acc
    }

    pub fn x_moment(&self, i: u32) -> f64 {
        self.x_nodes().iter().map(|&(x, w)| w * x.powi(i as i32)).sum()
    }

    pub fn y_moment(&self, i: u32) -> f64 {
        self.y_nodes().iter().map(|&(y, w)| w * y.powi(i as i32)).sum()
    }

    /// c = E[y].
    pub fn c(&self) -> f64 {
        self.y_moment(1)
    }

    pub fn y_span(&self) -> f64 {
        self.y_hi - self.y_lo
    }

    /// The candidate spurious critical point (-k0, 0, 2c, pi).
    pub fn candidate(&self) -> LandscapePoint {
        LandscapePoint {
            k: -self.k0,
            t_x: 0.0,
            t_y: 2.0 * self.c(),
            theta: PI,
        }
    }
}

struct Terms {
    l: f64,
    d: [f64; 4],
    dd: [[f64; 4]; 4],
}

/// Residual l and its first and second partials in (k, t_x, t_y, theta).
fn l_terms(pt: LandscapePoint, k0: f64, x: f64, y: f64) -> Terms {
    let (s, c) = pt.theta.sin_cos();
    let yy = k0 * x * x + y;
    let b1 = c * x - s * yy;
    let b2 = -s * x - c * yy;
    let a = b1 + pt.t_x;
    let l = s * x + c * yy + pt.t_y - pt.k * a * a - y;
    let d = [-a * a, -2.0 * pt.k * a, 1.0, b1 - 2.0 * pt.k * a * b2];
    let mut dd = [[0.0; 4]; 4];
    dd[0][1] = -2.0 * a;
    dd[0][3] = -2.0 * a * b2;
    dd[1][1] = -2.0 * pt.k;
    dd[1][3] = -2.0 * pt.k * b2;
    dd[3][3] = b2 - 2.0 * pt.k * (b2 * b2 - a * b1);
    for i in 0..4 {
        for j in 0..i {
            dd[i][j] = dd[j][i];
        }
    }
    Terms { l, d, dd }
}

/// r(k, t_x, t_y, theta) = E_x E_y [ l^2 ] by tensor-product quadrature,
/// exact for the polynomial integrand.
pub fn landscape_r(pt: LandscapePoint, law: &SampleLaw) -> f64 {
    law.expect(|x, y| {
        let l = l_terms(pt, law.k0, x, y).l;
        l * l
    })
}

/// Analytic gradient and Hessian of r, assembled by quadrature of
/// 2(l dl) and 2(dl dl + l ddl).
pub fn landscape_grad_hess(pt: LandscapePoint, law: &SampleLaw) -> ([f64; 4], [[f64; 4]; 4]) {
    let mut g = [0.0; 4];
    let mut h = [[0.0; 4]; 4];
    for &(x, wx) in &law.x_nodes() {
        for &(y, wy) in &law.y_nodes() {
            let w = wx * wy;
            let t = l_terms(pt, law.k0, x, y);
            for i in 0..4 {
                g[i] += w * 2.0 * t.l * t.d[i];
                for j in 0..4 {
                    h[i][j] += w * 2.0 * (t.d[i] * t.d[j] + t.l * t.dd[i][j]);
                }
            }
        }
    }
    (g, h)
}

#[derive(Clone, Debug)]
pub struct CriticalReport {
    pub candidate: LandscapePoint,
    pub r_value: f64,
    pub grad: [f64; 4],
    pub grad_norm: f64,
    pub is_critical: bool,
    pub hessian: [[f64; 4]; 4],
    pub hessian_min_eig: f64,
    /// det of the (theta, t_x) 2x2 block.
    pub margin_theta_tx: f64,
    /// det of the (k, t_y) 2x2 block.
    pub margin_k_ty: f64,
    /// Cauchy equality V2 V6 = V4^2 holds: the positivity argument loses
    /// its strict margin.
    pub degenerate: bool,
    pub y_span: f64,
}

const CRITICAL_GRAD_TOL: f64 = 1e-9;

/// Evaluates the candidate point (-k0, 0, 2c, pi) of the law: gradient norm,
/// Hessian spectrum and the two 2x2 determinant margins of the positivity
/// argument.
pub fn verify_critical_point(law: &SampleLaw) -> CriticalReport {
    let candidate = law.candidate();
    let r_value = landscape_r(candidate, law);
    let (grad, hessian) = landscape_grad_hess(candidate, law);
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let flat: Vec<f64> = hessian.iter().flatten().copied().collect();
    let (eigs, _) = sym_eigen(4, &flat);
    let (v2, v4, v6) = (law.x_moment(2), law.x_moment(4), law.x_moment(6));
    CriticalReport {
        candidate,
        r_value,
        grad,
        grad_norm,
        is_critical: grad_norm < CRITICAL_GRAD_TOL,
        hessian,
        hessian_min_eig: eigs[0],
        margin_theta_tx: hessian[3][3] * hessian[1][1] - hessian[3][1] * hessian[3][1],
        margin_k_ty: hessian[0][0] * hessian[2][2] - hessian[0][2] * hessian[0][2],
        degenerate: (v2 * v6 - v4 * v4).abs() <= 1e-12 * (v4 * v4).max(1e-300),
        y_span: law.y_span(),
    }
}

impl std::fmt::Display for CriticalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = self.candidate;
        writeln!(
            f,
            "candidate = (k={}, t_x={}, t_y={}, theta={})",
            c.k, c.t_x, c.t_y, c.theta
        )?;
        writeln!(f, "r = {:.12e}", self.r_value)?;
        writeln!(f, "grad_norm = {:.6e}", self.grad_norm)?;
        writeln!(f, "is_critical = {}", self.is_critical)?;
        writeln!(f, "hessian_min_eig = {:.12e}", self.hessian_min_eig)?;
        writeln!(f, "margin_theta_tx = {:.12e}", self.margin_theta_tx)?;
        writeln!(f, "margin_k_ty = {:.12e}", self.margin_k_ty)?;
        writeln!(f, "degenerate = {}", self.degenerate)?;
        write!(f, "y_span = {}", self.y_span)
    }
}

// --- aligned and unaligned patch fitting ------------------------------------

/// Least-squares fit of (a, b, c) minimizing
/// sum (z - (a x^2 + c y^2 + 2 b x y)/2 - d)^2 via normal equations.
pub fn fit_aligned(samples: &[(Vec3, f64)]) -> Result<(f64, f64, f64)> {
    let mut m = [0.0; 9];
    let mut rhs = [0.0; 3];
    for &(p, d) in samples {
        let phi = [0.5 * p.x * p.x, p.x * p.y, 0.5 * p.y * p.y];
        let target = p.z - d;
        for i in 0..3 {
            rhs[i] += phi[i] * target;
            for j in 0..3 {
                m[i * 3 + j] += phi[i] * phi[j];
            }
        }
    }
    let sol = solve(3, &mut m, &mut rhs)?;
    Ok((sol[0], sol[1], sol[2]))
}

/// Result of gradient descent on the unaligned objective. `pose` maps sample
/// coordinates into the patch frame (p' = R p + t); `residual` is the mean
/// squared residual at the final iterate.
#[derive(Clone, Copy, Debug)]
pub struct PatchFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub pose: RigidTransform,
    pub residual: f64,
}

struct ObjGrad {
    value: f64,
    a: f64,
    b: f64,
    c: f64,
    t: Vec3,
    q: [f64; 4],
}

fn objective_grad(samples: &[(Vec3, f64)], a: f64, b: f64, c: f64, q: Quat, t: Vec3) -> ObjGrad {
    let rot = q.to_rotation().expect("unit quaternion");
    let jac = rotation_jacobian(q);
    let inv_n = 1.0 / samples.len() as f64;
    let mut g = ObjGrad {
        value: 0.0,
        a: 0.0,
        b: 0.0,
        c: 0.0,
        t: Vec3::ZERO,
        q: [0.0; 4],
    };
    for &(p, d) in samples {
        let pp = rot.mul_vec(p) + t;
        let h = 0.5 * (a * pp.x * pp.x + c * pp.y * pp.y) + b * pp.x * pp.y;
        let e = pp.z - h - d;
        g.value += e * e * inv_n;
        let w = 2.0 * e * inv_n;
        g.a -= w * 0.5 * pp.x * pp.x;
        g.b -= w * pp.x * pp.y;
        g.c -= w * 0.5 * pp.y * pp.y;
        let de_dp = vec3(-(a * pp.x + b * pp.y), -(b * pp.x + c * pp.y), 1.0);
        g.t = g.t + de_dp * w;
        for (slot, j) in jac.iter().enumerate() {
            g.q[slot] += w * de_dp.dot(j.mul_vec(p));
        }
    }
    // Project the raw quaternion gradient onto the unit-sphere tangent; the
    // iterate is renormalized after every step.
    let dot = g.q[0] * q.w + g.q[1] * q.x + g.q[2] * q.y + g.q[3] * q.z;
    g.q[0] -= dot * q.w;
    g.q[1] -= dot * q.x;
    g.q[2] -= dot * q.y;
    g.q[3] -= dot * q.z;
    g
}

fn descend(
    samples: &[(Vec3, f64)],
    init: (f64, f64, f64, RigidTransform),
    steps: usize,
    lr: f64,
    move_pose: bool,
) -> Result<PatchFit> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let (mut a, mut b, mut c) = (init.0, init.1, init.2);
    let mut q = init.3.rotation.normalized()?;
    let mut t = init.3.translation;
    for _ in 0..steps {
        let g = objective_grad(samples, a, b, c, q, t);
        a -= lr * g.a;
        b -= lr * g.b;
        c -= lr * g.c;
        if move_pose {
            t = t - g.t * lr;
            q = Quat {
                w: q.w - lr * g.q[0],
                x: q.x - lr * g.q[1],
                y: q.y - lr * g.q[2],
                z: q.z - lr * g.q[3],
            }
            .normalized()?;
        }
    }
    let residual = objective_grad(samples, a, b, c, q, t).value;
    Ok(PatchFit {
        a,
        b,
        c,
        pose: RigidTransform::new(q, t),
        residual,
    })
}

/// Plain gradient descent on the unaligned objective
/// mean (z' - (a x'^2 + c y'^2 + 2 b x' y')/2 - d)^2 with p' = R p + t; all
/// of (a, b, c, R, t) move.
pub fn fit_unaligned(
    samples: &[(Vec3, f64)],
    init: (f64, f64, f64, RigidTransform),
    steps: usize,
    lr: f64,
) -> Result<PatchFit> {
    descend(samples, init, steps, lr, true)
}

/// Same objective with the pose frozen at its initial value; restricted to
/// an identity pose this is the aligned problem.
pub fn fit_unaligned_frozen(
    samples: &[(Vec3, f64)],
    init: (f64, f64, f64, RigidTransform),
    steps: usize,
    lr: f64,
) -> Result<PatchFit> {
    descend(samples, init, steps, lr, false)
}

/// Canonical multistart demo problem: the bowl z = (x² + y²)/2 sampled over
/// the unit square with offset targets d ~ U[0, d_hi]. The flipped pose is a
/// spurious basin whose residual floor is 4·Var(d), far above the true basin.
pub fn bowl_problem(n: usize, seed: u64, d_hi: f64) -> Vec<(Vec3, f64)> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let (u, v) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
            let d = rng.range(0.0, d_hi);
            (vec3(u, v, 0.5 * (u * u + v * v) + d), d)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualCluster {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct MultistartReport {
    /// Fits sorted by residual, one per start.
    pub fits: Vec<PatchFit>,
    /// Residual clusters split where consecutive residuals jump by >10x.
    pub clusters: Vec<ResidualCluster>,
}

/// Runs `starts` random initializations of [`fit_unaligned`] in parallel with
/// per-start seeds and clusters the final residuals.
pub fn multistart_unaligned(
    samples: &[(Vec3, f64)],
    starts: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<MultistartReport> {
    let fits = (0..starts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(child_seed(seed, i as u64));
            let abc = (
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
            );
            let q = Quat {
                w: rng.normal(),
                x: rng.normal(),
                y: rng.normal(),
                z: rng.normal(),
            };
            let t = vec3(
                rng.range(-0.3, 0.3),
                rng.range(-0.3, 0.3),
                rng.range(-0.3, 0.3),
            );
            fit_unaligned(samples, (abc.0, abc.1, abc.2, RigidTransform::new(q, t)), steps, lr)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fits = fits;
    fits.sort_by(|x, y| x.residual.partial_cmp(&y.residual).unwrap());
    let mut clusters: Vec<ResidualCluster> = Vec::new();
    for f in &fits {
        match clusters.last_mut() {
            Some(cl) if f.residual <= 10.0 * cl.hi.max(1e-14) => {
                cl.hi = f.residual;
                cl.count += 1;
            }
            _ => clusters.push(ResidualCluster {
                lo: f.residual,
                hi: f.residual,
                count: 1,
            }),
        }
    }
    Ok(MultistartReport { fits, clusters })
}

impl std::fmt::Display for MultistartReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "starts = {}", self.fits.len())?;
        writeln!(f, "clusters = {}", self.clusters.len())?;
        for (i, cl) in self.clusters.iter().enumerate() {
            writeln!(
                f,
                "cluster[{i}] residuals in [{:.6e}, {:.6e}] count {}",
                cl.lo, cl.hi, cl.count
            )?;
        }
        let best = self.fits.first().expect("at least one start");
        write!(
            f,
            "best: a={:.6} b={:.6} c={:.6} residual={:.6e}",
            best.a, best.b, best.c, best.residual
        )
    }
}

// --- order-of-accuracy sweep -------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchFamily {
    Plane,
    Quadratic,
    SharpEdge,
}

impl std::fmt::Display for PatchFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatchFamily::Plane => "plane",
            PatchFamily::Quadratic => "quadratic",
            PatchFamily::SharpEdge => "sharp-edge",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SweepPoint {
    pub radius: f64,
    pub max_error: f64,
}

#[derive(Clone, Debug)]
pub struct SlopeReport {
    pub family: PatchFamily,
    pub points: Vec<SweepPoint>,
    /// Log-log least-squares slope; `None` when the family is represented
    /// exactly and the errors are at machine precision.
    pub slope: Option<f64>,
}

impl SlopeReport {
    pub fn is_exact(&self) -> bool {
        self.slope.is_none()
    }
}

impl std::fmt::Display for SlopeReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "family = {}", self.family)?;
        for p in &self.points {
            writeln!(f, "radius {:.6}  max_error {:.6e}", p.radius, p.max_error)?;
        }
        match self.slope {
            Some(s) => write!(f, "slope = {s:.4}"),
            None => write!(f, "slope = exact"),
        }
    }
}

const EXACT_ERROR_FLOOR: f64 = 1e-13;

/// One |approx - exact| draw. The sharp-edge slopes e_i shrink with the
/// radius: the piecewise approximation is a small-slope statement and has a
/// first-order error term otherwise.
fn sweep_trial(family: PatchFamily, radius: f64, seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let dir = loop {
        let v = vec3(rng.normal(), rng.normal(), rng.normal());
        if v.norm() > 1e-9 {
            break v.normalized();
        }
    };
    let p = dir * (radius * rng.uniform().cbrt());
    match family {
        PatchFamily::Plane => {
            let patch = QuadraticPatch::new(0.0, 0.0, 0.0, 1.0);
            let exact = match patch.sdf_exact(p, 1e-12) {
                Ok(d) | Err(Error::NonConvergence { best: d }) => d,
                Err(e) => panic!("patch oracle: {e}"),
            };
            (exact - patch.sdf_approx(p).unwrap()).abs()
        }
        PatchFamily::Quadratic => {
            let patch = QuadraticPatch::new(
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                rng.range(-2.0, 2.0),
                1.0,
            );
            let exact = match patch.sdf_exact(p, 1e-12) {
                Ok(d) | Err(Error::NonConvergence { best: d }) => d,
                Err(e) => panic!("patch oracle: {e}"),
            };
            (exact - patch.sdf_approx(p).unwrap()).abs()
        }
        PatchFamily::SharpEdge => {
            let patch = SharpEdgePatch {
                a1: rng.range(-2.0, 2.0),
                b1: rng.range(-2.0, 2.0),
                e1: radius * rng.range(-1.0, 1.0),
                a2: rng.range(-2.0, 2.0),
                b2: rng.range(-2.0, 2.0),
                e2: radius * rng.range(-1.0, 1.0),
                c1: rng.range(-2.0, 2.0),
                radius: 1.0,
            };
            let exact = match patch.sdf_exact(p, 1e-12) {
                Ok(d) | Err(Error::NonConvergence { best: d }) => d,
                Err(e) => panic!("patch oracle: {e}"),
            };
            (exact - patch.sdf_approx(p)).abs()
        }
    }
}

/// Max |approx - exact| over `trials` random (patch, point) draws per radius,
/// plus the log-log least-squares slope across radii.
pub fn approx_error_sweep(
    family: PatchFamily,
    radii: &[f64],
    trials: usize,
    seed: u64,
) -> SlopeReport {
    assert!(radii.len() >= 3, "need at least 3 radii");
    assert!(
        radii.windows(2).all(|w| w[1] < w[0]),
        "radii must be strictly decreasing"
    );
    let points: Vec<SweepPoint> = radii
        .iter()
        .enumerate()
        .map(|(i, &radius)| {
            let level = child_seed(seed, i as u64);
            let max_error = (0..trials)
                .into_par_iter()
                .map(|t| sweep_trial(family, radius, child_seed(level, t as u64)))
                .reduce(|| 0.0, f64::max);
            SweepPoint { radius, max_error }
        })
        .collect();

    let slope = if points.iter().all(|p| p.max_error < EXACT_ERROR_FLOOR) {
        None
    } else {
        let xs: Vec<f64> = points.iter().map(|p| p.radius.ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.max_error.max(1e-300).ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        Some(num / den)
    };
    SlopeReport {
        family,
        points,
        slope,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn probe_laws() -> Vec<SampleLaw> {
        vec![
            SampleLaw::uniform(1.0),
            SampleLaw::new(XDist::TwoPoint, 0.0, 0.02, 0.7).unwrap(),
            SampleLaw::new(
                XDist::Grid(vec![(-0.5, 1.0), (0.2, 2.0), (0.9, 0.5)]),
                -0.01,
                0.03,
                -1.3,
            )
            .unwrap(),
        ]
    }

    #[test]
    fn gauss_legendre_integrates_monomials_exactly() {
        let nodes = gauss_legendre(QUAD_ORDER);
        let wsum: f64 = nodes.iter().map(|n| n.1).sum();
        assert_relative_eq!(wsum, 2.0, epsilon = 1e-14);
        for k in 0..=31u32 {
            let got: f64 = nodes.iter().map(|&(x, w)| w * x.powi(k as i32)).sum();
            let expect = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
            assert!((got - expect).abs() < 1e-13, "degree {k}: {got} vs {expect}");
        }
    }

    #[test]
    fn ground_truth_is_global_minimum() {
        for law in probe_laws() {
            let truth = LandscapePoint {
                k: law.k0,
                t_x: 0.0,
                t_y: 0.0,
                theta: 0.0,
            };
            assert!(landscape_r(truth, &law) < 1e-30);
            let (g, _) = landscape_grad_hess(truth, &law);
            assert!(g.iter().all(|v| v.abs() < 1e-14), "{g:?}");
        }
    }

    #[test]
    fn candidate_r_matches_variance_identity() {
        // r at the spurious point equals E[(2c - 2y)^2] = 4 Var(y).
        let law = SampleLaw::uniform(1.0);
        let r = landscape_r(law.candidate(), &law);
        assert_relative_eq!(r, 1.0 / 7500.0, epsilon = 1e-16);
        assert_relative_eq!(r, 1.3333e-4, epsilon = 1e-7);
    }

    #[test]
    fn candidate_gradient_vanishes_for_centered_x() {
        for law in [SampleLaw::uniform(1.0), SampleLaw::uniform(0.4)] {
            let (g, _) = landscape_grad_hess(law.candidate(), &law);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 1e-12, "grad {g:?}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_from(5);
        let law = SampleLaw::uniform(1.0);
        for _ in 0..20 {
            let pt = LandscapePoint {
                k: rng.range(-2.0, 2.0),
                t_x: rng.range(-1.0, 1.0),
                t_y: rng.range(-1.0, 1.0),
                theta: rng.range(-3.0, 3.0),
            };
            let (g, _) = landscape_grad_hess(pt, &law);
            let h = 1e-6;
            for i in 0..4 {
                let shift = |s: f64| {
                    let mut q = pt;
                    match i {
                        0 => q.k += s,
                        1 => q.t_x += s,
                        2 => q.t_y += s,
                        _ => q.theta += s,
                    }
                    landscape_r(q, &law)
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                let scale = g[i].abs().max(fd.abs()).max(1e-6);
                assert!((g[i] - fd).abs() / scale < 1e-6, "i={i} {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let mut rng = rng_from(8);
        for law in probe_laws() {
            let pt = LandscapePoint {
                k: rng.range(-1.5, 1.5),
                t_x: rng.range(-0.8, 0.8),
                t_y: rng.range(-0.8, 0.8),
                theta: rng.range(-3.0, 3.0),
            };
            let (_, hess) = landscape_grad_hess(pt, &law);
            let h = 1e-5;
            let grad_at = |s: [f64; 4]| {
                let q = LandscapePoint {
                    k: pt.k + s[0],
                    t_x: pt.t_x + s[1],
                    t_y: pt.t_y + s[2],
                    theta: pt.theta + s[3],
                };
                landscape_grad_hess(q, &law).0
            };
            for j in 0..4 {
                let mut plus = [0.0; 4];
                plus[j] = h;
                let mut minus = [0.0; 4];
                minus[j] = -h;
                let (gp, gm) = (grad_at(plus), grad_at(minus));
                for i in 0..4 {
                    let fd = (gp[i] - gm[i]) / (2.0 * h);
                    assert!(
                        (hess[i][j] - fd).abs() < 1e-5 * hess[i][j].abs().max(fd.abs()).max(1.0),
                        "H[{i}][{j}] {} vs {fd}",
                        hess[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn candidate_hessian_matches_closed_form() {
        // Exact rational entries for x ~ U[-1,1], y ~ U[0, 0.02], k0 = 1,
        // ordered (k, t_x, t_y, theta).
        let law = SampleLaw::uniform(1.0);
        let (_, h) = landscape_grad_hess(law.candidate(), &law);
        let expect = [
            [2.0 / 5.0, 0.0, -2.0 / 3.0, 0.0],
            [0.0, 8.0 / 3.0, 0.0, 11099.0 / 3750.0],
            [-2.0 / 3.0, 0.0, 2.0, 0.0],
            [0.0, 11099.0 / 3750.0, 0.0, 6828077.0 / 1968750.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!(
                    (h[i][j] - expect[i][j]).abs() < 1e-12,
                    "H[{i}][{j}] = {} expected {}",
                    h[i][j],
                    expect[i][j]
                );
            }
        }
    }

    #[test]
    fn generic_probe_matches_reference_values() {
        // Frozen from an exact symbolic integration of r for x ~ U[-1,1],
        // y ~ U[0,0.02], k0 = 1 at (k, t_x, t_y, theta) = (0.7, 0.1, -0.2, 0.3).
        let law = SampleLaw::uniform(1.0);
        let pt = LandscapePoint {
            k: 0.7,
            t_x: 0.1,
            t_y: -0.2,
            theta: 0.3,
        };
        assert_relative_eq!(
            landscape_r(pt, &law),
            0.07600290978108139,
            epsilon = 1e-13
        );
        let (g, _) = landscape_grad_hess(pt, &law);
        let expect = [
            0.06379813563766257,
            -0.33725914683423525,
            -0.20078899479797366,
            0.47316492734457016,
        ];
        for i in 0..4 {
            assert_relative_eq!(g[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn theta_perturbation_increases_r() {
        let law = SampleLaw::uniform(1.0);
        let cand = law.candidate();
        let r0 = landscape_r(cand, &law);
        for s in [1e-3, -1e-3] {
            let mut pt = cand;
            pt.theta += s;
            assert!(landscape_r(pt, &law) > r0);
        }
    }

    #[test]
    fn critical_report_uniform_law() {
        // Frozen minimum eigenvalues of the candidate Hessian and the two
        // block-determinant margins (exact values 144286979/295312500, 16/45).
        let expected_eig = [
            (0.5, 0.004261571099621116),
            (1.0, 0.08070287782432616),
            (2.0, 0.15863337654577947),
        ];
        for (k0, eig) in expected_eig {
            let rep = verify_critical_point(&SampleLaw::uniform(k0));
            assert!(rep.is_critical, "k0 {k0}: grad {:?}", rep.grad);
            assert_relative_eq!(rep.hessian_min_eig, eig, epsilon = 1e-9);
            assert!(!rep.degenerate);
        }
        let rep = verify_critical_point(&SampleLaw::uniform(1.0));
        assert_relative_eq!(rep.margin_theta_tx, 0.48859082835978836, epsilon = 1e-12);
        assert_relative_eq!(rep.margin_k_ty, 16.0 / 45.0, epsilon = 1e-12);
        assert_relative_eq!(rep.r_value, 1.0 / 7500.0, epsilon = 1e-14);
    }

    #[test]
    fn two_point_law_is_degenerate() {
        // V2 = V4 = V6 = 1 puts the Cauchy inequality at equality; the
        // (k, t_y) block determinant collapses to exactly zero and the
        // Hessian develops a null direction.
        let law = SampleLaw::new(XDist::TwoPoint, 0.0, 0.02, 1.0).unwrap();
        let rep = verify_critical_point(&law);
        assert!(rep.is_critical);
        assert!(rep.degenerate);
        assert!(rep.margin_k_ty.abs() < 1e-14, "{}", rep.margin_k_ty);
        assert!(rep.hessian_min_eig.abs() < 1e-12, "{}", rep.hessian_min_eig);
    }

    #[test]
    fn skewed_mean_breaks_criticality() {
        // E[x] = 0.3: the theta component of the gradient at the candidate
        // is exactly 8 k0 E[x] Var(y) = 8e-5.
        let law = SampleLaw::new(
            XDist::Grid(vec![(-0.4, 1.0), (1.0, 1.0)]),
            0.0,
            0.02,
            1.0,
        )
        .unwrap();
        let rep = verify_critical_point(&law);
        assert!(!rep.is_critical);
        assert!(rep.grad_norm > 1e-6);
        for i in 0..3 {
            assert!(rep.grad[i].abs() < 1e-13, "grad[{i}] = {}", rep.grad[i]);
        }
        assert_relative_eq!(rep.grad[3], 8e-5, epsilon = 1e-12);
    }

    #[test]
    fn odd_moments_affect_hessian_blocks_not_criticality() {
        // Atoms {-1, 1/2} with weights {1/3, 2/3}: E[x] = 0 but E[x^3] != 0.
        // The candidate stays critical; the hypothesis E[x^3] = 0 is what
        // kills the (k, t_x) Hessian coupling, not the gradient.
        let law = SampleLaw::new(
            XDist::Grid(vec![(-1.0, 1.0), (0.5, 2.0)]),
            0.0,
            0.02,
            1.0,
        )
        .unwrap();
        assert!(law.x_moment(1).abs() < 1e-15);
        assert!(law.x_moment(3).abs() > 0.1);
        let rep = verify_critical_point(&law);
        assert!(rep.is_critical, "grad {:?}", rep.grad);
        // H[k][t_x] = 4 k0 E[x^3] at the candidate.
        assert_relative_eq!(rep.hessian[0][1], 4.0 * law.x_moment(3), epsilon = 1e-12);
        assert!(rep.hessian[0][1].abs() > 1e-6);
    }

    // -- fitting ---------------------------------------------------------

    fn aligned_samples(
        a: f64,
        b: f64,
        c: f64,
        n: usize,
        seed: u64,
        noise: f64,
    ) -> Vec<(Vec3, f64)> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                let (x, y) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
                let d = rng.range(-0.1, 0.1);
                let z = 0.5 * (a * x * x + c * y * y) + b * x * y + d + noise * rng.normal();
                (vec3(x, y, z), d)
            })
            .collect()
    }

    #[test]
    fn aligned_fit_recovers_exactly() {
        let samples = aligned_samples(2.0, -1.0, 0.5, 60, 3, 0.0);
        let (a, b, c) = fit_aligned(&samples).unwrap();
        assert_relative_eq!(a, 2.0, epsilon = 1e-10);
        assert_relative_eq!(b, -1.0, epsilon = 1e-10);
        assert_relative_eq!(c, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn aligned_fit_needs_three_samples() {
        let samples = aligned_samples(1.0, 0.0, 1.0, 2, 4, 0.0);
        assert!(matches!(fit_aligned(&samples), Err(Error::RankDeficient)));
    }

    #[test]
    fn aligned_fit_matches_spectral_pseudoinverse() {
        // Same normal matrix inverted through its eigendecomposition instead
        // of elimination.
        let samples = aligned_samples(1.2, 0.3, -0.8, 120, 9, 0.01);
        let (a, b, c) = fit_aligned(&samples).unwrap();

        let mut m = [0.0; 9];
        let mut rhs = [0.0; 3];
        for &(p, d) in &samples {
            let phi = [0.5 * p.x * p.x, p.x * p.y, 0.5 * p.y * p.y];
            for i in 0..3 {
                rhs[i] += phi[i] * (p.z - d);
                for j in 0..3 {
                    m[i * 3 + j] += phi[i] * phi[j];
                }
            }
        }
        let (vals, vecs) = sym_eigen(3, &m);
        let mut sol = [0.0; 3];
        for e in 0..3 {
            let v = &vecs[e * 3..e * 3 + 3];
            let proj = (0..3).map(|i| v[i] * rhs[i]).sum::<f64>() / vals[e];
            for i in 0..3 {
                sol[i] += proj * v[i];
            }
        }
        assert_relative_eq!(a, sol[0], epsilon = 1e-8);
        assert_relative_eq!(b, sol[1], epsilon = 1e-8);
        assert_relative_eq!(c, sol[2], epsilon = 1e-8);
    }

    fn posed_samples(
        a: f64,
        b: f64,
        c: f64,
        pose: RigidTransform,
        n: usize,
        seed: u64,
        d_hi: f64,
    ) -> Vec<(Vec3, f64)> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| {
                let (u, v) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
                let d = rng.range(0.0, d_hi);
                let h = 0.5 * (a * u * u + c * v * v) + b * u * v;
                let local = vec3(u, v, h + d);
                (pose.inverse_apply(local).unwrap(), d)
            })
            .collect()
    }

    #[test]
    fn unaligned_fit_is_stationary_at_ground_truth() {
        let pose = RigidTransform::new(
            Quat::from_axis_angle(vec3(0.2, 1.0, -0.4), 0.8),
            vec3(0.1, -0.2, 0.3),
        );
        let samples = posed_samples(1.5, -0.4, 0.9, pose, 80, 12, 0.0);
        let init = (1.5, -0.4, 0.9, pose);
        let fit = fit_unaligned(&samples, init, 200, 0.05).unwrap();
        assert!(fit.residual < 1e-10, "residual {}", fit.residual);
        let moved = (fit.a - 1.5).abs()
            + (fit.b + 0.4).abs()
            + (fit.c - 0.9).abs()
            + (fit.pose.translation - pose.translation).norm();
        assert!(moved < 1e-6, "moved {moved}");
    }

    #[test]
    fn unaligned_gradient_matches_finite_differences() {
        let samples = posed_samples(
            0.8,
            0.2,
            -0.5,
            RigidTransform::new(Quat::from_axis_angle(vec3(1.0, 0.3, 0.1), 0.5), Vec3::ZERO),
            24,
            6,
            0.05,
        );
        let (a, b, c) = (0.4, -0.1, 0.7);
        let q = Quat {
            w: 0.9,
            x: 0.2,
            y: -0.3,
            z: 0.1,
        }
        .normalized()
        .unwrap();
        let t = vec3(0.05, -0.1, 0.2);
        let g = objective_grad(&samples, a, b, c, q, t);

        let value = |a: f64, b: f64, c: f64, q: Quat, t: Vec3| {
            let rot = q.normalized().unwrap().to_rotation().unwrap();
            samples
                .iter()
                .map(|&(p, d)| {
                    let pp = rot.mul_vec(p) + t;
                    let e = pp.z - 0.5 * (a * pp.x * pp.x + c * pp.y * pp.y) - b * pp.x * pp.y - d;
                    e * e
                })
                .sum::<f64>()
                / samples.len() as f64
        };
        let h = 1e-6;
        let check = |analytic: f64, up: f64, down: f64, what: &str| {
            let fd = (up - down) / (2.0 * h);
            assert!(
                (analytic - fd).abs() < 1e-6 * analytic.abs().max(fd.abs()).max(1e-3),
                "{what}: {analytic} vs {fd}"
            );
        };
        check(g.a, value(a + h, b, c, q, t), value(a - h, b, c, q, t), "a");
        check(g.b, value(a, b + h, c, q, t), value(a, b - h, c, q, t), "b");
        check(g.c, value(a, b, c + h, q, t), value(a, b, c - h, q, t), "c");
        for i in 0..3 {
            let mut dp = Vec3::ZERO;
            match i {
                0 => dp.x = h,
                1 => dp.y = h,
                _ => dp.z = h,
            }
            check(
                g.t.get(i),
                value(a, b, c, q, t + dp),
                value(a, b, c, q, t - dp),
                "t",
            );
        }
        for i in 0..4 {
            let bump = |s: f64| {
                let mut qq = q;
                match i {
                    0 => qq.w += s,
                    1 => qq.x += s,
                    2 => qq.y += s,
                    _ => qq.z += s,
                }
                value(a, b, c, qq, t)
            };
            check(g.q[i], bump(h), bump(-h), "q");
        }
    }

    #[test]
    fn unaligned_reduces_to_aligned_on_identity_data() {
        let samples = aligned_samples(1.8, -0.6, 0.4, 60, 21, 0.0);
        let aligned = fit_aligned(&samples).unwrap();
        let init = (aligned.0, aligned.1, aligned.2, RigidTransform::IDENTITY);
        let fit = fit_unaligned(&samples, init, 500, 0.05).unwrap();
        assert!((fit.a - aligned.0).abs() < 1e-6);
        assert!((fit.b - aligned.1).abs() < 1e-6);
        assert!((fit.c - aligned.2).abs() < 1e-6);
        assert!(fit.residual < 1e-10);
    }

    #[test]
    fn frozen_pose_descent_matches_aligned_least_squares() {
        let samples = aligned_samples(0.9, 0.25, -1.1, 100, 30, 0.01);
        let aligned = fit_aligned(&samples).unwrap();
        let aligned_residual = samples
            .iter()
            .map(|&(p, d)| {
                let e = p.z
                    - 0.5 * (aligned.0 * p.x * p.x + aligned.2 * p.y * p.y)
                    - aligned.1 * p.x * p.y
                    - d;
                e * e
            })
            .sum::<f64>()
            / samples.len() as f64;
        let fit =
            fit_unaligned_frozen(&samples, (0.0, 0.0, 0.0, RigidTransform::IDENTITY), 4000, 0.4)
                .unwrap();
        assert!(
            (fit.residual - aligned_residual).abs() < 1e-8,
            "{} vs {aligned_residual}",
            fit.residual
        );
    }

    #[test]
    fn multistart_exposes_residual_clusters() {
        let samples = bowl_problem(80, 2, 0.02);
        let report = multistart_unaligned(&samples, 20, 40000, 0.08, 17).unwrap();
        assert!(
            report.clusters.len() >= 2,
            "residuals {:?}",
            report.fits.iter().map(|f| f.residual).collect::<Vec<_>>()
        );
        let best = report.clusters.first().unwrap();
        let worst = report.clusters.last().unwrap();
        assert!(worst.lo > 10.0 * best.hi.max(1e-14));
    }

    // -- order-of-accuracy sweep -------------------------------------------

    #[test]
    fn quadratic_family_error_is_third_order() {
        let report = approx_error_sweep(
            PatchFamily::Quadratic,
            &[0.2, 0.1, 0.05, 0.025],
            1000,
            40,
        );
        let slope = report.slope.expect("not exact");
        assert!((2.5..=3.5).contains(&slope), "slope {slope}\n{report}");
    }

    #[test]
    fn sharp_edge_family_error_is_third_order() {
        let report = approx_error_sweep(
            PatchFamily::SharpEdge,
            &[0.2, 0.1, 0.05, 0.025],
            1000,
            41,
        );
        let slope = report.slope.expect("not exact");
        assert!((2.5..=3.5).contains(&slope), "slope {slope}\n{report}");
    }

    #[test]
    fn plane_family_is_exact() {
        let report = approx_error_sweep(PatchFamily::Plane, &[0.2, 0.1, 0.05], 200, 42);
        assert!(report.is_exact());
        assert!(report.points.iter().all(|p| p.max_error < 1e-13));
    }
}
