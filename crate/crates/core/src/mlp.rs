//! The shared decoder: a ReLU MLP whose trailing layers may be quadratic in
//! their input, with exact reverse-mode gradients through the parameters, the
//! latent code, and the cell frame (quaternion normalization included), plus
//! the Adam optimizer used by all training paths.
//!
//! Parameters are kept on the f32 grid (stored as f64, rounded through f32
//! after every update) so checkpoints round-trip bit-exactly; all arithmetic
//! runs in f64.

use crate::binio::*;
use crate::error::{Error, Result};
use crate::field::CoordinateFrame;
use crate::geom::{rotation_jacobian, vec3, Vec3};
use crate::rng::{rng_from, RngExt};
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        expected: expected.into(),
        got: got.into(),
    }
}

/// Layer widths m_0..=m_L plus the number of trailing quadratic layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
    pub k: usize,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>, k: usize) -> Result<MlpConfig> {
        let c = MlpConfig { widths, k };
        c.validate()?;
        Ok(c)
    }

    /// `depth` layers of width `hidden` between the (3 + latent) input and the
    /// scalar output.
    pub fn standard(latent_len: usize, depth: usize, hidden: usize, k: usize) -> Result<MlpConfig> {
        if depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        let mut widths = vec![3 + latent_len];
        widths.extend(std::iter::repeat(hidden).take(depth - 1));
        widths.push(1);
        MlpConfig::new(widths, k)
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("need at least one layer".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("zero layer width".into()));
        }
        if self.widths[0] < 3 {
            return Err(Error::Config(format!(
                "input width {} cannot hold a 3-d coordinate",
                self.widths[0]
            )));
        }
        if self.k > self.depth() {
            return Err(Error::Config(format!(
                "k={} exceeds depth {}",
                self.k,
                self.depth()
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn latent_len(&self) -> usize {
        self.widths[0] - 3
    }

    /// Layer `l` (0-based) applies a quadratic map iff it is among the last k.
    pub fn is_quadratic(&self, l: usize) -> bool {
        l + self.k >= self.depth()
    }

    pub fn layer_param_count(&self, l: usize) -> usize {
        let (rows, cols) = (self.widths[l + 1], self.widths[l]);
        let linear = rows * cols + rows;
        if self.is_quadratic(l) {
            linear + cols * rows * cols
        } else {
            linear
        }
    }

    pub fn param_count(&self) -> usize {
        (0..self.depth()).map(|l| self.layer_param_count(l)).sum()
    }
}

/// y = A z + b with A given row-major as rows = b.len(), cols = z.len().
pub fn linear_forward(a: &[f64], b: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = (b.len(), z.len());
    if a.len() != rows * cols {
        return Err(shape_err(format!("{rows}x{cols} matrix"), format!("{} entries", a.len())));
    }
    let mut out = b.to_vec();
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (w, x) in row.iter().zip(z) {
            acc += w * x;
        }
        out[i] += acc;
    }
    Ok(out)
}

/// y_i = z^T T[:,i,:] z + (A z + b)_i; T is indexed [p][i][q] row-major.
pub fn quadratic_forward(t: &[f64], a: &[f64], b: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = (b.len(), z.len());
    if t.len() != cols * rows * cols {
        return Err(shape_err(
            format!("{cols}x{rows}x{cols} tensor"),
            format!("{} entries", t.len()),
        ));
    }
    let mut out = linear_forward(a, b, z)?;
    for p in 0..cols {
        let zp = z[p];
        if zp == 0.0 {
            continue;
        }
        for i in 0..rows {
            let slab = &t[(p * rows + i) * cols..(p * rows + i + 1) * cols];
            let mut acc = 0.0;
            for (w, x) in slab.iter().zip(z) {
                acc += w * x;
            }
            out[i] += zp * acc;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct LayerView {
    quad: bool,
    rows: usize,
    cols: usize,
    t: usize,
    a: usize,
    b: usize,
    end: usize,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    config: MlpConfig,
    params: Vec<f64>,
    views: Vec<LayerView>,
}

fn build_views(config: &MlpConfig) -> Vec<LayerView> {
    let mut views = Vec::with_capacity(config.depth());
    let mut off = 0;
    for l in 0..config.depth() {
        let (rows, cols) = (config.widths[l + 1], config.widths[l]);
        let quad = config.is_quadratic(l);
        let t = off;
        let a = t + if quad { cols * rows * cols } else { 0 };
        let b = a + rows * cols;
        let end = b + rows;
        views.push(LayerView {
            quad,
            rows,
            cols,
            t,
            a,
            b,
            end,
        });
        off = end;
    }
    views
}

fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl Mlp {
    /// Kaiming-uniform weights, zero biases, zero quadratic tensors — training
    /// starts in the familiar linear regime.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Mlp> {
        config.validate()?;
        let views = build_views(&config);
        let mut params = vec![0.0; views.last().map_or(0, |v| v.end)];
        let mut rng = rng_from(seed);
        for v in &views {
            let s = (6.0 / v.cols as f64).sqrt();
            for w in &mut params[v.a..v.b] {
                *w = snap_f32(rng.range(-s, s));
            }
        }
        Ok(Mlp {
            config,
            params,
            views,
        })
    }

    pub fn from_parts(config: MlpConfig, params: Vec<f64>) -> Result<Mlp> {
        config.validate()?;
        let views = build_views(&config);
        let expected = views.last().map_or(0, |v| v.end);
        if params.len() != expected {
            return Err(shape_err(
                format!("{expected} parameters"),
                format!("{}", params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        let params = params.into_iter().map(snap_f32).collect();
        Ok(Mlp {
            config,
            params,
            views,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Restore the storage invariant after an in-place update.
    pub fn round_params_f32(&mut self) {
        for p in &mut self.params {
            *p = snap_f32(*p);
        }
    }

    pub fn input_len(&self) -> usize {
        self.config.widths[0]
    }

    fn layer_forward(&self, v: &LayerView, z: &[f64]) -> Result<Vec<f64>> {
        let a = &self.params[v.a..v.b];
        let b = &self.params[v.b..v.end];
        if v.quad {
            quadratic_forward(&self.params[v.t..v.a], a, b, z)
        } else {
            linear_forward(a, b, z)
        }
    }

    /// Raw network output on a pre-assembled input vector.
    pub fn forward_vec(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.input_len() {
            return Err(shape_err(
                format!("input of {}", self.input_len()),
                format!("{}", input.len()),
            ));
        }
        let depth = self.views.len();
        let mut z = input.to_vec();
        for (l, v) in self.views.iter().enumerate() {
            let mut y = self.layer_forward(v, &z)?;
            if l + 1 < depth {
                for x in &mut y {
                    *x = x.max(0.0);
                }
            }
            z = y;
        }
        Ok(z[0])
    }

    /// Forward keeping each layer input and pre-activation for the backward
    /// sweep. `inputs[l]` feeds layer l; `preacts[l]` is its raw output.
    fn forward_trace(&self, input: &[f64]) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let depth = self.views.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut preacts = Vec::with_capacity(depth);
        let mut z = input.to_vec();
        for (l, v) in self.views.iter().enumerate() {
            let y = self.layer_forward(v, &z)?;
            inputs.push(z);
            preacts.push(y.clone());
            z = y;
            if l + 1 < depth {
                for x in &mut z {
                    *x = x.max(0.0);
                }
            }
        }
        Ok((z[0], inputs, preacts))
    }

    fn assemble_input(&self, frame: &CoordinateFrame, latent: &[f64], p: Vec3) -> Result<Vec<f64>> {
        let want = self.input_len() - 3;
        if latent.len() != want {
            return Err(shape_err(
                format!("latent of {want}"),
                format!("{}", latent.len()),
            ));
        }
        let x = frame.world_to_local(p)?;
        let mut input = Vec::with_capacity(self.input_len());
        input.extend_from_slice(&[x.x, x.y, x.z]);
        input.extend_from_slice(latent);
        Ok(input)
    }

    /// Decode the SDF at world point `p` seen through a cell's frame.
    pub fn predict(&self, frame: &CoordinateFrame, latent: &[f64], p: Vec3) -> Result<f64> {
        self.forward_vec(&self.assemble_input(frame, latent, p)?)
    }

    /// L1 gradients of |prediction - target| with respect to every trainable
    /// quantity. The subgradient at zero residual is zero throughout.
    pub fn backward(
        &self,
        frame: &CoordinateFrame,
        latent: &[f64],
        p: Vec3,
        target: f64,
    ) -> Result<BackwardOut> {
        let input = self.assemble_input(frame, latent, p)?;
        let (out, inputs, preacts) = self.forward_trace(&input)?;
        let r = out - target;
        let s = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };

        let mut mlp = vec![0.0; self.params.len()];
        let mut dy = vec![s];
        for (l, v) in self.views.iter().enumerate().rev() {
            let z = &inputs[l];
            let mut dz = vec![0.0; v.cols];
            for i in 0..v.rows {
                let g = dy[i];
                if g != 0.0 {
                    mlp[v.b + i] += g;
                    let arow = v.a + i * v.cols;
                    for (j, &zj) in z.iter().enumerate() {
                        mlp[arow + j] += g * zj;
                        dz[j] += g * self.params[arow + j];
                    }
                }
            }
            if v.quad {
                for p_idx in 0..v.cols {
                    let zp = z[p_idx];
                    for i in 0..v.rows {
                        let g = dy[i];
                        if g == 0.0 {
                            continue;
                        }
                        let slab = (p_idx * v.rows + i) * v.cols;
                        for (q, &zq) in z.iter().enumerate() {
                            mlp[v.t + slab + q] += g * zp * zq;
                            // d(z^T T_i z)/dz_p picks up T[p,i,q] z_q here and
                            // T[q,i,p] z_q on the mirrored visit.
                            dz[p_idx] += g * self.params[v.t + slab + q] * zq;
                            dz[q] += g * self.params[v.t + slab + q] * zp;
                        }
                    }
                }
            }
            if l > 0 {
                for (j, x) in dz.iter_mut().enumerate() {
                    if preacts[l - 1][j] <= 0.0 {
                        *x = 0.0;
                    }
                }
            }
            dy = dz;
        }

        let gx = vec3(dy[0], dy[1], dy[2]);
        let latent_grad = dy[3..].to_vec();

        let rot = frame.rotation_matrix()?;
        let origin = -rot.mul_vec(gx);
        let qhat = frame.rotation.normalized()?;
        let jac = rotation_jacobian(qhat);
        let w = p - frame.origin;
        let mut dq_unit = [0.0; 4];
        for (a, j) in jac.iter().enumerate() {
            dq_unit[a] = j.transpose_mul_vec(w).dot(gx);
        }
        // Chain through q_hat = q / |q|: (I - q_hat q_hat^T) / |q|.
        let qn = frame.rotation.norm();
        let qh = [qhat.w, qhat.x, qhat.y, qhat.z];
        let dot: f64 = (0..4).map(|a| dq_unit[a] * qh[a]).sum();
        let mut quat = [0.0; 4];
        for b in 0..4 {
            quat[b] = (dq_unit[b] - dot * qh[b]) / qn;
        }

        Ok(BackwardOut {
            loss: r.abs(),
            prediction: out,
            mlp,
            latent: latent_grad,
            quat,
            origin,
        })
    }

    /// Depth, k, widths, then the flat f32 parameters; shared by the decoder
    /// file and the training checkpoint.
    pub(crate) fn write_body(&self, w: &mut impl std::io::Write) -> Result<()> {
        write_u32(w, self.config.depth() as u32)?;
        write_u32(w, self.config.k as u32)?;
        for &width in &self.config.widths {
            write_u32(w, width as u32)?;
        }
        for &p in &self.params {
            write_f32(w, p as f32)?;
        }
        Ok(())
    }

    pub(crate) fn read_body(r: &mut impl Read) -> Result<Mlp> {
        let depth = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        if depth == 0 || depth > 64 {
            return Err(Error::Format(format!("implausible depth {depth}")));
        }
        let mut widths = Vec::with_capacity(depth + 1);
        for _ in 0..depth + 1 {
            widths.push(read_u32(r)? as usize);
        }
        let config = MlpConfig::new(widths, k)?;
        let views = build_views(&config);
        let expected = views.last().map_or(0, |v| v.end);
        let mut params = Vec::with_capacity(expected);
        for _ in 0..expected {
            params.push(read_f32(r)? as f64);
        }
        Mlp::from_parts(config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        write_magic(&mut w, b"CFCK", 1)?;
        self.write_body(&mut w)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mlp> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let version = read_magic(&mut r, b"CFCK")?;
        expect_version(version, 1)?;
        let mlp = Mlp::read_body(&mut r)?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing data in checkpoint".into()));
        }
        Ok(mlp)
    }
}

#[derive(Clone, Debug)]
pub struct BackwardOut {
    pub loss: f64,
    pub prediction: f64,
    /// Flat, aligned with `Mlp::params`.
    pub mlp: Vec<f64>,
    pub latent: Vec<f64>,
    /// With respect to the raw (un-normalized) quaternion (w, x, y, z).
    pub quat: [f64; 4],
    pub origin: Vec3,
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != state.len() || grads.len() != state.len() {
        return Err(shape_err(
            format!("{} parameters", state.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

struct AuditCase {
    mlp: Mlp,
    frame: CoordinateFrame,
    latent: Vec<f64>,
    position: Vec3,
    target: f64,
}

impl AuditCase {
    fn loss(&self) -> f64 {
        (self
            .mlp
            .predict(&self.frame, &self.latent, self.position)
            .unwrap()
            - self.target)
            .abs()
    }
}

fn fd_slope(case: &mut AuditCase, set: impl Fn(&mut AuditCase, f64), base: f64) -> f64 {
    let h = 1e-5 * base.abs().max(1.0);
    set(case, base + h);
    let hi = case.loss();
    set(case, base - h);
    let lo = case.loss();
    set(case, base);
    (hi - lo) / (2.0 * h)
}

fn audit(case: &mut AuditCase, grads: &BackwardOut, param_probes: &[usize]) -> GradReport {
    let mut report = GradReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        pass: true,
    };
    let check = |analytic: f64, fd: f64, report: &mut GradReport| {
        report.checked += 1;
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        let rel = (analytic - fd).abs() / denom;
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel >= 1e-4 {
            report.failures += 1;
            report.pass = false;
        }
    };

    for &i in param_probes {
        let base = case.mlp.params()[i];
        let fd = fd_slope(case, |c, x| c.mlp.params_mut()[i] = x, base);
        check(grads.mlp[i], fd, &mut report);
    }
    for j in 0..case.latent.len() {
        let base = case.latent[j];
        let fd = fd_slope(case, |c, x| c.latent[j] = x, base);
        check(grads.latent[j], fd, &mut report);
    }
    for a in 0..4 {
        let get = |q: &crate::geom::Quat, a: usize| [q.w, q.x, q.y, q.z][a];
        let base = get(&case.frame.rotation, a);
        let fd = fd_slope(
            case,
            |c, x| match a {
                0 => c.frame.rotation.w = x,
                1 => c.frame.rotation.x = x,
                2 => c.frame.rotation.y = x,
                _ => c.frame.rotation.z = x,
            },
            base,
        );
        check(grads.quat[a], fd, &mut report);
    }
    for a in 0..3 {
        let base = case.frame.origin.get(a);
        let fd = fd_slope(
            case,
            |c, x| match a {
                0 => c.frame.origin.x = x,
                1 => c.frame.origin.y = x,
                _ => c.frame.origin.z = x,
            },
            base,
        );
        check(grads.origin.get(a), fd, &mut report);
    }
    report
}

fn random_case(config: &MlpConfig, seed: u64) -> Result<AuditCase> {
    let mut mlp = Mlp::init(config.clone(), seed)?;
    let mut rng = rng_from(seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in mlp.params_mut() {
        *p = snap_f32(rng.range(-0.4, 0.4));
    }
    let frame = CoordinateFrame {
        rotation: crate::geom::Quat::new(
            rng.range(0.5, 1.5),
            rng.range(-0.5, 0.5),
            rng.range(-0.5, 0.5),
            rng.range(-0.5, 0.5),
        ),
        origin: vec3(rng.range(-0.3, 0.3), rng.range(-0.3, 0.3), rng.range(-0.3, 0.3)),
    };
    let latent: Vec<f64> = (0..config.latent_len())
        .map(|_| rng.range(-0.5, 0.5))
        .collect();
    let position = vec3(rng.range(-0.8, 0.8), rng.range(-0.8, 0.8), rng.range(-0.8, 0.8));
    let target = rng.range(0.5, 1.5);
    Ok(AuditCase {
        mlp,
        frame,
        latent,
        position,
        target,
    })
}

/// Randomized finite-difference audit of `backward` over every parameter
/// group: a subsample of MLP weights plus the full latent, quaternion, and
/// origin. Probes evaluate the f64 forward directly.
pub fn grad_check(config: &MlpConfig, seed: u64) -> Result<GradReport> {
    let mut case = random_case(config, seed)?;
    let grads = case
        .mlp
        .backward(&case.frame, &case.latent, case.position, case.target)?;
    let n = case.mlp.params().len();
    let mut rng = rng_from(seed.wrapping_add(1));
    let probes: Vec<usize> = if n <= 400 {
        (0..n).collect()
    } else {
        (0..400).map(|_| rng.index(n)).collect()
    };
    Ok(audit(&mut case, &grads, &probes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vec3;
    use crate::linalg::solve;
    use approx::assert_relative_eq;

    fn naive_linear(a: &[f64], b: &[f64], z: &[f64]) -> Vec<f64> {
        let (rows, cols) = (b.len(), z.len());
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            out[i] = b[i];
            for j in 0..cols {
                out[i] += a[i * cols + j] * z[j];
            }
        }
        out
    }

    fn naive_quadratic(t: &[f64], a: &[f64], b: &[f64], z: &[f64]) -> Vec<f64> {
        let (rows, cols) = (b.len(), z.len());
        let mut out = naive_linear(a, b, z);
        for i in 0..rows {
            for p in 0..cols {
                for q in 0..cols {
                    out[i] += z[p] * t[(p * rows + i) * cols + q] * z[q];
                }
            }
        }
        out
    }

    #[test]
    fn linear_forward_examples() {
        let out = linear_forward(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(out, vec![3.0, -1.0]);
        let out = linear_forward(&[0.0, 0.0, 0.0], &[5.0], &[9.0, -2.0, 0.3]).unwrap();
        assert_eq!(out, vec![5.0]);
        assert!(linear_forward(&[1.0, 2.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn forwards_match_naive_reference() {
        let mut rng = rng_from(7);
        for _ in 0..20 {
            let rows = 1 + rng.index(4);
            let cols = 1 + rng.index(5);
            let a: Vec<f64> = (0..rows * cols).map(|_| rng.range(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..rows).map(|_| rng.range(-1.0, 1.0)).collect();
            let t: Vec<f64> = (0..cols * rows * cols).map(|_| rng.range(-1.0, 1.0)).collect();
            let z: Vec<f64> = (0..cols).map(|_| rng.range(-1.0, 1.0)).collect();
            let lin = linear_forward(&a, &b, &z).unwrap();
            for (x, y) in lin.iter().zip(naive_linear(&a, &b, &z)) {
                assert_relative_eq!(*x, y, epsilon = 1e-12);
            }
            let quad = quadratic_forward(&t, &a, &b, &z).unwrap();
            for (x, y) in quad.iter().zip(naive_quadratic(&t, &a, &b, &z)) {
                assert_relative_eq!(*x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_with_zero_tensor_is_linear() {
        let a = [0.25, -0.5, 1.0, 2.0, 0.125, -1.5];
        let b = [0.5, -0.25];
        let z = [0.7, -0.3, 0.9];
        let t = vec![0.0; 3 * 2 * 3];
        assert_eq!(
            quadratic_forward(&t, &a, &b, &z).unwrap(),
            linear_forward(&a, &b, &z).unwrap()
        );
    }

    #[test]
    fn quadratic_hand_example() {
        // z=(1,2), T=[[1,0],[0,1]], A=[1,1], b=0: z^T T z + A z = 5 + 3 = 8.
        let t = [1.0, 0.0, 0.0, 1.0];
        let out = quadratic_forward(&t, &[1.0, 1.0], &[0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(out, vec![8.0]);
    }

    #[test]
    fn zero_params_decode_zero() {
        let config = MlpConfig::standard(4, 3, 8, 1).unwrap();
        let n = config.param_count();
        let mlp = Mlp::from_parts(config, vec![0.0; n]).unwrap();
        let mut rng = rng_from(11);
        for _ in 0..5 {
            let input: Vec<f64> = (0..7).map(|_| rng.range(-1.0, 1.0)).collect();
            assert_eq!(mlp.forward_vec(&input).unwrap(), 0.0);
        }
    }

    #[test]
    fn golden_dyadic_forward() {
        // Three inputs (third ignored) -> two hidden (ReLU) -> one quadratic
        // output, all values exactly representable in f32.
        let config = MlpConfig::new(vec![3, 2, 1], 1).unwrap();
        let params = vec![
            // layer 0 linear: A row-major, then b
            1.0, -1.0, 0.0, 0.5, 0.25, 0.0, 0.125, -0.25,
            // layer 1 quadratic: T [p][i][q], then A, then b
            0.5, -1.0, 0.25, 2.0, 0.75, -0.625, 0.0625,
        ];
        let mlp = Mlp::from_parts(config, params).unwrap();
        let out = mlp.forward_vec(&[0.25, -0.5, 0.7]).unwrap();
        // Hidden: (0.875, -0.25) -> ReLU (0.875, 0); out = 0.5*0.875^2
        // + 0.75*0.875 + 0.0625.
        assert!((out - 1.1015625).abs() < 1e-15, "{out}");
    }

    #[test]
    fn k0_network_is_locally_affine() {
        let config = MlpConfig::new(vec![6, 12, 12, 1], 0).unwrap();
        let mlp = Mlp::init(config, 3).unwrap();
        let mut rng = rng_from(13);
        let mut tested = 0;
        'outer: for _ in 0..200 {
            if tested >= 20 {
                break;
            }
            let x0: Vec<f64> = (0..6).map(|_| rng.range(-1.0, 1.0)).collect();
            let dir: Vec<f64> = (0..6).map(|_| rng.range(-1.0, 1.0)).collect();
            let h = 1e-3;
            let probe = |t: f64| -> Vec<f64> {
                x0.iter().zip(&dir).map(|(x, d)| x + t * d).collect()
            };
            // Only segments that stay inside one activation region count.
            let mut masks = Vec::new();
            for t in [0.0, h, 2.0 * h] {
                let (_, _, preacts) = mlp.forward_trace(&probe(t)).unwrap();
                let mask: Vec<bool> = preacts[..preacts.len() - 1]
                    .iter()
                    .flatten()
                    .map(|&x| x > 0.0)
                    .collect();
                masks.push(mask);
            }
            if masks[0] != masks[1] || masks[1] != masks[2] {
                continue 'outer;
            }
            let f0 = mlp.forward_vec(&probe(0.0)).unwrap();
            let f1 = mlp.forward_vec(&probe(h)).unwrap();
            let f2 = mlp.forward_vec(&probe(2.0 * h)).unwrap();
            assert!((f2 - 2.0 * f1 + f0).abs() < 1e-9, "{}", f2 - 2.0 * f1 + f0);
            tested += 1;
        }
        assert!(tested >= 20);
    }

    #[test]
    fn quadratic_layer_represents_curved_sdf_linear_cannot() {
        // Target: d = z - (x^2 + 0.5 y^2) / 2 on 200 random points.
        let mut rng = rng_from(17);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)])
            .collect();
        let target = |p: &[f64; 3]| p[2] - 0.5 * (p[0] * p[0] + 0.5 * p[1] * p[1]);

        let feats = |p: &[f64; 3]| {
            [
                p[0] * p[0],
                p[1] * p[1],
                p[2] * p[2],
                p[0] * p[1],
                p[0] * p[2],
                p[1] * p[2],
                p[0],
                p[1],
                p[2],
                1.0,
            ]
        };
        let fit = |dim: usize, take: &dyn Fn(&[f64; 10]) -> Vec<f64>| -> (Vec<f64>, f64) {
            let mut ata = vec![0.0; dim * dim];
            let mut atb = vec![0.0; dim];
            for p in &pts {
                let f = take(&feats(p));
                let d = target(p);
                for i in 0..dim {
                    for j in 0..dim {
                        ata[i * dim + j] += f[i] * f[j];
                    }
                    atb[i] += f[i] * d;
                }
            }
            let x = solve(dim, &mut ata, &mut atb).unwrap();
            let mut sq = 0.0;
            for p in &pts {
                let f = take(&feats(p));
                let pred: f64 = f.iter().zip(&x).map(|(a, b)| a * b).sum();
                sq += (pred - target(p)).powi(2);
            }
            (x, (sq / pts.len() as f64).sqrt())
        };

        let (coefs, rms_quad) = fit(10, &|f| f.to_vec());
        assert!(rms_quad < 1e-10, "quadratic rms {rms_quad}");
        let (_, rms_affine) = fit(4, &|f| f[6..10].to_vec());
        assert!(rms_affine > 1e-4, "affine rms {rms_affine}");

        // The solved coefficients drop straight into a quadratic layer.
        let mut t = [0.0; 9];
        t[0] = coefs[0]; // xx
        t[4] = coefs[1]; // yy
        t[8] = coefs[2]; // zz
        t[1] = coefs[3]; // xy (one-sided split is fine)
        t[2] = coefs[4];
        t[5] = coefs[5];
        let a = [coefs[6], coefs[7], coefs[8]];
        let b = [coefs[9]];
        for p in pts.iter().take(20) {
            let out = quadratic_forward(&t, &a, &b, &[p[0], p[1], p[2]]).unwrap()[0];
            assert!((out - target(p)).abs() < 1e-9);
        }
    }

    #[test]
    fn param_count_formula() {
        let lin = MlpConfig::new(vec![4, 6, 1], 0).unwrap();
        let quad = MlpConfig::new(vec![4, 6, 1], 1).unwrap();
        assert_eq!(quad.param_count() - lin.param_count(), 6 * 1 * 6);

        // Default-scale comparison: five layers with a quadratic head carry
        // nearly the same parameter budget as six linear layers.
        let five_quad = MlpConfig::standard(125, 5, 128, 1).unwrap();
        let six_lin = MlpConfig::standard(125, 6, 128, 0).unwrap();
        let diff = six_lin.param_count() as i64 - five_quad.param_count() as i64;
        assert!(diff.abs() <= 129, "diff {diff}");
    }

    #[test]
    fn zero_residual_zero_grads() {
        let config = MlpConfig::standard(3, 3, 8, 1).unwrap();
        let mut case = random_case(&config, 5).unwrap();
        case.target = case
            .mlp
            .predict(&case.frame, &case.latent, case.position)
            .unwrap();
        let g = case
            .mlp
            .backward(&case.frame, &case.latent, case.position, case.target)
            .unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.mlp.iter().all(|&x| x == 0.0));
        assert!(g.latent.iter().all(|&x| x == 0.0));
        assert!(g.quat.iter().all(|&x| x == 0.0));
        assert_eq!(g.origin.norm(), 0.0);
    }

    #[test]
    fn single_linear_layer_closed_form() {
        let config = MlpConfig::new(vec![5, 1], 0).unwrap();
        let params = vec![0.5, -0.25, 1.0, 0.75, -1.5, 0.125];
        let mlp = Mlp::from_parts(config, params.clone()).unwrap();
        let frame = CoordinateFrame::identity_at(Vec3::ZERO);
        let latent = [0.5, -0.5];
        let p = vec3(0.25, -0.75, 0.5);
        let g = mlp.backward(&frame, &latent, p, 10.0).unwrap();
        // Prediction is far below the target, so sign(r) = -1.
        let input = [0.25, -0.75, 0.5, 0.5, -0.5];
        for (j, &x) in input.iter().enumerate() {
            assert_relative_eq!(g.mlp[j], -x, epsilon = 1e-15);
        }
        assert_relative_eq!(g.mlp[5], -1.0, epsilon = 1e-15);
        assert_relative_eq!(g.latent[0], -params[3], epsilon = 1e-15);
        assert_relative_eq!(g.latent[1], -params[4], epsilon = 1e-15);
        // Identity frame: d loss / d origin = -sign(r) * A[0..3].
        assert!((g.origin - vec3(0.5, -0.25, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn grad_check_passes_default_shapes() {
        let config = MlpConfig::standard(5, 5, 12, 1).unwrap();
        let report = grad_check(&config, 21).unwrap();
        assert!(
            report.pass,
            "{} failures, max rel {}",
            report.failures, report.max_rel_err
        );
        assert!(report.checked > 400);

        let k0 = MlpConfig::standard(5, 4, 10, 0).unwrap();
        let report = grad_check(&k0, 22).unwrap();
        assert!(report.pass, "max rel {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails_audit() {
        let config = MlpConfig::standard(4, 3, 8, 1).unwrap();
        let mut case = random_case(&config, 9).unwrap();
        let mut grads = case
            .mlp
            .backward(&case.frame, &case.latent, case.position, case.target)
            .unwrap();
        let quad_t_start = {
            let views = build_views(case.mlp.config());
            views.last().unwrap().t
        };
        grads.mlp[quad_t_start] += 0.5;
        let probes: Vec<usize> = (quad_t_start..quad_t_start + 4).collect();
        let report = audit(&mut case, &grads, &probes);
        assert!(!report.pass);
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut state = AdamState::new(2);
        let mut params = [0.5, -0.5];
        adam_step(&mut state, &mut params, &[0.1, 0.0], 1e-3).unwrap();
        assert_relative_eq!(params[0], 0.5 - 1e-3, epsilon = 1e-6);
        assert_eq!(params[1], -0.5);
        for _ in 0..50 {
            adam_step(&mut state, &mut params, &[0.0, 0.0], 1e-3).unwrap();
        }
        // Zero gradients leave both moments at their decayed values and the
        // second parameter exactly in place.
        assert_eq!(params[1], -0.5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut state = AdamState::new(1);
        let mut x = [0.0];
        for _ in 0..100 {
            let g = 2.0 * (x[0] - 3.0);
            adam_step(&mut state, &mut x, &[g], 0.1).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 0.5, "{}", x[0]);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let config = MlpConfig::standard(6, 4, 10, 2).unwrap();
        let mlp = Mlp::init(config.clone(), 31).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cfck");
        mlp.save(&path).unwrap();
        let loaded = Mlp::load(&path).unwrap();
        assert_eq!(loaded.config(), &config);
        assert_eq!(loaded.params(), mlp.params());

        let path2 = dir.path().join("m2.cfck");
        mlp.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfck");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CFCK");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Mlp::load(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        let config = MlpConfig::new(vec![4, 1], 0).unwrap();
        let mlp = Mlp::init(config, 1).unwrap();
        let path = dir.path().join("trunc.cfck");
        mlp.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(Mlp::load(&path).is_err());

        let path = dir.path().join("nan.cfck");
        mlp.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(Mlp::load(&path).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::new(vec![4], 0).is_err());
        assert!(MlpConfig::new(vec![4, 0, 1], 0).is_err());
        assert!(MlpConfig::new(vec![4, 8, 1], 3).is_err());
        assert!(MlpConfig::new(vec![2, 8, 1], 0).is_err());
        let c = MlpConfig::standard(125, 5, 128, 1).unwrap();
        assert_eq!(c.widths, vec![128, 128, 128, 128, 128, 1]);
        assert!(c.is_quadratic(4));
        assert!(!c.is_quadratic(3));
    }
}
