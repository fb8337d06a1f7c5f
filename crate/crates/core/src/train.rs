//! Auto-decoder training over a set of shapes and the frozen-decoder fit for
//! a single new shape. Both paths draw voxels with replacement and points
//! without, accumulate L1 gradients with an ordered reduction, and step three
//! Adam groups (decoder, frames, latents) at their own learning rates.

use crate::binio::*;
use crate::error::{Error, Result};
use crate::field::{build_grid, init_frames, init_frames_from_samples, CoordinateField};
use crate::geom::{Quat, Vec3};
use crate::mesh::TriangleMesh;
use crate::mlp::{adam_step, AdamState, Mlp};
use crate::rng::{child_seed, rng_from, RngExt};
use crate::sdf::{build_sample_set, MeshSdf, SampleSet};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

const GRAD_CHUNK: usize = 512;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub shapes_per_batch: usize,
    /// Voxels drawn per shape per step, with replacement.
    pub voxels_per_shape: usize,
    /// Points drawn per voxel per step, without replacement.
    pub points_per_voxel: usize,
    pub lr_mlp: f64,
    pub lr_frames: f64,
    pub lr_latents: f64,
    pub iterations: u64,
    /// All three rates halve after each full period.
    pub halving_period: u64,
    pub seed: u64,
    /// Leave every shape's frames at their initialization; train latents only.
    pub freeze_frames: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            shapes_per_batch: 12,
            voxels_per_shape: 3000,
            points_per_voxel: 24,
            lr_mlp: 5e-4,
            lr_frames: 1e-3,
            lr_latents: 1e-3,
            iterations: 150_000,
            halving_period: 20_000,
            seed: 0,
            freeze_frames: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes_per_batch == 0
            || self.voxels_per_shape == 0
            || self.points_per_voxel == 0
            || self.halving_period == 0
        {
            return Err(Error::Config("batch counts must be at least 1".into()));
        }
        if self.lr_mlp <= 0.0 || self.lr_frames <= 0.0 || self.lr_latents <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InferConfig {
    pub lr: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Grid resolution used when fitting from a raw mesh.
    pub grid_v: u32,
    /// Sample pool built per voxel when fitting from a raw mesh.
    pub samples_per_voxel: usize,
    pub voxels_per_step: usize,
    pub points_per_voxel: usize,
    /// Leave frames at their initialization and optimize latents only.
    pub freeze_frames: bool,
    /// Skip the geometry-aware frame initialization (frames stay identity).
    pub identity_frames: bool,
}

impl Default for InferConfig {
    fn default() -> InferConfig {
        InferConfig {
            lr: 5e-4,
            iterations: 800,
            seed: 0,
            grid_v: 32,
            samples_per_voxel: 64,
            voxels_per_step: 512,
            points_per_voxel: 24,
            freeze_frames: false,
            identity_frames: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.grid_v < 2 || self.samples_per_voxel == 0 || self.voxels_per_step == 0
            || self.points_per_voxel == 0
        {
            return Err(Error::Config("inference counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training shape: its sample pools and its learnable field.
pub struct TrainShape {
    pub samples: SampleSet,
    pub field: CoordinateField,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub mlp: Mlp,
    pub iteration: u64,
    /// (iteration, batch mean L1) pairs, every 100 iterations and at the end.
    pub history: Vec<(u64, f64)>,
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        write_magic(&mut w, b"CFTR", 1)?;
        cp.mlp.write_body(&mut w)?;
        write_u64(&mut w, cp.iteration)?;
        write_u64(&mut w, cp.history.len() as u64)?;
        for &(it, loss) in &cp.history {
            write_u64(&mut w, it)?;
            write_f64(&mut w, loss)?;
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let version = read_magic(&mut r, b"CFTR")?;
    expect_version(version, 1)?;
    let mlp = Mlp::read_body(&mut r)?;
    let iteration = read_u64(&mut r)?;
    let n = read_u64(&mut r)? as usize;
    let mut history = Vec::with_capacity(n);
    for _ in 0..n {
        let it = read_u64(&mut r)?;
        let loss = read_f64(&mut r)?;
        if !loss.is_finite() {
            return Err(Error::Format("non-finite loss in checkpoint".into()));
        }
        history.push((it, loss));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing data in checkpoint".into()));
    }
    Ok(Checkpoint {
        mlp,
        iteration,
        history,
    })
}

/// Partial Fisher-Yates: the first `n` entries of a shuffled 0..len.
fn draw_without_replacement(rng: &mut impl rand_core::RngCore, len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = i + rng.index(len - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

#[derive(Clone)]
struct CellGrad {
    quat: [f64; 4],
    origin: Vec3,
    latent: Vec<f64>,
}

impl CellGrad {
    fn zero(latent_len: usize) -> CellGrad {
        CellGrad {
            quat: [0.0; 4],
            origin: Vec3::ZERO,
            latent: vec![0.0; latent_len],
        }
    }

    fn add(&mut self, quat: &[f64; 4], origin: Vec3, latent: &[f64]) {
        for a in 0..4 {
            self.quat[a] += quat[a];
        }
        self.origin += origin;
        for (x, g) in self.latent.iter_mut().zip(latent) {
            *x += g;
        }
    }
}

struct BatchAccum {
    loss: f64,
    count: usize,
    mlp: Option<Vec<f64>>,
    cells: BTreeMap<usize, CellGrad>,
}

/// Backward over one shape's work items, parallel in fixed-size chunks merged
/// in order so the result is independent of thread count.
fn shape_batch_grads(
    mlp: &Mlp,
    field: &CoordinateField,
    set: &SampleSet,
    items: &[(usize, u32, usize)],
    want_mlp: bool,
) -> Result<BatchAccum> {
    let latent_len = field.latent_len();
    let chunks: Vec<Result<BatchAccum>> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = BatchAccum {
                loss: 0.0,
                count: 0,
                mlp: want_mlp.then(|| vec![0.0; mlp.params().len()]),
                cells: BTreeMap::new(),
            };
            for &(slot, cell, within) in chunk {
                let group = set.group(cell).expect("sampled voxel lost its group");
                let s = &group[within];
                let out = mlp.backward(field.frame(slot), field.latent(slot), s.position, s.sdf)?;
                acc.loss += out.loss;
                acc.count += 1;
                if let Some(mg) = acc.mlp.as_mut() {
                    for (x, g) in mg.iter_mut().zip(&out.mlp) {
                        *x += g;
                    }
                }
                acc.cells
                    .entry(slot)
                    .or_insert_with(|| CellGrad::zero(latent_len))
                    .add(&out.quat, out.origin, &out.latent);
            }
            Ok(acc)
        })
        .collect();

    let mut total = BatchAccum {
        loss: 0.0,
        count: 0,
        mlp: want_mlp.then(|| vec![0.0; mlp.params().len()]),
        cells: BTreeMap::new(),
    };
    for chunk in chunks {
        let chunk = chunk?;
        total.loss += chunk.loss;
        total.count += chunk.count;
        if let (Some(t), Some(c)) = (total.mlp.as_mut(), chunk.mlp.as_ref()) {
            for (x, g) in t.iter_mut().zip(c) {
                *x += g;
            }
        }
        for (slot, grad) in chunk.cells {
            total
                .cells
                .entry(slot)
                .or_insert_with(|| CellGrad::zero(latent_len))
                .add(&grad.quat, grad.origin, &grad.latent);
        }
    }
    Ok(total)
}

/// Sparse per-cell Adam: a (frame, latent) state pair created on first touch,
/// with its own step counter for bias correction.
struct CellOptim {
    frames: BTreeMap<(usize, usize), AdamState>,
    latents: BTreeMap<(usize, usize), AdamState>,
}

impl CellOptim {
    fn new() -> CellOptim {
        CellOptim {
            frames: BTreeMap::new(),
            latents: BTreeMap::new(),
        }
    }

    fn apply(
        &mut self,
        shape_idx: usize,
        field: &mut CoordinateField,
        cells: &BTreeMap<usize, CellGrad>,
        lr_frames: Option<f64>,
        lr_latents: f64,
        latent_len: usize,
    ) -> Result<()> {
        for (&slot, grad) in cells {
            let key = (shape_idx, slot);
            if let Some(lr) = lr_frames {
                let state = self
                    .frames
                    .entry(key)
                    .or_insert_with(|| AdamState::new(7));
                let f = field.frame(slot);
                let mut packed = [
                    f.rotation.w,
                    f.rotation.x,
                    f.rotation.y,
                    f.rotation.z,
                    f.origin.x,
                    f.origin.y,
                    f.origin.z,
                ];
                let g = [
                    grad.quat[0],
                    grad.quat[1],
                    grad.quat[2],
                    grad.quat[3],
                    grad.origin.x,
                    grad.origin.y,
                    grad.origin.z,
                ];
                adam_step(state, &mut packed, &g, lr)?;
                let q = Quat::new(packed[0], packed[1], packed[2], packed[3]).normalized()?;
                let f = field.frame_mut(slot);
                f.rotation = q;
                f.origin = Vec3::from_array([packed[4], packed[5], packed[6]]);
            }
            let state = self
                .latents
                .entry(key)
                .or_insert_with(|| AdamState::new(latent_len));
            adam_step(state, field.latent_mut(slot), &grad.latent, lr_latents)?;
        }
        Ok(())
    }
}

fn sampled_cells(set: &SampleSet, field: &CoordinateField) -> Vec<(usize, u32)> {
    set.groups()
        .filter_map(|(cell, _)| field.grid.slot(cell).map(|slot| (slot, cell)))
        .collect()
}

/// Joint optimization of the decoder and every shape's frames and latents.
pub fn train(mut mlp: Mlp, shapes: &mut [TrainShape], cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if shapes.is_empty() {
        return Err(Error::ConfigMismatch("no training shapes".into()));
    }
    let latent_len = mlp.config().latent_len();
    let v0 = shapes[0].samples.grid()?.v();
    let mut cells_per_shape = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        if shape.field.latent_len() != latent_len {
            return Err(Error::ConfigMismatch(format!(
                "shape {i} latent length {} != decoder {latent_len}",
                shape.field.latent_len()
            )));
        }
        if shape.field.grid.v() != v0 {
            return Err(Error::ConfigMismatch(format!(
                "shape {i} grid resolution {} != {v0}",
                shape.field.grid.v()
            )));
        }
        let cells = sampled_cells(&shape.samples, &shape.field);
        if cells.is_empty() {
            return Err(Error::ConfigMismatch(format!(
                "shape {i} has no sampled voxels"
            )));
        }
        cells_per_shape.push(cells);
    }

    let mut mlp_state = AdamState::new(mlp.params().len());
    let mut cell_optim = CellOptim::new();
    let mut history = Vec::new();

    for t in 1..=cfg.iterations {
        let factor = 0.5f64.powi(((t - 1) / cfg.halving_period) as i32);
        let mut rng = rng_from(child_seed(cfg.seed, t));

        let mut mlp_grad = vec![0.0; mlp.params().len()];
        let mut batch_loss = 0.0;
        let mut batch_count = 0usize;
        for _ in 0..cfg.shapes_per_batch {
            let si = rng.index(shapes.len());
            let cells = &cells_per_shape[si];
            let mut items = Vec::with_capacity(cfg.voxels_per_shape * cfg.points_per_voxel);
            for _ in 0..cfg.voxels_per_shape {
                let (slot, cell) = cells[rng.index(cells.len())];
                let group_len = shapes[si].samples.group(cell).map_or(0, |g| g.len());
                for within in draw_without_replacement(&mut rng, group_len, cfg.points_per_voxel)
                {
                    items.push((slot, cell, within));
                }
            }
            let acc = shape_batch_grads(&mlp, &shapes[si].field, &shapes[si].samples, &items, true)?;
            batch_loss += acc.loss;
            batch_count += acc.count;
            if let Some(g) = acc.mlp {
                for (x, gi) in mlp_grad.iter_mut().zip(&g) {
                    *x += gi;
                }
            }
            cell_optim.apply(
                si,
                &mut shapes[si].field,
                &acc.cells,
                (!cfg.freeze_frames).then_some(cfg.lr_frames * factor),
                cfg.lr_latents * factor,
                latent_len,
            )?;
        }

        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        adam_step(&mut mlp_state, mlp.params_mut(), &mlp_grad, cfg.lr_mlp * factor)?;
        mlp.round_params_f32();

        if t % 100 == 0 || t == cfg.iterations {
            let mean = batch_loss / batch_count.max(1) as f64;
            log::info!("iter {t} mean L1 {mean:.6}");
            history.push((t, mean));
        }
    }

    Ok(Checkpoint {
        mlp,
        iteration: cfg.iterations,
        history,
    })
}

pub enum InferInput<'a> {
    Mesh(&'a TriangleMesh),
    Samples(&'a SampleSet),
}

pub struct InferResult {
    pub field: CoordinateField,
    /// Mean L1 of the final optimization step (0 when iterations = 0).
    pub final_l1: f64,
    pub history: Vec<(u64, f64)>,
}

/// Fit a new shape against a frozen decoder: geometry-aware frames, fresh
/// latents, then Adam over {latent, origin, quaternion} only.
pub fn infer_fit(cp: &Checkpoint, input: InferInput, cfg: &InferConfig) -> Result<InferResult> {
    cfg.validate()?;
    let mlp = &cp.mlp;
    let latent_len = mlp.config().latent_len();

    let owned_samples;
    let (samples, mut field) = match input {
        InferInput::Mesh(mesh) => {
            let grid = build_grid(mesh, cfg.grid_v)?;
            let sdf = MeshSdf::new(mesh)?;
            owned_samples = build_sample_set(
                mesh,
                &grid,
                cfg.samples_per_voxel,
                child_seed(cfg.seed, 0x5a17),
            )?;
            let mut field = CoordinateField::new(grid, latent_len, child_seed(cfg.seed, 0x1a7e));
            if !cfg.identity_frames {
                init_frames(&mut field, &owned_samples, |p| sdf.value(p));
            }
            (&owned_samples, field)
        }
        InferInput::Samples(set) => {
            let grid = set.grid()?;
            let mut field = CoordinateField::new(grid, latent_len, child_seed(cfg.seed, 0x1a7e));
            if !cfg.identity_frames {
                init_frames_from_samples(&mut field, set);
            }
            (set, field)
        }
    };

    let cells = sampled_cells(samples, &field);
    if cells.is_empty() {
        return Err(Error::ConfigMismatch("no sampled voxels to fit".into()));
    }

    let mut cell_optim = CellOptim::new();
    let mut history = Vec::new();
    let mut final_l1 = 0.0;
    for t in 1..=cfg.iterations {
        let mut rng = rng_from(child_seed(cfg.seed, t));
        let mut items = Vec::with_capacity(cfg.voxels_per_step * cfg.points_per_voxel);
        for _ in 0..cfg.voxels_per_step {
            let (slot, cell) = cells[rng.index(cells.len())];
            let group_len = samples.group(cell).map_or(0, |g| g.len());
            for within in draw_without_replacement(&mut rng, group_len, cfg.points_per_voxel) {
                items.push((slot, cell, within));
            }
        }
        let acc = shape_batch_grads(mlp, &field, samples, &items, false)?;
        if !acc.loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        cell_optim.apply(
            0,
            &mut field,
            &acc.cells,
            (!cfg.freeze_frames).then_some(cfg.lr),
            cfg.lr,
            latent_len,
        )?;
        final_l1 = acc.loss / acc.count.max(1) as f64;
        if t % 100 == 0 || t == cfg.iterations {
            log::info!("fit iter {t} mean L1 {final_l1:.6}");
            history.push((t, final_l1));
        }
    }

    Ok(InferResult {
        field,
        final_l1,
        history,
    })
}

/// Mean L1 of the decoder over every sample in the set, using each sample's
/// own voxel. Cells without a field slot are skipped.
pub fn evaluate_l1(mlp: &Mlp, field: &CoordinateField, set: &SampleSet) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (cell, group) in set.groups() {
        let Some(slot) = field.grid.slot(cell) else {
            continue;
        };
        for s in group {
            let pred = mlp.predict(field.frame(slot), field.latent(slot), s.position)?;
            total += (pred - s.sdf).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySet);
    }
    Ok(total / count as f64)
}
