//! Shared fixtures: a procedural shape corpus on a V=16 grid and the
//! decoder/optimizer settings sized for a single desktop core.
//!
//! Training and held-out shapes draw from the same families (boxes, wedges,
//! cylinders, pyramids, tori) at different proportions and orientations.
//! Spheres never appear here so they stay genuinely unseen for the
//! generalization checks.

#![allow(dead_code)]

use sdfield::field::{build_grid, init_frames_from_samples, CoordinateField};
use sdfield::geom::{vec3, Quat, RigidTransform, Vec3};
use sdfield::mesh::{shapes, TriangleMesh};
use sdfield::mlp::{Mlp, MlpConfig};
use sdfield::rng::child_seed;
use sdfield::sdf::build_sample_set;
use sdfield::train::{InferConfig, TrainConfig, TrainShape};

pub const GRID_V: u32 = 16;
pub const POOL_PER_VOXEL: usize = 32;
pub const LATENT_LEN: usize = 8;
pub const HIDDEN: usize = 32;
pub const DEPTH: usize = 3;

pub fn decoder_config(k: usize) -> MlpConfig {
    MlpConfig::standard(LATENT_LEN, DEPTH, HIDDEN, k).unwrap()
}

pub fn decoder(k: usize, seed: u64) -> Mlp {
    Mlp::init(decoder_config(k), seed).unwrap()
}

pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        shapes_per_batch: 4,
        voxels_per_shape: 48,
        points_per_voxel: 8,
        lr_mlp: 5e-4,
        lr_frames: 1e-3,
        lr_latents: 1e-3,
        iterations: 20_000,
        halving_period: 6_000,
        seed,
        freeze_frames: false,
    }
}

pub fn desk_infer_config(seed: u64) -> InferConfig {
    InferConfig {
        lr: 5e-4,
        iterations: 800,
        seed,
        grid_v: GRID_V,
        samples_per_voxel: POOL_PER_VOXEL,
        voxels_per_step: 384,
        points_per_voxel: 8,
        freeze_frames: false,
        identity_frames: false,
    }
}

pub fn posed(mesh: TriangleMesh, axis: Vec3, angle: f64) -> TriangleMesh {
    let pose = RigidTransform::new(Quat::from_axis_angle(axis, angle), Vec3::ZERO);
    let mut m = shapes::transformed(&mesh, 1.0, &pose);
    m.normalize().unwrap();
    m
}

pub fn training_meshes() -> Vec<TriangleMesh> {
    let o = Vec3::ZERO;
    vec![
        posed(shapes::box_mesh(o, vec3(1.0, 0.62, 0.35)), vec3(1.0, 2.0, 3.0), 0.7),
        posed(shapes::box_mesh(o, vec3(1.0, 1.0, 0.28)), vec3(-1.0, 1.0, 2.0), 1.9),
        posed(shapes::wedge_mesh(o, 2.0, 1.1, 1.4), vec3(0.3, 1.0, -0.6), 2.4),
        posed(shapes::wedge_mesh(o, 1.2, 1.2, 2.2), vec3(1.0, -1.0, 1.0), 0.9),
        posed(shapes::cylinder_mesh(o, 0.45, 2.0, 28), vec3(1.0, 0.2, 0.1), 1.2),
        posed(shapes::cylinder_mesh(o, 1.0, 0.8, 24), vec3(0.2, 1.0, 0.5), 2.0),
        posed(shapes::pyramid_mesh(o, 1.0, 1.6), vec3(1.0, 1.0, 0.2), 0.5),
        posed(shapes::pyramid_mesh(o, 1.0, 0.7), vec3(0.5, -1.0, 1.0), 1.5),
        posed(shapes::torus_mesh(o, 1.0, 0.42, 28, 14), vec3(1.0, 0.5, -0.3), 1.1),
        posed(shapes::torus_mesh(o, 1.0, 0.22, 32, 12), vec3(-0.7, 0.3, 1.0), 2.7),
    ]
}

pub fn held_out_meshes() -> Vec<TriangleMesh> {
    let o = Vec3::ZERO;
    vec![
        posed(shapes::box_mesh(o, vec3(1.0, 0.45, 0.45)), vec3(0.9, -0.4, 1.2), 1.3),
        posed(shapes::cylinder_mesh(o, 0.7, 1.6, 26), vec3(-0.3, 1.0, 0.8), 0.6),
        posed(shapes::pyramid_mesh(o, 1.0, 1.2), vec3(1.1, 0.7, -0.5), 2.2),
        posed(shapes::torus_mesh(o, 1.0, 0.33, 30, 12), vec3(0.4, -1.0, 0.6), 1.8),
        posed(shapes::wedge_mesh(o, 1.7, 1.0, 1.0), vec3(-1.0, 0.5, 0.3), 1.0),
    ]
}

/// Sample pools plus a fresh field per mesh. `pca` picks the geometry-aware
/// frame initialization; otherwise frames stay identity.
pub fn shapes_from_meshes(meshes: &[TriangleMesh], pca: bool, seed: u64) -> Vec<TrainShape> {
    meshes
        .iter()
        .enumerate()
        .map(|(i, mesh)| {
            let grid = build_grid(mesh, GRID_V).unwrap();
            let samples =
                build_sample_set(mesh, &grid, POOL_PER_VOXEL, child_seed(seed, 100 + i as u64))
                    .unwrap();
            let mut field = CoordinateField::new(
                samples.grid().unwrap(),
                LATENT_LEN,
                child_seed(seed, 200 + i as u64),
            );
            if pca {
                init_frames_from_samples(&mut field, &samples);
            }
            TrainShape { samples, field }
        })
        .collect()
}

pub fn training_shapes(pca: bool, seed: u64) -> Vec<TrainShape> {
    shapes_from_meshes(&training_meshes(), pca, seed)
}
