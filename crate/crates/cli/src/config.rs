//! `key = value` config files for `train`: optimizer settings plus the
//! decoder architecture. Unknown keys are errors so a typo cannot silently
//! fall back to a default.

use sdfield::error::{Error, Result};
use sdfield::mlp::MlpConfig;
use sdfield::train::TrainConfig;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub latent: usize,
    pub hidden: usize,
    pub depth: usize,
    pub k: usize,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            train: TrainConfig::default(),
            latent: 125,
            hidden: 128,
            depth: 5,
            k: 1,
        }
    }
}

impl TrainSettings {
    pub fn decoder_config(&self) -> Result<MlpConfig> {
        MlpConfig::standard(self.latent, self.depth, self.hidden, self.k)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| {
                Error::Config(format!("{}:{}: {msg}", path.display(), lineno + 1))
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got `{raw}`")));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "shapes_per_batch" => self.train.shapes_per_batch = parse(key, value)?,
            "voxels_per_shape" => self.train.voxels_per_shape = parse(key, value)?,
            "points_per_voxel" => self.train.points_per_voxel = parse(key, value)?,
            "lr_mlp" => self.train.lr_mlp = parse(key, value)?,
            "lr_frames" => self.train.lr_frames = parse(key, value)?,
            "lr_latents" => self.train.lr_latents = parse(key, value)?,
            "iterations" => self.train.iterations = parse(key, value)?,
            "halving_period" => self.train.halving_period = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "freeze_frames" => self.train.freeze_frames = parse(key, value)?,
            "latent" => self.latent = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn banner(&self) -> String {
        let t = &self.train;
        format!(
            "shapes_per_batch={} voxels_per_shape={} points_per_voxel={} \
             lr_mlp={} lr_frames={} lr_latents={} iterations={} halving_period={} \
             seed={} freeze_frames={} latent={} hidden={} depth={} k={}",
            t.shapes_per_batch,
            t.voxels_per_shape,
            t.points_per_voxel,
            t.lr_mlp,
            t.lr_frames,
            t.lr_latents,
            t.iterations,
            t.halving_period,
            t.seed,
            t.freeze_frames,
            self.latent,
            self.hidden,
            self.depth,
            self.k
        )
    }
}
