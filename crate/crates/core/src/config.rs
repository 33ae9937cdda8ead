//! Plain-text `key = value` run configuration.
//!
//! One file covers every stage. Unknown keys and unparsable values are
//! rejected with the key named. `preset = desk|full` replaces every value
//! with that preset, so it belongs on the first line. [`Config::to_text`]
//! writes all keys and parses back to the same configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autoencoder::{AutoencoderSpec, FieldMode};
use crate::data::{DataConfig, PartialSpec};
use crate::error::{Error, Result};
use crate::grid::{Metric, NeighborhoodSpec};
use crate::infusion::AlphaSchedule;
use crate::kernel::{ChainSettings, KernelSpec, SigmaSchedule};
use crate::training::{AeTrainConfig, CloudSource, EvalConfig, KernelTrainConfig, Optimizer, StartCodes};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    // data
    pub resolution: u32,
    pub mode: FieldMode,
    pub shapes_per_kind: usize,
    pub test_per_kind: usize,
    pub scale: f64,
    pub surface_points: usize,
    pub query_points: usize,
    pub band_sd: f64,
    pub removal_radius: f64,
    pub min_rate: f64,
    pub partial_iterations: usize,
    pub noise_sd: f64,
    // autoencoder
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub levels: usize,
    pub encoder_width: usize,
    pub encoder_blocks: usize,
    pub decoder_width: usize,
    pub decoder_blocks: usize,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub ae_lr_end: f64,
    pub beta: f64,
    pub ae_queries: usize,
    // kernel
    pub kernel_epochs: usize,
    pub kernel_lr: f64,
    pub gamma: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub sigma_base: f64,
    pub sigma_decay: f64,
    pub radius: u32,
    pub metric: Metric,
    pub window_radius: u32,
    pub hidden: Vec<usize>,
    pub cond: bool,
    pub max_steps: usize,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub probe_every: usize,
    // generation and evaluation
    pub steps: usize,
    pub mode_steps: usize,
    pub completions: usize,
    pub sigma_init: f64,
    pub encoded_init: bool,
    pub upsample: u32,
    pub tau: f64,
    pub iso: f64,
    pub eval_cloud: String,
    // paths
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub ae_checkpoint: PathBuf,
    pub kernel_checkpoint: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config::full()
    }
}

impl Config {
    /// Full-scale widths, loss weights and schedules.
    pub fn full() -> Self {
        Config {
            seed: 0,
            resolution: 32,
            mode: FieldMode::Sdf,
            shapes_per_kind: 8,
            test_per_kind: 1,
            scale: 1.0,
            surface_points: 4000,
            query_points: 4000,
            band_sd: 0.05,
            removal_radius: 0.3,
            min_rate: 0.5,
            partial_iterations: 4,
            noise_sd: 0.0,
            latent_dim: 32,
            feature_dim: 32,
            levels: 3,
            encoder_width: 128,
            encoder_blocks: 4,
            decoder_width: 128,
            decoder_blocks: 4,
            ae_epochs: 200,
            ae_lr: 5e-4,
            ae_lr_end: 5e-4,
            beta: 0.001,
            ae_queries: 0,
            kernel_epochs: 50,
            kernel_lr: 5e-4,
            gamma: 0.01,
            alpha0: 0.1,
            alpha1: 0.005,
            sigma_base: 1.0,
            sigma_decay: 0.01,
            radius: 2,
            metric: Metric::L1,
            window_radius: 2,
            hidden: vec![64, 64],
            cond: false,
            max_steps: 0,
            optimizer: Optimizer::Adam,
            batch_size: 1,
            probe_every: 0,
            steps: 30,
            mode_steps: 5,
            completions: 5,
            sigma_init: 1.0,
            encoded_init: true,
            upsample: 4,
            tau: 0.5,
            iso: 0.0,
            eval_cloud: "surface".into(),
            data_dir: "data".into(),
            out_dir: "out".into(),
            ae_checkpoint: "out/ae.ckpt".into(),
            kernel_checkpoint: "out/kernel.ckpt".into(),
        }
    }

    /// Budget for a single CPU core: the whole pipeline on the toy corpus
    /// in a few minutes.
    pub fn desk() -> Self {
        Config {
            scale: 0.7,
            surface_points: 2000,
            query_points: 3000,
            latent_dim: 16,
            encoder_width: 32,
            decoder_width: 64,
            decoder_blocks: 2,
            ae_epochs: 100,
            ae_lr: 1.5e-3,
            ae_lr_end: 1e-4,
            kernel_epochs: 20,
            kernel_lr: 1e-3,
            alpha0: 0.4,
            alpha1: 0.05,
            window_radius: 1,
            hidden: vec![32, 32],
            steps: 8,
            eval_cloud: "cells".into(),
            upsample: 2,
            ..Config::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Config::full()),
            "desk" => Ok(Config::desk()),
            other => Err(Error::Config(format!("preset: unknown preset `{other}` (desk, full)"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => *self = Config::preset(v)?,
            "seed" => self.seed = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "shapes_per_kind" => self.shapes_per_kind = parse(key, v)?,
            "test_per_kind" => self.test_per_kind = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "surface_points" => self.surface_points = parse(key, v)?,
            "query_points" => self.query_points = parse(key, v)?,
            "band_sd" => self.band_sd = parse(key, v)?,
            "removal_radius" => self.removal_radius = parse(key, v)?,
            "min_rate" => self.min_rate = parse(key, v)?,
            "partial_iterations" => self.partial_iterations = parse(key, v)?,
            "noise_sd" => self.noise_sd = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "levels" => self.levels = parse(key, v)?,
            "encoder_width" => self.encoder_width = parse(key, v)?,
            "encoder_blocks" => self.encoder_blocks = parse(key, v)?,
            "decoder_width" => self.decoder_width = parse(key, v)?,
            "decoder_blocks" => self.decoder_blocks = parse(key, v)?,
            "ae_epochs" => self.ae_epochs = parse(key, v)?,
            "ae_lr" => self.ae_lr = parse(key, v)?,
            "ae_lr_end" => self.ae_lr_end = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "ae_queries" => self.ae_queries = parse(key, v)?,
            "kernel_epochs" => self.kernel_epochs = parse(key, v)?,
            "kernel_lr" => self.kernel_lr = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "alpha0" => self.alpha0 = parse(key, v)?,
            "alpha1" => self.alpha1 = parse(key, v)?,
            "sigma_base" => self.sigma_base = parse(key, v)?,
            "sigma_decay" => self.sigma_decay = parse(key, v)?,
            "radius" => self.radius = parse(key, v)?,
            "metric" => self.metric = parse(key, v)?,
            "window_radius" => self.window_radius = parse(key, v)?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "cond" => self.cond = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(bad(key, v, "adam or sgd")),
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "probe_every" => self.probe_every = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "mode_steps" => self.mode_steps = parse(key, v)?,
            "completions" => self.completions = parse(key, v)?,
            "sigma_init" => self.sigma_init = parse(key, v)?,
            "init" => {
                self.encoded_init = match v {
                    "encoded" => true,
                    "random" => false,
                    _ => return Err(bad(key, v, "encoded or random")),
                }
            }
            "upsample" => self.upsample = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "iso" => self.iso = parse(key, v)?,
            "eval_cloud" => match v {
                "cells" | "surface" => self.eval_cloud = v.to_string(),
                _ => return Err(bad(key, v, "cells or surface")),
            },
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "ae_checkpoint" => self.ae_checkpoint = v.into(),
            "kernel_checkpoint" => self.kernel_checkpoint = v.into(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Start from the full preset and apply a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Config::full();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Every key in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let hidden = self.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        let opt = match self.optimizer {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("resolution", self.resolution.to_string()),
            ("mode", self.mode.to_string()),
            ("shapes_per_kind", self.shapes_per_kind.to_string()),
            ("test_per_kind", self.test_per_kind.to_string()),
            ("scale", self.scale.to_string()),
            ("surface_points", self.surface_points.to_string()),
            ("query_points", self.query_points.to_string()),
            ("band_sd", self.band_sd.to_string()),
            ("removal_radius", self.removal_radius.to_string()),
            ("min_rate", self.min_rate.to_string()),
            ("partial_iterations", self.partial_iterations.to_string()),
            ("noise_sd", self.noise_sd.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("levels", self.levels.to_string()),
            ("encoder_width", self.encoder_width.to_string()),
            ("encoder_blocks", self.encoder_blocks.to_string()),
            ("decoder_width", self.decoder_width.to_string()),
            ("decoder_blocks", self.decoder_blocks.to_string()),
            ("ae_epochs", self.ae_epochs.to_string()),
            ("ae_lr", self.ae_lr.to_string()),
            ("ae_lr_end", self.ae_lr_end.to_string()),
            ("beta", self.beta.to_string()),
            ("ae_queries", self.ae_queries.to_string()),
            ("kernel_epochs", self.kernel_epochs.to_string()),
            ("kernel_lr", self.kernel_lr.to_string()),
            ("gamma", self.gamma.to_string()),
            ("alpha0", self.alpha0.to_string()),
            ("alpha1", self.alpha1.to_string()),
            ("sigma_base", self.sigma_base.to_string()),
            ("sigma_decay", self.sigma_decay.to_string()),
            ("radius", self.radius.to_string()),
            ("metric", self.metric.to_string()),
            ("window_radius", self.window_radius.to_string()),
            ("hidden", hidden),
            ("cond", self.cond.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("optimizer", opt.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("probe_every", self.probe_every.to_string()),
            ("steps", self.steps.to_string()),
            ("mode_steps", self.mode_steps.to_string()),
            ("completions", self.completions.to_string()),
            ("sigma_init", self.sigma_init.to_string()),
            ("init", if self.encoded_init { "encoded" } else { "random" }.to_string()),
            ("upsample", self.upsample.to_string()),
            ("tau", self.tau.to_string()),
            ("iso", self.iso.to_string()),
            ("eval_cloud", self.eval_cloud.clone()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("ae_checkpoint", self.ae_checkpoint.display().to_string()),
            ("kernel_checkpoint", self.kernel_checkpoint.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Write `config.txt` into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    /// Cross-field checks; builds every derived spec once.
    pub fn validate(&self) -> Result<()> {
        self.data()?;
        self.autoencoder()?;
        self.kernel()?;
        self.ae_training()?;
        self.kernel_training()?;
        self.chain()?;
        if self.completions == 0 {
            return Err(bad("completions", "0", "at least 1"));
        }
        if self.upsample == 0 {
            return Err(bad("upsample", "0", "at least 1"));
        }
        if !(self.sigma_init > 0.0) || !self.sigma_init.is_finite() {
            return Err(bad("sigma_init", &self.sigma_init.to_string(), "a positive number"));
        }
        Ok(())
    }

    pub fn voxel_size(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn nbhd(&self) -> NeighborhoodSpec {
        NeighborhoodSpec {
            radius: self.radius,
            metric: self.metric,
        }
    }

    pub fn data(&self) -> Result<DataConfig> {
        if self.resolution == 0 {
            return Err(bad("resolution", "0", "at least 1"));
        }
        if self.shapes_per_kind <= self.test_per_kind {
            return Err(Error::Config(format!(
                "shapes_per_kind ({}) must exceed test_per_kind ({})",
                self.shapes_per_kind, self.test_per_kind
            )));
        }
        if !(0.0..=1.0).contains(&self.min_rate) {
            return Err(bad("min_rate", &self.min_rate.to_string(), "a rate in [0, 1]"));
        }
        if !(self.scale > 0.0) || !(self.band_sd >= 0.0) || !(self.noise_sd >= 0.0) || !(self.removal_radius >= 0.0) {
            return Err(Error::Config(
                "scale must be positive; band_sd, noise_sd and removal_radius non-negative".into(),
            ));
        }
        if self.surface_points == 0 || self.query_points < 2 {
            return Err(Error::Config("surface_points >= 1 and query_points >= 2 required".into()));
        }
        Ok(DataConfig {
            seed: self.seed,
            resolution: self.resolution,
            shapes_per_kind: self.shapes_per_kind,
            test_per_kind: self.test_per_kind,
            scale: self.scale,
            surface_points: self.surface_points,
            query_points: self.query_points,
            band_sd: self.band_sd,
            mode: self.mode,
            partial: PartialSpec {
                removal_radius: self.removal_radius,
                min_rate: self.min_rate,
                iterations: self.partial_iterations,
                noise_sd: self.noise_sd,
            },
        })
    }

    pub fn autoencoder(&self) -> Result<AutoencoderSpec> {
        for (k, v) in [
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
            ("levels", self.levels),
            ("encoder_width", self.encoder_width),
            ("decoder_width", self.decoder_width),
        ] {
            if v == 0 {
                return Err(bad(k, "0", "at least 1"));
            }
        }
        Ok(AutoencoderSpec {
            latent_dim: self.latent_dim,
            feature_dim: self.feature_dim,
            levels: self.levels,
            encoder_width: self.encoder_width,
            encoder_blocks: self.encoder_blocks,
            decoder_width: self.decoder_width,
            decoder_blocks: self.decoder_blocks,
            mode: self.mode,
        })
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        if self.hidden.contains(&0) {
            return Err(bad("hidden", "0", "positive widths"));
        }
        let mut spec = KernelSpec::new(self.latent_dim, self.cond);
        spec.window_radius = self.window_radius;
        spec.hidden = self.hidden.clone();
        Ok(spec)
    }

    fn check_lr(key: &str, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(bad(key, &lr.to_string(), "a finite rate >= 0"));
        }
        Ok(())
    }

    pub fn ae_training(&self) -> Result<AeTrainConfig> {
        Self::check_lr("ae_lr", self.ae_lr)?;
        Self::check_lr("ae_lr_end", self.ae_lr_end)?;
        if !(self.beta >= 0.0) {
            return Err(bad("beta", &self.beta.to_string(), "beta >= 0"));
        }
        Ok(AeTrainConfig {
            epochs: self.ae_epochs,
            lr: self.ae_lr,
            lr_end: self.ae_lr_end,
            beta: self.beta,
            queries_per_step: self.ae_queries,
            batch_size: self.batch_size.max(1),
            seed: self.seed,
            resolution: self.resolution,
            voxel_size: self.voxel_size(),
            optimizer: self.optimizer,
        })
    }

    pub fn sigma(&self) -> Result<SigmaSchedule> {
        SigmaSchedule::new(self.sigma_base, self.sigma_decay)
    }

    pub fn kernel_training(&self) -> Result<KernelTrainConfig> {
        Self::check_lr("kernel_lr", self.kernel_lr)?;
        if !(self.gamma >= 0.0) {
            return Err(bad("gamma", &self.gamma.to_string(), "gamma >= 0"));
        }
        if self.radius == 0 {
            return Err(bad("radius", "0", "at least 1"));
        }
        Ok(KernelTrainConfig {
            epochs: self.kernel_epochs,
            lr: self.kernel_lr,
            gamma: self.gamma,
            alpha: AlphaSchedule::new(self.alpha0, self.alpha1)?,
            sigma: self.sigma()?,
            nbhd: self.nbhd(),
            max_steps: self.max_steps,
            seed: self.seed,
            optimizer: self.optimizer,
            batch_size: self.batch_size.max(1),
            probe_every: self.probe_every,
        })
    }

    pub fn chain(&self) -> Result<ChainSettings> {
        Ok(ChainSettings {
            steps: self.steps,
            mode_steps: self.mode_steps,
            sigma: self.sigma()?,
            nbhd: self.nbhd(),
        })
    }

    pub fn cloud(&self) -> CloudSource {
        match self.eval_cloud.as_str() {
            "cells" => CloudSource::Cells,
            _ => CloudSource::Surface {
                upsample: self.upsample,
                tau: self.tau,
            },
        }
    }

    pub fn start(&self) -> StartCodes {
        if self.encoded_init {
            StartCodes::Encoded
        } else {
            StartCodes::Random {
                sigma_init: self.sigma_init,
            }
        }
    }

    pub fn evaluation(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            completions: self.completions,
            chain: self.chain()?,
            seed: self.seed,
            cloud: self.cloud(),
            start: self.start(),
        })
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key}: invalid value `{value}` (expected {want})"))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{}: invalid value `{v}` ({e})", key.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_for_both_presets() {
        for c in [Config::full(), Config::desk()] {
            let mut back = Config::full();
            back.apply_text(&c.to_text()).unwrap();
            assert_eq!(back, c);
            c.validate().unwrap();
        }
    }

    #[test]
    fn full_preset_values() {
        let c = Config::full();
        assert_eq!((c.gamma, c.beta, c.latent_dim, c.feature_dim, c.levels), (0.01, 0.001, 32, 32, 3));
        assert_eq!((c.alpha0, c.alpha1, c.mode_steps, c.radius, c.kernel_lr), (0.1, 0.005, 5, 2, 5e-4));
        assert_eq!(c.sigma().unwrap().at(0), 0.1);
    }

    #[test]
    fn unknown_and_malformed_keys_name_the_key() {
        let mut c = Config::desk();
        let e = c.apply_text("seed = 3\nlatent_dims = 4\n").unwrap_err();
        assert!(e.to_string().contains("latent_dims"), "{e}");
        let e = c.apply_text("gamma = lots").unwrap_err();
        assert!(e.to_string().contains("gamma"), "{e}");
        let e = c.apply_text("just words").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
        c.apply_text("# comment\n\n  seed = 11 # trailing\n").unwrap();
        assert_eq!(c.seed, 11);
        c.set("alpha1", "-1").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_line_resets_everything() {
        let mut c = Config::full();
        c.apply_text("seed = 5\npreset = desk\nsteps = 3\n").unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.latent_dim, Config::desk().latent_dim);
        assert_eq!(c.steps, 3);
    }
}
