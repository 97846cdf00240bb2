//! Flat `key = value` configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [data]
//! size = 64
//! photons_per_ray = 500
//! ```
//!
//! Unknown sections or keys are errors naming the line and key. Relative
//! paths are resolved against the directory holding the config file.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tod_core::phantom::{DatasetConfig, RampWindow};
use tod_core::training::{CheckpointMetric, SegmenterConfig};
use tod_core::{LossVariant, SegmenterKind, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
    /// Root of every artifact written by the pipeline.
    pub run_dir: PathBuf,
    pub data: DatasetConfig,
    pub segmenters: Vec<SegmenterKind>,
    pub representative: SegmenterKind,
    pub segmenter: SegmenterConfig,
    /// Denoiser training; `loss_variant` is set per run.
    pub training: TrainConfig,
    /// Denoiser variants trained and evaluated (besides "none").
    pub variants: Vec<LossVariant>,
    /// Test cases used for gradient maps; 0 means the whole test split.
    pub gradmap_cases: usize,
    pub perceptual_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            base_dir: PathBuf::from("."),
            run_dir: PathBuf::from("run"),
            data: DatasetConfig::default(),
            segmenters: SegmenterKind::ALL.to_vec(),
            representative: SegmenterKind::UnetSmall,
            segmenter: SegmenterConfig::default(),
            training: TrainConfig::default(),
            variants: vec![LossVariant::Tod, LossVariant::MseOnly],
            gradmap_cases: 0,
            perceptual_seed: 7,
        }
    }
}

fn list<T: FromStr>(v: &str) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = v.split(',').map(|s| s.trim().parse().ok()).collect();
    items.filter(|i| !i.is_empty())
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg = Config {
            base_dir: base_dir.to_path_buf(),
            ..Config::default()
        };
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(CliError::Config {
                        line: line_no,
                        key: format!("[{name}]"),
                        message: "unknown section".into(),
                    });
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config {
                    line: line_no,
                    key: line.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.set(&section, key, value).map_err(|message| CliError::Config {
                line: line_no,
                key: if section.is_empty() { key.to_string() } else { format!("{section}.{key}") },
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}`"))
        }
        fn parsed<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse().map_err(|e: T::Err| e.to_string())
        }
        let bad_list = || format!("invalid list `{v}`");
        let d = &mut self.data;
        let t = &mut self.training;
        match (section, key) {
            ("run", "dir") => self.run_dir = PathBuf::from(v),
            ("data", "size") => d.size = num(v)?,
            ("data", "n_train") => d.n_train = num(v)?,
            ("data", "n_val") => d.n_val = num(v)?,
            ("data", "n_test") => d.n_test = num(v)?,
            ("data", "seed") => d.seed = num(v)?,
            ("data", "photons_per_ray") => d.dose.photons_per_ray = num(v)?,
            ("data", "angles") => d.dose.angles = num(v)?,
            ("data", "bins") => d.dose.bins = if v == "auto" { None } else { Some(num(v)?) },
            ("data", "attenuation_scale") => d.dose.attenuation_scale = num(v)?,
            ("data", "window") => d.dose.window = parsed::<RampWindow>(v)?,
            ("networks", "denoiser_channels") => t.denoiser_channels = list(v).ok_or_else(bad_list)?,
            ("networks", "denoiser_kernel") => t.denoiser_kernel = num(v)?,
            ("networks", "segmenters") => self.segmenters = list(v).ok_or_else(bad_list)?,
            ("networks", "representative") => self.representative = parsed(v)?,
            ("networks", "perceptual_seed") => self.perceptual_seed = num(v)?,
            ("segmenter", "lr") => self.segmenter.lr = num(v)?,
            ("segmenter", "batch_size") => self.segmenter.batch_size = num(v)?,
            ("segmenter", "epochs") => self.segmenter.epochs = num(v)?,
            ("segmenter", "seed") => self.segmenter.seed = num(v)?,
            ("training", "lr") => t.lr = num(v)?,
            ("training", "batch_size") => t.batch_size = num(v)?,
            ("training", "epochs") => t.epochs = num(v)?,
            ("training", "lambda_mse") => t.lambda_mse = num(v)?,
            ("training", "clamp_eps") => t.clamp_eps = num(v)?,
            ("training", "critic_steps_per_gen_step") => t.critic_steps_per_gen_step = num(v)?,
            ("training", "seed") => t.seed = num(v)?,
            ("training", "checkpoint_metric") => {
                t.checkpoint_metric = if v == "auto" { None } else { Some(parsed::<CheckpointMetric>(v)?) }
            }
            ("evaluation", "variants") => self.variants = list(v).ok_or_else(bad_list)?,
            ("evaluation", "gradmap_cases") => self.gradmap_cases = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Usage(format!("invalid config: {m}")));
        let d = &self.data;
        if d.size < 32 || d.size % 4 != 0 {
            return err(format!("data.size must be a multiple of 4 and at least 32, got {}", d.size));
        }
        if d.n_train == 0 || d.n_val == 0 || d.n_test == 0 {
            return err("data.n_train, n_val and n_test must be positive".into());
        }
        if !(d.dose.photons_per_ray > 0.0) || !(d.dose.attenuation_scale > 0.0) {
            return err("dose parameters must be positive".into());
        }
        if !self.segmenters.contains(&self.representative) {
            return err(format!("representative segmenter {} is not in networks.segmenters", self.representative));
        }
        if self.segmenter.epochs == 0 || self.segmenter.batch_size == 0 || !(self.segmenter.lr > 0.0) {
            return err("segmenter lr, batch_size and epochs must be positive".into());
        }
        self.training
            .validate()
            .or_else(|e| err(e.to_string()))?;
        Ok(())
    }

    /// Sorted `section.key = value` lines covering every setting.
    pub fn canonical(&self) -> String {
        let d = &self.data;
        let t = &self.training;
        let mut lines = vec![
            format!("run.dir = {}", self.run_dir.display()),
            format!("data.size = {}", d.size),
            format!("data.n_train = {}", d.n_train),
            format!("data.n_val = {}", d.n_val),
            format!("data.n_test = {}", d.n_test),
            format!("data.seed = {}", d.seed),
            format!("data.photons_per_ray = {}", d.dose.photons_per_ray),
            format!("data.angles = {}", d.dose.angles),
            format!("data.bins = {}", d.dose.bins.map_or("auto".into(), |b| b.to_string())),
            format!("data.attenuation_scale = {}", d.dose.attenuation_scale),
            format!("data.window = {}", match d.dose.window { RampWindow::RamLak => "ramlak", RampWindow::Hann => "hann" }),
            format!("networks.denoiser_channels = {}", join(&t.denoiser_channels)),
            format!("networks.denoiser_kernel = {}", t.denoiser_kernel),
            format!("networks.segmenters = {}", join(&self.segmenters)),
            format!("networks.representative = {}", self.representative),
            format!("networks.perceptual_seed = {}", self.perceptual_seed),
            format!("segmenter.lr = {}", self.segmenter.lr),
            format!("segmenter.batch_size = {}", self.segmenter.batch_size),
            format!("segmenter.epochs = {}", self.segmenter.epochs),
            format!("segmenter.seed = {}", self.segmenter.seed),
            format!("training.lr = {}", t.lr),
            format!("training.batch_size = {}", t.batch_size),
            format!("training.epochs = {}", t.epochs),
            format!("training.lambda_mse = {}", t.lambda_mse),
            format!("training.clamp_eps = {}", t.clamp_eps),
            format!("training.critic_steps_per_gen_step = {}", t.critic_steps_per_gen_step),
            format!("training.seed = {}", t.seed),
            format!("training.checkpoint_metric = {}", t.checkpoint_metric.map_or("auto".into(), |m| m.to_string())),
            format!("evaluation.variants = {}", join(&self.variants)),
            format!("evaluation.gradmap_cases = {}", self.gradmap_cases),
        ];
        lines.sort();
        lines.iter().fold(String::new(), |mut s, l| {
            let _ = writeln!(s, "{l}");
            s
        })
    }

    /// Hex SHA-256 of [`Config::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_root(&self) -> PathBuf {
        self.resolve(&self.run_dir)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.run_root().join("data")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_root().join("checkpoints")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.run_root().join("logs")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.run_root().join("results")
    }

    pub fn segmenter_checkpoint(&self, kind: SegmenterKind) -> PathBuf {
        self.checkpoint_dir().join(format!("segmenter_{kind}.todn"))
    }

    pub fn denoiser_checkpoint(&self, variant: LossVariant) -> PathBuf {
        self.checkpoint_dir().join(format!("denoiser_{variant}.todn"))
    }

    pub fn denoiser_last_checkpoint(&self, variant: LossVariant) -> PathBuf {
        self.checkpoint_dir().join(format!("denoiser_{variant}_last.todn"))
    }

    pub fn denoiser_half_checkpoint(&self, variant: LossVariant) -> PathBuf {
        self.checkpoint_dir().join(format!("denoiser_{variant}_half.todn"))
    }
}

const SECTIONS: [&str; 6] = ["run", "data", "networks", "segmenter", "training", "evaluation"];

/// Default configuration as a commented config file.
pub fn default_config_text() -> String {
    let c = Config::default();
    let d = &c.data;
    let t = &c.training;
    format!(
        "# Task-oriented denoising: default experiment.\n\
         [run]\ndir = {}\n\n\
         [data]\nsize = {}\nn_train = {}\nn_val = {}\nn_test = {}\nseed = {}\n\
         photons_per_ray = {}\nangles = {}\nbins = auto\nattenuation_scale = {}\nwindow = ramlak\n\n\
         [networks]\ndenoiser_channels = {}\ndenoiser_kernel = {}\nsegmenters = {}\nrepresentative = {}\nperceptual_seed = {}\n\n\
         [segmenter]\nlr = {}\nbatch_size = {}\nepochs = {}\nseed = {}\n\n\
         [training]\nlr = {}\nbatch_size = {}\nepochs = {}\nlambda_mse = {}\nclamp_eps = {}\n\
         critic_steps_per_gen_step = {}\nseed = {}\ncheckpoint_metric = auto\n\n\
         [evaluation]\nvariants = {}\ngradmap_cases = {}\n",
        c.run_dir.display(),
        d.size, d.n_train, d.n_val, d.n_test, d.seed,
        d.dose.photons_per_ray, d.dose.angles, d.dose.attenuation_scale,
        join(&t.denoiser_channels), t.denoiser_kernel, join(&c.segmenters), c.representative, c.perceptual_seed,
        c.segmenter.lr, c.segmenter.batch_size, c.segmenter.epochs, c.segmenter.seed,
        t.lr, t.batch_size, t.epochs, t.lambda_mse, t.clamp_eps, t.critic_steps_per_gen_step, t.seed,
        join(&c.variants), c.gradmap_cases,
    )
}
