//! Synthetic NDCT/LDCT/mask datasets on disk.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.tsv            case_id \t split \t ndct_path \t ldct_path \t mask_path
//! ndct/<case>.pgm
//! ldct/<case>.pgm
//! mask/<case>.pgm
//! ```
//!
//! Paths in the manifest are relative to the manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::{
    apply_dose_noise, fbp_reconstruct, generate_phantom, min_bins, radon, read_mask_pgm, read_pgm,
    write_mask_pgm, write_pgm, Image, Mask, RampWindow,
};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

/// Acquisition settings for the low-dose simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseConfig {
    pub photons_per_ray: f64,
    pub angles: usize,
    /// Detector bins; `None` uses the smallest count covering the diagonal.
    pub bins: Option<usize>,
    /// Line-integral units per (image value × pixel length).
    pub attenuation_scale: f64,
    pub window: RampWindow,
}

impl Default for DoseConfig {
    fn default() -> Self {
        Self {
            photons_per_ray: 5e2,
            angles: 180,
            bins: None,
            attenuation_scale: 0.0625,
            window: RampWindow::RamLak,
        }
    }
}

/// Simulated low-dose reconstruction of a clean slice.
pub fn simulate_ldct(ndct: &Image, dose: &DoseConfig, seed: u64) -> Result<Image> {
    let bins = dose.bins.unwrap_or_else(|| min_bins(ndct.height, ndct.width));
    let clean = radon(ndct, dose.angles, bins)?.scaled(dose.attenuation_scale);
    let noisy = apply_dose_noise(&clean, dose.photons_per_ray, seed)?;
    fbp_reconstruct(&noisy.scaled(1.0 / dose.attenuation_scale), ndct.height, dose.window)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub dose: DoseConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 200,
            n_val: 20,
            n_test: 30,
            seed: 2021,
            dose: DoseConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.n_train {
            Split::Train
        } else if index < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Fractions of cases per split, summing to one.
    pub fn ratios(&self) -> [f64; 3] {
        let t = self.total() as f64;
        [self.n_train as f64 / t, self.n_val as f64 / t, self.n_test as f64 / t]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub split: Split,
    pub ndct: PathBuf,
    pub ldct: PathBuf,
    pub mask: PathBuf,
}

/// Cases of a dataset grouped by split, as recorded in its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl DatasetSplit {
    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// One slice pair with its organ mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub ndct: Image,
    pub ldct: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Generates one case; its RNG streams depend only on `(seed, index)`.
pub fn generate_case(config: &DatasetConfig, index: usize) -> Result<Case> {
    let case_seed = derive_seed(config.seed, index as u64);
    let phantom = generate_phantom(case_seed, config.size)?;
    let ldct = simulate_ldct(&phantom.ndct, &config.dose, derive_seed(case_seed, 1))?;
    Ok(Case {
        id: case_id(index),
        ndct: phantom.ndct,
        ldct,
        mask: phantom.organ_mask,
    })
}

/// In-memory dataset, bypassing the file system.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let cases = (0..config.total())
        .into_par_iter()
        .map(|i| generate_case(config, i))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, case) in cases.into_iter().enumerate() {
        match config.split_of(i) {
            Split::Train => ds.train.push(case),
            Split::Val => ds.val.push(case),
            Split::Test => ds.test.push(case),
        }
    }
    Ok(ds)
}

/// Writes every case and the manifest under `out_dir`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetSplit> {
    for sub in ["ndct", "ldct", "mask"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let entries = (0..config.total())
        .into_par_iter()
        .map(|i| {
            let case = generate_case(config, i)?;
            let entry = ManifestEntry {
                case_id: case.id.clone(),
                split: config.split_of(i),
                ndct: PathBuf::from(format!("ndct/{}.pgm", case.id)),
                ldct: PathBuf::from(format!("ldct/{}.pgm", case.id)),
                mask: PathBuf::from(format!("mask/{}.pgm", case.id)),
            };
            write_pgm(&out_dir.join(&entry.ndct), &case.ndct)?;
            write_pgm(&out_dir.join(&entry.ldct), &case.ldct)?;
            write_mask_pgm(&out_dir.join(&entry.mask), &case.mask)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut text = String::new();
    for e in &entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.case_id,
            e.split,
            e.ndct.display(),
            e.ldct.display(),
            e.mask.display()
        ));
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let mut split = group(out_dir, entries);
    split.seed = config.seed;
    Ok(split)
}

fn group(root: &Path, entries: Vec<ManifestEntry>) -> DatasetSplit {
    let mut split = DatasetSplit {
        root: root.to_path_buf(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        ratios: [0.0; 3],
        seed: 0,
    };
    for e in entries {
        match e.split {
            Split::Train => split.train.push(e),
            Split::Val => split.val.push(e),
            Split::Test => split.test.push(e),
        }
    }
    let total = (split.train.len() + split.val.len() + split.test.len()).max(1) as f64;
    split.ratios = [
        split.train.len() as f64 / total,
        split.val.len() as f64 / total,
        split.test.len() as f64 / total,
    ];
    split
}

pub fn read_manifest(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Manifest(format!(
                "line {}: expected 5 tab-separated fields, found {}",
                n + 1,
                cols.len()
            )));
        }
        entries.push(ManifestEntry {
            case_id: cols[0].to_owned(),
            split: cols[1].parse()?,
            ndct: PathBuf::from(cols[2]),
            ldct: PathBuf::from(cols[3]),
            mask: PathBuf::from(cols[4]),
        });
    }
    Ok(group(root, entries))
}

fn load_case(root: &Path, e: &ManifestEntry) -> Result<Case> {
    Ok(Case {
        id: e.case_id.clone(),
        ndct: read_pgm(&root.join(&e.ndct))?,
        ldct: read_pgm(&root.join(&e.ldct))?,
        mask: read_mask_pgm(&root.join(&e.mask))?,
    })
}

pub fn load_dataset(split: &DatasetSplit) -> Result<Dataset> {
    let load = |v: &[ManifestEntry]| v.iter().map(|e| load_case(&split.root, e)).collect::<Result<Vec<_>>>();
    Ok(Dataset {
        train: load(&split.train)?,
        val: load(&split.val)?,
        test: load(&split.test)?,
    })
}
