//! Synthetic CT data: phantoms, projection, dose noise and reconstruction.

mod dataset;
mod generate;
mod image;
mod noise;
mod pgm;
mod radon;

pub use dataset::{
    build_dataset, case_id, generate_case, generate_dataset, load_dataset, read_manifest,
    simulate_ldct, Case, Dataset, DatasetConfig, DatasetSplit, DoseConfig, ManifestEntry, Split,
    MANIFEST_FILE,
};
pub use generate::{generate_phantom, Phantom, MAX_MASK_FRACTION, MIN_MASK_FRACTION, MIN_PHANTOM_SIZE};
pub use image::{Image, Mask};
pub use noise::apply_dose_noise;
pub use pgm::{decode_pgm, encode_pgm, read_mask_pgm, read_pgm, write_mask_pgm, write_pgm, PGM_MAXVAL};
pub use radon::{fbp_reconstruct, min_bins, radon, uniform_angles, RampWindow, Sinogram, MIN_ANGLES};
