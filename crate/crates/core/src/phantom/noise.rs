use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::rng::rng_for;

use super::Sinogram;

/// Transmission noise at `photons_per_ray` incident photons: each ray's
/// count is drawn from `Poisson(I0·exp(−p))`, zero counts are raised to one
/// photon, and the noisy integral is `−ln(count / I0)`.
pub fn apply_dose_noise(sino: &Sinogram, photons_per_ray: f64, seed: u64) -> Result<Sinogram> {
    if !(photons_per_ray > 0.0 && photons_per_ray.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "photons_per_ray must be positive and finite, got {photons_per_ray}"
        )));
    }
    let mut rng = rng_for(seed, 0x4e4f_4953);
    let values = sino
        .values
        .iter()
        .map(|&p| {
            let expected = photons_per_ray * (-p).exp();
            let count = if expected > 0.0 {
                Poisson::new(expected)
                    .map(|d| d.sample(&mut rng))
                    .unwrap_or(expected)
            } else {
                0.0
            };
            -(count.max(1.0) / photons_per_ray).ln()
        })
        .collect();
    Ok(Sinogram {
        values,
        ..sino.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_sino() -> Sinogram {
        let mut s = Sinogram::zeros(8, 16);
        for (i, v) in s.values.iter_mut().enumerate() {
            *v = (i % 16) as f64 * 0.1;
        }
        s
    }

    #[test]
    fn same_seed_same_noise() {
        let s = ramp_sino();
        assert_eq!(apply_dose_noise(&s, 1e3, 9).unwrap(), apply_dose_noise(&s, 1e3, 9).unwrap());
        assert_ne!(apply_dose_noise(&s, 1e3, 9).unwrap(), apply_dose_noise(&s, 1e3, 10).unwrap());
    }

    #[test]
    fn zero_counts_clamp_to_one_photon() {
        let mut s = Sinogram::zeros(8, 1);
        s.values.fill(1e3);
        let noisy = apply_dose_noise(&s, 100.0, 1).unwrap();
        assert!(noisy.values.iter().all(|&v| (v - 100f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn rejects_non_positive_dose() {
        assert!(apply_dose_noise(&ramp_sino(), 0.0, 1).is_err());
    }
}
