//! Image-quality and overlap metrics, optionally restricted to a mask.

use crate::error::{Error, Result};
use crate::phantom::{Image, Mask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Image, b: &Image, mask: Option<&Mask>, op: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(op, &[a.height, a.width], &[b.height, b.width]));
    }
    if let Some(m) = mask {
        if (m.height, m.width) != (a.height, a.width) {
            return Err(Error::shape(op, &[a.height, a.width], &[m.height, m.width]));
        }
        if m.count() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    Ok(())
}

/// Root-mean-square difference over the mask, or the whole image.
pub fn rmse(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask, "rmse")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        if mask.is_none_or(|m| m.data[i]) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

/// `20·log10(peak / rmse)`; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Image, b: &Image, mask: Option<&Mask>, peak: f64) -> Result<f64> {
    let e = rmse(a, b, mask)?;
    Ok(psnr_from_rmse(e, peak))
}

pub fn psnr_from_rmse(rmse: f64, peak: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (peak / rmse).log10()
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering: output is `(h−10)×(w−10)`.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..n).map(|j| k[j] * data[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|j| k[j] * rows[(r + j) * wo + c]).sum();
        }
    }
    out
}

/// Local SSIM map over valid window positions. Entry `(r, c)` belongs to
/// the window centred on pixel `(r + 5, c + 5)`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<(usize, usize, Vec<f64>)> {
    check_pair(a, b, None, "ssim")?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {}×{}",
            a.height, a.width
        )));
    }
    let (h, w) = (a.height, a.width);
    let k = gaussian_kernel();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(&a.data, h, w, &k);
    let mu_b = filter_valid(&b.data, h, w, &k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let map = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    Ok((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1, map))
}

/// Mean SSIM over valid windows; with a mask, over windows whose centre
/// lies in the mask.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask, "ssim")?;
    let (ho, wo, map) = ssim_map(a, b)?;
    let off = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..ho {
        for c in 0..wo {
            if mask.is_none_or(|m| m.data[(r + off) * m.width + c + off]) {
                sum += map[r * wo + c];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// `2|A∩B| / (|A|+|B|)`, defined as 1 when both masks are empty.
pub fn hard_dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape("hard_dice", &[pred.height, pred.width], &[gt.height, gt.width]));
    }
    let inter = pred.data.iter().zip(&gt.data).filter(|(&p, &g)| p && g).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Thresholds a probability map at 0.5.
pub fn binarize(probs: &Image) -> Mask {
    Mask::from_image(probs, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| ((i * 37) % 97) as f64 / 96.0).collect()).unwrap()
    }

    #[test]
    fn rmse_and_psnr_closed_forms() {
        let a = ramp(16, 16);
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, None, 1.0).unwrap(), f64::INFINITY);
        let b = Image::new(16, 16, a.data.iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((rmse(&a, &b, None).unwrap() - 0.1).abs() < 1e-12);
        assert!((psnr_from_rmse(0.1, 1.0) - 20.0).abs() < 1e-12);
        assert!((psnr_from_rmse(0.01, 1.0) - 40.0).abs() < 1e-12);
        assert!((psnr_from_rmse(0.05, 1.0) - psnr_from_rmse(0.1, 1.0) - 20.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = ramp(16, 16);
        let m = Mask::new(16, 16, vec![false; 256]).unwrap();
        assert!(matches!(rmse(&a, &a, Some(&m)), Err(Error::EmptyMask)));
        assert!(matches!(ssim(&a, &a, Some(&m)), Err(Error::EmptyMask)));
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = ramp(24, 24);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let inv = Image::new(24, 24, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv, None).unwrap() < 0.5);
        let (_, _, map) = ssim_map(&a, &inv).unwrap();
        assert!(map.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(ssim(&ramp(8, 8), &ramp(8, 8), None).is_err());
    }

    #[test]
    fn dice_examples() {
        let m = |v: &[bool]| Mask::new(1, v.len(), v.to_vec()).unwrap();
        let a = m(&[true, true, false, false]);
        assert_eq!(hard_dice(&a, &a).unwrap(), 1.0);
        assert_eq!(hard_dice(&a, &m(&[false, false, true, true])).unwrap(), 0.0);
        assert_eq!(hard_dice(&a, &m(&[true, false, true, false])).unwrap(), 0.5);
        let e = m(&[false; 4]);
        assert_eq!(hard_dice(&e, &e).unwrap(), 1.0);
    }
}
