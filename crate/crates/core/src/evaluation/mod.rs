//! Image-quality tables, downstream Dice with paired significance tests, and
//! per-loss input-gradient maps.

mod metrics;
mod wilcoxon;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

pub use metrics::{
    binarize, hard_dice, psnr, psnr_from_rmse, rmse, ssim, ssim_map, SSIM_K1, SSIM_K2,
    SSIM_SIGMA, SSIM_WINDOW,
};
pub use wilcoxon::{average_ranks, wilcoxon_signed_rank, WilcoxonResult, EXACT_MAX_N};

use crate::error::{Error, Result};
use crate::losses::{l1_loss, mse_loss, perceptual_loss, task_oriented_loss};
use crate::networks::{Network, SegmenterKind};
use crate::phantom::{Case, Image, Mask};
use crate::tensor::Tape;
use crate::training::{batch_images, case_dice, denoise, image_batch};

/// Variant name for "no denoiser": the LDCT image is used directly.
pub const NO_DENOISER: &str = "none";
/// Variant whose Dice is compared against every other variant.
pub const REFERENCE_VARIANT: &str = "tod";
/// Fewest paired cases for which a significance test is reported.
pub const MIN_SIGNIFICANCE_N: usize = 10;

pub const QUALITY_HEADER: &str = "case_id,variant,region,ssim,rmse,psnr";
pub const DICE_HEADER: &str = "case_id,variant,segmenter,dice";
pub const SIGNIFICANCE_HEADER: &str = "variant_a,variant_b,segmenter,n,statistic,p_value";
pub const ROI_MASS_HEADER: &str = "case_id,loss,roi_mass_fraction,roi_area_fraction";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Roi,
    Whole,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Roi => "roi",
            Region::Whole => "whole",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A denoiser under evaluation; `None` stands for the identity.
#[derive(Debug, Clone, Copy)]
pub struct Variant<'a> {
    pub name: &'a str,
    pub generator: Option<&'a Network<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityRow {
    pub case_id: String,
    pub variant: String,
    pub region: Region,
    pub ssim: f64,
    pub rmse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualitySummary {
    pub variant: String,
    pub region: Region,
    pub ssim: f64,
    pub rmse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceRow {
    pub case_id: String,
    pub variant: String,
    pub segmenter: SegmenterKind,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceRow {
    pub variant_a: String,
    pub variant_b: String,
    pub segmenter: SegmenterKind,
    pub n: usize,
    /// `None` when fewer than [`MIN_SIGNIFICANCE_N`] cases are available.
    pub test: Option<WilcoxonResult>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DownstreamReport {
    pub rows: Vec<DiceRow>,
    pub significance: Vec<SignificanceRow>,
}

impl DownstreamReport {
    /// Mean Dice of `(variant, segmenter)`, if any rows exist.
    pub fn mean_dice(&self, variant: &str, segmenter: SegmenterKind) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.segmenter == segmenter)
            .map(|r| r.dice)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn outputs(variants: &[Variant], cases: &[Case]) -> Result<Vec<Vec<Image>>> {
    let ldct: Vec<&Image> = cases.iter().map(|c| &c.ldct).collect();
    variants
        .iter()
        .map(|v| match v.generator {
            Some(g) => denoise(g, &ldct),
            None => Ok(ldct.iter().map(|&i| i.clone()).collect()),
        })
        .collect()
}

/// Per-case SSIM/RMSE/PSNR of each variant against NDCT, on the organ mask
/// and on the whole image. Rows are sorted by case, variant and region.
pub fn evaluate_quality(variants: &[Variant], cases: &[Case]) -> Result<Vec<QualityRow>> {
    let outs = outputs(variants, cases)?;
    let mut rows = Vec::with_capacity(cases.len() * variants.len() * 2);
    for (v, imgs) in variants.iter().zip(&outs) {
        for (c, x) in cases.iter().zip(imgs) {
            for (region, mask) in [(Region::Roi, Some(&c.mask)), (Region::Whole, None)] {
                rows.push(QualityRow {
                    case_id: c.id.clone(),
                    variant: v.name.to_string(),
                    region,
                    ssim: ssim(x, &c.ndct, mask)?,
                    rmse: rmse(x, &c.ndct, mask)?,
                    psnr: psnr(x, &c.ndct, mask, 1.0)?,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.case_id, &a.variant, a.region).cmp(&(&b.case_id, &b.variant, b.region))
    });
    Ok(rows)
}

/// Mean metrics per `(variant, region)`, sorted.
pub fn summarize_quality(rows: &[QualityRow]) -> Vec<QualitySummary> {
    let mut acc: BTreeMap<(String, Region), (f64, f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.variant.clone(), r.region)).or_default();
        e.0 += r.ssim;
        e.1 += r.rmse;
        e.2 += r.psnr;
        e.3 += 1;
    }
    acc.into_iter()
        .map(|((variant, region), (s, e, p, n))| QualitySummary {
            variant,
            region,
            ssim: s / n as f64,
            rmse: e / n as f64,
            psnr: p / n as f64,
        })
        .collect()
}

/// Dice of every segmenter on every variant's output, and two-sided
/// Wilcoxon tests of the reference variant against each other variant.
pub fn evaluate_downstream(
    variants: &[Variant],
    segmenters: &[(SegmenterKind, &Network<f32>)],
    cases: &[Case],
) -> Result<DownstreamReport> {
    let outs = outputs(variants, cases)?;
    let refs: Vec<&Case> = cases.iter().collect();
    let mut rows = Vec::new();
    let mut per: BTreeMap<(String, SegmenterKind), Vec<f64>> = BTreeMap::new();
    for (v, imgs) in variants.iter().zip(&outs) {
        let inputs: Vec<&Image> = imgs.iter().collect();
        for &(kind, seg) in segmenters {
            let dice = case_dice(seg, &inputs, &refs)?;
            for (c, &d) in cases.iter().zip(&dice) {
                rows.push(DiceRow {
                    case_id: c.id.clone(),
                    variant: v.name.to_string(),
                    segmenter: kind,
                    dice: d,
                });
            }
            per.insert((v.name.to_string(), kind), dice);
        }
    }
    rows.sort_by(|a, b| {
        (&a.case_id, &a.variant, a.segmenter).cmp(&(&b.case_id, &b.variant, b.segmenter))
    });

    let mut significance = Vec::new();
    if variants.iter().any(|v| v.name == REFERENCE_VARIANT) {
        for &(kind, _) in segmenters {
            let a = &per[&(REFERENCE_VARIANT.to_string(), kind)];
            for v in variants.iter().filter(|v| v.name != REFERENCE_VARIANT) {
                let b = &per[&(v.name.to_string(), kind)];
                let test = if cases.len() < MIN_SIGNIFICANCE_N {
                    None
                } else {
                    Some(wilcoxon_signed_rank(a, b)?)
                };
                significance.push(SignificanceRow {
                    variant_a: REFERENCE_VARIANT.to_string(),
                    variant_b: v.name.to_string(),
                    segmenter: kind,
                    n: cases.len(),
                    test,
                });
            }
        }
    }
    significance.sort_by(|a, b| (&a.variant_b, a.segmenter).cmp(&(&b.variant_b, b.segmenter)));
    Ok(DownstreamReport { rows, significance })
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn write_quality_csv(mut out: impl Write, rows: &[QualityRow]) -> std::io::Result<()> {
    writeln!(out, "{QUALITY_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.case_id,
            r.variant,
            r.region,
            fmt_metric(r.ssim),
            fmt_metric(r.rmse),
            fmt_metric(r.psnr)
        )?;
    }
    Ok(())
}

pub fn write_dice_csv(mut out: impl Write, rows: &[DiceRow]) -> std::io::Result<()> {
    writeln!(out, "{DICE_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.case_id, r.variant, r.segmenter, fmt_metric(r.dice))?;
    }
    Ok(())
}

pub fn write_significance_csv(mut out: impl Write, rows: &[SignificanceRow]) -> std::io::Result<()> {
    writeln!(out, "{SIGNIFICANCE_HEADER}")?;
    for r in rows {
        let (stat, p) = match r.test {
            Some(t) => (fmt_metric(t.statistic), format!("{:.6e}", t.p_value)),
            None => ("NA".into(), "insufficient n".into()),
        };
        writeln!(out, "{},{},{},{},{},{}", r.variant_a, r.variant_b, r.segmenter, r.n, stat, p)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GradLoss {
    Task,
    Mse,
    L1,
    Perceptual,
}

impl GradLoss {
    pub const ALL: [GradLoss; 4] = [GradLoss::Task, GradLoss::Mse, GradLoss::L1, GradLoss::Perceptual];

    pub fn as_str(self) -> &'static str {
        match self {
            GradLoss::Task => "task",
            GradLoss::Mse => "mse",
            GradLoss::L1 => "l1",
            GradLoss::Perceptual => "perceptual",
        }
    }
}

impl fmt::Display for GradLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMap {
    pub loss: GradLoss,
    /// `|∂L/∂x̂|` scaled so its maximum is 1 (all zeros if the gradient
    /// vanishes).
    pub map: Image,
    /// `Σ_roi |g| / Σ |g|`, 0 for a vanishing gradient.
    pub roi_mass_fraction: f64,
}

/// Normalized `|g|` and its mass fraction inside `mask`.
pub fn grad_map_from(loss: GradLoss, grad: &Image, mask: &Mask) -> GradMap {
    let abs: Vec<f64> = grad.data.iter().map(|v| v.abs()).collect();
    let max = abs.iter().copied().fold(0.0, f64::max);
    let total: f64 = abs.iter().sum();
    let roi: f64 = abs.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    let data = if max > 0.0 {
        abs.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; abs.len()]
    };
    GradMap {
        loss,
        map: Image::new(grad.height, grad.width, data).expect("same layout"),
        roi_mass_fraction: if total > 0.0 { roi / total } else { 0.0 },
    }
}

/// `∂L/∂x̂` maps of the task, MSE, L1 and perceptual losses for one case,
/// with `x̂ = G(LDCT)`. Only `x̂` receives gradients; every network runs in
/// evaluation mode and keeps empty parameter gradients.
pub fn gradient_maps(
    generator: &Network<f32>,
    segmenter: &Network<f32>,
    features: &Network<f32>,
    case: &Case,
) -> Result<Vec<GradMap>> {
    let mut g = generator.clone();
    g.set_training(false);
    let x_hat = g.infer(&image_batch(&[&case.ldct])?)?;
    let target = image_batch(&[&case.ndct])?;
    let mask = image_batch(&[&case.mask.to_image()])?;
    GradLoss::ALL
        .into_iter()
        .map(|loss| {
            let mut tape = Tape::new();
            let x = tape.leaf(x_hat.clone(), true);
            let l = match loss {
                GradLoss::Task => {
                    let m = tape.constant(mask.clone());
                    task_oriented_loss(&mut tape, segmenter, x, m)?
                }
                GradLoss::Mse => {
                    let t = tape.constant(target.clone());
                    mse_loss(&mut tape, x, t)?
                }
                GradLoss::L1 => {
                    let t = tape.constant(target.clone());
                    l1_loss(&mut tape, x, t)?
                }
                GradLoss::Perceptual => {
                    if !features.is_frozen() {
                        return Err(Error::NotFrozen(features.spec().to_string()));
                    }
                    let t = tape.constant(target.clone());
                    perceptual_loss(&mut tape, features, x, t)?
                }
            };
            tape.backward(l.var)?;
            let grad = tape
                .grad(x)
                .cloned()
                .unwrap_or_else(|| crate::tensor::Tensor::zeros(x_hat.shape().to_vec()));
            let img = batch_images(&grad).remove(0);
            Ok(grad_map_from(loss, &img, &case.mask))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_map_normalization() {
        let g = Image::new(1, 4, vec![0.5, -1.0, 0.0, 0.5]).unwrap();
        let m = Mask::new(1, 4, vec![true, true, false, false]).unwrap();
        let gm = grad_map_from(GradLoss::Mse, &g, &m);
        assert_eq!(gm.map.data, vec![0.5, 1.0, 0.0, 0.5]);
        assert!((gm.roi_mass_fraction - 0.75).abs() < 1e-15);
        let z = grad_map_from(GradLoss::Mse, &Image::zeros(1, 4), &m);
        assert_eq!(z.roi_mass_fraction, 0.0);
        assert!(z.map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn significance_csv_marks_small_samples() {
        let rows = vec![SignificanceRow {
            variant_a: "tod".into(),
            variant_b: "none".into(),
            segmenter: SegmenterKind::UnetSmall,
            n: 4,
            test: None,
        }];
        let mut out = Vec::new();
        write_significance_csv(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "variant_a,variant_b,segmenter,n,statistic,p_value\ntod,none,unet_small,4,NA,insufficient n\n"
        );
    }
}
