//! Pipeline stages. Each returns the files it wrote so `reproduce` can
//! checksum them into the run manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use tod_core::evaluation::{
    self, evaluate_downstream, evaluate_quality, gradient_maps, summarize_quality, DownstreamReport,
    QualitySummary, Region, Variant, NO_DENOISER, REFERENCE_VARIANT, ROI_MASS_HEADER,
};
use tod_core::networks::{build_perceptual_net, sidecar_path};
use tod_core::phantom::{build_dataset, load_dataset, read_manifest, write_pgm, Case, Dataset, MANIFEST_FILE};
use tod_core::training::{
    mean_dice, pretrain_segmenter, train_denoiser, EpochRecord, StepRecord, TrainObserver, TrainingLog,
};
use tod_core::{LossVariant, Network, SegmenterKind};

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::{checksum_outputs, unix_now, RunManifest, Stage};

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn create_file(p: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(p).map(BufWriter::new).map_err(|e| CliError::io(p, e))
}

fn checkpoint_files(p: &Path) -> [PathBuf; 2] {
    [p.to_path_buf(), sidecar_path(p)]
}

fn load_frozen(p: &Path) -> Result<Network<f32>, CliError> {
    if !p.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", p.display())));
    }
    let mut n = Network::load(p)?;
    n.freeze();
    Ok(n)
}

/// Loads the dataset recorded in the run's manifest.
pub fn open_dataset(cfg: &Config) -> Result<Dataset, CliError> {
    let manifest = cfg.data_dir().join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(CliError::Usage(format!(
            "dataset manifest {} not found; run gen-data first",
            manifest.display()
        )));
    }
    Ok(load_dataset(&read_manifest(&manifest)?)?)
}

/// Writes the synthetic dataset. Refuses to touch an existing dataset
/// unless `force` is set, in which case it is regenerated from scratch.
pub fn gen_data(cfg: &Config, force: bool) -> Result<Vec<PathBuf>, CliError> {
    let dir = cfg.data_dir();
    if dir.join(MANIFEST_FILE).exists() {
        if !force {
            return Err(CliError::Usage(format!(
                "dataset already exists at {}; pass --force to regenerate",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    create_dir(&dir)?;
    let split = build_dataset(&cfg.data, &dir)?;
    let mut files = vec![dir.join(MANIFEST_FILE)];
    for e in split.entries() {
        files.extend([dir.join(&e.ndct), dir.join(&e.ldct), dir.join(&e.mask)]);
    }
    eprintln!(
        "wrote {} cases ({} train, {} val, {} test) to {}",
        cfg.data.total(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        dir.display()
    );
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterReport {
    pub kind: SegmenterKind,
    pub best_epoch: usize,
    pub ndct_dice: f64,
    pub ldct_dice: f64,
    pub checkpoint: PathBuf,
}

struct EpochCsv<W: Write> {
    out: W,
    label: String,
}

impl<W: Write> TrainObserver for EpochCsv<W> {
    fn on_epoch(&mut self, r: &EpochRecord, _net: &Network<f32>, is_best: bool) -> tod_core::Result<()> {
        writeln!(self.out, "{},{:.6},{:.3}", r.epoch, r.metric, r.wall_secs)
            .and_then(|_| self.out.flush())
            .map_err(|e| tod_core::Error::io(Path::new("epoch log"), e))?;
        eprintln!(
            "{} epoch {} metric {:.4}{}",
            self.label,
            r.epoch,
            r.metric,
            if is_best { " *" } else { "" }
        );
        Ok(())
    }
}

/// Pretrains each segmenter kind on clean NDCT and reports its test Dice
/// on NDCT and LDCT.
pub fn pretrain_seg(cfg: &Config, kinds: &[SegmenterKind]) -> Result<(Vec<SegmenterReport>, Vec<PathBuf>), CliError> {
    let data = open_dataset(cfg)?;
    create_dir(&cfg.checkpoint_dir())?;
    create_dir(&cfg.log_dir())?;
    let hash = cfg.hash();
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for &kind in kinds {
        let log = cfg.log_dir().join(format!("segmenter_{kind}.csv"));
        let mut out = create_file(&log)?;
        writeln!(out, "epoch,val_dice,wall_secs").map_err(|e| CliError::io(&log, e))?;
        let mut obs = EpochCsv { out, label: format!("segmenter {kind}") };
        let o = pretrain_segmenter(kind, &data, &cfg.segmenter, &mut obs)?;
        let ckpt = cfg.segmenter_checkpoint(kind);
        o.network.save(&ckpt, &hash)?;
        println!("ndct_dice {kind} {:.6}", o.test_dice_ndct);
        println!("ldct_dice {kind} {:.6}", o.test_dice_ldct);
        files.extend(checkpoint_files(&ckpt));
        files.push(log);
        reports.push(SegmenterReport {
            kind,
            best_epoch: o.best_epoch,
            ndct_dice: o.test_dice_ndct,
            ldct_dice: o.test_dice_ldct,
            checkpoint: ckpt,
        });
    }
    Ok((reports, files))
}

struct DenoiserObserver<'a> {
    cfg: &'a Config,
    variant: LossVariant,
    hash: String,
    steps: BufWriter<fs::File>,
    steps_path: PathBuf,
    epochs: BufWriter<fs::File>,
    epochs_path: PathBuf,
    half_epoch: usize,
}

impl TrainObserver for DenoiserObserver<'_> {
    fn on_step(&mut self, r: &StepRecord) -> tod_core::Result<()> {
        TrainingLog::write_csv_row(&mut self.steps, r)
            .and_then(|_| self.steps.flush())
            .map_err(|e| tod_core::Error::io(&self.steps_path, e))
    }

    fn on_epoch(&mut self, r: &EpochRecord, net: &Network<f32>, is_best: bool) -> tod_core::Result<()> {
        net.save(&self.cfg.denoiser_last_checkpoint(self.variant), &self.hash)?;
        if is_best {
            net.save(&self.cfg.denoiser_checkpoint(self.variant), &self.hash)?;
        }
        if r.epoch == self.half_epoch {
            net.save(&self.cfg.denoiser_half_checkpoint(self.variant), &self.hash)?;
        }
        writeln!(self.epochs, "{},{:.6},{:.3}", r.epoch, r.metric, r.wall_secs)
            .and_then(|_| self.epochs.flush())
            .map_err(|e| tod_core::Error::io(&self.epochs_path, e))?;
        eprintln!(
            "denoiser {} epoch {} metric {:.4}{}",
            self.variant,
            r.epoch,
            r.metric,
            if is_best { " *" } else { "" }
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserReport {
    pub variant: LossVariant,
    pub best_epoch: usize,
    pub steps: usize,
    pub task_loss_calls: usize,
}

/// Trains one denoiser variant. Checkpoints are replaced atomically after
/// every epoch, so an interrupted run keeps the last completed epoch.
pub fn train_denoiser_cmd(
    cfg: &Config,
    variant: LossVariant,
    segmenter: Option<&Path>,
) -> Result<(DenoiserReport, Vec<PathBuf>), CliError> {
    let mut tc = cfg.training.clone();
    tc.loss_variant = variant;
    tc.validate()?;
    let needs_seg = variant == LossVariant::Tod || tc.metric() == tod_core::training::CheckpointMetric::ValDice;
    let seg = match segmenter {
        Some(p) => Some(load_frozen(p)?),
        None if needs_seg => {
            return Err(CliError::Usage(format!("variant {variant} requires --segmenter <checkpoint>")))
        }
        None => None,
    };
    let data = open_dataset(cfg)?;
    create_dir(&cfg.checkpoint_dir())?;
    create_dir(&cfg.log_dir())?;
    let steps_path = cfg.log_dir().join(format!("denoiser_{variant}_steps.csv"));
    let epochs_path = cfg.log_dir().join(format!("denoiser_{variant}_epochs.csv"));
    let mut steps = create_file(&steps_path)?;
    TrainingLog::write_csv_header(&mut steps).map_err(|e| CliError::io(&steps_path, e))?;
    steps.flush().map_err(|e| CliError::io(&steps_path, e))?;
    let mut epochs = create_file(&epochs_path)?;
    writeln!(epochs, "epoch,{},wall_secs", tc.metric()).map_err(|e| CliError::io(&epochs_path, e))?;
    let mut obs = DenoiserObserver {
        cfg,
        variant,
        hash: cfg.hash(),
        steps,
        steps_path: steps_path.clone(),
        epochs,
        epochs_path: epochs_path.clone(),
        half_epoch: tc.half_trained_epoch(),
    };
    let o = train_denoiser(&data, seg.as_ref(), &tc, &mut obs)?;
    drop(obs);
    println!("best_epoch {variant} {}", o.best_epoch);
    let mut files = vec![steps_path, epochs_path];
    for p in [
        cfg.denoiser_checkpoint(variant),
        cfg.denoiser_last_checkpoint(variant),
        cfg.denoiser_half_checkpoint(variant),
    ] {
        if p.exists() {
            files.extend(checkpoint_files(&p));
        }
    }
    Ok((
        DenoiserReport {
            variant,
            best_epoch: o.best_epoch,
            steps: o.log.steps.len(),
            task_loss_calls: o.task_loss_calls,
        },
        files,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variants: Vec<String>,
    pub quality: Vec<QualitySummary>,
    pub downstream: DownstreamReport,
    /// Mean test Dice of each segmenter on clean NDCT.
    pub ndct_dice: Vec<(SegmenterKind, f64)>,
}

impl EvalReport {
    pub fn quality(&self, variant: &str, region: Region) -> Option<&QualitySummary> {
        self.quality.iter().find(|q| q.variant == variant && q.region == region)
    }
}

fn fmt_dice(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |d| format!("{:.4}", d))
}

/// Image quality and downstream Dice on the test split for every trained
/// variant found on disk, plus the identity baseline.
pub fn evaluate(cfg: &Config) -> Result<(EvalReport, Vec<PathBuf>), CliError> {
    let data = open_dataset(cfg)?;
    let mut segs = Vec::new();
    for &k in &cfg.segmenters {
        segs.push((k, load_frozen(&cfg.segmenter_checkpoint(k))?));
    }
    let mut gens = Vec::new();
    for &v in &cfg.variants {
        let p = cfg.denoiser_checkpoint(v);
        if p.exists() {
            gens.push((v, Network::<f32>::load(&p)?));
        } else {
            eprintln!("warning: no checkpoint for variant {v} at {}; skipping it", p.display());
        }
    }
    let mut variants = vec![Variant { name: NO_DENOISER, generator: None }];
    variants.extend(gens.iter().map(|(v, g)| Variant { name: v.as_str(), generator: Some(g) }));
    let seg_refs: Vec<(SegmenterKind, &Network<f32>)> = segs.iter().map(|(k, n)| (*k, n)).collect();

    let rows = evaluate_quality(&variants, &data.test)?;
    let quality = summarize_quality(&rows);
    let downstream = evaluate_downstream(&variants, &seg_refs, &data.test)?;
    let cases: Vec<&Case> = data.test.iter().collect();
    let ndct: Vec<_> = data.test.iter().map(|c| &c.ndct).collect();
    let ndct_dice = seg_refs
        .iter()
        .map(|&(k, n)| Ok((k, mean_dice(n, &ndct, &cases)?)))
        .collect::<Result<Vec<_>, CliError>>()?;

    let dir = cfg.results_dir();
    create_dir(&dir)?;
    let paths = ["quality.csv", "dice.csv", "significance.csv", "summary.txt"].map(|n| dir.join(n));
    let mut w = create_file(&paths[0])?;
    evaluation::write_quality_csv(&mut w, &rows).and_then(|_| w.flush()).map_err(|e| CliError::io(&paths[0], e))?;
    let mut w = create_file(&paths[1])?;
    evaluation::write_dice_csv(&mut w, &downstream.rows)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&paths[1], e))?;
    let mut w = create_file(&paths[2])?;
    evaluation::write_significance_csv(&mut w, &downstream.significance)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&paths[2], e))?;

    let names: Vec<String> = variants.iter().map(|v| v.name.to_string()).collect();
    let mut s = String::new();
    s.push_str("variant,region,ssim,rmse,psnr\n");
    for q in &quality {
        s.push_str(&format!("{},{},{:.4},{:.4},{:.2}\n", q.variant, q.region, q.ssim, q.rmse, q.psnr));
    }
    s.push_str("\nsegmenter,ndct");
    for n in &names {
        s.push_str(&format!(",{n}"));
    }
    s.push('\n');
    for (k, d) in &ndct_dice {
        s.push_str(&format!("{k},{d:.4}"));
        for n in &names {
            s.push_str(&format!(",{}", fmt_dice(downstream.mean_dice(n, *k))));
        }
        s.push('\n');
    }
    fs::write(&paths[3], &s).map_err(|e| CliError::io(&paths[3], e))?;
    print!("{s}");
    Ok((EvalReport { variants: names, quality, downstream, ndct_dice }, paths.to_vec()))
}

/// Which test cases to compute gradient maps for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaseSelection {
    All,
    /// The first `n` test cases.
    First(usize),
    Id(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiMassRow {
    pub case_id: String,
    pub loss: evaluation::GradLoss,
    pub roi_mass_fraction: f64,
    pub roi_area_fraction: f64,
}

/// Gradient maps of every loss with respect to the denoiser output, for
/// the selected test cases. Defaults to the half-trained tod checkpoint.
pub fn gradmaps(
    cfg: &Config,
    checkpoint: Option<&Path>,
    cases: &CaseSelection,
) -> Result<(Vec<RoiMassRow>, Vec<PathBuf>), CliError> {
    let ckpt = checkpoint.map_or_else(|| cfg.denoiser_half_checkpoint(LossVariant::Tod), Path::to_path_buf);
    let generator = load_frozen(&ckpt)?;
    let seg = load_frozen(&cfg.segmenter_checkpoint(cfg.representative))?;
    let features = build_perceptual_net::<f32>(cfg.perceptual_seed);
    let data = open_dataset(cfg)?;
    let selected: Vec<&Case> = match cases {
        CaseSelection::All => data.test.iter().collect(),
        CaseSelection::First(n) => data.test.iter().take(*n).collect(),
        CaseSelection::Id(id) => {
            let c = data
                .test
                .iter()
                .find(|c| &c.id == id)
                .ok_or_else(|| CliError::Usage(format!("no test case with id {id}")))?;
            vec![c]
        }
    };
    let dir = cfg.results_dir().join("gradmaps");
    create_dir(&dir)?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for c in selected {
        for m in gradient_maps(&generator, &seg, &features, c)? {
            let p = dir.join(format!("gradmap_{}_{}.pgm", m.loss, c.id));
            write_pgm(&p, &m.map)?;
            files.push(p);
            rows.push(RoiMassRow {
                case_id: c.id.clone(),
                loss: m.loss,
                roi_mass_fraction: m.roi_mass_fraction,
                roi_area_fraction: c.mask.fraction(),
            });
        }
    }
    let csv = cfg.results_dir().join("roi_mass.csv");
    let mut s = format!("{ROI_MASS_HEADER}\n");
    for r in &rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.case_id, r.loss, r.roi_mass_fraction, r.roi_area_fraction
        ));
    }
    fs::write(&csv, s).map_err(|e| CliError::io(&csv, e))?;
    files.push(csv);
    Ok((rows, files))
}

/// Outcome of one directional acceptance check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceReport {
    pub segmenters: Vec<SegmenterReport>,
    pub denoisers: Vec<DenoiserReport>,
    pub evaluation: EvalReport,
    pub roi_mass: Vec<RoiMassRow>,
    pub checks: Vec<Check>,
    pub manifest: PathBuf,
    pub wall_secs: f64,
}

impl ReproduceReport {
    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("criterion {} ({}): {}", c.criterion, c.name, c.detail))
            .collect()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Minimum NDCT minus LDCT Dice drop for the representative segmenter.
pub const MIN_NOISE_DEGRADATION: f64 = 0.05;
/// Minimum Dice gain of task-oriented denoising over no denoising.
pub const MIN_DOWNSTREAM_BOOST: f64 = 0.03;
/// Segmenters on which task-oriented denoising must match or beat MSE.
pub const MIN_SEGMENTER_WINS: usize = 3;
/// Test cases needed for the gradient concentration check.
pub const MIN_GRADMAP_CASES: usize = 10;

/// Directional checks of the pipeline outcome.
pub fn directional_checks(
    cfg: &Config,
    segs: &[SegmenterReport],
    eval: &EvalReport,
    roi_mass: &[RoiMassRow],
) -> Vec<Check> {
    let rep = cfg.representative;
    let mut checks = Vec::new();

    let (passed, detail) = match segs.iter().find(|s| s.kind == rep) {
        Some(s) => (
            s.ndct_dice - s.ldct_dice >= MIN_NOISE_DEGRADATION,
            format!("{rep}: NDCT dice {:.4}, LDCT dice {:.4}", s.ndct_dice, s.ldct_dice),
        ),
        None => (false, format!("representative segmenter {rep} was not trained")),
    };
    checks.push(Check { criterion: 3, name: "noise degradation", passed, detail });

    let d = &eval.downstream;
    let tod = REFERENCE_VARIANT;
    let mse = LossVariant::MseOnly.as_str();
    let (passed, detail) = match (d.mean_dice(tod, rep), d.mean_dice(NO_DENOISER, rep)) {
        (Some(t), Some(n)) => {
            let wins = cfg
                .segmenters
                .iter()
                .filter(|&&k| matches!((d.mean_dice(tod, k), d.mean_dice(mse, k)), (Some(a), Some(b)) if a >= b))
                .count();
            let need = cfg.segmenters.len().min(MIN_SEGMENTER_WINS);
            (
                t - n >= MIN_DOWNSTREAM_BOOST && wins >= need,
                format!("{rep}: tod dice {t:.4} vs none {n:.4}; tod >= mse_only on {wins}/{} segmenters", cfg.segmenters.len()),
            )
        }
        _ => (false, "tod or no-denoiser dice missing".to_string()),
    };
    checks.push(Check { criterion: 4, name: "downstream boost", passed, detail });

    let q = |v: &str, r: Region| eval.quality(v, r).map(|s| s.rmse);
    let (passed, detail) = match (q(tod, Region::Roi), q(mse, Region::Roi), q(tod, Region::Whole), q(mse, Region::Whole)) {
        (Some(tr), Some(mr), Some(tw), Some(mw)) => {
            let roi_ratio = mr / tr;
            let whole_ratio = mw / tw;
            (
                tr <= mr && roi_ratio > whole_ratio,
                format!(
                    "ROI RMSE tod {tr:.5} mse_only {mr:.5}; improvement ratio ROI {roi_ratio:.4} whole {whole_ratio:.4}"
                ),
            )
        }
        _ => (false, "tod or mse_only quality missing".to_string()),
    };
    checks.push(Check { criterion: 5, name: "ROI quality", passed, detail });

    let task = || roi_mass.iter().filter(|r| r.loss == evaluation::GradLoss::Task);
    let n = task().count();
    let t = mean(task().map(|r| r.roi_mass_fraction));
    let m = mean(roi_mass.iter().filter(|r| r.loss == evaluation::GradLoss::Mse).map(|r| r.roi_mass_fraction));
    let area = mean(task().map(|r| r.roi_area_fraction));
    checks.push(Check {
        criterion: 6,
        name: "gradient concentration",
        passed: n >= MIN_GRADMAP_CASES && t > m && t > area,
        detail: format!("{n} cases: ROI mass task {t:.4}, mse {m:.4}, ROI area {area:.4}"),
    });
    checks
}

/// Runs every stage into a fresh run directory, writes the run manifest
/// and evaluates the directional checks.
pub fn reproduce(cfg: &Config, force: bool) -> Result<ReproduceReport, CliError> {
    let start = Instant::now();
    let root = cfg.run_root();
    let manifest_path = root.join("run_manifest.json");
    if manifest_path.exists() && !force {
        return Err(CliError::Usage(format!(
            "run {} already exists; pass --force to redo it",
            root.display()
        )));
    }
    create_dir(&root)?;
    let mut manifest = RunManifest::new(cfg.hash());
    let mut stage = |name: &str, t0: u64, files: &[PathBuf]| -> Result<(), CliError> {
        manifest.stages.push(Stage {
            name: name.to_string(),
            started_unix: t0,
            finished_unix: unix_now(),
            outputs: checksum_outputs(&root, files)?,
        });
        Ok(())
    };

    let t0 = unix_now();
    let files = gen_data(cfg, true)?;
    stage("gen-data", t0, &files)?;

    let t0 = unix_now();
    let (segs, files) = pretrain_seg(cfg, &cfg.segmenters)?;
    stage("pretrain-seg", t0, &files)?;

    let rep_ckpt = cfg.segmenter_checkpoint(cfg.representative);
    let mut denoisers = Vec::new();
    for &v in &cfg.variants {
        let t0 = unix_now();
        let (r, files) = train_denoiser_cmd(cfg, v, Some(&rep_ckpt))?;
        stage(&format!("train-denoiser-{v}"), t0, &files)?;
        denoisers.push(r);
    }

    let t0 = unix_now();
    let (eval, files) = evaluate(cfg)?;
    stage("evaluate", t0, &files)?;

    let t0 = unix_now();
    let sel = match cfg.gradmap_cases {
        0 => CaseSelection::All,
        n => CaseSelection::First(n),
    };
    let (roi_mass, files) = if cfg.variants.contains(&LossVariant::Tod) {
        gradmaps(cfg, None, &sel)?
    } else {
        (Vec::new(), Vec::new())
    };
    stage("gradmaps", t0, &files)?;

    manifest.write(&manifest_path)?;
    let checks = directional_checks(cfg, &segs, &eval, &roi_mass);
    Ok(ReproduceReport {
        segmenters: segs,
        denoisers,
        evaluation: eval,
        roi_mass,
        checks,
        manifest: manifest_path,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}
