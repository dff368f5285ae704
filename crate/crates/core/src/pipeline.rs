//! Training, evaluation and timing reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clayers::BnMode;
use crate::cmodel::{output_gradient, split_predictions, step, Checkpoint, Mode, Model, ModelConfig, OptimizerState};
use crate::ctensor::{fft, Real, SpectrumFrame};
use crate::error::{Error, Result};
use crate::lad::{lad_detect, LadConfig};
use crate::objectives::{
    binarize, boxes_from_masks, cbce, cfl, detection_metrics, extract_segments, rbce, rfl, sample_ciou, BoxZ, Decision,
    EarlyStopping, EpochScore, OccupancyMask, PredictedSpectrum, Segment, StopRule,
};
use crate::parallel::par_map;
use crate::siggen::{Dataset, SampleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cfl,
    Cbce,
    Rfl,
    Rbce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_reduced: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub min_delta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub mode: Mode,
    /// Probability threshold for binarizing predictions during validation.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr_initial: 1e-3,
            lr_reduced: 1e-4,
            lr_patience: 3,
            stop_patience: 3,
            min_delta: 1e-4,
            gamma: 1.0,
            alpha: 3.0,
            max_epochs: 30,
            seed: 0,
            loss: LossKind::Cfl,
            mode: Mode::Complex,
            tau: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.lr_patience < 1 || self.stop_patience < 1 {
            return bad("patience values must be at least 1");
        }
        if !(self.lr_initial >= 0.0 && self.lr_reduced >= 0.0 && self.min_delta >= 0.0) {
            return bad("learning rates and min_delta must be non-negative");
        }
        if !(self.gamma >= 0.0 && self.alpha > 0.0) {
            return bad("focal loss needs gamma >= 0 and alpha > 0");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if self.mode == Mode::Complex && matches!(self.loss, LossKind::Rfl | LossKind::Rbce) {
            return bad("rfl/rbce take a single probability channel; use them with mode = real");
        }
        Ok(())
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule { patience: self.stop_patience, lr_patience: Some(self.lr_patience), min_delta: self.min_delta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ciou: f64,
    pub val_acc05: f64,
    pub seconds: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_loss,val_ciou,val_acc05,seconds";

pub fn write_epoch_csv(w: &mut impl Write, reports: &[EpochReport]) -> std::io::Result<()> {
    writeln!(w, "{EPOCH_CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{},{:.9},{:.9},{:.6},{:.6},{:.3}", r.epoch, r.train_loss, r.val_loss, r.val_ciou, r.val_acc05, r.seconds)?;
    }
    Ok(())
}

pub fn read_epoch_csv(text: &str) -> Result<Vec<EpochReport>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(EPOCH_CSV_HEADER) {
        return Err(Error::FormatVersionMismatch("epoch report CSV header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::CorruptRecord { index: i, reason: format!("bad epoch row `{l}`") };
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad());
            Ok(EpochReport {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                val_ciou: num(3)?,
                val_acc05: num(4)?,
                seconds: num(5)?,
            })
        })
        .collect()
}

/// Result of a training run: the best-validation checkpoint plus history.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Model<T>,
    pub reports: Vec<EpochReport>,
    /// Epoch after which the learning rate dropped, if it did.
    pub lr_reduced_after: Option<usize>,
    pub stopped_early: bool,
}

/// Spectrum of a record at precision `T`.
pub fn spectrum_of<T: Real>(rec: &SampleRecord) -> SpectrumFrame<T> {
    fft(&rec.frame.cast::<T>()).expect("records hold power-of-two frames")
}

/// Ground-truth occupancy for a record (both parts equal).
pub fn target_of(rec: &SampleRecord) -> OccupancyMask {
    OccupancyMask::from_segments(rec.frame.len(), &rec.segments())
}

/// Loss and per-channel gradient for one sample under `cfg.loss`.
fn sample_loss<T: Real>(pred: &PredictedSpectrum<T>, target: &OccupancyMask, cfg: &TrainConfig, mode: Mode) -> Result<(f64, Vec<T>, Vec<T>)> {
    let (g, a) = (T::c(cfg.gamma), T::c(cfg.alpha));
    let lg = match cfg.loss {
        LossKind::Cfl => cfl(pred, target, g, a)?,
        LossKind::Cbce => cbce(pred, target)?,
        LossKind::Rfl => rfl(&pred.p_x, &target.o_x, g, a)?,
        LossKind::Rbce => rbce(&pred.p_x, &target.o_x)?,
    };
    let loss = lg.loss.to_f64().unwrap();
    match mode {
        Mode::Complex => Ok((loss, lg.d_px, lg.d_py)),
        // a real model feeds one probability to both channels
        Mode::Real if lg.d_py.is_empty() => Ok((loss, lg.d_px, Vec::new())),
        Mode::Real => Ok((loss, lg.d_px.iter().zip(&lg.d_py).map(|(&x, &y)| x + y).collect(), Vec::new())),
    }
}

/// Index batches of one epoch; a trailing singleton joins its predecessor.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Segments predicted from the magnitude mask at threshold `tau`.
pub fn predicted_segments<T: Real>(pred: &PredictedSpectrum<T>, tau: f64) -> Result<Vec<Segment>> {
    Ok(extract_segments(&binarize(pred, tau)?.abs))
}

fn truth_boxes(rec: &SampleRecord) -> Vec<BoxZ> {
    rec.labels.iter().map(|l| BoxZ { x: l.segment, y: l.segment }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub ciou: f64,
    pub acc05: f64,
}

/// Eval-mode pass over `records`: mean loss per sample, mean per-truth ℂIoU,
/// and accuracy at IoU 0.5 averaged over samples.
pub fn validate<T: Real>(model: &Model<T>, records: &[SampleRecord], spectra: &[SpectrumFrame<T>], cfg: &TrainConfig) -> Result<Validation> {
    if records.is_empty() {
        return Err(Error::DatasetEmpty("val".into()));
    }
    let mut loss = 0.0;
    let (mut ciou_sum, mut truths) = (0.0, 0usize);
    let mut acc = 0.0;
    for (chunk, specs) in records.chunks(cfg.batch_size.max(2)).zip(spectra.chunks(cfg.batch_size.max(2))) {
        let refs: Vec<&SpectrumFrame<T>> = specs.iter().collect();
        let preds = model.predict(&refs)?;
        for (rec, pred) in chunk.iter().zip(&preds) {
            loss += sample_loss(pred, &target_of(rec), cfg, model.mode())?.0;
            let masks = binarize(pred, cfg.tau)?;
            let (c, n) = sample_ciou(&boxes_from_masks(&masks.x, &masks.y), &truth_boxes(rec));
            ciou_sum += c;
            truths += n;
            let segs = extract_segments(&masks.abs);
            acc += detection_metrics(&[segs], &[rec.segments()], 0.5).accuracy;
        }
    }
    let n = records.len() as f64;
    Ok(Validation { loss: loss / n, ciou: if truths == 0 { 1.0 } else { ciou_sum / truths as f64 }, acc05: acc / n })
}

fn metrics_json(v: &Validation, epoch: usize) -> serde_json::Value {
    serde_json::json!({ "epoch": epoch, "val_loss": v.loss, "val_ciou": v.ciou, "val_acc05": v.acc05 })
}

/// Trains `model` on `train` with validation on `val`. The observer sees
/// every epoch report together with the current weights.
pub fn train_model<T: Real>(
    model: Model<T>,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochReport, &Model<T>),
) -> Result<TrainOutcome<T>> {
    run_training(model, train, val, cfg, true, observer)
}

fn run_training<T: Real>(
    mut model: Model<T>,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    update_bn_stats: bool,
    mut observer: impl FnMut(&EpochReport, &Model<T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.mode() != cfg.mode {
        return Err(Error::ModeMismatch { expected: cfg.mode.to_string(), found: model.mode().to_string() });
    }
    if train.is_empty() {
        return Err(Error::DatasetEmpty("train".into()));
    }
    if val.is_empty() {
        return Err(Error::DatasetEmpty("val".into()));
    }
    let bins = model.input_bins();
    if let Some(r) = train.iter().chain(val).find(|r| r.frame.len() != bins) {
        return Err(Error::shape(format!("record of {} samples, model expects {bins}", r.frame.len())));
    }
    let train_spec: Vec<SpectrumFrame<T>> = par_map(train.len(), |i| spectrum_of(&train[i]));
    let val_spec: Vec<SpectrumFrame<T>> = par_map(val.len(), |i| spectrum_of(&val[i]));
    let targets: Vec<OccupancyMask> = train.iter().map(target_of).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model, cfg.lr_initial);
    let mut stopper = EarlyStopping::new(cfg.stop_rule());
    let mut reports = Vec::new();
    let mut best: Option<(Validation, usize, Model<T>)> = None;
    let mut lr_reduced_after = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let refs: Vec<&SpectrumFrame<T>> = batch.iter().map(|&i| &train_spec[i]).collect();
            let input = model.input_tensor(&refs)?;
            let (out, tape) = model.forward_tape(&input, BnMode::Train)?;
            let preds = split_predictions(&out, bins);
            let scale = T::one() / T::c(batch.len() as f64);
            let (mut dx, mut dy) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
            for (&i, pred) in batch.iter().zip(&preds) {
                let (l, gx, gy) = sample_loss(pred, &targets[i], cfg, model.mode())?;
                loss_sum += l;
                dx.push(gx.into_iter().map(|v| v * scale).collect::<Vec<T>>());
                dy.push(gy.into_iter().map(|v| v * scale).collect::<Vec<T>>());
            }
            let up = match model.mode() {
                Mode::Complex => output_gradient(&dx, Some(&dy), bins),
                Mode::Real => output_gradient(&dx, None, bins),
            };
            let grads = model.backward(&tape, &up)?;
            if update_bn_stats {
                model.absorb(&tape);
            }
            step(&mut model, &grads, &mut opt)?;
        }
        let v = validate(&model, val, &val_spec, cfg)?;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: v.loss,
            val_ciou: v.ciou,
            val_acc05: v.acc05,
            seconds: (t0.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
        };
        observer(&report, &model);
        reports.push(report);

        let improves = match &best {
            None => true,
            Some((b, _, _)) => v.acc05 > b.acc05 || (v.acc05 == b.acc05 && v.loss < b.loss),
        };
        if improves {
            best = Some((v, epoch, model.clone()));
        }
        match stopper.observe(EpochScore { val_loss: v.loss, val_ciou: v.ciou }) {
            Decision::Continue => {}
            Decision::ReduceLr => {
                opt.learning_rate = cfg.lr_reduced;
                lr_reduced_after = Some(epoch);
            }
            Decision::Stop => {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let best = match best {
        Some((v, epoch, m)) => Checkpoint::new(m, epoch, metrics_json(&v, epoch)),
        None => Checkpoint::new(model.clone(), 0, serde_json::json!({})),
    };
    Ok(TrainOutcome { best, last: model, reports, lr_reduced_after, stopped_early })
}

/// Builds a model from `model_cfg` and trains it on the dataset's train/val splits.
pub fn train<T: Real>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochReport, &Model<T>),
) -> Result<TrainOutcome<T>> {
    if model_cfg.input_bins != dataset.manifest().input_bins {
        return Err(Error::ConfigInvalid(format!(
            "model expects {} bins, dataset has {}",
            model_cfg.input_bins,
            dataset.manifest().input_bins
        )));
    }
    let model = Model::build(model_cfg)?;
    let train = dataset.read_split("train")?;
    let val = dataset.read_split("val")?;
    train_model(model, &train, &val, cfg, observer)
}

/// Continues training a checkpoint on new data under the same stopping rules.
/// Optimizer moments start fresh and batch-norm running statistics stay at
/// their pretrained values, so a zero learning rate changes nothing.
pub fn fine_tune<T: Real>(
    ckpt: Checkpoint<T>,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochReport, &Model<T>),
) -> Result<TrainOutcome<T>> {
    if ckpt.model.mode() != cfg.mode {
        return Err(Error::ModeMismatch { expected: cfg.mode.to_string(), found: ckpt.model.mode().to_string() });
    }
    run_training(ckpt.model, train, val, cfg, false, observer)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Anything that turns records into predicted segments (centered bins).
pub trait Segmenter: Sync {
    fn segment(&self, batch: &[&SampleRecord]) -> Result<Vec<Vec<Segment>>>;
}

pub struct ModelSegmenter<'a, T> {
    pub model: &'a Model<T>,
    pub tau: f64,
}

impl<T: Real> Segmenter for ModelSegmenter<'_, T> {
    fn segment(&self, batch: &[&SampleRecord]) -> Result<Vec<Vec<Segment>>> {
        let spectra: Vec<SpectrumFrame<T>> = batch.iter().map(|r| spectrum_of(r)).collect();
        let refs: Vec<&SpectrumFrame<T>> = spectra.iter().collect();
        self.model.predict(&refs)?.iter().map(|p| predicted_segments(p, self.tau)).collect()
    }
}

pub struct LadSegmenter(pub LadConfig);

impl Segmenter for LadSegmenter {
    fn segment(&self, batch: &[&SampleRecord]) -> Result<Vec<Vec<Segment>>> {
        Ok(batch.iter().map(|r| lad_detect(&spectrum_of::<f64>(r), &self.0)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Integer SNR bucket (`floor`); `None` for the average row.
    pub snr_db: Option<i64>,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub recall05: f64,
    pub recall09: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    /// Unweighted mean of the per-SNR rows; `n_samples` is the total.
    pub average: MetricRow,
}

pub const METRIC_CSV_HEADER: &str = "snr_db,accuracy,mean_iou,recall05,recall09,n_samples";

impl MetricTable {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{METRIC_CSV_HEADER}")?;
        for r in self.rows.iter().chain([&self.average]) {
            let snr = r.snr_db.map_or("all".to_string(), |s| s.to_string());
            writeln!(w, "{snr},{:.6},{:.6},{:.6},{:.6},{}", r.accuracy, r.mean_iou, r.recall05, r.recall09, r.n_samples)?;
        }
        Ok(())
    }
}

/// Per-sample metrics: (accuracy@0.5, mean IoU, recall@0.5, recall@0.9).
pub fn sample_metrics(pred: &[Segment], truth: &[Segment]) -> [f64; 4] {
    let p = [pred.to_vec()];
    let t = [truth.to_vec()];
    let m5 = detection_metrics(&p, &t, 0.5);
    let m9 = detection_metrics(&p, &t, 0.9);
    [m5.accuracy, m5.mean_iou, m5.recall, m9.recall]
}

fn row(snr: Option<i64>, samples: &[[f64; 4]]) -> MetricRow {
    let n = samples.len().max(1) as f64;
    let mean = |k: usize| samples.iter().map(|s| s[k]).sum::<f64>() / n;
    MetricRow { snr_db: snr, accuracy: mean(0), mean_iou: mean(1), recall05: mean(2), recall09: mean(3), n_samples: samples.len() }
}

/// Metrics grouped by integer SNR; each sample is segmented exactly once.
pub fn evaluate(segmenter: &dyn Segmenter, records: &[SampleRecord], batch_size: usize) -> Result<MetricTable> {
    if records.is_empty() {
        return Err(Error::DatasetEmpty("evaluation split".into()));
    }
    let bs = batch_size.max(1);
    let chunks: Vec<&[SampleRecord]> = records.chunks(bs).collect();
    let preds = par_map(chunks.len(), |i| segmenter.segment(&chunks[i].iter().collect::<Vec<_>>()));
    let mut groups: BTreeMap<i64, Vec<[f64; 4]>> = BTreeMap::new();
    for (chunk, pred) in chunks.iter().zip(preds) {
        let pred = pred?;
        if pred.len() != chunk.len() {
            return Err(Error::shape(format!("segmenter returned {} results for {} records", pred.len(), chunk.len())));
        }
        for (rec, p) in chunk.iter().zip(&pred) {
            groups.entry(rec.sample_snr_db.floor() as i64).or_default().push(sample_metrics(p, &rec.segments()));
        }
    }
    let rows: Vec<MetricRow> = groups.iter().map(|(&snr, s)| row(Some(snr), s)).collect();
    let g = rows.len() as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / g;
    let average = MetricRow {
        snr_db: None,
        accuracy: avg(|r| r.accuracy),
        mean_iou: avg(|r| r.mean_iou),
        recall05: avg(|r| r.recall05),
        recall09: avg(|r| r.recall09),
        n_samples: records.len(),
    };
    Ok(MetricTable { rows, average })
}

/// Evaluates a checkpoint on a named split of a dataset.
pub fn evaluate_split<T: Real>(ckpt: &Checkpoint<T>, dataset: &Dataset, split: &str, tau: f64) -> Result<MetricTable> {
    let records = dataset.read_split(split)?;
    evaluate(&ModelSegmenter { model: &ckpt.model, tau }, &records, 64)
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub epochs_to_target: Option<usize>,
    pub avg_epoch_seconds: f64,
    pub total_seconds: f64,
}

/// First epoch (1-based, as recorded) whose validation accuracy reaches `target`.
pub fn epochs_to_target(reports: &[EpochReport], target: f64) -> Option<usize> {
    reports.iter().find(|r| r.val_acc05 >= target).map(|r| r.epoch)
}

pub fn timing_report(reports: &[EpochReport], target: f64) -> TimingReport {
    let total: f64 = reports.iter().map(|r| r.seconds).sum();
    TimingReport {
        epochs_to_target: epochs_to_target(reports, target),
        avg_epoch_seconds: if reports.is_empty() { 0.0 } else { total / reports.len() as f64 },
        total_seconds: total,
    }
}

/// Epochs each mode needed to reach the real model's best validation accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub target: f64,
    pub complex_epochs: Option<usize>,
    pub real_epochs: Option<usize>,
}

impl Convergence {
    /// Complex reached the target no later than real (a run that never gets
    /// there loses).
    pub fn complex_not_slower(&self) -> bool {
        match (self.complex_epochs, self.real_epochs) {
            (Some(c), Some(r)) => c <= r,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }
}

pub fn compare_convergence(complex: &[EpochReport], real: &[EpochReport]) -> Convergence {
    let target = real.iter().map(|r| r.val_acc05).fold(f64::NEG_INFINITY, f64::max);
    Convergence { target, complex_epochs: epochs_to_target(complex, target), real_epochs: epochs_to_target(real, target) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siggen::{compose_sample, ComposeConfig};

    fn rep(epoch: usize, acc: f64, secs: f64) -> EpochReport {
        EpochReport { epoch, train_loss: 1.0, val_loss: 1.0, val_ciou: 0.5, val_acc05: acc, seconds: secs }
    }

    #[test]
    fn timing_examples() {
        let r = [rep(1, 0.5, 1.0), rep(2, 0.9, 2.0), rep(3, 0.95, 6.0)];
        assert_eq!(epochs_to_target(&r, 0.9), Some(2));
        assert_eq!(epochs_to_target(&r, 0.99), None);
        let t = timing_report(&r, 0.9);
        assert_eq!(t.avg_epoch_seconds, 3.0);
        assert_eq!(t.total_seconds, 9.0);
    }

    #[test]
    fn convergence_uses_best_real_accuracy() {
        let real = [rep(1, 0.3, 1.0), rep(2, 0.6, 1.0), rep(3, 0.5, 1.0)];
        let complex = [rep(1, 0.4, 1.0), rep(2, 0.7, 1.0)];
        let c = compare_convergence(&complex, &real);
        assert_eq!((c.target, c.complex_epochs, c.real_epochs), (0.6, Some(2), Some(2)));
        assert!(c.complex_not_slower());
        assert!(!compare_convergence(&complex[..1], &real).complex_not_slower());
    }

    #[test]
    fn batches_merge_trailing_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(129, 64, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 65]);
        let b = epoch_batches(130, 64, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 2]);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { loss: LossKind::Rfl, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { loss: LossKind::Rfl, mode: Mode::Real, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn epoch_csv_round_trip() {
        let r = vec![rep(1, 0.5, 1.25), rep(2, 0.75, 2.5)];
        let mut buf = Vec::new();
        write_epoch_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(EPOCH_CSV_HEADER));
        assert_eq!(read_epoch_csv(&text).unwrap(), r);
    }

    struct Oracle;
    impl Segmenter for Oracle {
        fn segment(&self, batch: &[&SampleRecord]) -> Result<Vec<Vec<Segment>>> {
            Ok(batch.iter().map(|r| r.segments()).collect())
        }
    }

    struct Nothing;
    impl Segmenter for Nothing {
        fn segment(&self, batch: &[&SampleRecord]) -> Result<Vec<Vec<Segment>>> {
            Ok(vec![Vec::new(); batch.len()])
        }
    }

    fn records(n: u64) -> Vec<SampleRecord> {
        let cfg = ComposeConfig { input_bins: 256, ..Default::default() };
        (0..n).map(|s| compose_sample(1 + (s % 3) as usize, (s % 7) as f64 + 0.5, &cfg, s).unwrap()).collect()
    }

    #[test]
    fn evaluate_stubs() {
        let recs = records(30);
        let perfect = evaluate(&Oracle, &recs, 8).unwrap();
        for r in perfect.rows.iter().chain([&perfect.average]) {
            assert_eq!([r.accuracy, r.mean_iou, r.recall05, r.recall09], [1.0; 4]);
        }
        assert_eq!(perfect.rows.len(), 7);
        assert_eq!(perfect.average.n_samples, 30);
        let empty = evaluate(&Nothing, &recs, 8).unwrap();
        assert_eq!([empty.average.accuracy, empty.average.recall05, empty.average.recall09], [0.0; 3]);
    }

    fn easy(n: u64) -> Vec<SampleRecord> {
        let cfg = ComposeConfig { input_bins: 256, bandwidths_hz: vec![2e6], ..Default::default() };
        (0..n).map(|s| compose_sample(1, 15.0, &cfg, 100 + s).unwrap()).collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { batch_size: 8, max_epochs: 3, seed: 5, ..Default::default() }
    }

    #[test]
    fn loss_decreases_on_easy_data() {
        let data = easy(16);
        let model = Model::<f64>::build(&ModelConfig::miniature(256, Mode::Complex).with_seed(1)).unwrap();
        let out = train_model(model, &data, &data[..8], &tiny_cfg(), |_, _| {}).unwrap();
        let l: Vec<f64> = out.reports.iter().map(|r| r.train_loss).collect();
        assert_eq!(l.len(), 3);
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = easy(4);
        let model = Model::<f64>::build(&ModelConfig::miniature(256, Mode::Complex).with_seed(1)).unwrap();
        let init = Checkpoint::new(model.clone(), 0, serde_json::json!({})).to_bytes().unwrap();
        let cfg = TrainConfig { max_epochs: 0, ..tiny_cfg() };
        let out = train_model(model, &data, &data, &cfg, |_, _| {}).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.best.to_bytes().unwrap(), init);
    }

    #[test]
    fn training_is_reproducible() {
        let data = easy(12);
        let run = || {
            let model = Model::<f64>::build(&ModelConfig::miniature(256, Mode::Real).with_seed(3)).unwrap();
            let cfg = TrainConfig { mode: Mode::Real, max_epochs: 2, ..tiny_cfg() };
            let out = train_model(model, &data, &data[..4], &cfg, |_, _| {}).unwrap();
            let rows: Vec<_> = out.reports.iter().map(|r| EpochReport { seconds: 0.0, ..r.clone() }).collect();
            (out.best.to_bytes().unwrap(), rows)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn errors() {
        let data = easy(4);
        let model = Model::<f64>::build(&ModelConfig::miniature(256, Mode::Real)).unwrap();
        let cfg = tiny_cfg();
        assert!(matches!(train_model(model.clone(), &[], &data, &TrainConfig { mode: Mode::Real, ..cfg.clone() }, |_, _| {}), Err(Error::DatasetEmpty(_))));
        assert!(matches!(train_model(model.clone(), &data, &data, &cfg, |_, _| {}), Err(Error::ModeMismatch { .. })));
        let ck = Checkpoint::new(model, 0, serde_json::json!({}));
        assert!(matches!(fine_tune(ck, &data, &data, &cfg, |_, _| {}), Err(Error::ModeMismatch { .. })));
    }
}
