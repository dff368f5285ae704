use std::sync::atomic::{AtomicUsize, Ordering};

use specseg::cmodel::{Checkpoint, Mode, Model, ModelConfig};
use specseg::objectives::{detection_metrics, Segment};
use specseg::pipeline::{
    evaluate, fine_tune, spectrum_of, train_model, validate, ModelSegmenter, Segmenter, TrainConfig,
};
use specseg::siggen::{compose_sample, ComposeConfig, SampleRecord};
use specseg::Result;

fn records(n: u64, seed: u64) -> Vec<SampleRecord> {
    let cfg = ComposeConfig { input_bins: 256, bandwidths_hz: vec![1e6, 2e6], ..Default::default() };
    (0..n).map(|s| compose_sample(1 + (s % 2) as usize, 4.0 + (s % 6) as f64, &cfg, seed + s).unwrap()).collect()
}

fn model(mode: Mode) -> Model<f64> {
    Model::build(&ModelConfig::miniature(256, mode).with_seed(7)).unwrap()
}

struct Counting<'a> {
    inner: &'a dyn Segmenter,
    calls: AtomicUsize,
}

impl Segmenter for Counting<'_> {
    fn segment(&self, batch: &[&SampleRecord]) -> Result<Vec<Vec<Segment>>> {
        self.calls.fetch_add(batch.len(), Ordering::SeqCst);
        self.inner.segment(batch)
    }
}

#[test]
fn evaluation_segments_every_sample_once() {
    let recs = records(23, 1);
    let m = model(Mode::Complex);
    let seg = ModelSegmenter { model: &m, tau: 0.5 };
    let counting = Counting { inner: &seg, calls: AtomicUsize::new(0) };
    let table = evaluate(&counting, &recs, 5).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), 23);
    assert_eq!(table.average.n_samples, 23);
    assert_eq!(table.rows.iter().map(|r| r.n_samples).sum::<usize>(), 23);
}

/// Scores one sample at a time with `detection_metrics`, averages within
/// integer SNR groups and then over groups.
#[test]
fn evaluation_matches_per_sample_oracle() {
    let recs = records(30, 2);
    let m = model(Mode::Complex);
    let seg = ModelSegmenter { model: &m, tau: 0.3 };
    let table = evaluate(&seg, &recs, 8).unwrap();
    let mut groups: std::collections::BTreeMap<i64, Vec<[f64; 4]>> = Default::default();
    for r in &recs {
        let pred = seg.segment(&[r]).unwrap().remove(0);
        let m5 = detection_metrics(&[pred.clone()], &[r.segments()], 0.5);
        let m9 = detection_metrics(&[pred], &[r.segments()], 0.9);
        groups.entry(r.sample_snr_db.floor() as i64).or_default().push([m5.accuracy, m5.mean_iou, m5.recall, m9.recall]);
    }
    assert_eq!(table.rows.len(), groups.len());
    let mut overall = [0.0; 4];
    for (row, (snr, samples)) in table.rows.iter().zip(&groups) {
        assert_eq!(row.snr_db, Some(*snr));
        let got = [row.accuracy, row.mean_iou, row.recall05, row.recall09];
        for k in 0..4 {
            let want = samples.iter().map(|s| s[k]).sum::<f64>() / samples.len() as f64;
            assert!((got[k] - want).abs() < 1e-12);
            overall[k] += want / groups.len() as f64;
        }
    }
    let a = &table.average;
    for (got, want) in [a.accuracy, a.mean_iou, a.recall05, a.recall09].iter().zip(overall) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn validation_leaves_the_model_alone() {
    let recs = records(6, 3);
    let m = model(Mode::Real);
    let before = m.clone();
    let spectra: Vec<_> = recs.iter().map(spectrum_of::<f64>).collect();
    let cfg = TrainConfig { mode: Mode::Real, batch_size: 4, ..Default::default() };
    let a = validate(&m, &recs, &spectra, &cfg).unwrap();
    let b = validate(&m, &recs, &spectra, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(m, before);
}

#[test]
fn lr_reduction_happens_at_most_once() {
    let recs = records(10, 4);
    let cfg = TrainConfig { batch_size: 5, max_epochs: 12, lr_patience: 1, stop_patience: 2, min_delta: 10.0, ..Default::default() };
    let out = train_model(model(Mode::Complex), &recs, &recs[..4], &cfg, |_, _| {}).unwrap();
    // a huge min_delta means nothing ever counts as improvement
    assert_eq!(out.lr_reduced_after, Some(2));
    assert!(out.stopped_early);
    assert!(out.reports.len() < 12);
}

#[test]
fn fine_tune_with_zero_rate_changes_nothing() {
    let recs = records(10, 5);
    let base = TrainConfig { batch_size: 5, max_epochs: 2, ..Default::default() };
    let trained = train_model(model(Mode::Complex), &recs, &recs[..4], &base, |_, _| {}).unwrap();
    let start = trained.best.clone();
    let frozen = TrainConfig { lr_initial: 0.0, lr_reduced: 0.0, ..base.clone() };
    let out = fine_tune(start.clone(), &recs, &recs[..4], &frozen, |_, _| {}).unwrap();
    assert_eq!(out.best.model, start.model);
    let spectra: Vec<_> = recs[..4].iter().map(spectrum_of::<f64>).collect();
    let v0 = validate(&start.model, &recs[..4], &spectra, &base).unwrap();
    for r in &out.reports {
        assert_eq!((r.val_loss, r.val_acc05, r.val_ciou), (v0.loss, v0.acc05, v0.ciou));
    }
}

#[test]
fn fine_tune_on_same_data_does_not_lose_ground() {
    let recs = records(16, 6);
    let val = &recs[..6];
    let base = TrainConfig { batch_size: 8, max_epochs: 3, ..Default::default() };
    let trained = train_model(model(Mode::Complex), &recs, val, &base, |_, _| {}).unwrap();
    let spectra: Vec<_> = val.iter().map(spectrum_of::<f64>).collect();
    let start = validate(&trained.best.model, val, &spectra, &base).unwrap();
    let cfg = TrainConfig { lr_initial: 1e-4, max_epochs: 2, ..base };
    let out = fine_tune(trained.best, &recs, val, &cfg, |_, _| {}).unwrap();
    let best = out.reports.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best <= start.loss + cfg.min_delta, "{best} vs {}", start.loss);
}

#[test]
fn fine_tune_rejects_other_mode() {
    let recs = records(4, 7);
    let ck = Checkpoint::new(model(Mode::Real), 0, serde_json::json!({}));
    let err = fine_tune(ck, &recs, &recs, &TrainConfig::default(), |_, _| {}).unwrap_err();
    assert!(matches!(err, specseg::Error::ModeMismatch { .. }));
}
