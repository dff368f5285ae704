use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::json;
use specseg::cmodel::{Checkpoint, Mode, Model};
use specseg::lad::LadConfig;
use specseg::pipeline::{
    evaluate, predicted_segments, timing_report, train, write_epoch_csv, LadSegmenter, MetricTable, ModelSegmenter,
    TimingReport, TrainConfig,
};
use specseg::siggen::{freq_of_bin, generate_dataset, Dataset};
use specseg::{fft, IqFrame, Precision, Real};

use crate::config::{ModelSection, RunConfig};
use crate::{report, Cli, CliError, Command, Format};

pub const RUN_FILE: &str = "run.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Accuracy used for the `timing` block of a run summary.
const TIMING_TARGET: f64 = 0.9;

/// Summary written next to every training run; `report` reads it back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub lr_reduced_after: Option<usize>,
    pub stopped_early: bool,
    pub timing: TimingReport,
    pub test: MetricTable,
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate { config, out, seed } => generate(cli.format, config, out, *seed),
        Command::Train { data, config, out, seed } => train_cmd(cli.format, data, config.as_deref(), out, *seed),
        Command::Eval { ckpt, data, split, tau } => eval_cmd(cli.format, ckpt, data, split, *tau),
        Command::Detect { ckpt, iq, sample_rate, center_freq, tau } => detect(cli.format, ckpt, iq, *sample_rate, *center_freq, *tau),
        Command::Lad { data, config, split } => lad_cmd(cli.format, data, config.as_deref(), split),
        Command::Report { runs, out } => report::report(cli.format, runs, out.as_deref()),
    }
}

fn stdout_text(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    stdout_text(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn table_csv(t: &MetricTable) -> anyhow::Result<String> {
    let mut buf = Vec::new();
    t.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf)?)
}

fn print_table(format: Format, t: &MetricTable) -> anyhow::Result<()> {
    match format {
        Format::Json => print_json(t),
        Format::Csv => stdout_text(&table_csv(t)?),
    }
}

fn summarize_table(label: &str, t: &MetricTable) {
    let a = &t.average;
    eprintln!(
        "{label}: accuracy@0.5 {:.4}, mean IoU {:.4}, recall@0.5 {:.4}, recall@0.9 {:.4} over {} samples",
        a.accuracy, a.mean_iou, a.recall05, a.recall09, a.n_samples
    );
}

fn open_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("opening dataset {}", dir.display()))
}

fn generate(format: Format, config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.override_seed(seed);
    cfg.validate()?;
    let manifest = generate_dataset(&cfg.data, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    let splits: Vec<_> = manifest.splits.iter().map(|(n, e)| (n.clone(), e.count, e.bytes)).collect();
    eprintln!(
        "wrote {} samples ({}) to {}",
        manifest.count,
        splits.iter().map(|(n, c, _)| format!("{n} {c}")).collect::<Vec<_>>().join(", "),
        out.display()
    );
    match format {
        Format::Json => print_json(&json!({
            "dir": out,
            "version": manifest.version,
            "count": manifest.count,
            "input_bins": manifest.input_bins,
            "sample_rate_hz": manifest.sample_rate_hz,
            "snr_db": manifest.snr_db,
            "signals": manifest.signals,
            "seed": manifest.config.seed,
            "splits": splits.iter().map(|(n, c, b)| json!({ "name": n, "count": c, "bytes": b })).collect::<Vec<_>>(),
        })),
        Format::Csv => {
            let mut s = String::from("split,count,bytes\n");
            for (n, c, b) in &splits {
                s += &format!("{n},{c},{b}\n");
            }
            stdout_text(&s)
        }
    }
}

fn train_cmd(format: Format, data: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load_or_default(config)?;
    cfg.override_seed(seed);
    cfg.validate()?;
    let dataset = open_dataset(data)?;
    match cfg.model.precision {
        Precision::Single => train_at::<f32>(format, &dataset, &cfg, out),
        Precision::Double => train_at::<f64>(format, &dataset, &cfg, out),
    }
}

fn train_at<T: Real>(format: Format, dataset: &Dataset, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let model_cfg = cfg.model.build(dataset.manifest().input_bins, cfg.train.mode);
    eprintln!("training {} model ({} bins) on {}", cfg.train.mode, model_cfg.input_bins, dataset.dir().display());
    let outcome = train::<T>(dataset, &model_cfg, &cfg.train, |r, _| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  ciou {:.4}  acc@0.5 {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.val_ciou, r.val_acc05, r.seconds
        );
    })?;
    let save = |ck: &Checkpoint<T>, name: &str| {
        let p = out.join(name);
        ck.save(&p).with_context(|| format!("writing {}", p.display()))
    };
    save(&outcome.best, BEST_CKPT)?;
    save(&Checkpoint::new(outcome.last.clone(), outcome.reports.len(), json!({})), LAST_CKPT)?;

    let mut epochs = Vec::new();
    write_epoch_csv(&mut epochs, &outcome.reports)?;
    fs::write(out.join(EPOCHS_FILE), &epochs).context("writing epoch report")?;

    let test = dataset.read_split("test")?;
    let table = evaluate(&ModelSegmenter { model: &outcome.best.model, tau: cfg.train.tau }, &test, cfg.train.batch_size)?;
    fs::write(out.join(METRICS_FILE), table_csv(&table)?).context("writing metrics")?;

    let summary = RunSummary {
        mode: cfg.train.mode,
        seed: cfg.train.seed,
        precision: T::PRECISION,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        best_epoch: outcome.best.epoch,
        lr_reduced_after: outcome.lr_reduced_after,
        stopped_early: outcome.stopped_early,
        timing: timing_report(&outcome.reports, TIMING_TARGET),
        test: table,
    };
    fs::write(out.join(RUN_FILE), serde_json::to_string_pretty(&summary)? + "\n").context("writing run summary")?;
    eprintln!("best epoch {} of {}; outputs in {}", summary.best_epoch, outcome.reports.len(), out.display());
    summarize_table("test", &summary.test);
    match format {
        Format::Json => print_json(&summary),
        Format::Csv => stdout_text(std::str::from_utf8(&epochs)?),
    }
}

fn load_any(path: &Path) -> anyhow::Result<Precision> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Checkpoint::<f64>::header_from_bytes(&bytes).with_context(|| format!("reading {}", path.display()))?.precision)
}

fn load_ckpt<T: Real>(path: &Path) -> anyhow::Result<Checkpoint<T>> {
    Checkpoint::load(path, None).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval_cmd(format: Format, ckpt: &Path, data: &Path, split: &str, tau: f64) -> anyhow::Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(specseg::Error::TauOutOfRange(tau).into());
    }
    let dataset = open_dataset(data)?;
    let records = dataset.read_split(split)?;
    let table = match load_any(ckpt)? {
        Precision::Single => eval_at(&load_ckpt::<f32>(ckpt)?.model, &records, tau)?,
        Precision::Double => eval_at(&load_ckpt::<f64>(ckpt)?.model, &records, tau)?,
    };
    summarize_table(split, &table);
    print_table(format, &table)
}

fn eval_at<T: Real>(model: &Model<T>, records: &[specseg::siggen::SampleRecord], tau: f64) -> anyhow::Result<MetricTable> {
    let bins = model.input_bins();
    if let Some(r) = records.iter().find(|r| r.frame.len() != bins) {
        return Err(CliError::Data(format!("records have {} bins, checkpoint expects {bins}", r.frame.len())).into());
    }
    Ok(evaluate(&ModelSegmenter { model, tau }, records, 64)?)
}

fn lad_cmd(format: Format, data: &Path, config: Option<&Path>, split: &str) -> anyhow::Result<()> {
    let lad: LadConfig = RunConfig::load_or_default(config)?.lad;
    lad.validate()?;
    let records = open_dataset(data)?.read_split(split)?;
    let table = evaluate(&LadSegmenter(lad), &records, 64)?;
    summarize_table(&format!("energy detector on {split}"), &table);
    print_table(format, &table)
}

/// Reads interleaved little-endian f32 I/Q pairs.
pub fn read_iq(path: &Path) -> anyhow::Result<Vec<[f32; 2]>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() % 8 != 0 {
        return Err(CliError::Data(format!("{}: {} bytes is not a whole number of f32 I/Q pairs", path.display(), bytes.len())).into());
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| [f32::from_le_bytes(c[..4].try_into().unwrap()), f32::from_le_bytes(c[4..].try_into().unwrap())])
        .collect())
}

#[derive(Debug, Serialize)]
struct DetectedSegment {
    frame: usize,
    begin_bin: usize,
    end_bin: usize,
    begin_hz: f64,
    end_hz: f64,
}

fn detect(format: Format, ckpt: &Path, iq: &Path, fs_hz: f64, fc: f64, tau: f64) -> anyhow::Result<()> {
    if !(fs_hz > 0.0 && fs_hz.is_finite()) {
        return Err(CliError::Config(format!("sample rate {fs_hz} must be positive")).into());
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(specseg::Error::TauOutOfRange(tau).into());
    }
    let samples = read_iq(iq)?;
    let segs = match load_any(ckpt)? {
        Precision::Single => detect_at(&load_ckpt::<f32>(ckpt)?.model, &samples, fs_hz, fc, tau)?,
        Precision::Double => detect_at(&load_ckpt::<f64>(ckpt)?.model, &samples, fs_hz, fc, tau)?,
    };
    eprintln!("{} segment(s) in {}", segs.len(), iq.display());
    match format {
        Format::Json => print_json(&json!({ "sample_rate_hz": fs_hz, "center_freq_hz": fc, "segments": segs })),
        Format::Csv => {
            let mut s = String::from("frame,begin_bin,end_bin,begin_hz,end_hz\n");
            for d in &segs {
                s += &format!("{},{},{},{},{}\n", d.frame, d.begin_bin, d.end_bin, d.begin_hz, d.end_hz);
            }
            stdout_text(&s)
        }
    }
}

/// Splits the capture into model-sized frames and segments each one.
fn detect_at<T: Real>(model: &Model<T>, samples: &[[f32; 2]], fs_hz: f64, fc: f64, tau: f64) -> anyhow::Result<Vec<DetectedSegment>> {
    let l = model.input_bins();
    if samples.is_empty() || samples.len() % l != 0 {
        return Err(CliError::Data(format!("capture of {} samples is not a positive multiple of the model's {l} bins", samples.len())).into());
    }
    let mut out = Vec::new();
    for (frame, chunk) in samples.chunks(l).enumerate() {
        let values = chunk.iter().map(|&[i, q]| specseg::Complex::new(T::c(i as f64), T::c(q as f64))).collect();
        let spectrum = fft(&IqFrame::new(values, fs_hz, fc)?)?;
        let pred = model.predict(&[&spectrum])?;
        for s in predicted_segments(&pred[0], tau)? {
            out.push(DetectedSegment {
                frame,
                begin_bin: s.begin,
                end_bin: s.end,
                begin_hz: fc + freq_of_bin(s.begin, l, fs_hz),
                end_hz: fc + freq_of_bin(s.end, l, fs_hz),
            });
        }
    }
    Ok(out)
}
