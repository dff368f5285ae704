//! Cross-run summaries: per-SNR metrics, training curves and the
//! complex-vs-real convergence comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use specseg::cmodel::Mode;
use specseg::pipeline::{compare_convergence, read_epoch_csv, Convergence, EpochReport};

use crate::commands::{RunSummary, EPOCHS_FILE, RUN_FILE};
use crate::{CliError, Format};

pub const SNR_FILE: &str = "snr_metrics.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";

struct Run {
    name: String,
    summary: RunSummary,
    epochs: Vec<EpochReport>,
}

#[derive(Debug, Serialize)]
struct SeedComparison {
    seed: u64,
    complex_run: String,
    real_run: String,
    #[serde(flatten)]
    convergence: Convergence,
    complex_not_slower: bool,
}

fn load_run(dir: &Path) -> anyhow::Result<Run> {
    let run_path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&run_path).with_context(|| format!("reading {}", run_path.display()))?;
    let summary: RunSummary =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", run_path.display())))?;
    let csv_path = dir.join(EPOCHS_FILE);
    let csv = fs::read_to_string(&csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let epochs = read_epoch_csv(&csv).with_context(|| format!("parsing {}", csv_path.display()))?;
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Run { name, summary, epochs })
}

fn opt(v: Option<usize>) -> String {
    v.map_or(String::new(), |e| e.to_string())
}

fn snr_csv(runs: &[Run]) -> String {
    let mut s = String::from("run,mode,seed,snr_db,accuracy,mean_iou,recall05,recall09,n_samples\n");
    for r in runs {
        let t = &r.summary.test;
        for row in t.rows.iter().chain([&t.average]) {
            let snr = row.snr_db.map_or("all".to_string(), |v| v.to_string());
            s += &format!(
                "{},{},{},{snr},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.name, r.summary.mode, r.summary.seed, row.accuracy, row.mean_iou, row.recall05, row.recall09, row.n_samples
            );
        }
    }
    s
}

fn curves_csv(runs: &[Run]) -> String {
    let mut s = String::from("run,mode,seed,epoch,train_loss,val_loss,val_ciou,val_acc05,seconds\n");
    for r in runs {
        for e in &r.epochs {
            s += &format!(
                "{},{},{},{},{:.9},{:.9},{:.6},{:.6},{:.3}\n",
                r.name, r.summary.mode, r.summary.seed, e.epoch, e.train_loss, e.val_loss, e.val_ciou, e.val_acc05, e.seconds
            );
        }
    }
    s
}

fn convergence_csv(rows: &[SeedComparison]) -> String {
    let mut s = String::from("seed,complex_run,real_run,target_acc05,complex_epochs,real_epochs,complex_not_slower\n");
    for c in rows {
        s += &format!(
            "{},{},{},{:.6},{},{},{}\n",
            c.seed,
            c.complex_run,
            c.real_run,
            c.convergence.target,
            opt(c.convergence.complex_epochs),
            opt(c.convergence.real_epochs),
            c.complex_not_slower
        );
    }
    s
}

/// Pairs the first complex and first real run of every seed.
fn compare(runs: &[Run]) -> Vec<SeedComparison> {
    let mut by_seed: BTreeMap<u64, (Option<&Run>, Option<&Run>)> = BTreeMap::new();
    for r in runs {
        let slot = by_seed.entry(r.summary.seed).or_default();
        match r.summary.mode {
            Mode::Complex => slot.0 = slot.0.or(Some(r)),
            Mode::Real => slot.1 = slot.1.or(Some(r)),
        }
    }
    by_seed
        .into_iter()
        .filter_map(|(seed, pair)| match pair {
            (Some(c), Some(r)) => {
                let convergence = compare_convergence(&c.epochs, &r.epochs);
                Some(SeedComparison {
                    seed,
                    complex_run: c.name.clone(),
                    real_run: r.name.clone(),
                    complex_not_slower: convergence.complex_not_slower(),
                    convergence,
                })
            }
            _ => None,
        })
        .collect()
}

pub fn report(format: Format, dirs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<anyhow::Result<Vec<_>>>()?;
    let comparisons = compare(&runs);
    let wins = comparisons.iter().filter(|c| c.complex_not_slower).count();
    let majority = !comparisons.is_empty() && 2 * wins > comparisons.len();
    let (snr, curves, conv) = (snr_csv(&runs), curves_csv(&runs), convergence_csv(&comparisons));
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, text) in [(SNR_FILE, &snr), (CURVES_FILE, &curves), (CONVERGENCE_FILE, &conv)] {
            let p = dir.join(name);
            fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    for c in &comparisons {
        eprintln!(
            "seed {}: target acc@0.5 {:.4}, complex {} epochs, real {} epochs",
            c.seed,
            c.convergence.target,
            c.convergence.complex_epochs.map_or("never".into(), |e| e.to_string()),
            c.convergence.real_epochs.map_or("never".into(), |e| e.to_string()),
        );
    }
    if comparisons.is_empty() {
        eprintln!("no seed has both a complex and a real run; convergence table is empty");
    } else {
        eprintln!("complex not slower in {wins} of {} seeds", comparisons.len());
    }
    match format {
        Format::Csv => {
            let mut o = std::io::stdout().lock();
            std::io::Write::write_all(&mut o, conv.as_bytes())?;
            Ok(())
        }
        Format::Json => {
            let runs_json: Vec<_> = runs
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "run": r.name,
                        "mode": r.summary.mode,
                        "seed": r.summary.seed,
                        "epochs": r.epochs.len(),
                        "best_epoch": r.summary.best_epoch,
                        "timing": r.summary.timing,
                        "test": r.summary.test,
                    })
                })
                .collect();
            let v = serde_json::json!({
                "runs": runs_json,
                "convergence": comparisons,
                "complex_not_slower_seeds": wins,
                "complex_not_slower_majority": majority,
            });
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(())
        }
    }
}
