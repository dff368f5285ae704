//! Labeled multi-signal wideband IQ synthesis and the on-disk dataset format.
//!
//! A sample is the sum of `N` independently modulated signals, each shifted to
//! its own carrier offset inside the sampled band, plus circular complex white
//! noise. Signals never overlap and keep a guard band between each other.
//!
//! # Dataset directory
//!
//! `manifest.json` plus one file per split (`train.bin`, `val.bin`, `test.bin`).
//! A split file is the 8-byte magic `SSEGDS1\0` followed by records:
//!
//! ```text
//! u32   payload length in bytes
//! payload:
//!   u64   record seed
//!   f64   sample SNR in dB
//!   u32   L
//!   u16   label count
//!   per label: u32 begin bin, u32 end bin (inclusive), u8 modulation code,
//!              f64 center offset Hz, f64 bandwidth Hz
//!   L x (f32 I, f32 Q)
//! u32   CRC32 of the payload
//! ```
//!
//! All integers and floats are little-endian. Label bins are in centered
//! order: `bin(f) = round((f - f_r) / (f_s / L)) + L/2`, clamped to `[0, L)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctensor::IqFrame;
use crate::error::{Error, Result};
use crate::objectives::Segment;
use crate::parallel::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Psk8,
    Qam8,
    Qam16,
    Gmsk,
    Fsk2,
}

pub const ALL_MODULATIONS: [Modulation; 7] =
    [Modulation::Bpsk, Modulation::Qpsk, Modulation::Psk8, Modulation::Qam8, Modulation::Qam16, Modulation::Gmsk, Modulation::Fsk2];

impl Modulation {
    pub fn code(self) -> u8 {
        ALL_MODULATIONS.iter().position(|&m| m == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        ALL_MODULATIONS.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "bpsk",
            Modulation::Qpsk => "qpsk",
            Modulation::Psk8 => "psk8",
            Modulation::Qam8 => "qam8",
            Modulation::Qam16 => "qam16",
            Modulation::Gmsk => "gmsk",
            Modulation::Fsk2 => "fsk2",
        }
    }

    /// Unit-mean-energy symbol alphabet of the linear modulations.
    pub fn constellation(self) -> Option<Vec<Complex<f64>>> {
        let c = |re: f64, im: f64| Complex::new(re, im);
        let pts = match self {
            Modulation::Bpsk => vec![c(1.0, 0.0), c(-1.0, 0.0)],
            Modulation::Qpsk => {
                let a = std::f64::consts::FRAC_1_SQRT_2;
                vec![c(a, a), c(-a, a), c(-a, -a), c(a, -a)]
            }
            Modulation::Psk8 => (0..8).map(|k| Complex::from_polar(1.0, std::f64::consts::FRAC_PI_4 * k as f64)).collect(),
            Modulation::Qam8 => {
                let s = 6f64.sqrt();
                [-3.0, -1.0, 1.0, 3.0].iter().flat_map(|&i| [c(i / s, 1.0 / s), c(i / s, -1.0 / s)]).collect()
            }
            Modulation::Qam16 => {
                let s = 10f64.sqrt();
                let lv = [-3.0, -1.0, 1.0, 3.0];
                lv.iter().flat_map(|&i| lv.iter().map(move |&q| c(i / s, q / s))).collect()
            }
            Modulation::Gmsk | Modulation::Fsk2 => return None,
        };
        Some(pts)
    }
}

impl std::fmt::Display for Modulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        ALL_MODULATIONS
            .iter()
            .copied()
            .find(|m| m.name() == key || (key == "8psk" && *m == Modulation::Psk8) || (key == "2fsk" && *m == Modulation::Fsk2))
            .or(match key.as_str() {
                "8qam" => Some(Modulation::Qam8),
                "16qam" => Some(Modulation::Qam16),
                _ => None,
            })
            .ok_or_else(|| Error::UnsupportedModulation(s.to_string()))
    }
}

pub const RRC_ROLLOFF: f64 = 0.35;
pub const RRC_SPAN_SYMBOLS: f64 = 8.0;
pub const GMSK_BT: f64 = 0.3;
/// GMSK bit rate is the occupied bandwidth divided by this.
pub const GMSK_BANDWIDTH_PER_BIT: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub modulation: Modulation,
    pub bandwidth_hz: f64,
    /// `f_c - f_r`
    pub center_offset_hz: f64,
    /// Linear amplitude-squared scale applied after unit-power modulation.
    pub power: f64,
}

impl SignalSpec {
    /// Band-limit condition: the whole occupied band lies inside `[-f_s/2, f_s/2]`.
    pub fn fits(&self, sample_rate_hz: f64) -> bool {
        self.center_offset_hz.abs() + self.bandwidth_hz / 2.0 <= sample_rate_hz / 2.0 + 1e-9
    }
}

/// Root-raised-cosine pulse at `x = t / T`, scaled so that `integral h^2 dt = T`.
fn rrc(x: f64, beta: f64) -> f64 {
    use std::f64::consts::PI;
    if x.abs() < 1e-12 {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    let q = 4.0 * beta * x;
    if (q.abs() - 1.0).abs() < 1e-9 {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    ((PI * x * (1.0 - beta)).sin() + q * (PI * x * (1.0 + beta)).cos()) / (PI * x * (1.0 - q * q))
}

/// Gaussian-filtered rectangular frequency pulse, integrating to 1/2.
fn gmsk_pulse(x: f64, bt: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI * bt / 2f64.ln().sqrt();
    let q = |v: f64| 0.5 * libm::erfc(v / std::f64::consts::SQRT_2);
    0.5 * (q(k * (x - 0.5)) - q(k * (x + 0.5)))
}

/// Unit-average-power complex baseband of `spec` (carrier offset not applied).
///
/// PSK/QAM: random symbols shaped by a root-raised-cosine pulse (roll-off
/// 0.35, 8-symbol span, symbol rate `BW / 1.35`). GMSK: BT 0.3, bit rate
/// `BW / 1.2`. 2-FSK: continuous phase, tones at `+-BW/4`, symbol rate `BW/4`.
/// Symbol timing and carrier phase are random.
pub fn modulate(spec: &SignalSpec, n_samples: usize, sample_rate_hz: f64, rng: &mut impl Rng) -> Result<Vec<Complex<f64>>> {
    if n_samples < 64 {
        return Err(Error::ConfigInvalid(format!("need at least 64 samples, got {n_samples}")));
    }
    if !(spec.bandwidth_hz > 0.0 && spec.bandwidth_hz <= sample_rate_hz) {
        return Err(Error::ConfigInvalid(format!("bandwidth {} Hz outside (0, f_s]", spec.bandwidth_hz)));
    }
    let phase0 = Complex::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
    let dt = 1.0 / sample_rate_hz;
    let out = match spec.modulation.constellation() {
        Some(alphabet) => {
            let rs = spec.bandwidth_hz / (1.0 + RRC_ROLLOFF);
            let t_sym = 1.0 / rs;
            let tau = rng.gen_range(0.0..t_sym);
            let half = RRC_SPAN_SYMBOLS / 2.0;
            let duration = n_samples as f64 * dt;
            let k_lo = (-(half + 1.0)).floor() as i64;
            let k_hi = ((duration / t_sym) + half + 1.0).ceil() as i64;
            let symbols: Vec<Complex<f64>> = (k_lo..=k_hi).map(|_| *alphabet.choose(rng).unwrap()).collect();
            (0..n_samples)
                .map(|n| {
                    let t = n as f64 * dt - tau;
                    let center = (t / t_sym).round() as i64;
                    let mut acc = Complex::new(0.0, 0.0);
                    for k in (center - half as i64)..=(center + half as i64) {
                        let x = t / t_sym - k as f64;
                        if x.abs() <= half {
                            acc += symbols[(k - k_lo) as usize] * rrc(x, RRC_ROLLOFF);
                        }
                    }
                    acc * phase0
                })
                .collect()
        }
        None => {
            let (rate, freq_of): (f64, Box<dyn Fn(&[f64], f64) -> f64>) = match spec.modulation {
                Modulation::Gmsk => {
                    let rb = spec.bandwidth_hz / GMSK_BANDWIDTH_PER_BIT;
                    // modulation index 1/2: peak deviation rb/4
                    (rb, Box::new(move |bits: &[f64], x: f64| {
                        let c = x.floor() as i64;
                        let mut f = 0.0;
                        for k in (c - 3)..=(c + 3) {
                            if let Some(b) = usize::try_from(k + 4).ok().and_then(|i| bits.get(i)) {
                                f += b * gmsk_pulse(x - k as f64, GMSK_BT);
                            }
                        }
                        f * rb
                    }))
                }
                _ => {
                    let dev = spec.bandwidth_hz / 4.0;
                    (spec.bandwidth_hz / 4.0, Box::new(move |bits: &[f64], x: f64| {
                        let k = x.floor() as i64;
                        bits[(k + 4) as usize] * dev
                    }))
                }
            };
            let t_sym = 1.0 / rate;
            let tau = rng.gen_range(0.0..t_sym);
            let n_sym = (n_samples as f64 * dt / t_sym).ceil() as usize + 10;
            let bits: Vec<f64> = (0..n_sym).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let mut phase = 0.0f64;
            (0..n_samples)
                .map(|n| {
                    let z = phase0 * Complex::from_polar(1.0, phase);
                    let x = (n as f64 * dt + tau) / t_sym;
                    phase += std::f64::consts::TAU * freq_of(&bits, x) * dt;
                    z
                })
                .collect()
        }
    };
    Ok(out)
}

/// One labeled signal inside a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabel {
    pub segment: Segment,
    pub modulation: Modulation,
    pub center_offset_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub frame: IqFrame<f32>,
    /// Sorted by frequency.
    pub labels: Vec<SegmentLabel>,
    pub sample_snr_db: f64,
    pub seed: u64,
}

impl SampleRecord {
    pub fn segments(&self) -> Vec<Segment> {
        self.labels.iter().map(|l| l.segment).collect()
    }
}

/// Centered bin index of frequency offset `f` (Hz from the frame center).
pub fn bin_of(f: f64, len: usize, sample_rate_hz: f64) -> usize {
    let b = (f / (sample_rate_hz / len as f64)).round() as i64 + (len / 2) as i64;
    b.clamp(0, len as i64 - 1) as usize
}

/// Frequency offset (Hz) of a centered bin index.
pub fn freq_of_bin(bin: usize, len: usize, sample_rate_hz: f64) -> f64 {
    (bin as f64 - (len / 2) as f64) * sample_rate_hz / len as f64
}

/// Signal placement and composition parameters shared by every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposeConfig {
    pub input_bins: usize,
    pub sample_rate_hz: f64,
    pub center_freq_hz: f64,
    pub modulations: Vec<Modulation>,
    pub bandwidths_hz: Vec<f64>,
    pub guard_hz: f64,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            input_bins: 1024,
            sample_rate_hz: 20e6,
            center_freq_hz: 0.0,
            modulations: ALL_MODULATIONS.to_vec(),
            bandwidths_hz: vec![0.1e6, 0.2e6, 0.5e6, 1e6, 2e6],
            guard_hz: 0.1e6,
        }
    }
}

impl ComposeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.input_bins < 64 || !self.input_bins.is_power_of_two() {
            return bad(format!("input_bins {} must be a power of two >= 64", self.input_bins));
        }
        if !(self.sample_rate_hz > 0.0) || !self.center_freq_hz.is_finite() {
            return bad("sample rate must be positive".into());
        }
        if self.modulations.is_empty() || self.bandwidths_hz.is_empty() {
            return bad("need at least one modulation and one bandwidth".into());
        }
        if self.bandwidths_hz.iter().any(|&b| !(b > 0.0) || b + 2.0 * self.guard_hz > self.sample_rate_hz) {
            return bad("every bandwidth plus edge guards must fit in the band".into());
        }
        if !(self.guard_hz >= 0.0) {
            return bad("guard band must be non-negative".into());
        }
        Ok(())
    }

    /// Band needed by signals of these widths, including guards between them
    /// and against both band edges.
    fn span_needed(&self, widths: &[f64]) -> f64 {
        widths.iter().sum::<f64>() + (widths.len() + 1) as f64 * self.guard_hz
    }
}

fn complex_noise(rng: &mut impl Rng, n: usize) -> Vec<Complex<f64>> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex::new(re * s, im * s)
        })
        .collect()
}

fn mean_power(v: &[Complex<f64>]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64
}

/// Places `widths` left to right in random order with uniformly random slack
/// split among the gaps; returns center offsets in the input order.
fn place(widths: &[f64], cfg: &ComposeConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let free = cfg.sample_rate_hz - cfg.span_needed(widths);
    if free < 0.0 {
        return Err(Error::PlacementInfeasible(format!(
            "{} signals need {:.3} MHz with guards, band is {:.3} MHz",
            widths.len(),
            cfg.span_needed(widths) / 1e6,
            cfg.sample_rate_hz / 1e6
        )));
    }
    let mut cuts: Vec<f64> = (0..widths.len()).map(|_| rng.gen_range(0.0..=free)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..widths.len()).collect();
    order.shuffle(rng);
    let mut offsets = vec![0.0; widths.len()];
    let mut edge = -cfg.sample_rate_hz / 2.0 + cfg.guard_hz;
    let mut prev_cut = 0.0;
    for (slot, &i) in order.iter().enumerate() {
        edge += cuts[slot] - prev_cut;
        prev_cut = cuts[slot];
        offsets[i] = edge + widths[i] / 2.0;
        edge += widths[i] + cfg.guard_hz;
    }
    Ok(offsets)
}

/// One sample: `n_signals` equal-power signals at non-overlapping offsets plus
/// noise, scaled so realized total signal power over realized noise power is
/// exactly `snr_db`. Noise has unit power.
pub fn compose_sample(n_signals: usize, snr_db: f64, cfg: &ComposeConfig, seed: u64) -> Result<SampleRecord> {
    compose_parts(n_signals, snr_db, cfg, seed).map(|(rec, _)| rec)
}

/// [`compose_sample`] that also returns the noise realization it added.
pub fn compose_parts(n_signals: usize, snr_db: f64, cfg: &ComposeConfig, seed: u64) -> Result<(SampleRecord, Vec<Complex<f64>>)> {
    cfg.validate()?;
    if !(1..=10).contains(&n_signals) {
        return Err(Error::ConfigInvalid(format!("signal count {n_signals} outside 1..=10")));
    }
    if !snr_db.is_finite() {
        return Err(Error::ConfigInvalid("SNR must be finite".into()));
    }
    let narrowest = cfg.bandwidths_hz.iter().copied().fold(f64::INFINITY, f64::min);
    if cfg.span_needed(&vec![narrowest; n_signals]) > cfg.sample_rate_hz {
        return Err(Error::PlacementInfeasible(format!("{n_signals} signals cannot fit even at the narrowest bandwidth")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = cfg.input_bins;
    let fs = cfg.sample_rate_hz;

    let mut widths = Vec::new();
    for attempt in 0.. {
        widths = (0..n_signals).map(|_| *cfg.bandwidths_hz.choose(&mut rng).unwrap()).collect::<Vec<f64>>();
        if cfg.span_needed(&widths) <= fs {
            break;
        }
        if attempt == 1000 {
            return Err(Error::PlacementInfeasible("no bandwidth draw fits the band".into()));
        }
    }
    let offsets = place(&widths, cfg, &mut rng)?;

    let mut total = vec![Complex::new(0.0, 0.0); l];
    let mut labels = Vec::with_capacity(n_signals);
    for (&bw, &off) in widths.iter().zip(&offsets) {
        let spec = SignalSpec { modulation: *cfg.modulations.choose(&mut rng).unwrap(), bandwidth_hz: bw, center_offset_hz: off, power: 1.0 };
        let base = modulate(&spec, l, fs, &mut rng)?;
        let norm = (spec.power / mean_power(&base)).sqrt();
        let w = std::f64::consts::TAU * off / fs;
        for (n, (acc, z)) in total.iter_mut().zip(&base).enumerate() {
            *acc += z * norm * Complex::from_polar(1.0, w * n as f64);
        }
        let segment = Segment::new(bin_of(off - bw / 2.0, l, fs), bin_of(off + bw / 2.0, l, fs));
        labels.push(SegmentLabel { segment, modulation: spec.modulation, center_offset_hz: off, bandwidth_hz: bw });
    }
    labels.sort_by_key(|lb| lb.segment);

    let noise = complex_noise(&mut rng, l);
    let gain = (10f64.powf(snr_db / 10.0) * mean_power(&noise) / mean_power(&total)).sqrt();
    let samples: Vec<Complex<f32>> =
        total.iter().zip(&noise).map(|(s, w)| s * gain + w).map(|z| Complex::new(z.re as f32, z.im as f32)).collect();
    let rec = SampleRecord { frame: IqFrame::new(samples, fs, cfg.center_freq_hz)?, labels, sample_snr_db: snr_db, seed };
    Ok((rec, noise))
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

pub const DATASET_VERSION: u32 = 1;
pub const SPLIT_MAGIC: &[u8; 8] = b"SSEGDS1\0";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const LABEL_MAPPING: &str = "bin(f) = round((f - f_r) / (f_s / L)) + L/2, clamped to [0, L-1]; segments inclusive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub samples: usize,
    pub snr_db: [f64; 2],
    pub signals: [usize; 2],
    pub seed: u64,
    /// Train / val / test proportions.
    pub split: [f64; 3],
    #[serde(flatten)]
    pub compose: ComposeConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { samples: 4000, snr_db: [0.0, 10.0], signals: [1, 3], seed: 0, split: [0.8, 0.1, 0.1], compose: ComposeConfig::default() }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        self.compose.validate()?;
        if self.samples == 0 {
            return bad("sample count must be positive".into());
        }
        if !(self.snr_db[0].is_finite() && self.snr_db[1].is_finite()) || self.snr_db[0] > self.snr_db[1] {
            return bad(format!("SNR range [{}, {}] is empty", self.snr_db[0], self.snr_db[1]));
        }
        if self.signals[0] < 1 || self.signals[1] > 10 || self.signals[0] > self.signals[1] {
            return bad(format!("signal count range {:?} must lie in 1..=10", self.signals));
        }
        if self.split.iter().any(|&p| !(p >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split proportions must be non-negative and sum to 1".into());
        }
        Ok(())
    }

    /// Record counts per split; rounding remainder goes to the test split.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.samples;
        let train = (n as f64 * self.split[0]).round() as usize;
        let val = ((n as f64 * self.split[1]).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

/// Seed of record `index` derived from the master seed (SplitMix64 finalizer).
pub fn record_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Record `index` of the dataset described by `cfg`.
pub fn generate_record(cfg: &GeneratorConfig, index: usize) -> Result<SampleRecord> {
    let seed = record_seed(cfg.seed, index as u64);
    // draw SNR and signal count from a stream independent of the composition
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let snr = if cfg.snr_db[0] == cfg.snr_db[1] { cfg.snr_db[0] } else { rng.gen_range(cfg.snr_db[0]..cfg.snr_db[1]) };
    let n = rng.gen_range(cfg.signals[0]..=cfg.signals[1]);
    compose_sample(n, snr, &cfg.compose, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
    /// Byte offset of every record inside `file`.
    pub offsets: Vec<u64>,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub input_bins: usize,
    pub sample_rate_hz: f64,
    pub snr_db: [f64; 2],
    pub signals: [usize; 2],
    pub label_mapping: String,
    pub config: GeneratorConfig,
    pub splits: Vec<(String, SplitEntry)>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&SplitEntry> {
        self.splits.iter().find(|(n, _)| n == name).map(|(_, e)| e).ok_or_else(|| Error::SplitMissing(name.to_string()))
    }
}

pub fn encode_record(rec: &SampleRecord) -> Vec<u8> {
    let samples = rec.frame.samples();
    let l = samples.len();
    let mut p = Vec::with_capacity(18 + rec.labels.len() * 25 + l * 8);
    p.extend_from_slice(&rec.seed.to_le_bytes());
    p.extend_from_slice(&rec.sample_snr_db.to_le_bytes());
    p.extend_from_slice(&(l as u32).to_le_bytes());
    p.extend_from_slice(&(rec.labels.len() as u16).to_le_bytes());
    for lb in &rec.labels {
        p.extend_from_slice(&(lb.segment.begin as u32).to_le_bytes());
        p.extend_from_slice(&(lb.segment.end as u32).to_le_bytes());
        p.push(lb.modulation.code());
        p.extend_from_slice(&lb.center_offset_hz.to_le_bytes());
        p.extend_from_slice(&lb.bandwidth_hz.to_le_bytes());
    }
    let im = samples.im_or_zeros();
    for (re, im) in samples.re().iter().zip(im.iter()) {
        p.extend_from_slice(&re.to_le_bytes());
        p.extend_from_slice(&im.to_le_bytes());
    }
    let mut out = Vec::with_capacity(p.len() + 8);
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    let crc = crc32fast::hash(&p);
    out.extend_from_slice(&p);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32(&mut self) -> Option<f32> {
        self.u32().map(f32::from_bits)
    }
    fn f64(&mut self) -> Option<f64> {
        self.u64().map(f64::from_bits)
    }
}

/// Decodes the record starting at `buf[0]`; returns it and its encoded length.
pub fn decode_record(buf: &[u8], index: usize, sample_rate_hz: f64, center_freq_hz: f64) -> Result<(SampleRecord, usize)> {
    let corrupt = |reason: &str| Error::CorruptRecord { index, reason: reason.to_string() };
    let mut c = Cursor { buf, pos: 0 };
    let len = c.u32().ok_or_else(|| corrupt("truncated length"))? as usize;
    let payload = c.take(len).ok_or_else(|| corrupt("truncated payload"))?;
    let crc = c.u32().ok_or_else(|| corrupt("truncated checksum"))?;
    if crc32fast::hash(payload) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let mut p = Cursor { buf: payload, pos: 0 };
    let mut parse = || -> Option<SampleRecord> {
        let seed = p.u64()?;
        let snr = p.f64()?;
        let l = p.u32()? as usize;
        let n_labels = p.u16()? as usize;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            let (b, e) = (p.u32()? as usize, p.u32()? as usize);
            if b > e || e >= l {
                return None;
            }
            let modulation = Modulation::from_code(p.u8()?)?;
            let center_offset_hz = p.f64()?;
            let bandwidth_hz = p.f64()?;
            labels.push(SegmentLabel { segment: Segment::new(b, e), modulation, center_offset_hz, bandwidth_hz });
        }
        let mut samples = Vec::with_capacity(l);
        for _ in 0..l {
            samples.push(Complex::new(p.f32()?, p.f32()?));
        }
        if p.pos != payload.len() {
            return None;
        }
        let frame = IqFrame::new(samples, sample_rate_hz, center_freq_hz).ok()?;
        Some(SampleRecord { frame, labels, sample_snr_db: snr, seed })
    };
    let rec = parse().ok_or_else(|| corrupt("malformed payload"))?;
    Ok((rec, c.pos))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Writes a dataset directory from explicit split contents. Writing the
/// records read back from a dataset reproduces its bytes.
pub fn write_dataset(dir: &Path, config: &GeneratorConfig, splits: [&[SampleRecord]; 3]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut entries = Vec::new();
    for (name, records) in SPLITS.iter().zip(splits) {
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        let mut bytes = SPLIT_MAGIC.to_vec();
        let mut offsets = Vec::with_capacity(records.len());
        for r in records {
            offsets.push(bytes.len() as u64);
            bytes.extend(encode_record(r));
        }
        let mut f = fs::File::create(&path).map_err(io_at(&path))?;
        f.write_all(&bytes).map_err(io_at(&path))?;
        entries.push((name.to_string(), SplitEntry { file, count: records.len(), offsets, bytes: bytes.len() as u64 }));
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        count: splits.iter().map(|s| s.len()).sum(),
        input_bins: config.compose.input_bins,
        sample_rate_hz: config.compose.sample_rate_hz,
        snr_db: config.snr_db,
        signals: config.signals,
        label_mapping: LABEL_MAPPING.to_string(),
        config: config.clone(),
        splits: entries,
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(io_at(&path))?;
    Ok(manifest)
}

/// Generates every record of `config` (in parallel, deterministically) and
/// writes the dataset directory.
pub fn generate_dataset(config: &GeneratorConfig, dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let records = par_map(config.samples, |i| generate_record(config, i)).into_iter().collect::<Result<Vec<_>>>()?;
    let [a, b, _] = config.split_counts();
    write_dataset(dir, config, [&records[..a], &records[a..a + b], &records[a + b..]])
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(io_at(&path))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(DATASET_VERSION as u64) {
            return Err(Error::FormatVersionMismatch(format!("dataset version {version:?}, expected {DATASET_VERSION}")));
        }
        let manifest: DatasetManifest = serde_json::from_value(value)?;
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Every record of a split, checksums verified.
    pub fn read_split(&self, name: &str) -> Result<Vec<SampleRecord>> {
        self.iter_split(name)?.collect()
    }

    pub fn iter_split(&self, name: &str) -> Result<impl Iterator<Item = Result<SampleRecord>>> {
        let entry = self.manifest.split(name)?.clone();
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_at(&path))?;
        if bytes.len() < SPLIT_MAGIC.len() || &bytes[..SPLIT_MAGIC.len()] != SPLIT_MAGIC {
            return Err(Error::FormatVersionMismatch(format!("{} is not a dataset split", path.display())));
        }
        if bytes.len() as u64 != entry.bytes {
            return Err(Error::CorruptRecord {
                index: entry.offsets.iter().filter(|&&o| o < bytes.len() as u64).count().saturating_sub(1),
                reason: format!("split file is {} bytes, manifest says {}", bytes.len(), entry.bytes),
            });
        }
        let (fs_hz, fc) = (self.manifest.sample_rate_hz, self.manifest.config.compose.center_freq_hz);
        let l = self.manifest.input_bins;
        Ok(entry.offsets.into_iter().enumerate().map(move |(i, off)| {
            let start = off as usize;
            let buf = bytes.get(start..).ok_or(Error::CorruptRecord { index: i, reason: "offset past end".into() })?;
            let (rec, _) = decode_record(buf, i, fs_hz, fc)?;
            if rec.frame.len() != l {
                return Err(Error::CorruptRecord { index: i, reason: format!("{} samples, manifest says {l}", rec.frame.len()) });
            }
            Ok(rec)
        }))
    }
}
