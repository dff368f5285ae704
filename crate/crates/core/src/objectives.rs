//! Losses over per-bin occupancy predictions and segment-level metrics.

use serde::{Deserialize, Serialize};

use crate::ctensor::Real;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` before any log.
pub const LOG_CLAMP: f64 = 1e-7;

/// Binary per-bin ground truth for the real and imaginary predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyMask {
    pub o_x: Vec<bool>,
    pub o_y: Vec<bool>,
}

impl OccupancyMask {
    /// Both parts equal to the same occupancy.
    pub fn from_occupancy(occupied: Vec<bool>) -> Self {
        Self { o_y: occupied.clone(), o_x: occupied }
    }

    pub fn from_segments(len: usize, segments: &[Segment]) -> Self {
        let mut occ = vec![false; len];
        for s in segments {
            for v in &mut occ[s.begin..=s.end.min(len - 1)] {
                *v = true;
            }
        }
        Self::from_occupancy(occ)
    }

    pub fn len(&self) -> usize {
        self.o_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.o_x.is_empty()
    }
}

/// Per-bin occupancy probabilities; a real-valued model sets `p_y = p_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedSpectrum<T> {
    pub p_x: Vec<T>,
    pub p_y: Vec<T>,
}

impl<T: Real> PredictedSpectrum<T> {
    pub fn real(p: Vec<T>) -> Self {
        Self { p_y: p.clone(), p_x: p }
    }

    pub fn len(&self) -> usize {
        self.p_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_x.is_empty()
    }
}

/// Value and analytic gradient of a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub d_px: Vec<T>,
    /// Empty for single-channel losses.
    pub d_py: Vec<T>,
}

fn clamp<T: Real>(p: T) -> (T, bool) {
    let lo = T::c(LOG_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

/// `-(alpha)[(1-p)^g o log p + p^g (1-o) log(1-p)]` and its derivative in `p`.
fn focal_term<T: Real>(p: T, o: bool, gamma: T, alpha: T) -> (T, T) {
    let (p, inside) = clamp(p);
    let one = T::one();
    let (val, grad) = if o {
        let m = (one - p).powf(gamma);
        let dm = if gamma == T::zero() { T::zero() } else { -gamma * (one - p).powf(gamma - one) };
        (m * p.ln(), dm * p.ln() + m / p)
    } else {
        let m = p.powf(gamma);
        let dm = if gamma == T::zero() { T::zero() } else { gamma * p.powf(gamma - one) };
        (m * (one - p).ln(), dm * (one - p).ln() - m / (one - p))
    };
    (-alpha * val, if inside { -alpha * grad } else { T::zero() })
}

fn bce_term<T: Real>(p: T, o: bool) -> (T, T) {
    let (p, inside) = clamp(p);
    let one = T::one();
    let (val, grad) = if o { (p.ln(), one / p) } else { ((one - p).ln(), -one / (one - p)) };
    (-val, if inside { -grad } else { T::zero() })
}

fn check_len<T>(pred: &PredictedSpectrum<T>, target: &OccupancyMask) -> Result<()> {
    let n = target.len();
    if pred.p_x.len() != n || pred.p_y.len() != n || target.o_y.len() != n {
        return Err(Error::shape(format!("prediction of {} bins vs target of {n}", pred.p_x.len())));
    }
    Ok(())
}

/// Complex focal loss over the real and imaginary occupancy predictions.
pub fn cfl<T: Real>(pred: &PredictedSpectrum<T>, target: &OccupancyMask, gamma: T, alpha: T) -> Result<LossGrad<T>> {
    check_len(pred, target)?;
    let half_alpha = alpha * T::c(0.5);
    let mut loss = T::zero();
    let mut d_px = Vec::with_capacity(pred.len());
    let mut d_py = Vec::with_capacity(pred.len());
    for f in 0..pred.len() {
        let (lx, gx) = focal_term(pred.p_x[f], target.o_x[f], gamma, half_alpha);
        let (ly, gy) = focal_term(pred.p_y[f], target.o_y[f], gamma, half_alpha);
        loss += lx + ly;
        d_px.push(gx);
        d_py.push(gy);
    }
    Ok(LossGrad { loss, d_px, d_py })
}

/// Complex binary cross-entropy: BCE averaged over the two parts.
pub fn cbce<T: Real>(pred: &PredictedSpectrum<T>, target: &OccupancyMask) -> Result<LossGrad<T>> {
    check_len(pred, target)?;
    let half = T::c(0.5);
    let mut loss = T::zero();
    let mut d_px = Vec::with_capacity(pred.len());
    let mut d_py = Vec::with_capacity(pred.len());
    for f in 0..pred.len() {
        let (lx, gx) = bce_term(pred.p_x[f], target.o_x[f]);
        let (ly, gy) = bce_term(pred.p_y[f], target.o_y[f]);
        loss += half * (lx + ly);
        d_px.push(half * gx);
        d_py.push(half * gy);
    }
    Ok(LossGrad { loss, d_px, d_py })
}

fn check_single<T>(p: &[T], o: &[bool]) -> Result<()> {
    if p.len() != o.len() {
        return Err(Error::shape(format!("prediction of {} bins vs target of {}", p.len(), o.len())));
    }
    Ok(())
}

/// Focal loss on a single real probability channel.
pub fn rfl<T: Real>(p: &[T], o: &[bool], gamma: T, alpha: T) -> Result<LossGrad<T>> {
    check_single(p, o)?;
    let mut loss = T::zero();
    let mut d_px = Vec::with_capacity(p.len());
    for (&p, &o) in p.iter().zip(o) {
        let (l, g) = focal_term(p, o, gamma, alpha);
        loss += l;
        d_px.push(g);
    }
    Ok(LossGrad { loss, d_px, d_py: Vec::new() })
}

/// Binary cross-entropy on a single real probability channel.
pub fn rbce<T: Real>(p: &[T], o: &[bool]) -> Result<LossGrad<T>> {
    check_single(p, o)?;
    let mut loss = T::zero();
    let mut d_px = Vec::with_capacity(p.len());
    for (&p, &o) in p.iter().zip(o) {
        let (l, g) = bce_term(p, o);
        loss += l;
        d_px.push(g);
    }
    Ok(LossGrad { loss, d_px, d_py: Vec::new() })
}

// ---------------------------------------------------------------------------
// Segments and boxes
// ---------------------------------------------------------------------------

/// Occupied bin range, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub begin: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(begin: usize, end: usize) -> Self {
        assert!(begin <= end, "segment begin {begin} after end {end}");
        Self { begin, end }
    }

    pub fn width(&self) -> usize {
        self.end + 1 - self.begin
    }

    pub fn intersects(&self, other: &Segment) -> bool {
        self.begin <= other.end && other.begin <= self.end
    }
}

/// Maximal runs of set bins.
pub fn extract_segments(mask: &[bool]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Segment::new(s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Segment::new(s, mask.len() - 1));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masks {
    pub x: Vec<bool>,
    pub y: Vec<bool>,
    /// `|p_x + j p_y| / sqrt(2) >= tau`
    pub abs: Vec<bool>,
}

pub fn binarize<T: Real>(pred: &PredictedSpectrum<T>, tau: f64) -> Result<Masks> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutOfRange(tau));
    }
    let t = T::c(tau);
    let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
    Ok(Masks {
        x: pred.p_x.iter().map(|&p| p >= t).collect(),
        y: pred.p_y.iter().map(|&p| p >= t).collect(),
        abs: pred.p_x.iter().zip(&pred.p_y).map(|(&x, &y)| x.hypot(y) * inv_sqrt2 >= t).collect(),
    })
}

/// Rectangle on the (real-extent, imaginary-extent) plane, inclusive bin bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BoxZ {
    pub x: Segment,
    pub y: Segment,
}

/// Pairs each run of `mask_x` with every intersecting run of `mask_y`; a run
/// with no partner on the other axis becomes a square on its own extent.
pub fn boxes_from_masks(mask_x: &[bool], mask_y: &[bool]) -> Vec<BoxZ> {
    let xs = extract_segments(mask_x);
    let ys = extract_segments(mask_y);
    let mut y_used = vec![false; ys.len()];
    let mut out = Vec::new();
    for x in &xs {
        let mut paired = false;
        for (k, y) in ys.iter().enumerate() {
            if x.intersects(y) {
                out.push(BoxZ { x: *x, y: *y });
                y_used[k] = true;
                paired = true;
            }
        }
        if !paired {
            out.push(BoxZ { x: *x, y: *x });
        }
    }
    for (y, _) in ys.iter().zip(&y_used).filter(|(_, used)| !**used) {
        out.push(BoxZ { x: *y, y: *y });
    }
    out.sort();
    out
}

fn overlap(a: &Segment, b: &Segment) -> usize {
    let lo = a.begin.max(b.begin);
    let hi = (a.end + 1).min(b.end + 1);
    hi.saturating_sub(lo)
}

/// Area IoU with bins as half-open unit intervals.
pub fn ciou(a: &BoxZ, b: &BoxZ) -> f64 {
    let inter = (overlap(&a.x, &b.x) * overlap(&a.y, &b.y)) as f64;
    let area = |z: &BoxZ| (z.x.width() * z.y.width()) as f64;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Interval IoU with bins as half-open unit intervals.
pub fn riou(a: &Segment, b: &Segment) -> f64 {
    let inter = overlap(a, b) as f64;
    let union = ((a.end.max(b.end) + 1) - a.begin.min(b.begin)) as f64;
    inter / union
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

/// Dense `rows x cols` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl IouMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        Self { rows, cols, values }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Matched `(row, col)` pairs in ascending order; zero-valued pairs are dropped.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

const TIE_TOL: f64 = 1e-12;

/// Min-cost perfect matching on a square matrix (Kuhn-Munkres with potentials).
/// Returns the column assigned to each row.
fn hungarian_min(n: usize, cost: &[f64]) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Best total over the given rows and columns.
fn best_total(c: &IouMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len().max(cols.len());
    if n == 0 || rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let mut cost = vec![0.0; n * n];
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            cost[a * n + b] = -c.get(i, j);
        }
    }
    let assign = hungarian_min(n, &cost);
    assign.iter().enumerate().map(|(a, &b)| -cost[a * n + b]).sum()
}

/// Connected components of the bipartite graph of positive entries.
fn components(c: &IouMatrix) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut row_seen = vec![false; c.rows];
    let mut col_seen = vec![false; c.cols];
    let mut out = Vec::new();
    for start in 0..c.rows {
        if row_seen[start] || !(0..c.cols).any(|j| c.get(start, j) > 0.0) {
            continue;
        }
        let (mut rows, mut cols) = (vec![start], Vec::new());
        row_seen[start] = true;
        let mut stack = vec![(true, start)];
        while let Some((is_row, k)) = stack.pop() {
            if is_row {
                for j in 0..c.cols {
                    if !col_seen[j] && c.get(k, j) > 0.0 {
                        col_seen[j] = true;
                        cols.push(j);
                        stack.push((false, j));
                    }
                }
            } else {
                for i in 0..c.rows {
                    if !row_seen[i] && c.get(i, k) > 0.0 {
                        row_seen[i] = true;
                        rows.push(i);
                        stack.push((true, i));
                    }
                }
            }
        }
        rows.sort_unstable();
        cols.sort_unstable();
        out.push((rows, cols));
    }
    out
}

/// One-to-one assignment maximizing the summed similarity.
///
/// Among optimal matchings the one containing the lowest `(row, col)` pair
/// wherever two optima differ is returned, so results are deterministic.
pub fn optimal_assignment(c: &IouMatrix) -> Assignment {
    let mut pairs = Vec::new();
    for (rows, cols) in components(c) {
        let target = best_total(c, &rows, &cols);
        let mut free_rows = rows.clone();
        let mut free_cols = cols.clone();
        let mut fixed = 0.0;
        for &i in &rows {
            free_rows.retain(|&r| r != i);
            let mut chosen = None;
            for &j in &free_cols {
                let v = c.get(i, j);
                if v <= 0.0 {
                    continue;
                }
                let rest: Vec<usize> = free_cols.iter().copied().filter(|&x| x != j).collect();
                if fixed + v + best_total(c, &free_rows, &rest) >= target - TIE_TOL {
                    chosen = Some(j);
                    break;
                }
            }
            if let Some(j) = chosen {
                fixed += c.get(i, j);
                free_cols.retain(|&x| x != j);
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| c.get(i, j)).sum();
    Assignment { pairs, total }
}

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// `TP / (TP + FP + FN)`
    pub accuracy: f64,
    /// `TP / (TP + FN)`
    pub recall: f64,
    /// Mean interval IoU over ground-truth segments (0 for unmatched ones).
    pub mean_iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub truths: usize,
}

/// Per-sample matching counts; aggregated with [`DetectionMetrics::from_counts`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub truths: usize,
    pub iou_sum: f64,
}

impl MatchCounts {
    pub fn merge(&mut self, other: &MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.truths += other.truths;
        self.iou_sum += other.iou_sum;
    }
}

pub fn match_segments(pred: &[Segment], truth: &[Segment], tau: f64) -> MatchCounts {
    let c = IouMatrix::from_fn(truth.len(), pred.len(), |i, j| riou(&truth[i], &pred[j]));
    let a = optimal_assignment(&c);
    let tp = a.pairs.iter().filter(|&&(i, j)| c.get(i, j) >= tau).count();
    MatchCounts { tp, fp: pred.len() - tp, fn_: truth.len() - tp, truths: truth.len(), iou_sum: a.total }
}

impl DetectionMetrics {
    pub fn from_counts(c: &MatchCounts) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        Self {
            accuracy: ratio(c.tp, c.tp + c.fp + c.fn_),
            recall: ratio(c.tp, c.tp + c.fn_),
            mean_iou: if c.truths == 0 { 1.0 } else { c.iou_sum / c.truths as f64 },
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            truths: c.truths,
        }
    }
}

/// Counts pooled over all samples. Empty truth and prediction sets score 1.
pub fn detection_metrics(preds: &[Vec<Segment>], truths: &[Vec<Segment>], tau: f64) -> DetectionMetrics {
    let mut total = MatchCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        total.merge(&match_segments(p, t, tau));
    }
    DetectionMetrics::from_counts(&total)
}

/// Mean per-truth ℂIoU after optimal box assignment, for one sample.
pub fn sample_ciou(pred_boxes: &[BoxZ], truth_boxes: &[BoxZ]) -> (f64, usize) {
    let c = IouMatrix::from_fn(truth_boxes.len(), pred_boxes.len(), |i, j| ciou(&truth_boxes[i], &pred_boxes[j]));
    (optimal_assignment(&c).total, truth_boxes.len())
}

// ---------------------------------------------------------------------------
// Stopping rule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochScore {
    pub val_loss: f64,
    pub val_ciou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    ReduceLr,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub patience: usize,
    /// Stagnant epochs before the single learning-rate reduction; `None` disables it.
    pub lr_patience: Option<usize>,
    pub min_delta: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { patience: 3, lr_patience: Some(3), min_delta: 1e-4 }
    }
}

/// Stateful form of [`stopping_criterion`], fed one epoch at a time.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    rule: StopRule,
    best_loss: f64,
    best_ciou: f64,
    stale: usize,
    lr_reduced: bool,
}

impl EarlyStopping {
    pub fn new(rule: StopRule) -> Self {
        Self { rule, best_loss: f64::INFINITY, best_ciou: f64::NEG_INFINITY, stale: 0, lr_reduced: false }
    }

    pub fn lr_reduced(&self) -> bool {
        self.lr_reduced
    }

    /// An epoch counts as progress only if the loss drops or the IoU rises by
    /// strictly more than `min_delta`. Once the LR has been reduced the
    /// stagnation count restarts, so stopping is judged at the new rate.
    pub fn observe(&mut self, score: EpochScore) -> Decision {
        let first = self.best_loss.is_infinite() && self.best_ciou.is_infinite();
        let loss_better = score.val_loss < self.best_loss - self.rule.min_delta;
        let ciou_better = score.val_ciou > self.best_ciou + self.rule.min_delta;
        if score.val_loss < self.best_loss {
            self.best_loss = score.val_loss;
        }
        if score.val_ciou > self.best_ciou {
            self.best_ciou = score.val_ciou;
        }
        if first || loss_better || ciou_better {
            self.stale = 0;
            return Decision::Continue;
        }
        self.stale += 1;
        if let Some(lp) = self.rule.lr_patience {
            if !self.lr_reduced && self.stale >= lp {
                self.lr_reduced = true;
                self.stale = 0;
                return Decision::ReduceLr;
            }
        }
        if self.stale >= self.rule.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

/// Decision after the last epoch of `history`.
pub fn stopping_criterion(history: &[EpochScore], rule: StopRule) -> Decision {
    let mut es = EarlyStopping::new(rule);
    let mut last = Decision::Continue;
    for &s in history {
        last = es.observe(s);
        if last == Decision::Stop {
            break;
        }
    }
    last
}
