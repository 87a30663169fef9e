//! Calibration error (equal-width and adaptive bins) and temperature scaling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::AnnotatedSample;
use crate::metrics::{gold_labels, Channel, MetricsError, PredictionSet};

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_INTERVAL: (f64, f64) = (0.05, 10.0);
const GRID_STEP: f64 = 0.01;
const REFINE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("{probs} scores but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("{bins} bins requested for {n} samples")]
    TooManyBins { bins: usize, n: usize },
    #[error("the number of bins must be positive")]
    ZeroBins,
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("bad temperature interval [{0}, {1}]")]
    BadInterval(f64, f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub members: usize,
    /// Mean score of the members (0 when empty).
    pub conf: f64,
    /// Fraction of members labelled 1 (0 when empty).
    pub acc: f64,
}

fn check(probs: &[f64], labels: &[u8], bins: usize) -> Result<(), CalibrationError> {
    if probs.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    if bins == 0 {
        return Err(CalibrationError::ZeroBins);
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CalibrationError::OutOfRange(*p));
    }
    Ok(())
}

fn edge(k: usize, m: usize) -> f64 {
    k as f64 / m as f64
}

/// Bin of `p` among `m` equal-width bins `[0, 1/m], (1/m, 2/m], ...`.
pub fn bin_index(p: f64, m: usize) -> usize {
    let mut b = ((p * m as f64).ceil() as usize).saturating_sub(1).min(m - 1);
    while b > 0 && p <= edge(b, m) {
        b -= 1;
    }
    while b + 1 < m && p > edge(b + 1, m) {
        b += 1;
    }
    b
}

fn summarize(members: &[(f64, u8)], lo: f64, hi: f64) -> CalibrationBin {
    let n = members.len();
    let (conf, acc) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            members.iter().map(|m| m.0).sum::<f64>() / n as f64,
            members.iter().filter(|m| m.1 == 1).count() as f64 / n as f64,
        )
    };
    CalibrationBin { lo, hi, members: n, conf, acc }
}

pub fn ece_bins(probs: &[f64], labels: &[u8], m: usize) -> Result<Vec<CalibrationBin>, CalibrationError> {
    check(probs, labels, m)?;
    let mut buckets: Vec<Vec<(f64, u8)>> = vec![Vec::new(); m];
    for (&p, &y) in probs.iter().zip(labels) {
        buckets[bin_index(p, m)].push((p, y));
    }
    Ok(buckets
        .iter()
        .enumerate()
        .map(|(k, b)| summarize(b, edge(k, m), edge(k + 1, m)))
        .collect())
}

/// Expected calibration error over `m` equal-width bins, accumulated as
/// `sum_b |sum_{i in b} (y_i - p_i)| / n`.
pub fn ece(probs: &[f64], labels: &[u8], m: usize) -> Result<f64, CalibrationError> {
    check(probs, labels, m)?;
    let mut residual = vec![0.0; m];
    for (&p, &y) in probs.iter().zip(labels) {
        residual[bin_index(p, m)] += f64::from(y) - p;
    }
    Ok(residual.iter().map(|r| r.abs()).sum::<f64>() / probs.len() as f64)
}

/// Equal-mass bins: scores sorted by value then input position, split into
/// `m` contiguous runs whose sizes differ by at most one, larger runs first.
pub fn ace_bins(probs: &[f64], labels: &[u8], m: usize) -> Result<Vec<CalibrationBin>, CalibrationError> {
    check(probs, labels, m)?;
    let n = probs.len();
    if m > n {
        return Err(CalibrationError::TooManyBins { bins: m, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let (base, extra) = (n / m, n % m);
    let mut out = Vec::with_capacity(m);
    let mut at = 0;
    for k in 0..m {
        let size = base + usize::from(k < extra);
        let members: Vec<(f64, u8)> = order[at..at + size].iter().map(|&i| (probs[i], labels[i])).collect();
        out.push(summarize(&members, members[0].0, members[size - 1].0));
        at += size;
    }
    Ok(out)
}

/// Adaptive calibration error: unweighted mean gap over equal-mass bins.
pub fn ace(probs: &[f64], labels: &[u8], m: usize) -> Result<f64, CalibrationError> {
    let bins = ace_bins(probs, labels, m)?;
    Ok(bins.iter().map(|b| (b.acc - b.conf).abs()).sum::<f64>() / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Pos,
    Neg,
    Avg,
}

/// ECE and ACE in percent. `None` marks an empty group, or for ACE a group
/// with fewer tokens than bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub ece: Option<f64>,
    pub ace: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    #[serde(rename = "T")]
    pub t: f64,
    pub nll_before: f64,
    pub nll_after: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: usize,
    #[serde(flatten)]
    pub channels: BTreeMap<Channel, BTreeMap<Group, GroupCell>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub temperature: BTreeMap<Channel, TemperatureFit>,
    /// The same cells after dividing logits by the fitted temperature.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scaled: BTreeMap<Channel, BTreeMap<Group, GroupCell>>,
}

fn cell(scores: &[f64], m: usize) -> Result<GroupCell, CalibrationError> {
    if scores.is_empty() {
        return Ok(GroupCell { ece: None, ace: None, n: 0 });
    }
    let ones = vec![1u8; scores.len()];
    Ok(GroupCell {
        ece: Some(100.0 * ece(scores, &ones, m)?),
        ace: match ace(scores, &ones, m) {
            Ok(v) => Some(100.0 * v),
            Err(CalibrationError::TooManyBins { .. }) => None,
            Err(e) => return Err(e),
        },
        n: scores.len(),
    })
}

/// Positive tokens are scored on `p`, negative tokens on `1 - p`; in both
/// groups the assigned class is correct, so each bin's accuracy is 1.
pub fn group_cells(probs: &[f64], labels: &[u8], m: usize) -> Result<BTreeMap<Group, GroupCell>, CalibrationError> {
    if probs.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    let pos: Vec<f64> = probs.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&p, _)| p).collect();
    let neg: Vec<f64> = probs.iter().zip(labels).filter(|(_, &y)| y != 1).map(|(&p, _)| 1.0 - p).collect();
    let pos = cell(&pos, m)?;
    let neg = cell(&neg, m)?;
    let mean = |a: Option<f64>, b: Option<f64>| Some((a? + b?) / 2.0);
    let avg = GroupCell {
        ece: mean(pos.ece, neg.ece),
        ace: mean(pos.ace, neg.ace),
        n: pos.n + neg.n,
    };
    Ok(BTreeMap::from([(Group::Pos, pos), (Group::Neg, neg), (Group::Avg, avg)]))
}

/// Probabilities and labels of one channel, concatenated over samples.
pub fn channel_pairs(
    preds: &PredictionSet,
    gold: &[AnnotatedSample],
    c: Channel,
) -> Result<(Vec<f64>, Vec<u8>), CalibrationError> {
    let (mut p, mut y) = (Vec::new(), Vec::new());
    for s in gold {
        let probs = preds
            .samples
            .get(&s.id)
            .and_then(|m| m.get(&c))
            .ok_or_else(|| MetricsError::Alignment(format!("no {c} predictions for sample `{}`", s.id)))?;
        let g = &gold_labels(s)[&c];
        if probs.len() != g.len() {
            return Err(MetricsError::Alignment(format!(
                "sample `{}`: {} {c} probabilities for {} tokens",
                s.id,
                probs.len(),
                g.len()
            ))
            .into());
        }
        p.extend_from_slice(probs);
        y.extend_from_slice(g);
    }
    Ok((p, y))
}

pub fn grouped_calibration(
    preds: &PredictionSet,
    gold: &[AnnotatedSample],
    m: usize,
) -> Result<CalibrationReport, CalibrationError> {
    if m == 0 {
        return Err(CalibrationError::ZeroBins);
    }
    let mut report = CalibrationReport {
        bins: m,
        ..Default::default()
    };
    for c in preds.channels() {
        let (p, y) = channel_pairs(preds, gold, c)?;
        if p.len() < m {
            return Err(CalibrationError::TooManyBins { bins: m, n: p.len() });
        }
        report.channels.insert(c, group_cells(&p, &y, m)?);
    }
    Ok(report)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary negative log-likelihood of `sigmoid(logit / t)`.
pub fn nll(logits: &[f64], labels: &[u8], t: f64) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| if y == 1 { softplus(-z / t) } else { softplus(z / t) })
        .sum();
    sum / logits.len() as f64
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit of a probability, clamped away from 0 and 1.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Grid search at step 0.01 over `interval`, golden-section refinement
/// around the best grid point, then the best of the refined point, the
/// interval ends and `T = 1`. `T = 1` wins ties.
pub fn fit_temperature(logits: &[f64], labels: &[u8], interval: (f64, f64)) -> Result<TemperatureFit, CalibrationError> {
    if logits.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch {
            probs: logits.len(),
            labels: labels.len(),
        });
    }
    if logits.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    let (lo, hi) = interval;
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(CalibrationError::BadInterval(lo, hi));
    }
    let f = |t: f64| nll(logits, labels, t);
    let steps = ((hi - lo) / GRID_STEP).floor() as usize;
    let mut grid: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * GRID_STEP).filter(|&t| t < hi).collect();
    grid.push(hi);
    let values: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > REFINE_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let refined = (a + b) / 2.0;
    let mut t = grid[best];
    let mut ft = values[best];
    for cand in [refined, lo, hi] {
        let v = f(cand);
        if v < ft {
            t = cand;
            ft = v;
        }
    }
    let before = f(1.0);
    if (lo..=hi).contains(&1.0) && before <= ft {
        t = 1.0;
        ft = before;
    }
    Ok(TemperatureFit {
        t,
        nll_before: before,
        nll_after: ft,
    })
}

/// Fits a temperature per channel on `fit_gold` and reports the cells of
/// `eval_gold` before and after scaling.
pub fn calibrate_with_temperature(
    preds: &PredictionSet,
    fit_gold: &[AnnotatedSample],
    eval_gold: &[AnnotatedSample],
    m: usize,
    interval: (f64, f64),
) -> Result<CalibrationReport, CalibrationError> {
    let mut report = grouped_calibration(preds, eval_gold, m)?;
    for c in preds.channels() {
        let (p, y) = channel_pairs(preds, fit_gold, c)?;
        if p.is_empty() {
            continue;
        }
        let z: Vec<f64> = p.iter().map(|&x| logit(x)).collect();
        let fit = fit_temperature(&z, &y, interval)?;
        let (pe, ye) = channel_pairs(preds, eval_gold, c)?;
        let scaled: Vec<f64> = pe.iter().map(|&x| sigmoid(logit(x) / fit.t)).collect();
        report.scaled.insert(c, group_cells(&scaled, &ye, m)?);
        report.temperature.insert(c, fit);
    }
    Ok(report)
}

impl CalibrationReport {
    /// Percentages with two decimals; `-` marks an empty group.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mut s = format!(
            "calibration (M = {})\n{:<14}{:<6}{:>10}{:>10}{:>10}\n",
            self.bins, "type", "group", "ECE %", "ACE %", "n"
        );
        let mut rows = |label: &str, cells: &BTreeMap<Channel, BTreeMap<Group, GroupCell>>| {
            for (c, groups) in cells {
                for (g, cell) in groups {
                    let name = format!("{c}{label}");
                    let group = format!("{g:?}").to_lowercase();
                    let _ = writeln!(s, "{name:<14}{group:<6}{:>10}{:>10}{:>10}", fmt(cell.ece), fmt(cell.ace), cell.n);
                }
            }
        };
        rows("", &self.channels);
        rows(" +T", &self.scaled);
        for (c, t) in &self.temperature {
            let _ = writeln!(s, "{c}: T = {:.4}, NLL {:.6} -> {:.6}", t.t, t.nll_before, t.nll_after);
        }
        s
    }
}
