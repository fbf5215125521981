//! Pixel-level evaluation: confusion counts, accuracy/precision/recall,
//! F-measure, ROC and PR curves, AUC and OTSU thresholding.
//!
//! Score maps are compared against thresholds on an `n`-level grid: a score
//! is quantized to `round(s · (n - 1))` and is positive at threshold index
//! `i` when its level is at least `i`. With the default 256 levels this is
//! exactly thresholding the 8-bit persisted map.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::cam::SaliencyMap;
use crate::data::Mask;
use crate::error::{Error, Result};

/// Precision weight used for the F-measure.
pub const BETA2: f64 = 0.3;
pub const DEFAULT_LEVELS: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(&[b.0, b.1], &[a.0, a.1]));
    }
    Ok(())
}

/// Foreground is the positive class.
pub fn confusion_counts(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    check_same(pred.dim(), gt.dim())?;
    let mut c = ConfusionCounts::default();
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p != 0, g != 0) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, false) => c.tn += 1,
        (false, true) => c.fn_ += 1,
    });
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

/// 0 when nothing was predicted positive.
pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

/// 0 when there are no positives.
pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// `(1 + β²)·p·r / (β²·p + r)`, 0 when the denominator vanishes.
pub fn f_measure(p: f64, r: f64, beta2: f64) -> f64 {
    let den = beta2 * p + r;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / den
    }
}

/// Quantization level of a score in `[0, 1]` on an `levels`-step grid.
pub fn level(score: f32, levels: usize) -> usize {
    let top = (levels - 1) as f64;
    ((score as f64).clamp(0.0, 1.0) * top).round() as usize
}

/// Binarizes a score map at threshold index `threshold_level`.
pub fn binarize_at_level(map: &SaliencyMap, threshold_level: usize, levels: usize) -> Mask {
    map.values.mapv(|s| u8::from(level(s, levels) >= threshold_level))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Roc,
    Pr,
}

/// ROC points are (FPR, TPR); PR points are (recall, precision). Thresholds
/// are strictly decreasing and pair with `points` index by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: CurveKind,
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

/// Counts at every threshold index `i` (positive iff level ≥ i), pooled over
/// all pixels of all maps. Index 0 predicts everything positive.
pub fn counts_per_threshold(
    maps: &[SaliencyMap],
    gts: &[&Mask],
    levels: usize,
) -> Result<Vec<ConfusionCounts>> {
    if maps.is_empty() || maps.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty lists, got {} maps and {} masks",
            maps.len(),
            gts.len()
        )));
    }
    if levels < 2 {
        return Err(Error::InvalidArgument("need at least 2 threshold levels".into()));
    }
    let mut pos_hist = vec![0u64; levels];
    let mut neg_hist = vec![0u64; levels];
    for (m, g) in maps.iter().zip(gts) {
        check_same(m.dim(), g.dim())?;
        Zip::from(&m.values).and(*g).for_each(|&s, &gt| {
            let l = level(s, levels);
            if gt != 0 {
                pos_hist[l] += 1;
            } else {
                neg_hist[l] += 1;
            }
        });
    }
    let total_pos: u64 = pos_hist.iter().sum();
    let total_neg: u64 = neg_hist.iter().sum();
    let mut out = vec![ConfusionCounts::default(); levels];
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in (0..levels).rev() {
        tp += pos_hist[i];
        fp += neg_hist[i];
        out[i] = ConfusionCounts {
            tp,
            fp,
            tn: total_neg - fp,
            fn_: total_pos - tp,
        };
    }
    Ok(out)
}

/// ROC and PR curves over `levels` uniformly spaced thresholds in `[0, 1]`.
pub fn roc_pr_curves(maps: &[SaliencyMap], gts: &[&Mask], levels: usize) -> Result<(Curve, Curve)> {
    let counts = counts_per_threshold(maps, gts, levels)?;
    let top = (levels - 1) as f64;
    let mut roc = Curve {
        kind: CurveKind::Roc,
        points: Vec::with_capacity(levels),
        thresholds: Vec::with_capacity(levels),
    };
    let mut pr = Curve {
        kind: CurveKind::Pr,
        points: Vec::with_capacity(levels),
        thresholds: Vec::with_capacity(levels),
    };
    for i in (0..levels).rev() {
        let c = &counts[i];
        let t = i as f64 / top;
        roc.points.push((ratio(c.fp, c.fp + c.tn), recall(c)));
        roc.thresholds.push(t);
        pr.points.push((recall(c), precision(c)));
        pr.thresholds.push(t);
    }
    Ok((roc, pr))
}

/// Trapezoidal area under a ROC curve, with (0,0) and (1,1) appended.
pub fn auc(curve: &Curve) -> Result<f64> {
    if curve.kind != CurveKind::Roc || curve.points.len() < 2 {
        return Err(Error::InvalidArgument("AUC needs a ROC curve with at least 2 points".into()));
    }
    if curve
        .points
        .iter()
        .any(|&(x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y))
    {
        return Err(Error::InvalidArgument("ROC point outside the unit square".into()));
    }
    let mut pts = Vec::with_capacity(curve.points.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(&curve.points);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

/// Histogram of score levels.
pub fn histogram<'a>(maps: impl IntoIterator<Item = &'a SaliencyMap>, levels: usize) -> Vec<u64> {
    let mut hist = vec![0u64; levels];
    for m in maps {
        for &s in &m.values {
            hist[level(s, levels)] += 1;
        }
    }
    hist
}

/// Between-class variance (up to the constant 1/N²) of the split
/// `level < k` / `level >= k`, from exact integer moments.
pub fn between_class_variance(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let diff = n0 as i128 * s1 as i128 - n1 as i128 * s0 as i128;
    let d = diff as f64;
    d * d / (n0 as f64 * n1 as f64)
}

/// OTSU level over a histogram: the `k` in `1..levels` maximizing between-class
/// variance, lowest on ties. `None` when all mass sits in one bin.
pub fn otsu_level(hist: &[u64]) -> Option<usize> {
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(l, &c)| l as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, f64)> = None;
    for k in 1..hist.len() {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let v = between_class_variance(n0, s0, n - n0, s - s0);
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// OTSU threshold of one map in `[0, 1]`; 0.5 for a constant map.
pub fn otsu_threshold(map: &SaliencyMap) -> f64 {
    match otsu_level(&histogram([map], DEFAULT_LEVELS)) {
        Some(k) => k as f64 / (DEFAULT_LEVELS - 1) as f64,
        None => 0.5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub threshold: f64,
    pub ac: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub counts: ConfusionCounts,
}

impl PointMetrics {
    pub fn from_counts(threshold: f64, counts: ConfusionCounts) -> Self {
        let p = precision(&counts);
        let r = recall(&counts);
        Self {
            threshold,
            ac: accuracy(&counts),
            precision: p,
            recall: r,
            f_measure: f_measure(p, r, BETA2),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub ac: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Headline scalars come from OTSU binarization with one threshold fitted on
/// the pooled histogram of every map; `best_on_curve` is the F-maximizing
/// point of the pooled PR sweep, reported alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ac: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub otsu: PointMetrics,
    pub best_on_curve: PointMetrics,
    pub roc: Curve,
    pub pr: Curve,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// The five headline scalars keyed by name.
    pub fn scalars(&self) -> [(&'static str, f64); 5] {
        [
            ("ac", self.ac),
            ("auc", self.auc),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f_measure", self.f_measure),
        ]
    }
}

/// Full report from score maps against ground truth.
pub fn evaluate_maps(ids: &[String], maps: &[SaliencyMap], gts: &[&Mask]) -> Result<MetricReport> {
    let levels = DEFAULT_LEVELS;
    let counts = counts_per_threshold(maps, gts, levels)?;
    let (roc, pr) = roc_pr_curves(maps, gts, levels)?;
    let top = (levels - 1) as f64;
    let k = otsu_level(&histogram(maps, levels)).unwrap_or(levels / 2);
    let otsu = PointMetrics::from_counts(k as f64 / top, counts[k]);
    let best_on_curve = (0..levels)
        .map(|i| PointMetrics::from_counts(i as f64 / top, counts[i]))
        .fold(None::<PointMetrics>, |best, m| match best {
            Some(b) if b.f_measure >= m.f_measure => Some(b),
            _ => Some(m),
        })
        .expect("at least two levels");
    let per_image = ids
        .iter()
        .zip(maps)
        .zip(gts)
        .map(|((id, m), g)| {
            let c = confusion_counts(&binarize_at_level(m, k, levels), g)?;
            let pm = PointMetrics::from_counts(otsu.threshold, c);
            Ok(ImageMetrics {
                id: id.clone(),
                ac: pm.ac,
                precision: pm.precision,
                recall: pm.recall,
                f_measure: pm.f_measure,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        ac: otsu.ac,
        auc: auc(&roc)?,
        precision: otsu.precision,
        recall: otsu.recall,
        f_measure: otsu.f_measure,
        otsu,
        best_on_curve,
        roc,
        pr,
        per_image,
    })
}

/// Scores every sample with the extractor's foreground probability and
/// evaluates against the ground-truth masks. Returns the score maps as well.
pub fn evaluate_dataset(
    model: &crate::extractor::ExtractorModel,
    dataset: &crate::data::Dataset,
) -> Result<(MetricReport, Vec<SaliencyMap>)> {
    let missing: Vec<String> = dataset
        .samples
        .iter()
        .filter(|s| s.gt_mask.is_none())
        .map(|s| s.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    let maps = dataset
        .samples
        .iter()
        .map(|s| SaliencyMap::new(model.foreground_probability(&s.image)?))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = dataset.samples.iter().map(|s| s.id.clone()).collect();
    let gts: Vec<&Mask> = dataset.samples.iter().filter_map(|s| s.gt_mask.as_ref()).collect();
    Ok((evaluate_maps(&ids, &maps, &gts)?, maps))
}

/// Mean over images of the per-image F-measure of a binary prediction.
pub fn mean_f_measure(preds: &[&Mask], gts: &[&Mask]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidArgument("need matching non-empty mask lists".into()));
    }
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let c = confusion_counts(p, g)?;
        sum += f_measure(precision(&c), recall(&c), BETA2);
    }
    Ok(sum / preds.len() as f64)
}
