//! Multiscale Grad-CAM: per-tap channel weights and maps, fusion by averaging,
//! and binarization into pseudo labels.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis, Zip};

use crate::classifier::{ActivationBundle, ClassifierModel};
use crate::data::{ClassLabel, Dataset, Image, Mask};
use crate::error::{Error, Result};
use crate::resample;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Real-valued H×W map. Maps produced by [`normalize_map`] and everything
/// derived from them lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Array2<f32>,
}

impl SaliencyMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("saliency map"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Treats a binary mask as a 0/1 map.
    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            values: mask.mapv(f32::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub mask: Mask,
    pub source_id: String,
    pub threshold_used: f64,
}

fn tap(bundle: &ActivationBundle, t: usize) -> Result<&crate::classifier::TapActivation> {
    bundle
        .taps
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("bundle has no tap {t}")))
}

/// Channel weights: the spatial mean of the class-score gradient per channel.
pub fn grad_cam_weights(bundle: &ActivationBundle, t: usize) -> Result<Vec<f64>> {
    let g = &tap(bundle, t)?.gradients;
    let (_, h, w) = g.dim();
    let z = (h * w) as f64;
    Ok(g.outer_iter()
        .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / z)
        .collect())
}

/// `ReLU(Σ_k α_k A^k)` at tap `t`.
pub fn grad_cam_map(bundle: &ActivationBundle, t: usize, alpha: &[f64]) -> Result<Array2<f32>> {
    let a = &tap(bundle, t)?.activations;
    let (k, h, w) = a.dim();
    if alpha.len() != k {
        return Err(Error::shape(&[k], &[alpha.len()]));
    }
    let mut acc = Array2::<f64>::zeros((h, w));
    for (ch, &wk) in a.axis_iter(Axis(0)).zip(alpha) {
        Zip::from(&mut acc).and(&ch).for_each(|s, &v| *s += wk * v as f64);
    }
    Ok(acc.mapv(|v| v.max(0.0) as f32))
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(raw: &Array2<f32>) -> SaliencyMap {
    let (lo, hi) = raw
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let values = if raw.is_empty() || hi <= lo || !(hi - lo).is_finite() {
        Array2::zeros(raw.dim())
    } else {
        let span = (hi - lo) as f64;
        raw.mapv(|v| (((v - lo) as f64) / span).clamp(0.0, 1.0) as f32)
    };
    SaliencyMap { values }
}

/// Bilinear resize to the target resolution.
pub fn upsample_map(map: &SaliencyMap, target: (usize, usize)) -> SaliencyMap {
    SaliencyMap {
        values: resample::bilinear(&map.values, target),
    }
}

/// Pixelwise arithmetic mean of equally shaped maps.
pub fn merge_maps(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no maps to merge".into()))?;
    let dim = first.dim();
    let mut acc = Array2::<f64>::zeros(dim);
    for m in maps {
        if m.dim() != dim {
            return Err(Error::shape(&[dim.0, dim.1], &[m.dim().0, m.dim().1]));
        }
        Zip::from(&mut acc).and(&m.values).for_each(|s, &v| *s += v as f64);
    }
    let n = maps.len() as f64;
    Ok(SaliencyMap {
        values: acc.mapv(|v| (v / n) as f32),
    })
}

/// Foreground where `value >= threshold`.
pub fn binarize(map: &SaliencyMap, threshold: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(map.values.mapv(|v| u8::from(v as f64 >= threshold)))
}

/// Everything computed for one image: per-tap maps at input resolution and
/// their fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleCam {
    pub layer_maps: Vec<SaliencyMap>,
    pub merged: SaliencyMap,
}

/// Grad-CAM at every tap, each normalized, upsampled to the image size and
/// averaged.
pub fn multiscale_cam(
    classifier: &ClassifierModel,
    image: &Image,
    class_index: usize,
) -> Result<MultiscaleCam> {
    let (h, w, _) = image.dim();
    let bundle = classifier.class_gradients(image, class_index)?;
    let mut layer_maps = Vec::with_capacity(bundle.taps.len());
    for t in 0..bundle.taps.len() {
        let alpha = grad_cam_weights(&bundle, t)?;
        let raw = grad_cam_map(&bundle, t, &alpha)?;
        layer_maps.push(upsample_map(&normalize_map(&raw), (h, w)));
    }
    let merged = merge_maps(&layer_maps)?;
    Ok(MultiscaleCam { layer_maps, merged })
}

/// Pseudo label for one sample. Background-labelled images get an all-zero mask.
pub fn pseudo_label_for(
    classifier: &ClassifierModel,
    id: &str,
    image: &Image,
    label: ClassLabel,
    threshold: f64,
) -> Result<(PseudoLabel, Option<MultiscaleCam>)> {
    let (h, w, _) = image.dim();
    let (mask, cam) = match label {
        ClassLabel::Background => (Array2::zeros((h, w)), None),
        ClassLabel::Foreground => {
            let cam = multiscale_cam(classifier, image, label.index())?;
            (binarize(&cam.merged, threshold)?, Some(cam))
        }
    };
    Ok((
        PseudoLabel {
            mask,
            source_id: id.to_string(),
            threshold_used: threshold,
        },
        cam,
    ))
}

/// Pseudo labels for every sample, keyed by id.
pub fn generate_pseudo_labels(
    classifier: &ClassifierModel,
    dataset: &Dataset,
    threshold: f64,
) -> Result<BTreeMap<String, PseudoLabel>> {
    if !classifier.is_trained() {
        return Err(Error::IncompatibleModel("classifier has not been trained".into()));
    }
    let side = classifier.config().input_size;
    let mut out = BTreeMap::new();
    for s in &dataset.samples {
        if s.dims() != (side, side) {
            return Err(Error::IncompatibleModel(format!(
                "classifier expects {side}x{side} inputs, sample {} is {:?}",
                s.id,
                s.dims()
            )));
        }
        let (label, _) = pseudo_label_for(classifier, &s.id, &s.image, s.class_label, threshold)?;
        out.insert(s.id.clone(), label);
    }
    Ok(out)
}
