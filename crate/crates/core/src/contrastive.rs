//! Pixel-partitioned InfoNCE on decoder feature maps.
//!
//! Feature vectors at pixels the current prediction marks as foreground become
//! the queries `q` (and, gradient-stopped, their own positive keys); vectors at
//! background pixels form the negative queue for the same image.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::resample;

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Caps {
    pub max_queries: usize,
    pub max_negatives: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            max_queries: 1024,
            max_negatives: 4096,
        }
    }
}

/// `q` (N, C) carries gradients; `k_plus` (N, C) and `queue` (C, K) do not.
/// All vectors are unit length along C.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub q: Tensor,
    pub k_plus: Tensor,
    pub queue: Tensor,
}

impl ContrastiveBatch {
    pub fn new(q: Tensor, k_plus: Tensor, queue: Tensor) -> Result<Self> {
        let (n, c) = q.dims2()?;
        if k_plus.dims2()? != (n, c) {
            return Err(Error::shape(&[n, c], k_plus.dims()));
        }
        let (qc, k) = queue.dims2()?;
        if qc != c {
            return Err(Error::shape(&[c, k], queue.dims()));
        }
        if n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "contrastive batch needs at least one query and one negative, got N={n}, K={k}"
            )));
        }
        check_unit(&q.sqr()?.sum(1)?, "q rows")?;
        check_unit(&k_plus.sqr()?.sum(1)?, "k_plus rows")?;
        check_unit(&queue.sqr()?.sum(0)?, "queue columns")?;
        Ok(Self { q, k_plus, queue })
    }

    pub fn num_queries(&self) -> usize {
        self.q.dims()[0]
    }

    pub fn num_negatives(&self) -> usize {
        self.queue.dims()[1]
    }
}

/// Unit-norm tolerance for batch vectors.
const NORM_TOL: f64 = 1e-5;

fn check_unit(squared_norms: &Tensor, what: &str) -> Result<()> {
    let norms = squared_norms.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    match norms.iter().map(|s| s.sqrt()).find(|v| v.is_nan() || (v - 1.0).abs() > NORM_TOL) {
        Some(bad) => Err(Error::InvalidArgument(format!("{what} must have unit norm, found {bad}"))),
        None => Ok(()),
    }
}

/// Nearest-neighbour reduction of a prediction mask to a feature map's grid.
pub fn downsample_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    let (h, w) = mask.dim();
    if target.0 == 0 || target.1 == 0 || target.0 > h || target.1 > w {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample a {h}x{w} mask to {}x{}",
            target.0, target.1
        )));
    }
    Ok(resample::nearest(mask, target))
}

/// Row-wise L2 normalization of an (N, C) matrix.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn select_rows(
    rows: &Tensor,
    mut idx: Vec<u32>,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if idx.len() > cap {
        let mut picked: Vec<u32> = rand::seq::index::sample(rng, idx.len(), cap)
            .into_iter()
            .map(|i| idx[i])
            .collect();
        picked.sort_unstable();
        idx = picked;
    }
    let n = idx.len();
    let idx = Tensor::from_vec(idx, n, &Device::Cpu)?;
    Ok(rows.index_select(&idx, 0)?)
}

/// Squared norm below which a pixel's feature vector is left out of the batch.
const MIN_NORM_SQ: f64 = 1e-6;

/// Splits a (C, h, w) feature map by a binary h×w mask. Pixels whose feature
/// vector is (nearly) zero are skipped. Returns `None` when either side is
/// empty.
pub fn partition_features(
    features: &Tensor,
    mask: &Mask,
    caps: Caps,
    seed: u64,
) -> Result<Option<ContrastiveBatch>> {
    let (c, h, w) = features.dims3()?;
    if mask.dim() != (h, w) {
        return Err(Error::shape(&[h, w], &[mask.dim().0, mask.dim().1]));
    }
    if caps.max_queries == 0 || caps.max_negatives == 0 {
        return Err(Error::Config("contrastive caps must be positive".into()));
    }
    let rows = features.reshape((c, h * w))?.t()?.contiguous()?;
    let norms = rows.sqr()?.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        // Dead (all-zero after ReLU) feature vectors have no direction.
        if norms[i] < MIN_NORM_SQ {
            continue;
        }
        if m != 0 {
            fg.push(i as u32);
        } else {
            bg.push(i as u32);
        }
    }
    if fg.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = l2_normalize_rows(&select_rows(&rows, fg, caps.max_queries, &mut rng)?)?;
    let neg = l2_normalize_rows(&select_rows(&rows, bg, caps.max_negatives, &mut rng)?)?;
    let k_plus = q.detach();
    let queue = neg.detach().t()?.contiguous()?;
    Ok(Some(ContrastiveBatch::new(q, k_plus, queue)?))
}

/// `[l_pos | l_neg]`: row-wise `q·k_plus` followed by `q · queue`, (N, K+1).
pub fn compute_logits(batch: &ContrastiveBatch) -> Result<Tensor> {
    let l_pos = (&batch.q * &batch.k_plus)?.sum_keepdim(D::Minus1)?;
    let l_neg = batch.q.matmul(&batch.queue)?;
    Ok(Tensor::cat(&[&l_pos, &l_neg], 1)?)
}

/// Mean over rows of `-log softmax(logits / tau)[0]`, via a shifted log-sum-exp.
pub fn info_nce(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (n, _) = logits.dims2()?;
    let z = logits.affine(1.0 / tau, 0.0)?;
    let max = z.max_keepdim(D::Minus1)?.detach();
    let lse = (z.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + &max)?;
    let pos = z.narrow(1, 0, 1)?;
    Ok((lse - pos)?.sum_all()?.affine(1.0 / n as f64, 0.0)?)
}

/// InfoNCE for one image at one decoder tap. `features` is (C, h, w); the
/// prediction mask is at input resolution and is reduced to h×w first.
/// Returns a zero scalar when the prediction has no foreground or no background.
pub fn contrastive_loss_for_tap(
    features: &Tensor,
    prediction: &Mask,
    tau: f64,
    caps: Caps,
    seed: u64,
) -> Result<Tensor> {
    let (_, h, w) = features.dims3()?;
    let reduced = downsample_mask(prediction, (h, w))?;
    match partition_features(features, &reduced, caps, seed)? {
        Some(batch) => info_nce(&compute_logits(&batch)?, tau),
        None => Ok(Tensor::zeros((), features.dtype(), &Device::Cpu)?),
    }
}

/// Scalar value of a 0-d tensor.
pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
