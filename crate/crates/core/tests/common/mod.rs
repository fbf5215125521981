//! Independent reference implementations used by the integration tests. None of
//! these call into the library code they check.
#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsroi::classifier::ClassifierModel;
use wsroi::contrastive::{compute_logits, info_nce, ContrastiveBatch};
use wsroi::data::Image;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array3(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), lo: f32, hi: f32) -> Array3<f32> {
    Array3::from_shape_fn(dims, |_| rng.random_range(lo..hi))
}

/// Spatial mean of one gradient channel by explicit double loop, in f64.
pub fn brute_alpha(grad: &Array3<f32>) -> Vec<f64> {
    let (k, h, w) = grad.dim();
    (0..k)
        .map(|c| {
            let mut sum = 0.0f64;
            for i in 0..h {
                for j in 0..w {
                    sum += grad[[c, i, j]] as f64;
                }
            }
            sum / (h * w) as f64
        })
        .collect()
}

pub fn brute_mean(maps: &[&Array2<f32>]) -> Array2<f64> {
    let (h, w) = maps[0].dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0f64;
            for m in maps {
                s += m[[i, j]] as f64;
            }
            out[[i, j]] = s / maps.len() as f64;
        }
    }
    out
}

/// AUC as the probability that a random positive outscores a random negative,
/// ties counting one half.
pub fn pair_counting_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// OTSU by trying every split `level >= k` on the raw pixel list and computing
/// the between-class variance from class weights and means. Lowest `k` wins
/// ties; `None` if no split separates the pixels.
pub fn exhaustive_otsu_level(levels_of_pixels: &[usize], levels: usize) -> Option<usize> {
    let n = levels_of_pixels.len() as f64;
    let mut best: Option<(usize, f64)> = None;
    for k in 1..levels {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            for &l in levels_of_pixels {
                if l >= k {
                    hi.push(l as f64);
                } else {
                    lo.push(l as f64);
                }
            }
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let w0 = lo.len() as f64 / n;
        let w1 = hi.len() as f64 / n;
        let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
        let v = w0 * w1 * (m1 - m0) * (m1 - m0);
        if best.is_none_or(|(_, b)| v > b * (1.0 + 1e-12)) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// `-log softmax(z / tau)[0]` per row, averaged, computed the textbook way
/// without any shift.
pub fn naive_cross_entropy_at_zero(logits: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for row in logits {
        let denom: f64 = row.iter().map(|z| (z / tau).exp()).sum();
        total += -((row[0] / tau).exp() / denom).ln();
    }
    total / logits.len() as f64
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Relative error used by the gradient checks.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Worst relative error of a gradient check, over the coordinates it covered.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// `class_gradients` against central differences of the class score under
/// offsets added at each tap. A coordinate is checked when |analytic| > 1e-6
/// and the function is smooth there (both one-sided slopes agree); ReLU and
/// max-pool kinks, e.g. windows of tied zeros, have no derivative to match.
pub fn check_class_gradients(model: &ClassifierModel, image: &Image, class: usize) -> GradCheck {
    let shapes = model.config().tap_shapes();
    let zeros = || shapes.iter().map(|&d| Array3::<f64>::zeros(d)).collect::<Vec<_>>();
    let bundle = model.class_gradients(image, class).unwrap();
    let h = 1e-6;
    let base = model.scores_with_tap_offsets(image, &zeros()).unwrap()[class];
    let mut out = GradCheck { worst: 0.0, checked: 0, skipped_kinks: 0 };
    for (t, &(k, th, tw)) in shapes.iter().enumerate() {
        assert_eq!(bundle.taps[t].gradients.dim(), (k, th, tw));
        for idx in ndarray::indices((k, th, tw)) {
            let analytic = bundle.taps[t].gradients[idx] as f64;
            let mut plus = zeros();
            let mut minus = zeros();
            plus[t][idx] = h;
            minus[t][idx] = -h;
            let forward = (model.scores_with_tap_offsets(image, &plus).unwrap()[class] - base) / h;
            let backward = (base - model.scores_with_tap_offsets(image, &minus).unwrap()[class]) / h;
            if rel_err(forward, backward) > 1e-3 {
                out.skipped_kinks += 1;
                continue;
            }
            if analytic.abs() > 1e-6 {
                out.checked += 1;
                out.worst = out.worst.max(rel_err(analytic, 0.5 * (forward + backward)));
            }
        }
    }
    out
}

pub fn tensor2(rows: &[Vec<f64>]) -> Tensor {
    let (n, c) = (rows.len(), rows[0].len());
    Tensor::from_iter(rows.iter().flatten().copied(), &Device::Cpu)
        .unwrap()
        .reshape((n, c))
        .unwrap()
}

/// Loss as a function of q with k₊ and the queue held fixed, which is exactly
/// what the stop-gradient on k₊ means.
fn loss_at(q: &Tensor, k_plus: &Tensor, queue: &Tensor, tau: f64) -> f64 {
    let logits = Tensor::cat(&[&(q * k_plus).unwrap().sum_keepdim(1).unwrap(), &q.matmul(queue).unwrap()], 1).unwrap();
    info_nce(&logits, tau).unwrap().to_scalar::<f64>().unwrap()
}

/// InfoNCE gradient with respect to q against a five-point stencil on random
/// unit-norm instances. A plain central difference near the 1e-6 floor is
/// dominated by roundoff.
pub fn check_info_nce_gradients(seed: u64, trials: usize) -> GradCheck {
    let mut r = rng(seed);
    let mut out = GradCheck { worst: 0.0, checked: 0, skipped_kinks: 0 };
    for trial in 0..trials {
        let (n, c, k) = (r.random_range(1..6), r.random_range(2..8), r.random_range(1..12));
        let tau = [0.07, 0.2, 1.0][trial % 3];
        let q0 = unit_rows(&mut r, n, c);
        let negs = unit_rows(&mut r, k, c);
        let q = Var::from_tensor(&tensor2(&q0)).unwrap();
        let k_plus = tensor2(&q0);
        let queue = tensor2(&negs).t().unwrap().contiguous().unwrap();
        let batch = ContrastiveBatch::new(q.as_tensor().clone(), k_plus.clone(), queue.clone()).unwrap();
        let loss = info_nce(&compute_logits(&batch).unwrap(), tau).unwrap();
        let grad = loss.backward().unwrap().get(&q).unwrap().to_vec2::<f64>().unwrap();
        let h = 1e-4;
        let at = |i: usize, j: usize, step: f64| {
            let mut shifted = q0.clone();
            shifted[i][j] += step;
            loss_at(&tensor2(&shifted), &k_plus, &queue, tau)
        };
        for (i, row) in grad.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                if g.abs() <= 1e-6 {
                    continue;
                }
                let numeric = (8.0 * (at(i, j, h) - at(i, j, -h)) - (at(i, j, 2.0 * h) - at(i, j, -2.0 * h))) / (12.0 * h);
                out.checked += 1;
                out.worst = out.worst.max(rel_err(g, numeric));
            }
        }
    }
    out
}
