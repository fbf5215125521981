//! VGG-style binary scene classifier with activation/gradient taps at the end
//! of conv blocks 3, 4 and 5 (the ReLU outputs right before max pooling).

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, Dataset, Image};
use crate::error::{Error, Result};
use crate::nn::{self, ChannelStats, Conv2d, Linear, ParamStore};
use crate::optim::Sgd;
use crate::seed::derive_seed;

pub const NUM_CLASSES: usize = 2;
pub const NUM_BLOCKS: usize = 5;
/// Blocks (0-based) whose final activation is tapped.
pub const TAP_BLOCKS: [usize; 3] = [2, 3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Side of the square input image.
    pub input_size: usize,
    pub widths: [usize; NUM_BLOCKS],
    pub convs_per_block: [usize; NUM_BLOCKS],
    pub seed: u64,
    pub precision: Precision,
    /// Safetensors file with externally supplied weights (same parameter names
    /// and shapes) loaded over the seeded initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_weights: Option<PathBuf>,
}

impl Default for ClassifierConfig {
    /// VGG19 feature stack: 2-2-4-4-4 convolutions, 64 to 512 channels.
    fn default() -> Self {
        Self {
            input_size: 256,
            widths: [64, 128, 256, 512, 512],
            convs_per_block: [2, 2, 4, 4, 4],
            seed: 0,
            precision: Precision::F32,
            init_weights: None,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1 << NUM_BLOCKS;
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "classifier input size {} must be a positive multiple of {div}",
                self.input_size
            )));
        }
        if self.widths.contains(&0) || self.convs_per_block.contains(&0) {
            return Err(Error::Config("classifier widths and conv counts must be positive".into()));
        }
        Ok(())
    }

    /// (channels, height, width) of each tap for this configuration.
    pub fn tap_shapes(&self) -> [(usize, usize, usize); 3] {
        TAP_BLOCKS.map(|b| {
            let side = self.input_size >> b;
            (self.widths[b], side, side)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Activation and class-score gradient at one tap, both (K, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct TapActivation {
    pub activations: Array3<f32>,
    pub gradients: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    pub taps: Vec<TapActivation>,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapOutput {
    /// Raw (pre-softmax) class scores.
    pub scores: [f64; NUM_CLASSES],
    /// Tapped activations, (K, H, W) each.
    pub taps: Vec<Array3<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHistory {
    pub epoch_loss: Vec<f64>,
    pub final_train_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    config: ClassifierConfig,
    stats: ChannelStats,
    trained: bool,
}

#[derive(Debug)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    store: ParamStore,
    blocks: Vec<Vec<Conv2d>>,
    head: Linear,
    stats: ChannelStats,
    trained: bool,
}

pub fn build_classifier(config: &ClassifierConfig) -> Result<ClassifierModel> {
    config.validate()?;
    let dtype = config.precision.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let mut blocks = Vec::with_capacity(NUM_BLOCKS);
    let mut in_ch = 3;
    for (b, (&width, &count)) in config.widths.iter().zip(&config.convs_per_block).enumerate() {
        let mut convs = Vec::with_capacity(count);
        for i in 0..count {
            convs.push(Conv2d::new(
                &mut store,
                &format!("block{b}.conv{i}"),
                (in_ch, width, 3),
                &mut rng,
                dtype,
            )?);
            in_ch = width;
        }
        blocks.push(convs);
    }
    let head = Linear::new(&mut store, "head", (in_ch, NUM_CLASSES), &mut rng, dtype)?;
    if let Some(path) = &config.init_weights {
        store.load(path)?;
    }
    Ok(ClassifierModel {
        config: config.clone(),
        store,
        blocks,
        head,
        stats: ChannelStats::default(),
        trained: false,
    })
}

impl ClassifierModel {
    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: ChannelStats) {
        self.stats = stats;
    }

    /// Weight of the classification head, (classes, channels).
    pub fn head_weight(&self) -> &Var {
        self.head.weight()
    }

    fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.input_size;
        if image.dim() != (s, s, 3) {
            let (h, w, c) = image.dim();
            return Err(Error::shape(&[s, s, 3], &[h, w, c]));
        }
        Ok(())
    }

    /// Forward pass on an (N, 3, H, W) batch in `[0, 1]`. `offsets`, when given,
    /// are added to the three tapped activations; returns scores and taps.
    fn forward(&self, x: &Tensor, offsets: Option<&[Tensor]>) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = self.stats.apply(x)?;
        let mut taps = Vec::with_capacity(TAP_BLOCKS.len());
        for (b, convs) in self.blocks.iter().enumerate() {
            for conv in convs {
                h = conv.forward(&h)?.relu()?;
            }
            if let Some(t) = TAP_BLOCKS.iter().position(|&tb| tb == b) {
                if let Some(off) = offsets {
                    h = h.broadcast_add(&off[t])?;
                }
                taps.push(h.clone());
            }
            h = nn::max_pool2x2(&h)?;
        }
        let pooled = h.mean((2, 3))?;
        Ok((self.head.forward(&pooled)?, taps))
    }

    fn image_tensor(&self, image: &Image) -> Result<Tensor> {
        self.check_image(image)?;
        nn::images_to_tensor([image], self.dtype())
    }

    pub fn forward_with_taps(&self, image: &Image) -> Result<TapOutput> {
        let x = self.image_tensor(image)?;
        let (scores, taps) = self.forward(&x, None)?;
        let taps = taps
            .iter()
            .map(|t| tensor_to_chw(&t.squeeze(0)?))
            .collect::<Result<Vec<_>>>()?;
        let s = scores.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier scores"));
        }
        Ok(TapOutput {
            scores: [s[0], s[1]],
            taps,
        })
    }

    /// Class scores with fixed offsets added to the tapped activations. Offsets are
    /// (K, H, W) per tap; the downstream network sees `activation + offset`.
    pub fn scores_with_tap_offsets(&self, image: &Image, offsets: &[Array3<f64>]) -> Result<[f64; 2]> {
        let x = self.image_tensor(image)?;
        let offsets = offsets
            .iter()
            .map(|o| {
                let (k, h, w) = o.dim();
                Ok(Tensor::from_iter(o.iter().copied(), &Device::Cpu)?
                    .reshape((1, k, h, w))?
                    .to_dtype(self.dtype())?)
            })
            .collect::<Result<Vec<_>>>()?;
        let (scores, _) = self.forward(&x, Some(&offsets))?;
        let s = scores.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok([s[0], s[1]])
    }

    /// Gradients of the raw class score for `class_index` with respect to each
    /// tapped activation. Zero-valued probe variables are added at the taps so a
    /// single backward pass exposes all three gradients.
    pub fn class_gradients(&self, image: &Image, class_index: usize) -> Result<ActivationBundle> {
        if class_index >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "class index {class_index} not in 0..{NUM_CLASSES}"
            )));
        }
        let x = self.image_tensor(image)?;
        let probes = self
            .config
            .tap_shapes()
            .iter()
            .map(|&(k, h, w)| Var::zeros((1, k, h, w), self.dtype(), &Device::Cpu))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let probe_tensors: Vec<Tensor> = probes.iter().map(|p| p.as_tensor().clone()).collect();
        let (scores, taps) = self.forward(&x, Some(&probe_tensors))?;
        let score = scores.get(0)?.get(class_index)?;
        let grads = score.backward()?;
        let mut out = Vec::with_capacity(taps.len());
        for (tap, probe) in taps.iter().zip(&probes) {
            let activations = tensor_to_chw(&tap.squeeze(0)?)?;
            let gradients = match grads.get(probe) {
                Some(g) => tensor_to_chw(&g.squeeze(0)?)?,
                None => Array3::zeros(activations.dim()),
            };
            out.push(TapActivation {
                activations,
                gradients,
            });
        }
        Ok(ActivationBundle {
            taps: out,
            class_index,
        })
    }

    /// Predicted class per image.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<ClassLabel>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            for img in chunk {
                self.check_image(img)?;
            }
            let x = nn::images_to_tensor(chunk.iter().copied(), self.dtype())?;
            let (scores, _) = self.forward(&x, None)?;
            for idx in scores.argmax(D::Minus1)?.to_vec1::<u32>()? {
                out.push(ClassLabel::from_index(idx as usize).expect("two classes"));
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        let images: Vec<&Image> = dataset.samples.iter().map(|s| &s.image).collect();
        let preds = self.predict(&images)?;
        let correct = preds
            .iter()
            .zip(&dataset.samples)
            .filter(|(p, s)| **p == s.class_label)
            .count();
        Ok(correct as f64 / dataset.len().max(1) as f64)
    }

    /// Writes `<stem>.safetensors` (parameters) and `<stem>.json` (config,
    /// input statistics, trained flag).
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.store.save(&nn::checkpoint_file(stem, "safetensors"))?;
        let meta = ClassifierMeta {
            config: self.config.clone(),
            stats: self.stats.clone(),
            trained: self.trained,
        };
        let path = nn::checkpoint_file(stem, "json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let path = nn::checkpoint_file(stem, "json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ClassifierMeta = serde_json::from_str(&text)?;
        // The checkpoint supersedes any initial weights named in the config.
        let config = ClassifierConfig {
            init_weights: None,
            ..meta.config.clone()
        };
        let mut model = build_classifier(&config)?;
        model.store.load(&nn::checkpoint_file(stem, "safetensors"))?;
        model.stats = meta.stats;
        model.trained = meta.trained;
        Ok(model)
    }
}

fn tensor_to_chw(t: &Tensor) -> Result<Array3<f32>> {
    let (k, h, w) = t.dims3()?;
    let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((k, h, w), data).expect("dims match"))
}

/// Mean cross-entropy of raw scores (N, C) against integer labels.
fn score_cross_entropy(scores: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = scores.dims2()?;
    let max = scores.max_keepdim(D::Minus1)?.detach();
    let shifted = scores.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_p = shifted.broadcast_sub(&lse)?;
    let mut onehot = vec![0f32; n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, c), &Device::Cpu)?.to_dtype(scores.dtype())?;
    Ok((log_p * onehot)?.sum_all()?.affine(-1.0 / n as f64, 0.0)?)
}

/// Mini-batch SGD on image-level labels. Input statistics are fitted on the
/// dataset first. Batch order per epoch is a seeded shuffle.
pub fn train_classifier(
    model: &mut ClassifierModel,
    dataset: &Dataset,
    hp: &ClassifierTrainConfig,
) -> Result<ClassifierHistory> {
    if !dataset.has_both_classes() {
        return Err(Error::SingleClass);
    }
    if hp.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    for s in &dataset.samples {
        model.check_image(&s.image)?;
    }
    model.stats = ChannelStats::fit(dataset.samples.iter().map(|s| &s.image));
    let mut opt = Sgd::new(model.store.vars().cloned().collect(), hp.lr, hp.momentum, hp.weight_decay);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let samples: Vec<_> = batch.iter().map(|&i| &dataset.samples[i]).collect();
            let x = nn::images_to_tensor(samples.iter().map(|s| &s.image), model.dtype())?;
            let labels: Vec<usize> = samples.iter().map(|s| s.class_label.index()).collect();
            let (scores, _) = model.forward(&x, None)?;
            let loss = score_cross_entropy(&scores, &labels)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite("classifier loss"));
            }
            total += value * batch.len() as f64;
            opt.step(&loss.backward()?)?;
        }
        let mean = total / dataset.len() as f64;
        log::info!("classifier epoch {epoch}: loss {mean:.5}");
        epoch_loss.push(mean);
    }
    model.trained = true;
    let final_train_accuracy = model.accuracy(dataset)?;
    Ok(ClassifierHistory {
        epoch_loss,
        final_train_accuracy,
    })
}

/// `epoch,loss` rows.
pub fn loss_history_csv(history: &ClassifierHistory) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in history.epoch_loss.iter().enumerate() {
        out.push_str(&format!("{e},{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_dataset;

    fn tiny(seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            input_size: 32,
            widths: [2, 2, 2, 2, 2],
            convs_per_block: [1, 1, 1, 1, 1],
            seed,
            precision: Precision::F64,
            init_weights: None,
        }
    }

    #[test]
    fn external_weights_override_seeded_init() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("external.safetensors");
        let source = build_classifier(&tiny(11)).unwrap();
        source.params().save(&path).unwrap();
        let cfg = ClassifierConfig {
            init_weights: Some(path),
            ..tiny(12)
        };
        let loaded = build_classifier(&cfg).unwrap();
        assert_eq!(loaded.params().flat_values().unwrap(), source.params().flat_values().unwrap());
        let wrong = ClassifierConfig {
            widths: [3, 2, 2, 2, 2],
            ..cfg
        };
        assert!(matches!(build_classifier(&wrong), Err(Error::IncompatibleModel(_))));
    }

    #[test]
    fn default_taps_follow_pooling_arithmetic() {
        let cfg = ClassifierConfig::default();
        let sides: Vec<usize> = cfg.tap_shapes().iter().map(|s| s.1).collect();
        assert_eq!(sides, vec![64, 32, 16]);
        let small = ClassifierConfig {
            input_size: 256,
            widths: [4, 4, 8, 8, 8],
            convs_per_block: [2, 2, 4, 4, 4],
            ..Default::default()
        };
        let model = build_classifier(&small).unwrap();
        let out = model.forward_with_taps(&Array3::from_elem((256, 256, 3), 0.3)).unwrap();
        let dims: Vec<_> = out.taps.iter().map(|t| t.dim()).collect();
        assert_eq!(dims, vec![(8, 64, 64), (8, 32, 32), (8, 16, 16)]);
    }

    #[test]
    fn builds_are_seeded() {
        let a = build_classifier(&tiny(3)).unwrap();
        let b = build_classifier(&tiny(3)).unwrap();
        let c = build_classifier(&tiny(4)).unwrap();
        assert_eq!(a.params().flat_values().unwrap(), b.params().flat_values().unwrap());
        assert_ne!(a.params().flat_values().unwrap(), c.params().flat_values().unwrap());
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = ClassifierConfig {
            input_size: 100,
            ..tiny(0)
        };
        assert!(matches!(build_classifier(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn forward_contracts() {
        let model = build_classifier(&tiny(1)).unwrap();
        let zero = Array3::zeros((32, 32, 3));
        let out = model.forward_with_taps(&zero).unwrap();
        assert!(out.scores.iter().all(|s| s.is_finite()));
        let m = out.scores[0].max(out.scores[1]);
        let z: f64 = out.scores.iter().map(|s| (s - m).exp()).sum();
        let probs: f64 = out.scores.iter().map(|s| (s - m).exp() / z).sum();
        assert!((probs - 1.0).abs() < 1e-6);
        assert!(out.taps.iter().all(|t| t.iter().all(|&v| v >= 0.0)));
        assert!(model.forward_with_taps(&Array3::zeros((16, 16, 3))).is_err());
    }

    #[test]
    fn gradient_shapes_and_errors() {
        let model = build_classifier(&tiny(2)).unwrap();
        let img = Array3::from_shape_fn((32, 32, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        let bundle = model.class_gradients(&img, 1).unwrap();
        assert_eq!(bundle.taps.len(), 3);
        for t in &bundle.taps {
            assert_eq!(t.activations.dim(), t.gradients.dim());
        }
        assert!(matches!(model.class_gradients(&img, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_head_row_gives_zero_gradients() {
        let model = build_classifier(&tiny(5)).unwrap();
        let w = model.head_weight();
        let mut rows = w.as_tensor().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
        rows[1].iter_mut().for_each(|v| *v = 0.0);
        w.set(&Tensor::new(rows, &Device::Cpu).unwrap()).unwrap();
        let img = Array3::from_elem((32, 32, 3), 0.7);
        let bundle = model.class_gradients(&img, 1).unwrap();
        assert!(bundle.taps.iter().all(|t| t.gradients.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn single_class_dataset_rejected() {
        let mut ds = synthesize_dataset(1, 6, (32, 32)).unwrap();
        ds.samples.retain(|s| s.class_label == ClassLabel::Foreground);
        let mut model = build_classifier(&tiny(0)).unwrap();
        assert!(matches!(
            train_classifier(&mut model, &ds, &ClassifierTrainConfig::default()),
            Err(Error::SingleClass)
        ));
        assert_eq!(ClassifierTrainConfig::default().batch_size, 16);
    }

    #[test]
    fn short_training_is_finite_and_reproducible() {
        let ds = synthesize_dataset(1, 12, (32, 32)).unwrap();
        let hp = ClassifierTrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let cfg = ClassifierConfig {
            precision: Precision::F32,
            widths: [4, 4, 4, 4, 4],
            ..tiny(7)
        };
        let mut a = build_classifier(&cfg).unwrap();
        let ha = train_classifier(&mut a, &ds, &hp).unwrap();
        let mut b = build_classifier(&cfg).unwrap();
        let hb = train_classifier(&mut b, &ds, &hp).unwrap();
        assert_eq!(ha.epoch_loss.len(), 3);
        assert!(ha.epoch_loss.iter().all(|l| l.is_finite()));
        assert_eq!(ha, hb);
        assert!(loss_history_csv(&ha).starts_with("epoch,loss\n0,"));

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("clf");
        a.save(&stem).unwrap();
        let loaded = ClassifierModel::load(&stem).unwrap();
        assert!(loaded.is_trained());
        assert_eq!(loaded.params().flat_values().unwrap(), a.params().flat_values().unwrap());
        let img = &ds.samples[0].image;
        assert_eq!(
            loaded.forward_with_taps(img).unwrap(),
            a.forward_with_taps(img).unwrap()
        );
    }
}
