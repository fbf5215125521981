//! UNet extractor (4 down / 4 up stages) with decoder feature taps, trained on
//! pseudo labels with cross-entropy plus per-tap InfoNCE.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Precision;
use crate::contrastive::{self, scalar, Caps};
use crate::data::{Dataset, Image, Mask};
use crate::error::{Error, Result};
use crate::nn::{self, ChannelStats, Conv2d, ParamStore};
use crate::optim::Adam;
use crate::seed::derive_seed;

pub const DEPTH: usize = 4;
/// Probability clamp applied before taking logs in the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    pub input_size: usize,
    /// Channel widths of the four encoder levels and the bottleneck.
    pub widths: [usize; DEPTH + 1],
    pub seed: u64,
    pub precision: Precision,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            widths: [64, 128, 256, 512, 1024],
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1 << DEPTH;
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "extractor input size {} must be a positive multiple of {div}",
                self.input_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("extractor widths must be positive".into()));
        }
        Ok(())
    }

    /// (channels, side) of the output of upsampling stage `tap`.
    pub fn tap_shape(&self, tap: Tap) -> (usize, usize) {
        let level = DEPTH - 1 - tap.stage();
        (self.widths[level], self.input_size >> level)
    }
}

/// Decoder stage whose output feeds a contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Up1,
    Up2,
    Up3,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::Up1, Tap::Up2, Tap::Up3];

    /// 0-based upsampling stage.
    pub fn stage(self) -> usize {
        match self {
            Tap::Up1 => 0,
            Tap::Up2 => 1,
            Tap::Up3 => 2,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "up{}", self.stage() + 1)
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "up1" => Ok(Tap::Up1),
            "up2" => Ok(Tap::Up2),
            "up3" => Ok(Tap::Up3),
            other => Err(Error::InvalidArgument(format!("unknown tap {other:?}"))),
        }
    }
}

/// Parses `up1,up2` style lists; duplicates are rejected.
pub fn parse_taps(s: &str) -> Result<Vec<Tap>> {
    let mut taps: Vec<Tap> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    let n = taps.len();
    taps.sort();
    taps.dedup();
    if taps.len() != n {
        return Err(Error::InvalidArgument(format!("duplicate tap in {s:?}")));
    }
    Ok(taps)
}

/// The six tap selections compared in the ablation.
pub fn ablation_tap_sets() -> Vec<Vec<Tap>> {
    use Tap::*;
    vec![vec![Up1], vec![Up2], vec![Up3], vec![Up2, Up3], vec![Up1, Up3], vec![Up1, Up2]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorTrainConfig {
    pub lr0: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub taps: Vec<Tap>,
    pub contrastive_enabled: bool,
    pub caps: Caps,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-5,
            lr_step_epochs: 20,
            lr_gamma: 0.5,
            batch_size: 2,
            epochs: 100,
            tau: contrastive::DEFAULT_TAU,
            taps: vec![Tap::Up1, Tap::Up2],
            contrastive_enabled: true,
            caps: Caps::default(),
            seed: 0,
        }
    }
}

impl ExtractorTrainConfig {
    /// Step schedule: `lr0 · gamma^⌊epoch / step⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = epoch / self.lr_step_epochs.max(1);
        self.lr0 * self.lr_gamma.powi(k as i32)
    }
}

/// Per-epoch means of the loss components. `lq1..lq3` belong to taps up1..up3
/// and are 0 for taps that are not selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub lq1: f64,
    pub lq2: f64,
    pub lq3: f64,
    pub total: f64,
}

impl EpochLog {
    fn lq(&self, tap: Tap) -> f64 {
        match tap {
            Tap::Up1 => self.lq1,
            Tap::Up2 => self.lq2,
            Tap::Up3 => self.lq3,
        }
    }
}

/// `epoch,lr,ce,lq1,lq2,total`, with an `lq3` column before `total` only when
/// the up3 tap was trained.
pub fn training_log_csv(log: &[EpochLog], with_up3: bool) -> String {
    let mut out = String::from(if with_up3 {
        "epoch,lr,ce,lq1,lq2,lq3,total\n"
    } else {
        "epoch,lr,ce,lq1,lq2,total\n"
    });
    for e in log {
        out.push_str(&format!("{},{},{},{},{}", e.epoch, e.lr, e.ce, e.lq1, e.lq2));
        if with_up3 {
            out.push_str(&format!(",{}", e.lq3));
        }
        out.push_str(&format!(",{}\n", e.total));
    }
    out
}

#[derive(Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        (cin, cout): (usize, usize),
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.a"), (cin, cout, 3), rng, dtype)?,
            b: Conv2d::new(store, &format!("{name}.b"), (cout, cout, 3), rng, dtype)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.b.forward(&self.a.forward(x)?.relu()?)?.relu()?)
    }
}

#[derive(Debug)]
struct UpStage {
    up: Conv2d,
    fuse: DoubleConv,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtractorMeta {
    config: UnetConfig,
    stats: ChannelStats,
    train: Option<ExtractorTrainConfig>,
}

#[derive(Debug)]
pub struct ExtractorModel {
    config: UnetConfig,
    store: ParamStore,
    down: Vec<DoubleConv>,
    up: Vec<UpStage>,
    head: Conv2d,
    stats: ChannelStats,
    train: Option<ExtractorTrainConfig>,
}

/// Per-pixel class probabilities (N, 2, H, W) and the outputs of the first
/// three upsampling stages.
#[derive(Debug, Clone)]
pub struct ExtractorOutput {
    pub probs: Tensor,
    pub taps: Vec<Tensor>,
}

impl ExtractorOutput {
    pub fn tap(&self, tap: Tap) -> &Tensor {
        &self.taps[tap.stage()]
    }
}

pub fn build_unet(config: &UnetConfig) -> Result<ExtractorModel> {
    config.validate()?;
    let dtype = config.precision.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let w = config.widths;
    let mut down = Vec::with_capacity(DEPTH + 1);
    let mut cin = 3;
    for (level, &width) in w.iter().enumerate() {
        down.push(DoubleConv::new(&mut store, &format!("down{level}"), (cin, width), &mut rng, dtype)?);
        cin = width;
    }
    let mut up = Vec::with_capacity(DEPTH);
    for stage in 0..DEPTH {
        let level = DEPTH - 1 - stage;
        let (from, to) = (w[level + 1], w[level]);
        up.push(UpStage {
            up: Conv2d::new(&mut store, &format!("up{stage}.up"), (from, to, 3), &mut rng, dtype)?,
            fuse: DoubleConv::new(&mut store, &format!("up{stage}.fuse"), (2 * to, to), &mut rng, dtype)?,
        });
    }
    let head = Conv2d::new(&mut store, "head", (w[0], 2, 1), &mut rng, dtype)?;
    Ok(ExtractorModel {
        config: config.clone(),
        store,
        down,
        up,
        head,
        stats: ChannelStats::default(),
        train: None,
    })
}

impl ExtractorModel {
    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn train_config(&self) -> Option<&ExtractorTrainConfig> {
        self.train.as_ref()
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

    fn forward(&self, x: &Tensor) -> Result<ExtractorOutput> {
        let mut h = self.stats.apply(x)?;
        let mut skips = Vec::with_capacity(DEPTH);
        for (level, block) in self.down.iter().enumerate() {
            h = block.forward(&h)?;
            if level < DEPTH {
                skips.push(h.clone());
                h = nn::max_pool2x2(&h)?;
            }
        }
        let mut taps = Vec::with_capacity(DEPTH - 1);
        for (stage, block) in self.up.iter().enumerate() {
            let skip = &skips[DEPTH - 1 - stage];
            let up = block.up.forward(&nn::upsample2x(&h)?)?.relu()?;
            h = block.fuse.forward(&Tensor::cat(&[skip, &up], 1)?)?;
            if stage < DEPTH - 1 {
                taps.push(h.clone());
            }
        }
        let probs = nn::softmax_channels(&self.head.forward(&h)?)?;
        Ok(ExtractorOutput { probs, taps })
    }

    pub fn forward_with_feature_taps(&self, batch: &[&Image]) -> Result<ExtractorOutput> {
        for img in batch {
            self.check_image(img)?;
        }
        let x = nn::images_to_tensor(batch.iter().copied(), self.dtype())?;
        self.forward(&x)
    }

    /// Foreground probability map for one image.
    pub fn foreground_probability(&self, image: &Image) -> Result<Array2<f32>> {
        let out = self.forward_with_feature_taps(&[image])?;
        probs_to_foreground(&out.probs, 0)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn predict_mask(&self, image: &Image) -> Result<Mask> {
        Ok(mask_from_probability(&self.foreground_probability(image)?))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        self.store.save(&nn::checkpoint_file(stem, "safetensors"))?;
        let meta = ExtractorMeta {
            config: self.config.clone(),
            stats: self.stats.clone(),
            train: self.train.clone(),
        };
        let path = nn::checkpoint_file(stem, "json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let path = nn::checkpoint_file(stem, "json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ExtractorMeta = serde_json::from_str(&text)?;
        let mut model = build_unet(&meta.config)?;
        model.store.load(&nn::checkpoint_file(stem, "safetensors"))?;
        model.stats = meta.stats;
        model.train = meta.train;
        Ok(model)
    }
}

fn probs_to_foreground(probs: &Tensor, index: usize) -> Result<Array2<f32>> {
    let fg = probs.get(index)?.get(1)?;
    let (h, w) = fg.dims2()?;
    let data = fg.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((h, w), data).expect("dims match"))
}

/// Argmax over the two classes with ties going to foreground.
pub fn mask_from_probability(p_fg: &Array2<f32>) -> Mask {
    p_fg.mapv(|p| u8::from(p >= 0.5))
}

fn labels_tensor(labels: &[&Mask], dtype: DType) -> Result<Tensor> {
    let (h, w) = labels[0].dim();
    let mut data = Vec::with_capacity(labels.len() * 2 * h * w);
    for m in labels {
        if m.dim() != (h, w) {
            return Err(Error::shape(&[h, w], &[m.dim().0, m.dim().1]));
        }
        data.extend(m.iter().map(|&v| f32::from(v == 0)));
        data.extend(m.iter().map(|&v| f32::from(v != 0)));
    }
    Ok(Tensor::from_vec(data, (labels.len(), 2, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean over pixels of `-Σ_c Y^c log P^c` with one-hot `Y` from binary masks and
/// `P` clamped to `[ε, 1-ε]`. `probs` is (N, 2, H, W).
pub fn cross_entropy(probs: &Tensor, labels: &[&Mask]) -> Result<Tensor> {
    let (n, c, h, w) = probs.dims4()?;
    if labels.len() != n || c != 2 || labels.iter().any(|m| m.dim() != (h, w)) {
        let got = labels.first().map(|m| m.dim()).unwrap_or((0, 0));
        return Err(Error::shape(&[n, 2, h, w], &[labels.len(), c, got.0, got.1]));
    }
    let y = labels_tensor(labels, probs.dtype())?;
    let logp = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?;
    Ok((y * logp)?.sum_all()?.affine(-1.0 / (n * h * w) as f64, 0.0)?)
}

/// Unweighted sum of the cross-entropy and the contrastive terms.
pub fn joint_loss(ce: f64, contrastive: &[f64]) -> Result<f64> {
    if !ce.is_finite() || contrastive.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("joint loss input"));
    }
    Ok(contrastive.iter().fold(ce, |acc, v| acc + v))
}

/// Adam on cross-entropy against the pseudo labels plus, when enabled, one
/// InfoNCE term per configured tap. The contrastive partition uses the
/// network's own current (detached) prediction.
pub fn train_extractor(
    model: &mut ExtractorModel,
    dataset: &Dataset,
    pseudo: &BTreeMap<String, Mask>,
    cfg: &ExtractorTrainConfig,
) -> Result<Vec<EpochLog>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if cfg.tau.is_nan() || cfg.tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.tau)));
    }
    for s in &dataset.samples {
        model.check_image(&s.image)?;
        let label = pseudo
            .get(&s.id)
            .ok_or_else(|| Error::MissingPseudoLabel(s.id.clone()))?;
        if label.dim() != s.dims() {
            return Err(Error::MaskSizeMismatch { id: s.id.clone() });
        }
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    model.stats = ChannelStats::fit(dataset.samples.iter().map(|s| &s.image));
    let taps: Vec<Tap> = if cfg.contrastive_enabled { cfg.taps.clone() } else { Vec::new() };
    let mut opt = Adam::new(model.store.vars().cloned().collect(), cfg.lr0)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut sums = EpochLog {
            epoch,
            lr: opt.lr,
            ce: 0.0,
            lq1: 0.0,
            lq2: 0.0,
            lq3: 0.0,
            total: 0.0,
        };
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<_> = batch.iter().map(|&i| &dataset.samples[i]).collect();
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            let labels: Vec<&Mask> = samples.iter().map(|s| &pseudo[&s.id]).collect();
            let out = model.forward_with_feature_taps(&images)?;
            let ce = cross_entropy(&out.probs, &labels)?;
            let mut loss = ce.clone();
            let mut lq_values = Vec::with_capacity(taps.len());
            if !taps.is_empty() {
                let predictions = (0..samples.len())
                    .map(|i| Ok(mask_from_probability(&probs_to_foreground(&out.probs, i)?)))
                    .collect::<Result<Vec<_>>>()?;
                for &tap in &taps {
                    let features = out.tap(tap);
                    let mut per_image = Vec::with_capacity(samples.len());
                    for (i, pred) in predictions.iter().enumerate() {
                        let seed = derive_seed(cfg.seed ^ step.rotate_left(17), (i * 4 + tap.stage()) as u64);
                        per_image.push(contrastive::contrastive_loss_for_tap(
                            &features.get(i)?,
                            pred,
                            cfg.tau,
                            cfg.caps,
                            seed,
                        )?);
                    }
                    let lq = Tensor::stack(&per_image, 0)?.mean_all()?;
                    lq_values.push((tap, scalar(&lq)?));
                    loss = (loss + lq)?;
                }
            }
            let ce_value = scalar(&ce)?;
            let lq_only: Vec<f64> = lq_values.iter().map(|(_, v)| *v).collect();
            let total = joint_loss(ce_value, &lq_only)?;
            opt.step(&loss.backward()?)?;
            sums.ce += ce_value;
            for (tap, v) in lq_values {
                match tap {
                    Tap::Up1 => sums.lq1 += v,
                    Tap::Up2 => sums.lq2 += v,
                    Tap::Up3 => sums.lq3 += v,
                }
            }
            sums.total += total;
            steps += 1;
            step += 1;
        }
        let n = steps as f64;
        let entry = EpochLog {
            ce: sums.ce / n,
            lq1: sums.lq1 / n,
            lq2: sums.lq2 / n,
            lq3: sums.lq3 / n,
            total: sums.total / n,
            ..sums
        };
        log::info!(
            "extractor epoch {epoch}: lr {:.3e} ce {:.5} lq [{}] total {:.5}",
            entry.lr,
            entry.ce,
            taps.iter().map(|t| format!("{t}={:.4}", entry.lq(*t))).collect::<Vec<_>>().join(" "),
            entry.total
        );
        log.push(entry);
    }
    model.train = Some(cfg.clone());
    Ok(log)
}
