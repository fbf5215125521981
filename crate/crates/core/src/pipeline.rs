//! Stage runners behind the CLI. Each stage reads its inputs from the data
//! root and the run directory, writes its artifacts under fixed subfolders and
//! leaves a resolved-config snapshot behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam;
use crate::classifier::{self, ClassifierHistory, ClassifierModel};
use crate::config::RunConfig;
use crate::data::{self, ClassLabel, Dataset, LoadOptions, Mask, Split, SynthParams};
use crate::error::{Error, Result};
use crate::extractor::{self, EpochLog, ExtractorModel, Tap};
use crate::metrics::{self, MetricReport};
use crate::nn::checkpoint_file;
use crate::plot;

pub const CHECKPOINTS: &str = "checkpoints";
pub const PSEUDO: &str = "pseudo";
pub const PRED: &str = "pred";
pub const REPORTS: &str = "reports";
pub const PLOTS: &str = "plots";

/// Fixed layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn classifier(&self) -> PathBuf {
        self.out.join(CHECKPOINTS).join("classifier")
    }

    pub fn extractor(&self) -> PathBuf {
        self.out.join(CHECKPOINTS).join("extractor")
    }

    pub fn pseudo_dir(&self) -> PathBuf {
        self.out.join(PSEUDO)
    }

    pub fn pred_dir(&self) -> PathBuf {
        self.out.join(PRED)
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.out.join(PRED).join("scores")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.out.join(REPORTS).join(name)
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.out.join(PLOTS)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    data::ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, stage })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train: usize,
    pub test: usize,
    pub foreground: usize,
    pub background: usize,
}

/// Generates a synthetic dataset and writes it as `<out>/{train,test}`.
/// Refuses a non-empty `out` unless `force` is set.
pub fn synth_stage(
    out: &Path,
    seed: u64,
    n: usize,
    size: usize,
    params: &SynthParams,
    train_fraction: f64,
    force: bool,
) -> Result<SynthSummary> {
    if out.is_dir() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
        if non_empty {
            for sub in ["train", "test"] {
                let d = out.join(sub);
                if d.exists() {
                    fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                }
            }
        }
    }
    let ds = data::synthesize_dataset_with(seed, n, (size, size), params)?;
    let foreground = ds.count(ClassLabel::Foreground);
    let background = ds.count(ClassLabel::Background);
    let (train, test) = ds.split(train_fraction, crate::seed::derive_seed(seed, crate::seed::stage::SPLIT))?;
    data::write_dataset(out, &train)?;
    data::write_dataset(out, &test)?;
    let summary = SynthSummary {
        train: train.len(),
        test: test.len(),
        foreground,
        background,
    };
    write_json(&out.join("synth.json"), &summary)?;
    Ok(summary)
}

/// Train and test splits. Without a `test/` directory the training directory
/// is split by `train_fraction`.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let opts = LoadOptions {
        size: (cfg.data.image_size, cfg.data.image_size),
        seed: cfg.split_seed(),
    };
    let train = data::load_dataset(&cfg.data.root, Split::Train, &opts)?;
    if cfg.data.root.join("test").is_dir() {
        let test = data::load_dataset(&cfg.data.root, Split::Test, &opts)?;
        Ok((train, test))
    } else {
        let (mut train, mut test) = train.split(cfg.data.train_fraction, cfg.split_seed())?;
        test.split = Split::Test;
        train.split = Split::Train;
        log::info!("split {} train / {} test", train.len(), test.len());
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub history: ClassifierHistory,
    pub train_samples: usize,
    pub test_accuracy: f64,
}

pub fn train_classifier_stage(cfg: &RunConfig) -> Result<ClassifierSummary> {
    cfg.write_snapshot()?;
    let paths = RunPaths::new(&cfg.out);
    let (train, test) = load_splits(cfg)?;
    let mut model = classifier::build_classifier(&cfg.classifier)?;
    let history = classifier::train_classifier(&mut model, &train, &cfg.classifier_train)?;
    model.save(&paths.classifier())?;
    write_text(&paths.report("classifier_loss.csv"), &classifier::loss_history_csv(&history))?;
    let summary = ClassifierSummary {
        history,
        train_samples: train.len(),
        test_accuracy: if test.is_empty() { 0.0 } else { model.accuracy(&test)? },
    };
    write_json(&paths.report("classifier.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub labels: usize,
    pub threshold: f64,
    /// Mean per-image F-measure against ground truth over foreground samples
    /// that have a mask.
    pub mean_f_foreground: Option<f64>,
}

pub fn gen_pseudo_stage(cfg: &RunConfig) -> Result<PseudoSummary> {
    cfg.write_snapshot()?;
    let paths = RunPaths::new(&cfg.out);
    let stem = paths.classifier();
    require(checkpoint_file(&stem, "json"), "train-classifier")?;
    let model = ClassifierModel::load(&stem)?;
    let (train, _) = load_splits(cfg)?;
    if !model.is_trained() {
        return Err(Error::IncompatibleModel("classifier has not been trained".into()));
    }
    let dir = paths.pseudo_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut labels = BTreeMap::new();
    for s in &train.samples {
        let (label, maps) = cam::pseudo_label_for(&model, &s.id, &s.image, s.class_label, cfg.cam.threshold)?;
        data::save_mask(&label.mask, &dir.join(format!("{}.png", s.id)))?;
        if let (true, Some(maps)) = (cfg.cam.heatmaps, maps) {
            let cam_dir = paths.plots_dir().join("cam");
            for (i, m) in maps.layer_maps.iter().enumerate() {
                plot::save_heatmap(m, &cam_dir.join(format!("{}_tap{}.png", s.id, i + 1)))?;
            }
            plot::save_heatmap(&maps.merged, &cam_dir.join(format!("{}_merged.png", s.id)))?;
        }
        labels.insert(s.id.clone(), label.mask);
    }
    let summary = PseudoSummary {
        labels: labels.len(),
        threshold: cfg.cam.threshold,
        mean_f_foreground: pseudo_label_quality(&train, &labels)?,
    };
    write_json(&paths.report("pseudo.json"), &summary)?;
    Ok(summary)
}

/// Mean per-image F of `masks` on foreground samples that carry ground truth.
pub fn pseudo_label_quality(dataset: &Dataset, masks: &BTreeMap<String, Mask>) -> Result<Option<f64>> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in &dataset.samples {
        if let (ClassLabel::Foreground, Some(gt), Some(m)) = (s.class_label, &s.gt_mask, masks.get(&s.id)) {
            preds.push(m);
            gts.push(gt);
        }
    }
    if preds.is_empty() {
        return Ok(None);
    }
    metrics::mean_f_measure(&preds, &gts).map(Some)
}

/// Loads `<out>/pseudo/<id>.png` for every sample that has one.
pub fn load_pseudo_labels(paths: &RunPaths, dataset: &Dataset) -> Result<BTreeMap<String, Mask>> {
    let dir = require(paths.pseudo_dir(), "gen-pseudo")?;
    let mut out = BTreeMap::new();
    for s in &dataset.samples {
        let p = dir.join(format!("{}.png", s.id));
        if p.is_file() {
            out.insert(s.id.clone(), data::load_mask(&p)?);
        }
    }
    Ok(out)
}

pub fn train_extractor_stage(cfg: &RunConfig) -> Result<Vec<EpochLog>> {
    cfg.write_snapshot()?;
    let paths = RunPaths::new(&cfg.out);
    let (train, _) = load_splits(cfg)?;
    let pseudo = load_pseudo_labels(&paths, &train)?;
    let mut model = extractor::build_unet(&cfg.extractor)?;
    let log = extractor::train_extractor(&mut model, &train, &pseudo, &cfg.extractor_train)?;
    model.save(&paths.extractor())?;
    let with_up3 = cfg.extractor_train.contrastive_enabled && cfg.extractor_train.taps.contains(&Tap::Up3);
    write_text(&paths.report("extractor_log.csv"), &extractor::training_log_csv(&log, with_up3))?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskQuality {
    /// Mean per-image F of the extractor's argmax masks on foreground training samples.
    pub train_mean_f_foreground: Option<f64>,
    pub test_mean_f_foreground: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationOutcome {
    pub report: MetricReport,
    pub quality: MaskQuality,
}

fn predicted_masks(model: &ExtractorModel, dataset: &Dataset) -> Result<BTreeMap<String, Mask>> {
    dataset
        .samples
        .iter()
        .map(|s| Ok((s.id.clone(), model.predict_mask(&s.image)?)))
        .collect()
}

/// Scores the test split, persists predicted masks and 8-bit score maps under
/// `pred/`, and writes `reports/metrics.json`.
pub fn evaluate_stage(cfg: &RunConfig) -> Result<EvaluationOutcome> {
    cfg.write_snapshot()?;
    let paths = RunPaths::new(&cfg.out);
    let stem = paths.extractor();
    require(checkpoint_file(&stem, "json"), "train-extractor")?;
    let model = ExtractorModel::load(&stem)?;
    let (train, test) = load_splits(cfg)?;
    let (report, maps) = metrics::evaluate_dataset(&model, &test)?;
    for (s, m) in test.samples.iter().zip(&maps) {
        plot::save_score_map(m, &paths.scores_dir().join(format!("{}.png", s.id)))?;
        data::save_mask(
            &extractor::mask_from_probability(&m.values),
            &paths.pred_dir().join(format!("{}.png", s.id)),
        )?;
    }
    write_json(&paths.report("metrics.json"), &report)?;
    let quality = MaskQuality {
        train_mean_f_foreground: pseudo_label_quality(&train, &predicted_masks(&model, &train)?)?,
        test_mean_f_foreground: pseudo_label_quality(&test, &predicted_masks(&model, &test)?)?,
    };
    write_json(&paths.report("mask_quality.json"), &quality)?;
    Ok(EvaluationOutcome { report, quality })
}

/// Renders ROC and PR curves from `reports/metrics.json`.
pub fn plot_stage(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(&cfg.out);
    let report: MetricReport = read_json(&paths.report("metrics.json"), "evaluate")?;
    let roc = paths.plots_dir().join("roc.png");
    let pr = paths.plots_dir().join("pr.png");
    plot::save_curve(&report.roc, &roc)?;
    plot::save_curve(&report.pr, &pr)?;
    Ok(vec![roc, pr])
}
