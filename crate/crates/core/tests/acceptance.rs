//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit
//! if any fails. Criterion 8 trains the desk-scale pipeline and takes minutes.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;

use common::{
    brute_alpha, brute_mean, check_class_gradients, check_info_nce_gradients, exhaustive_otsu_level,
    naive_cross_entropy_at_zero, pair_counting_auc, random_array3, rng, tensor2, unit_rows,
};
use wsroi::cam::{self, SaliencyMap};
use wsroi::classifier::{build_classifier, ActivationBundle, ClassifierConfig, Precision, TapActivation};
use wsroi::config::RunConfig;
use wsroi::contrastive::{compute_logits, info_nce, ContrastiveBatch};
use wsroi::data::{synthesize_dataset, Mask};
use wsroi::extractor::{ablation_tap_sets, build_unet, train_extractor, ExtractorTrainConfig, Tap, UnetConfig};
use wsroi::metrics::{auc, f_measure, histogram, otsu_level, roc_pr_curves, BETA2, DEFAULT_LEVELS};
use wsroi::pipeline;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn grad_cam() -> Outcome {
    let mut r = rng(100);
    let (mut alpha_err, mut merge_err, mut min_value) = (0.0f64, 0.0f64, f32::MAX);
    for _ in 0..50 {
        let dims = (r.random_range(1..9), r.random_range(1..17), r.random_range(1..17));
        let acts = random_array3(&mut r, dims, -1.0, 3.0);
        let grads = random_array3(&mut r, dims, -1e-2, 1e-2);
        let expected = brute_alpha(&grads);
        let bundle = ActivationBundle {
            taps: vec![TapActivation { activations: acts, gradients: grads }],
            class_index: 1,
        };
        let alpha = cam::grad_cam_weights(&bundle, 0).map_err(|e| e.to_string())?;
        for (a, e) in alpha.iter().zip(&expected) {
            alpha_err = alpha_err.max((a - e).abs());
        }
        let map = cam::grad_cam_map(&bundle, 0, &alpha).map_err(|e| e.to_string())?;
        min_value = map.iter().fold(min_value, |m, &v| m.min(v));

        let hw = (dims.1, dims.2);
        let maps: Vec<SaliencyMap> = (0..3)
            .map(|_| SaliencyMap::new(Array2::from_shape_fn(hw, |_| r.random_range(0.0f32..=1.0))).unwrap())
            .collect();
        let merged = cam::merge_maps(&maps).map_err(|e| e.to_string())?;
        let oracle = brute_mean(&[&maps[0].values, &maps[1].values, &maps[2].values]);
        for (m, o) in merged.values.iter().zip(oracle.iter()) {
            merge_err = merge_err.max((*m as f64 - o).abs());
        }
    }
    ensure(alpha_err <= 1e-6, || format!("alpha error {alpha_err:e} > 1e-6"))?;
    ensure(min_value >= 0.0, || format!("map value {min_value} < 0"))?;
    ensure(merge_err <= 1e-7, || format!("merge error {merge_err:e} > 1e-7"))?;
    Ok(format!("alpha err {alpha_err:.1e}, min map {min_value}, merge err {merge_err:.1e}"))
}

fn gradient_checks() -> Outcome {
    let model = build_classifier(&ClassifierConfig {
        input_size: 32,
        widths: [2, 3, 4, 4, 4],
        convs_per_block: [1, 1, 1, 1, 1],
        seed: 21,
        precision: Precision::F64,
        init_weights: None,
    })
    .map_err(|e| e.to_string())?;
    let ds = synthesize_dataset(4, 2, (32, 32)).map_err(|e| e.to_string())?;
    let (mut worst, mut checked, mut kinks) = (0.0f64, 0, 0);
    for s in &ds.samples {
        for class in 0..2 {
            let c = check_class_gradients(&model, &s.image, class);
            worst = worst.max(c.worst);
            checked += c.checked;
            kinks += c.skipped_kinks;
        }
    }
    let nce = check_info_nce_gradients(8, 30);
    ensure(checked > 20, || format!("only {checked} class-gradient coordinates checked"))?;
    ensure(worst <= 1e-4, || format!("class_gradients worst rel err {worst:e}"))?;
    ensure(nce.worst <= 1e-4, || format!("info_nce worst rel err {:e}", nce.worst))?;
    Ok(format!(
        "class_gradients {worst:.1e} over {checked} coords ({kinks} kinks skipped); info_nce {:.1e} over {}",
        nce.worst, nce.checked
    ))
}

fn nce_loss(logits: &[Vec<f64>], tau: f64) -> Result<f64, String> {
    info_nce(&tensor2(logits), tau)
        .and_then(|t| Ok(t.to_scalar::<f64>()?))
        .map_err(|e| e.to_string())
}

fn info_nce_closed_forms() -> Outcome {
    let k0 = nce_loss(&[vec![0.4], vec![-0.2]], 0.07)?;
    ensure(k0 == 0.0, || format!("K=0 gives {k0}"))?;
    let one = nce_loss(&[vec![1.0, 0.0]], 1.0)?;
    let expected = (1.0 + (-1f64).exp()).ln();
    ensure((one - expected).abs() <= 1e-6, || format!("single negative gives {one}, want {expected}"))?;
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, k) = (r.random_range(1..8), r.random_range(1..30));
        let tau = r.random_range(0.05..1.0);
        let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..=k).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        worst = worst.max((nce_loss(&logits, tau)? - naive_cross_entropy_at_zero(&logits, tau)).abs());
    }
    ensure(worst <= 1e-6, || format!("cross-entropy mismatch {worst:e}"))?;
    Ok(format!("K=0 -> 0, closed form err {:.1e}, CE max err {worst:.1e} on 100", (one - expected).abs()))
}

fn logits_layout() -> Outcome {
    let mut r = rng(102);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, c, k) = (r.random_range(1..12), r.random_range(2..16), r.random_range(1..40));
        let q = unit_rows(&mut r, n, c);
        let negs = unit_rows(&mut r, k, c);
        let batch = ContrastiveBatch::new(tensor2(&q), tensor2(&q), tensor2(&negs).t().unwrap().contiguous().unwrap())
            .map_err(|e| e.to_string())?;
        let logits = compute_logits(&batch).map_err(|e| e.to_string())?;
        ensure(logits.dims() == [n, k + 1], || format!("shape {:?}, want [{n}, {}]", logits.dims(), k + 1))?;
        for (i, row) in logits.to_vec2::<f64>().unwrap().iter().enumerate() {
            let dot: f64 = q[i].iter().map(|v| v * v).sum();
            worst = worst.max((row[0] - dot).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("column 0 deviates by {worst:e}"))?;
    Ok(format!("N x (K+1) on 50 batches, column 0 err {worst:.1e}"))
}

fn metrics_checks() -> Outcome {
    let mut r = rng(103);
    let mut auc_err = 0.0f64;
    for trial in 0..30 {
        let dims = (r.random_range(3..24), r.random_range(3..24));
        let top = if trial % 2 == 0 { 255 } else { 12 };
        let lv = Array2::from_shape_fn(dims, |_| r.random_range(0..=top));
        let gt: Mask = Array2::from_shape_fn(dims, |(i, j)| u8::from(r.random_bool(0.15 + 0.7 * lv[[i, j]] as f64 / 255.0)));
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (&l, &g) in lv.iter().zip(gt.iter()) {
            if g != 0 { pos.push(l as f64) } else { neg.push(l as f64) }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let map = SaliencyMap::new(lv.mapv(|l| l as f32 / 255.0)).unwrap();
        let (roc, _) = roc_pr_curves(&[map], &[&gt], DEFAULT_LEVELS).map_err(|e| e.to_string())?;
        auc_err = auc_err.max((auc(&roc).map_err(|e| e.to_string())? - pair_counting_auc(&pos, &neg)).abs());
    }
    ensure(auc_err <= 1e-3, || format!("AUC error {auc_err:e}"))?;
    for trial in 0..50 {
        let dims = (r.random_range(4..40), r.random_range(4..40));
        let lv = Array2::from_shape_fn(dims, |_| {
            if r.random_bool(0.4) { r.random_range(150..256usize) } else { r.random_range(0..120) }
        });
        let map = SaliencyMap::new(lv.mapv(|l| l as f32 / 255.0)).unwrap();
        let ours = otsu_level(&histogram([&map], DEFAULT_LEVELS));
        let oracle = exhaustive_otsu_level(lv.as_slice().unwrap(), DEFAULT_LEVELS);
        ensure(ours == oracle, || format!("OTSU map {trial}: {ours:?} vs {oracle:?}"))?;
    }
    let f = f_measure(0.896, 0.877, BETA2);
    ensure((f - 0.8916).abs() <= 5e-4, || format!("F = {f}"))?;
    Ok(format!("AUC err {auc_err:.1e}, OTSU exact on 50 maps, F = {f:.4}"))
}

fn lr_schedule() -> Outcome {
    let cfg = ExtractorTrainConfig::default();
    let got: Vec<f64> = [0, 19, 20, 39, 40].iter().map(|&e| cfg.lr_at(e)).collect();
    ensure(got == [5e-5, 5e-5, 2.5e-5, 2.5e-5, 1.25e-5], || format!("got {got:?}"))?;
    Ok(format!("{got:?}"))
}

fn ablations() -> Outcome {
    let ds = synthesize_dataset(6, 4, (32, 32)).map_err(|e| e.to_string())?;
    let pseudo = ds.samples.iter().map(|s| (s.id.clone(), s.gt_mask.clone().unwrap())).collect();
    let unet = UnetConfig {
        input_size: 32,
        widths: [2, 4, 4, 8, 8],
        seed: 3,
        precision: Precision::F32,
    };
    let train = |taps: Vec<Tap>, contrast: bool| {
        let cfg = ExtractorTrainConfig {
            lr0: 1e-3,
            epochs: 2,
            taps,
            contrastive_enabled: contrast,
            seed: 4,
            ..ExtractorTrainConfig::default()
        };
        let mut model = build_unet(&unet)?;
        train_extractor(&mut model, &ds, &pseudo, &cfg)
    };
    let log = train(vec![Tap::Up1, Tap::Up2], false).map_err(|e| e.to_string())?;
    ensure(log.iter().all(|e| e.total == e.ce), || "no-contrast total differs from ce".into())?;
    let sets = ablation_tap_sets();
    for taps in &sets {
        let log = train(taps.clone(), true).map_err(|e| format!("taps {taps:?}: {e}"))?;
        ensure(log.iter().all(|e| e.total.is_finite()), || format!("taps {taps:?}: non-finite loss"))?;
    }
    Ok(format!("no-contrast total == ce, {} tap sets ran", sets.len()))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run_pipeline(cfg: &RunConfig) -> Result<(pipeline::ClassifierSummary, pipeline::PseudoSummary, pipeline::EvaluationOutcome), String> {
    let go = || -> wsroi::Result<_> {
        pipeline::synth_stage(
            &cfg.data.root,
            cfg.seed,
            cfg.synth.n,
            cfg.synth.size,
            &cfg.synth.params,
            cfg.data.train_fraction,
            false,
        )?;
        let clf = pipeline::train_classifier_stage(cfg)?;
        let pseudo = pipeline::gen_pseudo_stage(cfg)?;
        pipeline::train_extractor_stage(cfg)?;
        let eval = pipeline::evaluate_stage(cfg)?;
        Ok((clf, pseudo, eval))
    };
    go().map_err(|e| e.to_string())
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::load(&workspace_root().join("configs/desk.toml")).map_err(|e| e.to_string())?;
    cfg.out = tmp.path().join("run");
    cfg.data.root = tmp.path().join("data");
    let cfg = cfg.resolve().map_err(|e| e.to_string())?;
    ensure(cfg.seed == 1 && cfg.synth.n == 200 && cfg.data.image_size == 128, || "desk config drifted".into())?;
    let start = Instant::now();
    let (clf, pseudo, eval) = run_pipeline(&cfg)?;
    let elapsed = start.elapsed();
    let acc = clf.history.final_train_accuracy;
    let pseudo_f = pseudo.mean_f_foreground.ok_or("no pseudo-label F")?;
    let ext_f = eval.quality.train_mean_f_foreground.ok_or("no extractor F")?;
    let summary = format!(
        "train acc {acc:.3}, pseudo F {pseudo_f:.4}, extractor F {ext_f:.4} (test {:.4}), AUC {:.4}, time {:.0}s",
        eval.quality.test_mean_f_foreground.unwrap_or(f64::NAN),
        eval.report.auc,
        elapsed.as_secs_f64()
    );
    ensure(acc >= 0.9, || format!("train accuracy below 0.9: {summary}"))?;
    ensure(pseudo_f >= 0.4, || format!("pseudo F below 0.4: {summary}"))?;
    ensure(ext_f >= pseudo_f, || format!("extractor F below pseudo F: {summary}"))?;
    ensure(elapsed <= Duration::from_secs(30 * 60), || format!("over 30 min: {summary}"))?;
    Ok(summary)
}

fn tiny_config(root: &Path) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::from_toml_str(
        r#"
        seed = 2
        [data]
        image_size = 32
        [synth]
        n = 16
        size = 32
        [classifier]
        widths = [4, 4, 6, 6, 6]
        convs_per_block = [1, 1, 1, 1, 1]
        [classifier_train]
        epochs = 3
        batch_size = 4
        lr = 0.003
        [extractor]
        widths = [2, 4, 4, 8, 8]
        [extractor_train]
        epochs = 2
        lr0 = 1e-3
        "#,
    )
    .map_err(|e| e.to_string())?;
    cfg.out = root.join("run");
    cfg.data.root = root.join("data");
    cfg.resolve().map_err(|e| e.to_string())
}

/// Relative path -> bytes for every file under `dir`.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut snaps = Vec::new();
    for dir in [a.path(), b.path()] {
        let cfg = tiny_config(dir)?;
        run_pipeline(&cfg)?;
        // The config snapshot embeds the (different) directories.
        fs::remove_file(cfg.out.join(wsroi::config::SNAPSHOT_NAME)).map_err(|e| e.to_string())?;
        snaps.push(snapshot(&cfg.out));
    }
    let names = |s: &[(PathBuf, Vec<u8>)]| s.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    ensure(names(&snaps[0]) == names(&snaps[1]), || "different artifact sets".into())?;
    for ((p, x), (_, y)) in snaps[0].iter().zip(&snaps[1]) {
        ensure(x == y, || format!("{} differs between runs", p.display()))?;
    }
    let masks = snaps[0].iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count();
    Ok(format!("{} artifacts identical, including loss CSVs and {masks} masks/maps", snaps[0].len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("grad-cam weights, maps and merge", grad_cam),
        ("finite-difference gradients", gradient_checks),
        ("InfoNCE closed forms", info_nce_closed_forms),
        ("logit layout", logits_layout),
        ("AUC, OTSU and F-measure", metrics_checks),
        ("learning-rate schedule", lr_schedule),
        ("no-contrast loss and tap-set ablations", ablations),
        ("synthetic end-to-end run", end_to_end),
        ("determinism on rerun", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
