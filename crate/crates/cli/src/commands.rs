use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crackseg::checkpoint::{load_model, Checkpoint};
use crackseg::data::{
    class_name, file_stem, list_images, load_corpus, load_image, load_mask, pixel_statistics, save_mask,
    write_png_gray, LabelMask, CRACK,
};
use crackseg::eval::{
    classify, crack_indicator, crack_probability_map, evaluate_corpus, read_pfm, write_pfm, EvalReport, ImageEval,
    Prediction,
};
use crackseg::losses::{class_weights, WeightScheme};
use crackseg::train::{self, TrainOutcome};
use crackseg::unet::predict_probabilities;

use crate::config::CliConfig;
use crate::manifest::{select_class_map, Manifest, SelectRule};
use crate::{CliError, CliResult};

const NUM_CLASSES: usize = 3;

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::ingestion(format!("cannot create {}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::ingestion(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::ingestion(format!("cannot create {}: {e}", dir.display())))
}

pub fn train(
    config: &Path,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> CliResult {
    let mut cfg = CliConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(w) = workers {
        cfg.train.workers = w;
    }
    let out = out
        .or(cfg.out.clone())
        .ok_or_else(|| CliError::config("no output directory: pass --out or set `out` in the config"))?;
    cfg.model.validate()?;
    cfg.train.validate()?;

    let corpus = load_corpus(&cfg.images, &cfg.masks, cfg.model.input_size)?;
    log::info!(
        "loaded {} samples from {} at {}×{}",
        corpus.len(),
        cfg.images.display(),
        cfg.model.input_size,
        cfg.model.input_size
    );
    let started = Instant::now();
    let outcome: TrainOutcome = match &resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            train::resume(&ckpt, &corpus, Some(&cfg.model), &cfg.train)?
        }
        None => train::train(&corpus, &cfg.model, &cfg.train)?,
    };
    outcome.save(&out)?;
    let log = &outcome.log;
    println!(
        "trained {} epochs in {:.1}s, stop: {}, best epoch {} (val acc {:.4}), model written to {}",
        log.records.len(),
        started.elapsed().as_secs_f64(),
        log.stop_reason.map(|r| r.to_string()).unwrap_or_else(|| "none".into()),
        log.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
        log.best_val_acc.unwrap_or(f64::NAN),
        out.join("model.cseg").display()
    );
    Ok(())
}

pub fn infer(model: &Path, input: &Path, out: &Path, prob_maps: bool, crackmap_n: Option<usize>) -> CliResult {
    if crackmap_n == Some(0) {
        return Err(CliError::config("--crackmap-n must be at least 1"));
    }
    let (params, record) = load_model(model)?;
    let cfg = &record.model;
    if cfg.input_channels != 3 || record.channel_means.0.len() != cfg.input_channels {
        return Err(crackseg::Error::Checkpoint {
            path: model.to_path_buf(),
            reason: format!(
                "model expects {} input channels with {} channel means; images are RGB",
                cfg.input_channels,
                record.channel_means.0.len()
            ),
        }
        .into());
    }
    let images = list_images(input)?;
    if images.is_empty() {
        return Err(CliError::ingestion(format!("no images in {}", input.display())));
    }
    create_dir(out)?;
    for path in &images {
        let stem = file_stem(path);
        let mut image = load_image(path, cfg.input_size)?;
        record.channel_means.apply(&mut image);
        let probs = predict_probabilities(&params, &image)?;
        let classes = classify(&probs)?;
        save_mask(&out.join(format!("{stem}.png")), &classes)?;
        let (h, w, k) = probs.hwc()?;
        if prob_maps {
            for c in 0..k {
                let plane: Vec<f32> = probs.data().iter().skip(c).step_by(k).copied().collect();
                write_pfm(&out.join(format!("{stem}.prob.{}.pfm", class_name(c))), w, h, &plane)?;
            }
        }
        if let Some(n) = crackmap_n {
            let map = crack_probability_map(&crack_indicator(&classes), w, h, n)?;
            let values: Vec<f32> = map.values.iter().map(|&v| v as f32).collect();
            write_pfm(&out.join(format!("{stem}.crackmap.pfm")), w, h, &values)?;
            write_png_gray(&out.join(format!("{stem}.crackmap.png")), w, h, map.to_png_bytes())?;
        }
        log::info!("{stem}: {w}×{h}");
    }
    println!("wrote {} predictions to {}", images.len(), out.display());
    Ok(())
}

/// Truth masks of a directory in name order.
fn load_truths(truth: &Path) -> CliResult<Vec<(String, LabelMask)>> {
    let paths: Vec<PathBuf> = list_images(truth)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    if paths.is_empty() {
        return Err(CliError::ingestion(format!("no truth masks in {}", truth.display())));
    }
    paths
        .iter()
        .map(|p| Ok((file_stem(p), load_mask(p, None)?)))
        .collect()
}

/// Engine prediction for `id`, with the crack softmax as ROC score when
/// `<id>.prob.crack.pfm` is present.
fn load_prediction(dir: &Path, id: &str) -> CliResult<Prediction> {
    let path = dir.join(format!("{id}.png"));
    if !path.is_file() {
        return Err(CliError::ingestion(format!("no prediction {} for truth mask `{id}`", path.display())));
    }
    let classes = load_mask(&path, None)?;
    let mut pred = Prediction::from_classes(id, classes);
    let score_path = dir.join(format!("{id}.prob.{}.pfm", class_name(CRACK as usize)));
    if score_path.is_file() {
        let (w, h, values) = read_pfm(&score_path)?;
        if (w, h) != (pred.classes.width, pred.classes.height) {
            return Err(CliError::ingestion(format!(
                "{} is {w}×{h} but {} is {}×{}",
                score_path.display(),
                path.display(),
                pred.classes.width,
                pred.classes.height
            )));
        }
        pred.crack_score = Some(values.into_iter().map(f64::from).collect());
    }
    Ok(pred)
}

pub fn eval(pred: &Path, truth: &Path, report: &Path, roc: Option<&Path>) -> CliResult {
    if !pred.is_dir() {
        return Err(CliError::ingestion(format!("prediction directory {} does not exist", pred.display())));
    }
    let truths = load_truths(truth)?;
    let preds = truths
        .iter()
        .map(|(id, _)| load_prediction(pred, id))
        .collect::<CliResult<Vec<_>>>()?;
    let masks: Vec<LabelMask> = truths.into_iter().map(|(_, m)| m).collect();
    let result = evaluate_corpus(&preds, &masks, NUM_CLASSES)?;
    write_json(report, &result)?;
    if let Some(roc_path) = roc {
        match &result.roc {
            Some(curve) => curve.write_csv(roc_path)?,
            None => {
                log::warn!("pooled ROC undefined: truth holds a single crack/not-crack class");
                fs::write(roc_path, "threshold,fpr,tpr\n")
                    .map_err(|e| CliError::ingestion(format!("cannot write {}: {e}", roc_path.display())))?;
            }
        }
    }
    let agg = &result.aggregate;
    println!(
        "{} images: accuracy {:.4}, pooled AUC {}, mean AUC {}",
        agg.images,
        agg.accuracy,
        fmt_opt(agg.auc),
        fmt_opt(agg.mean_auc)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

#[derive(Serialize)]
struct ClassRow {
    name: String,
    pixels: u64,
    frequency: f64,
    alpha: f64,
}

#[derive(Serialize)]
struct WeightsReport {
    scheme: WeightScheme,
    masks: usize,
    classes: Vec<ClassRow>,
}

pub fn weights(masks: &Path, scheme: WeightScheme, out: Option<&Path>) -> CliResult {
    let paths = list_images(masks)?;
    if paths.is_empty() {
        return Err(CliError::ingestion(format!("no masks in {}", masks.display())));
    }
    let loaded = paths
        .iter()
        .map(|p| load_mask(p, None))
        .collect::<crackseg::Result<Vec<_>>>()?;
    let (counts, presence) = pixel_statistics(&loaded, NUM_CLASSES);
    let w = class_weights(&counts, &presence, scheme)?;
    let report = WeightsReport {
        scheme,
        masks: loaded.len(),
        classes: (0..NUM_CLASSES)
            .map(|i| ClassRow {
                name: class_name(i),
                pixels: w.pixel_counts[i] as u64,
                frequency: w.frequencies[i],
                alpha: w.alpha[i],
            })
            .collect(),
    };
    match out {
        Some(path) => write_json(path, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct Delta {
    /// `None` when either AUC is undefined.
    auc: Option<f64>,
    accuracy: f64,
    dice_crack: f64,
}

impl Delta {
    fn between(engine_auc: Option<f64>, external_auc: Option<f64>, engine: (f64, f64), external: (f64, f64)) -> Self {
        Self {
            auc: engine_auc.zip(external_auc).map(|(a, b)| b - a),
            accuracy: external.0 - engine.0,
            dice_crack: external.1 - engine.1,
        }
    }
}

#[derive(Serialize)]
struct ImageComparison<'a> {
    id: &'a str,
    engine: &'a ImageEval,
    external: &'a ImageEval,
    delta: Delta,
}

#[derive(Serialize)]
struct CompareReport<'a> {
    select: SelectRule,
    source: &'a str,
    engine: &'a crackseg::eval::Aggregate,
    external: &'a crackseg::eval::Aggregate,
    per_image: Vec<ImageComparison<'a>>,
    /// External minus engine, on the aggregates.
    aggregate_delta: Delta,
}

fn crack_dice(dice: &std::collections::BTreeMap<String, f64>) -> f64 {
    dice.get(&class_name(CRACK as usize)).copied().unwrap_or(0.0)
}

pub fn compare(engine_pred: &Path, external: &Path, truth: &Path, report: &Path, select: SelectRule) -> CliResult {
    let manifest = Manifest::load(external)?;
    let base = external.parent().unwrap_or(Path::new("."));
    let truths = load_truths(truth)?;
    for img in &manifest.images {
        if !truths.iter().any(|(id, _)| *id == img.id) {
            log::warn!("manifest image `{}` has no truth mask; ignored", img.id);
        }
    }
    let mut engine = Vec::with_capacity(truths.len());
    let mut ext = Vec::with_capacity(truths.len());
    for (id, mask) in &truths {
        engine.push(load_prediction(engine_pred, id)?);
        let Some(img) = manifest.image(id) else {
            let reason = manifest
                .errors
                .iter()
                .find(|e| e.id.as_deref() == Some(id.as_str()))
                .map(|e| format!(" (external error: {})", e.message))
                .unwrap_or_default();
            return Err(CliError::ingestion(format!(
                "manifest {} has no entry for truth mask `{id}`{reason}",
                external.display()
            )));
        };
        let classes = select_class_map(img, base, select, mask.width, mask.height)?;
        ext.push(Prediction::from_classes(id.clone(), classes));
    }
    let masks: Vec<LabelMask> = truths.iter().map(|(_, m)| m.clone()).collect();
    let er: EvalReport = evaluate_corpus(&engine, &masks, NUM_CLASSES)?;
    let xr: EvalReport = evaluate_corpus(&ext, &masks, NUM_CLASSES)?;
    let per_image = er
        .per_image
        .iter()
        .zip(&xr.per_image)
        .map(|(e, x)| ImageComparison {
            id: &e.id,
            engine: e,
            external: x,
            delta: Delta::between(e.auc, x.auc, (e.accuracy, crack_dice(&e.dice)), (x.accuracy, crack_dice(&x.dice))),
        })
        .collect();
    let (ea, xa) = (&er.aggregate, &xr.aggregate);
    let out = CompareReport {
        select,
        source: &manifest.source,
        engine: ea,
        external: xa,
        per_image,
        aggregate_delta: Delta::between(ea.auc, xa.auc, (ea.accuracy, crack_dice(&ea.dice)), (xa.accuracy, crack_dice(&xa.dice))),
    };
    write_json(report, &out)?;
    println!(
        "{} images: engine accuracy {:.4} AUC {}, {} accuracy {:.4} AUC {}",
        ea.images,
        ea.accuracy,
        fmt_opt(ea.auc),
        manifest.source,
        xa.accuracy,
        fmt_opt(xa.auc)
    );
    Ok(())
}
