use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use ala_core::attack::{run_batch, AttackConfig, RANGE_MODE};
use ala_core::dataset::{
    corrupt_dataset, generate_corpus, load_corpus_dir, write_corpus, write_split, CorpusManifest, CorpusSpec, LabeledImage,
    DEFAULT_CORRUPTION_LEVELS,
};
use ala_core::eval::{batch_outputs, run_ablation, transfer_matrix, write_ablation_csv, write_batch_summary_csv, PROXY_NOTE};
use ala_core::image_io::{read_image, write_png};
use ala_core::model::{accuracy, fine_tune, load_model, save_model, train_model, Architecture, Model, TrainConfig};

use crate::manifest::Recorder;
use crate::settings::{self, Layer};
use crate::{CliError, Split};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// `m.bin` -> `m.<suffix>`
fn beside(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn has_splits(dir: &Path) -> bool {
    dir.join("train").is_dir() || dir.join("test").is_dir()
}

/// Load a split of a generated corpus, or the whole directory when it has
/// no `train/`/`test/` subdirectories.
fn load_split(dir: &Path, split: Split) -> Result<Vec<LabeledImage>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::runtime(format!("corpus directory {} not found", dir.display())));
    }
    if !has_splits(dir) {
        return Ok(load_corpus_dir(dir)?);
    }
    Ok(match split {
        Split::Train => load_corpus_dir(&dir.join("train"))?,
        Split::Test => load_corpus_dir(&dir.join("test"))?,
        Split::All => {
            let mut all = load_corpus_dir(&dir.join("train"))?;
            all.extend(load_corpus_dir(&dir.join("test"))?);
            all
        }
    })
}

fn manifest_classes(dir: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).ok()?;
    let m: CorpusManifest = serde_json::from_str(&text).ok()?;
    Some(m.spec.classes)
}

fn load(path: &Path) -> Result<Model, CliError> {
    load_model(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Model and data must agree on image size and label range.
fn check_compatible(model: &Model, data: &[LabeledImage], what: &Path) -> Result<(), CliError> {
    for item in data {
        if item.image.dims() != model.input_dims() {
            return Err(CliError::runtime(format!(
                "{}: image {} is {:?} but the model expects {:?}",
                what.display(),
                item.id,
                item.image.dims(),
                model.input_dims()
            )));
        }
        if item.label >= model.classes() {
            return Err(CliError::runtime(format!(
                "{}: label {} of {} exceeds the model's {} classes",
                what.display(),
                item.label,
                item.id,
                model.classes()
            )));
        }
    }
    Ok(())
}

pub fn gen_corpus(spec: &CorpusSpec, out: &Path) -> Result<(), CliError> {
    let mut rec = Recorder::start("gen-corpus");
    let (train, test) = generate_corpus(spec)?;
    write_corpus(out, spec, &train, &test)?;
    rec.output(&out.join("train"));
    rec.output(&out.join("test"));
    rec.output(&out.join("manifest.json"));
    eprintln!("wrote {} train and {} test images to {}", train.len(), test.len(), out.display());
    rec.finish(to_value(spec), Some(spec.seed), &out.join("run_manifest.json"))
}

pub fn train(s: &Layer, corpus: &Path, out: &Path) -> Result<(), CliError> {
    let mut rec = Recorder::start("train");
    rec.input(corpus);
    let arch: Architecture = settings::parse_value(s, "arch")?.unwrap_or(Architecture::Conv);
    let data = load_split(corpus, Split::Train)?;
    let classes = match settings::parse_value(s, "classes")? {
        Some(c) => c,
        None => manifest_classes(corpus)
            .unwrap_or_else(|| data.iter().map(|d| d.label + 1).max().unwrap_or(2).max(2)),
    };
    let config = settings::train_config(s, TrainConfig { classes, ..TrainConfig::default() })?;
    let outcome = train_model(arch, &data, &config)?;
    let test_accuracy = if has_splits(corpus) && corpus.join("test").is_dir() {
        let test = load_split(corpus, Split::Test)?;
        check_compatible(&outcome.model, &test, corpus)?;
        Some(accuracy(&outcome.model, &test)?)
    } else {
        None
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    save_model(&outcome.model, out)?;
    let metrics_path = beside(out, "metrics.json");
    write_json(
        &metrics_path,
        &json!({
            "architecture": arch,
            "train_images": data.len(),
            "train_accuracy": outcome.train_accuracy,
            "test_accuracy": test_accuracy,
            "epoch_losses": outcome.epoch_losses,
        }),
    )?;
    eprintln!(
        "train accuracy {:.4}{}",
        outcome.train_accuracy,
        test_accuracy.map(|a| format!(", test accuracy {a:.4}")).unwrap_or_default()
    );
    rec.output(out);
    rec.output(&ala_core::model::sidecar_path(out));
    rec.output(&metrics_path);
    let echo = json!({ "architecture": arch, "train": config });
    rec.finish(echo, Some(config.seed), &beside(out, "run.json"))
}

#[derive(Serialize)]
struct ThetaRecord<'a> {
    id: &'a str,
    final_theta: &'a [f64],
    adversarial_theta: Option<&'a [f64]>,
}

pub fn attack(
    model_path: &Path,
    corpus: &Path,
    split: Split,
    config: &AttackConfig,
    workers: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut rec = Recorder::start("attack");
    rec.input(model_path);
    rec.input(corpus);
    let model = load(model_path)?;
    let data = load_split(corpus, split)?;
    check_compatible(&model, &data, corpus)?;
    let batch = run_batch(&model, &data, config, workers)?;

    let adv_dir = out.join("adversarial");
    let theta_dir = out.join("theta");
    mkdir(&adv_dir)?;
    mkdir(&theta_dir)?;
    let reports_path = out.join("reports.jsonl");
    let mut reports = create(&reports_path)?;
    for item in &batch.items {
        let r = &item.report;
        let png = r.adversarial.as_ref().map(|img| -> Result<String, CliError> {
            let rel = format!("adversarial/{}.png", item.id);
            write_png(img, &out.join(&rel))?;
            Ok(rel)
        });
        let png = png.transpose()?;
        let mut line = to_value(item);
        line["adversarial_png"] = json!(png);
        writeln!(reports, "{line}")?;
        write_json(
            &theta_dir.join(format!("{}.json", item.id)),
            &ThetaRecord {
                id: &item.id,
                final_theta: r.final_theta.theta(),
                adversarial_theta: r.adversarial_theta.as_ref().map(|p| p.theta()),
            },
        )?;
    }
    reports.flush()?;

    let csv_path = out.join("summary.csv");
    write_batch_summary_csv(&batch.summary, create(&csv_path)?)?;
    let skipped: Vec<&str> = batch.skipped.iter().map(|&i| data[i].id.as_str()).collect();
    let summary_path = out.join("summary.json");
    write_json(
        &summary_path,
        &json!({
            "proxy_note": PROXY_NOTE,
            "range_mode": config.use_range_constraint.then_some(RANGE_MODE),
            "config": config,
            "summary": batch.summary,
            "skipped_misclassified": skipped,
        }),
    )?;
    let s = &batch.summary;
    eprintln!(
        "attacked {} of {} images, {} successes ({})",
        s.attacked,
        s.total,
        s.successes,
        s.success_rate.map(|r| format!("{:.4}", r)).unwrap_or_else(|| "0/0".into())
    );
    for p in [&adv_dir, &theta_dir, &reports_path, &csv_path, &summary_path] {
        rec.output(p);
    }
    let echo = json!({ "attack": config, "workers": workers, "split": format!("{split:?}").to_lowercase() });
    rec.finish(echo, Some(config.seed), &out.join("run_manifest.json"))
}

pub fn eval_corpus(
    model_path: &Path,
    corpus: &Path,
    split: Split,
    corrupted: Option<Option<Vec<f64>>>,
    out: &Path,
) -> Result<(), CliError> {
    let mut rec = Recorder::start("eval");
    rec.input(model_path);
    rec.input(corpus);
    let model = load(model_path)?;
    let clean = load_split(corpus, split)?;
    check_compatible(&model, &clean, corpus)?;
    let levels = corrupted.map(|l| l.unwrap_or_else(|| DEFAULT_CORRUPTION_LEVELS.to_vec()));
    let data = match &levels {
        Some(levels) => corrupt_dataset(&clean, levels)?,
        None => clean,
    };
    let acc = accuracy(&model, &data)?;
    eprintln!("accuracy {acc:.4} on {} images", data.len());
    write_json(
        out,
        &json!({ "accuracy": acc, "images": data.len(), "corrupted": levels.is_some(), "levels": levels }),
    )?;
    rec.output(out);
    let echo = json!({ "split": format!("{split:?}").to_lowercase(), "levels": levels });
    rec.finish(echo, None, &beside(out, "run.json"))
}

/// Re-score every adversarial PNG written by `attack` and compare with the
/// recorded post-attack prediction.
pub fn eval_attack_dir(model_path: &Path, dir: &Path, out: &Path) -> Result<(), CliError> {
    let mut rec = Recorder::start("eval");
    rec.input(model_path);
    rec.input(dir);
    let model = load(model_path)?;
    let reports_path = dir.join("reports.jsonl");
    let text = std::fs::read_to_string(&reports_path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", reports_path.display())))?;
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| CliError::runtime(format!("{}:{}: {e}", reports_path.display(), n + 1)))?;
        let Some(rel) = v["adversarial_png"].as_str() else { continue };
        let recorded = v["pred_after"]
            .as_u64()
            .ok_or_else(|| CliError::runtime(format!("{}:{}: missing pred_after", reports_path.display(), n + 1)))?;
        let img = read_image(&dir.join(rel))?;
        let pred = model.predict(&img)?;
        checked += 1;
        if pred as u64 != recorded {
            mismatches.push(json!({ "id": v["id"], "recorded": recorded, "rescored": pred }));
        }
    }
    eprintln!("re-scored {checked} adversarial images, {} mismatches", mismatches.len());
    write_json(
        out,
        &json!({
            "checked": checked,
            "reproduced": checked - mismatches.len(),
            "all_reproduced": mismatches.is_empty(),
            "mismatches": mismatches,
        }),
    )?;
    rec.output(out);
    rec.finish(json!({ "attack_dir": dir }), None, &beside(out, "run.json"))
}

fn model_names(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string())
        .collect();
    let unique = stems.iter().collect::<std::collections::BTreeSet<_>>().len() == stems.len();
    if unique {
        stems
    } else {
        paths.iter().map(|p| p.display().to_string()).collect()
    }
}

pub fn transfer(
    model_paths: &[PathBuf],
    corpus: &Path,
    split: Split,
    config: &AttackConfig,
    workers: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut rec = Recorder::start("transfer");
    let data = load_split(corpus, split)?;
    rec.input(corpus);
    let mut models = Vec::new();
    for (name, path) in model_names(model_paths).into_iter().zip(model_paths) {
        rec.input(path);
        let m = load(path)?;
        check_compatible(&m, &data, corpus)?;
        models.push((name, m));
    }
    let matrix = transfer_matrix(&models, &data, config, workers)?;
    mkdir(out)?;
    let csv_path = out.join("matrix.csv");
    matrix.write_csv(create(&csv_path)?)?;
    let json_path = out.join("matrix.json");
    write_json(&json_path, &json!({ "proxy_note": PROXY_NOTE, "config": config, "matrix": matrix }))?;
    for (s, name) in matrix.models.iter().enumerate() {
        let row: Vec<String> = (0..matrix.models.len())
            .map(|t| matrix.rate(s, t).map(|r| format!("{r:.3}")).unwrap_or_else(|| "-".into()))
            .collect();
        eprintln!("{name}: {}", row.join(" "));
    }
    rec.output(&csv_path);
    rec.output(&json_path);
    let echo = json!({ "attack": config, "workers": workers, "models": matrix.models });
    rec.finish(echo, Some(config.seed), &out.join("run_manifest.json"))
}

pub fn ablation(
    model_path: &Path,
    corpus: &Path,
    split: Split,
    config: &AttackConfig,
    workers: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut rec = Recorder::start("ablation");
    rec.input(model_path);
    rec.input(corpus);
    let model = load(model_path)?;
    let data = load_split(corpus, split)?;
    check_compatible(&model, &data, corpus)?;
    let rows = run_ablation(&model, &data, config, workers)?;
    mkdir(out)?;
    let csv_path = out.join("ablation.csv");
    write_ablation_csv(&rows, create(&csv_path)?)?;
    let json_path = out.join("ablation.json");
    write_json(&json_path, &json!({ "proxy_note": PROXY_NOTE, "base_config": config, "rows": rows }))?;
    for r in &rows {
        eprintln!(
            "{}: success {}",
            r.variant,
            r.success_rate.map(|v| format!("{v:.4}")).unwrap_or_else(|| "0/0".into())
        );
    }
    rec.output(&csv_path);
    rec.output(&json_path);
    let echo = json!({ "attack": config, "workers": workers });
    rec.finish(echo, Some(config.seed), &out.join("run_manifest.json"))
}

pub fn finetune(
    model_path: &Path,
    corpus: &Path,
    config: &AttackConfig,
    workers: usize,
    train: &TrainConfig,
    out: &Path,
) -> Result<(), CliError> {
    let mut rec = Recorder::start("finetune");
    rec.input(model_path);
    rec.input(corpus);
    let model = load(model_path)?;
    let train_set = load_split(corpus, Split::Train)?;
    check_compatible(&model, &train_set, corpus)?;

    // even positions are attacked, odd positions stay clean: a 1:1 mix
    let to_attack: Vec<LabeledImage> = train_set.iter().step_by(2).cloned().collect();
    let batch = run_batch(&model, &to_attack, config, workers)?;
    let mut mix: Vec<LabeledImage> = train_set.iter().skip(1).step_by(2).cloned().collect();
    let clean_count = mix.len();
    mix.extend(batch_outputs(&batch));
    let tuned = fine_tune(&model, &mix, train)?.model;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    save_model(&tuned, out)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("clean_in_mix", json!(clean_count));
    metrics.insert("adversarial_in_mix", json!(mix.len() - clean_count));
    metrics.insert("attack_success_rate", json!(batch.summary.success_rate));
    if has_splits(corpus) && corpus.join("test").is_dir() {
        let test = load_split(corpus, Split::Test)?;
        check_compatible(&model, &test, corpus)?;
        let corrupted = corrupt_dataset(&test, &DEFAULT_CORRUPTION_LEVELS)?;
        let (cb, ca) = (accuracy(&model, &corrupted)?, accuracy(&tuned, &corrupted)?);
        metrics.insert("clean_test_before", json!(accuracy(&model, &test)?));
        metrics.insert("clean_test_after", json!(accuracy(&tuned, &test)?));
        metrics.insert("corrupted_test_before", json!(cb));
        metrics.insert("corrupted_test_after", json!(ca));
        metrics.insert("corrupted_delta", json!(ca - cb));
        metrics.insert("levels", json!(DEFAULT_CORRUPTION_LEVELS));
        eprintln!("corrupted-test accuracy {cb:.4} -> {ca:.4}");
    }
    let metrics_path = beside(out, "metrics.json");
    write_json(&metrics_path, &metrics)?;
    rec.output(out);
    rec.output(&ala_core::model::sidecar_path(out));
    rec.output(&metrics_path);
    let echo = json!({ "attack": config, "workers": workers, "train": train });
    rec.finish(echo, Some(config.seed), &beside(out, "run.json"))
}

pub fn corrupt(corpus: &Path, split: Split, levels: &[f64], out: &Path) -> Result<(), CliError> {
    let mut rec = Recorder::start("corrupt");
    rec.input(corpus);
    let data = load_split(corpus, split)?;
    let corrupted = corrupt_dataset(&data, levels)?;
    let checksums = write_split(out, &corrupted)?;
    let sums_path = out.join("checksums.json");
    write_json(&sums_path, &checksums)?;
    eprintln!("wrote {} corrupted images to {}", corrupted.len(), out.display());
    rec.output(out);
    rec.output(&sums_path);
    let echo = json!({ "split": format!("{split:?}").to_lowercase(), "levels": levels });
    rec.finish(echo, None, &out.join("run_manifest.json"))
}
