//! The five subcommands. Each returns a one-paragraph summary for stdout.

use std::fs;
use std::path::Path;

use gidnet_core::data::synth::synth_write;
use gidnet_core::data::{load_dataset, Dataset};
use gidnet_core::eval::{evaluate, ErrorType, ImageTriplet};
use gidnet_core::model::{
    load_checkpoint, predict_image, prepare_image, save_checkpoint, train, Checkpoint, ImagePrediction, ModelConfig,
    ModelParams,
};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::output::{
    create_dir, file_stem, ground_truth, loss_csv, parse_predictions, pgm, resolve_predictions, write_json,
    PredictionRecord,
};
use crate::{CliError, Command};

pub fn dispatch(cmd: &Command) -> Result<String, CliError> {
    match cmd {
        Command::SynthGen(c) => synth_gen(&c.resolve()?),
        Command::Train(c) => train_cmd(&c.resolve()?),
        Command::Eval(c) => eval_cmd(&c.resolve()?),
        Command::Diagnose(a) => diagnose_cmd(&a.common.resolve()?, &a.predictions),
        Command::Infer(a) => infer_cmd(&a.common.resolve()?, a.export_attention.as_deref()),
    }
}

pub fn synth_gen(cfg: &RunConfig) -> Result<String, CliError> {
    create_dir(&cfg.out)?;
    let test_seed = cfg.seed.wrapping_add(1);
    let train = synth_write(&cfg.synth_config(cfg.train_samples, "img"), cfg.seed, cfg.out.join("train.json"))?;
    let test = synth_write(&cfg.synth_config(cfg.test_samples, "test"), test_seed, cfg.out.join("test.json"))?;
    let verbs: Vec<&str> = train.verbs.iter().map(|v| v.name.as_str()).collect();
    let manifest = json!({
        "run_config": cfg.echo(),
        "verbs": verbs,
        "train": {"file": "train.json", "seed": cfg.seed, "samples": train.images.len()},
        "test": {"file": "test.json", "seed": test_seed, "samples": test.images.len()},
    });
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    Ok(format!(
        "wrote {} training and {} test images ({} verbs: {}) to {}",
        train.images.len(),
        test.images.len(),
        verbs.len(),
        verbs.join(", "),
        cfg.out.display()
    ))
}

/// Load the configured dataset and check it against the model dimensions.
fn load_checked(cfg: &RunConfig, model: &ModelConfig) -> Result<Dataset, CliError> {
    let ds = load_dataset(cfg.dataset_path()?)?;
    if ds.verbs.len() != model.num_verbs {
        return Err(CliError::Validation(format!(
            "input error: dataset has {} verbs, the model has {}",
            ds.verbs.len(),
            model.num_verbs
        )));
    }
    if let Some(im) = ds
        .images
        .iter()
        .find(|im| im.width != model.image_size || im.height != model.image_size)
    {
        return Err(CliError::Validation(format!(
            "input error: image `{}` is {}x{}, the model expects {}x{}",
            im.id, im.width, im.height, model.image_size, model.image_size
        )));
    }
    Ok(ds)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let model = cfg.model_config()?;
    let ds = load_checked(cfg, &model)?;
    let mut params = ModelParams::init(&model, cfg.seed)?;
    let mut images = Vec::with_capacity(ds.images.len());
    for im in &ds.images {
        if let Some(p) = prepare_image(im, &ds.verbs)? {
            images.push(p);
        }
    }
    let records = train(&mut params, &model, &images, &cfg.train_config(), |_| {})?;

    create_dir(&cfg.out)?;
    let ckpt_path = cfg.checkpoint_path();
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let ckpt = Checkpoint {
        config: model,
        params,
        run_config: cfg.echo(),
    };
    save_checkpoint(&ckpt_path, &ckpt)?;
    let log = cfg.out.join("loss.csv");
    fs::write(&log, loss_csv(&records, &cfg.echo())).map_err(|e| CliError::io(&log, e))?;

    let last = match records.last() {
        Some(r) => format!("; final total loss {:.6}", r.total),
        None => String::new(),
    };
    Ok(format!(
        "trained {} iterations on {} images{last}; checkpoint {}, loss log {}",
        records.len(),
        images.len(),
        ckpt_path.display(),
        log.display()
    ))
}

/// Every field where the checkpoint's model disagrees with the run
/// configuration.
fn config_mismatches(run: &ModelConfig, ckpt: &ModelConfig) -> Vec<String> {
    let (Value::Object(a), Value::Object(b)) = (
        serde_json::to_value(run).expect("model config serializes"),
        serde_json::to_value(ckpt).expect("model config serializes"),
    ) else {
        unreachable!("model config serializes to an object")
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: checkpoint has {}, run config has {v}", b.get(k).unwrap_or(&Value::Null)))
        .collect()
}

fn predict_all(ds: &Dataset, ckpt: &Checkpoint) -> Result<Vec<(String, ImagePrediction)>, CliError> {
    ds.images
        .iter()
        .map(|im| Ok((im.id.clone(), predict_image(im, &ds.verbs, &ckpt.params, &ckpt.config)?)))
        .collect()
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let model = cfg.model_config()?;
    let ckpt_path = cfg.checkpoint_path();
    let ckpt = load_checkpoint(&ckpt_path)?;
    let diff = config_mismatches(&model, &ckpt.config);
    if !diff.is_empty() {
        return Err(CliError::Validation(format!(
            "checkpoint error: {} does not match the run configuration ({})",
            ckpt_path.display(),
            diff.join("; ")
        )));
    }
    let ds = load_checked(cfg, &model)?;
    let preds = predict_all(&ds, &ckpt)?;
    let tagged: Vec<ImageTriplet> = preds
        .iter()
        .flat_map(|(id, p)| {
            p.triplets.iter().map(|t| ImageTriplet {
                image_id: id.clone(),
                triplet: t.clone(),
            })
        })
        .collect();
    let (report, _) = evaluate(&tagged, &ground_truth(&ds), &ds.verbs)?;

    create_dir(&cfg.out)?;
    let records: Vec<PredictionRecord> = tagged
        .iter()
        .map(|t| PredictionRecord::new(&t.image_id, &t.triplet, &ds.verbs))
        .collect();
    write_json(
        &cfg.out.join("eval.json"),
        &json!({"run_config": cfg.echo(), "report": report}),
    )?;
    write_json(
        &cfg.out.join("predictions.json"),
        &json!({"run_config": cfg.echo(), "predictions": records}),
    )?;
    let per_verb: Vec<String> = report.per_verb.iter().map(|v| format!("{} {:.4}", v.verb, v.ap)).collect();
    Ok(format!(
        "mAP {:.4} ({}); {} predictions, {} true positives, {} false positives",
        report.map,
        per_verb.join(", "),
        report.num_predictions,
        report.num_tp,
        report.num_fp
    ))
}

pub fn diagnose_cmd(cfg: &RunConfig, predictions: &Path) -> Result<String, CliError> {
    let ds = load_dataset(cfg.dataset_path()?)?;
    let text = fs::read_to_string(predictions).map_err(|e| CliError::io(predictions, e))?;
    let records = parse_predictions(&text, predictions)?;
    let preds = resolve_predictions(&records, &ds)?;
    let (report, assessed) = evaluate(&preds, &ground_truth(&ds), &ds.verbs)?;
    let fps: Vec<Value> = assessed
        .iter()
        .filter_map(|a| {
            a.error.map(|e| {
                let r = &records[a.index];
                json!({
                    "index": a.index,
                    "image_id": r.image_id,
                    "verb": r.verb,
                    "score": r.score,
                    "error": e.as_str(),
                })
            })
        })
        .collect();
    create_dir(&cfg.out)?;
    write_json(
        &cfg.out.join("diagnosis.json"),
        &json!({
            "run_config": cfg.echo(),
            "predictions": predictions.to_string_lossy(),
            "num_predictions": report.num_predictions,
            "num_fp": report.num_fp,
            "errors": report.errors,
            "false_positives": fps,
        }),
    )?;
    let counts: Vec<String> = ErrorType::ALL
        .iter()
        .map(|&t| format!("{} {}", t.as_str(), report.errors.get(t)))
        .collect();
    Ok(format!(
        "{} false positives of {} predictions: {}",
        report.num_fp,
        report.num_predictions,
        counts.join(", ")
    ))
}

pub fn infer_cmd(cfg: &RunConfig, export: Option<&Path>) -> Result<String, CliError> {
    let ckpt = load_checkpoint(cfg.checkpoint_path())?;
    let ds = load_checked(cfg, &ckpt.config)?;
    let preds = predict_all(&ds, &ckpt)?;
    let records: Vec<PredictionRecord> = preds
        .iter()
        .flat_map(|(id, p)| {
            p.triplets
                .iter()
                .filter(|t| t.score >= cfg.threshold)
                .map(|t| PredictionRecord::new(id, t, &ds.verbs))
        })
        .collect();
    create_dir(&cfg.out)?;
    let out = cfg.out.join("triplets.json");
    write_json(
        &out,
        &json!({"run_config": cfg.echo(), "threshold": cfg.threshold, "predictions": records}),
    )?;
    let mut maps = 0;
    if let Some(dir) = export {
        create_dir(dir)?;
        for (id, p) in &preds {
            maps += export_attention(dir, id, p, cfg)?;
        }
    }
    let exported = match export {
        Some(dir) => format!("; {maps} attention maps in {}", dir.display()),
        None => String::new(),
    };
    Ok(format!(
        "{} triplets at score >= {} from {} images written to {}{exported}",
        records.len(),
        cfg.threshold,
        preds.len(),
        out.display()
    ))
}

/// Write both stages of every attention record of one image as PGM, plus a
/// sidecar with the raw weights. Returns the number of PGM files.
fn export_attention(dir: &Path, id: &str, p: &ImagePrediction, cfg: &RunConfig) -> Result<usize, CliError> {
    let (h, w) = p.map_size;
    let stem = file_stem(id);
    let mut entries = Vec::new();
    for (k, a) in p.attention.iter().enumerate() {
        let mut files = Vec::new();
        for (stage, weights) in [("stage1", &a.stage1), ("stage2", &a.stage2)] {
            let name = format!("{stem}_{}{k}_{stage}.pgm", a.role);
            let path = dir.join(&name);
            fs::write(&path, pgm(weights, w, h)).map_err(|e| CliError::io(&path, e))?;
            files.push(name);
        }
        entries.push(json!({
            "role": a.role,
            "bbox": a.bbox,
            "stage1_file": files[0],
            "stage2_file": files[1],
            "stage1_sum": a.stage1.iter().sum::<f64>(),
            "stage2_sum": a.stage2.iter().sum::<f64>(),
            "stage1": a.stage1,
            "stage2": a.stage2,
        }));
    }
    write_json(
        &dir.join(format!("{stem}_attention.json")),
        &json!({"run_config": cfg.echo(), "image_id": id, "height": h, "width": w, "maps": entries}),
    )?;
    Ok(2 * p.attention.len())
}
