//! One PASS/FAIL line per acceptance criterion. Exits non-zero when any
//! criterion fails.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gidnet_core::data::synth::{synth_generate, SynthConfig};
use gidnet_core::data::{load_dataset, BBox, HoiTriplet};
use gidnet_core::eval::{diagnose_errors, evaluate, role_map, ErrorType, ImageTriplet};
use gidnet_core::gid::{gid_forward_tensors, GidMode, GidParams};
use gidnet_core::gradcheck::check_parameters;
use gidnet_core::model::{
    bce_loss, forward_image, fuse_scores, load_checkpoint, overall_loss, prepare_image, train, ModelConfig,
    ModelParams, PreparedImage, TrainConfig,
};
use gidnet_core::nn::Parameters;
use gidnet_core::{Result, Tape, Tensor, Var};
use gidnet_validation::{Outcome, Report};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const BCE_DRAWS: usize = 10_000;
const BCE_TOL: f64 = 1e-9;
const SOFTMAX_TOL: f64 = 1e-10;
const ATTENTION_INPUTS: usize = 100;
const ORACLE_CASES: usize = 500;
const OVERFIT_LOSS: f64 = 0.05;
const OVERFIT_SECONDS: f64 = 300.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_ITERATIONS: usize = 2000;

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["gidnet"];
    full.extend_from_slice(args);
    let code = gidnet_cli::run(full, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

fn cli_ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "gidnet {args:?} failed: {err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Numeric rows of a loss log and their count.
fn loss_log(path: &Path) -> (Vec<Vec<f64>>, usize) {
    let text = fs::read_to_string(path).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("iteration"))
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    let n = rows.len();
    (rows, n)
}

fn full_loss<'t>(tape: &'t Tape, p: &ModelParams, cfg: &ModelConfig, img: &PreparedImage) -> Result<Var<'t>> {
    let out = forward_image(tape, &img.image, &img.proposals, p, cfg)?;
    let lh = out.human.map(|x| bce_loss(x, &img.labels.human)).transpose()?;
    let lo = match (out.object, &img.labels.object) {
        (Some(x), Some(z)) => Some(bce_loss(x, z)?),
        _ => None,
    };
    let li = bce_loss(out.interaction, &img.labels.interaction)?;
    overall_loss(lh, lo, li)
}

fn gradient_integrity() -> Outcome {
    let cfg = ModelConfig::new(3, 64);
    let ds = synth_generate(&SynthConfig { samples: 6, ..SynthConfig::default() }, 21).unwrap();
    let imgs: Vec<PreparedImage> = ds.images.iter().filter_map(|r| prepare_image(r, &ds.verbs).unwrap()).collect();
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    // a few steps move the zero-initialised biases off the relu kinks
    let tc = TrainConfig { iterations: 6, seed: 1, ..TrainConfig::default() };
    train(&mut params, &cfg, &imgs, &tc, |_| {}).unwrap();
    let img = imgs.iter().find(|i| i.labels.object.is_some()).expect("an image with an object").clone();

    let start = Instant::now();
    let checks = check_parameters(&params, |tape, q| full_loss(tape, q, &cfg, &img), GRAD_STEP, 8, 5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("parameter groups");
    let unchecked: Vec<&str> = checks.iter().filter(|c| c.checked == 0).map(|c| c.name.as_str()).collect();
    let checked: usize = checks.iter().map(|c| c.checked).sum();
    let kinked: usize = checks.iter().map(|c| c.kinked).sum();
    let pass = unchecked.is_empty() && worst.rel_error < GRAD_TOL && secs < GRAD_SECONDS;
    Outcome::new(
        pass,
        format!(
            "{} groups, {checked} entries compared ({kinked} kink crossings skipped), worst {} at {:.2e} (< {GRAD_TOL:e}), {secs:.1}s (< {GRAD_SECONDS}s){}",
            checks.len(),
            worst.name,
            worst.rel_error,
            if unchecked.is_empty() { String::new() } else { format!(", unchecked: {unchecked:?}") }
        ),
    )
}

fn naive_bce(x: f64, z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    -(z * s.ln() + (1.0 - z) * (1.0 - s).ln())
}

fn stable_bce(x: f64, z: f64) -> (f64, f64) {
    let tape = Tape::new();
    let xv = tape.variable(Tensor::new([1, 1], vec![x]).unwrap());
    let l = bce_loss(xv, &Tensor::new([1, 1], vec![z]).unwrap()).unwrap();
    let value = l.item().unwrap();
    let grad = tape.backward(l).unwrap().wrt(xv).unwrap()[0];
    (value, grad)
}

fn bce_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..BCE_DRAWS {
        let x = rng.gen_range(-10.0..=10.0);
        let z = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        worst = worst.max((stable_bce(x, z).0 - naive_bce(x, z)).abs());
    }
    let mut extremes = Vec::new();
    let mut finite = true;
    for x in [-1000.0, 1000.0] {
        for z in [0.0, 1.0] {
            let (v, g) = stable_bce(x, z);
            finite &= v.is_finite() && g.is_finite();
            extremes.push(format!("L({x},{z})={v}"));
        }
    }
    Outcome::new(
        worst < BCE_TOL && finite,
        format!(
            "max |stable - naive| over {BCE_DRAWS} draws {worst:.2e} (< {BCE_TOL:e}); {}; all finite: {finite}",
            extremes.join(", ")
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (c, c5, e) = (6, 5, 4);
    let (mut sum_err, mut negative, mut block_drift, mut softmax_drift) = (0.0f64, false, 0.0f64, 0.0f64);
    for _ in 0..ATTENTION_INPUTS {
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let scale = rng.gen_range(0.5..3.0);
        let params = GidParams::init("gid", c, c5, e, &mut rng);
        let map = random_tensor(&mut rng, vec![c, h, w], scale);
        let fg = random_tensor(&mut rng, vec![c5], scale);
        let fi = random_tensor(&mut rng, vec![c5], scale);
        let (reasoned, stage1, w1, w2) = gid_forward_tensors(&map, &fg, &fi, &params, GidMode::Both).unwrap().unwrap();
        for wts in [&w1, &w2] {
            sum_err = sum_err.max((wts.data().iter().sum::<f64>() - 1.0).abs());
            negative |= wts.data().iter().any(|&v| v < 0.0);
        }

        // a φ-bias shift adds the same amount to every logit of a stage
        let mut shifted = params.clone();
        for b in [&mut shifted.global.w_phi.bias, &mut shifted.instance.w_phi.bias] {
            let shift = random_tensor(&mut rng, b.value.shape().to_vec(), 5.0);
            for (x, s) in b.value.data_mut().iter_mut().zip(shift.data()) {
                *x += s;
            }
        }
        let (r2, s2, w1b, w2b) = gid_forward_tensors(&map, &fg, &fi, &shifted, GidMode::Both).unwrap().unwrap();
        for (a, b) in [(&reasoned, &r2), (&stage1, &s2), (&w1, &w1b), (&w2, &w2b)] {
            block_drift = block_drift.max(max_diff(a, b));
        }

        let n = rng.gen_range(1..=30);
        let logits = random_tensor(&mut rng, vec![1, n], 10.0);
        let k = rng.gen_range(-50.0..50.0);
        let tape = Tape::inference();
        let base = tape.constant(logits.clone()).softmax(1).unwrap().value();
        let mut shifted_logits = logits.clone();
        shifted_logits.data_mut().iter_mut().for_each(|v| *v += k);
        let moved = tape.constant(shifted_logits).softmax(1).unwrap().value();
        softmax_drift = softmax_drift.max(max_diff(&base, &moved));
    }
    Outcome::new(
        sum_err <= SOFTMAX_TOL && !negative && block_drift < SOFTMAX_TOL && softmax_drift < SOFTMAX_TOL,
        format!(
            "{ATTENTION_INPUTS} inputs: max |sum - 1| {sum_err:.2e}, negative weights: {negative}, logit-shift drift block {block_drift:.2e} softmax {softmax_drift:.2e} (all < {SOFTMAX_TOL:e})"
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let verbs = oracle::oracle_verbs();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    let mut first = None;
    for case in 0..ORACLE_CASES {
        let (preds, gts) = oracle::random_case(&mut rng);
        let (report, assessed) = evaluate(&preds, &gts, &verbs).unwrap();
        let o = oracle::brute_force(&preds, &gts, verbs.len());
        let aps_agree = o
            .per_verb
            .iter()
            .zip(&report.per_verb)
            .all(|(a, r)| a.unwrap_or(0.0) == r.ap);
        let tp: Vec<bool> = assessed.iter().map(|a| a.error.is_none()).collect();
        let map = role_map(&preds, &gts, &verbs).unwrap().map;
        if !(aps_agree && tp == o.tp && map == o.map) {
            mismatches += 1;
            first.get_or_insert(case);
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("{ORACLE_CASES} random corpora (<= 5 predictions, <= 3 ground truths per verb), {mismatches} mismatches{}", first.map_or(String::new(), |c| format!(", first at case {c}"))),
    )
}

fn overfit_run(dir: &Path) -> Outcome {
    let start = Instant::now();
    let d = p(dir);
    cli_ok(&["synth-gen", "--seed", "7", "--out", d]);
    let train_json = dir.join("train.json");
    cli_ok(&["train", "--dataset", p(&train_json), "--out", d, "--seed", "7", "--iterations", "500"]);
    cli_ok(&["eval", "--dataset", p(&train_json), "--out", d, "--seed", "7"]);
    let secs = start.elapsed().as_secs_f64();
    let (rows, n) = loss_log(&dir.join("loss.csv"));
    let last = rows.last().expect("loss rows")[4];
    let epoch = 32.min(n);
    let epoch_mean = rows[n - epoch..].iter().map(|r| r[4]).sum::<f64>() / epoch as f64;
    let map = read_json(&dir.join("eval.json"))["report"]["mAP"].as_f64().unwrap();
    Outcome::new(
        last < OVERFIT_LOSS && map == 1.0 && secs < OVERFIT_SECONDS,
        format!(
            "final total loss {last:.4} (< {OVERFIT_LOSS}; last-epoch mean {epoch_mean:.4}), train mAP {map:.4} (= 1.0), {secs:.1}s (< {OVERFIT_SECONDS}s)"
        ),
    )
}

fn ablation_ordering(dir: &Path) -> Outcome {
    let cfg = dir.join("ablation.cfg");
    fs::write(
        &cfg,
        "variant = \"contextual\"\nnum_verbs = 4\ntrain_samples = 200\ntest_samples = 200\n",
    )
    .unwrap();
    let modes = ["both", "global_only", "instance_only", "off"];
    let mut sums = [0.0; 4];
    for seed in ABLATION_SEEDS {
        let data = dir.join(format!("seed{seed}"));
        let s = seed.to_string();
        cli_ok(&["synth-gen", "--config", p(&cfg), "--seed", &s, "--out", p(&data)]);
        for (k, mode) in modes.iter().enumerate() {
            let out = data.join(mode);
            let iters = ABLATION_ITERATIONS.to_string();
            let common = ["--config", p(&cfg), "--seed", &s, "--gid-mode", mode, "--out", p(&out)];
            let train_json = data.join("train.json");
            let mut args = vec!["train", "--dataset", p(&train_json), "--iterations", &iters];
            args.extend_from_slice(&common);
            cli_ok(&args);
            let test_json = data.join("test.json");
            let mut args = vec!["eval", "--dataset", p(&test_json)];
            args.extend_from_slice(&common);
            cli_ok(&args);
            sums[k] += read_json(&out.join("eval.json"))["report"]["mAP"].as_f64().unwrap();
        }
    }
    let mean = sums.map(|s| s / ABLATION_SEEDS.len() as f64);
    let single = mean[1].max(mean[2]);
    let listing: Vec<String> = modes.iter().zip(mean).map(|(m, v)| format!("{m} {v:.4}")).collect();
    Outcome::new(
        mean[0] >= single && single >= mean[3],
        format!(
            "mean test mAP over seeds {ABLATION_SEEDS:?} after {ABLATION_ITERATIONS} iterations: {}; need both >= max(global_only, instance_only) >= off",
            listing.join(", ")
        ),
    )
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn fusion_rule() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |name: &str, got: Vec<f64>, want: Vec<f64>| {
        let ok = got == want;
        pass &= ok;
        notes.push(format!("{name} {}", if ok { "exact" } else { "WRONG" }));
    };
    check("annihilator", fuse_scores(Some(&[0.7, 1.0]), Some(&[0.9, 1.0]), &[0.0, 0.0]), vec![0.0, 0.0]);
    check("identity", fuse_scores(Some(&[0.25, 1.0]), Some(&[0.5, 1.0]), &[0.5, 1.0]), vec![0.375, 2.0]);
    check("object-less", fuse_scores(Some(&[0.6, 0.125]), None, &[0.5, 0.75]), vec![0.6 * 0.5, 0.125 * 0.75]);

    let verbs = oracle::oracle_verbs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut variant_cases = 0;
    let mut broken = 0;
    for _ in 0..200 {
        let (preds, gts) = oracle::random_case(&mut rng);
        let base = evaluate(&preds, &gts, &verbs).unwrap().0;
        for c in [0.5, 2.0, 3.7, 1e-3, 1e3] {
            let scaled: Vec<ImageTriplet> = preds
                .iter()
                .map(|t| {
                    let mut t = t.clone();
                    t.triplet.score *= c;
                    t
                })
                .collect();
            let r = evaluate(&scaled, &gts, &verbs).unwrap().0;
            let same = r.per_verb.iter().zip(&base.per_verb).all(|(a, b)| a.ap == b.ap) && r.errors == base.errors;
            broken += !same as usize;
            variant_cases += 1;
        }
    }
    pass &= broken == 0;
    notes.push(format!("{variant_cases} rescaled corpora, {broken} with changed AP or error counts"));
    Outcome::new(pass, notes.join(", "))
}

fn diagnosis_fixture() -> Outcome {
    let verbs = oracle::oracle_verbs();
    let (ha, oa) = (bx(0.0, 0.0, 10.0, 20.0), bx(12.0, 0.0, 18.0, 6.0));
    let (hb, ob) = (bx(40.0, 30.0, 50.0, 50.0), bx(52.0, 30.0, 58.0, 36.0));
    let t = |h: BBox, o: BBox, verb: usize, score: f64| ImageTriplet {
        image_id: "scene".into(),
        triplet: HoiTriplet {
            human: h,
            object: Some(o),
            verb,
            score,
        },
    };
    let gts = vec![t(ha, oa, 0, 1.0), t(hb, ob, 0, 1.0)];
    let preds = vec![
        // right boxes, wrong verb
        t(ha, oa, 1, 0.9),
        // human IoU 0.3 with A
        t(bx(0.0, 0.0, 10.0, 6.0), oa, 0, 0.8),
        // object IoU 0.3 with A
        t(ha, bx(12.0, 0.0, 18.0, 1.8), 0, 0.7),
        // human of A, object of B
        t(ha, ob, 0, 0.6),
        // object far from every annotated object
        t(ha, bx(25.0, 55.0, 30.0, 60.0), 0, 0.5),
        // human on empty background
        t(bx(20.0, 40.0, 30.0, 60.0), oa, 0, 0.4),
    ];
    let types = diagnose_errors(&preds, &gts, &verbs).unwrap();
    let report = role_map(&preds, &gts, &verbs).unwrap();
    let counts: Vec<String> = ErrorType::ALL.iter().map(|&e| format!("{} {}", e, report.errors.get(e))).collect();
    let one_each = ErrorType::ALL.iter().all(|&e| report.errors.get(e) == 1);
    Outcome::new(
        one_each && types.len() == 6 && report.num_fp == 6,
        format!("{} false positives: {}", types.len(), counts.join(", ")),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let d = p(dir);
    cli_ok(&["synth-gen", "--seed", "3", "--out", d]);
    let train_json = dir.join("train.json");
    let run = || {
        cli_ok(&["train", "--dataset", p(&train_json), "--out", d, "--seed", "3", "--iterations", "60"]);
        (fs::read(dir.join("checkpoint.gidnet")).unwrap(), fs::read(dir.join("loss.csv")).unwrap())
    };
    let (ck1, log1) = run();
    let (ck2, log2) = run();
    let identical = ck1 == ck2 && log1 == log2;

    let ds = load_dataset(&train_json).unwrap();
    let cfg = ModelConfig::new(3, 64);
    let imgs: Vec<PreparedImage> = ds.images.iter().filter_map(|r| prepare_image(r, &ds.verbs).unwrap()).collect();
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    let tc = TrainConfig { iterations: 60, seed: 3, ..TrainConfig::default() };
    train(&mut params, &cfg, &imgs, &tc, |_| {}).unwrap();
    let loaded = load_checkpoint(dir.join("checkpoint.gidnet")).unwrap();
    let bits = |p: &ModelParams| {
        let mut v = Vec::new();
        p.visit(&mut |q| v.extend(q.value.data().iter().map(|x| x.to_bits())));
        v
    };
    let restored = bits(&loaded.params) == bits(&params) && loaded.config == cfg;
    let resaved = loaded.to_bytes().unwrap() == ck1;
    Outcome::new(
        identical && restored && resaved,
        format!(
            "repeat train byte-identical: {identical}; checkpoint restores in-process weights bit-exactly: {restored}; re-serialization identical: {resaved}"
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let sub = |name: &str| -> PathBuf {
        let d = tmp.path().join(name);
        fs::create_dir_all(&d).unwrap();
        d
    };
    let mut report = Report::default();
    report.run(1, "gradient integrity", gradient_integrity);
    report.run(2, "stable cross-entropy", bce_equivalence);
    report.run(3, "attention normalization", attention_normalization);
    report.run(4, "oracle mAP equivalence", oracle_equivalence);
    report.run(5, "overfit run", || overfit_run(&sub("overfit")));
    report.run(6, "ablation ordering", || ablation_ordering(&sub("ablation")));
    report.run(7, "fusion rule", fusion_rule);
    report.run(8, "diagnosis fixture", diagnosis_fixture);
    report.run(9, "determinism and persistence", || determinism(&sub("determinism")));
    println!("{}", report.summary());
    if !report.failed().is_empty() {
        std::process::exit(1);
    }
}
