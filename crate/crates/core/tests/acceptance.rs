//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails. Tolerances are fixed constants below.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{conv_direct, model_gradient_report, op_gradient_reports, uniform};
use psnet::data::{synth_generate, AugmentConfig, DatasetManifest, SynthConfig};
use psnet::density::{
    decode_dmap, encode_dmap, sum_pool_downsample, DensityMap, KernelMode, Point, PointSet,
};
use psnet::eval::{evaluate, mae, rmse, EvalReport};
use psnet::losses::{variance_loss, AttentionRecord, DEFAULT_EPSILON};
use psnet::model::{
    build_model, decode_checkpoint, encode_checkpoint, load_checkpoint, ModelConfig, PsnetModel, Stage, Variant,
};
use psnet::tensor::kernels::conv2d;
use psnet::train::{train, RunConfig};
use psnet::{ConvSpec, SeededRng, Tape, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const CONV_TOL: f64 = 1e-6;
const COUNT_REL_TOL: f64 = 1e-3;
const POOL_TOL: f64 = 1e-6;
const LM_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-4;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const MAE_RATIO: f64 = 0.5;

// Desk-scale training setup.
const TRAIN_IMAGES: usize = 200;
const TEST_IMAGES: usize = 50;
const IMAGE_SIZE: usize = 96;
const COUNTS: (usize, usize) = (5, 30);
const BASE_WIDTH: usize = 8;
const CROP: usize = 64;
const EPOCHS: usize = 50;
const BATCH: usize = 2;
const LR: f64 = 1e-4;
const GT_SIGMA: f64 = 4.0;
const LAMBDA: f64 = 0.01;
const RUN_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let reports = op_gradient_reports();
    let model = model_gradient_report(20, 0);
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.1.max_relative_error.total_cmp(&b.1.max_relative_error))
        .unwrap();
    let pass = reports.iter().all(|(_, r)| r.passes(GRAD_TOL)) && model.passes(GRAD_TOL) && elapsed < GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "{} ops, worst {} at {:.2e}; network (20 params) {:.2e}; {:.1}s",
            reports.len(),
            worst.0,
            worst.1.max_relative_error,
            model.max_relative_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn convolution_oracle() -> Outcome {
    let mut rng = SeededRng::new(31337);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c_in = rng.int_inclusive(1, 4);
        let c_out = rng.int_inclusive(1, 4);
        let (h, w) = (rng.int_inclusive(1, 7), rng.int_inclusive(1, 7));
        let k = rng.int_inclusive(1, 3);
        let dilation = rng.int_inclusive(1, 3);
        let reach = dilation * (k - 1) + 1;
        let padding = reach.saturating_sub(h.min(w)).div_ceil(2) + rng.int_inclusive(0, 1);
        let x = uniform(&[c_in, h, w], -1.0, 1.0, &mut rng);
        let wt = uniform(&[c_out, c_in, k, k], -1.0, 1.0, &mut rng);
        let b = uniform(&[c_out], -1.0, 1.0, &mut rng);
        let spec = ConvSpec {
            stride: 1,
            padding,
            dilation,
        };
        let fast = conv2d(&x, &wt, &b, spec).unwrap();
        let slow = conv_direct(&x, &wt, &b, 1, padding, dilation);
        if fast.shape() != slow.shape() {
            return outcome(false, format!("shape {:?} vs {:?}", fast.shape(), slow.shape()));
        }
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    outcome(worst < CONV_TOL, format!("50 configurations, max deviation {worst:.2e}"))
}

fn count_conservation() -> Outcome {
    let mut rng = SeededRng::new(4242);
    let mut worst_count: f64 = 0.0;
    let mut worst_pool: f64 = 0.0;
    for _ in 0..100 {
        let w = 8 * rng.int_inclusive(2, 12);
        let h = 8 * rng.int_inclusive(2, 12);
        let n = rng.int_inclusive(1, 40);
        let points = (0..n)
            .map(|_| Point::new(rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64)))
            .collect();
        let set = PointSet::new(points, w, h).unwrap();
        for mode in [KernelMode::Fixed { sigma: rng.uniform(1.0, 20.0) }, KernelMode::adaptive()] {
            let map = mode.density(&set).unwrap();
            let pooled = sum_pool_downsample(&map, 8).unwrap();
            let count = n as f64;
            worst_count = worst_count
                .max((map.count() - count).abs() / count)
                .max((pooled.count() - count).abs() / count);
            worst_pool = worst_pool.max((pooled.count() - map.count()).abs() / count);
        }
    }
    outcome(
        worst_count <= COUNT_REL_TOL && worst_pool <= POOL_TOL,
        format!("100 point sets, worst |sum−count|/count {worst_count:.2e}, pooling drift {worst_pool:.2e}"),
    )
}

fn variance_loss_cases() -> Outcome {
    let one = |groups: Vec<Vec<f64>>| variance_loss(&AttentionRecord::new(vec![vec![groups]]).unwrap(), DEFAULT_EPSILON).unwrap();
    let identical = one(vec![vec![0.2, 0.9, 0.4, 1.3]; 4]);
    let orthogonal = one(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let zeros = one(vec![vec![0.0; 6]; 4]);
    let mut rng = SeededRng::new(77);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let n = rng.int_inclusive(1, 3);
        let k = rng.int_inclusive(1, 3);
        let s = rng.int_inclusive(2, 5);
        let images = (0..n)
            .map(|_| {
                let m = rng.int_inclusive(1, 16);
                (0..k)
                    .map(|_| {
                        (0..s)
                            .map(|_| {
                                // sparse entries give near-orthogonal draws too
                                (0..m).map(|_| if rng.bernoulli(0.3) { 0.0 } else { rng.uniform(0.0, 1.0) }).collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let l = variance_loss(&AttentionRecord::new(images).unwrap(), DEFAULT_EPSILON).unwrap();
        lo = lo.min(l);
        hi = hi.max(l);
    }
    let pass = (identical - 1.0).abs() <= LM_TOL && orthogonal.abs() <= LM_TOL && zeros == 0.0 && lo >= 0.0 && hi <= 1.0;
    outcome(
        pass,
        format!("identical {identical:.7}, orthogonal {orthogonal:.1e}, zero {zeros}, 1000 random records in [{lo:.4}, {hi:.4}]"),
    )
}

fn shape_and_structure() -> Outcome {
    let model: PsnetModel<f32> = build_model(&ModelConfig::desk(BASE_WIDTH, Variant::psnet()), &mut SeededRng::new(0)).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(Tensor::full(&[3, 64, 64], 0.5f32));
    let out = model.forward(&mut tape, &bound, x).unwrap();
    let shape = tape.value(out.density).shape().to_vec();
    let s = model.structure();
    let layers = (s.conv_count(Stage::Backbone), s.pool_count(Stage::Backbone), s.conv_count(Stage::Head));
    let paths = |m: &PsnetModel<f32>| (0..4).map(|b| m.count_paths(0, b).unwrap()).collect::<Vec<_>>();
    let with = paths(&model);
    let plain: PsnetModel<f32> = build_model(&ModelConfig::desk(BASE_WIDTH, Variant::baseline()), &mut SeededRng::new(0)).unwrap();
    let without = paths(&plain);
    let pass = shape == [1, 8, 8] && layers == (10, 3, 4) && with == [1, 2, 3, 4] && without == [1, 1, 1, 1];
    outcome(
        pass,
        format!(
            "3×64×64 → {shape:?}; backbone {} convs / {} pools; head {} convs; paths {with:?} / {without:?}",
            layers.0, layers.1, layers.2
        ),
    )
}

struct Desk {
    train: DatasetManifest,
    test: DatasetManifest,
}

fn desk_data(dir: &Path) -> Desk {
    let synth = |n, seed| SynthConfig {
        n_images: n,
        image_size: IMAGE_SIZE,
        count_min: COUNTS.0,
        count_max: COUNTS.1,
        seed,
    };
    Desk {
        train: synth_generate(&dir.join("train"), &synth(TRAIN_IMAGES, 1)).unwrap(),
        test: synth_generate(&dir.join("test"), &synth(TEST_IMAGES, 2)).unwrap(),
    }
}

fn desk_run(variant: Variant, lambda: f64) -> RunConfig {
    RunConfig {
        model: ModelConfig::desk(BASE_WIDTH, variant),
        augment: AugmentConfig {
            crop_size: CROP,
            ..AugmentConfig::default()
        },
        lambda,
        lr: LR,
        batch_size: BATCH,
        epochs: EPOCHS,
        seed: RUN_SEED,
        gt_mode: KernelMode::Fixed { sigma: GT_SIGMA },
        ..RunConfig::default()
    }
}

struct Trained {
    initial: EvalReport,
    fin: EvalReport,
    elapsed: Duration,
}

fn train_and_evaluate(run: &RunConfig, desk: &Desk, out: &Path) -> Trained {
    let start = Instant::now();
    let outcome = train(run, &desk.train, out).unwrap();
    let elapsed = start.elapsed();
    let initial = evaluate(&load_checkpoint(&outcome.initial_checkpoint).unwrap(), &desk.test, run.epsilon).unwrap();
    let fin = evaluate(&outcome.model, &desk.test, run.epsilon).unwrap();
    Trained { initial, fin, elapsed }
}

fn prediction_spread(report: &EvalReport) -> f64 {
    let n = report.per_image.len() as f64;
    let mean = report.per_image.iter().map(|p| p.0).sum::<f64>() / n;
    (report.per_image.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn desk_training(psnet: &Trained) -> Outcome {
    let ratio = psnet.fin.mae / psnet.initial.mae;
    outcome(
        ratio < MAE_RATIO && psnet.elapsed <= TRAIN_BUDGET,
        format!(
            "PSNet λ={LAMBDA}: test MAE {:.3} → {:.3} (ratio {ratio:.3}), RMSE {:.3}, predicted count std {:.3}, {:.0}s",
            psnet.initial.mae,
            psnet.fin.mae,
            psnet.fin.rmse,
            prediction_spread(&psnet.fin),
            psnet.elapsed.as_secs_f64()
        ),
    )
}

fn directional_ablation(psnet: &Trained, psm: &Trained, fpm: &Trained, baseline: &Trained) -> Outcome {
    let lm = |t: &Trained| t.fin.mean_variance_loss;
    let pass = lm(psnet) < lm(psm) && lm(fpm) <= lm(baseline);
    outcome(
        pass,
        format!(
            "L_M (MAE): Baseline {:.4} ({:.2}), Baseline-FPM {:.4} ({:.2}), Baseline-PSM {:.4} ({:.2}), PSNet {:.4} ({:.2})",
            lm(baseline),
            baseline.fin.mae,
            lm(fpm),
            fpm.fin.mae,
            lm(psm),
            psm.fin.mae,
            lm(psnet),
            psnet.fin.mae
        ),
    )
}

fn metric_arithmetic() -> Outcome {
    let counts = [(10.0, 12.0), (20.0, 16.0)];
    let (m, r) = (mae(&counts), rmse(&counts));
    let mut rng = SeededRng::new(8);
    let mut dominated = true;
    for _ in 0..1000 {
        let n = rng.int_inclusive(1, 30);
        let c: Vec<(f64, f64)> = (0..n).map(|_| (rng.uniform(0.0, 500.0), rng.uniform(0.0, 500.0))).collect();
        dominated &= rmse(&c) >= mae(&c);
    }
    outcome(
        (m - 3.0).abs() <= METRIC_TOL && (r - 3.1623).abs() <= METRIC_TOL && dominated,
        format!("MAE {m:.4}, RMSE {r:.4}; RMSE ≥ MAE on 1000 random reports: {dominated}"),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let once = |tag: &str| {
        let root = dir.join(tag);
        let synth = |n, seed| SynthConfig {
            n_images: n,
            image_size: 32,
            count_min: 2,
            count_max: 8,
            seed,
        };
        let train_set = synth_generate(&root.join("train"), &synth(6, 11)).unwrap();
        let test_set = synth_generate(&root.join("test"), &synth(3, 12)).unwrap();
        let mut run = desk_run(Variant::psnet(), 0.01);
        run.model.base_width = 4;
        run.model.reduction_ratio = 8;
        run.augment.crop_size = 24;
        run.epochs = 2;
        let out = train(&run, &train_set, &root.join("run")).unwrap();
        let report = evaluate(&out.model, &test_set, run.epsilon).unwrap();
        (
            fs::read(out.checkpoint).unwrap(),
            serde_json::to_vec(&report).unwrap(),
            fs::read(root.join("train/manifest.json")).unwrap(),
        )
    };
    let (a, b) = (once("a"), once("b"));
    let runs_match = a == b;

    let model = decode_checkpoint(&a.0, Path::new("a")).unwrap();
    let checkpoint_round_trip = encode_checkpoint(&model) == a.0;
    let mut rng = SeededRng::new(3);
    let map = DensityMap::new(5, 7, (0..35).map(|_| rng.normal(0.0, 1.0) as f32).collect()).unwrap();
    let back = decode_dmap(&encode_dmap(&map), Path::new("m")).unwrap();
    let bits = |m: &DensityMap| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let dmap_round_trip = bits(&back) == bits(&map) && (back.height(), back.width()) == (5, 7);
    outcome(
        runs_match && checkpoint_round_trip && dmap_round_trip,
        format!(
            "two seeded runs identical: {runs_match}; checkpoint round trip: {checkpoint_round_trip}; DMAP round trip: {dmap_round_trip}"
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Option<Outcome>)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Option<Outcome>| {
        let tag = match &o {
            Some(o) if o.pass => "PASS",
            Some(_) => "FAIL",
            None => "N/A ",
        };
        let detail = o.as_ref().map_or("benchmark tables are not reproduced at desk scale; no target", |o| &o.detail);
        println!("[{tag}] criterion {id:>2} {name}: {detail}");
        results.push((id, name, o));
    };

    report(1, "gradient fidelity", Some(gradient_fidelity()));
    report(2, "convolution oracle", Some(convolution_oracle()));
    report(3, "count conservation", Some(count_conservation()));
    report(4, "variance loss cases", Some(variance_loss_cases()));
    report(5, "shape and structure", Some(shape_and_structure()));

    let desk = desk_data(dir.path());
    let psnet = train_and_evaluate(&desk_run(Variant::psnet(), LAMBDA), &desk, &dir.path().join("psnet"));
    report(6, "desk-scale training", Some(desk_training(&psnet)));
    let psm = train_and_evaluate(&desk_run(Variant::psnet(), 0.0), &desk, &dir.path().join("psm"));
    let fpm = train_and_evaluate(&desk_run(Variant::baseline_fpm(), 0.0), &desk, &dir.path().join("fpm"));
    let baseline = train_and_evaluate(&desk_run(Variant::baseline(), 0.0), &desk, &dir.path().join("baseline"));
    report(7, "directional ablation", Some(directional_ablation(&psnet, &psm, &fpm, &baseline)));

    report(8, "metric arithmetic", Some(metric_arithmetic()));
    report(9, "determinism and round trips", Some(determinism(dir.path())));
    report(10, "benchmark tables", None);

    let failed = results.iter().filter(|r| matches!(&r.2, Some(o) if !o.pass)).count();
    println!("{failed} criteria failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
