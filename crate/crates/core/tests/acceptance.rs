//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the target exits nonzero if any criterion fails. Runs without the libtest
//! harness so the lines are never captured.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{s, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsr::field::{trilinear_interpolate, voxel_center};
use voxsr::infer::cubic_super_resolve;
use voxsr::metrics::{psnr_paper_values, psnr_standard, psnr_standard_values, slicewise_means, ssim_global, ssim_slice};
use voxsr::nn::checkpoint::load_checkpoint_with_meta;
use voxsr::simulate::{cubic_downsample, extract_training_pairs, hr_side, PatchSpec};
use voxsr::train::{train, Sample, TrainOutcome, HISTORY_FILE};
use voxsr::volume::crop_pad;
use voxsr::{
    super_resolve, CoordinateBatch, EncoderConfig, EncoderVariant, FeatureGrid, ModelConfig, ScaleSampler, SrModel,
    SrRequest, TrainConfig, Volume,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: usize, title: &str, elapsed: Duration, o: &Outcome) {
    println!(
        "{} criterion {id} ({title}): {} [{:.1}s]",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
}

// Criterion 1 tolerances.
const TRILINEAR_GRIDS: usize = 100;
const TRILINEAR_QUERIES: usize = 1000;
const TRILINEAR_REL_TOL: f64 = 1e-6;
const TRILINEAR_ABS_FLOOR: f64 = 1e-12;
const TRILINEAR_BUDGET: Duration = Duration::from_secs(30);

fn trilinear_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for g in 0..TRILINEAR_GRIDS {
        let shape = [0, 1, 2].map(|_| rng.gen_range(4..=8usize));
        let c = [1, 2, 8][g % 3];
        let feats = Array4::from_shape_fn((shape[0], shape[1], shape[2], c), |_| rng.gen_range(-1.0..1.0f64));
        let coords: Vec<[f64; 3]> = (0..TRILINEAR_QUERIES)
            .map(|_| {
                [0, 1, 2].map(|a| {
                    let lo = voxel_center(0, shape[a]);
                    rng.gen_range(lo..=-lo)
                })
            })
            .collect();
        let grid = FeatureGrid::new(feats.clone()).unwrap();
        let got = trilinear_interpolate(&grid, &CoordinateBatch::new(coords.clone(), None).unwrap()).unwrap();
        for (q, x) in coords.iter().enumerate() {
            let want = common::trilinear_oracle(&feats, *x);
            for ch in 0..c {
                let (a, b) = (got[[q, ch]], want[ch]);
                let rel = (a - b).abs() / b.abs().max(TRILINEAR_ABS_FLOOR);
                worst = worst.max(rel);
                if (a - b).abs() > TRILINEAR_REL_TOL * b.abs().max(TRILINEAR_ABS_FLOOR) {
                    failures += 1;
                }
            }
        }
    }
    Outcome {
        passed: failures == 0,
        detail: format!("{failures} mismatches, worst relative error {worst:.2e} (tol {TRILINEAR_REL_TOL:e})"),
    }
}

// Criterion 2 tolerances.
const GRAD_STEP: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_MIN_FRACTION: f64 = 0.99;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const GRAD_DRAWS: u64 = 5;

/// One seeded miniature model with two random 4^3 samples.
fn gradient_draw(seed: u64) -> common::GradCheck {
    let cfg = common::miniature_config();
    let mut model = SrModel::<f32>::init(cfg, seed).unwrap().cast::<f64>();
    common::jitter_biases(&mut model, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let samples: Vec<Sample> = (0..2)
        .map(|_| {
            let lr = Volume::new(Array3::from_shape_fn((4, 4, 4), |_| rng.gen_range(0.0f32..1.0)), [1.0; 3]).unwrap();
            let coords: Vec<[f64; 3]> = (0..16).map(|_| [0, 1, 2].map(|_| rng.gen_range(-0.95..0.95))).collect();
            let targets: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            Sample {
                lr,
                batch: CoordinateBatch::new(coords, Some(targets)).unwrap(),
            }
        })
        .collect();
    common::gradient_check(&model, &samples, GRAD_STEP, GRAD_REL_TOL)
}

/// Central differences straddle ReLU and L1 kinks for a few parameters of
/// any single draw, so the fraction is pooled over several seeded draws. The
/// bar must also hold over parameters with a nonzero gradient alone, so dead
/// units cannot carry it.
fn gradient_check() -> Outcome {
    let draws: Vec<common::GradCheck> = (0..GRAD_DRAWS).map(|d| gradient_draw(2002 + 10 * d)).collect();
    let per_draw: Vec<String> = draws.iter().map(|c| format!("{:.2}%", 100.0 * c.fraction())).collect();
    let check = draws.into_iter().fold(common::GradCheck::default(), common::GradCheck::merge);
    Outcome {
        passed: check.fraction() >= GRAD_MIN_FRACTION && check.live_fraction() >= GRAD_MIN_FRACTION,
        detail: format!(
            "{}/{} parameters within {GRAD_REL_TOL:e} over {GRAD_DRAWS} draws ({:.2}%, live gradients {:.2}%, need {:.0}%; per draw {})",
            check.agreeing,
            check.total,
            100.0 * check.fraction(),
            100.0 * check.live_fraction(),
            100.0 * GRAD_MIN_FRACTION,
            per_draw.join(", ")
        ),
    }
}

// Criterion 3 setup and bounds.
const OVERFIT_SIDE: usize = 64;
const OVERFIT_PAIRS: usize = 48;
const OVERFIT_VAL_PAIRS: usize = 8;
const OVERFIT_LOSS_RATIO: f64 = 0.2;
const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);
const OVERFIT_SEED: u64 = 3003;

fn overfit_model_config() -> ModelConfig {
    ModelConfig::with_channels(
        EncoderConfig {
            variant: EncoderVariant::Rdn,
            base_channels: 32,
            num_blocks: 2,
            convs_per_block: 3,
            growth_rate: 16,
            out_channels: 32,
        },
        256,
    )
}

fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        n_pairs_per_step: 4,
        k_coords: 512,
        lr_init: 1e-3,
        decay_factor: 0.5,
        decay_every_epochs: 20,
        total_epochs: 60,
        seed: OVERFIT_SEED,
        ..TrainConfig::default()
    }
}

/// Dense, fairly sharp blobs: smooth enough to learn in 60 epochs, with
/// enough detail that 2x cubic interpolation is not already near exact.
fn training_volume() -> Volume {
    common::blob_volume_with(OVERFIT_SIDE, 64, (0.03, 0.08), 3004)
}

fn overfit_run(out: &Path) -> TrainOutcome {
    let vol = training_volume();
    let spec = PatchSpec {
        n_patches: OVERFIT_PAIRS,
        lr_size: 8,
        crop_size: 40,
    };
    let train_pairs = extract_training_pairs(&vol, &spec, &mut ScaleSampler::new(2.0, 4.0, 3005).unwrap()).unwrap();
    let val_spec = PatchSpec {
        n_patches: OVERFIT_VAL_PAIRS,
        ..spec
    };
    let val_pairs = extract_training_pairs(&vol, &val_spec, &mut ScaleSampler::new(2.0, 4.0, 3006).unwrap()).unwrap();
    train(&overfit_train_config(), &overfit_model_config(), &train_pairs, &val_pairs, out).unwrap()
}

fn desk_overfit(run: &TrainOutcome) -> Outcome {
    let first = run.history.first().map(|r| r.train_l1).unwrap_or(f64::NAN);
    let last = run.history.last().map(|r| r.train_l1).unwrap_or(f64::NAN);
    let loss_ok = last < OVERFIT_LOSS_RATIO * first;

    let gt = training_volume();
    let lr = cubic_downsample(&gt, 2.0).unwrap();
    let (model, _) = load_checkpoint_with_meta(&run.checkpoint).unwrap();
    let sr = super_resolve(&model, &lr, &SrRequest::new(2.0)).unwrap();
    let cubic = cubic_super_resolve(&lr, 2.0).unwrap();
    let p_sr = psnr_standard(&sr, &gt).unwrap();
    let p_cubic = psnr_standard(&cubic, &gt).unwrap();
    Outcome {
        passed: loss_ok && p_sr >= p_cubic,
        detail: format!(
            "train L1 {first:.5} -> {last:.5} (ratio {:.3}, need < {OVERFIT_LOSS_RATIO}); 2x psnr_standard {p_sr:.3} dB vs cubic {p_cubic:.3} dB",
            last / first
        ),
    }
}

// Criterion 4.
const ARBITRARY_SCALES: [f64; 5] = [2.0, 2.5, 3.1, 3.2, 4.0];
const ARBITRARY_CHUNKS: [usize; 2] = [65_536, 997];
const ARBITRARY_BUDGET: Duration = Duration::from_secs(5 * 60);

fn arbitrary_scale(run: &TrainOutcome) -> Outcome {
    let (model, _) = load_checkpoint_with_meta(&run.checkpoint).unwrap();
    let gt = training_volume();
    let lr = Volume::new(gt.data().slice(s![20..30, 20..30, 20..30]).to_owned(), [1.0; 3]).unwrap();
    let mut problems = Vec::new();
    for k in ARBITRARY_SCALES {
        let want = (10.0 * k + 1e-9).floor() as usize;
        let outputs: Vec<Volume> = ARBITRARY_CHUNKS
            .iter()
            .map(|&chunk| {
                let req = SrRequest {
                    chunk_size: chunk,
                    ..SrRequest::new(k)
                };
                super_resolve(&model, &lr, &req).unwrap()
            })
            .collect();
        if outputs[0].shape() != (want, want, want) {
            problems.push(format!("k={k}: shape {:?}, want {want}^3", outputs[0].shape()));
        }
        let same = outputs[0]
            .as_slice()
            .iter()
            .zip(outputs[1].as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            problems.push(format!("k={k}: output depends on chunk size"));
        }
    }
    Outcome {
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("10^3 input at k={ARBITRARY_SCALES:?} gives floor(10k)^3, bitwise equal across chunks {ARBITRARY_CHUNKS:?}")
        } else {
            problems.join("; ")
        },
    }
}

// Criterion 5 tolerances.
const METRIC_TOL: f64 = 1e-9;

fn metric_correctness() -> Outcome {
    let mut problems = Vec::new();
    let gt = vec![0.5f64; 1000];
    let shifted: Vec<f64> = gt.iter().map(|x| x + 0.01).collect();
    let p = psnr_paper_values(&shifted, &gt, 1.0).unwrap();
    if (p - 20.0).abs() > METRIC_TOL {
        problems.push(format!("psnr_paper {p}"));
    }
    let shifted: Vec<f64> = gt.iter().map(|x| x - 0.1).collect();
    let p = psnr_standard_values(&shifted, &gt, 1.0).unwrap();
    if (p - 20.0).abs() > METRIC_TOL {
        problems.push(format!("psnr_standard {p}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let a = Volume::new(Array3::from_shape_fn((9, 9, 9), |_| rng.gen_range(0.0f32..1.0)), [1.0; 3]).unwrap();
    let s = ssim_global(&a, &a).unwrap();
    if (s - 1.0).abs() > METRIC_TOL {
        problems.push(format!("ssim_global(a, a) {s}"));
    }
    for side in [1, 5, 12] {
        let v = Volume::zeros((side, side, side)).unwrap();
        let m = slicewise_means(|x, y| ssim_slice(x, y, 1.0), &v, &v).unwrap();
        if m.slices != 3 * side {
            problems.push(format!("{} slices on a side-{side} cube", m.slices));
        }
    }
    Outcome {
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            "psnr_paper 20.0, psnr_standard 20.0, ssim(a, a) 1, 3s slices".into()
        } else {
            problems.join("; ")
        },
    }
}

// Criterion 6.
const SHAPE_LAW_SAMPLES: usize = 1000;

fn pipeline_shape_laws() -> Outcome {
    let mut problems = Vec::new();
    let vol = common::blob_volume(40, 6, 6006);
    let spec = PatchSpec {
        n_patches: 1,
        lr_size: 10,
        crop_size: 40,
    };
    let mut draws = ScaleSampler::new(2.0, 4.0, 6007).unwrap();
    for i in 0..SHAPE_LAW_SAMPLES {
        let k = draws.sample_scale();
        let want = (10.0 * k).round() as usize;
        let pair = &extract_training_pairs(&vol, &spec, &mut ScaleSampler::new(k, k, i as u64).unwrap()).unwrap()[0];
        if pair.hr.shape() != (want, want, want) || hr_side(10, k) != want || pair.lr.shape() != (10, 10, 10) {
            problems.push(format!("k={k}: hr {:?}, want {want}^3", pair.hr.shape()));
        }
    }

    let (d, h, w) = (320usize, 320usize, 256usize);
    let src = Volume::new(
        Array3::from_shape_fn((d, h, w), |(i, j, k)| (1 + (i * 7919 + j * 104_729 + k * 31) % 65_521) as f32),
        [1.0; 3],
    )
    .unwrap();
    let out = crop_pad(&src, (264, 264, 264)).unwrap();
    if out.shape() != (264, 264, 264) {
        problems.push(format!("crop_pad shape {:?}", out.shape()));
    } else {
        // 320 -> 264 crops 28 per side; 256 -> 264 pads 4 per side.
        let interior = out.data().slice(s![.., .., 4..260]).to_owned();
        let source = src.data().slice(s![28..292, 28..292, ..]).to_owned();
        if interior != source {
            problems.push("crop_pad interior differs from the source".into());
        }
        let pad_lo = out.data().slice(s![.., .., 0..4]).iter().all(|&v| v == 0.0);
        let pad_hi = out.data().slice(s![.., .., 260..]).iter().all(|&v| v == 0.0);
        if !(pad_lo && pad_hi) {
            problems.push("crop_pad padding is not zero".into());
        }
    }
    Outcome {
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("{SHAPE_LAW_SAMPLES} scales give round(10k)^3 HR patches; 320x320x256 -> 264^3 keeps the interior")
        } else {
            problems.truncate(5);
            problems.join("; ")
        },
    }
}

fn reproducibility(a: &Path, b: &Path) -> Outcome {
    let read = |p: &Path| std::fs::read(p).unwrap();
    let hist = read(&a.join(HISTORY_FILE)) == read(&b.join(HISTORY_FILE));
    let ckpt = read(&a.join(voxsr::train::BEST_CHECKPOINT)) == read(&b.join(voxsr::train::BEST_CHECKPOINT));
    Outcome {
        passed: hist && ckpt,
        detail: format!("history identical: {hist}, checkpoint bytes identical: {ckpt}"),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn within(o: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    if elapsed <= budget {
        o
    } else {
        Outcome {
            passed: false,
            detail: format!("{} (exceeded {:.0}s budget)", o.detail, budget.as_secs_f64()),
        }
    }
}

fn main() {
    let mut results = Vec::new();

    let (o, t) = timed(trilinear_oracle_equivalence);
    let o = within(o, t, TRILINEAR_BUDGET);
    report(1, "trilinear oracle", t, &o);
    results.push(o.passed);

    let (o, t) = timed(gradient_check);
    let o = within(o, t, GRAD_BUDGET);
    report(2, "gradient check", t, &o);
    results.push(o.passed);

    // Both reference runs are single-threaded; the first also serves
    // criteria 3 and 4.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (run, t_train) = timed(|| pool.install(|| overfit_run(dir_a.path())));
    let (o, t_eval) = timed(|| desk_overfit(&run));
    let t = t_train + t_eval;
    let o = within(o, t, OVERFIT_BUDGET);
    report(3, "desk-scale overfit", t, &o);
    results.push(o.passed);

    let (o, t) = timed(|| arbitrary_scale(&run));
    let o = within(o, t, ARBITRARY_BUDGET);
    report(4, "arbitrary-scale contract", t, &o);
    results.push(o.passed);

    let (o, t) = timed(metric_correctness);
    report(5, "metric correctness", t, &o);
    results.push(o.passed);

    let (o, t) = timed(pipeline_shape_laws);
    report(6, "pipeline shape laws", t, &o);
    results.push(o.passed);

    let (_, t_b) = timed(|| pool.install(|| overfit_run(dir_b.path())));
    let (o, t) = timed(|| reproducibility(dir_a.path(), dir_b.path()));
    report(7, "reproducibility", t + t_b, &o);
    results.push(o.passed);

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    if !failed.is_empty() {
        eprintln!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all {} criteria passed", results.len());
}
