//! Acceptance criteria 1–10. Criteria run one after another inside a single
//! test so the wall-clock limits are measured without competing threads; each
//! prints one PASS/FAIL line.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crsynth::ablation::AblationSpec;
use crsynth::config::RunConfig;
use crsynth::data::{load_manifest, validate_toy_size, write_toy_corpus, Dataset, Split, MANIFEST_FILE};
use crsynth::discriminator::Discriminator;
use crsynth::generator::{FusionAttention, Generator, GeneratorConfig};
use crsynth::image::{ImageTensor, ValueRange};
use crsynth::losses::{gradient_penalty, similarity_loss, LossWeights, PerceptualConfig, PerceptualExtractor};
use crsynth::metrics::{fid, psnr, psnr_from_mse, ssim, FeatureEmbedder, PSNR_CAP};
use crsynth::nn::{spectral_normalize, Ctx, ParamStore};
use crsynth::tensor::{grad, no_grad};
use crsynth::training::{
    parameter_counts, run_ablation, run_training, save_checkpoint, validate, HistoryRecord, ReduceLrOnPlateau,
    RunOptions, Trainer, ABLATION_TABLE_FILE, CHECKPOINT_BLOB, CHECKPOINT_HEADER,
};
use crsynth::Tensor;

/// Writes to the raw stderr handle so the lines survive libtest's output capture.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stderr(), $($t)*);
    }};
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

fn toy_corpus(dir: &Path, n: usize) -> std::path::PathBuf {
    let root = dir.join("corpus");
    write_toy_corpus(&root, n, 64, 7, 0.3, true).unwrap();
    root.join(MANIFEST_FILE)
}

// 1. FusionAttention with gamma = 0 is the identity on both inputs.
fn fusion_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..50u64 {
        let n = rng.random_range(1..=3);
        let c = rng.random_range(1..=12);
        let h = rng.random_range(1..=9);
        let w = rng.random_range(1..=9);
        let qk = rng.random_range(1..=4);
        let store = ParamStore::new(case);
        let fa = FusionAttention::new(&store.root(), c, qk, 0.0).unwrap();
        let a = Tensor::randn(&[n, c, h, w], &mut rng);
        let b = Tensor::randn(&[n, c, h, w], &mut rng);
        let (ya, yb) = fa.forward(&a, &b).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ya), bits(&a), "case {case}: first output differs");
        assert_eq!(bits(&yb), bits(&b), "case {case}: second output differs");
    }
}

// 2. Analytic gradient of the similarity loss against central differences.
fn similarity_gradient() {
    let weights = LossWeights::default();
    assert!(weights.alpha > 0.0 && weights.beta > 0.0 && weights.gamma_sim > 0.0);
    let ex = PerceptualExtractor::new(&PerceptualConfig::tiny(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(-0.8..0.8)).collect();
    let reference = Tensor::rand_uniform(&[1, 3, 8, 8], -0.8, 0.8, &mut rng);
    let loss_at = |v: &[f64]| {
        let x = Tensor::new(v.to_vec(), &[1, 3, 8, 8]).unwrap();
        no_grad(|| similarity_loss(&x, &reference, &weights, &ex).unwrap().item().unwrap())
    };
    let x = Tensor::var(base.clone(), &[1, 3, 8, 8]).unwrap();
    let loss = similarity_loss(&x, &reference, &weights, &ex).unwrap();
    let g = grad(&loss, &[&x], false).unwrap().remove(0);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..base.len());
        let (mut up, mut down) = (base.clone(), base.clone());
        up[i] += h;
        down[i] -= h;
        let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
        let analytic = g.data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
        assert!(rel < 1e-3, "probe {i}: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})");
    }
    say!("    worst relative gradient error {worst:.2e}");
}

// 3. Gradient penalty of linear critics and of a constant critic.
fn gradient_penalty_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let shape = [1, 2, 3, 3];
        let scale = rng.random_range(0.05..0.6);
        let w = Tensor::from_fn(&shape, |_| gauss(&mut rng) * scale);
        let norm = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let critic = |x: &Tensor| -> crsynth::Result<Tensor> {
            let n = x.dim(0);
            x.mul(&w.broadcast_to(x.shape())?)?.reshape(&[n, 18])?.sum_axes(&[1], false)
        };
        let real = Tensor::randn(&[4, 2, 3, 3], &mut rng);
        let fake = Tensor::randn(&[4, 2, 3, 3], &mut rng);
        let gp = gradient_penalty(&critic, &real, &fake, &mut rng).unwrap().item().unwrap();
        let expect = (norm - 1.0).powi(2);
        assert!((gp - expect).abs() < 1e-5, "case {case}: {gp} vs {expect}");
    }
    let constant = |x: &Tensor| -> crsynth::Result<Tensor> {
        let n = x.dim(0);
        x.mul_scalar(0.0)?.reshape(&[n, 18])?.sum_axes(&[1], false)?.add_scalar(3.5)
    };
    let real = Tensor::randn(&[4, 2, 3, 3], &mut rng);
    let fake = Tensor::randn(&[4, 2, 3, 3], &mut rng);
    let gp = gradient_penalty(&constant, &real, &fake, &mut rng).unwrap().item().unwrap();
    assert_eq!(gp, 1.0);
}

// 4. Metric oracles.
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = |rng: &mut ChaCha8Rng| {
        ImageTensor::new(Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, rng), ValueRange::Unit).unwrap()
    };
    let x = img(&mut rng);
    assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-6);
    assert_eq!(psnr_from_mse(0.01), 20.0);

    let set = |n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| gauss(rng) + shift).collect()).collect()
    };
    let a = set(300, 8, 0.0, &mut rng);
    let b = set(250, 8, 0.3, &mut rng);
    assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
    assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-6);

    // equal unit covariances, so the distance reduces to the squared mean shift
    let shift = 0.5;
    let a = set(10_000, 8, 0.0, &mut rng);
    let b = set(10_000, 8, shift, &mut rng);
    let expect = 8.0 * shift * shift;
    let got = fid(&a, &b).unwrap();
    say!("    mean-shift FID {got:.4} vs expected {expect:.4}");
    assert!((got - expect).abs() / expect < 0.05);
}

// 5. Power-iteration spectral norm against an SVD.
fn spectral_norm_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let rows = rng.random_range(2..=24);
        let cols = rng.random_range(2..=24);
        let data: Vec<f64> = (0..rows * cols).map(|_| gauss(&mut rng)).collect();
        let exact = DMatrix::from_row_slice(rows, cols, &data).singular_values().max();
        let mut u: Vec<f64> = (0..rows).map(|_| gauss(&mut rng)).collect();
        let w = Tensor::new(data, &[rows, cols]).unwrap();
        let (_, sigma) = spectral_normalize(&w, &mut u, 50).unwrap();
        let rel = (sigma - exact).abs() / exact;
        assert!(rel < 1e-3, "case {case} ({rows}x{cols}): {sigma} vs {exact}");
    }
}

// 6. Output shapes for tile sizes 64 and 128 at batch 1 and 8.
fn shape_matrix() {
    let cfg = RunConfig::tiny("unused");
    let g = Generator::new(&cfg.generator, &AblationSpec::default(), 0).unwrap();
    let d = Discriminator::new(&cfg.discriminator, &cfg.generator, &AblationSpec::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for size in [64, 128] {
        cfg.generator.validate_tile(size, size).unwrap();
        cfg.discriminator.validate_tile(size, size).unwrap();
        for n in [1, 8] {
            let s1a = Tensor::rand_uniform(&[n, 2, size, size], -1.0, 1.0, &mut rng);
            let s1b = Tensor::rand_uniform(&[n, 2, size, size], -1.0, 1.0, &mut rng);
            let s2a = Tensor::rand_uniform(&[n, 3, size, size], -1.0, 1.0, &mut rng);
            let y = no_grad(|| g.forward(&s1a, &s1b, &s2a, &mut Ctx::eval())).unwrap();
            assert_eq!(y.shape(), &[n, 3, size, size]);
            assert!(y.data().iter().all(|v| v.abs() < 1.0));
            let maps = no_grad(|| d.forward(&y, &s1a, &s1b, &s2a, false)).unwrap();
            let sides: Vec<usize> = maps.iter().map(|m| m.dim(2)).collect();
            assert_eq!(sides, vec![size / 16, size / 32, size / 64], "tile {size}, batch {n}");
            for m in &maps {
                assert_eq!((m.dim(0), m.dim(1), m.dim(2), m.dim(3)), (n, 1, m.dim(2), m.dim(2)));
                assert!(m.all_finite());
            }
        }
    }
    assert!(GeneratorConfig::default().validate_tile(66, 66).is_err());
    assert!(cfg.generator.validate_tile(66, 66).is_err());
    assert!(validate_toy_size(66).is_err());
}

// 7. Overfitting a fixed 8-scene corpus: +3 dB training PSNR in 300 steps.
fn overfit_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(&toy_corpus(dir.path(), 8)).unwrap();
    let data = Dataset::load(&manifest, Split::Train).unwrap();
    assert_eq!(data.len(), 8);
    let cfg = RunConfig::tiny("unused");
    let mut trainer = Trainer::new(&cfg).unwrap();
    let embedder = FeatureEmbedder::optical();
    let before = validate(&trainer.generator, &data, &embedder, 8, "init").unwrap().aggregate.psnr;
    let mut step = 0;
    let mut epoch = 0;
    while step < 300 {
        epoch += 1;
        for batch in data.batches(cfg.train.batch_size, cfg.train.shuffle_seed(epoch)).unwrap() {
            trainer.train_step(&batch.unwrap()).unwrap();
            step += 1;
        }
    }
    let after = validate(&trainer.generator, &data, &embedder, 8, "trained").unwrap().aggregate.psnr;
    say!("    training PSNR {before:.2} dB -> {after:.2} dB after {step} steps");
    assert!(after - before >= 3.0, "gain {:.2} dB", after - before);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

fn step_losses(history: &[HistoryRecord]) -> Vec<[f64; 7]> {
    history
        .iter()
        .filter_map(|r| match r {
            HistoryRecord::Step(s) => {
                let l = s.losses;
                Some([l.d_total, l.d_real, l.d_fake, l.gp, l.g_total, l.g_sim, l.g_adv])
            }
            HistoryRecord::Epoch(_) => None,
        })
        .collect()
}

// 8. Determinism and resume.
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = toy_corpus(dir.path(), 8);
    let manifest = load_manifest(&manifest_path).unwrap();
    let data = Dataset::load(&manifest, Split::Train).unwrap();
    let mut cfg = RunConfig::tiny(&manifest_path);
    cfg.train.batch_size = 4;
    cfg.train.epochs = 3;
    cfg.train.seed = 11;

    let run = |tag: &str| {
        let mut t = Trainer::new(&cfg).unwrap();
        let mut losses = Vec::new();
        let batches: Vec<_> = data.batches(4, cfg.train.shuffle_seed(1)).unwrap().map(Result::unwrap).collect();
        for i in 0..5 {
            losses.push(t.train_step(&batches[i % batches.len()]).unwrap());
        }
        let ckpt = dir.path().join(format!("ckpt_{tag}"));
        save_checkpoint(&t, &ckpt).unwrap();
        (losses, ckpt)
    };
    let (la, ca) = run("a");
    let (lb, cb) = run("b");
    assert_eq!(la, lb, "loss trajectories differ");
    for f in [CHECKPOINT_HEADER, CHECKPOINT_BLOB] {
        assert!(read(&ca.join(f)) == read(&cb.join(f)), "{f} differs between identical runs");
    }

    let full = run_training(&cfg, &dir.path().join("full"), &RunOptions::default()).unwrap();
    let part = dir.path().join("part");
    let first = RunOptions {
        stop_after: Some(1),
        ..RunOptions::default()
    };
    let cut = run_training(&cfg, &part, &first).unwrap();
    assert_eq!(cut.epochs_completed, 1);
    let resume = RunOptions {
        resume: true,
        ..RunOptions::default()
    };
    let resumed = run_training(&cfg, &part, &resume).unwrap();
    assert_eq!(resumed.epochs_completed, 3);
    let (a, b) = (step_losses(&full.history), step_losses(&resumed.history));
    assert_eq!(a.len(), 6);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= 1e-6, "resumed loss {q} vs uninterrupted {p}");
        }
    }
    let epochs = |h: &[HistoryRecord]| h.iter().filter(|r| matches!(r, HistoryRecord::Epoch(_))).count();
    assert_eq!((epochs(&full.history), epochs(&resumed.history)), (3, 3));
}

// 9. Ablation harness.
fn ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny(toy_corpus(dir.path(), 8));
    cfg.train.epochs = 1;
    let variants = AblationSpec::table_variants();
    assert_eq!(variants.len(), 6);

    let full = parameter_counts(&cfg, &AblationSpec::default()).unwrap();
    for (name, spec) in &variants[1..] {
        let c = parameter_counts(&cfg, spec).unwrap();
        if spec.alt_discriminator {
            assert_eq!(c["generator"], full["generator"], "{name}");
            assert_ne!(c["discriminator"], full["discriminator"], "{name}");
        } else {
            assert!(c["generator"] < full["generator"], "{name}: {} !< {}", c["generator"], full["generator"]);
        }
    }

    let out = dir.path().join("ablation");
    let table = run_ablation(&cfg, &variants, &out, false).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.setting.as_str()).collect();
    let expect: Vec<&str> = variants.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, expect);
    assert!(table.rows.iter().all(|r| r.metrics.psnr.is_finite() && r.fid.is_finite()));
    let text = std::fs::read_to_string(out.join(ABLATION_TABLE_FILE)).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(&header[..6], &["Setting", "PSNR", "SSIM", "MAE", "RMSE", "FID"]);
    print!("{}", text.lines().map(|l| format!("    {l}\n")).collect::<String>());
}

// 10. Plateau scheduler against a direct simulation.
fn scheduler_policy() {
    let mut s = ReduceLrOnPlateau::new(10, 0.5);
    let mut lr = s.step(20.0, 0.001);
    for k in 1..=10 {
        lr = s.step(19.0, lr);
        assert_eq!(lr, if k < 10 { 0.001 } else { 0.0005 }, "after {k} flat epochs");
    }

    let mut s = ReduceLrOnPlateau::new(10, 0.5);
    let mut lr = s.step(20.0, 0.001);
    for _ in 0..8 {
        lr = s.step(19.0, lr);
    }
    lr = s.step(21.0, lr);
    for _ in 0..9 {
        lr = s.step(20.5, lr);
    }
    assert_eq!(lr, 0.001);

    let mut s = ReduceLrOnPlateau::new(10, 0.5);
    let mut lr = 0.001;
    for e in 0..50 {
        lr = s.step(f64::from(e), lr);
    }
    assert_eq!(lr, 0.001);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let mut s = ReduceLrOnPlateau::new(10, 0.5);
        let (mut lr, mut expect_lr) = (0.001, 0.001);
        let (mut best, mut streak) = (f64::NEG_INFINITY, 0usize);
        for _ in 0..120 {
            let m = f64::from(rng.random_range(0..40u32)) + if rng.random_bool(0.2) { 40.0 } else { 0.0 };
            if m > best {
                best = m;
                streak = 0;
            } else {
                streak += 1;
                if streak == 10 {
                    expect_lr *= 0.5;
                    streak = 0;
                }
            }
            lr = s.step(m, lr);
            assert_eq!(lr, expect_lr);
        }
    }
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn(), Duration); 10] = [
        ("fusion attention identity at gamma 0", fusion_identity, Duration::from_secs(10)),
        ("similarity loss gradient vs finite differences", similarity_gradient, Duration::from_secs(60)),
        ("gradient penalty closed form", gradient_penalty_closed_form, Duration::from_secs(30)),
        ("metric oracles", metric_oracles, Duration::from_secs(120)),
        ("spectral norm vs SVD", spectral_norm_oracle, Duration::from_secs(30)),
        ("generator and critic shape matrix", shape_matrix, Duration::from_secs(120)),
        ("overfit smoke test", overfit_smoke, Duration::from_secs(20 * 60)),
        ("determinism and resume", determinism, Duration::from_secs(10 * 60)),
        ("ablation harness", ablation_harness, Duration::from_secs(15 * 60)),
        ("plateau scheduler policy", scheduler_policy, Duration::from_secs(5)),
    ];
    let mut failed = Vec::new();
    say!();
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f));
        let took = start.elapsed();
        let ok = outcome.is_ok() && took < *limit;
        let note = match (&outcome, took < *limit) {
            (Err(_), _) => "assertion failed".to_string(),
            (Ok(()), false) => format!("over the {limit:?} limit"),
            _ => String::new(),
        };
        say!(
            "criterion {:>2}: {} {name} ({:.1} s){}",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            if note.is_empty() { String::new() } else { format!(" [{note}]") }
        );
        if !ok {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
