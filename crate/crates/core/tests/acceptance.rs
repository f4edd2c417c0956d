//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria 4 through 8 share one trained model and corpus.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ala_core::attack::{run_batch, total_gradient, AttackConfig, BatchResult, Variant};
use ala_core::colorspace::{lab_to_rgb, rgb8_to_lab, rgb_to_lab, LabImage, RgbImage};
use ala_core::dataset::{corrupt_dataset, generate_corpus, lightness_corruptions, CorpusSpec, LabeledImage, DEFAULT_CORRUPTION_LEVELS};
use ala_core::eval::{batch_outputs, mmd_rbf, run_ablation, AblationRow};
use ala_core::filter::{apply_filter, filter_jacobian, FilterParams};
use ala_core::image_io::{read_image, write_png};
use ala_core::model::{accuracy, fine_tune, train_model, Architecture, Model, TrainConfig};

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

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------- 1

fn random_theta(rng: &mut ChaCha8Rng, positive: bool) -> FilterParams {
    let t = rng.gen_range(1..=64);
    let theta: Vec<f64> = (0..t)
        .map(|_| if positive { rng.gen_range(0.01..3.0) } else { rng.gen_range(-0.2..0.8) })
        .collect();
    FilterParams::new(theta).unwrap()
}

fn filter_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    let cases = 10_000;
    let mut case = 0;
    while case < cases {
        let positive = case % 2 == 0;
        let params = random_theta(&mut rng, positive);
        let t = params.segments();
        if params.theta().iter().sum::<f64>().abs() < 1e-3 {
            // near-degenerate sum: the filter is undefined, draw again
            continue;
        }
        case += 1;
        let x: f64 = rng.gen();
        let f = |p: &FilterParams, x: f64| apply_filter(p, x).unwrap();

        let id = FilterParams::identity(t);
        if (f(&id, x) - x).abs() > 1e-12 {
            failures.push(format!("identity T={t} x={x}"));
        }
        if f(&params, 0.0).abs() > 1e-12 || (f(&params, 1.0) - 1.0).abs() > 1e-12 {
            failures.push(format!("endpoints case {case}"));
        }
        let c = rng.gen_range(0.1..10.0);
        let scaled = FilterParams::new(params.theta().iter().map(|v| v * c).collect()).unwrap();
        if (f(&scaled, x) - f(&params, x)).abs() > 1e-12 {
            failures.push(format!("scale invariance case {case}"));
        }
        for k in 1..t {
            let b = k as f64 / t as f64;
            let eps = 1e-10;
            if (f(&params, b - eps) - f(&params, b + eps)).abs() > 1e-6 {
                failures.push(format!("continuity case {case} boundary {k}"));
                break;
            }
        }
        if positive {
            let (mut a, mut b): (f64, f64) = (rng.gen(), rng.gen());
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            if f(&params, a) > f(&params, b) + 1e-12 {
                failures.push(format!("monotonicity case {case}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && within(elapsed, 5);
    outcome(
        pass,
        format!(
            "{cases} cases, {} failures{}, {:.2}s (limit 5s)",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central difference with a kink guard: returns `None` when halving the step
/// changes the estimate, which happens when a non-smooth point is in reach.
fn central_fd(f: &mut dyn FnMut(f64) -> f64, h: f64) -> Option<f64> {
    let d1 = (f(h) - f(-h)) / (2.0 * h);
    let d2 = (f(h / 2.0) - f(-h / 2.0)) / h;
    (rel_err(d1, d2) < 1e-6).then_some(d1)
}

struct Probes {
    accepted: usize,
    rejected: usize,
    worst: f64,
}

fn run_probes(needed: usize, tol: f64, mut probe: impl FnMut(usize) -> Option<(f64, f64)>) -> (Probes, bool) {
    let mut p = Probes {
        accepted: 0,
        rejected: 0,
        worst: 0.0,
    };
    let mut i = 0;
    while p.accepted < needed && i < needed * 20 {
        match probe(i) {
            Some((analytic, fd)) => {
                p.accepted += 1;
                p.worst = p.worst.max(rel_err(analytic, fd));
            }
            None => p.rejected += 1,
        }
        i += 1;
    }
    let ok = p.accepted >= needed && p.worst <= tol;
    (p, ok)
}

fn gradients(model: &Model, test: &[LabeledImage]) -> Outcome {
    let start = Instant::now();
    let needed = 20;

    // filter jacobian
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (jac, jac_ok) = run_probes(needed, 1e-4, |_| {
        let params = random_theta(&mut rng, false);
        if params.theta().iter().sum::<f64>().abs() < 0.05 {
            return None;
        }
        let x: f64 = rng.gen();
        let j = rng.gen_range(0..params.segments());
        let analytic = filter_jacobian(&params, x).unwrap()[j];
        let mut f = |h: f64| {
            let mut p = params.clone();
            p.theta_mut()[j] += h;
            apply_filter(&p, x).unwrap()
        };
        central_fd(&mut f, 1e-6).map(|fd| (analytic, fd))
    });

    // model input gradient
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (inp, inp_ok) = run_probes(needed, 1e-4, |i| {
        let x = test[(i * 7) % test.len()].image.to_unit();
        let upstream: Vec<f64> = (0..model.classes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = rng.gen_range(0..x.len());
        let analytic = model.input_gradient(&x, &upstream).unwrap()[k];
        let mut f = |h: f64| {
            let mut xp = x.clone();
            xp[k] += h;
            let z = model.forward_unit(&xp).unwrap();
            z.values().iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        central_fd(&mut f, 1e-5).map(|fd| (analytic, fd))
    });

    // attack objective gradient, with every switch on
    let config = AttackConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (tot, tot_ok) = run_probes(needed, 1e-3, |i| {
        let item = &test[(i * 11) % test.len()];
        let lab = rgb_to_lab(&item.image);
        let theta: Vec<f64> = (0..config.segments).map(|_| rng.gen_range(config.init_lo..config.init_hi)).collect();
        let params = FilterParams::new(theta).unwrap();
        let j = rng.gen_range(0..config.segments);
        let (_, grad) = total_gradient(model, &lab, &params, &config, item.label).ok()?;
        let mut f = |h: f64| {
            let mut p = params.clone();
            p.theta_mut()[j] += h;
            total_gradient(model, &lab, &p, &config, item.label).unwrap().0
        };
        central_fd(&mut f, 1e-5).map(|fd| (grad[j], fd))
    });

    let elapsed = start.elapsed();
    let pass = jac_ok && inp_ok && tot_ok && within(elapsed, 60);
    let fmt = |name: &str, p: &Probes, tol: f64| {
        format!("{name} worst {:.1e} (tol {tol:.0e}, {} probes, {} kinks skipped)", p.worst, p.accepted, p.rejected)
    };
    outcome(
        pass,
        format!(
            "{}; {}; {}; {:.1}s (limit 60s)",
            fmt("filter_jacobian", &jac, 1e-4),
            fmt("input_gradient", &inp, 1e-4),
            fmt("total_gradient", &tot, 1e-3),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn roundtrip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let data: Vec<u8> = (0..3 * n).map(|_| rng.gen()).collect();
    let img = RgbImage::new(n, 1, data).unwrap();
    let back = lab_to_rgb(&rgb_to_lab(&img));
    let max_err = img
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (*a as i32 - *b as i32).abs())
        .max()
        .unwrap();

    let ramp: Vec<u8> = (0..=255u8).flat_map(|v| [v, v, v]).collect();
    let ramp_img = RgbImage::new(256, 1, ramp).unwrap();
    let ramp_exact = lab_to_rgb(&rgb_to_lab(&ramp_img)) == ramp_img;
    // a single-pixel conversion path agrees with the image path
    let single = rgb8_to_lab([128, 128, 128]);
    let lab = LabImage::new(1, 1, vec![single[0]], vec![single[1]], vec![single[2]]).unwrap();
    let single_ok = lab_to_rgb(&lab).data() == [128, 128, 128];

    let elapsed = start.elapsed();
    let pass = max_err <= 1 && ramp_exact && single_ok && within(elapsed, 10);
    outcome(
        pass,
        format!(
            "{n} random triples max error {max_err} (limit 1); gray ramp exact: {ramp_exact}; {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- shared

struct Fixture {
    spec: CorpusSpec,
    train: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
    model: Model,
    test_accuracy: f64,
    setup: Duration,
}

fn fixture() -> Fixture {
    let start = Instant::now();
    let spec = CorpusSpec::default();
    let (train, test) = generate_corpus(&spec).unwrap();
    let model = train_model(Architecture::Conv, &train, &TrainConfig::default()).unwrap().model;
    let test_accuracy = accuracy(&model, &test).unwrap();
    Fixture {
        spec,
        train,
        test,
        model,
        test_accuracy,
        setup: start.elapsed(),
    }
}

// ---------------------------------------------------------------- 4

fn end_to_end(fx: &Fixture) -> (Outcome, BatchResult) {
    let start = Instant::now();
    let config = AttackConfig::default();
    let batch = run_batch(&fx.model, &fx.test, &config, 0).unwrap();
    let rate = batch.summary.success_rate.unwrap_or(0.0);
    let elapsed = start.elapsed() + fx.setup;
    let pass = fx.test_accuracy >= 0.90 && rate >= 0.60 && within(elapsed, 600);
    let o = outcome(
        pass,
        format!(
            "K={} {}x{}: test accuracy {:.4} (>= 0.90); ALA7 success {}/{} = {:.4} (>= 0.60); {:.1}s incl. training (limit 600s)",
            fx.spec.classes,
            fx.spec.size,
            fx.spec.size,
            fx.test_accuracy,
            batch.summary.successes,
            batch.summary.attacked,
            rate,
            elapsed.as_secs_f64()
        ),
    );
    (o, batch)
}

// ---------------------------------------------------------------- 5

fn ablation(fx: &Fixture) -> Outcome {
    // every other test image keeps the eight runs affordable on one core
    let subset: Vec<LabeledImage> = fx.test.iter().step_by(2).cloned().collect();
    let rows = run_ablation(&fx.model, &subset, &AttackConfig::default(), 0).unwrap();
    let row = |v: Variant| -> &AblationRow { rows.iter().find(|r| r.variant == v).unwrap() };
    let s = |v: Variant| row(v).success_rate.unwrap_or(0.0);
    let order_ok = rows.iter().map(|r| r.variant).eq(Variant::ALL);
    let switches_ok = rows.iter().all(|r| r.switches == r.variant.switches());
    let checks = [
        ("s6>=s3", s(Variant::Ala6) >= s(Variant::Ala3)),
        ("s3>=s0", s(Variant::Ala3) >= s(Variant::Ala0)),
        ("s6>=s4", s(Variant::Ala6) >= s(Variant::Ala4)),
        ("s4>=s0", s(Variant::Ala4) >= s(Variant::Ala0)),
        ("s7>=s0", s(Variant::Ala7) >= s(Variant::Ala0)),
        (
            "dL7<=dL6",
            match (row(Variant::Ala7).mean_abs_delta_l, row(Variant::Ala6).mean_abs_delta_l) {
                (Some(a), Some(b)) => a <= b,
                _ => false,
            },
        ),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let rates: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{}={:.3}/dL {:.3}",
                r.variant,
                r.success_rate.unwrap_or(0.0),
                r.mean_abs_delta_l.unwrap_or(f64::NAN)
            )
        })
        .collect();
    outcome(
        order_ok && switches_ok && failed.is_empty(),
        format!(
            "{} images; {}; violated: {}",
            subset.len(),
            rates.join(" "),
            if failed.is_empty() { "none".to_string() } else { failed.join(",") }
        ),
    )
}

// ---------------------------------------------------------------- 6

fn fine_tune_trend(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let corrupted = corrupt_dataset(&fx.test, &DEFAULT_CORRUPTION_LEVELS).unwrap();
    let before = accuracy(&fx.model, &corrupted).unwrap();
    let to_attack: Vec<LabeledImage> = fx.train.iter().step_by(2).cloned().collect();
    let batch = run_batch(&fx.model, &to_attack, &AttackConfig::default(), 0).unwrap();
    let mut mix: Vec<LabeledImage> = fx.train.iter().skip(1).step_by(2).cloned().collect();
    let clean = mix.len();
    mix.extend(batch_outputs(&batch));
    let tuned = fine_tune(&fx.model, &mix, &TrainConfig::fine_tune()).unwrap().model;
    let after = accuracy(&tuned, &corrupted).unwrap();
    let elapsed = start.elapsed();
    outcome(
        after > before && within(elapsed, 600),
        format!(
            "corrupted-test accuracy {before:.4} -> {after:.4} (delta {:+.4}); mix {clean} clean + {} ALA; {:.1}s (limit 600s)",
            after - before,
            mix.len() - clean,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn mmd_ordering(fx: &Fixture) -> Outcome {
    let mut sample = Vec::new();
    for item in fx.test.iter().step_by(3).chain(fx.test.iter()) {
        if sample.len() == 100 {
            break;
        }
        if fx.model.predict(&item.image).unwrap() == item.label && !sample.iter().any(|s: &LabeledImage| s.id == item.id) {
            sample.push(item.clone());
        }
    }
    let batch = run_batch(&fx.model, &sample, &AttackConfig::default(), 0).unwrap();
    let clean: Vec<RgbImage> = sample.iter().map(|d| d.image.clone()).collect();
    let adversarial: Vec<RgbImage> = batch_outputs(&batch).into_iter().map(|d| d.image).collect();
    let shifted: Vec<RgbImage> = sample
        .iter()
        .map(|d| lightness_corruptions(&d.image, &[0.4]).unwrap().remove(0))
        .collect();
    let ala = mmd_rbf(&adversarial, &clean, None).unwrap();
    let shift = mmd_rbf(&shifted, &clean, None).unwrap();
    outcome(
        adversarial.len() == 100 && ala < shift,
        format!("{} images: MMD(ALA, clean) {ala:.4} < MMD(L+0.4, clean) {shift:.4}", adversarial.len()),
    )
}

// ---------------------------------------------------------------- 8

fn closed_loop(fx: &Fixture, batch: &BatchResult) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut checked = 0;
    let mut mismatched = Vec::new();
    for item in &batch.items {
        let Some(adv) = &item.report.adversarial else { continue };
        let path = dir.path().join(format!("{}.png", item.id));
        write_png(adv, &path).unwrap();
        let reloaded = read_image(&path).unwrap();
        checked += 1;
        if reloaded != *adv || fx.model.predict(&reloaded).unwrap() != item.report.pred_after {
            mismatched.push(item.id.clone());
        }
    }
    outcome(
        checked > 0 && mismatched.is_empty(),
        format!("{checked} saved adversarial PNGs re-scored, {} mismatches", mismatched.len()),
    )
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, o: &Outcome) {
    println!("{} [{n}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        report(n, name, &o);
        results.push(o.pass);
    };

    record(1, "filter algebra", filter_algebra());
    record(3, "colorspace roundtrip", roundtrip());

    let fx = fixture();
    println!(
        "      fixture: {} train / {} test images, model trained in {:.1}s",
        fx.train.len(),
        fx.test.len(),
        fx.setup.as_secs_f64()
    );
    record(2, "gradient correctness", gradients(&fx.model, &fx.test));
    let (o, batch) = end_to_end(&fx);
    record(4, "end-to-end ALA7 attack", o);
    record(5, "ablation ordering", ablation(&fx));
    record(6, "fine-tune on clean/ALA mix", fine_tune_trend(&fx));
    record(7, "MMD ordering", mmd_ordering(&fx));
    record(8, "closed-loop PNG re-scoring", closed_loop(&fx, &batch));

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
