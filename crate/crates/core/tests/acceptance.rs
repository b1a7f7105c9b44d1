//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! A FAIL is reported, not fatal; set `STATETRACE_ACCEPT_STRICT=1` to exit
//! non-zero when any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 1 2 3`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use statetrace::baselines::{append_windows, RidgeClassifier, SampleMatrix};
use statetrace::cpd::{brute_force_with_cost, detect_with_cost, Cost, CostKind, Method, SearchParams, Signal};
use statetrace::eval::{cpd_score, score_sequences, Counts, ToleranceMargin};
use statetrace::nn::{
    check_conv, check_dense, check_dice, check_gru, dice_loss, model_gradients, random_batch, tiny_config, train,
    Activation, DiceKind, FineTuneOptions, ModelConfig, Variant,
};
use statetrace::pipeline::{
    run_experiment, transfer_experiment, CpdGrid, DatasetSource, ExperimentConfig, ExperimentOutcome, MlGrid,
    TransferConfig,
};
use statetrace::simgen::{generate_dataset, GenConfig};
use statetrace::trace::{expand_annotation, extract_change_points, normalize_channels, pad_and_mask};
use statetrace::{Checkpoint32, Model64};

const GRAD_TOL: f64 = 1e-5;
const SOFTMAX_TOL: f64 = 1e-6;
const RIDGE_TOL: f64 = 1e-8;
const MIN_HYBRID_F1: f64 = 0.85;
const ABLATION_MARGIN: f64 = 0.15;
const BUDGET_S: f64 = 45.0 * 60.0;
const FAST_BUDGET_S: f64 = 60.0;

struct Check {
    ok: bool,
    detail: String,
}

impl Check {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self { ok, detail: detail.into() }
    }
}

fn out_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let acts = [
        ("linear", Activation::Linear),
        ("relu", Activation::Relu),
        ("leaky", Activation::LeakyRelu { alpha: 0.3 }),
        ("softmax", Activation::Softmax),
    ];
    for (name, act) in acts {
        worst.push((format!("conv1d/{name}"), check_conv(3, 4, 5, act, 12, 1)));
        worst.push((format!("dense/{name}"), check_dense(3, 4, act, 12, 2)));
    }
    worst.push(("gru".into(), check_gru(3, 5, 12, 3)));
    worst.push(("dice/soft".into(), check_dice(DiceKind::Soft, 4, &[12, 9], 4)));
    worst.push(("dice/generalized".into(), check_dice(DiceKind::Generalized, 4, &[12, 9], 5)));
    let mut skipped = 0;
    let mut total = 0;
    for v in Variant::ALL {
        let model = Model64::new(&tiny_config(v), 3).expect("tiny model");
        let batch = random_batch(&model, &[12, 12], 6);
        let g = model_gradients(&model, &batch, statetrace::nn::DEFAULT_STEP).expect("gradients");
        skipped += g.skipped();
        total += g.analytic.len();
        worst.push((format!("model/{}", v.name()), g.max_relative_error()));
    }
    let secs = t0.elapsed().as_secs_f64();
    let (name, err) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let ok = worst.iter().all(|(_, e)| *e < GRAD_TOL) && secs < FAST_BUDGET_S;
    Check::new(
        ok,
        format!(
            "max rel. error {err:.2e} ({name}) over {} checks, {skipped}/{total} kink entries skipped, {secs:.1}s",
            worst.len()
        ),
    )
}

fn pelt_exact() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let canonical = |cost: &dyn Cost, bkps: &[usize], beta: f64| {
        let mut start = 0;
        let mut total = 0.0;
        for &b in bkps {
            total += cost.error(start, b);
            start = b;
        }
        total + beta * (bkps.len() - 1) as f64
    };
    let mut cases = 0;
    let mut bad = Vec::new();
    for i in 0..100 {
        let len = rng.random_range(4..=24);
        let dim = rng.random_range(1..=3);
        let mut data = Vec::with_capacity(len * dim);
        let mut level: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        for _ in 0..len {
            if rng.random_bool(0.15) {
                level.iter_mut().for_each(|l| *l = rng.random_range(-2.0..2.0));
            }
            data.extend(level.iter().map(|l| l + rng.random_range(-0.5..0.5)));
        }
        let signal = Signal::new(data, dim).expect("signal");
        for kind in [CostKind::L1, CostKind::L2] {
            let cost = kind.fit(&signal).expect("cost");
            for beta in [0.5, 1.0, 5.0] {
                let params = SearchParams {
                    penalty: beta,
                    min_size: 1,
                    jump: 1,
                };
                let pelt = detect_with_cost(cost.as_ref(), Method::Pelt, params).expect("pelt");
                let oracle = brute_force_with_cost(cost.as_ref(), &[beta], 1).expect("oracle").remove(0);
                let a = canonical(cost.as_ref(), &pelt.breakpoints, beta);
                let b = canonical(cost.as_ref(), &oracle.breakpoints, beta);
                cases += 1;
                if a != b || pelt.total_cost != oracle.total_cost {
                    bad.push(format!("signal {i} {kind} β={beta}: {a} vs {b}"));
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = bad.is_empty() && secs < FAST_BUDGET_S;
    let mut detail = format!("{}/{cases} exact matches, {secs:.1}s", cases - bad.len());
    if let Some(first) = bad.first() {
        detail.push_str(&format!("; first mismatch {first}"));
    }
    Check::new(ok, detail)
}

fn metrics() -> Check {
    let tau = |s: usize| ToleranceMargin::from_samples(s, 0.2).expect("tau");
    let a = cpd_score(&[100, 200], &[103, 300], tau(5));
    let b = cpd_score(&[100, 200], &[100, 200], tau(5));
    let c = cpd_score(&[100, 200], &[103, 300], tau(1));
    let worked = a.counts == Counts { tp: 1, fp: 1, fn_: 1 }
        && (a.precision, a.recall, a.f1) == (0.5, 0.5, 0.5)
        && (b.counts.fp, b.counts.fn_, b.precision, b.recall, b.f1) == (0, 0, 1.0, 1.0, 1.0)
        && c.counts == Counts { tp: 0, fp: 2, fn_: 2 }
        && c.f1 == 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..50 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let n = rng.random_range(0..12);
            let set: BTreeSet<usize> = (0..n).map(|_| rng.random_range(1..500)).collect();
            set.into_iter().collect()
        };
        let (t, p) = (draw(&mut rng), draw(&mut rng));
        let mut prev = -1.0;
        for s in 1..=60 {
            let f1 = cpd_score(&t, &p, tau(s)).f1;
            if f1 < prev {
                violations += 1;
            }
            prev = f1;
        }
    }
    Check::new(
        worked && violations == 0,
        format!(
            "worked examples {}, {violations} τ-monotonicity violations over 50 random pairs × τ = 1..60 samples",
            if worked { "reproduced" } else { "WRONG" }
        ),
    )
}

/// Shared fixture for the comparison, ablation and transfer criteria.
fn comparison_run() -> Result<(ExperimentOutcome, f64), String> {
    let dir = out_root().join("comparison");
    let _ = fs::remove_dir_all(&dir);
    let cfg = ExperimentConfig {
        seed: 0,
        dataset: DatasetSource::Simgen(GenConfig::default()),
        variants: vec![Variant::Hybrid, Variant::RnnOnly, Variant::CnnOnly],
        out_dir: dir,
        ..ExperimentConfig::default()
    };
    let t0 = Instant::now();
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    Ok((out, t0.elapsed().as_secs_f64()))
}

fn headline(run: &Result<(ExperimentOutcome, f64), String>) -> Check {
    let (out, secs) = match run {
        Ok(r) => r,
        Err(e) => return Check::new(false, format!("experiment failed: {e}")),
    };
    let s = &out.summary;
    let (Some(cpd), Some(class)) = (s.comparison("cpd_f1_tau5s"), s.comparison("class_f1")) else {
        return Check::new(false, "summary lacks the τ=5s or classification comparison");
    };
    let best_ridge = out
        .ml
        .iter()
        .filter(|r| r.spec.classifier.name() == "ridge")
        .map(|r| r.scores.classification.f1)
        .fold(0.0, f64::max);
    let best_cart = out
        .ml
        .iter()
        .filter(|r| r.spec.classifier.name() == "cart")
        .map(|r| r.scores.classification.f1)
        .fold(0.0, f64::max);
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:+.1}%", 100.0 * x));
    let ok = cpd.model > cpd.best_baseline
        && class.model > best_ridge
        && class.model > best_cart
        && class.model >= MIN_HYBRID_F1
        && *secs <= BUDGET_S;
    Check::new(
        ok,
        format!(
            "CPD F1@5s hybrid {:.4} vs best {:.4} [{}] ({}); class F1 hybrid {:.4} vs ridge {:.4}, CART {:.4} ({}); {} test flights; {:.1} min",
            cpd.model,
            cpd.best_baseline,
            cpd.baseline,
            pct(cpd.improvement),
            class.model,
            best_ridge,
            best_cart,
            pct(class.improvement),
            s.test_flights,
            secs / 60.0
        ),
    )
}

fn ablation(run: &Result<(ExperimentOutcome, f64), String>) -> Check {
    let out = match run {
        Ok((o, _)) => o,
        Err(e) => return Check::new(false, format!("experiment failed: {e}")),
    };
    let f1 = |v: Variant| out.variants.iter().find(|s| s.variant == v).map(|s| s.scores.classification.f1);
    let (Some(h), Some(r), Some(c)) = (f1(Variant::Hybrid), f1(Variant::RnnOnly), f1(Variant::CnnOnly)) else {
        return Check::new(false, "missing variant scores");
    };
    let ok = h >= r && r >= h - ABLATION_MARGIN && h > c && h >= r.max(c);
    Check::new(ok, format!("class F1 hybrid {h:.4}, rnn_only {r:.4}, cnn_only {c:.4}"))
}

fn transfer(run: &Result<(ExperimentOutcome, f64), String>) -> Check {
    let out = match run {
        Ok((o, _)) => o,
        Err(e) => return Check::new(false, format!("experiment failed: {e}")),
    };
    let cfg = TransferConfig {
        seed: 0,
        source: out.out_dir.join("checkpoints").join("hybrid.ckpt"),
        target: GenConfig {
            count: 40,
            ..GenConfig::variant_b()
        },
        folds: 5,
        train_per_fold: 5,
        min_eval: 10,
        fine_tune: FineTuneOptions::default(),
        out_dir: out_root().join("transfer"),
        ..TransferConfig::default()
    };
    let t0 = Instant::now();
    let r = match transfer_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => return Check::new(false, format!("transfer failed: {e}")),
    };
    let _ = statetrace::pipeline::write_transfer(&cfg.out_dir, &r);
    let (tl, scratch) = r.mean_class_f1();
    let frozen = r.folds.iter().all(|f| f.frozen_identical);
    Check::new(
        tl >= scratch && frozen && r.folds.len() >= 5,
        format!(
            "mean class F1 over {} folds: fine-tuned {tl:.4}, scratch {scratch:.4}; freeze contract {}; {:.1}s",
            r.folds.len(),
            if frozen { "held" } else { "BROKEN" },
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(dir).expect("inside").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let root = out_root().join("determinism");
    let _ = fs::remove_dir_all(&root);
    let cfg = |name: &str| ExperimentConfig {
        seed: 5,
        dataset: DatasetSource::Simgen(GenConfig {
            count: 12,
            ..GenConfig::default()
        }),
        model: ModelConfig {
            max_epochs: 3,
            ..ModelConfig::desk()
        },
        variants: vec![Variant::Hybrid, Variant::CnnOnly],
        cpd: CpdGrid {
            methods: vec![Method::BottomUp, Method::Window { width: 100 }],
            costs: vec![CostKind::L2, CostKind::Linear],
            ..CpdGrid::default()
        },
        ml: MlGrid {
            specs: statetrace::baselines::default_grid().into_iter().filter(|s| s.window == 5).collect(),
            ..MlGrid::default()
        },
        out_dir: root.join(name),
        ..ExperimentConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    let runs: Result<Vec<_>, _> = pool.install(|| ["a", "b"].map(|n| run_experiment(&cfg(n))).into_iter().collect());
    if let Err(e) = runs {
        return Check::new(false, format!("experiment failed: {e}"));
    }
    let (a, b) = (root.join("a"), root.join("b"));
    let files = csv_files(&a);
    if files != csv_files(&b) || files.is_empty() {
        return Check::new(false, "runs produced different report file sets");
    }
    let differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    Check::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} report CSVs byte-identical across two single-threaded runs", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn invariants() -> Check {
    let mut failures: Vec<String> = Vec::new();
    let mut note = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // softmax rows
    let model = Model64::new(&tiny_config(Variant::Hybrid), 3).expect("model");
    let batch = random_batch(&model, &[30], 8);
    let probs = model.forward(&batch[0].0, 30).expect("forward");
    let worst_row = probs
        .chunks(4)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    note(worst_row <= SOFTMAX_TOL, "softmax rows sum to 1");

    // dice range and exact zero
    let labels: Vec<usize> = (0..30).map(|t| (t / 8) % 4).collect();
    let onehot: Vec<f64> = labels.iter().flat_map(|&l| (0..4).map(move |c| f64::from(u8::from(c == l)))).collect();
    for kind in [DiceKind::Soft, DiceKind::Generalized] {
        let (zero, _) = dice_loss(&[&onehot[..]], &[&labels[..]], 4, kind).expect("dice");
        let (l, _) = dice_loss(&[&probs[..]], &[&labels[..]], 4, kind).expect("dice");
        note(zero == 0.0, "dice is exactly 0 on a perfect prediction");
        note((0.0..1.0).contains(&l), "dice lies in [0, 1)");
    }

    // a trained checkpoint for the padding and round-trip checks
    let ds = generate_dataset(&GenConfig {
        count: 6,
        seed: 21,
        ..GenConfig::default()
    })
    .expect("dataset");
    let ck = train::<f32>(
        &ModelConfig {
            max_epochs: 2,
            ..ModelConfig::desk()
        },
        &ds,
        None,
    )
    .expect("train");

    // padding invariance of predictions and metrics
    let mut plain = Vec::new();
    let mut padded = Vec::new();
    let mut truth = Vec::new();
    let mut padded_truth = Vec::new();
    for (i, f) in ds.flights().iter().enumerate() {
        let p = ck.predict_states(&f.trace).expect("predict");
        let (tr, seq) = pad_and_mask(&f.trace, &f.labels(), f.trace.len() + 50 * (i + 1), ds.catalog()).expect("pad");
        let q = ck.predict_masked(&tr, seq.mask()).expect("predict padded");
        note(q.labels()[..f.trace.len()] == *p.labels(), "padded predictions match on the valid prefix");
        truth.push(f.labels());
        plain.push(p);
        padded.push(statetrace::trace::LabelSequence::new(q.labels().to_vec(), seq.mask().to_vec()).expect("seq"));
        padded_truth.push(seq);
    }
    let a = score_sequences(&truth, &plain, 11, ds.sample_period(), &[1.0, 3.0, 5.0]).expect("score");
    let b = score_sequences(&padded_truth, &padded, 11, ds.sample_period(), &[1.0, 3.0, 5.0]).expect("score");
    note(a == b, "metrics unchanged by padding");

    // expand / extract
    for f in ds.flights() {
        let seq = expand_annotation(&f.annotation, f.trace.len()).expect("expand");
        note(extract_change_points(&seq).ok().as_ref() == Some(&f.annotation), "extract(expand(cp)) = cp");
    }

    // checkpoint round trip
    let dir = out_root().join("invariants");
    let _ = fs::remove_dir_all(&dir);
    let path = dir.join("model.ckpt");
    let same = ck.save(&path).is_ok()
        && Checkpoint32::load(&path).is_ok_and(|back| {
            ds.flights().iter().all(|f| {
                let x = ck.probabilities(&f.trace).expect("probs");
                let y = back.probabilities(&f.trace).expect("probs");
                x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
            })
        });
    note(same, "checkpoint round trip is bit-exact");

    // ridge against the normal equations
    let (scaled, _) = normalize_channels(&ds, None).expect("normalize");
    let mut m = SampleMatrix::new(3 * 10);
    for f in scaled.flights() {
        append_windows(&mut m, f.trace.samples(), 10, f.labels().labels(), 3, 7).expect("windows");
    }
    let (alpha, k, d) = (0.5, 11, m.dim);
    let fit = RidgeClassifier::fit(&m, k, alpha).expect("ridge");
    let xa = DMatrix::from_fn(m.rows(), d + 1, |i, j| if j < d { m.row(i)[j] } else { 1.0 });
    let y = DMatrix::from_fn(m.rows(), k, |i, c| f64::from(u8::from(m.y[i] == c)));
    let mut lhs = xa.transpose() * &xa;
    for j in 0..d {
        lhs[(j, j)] += alpha;
    }
    let sol = lhs.lu().solve(&(xa.transpose() * y)).expect("oracle solve");
    let mut ridge_err: f64 = 0.0;
    for c in 0..k {
        for j in 0..d {
            ridge_err = ridge_err.max((sol[(j, c)] - fit.weights[j * k + c]).abs());
        }
        ridge_err = ridge_err.max((sol[(d, c)] - fit.intercept[c]).abs());
    }
    note(ridge_err <= RIDGE_TOL, "ridge matches the normal equations");

    let ok = failures.is_empty();
    let mut detail = format!("softmax max |Σ−1| {worst_row:.1e}, ridge max |Δ| {ridge_err:.1e}");
    if !ok {
        failures.dedup();
        detail.push_str(&format!("; failed: {}", failures.join("; ")));
    }
    Check::new(ok, detail)
}

fn main() {
    let only: BTreeSet<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: u8| only.is_empty() || only.contains(&i);
    let mut failed = 0;
    let mut report = |i: u8, name: &str, check: Check| {
        let tag = if check.ok { "PASS" } else { "FAIL" };
        failed += usize::from(!check.ok);
        println!("{tag} criterion {i} ({name}): {}", check.detail);
    };

    if want(1) {
        report(1, "gradient oracle", gradients());
    }
    if want(2) {
        report(2, "pelt exactness", pelt_exact());
    }
    if want(3) {
        report(3, "metric correctness", metrics());
    }
    if want(4) || want(5) || want(6) {
        let run = comparison_run();
        if want(4) {
            report(4, "hybrid vs baselines", headline(&run));
        }
        if want(5) {
            report(5, "architecture ablation", ablation(&run));
        }
        if want(6) {
            report(6, "transfer learning", transfer(&run));
        }
    }
    if want(7) {
        report(7, "determinism", determinism());
    }
    if want(8) {
        report(8, "structural invariants", invariants());
    }
    println!("{failed} criteria failed");
    if failed > 0 && std::env::var_os("STATETRACE_ACCEPT_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
