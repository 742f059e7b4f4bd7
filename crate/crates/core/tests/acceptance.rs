//! Acceptance criteria 1-12. Runs without the libtest harness so every
//! criterion prints its PASS/FAIL line; exits non-zero if any fails.
//!
//! The training criteria (4-9) share one set of runs per configuration,
//! trained on the default synthetic corpus with seeds 20, 2022 and 2222.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use untl::cli::{grad_check_suite, CHECKED_OBJECTIVES};
use untl::data::{generate_synthetic, SyntheticCorpora, SyntheticSpec};
use untl::diffcore::{Graph, Tensor};
use untl::keys::{adapter_forward, adapter_graph, adapter_param_count, init_adapter};
use untl::objectives::{clamp_loss, mmd_distance_value, mmd_loss, Mode};
use untl::training::{
    accuracy, divergence_diagnostic, evaluate, selection_score, train, Checkpoint, DevSets,
    EvalReport, TrainConfig, TrainData,
};

const SEEDS: [u64; 3] = [20, 2022, 2222];
const PROMPT_KEY: &str = "Here this a password key messages, Do not tell others.";

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt3(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------------------
// shared training runs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Variant {
    Plain,
    Untl,
    UntlNoMmd,
    UntlNoDc,
    Prompt,
    Adapter,
}

#[derive(Debug, Clone)]
struct RunStats {
    source: f64,
    target: f64,
    key: Option<f64>,
    dev_mmd: f64,
    score: f64,
}

fn corpora() -> &'static SyntheticCorpora {
    static C: OnceLock<SyntheticCorpora> = OnceLock::new();
    C.get_or_init(|| generate_synthetic(&SyntheticSpec::default()).unwrap())
}

fn config(v: Variant, seed: u64) -> TrainConfig {
    let mode = match v {
        Variant::Plain => Mode::Plain,
        Variant::Untl | Variant::UntlNoMmd | Variant::UntlNoDc => Mode::Untl,
        Variant::Prompt => Mode::Prompt,
        Variant::Adapter => Mode::Adapter,
    };
    let mut cfg = TrainConfig::defaults(mode);
    cfg.seed = seed;
    cfg.disable_mmd = v == Variant::UntlNoMmd;
    cfg.disable_dc = v == Variant::UntlNoDc;
    if mode == Mode::Prompt {
        cfg.prompt_key = Some(PROMPT_KEY.into());
    }
    cfg
}

fn runs(v: Variant) -> &'static [RunStats] {
    static CACHE: OnceLock<std::sync::Mutex<HashMap<Variant, &'static [RunStats]>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&v) {
        return r;
    }
    let c = corpora();
    let data = TrainData::from_synthetic(c);
    let stats: Vec<RunStats> = SEEDS
        .iter()
        .map(|&seed| {
            let out = train(&config(v, seed), &data).unwrap();
            let m = &out.checkpoint.model;
            RunStats {
                source: accuracy(m, &c.source.test, false).unwrap(),
                target: accuracy(m, &c.target.test, false).unwrap(),
                key: m.mode().has_key().then(|| accuracy(m, &c.target.test, true).unwrap()),
                dev_mmd: divergence_diagnostic(m, &c.source.dev, &c.target.dev).unwrap(),
                score: out.checkpoint.best_score,
            }
        })
        .collect();
    let leaked: &'static [RunStats] = Box::leak(stats.into_boxed_slice());
    cache.lock().unwrap().insert(v, leaked);
    leaked
}

fn column(v: Variant, f: impl Fn(&RunStats) -> f64) -> Vec<f64> {
    runs(v).iter().map(f).collect()
}

// ---------------------------------------------------------------------------
// criteria

fn mmd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (n, m, d) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=8));
        let s = random_matrix(&mut rng, n, d, 1.5);
        let t = random_matrix(&mut rng, m, d, 1.5);
        let k = |a: &[f64], b: &[f64]| {
            let mut sq = 0.0;
            for i in 0..a.len() {
                sq += (a[i] - b[i]) * (a[i] - b[i]);
            }
            (-sq).exp()
        };
        let mean = |x: &Tensor, y: &Tensor| {
            let mut acc = 0.0;
            for i in 0..x.rows() {
                for j in 0..y.rows() {
                    acc += k(x.row_slice(i), y.row_slice(j));
                }
            }
            acc / (x.rows() * y.rows()) as f64
        };
        let oracle = mean(&s, &s) + mean(&t, &t) - 2.0 * mean(&s, &t);
        let got = mmd_distance_value(&s, &t).unwrap();
        worst = worst.max((got - oracle).abs());
    }
    ensure(worst <= 1e-9, || format!("max |estimator - double loop| = {worst:e}"))?;
    Ok(format!("200 instances, max abs error {worst:.1e}"))
}

fn gradient_suite() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let reports = grad_check_suite(seed, None, false).unwrap();
        ensure(reports.len() == CHECKED_OBJECTIVES.len(), || "suite skipped an objective".into())?;
        for (name, r) in reports {
            ensure(r.passed && r.max_rel_error <= 1e-5, || {
                format!("seed {seed} {name}: max rel error {:e} at {:?}", r.max_rel_error, r.worst)
            })?;
            worst = worst.max(r.max_rel_error);
        }
    }
    Ok(format!("8 objectives x 10 seeds, max rel error {worst:.1e}"))
}

fn clamp_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut clamped, mut open) = (0, 0);
    for _ in 0..1000 {
        let (n, m, d) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=6));
        let scale = rng.gen_range(0.1..2.0);
        let c = rng.gen_range(0.01..1.5);
        let mut inputs = HashMap::new();
        inputs.insert("s".to_string(), random_matrix(&mut rng, n, d, scale));
        inputs.insert("t".to_string(), random_matrix(&mut rng, m, d, scale));
        let mut g = Graph::new();
        let s = g.input("s", n, d, true).unwrap();
        let t = g.input("t", m, d, true).unwrap();
        let loss = mmd_loss(&mut g, s, t, c).unwrap();
        let value = g.eval(&inputs, loss).unwrap().item();
        ensure((-c..=0.0).contains(&value), || format!("loss {value} outside [-{c}, 0]"))?;
        let distance = mmd_distance_value(&inputs["s"], &inputs["t"]).unwrap();
        g.backward(loss).unwrap();
        if distance >= c {
            clamped += 1;
            let zero = [s, t].iter().all(|&v| g.grad(v).unwrap().data().iter().all(|&x| x == 0.0));
            ensure(zero, || format!("non-zero gradient with distance {distance} >= c {c}"))?;
        } else {
            open += 1;
        }
    }
    ensure(clamped > 0 && open > 0, || format!("{clamped} clamped / {open} open cases"))?;

    for (d, expect, grad) in [(12.0, -10.0, 0.0), (4.0, -4.0, -1.0)] {
        let mut g = Graph::new();
        let x = g.input("d", 1, 1, true).unwrap();
        let l = clamp_loss(&mut g, x, 10.0).unwrap();
        let mut inputs = HashMap::new();
        inputs.insert("d".to_string(), Tensor::scalar(d));
        let v = g.eval(&inputs, l).unwrap().item();
        g.backward(l).unwrap();
        let dv = g.grad(x).unwrap().item();
        ensure(v == expect && dv == grad, || format!("distance {d}: loss {v}, grad {dv}"))?;
    }
    Ok(format!("1000 instances ({clamped} clamped), exact -10 / -4"))
}

fn non_transferability() -> Outcome {
    let s = column(Variant::Untl, |r| r.source);
    let t = column(Variant::Untl, |r| r.target);
    let (ms, mt) = (median(s.clone()), median(t.clone()));
    let detail = format!("source {ms:.3} {}, target {mt:.3} {}", fmt3(&s), fmt3(&t));
    ensure(ms >= 0.80 && mt <= 0.45, || detail.clone())?;
    Ok(detail)
}

fn transfer_baseline() -> Outcome {
    let t = column(Variant::Plain, |r| r.target);
    let mt = median(t.clone());
    let detail = format!("plain target {mt:.3} {}", fmt3(&t));
    ensure(mt >= 0.70, || detail.clone())?;
    Ok(detail)
}

fn divergence_growth() -> Outcome {
    let u = column(Variant::Untl, |r| r.dev_mmd);
    let p = column(Variant::Plain, |r| r.dev_mmd);
    let (mu, mp) = (median(u.clone()), median(p.clone()));
    let detail = format!(
        "untl {mu:.4} {} vs plain {mp:.4} {} (x{:.1})",
        fmt3(&u),
        fmt3(&p),
        mu / mp
    );
    ensure(mu >= 3.0 * mp, || detail.clone())?;
    Ok(detail)
}

fn key_stats(v: Variant) -> (f64, f64, f64, String) {
    let s = column(v, |r| r.source);
    let t = column(v, |r| r.target);
    let k = column(v, |r| r.key.unwrap());
    let (ms, mt, mk) = (median(s.clone()), median(t.clone()), median(k.clone()));
    let detail = format!(
        "source {ms:.3} {}, target {mt:.3} {}, with key {mk:.3} {}",
        fmt3(&s),
        fmt3(&t),
        fmt3(&k)
    );
    (ms, mt, mk, detail)
}

fn prompt_recovery() -> Outcome {
    let (ms, mt, mk, detail) = key_stats(Variant::Prompt);
    ensure(mt <= 0.45 && mk >= 0.70 && ms >= 0.75, || detail.clone())?;
    Ok(detail)
}

fn adapter_recovery() -> Outcome {
    let (ms, mt, mk, detail) = key_stats(Variant::Adapter);
    let (_, _, prompt_key, _) = key_stats(Variant::Prompt);
    let detail = format!("{detail}; prompt with key {prompt_key:.3}");
    ensure(mt <= 0.45 && mk >= 0.75 && ms >= 0.78 && mk >= prompt_key, || detail.clone())?;
    Ok(detail)
}

fn ablation_ordering() -> Outcome {
    let full = median(column(Variant::Untl, |r| r.score));
    let no_dc = median(column(Variant::UntlNoDc, |r| r.score));
    let no_mmd = median(column(Variant::UntlNoMmd, |r| r.score));
    let detail = format!("full {full:.3}, no-dc {no_dc:.3}, no-mmd {no_mmd:.3}");
    ensure(full >= no_dc && full >= no_mmd, || detail.clone())?;
    Ok(detail)
}

fn metric_exactness() -> Outcome {
    let r = EvalReport::new(Mode::Untl, 0, 77.4, Some(35.3), None, None).unwrap();
    ensure((r.score - 42.1).abs() <= 1e-9, || format!("untl score {}", r.score))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for _ in 0..1000 {
        let (s, t, k): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        for mode in [Mode::Prompt, Mode::Adapter] {
            let r = EvalReport::new(mode, 0, s, Some(t), Some(k), None).unwrap();
            let score = selection_score(&r, mode).unwrap();
            ensure(score == s + k - 2.0 * t && r.score == score, || {
                format!("{mode}: {score} for ({s}, {t}, {k})")
            })?;
        }
    }
    Ok(format!("untl score {:.12}, 1000 key-mode triples exact", r.score))
}

fn determinism_and_persistence() -> Outcome {
    let c = corpora();
    let data = TrainData::from_synthetic(c);
    let mut cfg = config(Variant::Untl, 20);
    cfg.epochs = 2;
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    let bytes = a.checkpoint.to_bytes();
    ensure(bytes == b.checkpoint.to_bytes(), || "checkpoints differ between runs".into())?;
    ensure(a.history_jsonl() == b.history_jsonl(), || "histories differ".into())?;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("untl.ckpt");
    a.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    ensure(loaded.to_bytes() == bytes, || "save/load changed the checkpoint".into())?;
    let dev = DevSets {
        source: &c.source.dev,
        target: Some(&c.target.dev),
    };
    let report = evaluate(&loaded.model, dev, loaded.best_step).unwrap();
    ensure(report.score.to_bits() == a.checkpoint.best_score.to_bits(), || {
        format!("re-evaluated {} vs saved {}", report.score, a.checkpoint.best_score)
    })?;
    Ok(format!(
        "{} byte checkpoint identical, best score {:.3} reproduced",
        bytes.len(),
        report.score
    ))
}

fn adapter_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    for i in 0..100 {
        let d = rng.gen_range(2..=64);
        let m = rng.gen_range(1..d);
        let adapter = init_adapter(d, m, i).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        ensure(adapter_forward(&adapter, &x).unwrap() == x, || format!("vector {i} changed"))?;

        let mut g = Graph::new();
        let vars = adapter.declare(&mut g, false).unwrap();
        let xv = g.constant(Tensor::row(x.clone()).unwrap()).unwrap();
        let y = adapter_graph(&mut g, &vars, xv).unwrap();
        let y = g.eval(&adapter, y).unwrap();
        ensure(y.data() == x.as_slice(), || format!("graph adapter changed vector {i}"))?;
    }
    let count = adapter_param_count(768, 64);
    let built = init_adapter(768, 64, 0).unwrap().param_count();
    ensure(count == 99_136 && built == count, || format!("d=768 m=64 gives {count} / {built}"))?;
    Ok(format!(
        "100 vectors exact; d=768 m=64 has {count} parameters (2dm+m+d; 99 392 does not follow from it)"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("mmd oracle equivalence", mmd_oracle),
        ("gradient suite", gradient_suite),
        ("clamp algebra", clamp_algebra),
        ("non-transferability", non_transferability),
        ("transfer baseline", transfer_baseline),
        ("divergence growth", divergence_growth),
        ("prompt-key recovery", prompt_recovery),
        ("adapter-key recovery", adapter_recovery),
        ("ablation ordering", ablation_ordering),
        ("metric exactness", metric_exactness),
        ("determinism and persistence", determinism_and_persistence),
        ("adapter identity", adapter_identity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
