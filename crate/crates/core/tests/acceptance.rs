//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p dbn-core --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dbn_core::checks::{self, CheckOutcome};
use dbn_core::classifier::{LabeledDataset, Network};
use dbn_core::experiment::{emit_report, run_experiment, ExperimentConfig};
use dbn_core::hyper::Hyper;
use dbn_core::numerics::RngStream;
use dbn_core::strategies::{
    fine_tune, pretrain_reference, train, train_with_observer, BoxConstraint, FineTuneOutcome,
    References, Splits, StrategyId,
};

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn from_check(id: usize, limit: Duration, c: CheckOutcome) -> Line {
    let in_time = c.elapsed <= limit;
    Line {
        id,
        name: c.name,
        passed: c.passed && in_time,
        detail: format!("{}; {:.2?} (limit {limit:?})", c.detail, c.elapsed),
        elapsed: c.elapsed,
    }
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Line {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Line {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Two noisy binary prototypes per class over 8 inputs, 3 classes.
fn toy_splits(seed: u64) -> Splits {
    let mut rng = RngStream::new(seed, 77);
    let protos: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..8).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut make = |n: usize| {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 3;
            inputs.push(
                protos[y]
                    .iter()
                    .map(|&p| if rng.bernoulli(0.1) { 1.0 - p } else { p })
                    .collect(),
            );
            labels.push(y);
        }
        LabeledDataset::new(inputs, labels, 3).unwrap()
    };
    Splits {
        train: make(60),
        valid: make(30),
        test: make(30),
    }
}

fn toy_hyper(epochs: usize) -> Hyper {
    Hyper {
        pretrain_epochs: 5,
        pretrain_lr: 0.05,
        finetune_epochs: epochs,
        batch_size: 6,
        delta: 0.05,
        ..Hyper::default()
    }
}

const ARCH: [usize; 3] = [8, 6, 5];

fn references(splits: &Splits, hyper: &Hyper, rng: &RngStream) -> References {
    let pretrained = pretrain_reference(&ARCH, &splits.train, hyper, rng).unwrap();
    let mut refs = References {
        pretrained: Some(pretrained),
        two_phase: None,
    };
    let two_phase = train(StrategyId::DbnFfn, &ARCH, splits, hyper, rng, &refs).unwrap();
    refs.two_phase = Some(two_phase.best.network);
    refs
}

fn box_feasibility() -> Result<String, String> {
    let splits = toy_splits(1);
    let hyper = toy_hyper(50);
    let rng = RngStream::new(7, 0);
    let refs = references(&splits, &hyper, &rng);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for s in [StrategyId::ElDbn, StrategyId::ElDbnOpt, StrategyId::FfnDbn, StrategyId::FfnDbnOpt] {
        let reference = if s.needs_two_phase() {
            refs.two_phase.as_ref().unwrap().dbn.flatten()
        } else {
            refs.pretrained.as_ref().unwrap().params.flatten()
        };
        let mut observe = |_: usize, net: &Network| {
            checked += 1;
            let worst = net
                .dbn
                .flatten()
                .iter()
                .zip(&reference)
                .fold(0.0f64, |m, (v, r)| m.max((v - r).abs()));
            if worst > hyper.delta {
                violations += 1;
            }
        };
        let out = train_with_observer(s, &ARCH, &splits, &hyper, &rng, &refs, &mut observe)
            .map_err(|e| format!("{s}: {e}"))?;
        if out.model.history.epochs.len() != 50 {
            return Err(format!("{s}: ran {} epochs", out.model.history.epochs.len()));
        }
    }
    let msg = format!("{violations} violations over {checked} epoch ends (δ = {})", hyper.delta);
    if violations == 0 && checked == 200 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn same_trajectory(a: &FineTuneOutcome, b: &FineTuneOutcome) -> bool {
    let bits = |n: &Network| n.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    a.epochs.len() == b.epochs.len()
        && a.epochs.iter().zip(&b.epochs).all(|(x, y)| {
            x.objective.to_bits() == y.objective.to_bits()
                && x.train_error == y.train_error
                && x.valid_error == y.valid_error
                && x.test_error == y.test_error
        })
        && bits(&a.network) == bits(&b.network)
        && bits(&a.best.network) == bits(&b.best.network)
}

fn reductions() -> Result<String, String> {
    let splits = toy_splits(2);
    let mut hyper = toy_hyper(15);
    hyper.rho.initial = 0.0;
    hyper.mu.initial = 0.0;
    let rng = RngStream::new(9, 0);
    let refs = references(&splits, &hyper, &rng);
    let pre = Network::with_zero_head(refs.pretrained.as_ref().unwrap().params.clone(), 3);
    let opt = refs.two_phase.clone().unwrap();
    let run = |s, start: &Network, bx: Option<&BoxConstraint>| {
        fine_tune(s, start.clone(), &splits, &hyper, &rng, bx, &mut |_, _| {}).map_err(|e| e.to_string())
    };
    let unbounded = |n: &Network| BoxConstraint::around(&n.dbn, f64::INFINITY).unwrap();

    let mut failures = Vec::new();
    for (label, start) in [("pretrained start", &pre), ("two-phase start", &opt)] {
        let base = run(StrategyId::DbnFfn, start, None)?;
        let cases = [
            ("DBN+loss ρ=0", run(StrategyId::DbnPlusLoss, start, None)?),
            ("BL μ=0", run(StrategyId::Bilevel, start, None)?),
            ("FFN-DBN δ=∞", run(StrategyId::FfnDbn, start, Some(&unbounded(start)))?),
            ("FFN-DBNOPT δ=∞", run(StrategyId::FfnDbnOpt, start, Some(&unbounded(start)))?),
        ];
        for (name, out) in cases {
            if !same_trajectory(&base, &out) {
                failures.push(format!("{name} ({label})"));
            }
        }
    }
    // Through the public entry point as well.
    let mut inf = hyper.clone();
    inf.delta = f64::INFINITY;
    let a = train(StrategyId::DbnFfn, &ARCH, &splits, &inf, &rng, &refs).map_err(|e| e.to_string())?;
    let b = train(StrategyId::FfnDbn, &ARCH, &splits, &inf, &rng, &refs).map_err(|e| e.to_string())?;
    if a.model.network != b.model.network {
        failures.push("train(FFN-DBN, δ=∞)".into());
    }
    if failures.is_empty() {
        Ok("8 fine-tuning runs and 1 end-to-end run bitwise equal to two-phase".into())
    } else {
        Err(format!("diverged: {}", failures.join(", ")))
    }
}

fn desk_scale() -> Result<String, String> {
    let root = workspace();
    let data = root.join("data/mnist/images-idx3-ubyte.gz");
    if !data.exists() {
        return Err(format!("missing {}", data.display()));
    }
    let mut cfg = ExperimentConfig::load(root.join("configs/desk_mnist.toml")).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    let mut reports = Vec::new();
    let mut first_run = Duration::ZERO;
    for pass in 0..2 {
        cfg.output_dir = tmp.path().join(format!("run{pass}"));
        let start = Instant::now();
        let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
        if pass == 0 {
            first_run = start.elapsed();
        }
        let path = tmp.path().join(format!("report{pass}.tsv"));
        emit_report(&report, &path).map_err(|e| e.to_string())?;
        reports.push((report, std::fs::read(&path).map_err(|e| e.to_string())?));
    }
    let (report, bytes) = &reports[0];
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for r in &report.strategies {
        let run = &r.runs[0];
        match (run.test_error, &run.error) {
            (Some(e), None) => {
                summary.push(format!("{} {:.2}%", r.strategy, 100.0 * e));
                let limit = if r.strategy == StrategyId::DbnFfn { 0.12 } else { 0.25 };
                if e > limit {
                    problems.push(format!("{} error {:.2}% > {:.0}%", r.strategy, 100.0 * e, 100.0 * limit));
                }
            }
            (_, err) => problems.push(format!("{} failed: {err:?}", r.strategy)),
        }
    }
    if report.strategies.len() != 7 {
        problems.push(format!("{} strategies reported", report.strategies.len()));
    }
    if first_run > Duration::from_secs(15 * 60) {
        problems.push(format!("run took {first_run:.0?}"));
    }
    if bytes != &reports[1].1 {
        problems.push("rerun report differs".into());
    }
    let detail = format!("{}; run {:.1?}", summary.join(", "), first_run);
    if problems.is_empty() {
        Ok(detail + "; rerun identical")
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn protocol_fidelity() -> Result<String, String> {
    let root = workspace().join("configs");
    let load = |name: &str| ExperimentConfig::load(root.join(name)).map_err(|e| format!("{name}: {e}"));
    let mut problems = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            problems.push(name.to_string());
        }
    };

    let all: Vec<StrategyId> = StrategyId::ALL.to_vec();
    let mnist = load("mnist.toml")?;
    let h = &mnist.hyper;
    expect("mnist architecture", mnist.architecture == [784, 1000, 1000, 1000]);
    expect(
        "mnist hyper",
        (h.pretrain_epochs, h.pretrain_lr, h.finetune_epochs, h.finetune_lr, h.batch_size) == (100, 0.01, 300, 0.1, 10),
    );
    expect("mnist seeds", mnist.seeds.len() == 5);
    expect("mnist strategies", mnist.strategies == all);

    for (file, fraction) in [("ni_20.toml", 0.2), ("ni_30.toml", 0.3), ("ni_40.toml", 0.4)] {
        let ni = load(file)?;
        let h = &ni.hyper;
        expect(file, ni.architecture == [41, 15, 15]);
        expect(
            file,
            (h.pretrain_epochs, h.pretrain_lr, h.finetune_epochs, h.finetune_lr, h.batch_size) == (100, 0.01, 500, 0.1, 1000),
        );
        expect(file, ni.dataset.subsample == Some(fraction));
        expect(file, ni.dataset.schema.as_ref().and_then(|s| s.classes) == Some(5));
        expect(file, ni.seeds.len() == 5 && ni.strategies == all);
    }

    let isolet = load("isolet.toml")?;
    let h = &isolet.hyper;
    expect("isolet architecture", isolet.architecture == [617, 1000]);
    expect(
        "isolet hyper",
        (h.pretrain_epochs, h.pretrain_lr, h.finetune_epochs, h.finetune_lr, h.batch_size) == (100, 0.005, 300, 0.1, 20),
    );
    expect("isolet split", isolet.dataset.split.counts == Some([5600, 638, 0]));
    expect(
        "isolet classes",
        isolet.dataset.schema.as_ref().and_then(|s| s.label_values.as_ref()).map(Vec::len) == Some(26),
    );
    expect("isolet seeds", isolet.seeds.len() == 5 && isolet.strategies == all);

    if problems.is_empty() {
        Ok("mnist, ni_20/30/40 and isolet configs match".into())
    } else {
        Err(format!("mismatched: {}", problems.join(", ")))
    }
}

fn main() {
    // libtest flags (e.g. from `cargo test -- --nocapture`) are ignored; a
    // bare filter argument selects criteria by number.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| only.is_empty() || only.contains(&id);
    let seed = 2024;
    let mut lines = Vec::new();
    let s = Duration::from_secs;

    if want(1) {
        lines.push(from_check(1, s(5), checks::likelihood_gradient(seed)));
    }
    if want(2) {
        lines.push(from_check(2, s(10), checks::hessian(seed)));
    }
    if want(3) {
        lines.push(from_check(3, s(60), checks::cd_consistency(seed, 100_000, 50)));
    }
    if want(4) {
        lines.push(from_check(4, s(5), checks::backprop(seed)));
    }
    if want(5) {
        lines.push(from_check(5, s(30), checks::expected_loss_check(seed, 20_000)));
    }
    if want(6) {
        lines.push(from_check(6, s(10), checks::penalty_gradient(seed)));
    }
    if want(7) {
        lines.push(timed(7, "box feasibility", box_feasibility));
    }
    if want(8) {
        lines.push(timed(8, "reduction identities", reductions));
    }
    if want(9) {
        lines.push(timed(9, "desk-scale end to end", desk_scale));
    }
    if want(10) {
        lines.push(timed(10, "protocol fidelity", protocol_fidelity));
    }

    let mut failed = 0;
    for l in &lines {
        let tag = if l.passed { "PASS" } else { "FAIL" };
        failed += !l.passed as usize;
        println!("{tag} criterion {:>2} {} ({:.2?}): {}", l.id, l.name, l.elapsed, l.detail);
    }
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
