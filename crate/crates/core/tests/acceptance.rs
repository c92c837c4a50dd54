//! End-to-end acceptance run on the default seed-0 stream. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use artsy::checkpoint;
use artsy::config::{ExperimentConfig, GateMode, Method, Scoring};
use artsy::engine::{self, ModelState, RunOutcome};
use artsy::format::{load_feature_stream, write_feature_stream};
use artsy::metrics;
use artsy::prototype::FeatureHead;
use artsy::report::strip_timing;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn run_mode(cfg: &ExperimentConfig, stream: &artsy::data::TaskStream) -> RunOutcome {
    engine::run(stream, cfg).expect("run succeeds")
}

fn with_mode(mode: GateMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.gate.mode = mode;
    cfg
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn gradient_suite() -> Verdict {
    let clock = Instant::now();
    let r = common::gradient_suite(140, 2024);
    let secs = clock.elapsed().as_secs_f64();
    let pass = r.trials >= 100 && r.max_rel_err <= 1e-4 && secs < 10.0 && r.ops.len() == common::OPS.len();
    verdict(
        pass,
        format!(
            "{} trials over {} ops, {} entries, max rel err {:.2e} ({}), {:.2}s",
            r.trials,
            r.ops.len(),
            r.checked_entries,
            r.max_rel_err,
            r.worst_case,
            secs
        ),
    )
}

fn zero_forgetting(stream: &artsy::data::TaskStream) -> (Verdict, RunOutcome) {
    let clock = Instant::now();
    let cfg = with_mode(GateMode::Oracle);
    let (backbone, _) = engine::build_backbone(stream, &cfg).unwrap();
    let mut state = ModelState::new(backbone, Some(&stream.base), &cfg).unwrap();
    let x1 = &stream.incremental[0].test.features;
    let truth = vec![1; x1.rows()];
    state.train_step(&stream.incremental[0], &cfg).unwrap();
    let first = state.infer(x1, Some(&truth)).unwrap().predictions;
    for task in &stream.incremental[1..] {
        state.train_step(task, &cfg).unwrap();
    }
    let last = state.infer(x1, Some(&truth)).unwrap().predictions;
    let secs = clock.elapsed().as_secs_f64();
    let outcome = run_mode(&cfg, stream);
    let column_one: Vec<f64> = (1..=5).map(|t| outcome.report.matrix.get(t, 1).unwrap()).collect();
    let constant = column_one.iter().all(|a| a.to_bits() == column_one[0].to_bits());
    let pass = first == last && constant && secs < 120.0;
    (
        verdict(
            pass,
            format!(
                "{} task-1 predictions identical after task 1 and task 5: {}; A[t][1] constant: {constant}; {secs:.2}s",
                first.len(),
                first == last
            ),
        ),
        outcome,
    )
}

fn main() -> ExitCode {
    let total = Instant::now();
    let base = ExperimentConfig::default();
    let stream = engine::load_stream(&base).expect("default stream");

    let mut results: Vec<(&str, Verdict)> = Vec::new();
    results.push(("autodiff matches finite differences", gradient_suite()));

    let (v2, oracle) = zero_forgetting(&stream);
    results.push(("oracle gates never forget task 1", v2));

    let learned = run_mode(&base, &stream);
    let sequential = run_mode(
        &ExperimentConfig {
            method: Method::Sequential,
            ..base.clone()
        },
        &stream,
    );
    let functional = run_mode(&with_mode(GateMode::Functional), &stream);
    let noise = run_mode(&with_mode(GateMode::Noise), &stream);
    let lr = &learned.report;

    // 3: forgetting contrast.
    {
        let (l, a) = (lr.last_final().unwrap(), lr.avg_final().unwrap());
        let sr = &sequential.report;
        let (sl, sf) = (sr.last_final().unwrap(), *sr.final_task_only.last().unwrap());
        let pass = l >= 0.95 && a >= 0.95 && sl <= 0.5 && sf >= 0.9;
        results.push((
            "gated adapters beat sequential fine-tuning",
            verdict(
                pass,
                format!(
                    "learned Last_5 {} Avg_5 {}; sequential Last_5 {} final-task {}",
                    pct(l),
                    pct(a),
                    pct(sl),
                    pct(sf)
                ),
            ),
        ));
    }

    // 4: routing quality per regime.
    {
        let routing = |o: &RunOutcome| o.report.steps.iter().map(|s| s.routing_accuracy).collect::<Vec<_>>();
        let (l, o, f) = (routing(&learned), routing(&oracle), routing(&functional));
        let pass = l.iter().all(|&r| r >= 0.95)
            && o.iter().all(|&r| r == 1.0)
            && f[1..].iter().all(|&r| r == 0.0);
        let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ");
        results.push((
            "routing accuracy by gate mode",
            verdict(pass, format!("learned [{}] oracle [{}] functional [{}]", fmt(&l), fmt(&o), fmt(&f))),
        ));
    }

    // 5: noise ablation.
    {
        let nr = &noise.report;
        let dl = lr.last_final().unwrap() - nr.last_final().unwrap();
        let da = lr.avg_final().unwrap() - nr.avg_final().unwrap();
        let b = &nr.gate_balanced_accuracy;
        let mean_b = b.iter().sum::<f64>() / b.len() as f64;
        let pass = dl >= 0.10 && da >= 0.10 && (mean_b - 0.5).abs() <= 0.05;
        results.push((
            "noise gates lower Last and Avg",
            verdict(
                pass,
                format!(
                    "noise Last_5 {} Avg_5 {} (drops {} / {} points); noise gate balanced acc mean {:.3} per gate {:?}",
                    pct(nr.last_final().unwrap()),
                    pct(nr.avg_final().unwrap()),
                    pct(dl),
                    pct(da),
                    mean_b,
                    b.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()
                ),
            ),
        ));
    }

    // 6: metric identities and cosine scale invariance.
    {
        let m = &lr.matrix;
        let avg_ok = (1..=m.steps()).all(|t| {
            let mean = lr.last[..t].iter().sum::<f64>() / t as f64;
            lr.avg[t - 1].to_bits() == mean.to_bits()
        });
        let seen_ok = (1..=m.steps()).all(|t| {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 1..=t {
                let n = m.test_counts[j - 1] as f64;
                num += n * m.get(t, j).unwrap();
                den += n;
            }
            m.seen[t - 1].to_bits() == (num / den).to_bits()
                && metrics::last_accuracy(m, t).unwrap().to_bits() == m.seen[t - 1].to_bits()
        });
        let state = learned.state.as_ref().unwrap();
        let mut scale_ok = true;
        for task in &stream.incremental {
            let h = state.backbone.embed(&task.test.features).unwrap();
            let p = state.prototypes.predict(&h, &FeatureHead::Identity, Scoring::Cosine).unwrap();
            for c in [1e-3, 0.37, 2.0, 17.5, 1e4] {
                let q = state.prototypes.predict(&h.scale(c), &FeatureHead::Identity, Scoring::Cosine).unwrap();
                scale_ok &= p == q;
            }
        }
        results.push((
            "metric identities and cosine scale invariance",
            verdict(
                avg_ok && seen_ok && scale_ok,
                format!("Avg identity {avg_ok}; Seen weighted-row identity {seen_ok}; scaled argmax identical {scale_ok}"),
            ),
        ));
    }

    // 7: determinism and round-trips.
    {
        let again = run_mode(&base, &stream);
        let a = strip_timing(&lr.to_json().unwrap()).unwrap();
        let b = strip_timing(&again.report.to_json().unwrap()).unwrap();
        let report_ok = a == b;
        let state = learned.state.as_ref().unwrap();
        let bytes = checkpoint::to_bytes(state);
        let back = checkpoint::from_bytes(&bytes).unwrap();
        let ckpt_ok = &back == state && checkpoint::to_bytes(&back) == bytes
            && checkpoint::to_bytes(again.state.as_ref().unwrap()) == bytes;
        let tmp = tempfile::tempdir().unwrap();
        let manifest = write_feature_stream(&stream, tmp.path()).unwrap();
        let data_ok = load_feature_stream(&manifest).unwrap() == stream;
        results.push((
            "determinism and bit-exact round-trips",
            verdict(
                report_ok && ckpt_ok && data_ok,
                format!("results.json modulo timing {report_ok}; checkpoint {ckpt_ok} ({} bytes); dataset {data_ok}", bytes.len()),
            ),
        ));
    }

    // 8: plasticity and stability.
    {
        let m = &lr.matrix;
        let new_ok = lr.new_task_acc.iter().all(|&a| a >= 0.9);
        let mut worst: f64 = 0.0;
        for t in 1..=m.steps() {
            for j in 1..t {
                worst = worst.max((m.get(t, j).unwrap() - m.get(j, j).unwrap()).abs());
            }
        }
        let stable = worst <= 0.03;
        results.push((
            "new tasks learned, old tasks retained",
            verdict(
                new_ok && stable,
                format!(
                    "new-task acc [{}]; largest drift of any task from its own-step accuracy {} points",
                    lr.new_task_acc.iter().map(|a| pct(*a)).collect::<Vec<_>>().join(" "),
                    pct(worst)
                ),
            ),
        ));
    }

    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        println!(
            "criterion {} [{}] {name}: {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed,
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
