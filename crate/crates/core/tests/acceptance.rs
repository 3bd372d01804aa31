//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failed hard criterion. The ordering check is soft: its FAIL line prints
//! but does not change the exit status. Runs without the libtest harness so
//! the lines always print.

mod common;

use std::time::Instant;

use common::checks::{self, Outcome};
use common::{gradient_cases, FD_TOLERANCE};
use ecgi_core::forward_sim::{make_dataset, DatasetConfig, DatasetSplit};
use ecgi_core::harness::{
    evaluate, export_traces, run_comparison, run_comparison_keeping_models, untrained, Comparison, ExperimentConfig,
    Method, ModelKind, TrainedModel,
};
use ecgi_core::models::BaselineKind;

/// The pinned desk experiment.
const DESK_CONFIG: &str = include_str!("../../../configs/desk.json");

const GRADIENT_BUDGET_S: f64 = 60.0;
const DESK_CC_FLOOR: f64 = 0.80;
const DESK_MARGIN: f64 = 0.5;
const DESK_BUDGET_S: f64 = 30.0 * 60.0;
const ORDERING_SLACK: f64 = 0.02;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (name, check) in gradient_cases() {
        let e = check();
        if !(e <= worst.0) {
            worst = (e, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst.0 < FD_TOLERANCE && secs < GRADIENT_BUDGET_S,
        detail: format!(
            "{} cases, worst relative error {:.2e} ({}), {secs:.1}s",
            gradient_cases().len(),
            worst.0,
            worst.1
        ),
    }
}

struct Desk {
    cfg: ExperimentConfig,
    data: DatasetSplit,
    comparison: Comparison,
    models: Vec<TrainedModel>,
    zero_cc: f64,
    untrained_cc: f64,
    seconds: f64,
}

fn desk_run() -> Desk {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_json(DESK_CONFIG).expect("desk config parses");
    let data = make_dataset(&DatasetConfig::default()).expect("desk dataset");
    let (comparison, models) = run_comparison_keeping_models(&cfg, &data).expect("comparison runs");
    let zero_cc = evaluate(&Method::Zero, &data, 1, cfg.seed).expect("zero predictor").temporal_cc;
    let epoch0 = untrained(&cfg, ModelKind::Diffusion, &data).expect("untrained model");
    let untrained_cc = evaluate(&Method::Trained(&epoch0), &data, cfg.diffusion.samples, cfg.seed)
        .expect("untrained evaluation")
        .temporal_cc;
    Desk {
        cfg,
        data,
        comparison,
        models,
        zero_cc,
        untrained_cc,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn cc_of(desk: &Desk, kind: ModelKind) -> f64 {
    desk.comparison.get(kind.name()).map_or(f64::NAN, |r| r.temporal_cc)
}

fn desk_benchmark(desk: &Desk) -> Outcome {
    let cc = cc_of(desk, ModelKind::Diffusion);
    let pass = desk.comparison.all_ok()
        && cc >= DESK_CC_FLOOR
        && cc - desk.zero_cc >= DESK_MARGIN
        && cc - desk.untrained_cc >= DESK_MARGIN
        && desk.seconds <= DESK_BUDGET_S;
    Outcome {
        pass,
        detail: format!(
            "diffusion CC {cc:.4} (zero {:.4}, untrained {:.4}), {} epochs, K={}, {:.0}s",
            desk.zero_cc, desk.untrained_cc, desk.cfg.epochs, desk.cfg.diffusion.samples, desk.seconds
        ),
    }
}

fn ordering(desk: &Desk) -> Outcome {
    let cc = cc_of(desk, ModelKind::Diffusion);
    let baselines: Vec<(ModelKind, f64)> = BaselineKind::ALL
        .iter()
        .map(|&b| {
            let k = ModelKind::parse(b.name()).unwrap();
            (k, cc_of(desk, k))
        })
        .collect();
    let best = baselines.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    Outcome {
        pass: cc >= best - ORDERING_SLACK,
        detail: format!(
            "diffusion {cc:.4} vs {}",
            baselines
                .iter()
                .map(|(k, c)| format!("{} {c:.4}", k.name()))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// Regression expectations measured on the pinned desk run.
fn desk_regressions(desk: &Desk) -> Vec<(String, bool)> {
    let diffusion = desk
        .models
        .iter()
        .find(|m| m.spec.kind == ModelKind::Diffusion)
        .expect("diffusion model kept");
    let pred = Method::Trained(diffusion)
        .predict(&desk.data.test[..1], desk.cfg.diffusion.samples, desk.cfg.seed)
        .expect("posterior");
    let spread = pred[0].spread.as_ref().expect("spread");
    let spread_ok = spread.is_finite() && spread.data().iter().any(|v| *v > 0.0);
    let traces = export_traces(&Method::Trained(diffusion), &desk.data, 0, 6, None, desk.cfg.diffusion.samples, desk.cfg.seed)
        .expect("traces");
    let mut by_cc = traces.by_cc.clone();
    let mut by_mse = traces.by_mse.clone();
    by_cc.sort();
    by_mse.sort();
    vec![
        (
            format!("posterior spread finite and nonzero (max {:.3} mV)", spread.data().iter().fold(0.0f64, |a, b| a.max(*b))),
            spread_ok,
        ),
        (
            format!("trace selections differ: top-CC {:?} vs low-MSE {:?}", traces.by_cc, traces.by_mse),
            by_cc != by_mse,
        ),
    ]
}

/// Two comparisons from one configuration give byte-identical CSV.
fn determinism() -> Outcome {
    let data = make_dataset(&DatasetConfig {
        hearts: 3,
        beats_per_heart: 8,
        ..DatasetConfig::default()
    })
    .expect("dataset");
    let cfg = ExperimentConfig {
        epochs: 2,
        ..ExperimentConfig::from_json(DESK_CONFIG).expect("desk config parses")
    };
    let a = run_comparison(&cfg, &data).expect("first run").csv();
    let b = run_comparison(&cfg, &data).expect("second run").csv();
    Outcome {
        pass: a == b && !a.is_empty(),
        detail: format!("{} rows, {} bytes, identical={}", a.lines().count() - 1, a.len(), a == b),
    }
}

fn report(n: usize, name: &str, o: &Outcome) -> bool {
    println!("criterion {n} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient suite", &gradient_suite());
    ok &= report(2, "schedule suite", &checks::schedule_suite());
    ok &= report(3, "reverse identity", &checks::reverse_identity());
    ok &= report(4, "classical oracles", &checks::classical_oracles());
    ok &= report(5, "SNR contract", &checks::snr_contract());
    let desk = desk_run();
    ok &= report(6, "desk benchmark", &desk_benchmark(&desk));
    let ordered = report(7, "ordering sanity (soft)", &ordering(&desk));
    ok &= report(8, "metric invariances", &checks::metric_invariances());
    ok &= report(9, "determinism", &determinism());
    for (what, pass) in desk_regressions(&desk) {
        println!("regression {} {what}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    }
    print!("{}", desk.comparison.table());
    if !ordered {
        println!("soft criterion 7 failed: diffusion trails the best learned baseline by more than {ORDERING_SLACK}");
    }
    if !ok {
        std::process::exit(1);
    }
}
