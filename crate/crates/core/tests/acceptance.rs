//! End-to-end acceptance suite. Every criterion runs, prints one
//! PASS/FAIL line, and the test fails if any criterion does.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::gradcheck::{check, toy};
use common::{dual_oracle, linear, oracle_decision, random_problem, rbf};
use mtverify_core::cnn::{self, LossSpec, TrainConfig};
use mtverify_core::dataset::split_stratified;
use mtverify_core::dataset::synth::synthetic_images;
use mtverify_core::faults::SubjectKind;
use mtverify_core::harness::{
    run_suite, summarize_many, Cell, DatasetSource, KillMatrix, MatrixRow, RunPlan, SeedVerdict,
    SuiteData, BASELINE,
};
use mtverify_core::metamorphic::{
    check_conv_equivariance, Family, MrId, MrStatus, MrVerdict, DESK_SIGMA_THRESHOLD,
};
use mtverify_core::rng::SeededRng;
use mtverify_core::svm::{train_binary, KernelSpec, SvmTrainConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn plans_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../plans")
}

fn killers(m: &KillMatrix, mutant: &str) -> Vec<String> {
    m.row(mutant)
        .map(|r| {
            r.cells
                .iter()
                .filter(|c| c.verdict.is_killed())
                .map(|c| c.mr.to_string())
                .collect()
        })
        .unwrap_or_default()
}

fn desk_cnn_plan(out: &Path, relations: Vec<MrId>, mutants: &[&str], seeds: Vec<u64>) -> RunPlan {
    RunPlan {
        dataset: DatasetSource::SyntheticImages {
            per_class: 60,
            seed: 1,
            test_fraction: 0.2,
            split_seed: 2,
        },
        subject: SubjectKind::Cnn {
            train: TrainConfig::desk(0),
        },
        relations,
        mutants: mutants.iter().map(|s| s.to_string()).collect(),
        seeds,
        suite: None,
        sigma_threshold: DESK_SIGMA_THRESHOLD,
        output_dir: out.to_path_buf(),
        base_dir: PathBuf::new(),
    }
}

/// SVM kill pattern on the digits subset, clean baseline within tolerance.
fn svm_kill_pattern() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for (plan_name, prefix, expected) in [
        ("svm_linear", "l", vec!["svm-mr1"]),
        ("svm_rbf", "r", vec!["svm-mr1", "svm-mr3"]),
    ] {
        let mut plan = RunPlan::load(plans_dir().join(format!("{plan_name}.json"))).unwrap();
        plan.output_dir = dir.path().join(plan_name);
        if let SuiteData::Vectors(split) = plan.dataset.load(&plan.base_dir).unwrap() {
            ok &= split.train.len() >= 200 && split.test.len() >= 50;
            notes.push(format!("{}/{} rows", split.train.len(), split.test.len()));
        }
        let m = run_suite(&plan).unwrap();
        let worst_clean = m
            .baseline()
            .unwrap()
            .cells
            .iter()
            .map(|c| c.verdict.evidence)
            .fold(0.0, f64::max);
        ok &= worst_clean < 1e-6;
        for id in [2, 5, 8, 11, 22, 31] {
            let mutant = format!("{prefix}{id}");
            let got = killers(&m, &mutant);
            if got != expected {
                ok = false;
                notes.push(format!("{mutant} killed by {got:?}"));
            }
        }
        notes.push(format!("{plan_name} clean max deviation {worst_clean:.1e}"));
    }
    ensure(ok, notes.join(", "))
}

/// SMO decisions against an independent dual solver.
fn svm_oracle_agreement() -> Outcome {
    let mut probes = SeededRng::new(7);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let m = 2 + (seed as usize % 5);
        let (xs, ys, c) = random_problem(1000 + seed, m);
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        for spec in [KernelSpec::Linear, KernelSpec::Rbf { gamma: 0.5 }] {
            let k: Box<dyn Fn(&[f64], &[f64]) -> f64> = match spec {
                KernelSpec::Linear => Box::new(linear),
                KernelSpec::Rbf { gamma } => Box::new(rbf(gamma)),
            };
            let oracle = dual_oracle(&xs, &ys, c, k.as_ref(), 1e-10);
            let cfg = SvmTrainConfig {
                c,
                ..Default::default()
            };
            let machine = train_binary(&rows, &ys, &spec, &cfg).unwrap();
            let mut points = xs.clone();
            points.extend((0..5).map(|_| vec![3.0 * probes.normal(), 3.0 * probes.normal()]));
            for p in &points {
                let d = machine.decision_value(p).unwrap();
                let o = oracle_decision(&oracle, &xs, &ys, k.as_ref(), p);
                worst = worst.max((d - o).abs());
            }
        }
    }
    ensure(
        worst < 1e-5,
        format!("20 problems x 2 kernels, max |difference| {worst:.1e}"),
    )
}

fn conv_equivariance() -> Outcome {
    let start = Instant::now();
    let r = check_conv_equivariance(100, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        r.passed() && r.worked_example && r.layer_max_relative_error <= 1e-6 && secs < 60.0,
        format!(
            "{} layer checks (max {:.1e}), {} network checks (max {:.1e}), {secs:.1}s",
            r.layer_checks,
            r.layer_max_relative_error,
            r.network_checks,
            r.network_max_relative_error
        ),
    )
}

/// Test-only relations on the trained desk model, and the channel-fill
/// mutant they should catch.
fn cnn_test_only_relations() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let plan = desk_cnn_plan(
        dir.path(),
        vec![MrId::CNN_NORMALIZE, MrId::CNN_SCALE],
        &["c50"],
        vec![0],
    );
    let m = run_suite(&plan).unwrap();
    let clean: Vec<f64> = m
        .baseline()
        .unwrap()
        .cells
        .iter()
        .map(|c| c.verdict.evidence)
        .collect();
    let c50 = killers(&m, "c50");
    ensure(
        clean.iter().all(|&e| e < 1e-4) && c50.len() == 2,
        format!(
            "clean deviations [{}], c50 killed by {c50:?}",
            clean
                .iter()
                .map(|e| format!("{e:.1e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

/// Clean training spread stays under the calibrated threshold on every
/// seed; the inverted weight-decay mutant exceeds it.
fn cnn_training_threshold() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let clean = run_suite(&desk_cnn_plan(
        dir.path(),
        vec![MrId::CNN_DIHEDRAL],
        &[],
        vec![0, 1, 2],
    ))
    .unwrap();
    let per_seed: Vec<f64> = clean.baseline().unwrap().cells[0]
        .seeds
        .iter()
        .map(|s| s.verdict.evidence)
        .collect();
    let mutant = run_suite(&desk_cnn_plan(
        dir.path(),
        vec![MrId::CNN_DIHEDRAL],
        &["c29"],
        vec![0],
    ))
    .unwrap();
    let c29 = mutant
        .cell("c29", MrId::CNN_DIHEDRAL)
        .unwrap()
        .verdict
        .evidence;
    ensure(
        per_seed.iter().all(|&s| s < DESK_SIGMA_THRESHOLD) && c29 > DESK_SIGMA_THRESHOLD,
        format!("threshold {DESK_SIGMA_THRESHOLD}, clean sigma_max {per_seed:.3?}, c29 {c29:.3}"),
    )
}

fn gradient_check() -> Outcome {
    let mut report = Vec::new();
    for (skip, blocks) in [(true, 1), (false, 1), (true, 2)] {
        let (model, x, y) = toy(skip, blocks);
        report.extend(check(&model, &x, &y, &LossSpec::standard(0.01)));
    }
    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    let kinds = ["stem", "conv", "proj", "bn", "dense"];
    let covered = kinds
        .iter()
        .all(|k| report.iter().any(|(name, _)| name.contains(k)));
    ensure(
        worst < 1e-3 && covered,
        format!("{} tensors, max relative error {worst:.1e}", report.len()),
    )
}

fn determinism() -> Outcome {
    let split = split_stratified(&synthetic_images(6, 1), 0.2, 2).unwrap();
    let mut cfg = TrainConfig::desk(9);
    cfg.epochs = 1;
    cfg.batch_size = 10;
    cfg.bn_calibration = 20;
    cfg.lr.decay_epochs = vec![];
    let same_training = cnn::train(&cfg, &split).unwrap() == cnn::train(&cfg, &split).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut plan = RunPlan::load(plans_dir().join("svm_rbf.json")).unwrap();
        plan.output_dir = dir.path().join(name);
        run_suite(&plan).unwrap().to_json().unwrap()
    };
    let same_suite = run("a") == run("b");
    ensure(
        same_training && same_suite,
        format!("cnn training identical: {same_training}, svm suite identical: {same_suite}"),
    )
}

fn transcribed(subject: &str, relations: &[MrId], rows: &[(&str, &[MrId])]) -> KillMatrix {
    let verdict = |mr: MrId, killed: bool| MrVerdict {
        mr,
        status: if killed {
            MrStatus::Killed
        } else {
            MrStatus::Pass
        },
        evidence: if killed { 1.0 } else { 0.0 },
        threshold: 0.5,
        variants: vec![],
        triggered_by: vec![],
        sigma: None,
        diagnostics: None,
    };
    let row = |mutant: &str, kills: &[MrId]| MatrixRow {
        mutant: mutant.to_string(),
        cells: relations
            .iter()
            .map(|&mr| {
                Cell::from_seeds(
                    mr,
                    vec![SeedVerdict {
                        seed: 0,
                        verdict: verdict(mr, kills.contains(&mr)),
                    }],
                )
            })
            .collect(),
    };
    let mut all = vec![row(BASELINE, &[])];
    all.extend(rows.iter().map(|(m, k)| row(m, k)));
    KillMatrix {
        subject: subject.into(),
        relations: relations.to_vec(),
        seeds: vec![0],
        rows: all,
    }
}

/// Aggregate kill rate over the expected SVM and CNN kill grids.
fn expected_kill_rate() -> Outcome {
    let svm: Vec<MrId> = MrId::all(Family::Svm).to_vec();
    let cnn: Vec<MrId> = MrId::all(Family::Cnn).to_vec();
    let (m1, m2, m3, m4) = (
        MrId::CNN_CHANNELS,
        MrId::CNN_DIHEDRAL,
        MrId::CNN_NORMALIZE,
        MrId::CNN_SCALE,
    );
    let lin: Vec<(String, Vec<MrId>)> = [2, 5, 8, 11, 22, 31]
        .iter()
        .map(|i| (format!("l{i}"), vec![MrId::SVM_PERMUTE]))
        .collect();
    let rbf: Vec<(String, Vec<MrId>)> = [2, 5, 8, 11, 22, 31]
        .iter()
        .map(|i| (format!("r{i}"), vec![MrId::SVM_PERMUTE, MrId::SVM_SHIFT]))
        .collect();
    let cnn_rows: Vec<(&str, Vec<MrId>)> = vec![
        ("c9", vec![]),
        ("c30", vec![]),
        ("c116", vec![]),
        ("c29", vec![m2]),
        ("c31", vec![m2]),
        ("c32", vec![m2]),
        ("c45", vec![]),
        ("c43", vec![m1, m2]),
        ("c44", vec![m1, m2]),
        ("c221", vec![m1]),
        ("c49", vec![m1, m2, m4]),
        ("r67", vec![]),
        ("r6", vec![]),
        ("r49", vec![]),
        ("c50", vec![m3, m4]),
        ("r48", vec![]),
    ];
    let build = |subject: &str, rels: &[MrId], rows: &[(String, Vec<MrId>)]| {
        let refs: Vec<(&str, &[MrId])> = rows
            .iter()
            .map(|(m, k)| (m.as_str(), k.as_slice()))
            .collect();
        transcribed(subject, rels, &refs)
    };
    let svm_lin: Vec<MrId> = svm
        .iter()
        .copied()
        .filter(|m| m.applies_to_kernel(true))
        .collect();
    let svm_rbf: Vec<MrId> = svm
        .iter()
        .copied()
        .filter(|m| m.applies_to_kernel(false))
        .collect();
    let cnn_owned: Vec<(String, Vec<MrId>)> = cnn_rows
        .into_iter()
        .map(|(m, k)| (m.to_string(), k))
        .collect();
    let matrices = [
        build("svm-linear", &svm_lin, &lin),
        build("svm-rbf", &svm_rbf, &rbf),
        build("cnn", &cnn, &cnn_owned),
    ];
    let cnn_only = summarize_many(&matrices[2..]);
    let s = summarize_many(&matrices);
    ensure(
        s.killed == 20 && s.mutants == 28 && s.kill_percent() == 71 && cnn_only.killed == 8,
        format!("{s}; cnn {}/{}", cnn_only.killed, cnn_only.mutants).replace('\n', " "),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("svm kill pattern", svm_kill_pattern),
        ("svm oracle agreement", svm_oracle_agreement),
        ("conv equivariance", conv_equivariance),
        ("cnn test-only relations", cnn_test_only_relations),
        ("cnn training threshold", cnn_training_threshold),
        ("gradient check", gradient_check),
        ("determinism", determinism),
        ("expected kill rate", expected_kill_rate),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                println!("FAIL {}. {name}: {detail} [{secs:.1}s]", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
