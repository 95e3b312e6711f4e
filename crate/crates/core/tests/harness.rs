mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use common::{grid_dataset, prepare_run, ModelSpec};
use detbench::harness::{run_evaluation, BenchmarkReport, HarnessError, RunConfig, TABLE_COLUMNS};
use detbench::split::SplitError;

const PERFECT: ModelSpec = ModelSpec { name: "perfect", shift: 0.0, false_positives: false };
const STRONG: ModelSpec = ModelSpec { name: "strong", shift: 4.0, false_positives: true };
const WEAK: ModelSpec = ModelSpec { name: "weak", shift: 14.0, false_positives: true };

fn detbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detbench")).args(args).output().unwrap()
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn perfect_detector_scores_one_everywhere() {
    let run = prepare_run(&grid_dataset(24, 1), 3, &[PERFECT], &[]);
    let report = run_evaluation(&RunConfig::load(&run.config).unwrap()).unwrap();
    let agg = report.result("SSDD", "perfect").unwrap().aggregate.as_ref().unwrap();
    for s in [&agg.precision, &agg.recall, &agg.f1, &agg.map50, &agg.map75, &agg.map] {
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        assert_eq!(s.values.len(), 3);
    }
    assert_eq!(agg.f1_of_means, 1.0);
    assert!(report.gaps.is_empty());
}

#[test]
fn runs_only_score_test_images() {
    let ds = grid_dataset(30, 2);
    let run = prepare_run(&ds, 3, &[STRONG], &[]);
    let report = run_evaluation(&RunConfig::load(&run.config).unwrap()).unwrap();
    assert_eq!(report.audits.len(), 3);
    assert_eq!(report.audits.iter().map(|a| a.test_images).sum::<usize>(), 30);
    assert_eq!(report.audits.iter().map(|a| a.ground_truths).sum::<usize>(), ds.annotations.len());
    assert!(report.audits.iter().any(|a| a.dropped_detections > 0));
    let counts = report.result("SSDD", "strong").unwrap().aggregate.as_ref().unwrap().counts;
    assert_eq!(counts.tp + counts.fn_, ds.annotations.len());
}

#[test]
fn missing_fold_becomes_a_gap() {
    let run = prepare_run(&grid_dataset(24, 3), 3, &[STRONG, WEAK], &[2]);
    let report = run_evaluation(&RunConfig::load(&run.config).unwrap()).unwrap();
    assert_eq!(report.gaps.len(), 1);
    assert_eq!((report.gaps[0].model.as_str(), report.gaps[0].fold), ("strong", 2));
    assert_eq!(report.gaps[0].path, "runs/strong/fold2.json");
    let strong = report.result("SSDD", "strong").unwrap();
    assert_eq!((strong.evaluated_folds.clone(), strong.missing_folds.clone()), (vec![0, 1], vec![2]));
    assert_eq!(strong.aggregate.as_ref().unwrap().folds, [Some(0), Some(1)]);
    assert_eq!(report.result("SSDD", "weak").unwrap().evaluated_folds, [0, 1, 2]);

    let out = run.path("out");
    let status = detbench(&["run", "--config", run.config.to_str().unwrap()]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let folds = std::fs::read_to_string(out.join("folds.csv")).unwrap();
    assert!(folds.lines().any(|l| l.starts_with("strong,SSDD,2,missing,")), "{folds}");
    let table = std::fs::read_to_string(out.join("table_SSDD.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("strong,0;1,2,"), "{table}");
}

#[test]
fn dominating_detector_never_scores_lower() {
    for seed in 0..4 {
        let run = prepare_run(&grid_dataset(30, seed), 3, &[STRONG, WEAK], &[]);
        let report = run_evaluation(&RunConfig::load(&run.config).unwrap()).unwrap();
        let a = report.result("SSDD", "strong").unwrap().aggregate.clone().unwrap();
        let b = report.result("SSDD", "weak").unwrap().aggregate.clone().unwrap();
        assert!(a.map50.mean >= b.map50.mean && a.map75.mean >= b.map75.mean && a.map.mean >= b.map.mean);
        for (fa, fb) in a.map.values.iter().zip(&b.map.values) {
            assert!(fa >= fb);
        }
        assert!(a.map.mean > b.map.mean, "the shifts were chosen to separate the models");
    }
}

#[test]
fn reports_are_byte_identical_across_runs_and_regeneration() {
    let run = prepare_run(&grid_dataset(21, 4), 3, &[STRONG, WEAK], &[1]);
    let cfg = run.config.to_str().unwrap();
    assert!(detbench(&["run", "--config", cfg]).status.success());
    let first = read_dir_bytes(&run.path("out"));
    assert!(detbench(&["run", "--config", cfg]).status.success());
    assert_eq!(read_dir_bytes(&run.path("out")), first);

    let regen = run.path("regen");
    let out = detbench(&["report", "--in", run.path("out").to_str().unwrap(), "--format", "csv,json", "--out", regen.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_dir_bytes(&regen), first);
    let names: Vec<&String> = first.keys().collect();
    assert_eq!(names, ["folds.csv", "loss_curves.csv", "loss_flags.csv", "report.json", "summary.csv", "table_SSDD.csv"]);
    let table = String::from_utf8(first["table_SSDD.csv"].clone()).unwrap();
    assert_eq!(table.lines().next().unwrap(), TABLE_COLUMNS.join(","));
    assert_eq!(table.lines().count(), 3);
    assert_eq!(BenchmarkReport::load(run.path("out")).unwrap().results.len(), 2);
}

#[test]
fn wrong_plan_aborts_with_integrity_status() {
    let run = prepare_run(&grid_dataset(12, 5), 3, &[STRONG], &[]);
    let mut other = grid_dataset(12, 5);
    other.annotations.pop();
    std::fs::write(run.path("ann.json"), other.to_json_string()).unwrap();
    let err = run_evaluation(&RunConfig::load(&run.config).unwrap()).unwrap_err();
    assert!(matches!(err, HarnessError::Split(SplitError::ChecksumMismatch { .. })));
    assert_eq!(detbench(&["run", "--config", run.config.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn configuration_problems_exit_with_two() {
    let run = prepare_run(&grid_dataset(12, 6), 3, &[STRONG], &[]);
    let cfg = run.config.to_str().unwrap();
    let text = std::fs::read_to_string(&run.config).unwrap();
    std::fs::write(&run.config, text.replace("{fold}", "{run}")).unwrap();
    assert_eq!(detbench(&["run", "--config", cfg]).status.code(), Some(2));
    std::fs::write(&run.config, text.replace("plan.json", "absent.json")).unwrap();
    assert_eq!(detbench(&["run", "--config", cfg]).status.code(), Some(2));
    std::fs::write(&run.config, "{").unwrap();
    assert_eq!(detbench(&["run", "--config", cfg]).status.code(), Some(2));
    assert_eq!(detbench(&["run", "--config", run.path("nope.json").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn losses_travel_with_the_run_and_through_the_cli() {
    let run = prepare_run(&grid_dataset(12, 7), 3, &[STRONG], &[]);
    let mut csv = String::from("model,dataset,epoch,loss_cls,loss_reg\n");
    for (dataset, scale) in [("Pleiades", 1.0), ("SSDD", 4.0)] {
        for e in 1..=12 {
            let v = scale * (13 - e) as f64;
            csv.push_str(&format!("strong,{dataset},{e},{},{}\n", v * 0.75, v * 0.25));
        }
    }
    for e in 1..=12 {
        csv.push_str(&format!("weak,SSDD,{e},{},0.5\n", if e == 6 { 9.0 } else { 12.0 - e as f64 }));
    }
    std::fs::write(run.path("losses.csv"), &csv).unwrap();
    let text = std::fs::read_to_string(&run.config).unwrap();
    std::fs::write(&run.config, text.replacen("\"seed\": 7", "\"seed\": 7,\n  \"losses\": \"losses.csv\"", 1)).unwrap();
    let report = run_evaluation(&RunConfig::load(&run.config).unwrap()).unwrap();
    let curves = &report.losses.as_ref().unwrap().curves;
    assert_eq!(curves.len(), 2);
    let expected: Vec<f64> = (0..12).map(|i| (11 - i) as f64 / 11.0).collect();
    for (a, b) in curves[0].values.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(curves[0].strictly_decreasing);
    assert!(!curves[1].strictly_decreasing);
    assert_eq!(curves[1].notes.len(), 1);

    let out = run.path("curves.csv");
    let result = detbench(&["losses", "--in", run.path("losses.csv").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(result.status.success());
    let written = std::fs::read_to_string(&out).unwrap();
    assert!(written.starts_with("epoch,strong,weak\n1,1.000000,1.000000\n"), "{written}");
    assert!(String::from_utf8(result.stdout).unwrap().contains("strong: 12 epochs, strictly decreasing: true"));

    std::fs::write(run.path("gap.csv"), "model,dataset,epoch,loss_cls,loss_reg\nm,d,1,1,1\nm,d,2,1,1\nm,d,4,1,1\n").unwrap();
    let result = detbench(&["losses", "--in", run.path("gap.csv").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8(result.stderr).unwrap().contains("missing epoch 3"));
}
