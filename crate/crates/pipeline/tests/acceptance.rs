//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/checks/mod.rs"]
mod checks;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bgdensity_pipeline::{gen_synthetic, run_all, synthetic_config, Estimator, EvalRow, EvalRowKind, PipelineConfig};

const SEEDS: [u64; 3] = [0, 1, 2];

type Check = Result<String, String>;

fn within(limit: Duration, f: impl FnOnce() -> Check) -> Check {
    let t = Instant::now();
    let detail = f()?;
    let took = t.elapsed();
    if took > limit {
        return Err(format!("{detail}; took {took:.1?}, limit {limit:?}"));
    }
    Ok(format!("{detail} ({took:.1?})"))
}

fn io(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Generates the seeded synthetic corpus in `dir` and runs every stage.
fn run_seed(seed: u64, dir: &Path) -> Result<(PipelineConfig, Vec<EvalRow>), String> {
    let base = PipelineConfig { seed, ..synthetic_config() };
    let cfg = gen_synthetic(&base, dir).map_err(io)?;
    let rows = run_all(&cfg).map_err(io)?;
    Ok((cfg, rows))
}

struct EnsembleScores {
    fused: f64,
    best_layer: (u32, f64),
}

fn scores(rows: &[EvalRow], est: Estimator) -> Result<EnsembleScores, String> {
    let mut fused = None;
    let mut best_layer = (0, f64::NEG_INFINITY);
    for r in rows.iter().filter(|r| r.estimator == est) {
        match r.kind {
            EvalRowKind::Fused => fused = Some(r.report.auroc),
            EvalRowKind::Layer(l) if r.report.auroc > best_layer.1 => best_layer = (l, r.report.auroc),
            EvalRowKind::Layer(_) => {}
        }
    }
    Ok(EnsembleScores { fused: fused.ok_or(format!("no fused {est} row"))?, best_layer })
}

fn flow_beats_knn(runs: &[(u64, Vec<EvalRow>)]) -> Check {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (seed, rows) in runs {
        let flow = scores(rows, Estimator::Flow)?;
        let knn = scores(rows, Estimator::Knn)?;
        let mut bad = Vec::new();
        if flow.fused < 0.95 {
            bad.push("flow ensemble below 0.95");
        }
        if flow.fused < knn.fused - 0.01 {
            bad.push("flow ensemble below kNN ensemble - 0.01");
        }
        if flow.fused < flow.best_layer.1 + 0.005 {
            bad.push("flow ensemble gains < 0.005 over its best layer");
        }
        if knn.fused < knn.best_layer.1 + 0.005 {
            bad.push("kNN ensemble gains < 0.005 over its best layer");
        }
        let line = format!(
            "seed {seed}: flow {:.4} (best layer {} {:.4}), knn {:.4} (best layer {} {:.4})",
            flow.fused, flow.best_layer.0, flow.best_layer.1, knn.fused, knn.best_layer.0, knn.best_layer.1
        );
        if !bad.is_empty() {
            failures.push(format!("{line}: {}", bad.join(", ")));
        }
        lines.push(line);
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(failures.join("; "))
    }
}

fn performance(seed: u64) -> Check {
    let cfg = synthetic_config();
    let row = bgdensity_pipeline::bench::scenario(&cfg.bench, cfg.k, seed).map_err(io)?;
    let (flow_ms, knn_ms) = (row.flow_ms_per_image.unwrap(), row.knn_ms_per_image.unwrap());
    let (flow_b, knn_b) = (row.flow_bytes.unwrap(), row.knn_bytes.unwrap());
    let speedup = knn_ms / flow_ms;
    let detail = format!(
        "{}: flow {flow_ms:.2} ms vs kNN {knn_ms:.2} ms ({speedup:.1}x); {flow_b} vs {knn_b} bytes",
        row.label
    );
    if speedup >= 2.0 && flow_b < knn_b {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(io)? {
            let p = entry.map_err(io)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&p).map_err(io)?);
            }
        }
    }
    Ok(out)
}

fn determinism(first: &Path, scratch: &Path) -> Check {
    run_seed(SEEDS[0], scratch)?;
    let a = tree(first)?;
    let b = tree(scratch)?;
    let names_a: Vec<_> = a.keys().collect();
    let names_b: Vec<_> = b.keys().collect();
    if names_a != names_b {
        return Err(format!("file sets differ: {} vs {} files", a.len(), b.len()));
    }
    let differing: Vec<String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    if !differing.is_empty() {
        return Err(format!("{} files differ, e.g. {}", differing.len(), differing[0]));
    }
    let bytes: usize = a.values().map(Vec::len).sum();
    Ok(format!("{} files ({bytes} bytes) identical across two runs with seed {}", a.len(), SEEDS[0]))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, result: Check| {
        match &result {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    };

    report("flow correctness", within(Duration::from_secs(60), checks::flow_correctness));
    report("density quality", within(Duration::from_secs(300), checks::density_quality));

    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut runs = Vec::new();
    let mut run_error = None;
    for seed in SEEDS {
        match run_seed(seed, &tmp.path().join(format!("seed{seed}"))) {
            Ok((_, rows)) => runs.push((seed, rows)),
            Err(e) => run_error = Some(format!("seed {seed}: {e}")),
        }
    }
    report("flow beats kNN on synthetic OoD", run_error.map_or_else(|| flow_beats_knn(&runs), Err));

    report("metrics oracle equivalence", checks::metrics_oracle(200));
    report("kNN exactness", checks::knn_exactness());
    report("ensemble calibration", checks::ensemble_calibration());
    report("performance direction", performance(0));
    report(
        "end-to-end determinism",
        determinism(&tmp.path().join(format!("seed{}", SEEDS[0])), &tmp.path().join("repeat")),
    );

    if failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
