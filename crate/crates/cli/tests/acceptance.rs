//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Runs as a plain binary (`harness = false`) so the lines reach the
//! terminal unbuffered, in order.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use diif::decoder::Architecture;
use diif::pipeline::{encoder_depth, weight_init};
use diif::verify::{
    check_cost_reduction, check_cost_scaling, check_ensemble_continuity, check_gradients, check_grouping_laws,
    check_oracle_equivalence, check_training_smoke, synthetic_image, CheckOutcome, SmokeSettings,
};

const SEED: u64 = 2024;

fn upscale(dir: &Path, threads: usize, scale: f64, run: usize) -> Result<Vec<u8>, String> {
    let out = dir.join(format!("out_t{threads}_s{scale}_{run}.png"));
    let status = Command::new(env!("CARGO_BIN_EXE_diif"))
        .env("DIIF_THREADS", threads.to_string())
        .env("RUST_LOG", "warn")
        .args(["upscale", "--scale", &scale.to_string()])
        .arg("--input")
        .arg(dir.join("input.png"))
        .arg("--weights")
        .arg(dir.join("weights.diif"))
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(|e| format!("spawning diif: {e}"))?;
    if !status.status.success() {
        return Err(format!(
            "diif upscale failed: {}",
            String::from_utf8_lossy(&status.stderr)
        ));
    }
    std::fs::read(&out).map_err(|e| format!("reading {}: {e}", out.display()))
}

fn check_determinism() -> Result<CheckOutcome, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    synthetic_image(SEED, 30, 40)
        .save_png(dir.path().join("input.png"))
        .map_err(|e| e.to_string())?;
    let arch = Architecture {
        hidden: 64,
        ..Architecture::diif(encoder_depth(1))
    };
    weight_init::<f32>(arch, SEED)
        .save(dir.path().join("weights.diif"))
        .map_err(|e| e.to_string())?;

    let mut runs = 0;
    let mut mismatches = Vec::new();
    for scale in [2.0, 3.7] {
        let baseline = upscale(dir.path(), 1, scale, 0)?;
        for (threads, run) in [(1, 1), (2, 0), (4, 0), (4, 1)] {
            runs += 1;
            if upscale(dir.path(), threads, scale, run)? != baseline {
                mismatches.push(format!("x{scale} with {threads} threads"));
            }
        }
    }
    Ok(CheckOutcome {
        name: "determinism".into(),
        passed: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            format!("{runs} upscale runs at x2 and x3.7 with DIIF_THREADS in {{1, 2, 4}}: PNG bytes identical")
        } else {
            format!("PNG bytes differ for {}", mismatches.join(", "))
        },
        elapsed: start.elapsed(),
    })
}

type Check = Box<dyn FnOnce() -> Result<CheckOutcome, String>>;

fn main() -> ExitCode {
    let checks: Vec<(&str, Check)> = vec![
        (
            "oracle equivalence",
            Box::new(|| check_oracle_equivalence(24, SEED).map_err(|e| e.to_string())),
        ),
        (
            "grouping and slicing laws",
            Box::new(|| check_grouping_laws(200, SEED).map_err(|e| e.to_string())),
        ),
        (
            "gradient check",
            Box::new(|| check_gradients(SEED).map_err(|e| e.to_string())),
        ),
        (
            "ensemble continuity",
            Box::new(|| check_ensemble_continuity(10_000, 1_000, SEED).map_err(|e| e.to_string())),
        ),
        (
            "cost scaling",
            Box::new(|| check_cost_scaling().map_err(|e| e.to_string())),
        ),
        (
            "cost reduction",
            Box::new(|| check_cost_reduction().map_err(|e| e.to_string())),
        ),
        (
            "training smoke",
            Box::new(|| check_training_smoke(&SmokeSettings::default()).map_err(|e| e.to_string())),
        ),
        ("determinism", Box::new(check_determinism)),
    ];

    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(outcome) => {
                failed += !outcome.passed as usize;
                println!("{}", outcome.line());
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: error: {e}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
