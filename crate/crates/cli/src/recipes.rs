//! Experiment recipes: fixed sequences of CLI invocations plus threshold
//! checks, all written below one output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Parser;
use gridvid::eval::ABLATION_GRID;
use gridvid::formats::write_file;
use gridvid::Error;

use crate::commands::{arm_checkpoint, ABLATION_REPORT, MODEL_CKPT};
use crate::options::{load_config, setting};
use crate::{dispatch, Cli, CliError, CliResult, RecipeArgs};

pub const RECIPES: [&str; 3] = ["e2e-small", "ablation-pmax", "sgp-vs-reshape"];

/// Minimum overall label-oracle accuracy of the end-to-end run.
pub const E2E_MIN_ACCURACY: f64 = 0.80;
/// Default training steps of the end-to-end run.
pub const E2E_STEPS: u64 = 2000;
/// Generated clips per class in the end-to-end run.
pub const E2E_PER_CLASS: usize = 30;
/// Default per-arm training steps of the quick ablation recipes.
pub const QUICK_STEPS: u64 = 200;
/// Generated clips per class per arm in the quick recipes.
pub const QUICK_PER_CLASS: usize = 30;
/// Summary file written by every recipe.
pub const SUMMARY_FILE: &str = "summary.tsv";

/// One checked or reported quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub criterion: String,
    pub value: String,
    pub threshold: String,
    pub passed: bool,
}

impl SummaryRow {
    fn check(criterion: &str, value: impl ToString, threshold: &str, passed: bool) -> Self {
        Self {
            criterion: criterion.to_string(),
            value: value.to_string(),
            threshold: threshold.to_string(),
            passed,
        }
    }

    fn report(criterion: &str, value: impl ToString) -> Self {
        Self::check(criterion, value, "-", true)
    }
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::from("criterion\tvalue\tthreshold\tresult\n");
    for r in rows {
        let result = if r.threshold == "-" {
            "reported"
        } else if r.passed {
            "pass"
        } else {
            "fail"
        };
        s.push_str(&format!("{}\t{}\t{}\t{result}\n", r.criterion, r.value, r.threshold));
    }
    s
}

/// Runs one invocation in-process, echoing it first.
fn invoke(args: &[String]) -> CliResult<()> {
    println!("$ gridvid {}", args.join(" "));
    let argv = std::iter::once("gridvid".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        let full = e.to_string();
        CliError::Usage(full.lines().next().unwrap_or("invalid arguments").to_string())
    })?;
    dispatch(cli.command)
}

fn argv(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

/// `metric → value` pairs of an evaluation report.
pub fn read_report(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        if line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('\t') {
            if let Ok(v) = v.parse::<f64>() {
                out.insert(k.to_string(), v);
            }
        }
    }
    Ok(out)
}

fn metric(report: &BTreeMap<String, f64>, key: &str, path: &Path) -> CliResult<f64> {
    report
        .get(key)
        .copied()
        .ok_or_else(|| Error::format(path, format!("report has no `{key}` row")).into())
}

struct Workspace {
    out: PathBuf,
    seed: String,
}

impl Workspace {
    fn at(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        path_arg(&self.at(rel))
    }

    /// make-data, train-vq and encode with the default dataset.
    fn prepare(&self, orders: &[(&str, &str)]) -> CliResult<()> {
        invoke(&argv(&[
            "make-data", "--classes", "3", "--per-class", "50", "--frames", "16", "--size", "32",
            "--seed", &self.seed, "--out", &self.arg("data"),
        ]))?;
        invoke(&argv(&[
            "train-vq", "--data", &self.arg("data/manifest.tsv"), "--codebook-size", "64", "--patch", "8",
            "--seed", &self.seed, "--out", &self.arg("codebook.vqcb"),
        ]))?;
        for (order, dir) in orders {
            invoke(&argv(&[
                "encode", "--data", &self.arg("data/manifest.tsv"), "--codebook", &self.arg("codebook.vqcb"),
                "--order", order, "--out", &self.arg(dir),
            ]))?;
        }
        Ok(())
    }

    /// train-ar, generate and eval for one token directory.
    fn train_and_score(&self, tokens: &str, tag: &str, steps: u64, per_class: usize) -> CliResult<PathBuf> {
        let model_dir = format!("model{tag}");
        invoke(&argv(&[
            "train-ar", "--tokens", &self.arg(tokens), "--codebook", &self.arg("codebook.vqcb"),
            "--steps", &steps.to_string(), "--seed", &self.seed, "--reference", "--out", &self.arg(&model_dir),
        ]))?;
        let gen_dir = format!("gen{tag}");
        invoke(&argv(&[
            "generate", "--ckpt", &self.arg(&format!("{model_dir}/{MODEL_CKPT}")), "--num",
            &per_class.to_string(), "--seed", &self.seed, "--out", &self.arg(&gen_dir),
        ]))?;
        let report = self.at(&format!("eval{tag}.tsv"));
        invoke(&argv(&[
            "eval", "--real", &self.arg("data/manifest.tsv"), "--generated",
            &self.arg(&format!("{gen_dir}/manifest.tsv")), "--codebook", &self.arg("codebook.vqcb"),
            "--seed", &self.seed, "--out", &path_arg(&report),
        ]))?;
        Ok(report)
    }
}

fn e2e_small(ws: &Workspace, steps: u64) -> CliResult<Vec<SummaryRow>> {
    ws.prepare(&[("grid", "tokens")])?;
    let path = ws.train_and_score("tokens", "", steps, E2E_PER_CLASS)?;
    let report = read_report(&path)?;
    let acc = metric(&report, "accuracy_overall", &path)?;
    let fd = metric(&report, "fd_artifact_scale", &path)?;
    let fd_shuffled = metric(&report, "fd_artifact_scale_label_shuffled", &path)?;
    Ok(vec![
        SummaryRow::check(
            "label-oracle accuracy",
            format!("{acc:.4}"),
            &format!(">= {E2E_MIN_ACCURACY}"),
            acc >= E2E_MIN_ACCURACY,
        ),
        SummaryRow::check(
            "FD(real, generated) below FD(real, label-shuffled)",
            format!("{fd:.4}"),
            &format!("< {fd_shuffled:.4}"),
            fd < fd_shuffled,
        ),
        SummaryRow::report("psnr_db", format!("{:.3}", metric(&report, "psnr_db", &path)?)),
    ])
}

fn ablation_pmax(ws: &Workspace, steps: u64) -> CliResult<Vec<SummaryRow>> {
    ws.prepare(&[("grid", "tokens")])?;
    invoke(&argv(&[
        "ablate", "--tokens", &ws.arg("tokens"), "--codebook", &ws.arg("codebook.vqcb"), "--real",
        &ws.arg("data/manifest.tsv"), "--steps", &steps.to_string(), "--per-class",
        &QUICK_PER_CLASS.to_string(), "--seed", &ws.seed, "--reference", "--out", &ws.arg("ablation"),
    ]))?;
    let path = ws.at(&format!("ablation/{ABLATION_REPORT}"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
    let mut summary = vec![SummaryRow::check(
        "report rows",
        rows.len(),
        &format!("== {}", ABLATION_GRID.len()),
        rows.len() == ABLATION_GRID.len(),
    )];
    let present = ABLATION_GRID
        .iter()
        .filter(|p| ws.at(&format!("ablation/{}", arm_checkpoint(**p))).is_file())
        .count();
    summary.push(SummaryRow::check(
        "arm checkpoints",
        present,
        &format!("== {}", ABLATION_GRID.len()),
        present == ABLATION_GRID.len(),
    ));
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() >= 4 {
            summary.push(SummaryRow::report(
                &format!("{} fd / accuracy", cols[0]),
                format!("{} / {}", cols[2], cols[3]),
            ));
        }
    }
    Ok(summary)
}

fn sgp_vs_reshape(ws: &Workspace, steps: u64) -> CliResult<Vec<SummaryRow>> {
    ws.prepare(&[("grid", "tokens"), ("frame-major", "tokens_frame_major")])?;
    let mut summary = Vec::new();
    for (tokens, tag, arm) in [("tokens", "_grid", "grid"), ("tokens_frame_major", "_frame_major", "frame-major")] {
        let path = ws.train_and_score(tokens, tag, steps, QUICK_PER_CLASS)?;
        let report = read_report(&path)?;
        summary.push(SummaryRow::check("report written", arm, "exists", path.is_file()));
        summary.push(SummaryRow::report(
            &format!("{arm} accuracy"),
            format!("{:.4}", metric(&report, "accuracy_overall", &path)?),
        ));
        summary.push(SummaryRow::report(
            &format!("{arm} fd_artifact_scale"),
            format!("{:.4}", metric(&report, "fd_artifact_scale", &path)?),
        ));
    }
    Ok(summary)
}

pub fn run_recipe(a: RecipeArgs) -> CliResult<()> {
    if !RECIPES.contains(&a.name.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown recipe `{}` (expected one of {})",
            a.name,
            RECIPES.join(", ")
        )));
    }
    let mut cfg = load_config(&a.common)?;
    let seed: u64 = setting(a.common.seed, &mut cfg, "seed", 0)?;
    let default_steps = if a.name == "e2e-small" { E2E_STEPS } else { QUICK_STEPS };
    let steps = setting(a.steps, &mut cfg, "steps", default_steps)?;
    cfg.finish()?;
    let ws = Workspace {
        out: a.out.clone(),
        seed: seed.to_string(),
    };
    let rows = match a.name.as_str() {
        "e2e-small" => e2e_small(&ws, steps)?,
        "ablation-pmax" => ablation_pmax(&ws, steps)?,
        _ => sgp_vs_reshape(&ws, steps)?,
    };
    let text = format_summary(&rows);
    write_file(&ws.at(SUMMARY_FILE), text.as_bytes())?;
    print!("{text}");
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.criterion.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Domain(format!("recipe {} failed: {}", a.name, failed.join("; "))).into())
    }
}
