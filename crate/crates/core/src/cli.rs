//! Command implementations behind the `semcl` binary: fixture generation,
//! single runs with checkpoints, ablation plans and report summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{read_json, write_json};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evaluator::{accuracy_svg, RunReport};
use crate::protocol::{load_benchmark, synth_benchmark, write_benchmark, FileDigest, SynthConfig, TaskStream};
use crate::trainer::{run_stream_with, Mode, RunConfig};

/// Root for relative dataset paths in run configs and plans.
pub const DATA_DIR_ENV: &str = "SEMCL_DATA_DIR";

/// Exit status for configuration and validation errors.
pub const EXIT_CONFIG: i32 = 2;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Json { .. } => EXIT_CONFIG,
        _ => 1,
    }
}

/// Resolves a dataset path: absolute paths are kept, relative ones are taken
/// from `SEMCL_DATA_DIR` when set and from `base` otherwise.
pub fn resolve_data_path(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => base.join(path),
    }
}

/// Generates a synthetic benchmark into `out` and returns the file digests.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<Vec<FileDigest>> {
    let (dataset, table) = synth_benchmark(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let digests = write_benchmark(out, &dataset, &table)?;
    write_json(&out.join("synth.json"), cfg)?;
    Ok(digests)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// What `cmd_run` produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub stream: TaskStream,
    /// `None` for dry runs.
    pub report: Option<RunReport>,
    pub run_dir: PathBuf,
}

/// Trains one config. Writes `<out>/<name>/task<t>/{params.json, store/,
/// report.json}` after every task and `report.json`, `accuracy.csv` and
/// `accuracy.svg` at the end. `dataset_base` resolves relative dataset paths
/// when `SEMCL_DATA_DIR` is unset.
pub fn cmd_run(mut cfg: RunConfig, dataset_base: &Path, out: &Path, dry_run: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let data_dir = resolve_data_path(&cfg.dataset, dataset_base);
    let (dataset, table) = load_benchmark(&data_dir)?;
    let stream = cfg.stream(&dataset)?;
    let spec = cfg.encoder.resolve(dataset.dim(), table.dim());
    spec.validate()?;
    if cfg.stream_seed.is_none() {
        cfg.stream_seed = Some(stream.class_order_seed);
    }
    let run_dir = out.join(&cfg.name);
    if dry_run {
        return Ok(RunOutcome { config: cfg, stream, report: None, run_dir });
    }
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    let report = run_stream_with(&cfg.name, &dataset, &table, &stream, spec, &cfg.train, echo.clone(), |trainer, task| {
        let dir = run_dir.join(format!("task{}", task.task_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("params.json"), trainer.encoder())?;
        trainer.store().save(&dir.join("store"))?;
        write_json(&dir.join("report.json"), task)
    })?;
    write_report_files(&report, &run_dir)?;
    Ok(RunOutcome { config: cfg, stream, report: Some(report), run_dir })
}

fn write_report_files(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("report.json"), report)?;
    let csv = dir.join("accuracy.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let svg = dir.join("accuracy.svg");
    fs::write(&svg, accuracy_svg(&[report])).map_err(|e| Error::io(&svg, e))
}

/// Loads trained parameters written by [`cmd_run`].
pub fn load_params(path: &Path) -> Result<Encoder> {
    let enc: Encoder = read_json(path)?;
    Encoder::from_blocks(enc.spec().clone(), enc.blocks().to_vec())
}

/// Runs to compare on one stream. With `seeds` set, every entry is repeated
/// per seed with both the training and class-order seed overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub output: PathBuf,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub entries: Vec<RunConfig>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() < 2 {
            return Err(Error::config("entries", format!("an ablation needs at least 2 entries, got {}", self.entries.len())));
        }
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config("entries", format!("duplicate entry name {:?}", w[0])));
        }
        let key = |e: &RunConfig| {
            (
                e.dataset.clone(),
                e.split.clone(),
                serde_json::to_string(&e.few_shot).unwrap_or_default(),
                e.class_lists.clone(),
                self.seeds.is_empty().then(|| e.stream_seed.unwrap_or(e.train.seed)),
            )
        };
        let first = key(&self.entries[0]);
        if let Some(e) = self.entries.iter().find(|e| key(e) != first) {
            return Err(Error::config(
                "entries",
                format!("entry {:?} uses a different stream than {:?}", e.name, self.entries[0].name),
            ));
        }
        for e in &self.entries {
            e.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub last: Vec<f64>,
    pub avg: Vec<f64>,
}

impl AblationRow {
    pub fn last_mean(&self) -> f64 {
        self.last.iter().sum::<f64>() / self.last.len() as f64
    }

    pub fn avg_mean(&self) -> f64 {
        self.avg.iter().sum::<f64>() / self.avg.len() as f64
    }

    fn range(xs: &[f64]) -> (f64, f64) {
        xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }
}

/// Table-5 style ordering over the entries whose modes appear in
/// [`ORDERING`], weakest first.
pub const ORDERING: [Mode; 4] = [Mode::Ft, Mode::SgRl, Mode::SgRlNaiveKd, Mode::Full];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    /// Modes checked, weakest first.
    pub modes: Vec<Mode>,
    /// Seeds on which Last is non-decreasing along `modes`.
    pub holds_per_seed: usize,
    pub num_seeds: usize,
    /// Whether the mean Last is non-decreasing along `modes`.
    pub holds_on_mean: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub verdict: Option<OrderingVerdict>,
}

impl AblationSummary {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    fn verdict(rows: &[AblationRow]) -> Option<OrderingVerdict> {
        let chain: Vec<&AblationRow> = ORDERING.iter().filter_map(|m| rows.iter().find(|r| r.mode == *m)).collect();
        if chain.len() < 2 {
            return None;
        }
        let n = chain[0].last.len();
        let holds = |vals: Vec<f64>| vals.windows(2).all(|w| w[1] >= w[0]);
        Some(OrderingVerdict {
            modes: chain.iter().map(|r| r.mode).collect(),
            holds_per_seed: (0..n).filter(|&s| holds(chain.iter().map(|r| r.last[s]).collect())).count(),
            num_seeds: n,
            holds_on_mean: holds(chain.iter().map(|r| r.last_mean()).collect()),
        })
    }

    /// Markdown table, one decimal place.
    pub fn to_markdown(&self) -> String {
        let multi = self.rows.first().is_some_and(|r| r.last.len() > 1);
        let mut out = String::new();
        if multi {
            out.push_str("| entry | mode | Last (mean) | Last (min..max) | Avg (mean) |\n|---|---|---:|---:|---:|\n");
        } else {
            out.push_str("| entry | mode | Last | Avg |\n|---|---|---:|---:|\n");
        }
        for r in &self.rows {
            if multi {
                let (lo, hi) = AblationRow::range(&r.last);
                let _ = writeln!(out, "| {} | {} | {:.1} | {lo:.1}..{hi:.1} | {:.1} |", r.name, r.mode, r.last_mean(), r.avg_mean());
            } else {
                let _ = writeln!(out, "| {} | {} | {:.1} | {:.1} |", r.name, r.mode, r.last_mean(), r.avg_mean());
            }
        }
        if let Some(v) = &self.verdict {
            let chain: Vec<&str> = v.modes.iter().rev().map(|m| m.as_str()).collect();
            let _ = writeln!(
                out,
                "\nOrdering {}: holds on {}/{} seeds; on the mean: {}.",
                chain.join(" ≥ "),
                v.holds_per_seed,
                v.num_seeds,
                if v.holds_on_mean { "yes" } else { "no" }
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("entry,mode,last_mean,last_min,last_max,avg_mean\n");
        for r in &self.rows {
            let (lo, hi) = AblationRow::range(&r.last);
            let _ = writeln!(out, "{},{},{:.1},{lo:.1},{hi:.1},{:.1}", r.name, r.mode, r.last_mean(), r.avg_mean());
        }
        out
    }
}

/// Runs every plan entry (per seed) and tabulates Last accuracy. Per-run
/// outputs go to `<output>/<entry>[-s<seed>]/`, the tables to
/// `<output>/ablation.{md,csv,json}`.
pub fn cmd_ablate(plan: &ExperimentPlan, dataset_base: &Path) -> Result<AblationSummary> {
    plan.validate()?;
    for e in &plan.entries {
        let dir = resolve_data_path(&e.dataset, dataset_base);
        for f in [crate::protocol::DATASET_MANIFEST, crate::protocol::EMBEDDINGS_MANIFEST] {
            if !dir.join(f).is_file() {
                return Err(Error::config("dataset", format!("{} does not exist", dir.join(f).display())));
            }
        }
    }
    let mut rows = Vec::with_capacity(plan.entries.len());
    for entry in &plan.entries {
        let mut row = AblationRow { name: entry.name.clone(), mode: entry.train.mode, seeds: vec![], last: vec![], avg: vec![] };
        let runs: Vec<(RunConfig, u64)> = if plan.seeds.is_empty() {
            vec![(entry.clone(), entry.train.seed)]
        } else {
            plan.seeds
                .iter()
                .map(|&s| {
                    let mut c = entry.clone();
                    c.name = format!("{}-s{s}", entry.name);
                    c.train.seed = s;
                    c.stream_seed = Some(s);
                    (c, s)
                })
                .collect()
        };
        for (cfg, seed) in runs {
            let outcome = cmd_run(cfg, dataset_base, &plan.output, false)?;
            let report = outcome.report.expect("not a dry run");
            row.seeds.push(seed);
            row.last.push(report.last);
            row.avg.push(report.avg);
        }
        rows.push(row);
    }
    let verdict = AblationSummary::verdict(&rows);
    let summary = AblationSummary { rows, verdict };
    let out = &plan.output;
    for (file, body) in [("ablation.md", summary.to_markdown()), ("ablation.csv", summary.to_csv())] {
        let p = out.join(file);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    write_json(&out.join("ablation.json"), &summary)?;
    Ok(summary)
}

/// Summarizes finished runs: a markdown table of per-task accuracy plus a
/// combined SVG written to `svg_out` when given.
pub fn cmd_report(reports: &[PathBuf], svg_out: Option<&Path>) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::config("reports", "no report.json given"));
    }
    let loaded: Vec<RunReport> = reports.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let tasks = loaded.iter().map(|r| r.tasks.len()).max().unwrap_or(0);
    let mut out = String::from("| run | seed |");
    for t in 0..tasks {
        let _ = write!(out, " task {t} |");
    }
    out.push_str(" Avg | Last |\n|---|---:|");
    out.push_str(&"---:|".repeat(tasks + 2));
    out.push('\n');
    let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &loaded {
        *by_name.entry(&r.name).or_default() += 1;
        let _ = write!(out, "| {} | {} |", r.name, r.seed);
        for t in 0..tasks {
            match r.tasks.get(t) {
                Some(task) => {
                    let _ = write!(out, " {:.1} |", task.top1);
                }
                None => out.push_str(" |"),
            }
        }
        let _ = writeln!(out, " {:.1} | {:.1} |", r.avg, r.last);
    }
    if let Some(path) = svg_out {
        let refs: Vec<&RunReport> = loaded.iter().collect();
        fs::write(path, accuracy_svg(&refs)).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, mode: Mode) -> RunConfig {
        RunConfig {
            name: name.into(),
            dataset: "bench".into(),
            split: Some("4x2".into()),
            few_shot: None,
            class_lists: None,
            stream_seed: None,
            encoder: Default::default(),
            train: crate::trainer::TrainConfig { mode, ..crate::trainer::TrainConfig::desk_scale() },
        }
    }

    #[test]
    fn plans_need_two_entries_on_one_stream() {
        let mut plan = ExperimentPlan { output: "out".into(), seeds: vec![], entries: vec![entry("a", Mode::Ft)] };
        assert!(plan.validate().unwrap_err().is_config());
        plan.entries.push(entry("b", Mode::Full));
        plan.validate().unwrap();
        plan.entries[1].split = Some("2x4".into());
        assert!(plan.validate().unwrap_err().to_string().contains("different stream"));
        plan.entries[1].split = Some("4x2".into());
        plan.entries[1].train.seed = 7;
        assert!(plan.validate().is_err());
        plan.seeds = vec![1, 2];
        plan.validate().unwrap();
        plan.entries[1].name = "a".into();
        assert!(plan.validate().unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn verdict_and_tables() {
        let row = |mode: Mode, last: Vec<f64>| AblationRow { name: mode.to_string(), mode, seeds: vec![1, 2], avg: last.clone(), last };
        let rows = vec![row(Mode::Ft, vec![50.0, 60.0]), row(Mode::Full, vec![55.0, 58.0])];
        let v = AblationSummary::verdict(&rows).unwrap();
        assert_eq!((v.holds_per_seed, v.num_seeds, v.holds_on_mean), (1, 2, true));
        let s = AblationSummary { rows, verdict: Some(v) };
        let md = s.to_markdown();
        assert!(md.contains("| ft | ft | 55.0 | 50.0..60.0 | 55.0 |"), "{md}");
        assert!(md.contains("holds on 1/2 seeds"));
        assert!(s.to_csv().contains("full,full,56.5,55.0,58.0,56.5"));
    }

    #[test]
    fn config_errors_exit_2() {
        assert_eq!(exit_code(&Error::config("split", "x")), 2);
        assert_eq!(exit_code(&Error::Protocol("x".into())), 1);
    }
}
