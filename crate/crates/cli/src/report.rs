use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use branchseg::difficulty::WorstKRow;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifacts::{
    eval_table, index_name, rank_table, split_name, ArtifactKind, EvalArtifact, EvalModel, RankArtifact, EVAL_FILE,
    EVAL_ROWS, RANK_FILE, RANK_ROWS, SCHEMA_VERSION,
};
use crate::chart::{colour_hex, grouped_bars};
use crate::error::{CliError, CliResult};
use crate::run::{output_dir, read_json, resolve, write_json, write_text, RESOLVED_CONFIG_FILE};

pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Report directory (default: a fresh timestamped directory).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// JSON file with settings; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Run directories holding eval.json / rank.json, or the files themselves.
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub runs: Vec<PathBuf>,
}

/// Everything gathered from the input runs.
#[derive(Debug, Default)]
pub struct Inputs {
    pub evals: Vec<EvalArtifact>,
    pub ranks: Vec<RankArtifact>,
}

fn load_artifact(path: &Path, inputs: &mut Inputs) -> CliResult<()> {
    let value: Value = read_json(path)?;
    let version = value.get("version").and_then(Value::as_u64);
    if version != Some(u64::from(SCHEMA_VERSION)) {
        return Err(CliError::Data(format!(
            "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            version.map_or("missing".into(), |v| v.to_string())
        )));
    }
    let bad = |e: serde_json::Error| CliError::Data(format!("{}: {e}", path.display()));
    let kind: ArtifactKind = serde_json::from_value(value.get("kind").cloned().unwrap_or(Value::Null)).map_err(bad)?;
    match kind {
        ArtifactKind::Eval => inputs.evals.push(serde_json::from_value(value).map_err(bad)?),
        ArtifactKind::Rank => inputs.ranks.push(serde_json::from_value(value).map_err(bad)?),
    }
    Ok(())
}

/// Reads each run directory (or JSON file) in order.
pub fn load_inputs(runs: &[PathBuf]) -> CliResult<Inputs> {
    let mut inputs = Inputs::default();
    for run in runs {
        if run.is_dir() {
            let files: Vec<PathBuf> = [EVAL_FILE, RANK_FILE]
                .iter()
                .map(|f| run.join(f))
                .filter(|p| p.is_file())
                .collect();
            if files.is_empty() {
                return Err(CliError::Data(format!(
                    "{}: no {EVAL_FILE} or {RANK_FILE} found",
                    run.display()
                )));
            }
            for f in files {
                load_artifact(&f, &mut inputs)?;
            }
        } else {
            load_artifact(run, &mut inputs)?;
        }
    }
    Ok(inputs)
}

fn legend(names: &[&str]) -> String {
    let parts: Vec<String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{n} `{}`", colour_hex(i)))
        .collect();
    format!("Bars left to right within each group: {}.\n", parts.join(", "))
}

/// Markdown plus the charts it references, as `(file name, image)` pairs.
pub fn render(inputs: &Inputs) -> (String, Vec<(String, image::RgbImage)>) {
    let mut md = String::from("# Segmentation report\n");
    let mut charts = Vec::new();

    if !inputs.evals.is_empty() {
        let mut models: Vec<(&EvalModel, &EvalArtifact)> = inputs
            .evals
            .iter()
            .flat_map(|a| a.models.iter().map(move |m| (m, a)))
            .collect();
        models.sort_by(|a, b| a.0.name.cmp(&b.0.name));
        let mut settings: Vec<String> = models
            .iter()
            .map(|(_, a)| {
                format!(
                    "{} split, threshold {}, boundary tolerance {} px",
                    split_name(a.split),
                    a.config.threshold,
                    a.config.tolerance_px
                )
            })
            .collect();
        settings.dedup();
        let names: Vec<&str> = models.iter().map(|(m, _)| m.name.as_str()).collect();
        let rows: Vec<(&str, &branchseg::Metrics)> = models
            .iter()
            .map(|(m, _)| (m.name.as_str(), &m.report.aggregate))
            .collect();
        writeln!(md, "\n## Overall metrics\n\n{}.\n", settings.join("; ")).unwrap();
        md.push_str(&eval_table(&rows));
        let groups: Vec<Vec<Option<f64>>> = EVAL_ROWS
            .iter()
            .map(|(_, f)| models.iter().map(|(m, _)| f(&m.report.aggregate)).collect())
            .collect();
        let labels: Vec<&str> = EVAL_ROWS.iter().map(|(l, _)| *l).collect();
        let file = "overall.png".to_string();
        writeln!(md, "\n![Overall metrics]({file})\n").unwrap();
        writeln!(md, "Groups: {}.", labels.join(", ")).unwrap();
        md.push_str(&legend(&names));
        charts.push((file, grouped_bars(&groups)));
    }

    let mut sections: BTreeMap<(&str, usize, &str), (Vec<&WorstKRow>, Vec<&WorstKRow>)> = BTreeMap::new();
    for a in &inputs.ranks {
        let entry = sections
            .entry((index_name(a.index), a.k, split_name(a.split)))
            .or_default();
        entry.0.extend(&a.worst_k);
        entry.1.extend(&a.full_set);
    }
    for ((index, k, split), (mut worst, mut full)) in sections {
        worst.sort_by(|a, b| a.model.cmp(&b.model));
        full.sort_by(|a, b| a.model.cmp(&b.model));
        writeln!(md, "\n## Worst {k} of the {split} split by {index} difficulty\n").unwrap();
        if worst.is_empty() {
            md.push_str("No models were evaluated.\n");
            continue;
        }
        md.push_str(&rank_table(&worst));
        md.push_str("\nSame models over the whole split:\n\n");
        md.push_str(&rank_table(&full));
        let groups: Vec<Vec<Option<f64>>> = RANK_ROWS
            .iter()
            .map(|(_, f)| worst.iter().map(|r| f(r)).collect())
            .collect();
        let labels: Vec<&str> = RANK_ROWS.iter().map(|(l, _)| *l).collect();
        let names: Vec<&str> = worst.iter().map(|r| r.model.as_str()).collect();
        let file = format!("worst_{index}_{split}_k{k}.png");
        writeln!(md, "\n![Worst {k} by {index} difficulty]({file})\n").unwrap();
        writeln!(md, "Groups: {}.", labels.join(", ")).unwrap();
        md.push_str(&legend(&names));
        charts.push((file, grouped_bars(&groups)));
    }
    (md, charts)
}

pub fn run(args: ReportArgs) -> CliResult<()> {
    let cfg: ReportConfig = resolve(ReportConfig::default(), args.config.as_deref(), &args)?;
    if cfg.runs.is_empty() {
        return Err(CliError::Usage("at least one --runs entry is required".into()));
    }
    let inputs = load_inputs(&cfg.runs)?;
    let (md, charts) = render(&inputs);
    let out = output_dir(args.out.as_deref(), "report")?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;
    for (file, img) in &charts {
        let path = out.join(file);
        img.save(&path)
            .map_err(|e| branchseg::Error::Image { path, source: e })?;
    }
    write_text(&out.join(REPORT_FILE), &md)?;
    print!("{md}");
    println!("\nreport written to {}", out.join(REPORT_FILE).display());
    Ok(())
}
