use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::config::{RunConfig, Task};
use super::train::{evaluate, timed, train_model, Evaluation, RunData, RunFeatures};
use crate::encoders::{backbone, ModelConfig, Switches};
use crate::error::{Error, Result};
use crate::model::VideoModel;
use crate::synthdata::NUM_CLASSES;

pub const CSV_HEADER: &str = "variant,cross,intra,branch,multilevel,task,metric,value,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Ablation,
    LevelSweep,
    LayerSweep,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "ablation" => Ok(Suite::Ablation),
            "level_sweep" => Ok(Suite::LevelSweep),
            "layer_sweep" => Ok(Suite::LayerSweep),
            _ => Err(Error::Config(format!(
                "unknown suite {s:?} (ablation | level_sweep | layer_sweep)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Ablation => "ablation",
            Suite::LevelSweep => "level_sweep",
            Suite::LayerSweep => "layer_sweep",
        })
    }
}

pub const LEVEL_INTERVALS: [usize; 3] = [1, 2, 3];
pub const LAYER_COUNTS: [usize; 5] = [1, 2, 4, 6, 8];

fn switches(cross: bool, intra: bool, branch: bool, multilevel: bool) -> Switches {
    Switches {
        cross_frame: cross,
        intra_frame: intra,
        branch,
        multilevel,
    }
}

/// The variant label and model config of every row of a suite.
pub fn suite_variants(base: &ModelConfig, suite: Suite) -> Result<Vec<(String, ModelConfig)>> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let rows: Vec<(String, ModelConfig)> = match suite {
        Suite::Ablation => [
            ("a_baseline", switches(false, false, false, false)),
            ("b_posterior", switches(true, true, false, false)),
            ("c_cross_intra_branch", switches(true, true, true, false)),
            ("d_intra_branch_multilevel", switches(false, true, true, true)),
            ("e_cross_branch_multilevel", switches(true, false, true, true)),
            ("f_full", Switches::ALL),
        ]
        .into_iter()
        .map(|(name, s)| (name.to_string(), with(&|c| c.switches = s)))
        .collect(),
        Suite::LevelSweep => {
            let d = base.depth;
            let mut rows: Vec<(String, ModelConfig)> = LEVEL_INTERVALS
                .iter()
                .map(|&i| {
                    (
                        format!("interval_{i}"),
                        with(&|c| {
                            c.level_interval = i;
                            c.level_range_end = d;
                        }),
                    )
                })
                .collect();
            for third in 1..=2 {
                let end = d * third / 3;
                rows.push((
                    format!("range_end_{end:02}"),
                    with(&|c| {
                        c.level_interval = 1;
                        c.level_range_end = end;
                    }),
                ));
            }
            rows
        }
        Suite::LayerSweep => LAYER_COUNTS
            .iter()
            .map(|&k| {
                (
                    format!("layers_{k}"),
                    with(&|c| {
                        c.branch_layers = k;
                        c.level_interval = 1;
                        c.level_range_end = c.depth;
                    }),
                )
            })
            .collect(),
    };
    for (name, c) in &rows {
        c.validate().map_err(|e| {
            Error::Config(format!("{suite} row {name} is infeasible for this base config: {e}"))
        })?;
    }
    Ok(rows)
}

/// One trained and evaluated variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub variant: String,
    pub switches: Switches,
    pub task: Task,
    pub metrics: Evaluation,
    /// Training plus evaluation wall time.
    pub seconds: f64,
}

/// Trains and evaluates every row of `suite` on the same data, backbone and seed.
pub fn run_experiment_suite(base: &RunConfig, suite: Suite) -> Result<Vec<ExperimentRow>> {
    base.validate()?;
    let variants = suite_variants(&base.model, suite)?;
    let data = RunData::prepare(base)?;
    let backbone = backbone::init_backbone(&base.model, base.seed);
    let mut models = Vec::with_capacity(variants.len());
    let mut layers = BTreeSet::new();
    for (name, cfg) in variants {
        let m = VideoModel::with_backbone(cfg, backbone.clone(), base.seed, NUM_CLASSES)?;
        layers.extend(m.required_layers()?);
        models.push((name, m));
    }
    let feats = RunFeatures::build(&data, &models[0].1, &layers)?;
    let mut rows = Vec::with_capacity(models.len());
    for (variant, mut model) in models {
        let (metrics, seconds) = timed(|| {
            train_model(&mut model, &data.train, &feats.train, base)?;
            evaluate(&model, &data.test, &feats.test, base.task, base.use_dsl, base.dsl_temperature)
        })?;
        rows.push(ExperimentRow {
            variant,
            switches: model.config.switches,
            task: base.task,
            metrics,
            seconds: if base.record_time { seconds } else { 0.0 },
        });
    }
    Ok(rows)
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub variant: String,
    pub switches: Switches,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
}

pub fn rows_to_records(rows: &[ExperimentRow]) -> Vec<ReportRecord> {
    rows.iter()
        .flat_map(|r| {
            r.metrics.entries().into_iter().map(|(metric, value)| ReportRecord {
                variant: r.variant.clone(),
                switches: r.switches,
                task: r.task.to_string(),
                metric,
                value,
                seconds: r.seconds,
            })
        })
        .collect()
}

fn flag(b: bool) -> u8 {
    u8::from(b)
}

/// CSV text; records are stably sorted by variant label.
pub fn render_csv(records: &[ReportRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Usage("no rows to report".into()));
    }
    let mut sorted: Vec<&ReportRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.variant.cmp(&b.variant));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        if r.variant.contains(',') || r.metric.contains(',') {
            return Err(Error::Usage(format!("comma in label {:?}/{:?}", r.variant, r.metric)));
        }
        let s = r.switches;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.4},{:.4}\n",
            r.variant,
            flag(s.cross_frame),
            flag(s.intra_frame),
            flag(s.branch),
            flag(s.multilevel),
            r.task,
            r.metric,
            r.value,
            r.seconds
        ));
    }
    Ok(out)
}

pub fn emit_report(rows: &[ExperimentRow], path: impl AsRef<Path>) -> Result<()> {
    let text = render_csv(&rows_to_records(rows))?;
    fs::write(path, text)?;
    Ok(())
}

fn parse_flag(v: &str, line: usize) -> Result<bool> {
    match v {
        "1" => Ok(true),
        "0" => Ok(false),
        _ => Err(Error::Format(format!("line {line}: switch {v:?} is not 0/1"))),
    }
}

/// Reads a CSV written by [`emit_report`].
pub fn parse_report(text: &str) -> Result<Vec<ReportRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("missing report header".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("line {n}: expected 9 fields, got {}", f.len())));
        }
        let num = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Format(format!("line {n}: bad number {v:?}")))
        };
        out.push(ReportRecord {
            variant: f[0].to_string(),
            switches: Switches {
                cross_frame: parse_flag(f[1], n)?,
                intra_frame: parse_flag(f[2], n)?,
                branch: parse_flag(f[3], n)?,
                multilevel: parse_flag(f[4], n)?,
            },
            task: f[5].to_string(),
            metric: f[6].to_string(),
            value: num(f[7])?,
            seconds: num(f[8])?,
        });
    }
    Ok(out)
}

/// Concatenates several reports into one, re-sorted by variant.
pub fn merge_reports(texts: &[String]) -> Result<String> {
    let mut all = Vec::new();
    for t in texts {
        all.extend(parse_report(t)?);
    }
    render_csv(&all)
}
