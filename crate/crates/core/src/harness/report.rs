//! Mean ± std tables and accuracy-vs-stage plots from persisted bundles.

use std::fs;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::ResultsBundle;
use crate::error::{Error, Result};
use crate::inference::StageReport;

/// Mean and sample standard deviation (zero for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub seeds: usize,
    pub task_accuracy: (f64, f64),
    pub class_accuracy: (f64, f64),
    pub oracle_class_accuracy: (f64, f64),
    pub base_class_accuracy: (f64, f64),
    pub single_sample_task_accuracy: (f64, f64),
    pub avg_incremental_accuracy: (f64, f64),
}

/// Per-stage statistics over seeds. Average incremental accuracy is
/// recomputed from the per-stage class accuracies of each seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stages: Vec<StageSummary>,
}

impl Summary {
    pub fn of(bundle: &ResultsBundle) -> Summary {
        let stages = (1..=bundle.num_stages())
            .map(|t| {
                let reports: Vec<&StageReport> = bundle
                    .runs
                    .iter()
                    .filter_map(|r| r.reports.iter().find(|x| x.stage == t))
                    .collect();
                let stat =
                    |f: &dyn Fn(&StageReport) -> f64| mean_std(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
                let avg_inc: Vec<f64> = bundle
                    .runs
                    .iter()
                    .filter(|r| r.reports.len() >= t)
                    .map(|r| r.reports[..t].iter().map(|x| x.class_accuracy).sum::<f64>() / t as f64)
                    .collect();
                StageSummary {
                    stage: t,
                    seeds: reports.len(),
                    task_accuracy: stat(&|r| r.task_accuracy),
                    class_accuracy: stat(&|r| r.class_accuracy),
                    oracle_class_accuracy: stat(&|r| r.oracle_class_accuracy),
                    base_class_accuracy: stat(&|r| r.base_class_accuracy),
                    single_sample_task_accuracy: stat(&|r| r.single_sample_task_accuracy),
                    avg_incremental_accuracy: mean_std(&avg_inc),
                }
            })
            .collect();
        Summary { stages }
    }
}

const COLUMNS: [&str; 6] = [
    "task",
    "class",
    "oracle_class",
    "base_class",
    "single_task",
    "avg_incremental",
];

/// Tab-delimited table with a mean and a std column per metric.
pub fn render_table(summary: &Summary) -> String {
    let mut s = String::from("stage\tseeds");
    for c in COLUMNS {
        s.push_str(&format!("\t{c}_mean\t{c}_std"));
    }
    s.push('\n');
    for st in &summary.stages {
        s.push_str(&format!("{}\t{}", st.stage, st.seeds));
        for (m, sd) in [
            st.task_accuracy,
            st.class_accuracy,
            st.oracle_class_accuracy,
            st.base_class_accuracy,
            st.single_sample_task_accuracy,
            st.avg_incremental_accuracy,
        ] {
            s.push_str(&format!("\t{m:.6}\t{sd:.6}"));
        }
        s.push('\n');
    }
    s
}

type Metric = fn(&StageSummary) -> f64;

/// Task and class accuracy (means over seeds) against stage, as SVG.
pub fn write_plot(summary: &Summary, title: &str, path: &Path) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Format(format!("plot: {e}"));
    let n = summary.stages.len().max(1);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.5f64..n as f64 + 0.5, 0.0f64..1.02)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("stage")
        .y_desc("accuracy over seen classes")
        .x_labels(n)
        .x_label_formatter(&|x| format!("{}", x.round() as i64))
        .draw()
        .map_err(|e| plot_err(&e))?;
    let series: [(&str, RGBColor, Metric); 2] = [
        ("task accuracy", BLUE, |s| s.task_accuracy.0),
        ("class accuracy", RED, |s| s.class_accuracy.0),
    ];
    for (label, color, f) in series {
        let points: Vec<(f64, f64)> = summary.stages.iter().map(|s| (s.stage as f64, f(s))).collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Report {
    pub summary: Summary,
    pub table: String,
}

/// Summarizes the bundle in `dir`, writing `report.tsv` and `accuracy.svg`
/// next to it.
pub fn report(dir: &Path) -> Result<Report> {
    let bundle = ResultsBundle::read(dir)?;
    if bundle.runs.iter().all(|r| r.reports.is_empty()) {
        return Err(Error::EmptyBundle);
    }
    let summary = Summary::of(&bundle);
    let table = render_table(&summary);
    fs::write(dir.join("report.tsv"), &table)?;
    write_plot(&summary, &bundle.name, &dir.join("accuracy.svg"))?;
    Ok(Report { summary, table })
}
