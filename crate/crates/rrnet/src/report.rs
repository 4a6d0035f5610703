//! Evaluation report serialization: JSON rows plus a P-R curve CSV.

use std::fmt::Write as _;

use rrnet_core::metrics::{threshold, MetricReport};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct ImageRow {
    pub name: String,
    pub mae: f64,
    /// Absent for ground truths without foreground.
    pub f_beta: Option<f64>,
    pub e_m: f64,
    pub s_m: f64,
}

#[derive(Debug, Serialize)]
pub struct Aggregate {
    pub images: usize,
    pub mae: f64,
    pub f_beta_max: f64,
    pub f_beta_mean_curve: f64,
    pub e_m: f64,
    pub s_m: f64,
    pub excluded_from_f: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub aggregate: Aggregate,
    pub per_image: Vec<ImageRow>,
}

pub fn build(names: &[String], r: &MetricReport) -> Report {
    let per_image = names
        .iter()
        .zip(&r.per_image)
        .map(|(name, m)| ImageRow {
            name: name.clone(),
            mae: m.mae,
            f_beta: m.f_beta,
            e_m: m.e_m,
            s_m: m.s_m,
        })
        .collect();
    Report {
        aggregate: Aggregate {
            images: r.per_image.len(),
            mae: r.mae,
            f_beta_max: r.f_beta,
            f_beta_mean_curve: r.f_beta_mean_curve,
            e_m: r.e_m,
            s_m: r.s_m,
            excluded_from_f: r.excluded.iter().map(|&i| names[i].clone()).collect(),
        },
        per_image,
    }
}

pub fn to_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// 256 rows of `threshold,precision,recall`, after a header line.
pub fn pr_csv(r: &MetricReport) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for (k, (p, rc)) in r.pr_curve.iter().enumerate() {
        let _ = writeln!(out, "{:.6},{p},{rc}", threshold(k));
    }
    out
}
