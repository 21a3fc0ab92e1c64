//! CSV and text renderers. Floats print with six significant digits; exact
//! values go to little-endian `f64` sidecars alongside.

use delta_core::arithmetic::SweepCurve;
use delta_core::codec::f64_le_bytes;
use delta_core::metrics::{sig6, LocalizationCell};
use delta_core::stats::{histogram, Histogram, HISTOGRAM_BINS};

use crate::lab::{LabResult, NegationResult};
use crate::manifest::OutDir;
use crate::LabError;

pub fn sweep_csv(curve: &SweepCurve) -> String {
    let mut out = String::from("alpha,mean_accuracy\n");
    for p in &curve.points {
        out.push_str(&format!("{},{}\n", sig6(p.alpha), sig6(p.metric)));
    }
    out
}

pub fn negation_csv(n: &NegationResult) -> String {
    let mut out = String::from("alpha,target_accuracy,control_accuracy,feasible\n");
    let floor = n.pretrained_control - n.budget_points / 100.0;
    for p in &n.curve {
        out.push_str(&format!("{},{},{},{}\n", sig6(p.alpha), sig6(p.target), sig6(p.control), p.control >= floor - 1e-12));
    }
    out
}

pub fn negation_text(n: &NegationResult) -> String {
    let c = n.chosen();
    let mut out = format!(
        "task {}  pre-trained target {}  control {}  budget {} points\n",
        n.task,
        sig6(n.pretrained_target),
        sig6(n.pretrained_control),
        sig6(n.budget_points)
    );
    match n.selected {
        Some(_) => out.push_str(&format!("selected alpha {}  target {}  control {}\n", sig6(c.alpha), sig6(c.target), sig6(c.control))),
        None => out.push_str(&format!(
            "infeasible: no alpha keeps control within budget; best relaxation alpha {}  target {}  control {}\n",
            sig6(c.alpha),
            sig6(c.target),
            sig6(c.control)
        )),
    }
    out
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("lower,upper,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", sig6(h.edges[i]), sig6(h.edges[i + 1]), c));
    }
    out
}

pub fn localization_csv(cells: &[LocalizationCell]) -> String {
    let mut out = String::from("task,in_domain_median,out_of_domain_median,ratio\n");
    for c in cells {
        let ood = c.out_of_domain.as_ref().map(|o| sig6(o.summary.median)).unwrap_or_default();
        let ratio = c.median_ratio().map(sig6).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", c.task, sig6(c.in_domain.summary.median), ood, ratio));
    }
    out
}

/// Per-sample values: `stem.csv` (rounded) plus `stem.f64` (exact), and a
/// histogram `stem_hist.csv` over `[0, max]`.
pub fn write_values(out: &mut OutDir, stem: &str, header: &str, values: &[f64]) -> LabResult<()> {
    let mut csv = format!("index,{header}\n");
    for (i, v) in values.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", sig6(*v)));
    }
    out.write_text(&format!("{stem}.csv"), &csv)?;
    let raw = format!("{stem}.f64");
    let path = out.file(&raw);
    std::fs::write(&path, f64_le_bytes(values)).map_err(|e| LabError::io(&path, e))?;
    out.output(&raw)?;
    out.write_text(&format!("{stem}_hist.csv"), &histogram_csv(&histogram(values, HISTOGRAM_BINS, None)))
}

/// Student-vs-teacher single-task accuracies.
pub fn teacher_table(task_ids: &[String], teacher: &[f64], student: &[f64]) -> String {
    let mut out = String::from("task,teacher_accuracy,student_accuracy\n");
    for ((id, t), s) in task_ids.iter().zip(teacher).zip(student) {
        out.push_str(&format!("{id},{},{}\n", sig6(*t), sig6(*s)));
    }
    out
}
