//! Fixed-width text rendering of a summary.

use std::io::{self, Write};

use crate::harness::matrix::{ArmSummary, MeanStd, Summary};

pub const SIGNIFICANCE: f64 = 0.05;

fn cell(m: Option<MeanStd>, p: Option<f64>) -> String {
    let mark = if p.is_some_and(|p| p < SIGNIFICANCE) {
        "*"
    } else {
        " "
    };
    match m {
        Some(m) => format!("{:6.2}±{:5.2}{mark}", 100.0 * m.mean, 100.0 * m.std),
        None => format!("{:>13} ", "n/a"),
    }
}

/// Arms sorted by mean Macro-F1, best first; ties by arm name.
pub fn sorted_arms(summary: &Summary) -> Vec<&ArmSummary> {
    let mut arms: Vec<&ArmSummary> = summary.arms.iter().collect();
    arms.sort_by(|a, b| {
        b.metrics
            .macro_f1
            .mean
            .total_cmp(&a.metrics.macro_f1.mean)
            .then_with(|| a.arm.cmp(&b.arm))
    });
    arms
}

/// Percent mean ± std over seeds; `*` marks p < 0.05 against the primary arm.
pub fn emit_report(summary: &Summary, out: &mut impl Write) -> io::Result<()> {
    writeln!(
        out,
        "{:<28} {:>4}  {:<14}  {:<14}  {:<14}",
        "arm", "runs", "micro_f1", "macro_f1", "auc"
    )?;
    for a in sorted_arms(summary) {
        let p = a.p_values.as_ref();
        writeln!(
            out,
            "{:<28} {:>4}  {}  {}  {}",
            a.arm,
            a.runs,
            cell(Some(a.metrics.micro_f1), p.and_then(|p| p.micro_f1)),
            cell(Some(a.metrics.macro_f1), p.and_then(|p| p.macro_f1)),
            cell(a.metrics.auc, p.and_then(|p| p.auc)),
        )?;
    }
    for f in &summary.failures {
        writeln!(out, "FAILED {} (seed {}): {}", f.arm, f.seed, f.error)?;
    }
    Ok(())
}
