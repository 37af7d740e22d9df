//! Side-by-side comparison of a source-only and an adapted eval record.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, Result};
use cfea::eval::EvalReport;
use plotters::prelude::*;

pub struct Row {
    pub name: &'static str,
    pub source_only: Option<f64>,
    pub cfea: Option<f64>,
    /// Dice rows improve upward, the CDR error downward.
    pub higher_is_better: bool,
}

impl Row {
    pub fn difference(&self) -> Option<f64> {
        Some(self.cfea? - self.source_only?)
    }

    pub fn improved(&self) -> bool {
        self.difference().is_some_and(|d| {
            if self.higher_is_better {
                d > 0.0
            } else {
                d < 0.0
            }
        })
    }
}

pub fn rows(so: &EvalReport, cfea: &EvalReport) -> [Row; 3] {
    [
        Row {
            name: "Optic Cup",
            source_only: Some(so.cup_dice),
            cfea: Some(cfea.cup_dice),
            higher_is_better: true,
        },
        Row {
            name: "Optic Disk",
            source_only: Some(so.disc_dice),
            cfea: Some(cfea.disc_dice),
            higher_is_better: true,
        },
        Row {
            name: "CDR",
            source_only: so.cdr_mae,
            cfea: cfea.cdr_mae,
            higher_is_better: false,
        },
    ]
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn comparison_table(so: &EvalReport, cfea: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12}{:>13}{:>10}{:>12}  Improved",
        "", "Source only", "CFEA", "Difference"
    );
    for r in rows(so, cfea) {
        let diff = r
            .difference()
            .map_or_else(|| "n/a".into(), |d| format!("{d:+.4}"));
        let _ = writeln!(
            s,
            "{:<12}{:>13}{:>10}{:>12}  {}",
            r.name,
            cell(r.source_only),
            cell(r.cfea),
            diff,
            if r.improved() { "*" } else { "" }
        );
    }
    let _ = writeln!(s, "(Cup/Disk: Dice, higher is better; CDR: mean absolute error, lower is better)");
    s
}

/// Grouped bars, one pair per metric.
pub fn bar_chart(so: &EvalReport, cfea: &EvalReport, path: &Path) -> Result<()> {
    let rows = rows(so, cfea);
    let top = rows
        .iter()
        .flat_map(|r| [r.source_only, r.cfea])
        .flatten()
        .fold(1.0f64, f64::max);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Target-domain results", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..3.0f64, 0.0..top * 1.05)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(3)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            rows.get(i).map_or(String::new(), |r| r.name.to_string())
        })
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    let series = [
        ("Source only", 0.15, RGBColor(150, 150, 150)),
        ("CFEA", 0.5, RGBColor(40, 100, 200)),
    ];
    for (k, (label, offset, color)) in series.into_iter().enumerate() {
        let bars = rows.iter().enumerate().filter_map(|(i, r)| {
            let v = if k == 0 { r.source_only } else { r.cfea }?;
            let x0 = i as f64 + offset;
            Some(Rectangle::new([(x0, 0.0), (x0 + 0.33, v)], color.filled()))
        });
        chart
            .draw_series(bars)
            .map_err(|e| anyhow!("{e}"))?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cup: f64, disc: f64, cdr: f64) -> EvalReport {
        EvalReport {
            cup_dice: cup,
            disc_dice: disc,
            cdr_mae: Some(cdr),
            n_samples: 10,
            n_cdr_excluded: 0,
        }
    }

    #[test]
    fn equal_records_give_zero_differences() {
        let a = rec(0.7, 0.8, 0.1);
        for r in rows(&a, &a) {
            assert_eq!(r.difference(), Some(0.0));
            assert!(!r.improved());
        }
    }

    #[test]
    fn higher_dice_and_lower_cdr_error_are_improvements() {
        let rows = rows(&rec(0.7, 0.8, 0.1), &rec(0.8, 0.85, 0.05));
        assert!(rows.iter().all(Row::improved));
        let names: Vec<_> = rows.iter().map(|r| r.name).collect();
        assert_eq!(names, ["Optic Cup", "Optic Disk", "CDR"]);
    }
}
