//! Feasible/infeasible gap (Δ₁) and mixing gain (Δ₂), plus a consistency check of published
//! tables against those formulas.
//!
//! Table values are one-decimal percentages, so everything is done in exact integer tenths.
//! Δ₂ has an extra factor of one half and is kept in hundredths before rounding.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::AttributeCategory;

/// `F − IF`.
pub fn delta1(f_acc: f64, if_acc: f64) -> f64 {
    f_acc - if_acc
}

/// `Mix − (F + IF)/2`.
pub fn delta2(mix_acc: f64, f_acc: f64, if_acc: f64) -> f64 {
    mix_acc - (f_acc + if_acc) / 2.0
}

fn tenths(v: f64) -> i64 {
    (v * 10.0).round() as i64
}

/// Round hundredths to tenths, halves away from zero.
pub fn round_hundredths_to_tenths(h: i64) -> i64 {
    let q = h.abs() / 10;
    let r = h.abs() % 10;
    let mag = if r >= 5 { q + 1 } else { q };
    mag * h.signum()
}

/// Δ₂ rounded to one decimal the way the tables print it.
pub fn delta2_rounded(mix_acc: f64, f_acc: f64, if_acc: f64) -> f64 {
    let h = (2 * tenths(mix_acc) - tenths(f_acc) - tenths(if_acc)) * 5;
    round_hundredths_to_tenths(h) as f64 / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    SynOnly,
    RealPlusSyn,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::SynOnly => "syn-only",
            Setting::RealPlusSyn => "real+syn",
        })
    }
}

/// One printed cell group: accuracies and the printed gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaRow {
    pub setting: Setting,
    pub dataset: &'static str,
    pub category: AttributeCategory,
    pub f: f64,
    pub if_: f64,
    pub mix: f64,
    pub printed_delta1: f64,
    pub printed_delta2: f64,
}

const fn row(
    setting: Setting,
    dataset: &'static str,
    category: AttributeCategory,
    v: [f64; 5],
) -> DeltaRow {
    DeltaRow { setting, dataset, category, f: v[0], if_: v[1], mix: v[2], printed_delta1: v[3], printed_delta2: v[4] }
}

use AttributeCategory::{Background as Bg, Color as Co, Texture as Tx};
use Setting::{RealPlusSyn as Rs, SynOnly as So};

/// Published fine-tuning results (top-1 %, synthetic = 5× real), per dataset.
pub const PUBLISHED: [DeltaRow; 18] = [
    row(So, "pets", Bg, [95.4, 95.3, 95.2, 0.1, -0.2]),
    row(So, "airc", Bg, [86.8, 85.0, 87.1, 1.8, 1.2]),
    row(So, "cars", Bg, [93.7, 93.8, 93.8, -0.1, 0.1]),
    row(So, "pets", Co, [94.5, 94.4, 94.1, 0.1, -0.4]),
    row(So, "airc", Co, [80.8, 81.6, 81.9, -0.8, 0.7]),
    row(So, "cars", Co, [91.6, 91.5, 91.6, 0.1, 0.1]),
    row(So, "pets", Tx, [93.8, 93.3, 92.8, 0.5, -0.8]),
    row(So, "airc", Tx, [81.6, 81.9, 82.0, -0.3, 0.3]),
    row(So, "cars", Tx, [90.9, 87.7, 91.8, 3.2, 3.0]),
    row(Rs, "pets", Bg, [95.3, 95.3, 95.3, 0.0, 0.0]),
    row(Rs, "airc", Bg, [88.0, 88.4, 88.6, -0.4, 0.4]),
    row(Rs, "cars", Bg, [93.8, 93.7, 93.6, 0.1, -0.2]),
    row(Rs, "pets", Co, [95.3, 95.2, 95.0, 0.1, -0.3]),
    row(Rs, "airc", Co, [84.6, 84.0, 83.6, 0.6, -0.7]),
    row(Rs, "cars", Co, [92.7, 92.5, 92.8, 0.2, 0.2]),
    row(Rs, "pets", Tx, [95.3, 95.2, 95.2, 0.1, -0.1]),
    row(Rs, "airc", Tx, [83.9, 83.8, 83.8, 0.1, -0.1]),
    row(Rs, "cars", Tx, [93.0, 92.8, 92.6, 0.2, -0.3]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellCheck {
    /// Formula value equals the printed value.
    Exact,
    /// Formula value sits exactly on a .x5 boundary and rounds (half away from zero) to the printed value.
    RoundingTie,
    /// The printed value cannot be obtained from the formula.
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaCheck {
    pub row: DeltaRow,
    pub delta1: f64,
    /// Unrounded Δ₂.
    pub delta2: f64,
    pub delta2_rounded: f64,
    pub delta1_check: CellCheck,
    pub delta2_check: CellCheck,
}

impl DeltaCheck {
    pub fn flagged(&self) -> bool {
        self.delta1_check == CellCheck::Inconsistent || self.delta2_check == CellCheck::Inconsistent
    }

    /// |Δ₂ − printed| in hundredths.
    pub fn delta2_error_hundredths(&self) -> i64 {
        let h = (2 * tenths(self.row.mix) - tenths(self.row.f) - tenths(self.row.if_)) * 5;
        (h - tenths(self.row.printed_delta2) * 10).abs()
    }
}

pub fn check_row(row: &DeltaRow) -> DeltaCheck {
    let d1 = tenths(row.f) - tenths(row.if_);
    let d1_check = if d1 == tenths(row.printed_delta1) { CellCheck::Exact } else { CellCheck::Inconsistent };
    let h = (2 * tenths(row.mix) - tenths(row.f) - tenths(row.if_)) * 5;
    let printed = tenths(row.printed_delta2);
    let d2_check = if h == printed * 10 {
        CellCheck::Exact
    } else if round_hundredths_to_tenths(h) == printed && h.abs() % 10 == 5 {
        CellCheck::RoundingTie
    } else {
        CellCheck::Inconsistent
    };
    DeltaCheck {
        row: *row,
        delta1: d1 as f64 / 10.0,
        delta2: h as f64 / 100.0,
        delta2_rounded: round_hundredths_to_tenths(h) as f64 / 10.0,
        delta1_check: d1_check,
        delta2_check: d2_check,
    }
}

pub fn check_table(rows: &[DeltaRow]) -> Vec<DeltaCheck> {
    rows.iter().map(check_row).collect()
}

fn signed(v: f64) -> String {
    format!("{v:+.1}")
}

/// Human-readable report; flagged cells are marked with `!`.
pub fn format_report(checks: &[DeltaCheck]) -> String {
    let mut out = String::from("setting   dataset category    F     IF    Mix   Δ1(calc/print)  Δ2(calc/print)\n");
    for c in checks {
        let r = &c.row;
        let note = match (c.flagged(), c.delta2_check) {
            (true, _) => " ! inconsistent with formula",
            (false, CellCheck::RoundingTie) => " (tie)",
            _ => "",
        };
        out.push_str(&format!(
            "{:<9} {:<7} {:<10} {:>5.1} {:>5.1} {:>5.1}   {:>5}/{:<5}     {:>6}/{:<5}{}\n",
            r.setting.to_string(),
            r.dataset,
            r.category.as_str(),
            r.f,
            r.if_,
            r.mix,
            signed(c.delta1),
            signed(r.printed_delta1),
            format!("{:+.2}", c.delta2),
            signed(r.printed_delta2),
            note
        ));
    }
    out
}
