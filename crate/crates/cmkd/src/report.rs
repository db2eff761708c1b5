//! CSV traces and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cmkd_core::train::EpochRecord;

pub const TRACE_HEADER: &str = "epoch,l_seg,l_vl,l_c,l_d,lr,val_miou";
pub const REPORT_HEADER: &str = "flavor,label,seed,miou,params";

/// Model labels in table order.
pub const LABELS: [&str; 3] = ["teacher", "baseline", "distilled"];

pub fn trace_rows(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let l = &r.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, l.l_seg, l.l_vl, l.l_c, l.l_d, r.lr, r.val_miou
        )
        .expect("write to String");
    }
    out
}

pub fn trace_csv(records: &[EpochRecord]) -> String {
    format!("{TRACE_HEADER}\n{}", trace_rows(records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub flavor: String,
    pub label: String,
    pub seed: u64,
    pub miou: f64,
    pub params: usize,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.flavor, self.label, self.seed, self.miou, self.params)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return None;
        }
        let miou: f64 = f[3].parse().ok()?;
        if !(0.0..=1.0).contains(&miou) {
            return None;
        }
        Some(ReportRow {
            flavor: f[0].to_string(),
            label: f[1].to_string(),
            seed: f[2].parse().ok()?,
            miou,
            params: f[4].parse().ok()?,
        })
    }

    fn sort_key(&self) -> (String, usize, String, u64) {
        let rank = LABELS.iter().position(|l| *l == self.label).unwrap_or(LABELS.len());
        (self.flavor.clone(), rank, self.label.clone(), self.seed)
    }
}

/// Per-flavour outcome of the distilled-versus-baseline comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FlavorSummary {
    pub flavor: String,
    /// Mean mIoU per label, in [`LABELS`] order where present.
    pub means: Vec<(String, f64)>,
    /// `distilled >= baseline` on every seed present for both.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<FlavorSummary>,
}

impl Report {
    /// Sorts rows by (flavour, label, seed) and evaluates every flavour.
    pub fn new(mut rows: Vec<ReportRow>) -> Self {
        rows.sort_by_key(ReportRow::sort_key);
        let mut by_flavor: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
        for r in &rows {
            by_flavor.entry(&r.flavor).or_default().push(r);
        }
        let summaries = by_flavor
            .into_iter()
            .map(|(flavor, rows)| {
                let mut means: Vec<(String, f64)> = Vec::new();
                for label in rows.iter().map(|r| r.label.as_str()) {
                    if means.iter().any(|(l, _)| l == label) {
                        continue;
                    }
                    let vals: Vec<f64> = rows.iter().filter(|r| r.label == label).map(|r| r.miou).collect();
                    means.push((label.to_string(), vals.iter().sum::<f64>() / vals.len() as f64));
                }
                let seeds =
                    |label: &str| -> BTreeMap<u64, f64> { rows.iter().filter(|r| r.label == label).map(|r| (r.seed, r.miou)).collect() };
                let (base, dist) = (seeds("baseline"), seeds("distilled"));
                let paired: Vec<(f64, f64)> = base.iter().filter_map(|(s, b)| dist.get(s).map(|d| (*b, *d))).collect();
                let pass = !paired.is_empty() && paired.iter().all(|(b, d)| d >= b);
                FlavorSummary {
                    flavor: flavor.to_string(),
                    means,
                    pass,
                }
            })
            .collect();
        Report { rows, summaries }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn pass(&self) -> bool {
        self.summaries.iter().all(|s| s.pass)
    }
}
