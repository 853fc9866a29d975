//! Localization metrics over per-sample evaluation records.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AREA_BINS;
use crate::error::{Error, Result};
use crate::geometry::{BoxXYXY, ScoredBox};

/// A prediction counts as localized at this IoU or above.
pub const IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(if union > 0.0 { (inter / union).clamp(0.0, 1.0) } else { 0.0 })
}

/// Outcome for one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: usize,
    pub pred_class: usize,
    /// Box of the MAP entry over the whole table.
    pub pred_box: ScoredBox,
    pub pred_iou: f64,
    /// Scale index of the MAP entry.
    pub pred_scale: usize,
    /// Highest-scoring boxes of the ground-truth class, best first.
    pub top5: Vec<ScoredBox>,
    pub top5_iou: Vec<f64>,
    pub gt_label: usize,
    pub gt_box: BoxXYXY,
}

impl EvalRecord {
    pub fn class_correct(&self) -> bool {
        self.pred_class == self.gt_label
    }

    pub fn top1_loc_correct(&self) -> bool {
        self.class_correct() && self.pred_iou >= IOU_THRESHOLD
    }

    pub fn gt_known_correct(&self) -> bool {
        self.top5_iou.first().is_some_and(|&v| v >= IOU_THRESHOLD)
    }

    pub fn top5_correct(&self) -> bool {
        self.top5_iou.iter().take(5).any(|&v| v >= IOU_THRESHOLD)
    }
}

fn fraction(records: &[EvalRecord], f: impl Fn(&EvalRecord) -> bool) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| f(r)).count() as f64 / records.len() as f64
}

pub fn top1_class(records: &[EvalRecord]) -> f64 {
    fraction(records, EvalRecord::class_correct)
}

pub fn top1_loc(records: &[EvalRecord]) -> f64 {
    fraction(records, EvalRecord::top1_loc_correct)
}

pub fn gt_known_loc(records: &[EvalRecord]) -> f64 {
    fraction(records, EvalRecord::gt_known_correct)
}

pub fn top5_box_loc(records: &[EvalRecord]) -> f64 {
    fraction(records, EvalRecord::top5_correct)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub top1_class: f64,
    pub top1_loc: f64,
    pub gt_known_loc: f64,
    pub top5_box_loc: f64,
    /// Mean area of the MAP boxes in pixels.
    pub mean_pred_area: f64,
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let mean_pred_area = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.pred_box.bbox.area()).sum::<f64>() / records.len() as f64
        };
        Self {
            count: records.len(),
            top1_class: top1_class(records),
            top1_loc: top1_loc(records),
            gt_known_loc: gt_known_loc(records),
            top5_box_loc: top5_box_loc(records),
            mean_pred_area,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[EvalRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads newline-delimited records; blank lines are skipped.
pub fn read_records<R: BufRead>(r: R, path: &Path) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in r.split(b'\n') {
        let line = line?;
        let text = String::from_utf8_lossy(&line);
        if !text.trim().is_empty() {
            let rec: EvalRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: offset + e.column().saturating_sub(1),
                msg: e.to_string(),
            })?;
            out.push(rec);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Per-bin counts for two evaluation variants over the same samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub labels: [String; 2],
    /// Upper bin edges; bin `i` spans `[edges[i-1], edges[i])` with an
    /// implicit 0 lower edge for the first bin and the last bin closed.
    pub edges: Vec<f64>,
    pub totals: Vec<usize>,
    /// Top-1 Loc hits per bin for each variant.
    pub correct: [Vec<usize>; 2],
}

impl HistogramReport {
    pub fn accuracy(&self, variant: usize, bin: usize) -> f64 {
        if self.totals[bin] == 0 {
            0.0
        } else {
            self.correct[variant][bin] as f64 / self.totals[bin] as f64
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>4} {:>10} {:>7} {:>12} {:>12}\n",
            "bin", "max_area", "total", self.labels[0], self.labels[1]
        );
        for b in 0..self.totals.len() {
            let _ = writeln!(
                s,
                "{:>4} {:>10.1} {:>7} {:>5} ({:>4.2}) {:>5} ({:>4.2})",
                b,
                self.edges[b],
                self.totals[b],
                self.correct[0][b],
                self.accuracy(0, b),
                self.correct[1][b],
                self.accuracy(1, b)
            );
        }
        s
    }

    /// Grouped bar chart: totals in green, the two variants in blue and red.
    pub fn svg(&self) -> String {
        let (w, h, pad) = (640.0, 320.0, 40.0);
        let nb = self.totals.len().max(1) as f64;
        let max = self.totals.iter().copied().max().unwrap_or(0).max(1) as f64;
        let slot = (w - 2.0 * pad) / nb;
        let bar = slot / 4.0;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
        );
        let colors = ["green", "blue", "red"];
        for b in 0..self.totals.len() {
            let vals = [self.totals[b], self.correct[0][b], self.correct[1][b]];
            for (k, v) in vals.iter().enumerate() {
                let bh = (h - 2.0 * pad) * *v as f64 / max;
                let x = pad + b as f64 * slot + (k as f64 + 0.5) * bar;
                let _ = writeln!(
                    s,
                    "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bar:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>",
                    h - pad - bh,
                    colors[k]
                );
            }
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{b}</text>",
                pad + (b as f64 + 0.5) * slot,
                h - pad + 14.0
            );
        }
        let legend = [("total", 0), (self.labels[0].as_str(), 1), (self.labels[1].as_str(), 2)];
        for (i, (name, c)) in legend.iter().enumerate() {
            let y = 14.0 + 14.0 * i as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>",
                w - 150.0,
                y - 9.0,
                colors[*c],
                w - 135.0,
                y,
                xml_escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bins both record sets by ground-truth area into [`AREA_BINS`] equal-width
/// bins over `[0, max area]` and counts Top-1 Loc hits per bin.
pub fn size_histogram(
    a: &[EvalRecord],
    b: &[EvalRecord],
    labels: [&str; 2],
) -> Result<HistogramReport> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "record sets differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut b_sorted: Vec<&EvalRecord> = b.iter().collect();
    b_sorted.sort_by_key(|r| r.id);
    let mut a_sorted: Vec<&EvalRecord> = a.iter().collect();
    a_sorted.sort_by_key(|r| r.id);
    for (x, y) in a_sorted.iter().zip(&b_sorted) {
        if x.id != y.id || x.gt_box != y.gt_box || x.gt_label != y.gt_label {
            return Err(Error::InvalidArgument(format!(
                "record sets cover different samples (ids {} and {})",
                x.id, y.id
            )));
        }
    }
    let max = a.iter().map(|r| r.gt_box.area()).fold(0.0, f64::max);
    let mut totals = vec![0; AREA_BINS];
    let mut correct = [vec![0; AREA_BINS], vec![0; AREA_BINS]];
    for (x, y) in a_sorted.iter().zip(&b_sorted) {
        let bin = crate::data::area_bin(x.gt_box.area(), max);
        totals[bin] += 1;
        correct[0][bin] += usize::from(x.top1_loc_correct());
        correct[1][bin] += usize::from(y.top1_loc_correct());
    }
    Ok(HistogramReport {
        labels: [labels[0].to_string(), labels[1].to_string()],
        edges: (1..=AREA_BINS).map(|i| max * i as f64 / AREA_BINS as f64).collect(),
        totals,
        correct,
    })
}
