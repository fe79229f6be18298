//! Confusion matrices, per-class metrics, wall-time capture and the result
//! table layouts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// `k × k` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::data(format!(
                "{} counts for a {k}x{k} confusion matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..self.k {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (t, row) in self.rows().iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::format("empty confusion file"))?;
        let k = header.split(',').count() - 1;
        let mut counts = Vec::with_capacity(k * k);
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != k + 1 {
                return Err(Error::format(format!("bad confusion row `{line}`")));
            }
            for c in &cells[1..] {
                counts.push(
                    c.trim()
                        .parse()
                        .map_err(|_| Error::format(format!("bad count `{c}`")))?,
                );
            }
        }
        ConfusionMatrix::from_counts(k, counts)
    }
}

pub fn confusion(y_true: &[u8], y_pred: &[u8], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::data(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t as usize >= k || p as usize >= k {
            return Err(Error::data(format!(
                "label pair ({t}, {p}) outside 0..{k}"
            )));
        }
        counts[t as usize * k + p as usize] += 1;
    }
    ConfusionMatrix::from_counts(k, counts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    /// Support-weighted mean F1.
    pub weighted_f1: f64,
    pub train_time: Option<Duration>,
    pub infer_ms_per_1k: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 per class, with 0 wherever a denominator is 0.
pub fn metrics(m: &ConfusionMatrix) -> MetricsReport {
    let k = m.k();
    let total = m.total();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = m.get(c, c);
            let predicted: u64 = (0..k).map(|t| m.get(t, c)).sum();
            let support: u64 = (0..k).map(|p| m.get(c, p)).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let trace: u64 = (0..k).map(|c| m.get(c, c)).sum();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        per_class
            .iter()
            .map(|c| c.f1 * c.support as f64)
            .sum::<f64>()
            / total as f64
    };
    MetricsReport {
        confusion: m.clone(),
        accuracy: ratio(trace, total),
        per_class,
        macro_f1,
        weighted_f1,
        train_time: None,
        infer_ms_per_1k: None,
    }
}

impl MetricsReport {
    /// Deterministic `metric,class,value` listing; timings are excluded.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value\n");
        let _ = writeln!(s, "accuracy,all,{:.10}", self.accuracy);
        let _ = writeln!(s, "macro_f1,all,{:.10}", self.macro_f1);
        let _ = writeln!(s, "weighted_f1,all,{:.10}", self.weighted_f1);
        for (c, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "precision,{c},{:.10}", m.precision);
            let _ = writeln!(s, "recall,{c},{:.10}", m.recall);
            let _ = writeln!(s, "f1,{c},{:.10}", m.f1);
            let _ = writeln!(s, "support,{c},{}", m.support);
        }
        s
    }

    pub fn to_markdown(&self, title: &str) -> String {
        let mut s = format!("# {title}\n\n");
        let _ = writeln!(s, "accuracy: {:.4}", self.accuracy);
        let _ = writeln!(s, "macro F1: {:.4}", self.macro_f1);
        let _ = writeln!(s, "weighted F1: {:.4}", self.weighted_f1);
        if let Some(t) = self.train_time {
            let _ = writeln!(s, "train time: {}", format_duration(t));
        }
        if let Some(ms) = self.infer_ms_per_1k {
            let _ = writeln!(s, "inference: {ms:.3} ms per 1k samples");
        }
        s.push('\n');
        let headers = ["Class", "Precision", "Recall", "F1", "Support"];
        let rows: Vec<Vec<String>> = self
            .per_class
            .iter()
            .enumerate()
            .map(|(c, m)| {
                vec![
                    c.to_string(),
                    format!("{:.4}", m.precision),
                    format!("{:.4}", m.recall),
                    format!("{:.4}", m.f1),
                    m.support.to_string(),
                ]
            })
            .collect();
        s.push_str(&aligned_table(&headers, &rows));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Run `f` and measure its wall time on the monotonic clock.
pub fn time_phase<T>(phase: Phase, f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    log::debug!("{phase:?} phase took {elapsed:?}");
    (out, elapsed)
}

/// `1 m 36 s` style; sub-second durations in milliseconds.
pub fn format_duration(d: Duration) -> String {
    let secs = d.as_secs();
    if secs == 0 {
        return format!("{} ms", d.as_millis());
    }
    if secs < 60 {
        return format!("{:.1} s", d.as_secs_f64());
    }
    format!("{} m {:02} s", secs / 60, secs % 60)
}

/// Markdown pipe table with padded columns.
pub fn aligned_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = line(headers.to_vec());
    s.push_str(&format!(
        "|{}|\n",
        widths
            .iter()
            .map(|&w| "-".repeat(w + 2))
            .collect::<Vec<_>>()
            .join("|")
    ));
    for row in rows {
        s.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    s
}

/// One experiment cell of a results matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultCell {
    pub label_kind: String,
    pub horizon_ms: i64,
    pub depth: usize,
    pub t: usize,
    pub filter: String,
    pub model: String,
    pub outcome: std::result::Result<MetricsReport, String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.4}"))
}

fn ordered<'a>(values: impl Iterator<Item = &'a str>, canonical: &[&str]) -> Vec<String> {
    let set: BTreeSet<&str> = values.collect();
    let mut out: Vec<String> = canonical
        .iter()
        .filter(|c| set.contains(*c))
        .map(|c| c.to_string())
        .collect();
    out.extend(
        set.iter()
            .filter(|v| !canonical.contains(v))
            .map(|v| v.to_string()),
    );
    out
}

const FILTER_ORDER: [&str; 3] = ["raw", "kalman", "sg"];
const MODEL_ORDER: [&str; 2] = ["gbdt", "logistic"];

/// Display name of a filter kind in tables.
pub fn filter_label(name: &str) -> &str {
    match name {
        "raw" => "Raw",
        "kalman" => "Kalman",
        "sg" => "Savitzky–Golay",
        other => other,
    }
}

/// Rendered CSV and markdown for one table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub csv: String,
    pub markdown: String,
}

/// Filters × models accuracy tables, one per label kind, with one block per
/// (horizon, depth). Failed cells are blank and listed under the table.
pub fn horizon_filter_tables(cells: &[ResultCell]) -> Table {
    let mut csv = String::from("label_kind,horizon_ms,depth,t,filter,model,accuracy,macro_f1,weighted_f1,error\n");
    let mut md = String::new();
    let kinds: BTreeSet<&str> = cells.iter().map(|c| c.label_kind.as_str()).collect();
    for kind in kinds {
        let of_kind: Vec<&ResultCell> = cells.iter().filter(|c| c.label_kind == kind).collect();
        let models = ordered(of_kind.iter().map(|c| c.model.as_str()), &MODEL_ORDER);
        let blocks: BTreeSet<(i64, usize, usize)> =
            of_kind.iter().map(|c| (c.horizon_ms, c.depth, c.t)).collect();
        let mut headers = vec!["Filter".to_string()];
        headers.extend(models.iter().cloned());
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        for (h, depth, t) in blocks {
            let block: Vec<&&ResultCell> = of_kind
                .iter()
                .filter(|c| (c.horizon_ms, c.depth, c.t) == (h, depth, t))
                .collect();
            let mut title = vec![format!("Next {h} ms, {depth}-level LOB, T={t}")];
            title.resize(headers.len(), String::new());
            rows.push(title);
            for filter in ordered(block.iter().map(|c| c.filter.as_str()), &FILTER_ORDER) {
                let mut row = vec![filter_label(&filter).to_string()];
                for model in &models {
                    let cell = block
                        .iter()
                        .find(|c| &c.filter == &filter && &c.model == model);
                    row.push(match cell.map(|c| &c.outcome) {
                        Some(Ok(r)) => format!("{:.4}", r.accuracy),
                        Some(Err(e)) => {
                            notes.push(format!("{h} ms / {depth} / {filter} / {model}: {e}"));
                            String::new()
                        }
                        None => String::new(),
                    });
                    if let Some(c) = cell {
                        let (acc, mf, wf, err) = match &c.outcome {
                            Ok(r) => (
                                Some(r.accuracy),
                                Some(r.macro_f1),
                                Some(r.weighted_f1),
                                String::new(),
                            ),
                            Err(e) => (None, None, None, e.replace(',', ";")),
                        };
                        let _ = writeln!(
                            csv,
                            "{kind},{h},{depth},{t},{filter},{model},{},{},{},{err}",
                            fmt_opt(acc),
                            fmt_opt(mf),
                            fmt_opt(wf)
                        );
                    }
                }
                rows.push(row);
            }
        }
        let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
        let _ = writeln!(md, "## {} classification accuracy\n", capitalize(kind));
        md.push_str(&aligned_table(&header_refs, &rows));
        if !notes.is_empty() {
            md.push_str("\nFailed cells:\n");
            for n in notes {
                let _ = writeln!(md, "- {n}");
            }
        }
        md.push('\n');
    }
    Table { csv, markdown: md }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
        .unwrap_or_default()
}

fn class_count(cells: &[&ResultCell]) -> usize {
    cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok())
        .map(|r| r.per_class.len())
        .max()
        .unwrap_or(0)
}

/// Accuracy, per-class F1 and test support per LOB depth, deepest first.
pub fn depth_table(cells: &[ResultCell]) -> Table {
    let mut sorted: Vec<&ResultCell> = cells.iter().collect();
    sorted.sort_by(|a, b| {
        b.depth
            .cmp(&a.depth)
            .then(a.model.cmp(&b.model))
            .then(a.filter.cmp(&b.filter))
    });
    let k = class_count(&sorted);
    let mut headers = vec!["Depth".to_string(), "Model".into(), "Accuracy".into()];
    headers.extend((0..k).map(|c| format!("F1({c})")));
    headers.push("Support".into());
    let mut csv = String::from("depth,model,filter,accuracy");
    for c in 0..k {
        let _ = write!(csv, ",f1_{c}");
    }
    csv.push_str(",support\n");
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|c| {
            let mut row = vec![format!("{} levels", c.depth), c.model.clone()];
            let _ = write!(csv, "{},{},{}", c.depth, c.model, c.filter);
            match &c.outcome {
                Ok(r) => {
                    row.push(format!("{:.4}", r.accuracy));
                    let _ = write!(csv, ",{:.4}", r.accuracy);
                    for cls in 0..k {
                        let f1 = r.per_class.get(cls).map(|m| m.f1);
                        row.push(fmt_opt(f1));
                        let _ = write!(csv, ",{}", fmt_opt(f1));
                    }
                    let support = r.confusion.total();
                    row.push(support.to_string());
                    let _ = writeln!(csv, ",{support}");
                }
                Err(_) => {
                    row.resize(headers.len(), String::new());
                    let _ = writeln!(csv, "{}", ",".repeat(k + 2));
                }
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
    Table {
        csv,
        markdown: aligned_table(&header_refs, &rows),
    }
}

/// Per model and sequence length: accuracy, per-class F1 and support, and
/// training time.
pub fn sequence_table(cells: &[ResultCell]) -> Table {
    let mut sorted: Vec<&ResultCell> = cells.iter().collect();
    sorted.sort_by(|a, b| a.model.cmp(&b.model).then(a.t.cmp(&b.t)));
    let k = class_count(&sorted);
    let mut headers = vec!["Model".to_string(), "T".into(), "Accuracy".into()];
    headers.extend((0..k).map(|c| format!("F1({c})")));
    headers.extend((0..k).map(|c| format!("Support {c}")));
    headers.push("Run time".into());
    let mut csv = String::from("model,t,accuracy");
    for c in 0..k {
        let _ = write!(csv, ",f1_{c}");
    }
    for c in 0..k {
        let _ = write!(csv, ",support_{c}");
    }
    csv.push('\n');
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|c| {
            let mut row = vec![c.model.clone(), c.t.to_string()];
            let _ = write!(csv, "{},{}", c.model, c.t);
            match &c.outcome {
                Ok(r) => {
                    row.push(format!("{:.4}", r.accuracy));
                    let _ = write!(csv, ",{:.4}", r.accuracy);
                    for cls in 0..k {
                        let f1 = r.per_class.get(cls).map(|m| m.f1);
                        row.push(fmt_opt(f1));
                        let _ = write!(csv, ",{}", fmt_opt(f1));
                    }
                    for cls in 0..k {
                        let s = r.per_class.get(cls).map_or(0, |m| m.support);
                        row.push(s.to_string());
                        let _ = write!(csv, ",{s}");
                    }
                    row.push(r.train_time.map(format_duration).unwrap_or_default());
                    csv.push('\n');
                }
                Err(_) => {
                    row.resize(headers.len(), String::new());
                    let _ = writeln!(csv, "{}", ",".repeat(2 * k + 1));
                }
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
    Table {
        csv,
        markdown: aligned_table(&header_refs, &rows),
    }
}

/// Group cells by an arbitrary key, preserving first-seen order within groups.
pub fn group_by<K: Ord, F: Fn(&ResultCell) -> K>(
    cells: &[ResultCell],
    key: F,
) -> BTreeMap<K, Vec<ResultCell>> {
    let mut out: BTreeMap<K, Vec<ResultCell>> = BTreeMap::new();
    for c in cells {
        out.entry(key(c)).or_default().push(c.clone());
    }
    out
}
