//! Snapshot ingestion: canonical NDJSON parsing, depth-k filtering and
//! coverage accounting.
//!
//! Canonical input is one JSON record per line:
//!
//! ```text
//! {"ts": 1738195200000, "b": [[price, qty], ...], "a": [[price, qty], ...]}
//! ```
//!
//! Levels are best-first. An absent level is either omitted (past the end of
//! the list) or written as `null`; either way it is read as NaN. Prices and
//! quantities may be JSON numbers or numeric strings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// One price level. Either field may be NaN when the level is absent.
#[derive(Debug, Clone, Copy)]
pub struct Level {
    pub price: f64,
    pub qty: f64,
}

impl Level {
    pub const MISSING: Level = Level {
        price: f64::NAN,
        qty: f64::NAN,
    };

    pub fn is_present(&self) -> bool {
        self.price.is_finite() && self.qty.is_finite()
    }
}

impl PartialEq for Level {
    /// NaN compares equal to NaN so that absent levels round-trip.
    fn eq(&self, other: &Self) -> bool {
        same_or_both_nan(self.price, other.price) && same_or_both_nan(self.qty, other.qty)
    }
}

fn same_or_both_nan(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a == b
}

/// A parsed record before depth filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSnapshot {
    pub ts: i64,
    pub bids: Vec<Level>,
    pub asks: Vec<Level>,
}

impl RawSnapshot {
    /// Serialize to one canonical NDJSON line (without the trailing newline).
    pub fn to_ndjson(&self) -> String {
        let mut out = String::with_capacity(32 + 40 * (self.bids.len() + self.asks.len()));
        let _ = write!(out, "{{\"ts\":{},\"b\":", self.ts);
        write_side(&mut out, &self.bids);
        out.push_str(",\"a\":");
        write_side(&mut out, &self.asks);
        out.push('}');
        out
    }
}

fn write_side(out: &mut String, levels: &[Level]) {
    out.push('[');
    for (i, l) in levels.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if l.price.is_nan() && l.qty.is_nan() {
            out.push_str("null");
        } else {
            out.push('[');
            write_num(out, l.price);
            out.push(',');
            write_num(out, l.qty);
            out.push(']');
        }
    }
    out.push(']');
}

fn write_num(out: &mut String, v: f64) {
    if v.is_finite() {
        // `{:?}` is the shortest round-trip representation and always keeps a
        // decimal point or exponent, so the JSON stays a float.
        let _ = write!(out, "{v:?}");
    } else {
        out.push_str("null");
    }
}

/// Dense depth-k book. All values are finite and the ladders are monotone.
#[derive(Debug, Clone, PartialEq)]
pub struct BookFrame {
    pub ts: i64,
    pub bid_price: Vec<f64>,
    pub bid_qty: Vec<f64>,
    pub ask_price: Vec<f64>,
    pub ask_qty: Vec<f64>,
}

impl BookFrame {
    pub fn new(
        ts: i64,
        bid_price: Vec<f64>,
        bid_qty: Vec<f64>,
        ask_price: Vec<f64>,
        ask_qty: Vec<f64>,
    ) -> Result<Self> {
        let k = bid_price.len();
        if k == 0 || bid_qty.len() != k || ask_price.len() != k || ask_qty.len() != k {
            return Err(Error::data(format!("frame at ts={ts}: inconsistent depth")));
        }
        let frame = BookFrame {
            ts,
            bid_price,
            bid_qty,
            ask_price,
            ask_qty,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn depth(&self) -> usize {
        self.bid_price.len()
    }

    fn validate(&self) -> Result<()> {
        let all = self
            .bid_price
            .iter()
            .chain(&self.bid_qty)
            .chain(&self.ask_price)
            .chain(&self.ask_qty);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("frame at ts={}: non-finite value", self.ts)));
        }
        if self.bid_qty.iter().chain(&self.ask_qty).any(|&q| q < 0.0) {
            return Err(Error::data(format!("frame at ts={}: negative quantity", self.ts)));
        }
        if !strictly(&self.bid_price, |a, b| a > b) || !strictly(&self.ask_price, |a, b| a < b) {
            return Err(Error::data(format!("frame at ts={}: price ladder not monotone", self.ts)));
        }
        if self.bid_price[0] >= self.ask_price[0] {
            return Err(Error::data(format!("frame at ts={}: crossed book", self.ts)));
        }
        Ok(())
    }
}

fn strictly(xs: &[f64], ok: impl Fn(f64, f64) -> bool) -> bool {
    xs.windows(2).all(|w| ok(w[0], w[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    MissingDepth,
    Crossed,
}

/// Counters accumulated over one ingestion pass.
///
/// `total_records == accepted + rejected_*` once every parsed snapshot has
/// been classified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub total_records: u64,
    pub accepted: u64,
    pub rejected_missing_depth: u64,
    pub rejected_crossed: u64,
    pub rejected_malformed: u64,
    pub rejected_duplicate_ts: u64,
}

impl IngestStats {
    pub fn rejected(&self) -> u64 {
        self.rejected_missing_depth
            + self.rejected_crossed
            + self.rejected_malformed
            + self.rejected_duplicate_ts
    }

    pub fn is_balanced(&self) -> bool {
        self.total_records == self.accepted + self.rejected()
    }

    pub fn acceptance_ratio(&self) -> f64 {
        if self.total_records == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total_records as f64
        }
    }

    pub fn record(&mut self, outcome: std::result::Result<(), Rejection>) {
        match outcome {
            Ok(()) => self.accepted += 1,
            Err(Rejection::MissingDepth) => self.rejected_missing_depth += 1,
            Err(Rejection::Crossed) => self.rejected_crossed += 1,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Num {
    F(f64),
    S(String),
}

impl Num {
    fn value(&self) -> Option<f64> {
        match self {
            Num::F(v) => Some(*v),
            Num::S(s) => s.trim().parse().ok(),
        }
    }
}

#[derive(Deserialize)]
struct Record {
    ts: i64,
    #[serde(default)]
    b: Vec<Option<Vec<Option<Num>>>>,
    #[serde(default)]
    a: Vec<Option<Vec<Option<Num>>>>,
}

/// Parse one canonical record. `None` means the line is malformed.
pub fn parse_record(line: &str, max_depth: usize) -> Option<RawSnapshot> {
    let rec: Record = serde_json::from_str(line).ok()?;
    if rec.ts <= 0 {
        return None;
    }
    let bids = parse_side(&rec.b, max_depth, |a, b| a > b)?;
    let asks = parse_side(&rec.a, max_depth, |a, b| a < b)?;
    Some(RawSnapshot {
        ts: rec.ts,
        bids,
        asks,
    })
}

fn parse_side(
    raw: &[Option<Vec<Option<Num>>>],
    max_depth: usize,
    ordered: impl Fn(f64, f64) -> bool,
) -> Option<Vec<Level>> {
    let mut out = Vec::with_capacity(raw.len().min(max_depth));
    let mut last_price: Option<f64> = None;
    for entry in raw.iter().take(max_depth) {
        let level = match entry {
            None => Level::MISSING,
            Some(pair) => {
                if pair.len() != 2 {
                    return None;
                }
                let get = |slot: &Option<Num>| match slot {
                    None => Some(f64::NAN),
                    Some(n) => n.value(),
                };
                Level {
                    price: get(&pair[0])?,
                    qty: get(&pair[1])?,
                }
            }
        };
        if level.price.is_finite() {
            if level.price <= 0.0 {
                return None;
            }
            if let Some(prev) = last_price {
                if !ordered(prev, level.price) {
                    return None;
                }
            }
            last_price = Some(level.price);
        }
        if level.qty.is_finite() && level.qty < 0.0 {
            return None;
        }
        out.push(level);
    }
    Some(out)
}

/// Streaming parser over canonical NDJSON.
///
/// Malformed lines and non-increasing timestamps are counted and skipped;
/// only I/O failures surface as errors.
pub struct SnapshotStream<R> {
    lines: io::Lines<R>,
    max_depth: usize,
    last_ts: Option<i64>,
    record_limit: Option<u64>,
    stats: IngestStats,
}

pub fn parse_snapshot_stream<R: BufRead>(source: R, max_depth: usize) -> SnapshotStream<R> {
    SnapshotStream {
        lines: source.lines(),
        max_depth,
        last_ts: None,
        record_limit: None,
        stats: IngestStats::default(),
    }
}

impl<R: BufRead> SnapshotStream<R> {
    /// Stop after this many non-empty records have been read.
    pub fn with_record_limit(mut self, limit: Option<u64>) -> Self {
        self.record_limit = limit;
        self
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    pub fn into_stats(self) -> IngestStats {
        self.stats
    }
}

impl<R: BufRead> Iterator for SnapshotStream<R> {
    type Item = io::Result<RawSnapshot>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(limit) = self.record_limit {
                if self.stats.total_records >= limit {
                    return None;
                }
            }
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e)),
            };
            if line.trim().is_empty() {
                continue;
            }
            self.stats.total_records += 1;
            let Some(snap) = parse_record(&line, self.max_depth) else {
                self.stats.rejected_malformed += 1;
                continue;
            };
            if self.last_ts.is_some_and(|prev| snap.ts <= prev) {
                self.stats.rejected_duplicate_ts += 1;
                continue;
            }
            self.last_ts = Some(snap.ts);
            return Some(Ok(snap));
        }
    }
}

/// Dense depth-k view of a snapshot, or the reason it is unusable at `k`.
pub fn to_book_frame(s: &RawSnapshot, k: usize) -> std::result::Result<BookFrame, Rejection> {
    assert!(k >= 1, "depth must be at least 1");
    if s.bids.len() < k || s.asks.len() < k {
        return Err(Rejection::MissingDepth);
    }
    let (bids, asks) = (&s.bids[..k], &s.asks[..k]);
    if !bids.iter().chain(asks).all(Level::is_present) {
        return Err(Rejection::MissingDepth);
    }
    if bids[0].price >= asks[0].price {
        return Err(Rejection::Crossed);
    }
    Ok(BookFrame {
        ts: s.ts,
        bid_price: bids.iter().map(|l| l.price).collect(),
        bid_qty: bids.iter().map(|l| l.qty).collect(),
        ask_price: asks.iter().map(|l| l.price).collect(),
        ask_qty: asks.iter().map(|l| l.qty).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub depth: usize,
    /// Number of records (or accepted frames, see below) to take.
    pub limit: Option<u64>,
    /// When true the limit counts input records before depth filtering;
    /// otherwise it counts accepted frames.
    pub take_before_depth_filter: bool,
}

impl IngestOptions {
    pub fn new(depth: usize) -> Self {
        IngestOptions {
            depth,
            limit: None,
            take_before_depth_filter: true,
        }
    }
}

/// Parse a canonical stream and keep the frames that are dense at `opts.depth`.
pub fn ingest<R: BufRead>(source: R, opts: &IngestOptions) -> Result<(Vec<BookFrame>, IngestStats)> {
    if opts.depth == 0 {
        return Err(Error::config("depth must be at least 1"));
    }
    let record_limit = if opts.take_before_depth_filter {
        opts.limit
    } else {
        None
    };
    let mut stream = parse_snapshot_stream(source, opts.depth).with_record_limit(record_limit);
    let mut frames = Vec::new();
    let mut classified = IngestStats::default();
    for snap in stream.by_ref() {
        let snap = snap?;
        match to_book_frame(&snap, opts.depth) {
            Ok(frame) => {
                classified.record(Ok(()));
                frames.push(frame);
                if !opts.take_before_depth_filter
                    && opts.limit.is_some_and(|l| frames.len() as u64 >= l)
                {
                    break;
                }
            }
            Err(r) => classified.record(Err(r)),
        }
    }
    let parsed = stream.into_stats();
    let stats = IngestStats {
        total_records: parsed.total_records,
        rejected_malformed: parsed.rejected_malformed,
        rejected_duplicate_ts: parsed.rejected_duplicate_ts,
        ..classified
    };
    debug_assert!(stats.is_balanced());
    Ok((frames, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub text: String,
    pub csv: String,
}

pub fn coverage_report(stats: &IngestStats) -> CoverageReport {
    let ratio = stats.acceptance_ratio();
    let text = format!(
        "records: {}\naccepted: {}\nrejected_missing_depth: {}\nrejected_crossed: {}\n\
         rejected_malformed: {}\nrejected_duplicate_ts: {}\nacceptance_ratio: {:.4}\n",
        stats.total_records,
        stats.accepted,
        stats.rejected_missing_depth,
        stats.rejected_crossed,
        stats.rejected_malformed,
        stats.rejected_duplicate_ts,
        ratio
    );
    let csv = format!(
        "total_records,accepted,rejected_missing_depth,rejected_crossed,rejected_malformed,\
         rejected_duplicate_ts,acceptance_ratio\n{},{},{},{},{},{},{:.4}\n",
        stats.total_records,
        stats.accepted,
        stats.rejected_missing_depth,
        stats.rejected_crossed,
        stats.rejected_malformed,
        stats.rejected_duplicate_ts,
        ratio
    );
    CoverageReport { text, csv }
}

/// Column names of the frame dump, `bp1,bq1,ap1,aq1,...`.
pub fn level_column_names(k: usize) -> Vec<String> {
    (1..=k)
        .flat_map(|i| {
            [
                format!("bp{i}"),
                format!("bq{i}"),
                format!("ap{i}"),
                format!("aq{i}"),
            ]
        })
        .collect()
}

pub fn write_frames_csv<W: Write>(frames: &[BookFrame], mut out: W) -> Result<()> {
    let k = frames.first().map_or(0, BookFrame::depth);
    write!(out, "ts")?;
    for name in level_column_names(k) {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for f in frames {
        if f.depth() != k {
            return Err(Error::data("frames have mixed depth"));
        }
        write!(out, "{}", f.ts)?;
        for i in 0..k {
            write!(
                out,
                ",{},{},{},{}",
                f.bid_price[i], f.bid_qty[i], f.ask_price[i], f.ask_qty[i]
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_frames_csv<R: BufRead>(source: R) -> Result<Vec<BookFrame>> {
    let mut lines = source.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty frame file"))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"ts") || (cols.len() - 1) % 4 != 0 {
        return Err(Error::format("frame header must be ts followed by 4k level columns"));
    }
    let k = (cols.len() - 1) / 4;
    if cols[1..] != level_column_names(k).iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(Error::format("frame header columns out of order"));
    }
    let mut frames = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(format!("frame file line {}: bad row", lineno + 2));
        let mut fields = line.trim().split(',');
        let ts: i64 = fields.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let vals: Vec<f64> = fields
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if vals.len() != 4 * k {
            return Err(bad());
        }
        let pick = |off: usize| (0..k).map(|i| vals[4 * i + off]).collect::<Vec<_>>();
        frames.push(BookFrame::new(ts, pick(0), pick(1), pick(2), pick(3))?);
    }
    Ok(frames)
}

/// Counters for [`convert_bybit`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConvertStats {
    pub messages: u64,
    pub skipped: u64,
    pub records_written: u64,
}

/// Convert a Bybit `orderbook.<depth>` message archive (snapshot + delta
/// messages, one JSON object per line) into canonical records.
///
/// The book is maintained from the messages and one record is emitted per
/// distinct timestamp holding the state after the last message at that
/// timestamp. Messages before the first snapshot are skipped.
pub fn convert_bybit<R: BufRead, W: Write>(
    source: R,
    mut out: W,
    max_depth: usize,
) -> Result<ConvertStats> {
    const SCALE: f64 = 1e8;
    let mut stats = ConvertStats::default();
    let mut bids: BTreeMap<i64, f64> = BTreeMap::new();
    let mut asks: BTreeMap<i64, f64> = BTreeMap::new();
    let mut synced = false;
    let mut pending_ts: Option<i64> = None;

    let emit = |ts: i64, bids: &BTreeMap<i64, f64>, asks: &BTreeMap<i64, f64>, out: &mut W| {
        let to_level = |(&p, &q): (&i64, &f64)| Level {
            price: p as f64 / SCALE,
            qty: q,
        };
        let snap = RawSnapshot {
            ts,
            bids: bids.iter().rev().take(max_depth).map(to_level).collect(),
            asks: asks.iter().take(max_depth).map(to_level).collect(),
        };
        writeln!(out, "{}", snap.to_ndjson())
    };

    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.messages += 1;
        let Ok(msg) = serde_json::from_str::<Value>(&line) else {
            stats.skipped += 1;
            continue;
        };
        let kind = msg.get("type").and_then(Value::as_str).unwrap_or("");
        let ts = msg.get("ts").and_then(Value::as_i64);
        let data = msg.get("data");
        let (Some(ts), Some(data)) = (ts, data) else {
            stats.skipped += 1;
            continue;
        };
        match kind {
            "snapshot" => {
                bids.clear();
                asks.clear();
                synced = true;
            }
            "delta" if synced => {}
            _ => {
                stats.skipped += 1;
                continue;
            }
        }
        if let Some(prev) = pending_ts {
            if ts != prev {
                emit(prev, &bids, &asks, &mut out)?;
                stats.records_written += 1;
            }
        }
        for (side, book) in [("b", &mut bids), ("a", &mut asks)] {
            let Some(levels) = data.get(side).and_then(Value::as_array) else {
                continue;
            };
            for lvl in levels {
                let parse = |v: Option<&Value>| -> Option<f64> {
                    match v? {
                        Value::String(s) => s.parse().ok(),
                        Value::Number(n) => n.as_f64(),
                        _ => None,
                    }
                };
                let (Some(p), Some(q)) = (parse(lvl.get(0)), parse(lvl.get(1))) else {
                    continue;
                };
                let key = (p * SCALE).round() as i64;
                if q == 0.0 {
                    book.remove(&key);
                } else {
                    book.insert(key, q);
                }
            }
        }
        pending_ts = Some(ts);
    }
    if let Some(ts) = pending_ts {
        emit(ts, &bids, &asks, &mut out)?;
        stats.records_written += 1;
    }
    Ok(stats)
}
