//! Training-dynamics instrumentation: residue percentiles, log-spaced
//! residue histograms, and the per-step / per-epoch metric rows.

use std::io::Write;

use crate::error::{Error, Result};

/// Nearest-rank percentile of `|values|`: the `ceil(q·n)`-th smallest
/// magnitude. Returns 0 for an empty slice.
pub fn percentile_abs(values: &[f32], q: f64) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    let mut mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let (_, kth, _) = mags.select_nth_unstable_by(rank - 1, f32::total_cmp);
    *kth
}

pub const HISTOGRAM_BUCKETS: usize = 64;

/// Decades of magnitude covered below `max|x|` on each side of zero.
pub const HISTOGRAM_DECADES: f64 = 8.0;

/// Symmetric log-spaced histogram spanning `[-max|x|, max|x|]`.
///
/// Buckets `0..32` cover negative values from the far tail inwards, buckets
/// `32..64` cover non-negative values outwards. Magnitude edges are
/// `M·10^(-8·(32-k)/32)` for `k = 1..=32`; the two innermost buckets also
/// absorb everything smaller, zero included (zero counts as non-negative).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub max_abs: f32,
    /// Bucket `i` spans `[lower[i], upper[i]]`.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(values: &[f32]) -> Self {
        let half = HISTOGRAM_BUCKETS / 2;
        let max_abs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let m = max_abs as f64;
        // magnitude edge k in 0..=half; edge 0 is the zero boundary
        let edge = |k: usize| {
            if k == 0 {
                0.0
            } else {
                m * 10f64.powf(-HISTOGRAM_DECADES * (half - k) as f64 / half as f64)
            }
        };
        let mut lower = Vec::with_capacity(HISTOGRAM_BUCKETS);
        let mut upper = Vec::with_capacity(HISTOGRAM_BUCKETS);
        for i in 0..half {
            lower.push(-edge(half - i));
            upper.push(-edge(half - i - 1));
        }
        for i in 0..half {
            lower.push(edge(i));
            upper.push(edge(i + 1));
        }

        let mut counts = vec![0u64; HISTOGRAM_BUCKETS];
        for &v in values {
            let mag = (v as f64).abs();
            let k = if m == 0.0 || mag == 0.0 {
                0
            } else {
                // smallest k with mag <= edge(k+1)
                let pos = half as f64 + (mag / m).log10() * half as f64 / HISTOGRAM_DECADES;
                (pos.ceil() as i64 - 1).clamp(0, half as i64 - 1) as usize
            };
            let bucket = if v < 0.0 { half - 1 - k } else { half + k };
            counts[bucket] += 1;
        }
        Self {
            max_abs,
            lower,
            upper,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Step,
    Epoch,
}

/// Per-layer figures of one step, or aggregated over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerMetrics {
    /// Encoded bits sent by all learners.
    pub payload_bits: u64,
    /// Bits the same gradients take as dense f32.
    pub dense_bits: u64,
    pub selected: u64,
    pub bins: u64,
    pub max_per_bin: u64,
    /// 95th percentile of rank 0's |residue| after packing.
    pub rg_p95: f32,
    /// 95th percentile of rank 0's |dW|.
    pub dw_p95: f32,
}

impl LayerMetrics {
    pub fn rate(&self) -> f64 {
        if self.payload_bits == 0 {
            return f64::NAN;
        }
        self.dense_bits as f64 / self.payload_bits as f64
    }

    pub fn selected_per_bin(&self) -> f64 {
        if self.bins == 0 {
            return f64::NAN;
        }
        self.selected as f64 / self.bins as f64
    }

    /// Adds `other`'s traffic; percentiles take `other`'s (later) values.
    pub fn absorb(&mut self, other: &LayerMetrics) {
        self.payload_bits += other.payload_bits;
        self.dense_bits += other.dense_bits;
        self.selected += other.selected;
        self.bins += other.bins;
        self.max_per_bin = self.max_per_bin.max(other.max_per_bin);
        self.rg_p95 = other.rg_p95;
        self.dw_p95 = other.dw_p95;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub kind: RecordKind,
    /// Global step count after this row (1-based for step rows).
    pub step: u64,
    /// 1-based epoch.
    pub epoch: usize,
    /// Mean over learners for a step row; mean over steps for an epoch row.
    pub train_loss: f32,
    /// Fraction misclassified on the test split; epoch rows only.
    pub test_error: Option<f64>,
    pub layers: Vec<LayerMetrics>,
}

impl MetricRecord {
    pub fn total(&self) -> LayerMetrics {
        let mut t = LayerMetrics::default();
        for l in &self.layers {
            t.payload_bits += l.payload_bits;
            t.dense_bits += l.dense_bits;
            t.selected += l.selected;
            t.bins += l.bins;
            t.max_per_bin = t.max_per_bin.max(l.max_per_bin);
        }
        t
    }
}

pub const LAYER_COLUMNS: [&str; 6] = ["bits", "rate", "sel_mean", "sel_max", "rg_p95", "dw_p95"];

/// Column names: fixed leading columns, then six per layer in layer order.
pub fn csv_header(layer_names: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = [
        "kind",
        "step",
        "epoch",
        "train_loss",
        "test_error",
        "total_bits",
        "total_rate",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for name in layer_names {
        for c in LAYER_COLUMNS {
            cols.push(format!("{name}_{c}"));
        }
    }
    cols
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn csv_row(r: &MetricRecord) -> Vec<String> {
    let total = r.total();
    let mut row = vec![
        match r.kind {
            RecordKind::Step => "step".to_string(),
            RecordKind::Epoch => "epoch".to_string(),
        },
        r.step.to_string(),
        r.epoch.to_string(),
        format!("{}", r.train_loss),
        r.test_error.map(fmt_f64).unwrap_or_default(),
        total.payload_bits.to_string(),
        fmt_f64(total.rate()),
    ];
    for l in &r.layers {
        row.push(l.payload_bits.to_string());
        row.push(fmt_f64(l.rate()));
        row.push(fmt_f64(l.selected_per_bin()));
        row.push(l.max_per_bin.to_string());
        row.push(format!("{}", l.rg_p95));
        row.push(format!("{}", l.dw_p95));
    }
    row
}

pub(crate) fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(w)
}

/// Writes the metric rows as CSV.
pub fn write_metrics<W: Write>(
    w: W,
    layer_names: &[String],
    records: &[MetricRecord],
) -> Result<()> {
    let mut out = csv_writer(w);
    let wrap = |e: csv::Error| Error::Io {
        path: "metrics.csv".into(),
        message: e.to_string(),
    };
    out.write_record(csv_header(layer_names)).map_err(wrap)?;
    for r in records {
        out.write_record(csv_row(r)).map_err(wrap)?;
    }
    out.flush().map_err(|e| Error::io("metrics.csv", e))
}

/// Histogram rows `layer,bucket,lower,upper,count` for each named layer.
pub fn write_histograms<W: Write>(w: W, hists: &[(String, Histogram)]) -> Result<()> {
    let mut out = csv_writer(w);
    let wrap = |e: csv::Error| Error::Io {
        path: "histogram".into(),
        message: e.to_string(),
    };
    out.write_record(["layer", "bucket", "lower", "upper", "count"])
        .map_err(wrap)?;
    for (name, h) in hists {
        for i in 0..h.counts.len() {
            out.write_record([
                name.clone(),
                i.to_string(),
                format!("{}", h.lower[i]),
                format!("{}", h.upper[i]),
                h.counts[i].to_string(),
            ])
            .map_err(wrap)?;
        }
    }
    out.flush().map_err(|e| Error::io("histogram", e))
}
