//! Signal ingestion, chronological splits, per-sensor z-scoring and windowing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TrafficGraph;

/// Multivariate series, one row per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub values: Array2<f64>,
    pub sampling_interval_minutes: f64,
    pub node_ids: Vec<String>,
}

impl SignalMatrix {
    pub fn new(values: Array2<f64>, sampling_interval_minutes: f64, node_ids: Vec<String>) -> Result<Self> {
        let (n, t) = values.dim();
        if n == 0 || t == 0 {
            return Err(Error::Shape(format!("signal matrix {n}x{t} is empty")));
        }
        if node_ids.len() != n {
            return Err(Error::Shape(format!("{} node ids for {n} series", node_ids.len())));
        }
        if !(sampling_interval_minutes > 0.0 && sampling_interval_minutes.is_finite()) {
            return Err(Error::Config(format!(
                "sampling interval {sampling_interval_minutes} must be positive"
            )));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite value {v} at node {i}, step {j}")));
        }
        Ok(SignalMatrix {
            values,
            sampling_interval_minutes,
            node_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    /// Rows at the given indices, in that order.
    pub fn select_nodes(&self, idx: &[usize]) -> SignalMatrix {
        SignalMatrix {
            values: self.values.select(Axis(0), idx),
            sampling_interval_minutes: self.sampling_interval_minutes,
            node_ids: idx.iter().map(|&i| self.node_ids[i].clone()).collect(),
        }
    }

    /// Rows for the given external ids.
    pub fn select_ids(&self, ids: &[String]) -> Result<SignalMatrix> {
        let idx = ids
            .iter()
            .map(|id| {
                self.node_ids
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::Config(format!("node id `{id}` not present in signals")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_nodes(&idx))
    }

    /// Time columns in `range`.
    pub fn columns(&self, range: Range<usize>) -> SignalMatrix {
        SignalMatrix {
            values: self.values.slice(s![.., range]).to_owned(),
            sampling_interval_minutes: self.sampling_interval_minutes,
            node_ids: self.node_ids.clone(),
        }
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_records(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_cell(path: &Path, line: usize, cell: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(path, line, format!("non-numeric cell `{cell}`"))),
    }
}

/// Reads a signals CSV: a header row of node ids, then one row per time step.
pub fn load_signals(path: impl AsRef<Path>, sampling_interval_minutes: f64) -> Result<SignalMatrix> {
    let path = path.as_ref();
    let records = read_records(path)?;
    let Some(((_, header), rows)) = records.split_first() else {
        return Err(parse_err(path, 1, "empty signals file"));
    };
    let ids: Vec<String> = header.iter().map(str::to_string).collect();
    for (i, id) in ids.iter().enumerate() {
        if id.is_empty() {
            return Err(parse_err(path, 1, format!("empty node id in column {}", i + 1)));
        }
        if ids[..i].contains(id) {
            return Err(parse_err(path, 1, format!("duplicate node id `{id}`")));
        }
    }
    if rows.is_empty() {
        return Err(parse_err(path, 2, "no time steps"));
    }
    let n = ids.len();
    let mut values = Array2::zeros((n, rows.len()));
    for (t, (line, rec)) in rows.iter().enumerate() {
        if rec.len() != n {
            return Err(parse_err(
                path,
                *line,
                format!("ragged row: {} cells, expected {n}", rec.len()),
            ));
        }
        for (i, cell) in rec.iter().enumerate() {
            values[[i, t]] = parse_cell(path, *line, cell)?;
        }
    }
    SignalMatrix::new(values, sampling_interval_minutes, ids)
}

pub fn write_signals(path: impl AsRef<Path>, signals: &SignalMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", signals.node_ids.join(",")).map_err(io)?;
    for t in 0..signals.t() {
        let row: Vec<String> = signals.values.column(t).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an adjacency CSV, ordering nodes as in `node_ids`.
///
/// Two layouts are accepted: an edge list whose header is `src,dst,weight`,
/// or an `N x N` numeric grid, optionally preceded by a header row of node ids.
/// Without a header the grid rows follow `node_ids` order.
pub fn load_adjacency(path: impl AsRef<Path>, node_ids: &[String]) -> Result<TrafficGraph> {
    let path = path.as_ref();
    let records = read_records(path)?;
    let Some((_, first)) = records.first() else {
        return Err(parse_err(path, 1, "empty adjacency file"));
    };
    let n = node_ids.len();
    let lookup = |line: usize, id: &str| -> Result<usize> {
        node_ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| parse_err(path, line, format!("unknown node id `{id}`")))
    };
    let mut adjacency = Array2::zeros((n, n));
    if first.get(0) == Some("src") {
        for (line, rec) in &records[1..] {
            if rec.len() != 3 {
                return Err(parse_err(
                    path,
                    *line,
                    format!("edge row has {} cells, expected 3", rec.len()),
                ));
            }
            let i = lookup(*line, &rec[0])?;
            let j = lookup(*line, &rec[1])?;
            let w = parse_cell(path, *line, &rec[2])?;
            if i == j {
                return Err(parse_err(path, *line, format!("self-loop on `{}`", &rec[0])));
            }
            adjacency[[i, j]] = w;
        }
    } else {
        let has_header = first.iter().any(|c| c.parse::<f64>().is_err());
        let (order, rows): (Vec<usize>, _) = if has_header {
            let order = first
                .iter()
                .map(|id| lookup(records[0].0, id))
                .collect::<Result<Vec<_>>>()?;
            (order, &records[1..])
        } else {
            ((0..n).collect(), &records[..])
        };
        if order.len() != n || rows.len() != n {
            let line = rows.first().map(|r| r.0).unwrap_or(1);
            return Err(parse_err(
                path,
                line,
                format!(
                    "grid is {}x{}, signals have {n} nodes",
                    rows.len(),
                    order.len()
                ),
            ));
        }
        for (r, (line, rec)) in rows.iter().enumerate() {
            if rec.len() != n {
                return Err(parse_err(
                    path,
                    *line,
                    format!("ragged row: {} cells, expected {n}", rec.len()),
                ));
            }
            for (c, cell) in rec.iter().enumerate() {
                adjacency[[order[r], order[c]]] = parse_cell(path, *line, cell)?;
            }
        }
    }
    TrafficGraph::new(adjacency, node_ids.to_vec()).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Writes the graph as an edge list with a `src,dst,weight` header.
pub fn write_adjacency(path: impl AsRef<Path>, graph: &TrafficGraph) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "src,dst,weight").map_err(io)?;
    for (i, j, wt) in graph.edges() {
        writeln!(w, "{},{},{}", graph.node_ids[i], graph.node_ids[j], wt).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Contiguous train/val/test ranges over the time axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 7:1.5:1.5 chronological split; the test range takes the rounding remainder.
/// Every range must hold at least one window of `min_len = H + T_out` steps.
pub fn chronological_split(t: usize, min_len: usize) -> Result<SplitRanges> {
    if t < 10 {
        return Err(Error::Split(format!("series of {t} steps is too short (need >= 10)")));
    }
    let n_train = (0.7 * t as f64).round() as usize;
    let n_val = (0.15 * t as f64).round() as usize;
    let ranges = SplitRanges {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..t,
    };
    for (name, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if r.len() < min_len {
            return Err(Error::Split(format!(
                "{name} split has {} steps, fewer than history + horizon = {min_len}",
                r.len()
            )));
        }
    }
    Ok(ranges)
}

/// Per-sensor mean and population standard deviation, from training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    #[serde(with = "exact_f64")]
    pub mean: Vec<f64>,
    #[serde(with = "exact_f64")]
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

/// Fits per-node statistics on an `N x T_train` block.
pub fn fit_zscore(train: ArrayView2<f64>) -> Result<NormStats> {
    let (n, t) = train.dim();
    if n == 0 || t == 0 {
        return Err(Error::Shape("cannot fit normalization on an empty block".into()));
    }
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for row in train.rows() {
        let m = row.sum() / t as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(NormStats { mean, std })
}

fn check_stats(rows: usize, stats: &NormStats) -> Result<()> {
    if stats.mean.len() != rows || stats.std.len() != rows {
        return Err(Error::Shape(format!(
            "normalization stats for {} nodes applied to {rows}",
            stats.mean.len()
        )));
    }
    Ok(())
}

/// `(x - mean) / max(std, 1e-8)` row by row.
pub fn apply_zscore(x: &Array2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    check_stats(x.nrows(), stats)?;
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let m = stats.mean[i];
        let sd = stats.std[i].max(STD_FLOOR);
        row.mapv_inplace(|v| (v - m) / sd);
    }
    Ok(out)
}

/// Inverse of [`apply_zscore`] on the same stats.
pub fn reduct(y: &Array2<f64>, stats: &NormStats) -> Result<Array2<f64>> {
    check_stats(y.nrows(), stats)?;
    let mut out = y.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let m = stats.mean[i];
        let sd = stats.std[i].max(STD_FLOOR);
        row.mapv_inplace(|v| v * sd + m);
    }
    Ok(out)
}

/// Number of output steps for a horizon; the horizon must be a whole number of samples.
pub fn horizon_steps(horizon_minutes: f64, sampling_interval_minutes: f64) -> Result<usize> {
    let ratio = horizon_minutes / sampling_interval_minutes;
    let steps = ratio.round();
    if !(steps >= 1.0) || (ratio - steps).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "horizon of {horizon_minutes} min is not a positive multiple of the {sampling_interval_minutes} min sampling interval"
        )));
    }
    Ok(steps as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One supervised example: `history` input steps and `horizon` target steps per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Absolute time index of the first input step.
    pub start: usize,
    pub input: Array2<f64>,
    pub target: Array2<f64>,
}

impl Window {
    /// Absolute time indices covered by the target.
    pub fn target_range(&self) -> Range<usize> {
        let h = self.input.ncols();
        self.start + h..self.start + h + self.target.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub split: Split,
    pub history: usize,
    pub horizon: usize,
    pub windows: Vec<Window>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Windows at every offset inside `range`; never crosses the range boundary.
pub fn windows_in_range(
    values: &Array2<f64>,
    range: Range<usize>,
    history: usize,
    horizon: usize,
    split: Split,
) -> Result<WindowedDataset> {
    let span = history + horizon;
    if range.len() < span || range.end > values.ncols() {
        return Err(Error::Split(format!(
            "{split:?} range {range:?} cannot hold a window of {span} steps"
        )));
    }
    let windows = (range.start..=range.end - span)
        .map(|t| Window {
            start: t,
            input: values.slice(s![.., t..t + history]).to_owned(),
            target: values.slice(s![.., t + history..t + span]).to_owned(),
        })
        .collect();
    Ok(WindowedDataset {
        split,
        history,
        horizon,
        windows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

/// Windows every split of an (already normalized) signal matrix.
pub fn make_windows(
    signals: &SignalMatrix,
    ranges: &SplitRanges,
    history: usize,
    horizon_minutes: f64,
) -> Result<DatasetSplits> {
    let horizon = horizon_steps(horizon_minutes, signals.sampling_interval_minutes)?;
    Ok(DatasetSplits {
        train: windows_in_range(&signals.values, ranges.train.clone(), history, horizon, Split::Train)?,
        val: windows_in_range(&signals.values, ranges.val.clone(), history, horizon, Split::Val)?,
        test: windows_in_range(&signals.values, ranges.test.clone(), history, horizon, Split::Test)?,
    })
}

/// Serializes floats as decimal strings with 17 significant digits, which
/// parse back to the identical bit pattern.
mod exact_f64 {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| format!("{x:.16e}")))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<String> = Vec::deserialize(d)?;
        raw.iter()
            .map(|s| s.parse::<f64>().map_err(D::Error::custom))
            .collect()
    }
}
