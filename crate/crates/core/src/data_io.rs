//! Synthetic problems, CSV ingestion and model checkpoints.
//!
//! Scattered data: header `x1,...,xd,y`. Snapshot databases: one wide CSV
//! with header `x1,...,xd,y_1,...,y_K`, or a directory holding `coords.csv`
//! (header `x1,...,xd`), one `snapshot_*.csv` per snapshot (header `y`, read
//! in file-name order) and an optional `metadata.csv` (header `id,p1,...`).
//! Lines starting with `#` are ignored. Reals are written with 17
//! significant digits so files round-trip exactly.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::FittedModel;

pub const CHECKPOINT_SCHEMA: &str = "ppou-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{}: no data rows", path.display())]
    Empty { path: PathBuf },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{}: checkpoint schema `{found}` version {version} is not `{CHECKPOINT_SCHEMA}` version {CHECKPOINT_VERSION}", path.display())]
    Schema { path: PathBuf, found: String, version: u64 },
    #[error("{}: malformed checkpoint: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("usage: {0}")]
    Usage(String),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    /// Known noise standard deviation, for synthetic problems.
    pub true_noise_std: Option<Array1<f64>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self, DataError> {
        if x.nrows() != y.len() {
            return Err(DataError::Invalid(format!(
                "{} coordinate rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(DataError::Invalid("coordinates have no columns".into()));
        }
        if let Some(j) = x.axis_iter(Axis(0)).position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(DataError::Invalid(format!("non-finite coordinate in row {j}")));
        }
        if let Some(j) = y.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("non-finite label in row {j}")));
        }
        Ok(Self {
            x,
            y,
            true_noise_std: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMeta {
    pub id: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDatabase {
    pub x: Array2<f64>,
    /// One row per snapshot.
    pub snapshots: Array2<f64>,
    pub meta: Vec<SnapshotMeta>,
}

impl SnapshotDatabase {
    pub fn new(x: Array2<f64>, snapshots: Array2<f64>, meta: Vec<SnapshotMeta>) -> Result<Self, DataError> {
        if snapshots.nrows() == 0 {
            return Err(DataError::Invalid(
                "a snapshot database needs at least one snapshot".into(),
            ));
        }
        if snapshots.ncols() != x.nrows() {
            return Err(DataError::Invalid(format!(
                "snapshots have {} values but there are {} nodes",
                snapshots.ncols(),
                x.nrows()
            )));
        }
        if meta.len() != snapshots.nrows() {
            return Err(DataError::Invalid(format!(
                "{} metadata rows for {} snapshots",
                meta.len(),
                snapshots.nrows()
            )));
        }
        if x.nrows() == 0 {
            return Err(DataError::Invalid("a snapshot database needs at least one node".into()));
        }
        if x.iter().chain(snapshots.iter()).any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite value in snapshot database".into()));
        }
        Ok(Self { x, snapshots, meta })
    }

    pub fn num_snapshots(&self) -> usize {
        self.snapshots.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.x.nrows()
    }
}

/// Snapshot-major concatenation: sample `k * N_nodes + j` is node `j` of snapshot `k`.
pub fn concat_snapshots(db: &SnapshotDatabase) -> Dataset {
    let k = db.num_snapshots();
    let n = db.num_nodes();
    let x = Array2::from_shape_fn((k * n, db.x.ncols()), |(r, c)| db.x[[r % n, c]]);
    let y = Array1::from_iter(db.snapshots.iter().copied());
    Dataset {
        x,
        y,
        true_noise_std: None,
    }
}

fn linspace_column(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 1), |(j, _)| j as f64 / (n - 1).max(1) as f64)
}

/// `y = sin 2 pi x` on `n` evenly spaced points of `[0, 1]`. The grid is
/// fixed, so `seed` has no effect.
pub fn gen_sin1d(n: usize, _seed: u64) -> Dataset {
    let x = linspace_column(n);
    let y = x.column(0).mapv(|v| (2.0 * PI * v).sin());
    Dataset {
        x,
        y,
        true_noise_std: Some(Array1::zeros(n)),
    }
}

pub fn tanh_mean(x: f64) -> f64 {
    1.0 + (10.0 * (x - 0.5)).tanh()
}

pub fn tanh_noise_std(x: f64) -> f64 {
    (0.3 * (2.0 * PI * x).sin()).abs()
}

/// `y = 1 + tanh 10(x - 1/2) + eps` on an even grid with
/// `eps ~ N(0, |0.3 sin 2 pi x|^2)`.
pub fn gen_tanh_noisy(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = linspace_column(n);
    let std = x.column(0).mapv(tanh_noise_std);
    let y = Array1::from_shape_fn(n, |j| {
        let e: f64 = rng.sample(StandardNormal);
        tanh_mean(x[[j, 0]]) + std[j] * e
    });
    Dataset {
        x,
        y,
        true_noise_std: Some(std),
    }
}

pub fn sin2d(x1: f64, x2: f64) -> f64 {
    (2.0 * PI * x1).sin() * (2.0 * PI * x2).sin()
}

/// `y = sin 2 pi x1 sin 2 pi x2` at uniform random points of the unit square.
pub fn gen_sin2d(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, 2), || rng.random::<f64>());
    let y = Array1::from_shape_fn(n, |j| sin2d(x[[j, 0]], x[[j, 1]]));
    Dataset {
        x,
        y,
        true_noise_std: Some(Array1::zeros(n)),
    }
}

/// `(x1, x2) -> (x1, x2, x2^2, 0)`: a 2D manifold in four dimensions.
pub fn lift_to_4d(data: &Dataset) -> Result<Dataset, DataError> {
    if data.dim() != 2 {
        return Err(DataError::Usage(format!(
            "lifting needs 2D data, got d = {}",
            data.dim()
        )));
    }
    let n = data.len();
    let mut x = Array2::zeros((n, 4));
    x.slice_mut(s![.., 0..2]).assign(&data.x);
    x.column_mut(2).assign(&data.x.column(1).mapv(|v| v * v));
    Ok(Dataset {
        x,
        y: data.y.clone(),
        true_noise_std: data.true_noise_std.clone(),
    })
}

/// Named synthetic problems used by the studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    Sin1d,
    TanhNoisy,
    Sin2d,
    Sin2dLifted,
}

impl Problem {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "sin1d" => Some(Problem::Sin1d),
            "tanh-noisy" => Some(Problem::TanhNoisy),
            "sin2d" => Some(Problem::Sin2d),
            "sin2d-lifted" => Some(Problem::Sin2dLifted),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Problem::Sin1d => "sin1d",
            Problem::TanhNoisy => "tanh-noisy",
            Problem::Sin2d => "sin2d",
            Problem::Sin2dLifted => "sin2d-lifted",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Problem::Sin1d | Problem::TanhNoisy => 1,
            Problem::Sin2d => 2,
            Problem::Sin2dLifted => 4,
        }
    }

    /// Training set as produced by the problem's generator.
    pub fn training(self, n: usize, seed: u64) -> Dataset {
        match self {
            Problem::Sin1d => gen_sin1d(n, seed),
            Problem::TanhNoisy => gen_tanh_noisy(n, seed),
            Problem::Sin2d => gen_sin2d(n, seed),
            Problem::Sin2dLifted => lift_to_4d(&gen_sin2d(n, seed)).expect("2D generator"),
        }
    }

    /// Uniform random points with noiseless labels.
    pub fn held_out(self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Problem::Sin1d | Problem::TanhNoisy => {
                let x = Array2::from_shape_simple_fn((n, 1), || rng.random::<f64>());
                let f: fn(f64) -> f64 = if self == Problem::Sin1d {
                    |v| (2.0 * PI * v).sin()
                } else {
                    tanh_mean
                };
                let y = x.column(0).mapv(f);
                Dataset {
                    x,
                    y,
                    true_noise_std: Some(Array1::zeros(n)),
                }
            }
            Problem::Sin2d => gen_sin2d(n, seed),
            Problem::Sin2dLifted => lift_to_4d(&gen_sin2d(n, seed)).expect("2D generator"),
        }
    }
}

/// `K` snapshots over `n_nodes` random points of the unit square, each
/// piecewise constant on the Voronoi cells of `plateaus` random sites.
/// Plateau `r` takes the value `r + a_r t_k` with `t_k` evenly spaced in
/// `[-1, 1]` and `|a_r| < 0.45`, so plateau values never collide.
pub fn gen_plateau_snapshots(n_nodes: usize, k: usize, plateaus: usize, seed: u64) -> SnapshotDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n_nodes, 2), || rng.random::<f64>());
    let sites = Array2::from_shape_simple_fn((plateaus, 2), || rng.random::<f64>());
    let slopes: Vec<f64> = (0..plateaus).map(|_| rng.random_range(-0.45..0.45)).collect();
    let cell: Vec<usize> = x
        .axis_iter(Axis(0))
        .map(|p| {
            (0..plateaus)
                .map(|r| (r, (p[0] - sites[[r, 0]]).powi(2) + (p[1] - sites[[r, 1]]).powi(2)))
                .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
                .0
        })
        .collect();
    let t: Vec<f64> = (0..k)
        .map(|i| {
            if k == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (k - 1) as f64
            }
        })
        .collect();
    let snapshots = Array2::from_shape_fn((k, n_nodes), |(i, j)| cell[j] as f64 + slopes[cell[j]] * t[i]);
    let meta = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| SnapshotMeta {
            id: format!("y_{}", i + 1),
            params: vec![ti],
        })
        .collect();
    SnapshotDatabase { x, snapshots, meta }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, DataError> {
    let file = fs::File::open(path).map_err(io_error(path))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_error(path, line, e.to_string())
}

/// Header plus numeric body, every row of the header's width.
fn read_numeric(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), DataError> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(parse_error(path, 1, "missing header row"));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        let mut row = Vec::with_capacity(record.len());
        for (cell, name) in record.iter().zip(&header) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_error(path, line, format!("column `{name}`: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(
                    path,
                    line,
                    format!("column `{name}`: non-finite value `{cell}`"),
                ));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok((header, rows))
}

/// Number of leading `x1, x2, ...` columns.
fn coordinate_columns(path: &Path, header: &[String]) -> Result<usize, DataError> {
    let d = header
        .iter()
        .enumerate()
        .take_while(|(i, h)| **h == format!("x{}", i + 1))
        .count();
    if d == 0 {
        return Err(parse_error(path, 1, "header must start with coordinate column `x1`"));
    }
    Ok(d)
}

fn to_matrix(rows: &[Vec<f64>], cols: std::ops::Range<usize>) -> Array2<f64> {
    let width = cols.len();
    Array2::from_shape_fn((rows.len(), width), |(r, c)| rows[r][cols.start + c])
}

pub fn load_scattered_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let (header, rows) = read_numeric(path)?;
    let d = coordinate_columns(path, &header)?;
    if header.len() != d + 1 || header[d] != "y" {
        return Err(parse_error(
            path,
            1,
            format!("expected header `x1,...,x{d},y`, found `{}`", header.join(",")),
        ));
    }
    let x = to_matrix(&rows, 0..d);
    let y = Array1::from_iter(rows.iter().map(|r| r[d]));
    Dataset::new(x, y)
}

/// Coordinates only, header `x1,...,xd`; a trailing `y` column is ignored.
pub fn load_points_csv(path: impl AsRef<Path>) -> Result<Array2<f64>, DataError> {
    let path = path.as_ref();
    let (header, rows) = read_numeric(path)?;
    let d = coordinate_columns(path, &header)?;
    if !(header.len() == d || (header.len() == d + 1 && header[d] == "y")) {
        return Err(parse_error(
            path,
            1,
            format!("unexpected columns after x{d}: `{}`", header[d..].join(",")),
        ));
    }
    Ok(to_matrix(&rows, 0..d))
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), DataError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| DataError::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_error(path))
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text from a header and rows; numbers via [`fmt_real`].
pub fn csv_text(header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_real).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn coordinate_header(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

pub fn save_scattered_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<(), DataError> {
    let mut header = coordinate_header(data.dim());
    header.push("y".into());
    let rows = data
        .x
        .axis_iter(Axis(0))
        .zip(data.y.iter())
        .map(|(r, &y)| r.iter().copied().chain(std::iter::once(y)).collect());
    write_atomic(path.as_ref(), csv_text(&header, rows).as_bytes())
}

pub fn save_snapshot_csv(path: impl AsRef<Path>, db: &SnapshotDatabase) -> Result<(), DataError> {
    let mut header = coordinate_header(db.x.ncols());
    header.extend((1..=db.num_snapshots()).map(|k| format!("y_{k}")));
    let rows = (0..db.num_nodes()).map(|j| {
        db.x.row(j)
            .iter()
            .copied()
            .chain(db.snapshots.column(j).iter().copied())
            .collect()
    });
    write_atomic(path.as_ref(), csv_text(&header, rows).as_bytes())
}

/// Wide CSV file or snapshot directory.
pub fn load_snapshot_db(path: impl AsRef<Path>) -> Result<SnapshotDatabase, DataError> {
    let path = path.as_ref();
    if path.is_dir() {
        load_snapshot_dir(path)
    } else {
        load_snapshot_wide(path)
    }
}

fn load_snapshot_wide(path: &Path) -> Result<SnapshotDatabase, DataError> {
    let (header, rows) = read_numeric(path)?;
    let d = coordinate_columns(path, &header)?;
    let k = header.len() - d;
    if k == 0 {
        return Err(parse_error(path, 1, "no snapshot columns `y_1,...`"));
    }
    // a single `y` column is plain scattered data
    let single_y = k == 1 && header[d] == "y";
    for (i, name) in header[d..].iter().enumerate() {
        if !single_y && *name != format!("y_{}", i + 1) {
            return Err(parse_error(
                path,
                1,
                format!("expected snapshot column `y_{}`, found `{name}`", i + 1),
            ));
        }
    }
    let x = to_matrix(&rows, 0..d);
    let snapshots = to_matrix(&rows, d..header.len())
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    let meta = header[d..]
        .iter()
        .map(|id| SnapshotMeta {
            id: id.clone(),
            params: Vec::new(),
        })
        .collect();
    SnapshotDatabase::new(x, snapshots, meta)
}

fn load_snapshot_dir(dir: &Path) -> Result<SnapshotDatabase, DataError> {
    let x = {
        let path = dir.join("coords.csv");
        let (header, rows) = read_numeric(&path)?;
        let d = coordinate_columns(&path, &header)?;
        if header.len() != d {
            return Err(parse_error(&path, 1, "coordinate file must hold only `x1,...,xd`"));
        }
        to_matrix(&rows, 0..d)
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_error(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("snapshot_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::Invalid(format!(
            "{}: no snapshot_*.csv files",
            dir.display()
        )));
    }
    let mut snapshots = Array2::zeros((files.len(), x.nrows()));
    let mut meta = Vec::with_capacity(files.len());
    for (k, file) in files.iter().enumerate() {
        let (header, rows) = read_numeric(file)?;
        if header != ["y"] {
            return Err(parse_error(file, 1, "snapshot file must have the single column `y`"));
        }
        if rows.len() != x.nrows() {
            return Err(DataError::Invalid(format!(
                "snapshot {} has {} values but coords.csv has {} nodes",
                file.display(),
                rows.len(),
                x.nrows()
            )));
        }
        snapshots
            .row_mut(k)
            .assign(&Array1::from_iter(rows.iter().map(|r| r[0])));
        let id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        meta.push(SnapshotMeta { id, params: Vec::new() });
    }
    let meta_path = dir.join("metadata.csv");
    if meta_path.exists() {
        meta = load_metadata(&meta_path, files.len())?;
    }
    SnapshotDatabase::new(x, snapshots, meta)
}

fn load_metadata(path: &Path, expected: usize) -> Result<Vec<SnapshotMeta>, DataError> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0) != Some("id") {
        return Err(parse_error(path, 1, "metadata header must start with `id`"));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        let params = record
            .iter()
            .skip(1)
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| parse_error(path, line, format!("`{c}` is not a number")))
            })
            .collect::<Result<_, _>>()?;
        out.push(SnapshotMeta {
            id: record[0].to_string(),
            params,
        });
    }
    if out.len() != expected {
        return Err(DataError::Invalid(format!(
            "{}: {} metadata rows for {expected} snapshots",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    schema: &'static str,
    version: u32,
    model: &'a FittedModel,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    #[allow(dead_code)]
    schema: String,
    #[allow(dead_code)]
    version: u32,
    model: FittedModel,
}

/// JSON checkpoint `{"schema", "version", "model"}`. Reals use the shortest
/// representation that parses back to the same bits.
pub fn save_model(path: impl AsRef<Path>, model: &FittedModel) -> Result<(), DataError> {
    let path = path.as_ref();
    let doc = CheckpointOut {
        schema: CHECKPOINT_SCHEMA,
        version: CHECKPOINT_VERSION,
        model,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| DataError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_atomic(path, text.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let malformed = |e: serde_json::Error| DataError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(malformed)?;
    let found = value.get("schema").and_then(|v| v.as_str()).unwrap_or("<missing>");
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != CHECKPOINT_SCHEMA || version != u64::from(CHECKPOINT_VERSION) {
        return Err(DataError::Schema {
            path: path.to_path_buf(),
            found: found.to_string(),
            version,
        });
    }
    let doc: CheckpointIn = serde_json::from_value(value).map_err(malformed)?;
    Ok(doc.model)
}

/// Drops all but the first `d` columns.
pub fn project(x: ArrayView2<f64>, d: usize) -> Array2<f64> {
    x.slice(s![.., ..d]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn sin1d_values() {
        let data = gen_sin1d(5, 0);
        assert_eq!(data.x.column(0).to_vec(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(data.y[1], 1.0);
        assert!(data.y[0].abs() < 1e-15 && data.y[4].abs() < 1e-15);
        assert!(gen_sin1d(101, 3).y.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn tanh_noisy_values() {
        assert_eq!(tanh_mean(0.5), 1.0);
        let data = gen_tanh_noisy(1000, 1);
        let std = data.true_noise_std.as_ref().unwrap();
        assert!(std[0].abs() < 1e-15 && std[999].abs() < 1e-15);
        assert_eq!(data, gen_tanh_noisy(1000, 1));
        assert_ne!(data.y, gen_tanh_noisy(1000, 2).y);
    }

    #[test]
    fn tanh_noise_std_near_quarter() {
        // 1e4 regenerations of the point nearest x = 0.25 on a 101-point grid
        let n = 101;
        let j = 25;
        let samples: Vec<f64> = (0..10_000)
            .map(|s| gen_tanh_noisy(n, s).y[j] - tanh_mean(0.25))
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        // std error of a sample std is about s / sqrt(2n) = 0.0021
        assert!((var.sqrt() - 0.3).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn sin2d_values() {
        assert!((sin2d(0.25, 0.25) - 1.0).abs() < 1e-15);
        for t in [0.0, 0.3, 0.77, 1.0] {
            assert!(sin2d(0.0, t).abs() < 1e-15 && sin2d(t, 1.0).abs() < 1e-14);
        }
        assert_eq!(sin2d(0.1, 0.6), sin2d(0.6, 0.1));
        let data = gen_sin2d(50, 9);
        assert!(data.x.iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(data, gen_sin2d(50, 9));
    }

    #[test]
    fn lift_map() {
        let data = Dataset::new(array![[0.5, 0.2], [0.1, 0.9]], array![1.0, 2.0]).unwrap();
        let lifted = lift_to_4d(&data).unwrap();
        assert_eq!(lifted.x.row(0).to_vec(), vec![0.5, 0.2, 0.2 * 0.2, 0.0]);
        assert!((lifted.x[[0, 2]] - 0.04).abs() < 1e-17);
        assert!(lifted.x.column(3).iter().all(|&v| v == 0.0));
        assert_eq!(project(lifted.x.view(), 2), data.x);
        assert_eq!(lifted.y, data.y);
        assert!(matches!(lift_to_4d(&lifted), Err(DataError::Usage(_))));
    }

    #[test]
    fn dataset_rejects_nonfinite_and_mismatch() {
        assert!(Dataset::new(array![[0.0], [f64::NAN]], array![0.0, 1.0]).is_err());
        assert!(Dataset::new(array![[0.0]], array![0.0, 1.0]).is_err());
    }

    #[test]
    fn scattered_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = Dataset::new(array![[0.1], [1.0 / 3.0]], array![std::f64::consts::PI, -1e-300]).unwrap();
        save_scattered_csv(&path, &data).unwrap();
        let back = load_scattered_csv(&path).unwrap();
        assert_eq!(back.x, data.x);
        assert_eq!(back.y, data.y);
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "x1,y\n").unwrap();
        assert!(matches!(load_scattered_csv(&path), Err(DataError::Empty { .. })));
    }

    #[test]
    fn ragged_row_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "x1,y\n0,0\n1,1\n2,2\n3,3\n4,4\n5,5,5\n").unwrap();
        match load_scattered_csv(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_and_bad_cells() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "# generated\nx1,x2,y\n0,1,2\n# mid\n3,4,5\n").unwrap();
        let d = load_scattered_csv(&path).unwrap();
        assert_eq!(d.x, array![[0.0, 1.0], [3.0, 4.0]]);
        fs::write(&path, "x1,y\n0,abc\n").unwrap();
        let msg = load_scattered_csv(&path).unwrap_err().to_string();
        assert!(msg.contains(":2:") && msg.contains("abc"), "{msg}");
        fs::write(&path, "x1,x2\n0,1\n").unwrap();
        assert!(matches!(
            load_scattered_csv(&path),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_scattered_csv("/nonexistent/data.csv").unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/data.csv"));
    }

    #[test]
    fn concatenation_counts_and_order() {
        let db = SnapshotDatabase::new(
            array![[0.0], [0.5], [1.0]],
            array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            vec![
                SnapshotMeta {
                    id: "a".into(),
                    params: vec![],
                },
                SnapshotMeta {
                    id: "b".into(),
                    params: vec![],
                },
            ],
        )
        .unwrap();
        let data = concat_snapshots(&db);
        assert_eq!(data.len(), 6);
        assert_eq!(data.y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(data.x.column(0).to_vec(), vec![0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn identical_snapshots_have_no_spread() {
        let base = array![0.3, -1.0, 2.5];
        let snaps = Array2::from_shape_fn((4, 3), |(_, j)| base[j]);
        let meta = (0..4)
            .map(|k| SnapshotMeta {
                id: k.to_string(),
                params: vec![],
            })
            .collect();
        let db = SnapshotDatabase::new(array![[0.0], [1.0], [2.0]], snaps, meta).unwrap();
        let data = concat_snapshots(&db);
        for j in 0..3 {
            let vals: Vec<f64> = (0..4).map(|k| data.y[k * 3 + j]).collect();
            assert!(vals.iter().all(|&v| v == vals[0]));
        }
    }

    #[test]
    fn wide_csv_round_trip_and_single_snapshot() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("db.csv");
        let db = gen_plateau_snapshots(30, 3, 4, 2);
        save_snapshot_csv(&path, &db).unwrap();
        let back = load_snapshot_db(&path).unwrap();
        assert_eq!(back.x, db.x);
        assert_eq!(back.snapshots, db.snapshots);
        assert_eq!(back.meta[2].id, "y_3");

        let scattered = dir.path().join("s.csv");
        let data = gen_sin1d(7, 0);
        save_scattered_csv(&scattered, &data).unwrap();
        let one = concat_snapshots(&load_snapshot_db(&scattered).unwrap());
        let direct = load_scattered_csv(&scattered).unwrap();
        assert_eq!(one.x, direct.x);
        assert_eq!(one.y, direct.y);
    }

    #[test]
    fn snapshot_directory_layout() {
        let dir = tempdir().unwrap();
        let p = dir.path();
        fs::write(p.join("coords.csv"), "x1,x2\n0,0\n1,0\n0,1\n").unwrap();
        fs::write(p.join("snapshot_01.csv"), "y\n1\n2\n3\n").unwrap();
        fs::write(p.join("snapshot_02.csv"), "y\n4\n5\n6\n").unwrap();
        fs::write(p.join("metadata.csv"), "id,v1,v2\nlow,0.1,0.2\nhigh,0.3,0.4\n").unwrap();
        let db = load_snapshot_db(p).unwrap();
        assert_eq!(db.snapshots, array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(db.meta[1].id, "high");
        assert_eq!(db.meta[1].params, vec![0.3, 0.4]);

        fs::write(p.join("snapshot_03.csv"), "y\n7\n8\n").unwrap();
        let msg = load_snapshot_db(p).unwrap_err().to_string();
        assert!(msg.contains("snapshot_03"), "{msg}");
    }

    #[test]
    fn plateau_family_structure() {
        let db = gen_plateau_snapshots(200, 5, 3, 4);
        assert_eq!(db.num_snapshots(), 5);
        assert_eq!(db.meta[0].params, vec![-1.0]);
        assert_eq!(db.meta[4].params, vec![1.0]);
        for k in 0..5 {
            let mut levels: Vec<f64> = db.snapshots.row(k).to_vec();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            assert!(levels.len() <= 3);
        }
        assert_eq!(db, gen_plateau_snapshots(200, 5, 3, 4));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"hello").unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("out.txt")]);
        assert!(write_atomic(&dir.path().join("missing/out.txt"), b"x").is_err());
    }
}
