//! Error metrics, convergence and snapshot studies, plot data.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::data_io::{self, concat_snapshots, csv_text, DataError, Dataset, Problem, SnapshotDatabase};
use crate::numerics::solve_least_squares;
use crate::refine::classify;
use crate::trainer::{self, FittedModel, TrainConfig};
use crate::Error;

/// Points on the 1D plot grid.
pub const PROBE_POINTS_1D: usize = 501;

pub fn rms(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let ss: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v).powi(2)).sum();
    (ss / a.len() as f64).sqrt()
}

/// RMS of the predicted mean against the labels.
pub fn rms_error(model: &FittedModel, data: &Dataset) -> Result<f64, Error> {
    if data.dim() != model.net.input_dim() {
        return Err(Error::Shape(format!(
            "model expects {} coordinates, data has {}",
            model.net.input_dim(),
            data.dim()
        )));
    }
    let pred = model.predict(data.x.view())?;
    Ok(rms(pred.mean.view(), data.y.view()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_err: f64,
    pub points: usize,
}

/// Ordinary least squares of `log rmse` on `log m_tot`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(m, e)| *m > 0.0 && *e > 0.0 && e.is_finite())
        .map(|(m, e)| (m.ln(), e.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let std_err = if n > 2 {
        let ssr: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some(SlopeFit {
        slope,
        intercept,
        std_err,
        points: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub partitions: usize,
    pub refinements: usize,
    pub total_partitions: usize,
    pub degree: usize,
    pub dim: usize,
    /// Median held-out RMSE over successful repetitions.
    pub rmse: Option<f64>,
    pub train_rmse: Option<f64>,
    pub runs_ok: usize,
    pub wall_time: f64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    pub degree: usize,
    pub rows: Vec<ConvergenceRow>,
    pub slope: Option<SlopeFit>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceSpec {
    pub problem: Problem,
    pub train_points: usize,
    pub test_points: usize,
    pub degrees: Vec<usize>,
    /// `(M, N_ref)` pairs.
    pub configs: Vec<(usize, usize)>,
    pub repetitions: usize,
    pub base: TrainConfig,
}

/// Seed for one `(M, repetition)` cell. Configurations sharing `M` share the
/// stage-1 network, which only depends on `M`, the data and the seed.
pub fn derived_seed(base: u64, partitions: usize, rep: usize) -> u64 {
    trainer::mix_seed(base, 1 + partitions as u64 * 1_000 + rep as u64)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Fits every `(M, N_ref, m)` configuration, `repetitions` times each, and
/// regresses the median held-out RMSE against `M_tot` per degree.
pub fn convergence_study(spec: &ConvergenceSpec) -> Result<Vec<ConvergenceRecord>, Error> {
    let totals: std::collections::BTreeSet<usize> = spec.configs.iter().map(|&(m, r)| m << r).collect();
    if totals.len() < 3 {
        return Err(Error::Shape(
            "a convergence study needs at least three distinct M_tot values".into(),
        ));
    }
    if spec.repetitions == 0 || spec.degrees.is_empty() {
        return Err(Error::Shape("need at least one repetition and one degree".into()));
    }
    let mut partitions: Vec<usize> = spec.configs.iter().map(|c| c.0).collect();
    partitions.sort_unstable();
    partitions.dedup();

    // results[(degree, config)] = per-rep outcomes
    let mut outcomes = vec![vec![Vec::new(); spec.configs.len()]; spec.degrees.len()];
    let mut times = vec![vec![0.0; spec.configs.len()]; spec.degrees.len()];
    for &m in &partitions {
        for rep in 0..spec.repetitions {
            let seed = derived_seed(spec.base.seed, m, rep);
            let train = spec.problem.training(spec.train_points, seed);
            let test = spec.problem.held_out(spec.test_points, seed ^ 0xA5A5_A5A5);
            let cfg1 = TrainConfig {
                partitions: m,
                seed,
                ..spec.base.clone()
            };
            let start = Instant::now();
            let stage1 = trainer::train_stage1(&train, &cfg1);
            let stage1_time = start.elapsed().as_secs_f64();
            for (ci, &(cm, nref)) in spec.configs.iter().enumerate() {
                if cm != m {
                    continue;
                }
                for (di, &degree) in spec.degrees.iter().enumerate() {
                    let start = Instant::now();
                    let outcome = match &stage1 {
                        Err(e) => Err(format!("stage 1: {e}")),
                        Ok(s1) => {
                            let cfg = TrainConfig {
                                degree,
                                refinements: nref,
                                ..cfg1.clone()
                            };
                            trainer::fit_from_stage1(&train, &cfg, s1)
                                .map_err(|e| e.to_string())
                                .and_then(|model| {
                                    let test_rmse = rms_error(&model, &test).map_err(|e| e.to_string())?;
                                    let train_rmse = rms_error(&model, &train).map_err(|e| e.to_string())?;
                                    Ok((test_rmse, train_rmse))
                                })
                        }
                    };
                    times[di][ci] += stage1_time + start.elapsed().as_secs_f64();
                    outcomes[di][ci].push(outcome);
                }
            }
        }
    }

    let mut records = Vec::with_capacity(spec.degrees.len());
    for (di, &degree) in spec.degrees.iter().enumerate() {
        let mut rows = Vec::with_capacity(spec.configs.len());
        let mut warnings = Vec::new();
        for (ci, &(m, nref)) in spec.configs.iter().enumerate() {
            let mut test = Vec::new();
            let mut train = Vec::new();
            let mut failures = Vec::new();
            for o in &outcomes[di][ci] {
                match o {
                    Ok((a, b)) => {
                        test.push(*a);
                        train.push(*b);
                    }
                    Err(e) => failures.push(e.clone()),
                }
            }
            for f in &failures {
                warnings.push(format!("m={degree} M={m} N_ref={nref}: {f}"));
            }
            rows.push(ConvergenceRow {
                partitions: m,
                refinements: nref,
                total_partitions: m << nref,
                degree,
                dim: spec.problem.dim(),
                rmse: median(&mut test),
                train_rmse: median(&mut train),
                runs_ok: test.len(),
                wall_time: times[di][ci],
                failures,
            });
        }
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.rmse.map(|e| (r.total_partitions as f64, e)))
            .collect();
        let slope = loglog_slope(&points);
        if slope.is_none() {
            warnings.push(format!("m={degree}: too few successful configurations for a slope"));
        }
        records.push(ConvergenceRecord {
            degree,
            rows,
            slope,
            warnings,
        });
    }
    Ok(records)
}

fn opt(v: Option<f64>) -> String {
    v.map(data_io::fmt_real).unwrap_or_else(|| "nan".into())
}

/// `degree,M,N_ref,M_tot,d,rmse,train_rmse,runs_ok`. Wall time is left out
/// so that reruns are byte-identical.
pub fn convergence_csv(records: &[ConvergenceRecord]) -> String {
    let mut out = String::from("degree,M,N_ref,M_tot,d,rmse,train_rmse,runs_ok\n");
    for rec in records {
        for r in &rec.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.degree,
                r.partitions,
                r.refinements,
                r.total_partitions,
                r.dim,
                opt(r.rmse),
                opt(r.train_rmse),
                r.runs_ok
            ));
        }
    }
    out
}

/// `degree,slope,std_err,intercept,points`.
pub fn slopes_csv(records: &[ConvergenceRecord]) -> String {
    let mut out = String::from("degree,slope,std_err,intercept,points\n");
    for rec in records {
        match rec.slope {
            Some(s) => out.push_str(&format!(
                "{},{},{},{},{}\n",
                rec.degree,
                data_io::fmt_real(s.slope),
                data_io::fmt_real(s.std_err),
                data_io::fmt_real(s.intercept),
                s.points
            )),
            None => out.push_str(&format!("{},nan,nan,nan,0\n", rec.degree)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotError {
    pub id: String,
    /// Errors of the shared fit, relative to `max |y_k|`.
    pub shared_rms: f64,
    pub shared_max: f64,
    /// Errors after refitting the coefficients to this snapshot alone.
    pub refit_rms: f64,
    pub refit_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotReport {
    pub snapshots: Vec<SnapshotError>,
    pub nodes: usize,
    pub total_partitions: usize,
    pub basis_len: usize,
    /// `N_nodes K / (M_tot dim(pi_m) K)`: nodal values per per-snapshot coefficient.
    pub dof_reduction: f64,
    pub train_rmse: f64,
}

impl SnapshotReport {
    pub fn worst_refit_rms(&self) -> f64 {
        self.snapshots.iter().map(|s| s.refit_rms).fold(0.0, f64::max)
    }

    pub fn worst_shared_rms(&self) -> f64 {
        self.snapshots.iter().map(|s| s.shared_rms).fold(0.0, f64::max)
    }

    pub fn worst_refit_max(&self) -> f64 {
        self.snapshots.iter().map(|s| s.refit_max).fold(0.0, f64::max)
    }

    /// `id,shared_rms,shared_max,refit_rms,refit_max`.
    pub fn per_snapshot_csv(&self) -> String {
        let mut out = String::from("id,shared_rms,shared_max,refit_rms,refit_max\n");
        for s in &self.snapshots {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.id,
                data_io::fmt_real(s.shared_rms),
                data_io::fmt_real(s.shared_max),
                data_io::fmt_real(s.refit_rms),
                data_io::fmt_real(s.refit_max)
            ));
        }
        out
    }

    /// One-row summary.
    pub fn summary_csv(&self) -> String {
        format!(
            "nodes,snapshots,M_tot,basis_len,dof_reduction,worst_shared_rms,worst_refit_rms,worst_refit_max,train_rmse\n{},{},{},{},{},{},{},{},{}\n",
            self.nodes,
            self.snapshots.len(),
            self.total_partitions,
            self.basis_len,
            data_io::fmt_real(self.dof_reduction),
            data_io::fmt_real(self.worst_shared_rms()),
            data_io::fmt_real(self.worst_refit_rms()),
            data_io::fmt_real(self.worst_refit_max()),
            data_io::fmt_real(self.train_rmse)
        )
    }
}

fn relative_errors(err: ArrayView1<f64>, y: ArrayView1<f64>) -> (f64, f64) {
    let scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let rms_e = (err.mapv(|e| e * e).sum() / err.len() as f64).sqrt();
    let max_e = err.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    (rms_e / scale, max_e / scale)
}

/// Fits one model to all snapshots at once, then scores each snapshot with
/// the shared coefficients and with coefficients refit to it alone.
pub fn snapshot_study(db: &SnapshotDatabase, cfg: &TrainConfig) -> Result<(SnapshotReport, FittedModel), Error> {
    if db.num_snapshots() < 2 {
        return Err(Error::Shape("a snapshot study needs at least two snapshots".into()));
    }
    let data = concat_snapshots(db);
    let model = trainer::fit(&data, cfg)?;
    let report = score_snapshots(db, &model)?;
    Ok((report, model))
}

pub fn score_snapshots(db: &SnapshotDatabase, model: &FittedModel) -> Result<SnapshotReport, Error> {
    let x = db.x.view();
    let phi = model.refined_phi(x)?;
    let shared = model.predict_with_phi(phi.view(), x)?.mean;
    let basis = model.poly.basis_at(x);
    let (n, mt) = phi.dim();
    let b = basis.ncols();
    let mut design = Array2::<f64>::zeros((n, mt * b));
    for j in 0..n {
        for i in 0..mt {
            for c in 0..b {
                design[[j, i * b + c]] = phi[[j, i]] * basis[[j, c]];
            }
        }
    }
    let mut snapshots = Vec::with_capacity(db.num_snapshots());
    let mut train_ss = 0.0;
    for (k, y) in db.snapshots.axis_iter(Axis(0)).enumerate() {
        let shared_err = &shared - &y;
        train_ss += shared_err.mapv(|e| e * e).sum();
        let coef = solve_least_squares(design.view(), y)?;
        let refit_err: Array1<f64> = design.dot(&coef) - y;
        let (shared_rms, shared_max) = relative_errors(shared_err.view(), y);
        let (refit_rms, refit_max) = relative_errors(refit_err.view(), y);
        snapshots.push(SnapshotError {
            id: db.meta[k].id.clone(),
            shared_rms,
            shared_max,
            refit_rms,
            refit_max,
        });
    }
    let k = db.num_snapshots();
    Ok(SnapshotReport {
        snapshots,
        nodes: n,
        total_partitions: mt,
        basis_len: b,
        dof_reduction: (n * k) as f64 / (mt * b * k) as f64,
        train_rmse: (train_ss / (n * k) as f64).sqrt(),
    })
}

/// Plot grid: 501 evenly spaced points over the data range in 1D, the data
/// points themselves otherwise.
pub fn probe_points(data: &Dataset) -> Array2<f64> {
    if data.dim() == 1 {
        let lo = data.x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Array2::from_shape_fn((PROBE_POINTS_1D, 1), |(j, _)| {
            lo + (hi - lo) * j as f64 / (PROBE_POINTS_1D - 1) as f64
        })
    } else {
        data.x.clone()
    }
}

fn coordinate_header(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

fn with_columns(x: &Array2<f64>, cols: &Array2<f64>) -> Vec<Vec<f64>> {
    x.axis_iter(Axis(0))
        .zip(cols.axis_iter(Axis(0)))
        .map(|(a, b)| a.iter().chain(b.iter()).copied().collect())
        .collect()
}

fn write(dir: &Path, name: &str, text: String) -> Result<(), Error> {
    data_io::write_atomic(&dir.join(name), text.as_bytes()).map_err(Error::from)
}

/// Writes `prediction.csv` (`x..., mean, std`), `partitions.csv` and
/// `refined_partitions.csv` (`x..., phi_1, ...`) on the probe grid,
/// `classification.csv` (`x..., y, label, refined_label`) on the data and
/// `loss_trace.csv` (`stage, iteration, loss`).
pub fn emit_plot_data(model: &FittedModel, data: &Dataset, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let d = data.dim();
    let probe = probe_points(data);
    let phi1 = model.stage1_phi(probe.view())?;
    let phi_ref = model.refined_phi(probe.view())?;
    let pred = model.predict_with_phi(phi_ref.view(), probe.view())?;

    let mut header = coordinate_header(d);
    header.extend(["mean".to_string(), "std".to_string()]);
    let moments = ndarray::stack![Axis(1), pred.mean, pred.std];
    write(dir, "prediction.csv", csv_text(&header, with_columns(&probe, &moments)))?;

    for (name, phi) in [("partitions.csv", &phi1), ("refined_partitions.csv", &phi_ref)] {
        let mut header = coordinate_header(d);
        header.extend((1..=phi.ncols()).map(|i| format!("phi_{i}")));
        write(dir, name, csv_text(&header, with_columns(&probe, phi)))?;
    }

    let labels1 = classify(model.stage1_phi(data.x.view())?.view());
    let labels_ref = classify(model.refined_phi(data.x.view())?.view());
    let mut header = coordinate_header(d);
    header.extend(["y", "label", "refined_label"].map(String::from));
    let mut text = header.join(",");
    text.push('\n');
    for j in 0..data.len() {
        let mut cells: Vec<String> = data.x.row(j).iter().map(|&v| data_io::fmt_real(v)).collect();
        cells.push(data_io::fmt_real(data.y[j]));
        cells.push(labels1[j].to_string());
        cells.push(labels_ref[j].to_string());
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write(dir, "classification.csv", text)?;

    let mut text = String::from("stage,iteration,loss\n");
    for (stage, trace) in [(1, &model.report.stage1_trace), (3, &model.report.stage3_trace)] {
        for r in trace.iter() {
            text.push_str(&format!("{stage},{},{}\n", r.iteration, data_io::fmt_real(r.loss)));
        }
    }
    write(dir, "loss_trace.csv", text)
}
