//! Evaluation metrics and report generation: per-band residuals,
//! Jeffries–Matusita class separability, species and temporal summaries,
//! corrector-vs-bias agreement, and the ablation table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, ForestType, Split};
use crate::latent::{scale_to_physical, NUM_VARS, VAR_NAMES};
use crate::nets::{MlpParams, NetError};
use crate::rtm::CoefficientPack;
use crate::train::{predict, ModelKind, PredictContext, Prediction, TrainError, TrainedBundle};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("group {0:?} has {1} samples; need at least 2 for a covariance")]
    GroupTooSmall(String, usize),
    #[error("no predictions to evaluate")]
    Empty,
    #[error("records lack latent truth")]
    NeedTruth,
    #[error("prediction lacks physical variables (model kind {0})")]
    NeedPhys(&'static str),
    #[error("writing {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Rtm(#[from] crate::rtm::RtmError),
}

// ── per-band residuals ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualConvention {
    ObsMinusModel,
    ModelMinusObs,
}

impl ResidualConvention {
    fn signed(&self, obs: f64, model: f64) -> f64 {
        match self {
            ResidualConvention::ObsMinusModel => obs - model,
            ResidualConvention::ModelMinusObs => model - obs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandResiduals {
    pub band_names: Vec<String>,
    pub convention: ResidualConvention,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub rmse: Vec<f64>,
    pub n: usize,
}

pub fn band_residuals(
    obs: &[Vec<f64>],
    model: &[Vec<f64>],
    band_names: &[String],
    convention: ResidualConvention,
) -> Result<BandResiduals, EvalError> {
    if obs.is_empty() {
        return Err(EvalError::Empty);
    }
    if obs.len() != model.len() {
        return Err(EvalError::Dimension(format!(
            "{} observed vs {} modeled spectra",
            obs.len(),
            model.len()
        )));
    }
    let dim = band_names.len();
    let n = obs.len();
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for (o, m) in obs.iter().zip(model) {
        if o.len() != dim || m.len() != dim {
            return Err(EvalError::Dimension(format!(
                "spectrum length {} vs {} bands",
                o.len().min(m.len()),
                dim
            )));
        }
        for b in 0..dim {
            let r = convention.signed(o[b], m[b]);
            mean[b] += r;
            sq[b] += r * r;
        }
    }
    for b in 0..dim {
        mean[b] /= n as f64;
    }
    let mut sd = vec![0.0; dim];
    let mut rmse = vec![0.0; dim];
    for b in 0..dim {
        let ms = sq[b] / n as f64;
        rmse[b] = ms.sqrt();
        sd[b] = (ms - mean[b] * mean[b]).max(0.0).sqrt();
    }
    Ok(BandResiduals {
        band_names: band_names.to_vec(),
        convention,
        mean,
        sd,
        rmse,
        n,
    })
}

impl BandResiduals {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,mean_residual,sd_residual,rmse\n");
        for (i, name) in self.band_names.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                name, self.mean[i], self.sd[i], self.rmse[i]
            ));
        }
        out
    }
}

// ── Jeffries–Matusita separability ──

/// Diagonal loading added to every covariance before inversion.
pub const COV_REGULARIZATION: f64 = 1e-6;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EvalError> {
    let n = a.len();
    for (i, row) in a.iter().enumerate() {
        if row.len() != n {
            return Err(EvalError::Dimension(format!(
                "row {i} has length {}, matrix order {n}",
                row.len()
            )));
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(EvalError::NotPositiveDefinite { row: i, pivot: s });
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Solves A z = d given the Cholesky factor L of A.
fn chol_solve(l: &[Vec<f64>], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = d[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k][i] * z[k];
        }
        z[i] = s / l[i][i];
    }
    z
}

fn log_det_from_cholesky(l: &[Vec<f64>]) -> f64 {
    2.0 * l.iter().enumerate().map(|(i, row)| row[i].ln()).sum::<f64>()
}

fn regularized(cov: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = cov.to_vec();
    for (i, row) in out.iter_mut().enumerate() {
        row[i] += COV_REGULARIZATION;
    }
    out
}

/// Jeffries–Matusita distance between two Gaussian classes,
/// JM = 2(1 − e^(−B)) with the Bhattacharyya distance
/// B = ⅛ dᵀΣ⁻¹d + ½ ln(det Σ / √(det Σ₁ · det Σ₂)), Σ = (Σ₁+Σ₂)/2.
/// Ranges over [0, 2); 2 means perfectly separable.
pub fn jm_distance(
    mu1: &[f64],
    cov1: &[Vec<f64>],
    mu2: &[f64],
    cov2: &[Vec<f64>],
) -> Result<f64, EvalError> {
    let n = mu1.len();
    if mu2.len() != n || cov1.len() != n || cov2.len() != n {
        return Err(EvalError::Dimension(format!(
            "means {}/{} and covariances {}/{} must share one order",
            mu1.len(),
            mu2.len(),
            cov1.len(),
            cov2.len()
        )));
    }
    let c1 = regularized(cov1);
    let c2 = regularized(cov2);
    let avg: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (c1[i][j] + c2[i][j]) / 2.0).collect())
        .collect();
    let l1 = cholesky(&c1)?;
    let l2 = cholesky(&c2)?;
    let la = cholesky(&avg)?;
    let d: Vec<f64> = mu1.iter().zip(mu2).map(|(a, b)| a - b).collect();
    let z = chol_solve(&la, &d);
    let quad: f64 = d.iter().zip(&z).map(|(a, b)| a * b).sum();
    let b = 0.125 * quad
        + 0.5 * (log_det_from_cholesky(&la)
            - 0.5 * (log_det_from_cholesky(&l1) + log_det_from_cholesky(&l2)));
    Ok(2.0 * (1.0 - (-b).exp()))
}

/// Sample mean and covariance (n−1 normalization) of fixed-width rows.
pub fn class_moments(rows: &[[f64; NUM_VARS]]) -> Result<(Vec<f64>, Vec<Vec<f64>>), EvalError> {
    let n = rows.len();
    if n < 2 {
        return Err(EvalError::GroupTooSmall(String::from("<unnamed>"), n));
    }
    let mut mean = vec![0.0; NUM_VARS];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; NUM_VARS]; NUM_VARS];
    for r in rows {
        for i in 0..NUM_VARS {
            for j in 0..NUM_VARS {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    Ok((mean, cov))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JmMatrix {
    pub labels: Vec<String>,
    /// Row-major symmetric matrix with zeros on the diagonal.
    pub values: Vec<Vec<f64>>,
}

impl JmMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for v in &self.values[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.labels.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                total += self.values[i][j];
                count += 1;
            }
        }
        total / count as f64
    }
}

/// Pairwise JM distances over labeled groups of variable estimates.
pub fn jm_matrix(groups: &[(String, Vec<[f64; NUM_VARS]>)]) -> Result<JmMatrix, EvalError> {
    let mut moments = Vec::new();
    for (label, rows) in groups {
        if rows.len() < 2 {
            return Err(EvalError::GroupTooSmall(label.clone(), rows.len()));
        }
        moments.push(class_moments(rows)?);
    }
    let n = groups.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let (m1, c1) = &moments[i];
            let (m2, c2) = &moments[j];
            let d = jm_distance(m1, c1, m2, c2)?;
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    Ok(JmMatrix {
        labels: groups.iter().map(|(l, _)| l.clone()).collect(),
        values,
    })
}

// ── dataset-level prediction and grouping ──

/// Runs a trained model over every record; `Vec` is index-aligned with
/// `ds.records`.
pub fn predict_dataset(
    bundle: &TrainedBundle,
    ds: &Dataset,
    pack: &CoefficientPack,
) -> Result<Vec<Prediction>, EvalError> {
    predict_dataset_threaded(bundle, ds, pack, 1)
}

/// Worker budget for record-parallel prediction: the machine's available
/// parallelism, capped by `RTM_INVERT_THREADS` when set to a positive
/// integer.
pub fn thread_budget() -> usize {
    let avail = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("RTM_INVERT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => avail.min(cap),
        _ => avail,
    }
}

/// Predicts every record using up to `threads` workers over contiguous
/// record chunks. Records are independent, so the result is identical to the
/// sequential pass regardless of thread count.
pub fn predict_dataset_threaded(
    bundle: &TrainedBundle,
    ds: &Dataset,
    pack: &CoefficientPack,
    threads: usize,
) -> Result<Vec<Prediction>, EvalError> {
    let ctx = PredictContext::from_bundle(bundle, pack, &ds.bands)?;
    let n = ds.records.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        let mut out = Vec::with_capacity(n);
        for r in &ds.records {
            out.push(predict(&bundle.model, &r.spectrum, &ctx)?);
        }
        return Ok(out);
    }
    let chunk = n.div_ceil(threads);
    let chunks: Vec<Result<Vec<Prediction>, EvalError>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for records in ds.records.chunks(chunk) {
            let ctx = &ctx;
            let model = &bundle.model;
            handles.push(scope.spawn(move || {
                records
                    .iter()
                    .map(|r| predict(model, &r.spectrum, ctx))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(EvalError::from)
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableSpace {
    /// Scaled physical units (the default reporting space).
    Physical,
    /// Normalized [0, 1] latent coordinates.
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Species,
    ForestType,
}

fn estimate_row(pred: &Prediction, space: VariableSpace) -> Result<[f64; NUM_VARS], EvalError> {
    match space {
        VariableSpace::Latent => Ok(pred.latent.lam),
        VariableSpace::Physical => pred
            .phys
            .as_ref()
            .map(|p| p.inferred())
            .ok_or(EvalError::NeedPhys("no physical decoding")),
    }
}

/// Groups per-record variable estimates by species or forest type,
/// optionally restricted to one split. Group order is deterministic.
pub fn grouped_estimates(
    ds: &Dataset,
    preds: &[Prediction],
    grouping: Grouping,
    space: VariableSpace,
    split: Option<Split>,
) -> Result<Vec<(String, Vec<[f64; NUM_VARS]>)>, EvalError> {
    if preds.len() != ds.records.len() {
        return Err(EvalError::Dimension(format!(
            "{} predictions vs {} records",
            preds.len(),
            ds.records.len()
        )));
    }
    let mut groups: BTreeMap<String, Vec<[f64; NUM_VARS]>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        if let Some(s) = split {
            if ds.splits[i] != Some(s) {
                continue;
            }
        }
        let label = match grouping {
            Grouping::Species => r.species.name().to_string(),
            Grouping::ForestType => match r.species.forest_type() {
                ForestType::Coniferous => String::from("coniferous"),
                ForestType::Deciduous => String::from("deciduous"),
            },
        };
        groups.entry(label).or_default().push(estimate_row(&preds[i], space)?);
    }
    if groups.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(groups.into_iter().collect())
}

// ── species and temporal summaries ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeciesStatsRow {
    pub species: String,
    pub forest_type: String,
    pub n: usize,
    pub mean: [f64; NUM_VARS],
    pub sd: [f64; NUM_VARS],
}

pub fn species_stats(
    ds: &Dataset,
    preds: &[Prediction],
    space: VariableSpace,
    split: Option<Split>,
) -> Result<Vec<SpeciesStatsRow>, EvalError> {
    let groups = grouped_estimates(ds, preds, Grouping::Species, space, split)?;
    let type_of = |name: &str| {
        crate::data::Species::ALL
            .iter()
            .find(|s| s.name() == name)
            .map(|s| match s.forest_type() {
                ForestType::Coniferous => "coniferous",
                ForestType::Deciduous => "deciduous",
            })
            .unwrap_or("unknown")
    };
    let mut out = Vec::new();
    for (label, rows) in groups {
        let n = rows.len();
        let mut mean = [0.0; NUM_VARS];
        let mut sq = [0.0; NUM_VARS];
        for r in &rows {
            for v in 0..NUM_VARS {
                mean[v] += r[v];
                sq[v] += r[v] * r[v];
            }
        }
        for v in 0..NUM_VARS {
            mean[v] /= n as f64;
            sq[v] = (sq[v] / n as f64 - mean[v] * mean[v]).max(0.0).sqrt();
        }
        out.push(SpeciesStatsRow {
            forest_type: type_of(&label).to_string(),
            species: label,
            n,
            mean,
            sd: sq,
        });
    }
    Ok(out)
}

pub fn species_stats_csv(rows: &[SpeciesStatsRow]) -> String {
    let mut out = String::from("species,forest_type,n");
    for name in VAR_NAMES {
        out.push_str(&format!(",mean_{name},sd_{name}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}", r.species, r.forest_type, r.n));
        for v in 0..NUM_VARS {
            out.push_str(&format!(",{},{}", r.mean[v], r.sd[v]));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalPoint {
    pub species: String,
    pub variable: &'static str,
    pub date_index: usize,
    pub mean: f64,
    pub n: usize,
}

/// Mean trajectory of each estimated variable across the date index,
/// per species: the seasonal signal the inversion recovered.
pub fn temporal_series(
    ds: &Dataset,
    preds: &[Prediction],
    space: VariableSpace,
) -> Result<Vec<TemporalPoint>, EvalError> {
    if preds.len() != ds.records.len() {
        return Err(EvalError::Dimension(format!(
            "{} predictions vs {} records",
            preds.len(),
            ds.records.len()
        )));
    }
    let mut acc: BTreeMap<(String, usize), (usize, [f64; NUM_VARS])> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        let row = estimate_row(&preds[i], space)?;
        let e = acc
            .entry((r.species.name().to_string(), r.date_index))
            .or_insert((0, [0.0; NUM_VARS]));
        e.0 += 1;
        for v in 0..NUM_VARS {
            e.1[v] += row[v];
        }
    }
    let mut out = Vec::new();
    for ((species, date_index), (n, sums)) in acc {
        for v in 0..NUM_VARS {
            out.push(TemporalPoint {
                species: species.clone(),
                variable: VAR_NAMES[v],
                date_index,
                mean: sums[v] / n as f64,
                n,
            });
        }
    }
    Ok(out)
}

pub fn temporal_csv(points: &[TemporalPoint]) -> String {
    let mut out = String::from("species,variable,date_index,mean,n\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.species, p.variable, p.date_index, p.mean, p.n
        ));
    }
    out
}

// ── truth-based recovery metrics ──

/// Per-variable RMSE of the estimates against latent truth, in the chosen
/// space. Requires truth on every selected record.
pub fn variable_rmse(
    ds: &Dataset,
    preds: &[Prediction],
    space: VariableSpace,
    split: Option<Split>,
) -> Result<[f64; NUM_VARS], EvalError> {
    if preds.len() != ds.records.len() {
        return Err(EvalError::Dimension(format!(
            "{} predictions vs {} records",
            preds.len(),
            ds.records.len()
        )));
    }
    let mut sq = [0.0; NUM_VARS];
    let mut n = 0usize;
    for (i, r) in ds.records.iter().enumerate() {
        if let Some(s) = split {
            if ds.splits[i] != Some(s) {
                continue;
            }
        }
        let truth = r.latent_truth.ok_or(EvalError::NeedTruth)?;
        let est = estimate_row(&preds[i], space)?;
        let tru = match space {
            VariableSpace::Latent => truth.lam,
            VariableSpace::Physical => {
                scale_to_physical(&truth, &ds.manifest.ranges, ds.manifest.fixed.sd).inferred()
            }
        };
        for v in 0..NUM_VARS {
            let d = est[v] - tru[v];
            sq[v] += d * d;
        }
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(std::array::from_fn(|v| (sq[v] / n as f64).sqrt()))
}

/// Pearson correlation of two equal-length series; errors on length
/// mismatch, fewer than two points, or a zero-variance side.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Dimension(format!(
            "series lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(EvalError::Empty);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(EvalError::Dimension(
            "zero variance in a correlation operand".into(),
        ));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Per-variable Pearson correlation between estimates and generator truth
/// over the selected records.
pub fn variable_correlations(
    ds: &Dataset,
    preds: &[Prediction],
    space: VariableSpace,
    split: Option<Split>,
) -> Result<[f64; NUM_VARS], EvalError> {
    if preds.len() != ds.records.len() {
        return Err(EvalError::Dimension(format!(
            "{} predictions vs {} records",
            preds.len(),
            ds.records.len()
        )));
    }
    let mut est_cols: Vec<Vec<f64>> = vec![Vec::new(); NUM_VARS];
    let mut tru_cols: Vec<Vec<f64>> = vec![Vec::new(); NUM_VARS];
    for (i, r) in ds.records.iter().enumerate() {
        if let Some(s) = split {
            if ds.splits[i] != Some(s) {
                continue;
            }
        }
        let truth = r.latent_truth.ok_or(EvalError::NeedTruth)?;
        let est = estimate_row(&preds[i], space)?;
        let tru = match space {
            VariableSpace::Latent => truth.lam,
            VariableSpace::Physical => {
                scale_to_physical(&truth, &ds.manifest.ranges, ds.manifest.fixed.sd).inferred()
            }
        };
        for v in 0..NUM_VARS {
            est_cols[v].push(est[v]);
            tru_cols[v].push(tru[v]);
        }
    }
    let mut out = [0.0; NUM_VARS];
    for v in 0..NUM_VARS {
        out[v] = pearson(&est_cols[v], &tru_cols[v])?;
    }
    Ok(out)
}

/// Counts latent components strictly outside the clamp window; the sigmoid
/// head keeps raw outputs inside it, so any violation is a defect signal.
pub fn latent_clamp_violations(preds: &[Prediction]) -> usize {
    let (lo, hi) = crate::latent::LATENT_CLAMP;
    preds
        .iter()
        .flat_map(|p| p.latent.lam.iter())
        .filter(|&&v| v < lo || v > hi)
        .count()
}

// ── corrector vs the true bias ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasAgreement {
    pub band_names: Vec<String>,
    /// Mean |C(x) − g(x)| per band over the probe spectra.
    pub mean_abs_diff: Vec<f64>,
    pub max_abs_diff: Vec<f64>,
    pub n_probes: usize,
}

/// Compares the learned corrector C against a known acquisition bias g on
/// probe spectra (clean model outputs). Agreement within the noise floor
/// means the corrector recovered the bias rather than memorizing noise.
pub fn corrector_vs_bias(
    corrector: &MlpParams,
    bias: &crate::data::BiasSpec,
    forest_type: ForestType,
    probes: &[Vec<f64>],
    band_names: &[String],
) -> Result<BiasAgreement, EvalError> {
    if probes.is_empty() {
        return Err(EvalError::Empty);
    }
    let dim = band_names.len();
    let mut mean_abs = vec![0.0; dim];
    let mut max_abs = vec![0.0; dim];
    for x in probes {
        if x.len() != dim {
            return Err(EvalError::Dimension(format!(
                "probe length {} vs {} bands",
                x.len(),
                dim
            )));
        }
        let corrected = corrector.forward(x)?;
        let biased = bias.apply(forest_type, x);
        for b in 0..dim {
            let d = (corrected[b] - biased[b]).abs();
            mean_abs[b] += d;
            if d > max_abs[b] {
                max_abs[b] = d;
            }
        }
    }
    for v in &mut mean_abs {
        *v /= probes.len() as f64;
    }
    Ok(BiasAgreement {
        band_names: band_names.to_vec(),
        mean_abs_diff: mean_abs,
        max_abs_diff: max_abs,
        n_probes: probes.len(),
    })
}

pub fn bias_agreement_csv(a: &BiasAgreement) -> String {
    let mut out = String::from("band,mean_abs_diff,max_abs_diff\n");
    for (i, name) in a.band_names.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            name, a.mean_abs_diff[i], a.max_abs_diff[i]
        ));
    }
    out
}

// ── ablation table ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: ModelKind,
    /// The space the losses live in; reconstruction models report spectral
    /// MSE, the supervised regressor reports latent MSE.
    pub loss_space: &'static str,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub best_epoch: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("model,loss_space,train_mse,val_mse,test_mse,best_epoch\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model.name(),
            r.loss_space,
            r.train_mse,
            r.val_mse,
            r.test_mse,
            r.best_epoch
        ));
    }
    out
}

// ── histograms ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

/// Fixed-range histogram; values outside [lo, hi] clip into the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let mut counts = vec![0usize; bins.max(1)];
    let width = hi - lo;
    for &v in values {
        let frac = ((v - lo) / width).clamp(0.0, 1.0);
        let mut idx = (frac * counts.len() as f64) as usize;
        if idx >= counts.len() {
            idx = counts.len() - 1;
        }
        counts[idx] += 1;
    }
    Histogram { lo, hi, counts }
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    let step = (h.hi - h.lo) / h.counts.len() as f64;
    for (i, c) in h.counts.iter().enumerate() {
        let lo = h.lo + step * i as f64;
        out.push_str(&format!("{},{},{}\n", lo, lo + step, c));
    }
    out
}

// ── report bundle ──

fn fnv1a64(text: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hash_of<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).unwrap_or_default();
    format!("{:016x}", fnv1a64(&text))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub model_kind: ModelKind,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub n_records: usize,
    pub n_sites: usize,
    pub dataset_seed: u64,
    pub train_config_hash: String,
    pub manifest_hash: String,
    pub latent_clamp_violations: usize,
    pub files: Vec<String>,
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), EvalError> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes the standard evaluation bundle for one trained model into `dir`:
/// residuals, species stats, JM matrices, temporal trajectories, physical
/// variable histograms, and a JSON summary with config hashes.
pub fn write_report(
    dir: &Path,
    bundle: &TrainedBundle,
    ds: &Dataset,
    pack: &CoefficientPack,
) -> Result<ReportSummary, EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| EvalError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let preds = predict_dataset_threaded(bundle, ds, pack, thread_budget())?;
    let band_names: Vec<String> = ds.bands.bands.iter().map(|b| b.name.clone()).collect();
    let mut files = Vec::new();

    let has_spectral = !matches!(bundle.model.kind, ModelKind::NnReg);
    if has_spectral {
        let obs: Vec<Vec<f64>> = ds.records.iter().map(|r| r.spectrum.clone()).collect();
        let model: Vec<Vec<f64>> = preds
            .iter()
            .map(|p| {
                p.corrected_raw
                    .clone()
                    .unwrap_or_else(|| bundle.stats.invert(&p.output_std))
            })
            .collect();
        let res = band_residuals(&obs, &model, &band_names, ResidualConvention::ObsMinusModel)?;
        write_file(dir, "bias_by_band.csv", &res.to_csv())?;
        files.push(String::from("bias_by_band.csv"));
    }

    let space = if matches!(bundle.model.kind, ModelKind::Ae) {
        VariableSpace::Latent
    } else {
        VariableSpace::Physical
    };
    let stats_rows = species_stats(ds, &preds, space, None)?;
    write_file(dir, "species_stats.csv", &species_stats_csv(&stats_rows))?;
    files.push(String::from("species_stats.csv"));

    let species_jm = jm_matrix(&grouped_estimates(ds, &preds, Grouping::Species, space, None)?)?;
    write_file(dir, "jm_matrix_species.csv", &species_jm.to_csv())?;
    files.push(String::from("jm_matrix_species.csv"));
    let type_jm = jm_matrix(&grouped_estimates(ds, &preds, Grouping::ForestType, space, None)?)?;
    write_file(dir, "jm_matrix_forest_type.csv", &type_jm.to_csv())?;
    files.push(String::from("jm_matrix_forest_type.csv"));

    let temporal = temporal_series(ds, &preds, space)?;
    write_file(dir, "temporal.csv", &temporal_csv(&temporal))?;
    files.push(String::from("temporal.csv"));

    if space == VariableSpace::Physical {
        for (v, name) in VAR_NAMES.iter().enumerate() {
            let (lo, hi) = bundle.ranges.ranges[v];
            let values: Vec<f64> = preds
                .iter()
                .filter_map(|p| p.phys.as_ref().map(|ph| ph.inferred()[v]))
                .collect();
            let h = histogram(&values, lo, hi, 50);
            let fname = format!("hist_{name}.csv");
            write_file(dir, &fname, &histogram_csv(&h))?;
            files.push(fname);
        }
    }

    if ds.records.iter().all(|r| r.latent_truth.is_some()) {
        let rmse = variable_rmse(ds, &preds, VariableSpace::Latent, None)?;
        let corr = variable_correlations(ds, &preds, VariableSpace::Latent, None)?;
        let mut csv = String::from("variable,pearson,rmse\n");
        for (v, name) in VAR_NAMES.iter().enumerate() {
            csv.push_str(&format!("{name},{},{}\n", corr[v], rmse[v]));
        }
        write_file(dir, "recovery.csv", &csv)?;
        files.push(String::from("recovery.csv"));
    }

    let summary = ReportSummary {
        model_kind: bundle.model.kind,
        best_epoch: bundle.best_epoch,
        best_val_mse: bundle.best_val_mse,
        n_records: ds.records.len(),
        n_sites: ds.manifest.n_sites,
        dataset_seed: ds.manifest.seed,
        train_config_hash: hash_of(&bundle.config),
        manifest_hash: hash_of(&ds.manifest),
        latent_clamp_violations: latent_clamp_violations(&preds),
        files,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| EvalError::Io {
        path: dir.join("report.json").display().to_string(),
        message: e.to_string(),
    })?;
    write_file(dir, "report.json", &json)?;
    Ok(summary)
}
