//! Training loops for the four inversion architectures: a pure autoencoder,
//! an encoder over the physical decoder, the same with a residual bias
//! corrector, and a direct latent regressor. All loops share the Adam
//! optimizer, a gradient stabilizer for NaN recovery, and deterministic
//! seeded execution.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, GatherPlan, Tape, Var};
use crate::data::{DataError, Dataset, Split, Standardization};
use crate::latent::{LatentError, LatentVars, VarRanges, LATENT_CLAMP};
use crate::nets::{MlpNodes, MlpParams, NetError};
use crate::rtm::{
    apply_plan, band_plan, diff, reference, BandSet, CoefficientPack, FixedVars, PhysVars,
    ResampleMode, RtmError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no split assignment; split by site first")]
    NoSplits,
    #[error("{0:?} split is empty")]
    EmptySplit(Split),
    #[error("latent-variable regression needs latent truth on every training record")]
    MissingLatentTruth,
    #[error("NaN gradient at epoch {epoch}, step {step} (strict mode)")]
    NanGradient { epoch: usize, step: usize },
    #[error("loss non-finite for {count} consecutive steps, last at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize, count: u32 },
    #[error("latent or physical variables left their ranges at epoch {epoch}: {detail}")]
    RangeViolation { epoch: usize, detail: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Rtm(#[from] RtmError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

// ── configuration ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Encoder plus learned decoder.
    Ae,
    /// Encoder plus physical decoder.
    AeRtm,
    /// Encoder plus physical decoder plus residual corrector.
    AeRtmCorr,
    /// Direct regression of latent variables (supervised).
    NnReg,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Ae,
        ModelKind::AeRtm,
        ModelKind::AeRtmCorr,
        ModelKind::NnReg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Ae => "ae",
            ModelKind::AeRtm => "ae_rtm",
            ModelKind::AeRtmCorr => "ae_rtm_corr",
            ModelKind::NnReg => "nnreg",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        Self::ALL.iter().find(|k| k.name() == text).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectTarget {
    Gradient,
    Loss,
}

/// Test hook: poisons gradients or the loss with NaN for `count` consecutive
/// steps starting at (`epoch`, `step`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NanInjection {
    pub epoch: usize,
    pub step: usize,
    pub count: usize,
    pub target: InjectTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs numbered from zero run at `learning_rate` below this epoch and
    /// at `learning_rate`·`lr_drop_factor` from it onward.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Early stop after this many epochs without a new best validation loss.
    pub patience: usize,
    /// Error out on NaN gradients instead of stabilizing them.
    pub strict_nan: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_nan: Option<NanInjection>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_epochs: 100,
            lr_drop_epoch: 50,
            lr_drop_factor: 0.1,
            patience: 10,
            strict_nan: false,
            inject_nan: None,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

// ── losses ──

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse over mismatched lengths");
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

// ── optimizer ──

/// Adam with L2 regularization folded into the gradient
/// (g ← g + weight_decay·θ) before the moment updates.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(shapes: &[usize], cfg: &TrainConfig) -> Self {
        Self {
            m: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            v: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "optimizer buffer count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (theta, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..theta.len() {
                let g_eff = g[j] + self.weight_decay * theta[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g_eff;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g_eff * g_eff;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ── gradient stabilizer ──

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StabilizerOutcome {
    pub tensors_hit: usize,
    pub entries_replaced: usize,
}

/// Scrubs NaN-poisoned gradient tensors: in any tensor containing a NaN,
/// every entry that is NaN or exactly zero becomes u·1e-7 with u drawn from
/// the run RNG. Clean tensors are untouched and consume no randomness, so
/// NaN-free runs stay bit-reproducible.
pub fn stabilize_gradients(
    bufs: &mut [Vec<f64>],
    rng: &mut ChaCha8Rng,
    strict: bool,
    epoch: usize,
    step: usize,
) -> Result<StabilizerOutcome, TrainError> {
    let mut outcome = StabilizerOutcome::default();
    for buf in bufs.iter_mut() {
        if !buf.iter().any(|v| v.is_nan()) {
            continue;
        }
        if strict {
            return Err(TrainError::NanGradient { epoch, step });
        }
        outcome.tensors_hit += 1;
        for v in buf.iter_mut() {
            if v.is_nan() || *v == 0.0 {
                *v = rng.gen::<f64>() * 1e-7;
                outcome.entries_replaced += 1;
            }
        }
    }
    Ok(outcome)
}

// ── model bundle ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    /// For `NnReg` this is the regressor; it shares the encoder shape.
    pub encoder: MlpParams,
    pub decoder: Option<MlpParams>,
    pub corrector: Option<MlpParams>,
}

impl ModelParams {
    /// Seeded initialization. The encoder is always drawn first so models
    /// with the same seed share identical encoder weights regardless of
    /// which extra components they carry.
    pub fn init(kind: ModelKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = MlpParams::encoder(&mut rng);
        let decoder = matches!(kind, ModelKind::Ae).then(|| MlpParams::decoder(&mut rng));
        let corrector =
            matches!(kind, ModelKind::AeRtmCorr).then(|| MlpParams::corrector(&mut rng));
        Self {
            kind,
            encoder,
            decoder,
            corrector,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.encoder.validate()?;
        if let Some(d) = &self.decoder {
            d.validate()?;
        }
        if let Some(c) = &self.corrector {
            c.validate()?;
        }
        Ok(())
    }

    /// Flat parameter buffers in a fixed order (encoder, decoder, corrector;
    /// weights then biases per layer), matching the lifted tape nodes and
    /// the optimizer state.
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weights);
            out.push(&mut l.biases);
        }
        if let Some(d) = &mut self.decoder {
            for l in &mut d.layers {
                out.push(&mut l.weights);
                out.push(&mut l.biases);
            }
        }
        if let Some(c) = &mut self.corrector {
            for l in &mut c.layers {
                out.push(&mut l.weights);
                out.push(&mut l.biases);
            }
        }
        out
    }

    pub fn buffer_shapes(&self) -> Vec<usize> {
        let mut comps = vec![&self.encoder];
        comps.extend(self.decoder.as_ref());
        comps.extend(self.corrector.as_ref());
        let mut out = Vec::new();
        for comp in comps {
            for l in &comp.layers {
                out.push(l.weights.len());
                out.push(l.biases.len());
            }
        }
        out
    }
}

/// Everything needed to reuse a trained model later: weights, the exact
/// training configuration, and the data-space context it was fitted in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedBundle {
    pub model: ModelParams,
    pub config: TrainConfig,
    pub stats: Standardization,
    pub ranges: VarRanges,
    pub fixed: FixedVars,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

impl TrainedBundle {
    pub fn save_json(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let bundle: Self = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        bundle.model.validate().map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(bundle)
    }
}

// ── plain-path prediction (validation, evaluation) ──

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Raw network latent output, before clamping.
    pub latent: LatentVars,
    /// Physical variables from the clamped latent vector; absent for the
    /// pure autoencoder.
    pub phys: Option<PhysVars>,
    /// Physical decoder output in raw reflectance, before correction.
    pub model_raw: Option<Vec<f64>>,
    /// After the corrector (equal to `model_raw` without one).
    pub corrected_raw: Option<Vec<f64>>,
    /// Model output in standardized spectral space, the training-loss space;
    /// empty for the latent regressor.
    pub output_std: Vec<f64>,
}

/// Shared context for running a trained model outside the tape.
pub struct PredictContext<'a> {
    pub stats: &'a Standardization,
    pub ranges: &'a VarRanges,
    pub fixed: &'a FixedVars,
    pub pack: &'a CoefficientPack,
    pub plan: GatherPlan,
}

impl<'a> PredictContext<'a> {
    pub fn new(
        stats: &'a Standardization,
        ranges: &'a VarRanges,
        fixed: &'a FixedVars,
        pack: &'a CoefficientPack,
        bands: &BandSet,
    ) -> Result<Self, RtmError> {
        Ok(Self {
            stats,
            ranges,
            fixed,
            pack,
            plan: band_plan(bands, ResampleMode::Nearest)?,
        })
    }

    pub fn from_bundle(
        bundle: &'a TrainedBundle,
        pack: &'a CoefficientPack,
        bands: &BandSet,
    ) -> Result<Self, RtmError> {
        Self::new(&bundle.stats, &bundle.ranges, &bundle.fixed, pack, bands)
    }
}

fn clamp_latent(lam: &LatentVars) -> LatentVars {
    LatentVars {
        lam: std::array::from_fn(|i| lam.lam[i].max(LATENT_CLAMP.0).min(LATENT_CLAMP.1)),
    }
}

/// Runs a model on one raw observed spectrum using the plain evaluation
/// path. Mirrors the training-tape forward exactly.
pub fn predict(
    params: &ModelParams,
    raw_spectrum: &[f64],
    ctx: &PredictContext,
) -> Result<Prediction, TrainError> {
    let x_std = ctx.stats.apply(raw_spectrum);
    let lat_vec = params.encoder.forward(&x_std)?;
    let latent = LatentVars::new(std::array::from_fn(|i| lat_vec[i]))?;
    match params.kind {
        ModelKind::Ae => {
            let dec = params.decoder.as_ref().expect("ae has a decoder");
            let output_std = dec.forward(&lat_vec)?;
            Ok(Prediction {
                latent,
                phys: None,
                model_raw: None,
                corrected_raw: None,
                output_std,
            })
        }
        ModelKind::NnReg => Ok(Prediction {
            phys: Some(crate::latent::scale_to_physical(
                &clamp_latent(&latent),
                ctx.ranges,
                ctx.fixed.sd,
            )),
            latent,
            model_raw: None,
            corrected_raw: None,
            output_std: Vec::new(),
        }),
        ModelKind::AeRtm | ModelKind::AeRtmCorr => {
            let clamped = clamp_latent(&latent);
            let phys = crate::latent::scale_to_physical(&clamped, ctx.ranges, ctx.fixed.sd);
            let grid = reference::forest_model(&phys, ctx.fixed, ctx.pack);
            let model_raw = apply_plan(&ctx.plan, &grid);
            let corrected_raw = match &params.corrector {
                Some(c) => c.forward(&model_raw)?,
                None => model_raw.clone(),
            };
            let output_std = ctx.stats.apply(&corrected_raw);
            Ok(Prediction {
                latent,
                phys: Some(phys),
                model_raw: Some(model_raw),
                corrected_raw: Some(corrected_raw),
                output_std,
            })
        }
    }
}

/// Mean training-space loss of a model over one dataset split.
pub fn evaluate_loss(
    params: &ModelParams,
    ds: &Dataset,
    pack: &CoefficientPack,
    split: Split,
) -> Result<f64, TrainError> {
    let idx = ds.indices_of(split);
    if idx.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let stats = ds.stats()?;
    let ctx = PredictContext::new(
        stats,
        &ds.manifest.ranges,
        &ds.manifest.fixed,
        pack,
        &ds.bands,
    )?;
    let mut total = 0.0;
    for &i in &idx {
        let r = &ds.records[i];
        let pred = predict(params, &r.spectrum, &ctx)?;
        total += match params.kind {
            ModelKind::NnReg => {
                let truth = r.latent_truth.ok_or(TrainError::MissingLatentTruth)?;
                mse(&pred.latent.lam, &truth.lam)
            }
            _ => mse(&pred.output_std, &stats.apply(&r.spectrum)),
        };
    }
    Ok(total / idx.len() as f64)
}

// ── training ──

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Weights from the best validation epoch.
    pub params: ModelParams,
    pub history: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub stabilizer_events: usize,
}

impl TrainResult {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,lr\n");
        for s in &self.history {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.epoch, s.train_mse, s.val_mse, s.lr
            ));
        }
        out
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.history_csv()).map_err(|e| TrainError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn into_bundle(self, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainedBundle, TrainError> {
        Ok(TrainedBundle {
            model: self.params,
            config: cfg.clone(),
            stats: ds.stats()?.clone(),
            ranges: ds.manifest.ranges.clone(),
            fixed: ds.manifest.fixed.clone(),
            best_epoch: self.best_epoch,
            best_val_mse: self.best_val_mse,
        })
    }
}

struct LiftedModel<'t> {
    encoder: MlpNodes<'t>,
    decoder: Option<MlpNodes<'t>>,
    corrector: Option<MlpNodes<'t>>,
}

impl<'t> LiftedModel<'t> {
    fn lift(params: &ModelParams, tape: &'t Tape) -> Result<Self, TrainError> {
        Ok(Self {
            encoder: params.encoder.lift(tape)?,
            decoder: params.decoder.as_ref().map(|d| d.lift(tape)).transpose()?,
            corrector: params
                .corrector
                .as_ref()
                .map(|c| c.lift(tape))
                .transpose()?,
        })
    }

    fn param_vars(&self) -> Vec<Var<'t>> {
        let mut out = self.encoder.param_vars();
        if let Some(d) = &self.decoder {
            out.extend(d.param_vars());
        }
        if let Some(c) = &self.corrector {
            out.extend(c.param_vars());
        }
        out
    }
}

/// Trains one architecture on a split dataset and returns the best-epoch
/// weights with the per-epoch history.
pub fn train_model(
    kind: ModelKind,
    ds: &Dataset,
    pack: &CoefficientPack,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if ds.splits.iter().all(Option::is_none) {
        return Err(TrainError::NoSplits);
    }
    let train_idx = ds.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if ds.indices_of(Split::Val).is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let stats = ds.stats()?.clone();
    let ranges = ds.manifest.ranges.clone();
    let fixed = ds.manifest.fixed.clone();
    let plan = Rc::new(band_plan(&ds.bands, ResampleMode::Nearest)?);

    let std_spectra: Vec<Vec<f64>> = ds
        .records
        .iter()
        .map(|r| stats.apply(&r.spectrum))
        .collect();
    let truths: Vec<Option<LatentVars>> = ds.records.iter().map(|r| r.latent_truth).collect();
    if kind == ModelKind::NnReg && train_idx.iter().any(|&i| truths[i].is_none()) {
        return Err(TrainError::MissingLatentTruth);
    }

    let mut params = ModelParams::init(kind, cfg.seed);
    let mut adam = Adam::new(&params.buffer_shapes(), cfg);
    let mut run_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5AB1_11CE_D00D_F00D);

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut stale_epochs = 0usize;
    let mut stopped_early = false;
    let mut stabilizer_events = 0usize;
    let mut nonfinite_streak = 0u32;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut run_rng);

        let mut loss_weight_sum = 0.0;
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let tape = Tape::new();
            let lifted = LiftedModel::lift(&params, &tape)?;
            let loss = batch_loss(
                &tape,
                kind,
                &lifted,
                batch,
                &std_spectra,
                &truths,
                &stats,
                &ranges,
                &fixed,
                pack,
                &plan,
            )?;
            let mut loss_val = loss.scalar_value();

            let injected = cfg.inject_nan.is_some_and(|inj| {
                inj.epoch == epoch && (inj.step..inj.step + inj.count.max(1)).contains(&step)
            });
            if injected && cfg.inject_nan.unwrap().target == InjectTarget::Loss {
                loss_val = f64::NAN;
            }

            if !loss_val.is_finite() {
                nonfinite_streak += 1;
                if nonfinite_streak >= 3 {
                    return Err(TrainError::DivergedLoss {
                        epoch,
                        step,
                        count: nonfinite_streak,
                    });
                }
                continue;
            }
            nonfinite_streak = 0;

            let grads = tape.backward(loss)?;
            let mut bufs: Vec<Vec<f64>> = Vec::new();
            for v in lifted.param_vars() {
                bufs.push(grads.wrt(v)?.to_vec());
            }
            if injected && cfg.inject_nan.unwrap().target == InjectTarget::Gradient {
                bufs[0][0] = f64::NAN;
            }
            let outcome =
                stabilize_gradients(&mut bufs, &mut run_rng, cfg.strict_nan, epoch, step)?;
            stabilizer_events += outcome.tensors_hit;

            let mut theta = params.buffers_mut();
            adam.step(&mut theta, &bufs, lr);

            loss_sum += loss_val * batch.len() as f64;
            loss_weight_sum += batch.len() as f64;
        }

        let train_mse = if loss_weight_sum > 0.0 {
            loss_sum / loss_weight_sum
        } else {
            f64::NAN
        };
        let val_mse = evaluate_loss(&params, ds, pack, Split::Val)?;
        history.push(EpochStat {
            epoch,
            train_mse,
            val_mse,
            lr,
        });

        check_ranges(&params, &std_spectra, &train_idx, &ranges, &fixed, epoch)?;

        let improved = best.as_ref().map_or(true, |(_, b, _)| val_mse < *b);
        if improved {
            best = Some((epoch, val_mse, params.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_mse, best_params) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        params: best_params,
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
        stabilizer_events,
    })
}

/// The latent and physical ranges are structural guarantees of the clamped
/// sigmoid head; this probes a slice of the training data every epoch so a
/// silent violation (NaN weights, a broken clamp) stops the run.
fn check_ranges(
    params: &ModelParams,
    std_spectra: &[Vec<f64>],
    train_idx: &[usize],
    ranges: &VarRanges,
    fixed: &FixedVars,
    epoch: usize,
) -> Result<(), TrainError> {
    for &i in train_idx.iter().take(32) {
        let lat = params.encoder.forward(&std_spectra[i])?;
        for (j, &v) in lat.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::RangeViolation {
                    epoch,
                    detail: format!("latent component {j} = {v}"),
                });
            }
        }
        if params.kind != ModelKind::Ae {
            let latent = LatentVars::new(std::array::from_fn(|k| lat[k]))?;
            let phys = crate::latent::scale_to_physical(&clamp_latent(&latent), ranges, fixed.sd);
            phys.validate_in(ranges)
                .map_err(|e| TrainError::RangeViolation {
                    epoch,
                    detail: e.to_string(),
                })?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn batch_loss<'t>(
    tape: &'t Tape,
    kind: ModelKind,
    lifted: &LiftedModel<'t>,
    batch: &[usize],
    std_spectra: &[Vec<f64>],
    truths: &[Option<LatentVars>],
    stats: &Standardization,
    ranges: &VarRanges,
    fixed: &FixedVars,
    pack: &CoefficientPack,
    plan: &Rc<GatherPlan>,
) -> Result<Var<'t>, TrainError> {
    let needs_rtm = matches!(kind, ModelKind::AeRtm | ModelKind::AeRtmCorr);
    let pack_nodes = if needs_rtm {
        Some(diff::lift_pack_with(tape, pack, fixed)?)
    } else {
        None
    };
    let std_nodes = if needs_rtm {
        Some((tape.vector(&stats.mean)?, tape.vector(&stats.std)?))
    } else {
        None
    };

    let mut total: Option<Var<'t>> = None;
    let mut dims = 1usize;
    for &i in batch {
        let x = tape.vector(&std_spectra[i])?;
        let lat = lifted.encoder.forward(x)?;
        let sample_sq = match kind {
            ModelKind::Ae => {
                let dec = lifted.decoder.as_ref().expect("ae decoder lifted");
                let pred = dec.forward(lat)?;
                dims = std_spectra[i].len();
                pred.sub(x)?.square()?.sum()?
            }
            ModelKind::NnReg => {
                let truth = truths[i].ok_or(TrainError::MissingLatentTruth)?;
                let target = tape.vector(&truth.lam)?;
                dims = truth.lam.len();
                lat.sub(target)?.square()?.sum()?
            }
            ModelKind::AeRtm | ModelKind::AeRtmCorr => {
                let pv = diff::DiffPhysVars::from_latent_vector(lat, ranges, fixed.sd)?;
                let nodes = pack_nodes.as_ref().expect("pack lifted");
                let raw = diff::forest_bands(tape, &pv, fixed, nodes, plan)?;
                let corrected = match &lifted.corrector {
                    Some(c) => c.forward(raw)?,
                    None => raw,
                };
                let (mu, sigma) = std_nodes.as_ref().expect("stats lifted");
                let pred_std = corrected.sub(*mu)?.div(*sigma)?;
                dims = std_spectra[i].len();
                pred_std.sub(x)?.square()?.sum()?
            }
        };
        total = Some(match total {
            Some(t) => t.add(sample_sq)?,
            None => sample_sq,
        });
    }
    let total = total.expect("non-empty batch");
    let scale = 1.0 / (batch.len() as f64 * dims as f64);
    Ok(total.affine(scale, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_surrogate_real, BiasSpec, SurrogateConfig};
    use approx::assert_relative_eq;

    fn tiny_dataset(n_sites: usize, seed: u64) -> Dataset {
        let fixed = FixedVars::default();
        let ranges = VarRanges::default();
        let pack = CoefficientPack::default_pack();
        let bands = BandSet::sentinel2();
        let cfg = SurrogateConfig {
            n_sites,
            seed,
            noise_sd: 0.003,
            bias: Some(BiasSpec::default_11()),
            ..SurrogateConfig::default()
        };
        let mut ds = generate_surrogate_real(&cfg, &fixed, &ranges, pack, &bands).unwrap();
        ds.split_by_site([0.7, 0.15, 0.15], seed).unwrap();
        ds
    }

    fn quick_config(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            seed,
            max_epochs: epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_matches_hand_calculation() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&[1], &cfg);
        let mut theta = vec![1.0];
        let grads = vec![vec![1.0]];
        {
            let mut refs: Vec<&mut Vec<f64>> = vec![&mut theta];
            adam.step(&mut refs, &grads, 1e-3);
        }
        // First step: m̂ = g, v̂ = g², so Δ = lr·g/(|g| + eps) ≈ lr.
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert_relative_eq!(theta[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn adam_weight_decay_pulls_parameters_toward_zero() {
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&[1], &cfg);
        let mut theta = vec![2.0];
        let grads = vec![vec![0.0]];
        {
            let mut refs: Vec<&mut Vec<f64>> = vec![&mut theta];
            adam.step(&mut refs, &grads, 1e-3);
        }
        assert!(theta[0] < 2.0, "decay must shrink the parameter");
    }

    #[test]
    fn stabilizer_leaves_clean_gradients_untouched_and_draws_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = rng.clone();
        let mut bufs = vec![vec![0.5, 0.0, -0.25], vec![1.0, 2.0]];
        let snapshot = bufs.clone();
        let outcome = stabilize_gradients(&mut bufs, &mut rng, false, 0, 0).unwrap();
        assert_eq!(outcome, StabilizerOutcome::default());
        assert_eq!(bufs, snapshot);
        // RNG state unchanged: next draws match a pristine clone.
        let mut pristine = before;
        assert_eq!(rng.gen::<u64>(), pristine.gen::<u64>());
    }

    #[test]
    fn stabilizer_replaces_nan_and_zero_entries_in_poisoned_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bufs = vec![vec![f64::NAN, 0.0, 0.7], vec![0.0, 1.0]];
        let outcome = stabilize_gradients(&mut bufs, &mut rng, false, 0, 0).unwrap();
        assert_eq!(outcome.tensors_hit, 1);
        assert_eq!(outcome.entries_replaced, 2);
        assert!(bufs[0][0].is_finite() && bufs[0][0] > 0.0 && bufs[0][0] < 1e-7);
        assert!(bufs[0][1] > 0.0 && bufs[0][1] < 1e-7);
        assert_eq!(bufs[0][2], 0.7);
        // The clean tensor keeps its exact zero.
        assert_eq!(bufs[1], vec![0.0, 1.0]);
    }

    #[test]
    fn stabilizer_strict_mode_errors_instead() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bufs = vec![vec![f64::NAN]];
        assert!(matches!(
            stabilize_gradients(&mut bufs, &mut rng, true, 4, 7),
            Err(TrainError::NanGradient { epoch: 4, step: 7 })
        ));
    }

    #[test]
    fn mse_basics() {
        assert_relative_eq!(mse(&[1.0, 2.0], &[1.0, 4.0]), 2.0);
        assert_relative_eq!(mse(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn training_improves_the_autoencoder_loss() {
        let ds = tiny_dataset(12, 5);
        let pack = CoefficientPack::default_pack();
        let result = train_model(ModelKind::Ae, &ds, pack, &quick_config(3, 60)).unwrap();
        let first = result.history.first().unwrap().train_mse;
        let last = result.history.last().unwrap().train_mse;
        assert!(
            last < first * 0.5,
            "training loss should drop: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let ds = tiny_dataset(8, 11);
        let pack = CoefficientPack::default_pack();
        let a = train_model(ModelKind::AeRtm, &ds, pack, &quick_config(5, 2)).unwrap();
        let b = train_model(ModelKind::AeRtm, &ds, pack, &quick_config(5, 2)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let c = train_model(ModelKind::AeRtm, &ds, pack, &quick_config(6, 2)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_init_corrector_starts_exactly_at_the_uncorrected_model() {
        // Same seed, one epoch, one batch covering the whole train split:
        // the first-batch loss and the post-step encoder weights must match
        // bit for bit because the untrained corrector is the identity and
        // contributes exactly zero to the encoder gradient.
        let ds = tiny_dataset(8, 9);
        let pack = CoefficientPack::default_pack();
        let cfg = TrainConfig {
            seed: 13,
            max_epochs: 1,
            batch_size: 4096,
            ..TrainConfig::default()
        };
        let plain = train_model(ModelKind::AeRtm, &ds, pack, &cfg).unwrap();
        let corr = train_model(ModelKind::AeRtmCorr, &ds, pack, &cfg).unwrap();
        assert_eq!(
            plain.history[0].train_mse.to_bits(),
            corr.history[0].train_mse.to_bits()
        );
        assert_eq!(plain.params.encoder, corr.params.encoder);
        // The corrector itself moves off zero on its first step.
        let final_layer = corr
            .params
            .corrector
            .as_ref()
            .unwrap()
            .layers
            .last()
            .unwrap();
        assert!(final_layer.weights.iter().any(|&w| w != 0.0));
    }

    #[test]
    fn epoch_csv_has_the_expected_schema() {
        let ds = tiny_dataset(8, 2);
        let pack = CoefficientPack::default_pack();
        let result = train_model(ModelKind::Ae, &ds, pack, &quick_config(1, 2)).unwrap();
        let csv = result.history_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,train_mse,val_mse,lr"));
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,"));
        assert!(first.ends_with(",0.001"));
    }

    #[test]
    fn nan_injection_is_survived_and_counted() {
        let ds = tiny_dataset(8, 4);
        let pack = CoefficientPack::default_pack();
        let mut cfg = quick_config(2, 2);
        cfg.inject_nan = Some(NanInjection {
            epoch: 0,
            step: 0,
            count: 1,
            target: InjectTarget::Gradient,
        });
        let result = train_model(ModelKind::Ae, &ds, pack, &cfg).unwrap();
        assert!(result.stabilizer_events >= 1);
        assert!(result.history.iter().all(|s| s.train_mse.is_finite()));
    }

    #[test]
    fn strict_nan_mode_turns_injection_into_an_error() {
        let ds = tiny_dataset(8, 4);
        let pack = CoefficientPack::default_pack();
        let mut cfg = quick_config(2, 2);
        cfg.strict_nan = true;
        cfg.inject_nan = Some(NanInjection {
            epoch: 0,
            step: 0,
            count: 1,
            target: InjectTarget::Gradient,
        });
        assert!(matches!(
            train_model(ModelKind::Ae, &ds, pack, &cfg),
            Err(TrainError::NanGradient { .. })
        ));
    }

    #[test]
    fn three_consecutive_bad_losses_abort_training() {
        let ds = tiny_dataset(8, 4);
        let pack = CoefficientPack::default_pack();
        let mut cfg = quick_config(2, 3);
        // Small batches so one epoch has enough steps for the streak.
        cfg.batch_size = 16;
        cfg.inject_nan = Some(NanInjection {
            epoch: 0,
            step: 0,
            count: 3,
            target: InjectTarget::Loss,
        });
        assert!(matches!(
            train_model(ModelKind::Ae, &ds, pack, &cfg),
            Err(TrainError::DivergedLoss { count: 3, .. })
        ));
        // Two bad steps followed by a clean one reset the streak.
        cfg.inject_nan = Some(NanInjection {
            epoch: 0,
            step: 0,
            count: 2,
            target: InjectTarget::Loss,
        });
        assert!(train_model(ModelKind::Ae, &ds, pack, &cfg).is_ok());
    }

    #[test]
    fn bundle_round_trips_through_json() {
        let ds = tiny_dataset(8, 1);
        let pack = CoefficientPack::default_pack();
        let cfg = quick_config(1, 2);
        let result = train_model(ModelKind::AeRtmCorr, &ds, pack, &cfg).unwrap();
        let bundle = result.into_bundle(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        bundle.save_json(&path).unwrap();
        let back = TrainedBundle::load_json(&path).unwrap();
        assert_eq!(bundle, back);
    }

    #[test]
    fn nnreg_requires_latent_truth() {
        let mut ds = tiny_dataset(8, 1);
        for r in &mut ds.records {
            r.latent_truth = None;
        }
        let pack = CoefficientPack::default_pack();
        assert!(matches!(
            train_model(ModelKind::NnReg, &ds, pack, &quick_config(1, 1)),
            Err(TrainError::MissingLatentTruth)
        ));
    }

    #[test]
    fn nnreg_learns_latent_variables_supervised() {
        let ds = tiny_dataset(12, 6);
        let pack = CoefficientPack::default_pack();
        let result = train_model(ModelKind::NnReg, &ds, pack, &quick_config(4, 10)).unwrap();
        let first = result.history.first().unwrap().train_mse;
        let last = result.history.last().unwrap().train_mse;
        assert!(
            last < first * 0.5,
            "latent regression loss should drop: first {first}, last {last}"
        );
    }

    #[test]
    fn corrector_learns_a_fixed_offset() {
        // Supervised toy fit: target = input + 0.05 on every band. A few
        // hundred Adam steps push the residual net close to that map.
        let mut params = MlpParams::corrector(&mut ChaCha8Rng::seed_from_u64(5));
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let shapes: Vec<usize> = params
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.biases.len()])
            .collect();
        let mut adam = Adam::new(&shapes, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..400 {
            let x: Vec<f64> = (0..11).map(|_| rng.gen_range(0.05..0.6)).collect();
            let target: Vec<f64> = x.iter().map(|v| v + 0.05).collect();
            let tape = Tape::new();
            let nodes = params.lift(&tape).unwrap();
            let xv = tape.vector(&x).unwrap();
            let out = nodes.forward(xv).unwrap();
            let t = tape.vector(&target).unwrap();
            let loss = out.sub(t).unwrap().square().unwrap().mean().unwrap();
            let grads = tape.backward(loss).unwrap();
            let bufs: Vec<Vec<f64>> = nodes
                .param_vars()
                .iter()
                .map(|v| grads.wrt(*v).unwrap().to_vec())
                .collect();
            let mut refs: Vec<&mut Vec<f64>> = params
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.weights, &mut l.biases])
                .collect();
            adam.step(&mut refs, &bufs, 3e-3);
        }
        let x = vec![0.3; 11];
        let out = params.forward(&x).unwrap();
        for v in out {
            assert!((v - 0.35).abs() < 0.01, "corrector output {v}, want ≈0.35");
        }
    }
}
