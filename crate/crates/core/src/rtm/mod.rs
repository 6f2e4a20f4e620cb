//! Two-layer forest reflectance model: a plate-model leaf, an infinite-
//! reflectance canopy closure for understory and crown layers, and a crown/
//! shadow/background mixing step, evaluated on a 1 nm spectral grid and
//! resampled to a band set.
//!
//! Two evaluation paths produce identical values: a plain `f64` path
//! ([`reference`]) and a tape-based differentiable path ([`diff`]).

pub mod diff;
pub mod reference;

use std::path::Path;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{GatherPlan, GatherRow};
use crate::latent::{cd_to_h, fc_to_cd, VarRanges, VAR_NAMES};

/// Spectral grid bounds and step, in nm.
pub const GRID_START_NM: f64 = 400.0;
pub const GRID_END_NM: f64 = 2500.0;
pub const GRID_STEP_NM: f64 = 10.0;
/// Number of grid points: 400..=2500 nm in 10 nm steps.
pub const GRID_LEN: usize = 211;

/// Counts discriminant clamps in the plate-stack square root (see
/// [`delta_clamp_count`]); the discriminant is positive for any absorbing
/// layer, so a nonzero count flags degenerate inputs.
static DELTA_CLAMPS: AtomicU64 = AtomicU64::new(0);

pub(crate) fn record_delta_clamp() {
    DELTA_CLAMPS.fetch_add(1, Ordering::Relaxed);
}

/// Number of times the plate-stack discriminant had to be clamped to zero
/// since process start.
pub fn delta_clamp_count() -> u64 {
    DELTA_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum RtmError {
    #[error("coefficient pack: {0}")]
    PackFormat(String),
    #[error("band set: {0}")]
    BandFormat(String),
    #[error("band `{name}` center {center_nm} nm outside grid [{GRID_START_NM}, {GRID_END_NM}]")]
    BandOutsideGrid { name: String, center_nm: f64 },
    #[error("variable {name} = {value} outside its range [{min}, {max}]")]
    VarOutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("spectrum has {got} values for {expected} bands")]
    SpectrumShape { got: usize, expected: usize },
    #[error("spectrum value {value} at band {band} outside [0, 1.5]")]
    SpectrumRange { band: String, value: f64 },
    #[error(transparent)]
    Ad(#[from] crate::ad::AdError),
    #[error("io: {0}")]
    Io(String),
}

// ── physical variables ──

/// The seven inferred physical variables plus the derived crown geometry.
///
/// `cd` and `h` are always recomputed from `fc` and the stem density used at
/// construction, so the struct cannot hold an inconsistent triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysVars {
    /// Leaf structure parameter (plate count), dimensionless.
    pub n: f64,
    /// Chlorophyll a+b content, µg/cm².
    pub cab: f64,
    /// Equivalent water thickness, cm.
    pub cw: f64,
    /// Dry matter content, g/cm².
    pub cm: f64,
    /// Canopy (overstory) leaf area index.
    pub lai: f64,
    /// Understory leaf area index.
    pub laiu: f64,
    /// Crown cover fraction.
    pub fc: f64,
    /// Crown diameter, m (derived from fc).
    pub cd: f64,
    /// Stand height, m (derived from cd).
    pub h: f64,
}

impl PhysVars {
    #[allow(clippy::too_many_arguments)]
    pub fn new(n: f64, cab: f64, cw: f64, cm: f64, lai: f64, laiu: f64, fc: f64, sd: f64) -> Self {
        let cd = fc_to_cd(fc, sd);
        let h = cd_to_h(cd);
        Self {
            n,
            cab,
            cw,
            cm,
            lai,
            laiu,
            fc,
            cd,
            h,
        }
    }

    /// The directly inferred variables in canonical order.
    pub fn inferred(&self) -> [f64; 7] {
        [self.n, self.cab, self.cw, self.cm, self.lai, self.laiu, self.fc]
    }

    /// Checks every inferred variable against `ranges`, naming the offender.
    pub fn validate_in(&self, ranges: &VarRanges) -> Result<(), RtmError> {
        for (i, &v) in self.inferred().iter().enumerate() {
            let (min, max) = ranges.ranges[i];
            if !v.is_finite() {
                return Err(RtmError::NonFinite {
                    what: format!("variable {}", VAR_NAMES[i]),
                });
            }
            if !(min..=max).contains(&v) {
                return Err(RtmError::VarOutOfRange {
                    name: VAR_NAMES[i],
                    value: v,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }
}

// ── fixed variables ──

/// Scene and observation parameters held constant during inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedVars {
    /// Soil moisture mixing weight for the background reflectance.
    pub psoil: f64,
    /// Carotenoid content, µg/cm².
    pub car: f64,
    /// Brown pigment fraction.
    pub cbrown: f64,
    /// Anthocyanin content, µg/cm².
    pub anth: f64,
    /// Protein content, g/cm² (carried for interface completeness).
    pub cp: f64,
    /// Carbon-based constituents, g/cm² (carried for interface completeness).
    pub cbc: f64,
    /// Leaf angle distribution tag (carried for interface completeness).
    pub type_lidf: String,
    /// Hot spot parameter (carried for interface completeness).
    pub hspot: f64,
    /// View zenith angle, degrees (carried for interface completeness).
    pub tto: f64,
    /// Sun zenith angle, degrees.
    pub tts: f64,
    /// Relative azimuth, degrees (carried for interface completeness).
    pub psi: f64,
    /// Stem density, stems/ha.
    pub sd: f64,
}

impl Default for FixedVars {
    fn default() -> Self {
        Self {
            psoil: 0.8,
            car: 10.0,
            cbrown: 0.25,
            anth: 2.0,
            cp: 0.0015,
            cbc: 0.01,
            type_lidf: "beta".to_string(),
            hspot: 0.01,
            tto: 0.0,
            tts: 30.0,
            psi: 0.0,
            sd: 500.0,
        }
    }
}

impl FixedVars {
    pub fn validate(&self) -> Result<(), RtmError> {
        let checks: [(&str, f64); 10] = [
            ("psoil", self.psoil),
            ("car", self.car),
            ("cbrown", self.cbrown),
            ("anth", self.anth),
            ("cp", self.cp),
            ("cbc", self.cbc),
            ("hspot", self.hspot),
            ("tto", self.tto),
            ("psi", self.psi),
            ("sd", self.sd),
        ];
        for (name, v) in checks {
            if !v.is_finite() {
                return Err(RtmError::NonFinite {
                    what: format!("fixed variable {name}"),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.psoil) {
            return Err(RtmError::PackFormat(format!(
                "psoil = {} outside [0, 1]",
                self.psoil
            )));
        }
        if !(0.0..90.0).contains(&self.tts) {
            return Err(RtmError::PackFormat(format!(
                "tts = {} outside [0, 90) degrees",
                self.tts
            )));
        }
        if self.sd <= 0.0 {
            return Err(RtmError::PackFormat(format!("sd = {} must be > 0", self.sd)));
        }
        Ok(())
    }
}

// ── coefficient pack ──

/// Per-wavelength leaf refractive index, specific absorption coefficients,
/// and the two soil endmember spectra, on the 1 nm-grid described by
/// [`GRID_START_NM`]..[`GRID_END_NM`] step [`GRID_STEP_NM`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPack {
    pub wavelengths: Vec<f64>,
    pub refractive: Vec<f64>,
    pub k_cab: Vec<f64>,
    pub k_car: Vec<f64>,
    pub k_anth: Vec<f64>,
    pub k_brown: Vec<f64>,
    pub k_cw: Vec<f64>,
    pub k_cm: Vec<f64>,
    pub soil_dry: Vec<f64>,
    pub soil_wet: Vec<f64>,
}

pub const PACK_HEADER: &str =
    "wavelength_nm,refractive,k_cab,k_car,k_anth,k_brown,k_cw,k_cm,soil_dry,soil_wet";

fn gauss(lambda: f64, center: f64, sigma: f64) -> f64 {
    let t = (lambda - center) / sigma;
    (-t * t).exp()
}

static DEFAULT_PACK: LazyLock<CoefficientPack> = LazyLock::new(|| {
    let mut pack = CoefficientPack {
        wavelengths: Vec::with_capacity(GRID_LEN),
        refractive: Vec::with_capacity(GRID_LEN),
        k_cab: Vec::with_capacity(GRID_LEN),
        k_car: Vec::with_capacity(GRID_LEN),
        k_anth: Vec::with_capacity(GRID_LEN),
        k_brown: Vec::with_capacity(GRID_LEN),
        k_cw: Vec::with_capacity(GRID_LEN),
        k_cm: Vec::with_capacity(GRID_LEN),
        soil_dry: Vec::with_capacity(GRID_LEN),
        soil_wet: Vec::with_capacity(GRID_LEN),
    };
    for i in 0..GRID_LEN {
        let wl = GRID_START_NM + GRID_STEP_NM * i as f64;
        let s = (wl - GRID_START_NM) / (GRID_END_NM - GRID_START_NM);
        pack.wavelengths.push(wl);
        pack.refractive.push(1.52 - 0.12 * s);
        // Chlorophyll: blue and red absorption peaks over a broad visible
        // pedestal, transparent in the NIR.
        pack.k_cab.push(
            0.0004 + 0.018 * gauss(wl, 445.0, 38.0) + 0.022 * gauss(wl, 670.0, 26.0)
                + 0.006 * gauss(wl, 555.0, 120.0),
        );
        pack.k_car
            .push(0.0003 + 0.014 * gauss(wl, 490.0, 30.0));
        pack.k_anth
            .push(0.0002 + 0.006 * gauss(wl, 550.0, 25.0));
        pack.k_brown
            .push(0.0005 + 0.02 * gauss(wl, 400.0, 120.0));
        // Water: the classical 970/1200/1450/1940/2500 nm bands.
        pack.k_cw.push(
            0.002
                + 4.0 * gauss(wl, 970.0, 35.0)
                + 12.0 * gauss(wl, 1200.0, 45.0)
                + 55.0 * gauss(wl, 1450.0, 55.0)
                + 85.0 * gauss(wl, 1940.0, 70.0)
                + 40.0 * gauss(wl, 2500.0, 120.0),
        );
        // Dry matter: SWIR ramp plus cellulose/lignin features.
        pack.k_cm.push(
            0.02 + 4.0 * s
                + 3.0 * gauss(wl, 1720.0, 60.0)
                + 8.0 * gauss(wl, 2100.0, 80.0)
                + 10.0 * gauss(wl, 2300.0, 90.0),
        );
        pack.soil_dry.push(0.10 + 0.25 * s);
        pack.soil_wet.push(0.05 + 0.13 * s);
    }
    pack.validate().expect("default pack must be valid");
    pack
});

impl CoefficientPack {
    /// The built-in pack used when no CSV pack is supplied.
    pub fn default_pack() -> &'static CoefficientPack {
        &DEFAULT_PACK
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }

    fn columns(&self) -> [(&'static str, &Vec<f64>); 9] {
        [
            ("refractive", &self.refractive),
            ("k_cab", &self.k_cab),
            ("k_car", &self.k_car),
            ("k_anth", &self.k_anth),
            ("k_brown", &self.k_brown),
            ("k_cw", &self.k_cw),
            ("k_cm", &self.k_cm),
            ("soil_dry", &self.soil_dry),
            ("soil_wet", &self.soil_wet),
        ]
    }

    /// Grid shape, monotone wavelengths, finiteness, positivity of the
    /// refractive index, non-negative absorption, soils in [0, 1].
    pub fn validate(&self) -> Result<(), RtmError> {
        let n = self.wavelengths.len();
        if n != GRID_LEN {
            return Err(RtmError::PackFormat(format!(
                "expected {GRID_LEN} grid rows, got {n}"
            )));
        }
        for (i, &wl) in self.wavelengths.iter().enumerate() {
            let expect = GRID_START_NM + GRID_STEP_NM * i as f64;
            if (wl - expect).abs() > 1e-6 {
                return Err(RtmError::PackFormat(format!(
                    "row {i}: wavelength {wl} nm, expected {expect} nm"
                )));
            }
        }
        for (name, col) in self.columns() {
            if col.len() != n {
                return Err(RtmError::PackFormat(format!(
                    "column {name} has {} rows, expected {n}",
                    col.len()
                )));
            }
            if let Some(bad) = col.iter().find(|v| !v.is_finite()) {
                return Err(RtmError::PackFormat(format!(
                    "column {name} contains non-finite value {bad}"
                )));
            }
        }
        if self.refractive.iter().any(|&v| v <= 1.0) {
            return Err(RtmError::PackFormat(
                "refractive index must be > 1 everywhere".to_string(),
            ));
        }
        for (name, col) in self.columns() {
            if name.starts_with("k_") && col.iter().any(|&v| v < 0.0) {
                return Err(RtmError::PackFormat(format!(
                    "absorption column {name} must be non-negative"
                )));
            }
        }
        for name in ["soil_dry", "soil_wet"] {
            let col = if name == "soil_dry" { &self.soil_dry } else { &self.soil_wet };
            if col.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(RtmError::PackFormat(format!(
                    "soil column {name} must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, RtmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RtmError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, RtmError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| RtmError::PackFormat("empty file".to_string()))?
            .trim();
        if header != PACK_HEADER {
            return Err(RtmError::PackFormat(format!(
                "bad header `{header}`, expected `{PACK_HEADER}`"
            )));
        }
        let mut pack = CoefficientPack {
            wavelengths: Vec::new(),
            refractive: Vec::new(),
            k_cab: Vec::new(),
            k_car: Vec::new(),
            k_anth: Vec::new(),
            k_brown: Vec::new(),
            k_cw: Vec::new(),
            k_cm: Vec::new(),
            soil_dry: Vec::new(),
            soil_wet: Vec::new(),
        };
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 10 {
                return Err(RtmError::PackFormat(format!(
                    "line {}: expected 10 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let mut vals = [0.0f64; 10];
            for (j, f) in fields.iter().enumerate() {
                vals[j] = f.trim().parse::<f64>().map_err(|_| {
                    RtmError::PackFormat(format!("line {}: bad number `{f}`", lineno + 2))
                })?;
            }
            pack.wavelengths.push(vals[0]);
            pack.refractive.push(vals[1]);
            pack.k_cab.push(vals[2]);
            pack.k_car.push(vals[3]);
            pack.k_anth.push(vals[4]);
            pack.k_brown.push(vals[5]);
            pack.k_cw.push(vals[6]);
            pack.k_cm.push(vals[7]);
            pack.soil_dry.push(vals[8]);
            pack.soil_wet.push(vals[9]);
        }
        pack.validate()?;
        Ok(pack)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(64 * self.len());
        out.push_str(PACK_HEADER);
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                self.wavelengths[i],
                self.refractive[i],
                self.k_cab[i],
                self.k_car[i],
                self.k_anth[i],
                self.k_brown[i],
                self.k_cw[i],
                self.k_cm[i],
                self.soil_dry[i],
                self.soil_wet[i]
            ));
        }
        out
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<(), RtmError> {
        std::fs::write(path, self.to_csv_string())
            .map_err(|e| RtmError::Io(format!("{}: {e}", path.display())))
    }
}

// ── band set ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub center_nm: f64,
    pub halfwidth_nm: Option<f64>,
}

/// Output band definitions; defaults to the 11-band Sentinel-2 land set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSet {
    pub bands: Vec<Band>,
}

impl BandSet {
    /// Sentinel-2 land bands B2..B12 (no B1/B10) with 10 m/20 m/60 m native
    /// centers in nm.
    pub fn sentinel2() -> Self {
        let defs: [(&str, f64); 11] = [
            ("B2", 490.0),
            ("B3", 560.0),
            ("B4", 665.0),
            ("B5", 705.0),
            ("B6", 740.0),
            ("B7", 783.0),
            ("B8", 842.0),
            ("B8a", 865.0),
            ("B9", 940.0),
            ("B11", 1610.0),
            ("B12", 2190.0),
        ];
        Self {
            bands: defs
                .iter()
                .map(|&(name, center_nm)| Band {
                    name: name.to_string(),
                    center_nm,
                    halfwidth_nm: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.bands.iter().map(|b| b.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), RtmError> {
        if self.bands.is_empty() {
            return Err(RtmError::BandFormat("band set is empty".to_string()));
        }
        for b in &self.bands {
            if !b.center_nm.is_finite() {
                return Err(RtmError::BandFormat(format!(
                    "band {} has non-finite center",
                    b.name
                )));
            }
            if !(GRID_START_NM..=GRID_END_NM).contains(&b.center_nm) {
                return Err(RtmError::BandOutsideGrid {
                    name: b.name.clone(),
                    center_nm: b.center_nm,
                });
            }
            if let Some(hw) = b.halfwidth_nm {
                if !hw.is_finite() || hw < 0.0 {
                    return Err(RtmError::BandFormat(format!(
                        "band {} has invalid half-width {hw}",
                        b.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads `name,center_nm[,halfwidth_nm]` rows with optional header.
    pub fn from_csv_path(path: &Path) -> Result<Self, RtmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RtmError::Io(format!("{}: {e}", path.display())))?;
        let mut bands = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if lineno == 0 && line.to_ascii_lowercase().starts_with("name,") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 && fields.len() != 3 {
                return Err(RtmError::BandFormat(format!(
                    "line {}: expected `name,center_nm[,halfwidth_nm]`",
                    lineno + 1
                )));
            }
            let center_nm = fields[1].parse::<f64>().map_err(|_| {
                RtmError::BandFormat(format!("line {}: bad center `{}`", lineno + 1, fields[1]))
            })?;
            let halfwidth_nm = if fields.len() == 3 {
                Some(fields[2].parse::<f64>().map_err(|_| {
                    RtmError::BandFormat(format!(
                        "line {}: bad half-width `{}`",
                        lineno + 1,
                        fields[2]
                    ))
                })?)
            } else {
                None
            };
            bands.push(Band {
                name: fields[0].to_string(),
                center_nm,
                halfwidth_nm,
            });
        }
        let set = Self { bands };
        set.validate()?;
        Ok(set)
    }
}

// ── spectra ──

/// Reflectance values aligned with a band set.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub bands: Rc<BandSet>,
}

impl Spectrum {
    pub fn new(values: Vec<f64>, bands: Rc<BandSet>) -> Result<Self, RtmError> {
        if values.len() != bands.len() {
            return Err(RtmError::SpectrumShape {
                got: values.len(),
                expected: bands.len(),
            });
        }
        for (v, b) in values.iter().zip(&bands.bands) {
            if !v.is_finite() || !(0.0..=1.5).contains(v) {
                return Err(RtmError::SpectrumRange {
                    band: b.name.clone(),
                    value: *v,
                });
            }
        }
        Ok(Self { values, bands })
    }
}

// ── band resampling ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleMode {
    /// Take the grid point nearest each band center.
    Nearest,
    /// Uniform average over grid points within ±half-width of the center;
    /// bands without a half-width fall back to nearest.
    Box,
}

/// Builds the gather rows mapping the spectral grid to band values; shared by
/// the plain and differentiable paths so both resample identically.
pub fn band_plan(bands: &BandSet, mode: ResampleMode) -> Result<GatherPlan, RtmError> {
    bands.validate()?;
    let mut rows = Vec::with_capacity(bands.len());
    for b in &bands.bands {
        let row = match (mode, b.halfwidth_nm) {
            (ResampleMode::Box, Some(hw)) if hw > 0.0 => {
                let lo = b.center_nm - hw;
                let hi = b.center_nm + hw;
                let mut indices = Vec::new();
                for i in 0..GRID_LEN {
                    let wl = GRID_START_NM + GRID_STEP_NM * i as f64;
                    if wl >= lo - 1e-9 && wl <= hi + 1e-9 {
                        indices.push(i);
                    }
                }
                if indices.is_empty() {
                    return Err(RtmError::BandFormat(format!(
                        "band {} covers no grid points",
                        b.name
                    )));
                }
                let w = 1.0 / indices.len() as f64;
                let weights = vec![w; indices.len()];
                GatherRow { indices, weights }
            }
            _ => {
                let idx = ((b.center_nm - GRID_START_NM) / GRID_STEP_NM).round() as usize;
                let idx = idx.min(GRID_LEN - 1);
                GatherRow {
                    indices: vec![idx],
                    weights: vec![1.0],
                }
            }
        };
        rows.push(row);
    }
    Ok(GatherPlan { rows })
}

/// Applies a gather plan to a plain grid spectrum.
pub fn apply_plan(plan: &GatherPlan, grid: &[f64]) -> Vec<f64> {
    plan.rows
        .iter()
        .map(|row| {
            row.indices
                .iter()
                .zip(&row.weights)
                .map(|(&i, &w)| w * grid[i])
                .sum()
        })
        .collect()
}

// ── top-level forward ──

/// Full forward model: physical variables to band reflectance.
///
/// With `differentiable` set, the computation runs through the tape path and
/// returns the same values as the plain path; gradients are available through
/// [`diff`] directly.
pub fn forward(
    v: &PhysVars,
    f: &FixedVars,
    pack: &CoefficientPack,
    bands: &BandSet,
    mode: ResampleMode,
    differentiable: bool,
) -> Result<Spectrum, RtmError> {
    f.validate()?;
    pack.validate()?;
    let plan = band_plan(bands, mode)?;
    let values = if differentiable {
        let tape = crate::ad::Tape::new();
        let pv = diff::DiffPhysVars::from_values(&tape, v)?;
        let nodes = diff::lift_pack(&tape, pack)?;
        let out = diff::forest_bands(&tape, &pv, f, &nodes, &Rc::new(plan))?;
        out.value()
    } else {
        let grid = reference::forest_model(v, f, pack);
        apply_plan(&plan, &grid)
    };
    for v in &values {
        if !v.is_finite() {
            return Err(RtmError::NonFinite {
                what: "forward output".to_string(),
            });
        }
    }
    Spectrum::new(values, Rc::new(bands.clone()))
}
