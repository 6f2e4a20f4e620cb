//! Mapping between normalized latent variables Λ ∈ [0,1] and physical
//! variables, plus the allometric chain fc → crown diameter → height.
//!
//! The seven inferred variables are ordered (N, cab, cw, cm, LAI, LAIu, fc)
//! everywhere in the crate.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdResult, Var};
use crate::rtm::PhysVars;

/// Number of directly inferred variables.
pub const NUM_VARS: usize = 7;

/// Canonical variable order used for latent vectors, ranges, and reports.
pub const VAR_NAMES: [&str; NUM_VARS] = ["N", "cab", "cw", "cm", "LAI", "LAIu", "fc"];

/// Height allometry h = exp(H_INTERCEPT + H_SLOPE·ln(cd)).
pub const H_INTERCEPT: f64 = 2.117;
pub const H_SLOPE: f64 = 0.507;

/// Sigmoid outputs are clamped into this closed window before range scaling
/// so the mapping stays invertible and gradients stay finite.
pub const LATENT_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("latent component {name} = {value} outside [0, 1]")]
    LatentOutOfRange { name: &'static str, value: f64 },
    #[error("variable {name} = {value} outside its range [{min}, {max}]")]
    RangeError {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("non-finite value for {name}: {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("invalid range for {name}: min {min} must be < max {max}")]
    InvalidRange { name: String, min: f64, max: f64 },
    #[error("unknown variable name `{0}` in ranges file")]
    UnknownVariable(String),
    #[error("ranges file: {0}")]
    File(String),
}

/// Normalized variables in [0,1]; encoder outputs land strictly inside via
/// sigmoid + clamp, while the closed endpoints are reachable from
/// [`physical_to_latent`] at range bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentVars {
    pub lam: [f64; NUM_VARS],
}

impl LatentVars {
    pub fn new(lam: [f64; NUM_VARS]) -> Result<Self, LatentError> {
        for (i, &v) in lam.iter().enumerate() {
            if !v.is_finite() {
                return Err(LatentError::NonFinite {
                    name: VAR_NAMES[i],
                    value: v,
                });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(LatentError::LatentOutOfRange {
                    name: VAR_NAMES[i],
                    value: v,
                });
            }
        }
        Ok(Self { lam })
    }
}

impl fmt::Display for LatentVars {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, v)) in VAR_NAMES.iter().zip(&self.lam).enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{name}={v:.6}")?;
        }
        Ok(())
    }
}

/// Per-variable (min, max) sampling ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarRanges {
    pub ranges: [(f64, f64); NUM_VARS],
}

impl Default for VarRanges {
    /// Default sampling ranges: N∈[1,3], cab∈[10,80] µg/cm², cw∈[0.001,0.02] cm,
    /// cm∈[0.005,0.05] g/cm², LAI∈[0.01,5], LAIu∈[0.01,1], fc∈[0.1,1].
    fn default() -> Self {
        Self {
            ranges: [
                (1.0, 3.0),
                (10.0, 80.0),
                (0.001, 0.02),
                (0.005, 0.05),
                (0.01, 5.0),
                (0.01, 1.0),
                (0.1, 1.0),
            ],
        }
    }
}

impl VarRanges {
    pub fn validate(&self) -> Result<(), LatentError> {
        for (i, &(min, max)) in self.ranges.iter().enumerate() {
            if !min.is_finite() || !max.is_finite() || min >= max {
                return Err(LatentError::InvalidRange {
                    name: VAR_NAMES[i].to_string(),
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        VAR_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.ranges[i])
    }

    /// Reads `variable,min,max` rows (optional header) and overrides the
    /// named variables, keeping defaults for the rest.
    pub fn from_override_file(path: &Path) -> Result<Self, LatentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LatentError::File(format!("{}: {e}", path.display())))?;
        let mut out = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("variable,min,max")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(LatentError::File(format!(
                    "line {}: expected `variable,min,max`, got `{line}`",
                    lineno + 1
                )));
            }
            let idx = VAR_NAMES
                .iter()
                .position(|&n| n == fields[0])
                .ok_or_else(|| LatentError::UnknownVariable(fields[0].to_string()))?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| LatentError::File(format!("line {}: bad number `{s}`", lineno + 1)))
            };
            out.ranges[idx] = (parse(fields[1])?, parse(fields[2])?);
        }
        out.validate()?;
        Ok(out)
    }
}

/// Z = (Max − Min)·Λ + Min per coordinate, evaluated as min·(1−λ) + max·λ so
/// both endpoints are floating-point exact; the derived crown diameter and
/// height are populated from fc.
pub fn scale_to_physical(lam: &LatentVars, ranges: &VarRanges, sd: f64) -> PhysVars {
    let z = |i: usize| {
        let (min, max) = ranges.ranges[i];
        min * (1.0 - lam.lam[i]) + max * lam.lam[i]
    };
    PhysVars::new(z(0), z(1), z(2), z(3), z(4), z(5), z(6), sd)
}

/// Inverse of [`scale_to_physical`]; errors if any component leaves its range.
pub fn physical_to_latent(z: &PhysVars, ranges: &VarRanges) -> Result<LatentVars, LatentError> {
    let vals = z.inferred();
    let mut lam = [0.0; NUM_VARS];
    for i in 0..NUM_VARS {
        let (min, max) = ranges.ranges[i];
        if !(min..=max).contains(&vals[i]) {
            return Err(LatentError::RangeError {
                name: VAR_NAMES[i],
                value: vals[i],
                min,
                max,
            });
        }
        lam[i] = (vals[i] - min) / (max - min);
    }
    LatentVars::new(lam)
}

/// cd = 2·sqrt(fc·10000/(π·sd)), the crown diameter consistent with covering
/// a fraction fc of one hectare at stem density sd.
pub fn fc_to_cd(fc: f64, sd: f64) -> f64 {
    2.0 * (fc * 10_000.0 / (std::f64::consts::PI * sd)).sqrt()
}

/// h = exp(2.117 + 0.507·ln(cd)), an allometric height fit.
pub fn cd_to_h(cd: f64) -> f64 {
    (H_INTERCEPT + H_SLOPE * cd.ln()).exp()
}

// ── on-tape counterparts ──

/// Range scaling of one latent component on the tape, matching the
/// endpoint-exact evaluation order of [`scale_to_physical`].
pub fn scale_component<'t>(lam_i: Var<'t>, range: (f64, f64)) -> AdResult<Var<'t>> {
    let (min, max) = range;
    let low = lam_i.one_minus()?.affine(min, 0.0)?;
    let high = lam_i.affine(max, 0.0)?;
    low.add(high)
}

pub fn fc_to_cd_var<'t>(fc: Var<'t>, sd: f64) -> AdResult<Var<'t>> {
    fc.affine(10_000.0 / (std::f64::consts::PI * sd), 0.0)?
        .sqrt()?
        .affine(2.0, 0.0)
}

pub fn cd_to_h_var<'t>(cd: Var<'t>) -> AdResult<Var<'t>> {
    cd.log()?.affine(H_SLOPE, H_INTERCEPT)?.exp()
}
