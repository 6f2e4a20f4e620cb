//! Plain `f64` evaluation of the forest reflectance model on the spectral
//! grid. The tape path in [`super::diff`] mirrors this arithmetic operation
//! for operation so the two stay numerically interchangeable.

use crate::ad::exp1::exp1;

use super::{CoefficientPack, FixedVars, PhysVars};

/// One-layer plate transmission factor τ₁(k) = (1−k)·e^(−k) + k²·E1(k).
pub fn plate_transmission(k: f64) -> f64 {
    (1.0 - k) * (-k).exp() + k * k * exp1(k)
}

/// Background soil reflectance: psoil·dry + (1−psoil)·wet per wavelength.
pub fn soil_spectrum(pack: &CoefficientPack, psoil: f64) -> Vec<f64> {
    pack.soil_dry
        .iter()
        .zip(&pack.soil_wet)
        .map(|(&d, &w)| psoil * d + (1.0 - psoil) * w)
        .collect()
}

/// Plate-model leaf reflectance and transmittance over the spectral grid.
///
/// Absorption from each constituent is pooled, spread over `N` plates, pushed
/// through the single-plate transmission, then stacked with the Stokes
/// expressions for `N` layers.
pub fn leaf_model(v: &PhysVars, f: &FixedVars, pack: &CoefficientPack) -> (Vec<f64>, Vec<f64>) {
    let n_grid = pack.len();
    let mut rho_n = Vec::with_capacity(n_grid);
    let mut t_n = Vec::with_capacity(n_grid);
    let fixed_mix = fixed_absorption(f, pack);
    for i in 0..n_grid {
        let mix = v.cab * pack.k_cab[i] + v.cw * pack.k_cw[i] + v.cm * pack.k_cm[i] + fixed_mix[i];
        let mut k = mix / v.n;
        if k == 0.0 {
            k = f64::EPSILON;
        }
        let tau = plate_transmission(k);
        let tau_sq = tau * tau;

        let nr = pack.refractive[i];
        let rs = ((nr - 1.0) / (nr + 1.0)) * ((nr - 1.0) / (nr + 1.0));
        let rs_sq = rs * rs;
        let denom = 1.0 - rs_sq * tau_sq;
        let c = (1.0 - rs) * (1.0 - rs) * rs;
        let rho1 = rs + (tau_sq * c) / denom;
        let d = (1.0 - rs) * (1.0 - rs);
        let t1 = (tau * d) / denom;

        let rho1_sq = rho1 * rho1;
        let t1_sq = t1 * t1;
        let inner = t1_sq - rho1_sq - 1.0;
        let mut disc = inner * inner - 4.0 * rho1_sq;
        if disc < 0.0 {
            disc = 0.0;
            super::record_delta_clamp();
        }
        let delta = disc.sqrt();

        let a = ((rho1_sq - t1_sq) + 1.0 + delta) / (2.0 * rho1);
        let b = ((t1_sq - rho1_sq) + 1.0 + delta) / (2.0 * t1);
        let a_inv = 1.0 / a;
        let bn = b.powf(v.n);
        let bn_inv = b.powf(-v.n);
        let denom_p = a * bn - a_inv * bn_inv;
        rho_n.push((bn - bn_inv) / denom_p);
        t_n.push((a - a_inv) / denom_p);
    }
    (rho_n, t_n)
}

/// Constituents held fixed during inversion contribute a constant absorption
/// spectrum: car·k_car + anth·k_anth + cbrown·k_brown.
pub fn fixed_absorption(f: &FixedVars, pack: &CoefficientPack) -> Vec<f64> {
    (0..pack.len())
        .map(|i| f.car * pack.k_car[i] + f.anth * pack.k_anth[i] + f.cbrown * pack.k_brown[i])
        .collect()
}

/// Homogeneous layer reflectance over a background: a two-flux
/// infinite-reflectance closure blended with the background by the direct
/// transmission E = e^(−2·k_ext·lai).
///
/// Evaluated as bg·E + R∞·(1−E) so lai = 0 returns the background exactly.
pub fn canopy_layer(
    rho_leaf: &[f64],
    t_leaf: &[f64],
    lai: f64,
    rho_bg: &[f64],
    tts_deg: f64,
) -> Vec<f64> {
    let k_ext = 0.5 / tts_deg.to_radians().cos();
    let m = -2.0 * k_ext;
    let e = (lai * m).exp();
    let mut out = Vec::with_capacity(rho_leaf.len());
    for i in 0..rho_leaf.len() {
        let omega = rho_leaf[i] + t_leaf[i];
        let omega_safe = omega.max(1e-9);
        let ks = ((1.0 - omega_safe) * 2.0) / omega_safe;
        let r_inf = (1.0 + ks) - (ks * ks + 2.0 * ks).sqrt();
        out.push(rho_bg[i] * e + r_inf * (1.0 - e));
    }
    out
}

/// Scene reflectance over the spectral grid: sunlit crowns, cast crown
/// shadow at half understory brightness, and open understory.
pub fn forest_model(v: &PhysVars, f: &FixedVars, pack: &CoefficientPack) -> Vec<f64> {
    let (rho_leaf, t_leaf) = leaf_model(v, f, pack);
    let soil = soil_spectrum(pack, f.psoil);
    let under = canopy_layer(&rho_leaf, &t_leaf, v.laiu, &soil, f.tts);
    let crown = canopy_layer(&rho_leaf, &t_leaf, v.lai / v.fc, &under, f.tts);

    let halft = 0.5 * f.tts.to_radians().tan();
    let s_raw = v.fc * (v.h / v.cd) * halft;
    let s_g = s_raw.max(0.0).min(1.0 - v.fc);
    let half_s = s_g * 0.5;
    let gap = (1.0 - v.fc) - s_g;

    (0..pack.len())
        .map(|i| (crown[i] * v.fc + under[i] * half_s) + under[i] * gap)
        .collect()
}
