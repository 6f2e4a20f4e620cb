//! Tape-based evaluation of the forest reflectance model. Mirrors
//! [`super::reference`] operation for operation; the equivalence of the two
//! paths is pinned down by tests and is part of the public contract.

use std::rc::Rc;

use crate::ad::{AdResult, GatherPlan, Tape, Var};
use crate::latent::{cd_to_h_var, fc_to_cd_var, scale_component, VarRanges, LATENT_CLAMP};

use super::{reference, CoefficientPack, FixedVars, PhysVars};

/// Coefficient pack columns lifted onto a tape as constant vector nodes.
/// Lift once per tape and reuse across samples.
pub struct PackNodes<'t> {
    pub refractive: Var<'t>,
    pub k_cab: Var<'t>,
    pub k_cw: Var<'t>,
    pub k_cm: Var<'t>,
    /// car·k_car + anth·k_anth + cbrown·k_brown for the fixed constituents.
    pub fixed_absorption: Var<'t>,
    /// psoil-blended background soil spectrum.
    pub soil: Var<'t>,
}

pub fn lift_pack<'t>(tape: &'t Tape, pack: &CoefficientPack) -> AdResult<PackNodes<'t>> {
    lift_pack_with(tape, pack, &FixedVars::default())
}

pub fn lift_pack_with<'t>(
    tape: &'t Tape,
    pack: &CoefficientPack,
    f: &FixedVars,
) -> AdResult<PackNodes<'t>> {
    Ok(PackNodes {
        refractive: tape.vector(&pack.refractive)?,
        k_cab: tape.vector(&pack.k_cab)?,
        k_cw: tape.vector(&pack.k_cw)?,
        k_cm: tape.vector(&pack.k_cm)?,
        fixed_absorption: tape.vector(&reference::fixed_absorption(f, pack))?,
        soil: tape.vector(&reference::soil_spectrum(pack, f.psoil))?,
    })
}

/// The seven inferred variables plus derived crown geometry as tape nodes.
pub struct DiffPhysVars<'t> {
    pub n: Var<'t>,
    pub cab: Var<'t>,
    pub cw: Var<'t>,
    pub cm: Var<'t>,
    pub lai: Var<'t>,
    pub laiu: Var<'t>,
    pub fc: Var<'t>,
    pub cd: Var<'t>,
    pub h: Var<'t>,
}

impl<'t> DiffPhysVars<'t> {
    /// Lifts each inferred variable as a leaf and rebuilds crown geometry on
    /// the tape so gradients with respect to fc flow through cd and h.
    pub fn from_values(tape: &'t Tape, v: &PhysVars) -> AdResult<Self> {
        let [n, cab, cw, cm, lai, laiu, fc] = v.inferred();
        Self::from_leaves(
            tape.scalar(n)?,
            tape.scalar(cab)?,
            tape.scalar(cw)?,
            tape.scalar(cm)?,
            tape.scalar(lai)?,
            tape.scalar(laiu)?,
            tape.scalar(fc)?,
            stem_density_of(v),
        )
    }

    /// Builds physical nodes from a length-7 latent vector node: clamp into
    /// the open unit interval, scale to ranges, derive cd and h.
    pub fn from_latent_vector(
        lam: Var<'t>,
        ranges: &VarRanges,
        sd: f64,
    ) -> AdResult<Self> {
        let comp = |i: usize| -> AdResult<Var<'t>> {
            let c = lam.component(i)?.clamp_const(LATENT_CLAMP.0, LATENT_CLAMP.1)?;
            scale_component(c, ranges.ranges[i])
        };
        Self::from_leaves(
            comp(0)?,
            comp(1)?,
            comp(2)?,
            comp(3)?,
            comp(4)?,
            comp(5)?,
            comp(6)?,
            sd,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_leaves(
        n: Var<'t>,
        cab: Var<'t>,
        cw: Var<'t>,
        cm: Var<'t>,
        lai: Var<'t>,
        laiu: Var<'t>,
        fc: Var<'t>,
        sd: f64,
    ) -> AdResult<Self> {
        let cd = fc_to_cd_var(fc, sd)?;
        let h = cd_to_h_var(cd)?;
        Ok(Self {
            n,
            cab,
            cw,
            cm,
            lai,
            laiu,
            fc,
            cd,
            h,
        })
    }
}

fn stem_density_of(v: &PhysVars) -> f64 {
    // cd = 2·sqrt(fc·10⁴/(π·sd)) inverted for sd.
    4.0 * v.fc * 10_000.0 / (std::f64::consts::PI * v.cd * v.cd)
}

/// Plate-model leaf reflectance and transmittance as grid-length nodes.
pub fn leaf_model<'t>(
    tape: &'t Tape,
    v: &DiffPhysVars<'t>,
    nodes: &PackNodes<'t>,
) -> AdResult<(Var<'t>, Var<'t>)> {
    let mix = v
        .cab
        .mul(nodes.k_cab)?
        .add(v.cw.mul(nodes.k_cw)?)?
        .add(v.cm.mul(nodes.k_cm)?)?
        .add(nodes.fixed_absorption)?;
    let k = mix.div(v.n)?.replace_zero_with_epsilon()?;

    let tau = k
        .one_minus()?
        .mul(k.neg()?.exp()?)?
        .add(k.square()?.mul(k.exp1()?)?)?;
    let tau_sq = tau.square()?;

    let nr = nodes.refractive;
    let rs = nr.affine(1.0, -1.0)?.div(nr.affine(1.0, 1.0)?)?.square()?;
    let rs_sq = rs.square()?;
    let denom = rs_sq.mul(tau_sq)?.one_minus()?;
    let c = rs.one_minus()?.square()?.mul(rs)?;
    let rho1 = rs.add(tau_sq.mul(c)?.div(denom)?)?;
    let d = rs.one_minus()?.square()?;
    let t1 = tau.mul(d)?.div(denom)?;

    let rho1_sq = rho1.square()?;
    let t1_sq = t1.square()?;
    let inner = t1_sq.sub(rho1_sq)?.affine(1.0, -1.0)?;
    let disc = inner.square()?.sub(rho1_sq.affine(4.0, 0.0)?)?;
    for &d in &disc.value() {
        if d < 0.0 {
            super::record_delta_clamp();
        }
    }
    let zero = tape.scalar(0.0)?;
    let delta = disc.max(zero)?.sqrt()?;

    let a = rho1_sq
        .sub(t1_sq)?
        .affine(1.0, 1.0)?
        .add(delta)?
        .div(rho1.affine(2.0, 0.0)?)?;
    let b = t1_sq
        .sub(rho1_sq)?
        .affine(1.0, 1.0)?
        .add(delta)?
        .div(t1.affine(2.0, 0.0)?)?;
    let one = tape.scalar(1.0)?;
    let a_inv = one.div(a)?;
    let bn = b.pow(v.n)?;
    let bn_inv = b.pow(v.n.neg()?)?;
    let denom_p = a.mul(bn)?.sub(a_inv.mul(bn_inv)?)?;
    let rho_n = bn.sub(bn_inv)?.div(denom_p)?;
    let t_n = a.sub(a_inv)?.div(denom_p)?;
    Ok((rho_n, t_n))
}

/// Homogeneous layer over a background, mirroring
/// [`reference::canopy_layer`].
pub fn canopy_layer<'t>(
    tape: &'t Tape,
    rho_leaf: Var<'t>,
    t_leaf: Var<'t>,
    lai: Var<'t>,
    rho_bg: Var<'t>,
    tts_deg: f64,
) -> AdResult<Var<'t>> {
    let k_ext = 0.5 / tts_deg.to_radians().cos();
    let m = -2.0 * k_ext;
    let e = lai.affine(m, 0.0)?.exp()?;

    let omega = rho_leaf.add(t_leaf)?;
    let floor = tape.scalar(1e-9)?;
    let omega_safe = omega.max(floor)?;
    let ks = omega_safe.one_minus()?.affine(2.0, 0.0)?.div(omega_safe)?;
    let r_inf = ks
        .affine(1.0, 1.0)?
        .sub(ks.square()?.add(ks.affine(2.0, 0.0)?)?.sqrt()?)?;
    rho_bg.mul(e)?.add(r_inf.mul(e.one_minus()?)?)
}

/// Scene reflectance over the full spectral grid.
pub fn forest_grid<'t>(
    tape: &'t Tape,
    v: &DiffPhysVars<'t>,
    f: &FixedVars,
    nodes: &PackNodes<'t>,
) -> AdResult<Var<'t>> {
    let (rho_leaf, t_leaf) = leaf_model(tape, v, nodes)?;
    let under = canopy_layer(tape, rho_leaf, t_leaf, v.laiu, nodes.soil, f.tts)?;
    let crown_lai = v.lai.div(v.fc)?;
    let crown = canopy_layer(tape, rho_leaf, t_leaf, crown_lai, under, f.tts)?;

    let halft = 0.5 * f.tts.to_radians().tan();
    let s_raw = v.fc.mul(v.h.div(v.cd)?)?.affine(halft, 0.0)?;
    let zero = tape.scalar(0.0)?;
    let one_minus_fc = v.fc.one_minus()?;
    let s_g = s_raw.max(zero)?.min(one_minus_fc)?;
    let half_s = s_g.affine(0.5, 0.0)?;
    let gap = one_minus_fc.sub(s_g)?;

    crown
        .mul(v.fc)?
        .add(under.mul(half_s)?)?
        .add(under.mul(gap)?)
}

/// Scene reflectance resampled to bands.
pub fn forest_bands<'t>(
    tape: &'t Tape,
    v: &DiffPhysVars<'t>,
    f: &FixedVars,
    nodes: &PackNodes<'t>,
    plan: &Rc<GatherPlan>,
) -> AdResult<Var<'t>> {
    forest_grid(tape, v, f, nodes)?.gather(plan)
}
