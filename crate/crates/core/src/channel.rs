//! Path loss, random complex gains and rank-1 LoS channel matrices.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array_geometry::{
    effective_angles_scaled, EffectiveAnglePair, GeometryError, Scene, UlaGeometry, UraGeometry, Vec3,
};
use crate::{CMatrix, CVector, Complex64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("distance {0} m is inside the 1 m reference distance")]
    InsideReferenceDistance(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid path-loss model: {0}")]
    InvalidModel(String),
}

/// Log-distance path-loss model referenced at 1 m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathlossModel {
    /// Loss at the 1 m reference distance, dB.
    pub pl0_db: f64,
    /// RIS to BS exponent.
    pub exp_r2b: f64,
    /// UE to RIS exponent.
    pub exp_u2r: f64,
    /// RIS sub-surface to sub-surface exponent.
    pub exp_r2r: f64,
}

impl Default for PathlossModel {
    fn default() -> Self {
        Self { pl0_db: 30.0, exp_r2b: 2.3, exp_u2r: 2.2, exp_r2r: 2.1 }
    }
}

impl PathlossModel {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.pl0_db > 0.0) {
            return Err(ChannelError::InvalidModel("pl0_db must be positive".into()));
        }
        for e in [self.exp_r2b, self.exp_u2r, self.exp_r2r] {
            if !(1.5..=4.0).contains(&e) {
                return Err(ChannelError::InvalidModel(format!("exponent {e} outside [1.5, 4]")));
            }
        }
        Ok(())
    }
}

/// `10^(-PL0/10) d^(-exponent)` for `d >= 1 m`.
pub fn linear_path_gain(d: f64, exponent: f64, model: &PathlossModel) -> Result<f64, ChannelError> {
    if !(d >= 1.0) {
        return Err(ChannelError::InsideReferenceDistance(d));
    }
    Ok(10f64.powf(-model.pl0_db / 10.0) * d.powf(-exponent))
}

/// Complex link amplitude; `|value|^2` is the linear path gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexGain(pub Complex64);

impl ComplexGain {
    pub fn power(&self) -> f64 {
        self.0.norm_sqr()
    }
}

/// Gain with deterministic magnitude and a uniform random phase.
pub fn draw_gain<R: Rng + ?Sized>(
    d: f64,
    exponent: f64,
    model: &PathlossModel,
    rng: &mut R,
) -> Result<ComplexGain, ChannelError> {
    let mag = linear_path_gain(d, exponent, model)?.sqrt();
    let phase = rng.random_range(0.0..2.0 * PI);
    Ok(ComplexGain(Complex64::from_polar(mag, phase)))
}

/// Effective angle(s) at one end of a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkAngles {
    Linear(f64),
    Planar(EffectiveAnglePair),
}

/// Rank-1 LoS channel `gain * rx_steering * tx_steering^H`.
#[derive(Debug, Clone)]
pub struct LosChannel {
    pub matrix: CMatrix,
    pub gain: ComplexGain,
    pub rx_angles: LinkAngles,
    pub tx_angles: LinkAngles,
}

impl LosChannel {
    fn from_steering(rx: &CVector, tx: &CVector, gain: ComplexGain, rx_angles: LinkAngles, tx_angles: LinkAngles) -> Self {
        let matrix = (rx * tx.adjoint()) * gain.0;
        Self { matrix, gain, rx_angles, tx_angles }
    }
}

/// UE (ULA) to RIS sub-surface (URA); shape `(m_y m_z) x n_ue`.
pub fn build_u2r(
    ue_geom: &UlaGeometry,
    sub_geom: &UraGeometry,
    ue_pos: &Vec3,
    sub_pos: &Vec3,
    gain: ComplexGain,
) -> Result<LosChannel, ChannelError> {
    let aoa = effective_angles_scaled(sub_pos, ue_pos, sub_geom.phase_scale())?;
    let aod = effective_angles_scaled(ue_pos, sub_pos, ue_geom.phase_scale())?.u;
    Ok(LosChannel::from_steering(
        &sub_geom.steering(aoa),
        &ue_geom.steering(aod),
        gain,
        LinkAngles::Planar(aoa),
        LinkAngles::Linear(aod),
    ))
}

/// Reflecting sub-surface (URA) to BS (ULA); shape `n_bs x (m_y m_z)`.
pub fn build_r2b(
    bs_geom: &UlaGeometry,
    ris_geom: &UraGeometry,
    bs_pos: &Vec3,
    ris_pos: &Vec3,
    gain: ComplexGain,
) -> Result<LosChannel, ChannelError> {
    let aoa = effective_angles_scaled(bs_pos, ris_pos, bs_geom.phase_scale())?.u;
    let aod = effective_angles_scaled(ris_pos, bs_pos, ris_geom.phase_scale())?;
    Ok(LosChannel::from_steering(
        &bs_geom.steering(aoa),
        &ris_geom.steering(aod),
        gain,
        LinkAngles::Linear(aoa),
        LinkAngles::Planar(aod),
    ))
}

/// Reflecting sub-surface to a sensing sub-surface; shape `M_s x M_1`.
pub fn build_r2r(
    ris_geom: &UraGeometry,
    sub_geom: &UraGeometry,
    ris_pos: &Vec3,
    sub_pos: &Vec3,
    gain: ComplexGain,
) -> Result<LosChannel, ChannelError> {
    let aoa = effective_angles_scaled(sub_pos, ris_pos, sub_geom.phase_scale())?;
    let aod = effective_angles_scaled(ris_pos, sub_pos, ris_geom.phase_scale())?;
    Ok(LosChannel::from_steering(
        &sub_geom.steering(aoa),
        &ris_geom.steering(aod),
        gain,
        LinkAngles::Planar(aoa),
        LinkAngles::Planar(aod),
    ))
}

/// All channels of one coherence block.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    /// Reflecting sub-surface to BS.
    pub r2b: LosChannel,
    /// UE to `[reflecting, sensing #2, sensing #3]`.
    pub u2r: [LosChannel; 3],
    /// Reflecting sub-surface to `[sensing #2, sensing #3]`.
    pub r2r: [LosChannel; 2],
}

impl ChannelSet {
    /// Draws one block. Sub-surface to sub-surface distances below the
    /// reference distance are evaluated at the reference distance.
    pub fn draw<R: Rng + ?Sized>(
        scene: &Scene,
        ue_pos: &Vec3,
        pathloss: &PathlossModel,
        rng: &mut R,
    ) -> Result<Self, ChannelError> {
        let refl = scene.reflect_pos();
        let g = draw_gain(scene.bs_pos.distance(&refl), pathloss.exp_r2b, pathloss, rng)?;
        let r2b = build_r2b(&scene.bs_array, &scene.reflect_array, &scene.bs_pos, &refl, g)?;

        let mut u2r = Vec::with_capacity(3);
        for (i, pos) in scene.ris_pos.iter().enumerate() {
            let geom = if i == 0 { &scene.reflect_array } else { &scene.sensing_array };
            let g = draw_gain(ue_pos.distance(pos), pathloss.exp_u2r, pathloss, rng)?;
            u2r.push(build_u2r(&scene.ue_array, geom, ue_pos, pos, g)?);
        }

        let mut r2r = Vec::with_capacity(2);
        for k in 0..2 {
            let pos = scene.sensing_pos(k);
            let d = refl.distance(&pos).max(1.0);
            let g = draw_gain(d, pathloss.exp_r2r, pathloss, rng)?;
            r2r.push(build_r2r(&scene.reflect_array, &scene.sensing_array, &refl, &pos, g)?);
        }

        Ok(Self {
            r2b,
            u2r: u2r.try_into().expect("three U2R links"),
            r2r: r2r.try_into().expect("two R2R links"),
        })
    }

    /// Effective UE-to-BS channel `H_R2B diag(xi) H_U2R,1`.
    pub fn effective(&self, xi: &CVector) -> CMatrix {
        let mut scaled = self.u2r[0].matrix.clone();
        for (mut row, x) in scaled.row_iter_mut().zip(xi.iter()) {
            row *= *x;
        }
        &self.r2b.matrix * scaled
    }
}
