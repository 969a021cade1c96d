//! Positions, array layouts, effective angles and array-response vectors.
//!
//! Conventions used throughout the crate:
//! - every array lies along `y` (ULA) or in the `y-o-z` plane (URA);
//! - an effective angle is the inter-element phase progression,
//!   `u = 2π (d/λ) Δy/‖Δ‖`, `v = 2π (d/λ) Δz/‖Δ‖`, where `Δ` points from the
//!   array towards the far end of the link (for both arrival and departure);
//! - URA vectors are flattened y-major: index `iy * m_z + iz`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{CVector, Complex64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate direction: points coincide")]
    DegenerateDirection,
    #[error("invalid array layout: {0}")]
    InvalidLayout(String),
}

/// Cartesian position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, other: &Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &Vec3) -> f64 {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, rhs: f64) -> Vec3 {
        Vec3::new(self.x * rhs, self.y * rhs, self.z * rhs)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

fn half_wavelength() -> f64 {
    0.5
}

/// Uniform linear array along the `y` axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UlaGeometry {
    pub n_elements: usize,
    /// Element spacing in wavelengths.
    #[serde(default = "half_wavelength")]
    pub spacing: f64,
}

impl UlaGeometry {
    pub fn new(n_elements: usize) -> Result<Self, GeometryError> {
        Self::with_spacing(n_elements, 0.5)
    }

    pub fn with_spacing(n_elements: usize, spacing: f64) -> Result<Self, GeometryError> {
        let g = Self { n_elements, spacing };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.n_elements == 0 {
            return Err(GeometryError::InvalidLayout("ULA needs at least one element".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(GeometryError::InvalidLayout("ULA spacing must be positive".into()));
        }
        Ok(())
    }

    /// Phase progression per unit direction cosine, `2π d/λ`.
    pub fn phase_scale(&self) -> f64 {
        2.0 * PI * self.spacing
    }

    pub fn steering(&self, u: f64) -> CVector {
        ula_steering(u, self.n_elements)
    }
}

/// Uniform rectangular array in the `y-o-z` plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UraGeometry {
    pub m_y: usize,
    pub m_z: usize,
    /// Element spacing in wavelengths.
    #[serde(default = "half_wavelength")]
    pub spacing: f64,
}

impl UraGeometry {
    pub fn new(m_y: usize, m_z: usize) -> Result<Self, GeometryError> {
        let g = Self { m_y, m_z, spacing: 0.5 };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.m_y == 0 || self.m_z == 0 {
            return Err(GeometryError::InvalidLayout("URA needs at least one element per axis".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(GeometryError::InvalidLayout("URA spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn n_elements(&self) -> usize {
        self.m_y * self.m_z
    }

    pub fn phase_scale(&self) -> f64 {
        2.0 * PI * self.spacing
    }

    pub fn steering(&self, angles: EffectiveAnglePair) -> CVector {
        ura_steering(angles, self)
    }
}

/// Effective angles `(u, v)` along the `y` and `z` axes, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EffectiveAnglePair {
    pub u: f64,
    pub v: f64,
}

impl EffectiveAnglePair {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Distance between two pairs with each coordinate wrapped onto
    /// `(-π, π]`, since `u` and `u ± 2π` give the same steering vector.
    pub fn wrapped_distance(&self, other: &EffectiveAnglePair) -> f64 {
        let du = wrap_angle(self.u - other.u);
        let dv = wrap_angle(self.v - other.v);
        du.hypot(dv)
    }
}

/// Wraps an angle onto `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// ULA response `[1, e^{ju}, ..., e^{j(n-1)u}]^T`.
pub fn ula_steering(u: f64, n: usize) -> CVector {
    CVector::from_iterator(n, (0..n).map(|k| Complex64::from_polar(1.0, k as f64 * u)))
}

/// URA response, the Kronecker product of the `y` and `z` ULA factors.
pub fn ura_steering(angles: EffectiveAnglePair, g: &UraGeometry) -> CVector {
    let ay = ula_steering(angles.u, g.m_y);
    let az = ula_steering(angles.v, g.m_z);
    CVector::from_iterator(
        g.m_y * g.m_z,
        (0..g.m_y).flat_map(|iy| {
            let ay_i = ay[iy];
            az.iter().map(move |z| ay_i * z).collect::<Vec<_>>()
        }),
    )
}

/// Unit direction from `from` towards `to`.
pub fn unit_direction(from: &Vec3, to: &Vec3) -> Result<Vec3, GeometryError> {
    let d = *to - *from;
    let n = d.norm();
    if !(n > 1e-12) {
        return Err(GeometryError::DegenerateDirection);
    }
    Ok(d * (1.0 / n))
}

/// Half-wavelength effective angles of the direction from `from` to `to`.
pub fn effective_angles_between(from: &Vec3, to: &Vec3) -> Result<EffectiveAnglePair, GeometryError> {
    effective_angles_scaled(from, to, PI)
}

/// Effective angles with an explicit phase scale `2π d/λ`.
pub fn effective_angles_scaled(from: &Vec3, to: &Vec3, phase_scale: f64) -> Result<EffectiveAnglePair, GeometryError> {
    let dir = unit_direction(from, to)?;
    Ok(EffectiveAnglePair::new(phase_scale * dir.y, phase_scale * dir.z))
}

/// Effective angle of departure at the UE towards `target`. Equals the
/// negated arrival angle `u` seen at `target` from the UE.
pub fn ue_effective_aod(ue: &Vec3, target: &Vec3) -> Result<f64, GeometryError> {
    Ok(effective_angles_between(ue, target)?.u)
}

/// Fixed deployment: the BS, the reflecting sub-surface (index 0) and the
/// two sensing sub-surfaces (indices 1 and 2), with their array layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bs_pos: Vec3,
    /// `[reflecting, sensing #2, sensing #3]`.
    pub ris_pos: [Vec3; 3],
    pub bs_array: UlaGeometry,
    pub ue_array: UlaGeometry,
    pub reflect_array: UraGeometry,
    pub sensing_array: UraGeometry,
}

impl Scene {
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.bs_array.validate()?;
        self.ue_array.validate()?;
        self.reflect_array.validate()?;
        self.sensing_array.validate()?;
        let all = [self.bs_pos, self.ris_pos[0], self.ris_pos[1], self.ris_pos[2]];
        if all.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::InvalidLayout("non-finite position".into()));
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i].distance(&all[j]) < 1e-9 {
                    return Err(GeometryError::DegenerateDirection);
                }
            }
        }
        Ok(())
    }

    pub fn reflect_pos(&self) -> Vec3 {
        self.ris_pos[0]
    }

    /// Position of sensing sub-surface `k` in `{0, 1}` (i.e. surfaces 2 and 3).
    pub fn sensing_pos(&self, k: usize) -> Vec3 {
        self.ris_pos[1 + k]
    }
}
