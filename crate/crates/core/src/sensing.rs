//! Uplink localization at the two sensing sub-surfaces.
//!
//! Each sensing sub-surface sees two coherent wavefronts: the direct UE path
//! and the path re-radiated by the reflecting sub-surface. The pipeline is
//! forward-backward spatial smoothing (FBSS) to decorrelate them, TLS-ESPRIT
//! per axis, MUSIC-residual pairing of the `u` and `v` estimates, rejection of
//! the pair that matches the known reflecting-surface direction, and finally
//! least-squares intersection of the two UE bearings.

use std::fmt;

use thiserror::Error;

use crate::array_geometry::{effective_angles_scaled, ula_steering, EffectiveAnglePair, Scene, UraGeometry, Vec3};
use crate::linalg::{all_finite, eigenvalues_2x2, hermitian_eigen_desc, inverse_2x2};
use crate::signal::SnapshotBatch;
use crate::{CMatrix, CVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensingError {
    #[error("invalid micro-surface configuration: {0}")]
    InvalidConfig(String),
    #[error("snapshot batch has {got} rows, sub-surface has {want} elements")]
    DimensionMismatch { got: usize, want: usize },
    #[error("no snapshots supplied")]
    NoSnapshots,
    #[error("correlation matrix has non-finite entries")]
    NonFinite,
    #[error("TLS degenerate: V22 is singular")]
    TlsDegenerate,
    #[error("rays parallel")]
    RaysParallel,
    #[error("non-physical angles: direction cosines ({0}, {1}) exceed the unit disc")]
    NonPhysicalAngles(f64, f64),
    #[error("geometry: {0}")]
    Geometry(#[from] crate::array_geometry::GeometryError),
}

/// Pipeline stage reported by [`sense_location`] on failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensingStage {
    Covariance,
    Subspaces,
    EspritY,
    EspritZ,
    Disambiguation,
    Triangulation,
}

impl fmt::Display for SensingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SensingStage::Covariance => "covariance",
            SensingStage::Subspaces => "subspaces",
            SensingStage::EspritY => "esprit-y",
            SensingStage::EspritZ => "esprit-z",
            SensingStage::Disambiguation => "disambiguation",
            SensingStage::Triangulation => "triangulation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("localization failed at {stage}{}: {source}", sub_surface.map(|s| format!(" (sub-surface {s})")).unwrap_or_default())]
pub struct SensingFailure {
    pub stage: SensingStage,
    /// Sub-surface number (2 or 3), when the stage is per sub-surface.
    pub sub_surface: Option<usize>,
    pub source: SensingError,
}

/// Micro-surface (smoothing sub-array) layout inside a `m_y x m_z` sensing
/// sub-surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroSurfaceConfig {
    pub m_y: usize,
    pub m_z: usize,
    pub q_y: usize,
    pub q_z: usize,
}

impl MicroSurfaceConfig {
    pub fn new(sub: &UraGeometry, q_y: usize, q_z: usize) -> Result<Self, SensingError> {
        let cfg = Self { m_y: sub.m_y, m_z: sub.m_z, q_y, q_z };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(m_y - 1) x (m_z - 1)` micro-surfaces, four of them.
    pub fn for_surface(sub: &UraGeometry) -> Result<Self, SensingError> {
        Self::new(sub, sub.m_y.saturating_sub(1), sub.m_z.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<(), SensingError> {
        if self.q_y == 0 || self.q_z == 0 || self.q_y > self.m_y || self.q_z > self.m_z {
            return Err(SensingError::InvalidConfig(format!(
                "micro-surface {}x{} does not fit in {}x{}",
                self.q_y, self.q_z, self.m_y, self.m_z
            )));
        }
        if self.q_y * self.q_z <= 2 {
            return Err(SensingError::InvalidConfig("micro-surface needs more than 2 elements".into()));
        }
        Ok(())
    }

    pub fn n_micro(&self) -> usize {
        (self.m_y - self.q_y + 1) * (self.m_z - self.q_z + 1)
    }

    pub fn l_micro(&self) -> usize {
        self.q_y * self.q_z
    }

    /// Parent-surface element indices of the micro-surface at offset
    /// `(oy, oz)`, in y-major order.
    fn micro_indices(&self, oy: usize, oz: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.q_y).flat_map(move |a| (0..self.q_z).map(move |b| (oy + a) * self.m_z + oz + b))
    }

    /// Micro-surface response for effective angles `(u, v)`.
    pub fn micro_steering(&self, u: f64, v: f64) -> CVector {
        ula_steering(u, self.q_y).kronecker(&ula_steering(v, self.q_z))
    }
}

/// FBSS auto-correlation estimate.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub r_hat: CMatrix,
    pub phase_index: u8,
}

/// Signal (two leading eigenvectors) and noise subspaces.
#[derive(Debug, Clone)]
pub struct SubspacePair {
    pub u_s: CMatrix,
    pub u_n: CMatrix,
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// One `(u, v)` arrival estimate with its MUSIC residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoaPair {
    pub angles: EffectiveAnglePair,
    pub music_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Y,
    Z,
}

/// Forward-backward smoothed correlation over all columns of `batches`,
/// normalized by `2 T N_micro` with `T` the pooled slot count.
pub fn fbss_covariance(batches: &[&SnapshotBatch], cfg: &MicroSurfaceConfig) -> Result<CorrelationMatrix, SensingError> {
    cfg.validate()?;
    let want = cfg.m_y * cfg.m_z;
    let mut total_slots = 0;
    for b in batches {
        if b.samples.nrows() != want {
            return Err(SensingError::DimensionMismatch { got: b.samples.nrows(), want });
        }
        total_slots += b.samples.ncols();
    }
    if total_slots == 0 {
        return Err(SensingError::NoSnapshots);
    }
    let l = cfg.l_micro();
    let n_cols = total_slots * cfg.n_micro();
    let mut fwd = CMatrix::zeros(l, n_cols);
    let mut col = 0;
    for b in batches {
        for t in 0..b.samples.ncols() {
            for oy in 0..=(cfg.m_y - cfg.q_y) {
                for oz in 0..=(cfg.m_z - cfg.q_z) {
                    for (k, idx) in cfg.micro_indices(oy, oz).enumerate() {
                        fwd[(k, col)] = b.samples[(idx, t)];
                    }
                    col += 1;
                }
            }
        }
    }
    // J x^*: reversed, conjugated micro-vectors.
    let bwd = CMatrix::from_fn(l, n_cols, |r, c| fwd[(l - 1 - r, c)].conj());
    let r_hat = (&fwd * fwd.adjoint() + &bwd * bwd.adjoint()).unscale(2.0 * n_cols as f64);
    let phase_index = batches.iter().map(|b| b.phase_index).max().unwrap_or(0);
    Ok(CorrelationMatrix { r_hat, phase_index })
}

/// Eigen-split of the correlation matrix into a 2-dimensional signal
/// subspace and the remaining noise subspace.
pub fn signal_noise_subspaces(r: &CorrelationMatrix) -> Result<SubspacePair, SensingError> {
    if !all_finite(&r.r_hat) {
        return Err(SensingError::NonFinite);
    }
    let l = r.r_hat.nrows();
    if l < 3 {
        return Err(SensingError::InvalidConfig("need at least 3 elements per micro-surface".into()));
    }
    let (eigenvalues, vectors) = hermitian_eigen_desc(&r.r_hat);
    Ok(SubspacePair {
        u_s: vectors.columns(0, 2).into_owned(),
        u_n: vectors.columns(2, l - 2).into_owned(),
        eigenvalues,
    })
}

/// TLS-ESPRIT along one axis of the first micro-surface. Returns the two
/// effective angles in ascending order.
pub fn esprit_axis(sub: &SubspacePair, cfg: &MicroSurfaceConfig, axis: Axis) -> Result<[f64; 2], SensingError> {
    let (q_y, q_z) = (cfg.q_y, cfg.q_z);
    let shift_len = match axis {
        Axis::Y => q_y,
        Axis::Z => q_z,
    };
    if shift_len < 2 {
        return Err(SensingError::InvalidConfig(format!("axis {axis:?} needs at least 2 elements")));
    }
    // Rows of the two auxiliary sub-surfaces, shifted by one element along `axis`.
    let (rows1, rows2): (Vec<usize>, Vec<usize>) = match axis {
        Axis::Y => (0..q_y - 1)
            .flat_map(|a| (0..q_z).map(move |b| (a * q_z + b, (a + 1) * q_z + b)))
            .unzip(),
        Axis::Z => (0..q_y)
            .flat_map(|a| (0..q_z - 1).map(move |b| (a * q_z + b, a * q_z + b + 1)))
            .unzip(),
    };
    let aux = rows1.len();
    let mut stacked = CMatrix::zeros(aux, 4);
    for (r, (&i1, &i2)) in rows1.iter().zip(rows2.iter()).enumerate() {
        for c in 0..2 {
            stacked[(r, c)] = sub.u_s[(i1, c)];
            stacked[(r, c + 2)] = sub.u_s[(i2, c)];
        }
    }
    let c_mat = stacked.adjoint() * &stacked;
    let (_, v) = hermitian_eigen_desc(&c_mat);
    let v12 = v.view((0, 2), (2, 2)).into_owned();
    let v22 = v.view((2, 2), (2, 2)).into_owned();
    let v22_inv = inverse_2x2(&v22).ok_or(SensingError::TlsDegenerate)?;
    let phi = -(v12 * v22_inv);
    let mut angles = eigenvalues_2x2(&phi).map(|z| z.arg());
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// MUSIC null-spectrum `‖U_N^H b(u, v)‖²` on the micro-surface.
pub fn music_residual(sub: &SubspacePair, cfg: &MicroSurfaceConfig, u: f64, v: f64) -> f64 {
    (sub.u_n.adjoint() * cfg.micro_steering(u, v)).norm_squared()
}

/// Pairs `u` candidates with `v` candidates by choosing, between the
/// identity and the swapped assignment, the one with the smaller total MUSIC
/// residual. Ties (relative 1e-9) keep the identity order.
pub fn music_pair(u: [f64; 2], v: [f64; 2], sub: &SubspacePair, cfg: &MicroSurfaceConfig) -> [AoaPair; 2] {
    let f = |a: f64, b: f64| music_residual(sub, cfg, a, b);
    let ident = [f(u[0], v[0]), f(u[1], v[1])];
    let swap = [f(u[0], v[1]), f(u[1], v[0])];
    let (si, ss) = (ident[0] + ident[1], swap[0] + swap[1]);
    let use_swap = ss < si && (si - ss) > 1e-9 * si.max(1e-12);
    let mk = |a: f64, b: f64, r: f64| AoaPair { angles: EffectiveAnglePair::new(a, b), music_residual: r };
    if use_swap {
        [mk(u[0], v[1], swap[0]), mk(u[1], v[0], swap[1])]
    } else {
        [mk(u[0], v[0], ident[0]), mk(u[1], v[1], ident[1])]
    }
}

/// Result of rejecting the reflecting-surface arrival.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disambiguation {
    pub survivor: AoaPair,
    /// Both candidates were equally close to the known reflect direction.
    pub degenerate: bool,
}

/// Drops the candidate nearest (wrapped Euclidean distance in `(u, v)`) to the
/// known arrival from the reflecting sub-surface and returns the other.
pub fn disambiguate(
    pairs: &[AoaPair; 2],
    sub_pos: &Vec3,
    ris_pos: &Vec3,
    phase_scale: f64,
) -> Result<Disambiguation, SensingError> {
    let known = effective_angles_scaled(sub_pos, ris_pos, phase_scale)?;
    let d0 = pairs[0].angles.wrapped_distance(&known);
    let d1 = pairs[1].angles.wrapped_distance(&known);
    let degenerate = (d0 - d1).abs() <= 1e-12 * d0.max(d1).max(1.0);
    if degenerate {
        log::warn!("disambiguation degenerate: both candidates match the reflect direction");
    }
    let survivor = if d0 <= d1 { pairs[1] } else { pairs[0] };
    Ok(Disambiguation { survivor, degenerate })
}

/// Unit bearing `(n_x, u/s, v/s)` with `n_x >= 0` (service half-space).
pub fn bearing(angles: &EffectiveAnglePair, phase_scale: f64) -> Result<Vec3, SensingError> {
    let cy = angles.u / phase_scale;
    let cz = angles.v / phase_scale;
    let s = cy * cy + cz * cz;
    if s > 1.0 + 1e-6 {
        return Err(SensingError::NonPhysicalAngles(cy, cz));
    }
    Ok(Vec3::new((1.0 - s).max(0.0).sqrt(), cy, cz))
}

/// Least-squares intersection (midpoint of the common perpendicular) of the
/// bearings from two sensing sub-surfaces.
pub fn triangulate(
    q2: &Vec3,
    a2: &EffectiveAnglePair,
    q3: &Vec3,
    a3: &EffectiveAnglePair,
    phase_scale: f64,
) -> Result<Vec3, SensingError> {
    let d1 = bearing(a2, phase_scale)?;
    let d2 = bearing(a3, phase_scale)?;
    if d1.cross(&d2).norm() < 1e-9 {
        return Err(SensingError::RaysParallel);
    }
    let w0 = *q2 - *q3;
    let (a, b, c) = (d1.dot(&d1), d1.dot(&d2), d2.dot(&d2));
    let (d, e) = (d1.dot(&w0), d2.dot(&w0));
    let denom = a * c - b * b;
    let t = (b * e - c * d) / denom;
    let s = (a * e - b * d) / denom;
    let p1 = *q2 + d1 * t;
    let p2 = *q3 + d2 * s;
    Ok((p1 + p2) * 0.5)
}

/// Sensed UE location and the bearings it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationEstimate {
    pub position: Vec3,
    /// `(sub-surface number, surviving pair)` for sub-surfaces 2 and 3.
    pub aoa_pairs: [(usize, AoaPair); 2],
    pub phase_index: u8,
    pub degenerate: bool,
}

fn at(stage: SensingStage, sub_surface: Option<usize>) -> impl FnOnce(SensingError) -> SensingFailure {
    move |source| SensingFailure { stage, sub_surface, source }
}

/// Per-sub-surface part of the pipeline: the two paired `(u, v)` candidates.
pub fn estimate_pairs(batches: &[&SnapshotBatch], cfg: &MicroSurfaceConfig, sub_no: usize) -> Result<[AoaPair; 2], SensingFailure> {
    let r = fbss_covariance(batches, cfg).map_err(at(SensingStage::Covariance, Some(sub_no)))?;
    let sub = signal_noise_subspaces(&r).map_err(at(SensingStage::Subspaces, Some(sub_no)))?;
    let u = esprit_axis(&sub, cfg, Axis::Y).map_err(at(SensingStage::EspritY, Some(sub_no)))?;
    let v = esprit_axis(&sub, cfg, Axis::Z).map_err(at(SensingStage::EspritZ, Some(sub_no)))?;
    Ok(music_pair(u, v, &sub, cfg))
}

/// Full localization: `batches[k]` holds the snapshot batches (pooled) of
/// sensing sub-surface `k + 2`.
pub fn sense_location(
    batches: [&[&SnapshotBatch]; 2],
    cfg: &MicroSurfaceConfig,
    scene: &Scene,
    phase_index: u8,
) -> Result<LocationEstimate, SensingFailure> {
    let scale = scene.sensing_array.phase_scale();
    let mut survivors = Vec::with_capacity(2);
    let mut degenerate = false;
    for (k, b) in batches.iter().enumerate() {
        let sub_no = k + 2;
        let pairs = estimate_pairs(b, cfg, sub_no)?;
        let d = disambiguate(&pairs, &scene.sensing_pos(k), &scene.reflect_pos(), scale)
            .map_err(at(SensingStage::Disambiguation, Some(sub_no)))?;
        degenerate |= d.degenerate;
        survivors.push((sub_no, d.survivor));
    }
    let position = triangulate(
        &scene.sensing_pos(0),
        &survivors[0].1.angles,
        &scene.sensing_pos(1),
        &survivors[1].1.angles,
        scale,
    )
    .map_err(at(SensingStage::Triangulation, None))?;
    Ok(LocationEstimate {
        position,
        aoa_pairs: [survivors[0], survivors[1]],
        phase_index,
        degenerate,
    })
}
