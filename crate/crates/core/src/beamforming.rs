//! Beamformer design for both protocol phases.
//!
//! Phase 1 uses MRT-MRC on the estimated effective channel. Phase 2 steers the
//! BS and the reflecting sub-surface in closed form from the sensed location
//! and chooses the UE precoder by trading the communication beam against the
//! two sensing beams, either through a semidefinite relaxation with Gaussian
//! randomization (S-SDR) or a particle swarm over three steered-beam weights
//! (S-MBS).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array_geometry::{effective_angles_scaled, ula_steering, GeometryError, Scene, Vec3};
use crate::channel::{linear_path_gain, ChannelError, PathlossModel};
use crate::linalg::{hermitian_eigen_desc, joint_column_basis, principal_eigenvector, quadratic_form, trace_inner};
use crate::signal::{BeamformerSet, EcsiEstimate, SignalError};
use crate::{CMatrix, CVector, Complex64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamformingError {
    #[error("null channel")]
    NullChannel,
    #[error("non-physical sensed position: {0}")]
    NonPhysicalPosition(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible balance constraint: {0}")]
    Infeasible(String),
    #[error("SDP solver did not converge after {iterations} iterations (relative gap {gap:e})")]
    NotConverged { iterations: usize, gap: f64 },
    #[error("degenerate weights: swarm collapsed to the zero vector")]
    DegenerateWeights,
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("beamformer: {0}")]
    Signal(#[from] SignalError),
}

type Result<T> = std::result::Result<T, BeamformingError>;

/// Phase-1 MRT-MRC: `w_ue` is the principal right singular vector of the
/// effective channel and `w_bs` the matching combiner. Returns `(w_ue, w_bs)`.
pub fn mrt_mrc(ecsi: &EcsiEstimate) -> Result<(CVector, CVector)> {
    let h = &ecsi.h_eff;
    if !(h.norm() > 0.0) || h.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(BeamformingError::NullChannel);
    }
    let (_, w_ue) = principal_eigenvector(&(h.adjoint() * h));
    let hw = h * &w_ue;
    let n = hw.norm();
    if !(n > 0.0) {
        return Err(BeamformingError::NullChannel);
    }
    Ok((w_ue, hw.unscale(n)))
}

/// Closed-form BS combiner and reflecting-surface phases for a UE at `ue_pos`.
/// Returns `(w_bs, xi)`.
pub fn closed_form_bs_ris(ue_pos: &Vec3, scene: &Scene) -> Result<(CVector, CVector)> {
    let refl = scene.reflect_pos();
    if !ue_pos.is_finite() || ue_pos.x <= refl.x {
        return Err(BeamformingError::NonPhysicalPosition(format!(
            "({}, {}, {}) is not in front of the surface",
            ue_pos.x, ue_pos.y, ue_pos.z
        )));
    }
    let u_bs = effective_angles_scaled(&scene.bs_pos, &refl, scene.bs_array.phase_scale())?.u;
    let n_bs = scene.bs_array.n_elements;
    let w_bs = ula_steering(u_bs, n_bs).unscale((n_bs as f64).sqrt());

    let ris_scale = scene.reflect_array.phase_scale();
    let to_bs = scene.reflect_array.steering(effective_angles_scaled(&refl, &scene.bs_pos, ris_scale)?);
    let to_ue = scene.reflect_array.steering(effective_angles_scaled(&refl, ue_pos, ris_scale)?);
    let xi = to_ue.zip_map(&to_bs, |a, b| a.conj() * b);
    Ok((w_bs, xi))
}

/// How the sensing-balance threshold `ε₁` is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BalanceThreshold {
    /// SNR-difference threshold `ε` between the two sensing sub-surfaces.
    SnrDifference(f64),
    /// `ε₁` given directly.
    Normalized(f64),
    /// `ε₁ = value * N_UE`.
    PerAntenna(f64),
}

impl Default for BalanceThreshold {
    fn default() -> Self {
        BalanceThreshold::PerAntenna(0.05)
    }
}

impl BalanceThreshold {
    fn value(&self) -> f64 {
        match *self {
            BalanceThreshold::SnrDifference(v) | BalanceThreshold::Normalized(v) | BalanceThreshold::PerAntenna(v) => v,
        }
    }
}

/// Transmit power and noise variance (watts), needed to normalize an SNR
/// difference threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub tx_power: f64,
    pub noise_power: f64,
}

/// Weights and derived constants of the phase-2 trade-off problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffConfig {
    pub rho_tradeoff: f64,
    pub epsilon: BalanceThreshold,
    pub zeta_s: f64,
    pub zeta_c: f64,
    pub kappa: f64,
    pub epsilon1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

/// The UE-precoder QCQP: maximize `w^H P w` subject to
/// `0 <= w^H P_κ w <= ε₁`, `‖w‖ = 1`.
#[derive(Debug, Clone)]
pub struct QcqpProblem {
    /// UE steering vectors towards `[reflecting, sensing #2, sensing #3]`.
    pub c: [CVector; 3],
    pub p: [CMatrix; 3],
    pub p_kappa: CMatrix,
    pub objective: CMatrix,
    pub cfg: TradeoffConfig,
}

impl QcqpProblem {
    /// Assembles the problem from the three steering vectors and the
    /// trade-off constants.
    pub fn from_steering(c: [CVector; 3], cfg: TradeoffConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.rho_tradeoff) {
            return Err(BeamformingError::InvalidConfig(format!("trade-off factor {} outside [0, 1]", cfg.rho_tradeoff)));
        }
        if !(cfg.kappa > 0.0) || !(cfg.epsilon1 > 0.0) {
            return Err(BeamformingError::InvalidConfig("kappa and epsilon1 must be positive".into()));
        }
        let p = [0, 1, 2].map(|i| &c[i] * c[i].adjoint());
        let p_kappa = &p[1] - p[2].scale(cfg.kappa);
        let r = cfg.rho_tradeoff;
        let objective = (p[1].scale(cfg.eta2) + p[2].scale(cfg.eta3)).scale(r) + p[0].scale(1.0 - r);
        Ok(Self { c, p, p_kappa, objective, cfg })
    }

    pub fn n_ue(&self) -> usize {
        self.c[0].len()
    }

    /// Beam gains `F_i = |c_i^H w|^2`.
    pub fn beam_gains(&self, w: &CVector) -> [f64; 3] {
        [0, 1, 2].map(|i| self.c[i].dotc(w).norm_sqr())
    }

    pub fn objective_value(&self, w: &CVector) -> f64 {
        let f = self.beam_gains(w);
        let r = self.cfg.rho_tradeoff;
        r * (self.cfg.eta2 * f[1] + self.cfg.eta3 * f[2]) + (1.0 - r) * f[0]
    }

    /// `F₂ - κ F₃`.
    pub fn balance(&self, w: &CVector) -> f64 {
        let f = self.beam_gains(w);
        f[1] - self.cfg.kappa * f[2]
    }

    /// `0 <= tr(P_κ W) <= ε₁` in lifted form.
    pub fn balance_constraint(&self) -> SdpConstraint {
        SdpConstraint { a: self.p_kappa.clone(), lower: 0.0, upper: self.cfg.epsilon1 }
    }

    /// Distance of the balance term from `[0, ε₁]`.
    pub fn violation(&self, w: &CVector) -> f64 {
        let b = self.balance(w);
        (-b).max(b - self.cfg.epsilon1).max(0.0)
    }

    fn feasibility_tol(&self) -> f64 {
        1e-7 * self.n_ue() as f64 * self.cfg.kappa.max(1.0)
    }
}

/// UE steering vector towards `target` for a UE at `ue_pos`.
fn ue_steering(scene: &Scene, ue_pos: &Vec3, target: &Vec3) -> Result<CVector> {
    let u = effective_angles_scaled(ue_pos, target, scene.ue_array.phase_scale())?.u;
    Ok(ula_steering(u, scene.ue_array.n_elements))
}

/// Builds the QCQP from a sensed UE position. Path gains are taken from the
/// path-loss model at the sensed distances.
pub fn build_qcqp(
    ue_pos: &Vec3,
    scene: &Scene,
    pathloss: &PathlossModel,
    rho_tradeoff: f64,
    epsilon: BalanceThreshold,
    budget: LinkBudget,
) -> Result<QcqpProblem> {
    if !(epsilon.value() > 0.0) {
        return Err(BeamformingError::InvalidConfig("balance threshold must be positive".into()));
    }
    let mut c = Vec::with_capacity(3);
    let mut gain = [0.0; 3];
    for (i, pos) in scene.ris_pos.iter().enumerate() {
        c.push(ue_steering(scene, ue_pos, pos)?);
        gain[i] = linear_path_gain(ue_pos.distance(pos).max(1.0), pathloss.exp_u2r, pathloss)?;
    }
    let (a2, a3) = (gain[1], gain[2]);
    let ms = scene.sensing_array.n_elements() as f64;
    let n_ue = scene.ue_array.n_elements as f64;
    let epsilon1 = match epsilon {
        BalanceThreshold::SnrDifference(e) => e * budget.noise_power / (budget.tx_power * a2 * ms),
        BalanceThreshold::Normalized(e1) => e1,
        BalanceThreshold::PerAntenna(f) => f * n_ue,
    };
    let gain_r2b = linear_path_gain(scene.bs_pos.distance(&scene.reflect_pos()), pathloss.exp_r2b, pathloss)?;
    let gamma = (scene.bs_array.n_elements as f64).sqrt() * scene.reflect_array.n_elements() as f64;
    let cfg = TradeoffConfig {
        rho_tradeoff,
        epsilon,
        zeta_s: 0.5 * (a2 + a3) * ms,
        zeta_c: gain_r2b * gain[0] * gamma * gamma,
        kappa: a3 / a2,
        epsilon1,
        eta2: 2.0 * a2 / (a2 + a3),
        eta3: 2.0 * a3 / (a2 + a3),
    };
    QcqpProblem::from_steering(c.try_into().expect("three steering vectors"), cfg)
}

/// One constraint `lower <= tr(A W) <= upper`; either bound may be infinite.
#[derive(Debug, Clone)]
pub struct SdpConstraint {
    pub a: CMatrix,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub w: CMatrix,
    /// Primal objective `tr(A₀ W)`.
    pub objective: f64,
    /// Dual bound on the optimum.
    pub dual_bound: f64,
    pub iterations: usize,
    /// Dimension of the Hermitian block actually solved.
    pub reduced_dim: usize,
}

/// Solves `max tr(A₀ W)` s.t. `lower_k <= tr(A_k W) <= upper_k`,
/// `tr(W) = trace`, `W ⪰ 0` for small Hermitian data.
///
/// `W` is restricted to the joint column span `S` of the data matrices plus a
/// scalar `s >= 0` of trace placed orthogonally to `S`. Such mass changes no
/// objective or constraint value, so the reduction is exact, including when a
/// constraint can only be met by moving trace out of `S`.
pub fn sdp_solve_small(a0: &CMatrix, constraints: &[SdpConstraint], trace: f64) -> Result<SdpSolution> {
    sdp_solve(a0, constraints, trace, true)
}

/// Same problem as [`sdp_solve_small`] solved over the full space, without
/// the span reduction.
pub fn sdp_solve_full(a0: &CMatrix, constraints: &[SdpConstraint], trace: f64) -> Result<SdpSolution> {
    sdp_solve(a0, constraints, trace, false)
}

fn sdp_solve(a0: &CMatrix, constraints: &[SdpConstraint], trace: f64, reduce: bool) -> Result<SdpSolution> {
    let n = a0.nrows();
    if n == 0 || n > 32 || a0.ncols() != n {
        return Err(BeamformingError::InvalidConfig(format!("SDP dimension {n} outside 1..=32")));
    }
    if !(trace > 0.0) {
        return Err(BeamformingError::InvalidConfig("trace must be positive".into()));
    }
    for k in constraints {
        if k.a.shape() != (n, n) || k.lower > k.upper || k.lower.is_nan() || k.upper.is_nan() {
            return Err(BeamformingError::InvalidConfig("malformed SDP constraint".into()));
        }
    }
    let basis = if reduce {
        let mut mats = vec![a0];
        mats.extend(constraints.iter().map(|k| &k.a));
        joint_column_basis(&mats, 1e-12)
    } else {
        CMatrix::identity(n, n)
    };
    let r = basis.ncols();
    let outside = r < n;
    if r == 0 {
        // Every data matrix vanishes.
        let feasible = constraints.iter().all(|k| k.lower <= 0.0 && 0.0 <= k.upper);
        if !feasible {
            return Err(BeamformingError::Infeasible("constraints exclude the zero value".into()));
        }
        return Ok(SdpSolution {
            w: CMatrix::identity(n, n).scale(trace / n as f64),
            objective: 0.0,
            dual_bound: 0.0,
            iterations: 0,
            reduced_dim: 0,
        });
    }
    let project = |m: &CMatrix| basis.adjoint() * m * &basis;

    // Standard form: min <C, X> + c_lp.x  s.t. <A_i, X> + a_i.x = b_i.
    let mut mats = vec![CMatrix::identity(r, r)];
    let mut b = vec![trace];
    let mut lp_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new()];
    let mut n_lp = 0;
    if outside {
        lp_rows[0].push((n_lp, 1.0));
        n_lp += 1;
    }
    for k in constraints {
        let a = project(&k.a);
        if k.lower.is_finite() {
            mats.push(a.clone());
            b.push(k.lower);
            lp_rows.push(vec![(n_lp, -1.0)]);
            n_lp += 1;
        }
        if k.upper.is_finite() {
            mats.push(a);
            b.push(k.upper);
            lp_rows.push(vec![(n_lp, 1.0)]);
            n_lp += 1;
        }
    }
    let m = mats.len();
    let mut a_lp = DMatrix::<f64>::zeros(m, n_lp);
    for (i, row) in lp_rows.iter().enumerate() {
        for &(j, v) in row {
            a_lp[(i, j)] = v;
        }
    }
    let data = SdpData {
        c: -project(a0),
        a: mats,
        a_lp,
        c_lp: DVector::zeros(n_lp),
        b: DVector::from_vec(b),
    };
    let sol = interior_point(&data)?;

    let mut w = &basis * &sol.x * basis.adjoint();
    if outside {
        let s = sol.x_lp[0].max(0.0);
        let complement = CMatrix::identity(n, n) - &basis * basis.adjoint();
        w += complement.scale(s / (n - r) as f64);
    }
    let w = crate::linalg::hermitian_part(&w);
    Ok(SdpSolution {
        objective: trace_inner(a0, &w),
        w,
        dual_bound: -sol.dual_objective,
        iterations: sol.iterations,
        reduced_dim: r,
    })
}

struct SdpData {
    c: CMatrix,
    a: Vec<CMatrix>,
    a_lp: DMatrix<f64>,
    c_lp: DVector<f64>,
    b: DVector<f64>,
}

struct IpmSolution {
    x: CMatrix,
    x_lp: DVector<f64>,
    dual_objective: f64,
    iterations: usize,
}

const IPM_MAX_ITERS: usize = 200;
const IPM_TOL: f64 = 1e-10;
const IPM_STEP: f64 = 0.95;

/// Infeasible primal-dual path-following method with the HKM search
/// direction and a Mehrotra-style centering parameter.
fn interior_point(d: &SdpData) -> Result<IpmSolution> {
    let r = d.c.nrows();
    let m = d.a.len();
    let n_lp = d.c_lp.len();
    let dim = (r + n_lp) as f64;
    let scale_b = 1.0 + d.b.norm();
    let scale_c = 1.0 + d.c.norm() + d.c_lp.norm();

    let mut x = CMatrix::identity(r, r).scale(d.b[0].abs().max(1.0));
    let mut x_lp = DVector::from_element(n_lp, 1.0 + d.b.amax());
    let mut z = CMatrix::identity(r, r).scale(scale_c);
    let mut z_lp = DVector::from_element(n_lp, scale_c);
    let mut y = DVector::<f64>::zeros(m);

    let mut last_gap = f64::INFINITY;
    for iter in 0..IPM_MAX_ITERS {
        let ax = DVector::from_iterator(m, d.a.iter().map(|a| trace_inner(a, &x))) + &d.a_lp * &x_lp;
        let rp = &d.b - ax;
        let mut rd = &d.c - &z;
        for (ai, yi) in d.a.iter().zip(y.iter()) {
            rd -= ai.scale(*yi);
        }
        let rd_lp = &d.c_lp - d.a_lp.transpose() * &y - &z_lp;
        let mu = (trace_inner(&x, &z) + x_lp.dot(&z_lp)) / dim;
        let pobj = trace_inner(&d.c, &x) + d.c_lp.dot(&x_lp);
        let dobj = d.b.dot(&y);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        let pinf = rp.norm() / scale_b;
        let dinf = (rd.norm() + rd_lp.norm()) / scale_c;
        last_gap = gap;
        if gap < IPM_TOL && pinf < IPM_TOL && dinf < IPM_TOL && mu < IPM_TOL * scale_c {
            return Ok(IpmSolution { x, x_lp, dual_objective: dobj, iterations: iter });
        }
        // An unbounded dual ray with a stalled primal residual certifies
        // primal infeasibility.
        if y.amax() > 1e9 * scale_c && pinf > 1e-6 {
            return Err(BeamformingError::Infeasible(format!("primal residual {pinf:e}")));
        }

        let z_inv = hermitian_inverse(&z).ok_or(BeamformingError::NotConverged { iterations: iter, gap })?;
        let xa_zinv: Vec<CMatrix> = d.a.iter().map(|a| &x * a * &z_inv).collect();
        let mut schur = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                schur[(i, j)] = trace_inner(&d.a[i], &xa_zinv[j]);
            }
        }
        let ratio = x_lp.component_div(&z_lp);
        schur += &d.a_lp * DMatrix::from_diagonal(&ratio) * d.a_lp.transpose();
        let schur = (&schur + schur.transpose()) * 0.5;
        let solver = SchurSolver::new(schur).ok_or(BeamformingError::NotConverged { iterations: iter, gap })?;

        let direction = |sigma: f64| {
            let target = sigma * mu;
            let rc = z_inv.scale(target) - &x - &x * &rd * &z_inv;
            let rc_lp = DVector::from_iterator(
                n_lp,
                (0..n_lp).map(|l| target / z_lp[l] - x_lp[l] - x_lp[l] * rd_lp[l] / z_lp[l]),
            );
            let h = DVector::from_iterator(m, (0..m).map(|i| rp[i] - trace_inner(&d.a[i], &rc))) - &d.a_lp * &rc_lp;
            let dy = solver.solve(&h);
            let mut dz = rd.clone();
            for (ai, dyi) in d.a.iter().zip(dy.iter()) {
                dz -= ai.scale(*dyi);
            }
            let dz_lp = &rd_lp - d.a_lp.transpose() * &dy;
            let raw = z_inv.scale(target) - &x - &x * &dz * &z_inv;
            let dx = crate::linalg::hermitian_part(&raw);
            let dx_lp = DVector::from_iterator(
                n_lp,
                (0..n_lp).map(|l| target / z_lp[l] - x_lp[l] - x_lp[l] * dz_lp[l] / z_lp[l]),
            );
            (dx, dx_lp, dy, crate::linalg::hermitian_part(&dz), dz_lp)
        };
        let steps = |dx: &CMatrix, dx_lp: &DVector<f64>, dz: &CMatrix, dz_lp: &DVector<f64>| {
            let ap = max_step_psd(&x, dx).min(max_step_lp(&x_lp, dx_lp));
            let ad = max_step_psd(&z, dz).min(max_step_lp(&z_lp, dz_lp));
            ((IPM_STEP * ap).min(1.0), (IPM_STEP * ad).min(1.0))
        };

        // Predictor, then a centered step with sigma = (mu_aff / mu)^3.
        let (dx, dx_lp, _, dz, dz_lp) = direction(0.0);
        let (ap, ad) = steps(&dx, &dx_lp, &dz, &dz_lp);
        let xa = &x + dx.scale(ap);
        let za = &z + dz.scale(ad);
        let mu_aff = (trace_inner(&xa, &za) + (&x_lp + &dx_lp * ap).dot(&(&z_lp + &dz_lp * ad))) / dim;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        let (dx, dx_lp, dy, dz, dz_lp) = direction(sigma);
        let (ap, ad) = steps(&dx, &dx_lp, &dz, &dz_lp);
        x = crate::linalg::hermitian_part(&(&x + dx.scale(ap)));
        x_lp += &dx_lp * ap;
        y += &dy * ad;
        z = crate::linalg::hermitian_part(&(&z + dz.scale(ad)));
        z_lp += &dz_lp * ad;
    }
    Err(BeamformingError::NotConverged { iterations: IPM_MAX_ITERS, gap: last_gap })
}

struct SchurSolver {
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl SchurSolver {
    fn new(m: DMatrix<f64>) -> Option<Self> {
        let chol = m.clone().cholesky();
        let lu = m.lu();
        if chol.is_none() && !lu.is_invertible() {
            return None;
        }
        Some(Self { chol, lu })
    }

    fn solve(&self, h: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            Some(c) => c.solve(h),
            None => self.lu.solve(h).unwrap_or_else(|| DVector::zeros(h.len())),
        }
    }
}

fn hermitian_inverse(m: &CMatrix) -> Option<CMatrix> {
    match m.clone().cholesky() {
        Some(c) => Some(c.inverse()),
        None => m.clone().try_inverse(),
    }
}

/// Largest `a` with `X + a dX ⪰ 0` (infinite when unbounded).
fn max_step_psd(x: &CMatrix, dx: &CMatrix) -> f64 {
    let Some(chol) = x.clone().cholesky() else {
        return 0.0;
    };
    let l = chol.l();
    let Some(left) = l.solve_lower_triangular(dx) else {
        return 0.0;
    };
    let Some(both) = l.solve_lower_triangular(&left.adjoint()) else {
        return 0.0;
    };
    let (vals, _) = hermitian_eigen_desc(&both);
    let min = *vals.last().unwrap_or(&0.0);
    if min >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / min
    }
}

fn max_step_lp(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

/// Diagnostics of one S-SDR solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdrDiagnostics {
    /// Relaxation optimum, an upper bound on the QCQP.
    pub sdp_objective: f64,
    pub chosen_objective: f64,
    pub n_feasible_samples: usize,
    /// `sdp_objective - chosen_objective`.
    pub rank1_gap: f64,
}

/// S-SDR: solves the relaxation, then draws `l_gr` Gaussian candidates shaped
/// by the SDP solution. The principal eigenvector of the SDP solution is
/// evaluated as one more candidate. The best constraint-feasible candidate
/// wins; if none is feasible the best penalized one is returned.
pub fn solve_sdr<R: Rng + ?Sized>(q: &QcqpProblem, l_gr: usize, rng: &mut R) -> Result<(CVector, SdrDiagnostics)> {
    if l_gr == 0 {
        return Err(BeamformingError::InvalidConfig("l_gr must be at least 1".into()));
    }
    let sdp = sdp_solve_small(&q.objective, &[q.balance_constraint()], 1.0)?;
    let n = q.n_ue();
    let (vals, vecs) = hermitian_eigen_desc(&sdp.w);
    let shape = CMatrix::from_fn(n, n, |i, j| vecs[(i, j)] * vals[j].max(0.0).sqrt());

    let tol = q.feasibility_tol();
    let top_eig = hermitian_eigen_desc(&q.objective).0[0].max(0.0);
    let penalty = top_eig / q.cfg.epsilon1.max(tol);
    let mut best_feasible: Option<(f64, CVector)> = None;
    let mut best_penalized: Option<(f64, CVector)> = None;
    let mut n_feasible = 0;
    let mut consider = |w: CVector| {
        let norm = w.norm();
        if !(norm > 0.0) {
            return;
        }
        let w = w.unscale(norm);
        let f = q.objective_value(&w);
        let viol = q.violation(&w);
        if viol <= tol {
            n_feasible += 1;
            if best_feasible.as_ref().is_none_or(|(bf, _)| f > *bf) {
                best_feasible = Some((f, w));
            }
        } else {
            let pf = f - penalty * viol;
            if best_penalized.as_ref().is_none_or(|(bp, _)| pf > *bp) {
                best_penalized = Some((pf, w));
            }
        }
    };
    consider(vecs.column(0).into_owned());
    for _ in 0..l_gr {
        let r = CVector::from_fn(n, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        });
        consider(&shape * r);
    }
    let (_, w) = best_feasible.or(best_penalized).ok_or(BeamformingError::DegenerateWeights)?;
    let chosen = q.objective_value(&w);
    let diag = SdrDiagnostics {
        sdp_objective: sdp.objective,
        chosen_objective: chosen,
        n_feasible_samples: n_feasible,
        rank1_gap: sdp.objective - chosen,
    };
    Ok((w, diag))
}

/// Penalty applied to the balance term inside the swarm fitness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// `-μ(|F₂ - κF₃| - ε₁)`, applied whether or not the constraint holds.
    #[default]
    Linear,
    /// `-μ max(0, |F₂ - κF₃| - ε₁)`.
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsoConfig {
    pub n_particles: usize,
    pub n_iters: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Penalty weight per unit trade-off factor: `μ = mu_scale * ϱ`.
    pub mu_scale: f64,
    pub penalty: PenaltyForm,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            n_particles: 50,
            n_iters: 100,
            c1: 0.72,
            c2: 1.49,
            c3: 1.49,
            v_min: -0.2,
            v_max: 0.2,
            mu_scale: 2.0,
            penalty: PenaltyForm::Linear,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.n_iters == 0 {
            return Err(BeamformingError::InvalidConfig("PSO counts must be at least 1".into()));
        }
        if !(self.v_min < self.v_max) {
            return Err(BeamformingError::InvalidConfig("v_min must be below v_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PsoOutcome {
    pub w_ue: CVector,
    pub psi: [f64; 3],
    /// Global best fitness after initialization and after every iteration.
    pub best_fitness_trace: Vec<f64>,
}

/// Precoder `Σ ψ_i c_i / √N`, normalized; `None` for a zero combination.
pub fn weighted_beam(q: &QcqpProblem, psi: &[f64; 3]) -> Option<CVector> {
    let n = q.n_ue() as f64;
    let w = (0..3).fold(CVector::zeros(q.n_ue()), |acc, i| acc + q.c[i].scale(psi[i] / n.sqrt()));
    let norm = w.norm();
    (norm > 1e-12).then(|| w.unscale(norm))
}

/// Swarm fitness of a weight vector.
pub fn pso_fitness(q: &QcqpProblem, cfg: &PsoConfig, psi: &[f64; 3]) -> f64 {
    let Some(w) = weighted_beam(q, psi) else {
        return f64::NEG_INFINITY;
    };
    let mu = cfg.mu_scale * q.cfg.rho_tradeoff;
    let excess = q.balance(&w).abs() - q.cfg.epsilon1;
    let pen = match cfg.penalty {
        PenaltyForm::Linear => excess,
        PenaltyForm::Hinge => excess.max(0.0),
    };
    q.objective_value(&w) - mu * pen
}

/// S-MBS: particle swarm over the three beam weights.
pub fn solve_mbs_pso<R: Rng + ?Sized>(q: &QcqpProblem, cfg: &PsoConfig, rng: &mut R) -> Result<PsoOutcome> {
    cfg.validate()?;
    let np = cfg.n_particles;
    let mut pos: Vec<[f64; 3]> = (0..np).map(|_| [0; 3].map(|_| rng.random_range(0.0..=1.0))).collect();
    let mut vel: Vec<[f64; 3]> = (0..np).map(|_| [0; 3].map(|_| rng.random_range(cfg.v_min..=cfg.v_max))).collect();
    let mut pbest = pos.clone();
    let mut pbest_fit: Vec<f64> = pos.iter().map(|p| pso_fitness(q, cfg, p)).collect();
    let mut gbest = pbest[0];
    let mut gbest_fit = pbest_fit[0];
    for k in 1..np {
        if pbest_fit[k] > gbest_fit {
            gbest = pbest[k];
            gbest_fit = pbest_fit[k];
        }
    }
    let mut trace = Vec::with_capacity(cfg.n_iters + 1);
    trace.push(gbest_fit);
    for _ in 0..cfg.n_iters {
        for k in 0..np {
            for j in 0..3 {
                let chi_g: f64 = rng.random();
                let chi_p: f64 = rng.random();
                let v = cfg.c1 * vel[k][j] + cfg.c2 * chi_g * (gbest[j] - pos[k][j]) + cfg.c3 * chi_p * (pbest[k][j] - pos[k][j]);
                vel[k][j] = v.clamp(cfg.v_min, cfg.v_max);
                pos[k][j] = (pos[k][j] + vel[k][j]).clamp(0.0, 1.0);
            }
            let fit = pso_fitness(q, cfg, &pos[k]);
            if fit > pbest_fit[k] {
                pbest[k] = pos[k];
                pbest_fit[k] = fit;
            }
            if pbest_fit[k] > gbest_fit {
                gbest = pbest[k];
                gbest_fit = pbest_fit[k];
            }
        }
        trace.push(gbest_fit);
    }
    let w_ue = weighted_beam(q, &gbest).ok_or(BeamformingError::DegenerateWeights)?;
    Ok(PsoOutcome { w_ue, psi: gbest, best_fitness_trace: trace })
}

/// Perfect-location baseline: closed-form BS/RIS beams at the true position
/// and the UE beam matched to the reflecting sub-surface.
pub fn oracle_baseline(ue_pos: &Vec3, scene: &Scene) -> Result<BeamformerSet> {
    let (w_bs, xi) = closed_form_bs_ris(ue_pos, scene)?;
    let c1 = ue_steering(scene, ue_pos, &scene.reflect_pos())?;
    let w_ue = c1.unscale((scene.ue_array.n_elements as f64).sqrt());
    Ok(BeamformerSet::new(w_bs, xi, w_ue)?)
}

/// Beam gain `|c(u)^H w|^2` of a UE precoder over a grid of effective angles.
pub fn beampattern(w: &CVector, angles: &[f64]) -> Vec<f64> {
    angles
        .iter()
        .map(|&u| ula_steering(u, w.len()).dotc(w).norm_sqr())
        .collect()
}

/// `w^H M w` convenience re-export for callers scoring precoders.
pub fn precoder_gain(m: &CMatrix, w: &CVector) -> f64 {
    quadratic_form(m, w)
}
