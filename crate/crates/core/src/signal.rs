//! Received-signal synthesis at the BS and the sensing sub-surfaces, ECSI
//! acquisition, and the SNR / rate metrics.
//!
//! Powers are linear watts. Data symbols are unit-modulus with uniform random
//! phase, so every slot carries exactly unit power.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelSet;
use crate::{CMatrix, CVector, Complex64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("insufficient pilots: {have} slots for {need} UE antennas")]
    InsufficientPilots { have: usize, need: usize },
    #[error("invalid beamformer: {0}")]
    InvalidBeamformer(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// BS combiner, RIS phase vector and UE precoder used during one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub w_bs: CVector,
    pub xi: CVector,
    pub w_ue: CVector,
}

impl BeamformerSet {
    pub fn new(w_bs: CVector, xi: CVector, w_ue: CVector) -> Result<Self, SignalError> {
        let set = Self { w_bs, xi, w_ue };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        for (name, w) in [("w_bs", &self.w_bs), ("w_ue", &self.w_ue)] {
            if (w.norm() - 1.0).abs() > 1e-9 {
                return Err(SignalError::InvalidBeamformer(format!("{name} has norm {}", w.norm())));
            }
        }
        if let Some(bad) = self.xi.iter().find(|x| (x.norm() - 1.0).abs() > 1e-9) {
            return Err(SignalError::InvalidBeamformer(format!("xi entry {bad} is not unimodular")));
        }
        Ok(())
    }

    fn check_dims(&self, channels: &ChannelSet) -> Result<(), SignalError> {
        let (n_bs, m1) = channels.r2b.matrix.shape();
        let n_ue = channels.u2r[0].matrix.ncols();
        if self.w_bs.len() != n_bs || self.xi.len() != m1 || self.w_ue.len() != n_ue {
            return Err(SignalError::DimensionMismatch(format!(
                "beamformers ({}, {}, {}) vs channels ({n_bs}, {m1}, {n_ue})",
                self.w_bs.len(),
                self.xi.len(),
                self.w_ue.len()
            )));
        }
        Ok(())
    }
}

/// Random passive beamformer with i.i.d. uniform phases.
pub fn random_phase_vector<R: Rng + ?Sized>(m: usize, rng: &mut R) -> CVector {
    CVector::from_iterator(m, (0..m).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI))))
}

/// Received samples at one sensing sub-surface, one column per slot.
#[derive(Debug, Clone)]
pub struct SnapshotBatch {
    pub samples: CMatrix,
    pub phase_index: u8,
    pub noise_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EcsiMethod {
    #[default]
    Perfect,
    LsPilot,
}

/// Estimated effective UE-to-BS channel for a fixed RIS phase vector.
#[derive(Debug, Clone)]
pub struct EcsiEstimate {
    pub h_eff: CMatrix,
    pub method: EcsiMethod,
}

fn unit_symbol<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI))
}

fn cn_noise<R: Rng + ?Sized>(sigma0_sq: f64, rng: &mut R) -> Complex64 {
    if sigma0_sq == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let s = (sigma0_sq / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

fn check_powers(rho: f64, sigma0_sq: f64) -> Result<(), SignalError> {
    if !(rho >= 0.0) || !(sigma0_sq >= 0.0) {
        return Err(SignalError::InvalidParameter(format!("rho = {rho}, sigma0^2 = {sigma0_sq}")));
    }
    Ok(())
}

/// Noise-free per-symbol response at sensing sub-surface `k` (0 or 1): the
/// direct UE path plus the path reflected by the reflecting sub-surface.
pub fn sensing_response(channels: &ChannelSet, bf: &BeamformerSet, k: usize) -> CVector {
    let at_reflector = &channels.u2r[0].matrix * &bf.w_ue;
    let reradiated = at_reflector.component_mul(&bf.xi);
    &channels.u2r[1 + k].matrix * &bf.w_ue + &channels.r2r[k].matrix * reradiated
}

/// Snapshots at both sensing sub-surfaces for `n_slots` data slots. Both
/// sub-surfaces observe the same symbol stream.
pub fn synthesize_sensing_snapshots<R: Rng + ?Sized>(
    channels: &ChannelSet,
    bf: &BeamformerSet,
    rho: f64,
    sigma0_sq: f64,
    n_slots: usize,
    phase_index: u8,
    rng: &mut R,
) -> Result<[SnapshotBatch; 2], SignalError> {
    bf.check_dims(channels)?;
    check_powers(rho, sigma0_sq)?;
    if n_slots == 0 {
        return Err(SignalError::InvalidParameter("n_slots must be >= 1".into()));
    }
    let amp = rho.sqrt();
    let responses = [sensing_response(channels, bf, 0).scale(amp), sensing_response(channels, bf, 1).scale(amp)];
    let m = responses[0].len();
    let mut out = [CMatrix::zeros(m, n_slots), CMatrix::zeros(responses[1].len(), n_slots)];
    for t in 0..n_slots {
        let s = unit_symbol(rng);
        for (samples, resp) in out.iter_mut().zip(responses.iter()) {
            for (i, r) in resp.iter().enumerate() {
                samples[(i, t)] = r * s + cn_noise(sigma0_sq, rng);
            }
        }
    }
    let [a, b] = out;
    Ok([
        SnapshotBatch { samples: a, phase_index, noise_power: sigma0_sq },
        SnapshotBatch { samples: b, phase_index, noise_power: sigma0_sq },
    ])
}

/// Combined BS output `y(t)` for `n_slots` slots.
pub fn synthesize_bs_signal<R: Rng + ?Sized>(
    channels: &ChannelSet,
    bf: &BeamformerSet,
    rho: f64,
    sigma0_sq: f64,
    n_slots: usize,
    rng: &mut R,
) -> Result<CVector, SignalError> {
    bf.check_dims(channels)?;
    check_powers(rho, sigma0_sq)?;
    let gain = bf.w_bs.dotc(&(channels.effective(&bf.xi) * &bf.w_ue)) * rho.sqrt();
    let n_bs = bf.w_bs.len();
    let mut y = CVector::zeros(n_slots);
    for t in 0..n_slots {
        let s = unit_symbol(rng);
        let noise = CVector::from_iterator(n_bs, (0..n_bs).map(|_| cn_noise(sigma0_sq, rng)));
        y[t] = gain * s + bf.w_bs.dotc(&noise);
    }
    Ok(y)
}

/// Acquire the effective channel `H_R2B diag(xi) H_U2R,1`.
///
/// `LsPilot` sends the `N_UE` columns of a unitary DFT matrix, repeated
/// `floor(delta_tau1 / N_UE)` times, and inverts the averaged observations.
pub fn estimate_ecsi<R: Rng + ?Sized>(
    channels: &ChannelSet,
    xi: &CVector,
    rho: f64,
    sigma0_sq: f64,
    delta_tau1: usize,
    rng: &mut R,
    method: EcsiMethod,
) -> Result<EcsiEstimate, SignalError> {
    check_powers(rho, sigma0_sq)?;
    if xi.len() != channels.r2b.matrix.ncols() {
        return Err(SignalError::DimensionMismatch("xi length vs reflecting sub-surface".into()));
    }
    let h = channels.effective(xi);
    match method {
        EcsiMethod::Perfect => Ok(EcsiEstimate { h_eff: h, method }),
        EcsiMethod::LsPilot => {
            let n_ue = h.ncols();
            if delta_tau1 < n_ue {
                return Err(SignalError::InsufficientPilots { have: delta_tau1, need: n_ue });
            }
            if !(rho > 0.0) {
                return Err(SignalError::InvalidParameter("pilot estimation needs rho > 0".into()));
            }
            let reps = delta_tau1 / n_ue;
            let norm = 1.0 / (n_ue as f64).sqrt();
            let pilots = CMatrix::from_fn(n_ue, n_ue, |r, c| {
                Complex64::from_polar(norm, -2.0 * PI * (r * c) as f64 / n_ue as f64)
            });
            let clean = (&h * &pilots).scale(rho.sqrt());
            let n_bs = h.nrows();
            let mut acc = CMatrix::zeros(n_bs, n_ue);
            for _ in 0..reps {
                for c in 0..n_ue {
                    for r in 0..n_bs {
                        acc[(r, c)] += clean[(r, c)] + cn_noise(sigma0_sq, rng);
                    }
                }
            }
            let y_bar = acc.unscale(reps as f64);
            let h_eff = (y_bar * pilots.adjoint()).unscale(rho.sqrt());
            Ok(EcsiEstimate { h_eff, method })
        }
    }
}

/// Communication SNR at the BS.
pub fn snr_com(channels: &ChannelSet, bf: &BeamformerSet, rho: f64, sigma0_sq: f64) -> f64 {
    let g = bf.w_bs.dotc(&(channels.effective(&bf.xi) * &bf.w_ue));
    rho / sigma0_sq * g.norm_sqr()
}

/// Direct-link sensing SNR, total and per sensing sub-surface.
pub fn snr_sen(channels: &ChannelSet, bf: &BeamformerSet, rho: f64, sigma0_sq: f64) -> (f64, [f64; 2]) {
    let per = [1, 2].map(|i| rho / sigma0_sq * (&channels.u2r[i].matrix * &bf.w_ue).norm_squared());
    (per[0] + per[1], per)
}

/// Achievable rate `log2(1 + snr)` in bps/Hz.
pub fn rate(snr: f64) -> f64 {
    (1.0 + snr).log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array_geometry::{Scene, UlaGeometry, UraGeometry, Vec3};
    use crate::channel::{build_r2b, build_r2r, build_u2r, ComplexGain, PathlossModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one() -> Complex64 {
        Complex64::new(1.0, 0.0)
    }

    fn uniform(n: usize) -> CVector {
        CVector::from_element(n, Complex64::new(1.0 / (n as f64).sqrt(), 0.0))
    }

    /// Everything on the x axis so all angles are zero.
    fn boresight_channels(r2r_gain: f64) -> ChannelSet {
        let ue = UlaGeometry::new(3).unwrap();
        let bs = UlaGeometry::new(4).unwrap();
        let refl = UraGeometry::new(2, 3).unwrap();
        let sens = UraGeometry::new(3, 3).unwrap();
        let g = ComplexGain(one());
        let ue_pos = Vec3::new(10.0, 0.0, 0.0);
        let ris = Vec3::default();
        let sub = Vec3::new(-1.0, 0.0, 0.0);
        let sub2 = Vec3::new(-2.0, 0.0, 0.0);
        ChannelSet {
            r2b: build_r2b(&bs, &refl, &Vec3::new(20.0, 0.0, 0.0), &ris, g).unwrap(),
            u2r: [
                build_u2r(&ue, &refl, &ue_pos, &ris, g).unwrap(),
                build_u2r(&ue, &sens, &ue_pos, &sub, g).unwrap(),
                build_u2r(&ue, &sens, &ue_pos, &sub2, g).unwrap(),
            ],
            r2r: [
                build_r2r(&refl, &sens, &ris, &sub, ComplexGain(Complex64::new(r2r_gain, 0.0))).unwrap(),
                build_r2r(&refl, &sens, &ris, &sub2, ComplexGain(Complex64::new(r2r_gain, 0.0))).unwrap(),
            ],
        }
    }

    fn matched(ch: &ChannelSet) -> BeamformerSet {
        BeamformerSet::new(
            uniform(ch.r2b.matrix.nrows()),
            CVector::from_element(ch.r2b.matrix.ncols(), one()),
            uniform(ch.u2r[0].matrix.ncols()),
        )
        .unwrap()
    }

    fn default_scene() -> Scene {
        Scene {
            bs_pos: Vec3::new(40.0, 20.0, 20.0),
            ris_pos: [Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 2.5, 3.0), Vec3::new(0.0, -2.5, 3.0)],
            bs_array: UlaGeometry::new(4).unwrap(),
            ue_array: UlaGeometry::new(4).unwrap(),
            reflect_array: UraGeometry::new(4, 4).unwrap(),
            sensing_array: UraGeometry::new(3, 3).unwrap(),
        }
    }

    #[test]
    fn beamformer_validation() {
        assert!(BeamformerSet::new(uniform(2), CVector::from_element(3, one()), uniform(2)).is_ok());
        assert!(BeamformerSet::new(uniform(2).scale(2.0), CVector::from_element(3, one()), uniform(2)).is_err());
        let mut xi = CVector::from_element(3, one());
        xi[1] = Complex64::new(0.5, 0.0);
        assert!(BeamformerSet::new(uniform(2), xi, uniform(2)).is_err());
    }

    #[test]
    fn noiseless_single_path_snapshots_are_rank_one() {
        let ch = boresight_channels(0.0);
        let bf = matched(&ch);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let [a, _] = synthesize_sensing_snapshots(&ch, &bf, 1.0, 0.0, 8, 1, &mut rng).unwrap();
        let dir = &ch.u2r[1].matrix * &bf.w_ue;
        for col in a.samples.column_iter() {
            let coef = dir.dotc(&col) / dir.norm_squared();
            assert!((col - &dir * coef).norm() < 1e-12);
        }
    }

    #[test]
    fn noise_only_covariance_is_scaled_identity() {
        let ch = boresight_channels(1.0);
        let bf = matched(&ch);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let sigma = 0.3;
        let [a, _] = synthesize_sensing_snapshots(&ch, &bf, 0.0, sigma, n, 1, &mut rng).unwrap();
        let cov = (&a.samples * a.samples.adjoint()).unscale(n as f64);
        let m = cov.nrows();
        // Each entry's sampling std is about sigma / sqrt(n).
        let tol = 5.0 * sigma / (n as f64).sqrt();
        for r in 0..m {
            for c in 0..m {
                let want = if r == c { sigma } else { 0.0 };
                assert!((cov[(r, c)] - Complex64::new(want, 0.0)).norm() < tol, "({r},{c}) {}", cov[(r, c)]);
            }
        }
    }

    #[test]
    fn synthesis_is_reproducible() {
        let scene = default_scene();
        let ue = Vec3::new(4.0, -1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ch = ChannelSet::draw(&scene, &ue, &PathlossModel::default(), &mut rng).unwrap();
        let bf = BeamformerSet::new(uniform(4), random_phase_vector(16, &mut rng), uniform(4)).unwrap();
        let a = synthesize_sensing_snapshots(&ch, &bf, 0.1, 1e-11, 20, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synthesize_sensing_snapshots(&ch, &bf, 0.1, 1e-11, 20, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a[0].samples, b[0].samples);
        assert_eq!(a[1].samples, b[1].samples);
        let y1 = synthesize_bs_signal(&ch, &bf, 0.1, 1e-11, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let y2 = synthesize_bs_signal(&ch, &bf, 0.1, 1e-11, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ch = boresight_channels(0.0);
        let bf = BeamformerSet::new(uniform(2), CVector::from_element(6, one()), uniform(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            synthesize_sensing_snapshots(&ch, &bf, 1.0, 0.0, 4, 1, &mut rng),
            Err(SignalError::DimensionMismatch(_))
        ));
        assert!(synthesize_bs_signal(&ch, &bf, 1.0, 0.0, 4, &mut rng).is_err());
    }

    #[test]
    fn matched_boresight_bs_power() {
        let ch = boresight_channels(0.0);
        let bf = matched(&ch);
        let rho = 2.5;
        let y = synthesize_bs_signal(&ch, &bf, rho, 0.0, 5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let want = rho * 4.0 * 36.0 * 3.0;
        for v in y.iter() {
            assert!((v.norm_sqr() - want).abs() < 1e-9 * want);
        }
        assert!((snr_com(&ch, &bf, rho, 1.0) - want).abs() < 1e-9 * want);
    }

    #[test]
    fn bs_noise_power_preserved_by_unit_combiner() {
        let ch = boresight_channels(0.0);
        let bf = matched(&ch);
        let n = 20_000;
        let y = synthesize_bs_signal(&ch, &bf, 0.0, 0.7, n, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let var = y.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        assert!((var - 0.7).abs() < 5.0 * 0.7 / (n as f64).sqrt());
    }

    #[test]
    fn ecsi_perfect_and_noiseless_ls_are_exact() {
        let scene = default_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ch = ChannelSet::draw(&scene, &Vec3::new(5.0, 1.0, 0.0), &PathlossModel::default(), &mut rng).unwrap();
        let xi = random_phase_vector(16, &mut rng);
        let truth = ch.effective(&xi);
        let p = estimate_ecsi(&ch, &xi, 0.1, 1e-11, 0, &mut rng, EcsiMethod::Perfect).unwrap();
        assert_eq!(p.h_eff, truth);
        let ls = estimate_ecsi(&ch, &xi, 0.1, 0.0, 4, &mut rng, EcsiMethod::LsPilot).unwrap();
        assert!((ls.h_eff - &truth).norm() <= 1e-9 * truth.norm());
        assert_eq!(
            estimate_ecsi(&ch, &xi, 0.1, 0.0, 3, &mut rng, EcsiMethod::LsPilot).unwrap_err(),
            SignalError::InsufficientPilots { have: 3, need: 4 }
        );
    }

    #[test]
    fn ls_error_shrinks_with_repetitions() {
        let scene = default_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ch = ChannelSet::draw(&scene, &Vec3::new(5.0, 1.0, 0.0), &PathlossModel::default(), &mut rng).unwrap();
        let xi = random_phase_vector(16, &mut rng);
        let truth = ch.effective(&xi);
        let sigma = 1e-9;
        let mse = |reps: usize, rng: &mut ChaCha8Rng| {
            let trials = 400;
            (0..trials)
                .map(|_| {
                    let e = estimate_ecsi(&ch, &xi, 1.0, sigma, 4 * reps, rng, EcsiMethod::LsPilot).unwrap();
                    (e.h_eff - &truth).norm_squared()
                })
                .sum::<f64>()
                / trials as f64
        };
        let e1 = mse(1, &mut rng);
        let e4 = mse(4, &mut rng);
        // Expected MSE is N_BS N_UE sigma^2 / (rho reps); 4x the reps → 1/4 the MSE.
        let expected1 = 16.0 * sigma;
        assert!((e1 / expected1 - 1.0).abs() < 0.15, "e1 = {e1}");
        assert!((e1 / e4 - 4.0).abs() < 0.8, "ratio = {}", e1 / e4);
    }

    #[test]
    fn snr_com_examples() {
        let ch = boresight_channels(0.0);
        let mut bf = matched(&ch);
        // Orthogonal to c(0) = all ones.
        bf.w_ue = CVector::from_vec(vec![
            Complex64::new(1.0 / 2f64.sqrt(), 0.0),
            Complex64::new(-1.0 / 2f64.sqrt(), 0.0),
            Complex64::new(0.0, 0.0),
        ]);
        assert!(snr_com(&ch, &bf, 1.0, 1.0) < 1e-20);
        let bf = matched(&ch);
        let s1 = snr_com(&ch, &bf, 1.0, 0.1);
        assert!((s1 - 4.0 * 36.0 * 3.0 / 0.1).abs() < 1e-8);
        assert!((snr_com(&ch, &bf, 10.0, 0.1) / s1 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn snr_sen_examples() {
        let ch = boresight_channels(0.3);
        let bf = matched(&ch);
        let (total, per) = snr_sen(&ch, &bf, 2.0, 0.5);
        let want = 2.0 * 9.0 * 3.0 / 0.5;
        assert!((per[0] - want).abs() < 1e-9 && (per[1] - want).abs() < 1e-9);
        assert!((total - 2.0 * want).abs() < 1e-9);

        let mut bf0 = matched(&ch);
        bf0.w_ue = CVector::from_vec(vec![
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0 / 2f64.sqrt(), 0.0),
            Complex64::new(-1.0 / 2f64.sqrt(), 0.0),
        ]);
        let (total, _) = snr_sen(&ch, &bf0, 1.0, 1.0);
        assert!(total < 1e-20);
    }

    #[test]
    fn snr_sen_symmetric_geometry() {
        let ue_a = UlaGeometry::new(4).unwrap();
        let sens = UraGeometry::new(3, 3).unwrap();
        let ue = Vec3::new(6.0, 0.0, 0.0);
        let g = ComplexGain(Complex64::new(0.01, 0.0));
        let h2 = build_u2r(&ue_a, &sens, &ue, &Vec3::new(0.0, 2.0, 1.0), g).unwrap();
        let h3 = build_u2r(&ue_a, &sens, &ue, &Vec3::new(0.0, -2.0, 1.0), g).unwrap();
        // A real, symmetric precoder sees mirrored angles identically.
        let w = CVector::from_vec(vec![0.3, 0.6, 0.6, 0.3].into_iter().map(|x| Complex64::new(x, 0.0)).collect());
        let w = w.normalize();
        let a = (&h2.matrix * &w).norm_squared();
        let b = (&h3.matrix * &w).norm_squared();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn snr_com_invariant_to_common_phase() {
        let scene = default_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ch = ChannelSet::draw(&scene, &Vec3::new(5.0, 2.0, 0.0), &PathlossModel::default(), &mut rng).unwrap();
        let bf = BeamformerSet::new(uniform(4), random_phase_vector(16, &mut rng), uniform(4)).unwrap();
        let base = snr_com(&ch, &bf, 0.1, 1e-11);
        let rot = Complex64::from_polar(1.0, 1.234);
        for which in 0..3 {
            let mut b = bf.clone();
            match which {
                0 => b.w_ue *= rot,
                1 => b.w_bs *= rot,
                _ => b.xi *= rot,
            }
            assert!((snr_com(&ch, &b, 0.1, 1e-11) - base).abs() < 1e-9 * base);
        }
    }

    #[test]
    fn rate_examples() {
        assert_eq!(rate(0.0), 0.0);
        assert_eq!(rate(1.0), 1.0);
        assert_eq!(rate(3.0), 2.0);
    }
}
