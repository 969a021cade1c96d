//! Scenario configuration, the two-phase protocol driver, Monte Carlo
//! aggregation, trade-off sweeps, the long-term mobility mode and CSV output.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array_geometry::{Scene, UlaGeometry, UraGeometry, Vec3};
use crate::beamforming::{
    build_qcqp, closed_form_bs_ris, mrt_mrc, oracle_baseline, solve_mbs_pso, solve_sdr, BalanceThreshold, LinkBudget,
    PsoConfig, SdrDiagnostics,
};
use crate::channel::{ChannelSet, PathlossModel};
use crate::linalg::{compensated_sum, dbm_to_watts};
use crate::sensing::{sense_location, LocationEstimate, MicroSurfaceConfig};
use crate::signal::{estimate_ecsi, random_phase_vector, rate, snr_com, snr_sen, synthesize_sensing_snapshots, BeamformerSet, EcsiMethod};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{failed} of {total} trials failed (first failure: {first})")]
    FailureThreshold { failed: usize, total: usize, first: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Phase-2 precoder design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SSdr,
    SMbs,
    /// Perfect-location baseline, used in both phases.
    Oracle,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::SSdr => "s_sdr",
            Algorithm::SMbs => "s_mbs",
            Algorithm::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s_sdr" => Ok(Algorithm::SSdr),
            "s_mbs" => Ok(Algorithm::SMbs),
            "oracle" => Ok(Algorithm::Oracle),
            other => Err(HarnessError::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Where the UE is placed in each trial. Positions are on the floor
/// (`z = 0`); `distance` is the 3-D distance to the reflecting sub-surface and
/// `azimuth_deg` is measured from the surface normal (`+x`) towards `+y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UePlacement {
    Fixed { position: Vec3 },
    Region { distance: [f64; 2], azimuth_deg: [f64; 2] },
}

impl UePlacement {
    fn validate(&self, ris: &Vec3) -> Result<(), HarnessError> {
        match self {
            UePlacement::Fixed { position } => {
                if !position.is_finite() || position.x <= ris.x {
                    return Err(HarnessError::Config("fixed UE must be in front of the surface".into()));
                }
            }
            UePlacement::Region { distance, azimuth_deg } => {
                if !(distance[0] <= distance[1]) || !(distance[0] > ris.z.abs()) {
                    return Err(HarnessError::Config(format!(
                        "UE distance range {distance:?} must exceed the surface height {}",
                        ris.z
                    )));
                }
                if !(azimuth_deg[0] <= azimuth_deg[1]) || azimuth_deg[0] <= -90.0 || azimuth_deg[1] >= 90.0 {
                    return Err(HarnessError::Config(format!("azimuth range {azimuth_deg:?} outside (-90, 90)")));
                }
            }
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, ris: &Vec3, rng: &mut R) -> Vec3 {
        match self {
            UePlacement::Fixed { position } => *position,
            UePlacement::Region { distance, azimuth_deg } => {
                let d = sample_range(distance, rng);
                let az = sample_range(azimuth_deg, rng).to_radians();
                let horizontal = (d * d - ris.z * ris.z).max(0.0).sqrt();
                Vec3::new(ris.x + horizontal * az.cos(), ris.y + horizontal * az.sin(), 0.0)
            }
        }
    }
}

fn sample_range<R: Rng + ?Sized>(r: &[f64; 2], rng: &mut R) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Long-term (multi-block) mode settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MobilityConfig {
    pub speeds_mps: Vec<f64>,
    pub n_blocks: usize,
    pub block_duration_s: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self { speeds_mps: vec![1.0, 5.0, 10.0, 20.0], n_blocks: 10, block_duration_s: 0.01 }
    }
}

/// One simulated deployment and its protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub bs_pos: Vec3,
    pub ris_pos: Vec3,
    /// Spacing of the two sensing sub-surfaces, placed at `±d_s2s/2` along
    /// `y` from the reflecting sub-surface.
    pub d_s2s: f64,
    pub ue: UePlacement,
    pub n_bs: usize,
    pub n_ue: usize,
    pub m1: [usize; 2],
    pub ms: [usize; 2],
    pub delta_tau1: usize,
    pub tau1: usize,
    pub tau2: usize,
    pub rho_dbm: f64,
    pub sigma0_dbm: f64,
    /// Drop receiver noise from the sensing snapshots (rates still use σ₀²).
    pub noiseless_sensing: bool,
    pub pathloss: PathlossModel,
    pub rho_grid: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub epsilon: BalanceThreshold,
    pub ecsi: EcsiMethod,
    pub l_gr: usize,
    pub pso: PsoConfig,
    pub mobility: MobilityConfig,
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        // BS 50 m from the reflecting sub-surface, 20 m high, 30° off its
        // normal.
        let ris = Vec3::new(0.0, 0.0, 3.0);
        let horizontal = (50.0f64.powi(2) - 17.0f64.powi(2)).sqrt();
        let az = 30f64.to_radians();
        Self {
            name: "default".into(),
            bs_pos: Vec3::new(horizontal * az.cos(), horizontal * az.sin(), 20.0),
            ris_pos: ris,
            d_s2s: 5.0,
            ue: UePlacement::Region { distance: [5.0, 5.0], azimuth_deg: [-45.0, 45.0] },
            n_bs: 16,
            n_ue: 8,
            m1: [20, 20],
            ms: [6, 6],
            delta_tau1: 0,
            tau1: 5,
            tau2: 95,
            rho_dbm: 20.0,
            sigma0_dbm: -80.0,
            noiseless_sensing: false,
            pathloss: PathlossModel::default(),
            rho_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            algorithms: vec![Algorithm::SSdr],
            epsilon: BalanceThreshold::default(),
            ecsi: EcsiMethod::Perfect,
            l_gr: 100,
            pso: PsoConfig::default(),
            mobility: MobilityConfig::default(),
            n_trials: 200,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn slots_total(&self) -> usize {
        self.delta_tau1 + self.tau1 + self.tau2
    }

    pub fn sensing_positions(&self) -> [Vec3; 2] {
        let h = self.d_s2s / 2.0;
        [self.ris_pos + Vec3::new(0.0, h, 0.0), self.ris_pos + Vec3::new(0.0, -h, 0.0)]
    }

    pub fn scene(&self) -> Result<Scene, HarnessError> {
        let cfg_err = |e: crate::array_geometry::GeometryError| HarnessError::Config(e.to_string());
        let [s2, s3] = self.sensing_positions();
        let scene = Scene {
            bs_pos: self.bs_pos,
            ris_pos: [self.ris_pos, s2, s3],
            bs_array: UlaGeometry::new(self.n_bs).map_err(cfg_err)?,
            ue_array: UlaGeometry::new(self.n_ue).map_err(cfg_err)?,
            reflect_array: UraGeometry::new(self.m1[0], self.m1[1]).map_err(cfg_err)?,
            sensing_array: UraGeometry::new(self.ms[0], self.ms[1]).map_err(cfg_err)?,
        };
        scene.validate().map_err(cfg_err)?;
        Ok(scene)
    }

    pub fn tx_power(&self) -> f64 {
        dbm_to_watts(self.rho_dbm)
    }

    pub fn noise_power(&self) -> f64 {
        dbm_to_watts(self.sigma0_dbm)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        self.scene()?;
        if self.tau1 == 0 || self.tau2 == 0 {
            return err("tau1 and tau2 must be at least 1".into());
        }
        if self.ecsi == EcsiMethod::LsPilot && self.delta_tau1 < self.n_ue {
            return err(format!("ls_pilot needs delta_tau1 >= n_ue ({} < {})", self.delta_tau1, self.n_ue));
        }
        if !(self.d_s2s > 0.0) {
            return err("d_s2s must be positive".into());
        }
        if !self.rho_dbm.is_finite() || !self.sigma0_dbm.is_finite() {
            return err("powers must be finite".into());
        }
        if self.rho_grid.is_empty() || self.rho_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return err("rho_grid must be a nonempty subset of [0, 1]".into());
        }
        if self.algorithms.is_empty() {
            return err("at least one algorithm is required".into());
        }
        if self.n_trials == 0 || self.l_gr == 0 {
            return err("n_trials and l_gr must be at least 1".into());
        }
        if self.ms[0] < 3 || self.ms[1] < 3 {
            return err("sensing sub-surfaces need at least 3x3 elements".into());
        }
        self.pathloss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.pso.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.ue.validate(&self.ris_pos)?;
        if !(self.mobility.block_duration_s >= 0.0) || self.mobility.speeds_mps.iter().any(|v| !(*v >= 0.0)) {
            return err("mobility speeds and block duration must be nonnegative".into());
        }
        Ok(())
    }

    /// Applies the keys of a TOML document on top of this configuration.
    pub fn merged_with_toml(&self, text: &str) -> Result<Self, HarnessError> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge_tables(&mut base, overlay);
        base.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            // Tagged enums are replaced wholesale so a variant switch does
            // not inherit fields of the old variant.
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A named bundle of scenarios.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub scenarios: Vec<ScenarioConfig>,
    /// Run the long-term mobility mode instead of the trade-off sweep.
    pub mobility: bool,
}

pub const PRESET_NAMES: [&str; 8] = ["default", "fig5", "fig6", "fig9", "fig11", "fig12", "fig13", "demo"];

fn sweep_region() -> UePlacement {
    UePlacement::Region { distance: [5.0, 10.0], azimuth_deg: [-45.0, 45.0] }
}

pub fn preset(name: &str) -> Result<Preset, HarnessError> {
    let base = ScenarioConfig::default();
    let named = |suffix: String, cfg: ScenarioConfig| ScenarioConfig { name: suffix, ..cfg };
    let (scenarios, mobility) = match name {
        "default" => (vec![base], false),
        "fig5" => (
            [[4, 4], [6, 6]]
                .into_iter()
                .map(|ms| named(format!("ms{}x{}", ms[0], ms[1]), ScenarioConfig { ms, ..base.clone() }))
                .collect(),
            false,
        ),
        "fig6" => {
            let mut out = Vec::new();
            for ms in [[4, 4], [6, 6]] {
                for tau1 in [1, 5, 10, 20, 30] {
                    out.push(named(
                        format!("ms{}x{}_tau1_{tau1}", ms[0], ms[1]),
                        ScenarioConfig {
                            ms,
                            tau1,
                            tau2: 100 - tau1,
                            rho_dbm: 10.0,
                            ue: UePlacement::Region { distance: [10.0, 10.0], azimuth_deg: [-45.0, 45.0] },
                            rho_grid: vec![0.0],
                            algorithms: vec![Algorithm::SSdr, Algorithm::Oracle],
                            ..base.clone()
                        },
                    ));
                }
            }
            (out, false)
        }
        "fig9" => (
            vec![named(
                "fixed_ue".into(),
                ScenarioConfig {
                    ue: UePlacement::Fixed { position: Vec3::new(3.46, -2.0, 0.0) },
                    rho_grid: vec![0.0, 0.5, 1.0],
                    ..base
                },
            )],
            false,
        ),
        "fig11" => (
            vec![named(
                "sdr_vs_mbs".into(),
                ScenarioConfig {
                    ue: sweep_region(),
                    tau1: 20,
                    tau2: 20,
                    algorithms: vec![Algorithm::SSdr, Algorithm::SMbs],
                    ..base
                },
            )],
            false,
        ),
        "fig12" => (
            [0.5, 2.0, 5.0, 20.0]
                .into_iter()
                .map(|d| {
                    named(
                        format!("d_s2s_{d}"),
                        ScenarioConfig {
                            d_s2s: d,
                            rho_dbm: 0.0,
                            tau1: 20,
                            tau2: 20,
                            ue: sweep_region(),
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            false,
        ),
        "fig13" => (
            vec![named(
                "mobility".into(),
                ScenarioConfig { rho_grid: vec![0.0], ..base },
            )],
            true,
        ),
        "demo" => (
            vec![named(
                "demo".into(),
                ScenarioConfig {
                    ue: UePlacement::Fixed { position: Vec3::new(3.46, -2.0, 0.0) },
                    noiseless_sensing: true,
                    rho_grid: vec![0.0],
                    n_trials: 1,
                    ..base
                },
            )],
            false,
        ),
        other => {
            return Err(HarnessError::Config(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(Preset { name: name.to_string(), scenarios, mobility })
}

/// Protocol stage at which a trial failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStage {
    Channels,
    Phase1Beamforming,
    Phase1Sensing,
    Phase2Beamforming,
    Phase2Sensing,
    Mobility,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialFailure {
    pub stage: TrialStage,
    pub message: String,
}

impl fmt::Display for TrialFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.stage, self.message)
    }
}

fn fail<E: fmt::Display>(stage: TrialStage) -> impl FnOnce(E) -> TrialFailure {
    move |e| TrialFailure { stage, message: e.to_string() }
}

/// Outcome of one two-phase coherence block.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub ue_pos: Vec3,
    pub estimate1: LocationEstimate,
    pub estimate2: LocationEstimate,
    pub pos_err1: f64,
    pub pos_err2: f64,
    pub rate_phase1: f64,
    pub rate_phase2: f64,
    pub rate_avg: f64,
    pub snr_sen1: [f64; 2],
    pub snr_sen2: [f64; 2],
    pub sdr: Option<SdrDiagnostics>,
    pub beamformers2: BeamformerSet,
}

/// Validated scenario with its derived quantities.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cfg: ScenarioConfig,
    pub scene: Scene,
    pub micro: MicroSurfaceConfig,
    pub tx_power: f64,
    pub noise_power: f64,
}

impl Setup {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let scene = cfg.scene()?;
        let micro = MicroSurfaceConfig::for_surface(&scene.sensing_array).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Self { cfg: cfg.clone(), scene, micro, tx_power: cfg.tx_power(), noise_power: cfg.noise_power() })
    }

    fn sensing_noise(&self) -> f64 {
        if self.cfg.noiseless_sensing {
            0.0
        } else {
            self.noise_power
        }
    }

    /// Child generator of trial `index`; independent of the trade-off factor
    /// and algorithm so sweeps use common random numbers.
    pub fn trial_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index);
        rng
    }

    /// Phase-2 beamformers for a UE believed to be at `sensed`.
    pub fn phase2_beamformers<R: Rng + ?Sized>(
        &self,
        algorithm: Algorithm,
        rho_tradeoff: f64,
        sensed: &Vec3,
        true_pos: &Vec3,
        rng: &mut R,
    ) -> Result<(BeamformerSet, Option<SdrDiagnostics>), TrialFailure> {
        let stage = TrialStage::Phase2Beamforming;
        if algorithm == Algorithm::Oracle {
            return Ok((oracle_baseline(true_pos, &self.scene).map_err(fail(stage))?, None));
        }
        let (w_bs, xi) = closed_form_bs_ris(sensed, &self.scene).map_err(fail(stage))?;
        let budget = LinkBudget { tx_power: self.tx_power, noise_power: self.noise_power };
        let q = build_qcqp(sensed, &self.scene, &self.cfg.pathloss, rho_tradeoff, self.cfg.epsilon, budget).map_err(fail(stage))?;
        let (w_ue, diag) = match algorithm {
            Algorithm::SSdr => {
                let (w, d) = solve_sdr(&q, self.cfg.l_gr, rng).map_err(fail(stage))?;
                (w, Some(d))
            }
            Algorithm::SMbs => (solve_mbs_pso(&q, &self.cfg.pso, rng).map_err(fail(stage))?.w_ue, None),
            Algorithm::Oracle => unreachable!(),
        };
        Ok((BeamformerSet::new(w_bs, xi, w_ue).map_err(fail(stage))?, diag))
    }
}

/// One trial of the two-phase protocol.
pub fn run_trial<R: Rng + ?Sized>(
    setup: &Setup,
    algorithm: Algorithm,
    rho_tradeoff: f64,
    rng: &mut R,
) -> Result<TrialResult, TrialFailure> {
    let cfg = &setup.cfg;
    let scene = &setup.scene;
    let ue_pos = cfg.ue.sample(&cfg.ris_pos, rng);
    let channels = ChannelSet::draw(scene, &ue_pos, &cfg.pathloss, rng).map_err(fail(TrialStage::Channels))?;
    let (rho, sigma) = (setup.tx_power, setup.noise_power);

    // Phase 1: random reflection, ECSI, MRT-MRC.
    let xi1 = random_phase_vector(scene.reflect_array.n_elements(), rng);
    let bf1 = if algorithm == Algorithm::Oracle {
        oracle_baseline(&ue_pos, scene).map_err(fail(TrialStage::Phase1Beamforming))?
    } else {
        let ecsi = estimate_ecsi(&channels, &xi1, rho, setup.sensing_noise(), cfg.delta_tau1, rng, cfg.ecsi)
            .map_err(fail(TrialStage::Phase1Beamforming))?;
        let (w_ue, w_bs) = mrt_mrc(&ecsi).map_err(fail(TrialStage::Phase1Beamforming))?;
        BeamformerSet::new(w_bs, xi1, w_ue).map_err(fail(TrialStage::Phase1Beamforming))?
    };
    let snaps1 = synthesize_sensing_snapshots(&channels, &bf1, rho, setup.sensing_noise(), cfg.tau1, 1, rng)
        .map_err(fail(TrialStage::Phase1Sensing))?;
    let est1 = sense_location([&[&snaps1[0]], &[&snaps1[1]]], &setup.micro, scene, 1).map_err(fail(TrialStage::Phase1Sensing))?;

    // Phase 2: sensing-based design, pooled fine sensing.
    let (bf2, sdr) = setup.phase2_beamformers(algorithm, rho_tradeoff, &est1.position, &ue_pos, rng)?;
    let snaps2 = synthesize_sensing_snapshots(&channels, &bf2, rho, setup.sensing_noise(), cfg.tau2, 2, rng)
        .map_err(fail(TrialStage::Phase2Sensing))?;
    let est2 = sense_location([&[&snaps1[0], &snaps2[0]], &[&snaps1[1], &snaps2[1]]], &setup.micro, scene, 2)
        .map_err(fail(TrialStage::Phase2Sensing))?;

    let rate_phase1 = rate(snr_com(&channels, &bf1, rho, sigma));
    let rate_phase2 = rate(snr_com(&channels, &bf2, rho, sigma));
    let t = cfg.slots_total() as f64;
    let rate_avg = (cfg.tau1 as f64 * rate_phase1 + cfg.tau2 as f64 * rate_phase2) / t;
    Ok(TrialResult {
        ue_pos,
        pos_err1: est1.position.distance(&ue_pos),
        pos_err2: est2.position.distance(&ue_pos),
        estimate1: est1,
        estimate2: est2,
        rate_phase1,
        rate_phase2,
        rate_avg,
        snr_sen1: snr_sen(&channels, &bf1, rho, sigma).1,
        snr_sen2: snr_sen(&channels, &bf2, rho, sigma).1,
        sdr,
        beamformers2: bf2,
    })
}

/// Runs all trials of one (scenario, algorithm, ϱ) point in parallel.
pub fn run_trials(setup: &Setup, algorithm: Algorithm, rho_tradeoff: f64) -> Vec<Result<TrialResult, TrialFailure>> {
    (0..setup.cfg.n_trials as u64)
        .into_par_iter()
        .map(|i| run_trial(setup, algorithm, rho_tradeoff, &mut setup.trial_rng(i)))
        .collect()
}

/// One aggregated row of the output table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scenario: String,
    pub algorithm: Algorithm,
    pub rho_tradeoff: f64,
    pub rate_avg: f64,
    pub rate_phase2: f64,
    pub rmse1_m: f64,
    pub rmse2_m: f64,
    pub stderr_rate: f64,
    pub stderr_rmse2: f64,
    pub n_trials: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub const CSV_HEADER: [&str; 11] = [
    "scenario",
    "algorithm",
    "rho_tradeoff",
    "rate_avg",
    "rate_phase2",
    "rmse1_m",
    "rmse2_m",
    "stderr_rate",
    "stderr_rmse2",
    "n_trials",
    "n_failed",
];

fn mean(v: &[f64]) -> f64 {
    compensated_sum(v.iter().copied()) / v.len() as f64
}

/// Standard error of the mean.
fn stderr(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = compensated_sum(v.iter().map(|x| (x - m) * (x - m))) / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// Aggregates trial outcomes. RMSE is `sqrt(mean ‖q̂ - q‖²)`; its standard
/// error uses the delta method on the mean squared error.
pub fn aggregate(
    scenario: &str,
    algorithm: Algorithm,
    rho_tradeoff: f64,
    results: &[Result<TrialResult, TrialFailure>],
) -> Result<MetricsRow, HarnessError> {
    let ok: Vec<&TrialResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let n_failed = results.len() - ok.len();
    if results.is_empty() || 2 * n_failed > results.len() {
        let first = results
            .iter()
            .find_map(|r| r.as_ref().err())
            .map(|f| f.to_string())
            .unwrap_or_else(|| "no trials".into());
        return Err(HarnessError::FailureThreshold { failed: n_failed, total: results.len(), first });
    }
    let collect = |f: fn(&TrialResult) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let rates = collect(|r| r.rate_avg);
    let se1 = collect(|r| r.pos_err1 * r.pos_err1);
    let se2 = collect(|r| r.pos_err2 * r.pos_err2);
    let rmse2 = mean(&se2).sqrt();
    let stderr_rmse2 = if rmse2 > 0.0 { stderr(&se2) / (2.0 * rmse2) } else { 0.0 };
    Ok(MetricsRow {
        scenario: scenario.to_string(),
        algorithm,
        rho_tradeoff,
        rate_avg: mean(&rates),
        rate_phase2: mean(&collect(|r| r.rate_phase2)),
        rmse1_m: mean(&se1).sqrt(),
        rmse2_m: rmse2,
        stderr_rate: stderr(&rates),
        stderr_rmse2,
        n_trials: results.len(),
        n_failed,
    })
}

/// Monte Carlo batch for one (algorithm, ϱ) point.
pub fn run_monte_carlo(cfg: &ScenarioConfig, algorithm: Algorithm, rho_tradeoff: f64) -> Result<MetricsRow, HarnessError> {
    let setup = Setup::new(cfg)?;
    let results = run_trials(&setup, algorithm, rho_tradeoff);
    if let Some(f) = results.iter().find_map(|r| r.as_ref().err()) {
        log::debug!("{}: trial failure {f}", cfg.name);
    }
    aggregate(&cfg.name, algorithm, rho_tradeoff, &results)
}

/// One Monte Carlo batch per ϱ in the grid and per algorithm.
pub fn sweep_tradeoff(cfg: &ScenarioConfig, algorithms: &[Algorithm]) -> Result<MetricsTable, HarnessError> {
    let mut rows = Vec::with_capacity(cfg.rho_grid.len() * algorithms.len());
    for &rho in &cfg.rho_grid {
        for &alg in algorithms {
            rows.push(run_monte_carlo(cfg, alg, rho)?);
        }
    }
    Ok(MetricsTable { rows })
}

/// Runs every scenario of a preset with its own algorithm list.
pub fn run_preset(preset: &Preset) -> Result<MetricsTable, HarnessError> {
    let mut table = MetricsTable::default();
    for s in &preset.scenarios {
        table.rows.extend(sweep_tradeoff(s, &s.algorithms)?.rows);
    }
    Ok(table)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes the table as CSV. Floats use the shortest representation that
/// parses back to the same value.
pub fn write_csv<W: Write>(table: &MetricsTable, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.scenario.clone(),
            r.algorithm.to_string(),
            fmt_f64(r.rho_tradeoff),
            fmt_f64(r.rate_avg),
            fmt_f64(r.rate_phase2),
            fmt_f64(r.rmse1_m),
            fmt_f64(r.rmse2_m),
            fmt_f64(r.stderr_rate),
            fmt_f64(r.stderr_rmse2),
            r.n_trials.to_string(),
            r.n_failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(table: &MetricsTable, path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path)?;
    write_csv(table, std::io::BufWriter::new(file))
}

pub fn read_csv<R: Read>(input: R) -> Result<MetricsTable, HarnessError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(HarnessError::Config(format!("unexpected CSV header {header:?}")));
    }
    let bad = |field: &str, v: &str| HarnessError::Config(format!("bad {field} value '{v}'"));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i], &rec[i]));
        let n = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(CSV_HEADER[i], &rec[i]));
        rows.push(MetricsRow {
            scenario: rec[0].to_string(),
            algorithm: rec[1].parse()?,
            rho_tradeoff: f(2)?,
            rate_avg: f(3)?,
            rate_phase2: f(4)?,
            rmse1_m: f(5)?,
            rmse2_m: f(6)?,
            stderr_rate: f(7)?,
            stderr_rmse2: f(8)?,
            n_trials: n(9)?,
            n_failed: n(10)?,
        });
    }
    Ok(MetricsTable { rows })
}

/// Outcome of one long-term (multi-block) trial.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityTrial {
    /// Average rate of every block.
    pub block_rates: Vec<f64>,
    /// Oracle average rate of every block.
    pub oracle_rates: Vec<f64>,
}

/// Long-term protocol: block 1 runs both phases; every later block is all
/// phase 2, designed from the previous block's fine estimate, while the UE
/// moves `speed * block_duration` per block along a random horizontal
/// heading. Channels (including gain phases) are redrawn per block.
pub fn run_mobility_trial<R: Rng + ?Sized>(
    setup: &Setup,
    algorithm: Algorithm,
    rho_tradeoff: f64,
    speed: f64,
    rng: &mut R,
) -> Result<MobilityTrial, TrialFailure> {
    let cfg = &setup.cfg;
    let n_blocks = cfg.mobility.n_blocks;
    if n_blocks < 2 {
        return Err(TrialFailure { stage: TrialStage::Mobility, message: "n_blocks must be at least 2".into() });
    }
    let heading = rng.random_range(0.0..2.0 * PI);
    let step = Vec3::new(heading.cos(), heading.sin(), 0.0) * (speed * cfg.mobility.block_duration_s);
    let (rho, sigma) = (setup.tx_power, setup.noise_power);
    let t = cfg.slots_total() as f64;

    let first = run_trial(setup, algorithm, rho_tradeoff, rng)?;
    let mut ue = first.ue_pos;
    let oracle_first = {
        // Gain magnitudes depend only on distance, so a fresh draw at the
        // same position gives the block-1 oracle rate.
        let ch = ChannelSet::draw(&setup.scene, &ue, &cfg.pathloss, rng).map_err(fail(TrialStage::Channels))?;
        let bf = oracle_baseline(&ue, &setup.scene).map_err(fail(TrialStage::Mobility))?;
        rate(snr_com(&ch, &bf, rho, sigma)) * (cfg.tau1 + cfg.tau2) as f64 / t
    };
    let mut block_rates = vec![first.rate_avg];
    let mut oracle_rates = vec![oracle_first];
    let mut estimate = first.estimate2.position;
    let slots = cfg.slots_total();

    for _ in 1..n_blocks {
        ue = ue + step;
        if ue.x <= cfg.ris_pos.x + 0.5 || ue.distance(&cfg.ris_pos) < 1.0 {
            return Err(TrialFailure { stage: TrialStage::Mobility, message: "UE left the service region".into() });
        }
        let channels = ChannelSet::draw(&setup.scene, &ue, &cfg.pathloss, rng).map_err(fail(TrialStage::Channels))?;
        let (bf, _) = setup.phase2_beamformers(algorithm, rho_tradeoff, &estimate, &ue, rng)?;
        let snaps = synthesize_sensing_snapshots(&channels, &bf, rho, setup.sensing_noise(), slots, 2, rng)
            .map_err(fail(TrialStage::Phase2Sensing))?;
        estimate = sense_location([&[&snaps[0]], &[&snaps[1]]], &setup.micro, &setup.scene, 2)
            .map_err(fail(TrialStage::Phase2Sensing))?
            .position;
        block_rates.push(rate(snr_com(&channels, &bf, rho, sigma)));
        let oracle = oracle_baseline(&ue, &setup.scene).map_err(fail(TrialStage::Mobility))?;
        oracle_rates.push(rate(snr_com(&channels, &oracle, rho, sigma)));
    }
    Ok(MobilityTrial { block_rates, oracle_rates })
}

/// Aggregated long-term result for one speed.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityRow {
    pub scenario: String,
    pub algorithm: Algorithm,
    pub speed_mps: f64,
    pub rate_avg: f64,
    pub oracle_rate_avg: f64,
    pub rate_ratio: f64,
    pub stderr_rate: f64,
    /// Mean rate of each block index across trials.
    pub per_block_rate: Vec<f64>,
    pub n_trials: usize,
    pub n_failed: usize,
}

pub fn run_mobility(cfg: &ScenarioConfig, algorithm: Algorithm, rho_tradeoff: f64, speed: f64) -> Result<MobilityRow, HarnessError> {
    let setup = Setup::new(cfg)?;
    if cfg.mobility.n_blocks < 2 {
        return Err(HarnessError::Config("mobility needs at least 2 blocks".into()));
    }
    let results: Vec<Result<MobilityTrial, TrialFailure>> = (0..cfg.n_trials as u64)
        .into_par_iter()
        .map(|i| run_mobility_trial(&setup, algorithm, rho_tradeoff, speed, &mut setup.trial_rng(i)))
        .collect();
    let ok: Vec<&MobilityTrial> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let n_failed = results.len() - ok.len();
    if 2 * n_failed > results.len() {
        let first = results.iter().find_map(|r| r.as_ref().err()).map(|f| f.to_string()).unwrap_or_default();
        return Err(HarnessError::FailureThreshold { failed: n_failed, total: results.len(), first });
    }
    let per_trial: Vec<f64> = ok.iter().map(|t| mean(&t.block_rates)).collect();
    let oracle: Vec<f64> = ok.iter().map(|t| mean(&t.oracle_rates)).collect();
    let per_block_rate = (0..cfg.mobility.n_blocks)
        .map(|b| mean(&ok.iter().map(|t| t.block_rates[b]).collect::<Vec<_>>()))
        .collect();
    let rate_avg = mean(&per_trial);
    let oracle_rate_avg = mean(&oracle);
    Ok(MobilityRow {
        scenario: cfg.name.clone(),
        algorithm,
        speed_mps: speed,
        rate_avg,
        oracle_rate_avg,
        rate_ratio: rate_avg / oracle_rate_avg,
        stderr_rate: stderr(&per_trial),
        per_block_rate,
        n_trials: results.len(),
        n_failed,
    })
}

pub const MOBILITY_CSV_HEADER: [&str; 9] = [
    "scenario",
    "algorithm",
    "speed_mps",
    "rate_avg",
    "oracle_rate_avg",
    "rate_ratio",
    "stderr_rate",
    "n_trials",
    "n_failed",
];

pub fn write_mobility_csv<W: Write>(rows: &[MobilityRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MOBILITY_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.algorithm.to_string(),
            fmt_f64(r.speed_mps),
            fmt_f64(r.rate_avg),
            fmt_f64(r.oracle_rate_avg),
            fmt_f64(r.rate_ratio),
            fmt_f64(r.stderr_rate),
            r.n_trials.to_string(),
            r.n_failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Every (scenario, algorithm, speed) of a mobility preset.
pub fn run_mobility_preset(preset: &Preset) -> Result<Vec<MobilityRow>, HarnessError> {
    let mut rows = Vec::new();
    for s in &preset.scenarios {
        for &alg in &s.algorithms {
            for &rho in &s.rho_grid {
                for &v in &s.mobility.speeds_mps {
                    rows.push(run_mobility(s, alg, rho, v)?);
                }
            }
        }
    }
    Ok(rows)
}

/// Flat `key = value` view of a configuration, for logging.
pub fn describe(cfg: &ScenarioConfig) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Ok(toml::Value::Table(t)) = toml::Value::try_from(cfg) {
        flatten("", &t, &mut out);
    }
    out
}

fn flatten(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => flatten(&key, inner, out),
            other => {
                out.insert(key, other.to_string());
            }
        }
    }
}
