//! Monte Carlo level behaviour of the two-phase protocol.

use risac::harness::{
    emit_csv, preset, read_csv, run_mobility, run_monte_carlo, sweep_tradeoff, Algorithm, MetricsRow, MobilityConfig,
    ScenarioConfig, UePlacement,
};

fn region() -> UePlacement {
    UePlacement::Region { distance: [5.0, 10.0], azimuth_deg: [-45.0, 45.0] }
}

#[test]
fn sensing_weight_trades_rate_for_accuracy() {
    let cfg = ScenarioConfig { rho_grid: vec![0.0, 1.0], n_trials: 200, ..ScenarioConfig::default() };
    let t = sweep_tradeoff(&cfg, &[Algorithm::SSdr]).unwrap();
    assert_eq!(t.rows.len(), 2);
    let (comm, sens) = (&t.rows[0], &t.rows[1]);
    assert_eq!((comm.rho_tradeoff, sens.rho_tradeoff), (0.0, 1.0));
    assert!(sens.rmse2_m <= comm.rmse2_m, "{} > {}", sens.rmse2_m, comm.rmse2_m);
    assert!(comm.rate_avg >= sens.rate_avg, "{} < {}", comm.rate_avg, sens.rate_avg);
}

#[test]
fn endpoint_grid_gives_two_rows_per_algorithm() {
    let cfg = ScenarioConfig { rho_grid: vec![0.0, 1.0], n_trials: 3, ..ScenarioConfig::default() };
    let t = sweep_tradeoff(&cfg, &[Algorithm::SSdr, Algorithm::SMbs]).unwrap();
    for alg in [Algorithm::SSdr, Algorithm::SMbs] {
        let rhos: Vec<f64> = t.rows.iter().filter(|r| r.algorithm == alg).map(|r| r.rho_tradeoff).collect();
        assert_eq!(rhos, vec![0.0, 1.0]);
    }
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn sweeping_tradeoff_moves_along_the_curve() {
    let p = preset("fig5").unwrap();
    let small = p.scenarios.iter().find(|s| s.ms == [4, 4]).unwrap();
    let cfg = ScenarioConfig { n_trials: 200, ..small.clone() };
    let t = sweep_tradeoff(&cfg, &[Algorithm::SSdr]).unwrap();
    let rho: Vec<f64> = t.rows.iter().map(|r| r.rho_tradeoff).collect();
    let rmse: Vec<f64> = t.rows.iter().map(|r| r.rmse2_m).collect();
    let s = spearman(&rho, &rmse);
    assert!(s < 0.0, "spearman {s}, rmse {rmse:?}");
}

#[test]
fn spearman_helper() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
}

/// SDR is not beaten on both axes by the swarm in the balance region, up to
/// two combined standard errors on each axis.
#[test]
fn sdr_weakly_dominates_swarm_in_balance_region() {
    let p = preset("fig11").unwrap();
    let cfg = ScenarioConfig { rho_grid: vec![0.25, 0.5, 0.75], n_trials: 200, ..p.scenarios[0].clone() };
    let t = sweep_tradeoff(&cfg, &[Algorithm::SSdr, Algorithm::SMbs]).unwrap();
    let pick = |alg: Algorithm, rho: f64| -> &MetricsRow {
        t.rows.iter().find(|r| r.algorithm == alg && r.rho_tradeoff == rho).unwrap()
    };
    for rho in [0.25, 0.5, 0.75] {
        let (s, m) = (pick(Algorithm::SSdr, rho), pick(Algorithm::SMbs, rho));
        let rate_slack = 2.0 * s.stderr_rate.hypot(m.stderr_rate);
        let rmse_slack = 2.0 * s.stderr_rmse2.hypot(m.stderr_rmse2);
        assert!(s.rate_avg >= m.rate_avg - rate_slack, "rho {rho}: rate {} vs {}", s.rate_avg, m.rate_avg);
        assert!(s.rmse2_m <= m.rmse2_m + rmse_slack, "rho {rho}: rmse2 {} vs {}", s.rmse2_m, m.rmse2_m);
    }
}

#[test]
fn no_algorithm_beats_the_oracle_rate() {
    let cfg = ScenarioConfig { ue: region(), rho_grid: vec![0.0, 0.5, 1.0], n_trials: 100, ..ScenarioConfig::default() };
    let t = sweep_tradeoff(&cfg, &[Algorithm::SSdr, Algorithm::SMbs, Algorithm::Oracle]).unwrap();
    for rho in [0.0, 0.5, 1.0] {
        let oracle = t.rows.iter().find(|r| r.algorithm == Algorithm::Oracle && r.rho_tradeoff == rho).unwrap();
        for r in t.rows.iter().filter(|r| r.rho_tradeoff == rho) {
            assert!(r.rate_avg <= oracle.rate_avg, "{} at {rho}: {} > {}", r.algorithm, r.rate_avg, oracle.rate_avg);
        }
    }
}

/// Least-squares slope of `log stderr` against `log n` is close to -1/2.
#[test]
fn stderr_shrinks_as_inverse_root_n() {
    let ns = [100usize, 200, 400, 800, 1600];
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .map(|&n| {
            let cfg = ScenarioConfig { n_trials: n, ..ScenarioConfig::default() };
            let r = run_monte_carlo(&cfg, Algorithm::SSdr, 0.0).unwrap();
            ((n as f64).ln(), r.stderr_rate.ln())
        })
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.25, "slope {slope}");
}

#[test]
fn mobility_rate_does_not_grow_with_speed() {
    let p = preset("fig13").unwrap();
    let cfg = ScenarioConfig { n_trials: 200, ..p.scenarios[0].clone() };
    assert_eq!(cfg.mobility.speeds_mps, vec![1.0, 5.0, 10.0, 20.0]);
    let rates: Vec<f64> = cfg
        .mobility
        .speeds_mps
        .iter()
        .map(|&v| run_mobility(&cfg, Algorithm::SSdr, 0.0, v).unwrap().rate_avg)
        .collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
}

#[test]
fn static_ue_keeps_block_rates_level() {
    let cfg = ScenarioConfig {
        n_trials: 100,
        mobility: MobilityConfig { speeds_mps: vec![0.0], n_blocks: 6, block_duration_s: 0.01 },
        ..ScenarioConfig::default()
    };
    let r = run_mobility(&cfg, Algorithm::SSdr, 0.0, 0.0).unwrap();
    let later = &r.per_block_rate[1..];
    let first = later[0];
    for b in later {
        assert!((b - first).abs() <= 0.01 * first, "{:?}", r.per_block_rate);
    }
    // Later blocks are all phase 2, so they match the single-block phase-2 rate.
    let single = run_monte_carlo(&ScenarioConfig { n_trials: 100, ..cfg.clone() }, Algorithm::SSdr, 0.0).unwrap();
    assert!((first - single.rate_phase2).abs() <= 0.01 * single.rate_phase2, "{first} vs {}", single.rate_phase2);
}

#[test]
fn csv_file_round_trip_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("scenario.toml");
    std::fs::write(&cfg_path, "name = \"file\"\nn_trials = 4\nrho_grid = [0.0, 1.0]\nms = [4, 4]\nseed = 9\n").unwrap();
    let cfg = ScenarioConfig::default().merged_with_toml(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    assert_eq!((cfg.name.as_str(), cfg.n_trials, cfg.ms, cfg.seed), ("file", 4, [4, 4], 9));
    let table = sweep_tradeoff(&cfg, &[Algorithm::SSdr, Algorithm::Oracle]).unwrap();
    let out = dir.path().join("out.csv");
    emit_csv(&table, &out).unwrap();
    let back = read_csv(std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(back, table);
    assert!(emit_csv(&table, &dir.path().join("missing").join("out.csv")).is_err());
}
