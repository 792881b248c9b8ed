use inla_recon::linalg::ols;
use inla_recon::model::ModelKind;
use inla_recon::pseudoproxy::{generate, PseudoConfig};
use inla_recon::timeseries::{ProxyNest, FIRST_YEAR, LAST_YEAR, NEST_COUNT};
use inla_recon::Error;
use nalgebra::{DMatrix, DVector};

fn small() -> PseudoConfig {
    PseudoConfig {
        proxies_per_nest: [3, 2, 2, 1, 1, 1, 1, 2],
        ..PseudoConfig::default()
    }
}

#[test]
fn regeneration_is_bit_exact() {
    let a = generate(&small(), 11).unwrap();
    let b = generate(&small(), 11).unwrap();
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.proxies, b.proxies);
    assert_eq!(a.raw_forcings.volcanic, b.raw_forcings.volcanic);
    let c = generate(&small(), 12).unwrap();
    assert_ne!(a.truth, c.truth);
}

#[test]
fn zero_coefficients_and_noise_give_constant_truth() {
    let cfg = PseudoConfig {
        beta: [0.3, 0.0, 0.0, 0.0],
        eta_sd: 0.0,
        ..small()
    };
    let w = generate(&cfg, 5).unwrap();
    assert_eq!(w.truth.observed_count(), (LAST_YEAR - FIRST_YEAR + 1) as usize);
    assert!(w.truth.observed().all(|(_, v)| v == 0.3));
}

#[test]
fn nest_counts_and_starts_follow_the_config() {
    let cfg = small();
    let w = generate(&cfg, 2).unwrap();
    for k in 0..NEST_COUNT {
        let members: Vec<_> = w.proxies.iter().filter(|p| p.nest == k + 1).collect();
        assert_eq!(members.len(), cfg.proxies_per_nest[k]);
        let interval = ProxyNest::interval_for(k + 1);
        for p in members {
            assert!(interval.contains(p.start), "nest {} proxy starts {}", k + 1, p.start);
            assert_eq!(p.series.start_year(), p.start);
            assert_eq!(p.series.end_year(), LAST_YEAR);
        }
    }
    assert!(w.proxies.iter().filter(|p| p.nest == 1).all(|p| p.start == FIRST_YEAR));
}

#[test]
fn noiseless_proxies_recover_their_coefficients() {
    // a huge SNR leaves numerically noiseless proxies
    let cfg = PseudoConfig {
        snr_range: (1e12, 1e12),
        missing_rate: 0.0,
        ..small()
    };
    let w = generate(&cfg, 9).unwrap();
    for p in &w.proxies {
        let years: Vec<_> = p.series.observed().map(|(y, _)| y).collect();
        let x = DMatrix::from_fn(years.len(), 2, |i, j| {
            if j == 0 {
                1.0
            } else {
                w.truth.get(years[i]).unwrap()
            }
        });
        let y = DVector::from_iterator(years.len(), p.series.observed().map(|(_, v)| v));
        let fit = ols(&x, &y).unwrap();
        assert!((fit.coef[0] - p.a0).abs() < 1e-10, "{} vs {}", fit.coef[0], p.a0);
        assert!((fit.coef[1] - p.a1).abs() < 1e-10, "{} vs {}", fit.coef[1], p.a1);
    }
}

#[test]
fn realized_snr_matches_the_draw() {
    let cfg = PseudoConfig {
        proxies_per_nest: [20, 0, 0, 0, 0, 0, 0, 0],
        missing_rate: 0.0,
        ..PseudoConfig::default()
    };
    let w = generate(&cfg, 4).unwrap();
    let t: Vec<f64> = w.truth.observed().map(|(_, v)| v).collect();
    let sd = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let sd_t = sd(&t);
    for p in &w.proxies {
        let resid: Vec<f64> = p
            .series
            .observed()
            .zip(&t)
            .map(|((_, v), tv)| v - p.a0 - p.a1 * tv)
            .collect();
        let realized = p.a1.abs() * sd_t / sd(&resid);
        // 2000 draws: the sd estimate is within a few percent
        assert!((realized / p.snr - 1.0).abs() < 0.1, "snr {} realized {realized}", p.snr);
    }
}

#[test]
fn non_positive_snr_is_rejected() {
    for snr in [(0.0, 1.0), (-1.0, 0.5), (0.8, 0.4)] {
        let cfg = PseudoConfig {
            snr_range: snr,
            ..small()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::InvalidInput(_))), "{snr:?}");
    }
}

#[test]
fn spline_truth_for_nf() {
    let cfg = PseudoConfig {
        kind: ModelKind::NF,
        eta_sd: 0.0,
        ..small()
    };
    let w = generate(&cfg, 8).unwrap();
    assert_eq!(w.gamma.len(), cfg.spline_count);
    // NF ignores the forcing coefficients, so the truth is smooth
    let v: Vec<f64> = w.truth.observed().map(|(_, v)| v).collect();
    let jump = v.windows(2).map(|p| (p[1] - p[0]).abs()).fold(0.0, f64::max);
    assert!(jump < 0.05, "largest step {jump}");
}

#[test]
fn written_world_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate(&small(), 6).unwrap();
    w.write_dir(dir.path()).unwrap();
    let proxies = inla_recon::io::read_proxies_file(&dir.path().join("proxies.csv")).unwrap();
    assert_eq!(proxies.len(), w.proxies.len());
    let mut expected = w.proxy_series();
    expected.sort_by(|a, b| a.name().cmp(b.name()));
    assert_eq!(proxies, expected);
    let temp = inla_recon::io::read_temperature_file(&dir.path().join("temperature.csv")).unwrap();
    assert_eq!(temp.range(), w.config.instrumental);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("world.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 6);
}

#[test]
fn pipeline_recovers_the_co2_sign() {
    use inla_recon::pipeline::{run_with_inputs, Inputs, RunConfig, Stage};
    let cfg = PseudoConfig {
        snr_range: (2.0, 2.0),
        ..PseudoConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunConfig::default();
    run.paths.output = dir.path().to_path_buf();
    run.model.nests = 1;
    run.threads = Some(1);
    let replicates = 50;
    let mut right = 0;
    for seed in 0..replicates {
        let w = generate(&cfg, 1000 + seed).unwrap();
        let inputs = Inputs {
            proxies: w.proxy_series(),
            forcings: w.raw_forcings.clone(),
            temperature: w.instrumental.clone(),
            smoothed_reference: None,
        };
        let out = run_with_inputs(&inputs, &run, Stage::Fit).unwrap();
        let s = out.fits[0].summary("beta_co2").unwrap();
        if s.mean.signum() == w.beta[3].signum() {
            right += 1;
        }
    }
    assert!(right * 100 >= 95 * replicates, "{right} of {replicates}");
}
