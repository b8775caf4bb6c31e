//! Seeded simulation-data generators: degradation paths, failure times, and
//! the per-unit feature extraction used by the simulation studies.
//!
//! Each unit degrades along `x(t) = -c / ln(t)` and fails when the path
//! reaches a threshold, giving log failure time `y = -c/D + eps` with
//! standard SEV noise. Clients differ through the distribution of their
//! path coefficients `c`: client-level mean shifts and coefficient spread
//! both grow with the scenario dispersion, so cross-client heterogeneity is
//! tunable from mild to severe.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::sev::ClientDataset;

/// Baseline path-coefficient mean shared by every scenario.
pub const C_BASE_MEAN: f64 = 4.0;

/// Scenario description for one simulated federation.
#[derive(Debug, Clone)]
pub struct SimScenario {
    /// Per-client training sample counts (length = client count).
    pub n_train: Vec<usize>,
    /// Per-client test sample counts (length = client count).
    pub n_test: Vec<usize>,
    /// Coefficient dispersion; drives both within- and between-client spread.
    pub sigma_scenario: f64,
    /// Failure threshold D on the degradation path.
    pub threshold: f64,
    /// Signal sampling interval.
    pub dt: f64,
    /// Observation-noise standard deviation on the sampled signal.
    pub sigma_obs: f64,
    pub seed: u64,
}

impl SimScenario {
    pub fn new(n_train: Vec<usize>, n_test: Vec<usize>, sigma_scenario: f64, seed: u64) -> Result<Self> {
        let s = Self {
            n_train,
            n_test,
            sigma_scenario,
            threshold: 2.0,
            dt: 0.001,
            sigma_obs: 0.05,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn m(&self) -> usize {
        self.n_train.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train.is_empty() || self.n_train.len() != self.n_test.len() {
            return Err(Error::Config(
                "n_train and n_test must be nonempty and of equal length".into(),
            ));
        }
        if self.n_train.iter().chain(&self.n_test).any(|&n| n == 0) {
            return Err(Error::Config("per-client sample counts must be positive".into()));
        }
        if !(self.sigma_scenario > 0.0) || !(self.threshold > 0.0) {
            return Err(Error::Config("sigma_scenario and threshold must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt < 1.0) {
            return Err(Error::Config(format!("dt must lie in (0, 1), got {}", self.dt)));
        }
        if !(self.sigma_obs >= 0.0) {
            return Err(Error::Config("sigma_obs must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One simulated unit: true coefficient, failure time, and sampled signal.
#[derive(Debug, Clone)]
pub struct SimUnit {
    /// True path coefficient.
    pub c: f64,
    /// Log failure time.
    pub y_log: f64,
    /// Failure time, clamped into (dt, 0.999).
    pub ttf: f64,
    /// Observed samples (tau, x(tau)) on the grid tau = dt, 2dt, ...
    pub signal: Vec<(f64, f64)>,
}

/// Log failure time and clamped failure time for a coefficient/noise pair.
/// Returns true in the third slot when the clamp was active.
pub fn failure_time(c: f64, eps: f64, threshold: f64, dt: f64) -> (f64, f64, bool) {
    let raw = (-c / threshold + eps).exp();
    let lo = dt * (1.0 + 1e-9);
    let ttf = raw.clamp(lo, 0.999);
    (ttf.ln(), ttf, ttf != raw)
}

/// Generate `n` units for one client whose coefficients are
/// `N(c_mean, c_sd^2)` draws. Deterministic given `client_seed`.
pub fn gen_client(c_mean: f64, c_sd: f64, n: usize, scenario: &SimScenario, client_seed: u64) -> Vec<SimUnit> {
    let mut rng = ChaCha8Rng::seed_from_u64(client_seed);
    let mut clamped = 0usize;
    let units = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let c = c_mean + c_sd * z;
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let eps = (-(u.ln())).ln();
            let (y_log, ttf, was_clamped) = failure_time(c, eps, scenario.threshold, scenario.dt);
            if was_clamped {
                clamped += 1;
            }
            let mut signal = Vec::new();
            let mut k = 1usize;
            loop {
                let tau = k as f64 * scenario.dt;
                if tau >= ttf {
                    break;
                }
                let noise: f64 = rng.sample(StandardNormal);
                signal.push((tau, -c / tau.ln() + scenario.sigma_obs * noise));
                k += 1;
            }
            SimUnit { c, y_log, ttf, signal }
        })
        .collect();
    if clamped > 0 {
        log::debug!("clamped {clamped} of {n} failure times into (dt, 0.999)");
    }
    units
}

/// Least-squares projection of the observed signal onto the known path
/// shape `-1/ln(tau)`: the estimated coefficient `c_hat`.
pub fn extract_feature(unit: &SimUnit) -> Result<f64> {
    if unit.signal.is_empty() {
        return Err(Error::Empty("unit signal"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(tau, x) in &unit.signal {
        let u = -1.0 / tau.ln();
        num += x * u;
        den += u * u;
    }
    Ok(num / den)
}

/// One simulated client with its train/test split and the feature
/// standardization fitted on the training units.
#[derive(Debug, Clone)]
pub struct SimClient {
    pub id: String,
    pub train_units: Vec<SimUnit>,
    pub test_units: Vec<SimUnit>,
    /// Training-set mean and standard deviation of the extracted feature.
    pub feat_mean: f64,
    pub feat_sd: f64,
    /// Failure threshold carried over from the scenario.
    pub threshold: f64,
}

impl SimClient {
    fn standardize(&self, c_hat: f64) -> f64 {
        (c_hat - self.feat_mean) / self.feat_sd
    }

    fn design(&self, units: &[SimUnit]) -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(units.len(), 2);
        for (j, u) in units.iter().enumerate() {
            x[(j, 0)] = 1.0;
            x[(j, 1)] = self.standardize(extract_feature(u)?);
        }
        Ok(x)
    }

    /// Training regression data: responses on the log failure-time scale,
    /// features (1, standardized c_hat).
    pub fn train_dataset(&self) -> Result<ClientDataset> {
        let x = self.design(&self.train_units)?;
        let y = DVector::from_iterator(self.train_units.len(), self.train_units.iter().map(|u| u.y_log));
        ClientDataset::new(self.id.clone(), x, y)
    }

    /// Test design matrix under the training standardization.
    pub fn test_features(&self) -> Result<DMatrix<f64>> {
        self.design(&self.test_units)
    }

    /// Noise-free median failure time of each test unit, from the true
    /// coefficient: `exp(-c/D + Q_sev(0.5))`.
    pub fn test_truth_median_ttf(&self) -> Vec<f64> {
        let q50 = (2.0f64.ln()).ln();
        self.test_units
            .iter()
            .map(|u| (-u.c / self.threshold + q50).exp())
            .collect()
    }

    /// Realized failure times of the test units.
    pub fn test_observed_ttf(&self) -> Vec<f64> {
        self.test_units.iter().map(|u| u.ttf).collect()
    }
}

/// Between-group location shift as a multiple of the dispersion.
const GROUP_SHIFT: f64 = 0.52;
/// Between-group within-client-spread contrast.
const GROUP_SPREAD: f64 = 0.25;
/// Client-level jitter around the group centers.
const CLIENT_JITTER: f64 = 0.02;

/// Build every client of a scenario. Clients alternate between two latent
/// groups whose coefficient means and spreads separate proportionally to
/// the scenario dispersion, plus small client-level jitter from a derived
/// per-client stream, so clients are similar within a group, dissimilar
/// across groups, and the dissimilarity grows with sigma.
pub fn build_scenario(scenario: &SimScenario) -> Result<Vec<SimClient>> {
    scenario.validate()?;
    let s = scenario.sigma_scenario;
    (0..scenario.m())
        .map(|i| {
            let id = format!("client{:02}", i + 1);
            let mut hier = ChaCha8Rng::seed_from_u64(seeds::stream(scenario.seed, "sim-hier", i as u64));
            let dir = if i % 2 == 0 { -1.0 } else { 1.0 };
            let z1: f64 = hier.sample(StandardNormal);
            let z2: f64 = hier.sample(StandardNormal);
            let c_mean = C_BASE_MEAN + s * (GROUP_SHIFT * dir + CLIENT_JITTER * z1);
            let c_sd = s * (1.0 + GROUP_SPREAD * dir + CLIENT_JITTER * z2).max(0.3);

            let train = gen_client(
                c_mean,
                c_sd,
                scenario.n_train[i],
                scenario,
                seeds::stream(scenario.seed, "sim-train", i as u64),
            );
            let test = gen_client(
                c_mean,
                c_sd,
                scenario.n_test[i],
                scenario,
                seeds::stream(scenario.seed, "sim-test", i as u64),
            );

            let feats: Vec<f64> = train.iter().map(extract_feature).collect::<Result<_>>()?;
            let n = feats.len() as f64;
            let mean = feats.iter().sum::<f64>() / n;
            let var = feats.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = var.sqrt();
            let sd = if sd > 1e-12 { sd } else { 1.0 };

            Ok(SimClient {
                id,
                train_units: train,
                test_units: test,
                feat_mean: mean,
                feat_sd: sd,
                threshold: scenario.threshold,
            })
        })
        .collect()
}

/// Ten clients, 50 training and 50 test units each.
pub fn build_study1(sigma_scenario: f64, seed: u64) -> Result<Vec<SimClient>> {
    let scenario = SimScenario::new(vec![50; 10], vec![50; 10], sigma_scenario, seed)?;
    build_scenario(&scenario)
}

/// Twenty equally sized clients with 100 test units each.
pub fn build_study2_balanced(n_per_client: usize, seed: u64) -> Result<Vec<SimClient>> {
    let scenario = SimScenario::new(vec![n_per_client; 20], vec![100; 20], 0.5, seed)?;
    build_scenario(&scenario)
}

/// Twenty clients with training sizes 50, 60, ..., 240 and 100 test units
/// each. This scenario isolates sample-size effects, so it uses a mild
/// dispersion level.
pub fn build_study2_imbalanced(seed: u64) -> Result<Vec<SimClient>> {
    let sizes: Vec<usize> = (0..20).map(|i| 50 + 10 * i).collect();
    let scenario = SimScenario::new(sizes, vec![100; 20], 0.25, seed)?;
    build_scenario(&scenario)
}

/// Three clients holding 25, 10, and 5 training units with 50 test units
/// each.
pub fn build_study2_three_client(seed: u64) -> Result<Vec<SimClient>> {
    let scenario = SimScenario::new(vec![25, 10, 5], vec![50, 50, 50], 0.5, seed)?;
    build_scenario(&scenario)
}

/// Flat per-unit record used by the CSV interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub y_log: f64,
    pub ttf: f64,
    pub feature_c_hat: f64,
}

/// Write one client's units as CSV (unit_id, y_log, ttf, feature_c_hat).
pub fn dump_units_csv(client_id: &str, units: &[SimUnit], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (j, u) in units.iter().enumerate() {
        w.serialize(UnitRecord {
            unit_id: format!("{client_id}-{:03}", j + 1),
            y_log: u.y_log,
            ttf: u.ttf,
            feature_c_hat: extract_feature(u)?,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_units_csv(path: &Path) -> Result<Vec<UnitRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    if out.is_empty() {
        return Err(Error::Empty("unit csv"));
    }
    Ok(out)
}

/// Long-format signal dump (unit_id, tau, x).
pub fn dump_signals_csv(client_id: &str, units: &[SimUnit], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["unit_id", "tau", "x"])?;
    for (j, u) in units.iter().enumerate() {
        let uid = format!("{client_id}-{:03}", j + 1);
        for &(tau, x) in &u.signal {
            w.write_record([uid.as_str(), &format!("{tau:.6}"), &format!("{x:.12e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Regression dataset from interchange records: features (1, feature_c_hat)
/// as stored, responses y_log.
pub fn dataset_from_records(client_id: &str, records: &[UnitRecord]) -> Result<ClientDataset> {
    if records.is_empty() {
        return Err(Error::Empty("unit records"));
    }
    let mut x = DMatrix::zeros(records.len(), 2);
    let mut y = DVector::zeros(records.len());
    for (j, r) in records.iter().enumerate() {
        x[(j, 0)] = 1.0;
        x[(j, 1)] = r.feature_c_hat;
        y[j] = r.y_log;
    }
    ClientDataset::new(client_id, x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::local_mle;
    use approx::assert_relative_eq;

    fn scen(sigma: f64, seed: u64) -> SimScenario {
        SimScenario::new(vec![50; 10], vec![50; 10], sigma, seed).unwrap()
    }

    #[test]
    fn noiseless_failure_time_closed_form() {
        let (y, ttf, clamped) = failure_time(4.0, 0.0, 2.0, 0.001);
        assert_relative_eq!(y, -2.0, max_relative = 1e-12);
        assert_relative_eq!(ttf, (-2.0f64).exp(), max_relative = 1e-12);
        assert!((ttf - 0.1353353).abs() < 1e-7);
        assert!(!clamped);

        // clamp activates on extreme draws
        let (_, lo, c1) = failure_time(40.0, 0.0, 2.0, 0.001);
        assert!(c1 && lo > 0.001 && lo < 0.0011);
        let (_, hi, c2) = failure_time(-10.0, 0.0, 2.0, 0.001);
        assert!(c2 && hi == 0.999);
    }

    #[test]
    fn noiseless_signal_matches_path() {
        let mut s = scen(0.5, 1);
        s.sigma_obs = 0.0;
        let units = gen_client(4.0, 0.0, 5, &s, 42);
        for u in &units {
            assert_relative_eq!(u.c, 4.0, max_relative = 1e-12);
            for &(tau, x) in &u.signal {
                assert_relative_eq!(x, -4.0 / tau.ln(), max_relative = 1e-12);
            }
            // plug-in at tau closest to e^-1
            let target = (-1.0f64).exp();
            if let Some(&(tau, x)) = u
                .signal
                .iter()
                .min_by(|a, b| (a.0 - target).abs().partial_cmp(&(b.0 - target).abs()).unwrap())
            {
                if (tau - target).abs() < 1e-3 {
                    assert!((x - 4.0).abs() < 0.02);
                }
            }
            assert_relative_eq!(extract_feature(u).unwrap(), 4.0, max_relative = 1e-10);
        }
    }

    #[test]
    fn signal_support_is_valid_grid() {
        let s = scen(1.0, 7);
        for u in gen_client(4.0, 1.0, 200, &s, 9) {
            assert!(u.ttf > s.dt && u.ttf < 1.0);
            let mut prev = 0.0;
            for &(tau, _) in &u.signal {
                assert!(tau > prev && tau < u.ttf);
                let k = tau / s.dt;
                assert!((k - k.round()).abs() < 1e-9);
                prev = tau;
            }
        }
    }

    #[test]
    fn coefficient_and_noise_means_match_model() {
        let s = scen(0.5, 3);
        let units = gen_client(4.0, 0.5, 10_000, &s, 17);
        let mean_c = units.iter().map(|u| u.c).sum::<f64>() / units.len() as f64;
        assert!((mean_c - 4.0).abs() < 0.02, "mean c {mean_c}");
        // recover eps = y + c/D; SEV mean is -EulerGamma
        let mean_eps = units.iter().map(|u| u.y_log + u.c / s.threshold).sum::<f64>() / units.len() as f64;
        assert!((mean_eps + 0.5772).abs() < 0.02, "mean eps {mean_eps}");
    }

    #[test]
    fn extract_feature_linearity_and_noise() {
        let s = scen(0.5, 5);
        let units = gen_client(4.0, 0.3, 3, &s, 23);
        for u in &units {
            let base = extract_feature(u).unwrap();
            let mut scaled = u.clone();
            for p in &mut scaled.signal {
                p.1 *= 2.0;
            }
            assert_relative_eq!(extract_feature(&scaled).unwrap(), 2.0 * base, max_relative = 1e-12);
        }

        // noisy recovery across 100 seeds on the nominal horizon ttf = e^-2
        let ttf = (-2.0f64).exp();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut signal = Vec::new();
            let mut k = 1usize;
            loop {
                let tau = k as f64 * s.dt;
                if tau >= ttf {
                    break;
                }
                let noise: f64 = rng.sample(StandardNormal);
                signal.push((tau, -4.0 / tau.ln() + 0.05 * noise));
                k += 1;
            }
            let u = SimUnit { c: 4.0, y_log: ttf.ln(), ttf, signal };
            let c_hat = extract_feature(&u).unwrap();
            assert!((c_hat - 4.0).abs() < 0.05, "seed {seed}: c_hat {c_hat}");
        }

        let empty = SimUnit { c: 1.0, y_log: -1.0, ttf: 0.3, signal: vec![] };
        assert!(extract_feature(&empty).is_err());
    }

    #[test]
    fn study1_shapes_and_determinism() {
        let a = build_study1(0.5, 11).unwrap();
        assert_eq!(a.len(), 10);
        for c in &a {
            assert_eq!(c.train_units.len(), 50);
            assert_eq!(c.test_units.len(), 50);
            let d = c.train_dataset().unwrap();
            assert_eq!((d.n(), d.p()), (50, 2));
        }
        let b = build_study1(0.5, 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.feat_mean, y.feat_mean);
            for (u, v) in x.train_units.iter().zip(&y.train_units) {
                assert_eq!(u.y_log, v.y_log);
                assert_eq!(u.signal, v.signal);
            }
        }
        let c = build_study1(0.5, 12).unwrap();
        assert_ne!(a[0].train_units[0].y_log, c[0].train_units[0].y_log);
    }

    #[test]
    fn generator_consistency_recovers_truth() {
        // big single client, features = true c: the SEV fit must find
        // intercept 0, slope -1/D, scale 1
        let s = scen(0.5, 21);
        let units = gen_client(4.0, 0.5, 5000, &s, 77);
        let mut x = DMatrix::zeros(units.len(), 2);
        let mut y = DVector::zeros(units.len());
        for (j, u) in units.iter().enumerate() {
            x[(j, 0)] = 1.0;
            x[(j, 1)] = u.c;
            y[j] = u.y_log;
        }
        let data = ClientDataset::new("big", x, y).unwrap();
        let fit = local_mle(&data).unwrap();
        assert!(fit.params.beta[0].abs() < 0.12, "b0 {}", fit.params.beta[0]);
        assert!((fit.params.beta[1] + 0.5).abs() < 0.03, "b1 {}", fit.params.beta[1]);
        assert!((fit.params.sigma - 1.0).abs() < 0.05, "sigma {}", fit.params.sigma);
    }

    #[test]
    fn heterogeneity_ordering_in_fitted_slopes() {
        let mut ratios = Vec::new();
        for seed in 0..20u64 {
            let var_at = |sigma: f64| -> f64 {
                let clients = build_study1(sigma, 100 + seed).unwrap();
                let slopes: Vec<f64> = clients
                    .iter()
                    .map(|c| local_mle(&c.train_dataset().unwrap()).unwrap().params.beta[1])
                    .collect();
                let m = slopes.iter().sum::<f64>() / slopes.len() as f64;
                slopes.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (slopes.len() - 1) as f64
            };
            ratios.push(var_at(1.0) / var_at(0.5));
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[ratios.len() / 2];
        assert!(median > 1.0, "median variance ratio {median}");
    }

    #[test]
    fn study2_builders_match_counts() {
        let bal = build_study2_balanced(5, 1).unwrap();
        assert_eq!(bal.len(), 20);
        assert_eq!(bal.iter().map(|c| c.train_units.len()).sum::<usize>(), 100);
        assert!(bal.iter().all(|c| c.test_units.len() == 100));

        let imb = build_study2_imbalanced(1).unwrap();
        let sizes: Vec<usize> = imb.iter().map(|c| c.train_units.len()).collect();
        assert_eq!(sizes, (0..20).map(|i| 50 + 10 * i).collect::<Vec<_>>());

        let three = build_study2_three_client(1).unwrap();
        assert_eq!(three.iter().map(|c| c.train_units.len()).collect::<Vec<_>>(), vec![25, 10, 5]);
        assert_eq!(three.iter().map(|c| c.train_units.len()).sum::<usize>(), 40);
        assert!(three.iter().all(|c| c.test_units.len() == 50));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clients = build_study2_three_client(9).unwrap();
        let path = dir.path().join("c1_train.csv");
        dump_units_csv(&clients[0].id, &clients[0].train_units, &path).unwrap();
        let records = load_units_csv(&path).unwrap();
        assert_eq!(records.len(), 25);
        for (r, u) in records.iter().zip(&clients[0].train_units) {
            assert_eq!(r.y_log, u.y_log);
            assert_eq!(r.ttf, u.ttf);
            assert_eq!(r.feature_c_hat, extract_feature(u).unwrap());
        }
        let data = dataset_from_records("c1", &records).unwrap();
        assert_eq!((data.n(), data.p()), (25, 2));

        let sig = dir.path().join("c1_signals.csv");
        dump_signals_csv(&clients[0].id, &clients[0].train_units, &sig).unwrap();
        assert!(sig.exists());
    }

    #[test]
    fn truth_and_observed_ttf_are_positive() {
        let clients = build_study1(1.0, 5).unwrap();
        for c in &clients {
            for t in c.test_truth_median_ttf() {
                assert!(t > 0.0);
            }
            for t in c.test_observed_ttf() {
                assert!(t > 0.0 && t < 1.0);
            }
            assert_eq!(c.test_features().unwrap().nrows(), 50);
        }
    }
}
