//! Scenario datasets: synthetic base profiles, noisy replicas, train/test
//! splits, and meter masks.
//!
//! A base profile covers one control window at one-minute resolution. Load
//! follows a smooth diurnal hump scaled so its per-bus peak hits the bus
//! benchmark; solar follows a clear-sky bell whose peak is the bus panel
//! rating. Power factors are sampled once per (bus, time) and shared across
//! replicas, so reactive load always derives from the (noisy) active load
//! through the same lagging power factor. Zero-mean Gaussian noise with
//! standard deviation `ratio x mean(profile)` per bus produces the replicas;
//! negative draws clip at zero.

use crate::feeder::FeederModel;
use crate::powerflow::GridConditions;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("profile set is empty")]
    EmptyProfiles,
    #[error("noise sigma ratio must be nonnegative")]
    NegativeSigma,
    #[error("replica count must be positive")]
    NoReplicas,
    #[error("train fraction must lie strictly between 0 and 1")]
    BadFraction,
    #[error("meter mask is empty")]
    EmptyMask,
    #[error("meter mask bus {0} is not a valid non-substation bus")]
    BadMaskBus(usize),
    #[error("meter mask omits controlled inverter bus {0}, whose solar feeds the output scaling")]
    MaskOmitsControlledBus(usize),
    #[error("profile bus ids must be exactly 1..=N")]
    BadProfileIds,
    #[error("failed to read profiles: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse profiles: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("scenario file is malformed: {0}")]
    BadScenarioFile(String),
}

/// One scenario: the true grid conditions plus the proxy view the policy sees.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub theta: GridConditions,
    /// Masked, flattened view of `theta` under the active meter set.
    pub phi: DVector<f64>,
    pub timestamp_index: usize,
}

/// Per-bus peak values that anchor the synthetic profile shapes, in p.u.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusProfile {
    pub id: usize,
    pub peak_load_pu: f64,
    #[serde(default)]
    pub peak_solar_pu: f64,
}

/// Compact profile description: expanded into per-minute series on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub t_points: usize,
    pub buses: Vec<BusProfile>,
}

impl ProfileSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Expands the compact spec into per-minute base series.
    pub fn expand(&self) -> Result<BaseProfiles, ScenarioError> {
        if self.t_points == 0 || self.buses.is_empty() {
            return Err(ScenarioError::EmptyProfiles);
        }
        let n = self.buses.len();
        let mut sorted = self.buses.clone();
        sorted.sort_by_key(|b| b.id);
        if sorted.iter().enumerate().any(|(i, b)| b.id != i + 1) {
            return Err(ScenarioError::BadProfileIds);
        }
        let t_points = self.t_points;
        let mut load = DMatrix::zeros(n, t_points);
        let mut solar = DMatrix::zeros(n, t_points);
        for t in 0..t_points {
            let tau = if t_points == 1 {
                0.0
            } else {
                t as f64 / (t_points - 1) as f64
            };
            let ls = load_shape(tau);
            let ss = solar_shape(tau);
            for (i, bus) in sorted.iter().enumerate() {
                load[(i, t)] = bus.peak_load_pu * ls;
                solar[(i, t)] = bus.peak_solar_pu * ss;
            }
        }
        Ok(BaseProfiles { load, solar })
    }
}

/// Midday load: a gentle hump around half the benchmark peak, which the
/// feeder only reaches in the evening.
fn load_shape(tau: f64) -> f64 {
    0.5 + 0.1 * (std::f64::consts::PI * tau).sin()
}

/// Clear-sky solar bell: near peak through midday, easing toward the late
/// afternoon while staying well above zero inside the window.
fn solar_shape(tau: f64) -> f64 {
    (-((tau - 0.35) / 0.7).powi(2)).exp()
}

/// Per-minute base series for every non-substation bus (rows) and time (cols).
#[derive(Debug, Clone)]
pub struct BaseProfiles {
    pub load: DMatrix<f64>,
    pub solar: DMatrix<f64>,
}

impl BaseProfiles {
    pub fn n(&self) -> usize {
        self.load.nrows()
    }

    pub fn t_points(&self) -> usize {
        self.load.ncols()
    }
}

/// Generates `replicas x t_points` scenarios by adding per-bus Gaussian noise
/// to the base series. Scenario order is replica-major: all timestamps of
/// replica 0, then replica 1, and so on. The returned scenarios carry the
/// full (unmasked) proxy vector.
pub fn generate_dataset(
    profiles: &BaseProfiles,
    noise_sigma_ratio: f64,
    replicas: usize,
    seed: u64,
) -> Result<Vec<Scenario>, ScenarioError> {
    if profiles.n() == 0 || profiles.t_points() == 0 {
        return Err(ScenarioError::EmptyProfiles);
    }
    if noise_sigma_ratio < 0.0 {
        return Err(ScenarioError::NegativeSigma);
    }
    if replicas == 0 {
        return Err(ScenarioError::NoReplicas);
    }
    let n = profiles.n();
    let t_points = profiles.t_points();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Lagging power factor per (bus, time), shared by all replicas so the
    // reactive load always derives from the active load via the same angle.
    let tan_phi = DMatrix::from_fn(n, t_points, |_, _| {
        let pf: f64 = rng.random_range(0.9..=1.0);
        (pf.acos()).tan()
    });

    let sigma_load: Vec<f64> = (0..n)
        .map(|i| noise_sigma_ratio * profiles.load.row(i).mean())
        .collect();
    let sigma_solar: Vec<f64> = (0..n)
        .map(|i| noise_sigma_ratio * profiles.solar.row(i).mean())
        .collect();

    let mut out = Vec::with_capacity(replicas * t_points);
    for _replica in 0..replicas {
        for t in 0..t_points {
            let mut p_c = DVector::zeros(n);
            let mut q_c = DVector::zeros(n);
            let mut p_g = DVector::zeros(n);
            for i in 0..n {
                let noise_l: f64 = rng.sample(rand_distr::StandardNormal);
                let noise_s: f64 = rng.sample(rand_distr::StandardNormal);
                p_c[i] = (profiles.load[(i, t)] + sigma_load[i] * noise_l).max(0.0);
                p_g[i] = (profiles.solar[(i, t)] + sigma_solar[i] * noise_s).max(0.0);
                q_c[i] = p_c[i] * tan_phi[(i, t)];
            }
            let theta = GridConditions::new(p_c, q_c, p_g);
            let phi = full_phi(&theta);
            out.push(Scenario {
                theta,
                phi,
                timestamp_index: t,
            });
        }
    }
    Ok(out)
}

fn full_phi(theta: &GridConditions) -> DVector<f64> {
    let n = theta.n();
    let mut phi = DVector::zeros(3 * n);
    phi.rows_mut(0, n).copy_from(&theta.p_c);
    phi.rows_mut(n, n).copy_from(&theta.q_c);
    phi.rows_mut(2 * n, n).copy_from(&theta.p_g);
    phi
}

/// Splits a dataset into train/test. The first `floor(fraction * len)`
/// scenarios form the training set, which is then shuffled; the remainder is
/// the test set, kept in order.
pub fn split(
    dataset: Vec<Scenario>,
    train_fraction: f64,
    shuffle_seed: u64,
) -> Result<(Vec<Scenario>, Vec<Scenario>), ScenarioError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ScenarioError::BadFraction);
    }
    let n_train = (train_fraction * dataset.len() as f64).floor() as usize;
    let mut dataset = dataset;
    let test = dataset.split_off(n_train);
    let mut train = dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    train.shuffle(&mut rng);
    Ok((train, test))
}

/// The set of buses with real-time metering. The proxy vector stacks
/// `[p_c, q_c, p_g]` restricted to the metered buses, ascending by bus id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterMask {
    metered: Vec<usize>,
}

impl MeterMask {
    /// Builds a mask, checking that every controlled inverter bus is metered
    /// (the output scaling consumes its solar generation as an input).
    pub fn new(mut metered: Vec<usize>, feeder: &FeederModel) -> Result<Self, ScenarioError> {
        metered.sort_unstable();
        metered.dedup();
        if metered.is_empty() {
            return Err(ScenarioError::EmptyMask);
        }
        if let Some(&bad) = metered.iter().find(|&&b| b == 0 || b > feeder.n()) {
            return Err(ScenarioError::BadMaskBus(bad));
        }
        for &c in feeder.controlled_buses() {
            if !metered.contains(&c) {
                return Err(ScenarioError::MaskOmitsControlledBus(c));
            }
        }
        Ok(Self { metered })
    }

    /// All non-substation buses.
    pub fn full(feeder: &FeederModel) -> Self {
        Self {
            metered: (1..=feeder.n()).collect(),
        }
    }

    /// Only the buses hosting solar generation.
    pub fn solar(feeder: &FeederModel) -> Result<Self, ScenarioError> {
        Self::new(feeder.solar_buses().to_vec(), feeder)
    }

    pub fn metered_buses(&self) -> &[usize] {
        &self.metered
    }

    pub fn phi_dim(&self) -> usize {
        3 * self.metered.len()
    }

    /// Flattens the metered portion of the grid conditions into the proxy
    /// vector: `[p_c over metered, q_c over metered, p_g over metered]`.
    pub fn build_phi(&self, theta: &GridConditions) -> DVector<f64> {
        let m = self.metered.len();
        let mut phi = DVector::zeros(3 * m);
        for (j, &bus) in self.metered.iter().enumerate() {
            phi[j] = theta.p_c[bus - 1];
            phi[m + j] = theta.q_c[bus - 1];
            phi[2 * m + j] = theta.p_g[bus - 1];
        }
        phi
    }
}

/// Rebuilds every scenario's proxy vector under the given mask.
pub fn apply_mask(scenarios: &mut [Scenario], mask: &MeterMask) {
    for s in scenarios.iter_mut() {
        s.phi = mask.build_phi(&s.theta);
    }
}

/// Writes scenarios as CSV: `timestamp_index, p_c_1.., q_c_1.., p_g_1..`.
pub fn write_scenarios_csv(
    writer: impl Write,
    scenarios: &[Scenario],
) -> Result<(), ScenarioError> {
    let n = scenarios.first().map(|s| s.theta.n()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp_index".to_string()];
    for prefix in ["p_c", "q_c", "p_g"] {
        for bus in 1..=n {
            header.push(format!("{prefix}_{bus}"));
        }
    }
    w.write_record(&header)?;
    for s in scenarios {
        let mut row = vec![s.timestamp_index.to_string()];
        for v in [&s.theta.p_c, &s.theta.q_c, &s.theta.p_g] {
            row.extend(v.iter().map(|x| format!("{x}")));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads scenarios back from CSV; the proxy vectors are the full flatten
/// until a mask is applied.
pub fn read_scenarios_csv(path: impl AsRef<Path>) -> Result<Vec<Scenario>, ScenarioError> {
    let mut reader = csv::Reader::from_path(path)?;
    let width = reader.headers()?.len();
    if width < 4 || (width - 1) % 3 != 0 {
        return Err(ScenarioError::BadScenarioFile(format!(
            "expected 1 + 3N columns, found {width}"
        )));
    }
    let n = (width - 1) / 3;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != width {
            return Err(ScenarioError::BadScenarioFile(
                "ragged row in scenario file".to_string(),
            ));
        }
        let parse = |s: &str| -> Result<f64, ScenarioError> {
            s.parse()
                .map_err(|_| ScenarioError::BadScenarioFile(format!("bad float {s:?}")))
        };
        let timestamp_index = record[0]
            .parse()
            .map_err(|_| ScenarioError::BadScenarioFile("bad timestamp index".to_string()))?;
        let mut values = Vec::with_capacity(3 * n);
        for field in record.iter().skip(1) {
            values.push(parse(field)?);
        }
        let theta = GridConditions::new(
            DVector::from_row_slice(&values[..n]),
            DVector::from_row_slice(&values[n..2 * n]),
            DVector::from_row_slice(&values[2 * n..]),
        );
        let phi = full_phi(&theta);
        out.push(Scenario {
            theta,
            phi,
            timestamp_index,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{Bus, FeederModel, Line};

    fn spec(n: usize, t: usize) -> ProfileSpec {
        ProfileSpec {
            t_points: t,
            buses: (1..=n)
                .map(|id| BusProfile {
                    id,
                    peak_load_pu: 0.01 * id as f64,
                    peak_solar_pu: if id % 2 == 0 { 0.02 * id as f64 } else { 0.0 },
                })
                .collect(),
        }
    }

    fn small_feeder() -> FeederModel {
        let bus = |id, solar, ctrl| Bus {
            id,
            has_load: id != 0,
            has_solar: solar,
            has_inverter_control: ctrl,
            s_max: if ctrl { Some(0.1) } else { None },
            v_min: 0.97,
            v_max: 1.03,
        };
        FeederModel::from_parts(
            vec![
                bus(0, false, false),
                bus(1, false, false),
                bus(2, true, true),
                bus(3, true, false),
            ],
            vec![
                Line { from: 0, to: 1, r: 0.01, x: 0.02 },
                Line { from: 1, to: 2, r: 0.01, x: 0.02 },
                Line { from: 1, to: 3, r: 0.01, x: 0.02 },
            ],
            1.0,
            4.8,
        )
        .unwrap()
    }

    #[test]
    fn replica_count_times_window_length() {
        let profiles = spec(3, 240).expand().unwrap();
        let data = generate_dataset(&profiles, 0.1, 5, 1).unwrap();
        assert_eq!(data.len(), 1200);
    }

    #[test]
    fn zero_sigma_replicas_are_identical() {
        let profiles = spec(3, 12).expand().unwrap();
        let data = generate_dataset(&profiles, 0.0, 3, 1).unwrap();
        for r in 1..3 {
            for t in 0..12 {
                let a = &data[t];
                let b = &data[r * 12 + t];
                assert_eq!(a.theta, b.theta);
                assert_eq!(a.timestamp_index, b.timestamp_index);
            }
        }
    }

    #[test]
    fn power_factor_stays_in_lagging_band() {
        let profiles = spec(4, 30).expand().unwrap();
        let data = generate_dataset(&profiles, 0.1, 4, 7).unwrap();
        let tan_max = (0.9f64.acos()).tan();
        for s in &data {
            for i in 0..4 {
                assert!(s.theta.p_c[i] >= 0.0);
                assert!(s.theta.p_g[i] >= 0.0);
                if s.theta.p_c[i] > 0.0 {
                    let ratio = s.theta.q_c[i] / s.theta.p_c[i];
                    assert!(
                        (0.0..=tan_max + 1e-12).contains(&ratio),
                        "tan(phi) out of band: {ratio}"
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let profiles = spec(3, 20).expand().unwrap();
        let a = generate_dataset(&profiles, 0.1, 2, 42).unwrap();
        let b = generate_dataset(&profiles, 0.1, 2, 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.theta, y.theta);
            assert_eq!(x.phi, y.phi);
        }
        let c = generate_dataset(&profiles, 0.1, 2, 43).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.theta != y.theta));
    }

    #[test]
    fn replica_mean_approaches_base_profile() {
        let profiles = spec(2, 6).expand().unwrap();
        let replicas = 100;
        let data = generate_dataset(&profiles, 0.1, replicas, 5).unwrap();
        let sigma = 0.1 * profiles.load.row(0).mean();
        let bound = 3.0 * sigma / (replicas as f64).sqrt();
        for t in 0..6 {
            let mean: f64 = (0..replicas)
                .map(|r| data[r * 6 + t].theta.p_c[0])
                .sum::<f64>()
                / replicas as f64;
            assert!(
                (mean - profiles.load[(0, t)]).abs() < bound,
                "sample mean drifted beyond {bound}"
            );
        }
    }

    #[test]
    fn rejects_bad_generation_inputs() {
        let profiles = spec(2, 6).expand().unwrap();
        assert!(matches!(
            generate_dataset(&profiles, -0.1, 2, 1),
            Err(ScenarioError::NegativeSigma)
        ));
        assert!(matches!(
            ProfileSpec {
                t_points: 0,
                buses: vec![]
            }
            .expand(),
            Err(ScenarioError::EmptyProfiles)
        ));
    }

    #[test]
    fn split_matches_documented_counts() {
        let profiles = spec(3, 240).expand().unwrap();
        let data = generate_dataset(&profiles, 0.1, 5, 1).unwrap();
        let (train, test) = split(data, 0.8, 9).unwrap();
        assert_eq!(train.len(), 960);
        assert_eq!(test.len(), 240);
    }

    #[test]
    fn split_keeps_at_least_one_test_element() {
        let profiles = spec(2, 10).expand().unwrap();
        let data = generate_dataset(&profiles, 0.1, 1, 1).unwrap();
        let (train, test) = split(data, 0.999, 3).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 1);
        let profiles = spec(2, 10).expand().unwrap();
        let data = generate_dataset(&profiles, 0.1, 1, 1).unwrap();
        assert!(matches!(split(data, 1.0, 3), Err(ScenarioError::BadFraction)));
    }

    #[test]
    fn split_is_deterministic_and_shuffles_only_train() {
        let profiles = spec(3, 30).expand().unwrap();
        let data = generate_dataset(&profiles, 0.1, 2, 1).unwrap();
        let (tr1, te1) = split(data.clone(), 0.8, 11).unwrap();
        let (tr2, te2) = split(data.clone(), 0.8, 11).unwrap();
        for (a, b) in tr1.iter().zip(&tr2) {
            assert_eq!(a.theta, b.theta);
        }
        // Test half preserves the generation order.
        for (a, b) in te1.iter().zip(&data[48..]) {
            assert_eq!(a.theta, b.theta);
        }
        for (a, b) in te2.iter().zip(&data[48..]) {
            assert_eq!(a.theta, b.theta);
        }
        // The shuffled training set is a permutation, not the original order.
        assert!(tr1
            .iter()
            .zip(&data[..48])
            .any(|(a, b)| a.theta != b.theta));
    }

    #[test]
    fn full_mask_reproduces_flattened_theta() {
        let feeder = small_feeder();
        let profiles = spec(3, 10).expand().unwrap();
        let mut data = generate_dataset(&profiles, 0.1, 1, 1).unwrap();
        let mask = MeterMask::full(&feeder);
        apply_mask(&mut data, &mask);
        for s in &data {
            assert_eq!(s.phi.len(), 9);
            assert_eq!(s.phi, full_phi(&s.theta));
        }
    }

    #[test]
    fn solar_mask_has_three_entries_per_solar_bus() {
        let feeder = small_feeder();
        let mask = MeterMask::solar(&feeder).unwrap();
        assert_eq!(mask.metered_buses(), &[2, 3]);
        assert_eq!(mask.phi_dim(), 6);
        let profiles = spec(3, 4).expand().unwrap();
        let mut data = generate_dataset(&profiles, 0.1, 1, 1).unwrap();
        apply_mask(&mut data, &mask);
        let s = &data[0];
        assert_eq!(s.phi.len(), 6);
        assert_eq!(s.phi[0], s.theta.p_c[1]);
        assert_eq!(s.phi[2], s.theta.q_c[1]);
        assert_eq!(s.phi[5], s.theta.p_g[2]);
    }

    #[test]
    fn mask_must_cover_controlled_buses() {
        let feeder = small_feeder();
        let err = MeterMask::new(vec![1, 3], &feeder);
        assert!(matches!(err, Err(ScenarioError::MaskOmitsControlledBus(2))));
        assert!(matches!(
            MeterMask::new(vec![0, 2], &feeder),
            Err(ScenarioError::BadMaskBus(0))
        ));
    }

    #[test]
    fn csv_roundtrip_preserves_scenarios() {
        let profiles = spec(3, 8).expand().unwrap();
        let data = generate_dataset(&profiles, 0.1, 2, 3).unwrap();
        let mut buf = Vec::new();
        write_scenarios_csv(&mut buf, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenarios.csv");
        std::fs::write(&path, &buf).unwrap();
        let back = read_scenarios_csv(&path).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.timestamp_index, b.timestamp_index);
            assert_eq!(a.theta, b.theta);
        }
    }
}
