//! Synthetic corridor data: nodes on a line road with a daily speed cycle,
//! a disturbance travelling downstream, local noise and optional incidents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SpeedDataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const STEPS_PER_DAY: usize = 288;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub seed: u64,
    /// White measurement noise (km/h).
    pub noise_std: f64,
    /// Amplitude of the disturbance shared along the corridor (km/h).
    pub wave_std: f64,
    /// Steps the disturbance takes to travel one node downstream.
    pub wave_lag: usize,
    /// Step-to-step correlation of the disturbance.
    pub wave_rho: f64,
    /// Per-node slowly varying noise (km/h).
    pub local_std: f64,
    /// Expected incidents per node per day.
    pub incident_rate: f64,
    pub incident_depth: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 20,
            days: 14,
            seed: 0,
            noise_std: 1.0,
            wave_std: 5.0,
            wave_lag: 3,
            wave_rho: 0.95,
            local_std: 1.0,
            incident_rate: 0.05,
            incident_depth: 20.0,
        }
    }
}

impl SynthConfig {
    /// All noise sources and incidents switched off.
    pub fn noiseless(nodes: usize, days: usize, seed: u64) -> Self {
        SynthConfig {
            nodes,
            days,
            seed,
            noise_std: 0.0,
            wave_std: 0.0,
            local_std: 0.0,
            incident_rate: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.days == 0 {
            return Err(Error::Parameter("nodes and days must be positive".into()));
        }
        let amounts = [
            self.noise_std,
            self.wave_std,
            self.local_std,
            self.incident_rate,
            self.incident_depth,
        ];
        if amounts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter(
                "noise levels and incident settings must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.wave_rho) {
            return Err(Error::Parameter(format!(
                "wave_rho must lie in [0, 1), got {}",
                self.wave_rho
            )));
        }
        Ok(())
    }
}

/// Ground truth behind a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub config: SynthConfig,
    pub steps: usize,
    /// Kilometre post of each node, increasing downstream.
    pub positions: Vec<f64>,
    pub base_speed: Vec<f64>,
    pub daily_amplitude: Vec<f64>,
    pub daily_phase: Vec<f64>,
    /// `(node, start step, duration)` of every incident.
    pub incidents: Vec<(usize, usize, usize)>,
}

pub struct SynthData {
    pub speeds: SpeedDataset,
    pub distances: Tensor,
    pub params: SynthParams,
}

fn ar1(rng: &mut ChaCha8Rng, len: usize, rho: f64, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    let innov = Normal::new(0.0, std * (1.0 - rho * rho).sqrt()).expect("valid normal");
    let start = Normal::new(0.0, std).expect("valid normal");
    let mut x = start.sample(rng);
    (0..len)
        .map(|_| {
            let out = x;
            x = rho * x + innov.sample(rng);
            out
        })
        .collect()
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, steps) = (cfg.nodes, cfg.days * STEPS_PER_DAY);

    let mut positions = Vec::with_capacity(n);
    let mut p = 0.0;
    for i in 0..n {
        if i > 0 {
            p += rng.random_range(0.5..2.0);
        }
        positions.push(round3(p));
    }
    let base_speed: Vec<f64> = (0..n).map(|_| round3(rng.random_range(55.0..70.0))).collect();
    let daily_amplitude: Vec<f64> = (0..n).map(|_| round3(rng.random_range(8.0..15.0))).collect();
    let daily_phase: Vec<f64> = (0..n).map(|_| round3(rng.random_range(0.0..0.3))).collect();

    let span = steps + cfg.wave_lag * (n - 1);
    let wave = ar1(&mut rng, span, cfg.wave_rho, cfg.wave_std);
    let local: Vec<Vec<f64>> = (0..n).map(|_| ar1(&mut rng, steps, 0.9, cfg.local_std)).collect();
    let white = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");

    let mut dips = vec![0.0; steps * n];
    let mut incidents = Vec::new();
    if cfg.incident_rate > 0.0 {
        let p_start = cfg.incident_rate / STEPS_PER_DAY as f64;
        for node in 0..n {
            for t in 0..steps {
                if rng.random::<f64>() < p_start {
                    let dur: usize = rng.random_range(6..=12);
                    let depth = cfg.incident_depth * rng.random_range(0.5..1.0);
                    for k in 0..dur.min(steps - t) {
                        let shape = 1.0 - k as f64 / dur as f64;
                        dips[(t + k) * n + node] += depth * shape;
                    }
                    incidents.push((node, t, dur));
                }
            }
        }
    }

    let mut data = Vec::with_capacity(steps * n);
    for t in 0..steps {
        let phase = 2.0 * std::f64::consts::PI * (t % STEPS_PER_DAY) as f64 / STEPS_PER_DAY as f64;
        for i in 0..n {
            let daily = base_speed[i] + daily_amplitude[i] * (phase - daily_phase[i]).sin();
            // Node i sees the disturbance that left the head of the corridor
            // `wave_lag · i` steps earlier.
            let w = wave[t + cfg.wave_lag * (n - 1 - i)];
            let noise = if cfg.noise_std > 0.0 {
                white.sample(&mut rng)
            } else {
                0.0
            };
            let v = daily + w + local[i][t] + noise - dips[t * n + i];
            data.push(round3(v.max(1.0)));
        }
    }

    let mut dist = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            dist[a * n + b] = round3((positions[a] - positions[b]).abs());
        }
    }
    let speeds = SpeedDataset::new(format!("synth_{n}n_{}d", cfg.days), Tensor::new(vec![steps, n], data)?)?;
    Ok(SynthData {
        speeds,
        distances: Tensor::new(vec![n, n], dist)?,
        params: SynthParams {
            config: cfg.clone(),
            steps,
            positions,
            base_speed,
            daily_amplitude,
            daily_phase,
            incidents,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_periodicity() {
        let d = generate(&SynthConfig::noiseless(2, 2, 5)).unwrap();
        assert_eq!(d.speeds.matrix.shape(), &[576, 2]);
        let m = d.speeds.matrix.data();
        for k in 0..288 * 2 {
            assert_eq!(m[k], m[k + 288 * 2]);
        }
        assert_eq!(d.distances.at(&[0, 0]), 0.0);
        assert_eq!(d.distances.at(&[0, 1]), d.distances.at(&[1, 0]));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = SynthConfig { nodes: 3, days: 1, seed: 9, incident_rate: 2.0, ..Default::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.speeds, b.speeds);
        assert_eq!(a.params, b.params);
        assert!(a.speeds.matrix.data().iter().all(|&v| v >= 1.0));
    }
}
