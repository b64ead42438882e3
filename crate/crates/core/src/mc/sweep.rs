//! Randomized configuration sweeps for the composition checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mc::verify::{verify, Tolerances, TrialConfig, Topology, VerificationReport, DEFAULT_MAX_DIM};
use crate::moments::ComponentSpec;
use crate::rng::trial_rng;

/// Sampling ranges; each pair is an inclusive `(low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRanges {
    pub dim: (usize, usize),
    pub depth: (usize, usize),
    pub branches: (usize, usize),
    /// Weight entry standard deviation.
    pub sigma: (f64, f64),
    pub input_mean: (f64, f64),
    pub input_std: (f64, f64),
}

impl Default for SweepRanges {
    fn default() -> Self {
        Self {
            dim: (500, 1500),
            depth: (2, 8),
            branches: (2, 8),
            sigma: (0.1, 2.0),
            input_mean: (-5.0, 5.0),
            input_std: (0.1, 5.0),
        }
    }
}

fn layer(m: usize, n: usize, sigma: f64) -> Vec<ComponentSpec<f64>> {
    vec![
        ComponentSpec::DenseGaussian { m, n, mu: 0.0, sigma2: sigma * sigma },
        ComponentSpec::relu(),
    ]
}

/// Random Gaussian+ReLU chains.
pub fn multiplication_configs(count: usize, seed: u64, trials: usize, r: &SweepRanges) -> Vec<TrialConfig> {
    (0..count as u64)
        .map(|i| {
            let mut rng = trial_rng(seed, i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let depth = rng.gen_range(r.depth.0..=r.depth.1);
            let dims: Vec<usize> = (0..=depth).map(|_| rng.gen_range(r.dim.0..=r.dim.1)).collect();
            let layers = (0..depth)
                .map(|l| layer(dims[l + 1], dims[l], rng.gen_range(r.sigma.0..=r.sigma.1)))
                .collect();
            TrialConfig {
                seed: rng.gen(),
                dims,
                topology: Topology::Chain(layers),
                trials,
                input_mean: rng.gen_range(r.input_mean.0..=r.input_mean.1),
                input_std: rng.gen_range(r.input_std.0..=r.input_std.1),
                max_dim: DEFAULT_MAX_DIM.max(r.dim.1),
            }
        })
        .collect()
}

/// Random sums of central Gaussian+ReLU branches.
pub fn addition_configs(count: usize, seed: u64, trials: usize, r: &SweepRanges) -> Vec<TrialConfig> {
    (0..count as u64)
        .map(|i| {
            let mut rng = trial_rng(seed, i.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
            let m = rng.gen_range(r.dim.0..=r.dim.1);
            let k = rng.gen_range(r.branches.0..=r.branches.1);
            let branches = (0..k).map(|_| layer(m, m, rng.gen_range(r.sigma.0..=r.sigma.1))).collect();
            TrialConfig {
                seed: rng.gen(),
                dims: vec![m, m],
                topology: Topology::Parallel(branches),
                trials,
                input_mean: rng.gen_range(r.input_mean.0..=r.input_mean.1),
                input_std: rng.gen_range(r.input_std.0..=r.input_std.1),
                max_dim: DEFAULT_MAX_DIM.max(r.dim.1),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub reports: Vec<VerificationReport>,
    /// Fraction of configs whose phi ratio is inside its band.
    pub phi_in_band: f64,
    pub varphi_in_band: f64,
}

pub fn run_sweep(configs: &[TrialConfig], tol: Tolerances) -> Result<SweepSummary> {
    let mut reports = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut r = verify(cfg)?;
        r.set_tolerances(tol);
        reports.push(r);
    }
    let n = reports.len().max(1) as f64;
    let phi_in_band = reports.iter().filter(|r| tol.phi.contains(r.phi_ratio)).count() as f64 / n;
    let varphi_in_band = reports.iter().filter(|r| tol.varphi.contains(r.varphi_ratio)).count() as f64 / n;
    Ok(SweepSummary {
        reports,
        phi_in_band,
        varphi_in_band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configs_respect_ranges() {
        let r = SweepRanges::default();
        for cfg in multiplication_configs(20, 7, 3, &r) {
            let Topology::Chain(layers) = &cfg.topology else { panic!() };
            assert!((2..=8).contains(&layers.len()));
            assert!(cfg.dims.iter().all(|d| (500..=1500).contains(d)));
        }
        for cfg in addition_configs(20, 7, 3, &r) {
            let Topology::Parallel(b) = &cfg.topology else { panic!() };
            assert!((2..=8).contains(&b.len()));
        }
        assert_eq!(multiplication_configs(3, 1, 2, &r), multiplication_configs(3, 1, 2, &r));
    }

    #[test]
    fn small_sweep_runs() {
        let r = SweepRanges {
            dim: (60, 120),
            depth: (2, 3),
            branches: (2, 3),
            ..SweepRanges::default()
        };
        let s = run_sweep(&multiplication_configs(3, 5, 4, &r), Tolerances::default()).unwrap();
        assert_eq!(s.reports.len(), 3);
        assert!(s.reports.iter().all(|x| x.phi_ratio > 0.5 && x.phi_ratio < 1.5));
    }
}
