//! Monte-Carlo verification of the composition rules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{compose_parallel_traced, compose_serial_traced, VarphiPolicy};
use crate::mc::factor::JacobianFactor;
use crate::mc::sample::sample_component;
use crate::moments::{component_moments, structure_flags, ComponentSpec, Moments, StructureFlags};
use crate::rng::{trial_rng, TrialRng};

pub const DEFAULT_MAX_DIM: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Layers applied in order; each layer is one factor of the product.
    Chain(Vec<Vec<ComponentSpec<f64>>>),
    /// Branches fed the same input and summed.
    Parallel(Vec<Vec<ComponentSpec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub seed: u64,
    /// Widths at factor boundaries (`[in, out]` for a parallel set).
    pub dims: Vec<usize>,
    pub topology: Topology,
    pub trials: usize,
    /// Network input `x ~ N(input_mean, input_std²)`.
    pub input_mean: f64,
    pub input_std: f64,
    pub max_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub phi: Band,
    pub varphi: Band,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            phi: Band { lo: 0.93, hi: 1.07 },
            varphi: Band { lo: 0.80, hi: 1.20 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub phi_hat: f64,
    pub varphi_hat: f64,
    /// Composition rule applied to the per-factor empirical moments.
    pub phi_composed: f64,
    pub varphi_composed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Mean over trials of empirical / composed phi.
    pub phi_ratio: f64,
    pub varphi_ratio: f64,
    /// Analytic library prediction for the whole product or sum.
    pub library: Moments<f64>,
    /// Mean over trials of empirical / library phi.
    pub phi_ratio_library: f64,
    pub varphi_ratio_library: Option<f64>,
    pub trials: Vec<TrialRecord>,
    pub tolerances: Tolerances,
    pub pass: bool,
}

fn ratio(hat: f64, theory: f64) -> f64 {
    if hat == theory {
        1.0
    } else {
        hat / theory
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl TrialConfig {
    fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidParameter {
                name: "trials",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        if !(self.input_std >= 0.0) || !self.input_mean.is_finite() || !self.input_std.is_finite() {
            return Err(Error::InvalidParameter {
                name: "input_std",
                value: self.input_std,
                reason: "input distribution must be finite with non-negative spread",
            });
        }
        let (chains, expected_dims) = match &self.topology {
            Topology::Chain(layers) => (layers, layers.len() + 1),
            Topology::Parallel(branches) => (branches, 2),
        };
        if chains.is_empty() {
            return Err(Error::EmptyChain);
        }
        if self.dims.len() != expected_dims {
            return Err(Error::LengthMismatch {
                expected: expected_dims,
                found: self.dims.len(),
            });
        }
        for (k, chain) in chains.iter().enumerate() {
            let (start, end) = match self.topology {
                Topology::Chain(_) => (self.dims[k], self.dims[k + 1]),
                Topology::Parallel(_) => (self.dims[0], self.dims[1]),
            };
            if chain.is_empty() {
                return Err(Error::EmptyChain);
            }
            let mut w = start;
            for spec in chain {
                spec.validate()?;
                w = spec.out_width(w)?;
                if w > self.max_dim {
                    return Err(Error::SizeLimit {
                        what: "matrix dimension",
                        size: w,
                        limit: self.max_dim,
                    });
                }
            }
            if w != end {
                return Err(Error::DimensionMismatch {
                    context: format!("factor {k} output"),
                    expected: end,
                    found: w,
                });
            }
        }
        if let Some(&big) = self.dims.iter().find(|&&d| d > self.max_dim) {
            return Err(Error::SizeLimit {
                what: "matrix dimension",
                size: big,
                limit: self.max_dim,
            });
        }
        Ok(())
    }

    fn input(&self, rng: &mut TrialRng) -> Vec<f64> {
        use rand::Rng;
        (0..self.dims[0])
            .map(|_| self.input_mean + self.input_std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    }
}

/// Samples one chain of components and returns its Jacobian and output.
fn sample_chain(chain: &[ComponentSpec<f64>], input: Vec<f64>, rng: &mut TrialRng) -> Result<(JacobianFactor, Vec<f64>)> {
    let mut x = input;
    let mut factors = Vec::with_capacity(chain.len());
    for spec in chain {
        let s = sample_component(spec, &x, rng)?;
        x = s.output;
        factors.push(s.jacobian);
    }
    let j = JacobianFactor::chain(&factors).ok_or(Error::EmptyChain)?;
    Ok((j, x))
}

/// Library moments and flags of each chain, starting at the given widths.
fn library_parts(chains: &[Vec<ComponentSpec<f64>>], widths: &[usize]) -> Result<Vec<(Moments<f64>, StructureFlags)>> {
    chains
        .iter()
        .zip(widths)
        .map(|(chain, &w0)| {
            let mut w = w0;
            let parts = chain
                .iter()
                .map(|spec| {
                    let m = component_moments(spec, w)?;
                    w = m.out_dim;
                    Ok((m, structure_flags(spec)))
                })
                .collect::<Result<Vec<_>>>()?;
            let c = compose_serial_traced(&parts, VarphiPolicy::Assume)?;
            Ok((c.moments, c.flags))
        })
        .collect()
}

fn run_trials(cfg: &TrialConfig, lib: &Moments<f64>, trial: impl Fn(u64) -> Result<TrialRecord> + Sync + Send) -> Result<VerificationReport> {
    let trials = (0..cfg.trials as u64)
        .into_par_iter()
        .map(trial)
        .collect::<Result<Vec<_>>>()?;
    let tolerances = Tolerances::default();
    let phi_ratio = mean(trials.iter().map(|t| ratio(t.phi_hat, t.phi_composed)));
    let varphi_ratio = mean(trials.iter().map(|t| ratio(t.varphi_hat, t.varphi_composed)));
    let phi_ratio_library = mean(trials.iter().map(|t| ratio(t.phi_hat, lib.phi)));
    let varphi_ratio_library = lib.varphi.map(|v| mean(trials.iter().map(|t| ratio(t.varphi_hat, v))));
    let mut report = VerificationReport {
        phi_ratio,
        varphi_ratio,
        library: *lib,
        phi_ratio_library,
        varphi_ratio_library,
        trials,
        tolerances,
        pass: false,
    };
    report.set_tolerances(tolerances);
    Ok(report)
}

impl VerificationReport {
    /// Re-evaluates `pass` against new bands.
    pub fn set_tolerances(&mut self, tol: Tolerances) {
        self.tolerances = tol;
        self.pass = tol.phi.contains(self.phi_ratio) && tol.varphi.contains(self.varphi_ratio);
    }
}

/// Checks the product rule on a chain of sampled layers.
pub fn verify_multiplication(cfg: &TrialConfig) -> Result<VerificationReport> {
    cfg.check()?;
    let Topology::Chain(layers) = &cfg.topology else {
        return Err(Error::InvalidGraph("multiplication check needs a chain topology".into()));
    };
    let lib_layers = library_parts(layers, &cfg.dims)?;
    let lib = compose_serial_traced(&lib_layers, VarphiPolicy::Assume)?.moments;
    run_trials(cfg, &lib, |t| {
        let mut rng = trial_rng(cfg.seed, t);
        let mut x = cfg.input(&mut rng);
        let mut factors = Vec::with_capacity(layers.len());
        for layer in layers {
            let (j, out) = sample_chain(layer, x, &mut rng)?;
            x = out;
            factors.push(j);
        }
        let parts: Vec<_> = factors.iter().zip(&lib_layers).map(|(f, (_, flags))| (f.moments(), *flags)).collect();
        let composed = compose_serial_traced(&parts, VarphiPolicy::Assume)?.moments;
        let product = JacobianFactor::chain(&factors).ok_or(Error::EmptyChain)?.moments();
        Ok(TrialRecord {
            phi_hat: product.phi,
            varphi_hat: product.varphi.unwrap_or(f64::NAN),
            phi_composed: composed.phi,
            varphi_composed: composed.varphi.unwrap_or(f64::NAN),
        })
    })
}

/// Checks the sum rule on parallel branches fed the same input.
pub fn verify_addition(cfg: &TrialConfig) -> Result<VerificationReport> {
    cfg.check()?;
    let Topology::Parallel(branches) = &cfg.topology else {
        return Err(Error::InvalidGraph("addition check needs a parallel topology".into()));
    };
    let lib_branches = library_parts(branches, &vec![cfg.dims[0]; branches.len()])?;
    let lib = compose_parallel_traced(&lib_branches, VarphiPolicy::Assume)?.moments;
    run_trials(cfg, &lib, |t| {
        let mut rng = trial_rng(cfg.seed, t);
        let x = cfg.input(&mut rng);
        let mut sum = faer::Mat::zeros(cfg.dims[1], cfg.dims[0]);
        let mut parts = Vec::with_capacity(branches.len());
        for (branch, (_, flags)) in branches.iter().zip(&lib_branches) {
            let (j, _) = sample_chain(branch, x.clone(), &mut rng)?;
            j.add_into(&mut sum);
            parts.push((j.moments(), *flags));
        }
        let composed = compose_parallel_traced(&parts, VarphiPolicy::Assume)?.moments;
        let total = crate::mc::factor::empirical_moments(sum.as_ref());
        Ok(TrialRecord {
            phi_hat: total.phi,
            varphi_hat: total.varphi.unwrap_or(f64::NAN),
            phi_composed: composed.phi,
            varphi_composed: composed.varphi.unwrap_or(f64::NAN),
        })
    })
}

/// Dispatches on the topology.
pub fn verify(cfg: &TrialConfig) -> Result<VerificationReport> {
    match cfg.topology {
        Topology::Chain(_) => verify_multiplication(cfg),
        Topology::Parallel(_) => verify_addition(cfg),
    }
}
