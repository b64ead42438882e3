//! Forward propagation of activation second moments and stability checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Block, NetworkGraph};
use crate::moments::{component_moments, structure_flags, ComponentSpec};
use crate::rng::{trial_rng, TrialRng};
use crate::scalar::Scalar;

/// Second moment of the activations after one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState<T> {
    pub alpha2: T,
    pub layer_index: usize,
    /// Jacobian phi used for this step; normalization layers bind it to `1/alpha2_prev`.
    pub phi: T,
    pub label: String,
}

fn propagate_chain<T: Scalar>(chain: &[ComponentSpec<T>], width: usize, alpha2: T) -> Result<Vec<(T, T, &'static str)>> {
    let mut a = alpha2;
    let mut w = width;
    let mut steps = Vec::with_capacity(chain.len());
    for spec in chain {
        if !structure_flags(spec).general_linear {
            return Err(Error::NotGeneralLinear(spec.name()));
        }
        let m = component_moments(spec, w)?;
        w = m.out_dim;
        let phi = match spec {
            ComponentSpec::DataNorm { .. } | ComponentSpec::SMN { .. } => T::one() / a,
            _ => m.phi,
        };
        a = a * phi;
        steps.push((a, phi, spec.name()));
    }
    Ok(steps)
}

/// Propagates `alpha2_in` through `g`, one state per serial component and one per parallel block.
///
/// Parallel branches are summed in second moment, which holds when at most one branch is non-central.
pub fn propagate_alpha2<T: Scalar>(g: &NetworkGraph<T>, alpha2_in: T) -> Result<Vec<FlowState<T>>> {
    if !(alpha2_in > T::zero()) || !alpha2_in.is_finite() {
        return Err(Error::InvalidParameter {
            name: "alpha2_in",
            value: alpha2_in.to_f64_lossy(),
            reason: "must be positive",
        });
    }
    let mut a = alpha2_in;
    let mut out = Vec::new();
    for (i, block) in g.blocks().iter().enumerate() {
        let width = g.dims()[i];
        match block {
            Block::Serial(chain) => {
                for (alpha2, phi, name) in propagate_chain(chain, width, a)? {
                    out.push(FlowState {
                        alpha2,
                        layer_index: out.len(),
                        phi,
                        label: format!("block {i} {name}"),
                    });
                }
            }
            Block::Parallel(branches) => {
                let mut sum = T::zero();
                for chain in branches {
                    sum = sum + propagate_chain(chain, width, a)?.last().map_or(a, |s| s.0);
                }
                out.push(FlowState {
                    alpha2: sum,
                    layer_index: out.len(),
                    phi: sum / a,
                    label: format!("block {i} parallel x{}", branches.len()),
                });
            }
        }
        a = out.last().map_or(a, |s| s.alpha2);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResnetProfile<T> {
    /// `alpha2` at each block boundary, starting at 1.
    pub alpha2: Vec<T>,
    /// Per-block Jacobian phi, `alpha2[l+1] / alpha2[l]`.
    pub phi: Vec<T>,
}

/// Second-moment growth of a batch-normalized residual network.
///
/// Each block adds a unit-variance branch to the shortcut; a downsampling
/// block normalizes its shortcut too, resetting the moment to 2.
pub fn resnet_alpha2_profile<T: Scalar>(num_blocks: usize, downsample_at: &[usize]) -> Result<ResnetProfile<T>> {
    if downsample_at.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidGraph("downsampling indices must be strictly increasing".into()));
    }
    if let Some(&last) = downsample_at.last() {
        if last >= num_blocks {
            return Err(Error::InvalidGraph(format!(
                "downsampling index {last} out of range for {num_blocks} blocks"
            )));
        }
    }
    let mut alpha2 = vec![T::one()];
    let mut phi = Vec::with_capacity(num_blocks);
    for b in 0..num_blocks {
        let prev = alpha2[b];
        let next = if downsample_at.binary_search(&b).is_ok() {
            T::lit(2.0)
        } else {
            prev + T::one()
        };
        alpha2.push(next);
        phi.push(next / prev);
    }
    Ok(ResnetProfile { alpha2, phi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationClass {
    PartialNormalized,
    OverNormalized,
    Neutral,
    /// Moves the second moment away from `beta`.
    Unnormalized,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification<T> {
    pub verdict: NormalizationClass,
    pub probes: Vec<(T, T, NormalizationClass)>,
}

pub const NEUTRAL_TOL: f64 = 1e-9;

/// Classifies the map `alpha2 -> h(alpha2)` around the fixed point `beta` at each probe.
pub fn classify_normalization<T: Scalar>(
    h: impl Fn(T) -> T,
    beta: T,
    probes: &[T],
) -> Result<Classification<T>> {
    if probes.is_empty() {
        return Err(Error::LengthMismatch { expected: 1, found: 0 });
    }
    let mut out = Vec::with_capacity(probes.len());
    for &a in probes {
        if !(a > T::zero()) || a == beta || !a.is_finite() {
            return Err(Error::InvalidParameter {
                name: "probe",
                value: a.to_f64_lossy(),
                reason: "probes must be positive and differ from beta",
            });
        }
        let v = h(a);
        let target = beta / a;
        let class = if (v - target).abs() <= T::lit(NEUTRAL_TOL) {
            NormalizationClass::Neutral
        } else if a < beta {
            if v > target {
                NormalizationClass::OverNormalized
            } else if v > T::one() {
                NormalizationClass::PartialNormalized
            } else {
                NormalizationClass::Unnormalized
            }
        } else if v > target && v < T::one() {
            NormalizationClass::PartialNormalized
        } else if v > T::zero() && v < target {
            NormalizationClass::OverNormalized
        } else {
            NormalizationClass::Unnormalized
        };
        out.push((a, v, class));
    }
    let first = out[0].2;
    let verdict = if out.iter().all(|p| p.2 == first) {
        first
    } else {
        NormalizationClass::Mixed
    };
    Ok(Classification { verdict, probes: out })
}

/// Jacobian phi of a SeLU layer as a function of its input second moment.
pub fn selu_phi_map<T: Scalar>(lambda: T, alpha: T) -> impl Fn(T) -> T {
    move |a2| {
        crate::moments::selu_moments(lambda, alpha, a2)
            .map(|m| m.phi)
            .unwrap_or_else(|_| T::nan())
    }
}

/// Per-layer error model of the shallow network trick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrickModel {
    /// `phi = prod(1 + (1 - omega) * gamma_i)`
    Relative { omega: f64 },
    /// `phi = prod(1 + tau * delta_i)`
    Absolute { tau: f64 },
}

impl TrickModel {
    fn coefficient(&self) -> f64 {
        match *self {
            Self::Relative { omega } => 1.0 - omega,
            Self::Absolute { tau } => tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrickSummary {
    pub mean: f64,
    pub std: f64,
    pub samples: Vec<f64>,
    /// Smallest order whose expected term magnitude drops below [`EFFECTIVE_DEPTH_THRESHOLD`].
    pub effective_depth: usize,
}

pub const EFFECTIVE_DEPTH_THRESHOLD: f64 = 1e-6;

/// Monte-Carlo distribution of a network's phi under per-layer perturbations.
pub fn shallow_trick_estimate<F>(model: TrickModel, depth: usize, draw: F, trials: usize, seed: u64) -> Result<TrickSummary>
where
    F: Fn(&mut TrialRng) -> f64 + Sync,
{
    if let TrickModel::Relative { omega } = model {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::InvalidParameter {
                name: "omega",
                value: omega,
                reason: "must lie in [0, 1]",
            });
        }
    }
    if trials == 0 {
        return Err(Error::InvalidParameter {
            name: "trials",
            value: 0.0,
            reason: "must be at least 1",
        });
    }
    let c = model.coefficient();
    let per_trial: Vec<(f64, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let (mut phi, mut abs_sum) = (1.0, 0.0);
            for _ in 0..depth {
                let e = draw(&mut rng);
                phi *= 1.0 + c * e;
                abs_sum += e.abs();
            }
            (phi, abs_sum)
        })
        .collect();
    let samples: Vec<f64> = per_trial.iter().map(|p| p.0).collect();
    let n = trials as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mean_abs = if depth == 0 {
        0.0
    } else {
        per_trial.iter().map(|p| p.1).sum::<f64>() / (n * depth as f64)
    };
    Ok(TrickSummary {
        mean,
        std,
        samples,
        effective_depth: effective_depth(depth, c.abs() * mean_abs),
    })
}

/// Smallest `i` with `C(L, i) * x^i < threshold`, or `L` if none.
pub fn effective_depth(depth: usize, x: f64) -> usize {
    if x == 0.0 {
        return 1.min(depth);
    }
    let ln_threshold = EFFECTIVE_DEPTH_THRESHOLD.ln();
    let l = depth as f64;
    (1..=depth)
        .find(|&i| {
            let i = i as f64;
            let ln_binom = libm::lgamma(l + 1.0) - libm::lgamma(i + 1.0) - libm::lgamma(l - i + 1.0);
            ln_binom + i * x.ln() < ln_threshold
        })
        .unwrap_or(depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlusOneCheck {
    pub satisfied: bool,
    /// `c / L^p`
    pub branch_bound: f64,
    /// `1 + L * branch_phi`
    pub first_order: f64,
    /// `(1 + branch_phi)^L - first_order`
    pub remainder: f64,
}

pub const PLUS_ONE_CONSTANT: f64 = 2.0;

/// Whether a residual branch is small enough (`phi <= c / L^p`, `p > 1`) for a depth-`L` network.
pub fn plus_one_check(branch_phi: f64, depth: usize, p: f64, c: f64) -> Result<PlusOneCheck> {
    if depth == 0 {
        return Err(Error::InvalidParameter {
            name: "L",
            value: 0.0,
            reason: "must be at least 1",
        });
    }
    if !(p > 0.0) {
        return Err(Error::InvalidParameter {
            name: "p",
            value: p,
            reason: "must be positive",
        });
    }
    let l = depth as f64;
    let branch_bound = c / l.powf(p);
    let first_order = 1.0 + l * branch_phi;
    Ok(PlusOneCheck {
        satisfied: p > 1.0 && branch_phi <= branch_bound,
        branch_bound,
        first_order,
        remainder: (l * branch_phi.ln_1p()).exp() - first_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gains::selu_solve;
    use proptest::prelude::*;
    use rand::Rng;

    fn dense(n: usize, sigma2: f64) -> ComponentSpec<f64> {
        ComponentSpec::DenseGaussian { m: n, n, mu: 0.0, sigma2 }
    }

    #[test]
    fn multiplicative_evolution() {
        let g = NetworkGraph::new(vec![Block::Serial(vec![dense(4, 0.5), ComponentSpec::relu()])], vec![4, 4]).unwrap();
        let s = propagate_alpha2(&g, 1.0).unwrap();
        assert_eq!(s.iter().map(|s| s.alpha2).collect::<Vec<_>>(), vec![2.0, 1.0]);
        assert_eq!(s[1].layer_index, 1);
    }

    #[test]
    fn data_norm_resets() {
        let chain = vec![dense(4, 0.75), ComponentSpec::DataNorm { sigma_b2: 1.0, m: 4 }];
        let g = NetworkGraph::new(vec![Block::Serial(chain)], vec![4, 4]).unwrap();
        let s = propagate_alpha2(&g, 1.0).unwrap();
        assert_eq!(s[0].alpha2, 3.0);
        assert_eq!(s[1].alpha2, 1.0);
        assert!((s[1].phi - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_chain_is_constant_and_tanh_rejected() {
        let id = ComponentSpec::Identity { m: 3 };
        let g = NetworkGraph::new(vec![Block::Serial(vec![id, id, id])], vec![3, 3]).unwrap();
        assert!(propagate_alpha2(&g, 2.5).unwrap().iter().all(|s| s.alpha2 == 2.5));
        let g = NetworkGraph::new(vec![Block::Serial(vec![ComponentSpec::Tanh])], vec![3, 3]).unwrap();
        assert_eq!(propagate_alpha2(&g, 1.0), Err(Error::NotGeneralLinear("Tanh")));
        assert!(propagate_alpha2(&g, 0.0).is_err());
    }

    #[test]
    fn residual_flow_adds_branches() {
        let branch = vec![dense(8, 0.25), ComponentSpec::relu()];
        let block = Block::Parallel(vec![vec![ComponentSpec::Identity { m: 8 }], branch]);
        let g = NetworkGraph::new(vec![block], vec![8, 8]).unwrap();
        let s = propagate_alpha2(&g, 2.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].alpha2, 2.0 + 2.0);
    }

    #[test]
    fn resnet_profiles() {
        let p = resnet_alpha2_profile::<f64>(3, &[]).unwrap();
        assert_eq!(p.alpha2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.phi, vec![2.0, 1.5, 4.0 / 3.0]);
        let p = resnet_alpha2_profile::<f64>(1, &[]).unwrap();
        assert_eq!(p.phi.iter().product::<f64>(), 2.0);
        let p = resnet_alpha2_profile::<f64>(4, &[2]).unwrap();
        assert_eq!(p.alpha2, vec![1.0, 2.0, 3.0, 2.0, 3.0]);
        assert!(resnet_alpha2_profile::<f64>(4, &[2, 1]).is_err());
        assert!(resnet_alpha2_profile::<f64>(4, &[4]).is_err());
    }

    #[test]
    fn classification_examples() {
        let probes = [0.5, 2.0];
        let n = classify_normalization(|a: f64| 1.0 / a, 1.0, &probes).unwrap();
        assert_eq!(n.verdict, NormalizationClass::Neutral);
        // alpha2 * h overshoots beta from both sides.
        let o = classify_normalization(|a: f64| (1.9 - 0.9 * a) / a, 1.0, &probes).unwrap();
        assert_eq!(o.verdict, NormalizationClass::OverNormalized);
        // alpha2 * h stays at 2: overshoot below beta, no movement above it.
        let s = classify_normalization(|a: f64| 2.0 / a, 1.0, &probes).unwrap();
        assert_eq!(s.verdict, NormalizationClass::Mixed);
        let u = classify_normalization(|_: f64| 1.0, 1.0, &probes).unwrap();
        assert_eq!(u.verdict, NormalizationClass::Unnormalized);
        let m = classify_normalization(|a: f64| if a < 1.0 { 1.0 / a } else { 2.0 / a }, 1.0, &probes).unwrap();
        assert_eq!(m.verdict, NormalizationClass::Mixed);
        assert!(classify_normalization(|a: f64| a, 1.0, &[1.0]).is_err());
        assert!(classify_normalization(|a: f64| a, 1.0, &[-0.5]).is_err());
    }

    #[test]
    fn selu_is_partially_normalizing() {
        let s = selu_solve(1.0, 0.03).unwrap();
        let c = classify_normalization(selu_phi_map(s.lambda, s.alpha), 1.0, &[0.5, 2.0]).unwrap();
        assert_eq!(c.verdict, NormalizationClass::PartialNormalized);
    }

    #[test]
    fn shallow_trick_closed_forms() {
        let s = shallow_trick_estimate(TrickModel::Relative { omega: 1.0 }, 50, |r| r.gen::<f64>(), 10, 3).unwrap();
        assert!(s.samples.iter().all(|&x| x == 1.0));
        let s = shallow_trick_estimate(TrickModel::Relative { omega: 0.0 }, 100, |_| 0.01, 4, 3).unwrap();
        assert!((s.mean - 1.01f64.powi(100)).abs() < 1e-12);
        assert!((s.mean - 2.705).abs() < 1e-3);
        assert!(s.std < 1e-12);
        let a = shallow_trick_estimate(TrickModel::Absolute { tau: 0.5 }, 10, |_| 0.1, 2, 0).unwrap();
        assert!((a.mean - 1.05f64.powi(10)).abs() < 1e-12);
        assert!(shallow_trick_estimate(TrickModel::Relative { omega: 1.5 }, 1, |_| 0.0, 1, 0).is_err());
    }

    #[test]
    fn residual_networks_are_effectively_shallow() {
        let draw = |r: &mut TrialRng| r.gen_range(-0.2..0.2);
        let plain = shallow_trick_estimate(TrickModel::Relative { omega: 0.0 }, 100, draw, 64, 1).unwrap();
        let resnet = shallow_trick_estimate(TrickModel::Relative { omega: 0.99 }, 100, draw, 64, 1).unwrap();
        assert!(resnet.effective_depth < plain.effective_depth);
        assert!(resnet.effective_depth <= 10);
        assert!(resnet.std < plain.std);
    }

    #[test]
    fn trick_is_deterministic() {
        let draw = |r: &mut TrialRng| r.gen_range(-0.1..0.1);
        let a = shallow_trick_estimate(TrickModel::Relative { omega: 0.3 }, 20, draw, 33, 9).unwrap();
        let b = shallow_trick_estimate(TrickModel::Relative { omega: 0.3 }, 20, draw, 33, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plus_one_examples() {
        let fixup = 2.0 * 16f64.powi(-2);
        assert!(plus_one_check(fixup, 16, 2.0, PLUS_ONE_CONSTANT).unwrap().satisfied);
        assert!(!plus_one_check(1.0, 100, 2.0, PLUS_ONE_CONSTANT).unwrap().satisfied);
        assert!(plus_one_check(0.0, 7, 2.0, PLUS_ONE_CONSTANT).unwrap().satisfied);
        assert!(!plus_one_check(0.0, 7, 1.0, PLUS_ONE_CONSTANT).unwrap().satisfied);
        let c = plus_one_check(0.01, 10, 2.0, PLUS_ONE_CONSTANT).unwrap();
        assert!((c.first_order + c.remainder - 1.01f64.powi(10)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn flow_matches_composed_phi(sigmas in prop::collection::vec(0.1..2.0f64, 1..6), a0 in 0.1..10.0f64) {
            let chain: Vec<_> = sigmas.iter().flat_map(|&s| [dense(8, s / 8.0), ComponentSpec::relu()]).collect();
            let g = NetworkGraph::new(vec![Block::Serial(chain)], vec![8, 8]).unwrap();
            let states = propagate_alpha2(&g, a0).unwrap();
            let r = crate::graph::analyze_graph(&g, &Default::default()).unwrap();
            let expect = a0 * r.moments.unwrap().phi;
            let got = states.last().unwrap().alpha2;
            prop_assert!((got - expect).abs() <= 1e-12 * expect);
        }

        #[test]
        fn resnet_phis_telescope(n in 1usize..40, ds in prop::collection::btree_set(0usize..40, 0..4)) {
            let ds: Vec<usize> = ds.into_iter().filter(|&d| d < n).collect();
            let p = resnet_alpha2_profile::<f64>(n, &ds).unwrap();
            let prod: f64 = p.phi.iter().product();
            prop_assert!((prod - p.alpha2[n] / p.alpha2[0]).abs() <= 1e-12 * prod);
        }

        #[test]
        fn exact_fixed_point_map_is_neutral(beta in 0.1..5.0f64, probe in 0.05..10.0f64) {
            prop_assume!((probe - beta).abs() > 1e-6);
            let c = classify_normalization(|a| beta / a, beta, &[probe]).unwrap();
            prop_assert_eq!(c.verdict, NormalizationClass::Neutral);
        }

        #[test]
        fn constant_errors_match_product(omega in 0.0..=1.0f64, g in -0.5..0.5f64, l in 0usize..60) {
            let s = shallow_trick_estimate(TrickModel::Relative { omega }, l, |_| g, 3, 0).unwrap();
            let expect = (1.0 + (1.0 - omega) * g).powi(l as i32);
            prop_assert!((s.mean - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }
}
