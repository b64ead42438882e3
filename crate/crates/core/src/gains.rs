//! Initialization parameters that put a block at phi = 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{compose_serial_traced, VarphiPolicy};
use crate::moments::{component_moments, selu_moments, structure_flags, ComponentSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainActivation<T> {
    ReLU,
    LeakyReLU { gamma: T },
    Tanh,
}

/// Weight family. Gaussian-like families need the fan-in `n` and fan-out `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    Gaussian { n: usize, m: usize },
    Orthogonal,
    /// Scaled weight standardization; the gain `g` plays the role of the Gaussian sigma.
    Sws { n: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRecommendation<T> {
    pub parameter_name: String,
    pub values: Vec<T>,
    pub achieved_phi: T,
    pub achieved_varphi: Option<T>,
    pub notes: Vec<String>,
}

/// Closed-form gain for a weight layer followed by `activation`.
pub fn closed_form_gain<T: Scalar>(activation: GainActivation<T>, family: WeightFamily) -> Result<GainRecommendation<T>> {
    let two = T::lit(2.0);
    let (act, act_gain2) = match activation {
        GainActivation::ReLU => (ComponentSpec::ReLU { p: T::lit(0.5) }, two),
        GainActivation::LeakyReLU { gamma } => {
            let g = gamma.to_f64_lossy();
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidParameter {
                    name: "gamma",
                    value: g,
                    reason: "must lie in [0, 1]",
                });
            }
            (
                ComponentSpec::LeakyReLU { p: T::lit(0.5), gamma },
                two / (T::one() + gamma * gamma),
            )
        }
        GainActivation::Tanh => (ComponentSpec::Tanh, T::one()),
    };
    let mut notes = Vec::new();
    let (name, value, weight) = match family {
        WeightFamily::Gaussian { n, m } | WeightFamily::Sws { n, m } => {
            if n == 0 || m == 0 {
                return Err(Error::InvalidParameter {
                    name: if n == 0 { "n" } else { "m" },
                    value: 0.0,
                    reason: "must be at least 1",
                });
            }
            let sigma2 = act_gain2 / T::from_usize_lossy(n);
            let name = if matches!(family, WeightFamily::Sws { .. }) {
                notes.push("sWS gain g re-substituted as a Gaussian layer with sigma = g".into());
                "g"
            } else {
                "sigma"
            };
            (name, sigma2.sqrt(), ComponentSpec::DenseGaussian { m, n, mu: T::zero(), sigma2 })
        }
        WeightFamily::Orthogonal => {
            let beta = act_gain2.sqrt();
            if activation == GainActivation::Tanh {
                notes.push("tanh gain is approximate: exact under the linearization around 0".into());
            }
            ("beta", beta, ComponentSpec::Orthogonal { beta, m: 1, n: 1 })
        }
    };
    let w = weight.fixed_dims().map_or(1, |d| d.1);
    let wm = component_moments(&weight, w)?;
    let am = component_moments(&act, wm.out_dim)?;
    let c = compose_serial_traced(&[(wm, structure_flags(&weight)), (am, structure_flags(&act))], VarphiPolicy::Strict)?;
    Ok(GainRecommendation {
        parameter_name: name.into(),
        values: vec![value],
        achieved_phi: c.moments.phi,
        achieved_varphi: c.moments.varphi,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreluScale<T> {
    pub scale: T,
    pub alpha_used: T,
    pub clamped: bool,
}

pub const SPRELU_ALPHA_MAX: f64 = 0.5;

/// Output rescale `1/sqrt(1+alpha^2)` for a leaky rectifier with learnable slope clipped to [0, 0.5].
pub fn sprelu_scale<T: Scalar>(alpha: T) -> SpreluScale<T> {
    let clipped = alpha.max(T::zero()).min(T::lit(SPRELU_ALPHA_MAX));
    let clamped = clipped != alpha;
    if clamped {
        log::warn!("sPReLU slope {alpha} clipped to {clipped}");
    }
    SpreluScale {
        scale: T::one() / (T::one() + clipped * clipped).sqrt(),
        alpha_used: clipped,
        clamped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeluSolution<T> {
    pub lambda: T,
    pub alpha: T,
    pub iterations: usize,
    pub residuals: [T; 2],
}

pub const SELU_MAX_ITERATIONS: usize = 200;
const SELU_MAX_HALVINGS: usize = 30;
const SELU_START: (f64, f64) = (1.05, 1.67);

/// Residuals of the SeLU design equations: Jacobian phi scaled by `gamma0`
/// must equal `1 + eps`, and the output second moment must be 1.
pub fn selu_residuals<T: Scalar>(lambda: T, alpha: T, gamma0: T, eps: T) -> Result<[T; 2]> {
    let m = selu_moments(lambda, alpha, gamma0)?;
    Ok([m.phi * gamma0 - T::one() - eps, m.out_second_moment - T::one()])
}

/// Solves for SeLU `(lambda, alpha)` by damped Newton iteration.
pub fn selu_solve<T: Scalar>(gamma0: T, eps: T) -> Result<SeluSolution<T>> {
    let g = gamma0.to_f64_lossy();
    let e = eps.to_f64_lossy();
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::InvalidParameter {
            name: "gamma0",
            value: g,
            reason: "must be positive",
        });
    }
    if !(e >= 0.0) || !e.is_finite() {
        return Err(Error::InvalidParameter {
            name: "eps",
            value: e,
            reason: "must be non-negative",
        });
    }
    if eps == T::zero() {
        // alpha = 0 leaves a scaled ReLU, which the system pins exactly.
        let lambda = (T::lit(2.0) / gamma0).sqrt();
        let residuals = selu_residuals(lambda, T::zero(), gamma0, eps)?;
        return Ok(SeluSolution {
            lambda,
            alpha: T::zero(),
            iterations: 0,
            residuals,
        });
    }

    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(100.0));
    let norm = |r: [T; 2]| (r[0] * r[0] + r[1] * r[1]).sqrt();
    // Unknowns are (lambda, alpha), or (lambda, sqrt alpha) once an iterate tried to go negative.
    let mut sqrt_mode = false;
    let unpack = |x: [T; 2], sqrt_mode: bool| if sqrt_mode { (x[0], x[1] * x[1]) } else { (x[0], x[1]) };
    let eval = |x: [T; 2], sqrt_mode: bool| {
        let (l, a) = unpack(x, sqrt_mode);
        selu_residuals(l, a, gamma0, eps)
    };

    let mut x = [T::lit(SELU_START.0), T::lit(SELU_START.1)];
    let mut r = eval(x, sqrt_mode)?;
    for iteration in 0..SELU_MAX_ITERATIONS {
        if r[0].abs() < tol && r[1].abs() < tol {
            let (lambda, alpha) = unpack(x, sqrt_mode);
            return Ok(SeluSolution {
                lambda,
                alpha,
                iterations: iteration,
                residuals: r,
            });
        }
        let jac = finite_difference_jacobian(|y| eval(y, sqrt_mode), x)?;
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == T::zero() || !det.is_finite() {
            break;
        }
        let dx = [
            -(jac[1][1] * r[0] - jac[0][1] * r[1]) / det,
            -(-jac[1][0] * r[0] + jac[0][0] * r[1]) / det,
        ];
        if !sqrt_mode && x[1] + dx[1] < T::zero() {
            sqrt_mode = true;
            x[1] = x[1].max(T::zero()).sqrt();
            r = eval(x, sqrt_mode)?;
            continue;
        }
        let mut step = T::one();
        let mut accepted = false;
        for _ in 0..=SELU_MAX_HALVINGS {
            let trial = [x[0] + step * dx[0], x[1] + step * dx[1]];
            if trial[0] > T::zero() {
                let rt = eval(trial, sqrt_mode)?;
                if norm(rt) < norm(r) {
                    x = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            step = step * T::lit(0.5);
        }
        if !accepted {
            break;
        }
    }
    Err(Error::NonConvergence {
        iterations: SELU_MAX_ITERATIONS,
        residuals: [r[0].to_f64_lossy(), r[1].to_f64_lossy()],
    })
}

fn finite_difference_jacobian<T: Scalar>(f: impl Fn([T; 2]) -> Result<[T; 2]>, x: [T; 2]) -> Result<[[T; 2]; 2]> {
    let mut jac = [[T::zero(); 2]; 2];
    for j in 0..2 {
        let h = T::epsilon().cbrt() * x[j].abs().max(T::one());
        let (mut hi, mut lo) = (x, x);
        hi[j] = hi[j] + h;
        lo[j] = lo[j] - h;
        let (fh, fl) = (f(hi)?, f(lo)?);
        for i in 0..2 {
            jac[i][j] = (fh[i] - fl[i]) / (hi[j] - lo[j]);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEps<T> {
    pub eps: T,
    /// `(1 + eps)^L`
    pub bound: T,
}

/// Largest convenient eps below `1/L`: `0.9 / L`.
pub fn depth_aware_eps<T: Scalar>(depth: usize) -> Result<DepthEps<T>> {
    if depth == 0 {
        return Err(Error::InvalidParameter {
            name: "L",
            value: 0.0,
            reason: "must be at least 1",
        });
    }
    let eps = T::lit(0.9) / T::from_usize_lossy(depth);
    Ok(DepthEps {
        eps,
        bound: (T::one() + eps).powi(depth as i32),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixupFamily {
    Gaussian,
    Orthogonal,
}

/// Residual-branch scaling for `L` blocks of `m` weight layers each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixupScale<T> {
    pub family: FixupFamily,
    /// sigma^2 (Gaussian) or beta (orthogonal) of the major-branch layers.
    pub branch_value: T,
    /// sigma^2 = 1/n or beta = 1 on the downsampling shortcut.
    pub downsample_value: T,
    /// `2 L^{-p/m}`
    pub alpha: T,
    /// `1 + (alpha/2)^m`
    pub block_phi: T,
}

pub fn fixup_scale<T: Scalar>(depth: usize, m: usize, p: T, n: usize, family: FixupFamily) -> Result<FixupScale<T>> {
    for (name, v) in [("L", depth), ("m", m), ("n", n)] {
        if v == 0 {
            return Err(Error::InvalidParameter {
                name,
                value: 0.0,
                reason: "must be at least 1",
            });
        }
    }
    if !(p > T::one()) {
        return Err(Error::InvalidParameter {
            name: "p",
            value: p.to_f64_lossy(),
            reason: "must exceed 1 for the residual branch to vanish fast enough",
        });
    }
    let l = T::from_usize_lossy(depth);
    let mf = T::from_usize_lossy(m);
    let shrink = l.powf(-p / mf);
    let two = T::lit(2.0);
    let (branch_value, downsample_value) = match family {
        FixupFamily::Gaussian => (shrink * two / T::from_usize_lossy(n), T::one() / T::from_usize_lossy(n)),
        FixupFamily::Orthogonal => (shrink.sqrt() * two.sqrt(), T::one()),
    };
    let alpha = two * shrink;
    Ok(FixupScale {
        family,
        branch_value,
        downsample_value,
        alpha,
        block_phi: T::one() + (alpha / two).powi(m as i32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gain(a: GainActivation<f64>, f: WeightFamily) -> GainRecommendation<f64> {
        closed_form_gain(a, f).unwrap()
    }

    #[test]
    fn table_values() {
        let r = gain(GainActivation::ReLU, WeightFamily::Gaussian { n: 512, m: 512 });
        assert!((r.values[0] - 0.0625).abs() < 1e-15);
        assert!((r.achieved_phi - 1.0).abs() < 1e-12);
        let l = gain(GainActivation::LeakyReLU { gamma: 1.0 }, WeightFamily::Orthogonal);
        assert_eq!(l.values[0], 1.0);
        assert!(l.achieved_varphi.unwrap().abs() < 1e-15);
        let l = gain(GainActivation::LeakyReLU { gamma: 0.3 }, WeightFamily::Orthogonal);
        assert!((l.values[0] - (2.0f64 / 1.09).sqrt()).abs() < 1e-12);
        assert!((l.achieved_varphi.unwrap() - (0.91f64 / 1.09).powi(2)).abs() < 1e-12);
        let t = gain(GainActivation::Tanh, WeightFamily::Orthogonal);
        assert_eq!((t.values[0], t.achieved_varphi), (1.0, Some(0.0)));
        assert!(!t.notes.is_empty());
        let s = gain(GainActivation::Tanh, WeightFamily::Sws { n: 100, m: 100 });
        assert_eq!(s.parameter_name, "g");
        assert!((s.values[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn gaussian_varphi_tables() {
        let (n, m) = (300usize, 500usize);
        let ratio = m as f64 / n as f64;
        let r = gain(GainActivation::ReLU, WeightFamily::Gaussian { n, m });
        assert!((r.achieved_varphi.unwrap() - (1.0 + ratio)).abs() < 1e-12);
        let g: f64 = 0.2;
        let l = gain(GainActivation::LeakyReLU { gamma: g }, WeightFamily::Gaussian { n, m });
        let expect = ((1.0 - g * g) / (1.0 + g * g)).powi(2) + ratio;
        assert!((l.achieved_varphi.unwrap() - expect).abs() < 1e-12);
        assert!(closed_form_gain(GainActivation::LeakyReLU { gamma: 1.5 }, WeightFamily::Orthogonal).is_err());
        assert!(closed_form_gain::<f64>(GainActivation::ReLU, WeightFamily::Gaussian { n: 0, m: 1 }).is_err());
    }

    #[test]
    fn sprelu() {
        assert_eq!(sprelu_scale(0.0).scale, 1.0);
        assert!((sprelu_scale(0.5f64).scale - 0.894_427_191).abs() < 1e-9);
        let c = sprelu_scale(1.0f64);
        assert!(c.clamped && c.alpha_used == 0.5);
        assert!((c.scale - 1.0 / 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn selu_constants() {
        let s = selu_solve(1.0, 0.0).unwrap();
        assert_eq!((s.lambda, s.alpha), (2f64.sqrt(), 0.0));
        let s = selu_solve(1.0f64, 0.0716).unwrap();
        assert!((s.lambda - 1.0507).abs() < 1e-3, "{s:?}");
        assert!((s.alpha - 1.6733).abs() < 1e-3, "{s:?}");
        let s = selu_solve(1.0f64, 0.03).unwrap();
        let m = selu_moments(s.lambda, s.alpha, 1.0).unwrap();
        assert!((m.phi - 1.03).abs() < 1e-9);
        assert!(selu_solve(0.0, 0.1).is_err());
        assert!(selu_solve(1.0, -0.1).is_err());
    }

    #[test]
    fn selu_near_zero_eps_approaches_relu_limit() {
        let s = selu_solve(1.0, 1e-4).unwrap();
        assert!((s.lambda - 2f64.sqrt()).abs() < 0.01, "{s:?}");
        assert!(s.alpha < 0.1, "{s:?}");
    }

    #[test]
    fn depth_eps() {
        let d = depth_aware_eps::<f64>(32).unwrap();
        assert_eq!(d.eps, 0.028125);
        assert!((d.bound - 2.43).abs() < 0.01);
        assert!((depth_aware_eps::<f64>(15).unwrap().eps - 0.06).abs() < 1e-15);
        assert_eq!(depth_aware_eps::<f64>(1).unwrap().eps, 0.9);
        assert!(depth_aware_eps::<f64>(0).is_err());
    }

    #[test]
    fn fixup() {
        let f = fixup_scale(16, 2, 2.0f64, 576, FixupFamily::Gaussian).unwrap();
        assert!((f.branch_value - 2.0 / 16.0 / 576.0).abs() < 1e-18);
        assert!((f.alpha - 0.125).abs() < 1e-15);
        assert!((f.block_phi - 1.003_906_25).abs() < 1e-15);
        let k = fixup_scale(1, 1, 2.0f64, 64, FixupFamily::Gaussian).unwrap();
        assert!((k.branch_value - 2.0 / 64.0).abs() < 1e-15);
        let o = fixup_scale(16, 2, 2.0, 64, FixupFamily::Orthogonal).unwrap();
        assert!((o.branch_value - 0.25 * 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(o.downsample_value, 1.0);
        assert!(fixup_scale(16, 2, 1.5, 64, FixupFamily::Gaussian).is_ok());
        assert!(fixup_scale(16, 2, 1.0, 64, FixupFamily::Gaussian).is_err());
    }

    /// The design equations are linear in `u = λ²` and `w = λ²α²`.
    fn selu_linear_oracle(g: f64, eps: f64) -> (f64, f64) {
        let phi = |x: f64| 0.5 * libm::erfc(-x / 2f64.sqrt());
        let a = (2.0 * g).exp() * phi(-2.0 * g.sqrt());
        let b = (0.5 * g).exp() * phi(-g.sqrt());
        let w = eps / (a * g + 2.0 * b - a - 0.5);
        (2.0 * (1.0 + eps) / g - 2.0 * w * a, w)
    }

    #[test]
    fn selu_infeasible_system_errors() {
        assert!(selu_linear_oracle(0.5, 0.13).0 < 0.0);
        assert!(matches!(selu_solve(0.5f64, 0.13), Err(Error::NonConvergence { .. })));
    }

    proptest! {
        #[test]
        fn gain_round_trip(gamma in 0.0..1.0f64, n in 1usize..5000, m in 1usize..5000, which in 0usize..3, fam in 0usize..3) {
            let act = [GainActivation::ReLU, GainActivation::LeakyReLU { gamma }, GainActivation::Tanh][which];
            let family = [WeightFamily::Gaussian { n, m }, WeightFamily::Orthogonal, WeightFamily::Sws { n, m }][fam];
            let r = closed_form_gain(act, family).unwrap();
            prop_assert!((r.achieved_phi - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn selu_back_substitution(gamma0 in 0.5..2.0f64, eps in 0.005..0.15f64) {
            let (u, w) = selu_linear_oracle(gamma0, eps);
            prop_assume!(u > 0.0 && w > 0.0);
            let s = selu_solve(gamma0, eps).unwrap();
            prop_assert!((s.lambda * s.lambda - u).abs() < 1e-7 * u, "{:?} {}", s, u);
            let r = selu_residuals(s.lambda, s.alpha, gamma0, eps).unwrap();
            prop_assert!(r[0].abs() < 1e-9 && r[1].abs() < 1e-9, "{:?}", s);
            prop_assert!(s.lambda > 0.0 && s.alpha >= 0.0);
        }

        #[test]
        fn fixup_block_phi_vanishes_with_depth(m in 1usize..4, p in 1.1..3.0f64) {
            let a = fixup_scale(10, m, p, 64, FixupFamily::Gaussian).unwrap().block_phi;
            let b = fixup_scale(10_000, m, p, 64, FixupFamily::Gaussian).unwrap().block_phi;
            prop_assert!(b < a && b - 1.0 < 1e-3);
        }
    }
}
