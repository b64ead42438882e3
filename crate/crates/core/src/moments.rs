//! Spectrum moments of component Jacobians.
//!
//! `phi` is the normalized trace of `J Jᵀ` and `varphi` the variance of its
//! eigenvalue distribution. Element-wise components act on whatever width
//! they are placed at; shape-fixing ones carry their own dimensions.

use serde::{Deserialize, Serialize};

use crate::effective_kernel::{effective_kernel_size, ConvGeometry};
use crate::error::{check_param, Error, Result};
use crate::scalar::{normal_cdf, Scalar};

/// Rounding slack allowed below zero for composed variances.
pub const VARPHI_NUMERICAL_FLOOR: f64 = 1e-9;

/// Below this width the Wishart formulas for non-central dense layers are only indicative.
pub const ASYMPTOTIC_MIN_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments<T> {
    pub phi: T,
    /// `None` when no analytic value exists.
    pub varphi: Option<T>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl<T: Scalar> Moments<T> {
    pub fn new(phi: T, varphi: Option<T>, out_dim: usize, in_dim: usize) -> Self {
        Self {
            phi,
            varphi,
            out_dim,
            in_dim,
        }
    }

    pub fn identity(m: usize) -> Self {
        Self::new(T::one(), Some(T::zero()), m, m)
    }

    /// Whether the block satisfies `|phi - 1| <= tol_phi` and `varphi <= tol_varphi`.
    ///
    /// `None` when varphi is unknown and phi alone passes.
    pub fn is_block_isometric(&self, tol_phi: T, tol_varphi: T) -> Option<bool> {
        if (self.phi - T::one()).abs() > tol_phi {
            return Some(false);
        }
        self.varphi.map(|v| v <= tol_varphi)
    }
}

/// Order up to which interposed Haar unitaries leave the spectrum moments unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvarianceOrder {
    None,
    First,
    Second,
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructureFlags {
    pub expectant_orthogonal: bool,
    pub central: bool,
    pub unitary_invariance_order: InvarianceOrder,
    pub r_diagonal: bool,
    pub general_linear: bool,
}

impl StructureFlags {
    pub const IDENTITY: Self = Self {
        expectant_orthogonal: true,
        central: false,
        unitary_invariance_order: InvarianceOrder::Infinite,
        r_diagonal: true,
        general_linear: true,
    };
}

/// One network component with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum ComponentSpec<T> {
    ReLU { p: T },
    LeakyReLU { p: T, gamma: T },
    /// Linearized around 0.
    Tanh,
    /// Leaky rectifier with slope `alpha` at p = 1/2, followed by the `1/sqrt(1+alpha^2)` rescale.
    SPReLU { alpha: T },
    SeLU { lambda: T, alpha: T, input_var: T },
    DenseGaussian { m: usize, n: usize, mu: T, sigma2: T },
    Conv2D {
        c_out: usize,
        c_in: usize,
        geometry: ConvGeometry,
        sigma2: T,
    },
    Orthogonal { beta: T, m: usize, n: usize },
    DataNorm {
        #[serde(rename = "sigma_B2")]
        sigma_b2: T,
        m: usize,
    },
    /// `alpha2` is the root-mean-square of the incoming activations.
    SMN { alpha2: T, m: usize },
    Identity { m: usize },
}

impl<T: Scalar> ComponentSpec<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ReLU { .. } => "ReLU",
            Self::LeakyReLU { .. } => "LeakyReLU",
            Self::Tanh => "Tanh",
            Self::SPReLU { .. } => "SPReLU",
            Self::SeLU { .. } => "SeLU",
            Self::DenseGaussian { .. } => "DenseGaussian",
            Self::Conv2D { .. } => "Conv2D",
            Self::Orthogonal { .. } => "Orthogonal",
            Self::DataNorm { .. } => "DataNorm",
            Self::SMN { .. } => "SMN",
            Self::Identity { .. } => "Identity",
        }
    }

    pub fn relu() -> Self {
        Self::ReLU { p: T::lit(0.5) }
    }

    /// `(out, in)` for components whose shape is fixed by their parameters.
    pub fn fixed_dims(&self) -> Option<(usize, usize)> {
        match *self {
            Self::DenseGaussian { m, n, .. } | Self::Orthogonal { m, n, .. } => Some((m, n)),
            Self::Conv2D { c_out, c_in, geometry: g, .. } => {
                Some((c_out * g.h_out() * g.w_out(), c_in * g.h_in * g.w_in))
            }
            Self::DataNorm { m, .. } | Self::SMN { m, .. } | Self::Identity { m } => Some((m, m)),
            _ => None,
        }
    }

    /// Output width when fed `width` features.
    pub fn out_width(&self, width: usize) -> Result<usize> {
        match self.fixed_dims() {
            Some((out, inp)) if inp == width => Ok(out),
            Some((_, inp)) => Err(Error::DimensionMismatch {
                context: format!("{} input", self.name()),
                expected: inp,
                found: width,
            }),
            None => Ok(width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = |x: T| x.to_f64_lossy();
        let dim = |name: &'static str, v: usize| check_param(name, v as f64, v >= 1, "dimension must be at least 1");
        let prob = |name: &'static str, v: T| check_param(name, f(v), f(v) >= 0.0 && f(v) <= 1.0, "must lie in [0, 1]");
        let positive = |name: &'static str, v: T| check_param(name, f(v), f(v) > 0.0, "must be positive");
        match *self {
            Self::ReLU { p } => prob("p", p),
            Self::LeakyReLU { p, gamma } => {
                prob("p", p)?;
                prob("gamma", gamma)
            }
            Self::Tanh => Ok(()),
            Self::SPReLU { alpha } => check_param("alpha", f(alpha), f(alpha) >= 0.0, "must be non-negative"),
            Self::SeLU { lambda, alpha, input_var } => {
                check_param("lambda", f(lambda), true, "")?;
                check_param("alpha", f(alpha), true, "")?;
                positive("input_var", input_var)
            }
            Self::DenseGaussian { m, n, mu, sigma2 } => {
                dim("m", m)?;
                dim("n", n)?;
                check_param("mu", f(mu), true, "")?;
                positive("sigma2", sigma2)
            }
            Self::Conv2D { c_out, c_in, geometry, sigma2 } => {
                dim("c_out", c_out)?;
                dim("c_in", c_in)?;
                geometry.validate()?;
                positive("sigma2", sigma2)
            }
            Self::Orthogonal { beta, m, n } => {
                dim("m", m)?;
                dim("n", n)?;
                // Orthonormal rows need m <= n; otherwise J Jᵀ is rank deficient.
                check_param("m", m as f64, m <= n, "orthogonal transform needs m <= n")?;
                positive("beta", beta)
            }
            Self::DataNorm { sigma_b2, m } => {
                dim("m", m)?;
                positive("sigma_B2", sigma_b2)
            }
            Self::SMN { alpha2, m } => {
                dim("m", m)?;
                positive("alpha2", alpha2)
            }
            Self::Identity { m } => dim("m", m),
        }
    }
}

fn leaky_moments<T: Scalar>(p: T, gamma: T) -> (T, T) {
    let g2 = gamma * gamma;
    let phi = p + g2 * (T::one() - p);
    let second = g2 * g2 * (T::one() - p) + p;
    (phi, second - phi * phi)
}

/// Analytic moments of `spec` placed at input width `width`.
pub fn component_moments<T: Scalar>(spec: &ComponentSpec<T>, width: usize) -> Result<Moments<T>> {
    spec.validate()?;
    if width == 0 {
        return Err(Error::InvalidParameter {
            name: "width",
            value: 0.0,
            reason: "dimension must be at least 1",
        });
    }
    let out = spec.out_width(width)?;
    let sq = |x: T| x * x;
    let (phi, varphi) = match *spec {
        ComponentSpec::ReLU { p } => (p, Some(p - p * p)),
        ComponentSpec::LeakyReLU { p, gamma } => {
            let (phi, var) = leaky_moments(p, gamma);
            (phi, Some(var))
        }
        ComponentSpec::Tanh => (T::one(), Some(T::zero())),
        ComponentSpec::SPReLU { alpha } => {
            let (phi, var) = leaky_moments(T::lit(0.5), alpha);
            let s2 = T::one() / (T::one() + sq(alpha));
            (phi * s2, Some(var * s2 * s2))
        }
        ComponentSpec::SeLU { lambda, alpha, input_var } => {
            let s = selu_moments(lambda, alpha, input_var)?;
            (s.phi, Some(s.varphi))
        }
        ComponentSpec::DenseGaussian { m, n, mu, sigma2 } => {
            let (mf, nf) = (T::from_usize_lossy(m), T::from_usize_lossy(n));
            if mu == T::zero() {
                (nf * sigma2, Some(mf * nf * sq(sigma2)))
            } else {
                if m.min(n) < ASYMPTOTIC_MIN_DIM {
                    log::warn!("non-central dense layer {m}x{n} is below the asymptotic regime");
                }
                let c = nf / mf;
                let mu2 = sq(mu);
                let phi = sigma2 * nf + nf * mu2;
                let second = sq(mf) * sq(sigma2) * (c + c * c)
                    + T::lit(6.0) * sq(nf) * mu2 * sigma2
                    + mf * sq(nf) * sq(mu2);
                (phi, Some(second - phi * phi))
            }
        }
        ComponentSpec::Conv2D { c_in, geometry, sigma2, .. } => {
            let k: T = effective_kernel_size(&geometry)?;
            (T::from_usize_lossy(c_in) * k * sigma2, None)
        }
        ComponentSpec::Orthogonal { beta, .. } => (sq(beta), Some(T::zero())),
        ComponentSpec::DataNorm { sigma_b2, m } => {
            let phi = T::one() / sigma_b2;
            (phi, Some(T::lit(2.0) * sq(phi) / T::from_usize_lossy(m)))
        }
        ComponentSpec::SMN { alpha2, .. } => (T::one() / sq(alpha2), Some(T::zero())),
        ComponentSpec::Identity { .. } => (T::one(), Some(T::zero())),
    };
    Ok(Moments::new(phi, varphi, out, width))
}

/// Moments of a SeLU layer fed `x ~ N(0, input_var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeluMoments<T> {
    /// `E[f'(x)^2]`
    pub phi: T,
    /// `E[f'(x)^4] - phi^2`
    pub varphi: T,
    /// `E[f(x)^2]`
    pub out_second_moment: T,
    /// `E[f(x)]`
    pub out_mean: T,
}

/// Closed-form SeLU moments.
///
/// The fourth derivative moment is not needed for the solver but lets SeLU
/// report a variance like the other activations.
pub fn selu_moments<T: Scalar>(lambda: T, alpha: T, input_var: T) -> Result<SeluMoments<T>> {
    let f = |x: T| x.to_f64_lossy();
    check_param("lambda", f(lambda), true, "")?;
    check_param("alpha", f(alpha), true, "")?;
    check_param("input_var", f(input_var), f(input_var) > 0.0, "must be positive")?;

    let (two, half) = (T::lit(2.0), T::lit(0.5));
    let v = input_var;
    let s = v.sqrt();
    let l2 = lambda * lambda;
    let la2 = l2 * alpha * alpha;
    // e^{k²v/2} Φ(-k s): Gaussian integrals of e^{kx} over x < 0.
    let tail = |k: T| (k * k * v * half).exp() * normal_cdf(-k * s);
    let a = tail(two);
    let b = tail(T::one());

    let phi = la2 * a + l2 * half;
    let fourth = la2 * la2 * tail(T::lit(4.0)) + l2 * l2 * half;
    let out_second_moment = la2 * (a - two * b + half) + l2 * v * half;
    let out_mean = lambda * alpha * (b - half) + lambda * s / (two * T::PI()).sqrt();
    Ok(SeluMoments {
        phi,
        varphi: fourth - phi * phi,
        out_second_moment,
        out_mean,
    })
}

/// Structure flags of a single component.
pub fn structure_flags<T: Scalar>(spec: &ComponentSpec<T>) -> StructureFlags {
    use InvarianceOrder as O;
    let (central, order, r_diagonal, general_linear) = match *spec {
        ComponentSpec::DenseGaussian { mu, .. } if mu == T::zero() => (true, O::Infinite, true, true),
        ComponentSpec::DenseGaussian { .. } => (false, O::None, false, true),
        ComponentSpec::Conv2D { .. } => (true, O::First, false, true),
        ComponentSpec::Orthogonal { .. } => (true, O::Second, true, true),
        ComponentSpec::Identity { .. } => return StructureFlags::IDENTITY,
        ComponentSpec::Tanh | ComponentSpec::SeLU { .. } => (false, O::None, false, false),
        ComponentSpec::ReLU { .. }
        | ComponentSpec::LeakyReLU { .. }
        | ComponentSpec::SPReLU { .. }
        | ComponentSpec::DataNorm { .. }
        | ComponentSpec::SMN { .. } => (false, O::None, false, true),
    };
    StructureFlags {
        expectant_orthogonal: true,
        central,
        unitary_invariance_order: order,
        r_diagonal,
        general_linear,
    }
}
