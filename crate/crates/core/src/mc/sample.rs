//! Explicit Jacobians of library components at sampled inputs.

use faer::Mat;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::effective_kernel::ConvGeometry;
use crate::error::{Error, Result};
use crate::mc::factor::{CompactMatrix, JacobianFactor};
use crate::moments::ComponentSpec;
use crate::rng::{trial_rng, TrialRng};

/// Largest expanded convolution matrix (entries) the sampler builds.
pub const CONV_EXPANSION_LIMIT: usize = 1 << 24;

/// Input variance used for tanh when no input is given; keeps it in the
/// near-linear regime its analytic moments assume.
pub const TANH_PROBE_VAR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SampledComponent {
    pub jacobian: JacobianFactor,
    pub output: Vec<f64>,
}

fn normal(rng: &mut TrialRng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_vec(rng: &mut TrialRng, n: usize, mean: f64, std: f64) -> Vec<f64> {
    (0..n).map(|_| mean + std * normal(rng)).collect()
}

/// A representative input for `spec` when none is supplied.
pub fn default_input(spec: &ComponentSpec<f64>, width: usize, rng: &mut TrialRng) -> Vec<f64> {
    match *spec {
        ComponentSpec::ReLU { p } | ComponentSpec::LeakyReLU { p, .. } => (0..width)
            .map(|_| {
                let mag = normal(rng).abs();
                if rng.gen::<f64>() < p {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
        ComponentSpec::Tanh => gaussian_vec(rng, width, 0.0, TANH_PROBE_VAR.sqrt()),
        ComponentSpec::SeLU { input_var, .. } => gaussian_vec(rng, width, 0.0, input_var.sqrt()),
        ComponentSpec::DataNorm { sigma_b2, .. } => gaussian_vec(rng, width, 0.0, sigma_b2.sqrt()),
        ComponentSpec::SMN { alpha2, .. } => gaussian_vec(rng, width, 0.0, alpha2),
        _ => gaussian_vec(rng, width, 0.0, 1.0),
    }
}

fn elementwise(input: &[f64], f: impl Fn(f64) -> (f64, f64)) -> SampledComponent {
    let (output, diag) = input.iter().map(|&x| f(x)).unzip();
    SampledComponent {
        jacobian: JacobianFactor::Diagonal(diag),
        output,
    }
}

fn dense_output(j: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    (0..j.nrows()).map(|i| (0..j.ncols()).map(|k| j[(i, k)] * x[k]).sum()).collect()
}

fn dense_factor(j: Mat<f64>, x: &[f64]) -> SampledComponent {
    let output = dense_output(&j, x);
    SampledComponent {
        jacobian: JacobianFactor::Compact(CompactMatrix::from_dense(j)),
        output,
    }
}

/// Rectifier slope: pre-activation sign picks the branch; `p` of exactly 0
/// or 1 means the sign is fixed.
fn rectifier(p: f64, x: f64, negative_slope: f64) -> f64 {
    let on = if p == 0.0 {
        false
    } else if p == 1.0 {
        true
    } else {
        x > 0.0
    };
    if on {
        1.0
    } else {
        negative_slope
    }
}

/// Haar-distributed `m x n` matrix with orthonormal rows (`m <= n`).
pub fn haar_orthogonal(m: usize, n: usize, rng: &mut TrialRng) -> Mat<f64> {
    let g = Mat::from_fn(n, m, |_, _| normal(rng));
    let qr = g.qr();
    let q = qr.compute_thin_Q();
    let r = qr.thin_R();
    // Sign-fix so the distribution is exactly Haar.
    Mat::from_fn(m, n, |i, j| if r[(i, i)] < 0.0 { -q[(j, i)] } else { q[(j, i)] })
}

/// Toeplitz expansion of a multi-channel convolution with kernel `k[co][ci][a][b]`.
pub fn conv_matrix(geometry: &ConvGeometry, c_out: usize, c_in: usize, k: &[f64]) -> Result<Mat<f64>> {
    let g = geometry;
    let (h_out, w_out) = (g.h_out(), g.w_out());
    let rows = c_out * h_out * w_out;
    let cols = c_in * g.h_in * g.w_in;
    if rows.saturating_mul(cols) > CONV_EXPANSION_LIMIT {
        return Err(Error::SizeLimit {
            what: "expanded convolution matrix",
            size: rows.saturating_mul(cols),
            limit: CONV_EXPANSION_LIMIT,
        });
    }
    let mut j = Mat::zeros(rows, cols);
    for co in 0..c_out {
        for oh in 0..h_out {
            for ow in 0..w_out {
                let row = (co * h_out + oh) * w_out + ow;
                for ci in 0..c_in {
                    for a in 0..g.k_h {
                        let ih = (oh * g.s_h + a) as i64 - g.p_h as i64;
                        if ih < 0 || ih >= g.h_in as i64 {
                            continue;
                        }
                        for b in 0..g.k_w {
                            let iw = (ow * g.s_w + b) as i64 - g.p_w as i64;
                            if iw < 0 || iw >= g.w_in as i64 {
                                continue;
                            }
                            let col = (ci * g.h_in + ih as usize) * g.w_in + iw as usize;
                            j[(row, col)] = k[((co * c_in + ci) * g.k_h + a) * g.k_w + b];
                        }
                    }
                }
            }
        }
    }
    Ok(j)
}

/// Samples the Jacobian of `spec` at `input`, drawing any weights from `rng`.
pub fn sample_component(spec: &ComponentSpec<f64>, input: &[f64], rng: &mut TrialRng) -> Result<SampledComponent> {
    spec.validate()?;
    spec.out_width(input.len())?;
    let sampled = match *spec {
        ComponentSpec::ReLU { p } => elementwise(input, |x| {
            let d = rectifier(p, x, 0.0);
            (d * x, d)
        }),
        ComponentSpec::LeakyReLU { p, gamma } => elementwise(input, |x| {
            let d = rectifier(p, x, gamma);
            (d * x, d)
        }),
        ComponentSpec::SPReLU { alpha } => {
            let s = 1.0 / (1.0 + alpha * alpha).sqrt();
            elementwise(input, |x| {
                let d = s * rectifier(0.5, x, alpha);
                (d * x, d)
            })
        }
        ComponentSpec::Tanh => elementwise(input, |x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        }),
        ComponentSpec::SeLU { lambda, alpha, .. } => elementwise(input, |x| {
            if x > 0.0 {
                (lambda * x, lambda)
            } else {
                (lambda * alpha * x.exp_m1(), lambda * alpha * x.exp())
            }
        }),
        ComponentSpec::Identity { .. } => elementwise(input, |x| (x, 1.0)),
        ComponentSpec::DenseGaussian { m, n, mu, sigma2 } => {
            let s = sigma2.sqrt();
            dense_factor(Mat::from_fn(m, n, |_, _| mu + s * normal(rng)), input)
        }
        ComponentSpec::Orthogonal { beta, m, n } => {
            let q = haar_orthogonal(m, n, rng);
            dense_factor(Mat::from_fn(m, n, |i, j| beta * q[(i, j)]), input)
        }
        ComponentSpec::Conv2D { c_out, c_in, geometry, sigma2 } => {
            let s = sigma2.sqrt();
            let k: Vec<f64> = (0..c_out * c_in * geometry.k_h * geometry.k_w).map(|_| s * normal(rng)).collect();
            dense_factor(conv_matrix(&geometry, c_out, c_in, &k)?, input)
        }
        ComponentSpec::DataNorm { m, .. } => {
            let mf = m as f64;
            let mean = input.iter().sum::<f64>() / mf;
            let sigma = (input.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / mf).sqrt();
            let u: Vec<f64> = input.iter().map(|x| (x - mean) / sigma).collect();
            let j = Mat::from_fn(m, m, |i, k| {
                let delta = if i == k { 1.0 } else { 0.0 };
                (delta - (1.0 + u[i] * u[k]) / mf) / sigma
            });
            SampledComponent {
                jacobian: JacobianFactor::Compact(CompactMatrix::from_dense(j)),
                output: u,
            }
        }
        ComponentSpec::SMN { m, .. } => {
            let mf = m as f64;
            let alpha = (input.iter().map(|x| x * x).sum::<f64>() / mf).sqrt();
            let u: Vec<f64> = input.iter().map(|x| x / alpha).collect();
            let j = Mat::from_fn(m, m, |i, k| {
                let delta = if i == k { 1.0 } else { 0.0 };
                (delta - u[i] * u[k] / mf) / alpha
            });
            SampledComponent {
                jacobian: JacobianFactor::Compact(CompactMatrix::from_dense(j)),
                output: u,
            }
        }
    };
    Ok(sampled)
}

/// Dense Jacobian of `spec` at width `width`, evaluated at `input` or at a
/// representative input drawn from the seed.
pub fn sample_jacobian(spec: &ComponentSpec<f64>, width: usize, input: Option<&[f64]>, seed: u64) -> Result<Mat<f64>> {
    let mut rng = trial_rng(seed, 0);
    let owned;
    let x = match input {
        Some(x) => {
            if x.len() != width {
                return Err(Error::LengthMismatch {
                    expected: width,
                    found: x.len(),
                });
            }
            x
        }
        None => {
            owned = default_input(spec, width, &mut rng);
            &owned
        }
    };
    Ok(sample_component(spec, x, &mut rng)?.jacobian.to_dense())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective_kernel::brute_force_kernel_oracle;
    use crate::mc::factor::empirical_moments;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        for (m, n) in [(40, 40), (30, 50)] {
            let beta = 1.7;
            let j = sample_jacobian(&ComponentSpec::Orthogonal { beta, m, n }, n, None, 5).unwrap();
            let g = &j * j.transpose();
            let err = (&g - Mat::<f64>::identity(m, m) * faer::Scale(beta * beta)).norm_max();
            assert!(err < 1e-10, "{err}");
            assert!(empirical_moments(j.as_ref()).varphi.unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn relu_mask_rate() {
        let j = sample_jacobian(&ComponentSpec::relu(), 2000, None, 11).unwrap();
        let mean = (0..2000).map(|i| j[(i, i)]).sum::<f64>() / 2000.0;
        assert!((0.47..=0.53).contains(&mean), "{mean}");
    }

    #[test]
    fn degenerate_rectifiers_ignore_input() {
        let mut rng = trial_rng(0, 0);
        let x = [1.0, -1.0, 2.0];
        let off = sample_component(&ComponentSpec::ReLU { p: 0.0 }, &x, &mut rng).unwrap();
        assert_eq!(off.jacobian, JacobianFactor::Diagonal(vec![0.0; 3]));
        let on = sample_component(&ComponentSpec::ReLU { p: 1.0 }, &x, &mut rng).unwrap();
        assert_eq!(on.jacobian, JacobianFactor::Diagonal(vec![1.0; 3]));
    }

    #[test]
    fn datanorm_rows_sum_to_zero() {
        let spec = ComponentSpec::DataNorm { sigma_b2: 2.0, m: 2000 };
        let j = sample_jacobian(&spec, 2000, None, 3).unwrap();
        let worst = (0..2000)
            .map(|i| (0..2000).map(|k| j[(i, k)]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn datanorm_spectrum_is_projector() {
        // J Jᵀ = (I - P)/sigma² with P a rank-2 projector.
        let m = 64;
        let spec = ComponentSpec::DataNorm { sigma_b2: 1.0, m };
        let x: Vec<f64> = (0..m).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        let j = sample_jacobian(&spec, m, Some(&x), 0).unwrap();
        let mean = x.iter().sum::<f64>() / m as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        let e = empirical_moments(j.as_ref());
        let mf = m as f64;
        assert!((e.phi - (mf - 2.0) / (mf * var)).abs() < 1e-12);
        let second = (mf - 2.0) / (mf * var * var);
        assert!((e.varphi.unwrap() - (second - e.phi * e.phi)).abs() < 1e-12);
    }

    #[test]
    fn smn_kills_input_direction() {
        let m = 50;
        let x: Vec<f64> = (0..m).map(|i| (i as f64 * 0.3).sin() + 0.2).collect();
        let j = sample_jacobian(&ComponentSpec::SMN { alpha2: 1.0, m }, m, Some(&x), 0).unwrap();
        let jx: f64 = (0..m).map(|i| (0..m).map(|k| j[(i, k)] * x[k]).sum::<f64>().abs()).fold(0.0, f64::max);
        assert!(jx < 1e-12);
    }

    #[test]
    fn conv_expansion_counts_match_kernel_oracle() {
        let g = ConvGeometry::new([3, 3], [1, 1], [1, 1], [6, 5]).unwrap();
        let ones = vec![1.0; 9];
        let j = conv_matrix(&g, 1, 1, &ones).unwrap();
        let live = (0..j.nrows()).map(|r| (0..j.ncols()).filter(|&c| j[(r, c)] != 0.0).count()).sum::<usize>();
        let oracle: f64 = brute_force_kernel_oracle(&g).unwrap();
        assert!((live as f64 / j.nrows() as f64 - oracle).abs() < 1e-12);
    }

    #[test]
    fn conv_budget_enforced() {
        let g = ConvGeometry::new([3, 3], [1, 1], [1, 1], [64, 64]).unwrap();
        let spec = ComponentSpec::Conv2D { c_out: 8, c_in: 8, geometry: g, sigma2: 1.0 };
        assert!(matches!(sample_jacobian(&spec, 8 * 64 * 64, None, 0), Err(Error::SizeLimit { .. })));
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = ComponentSpec::DenseGaussian { m: 20, n: 30, mu: 0.1, sigma2: 0.5 };
        assert_eq!(sample_jacobian(&spec, 30, None, 9).unwrap(), sample_jacobian(&spec, 30, None, 9).unwrap());
        assert_ne!(sample_jacobian(&spec, 30, None, 9).unwrap(), sample_jacobian(&spec, 30, None, 10).unwrap());
    }
}
