//! Serial/parallel composition of spectrum moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{component_moments, structure_flags, ComponentSpec, InvarianceOrder, Moments, StructureFlags};
use crate::scalar::Scalar;

pub const DEFAULT_TOL_PHI: f64 = 0.05;
pub const DEFAULT_TOL_VARPHI: f64 = 0.5;

/// How strongly a composition step is justified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Proven,
    Assumed,
    Violated,
}

impl Verdict {
    fn worst(self, other: Self) -> Self {
        self.max(other)
    }
}

/// Result of one composition step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composed<T> {
    pub moments: Moments<T>,
    pub flags: StructureFlags,
    pub verdict: Verdict,
    pub trace: Vec<String>,
}

/// Whether unproven variances are still computed (and labelled `assumed`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarphiPolicy {
    /// Report varphi only when the prerequisites are proven.
    #[default]
    Strict,
    Assume,
}

fn is_neutral<T: Scalar>(m: &Moments<T>, f: &StructureFlags) -> bool {
    m.out_dim == m.in_dim
        && m.phi == T::one()
        && m.varphi == Some(T::zero())
        && f.unitary_invariance_order == InvarianceOrder::Infinite
        && !f.central
}

fn chain_order(parts: &[(Moments<impl Scalar>, StructureFlags)]) -> InvarianceOrder {
    let active: Vec<_> = parts.iter().filter(|(m, f)| !is_neutral(m, f)).collect();
    if active.len() <= 1 {
        return InvarianceOrder::Infinite;
    }
    let best = active
        .iter()
        .map(|(_, f)| f.unitary_invariance_order)
        .max()
        .unwrap_or(InvarianceOrder::None);
    if best >= InvarianceOrder::Second {
        best
    } else if parts[1..].iter().all(|(_, f)| f.expectant_orthogonal) {
        InvarianceOrder::First
    } else {
        InvarianceOrder::None
    }
}

/// Multiplication rule over `parts`, listed from input to output.
pub fn compose_serial<T: Scalar>(parts: &[(Moments<T>, StructureFlags)]) -> Result<(Moments<T>, StructureFlags)> {
    compose_serial_traced(parts, VarphiPolicy::Strict).map(|c| (c.moments, c.flags))
}

pub fn compose_serial_traced<T: Scalar>(
    parts: &[(Moments<T>, StructureFlags)],
    policy: VarphiPolicy,
) -> Result<Composed<T>> {
    let (first, _) = parts.first().ok_or(Error::EmptyChain)?;
    for (k, pair) in parts.windows(2).enumerate() {
        if pair[1].0.in_dim != pair[0].0.out_dim {
            return Err(Error::DimensionMismatch {
                context: format!("serial part {} input", k + 1),
                expected: pair[0].0.out_dim,
                found: pair[1].0.in_dim,
            });
        }
    }
    let out_dim = parts[parts.len() - 1].0.out_dim;
    let order = chain_order(parts);
    let flags = StructureFlags {
        expectant_orthogonal: parts.iter().all(|(_, f)| f.expectant_orthogonal),
        central: parts.iter().any(|(_, f)| f.central),
        unitary_invariance_order: order,
        r_diagonal: {
            let mut active = parts.iter().filter(|(m, f)| !is_neutral(m, f)).peekable();
            active.peek().is_none() || active.any(|(_, f)| f.r_diagonal)
        },
        general_linear: parts.iter().all(|(_, f)| f.general_linear),
    };

    let phi = parts.iter().fold(T::one(), |acc, (m, _)| acc * m.phi);
    let mut trace = Vec::new();
    let mut verdict = Verdict::Proven;
    if order >= InvarianceOrder::First {
        trace.push(format!("serial x{}: phi multiplies ({order:?} order invariance)", parts.len()));
    } else {
        verdict = Verdict::Assumed;
        trace.push(format!(
            "serial x{}: phi multiplied without 1st-order invariance (non expectant-orthogonal factor)",
            parts.len()
        ));
    }

    let all_known = parts.iter().all(|(m, _)| m.varphi.is_some());
    let varphi = if !all_known {
        trace.push("varphi unknown: a factor has no analytic variance".into());
        None
    } else if order < InvarianceOrder::Second && policy == VarphiPolicy::Strict {
        trace.push(format!("varphi withheld: chain is only {order:?} order invariant"));
        None
    } else {
        if order < InvarianceOrder::Second {
            verdict = verdict.worst(Verdict::Assumed);
            trace.push(format!("varphi assumed: chain is only {order:?} order invariant"));
        }
        Some(serial_varphi(parts, phi, out_dim))
    };

    Ok(Composed {
        moments: Moments::new(phi, varphi, out_dim, first.in_dim),
        flags,
        verdict,
        trace,
    })
}

fn serial_varphi<T: Scalar>(parts: &[(Moments<T>, StructureFlags)], phi: T, out_dim: usize) -> T {
    if phi == T::zero() {
        // Some factor is the zero map, so is the product.
        return T::zero();
    }
    let m_l = T::from_usize_lossy(out_dim);
    let sum = parts.iter().fold(T::zero(), |acc, (m, _)| {
        let v = m.varphi.unwrap_or(T::zero());
        acc + m_l / T::from_usize_lossy(m.out_dim) * v / (m.phi * m.phi)
    });
    phi * phi * sum
}

/// Addition rule over parallel branches sharing input and output.
pub fn compose_parallel<T: Scalar>(
    branches: &[(Moments<T>, StructureFlags)],
) -> Result<(Moments<T>, StructureFlags)> {
    compose_parallel_traced(branches, VarphiPolicy::Strict).map(|c| (c.moments, c.flags))
}

pub fn compose_parallel_traced<T: Scalar>(
    branches: &[(Moments<T>, StructureFlags)],
    policy: VarphiPolicy,
) -> Result<Composed<T>> {
    let (first, _) = branches.first().ok_or(Error::EmptyChain)?;
    for (k, (m, _)) in branches.iter().enumerate().skip(1) {
        for (what, expected, found) in [("output", first.out_dim, m.out_dim), ("input", first.in_dim, m.in_dim)] {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    context: format!("parallel branch {k} {what}"),
                    expected,
                    found,
                });
            }
        }
    }
    let non_central = branches.iter().filter(|(_, f)| !f.central).count();
    if non_central > 1 {
        return Err(Error::AdditionPrerequisite { non_central });
    }

    let all = |pred: fn(&StructureFlags) -> bool| branches.iter().all(|(_, f)| pred(f));
    let second = all(|f| f.unitary_invariance_order >= InvarianceOrder::Second);
    let r_diagonal = all(|f| f.r_diagonal);
    let order = if second && r_diagonal {
        branches
            .iter()
            .map(|(_, f)| f.unitary_invariance_order)
            .min()
            .unwrap_or(InvarianceOrder::None)
    } else if all(|f| f.expectant_orthogonal) {
        InvarianceOrder::First
    } else {
        InvarianceOrder::None
    };
    let flags = StructureFlags {
        expectant_orthogonal: all(|f| f.expectant_orthogonal),
        central: non_central == 0,
        unitary_invariance_order: order,
        r_diagonal,
        general_linear: all(|f| f.general_linear),
    };

    let phi = branches.iter().fold(T::zero(), |acc, (m, _)| acc + m.phi);
    let mut trace = vec![format!(
        "parallel x{}: phi adds ({non_central} non-central branch{})",
        branches.len(),
        if non_central == 1 { "" } else { "es" }
    )];
    let mut verdict = Verdict::Proven;
    let varphi = if !branches.iter().all(|(m, _)| m.varphi.is_some()) {
        trace.push("varphi unknown: a branch has no analytic variance".into());
        None
    } else {
        let proven = second && r_diagonal;
        if !proven && policy == VarphiPolicy::Strict {
            trace.push("varphi withheld: branches not all R-diagonal with 2nd-order invariance".into());
            None
        } else {
            if !proven {
                verdict = Verdict::Assumed;
                trace.push("varphi assumed: branches not all R-diagonal with 2nd-order invariance".into());
            }
            let spread = branches.iter().fold(T::zero(), |acc, (m, _)| {
                acc + m.varphi.unwrap_or(T::zero()) - m.phi * m.phi
            });
            Some(phi * phi + spread)
        }
    };
    Ok(Composed {
        moments: Moments::new(phi, varphi, first.out_dim, first.in_dim),
        flags,
        verdict,
        trace,
    })
}

/// A block is either a serial chain or a parallel sum of serial branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block<T> {
    Serial(Vec<ComponentSpec<T>>),
    Parallel(Vec<Vec<ComponentSpec<T>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph<T>", bound(deserialize = "T: Scalar + serde::de::DeserializeOwned"))]
pub struct NetworkGraph<T> {
    blocks: Vec<Block<T>>,
    dims: Vec<usize>,
}

#[derive(Deserialize)]
struct RawGraph<T> {
    blocks: Vec<Block<T>>,
    dims: Vec<usize>,
}

impl<T: Scalar> TryFrom<RawGraph<T>> for NetworkGraph<T> {
    type Error = Error;

    fn try_from(raw: RawGraph<T>) -> Result<Self> {
        Self::new(raw.blocks, raw.dims)
    }
}

impl<T: Scalar> NetworkGraph<T> {
    /// Validates and normalizes a graph. `dims` lists the widths at block
    /// boundaries; a single-branch parallel block becomes a serial one.
    pub fn new(blocks: Vec<Block<T>>, dims: Vec<usize>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::EmptyChain);
        }
        if dims.len() != blocks.len() + 1 {
            return Err(Error::LengthMismatch {
                expected: blocks.len() + 1,
                found: dims.len(),
            });
        }
        let blocks: Vec<Block<T>> = blocks
            .into_iter()
            .map(|b| match b {
                Block::Parallel(mut br) if br.len() == 1 => Block::Serial(br.remove(0)),
                other => other,
            })
            .collect();
        for (i, block) in blocks.iter().enumerate() {
            let chains: Vec<&Vec<ComponentSpec<T>>> = match block {
                Block::Serial(c) => vec![c],
                Block::Parallel(br) if br.is_empty() => {
                    return Err(Error::InvalidGraph(format!("block {i}: parallel block has no branches")))
                }
                Block::Parallel(br) => br.iter().collect(),
            };
            for (b, chain) in chains.into_iter().enumerate() {
                if chain.is_empty() {
                    return Err(Error::InvalidGraph(format!("block {i} branch {b}: empty chain")));
                }
                let mut width = dims[i];
                for (k, spec) in chain.iter().enumerate() {
                    spec.validate()?;
                    width = spec.out_width(width).map_err(|e| match e {
                        Error::DimensionMismatch { expected, found, .. } => Error::DimensionMismatch {
                            context: format!("block {i} branch {b} component {k} ({})", spec.name()),
                            expected,
                            found,
                        },
                        e => e,
                    })?;
                }
                if width != dims[i + 1] {
                    return Err(Error::DimensionMismatch {
                        context: format!("block {i} branch {b} output"),
                        expected: dims[i + 1],
                        found: width,
                    });
                }
            }
        }
        Ok(Self { blocks, dims })
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Serial chain of identical blocks.
    pub fn repeat(block: Block<T>, count: usize, width: usize) -> Result<Self> {
        Self::new(vec![block; count], vec![width; count + 1])
    }
}

fn chain_parts<T: Scalar>(chain: &[ComponentSpec<T>], width: usize) -> Result<Vec<(Moments<T>, StructureFlags)>> {
    let mut w = width;
    chain
        .iter()
        .map(|spec| {
            let m = component_moments(spec, w)?;
            w = m.out_dim;
            Ok((m, structure_flags(spec)))
        })
        .collect()
}

/// Composes one block placed at input width `width`.
pub fn compose_block<T: Scalar>(block: &Block<T>, width: usize, policy: VarphiPolicy) -> Result<Composed<T>> {
    match block {
        Block::Serial(chain) => compose_serial_traced(&chain_parts(chain, width)?, policy),
        Block::Parallel(branches) => {
            let mut composed = Vec::with_capacity(branches.len());
            let mut trace = Vec::new();
            let mut verdict = Verdict::Proven;
            for (b, chain) in branches.iter().enumerate() {
                let c = compose_serial_traced(&chain_parts(chain, width)?, policy)?;
                verdict = verdict.worst(c.verdict);
                trace.extend(c.trace.into_iter().map(|t| format!("branch {b}: {t}")));
                composed.push((c.moments, c.flags));
            }
            let mut sum = compose_parallel_traced(&composed, policy)?;
            trace.append(&mut sum.trace);
            sum.trace = trace;
            sum.verdict = sum.verdict.worst(verdict);
            Ok(sum)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions<T> {
    pub tol_phi: T,
    pub tol_varphi: T,
    pub policy: VarphiPolicy,
}

impl<T: Scalar> Default for AnalysisOptions<T> {
    fn default() -> Self {
        Self {
            tol_phi: T::lit(DEFAULT_TOL_PHI),
            tol_varphi: T::lit(DEFAULT_TOL_VARPHI),
            policy: VarphiPolicy::Strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport<T> {
    pub index: usize,
    /// `None` when the block's prerequisites are violated.
    pub moments: Option<Moments<T>>,
    pub flags: Option<StructureFlags>,
    pub verdict: Verdict,
    /// Block dynamical isometry; `None` when varphi is unknown and phi passes.
    pub isometric: Option<bool>,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult<T> {
    /// Whole-network moments; `None` when some block is violated.
    pub moments: Option<Moments<T>>,
    pub prerequisite_verdict: Verdict,
    pub justification: Vec<String>,
    pub per_block: Vec<BlockReport<T>>,
}

impl<T: Scalar> CompositionResult<T> {
    /// Whether any block fails the isometry tolerances or its prerequisites.
    pub fn has_violations(&self) -> bool {
        self.per_block
            .iter()
            .any(|b| b.verdict == Verdict::Violated || b.isometric == Some(false))
    }
}

/// Per-block and whole-network moments of `g`.
pub fn analyze_graph<T: Scalar>(g: &NetworkGraph<T>, opts: &AnalysisOptions<T>) -> Result<CompositionResult<T>> {
    let mut per_block = Vec::with_capacity(g.blocks.len());
    let mut parts = Vec::with_capacity(g.blocks.len());
    let mut justification = Vec::new();
    let mut violated = false;
    for (index, block) in g.blocks.iter().enumerate() {
        match compose_block(block, g.dims[index], opts.policy) {
            Ok(c) => {
                justification.extend(c.trace.iter().map(|t| format!("block {index}: {t}")));
                parts.push((c.moments, c.flags));
                per_block.push(BlockReport {
                    index,
                    isometric: c.moments.is_block_isometric(opts.tol_phi, opts.tol_varphi),
                    moments: Some(c.moments),
                    flags: Some(c.flags),
                    verdict: c.verdict,
                    trace: c.trace,
                });
            }
            Err(Error::AdditionPrerequisite { non_central }) => {
                violated = true;
                let msg = format!("{non_central} non-central branches; addition rule refused");
                justification.push(format!("block {index}: {msg}"));
                per_block.push(BlockReport {
                    index,
                    moments: None,
                    flags: None,
                    verdict: Verdict::Violated,
                    isometric: None,
                    trace: vec![msg],
                });
            }
            Err(e) => return Err(e),
        }
    }
    if violated {
        return Ok(CompositionResult {
            moments: None,
            prerequisite_verdict: Verdict::Violated,
            justification,
            per_block,
        });
    }
    let net = compose_serial_traced(&parts, opts.policy)?;
    let verdict = per_block.iter().fold(net.verdict, |v, b| v.worst(b.verdict));
    justification.extend(net.trace.into_iter().map(|t| format!("network: {t}")));
    Ok(CompositionResult {
        moments: Some(net.moments),
        prerequisite_verdict: verdict,
        justification,
        per_block,
    })
}

/// Moments of a dense-connectivity block concatenating `c_prev` input
/// channels with `delta` new ones produced by `h`.
pub fn densenet_block<T: Scalar>(c_prev: usize, delta: usize, h: &Moments<T>) -> Result<Moments<T>> {
    if c_prev == 0 || delta == 0 {
        return Err(Error::InvalidParameter {
            name: if c_prev == 0 { "c_prev" } else { "delta" },
            value: 0.0,
            reason: "must be at least 1",
        });
    }
    let c = T::from_usize_lossy(c_prev + delta);
    let phi = T::from_usize_lossy(c_prev) / c + T::from_usize_lossy(delta) / c * h.phi;
    Ok(Moments::new(phi, None, c_prev + delta, c_prev))
}

/// Relative gradient norm per layer: `theta[i] * prod_{j>i} block_phi[j]`.
pub fn grad_norm_profile<T: Scalar>(block_phi: &[T], theta: &[T]) -> Result<Vec<T>> {
    if block_phi.len() != theta.len() {
        return Err(Error::LengthMismatch {
            expected: block_phi.len(),
            found: theta.len(),
        });
    }
    let mut out = vec![T::zero(); theta.len()];
    let mut downstream = T::one();
    for i in (0..theta.len()).rev() {
        out[i] = theta[i] * downstream;
        downstream = downstream * block_phi[i];
    }
    Ok(out)
}

/// Gradient-norm profile of an analyzed graph. Violated blocks contribute NaN.
pub fn graph_grad_norm_profile<T: Scalar>(result: &CompositionResult<T>, theta: &[T]) -> Result<Vec<T>> {
    let phis: Vec<T> = result
        .per_block
        .iter()
        .map(|b| b.moments.map_or(T::nan(), |m| m.phi))
        .collect();
    grad_norm_profile(&phis, theta)
}

/// `max / min` of a profile; 1 means perfectly flat.
pub fn profile_flatness<T: Scalar>(profile: &[T]) -> T {
    let (lo, hi) = profile
        .iter()
        .fold((T::infinity(), T::zero()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi / lo
}
