use std::fmt::Write as _;

use isometry_core::effective_kernel::{brute_force_kernel_oracle, effective_kernel_size, ConvGeometry};
use isometry_core::flow::{propagate_alpha2, resnet_alpha2_profile};
use isometry_core::gains::{closed_form_gain, depth_aware_eps, selu_solve, GainActivation, WeightFamily};
use isometry_core::graph::{grad_norm_profile, profile_flatness};
use isometry_core::mc::{
    addition_configs, multiplication_configs, run_sweep, SweepRanges, Tolerances, Topology, TrialConfig,
    VerificationReport,
};
use isometry_core::smn_cost::{normalization_op_count, smn_speedup, NormMethod};
use isometry_core::{analyze_graph, AnalysisOptions, Block, Error as CoreError, VarphiPolicy};
use serde_json::{json, Value};

use crate::spec_file::{parse_network_spec, NetworkSpec, SpecError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable or invalid spec: exit code 2.
    Input(String),
    /// Solver or internal failure: exit code 3.
    Internal(String),
}

impl From<SpecError> for Failure {
    fn from(e: SpecError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonConvergence { .. } => Self::Internal(e.to_string()),
            other => Self::Input(other.to_string()),
        }
    }
}

/// What a command prints and whether it found violations.
pub struct Output {
    pub json: Value,
    pub text: String,
    pub violations: bool,
}

fn report(command: &str, body: Value) -> Value {
    let mut v = json!({ "schema_version": SCHEMA_VERSION, "command": command });
    if let (Some(dst), Value::Object(src)) = (v.as_object_mut(), body) {
        dst.extend(src);
    }
    v
}

fn to_value<T: serde::Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("report types serialize")
}

fn read_spec(path: &str) -> Result<NetworkSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("cannot read {path}: {e}")))?;
    Ok(parse_network_spec(&text)?)
}

fn opt(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.6}"))
}

pub struct AnalyzeArgs<'a> {
    pub spec: &'a str,
    pub forward: bool,
    pub assume_varphi: bool,
    pub tol_phi: Option<f64>,
    pub tol_varphi: Option<f64>,
}

pub fn analyze(a: &AnalyzeArgs) -> Result<Output, Failure> {
    let spec = read_spec(a.spec)?;
    let defaults = AnalysisOptions::<f64>::default();
    let opts = AnalysisOptions {
        tol_phi: a.tol_phi.or(spec.analysis.tol_phi).unwrap_or(defaults.tol_phi),
        tol_varphi: a.tol_varphi.or(spec.analysis.tol_varphi).unwrap_or(defaults.tol_varphi),
        policy: if a.assume_varphi { VarphiPolicy::Assume } else { VarphiPolicy::Strict },
    };
    let result = analyze_graph(&spec.graph, &opts)?;
    let profile = match result.moments {
        Some(_) => {
            let phis: Vec<f64> = result.per_block.iter().filter_map(|b| b.moments.map(|m| m.phi)).collect();
            Some(grad_norm_profile(&phis, &vec![1.0; phis.len()])?)
        }
        None => None,
    };
    let alpha2_in = spec.analysis.alpha2_in.unwrap_or(1.0);
    let forward = a.forward.then(|| propagate_alpha2(&spec.graph, alpha2_in));
    let violations = result.has_violations();

    let mut t = String::new();
    match &result.moments {
        Some(m) => writeln!(t, "network: phi={:.6} varphi={} verdict={:?}", m.phi, opt(m.varphi), result.prerequisite_verdict),
        None => writeln!(t, "network: moments withheld, verdict={:?}", result.prerequisite_verdict),
    }
    .ok();
    for b in &result.per_block {
        let iso = match b.isometric {
            Some(true) => "yes",
            Some(false) => "no",
            None => "unknown",
        };
        let (phi, varphi) = b.moments.map_or(("n/a".into(), "n/a".into()), |m| (format!("{:.6}", m.phi), opt(m.varphi)));
        writeln!(t, "block {}: phi={phi} varphi={varphi} verdict={:?} isometric={iso}", b.index, b.verdict).ok();
        for line in &b.trace {
            writeln!(t, "  {line}").ok();
        }
    }
    if let Some(p) = &profile {
        let shown: Vec<String> = p.iter().map(|v| format!("{v:.4}")).collect();
        writeln!(t, "gradient norm profile: [{}] flatness={:.4}", shown.join(", "), profile_flatness(p)).ok();
    }
    match &forward {
        Some(Ok(states)) => {
            writeln!(t, "forward alpha2 (input {alpha2_in}):").ok();
            for s in states {
                writeln!(t, "  {:>3} {}: alpha2={:.6} phi={:.6}", s.layer_index, s.label, s.alpha2, s.phi).ok();
            }
        }
        Some(Err(e)) => {
            writeln!(t, "forward alpha2 unavailable: {e}").ok();
        }
        None => {}
    }
    writeln!(
        t,
        "block dynamical isometry (tol_phi={}, tol_varphi={}): {}",
        opts.tol_phi,
        opts.tol_varphi,
        if violations { "FAIL" } else { "pass" }
    )
    .ok();

    let (fwd, fwd_err) = match forward {
        Some(Ok(s)) => (Some(to_value(&s)), None),
        Some(Err(e)) => (None, Some(e.to_string())),
        None => (None, None),
    };
    let json = report(
        "analyze",
        json!({
            "options": to_value(&opts),
            "result": to_value(&result),
            "gradient_norm_profile": profile,
            "forward": fwd,
            "forward_error": fwd_err,
            "violations": violations,
        }),
    );
    Ok(Output { json, text: t, violations })
}

pub enum VerifySource<'a> {
    Spec(&'a str),
    Sweep { addition: bool, configs: usize, dim: (usize, usize), depth: (usize, usize) },
}

pub struct VerifyArgs<'a> {
    pub source: VerifySource<'a>,
    pub trials: usize,
    pub seed: u64,
    pub max_dim: usize,
    pub input_mean: f64,
    pub input_std: f64,
}

fn spec_trial_config(spec: &NetworkSpec, a: &VerifyArgs) -> Result<TrialConfig, Failure> {
    let blocks = spec.graph.blocks();
    let topology = match blocks {
        [Block::Parallel(branches)] => Topology::Parallel(branches.clone()),
        _ => Topology::Chain(
            blocks
                .iter()
                .map(|b| match b {
                    Block::Serial(c) => Ok(c.clone()),
                    Block::Parallel(_) => Err(Failure::Input(
                        "verify takes either serial blocks (product check) or a single parallel block (sum check)".into(),
                    )),
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    Ok(TrialConfig {
        seed: a.seed,
        dims: spec.graph.dims().to_vec(),
        topology,
        trials: a.trials,
        input_mean: a.input_mean,
        input_std: a.input_std,
        max_dim: a.max_dim,
    })
}

fn report_line(i: usize, r: &VerificationReport) -> String {
    format!(
        "config {i}: phi_ratio={:.4} varphi_ratio={:.4} library_phi_ratio={:.4} library_varphi_ratio={} {}",
        r.phi_ratio,
        r.varphi_ratio,
        r.phi_ratio_library,
        r.varphi_ratio_library.map_or("n/a".into(), |v| format!("{v:.4}")),
        if r.pass { "pass" } else { "FAIL" }
    )
}

pub fn verify(a: &VerifyArgs) -> Result<Output, Failure> {
    if a.trials == 0 {
        return Err(Failure::Input("--trials must be at least 1".into()));
    }
    let tol = Tolerances::default();
    let configs = match &a.source {
        VerifySource::Spec(path) => vec![spec_trial_config(&read_spec(path)?, a)?],
        VerifySource::Sweep { addition, configs, dim, depth } => {
            if dim.0 == 0 || dim.0 > dim.1 || depth.0 == 0 || depth.0 > depth.1 {
                return Err(Failure::Input("ranges must be non-empty with positive lower bounds".into()));
            }
            let ranges = SweepRanges {
                dim: *dim,
                depth: *depth,
                branches: *depth,
                ..SweepRanges::default()
            };
            let mut cfgs = if *addition {
                addition_configs(*configs, a.seed, a.trials, &ranges)
            } else {
                multiplication_configs(*configs, a.seed, a.trials, &ranges)
            };
            for c in &mut cfgs {
                c.max_dim = a.max_dim;
            }
            cfgs
        }
    };
    let summary = run_sweep(&configs, tol)?;
    let violations = match a.source {
        VerifySource::Spec(_) => summary.reports.iter().any(|r| !r.pass),
        VerifySource::Sweep { .. } => summary.phi_in_band < 0.95 || summary.varphi_in_band < 0.90,
    };
    let mut t = String::new();
    for (i, r) in summary.reports.iter().enumerate() {
        writeln!(t, "{}", report_line(i, r)).ok();
    }
    writeln!(
        t,
        "phi in [{}, {}]: {:.1}%  varphi in [{}, {}]: {:.1}%",
        tol.phi.lo,
        tol.phi.hi,
        100.0 * summary.phi_in_band,
        tol.varphi.lo,
        tol.varphi.hi,
        100.0 * summary.varphi_in_band
    )
    .ok();
    let json = report(
        "verify",
        json!({ "configs": to_value(&configs), "summary": to_value(&summary), "violations": violations }),
    );
    Ok(Output { json, text: t, violations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Orthogonal,
    Sws,
}

pub fn gains(activation: Activation, family: Family, n: Option<usize>, m: Option<usize>, gamma: Option<f64>) -> Result<Output, Failure> {
    let act = match activation {
        Activation::Relu => GainActivation::ReLU,
        Activation::Tanh => GainActivation::Tanh,
        Activation::LeakyRelu => {
            let g = gamma.ok_or_else(|| Failure::Input("--gamma is required for leaky_relu".into()))?;
            if !(0.0..1.0).contains(&g) {
                return Err(Failure::Input(format!("--gamma {g} is outside [0, 1)")));
            }
            GainActivation::LeakyReLU { gamma: g }
        }
    };
    let fam = match family {
        Family::Orthogonal => WeightFamily::Orthogonal,
        Family::Gaussian | Family::Sws => {
            let n = n.ok_or_else(|| Failure::Input("--n is required for gaussian and sws families".into()))?;
            let m = m.unwrap_or(n);
            if family == Family::Gaussian {
                WeightFamily::Gaussian { n, m }
            } else {
                WeightFamily::Sws { n, m }
            }
        }
    };
    let r = closed_form_gain::<f64>(act, fam)?;
    let mut t = format!(
        "{} = {:.6}\nachieved phi = {:.6}\nachieved varphi = {}\n",
        r.parameter_name,
        r.values[0],
        r.achieved_phi,
        opt(r.achieved_varphi)
    );
    for note in &r.notes {
        writeln!(t, "note: {note}").ok();
    }
    Ok(Output {
        json: report("gains", json!({ "recommendation": to_value(&r) })),
        text: t,
        violations: false,
    })
}

pub fn selu(gamma0: f64, eps: Option<f64>, depth: Option<usize>) -> Result<Output, Failure> {
    let (eps, bound) = match (eps, depth) {
        (Some(e), None) => (e, None),
        (None, Some(d)) => {
            let de = depth_aware_eps::<f64>(d)?;
            (de.eps, Some(de.bound))
        }
        _ => return Err(Failure::Input("give exactly one of --eps and --depth".into())),
    };
    let s = selu_solve(gamma0, eps)?;
    let mut t = format!(
        "lambda = {:.6}\nalpha = {:.6}\neps = {eps}\niterations = {}\nresiduals = [{:.2e}, {:.2e}]\n",
        s.lambda, s.alpha, s.iterations, s.residuals[0], s.residuals[1]
    );
    if let Some(b) = bound {
        writeln!(t, "gradient growth bound (1+eps)^L = {b:.4}").ok();
    }
    Ok(Output {
        json: report("selu-solve", json!({ "gamma0": gamma0, "eps": eps, "bound": bound, "solution": to_value(&s) })),
        text: t,
        violations: false,
    })
}

pub fn effective_kernel(k: [usize; 2], stride: [usize; 2], pad: [usize; 2], input: [usize; 2], oracle: bool) -> Result<Output, Failure> {
    let g = ConvGeometry::new(k, stride, pad, input)?;
    let size: f64 = effective_kernel_size(&g)?;
    let check: Option<f64> = if oracle { Some(brute_force_kernel_oracle(&g)?) } else { None };
    let mut t = format!("{size}\n");
    if let Some(o) = check {
        writeln!(t, "oracle = {o} (difference {:.1e})", (o - size).abs()).ok();
    }
    Ok(Output {
        json: report(
            "effective-kernel",
            json!({ "geometry": to_value(&g), "full_kernel": k[0] * k[1], "effective_kernel_size": size, "oracle": check }),
        ),
        text: t,
        violations: false,
    })
}

pub fn resnet_profile(blocks: usize, downsample_at: &[usize]) -> Result<Output, Failure> {
    let p = resnet_alpha2_profile::<f64>(blocks, downsample_at)?;
    let mut t = String::from("block  alpha2_in  alpha2_out  phi\n");
    for (i, phi) in p.phi.iter().enumerate() {
        writeln!(t, "{i:>5}  {:>9.4}  {:>10.4}  {phi:.6}", p.alpha2[i], p.alpha2[i + 1]).ok();
    }
    writeln!(t, "product of phi = {:.6}", p.phi.iter().product::<f64>()).ok();
    Ok(Output {
        json: report("resnet-profile", json!({ "profile": to_value(&p) })),
        text: t,
        violations: false,
    })
}

pub fn smn_cost() -> Output {
    let bn = normalization_op_count(NormMethod::BatchNorm);
    let smn = normalization_op_count(NormMethod::SecondMoment);
    let s = smn_speedup();
    let mut t = String::from("method          forward  backward  total (per-sample ops)\n");
    for c in [&bn, &smn] {
        writeln!(
            t,
            "{:<14}  {:>7}  {:>8}  {:>5}",
            format!("{:?}", c.method),
            c.forward.m_total(),
            c.backward.m_total(),
            c.total.m_total()
        )
        .ok();
    }
    writeln!(t, "speedup = {:.0}%  reduction = {:.1}%", 100.0 * s.speedup, 100.0 * s.reduction).ok();
    Output {
        json: report("smn-cost", json!({ "batch_norm": to_value(&bn), "second_moment": to_value(&smn), "speedup": to_value(&s) })),
        text: t,
        violations: false,
    }
}
