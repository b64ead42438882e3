//! `isometry`: Jacobian spectrum analysis of network specs.
//!
//! Exit codes: 0 success, 1 violations found, 2 input error, 3 internal or
//! convergence failure.

mod commands;
mod spec_file;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{Activation, AnalyzeArgs, Failure, Family, Output, VerifyArgs, VerifySource};

#[derive(Parser)]
#[command(name = "isometry", version, about = "Jacobian spectrum moments, gains and Monte-Carlo checks")]
struct Cli {
    /// Emit the machine-readable JSON report.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    #[value(name = "leaky_relu", alias = "leaky-relu")]
    LeakyRelu,
    Tanh,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Orthogonal,
    Sws,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Multiplication,
    Addition,
}

#[derive(Subcommand)]
enum Command {
    /// Per-block moments, prerequisite verdicts and isometry check of a spec file.
    Analyze {
        spec: String,
        /// Also propagate the activation second moment forward.
        #[arg(long)]
        forward: bool,
        /// Compute varphi even where its prerequisites are only assumed.
        #[arg(long)]
        assume_varphi: bool,
        #[arg(long)]
        tol_phi: Option<f64>,
        #[arg(long)]
        tol_varphi: Option<f64>,
    },
    /// Monte-Carlo check of the composition rules.
    Verify {
        /// Spec file: serial blocks are checked as a product, a single parallel block as a sum.
        #[arg(long, conflicts_with = "sweep")]
        spec: Option<String>,
        /// Random configuration sweep instead of a spec file.
        #[arg(long, value_enum)]
        sweep: Option<SweepKind>,
        #[arg(long, default_value_t = 40)]
        configs: usize,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [500, 1500])]
        dim_range: Vec<usize>,
        /// Layers per chain, or branches per sum.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [2, 8])]
        depth_range: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ISOMETRY_MAX_DIM", default_value_t = 5000)]
        max_dim: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        input_mean: f64,
        #[arg(long, default_value_t = 1.0)]
        input_std: f64,
    },
    /// Closed-form initialization gain for a weight layer and activation.
    Gains {
        #[arg(long, value_enum)]
        activation: ActivationArg,
        #[arg(long, value_enum)]
        family: FamilyArg,
        /// Fan-in.
        #[arg(long)]
        n: Option<usize>,
        /// Fan-out; defaults to the fan-in.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// SeLU coefficients for a target phi of 1 + eps.
    SeluSolve {
        #[arg(long, default_value_t = 1.0)]
        gamma0: f64,
        #[arg(long, required_unless_present = "depth", conflicts_with = "depth")]
        eps: Option<f64>,
        /// Pick eps from the network depth.
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Effective kernel size of a zero-padded convolution.
    EffectiveKernel {
        #[arg(long, num_args = 2, value_names = ["KH", "KW"], required = true)]
        k: Vec<usize>,
        #[arg(long, num_args = 2, value_names = ["SH", "SW"], default_values_t = [1, 1])]
        stride: Vec<usize>,
        #[arg(long, num_args = 2, value_names = ["PH", "PW"], default_values_t = [0, 0])]
        pad: Vec<usize>,
        #[arg(long = "in", num_args = 2, value_names = ["H", "W"], required = true)]
        input: Vec<usize>,
        /// Cross-check against the brute-force expansion.
        #[arg(long)]
        oracle: bool,
    },
    /// Second-moment growth of a batch-normalized residual network.
    ResnetProfile {
        #[arg(long)]
        blocks: usize,
        /// Block indices that normalize their shortcut.
        #[arg(long, value_delimiter = ',')]
        downsample_at: Vec<usize>,
    },
    /// Operation counts of batch norm versus second-moment normalization.
    SmnCost,
}

fn pair(v: &[usize]) -> [usize; 2] {
    [v[0], v[1]]
}

fn run(cmd: Command) -> Result<Output, Failure> {
    match cmd {
        Command::Analyze {
            spec,
            forward,
            assume_varphi,
            tol_phi,
            tol_varphi,
        } => commands::analyze(&AnalyzeArgs {
            spec: &spec,
            forward,
            assume_varphi,
            tol_phi,
            tol_varphi,
        }),
        Command::Verify {
            spec,
            sweep,
            configs,
            dim_range,
            depth_range,
            trials,
            seed,
            max_dim,
            input_mean,
            input_std,
        } => {
            let source = match (&spec, sweep) {
                (Some(path), _) => VerifySource::Spec(path),
                (None, Some(kind)) => VerifySource::Sweep {
                    addition: matches!(kind, SweepKind::Addition),
                    configs,
                    dim: (dim_range[0], dim_range[1]),
                    depth: (depth_range[0], depth_range[1]),
                },
                (None, None) => return Err(Failure::Input("give --spec FILE or --sweep KIND".into())),
            };
            commands::verify(&VerifyArgs {
                source,
                trials,
                seed,
                max_dim,
                input_mean,
                input_std,
            })
        }
        Command::Gains {
            activation,
            family,
            n,
            m,
            gamma,
        } => {
            let activation = match activation {
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::LeakyRelu => Activation::LeakyRelu,
                ActivationArg::Tanh => Activation::Tanh,
            };
            let family = match family {
                FamilyArg::Gaussian => Family::Gaussian,
                FamilyArg::Orthogonal => Family::Orthogonal,
                FamilyArg::Sws => Family::Sws,
            };
            commands::gains(activation, family, n, m, gamma)
        }
        Command::SeluSolve { gamma0, eps, depth } => commands::selu(gamma0, eps, depth),
        Command::EffectiveKernel {
            k,
            stride,
            pad,
            input,
            oracle,
        } => commands::effective_kernel(pair(&k), pair(&stride), pair(&pad), pair(&input), oracle),
        Command::ResnetProfile { blocks, downsample_at } => commands::resnet_profile(blocks, &downsample_at),
        Command::SmnCost => Ok(commands::smn_cost()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("report serializes"));
            } else {
                print!("{}", out.text);
            }
            ExitCode::from(if out.violations { 1 } else { 0 })
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}
