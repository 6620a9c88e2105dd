//! Command implementations behind the `rebasin` binary.
//!
//! Every `cmd_*` function writes its human-readable output to the given
//! writer and returns the process exit code; errors are mapped through
//! [`exit_code`].

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rebasin::checkpoint::{
    read_checkpoint, read_eval_batch, read_permutation_assignment, read_task_vector,
    write_checkpoint, write_eval_batch, write_permutation_assignment, write_task_vector,
    write_text_atomic,
};
use rebasin::graph::{apply_assignment, build_coupling_graph, CouplingGraph, GraphOptions, ResidualMode};
use rebasin::matching::{weight_match, MatchOptions};
use rebasin::plant::{add_relative_noise, plant, recovery_rate};
use rebasin::toy::{init_random, lmc_curve, train_toy, verify_equivalence, EquivalenceOptions, EvalBatch};
use rebasin::transport::{compute_task_vector, transport, ScalingSpec};
use rebasin::{ArchSpec, Error, PermutationAssignment};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_ARCH_MISMATCH: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_VERIFY_FAILED: i32 = 4;

/// Recovery rate the demo report treats as a successful plant recovery.
pub const RECOVERY_THRESHOLD: f64 = 0.99;

#[derive(Debug, Parser)]
#[command(name = "rebasin", version, about = "Permutation matching and task-vector transport for transformer weights")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find the assignment that aligns model A onto model B.
    Match(MatchArgs),
    /// Write a permuted copy of a checkpoint.
    Apply(ApplyArgs),
    /// Subtract a base checkpoint from a fine-tuned one.
    TaskVector(TaskVectorArgs),
    /// Add a permuted, scaled task vector to a base checkpoint.
    Transport(TransportArgs),
    /// Check that a permuted model computes the same function.
    Verify(VerifyArgs),
    /// Loss along the straight line between two checkpoints, as CSV.
    Lmc(LmcArgs),
    /// Train, plant, match, verify and interpolate a toy model end to end.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    /// Skip-connection handling: compose the permutations or tie them.
    #[arg(long, default_value = "compose")]
    pub residual_mode: ResidualMode,
    /// Let the embedding-side permutation move instead of pinning it.
    #[arg(long)]
    pub free_input_perm: bool,
}

impl GraphArgs {
    fn options(&self) -> GraphOptions {
        GraphOptions {
            residual_mode: self.residual_mode,
            pin_input: !self.free_input_perm,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    /// Permutation-assignment file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-sweep objective trace file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_sweeps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub p_norm: f64,
    /// Include the output projection in the intra-head assignment.
    #[arg(long)]
    pub include_w0_intra: bool,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub perm: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TaskVectorArgs {
    #[arg(long)]
    pub finetuned: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TransportArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub task_vector: PathBuf,
    #[arg(long)]
    pub perm: PathBuf,
    /// Scalar scaling of the task vector.
    #[arg(long, conflicts_with = "alpha_file", allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Per-block scalings, one per line.
    #[arg(long)]
    pub alpha_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub perm: PathBuf,
    /// Number of random input sequences.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Debug, Clone, Args)]
pub struct LmcArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    /// Evaluation batch container.
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub points: usize,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub n_blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub mlp_hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub output_dim: usize,
    #[arg(long)]
    pub layernorm: bool,
    /// Noise added to the planted model, relative to each tensor's std.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 300)]
    pub train_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 11)]
    pub points: usize,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_sweeps: u64,
    /// Tie mode keeps every permuted model a standalone network, which the
    /// interpolation curves need.
    #[arg(long, default_value = "tie")]
    pub residual_mode: ResidualMode,
    #[arg(long)]
    pub pin_input: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ArchMismatch(_) => EXIT_ARCH_MISMATCH,
        _ => EXIT_FAILURE,
    }
}

fn finish(result: rebasin::Result<i32>, err: &mut impl Write) -> i32 {
    result.unwrap_or_else(|e| {
        let _ = writeln!(err, "error: {e}");
        exit_code(&e)
    })
}

fn graph_for(arch: &ArchSpec, args: &GraphArgs) -> rebasin::Result<CouplingGraph> {
    build_coupling_graph(arch, args.options())
}

fn read_assignment_for(path: &Path, graph: &CouplingGraph) -> rebasin::Result<PermutationAssignment> {
    let a = read_permutation_assignment(path)?;
    a.check_against(graph)?;
    Ok(a)
}

pub fn cmd_match(args: &MatchArgs, out: &mut impl Write, err: &mut impl Write) -> i32 {
    let mut run = || -> rebasin::Result<i32> {
        let a = read_checkpoint(&args.model_a)?;
        let b = read_checkpoint(&args.model_b)?;
        a.ensure_same_arch(&b)?;
        let graph = graph_for(a.arch(), &args.graph)?;
        let opts = MatchOptions {
            max_sweeps: args.max_sweeps as usize,
            seed: args.seed,
            p_norm: args.p_norm,
            include_w0_in_intra: args.include_w0_intra,
        };
        let result = weight_match(&a, &b, &graph, &opts)?;
        write_permutation_assignment(&result.assignment, &args.out)?;
        if let Some(trace) = &args.trace {
            write_text_atomic(trace, &result.trace_text())?;
        }
        let _ = writeln!(
            out,
            "sweeps {} objective {:.12e} converged {}",
            result.sweeps(),
            result.final_objective(),
            result.converged
        );
        Ok(if result.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
    };
    finish(run(), err)
}

pub fn cmd_apply(args: &ApplyArgs, err: &mut impl Write) -> i32 {
    let run = || -> rebasin::Result<i32> {
        let ws = read_checkpoint(&args.model)?;
        let graph = graph_for(ws.arch(), &args.graph)?;
        let a = read_assignment_for(&args.perm, &graph)?;
        write_checkpoint(&apply_assignment(&ws, &graph, &a)?, &args.out)?;
        Ok(EXIT_OK)
    };
    finish(run(), err)
}

pub fn cmd_task_vector(args: &TaskVectorArgs, err: &mut impl Write) -> i32 {
    let run = || -> rebasin::Result<i32> {
        let ft = read_checkpoint(&args.finetuned)?;
        let base = read_checkpoint(&args.base)?;
        write_task_vector(&compute_task_vector(&ft, &base)?, &args.out)?;
        Ok(EXIT_OK)
    };
    finish(run(), err)
}

pub fn cmd_transport(args: &TransportArgs, err: &mut impl Write) -> i32 {
    let run = || -> rebasin::Result<i32> {
        let scaling = match (&args.alpha_file, args.alpha) {
            (Some(path), _) => std::fs::read_to_string(path)
                .map_err(|e| Error::Io { path: path.clone(), source: e })?
                .parse()?,
            (None, Some(a)) => ScalingSpec::Scalar(a),
            (None, None) => ScalingSpec::default(),
        };
        let base = read_checkpoint(&args.base)?;
        let tau = read_task_vector(&args.task_vector)?;
        base.ensure_same_arch(tau.deltas())?;
        let graph = graph_for(base.arch(), &args.graph)?;
        let a = read_assignment_for(&args.perm, &graph)?;
        write_checkpoint(&transport(&base, &tau, &a, &graph, &scaling)?, &args.out)?;
        Ok(EXIT_OK)
    };
    finish(run(), err)
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut impl Write, err: &mut impl Write) -> i32 {
    let mut run = || -> rebasin::Result<i32> {
        let ws = read_checkpoint(&args.model)?;
        let graph = graph_for(ws.arch(), &args.graph)?;
        let a = read_assignment_for(&args.perm, &graph)?;
        let opts = EquivalenceOptions {
            n_samples: args.samples,
            seq_len: args.seq_len,
            tol: args.tol,
            seed: args.seed,
        };
        let report = verify_equivalence(&ws, &graph, &a, &opts)?;
        let verdict = if report.pass { "pass" } else { "FAIL" };
        let _ = writeln!(out, "max deviation {:.6e} (tol {:e}): {verdict}", report.max_dev, args.tol);
        Ok(if report.pass { EXIT_OK } else { EXIT_VERIFY_FAILED })
    };
    finish(run(), err)
}

pub fn cmd_lmc(args: &LmcArgs, err: &mut impl Write) -> i32 {
    let run = || -> rebasin::Result<i32> {
        let a = read_checkpoint(&args.model_a)?;
        let b = read_checkpoint(&args.model_b)?;
        let batch = read_eval_batch(&args.batch)?;
        let curve = lmc_curve(&a, &b, &batch, args.points)?;
        write_text_atomic(&args.out, &curve.to_csv())?;
        Ok(EXIT_OK)
    };
    finish(run(), err)
}

/// Quantities the demo measures, gathered before the report is rendered.
#[derive(Clone, Debug)]
pub struct DemoSummary {
    pub recovery: f64,
    pub converged: bool,
    pub trace: Vec<(usize, f64, usize)>,
    pub equivalence_dev: f64,
    pub matched_losses: Vec<f64>,
    pub naive_losses: Vec<f64>,
}

fn demo_report(args: &DemoArgs, arch: &ArchSpec, s: &DemoSummary) -> String {
    let mut r = String::new();
    let _ = writeln!(r, "seed {}", args.seed);
    let _ = writeln!(
        r,
        "arch blocks={} heads={} embed_dim={} mlp_hidden={} input_dim={} output_dim={} layernorm={}",
        arch.n_blocks, arch.n_heads, arch.embed_dim, arch.mlp_hidden, arch.input_dim, arch.output_dim, arch.has_layernorm
    );
    let _ = writeln!(r, "residual_mode {} pin_input {}", args.residual_mode, args.pin_input);
    let _ = writeln!(r, "noise {}", args.noise);
    let verdict = if s.recovery >= RECOVERY_THRESHOLD { "meets" } else { "BELOW" };
    let _ = writeln!(
        r,
        "recovery {:.6} ({verdict} threshold {RECOVERY_THRESHOLD})",
        s.recovery
    );
    let _ = writeln!(r, "converged {}", s.converged);
    let _ = writeln!(r, "trace");
    for (sweep, obj, changed) in &s.trace {
        let _ = writeln!(r, "  {sweep} {obj:.12e} {changed}");
    }
    let _ = writeln!(r, "equivalence max deviation {:.6e}", s.equivalence_dev);
    for (name, losses) in [("matched", &s.matched_losses), ("naive", &s.naive_losses)] {
        let n = losses.len();
        let ends = 0.5 * (losses[0] + losses[n - 1]);
        let mid = if n % 2 == 1 { losses[n / 2] } else { 0.5 * (losses[n / 2 - 1] + losses[n / 2]) };
        let _ = writeln!(
            r,
            "{name} endpoints {:.9} {:.9} midpoint {:.9} relative barrier {:+.6}",
            losses[0],
            losses[n - 1],
            mid,
            mid / ends - 1.0
        );
    }
    r
}

/// Runs the demo pipeline and returns its summary; artifacts land in
/// `args.out`.
pub fn run_demo(args: &DemoArgs) -> rebasin::Result<(DemoSummary, String)> {
    let arch = ArchSpec {
        n_blocks: args.n_blocks,
        n_heads: args.n_heads,
        embed_dim: args.embed_dim,
        mlp_hidden: args.mlp_hidden,
        input_dim: args.input_dim,
        output_dim: args.output_dim,
        has_layernorm: args.layernorm,
    };
    arch.validate()?;
    let graph = build_coupling_graph(
        &arch,
        GraphOptions {
            residual_mode: args.residual_mode,
            pin_input: args.pin_input,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let batch = EvalBatch::synthetic(args.samples, args.seq_len, arch.input_dim, arch.output_dim, args.seed);
    let model_a = train_toy(&init_random(&arch, args.seed)?, &batch, args.train_steps, args.lr)?;
    let (planted_b, planted) = plant(&model_a, &graph, &mut rng)?;
    let model_b = add_relative_noise(&planted_b, args.noise, &mut rng)?;

    let opts = MatchOptions {
        max_sweeps: args.max_sweeps as usize,
        seed: args.seed,
        ..Default::default()
    };
    let result = weight_match(&model_a, &model_b, &graph, &opts)?;
    let recovery = recovery_rate(&result.assignment, &planted, &graph)?;
    let equivalence = verify_equivalence(
        &model_a,
        &graph,
        &result.assignment,
        &EquivalenceOptions {
            seed: args.seed,
            ..Default::default()
        },
    )?;
    let matched_a = apply_assignment(&model_a, &graph, &result.assignment)?;
    let matched = lmc_curve(&matched_a, &model_b, &batch, args.points)?;
    let naive = lmc_curve(&model_a, &model_b, &batch, args.points)?;

    let dir = &args.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    write_checkpoint(&model_a, &dir.join("model_a"))?;
    write_checkpoint(&model_b, &dir.join("model_b"))?;
    write_eval_batch(&batch, &dir.join("batch"))?;
    write_permutation_assignment(&planted, &dir.join("planted.perm"))?;
    write_permutation_assignment(&result.assignment, &dir.join("matched.perm"))?;
    write_text_atomic(&dir.join("trace.txt"), &result.trace_text())?;
    write_text_atomic(&dir.join("lmc_matched.csv"), &matched.to_csv())?;
    write_text_atomic(&dir.join("lmc_naive.csv"), &naive.to_csv())?;

    let summary = DemoSummary {
        recovery,
        converged: result.converged,
        trace: result.trace.iter().map(|r| (r.sweep, r.objective, r.changed)).collect(),
        equivalence_dev: equivalence.max_dev,
        matched_losses: matched.losses,
        naive_losses: naive.losses,
    };
    let report = demo_report(args, &arch, &summary);
    write_text_atomic(&dir.join("report.txt"), &report)?;
    Ok((summary, report))
}

pub fn cmd_demo(args: &DemoArgs, out: &mut impl Write, err: &mut impl Write) -> i32 {
    let mut run = || -> rebasin::Result<i32> {
        let (_, report) = run_demo(args)?;
        let _ = out.write_all(report.as_bytes());
        Ok(EXIT_OK)
    };
    finish(run(), err)
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli, out: &mut impl Write, err: &mut impl Write) -> i32 {
    match &cli.command {
        Command::Match(a) => cmd_match(a, out, err),
        Command::Apply(a) => cmd_apply(a, err),
        Command::TaskVector(a) => cmd_task_vector(a, err),
        Command::Transport(a) => cmd_transport(a, err),
        Command::Verify(a) => cmd_verify(a, out, err),
        Command::Lmc(a) => cmd_lmc(a, err),
        Command::Demo(a) => cmd_demo(a, out, err),
    }
}
