mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "rwass", version, about = "Region-aware Wasserstein distances between scalar fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
enum Command {
    /// Write a field made of random Gaussian hills.
    Synth {
        /// Grid dims such as `64x64` or `32x32x32`.
        dims: String,
        /// Number of hills.
        hills: usize,
        /// Optional uniform noise amplitude.
        noise: Option<f64>,
    },
    /// Simplified split-tree diagram and segmentation of a field.
    Diagram { input: PathBuf },
    /// Distance between two fields (.rsf, .csv or .rwc).
    Dist { a: PathBuf, b: PathBuf },
    /// Pairwise distance matrix of an ensemble.
    Matrix {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Classical MDS embedding of a distance matrix CSV.
    Embed { matrix: PathBuf },
    /// Feature tracks over a time-ordered sequence.
    Track {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Persistence curves of tracked features, as CSV plus an SVG chart.
    Curves {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// NMI and ARI between two label files, one label per line.
    Scores { a: PathBuf, b: PathBuf },
    /// Compress a field to a fraction `--tau` of its size.
    Compress { input: PathBuf },
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Classic,
    Lifting,
    Volume,
    Region,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum RepArg {
    Diagram,
    Mergetree,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum BackgroundArg {
    Null,
    Data,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum CodecArg {
    Quantizer,
    Bspline,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Opts {
    #[arg(long, global = true, value_enum, default_value_t = MethodArg::Region)]
    method: MethodArg,
    #[arg(long, global = true, value_enum, default_value_t = RepArg::Mergetree)]
    rep: RepArg,
    #[arg(long, global = true, default_value_t = 2.0)]
    q: f64,
    #[arg(long, global = true, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, global = true, default_value_t = 0.05)]
    eps1: f64,
    /// Persistence threshold as a fraction of the data range.
    #[arg(long, global = true, default_value_t = 0.005)]
    simplify: f64,
    #[arg(long, global = true, value_enum, default_value_t = BackgroundArg::Null)]
    background: BackgroundArg,
    #[arg(long = "wl", global = true, default_value_t = 0.5)]
    w_l: f64,
    #[arg(long = "wv", global = true, default_value_t = 0.2)]
    w_v: f64,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = CodecArg::Quantizer)]
    codec: CodecArg,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, env = "RWASS_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write the optimal matching of `dist` as JSON.
    #[arg(long, global = true)]
    matching: Option<PathBuf>,
    #[arg(long, global = true)]
    topk: Option<usize>,
}

/// An error in the command line or its input files, as opposed to one raised by the library.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn exit_code(e: &anyhow::Error) -> u8 {
    use rwass::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Io { .. } | E::Format { .. } | E::Shape(_) | E::NonFinite(_) | E::InvalidParameter(_) => 2,
                E::Csv(_) | E::Json(_) => 2,
                E::Mismatch(_) | E::VertexOutOfRange(..) => 3,
                E::Inconsistent(_) => 4,
            };
        }
        if cause.is::<InputError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    4
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.opts.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("rwass: cannot start {n} threads: {e}");
            return ExitCode::from(4);
        }
    }
    match commands::run(&cli.command, &cli.opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rwass: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
