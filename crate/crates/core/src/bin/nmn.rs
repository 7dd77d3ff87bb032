use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nmn::config::Config;
use nmn::gradcheck::{self, CheckOptions, Suite};
use nmn::harness;
use nmn::Error;

/// Noisy multi-label training experiments.
#[derive(Parser)]
#[command(name = "nmn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for inputs and outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test splits and a noise report.
    Generate(Common),
    /// Train the configured variants on the generated splits.
    Train(Common),
    /// Score trained checkpoints on the test split.
    Evaluate(Common),
    /// Finite-difference and closed-form gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Configurations per suite.
        #[arg(long, default_value_t = 1000)]
        configs: usize,
        /// Negative control: corrupt one suite's analytic gradient.
        #[arg(long, value_name = "SUITE")]
        corrupt: Option<String>,
    },
    /// EM versus end-to-end training on a small instance.
    EmCompare(Common),
}

fn load(common: &Common) -> nmn::Result<Config> {
    let cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn gradcheck(common: &Common, configs: usize, corrupt: Option<&str>) -> nmn::Result<bool> {
    let cfg = load(common)?;
    let corrupt = match corrupt {
        None => None,
        Some(name) => Some(
            Suite::ALL
                .into_iter()
                .find(|s| s.name() == name)
                .ok_or_else(|| Error::Config(format!("unknown suite `{name}`")))?,
        ),
    };
    let opts = CheckOptions {
        configs,
        seed: cfg.seed,
        corrupt,
        ..CheckOptions::default()
    };
    let mut ok = true;
    for r in gradcheck::run(&opts)? {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{verdict:<4} {:<20} configs {:>5}  max rel err {:.3e} (config {})",
            r.suite.name(),
            r.configs,
            r.max_rel_error,
            r.worst_config
        );
    }
    let eq = gradcheck::equivalence(configs, cfg.seed)?;
    let eq_ok = eq.max_abs_deviation <= 1e-12;
    ok &= eq_ok;
    println!(
        "{:<4} {:<20} configs {:>5}  max abs dev {:.3e}",
        if eq_ok { "ok" } else { "FAIL" },
        "em-equivalence",
        eq.configs,
        eq.max_abs_deviation
    );
    let norm = gradcheck::normalization(configs, cfg.seed)?;
    let norm_ok = norm <= 1e-12;
    ok &= norm_ok;
    println!(
        "{:<4} {:<20} configs {:>5}  max abs err {:.3e}",
        if norm_ok { "ok" } else { "FAIL" },
        "normalization",
        configs,
        norm
    );
    Ok(ok)
}

fn run(cli: Cli) -> nmn::Result<bool> {
    match cli.command {
        Command::Generate(c) => list(&harness::cmd_generate(&load(&c)?, &c.out)?),
        Command::Train(c) => list(&harness::cmd_train(&load(&c)?, &c.out)?),
        Command::Evaluate(c) => list(&harness::cmd_evaluate(&load(&c)?, &c.out)?),
        Command::Gradcheck { common, configs, corrupt } => return gradcheck(&common, configs, corrupt.as_deref()),
        Command::EmCompare(c) => {
            let (cmp, paths) = harness::cmd_em_compare(&load(&c)?, &c.out)?;
            print!("{}", std::fs::read_to_string(paths.last().map(Path::new).expect("report written"))?);
            list(&paths);
            return Ok(cmp.max_gradient_deviation <= 1e-12);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("NMN_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                // Only fails if a pool already exists, which cannot happen here.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: NMN_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Divergence(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
