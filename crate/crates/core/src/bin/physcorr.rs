use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use physcorr::fixtures::{write_pipeline_fixture, PipelineFixtureSpec};
use physcorr::io::EmbeddingEncoding;
use physcorr::pipeline::{self, BetaSetting, CommandReport, Overrides, PipelineConfig};
use physcorr::Error;

/// Physics-aware video scoring and preference-data tooling.
#[derive(Debug, Parser)]
#[command(name = "physcorr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every video: subject consistency, mechanics verdicts, PhyScore.
    Score(Common),
    /// Fit subject statistics and the mixer weight on annotated samples.
    FitRm(Common),
    /// Pick one win/lose pair per prompt from the score table.
    SelectPairs(Common),
    /// Attach density-based weights to the preference pairs.
    Reweight(Common),
    /// Train the toy policy with and without weights and compare.
    TrainToy(Common),
    /// Summarise the artifacts in the output directory.
    Report(Common),
    /// Write a synthetic corpus and a config file into a directory.
    GenFixture(GenFixture),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// A number or `max`.
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_videos: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct GenFixture {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 108)]
    prompts: usize,
    #[arg(long, default_value_t = 4)]
    videos_per_prompt: usize,
    #[arg(long, default_value_t = 0)]
    degenerate: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Store embeddings as text instead of little-endian f32.
    #[arg(long)]
    text_embeddings: bool,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Parameter(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_INPUT,
    }
}

fn load(c: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    cfg.apply(&Overrides {
        jobs: c.jobs,
        seed: c.seed,
        alpha: c.alpha,
        beta: c.beta.as_deref().map(BetaSetting::parse).transpose()?,
        gamma: c.gamma,
        n_videos: c.n_videos,
        tau: c.tau,
    });
    Ok(cfg)
}

type Runner = fn(&PipelineConfig) -> Result<CommandReport, Error>;

fn run(cli: Cli) -> Result<CommandReport, Error> {
    let (cmd, c): (Runner, Common) = match cli.command {
        Command::Score(c) => (pipeline::cmd_score, c),
        Command::FitRm(c) => (pipeline::cmd_fit_rm, c),
        Command::SelectPairs(c) => (pipeline::cmd_select_pairs, c),
        Command::Reweight(c) => (pipeline::cmd_reweight, c),
        Command::TrainToy(c) => (pipeline::cmd_train_toy, c),
        Command::Report(c) => (pipeline::cmd_report, c),
        Command::GenFixture(g) => return gen_fixture(g),
    };
    let cfg = load(&c)?;
    log::info!("output directory {}", cfg.paths.output_dir.display());
    cmd(&cfg)
}

fn gen_fixture(g: GenFixture) -> Result<CommandReport, Error> {
    let spec = PipelineFixtureSpec {
        prompts: g.prompts,
        videos_per_prompt: g.videos_per_prompt,
        degenerate_prompts: g.degenerate,
        seed: g.seed,
        encoding: if g.text_embeddings {
            EmbeddingEncoding::Text
        } else {
            EmbeddingEncoding::Binary
        },
        ..PipelineFixtureSpec::default()
    };
    std::fs::create_dir_all(&g.out).map_err(|e| Error::Io {
        path: g.out.clone(),
        source: e,
    })?;
    let fx = write_pipeline_fixture(&g.out, &spec)?;
    let mut report = CommandReport::default();
    report.lines.push(format!(
        "wrote {} prompts x {} videos to {} ({} degenerate groups)",
        spec.prompts,
        spec.videos_per_prompt,
        g.out.display(),
        fx.degenerate.len()
    ));
    report.summary.insert("command".into(), "gen-fixture".into());
    report.summary.insert("degenerate".into(), fx.degenerate.len().into());
    Ok(report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PHYSCORR_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(report) => {
            print!("{}", report.render());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
