use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use p3s::service::http::{port_from_env, serve, ServerConfig};
use p3s::service::{exit_code, run_command, Command, CommandContext, ErrorReport};

#[derive(Parser)]
#[command(name = "p3s", version, about = "Point-supervised subject selection and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Use the built-in CPU backbone regardless of the config.
    #[arg(long)]
    toy_backbone: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute the negative-subject mask for one annotated image.
    MaskPreview(Common),
    /// Fine-tune on annotated reference images.
    Train(Common),
    /// Sample images, optionally from a fine-tuned checkpoint.
    Generate(Common),
    /// Generate per-class image sets and score them.
    Evaluate(Common),
    /// Run the HTTP API.
    Serve {
        /// Defaults to P3S_PORT, then 8080.
        #[arg(long)]
        port: Option<u16>,
        /// Annotations, previews and job outputs are stored here.
        #[arg(long, default_value = "p3s-data")]
        data_dir: PathBuf,
        #[arg(long)]
        toy_backbone: bool,
    },
}

fn fail(e: &p3s::Error) -> ExitCode {
    let report = ErrorReport::from(e);
    eprintln!("error: {e}");
    println!("{}", serde_json_string(&report));
    ExitCode::from(exit_code(e) as u8)
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_else(|e| format!("{{\"error\": \"{e}\"}}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::MaskPreview(c) => (Command::MaskPreview, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Generate(c) => (Command::Generate, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
        Cmd::Serve { port, data_dir, toy_backbone } => {
            let port = match port.map(Ok).unwrap_or_else(port_from_env) {
                Ok(p) => p,
                Err(e) => return fail(&e),
            };
            let config = ServerConfig::new(data_dir, CommandContext::from_env(toy_backbone));
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(r) => r,
                Err(e) => return fail(&p3s::Error::State(format!("cannot start runtime: {e}"))),
            };
            return match runtime.block_on(serve(config, port)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e),
            };
        }
    };
    let ctx = CommandContext::from_env(common.toy_backbone);
    match run_command(command, &common.config, &ctx) {
        Ok(report) => {
            println!("{}", serde_json_string(&report));
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
