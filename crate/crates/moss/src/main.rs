use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use moss_core::clock::Timing;
use moss_core::hostd::config::HostdConfig;
use moss_core::runners::parse_script;
use moss_core::sandbox::{converge_script, generate_sessions, Stack, StackOptions};

#[derive(Parser)]
#[command(name = "moss", version, about = "Source-level self-evolution for agent substrates")]
struct Cli {
    #[command(subcommand)]
    command: Top,
}

#[derive(Subcommand)]
enum Top {
    /// Evolution control (status, batches, batch, start, stop, restart, apply, flag, catch-up).
    #[command(disable_help_flag = true)]
    Evo {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Run the host daemon.
    Hostd {
        #[arg(long, env = "MOSS_HOSTD_CONFIG")]
        config: PathBuf,
    },
    /// Local simulated substrate.
    Sandbox {
        #[command(subcommand)]
        command: SandboxCmd,
    },
}

#[derive(Subcommand)]
enum SandboxCmd {
    /// Write a session fixture and its evaluator sidecar.
    Generate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start gateway, pipeline and host daemon in one process.
    Up {
        #[arg(long, default_value = "eight-weak-exchanges")]
        scenario: String,
        /// Runner script (JSON list of entries); defaults to a one-iteration convergence.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:18789")]
        bind: String,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("MOSS_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Top::Evo { args } => {
            let out = moss_core::cli::dispatch(&args, None);
            print!("{}", out.stdout);
            eprint!("{}", out.stderr);
            ExitCode::from(out.code as u8)
        }
        other => match run(other) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
    }
}

fn run(command: Top) -> anyhow::Result<()> {
    match command {
        Top::Evo { .. } => unreachable!("handled in main"),
        Top::Hostd { config } => {
            let cfg = HostdConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let daemon = cfg.assemble()?;
            daemon.recover()?;
            let _ = std::fs::remove_file(&cfg.socket);
            let handle = daemon.start(&cfg.socket, None)?;
            tracing::info!(socket = %cfg.socket.display(), "host daemon listening");
            handle.wait();
            Ok(())
        }
        Top::Sandbox { command: SandboxCmd::Generate { scenario, out } } => {
            let s = generate_sessions(&scenario, &out)?;
            println!("{} sessions written to {}", s.sessions.len(), out.display());
            println!("evaluator script: {}", s.evaluator_path.display());
            Ok(())
        }
        Top::Sandbox { command: SandboxCmd::Up { scenario, script, root, bind, time_scale } } => {
            let tasks: Vec<String> = moss_core::sandbox::CASE_STUDY_TASKS.iter().map(|(t, _)| t.to_string()).collect();
            let script = match script {
                Some(p) => parse_script(&std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => converge_script(&tasks),
            };
            if let Some(r) = &root {
                std::fs::create_dir_all(r)?;
            }
            let stack = Stack::start(StackOptions {
                scenario,
                script,
                timing: Timing::scaled(time_scale),
                root,
                gateway_bind: bind,
                ..StackOptions::default()
            })?;
            println!("MOSS_GATEWAY_URL={}", stack.gateway_url());
            println!("MOSS_HOSTD_SOCKET={}", stack.socket().display());
            stack.wait();
            Ok(())
        }
    }
}
