use std::fmt;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Parser, Subcommand};

use catos_core::analytics::{self, SessionStats};
use catos_core::archive;
use catos_core::session::{self, RunConfig, SessionError};

#[derive(Debug, Parser)]
#[command(name = "catos", version, about = "Simulated operant-training rig")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulated session.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Move a finished session's outputs into the archive.
    Archive {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
    },
    /// Statistics for one archived session or a series of them.
    #[command(group(ArgGroup::new("target").required(true).args(["session", "series"])))]
    Analyze {
        /// Archived session directory.
        #[arg(long)]
        session: Option<PathBuf>,
        /// Comma-separated session ids, looked up under --archive.
        #[arg(long, value_delimiter = ',')]
        series: Option<Vec<String>>,
        #[arg(long, default_value = ".")]
        archive: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Serve the JSON API over an archive.
    Serve {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
    },
}

/// A failure worth one `error:` line.
#[derive(Debug)]
pub struct CliError(pub String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep it on one line
        let msg: Vec<&str> = self.0.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        f.write_str(&msg.join("; "))
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        Self(e.to_string())
    }
}

fn session_err(e: SessionError) -> CliError {
    match e {
        SessionError::Config(errs) => CliError(format!("invalid config: {}", errs.join("; "))),
        other => other.into(),
    }
}

/// Reads a run config, applying command line overrides before validation.
pub fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError(format!("{}: config must be a JSON object", path.display())))?;
    if let Some(s) = seed {
        obj.insert("seed".into(), s.into());
    }
    if let Some(o) = out {
        obj.insert("output_dir".into(), o.to_string_lossy().into_owned().into());
    }
    RunConfig::from_json(&value.to_string()).map_err(session_err)
}

fn print_stats(out: &mut dyn Write, s: &SessionStats) -> std::io::Result<()> {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}%", x * 100.0));
    let p = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
    writeln!(out, "session {}", s.session_id)?;
    writeln!(
        out,
        "  recorded {:.1} s of {:.1} s observed, duty cycle {:.1}%",
        s.recorded_s,
        s.observed_s,
        s.duty_cycle * 100.0
    )?;
    writeln!(
        out,
        "  trials {}, correct {}, accuracy {}, p = {}",
        s.n_trials,
        s.n_correct,
        pct(s.overall_accuracy),
        p(s.overall_p_value)
    )?;
    for b in &s.per_button {
        writeln!(
            out,
            "  button {}: {}/{} correct, accuracy {}, p = {}",
            b.button,
            b.n_correct,
            b.n,
            pct(b.accuracy),
            p(b.p_value)
        )?;
    }
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out: dir } => {
            let cfg = load_config(&config, seed, dir.as_deref())?;
            let output_dir = cfg
                .output_dir
                .clone()
                .ok_or_else(|| CliError("no output directory: pass --out or set output_dir".into()))?;
            let report = session::run_session(&cfg, &output_dir).map_err(session_err)?;
            let s = &report.summary;
            writeln!(
                out,
                "session {}: {} trials, {} correct, {} clips -> {}",
                report.session_id,
                s.trials,
                s.correct,
                report.clips.len(),
                output_dir.display()
            )?;
            if let Some(root) = &cfg.archive_root {
                let index = archive::archive_session(&output_dir, root, None)?;
                writeln!(out, "archived {}", root.join(&index.session_id).display())?;
            }
        }
        Command::Archive { from, to } => {
            let index = archive::archive_session(&from, &to, None)?;
            writeln!(
                out,
                "archived {} ({} clips, {} sounds, duty cycle {:.4})",
                to.join(&index.session_id).display(),
                index.clips.len(),
                index.sounds.len(),
                index.stats.duty_cycle
            )?;
        }
        Command::Analyze {
            session,
            series,
            archive,
            json,
        } => {
            if let Some(dir) = session {
                let stats = analytics::session_stats(&dir)?;
                if json {
                    writeln!(out, "{}", serde_json::to_string_pretty(&stats)?)?;
                } else {
                    print_stats(out, &stats)?;
                }
            } else {
                let ids = series.unwrap_or_default();
                if ids.iter().all(|s| s.trim().is_empty()) {
                    return Err(CliError("--series needs at least one session id".into()));
                }
                let ids: Vec<String> = ids.into_iter().map(|s| s.trim().to_string()).collect();
                let stats = analytics::performance_series(&archive, &ids)?;
                if json {
                    writeln!(out, "{}", serde_json::to_string_pretty(&stats)?)?;
                } else {
                    write!(out, "{}", analytics::series_csv(&stats))?;
                }
            }
        }
        Command::Serve { archive, port, host } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::api::serve(archive, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}
