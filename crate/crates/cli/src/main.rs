//! Command-line front end: train, translate, extract, probe, report, study
//! and gen-synthetic.

mod commands;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use nmtprobe::model::Preset;
use nmtprobe::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "nmtprobe", version, about = "Train translation models and probe their representations")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Seed for every random stream of the run [default: 1].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hyperparameter preset [default: desk].
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    /// Root directory for study outputs and generated corpora.
    #[arg(long, global = true, env = "NMTPROBE_OUT")]
    pub out_root: Option<PathBuf>,
    /// Log level: error, warn, info, debug or trace [default: info].
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    /// Precision for inference: `check64` decodes and extracts in 64-bit.
    #[arg(long, global = true, value_enum)]
    pub numeric: Option<Numeric>,
    /// TOML file with defaults for the global options; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Numeric {
    #[default]
    Train32,
    Check64,
}

/// Global options after merging the config file under the flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: Option<u64>,
    pub preset: Option<PresetArg>,
    pub out_root: Option<PathBuf>,
    pub log_level: Option<String>,
    pub numeric: Option<Numeric>,
}

impl GlobalConfig {
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let file = match &args.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => GlobalConfig::default(),
        };
        Ok(GlobalConfig {
            seed: args.seed.or(file.seed),
            preset: args.preset.or(file.preset),
            out_root: args.out_root.clone().or(file.out_root),
            log_level: args.log_level.clone().or(file.log_level),
            numeric: args.numeric.or(file.numeric),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn preset(&self) -> Preset {
        self.preset.map_or(Preset::Desk, Into::into)
    }

    pub fn out_root(&self) -> PathBuf {
        self.out_root.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn numeric(&self) -> Numeric {
        self.numeric.unwrap_or_default()
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a translation model.
    Train(commands::TrainArgs),
    /// Greedy-decode sentences with a trained model.
    Translate(commands::TranslateArgs),
    /// Write per-token representations of tagged sentences to a feature file.
    Extract(commands::ExtractArgs),
    /// Train a classifier on a feature file.
    Probe(commands::ProbeArgs),
    /// Evaluate a classifier and write its report.
    Report(commands::ReportArgs),
    /// Run or list declarative studies.
    #[command(subcommand)]
    Study(commands::StudyCommand),
    /// Generate a synthetic language corpus.
    GenSynthetic(commands::GenSyntheticArgs),
}

fn init_logging(level: Option<&str>) -> Result<()> {
    let level = level.unwrap_or("info");
    let filter: log::LevelFilter = level
        .parse()
        .map_err(|_| Error::Config(format!("unknown log level {level:?}")))?;
    env_logger::Builder::new()
        .filter_level(filter)
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .try_init()
        .map_err(|e| Error::State(e.to_string()))
}

/// Writes the exact configuration of this invocation beside its outputs.
pub fn write_run_echo(path: &Path, global: &GlobalConfig, command: serde_json::Value) -> Result<()> {
    let echo = serde_json::json!({
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": nmtprobe::VERSION,
        "seed": global.seed(),
        "preset": global.preset().name(),
        "numeric": global.numeric(),
        "command": command,
    });
    let body = serde_json::to_string_pretty(&echo).expect("plain data") + "\n";
    nmtprobe::corpus::write_file(path, body.as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let global = GlobalConfig::resolve(&cli.global)?;
    init_logging(global.log_level.as_deref())?;
    match cli.command {
        Command::Train(a) => commands::train(&global, a),
        Command::Translate(a) => commands::translate(&global, a),
        Command::Extract(a) => commands::extract(&global, a),
        Command::Probe(a) => commands::probe(&global, a),
        Command::Report(a) => commands::report(&global, a),
        Command::Study(c) => commands::study(&global, c),
        Command::GenSynthetic(a) => commands::gen_synthetic(&global, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.category(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_config_file() {
        let dir = std::env::temp_dir().join(format!("nmtprobe-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.toml");
        std::fs::write(&path, "seed = 4\npreset = \"paper\"\nnumeric = \"check64\"\n").unwrap();
        let cli = Cli::try_parse_from(["nmtprobe", "--config", path.to_str().unwrap(), "--seed", "8", "study", "list"]).unwrap();
        let g = GlobalConfig::resolve(&cli.global).unwrap();
        assert_eq!((g.seed(), g.preset(), g.numeric()), (8, Preset::Paper, Numeric::Check64));
        std::fs::write(&path, "seeds = 4\n").unwrap();
        assert_eq!(GlobalConfig::resolve(&cli.global).unwrap_err().category(), "config");
        std::fs::remove_dir_all(&dir).unwrap();

        let g = GlobalConfig::resolve(&GlobalArgs::default()).unwrap();
        assert_eq!((g.seed(), g.preset(), g.numeric()), (1, Preset::Desk, Numeric::Train32));
    }
}
