//! Command-line front end: codec utilities, key generation, and scenario
//! execution with attack verdicts.
//!
//! Exit codes: 0 on success, 1 on codec, protocol, or verdict failures,
//! 2 on bad flags or configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use multiloc::grammar::{self, ChunkGrammar, ProductionSequence};
use multiloc::scenario::{ConfigError, ScenarioConfig};
use multiloc::sim::{attack_verdict, schedule_and_run};
use multiloc::transform::{keygen_from_seed, TransformDomain};

const SEED_ENV: &str = "MULTILOC_SEED";

/// Scenarios shipped with the binary, runnable by name.
const EXAMPLES: &[(&str, &str)] = &[
    ("happy", include_str!("../../../scenarios/happy.scn")),
    ("replay", include_str!("../../../scenarios/replay.scn")),
    ("mitm", include_str!("../../../scenarios/mitm.scn")),
    ("eavesdrop", include_str!("../../../scenarios/eavesdrop.scn")),
    ("dos", include_str!("../../../scenarios/dos.scn")),
    ("three_stage", include_str!("../../../scenarios/three_stage.scn")),
];

#[derive(Parser)]
#[command(name = "multiloc", version, about = "Protocol laboratory for multi-located parties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a message into a production sequence.
    Encode {
        #[arg(long)]
        message: String,
        #[arg(long = "chunk-width")]
        chunk_width: u8,
        #[arg(long = "char-width", default_value_t = 7)]
        char_width: u8,
        /// Also print the digit concatenation (ambiguous for indices >= 10).
        #[arg(long = "legacy-concat")]
        legacy_concat: bool,
    },
    /// Replay a production sequence back into bits, and text when the
    /// sequence is a well-formed message.
    Decode {
        /// Comma-separated rule indices, or a path to a file holding them.
        #[arg(long)]
        sequence: String,
        #[arg(long = "chunk-width")]
        chunk_width: u8,
        #[arg(long = "char-width", default_value_t = 7)]
        char_width: u8,
    },
    /// Generate a commuting-transform key and print its key line.
    Keygen {
        #[arg(long)]
        modulus: u64,
        /// Falls back to MULTILOC_SEED when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one scenario file, a bundled example, or a whole suite directory.
    Run {
        /// Path to a .scn scenario file.
        scenario: Option<PathBuf>,
        /// Name of a bundled example scenario.
        #[arg(long, conflicts_with = "scenario")]
        example: Option<String>,
        /// Run every .scn file in a directory, in name order.
        #[arg(long, conflicts_with_all = ["scenario", "example"])]
        suite: Option<PathBuf>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }

    fn run(message: impl ToString) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e)
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Encode {
            message,
            chunk_width,
            char_width,
            legacy_concat,
        } => cmd_encode(&message, chunk_width, char_width, legacy_concat),
        Command::Decode {
            sequence,
            chunk_width,
            char_width,
        } => cmd_decode(&sequence, chunk_width, char_width),
        Command::Keygen { modulus, seed } => cmd_keygen(modulus, seed),
        Command::Run {
            scenario,
            example,
            suite,
            seed,
            out,
        } => cmd_run(scenario, example, suite, seed, out),
    }
}

fn chunk_grammar(chunk_width: u8) -> Result<ChunkGrammar, Failure> {
    ChunkGrammar::new(chunk_width).map_err(Failure::config)
}

fn cmd_encode(
    message: &str,
    chunk_width: u8,
    char_width: u8,
    legacy_concat: bool,
) -> Result<(), Failure> {
    let grammar = chunk_grammar(chunk_width)?;
    let bits = grammar::text_to_bits(message, char_width).map_err(|e| match e {
        grammar::CodecError::InvalidCharWidth(_) => Failure::config(e),
        other => Failure::run(other),
    })?;
    let sequence = grammar::encode(&bits, &grammar);
    if legacy_concat {
        eprintln!(
            "warning: concatenated rendering is ambiguous for rule indices >= 10 \
             and cannot be decoded"
        );
        println!("{}", grammar::render_concatenated(&sequence));
    } else {
        println!("{}", sequence);
    }
    Ok(())
}

fn cmd_decode(sequence: &str, chunk_width: u8, char_width: u8) -> Result<(), Failure> {
    let grammar_def = chunk_grammar(chunk_width)?;
    let text = if Path::new(sequence).is_file() {
        std::fs::read_to_string(sequence).map_err(Failure::config)?
    } else {
        sequence.to_string()
    };
    let sequence: ProductionSequence = text.trim().parse().map_err(Failure::config)?;
    let bits = grammar::sequence_to_bits(&sequence, &grammar_def).map_err(Failure::run)?;
    println!("bits: {}", bits);
    // Not every legal derivation is a padded character string; the bits line
    // already answers what the sequence derives.
    match grammar::decode(&sequence, &grammar_def, char_width) {
        Ok(recovered) => println!("text: {:?}", recovered),
        Err(grammar::CodecError::InvalidCharWidth(w)) => {
            return Err(Failure::config(grammar::CodecError::InvalidCharWidth(w)))
        }
        Err(grammar::CodecError::WidthMismatch { chunk_width, char_width }) => {
            return Err(Failure::config(grammar::CodecError::WidthMismatch {
                chunk_width,
                char_width,
            }))
        }
        Err(_) => {}
    }
    Ok(())
}

fn cmd_keygen(modulus: u64, seed: Option<u64>) -> Result<(), Failure> {
    let seed = seed.or_else(env_seed).ok_or(ConfigError::MissingSeed)?;
    let domain = TransformDomain::new(modulus).map_err(Failure::config)?;
    println!("{}", keygen_from_seed(domain, seed).to_key_line());
    Ok(())
}

fn cmd_run(
    scenario: Option<PathBuf>,
    example: Option<String>,
    suite: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut output = String::new();
    let all_ok = if let Some(dir) = suite {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Failure::config(format!("cannot read {}: {}", dir.display(), e)))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "scn"))
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Failure::config(format!(
                "no .scn files in {}",
                dir.display()
            )));
        }
        let mut ok = true;
        for path in entries {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Failure::config(format!("cannot read {}: {}", path.display(), e)))?;
            let label = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            writeln!(output, "== {} ==", label).unwrap();
            ok &= run_one(&text, &label, seed, &mut output)?;
            output.push('\n');
        }
        ok
    } else {
        let (text, label) = match (scenario, example) {
            (Some(path), None) => {
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    Failure::config(format!("cannot read {}: {}", path.display(), e))
                })?;
                (text, path.display().to_string())
            }
            (None, Some(name)) => {
                let text = EXAMPLES
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, text)| text.to_string())
                    .ok_or_else(|| {
                        let names: Vec<&str> = EXAMPLES.iter().map(|(n, _)| *n).collect();
                        Failure::config(format!(
                            "unknown example '{}'; bundled: {}",
                            name,
                            names.join(", ")
                        ))
                    })?;
                (text, format!("example:{}", name))
            }
            _ => return Err(Failure::config("pass a scenario file, --example, or --suite")),
        };
        run_one(&text, &label, seed, &mut output)?
    };

    match out {
        Some(path) => std::fs::write(&path, output)
            .map_err(|e| Failure::config(format!("cannot write {}: {}", path.display(), e)))?,
        None => print!("{}", output),
    }
    if all_ok {
        Ok(())
    } else {
        Err(Failure::run("scenario expectations or verdicts failed"))
    }
}

/// Runs one scenario and appends its report; returns whether expectation and
/// verdicts all held.
fn run_one(
    text: &str,
    label: &str,
    seed: Option<u64>,
    output: &mut String,
) -> Result<bool, Failure> {
    let cfg = ScenarioConfig::parse(text, seed, env_seed())?;
    let report = schedule_and_run(&cfg)?;
    writeln!(output, "# {}: seed {}", label, cfg.seed).unwrap();
    writeln!(output, "transcript:").unwrap();
    output.push_str(&report.transcript.render());
    writeln!(output, "sessions:").unwrap();
    for outcome in &report.outcomes {
        let session = outcome
            .session
            .map(|tag| tag.to_string())
            .unwrap_or_else(|| "-".to_string());
        let event = outcome
            .event
            .map(|seq| format!(" (event {})", seq))
            .unwrap_or_default();
        match &outcome.delivered {
            Some(text) => writeln!(
                output,
                "{}: {} delivered={:?}{}",
                session, outcome.status, text, event
            )
            .unwrap(),
            None => writeln!(output, "{}: {}{}", session, outcome.status, event).unwrap(),
        }
    }
    let mut ok = true;
    if !cfg.claims.is_empty() {
        writeln!(output, "verdicts:").unwrap();
        for claim in &cfg.claims {
            let verdict = attack_verdict(&report, &cfg, *claim);
            ok &= verdict.pass;
            writeln!(output, "{}", verdict).unwrap();
        }
    }
    match cfg.expect.check(&report) {
        Ok(()) => writeln!(output, "expectation: ok").unwrap(),
        Err(reason) => {
            ok = false;
            writeln!(output, "expectation: FAIL ({})", reason).unwrap();
        }
    }
    Ok(ok)
}
