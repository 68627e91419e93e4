//! Task plumbing: expression generation and scoring, SMILES validity, and
//! the external scorer hook.

mod expr;

pub use expr::{
    eval_expression, expression_score, gen_expressions, random_derivation, BinOp, ExprError,
    ExpressionAst, ScoreDataset, TRUE_FUNCTION,
};

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::Duration;

use thiserror::Error;
use wait_timeout::ChildExt;

use crate::grammar::{parse, Grammar};

pub const DEFAULT_SCORER_TIMEOUT: Duration = Duration::from_secs(30);

fn smiles_grammar() -> &'static Grammar {
    static G: OnceLock<Grammar> = OnceLock::new();
    G.get_or_init(Grammar::smiles)
}

/// Whether `s` is derivable from the bundled SMILES grammar.
pub fn smiles_valid(s: &str) -> bool {
    parse(s, smiles_grammar()).is_ok()
}

/// Why an external score is unavailable.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerFailure {
    #[error("scorer reported INVALID")]
    Invalid,
    #[error("scorer exited with {0}")]
    Exit(String),
    #[error("scorer timed out after {0:?}")]
    Timeout(Duration),
    #[error("could not run scorer: {0}")]
    Spawn(String),
    #[error("unparseable scorer output `{0}`")]
    Output(String),
}

/// Runs `command` through `sh -c`, writes `s` and a newline to its standard
/// input, and reads one real number (or `INVALID`) from its standard output.
pub fn external_score(s: &str, command: &str, timeout: Duration) -> Result<f64, ScorerFailure> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| ScorerFailure::Spawn(e.to_string()))?;
    let mut stdout = child.stdout.take().expect("stdout is piped");
    let reader = std::thread::spawn(move || {
        let mut out = String::new();
        stdout.read_to_string(&mut out).map(|_| out)
    });
    if let Some(mut stdin) = child.stdin.take() {
        // A scorer that ignores its input may close the pipe early.
        let _ = stdin
            .write_all(s.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"));
    }
    let status = match child.wait_timeout(timeout) {
        Ok(Some(status)) => status,
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ScorerFailure::Timeout(timeout));
        }
        Err(e) => return Err(ScorerFailure::Spawn(e.to_string())),
    };
    let out = reader
        .join()
        .map_err(|_| ScorerFailure::Output("reader panicked".into()))?
        .map_err(|e| ScorerFailure::Output(e.to_string()))?;
    if !status.success() {
        return Err(ScorerFailure::Exit(status.to_string()));
    }
    let token = out.split_whitespace().next().unwrap_or("");
    if token == "INVALID" {
        return Err(ScorerFailure::Invalid);
    }
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(ScorerFailure::Output(out.trim().to_string())),
    }
}
