use std::fmt;

use cocktail::checkpoint::CheckpointError;
use cocktail::eval::EvalError;
use cocktail::lab::LabError;
use cocktail::merge::MergeError;
use cocktail::solver::SolverError;

/// Exit 2: the request itself is invalid (flags, recipe, schema, shapes).
pub const EXIT_INVALID: u8 = 2;
/// Exit 1: reading or writing files failed, or a run failed.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn invalid(msg: impl fmt::Display) -> Self {
        Failure { code: EXIT_INVALID, error: anyhow::anyhow!("{msg}") }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_RUNTIME, error: error.into() }
    }

    pub fn code(&self) -> u8 {
        self.code
    }

    pub fn context(self, ctx: impl fmt::Display) -> Self {
        Failure { code: self.code, error: self.error.context(ctx.to_string()) }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Malformed or unreadable checkpoints count as read failures.
fn checkpoint_code(_: &CheckpointError) -> u8 {
    EXIT_RUNTIME
}

fn solver_code(e: &SolverError) -> u8 {
    match e {
        SolverError::Io { .. } => EXIT_RUNTIME,
        _ => EXIT_INVALID,
    }
}

fn merge_code(e: &MergeError) -> u8 {
    match e {
        MergeError::Checkpoint(c) => checkpoint_code(c),
        MergeError::Pool(_) => EXIT_RUNTIME,
        _ => EXIT_INVALID,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Checkpoint(c) => checkpoint_code(c),
        EvalError::Solver(s) => solver_code(s),
        EvalError::Candidate { source, .. } => eval_code(source),
        _ => EXIT_INVALID,
    }
}

fn lab_code(e: &LabError) -> u8 {
    match e {
        LabError::Config(_) => EXIT_INVALID,
        LabError::Solver(SolverError::Tau(_)) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

macro_rules! from_lib {
    ($($ty:ty => $code:expr),* $(,)?) => {
        $(impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure { code: $code(&e), error: e.into() }
            }
        })*
    };
}

from_lib! {
    CheckpointError => checkpoint_code,
    SolverError => solver_code,
    MergeError => merge_code,
    EvalError => eval_code,
    LabError => lab_code,
}
