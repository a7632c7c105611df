//! Pipeline stages behind the `tractgraph` command.

pub mod config;
pub mod pipeline;

use tractgraph_core::{Error, ErrorKind};

/// Process exit status for a failure of the given kind. Usage errors from
/// argument parsing exit with 2.
pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 3,
        ErrorKind::Parse => 4,
        ErrorKind::NumericFault => 5,
        ErrorKind::DegenerateInput => 6,
        ErrorKind::InvalidInput => 7,
        ErrorKind::Io => 8,
    }
}

pub fn category(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Parse => "parse",
        ErrorKind::NumericFault => "numeric-fault",
        ErrorKind::DegenerateInput => "degenerate-input",
        ErrorKind::InvalidInput => "invalid-input",
        ErrorKind::Io => "io",
    }
}

/// `error[<category>]: <message>`.
pub fn describe(err: &Error) -> String {
    format!("error[{}]: {err}", category(err.kind()))
}
