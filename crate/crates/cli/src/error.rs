use std::fmt;

use chmm::ChmmError;

/// Failure category; determines the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Bad arguments, configuration or model files (exit 1).
    Usage,
    /// Unreadable or inconsistent input data (exit 2).
    Data,
    /// Optimization or linear-algebra failure (exit 3).
    Numerical,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 1,
            Category::Data => 2,
            Category::Numerical => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Data => "data",
            Category::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { category: Category::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { category: Category::Data, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self { category: Category::Numerical, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.category.exit_code()
    }

    /// Single-line diagnostic: `chmm: error[<category>] exit=<code>: <message>`.
    pub fn diagnostic(&self) -> String {
        let flat: String = self
            .message
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!("chmm: error[{}] exit={}: {flat}", self.category.as_str(), self.exit_code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ChmmError> for CliError {
    fn from(e: ChmmError) -> Self {
        let category = if e.is_data_error() {
            Category::Data
        } else if e.is_numerical() {
            Category::Numerical
        } else {
            Category::Usage
        };
        Self { category, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}
