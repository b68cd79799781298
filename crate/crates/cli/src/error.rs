use factsurv_core::CoreError;
use factsurv_nn::NnError;
use thiserror::Error;

/// Failure classes, one exit code each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Bad flags or flag values (also what clap uses).
    Usage,
    /// An input file does not exist or cannot be read or written.
    Io,
    /// Input data violates its schema or file format.
    Schema,
    /// A config file is malformed or holds invalid values.
    Config,
    /// A checkpoint does not fit the data it is applied to.
    Mismatch,
    /// Training diverged or hit a numeric failure.
    Training,
    /// The data cannot support the requested statistic.
    Degenerate,
    Internal,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Usage,
        Category::Io,
        Category::Schema,
        Category::Config,
        Category::Mismatch,
        Category::Training,
        Category::Degenerate,
        Category::Internal,
    ];

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Io => 3,
            Category::Schema => 4,
            Category::Config => 5,
            Category::Mismatch => 6,
            Category::Training => 7,
            Category::Degenerate => 8,
            Category::Internal => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Io => "io",
            Category::Schema => "schema",
            Category::Config => "config",
            Category::Mismatch => "config-mismatch",
            Category::Training => "training",
            Category::Degenerate => "degenerate",
            Category::Internal => "internal",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            CliError::Usage(_) => Category::Usage,
            CliError::Io { .. } => Category::Io,
            CliError::Config(_) => Category::Config,
            CliError::Internal(_) => Category::Internal,
            CliError::Core(e) => core_category(e),
            CliError::Nn(e) => match e {
                NnError::Core(c) => core_category(c),
                NnError::Io(_) => Category::Io,
                NnError::InvalidArgument(_) => Category::Config,
                NnError::ConfigMismatch(_) | NnError::UnknownDriver(_) => Category::Mismatch,
                NnError::Format(_) => Category::Schema,
                NnError::TrainingFailure { .. } | NnError::Numeric(_) | NnError::Autodiff(_) => Category::Training,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }

    /// The single machine-parsable line printed on failure.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error[{}]: {msg}", self.category().name())
    }
}

fn core_category(e: &CoreError) -> Category {
    match e {
        CoreError::Io(_) => Category::Io,
        CoreError::Schema(_) | CoreError::Row { .. } | CoreError::Ordering(_) | CoreError::Format(_) => Category::Schema,
        CoreError::InvalidArgument(_) => Category::Config,
        CoreError::Diverged { .. } => Category::Training,
        CoreError::DegenerateTest(_) | CoreError::UndefinedMetric(_) | CoreError::DegenerateWeights { .. } => {
            Category::Degenerate
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_and_in_range() {
        let mut codes: Vec<i32> = Category::ALL.iter().map(|c| c.exit_code()).collect();
        codes.sort_unstable();
        assert_eq!(codes, (2..=9).collect::<Vec<_>>());
    }

    #[test]
    fn error_line_is_single_line() {
        let e = CliError::Config("bad\nvalue".into());
        assert_eq!(e.line(), "error[config]: bad value");
        let m = CliError::from(NnError::ConfigMismatch("x".into()));
        assert_eq!(m.exit_code(), 6);
    }
}
