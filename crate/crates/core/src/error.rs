use std::fmt;

use thiserror::Error;

/// One problem found while validating a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// All problems found in a configuration, not just the first one.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigError {
    pub issues: Vec<ConfigIssue>,
}

impl ConfigError {
    pub fn single(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            issues: vec![ConfigIssue {
                path: path.into(),
                message: message.into(),
            }],
        }
    }

    pub fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            path: path.into(),
            message: message.into(),
        });
    }

    pub fn into_result(self) -> Result<(), ConfigError> {
        if self.issues.is_empty() {
            Ok(())
        } else {
            Err(self)
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, issue) in self.issues.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Error)]
pub enum PdError {
    #[error("invalid configuration:\n{0}")]
    Config(#[from] ConfigError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("bond {i}->{j} collapsed to near-zero length")]
    BondCollapse { i: usize, j: usize },
    #[error("non-finite rate at point {point} (t = {t:e})")]
    NonFinite { point: usize, t: f64 },
    #[error("RK stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<PdError>,
    },
    #[error("step {step} failed (last good step {}): {source}", .step - 1)]
    Step {
        step: usize,
        #[source]
        source: Box<PdError>,
    },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl PdError {
    pub fn in_stage(self, stage: usize) -> Self {
        PdError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn in_step(self, step: usize) -> Self {
        PdError::Step {
            step,
            source: Box::new(self),
        }
    }

    pub fn is_instability(&self) -> bool {
        match self {
            PdError::BondCollapse { .. } | PdError::NonFinite { .. } => true,
            PdError::Stage { source, .. } | PdError::Step { source, .. } => source.is_instability(),
            _ => false,
        }
    }

    /// Process exit status: 2 configuration, 3 numerical instability, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PdError::Io(_) => 4,
            e if e.is_instability() => 3,
            PdError::Stage { source, .. } | PdError::Step { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T, E = PdError> = std::result::Result<T, E>;
