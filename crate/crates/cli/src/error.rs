use forcesolve::{
    FdError, GeometryError, MetricsError, OptimizerError, PhysicsError, ScenarioError, SyntheticError,
};
use serde_json::json;

/// A failure with a stable machine-readable code.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: String,
    pub message: String,
    usage: bool,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into(), usage: false }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: "usage".into(), message: message.into(), usage: true }
    }

    pub fn exit_code(&self) -> i32 {
        if self.usage {
            2
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "code": self.code, "message": self.message } }).to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.code(), e.to_string())
            }
        }
    )*};
}

coded!(ScenarioError, OptimizerError, GeometryError, MetricsError, PhysicsError, FdError, SyntheticError);
