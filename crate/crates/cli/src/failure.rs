use std::fmt;
use std::path::Path;

/// Error category; also selects the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Io,
    Data,
    Model,
    Attack,
    Eval,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Data => 4,
            Kind::Model => 5,
            Kind::Attack => 6,
            Kind::Eval => 7,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Data => "data",
            Kind::Model => "model",
            Kind::Attack => "attack",
            Kind::Eval => "eval",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub module: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, module: &'static str, message: impl Into<String>) -> Self {
        Self { kind, module, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, "cli", message)
    }

    /// Adapter for `map_err` on fallible calls into a library module.
    pub fn of<E: fmt::Display>(kind: Kind, module: &'static str) -> impl FnOnce(E) -> Failure {
        move |e| Failure::new(kind, module, e.to_string())
    }

    pub fn io<'a>(module: &'static str, path: &'a Path) -> impl FnOnce(std::io::Error) -> Failure + 'a {
        move |e| Failure::new(Kind::Io, module, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error in {}: {}", self.kind.label(), self.module, self.message)
    }
}
