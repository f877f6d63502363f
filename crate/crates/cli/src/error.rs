use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Io,
    Numeric,
    Format,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Io => 3,
            Category::Numeric => 4,
            Category::Format => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            category: Category::Config,
            message: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self {
            category: Category::Numeric,
            message: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.category {
            Category::Config => "config error",
            Category::Io => "io error",
            Category::Numeric => "numeric error",
            Category::Format => "format error",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

impl From<clutter4d::Error> for CliError {
    fn from(e: clutter4d::Error) -> Self {
        use clutter4d::Error as E;
        let category = match &e {
            E::Io(_) => Category::Io,
            E::Format { .. } => Category::Format,
            E::Numeric(_) => Category::Numeric,
            E::Shape(_) | E::InvalidArgument(_) => Category::Config,
        };
        Self {
            category,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        clutter4d::Error::Io(e).into()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
