//! Matrix-problem generation for the distribution-of-three rule.
//!
//! A problem is a 2x3 matrix given as a sequence: three cells of row one,
//! the first two cells of row two, and the hidden target cell. Both rows
//! contain the same set of three fillers (in any order). Multiple-choice
//! problems additionally carry four candidate answers.

mod enumerate;
mod io;
mod regime;
pub mod rng;

pub use enumerate::{enumerate_problems, problem_at, problem_count, unrank_triple};
pub use io::{read_dataset, write_dataset};
pub use regime::{attach_mc_options, build_regime, sample_distinct};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("need at least {need} fillers, got {got}")]
    TooFewFillers { need: usize, got: usize },
    #[error("MC option pool exhausted: no filler outside row one")]
    McPoolTooSmall,
    #[error("requested {requested} problems but the pool holds {available}")]
    PoolExhausted { requested: u64, available: u64 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct McOptions {
    pub options: [u16; 4],
    pub answer_pos: u8,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Problem {
    pub row1: [u16; 3],
    pub row2_given: [u16; 2],
    pub target: u16,
    pub mc: Option<McOptions>,
}

impl Problem {
    /// Check every structural invariant; returns a description of the first
    /// violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let [a, b, c] = self.row1;
        if a == b || a == c || b == c {
            return Err(format!("row1 entries not distinct: {:?}", self.row1));
        }
        let mut r1 = [a, b, c];
        r1.sort_unstable();
        let mut r2 = [self.row2_given[0], self.row2_given[1], self.target];
        r2.sort_unstable();
        if r1 != r2 {
            return Err(format!(
                "row sets differ: row1={:?} row2={:?}+{}",
                self.row1, self.row2_given, self.target
            ));
        }
        if let Some(mc) = &self.mc {
            for i in 0..4 {
                for j in i + 1..4 {
                    if mc.options[i] == mc.options[j] {
                        return Err(format!("duplicate MC option: {:?}", mc.options));
                    }
                }
            }
            for v in self.row1 {
                if !mc.options.contains(&v) {
                    return Err(format!(
                        "MC options {:?} missing row1 filler {v}",
                        mc.options
                    ));
                }
            }
            if mc.options.iter().filter(|v| !self.row1.contains(v)).count() != 1 {
                return Err("MC options must hold exactly one filler outside row1".into());
            }
            if mc.answer_pos > 3 {
                return Err(format!("answer_pos {} out of range", mc.answer_pos));
            }
            if mc.options[mc.answer_pos as usize] != self.target {
                return Err(format!(
                    "answer_pos {} does not point at target {}",
                    mc.answer_pos, self.target
                ));
            }
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TaskMode {
    Generative,
    Mc,
}

impl TaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::Generative => "generative",
            TaskMode::Mc => "mc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generative" => Ok(TaskMode::Generative),
            "mc" => Ok(TaskMode::Mc),
            other => Err(TaskError::InvalidRegime(format!("unknown mode {other:?}"))),
        }
    }

    /// Input sequence length a model receives in this mode.
    pub fn sequence_len(&self) -> usize {
        match self {
            TaskMode::Generative => 5,
            TaskMode::Mc => 9,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DataType {
    Onehot,
    Image,
}

impl DataType {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataType::Onehot => "onehot",
            DataType::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "onehot" => Ok(DataType::Onehot),
            "image" => Ok(DataType::Image),
            other => Err(TaskError::InvalidRegime(format!(
                "unknown data type {other:?}"
            ))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(TaskError::InvalidRegime(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct RegimeSpec {
    /// Total fillers.
    pub n: u16,
    /// Fillers withheld from training and used exclusively for testing.
    pub m: u16,
    pub mode: TaskMode,
    pub data_type: DataType,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl RegimeSpec {
    /// Fillers available to the training split.
    pub fn train_fillers(&self) -> Vec<u16> {
        if self.m == 0 {
            (0..self.n).collect()
        } else {
            (0..self.n - self.m).collect()
        }
    }

    /// Fillers reserved for the test split.
    pub fn test_fillers(&self) -> Vec<u16> {
        if self.m == 0 {
            (0..self.n).collect()
        } else {
            (self.n - self.m..self.n).collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(TaskError::InvalidRegime(msg));
        if self.n < 3 {
            return err(format!("N={} but at least 3 fillers are required", self.n));
        }
        if self.m > 0 {
            if self.n - self.m < 3 {
                return err(format!(
                    "N-M={} leaves too few training fillers",
                    self.n - self.m
                ));
            }
            if self.m < 3 {
                return err(format!("M={} leaves too few test fillers", self.m));
            }
        }
        if self.mode == TaskMode::Mc {
            if self.n - self.m < 4 {
                return err(format!(
                    "MC mode needs at least 4 training fillers, N-M={}",
                    self.n - self.m
                ));
            }
            if self.m > 0 && self.m < 4 {
                return err(format!("MC mode needs at least 4 test fillers, M={}", self.m));
            }
        }
        if self.train_count == 0 || self.test_count == 0 {
            return err("train and test counts must be positive".into());
        }
        let train_pool = problem_count(self.train_fillers().len());
        if self.m == 0 {
            if (self.train_count + self.test_count) as u64 > train_pool {
                return Err(TaskError::PoolExhausted {
                    requested: (self.train_count + self.test_count) as u64,
                    available: train_pool,
                });
            }
        } else if self.train_count as u64 > train_pool {
            return Err(TaskError::PoolExhausted {
                requested: self.train_count as u64,
                available: train_pool,
            });
        }
        Ok(())
    }

    /// Paper-scale example counts per withholding level (N = 100).
    pub fn preset_counts(m: u16) -> (usize, usize) {
        match m {
            95 => (360, 10_000),
            97 => (36, 10_000),
            _ => (10_000, 10_000),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: RegimeSpec,
    pub split: Split,
    pub problems: Vec<Problem>,
    /// True when the split's pool was smaller than the requested count and
    /// problems repeat (recorded in the file header).
    pub sampled_with_repetition: bool,
}

impl Dataset {
    pub fn fillers(&self) -> Vec<u16> {
        match self.split {
            Split::Train => self.spec.train_fillers(),
            Split::Test => self.spec.test_fillers(),
        }
    }
}
