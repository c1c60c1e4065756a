//! Dataset files: UTF-8 text, one record per line.
//!
//! Line 1: `#rpm v1 N=<N> M=<M> mode=<mode> split=<split> seed=<seed>`
//! Line 2: `#meta data_type=<dt> train_count=<n> test_count=<n> sampling=<s>`
//! Records: `row1_a row1_b row1_c row2_a row2_b target [opt0 opt1 opt2 opt3 answer_pos]`
//!
//! Any further `#` lines are comments. The `#meta` line carries fields the
//! primary header does not (it lets a read round-trip reconstruct the full
//! regime); readers that only understand the primary header can skip it.

use crate::{DataType, Dataset, McOptions, Problem, RegimeSpec, Result, Split, TaskError, TaskMode};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "#rpm v1 N={} M={} mode={} split={} seed={}",
        d.spec.n,
        d.spec.m,
        d.spec.mode.as_str(),
        d.split.as_str(),
        d.spec.seed
    )?;
    writeln!(
        f,
        "#meta data_type={} train_count={} test_count={} sampling={}",
        d.spec.data_type.as_str(),
        d.spec.train_count,
        d.spec.test_count,
        if d.sampled_with_repetition {
            "with-repetition"
        } else {
            "distinct"
        }
    )?;
    for p in &d.problems {
        write!(
            f,
            "{} {} {} {} {} {}",
            p.row1[0], p.row1[1], p.row1[2], p.row2_given[0], p.row2_given[1], p.target
        )?;
        if let Some(mc) = &p.mc {
            write!(
                f,
                " {} {} {} {} {}",
                mc.options[0], mc.options[1], mc.options[2], mc.options[3], mc.answer_pos
            )?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

fn header_field<'a>(tokens: &'a [&str], key: &str, line: usize) -> Result<&'a str> {
    tokens
        .iter()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| TaskError::Parse {
            line,
            msg: format!("missing header field {key}"),
        })
}

fn parse_num<N: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<N> {
    s.parse().map_err(|_| TaskError::Parse {
        line,
        msg: format!("bad {what}: {s:?}"),
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines().enumerate();

    let (_, first) = lines.next().ok_or(TaskError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let first = first?;
    let tokens: Vec<&str> = first.split_whitespace().collect();
    if tokens.len() < 2 || tokens[0] != "#rpm" || tokens[1] != "v1" {
        return Err(TaskError::Parse {
            line: 1,
            msg: format!("bad magic, expected '#rpm v1': {first:?}"),
        });
    }
    let n: u16 = parse_num(header_field(&tokens, "N", 1)?, 1, "N")?;
    let m: u16 = parse_num(header_field(&tokens, "M", 1)?, 1, "M")?;
    let mode = TaskMode::parse(header_field(&tokens, "mode", 1)?)?;
    let split = Split::parse(header_field(&tokens, "split", 1)?)?;
    let seed: u64 = parse_num(header_field(&tokens, "seed", 1)?, 1, "seed")?;

    let mut data_type = DataType::Onehot;
    let mut train_count = 0usize;
    let mut test_count = 0usize;
    let mut repetition = false;
    let mut meta_seen = false;

    let mut problems = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if !meta_seen && rest.starts_with("meta") {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if let Ok(dt) = header_field(&toks, "data_type", lineno) {
                    data_type = DataType::parse(dt)?;
                }
                if let Ok(tc) = header_field(&toks, "train_count", lineno) {
                    train_count = parse_num(tc, lineno, "train_count")?;
                }
                if let Ok(tc) = header_field(&toks, "test_count", lineno) {
                    test_count = parse_num(tc, lineno, "test_count")?;
                }
                if let Ok(s) = header_field(&toks, "sampling", lineno) {
                    repetition = s == "with-repetition";
                }
                meta_seen = true;
            }
            continue;
        }
        let nums: Vec<&str> = trimmed.split_whitespace().collect();
        if nums.len() != 6 && nums.len() != 11 {
            return Err(TaskError::Parse {
                line: lineno,
                msg: format!("expected 6 or 11 fields, got {}", nums.len()),
            });
        }
        let v: Vec<u16> = nums
            .iter()
            .map(|s| parse_num::<u16>(s, lineno, "filler index"))
            .collect::<Result<_>>()?;
        let mc = if v.len() == 11 {
            if v[10] > 3 {
                return Err(TaskError::Parse {
                    line: lineno,
                    msg: format!("answer_pos {} out of range", v[10]),
                });
            }
            Some(McOptions {
                options: [v[6], v[7], v[8], v[9]],
                answer_pos: v[10] as u8,
            })
        } else {
            None
        };
        let p = Problem {
            row1: [v[0], v[1], v[2]],
            row2_given: [v[3], v[4]],
            target: v[5],
            mc,
        };
        if let Err(msg) = p.validate() {
            return Err(TaskError::Parse { line: lineno, msg });
        }
        if (mode == TaskMode::Mc) != p.mc.is_some() {
            return Err(TaskError::Parse {
                line: lineno,
                msg: "record MC fields disagree with header mode".into(),
            });
        }
        problems.push(p);
    }
    if problems.is_empty() {
        return Err(TaskError::Parse {
            line: 2,
            msg: "dataset holds no records".into(),
        });
    }
    if !meta_seen {
        match split {
            Split::Train => train_count = problems.len(),
            Split::Test => test_count = problems.len(),
        }
    }
    let expected = match split {
        Split::Train => train_count,
        Split::Test => test_count,
    };
    if expected != 0 && expected != problems.len() {
        return Err(TaskError::Parse {
            line: 2,
            msg: format!(
                "header promises {expected} records for this split, found {}",
                problems.len()
            ),
        });
    }
    Ok(Dataset {
        spec: RegimeSpec {
            n,
            m,
            mode,
            data_type,
            train_count,
            test_count,
            seed,
        },
        split,
        problems,
        sampled_with_repetition: repetition,
    })
}
