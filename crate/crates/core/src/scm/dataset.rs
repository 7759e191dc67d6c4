//! Plain-text dataset format: a `n d count` header, then one transition per
//! line as `s.. a.. r s_next.. done`. Floats use Rust's shortest round-trip
//! formatting, so a write/read cycle is bit-exact.

use super::Transition;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize, transitions: Vec<Transition>) -> Result<Self> {
        for t in &transitions {
            crate::error::check_dim("transition state", state_dim, t.s.len())?;
            crate::error::check_dim("transition action", action_dim, t.a.len())?;
            crate::error::check_dim("transition next state", state_dim, t.s_next.len())?;
        }
        Ok(Self {
            state_dim,
            action_dim,
            transitions,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.state_dim, self.action_dim, self.transitions.len());
        for t in &self.transitions {
            let mut first = true;
            let fields = t.s.iter().chain(&t.a).chain(std::iter::once(&t.r)).chain(&t.s_next);
            for x in fields {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{x:?}").unwrap();
            }
            out.push_str(if t.done { " 1\n" } else { " 0\n" });
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|x| x.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?;
        let [n, d, count] = head[..] else {
            return Err(Error::Parse {
                line: 1,
                message: "header must be `n d count`".into(),
            });
        };
        let width = 2 * n + d + 2;
        let mut transitions = Vec::with_capacity(count);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: idx + 1, message };
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(e.to_string()))?;
            if vals.len() != width {
                return Err(parse_err(format!("expected {width} fields, got {}", vals.len())));
            }
            if !vals.iter().all(|x| x.is_finite()) {
                return Err(parse_err("non-finite value".into()));
            }
            let done = match vals[width - 1] {
                0.0 => false,
                1.0 => true,
                _ => return Err(parse_err("done flag must be 0 or 1".into())),
            };
            transitions.push(Transition {
                s: vals[..n].to_vec(),
                a: vals[n..n + d].to_vec(),
                r: vals[n + d],
                s_next: vals[n + d + 1..2 * n + d + 1].to_vec(),
                done,
            });
        }
        if transitions.len() != count {
            return Err(Error::Parse {
                line: 1,
                message: format!("header promises {count} transitions, found {}", transitions.len()),
            });
        }
        Ok(Self {
            state_dim: n,
            action_dim: d,
            transitions,
        })
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    std::fs::write(path, data.to_text())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use crate::scm::{generate_dataset, GroundTruthScm};

    #[test]
    fn text_round_trip_is_bit_exact() {
        let scm = GroundTruthScm::random_sparse(3, 2, 1, &mut seeded_rng(5)).unwrap();
        let t = generate_dataset(&scm, 2, 7, 0.4, &mut seeded_rng(6)).unwrap();
        let data = Dataset::new(3, 2, t).unwrap();
        let text = data.to_text();
        let back = Dataset::from_text(&text).unwrap();
        assert_eq!(back, data);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn empty_dataset_has_header() {
        let data = Dataset::new(2, 1, vec![]).unwrap();
        assert_eq!(data.to_text(), "2 1 0\n");
        assert_eq!(Dataset::from_text("2 1 0\n").unwrap(), data);
    }

    #[test]
    fn rejects_short_lines_and_bad_counts() {
        assert!(matches!(
            Dataset::from_text("1 1 1\n0 0 0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(Dataset::from_text("1 1 2\n0 0 0 0 1\n").is_err());
        assert!(Dataset::from_text("1 1\n").is_err());
    }
}
