//! Versioned text checkpoints: a `cgdp-checkpoint v1 <kind>` header followed
//! by named real-valued blocks `name rows cols` and their rows. Values are
//! printed in shortest round-trip form, so reading back is bit-exact.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "cgdp-checkpoint";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    blocks: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            blocks: Vec::new(),
        }
    }

    pub fn push_matrix(&mut self, name: &str, m: &Matrix) {
        self.blocks.push((name.to_string(), m.clone()));
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) {
        self.blocks
            .push((name.to_string(), Matrix::from_row_slice(1, v.len(), v)));
    }

    pub fn push_scalar(&mut self, name: &str, x: f64) {
        self.push_vector(name, &[x]);
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint block `{name}` missing")))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.matrix(name)?.transpose().iter().copied().collect())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let v = self.vector(name)?;
        match v[..] {
            [x] => Ok(x),
            _ => Err(Error::InvalidArgument(format!(
                "checkpoint block `{name}` is not a scalar"
            ))),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.blocks.iter().any(|(n, _)| n == name)
    }

    /// Expects the given kind, for loaders of a specific artifact.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION} {}\n", self.kind);
        for (name, m) in &self.blocks {
            writeln!(out, "{name} {} {}", m.nrows(), m.ncols()).unwrap();
            for row in m.row_iter() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                writeln!(out, "{}", cells.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, message: &str| Error::Parse {
            line,
            message: message.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty checkpoint"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(err(1, "not a checkpoint"));
        }
        if parts[1] != VERSION {
            return Err(err(1, &format!("unsupported checkpoint version {}", parts[1])));
        }
        let mut ck = Checkpoint::new(parts[2]);
        while let Some((ln, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let head: Vec<&str> = line.split_whitespace().collect();
            let [name, rows, cols] = head[..] else {
                return Err(err(ln, "block header must be `name rows cols`"));
            };
            let rows: usize = rows.parse().map_err(|_| err(ln, "bad row count"))?;
            let cols: usize = cols.parse().map_err(|_| err(ln, "bad column count"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| err(ln, "truncated block"))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(ln, "bad number"))?;
                if vals.len() != cols {
                    return Err(err(ln, "row length does not match block header"));
                }
                data.extend(vals);
            }
            ck.blocks
                .push((name.to_string(), Matrix::from_row_slice(rows, cols, &data)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
