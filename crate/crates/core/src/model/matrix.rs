//! Plain-text matrices: a `rows cols` header, then one whitespace-separated
//! row per line at full precision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let (r, c) = (m.rows(), m.cols());
    let mut s = format!("{r} {c}\n");
    for i in 0..r {
        let row = m.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            // `{:?}` prints the shortest string that round-trips exactly.
            write!(s, "{v:?}").expect("write to string");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty matrix file", path.display())))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Data(format!("bad matrix header {header:?}"))))
        .collect::<Result<_>>()?;
    let [r, c] = dims[..] else {
        return Err(Error::Data(format!("bad matrix header {header:?}")));
    };
    let mut data = Vec::with_capacity(r * c);
    for line in lines.take(r) {
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| Error::Data(format!("bad matrix value {tok:?}")))?);
        }
    }
    Tensor::new(vec![r, c], data).map_err(|_| Error::Data(format!("{}: expected {r}×{c} values", path.display())))
}
