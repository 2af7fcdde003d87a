//! Plain-text checkpoints. Weights are written with Rust's shortest
//! round-trip float formatting, so reading a checkpoint back reproduces the
//! model bit for bit.

use std::io::{BufRead, Write};

use ndarray::Array2;

use super::{DktConfig, DktModel, NeuralError, ParamSet, SaktConfig, SaktModel};

const MAGIC: &str = "kt-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Dkt(DktModel),
    Sakt(SaktModel),
}

fn io_err(e: impl std::fmt::Display) -> NeuralError {
    NeuralError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> Result<(), NeuralError> {
    let (kind, config, n_skills, params) = match ckpt {
        Checkpoint::Dkt(m) => ("dkt", serde_json::to_string(&m.config), m.n_skills, &m.params),
        Checkpoint::Sakt(m) => ("sakt", serde_json::to_string(&m.config), m.n_skills, &m.params),
    };
    let config = config.map_err(io_err)?;
    writeln!(out, "{MAGIC}").map_err(io_err)?;
    writeln!(out, "kind {kind}").map_err(io_err)?;
    writeln!(out, "config {config}").map_err(io_err)?;
    writeln!(out, "n_skills {n_skills}").map_err(io_err)?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols()).map_err(io_err)?;
        for row in t.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(" ")).map_err(io_err)?;
        }
    }
    Ok(())
}

fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str, NeuralError> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|l| l.strip_prefix(' '))
        .ok_or_else(|| NeuralError::Checkpoint(format!("expected `{key}` line")))
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint, NeuralError> {
    let lines: Vec<String> = input.lines().collect::<Result<_, _>>().map_err(io_err)?;
    let mut it = lines.iter().map(String::as_str);
    if it.next() != Some(MAGIC) {
        return Err(NeuralError::Checkpoint("missing header".into()));
    }
    let kind = field(it.next(), "kind")?.to_string();
    let config = field(it.next(), "config")?.to_string();
    let n_skills: usize = field(it.next(), "n_skills")?.parse().map_err(io_err)?;

    let mut entries = Vec::new();
    while let Some(line) = it.next() {
        let spec = field(Some(line), "tensor")?;
        let parts: Vec<&str> = spec.split(' ').collect();
        let [name, rows, cols] = parts[..] else {
            return Err(NeuralError::Checkpoint(format!("bad tensor line `{line}`")));
        };
        let rows: usize = rows.parse().map_err(io_err)?;
        let cols: usize = cols.parse().map_err(io_err)?;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = it
                .next()
                .ok_or_else(|| NeuralError::Checkpoint(format!("tensor {name} truncated")))?;
            for v in row.split_whitespace() {
                values.push(v.parse::<f64>().map_err(io_err)?);
            }
        }
        let t = Array2::from_shape_vec((rows, cols), values).map_err(io_err)?;
        entries.push((name.to_string(), t));
    }
    let (names, tensors): (Vec<String>, Vec<Array2<f64>>) = entries.into_iter().unzip();
    let params = ParamSet { names, tensors };

    let checked = |expected: &ParamSet| -> Result<(), NeuralError> {
        if expected.names != params.names
            || expected
                .tensors
                .iter()
                .zip(&params.tensors)
                .any(|(a, b)| a.dim() != b.dim())
        {
            return Err(NeuralError::Checkpoint("tensor layout does not match config".into()));
        }
        Ok(())
    };
    match kind.as_str() {
        "dkt" => {
            let config: DktConfig = serde_json::from_str(&config).map_err(io_err)?;
            let mut m = DktModel::new(config, n_skills)?;
            checked(&m.params)?;
            m.params = params;
            Ok(Checkpoint::Dkt(m))
        }
        "sakt" => {
            let config: SaktConfig = serde_json::from_str(&config).map_err(io_err)?;
            let mut m = SaktModel::new(config, n_skills)?;
            checked(&m.params)?;
            m.params = params;
            Ok(Checkpoint::Sakt(m))
        }
        other => Err(NeuralError::Checkpoint(format!("unknown model kind `{other}`"))),
    }
}
