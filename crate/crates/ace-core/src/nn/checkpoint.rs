//! Plain-text model checkpoints.
//!
//! Layout (whitespace-separated, one record per line):
//!
//! ```text
//! ace-checkpoint v1
//! arch <input_dim> <n_hidden> <hidden...> <heads> <classes>
//! layer trunk <index> <in> <out>
//! w <in*out floats, row-major>
//! b <out floats>
//! ...one layer block per trunk layer, then per head...
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces parameters bit for bit.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::model::{Arch, Dense, EnsembleModel};
use crate::error::{CoreError, Result};

const MAGIC: &str = "ace-checkpoint v1";

pub fn save(model: &EnsembleModel, path: &Path) -> Result<()> {
    let (arch, trunk, heads) = model.parts();
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!(
        "arch {} {}",
        arch.input_dim,
        arch.hidden.len()
    ));
    for h in &arch.hidden {
        out.push_str(&format!(" {h}"));
    }
    out.push_str(&format!(" {} {}\n", arch.heads, arch.classes));
    for (kind, layers) in [("trunk", trunk), ("head", heads)] {
        for (i, layer) in layers.iter().enumerate() {
            out.push_str(&format!("layer {kind} {i} {} {}\n", layer.in_dim, layer.out_dim));
            push_floats(&mut out, "w", &layer.w);
            push_floats(&mut out, "b", &layer.b);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn push_floats(out: &mut String, tag: &str, vals: &[f64]) {
    out.push_str(tag);
    for v in vals {
        out.push(' ');
        out.push_str(&format!("{v}"));
    }
    out.push('\n');
}

pub fn load(path: &Path) -> Result<EnsembleModel> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| CoreError::Checkpoint("unexpected end of file".into()))?
            .map_err(CoreError::from)
    };

    if next()? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic line".into()));
    }
    let arch_line = next()?;
    let mut tok = arch_line.split_whitespace();
    if tok.next() != Some("arch") {
        return Err(CoreError::Checkpoint("missing arch line".into()));
    }
    let mut take = |what: &str| -> Result<usize> {
        tok.next()
            .ok_or_else(|| CoreError::Checkpoint(format!("arch line missing {what}")))?
            .parse()
            .map_err(|e| CoreError::Checkpoint(format!("bad {what}: {e}")))
    };
    let input_dim = take("input_dim")?;
    let n_hidden = take("hidden count")?;
    let hidden: Vec<usize> = (0..n_hidden)
        .map(|i| take(&format!("hidden[{i}]")))
        .collect::<Result<_>>()?;
    let heads_n = take("heads")?;
    let classes = take("classes")?;
    let arch = Arch {
        input_dim,
        hidden,
        heads: heads_n,
        classes,
    };

    let mut trunk = Vec::with_capacity(arch.hidden.len());
    let mut heads = Vec::with_capacity(arch.heads);
    for _ in 0..arch.hidden.len() + arch.heads {
        let header = next()?;
        let mut t = header.split_whitespace();
        if t.next() != Some("layer") {
            return Err(CoreError::Checkpoint(format!("expected layer header, got: {header}")));
        }
        let kind = t
            .next()
            .ok_or_else(|| CoreError::Checkpoint("layer header missing kind".into()))?
            .to_string();
        let _index = t.next();
        let in_dim: usize = t
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::Checkpoint("bad layer in_dim".into()))?;
        let out_dim: usize = t
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::Checkpoint("bad layer out_dim".into()))?;
        let w = parse_floats(&next()?, "w", in_dim * out_dim)?;
        let b = parse_floats(&next()?, "b", out_dim)?;
        let layer = Dense {
            in_dim,
            out_dim,
            w,
            b,
        };
        match kind.as_str() {
            "trunk" => trunk.push(layer),
            "head" => heads.push(layer),
            other => return Err(CoreError::Checkpoint(format!("unknown layer kind {other}"))),
        }
    }

    EnsembleModel::from_parts(arch, trunk, heads)
        .map_err(|e| CoreError::Checkpoint(format!("inconsistent checkpoint: {e}")))
}

fn parse_floats(line: &str, tag: &str, expect: usize) -> Result<Vec<f64>> {
    let mut tok = line.split_whitespace();
    if tok.next() != Some(tag) {
        return Err(CoreError::Checkpoint(format!("expected '{tag}' record")));
    }
    let vals: Vec<f64> = tok
        .map(|s| {
            s.parse()
                .map_err(|e| CoreError::Checkpoint(format!("bad float {s}: {e}")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(CoreError::Checkpoint(format!(
            "{tag} record has {} values, expected {expect}",
            vals.len()
        )));
    }
    Ok(vals)
}
