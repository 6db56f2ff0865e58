//! Relative weight change per module group between two snapshots.

use std::io::Write;

use glob::Pattern;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sampler::csv_err;

/// Named set of parameter-path globs. A parameter belongs to the first
/// group whose pattern matches; unmatched parameters are left out.
#[derive(Debug, Clone)]
pub struct DeltaGroup {
    pub name: String,
    pub patterns: Vec<Pattern>,
}

impl DeltaGroup {
    pub fn new(name: &str, patterns: &[&str]) -> Result<Self> {
        let patterns = patterns
            .iter()
            .map(|p| Pattern::new(p).map_err(|e| Error::config(format!("bad group glob `{p}`: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_owned(),
            patterns,
        })
    }

    pub fn matches(&self, param: &str) -> bool {
        self.patterns.iter().any(|p| p.matches(param))
    }
}

/// Text-encoder attention, text-encoder MLP, denoiser cross-attention and
/// the rest of the denoiser, over snapshot parameter names.
pub fn default_grouping() -> Vec<DeltaGroup> {
    [
        ("text_encoder_attention", &["encoder.block*.attn.*"][..]),
        ("text_encoder_mlp", &["encoder.block*.mlp.*"]),
        ("denoiser_cross_attention", &["denoiser.block*.xattn.*"]),
        ("denoiser_other", &["denoiser.*"]),
    ]
    .into_iter()
    .map(|(n, p)| DeltaGroup::new(n, p).expect("static globs are valid"))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaEntry {
    pub group: String,
    pub delta: f64,
    pub numel: usize,
    pub tensors: usize,
    /// Whether any value differs bitwise.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaReport {
    pub entries: Vec<DeltaEntry>,
}

/// How Δ is aggregated; written into every report row.
pub const NORMALIZATION: &str = "concatenated_l2_ratio";

impl DeltaReport {
    pub fn get(&self, group: &str) -> Option<&DeltaEntry> {
        self.entries.iter().find(|e| e.group == group)
    }

    /// Columns: group, delta, numel, tensors, changed, normalization.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "delta", "numel", "tensors", "changed", "normalization"])
            .map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.group.clone(),
                e.delta.to_string(),
                e.numel.to_string(),
                e.tensors.to_string(),
                e.changed.to_string(),
                NORMALIZATION.to_owned(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Δ = ‖θ̂ − θ‖₂ / ‖θ‖₂ over each group's concatenated parameters.
/// A group with ‖θ‖ = 0 reports 0 when unchanged and +∞ otherwise.
pub fn delta_weights(before: &ParamStore, after: &ParamStore, grouping: &[DeltaGroup]) -> Result<DeltaReport> {
    for (name, t) in before.iter() {
        match after.get(name) {
            None => return Err(Error::arg(format!("parameter `{name}` missing from the second snapshot"))),
            Some(u) if u.shape() != t.shape() => {
                return Err(Error::arg(format!(
                    "parameter `{name}` has shape {:?} before and {:?} after",
                    t.shape(),
                    u.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = after.names().find(|n| !before.contains(n)) {
        return Err(Error::arg(format!("parameter `{extra}` missing from the first snapshot")));
    }
    let mut acc: Vec<(f64, f64, usize, usize, bool)> = vec![(0.0, 0.0, 0, 0, false); grouping.len()];
    for (name, t) in before.iter() {
        let Some(gi) = grouping.iter().position(|g| g.matches(name)) else {
            continue;
        };
        let u = after.get(name).expect("checked above");
        let a = &mut acc[gi];
        for (x, y) in t.data().iter().zip(u.data()) {
            let d = y - x;
            a.0 += d * d;
            a.1 += x * x;
            a.4 |= x.to_bits() != y.to_bits();
        }
        a.2 += t.len();
        a.3 += 1;
    }
    let entries = grouping
        .iter()
        .zip(acc)
        .map(|(g, (num, den, numel, tensors, changed))| DeltaEntry {
            group: g.name.clone(),
            delta: if num == 0.0 {
                0.0
            } else if den == 0.0 {
                f64::INFINITY
            } else {
                (num / den).sqrt()
            },
            numel,
            tensors,
            changed,
        })
        .collect();
    Ok(DeltaReport { entries })
}
