//! Named trainable-parameter bookkeeping: optimizer grouping, exact counting
//! and content checksums.

use candle_core::{DType, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which optimizer group a parameter belongs to. The backbone is frozen and
/// deliberately has no variant here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Visual reprogramming parameters (pattern, mask producer, coord attention).
    Reprogram,
    /// Classifier heads and the domain discriminator.
    Heads,
}

/// Ordered collection of named trainable parameters.
#[derive(Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, var: Var) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, var));
        Ok(())
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) -> Result<()> {
        for (name, var) in &other.entries {
            self.push(format!("{prefix}.{name}"), var.clone())?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Content hash over (name, dtype, shape, raw data), order-independent
    /// through name sorting.
    pub fn checksum(&self) -> Result<String> {
        let named: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        checksum_tensors(named.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

/// Checksum an arbitrary set of named tensors. Names are sorted first so the
/// result is independent of iteration order.
pub fn checksum_tensors<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut items: Vec<(&str, &Tensor)> = tensors.collect();
    items.sort_by_key(|(n, _)| *n);
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(format!("{:?}", t.dtype()).as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F32 => {
                for v in t.flatten_all()?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            dt => return Err(Error::config(format!("checksum: unsupported dtype {dt:?}"))),
        }
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
