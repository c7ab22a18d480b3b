//! Dense vector primitives and residual containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter vector of one client or of the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamBlock(Vec<f64>);

impl ParamBlock {
    pub fn new(values: Vec<f64>) -> Self {
        ParamBlock(values)
    }

    pub fn zeros(m: usize) -> Self {
        ParamBlock(vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self - other`, elementwise.
    pub fn delta(&self, other: &ParamBlock) -> Result<ParamBlock> {
        check_len(self.len(), other.len())?;
        Ok(ParamBlock(sub(&self.0, &other.0)))
    }
}

impl From<Vec<f64>> for ParamBlock {
    fn from(v: Vec<f64>) -> Self {
        ParamBlock(v)
    }
}

impl std::ops::Deref for ParamBlock {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeRole {
    Multiplier,
    Penalty,
    PrimalResidual,
    DualResidual,
}

/// Per-edge vector tagged with its role. Penalty vectors are strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeVector {
    role: EdgeRole,
    values: Vec<f64>,
}

impl EdgeVector {
    pub fn new(role: EdgeRole, values: Vec<f64>) -> Result<Self> {
        if role == EdgeRole::Penalty && values.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::param("penalty entries must be strictly positive"));
        }
        Ok(EdgeVector { role, values })
    }

    pub fn role(&self) -> EdgeRole {
        self.role
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub primal_inf_norm: f64,
    pub dual_inf_norm: f64,
    pub per_edge_primal: Vec<EdgeVector>,
    pub per_block_dual: Vec<ParamBlock>,
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

pub fn inf_norm(a: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::dim("infinity norm of an empty vector"));
    }
    Ok(max_abs(a))
}

pub fn assemble_residual_report(
    primal_edges: Vec<EdgeVector>,
    dual_blocks: Vec<ParamBlock>,
) -> Result<ResidualReport> {
    let mut m = None;
    let lens = primal_edges
        .iter()
        .map(|e| e.len())
        .chain(dual_blocks.iter().map(|b| b.len()));
    for len in lens {
        match m {
            None => m = Some(len),
            Some(m) if m != len => {
                return Err(Error::dim(format!("residual lengths {m} and {len} differ")))
            }
            _ => {}
        }
    }
    let primal_inf_norm = primal_edges
        .iter()
        .map(|e| max_abs(e.as_slice()))
        .fold(0.0, f64::max);
    let dual_inf_norm = dual_blocks.iter().map(|b| max_abs(b)).fold(0.0, f64::max);
    Ok(ResidualReport {
        primal_inf_norm,
        dual_inf_norm,
        per_edge_primal: primal_edges,
        per_block_dual: dual_blocks,
    })
}

pub(crate) fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("lengths {a} and {b} differ")));
    }
    Ok(())
}

pub(crate) fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += a * x`
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
