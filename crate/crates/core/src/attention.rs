//! Projection-free cross-attention chains.
//!
//! `attention_step(a, b) = softmax(a b^T / sqrt(C)) b`. The chain alternates
//! its two most recent features as query and key/value:
//! `F1 = step(F, F')`, `F2 = step(F', F1)`, `Fk = step(F(k-2), F(k-1))`.
//! Calibration is the same chain anchored on the block input.
//! Tokens are row-major flattened spatial positions.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::numerics::autodiff::attention_forward;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Chain length.
    pub m: usize,
    /// Calibration chain length; 0 disables calibration.
    pub l_cal: usize,
    /// Learned query/key/value projections inside every chain step.
    pub projections: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { m: 4, l_cal: 2, projections: false }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(config_err!("chain length must be at least 1"));
        }
        Ok(())
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    let (_, ca) = a.rows_cols()?;
    let (_, cb) = b.rows_cols()?;
    if ca != cb || ca == 0 {
        return Err(shape_err!("attention channels differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `softmax(a b^T / sqrt(C)) b` for `a: n x C`, `b: m x C`.
pub fn attention_step(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    Ok(attention_forward(a, b, b)?.1)
}

/// Runs the alternating chain for `m` steps and returns the last feature.
pub fn pmp_chain(f: &Tensor, f_pseudo: &Tensor, m: usize) -> Result<Tensor> {
    if m < 1 {
        return Err(config_err!("chain length must be at least 1"));
    }
    let mut prev = f.clone();
    let mut cur = f_pseudo.clone();
    for _ in 0..m {
        let next = attention_step(&prev, &cur)?;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Re-anchors `fused` on `block_input` with an `l_cal`-step chain.
pub fn calibrate(block_input: &Tensor, fused: &Tensor, l_cal: usize) -> Result<Tensor> {
    if block_input.shape() != fused.shape() {
        return Err(shape_err!("calibrate {:?} vs {:?}", block_input.shape(), fused.shape()));
    }
    if l_cal == 0 {
        return Ok(fused.clone());
    }
    pmp_chain(block_input, fused, l_cal)
}

/// Optional learned `C x C` projections applied at every chain step.
#[derive(Clone, Copy, Debug)]
pub struct StepProjections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn attention_step_graph(g: &mut Graph, a: Var, b: Var, proj: Option<StepProjections>) -> Result<Var> {
    check_pair(g.value(a), g.value(b))?;
    match proj {
        None => g.attention(a, b, b),
        Some(p) => {
            let q = g.matmul(a, p.q)?;
            let k = g.matmul(b, p.k)?;
            let v = g.matmul(b, p.v)?;
            g.attention(q, k, v)
        }
    }
}

pub fn pmp_chain_graph(g: &mut Graph, f: Var, f_pseudo: Var, m: usize, proj: Option<StepProjections>) -> Result<Var> {
    if m < 1 {
        return Err(config_err!("chain length must be at least 1"));
    }
    let (mut prev, mut cur) = (f, f_pseudo);
    for _ in 0..m {
        let next = attention_step_graph(g, prev, cur, proj)?;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

pub fn calibrate_graph(g: &mut Graph, block_input: Var, fused: Var, l_cal: usize, proj: Option<StepProjections>) -> Result<Var> {
    if g.value(block_input).shape() != g.value(fused).shape() {
        return Err(shape_err!(
            "calibrate {:?} vs {:?}",
            g.value(block_input).shape(),
            g.value(fused).shape()
        ));
    }
    if l_cal == 0 {
        return Ok(fused);
    }
    pmp_chain_graph(g, block_input, fused, l_cal, proj)
}
