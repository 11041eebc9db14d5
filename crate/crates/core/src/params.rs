//! Flat parameter vectors for the optimizer.
//!
//! Order: for every bank, the lower triangles (row-major, `i >= j`) of
//! `P_0..P_{K-1}`, then of `R_0..R_{K-1}`, then `b_0..b_{K-1}`; after all
//! banks, the per-layer bias sets if present.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grad::ModelGradients;
use crate::model::{Architecture, DgcrfModel};

/// A named contiguous range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub range: Range<usize>,
}

fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

pub fn num_params(arch: &Architecture) -> usize {
    let n = arch.d * arch.d;
    arch.num_banks() * (2 * arch.k * tri_len(n) + arch.k) + arch.num_layer_biases() * arch.k
}

/// One block per factor matrix and per bias vector.
pub fn param_blocks(arch: &Architecture) -> Vec<ParamBlock> {
    let n = arch.d * arch.d;
    let t = tri_len(n);
    let mut blocks = Vec::new();
    let mut at = 0;
    let mut push = |name: String, len: usize| {
        blocks.push(ParamBlock {
            name,
            range: at..at + len,
        });
        at += len;
    };
    let multi = arch.num_banks() > 1;
    for b in 0..arch.num_banks() {
        let tag = if multi { format!("[bank {b}]") } else { String::new() };
        for k in 0..arch.k {
            push(format!("P_{k}{tag}"), t);
        }
        for k in 0..arch.k {
            push(format!("R_{k}{tag}"), t);
        }
        push(format!("b{tag}"), arch.k);
    }
    for l in 0..arch.num_layer_biases() {
        push(format!("b[layer {}]", l + 2), arch.k);
    }
    blocks
}

fn push_lower(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
}

fn read_lower(m: &mut DMatrix<f64>, src: &mut impl Iterator<Item = f64>) {
    for i in 0..m.nrows() {
        for j in 0..=i {
            m[(i, j)] = src.next().expect("length checked by caller");
        }
    }
}

pub fn flatten_model(model: &DgcrfModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(num_params(&model.arch));
    for bank in &model.banks {
        bank.factors_w.iter().for_each(|f| push_lower(&mut out, f));
        bank.factors_psi.iter().for_each(|f| push_lower(&mut out, f));
        out.extend_from_slice(&bank.biases);
    }
    for set in &model.layer_biases {
        out.extend_from_slice(set);
    }
    out
}

/// Writes `theta` into the model's parameters (upper triangles stay zero).
pub fn unflatten_into(model: &mut DgcrfModel, theta: &[f64]) -> Result<()> {
    let expected = num_params(&model.arch);
    if theta.len() != expected {
        return Err(Error::Contract(format!(
            "parameter vector has {} entries, model needs {expected}",
            theta.len()
        )));
    }
    let mut src = theta.iter().copied();
    for bank in &mut model.banks {
        bank.factors_w.iter_mut().for_each(|f| read_lower(f, &mut src));
        bank.factors_psi.iter_mut().for_each(|f| read_lower(f, &mut src));
        bank.biases.iter_mut().for_each(|b| *b = src.next().expect("length checked"));
    }
    for set in &mut model.layer_biases {
        set.iter_mut().for_each(|b| *b = src.next().expect("length checked"));
    }
    Ok(())
}

pub fn flatten_gradients(grads: &ModelGradients) -> Vec<f64> {
    let mut out = Vec::new();
    for bank in &grads.banks {
        bank.d_p.iter().for_each(|f| push_lower(&mut out, f));
        bank.d_r.iter().for_each(|f| push_lower(&mut out, f));
        out.extend_from_slice(&bank.d_b);
    }
    for set in &grads.layer_biases {
        out.extend_from_slice(set);
    }
    out
}
