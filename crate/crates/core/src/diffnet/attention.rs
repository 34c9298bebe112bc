use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Matrix};

/// Which operands an attention layer reads its keys and values from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Keys and values come from the image tokens.
    #[serde(rename = "self")]
    SelfAttention,
    /// Keys and values come from the text embedding.
    Cross,
}

/// `Softmax(Q Kᵀ / √d)` row by row.
pub fn attention_map(q: &Matrix, k: &Matrix, d: usize) -> Result<Matrix> {
    if d == 0 {
        return Err(Error::invalid("attention dimension must be positive"));
    }
    if q.cols() != d || k.cols() != d {
        return Err(Error::shape(format!(
            "attention expects Q and K with {d} columns, got {} and {}",
            q.cols(),
            k.cols()
        )));
    }
    let logits = q.matmul_t(k)?.scaled(1.0 / (d as f64).sqrt());
    Ok(softmax_rows(&logits))
}

/// `AM(Q, K) · V`
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    attention_map(q, k, q.cols())?.matmul(v)
}

/// Differentiable [`attention_map`].
pub fn attention_map_var(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d = g.shape(q).1;
    if g.shape(k).1 != d || d == 0 {
        return Err(Error::shape(format!(
            "attention expects Q and K with equal positive width, got {} and {}",
            d,
            g.shape(k).1
        )));
    }
    let logits = g.matmul_t(q, k)?;
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt());
    Ok(g.softmax_rows(scaled))
}

/// Differentiable [`attention`]; returns `(output, map)`.
pub fn attention_var(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    if g.shape(k).0 != g.shape(v).0 {
        return Err(Error::shape("keys and values differ in count"));
    }
    let map = attention_map_var(g, q, k)?;
    Ok((g.matmul(map, v)?, map))
}
