use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Matrix;

use super::attention::attention_var;
use super::unet::{AttentionHook, BlockInfo};

/// Operands and results of one attention layer evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub block: BlockInfo,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// `AM(Q, K)`, tokens × keys.
    pub map: Matrix,
    /// `AM(Q, K)·V`
    pub y: Matrix,
}

/// Records every attention layer without changing the result.
#[derive(Clone, Debug, Default)]
pub struct CaptureHook {
    pub records: Vec<AttentionRecord>,
}

impl CaptureHook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, block: usize) -> Option<&AttentionRecord> {
        self.records.iter().find(|r| r.block.id == block)
    }
}

impl AttentionHook for CaptureHook {
    fn attend(&mut self, g: &mut Graph, block: &BlockInfo, q: Var, k: Var, v: Var) -> Result<Option<Var>> {
        let (y, map) = attention_var(g, q, k, v)?;
        self.records.push(AttentionRecord {
            block: *block,
            q: g.value(q).clone(),
            k: g.value(k).clone(),
            v: g.value(v).clone(),
            map: g.value(map).clone(),
            y: g.value(y).clone(),
        });
        Ok(Some(y))
    }
}
