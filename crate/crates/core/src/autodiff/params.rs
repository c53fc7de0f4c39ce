use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, Real};
use crate::error::{Error, Result};

/// Index of a parameter block inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// Named, shaped parameter blocks shared by every network in the pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    blocks: Vec<Block>,
    index: HashMap<String, BlockId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> Result<BlockId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter block `{name}`")));
        }
        let id = BlockId(self.blocks.len());
        self.index.insert(name.clone(), id);
        self.blocks.push(Block { name, value, trainable });
        Ok(id)
    }

    /// Uniform fan-in initialisation in `[-scale/√fan_in, scale/√fan_in]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        scale: Real,
        rng: &mut ChaCha8Rng,
    ) -> Result<BlockId> {
        let bound = scale / (fan_in.max(1) as Real).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * bound).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data), true)
    }

    pub fn id(&self, name: &str) -> Option<BlockId> {
        self.index.get(name).copied()
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.0]
    }

    pub fn value(&self, id: BlockId) -> &Matrix {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: BlockId) -> &mut Matrix {
        &mut self.blocks[id.0].value
    }

    pub fn set_trainable(&mut self, id: BlockId, trainable: bool) {
        self.blocks[id.0].trainable = trainable;
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.blocks.len()).map(BlockId)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total scalar count over the given blocks.
    pub fn count(&self, ids: &[BlockId]) -> usize {
        ids.iter().map(|id| self.value(*id).len()).sum()
    }

    /// Blocks whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<BlockId> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.name.starts_with(prefix))
            .map(|(i, _)| BlockId(i))
            .collect()
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-block gradients. Only trainable blocks that were reached carry one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub(crate) blocks: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: BlockId) -> Option<&Matrix> {
        self.blocks.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of the block's shape when it was not reached.
    pub fn dense(&self, params: &ParameterStore, id: BlockId) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let v = params.value(id);
            Matrix::zeros(v.rows, v.cols)
        })
    }

    pub fn scale(&mut self, factor: Real) {
        for m in self.blocks.iter_mut().flatten() {
            for v in &mut m.data {
                *v *= factor;
            }
        }
    }

    /// Adds another gradient set into this one, block by block.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.blocks.len() < other.blocks.len() {
            self.blocks.resize(other.blocks.len(), None);
        }
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn max_abs(&self) -> Real {
        self.blocks.iter().flatten().flat_map(|m| m.data.iter()).fold(0.0, |a, v| a.max(v.abs()))
    }
}
