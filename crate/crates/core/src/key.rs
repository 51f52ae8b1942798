//! Identities of sampled code: single blocks and per-thread block tuples.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Index of a loaded image (executable or shared library) within a block-map set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModuleId(pub u32);

/// Index of a block within one module's block map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u32);

/// What a sampled instruction pointer resolved to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockKey {
    Block { module: ModuleId, block: BlockId },
    /// The address did not resolve. `module` is set when the address fell
    /// inside a known image that has no matching block.
    Unknown { module: Option<ModuleId> },
    /// The thread slot had no live thread at the sample instant.
    Absent,
}

impl BlockKey {
    pub const UNKNOWN: BlockKey = BlockKey::Unknown { module: None };

    pub fn block(module: u32, block: u32) -> Self {
        BlockKey::Block { module: ModuleId(module), block: BlockId(block) }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, BlockKey::Unknown { .. })
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, BlockKey::Absent)
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKey::Block { module, block } => write!(f, "{}:{}", module.0, block.0),
            BlockKey::Unknown { module: None } => f.write_str("unknown"),
            BlockKey::Unknown { module: Some(m) } => write!(f, "unknown@{}", m.0),
            BlockKey::Absent => f.write_str("absent"),
        }
    }
}

/// The blocks observed on every thread slot at one sample instant, ordered
/// by slot index. Sequential programs use keys of length one.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CombinationKey(Vec<BlockKey>);

impl CombinationKey {
    pub fn new(blocks: Vec<BlockKey>) -> Self {
        CombinationKey(blocks)
    }

    pub fn single(block: BlockKey) -> Self {
        CombinationKey(alloc::vec![block])
    }

    pub fn blocks(&self) -> &[BlockKey] {
        &self.0
    }

    /// Number of thread slots.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains_unknown(&self) -> bool {
        self.0.iter().any(BlockKey::is_unknown)
    }
}

impl From<BlockKey> for CombinationKey {
    fn from(block: BlockKey) -> Self {
        CombinationKey::single(block)
    }
}

impl fmt::Display for CombinationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}
