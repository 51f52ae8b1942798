//! Address-to-block resolution.
//!
//! Block maps are produced offline (by a disassembler or a compiler pass, or
//! from a plain symbol table) and consumed here as data. Addresses in a map
//! are link-time virtual addresses; a per-module load bias maps runtime
//! instruction pointers back onto them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key::{BlockId, BlockKey, ModuleId};

/// Half-open address range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AddressRange {
    start: u64,
    end: u64,
}

impl AddressRange {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidInput("address range must satisfy start < end"));
        }
        Ok(AddressRange { start, end })
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.start <= addr && addr < self.end
    }

    pub fn overlaps(&self, other: &AddressRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for AddressRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x},{:#x})", self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapGranularity {
    Block,
    Function,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockDescriptor {
    pub key: BlockKey,
    /// Sorted, non-overlapping, non-adjacent.
    pub ranges: Vec<AddressRange>,
    pub label: String,
    pub granularity: MapGranularity,
}

/// Blocks of one module, sorted by start address.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMap {
    module: ModuleId,
    module_name: String,
    load_bias: u64,
    granularity: MapGranularity,
    descriptors: Vec<BlockDescriptor>,
    // (start, end, descriptor index), sorted by start
    index: Vec<(u64, u64, u32)>,
}

impl BlockMap {
    /// Builds a normalized map from `(label, range)` entries.
    ///
    /// Entries sharing a label form one block; their ranges are merged when
    /// they touch or overlap. Ranges of different blocks must be disjoint.
    pub fn new(
        module: ModuleId,
        module_name: impl Into<String>,
        entries: impl IntoIterator<Item = (String, AddressRange)>,
        granularity: MapGranularity,
    ) -> Result<Self> {
        let mut by_label: BTreeMap<String, Vec<AddressRange>> = BTreeMap::new();
        for (label, range) in entries {
            if label.is_empty() {
                return Err(Error::InvalidInput("block label must not be empty"));
            }
            by_label.entry(label).or_default().push(range);
        }
        if by_label.is_empty() {
            return Err(Error::EmptyMap);
        }

        let mut blocks: Vec<(String, Vec<AddressRange>)> = by_label
            .into_iter()
            .map(|(label, mut ranges)| {
                ranges.sort();
                let mut merged: Vec<AddressRange> = Vec::with_capacity(ranges.len());
                for r in ranges {
                    match merged.last_mut() {
                        Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
                        _ => merged.push(r),
                    }
                }
                (label, merged)
            })
            .collect();
        blocks.sort_by_key(|(_, ranges)| ranges[0]);

        let mut index: Vec<(u64, u64, u32)> = Vec::new();
        for (i, (_, ranges)) in blocks.iter().enumerate() {
            index.extend(ranges.iter().map(|r| (r.start, r.end, i as u32)));
        }
        index.sort();
        for w in index.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.0 < a.1 {
                let name = |(s, e, i): (u64, u64, u32)| {
                    format!("{} [{:#x},{:#x})", blocks[i as usize].0, s, e)
                };
                return Err(Error::Overlap { first: name(a), second: name(b) });
            }
        }

        let descriptors = blocks
            .into_iter()
            .enumerate()
            .map(|(i, (label, ranges))| BlockDescriptor {
                key: BlockKey::Block { module, block: BlockId(i as u32) },
                ranges,
                label,
                granularity,
            })
            .collect();

        Ok(BlockMap {
            module,
            module_name: module_name.into(),
            load_bias: 0,
            granularity,
            descriptors,
            index,
        })
    }

    pub fn with_load_bias(mut self, bias: u64) -> Self {
        self.load_bias = bias;
        self
    }

    pub fn set_load_bias(&mut self, bias: u64) {
        self.load_bias = bias;
    }

    pub fn module(&self) -> ModuleId {
        self.module
    }

    pub fn module_name(&self) -> &str {
        &self.module_name
    }

    pub fn load_bias(&self) -> u64 {
        self.load_bias
    }

    pub fn granularity(&self) -> MapGranularity {
        self.granularity
    }

    pub fn descriptors(&self) -> &[BlockDescriptor] {
        &self.descriptors
    }

    pub fn descriptor(&self, block: BlockId) -> Option<&BlockDescriptor> {
        self.descriptors.get(block.0 as usize)
    }

    /// Looks up a link-time address.
    pub fn lookup(&self, link_addr: u64) -> Option<&BlockDescriptor> {
        let i = self.index.partition_point(|&(start, _, _)| start <= link_addr);
        let (_, end, d) = *self.index.get(i.checked_sub(1)?)?;
        (link_addr < end).then(|| &self.descriptors[d as usize])
    }

    /// Resolves a runtime address using this map's load bias.
    pub fn resolve(&self, addr: u64) -> BlockKey {
        self.resolve_with_bias(addr, self.load_bias)
    }

    pub fn resolve_with_bias(&self, addr: u64, bias: u64) -> BlockKey {
        self.lookup(addr.wrapping_sub(bias)).map_or(BlockKey::UNKNOWN, |d| d.key)
    }

    /// `(label, range)` entries in address order; feeding them back to
    /// [`BlockMap::new`] reproduces this map.
    pub fn entries(&self) -> impl Iterator<Item = (&str, AddressRange)> + '_ {
        self.index.iter().map(|&(start, end, d)| {
            (self.descriptors[d as usize].label.as_str(), AddressRange { start, end })
        })
    }
}

/// Function-granularity map built from a symbol table.
///
/// Zero-sized symbols are dropped. Where symbols overlap (aliases, nested
/// local labels), the one with the lowest start wins and, at equal start,
/// the larger and then the alphabetically first.
pub fn symbol_fallback(
    module: ModuleId,
    module_name: impl Into<String>,
    symbols: &[(String, AddressRange)],
) -> Result<BlockMap> {
    if symbols.is_empty() {
        return Err(Error::EmptySymbolTable);
    }
    let mut sorted: Vec<&(String, AddressRange)> = symbols.iter().collect();
    sorted.sort_by(|a, b| {
        a.1.start
            .cmp(&b.1.start)
            .then(b.1.end.cmp(&a.1.end))
            .then(a.0.cmp(&b.0))
    });
    let mut kept: Vec<(String, AddressRange)> = Vec::new();
    let mut labels: BTreeMap<&str, u32> = BTreeMap::new();
    for (name, range) in sorted {
        if kept.last().is_some_and(|(_, last)| last.overlaps(range)) {
            continue;
        }
        // distinct symbols with the same name (static functions in different
        // files) must stay distinct blocks
        let seen = labels.entry(name.as_str()).or_insert(0);
        let label = if *seen == 0 { name.clone() } else { format!("{name}#{seen}") };
        *seen += 1;
        kept.push((label, *range));
    }
    BlockMap::new(module, module_name, kept, MapGranularity::Function)
}

/// A module's runtime extent, as read from the target's memory map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleRegion {
    pub name: String,
    pub range: AddressRange,
    pub load_bias: u64,
}

/// All block maps of a run plus the runtime regions of loaded modules.
///
/// Module ids are assigned in registration order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockMapSet {
    names: Vec<String>,
    maps: Vec<Option<BlockMap>>,
    regions: Vec<(ModuleId, AddressRange, u64)>,
}

impl BlockMapSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Id of `name`, registering it if new.
    pub fn module_id(&mut self, name: &str) -> ModuleId {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return ModuleId(i as u32);
        }
        self.names.push(name.to_string());
        self.maps.push(None);
        ModuleId(self.names.len() as u32 - 1)
    }

    pub fn find_module(&self, name: &str) -> Option<ModuleId> {
        self.names.iter().position(|n| n == name).map(|i| ModuleId(i as u32))
    }

    pub fn module_name(&self, id: ModuleId) -> Option<&str> {
        self.names.get(id.0 as usize).map(String::as_str)
    }

    /// Adds a map built by `build` for module `name`. Fails if the module
    /// already has one.
    pub fn insert_with(
        &mut self,
        name: &str,
        build: impl FnOnce(ModuleId) -> Result<BlockMap>,
    ) -> Result<ModuleId> {
        let id = self.module_id(name);
        if self.maps[id.0 as usize].is_some() {
            return Err(Error::DuplicateModule(name.to_string()));
        }
        self.maps[id.0 as usize] = Some(build(id)?);
        Ok(id)
    }

    pub fn map(&self, id: ModuleId) -> Option<&BlockMap> {
        self.maps.get(id.0 as usize).and_then(Option::as_ref)
    }

    pub fn map_mut(&mut self, id: ModuleId) -> Option<&mut BlockMap> {
        self.maps.get_mut(id.0 as usize).and_then(Option::as_mut)
    }

    pub fn maps(&self) -> impl Iterator<Item = &BlockMap> {
        self.maps.iter().flatten()
    }

    /// Records where a module is loaded. Its bias overrides the map's.
    pub fn add_region(&mut self, region: &ModuleRegion) -> ModuleId {
        let id = self.module_id(&region.name);
        self.regions.push((id, region.range, region.load_bias));
        id
    }

    /// Label of a block key, if it names a mapped block.
    pub fn label(&self, key: &BlockKey) -> Option<&str> {
        match key {
            BlockKey::Block { module, block } => {
                self.map(*module)?.descriptor(*block).map(|d| d.label.as_str())
            }
            _ => None,
        }
    }

    /// Every mapped block, in module then address order.
    pub fn all_blocks(&self) -> Vec<BlockKey> {
        self.maps().flat_map(|m| m.descriptors().iter().map(|d| d.key)).collect()
    }

    /// Resolves a runtime instruction pointer.
    ///
    /// An address inside a known module region resolves through that
    /// module's map (with the region's bias) or, failing that, to the
    /// module's unknown pseudo-key. Other addresses are tried against every
    /// map with its own bias.
    pub fn resolve(&self, addr: u64) -> BlockKey {
        if let Some(&(module, _, bias)) = self.regions.iter().find(|(_, r, _)| r.contains(addr)) {
            return match self.map(module).map(|m| m.resolve_with_bias(addr, bias)) {
                Some(key @ BlockKey::Block { .. }) => key,
                _ => BlockKey::Unknown { module: Some(module) },
            };
        }
        self.maps()
            .map(|m| m.resolve(addr))
            .find(|k| !k.is_unknown())
            .unwrap_or(BlockKey::UNKNOWN)
    }
}
