//! Block-map files and ELF symbol tables.
//!
//! Text form, one record per line:
//!
//! ```text
//! # module   start      end        label
//! app	0x1000	0x1040	main.c:10
//! ```
//!
//! Fields are tab separated, addresses are link-time hex (the `0x` prefix is
//! optional), and the label runs to the end of the line. The JSON form is an
//! array of `{"module", "start", "end", "label"}` objects where addresses
//! may be hex strings or integers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bbenergy_core::blockmap::{symbol_fallback, AddressRange, BlockMap, BlockMapSet, MapGranularity};
use bbenergy_core::ModuleId;
use object::{Object, ObjectSymbol, SymbolKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlockMapError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Map {
        path: PathBuf,
        #[source]
        source: bbenergy_core::Error,
    },
}

/// One record of a block-map file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapEntry {
    pub module: String,
    pub range: AddressRange,
    pub label: String,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct JsonEntry {
    module: String,
    start: JsonAddr,
    end: JsonAddr,
    label: String,
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum JsonAddr {
    Num(u64),
    Hex(String),
}

pub fn parse_hex(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> BlockMapError {
    BlockMapError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn check_module_name(name: &str) -> Result<(), String> {
    if name.is_empty() {
        return Err("empty module name".into());
    }
    if name.contains([',', '\t', '\n']) {
        return Err(format!("module name {name:?} contains a separator"));
    }
    Ok(())
}

/// Parses the tab-separated form. `path` only feeds error messages.
pub fn parse_text(text: &str, path: &Path) -> Result<Vec<MapEntry>, BlockMapError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let module = fields[0].trim();
        check_module_name(module).map_err(|m| parse_err(path, line, m))?;
        let start = parse_hex(fields[1].trim())
            .ok_or_else(|| parse_err(path, line, format!("bad start address {:?}", fields[1])))?;
        let end = parse_hex(fields[2].trim())
            .ok_or_else(|| parse_err(path, line, format!("bad end address {:?}", fields[2])))?;
        let range = AddressRange::new(start, end)
            .map_err(|_| parse_err(path, line, format!("empty range [{start:#x},{end:#x})")))?;
        let label = fields[3].trim();
        if label.is_empty() {
            return Err(parse_err(path, line, "empty label"));
        }
        out.push(MapEntry { module: module.to_string(), range, label: label.to_string() });
    }
    Ok(out)
}

pub fn parse_json(text: &str, path: &Path) -> Result<Vec<MapEntry>, BlockMapError> {
    let raw: Vec<JsonEntry> =
        serde_json::from_str(text).map_err(|e| parse_err(path, e.line(), e.to_string()))?;
    raw.into_iter()
        .enumerate()
        .map(|(i, e)| {
            let invalid = |msg: String| BlockMapError::Invalid { path: path.to_path_buf(), msg: format!("entry {i}: {msg}") };
            check_module_name(&e.module).map_err(invalid)?;
            let addr = |a: &JsonAddr| match a {
                JsonAddr::Num(n) => Some(*n),
                JsonAddr::Hex(s) => parse_hex(s),
            };
            let start = addr(&e.start).ok_or_else(|| invalid("bad start address".into()))?;
            let end = addr(&e.end).ok_or_else(|| invalid("bad end address".into()))?;
            let range = AddressRange::new(start, end)
                .map_err(|_| invalid(format!("empty range [{start:#x},{end:#x})")))?;
            if e.label.trim().is_empty() {
                return Err(invalid("empty label".into()));
            }
            Ok(MapEntry { module: e.module, range, label: e.label })
        })
        .collect()
}

fn looks_like_json(path: &Path, text: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
        || text.trim_start().starts_with('[')
}

/// Reads a block-map file in either form.
pub fn read_entries(path: &Path) -> Result<Vec<MapEntry>, BlockMapError> {
    let text = fs::read_to_string(path)
        .map_err(|source| BlockMapError::Io { path: path.to_path_buf(), source })?;
    let entries = if looks_like_json(path, &text) { parse_json(&text, path)? } else { parse_text(&text, path)? };
    if entries.is_empty() {
        return Err(BlockMapError::Map { path: path.to_path_buf(), source: bbenergy_core::Error::EmptyMap });
    }
    Ok(entries)
}

/// Groups entries by module, in order of first appearance.
pub fn group_by_module(entries: &[MapEntry]) -> Vec<(String, Vec<(String, AddressRange)>)> {
    let mut groups: Vec<(String, Vec<(String, AddressRange)>)> = Vec::new();
    for e in entries {
        let pos = match groups.iter().position(|(m, _)| *m == e.module) {
            Some(p) => p,
            None => {
                groups.push((e.module.clone(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[pos].1.push((e.label.clone(), e.range));
    }
    groups
}

/// Loads a block-map file into `set`, one map per module named in it.
pub fn load_blockmap(path: &Path, set: &mut BlockMapSet) -> Result<Vec<ModuleId>, BlockMapError> {
    let entries = read_entries(path)?;
    insert_entries(&entries, MapGranularity::Block, set)
        .map_err(|source| BlockMapError::Map { path: path.to_path_buf(), source })
}

pub fn insert_entries(
    entries: &[MapEntry],
    granularity: MapGranularity,
    set: &mut BlockMapSet,
) -> Result<Vec<ModuleId>, bbenergy_core::Error> {
    group_by_module(entries)
        .into_iter()
        .map(|(module, list)| {
            set.insert_with(&module, |id| BlockMap::new(id, module.clone(), list, granularity))
        })
        .collect()
}

/// Canonical text form of a map: one line per range, in address order.
pub fn to_text(map: &BlockMap) -> String {
    let mut out = String::new();
    for (label, range) in map.entries() {
        let _ = writeln!(out, "{}\t{:#x}\t{:#x}\t{}", map.module_name(), range.start(), range.end(), label);
    }
    out
}

pub fn to_json(maps: &[&BlockMap]) -> String {
    let entries: Vec<JsonEntry> = maps
        .iter()
        .flat_map(|m| {
            m.entries().map(|(label, r)| JsonEntry {
                module: m.module_name().to_string(),
                start: JsonAddr::Hex(format!("{:#x}", r.start())),
                end: JsonAddr::Hex(format!("{:#x}", r.end())),
                label: label.to_string(),
            })
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&entries).expect("block map entries serialize");
    s.push('\n');
    s
}

/// Module name used for a binary: its file name.
pub fn module_name_of(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

/// Sized function symbols of an ELF (or other `object`-readable) binary,
/// demangled, at link-time addresses.
pub fn read_symbols(path: &Path) -> Result<Vec<(String, AddressRange)>, BlockMapError> {
    let data = fs::read(path).map_err(|source| BlockMapError::Io { path: path.to_path_buf(), source })?;
    let file = object::File::parse(&*data)
        .map_err(|e| BlockMapError::Invalid { path: path.to_path_buf(), msg: e.to_string() })?;
    let mut out = Vec::new();
    for sym in file.symbols() {
        if sym.kind() != SymbolKind::Text || sym.size() == 0 || !sym.is_definition() {
            continue;
        }
        let Ok(name) = sym.name() else { continue };
        if name.is_empty() {
            continue;
        }
        let Ok(range) = AddressRange::new(sym.address(), sym.address().saturating_add(sym.size())) else { continue };
        out.push((format!("{:#}", rustc_demangle::demangle(name)), range));
    }
    Ok(out)
}

/// Builds a function-granularity map for `path` and adds it to `set`.
pub fn load_symbols(path: &Path, set: &mut BlockMapSet) -> Result<ModuleId, BlockMapError> {
    let symbols = read_symbols(path)?;
    let name = module_name_of(path);
    set.insert_with(&name, |id| symbol_fallback(id, name.clone(), &symbols))
        .map_err(|source| BlockMapError::Map { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use bbenergy_core::BlockKey;

    fn p() -> &'static Path {
        Path::new("map.txt")
    }

    #[test]
    fn single_range() {
        let e = parse_text("app\t0x1000\t0x1040\tmain.c:10\n", p()).unwrap();
        let mut set = BlockMapSet::new();
        insert_entries(&e, MapGranularity::Block, &mut set).unwrap();
        let m = set.maps().next().unwrap();
        assert_eq!(m.descriptors().len(), 1);
        assert_eq!(m.descriptors()[0].label, "main.c:10");
        assert_eq!(set.resolve(0x1008), BlockKey::block(0, 0));
    }

    #[test]
    fn comments_blank_lines_and_bare_hex() {
        let text = "# header\n\napp\t2000\t2040\tb\n  # indented\napp\t1000\t1040\ta with spaces\n";
        let e = parse_text(text, p()).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].label, "a with spaces");
        let mut set = BlockMapSet::new();
        insert_entries(&e, MapGranularity::Block, &mut set).unwrap();
        let m = set.maps().next().unwrap();
        assert_eq!(m.descriptors()[0].label, "a with spaces");
        assert_eq!(m.descriptors()[1].label, "b");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_text("app\t0x10\t0x20\tok\napp\t0xzz\t0x30\tbad\n", p()).unwrap_err();
        assert!(matches!(err, BlockMapError::Parse { line: 2, .. }), "{err}");
        let err = parse_text("# c\napp\t0x10\t0x20\n", p()).unwrap_err();
        assert!(matches!(err, BlockMapError::Parse { line: 2, .. }));
        let err = parse_text("app\t0x20\t0x20\tempty\n", p()).unwrap_err();
        assert!(err.to_string().contains("map.txt:1"));
    }

    #[test]
    fn overlap_names_offenders() {
        let e = parse_text("app\t0x10\t0x30\tfirst\napp\t0x20\t0x40\tsecond\n", p()).unwrap();
        let err = insert_entries(&e, MapGranularity::Block, &mut BlockMapSet::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("first") && msg.contains("second"), "{msg}");
    }

    #[test]
    fn json_matches_text() {
        let json = r#"[{"module":"app","start":"0x1000","end":"0x1040","label":"a"},
                       {"module":"app","start":8192,"end":8256,"label":"b"}]"#;
        let text = "app\t0x1000\t0x1040\ta\napp\t0x2000\t0x2040\tb\n";
        assert_eq!(parse_json(json, p()).unwrap(), parse_text(text, p()).unwrap());
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let json = r#"[{"module":"app","start":1,"end":2,"label":"a","extra":1}]"#;
        assert!(parse_json(json, p()).is_err());
    }

    #[test]
    fn text_round_trip() {
        let text = "app\t0x3000\t0x3010\tc\napp\t0x1000\t0x1040\ta\napp\t0x1040\t0x1050\ta\n";
        let mut set = BlockMapSet::new();
        insert_entries(&parse_text(text, p()).unwrap(), MapGranularity::Block, &mut set).unwrap();
        let m = set.maps().next().unwrap();
        let out = to_text(m);
        assert_eq!(out, "app\t0x1000\t0x1050\ta\napp\t0x3000\t0x3010\tc\n");
        let mut again = BlockMapSet::new();
        insert_entries(&parse_text(&out, p()).unwrap(), MapGranularity::Block, &mut again).unwrap();
        assert_eq!(set, again);
        let json = to_json(&[m]);
        let mut from_json = BlockMapSet::new();
        insert_entries(&parse_json(&json, p()).unwrap(), MapGranularity::Block, &mut from_json).unwrap();
        assert_eq!(set, from_json);
    }

    #[test]
    fn modules_grouped_in_first_appearance_order() {
        let text = "b.so\t0x10\t0x20\tx\na.out\t0x10\t0x20\ty\nb.so\t0x20\t0x30\tz\n";
        let mut set = BlockMapSet::new();
        let ids = insert_entries(&parse_text(text, p()).unwrap(), MapGranularity::Block, &mut set).unwrap();
        assert_eq!(ids, vec![ModuleId(0), ModuleId(1)]);
        assert_eq!(set.module_name(ModuleId(0)), Some("b.so"));
        assert_eq!(set.map(ModuleId(0)).unwrap().descriptors().len(), 2);
    }

    #[test]
    fn own_test_binary_has_symbols() {
        let exe = std::env::current_exe().unwrap();
        let syms = read_symbols(&exe).unwrap();
        assert!(syms.iter().any(|(n, _)| n.contains("own_test_binary_has_symbols")));
        let mut set = BlockMapSet::new();
        let id = load_symbols(&exe, &mut set).unwrap();
        assert_eq!(set.map(id).unwrap().granularity(), MapGranularity::Function);
    }
}
