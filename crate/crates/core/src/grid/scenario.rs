//! Scenario file parser. The grammar is documented in `docs/scenario-format.md`.

use std::collections::BTreeSet;

use super::{Bus, GridSpec, Line, Load, Source, SourceKind, DEFAULT_H_MAX, DEFAULT_H_MIN};
use crate::env::MdpConfig;
use crate::error::{Error, Result};

/// A parsed scenario document: the network plus its episode settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub grid: GridSpec,
    pub mdp: MdpConfig,
}

/// Parses a scenario document and returns only the network.
pub fn parse_grid(text: &str) -> Result<GridSpec> {
    Ok(Scenario::parse(text)?.grid)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Section {
    Scenario,
    Limits,
    Mdp,
    Bus,
    Line,
    Load,
    Source,
}

impl Section {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "scenario" => Self::Scenario,
            "limits" => Self::Limits,
            "mdp" => Self::Mdp,
            "bus" => Self::Bus,
            "line" => Self::Line,
            "load" => Self::Load,
            "source" => Self::Source,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
struct Token<'a> {
    text: &'a str,
    col: usize,
}

/// Splits on whitespace, keeping `[...]` groups together.
fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut depth = 0usize;
    for (i, ch) in line.char_indices() {
        match ch {
            '[' => {
                depth += 1;
                start.get_or_insert(i);
            }
            ']' => {
                depth = depth.saturating_sub(1);
                start.get_or_insert(i);
            }
            c if c.is_whitespace() && depth == 0 => {
                if let Some(s) = start.take() {
                    out.push(Token {
                        text: &line[s..i],
                        col: s + 1,
                    });
                }
            }
            _ => {
                start.get_or_insert(i);
            }
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            col: s + 1,
        });
    }
    out
}

struct Cursor {
    line: usize,
}

impl Cursor {
    fn err(&self, col: usize, message: impl Into<String>) -> Error {
        Error::Syntax {
            line: self.line,
            column: col,
            message: message.into(),
        }
    }

    fn number(&self, tok: &Token, value: &str, offset: usize) -> Result<f64> {
        let v: f64 = value
            .parse()
            .map_err(|_| self.err(tok.col + offset, format!("expected a number, found {value:?}")))?;
        if !v.is_finite() {
            return Err(self.err(tok.col + offset, "number must be finite"));
        }
        Ok(v)
    }
}

/// Attributes of one row: positional tokens followed by `key=value` pairs.
struct Row<'a> {
    positional: Vec<Token<'a>>,
    attrs: Vec<(Token<'a>, &'a str, &'a str)>,
}

impl<'a> Row<'a> {
    fn split(cur: &Cursor, tokens: Vec<Token<'a>>) -> Result<Self> {
        let mut positional = Vec::new();
        let mut attrs = Vec::new();
        for tok in tokens {
            match tok.text.split_once('=') {
                Some((k, v)) => {
                    if k.is_empty() || v.is_empty() {
                        return Err(cur.err(tok.col, format!("malformed attribute {:?}", tok.text)));
                    }
                    if attrs.iter().any(|(_, key, _)| *key == k) {
                        return Err(cur.err(tok.col, format!("duplicate key {k:?}")));
                    }
                    attrs.push((tok.clone(), k, v));
                }
                None if attrs.is_empty() => positional.push(tok),
                None => return Err(cur.err(tok.col, format!("positional field {:?} after attributes", tok.text))),
            }
        }
        Ok(Self { positional, attrs })
    }

    fn expect_positional(&self, cur: &Cursor, names: &[&str]) -> Result<()> {
        if self.positional.len() != names.len() {
            let col = self.positional.get(names.len()).map_or(1, |t| t.col);
            return Err(cur.err(
                col,
                format!("expected {} leading field(s): {}", names.len(), names.join(" ")),
            ));
        }
        Ok(())
    }

    fn check_keys(&self, cur: &Cursor, allowed: &[&str], required: &[&str]) -> Result<()> {
        for (tok, k, _) in &self.attrs {
            if !allowed.contains(k) {
                return Err(cur.err(tok.col, format!("unknown key {k:?}")));
            }
        }
        for r in required {
            if !self.attrs.iter().any(|(_, k, _)| k == r) {
                let col = self.positional.first().map_or(1, |t| t.col);
                return Err(cur.err(col, format!("missing required key {r:?}")));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<(&Token<'a>, &'a str)> {
        self.attrs.iter().find(|(_, k, _)| *k == key).map(|(t, _, v)| (t, *v))
    }

    fn num(&self, cur: &Cursor, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            Some((tok, v)) => Ok(Some(cur.number(tok, v, key.len() + 1)?)),
            None => Ok(None),
        }
    }
}

struct PendingBus {
    id: String,
    h_min: Option<f64>,
    h_max: Option<f64>,
}

struct PendingRef {
    line: usize,
    name: String,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section: Option<Section> = None;
        let mut name = String::from("unnamed");
        let mut base_kva = 1000.0;
        let mut base_kv = 1.0;
        let mut h_min = DEFAULT_H_MIN;
        let mut h_max = DEFAULT_H_MAX;
        let mut mdp = MdpConfig::default();
        let mut buses: Vec<PendingBus> = Vec::new();
        let mut lines: Vec<(PendingRef, PendingRef, f64, f64, Option<String>)> = Vec::new();
        let mut loads: Vec<(String, PendingRef, f64, f64)> = Vec::new();
        let mut sources: Vec<(String, PendingRef, SourceKind, f64, Option<BTreeSet<usize>>)> = Vec::new();
        let mut seen_sections = BTreeSet::new();

        for (lineno, raw) in text.lines().enumerate() {
            let cur = Cursor { line: lineno + 1 };
            let content = raw.split('#').next().unwrap_or("");
            let trimmed = content.trim();
            if trimmed.is_empty() {
                continue;
            }
            let indent = content.len() - content.trim_start().len();
            if trimmed.starts_with('[') {
                let inner = trimmed
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| cur.err(indent + 1, "unterminated section header"))?;
                let s = Section::from_name(inner.trim())
                    .ok_or_else(|| cur.err(indent + 2, format!("unknown section {:?}", inner.trim())))?;
                if !seen_sections.insert(inner.trim().to_string()) {
                    return Err(cur.err(indent + 1, format!("section [{}] appears twice", inner.trim())));
                }
                section = Some(s);
                continue;
            }
            let Some(sec) = section else {
                return Err(cur.err(indent + 1, "content before the first section header"));
            };
            match sec {
                Section::Scenario | Section::Limits | Section::Mdp => {
                    let (key, value) = trimmed
                        .split_once('=')
                        .ok_or_else(|| cur.err(indent + 1, "expected `key = value`"))?;
                    let key = key.trim();
                    let value = value.trim();
                    let vcol = indent + trimmed.find('=').unwrap() + 2;
                    let tok = Token { text: value, col: vcol };
                    let num = || cur.number(&tok, value, 0);
                    match (sec, key) {
                        (Section::Scenario, "name") => name = value.trim_matches('"').to_string(),
                        (Section::Scenario, "base_kva") => base_kva = num()?,
                        (Section::Scenario, "base_kv") => base_kv = num()?,
                        (Section::Limits, "h_min") => h_min = num()?,
                        (Section::Limits, "h_max") => h_max = num()?,
                        (Section::Mdp, "horizon") => {
                            let v = num()?;
                            if v < 1.0 || v.fract() != 0.0 {
                                return Err(cur.err(vcol, "horizon must be a positive integer"));
                            }
                            mdp.horizon = v as usize;
                        }
                        (Section::Mdp, "gamma") => mdp.gamma = num()?,
                        (Section::Mdp, "w_p") => mdp.w_p = num()?,
                        (Section::Mdp, "delta_t") => mdp.delta_t = num()?,
                        (Section::Mdp, "dg_shutdown") => {
                            mdp.dg_shutdown_enabled = match value {
                                "true" => true,
                                "false" => false,
                                _ => return Err(cur.err(vcol, "expected true or false")),
                            }
                        }
                        _ => return Err(cur.err(indent + 1, format!("unknown key {key:?}"))),
                    }
                }
                Section::Bus => {
                    let row = Row::split(&cur, tokenize(content))?;
                    row.expect_positional(&cur, &["id"])?;
                    row.check_keys(&cur, &["h_min", "h_max"], &[])?;
                    buses.push(PendingBus {
                        id: row.positional[0].text.to_string(),
                        h_min: row.num(&cur, "h_min")?,
                        h_max: row.num(&cur, "h_max")?,
                    });
                }
                Section::Line => {
                    let row = Row::split(&cur, tokenize(content))?;
                    row.expect_positional(&cur, &["from", "to"])?;
                    row.check_keys(&cur, &["r", "x", "switch"], &["r", "x"])?;
                    let r = row.num(&cur, "r")?.unwrap();
                    let x = row.num(&cur, "x")?.unwrap();
                    let switch = row.get("switch").map(|(_, v)| v.to_string());
                    let at = |i: usize| PendingRef {
                        line: cur.line,
                        name: row.positional[i].text.to_string(),
                    };
                    lines.push((at(0), at(1), r, x, switch));
                }
                Section::Load => {
                    let row = Row::split(&cur, tokenize(content))?;
                    row.expect_positional(&cur, &["id"])?;
                    row.check_keys(&cur, &["bus", "p", "q"], &["bus", "p"])?;
                    let bus = PendingRef {
                        line: cur.line,
                        name: row.get("bus").unwrap().1.to_string(),
                    };
                    let p = row.num(&cur, "p")?.unwrap();
                    let q = row.num(&cur, "q")?.unwrap_or(0.0);
                    loads.push((row.positional[0].text.to_string(), bus, p, q));
                }
                Section::Source => {
                    let row = Row::split(&cur, tokenize(content))?;
                    row.expect_positional(&cur, &["id"])?;
                    row.check_keys(
                        &cur,
                        &["bus", "kind", "capacity", "allowed_cells"],
                        &["bus", "kind", "capacity"],
                    )?;
                    let (ktok, kind) = row.get("kind").unwrap();
                    let kind = match kind {
                        "substation" => SourceKind::Substation,
                        "dg" => SourceKind::Dg,
                        other => {
                            return Err(cur.err(ktok.col + 5, format!("unknown source kind {other:?}")));
                        }
                    };
                    let allowed = match row.get("allowed_cells") {
                        None => None,
                        Some((tok, v)) => Some(parse_cell_list(&cur, tok, v)?),
                    };
                    let bus = PendingRef {
                        line: cur.line,
                        name: row.get("bus").unwrap().1.to_string(),
                    };
                    let capacity = row.num(&cur, "capacity")?.unwrap();
                    sources.push((row.positional[0].text.to_string(), bus, kind, capacity, allowed));
                }
            }
        }

        let bus_names: Vec<&str> = buses.iter().map(|b| b.id.as_str()).collect();
        let resolve = |r: &PendingRef, what: &str| -> Result<usize> {
            bus_names
                .iter()
                .position(|b| *b == r.name)
                .ok_or_else(|| Error::Semantic(format!("line {}: {what} references unknown bus {:?}", r.line, r.name)))
        };
        let grid = GridSpec {
            base_kva,
            base_kv,
            buses: buses
                .iter()
                .map(|b| Bus {
                    id: b.id.clone(),
                    h_min: b.h_min.unwrap_or(h_min),
                    h_max: b.h_max.unwrap_or(h_max),
                })
                .collect(),
            lines: lines
                .iter()
                .map(|(a, b, r, x, sw)| {
                    Ok(Line {
                        from: resolve(a, "line")?,
                        to: resolve(b, "line")?,
                        r: *r,
                        x: *x,
                        switch: sw.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            loads: loads
                .iter()
                .map(|(id, bus, p, q)| {
                    Ok(Load {
                        id: id.clone(),
                        bus: resolve(bus, &format!("load {id}"))?,
                        p_kw: *p,
                        q_kvar: *q,
                    })
                })
                .collect::<Result<_>>()?,
            sources: sources
                .iter()
                .map(|(id, bus, kind, cap, allowed)| {
                    Ok(Source {
                        id: id.clone(),
                        bus: resolve(bus, &format!("source {id}"))?,
                        kind: *kind,
                        capacity_kw: *cap,
                        allowed_cells: allowed.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        }
        .validated()?;
        mdp.validate()?;
        Ok(Self { name, grid, mdp })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn parse_cell_list(cur: &Cursor, tok: &Token, value: &str) -> Result<BTreeSet<usize>> {
    let col = tok.col + "allowed_cells=".len();
    let inner = value
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| cur.err(col, "expected a list like [2, 3]"))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| cur.err(col, format!("bad cell id {s:?}")))
        })
        .collect()
}
