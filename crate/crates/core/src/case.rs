//! Grid case files and load profiles.
//!
//! Two case formats are understood: a subset of the MATPOWER case text format
//! (`mpc.baseMVA`, `mpc.bus`, `mpc.branch`; every other assignment is skipped)
//! and a native JSON schema:
//!
//! ```json
//! {"case_name": "...", "base_mva": 100.0,
//!  "buses": [{"id": 1, "base_load": 0.217}],
//!  "branches": [{"id": 0, "from": 1, "to": 2, "x": 0.059}],
//!  "slack_bus": 1}
//! ```
//!
//! Bus loads are stored in per-unit on the case MVA base.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type BusId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: BusId,
    /// Active power demand (p.u.).
    pub base_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub id: usize,
    #[serde(rename = "from")]
    pub from_bus: BusId,
    #[serde(rename = "to")]
    pub to_bus: BusId,
    /// Series reactance (p.u.).
    #[serde(rename = "x")]
    pub reactance: f64,
}

/// A validated DC network: buses, oriented branches and the slack bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCase {
    pub case_name: String,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub slack_bus: BusId,
}

impl GridCase {
    /// Builds a case and checks every invariant.
    pub fn new(
        case_name: impl Into<String>,
        base_mva: f64,
        buses: Vec<BusRecord>,
        branches: Vec<BranchRecord>,
        slack_bus: BusId,
    ) -> Result<Self> {
        let case = GridCase {
            case_name: case_name.into(),
            base_mva,
            buses,
            branches,
            slack_bus,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_mva.is_finite() && self.base_mva > 0.0) {
            return Err(Error::InvalidCase(format!(
                "base_mva must be positive, got {}",
                self.base_mva
            )));
        }
        if self.buses.is_empty() {
            return Err(Error::InvalidCase("case has no buses".into()));
        }
        let mut seen = HashSet::new();
        for bus in &self.buses {
            if !seen.insert(bus.id) {
                return Err(Error::InvalidCase(format!("duplicate bus id {}", bus.id)));
            }
            if !bus.base_load.is_finite() {
                return Err(Error::InvalidCase(format!(
                    "bus {} has non-finite load",
                    bus.id
                )));
            }
        }
        for (pos, br) in self.branches.iter().enumerate() {
            if br.id != pos {
                return Err(Error::InvalidCase(format!(
                    "branch at position {pos} has id {}; ids must be 0..m-1 in order",
                    br.id
                )));
            }
            for end in [br.from_bus, br.to_bus] {
                if !seen.contains(&end) {
                    return Err(Error::InvalidCase(format!(
                        "branch {} references unknown bus {end}",
                        br.id
                    )));
                }
            }
            if br.from_bus == br.to_bus {
                return Err(Error::InvalidCase(format!(
                    "branch {} is a self-loop on bus {}",
                    br.id, br.from_bus
                )));
            }
            if !(br.reactance > 0.0) || !br.reactance.is_finite() {
                return Err(Error::NonPositiveReactance {
                    branch: br.id,
                    value: br.reactance,
                });
            }
        }
        if !seen.contains(&self.slack_bus) {
            return Err(Error::Slack(format!(
                "slack bus {} is not a bus of the case",
                self.slack_bus
            )));
        }
        let components = self.component_count();
        if components != 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(())
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Position of a bus id in `buses`.
    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> usize {
        self.bus_index(self.slack_bus)
            .expect("validated case has a slack bus")
    }

    pub fn reactances(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.reactance).collect()
    }

    /// Branch endpoints as bus positions.
    pub fn branch_endpoints(&self) -> Vec<(usize, usize)> {
        let index: HashMap<BusId, usize> = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();
        self.branches
            .iter()
            .map(|b| (index[&b.from_bus], index[&b.to_bus]))
            .collect()
    }

    /// Number of independent states (bus angles with the slack removed).
    pub fn n_states(&self) -> usize {
        self.buses.len() - 1
    }

    fn component_count(&self) -> usize {
        let index: HashMap<BusId, usize> = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();
        let mut parent: Vec<usize> = (0..self.buses.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = self.buses.len();
        for br in &self.branches {
            let (Some(&a), Some(&b)) = (index.get(&br.from_bus), index.get(&br.to_bus)) else {
                continue;
            };
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                components -= 1;
            }
        }
        components
    }
}

// ---------------------------------------------------------------------------
// MATPOWER text
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Str,
    Sym(char),
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    for (line_no, raw_line) in text.lines().enumerate() {
        let line = line_no + 1;
        let chars: Vec<char> = raw_line.chars().collect();
        let trimmed = raw_line.trim_start();
        if trimmed.starts_with("function") {
            continue;
        }
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            if c == '%' || c == '#' {
                break;
            }
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '.' && chars[i..].starts_with(&['.', '.', '.']) {
                // line continuation: drop the rest of the line and the newline
                i = chars.len() + 1;
                break;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.')
                {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let lower = word.to_ascii_lowercase();
                let tok = if lower == "inf" || lower == "nan" {
                    Tok::Number(if lower == "inf" { f64::INFINITY } else { f64::NAN })
                } else {
                    Tok::Ident(word)
                };
                out.push(Token { tok, line, column });
                continue;
            }
            if c.is_ascii_digit()
                || ((c == '-' || c == '+' || c == '.')
                    && chars
                        .get(i + 1)
                        .is_some_and(|n| n.is_ascii_digit() || *n == '.' || n.is_ascii_alphabetic()))
            {
                let start = i;
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    let prev = chars[i - 1];
                    if d.is_ascii_alphanumeric()
                        || d == '.'
                        || ((d == '-' || d == '+') && (prev == 'e' || prev == 'E'))
                    {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let word: String = chars[start..i].iter().collect();
                let value: f64 = word
                    .parse()
                    .map_err(|_| syntax(line, column, format!("invalid number `{word}`")))?;
                out.push(Token {
                    tok: Tok::Number(value),
                    line,
                    column,
                });
                continue;
            }
            if c == '\'' || c == '"' {
                let quote = c;
                i += 1;
                while i < chars.len() && chars[i] != quote {
                    i += 1;
                }
                if i >= chars.len() {
                    return Err(syntax(line, column, "unterminated string literal"));
                }
                i += 1;
                out.push(Token {
                    tok: Tok::Str,
                    line,
                    column,
                });
                continue;
            }
            if "=;[]{},".contains(c) {
                out.push(Token {
                    tok: Tok::Sym(c),
                    line,
                    column,
                });
                i += 1;
                continue;
            }
            return Err(syntax(line, column, format!("unexpected character `{c}`")));
        }
        if i <= chars.len() {
            out.push(Token {
                tok: Tok::Newline,
                line,
                column: chars.len() + 1,
            });
        }
    }
    Ok(out)
}

enum Value {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
    Other,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn eof_error(&self) -> Error {
        let (line, column) = self
            .toks
            .last()
            .map(|t| (t.line, t.column))
            .unwrap_or((1, 1));
        syntax(line, column, "unexpected end of input")
    }

    fn next(&mut self) -> Result<Token> {
        let t = self.toks.get(self.pos).cloned().ok_or_else(|| self.eof_error())?;
        self.pos += 1;
        Ok(t)
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek(), Some(Token { tok: Tok::Newline, .. })) {
            self.pos += 1;
        }
    }

    fn statement(&mut self) -> Result<Option<(String, Value, usize, usize)>> {
        self.skip_newlines();
        let Some(first) = self.peek().cloned() else {
            return Ok(None);
        };
        if first.tok == Tok::Sym(';') {
            self.pos += 1;
            return Ok(Some((String::new(), Value::Other, first.line, first.column)));
        }
        let Tok::Ident(name) = first.tok.clone() else {
            return Err(syntax(first.line, first.column, "expected an assignment"));
        };
        self.pos += 1;
        let eq = self.next()?;
        if eq.tok != Tok::Sym('=') {
            return Err(syntax(eq.line, eq.column, format!("expected `=` after `{name}`")));
        }
        let value = self.value()?;
        // optional terminator
        if let Some(t) = self.peek() {
            match t.tok {
                Tok::Sym(';') | Tok::Sym(',') | Tok::Newline => self.pos += 1,
                _ => {
                    return Err(syntax(t.line, t.column, "expected `;` or end of line"));
                }
            }
        }
        Ok(Some((name, value, first.line, first.column)))
    }

    fn value(&mut self) -> Result<Value> {
        let t = self.next()?;
        match t.tok {
            Tok::Number(v) => Ok(Value::Scalar(v)),
            Tok::Str => Ok(Value::Other),
            Tok::Sym('[') => self.matrix(t.line, t.column).map(Value::Matrix),
            Tok::Sym('{') => {
                let mut depth = 1;
                while depth > 0 {
                    let t = self.next()?;
                    match t.tok {
                        Tok::Sym('{') => depth += 1,
                        Tok::Sym('}') => depth -= 1,
                        _ => {}
                    }
                }
                Ok(Value::Other)
            }
            Tok::Ident(_) => Ok(Value::Other),
            _ => Err(syntax(t.line, t.column, "expected a value")),
        }
    }

    fn matrix(&mut self, line: usize, column: usize) -> Result<Vec<Vec<f64>>> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut row: Vec<f64> = Vec::new();
        let mut row_start = (line, column);
        loop {
            let t = self.next()?;
            match t.tok {
                Tok::Number(v) => {
                    if row.is_empty() {
                        row_start = (t.line, t.column);
                    }
                    row.push(v);
                }
                Tok::Sym(',') => {}
                Tok::Sym(';') | Tok::Newline | Tok::Sym(']') => {
                    if !row.is_empty() {
                        if let Some(first) = rows.first() {
                            if first.len() != row.len() {
                                return Err(syntax(
                                    row_start.0,
                                    row_start.1,
                                    format!(
                                        "row has {} columns, expected {}",
                                        row.len(),
                                        first.len()
                                    ),
                                ));
                            }
                        }
                        rows.push(std::mem::take(&mut row));
                    }
                    if t.tok == Tok::Sym(']') {
                        return Ok(rows);
                    }
                }
                _ => {
                    return Err(syntax(t.line, t.column, "unexpected token inside matrix"));
                }
            }
        }
    }
}

/// Parses MATPOWER case text.
///
/// Bus column 3 (PD, MW) becomes the base load in p.u.; branch columns 1, 2
/// and 4 give the endpoints and reactance; branches with status 0 are dropped
/// and the remaining ones renumbered in file order. The bus of type 3 is the
/// slack bus.
pub fn parse_matpower_case(text: &str) -> Result<GridCase> {
    let mut case_name = String::from("case");
    for line in text.lines() {
        let t = line.trim();
        if let Some(rest) = t.strip_prefix("function") {
            if let Some((_, name)) = rest.split_once('=') {
                let name = name.trim().trim_end_matches(';').trim();
                if !name.is_empty() {
                    case_name = name.to_string();
                }
            }
            break;
        }
    }

    let mut parser = Parser {
        toks: lex(text)?,
        pos: 0,
    };
    let mut base_mva = None;
    let mut bus = None;
    let mut branch = None;
    while let Some((name, value, line, column)) = parser.statement()? {
        match (name.as_str(), value) {
            ("mpc.baseMVA", Value::Scalar(v)) => base_mva = Some(v),
            ("mpc.baseMVA", _) => return Err(syntax(line, column, "mpc.baseMVA must be a scalar")),
            ("mpc.bus", Value::Matrix(m)) => bus = Some((m, line, column)),
            ("mpc.branch", Value::Matrix(m)) => branch = Some((m, line, column)),
            ("mpc.bus" | "mpc.branch", _) => {
                return Err(syntax(line, column, format!("{name} must be a matrix")))
            }
            _ => {}
        }
    }
    let (line, column) = parser
        .toks
        .last()
        .map(|t| (t.line, t.column))
        .unwrap_or((1, 1));
    let base_mva = base_mva.ok_or_else(|| syntax(line, column, "missing mpc.baseMVA"))?;
    let (bus, bus_line, bus_col) = bus.ok_or_else(|| syntax(line, column, "missing mpc.bus"))?;
    let (branch, br_line, br_col) =
        branch.ok_or_else(|| syntax(line, column, "missing mpc.branch"))?;

    if bus.first().is_some_and(|r| r.len() < 3) {
        return Err(syntax(bus_line, bus_col, "mpc.bus needs at least 3 columns"));
    }
    if branch.first().is_some_and(|r| r.len() < 4) {
        return Err(syntax(br_line, br_col, "mpc.branch needs at least 4 columns"));
    }

    let as_id = |v: f64, what: &str| -> Result<BusId> {
        if v.fract() == 0.0 && v >= 0.0 && v <= BusId::MAX as f64 {
            Ok(v as BusId)
        } else {
            Err(Error::InvalidCase(format!("{what} `{v}` is not a bus number")))
        }
    };

    let mut buses = Vec::with_capacity(bus.len());
    let mut slack = Vec::new();
    for row in &bus {
        let id = as_id(row[0], "bus id")?;
        if row[1] == 3.0 {
            slack.push(id);
        }
        buses.push(BusRecord {
            id,
            base_load: row[2] / base_mva,
        });
    }
    let slack_bus = match slack.as_slice() {
        [one] => *one,
        [] => return Err(Error::Slack("no bus of type 3 (reference)".into())),
        many => {
            return Err(Error::Slack(format!(
                "multiple reference buses: {many:?}"
            )))
        }
    };

    let mut branches = Vec::with_capacity(branch.len());
    for row in &branch {
        let in_service = row.get(10).map_or(true, |s| *s != 0.0);
        if !in_service {
            continue;
        }
        branches.push(BranchRecord {
            id: branches.len(),
            from_bus: as_id(row[0], "branch endpoint")?,
            to_bus: as_id(row[1], "branch endpoint")?,
            reactance: row[3],
        });
    }
    GridCase::new(case_name, base_mva, buses, branches, slack_bus)
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

pub fn parse_json_case(text: &str) -> Result<GridCase> {
    let case: GridCase =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    case.validate()?;
    Ok(case)
}

pub fn write_json_case(case: &GridCase) -> String {
    serde_json::to_string_pretty(case).expect("GridCase serializes")
}

/// Reads a case file, choosing the format from the extension (`.json` or
/// MATPOWER text otherwise).
pub fn read_case_file(path: &std::path::Path) -> Result<GridCase> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_json_case(&text)
    } else {
        parse_matpower_case(&text)
    }
}

// ---------------------------------------------------------------------------
// Load profiles
// ---------------------------------------------------------------------------

/// Per-timestep multipliers on the base loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub timestamps: Vec<u64>,
    pub scale_factors: Vec<f64>,
}

impl LoadProfile {
    pub fn new(scale_factors: Vec<f64>) -> Result<Self> {
        if scale_factors.is_empty() {
            return Err(Error::Profile("profile is empty".into()));
        }
        if let Some((i, v)) = scale_factors
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::Profile(format!(
                "scale factor {v} at row {i} is not positive"
            )));
        }
        Ok(LoadProfile {
            timestamps: (0..scale_factors.len() as u64).collect(),
            scale_factors,
        })
    }

    /// A flat profile of ones.
    pub fn constant(len: usize) -> Self {
        LoadProfile::new(vec![1.0; len.max(1)]).expect("ones are positive")
    }

    /// Daily sinusoid (period 96 steps, amplitude 0.1) with uniform jitter of
    /// ±0.05.
    pub fn synthetic(len: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, 0x10AD);
        let factors = (0..len.max(1))
            .map(|t| {
                let phase = 2.0 * std::f64::consts::PI * t as f64 / 96.0;
                1.0 + 0.1 * phase.sin() + rng.random_range(-0.05..0.05)
            })
            .collect();
        LoadProfile::new(factors).expect("synthetic factors are positive")
    }

    pub fn len(&self) -> usize {
        self.scale_factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale_factors.is_empty()
    }

    /// Factor for timestep `t`; the profile repeats when shorter than the
    /// simulation.
    pub fn factor(&self, t: usize) -> f64 {
        self.scale_factors[t % self.scale_factors.len()]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale_factor\n");
        for f in &self.scale_factors {
            let _ = writeln!(out, "{f}");
        }
        out
    }
}

/// Parses a profile with one factor per row. A non-numeric first row is taken
/// as a header; with several comma-separated columns the last one is used.
pub fn load_profile_csv(text: &str) -> Result<LoadProfile> {
    let mut factors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let field = line.rsplit(',').next().unwrap_or(line).trim();
        match field.parse::<f64>() {
            Ok(v) => factors.push(v),
            Err(_) if factors.is_empty() && i == 0 => continue,
            Err(_) => {
                return Err(Error::Profile(format!(
                    "line {}: `{field}` is not a number",
                    i + 1
                )))
            }
        }
    }
    LoadProfile::new(factors)
}
