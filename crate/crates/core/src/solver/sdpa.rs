//! SDPA sparse format (`.dat-s`) export/import and the SDPA solution layout.
//!
//! SDPA solves `min Σ c_k x_k s.t. Σ F_k x_k - F_0 ⪰ 0`. Our blocks read
//! `G_0 + Σ z_k G_k ⪯ 0`, so files carry `F_0 = G_0` and `F_k = -G_k`.
//! Header comments (`*` lines) carry the variable names and bound semantics
//! so that a problem survives a round trip.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{finalize, SolveResult, SolveStatus, SolverConfig};
use crate::error::{LipError, Result};
use crate::sdp::{AffineLmiBlock, BoundSemantics, SdpProblem};

const SEMANTICS: [BoundSemantics; 6] = [
    BoundSemantics::SqrtRhoL2,
    BoundSemantics::RhoLinfL1,
    BoundSemantics::SqrtRhoL2Residual,
    BoundSemantics::SqrtRhoL2Deq,
    BoundSemantics::ExpHalfRhoL2Node,
    BoundSemantics::Feasibility,
];

/// Shortest round-trip decimal, switching to exponent form for extreme magnitudes.
fn num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn is_diag_block(b: &AffineLmiBlock) -> bool {
    b.size == 1 || b.is_diagonal()
}

/// Renders a problem in SDPA sparse format.
pub fn write_sdpa(problem: &SdpProblem) -> Result<String> {
    problem.validate()?;
    if problem.blocks.is_empty() {
        return Err(LipError::Value("cannot export a problem without blocks".into()));
    }
    if problem.num_vars == 0 {
        return Err(LipError::Value("SDPA files need at least one variable".into()));
    }
    let mut s = String::new();
    s.push_str("* lipcert semidefinite program\n");
    s.push_str("* convention: sum_k F_k x_k - F_0 >= 0 (F_0 = G_0, F_k = -G_k for blocks G_0 + sum_k z_k G_k <= 0)\n");
    let _ = writeln!(s, "* semantics {}", problem.bound_semantics.name());
    if let Some(r) = problem.rho_index {
        let _ = writeln!(s, "* rho {}", r + 1);
    }
    for (k, name) in problem.var_names.iter().enumerate() {
        let _ = writeln!(s, "* var {} {}", k + 1, name);
    }
    let _ = writeln!(s, "{}", problem.num_vars);
    let _ = writeln!(s, "{}", problem.blocks.len());
    let sizes: Vec<String> = problem
        .blocks
        .iter()
        .map(|b| if is_diag_block(b) { format!("-{}", b.size) } else { b.size.to_string() })
        .collect();
    let _ = writeln!(s, "{}", sizes.join(" "));
    let obj: Vec<String> = problem.objective.iter().map(|v| num(*v)).collect();
    let _ = writeln!(s, "{}", obj.join(" "));

    let emit = |s: &mut String, k: usize, blk: usize, m: &DMatrix<f64>, sign: f64, diag: bool| {
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                if diag && i != j {
                    continue;
                }
                let v = sign * m[(i, j)];
                if v != 0.0 {
                    let _ = writeln!(s, "{} {} {} {} {}", k, blk + 1, i + 1, j + 1, num(v));
                }
            }
        }
    };
    for (bi, b) in problem.blocks.iter().enumerate() {
        emit(&mut s, 0, bi, &b.f0, 1.0, is_diag_block(b));
    }
    for k in 0..problem.num_vars {
        for (bi, b) in problem.blocks.iter().enumerate() {
            if let Some((_, m)) = b.terms.iter().find(|(v, _)| *v == k) {
                emit(&mut s, k + 1, bi, m, -1.0, is_diag_block(b));
            }
        }
    }
    Ok(s)
}

pub fn export_sdpa(problem: &SdpProblem, path: impl AsRef<Path>) -> Result<()> {
    let text = write_sdpa(problem)?;
    fs::write(path, text)?;
    Ok(())
}

fn numbers(line: &str) -> Vec<f64> {
    line.split(|c: char| c.is_whitespace() || "{}(),".contains(c))
        .filter_map(|t| t.parse::<f64>().ok())
        .collect()
}

fn parse_int(v: f64, what: &str) -> Result<i64> {
    if v.fract() != 0.0 {
        return Err(LipError::Parse(format!("{what} must be an integer, got {v}")));
    }
    Ok(v as i64)
}

/// Parses an SDPA sparse file back into a problem.
pub fn parse_sdpa(text: &str) -> Result<SdpProblem> {
    let mut semantics = BoundSemantics::Feasibility;
    let mut rho = None;
    let mut names: Vec<(usize, String)> = Vec::new();
    let mut body = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(c) = t.strip_prefix('*').or_else(|| t.strip_prefix('"')) {
            let parts: Vec<&str> = c.split_whitespace().collect();
            match parts.as_slice() {
                ["semantics", s] => {
                    semantics = *SEMANTICS
                        .iter()
                        .find(|x| x.name() == *s)
                        .ok_or_else(|| LipError::Parse(format!("unknown semantics {s}")))?;
                }
                ["rho", k] => rho = k.parse::<usize>().ok().and_then(|k| k.checked_sub(1)),
                ["var", k, name] => {
                    if let Some(k) = k.parse::<usize>().ok().and_then(|k| k.checked_sub(1)) {
                        names.push((k, (*name).to_string()));
                    }
                }
                _ => {}
            }
            continue;
        }
        body.push(t);
    }
    if body.len() < 4 {
        return Err(LipError::Parse("SDPA file is missing header lines".into()));
    }
    let first = |i: usize, what: &str| -> Result<i64> {
        let v = numbers(body[i]);
        parse_int(*v.first().ok_or_else(|| LipError::Parse(format!("missing {what}")))?, what)
    };
    let m = first(0, "mDIM")?;
    let nblock = first(1, "nBLOCK")?;
    if m < 1 || nblock < 1 {
        return Err(LipError::Parse("mDIM and nBLOCK must be positive".into()));
    }
    let (m, nblock) = (m as usize, nblock as usize);
    let sizes = numbers(body[2]);
    if sizes.len() < nblock {
        return Err(LipError::Parse("block structure line is too short".into()));
    }
    let sizes: Vec<i64> = sizes[..nblock].iter().map(|v| parse_int(*v, "block size")).collect::<Result<_>>()?;
    if sizes.contains(&0) {
        return Err(LipError::Parse("zero block size".into()));
    }
    let obj = numbers(body[3]);
    if obj.len() < m {
        return Err(LipError::Parse("objective line is too short".into()));
    }

    let mut problem = SdpProblem::new(semantics);
    for k in 0..m {
        let name = names.iter().find(|(i, _)| *i == k).map_or_else(|| format!("x{}", k + 1), |(_, n)| n.clone());
        let idx = problem.add_var(name);
        problem.objective[idx] = obj[k];
    }
    problem.rho_index = rho.filter(|r| *r < m);
    let mut blocks: Vec<AffineLmiBlock> =
        sizes.iter().map(|s| AffineLmiBlock::zeros(s.unsigned_abs() as usize)).collect();
    let mut coefs: Vec<Vec<DMatrix<f64>>> = sizes
        .iter()
        .map(|s| {
            let n = s.unsigned_abs() as usize;
            vec![DMatrix::zeros(n, n); m]
        })
        .collect();
    for line in &body[4..] {
        let v = numbers(line);
        if v.len() != 5 {
            return Err(LipError::Parse(format!("bad entry line: {line}")));
        }
        let k = parse_int(v[0], "matrix index")?;
        let blk = parse_int(v[1], "block index")?;
        let i = parse_int(v[2], "row")?;
        let j = parse_int(v[3], "column")?;
        if k < 0 || k as usize > m || blk < 1 || blk as usize > nblock {
            return Err(LipError::Parse(format!("entry out of range: {line}")));
        }
        let b = blk as usize - 1;
        let n = blocks[b].size as i64;
        if i < 1 || j < 1 || i > n || j > n || (sizes[b] < 0 && i != j) {
            return Err(LipError::Parse(format!("entry index out of range: {line}")));
        }
        let (i, j) = (i as usize - 1, j as usize - 1);
        let target = if k == 0 { &mut blocks[b].f0 } else { &mut coefs[b][k as usize - 1] };
        let val = if k == 0 { v[4] } else { -v[4] };
        target[(i, j)] = val;
        target[(j, i)] = val;
    }
    for (b, mut block) in blocks.into_iter().enumerate() {
        for (k, c) in coefs[b].drain(..).enumerate() {
            block.add_term(k, c);
        }
        problem.add_block(block);
    }
    problem.validate()?;
    Ok(problem)
}

pub fn import_sdpa(path: impl AsRef<Path>) -> Result<SdpProblem> {
    parse_sdpa(&fs::read_to_string(path)?)
}

fn sci(v: f64) -> String {
    format!("{v:+.16e}")
}

fn write_block(s: &mut String, b: &AffineLmiBlock, m: &DMatrix<f64>) {
    if is_diag_block(b) {
        let d: Vec<String> = (0..b.size).map(|i| sci(m[(i, i)])).collect();
        let _ = writeln!(s, "{{{}}}", d.join(","));
    } else {
        let rows: Vec<String> = (0..b.size)
            .map(|i| {
                let r: Vec<String> = (0..b.size).map(|j| sci(m[(i, j)])).collect();
                format!("{{{}}}", r.join(","))
            })
            .collect();
        let _ = writeln!(s, "{{ {} }}", rows.join(", "));
    }
}

fn phase(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Optimal => "pdOPT",
        SolveStatus::Infeasible => "pINF_dFEAS",
        SolveStatus::Unbounded => "pUNBD",
        SolveStatus::MaxIterations | SolveStatus::NumericalError => "noINFO",
    }
}

/// Renders a solution in SDPA's output layout (`xVec`, `xMat` slack, `yMat` multipliers).
pub fn write_sdpa_solution(problem: &SdpProblem, result: &SolveResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "phase.value = {}", phase(result.status));
    let _ = writeln!(s, "objValPrimal = {}", sci(result.primal_obj));
    let _ = writeln!(s, "objValDual   = {}", sci(result.dual_obj));
    s.push_str("xVec = \n");
    let x: Vec<String> = result.z.iter().map(|v| sci(*v)).collect();
    let _ = writeln!(s, "{{{}}}", x.join(","));
    s.push_str("xMat = \n{\n");
    for b in &problem.blocks {
        write_block(&mut s, b, &(-b.evaluate(&result.z)));
    }
    s.push_str("}\nyMat = \n{\n");
    for (b, m) in problem.blocks.iter().zip(&result.dual_blocks) {
        write_block(&mut s, b, m);
    }
    s.push_str("}\n");
    s
}

#[derive(Debug)]
enum Node {
    Num(f64),
    List(Vec<Node>),
}

struct BraceParser<'a> {
    chars: &'a [u8],
    pos: usize,
}

impl BraceParser<'_> {
    fn skip(&mut self) {
        while self.pos < self.chars.len() && (self.chars[self.pos].is_ascii_whitespace() || self.chars[self.pos] == b',') {
            self.pos += 1;
        }
    }

    fn node(&mut self) -> Result<Node> {
        self.skip();
        match self.chars.get(self.pos) {
            None => Err(LipError::Parse("unexpected end of solution file".into())),
            Some(b'{') => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip();
                    match self.chars.get(self.pos) {
                        None => return Err(LipError::Parse("unterminated brace in solution file".into())),
                        Some(b'}') => {
                            self.pos += 1;
                            return Ok(Node::List(items));
                        }
                        _ => items.push(self.node()?),
                    }
                }
            }
            Some(_) => {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && !self.chars[self.pos].is_ascii_whitespace()
                    && !matches!(self.chars[self.pos], b',' | b'{' | b'}')
                {
                    self.pos += 1;
                }
                let tok = std::str::from_utf8(&self.chars[start..self.pos]).unwrap_or("");
                tok.parse::<f64>()
                    .map(Node::Num)
                    .map_err(|_| LipError::Parse(format!("bad number {tok:?} in solution file")))
            }
        }
    }
}

fn section(text: &str, key: &str) -> Result<Node> {
    let at = text
        .find(key)
        .ok_or_else(|| LipError::Parse(format!("solution file has no {key}")))?;
    let rest = &text[at + key.len()..];
    let eq = rest
        .find('=')
        .ok_or_else(|| LipError::Parse(format!("{key} has no '='")))?;
    let mut p = BraceParser { chars: rest[eq + 1..].as_bytes(), pos: 0 };
    p.node()
}

fn as_vec(node: &Node, what: &str) -> Result<Vec<f64>> {
    match node {
        Node::List(items) => items
            .iter()
            .map(|n| match n {
                Node::Num(v) => Ok(*v),
                Node::List(_) => Err(LipError::Parse(format!("{what}: expected numbers"))),
            })
            .collect(),
        Node::Num(_) => Err(LipError::Parse(format!("{what}: expected a list"))),
    }
}

fn as_block(node: &Node, size: usize, what: &str) -> Result<DMatrix<f64>> {
    let Node::List(items) = node else {
        return Err(LipError::Parse(format!("{what}: expected a block")));
    };
    if items.iter().all(|n| matches!(n, Node::Num(_))) {
        let d = as_vec(node, what)?;
        if d.len() != size {
            return Err(LipError::Parse(format!("{what}: expected {size} diagonal entries, got {}", d.len())));
        }
        return Ok(DMatrix::from_diagonal(&DVector::from_vec(d)));
    }
    if items.len() != size {
        return Err(LipError::Parse(format!("{what}: expected {size} rows, got {}", items.len())));
    }
    let mut m = DMatrix::zeros(size, size);
    for (i, row) in items.iter().enumerate() {
        let r = as_vec(row, what)?;
        if r.len() != size {
            return Err(LipError::Parse(format!("{what}: row {i} has {} entries", r.len())));
        }
        for (j, v) in r.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Parses a solution in SDPA output layout and re-derives every residual locally.
pub fn parse_sdpa_solution(text: &str, problem: &SdpProblem, config: &SolverConfig) -> Result<SolveResult> {
    let z = as_vec(&section(text, "xVec")?, "xVec")?;
    if z.len() != problem.num_vars {
        return Err(LipError::Parse(format!("xVec has {} entries, expected {}", z.len(), problem.num_vars)));
    }
    let Node::List(blocks) = section(text, "yMat")? else {
        return Err(LipError::Parse("yMat must be a list of blocks".into()));
    };
    if blocks.len() != problem.blocks.len() {
        return Err(LipError::Parse(format!(
            "yMat has {} blocks, expected {}",
            blocks.len(),
            problem.blocks.len()
        )));
    }
    let dual = blocks
        .iter()
        .zip(&problem.blocks)
        .enumerate()
        .map(|(i, (n, b))| as_block(n, b.size, &format!("yMat block {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let status = match text.find("phase.value").map(|i| &text[i..]) {
        None => SolveStatus::Optimal,
        Some(rest) => {
            let value = rest.split('=').nth(1).and_then(|v| v.split_whitespace().next()).unwrap_or("");
            match value {
                "pdOPT" => SolveStatus::Optimal,
                "pINF_dFEAS" | "pdINF" | "dUNBD" => SolveStatus::Infeasible,
                "pUNBD" | "pFEAS_dINF" => SolveStatus::Unbounded,
                _ => SolveStatus::NumericalError,
            }
        }
    };
    Ok(finalize(problem, config, status, DVector::from_vec(z), dual, 0))
}

pub fn import_sdpa_solution(path: impl AsRef<Path>, problem: &SdpProblem) -> Result<SolveResult> {
    parse_sdpa_solution(&fs::read_to_string(path)?, problem, &SolverConfig::default())
}
