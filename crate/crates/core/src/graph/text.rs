//! Line-oriented graph format.
//!
//! ```text
//! graph v1
//! input $0 f32
//! %0 pow f32 $0 k=3
//! %1 fused f16 %0 $0 name=fused0 arity=2
//!   r2 = mul f16 r0 r1
//!   out r2
//! output %1
//! ```
//!
//! Fused kernel bodies follow their node as indented `rN = …` lines and end
//! with an `out` line.

use std::fmt::Write;
use std::sync::Arc;

use super::{Attrs, DTypeTag, ExprGraph, FusedKernel, GraphError, Instr, Node, Op, OpKind, Src};

const HEADER: &str = "graph v1";

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn write_attrs(out: &mut String, a: &Attrs) {
    if let Some(k) = a.k {
        let _ = write!(out, " k={k}");
    }
    if let Some(o) = a.offset {
        let _ = write!(out, " offset={o}");
    }
    if let Some(e) = a.eps {
        let _ = write!(out, " eps={e}");
    }
    if a.rowwise {
        out.push_str(" rowwise");
    }
    if let Some(ax) = &a.axes {
        let _ = write!(out, " axes={}", join(ax));
    }
    if let Some(s) = &a.shape {
        let _ = write!(out, " shape={}", join(s));
    }
}

pub(super) fn dump(g: &ExprGraph) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for (i, t) in g.inputs().iter().enumerate() {
        let _ = writeln!(out, "input ${i} {t}");
    }
    for (i, n) in g.nodes().iter().enumerate() {
        let _ = write!(out, "%{i} {} {}", n.kind(), n.dtype);
        for s in &n.inputs {
            let _ = write!(out, " {s}");
        }
        write_attrs(&mut out, &n.attrs);
        if let Op::Fused(k) = &n.op {
            let _ = write!(out, " name={} arity={}", k.name, k.arity);
            out.push('\n');
            for (j, ins) in k.body.iter().enumerate() {
                let _ = write!(out, "  r{} = {} {}", k.arity + j, ins.kind, ins.dtype);
                for a in &ins.args {
                    let _ = write!(out, " r{a}");
                }
                write_attrs(&mut out, &ins.attrs);
                out.push('\n');
            }
            let regs: Vec<String> = k.outputs.iter().map(|r| format!("r{r}")).collect();
            let _ = writeln!(out, "  out {}", regs.join(" "));
        } else {
            out.push('\n');
        }
    }
    let outs: Vec<String> = g.outputs().iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "output {}", outs.join(" "));
    out
}

struct Parser {
    line: usize,
}

impl Parser {
    fn err(&self, msg: impl Into<String>) -> GraphError {
        GraphError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn src(&self, tok: &str) -> Result<Src, GraphError> {
        let bad = || self.err(format!("bad operand `{tok}`"));
        if let Some(r) = tok.strip_prefix('$') {
            r.parse().map(Src::Input).map_err(|_| bad())
        } else if let Some(r) = tok.strip_prefix('%') {
            r.parse().map(Src::Node).map_err(|_| bad())
        } else {
            Err(bad())
        }
    }

    fn reg(&self, tok: &str) -> Result<usize, GraphError> {
        tok.strip_prefix('r')
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| self.err(format!("bad register `{tok}`")))
    }

    fn list(&self, v: &str) -> Result<Vec<usize>, GraphError> {
        v.split(',')
            .map(|x| x.parse().map_err(|_| self.err(format!("bad list `{v}`"))))
            .collect()
    }

    fn float(&self, v: &str) -> Result<f32, GraphError> {
        v.parse().map_err(|_| self.err(format!("bad number `{v}`")))
    }

    /// Parses one attribute token; returns false if the token is not one.
    fn attr(&self, a: &mut Attrs, tok: &str) -> Result<bool, GraphError> {
        if tok == "rowwise" {
            a.rowwise = true;
            return Ok(true);
        }
        let Some((key, v)) = tok.split_once('=') else {
            return Ok(false);
        };
        match key {
            "k" => a.k = Some(self.float(v)?),
            "offset" => a.offset = Some(self.float(v)?),
            "eps" => a.eps = Some(self.float(v)?),
            "axes" => a.axes = Some(self.list(v)?),
            "shape" => a.shape = Some(self.list(v)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn kind(&self, tok: &str) -> Result<OpKind, GraphError> {
        tok.parse().map_err(|e: String| self.err(e))
    }

    fn dtype(&self, tok: &str) -> Result<DTypeTag, GraphError> {
        DTypeTag::parse(tok).ok_or_else(|| self.err(format!("bad dtype `{tok}`")))
    }
}

pub(super) fn load(s: &str) -> Result<ExprGraph, GraphError> {
    let mut p = Parser { line: 0 };
    let mut inputs = Vec::new();
    let mut nodes: Vec<Node> = Vec::new();
    let mut outputs = None;
    // fused node under construction: (node, kernel name, arity, body)
    let mut pending: Option<(Node, String, usize, Vec<Instr>)> = None;
    let mut saw_header = false;

    for (ln, raw) in s.lines().enumerate() {
        p.line = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != HEADER {
                return Err(p.err(format!("expected `{HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if let Some((_, _, arity, body)) = pending.as_mut() {
            if toks[0] == "out" {
                let outs = toks[1..].iter().map(|t| p.reg(t)).collect::<Result<Vec<_>, _>>()?;
                let (mut node, name, arity, body) = pending.take().expect("pending");
                node.op = Op::Fused(Arc::new(FusedKernel {
                    name,
                    arity,
                    body,
                    outputs: outs,
                }));
                nodes.push(node);
                continue;
            }
            if toks.len() < 4 || toks[1] != "=" {
                return Err(p.err("expected `rN = kind dtype args…` or `out`"));
            }
            if p.reg(toks[0])? != *arity + body.len() {
                return Err(p.err("kernel registers must be numbered consecutively"));
            }
            let mut ins = Instr {
                kind: p.kind(toks[2])?,
                args: Vec::new(),
                attrs: Attrs::default(),
                dtype: p.dtype(toks[3])?,
            };
            for t in &toks[4..] {
                if !p.attr(&mut ins.attrs, t)? {
                    let r = p.reg(t)?;
                    if r >= *arity + body.len() {
                        return Err(p.err(format!("register r{r} used before definition")));
                    }
                    ins.args.push(r);
                }
            }
            body.push(ins);
            continue;
        }
        match toks[0] {
            "input" => {
                if toks.len() != 3 || p.src(toks[1])? != Src::Input(inputs.len()) {
                    return Err(p.err("expected `input $N dtype` in order"));
                }
                inputs.push(p.dtype(toks[2])?);
            }
            "output" => {
                outputs = Some(toks[1..].iter().map(|t| p.src(t)).collect::<Result<Vec<_>, _>>()?);
            }
            t if t.starts_with('%') => {
                if p.src(t)? != Src::Node(nodes.len()) || toks.len() < 3 {
                    return Err(p.err("nodes must be numbered consecutively"));
                }
                let kind = p.kind(toks[1])?;
                let mut node = Node {
                    op: Op::Prim(kind),
                    inputs: Vec::new(),
                    attrs: Attrs::default(),
                    dtype: p.dtype(toks[2])?,
                };
                let mut name = None;
                let mut arity = None;
                for t in &toks[3..] {
                    if let Some(v) = t.strip_prefix("name=") {
                        name = Some(v.to_string());
                    } else if let Some(v) = t.strip_prefix("arity=") {
                        arity = Some(v.parse().map_err(|_| p.err("bad arity"))?);
                    } else if !p.attr(&mut node.attrs, t)? {
                        node.inputs.push(p.src(t)?);
                    }
                }
                if kind == OpKind::Fused {
                    let (Some(name), Some(arity)) = (name, arity) else {
                        return Err(p.err("fused node needs name= and arity="));
                    };
                    pending = Some((node, name, arity, Vec::new()));
                } else {
                    nodes.push(node);
                }
            }
            other => return Err(p.err(format!("unexpected `{other}`"))),
        }
    }
    if pending.is_some() {
        return Err(p.err("unterminated fused kernel body"));
    }
    let outputs = outputs.ok_or_else(|| p.err("missing `output` line"))?;
    ExprGraph::from_parts(inputs, nodes, outputs)
}
