use std::collections::BTreeMap;
use std::fs;

use anyhow::{bail, Context, Result};
use deskbert::graph::{
    amp_rewrite, build_gelu_unfused, build_layer_norm_unfused, build_optimizer_step_unfused, fuse_elementwise,
    AdamParams, ExprGraph, SafetyTable,
};

/// A built-in graph name or a path to a graph text file.
pub fn load_graph(spec: &str) -> Result<ExprGraph> {
    Ok(match spec {
        "gelu" => build_gelu_unfused(),
        "layernorm" => build_layer_norm_unfused(1e-5),
        "adam" => build_optimizer_step_unfused(&AdamParams::default()),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading graph {path}"))?;
            ExprGraph::load(&text)?
        }
    })
}

/// Optionally AMP-rewrite, then optionally fuse.
pub fn transform(g: ExprGraph, amp: bool, fuse: bool) -> Result<ExprGraph> {
    let g = if amp { amp_rewrite(&g, &SafetyTable::default())? } else { g };
    let g = if fuse { fuse_elementwise(&g) } else { g };
    g.validate()?;
    Ok(g)
}

/// Node count per operator kind.
pub fn histogram(g: &ExprGraph) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for n in g.nodes() {
        *h.entry(n.kind().name().to_string()).or_default() += 1;
    }
    h
}

/// Text dump followed by a `# nodes` summary.
pub fn report(spec: &str, amp: bool, fuse: bool) -> Result<String> {
    let before = load_graph(spec)?;
    if before.is_empty() && before.outputs().is_empty() {
        bail!("graph `{spec}` is empty");
    }
    let after = transform(before.clone(), amp, fuse)?;
    let mut s = after.dump();
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s.push_str(&format!("# nodes {} -> {}\n", before.len(), after.len()));
    for (k, n) in histogram(&after) {
        s.push_str(&format!("# {k} {n}\n"));
    }
    Ok(s)
}
