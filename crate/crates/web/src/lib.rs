//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function returns a JSON string so the page needs nothing
//! beyond `JSON.parse`. The plain Rust functions behind them are tested
//! natively.

use deskbert::graph::{
    amp_rewrite, build_gelu_unfused, fuse_elementwise, interpret, DTypeTag, ExprGraph, GraphError,
    SafetyTable, Value,
};
use deskbert::half::Binary16;
use deskbert::perf::{scaling_point, standard_grid, PerfConfig, PerfConfigError};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub label: String,
    pub world: usize,
    pub efficiency: f64,
    pub factor: f64,
    pub throughput: f64,
    pub exposed: f64,
}

/// Weak scaling over the standard 1M1G..32M8G grid.
pub fn scaling(
    net_gbps: f64,
    accumulation: usize,
    overlap: f64,
    f16_exchange: bool,
) -> Result<Vec<CurvePoint>, PerfConfigError> {
    let mut cfg = PerfConfig::default();
    cfg.set("cluster.net_gbps", &net_gbps.to_string())?;
    cfg.set("phase.accumulation", &accumulation.to_string())?;
    cfg.set("model.overlap", &overlap.to_string())?;
    cfg.set("cluster.exchange", if f16_exchange { "f16" } else { "f32" })?;
    Ok(standard_grid()
        .into_iter()
        .map(|t| {
            let p = scaling_point(&cfg.cluster.with_topology(t), &cfg.phase, &cfg.knobs);
            CurvePoint {
                label: p.label,
                world: p.world,
                efficiency: p.efficiency,
                factor: p.factor,
                throughput: p.throughput,
                exposed: p.time.exposed,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfView {
    pub input: f64,
    pub bits: u16,
    pub hex: String,
    pub sign: u16,
    pub exponent: u16,
    pub mantissa: u16,
    pub class: &'static str,
    /// `None` for NaN, which JSON cannot carry as a number.
    pub value: Option<f64>,
    pub abs_error: Option<f64>,
    pub rel_error: Option<f64>,
    /// Distance to the next representable magnitude.
    pub spacing: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// How `x` lands in binary16.
pub fn inspect_half(x: f32) -> HalfView {
    let h = Binary16::from_f32(x);
    let bits = h.to_bits();
    let exponent = (bits >> 10) & 0x1f;
    let class = if h.is_nan() {
        "nan"
    } else if h.is_infinite() {
        "infinity"
    } else if bits & 0x7fff == 0 {
        "zero"
    } else if h.is_subnormal() {
        "subnormal"
    } else {
        "normal"
    };
    let value = h.to_f32() as f64;
    let abs_error = (value - x as f64).abs();
    let spacing = if h.is_finite() {
        let up = Binary16::from_bits((bits & 0x7fff) + 1).to_f32() as f64;
        finite(up - value.abs())
    } else {
        None
    };
    HalfView {
        input: x as f64,
        bits,
        hex: format!("0x{bits:04x}"),
        sign: bits >> 15,
        exponent,
        mantissa: bits & 0x3ff,
        class,
        value: finite(value),
        abs_error: finite(abs_error),
        rel_error: if x == 0.0 { Some(0.0) } else { finite(abs_error / (x as f64).abs()) },
        spacing,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeluCurves {
    pub x: Vec<f32>,
    /// The tanh approximation evaluated in f64.
    pub reference: Vec<f64>,
    pub unfused: Vec<f32>,
    pub fused: Vec<f32>,
    /// Input in binary16, AMP rewrite applied, then fused.
    pub amp: Vec<f32>,
    pub nodes_unfused: usize,
    pub nodes_fused: usize,
    pub max_abs_fused: f64,
    pub max_abs_amp: f64,
}

pub fn gelu_reference(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn amp_gelu() -> Result<ExprGraph, GraphError> {
    let base = build_gelu_unfused();
    let mut h = ExprGraph::new();
    h.add_input(DTypeTag::F16);
    for n in base.nodes() {
        h.push_node(n.clone())?;
    }
    h.set_outputs(base.outputs())?;
    Ok(fuse_elementwise(&amp_rewrite(&h, &SafetyTable::default())?))
}

fn run(g: &ExprGraph, input: Value) -> Result<Vec<f32>, GraphError> {
    Ok(interpret(g, &[input])?.remove(0).to_f32())
}

/// GELU over `n` evenly spaced points in `[lo, hi]` through each graph variant.
pub fn gelu(lo: f32, hi: f32, n: usize) -> Result<GeluCurves, GraphError> {
    let n = n.max(2);
    let x: Vec<f32> = (0..n).map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32).collect();
    let unfused_g = build_gelu_unfused();
    let fused_g = fuse_elementwise(&unfused_g);
    let unfused = run(&unfused_g, Value::f32(&[n], x.clone()))?;
    let fused = run(&fused_g, Value::f32(&[n], x.clone()))?;
    let amp = run(&amp_gelu()?, Value::f16(&[n], &x))?;
    let max_abs = |v: &[f32]| {
        v.iter()
            .zip(&unfused)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    };
    Ok(GeluCurves {
        reference: x.iter().map(|&v| gelu_reference(v as f64)).collect(),
        max_abs_fused: max_abs(&fused),
        max_abs_amp: max_abs(&amp),
        nodes_unfused: unfused_g.len(),
        nodes_fused: fused_g.len(),
        x,
        unfused,
        fused,
        amp,
    })
}

fn json<T: Serialize, E: std::fmt::Display>(r: Result<T, E>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn scaling_curve(
    net_gbps: f64,
    accumulation: usize,
    overlap: f64,
    f16_exchange: bool,
) -> Result<String, JsError> {
    json(scaling(net_gbps, accumulation, overlap, f16_exchange))
}

#[wasm_bindgen]
pub fn half_inspect(x: f32) -> Result<String, JsError> {
    json::<_, std::convert::Infallible>(Ok(inspect_half(x)))
}

#[wasm_bindgen]
pub fn gelu_curves(lo: f32, hi: f32, n: usize) -> Result<String, JsError> {
    json(gelu(lo, hi, n.min(1 << 16)))
}
