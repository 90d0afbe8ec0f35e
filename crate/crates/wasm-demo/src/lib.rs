//! WebAssembly bindings for the demo page. Each export returns a JSON string.

use psm_core::cost::{cost_series, CostModel};
use psm_core::scan::{blelloch, scan_online, CounterState, ExprAgg, FnAggregator, ScanTrace};
use psm_core::tpsm::PsmConfig;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_TIMELINE: u32 = 4096;
const MAX_TREE: u32 = 64;
const MAX_COST_POINTS: usize = 512;

#[derive(Debug, Serialize, PartialEq)]
pub struct CounterStep {
    pub t: u32,
    pub insert_calls: u64,
    pub emit_calls: u64,
    /// Occupancy per slot, least significant first.
    pub slots: Vec<bool>,
}

/// Counter occupancy after each of `n` inserts.
pub fn counter_timeline(n: u32) -> Result<Vec<CounterStep>, String> {
    if n == 0 || n > MAX_TIMELINE {
        return Err(format!("n must be in 1..={MAX_TIMELINE}"));
    }
    let unit = FnAggregator::new(|_: &(), _: &()| (), true);
    let mut counter = CounterState::new();
    let mut trace = ScanTrace::new();
    let mut out = Vec::with_capacity(n as usize);
    for t in 0..n {
        counter.insert((), &unit, &mut trace).map_err(|e| e.to_string())?;
        counter.emit(&unit, &mut trace).map_err(|e| e.to_string())?;
        let cost = trace.per_element.last().expect("one entry per insert");
        out.push(CounterStep {
            t,
            insert_calls: cost.insert_calls,
            emit_calls: cost.emit_calls,
            slots: counter.roots().iter().map(Option::is_some).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, PartialEq)]
pub struct CostPoint {
    pub t: usize,
    pub psm: f64,
    pub baseline: f64,
    pub roots: usize,
}

/// Per-token analytic cost, sampled down to at most a few hundred points.
pub fn cost_curves(chunk: usize, dim: usize, n: usize) -> Result<Vec<CostPoint>, String> {
    let cfg = PsmConfig::new(chunk, dim, 1, 2, 64);
    cfg.validate().map_err(|e| e.to_string())?;
    if n == 0 || n > 1 << 20 {
        return Err("n must be in 1..=1048576".into());
    }
    let rows = cost_series(&CostModel::from_config(&cfg), n).map_err(|e| e.to_string())?;
    let stride = n.div_ceil(MAX_COST_POINTS);
    Ok(rows
        .iter()
        .filter(|r| r.t % stride == 0 || r.t == n)
        .map(|r| CostPoint {
            t: r.t,
            psm: r.psm_flops(),
            baseline: r.baseline_flops,
            roots: r.occupied_roots,
        })
        .collect())
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Bracketing {
    pub t: usize,
    /// Static exclusive prefix `t + 1` (the full-tree root for the last element).
    pub tree: String,
    pub online: String,
    pub equal: bool,
}

/// Both scans over symbolic leaves `x0..x{n-1}`, showing the shared bracketing.
pub fn parenthesization(n: u32) -> Result<Vec<Bracketing>, String> {
    if !n.is_power_of_two() || n > MAX_TREE {
        return Err(format!("n must be a power of two up to {MAX_TREE}"));
    }
    let leaves: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    let st = blelloch(&leaves, &ExprAgg).map_err(|e| e.to_string())?;
    let (online, _) = scan_online(leaves, &ExprAgg);
    Ok(online
        .into_iter()
        .enumerate()
        .map(|(t, on)| {
            let tree = st.prefixes.get(t + 1).and_then(|p| p.value().cloned()).unwrap_or_else(|| st.total.clone());
            Bracketing {
                t,
                equal: tree == on,
                tree,
                online: on,
            }
        })
        .collect())
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = counterTimeline)]
pub fn counter_timeline_js(n: u32) -> Result<String, JsError> {
    to_json(counter_timeline(n))
}

#[wasm_bindgen(js_name = costCurves)]
pub fn cost_curves_js(chunk: u32, dim: u32, n: u32) -> Result<String, JsError> {
    to_json(cost_curves(chunk as usize, dim as usize, n as usize))
}

#[wasm_bindgen(js_name = parenthesization)]
pub fn parenthesization_js(n: u32) -> Result<String, JsError> {
    to_json(parenthesization(n))
}
