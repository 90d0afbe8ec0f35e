//! Analytic per-token cost of streaming decode, Transformer-PSM versus a
//! KV-cache transformer of the same total depth.
//!
//! Counts are floating-point operations from module shapes. One block row
//! with `m` visible positions costs `24 d²` (four projections plus a `4d` MLP)
//! and `4 d m` (scores and weighted values). The readout costs `2 d V`.
//!
//! PSM costs are charged per chunk and spread evenly over the chunk's tokens:
//! inference over `[s; chunk]`, encoding the chunk, one amortised insert
//! aggregation, and the emit combines that run when the chunk completes.
//! Tokens are numbered from 1.

use crate::error::{PsmError, Result};
use crate::scan::{CounterState, FnAggregator, ScanTrace};
use crate::tpsm::{Compression, PsmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub chunk: usize,
    pub dim: usize,
    pub vocab: usize,
    pub agg_layers: usize,
    pub inf_layers: usize,
    pub baseline_layers: usize,
    pub compression: Compression,
}

impl CostModel {
    pub fn from_config(cfg: &PsmConfig) -> Self {
        Self {
            chunk: cfg.chunk,
            dim: cfg.dim,
            vocab: cfg.vocab,
            agg_layers: cfg.agg_layers,
            inf_layers: cfg.inf_layers,
            baseline_layers: cfg.agg_layers + cfg.inf_layers,
            compression: cfg.compression,
        }
    }

    /// One block applied to one row that sees `ctx` positions.
    pub fn block_row(&self, ctx: usize) -> u64 {
        let d = self.dim as u64;
        24 * d * d + 4 * d * ctx as u64
    }

    /// `layers` blocks over rows whose contexts are `first..first + rows`.
    fn window(&self, layers: usize, first: usize, rows: usize) -> u64 {
        layers as u64 * (first..first + rows).map(|m| self.block_row(m)).sum::<u64>()
    }

    pub fn readout(&self) -> u64 {
        2 * (self.dim * self.vocab) as u64
    }

    /// KV-cache baseline at token `t`: every layer attends over `t` positions.
    pub fn baseline_token(&self, t: usize) -> u64 {
        self.baseline_layers as u64 * self.block_row(t) + self.readout()
    }

    /// One aggregator call over a `2c` window, including compression.
    pub fn agg_call(&self) -> u64 {
        let c = self.chunk;
        let mix = match self.compression {
            Compression::DropFirstHalf => 0,
            Compression::LinearProjection => 2 * (c * 2 * c * self.dim) as u64,
        };
        self.window(self.agg_layers, 1, 2 * c) + mix
    }

    pub fn encode_chunk(&self) -> u64 {
        self.window(1, 1, self.chunk)
    }

    /// Inference for a whole chunk, token by token with a window cache.
    /// With a prefix state the `c` state rows are prefilled first.
    pub fn infer_chunk(&self, with_state: bool) -> u64 {
        let c = self.chunk;
        let readouts = c as u64 * self.readout();
        if with_state {
            self.window(self.inf_layers, 1, c) + self.window(self.inf_layers, c + 1, c) + readouts
        } else {
            self.window(self.inf_layers, 1, c) + readouts
        }
    }

    /// Chunk `k`'s cost without emit combines.
    pub fn chunk_base(&self, k: usize) -> u64 {
        self.infer_chunk(k > 0) + self.encode_chunk() + self.agg_call()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub t: usize,
    /// Aggregator calls (inserts and emits) triggered by token `t`.
    pub psm_agg_calls: u64,
    /// Emit combines performed when token `t`'s chunk completed.
    pub chunk_emit_combines: u64,
    pub psm_base_flops: f64,
    pub psm_emit_flops: f64,
    pub baseline_flops: f64,
    /// Counter roots held after token `t`.
    pub occupied_roots: usize,
}

impl CostRow {
    pub fn psm_flops(&self) -> f64 {
        self.psm_base_flops + self.psm_emit_flops
    }
}

/// Per-token cost rows for `t = 1..=n`. The counter schedule is simulated
/// with a unit aggregator.
pub fn cost_series(model: &CostModel, n: usize) -> Result<Vec<CostRow>> {
    let c = model.chunk;
    if c == 0 || model.dim == 0 {
        return Err(PsmError::InvalidConfig("chunk and dim must be positive".into()));
    }
    let unit = FnAggregator::new(|_: &(), _: &()| (), true);
    let mut counter = CounterState::new();
    let mut trace = ScanTrace::new();
    let mut rows = Vec::with_capacity(n);
    let mut chunk_rows: Vec<CostRow> = Vec::with_capacity(c);

    for t in 1..=n {
        let k = (t - 1) / c;
        let mut calls = 0;
        if t % c == 0 {
            let before = trace.insert_agg_calls + trace.emit_agg_calls;
            counter.insert((), &unit, &mut trace)?;
            counter.emit(&unit, &mut trace)?;
            calls = trace.insert_agg_calls + trace.emit_agg_calls - before;
        }
        chunk_rows.push(CostRow {
            t,
            psm_agg_calls: calls,
            chunk_emit_combines: 0,
            psm_base_flops: model.chunk_base(k) as f64 / c as f64,
            psm_emit_flops: 0.0,
            baseline_flops: model.baseline_token(t) as f64,
            occupied_roots: counter.occupied(),
        });
        if t % c == 0 || t == n {
            let emits = if t % c == 0 {
                trace.per_element.last().map_or(0, |e| e.emit_calls)
            } else {
                0
            };
            let spread = (emits * model.agg_call()) as f64 / c as f64;
            for r in chunk_rows.iter_mut() {
                r.chunk_emit_combines = emits;
                r.psm_emit_flops = spread;
            }
            rows.append(&mut chunk_rows);
        }
    }
    Ok(rows)
}

/// Header of [`cost_csv`].
pub const COST_CSV_HEADER: &str = "t,psm_agg_calls,psm_flops_est,baseline_kv_flops_est,occupied_roots";

/// `wall` optionally appends measured per-token nanoseconds (PSM, baseline).
pub fn cost_csv(rows: &[CostRow], wall: Option<&[(u128, u128)]>) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    if wall.is_some() {
        out.push_str(",psm_wall_ns,baseline_wall_ns");
    }
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.t,
            r.psm_agg_calls,
            r.psm_flops(),
            r.baseline_flops,
            r.occupied_roots
        ));
        if let Some((p, b)) = wall.and_then(|w| w.get(i)) {
            out.push_str(&format!(",{p},{b}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PsmError::dim("linear_fit", "two or more paired points", xs.len().min(ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CostModel {
        CostModel::from_config(&PsmConfig::new(4, 32, 2, 2, 64))
    }

    #[test]
    fn closed_form_counts() {
        let m = model();
        assert_eq!(m.block_row(1), 24 * 1024 + 128);
        assert_eq!(m.readout(), 4096);
        assert_eq!(m.baseline_token(4), 4 * (24 * 1024 + 512) + 4096);
        // 2 layers over contexts 1..=8
        assert_eq!(m.agg_call(), 2 * (8 * 24 * 1024 + 128 * 36));
        assert_eq!(m.encode_chunk(), 4 * 24 * 1024 + 128 * 10);
    }

    #[test]
    fn series_shape() {
        let m = model();
        let rows = cost_series(&m, 64).unwrap();
        assert_eq!(rows.len(), 64);
        assert_eq!(rows[3].psm_agg_calls, 0);
        // chunk 2 completes at t = 8: one merge, one root
        assert_eq!(rows[7].psm_agg_calls, 1);
        assert_eq!(rows[7].occupied_roots, 1);
        // chunk 3 completes at t = 12: roots {2, 1}, one emit combine
        assert_eq!(rows[11].psm_agg_calls, 1);
        assert_eq!(rows[11].chunk_emit_combines, 1);
        assert_eq!(rows[8].chunk_emit_combines, 1);
        let base: Vec<f64> = rows[4..].iter().map(|r| r.psm_base_flops).collect();
        assert!(base.iter().all(|&b| b == base[0]));
    }

    #[test]
    fn partial_last_chunk() {
        let rows = cost_series(&model(), 6).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[5].occupied_roots, 1);
    }

    #[test]
    fn fit_recovers_line() {
        let xs: Vec<f64> = (0..10).map(|x| x as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 2.0).collect();
        let f = linear_fit(&xs, &ys).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&xs[..1], &ys[..1]).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = cost_series(&model(), 4).unwrap();
        let csv = cost_csv(&rows, None);
        assert!(csv.starts_with(COST_CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        let wall = vec![(1, 2); 4];
        assert!(cost_csv(&rows, Some(&wall)).lines().nth(1).unwrap().ends_with(",1,2"));
    }
}
