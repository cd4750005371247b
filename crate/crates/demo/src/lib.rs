//! Browser demo: compress a gradient, tabulate communication cost, train a small model.
//!
//! Every export returns a JSON string; the page in `www/` draws it on canvases.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use gradcomp::compressors::{decompress, CompressorConfig, DgcConfig, Selection, WorkerCompressor};
use gradcomp::costmodel::CostModel;
use gradcomp::models::{DataConfig, ModelSpec};
use gradcomp::numerics::{Purpose, Rng};
use gradcomp::simulator::{train, RunConfig, RunStatus};

/// Builds a compressor from the page controls; `value` is a keep fraction or a level count.
pub fn compressor(method: &str, value: f64) -> Result<CompressorConfig, String> {
    let cfg = match method {
        "identity" => CompressorConfig::Identity,
        "random_k" => CompressorConfig::RandomK {
            keep: value,
            residual: true,
        },
        "top_k" => CompressorConfig::TopK {
            keep: value,
            selection: Selection::Partial,
        },
        "dgc" => CompressorConfig::Dgc(DgcConfig {
            warmup_epochs: 0,
            ..DgcConfig::new(value)
        }),
        "qsgd" => CompressorConfig::Qsgd {
            levels: value as u32,
            bucket: None,
        },
        other => return Err(format!("unknown method `{other}`")),
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

#[derive(Serialize)]
pub struct Preview {
    pub original: Vec<f32>,
    pub transmitted: Vec<f32>,
    pub residual: Vec<f32>,
    pub bits: u64,
    pub dense_bits: u64,
    pub ratio: f64,
}

/// One compression step on a heavy-tailed random gradient of length `n`.
pub fn preview(method: &str, value: f64, n: usize, seed: u64) -> Result<Preview, String> {
    if !(1..=100_000).contains(&n) {
        return Err("n must be in 1..=100000".into());
    }
    let cfg = compressor(method, value)?;
    let mut rng = Rng::for_purpose(seed, Purpose::Data, 0);
    let original: Vec<f32> = (0..n)
        .map(|_| (rng.normal() * rng.normal().abs().powi(2)) as f32)
        .collect();
    let mut worker = WorkerCompressor::new(&cfg, n, 1).map_err(|e| e.to_string())?;
    let mut crng = Rng::for_purpose(seed, Purpose::Compress, 0);
    let msg = worker
        .compress(&original, &mut crng)
        .map_err(|e| e.to_string())?;
    let transmitted = decompress(&msg, n).map_err(|e| e.to_string())?;
    let cost = CostModel::default();
    let bits = cost.message_bits(&msg).map_err(|e| e.to_string())?;
    let residual = match &cfg {
        CompressorConfig::Dgc(_) => worker.state().accumulator.clone(),
        _ => worker.state().residual.clone(),
    };
    Ok(Preview {
        original,
        transmitted,
        residual,
        bits,
        dense_bits: cost.dense_bits(n),
        ratio: cost.dense_bits(n) as f64 / bits as f64,
    })
}

#[derive(Serialize)]
pub struct CostRow {
    pub method: String,
    pub setting: f64,
    pub bits: u64,
    pub ratio: f64,
    pub comm_ms: f64,
}

/// Message size, compression ratio and exchange time for the standard grid at `n` parameters.
pub fn cost_table(n: usize, bandwidth_gbps: f64) -> Result<Vec<CostRow>, String> {
    let cost = CostModel {
        bandwidth_bps: bandwidth_gbps * 1e9,
        ..CostModel::default()
    };
    cost.validate().map_err(|e| e.to_string())?;
    let mut grid = vec![("identity", 1.0)];
    for method in ["random_k", "top_k", "dgc"] {
        for keep in [0.01, 0.001, 0.0001] {
            grid.push((method, keep));
        }
    }
    for levels in [64.0, 16.0, 4.0] {
        grid.push(("qsgd", levels));
    }
    grid.into_iter()
        .map(|(method, setting)| {
            let cfg = compressor(method, setting)?;
            let bits = cost
                .expected_message_bits(&cfg, n)
                .map_err(|e| e.to_string())?;
            Ok(CostRow {
                method: method.into(),
                setting,
                bits,
                ratio: cost.dense_bits(n) as f64 / bits as f64,
                comm_ms: cost.comm_time(bits) * 1e3,
            })
        })
        .collect()
}

#[derive(Serialize)]
pub struct Curve {
    pub diverged: bool,
    pub val_ce: Vec<f64>,
    pub comm_seconds: Vec<f64>,
    pub bits_sent: Vec<u64>,
}

/// Trains a small softmax classifier and returns the per-epoch curve.
pub fn curve(
    method: &str,
    value: f64,
    workers: usize,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<Curve, String> {
    let mut cfg = RunConfig::new(
        ModelSpec::SoftmaxRegression {
            inputs: 32,
            classes: 10,
        },
        compressor(method, value)?,
        lr,
    );
    cfg.data = DataConfig {
        train: 1024,
        validation: 256,
        test: 256,
        separation: 0.5,
    };
    cfg.batch_size = 64;
    cfg.workers = workers;
    cfg.max_epochs = epochs.min(100);
    cfg.patience = cfg.max_epochs;
    cfg.seed = seed;
    let result = train(&cfg, |_| {}).map_err(|e| e.to_string())?;
    Ok(Curve {
        diverged: result.status == RunStatus::Diverged,
        val_ce: result.epochs.iter().map(|m| m.val_ce).collect(),
        comm_seconds: result.epochs.iter().map(|m| m.comm_seconds).collect(),
        bits_sent: result.epochs.iter().map(|m| m.bits_sent).collect(),
    })
}

fn to_json<T: Serialize>(value: Result<T, String>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn compress_preview(method: &str, value: f64, n: usize, seed: u64) -> Result<String, JsError> {
    to_json(preview(method, value, n, seed))
}

#[wasm_bindgen]
pub fn cost_grid(n: usize, bandwidth_gbps: f64) -> Result<String, JsError> {
    to_json(cost_table(n, bandwidth_gbps))
}

#[wasm_bindgen]
pub fn training_curve(
    method: &str,
    value: f64,
    workers: usize,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<String, JsError> {
    to_json(curve(method, value, workers, lr, epochs, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preview_conserves_mass() {
        let p = preview("top_k", 0.1, 200, 3).unwrap();
        assert_eq!(p.bits, 20 * 64);
        for i in 0..200 {
            assert_eq!(p.transmitted[i] + p.residual[i], p.original[i]);
        }
        assert!(preview("qsgd", 16.0, 200, 3).unwrap().ratio > 6.0);
        assert!(preview("qsgd", 10.0, 200, 3).is_err());
        assert!(preview("zip", 0.1, 200, 3).is_err());
    }

    #[test]
    fn cost_table_matches_headline_numbers() {
        let rows = cost_table(4_000_000, 10.0).unwrap();
        assert_eq!(rows.len(), 13);
        assert_eq!(rows[0].comm_ms, 25.6);
        let top = rows
            .iter()
            .find(|r| r.method == "top_k" && r.setting == 0.01)
            .unwrap();
        assert_eq!(top.ratio, 50.0);
        assert!((top.comm_ms - 0.512).abs() < 1e-12);
    }

    #[test]
    fn curve_trains() {
        let c = curve("dgc", 0.01, 2, 0.2, 5, 1).unwrap();
        assert!(!c.diverged);
        assert_eq!(c.val_ce.len(), 5);
        assert!(c.val_ce[4] < c.val_ce[0]);
        assert!(c.bits_sent.windows(2).all(|w| w[0] < w[1]));
    }
}
