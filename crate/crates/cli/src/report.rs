use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use abq_core::bitkernel::BenchRecord;
use abq_core::calibration::LossRecord;
use serde::Serialize;

use crate::CliResult;

/// Flat bench row; tile fields are empty for the untiled baseline.
#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub config_id: String,
    #[serde(rename = "BM")]
    pub bm: Option<usize>,
    #[serde(rename = "BN")]
    pub bn: Option<usize>,
    #[serde(rename = "BK")]
    pub bk: Option<usize>,
    #[serde(rename = "WM")]
    pub wm: Option<usize>,
    #[serde(rename = "WN")]
    pub wn: Option<usize>,
    pub p: u32,
    pub q: u32,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub median_us: f64,
    pub tops: f64,
}

impl From<&BenchRecord> for BenchRow {
    fn from(r: &BenchRecord) -> Self {
        Self {
            config_id: r.config_id.clone(),
            bm: r.tile.map(|t| t.bm),
            bn: r.tile.map(|t| t.bn),
            bk: r.tile.map(|t| t.bk),
            wm: r.tile.map(|t| t.wm),
            wn: r.tile.map(|t| t.wn),
            p: r.p,
            q: r.q,
            m: r.m,
            n: r.n,
            k: r.k,
            median_us: r.median_us,
            tops: r.tops,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub dlc: f64,
    pub akl: f64,
}

impl From<&LossRecord> for LossRow {
    fn from(r: &LossRecord) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            dlc: r.dlc,
            akl: r.akl,
        }
    }
}

/// CSV unless the extension is `.json`.
pub fn emit<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    let json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if json {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), rows)?;
    } else {
        let mut w = csv::Writer::from_path(path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    log::info!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}
