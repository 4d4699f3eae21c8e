use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileMetrics {
    pub tile_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_name: String,
    pub embedder: String,
    pub per_tile: Vec<TileMetrics>,
    pub aggregate: Aggregate,
    pub fid: f64,
}

/// Published full-scale results on the real dataset, shown for orientation only.
pub const PUBLISHED_CRSYNTHNET: [(&str, f64); 5] = [
    ("PSNR", 26.978),
    ("SSIM", 0.648),
    ("MAE", 0.041),
    ("RMSE", 0.050),
    ("FID", 72.789),
];

pub const CSV_NAME: &str = "metrics.csv";
pub const TABLE_NAME: &str = "report.txt";
pub const SUMMARY_NAME: &str = "summary.json";

impl MetricReport {
    pub fn new(model_name: &str, embedder: &str, per_tile: Vec<TileMetrics>, fid: f64) -> Result<Self> {
        if per_tile.is_empty() {
            return Err(data_err!("a metric report needs at least one tile"));
        }
        let n = per_tile.len() as f64;
        let mean = |f: fn(&TileMetrics) -> f64| per_tile.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate {
            psnr: mean(|t| t.psnr),
            ssim: mean(|t| t.ssim),
            ms_ssim: mean(|t| t.ms_ssim),
            mae: mean(|t| t.mae),
            rmse: mean(|t| t.rmse),
        };
        Ok(MetricReport {
            model_name: model_name.into(),
            embedder: embedder.into(),
            per_tile,
            aggregate,
            fid,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tile_id", "psnr", "ssim", "ms_ssim", "mae", "rmse"])?;
        for t in &self.per_tile {
            w.write_record([
                t.tile_id.clone(),
                format!("{:.6}", t.psnr),
                format!("{:.6}", t.ssim),
                format!("{:.6}", t.ms_ssim),
                format!("{:.6}", t.mae),
                format!("{:.6}", t.rmse),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| data_err!("csv buffer: {e}"))?;
        String::from_utf8(bytes).map_err(|e| data_err!("csv encoding: {e}"))
    }

    /// One row per model in PSNR, SSIM, MAE, RMSE, FID order.
    pub fn table_row(&self) -> Vec<String> {
        let a = &self.aggregate;
        vec![
            self.model_name.clone(),
            format!("{:.3}", a.psnr),
            format!("{:.3}", a.ssim),
            format!("{:.3}", a.mae),
            format!("{:.3}", a.rmse),
            format!("{:.3}", self.fid),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = render_table(&["Model", "PSNR", "SSIM", "MAE", "RMSE", "FID"], &[self.table_row()]);
        out.push_str(&format!(
            "\ntiles: {}   MS-SSIM: {:.3}   FID embedder: {}\n",
            self.per_tile.len(),
            self.aggregate.ms_ssim,
            self.embedder
        ));
        let published: Vec<String> = PUBLISHED_CRSYNTHNET.iter().map(|(k, v)| format!("{k} {v}")).collect();
        out.push_str(&format!(
            "note: published CRSynthNet results on the full TCSEN12 corpus are {}; toy-scale runs are not comparable.\n",
            published.join(", ")
        ));
        out
    }

    /// Writes the CSV, the text table and a JSON summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put(CSV_NAME, self.to_csv()?)?;
        put(TABLE_NAME, self.to_text())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        put(SUMMARY_NAME, json)
    }

    pub fn read_summary(dir: &Path) -> Result<Self> {
        let p = dir.join(SUMMARY_NAME);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Plain-text table with columns padded to their widest cell; the first column
/// is left-aligned, the rest right-aligned.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}
