use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parameter_counts, run_training, RunOptions};
use crate::ablation::AblationSpec;
use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::metrics::{render_table, Aggregate};

pub const ABLATION_TABLE_FILE: &str = "ablation_table.txt";
pub const ABLATION_JSON_FILE: &str = "ablation_table.json";

/// Published full-corpus ablation numbers (Setting, PSNR, SSIM, MAE, RMSE, FID),
/// rendered as footnotes next to toy-scale results.
pub const PUBLISHED_ABLATION: [(&str, [f64; 5]); 6] = [
    ("No_DownUp", [27.053, 0.600, 0.034, 0.049, 73.570]),
    ("No_FusionAtt", [26.396, 0.632, 0.046, 0.056, 74.758]),
    ("Alt_Discriminator", [26.339, 0.632, 0.047, 0.056, 78.300]),
    ("No_Channel_Att", [26.237, 0.627, 0.048, 0.057, 71.875]),
    ("No_Spatial_Att", [25.808, 0.614, 0.051, 0.060, 84.289]),
    ("CRSynthNet", [26.978, 0.648, 0.041, 0.050, 72.789]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub ablation: AblationSpec,
    pub generator_params: usize,
    pub discriminator_params: usize,
    pub metrics: Aggregate,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let header = ["Setting", "PSNR", "SSIM", "MAE", "RMSE", "FID", "G params", "D params"];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.setting.clone(),
                    format!("{:.3}", r.metrics.psnr),
                    format!("{:.3}", r.metrics.ssim),
                    format!("{:.3}", r.metrics.mae),
                    format!("{:.3}", r.metrics.rmse),
                    format!("{:.3}", r.fid),
                    r.generator_params.to_string(),
                    r.discriminator_params.to_string(),
                ]
            })
            .collect();
        let mut out = render_table(&header, &rows);
        out.push_str("\nPublished full-corpus values (reference only, not comparable to toy runs):\n");
        let published: Vec<Vec<String>> = PUBLISHED_ABLATION
            .iter()
            .map(|(name, v)| std::iter::once(format!("  {name}")).chain(v.iter().map(|x| format!("{x:.3}"))).collect())
            .collect();
        out.push_str(&render_table(&["  Setting", "PSNR", "SSIM", "MAE", "RMSE", "FID"], &published));
        out
    }
}

/// Parameter counts of every variant, checked against the full model: each
/// removal flag must shrink the network it touches and leave the other alone;
/// the alternative critic must change only the critic.
pub fn structural_check(base: &RunConfig, variants: &[(String, AblationSpec)]) -> Result<Vec<(String, usize, usize)>> {
    let full = parameter_counts(base, &AblationSpec::default())?;
    let (g0, d0) = (full["generator"], full["discriminator"]);
    let mut out = Vec::with_capacity(variants.len());
    for (name, spec) in variants {
        let c = parameter_counts(base, spec)?;
        let (g, d) = (c["generator"], c["discriminator"]);
        let g_removed = spec.no_downup || spec.no_fusionatt || spec.no_channel_att || spec.no_spatial_att;
        let g_ok = if g_removed { g < g0 } else { g == g0 };
        let d_ok = if spec.alt_discriminator { d != d0 } else if g_removed { d <= d0 } else { d == d0 };
        if !(g_ok && d_ok) {
            return Err(config_err!(
                "variant {name}: parameter counts G {g} / D {d} against full model G {g0} / D {d0} break the ablation contract"
            ));
        }
        out.push((name.clone(), g, d));
    }
    Ok(out)
}

/// Trains each variant under the base seed and data order into
/// `<out_dir>/<setting>` and writes the comparison table.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[(String, AblationSpec)],
    out_dir: &Path,
    force: bool,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(config_err!("no ablation variants selected"));
    }
    let counts = structural_check(base, variants)?;
    let mut rows = Vec::with_capacity(variants.len());
    for ((name, spec), (_, g, d)) in variants.iter().zip(counts) {
        let mut cfg = base.clone();
        cfg.train.ablation = *spec;
        let opts = RunOptions {
            force,
            ..RunOptions::default()
        };
        let outcome = run_training(&cfg, &out_dir.join(name), &opts)?;
        let report = outcome
            .final_report
            .ok_or_else(|| Error::Numerical(format!("variant {name} finished without a best checkpoint")))?;
        rows.push(AblationRow {
            setting: name.clone(),
            ablation: *spec,
            generator_params: g,
            discriminator_params: d,
            metrics: report.aggregate,
            fid: report.fid,
        });
    }
    let table = AblationTable { rows };
    let text_path = out_dir.join(ABLATION_TABLE_FILE);
    fs::write(&text_path, table.to_text()).map_err(|e| Error::io(&text_path, e))?;
    let json_path = out_dir.join(ABLATION_JSON_FILE);
    fs::write(&json_path, serde_json::to_string_pretty(&table)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_variant_passes_the_structural_contract() {
        let cfg = RunConfig::tiny("m.jsonl");
        let rows = structural_check(&cfg, &AblationSpec::table_variants()).unwrap();
        assert_eq!(rows.len(), 6);
    }

    #[test]
    fn footnotes_render_published_rows() {
        let row = AblationRow {
            setting: "CRSynthNet".into(),
            ablation: AblationSpec::default(),
            generator_params: 10,
            discriminator_params: 5,
            metrics: Aggregate {
                psnr: 20.0,
                ssim: 0.5,
                ms_ssim: 0.6,
                mae: 0.1,
                rmse: 0.12,
            },
            fid: 3.0,
        };
        let text = AblationTable { rows: vec![row] }.to_text();
        assert!(text.contains("26.396") && text.contains("74.758") && text.contains("25.808"));
        assert!(text.contains("20.000"));
    }
}
