use serde::{Deserialize, Serialize};

/// Structural switches for the ablation study. Each flag removes one block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    /// Replace the down/up fusion block with one same-width conv block.
    pub no_downup: bool,
    /// Replace fusion attention with plain channel concatenation.
    pub no_fusionatt: bool,
    /// Identity gates instead of decoder channel attention.
    pub no_channel_att: bool,
    /// Identity gates instead of decoder spatial attention.
    pub no_spatial_att: bool,
    /// Single-scale patch critic without attention instead of the multi-scale critic.
    pub alt_discriminator: bool,
}

impl AblationSpec {
    /// The full model plus one variant per flag, in table order.
    pub fn table_variants() -> Vec<(String, AblationSpec)> {
        let one = |f: fn(&mut AblationSpec)| {
            let mut a = AblationSpec::default();
            f(&mut a);
            a
        };
        vec![
            ("CRSynthNet".into(), AblationSpec::default()),
            ("No_DownUp".into(), one(|a| a.no_downup = true)),
            ("No_FusionAtt".into(), one(|a| a.no_fusionatt = true)),
            ("No_Channel_Att".into(), one(|a| a.no_channel_att = true)),
            ("No_Spatial_Att".into(), one(|a| a.no_spatial_att = true)),
            ("Alt_Discriminator".into(), one(|a| a.alt_discriminator = true)),
        ]
    }

    pub fn by_name(name: &str) -> Option<AblationSpec> {
        Self::table_variants()
            .into_iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, a)| a)
    }
}
