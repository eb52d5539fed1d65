use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Trainer;
use crate::backbone::PromptPreset;
use crate::config::Config;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    JointPrompt,
    LowlightPrompt,
    DeblurPrompt,
    RecOnly,
    RecIdentity,
    FullLoss,
}

/// Published LOL-Blur scores for a preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub psnr: f64,
    pub ssim: f64,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 6] = [
        AblationPreset::DeblurPrompt,
        AblationPreset::LowlightPrompt,
        AblationPreset::JointPrompt,
        AblationPreset::RecOnly,
        AblationPreset::RecIdentity,
        AblationPreset::FullLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::JointPrompt => "joint_prompt",
            AblationPreset::LowlightPrompt => "lowlight_prompt",
            AblationPreset::DeblurPrompt => "deblur_prompt",
            AblationPreset::RecOnly => "rec_only",
            AblationPreset::RecIdentity => "rec_identity",
            AblationPreset::FullLoss => "full_loss",
        }
    }

    /// Row label as printed in the tables.
    pub fn label(self) -> &'static str {
        match self {
            AblationPreset::JointPrompt => "joint degradation prompt",
            AblationPreset::LowlightPrompt => "low-light prompt",
            AblationPreset::DeblurPrompt => "blur prompt",
            AblationPreset::RecOnly => "L_rec",
            AblationPreset::RecIdentity => "L_rec + L_id",
            AblationPreset::FullLoss => "L_rec + L_id + L_clip",
        }
    }

    pub fn is_prompt_study(self) -> bool {
        matches!(
            self,
            AblationPreset::JointPrompt | AblationPreset::LowlightPrompt | AblationPreset::DeblurPrompt
        )
    }

    pub fn published_reference(self) -> PublishedReference {
        let (psnr, ssim) = match self {
            AblationPreset::DeblurPrompt => (23.12, 0.824),
            AblationPreset::LowlightPrompt => (24.45, 0.842),
            AblationPreset::JointPrompt => (26.42, 0.853),
            AblationPreset::RecOnly => (25.73, 0.839),
            AblationPreset::RecIdentity => (26.31, 0.847),
            AblationPreset::FullLoss => (26.42, 0.853),
        };
        PublishedReference { psnr, ssim }
    }

    /// The base configuration with this preset's prompt or loss weights.
    pub fn apply(self, base: &Config) -> Config {
        let mut c = base.clone();
        match self {
            AblationPreset::JointPrompt => c.fusion.prompt_preset = PromptPreset::Joint,
            AblationPreset::LowlightPrompt => c.fusion.prompt_preset = PromptPreset::Lowlight,
            AblationPreset::DeblurPrompt => c.fusion.prompt_preset = PromptPreset::Deblur,
            AblationPreset::RecOnly => c.loss = c.loss.rec_only(),
            AblationPreset::RecIdentity => c.loss.lambda_clip = 0.0,
            AblationPreset::FullLoss => {}
        }
        if self.is_prompt_study() {
            c.fusion.prompts.clear();
        }
        c
    }
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::config(format!("unknown ablation preset `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: AblationPreset,
    pub psnr: f64,
    pub ssim: f64,
    pub final_rec_loss: f64,
    pub published: PublishedReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    fn section(&self, s: &mut String, title: &str, prompt: bool) {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.preset.is_prompt_study() == prompt).collect();
        if rows.is_empty() {
            return;
        }
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "| {:<24} | {:>9} | {:>7} | {:>10} | {:>10} |", "setting", "PSNR", "SSIM", "ref. PSNR", "ref. SSIM");
        let _ = writeln!(s, "|{:-<26}|{:->11}|{:->9}|{:->12}|{:->12}|", "", "", "", "", "");
        for r in rows {
            let _ = writeln!(
                s,
                "| {:<24} | {:>9.2} | {:>7.4} | {:>10.2} | {:>10.3} |",
                r.preset.label(),
                r.psnr,
                r.ssim,
                r.published.psnr,
                r.published.ssim
            );
        }
        let _ = writeln!(s);
    }

    /// Markdown tables: prompt study first, loss study second.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        self.section(&mut s, "Prompt ablation", true);
        self.section(&mut s, "Loss ablation", false);
        s
    }
}

/// Trains each preset from the same seed and corpus and scores it on the
/// held-out split.
pub fn run_ablation(base: &Config, presets: &[AblationPreset]) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &p in presets {
        let cfg = p.apply(base);
        log::info!("ablation preset {}", p.name());
        let mut trainer = Trainer::new(cfg)?;
        let reports = trainer.fit(None)?;
        let m = trainer.evaluate_holdout()?;
        table.rows.push(AblationRow {
            preset: p,
            psnr: m.mean_psnr,
            ssim: m.mean_ssim,
            final_rec_loss: reports.last().map_or(f64::NAN, |r| r.loss.rec),
            published: p.published_reference(),
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_unknown_is_config_error() {
        for p in AblationPreset::ALL {
            assert_eq!(p.name().parse::<AblationPreset>().unwrap(), p);
        }
        assert!(matches!("rec".parse::<AblationPreset>(), Err(Error::Config(_))));
    }

    #[test]
    fn presets_change_only_their_knob() {
        let base = Config::default();
        let r = AblationPreset::RecOnly.apply(&base);
        assert_eq!((r.loss.lambda_identity, r.loss.lambda_clip), (0.0, 0.0));
        let ri = AblationPreset::RecIdentity.apply(&base);
        assert_eq!((ri.loss.lambda_identity, ri.loss.lambda_clip), (0.1, 0.0));
        let l = AblationPreset::LowlightPrompt.apply(&base);
        assert_eq!(l.fusion.prompt_preset, PromptPreset::Lowlight);
        assert_eq!(l.loss, base.loss);
        assert_eq!(AblationPreset::FullLoss.apply(&base), base);
    }
}
