use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_ope, EvalReport};
use super::train::{build_vocab, TrainConfig, Trainer};
use crate::backbone::{AttentionMode, TextMode};
use crate::data::Sequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Separate template and search streams, no text.
    Baseline,
    /// Asymmetric template/search attention, no text.
    WTem,
    /// Text modulation without the dense matching loss.
    WoDm,
    Full,
    Symmetric,
    Asynchronous,
    WoUpdate,
    SamStart(usize),
}

pub const VARIANT_NAMES: [&str; 10] = [
    "baseline",
    "w_tem",
    "wo_dm",
    "full",
    "symmetric",
    "asynchronous",
    "wo_update",
    "sam_start_1",
    "sam_start_2",
    "sam_start_3",
];

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "baseline" => Variant::Baseline,
            "w_tem" => Variant::WTem,
            "wo_dm" | "w/o_dm" => Variant::WoDm,
            "full" => Variant::Full,
            "symmetric" => Variant::Symmetric,
            "asynchronous" => Variant::Asynchronous,
            "wo_update" | "w/o_update" => Variant::WoUpdate,
            "sam_start_1" => Variant::SamStart(1),
            "sam_start_2" => Variant::SamStart(2),
            "sam_start_3" => Variant::SamStart(3),
            other => {
                return Err(Error::UnknownVariant {
                    name: other.to_string(),
                    valid: VARIANT_NAMES.join(", "),
                })
            }
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => f.write_str("baseline"),
            Variant::WTem => f.write_str("w_tem"),
            Variant::WoDm => f.write_str("wo_dm"),
            Variant::Full => f.write_str("full"),
            Variant::Symmetric => f.write_str("symmetric"),
            Variant::Asynchronous => f.write_str("asynchronous"),
            Variant::WoUpdate => f.write_str("wo_update"),
            Variant::SamStart(k) => write!(f, "sam_start_{k}"),
        }
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

impl Variant {
    /// `base` with this variant's architecture and loss switches applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let b = &mut c.backbone;
        b.attention = AttentionMode::Asymmetric;
        b.sam_enabled = true;
        b.sam_start_stage = 1;
        b.text_mode = TextMode::Synchronous;
        b.text_update_enabled = true;
        let dm = if base.loss.lambda_dm > 0.0 { base.loss.lambda_dm } else { 1.0 };
        c.loss.lambda_dm = dm;
        match *self {
            Variant::Baseline => {
                b.attention = AttentionMode::SelfOnly;
                b.sam_enabled = false;
                c.loss.lambda_dm = 0.0;
            }
            Variant::WTem => {
                b.sam_enabled = false;
                c.loss.lambda_dm = 0.0;
            }
            Variant::WoDm => c.loss.lambda_dm = 0.0,
            Variant::Full => {}
            Variant::Symmetric => b.attention = AttentionMode::Symmetric,
            Variant::Asynchronous => b.text_mode = TextMode::Asynchronous,
            Variant::WoUpdate => b.text_update_enabled = false,
            Variant::SamStart(k) => b.sam_start_stage = k,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub success: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub final_loss: f64,
}

/// Trains and evaluates each variant from the same seed. Per-variant
/// checkpoints and losses go to `out/<variant>/`, the table to
/// `out/ablation.csv`.
pub fn run_ablation(
    variants: &[Variant],
    base: &TrainConfig,
    train: &[Sequence],
    eval: &[Sequence],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants {
        let cfg = v.apply(base);
        let mut t = Trainer::new(cfg, build_vocab(train))?;
        let dir = out.map(|o| o.join(v.to_string()));
        let start = std::time::Instant::now();
        t.fit(train, dir.as_deref())?;
        let report: EvalReport = evaluate_ope(&t.model, eval, &t.cfg.crop)?;
        if let Some(d) = &dir {
            report.write_csv(&d.join("eval.csv"))?;
        }
        let last = t.history.last().map(|l| l.loss.total).unwrap_or(f64::NAN);
        log::info!(
            "{v}: success {:.4} precision {:.4} norm precision {:.4} ({:.0}s)",
            report.success,
            report.precision,
            report.norm_precision,
            start.elapsed().as_secs_f64()
        );
        rows.push(AblationRow {
            variant: v.to_string(),
            success: report.success,
            precision: report.precision,
            norm_precision: report.norm_precision,
            final_loss: last,
        });
    }
    if let Some(o) = out {
        write_ablation_csv(&o.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::from("variant,success,precision,norm_precision,final_loss\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant, r.success, r.precision, r.norm_precision, r.final_loss
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in VARIANT_NAMES {
            assert_eq!(n.parse::<Variant>().unwrap().to_string(), n);
        }
        assert!(matches!("fast".parse::<Variant>(), Err(Error::UnknownVariant { .. })));
        assert_eq!(parse_variants("full, wo_dm").unwrap(), vec![Variant::Full, Variant::WoDm]);
    }

    #[test]
    fn switches() {
        let base = TrainConfig::desk();
        let b = Variant::Baseline.apply(&base);
        assert_eq!(b.backbone.attention, AttentionMode::SelfOnly);
        assert!(!b.backbone.sam_enabled && b.loss.lambda_dm == 0.0);
        let f = Variant::Full.apply(&b);
        assert!(f.backbone.sam_enabled && f.loss.lambda_dm == 1.0);
        assert_eq!(Variant::SamStart(3).apply(&base).backbone.sam_start_stage, 3);
    }
}
