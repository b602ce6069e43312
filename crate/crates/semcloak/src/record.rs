//! What a run leaves behind: the record file and the line-delimited metrics log.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use semcloak_core::attacks::Strategy;
use semcloak_core::metrics::{MetricReport, Summary};
use semcloak_core::signal::{ChannelFamily, ChannelSpec};

use crate::config::ExperimentConfig;
use crate::error::{io_err, HarnessError, Result};

/// An eavesdropping method: one of the four strategies, or plain decoding of the
/// intercepted signal with the legitimate decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    Decoder,
    Strategy(Strategy),
}

impl AttackKind {
    pub const DECODER_NAME: &'static str = "deepjscc";

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Decoder => Self::DECODER_NAME,
            AttackKind::Strategy(s) => s.name(),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        if s == Self::DECODER_NAME {
            return Ok(AttackKind::Decoder);
        }
        s.parse::<Strategy>().map(AttackKind::Strategy).map_err(HarnessError::from)
    }
}

impl Serialize for AttackKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AttackKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn family_name(f: ChannelFamily) -> &'static str {
    match f {
        ChannelFamily::Awgn => "awgn",
        ChannelFamily::Rayleigh => "rayleigh",
    }
}

/// Side information of one attack run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackInfo {
    pub iterations: Option<usize>,
    pub restarts: Option<usize>,
    pub validation_mse: Option<f64>,
    pub queries: Option<usize>,
}

/// One (attack, channel) cell of the eavesdropping grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub attack: AttackKind,
    pub channel: ChannelSpec,
    pub channel_seed: u64,
    pub attack_seed: u64,
    pub info: AttackInfo,
    pub report: MetricReport,
}

impl CellRecord {
    pub fn key(&self) -> String {
        cell_key(self.attack, &self.channel)
    }
}

pub fn cell_key(attack: AttackKind, spec: &ChannelSpec) -> String {
    format!("{}/{}/{}", attack, family_name(spec.family), spec.snr_db)
}

/// One row of the defense table: an attack on the container signal scored against the
/// host and against the hidden private image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub attack: AttackKind,
    pub channel: ChannelSpec,
    pub info: AttackInfo,
    pub vs_host: MetricReport,
    pub vs_private: MetricReport,
}

/// Bob's private-image quality with and without the steganography module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub channel: ChannelSpec,
    pub undefended: MetricReport,
    pub defended: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Content hash of each stage checkpoint.
    pub checkpoints: BTreeMap<String, String>,
    /// Per-epoch training loss of every stage trained in this run.
    pub curves: BTreeMap<String, Vec<f64>>,
    pub identities: usize,
    pub identity_accuracy: f64,
    pub cells: Vec<CellRecord>,
    pub defense: Vec<DefenseRow>,
    pub utility: Vec<UtilityRow>,
    pub failures: Vec<StageFailure>,
    pub plots: Vec<PathBuf>,
}

impl ExperimentRecord {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            config_hash: config.hash(),
            config: config.clone(),
            checkpoints: BTreeMap::new(),
            curves: BTreeMap::new(),
            identities: 0,
            identity_accuracy: 0.0,
            cells: Vec::new(),
            defense: Vec::new(),
            utility: Vec::new(),
            failures: Vec::new(),
            plots: Vec::new(),
        }
    }

    /// Chance level of identification, `1/#identities`.
    pub fn chance(&self) -> f64 {
        1.0 / self.identities.max(1) as f64
    }

    pub fn cell(&self, attack: AttackKind, spec: &ChannelSpec) -> Option<&CellRecord> {
        let key = cell_key(attack, spec);
        self.cells.iter().find(|c| c.key() == key)
    }

    pub fn fail(&mut self, stage: impl Into<String>, err: impl fmt::Display) {
        let stage = stage.into();
        log::error!("stage {stage} failed: {err}");
        self.failures.push(StageFailure {
            stage,
            message: err.to_string(),
        });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Every per-sample metric row, one JSON object per line.
    pub fn write_metrics_log(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = std::io::BufWriter::new(file);
        let mut line = |v: serde_json::Value| writeln!(w, "{v}").map_err(io_err(path));
        for c in &self.cells {
            line(metric_line("attack", c.attack, &c.channel, "original", &c.report))?;
        }
        for d in &self.defense {
            line(metric_line("defense", d.attack, &d.channel, "host", &d.vs_host))?;
            line(metric_line("defense", d.attack, &d.channel, "private", &d.vs_private))?;
        }
        for u in &self.utility {
            line(metric_line("utility", AttackKind::Decoder, &u.channel, "undefended", &u.undefended))?;
            line(metric_line("utility", AttackKind::Decoder, &u.channel, "defended", &u.defended))?;
        }
        w.flush().map_err(io_err(path))
    }

    /// Descriptions of every per-sample metric that differs between two records.
    pub fn differences(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        let mut cmp = |what: String, a: &MetricReport, b: &MetricReport| {
            if !reports_identical(a, b) {
                out.push(what);
            }
        };
        if self.cells.len() != other.cells.len() {
            return vec![format!("cell count {} vs {}", self.cells.len(), other.cells.len())];
        }
        for (a, b) in self.cells.iter().zip(&other.cells) {
            cmp(a.key(), &a.report, &b.report);
        }
        if self.defense.len() != other.defense.len() || self.utility.len() != other.utility.len() {
            return vec![String::from("defense section differs in size")];
        }
        for (a, b) in self.defense.iter().zip(&other.defense) {
            cmp(format!("defense/{}/host", a.attack), &a.vs_host, &b.vs_host);
            cmp(format!("defense/{}/private", a.attack), &a.vs_private, &b.vs_private);
        }
        for (a, b) in self.utility.iter().zip(&other.utility) {
            cmp(format!("utility/{}", a.channel.snr_db), &a.undefended, &b.undefended);
            cmp(format!("utility/{}/defended", a.channel.snr_db), &a.defended, &b.defended);
        }
        out
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Bitwise equality of per-sample rows.
pub fn reports_identical(a: &MetricReport, b: &MetricReport) -> bool {
    bits(&a.psnr) == bits(&b.psnr)
        && bits(&a.ms_ssim) == bits(&b.ms_ssim)
        && bits(&a.perceptual) == bits(&b.perceptual)
        && a.same_identity == b.same_identity
}

fn summary_json(s: Summary) -> serde_json::Value {
    serde_json::json!({ "mean": s.mean, "std": s.std })
}

fn metric_line(section: &str, attack: AttackKind, spec: &ChannelSpec, target: &str, r: &MetricReport) -> serde_json::Value {
    serde_json::json!({
        "section": section,
        "attack": attack.name(),
        "family": family_name(spec.family),
        "snr_db": spec.snr_db,
        "target": target,
        "n_samples": r.n_samples,
        "fpesr": r.fpesr,
        "psnr": summary_json(r.psnr_summary()),
        "ms_ssim": summary_json(r.ms_ssim_summary()),
        "perceptual": summary_json(r.perceptual_summary()),
        "rows": {
            "psnr": r.psnr,
            "ms_ssim": r.ms_ssim,
            "perceptual": r.perceptual,
            "same_identity": r.same_identity,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attack_kind_names_round_trip() {
        let mut all = vec![AttackKind::Decoder];
        all.extend(Strategy::ALL.map(AttackKind::Strategy));
        for k in all {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<AttackKind>(&json).unwrap(), k);
        }
        assert!("open-box".parse::<AttackKind>().is_err());
    }
}
