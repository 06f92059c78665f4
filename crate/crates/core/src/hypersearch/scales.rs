use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelSpec;

use super::init_hs_scales;

pub const SCALES_FORMAT: &str = "gradrep-scales";
pub const SCALES_VERSION: u32 = 1;

/// Where a scales file came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub block_id: usize,
    pub c_out: usize,
    #[serde(with = "hex_floats")]
    pub s: Vec<f64>,
    #[serde(with = "hex_floats")]
    pub t: Vec<f64>,
    pub has_identity: bool,
}

/// Per-block constant scales consumed by the RepOptimizer.
///
/// Stored as JSON; every float is written as the 16-hex-digit IEEE-754 bit
/// pattern of the f64 (`"3ff0000000000000"` is 1.0), so files round-trip
/// exactly:
///
/// ```json
/// { "format": "gradrep-scales", "version": 1,
///   "provenance": { "dataset": "...", "seed": 0, "epochs": 2 },
///   "blocks": [ { "block_id": 0, "c_out": 8, "s": ["..."], "t": ["..."],
///                 "has_identity": false } ] }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalesFile {
    pub format: String,
    pub version: u32,
    pub provenance: Provenance,
    pub blocks: Vec<ScaleRecord>,
}

mod hex_floats {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| format!("{:016x}", x.to_bits())))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|h| {
                if h.len() != 16 {
                    return Err(D::Error::custom(format!("float '{h}' is not 16 hex digits")));
                }
                u64::from_str_radix(h, 16)
                    .map(f64::from_bits)
                    .map_err(|_| D::Error::custom(format!("float '{h}' is not hexadecimal")))
            })
            .collect()
    }
}

fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    let line = e.line().max(1);
    let offset: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum::<usize>() + e.column().saturating_sub(1);
    Error::Parse {
        offset: offset as u64,
        reason: e.to_string(),
    }
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u32>,
}

/// Scale substitution of the optimizer ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    /// Every s and t set to 1.
    AllOnes,
    /// s and t reset to the hyper-search initial values √(2/l).
    HsInit,
    /// Each vector replaced by its mean.
    ChannelMean,
}

impl DegradeMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name.replace('-', "_").as_str() {
            "all_ones" => Ok(DegradeMode::AllOnes),
            "hs_init" => Ok(DegradeMode::HsInit),
            "channel_mean" => Ok(DegradeMode::ChannelMean),
            _ => Err(Error::Config(format!("unknown scales mode '{name}'"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DegradeMode::AllOnes => "all_ones",
            DegradeMode::HsInit => "hs_init",
            DegradeMode::ChannelMean => "channel_mean",
        }
    }
}

impl ScalesFile {
    pub fn new(provenance: Provenance, blocks: Vec<ScaleRecord>) -> Self {
        ScalesFile {
            format: SCALES_FORMAT.into(),
            version: SCALES_VERSION,
            provenance,
            blocks,
        }
    }

    /// The same constants for every channel of every block.
    pub fn uniform(spec: &ModelSpec, s: f64, t: f64) -> Self {
        let blocks = spec
            .blocks()
            .iter()
            .map(|g| ScaleRecord {
                block_id: g.index,
                c_out: g.c_out,
                s: vec![s; g.c_out],
                t: vec![t; g.c_out],
                has_identity: g.has_identity,
            })
            .collect();
        Self::new(
            Provenance {
                dataset: "constant".into(),
                seed: 0,
                epochs: 0,
            },
            blocks,
        )
    }

    /// Every record present, sized and flagged as `spec` requires.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let geoms = spec.blocks();
        if self.blocks.len() != geoms.len() {
            return Err(Error::layer(
                "scales",
                format!("model has {} blocks but the scales file has {} records", geoms.len(), self.blocks.len()),
            ));
        }
        for (g, r) in geoms.iter().zip(&self.blocks) {
            let name = format!("block{}", g.index);
            if r.block_id != g.index {
                return Err(Error::layer(name, format!("scales record has block_id {}", r.block_id)));
            }
            if r.c_out != g.c_out || r.s.len() != g.c_out || r.t.len() != g.c_out {
                return Err(Error::layer(
                    name,
                    format!("expected {} channels, scales record has c_out={} |s|={} |t|={}", g.c_out, r.c_out, r.s.len(), r.t.len()),
                ));
            }
            if r.has_identity != g.has_identity {
                return Err(Error::layer(name, "identity flag of the scales record disagrees with the block geometry"));
            }
            if r.s.iter().chain(&r.t).any(|v| !v.is_finite()) {
                return Err(Error::layer(name, "non-finite scale"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        match header.format.as_deref() {
            Some(SCALES_FORMAT) => {}
            Some(other) => {
                return Err(Error::Parse {
                    offset: 0,
                    reason: format!("format tag '{other}', expected '{SCALES_FORMAT}'"),
                })
            }
            None => {
                return Err(Error::Parse {
                    offset: 0,
                    reason: "missing format tag".into(),
                })
            }
        }
        match header.version {
            Some(SCALES_VERSION) => {}
            Some(found) => {
                return Err(Error::Version {
                    found,
                    expected: SCALES_VERSION,
                })
            }
            None => {
                return Err(Error::Parse {
                    offset: 0,
                    reason: "missing version".into(),
                })
            }
        }
        serde_json::from_str(text).map_err(|e| parse_error(text, &e))
    }
}

pub fn export_scales(path: &Path, scales: &ScalesFile) -> Result<()> {
    fs::write(path, scales.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

pub fn import_scales(path: &Path) -> Result<ScalesFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScalesFile::from_json(&text)
}

/// Replace the searched constants as in the optimizer ablations. `HsInit`
/// restarts l at every block without identity, which is how stages begin.
pub fn degrade_scales(f: &ScalesFile, mode: DegradeMode) -> ScalesFile {
    let mut out = f.clone();
    let mut depth = 0;
    for r in &mut out.blocks {
        match mode {
            DegradeMode::AllOnes => {
                r.s.fill(1.0);
                r.t.fill(1.0);
            }
            DegradeMode::ChannelMean => {
                for v in [&mut r.s, &mut r.t] {
                    let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
                    v.fill(m);
                }
            }
            DegradeMode::HsInit => {
                depth = if r.has_identity { depth + 1 } else { 0 };
                let v = if r.has_identity { init_hs_scales(depth) } else { 1.0 };
                r.s.fill(v);
                r.t.fill(v);
            }
        }
    }
    out.provenance.dataset = format!("{} ({})", f.provenance.dataset, mode.label());
    out
}
