//! Accelerator description: PE array, banked activation memory geometry and
//! per-access energy costs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{binomial, is_pow2};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed hardware document: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("{field} = {value} is not a power of two")]
    NotPow2 { field: &'static str, value: u64 },
    #[error("{0}")]
    Geometry(String),
    #[error("unknown hardware preset `{0}` (expected isscc22, vlsi21 or proposed)")]
    UnknownPreset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryGeometry {
    pub word_bits: u32,
    pub bd_bits: u32,
    pub pd_bits: u32,
    pub md_bits: u32,
    pub size_bytes: u64,
}

impl MemoryGeometry {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("word_bits", self.word_bits),
            ("bd_bits", self.bd_bits),
            ("pd_bits", self.pd_bits),
            ("md_bits", self.md_bits),
        ] {
            if !is_pow2(u64::from(value)) {
                return Err(ConfigError::NotPow2 {
                    field,
                    value: u64::from(value),
                });
            }
        }
        if self.word_bits > self.bd_bits {
            return Err(ConfigError::Geometry(format!(
                "word_bits ({}) exceeds bd_bits ({})",
                self.word_bits, self.bd_bits
            )));
        }
        if self.bd_bits > self.pd_bits {
            return Err(ConfigError::Geometry(format!(
                "bd_bits ({}) exceeds pd_bits ({})",
                self.bd_bits, self.pd_bits
            )));
        }
        if self.pd_bits > self.md_bits {
            return Err(ConfigError::Geometry(format!(
                "pd_bits ({}) exceeds md_bits ({})",
                self.pd_bits, self.md_bits
            )));
        }
        if self.bank_count() > 4096 {
            return Err(ConfigError::Geometry(format!(
                "{} banks exceeds the supported maximum of 4096",
                self.bank_count()
            )));
        }
        if self.size_bytes * 8 < u64::from(self.md_bits) {
            return Err(ConfigError::Geometry(format!(
                "size_bytes ({}) is smaller than one memory-wide row",
                self.size_bytes
            )));
        }
        Ok(())
    }

    pub fn bd_words(&self) -> u32 {
        self.bd_bits / self.word_bits
    }

    pub fn pd_words(&self) -> u32 {
        self.pd_bits / self.word_bits
    }

    pub fn md_words(&self) -> u32 {
        self.md_bits / self.word_bits
    }

    pub fn bank_count(&self) -> u32 {
        self.md_bits / self.bd_bits
    }

    pub fn port_banks(&self) -> u32 {
        self.pd_bits / self.bd_bits
    }

    /// Rows per bank.
    pub fn bank_rows(&self) -> u64 {
        self.size_bytes * 8 / u64::from(self.md_bits)
    }

    pub fn capacity_words(&self) -> u64 {
        self.size_bytes * 8 / u64::from(self.word_bits)
    }
}

/// Distinct sets of banks the port may open in one cycle.
pub fn bank_access_patterns(geo: &MemoryGeometry) -> u128 {
    binomial(u64::from(geo.bank_count()), u64::from(geo.port_banks()))
}

/// Bank-to-port multiplexers required for free bank selection.
pub fn multiplexer_count(geo: &MemoryGeometry) -> u64 {
    u64::from(geo.bank_count()) * u64::from(geo.port_banks())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PEArray {
    pub rows: u32,
    pub cols: u32,
}

impl PEArray {
    pub fn pe_count(&self) -> u32 {
        self.rows * self.cols
    }
}

/// Per-access energies in pJ.
///
/// `activation_mem_access_pj` is the cost of one full-port access; a single
/// bank row costs that divided by the number of banks behind the port.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyModel {
    pub activation_mem_access_pj: f64,
    pub weight_mem_access_pj: f64,
    pub dram_access_pj: f64,
    pub mac_pj: f64,
    pub reg_access_pj: f64,
}

impl EnergyModel {
    /// Synthetic defaults scaled by memory width. Relative magnitudes only.
    pub fn synthetic(geo: &MemoryGeometry) -> Self {
        let per_bit = 0.15;
        let row = per_bit * f64::from(geo.bd_bits);
        EnergyModel {
            activation_mem_access_pj: row * f64::from(geo.port_banks()),
            weight_mem_access_pj: per_bit * f64::from(geo.word_bits),
            dram_access_pj: 8.0 * f64::from(geo.word_bits),
            mac_pj: 0.2,
            reg_access_pj: 0.04,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let values = [
            self.activation_mem_access_pj,
            self.weight_mem_access_pj,
            self.dram_access_pj,
            self.mac_pj,
            self.reg_access_pj,
        ];
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ConfigError::Geometry(
                "energy costs must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcceleratorConfig {
    pub name: String,
    pub pe: PEArray,
    pub act_mem: MemoryGeometry,
    pub energy: EnergyModel,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    name: String,
    pe: PEArray,
    act_mem: MemoryGeometry,
    #[serde(default)]
    energy: Option<EnergyModel>,
}

impl AcceleratorConfig {
    pub fn new(name: &str, pe: PEArray, act_mem: MemoryGeometry) -> Result<Self, ConfigError> {
        let energy = EnergyModel::synthetic(&act_mem);
        let cfg = AcceleratorConfig {
            name: name.to_string(),
            pe,
            act_mem,
            energy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pe.rows == 0 || self.pe.cols == 0 {
            return Err(ConfigError::Geometry("PE array dimensions must be >= 1".into()));
        }
        let count = u64::from(self.pe.rows) * u64::from(self.pe.cols);
        if !is_pow2(count) {
            return Err(ConfigError::NotPow2 {
                field: "pe_count",
                value: count,
            });
        }
        self.act_mem.validate()?;
        self.energy.validate()
    }

    pub fn pe_count(&self) -> u32 {
        self.pe.pe_count()
    }

    /// Energy of one bank-row activation.
    pub fn row_energy_pj(&self) -> f64 {
        self.energy.activation_mem_access_pj / f64::from(self.act_mem.port_banks())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (pe, geo) = match name {
            "isscc22" => (
                PEArray { rows: 16, cols: 16 },
                MemoryGeometry {
                    word_bits: 8,
                    bd_bits: 128,
                    pd_bits: 128,
                    md_bits: 4096,
                    size_bytes: 256 * 1024,
                },
            ),
            "vlsi21" => (
                PEArray { rows: 32, cols: 64 },
                MemoryGeometry {
                    word_bits: 8,
                    bd_bits: 128,
                    pd_bits: 1024,
                    md_bits: 2048,
                    size_bytes: 1024 * 1024,
                },
            ),
            "proposed" => (
                PEArray { rows: 32, cols: 32 },
                MemoryGeometry {
                    word_bits: 8,
                    bd_bits: 64,
                    pd_bits: 128,
                    md_bits: 1024,
                    size_bytes: 512 * 1024,
                },
            ),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        AcceleratorConfig::new(name, pe, geo)
    }

    pub const PRESETS: [&'static str; 3] = ["isscc22", "vlsi21", "proposed"];
}

pub fn parse_config(text: &str) -> Result<AcceleratorConfig, ConfigError> {
    let doc: ConfigDoc = serde_json::from_str(text)?;
    let energy = doc
        .energy
        .unwrap_or_else(|| EnergyModel::synthetic(&doc.act_mem));
    let cfg = AcceleratorConfig {
        name: doc.name,
        pe: doc.pe,
        act_mem: doc.act_mem,
        energy,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(bd: u32, pd: u32, md: u32) -> MemoryGeometry {
        MemoryGeometry {
            word_bits: 8,
            bd_bits: bd,
            pd_bits: pd,
            md_bits: md,
            size_bytes: 64 * 1024,
        }
    }

    #[test]
    fn presets_derive_widths() {
        let p = AcceleratorConfig::preset("proposed").unwrap();
        assert_eq!(p.pe_count(), 1024);
        assert_eq!(p.act_mem.bank_count(), 16);
        assert_eq!(p.act_mem.port_banks(), 2);
        let i = AcceleratorConfig::preset("isscc22").unwrap();
        assert_eq!(i.pe_count(), 256);
        assert_eq!(i.act_mem.port_banks(), 1);
        assert_eq!(i.act_mem.bank_count(), 32);
        let v = AcceleratorConfig::preset("vlsi21").unwrap();
        assert_eq!(v.pe_count(), 2048);
        assert_eq!(v.act_mem.port_banks(), 8);
        assert!(AcceleratorConfig::preset("tpu").is_err());
    }

    #[test]
    fn widths_compose() {
        for name in AcceleratorConfig::PRESETS {
            let g = AcceleratorConfig::preset(name).unwrap().act_mem;
            assert_eq!(g.pd_words(), g.bd_words() * g.port_banks());
            assert_eq!(g.md_words(), g.bd_words() * g.bank_count());
        }
    }

    #[test]
    fn presets_round_trip() {
        for name in AcceleratorConfig::PRESETS {
            let cfg = AcceleratorConfig::preset(name).unwrap();
            assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn rejects_bad_widths() {
        assert!(matches!(
            geo(96, 128, 1024).validate(),
            Err(ConfigError::NotPow2 { field: "bd_bits", .. })
        ));
        assert!(geo(256, 128, 1024).validate().is_err());
        assert!(geo(64, 2048, 1024).validate().is_err());
        assert!(geo(64, 128, 1024).validate().is_ok());
    }

    #[test]
    fn energy_block_is_optional() {
        let text = r#"{"name":"x","pe":{"rows":4,"cols":4},
            "act_mem":{"word_bits":8,"bd_bits":32,"pd_bits":64,"md_bits":128,"size_bytes":4096}}"#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.energy, EnergyModel::synthetic(&cfg.act_mem));
        assert!((cfg.row_energy_pj() * 2.0 - cfg.energy.activation_mem_access_pj).abs() < 1e-12);
    }

    #[test]
    fn access_patterns() {
        // Three banks is not a legal power-of-two geometry; check the count directly.
        assert_eq!(binomial(3, 2), 3);
        assert_eq!(bank_access_patterns(&geo(64, 1024, 1024)), 1);
        let pairs = (0..16u32)
            .flat_map(|a| (a + 1..16).map(move |b| (a, b)))
            .count() as u128;
        assert_eq!(bank_access_patterns(&geo(64, 128, 1024)), pairs);
        assert_eq!(multiplexer_count(&geo(64, 128, 1024)), 32);
    }
}
