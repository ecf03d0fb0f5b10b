//! Static hardware model: cores, banked and colour-partitioned LLC, DRAM
//! bandwidth pool and the integrated GPU with its throttle curve.
//!
//! Defaults are calibrated to a Jetson Nano class board (4x Cortex-A57 @
//! 1.43 GHz, 2 MiB 16-way L2, 25.6 GB/s LPDDR4).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type CoreId = usize;
pub type BankId = usize;
pub type Color = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlcSpec {
    pub size_bytes: u64,
    pub ways: u32,
    pub num_banks: usize,
    /// Accesses per second a single bank can serve.
    pub bank_peak_rate: f64,
    pub hit_latency_ns: f64,
    pub num_colors: u32,
    pub line_bytes: u64,
}

impl Default for LlcSpec {
    fn default() -> Self {
        LlcSpec {
            size_bytes: 2 * 1024 * 1024,
            ways: 16,
            num_banks: 8,
            bank_peak_rate: 125.0e6,
            hit_latency_ns: 20.0,
            num_colors: 4,
            line_bytes: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramSpec {
    pub peak_bw_bytes_per_s: f64,
    pub access_latency_ns: f64,
    /// Capacity cost multiplier applied to write traffic.
    pub write_penalty: f64,
}

impl Default for DramSpec {
    fn default() -> Self {
        DramSpec {
            peak_bw_bytes_per_s: 25.6e9,
            access_latency_ns: 120.0,
            write_penalty: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpuSpec {
    pub num_throttle_levels: u32,
    /// Uncontended DRAM bandwidth the GPU can draw at throttle level 0.
    pub mem_share_bytes_per_s: f64,
    /// Bandwidth fraction per throttle level, `throttle_curve[0] == 1`.
    pub throttle_curve: Vec<f64>,
}

/// `f(L) = 1` up to level 15, then linear down to 0.47 at level 31.
pub fn default_throttle_curve(levels: u32) -> Vec<f64> {
    (0..levels)
        .map(|l| {
            if l <= 15 {
                1.0
            } else {
                1.0 - 0.53 * (l - 15) as f64 / 16.0
            }
        })
        .collect()
}

impl Default for GpuSpec {
    fn default() -> Self {
        GpuSpec {
            num_throttle_levels: 32,
            mem_share_bytes_per_s: 21.76e9,
            throttle_curve: default_throttle_curve(32),
        }
    }
}

impl GpuSpec {
    pub fn fraction(&self, level: u32) -> Option<f64> {
        self.throttle_curve.get(level as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformSpec {
    pub num_cores: usize,
    pub core_freq_hz: f64,
    pub llc: LlcSpec,
    pub dram: DramSpec,
    pub gpu: GpuSpec,
}

impl Default for PlatformSpec {
    fn default() -> Self {
        default_platform()
    }
}

pub fn default_platform() -> PlatformSpec {
    PlatformSpec {
        num_cores: 4,
        core_freq_hz: 1.43e9,
        llc: LlcSpec::default(),
        dram: DramSpec::default(),
        gpu: GpuSpec::default(),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlatformError {
    #[error("num_cores must be at least 1")]
    NoCores,
    #[error("core_freq_hz must be positive")]
    BadFrequency,
    #[error("llc size {size} is not divisible by ways x colors x line ({unit})")]
    LlcGeometry { size: u64, unit: u64 },
    #[error("llc needs at least one bank and a positive bank rate")]
    BadBanks,
    #[error("dram peak bandwidth must be positive")]
    BadDram,
    #[error("gpu throttle curve must have {expected} entries, start at 1 and be non-increasing in (0, 1]")]
    BadThrottleCurve { expected: u32 },
    #[error("partitions {a} and {b} overlap")]
    OverlappingPartitions { a: usize, b: usize },
    #[error("partition {partition} references unknown core {core}")]
    UnknownCore { partition: usize, core: CoreId },
    #[error("task {task} uses color {color} but the LLC has {num_colors} colors")]
    InvalidColor {
        task: String,
        color: Color,
        num_colors: u32,
    },
}

impl PlatformSpec {
    pub fn validate(&self) -> Result<(), PlatformError> {
        if self.num_cores == 0 {
            return Err(PlatformError::NoCores);
        }
        if !(self.core_freq_hz > 0.0) {
            return Err(PlatformError::BadFrequency);
        }
        let unit = self.llc.ways as u64 * self.llc.num_colors as u64 * self.llc.line_bytes;
        if unit == 0 || self.llc.size_bytes % unit != 0 {
            return Err(PlatformError::LlcGeometry {
                size: self.llc.size_bytes,
                unit,
            });
        }
        if self.llc.num_banks == 0 || !(self.llc.bank_peak_rate > 0.0) {
            return Err(PlatformError::BadBanks);
        }
        if !(self.dram.peak_bw_bytes_per_s > 0.0) {
            return Err(PlatformError::BadDram);
        }
        let curve = &self.gpu.throttle_curve;
        let ok = curve.len() == self.gpu.num_throttle_levels as usize
            && curve.first() == Some(&1.0)
            && curve.iter().all(|&f| f > 0.0 && f <= 1.0)
            && curve.windows(2).all(|w| w[1] <= w[0]);
        if !ok {
            return Err(PlatformError::BadThrottleCurve {
                expected: self.gpu.num_throttle_levels,
            });
        }
        Ok(())
    }

    pub fn cycles_to_ns(&self, cycles: f64) -> f64 {
        cycles / self.core_freq_hz * 1e9
    }
}

/// Static gang partitions and per-task colour sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub gang_partitions: Vec<BTreeSet<CoreId>>,
    pub color_assignment: BTreeMap<String, BTreeSet<Color>>,
}

impl PartitionConfig {
    pub fn partition_of(&self, core: CoreId) -> Option<usize> {
        self.gang_partitions.iter().position(|p| p.contains(&core))
    }
}

pub fn validate_partitions(
    spec: &PlatformSpec,
    cfg: &PartitionConfig,
) -> Result<(), PlatformError> {
    for (i, part) in cfg.gang_partitions.iter().enumerate() {
        if let Some(&core) = part.iter().find(|&&c| c >= spec.num_cores) {
            return Err(PlatformError::UnknownCore { partition: i, core });
        }
        for (j, other) in cfg.gang_partitions.iter().enumerate().skip(i + 1) {
            if !part.is_disjoint(other) {
                return Err(PlatformError::OverlappingPartitions { a: i, b: j });
            }
        }
    }
    for (task, colors) in &cfg.color_assignment {
        if let Some(&color) = colors.iter().find(|&&c| c >= spec.llc.num_colors) {
            return Err(PlatformError::InvalidColor {
                task: task.clone(),
                color,
                num_colors: spec.llc.num_colors,
            });
        }
    }
    Ok(())
}

/// Maps the `access_index`-th access of a uniformly spread stream to a bank.
/// Colours select sets, not banks, so this is independent of colouring.
pub fn bank_of(access_index: u64, llc: &LlcSpec) -> BankId {
    (access_index % llc.num_banks as u64) as BankId
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set<T: Ord + Copy>(xs: &[T]) -> BTreeSet<T> {
        xs.iter().copied().collect()
    }

    #[test]
    fn jetson_nano_defaults() {
        let p = default_platform();
        assert_eq!(p.num_cores, 4);
        assert_eq!(p.core_freq_hz, 1.43e9);
        assert_eq!(p.llc.size_bytes, 2_097_152);
        assert_eq!(p.llc.ways, 16);
        assert_eq!(p.llc.num_colors, 4);
        assert_eq!(p.llc.num_banks, 8);
        assert_eq!(p.dram.peak_bw_bytes_per_s, 25_600_000_000.0);
        assert_eq!(p.gpu.num_throttle_levels, 32);
        p.validate().unwrap();
    }

    #[test]
    fn two_two_color_split_is_valid() {
        let cfg = PartitionConfig {
            gang_partitions: vec![set(&[0, 1, 2]), set(&[3])],
            color_assignment: [
                ("slam".to_string(), set(&[0, 1])),
                ("dnn".to_string(), set(&[2, 3])),
            ]
            .into_iter()
            .collect(),
        };
        assert_eq!(validate_partitions(&default_platform(), &cfg), Ok(()));
        assert_eq!(cfg.partition_of(2), Some(0));
        assert_eq!(cfg.partition_of(3), Some(1));
    }

    #[test]
    fn overlapping_partitions_rejected() {
        let cfg = PartitionConfig {
            gang_partitions: vec![set(&[0, 1]), set(&[1, 2])],
            ..Default::default()
        };
        assert_eq!(
            validate_partitions(&default_platform(), &cfg),
            Err(PlatformError::OverlappingPartitions { a: 0, b: 1 })
        );
    }

    #[test]
    fn unknown_core_and_bad_color_rejected() {
        let cfg = PartitionConfig {
            gang_partitions: vec![set(&[4])],
            ..Default::default()
        };
        assert!(matches!(
            validate_partitions(&default_platform(), &cfg),
            Err(PlatformError::UnknownCore { core: 4, .. })
        ));
        let cfg = PartitionConfig {
            color_assignment: [("x".to_string(), set(&[5]))].into_iter().collect(),
            ..Default::default()
        };
        assert!(matches!(
            validate_partitions(&default_platform(), &cfg),
            Err(PlatformError::InvalidColor { color: 5, .. })
        ));
    }

    #[test]
    fn bank_mapping_is_modulo() {
        let llc = LlcSpec::default();
        assert_eq!(bank_of(13, &llc), 5);
        let mut counts = vec![0u64; llc.num_banks];
        let n = 100_003u64;
        for i in 0..n {
            counts[bank_of(i, &llc)] += 1;
        }
        let fair = n / llc.num_banks as u64;
        assert!(counts.iter().all(|&c| c.abs_diff(fair) <= 1));
    }

    #[test]
    fn throttle_curve_shape() {
        let g = GpuSpec::default();
        assert_eq!(g.fraction(0), Some(1.0));
        assert_eq!(g.fraction(15), Some(1.0));
        assert!((g.fraction(31).unwrap() - 0.47).abs() < 1e-12);
        assert!((g.fraction(20).unwrap() - (1.0 - 0.53 * 5.0 / 16.0)).abs() < 1e-12);
        assert_eq!(g.fraction(32), None);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut p = default_platform();
        p.llc.size_bytes += 64;
        assert!(matches!(p.validate(), Err(PlatformError::LlcGeometry { .. })));
        let mut p = default_platform();
        p.gpu.throttle_curve[3] = 1.1;
        assert!(p.validate().is_err());
    }
}
