//! Bandwidth- and occupancy-level model of the stacked ReRAM, the codebook
//! placement across dies and chips, and the external DRAM link.
//!
//! Bandwidths and capacities are integers (bytes, bytes/s) so the headline
//! figures come out exact. Times and energies are `f64`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemError {
    #[error("codebook entry must have a positive bit width")]
    ZeroEntry,
    #[error("need {needed_bits} bits but only {available_bits} are available")]
    CapacityOverflow { needed_bits: u64, available_bits: u64 },
    #[error("entry id {entry} out of range for a layout with {entries} entries")]
    InvalidEntry { entry: u32, entries: u32 },
    #[error("invalid memory config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub reram_pj_per_byte: f64,
    pub dram_pj_per_byte: f64,
    pub pj_per_mac: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            reram_pj_per_byte: 4.0,
            dram_pj_per_byte: 40.0,
            pj_per_mac: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub dies_per_chip: u64,
    pub capacity_per_die_bytes: u64,
    pub bump_bits_per_cycle: u64,
    pub reram_clock_hz: u64,
    pub bank_width_bits: u64,
    pub banks_per_die: u64,
    pub chips: u64,
    pub dram_bandwidth_bytes_per_s: f64,
    pub energy: EnergyConfig,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            dies_per_chip: 4,
            capacity_per_die_bytes: 2 << 20,
            bump_bits_per_cycle: 2048,
            reram_clock_hz: 100_000_000,
            bank_width_bits: 512,
            banks_per_die: 8,
            chips: 1,
            dram_bandwidth_bytes_per_s: 12.8e9,
            energy: EnergyConfig::default(),
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<(), MemError> {
        let bad = |m: &str| Err(MemError::Config(m.to_string()));
        if self.dies_per_chip == 0 || self.chips == 0 || self.banks_per_die == 0 {
            return bad("dies_per_chip, chips and banks_per_die must be positive");
        }
        if self.bump_bits_per_cycle == 0 || self.bump_bits_per_cycle % 8 != 0 {
            return bad("bump_bits_per_cycle must be a positive multiple of 8");
        }
        if self.reram_clock_hz == 0 || self.bank_width_bits == 0 {
            return bad("reram_clock_hz and bank_width_bits must be positive");
        }
        if self.capacity_per_die_bytes * 8 % (self.banks_per_die * self.bank_width_bits) != 0 {
            return bad("die capacity must be a whole number of bank rows");
        }
        if !(self.dram_bandwidth_bytes_per_s.is_finite() && self.dram_bandwidth_bytes_per_s > 0.0) {
            return bad("dram_bandwidth_bytes_per_s must be positive");
        }
        let e = &self.energy;
        if [e.reram_pj_per_byte, e.dram_pj_per_byte, e.pj_per_mac]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("energy constants must be non-negative");
        }
        Ok(())
    }

    /// Peak ReRAM read bandwidth of one chip, bytes/s.
    pub fn peak_reram_bandwidth(&self) -> u64 {
        self.bump_bits_per_cycle / 8 * self.reram_clock_hz
    }

    pub fn chip_capacity_bytes(&self) -> u64 {
        self.dies_per_chip * self.capacity_per_die_bytes
    }

    pub fn total_capacity_bytes(&self) -> u64 {
        self.chip_capacity_bytes() * self.chips
    }

    pub fn rows_per_bank(&self) -> u64 {
        self.capacity_per_die_bytes * 8 / (self.banks_per_die * self.bank_width_bits)
    }

    pub fn reram_cycle_seconds(&self) -> f64 {
        1.0 / self.reram_clock_hz as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingMode {
    /// Entry bits striped over every die at one (bank, row).
    #[default]
    Vertical,
    /// Entry bits kept inside one die.
    Horizontal,
}

/// Cycles to read one codebook entry of `entry_bits`.
pub fn reram_read_cycles(entry_bits: u64, config: &StackConfig, mode: MappingMode) -> Result<u64, MemError> {
    if entry_bits == 0 {
        return Err(MemError::ZeroEntry);
    }
    let available_bits = config.chip_capacity_bytes() * 8;
    if entry_bits > available_bits {
        return Err(MemError::CapacityOverflow {
            needed_bits: entry_bits,
            available_bits,
        });
    }
    Ok(match mode {
        MappingMode::Vertical => entry_bits.div_ceil(config.dies_per_chip * config.bank_width_bits),
        MappingMode::Horizontal => entry_bits.div_ceil(config.bank_width_bits),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Location {
    pub chip: u64,
    pub die: u64,
    pub bank: u64,
    pub row: u64,
}

/// Placement of every codebook entry. Entry ids run layer by layer, codebook
/// by codebook, entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CbLayout {
    pub config: StackConfig,
    pub mode: MappingMode,
    pub cilm: bool,
    pub entry_bits: u64,
    pub entries_per_codebook: u32,
    /// Codebook count per layer.
    pub layer_codebooks: Vec<u32>,
    /// Chip of each codebook, flattened over layers.
    pub codebook_chip: Vec<u64>,
    /// Every (chip, die, bank, row) touched by each entry.
    pub placement: Vec<Vec<Location>>,
}

impl CbLayout {
    /// Places codebooks on chips (round-robin within a layer under CILM,
    /// whole layers round-robin otherwise), then lays entries out row by
    /// row on their chip.
    pub fn new(
        config: &StackConfig,
        mode: MappingMode,
        cilm: bool,
        entry_bits: u64,
        entries_per_codebook: u32,
        layer_codebooks: &[u32],
    ) -> Result<Self, MemError> {
        config.validate()?;
        let rows_per_entry = reram_read_cycles(entry_bits, config, mode)?;
        let rows_per_bank = config.rows_per_bank();
        // Per-chip cursor: vertical counts (bank, row) slots shared by all
        // dies; horizontal counts (die, bank, row) slots.
        let slots_per_chip = match mode {
            MappingMode::Vertical => config.banks_per_die * rows_per_bank,
            MappingMode::Horizontal => config.dies_per_chip * config.banks_per_die * rows_per_bank,
        };
        let mut cursor = vec![0u64; config.chips as usize];
        let mut codebook_chip = Vec::new();
        let mut placement = Vec::new();
        for (layer, &books) in layer_codebooks.iter().enumerate() {
            for book in 0..books as u64 {
                let chip = if cilm { book % config.chips } else { layer as u64 % config.chips };
                codebook_chip.push(chip);
                for _ in 0..entries_per_codebook {
                    let start = cursor[chip as usize];
                    // Keep an entry's rows inside one die for horizontal mode.
                    let start = match mode {
                        MappingMode::Horizontal => {
                            let per_die = config.banks_per_die * rows_per_bank;
                            if start % per_die + rows_per_entry > per_die {
                                start.next_multiple_of(per_die)
                            } else {
                                start
                            }
                        }
                        MappingMode::Vertical => start,
                    };
                    let end = start + rows_per_entry;
                    if end > slots_per_chip {
                        return Err(MemError::CapacityOverflow {
                            needed_bits: end * config.bank_width_bits
                                * if mode == MappingMode::Vertical { config.dies_per_chip } else { 1 },
                            available_bits: config.chip_capacity_bytes() * 8,
                        });
                    }
                    cursor[chip as usize] = end;
                    let mut locs = Vec::new();
                    for slot in start..end {
                        match mode {
                            MappingMode::Vertical => {
                                for die in 0..config.dies_per_chip {
                                    locs.push(Location {
                                        chip,
                                        die,
                                        bank: slot / rows_per_bank,
                                        row: slot % rows_per_bank,
                                    });
                                }
                            }
                            MappingMode::Horizontal => {
                                let per_die = config.banks_per_die * rows_per_bank;
                                locs.push(Location {
                                    chip,
                                    die: slot / per_die,
                                    bank: slot % per_die / rows_per_bank,
                                    row: slot % rows_per_bank,
                                });
                            }
                        }
                    }
                    placement.push(locs);
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            mode,
            cilm,
            entry_bits,
            entries_per_codebook,
            layer_codebooks: layer_codebooks.to_vec(),
            codebook_chip,
            placement,
        })
    }

    pub fn entry_count(&self) -> u32 {
        self.placement.len() as u32
    }

    pub fn entry_cycles(&self) -> u64 {
        reram_read_cycles(self.entry_bits, &self.config, self.mode).expect("validated at construction")
    }

    /// Effective bytes/s when loading all codebooks of `layer`: the chip
    /// holding the largest share sets the load time.
    pub fn layer_load_bandwidth(&self, layer: usize) -> u64 {
        let first: usize = self.layer_codebooks[..layer].iter().map(|&b| b as usize).sum();
        let books = self.layer_codebooks[layer] as usize;
        let mut per_chip = vec![0u64; self.config.chips as usize];
        for &chip in &self.codebook_chip[first..first + books] {
            per_chip[chip as usize] += 1;
        }
        let busiest = per_chip.into_iter().max().unwrap_or(0);
        if busiest == 0 {
            return 0;
        }
        // layer bytes / (busiest bytes / peak) with the entry size cancelled.
        books as u64 * self.config.peak_reram_bandwidth() / busiest
    }
}

/// Effective codebook loading bandwidth across `config.chips` chips.
pub fn cilm_bandwidth(config: &StackConfig, cilm: bool) -> u64 {
    if cilm {
        config.chips * config.peak_reram_bandwidth()
    } else {
        config.peak_reram_bandwidth()
    }
}

/// Ordered `(tile, entry)` codebook accesses for one layer.
pub type FetchTrace = Vec<(u32, u32)>;

/// `(naive, fused)` read cycles; fusion fetches each distinct entry once.
pub fn fused_fetch_cycles(trace: &[(u32, u32)], layout: &CbLayout) -> Result<(u64, u64), MemError> {
    let entries = layout.entry_count();
    let per = layout.entry_cycles();
    let mut distinct = BTreeSet::new();
    for &(_, entry) in trace {
        if entry >= entries {
            return Err(MemError::InvalidEntry { entry, entries });
        }
        distinct.insert(entry);
    }
    Ok((trace.len() as u64 * per, distinct.len() as u64 * per))
}

/// `(seconds, joules)` to stream `bytes` from external DRAM.
pub fn ema_time_and_energy(bytes: f64, config: &StackConfig) -> (f64, f64) {
    (
        bytes / config.dram_bandwidth_bytes_per_s,
        bytes * config.energy.dram_pj_per_byte * 1e-12,
    )
}

pub fn reram_energy(bytes: f64, config: &StackConfig) -> f64 {
    bytes * config.energy.reram_pj_per_byte * 1e-12
}

pub fn mac_energy(macs: f64, config: &StackConfig) -> f64 {
    macs * config.energy.pj_per_mac * 1e-12
}
