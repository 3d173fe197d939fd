//! Scenario configuration: one versioned TOML file per scenario.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stacksim_core::bvq::BvqConfig;
use stacksim_core::memmodel::StackConfig;
use stacksim_core::rotation::{DEFAULT_DEPTH_CAP, DEFAULT_ORDERS};
use stacksim_core::simkernel::{default_ladder, Rung, WorkloadConfig};
use stacksim_core::specdec::SdPolicyConfig;
use stacksim_core::toymodel::ToyConfig;

use crate::CliError;

pub const SCHEMA: &str = "stacksim.scenario/1";

/// Scenario file compiled into the binary; used when `--config` is absent.
pub const BUNDLED_DEFAULT: &str = include_str!("../config/default.toml");

/// Overrides the report directory when set.
pub const OUT_DIR_ENV: &str = "STACKSIM_OUT_DIR";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationScenario {
    /// Hidden sizes to plan and evaluate.
    pub dims: Vec<usize>,
    pub orders: Vec<usize>,
    pub depth_cap: u32,
    /// Weight columns in each trial GEMM.
    pub out_features: usize,
    /// Trials per seed and dimension.
    pub trials: usize,
    /// Range the outlier coordinate is inflated by.
    pub outlier_min: f64,
    pub outlier_max: f64,
    /// Extra Hadamard matrices in the text format, relative to the config file.
    pub hadamard_files: Vec<PathBuf>,
}

impl Default for RotationScenario {
    fn default() -> Self {
        Self {
            dims: vec![448, 768, 1024],
            orders: DEFAULT_ORDERS.to_vec(),
            depth_cap: DEFAULT_DEPTH_CAP,
            out_features: 1024,
            trials: 2,
            outlier_min: 50.0,
            outlier_max: 200.0,
            hadamard_files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BvqScenario {
    pub rows: usize,
    pub cols: usize,
    pub prototypes: usize,
    pub noise: f64,
    /// CSV matrix (no header) used instead of planted weights.
    pub matrix: Option<PathBuf>,
    /// Training knobs; `seed` is replaced by the scenario seed.
    pub train: BvqConfig,
}

impl Default for BvqScenario {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            prototypes: 4,
            noise: 0.01,
            matrix: None,
            train: BvqConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeScenario {
    pub toy: ToyConfig,
    /// `policy` picks which trace of the first seed is written out.
    pub sd: SdPolicyConfig,
    /// Relative perturbation turning the target into the draft model.
    pub draft_noise: f64,
    pub prompt_len: usize,
}

impl Default for DecodeScenario {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            sd: SdPolicyConfig::default(),
            draft_noise: 0.05,
            prompt_len: 8,
        }
    }
}

/// Grid for `sweep`; an empty list keeps the scenario's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub draft_noise: Vec<f64>,
    pub gamma_long: Vec<usize>,
    pub chips: Vec<u64>,
    pub dram_bandwidth_bytes_per_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub rotation: RotationScenario,
    #[serde(default)]
    pub bvq: BvqScenario,
    #[serde(default)]
    pub memory: StackConfig,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub decode: DecodeScenario,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<Rung>,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    (0..20).collect()
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Invalid {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse {
            origin: origin.to_string(),
            msg: e.to_string(),
        })
    }

    /// Reads and validates a scenario; `None` loads the bundled default.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let mut c = Self::parse(&text, &p.display().to_string())?;
                c.base_dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                c
            }
            None => Self::parse(BUNDLED_DEFAULT, "<bundled default>")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema != SCHEMA {
            return Err(invalid("schema", format!("unrecognized schema {:?}, expected {SCHEMA:?}", self.schema)));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }

        let r = &self.rotation;
        if r.dims.is_empty() || r.dims.contains(&0) {
            return Err(invalid("rotation.dims", "must be a non-empty list of positive sizes"));
        }
        if r.orders.is_empty() || r.orders.contains(&0) {
            return Err(invalid("rotation.orders", "must be a non-empty list of positive orders"));
        }
        if r.out_features == 0 {
            return Err(invalid("rotation.out_features", "must be positive"));
        }
        if !(r.outlier_min.is_finite() && r.outlier_min >= 1.0 && r.outlier_max >= r.outlier_min) {
            return Err(invalid("rotation.outlier_min", "need 1 <= outlier_min <= outlier_max"));
        }

        let b = &self.bvq;
        b.train.validate().map_err(|e| invalid("bvq.train", e))?;
        b.train
            .check_bank_width(self.memory.bank_width_bits)
            .map_err(|e| invalid("bvq.train.block_cols", e))?;
        if b.matrix.is_none() {
            b.train.layout_for(b.rows, b.cols).map_err(|e| invalid("bvq.rows/bvq.cols", e))?;
            if b.prototypes == 0 {
                return Err(invalid("bvq.prototypes", "must be positive"));
            }
        }
        if !(b.noise.is_finite() && b.noise >= 0.0) {
            return Err(invalid("bvq.noise", "must be a non-negative number"));
        }

        self.memory.validate().map_err(|e| invalid("memory", e))?;
        self.workload.validate().map_err(|e| invalid("workload", e))?;

        let d = &self.decode;
        d.toy.validate().map_err(|e| invalid("decode.toy", e))?;
        d.sd.validate().map_err(|e| invalid("decode.sd", e))?;
        if !(d.draft_noise.is_finite() && d.draft_noise >= 0.0) {
            return Err(invalid("decode.draft_noise", "must be a non-negative number"));
        }
        if d.prompt_len == 0 {
            return Err(invalid("decode.prompt_len", "must be positive"));
        }
        if d.prompt_len + d.sd.max_new_tokens > d.toy.max_context {
            return Err(invalid(
                "decode.sd.max_new_tokens",
                format!(
                    "prompt_len {} + max_new_tokens {} exceeds toy.max_context {}",
                    d.prompt_len, d.sd.max_new_tokens, d.toy.max_context
                ),
            ));
        }

        if self.ladder.is_empty() {
            return Err(invalid("ladder", "needs at least one rung"));
        }
        let mut names = BTreeSet::new();
        for (i, rung) in self.ladder.iter().enumerate() {
            if !names.insert(rung.name.as_str()) {
                return Err(invalid(&format!("ladder[{i}].name"), format!("duplicate rung name {:?}", rung.name)));
            }
        }

        let s = &self.sweep;
        if s.draft_noise.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("sweep.draft_noise", "values must be non-negative"));
        }
        if s.gamma_long.iter().any(|&g| g < d.sd.gamma_short || g > 32) {
            return Err(invalid("sweep.gamma_long", "values must lie in [decode.sd.gamma_short, 32]"));
        }
        if s.chips.contains(&0) {
            return Err(invalid("sweep.chips", "values must be positive"));
        }
        if s.dram_bandwidth_bytes_per_s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("sweep.dram_bandwidth_bytes_per_s", "values must be positive"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, output settings excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Report directory: `--out`, then the environment, then the file.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        match &self.output.dir {
            Some(p) => self.resolve(p),
            None => PathBuf::from("out"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_default_is_valid() {
        let c = ScenarioConfig::load(None).unwrap();
        assert_eq!(c.schema, SCHEMA);
        assert_eq!(c.ladder, default_ladder());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = ScenarioConfig::parse(&format!("schema = {SCHEMA:?}\n"), "t").unwrap();
        c.validate().unwrap();
        assert_eq!(c.seeds.len(), 20);
        assert_eq!(c.decode.draft_noise, 0.05);
    }

    #[test]
    fn errors_name_fields() {
        let base = format!("schema = {SCHEMA:?}\n");
        let check = |extra: &str, field: &str| {
            let c = ScenarioConfig::parse(&(base.clone() + extra), "t").unwrap();
            match c.validate() {
                Err(CliError::Invalid { field: f, .. }) => assert_eq!(f, field, "{extra}"),
                other => panic!("{extra}: {other:?}"),
            }
        };
        check("[bvq.train]\nblock_cols = 256\nvector_len = 8\n", "bvq.train.block_cols");
        check("[bvq]\nrows = 62\n", "bvq.rows/bvq.cols");
        check("seeds = []\n", "seeds");
        check("[decode.sd]\nmax_new_tokens = 600\n", "decode.sd.max_new_tokens");
        let bad = ScenarioConfig::parse("schema = \"other/9\"\n", "t").unwrap();
        assert!(matches!(bad.validate(), Err(CliError::Invalid { field, .. }) if field == "schema"));
    }

    #[test]
    fn unknown_keys_fail_to_parse() {
        let err = ScenarioConfig::parse(&format!("schema = {SCHEMA:?}\n[memory]\nchipz = 2\n"), "t").unwrap_err();
        assert!(err.to_string().contains("chipz"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn hash_ignores_output() {
        let a = ScenarioConfig::load(None).unwrap();
        let mut b = a.clone();
        b.output.dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seeds.push(99);
        assert_ne!(a.hash(), b.hash());
    }
}
