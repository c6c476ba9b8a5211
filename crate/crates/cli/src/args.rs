//! Command-line flags, config files, and their merge into an [`ExperimentSpec`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use offload_core::hwmodel::{HardwareProfile, BUILTIN_PROFILES};
use offload_core::memplan::{ModelConfig, Parallelism, Workload};
use offload_core::numcore::FaultPattern;
use offload_core::simsched::{Schedule, Toggle, ENABLE_ORDER};

use crate::CliError;

/// Colon-separated directories searched for `<name>.toml` profiles.
pub const PROFILE_PATH_ENV: &str = "OFFLOAD_PROFILE_PATH";

#[derive(Debug, Parser)]
#[command(
    name = "offload",
    version,
    about = "Offloaded-training planner, simulator and optimizer verifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one model under one or both schedules and write traces.
    Simulate(CommonArgs),
    /// Compare both schedules across several models.
    Compare(CommonArgs),
    /// Cumulative ablation of the optimizer techniques.
    Ablate(CommonArgs),
    /// Feasibility and MFU over a list of sequence lengths.
    ScanSeq(CommonArgs),
    /// Largest trainable model under each placement mode.
    MaxModel(CommonArgs),
    /// Bitwise equivalence suite of the speculative optimizer.
    Verify(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Compare(_) => "compare",
            Command::Ablate(_) => "ablate",
            Command::ScanSeq(_) => "scan-seq",
            Command::MaxModel(_) => "max-model",
            Command::Verify(_) => "verify",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::Compare(a)
            | Command::Ablate(a)
            | Command::ScanSeq(a)
            | Command::MaxModel(a)
            | Command::Verify(a) => a,
        }
    }
}

/// Flags shared by every subcommand; each one overrides the same key in `--config`.
#[derive(Debug, Default, Clone, Args)]
pub struct CommonArgs {
    /// TOML file with any of the keys below (flags win).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset name or `layers,hidden`.
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated models (compare).
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    /// Built-in profile name, profile file, or a name found on the profile search path.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub bsz: Option<u64>,
    #[arg(long)]
    pub seq: Option<u64>,
    /// Comma-separated sequence lengths (scan-seq).
    #[arg(long, value_delimiter = ',')]
    pub seqs: Option<Vec<u64>>,
    /// ste, stv or both.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub bucket_mb: Option<u64>,
    /// `auto` or a count of GPU-resident buckets.
    #[arg(long)]
    pub gpu_buckets: Option<String>,
    #[arg(long)]
    pub chips: Option<u32>,
    /// zero3 or ulysses.
    #[arg(long)]
    pub parallelism: Option<String>,
    /// Comma-separated techniques to enable, in any order (ablate).
    #[arg(long, value_delimiter = ',')]
    pub toggles: Option<Vec<String>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of seeds starting at `--seed` (verify).
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Training steps per run (verify).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Comma-separated fault patterns: clean, clip, nonfinite, mixed (verify).
    #[arg(long, value_delimiter = ',')]
    pub patterns: Option<Vec<String>>,
    /// Break snapshot restore on purpose; the suite must then fail (verify).
    #[arg(long)]
    pub mutate: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub models: Option<Vec<String>>,
    pub profile: Option<String>,
    pub bsz: Option<u64>,
    pub seq: Option<u64>,
    pub seqs: Option<Vec<u64>>,
    pub schedule: Option<String>,
    pub bucket_mb: Option<u64>,
    pub gpu_buckets: Option<GpuBucketsValue>,
    pub chips: Option<u32>,
    pub parallelism: Option<String>,
    pub toggles: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub seeds: Option<u64>,
    pub steps: Option<u64>,
    pub patterns: Option<Vec<String>>,
    pub mutate: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum GpuBucketsValue {
    Count(u64),
    Text(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpuBuckets {
    Auto,
    Fixed(usize),
}

/// Everything a command needs, with defaults applied and files resolved.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub models: Vec<ModelConfig>,
    pub profile: HardwareProfile,
    /// Where the profile came from (builtin name or file path).
    pub profile_source: String,
    pub workload: Workload,
    pub seqs: Vec<u64>,
    pub schedules: Vec<Schedule>,
    pub bucket_mb: Option<u64>,
    pub gpu_buckets: GpuBuckets,
    pub chips: u32,
    pub parallelism: Parallelism,
    pub toggles: Vec<Toggle>,
    pub out: PathBuf,
    pub seed: u64,
    pub seeds: u64,
    pub steps: u64,
    pub patterns: Vec<FaultPattern>,
    pub mutate: bool,
}

pub const DEFAULT_MODEL: &str = "5b";
pub const DEFAULT_BSZ: u64 = 8;
/// Default micro-batch for sequence scans.
pub const DEFAULT_SCAN_BSZ: u64 = 1;
pub const DEFAULT_SEQ: u64 = 1024;
pub const DEFAULT_COMPARE_MODELS: [&str; 4] = ["1b", "5b", "10b", "13b"];
/// Powers of two from 4Ki to 1Mi tokens.
pub fn default_scan_seqs() -> Vec<u64> {
    (12..=20).map(|p| 1u64 << p).collect()
}

fn cfg_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

pub fn load_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
}

/// Resolves `--profile`: an existing file, then `<name>.toml` on the search
/// path, then a built-in profile.
pub fn resolve_profile(
    value: &str,
    search_path: Option<&str>,
) -> Result<(HardwareProfile, String), CliError> {
    let as_path = Path::new(value);
    if as_path.is_file() {
        let p = HardwareProfile::load(as_path).map_err(|e| cfg_err("profile", e))?;
        return Ok((p, as_path.display().to_string()));
    }
    let looks_like_path = value.contains('/') || value.contains('\\') || value.ends_with(".toml");
    if looks_like_path {
        return Err(cfg_err(
            "profile",
            format!("file {} not found", as_path.display()),
        ));
    }
    if let Some(dirs) = search_path {
        for dir in dirs.split(':').filter(|d| !d.is_empty()) {
            let candidate = Path::new(dir).join(format!("{value}.toml"));
            if candidate.is_file() {
                let p = HardwareProfile::load(&candidate).map_err(|e| cfg_err("profile", e))?;
                return Ok((p, candidate.display().to_string()));
            }
        }
    }
    match HardwareProfile::builtin(value) {
        Some(p) => Ok((p, value.to_string())),
        None => Err(cfg_err(
            "profile",
            format!(
                "`{value}` is not a file, not on {PROFILE_PATH_ENV}, and not one of {}",
                BUILTIN_PROFILES.join(", ")
            ),
        )),
    }
}

fn parse_model(s: &str) -> Result<ModelConfig, CliError> {
    ModelConfig::from_spec_str(s).map_err(|e| CliError::Config(e.to_string()))
}

fn parse_schedules(s: &str) -> Result<Vec<Schedule>, CliError> {
    match s {
        "ste" => Ok(vec![Schedule::BaselineSte]),
        "stv" => Ok(vec![Schedule::SuperStv]),
        "both" => Ok(vec![Schedule::BaselineSte, Schedule::SuperStv]),
        other => Err(cfg_err(
            "schedule",
            format!("`{other}` is not ste, stv or both"),
        )),
    }
}

fn parse_parallelism(s: &str) -> Result<Parallelism, CliError> {
    match s {
        "zero3" => Ok(Parallelism::Zero3),
        "ulysses" => Ok(Parallelism::UlyssesSp),
        other => Err(cfg_err(
            "parallelism",
            format!("`{other}` is not zero3 or ulysses"),
        )),
    }
}

fn parse_gpu_buckets(v: &GpuBucketsValue) -> Result<GpuBuckets, CliError> {
    match v {
        GpuBucketsValue::Count(n) => Ok(GpuBuckets::Fixed(*n as usize)),
        GpuBucketsValue::Text(t) if t == "auto" => Ok(GpuBuckets::Auto),
        GpuBucketsValue::Text(t) => t
            .parse::<usize>()
            .map(GpuBuckets::Fixed)
            .map_err(|_| cfg_err("gpu-buckets", format!("`{t}` is not `auto` or a count"))),
    }
}

pub fn parse_toggle(s: &str) -> Result<Toggle, CliError> {
    ENABLE_ORDER
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = ENABLE_ORDER.iter().map(|t| t.name()).collect();
            cfg_err(
                "toggles",
                format!("`{s}` is not one of {}", names.join(", ")),
            )
        })
}

impl ExperimentSpec {
    /// Merges flags over the config file over defaults for `command`.
    pub fn resolve(
        command: &str,
        args: &CommonArgs,
        search_path: Option<&str>,
    ) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => load_config(p)?,
            None => FileConfig::default(),
        };
        macro_rules! pick {
            ($field:ident) => {
                args.$field.clone().or(file.$field.clone())
            };
        }

        let model = parse_model(&pick!(model).unwrap_or_else(|| DEFAULT_MODEL.to_string()))?;
        let models = match pick!(models) {
            Some(list) => list
                .iter()
                .map(|m| parse_model(m))
                .collect::<Result<Vec<_>, _>>()?,
            None => DEFAULT_COMPARE_MODELS
                .iter()
                .map(|m| parse_model(m))
                .collect::<Result<Vec<_>, _>>()?,
        };
        if models.is_empty() {
            return Err(cfg_err("models", "list is empty"));
        }
        let (profile, profile_source) = resolve_profile(
            &pick!(profile).unwrap_or_else(|| "gh200".to_string()),
            search_path,
        )?;

        let default_bsz = if command == "scan-seq" {
            DEFAULT_SCAN_BSZ
        } else {
            DEFAULT_BSZ
        };
        let bsz = pick!(bsz).unwrap_or(default_bsz);
        let seq = pick!(seq).unwrap_or(DEFAULT_SEQ);
        if bsz == 0 {
            return Err(cfg_err("bsz", "must be positive"));
        }
        if seq == 0 {
            return Err(cfg_err("seq", "must be positive"));
        }
        let seqs = pick!(seqs).unwrap_or_else(default_scan_seqs);
        if seqs.is_empty() || seqs.contains(&0) {
            return Err(cfg_err(
                "seqs",
                "must be a nonempty list of positive lengths",
            ));
        }

        let schedules = parse_schedules(&pick!(schedule).unwrap_or_else(|| "both".to_string()))?;
        let bucket_mb = pick!(bucket_mb);
        if let Some(mb) = bucket_mb {
            if mb == 0 {
                return Err(cfg_err("bucket-mb", "must be positive"));
            }
        }
        let gpu_buckets = match (&args.gpu_buckets, &file.gpu_buckets) {
            (Some(text), _) => parse_gpu_buckets(&GpuBucketsValue::Text(text.clone()))?,
            (None, Some(v)) => parse_gpu_buckets(v)?,
            (None, None) => GpuBuckets::Auto,
        };
        let default_chips = if command == "scan-seq" { 8 } else { 1 };
        let chips = pick!(chips).unwrap_or(default_chips);
        if chips == 0 {
            return Err(cfg_err("chips", "must be at least 1"));
        }
        let default_par = if command == "scan-seq" {
            "ulysses"
        } else {
            "zero3"
        };
        let parallelism =
            parse_parallelism(&pick!(parallelism).unwrap_or_else(|| default_par.to_string()))?;
        let toggles = match pick!(toggles) {
            Some(list) => list
                .iter()
                .map(|t| parse_toggle(t))
                .collect::<Result<Vec<_>, _>>()?,
            None => ENABLE_ORDER.to_vec(),
        };
        let patterns = match pick!(patterns) {
            Some(list) => list
                .iter()
                .map(|p| {
                    FaultPattern::parse(p)
                        .ok_or_else(|| cfg_err("patterns", format!("unknown pattern `{p}`")))
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => FaultPattern::DEFAULT_MATRIX.to_vec(),
        };

        Ok(ExperimentSpec {
            model,
            models,
            profile,
            profile_source,
            workload: Workload::new(bsz, seq),
            seqs,
            schedules,
            bucket_mb,
            gpu_buckets,
            chips,
            parallelism,
            toggles,
            out: pick!(out).unwrap_or_else(|| PathBuf::from("out")),
            seed: pick!(seed).unwrap_or(0),
            seeds: pick!(seeds).unwrap_or(10),
            steps: pick!(steps).unwrap_or(200),
            patterns,
            mutate: args.mutate || file.mutate.unwrap_or(false),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> CommonArgs {
        CommonArgs::default()
    }

    #[test]
    fn defaults() {
        let s = ExperimentSpec::resolve("simulate", &args(), None).unwrap();
        assert_eq!(s.model.label(), "5b");
        assert_eq!(s.workload, Workload::new(8, 1024));
        assert_eq!(s.schedules.len(), 2);
        assert_eq!(s.gpu_buckets, GpuBuckets::Auto);
        assert_eq!(s.profile_source, "gh200");
        let scan = ExperimentSpec::resolve("scan-seq", &args(), None).unwrap();
        assert_eq!(
            (scan.chips, scan.parallelism, scan.workload.bsz),
            (8, Parallelism::UlyssesSp, 1)
        );
        assert_eq!(*scan.seqs.last().unwrap(), 1 << 20);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "model = \"13b\"\nbsz = 4\ngpu_buckets = 3\nschedule = \"stv\"\n",
        )
        .unwrap();
        let a = CommonArgs {
            config: Some(path),
            bsz: Some(2),
            ..args()
        };
        let s = ExperimentSpec::resolve("simulate", &a, None).unwrap();
        assert_eq!(s.model.label(), "13b");
        assert_eq!(s.workload.bsz, 2);
        assert_eq!(s.gpu_buckets, GpuBuckets::Fixed(3));
        assert_eq!(s.schedules, vec![Schedule::SuperStv]);
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = |a: CommonArgs, field: &str| {
            let e = ExperimentSpec::resolve("simulate", &a, None).unwrap_err();
            assert!(e.to_string().contains(field), "{e} lacks {field}");
            assert_eq!(e.exit_code(), 2);
        };
        bad(
            CommonArgs {
                schedule: Some("fast".into()),
                ..args()
            },
            "schedule",
        );
        bad(
            CommonArgs {
                gpu_buckets: Some("many".into()),
                ..args()
            },
            "gpu-buckets",
        );
        bad(
            CommonArgs {
                bsz: Some(0),
                ..args()
            },
            "bsz",
        );
        bad(
            CommonArgs {
                model: Some("huge".into()),
                ..args()
            },
            "model",
        );
        bad(
            CommonArgs {
                profile: Some("/no/such/profile.toml".into()),
                ..args()
            },
            "/no/such/profile.toml",
        );
        bad(
            CommonArgs {
                toggles: Some(vec!["turbo".into()]),
                ..args()
            },
            "toggles",
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "colour = \"blue\"\n").unwrap();
        bad(
            CommonArgs {
                config: Some(path),
                ..args()
            },
            "colour",
        );
    }

    #[test]
    fn profile_search_path() {
        let dir = tempfile::tempdir().unwrap();
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../profiles/dgx-a100.toml"
        ))
        .unwrap();
        std::fs::write(dir.path().join("lab.toml"), text).unwrap();
        let search = format!("/nonexistent:{}", dir.path().display());
        let (p, src) = resolve_profile("lab", Some(&search)).unwrap();
        assert!(src.ends_with("lab.toml"));
        assert_eq!(p, HardwareProfile::builtin("dgx-a100").unwrap());
        assert!(resolve_profile("lab", None).is_err());
    }
}
