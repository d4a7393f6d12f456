//! TOML experiment configuration: defaults, presets, and sweep-axis
//! patching over the parsed document.

use airfl_core::model::LineSearchConfig;
use airfl_core::runtime::{Algorithm, DistanceScheme, RunConfig, SysOptMode};
use airfl_core::sysopt::{BeamformerMethod, DcaOptions, GibbsOptions, SdrOptions};
use airfl_core::data::PartitionScheme;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigDoc {
    pub run_name: String,
    pub dataset: DatasetConfig,
    pub run: RunSection,
    pub sweep: Vec<SweepAxis>,
    pub output: OutputSection,
}

impl Default for ConfigDoc {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            dataset: DatasetConfig::default(),
            run: RunSection::default(),
            sweep: vec![],
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// "synthetic" or "libsvm"
    pub source: String,
    pub path: Option<String>,
    pub n: usize,
    pub d: usize,
    pub separation: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            path: None,
            n: 2000,
            d: 20,
            separation: 5.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub m: usize,
    pub k: usize,
    pub rounds: usize,
    pub snr_db: f64,
    pub p0: f64,
    pub gamma: f64,
    pub algorithm: Algorithm,
    pub sysopt_mode: SysOptMode,
    pub master_seed: u64,
    pub test_fraction: f64,
    pub lambda: f64,
    pub delta_tilde: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub fixed_step: Option<f64>,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub reference_tol: f64,
    pub deterministic_timing: bool,
    pub partition: PartitionSection,
    pub distances: DistanceSection,
    pub gibbs: GibbsSection,
    pub dca: DcaSection,
    pub sdr: SdrSection,
    pub line_search: LineSearchSection,
}

impl Default for RunSection {
    fn default() -> Self {
        let base = RunConfig::default();
        Self {
            m: base.m,
            k: base.k,
            rounds: base.rounds,
            snr_db: base.snr_db,
            p0: base.p0,
            gamma: base.gamma,
            algorithm: base.algorithm,
            sysopt_mode: base.sysopt_mode,
            master_seed: base.master_seed,
            test_fraction: base.test_fraction,
            lambda: base.lambda,
            delta_tilde: base.delta_tilde,
            cg_tol: base.cg_tol,
            cg_max_iters: base.cg_max_iters,
            fixed_step: None,
            local_epochs: base.local_epochs,
            local_lr: base.local_lr,
            reference_tol: base.reference_tol,
            deterministic_timing: base.deterministic_timing,
            partition: PartitionSection::default(),
            distances: DistanceSection::default(),
            gibbs: GibbsSection::default(),
            dca: DcaSection::default(),
            sdr: SdrSection::default(),
            line_search: LineSearchSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    /// "uniform" or "size_heterogeneous"
    pub scheme: String,
    pub frac_small: f64,
    pub small_range: (f64, f64),
    pub large_range: (f64, f64),
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            scheme: "uniform".into(),
            frac_small: 0.1,
            small_range: (0.008, 0.01),
            large_range: (1.01, 1.11),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceSection {
    /// "uniform" or "far_near"
    pub scheme: String,
    pub range: (f64, f64),
    pub frac_far: f64,
    pub far: (f64, f64),
    pub near: (f64, f64),
}

impl Default for DistanceSection {
    fn default() -> Self {
        Self {
            scheme: "uniform".into(),
            range: (100.0, 120.0),
            frac_far: 0.1,
            far: (200.0, 220.0),
            near: (50.0, 60.0),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsSection {
    pub t0: f64,
    pub rho: f64,
    pub iters: usize,
}

impl Default for GibbsSection {
    fn default() -> Self {
        let g = GibbsOptions::default();
        Self {
            t0: g.t0,
            rho: g.rho,
            iters: g.iters,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcaSection {
    pub theta: f64,
    pub xi: f64,
    pub max_iters: usize,
}

impl Default for DcaSection {
    fn default() -> Self {
        let d = DcaOptions::default();
        Self {
            theta: d.theta,
            xi: d.xi,
            max_iters: d.max_iters,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdrSection {
    pub n_randomizations: usize,
}

impl Default for SdrSection {
    fn default() -> Self {
        Self {
            n_randomizations: SdrOptions::default().n_randomizations,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineSearchSection {
    pub alpha0: f64,
    pub shrink: f64,
    pub c1: f64,
    pub alpha_min: f64,
}

impl Default for LineSearchSection {
    fn default() -> Self {
        let l = LineSearchConfig::default();
        Self {
            alpha0: l.alpha0,
            shrink: l.shrink,
            c1: l.c1,
            alpha_min: l.alpha_min,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// dotted path into the document, e.g. "run.snr_db"
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub csv: bool,
    pub json_summary: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            csv: true,
            json_summary: true,
        }
    }
}

impl RunSection {
    pub fn to_run_config(&self) -> Result<RunConfig> {
        let partition = match self.partition.scheme.as_str() {
            "uniform" => PartitionScheme::Uniform,
            "size_heterogeneous" => PartitionScheme::SizeHeterogeneous {
                frac_small: self.partition.frac_small,
                small_range: self.partition.small_range,
                large_range: self.partition.large_range,
            },
            other => bail!("run.partition.scheme: unknown scheme `{other}` (expected `uniform` or `size_heterogeneous`)"),
        };
        let distances = match self.distances.scheme.as_str() {
            "uniform" => DistanceScheme::Uniform { range: self.distances.range },
            "far_near" => DistanceScheme::FarNear {
                frac_far: self.distances.frac_far,
                far: self.distances.far,
                near: self.distances.near,
            },
            other => bail!("run.distances.scheme: unknown scheme `{other}` (expected `uniform` or `far_near`)"),
        };
        let gibbs = GibbsOptions {
            t0: self.gibbs.t0,
            rho: self.gibbs.rho,
            iters: self.gibbs.iters,
            method: BeamformerMethod::Dca,
            dca: DcaOptions {
                theta: self.dca.theta,
                xi: self.dca.xi,
                max_iters: self.dca.max_iters,
                ..DcaOptions::default()
            },
            sdr: SdrOptions {
                n_randomizations: self.sdr.n_randomizations,
                ..SdrOptions::default()
            },
        };
        Ok(RunConfig {
            m: self.m,
            k: self.k,
            rounds: self.rounds,
            snr_db: self.snr_db,
            p0: self.p0,
            gamma: self.gamma,
            algorithm: self.algorithm,
            sysopt_mode: self.sysopt_mode,
            master_seed: self.master_seed,
            test_fraction: self.test_fraction,
            partition,
            distances,
            lambda: self.lambda,
            delta_tilde: self.delta_tilde,
            gibbs,
            cg_tol: self.cg_tol,
            cg_max_iters: self.cg_max_iters,
            line_search: LineSearchConfig {
                alpha0: self.line_search.alpha0,
                shrink: self.line_search.shrink,
                c1: self.line_search.c1,
                alpha_min: self.line_search.alpha_min,
            },
            fixed_step: self.fixed_step,
            local_epochs: self.local_epochs,
            local_lr: self.local_lr,
            reference_tol: self.reference_tol,
            deterministic_timing: self.deterministic_timing,
        })
    }
}

/// Parse a TOML document into a config with defaults applied. Unknown keys
/// are rejected with the list of valid ones; type errors carry the key path.
pub fn parse_config(text: &str) -> Result<ConfigDoc> {
    let doc: ConfigDoc = toml::from_str(text).context("invalid experiment config")?;
    Ok(doc)
}

/// Set a dotted key path inside a TOML document. The special pair
/// (`run.sysopt_mode`, "perfect") expands to the perfect-aggregation
/// algorithm with full participation.
pub fn apply_patch(doc: &mut toml::Value, key: &str, value: &toml::Value) -> Result<()> {
    if key == "run.sysopt_mode" && value.as_str() == Some("perfect") {
        apply_patch(doc, "run.algorithm", &toml::Value::String("perfect_aggregation".into()))?;
        return apply_patch(doc, key, &toml::Value::String("none_full_participation".into()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = doc;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .as_table_mut()
            .with_context(|| format!("sweep key `{key}`: `{part}` is not a table"))?
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    cursor
        .as_table_mut()
        .with_context(|| format!("sweep key `{key}` does not address a table"))?
        .insert(parts[parts.len() - 1].to_string(), value.clone());
    Ok(())
}

/// Human-readable form of a sweep value, used in file names.
pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => format!("{f}"),
        toml::Value::Boolean(b) => b.to_string(),
        other => other.to_string(),
    }
}

pub const PRESETS: &[(&str, &str)] = &[
    (
        "first_order_comparison",
        r#"
run_name = "first_order_comparison"

[dataset]
n = 2000
d = 20

[run]
m = 10
k = 4
rounds = 15
snr_db = 80.0
gamma = 1e-3
sysopt_mode = "dca_only"

[[sweep]]
key = "run.algorithm"
values = ["proposed", "aircomp_fedavg"]
"#,
    ),
    (
        "second_order_comparison",
        r#"
run_name = "second_order_comparison"

[dataset]
n = 2000
d = 20

[run]
m = 10
k = 4
rounds = 15
snr_db = 70.0
gamma = 1e-3
sysopt_mode = "dca_only"

[[sweep]]
key = "run.algorithm"
values = ["proposed", "aircomp_giant"]
"#,
    ),
    (
        "sysopt_ablation",
        r#"
run_name = "sysopt_ablation"

[dataset]
n = 1500
d = 10

[run]
m = 8
k = 3
rounds = 10
snr_db = 40.0
gamma = 1e-3

[run.gibbs]
iters = 10

[[sweep]]
key = "run.sysopt_mode"
values = ["perfect", "gs_dca", "gs_sdr", "dca_only", "sdr_only"]
"#,
    ),
    (
        "heterogeneity",
        r#"
run_name = "heterogeneity"

[dataset]
n = 2000
d = 10

[run]
m = 10
k = 3
rounds = 10
snr_db = 40.0
gamma = 1e-3

[run.partition]
scheme = "size_heterogeneous"

[run.distances]
scheme = "far_near"

[run.gibbs]
iters = 10

[[sweep]]
key = "run.sysopt_mode"
values = ["gs_dca", "dca_only"]
"#,
    ),
];

pub fn preset(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .with_context(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            format!("unknown preset `{name}`; available: {}", names.join(", "))
        })
}
