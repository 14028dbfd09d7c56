//! Experiment specification: a TOML document layered as
//! defaults → preset → file → `--set` overrides.

use std::path::{Path, PathBuf};

use fedlm_core::aggregator::FederationConfig;
use fedlm_core::baselines::{diloco_server_opt, CentralizedConfig};
use fedlm_core::client::ClientHardware;
use fedlm_core::cost::CostModelParams;
use fedlm_core::data::{PartitionPolicy, Style};
use fedlm_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Federated,
    Centralized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub mode: Mode,
    /// One of [`PRESETS`].
    pub preset: Option<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            mode: Mode::Federated,
            preset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub policy: PartitionPolicy,
    /// Sources to generate; the IID policy takes exactly one.
    pub styles: Vec<Style>,
    pub clients_per_source: usize,
    pub tokens_per_client: usize,
    pub corpus_seed: u64,
    /// Exported corpora to use instead of generated ones, one per style.
    pub corpus_files: Vec<PathBuf>,
    pub eval_sequences: usize,
    pub eval_batch: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            policy: PartitionPolicy::Iid,
            styles: vec![Style::Web],
            clients_per_source: 1,
            tokens_per_client: 20_000,
            corpus_seed: 1,
            corpus_files: Vec::new(),
            eval_sequences: 64,
            eval_batch: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    /// Plain-text bandwidth table; uniform `cost.bandwidth_mbps` when absent.
    pub matrix_file: Option<PathBuf>,
    pub server: Option<String>,
    pub ring: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSpec {
    pub hardware: Option<ClientHardware>,
    /// Write every client's model after every round.
    pub checkpoints: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    /// Checkpoint the global state every this many rounds (and always after
    /// the last one); `0` only checkpoints at the end.
    pub checkpoint_every: u64,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub experiment: ExperimentSection,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub federation: FederationConfig,
    pub centralized: CentralizedConfig,
    pub cost: CostModelParams,
    pub network: NetworkSpec,
    pub client: ClientSpec,
    pub run: RunSpec,
}

pub const PRESETS: [&str; 5] = ["diloco", "diloco-m07", "hetero-4", "hetero-8", "hetero-16"];

fn preset_patch(name: &str) -> Result<Table> {
    let mut patch = Table::new();
    match name {
        "diloco" | "diloco-m07" => {
            let momentum = if name == "diloco" { 0.9 } else { 0.7 };
            let server = Value::try_from(diloco_server_opt(momentum)).expect("serializable");
            patch_insert(&mut patch, "federation", "server_opt", server);
        }
        "hetero-4" | "hetero-8" | "hetero-16" => {
            let per_source: i64 = match name {
                "hetero-4" => 1,
                "hetero-8" => 2,
                _ => 4,
            };
            let styles = Style::ALL.iter().map(|s| Value::String(s.name().into())).collect();
            patch_insert(&mut patch, "data", "policy", Value::String("by-source".into()));
            patch_insert(&mut patch, "data", "styles", Value::Array(styles));
            patch_insert(&mut patch, "data", "clients_per_source", Value::Integer(per_source));
            let clients = Value::Integer(per_source * Style::ALL.len() as i64);
            patch_insert(&mut patch, "federation", "population", clients.clone());
            patch_insert(&mut patch, "federation", "clients_per_round", clients);
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown preset `{other}`; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(patch)
}

fn patch_insert(table: &mut Table, section: &str, key: &str, value: Value) {
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    if let Value::Table(t) = entry {
        t.insert(key.to_string(), value);
    }
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
fn merge(base: &mut Table, top: &Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parses the right-hand side of `--set`: a TOML value, or a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Layered configuration before it is resolved into an [`ExperimentSpec`].
#[derive(Clone, Debug, Default)]
pub struct SpecBuilder {
    file: Table,
    overrides: Vec<(String, Value)>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(reason) => HarnessError::Parse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file = text
            .parse::<Table>()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Self {
            file,
            overrides: Vec::new(),
        })
    }

    /// Applies `section.key=value`.
    pub fn set(&mut self, assignment: &str) -> Result<&mut Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` lacks `=`")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(HarnessError::Config(format!("bad override key `{key}`")));
        }
        self.overrides.push((key.to_string(), parse_value(raw.trim())));
        Ok(self)
    }

    fn apply_override(table: &mut Table, key: &str, value: &Value) -> Result<()> {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut cursor = table;
        for p in parts {
            let next = cursor
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            cursor = match next {
                Value::Table(t) => t,
                _ => return Err(HarnessError::Config(format!("`{p}` in `{key}` is not a section"))),
            };
        }
        cursor.insert(last.to_string(), value.clone());
        Ok(())
    }

    fn layered(&self) -> Result<Table> {
        let mut top = self.file.clone();
        for (k, v) in &self.overrides {
            Self::apply_override(&mut top, k, v)?;
        }
        let mut table = match Value::try_from(ExperimentSpec::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("the default spec serializes to a table"),
        };
        let preset = top
            .get("experiment")
            .and_then(|e| e.get("preset"))
            .and_then(Value::as_str)
            .map(str::to_string);
        if let Some(name) = preset {
            merge(&mut table, &preset_patch(&name)?);
        }
        merge(&mut table, &top);
        Ok(table)
    }

    pub fn build(&self) -> Result<ExperimentSpec> {
        let table = self.layered()?;
        let spec: ExperimentSpec = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost.validate()?;
        let d = &self.data;
        if d.styles.is_empty() {
            return Err(HarnessError::Config("data.styles must name at least one source".into()));
        }
        if d.tokens_per_client == 0 || d.eval_sequences == 0 || d.eval_batch == 0 {
            return Err(HarnessError::Config(
                "data.tokens_per_client, eval_sequences and eval_batch must be positive".into(),
            ));
        }
        if !d.corpus_files.is_empty() && d.corpus_files.len() != d.styles.len() {
            return Err(HarnessError::Config(
                "data.corpus_files needs one file per entry of data.styles".into(),
            ));
        }
        let clients = self.plan_clients()?;
        match self.experiment.mode {
            Mode::Federated => {
                self.federation.validate()?;
                if clients != self.federation.population {
                    return Err(HarnessError::Config(format!(
                        "data plan yields {clients} clients but federation.population is {}",
                        self.federation.population
                    )));
                }
            }
            Mode::Centralized => self.centralized.validate()?,
        }
        if self.network.matrix_file.is_some() && self.network.server.is_none() {
            return Err(HarnessError::Config(
                "network.server is required with a bandwidth matrix".into(),
            ));
        }
        if let Some(hw) = &self.client.hardware {
            hw.validate()?;
        }
        if let Some(p) = &self.experiment.preset {
            if !PRESETS.contains(&p.as_str()) {
                return Err(HarnessError::Config(format!("unknown preset `{p}`")));
            }
        }
        Ok(())
    }

    /// Number of clients the data plan will produce.
    pub fn plan_clients(&self) -> Result<usize> {
        match self.data.policy {
            PartitionPolicy::Iid => {
                if self.data.styles.len() != 1 {
                    return Err(HarnessError::Config(
                        "the iid policy partitions exactly one source".into(),
                    ));
                }
                Ok(self.federation.population)
            }
            PartitionPolicy::BySource => {
                if self.data.clients_per_source == 0 {
                    return Err(HarnessError::Config("data.clients_per_source must be positive".into()));
                }
                Ok(self.data.styles.len() * self.data.clients_per_source)
            }
        }
    }

    /// The fully resolved document written as `config.resolved`.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_roundtrip() {
        let spec = SpecBuilder::new().build().unwrap();
        assert_eq!(spec, ExperimentSpec::default());
        let again = SpecBuilder::from_toml(&spec.to_toml()).unwrap().build().unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn overrides_take_precedence_over_the_file() {
        let mut b = SpecBuilder::from_toml("[federation]\nlocal_steps = 8\n[model]\nd_model = 32\n").unwrap();
        b.set("federation.local_steps=16").unwrap();
        b.set("federation.topology=ps").unwrap();
        b.set("cost.throughput=0.5").unwrap();
        let spec = b.build().unwrap();
        assert_eq!(spec.federation.local_steps, 16);
        assert_eq!(spec.federation.topology, "ps");
        assert_eq!(spec.model.d_model, 32);
        assert_eq!(spec.model.n_blocks, ModelConfig::default().n_blocks);
        assert_eq!(spec.cost.throughput, 0.5);
    }

    #[test]
    fn presets() {
        let mut b = SpecBuilder::new();
        b.set("experiment.preset=diloco").unwrap();
        let spec = b.build().unwrap();
        assert_eq!(spec.federation.server_opt, diloco_server_opt(0.9));
        let mut b = SpecBuilder::new();
        b.set("experiment.preset=diloco-m07").unwrap();
        assert_eq!(b.build().unwrap().federation.server_opt.momentum, 0.7);

        for (name, clients) in [("hetero-4", 4), ("hetero-8", 8), ("hetero-16", 16)] {
            let mut b = SpecBuilder::new();
            b.set(&format!("experiment.preset={name}")).unwrap();
            let spec = b.build().unwrap();
            assert_eq!(spec.data.policy, PartitionPolicy::BySource);
            assert_eq!(spec.plan_clients().unwrap(), clients);
            assert_eq!(spec.federation.population, clients);
        }

        let mut b = SpecBuilder::new();
        b.set("experiment.preset=nope").unwrap();
        assert!(matches!(b.build(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn invalid_documents_are_config_errors() {
        let unknown = SpecBuilder::from_toml("[federation]\nbogus = 1\n").unwrap();
        assert!(matches!(unknown.build(), Err(HarnessError::Config(_))));
        let mut b = SpecBuilder::new();
        assert!(b.set("federation.rounds").is_err());
        b.set("federation.clients_per_round=9").unwrap();
        assert!(b.build().is_err());
        let mut b = SpecBuilder::new();
        b.set("data.styles=[\"web\", \"prose\"]").unwrap();
        assert!(b.build().is_err());
    }
}
