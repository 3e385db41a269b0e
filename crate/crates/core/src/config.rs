//! Run configuration documents.
//!
//! A TOML document whose top-level keys are the [`AttackConfig`] fields plus
//! run keys:
//!
//! ```toml
//! dataset = "manifest.jsonl"      # JSON Lines manifest
//! vectors = "vectors.txt"         # word vectors (optional)
//! fallback = "fallback.json"      # fallback synonym table (optional)
//! out = "runs/default"
//! export_png = false
//! budget = { epsilon_v = 0.00784313725490196, epsilon_t = 1 }
//! tau = 0.4
//!
//! [surrogate]
//! kind = "toy"                    # toy | toy-identity | toy-weights
//! seed = 0
//!
//! [victim]                        # omitted: same as surrogate
//! kind = "toy"
//! seed = 1
//!
//! [eval]
//! restrict_to_clean_hits = true
//! adversarial_galleries = true
//! ```
//!
//! Relative paths in a file resolve against the file's directory. Overrides
//! (`key.sub=value`, value parsed as TOML, bare words as strings) are applied
//! after the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Pooling, ToyBackend, ToyConfig};
use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, NoFallback, StaticSynonymTable, VectorStore};
use crate::retrieval::EvalOptions;
use crate::types::AttackConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Seeded random toy transformer.
    Toy,
    /// Toy transformer whose blocks are all identity maps.
    ToyIdentity,
    /// Toy transformer loaded from a weights file.
    ToyWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub pooling: Pooling,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            seed: 0,
            weights: None,
            pooling: Pooling::Cls,
        }
    }
}

impl BackendSpec {
    pub const FIELDS: &'static [&'static str] = &["kind", "seed", "weights", "pooling"];

    pub fn build(&self) -> Result<Box<dyn Backend>> {
        let toy = |identity_layers| ToyConfig {
            seed: self.seed,
            identity_layers,
            pooling: self.pooling,
            ..ToyConfig::default()
        };
        Ok(Box::new(match self.kind {
            BackendKind::Toy => ToyBackend::new(toy(false))?,
            BackendKind::ToyIdentity => ToyBackend::new(toy(true))?,
            BackendKind::ToyWeights => {
                let path = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::Config(vec!["backend kind `toy-weights` needs `weights`".into()]))?;
                ToyBackend::load(path)?
            }
        }))
    }
}

/// `toy`, `toy:SEED`, `toy-identity[:SEED]` or `weights:PATH`.
impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        let seed = |arg: Option<&str>| -> Result<u64> {
            arg.map_or(Ok(0), |a| {
                a.parse()
                    .map_err(|_| Error::InvalidInput(format!("bad backend seed `{a}` in `{s}`")))
            })
        };
        match kind {
            "toy" => Ok(Self {
                seed: seed(arg)?,
                ..Self::default()
            }),
            "toy-identity" => Ok(Self {
                kind: BackendKind::ToyIdentity,
                seed: seed(arg)?,
                ..Self::default()
            }),
            "weights" | "toy-weights" => Ok(Self {
                kind: BackendKind::ToyWeights,
                weights: Some(
                    arg.ok_or_else(|| Error::InvalidInput(format!("`{s}`: missing weights path")))?
                        .into(),
                ),
                ..Self::default()
            }),
            _ => Err(Error::InvalidInput(format!(
                "unknown backend `{s}` (expected toy[:SEED], toy-identity[:SEED] or weights:PATH)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub restrict_to_clean_hits: bool,
    pub adversarial_galleries: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            restrict_to_clean_hits: true,
            adversarial_galleries: true,
        }
    }
}

impl EvalSection {
    pub const FIELDS: &'static [&'static str] = &["restrict_to_clean_hits", "adversarial_galleries"];
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CliConfig {
    #[serde(flatten)]
    pub attack: AttackConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vectors: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub export_png: bool,
    pub surrogate: BackendSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub victim: Option<BackendSpec>,
    pub eval: EvalSection,
}

const PATH_KEYS: &[&str] = &["dataset", "vectors", "fallback", "out"];
const RUN_KEYS: &[&str] = &["dataset", "vectors", "fallback", "out", "export_png", "surrogate", "victim", "eval"];
const BUDGET_FIELDS: &[&str] = &["epsilon_v", "epsilon_t"];

fn unknown_keys(table: &toml::Table, allowed: &[&str], prefix: &str, out: &mut Vec<String>) {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            out.push(format!("unknown key `{prefix}{key}`"));
        }
    }
}

fn deserialize<T: serde::de::DeserializeOwned + Default>(
    value: Option<toml::Value>,
    what: &str,
    problems: &mut Vec<String>,
) -> T {
    match value {
        None => T::default(),
        Some(v) => v.try_into().unwrap_or_else(|e: toml::de::Error| {
            problems.push(format!("{what}: {}", e.message()));
            T::default()
        }),
    }
}

fn backend_spec(value: Option<toml::Value>, what: &str, problems: &mut Vec<String>) -> Option<BackendSpec> {
    match value {
        None => None,
        Some(toml::Value::String(s)) => match s.parse() {
            Ok(spec) => Some(spec),
            Err(e) => {
                problems.push(format!("{what}: {e}"));
                None
            }
        },
        Some(toml::Value::Table(t)) => {
            unknown_keys(&t, BackendSpec::FIELDS, &format!("{what}."), problems);
            let t: toml::Table = t
                .into_iter()
                .filter(|(k, _)| BackendSpec::FIELDS.contains(&k.as_str()))
                .collect();
            Some(deserialize(Some(toml::Value::Table(t)), what, problems))
        }
        Some(other) => {
            problems.push(format!("{what}: expected a table or string, got {}", other.type_str()));
            None
        }
    }
}

/// Parses `key.sub=value` and sets it in `table`.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{assignment}` is not key=value")]))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(vec![format!("override `{assignment}` has an empty key segment")]));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::String(s) = entry {
            // `surrogate = "toy:3"` followed by `surrogate.seed=4`
            let spec: BackendSpec = s.parse()?;
            *entry = toml::Value::try_from(spec).map_err(|e| Error::Config(vec![e.to_string()]))?;
        }
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("override `{key}`: `{part}` is not a table")]))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn absolutize(table: &mut toml::Table, base: &Path) {
    let fix = |v: &mut toml::Value| {
        if let toml::Value::String(s) = v {
            if Path::new(&**s).is_relative() {
                *s = base.join(&**s).to_string_lossy().into_owned();
            }
        }
    };
    for key in PATH_KEYS {
        if let Some(v) = table.get_mut(*key) {
            fix(v);
        }
    }
    for key in ["surrogate", "victim"] {
        if let Some(toml::Value::Table(t)) = table.get_mut(key) {
            if let Some(v) = t.get_mut("weights") {
                fix(v);
            }
        }
    }
}

impl CliConfig {
    /// Builds a config from a parsed document, listing every problem at once.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let (config, problems) = Self::from_table_lenient(table);
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Best-effort config (defaults where a value was unusable) plus every
    /// problem found.
    pub fn from_table_lenient(mut table: toml::Table) -> (Self, Vec<String>) {
        let mut problems = Vec::new();
        let allowed: Vec<&str> = RUN_KEYS.iter().chain(AttackConfig::FIELDS).copied().collect();
        unknown_keys(&table, &allowed, "", &mut problems);
        if let Some(toml::Value::Table(b)) = table.get("budget") {
            unknown_keys(b, BUDGET_FIELDS, "budget.", &mut problems);
        }
        if let Some(toml::Value::Table(e)) = table.get("eval") {
            unknown_keys(e, EvalSection::FIELDS, "eval.", &mut problems);
        }
        let mut take = |k: &str| table.remove(k);
        let path = |v: Option<toml::Value>, what: &str, problems: &mut Vec<String>| -> Option<PathBuf> {
            match v {
                None => None,
                Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
                Some(other) => {
                    problems.push(format!("{what}: expected a path string, got {}", other.type_str()));
                    None
                }
            }
        };
        let dataset = path(take("dataset"), "dataset", &mut problems);
        let vectors = path(take("vectors"), "vectors", &mut problems);
        let fallback = path(take("fallback"), "fallback", &mut problems);
        let out = path(take("out"), "out", &mut problems);
        let export_png = match take("export_png") {
            None => false,
            Some(toml::Value::Boolean(b)) => b,
            Some(other) => {
                problems.push(format!("export_png: expected a boolean, got {}", other.type_str()));
                false
            }
        };
        let surrogate = backend_spec(take("surrogate"), "surrogate", &mut problems).unwrap_or_default();
        let victim = backend_spec(take("victim"), "victim", &mut problems);
        let eval_value = take("eval").map(|v| match v {
            toml::Value::Table(t) => toml::Value::Table(
                t.into_iter()
                    .filter(|(k, _)| EvalSection::FIELDS.contains(&k.as_str()))
                    .collect(),
            ),
            other => other,
        });
        let eval: EvalSection = deserialize(eval_value, "eval", &mut problems);
        let mut attack_table: toml::Table = table
            .into_iter()
            .filter(|(k, _)| AttackConfig::FIELDS.contains(&k.as_str()))
            .collect();
        if let Some(toml::Value::Table(b)) = attack_table.get_mut("budget") {
            b.retain(|k, _| BUDGET_FIELDS.contains(&k));
        }
        let attack: AttackConfig = deserialize(Some(toml::Value::Table(attack_table)), "attack settings", &mut problems);
        problems.extend(attack.problems());
        let config = Self {
            attack,
            dataset,
            vectors,
            fallback,
            out,
            export_png,
            surrogate,
            victim,
            eval,
        };
        (config, problems)
    }

    /// File (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::from_table(Self::load_table(path, overrides)?)
    }

    /// The merged document before interpretation.
    pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<toml::Table> {
        let mut table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let mut t: toml::Table = toml::from_str(&text).map_err(|e| Error::Format {
                    path: p.to_path_buf(),
                    line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
                    message: e.message().to_string(),
                })?;
                absolutize(&mut t, p.parent().unwrap_or(Path::new(".")));
                t
            }
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Ok(table)
    }

    pub fn victim_spec(&self) -> &BackendSpec {
        self.victim.as_ref().unwrap_or(&self.surrogate)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            top_k: self.attack.top_k.clone(),
            restrict_to_clean_hits: self.eval.restrict_to_clean_hits,
            adversarial_galleries: self.eval.adversarial_galleries,
        }
    }

    /// Missing input files, for commands that need them.
    pub fn missing_inputs(&self, need_dataset: bool) -> Vec<String> {
        let mut out = Vec::new();
        match &self.dataset {
            None if need_dataset => out.push("no dataset configured (set `dataset`)".into()),
            Some(p) if need_dataset && !p.is_file() => out.push(format!("dataset file not found: {}", p.display())),
            _ => {}
        }
        for (what, p) in [("vector", &self.vectors), ("fallback synonym", &self.fallback)] {
            if let Some(p) = p {
                if !p.is_file() {
                    out.push(format!("{what} file not found: {}", p.display()));
                }
            }
        }
        for spec in [Some(&self.surrogate), self.victim.as_ref()].into_iter().flatten() {
            if let Some(w) = &spec.weights {
                if !w.is_file() {
                    out.push(format!("weights file not found: {}", w.display()));
                }
            }
        }
        out
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        let store = match &self.vectors {
            Some(p) => {
                let s = VectorStore::load(p)?;
                if !s.malformed_lines().is_empty() {
                    log::warn!("{}: skipped {} malformed lines", p.display(), s.malformed_lines().len());
                }
                s
            }
            None => VectorStore::default(),
        };
        Ok(match &self.fallback {
            Some(p) => Lexicon::new(store, StaticSynonymTable::load(p)?),
            None => Lexicon::new(store, NoFallback),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
