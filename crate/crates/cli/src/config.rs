//! One JSON config file drives everything; any field can be overridden on
//! the command line by a flag of the same dotted name, e.g.
//! `--cost.decode_per_token 0.5` or `--capacities.compute=8`. Override
//! values parse as JSON first (numbers, booleans) and fall back to strings,
//! so `--backend.kind remote` works unquoted.

use anyhow::{bail, Context, Result};
use fanout_core::backend::{GenerationBackend, RemoteConfig, SimBackend, SimCostModel};
use fanout_core::engine::Mode;
use fanout_core::exec::Capacities;
use fanout_core::prompt::PromptConfig;
use fanout_core::retrieval::{ChunkSpec, Corpus, HashEmbedder};
use fanout_core::Retriever;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendConfig,
    pub cost: CostConfig,
    pub capacities: CapacityConfig,
    pub retrieval: RetrievalConfig,
    /// Directory of prompt asset overrides (falls back to built-ins).
    pub prompt_dir: Option<PathBuf>,
    /// Where reports, timelines and answers land.
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Default mode for `run`: normal, parexp, depexp or pipsch.
    pub mode: String,
    /// Output budget per expansion call (None lets the backend decide).
    pub max_tokens: Option<usize>,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            backend: BackendConfig::default(),
            cost: CostConfig::default(),
            capacities: CapacityConfig::default(),
            retrieval: RetrievalConfig::default(),
            prompt_dir: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            mode: "depexp".to_string(),
            max_tokens: None,
            service: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// "sim" or "remote".
    pub kind: String,
    /// Remote endpoint base URL (the client appends the completions path).
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Sim: output length when neither scripts nor the request pin one.
    pub default_output_tokens: usize,
    /// Sim: error on unscripted prompts instead of synthesizing.
    pub strict: bool,
    /// Sim: JSON file with `{"keys": {...}, "prompts": {...}}` scripts.
    pub script_file: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: "sim".to_string(),
            base_url: "http://localhost:8000".to_string(),
            model: "default".to_string(),
            api_key_env: "FANOUT_API_KEY".to_string(),
            timeout_secs: 120,
            max_retries: 2,
            default_output_tokens: 64,
            strict: false,
            script_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub prefill_base: f64,
    pub prefill_per_token: f64,
    pub decode_per_token: f64,
    pub search_cost: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        let m = SimCostModel::<f64>::default();
        CostConfig {
            prefill_base: m.prefill_base,
            prefill_per_token: m.prefill_per_token,
            decode_per_token: m.decode_per_token,
            search_cost: m.search_cost,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityConfig {
    pub search: usize,
    pub compute: usize,
    pub bandwidth: usize,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        let c = Capacities::default();
        CapacityConfig {
            search: c.search,
            compute: c.compute,
            bandwidth: c.bandwidth,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Directory of .txt documents, one per file.
    pub corpus_dir: Option<PathBuf>,
    /// JSONL corpus, one `{"id":..., "text":...}` per line.
    pub corpus_jsonl: Option<PathBuf>,
    pub chunk_chars: usize,
    pub overlap_chars: usize,
    pub dimension: usize,
    pub embed_seed: u64,
    pub top_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let spec = ChunkSpec::default();
        RetrievalConfig {
            corpus_dir: None,
            corpus_jsonl: None,
            chunk_chars: spec.chunk_chars,
            overlap_chars: spec.overlap_chars,
            dimension: fanout_core::retrieval::DEFAULT_EMBED_DIM,
            embed_seed: 0,
            top_k: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Jobs admitted but not yet finished before submits get 503.
    pub queue_bound: usize,
    /// Finished jobs kept in memory; older ones spill or drop.
    pub result_cache: usize,
    /// Evicted results are written here as JSON when set.
    pub spill_dir: Option<PathBuf>,
    /// How long the scheduler collects submissions before running a batch.
    pub admission_window_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8787".to_string(),
            queue_bound: 64,
            result_cache: 256,
            spill_dir: None,
            admission_window_ms: 10,
        }
    }
}

/// Top-level scalar config fields that are overridable by their bare name
/// (they contain no dot). `mode` is deliberately absent: the subcommands
/// that honor it expose a native `--mode` flag instead.
const BARE_OVERRIDES: [&str; 4] = ["seed", "out_dir", "prompt_dir", "max_tokens"];

/// Splits argv into (args for the regular parser, config overrides). An
/// override is any `--section.field[=value]` flag — the dotted path of the
/// config field it sets — or a bare top-level name like `--seed 9`; without
/// `=` it consumes the following argument as its value.
pub fn split_dotted_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--") else {
            plain.push(arg);
            continue;
        };
        let field = name.split('=').next().unwrap_or(name);
        if !field.contains('.') && !BARE_OVERRIDES.contains(&field) {
            plain.push(arg);
            continue;
        }
        if let Some((key, value)) = name.split_once('=') {
            overrides.push((key.to_string(), value.to_string()));
        } else if let Some(value) = it.next() {
            overrides.push((name.to_string(), value));
        } else {
            overrides.push((name.to_string(), "true".to_string()));
        }
    }
    (plain, overrides)
}

/// Applies one `a.b.c = value` override onto the config JSON tree. Values
/// that parse as JSON are taken structurally; anything else is a string.
fn apply_override(tree: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str::<serde_json::Value>(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .with_context(|| format!("`{key}` does not name a config field"))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    node.as_object_mut()
        .with_context(|| format!("`{key}` does not name a config field"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Loads the config file (defaults when absent) and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
    let mut tree = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config file {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("config file {} is not valid JSON", p.display()))?
        }
        None => serde_json::to_value(Config::default()).expect("defaults serialize"),
    };
    for (key, value) in overrides {
        apply_override(&mut tree, key, value)?;
    }
    let cfg: Config = serde_json::from_value(tree).context("invalid configuration")?;
    if cfg.backend.kind != "sim" && cfg.backend.kind != "remote" {
        bail!("backend.kind must be `sim` or `remote`, not `{}`", cfg.backend.kind);
    }
    cfg.mode.parse::<Mode>().map_err(|e| anyhow::anyhow!(e))?;
    Ok(cfg)
}

/// Script file shape for the simulated backend.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScriptFile {
    /// Addressed by request script key.
    keys: BTreeMap<String, String>,
    /// Addressed by exact prompt text.
    prompts: BTreeMap<String, String>,
}

impl Config {
    pub fn cost_model(&self) -> SimCostModel<f64> {
        SimCostModel {
            prefill_base: self.cost.prefill_base,
            prefill_per_token: self.cost.prefill_per_token,
            decode_per_token: self.cost.decode_per_token,
            search_cost: self.cost.search_cost,
        }
    }

    pub fn capacities(&self) -> Capacities {
        Capacities {
            search: self.capacities.search,
            compute: self.capacities.compute,
            bandwidth: self.capacities.bandwidth,
        }
    }

    pub fn run_mode(&self) -> Mode {
        self.mode.parse().expect("validated at load")
    }

    pub fn is_sim(&self) -> bool {
        self.backend.kind == "sim"
    }

    pub fn build_backend(&self) -> Result<Arc<dyn GenerationBackend<f64>>> {
        match self.backend.kind.as_str() {
            "sim" => {
                let mut backend = SimBackend::new(self.cost_model());
                backend.set_default_output_tokens(self.backend.default_output_tokens);
                backend.set_strict(self.backend.strict);
                if let Some(path) = &self.backend.script_file {
                    let text = std::fs::read_to_string(path).with_context(|| {
                        format!("cannot read script file {}", path.display())
                    })?;
                    let scripts: ScriptFile = serde_json::from_str(&text).with_context(|| {
                        format!("script file {} is not valid", path.display())
                    })?;
                    for (key, output) in scripts.keys {
                        backend.script(key, output);
                    }
                    for (prompt, output) in scripts.prompts {
                        backend.prompt_script(prompt, output);
                    }
                }
                Ok(Arc::new(backend))
            }
            "remote" => {
                let api_key = std::env::var(&self.backend.api_key_env).ok();
                let remote = fanout_core::backend::RemoteBackend::new(RemoteConfig {
                    base_url: self.backend.base_url.clone(),
                    model: self.backend.model.clone(),
                    api_key,
                    timeout: Duration::from_secs(self.backend.timeout_secs),
                    max_retries: self.backend.max_retries,
                })
                .context("cannot build HTTP backend")?;
                Ok(Arc::new(remote))
            }
            other => bail!("backend.kind must be `sim` or `remote`, not `{other}`"),
        }
    }

    pub fn build_prompt(&self) -> Result<PromptConfig> {
        match &self.prompt_dir {
            Some(dir) => PromptConfig::load_dir(dir)
                .with_context(|| format!("cannot load prompts from {}", dir.display())),
            None => Ok(PromptConfig::default()),
        }
    }

    pub fn build_retriever(&self) -> Result<Option<Arc<Retriever>>> {
        let corpus = match (&self.retrieval.corpus_dir, &self.retrieval.corpus_jsonl) {
            (Some(dir), _) => Corpus::from_dir(dir)
                .with_context(|| format!("cannot read corpus from {}", dir.display()))?,
            (None, Some(path)) => Corpus::from_jsonl(path)
                .with_context(|| format!("cannot read corpus from {}", path.display()))?,
            (None, None) => return Ok(None),
        };
        let spec = ChunkSpec {
            chunk_chars: self.retrieval.chunk_chars,
            overlap_chars: self.retrieval.overlap_chars,
        };
        let embedder = HashEmbedder::new(self.retrieval.dimension, self.retrieval.embed_seed)
            .context("invalid embedding dimension")?;
        let retriever =
            Retriever::build(&corpus, &spec, embedder).context("cannot build retrieval index")?;
        Ok(Some(Arc::new(retriever)))
    }
}
