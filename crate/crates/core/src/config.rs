//! Single TOML configuration file with `${VAR}` interpolation in string
//! values. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::BusConfig;
use crate::classifier::{
    Aggregation, BaselineModel, BaselineScorer, ChunkingPolicy, FallbackScorer, RemoteScorer,
    Scorer, DEFAULT_THRESHOLD,
};
use crate::enrichment::{self, FixtureProvider, LiveProvider, Provider, Verifier};
use crate::extractor::{DefangGrammar, Extractor};
use crate::fetcher::FetchConfig;
use crate::frontier::{self, Network, Scope, SpiderProfile};
use crate::model::Spider;
use crate::ner::{FallbackTagger, Gazetteer, RemoteTagger};
use crate::remote::{RemoteClient, RemoteConfig};
use crate::sink::SinkConfig;
use crate::stream_source::{HttpStreamConfig, ReplayOptions};

/// Env var consulted when no `--config` flag is given.
pub const CONFIG_ENV: &str = "TSTEM_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {0} referenced by the config is not set")]
    MissingEnv(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sources: SourcesConfig,
    pub spiders: SpidersConfig,
    pub bus: BusConfig,
    pub classifier: ClassifierConfig,
    pub ner: NerConfig,
    pub enrichment: EnrichmentConfig,
    pub sink: SinkConfig,
    pub metrics: MetricsConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourcesConfig {
    pub replay: Option<ReplaySource>,
    pub http: Option<HttpStreamConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySource {
    pub path: PathBuf,
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default, rename = "loop")]
    pub looping: bool,
    #[serde(default)]
    pub limit: Option<u64>,
}

impl ReplaySource {
    pub fn options(&self) -> ReplayOptions {
        ReplayOptions {
            rate: self.rate,
            looping: self.looping,
            limit: self.limit,
            ..ReplayOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpidersConfig {
    pub fetch: FetchConfig,
    pub workers: usize,
    /// Stop dispatching after this many fetches across all spiders.
    pub max_pages: Option<u64>,
    /// File of visited urls, loaded on start and saved on shutdown.
    pub visited: Option<PathBuf>,
    pub ache: Option<SpiderSection>,
    pub sitemap: Option<SpiderSection>,
    pub ahmia: Option<SpiderSection>,
    pub wiki1: Option<SpiderSection>,
    pub wiki2: Option<SpiderSection>,
}

impl Default for SpidersConfig {
    fn default() -> Self {
        SpidersConfig {
            fetch: FetchConfig::default(),
            workers: 4,
            max_pages: None,
            visited: None,
            ache: None,
            sitemap: None,
            ahmia: None,
            wiki1: None,
            wiki2: None,
        }
    }
}

/// Overrides on top of the spider's preset. Unset fields keep the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpiderSection {
    pub seeds: Vec<String>,
    pub seeds_file: Option<PathBuf>,
    pub network: Option<Network>,
    pub scope: Option<Scope>,
    pub max_depth: Option<u32>,
    pub min_delay_ms: Option<u64>,
    /// Case-insensitive regexes for the lexical pre-filter. Empty disables it.
    pub keywords: Option<Vec<String>>,
}

impl SpidersConfig {
    pub fn section(&self, spider: Spider) -> Option<&SpiderSection> {
        match spider {
            Spider::Ache => self.ache.as_ref(),
            Spider::Sitemap => self.sitemap.as_ref(),
            Spider::Ahmia => self.ahmia.as_ref(),
            Spider::Wiki1 => self.wiki1.as_ref(),
            Spider::Wiki2 => self.wiki2.as_ref(),
        }
    }

    /// Profiles for every configured spider, or just `only` when given.
    pub fn profiles(&self, only: Option<Spider>) -> Result<Vec<SpiderProfile>, ConfigError> {
        let mut out = Vec::new();
        for spider in Spider::ALL {
            if only.is_some_and(|o| o != spider) {
                continue;
            }
            let Some(sec) = self.section(spider) else {
                if only.is_some() {
                    return Err(invalid(format!("no [spiders.{spider}] section")));
                }
                continue;
            };
            let mut seeds = sec.seeds.clone();
            if let Some(f) = &sec.seeds_file {
                seeds.extend(frontier::load_seeds(f).map_err(|e| invalid(e.to_string()))?);
            }
            let preset =
                SpiderProfile::preset(spider, seeds.clone()).map_err(|e| invalid(e.to_string()))?;
            let keywords = preset.keywords().to_vec();
            let profile = SpiderProfile::new(
                spider,
                sec.network.unwrap_or(preset.network),
                seeds,
                sec.scope.clone().unwrap_or(preset.scope),
                sec.max_depth.unwrap_or(preset.max_depth),
                sec.min_delay_ms
                    .map(Duration::from_millis)
                    .unwrap_or(preset.min_delay),
                sec.keywords.clone().unwrap_or(keywords),
            )
            .map_err(|e| invalid(e.to_string()))?;
            out.push(profile);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierBackend {
    #[default]
    Baseline,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backend: ClassifierBackend,
    /// Baseline model file. With the remote backend it is the fallback.
    pub model: Option<PathBuf>,
    pub endpoint: Option<String>,
    #[serde(with = "crate::fetcher::secs")]
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub threshold: f64,
    pub window: usize,
    pub stride: usize,
    pub aggregation: Aggregation,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let p = ChunkingPolicy::default();
        ClassifierConfig {
            backend: ClassifierBackend::Baseline,
            model: None,
            endpoint: None,
            timeout: Duration::from_secs(10),
            max_in_flight: 8,
            threshold: DEFAULT_THRESHOLD,
            window: p.window,
            stride: p.stride,
            aggregation: p.aggregation,
        }
    }
}

impl ClassifierConfig {
    pub fn policy(&self) -> Result<ChunkingPolicy, ConfigError> {
        ChunkingPolicy::new(self.window, self.stride, self.aggregation)
            .map_err(|e| invalid(e.to_string()))
    }

    fn baseline(&self) -> Result<Option<BaselineScorer>, ConfigError> {
        let Some(path) = &self.model else {
            return Ok(None);
        };
        let model = BaselineModel::load(path).map_err(|e| invalid(e.to_string()))?;
        BaselineScorer::new(Arc::new(model), self.policy()?, self.threshold)
            .map(Some)
            .map_err(|e| invalid(e.to_string()))
    }

    pub fn build_scorer(&self) -> Result<Arc<dyn Scorer>, ConfigError> {
        match self.backend {
            ClassifierBackend::Baseline => match self.baseline()? {
                Some(s) => Ok(Arc::new(s)),
                None => Err(invalid(
                    "classifier.model is required for the baseline backend",
                )),
            },
            ClassifierBackend::Remote => {
                let endpoint = self.endpoint.clone().ok_or_else(|| {
                    invalid("classifier.endpoint is required for the remote backend")
                })?;
                let mut rc = RemoteConfig::new(endpoint);
                rc.timeout = self.timeout;
                rc.max_in_flight = self.max_in_flight;
                let client = RemoteClient::new(&rc).map_err(|e| invalid(e.to_string()))?;
                let remote = RemoteScorer::new(client, self.threshold);
                Ok(match self.baseline()? {
                    Some(b) => Arc::new(FallbackScorer::new(Box::new(remote), Box::new(b))),
                    None => Arc::new(remote),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NerBackend {
    #[default]
    Fallback,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerConfig {
    pub backend: NerBackend,
    pub endpoint: Option<String>,
    #[serde(with = "crate::fetcher::secs")]
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// Answer with the offline tagger when the remote tagger fails.
    pub fallback: bool,
    /// Gazetteer JSON; the built-in list when unset.
    pub gazetteer: Option<PathBuf>,
    /// Defang grammar JSON shared by extraction and the offline tagger.
    pub grammar: Option<PathBuf>,
}

impl Default for NerConfig {
    fn default() -> Self {
        NerConfig {
            backend: NerBackend::Fallback,
            endpoint: None,
            timeout: Duration::from_secs(10),
            max_in_flight: 8,
            fallback: true,
            gazetteer: None,
            grammar: None,
        }
    }
}

impl NerConfig {
    pub fn build_extractor(&self) -> Result<Extractor, ConfigError> {
        match &self.grammar {
            Some(p) => Ok(Extractor::new(
                DefangGrammar::load(p).map_err(|e| invalid(e.to_string()))?,
            )),
            None => Ok(Extractor::default()),
        }
    }

    pub fn build_fallback(&self) -> Result<FallbackTagger, ConfigError> {
        let gaz = match &self.gazetteer {
            Some(p) => Gazetteer::load(p).map_err(|e| invalid(e.to_string()))?,
            None => Gazetteer::builtin(),
        };
        Ok(FallbackTagger::new(self.build_extractor()?, gaz))
    }

    pub fn build_remote(&self) -> Result<Option<RemoteTagger>, ConfigError> {
        if self.backend != NerBackend::Remote {
            return Ok(None);
        }
        let endpoint = self
            .endpoint
            .clone()
            .ok_or_else(|| invalid("ner.endpoint is required for the remote backend"))?;
        let mut rc = RemoteConfig::new(endpoint);
        rc.timeout = self.timeout;
        rc.max_in_flight = self.max_in_flight;
        let client = RemoteClient::new(&rc).map_err(|e| invalid(e.to_string()))?;
        Ok(Some(RemoteTagger::new(client)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveProviderConfig {
    pub name: String,
    pub base_url: String,
    /// Env var holding the API key.
    pub key_env: String,
    #[serde(default)]
    pub min_interval_ms: u64,
    #[serde(default = "default_provider_timeout", with = "crate::fetcher::secs")]
    pub timeout: Duration,
}

fn default_provider_timeout() -> Duration {
    Duration::from_secs(10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichmentConfig {
    pub enabled: bool,
    pub ttl_days: u64,
    /// JSON table `indicator_key -> provider -> bool`.
    pub fixture: Option<PathBuf>,
    /// Provider names answered from the fixture.
    pub fixture_providers: Vec<String>,
    pub live: Vec<LiveProviderConfig>,
}

impl Default for EnrichmentConfig {
    fn default() -> Self {
        EnrichmentConfig {
            enabled: false,
            ttl_days: enrichment::DEFAULT_TTL.as_secs() / 86_400,
            fixture: None,
            fixture_providers: vec!["virustotal".into(), "alienvault".into()],
            live: Vec::new(),
        }
    }
}

impl EnrichmentConfig {
    pub fn ttl(&self) -> Duration {
        Duration::from_secs(self.ttl_days * 86_400)
    }

    /// Fixture providers when `use_live` is false, live providers otherwise.
    pub fn build_verifier(&self, use_live: bool) -> Result<Verifier, ConfigError> {
        let mut providers: Vec<Arc<dyn Provider>> = Vec::new();
        let mut limits = Vec::new();
        if use_live {
            if self.live.is_empty() {
                return Err(invalid("no [[enrichment.live]] providers configured"));
            }
            for p in &self.live {
                let lp = LiveProvider::from_env(&p.name, &p.base_url, &p.key_env, p.timeout)
                    .map_err(|e| invalid(e.to_string()))?;
                providers.push(Arc::new(lp));
                limits.push((p.name.clone(), Duration::from_millis(p.min_interval_ms)));
            }
        } else {
            let path = self.fixture.as_ref().ok_or_else(|| {
                invalid("enrichment.fixture is required for fixture verification")
            })?;
            let table =
                Arc::new(enrichment::load_fixture(path).map_err(|e| invalid(e.to_string()))?);
            for name in &self.fixture_providers {
                providers.push(Arc::new(FixtureProvider::new(name, table.clone())));
            }
        }
        let mut v = Verifier::new(providers, self.ttl());
        for (name, iv) in limits {
            v.set_rate_limit(&name, iv);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Address for `GET /metrics`, e.g. `127.0.0.1:9464`.
    pub listen: Option<String>,
    /// Period of metric records written to the sink. Zero disables them.
    pub snapshot_interval_secs: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            listen: None,
            snapshot_interval_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Records per stage poll.
    pub batch_size: usize,
    pub poll_wait_ms: u64,
    /// Index verdict-only stubs for irrelevant documents.
    pub index_stubs: bool,
    /// Consumer group prefix; stages append their own name.
    pub group: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            batch_size: 64,
            poll_wait_ms: 100,
            index_stubs: true,
            group: "ctiflow".into(),
        }
    }
}

/// Replaces `${VAR}` with the variable's value. `$${` escapes a literal `${`.
pub fn interpolate(
    s: &str,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if let Some(t) = tail.strip_prefix("$${") {
            out.push_str("${");
            rest = t;
        } else if let Some(t) = tail.strip_prefix("${") {
            let end = t
                .find('}')
                .ok_or_else(|| invalid(format!("unterminated `${{` in `{s}`")))?;
            let name = &t[..end];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(invalid(format!("bad variable name `{name}`")));
            }
            out.push_str(&lookup(name).ok_or_else(|| ConfigError::MissingEnv(name.to_string()))?);
            rest = &t[end + 1..];
        } else {
            out.push('$');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(
    v: &mut toml::Value,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<(), ConfigError> {
    match v {
        toml::Value::String(s) => *s = interpolate(s, lookup)?,
        toml::Value::Array(a) => {
            for x in a {
                interpolate_value(x, lookup)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, x) in t.iter_mut() {
                interpolate_value(x, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl Config {
    /// Explicit path, else `TSTEM_CONFIG`.
    pub fn locate(explicit: Option<&Path>) -> Option<PathBuf> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg =
            Config::parse_with(&text, &|k| std::env::var(k).ok()).map_err(|e| match e {
                ConfigError::Parse { message, .. } => ConfigError::Parse {
                    path: path.to_path_buf(),
                    message,
                },
                other => other,
            })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_with(
        text: &str,
        lookup: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Config, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message,
        };
        let mut value: toml::Value = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        interpolate_value(&mut value, lookup)?;
        value
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))
    }

    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.bus.dir);
        fix(&mut self.sink.archive);
        fix_opt(&mut self.classifier.model);
        fix_opt(&mut self.ner.gazetteer);
        fix_opt(&mut self.ner.grammar);
        fix_opt(&mut self.enrichment.fixture);
        fix_opt(&mut self.spiders.visited);
        if let Some(r) = &mut self.sources.replay {
            fix(&mut r.path);
        }
        for sec in [
            &mut self.spiders.ache,
            &mut self.spiders.sitemap,
            &mut self.spiders.ahmia,
            &mut self.spiders.wiki1,
            &mut self.spiders.wiki2,
        ]
        .into_iter()
        .flatten()
        {
            fix_opt(&mut sec.seeds_file);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = self.classifier.threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("classifier.threshold {t} outside [0, 1]")));
        }
        self.classifier.policy()?;
        if self.pipeline.batch_size == 0 {
            return Err(invalid("pipeline.batch_size must be positive"));
        }
        if self.spiders.workers == 0 {
            return Err(invalid("spiders.workers must be positive"));
        }
        Ok(())
    }
}
