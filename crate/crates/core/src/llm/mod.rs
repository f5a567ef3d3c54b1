//! Annotator backends behind one batch interface, with a response cache.

pub mod cache;
pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

pub use cache::ResponseCache;
pub use http::{HttpAnnotator, HttpConfig};
pub use mock::{BiasAction, BiasRule, MockAnnotator};

use crate::baseline::Gazetteer;
use crate::error::{Error, Result};
use crate::prompting::PromptText;
use crate::taxonomy::EntityRegistry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    pub seed: u64,
    pub gazetteer: PathBuf,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub persona_bias: BTreeMap<String, Vec<BiasRule>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotatorConfig {
    Http(HttpConfig),
    Mock(MockConfig),
}

/// A request that did not produce a response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub index: usize,
    pub attempts: u32,
    pub transient: bool,
    pub message: String,
}

pub type Outcome = std::result::Result<String, FailureRecord>;

#[derive(Debug)]
pub enum AnnotatorHandle {
    Http(HttpAnnotator),
    Mock(MockAnnotator),
}

impl AnnotatorHandle {
    /// Builds a handle; relative gazetteer paths resolve against `base_dir`.
    pub fn from_config(config: &AnnotatorConfig, registry: &EntityRegistry, base_dir: &Path) -> Result<Self> {
        match config {
            AnnotatorConfig::Http(c) => Ok(AnnotatorHandle::Http(HttpAnnotator::new(c.clone())?)),
            AnnotatorConfig::Mock(c) => {
                let g = Gazetteer::load(base_dir.join(&c.gazetteer), registry)?;
                Ok(AnnotatorHandle::Mock(MockAnnotator::new(
                    registry,
                    g,
                    c.seed,
                    c.noise_rate,
                    &c.persona_bias,
                )?))
            }
        }
    }

    pub fn model_name(&self) -> &str {
        match self {
            AnnotatorHandle::Http(h) => &h.config().model,
            AnnotatorHandle::Mock(m) => m.model_name(),
        }
    }
}

/// Batch front end shared by all backends. Safe to share across threads.
#[derive(Debug)]
pub struct AnnotatorClient {
    handle: AnnotatorHandle,
    cache: Option<ResponseCache>,
    calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl AnnotatorClient {
    pub fn new(handle: AnnotatorHandle, cache: Option<ResponseCache>) -> Self {
        AnnotatorClient {
            handle,
            cache,
            calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn handle(&self) -> &AnnotatorHandle {
        &self.handle
    }

    /// Backend invocations so far, counting every HTTP attempt.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    /// Annotates `prompts`; the result is positionally aligned with the input.
    /// Per-prompt failures are returned in place and never abort the batch.
    pub fn annotate_batch(&self, prompts: &[PromptText]) -> Result<Vec<Outcome>> {
        if prompts.is_empty() {
            return Err(Error::Empty("prompt batch"));
        }
        let token = match &self.handle {
            AnnotatorHandle::Http(h) => h.config().token()?,
            AnnotatorHandle::Mock(_) => None,
        };
        let model = self.handle.model_name().to_owned();
        let keys: Vec<String> = prompts.iter().map(|p| ResponseCache::key(&p.text, &model)).collect();

        let mut out: Vec<Option<Outcome>> = vec![None; prompts.len()];
        let mut pending = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            match self.cache.as_ref().and_then(|c| c.get(key)) {
                Some(hit) => {
                    self.cache_hits.fetch_add(1, Ordering::SeqCst);
                    out[i] = Some(Ok(hit));
                }
                None => pending.push(i),
            }
        }

        match &self.handle {
            AnnotatorHandle::Mock(m) => {
                for &i in &pending {
                    self.calls.fetch_add(1, Ordering::SeqCst);
                    out[i] = Some(Ok(m.respond_to_prompt(&prompts[i])));
                }
            }
            AnnotatorHandle::Http(h) => {
                let results = Mutex::new(Vec::with_capacity(pending.len()));
                let next = AtomicUsize::new(0);
                let workers = h.config().max_in_flight.min(pending.len());
                let count = || {
                    self.calls.fetch_add(1, Ordering::SeqCst);
                };
                thread::scope(|s| {
                    for _ in 0..workers {
                        s.spawn(|| loop {
                            let k = next.fetch_add(1, Ordering::SeqCst);
                            let Some(&i) = pending.get(k) else { break };
                            let r = h.send(i, &prompts[i].text, token.as_deref(), &count);
                            results.lock().unwrap_or_else(|p| p.into_inner()).push((i, r));
                        });
                    }
                });
                for (i, r) in results.into_inner().unwrap_or_else(|p| p.into_inner()) {
                    out[i] = Some(r);
                }
            }
        }

        if let Some(cache) = &self.cache {
            for &i in &pending {
                if let Some(Ok(text)) = &out[i] {
                    cache.put(&keys[i], text)?;
                }
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every prompt answered")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{build_prompt, PromptConfig, PromptVariant};

    fn mock_client(cache: Option<ResponseCache>) -> (AnnotatorClient, EntityRegistry) {
        let reg = EntityRegistry::shipped();
        let mut g = Gazetteer::new();
        g.insert(reg.lookup("Genre").unwrap(), "comedy").unwrap();
        g.insert(reg.lookup("IntentMovie").unwrap(), "movies").unwrap();
        let m = MockAnnotator::new(&reg, g, 3, 0.0, &BTreeMap::new()).unwrap();
        (AnnotatorClient::new(AnnotatorHandle::Mock(m), cache), reg)
    }

    fn prompts(reg: &EntityRegistry, queries: &[&str]) -> Vec<PromptText> {
        let cfg = PromptConfig::new(PromptVariant::ConfidenceCotIcl, reg);
        queries.iter().map(|q| build_prompt(&cfg, reg, q, None).unwrap()).collect()
    }

    #[test]
    fn mock_batch_is_aligned() {
        let (client, reg) = mock_client(None);
        let ps = prompts(&reg, &["comedy movies", "nothing", "movies"]);
        let out = client.annotate_batch(&ps).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].as_deref(), Ok("Genre|High\nIntentMovie|High"));
        assert_eq!(out[1].as_deref(), Ok("None"));
        assert_eq!(out[2].as_deref(), Ok("IntentMovie|High"));
        assert!(client.annotate_batch(&[]).is_err());
    }

    #[test]
    fn rerun_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let (client, reg) = mock_client(Some(ResponseCache::open(dir.path()).unwrap()));
        let ps = prompts(&reg, &["comedy movies", "movies"]);
        let first = client.annotate_batch(&ps).unwrap();
        assert_eq!(client.calls(), 2);
        let (client2, _) = mock_client(Some(ResponseCache::open(dir.path()).unwrap()));
        let second = client2.annotate_batch(&ps).unwrap();
        assert_eq!(first, second);
        assert_eq!(client2.calls(), 0);
        assert_eq!(client2.cache_hits(), 2);
    }

    #[test]
    fn missing_auth_env_is_config_error() {
        let mut cfg = HttpConfig::new("http://127.0.0.1:9/never", "m");
        cfg.auth_env = Some("QUERYLABEL_TEST_UNSET_TOKEN_VAR".into());
        let client = AnnotatorClient::new(AnnotatorHandle::Http(HttpAnnotator::new(cfg).unwrap()), None);
        let reg = EntityRegistry::shipped();
        let err = client.annotate_batch(&prompts(&reg, &["x"])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(client.calls(), 0);
    }

    #[test]
    fn config_serde() {
        let json = r#"{"kind":"mock","seed":1,"gazetteer":"g.jsonl","persona_bias":{"p":[{"entity":"Sport","action":"always_add"}]}}"#;
        let cfg: AnnotatorConfig = serde_json::from_str(json).unwrap();
        assert!(matches!(cfg, AnnotatorConfig::Mock(ref m) if m.persona_bias["p"][0].action == BiasAction::AlwaysAdd));
        let json = r#"{"kind":"http","url":"http://x","model":"m","timeout_ms":100,"max_retries":2}"#;
        let cfg: AnnotatorConfig = serde_json::from_str(json).unwrap();
        assert!(matches!(cfg, AnnotatorConfig::Http(ref h) if h.max_in_flight == 4 && h.requests_per_second == 2.0));
    }
}
