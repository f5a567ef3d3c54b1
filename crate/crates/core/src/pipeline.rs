//! End-to-end orchestration: ingest, split, annotate (single annotator or
//! persona fan-out), router training and persona selection, aggregation, weak
//! labels, classifier training, threshold tuning and evaluation against the
//! lexical baseline. Every artifact is listed with its digest in a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    load_annotations, to_store, write_annotations, AnnotatedQuery, Annotation, AnnotationStore, Confidence,
};
use crate::baseline::{lexical_match, Gazetteer};
use crate::classifier::{
    join_labels, train_classifier, tune_thresholds, weak_labels_from_annotations, Classifier, ClassifierConfig,
    LabeledQuery, ThresholdObjective,
};
use crate::data::{load_queries, rebalance_by_entity, split_dataset, write_jsonl, QueryRecord, DEFAULT_CAP_FRACTION};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, matched_operating_point, relative_gain, EvalReport, MatchTarget};
use crate::features::{Encoder, EncoderSpec};
use crate::llm::{AnnotatorClient, AnnotatorConfig, AnnotatorHandle, MockAnnotator, ResponseCache};
use crate::personas::{
    aggregate_ensemble, build_confidence_matrix, load_personas, shipped_personas, write_matrices, ConfidenceMatrix,
    Persona, DEFAULT_AGGREGATION_THRESHOLD,
};
use crate::prompting::{parse_response, PromptBuilder, PromptConfig, PromptVariant};
use crate::router::{select_top_k, top_k_indices, train_router, RouterExample, RouterModel, RouterTrainConfig};
use crate::synth::{gold_store, records as synth_records, SynthConfig, SynthWorld};
use crate::taxonomy::EntityRegistry;
use crate::text::{derive_seed, sha256_hex};

const MANIFEST_FORMAT: &str = "querylabel-manifest-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PersonaSelection {
    /// One annotator call per query, no persona preamble.
    None,
    /// `k` personas drawn at random per query.
    RandomK { k: usize },
    /// The `k` most relevant personas according to a trained router.
    RouterK { k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneObjective {
    MaxF1,
    MatchBaselineRecall,
    MatchBaselinePrecision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: crate::data::DEFAULT_RATIOS,
            seed: 42,
        }
    }
}

fn default_variant() -> PromptVariant {
    PromptVariant::ConfidenceCotIcl
}
fn default_selection() -> PersonaSelection {
    PersonaSelection::None
}
fn default_threshold() -> f64 {
    DEFAULT_AGGREGATION_THRESHOLD
}
fn default_cap() -> f64 {
    DEFAULT_CAP_FRACTION
}
fn default_min_confidence() -> Confidence {
    Confidence::High
}
fn default_router_encoder() -> EncoderSpec {
    EncoderSpec::hashed(256)
}
fn default_tune() -> TuneObjective {
    TuneObjective::MaxF1
}
fn default_selection_seed() -> u64 {
    7
}

/// Pipeline configuration. Relative paths resolve against `base_dir`
/// (the config file's directory when loaded from disk).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub personas: Option<PathBuf>,
    #[serde(default)]
    pub prompt_template: Option<PathBuf>,
    /// Lexical baseline dictionary.
    pub gazetteer: PathBuf,
    pub queries: PathBuf,
    /// Gold annotations; needed for router training, otherwise evaluation
    /// falls back to the weak labels.
    #[serde(default)]
    pub gold: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub annotator: AnnotatorConfig,
    #[serde(default = "default_variant")]
    pub prompt_variant: PromptVariant,
    #[serde(default = "default_selection")]
    pub persona_selection: PersonaSelection,
    #[serde(default = "default_selection_seed")]
    pub selection_seed: u64,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "default_threshold")]
    pub aggregation_threshold: f64,
    #[serde(default = "default_cap")]
    pub rebalance_cap: f64,
    #[serde(default = "default_min_confidence")]
    pub min_confidence: Confidence,
    #[serde(default = "default_router_encoder")]
    pub router_encoder: EncoderSpec,
    #[serde(default)]
    pub router: RouterTrainConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default = "default_tune")]
    pub tune: TuneObjective,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Seeds that influence the outputs, by role.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        s.insert("split".into(), self.split.seed);
        s.insert("persona_selection".into(), self.selection_seed);
        s.insert("router".into(), self.router.seed);
        s.insert("classifier".into(), self.classifier.seed);
        if let AnnotatorConfig::Mock(m) = &self.annotator {
            s.insert("mock_annotator".into(), m.seed);
        }
        s
    }

    /// Checks every referenced input before any work is done.
    pub fn validate(&self) -> Result<()> {
        let mut inputs: Vec<(&str, &PathBuf)> = vec![("gazetteer", &self.gazetteer), ("queries", &self.queries)];
        for (name, p) in [
            ("registry", &self.registry),
            ("personas", &self.personas),
            ("prompt_template", &self.prompt_template),
            ("gold", &self.gold),
        ] {
            if let Some(p) = p {
                inputs.push((name, p));
            }
        }
        if let AnnotatorConfig::Mock(m) = &self.annotator {
            inputs.push(("annotator.gazetteer", &m.gazetteer));
        }
        for (name, p) in inputs {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::Config(format!("{name} file {} does not exist", full.display())));
            }
        }
        match self.persona_selection {
            PersonaSelection::None => {}
            PersonaSelection::RandomK { k } | PersonaSelection::RouterK { k } if k == 0 => {
                return Err(Error::Config("persona selection k must be at least 1".into()))
            }
            PersonaSelection::RouterK { .. } if self.gold.is_none() => {
                return Err(Error::Config("router persona selection needs a gold annotation file".into()))
            }
            _ => {}
        }
        self.router.validate()?;
        self.classifier.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_sha256: String,
    pub registry_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// What a run did besides writing files. Not part of the manifest, so that
/// reruns produce identical manifests.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub llm_calls: usize,
    pub cache_hits: usize,
    /// Annotator requests that failed or gave unparseable responses.
    pub failures: Vec<String>,
    /// Queries left out downstream because an annotation was missing.
    pub dropped_queries: usize,
}

/// Result of annotating a set of (query, persona) pairs.
#[derive(Clone, Debug, Default)]
pub struct AnnotationRun {
    pub records: Vec<AnnotatedQuery>,
    pub failures: Vec<String>,
}

/// Tag used for annotations made with or without a persona.
pub fn annotator_tag(persona: Option<&Persona>) -> String {
    persona.map_or_else(|| "llm".to_owned(), |p| format!("persona:{}", p.id))
}

/// Builds one prompt per (record, persona) pair, sends them as one batch and
/// parses the responses. Failed or unparseable responses become failure
/// messages; the rest keep input order.
pub fn annotate_records(
    client: &AnnotatorClient,
    builder: &PromptBuilder,
    registry: &EntityRegistry,
    config: &PromptConfig,
    jobs: &[(&QueryRecord, Option<&Persona>)],
) -> Result<AnnotationRun> {
    if jobs.is_empty() {
        return Ok(AnnotationRun::default());
    }
    let prompts = jobs
        .iter()
        .map(|(r, p)| builder.build(config, registry, &r.text, *p))
        .collect::<Result<Vec<_>>>()?;
    let responses = client.annotate_batch(&prompts)?;
    let mut run = AnnotationRun::default();
    for ((record, persona), resp) in jobs.iter().zip(responses) {
        let tag = annotator_tag(*persona);
        match resp {
            Err(f) => run.failures.push(format!("{} [{tag}]: {} after {} attempts", record.id, f.message, f.attempts)),
            Ok(raw) => match parse_response(registry, &raw) {
                Ok(parsed) => run.records.push(AnnotatedQuery {
                    id: record.id.clone(),
                    text: Some(record.text.clone()),
                    annotator: tag,
                    annotation: parsed.annotation,
                }),
                Err(e) => run.failures.push(format!("{} [{tag}]: {e}", record.id)),
            },
        }
    }
    Ok(run)
}

/// Matrices for every query annotated by all personas; other queries are skipped.
pub fn matrices_from_runs(
    records: &[QueryRecord],
    annotations: &[AnnotatedQuery],
    personas: &[Persona],
    registry: &EntityRegistry,
) -> Result<Vec<ConfidenceMatrix>> {
    let mut by_query: BTreeMap<&str, BTreeMap<String, Annotation>> = BTreeMap::new();
    for a in annotations {
        if let Some(pid) = a.annotator.strip_prefix("persona:") {
            by_query
                .entry(a.id.as_str())
                .or_default()
                .insert(pid.to_owned(), a.annotation.clone());
        }
    }
    let mut out = Vec::new();
    for r in records {
        let Some(per) = by_query.get(r.id.as_str()) else { continue };
        match build_confidence_matrix(&r.id, per, personas, registry) {
            Ok(m) => out.push(m),
            Err(Error::MissingPersona(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Aggregates each matrix over a subset of persona rows (weight 1 for the
/// chosen rows, 0 for the rest).
pub fn aggregate_selected(matrix: &ConfidenceMatrix, rows: &[usize], threshold: f64) -> Result<Annotation> {
    let mut w = vec![0.0; matrix.num_personas()];
    for &r in rows {
        w[r] = 1.0;
    }
    aggregate_ensemble(matrix, Some(&w), threshold)
}

/// `k` distinct persona rows drawn per query, seeded by query id.
pub fn random_rows(query_id: &str, num_personas: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > num_personas {
        return Err(Error::InvalidArgument(format!("k must be in 1..={num_personas}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, query_id));
    let mut rows: Vec<usize> = (0..num_personas).collect();
    rows.shuffle(&mut rng);
    rows.truncate(k);
    Ok(rows)
}

/// Router training examples for `records` (those with a matrix and gold).
pub fn router_examples(
    records: &[QueryRecord],
    matrices: &BTreeMap<String, ConfidenceMatrix>,
    gold: &AnnotationStore,
    encoder: &Encoder,
    registry: &EntityRegistry,
) -> Result<Vec<RouterExample>> {
    let mut out = Vec::new();
    for r in records {
        let (Some(m), Some(g)) = (matrices.get(&r.id), gold.get(&r.id)) else { continue };
        out.push(RouterExample {
            embedding: encoder.encode(&r.text)?,
            matrix: m.clone(),
            gold: g.indicator(registry.len(), Confidence::Low),
        });
    }
    Ok(out)
}

struct ArtifactWriter {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactWriter {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.push(ArtifactEntry {
            name: name.to_owned(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn lines_of(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn labeled(records: &[QueryRecord], labels: &BTreeMap<String, Vec<bool>>) -> Result<Vec<LabeledQuery>> {
    let present: Vec<QueryRecord> = records.iter().filter(|r| labels.contains_key(&r.id)).cloned().collect();
    join_labels(&present, labels)
}

/// Runs every stage and writes the artifacts plus `manifest.json` under the
/// output directory.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    stage("config", || config.validate())?;
    let registry = stage("config", || match &config.registry {
        Some(p) => EntityRegistry::load(config.resolve(p)),
        None => Ok(EntityRegistry::shipped()),
    })?;
    let personas = stage("config", || match &config.personas {
        Some(p) => load_personas(config.resolve(p)),
        None => Ok(shipped_personas()),
    })?;
    let builder = stage("config", || match &config.prompt_template {
        Some(p) => Ok(PromptBuilder::new(crate::prompting::PromptTemplate::load(config.resolve(p))?)),
        None => Ok(PromptBuilder::default()),
    })?;
    let baseline_gazetteer = stage("config", || Gazetteer::load(config.resolve(&config.gazetteer), &registry))?;
    let gold: Option<AnnotationStore> = stage("config", || {
        config
            .gold
            .as_ref()
            .map(|p| load_annotations(config.resolve(p), &registry).map(|r| to_store(&r)))
            .transpose()
    })?;
    if let PersonaSelection::RandomK { k } | PersonaSelection::RouterK { k } = config.persona_selection {
        if k > personas.len() {
            return Err(Error::Config(format!("k = {k} exceeds the {} loaded personas", personas.len())));
        }
    }
    let client = stage("config", || {
        let handle = AnnotatorHandle::from_config(&config.annotator, &registry, &config.base_dir)?;
        let cache = ResponseCache::open(config.resolve(&config.cache_dir))?;
        Ok(AnnotatorClient::new(handle, Some(cache)))
    })?;
    let out_dir = config.resolve(&config.output_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut art = ArtifactWriter {
        dir: out_dir.clone(),
        entries: Vec::new(),
    };

    // ingest
    let records = stage("ingest", || {
        let recs = load_queries(config.resolve(&config.queries))?;
        art.write("queries.jsonl", &lines_of(|b| write_jsonl(b, &recs))?)?;
        Ok(recs)
    })?;
    let frequencies: BTreeMap<String, u64> = records.iter().map(|r| (r.id.clone(), r.frequency)).collect();

    // split
    let split = stage("split", || {
        let s = split_dataset(&records, config.split.ratios, config.split.seed)?;
        art.write("split.jsonl", &lines_of(|b| s.write_manifest(b))?)?;
        Ok(s)
    })?;

    // annotate
    let prompt_config = PromptConfig::new(config.prompt_variant, &registry);
    let mut failures = Vec::new();
    let final_annotations: AnnotationStore = match config.persona_selection {
        PersonaSelection::None => stage("annotate", || {
            let jobs: Vec<(&QueryRecord, Option<&Persona>)> = records.iter().map(|r| (r, None)).collect();
            let run = annotate_records(&client, &builder, &registry, &prompt_config, &jobs)?;
            failures.extend(run.failures);
            art.write("annotations.jsonl", &lines_of(|b| write_annotations(b, &registry, &run.records))?)?;
            Ok(to_store(&run.records))
        })?,
        PersonaSelection::RandomK { k } => stage("annotate", || {
            let np = personas.len();
            let mut jobs = Vec::new();
            for r in &records {
                for row in random_rows(&r.id, np, k, config.selection_seed)? {
                    jobs.push((r, Some(&personas[row])));
                }
            }
            let run = annotate_records(&client, &builder, &registry, &prompt_config, &jobs)?;
            failures.extend(run.failures);
            art.write(
                "persona_annotations.jsonl",
                &lines_of(|b| write_annotations(b, &registry, &run.records))?,
            )?;
            // only the drawn personas were asked, so aggregate over those rows
            let mut per_query: BTreeMap<&str, BTreeMap<String, Annotation>> = BTreeMap::new();
            for a in &run.records {
                let pid = a.annotator.trim_start_matches("persona:").to_owned();
                per_query.entry(a.id.as_str()).or_default().insert(pid, a.annotation.clone());
            }
            let mut store = AnnotationStore::new();
            let mut aggregated = Vec::new();
            for r in &records {
                let drawn: Vec<Persona> = random_rows(&r.id, np, k, config.selection_seed)?
                    .into_iter()
                    .map(|i| personas[i].clone())
                    .collect();
                let Some(per) = per_query.get(r.id.as_str()) else { continue };
                let Ok(m) = build_confidence_matrix(&r.id, per, &drawn, &registry) else { continue };
                let a = aggregate_ensemble(&m, None, config.aggregation_threshold)?;
                aggregated.push(AnnotatedQuery {
                    id: r.id.clone(),
                    text: Some(r.text.clone()),
                    annotator: format!("random-{k}"),
                    annotation: a.clone(),
                });
                store.insert(r.id.clone(), a);
            }
            art.write("annotations.jsonl", &lines_of(|b| write_annotations(b, &registry, &aggregated))?)?;
            Ok(store)
        })?,
        PersonaSelection::RouterK { k } => {
            let gold = gold.as_ref().expect("validated");
            let (matrices, run_failures) = stage("annotate", || {
                let jobs: Vec<(&QueryRecord, Option<&Persona>)> =
                    records.iter().flat_map(|r| personas.iter().map(move |p| (r, Some(p)))).collect();
                let run = annotate_records(&client, &builder, &registry, &prompt_config, &jobs)?;
                art.write(
                    "persona_annotations.jsonl",
                    &lines_of(|b| write_annotations(b, &registry, &run.records))?,
                )?;
                Ok((matrices_from_runs(&records, &run.records, &personas, &registry)?, run.failures))
            })?;
            failures.extend(run_failures);
            stage("matrix", || art.write("matrices.csv", &lines_of(|b| write_matrices(b, &matrices, &registry))?))?;
            let by_id: BTreeMap<String, ConfidenceMatrix> =
                matrices.into_iter().map(|m| (m.query_id.clone(), m)).collect();
            let encoder = Encoder::from_spec(&config.router_encoder)?;
            let router = stage("router", || {
                let train_gold: AnnotationStore = split
                    .train
                    .iter()
                    .filter_map(|r| gold.get(&r.id).map(|g| (r.id.clone(), g.clone())))
                    .collect();
                let train_recs: Vec<QueryRecord> =
                    split.train.iter().filter(|r| train_gold.contains_key(&r.id)).cloned().collect();
                let balanced = rebalance_by_entity(&train_recs, &train_gold, config.rebalance_cap)?;
                let examples = router_examples(&balanced, &by_id, gold, &encoder, &registry)?;
                let mut trained = train_router(&examples, &config.router)?;
                trained.model.encoder = Some(config.router_encoder.clone());
                let mut json = serde_json::to_string_pretty(&trained.model)?;
                json.push('\n');
                art.write("router.json", json.as_bytes())?;
                Ok(trained.model)
            })?;
            stage("aggregate", || {
                let mut store = AnnotationStore::new();
                let mut aggregated = Vec::new();
                for r in &records {
                    let Some(m) = by_id.get(&r.id) else { continue };
                    let relevance = router.forward(&encoder.encode(&r.text)?, false, 0)?;
                    let rows = top_k_indices(&relevance, &router.persona_ids, k)?;
                    let a = aggregate_selected(m, &rows, config.aggregation_threshold)?;
                    aggregated.push(AnnotatedQuery {
                        id: r.id.clone(),
                        text: Some(r.text.clone()),
                        annotator: format!("router-{k}"),
                        annotation: a.clone(),
                    });
                    store.insert(r.id.clone(), a);
                }
                art.write("annotations.jsonl", &lines_of(|b| write_annotations(b, &registry, &aggregated))?)?;
                Ok(store)
            })?
        }
    };
    let dropped_queries = records.len() - final_annotations.len();

    // weak labels
    let weak = stage("labels", || {
        let w = weak_labels_from_annotations(&registry, &final_annotations, config.min_confidence, "pipeline");
        art.write("weak_labels.jsonl", &lines_of(|b| w.write_jsonl(b, &registry))?)?;
        Ok(w)
    })?;

    // train + tune
    let reference: AnnotationStore = gold.clone().unwrap_or_else(|| final_annotations.clone());
    let ref_labels: BTreeMap<String, Vec<bool>> = reference
        .iter()
        .map(|(id, a)| (id.clone(), a.indicator(registry.len(), Confidence::Low)))
        .collect();
    let classifier = stage("train", || {
        let train = labeled(&split.train, &weak.labels)?;
        let dev = labeled(&split.dev, &weak.labels)?;
        let trained = train_classifier(&registry, &train, &dev, &config.classifier)?;
        Classifier::new(trained.model, &registry)
    })?;
    let classifier = stage("tune", || {
        let dev = labeled(&split.dev, &ref_labels)?;
        if dev.is_empty() {
            return Ok(classifier);
        }
        let probs = dev
            .iter()
            .map(|q| classifier.predict_probs(&q.text))
            .collect::<Result<Vec<_>>>()?;
        let golds: Vec<Vec<bool>> = dev.iter().map(|q| q.labels.clone()).collect();
        let objective = match config.tune {
            TuneObjective::MaxF1 => ThresholdObjective::MaxF1,
            t => {
                let dev_store: AnnotationStore = dev.iter().map(|q| (q.id.clone(), reference[&q.id].clone())).collect();
                let base: AnnotationStore = dev
                    .iter()
                    .map(|q| (q.id.clone(), lexical_match(&baseline_gazetteer, &q.text)))
                    .collect();
                let rep = compute_metrics(&registry, &dev_store, &base, &frequencies, false)?;
                let targets = rep.entities.iter().map(|e| match t {
                    TuneObjective::MatchBaselineRecall => e.counts.recall(),
                    _ => e.counts.precision(),
                });
                match t {
                    TuneObjective::MatchBaselineRecall => ThresholdObjective::MatchRecall(targets.collect()),
                    _ => ThresholdObjective::MatchPrecision(targets.collect()),
                }
            }
        };
        let choices = tune_thresholds(&probs, &golds, None, &objective)?;
        let mut model = classifier.model().clone();
        model.set_thresholds(&choices.iter().map(|c| c.threshold).collect::<Vec<_>>())?;
        art.write("classifier.json", model.to_json()?.as_bytes())?;
        Classifier::new(model, &registry)
    })?;
    if !art.entries.iter().any(|e| e.name == "classifier.json") {
        art.write("classifier.json", classifier.model().to_json()?.as_bytes())?;
    }

    // evaluate on the test split
    stage("eval", || {
        let test: Vec<&QueryRecord> = split.test.iter().filter(|r| reference.contains_key(&r.id)).collect();
        if test.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let gold_t: AnnotationStore = test.iter().map(|r| (r.id.clone(), reference[&r.id].clone())).collect();
        let mut probs = BTreeMap::new();
        let mut clf = AnnotationStore::new();
        for r in &test {
            probs.insert(r.id.clone(), classifier.predict_probs(&r.text)?);
            clf.insert(r.id.clone(), classifier.predict(&r.text)?);
        }
        let base: AnnotationStore = test
            .iter()
            .map(|r| (r.id.clone(), lexical_match(&baseline_gazetteer, &r.text)))
            .collect();
        let llm: AnnotationStore = test
            .iter()
            .map(|r| (r.id.clone(), final_annotations.get(&r.id).cloned().unwrap_or_default()))
            .collect();
        let ref_name = if gold.is_some() { "gold" } else { "weak_labels" };
        let mut buf = Vec::new();
        for weighted in [false, true] {
            let mut reports: Vec<EvalReport> = Vec::new();
            for (name, pred) in [("baseline", &base), ("llm", &llm), ("classifier", &clf)] {
                let mut r = compute_metrics(&registry, &gold_t, pred, &frequencies, weighted)?;
                r.reference = ref_name.into();
                r.candidate = name.into();
                r.write_jsonl(&mut buf)?;
                reports.push(r);
            }
            for cand in &reports[1..] {
                let g = relative_gain(cand, &reports[0])?;
                let line = serde_json::json!({
                    "kind": "relative_gain",
                    "candidate": cand.candidate,
                    "baseline": "baseline",
                    "weighted": weighted,
                    "micro": g.micro,
                });
                serde_json::to_writer(&mut buf, &line)?;
                buf.write_all(b"\n")?;
            }
            for target in [MatchTarget::Recall, MatchTarget::Precision] {
                let m = matched_operating_point(&registry, &probs, &gold_t, &frequencies, &reports[0], target)?;
                let line = serde_json::json!({
                    "kind": "matched_operating_point",
                    "target": target,
                    "weighted": weighted,
                    "value": m.reported(),
                    "baseline_value": match target {
                        MatchTarget::Recall => reports[0].micro.precision(),
                        MatchTarget::Precision => reports[0].micro.recall(),
                    },
                    "unattainable": m.unattainable().map(|e| e.entity.clone()).collect::<Vec<_>>(),
                });
                serde_json::to_writer(&mut buf, &line)?;
                buf.write_all(b"\n")?;
            }
        }
        art.write("eval.jsonl", &buf)
    })?;

    let mut config_json = serde_json::to_vec(config)?;
    config_json.extend_from_slice(registry.hash().as_bytes());
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config_sha256: sha256_hex(&config_json),
        registry_hash: registry.hash().to_owned(),
        seeds: config.seeds(),
        artifacts: art.entries,
    };
    let manifest_path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(PipelineOutcome {
        manifest,
        manifest_path,
        llm_calls: client.calls(),
        cache_hits: client.cache_hits(),
        failures,
        dropped_queries,
    })
}

/// Per-variant metrics of parsed annotations against gold, with the same
/// annotator and queries for every variant.
pub fn prompt_variant_ablation(
    client: &AnnotatorClient,
    registry: &EntityRegistry,
    records: &[QueryRecord],
    gold: &AnnotationStore,
    frequencies: &BTreeMap<String, u64>,
    weighted: bool,
) -> Result<Vec<(PromptVariant, EvalReport)>> {
    let builder = PromptBuilder::default();
    let mut out = Vec::new();
    for variant in PromptVariant::ALL {
        let cfg = PromptConfig::new(variant, registry);
        let jobs: Vec<(&QueryRecord, Option<&Persona>)> =
            records.iter().filter(|r| gold.contains_key(&r.id)).map(|r| (r, None)).collect();
        let run = annotate_records(client, &builder, registry, &cfg, &jobs)?;
        let mut pred = to_store(&run.records);
        for (r, _) in &jobs {
            pred.entry(r.id.clone()).or_default();
        }
        let g: AnnotationStore = jobs.iter().map(|(r, _)| (r.id.clone(), gold[&r.id].clone())).collect();
        let mut rep = compute_metrics(registry, &g, &pred, frequencies, weighted)?;
        rep.candidate = variant.as_str().into();
        out.push((variant, rep));
    }
    Ok(out)
}

/// Micro-F1 of router top-k aggregation and of random-k selection (mean over
/// `random_seeds`) on the given matrices.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionComparison {
    pub k: usize,
    pub router: EvalReport,
    pub random: Vec<(u64, EvalReport)>,
}

impl SelectionComparison {
    pub fn random_mean_f1(&self) -> f64 {
        self.random.iter().map(|(_, r)| r.micro.f1()).sum::<f64>() / self.random.len().max(1) as f64
    }
}

#[allow(clippy::too_many_arguments)]
pub fn persona_selection_ablation(
    registry: &EntityRegistry,
    router: &RouterModel,
    encoder: &Encoder,
    records: &[QueryRecord],
    matrices: &BTreeMap<String, ConfidenceMatrix>,
    gold: &AnnotationStore,
    k: usize,
    threshold: f64,
    random_seeds: &[u64],
) -> Result<SelectionComparison> {
    let eval: Vec<&QueryRecord> = records
        .iter()
        .filter(|r| matrices.contains_key(&r.id) && gold.contains_key(&r.id))
        .collect();
    if eval.is_empty() {
        return Err(Error::Empty("selection evaluation set"));
    }
    let g: AnnotationStore = eval.iter().map(|r| (r.id.clone(), gold[&r.id].clone())).collect();
    let none = BTreeMap::new();
    let mut routed = AnnotationStore::new();
    for r in &eval {
        let chosen = select_top_k(router, &encoder.encode(&r.text)?, k)?;
        let m = &matrices[&r.id];
        let rows: Vec<usize> = chosen
            .iter()
            .map(|id| m.persona_ids.iter().position(|p| p == id).ok_or_else(|| Error::MissingPersona(id.clone())))
            .collect::<Result<_>>()?;
        routed.insert(r.id.clone(), aggregate_selected(m, &rows, threshold)?);
    }
    let mut router_report = compute_metrics(registry, &g, &routed, &none, false)?;
    router_report.candidate = format!("router-{k}");
    let mut random = Vec::new();
    for &seed in random_seeds {
        let mut pred = AnnotationStore::new();
        for r in &eval {
            let m = &matrices[&r.id];
            let rows = random_rows(&r.id, m.num_personas(), k, seed)?;
            pred.insert(r.id.clone(), aggregate_selected(m, &rows, threshold)?);
        }
        let mut rep = compute_metrics(registry, &g, &pred, &none, false)?;
        rep.candidate = format!("random-{k}");
        random.push((seed, rep));
    }
    Ok(SelectionComparison {
        k,
        router: router_report,
        random,
    })
}

/// Outcome of the synthetic routing experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingExperiment {
    /// Mean softmax relevance per persona over the held-out queries.
    pub mean_relevance: BTreeMap<String, f64>,
    pub comparison: SelectionComparison,
    pub final_loss: f64,
}

pub const ORACLE_PERSONA: &str = "oracle";
pub const ADVERSARIAL_PERSONA: &str = "adversarial";
pub const RANDOM_PERSONA: &str = "random";

/// Three synthetic personas over generated queries: one copies gold, one
/// labels exactly the non-gold entities, one labels each entity with
/// probability one half. A router is trained on the train part and compared
/// against random selection on the test part.
pub fn synthetic_routing_experiment(
    registry: &EntityRegistry,
    num_queries: usize,
    data_seed: u64,
    router: &RouterTrainConfig,
    k: usize,
    random_seeds: &[u64],
) -> Result<RoutingExperiment> {
    let world = SynthWorld::generate(
        registry,
        &SynthConfig {
            seed: data_seed,
            ..Default::default()
        },
    )?;
    let queries = world.queries(num_queries, data_seed)?;
    let gold = gold_store(&queries);
    let recs = synth_records(&queries);
    let persona_ids: Vec<String> = [ORACLE_PERSONA, ADVERSARIAL_PERSONA, RANDOM_PERSONA].map(String::from).to_vec();
    let n = registry.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(data_seed, "random-persona"));
    let mut matrices = BTreeMap::new();
    for q in &queries {
        let g = q.gold.indicator(n, Confidence::Low);
        let mut values = Vec::with_capacity(3 * n);
        values.extend(g.iter().map(|&b| if b { 3u8 } else { 0 }));
        values.extend(g.iter().map(|&b| if b { 0u8 } else { 3 }));
        values.extend((0..n).map(|_| if rng.gen_bool(0.5) { 3u8 } else { 0 }));
        let m = ConfidenceMatrix::new(q.record.id.as_str(), persona_ids.clone(), registry.hash(), n, values)?;
        matrices.insert(q.record.id.clone(), m);
    }
    let split = split_dataset(&recs, crate::data::DEFAULT_RATIOS, data_seed)?;
    let encoder = Encoder::from_spec(&EncoderSpec::hashed(256))?;
    let train = router_examples(&split.train, &matrices, &gold, &encoder, registry)?;
    let trained = train_router(&train, router)?;
    let mut sums = vec![0.0; 3];
    for r in &split.test {
        let rel = trained.model.forward(&encoder.encode(&r.text)?, false, 0)?;
        for (s, v) in sums.iter_mut().zip(rel) {
            *s += v;
        }
    }
    let mean_relevance = persona_ids
        .iter()
        .zip(&sums)
        .map(|(p, s)| (p.clone(), s / split.test.len() as f64))
        .collect();
    let comparison = persona_selection_ablation(
        registry,
        &trained.model,
        &encoder,
        &split.test,
        &matrices,
        &gold,
        k,
        DEFAULT_AGGREGATION_THRESHOLD,
        random_seeds,
    )?;
    Ok(RoutingExperiment {
        mean_relevance,
        comparison,
        final_loss: trained.history.last().map_or(f64::NAN, |p| p.loss),
    })
}

/// Prompt-variant grid on generated queries whose dictionary contains
/// phrases shared by two entities; only the in-context examples tell the
/// mock annotator which one is meant.
pub fn synthetic_prompt_experiment(
    registry: &EntityRegistry,
    num_queries: usize,
    seed: u64,
    noise_rate: f64,
) -> Result<Vec<(PromptVariant, EvalReport)>> {
    let world = SynthWorld::generate(
        registry,
        &SynthConfig {
            seed,
            ambiguous_from_icl: true,
            ..Default::default()
        },
    )?;
    let queries = world.queries(num_queries, seed)?;
    let mock = MockAnnotator::new(registry, world.gazetteer.clone(), seed, noise_rate, &BTreeMap::new())?;
    let client = AnnotatorClient::new(AnnotatorHandle::Mock(mock), None);
    let frequencies = queries.iter().map(|q| (q.record.id.clone(), q.record.frequency)).collect();
    prompt_variant_ablation(&client, registry, &synth_records(&queries), &gold_store(&queries), &frequencies, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_rows_are_seeded_and_distinct() {
        let a = random_rows("q1", 5, 3, 1).unwrap();
        assert_eq!(a, random_rows("q1", 5, 3, 1).unwrap());
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 3);
        assert!(random_rows("q1", 5, 6, 1).is_err());
    }

    #[test]
    fn aggregate_selected_uses_only_chosen_rows() {
        let m = ConfidenceMatrix::new("q", vec!["a".into(), "b".into()], "h", 2, vec![3, 0, 1, 2]).unwrap();
        let a = aggregate_selected(&m, &[0], 1.5).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a.get(crate::EntityId::new(0)), Some(Confidence::High));
    }

    #[test]
    fn missing_input_is_a_config_error() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"registry":"nope.jsonl","gazetteer":"g","queries":"q","cache_dir":"c","output_dir":"o",
                "annotator":{"kind":"mock","seed":1,"gazetteer":"g"}}"#,
        )
        .unwrap();
        match run_pipeline(&cfg) {
            Err(Error::Stage { stage: "config", source }) => assert!(matches!(*source, Error::Config(_))),
            other => panic!("{other:?}"),
        }
    }
}
