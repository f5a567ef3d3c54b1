//! Seeded synthetic query worlds: pseudo-word gazetteer phrases per entity,
//! paraphrased queries built from templates with typos and inflections, and
//! gold labels. Used by the demo data, benchmarks and acceptance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{write_annotations, AnnotatedQuery, Annotation, AnnotationStore, Confidence};
use crate::baseline::{Gazetteer, MAX_PHRASE_TOKENS};
use crate::data::QueryRecord;
use crate::error::{Error, Result};
use crate::taxonomy::{EntityId, EntityRegistry};
use crate::text::{derive_seed, normalize};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const FILLERS: &[&str] = &[
    "watch", "find", "show", "me", "some", "good", "the", "best", "to", "stream", "tonight", "with", "about", "for",
    "kids", "please", "list", "top", "rated", "free", "now", "something", "like",
];
const TEMPLATES: &[&str] = &[
    "{}",
    "watch {}",
    "{} tonight",
    "best {}",
    "find {} to stream",
    "show me {}",
    "something like {}",
    "top rated {} please",
    "{} for kids",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Entities used, taken from the front of the registry.
    pub num_entities: usize,
    pub phrases_per_entity: usize,
    pub seed: u64,
    /// Probability that an inserted phrase gets a character-level typo.
    pub typo_rate: f64,
    /// Probability that an inserted phrase gets an inflection suffix.
    pub inflection_rate: f64,
    /// Probability that a query carries no entity at all.
    pub none_rate: f64,
    pub max_entities_per_query: usize,
    /// Add each entity's in-context examples as phrases that are also listed
    /// under a decoy entity, so that only the examples disambiguate them.
    pub ambiguous_from_icl: bool,
    /// Probability of drawing an ambiguous phrase when the entity has one.
    pub ambiguous_rate: f64,
    pub max_frequency: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_entities: 10,
            phrases_per_entity: 10,
            seed: 0,
            typo_rate: 0.1,
            inflection_rate: 0.1,
            none_rate: 0.1,
            max_entities_per_query: 2,
            ambiguous_from_icl: false,
            ambiguous_rate: 0.3,
            max_frequency: 50,
        }
    }
}

/// A generated phrase inventory. `gazetteer` is the complete dictionary; an
/// ambiguous phrase appears there under its true entity and a decoy.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub entities: Vec<EntityId>,
    /// Unambiguous phrases per entity.
    pub phrases: BTreeMap<EntityId, Vec<String>>,
    /// Ambiguous phrases per true entity, with their decoy entity.
    pub ambiguous: BTreeMap<EntityId, Vec<(String, EntityId)>>,
    pub gazetteer: Gazetteer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthQuery {
    pub record: QueryRecord,
    pub gold: Annotation,
}

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    if rng.gen_bool(0.5) {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
    }
    w
}

impl SynthWorld {
    pub fn generate(registry: &EntityRegistry, config: &SynthConfig) -> Result<Self> {
        if config.num_entities == 0 || config.num_entities > registry.len() {
            return Err(Error::InvalidArgument(format!(
                "num_entities must be in 1..={}, got {}",
                registry.len(),
                config.num_entities
            )));
        }
        if config.phrases_per_entity == 0 || config.max_entities_per_query == 0 || config.max_frequency == 0 {
            return Err(Error::InvalidArgument("phrase, entity and frequency limits must be at least 1".into()));
        }
        for (name, p) in [
            ("typo_rate", config.typo_rate),
            ("inflection_rate", config.inflection_rate),
            ("none_rate", config.none_rate),
            ("ambiguous_rate", config.ambiguous_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1]")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth-world"));
        let entities: Vec<EntityId> = registry.ids().take(config.num_entities).collect();
        let reserved: BTreeSet<String> = FILLERS.iter().map(|s| s.to_string()).collect();
        let mut used = BTreeSet::new();
        let mut gazetteer = Gazetteer::new();
        let mut phrases = BTreeMap::new();
        for &e in &entities {
            let mut list = Vec::with_capacity(config.phrases_per_entity);
            while list.len() < config.phrases_per_entity {
                let n = if rng.gen_bool(0.3) { 2 } else { 1 };
                let words: Vec<String> = (0..n).map(|_| pseudo_word(&mut rng)).collect();
                if words.iter().any(|w| reserved.contains(w)) {
                    continue;
                }
                let p = words.join(" ");
                if used.insert(p.clone()) {
                    gazetteer.insert(e, &p)?;
                    list.push(p);
                }
            }
            phrases.insert(e, list);
        }
        let mut ambiguous: BTreeMap<EntityId, Vec<(String, EntityId)>> = BTreeMap::new();
        if config.ambiguous_from_icl && entities.len() >= 2 {
            for (k, &e) in entities.iter().enumerate() {
                let decoy = entities[(k + 1) % entities.len()];
                for ex in &registry.get(e).icl_examples {
                    let p = normalize(ex);
                    let n = p.split(' ').count();
                    if p.is_empty() || n > MAX_PHRASE_TOKENS || p.split(' ').any(|w| reserved.contains(w)) || !used.insert(p.clone()) {
                        continue;
                    }
                    gazetteer.insert(e, &p)?;
                    gazetteer.insert(decoy, &p)?;
                    ambiguous.entry(e).or_default().push((p, decoy));
                }
            }
        }
        Ok(SynthWorld {
            config: config.clone(),
            entities,
            phrases,
            ambiguous,
            gazetteer,
        })
    }

    /// A world over a given dictionary instead of pseudo-words. Every phrase
    /// must belong to exactly one entity and avoid the template filler words;
    /// `num_entities`, `phrases_per_entity` and `ambiguous_from_icl` are ignored.
    pub fn from_gazetteer(gazetteer: &Gazetteer, config: &SynthConfig) -> Result<Self> {
        let reserved: BTreeSet<&str> = FILLERS.iter().copied().collect();
        let mut phrases: BTreeMap<EntityId, Vec<String>> = BTreeMap::new();
        for e in gazetteer.entities() {
            for p in gazetteer.phrases(e) {
                let owners = gazetteer.entities_for(p).map_or(0, BTreeSet::len);
                if owners != 1 {
                    return Err(Error::InvalidArgument(format!("phrase `{p}` belongs to {owners} entities")));
                }
                if let Some(w) = p.split(' ').find(|w| reserved.contains(w)) {
                    return Err(Error::InvalidArgument(format!("phrase `{p}` uses the filler word `{w}`")));
                }
                phrases.entry(e).or_default().push(p.to_owned());
            }
        }
        if phrases.is_empty() {
            return Err(Error::Empty("gazetteer"));
        }
        Ok(SynthWorld {
            config: config.clone(),
            entities: phrases.keys().copied().collect(),
            phrases,
            ambiguous: BTreeMap::new(),
            gazetteer: gazetteer.clone(),
        })
    }

    pub fn num_phrases(&self) -> usize {
        self.gazetteer.num_phrases()
    }

    /// A gazetteer with `fraction` of each entity's unambiguous phrases
    /// (at least one), chosen with `seed`.
    pub fn baseline_gazetteer(&self, fraction: f64, seed: u64) -> Result<Gazetteer> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument("fraction must be in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth-baseline"));
        let mut g = Gazetteer::new();
        for (&e, list) in &self.phrases {
            let k = ((list.len() as f64 * fraction).round() as usize).clamp(1, list.len());
            for p in list.choose_multiple(&mut rng, k) {
                g.insert(e, p)?;
            }
        }
        Ok(g)
    }

    fn typo(word: &str, rng: &mut impl Rng) -> String {
        let mut chars: Vec<char> = word.chars().collect();
        if chars.len() < 4 {
            chars.push(chars[chars.len() - 1]);
        } else if rng.gen_bool(0.5) {
            let i = rng.gen_range(1..chars.len() - 1);
            chars.swap(i, i + 1);
        } else {
            let i = rng.gen_range(1..chars.len());
            chars.remove(i);
        }
        chars.into_iter().collect()
    }

    fn surface(&self, phrase: &str, rng: &mut impl Rng) -> String {
        let mut words: Vec<String> = phrase.split(' ').map(str::to_owned).collect();
        if rng.gen_bool(self.config.typo_rate) {
            let i = rng.gen_range(0..words.len());
            words[i] = Self::typo(&words[i], rng);
        }
        if rng.gen_bool(self.config.inflection_rate) {
            let last = words.last_mut().expect("non-empty phrase");
            last.push_str(["s", "es", "er"][rng.gen_range(0..3)]);
        }
        words.join(" ")
    }

    /// `n` distinct queries with gold labels; deterministic in `seed`.
    pub fn queries(&self, n: usize, seed: u64) -> Result<Vec<SynthQuery>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth-queries"));
        let mut out = Vec::with_capacity(n);
        let mut seen = BTreeSet::new();
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::InvalidArgument(format!("could not generate {n} distinct queries")));
            }
            let mut gold = Annotation::new();
            let mut parts = Vec::new();
            if !rng.gen_bool(self.config.none_rate) {
                let k = rng.gen_range(1..=self.config.max_entities_per_query.min(self.entities.len()));
                for &e in self.entities.choose_multiple(&mut rng, k) {
                    let amb = self.ambiguous.get(&e).filter(|a| !a.is_empty());
                    let phrase = match amb {
                        Some(a) if rng.gen_bool(self.config.ambiguous_rate) => a[rng.gen_range(0..a.len())].0.clone(),
                        _ => self.phrases[&e][rng.gen_range(0..self.phrases[&e].len())].clone(),
                    };
                    parts.push(self.surface(&phrase, &mut rng));
                    gold.insert(e, Confidence::High);
                }
            }
            let body = if parts.is_empty() {
                let k = rng.gen_range(2..=4);
                (0..k).map(|_| FILLERS[rng.gen_range(0..FILLERS.len())]).collect::<Vec<_>>().join(" ")
            } else {
                parts.join(if rng.gen_bool(0.5) { " " } else { " and " })
            };
            let text = TEMPLATES[rng.gen_range(0..TEMPLATES.len())].replace("{}", &body);
            if !seen.insert(normalize(&text)) {
                continue;
            }
            // roughly Zipf-shaped frequencies
            let u: f64 = rng.gen_range(0.0..1.0);
            let freq = ((self.config.max_frequency as f64).powf(u * u).floor() as u64).clamp(1, self.config.max_frequency);
            out.push(SynthQuery {
                record: QueryRecord::new(&text, freq)?,
                gold,
            });
        }
        Ok(out)
    }
}

pub fn gold_store(queries: &[SynthQuery]) -> AnnotationStore {
    queries.iter().map(|q| (q.record.id.clone(), q.gold.clone())).collect()
}

pub fn records(queries: &[SynthQuery]) -> Vec<QueryRecord> {
    queries.iter().map(|q| q.record.clone()).collect()
}

/// Files written by [`write_dataset`], relative to its output directory.
pub const DATASET_FILES: [&str; 4] = ["queries.jsonl", "gold.jsonl", "gazetteer.jsonl", "baseline_gazetteer.jsonl"];

/// Writes `n` queries, their gold annotations, the full dictionary and a
/// `baseline_fraction` subset of it into `dir`.
pub fn write_dataset(
    world: &SynthWorld,
    registry: &EntityRegistry,
    n: usize,
    baseline_fraction: f64,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let queries = world.queries(n, seed)?;
    let open = |name: &str| -> Result<BufWriter<File>> {
        let p = dir.join(name);
        Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
    };
    let mut w = open(DATASET_FILES[0])?;
    for q in &queries {
        serde_json::to_writer(&mut w, &serde_json::json!({"text": q.record.text, "frequency": q.record.frequency}))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let gold: Vec<AnnotatedQuery> = queries
        .iter()
        .map(|q| AnnotatedQuery {
            id: q.record.id.clone(),
            text: Some(q.record.text.clone()),
            annotator: "gold".into(),
            annotation: q.gold.clone(),
        })
        .collect();
    let mut w = open(DATASET_FILES[1])?;
    write_annotations(&mut w, registry, &gold)?;
    w.flush()?;
    let mut w = open(DATASET_FILES[2])?;
    world.gazetteer.write_jsonl(&mut w, registry)?;
    w.flush()?;
    let mut w = open(DATASET_FILES[3])?;
    world.baseline_gazetteer(baseline_fraction, seed)?.write_jsonl(&mut w, registry)?;
    w.flush()?;
    Ok(())
}
