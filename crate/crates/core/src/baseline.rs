//! Gazetteer-based lexical matching, the reference annotator for all
//! relative gains.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, Confidence};
use crate::error::{Error, Result};
use crate::taxonomy::{EntityId, EntityRegistry};
use crate::text::{normalize, tokens};

pub const MAX_PHRASE_TOKENS: usize = 5;

/// Normalized phrases (1 to 5 tokens) per entity.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Gazetteer {
    phrases: BTreeMap<EntityId, BTreeSet<String>>,
    index: HashMap<String, BTreeSet<EntityId>>,
}

/// One phrase occurrence found in a query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseMatch {
    /// Token offset of the first matched token.
    pub start: usize,
    pub len: usize,
    pub phrase: String,
    pub entities: BTreeSet<EntityId>,
}

#[derive(Serialize, Deserialize)]
struct GazetteerLine {
    entity: String,
    phrases: Vec<String>,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entity: EntityId, phrase: &str) -> Result<()> {
        let norm = normalize(phrase);
        let n = norm.split(' ').filter(|t| !t.is_empty()).count();
        if n == 0 || n > MAX_PHRASE_TOKENS {
            return Err(Error::InvalidArgument(format!(
                "gazetteer phrase {phrase:?} must have 1 to {MAX_PHRASE_TOKENS} tokens"
            )));
        }
        self.index.entry(norm.clone()).or_default().insert(entity);
        self.phrases.entry(entity).or_default().insert(norm);
        Ok(())
    }

    pub fn from_jsonl(reader: impl Read, registry: &EntityRegistry) -> Result<Self> {
        let mut g = Gazetteer::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GazetteerLine =
                serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            let entity = registry
                .entity(&rec.entity)
                .map_err(|e| Error::parse(i + 1, e.to_string()))?;
            for p in &rec.phrases {
                g.insert(entity, p).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            }
        }
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>, registry: &EntityRegistry) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(file, registry)
    }

    pub fn write_jsonl(&self, mut writer: impl Write, registry: &EntityRegistry) -> Result<()> {
        for (e, phrases) in &self.phrases {
            serde_json::to_writer(
                &mut writer,
                &GazetteerLine {
                    entity: registry.name(*e).to_owned(),
                    phrases: phrases.iter().cloned().collect(),
                },
            )?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn phrases(&self, entity: EntityId) -> impl Iterator<Item = &str> {
        self.phrases.get(&entity).into_iter().flatten().map(String::as_str)
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.phrases.keys().copied()
    }

    /// Entities that list this exact (normalized) phrase.
    pub fn entities_for(&self, phrase: &str) -> Option<&BTreeSet<EntityId>> {
        self.index.get(&normalize(phrase))
    }

    pub fn num_phrases(&self) -> usize {
        self.phrases.values().map(BTreeSet::len).sum()
    }

    /// Every contiguous token span of the normalized query that is a
    /// gazetteer phrase, ordered by start then length.
    pub fn find_matches(&self, query: &str) -> Vec<PhraseMatch> {
        let toks = tokens(query);
        let mut out = Vec::new();
        for start in 0..toks.len() {
            for len in 1..=MAX_PHRASE_TOKENS.min(toks.len() - start) {
                let span = toks[start..start + len].join(" ");
                if let Some(entities) = self.index.get(&span) {
                    out.push(PhraseMatch {
                        start,
                        len,
                        phrase: span,
                        entities: entities.clone(),
                    });
                }
            }
        }
        out
    }
}

/// Selects every entity with a phrase occurring as a contiguous token span
/// of the normalized query. All selected entities get `High`.
pub fn lexical_match(gazetteer: &Gazetteer, query: &str) -> Annotation {
    let mut a = Annotation::new();
    for m in gazetteer.find_matches(query) {
        for e in m.entities {
            a.insert(e, Confidence::High);
        }
    }
    a
}
