//! Annotations: per-query entity sets with a confidence level per entity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{EntityId, EntityRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Confidence {
    Low,
    Medium,
    High,
}

impl Confidence {
    pub const ALL: [Confidence; 3] = [Confidence::Low, Confidence::Medium, Confidence::High];

    /// Numeric level used in confidence matrices: Low=1, Medium=2, High=3.
    pub fn level(self) -> u8 {
        match self {
            Confidence::Low => 1,
            Confidence::Medium => 2,
            Confidence::High => 3,
        }
    }

    /// Inverse of [`level`](Self::level); `0` (not selected) and anything above 3 give `None`.
    pub fn from_level(level: u8) -> Option<Self> {
        match level {
            1 => Some(Confidence::Low),
            2 => Some(Confidence::Medium),
            3 => Some(Confidence::High),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Confidence::Low => "Low",
            Confidence::Medium => "Medium",
            Confidence::High => "High",
        }
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Confidence {
    type Err = Error;

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Confidence::Low),
            "medium" => Ok(Confidence::Medium),
            "high" => Ok(Confidence::High),
            _ => Err(Error::InvalidArgument(format!("unknown confidence level {s:?}"))),
        }
    }
}

/// Entities selected for one query by one annotator. Empty means "None".
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Annotation {
    labels: BTreeMap<EntityId, Confidence>,
}

impl Annotation {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `entity`, keeping the higher confidence if it is already present.
    pub fn insert(&mut self, entity: EntityId, confidence: Confidence) {
        self.labels
            .entry(entity)
            .and_modify(|c| *c = (*c).max(confidence))
            .or_insert(confidence);
    }

    pub fn remove(&mut self, entity: EntityId) -> Option<Confidence> {
        self.labels.remove(&entity)
    }

    pub fn get(&self, entity: EntityId) -> Option<Confidence> {
        self.labels.get(&entity).copied()
    }

    pub fn contains(&self, entity: EntityId) -> bool {
        self.labels.contains_key(&entity)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityId, Confidence)> + '_ {
        self.labels.iter().map(|(&e, &c)| (e, c))
    }

    pub fn entities(&self) -> BTreeSet<EntityId> {
        self.labels.keys().copied().collect()
    }

    /// Indicator over `num_entities` columns: set iff annotated at `min` or above.
    pub fn indicator(&self, num_entities: usize, min: Confidence) -> Vec<bool> {
        let mut out = vec![false; num_entities];
        for (&e, &c) in &self.labels {
            if c >= min {
                out[e.index()] = true;
            }
        }
        out
    }

    pub fn from_set(entities: impl IntoIterator<Item = EntityId>, confidence: Confidence) -> Self {
        let mut a = Annotation::new();
        for e in entities {
            a.insert(e, confidence);
        }
        a
    }

    /// Human-readable form like `{Genre: High, Sport: Low}`.
    pub fn display<'a>(&'a self, registry: &'a EntityRegistry) -> impl fmt::Display + 'a {
        DisplayAnnotation {
            annotation: self,
            registry,
        }
    }
}

impl FromIterator<(EntityId, Confidence)> for Annotation {
    fn from_iter<I: IntoIterator<Item = (EntityId, Confidence)>>(iter: I) -> Self {
        let mut a = Annotation::new();
        for (e, c) in iter {
            a.insert(e, c);
        }
        a
    }
}

struct DisplayAnnotation<'a> {
    annotation: &'a Annotation,
    registry: &'a EntityRegistry,
}

impl fmt::Display for DisplayAnnotation<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (e, c)) in self.annotation.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}: {c}", self.registry.name(e))?;
        }
        f.write_str("}")
    }
}

/// Annotations keyed by query id.
pub type AnnotationStore = BTreeMap<String, Annotation>;

/// One line of an annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedQuery {
    pub id: String,
    pub text: Option<String>,
    /// Who produced the labels: `gold`, `baseline`, `persona:<id>`, `ensemble`, ...
    pub annotator: String,
    pub annotation: Annotation,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    entity: String,
    confidence: Confidence,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    annotator: String,
    labels: Vec<LabelRecord>,
}

/// Writes JSON Lines `{"id", "text"?, "annotator", "labels": [{"entity", "confidence"}]}`.
pub fn write_annotations<'a>(
    mut writer: impl Write,
    registry: &EntityRegistry,
    records: impl IntoIterator<Item = &'a AnnotatedQuery>,
) -> Result<()> {
    for rec in records {
        let out = AnnotationRecord {
            id: rec.id.clone(),
            text: rec.text.clone(),
            annotator: rec.annotator.clone(),
            labels: rec
                .annotation
                .iter()
                .map(|(e, c)| LabelRecord {
                    entity: registry.name(e).to_owned(),
                    confidence: c,
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &out)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_annotations(reader: impl Read, registry: &EntityRegistry) -> Result<Vec<AnnotatedQuery>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let mut annotation = Annotation::new();
        for l in rec.labels {
            let e = registry
                .entity(&l.entity)
                .map_err(|e| Error::parse(i + 1, e.to_string()))?;
            annotation.insert(e, l.confidence);
        }
        out.push(AnnotatedQuery {
            id: rec.id,
            text: rec.text,
            annotator: rec.annotator,
            annotation,
        });
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>, registry: &EntityRegistry) -> Result<Vec<AnnotatedQuery>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(file, registry)
}

/// Groups records by annotator into per-annotator stores.
pub fn group_by_annotator(records: &[AnnotatedQuery]) -> BTreeMap<String, AnnotationStore> {
    let mut out: BTreeMap<String, AnnotationStore> = BTreeMap::new();
    for r in records {
        out.entry(r.annotator.clone())
            .or_default()
            .insert(r.id.clone(), r.annotation.clone());
    }
    out
}

/// Collects all records into one store, ignoring the annotator tag.
pub fn to_store(records: &[AnnotatedQuery]) -> AnnotationStore {
    records
        .iter()
        .map(|r| (r.id.clone(), r.annotation.clone()))
        .collect()
}
