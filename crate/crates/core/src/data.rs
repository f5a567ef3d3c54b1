//! Query logs: ingestion, deterministic splits and entity rebalancing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationStore;
use crate::error::{Error, Result};
use crate::text::{normalize, sha256_hex};

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];
pub const DEFAULT_CAP_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    pub frequency: u64,
}

impl QueryRecord {
    /// Normalizes `text` and derives the id from it.
    pub fn new(text: &str, frequency: u64) -> Result<Self> {
        let text = normalize(text);
        if text.is_empty() {
            return Err(Error::InvalidArgument("query text is empty".into()));
        }
        if frequency == 0 {
            return Err(Error::InvalidArgument(format!(
                "query {text:?} has frequency 0"
            )));
        }
        Ok(QueryRecord {
            id: query_id(&text),
            text,
            frequency,
        })
    }
}

/// Stable id of a query: the first 16 hex digits of SHA-256 over its normalized text.
pub fn query_id(text: &str) -> String {
    let mut h = sha256_hex(normalize(text).as_bytes());
    h.truncate(16);
    h
}

#[derive(Deserialize)]
struct JsonQueryLine {
    text: String,
    frequency: u64,
}

/// Reads `query\tfrequency` lines or JSON Lines `{"text", "frequency"}`.
///
/// Records with equal normalized text are merged and their frequencies summed;
/// output order is first appearance.
pub fn ingest_queries(source: impl Read) -> Result<Vec<QueryRecord>> {
    let mut records: Vec<QueryRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (text, frequency) = if trimmed.starts_with('{') {
            let rec: JsonQueryLine = serde_json::from_str(trimmed)
                .map_err(|e| Error::parse(lineno, format!("malformed JSON query line: {e}")))?;
            (rec.text, rec.frequency)
        } else {
            let (text, freq) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected `query<TAB>frequency`"))?;
            let freq = freq
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::parse(lineno, format!("bad frequency {freq:?}: {e}")))?;
            (text.to_owned(), freq)
        };
        let rec = QueryRecord::new(&text, frequency).map_err(|e| Error::parse(lineno, e.to_string()))?;
        match by_id.get(&rec.id) {
            Some(&idx) => records[idx].frequency += rec.frequency,
            None => {
                by_id.insert(rec.id.clone(), records.len());
                records.push(rec);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Empty("query input"));
    }
    Ok(records)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_queries(file)
}

/// Renders records as `text\tfrequency` lines.
pub fn write_tsv(mut writer: impl Write, records: &[QueryRecord]) -> Result<()> {
    for r in records {
        writeln!(writer, "{}\t{}", r.text, r.frequency)?;
    }
    Ok(())
}

/// Writes JSON Lines `{"id", "text", "frequency"}`.
pub fn write_jsonl(mut writer: impl Write, records: &[QueryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<QueryRecord>,
    pub dev: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Shuffles records by a seeded permutation (over records sorted by id) and
/// slices them into train / dev / test.
pub fn split_dataset(records: &[QueryRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::RatioSum(ratios));
    }
    if records.len() < 3 {
        return Err(Error::TooSmall(records.len()));
    }
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateId(r.id.clone()));
        }
    }

    let mut shuffled: Vec<QueryRecord> = records.to_vec();
    shuffled.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_dev = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let test = shuffled.split_off(n_train + n_dev);
    let dev = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        dev,
        test,
        seed,
        ratios,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    seed: u64,
    ratios: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    part: Part,
}

impl DatasetSplit {
    pub fn parts(&self) -> [(Part, &[QueryRecord]); 3] {
        [
            (Part::Train, &self.train),
            (Part::Dev, &self.dev),
            (Part::Test, &self.test),
        ]
    }

    /// Header line `{"seed", "ratios"}` followed by one `{"id", "part"}` per record.
    pub fn write_manifest(&self, mut writer: impl Write) -> Result<()> {
        serde_json::to_writer(
            &mut writer,
            &ManifestHeader {
                seed: self.seed,
                ratios: self.ratios,
            },
        )?;
        writer.write_all(b"\n")?;
        for (part, records) in self.parts() {
            for r in records {
                serde_json::to_writer(
                    &mut writer,
                    &ManifestLine {
                        id: r.id.clone(),
                        part,
                    },
                )?;
                writer.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Rebuilds a split from a manifest and the records it refers to.
    pub fn read_manifest(reader: impl Read, records: &[QueryRecord]) -> Result<Self> {
        let by_id: HashMap<&str, &QueryRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut lines = BufReader::new(reader).lines();
        let header = lines.next().ok_or(Error::Empty("split manifest"))??;
        let header: ManifestHeader =
            serde_json::from_str(&header).map_err(|e| Error::parse(1, e.to_string()))?;
        let mut split = DatasetSplit {
            train: vec![],
            dev: vec![],
            test: vec![],
            seed: header.seed,
            ratios: header.ratios,
        };
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestLine =
                serde_json::from_str(&line).map_err(|e| Error::parse(i + 2, e.to_string()))?;
            let q = by_id
                .get(rec.id.as_str())
                .ok_or_else(|| Error::parse(i + 2, format!("unknown query id {}", rec.id)))?;
            let target = match rec.part {
                Part::Train => &mut split.train,
                Part::Dev => &mut split.dev,
                Part::Test => &mut split.test,
            };
            target.push((*q).clone());
        }
        Ok(split)
    }
}

/// Downsamples records so that no entity accounts for more than `cap_fraction`
/// of all entity occurrences.
///
/// Entities under the cap at the start are "rare"; a record carrying a rare
/// entity is never dropped, and neither are records with no entity at all.
/// Among droppable records of an over-represented entity, the lowest-frequency
/// ones go first, ties broken by id. Every entity keeps at least one record,
/// so a cap that cannot be met is approached as closely as that allows.
/// Output preserves input order.
pub fn rebalance_by_entity(
    records: &[QueryRecord],
    annotations: &AnnotationStore,
    cap_fraction: f64,
) -> Result<Vec<QueryRecord>> {
    if !(cap_fraction > 0.0 && cap_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cap_fraction must be in (0, 1], got {cap_fraction}"
        )));
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !annotations.contains_key(&r.id))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotation(missing));
    }

    let entity_sets: Vec<Vec<usize>> = records
        .iter()
        .map(|r| annotations[&r.id].iter().map(|(e, _)| e.index()).collect())
        .collect();
    let mut kept = vec![true; records.len()];
    let counts = |kept: &[bool]| {
        let mut c: BTreeMap<usize, usize> = BTreeMap::new();
        for (set, &k) in entity_sets.iter().zip(kept) {
            if k {
                for &e in set {
                    *c.entry(e).or_default() += 1;
                }
            }
        }
        c
    };

    let initial = counts(&kept);
    let total0: usize = initial.values().sum();
    let rare: HashSet<usize> = initial
        .iter()
        .filter(|(_, &c)| c as f64 <= cap_fraction * total0 as f64)
        .map(|(&e, _)| e)
        .collect();

    loop {
        let c = counts(&kept);
        let total: usize = c.values().sum();
        let mut over: Vec<(usize, usize)> = c
            .iter()
            .filter(|(_, &n)| n as f64 > cap_fraction * total as f64)
            .map(|(&e, &n)| (e, n))
            .collect();
        over.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut progressed = false;
        for (entity, _) in over {
            let mut live = counts(&kept);
            let total: usize = live.values().sum();
            let count = live.get(&entity).copied().unwrap_or(0);
            if count as f64 <= cap_fraction * total as f64 {
                continue;
            }
            let others = (total - count) as f64;
            let bound = ((cap_fraction * others / (1.0 - cap_fraction)).floor() as usize).max(1);
            let mut droppable: Vec<usize> = (0..records.len())
                .filter(|&i| {
                    kept[i]
                        && entity_sets[i].contains(&entity)
                        && !entity_sets[i].iter().any(|e| rare.contains(e))
                })
                .collect();
            droppable.sort_by(|&a, &b| {
                records[a]
                    .frequency
                    .cmp(&records[b].frequency)
                    .then_with(|| records[a].id.cmp(&records[b].id))
            });
            for i in droppable {
                if live[&entity] <= bound {
                    break;
                }
                // never remove the last record of any entity
                if entity_sets[i].iter().any(|e| live[e] <= 1) {
                    continue;
                }
                kept[i] = false;
                for e in &entity_sets[i] {
                    *live.get_mut(e).expect("counted") -= 1;
                }
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    Ok(records
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect())
}
