//! Persona repository, Persona × Entity confidence matrices and ensemble
//! aggregation of persona responses.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, Confidence};
use crate::error::{Error, Result};
use crate::taxonomy::{EntityId, EntityRegistry};

const SHIPPED_PERSONAS: &str = include_str!("../data/personas.jsonl");

pub const DEFAULT_AGGREGATION_THRESHOLD: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PersonaCategory {
    Expert,
    NonDomainExpert,
    NicheExpert,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub name: String,
    pub category: PersonaCategory,
    /// Prompt preamble.
    pub description: String,
}

pub fn personas_from_jsonl(reader: impl Read) -> Result<Vec<Persona>> {
    let mut out: Vec<Persona> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Persona = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if p.description.trim().is_empty() {
            return Err(Error::parse(i + 1, format!("persona `{}` has an empty description", p.id)));
        }
        if !seen.insert(p.id.clone()) {
            return Err(Error::DuplicateId(p.id));
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::Empty("persona repository"));
    }
    Ok(out)
}

pub fn load_personas(path: impl AsRef<Path>) -> Result<Vec<Persona>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    personas_from_jsonl(file)
}

/// The sample personas shipped with the crate.
pub fn shipped_personas() -> Vec<Persona> {
    personas_from_jsonl(SHIPPED_PERSONAS.as_bytes()).expect("shipped personas are valid")
}

pub fn write_personas(mut writer: impl Write, personas: &[Persona]) -> Result<()> {
    for p in personas {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Persona × Entity matrix of confidence levels for one query.
///
/// `0` means the persona did not select the entity; `1..=3` are Low, Medium, High.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfidenceMatrix {
    pub query_id: String,
    pub persona_ids: Vec<String>,
    pub registry_hash: String,
    num_entities: usize,
    values: Vec<u8>,
}

impl ConfidenceMatrix {
    pub fn new(
        query_id: impl Into<String>,
        persona_ids: Vec<String>,
        registry_hash: impl Into<String>,
        num_entities: usize,
        values: Vec<u8>,
    ) -> Result<Self> {
        if values.len() != persona_ids.len() * num_entities {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                persona_ids.len(),
                num_entities
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 3) {
            return Err(Error::InvalidArgument(format!("matrix value {v} outside 0..=3")));
        }
        Ok(ConfidenceMatrix {
            query_id: query_id.into(),
            persona_ids,
            registry_hash: registry_hash.into(),
            num_entities,
            values,
        })
    }

    pub fn num_personas(&self) -> usize {
        self.persona_ids.len()
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn get(&self, persona: usize, entity: usize) -> u8 {
        self.values[persona * self.num_entities + entity]
    }

    pub fn row(&self, persona: usize) -> &[u8] {
        &self.values[persona * self.num_entities..(persona + 1) * self.num_entities]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Decodes one row back into an annotation.
    pub fn row_annotation(&self, persona: usize) -> Annotation {
        self.row(persona)
            .iter()
            .enumerate()
            .filter_map(|(e, &v)| Confidence::from_level(v).map(|c| (EntityId::new(e), c)))
            .collect()
    }

    /// Header `query_id,registry_hash,<entity ids>` then one
    /// `persona_id,<values>` row per persona.
    pub fn write_csv(&self, mut writer: impl Write, registry: &EntityRegistry) -> Result<()> {
        registry.ensure_hash(&self.registry_hash)?;
        let mut line = format!("{},{}", self.query_id, self.registry_hash);
        for def in registry.entities() {
            line.push(',');
            line.push_str(&def.id);
        }
        writeln!(writer, "{line}")?;
        for (p, pid) in self.persona_ids.iter().enumerate() {
            let mut row = pid.clone();
            for v in self.row(p) {
                let _ = write!(row, ",{v}");
            }
            writeln!(writer, "{row}")?;
        }
        Ok(())
    }
}

/// Writes matrices separated by blank lines.
pub fn write_matrices(mut writer: impl Write, matrices: &[ConfidenceMatrix], registry: &EntityRegistry) -> Result<()> {
    for (i, m) in matrices.iter().enumerate() {
        if i > 0 {
            writer.write_all(b"\n")?;
        }
        m.write_csv(&mut writer, registry)?;
    }
    Ok(())
}

pub fn read_matrices(reader: impl Read, registry: &EntityRegistry) -> Result<Vec<ConfidenceMatrix>> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, String)> = Vec::new();
    let flush = |block: &mut Vec<(usize, String)>, out: &mut Vec<ConfidenceMatrix>| -> Result<()> {
        if block.is_empty() {
            return Ok(());
        }
        let (hline, header) = &block[0];
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 2 + registry.len() {
            return Err(Error::parse(*hline, "matrix header has the wrong number of columns"));
        }
        registry
            .ensure_hash(fields[1])
            .map_err(|e| Error::parse(*hline, e.to_string()))?;
        for (def, col) in registry.entities().iter().zip(&fields[2..]) {
            if def.id != *col {
                return Err(Error::parse(*hline, format!("column {col} where {} expected", def.id)));
            }
        }
        let mut persona_ids = Vec::new();
        let mut values = Vec::new();
        for (lineno, row) in &block[1..] {
            let mut cells = row.split(',');
            persona_ids.push(cells.next().unwrap_or_default().to_owned());
            let vals: Vec<u8> = cells
                .map(|c| c.trim().parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(*lineno, e.to_string()))?;
            if vals.len() != registry.len() {
                return Err(Error::parse(*lineno, "matrix row has the wrong number of values"));
            }
            values.extend(vals);
        }
        let m = ConfidenceMatrix::new(fields[0], persona_ids, fields[1], registry.len(), values)
            .map_err(|e| Error::parse(*hline, e.to_string()))?;
        out.push(m);
        block.clear();
        Ok(())
    };
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            flush(&mut block, &mut out)?;
        } else {
            block.push((i + 1, line));
        }
    }
    flush(&mut block, &mut out)?;
    Ok(out)
}

/// `values[p][e]` is 3/2/1 for High/Medium/Low and 0 when persona `p` did not
/// select entity `e`.
pub fn build_confidence_matrix(
    query_id: &str,
    annotations: &BTreeMap<String, Annotation>,
    personas: &[Persona],
    registry: &EntityRegistry,
) -> Result<ConfidenceMatrix> {
    let e = registry.len();
    let mut values = vec![0u8; personas.len() * e];
    for (p, persona) in personas.iter().enumerate() {
        let ann = annotations
            .get(&persona.id)
            .ok_or_else(|| Error::MissingPersona(persona.id.clone()))?;
        for (entity, c) in ann.iter() {
            values[p * e + entity.index()] = c.level();
        }
    }
    ConfidenceMatrix::new(
        query_id,
        personas.iter().map(|p| p.id.clone()).collect(),
        registry.hash(),
        e,
        values,
    )
}

/// Weighted mean of the matrix rows, thresholded.
///
/// `score(e) = Σ_p w_p · values[p][e] / Σ_p w_p`; `e` is selected iff
/// `score(e) >= threshold`, with confidence High from 2.5, Medium from 1.5,
/// otherwise Low. Uniform weights when `weights` is `None`.
pub fn aggregate_ensemble(matrix: &ConfidenceMatrix, weights: Option<&[f64]>, threshold: f64) -> Result<Annotation> {
    let p = matrix.num_personas();
    let uniform;
    let w = match weights {
        Some(w) => {
            if w.len() != p {
                return Err(Error::WeightLength {
                    expected: p,
                    got: w.len(),
                });
            }
            w
        }
        None => {
            uniform = vec![1.0; p];
            &uniform
        }
    };
    if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("persona weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("persona weights must not all be zero".into()));
    }
    let mut out = Annotation::new();
    for e in 0..matrix.num_entities() {
        let score = (0..p).map(|i| w[i] * f64::from(matrix.get(i, e))).sum::<f64>() / total;
        if score >= threshold && score > 0.0 {
            out.insert(EntityId::new(e), level_for_score(score));
        }
    }
    Ok(out)
}

fn level_for_score(score: f64) -> Confidence {
    if score >= 2.5 {
        Confidence::High
    } else if score >= 1.5 {
        Confidence::Medium
    } else {
        Confidence::Low
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::EntityDef;
    use proptest::prelude::*;

    fn two_entity_registry() -> EntityRegistry {
        EntityRegistry::from_defs(
            ["Genre", "Sport"]
                .iter()
                .map(|id| EntityDef {
                    id: (*id).into(),
                    definition: "d".into(),
                    icl_examples: vec![],
                })
                .collect(),
        )
        .unwrap()
    }

    fn persona(id: &str) -> Persona {
        Persona {
            id: id.into(),
            name: id.into(),
            category: PersonaCategory::Expert,
            description: format!("You are {id}."),
        }
    }

    fn example_matrix() -> ConfidenceMatrix {
        let reg = two_entity_registry();
        let g = EntityId::new(0);
        let s = EntityId::new(1);
        let mut anns = BTreeMap::new();
        anns.insert("p1".to_string(), Annotation::from_set([g], Confidence::High));
        anns.insert(
            "p2".to_string(),
            [(g, Confidence::Low), (s, Confidence::Medium)].into_iter().collect(),
        );
        build_confidence_matrix("q", &anns, &[persona("p1"), persona("p2")], &reg).unwrap()
    }

    #[test]
    fn shipped_personas_include_table_entries() {
        let ps = shipped_personas();
        let names: Vec<&str> = ps.iter().map(|p| p.name.as_str()).collect();
        for n in ["Merchandiser", "Movie Critic", "Movie Buff", "Book Club Member", "Horror Aficionado"] {
            assert!(names.contains(&n), "{n}");
        }
        assert!(ps[0].description.starts_with("You are a merchandiser"));
    }

    #[test]
    fn repository_errors_and_size() {
        assert!(matches!(personas_from_jsonl(&b""[..]), Err(Error::Empty(_))));
        let mut buf = Vec::new();
        let many: Vec<Persona> = (0..32).map(|i| persona(&format!("p{i:02}"))).collect();
        write_personas(&mut buf, &many).unwrap();
        assert_eq!(personas_from_jsonl(&buf[..]).unwrap().len(), 32);
        let mut dup = Vec::new();
        write_personas(&mut dup, &[persona("a"), persona("a")]).unwrap();
        assert!(matches!(personas_from_jsonl(&dup[..]), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn matrix_from_annotations() {
        let m = example_matrix();
        assert_eq!(m.values(), &[3, 0, 1, 2]);
    }

    #[test]
    fn empty_annotations_give_zero_matrix_and_missing_persona_errors() {
        let reg = two_entity_registry();
        let mut anns = BTreeMap::new();
        anns.insert("p1".to_string(), Annotation::new());
        let m = build_confidence_matrix("q", &anns, &[persona("p1")], &reg).unwrap();
        assert!(m.values().iter().all(|&v| v == 0));
        assert!(matches!(
            build_confidence_matrix("q", &anns, &[persona("p1"), persona("p2")], &reg),
            Err(Error::MissingPersona(p)) if p == "p2"
        ));
    }

    #[test]
    fn aggregation_examples() {
        let m = example_matrix();
        let g = EntityId::new(0);
        let uniform = aggregate_ensemble(&m, None, 1.5).unwrap();
        assert_eq!(uniform, Annotation::from_set([g], Confidence::Medium));
        let degenerate = aggregate_ensemble(&m, Some(&[1.0, 0.0]), 1.5).unwrap();
        assert_eq!(degenerate, Annotation::from_set([g], Confidence::High));
        assert!(matches!(
            aggregate_ensemble(&m, Some(&[1.0]), 1.5),
            Err(Error::WeightLength { expected: 2, got: 1 })
        ));
        assert!(aggregate_ensemble(&m, Some(&[0.0, 0.0]), 1.5).is_err());
    }

    #[test]
    fn single_persona_identity() {
        let m = ConfidenceMatrix::new("q", vec!["p".into()], "h", 4, vec![3, 0, 2, 1]).unwrap();
        assert_eq!(aggregate_ensemble(&m, None, 0.5).unwrap(), m.row_annotation(0));
    }

    #[test]
    fn csv_round_trip() {
        let reg = two_entity_registry();
        let a = example_matrix();
        let b = ConfidenceMatrix::new("q2", vec!["p1".into(), "p2".into()], reg.hash(), 2, vec![0, 0, 3, 3]).unwrap();
        let mut buf = Vec::new();
        write_matrices(&mut buf, &[a.clone(), b.clone()], &reg).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("q,{},Genre,Sport\np1,3,0\np2,1,2\n", reg.hash())));
        assert_eq!(read_matrices(&buf[..], &reg).unwrap(), vec![a, b]);
    }

    fn arb_matrix() -> impl Strategy<Value = (ConfidenceMatrix, Vec<f64>)> {
        (1usize..5, 1usize..5).prop_flat_map(|(p, e)| {
            (
                proptest::collection::vec(0u8..=3, p * e),
                proptest::collection::vec(0.01f64..10.0, p),
            )
                .prop_map(move |(vals, w)| {
                    let ids = (0..p).map(|i| format!("p{i}")).collect();
                    (ConfidenceMatrix::new("q", ids, "h", e, vals).unwrap(), w)
                })
        })
    }

    proptest! {
        #[test]
        fn weight_rescaling_invariance((m, w) in arb_matrix(), scale in prop_oneof![Just(2.0f64), Just(0.5), Just(4.0), Just(0.25)]) {
            // power-of-two scales keep the arithmetic exact
            let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
            prop_assert_eq!(
                aggregate_ensemble(&m, Some(&w), 1.5).unwrap(),
                aggregate_ensemble(&m, Some(&scaled), 1.5).unwrap()
            );
        }

        #[test]
        fn row_permutation_invariance((m, _w) in arb_matrix(), rot in 0usize..5) {
            // integer weights keep sums exact under reordering
            let p = m.num_personas();
            let w: Vec<f64> = (0..p).map(|i| (i % 3 + 1) as f64).collect();
            let order: Vec<usize> = (0..p).map(|i| (i + rot) % p).collect();
            let mut vals = Vec::new();
            for &i in &order {
                vals.extend_from_slice(m.row(i));
            }
            let ids = order.iter().map(|&i| m.persona_ids[i].clone()).collect();
            let permuted = ConfidenceMatrix::new("q", ids, "h", m.num_entities(), vals).unwrap();
            let pw: Vec<f64> = order.iter().map(|&i| w[i]).collect();
            prop_assert_eq!(
                aggregate_ensemble(&m, Some(&w), 1.0).unwrap(),
                aggregate_ensemble(&permuted, Some(&pw), 1.0).unwrap()
            );
        }
    }
}
