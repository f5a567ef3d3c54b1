//! Deterministic mock annotator driven by a gazetteer.
//!
//! Phrases listed under several entities are ambiguous: the mock reports all
//! candidates at `Medium`, unless the prompt carries in-context examples that
//! name the phrase under some of the candidates, in which case only those are
//! reported at `High`. Persona bias rules add (`Low`) or remove entities, and
//! with probability `noise_rate` one label's confidence is shifted by one level.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::Confidence;
use crate::baseline::Gazetteer;
use crate::error::{Error, Result};
use crate::prompting::{render_response, PromptText};
use crate::taxonomy::{EntityId, EntityRegistry};
use crate::text::{derive_seed, normalize, sha256_hex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasAction {
    AlwaysAdd,
    AlwaysRemove,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasRule {
    pub entity: String,
    pub action: BiasAction,
}

#[derive(Clone, Debug)]
pub struct MockAnnotator {
    seed: u64,
    gazetteer: Gazetteer,
    noise_rate: f64,
    persona_bias: BTreeMap<String, Vec<(EntityId, BiasAction)>>,
    registry: EntityRegistry,
    model_name: String,
}

impl MockAnnotator {
    pub fn new(
        registry: &EntityRegistry,
        gazetteer: Gazetteer,
        seed: u64,
        noise_rate: f64,
        persona_bias: &BTreeMap<String, Vec<BiasRule>>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&noise_rate) {
            return Err(Error::Config(format!("noise_rate must be in [0, 1), got {noise_rate}")));
        }
        let mut bias = BTreeMap::new();
        for (persona, rules) in persona_bias {
            let resolved = rules
                .iter()
                .map(|r| Ok((registry.entity(&r.entity)?, r.action)))
                .collect::<Result<Vec<_>>>()?;
            bias.insert(persona.clone(), resolved);
        }
        let mut fingerprint = Vec::new();
        gazetteer.write_jsonl(&mut fingerprint, registry)?;
        fingerprint.extend_from_slice(
            format!("|{seed}|{noise_rate:?}|{}|", registry.hash()).as_bytes(),
        );
        fingerprint.extend_from_slice(serde_json::to_string(persona_bias)?.as_bytes());
        let model_name = format!("mock-{}", &sha256_hex(&fingerprint)[..16]);
        Ok(MockAnnotator {
            seed,
            gazetteer,
            noise_rate,
            persona_bias: bias,
            registry: registry.clone(),
            model_name,
        })
    }

    /// Name used in cache keys; changes whenever any mock setting changes.
    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn registry(&self) -> &EntityRegistry {
        &self.registry
    }

    /// Responds to a bare query, as if the prompt carried no in-context examples.
    pub fn mock_annotate(&self, query: &str, persona: Option<&str>) -> String {
        self.respond(query, persona, None)
    }

    pub fn respond_to_prompt(&self, prompt: &PromptText) -> String {
        let icl = prompt.variant.has_icl().then_some(prompt.icl_examples.as_slice());
        self.respond(&prompt.query, prompt.persona_id.as_deref(), icl)
    }

    fn respond(&self, query: &str, persona: Option<&str>, icl: Option<&[(EntityId, Vec<String>)]>) -> String {
        let mut labels: Vec<(EntityId, Confidence)> = Vec::new();
        let push = |labels: &mut Vec<(EntityId, Confidence)>, e: EntityId, c: Confidence| {
            match labels.iter_mut().find(|(x, _)| *x == e) {
                Some(slot) => slot.1 = slot.1.max(c),
                None => labels.push((e, c)),
            }
        };
        for m in self.gazetteer.find_matches(query) {
            if m.entities.len() == 1 {
                push(&mut labels, *m.entities.iter().next().expect("one"), Confidence::High);
                continue;
            }
            let resolved: Vec<EntityId> = icl
                .map(|examples| {
                    m.entities
                        .iter()
                        .copied()
                        .filter(|e| {
                            examples
                                .iter()
                                .any(|(x, ex)| x == e && ex.iter().any(|s| normalize(s) == m.phrase))
                        })
                        .collect()
                })
                .unwrap_or_default();
            if resolved.is_empty() {
                for &e in &m.entities {
                    push(&mut labels, e, Confidence::Medium);
                }
            } else {
                for e in resolved {
                    push(&mut labels, e, Confidence::High);
                }
            }
        }

        if let Some(rules) = persona.and_then(|p| self.persona_bias.get(p)) {
            for &(e, action) in rules {
                match action {
                    BiasAction::AlwaysRemove => labels.retain(|(x, _)| *x != e),
                    BiasAction::AlwaysAdd => {
                        if !labels.iter().any(|(x, _)| *x == e) {
                            labels.push((e, Confidence::Low));
                        }
                    }
                }
            }
        }

        let key = format!("{}\u{1f}{}", normalize(query), persona.unwrap_or(""));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &key));
        if !labels.is_empty() && rng.gen::<f64>() < self.noise_rate {
            let i = rng.gen_range(0..labels.len());
            labels[i].1 = match labels[i].1 {
                Confidence::High => Confidence::Medium,
                Confidence::Medium => Confidence::Low,
                Confidence::Low => Confidence::Medium,
            };
        }
        render_response(&self.registry, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::lexical_match;
    use crate::prompting::{build_prompt, parse_response, PromptConfig, PromptVariant};
    use proptest::prelude::*;

    fn gazetteer(reg: &EntityRegistry) -> Gazetteer {
        let mut g = Gazetteer::new();
        g.insert(reg.lookup("Genre").unwrap(), "comedy").unwrap();
        g.insert(reg.lookup("Genre").unwrap(), "horror").unwrap();
        g.insert(reg.lookup("IntentMovie").unwrap(), "movies").unwrap();
        g.insert(reg.lookup("IntentTvSeries").unwrap(), "shows").unwrap();
        g
    }

    fn mock(noise: f64, bias: BTreeMap<String, Vec<BiasRule>>) -> MockAnnotator {
        let reg = EntityRegistry::shipped();
        MockAnnotator::new(&reg, gazetteer(&reg), 11, noise, &bias).unwrap()
    }

    #[test]
    fn gazetteer_lookup_in_query_order() {
        let m = mock(0.0, BTreeMap::new());
        assert_eq!(m.mock_annotate("comedy movies", None), "Genre|High\nIntentMovie|High");
        assert_eq!(m.mock_annotate("nothing here", None), "None");
    }

    #[test]
    fn deterministic() {
        let m = mock(0.5, BTreeMap::new());
        for q in ["comedy movies", "horror shows", "comedy horror movies"] {
            assert_eq!(m.mock_annotate(q, Some("p")), m.mock_annotate(q, Some("p")));
        }
    }

    #[test]
    fn persona_bias_rules() {
        let mut bias = BTreeMap::new();
        bias.insert(
            "sports_fan".to_string(),
            vec![BiasRule {
                entity: "Sport".into(),
                action: BiasAction::AlwaysAdd,
            }],
        );
        bias.insert(
            "no_movies".to_string(),
            vec![BiasRule {
                entity: "IntentMovie".into(),
                action: BiasAction::AlwaysRemove,
            }],
        );
        let m = mock(0.0, bias);
        let r = m.mock_annotate("comedy movies", Some("sports_fan"));
        assert!(r.lines().any(|l| l == "Sport|Low"), "{r}");
        assert_eq!(m.mock_annotate("comedy movies", Some("no_movies")), "Genre|High");
        assert_eq!(m.mock_annotate("comedy movies", None), "Genre|High\nIntentMovie|High");
    }

    #[test]
    fn noise_perturbs_only_confidence() {
        let m = mock(0.9, BTreeMap::new());
        let reg = m.registry().clone();
        let g = gazetteer(&reg);
        let mut perturbed = 0;
        for i in 0..50 {
            let q = format!("comedy movies {i}");
            let parsed = parse_response(&reg, &m.mock_annotate(&q, None)).unwrap().annotation;
            assert_eq!(parsed.entities(), lexical_match(&g, &q).entities());
            if parsed.iter().any(|(_, c)| c != Confidence::High) {
                perturbed += 1;
            }
        }
        assert!(perturbed > 30, "{perturbed}");
    }

    #[test]
    fn icl_resolves_ambiguous_phrases() {
        let reg = EntityRegistry::shipped();
        let franchise = reg.lookup("Franchise").unwrap();
        let character = reg.lookup("Character").unwrap();
        let mut g = Gazetteer::new();
        // "blippi" is a Character ICL example in the shipped registry
        g.insert(franchise, "blippi").unwrap();
        g.insert(character, "blippi").unwrap();
        let m = MockAnnotator::new(&reg, g, 1, 0.0, &BTreeMap::new()).unwrap();
        let plain = build_prompt(&PromptConfig::new(PromptVariant::ConfidenceCot, &reg), &reg, "blippi", None).unwrap();
        let icl = build_prompt(&PromptConfig::new(PromptVariant::ConfidenceCotIcl, &reg), &reg, "blippi", None).unwrap();
        assert_eq!(m.respond_to_prompt(&plain), "Franchise|Medium\nCharacter|Medium");
        assert_eq!(m.respond_to_prompt(&icl), "Character|High");
    }

    #[test]
    fn model_name_tracks_settings() {
        assert_eq!(mock(0.0, BTreeMap::new()).model_name(), mock(0.0, BTreeMap::new()).model_name());
        assert_ne!(mock(0.0, BTreeMap::new()).model_name(), mock(0.1, BTreeMap::new()).model_name());
        let reg = EntityRegistry::shipped();
        assert!(MockAnnotator::new(&reg, Gazetteer::new(), 0, 1.0, &BTreeMap::new()).is_err());
    }

    proptest! {
        #[test]
        fn noiseless_mock_equals_lexical_match(words in proptest::collection::vec(prop_oneof![
            Just("comedy"), Just("horror"), Just("movies"), Just("shows"), Just("best"), Just("new")
        ], 1..6)) {
            let m = mock(0.0, BTreeMap::new());
            let reg = m.registry().clone();
            let q = words.join(" ");
            let parsed = parse_response(&reg, &m.mock_annotate(&q, None)).unwrap().annotation;
            prop_assert_eq!(parsed, lexical_match(&gazetteer(&reg), &q));
        }
    }
}
