//! Prompt construction for the four cumulative prompt variants and tolerant
//! parsing of annotator responses.
//!
//! Responses use one `EntityId|Confidence` line per predicted entity, or the
//! single line `None`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, Confidence};
use crate::error::{Error, Result};
use crate::personas::Persona;
use crate::taxonomy::{EntityId, EntityRegistry, NONE_LABEL};

const SHIPPED_TEMPLATE: &str = include_str!("../templates/annotate_v1.txt");
pub const SHIPPED_TEMPLATE_VERSION: &str = "annotate_v1";
pub const DEFAULT_MAX_ICL_EXAMPLES: usize = 4;

const PLACEHOLDERS: [&str; 6] = [
    "query",
    "persona",
    "entity_definitions",
    "cot_steps",
    "icl_block",
    "confidence_instruction",
];

/// Prompt variants, each including every section of the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptVariant {
    Baseline,
    Confidence,
    ConfidenceCot,
    ConfidenceCotIcl,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 4] = [
        PromptVariant::Baseline,
        PromptVariant::Confidence,
        PromptVariant::ConfidenceCot,
        PromptVariant::ConfidenceCotIcl,
    ];

    pub fn has_confidence(self) -> bool {
        self >= PromptVariant::Confidence
    }

    pub fn has_cot(self) -> bool {
        self >= PromptVariant::ConfidenceCot
    }

    pub fn has_icl(self) -> bool {
        self == PromptVariant::ConfidenceCotIcl
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Baseline => "baseline",
            PromptVariant::Confidence => "confidence",
            PromptVariant::ConfidenceCot => "confidence-cot",
            PromptVariant::ConfidenceCotIcl => "confidence-cot-icl",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s) || format!("{v:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Section {
    Persona,
    Task,
    EntityDefinitions,
    CotSteps,
    IclBlock,
    ConfidenceInstruction,
    OutputFormat,
    Query,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub variant: PromptVariant,
    pub registry_hash: String,
    pub max_icl_examples_per_entity: usize,
}

impl PromptConfig {
    pub fn new(variant: PromptVariant, registry: &EntityRegistry) -> Self {
        PromptConfig {
            variant,
            registry_hash: registry.hash().to_owned(),
            max_icl_examples_per_entity: DEFAULT_MAX_ICL_EXAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub sections: Vec<Section>,
    pub variant: PromptVariant,
    pub query: String,
    pub persona_id: Option<String>,
    /// In-context examples included in the prompt, per entity.
    pub icl_examples: Vec<(EntityId, Vec<String>)>,
}

/// A plain-text template with `{placeholder}` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    text: String,
}

impl PromptTemplate {
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_TEMPLATE_VERSION, SHIPPED_TEMPLATE).expect("shipped template is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::parse(&version, &text)
    }

    pub fn parse(version: &str, text: &str) -> Result<Self> {
        let found = placeholders(text);
        if let Some(unknown) = found.iter().find(|p| !PLACEHOLDERS.contains(&p.as_str())) {
            return Err(Error::InvalidArgument(format!("unknown template placeholder {{{unknown}}}")));
        }
        if !found.contains("query") {
            return Err(Error::InvalidArgument("template lacks the {query} placeholder".into()));
        }
        Ok(PromptTemplate {
            version: version.to_owned(),
            text: text.to_owned(),
        })
    }

    fn render(&self, values: &[(&str, String)]) -> String {
        // single pass, so substituted text is never re-scanned
        let mut out = String::with_capacity(self.text.len() * 2);
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            let hit = after.find('}').and_then(|end| {
                values
                    .iter()
                    .find(|(name, _)| *name == &after[..end])
                    .map(|(_, v)| (end, v))
            });
            match hit {
                Some((end, value)) => {
                    out.push_str(value);
                    rest = &after[end + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        collapse_blank_lines(&out)
    }
}

fn placeholders(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) if after[..end].chars().all(|c| c.is_ascii_lowercase() || c == '_') && end > 0 => {
                out.insert(after[..end].to_owned());
                rest = &after[end + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

/// Trims trailing whitespace per line, drops leading blank lines and
/// collapses runs of blank lines into one.
fn collapse_blank_lines(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut blank_run = true;
    for line in text.lines() {
        let line = line.trim_end();
        if line.is_empty() {
            if !blank_run {
                out.push('\n');
            }
            blank_run = true;
        } else {
            out.push_str(line);
            out.push('\n');
            blank_run = false;
        }
    }
    while out.ends_with("\n\n") {
        out.pop();
    }
    out
}

/// Builds prompts from a template.
#[derive(Clone, Debug)]
pub struct PromptBuilder {
    template: PromptTemplate,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        PromptBuilder {
            template: PromptTemplate::shipped(),
        }
    }
}

impl PromptBuilder {
    pub fn new(template: PromptTemplate) -> Self {
        PromptBuilder { template }
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn build(
        &self,
        config: &PromptConfig,
        registry: &EntityRegistry,
        query: &str,
        persona: Option<&Persona>,
    ) -> Result<PromptText> {
        registry.ensure_hash(&config.registry_hash)?;
        let query = query.trim();
        if query.is_empty() {
            return Err(Error::InvalidArgument("cannot build a prompt for an empty query".into()));
        }
        let variant = config.variant;
        let mut sections = Vec::new();

        let persona_text = match persona {
            Some(p) => {
                sections.push(Section::Persona);
                p.description.trim().to_owned()
            }
            None => String::new(),
        };
        sections.push(Section::Task);
        sections.push(Section::EntityDefinitions);

        let definitions = registry
            .entities()
            .iter()
            .map(|d| format!("- {}: {}", d.id, d.definition))
            .collect::<Vec<_>>()
            .join("\n");

        let cot = if variant.has_cot() {
            sections.push(Section::CotSteps);
            cot_block(registry)
        } else {
            String::new()
        };

        let mut icl_examples = Vec::new();
        let icl = if variant.has_icl() {
            sections.push(Section::IclBlock);
            let mut lines = vec!["In-context examples:".to_owned()];
            for id in registry.ids() {
                let def = registry.get(id);
                if def.icl_examples.is_empty() {
                    continue;
                }
                let examples: Vec<String> = def
                    .icl_examples
                    .iter()
                    .take(config.max_icl_examples_per_entity)
                    .cloned()
                    .collect();
                if examples.is_empty() {
                    continue;
                }
                lines.push(format!("{} entity examples: {}, etc.", def.id, examples.join(", ")));
                icl_examples.push((id, examples));
            }
            lines.join("\n")
        } else {
            String::new()
        };

        let confidence = if variant.has_confidence() {
            sections.push(Section::ConfidenceInstruction);
            "Confidence: for each entity you predict, report how certain you are as High, Medium or Low. \
             Use High when the query clearly matches the definition, Medium when it probably does, \
             and Low when it might."
                .to_owned()
        } else {
            String::new()
        };
        sections.push(Section::OutputFormat);
        sections.push(Section::Query);

        let text = self.template.render(&[
            ("persona", persona_text),
            ("entity_definitions", definitions),
            ("cot_steps", cot),
            ("icl_block", icl),
            ("confidence_instruction", confidence),
            ("query", query.to_owned()),
        ]);
        Ok(PromptText {
            text,
            sections,
            variant,
            query: query.to_owned(),
            persona_id: persona.map(|p| p.id.clone()),
            icl_examples,
        })
    }
}

fn cot_block(registry: &EntityRegistry) -> String {
    let mut lines = vec![
        "Reasoning steps: compare the query against each entity category iteratively. \
         Use the provided examples as reference in making the decisions. Report the finding of every step."
            .to_owned(),
    ];
    for (i, def) in registry.entities().iter().enumerate() {
        lines.push(format!(
            "Step{}: Check if the query is a {} entity. {}",
            i + 1,
            def.id,
            def.definition
        ));
    }
    lines.push(format!(
        "Step{}: Assign the label {NONE_LABEL} to the query if it does not fit into any of the \
         specified entity categories mentioned above.",
        registry.len() + 1
    ));
    lines.join("\n")
}

/// Builds a prompt with the shipped template.
pub fn build_prompt(
    config: &PromptConfig,
    registry: &EntityRegistry,
    query: &str,
    persona: Option<&Persona>,
) -> Result<PromptText> {
    PromptBuilder::default().build(config, registry, query, persona)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseWarning {
    UnknownLabel { line: usize, label: String },
    Malformed { line: usize, text: String },
    NoneWithEntities,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedResponse {
    pub annotation: Annotation,
    pub warnings: Vec<ParseWarning>,
}

/// Scans `raw` for `EntityId|Confidence` lines.
///
/// Entity names match exactly after trimming, falling back to a
/// case-insensitive match; confidence tokens are case-insensitive. Unknown
/// labels and malformed lines become warnings. Duplicate entities keep the
/// highest confidence. Fails only when there is neither a valid line nor a
/// `None` line.
pub fn parse_response(registry: &EntityRegistry, raw: &str) -> Result<ParsedResponse> {
    let mut annotation = Annotation::new();
    let mut warnings = Vec::new();
    let mut saw_none = false;
    let mut valid = 0usize;
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        let line = line
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim()
            .trim_matches('`')
            .trim();
        if line.is_empty() {
            continue;
        }
        if line.eq_ignore_ascii_case(NONE_LABEL) {
            saw_none = true;
            continue;
        }
        let Some((label, conf)) = line.split_once('|') else {
            warnings.push(ParseWarning::Malformed {
                line: lineno,
                text: line.to_owned(),
            });
            continue;
        };
        let label = label.trim();
        let Some(entity) = resolve_entity(registry, label) else {
            warnings.push(ParseWarning::UnknownLabel {
                line: lineno,
                label: label.to_owned(),
            });
            continue;
        };
        match conf.parse::<Confidence>() {
            Ok(c) => {
                annotation.insert(entity, c);
                valid += 1;
            }
            Err(_) => warnings.push(ParseWarning::Malformed {
                line: lineno,
                text: line.to_owned(),
            }),
        }
    }
    if valid == 0 && !saw_none {
        return Err(Error::UnparseableResponse(raw.chars().take(200).collect()));
    }
    if saw_none && valid > 0 {
        warnings.push(ParseWarning::NoneWithEntities);
    }
    Ok(ParsedResponse { annotation, warnings })
}

fn resolve_entity(registry: &EntityRegistry, label: &str) -> Option<EntityId> {
    registry.lookup(label).or_else(|| {
        registry
            .ids()
            .find(|&id| registry.name(id).eq_ignore_ascii_case(label))
    })
}

/// Renders labels in the given order in the response format.
pub fn render_response(registry: &EntityRegistry, labels: &[(EntityId, Confidence)]) -> String {
    if labels.is_empty() {
        return NONE_LABEL.to_owned();
    }
    labels
        .iter()
        .map(|(e, c)| format!("{}|{c}", registry.name(*e)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders an annotation in registry order.
pub fn render_annotation(registry: &EntityRegistry, annotation: &Annotation) -> String {
    render_response(registry, &annotation.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::personas::shipped_personas;
    use proptest::prelude::*;

    fn cfg(variant: PromptVariant, reg: &EntityRegistry) -> PromptConfig {
        PromptConfig::new(variant, reg)
    }

    #[test]
    fn baseline_prompt_has_no_optional_sections() {
        let reg = EntityRegistry::shipped();
        let p = build_prompt(&cfg(PromptVariant::Baseline, &reg), &reg, "comedy movies", None).unwrap();
        assert!(p.text.contains("Query: comedy movies"));
        assert!(p.text.contains("- Genre: Represents the genre"));
        assert!(!p.text.contains("Step1"));
        assert!(!p.text.contains("entity examples"));
        assert!(!p.text.contains("Confidence: for each"));
        assert_eq!(
            p.sections,
            vec![Section::Task, Section::EntityDefinitions, Section::OutputFormat, Section::Query]
        );
    }

    #[test]
    fn icl_block_lists_audio_language_examples() {
        let reg = EntityRegistry::shipped();
        let p = build_prompt(&cfg(PromptVariant::ConfidenceCotIcl, &reg), &reg, "french movies", None).unwrap();
        assert!(p
            .text
            .contains("AudioLanguage entity examples: Arabic, Bangla, Chinese, English, etc."));
        assert!(p.text.contains("Holiday entity examples: Christmas, Thanksgiving, Easter, etc."));
        let with_examples = reg.entities().iter().filter(|d| !d.icl_examples.is_empty()).count();
        assert_eq!(p.icl_examples.len(), with_examples);
        assert_eq!(p.sections.iter().filter(|s| **s == Section::IclBlock).count(), 1);
    }

    #[test]
    fn persona_preamble_comes_first() {
        let reg = EntityRegistry::shipped();
        let personas = shipped_personas();
        let merch = personas.iter().find(|p| p.name == "Merchandiser").unwrap();
        let p = build_prompt(&cfg(PromptVariant::ConfidenceCot, &reg), &reg, "horror", Some(merch)).unwrap();
        assert!(p.text.starts_with("You are a merchandiser for a popular online streaming service"));
        assert_eq!(p.sections[0], Section::Persona);
        assert_eq!(p.persona_id.as_deref(), Some("merchandiser"));
    }

    #[test]
    fn cot_block_has_one_step_per_entity_plus_none() {
        let reg = EntityRegistry::shipped();
        let p = build_prompt(&cfg(PromptVariant::ConfidenceCot, &reg), &reg, "q", None).unwrap();
        let steps = p.text.lines().filter(|l| l.starts_with("Step")).count();
        assert_eq!(steps, reg.len() + 1);
        assert!(p.text.contains("Step2: Check if the query is a IntentTvSeries entity."));
        assert!(p.text.contains(&format!("Step{}: Assign the label None", reg.len() + 1)));
    }

    #[test]
    fn sections_are_cumulative() {
        let reg = EntityRegistry::shipped();
        let sets: Vec<BTreeSet<Section>> = PromptVariant::ALL
            .iter()
            .map(|&v| {
                build_prompt(&cfg(v, &reg), &reg, "q", None)
                    .unwrap()
                    .sections
                    .into_iter()
                    .collect()
            })
            .collect();
        for w in sets.windows(2) {
            assert!(w[0].is_subset(&w[1]) && w[0] != w[1]);
        }
    }

    #[test]
    fn build_is_pure_and_checks_registry() {
        let reg = EntityRegistry::shipped();
        let c = cfg(PromptVariant::ConfidenceCotIcl, &reg);
        let a = build_prompt(&c, &reg, "tom hanks movies", None).unwrap();
        let b = build_prompt(&c, &reg, "tom hanks movies", None).unwrap();
        assert_eq!(a.text.as_bytes(), b.text.as_bytes());
        let mut other = c.clone();
        other.registry_hash = "deadbeef".into();
        assert!(build_prompt(&other, &reg, "q", None).is_err());
        assert!(build_prompt(&c, &reg, "  ", None).is_err());
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::parse("t", "no query here").is_err());
        assert!(PromptTemplate::parse("t", "{query} {bogus}").is_err());
        let t = PromptTemplate::parse("t", "Q={query}\n{persona}\n").unwrap();
        let reg = EntityRegistry::shipped();
        let p = PromptBuilder::new(t)
            .build(&cfg(PromptVariant::Baseline, &reg), &reg, "x", None)
            .unwrap();
        assert_eq!(p.text, "Q=x\n");
    }

    #[test]
    fn parse_happy_path() {
        let reg = EntityRegistry::shipped();
        let r = parse_response(&reg, "Genre|High\nIntentMovie|Medium").unwrap();
        let genre = reg.lookup("Genre").unwrap();
        let movie = reg.lookup("IntentMovie").unwrap();
        assert_eq!(
            r.annotation,
            [(genre, Confidence::High), (movie, Confidence::Medium)].into_iter().collect()
        );
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn parse_none_and_tolerance() {
        let reg = EntityRegistry::shipped();
        let r = parse_response(&reg, "None").unwrap();
        assert!(r.annotation.is_empty());
        assert!(r.warnings.is_empty());

        let r = parse_response(&reg, "Genre|high\nFooBar|High").unwrap();
        assert_eq!(r.annotation.len(), 1);
        assert_eq!(r.annotation.get(reg.lookup("Genre").unwrap()), Some(Confidence::High));
        assert_eq!(
            r.warnings,
            vec![ParseWarning::UnknownLabel {
                line: 2,
                label: "FooBar".into()
            }]
        );

        let r = parse_response(&reg, "Genre|Low\ngenre|High\n- Sport|medium\nrubbish").unwrap();
        assert_eq!(r.annotation.get(reg.lookup("Genre").unwrap()), Some(Confidence::High));
        assert_eq!(r.annotation.get(reg.lookup("Sport").unwrap()), Some(Confidence::Medium));
        assert_eq!(r.warnings.len(), 1);

        assert!(matches!(
            parse_response(&reg, "I think it is a movie"),
            Err(Error::UnparseableResponse(_))
        ));
        assert!(parse_response(&reg, "").is_err());
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(levels in proptest::collection::vec(0u8..=3, 22)) {
            let reg = EntityRegistry::shipped();
            let ann: Annotation = levels
                .iter()
                .enumerate()
                .filter_map(|(i, &l)| Confidence::from_level(l).map(|c| (EntityId::new(i), c)))
                .collect();
            let parsed = parse_response(&reg, &render_annotation(&reg, &ann)).unwrap();
            prop_assert_eq!(parsed.annotation, ann);
            prop_assert!(parsed.warnings.is_empty());
        }
    }
}
