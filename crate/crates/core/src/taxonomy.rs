//! The closed entity universe.
//!
//! Entity order in a registry is the column order of every confidence matrix
//! and every classifier output vector. Artifacts embed [`EntityRegistry::hash`]
//! so that a column mismatch is caught at load time instead of silently
//! producing shifted labels.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::sha256_hex;

const SHIPPED_REGISTRY: &str = include_str!("../data/registry.jsonl");

/// Reserved label for "no entity applies". It is the empty label set, not a column.
pub const NONE_LABEL: &str = "None";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityDef {
    pub id: String,
    pub definition: String,
    #[serde(default)]
    pub icl_examples: Vec<String>,
}

/// Column index of an entity within its registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(usize);

impl EntityId {
    pub fn new(index: usize) -> Self {
        EntityId(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Result of validating a free-text label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Entity(EntityId),
    None,
}

#[derive(Clone, Debug)]
pub struct EntityRegistry {
    entities: Vec<EntityDef>,
    index: HashMap<String, usize>,
    hash: String,
}

impl EntityRegistry {
    pub fn from_defs(entities: Vec<EntityDef>) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Empty("entity registry"));
        }
        let mut index = HashMap::with_capacity(entities.len());
        for (i, def) in entities.iter().enumerate() {
            if def.id.is_empty() || def.id.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "entity id {:?} must be non-empty and contain no whitespace",
                    def.id
                )));
            }
            if def.id == NONE_LABEL {
                return Err(Error::InvalidArgument(format!(
                    "`{NONE_LABEL}` is reserved and cannot be an entity id"
                )));
            }
            if def.definition.trim().is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "entity `{}` has an empty definition",
                    def.id
                )));
            }
            if index.insert(def.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(def.id.clone()));
            }
        }
        let joined = entities
            .iter()
            .map(|e| e.id.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let hash = sha256_hex(joined.as_bytes());
        Ok(EntityRegistry {
            entities,
            index,
            hash,
        })
    }

    /// The 22-entity registry shipped with the crate.
    pub fn shipped() -> Self {
        Self::from_jsonl(SHIPPED_REGISTRY.as_bytes()).expect("shipped registry is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(file)
    }

    pub fn from_jsonl(reader: impl Read) -> Result<Self> {
        let mut defs = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let def: EntityDef =
                serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            defs.push(def);
        }
        Self::from_defs(defs)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for def in &self.entities {
            serde_json::to_writer(&mut writer, def)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[EntityDef] {
        &self.entities
    }

    pub fn ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.entities.len()).map(EntityId)
    }

    pub fn get(&self, id: EntityId) -> &EntityDef {
        &self.entities[id.0]
    }

    pub fn name(&self, id: EntityId) -> &str {
        &self.entities[id.0].id
    }

    pub fn lookup(&self, name: &str) -> Option<EntityId> {
        self.index.get(name).copied().map(EntityId)
    }

    /// Hex SHA-256 over the entity ids joined by newlines, in registry order.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Exact match after trimming; `None` maps to [`Label::None`].
    pub fn validate_label(&self, label: &str) -> Result<Label> {
        let trimmed = label.trim();
        if trimmed == NONE_LABEL {
            return Ok(Label::None);
        }
        self.lookup(trimmed)
            .map(Label::Entity)
            .ok_or_else(|| Error::UnknownLabel(label.to_owned()))
    }

    /// Like [`validate_label`](Self::validate_label) but rejects the `None` sentinel.
    pub fn entity(&self, label: &str) -> Result<EntityId> {
        match self.validate_label(label)? {
            Label::Entity(id) => Ok(id),
            Label::None => Err(Error::UnknownLabel(label.to_owned())),
        }
    }

    pub fn ensure_hash(&self, found: &str) -> Result<()> {
        if found == self.hash {
            Ok(())
        } else {
            Err(Error::RegistryMismatch {
                expected: self.hash.clone(),
                found: found.to_owned(),
            })
        }
    }
}

impl fmt::Display for EntityRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "registry {} ({} entities)", self.hash, self.len())?;
        for (i, def) in self.entities.iter().enumerate() {
            writeln!(f, "{i:>3}  {:<18} {}", def.id, def.definition)?;
        }
        Ok(())
    }
}
