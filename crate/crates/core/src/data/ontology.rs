use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::DataError;

/// Roles of one event type and its prompt template. The template holds one
/// `{role}` placeholder per role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSchema {
    pub roles: Vec<String>,
    pub template: String,
}

/// Event types keyed by name.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ontology {
    pub types: BTreeMap<String, EventSchema>,
}

enum Piece<'a> {
    Word(&'a str),
    Slot(&'a str),
}

fn pieces(template: &str) -> impl Iterator<Item = Piece<'_>> {
    template.split_whitespace().map(|w| match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
        Some(role) => Piece::Slot(role),
        None => Piece::Word(w),
    })
}

impl EventSchema {
    /// Template tokens with each slot replaced by `fill(role)`.
    pub fn render<F: FnMut(&str) -> Vec<String>>(&self, mut fill: F) -> Vec<String> {
        let mut out = Vec::new();
        for p in pieces(&self.template) {
            match p {
                Piece::Word(w) => out.push(w.to_string()),
                Piece::Slot(role) => out.extend(fill(role)),
            }
        }
        out
    }

    /// Roles in the order their slots appear in the template.
    pub fn slot_order(&self) -> Vec<&str> {
        pieces(&self.template)
            .filter_map(|p| match p {
                Piece::Slot(r) => Some(r),
                Piece::Word(_) => None,
            })
            .collect()
    }
}

impl Ontology {
    pub fn schema(&self, event_type: &str) -> Option<&EventSchema> {
        self.types.get(event_type)
    }

    pub fn type_names(&self) -> Vec<&str> {
        self.types.keys().map(String::as_str).collect()
    }

    /// Every role must appear exactly once as a slot, and every slot must
    /// name a role.
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, schema) in &self.types {
            if schema.roles.is_empty() {
                return Err(DataError::Ontology(format!("{name} has no roles")));
            }
            let slots = schema.slot_order();
            for role in &schema.roles {
                let n = slots.iter().filter(|s| **s == role.as_str()).count();
                if n != 1 {
                    return Err(DataError::Ontology(format!(
                        "{name}: role {role} appears {n} times in its template"
                    )));
                }
            }
            if let Some(extra) = slots.iter().find(|s| !schema.roles.iter().any(|r| r == *s)) {
                return Err(DataError::Ontology(format!("{name}: slot {extra} is not a role")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Ontology, DataError> {
        let text = std::fs::read_to_string(path)?;
        let ont: Ontology = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.display().to_string(),
            line: 0,
            source,
        })?;
        ont.validate()?;
        Ok(ont)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(roles: &[&str], template: &str) -> EventSchema {
        EventSchema {
            roles: roles.iter().map(|s| s.to_string()).collect(),
            template: template.into(),
        }
    }

    #[test]
    fn validate_requires_each_role_once() {
        let mut ont = Ontology::default();
        ont.types.insert("a".into(), schema(&["x", "y"], "{x} hit {y}"));
        assert!(ont.validate().is_ok());
        ont.types.insert("b".into(), schema(&["x", "y"], "{x} hit {x}"));
        assert!(ont.validate().is_err());
        ont.types.insert("b".into(), schema(&["x"], "{x} hit {z}"));
        assert!(ont.validate().is_err());
    }

    #[test]
    fn render_and_slot_order() {
        let s = schema(&["y", "x"], "{x} hit {y} hard");
        assert_eq!(s.slot_order(), vec!["x", "y"]);
        assert_eq!(s.render(|r| vec![r.to_uppercase()]), vec!["X", "hit", "Y", "hard"]);
    }
}
