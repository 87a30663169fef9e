//! Hallucination taxonomy shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The four hallucination types. Also used as the question type of a visual
/// question, since the question type determines the hallucination type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HType {
    Object,
    Attribute,
    Relationship,
    Scene,
}

impl HType {
    pub const ALL: [HType; 4] = [
        HType::Object,
        HType::Attribute,
        HType::Relationship,
        HType::Scene,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HType::Object => "object",
            HType::Attribute => "attribute",
            HType::Relationship => "relationship",
            HType::Scene => "scene",
        }
    }

    /// Short form used in prompt template names (`inject-attr`, ...).
    pub fn short(self) -> &'static str {
        match self {
            HType::Object => "obj",
            HType::Attribute => "attr",
            HType::Relationship => "rel",
            HType::Scene => "sce",
        }
    }
}

impl fmt::Display for HType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "obj" | "object" => Ok(HType::Object),
            "attr" | "attribute" => Ok(HType::Attribute),
            "rel" | "relation" | "relationship" => Ok(HType::Relationship),
            "sce" | "scene" => Ok(HType::Scene),
            other => Err(format!("unknown hallucination type `{other}`")),
        }
    }
}

/// Role of a component string inside a hallucination trait.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Obj,
    Attr,
    Rel,
    Obj1,
    Obj2,
    Sce,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Obj => "obj",
            Role::Attr => "attr",
            Role::Rel => "rel",
            Role::Obj1 => "obj1",
            Role::Obj2 => "obj2",
            Role::Sce => "sce",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "obj" => Ok(Role::Obj),
            "attr" => Ok(Role::Attr),
            "rel" => Ok(Role::Rel),
            "obj1" => Ok(Role::Obj1),
            "obj2" => Ok(Role::Obj2),
            "sce" => Ok(Role::Sce),
            other => Err(format!("unknown component role `{other}`")),
        }
    }
}

/// Where a hallucinated answer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Concept association bias: a trait borrowed from another object in the image.
    Cab,
    LangPrior,
    ImagePrior,
    LangImagePrior,
    Decoy,
    VlmResponse,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Cab => "cab",
            Pattern::LangPrior => "lang_prior",
            Pattern::ImagePrior => "image_prior",
            Pattern::LangImagePrior => "lang_image_prior",
            Pattern::Decoy => "decoy",
            Pattern::VlmResponse => "vlm_response",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Typed component tuple of a hallucination trait:
/// `<obj>`, `<attr><obj>`, `<obj1><rel><obj2>` or `<sce>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Components {
    Relationship { obj1: String, rel: String, obj2: String },
    Attribute { attr: String, obj: String },
    Object { obj: String },
    Scene { sce: String },
}

impl Components {
    pub fn htype(&self) -> HType {
        match self {
            Components::Object { .. } => HType::Object,
            Components::Attribute { .. } => HType::Attribute,
            Components::Relationship { .. } => HType::Relationship,
            Components::Scene { .. } => HType::Scene,
        }
    }

    /// Component strings with their roles, in surface order of the taxonomy.
    pub fn parts(&self) -> Vec<(&str, Role)> {
        match self {
            Components::Object { obj } => vec![(obj.as_str(), Role::Obj)],
            Components::Attribute { attr, obj } => {
                vec![(attr.as_str(), Role::Attr), (obj.as_str(), Role::Obj)]
            }
            Components::Relationship { obj1, rel, obj2 } => vec![
                (obj1.as_str(), Role::Obj1),
                (rel.as_str(), Role::Rel),
                (obj2.as_str(), Role::Obj2),
            ],
            Components::Scene { sce } => vec![(sce.as_str(), Role::Sce)],
        }
    }

    pub fn get(&self, role: Role) -> Option<&str> {
        self.parts()
            .into_iter()
            .find(|(_, r)| *r == role)
            .map(|(s, _)| s)
    }

    /// Replaces the component in `role`. Returns `None` when the tuple has no
    /// such role.
    pub fn with(&self, role: Role, value: &str) -> Option<Components> {
        let v = value.to_string();
        let out = match (self, role) {
            (Components::Object { .. }, Role::Obj) => Components::Object { obj: v },
            (Components::Attribute { obj, .. }, Role::Attr) => Components::Attribute {
                attr: v,
                obj: obj.clone(),
            },
            (Components::Attribute { attr, .. }, Role::Obj) => Components::Attribute {
                attr: attr.clone(),
                obj: v,
            },
            (Components::Relationship { rel, obj2, .. }, Role::Obj1) => Components::Relationship {
                obj1: v,
                rel: rel.clone(),
                obj2: obj2.clone(),
            },
            (Components::Relationship { obj1, obj2, .. }, Role::Rel) => Components::Relationship {
                obj1: obj1.clone(),
                rel: v,
                obj2: obj2.clone(),
            },
            (Components::Relationship { obj1, rel, .. }, Role::Obj2) => Components::Relationship {
                obj1: obj1.clone(),
                rel: rel.clone(),
                obj2: v,
            },
            (Components::Scene { .. }, Role::Sce) => Components::Scene { sce: v },
            _ => return None,
        };
        Some(out)
    }

    /// The role that a hallucinated answer replaces when nothing better is known.
    pub fn default_answer_role(htype: HType) -> Role {
        match htype {
            HType::Object => Role::Obj,
            HType::Attribute => Role::Attr,
            HType::Relationship => Role::Rel,
            HType::Scene => Role::Sce,
        }
    }

    /// Human-readable rendering, e.g. `glass shelf` or `window above shelf`.
    pub fn surface(&self) -> String {
        self.parts()
            .into_iter()
            .map(|(s, _)| s)
            .collect::<Vec<_>>()
            .join(" ")
    }
}
