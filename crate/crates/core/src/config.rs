//! JSON configuration for concept spaces, prompt tables, and worlds.
//!
//! ```json
//! {
//!   "spaces": [{"name": "sex", "values": ["male", "female"]}],
//!   "prompts": {
//!     "": {"type": "uniform", "space": "sex"},
//!     "a man": {"type": "delta", "space": "sex", "value": "male"},
//!     "a person": {"type": "mix", "components": [
//!       {"weight": 0.5, "prompt": "a man"},
//!       {"weight": 0.5, "prompt": {"type": "delta", "space": "sex", "value": "female"}}
//!     ]}
//!   },
//!   "world": {"blocks": [{"name": "z", "parents": ["sex"], "emissions": [
//!     {"mean": [1.0], "variance": [0.25]}, {"mean": [-1.0], "variance": [0.25]}
//!   ]}]}
//! }
//! ```
//!
//! Prompt definitions are `delta`, `uniform`, `table` (row-major weights, last
//! space fastest), `product` (of `factors`) and `mix`. Anywhere a definition
//! is expected, a string names another prompt of the same document.
//!
//! The world's factors are the spaces of the `""` prompt, in order, and every
//! prompt used with the world must be over exactly those spaces.
//!
//! [`ConceptConfig::dump`] writes every prompt in canonical form (a product of
//! `table`s, one per stored weight group), so load → dump → load is
//! value-identical.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concept::{ConceptDistribution, ConceptSpace, PromptTable, EMPTY_PROMPT};
use crate::error::{Error, Result};
use crate::world::{BlockSpec, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptRef {
    Name(String),
    Def(Box<PromptDef>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixComponent {
    pub weight: f64,
    pub prompt: PromptRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PromptDef {
    Delta { space: String, value: String },
    Uniform { space: String },
    Table { spaces: Vec<String>, weights: Vec<f64> },
    Product { factors: Vec<PromptRef> },
    Mix { components: Vec<MixComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDoc {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDoc {
    pub blocks: Vec<BlockSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDoc {
    pub spaces: Vec<SpaceDoc>,
    pub prompts: BTreeMap<String, PromptRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldDoc>,
}

/// A loaded configuration.
#[derive(Debug, Clone)]
pub struct ConceptConfig {
    pub spaces: Vec<ConceptSpace>,
    pub prompts: PromptTable,
    pub world: Option<World>,
}

struct Resolver<'a> {
    spaces: &'a [ConceptSpace],
    defs: &'a BTreeMap<String, PromptRef>,
    done: BTreeMap<String, ConceptDistribution>,
    active: HashSet<String>,
}

impl Resolver<'_> {
    fn space(&self, name: &str) -> Result<&ConceptSpace> {
        self.spaces
            .iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::InvalidSpace(format!("unknown space `{name}`")))
    }

    fn named(&mut self, name: &str) -> Result<ConceptDistribution> {
        if let Some(q) = self.done.get(name) {
            return Ok(q.clone());
        }
        let def = self.defs.get(name).ok_or_else(|| Error::UnknownPrompt {
            name: name.to_string(),
            available: self.defs.keys().map(|k| format!("{k:?}")).collect(),
        })?;
        if !self.active.insert(name.to_string()) {
            return Err(Error::InvalidPlan(format!("prompt `{name}` refers to itself")));
        }
        let q = self.reference(def);
        self.active.remove(name);
        let q = q?;
        self.done.insert(name.to_string(), q.clone());
        Ok(q)
    }

    fn reference(&mut self, r: &PromptRef) -> Result<ConceptDistribution> {
        match r {
            PromptRef::Name(n) => self.named(n),
            PromptRef::Def(d) => self.definition(d),
        }
    }

    fn definition(&mut self, d: &PromptDef) -> Result<ConceptDistribution> {
        match d {
            PromptDef::Delta { space, value } => ConceptDistribution::delta(self.space(space)?, value),
            PromptDef::Uniform { space } => Ok(ConceptDistribution::uniform(self.space(space)?)),
            PromptDef::Table { spaces, weights } => {
                let spaces = spaces.iter().map(|s| self.space(s).cloned()).collect::<Result<Vec<_>>>()?;
                ConceptDistribution::from_joint(spaces, weights.clone())
            }
            PromptDef::Product { factors } => {
                let mut acc = ConceptDistribution::trivial();
                for f in factors {
                    let q = self.reference(f)?;
                    acc = acc.product(&q)?;
                }
                Ok(acc)
            }
            PromptDef::Mix { components } => {
                let qs = components
                    .iter()
                    .map(|c| Ok((c.weight, self.reference(&c.prompt)?)))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<(f64, &ConceptDistribution)> = qs.iter().map(|(w, q)| (*w, q)).collect();
                ConceptDistribution::mix(&refs)
            }
        }
    }
}

/// Canonical definition of a distribution: its weight groups as tables.
pub fn canonical_def(q: &ConceptDistribution) -> PromptRef {
    let names = q.space_names();
    let tables: Vec<PromptRef> = q
        .groups()
        .iter()
        .map(|g| {
            PromptRef::Def(Box::new(PromptDef::Table {
                spaces: names[g.start..g.start + g.len].iter().map(|s| s.to_string()).collect(),
                weights: g.weights.clone(),
            }))
        })
        .collect();
    PromptRef::Def(Box::new(PromptDef::Product { factors: tables }))
}

impl ConceptConfig {
    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        let mut problems = Vec::new();
        let mut spaces = Vec::new();
        for s in &doc.spaces {
            match ConceptSpace::new(s.name.clone(), s.values.clone()) {
                Ok(sp) if spaces.iter().any(|o: &ConceptSpace| o.name() == sp.name()) => {
                    problems.push(format!("space `{}` defined twice", sp.name()))
                }
                Ok(sp) => spaces.push(sp),
                Err(e) => problems.push(e.to_string()),
            }
        }
        if !doc.prompts.contains_key(EMPTY_PROMPT) {
            problems.push("the empty prompt \"\" is not defined".into());
        }
        let mut resolver = Resolver {
            spaces: &spaces,
            defs: &doc.prompts,
            done: BTreeMap::new(),
            active: HashSet::new(),
        };
        let mut entries = BTreeMap::new();
        for name in doc.prompts.keys() {
            match resolver.named(name) {
                Ok(q) => {
                    entries.insert(name.clone(), q);
                }
                Err(e) => problems.push(format!("prompt {name:?}: {e}")),
            }
        }
        let mut world = None;
        if let (Some(wd), Some(marginal)) = (&doc.world, entries.get(EMPTY_PROMPT)) {
            match World::new(marginal.spaces().to_vec(), wd.blocks.clone(), wd.permutation.clone()) {
                Ok(w) => {
                    for (name, q) in &entries {
                        if let Err(e) = q.check_over(w.factors()) {
                            problems.push(format!("prompt {name:?} cannot be used with the world: {e}"));
                        }
                    }
                    world = Some(w);
                }
                Err(e) => problems.push(e.to_string()),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self { spaces, prompts: PromptTable::new(entries)?, world })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ConfigDoc = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        Self::from_doc(&doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn world(&self) -> Result<&World> {
        self.world
            .as_ref()
            .ok_or_else(|| Error::InvalidWorld("configuration defines no world".into()))
    }

    pub fn space(&self, name: &str) -> Result<&ConceptSpace> {
        self.spaces
            .iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::InvalidSpace(format!("unknown space `{name}`")))
    }

    /// Canonical document for this configuration.
    pub fn dump(&self) -> ConfigDoc {
        ConfigDoc {
            spaces: self
                .spaces
                .iter()
                .map(|s| SpaceDoc { name: s.name().to_string(), values: s.values().to_vec() })
                .collect(),
            prompts: self.prompts.iter().map(|(k, q)| (k.to_string(), canonical_def(q))).collect(),
            world: self.world.as_ref().map(|w| WorldDoc {
                blocks: w.block_specs().cloned().collect(),
                permutation: w.permutation().map(<[usize]>::to_vec),
            }),
        }
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&self.dump()).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
      "spaces": [
        {"name": "sex", "values": ["male", "female"]},
        {"name": "profession", "values": ["mathematician", "nurse", "person"]}
      ],
      "prompts": {
        "": {"type": "product", "factors": [
          {"type": "uniform", "space": "sex"},
          {"type": "table", "spaces": ["profession"], "weights": [0.2, 0.3, 0.5]}
        ]},
        "a man": {"type": "product", "factors": [
          {"type": "delta", "space": "sex", "value": "male"},
          {"type": "table", "spaces": ["profession"], "weights": [0.2, 0.3, 0.5]}
        ]},
        "a person": {"type": "mix", "components": [
          {"weight": 0.5, "prompt": "a man"},
          {"weight": 0.5, "prompt": {"type": "product", "factors": [
            {"type": "delta", "space": "sex", "value": "female"},
            {"type": "table", "spaces": ["profession"], "weights": [0.2, 0.3, 0.5]}
          ]}}
        ]}
      }
    }"#;

    #[test]
    fn loads_and_resolves() {
        let cfg = ConceptConfig::from_json(DOC).unwrap();
        let man = cfg.prompts.resolve("a man").unwrap();
        assert_eq!(man.marginal(&["sex"]).unwrap().joint(), vec![1.0, 0.0]);
        let person = cfg.prompts.resolve("a person").unwrap();
        assert_eq!(person.marginal(&["sex"]).unwrap().joint(), vec![0.5, 0.5]);
    }

    #[test]
    fn round_trip_is_value_identical() {
        let cfg = ConceptConfig::from_json(DOC).unwrap();
        let again = ConceptConfig::from_json(&cfg.dump_json()).unwrap();
        assert_eq!(cfg.prompts, again.prompts);
        assert_eq!(cfg.dump(), again.dump());
    }

    #[test]
    fn reports_every_problem() {
        let bad = r#"{
          "spaces": [{"name": "sex", "values": ["male"]}],
          "prompts": {
            "a": {"type": "delta", "space": "nope", "value": "x"},
            "b": "c"
          }
        }"#;
        let Err(Error::Config(problems)) = ConceptConfig::from_json(bad) else {
            panic!("expected config error");
        };
        assert!(problems.len() >= 4, "{problems:?}");
    }

    #[test]
    fn detects_reference_cycles() {
        let bad = r#"{"spaces": [], "prompts": {"": "x", "x": ""}}"#;
        assert!(ConceptConfig::from_json(bad).is_err());
    }
}
