use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AstError, Sample, Tree};

pub const OOV_ID: usize = 0;
pub const OOV_TOKEN: &str = "<unk>";

/// Node-type name to dense integer id. Id 0 is reserved for unknown types.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = AstError;

    fn try_from(file: VocabularyFile) -> Result<Self, Self::Error> {
        Vocabulary::from_tokens(file.tokens)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// One id per distinct type name across `samples`, in lexicographic order
    /// after the OOV entry.
    pub fn build(samples: &[Sample]) -> Self {
        Self::from_trees(samples.iter().map(|s| &s.tree))
    }

    pub fn from_trees<'a>(trees: impl IntoIterator<Item = &'a Tree>) -> Self {
        let names: BTreeSet<&str> = trees.into_iter().flat_map(Tree::type_names).collect();
        let tokens = std::iter::once(OOV_TOKEN)
            .chain(names.into_iter().filter(|n| *n != OOV_TOKEN))
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens).expect("distinct tokens")
    }

    /// Builds from an explicit id order; `tokens[0]` must be the OOV token.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, AstError> {
        if tokens.first().map(String::as_str) != Some(OOV_TOKEN) {
            return Err(AstError::Vocabulary(format!(
                "first token must be {OOV_TOKEN}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(AstError::Vocabulary(format!("empty token at id {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(AstError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a type name, or [`OOV_ID`] when unknown.
    pub fn id(&self, name: &str) -> usize {
        self.ids.get(name).copied().unwrap_or(OOV_ID)
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of every node of `tree`, in pre-order.
    pub fn encode(&self, tree: &Tree) -> Vec<usize> {
        tree.type_names().map(|n| self.id(n)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), AstError> {
        let json =
            serde_json::to_vec_pretty(self).map_err(|e| AstError::Vocabulary(e.to_string()))?;
        crate::io::write_atomic(path, &json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AstError> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| AstError::Vocabulary(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::AstNode;

    fn sample(types: &[&str]) -> Sample {
        let children = types[1..].iter().map(|t| AstNode::leaf(*t)).collect();
        let node = AstNode::with_children(types[0], children);
        Sample {
            tree: Tree::from_ast(&node, 100).unwrap(),
            label: 0,
        }
    }

    #[test]
    fn repeated_types_collapse() {
        let v = Vocabulary::build(&[sample(&["A", "B", "A"])]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.tokens(), [OOV_TOKEN, "A", "B"]);
    }

    #[test]
    fn lexicographic_and_deterministic() {
        let corpus = [
            sample(&["Zeta", "alpha", "Beta"]),
            sample(&["Module", "Beta"]),
        ];
        let a = Vocabulary::build(&corpus);
        let b = Vocabulary::build(&corpus);
        assert_eq!(a, b);
        assert_eq!(a.tokens(), [OOV_TOKEN, "Beta", "Module", "Zeta", "alpha"]);
    }

    #[test]
    fn unknown_maps_to_oov() {
        let v = Vocabulary::build(&[sample(&["A"])]);
        assert_eq!(v.id("Nope"), OOV_ID);
        assert_eq!(v.id("A"), 1);
    }

    #[test]
    fn json_round_trip_keeps_ids() {
        let v = Vocabulary::build(&[sample(&["If", "For", "Call"])]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"{"tokens":["A"]}"#).is_err());
        assert!(serde_json::from_str::<Vocabulary>(r#"{"tokens":["<unk>","A","A"]}"#).is_err());
    }
}
