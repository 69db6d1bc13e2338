//! Canonical AST representation.
//!
//! Trees arrive as nested JSON documents (`{"type": .., "children": [..]}`)
//! produced by external parsers. Internally a [`Tree`] is a flat arena
//! indexed in depth-first pre-order, which fixes the node order used by the
//! convolution and capsule layers.

mod dataset;
mod split;
mod synthetic;
mod vocab;
mod window;

pub use dataset::{
    read_class_manifest, read_dataset, write_class_manifest, write_dataset, ClassManifest, Sample,
};
pub use split::{split, Split};
pub use synthetic::{
    generate_synthetic_corpus, Production, SymbolRef, SyntheticSpec, TemplateNode,
};
pub use vocab::{Vocabulary, OOV_ID, OOV_TOKEN};
pub use window::{extract_windows, Window, WindowMember};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_DEPTH: usize = 10_000;

#[derive(Debug, Error)]
pub enum AstError {
    #[error("malformed tree document: {0}")]
    Malformed(String),
    #[error("empty node type at {path}")]
    EmptyType { path: String },
    #[error("tree depth exceeds {max} at {path}")]
    TooDeep { max: usize, path: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid synthetic grammar: {0}")]
    Grammar(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One node of an externally parsed AST, in document form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AstNode {
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<AstNode>,
}

impl AstNode {
    pub fn leaf(type_name: impl Into<String>) -> Self {
        Self {
            type_name: type_name.into(),
            children: Vec::new(),
        }
    }

    pub fn with_children(type_name: impl Into<String>, children: Vec<AstNode>) -> Self {
        Self {
            type_name: type_name.into(),
            children,
        }
    }
}

// Deep trees would otherwise overflow the stack in the compiler-generated drop.
impl Drop for AstNode {
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.children);
        while let Some(mut node) = stack.pop() {
            stack.append(&mut node.children);
        }
    }
}

pub(crate) fn from_json_slice<'de, T: Deserialize<'de>>(bytes: &'de [u8]) -> serde_json::Result<T> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    de.disable_recursion_limit();
    let value = T::deserialize(serde_stacker::Deserializer::new(&mut de))?;
    de.end()?;
    Ok(value)
}

pub(crate) fn to_json_vec<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::new(&mut out);
    value.serialize(serde_stacker::Serializer::new(&mut ser))?;
    Ok(out)
}

/// Ordered rooted tree of typed nodes, indexed in pre-order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tree {
    types: Vec<String>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

impl Tree {
    /// Parses a canonical tree document with the default depth limit.
    pub fn parse(bytes: &[u8]) -> Result<Self, AstError> {
        Self::parse_with_limit(bytes, DEFAULT_MAX_DEPTH)
    }

    pub fn parse_with_limit(bytes: &[u8], max_depth: usize) -> Result<Self, AstError> {
        let root: AstNode =
            from_json_slice(bytes).map_err(|e| AstError::Malformed(e.to_string()))?;
        Self::from_ast(&root, max_depth)
    }

    /// Flattens and validates a document tree.
    pub fn from_ast(root: &AstNode, max_depth: usize) -> Result<Self, AstError> {
        let mut tree = Tree {
            types: Vec::new(),
            parent: Vec::new(),
            children: Vec::new(),
        };
        // (node, parent index, depth), children pushed in reverse to pop in order
        let mut stack = vec![(root, None::<usize>, 1usize)];
        while let Some((node, parent, depth)) = stack.pop() {
            let index = tree.types.len();
            tree.types.push(node.type_name.clone());
            tree.parent.push(parent);
            tree.children.push(Vec::with_capacity(node.children.len()));
            if let Some(p) = parent {
                tree.children[p].push(index);
            }
            if node.type_name.is_empty() {
                return Err(AstError::EmptyType {
                    path: tree.path_to(index),
                });
            }
            if depth > max_depth {
                return Err(AstError::TooDeep {
                    max: max_depth,
                    path: tree.path_to(index),
                });
            }
            for child in node.children.iter().rev() {
                stack.push((child, Some(index), depth + 1));
            }
        }
        Ok(tree)
    }

    /// JSON-path style location of a node, e.g. `$.children[1].children[0]`.
    pub fn path_to(&self, node: usize) -> String {
        let mut steps = Vec::new();
        let mut cur = node;
        while let Some(p) = self.parent[cur] {
            let pos = self.children[p]
                .iter()
                .position(|&c| c == cur)
                .unwrap_or(self.children[p].len());
            steps.push(pos);
            cur = p;
        }
        let mut path = String::from("$");
        for pos in steps.iter().rev() {
            path.push_str(&format!(".children[{pos}]"));
        }
        path
    }

    /// Rebuilds the nested document form.
    pub fn to_ast(&self) -> AstNode {
        let mut built: Vec<Option<AstNode>> = vec![None; self.len()];
        for i in (0..self.len()).rev() {
            let children = self.children[i]
                .iter()
                .map(|&c| {
                    built[c]
                        .take()
                        .expect("children precede parents in reverse pre-order")
                })
                .collect();
            built[i] = Some(AstNode::with_children(self.types[i].clone(), children));
        }
        built[0].take().expect("non-empty tree")
    }

    /// Normalized canonical JSON: leaves omit `children`.
    pub fn to_json(&self) -> String {
        String::from_utf8(to_json_vec(&self.to_ast()).expect("tree serializes")).expect("utf-8")
    }

    /// Number of nodes `T`.
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn type_name(&self, node: usize) -> &str {
        &self.types[node]
    }

    pub fn type_names(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(String::as_str)
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.len()];
        let mut max = 0;
        for i in 0..self.len() {
            depth[i] = self.parent[i].map_or(1, |p| depth[p] + 1);
            max = max.max(depth[i]);
        }
        max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node() {
        let t = Tree::parse(br#"{"type":"Module"}"#).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.type_name(0), "Module");
    }

    #[test]
    fn preorder_of_three_children() {
        let t = Tree::parse(br#"{"type":"P","children":[{"type":"A"},{"type":"B"},{"type":"C"}]}"#)
            .unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.type_names().collect::<Vec<_>>(), ["P", "A", "B", "C"]);
        assert_eq!(t.children(0), &[1, 2, 3]);
    }

    #[test]
    fn nested_preorder() {
        let doc = br#"{"type":"R","children":[{"type":"A","children":[{"type":"A1"},{"type":"A2"}]},{"type":"B"}]}"#;
        let t = Tree::parse(doc).unwrap();
        assert_eq!(
            t.type_names().collect::<Vec<_>>(),
            ["R", "A", "A1", "A2", "B"]
        );
        assert_eq!(t.parent(4), Some(0));
        assert_eq!(t.depth(), 3);
    }

    #[test]
    fn serialization_normalizes_empty_children() {
        let t = Tree::parse(br#"{"type":"P","children":[{"type":"A","children":[]}]}"#).unwrap();
        assert_eq!(t.to_json(), r#"{"type":"P","children":[{"type":"A"}]}"#);
        assert_eq!(Tree::parse(t.to_json().as_bytes()).unwrap(), t);
    }

    #[test]
    fn empty_type_reports_path() {
        let err = Tree::parse(
            br#"{"type":"P","children":[{"type":"A"},{"type":"B","children":[{"type":""}]}]}"#,
        )
        .unwrap_err();
        match err {
            AstError::EmptyType { path } => assert_eq!(path, "$.children[1].children[0]"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_documents_rejected() {
        for doc in [
            &b"{"[..],
            br#"{"children":[]}"#,
            br#"{"type":"A","extra":1}"#,
            br#"[1,2]"#,
            br#"{"type":3}"#,
        ] {
            assert!(
                matches!(Tree::parse(doc), Err(AstError::Malformed(_))),
                "{:?}",
                std::str::from_utf8(doc)
            );
        }
    }

    fn chain(depth: usize) -> String {
        let mut doc = String::new();
        for _ in 0..depth - 1 {
            doc.push_str(r#"{"type":"N","children":["#);
        }
        doc.push_str(r#"{"type":"L"}"#);
        for _ in 0..depth - 1 {
            doc.push_str("]}");
        }
        doc
    }

    #[test]
    fn deep_chain_within_default_limit() {
        let doc = chain(DEFAULT_MAX_DEPTH);
        let t = Tree::parse(doc.as_bytes()).unwrap();
        assert_eq!(t.len(), DEFAULT_MAX_DEPTH);
        assert_eq!(t.depth(), DEFAULT_MAX_DEPTH);
        assert_eq!(t.to_json(), doc);
    }

    #[test]
    fn too_deep_rejected_with_path() {
        let err = Tree::parse_with_limit(chain(4).as_bytes(), 3).unwrap_err();
        match err {
            AstError::TooDeep { max, path } => {
                assert_eq!(max, 3);
                assert_eq!(path, "$.children[0].children[0].children[0]");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(Tree::parse(chain(DEFAULT_MAX_DEPTH + 1).as_bytes()).is_err());
    }
}
