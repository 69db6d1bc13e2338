//! Labelled corpora from small stochastic tree grammars.
//!
//! Every class shares a set of filler rules and overrides some of them (by
//! convention a `Motif` rule) with class-specific subtrees, so the label is
//! carried by which motifs appear and how they nest rather than by size.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AstError, AstNode, Sample, Tree};

const MAX_NESTING: usize = 256;

fn one() -> usize {
    1
}

fn unit_weight() -> f64 {
    1.0
}

fn default_expansions() -> usize {
    4000
}

fn default_attempts() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Rule expansions allowed per attempted tree.
    #[serde(default = "default_expansions")]
    pub max_expansions: usize,
    /// Trees drawn per sample before giving up on the size range.
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default)]
    pub rules: BTreeMap<String, Vec<Production>>,
    pub classes: Vec<ClassGrammar>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGrammar {
    pub name: String,
    pub start: String,
    /// Rules that replace shared rules of the same name for this class.
    #[serde(default)]
    pub rules: BTreeMap<String, Vec<Production>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Production {
    #[serde(default = "unit_weight")]
    pub weight: f64,
    pub node: TemplateNode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateNode {
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default)]
    pub children: Vec<SymbolRef>,
}

/// A child slot: either a rule expanded a uniform `min..=max` times, or a
/// literal node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SymbolRef {
    Rule {
        rule: String,
        #[serde(default = "one")]
        min: usize,
        #[serde(default = "one")]
        max: usize,
    },
    Node(TemplateNode),
}

impl SyntheticSpec {
    /// The bundled six-class grammar.
    pub fn six_class() -> Self {
        serde_json::from_str(include_str!("../../data/six_class.json"))
            .expect("bundled grammar parses")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AstError> {
        serde_json::from_slice(bytes).map_err(|e| AstError::Grammar(e.to_string()))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Copy where every class uses the first class's rules, so labels carry
    /// no signal.
    pub fn ablated(&self) -> Self {
        let mut out = self.clone();
        if let Some(first) = self.classes.first() {
            for c in &mut out.classes {
                c.rules = first.rules.clone();
                c.start = first.start.clone();
            }
        }
        out
    }

    fn class_rules<'a>(&'a self, class: &'a ClassGrammar) -> HashMap<&'a str, &'a [Production]> {
        let mut rules: HashMap<&str, &[Production]> = self
            .rules
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
            .collect();
        for (k, v) in &class.rules {
            rules.insert(k.as_str(), v.as_slice());
        }
        rules
    }

    fn validate(&self) -> Result<(), AstError> {
        let err = |m: String| Err(AstError::Grammar(m));
        if self.classes.len() < 2 {
            return err(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            ));
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return err(format!(
                "invalid size range {}..={}",
                self.min_nodes, self.max_nodes
            ));
        }
        if self.max_attempts == 0 || self.max_expansions == 0 {
            return err("max_attempts and max_expansions must be positive".into());
        }
        for class in &self.classes {
            let rules = self.class_rules(class);
            if !rules.contains_key(class.start.as_str()) {
                return err(format!(
                    "class {}: unknown start rule {}",
                    class.name, class.start
                ));
            }
            for (name, prods) in &rules {
                if prods.is_empty() {
                    return err(format!(
                        "class {}: rule {name} has no productions",
                        class.name
                    ));
                }
                for p in prods.iter() {
                    if !(p.weight.is_finite() && p.weight > 0.0) {
                        return err(format!(
                            "class {}: rule {name} has weight {}",
                            class.name, p.weight
                        ));
                    }
                    check_template(&p.node, &rules)
                        .map_err(|m| AstError::Grammar(format!("class {}: {m}", class.name)))?;
                }
            }
            if !productive(&rules)
                .get(class.start.as_str())
                .copied()
                .unwrap_or(false)
            {
                return err(format!(
                    "class {}: start rule {} cannot derive a finite tree",
                    class.name, class.start
                ));
            }
        }
        Ok(())
    }
}

fn check_template(node: &TemplateNode, rules: &HashMap<&str, &[Production]>) -> Result<(), String> {
    if node.type_name.is_empty() {
        return Err("empty node type".into());
    }
    for child in &node.children {
        match child {
            SymbolRef::Rule { rule, min, max } => {
                if !rules.contains_key(rule.as_str()) {
                    return Err(format!("unknown rule {rule}"));
                }
                if min > max {
                    return Err(format!("rule {rule}: min {min} > max {max}"));
                }
            }
            SymbolRef::Node(n) => check_template(n, rules)?,
        }
    }
    Ok(())
}

/// Least fixpoint of "can derive a finite tree".
fn productive<'a>(rules: &HashMap<&'a str, &'a [Production]>) -> HashMap<&'a str, bool> {
    fn template_ok(node: &TemplateNode, known: &HashMap<&str, bool>) -> bool {
        node.children.iter().all(|c| match c {
            SymbolRef::Rule { min: 0, .. } => true,
            SymbolRef::Rule { rule, .. } => known.get(rule.as_str()).copied().unwrap_or(false),
            SymbolRef::Node(n) => template_ok(n, known),
        })
    }
    let mut known: HashMap<&str, bool> = rules.keys().map(|k| (*k, false)).collect();
    loop {
        let mut changed = false;
        for (name, prods) in rules {
            if !known[name] && prods.iter().any(|p| template_ok(&p.node, &known)) {
                known.insert(name, true);
                changed = true;
            }
        }
        if !changed {
            return known;
        }
    }
}

struct Expander<'a> {
    rules: HashMap<&'a str, &'a [Production]>,
    budget: usize,
}

#[derive(Debug)]
struct Exhausted;

impl Expander<'_> {
    fn rule(
        &mut self,
        name: &str,
        rng: &mut ChaCha8Rng,
        nesting: usize,
    ) -> Result<AstNode, Exhausted> {
        if self.budget == 0 || nesting > MAX_NESTING {
            return Err(Exhausted);
        }
        self.budget -= 1;
        let prods = self.rules[name];
        let total: f64 = prods.iter().map(|p| p.weight).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = &prods[prods.len() - 1];
        for p in prods {
            if pick < p.weight {
                chosen = p;
                break;
            }
            pick -= p.weight;
        }
        self.template(&chosen.node, rng, nesting + 1)
    }

    fn template(
        &mut self,
        node: &TemplateNode,
        rng: &mut ChaCha8Rng,
        nesting: usize,
    ) -> Result<AstNode, Exhausted> {
        if nesting > MAX_NESTING {
            return Err(Exhausted);
        }
        let mut children = Vec::new();
        for child in &node.children {
            match child {
                SymbolRef::Rule { rule, min, max } => {
                    let count = rng.gen_range(*min..=*max);
                    for _ in 0..count {
                        children.push(self.rule(rule, rng, nesting + 1)?);
                    }
                }
                SymbolRef::Node(n) => children.push(self.template(n, rng, nesting + 1)?),
            }
        }
        Ok(AstNode::with_children(node.type_name.clone(), children))
    }
}

/// `samples_per_class` trees for every class, interleaved by class,
/// reproducible for a given `seed`.
pub fn generate_synthetic_corpus(
    spec: &SyntheticSpec,
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<Sample>, AstError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut expanders: Vec<Expander> = spec
        .classes
        .iter()
        .map(|c| Expander {
            rules: spec.class_rules(c),
            budget: 0,
        })
        .collect();
    let mut samples = Vec::with_capacity(samples_per_class * spec.classes.len());
    for _ in 0..samples_per_class {
        for (label, class) in spec.classes.iter().enumerate() {
            let expander = &mut expanders[label];
            let mut drawn = None;
            let mut exhausted = 0;
            for _ in 0..spec.max_attempts {
                expander.budget = spec.max_expansions;
                match expander.rule(&class.start, &mut rng, 0) {
                    Ok(node) => {
                        let tree = Tree::from_ast(&node, MAX_NESTING * 2)
                            .map_err(|e| AstError::Grammar(e.to_string()))?;
                        if (spec.min_nodes..=spec.max_nodes).contains(&tree.len()) {
                            drawn = Some(tree);
                            break;
                        }
                    }
                    Err(Exhausted) => exhausted += 1,
                }
            }
            let tree = drawn.ok_or_else(|| {
                AstError::Grammar(format!(
                    "class {}: no tree with {}..={} nodes in {} attempts ({exhausted} exceeded {} expansions)",
                    class.name, spec.min_nodes, spec.max_nodes, spec.max_attempts, spec.max_expansions
                ))
            })?;
            samples.push(Sample { tree, label });
        }
    }
    Ok(samples)
}
