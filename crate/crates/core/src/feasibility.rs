//! Prerequisite graphs, mastery-conditioned feasible sets and frontiers.
//!
//! A concept action `v` is admissible when every prerequisite `u` of `v`
//! has mastery `K(u) >= theta_min`. Concepts without prerequisites are
//! always admissible. The feasible set is a function of the state alone:
//! nothing in this module can see policy parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense concept index in `0..num_concepts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptId(pub usize);

/// Directed acyclic prerequisite structure. Acyclicity, range and
/// duplicate-freedom are checked at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrereqGraph {
    num_concepts: usize,
    prereqs: Vec<Vec<ConceptId>>,
}

/// On-disk form: `{"num_concepts": N, "prereqs": {"<id>": [ids...]}}`.
#[derive(Debug, Serialize, Deserialize)]
struct GraphDoc {
    num_concepts: usize,
    #[serde(default)]
    prereqs: BTreeMap<String, Vec<usize>>,
}

impl PrereqGraph {
    pub fn new(num_concepts: usize, prereqs: Vec<Vec<usize>>) -> Result<Self> {
        if prereqs.len() != num_concepts {
            return Err(Error::DimensionMismatch { expected: num_concepts, actual: prereqs.len() });
        }
        let mut lists = Vec::with_capacity(num_concepts);
        for list in prereqs {
            let mut out: Vec<ConceptId> = Vec::with_capacity(list.len());
            for u in list {
                if u >= num_concepts {
                    return Err(Error::IndexOutOfRange { index: u, len: num_concepts });
                }
                if !out.contains(&ConceptId(u)) {
                    out.push(ConceptId(u));
                }
            }
            lists.push(out);
        }
        validate_dag(num_concepts, &lists)?;
        Ok(Self { num_concepts, prereqs: lists })
    }

    /// Chain `0 -> 1 -> ... -> n-1`.
    pub fn chain(n: usize) -> Self {
        let prereqs = (0..n).map(|v| if v == 0 { vec![] } else { vec![v - 1] }).collect();
        Self::new(n, prereqs).expect("chain is acyclic")
    }

    /// Layers of `width` concepts; every concept of layer `l + 1` requires
    /// every concept of layer `l`.
    pub fn layered(n: usize, width: usize) -> Self {
        assert!(width > 0, "layer width must be positive");
        let prereqs = (0..n)
            .map(|v| {
                let layer = v / width;
                if layer == 0 {
                    vec![]
                } else {
                    ((layer - 1) * width..layer * width).collect()
                }
            })
            .collect();
        Self::new(n, prereqs).expect("layered graph is acyclic")
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    /// `Pre(v)`.
    pub fn prereqs(&self, v: ConceptId) -> &[ConceptId] {
        &self.prereqs[v.0]
    }

    /// Longest prerequisite path ending at each concept (0 for roots).
    pub fn depths(&self) -> Vec<usize> {
        fn visit(g: &PrereqGraph, v: usize, memo: &mut [Option<usize>]) -> usize {
            if let Some(d) = memo[v] {
                return d;
            }
            let d = g.prereqs[v].iter().map(|u| visit(g, u.0, memo) + 1).max().unwrap_or(0);
            memo[v] = Some(d);
            d
        }
        let mut memo = vec![None; self.num_concepts];
        (0..self.num_concepts).map(|v| visit(self, v, &mut memo)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        // Bound allocation before building per-concept lists.
        if doc.num_concepts > 1 << 20 {
            return Err(Error::Parse(format!("num_concepts {} too large", doc.num_concepts)));
        }
        let mut lists = vec![Vec::new(); doc.num_concepts];
        for (key, ids) in doc.prereqs {
            let v: usize = key
                .parse()
                .map_err(|_| Error::Parse(format!("concept id {key:?} is not an integer")))?;
            if v >= doc.num_concepts {
                return Err(Error::IndexOutOfRange { index: v, len: doc.num_concepts });
            }
            lists[v] = ids;
        }
        Self::new(doc.num_concepts, lists)
    }

    pub fn to_json(&self) -> String {
        let prereqs = self
            .prereqs
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(v, l)| (v.to_string(), l.iter().map(|c| c.0).collect()))
            .collect();
        serde_json::to_string(&GraphDoc { num_concepts: self.num_concepts, prereqs })
            .expect("graph serializes")
    }
}

/// Rejects any prerequisite structure with a directed cycle; the error
/// lists the concepts on one cycle in traversal order.
pub fn validate_dag(num_concepts: usize, prereqs: &[Vec<ConceptId>]) -> Result<()> {
    if prereqs.len() != num_concepts {
        return Err(Error::DimensionMismatch { expected: num_concepts, actual: prereqs.len() });
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark = vec![Mark::New; num_concepts];
    for root in 0..num_concepts {
        if mark[root] != Mark::New {
            continue;
        }
        // Iterative DFS: (node, next child index).
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::Active;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&u) = prereqs[v].get(*next) {
                *next += 1;
                let u = u.0;
                if u >= num_concepts {
                    return Err(Error::IndexOutOfRange { index: u, len: num_concepts });
                }
                match mark[u] {
                    Mark::New => {
                        mark[u] = Mark::Active;
                        stack.push((u, 0));
                    }
                    Mark::Active => {
                        let start = stack.iter().position(|&(w, _)| w == u).expect("active node on stack");
                        return Err(Error::CycleDetected(stack[start..].iter().map(|&(w, _)| w).collect()));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                stack.pop();
            }
        }
    }
    Ok(())
}

/// Per-concept mastery, each entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasteryVector(Vec<f64>);

impl MasteryVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::MasteryOutOfRange { index: i, value: values[i] });
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// Clamps every entry into `[0, 1]`; NaN maps to 0.
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(values.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, v: ConceptId) -> f64 {
        self.0[v.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Sets one entry, clamped into `[0, 1]`.
    pub fn set(&mut self, v: ConceptId, value: f64) {
        self.0[v.0] = value.clamp(0.0, 1.0);
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Admissibility over the action space: concept actions first (index = concept
/// id), followed by always-available non-concept actions such as `hack`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleMask {
    concepts: Vec<bool>,
    extra: Vec<bool>,
}

impl FeasibleMask {
    pub fn new(concepts: Vec<bool>, extra: Vec<bool>) -> Self {
        Self { concepts, extra }
    }

    pub fn all(num_actions: usize) -> Self {
        Self { concepts: vec![true; num_actions], extra: Vec::new() }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { concepts: bits, extra: Vec::new() }
    }

    /// Appends `n` always-admissible non-concept actions.
    pub fn with_extra(mut self, n: usize) -> Self {
        self.extra.extend(std::iter::repeat_n(true, n));
        self
    }

    pub fn len(&self) -> usize {
        self.concepts.len() + self.extra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_admissible(&self, action: usize) -> bool {
        if action < self.concepts.len() {
            self.concepts[action]
        } else {
            self.extra.get(action - self.concepts.len()).copied().unwrap_or(false)
        }
    }

    /// Forbids one action (used by filters that treat an extra action as unsafe).
    pub fn forbid(&mut self, action: usize) {
        if action < self.concepts.len() {
            self.concepts[action] = false;
        } else if let Some(b) = self.extra.get_mut(action - self.concepts.len()) {
            *b = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.concepts.iter().chain(self.extra.iter()).copied()
    }

    pub fn admissible(&self) -> Vec<usize> {
        self.iter().enumerate().filter(|(_, b)| *b).map(|(a, _)| a).collect()
    }

    pub fn count(&self) -> usize {
        self.iter().filter(|b| *b).count()
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.iter().filter(|b| **b).count()
    }
}

/// `F_t = A_f(s_t) \ A_f(s_{t-1})`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontierSet {
    pub newly_admissible: Vec<usize>,
}

impl FrontierSet {
    pub fn is_empty(&self) -> bool {
        self.newly_admissible.is_empty()
    }

    pub fn len(&self) -> usize {
        self.newly_admissible.len()
    }

    pub fn contains(&self, action: usize) -> bool {
        self.newly_admissible.contains(&action)
    }
}

/// Concept-action feasibility for the given mastery. Threshold comparison is
/// inclusive (`K(u) >= theta_min`).
pub fn feasible_set(graph: &PrereqGraph, mastery: &MasteryVector, theta_min: f64) -> Result<FeasibleMask> {
    if mastery.len() != graph.num_concepts() {
        return Err(Error::DimensionMismatch { expected: graph.num_concepts(), actual: mastery.len() });
    }
    let concepts = (0..graph.num_concepts())
        .map(|v| graph.prereqs(ConceptId(v)).iter().all(|&u| mastery.get(u) >= theta_min))
        .collect();
    Ok(FeasibleMask::new(concepts, Vec::new()))
}

/// Actions admissible in `curr` but not in `prev`.
pub fn frontier(prev: &FeasibleMask, curr: &FeasibleMask) -> Result<FrontierSet> {
    if prev.len() != curr.len() {
        return Err(Error::DimensionMismatch { expected: prev.len(), actual: curr.len() });
    }
    let newly_admissible = prev
        .iter()
        .zip(curr.iter())
        .enumerate()
        .filter(|(_, (p, c))| *c && !*p)
        .map(|(a, _)| a)
        .collect();
    Ok(FrontierSet { newly_admissible })
}
