//! Decision-tree surrogate over concept logits.
//!
//! The tree is grown greedily on entropy information gain. Its targets are the
//! classifier's own predictions, so agreement with the classifier (fidelity)
//! is the quantity of interest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Csv;
use crate::net::{LayeredNetwork, Tensor};
use crate::probe::{concept_logit, ConceptModel};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// One row of concept logits per sample.
    pub rows: Vec<Vec<f64>>,
    /// `argmax f(x)` per sample.
    pub targets: Vec<usize>,
    /// Concept id of each column.
    pub concept_ids: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Columns for `ids`, in that order.
    pub fn select_concepts(&self, ids: &[usize]) -> Result<Self> {
        let cols = ids
            .iter()
            .map(|id| {
                self.concept_ids
                    .iter()
                    .position(|c| c == id)
                    .ok_or_else(|| Error::config("concepts", format!("concept {id} has no feature column")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows: self.rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect(),
            targets: self.targets.clone(),
            concept_ids: ids.to_vec(),
            num_classes: self.num_classes,
        })
    }
}

/// Concept-logit features for every input; column order follows `models`.
pub fn build_features(models: &[ConceptModel], inputs: &[Tensor], net: &LayeredNetwork, split: usize) -> Result<FeatureMatrix> {
    if let Some(m) = models.iter().find(|m| m.split != split || m.mode != models[0].mode) {
        return Err(Error::ActivationMismatch(format!(
            "concept {} was fit at split {} ({:?}); features need split {split} and one shared mode",
            m.concept_id, m.split, m.mode
        )));
    }
    let mut rows = Vec::with_capacity(inputs.len());
    let mut targets = Vec::with_capacity(inputs.len());
    for x in inputs {
        let a = net.forward_split(x, split)?;
        rows.push(models.iter().map(|m| concept_logit(m, &a)).collect::<Result<Vec<_>>>()?);
        targets.push(crate::net::argmax(&net.forward_from(&a, split)?));
    }
    Ok(FeatureMatrix {
        rows,
        targets,
        concept_ids: models.iter().map(|m| m.concept_id).collect(),
        num_classes: net.num_classes(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        /// Column index into the feature row.
        feature: usize,
        concept_id: usize,
        threshold: f64,
        gain: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        class: usize,
        counts: Vec<usize>,
    },
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTree {
    pub root: Node,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub concept_ids: Vec<usize>,
    pub num_classes: usize,
}

/// Shannon entropy in bits of a class-count vector.
pub fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

struct Grower<'a> {
    fm: &'a FeatureMatrix,
    max_depth: usize,
    min_leaf: usize,
}

impl Grower<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.fm.num_classes];
        for &i in idx {
            c[self.fm.targets[i]] += 1;
        }
        c
    }

    fn grow(&self, idx: Vec<usize>, depth: usize) -> Node {
        let counts = self.counts(&idx);
        let pure = counts.iter().filter(|c| **c > 0).count() <= 1;
        if depth >= self.max_depth || pure || idx.len() < 2 * self.min_leaf.max(1) {
            return Node::Leaf {
                class: majority(&counts),
                counts,
            };
        }
        match self.best_split(&idx, &counts) {
            Some((feature, threshold, gain)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.fm.rows[i][feature] <= threshold);
                Node::Split {
                    feature,
                    concept_id: self.fm.concept_ids[feature],
                    threshold,
                    gain,
                    left: Box::new(self.grow(l, depth + 1)),
                    right: Box::new(self.grow(r, depth + 1)),
                }
            }
            None => Node::Leaf {
                class: majority(&counts),
                counts,
            },
        }
    }

    // Highest-gain split; ties keep the lowest column, then the smallest threshold.
    fn best_split(&self, idx: &[usize], counts: &[usize]) -> Option<(usize, f64, f64)> {
        let n = idx.len();
        let parent = entropy(counts);
        let min_leaf = self.min_leaf.max(1);
        let mut best: Option<(usize, f64, f64)> = None;
        let n_features = self.fm.concept_ids.len();
        for f in 0..n_features {
            let mut order: Vec<usize> = idx.to_vec();
            order.sort_by(|a, b| self.fm.rows[*a][f].total_cmp(&self.fm.rows[*b][f]));
            let mut left = vec![0usize; self.fm.num_classes];
            let mut right = counts.to_vec();
            for k in 0..n - 1 {
                let cls = self.fm.targets[order[k]];
                left[cls] += 1;
                right[cls] -= 1;
                let lo = self.fm.rows[order[k]][f];
                let hi = self.fm.rows[order[k + 1]][f];
                if lo == hi {
                    continue;
                }
                let n_left = k + 1;
                if n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let child = (n_left as f64 * entropy(&left) + (n - n_left) as f64 * entropy(&right)) / n as f64;
                let gain = parent - child;
                if gain <= 1e-12 {
                    continue;
                }
                if best.is_none_or(|(_, _, g)| gain > g) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some((f, threshold, gain));
                }
            }
        }
        best
    }
}

pub fn fit_tree(fm: &FeatureMatrix, max_depth: usize, min_leaf: usize) -> Result<SurrogateTree> {
    if fm.is_empty() {
        return Err(Error::Empty("feature matrix".into()));
    }
    let grower = Grower { fm, max_depth, min_leaf };
    Ok(SurrogateTree {
        root: grower.grow((0..fm.len()).collect(), 0),
        max_depth,
        min_leaf,
        concept_ids: fm.concept_ids.clone(),
        num_classes: fm.num_classes,
    })
}

impl SurrogateTree {
    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn predict(&self, w: &[f64]) -> Result<usize> {
        if w.len() != self.concept_ids.len() {
            return Err(Error::FeatureLength {
                expected: self.concept_ids.len(),
                got: w.len(),
            });
        }
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { class, .. } => return Ok(*class),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if w[*feature] <= *threshold { left } else { right },
            }
        }
    }

    /// Indented plain-text rendering, one line per node.
    pub fn render(&self, name: impl Fn(usize) -> String) -> String {
        fn walk(node: &Node, depth: usize, name: &dyn Fn(usize) -> String, out: &mut String) {
            let pad = "|   ".repeat(depth);
            match node {
                Node::Leaf { class, counts } => {
                    let n: usize = counts.iter().sum();
                    out.push_str(&format!("{pad}class {class} (n={n}, counts={counts:?})\n"));
                }
                Node::Split {
                    concept_id,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    out.push_str(&format!("{pad}{} <= {threshold:.6}\n", name(*concept_id)));
                    walk(left, depth + 1, name, out);
                    out.push_str(&format!("{pad}{} > {threshold:.6}\n", name(*concept_id)));
                    walk(right, depth + 1, name, out);
                }
            }
        }
        let mut out = String::new();
        walk(&self.root, 0, &name, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub agreement: f64,
    /// Recall per class against the classifier's labels; `None` if a class is absent.
    pub recall: Vec<Option<f64>>,
}

pub fn fidelity(tree: &SurrogateTree, fm: &FeatureMatrix) -> Result<Fidelity> {
    if fm.is_empty() {
        return Err(Error::Empty("feature matrix".into()));
    }
    let mut agree = 0usize;
    let mut hits = vec![0usize; fm.num_classes];
    let mut totals = vec![0usize; fm.num_classes];
    for (row, &t) in fm.rows.iter().zip(&fm.targets) {
        let p = tree.predict(row)?;
        totals[t] += 1;
        if p == t {
            agree += 1;
            hits[t] += 1;
        }
    }
    Ok(Fidelity {
        agreement: agree as f64 / fm.len() as f64,
        recall: hits
            .iter()
            .zip(&totals)
            .map(|(h, n)| (*n > 0).then(|| *h as f64 / *n as f64))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub n_concepts: usize,
    pub recall: f64,
    pub agreement: f64,
}

/// Number of concepts kept for a fraction of `k`: `⌈fraction·k⌉`, at least 1.
pub fn prefix_size(fraction: f64, k: usize) -> usize {
    // guard against 0.3 * 10 = 3.0000000000000004
    ((fraction * k as f64 - 1e-9).ceil() as usize).clamp(1, k)
}

/// Refits the tree on growing prefixes of `ranked_ids` and scores each on
/// held-out rows. Recall is for `positive_class` against the classifier's labels.
pub fn topk_sweep(
    ranked_ids: &[usize],
    fractions: &[f64],
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    max_depth: usize,
    min_leaf: usize,
    positive_class: usize,
) -> Result<Vec<SweepPoint>> {
    if fractions.is_empty() {
        return Err(Error::config("fractions", "must be nonempty"));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::config("fractions", format!("{f} is outside (0, 1]")));
    }
    fractions
        .iter()
        .map(|&fraction| {
            let n = prefix_size(fraction, ranked_ids.len());
            let ids = &ranked_ids[..n];
            let tree = fit_tree(&train.select_concepts(ids)?, max_depth, min_leaf)?;
            let fid = fidelity(&tree, &test.select_concepts(ids)?)?;
            Ok(SweepPoint {
                fraction,
                n_concepts: n,
                recall: fid.recall.get(positive_class).copied().flatten().unwrap_or(f64::NAN),
                agreement: fid.agreement,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> Csv {
    let mut csv = Csv::with_header(&["fraction", "n_concepts", "recall", "agreement"]);
    for p in points {
        csv.row(&[p.fraction.to_string(), p.n_concepts.to_string(), p.recall.to_string(), p.agreement.to_string()]);
    }
    csv
}
