//! Attributed networks, the renormalized graph filter, attribute-vocabulary
//! alignment between two networks, and the label-rate / common-attribute
//! experiment controls.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// One network domain: graph, named sparse attributes and (partial) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedNetwork {
    adjacency: CsrMatrix,
    vocab: Vec<String>,
    features: CsrMatrix,
    labels: Vec<Vec<usize>>,
    label_count: usize,
    labeled: Vec<usize>,
}

impl AttributedNetwork {
    /// Validates and assembles a network.
    ///
    /// `labels[i]` is the (possibly empty) ground-truth label set of node `i`;
    /// `labeled` lists the nodes whose labels are observed during training and
    /// must only contain nodes with non-empty label sets.
    pub fn new(
        adjacency: CsrMatrix,
        vocab: Vec<String>,
        features: CsrMatrix,
        mut labels: Vec<Vec<usize>>,
        label_count: usize,
        mut labeled: Vec<usize>,
    ) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n {
            return Err(Error::Shape(format!(
                "adjacency must be square, got {:?}",
                adjacency.shape()
            )));
        }
        if let Some((r, c, v)) = adjacency.triplets().find(|t| t.2 < 0.0) {
            return Err(Error::Data(format!(
                "negative edge weight {v} on ({r}, {c})"
            )));
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Data("adjacency is not symmetric".into()));
        }
        if features.shape() != (n, vocab.len()) {
            return Err(Error::Shape(format!(
                "features {:?} for {n} nodes and {} attributes",
                features.shape(),
                vocab.len()
            )));
        }
        check_unique(&vocab)?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} label sets for {n} nodes",
                labels.len()
            )));
        }
        for set in &mut labels {
            set.sort_unstable();
            set.dedup();
            if let Some(&bad) = set.iter().find(|&&l| l >= label_count) {
                return Err(Error::LabelRange {
                    label: bad,
                    labels: label_count,
                });
            }
        }
        labeled.sort_unstable();
        labeled.dedup();
        if let Some(&bad) = labeled.iter().find(|&&i| i >= n || labels[i].is_empty()) {
            return Err(Error::Data(format!(
                "node {bad} is marked labeled but has no label"
            )));
        }
        Ok(Self {
            adjacency,
            vocab,
            features,
            labels,
            label_count,
            labeled,
        })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn features(&self) -> &CsrMatrix {
        &self.features
    }

    /// Ground-truth label sets (empty for nodes without a known label).
    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    /// Nodes whose labels are observed during training, ascending.
    pub fn labeled_set(&self) -> &[usize] {
        &self.labeled
    }

    /// Nodes carrying a ground-truth label, ascending.
    pub fn nodes_with_labels(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&i| !self.labels[i].is_empty())
            .collect()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|s| !s.is_empty())
    }

    pub fn with_labeled_set(&self, labeled: Vec<usize>) -> Result<Self> {
        Self::new(
            self.adjacency.clone(),
            self.vocab.clone(),
            self.features.clone(),
            self.labels.clone(),
            self.label_count,
            labeled,
        )
    }

    fn with_label_count(mut self, label_count: usize) -> Self {
        debug_assert!(label_count >= self.label_count);
        self.label_count = label_count;
        self
    }

    /// Re-indexes the features onto `vocab`, which must contain every
    /// attribute of this network.
    fn reindexed(&self, vocab: &[String]) -> Result<Self> {
        let position: HashMap<&str, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, name)| (name.as_str(), i))
            .collect();
        let mut map = Vec::with_capacity(self.vocab.len());
        for name in &self.vocab {
            match position.get(name.as_str()) {
                Some(&i) => map.push(i),
                None => {
                    return Err(Error::Data(format!(
                        "attribute `{name}` missing from target vocabulary"
                    )))
                }
            }
        }
        let triplets = self
            .features
            .triplets()
            .map(|(r, c, v)| (r, map[c], v))
            .collect();
        let features = CsrMatrix::from_triplets(self.node_count(), vocab.len(), triplets)?;
        Ok(Self {
            features,
            vocab: vocab.to_vec(),
            ..self.clone()
        })
    }

    /// Maps this network onto a trained model's input vocabulary and label
    /// space. Attributes in `ignore` are dropped; any other attribute outside
    /// `vocab` is an error.
    pub fn project_onto(
        &self,
        vocab: &[String],
        ignore: &BTreeSet<String>,
        label_count: usize,
    ) -> Result<Self> {
        let net = self.without_attributes(ignore);
        let known: BTreeSet<&str> = vocab.iter().map(String::as_str).collect();
        if let Some(name) = net.vocab.iter().find(|n| !known.contains(n.as_str())) {
            return Err(Error::Shape(format!(
                "attribute `{name}` is not one of the model's {} input attributes",
                vocab.len()
            )));
        }
        let mut out = net.reindexed(vocab)?;
        if let Some(&bad) = out.labels.iter().flatten().find(|&&l| l >= label_count) {
            return Err(Error::LabelRange {
                label: bad,
                labels: label_count,
            });
        }
        out.label_count = label_count;
        Ok(out)
    }

    /// Drops the named attributes from the vocabulary and feature columns.
    fn without_attributes(&self, drop: &BTreeSet<String>) -> Self {
        let keep: Vec<usize> = (0..self.vocab.len())
            .filter(|&i| !drop.contains(&self.vocab[i]))
            .collect();
        Self {
            features: self.features.select_columns(&keep),
            vocab: keep.iter().map(|&i| self.vocab[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// 0/1 indicator matrix of the ground-truth labels of `nodes`.
    pub fn label_matrix(&self, nodes: &[usize]) -> Array2<f64> {
        let mut y = Array2::zeros((nodes.len(), self.label_count));
        for (row, &node) in nodes.iter().enumerate() {
            for &l in &self.labels[node] {
                y[[row, l]] = 1.0;
            }
        }
        y
    }
}

fn check_unique(vocab: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for name in vocab {
        if !seen.insert(name.as_str()) {
            return Err(Error::Data(format!("duplicate attribute name `{name}`")));
        }
    }
    Ok(())
}

/// The renormalized adjacency `D^-1/2 (A + I) D^-1/2` and the number of
/// times it is applied per graph convolution.
#[derive(Debug, Clone)]
pub struct GraphFilter {
    matrix: Arc<CsrMatrix>,
    exponent: usize,
}

impl GraphFilter {
    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.matrix
    }

    pub fn exponent(&self) -> usize {
        self.exponent
    }

    /// Same filter, applied `exponent` times. Exponent 0 is the identity
    /// (no smoothing).
    pub fn with_exponent(&self, exponent: usize) -> Self {
        Self {
            matrix: Arc::clone(&self.matrix),
            exponent,
        }
    }

    /// `Â^k · h` through `k` sparse products; the dense power is never formed.
    pub fn apply(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let (rows, _) = tape.shape(h);
        if rows != self.matrix.rows() {
            return Err(Error::Shape(format!(
                "filter over {} nodes applied to {rows} rows",
                self.matrix.rows()
            )));
        }
        let mut out = h;
        for _ in 0..self.exponent {
            out = tape.spmm(&self.matrix, out)?;
        }
        Ok(out)
    }
}

/// Builds `Â = D̃^-1/2 (A + I) D̃^-1/2` with `D̃` the degree matrix of `A + I`.
pub fn renormalized_filter(net: &AttributedNetwork) -> Result<GraphFilter> {
    let adj = net.adjacency();
    let n = adj.rows();
    let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(adj.nnz() + n);
    let mut has_diag = vec![false; n];
    for (r, c, v) in adj.triplets() {
        if v < 0.0 {
            return Err(Error::Data(format!(
                "negative edge weight {v} on ({r}, {c})"
            )));
        }
        if r == c {
            has_diag[r] = true;
            entries.push((r, c, v + 1.0));
        } else {
            entries.push((r, c, v));
        }
    }
    for (i, present) in has_diag.iter().enumerate() {
        if !present {
            entries.push((i, i, 1.0));
        }
    }
    let mut degree = vec![0.0; n];
    for &(r, _, v) in &entries {
        degree[r] += v;
    }
    for e in &mut entries {
        e.2 /= (degree[e.0] * degree[e.1]).sqrt();
    }
    Ok(GraphFilter {
        matrix: Arc::new(CsrMatrix::from_triplets(n, n, entries)?),
        exponent: 1,
    })
}

/// Largest absolute eigenvalue estimate by power iteration from a fixed
/// positive start vector.
pub fn spectral_radius(m: &CsrMatrix, iterations: usize) -> f64 {
    let n = m.rows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array2::from_shape_fn((n, 1), |(i, _)| 1.0 + (i % 7) as f64 * 0.1);
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let w = m.mul_dense(&v.view()).expect("square matrix");
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let prev = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = norm / prev;
        v = w / norm;
    }
    estimate
}

/// Source and target networks over one shared attribute vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: AttributedNetwork,
    pub target: AttributedNetwork,
    source_attributes: BTreeSet<String>,
    target_attributes: BTreeSet<String>,
}

impl DomainPair {
    /// The union vocabulary shared by both feature matrices.
    pub fn union_vocab(&self) -> &[String] {
        self.source.vocab()
    }

    /// Number of attribute columns `c`.
    pub fn attribute_count(&self) -> usize {
        self.union_vocab().len()
    }

    pub fn label_count(&self) -> usize {
        self.source.label_count()
    }

    /// Attributes each network originally carried, before the union.
    pub fn source_attributes(&self) -> &BTreeSet<String> {
        &self.source_attributes
    }

    pub fn target_attributes(&self) -> &BTreeSet<String> {
        &self.target_attributes
    }

    /// `|X^s ∩ X^t| / |X^s ∪ X^t|` over the original vocabularies.
    pub fn common_attribute_rate(&self) -> f64 {
        common_rate(&self.source_attributes, &self.target_attributes)
    }

    pub fn with_labeled_sets(&self, source: Vec<usize>, target: Vec<usize>) -> Result<Self> {
        Ok(Self {
            source: self.source.with_labeled_set(source)?,
            target: self.target.with_labeled_set(target)?,
            ..self.clone()
        })
    }
}

fn common_rate(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Re-indexes both networks onto the sorted union of their attribute names.
/// Attributes a network lacks become all-zero columns.
pub fn align_attributes(
    source: &AttributedNetwork,
    target: &AttributedNetwork,
) -> Result<DomainPair> {
    check_unique(source.vocab())?;
    check_unique(target.vocab())?;
    let source_attributes: BTreeSet<String> = source.vocab().iter().cloned().collect();
    let target_attributes: BTreeSet<String> = target.vocab().iter().cloned().collect();
    let union: Vec<String> = source_attributes
        .union(&target_attributes)
        .cloned()
        .collect();
    let labels = source.label_count().max(target.label_count());
    Ok(DomainPair {
        source: source.reindexed(&union)?.with_label_count(labels),
        target: target.reindexed(&union)?.with_label_count(labels),
        source_attributes,
        target_attributes,
    })
}

/// Draws `round(rate · n)` labeled nodes uniformly among nodes with labels,
/// then swap-repairs the sample until every label of the label space occurs.
///
/// Returns the sample sorted ascending. Deterministic per `seed`.
pub fn sample_labeled(net: &AttributedNetwork, rate: f64, seed: u64) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("label rate {rate} outside (0, 1]")));
    }
    let n = net.node_count();
    let want = (rate * n as f64).round() as usize;
    let candidates = net.nodes_with_labels();
    if want > candidates.len() {
        return Err(Error::Config(format!(
            "label rate {rate} asks for {want} nodes but only {} are labeled",
            candidates.len()
        )));
    }
    let labels = net.labels();
    let label_count = net.label_count();
    let mut carriers: Vec<Vec<usize>> = vec![Vec::new(); label_count];
    for &i in &candidates {
        for &l in &labels[i] {
            carriers[l].push(i);
        }
    }
    if let Some(missing) = carriers.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("label {missing} appears on no node")));
    }
    let minimum = greedy_cover_size(labels, &candidates, label_count);
    if want < minimum {
        return Err(Error::Config(format!(
            "label rate {rate} gives {want} nodes; covering all {label_count} labels needs at least {minimum}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = candidates.clone();
    pool.shuffle(&mut rng);
    let mut chosen: Vec<usize> = pool[..want].to_vec();
    let mut in_sample = vec![false; n];
    for &i in &chosen {
        in_sample[i] = true;
    }
    let mut coverage = vec![0usize; label_count];
    for &i in &chosen {
        for &l in &labels[i] {
            coverage[l] += 1;
        }
    }

    for label in 0..label_count {
        if coverage[label] > 0 {
            continue;
        }
        let incoming: Vec<usize> = carriers[label]
            .iter()
            .copied()
            .filter(|&i| !in_sample[i])
            .collect();
        let add = incoming[rng.gen_range(0..incoming.len())];
        // A node may leave only if every label it carries stays covered.
        let removable: Vec<usize> = (0..chosen.len())
            .filter(|&k| labels[chosen[k]].iter().all(|&l| coverage[l] > 1))
            .collect();
        if removable.is_empty() {
            return Err(Error::Config(format!(
                "label rate {rate} gives {want} nodes; could not cover all {label_count} labels"
            )));
        }
        let slot = removable[rng.gen_range(0..removable.len())];
        let out = chosen[slot];
        for &l in &labels[out] {
            coverage[l] -= 1;
        }
        in_sample[out] = false;
        for &l in &labels[add] {
            coverage[l] += 1;
        }
        in_sample[add] = true;
        chosen[slot] = add;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Size of a greedy set cover of all labels by nodes.
fn greedy_cover_size(labels: &[Vec<usize>], candidates: &[usize], label_count: usize) -> usize {
    let mut covered = vec![false; label_count];
    let mut remaining = label_count;
    let mut count = 0;
    while remaining > 0 {
        let best = candidates
            .iter()
            .max_by_key(|&&i| labels[i].iter().filter(|&&l| !covered[l]).count());
        let Some(&best) = best else { break };
        let gain = labels[best].iter().filter(|&&l| !covered[l]).count();
        if gain == 0 {
            break;
        }
        for &l in &labels[best] {
            if !covered[l] {
                covered[l] = true;
                remaining -= 1;
            }
        }
        count += 1;
    }
    count
}

/// Deletes uniformly chosen shared attributes from both networks until the
/// common-attribute rate first drops to `rate` or below. Exclusive
/// attributes are never touched.
pub fn reduce_common_attributes(pair: &DomainPair, rate: f64, seed: u64) -> Result<DomainPair> {
    let current = pair.common_attribute_rate();
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "common attribute rate {rate} outside [0, 1]"
        )));
    }
    if rate > current {
        return Err(Error::Config(format!(
            "requested common attribute rate {rate} exceeds current rate {current:.4}"
        )));
    }
    let mut shared: Vec<String> = pair
        .source_attributes
        .intersection(&pair.target_attributes)
        .cloned()
        .collect();
    let union = pair
        .source_attributes
        .union(&pair.target_attributes)
        .count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shared.shuffle(&mut rng);

    let mut remaining_shared = shared.len();
    let mut remaining_union = union;
    let mut deleted = 0;
    while remaining_union > 0 && (remaining_shared as f64 / remaining_union as f64) > rate {
        remaining_shared -= 1;
        remaining_union -= 1;
        deleted += 1;
    }
    let drop: BTreeSet<String> = shared[..deleted].iter().cloned().collect();
    let source_attributes = &pair.source_attributes - &drop;
    let target_attributes = &pair.target_attributes - &drop;
    Ok(DomainPair {
        source: pair.source.without_attributes(&drop),
        target: pair.target.without_attributes(&drop),
        source_attributes,
        target_attributes,
    })
}
