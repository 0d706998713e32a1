//! Three-file TSV storage for attributed networks and a paired synthetic
//! generator with controllable domain shift.
//!
//! File layout (UTF-8, `#` lines are comments):
//!
//! * edges: `u<TAB>v[<TAB>w]`, 0-based node ids, weight 1 when omitted. An
//!   optional `# nodes=N` line fixes the node count.
//! * features: `node<TAB>attribute<TAB>value`. An optional
//!   `# vocab<TAB>name<TAB>name...` line fixes the attribute order and keeps
//!   attributes that no node carries.
//! * labels: `node<TAB>label[,label...]`. An optional `# labels=L` line fixes
//!   the size of the label space.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{align_attributes, sample_labeled, AttributedNetwork, DomainPair};
use crate::sparse::CsrMatrix;

/// Paths of the three files describing one network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
}

impl NetworkPaths {
    /// `<dir>/<prefix>.edges.tsv`, `.features.tsv`, `.labels.tsv`.
    pub fn in_dir(dir: &Path, prefix: &str) -> Self {
        Self {
            edges: dir.join(format!("{prefix}.edges.tsv")),
            features: dir.join(format!("{prefix}.features.tsv")),
            labels: dir.join(format!("{prefix}.labels.tsv")),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_id(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} {field:?}")))
}

fn parse_value(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad number {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

struct FilePaths<'a> {
    edges: &'a Path,
    features: &'a Path,
    labels: &'a Path,
}

/// Numbered non-empty lines, with `#` comment lines passed to `header`.
fn lines<'a>(
    text: &'a str,
    mut header: impl FnMut(usize, &'a str) -> Result<()>,
) -> Result<Vec<(usize, &'a str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            header(i + 1, comment)?;
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

fn count_header(path: &Path, line: usize, comment: &str, key: &str) -> Result<Option<usize>> {
    match comment.trim().strip_prefix(key) {
        Some(rest) => match rest.strip_prefix('=') {
            Some(v) => parse_id(path, line, v, key).map(Some),
            None => Ok(None),
        },
        None => Ok(None),
    }
}

/// Reads one network. Every node with a label line becomes part of the
/// labeled set.
pub fn load_network(paths: &NetworkPaths) -> Result<AttributedNetwork> {
    load_network_files(&paths.edges, &paths.features, Some(&paths.labels))
}

/// Like [`load_network`]; without a labels file every node is unlabeled.
pub fn load_network_files(
    edges: &Path,
    features: &Path,
    labels: Option<&Path>,
) -> Result<AttributedNetwork> {
    let edge_text = read(edges)?;
    let feat_text = read(features)?;
    let label_text = match labels {
        Some(p) => read(p)?,
        None => String::new(),
    };
    let paths = FilePaths {
        edges,
        features,
        labels: labels.unwrap_or(Path::new("")),
    };

    let mut declared_nodes = None;
    let edge_lines = lines(&edge_text, |line, c| {
        if let Some(n) = count_header(paths.edges, line, c, "nodes")? {
            declared_nodes = Some(n);
        }
        Ok(())
    })?;
    let mut edges: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for &(line, text) in &edge_lines {
        let fields: Vec<&str> = text.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(paths.edges, line, "expected u<TAB>v[<TAB>w]"));
        }
        let u = parse_id(paths.edges, line, fields[0], "node id")?;
        let v = parse_id(paths.edges, line, fields[1], "node id")?;
        let w = match fields.get(2) {
            Some(f) => parse_value(paths.edges, line, f)?,
            None => 1.0,
        };
        if w < 0.0 {
            return Err(parse_err(
                paths.edges,
                line,
                format!("negative edge weight {w}"),
            ));
        }
        let key = (u.min(v), u.max(v));
        let slot = edges.entry(key).or_insert((w, line));
        if w > slot.0 {
            *slot = (w, line);
        }
    }

    let mut vocab_header: Option<Vec<String>> = None;
    let feat_lines = lines(&feat_text, |_, c| {
        if let Some(rest) = c.strip_prefix(" vocab").or_else(|| c.strip_prefix("vocab")) {
            let names: Vec<String> = rest
                .split('\t')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            vocab_header = Some(names);
        }
        Ok(())
    })?;
    let mut entries: Vec<(usize, usize, &str, f64)> = Vec::new();
    for &(line, text) in &feat_lines {
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() != 3 || fields[1].is_empty() {
            return Err(parse_err(
                paths.features,
                line,
                "expected node<TAB>attribute<TAB>value",
            ));
        }
        let node = parse_id(paths.features, line, fields[0], "node id")?;
        let value = parse_value(paths.features, line, fields[2])?;
        entries.push((line, node, fields[1], value));
    }

    let mut n = declared_nodes.unwrap_or(0);
    if declared_nodes.is_none() {
        for &(_, v) in edges.keys() {
            n = n.max(v + 1);
        }
        for &(_, node, _, _) in &entries {
            n = n.max(node + 1);
        }
    }
    let range = |path: &Path, line: usize, id: usize| Error::Range {
        path: path.to_path_buf(),
        line,
        id,
        nodes: n,
    };
    for (&(_, v), &(_, line)) in &edges {
        if v >= n {
            return Err(range(paths.edges, line, v));
        }
    }

    let vocab: Vec<String> = match vocab_header {
        Some(names) => names,
        None => entries
            .iter()
            .map(|e| e.2.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let column: HashMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    if column.len() != vocab.len() {
        return Err(Error::Data(format!(
            "{}: duplicate attribute names in vocab header",
            paths.features.display()
        )));
    }
    let mut seen = HashMap::new();
    let mut triplets = Vec::with_capacity(entries.len());
    for &(line, node, name, value) in &entries {
        if node >= n {
            return Err(range(paths.features, line, node));
        }
        let Some(&col) = column.get(name) else {
            return Err(parse_err(
                paths.features,
                line,
                format!("attribute {name:?} missing from vocab header"),
            ));
        };
        if let Some(first) = seen.insert((node, col), line) {
            return Err(parse_err(
                paths.features,
                line,
                format!(
                    "duplicate entry for node {node} attribute {name:?} (first on line {first})"
                ),
            ));
        }
        triplets.push((node, col, value));
    }
    let features = CsrMatrix::from_triplets(n, vocab.len(), triplets)?;

    let mut declared_labels = None;
    let label_lines = lines(&label_text, |line, c| {
        if let Some(l) = count_header(paths.labels, line, c, "labels")? {
            declared_labels = Some(l);
        }
        Ok(())
    })?;
    let mut labels = vec![Vec::new(); n];
    let mut max_label = None;
    for &(line, text) in &label_lines {
        let Some((node, list)) = text.split_once('\t') else {
            return Err(parse_err(
                paths.labels,
                line,
                "expected node<TAB>label[,label...]",
            ));
        };
        let node = parse_id(paths.labels, line, node, "node id")?;
        if node >= n {
            return Err(range(paths.labels, line, node));
        }
        for item in list.split(',') {
            let l = parse_id(paths.labels, line, item, "label")?;
            max_label = Some(max_label.map_or(l, |m: usize| m.max(l)));
            labels[node].push(l);
        }
    }
    let label_count = match (declared_labels, max_label) {
        (Some(l), _) => l,
        (None, Some(m)) => m + 1,
        (None, None) => 0,
    };

    let mut adj = Vec::with_capacity(edges.len() * 2);
    for (&(u, v), &(w, _)) in &edges {
        adj.push((u, v, w));
        if u != v {
            adj.push((v, u, w));
        }
    }
    let adjacency = CsrMatrix::from_triplets(n, n, adj)?;
    let labeled: Vec<usize> = (0..n).filter(|&i| !labels[i].is_empty()).collect();
    AttributedNetwork::new(adjacency, vocab, features, labels, label_count, labeled)
}

/// Canonical text of the three files: edges by `(min, max)` pair, features by
/// `(node, attribute name)`, labels by node.
pub fn network_files(net: &AttributedNetwork) -> (String, String, String) {
    let n = net.node_count();
    let mut edges = format!("# nodes={n}\n");
    for (u, v, w) in net.adjacency().triplets() {
        if u > v {
            continue;
        }
        if w == 1.0 {
            let _ = writeln!(edges, "{u}\t{v}");
        } else {
            let _ = writeln!(edges, "{u}\t{v}\t{w}");
        }
    }

    let vocab = net.vocab();
    let mut features = String::from("# vocab");
    for name in vocab {
        features.push('\t');
        features.push_str(name);
    }
    features.push('\n');
    for r in 0..n {
        let (cols, vals) = net.features().row(r);
        let mut row: Vec<(&str, f64)> = cols
            .iter()
            .zip(vals)
            .map(|(&c, &v)| (vocab[c].as_str(), v))
            .collect();
        row.sort_by(|a, b| a.0.cmp(b.0));
        for (name, v) in row {
            let _ = writeln!(features, "{r}\t{name}\t{v}");
        }
    }

    let mut labels = format!("# labels={}\n", net.label_count());
    for (i, set) in net.labels().iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let list: Vec<String> = set.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(labels, "{i}\t{}", list.join(","));
    }
    (edges, features, labels)
}

/// Writes the network's ground-truth labels; which nodes are observed during
/// training is not part of the file format.
pub fn save_network(net: &AttributedNetwork, paths: &NetworkPaths) -> Result<()> {
    let (edges, features, labels) = network_files(net);
    for (path, text) in [
        (&paths.edges, edges),
        (&paths.features, features),
        (&paths.labels, labels),
    ] {
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Per-domain attribute activation probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeRates {
    /// Probability that a node turns on each signature attribute of its labels.
    pub signature: f64,
    /// Probability that a node turns on any other attribute.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Nodes per network.
    pub nodes: usize,
    pub labels: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Signature attributes per label.
    pub signature_attributes: usize,
    pub noise_attributes: usize,
    pub source: AttributeRates,
    pub target: AttributeRates,
    /// Requested `|X^s ∩ X^t| / |X^s ∪ X^t|`.
    pub common_rate: f64,
    /// Probability that a node carries a second, random label.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            nodes: 1000,
            labels: 5,
            p_in: 0.02,
            p_out: 0.001,
            signature_attributes: 20,
            noise_attributes: 100,
            source: AttributeRates {
                signature: 0.3,
                noise: 0.02,
            },
            target: AttributeRates {
                signature: 0.1,
                noise: 0.02,
            },
            common_rate: 0.5,
            overlap: 0.0,
            seed: 0,
        }
    }
}

/// Tolerance on the achieved common-attribute rate.
pub const RATE_TOLERANCE: f64 = 0.02;

impl SyntheticConfig {
    pub fn vocab_size(&self) -> usize {
        self.labels * self.signature_attributes + self.noise_attributes
    }

    /// Number of target attributes renamed to target-only names, chosen so
    /// that `(V - k) / (V + k)` is closest to the requested rate.
    pub fn renamed_attributes(&self) -> usize {
        let v = self.vocab_size() as f64;
        let r = self.common_rate;
        (v * (1.0 - r) / (1.0 + r)).round() as usize
    }

    pub fn achieved_rate(&self) -> f64 {
        let v = self.vocab_size();
        let k = self.renamed_attributes().min(v);
        if v + k == 0 {
            return 1.0;
        }
        (v - k) as f64 / (v + k) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.labels == 0 || self.nodes < self.labels {
            return bad(format!(
                "need at least one node per label ({} nodes, {} labels)",
                self.nodes, self.labels
            ));
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return bad(format!(
                "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            ));
        }
        for (name, q) in [
            ("source signature", self.source.signature),
            ("source noise", self.source.noise),
            ("target signature", self.target.signature),
            ("target noise", self.target.noise),
            ("overlap", self.overlap),
        ] {
            if !(0.0..=1.0).contains(&q) {
                return bad(format!("{name} probability {q} outside [0, 1]"));
            }
        }
        if !(self.common_rate > 0.0 && self.common_rate <= 1.0) {
            return bad(format!("common rate {} outside (0, 1]", self.common_rate));
        }
        if self.vocab_size() == 0 {
            return bad("no attributes".into());
        }
        let achieved = self.achieved_rate();
        if (achieved - self.common_rate).abs() > RATE_TOLERANCE {
            return bad(format!(
                "common rate {} is not reachable with {} attributes (closest {achieved:.4})",
                self.common_rate,
                self.vocab_size()
            ));
        }
        Ok(())
    }
}

fn domain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn generate_network(
    cfg: &SyntheticConfig,
    rates: AttributeRates,
    names: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<AttributedNetwork> {
    let n = cfg.nodes;
    let l = cfg.labels;
    // Equal blocks over a shuffled node order.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut block = vec![0usize; n];
    for (pos, &node) in order.iter().enumerate() {
        block[node] = pos * l / n;
    }
    let mut labels: Vec<Vec<usize>> = block.iter().map(|&b| vec![b]).collect();
    if l > 1 {
        for set in labels.iter_mut() {
            if rng.gen::<f64>() < cfg.overlap {
                let mut extra = rng.gen_range(0..l - 1);
                if extra >= set[0] {
                    extra += 1;
                }
                set.push(extra);
            }
        }
    }

    let mut adj = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block[u] == block[v] {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.gen::<f64>() < p {
                adj.push((u, v, 1.0));
                adj.push((v, u, 1.0));
            }
        }
    }

    let s = cfg.signature_attributes;
    let v = cfg.vocab_size();
    let mut triplets = Vec::new();
    let mut signature = vec![false; v];
    for (node, set) in labels.iter().enumerate() {
        signature.iter_mut().for_each(|b| *b = false);
        for &lab in set {
            signature[lab * s..(lab + 1) * s]
                .iter_mut()
                .for_each(|b| *b = true);
        }
        for (a, &sig) in signature.iter().enumerate() {
            let q = if sig { rates.signature } else { rates.noise };
            if rng.gen::<f64>() < q {
                triplets.push((node, a, 1.0));
            }
        }
    }
    let adjacency = CsrMatrix::from_triplets(n, n, adj)?;
    let features = CsrMatrix::from_triplets(n, v, triplets)?;
    let labeled = (0..n).collect();
    AttributedNetwork::new(adjacency, names.to_vec(), features, labels, l, labeled)
}

/// Source and target networks, each over its own attribute vocabulary (as
/// they would be stored on disk). Every node is labeled.
pub fn generate_networks(cfg: &SyntheticConfig) -> Result<(AttributedNetwork, AttributedNetwork)> {
    cfg.validate()?;
    let s = cfg.signature_attributes;
    let mut names: Vec<String> = Vec::with_capacity(cfg.vocab_size());
    for l in 0..cfg.labels {
        for k in 0..s {
            names.push(format!("sig{l}_{k}"));
        }
    }
    for k in 0..cfg.noise_attributes {
        names.push(format!("noise{k}"));
    }
    let mut target_names = names.clone();
    let mut pick: Vec<usize> = (0..names.len()).collect();
    pick.shuffle(&mut domain_rng(cfg.seed, 0));
    for &i in &pick[..cfg.renamed_attributes().min(names.len())] {
        target_names[i] = format!("{}_t", names[i]);
    }
    let source = generate_network(cfg, cfg.source, &names, &mut domain_rng(cfg.seed, 1))?;
    let target = generate_network(cfg, cfg.target, &target_names, &mut domain_rng(cfg.seed, 2))?;
    Ok((source, target))
}

/// The aligned synthetic pair with every node of both networks labeled.
pub fn generate_pair(cfg: &SyntheticConfig) -> Result<DomainPair> {
    let (source, target) = generate_networks(cfg)?;
    align_attributes(&source, &target)
}

/// Restricts the labeled sets to sampled fractions of each network. A target
/// rate of 0 leaves the target fully unlabeled.
pub fn with_label_rates(
    pair: &DomainPair,
    source_rate: f64,
    target_rate: f64,
    seed: u64,
) -> Result<DomainPair> {
    let source = sample_labeled(&pair.source, source_rate, seed)?;
    let target = if target_rate == 0.0 {
        Vec::new()
    } else {
        sample_labeled(&pair.target, target_rate, seed.wrapping_add(1))?
    };
    pair.with_labeled_sets(source, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, edges: &str, feats: &str, labels: &str) -> NetworkPaths {
        let paths = NetworkPaths::in_dir(dir, "net");
        std::fs::write(&paths.edges, edges).unwrap();
        std::fs::write(&paths.features, feats).unwrap();
        std::fs::write(&paths.labels, labels).unwrap();
        paths
    }

    #[test]
    fn symmetrizes_with_max() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "0\t1\t1\n1\t0\t2\n1\t2\n", "0\ta\t1\n", "");
        let net = load_network(&p).unwrap();
        assert_eq!(net.node_count(), 3);
        assert_eq!(net.adjacency().get(0, 1), 2.0);
        assert_eq!(net.adjacency().get(1, 0), 2.0);
        assert_eq!(net.adjacency().get(2, 1), 1.0);
        assert!(net.labeled_set().is_empty());
        assert_eq!(net.label_count(), 0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "0\t1\n\n0\tx\n", "", "");
        match load_network(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "0\t1\n", "0\ta\n", "");
        assert!(matches!(
            load_network(&p),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn label_for_unknown_node() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "0\t1\n", "", "0\t0\n5\t1\n");
        match load_network(&p) {
            Err(Error::Range {
                line, id, nodes, ..
            }) => assert_eq!((line, id, nodes), (2, 5, 2)),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "# nodes=2\n0\t3\n", "", "");
        assert!(matches!(load_network(&p), Err(Error::Range { id: 3, .. })));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            nodes: 60,
            overlap: 0.3,
            ..Default::default()
        };
        let (source, _) = generate_networks(&cfg).unwrap();
        let paths = NetworkPaths::in_dir(dir.path(), "s");
        save_network(&source, &paths).unwrap();
        let first = std::fs::read(&paths.features).unwrap();
        let loaded = load_network(&paths).unwrap();
        assert_eq!(loaded, source);
        save_network(&loaded, &paths).unwrap();
        assert_eq!(std::fs::read(&paths.features).unwrap(), first);
    }

    #[test]
    fn zero_edge_network() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "# nodes=2\n",
            "1\tz\t0.5\n",
            "# labels=3\n0\t2\n",
        );
        let net = load_network(&p).unwrap();
        assert_eq!(net.adjacency().nnz(), 0);
        assert_eq!(net.label_count(), 3);
        let out = NetworkPaths::in_dir(dir.path(), "out");
        save_network(&net, &out).unwrap();
        assert_eq!(std::fs::read_to_string(&out.edges).unwrap(), "# nodes=2\n");
        assert_eq!(load_network(&out).unwrap(), net);
    }

    #[test]
    fn renaming_hits_requested_rate() {
        for r in [0.1, 0.3, 0.5, 0.77, 1.0] {
            let cfg = SyntheticConfig {
                nodes: 50,
                common_rate: r,
                ..Default::default()
            };
            let pair = generate_pair(&cfg).unwrap();
            assert!((pair.common_attribute_rate() - r).abs() <= RATE_TOLERANCE);
        }
    }

    #[test]
    fn unreachable_rate() {
        let cfg = SyntheticConfig {
            labels: 1,
            signature_attributes: 1,
            noise_attributes: 1,
            nodes: 4,
            common_rate: 0.3,
            ..Default::default()
        };
        assert!(matches!(generate_pair(&cfg), Err(Error::Config(_))));
    }
}
