//! The three networks: the shared graph-convolutional representation
//! learner, the label classifier and the scalar domain critic.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{drop_threshold, Activation, CriticVars, DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::GraphFilter;
use crate::sparse::CsrMatrix;

/// Representation-learner family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Every hidden layer is a graph convolution with a single filter pass.
    Gcn,
    /// First layer applies the filter `n_I` times, remaining layers are dense.
    Igcn,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Variant::Gcn),
            "igcn" => Ok(Variant::Igcn),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Classification setting; selects the classifier's output activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    MultiLabel,
    MultiClass,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-label" => Ok(TaskMode::MultiLabel),
            "multi-class" => Ok(TaskMode::MultiClass),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LayerKind {
    /// `σ(Â^k · H · W)`.
    GraphConv { exponent: usize },
    /// `σ(H · W)`.
    Dense,
}

/// Everything needed to shape and run the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: Variant,
    pub input_dim: usize,
    /// Generator layer widths; the last one is the representation width.
    pub widths: Vec<usize>,
    /// Filter passes in the first layer of the `igcn` variant.
    pub smoothing: usize,
    pub hidden_activation: Activation,
    /// Activation after the last generator layer.
    pub output_activation: Activation,
    pub label_count: usize,
    pub mode: TaskMode,
    pub critic_hidden: usize,
    pub critic_activation: Activation,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "invalid layer widths {:?}",
                self.widths
            )));
        }
        if self.input_dim == 0 || self.label_count == 0 || self.critic_hidden == 0 {
            return Err(Error::Config(format!(
                "input width {}, label count {} and critic width {} must be positive",
                self.input_dim, self.label_count, self.critic_hidden
            )));
        }
        Ok(())
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (0..self.widths.len())
            .map(|i| match (self.variant, i) {
                (Variant::Gcn, _) => LayerKind::GraphConv { exponent: 1 },
                (Variant::Igcn, 0) => LayerKind::GraphConv {
                    exponent: self.smoothing,
                },
                (Variant::Igcn, _) => LayerKind::Dense,
            })
            .collect()
    }

    pub fn representation_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLayer {
    pub weight: DenseMatrix,
    pub kind: LayerKind,
}

/// Representation-learner weights, shared by both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub layers: Vec<GeneratorLayer>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `d × L`.
    pub weight: DenseMatrix,
    /// `1 × L`.
    pub bias: DenseMatrix,
    pub mode: TaskMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    /// `d × k` hidden weights.
    pub w1: DenseMatrix,
    /// `1 × k`.
    pub b1: DenseMatrix,
    /// `k × 1` output weights.
    pub w2: DenseMatrix,
    /// `1 × 1`.
    pub b2: DenseMatrix,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub generator: GeneratorParams,
    pub classifier: ClassifierParams,
    pub critic: CriticParams,
}

impl ModelParams {
    /// Number of scalar parameters across all three networks.
    pub fn parameter_count(&self) -> usize {
        self.matrices().iter().map(|(_, m)| m.len()).sum()
    }

    /// Every parameter matrix with a stable name, in checkpoint order.
    pub fn matrices(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out: Vec<(String, &DenseMatrix)> = self
            .generator
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("generator.{i}.weight"), &l.weight))
            .collect();
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out.push(("critic.w1".into(), &self.critic.w1));
        out.push(("critic.b1".into(), &self.critic.b1));
        out.push(("critic.w2".into(), &self.critic.w2));
        out.push(("critic.b2".into(), &self.critic.b2));
        out
    }

    fn matrices_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = self
            .generator
            .layers
            .iter_mut()
            .map(|l| &mut l.weight)
            .collect();
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out.push(&mut self.critic.w1);
        out.push(&mut self.critic.b1);
        out.push(&mut self.critic.w2);
        out.push(&mut self.critic.b2);
        out
    }
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> DenseMatrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..=limit))
}

/// Glorot-uniform weights and zero biases, deterministic per `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = arch.input_dim;
    let mut layers = Vec::with_capacity(arch.widths.len());
    for (&width, kind) in arch.widths.iter().zip(arch.layer_kinds()) {
        layers.push(GeneratorLayer {
            weight: glorot(&mut rng, fan_in, width),
            kind,
        });
        fan_in = width;
    }
    let d = arch.representation_dim();
    let classifier = ClassifierParams {
        weight: glorot(&mut rng, d, arch.label_count),
        bias: Array2::zeros((1, arch.label_count)),
        mode: arch.mode,
    };
    let critic = CriticParams {
        w1: glorot(&mut rng, d, arch.critic_hidden),
        b1: Array2::zeros((1, arch.critic_hidden)),
        w2: glorot(&mut rng, arch.critic_hidden, 1),
        b2: Array2::zeros((1, 1)),
        activation: arch.critic_activation,
    };
    Ok(ModelParams {
        generator: GeneratorParams {
            layers,
            hidden_activation: arch.hidden_activation,
            output_activation: arch.output_activation,
        },
        classifier,
        critic,
    })
}

/// Generator weights recorded on a tape.
#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub layers: Vec<(Var, LayerKind)>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
    pub mode: TaskMode,
}

fn leaf(tape: &mut Tape, m: &DenseMatrix, trainable: bool) -> Var {
    if trainable {
        tape.param(m.clone())
    } else {
        tape.constant(m.clone())
    }
}

impl GeneratorParams {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(tape, &l.weight, trainable), l.kind))
                .collect(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        }
    }
}

impl ClassifierParams {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ClassifierVars {
        ClassifierVars {
            weight: leaf(tape, &self.weight, trainable),
            bias: leaf(tape, &self.bias, trainable),
            mode: self.mode,
        }
    }
}

impl CriticParams {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> CriticVars {
        CriticVars {
            w1: leaf(tape, &self.w1, trainable),
            b1: leaf(tape, &self.b1, trainable),
            w2: leaf(tape, &self.w2, trainable),
            b2: leaf(tape, &self.b2, trainable),
            activation: self.activation,
        }
    }
}

/// Inverted dropout on the stored entries of a sparse matrix. Zero entries
/// are unaffected by dropout, so this matches dense dropout in distribution.
pub fn sparse_dropout<R: Rng + ?Sized>(x: &CsrMatrix, p: f64, rng: &mut R) -> Result<CsrMatrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - p);
    let cut = drop_threshold(p);
    let values = x
        .values()
        .iter()
        .map(|&v| {
            if u64::from(rng.next_u32()) < cut {
                0.0
            } else {
                v * keep
            }
        })
        .collect();
    Ok(x.with_values(values))
}

/// Runs the representation learner on one network.
///
/// Each layer applies dropout to its input, multiplies by its weight, runs
/// the filter `k` times if it is a graph convolution, then the activation.
/// The filter is applied after the weight product (`Â^k H W = Â^k (H W)`)
/// so the sparse products act on the narrower matrix.
#[allow(clippy::too_many_arguments)]
pub fn generator_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    gen: &GeneratorVars,
    filter: &GraphFilter,
    features: &Arc<CsrMatrix>,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let Some(&(first, _)) = gen.layers.first() else {
        return Err(Error::Config("generator has no layers".into()));
    };
    let (in_dim, _) = tape.shape(first);
    if features.cols() != in_dim {
        return Err(Error::Shape(format!(
            "features have {} columns, first layer expects {in_dim}",
            features.cols()
        )));
    }
    if features.rows() != filter.matrix().rows() {
        return Err(Error::Shape(format!(
            "{} feature rows for a {}-node filter",
            features.rows(),
            filter.matrix().rows()
        )));
    }
    let last = gen.layers.len() - 1;
    let mut h: Option<Var> = None;
    for (i, &(weight, kind)) in gen.layers.iter().enumerate() {
        let product = match h {
            None => {
                let input = if training && dropout > 0.0 {
                    Arc::new(sparse_dropout(features, dropout, rng)?)
                } else {
                    if !(0.0..1.0).contains(&dropout) {
                        return Err(Error::Config(format!(
                            "dropout rate {dropout} outside [0, 1)"
                        )));
                    }
                    Arc::clone(features)
                };
                tape.spmm(&input, weight)?
            }
            Some(prev) => {
                let dropped = tape.dropout(prev, dropout, training, rng)?;
                tape.matmul(dropped, weight)?
            }
        };
        let filtered = match kind {
            LayerKind::GraphConv { exponent } => {
                filter.with_exponent(exponent).apply(tape, product)?
            }
            LayerKind::Dense => product,
        };
        let act = if i == last {
            gen.output_activation
        } else {
            gen.hidden_activation
        };
        h = Some(tape.activation(filtered, act));
    }
    Ok(h.expect("at least one layer"))
}

/// Affine map followed by sigmoid (multi-label) or row softmax (multi-class).
pub fn classifier_forward(tape: &mut Tape, cls: &ClassifierVars, h: Var) -> Result<Var> {
    let logits = tape.matmul(h, cls.weight)?;
    let logits = tape.add_row(logits, cls.bias)?;
    Ok(match cls.mode {
        TaskMode::MultiLabel => tape.sigmoid(logits),
        TaskMode::MultiClass => tape.softmax_rows(logits),
    })
}

/// `a(h·W1 + b1)·w2 + b2` per row; returns `n × 1`.
pub fn critic_forward(tape: &mut Tape, critic: &CriticVars, h: Var) -> Result<Var> {
    let (_, d) = tape.shape(h);
    let (d1, _) = tape.shape(critic.w1);
    if d != d1 {
        return Err(Error::Shape(format!(
            "critic expects width {d1}, representation has width {d}"
        )));
    }
    let hidden = tape.matmul(h, critic.w1)?;
    let hidden = tape.add_row(hidden, critic.b1)?;
    let hidden = tape.activation(hidden, critic.activation);
    let out = tape.matmul(hidden, critic.w2)?;
    tape.add_row(out, critic.b2)
}

/// Dropout-free representations of one network, detached from any tape.
pub fn embed(
    params: &ModelParams,
    filter: &GraphFilter,
    features: &Arc<CsrMatrix>,
) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let gen = params.generator.register(&mut tape, false);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let h = generator_forward(&mut tape, &gen, filter, features, 0.0, false, &mut unused)?;
    Ok(tape.value(h).clone())
}

/// Dropout-free classifier scores for one network.
pub fn predict_scores(
    params: &ModelParams,
    filter: &GraphFilter,
    features: &Arc<CsrMatrix>,
) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let gen = params.generator.register(&mut tape, false);
    let cls = params.classifier.register(&mut tape, false);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let h = generator_forward(&mut tape, &gen, filter, features, 0.0, false, &mut unused)?;
    let scores = classifier_forward(&mut tape, &cls, h)?;
    Ok(tape.value(scores).clone())
}

const MAGIC: &[u8; 8] = b"ADAGCNCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: Architecture,
    matrices: Vec<(String, usize, usize)>,
    metadata: serde_json::Value,
}

/// Parameters plus the architecture that produced them and free-form run
/// metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub params: ModelParams,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    /// Binary layout: magic, `u32` version, `u64` header length, JSON header,
    /// then for each matrix `u64` rows, `u64` cols and row-major `f64`
    /// values, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = CheckpointHeader {
            architecture: self.architecture.clone(),
            matrices: self
                .params
                .matrices()
                .into_iter()
                .map(|(name, m)| (name, m.nrows(), m.ncols()))
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, m) in self.params.matrices() {
            w.write_all(&(m.nrows() as u64).to_le_bytes())?;
            w.write_all(&(m.ncols() as u64).to_le_bytes())?;
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(bad)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long).map_err(bad)?;
        let len = u64::from_le_bytes(long) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(bad)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = init_params(&header.architecture, 0)?;
        let expected: Vec<(String, usize, usize)> = params
            .matrices()
            .into_iter()
            .map(|(name, m)| (name, m.nrows(), m.ncols()))
            .collect();
        if expected != header.matrices {
            return Err(Error::Checkpoint(
                "matrix list disagrees with the stored architecture".into(),
            ));
        }
        for m in params.matrices_mut() {
            let mut dims = [0u64; 2];
            for d in &mut dims {
                r.read_exact(&mut long).map_err(bad)?;
                *d = u64::from_le_bytes(long);
            }
            if (dims[0] as usize, dims[1] as usize) != (m.nrows(), m.ncols()) {
                return Err(Error::Checkpoint(format!(
                    "matrix stored as {}x{}, expected {:?}",
                    dims[0],
                    dims[1],
                    m.shape()
                )));
            }
            for v in m.iter_mut() {
                r.read_exact(&mut long).map_err(bad)?;
                *v = f64::from_le_bytes(long);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(bad)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            architecture: header.architecture,
            params,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use ndarray::array;

    fn arch(variant: Variant, input: usize, widths: &[usize]) -> Architecture {
        Architecture {
            variant,
            input_dim: input,
            widths: widths.to_vec(),
            smoothing: 3,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Relu,
            label_count: 2,
            mode: TaskMode::MultiLabel,
            critic_hidden: 16,
            critic_activation: Activation::Relu,
        }
    }

    fn filter_of(dense: DenseMatrix) -> GraphFilter {
        use crate::graph::{renormalized_filter, AttributedNetwork};
        let n = dense.nrows();
        let net = AttributedNetwork::new(
            CsrMatrix::from_dense(&dense.view()).unwrap(),
            vec![],
            CsrMatrix::zeros(n, 0),
            vec![vec![]; n],
            0,
            vec![],
        )
        .unwrap();
        renormalized_filter(&net).unwrap()
    }

    fn run_generator(
        params: &GeneratorParams,
        filter: &GraphFilter,
        x: DenseMatrix,
    ) -> DenseMatrix {
        let mut tape = Tape::new();
        let gen = params.register(&mut tape, false);
        let x = Arc::new(CsrMatrix::from_dense(&x.view()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = generator_forward(&mut tape, &gen, filter, &x, 0.0, false, &mut rng).unwrap();
        tape.value(h).clone()
    }

    fn single_layer(weight: DenseMatrix, kind: LayerKind) -> GeneratorParams {
        GeneratorParams {
            layers: vec![GeneratorLayer { weight, kind }],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Relu,
        }
    }

    #[test]
    fn generator_identity_collapse() {
        let f = filter_of(Array2::zeros((1, 1)));
        let g = single_layer(Array2::eye(3), LayerKind::GraphConv { exponent: 1 });
        let out = run_generator(&g, &f, array![[-1.0, 0.5, 2.0]]);
        assert_eq!(out, array![[0.0, 0.5, 2.0]]);
    }

    #[test]
    fn generator_two_node_hand_case() {
        let f = filter_of(array![[0.0, 1.0], [1.0, 0.0]]);
        let g = single_layer(Array2::eye(2), LayerKind::GraphConv { exponent: 1 });
        let out = run_generator(&g, &f, array![[2.0, 0.0], [0.0, 2.0]]);
        assert_eq!(out, array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn igcn_exponent_one_matches_gcn_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let adj = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let f = filter_of(adj);
        let mut a = arch(Variant::Igcn, 4, &[5]);
        a.smoothing = 1;
        let igcn = init_params(&a, 3).unwrap();
        let mut gcn = igcn.clone();
        gcn.generator.layers[0].kind = LayerKind::GraphConv { exponent: 1 };
        let x = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
        let lhs = run_generator(&igcn.generator, &f, x.clone());
        let rhs = run_generator(&gcn.generator, &f, x);
        assert_eq!(
            lhs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            rhs.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn generator_width_mismatch() {
        let f = filter_of(Array2::zeros((1, 1)));
        let g = single_layer(Array2::eye(3), LayerKind::Dense);
        let mut tape = Tape::new();
        let gen = g.register(&mut tape, false);
        let x = Arc::new(CsrMatrix::zeros(1, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = generator_forward(&mut tape, &gen, &f, &x, 0.0, false, &mut rng);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn layer_kinds_per_variant() {
        let gcn = arch(Variant::Gcn, 10, &[8, 4, 2]).layer_kinds();
        assert!(gcn
            .iter()
            .all(|k| *k == LayerKind::GraphConv { exponent: 1 }));
        let igcn = arch(Variant::Igcn, 10, &[8, 4, 2]).layer_kinds();
        assert_eq!(
            igcn,
            vec![
                LayerKind::GraphConv { exponent: 3 },
                LayerKind::Dense,
                LayerKind::Dense
            ]
        );
    }

    #[test]
    fn igcn_parameter_count_ignores_smoothing() {
        let mut a = arch(Variant::Igcn, 10, &[8, 4, 2]);
        let base = init_params(&a, 1).unwrap().parameter_count();
        for k in [0, 1, 10, 25] {
            a.smoothing = k;
            assert_eq!(init_params(&a, 1).unwrap().parameter_count(), base);
        }
    }

    #[test]
    fn classifier_cases() {
        let mut tape = Tape::new();
        let h = tape.constant(array![[1.0, 0.0], [0.3, -2.0]]);
        let zero = ClassifierParams {
            weight: Array2::zeros((2, 3)),
            bias: Array2::zeros((1, 3)),
            mode: TaskMode::MultiLabel,
        }
        .register(&mut tape, false);
        let s = classifier_forward(&mut tape, &zero, h).unwrap();
        assert!(tape.value(s).iter().all(|&v| v == 0.5));

        let cls = ClassifierParams {
            weight: array![[2.0, 0.0], [0.0, 2.0]],
            bias: Array2::zeros((1, 2)),
            mode: TaskMode::MultiLabel,
        }
        .register(&mut tape, false);
        let h1 = tape.constant(array![[1.0, 0.0]]);
        let s = classifier_forward(&mut tape, &cls, h1).unwrap();
        assert_eq!(tape.value(s), &array![[sigmoid(2.0), 0.5]]);
        assert!((tape.value(s)[[0, 0]] - 0.8808).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let soft = ClassifierParams {
            weight: Array2::from_shape_simple_fn((2, 4), || rng.gen_range(-3.0..3.0)),
            bias: Array2::from_shape_simple_fn((1, 4), || rng.gen_range(-3.0..3.0)),
            mode: TaskMode::MultiClass,
        }
        .register(&mut tape, false);
        let s = classifier_forward(&mut tape, &soft, h).unwrap();
        for row in tape.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn critic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let h0 = Array2::from_shape_simple_fn((5, 3), || rng.gen_range(-1.0..1.0));
        let h = tape.constant(h0.clone());
        let zero = CriticParams {
            w1: Array2::zeros((3, 4)),
            b1: Array2::zeros((1, 4)),
            w2: Array2::zeros((4, 1)),
            b2: Array2::zeros((1, 1)),
            activation: Activation::Relu,
        };
        let zv = zero.register(&mut tape, false);
        let out = critic_forward(&mut tape, &zv, h).unwrap();
        assert_eq!(tape.shape(out), (5, 1));
        assert!(tape.value(out).iter().all(|&v| v == 0.0));

        let lin = CriticParams {
            w1: Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0)),
            b1: Array2::from_shape_simple_fn((1, 4), || rng.gen_range(-1.0..1.0)),
            w2: Array2::from_shape_simple_fn((4, 1), || rng.gen_range(-1.0..1.0)),
            b2: array![[0.7]],
            activation: Activation::Identity,
        };
        let lv = lin.register(&mut tape, false);
        let out = critic_forward(&mut tape, &lv, h).unwrap();
        let slope = lin.w1.dot(&lin.w2);
        let offset = lin.b1.dot(&lin.w2)[[0, 0]] + 0.7;
        let expect = h0.dot(&slope) + offset;
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let bad = tape.constant(Array2::zeros((2, 2)));
        assert!(matches!(
            critic_forward(&mut tape, &lv, bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = arch(Variant::Gcn, 1000, &[100, 16]);
        let p = init_params(&a, 42).unwrap();
        assert_eq!(p, init_params(&a, 42).unwrap());
        assert_ne!(p, init_params(&a, 43).unwrap());
        let bound = (6.0f64 / 1100.0).sqrt();
        assert!(p.generator.layers[0]
            .weight
            .iter()
            .all(|w| w.abs() <= bound));
        assert!(bound < 0.0739);
        assert!(p.classifier.bias.iter().all(|&b| b == 0.0));
        assert!(p.critic.b1.iter().all(|&b| b == 0.0));
        assert!(p.critic.b2.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let a = arch(Variant::Igcn, 7, &[6, 5, 4]);
        let mut params = init_params(&a, 5).unwrap();
        params.critic.b2[[0, 0]] = -0.0;
        params.classifier.bias[[0, 1]] = f64::MIN_POSITIVE / 3.0;
        let ck = Checkpoint {
            architecture: a,
            params,
            metadata: serde_json::json!({"vocab": ["a", "b"]}),
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        for ((_, x), (_, y)) in ck.params.matrices().iter().zip(back.params.matrices()) {
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(back.metadata, ck.metadata);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);

        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::read_from(&b"NOTACKPT"[..]).is_err());
    }
}
