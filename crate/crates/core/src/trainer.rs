//! The adversarial training loop: `n_d` critic ascent steps per epoch, then
//! one joint descent step for the representation learner and classifier.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{score_nodes, F1Scores};
use crate::graph::{renormalized_filter, DomainPair, GraphFilter};
use crate::model::{
    classifier_forward, critic_forward, generator_forward, init_params, predict_scores,
    Architecture, ModelParams, TaskMode, Variant,
};
use crate::objective::{
    classification_loss, critic_loss, critic_objective, generator_objective, gradient_penalty,
    penalty_batch, weight_decay, LossReport,
};
use crate::sparse::CsrMatrix;

/// Step decay: the rate is multiplied by `factor` at epoch `start` and again
/// every `period` epochs after that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub start: usize,
    pub period: usize,
    pub factor: f64,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        Self {
            start: 500,
            period: 100,
            factor: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the critic loss in the generator objective (λ).
    pub lambda: f64,
    /// Gradient-penalty coefficient (γ).
    pub gamma: f64,
    /// Critic steps per epoch (`n_d`).
    pub critic_steps: usize,
    /// Filter passes in the first `igcn` layer (`n_I`).
    pub smoothing: usize,
    /// Critic learning rate (α₁).
    pub critic_lr: f64,
    /// Generator and classifier learning rate (α₂).
    pub generator_lr: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub widths: Vec<usize>,
    pub critic_hidden: usize,
    pub variant: Variant,
    pub mode: TaskMode,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub critic_activation: Activation,
    pub decay: DecaySchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 10.0,
            critic_steps: 10,
            smoothing: 10,
            critic_lr: 1.5e-3,
            generator_lr: 1.5e-3,
            epochs: 1000,
            dropout: 0.3,
            weight_decay: 5e-5,
            widths: vec![1000, 100, 16],
            critic_hidden: 16,
            variant: Variant::Gcn,
            mode: TaskMode::MultiLabel,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Relu,
            critic_activation: Activation::Relu,
            decay: DecaySchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.critic_lr > 0.0 && self.generator_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight decay {} < 0", self.weight_decay));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("invalid widths {:?}", self.widths));
        }
        if self.critic_hidden == 0 {
            return bad("critic hidden width must be positive".into());
        }
        if self.decay.period == 0 || self.decay.factor.is_nan() || self.decay.factor <= 0.0 {
            return bad("decay period and factor must be positive".into());
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize, label_count: usize) -> Architecture {
        Architecture {
            variant: self.variant,
            input_dim,
            widths: self.widths.clone(),
            smoothing: self.smoothing,
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
            label_count,
            mode: self.mode,
            critic_hidden: self.critic_hidden,
            critic_activation: self.critic_activation,
        }
    }
}

/// Learning rate at `epoch` (0-based): `base` before `schedule.start`, then
/// `base · factor^(⌊(epoch - start)/period⌋ + 1)`.
pub fn lr_at(epoch: usize, base: f64, schedule: &DecaySchedule) -> f64 {
    if epoch < schedule.start {
        base
    } else {
        let k = (epoch - schedule.start) / schedule.period + 1;
        base * schedule.factor.powi(k as i32)
    }
}

/// First and second moment estimates for one group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<DenseMatrix>,
    pub second: Vec<DenseMatrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a DenseMatrix>) -> Self {
        let first: Vec<DenseMatrix> = shapes
            .into_iter()
            .map(|m| Array2::zeros(m.raw_dim()))
            .collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam descent step. A non-finite gradient leaves every
/// parameter untouched and reports the epoch.
pub fn adam_step(
    params: &mut [&mut DenseMatrix],
    grads: &[DenseMatrix],
    state: &mut AdamState,
    lr: f64,
    epoch: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Shape(format!(
                "adam: parameter {i} is {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                epoch,
                msg: format!("non-finite gradient for parameter group entry {i}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        ndarray::Zip::from(&mut **p)
            .and(m)
            .and(v)
            .and(&grads[i])
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Purpose of a stochastic pass; each gets an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    CriticSource,
    CriticTarget,
    Interpolation,
    GeneratorSource,
    GeneratorTarget,
}

/// Random stream for one pass of one epoch. Streams never collide with each
/// other or with the parameter-initialization stream.
pub fn pass_rng(seed: u64, epoch: usize, pass: Pass, step: usize) -> ChaCha8Rng {
    let code = match pass {
        Pass::CriticSource => 1,
        Pass::CriticTarget => 2,
        Pass::Interpolation => 3,
        Pass::GeneratorSource => 4,
        Pass::GeneratorTarget => 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 24) | ((step as u64 & 0xFFFF) << 8) | code);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossReport,
    pub lr: f64,
    pub wall_seconds: f64,
    pub snapshot: Option<F1Scores>,
}

impl EpochRecord {
    /// One JSON-lines record: `{epoch, L_c, L_d, L_grad, lr, micro_f1?, macro_f1?}`.
    pub fn json_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("epoch".into(), self.epoch.into());
        obj.insert("L_c".into(), self.losses.classification.into());
        obj.insert("L_d".into(), self.losses.critic.into());
        obj.insert("L_grad".into(), self.losses.gradient_penalty.into());
        obj.insert("lr".into(), self.lr.into());
        if let Some(s) = self.snapshot {
            obj.insert("micro_f1".into(), s.micro_f1.into());
            obj.insert("macro_f1".into(), s.macro_f1.into());
        }
        serde_json::Value::Object(obj).to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn jsonl(&self) -> String {
        self.epochs.iter().map(|r| r.json_line() + "\n").collect()
    }

    pub fn last_snapshot(&self) -> Option<F1Scores> {
        self.epochs.iter().rev().find_map(|r| r.snapshot)
    }
}

/// One network prepared for training: filter and sparse features.
#[derive(Debug, Clone)]
pub struct DomainInput {
    pub filter: GraphFilter,
    pub features: Arc<CsrMatrix>,
}

impl DomainInput {
    pub fn new(net: &crate::graph::AttributedNetwork) -> Result<Self> {
        Ok(Self {
            filter: renormalized_filter(net)?,
            features: Arc::new(net.features().clone()),
        })
    }
}

/// Scores the target network without dropout. Returns `None` when the target
/// has no ground-truth labels.
pub fn evaluate_target(params: &ModelParams, pair: &DomainPair) -> Result<Option<F1Scores>> {
    let input = DomainInput::new(&pair.target)?;
    evaluate_on(params, pair, &input, &pair.target.nodes_with_labels())
}

fn evaluate_on(
    params: &ModelParams,
    pair: &DomainPair,
    target: &DomainInput,
    nodes: &[usize],
) -> Result<Option<F1Scores>> {
    if nodes.is_empty() {
        return Ok(None);
    }
    let scores = predict_scores(params, &target.filter, &target.features)?;
    score_nodes(&scores, &pair.target, nodes, params.classifier.mode).map(Some)
}

/// Training state for one run. Owns its parameters and optimizer state.
pub struct Trainer {
    config: TrainConfig,
    pair: DomainPair,
    source: DomainInput,
    target: DomainInput,
    params: ModelParams,
    critic_adam: AdamState,
    generator_adam: AdamState,
    history: TrainHistory,
    eval_every: Option<usize>,
    eval_nodes: Vec<usize>,
    last_penalty: f64,
}

impl Trainer {
    pub fn new(pair: &DomainPair, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if pair.source.labeled_set().is_empty() {
            return Err(Error::Config("source network has no labeled nodes".into()));
        }
        if config.mode == TaskMode::MultiClass {
            for net in [&pair.source, &pair.target] {
                if net
                    .labeled_set()
                    .iter()
                    .any(|&i| net.labels()[i].len() != 1)
                {
                    return Err(Error::Config(
                        "multi-class mode needs exactly one label per labeled node".into(),
                    ));
                }
            }
        }
        let arch = config.architecture(pair.attribute_count(), pair.label_count());
        let params = init_params(&arch, config.seed)?;
        let critic_adam = AdamState::new(critic_matrices(&params));
        let generator_adam = AdamState::new(generator_matrices(&params));
        Ok(Self {
            config: config.clone(),
            source: DomainInput::new(&pair.source)?,
            target: DomainInput::new(&pair.target)?,
            pair: pair.clone(),
            params,
            critic_adam,
            generator_adam,
            history: TrainHistory::default(),
            eval_every: None,
            eval_nodes: pair.target.nodes_with_labels(),
            last_penalty: 0.0,
        })
    }

    /// Scores the target network every `k` epochs (and never feeds back into
    /// training). Skipped with a notice when the target has no labels.
    pub fn with_evaluation(mut self, every: usize) -> Self {
        if every == 0 {
            return self;
        }
        if self.eval_nodes.is_empty() {
            log::warn!("target network has no labels; skipping periodic evaluation");
        } else {
            self.eval_every = Some(every);
        }
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config
            .architecture(self.pair.attribute_count(), self.pair.label_count())
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn into_parts(self) -> (ModelParams, TrainHistory) {
        (self.params, self.history)
    }

    /// Runs one epoch and appends its record. On error the parameters are
    /// those of the last completed epoch.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.history.len();
        let started = Instant::now();
        let critic_rate = lr_at(epoch, self.config.critic_lr, &self.config.decay);
        let generator_rate = lr_at(epoch, self.config.generator_lr, &self.config.decay);

        let mut staged = self.params.clone();
        let mut critic_adam = self.critic_adam.clone();
        let mut generator_adam = self.generator_adam.clone();
        let mut penalty = self.last_penalty;
        for step in 0..self.config.critic_steps {
            penalty = self.critic_step(&mut staged, &mut critic_adam, critic_rate, epoch, step)?;
        }
        let (classification, critic, decay) =
            self.generator_step(&mut staged, &mut generator_adam, generator_rate, epoch)?;
        let losses = LossReport {
            classification,
            critic,
            gradient_penalty: penalty,
            weight_decay: decay,
        };
        if [classification, critic, penalty, decay]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Training {
                epoch,
                msg: format!(
                    "non-finite loss {losses:?}; last good parameters are from the previous epoch"
                ),
            });
        }
        self.params = staged;
        self.critic_adam = critic_adam;
        self.generator_adam = generator_adam;
        self.last_penalty = penalty;

        let snapshot = match self.eval_every {
            Some(k) if (epoch + 1).is_multiple_of(k) => {
                evaluate_on(&self.params, &self.pair, &self.target, &self.eval_nodes)?
            }
            _ => None,
        };
        self.history.epochs.push(EpochRecord {
            epoch,
            losses,
            lr: generator_rate,
            wall_seconds: started.elapsed().as_secs_f64(),
            snapshot,
        });
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    pub fn run(&mut self) -> Result<()> {
        while self.history.len() < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Ascends `L_d - γ·L_grad` in the critic weights; the generator is
    /// frozen. Returns the penalty value.
    fn critic_step(
        &self,
        params: &mut ModelParams,
        adam: &mut AdamState,
        lr: f64,
        epoch: usize,
        step: usize,
    ) -> Result<f64> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let gen = params.generator.register(&mut tape, false);
        let hs = generator_forward(
            &mut tape,
            &gen,
            &self.source.filter,
            &self.source.features,
            cfg.dropout,
            true,
            &mut pass_rng(cfg.seed, epoch, Pass::CriticSource, step),
        )?;
        let ht = generator_forward(
            &mut tape,
            &gen,
            &self.target.filter,
            &self.target.features,
            cfg.dropout,
            true,
            &mut pass_rng(cfg.seed, epoch, Pass::CriticTarget, step),
        )?;
        let batch = penalty_batch(
            tape.value(hs),
            tape.value(ht),
            &mut pass_rng(cfg.seed, epoch, Pass::Interpolation, step),
        )?;
        let critic = params.critic.register(&mut tape, true);
        let fs = critic_forward(&mut tape, &critic, hs)?;
        let ft = critic_forward(&mut tape, &critic, ht)?;
        let ld = critic_loss(&mut tape, fs, ft)?;
        let lg = gradient_penalty(&mut tape, &critic, &batch)?;
        let objective = critic_objective(&mut tape, ld, lg, cfg.gamma)?;
        let loss = tape.scale(objective, -1.0);
        let grads = tape.backward(loss)?;
        let g: Vec<DenseMatrix> = [critic.w1, critic.b1, critic.w2, critic.b2]
            .iter()
            .map(|&v| grads.wrt(v))
            .collect();
        let c = &mut params.critic;
        adam_step(
            &mut [&mut c.w1, &mut c.b1, &mut c.w2, &mut c.b2],
            &g,
            adam,
            lr,
            epoch,
        )?;
        Ok(tape.scalar(lg))
    }

    /// Descends `L_c + λ·L_d + decay` in the generator and classifier
    /// weights; the critic is frozen. Returns `(L_c, L_d, decay)`.
    fn generator_step(
        &self,
        params: &mut ModelParams,
        adam: &mut AdamState,
        lr: f64,
        epoch: usize,
    ) -> Result<(f64, f64, f64)> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let gen = params.generator.register(&mut tape, true);
        let cls = params.classifier.register(&mut tape, true);
        let critic = params.critic.register(&mut tape, false);
        let hs = generator_forward(
            &mut tape,
            &gen,
            &self.source.filter,
            &self.source.features,
            cfg.dropout,
            true,
            &mut pass_rng(cfg.seed, epoch, Pass::GeneratorSource, 0),
        )?;
        let ht = generator_forward(
            &mut tape,
            &gen,
            &self.target.filter,
            &self.target.features,
            cfg.dropout,
            true,
            &mut pass_rng(cfg.seed, epoch, Pass::GeneratorTarget, 0),
        )?;
        let lc = labeled_loss(&mut tape, &cls, hs, ht, &self.pair, cfg.mode)?;
        let fs = critic_forward(&mut tape, &critic, hs)?;
        let ft = critic_forward(&mut tape, &critic, ht)?;
        let ld = critic_loss(&mut tape, fs, ft)?;
        let mut trainable: Vec<Var> = gen.layers.iter().map(|&(w, _)| w).collect();
        trainable.push(cls.weight);
        trainable.push(cls.bias);
        let decay = weight_decay(&mut tape, &trainable, cfg.weight_decay)?;
        let total = generator_objective(&mut tape, lc, ld, cfg.lambda, decay)?;
        let grads = tape.backward(total)?;
        let g: Vec<DenseMatrix> = trainable.iter().map(|&v| grads.wrt(v)).collect();
        let mut slots: Vec<&mut DenseMatrix> = params
            .generator
            .layers
            .iter_mut()
            .map(|l| &mut l.weight)
            .collect();
        slots.push(&mut params.classifier.weight);
        slots.push(&mut params.classifier.bias);
        adam_step(&mut slots, &g, adam, lr, epoch)?;
        Ok((tape.scalar(lc), tape.scalar(ld), tape.scalar(decay)))
    }
}

/// Cross-entropy over the source labeled rows, plus target labeled rows when
/// there are any, as one mean over all labeled nodes.
pub fn labeled_loss(
    tape: &mut Tape,
    cls: &crate::model::ClassifierVars,
    hs: Var,
    ht: Var,
    pair: &DomainPair,
    mode: TaskMode,
) -> Result<Var> {
    let part = |tape: &mut Tape, h: Var, net: &crate::graph::AttributedNetwork| -> Result<Var> {
        let rows = tape.select_rows(h, net.labeled_set())?;
        let scores = classifier_forward(tape, cls, rows)?;
        classification_loss(tape, scores, &net.label_matrix(net.labeled_set()), mode)
    };
    let source = part(tape, hs, &pair.source)?;
    let nt = pair.target.labeled_set().len();
    if nt == 0 {
        return Ok(source);
    }
    let ns = pair.source.labeled_set().len();
    let target = part(tape, ht, &pair.target)?;
    let total = (ns + nt) as f64;
    let s = tape.scale(source, ns as f64 / total);
    let t = tape.scale(target, nt as f64 / total);
    tape.add(s, t)
}

fn generator_matrices(p: &ModelParams) -> Vec<&DenseMatrix> {
    let mut out: Vec<&DenseMatrix> = p.generator.layers.iter().map(|l| &l.weight).collect();
    out.push(&p.classifier.weight);
    out.push(&p.classifier.bias);
    out
}

fn critic_matrices(p: &ModelParams) -> Vec<&DenseMatrix> {
    vec![&p.critic.w1, &p.critic.b1, &p.critic.w2, &p.critic.b2]
}

/// Trains for `config.epochs` epochs from a fresh initialization.
pub fn train(pair: &DomainPair, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let mut trainer = Trainer::new(pair, config)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_values() {
        let s = DecaySchedule::default();
        let base = TrainConfig::default().generator_lr;
        assert_eq!(base, 1.5e-3);
        assert_eq!(lr_at(0, base, &s), 1.5e-3);
        assert_eq!(lr_at(499, base, &s), base);
        assert_eq!(lr_at(500, base, &s), base * 0.8);
        assert_eq!(lr_at(599, base, &s), base * 0.8);
        assert!((lr_at(600, base, &s) - base * 0.64).abs() < 1e-18);
        assert!((lr_at(999, base, &s) - base * 0.8f64.powi(5)).abs() < 1e-18);
    }

    #[test]
    fn defaults_follow_published_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda, c.gamma, c.critic_steps), (1.0, 10.0, 10));
        assert_eq!((c.critic_lr, c.generator_lr), (1.5e-3, 1.5e-3));
        assert_eq!((c.epochs, c.dropout, c.weight_decay), (1000, 0.3, 5e-5));
        assert_eq!(c.widths, vec![1000, 100, 16]);
        assert_eq!((c.smoothing, c.critic_hidden), (10, 16));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig {
                lambda: -1.0,
                ..Default::default()
            },
            TrainConfig {
                gamma: -0.5,
                ..Default::default()
            },
            TrainConfig {
                dropout: 1.0,
                ..Default::default()
            },
            TrainConfig {
                critic_lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                widths: vec![],
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let mut w = array![[1.0, -2.0]];
        let mut state = AdamState::new([&w]);
        state.first[0] = array![[0.5, 0.5]];
        state.second[0] = array![[0.25, 0.25]];
        let before = w.clone();
        adam_step(&mut [&mut w], &[array![[0.0, 0.0]]], &mut state, 0.1, 0).unwrap();
        assert_eq!(state.first[0], array![[0.45, 0.45]]);
        assert!(state.second[0][[0, 0]] < 0.25);
        // Nonzero moments still move the weights; a fresh state would not.
        assert_ne!(w, before);
        let mut fresh = AdamState::new([&w]);
        let w0 = w.clone();
        adam_step(&mut [&mut w], &[array![[0.0, 0.0]]], &mut fresh, 0.1, 0).unwrap();
        assert_eq!(w, w0);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_rate() {
        let mut w = array![[0.0, 0.0, 0.0]];
        let mut state = AdamState::new([&w]);
        let g = array![[3.0, -0.01, 250.0]];
        adam_step(&mut [&mut w], std::slice::from_ref(&g), &mut state, 1e-3, 0).unwrap();
        for (dw, gv) in w.iter().zip(g.iter()) {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
            let expect = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((dw - expect).abs() < 1e-15);
            assert!((dw.abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut w = array![[1.0]];
        let mut state = AdamState::new([&w]);
        let err = adam_step(&mut [&mut w], &[array![[f64::NAN]]], &mut state, 0.1, 7);
        assert!(matches!(err, Err(Error::Training { epoch: 7, .. })));
        assert_eq!(w, array![[1.0]]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut w = array![[0.3, -0.7], [1.1, 0.0]];
            let mut state = AdamState::new([&w]);
            for k in 0..50 {
                let g = w.mapv(|v| (v * 3.0 + k as f64).sin());
                adam_step(&mut [&mut w], &[g], &mut state, 1e-2, k).unwrap();
            }
            w
        };
        let (a, b) = (run(), run());
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn pass_streams_are_distinct() {
        use rand::Rng;
        let draw = |p, e, s| pass_rng(1, e, p, s).gen::<u64>();
        let a = draw(Pass::CriticSource, 0, 0);
        assert_ne!(a, draw(Pass::CriticTarget, 0, 0));
        assert_ne!(a, draw(Pass::CriticSource, 1, 0));
        assert_ne!(a, draw(Pass::CriticSource, 0, 1));
        assert_eq!(a, draw(Pass::CriticSource, 0, 0));
        assert_ne!(a, ChaCha8Rng::seed_from_u64(1).gen::<u64>());
    }

    #[test]
    fn history_json_line_fields() {
        let rec = EpochRecord {
            epoch: 3,
            losses: LossReport {
                classification: 0.5,
                critic: 0.25,
                gradient_penalty: 0.125,
                weight_decay: 0.0,
            },
            lr: 1.5e-3,
            wall_seconds: 9.0,
            snapshot: None,
        };
        assert_eq!(
            rec.json_line(),
            r#"{"L_c":0.5,"L_d":0.25,"L_grad":0.125,"epoch":3,"lr":0.0015}"#
        );
    }
}
