//! Adam optimizer, the training loop with temperature annealing and loss
//! routing, the baseline variants (domain-agnostic and multi-task), and
//! seed-repeated aggregation.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, NodeId, ParamStore};
use crate::data::{drs_weights, tokenize_dataset, Dataset, DataError, TokenizedDataset};
use crate::derive_seed;
use crate::encoder::{EncoderError, EncoderParams, Mode, Vocab};
use crate::eval::{evaluate_scores, EvalReport};
use crate::model::{
    anneal_temperature, softmax, write_repr_header, write_repr_row, BatchComputation,
    BatchSample, DcmiModel, ForwardOptions, ModelConfig, ModelError, SupervisedHead,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("AUC evaluation requires binary labels; dataset has {0} classes")]
    NotBinary(usize),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("representation export: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Dcmi,
    DcmiNoDom,
    DcmiNoDomNoCon,
    DAl,
    Mtl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Dcmi,
        Variant::DcmiNoDom,
        Variant::DcmiNoDomNoCon,
        Variant::DAl,
        Variant::Mtl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dcmi => "dcmi",
            Variant::DcmiNoDom => "dcmi_no_dom",
            Variant::DcmiNoDomNoCon => "dcmi_no_dom_no_con",
            Variant::DAl => "d_al",
            Variant::Mtl => "mtl",
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn uses_masks(self) -> bool {
        matches!(
            self,
            Variant::Dcmi | Variant::DcmiNoDom | Variant::DcmiNoDomNoCon
        )
    }

    /// Ablations force loss weights to zero rather than removing terms.
    pub fn effective_lambdas(self, lambda1: f64, lambda2: f64) -> (f64, f64) {
        match self {
            Variant::Dcmi => (lambda1, lambda2),
            Variant::DcmiNoDom => (0.0, lambda2),
            Variant::DcmiNoDomNoCon => (0.0, 0.0),
            Variant::DAl | Variant::Mtl => (0.0, 0.0),
        }
    }
}

/// How a test sample's mask is chosen at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalDomainMode {
    /// Use the dataset-provided domain (per-domain metrics imply it is known).
    #[default]
    Record,
    /// Use the argmax of the domain classifier's relevance scores.
    Argmax,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    3e-5
}
fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    64
}
fn default_drs_defer() -> f64 {
    0.8
}
fn default_dim() -> usize {
    64
}
fn default_tau_min() -> f64 {
    0.0025
}
fn default_dropout() -> f64 {
    0.5
}
fn default_max_tokens() -> usize {
    128
}
fn default_vocab_max() -> usize {
    50_000
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub drs: bool,
    #[serde(default = "default_drs_defer")]
    pub drs_defer_fraction: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_dim")]
    pub emb_dim: usize,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_vocab_max")]
    pub vocab_max: usize,
    #[serde(default)]
    pub eval_domain: EvalDomainMode,
    /// Pin every mask to ones; probe knob for equivalence oracles.
    #[serde(default)]
    pub pin_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Dcmi,
            lambda1: default_lambda(),
            lambda2: default_lambda(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            drs: true,
            drs_defer_fraction: default_drs_defer(),
            dim: default_dim(),
            emb_dim: default_dim(),
            tau_min: default_tau_min(),
            dropout: default_dropout(),
            max_tokens: default_max_tokens(),
            vocab_max: default_vocab_max(),
            eval_domain: EvalDomainMode::Record,
            pin_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad(format!(
                "lambda1/lambda2 must be >= 0, got ({}, {})",
                self.lambda1, self.lambda2
            ));
        }
        if self.learning_rate <= 0.0 {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.dim < 1 || self.emb_dim < 1 {
            return bad("representation dimensions must be >= 1".into());
        }
        if self.tau_min <= 0.0 || self.tau_min > 1.0 {
            return bad(format!("tau_min must be in (0, 1], got {}", self.tau_min));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.drs_defer_fraction) {
            return bad(format!(
                "drs_defer_fraction must be in [0, 1], got {}",
                self.drs_defer_fraction
            ));
        }
        if self.max_tokens < 1 {
            return bad("max_tokens must be >= 1".into());
        }
        if self.vocab_max < 2 {
            return bad("vocab_max must be >= 2".into());
        }
        Ok(())
    }
}

/// Standard Adam with bias correction; moments aligned with the store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.values(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.values(id).len()]).collect();
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over every parameter with a gradient slot.
/// Parameters absent from `grads` are untouched.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let Some(grad) = grads.get(id) else { continue };
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(TrainError::NonFiniteGradient(store.name(id).to_string()));
        }
        let ix = id.index();
        let params = store.values_mut(id);
        for k in 0..params.len() {
            let g = grad[k];
            state.m[ix][k] = state.beta1 * state.m[ix][k] + (1.0 - state.beta1) * g;
            state.v[ix][k] = state.beta2 * state.v[ix][k] + (1.0 - state.beta2) * g * g;
            let m_hat = state.m[ix][k] / bc1;
            let v_hat = state.v[ix][k] / bc2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Shared body plus one softmax head (domain-agnostic baseline).
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub head: SupervisedHead,
    pub config: ModelConfig,
}

impl BaselineModel {
    fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng_enc = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/encoder"));
        let encoder = EncoderParams::init(
            &mut store,
            vocab_size,
            config.emb_dim,
            config.dim,
            config.dropout,
            &mut rng_enc,
        );
        let mut rng_sup = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/supervised_head"));
        let head = SupervisedHead::init(
            &mut store,
            "supervised_head",
            config.dim,
            config.num_classes,
            &mut rng_sup,
        );
        BaselineModel {
            store,
            encoder,
            head,
            config,
        }
    }
}

/// Shared body with one softmax head per domain (multi-task baseline).
#[derive(Debug, Clone)]
pub struct MtlModel {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub heads: Vec<SupervisedHead>,
    pub config: ModelConfig,
}

impl MtlModel {
    fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng_enc = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/encoder"));
        let encoder = EncoderParams::init(
            &mut store,
            vocab_size,
            config.emb_dim,
            config.dim,
            config.dropout,
            &mut rng_enc,
        );
        let mut rng_sup = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/supervised_head"));
        let heads = (0..config.num_domains)
            .map(|j| {
                SupervisedHead::init(
                    &mut store,
                    &format!("supervised_head.{j}"),
                    config.dim,
                    config.num_classes,
                    &mut rng_sup,
                )
            })
            .collect();
        MtlModel {
            store,
            encoder,
            heads,
            config,
        }
    }
}

/// A trained model of any variant, with its vocabulary.
#[derive(Debug, Clone)]
pub enum VariantModel {
    Dcmi(DcmiModel),
    DAl(BaselineModel),
    Mtl(MtlModel),
}

impl VariantModel {
    pub fn store(&self) -> &ParamStore {
        match self {
            VariantModel::Dcmi(m) => &m.store,
            VariantModel::DAl(m) => &m.store,
            VariantModel::Mtl(m) => &m.store,
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            VariantModel::Dcmi(m) => &mut m.store,
            VariantModel::DAl(m) => &mut m.store,
            VariantModel::Mtl(m) => &mut m.store,
        }
    }

    /// Positive-class probability for one sample.
    pub fn positive_score(
        &self,
        tokens: &[u32],
        domain: usize,
        mode: EvalDomainMode,
    ) -> Result<f64, TrainError> {
        match self {
            VariantModel::Dcmi(m) => {
                let mask_domain = match mode {
                    EvalDomainMode::Record => domain,
                    EvalDomainMode::Argmax => {
                        let scores = m.domain_assignments(tokens)?;
                        scores
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
                            .map(|(j, _)| j)
                            .unwrap_or(domain)
                    }
                };
                Ok(m.class_probabilities(tokens, mask_domain)?[1])
            }
            VariantModel::DAl(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut graph = Graph::new();
                let h = m.encoder.encode(&mut graph, &m.store, tokens, Mode::Eval, &mut rng)?;
                let logits = m.head.logits(&mut graph, &m.store, h)?;
                Ok(softmax(graph.value(logits))[1])
            }
            VariantModel::Mtl(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut graph = Graph::new();
                let h = m.encoder.encode(&mut graph, &m.store, tokens, Mode::Eval, &mut rng)?;
                let logits = m.heads[domain].logits(&mut graph, &m.store, h)?;
                Ok(softmax(graph.value(logits))[1])
            }
        }
    }

    /// Pre-/post-mask representation CSV; variants without masks repeat the
    /// shared representation in the post-mask columns.
    pub fn export_representations(
        &self,
        data: &TokenizedDataset,
        path: &std::path::Path,
    ) -> Result<(), TrainError> {
        match self {
            VariantModel::Dcmi(m) => m.export_representations(data, path)?,
            VariantModel::DAl(BaselineModel { store, encoder, config, .. })
            | VariantModel::Mtl(MtlModel { store, encoder, config, .. }) => {
                let mut out = Vec::new();
                write_repr_header(&mut out, config.dim)?;
                for i in 0..data.len() {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut graph = Graph::new();
                    let h = encoder.encode(&mut graph, store, &data.tokens[i], Mode::Eval, &mut rng)?;
                    let hv = graph.value(h);
                    write_repr_row(&mut out, data.ids[i], data.domains[i], hv, hv)?;
                }
                std::fs::write(path, out)?;
            }
        }
        Ok(())
    }
}

/// Mean component losses over one epoch. Domain and contrastive terms are
/// reported only for mask-bearing variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub supervised: f64,
    pub domain: Option<f64>,
    pub contrastive: Option<f64>,
}

/// Metric outputs and traces of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub epoch_losses: Vec<EpochLosses>,
    pub validation_macro_auc: Vec<Option<f64>>,
    pub best_epoch: usize,
    pub test: EvalReport,
    pub compensation_clamp_events: u64,
}

/// A trained model plus its report and the raw per-batch supervised-loss
/// trace (kept out of the serialized report; equivalence oracles compare
/// it bit-for-bit).
pub struct TrainOutcome {
    pub model: VariantModel,
    pub vocab: Vocab,
    pub report: RunReport,
    pub batch_supervised_trace: Vec<f64>,
}

struct BatchPlanner {
    rng: ChaCha8Rng,
    batch_size: usize,
}

impl BatchPlanner {
    /// Pre-defer epochs shuffle without replacement; class-balanced epochs
    /// draw with replacement from the sampler weights.
    fn plan(&mut self, n: usize, weights: Option<&[f64]>) -> Vec<Vec<usize>> {
        let batches = n.div_ceil(self.batch_size);
        match weights {
            None => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.rng);
                order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
            }
            Some(w) => {
                let dist = WeightedIndex::new(w).expect("validated sampler weights");
                (0..batches)
                    .map(|_| {
                        (0..self.batch_size.min(n))
                            .map(|_| dist.sample(&mut self.rng))
                            .collect()
                    })
                    .collect()
            }
        }
    }
}

fn build_baseline_batch(
    graph: &mut Graph,
    store: &ParamStore,
    encoder: &EncoderParams,
    head_for: impl Fn(usize) -> SupervisedHead,
    batch: &[BatchSample<'_>],
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TrainError> {
    let mut terms = Vec::with_capacity(batch.len());
    for sample in batch {
        let h = encoder.encode(graph, store, sample.tokens, Mode::Train, rng)?;
        let head = head_for(sample.domain);
        let logits = head.logits(graph, store, h).map_err(ModelError::from)?;
        let loss = graph
            .softmax_cross_entropy(logits, sample.label)
            .map_err(ModelError::from)?;
        terms.push(loss);
    }
    let inv = vec![1.0 / batch.len() as f64; batch.len()];
    Ok(graph
        .linear_combination(&terms, &inv)
        .map_err(ModelError::from)?)
}

fn score_dataset(
    model: &VariantModel,
    data: &TokenizedDataset,
    mode: EvalDomainMode,
) -> Result<EvalReport, TrainError> {
    let mut scores = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        scores.push(model.positive_score(&data.tokens[i], data.domains[i], mode)?);
    }
    Ok(evaluate_scores(
        &scores,
        &data.labels,
        &data.domains,
        data.num_domains,
    ))
}

/// Evaluate a trained model on a tokenized split.
pub fn evaluate(
    model: &VariantModel,
    data: &TokenizedDataset,
    mode: EvalDomainMode,
) -> Result<EvalReport, TrainError> {
    score_dataset(model, data, mode)
}

/// Train one variant on pre-split data. Per batch: encode, mask at the
/// annealed temperature, compute the variant's loss terms, route gradients
/// (compensating the domain-embedding gradients), and take an Adam step.
/// The best-validation-epoch parameter snapshot is restored before the
/// final test evaluation.
pub fn train(
    config: &TrainConfig,
    train_split: &Dataset,
    val_split: &Dataset,
    test_split: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_split.num_classes != 2 {
        return Err(TrainError::NotBinary(train_split.num_classes));
    }

    let vocab = Vocab::build(
        train_split.samples().iter().map(|s| s.text.as_str()),
        config.vocab_max,
    )?;
    let train_tok = tokenize_dataset(train_split, &vocab, config.max_tokens);
    let val_tok = tokenize_dataset(val_split, &vocab, config.max_tokens);
    let test_tok = tokenize_dataset(test_split, &vocab, config.max_tokens);

    let model_config = ModelConfig {
        dim: config.dim,
        emb_dim: config.emb_dim,
        num_classes: train_split.num_classes,
        num_domains: train_split.num_domains,
        dropout: config.dropout,
        tau_min: config.tau_min,
    };
    let mut model = match config.variant {
        Variant::Dcmi | Variant::DcmiNoDom | Variant::DcmiNoDomNoCon => {
            VariantModel::Dcmi(DcmiModel::init(model_config, vocab.size(), config.seed)?)
        }
        Variant::DAl => VariantModel::DAl(BaselineModel::init(
            model_config,
            vocab.size(),
            config.seed,
        )),
        Variant::Mtl => VariantModel::Mtl(MtlModel::init(
            model_config,
            vocab.size(),
            config.seed,
        )),
    };

    let mut adam = AdamState::new(model.store());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dropout"));
    let mut planner = BatchPlanner {
        rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batches")),
        batch_size: config.batch_size,
    };
    let (lambda1, lambda2) = config.variant.effective_lambdas(config.lambda1, config.lambda2);

    let n = train_tok.len();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut val_trace = Vec::with_capacity(config.epochs);
    let mut batch_sup_trace = Vec::new();
    let mut clamp_events = 0u64;
    let mut best: Option<(f64, usize, Vec<crate::autodiff::Tensor>)> = None;

    for epoch in 0..config.epochs {
        let weights = config
            .drs
            .then(|| drs_weights(train_split, epoch, config.epochs, config.drs_defer_fraction));
        let weight_slice = weights.as_ref().and_then(|w| {
            if w.is_uniform() {
                None
            } else {
                Some(w.values())
            }
        });
        let plan = planner.plan(n, weight_slice);
        let batches_per_epoch = plan.len();

        let mut sums = (0.0, 0.0, 0.0);
        for (batch_ix, indices) in plan.iter().enumerate() {
            let tau = anneal_temperature(batch_ix, batches_per_epoch, config.tau_min);
            let batch: Vec<BatchSample<'_>> = indices
                .iter()
                .map(|&i| BatchSample {
                    tokens: &train_tok.tokens[i],
                    label: train_tok.labels[i],
                    domain: train_tok.domains[i],
                })
                .collect();

            let step = step_batch(
                &mut model,
                &batch,
                tau,
                lambda1,
                lambda2,
                config,
                &mut adam,
                &mut dropout_rng,
            )
            .map_err(|source| TrainError::Diverged {
                epoch,
                batch: batch_ix,
                source: Box::new(source),
            })?;
            clamp_events += step.clamp_events;
            batch_sup_trace.push(step.supervised);
            sums.0 += step.supervised;
            sums.1 += step.domain;
            sums.2 += step.contrastive;
        }

        let b = batches_per_epoch as f64;
        epoch_losses.push(EpochLosses {
            supervised: sums.0 / b,
            domain: config.variant.uses_masks().then_some(sums.1 / b),
            contrastive: config.variant.uses_masks().then_some(sums.2 / b),
        });

        if let VariantModel::Dcmi(m) = &mut model {
            m.domains.set_temperature(config.tau_min)?;
        }
        let val_report = score_dataset(&model, &val_tok, config.eval_domain)?;
        val_trace.push(val_report.macro_auc);
        let candidate = val_report.macro_auc.unwrap_or(f64::NEG_INFINITY);
        let improved = best.as_ref().is_none_or(|(b, _, _)| candidate > *b);
        if improved {
            best = Some((candidate, epoch, model.store().snapshot()));
        }
    }

    let (_, best_epoch, snapshot) = best.expect("epochs >= 1 guarantees one snapshot");
    model.store_mut().restore(&snapshot);
    let test = score_dataset(&model, &test_tok, config.eval_domain)?;

    let report = RunReport {
        variant: config.variant.name().to_string(),
        seed: config.seed,
        config: config.clone(),
        epoch_losses,
        validation_macro_auc: val_trace,
        best_epoch,
        test,
        compensation_clamp_events: clamp_events,
    };
    Ok(TrainOutcome {
        model,
        vocab,
        report,
        batch_supervised_trace: batch_sup_trace,
    })
}

struct StepOutcome {
    supervised: f64,
    domain: f64,
    contrastive: f64,
    clamp_events: u64,
}

#[allow(clippy::too_many_arguments)]
fn step_batch(
    model: &mut VariantModel,
    batch: &[BatchSample<'_>],
    tau: f64,
    lambda1: f64,
    lambda2: f64,
    config: &TrainConfig,
    adam: &mut AdamState,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, TrainError> {
    match model {
        VariantModel::Dcmi(m) => {
            m.domains.set_temperature(tau.clamp(m.domains.tau_min, 1.0))?;
            let opts = ForwardOptions {
                mode: Mode::Train,
                pin_masks: config.pin_masks,
                compensate: true,
            };
            let BatchComputation {
                graph,
                joint,
                supervised,
                domain,
                contrastive,
            } = m.batch_graph(batch, tau, lambda1, lambda2, opts, dropout_rng)?;
            let grads = graph.backward(joint).map_err(ModelError::from)?;
            let clamp_events = grads.clamp_events;
            adam_step(&mut m.store, &grads, adam, config.learning_rate)?;
            Ok(StepOutcome {
                supervised: graph.scalar_value(supervised),
                domain: graph.scalar_value(domain),
                contrastive: graph.scalar_value(contrastive),
                clamp_events,
            })
        }
        VariantModel::DAl(m) => {
            let mut graph = Graph::new();
            let head = m.head.clone();
            let loss = build_baseline_batch(
                &mut graph,
                &m.store,
                &m.encoder,
                |_| head.clone(),
                batch,
                dropout_rng,
            )?;
            let grads = graph.backward(loss).map_err(ModelError::from)?;
            adam_step(&mut m.store, &grads, adam, config.learning_rate)?;
            Ok(StepOutcome {
                supervised: graph.scalar_value(loss),
                domain: 0.0,
                contrastive: 0.0,
                clamp_events: 0,
            })
        }
        VariantModel::Mtl(m) => {
            let mut graph = Graph::new();
            let heads = m.heads.clone();
            let loss = build_baseline_batch(
                &mut graph,
                &m.store,
                &m.encoder,
                |domain| heads[domain].clone(),
                batch,
                dropout_rng,
            )?;
            let grads = graph.backward(loss).map_err(ModelError::from)?;
            adam_step(&mut m.store, &grads, adam, config.learning_rate)?;
            Ok(StepOutcome {
                supervised: graph.scalar_value(loss),
                domain: 0.0,
                contrastive: 0.0,
                clamp_events: 0,
            })
        }
    }
}

/// Mean and sample standard deviation; a single value has zero deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub macro_auc: Option<f64>,
    pub micro_auc: Option<f64>,
}

/// Mean +/- std of the metrics over seed-repeated runs of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub variant: String,
    pub seeds: Vec<SeedMetrics>,
    pub macro_mean: Option<f64>,
    pub macro_std: Option<f64>,
    pub micro_mean: Option<f64>,
    pub micro_std: Option<f64>,
    pub per_domain_mean: Vec<Option<f64>>,
    /// True when at least one seed run aborted.
    pub partial: bool,
}

/// Repeat `train` across seeds derived from `config.seed`, aggregating
/// macro/micro AUC. Aborted runs mark the aggregate partial but do not
/// cancel the remaining seeds. Returns the per-seed outcomes alongside.
pub fn run_seeds(
    config: &TrainConfig,
    train_split: &Dataset,
    val_split: &Dataset,
    test_split: &Dataset,
    n_seeds: usize,
) -> Result<(AggregateReport, Vec<TrainOutcome>), TrainError> {
    if n_seeds < 1 {
        return Err(TrainError::InvalidConfig("n_seeds must be >= 1".into()));
    }
    let mut outcomes = Vec::with_capacity(n_seeds);
    let mut partial = false;
    for i in 0..n_seeds {
        let mut cfg = config.clone();
        cfg.seed = derive_seed(config.seed, &format!("seed/{i}"));
        match train(&cfg, train_split, val_split, test_split) {
            Ok(outcome) => outcomes.push(outcome),
            Err(_) => partial = true,
        }
    }
    let reports: Vec<&RunReport> = outcomes.iter().map(|o| &o.report).collect();
    let aggregate = aggregate_run_reports(config.variant.name(), &reports, partial);
    Ok((aggregate, outcomes))
}

/// Aggregate per-seed reports of one variant into mean +/- std metrics.
pub fn aggregate_run_reports(
    variant: &str,
    reports: &[&RunReport],
    partial: bool,
) -> AggregateReport {
    let seeds: Vec<SeedMetrics> = reports
        .iter()
        .map(|r| SeedMetrics {
            seed: r.seed,
            macro_auc: r.test.macro_auc,
            micro_auc: r.test.micro_auc,
        })
        .collect();
    let macros: Vec<f64> = seeds.iter().filter_map(|s| s.macro_auc).collect();
    let micros: Vec<f64> = seeds.iter().filter_map(|s| s.micro_auc).collect();
    let (macro_mean, macro_std) = if macros.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&macros);
        (Some(m), Some(s))
    };
    let (micro_mean, micro_std) = if micros.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&micros);
        (Some(m), Some(s))
    };

    let num_domains = reports
        .first()
        .map(|r| r.test.per_domain.len())
        .unwrap_or(0);
    let per_domain_mean = (0..num_domains)
        .map(|d| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.test.per_domain[d]).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect();

    AggregateReport {
        variant: variant.to_string(),
        seeds,
        macro_mean,
        macro_std,
        micro_mean,
        micro_std,
        per_domain_mean,
        partial,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn adam_leaves_parameters_unchanged_on_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, -2.0]));
        let mut state = AdamState::new(&store);

        let mut graph = Graph::new();
        let node = graph.param(&store, p).unwrap();
        let stopped = graph.stop_gradient(node).unwrap();
        let loss = graph.sum(stopped).unwrap();
        let grads = graph.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[0.0, 0.0]);

        adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        assert_eq!(store.values(p), &[1.0, -2.0]);
    }

    #[test]
    fn first_adam_step_moves_against_the_gradient_sign_by_lr() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![0.0, 0.0]));
        let mut state = AdamState::new(&store);
        let mut graph = Graph::new();
        let node = graph.param(&store, p).unwrap();
        let coeffs = graph.vector(&[2.5, -0.5]).unwrap();
        let prod = graph.mul(node, coeffs).unwrap();
        let loss = graph.sum(prod).unwrap();
        let grads = graph.backward(loss).unwrap();

        let lr = 0.01;
        adam_step(&mut store, &grads, &mut state, lr).unwrap();
        // With m_hat = g and v_hat = g^2, the first update is
        // -lr * g / (|g| + eps) = -lr * sign(g) up to eps.
        assert!((store.values(p)[0] - (-lr)).abs() < lr * 1e-6);
        assert!((store.values(p)[1] - lr).abs() < lr * 1e-6);
    }

    #[test]
    fn identical_gradients_produce_identical_updates() {
        let run = || {
            let mut store = ParamStore::new();
            let p = store.add("p", Tensor::vector(vec![0.3, 0.7, -0.2]));
            let mut state = AdamState::new(&store);
            for _ in 0..3 {
                let mut graph = Graph::new();
                let node = graph.param(&store, p).unwrap();
                let sq = graph.mul(node, node).unwrap();
                let loss = graph.sum(sq).unwrap();
                let grads = graph.backward(loss).unwrap();
                adam_step(&mut store, &grads, &mut state, 0.05).unwrap();
            }
            store.values(p).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_aborts_with_the_parameter_name() {
        // Forward rejects non-finite values, so inject the NaN through a
        // poisoned gradient transform.
        struct Poison;
        impl crate::autodiff::GradientTransform for Poison {
            fn apply(&self, grad: &mut [f64]) -> u64 {
                grad[0] = f64::NAN;
                0
            }
        }
        let mut store = ParamStore::new();
        let p = store.add("weights", Tensor::vector(vec![1.0]));
        let mut state = AdamState::new(&store);
        let mut g = Graph::new();
        let node = g.param(&store, p).unwrap();
        let loss = g.sum(node).unwrap();
        g.register_transform(p, Box::new(Poison));
        let injected = g.backward(loss).unwrap();
        let err = adam_step(&mut store, &injected, &mut state, 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(name) if name == "weights"));
    }

    #[test]
    fn mean_std_conventions() {
        let (m, s) = mean_std(&[0.7]);
        assert_eq!((m, s), (0.7, 0.0));
        let (m, s) = mean_std(&[0.5, 0.5, 0.5]);
        assert_eq!((m, s), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("nope"), None);
    }

    #[test]
    fn ablation_lambdas_are_forced_to_zero() {
        assert_eq!(Variant::Dcmi.effective_lambdas(50.0, 6.0), (50.0, 6.0));
        assert_eq!(Variant::DcmiNoDom.effective_lambdas(50.0, 6.0), (0.0, 6.0));
        assert_eq!(
            Variant::DcmiNoDomNoCon.effective_lambdas(50.0, 6.0),
            (0.0, 0.0)
        );
    }

    #[test]
    fn config_validation_names_the_offending_field() {
        let cfg = TrainConfig {
            lambda1: -1.0,
            ..TrainConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("lambda1"));
    }
}
