//! The DCMI mechanism: per-domain masks over a shared representation,
//! gradient compensation for the mask embeddings, an auxiliary domain
//! classifier producing soft domain assignments, a contrastive transfer
//! objective over relevance-weighted augmented views, and the joint loss
//! whose terms update disjoint parameter groups.
//!
//! Gradient routing is structural: the domain classifier reads a
//! stop-gradient copy of the shared representation, and the soft
//! assignments enter the augmented view and the contrastive targets as
//! detached constants. Each loss term therefore reaches exactly the
//! parameter groups in [`ParameterGroups::routed_groups`] with no masking
//! of gradients after the fact.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    AutodiffError, GradientTransform, Graph, NodeId, ParamId, ParamStore, Tensor,
};
use crate::data::TokenizedDataset;
use crate::derive_seed;
use crate::encoder::{EncoderError, EncoderParams, Mode};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("tau_min must be in (0, 1], got {0}")]
    InvalidTauMin(f64),
    #[error("loss weights must be non-negative, got lambda1={0}, lambda2={1}")]
    NegativeWeight(f64, f64),
    #[error("domain id {id} out of range for {domains} domains")]
    BadDomain { id: usize, domains: usize },
    #[error("class label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("soft domain assignments sum to zero")]
    DegenerateAssignments,
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("parameter groups do not partition the store: {0}")]
    BadPartition(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("representation export: {0}")]
    Io(#[from] std::io::Error),
}

/// `m = sigmoid(v / tau)`, elementwise; every entry strictly in (0, 1).
pub fn domain_mask(graph: &mut Graph, v: NodeId, tau: f64) -> Result<NodeId, ModelError> {
    if tau <= 0.0 {
        return Err(ModelError::InvalidTemperature(tau));
    }
    let scaled = graph.scale(v, 1.0 / tau)?;
    Ok(graph.sigmoid(scaled)?)
}

/// `h_hat = h ⊙ m`, the domain-aware representation.
pub fn mask_representation(graph: &mut Graph, h: NodeId, m: NodeId) -> Result<NodeId, ModelError> {
    Ok(graph.mul(h, m)?)
}

/// Linear schedule from 1 at the first batch of an epoch down to `tau_min`
/// at the last. Degenerate epochs (fewer than 2 batches) sit at the floor.
pub fn anneal_temperature(batch_index: usize, batches_per_epoch: usize, tau_min: f64) -> f64 {
    if batches_per_epoch < 2 {
        return tau_min;
    }
    debug_assert!(batch_index < batches_per_epoch);
    if batch_index == batches_per_epoch - 1 {
        return tau_min; // exact at the endpoint
    }
    let t = batch_index as f64 / (batches_per_epoch - 1) as f64;
    1.0 - (1.0 - tau_min) * t
}

const COSH_CLAMP: f64 = 50.0;

/// Elementwise compensation multiplier
/// `tau*(cosh(v/tau)+1) / (tau_min*(cosh(v)+1))`, with both cosh arguments
/// clamped to ±50 so the ratio stays finite as the sigmoid saturates.
/// Returns the multiplier and whether a clamp activated.
pub fn compensation_multiplier(v: f64, tau: f64, tau_min: f64) -> (f64, bool) {
    let a = v / tau;
    let clamped = a.abs() > COSH_CLAMP || v.abs() > COSH_CLAMP;
    let a = a.clamp(-COSH_CLAMP, COSH_CLAMP);
    let b = v.clamp(-COSH_CLAMP, COSH_CLAMP);
    let mult = tau * (a.cosh() + 1.0) / (tau_min * (b.cosh() + 1.0));
    (mult, clamped)
}

/// Rescales a domain embedding's accumulated gradient so updates stay
/// effective while the annealed sigmoid saturates. Registered per embedding
/// and applied to the total gradient reaching it in a step.
#[derive(Debug, Clone)]
pub struct CompensationTransform {
    v: Vec<f64>,
    tau: f64,
    tau_min: f64,
}

impl CompensationTransform {
    pub fn new(v: Vec<f64>, tau: f64, tau_min: f64) -> Result<Self, ModelError> {
        if tau <= 0.0 {
            return Err(ModelError::InvalidTemperature(tau));
        }
        if tau_min <= 0.0 || tau_min > 1.0 {
            return Err(ModelError::InvalidTauMin(tau_min));
        }
        Ok(CompensationTransform { v, tau, tau_min })
    }
}

impl GradientTransform for CompensationTransform {
    fn apply(&self, grad: &mut [f64]) -> u64 {
        debug_assert_eq!(grad.len(), self.v.len());
        let mut clamped = 0;
        for (g, &v) in grad.iter_mut().zip(&self.v) {
            let (mult, hit) = compensation_multiplier(v, self.tau, self.tau_min);
            *g *= mult;
            if hit {
                clamped += 1;
            }
        }
        clamped
    }
}

/// M trainable mask embeddings plus the annealing state.
#[derive(Debug, Clone)]
pub struct DomainEmbeddingTable {
    pub ids: Vec<ParamId>,
    pub tau_min: f64,
    current_tau: f64,
}

impl DomainEmbeddingTable {
    pub fn init(
        store: &mut ParamStore,
        num_domains: usize,
        dim: usize,
        tau_min: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        if tau_min <= 0.0 || tau_min > 1.0 {
            return Err(ModelError::InvalidTauMin(tau_min));
        }
        let ids = (0..num_domains)
            .map(|j| {
                let values = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                store.add(format!("domain_embeddings.{j}"), Tensor::vector(values))
            })
            .collect();
        Ok(DomainEmbeddingTable {
            ids,
            tau_min,
            current_tau: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn current_tau(&self) -> f64 {
        self.current_tau
    }

    pub fn set_temperature(&mut self, tau: f64) -> Result<(), ModelError> {
        if tau < self.tau_min || tau > 1.0 {
            return Err(ModelError::InvalidTemperature(tau));
        }
        self.current_tau = tau;
        Ok(())
    }
}

/// Affine map `dim -> classes` read through softmax by the caller.
#[derive(Debug, Clone)]
pub struct SupervisedHead {
    pub w: ParamId,
    pub b: ParamId,
    pub classes: usize,
}

impl SupervisedHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = (6.0 / (dim + classes) as f64).sqrt();
        let values = (0..classes * dim).map(|_| rng.gen_range(-scale..scale)).collect();
        let w = store.add(
            format!("{prefix}.w"),
            Tensor::matrix(classes, dim, values).expect("consistent shape"),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(vec![classes]));
        SupervisedHead { w, b, classes }
    }

    pub fn logits(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        input: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let w = graph.param(store, self.w)?;
        let b = graph.param(store, self.b)?;
        let z = graph.matvec(w, input)?;
        graph.add(z, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Affine map `dim -> domains` with per-output sigmoid; reads a
/// stop-gradient copy of the shared representation so its loss trains
/// nothing outside the head.
#[derive(Debug, Clone)]
pub struct DomainClassifierHead {
    pub w: ParamId,
    pub b: ParamId,
    pub domains: usize,
}

/// Logits and sigmoid scores of the domain classifier for one sample.
#[derive(Debug, Clone, Copy)]
pub struct DomainScores {
    pub logits: NodeId,
    pub scores: NodeId,
}

impl DomainClassifierHead {
    pub fn init(
        store: &mut ParamStore,
        dim: usize,
        domains: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = (6.0 / (dim + domains) as f64).sqrt();
        let values = (0..domains * dim).map(|_| rng.gen_range(-scale..scale)).collect();
        let w = store.add(
            "domain_head.w",
            Tensor::matrix(domains, dim, values).expect("consistent shape"),
        );
        let b = store.add("domain_head.b", Tensor::zeros(vec![domains]));
        DomainClassifierHead { w, b, domains }
    }

    /// `a = sigmoid(affine(stop_gradient(h)))`.
    pub fn scores(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        h: NodeId,
    ) -> Result<DomainScores, AutodiffError> {
        let stopped = graph.stop_gradient(h)?;
        let w = graph.param(store, self.w)?;
        let b = graph.param(store, self.b)?;
        let z = graph.matvec(w, stopped)?;
        let logits = graph.add(z, b)?;
        let scores = graph.sigmoid(logits)?;
        Ok(DomainScores { logits, scores })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Relevance-weighted average of the per-domain masked representations.
/// The weights `a / sum(a)` are detached constants; gradients flow only
/// through the representations themselves.
pub fn augmented_view(
    graph: &mut Graph,
    masked: &[NodeId],
    assignments: &[f64],
) -> Result<NodeId, ModelError> {
    let total: f64 = assignments.iter().sum();
    if total <= 0.0 {
        return Err(ModelError::DegenerateAssignments);
    }
    let weights: Vec<f64> = assignments.iter().map(|a| a / total).collect();
    Ok(graph.linear_combination(masked, &weights)?)
}

/// Soft binary cross-entropy between the augmented view's similarity to
/// each domain-aware representation and the detached soft assignments.
/// Both sides are l2-normalized immediately before the dot products; the
/// normalized copies exist only inside this loss.
pub fn contrastive_loss(
    graph: &mut Graph,
    augmented: NodeId,
    masked: &[NodeId],
    assignments: &[f64],
) -> Result<NodeId, ModelError> {
    let norm_aug = graph.l2_normalize(augmented)?;
    let mut dots = Vec::with_capacity(masked.len());
    for &m in masked {
        let norm_m = graph.l2_normalize(m)?;
        dots.push(graph.dot(norm_aug, norm_m)?);
    }
    let stacked = graph.concat(&dots)?;
    Ok(graph.bce_with_logits(stacked, assignments, false)?)
}

/// Cross-entropy of the softmax head on a domain-aware representation.
pub fn supervised_loss(
    graph: &mut Graph,
    store: &ParamStore,
    head: &SupervisedHead,
    input: NodeId,
    label: usize,
) -> Result<NodeId, ModelError> {
    if label >= head.classes {
        return Err(ModelError::BadLabel {
            label,
            classes: head.classes,
        });
    }
    let logits = head.logits(graph, store, input)?;
    Ok(graph.softmax_cross_entropy(logits, label)?)
}

/// Mean binary cross-entropy of the domain logits against the one-hot
/// dataset-provided domain.
pub fn domain_loss(
    graph: &mut Graph,
    logits: NodeId,
    domain: usize,
    num_domains: usize,
) -> Result<NodeId, ModelError> {
    if domain >= num_domains {
        return Err(ModelError::BadDomain {
            id: domain,
            domains: num_domains,
        });
    }
    let mut targets = vec![0.0; num_domains];
    targets[domain] = 1.0;
    Ok(graph.bce_with_logits(logits, &targets, true)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Supervised,
    Domain,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Body,
    DomainEmbeddings,
    SupervisedHead,
    DomainHead,
}

pub const ALL_GROUPS: [ParamGroup; 4] = [
    ParamGroup::Body,
    ParamGroup::DomainEmbeddings,
    ParamGroup::SupervisedHead,
    ParamGroup::DomainHead,
];

/// Named parameter groups partitioning every trainable tensor, plus the
/// per-loss routing table.
#[derive(Debug, Clone)]
pub struct ParameterGroups {
    pub body: Vec<ParamId>,
    pub domain_embeddings: Vec<ParamId>,
    pub supervised_head: Vec<ParamId>,
    pub domain_head: Vec<ParamId>,
}

impl ParameterGroups {
    pub fn members(&self, group: ParamGroup) -> &[ParamId] {
        match group {
            ParamGroup::Body => &self.body,
            ParamGroup::DomainEmbeddings => &self.domain_embeddings,
            ParamGroup::SupervisedHead => &self.supervised_head,
            ParamGroup::DomainHead => &self.domain_head,
        }
    }

    /// Groups a loss term is allowed to update.
    pub fn routed_groups(kind: LossKind) -> &'static [ParamGroup] {
        match kind {
            LossKind::Supervised => &[
                ParamGroup::Body,
                ParamGroup::DomainEmbeddings,
                ParamGroup::SupervisedHead,
            ],
            LossKind::Domain => &[ParamGroup::DomainHead],
            LossKind::Contrastive => &[ParamGroup::Body, ParamGroup::DomainEmbeddings],
        }
    }

    /// Groups a loss term must leave untouched (exact zeros).
    pub fn blocked_groups(kind: LossKind) -> Vec<ParamGroup> {
        ALL_GROUPS
            .iter()
            .copied()
            .filter(|g| !Self::routed_groups(kind).contains(g))
            .collect()
    }

    pub fn group_of(&self, id: ParamId) -> Option<ParamGroup> {
        ALL_GROUPS
            .iter()
            .copied()
            .find(|&g| self.members(g).contains(&id))
    }

    /// Disjointness and exhaustiveness over the store.
    pub fn verify_partition(&self, store: &ParamStore) -> Result<(), ModelError> {
        let mut seen = vec![0usize; store.len()];
        for group in ALL_GROUPS {
            for id in self.members(group) {
                seen[id.index()] += 1;
            }
        }
        for id in store.ids() {
            match seen[id.index()] {
                0 => {
                    return Err(ModelError::BadPartition(format!(
                        "parameter {} is in no group",
                        store.name(id)
                    )))
                }
                1 => {}
                n => {
                    return Err(ModelError::BadPartition(format!(
                        "parameter {} is in {n} groups",
                        store.name(id)
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub emb_dim: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub dropout: f64,
    pub tau_min: f64,
}

/// One training sample already tokenized.
#[derive(Debug, Clone, Copy)]
pub struct BatchSample<'a> {
    pub tokens: &'a [u32],
    pub label: usize,
    pub domain: usize,
}

/// Knobs for assembling a batch graph.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Replace every mask with constant ones (equivalence probes).
    pub pin_masks: bool,
    /// Register the compensation transform on each domain embedding.
    pub compensate: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            pin_masks: false,
            compensate: true,
        }
    }
}

/// The assembled joint objective for one mini-batch.
pub struct BatchComputation {
    pub graph: Graph,
    pub joint: NodeId,
    pub supervised: NodeId,
    pub domain: NodeId,
    pub contrastive: NodeId,
}

/// Encoder, domain embeddings, shared supervised head, and domain
/// classifier head, with per-loss parameter-group routing.
#[derive(Debug, Clone)]
pub struct DcmiModel {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub domains: DomainEmbeddingTable,
    pub supervised: SupervisedHead,
    pub domain_head: DomainClassifierHead,
    pub groups: ParameterGroups,
    pub config: ModelConfig,
}

impl DcmiModel {
    /// Initialization draws from per-component seed streams so components
    /// shared with baseline variants are bit-identical for a given seed.
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
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
        let mut rng_dom = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/domain_embeddings"));
        let domains = DomainEmbeddingTable::init(
            &mut store,
            config.num_domains,
            config.dim,
            config.tau_min,
            &mut rng_dom,
        )?;
        let mut rng_sup = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/supervised_head"));
        let supervised = SupervisedHead::init(
            &mut store,
            "supervised_head",
            config.dim,
            config.num_classes,
            &mut rng_sup,
        );
        let mut rng_head = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init/domain_head"));
        let domain_head =
            DomainClassifierHead::init(&mut store, config.dim, config.num_domains, &mut rng_head);

        let groups = ParameterGroups {
            body: encoder.param_ids(),
            domain_embeddings: domains.ids.clone(),
            supervised_head: supervised.param_ids(),
            domain_head: domain_head.param_ids(),
        };
        groups.verify_partition(&store)?;
        Ok(DcmiModel {
            store,
            encoder,
            domains,
            supervised,
            domain_head,
            groups,
            config,
        })
    }

    fn mask_nodes_with(
        &self,
        store: &ParamStore,
        graph: &mut Graph,
        tau: f64,
        pin: bool,
    ) -> Result<Vec<NodeId>, ModelError> {
        let mut masks = Vec::with_capacity(self.domains.len());
        for &vid in &self.domains.ids {
            if pin {
                masks.push(graph.constant(&Tensor::vector(vec![1.0; self.config.dim]))?);
            } else {
                let v = graph.param(store, vid)?;
                masks.push(domain_mask(graph, v, tau)?);
            }
        }
        Ok(masks)
    }

    /// Build the joint objective `L_sup + lambda1*L_dom + lambda2*L_con`
    /// for one mini-batch at temperature `tau`. Component losses are
    /// batch means and stay addressable for probes and traces.
    pub fn batch_graph(
        &self,
        batch: &[BatchSample<'_>],
        tau: f64,
        lambda1: f64,
        lambda2: f64,
        opts: ForwardOptions,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<BatchComputation, ModelError> {
        self.batch_graph_with_store(
            &self.store,
            batch,
            tau,
            lambda1,
            lambda2,
            opts,
            dropout_rng,
            None,
        )
    }

    /// [`DcmiModel::batch_graph`] against an external parameter store with
    /// this model's layout. Finite-difference checks perturb a store copy
    /// and pass the reference graph's stop values as `pins` so the numeric
    /// gradient sees the gated function.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_graph_with_store(
        &self,
        store: &ParamStore,
        batch: &[BatchSample<'_>],
        tau: f64,
        lambda1: f64,
        lambda2: f64,
        opts: ForwardOptions,
        dropout_rng: &mut ChaCha8Rng,
        pins: Option<Vec<Vec<f64>>>,
    ) -> Result<BatchComputation, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(ModelError::NegativeWeight(lambda1, lambda2));
        }
        let mut graph = match pins {
            Some(p) => Graph::new_with_pinned_stops(p),
            None => Graph::new(),
        };
        let masks = self.mask_nodes_with(store, &mut graph, tau, opts.pin_masks)?;

        let mut sup_terms = Vec::with_capacity(batch.len());
        let mut dom_terms = Vec::with_capacity(batch.len());
        let mut con_terms = Vec::with_capacity(batch.len());
        for sample in batch {
            if sample.domain >= self.config.num_domains {
                return Err(ModelError::BadDomain {
                    id: sample.domain,
                    domains: self.config.num_domains,
                });
            }
            let h = self
                .encoder
                .encode(&mut graph, store, sample.tokens, opts.mode, dropout_rng)?;

            let scores = self.domain_head.scores(&mut graph, store, h)?;
            // Detached copies: soft assignments act as constants in the
            // augmented view and the contrastive targets. Reading them off
            // a stop node makes the detachment visible to pinned-stop
            // finite differences.
            let detached = graph.stop_gradient(scores.scores)?;
            let assignments = graph.value(detached).to_vec();

            let mut masked = Vec::with_capacity(masks.len());
            for &m in &masks {
                masked.push(mask_representation(&mut graph, h, m)?);
            }

            let sup = supervised_loss(
                &mut graph,
                store,
                &self.supervised,
                masked[sample.domain],
                sample.label,
            )?;
            sup_terms.push(sup);

            let dom = domain_loss(
                &mut graph,
                scores.logits,
                sample.domain,
                self.config.num_domains,
            )?;
            dom_terms.push(dom);

            let augmented = augmented_view(&mut graph, &masked, &assignments)?;
            let con = contrastive_loss(&mut graph, augmented, &masked, &assignments)?;
            con_terms.push(con);
        }

        let inv = vec![1.0 / batch.len() as f64; batch.len()];
        let supervised = graph.linear_combination(&sup_terms, &inv)?;
        let domain = graph.linear_combination(&dom_terms, &inv)?;
        let contrastive = graph.linear_combination(&con_terms, &inv)?;
        let joint = graph.linear_combination(
            &[supervised, domain, contrastive],
            &[1.0, lambda1, lambda2],
        )?;

        if opts.compensate && !opts.pin_masks {
            for &vid in &self.domains.ids {
                let transform = CompensationTransform::new(
                    store.values(vid).to_vec(),
                    tau,
                    self.domains.tau_min,
                )?;
                graph.register_transform(vid, Box::new(transform));
            }
        }

        Ok(BatchComputation {
            graph,
            joint,
            supervised,
            domain,
            contrastive,
        })
    }

    /// Pre- and post-mask representations for one sample in eval mode,
    /// with the given domain's mask at the temperature floor.
    pub fn representation(
        &self,
        tokens: &[u32],
        domain: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if domain >= self.config.num_domains {
            return Err(ModelError::BadDomain {
                id: domain,
                domains: self.config.num_domains,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
        let mut graph = Graph::new();
        let h = self
            .encoder
            .encode(&mut graph, &self.store, tokens, Mode::Eval, &mut rng)?;
        let v = graph.param(&self.store, self.domains.ids[domain])?;
        let m = domain_mask(&mut graph, v, self.domains.tau_min)?;
        let hhat = mask_representation(&mut graph, h, m)?;
        Ok((graph.value(h).to_vec(), graph.value(hhat).to_vec()))
    }

    /// Softmax class probabilities using `domain`'s mask (eval mode).
    pub fn class_probabilities(
        &self,
        tokens: &[u32],
        domain: usize,
    ) -> Result<Vec<f64>, ModelError> {
        if domain >= self.config.num_domains {
            return Err(ModelError::BadDomain {
                id: domain,
                domains: self.config.num_domains,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut graph = Graph::new();
        let h = self
            .encoder
            .encode(&mut graph, &self.store, tokens, Mode::Eval, &mut rng)?;
        let v = graph.param(&self.store, self.domains.ids[domain])?;
        let m = domain_mask(&mut graph, v, self.domains.tau_min)?;
        let hhat = mask_representation(&mut graph, h, m)?;
        let logits = self.supervised.logits(&mut graph, &self.store, hhat)?;
        Ok(softmax(graph.value(logits)))
    }

    /// Sigmoid relevance scores of the domain classifier (eval mode).
    pub fn domain_assignments(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut graph = Graph::new();
        let h = self
            .encoder
            .encode(&mut graph, &self.store, tokens, Mode::Eval, &mut rng)?;
        let scores = self.domain_head.scores(&mut graph, &self.store, h)?;
        Ok(graph.value(scores.scores).to_vec())
    }

    /// CSV of pre- and post-mask representations, one row per sample with
    /// its dataset-provided domain. Header:
    /// `sample_id,domain_id,h_0..h_{d-1},hhat_0..hhat_{d-1}`; values carry
    /// 9 significant digits. Deterministic, so re-export without retraining
    /// is byte-identical.
    pub fn export_representations(
        &self,
        data: &TokenizedDataset,
        path: &Path,
    ) -> Result<(), ModelError> {
        let mut out = Vec::new();
        write_repr_header(&mut out, self.config.dim)?;
        for i in 0..data.len() {
            let (h, hhat) = self.representation(&data.tokens[i], data.domains[i])?;
            write_repr_row(&mut out, data.ids[i], data.domains[i], &h, &hhat)?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub(crate) fn write_repr_header(out: &mut Vec<u8>, dim: usize) -> std::io::Result<()> {
    write!(out, "sample_id,domain_id")?;
    for k in 0..dim {
        write!(out, ",h_{k}")?;
    }
    for k in 0..dim {
        write!(out, ",hhat_{k}")?;
    }
    writeln!(out)
}

pub(crate) fn write_repr_row(
    out: &mut Vec<u8>,
    sample_id: usize,
    domain_id: usize,
    h: &[f64],
    hhat: &[f64],
) -> std::io::Result<()> {
    write!(out, "{sample_id},{domain_id}")?;
    for v in h.iter().chain(hhat) {
        write!(out, ",{v:.8e}")?;
    }
    writeln!(out)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
