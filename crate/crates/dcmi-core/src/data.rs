//! Dataset model, JSONL ingestion, stratified splits, down-sampling,
//! deferred class-balanced sampling weights, and a synthetic multi-domain
//! generator with controllable class imbalance, domain imbalance, and
//! domain divergence.
//!
//! Divergence is lexical: every domain draws its sentiment tokens from one
//! shared pool with a canonical polarity mapping, and the mapping is
//! flipped for domains in the inverted set. Domains in one similarity
//! group must agree on inversion status, so a group shares one
//! sentiment-token polarity mapping by construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{tokenize, Vocab, UNKNOWN_ID};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("down-sampling factor must be at least 1")]
    BadFactor,
    #[error("synthetic spec: {0}")]
    BadSpec(String),
    #[error("sample {id}: label {label} out of range for {classes} classes")]
    BadLabel { id: usize, label: usize, classes: usize },
    #[error("sample {id}: domain {domain} out of range for {domains} domains")]
    BadDomain { id: usize, domain: usize, domains: usize },
}

/// One labeled text with its dataset-provided domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub text: String,
    pub label: usize,
    pub domain: usize,
}

/// Immutable collection of samples with class/domain metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    samples: Vec<Sample>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub domain_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        num_classes: usize,
        num_domains: usize,
        domain_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Empty);
        }
        debug_assert_eq!(domain_names.len(), num_domains);
        for s in &samples {
            if s.label >= num_classes {
                return Err(DataError::BadLabel {
                    id: s.id,
                    label: s.label,
                    classes: num_classes,
                });
            }
            if s.domain >= num_domains {
                return Err(DataError::BadDomain {
                    id: s.id,
                    domain: s.domain,
                    domains: num_domains,
                });
            }
        }
        Ok(Dataset {
            samples,
            num_classes,
            num_domains,
            domain_names,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample counts per (domain, class) cell.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.num_classes]; self.num_domains];
        for s in &self.samples {
            counts[s.domain][s.label] += 1;
        }
        counts
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_domains];
        for s in &self.samples {
            counts[s.domain] += 1;
        }
        counts
    }

    fn subset(&self, mut indices: Vec<usize>) -> Dataset {
        indices.sort_unstable();
        Dataset {
            samples: indices.into_iter().map(|i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            domain_names: self.domain_names.clone(),
        }
    }
}

/// Declarative description of a synthetic multi-domain benchmark.
///
/// Each sample's text mixes three token kinds: shared sentiment tokens
/// whose polarity matches the label (flipped for inverted domains),
/// domain marker tokens identifying the domain, and shared noise tokens.
///
/// Similarity is carried by the groups: every similarity group owns a
/// polarity mapping over the shared sentiment pool, drawn from the spec
/// seed, so same-group domains are positively correlated, an inverted
/// domain anti-correlates with its group, and different groups are
/// uncorrelated. A quarter of each sample's marker draws come from a
/// random same-group peer domain, so samples carry instance-level
/// relevance to similar domains and a domain classifier can ground its
/// soft assignments lexically even for rare domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domain_sizes: Vec<usize>,
    pub positive_rate: Vec<f64>,
    pub sentiment_tokens: usize,
    pub domain_tokens: usize,
    pub noise_tokens: usize,
    pub sentiment_per_sample: usize,
    pub domain_per_sample: usize,
    pub noise_per_sample: usize,
    pub similarity_groups: Vec<Vec<usize>>,
    pub inverted_domains: BTreeSet<usize>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn num_domains(&self) -> usize {
        self.domain_sizes.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let m = self.num_domains();
        if m == 0 {
            return Err(DataError::BadSpec("at least one domain required".into()));
        }
        if self.domain_sizes.contains(&0) {
            return Err(DataError::BadSpec("every domain needs at least one sample".into()));
        }
        if self.positive_rate.len() != m {
            return Err(DataError::BadSpec(format!(
                "positive_rate has {} entries for {m} domains",
                self.positive_rate.len()
            )));
        }
        if self.positive_rate.iter().any(|&r| r <= 0.0 || r >= 1.0) {
            return Err(DataError::BadSpec("positive rates must lie in (0, 1)".into()));
        }
        if self.sentiment_per_sample > 0 && self.sentiment_tokens < 2 {
            return Err(DataError::BadSpec(
                "sentiment pool needs at least 2 tokens (one per polarity)".into(),
            ));
        }
        if self.domain_per_sample > 0 && self.domain_tokens == 0 {
            return Err(DataError::BadSpec("domain token pool is empty".into()));
        }
        if self.noise_per_sample > 0 && self.noise_tokens == 0 {
            return Err(DataError::BadSpec("noise token pool is empty".into()));
        }
        if let Some(&d) = self.inverted_domains.iter().find(|&&d| d >= m) {
            return Err(DataError::BadSpec(format!("inverted domain {d} out of range")));
        }
        let mut seen = vec![false; m];
        for group in &self.similarity_groups {
            for &d in group {
                if d >= m {
                    return Err(DataError::BadSpec(format!("grouped domain {d} out of range")));
                }
                if seen[d] {
                    return Err(DataError::BadSpec(format!("domain {d} appears in two groups")));
                }
                seen[d] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(DataError::BadSpec("similarity groups must cover every domain".into()));
        }
        Ok(())
    }

    /// The polarity mapping of one similarity group: `true` marks tokens
    /// that carry positive polarity for the group's non-inverted domains.
    /// Derived from the spec seed, so the mapping is a dataset property.
    pub fn polarity_mapping(&self, group: usize) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.sentiment_tokens).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::derive_seed(self.seed, &format!("polarity/{group}")));
        order.shuffle(&mut rng);
        let mut positive = vec![false; self.sentiment_tokens];
        for &k in order.iter().take(self.sentiment_tokens.div_ceil(2)) {
            positive[k] = true;
        }
        positive
    }

    /// Group index of each domain.
    pub fn group_of(&self) -> Vec<usize> {
        let mut group_of = vec![0usize; self.num_domains()];
        for (g, group) in self.similarity_groups.iter().enumerate() {
            for &d in group {
                group_of[d] = g;
            }
        }
        group_of
    }
}

/// Long-tailed `head / (j+1)^exponent` domain sizes, floored at 1.
pub fn power_law_sizes(head: usize, exponent: f64, num_domains: usize) -> Vec<usize> {
    (0..num_domains)
        .map(|j| {
            let size = head as f64 / ((j + 1) as f64).powf(exponent);
            (size.round() as usize).max(1)
        })
        .collect()
}

/// Deterministic for a fixed spec; per-domain counts match the spec
/// exactly, labels are Bernoulli draws at the domain's positive rate.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let m = spec.num_domains();
    let group_of = spec.group_of();
    // Per-group token indices by polarity.
    let group_pools: Vec<(Vec<usize>, Vec<usize>)> = (0..spec.similarity_groups.len())
        .map(|g| {
            let mapping = spec.polarity_mapping(g);
            let pos = (0..spec.sentiment_tokens).filter(|&k| mapping[k]).collect();
            let neg = (0..spec.sentiment_tokens).filter(|&k| !mapping[k]).collect();
            (pos, neg)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.domain_sizes.iter().sum());
    let mut id = 0;
    for domain in 0..m {
        let inverted = spec.inverted_domains.contains(&domain);
        let group = group_of[domain];
        let peers = &spec.similarity_groups[group];
        let (pos_pool, neg_pool) = &group_pools[group];
        for _ in 0..spec.domain_sizes[domain] {
            let label = usize::from(rng.gen::<f64>() < spec.positive_rate[domain]);
            // Polarity of the drawn sentiment tokens follows the label
            // under the group's mapping, flipped for inverted domains.
            let draw_positive = (label == 1) != inverted;
            let pool = if draw_positive { pos_pool } else { neg_pool };
            let mut tokens = Vec::with_capacity(
                spec.sentiment_per_sample + spec.domain_per_sample + spec.noise_per_sample,
            );
            for _ in 0..spec.sentiment_per_sample {
                tokens.push(format!("s{}", pool[rng.gen_range(0..pool.len())]));
            }
            for _ in 0..spec.domain_per_sample {
                let of = if peers.len() > 1 && rng.gen::<f64>() < 0.25 {
                    peers[rng.gen_range(0..peers.len())]
                } else {
                    domain
                };
                tokens.push(format!("dom{of}w{}", rng.gen_range(0..spec.domain_tokens)));
            }
            for _ in 0..spec.noise_per_sample {
                tokens.push(format!("filler{}", rng.gen_range(0..spec.noise_tokens)));
            }
            tokens.shuffle(&mut rng);
            samples.push(Sample {
                id,
                text: tokens.join(" "),
                label,
                domain,
            });
            id += 1;
        }
    }
    let names = (0..m).map(|j| format!("domain{j}")).collect();
    Dataset::new(samples, 2, m, names)
}

#[derive(Debug, Deserialize)]
struct JsonlRecord {
    text: String,
    label: i64,
    domain: String,
}

/// One JSON object per line: `{"text": "...", "label": 0, "domain": "..."}`.
/// Domain names map to ids in first-appearance order.
pub fn load_jsonl(path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    let mut domain_ids: HashMap<String, usize> = HashMap::new();
    let mut domain_names = Vec::new();
    let mut max_label = 0usize;
    for (ix, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                line: ix + 1,
                reason: e.to_string(),
            })?;
        if record.label < 0 {
            return Err(DataError::Malformed {
                line: ix + 1,
                reason: format!("label must be non-negative, got {}", record.label),
            });
        }
        let label = record.label as usize;
        max_label = max_label.max(label);
        let next = domain_ids.len();
        let domain = *domain_ids.entry(record.domain.clone()).or_insert_with(|| {
            domain_names.push(record.domain.clone());
            next
        });
        samples.push(Sample {
            id: samples.len(),
            text: record.text,
            label,
            domain,
        });
    }
    if samples.is_empty() {
        return Err(DataError::Empty);
    }
    let num_domains = domain_names.len();
    Dataset::new(samples, max_label + 1, num_domains, domain_names)
}

/// Largest-remainder apportionment of `n` items over three fractions,
/// ties resolved in (train, val, test) priority order.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut base = [0usize; 3];
    let mut rem = [0f64; 3];
    let mut assigned = 0;
    for k in 0..3 {
        let quota = n as f64 * fractions[k];
        base[k] = quota.floor() as usize;
        rem[k] = quota - quota.floor();
        assigned += base[k];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rem[b].partial_cmp(&rem[a]).unwrap().then(a.cmp(&b)));
    for &k in order.iter().take(n - assigned) {
        base[k] += 1;
    }
    base
}

/// Stratified (train, val, test) split by (domain, class) cell, an exact
/// partition of the input. Cells too small to spread land in train first.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(f));
    }
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (ix, s) in dataset.samples.iter().enumerate() {
        cells.entry((s.domain, s.label)).or_default().push(ix);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for indices in cells.values() {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        // Priority (train, val, test) with the train fraction first keeps
        // singleton cells in train.
        let counts = apportion(shuffled.len(), f);
        let mut offset = 0;
        for k in 0..3 {
            parts[k].extend_from_slice(&shuffled[offset..offset + counts[k]]);
            offset += counts[k];
        }
    }
    let [train, val, test] = parts;
    Ok((
        dataset.subset(train),
        dataset.subset(val),
        dataset.subset(test),
    ))
}

/// Keep `ceil(count / factor)` samples per (domain, class) cell, at least
/// one per non-empty cell; sample membership is drawn per seed.
pub fn downsample(dataset: &Dataset, factor: usize, seed: u64) -> Result<Dataset, DataError> {
    if factor == 0 {
        return Err(DataError::BadFactor);
    }
    if factor == 1 {
        return Ok(dataset.clone());
    }
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (ix, s) in dataset.samples.iter().enumerate() {
        cells.entry((s.domain, s.label)).or_default().push(ix);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for indices in cells.values() {
        let keep = indices.len().div_ceil(factor);
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        kept.extend_from_slice(&shuffled[..keep]);
    }
    Ok(dataset.subset(kept))
}

/// Per-sample sampling weights for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerWeights(Vec<f64>);

impl SamplerWeights {
    pub fn new(weights: Vec<f64>) -> Self {
        debug_assert!(weights.iter().all(|&w| w >= 0.0));
        debug_assert!(weights.iter().any(|&w| w > 0.0));
        SamplerWeights(weights)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_uniform(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

/// Deferred re-sampling weights: uniform until `defer_fraction` of the
/// epochs have run, then inverse class frequency so expected class
/// frequencies equalize.
pub fn drs_weights(
    dataset: &Dataset,
    epoch: usize,
    total_epochs: usize,
    defer_fraction: f64,
) -> SamplerWeights {
    debug_assert!(epoch < total_epochs);
    if (epoch as f64) < defer_fraction * total_epochs as f64 {
        return SamplerWeights::new(vec![1.0; dataset.len()]);
    }
    let counts = dataset.class_counts();
    let weights = dataset
        .samples
        .iter()
        .map(|s| 1.0 / counts[s.label] as f64)
        .collect();
    SamplerWeights::new(weights)
}

/// A dataset pre-tokenized against one vocabulary. Samples whose text
/// yields no tokens are given a single unknown id so encoding stays total.
#[derive(Debug, Clone)]
pub struct TokenizedDataset {
    pub ids: Vec<usize>,
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub num_classes: usize,
    pub num_domains: usize,
}

impl TokenizedDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize_dataset(dataset: &Dataset, vocab: &Vocab, max_len: usize) -> TokenizedDataset {
    let mut out = TokenizedDataset {
        ids: Vec::with_capacity(dataset.len()),
        tokens: Vec::with_capacity(dataset.len()),
        labels: Vec::with_capacity(dataset.len()),
        domains: Vec::with_capacity(dataset.len()),
        num_classes: dataset.num_classes,
        num_domains: dataset.num_domains,
    };
    for s in dataset.samples() {
        let mut ids = tokenize(&s.text, vocab, max_len);
        if ids.is_empty() {
            ids.push(UNKNOWN_ID);
        }
        out.ids.push(s.id);
        out.tokens.push(ids);
        out.labels.push(s.label);
        out.domains.push(s.domain);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn two_domain_spec() -> SyntheticSpec {
        SyntheticSpec {
            domain_sizes: vec![100, 10],
            positive_rate: vec![0.5, 0.5],
            sentiment_tokens: 8,
            domain_tokens: 5,
            noise_tokens: 10,
            sentiment_per_sample: 3,
            domain_per_sample: 2,
            noise_per_sample: 3,
            similarity_groups: vec![vec![0, 1]],
            inverted_domains: BTreeSet::new(),
            seed: 11,
        }
    }

    #[test]
    fn generator_matches_requested_counts() {
        let ds = generate_synthetic(&two_domain_spec()).unwrap();
        assert_eq!(ds.len(), 110);
        assert_eq!(ds.domain_counts(), vec![100, 10]);
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let a = generate_synthetic(&two_domain_spec()).unwrap();
        let b = generate_synthetic(&two_domain_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = two_domain_spec();
        other.seed = 12;
        assert_ne!(generate_synthetic(&other).unwrap(), a);
    }

    fn sentiment_index(token: &str) -> Option<usize> {
        token.strip_prefix('s').and_then(|rest| rest.parse().ok())
    }

    #[test]
    fn same_group_domains_share_polarity_mapping() {
        // Neither domain is inverted, so in both domains positive-labeled
        // samples carry only tokens the group mapping marks positive.
        let spec = two_domain_spec();
        let mapping = spec.polarity_mapping(0);
        let ds = generate_synthetic(&spec).unwrap();
        assert!(mapping.iter().any(|&p| p) && mapping.iter().any(|&p| !p));
        for s in ds.samples() {
            for token in s.text.split_whitespace() {
                if let Some(k) = sentiment_index(token) {
                    assert_eq!(mapping[k], s.label == 1, "token {token} off-polarity");
                }
            }
        }
    }

    #[test]
    fn inverted_domains_flip_the_group_mapping() {
        let mut spec = two_domain_spec();
        spec.inverted_domains.insert(1);
        let mapping = spec.polarity_mapping(0);
        let ds = generate_synthetic(&spec).unwrap();
        for s in ds.samples().iter().filter(|s| s.domain == 1) {
            for token in s.text.split_whitespace() {
                if let Some(k) = sentiment_index(token) {
                    assert_eq!(mapping[k], s.label == 0, "inverted token {token} off-polarity");
                }
            }
        }
    }

    #[test]
    fn different_groups_draw_independent_mappings() {
        let mut spec = two_domain_spec();
        spec.sentiment_tokens = 50;
        spec.similarity_groups = vec![vec![0], vec![1]];
        let a = spec.polarity_mapping(0);
        let b = spec.polarity_mapping(1);
        assert_ne!(a, b, "independent mappings should differ on a 50-token pool");
    }

    #[test]
    fn empirical_positive_rates_stay_within_three_sigma() {
        let mut spec = two_domain_spec();
        spec.domain_sizes = vec![2000, 2000];
        spec.positive_rate = vec![0.3, 0.7];
        let ds = generate_synthetic(&spec).unwrap();
        let counts = ds.cell_counts();
        for (d, &rate) in spec.positive_rate.iter().enumerate() {
            let n = spec.domain_sizes[d] as f64;
            let positives = counts[d][1] as f64;
            let sigma = (n * rate * (1.0 - rate)).sqrt();
            assert!(
                (positives - n * rate).abs() <= 3.0 * sigma,
                "domain {d}: {positives} positives vs expected {}",
                n * rate
            );
        }
    }

    #[test]
    fn unigram_oracle_scores_below_half_on_inverted_domains() {
        // Fit token polarity counts on the non-inverted domain, score the
        // inverted domain of the same similarity group; anti-correlated
        // vocabulary must push AUC below 0.5.
        let mut spec = two_domain_spec();
        spec.domain_sizes = vec![400, 400];
        spec.inverted_domains.insert(1);
        let ds = generate_synthetic(&spec).unwrap();

        let mut polarity: HashMap<&str, (f64, f64)> = HashMap::new();
        for s in ds.samples().iter().filter(|s| s.domain == 0) {
            for token in s.text.split_whitespace() {
                let entry = polarity.entry(token).or_insert((0.0, 0.0));
                if s.label == 1 {
                    entry.0 += 1.0;
                } else {
                    entry.1 += 1.0;
                }
            }
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for s in ds.samples().iter().filter(|s| s.domain == 1) {
            let score: f64 = s
                .text
                .split_whitespace()
                .map(|t| {
                    let (pos, neg) = polarity.get(t).copied().unwrap_or((0.0, 0.0));
                    if pos + neg == 0.0 {
                        0.0
                    } else {
                        (pos - neg) / (pos + neg)
                    }
                })
                .sum();
            scores.push(score);
            labels.push(s.label == 1);
        }
        let auc = crate::eval::auc(&scores, &labels).unwrap();
        assert!(auc < 0.5, "inverted-domain AUC {auc} not below 0.5");
    }

    #[test]
    fn power_law_sizes_are_long_tailed() {
        let sizes = power_law_sizes(400, 1.0, 4);
        assert_eq!(sizes, vec![400, 200, 133, 100]);
        assert!(power_law_sizes(2, 3.0, 5).iter().all(|&n| n >= 1));
    }

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file
    }

    #[test]
    fn jsonl_maps_domains_in_first_appearance_order() {
        let file = write_jsonl(&[
            r#"{"text": "good stuff", "label": 1, "domain": "laptop"}"#,
            r#"{"text": "bad stuff", "label": 0, "domain": "kitchen"}"#,
            r#"{"text": "fine", "label": 1, "domain": "laptop"}"#,
        ]);
        let ds = load_jsonl(file.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_domains, 2);
        assert_eq!(ds.domain_names, vec!["laptop", "kitchen"]);
        assert_eq!(ds.samples()[1].domain, 1);
    }

    #[test]
    fn jsonl_reports_the_offending_line() {
        let file = write_jsonl(&[
            r#"{"text": "ok", "label": 1, "domain": "a"}"#,
            r#"{"text": "missing domain", "label": 0}"#,
        ]);
        match load_jsonl(file.path()) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_rejects_non_integer_labels() {
        let file = write_jsonl(&[r#"{"text": "x", "label": "one", "domain": "a"}"#]);
        assert!(matches!(
            load_jsonl(file.path()),
            Err(DataError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn jsonl_rejects_empty_files() {
        let file = write_jsonl(&[]);
        assert!(matches!(load_jsonl(file.path()), Err(DataError::Empty)));
    }

    #[test]
    fn split_respects_default_fractions() {
        let samples: Vec<Sample> = (0..100)
            .map(|i| Sample {
                id: i,
                text: "t".into(),
                label: i % 2,
                domain: 0,
            })
            .collect();
        let ds = Dataset::new(samples, 2, 1, vec!["d".into()]).unwrap();
        let (train, val, test) = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (80, 10, 10));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = generate_synthetic(&two_domain_spec()).unwrap();
        assert!(split(&ds, (0.8, 0.1, 0.2), 0).is_err());
        assert!(split(&ds, (1.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn singleton_domains_land_in_train() {
        let samples = vec![
            Sample { id: 0, text: "a".into(), label: 0, domain: 0 },
            Sample { id: 1, text: "b".into(), label: 1, domain: 0 },
            Sample { id: 2, text: "c".into(), label: 0, domain: 1 },
        ];
        let ds = Dataset::new(samples, 2, 2, vec!["x".into(), "y".into()]).unwrap();
        let (train, _, _) = split(&ds, (0.8, 0.1, 0.1), 9).unwrap();
        assert!(train.samples().iter().any(|s| s.id == 2));
    }

    proptest! {
        #[test]
        fn split_is_an_exact_partition(seed in 0u64..1000) {
            let mut spec = two_domain_spec();
            spec.domain_sizes = vec![37, 11];
            let ds = generate_synthetic(&spec).unwrap();
            let (train, val, test) = split(&ds, (0.8, 0.1, 0.1), seed).unwrap();
            let mut ids: Vec<usize> = train
                .samples()
                .iter()
                .chain(val.samples())
                .chain(test.samples())
                .map(|s| s.id)
                .collect();
            ids.sort_unstable();
            let expected: Vec<usize> = (0..ds.len()).collect();
            prop_assert_eq!(ids, expected);
        }
    }

    #[test]
    fn downsample_keeps_ceil_per_cell_with_floor_of_one() {
        let samples: Vec<Sample> = (0..1000)
            .map(|i| Sample { id: i, text: "t".into(), label: 0, domain: 0 })
            .collect();
        let ds = Dataset::new(samples, 1, 1, vec!["d".into()]).unwrap();
        assert_eq!(downsample(&ds, 1000, 5).unwrap().len(), 1);

        let small: Vec<Sample> = (0..5)
            .map(|i| Sample { id: i, text: "t".into(), label: 0, domain: 0 })
            .collect();
        let ds_small = Dataset::new(small, 1, 1, vec!["d".into()]).unwrap();
        assert_eq!(downsample(&ds_small, 10, 5).unwrap().len(), 1);
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let ds = generate_synthetic(&two_domain_spec()).unwrap();
        assert_eq!(downsample(&ds, 1, 9).unwrap(), ds);
    }

    #[test]
    fn drs_is_uniform_before_the_defer_point() {
        let ds = generate_synthetic(&two_domain_spec()).unwrap();
        for epoch in 0..4 {
            assert!(drs_weights(&ds, epoch, 5, 0.8).is_uniform());
        }
        let mut spec = two_domain_spec();
        spec.positive_rate = vec![0.9, 0.9];
        let skewed = generate_synthetic(&spec).unwrap();
        assert!(!drs_weights(&skewed, 4, 5, 0.8).is_uniform());
    }

    #[test]
    fn drs_weights_are_inverse_class_frequency_after_defer() {
        let samples: Vec<Sample> = (0..100)
            .map(|i| Sample {
                id: i,
                text: "t".into(),
                label: usize::from(i >= 90),
                domain: 0,
            })
            .collect();
        let ds = Dataset::new(samples, 2, 1, vec!["d".into()]).unwrap();
        let weights = drs_weights(&ds, 4, 5, 0.8);
        assert_eq!(weights.values()[0], 1.0 / 90.0);
        assert_eq!(weights.values()[95], 1.0 / 10.0);
        // Per-class weight mass equalizes exactly.
        let mass: [f64; 2] = ds.samples().iter().zip(weights.values()).fold(
            [0.0, 0.0],
            |mut acc, (s, &w)| {
                acc[s.label] += w;
                acc
            },
        );
        assert!((mass[0] - mass[1]).abs() < 1e-9);
    }

    #[test]
    fn balanced_classes_stay_uniform_in_both_phases() {
        let samples: Vec<Sample> = (0..10)
            .map(|i| Sample { id: i, text: "t".into(), label: i % 2, domain: 0 })
            .collect();
        let ds = Dataset::new(samples, 2, 1, vec!["d".into()]).unwrap();
        assert!(drs_weights(&ds, 0, 5, 0.8).is_uniform());
        assert!(drs_weights(&ds, 4, 5, 0.8).is_uniform());
    }

    #[test]
    fn tokenized_dataset_never_has_empty_sequences() {
        let samples = vec![
            Sample { id: 0, text: "hello world".into(), label: 0, domain: 0 },
            Sample { id: 1, text: "".into(), label: 1, domain: 0 },
        ];
        let ds = Dataset::new(samples, 2, 1, vec!["d".into()]).unwrap();
        let vocab = Vocab::build(["hello world"], 10).unwrap();
        let tok = tokenize_dataset(&ds, &vocab, 128);
        assert_eq!(tok.tokens[0], vec![1, 2]);
        assert_eq!(tok.tokens[1], vec![UNKNOWN_ID]);
    }
}
