//! Whitespace tokenizer, frequency-ranked vocabulary, and a small trainable
//! encoder: mean-pooled token embeddings through a two-layer MLP.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("vocabulary requires a non-empty corpus")]
    EmptyCorpus,
    #[error("vocabulary max size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("cannot encode an empty token sequence")]
    EmptySequence,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("vocab i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Token id 0 is reserved for unknown tokens.
pub const UNKNOWN_ID: u32 = 0;

/// Frequency-ranked token table. Ids are contiguous starting at 1;
/// id 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Keep the `max_size - 1` most frequent tokens (id 0 stays reserved),
    /// ties broken lexicographically.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self, EncoderError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < 2 {
            return Err(EncoderError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut saw_text = false;
        for text in corpus {
            saw_text = true;
            for token in text.split_whitespace() {
                *counts.entry(token.to_lowercase()).or_insert(0) += 1;
            }
        }
        if !saw_text {
            return Err(EncoderError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 1);
        let tokens: Vec<String> = ranked.into_iter().map(|(t, _)| t).collect();
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + 1) as u32))
            .collect();
        Ok(Vocab {
            token_to_id,
            tokens,
        })
    }

    /// Total size including the unknown id.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNKNOWN_ID)
    }

    /// One token per line; the token on 0-based line `i` has id `i + 1`.
    /// The unknown token is not written.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), EncoderError> {
        for token in &self.tokens {
            writeln!(w, "{token}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, EncoderError> {
        let mut tokens = Vec::new();
        for line in r.lines() {
            tokens.push(line?);
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + 1) as u32))
            .collect();
        Ok(Vocab {
            token_to_id,
            tokens,
        })
    }
}

/// Lowercase, whitespace-split, truncate to `max_len`; unknown tokens map
/// to id 0. Guaranteed non-empty only if the text has tokens.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    text.split_whitespace()
        .take(max_len)
        .map(|t| vocab.id(&t.to_lowercase()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable encoder parameters: token embedding table plus two
/// fully-connected layers with tanh, dropout between them.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dropout: f64,
    pub dim: usize,
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        vocab_size: usize,
        emb_dim: usize,
        dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let embedding = store.add(
            "encoder.embedding",
            random_tensor(vec![vocab_size, emb_dim], 1.0, rng),
        );
        let w1 = store.add(
            "encoder.w1",
            random_tensor(vec![dim, emb_dim], xavier(emb_dim, dim), rng),
        );
        let b1 = store.add("encoder.b1", Tensor::zeros(vec![dim]));
        let w2 = store.add(
            "encoder.w2",
            random_tensor(vec![dim, dim], xavier(dim, dim), rng),
        );
        let b2 = store.add("encoder.b2", Tensor::zeros(vec![dim]));
        EncoderParams {
            embedding,
            w1,
            b1,
            w2,
            b2,
            dropout,
            dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.embedding, self.w1, self.b1, self.w2, self.b2]
    }

    /// Mean-pool token embeddings, then two tanh layers with dropout in
    /// between (train mode only; masks come from `dropout_rng`).
    pub fn encode(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        token_ids: &[u32],
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, EncoderError> {
        if token_ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        let table = graph.param(store, self.embedding)?;
        let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let pooled = graph.embed_mean(table, &ids)?;

        let w1 = graph.param(store, self.w1)?;
        let b1 = graph.param(store, self.b1)?;
        let pre1 = graph.matvec(w1, pooled)?;
        let pre1 = graph.add(pre1, b1)?;
        let mut hidden = graph.tanh(pre1)?;

        if mode == Mode::Train && self.dropout > 0.0 {
            let keep = 1.0 - self.dropout;
            let mask: Vec<f64> = (0..self.dim)
                .map(|_| {
                    if dropout_rng.gen::<f64>() < self.dropout {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect();
            hidden = graph.dropout(hidden, mask)?;
        }

        let w2 = graph.param(store, self.w2)?;
        let b2 = graph.param(store, self.b2)?;
        let pre2 = graph.matvec(w2, hidden)?;
        let pre2 = graph.add(pre2, b2)?;
        Ok(graph.tanh(pre2)?)
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn random_tensor(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, values).expect("shape/value count consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;

    #[test]
    fn vocab_ranks_by_frequency() {
        let vocab = Vocab::build(["a b", "a"], 10).unwrap();
        assert_eq!(vocab.id("a"), 1);
        assert_eq!(vocab.id("b"), 2);
        assert_eq!(vocab.size(), 3);
    }

    #[test]
    fn vocab_truncates_to_max_size() {
        let vocab = Vocab::build(["a b", "a"], 2).unwrap();
        assert_eq!(vocab.id("a"), 1);
        assert_eq!(vocab.id("b"), UNKNOWN_ID);
        assert_eq!(vocab.size(), 2);
    }

    #[test]
    fn vocab_breaks_frequency_ties_lexicographically() {
        let vocab = Vocab::build(["z y x"], 10).unwrap();
        assert_eq!(vocab.id("x"), 1);
        assert_eq!(vocab.id("y"), 2);
        assert_eq!(vocab.id("z"), 3);
    }

    #[test]
    fn empty_texts_contribute_no_tokens() {
        let vocab = Vocab::build(["", "a"], 10).unwrap();
        assert_eq!(vocab.size(), 2);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let texts: Vec<&str> = vec![];
        assert!(matches!(
            Vocab::build(texts, 10),
            Err(EncoderError::EmptyCorpus)
        ));
    }

    #[test]
    fn tokenize_lowercases_and_maps_unknowns() {
        let vocab = Vocab::build(["a b"], 10).unwrap();
        assert_eq!(tokenize("A b", &vocab, 128), vec![1, 2]);
        assert_eq!(tokenize("c", &vocab, 128), vec![UNKNOWN_ID]);
    }

    #[test]
    fn tokenize_truncates_to_max_len() {
        let vocab = Vocab::build(["w"], 10).unwrap();
        let long = vec!["w"; 200].join(" ");
        assert_eq!(tokenize(&long, &vocab, 128).len(), 128);
    }

    #[test]
    fn vocab_file_round_trips() {
        let vocab = Vocab::build(["c b a a b a"], 10).unwrap();
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a\nb\nc\n");
        let back = Vocab::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, vocab);
    }

    fn tiny_encoder(seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(&mut store, 5, 4, 4, 0.5, &mut rng);
        (store, params)
    }

    #[test]
    fn single_token_pools_to_its_embedding_row() {
        let (store, params) = tiny_encoder(3);
        let mut g = Graph::new();
        let table = g.param(&store, params.embedding).unwrap();
        let pooled = g.embed_mean(table, &[2]).unwrap();
        let row = &store.values(params.embedding)[2 * 4..3 * 4];
        assert_eq!(g.value(pooled), row);
    }

    #[test]
    fn encode_is_permutation_invariant() {
        let (store, params) = tiny_encoder(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g1 = Graph::new();
        let h1 = params
            .encode(&mut g1, &store, &[1, 2, 3], Mode::Eval, &mut rng)
            .unwrap();
        let mut g2 = Graph::new();
        let h2 = params
            .encode(&mut g2, &store, &[3, 1, 2], Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(g1.value(h1), g2.value(h2));
    }

    #[test]
    fn eval_encode_is_deterministic_and_train_differs_only_by_dropout() {
        let (store, params) = tiny_encoder(9);
        let eval = |_: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut g = Graph::new();
            let h = params
                .encode(&mut g, &store, &[1, 4], Mode::Eval, &mut rng)
                .unwrap();
            g.value(h).to_vec()
        };
        assert_eq!(eval(0), eval(1));

        let train = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let h = params
                .encode(&mut g, &store, &[1, 4], Mode::Train, &mut rng)
                .unwrap();
            g.value(h).to_vec()
        };
        assert_eq!(train(7), train(7));
        assert_ne!(train(7), train(8));
    }

    #[test]
    fn encode_rejects_empty_sequence() {
        let (store, params) = tiny_encoder(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        assert!(matches!(
            params.encode(&mut g, &store, &[], Mode::Eval, &mut rng),
            Err(EncoderError::EmptySequence)
        ));
    }

    #[test]
    fn encode_output_dimension_is_configured_d() {
        let (store, params) = tiny_encoder(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let h = params
            .encode(&mut g, &store, &[0, 1, 2, 3, 4], Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(g.shape(h), &[4]);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let (mut store, params) = tiny_encoder(8);
        let ids = params.param_ids();
        // Fixed dropout mask so the builder is a pure function of the store.
        let mask = vec![2.0, 0.0, 2.0, 2.0];
        let report = check_gradients(
            &mut store,
            &ids,
            |store, pins| {
                let mut g = match pins {
                    Some(p) => Graph::new_with_pinned_stops(p),
                    None => Graph::new(),
                };
                let table = g.param(store, params.embedding)?;
                let pooled = g.embed_mean(table, &[1, 3, 3])?;
                let w1 = g.param(store, params.w1)?;
                let b1 = g.param(store, params.b1)?;
                let pre1 = g.matvec(w1, pooled)?;
                let pre1 = g.add(pre1, b1)?;
                let hid = g.tanh(pre1)?;
                let hid = g.dropout(hid, mask.clone())?;
                let w2 = g.param(store, params.w2)?;
                let b2 = g.param(store, params.b2)?;
                let pre2 = g.matvec(w2, hid)?;
                let pre2 = g.add(pre2, b2)?;
                let h = g.tanh(pre2)?;
                let sq = g.mul(h, h)?;
                let loss = g.sum(sq)?;
                Ok((g, loss))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed,
            "max rel err {} at {:?}",
            report.max_rel_err, report.worst
        );
    }
}
