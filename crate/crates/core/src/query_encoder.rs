//! Query side: vocabulary, bidirectional LSTM, word attention per modality,
//! and the modality weights.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Lstm};
use crate::params::{ParamId, ParamStore};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
/// Longest query kept; longer token sequences are truncated.
pub const MAX_QUERY_LEN: usize = 19;

/// The three views shared by queries and proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Subject,
    Location,
    Context,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Subject, Modality::Location, Modality::Context];

    /// Active modalities: all three, or subject and location when context is disabled.
    pub fn active(context_enabled: bool) -> &'static [Modality] {
        if context_enabled {
            &Self::ALL
        } else {
            &Self::ALL[..2]
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Subject => "subject",
            Modality::Location => "location",
            Modality::Context => "context",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Token ↔ id map with four reserved ids in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in id order. Duplicates are ignored.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED_TOKENS {
            vocab.push(t.to_string());
        }
        for t in tokens {
            vocab.push(t.into());
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.ids.contains_key(&token) {
            self.ids.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED_TOKENS.len()
    }

    /// Id of `token`, or [`UNK`] when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED_TOKENS.len()..]
    }

    /// Maps tokens to ids, truncating to [`MAX_QUERY_LEN`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        if tokens.len() > MAX_QUERY_LEN {
            log::warn!(
                "query of {} tokens truncated to {MAX_QUERY_LEN}",
                tokens.len()
            );
        }
        tokens
            .iter()
            .take(MAX_QUERY_LEN)
            .map(|t| self.id(t.as_ref()))
            .collect()
    }

    /// One token per line; line `k` (from zero) holds id `k + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for w in self.words() {
            writeln!(out, "{w}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut words = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            let word = line.trim_end_matches('\r');
            if !word.is_empty() {
                words.push(word.to_string());
            }
        }
        Ok(Self::new(words))
    }
}

/// Lowercases and splits free text on whitespace, dropping surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Per-timestep concatenated hidden states and the two endpoints.
#[derive(Clone, Copy, Debug)]
pub struct SequenceStates {
    /// `T × 2·d_h`, row `t` is `[forward_t ; backward_t]`.
    pub hiddens: Var,
    pub first: Var,
    pub last: Var,
}

/// Graph handles for an encoded query.
#[derive(Clone, Debug)]
pub struct QueryVars {
    pub embeddings: Var,
    pub states: SequenceStates,
    /// One `1 × d_e` embedding per active modality.
    pub modality: Vec<Var>,
    /// One `T × 1` word-attention column per active modality.
    pub attention: Vec<Var>,
    /// `1 × M` modality weights.
    pub weights: Var,
}

/// Plain values of an encoded query.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedQuery {
    pub modalities: Vec<Modality>,
    pub embeddings: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub hiddens: Vec<Vec<f64>>,
}

impl EncodedQuery {
    pub fn embedding(&self, m: Modality) -> Option<&[f64]> {
        self.modalities
            .iter()
            .position(|&x| x == m)
            .map(|i| self.embeddings[i].as_slice())
    }

    pub fn weight(&self, m: Modality) -> Option<f64> {
        self.modalities
            .iter()
            .position(|&x| x == m)
            .map(|i| self.weights[i])
    }
}

#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub embedding: ParamId,
    pub forward: Lstm,
    pub backward: Lstm,
    pub heads: Vec<Linear>,
    pub weight_head: Linear,
    pub modalities: Vec<Modality>,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl QueryEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        context_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add_normal("query.embedding", vocab_size, embed_dim, rng);
        let forward = Lstm::new(store, "query.lstm_forward", embed_dim, hidden_dim, rng);
        let backward = Lstm::new(store, "query.lstm_backward", embed_dim, hidden_dim, rng);
        let modalities = Modality::active(context_enabled).to_vec();
        let heads = modalities
            .iter()
            .map(|m| {
                Linear::new(
                    store,
                    &format!("query.word_attention.{m}"),
                    2 * hidden_dim,
                    1,
                    rng,
                )
            })
            .collect();
        let weight_head = Linear::new(
            store,
            "query.modality_weights",
            4 * hidden_dim,
            modalities.len(),
            rng,
        );
        // Zero weights start every query at uniform modality weights.
        store.get_mut(weight_head.weight).data_mut().fill(0.0);
        Self {
            embedding,
            forward,
            backward,
            heads,
            weight_head,
            modalities,
            vocab_size,
            embed_dim,
            hidden_dim,
        }
    }

    /// Looks up one embedding row per token; an empty sequence gives a `0 × d_e` matrix.
    pub fn embed_tokens(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TokenOutOfVocabulary {
                id,
                size: self.vocab_size,
            });
        }
        let table = g.param(self.embedding);
        Ok(g.gather_rows(table, tokens))
    }

    pub fn encode_sequence(&self, g: &mut Graph, embeddings: Var) -> Result<SequenceStates> {
        let steps = g.shape(embeddings).0;
        if steps == 0 {
            return Err(Error::EmptySequence("encode_sequence"));
        }
        let inputs: Vec<Var> = (0..steps).map(|t| g.row(embeddings, t)).collect();

        let mut state = self.forward.zero_state(g);
        let mut forward = Vec::with_capacity(steps);
        for &x in &inputs {
            state = self.forward.step(g, x, state);
            forward.push(state.hidden);
        }
        let mut state = self.backward.zero_state(g);
        let mut backward = vec![None; steps];
        for t in (0..steps).rev() {
            state = self.backward.step(g, inputs[t], state);
            backward[t] = Some(state.hidden);
        }
        let rows: Vec<Var> = forward
            .iter()
            .zip(backward)
            .map(|(&f, b)| g.concat_cols(&[f, b.expect("every step visited")]))
            .collect();
        let hiddens = g.concat_rows(&rows);
        Ok(SequenceStates {
            hiddens,
            first: rows[0],
            last: rows[steps - 1],
        })
    }

    /// Word attention for one modality head: logits from the hidden states,
    /// softmax over time, then the attention-weighted mean of the raw
    /// embeddings. Returns `(q, α)`.
    pub fn modality_embedding(
        &self,
        g: &mut Graph,
        hiddens: Var,
        embeddings: Var,
        head: usize,
    ) -> (Var, Var) {
        let logits = self.heads[head].forward(g, hiddens);
        let alpha = g.softmax(logits);
        let q = g.matmul_at(alpha, embeddings);
        (q, alpha)
    }

    pub fn modality_weights(&self, g: &mut Graph, first: Var, last: Var) -> Var {
        let ends = g.concat_cols(&[first, last]);
        let logits = self.weight_head.forward(g, ends);
        g.softmax(logits)
    }

    pub fn encode_on(&self, g: &mut Graph, tokens: &[usize]) -> Result<QueryVars> {
        let embeddings = self.embed_tokens(g, tokens)?;
        let states = self.encode_sequence(g, embeddings)?;
        let mut modality = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for head in 0..self.heads.len() {
            let (q, alpha) = self.modality_embedding(g, states.hiddens, embeddings, head);
            modality.push(q);
            attention.push(alpha);
        }
        let weights = self.modality_weights(g, states.first, states.last);
        Ok(QueryVars {
            embeddings,
            states,
            modality,
            attention,
            weights,
        })
    }

    pub fn encode(&self, params: &ParamStore, tokens: &[usize]) -> Result<EncodedQuery> {
        let mut g = Graph::new(params);
        let vars = self.encode_on(&mut g, tokens)?;
        let hiddens = g.value(vars.states.hiddens);
        Ok(EncodedQuery {
            modalities: self.modalities.clone(),
            embeddings: vars
                .modality
                .iter()
                .map(|&v| g.value(v).data().to_vec())
                .collect(),
            attention: vars
                .attention
                .iter()
                .map(|&v| g.value(v).data().to_vec())
                .collect(),
            weights: g.value(vars.weights).data().to_vec(),
            hiddens: (0..hiddens.rows())
                .map(|r| hiddens.row(r).to_vec())
                .collect(),
        })
    }
}
