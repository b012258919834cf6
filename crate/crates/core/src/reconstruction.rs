//! Training objective: adaptive visual and language reconstruction, direct
//! language reconstruction, attribute classification, and their weighted sum.
//!
//! None of this is evaluated at inference time; grounding only needs the
//! encoders and [`crate::grounding`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Lstm};
use crate::params::{ParamId, ParamStore};
use crate::query_encoder::{Modality, BOS, EOS};

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl LossWeights {
    /// Best full-model setting for the three-modality (COCO-style) configuration.
    pub const CONTEXT_ENABLED_DEFAULT: LossWeights = LossWeights {
        alpha: 0.01,
        beta: 1.0,
        gamma: 5.0,
        lambda: 1.0,
    };

    /// Best setting for the context-free configuration used with dense proposals.
    pub const CONTEXT_DISABLED_DEFAULT: LossWeights = LossWeights {
        alpha: 0.001,
        beta: 1.0,
        gamma: 30.0,
        lambda: 1.0,
    };

    /// Direct language reconstruction only.
    pub const LANGUAGE_ONLY: LossWeights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 1.0,
        lambda: 0.0,
    };

    pub fn for_context(context_enabled: bool) -> Self {
        if context_enabled {
            Self::CONTEXT_ENABLED_DEFAULT
        } else {
            Self::CONTEXT_DISABLED_DEFAULT
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.alpha, self.beta, self.gamma, self.lambda]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }
}

/// Raw loss terms before weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub avis: f64,
    pub alan: f64,
    pub lan: f64,
    pub att: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub avis: f64,
    pub alan: f64,
    pub adp: f64,
    pub lan: f64,
    pub att: Option<f64>,
    pub total: f64,
}

/// `adp = α·avis + β·alan`, `total = adp + γ·lan + λ·att`. A missing
/// attribute term contributes nothing.
pub fn collaborative_loss(c: LossComponents, w: LossWeights) -> LossBreakdown {
    let adp = w.alpha * c.avis + w.beta * c.alan;
    let mut total = adp + w.gamma * c.lan;
    if let Some(att) = c.att {
        total += w.lambda * att;
    }
    LossBreakdown {
        avis: c.avis,
        alan: c.alan,
        adp,
        lan: c.lan,
        att: c.att,
        total,
    }
}

/// One-layer LSTM decoder. The seed enters as the input of the first step
/// only (its prediction is discarded); `<bos>` and the target tokens follow
/// under teacher forcing.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub lstm: Lstm,
    pub output: Linear,
    pub embedding: ParamId,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        embedding: ParamId,
        embed_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            lstm: Lstm::new(store, &format!("{name}.lstm"), embed_dim, hidden_dim, rng),
            output: Linear::new(
                store,
                &format!("{name}.output"),
                hidden_dim,
                vocab_size,
                rng,
            ),
            embedding,
        }
    }

    /// Negative log-likelihood of `target` followed by `<eos>`, given `seed`.
    pub fn decode_query(&self, g: &mut Graph, seed: Var, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::EmptySequence("decode_query"));
        }
        let vocab = g.params().get(self.embedding).rows();
        if let Some(&id) = target.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfVocabulary { id, size: vocab });
        }
        let table = g.param(self.embedding);
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(target);
        let embedded = g.gather_rows(table, &inputs);

        let mut state = self.lstm.zero_state(g);
        state = self.lstm.step(g, seed, state);
        let mut hiddens = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let x = g.row(embedded, t);
            state = self.lstm.step(g, x, state);
            hiddens.push(state.hidden);
        }
        let hiddens = g.concat_rows(&hiddens);
        let logits = self.output.forward(g, hiddens);

        let mut nll: Option<Var> = None;
        for (t, &next) in target.iter().chain(std::iter::once(&EOS)).enumerate() {
            let row = g.row(logits, t);
            let ce = g.cross_entropy(row, next);
            nll = Some(match nll {
                Some(acc) => g.add(acc, ce),
                None => ce,
            });
        }
        Ok(nll.expect("non-empty target"))
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub modalities: Vec<Modality>,
    pub visual_projections: Vec<Linear>,
    pub language_fc: Linear,
    pub language_decoder: Decoder,
    pub visual_fc: Linear,
    pub visual_decoder: Decoder,
    pub attribute_head: Option<Linear>,
}

/// Sizes needed to build the reconstruction branches.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionDims {
    pub query_dim: usize,
    pub subject_dim: usize,
    pub location_dim: usize,
    pub candidate_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub attribute_count: usize,
}

impl Reconstruction {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        embedding: ParamId,
        dims: ReconstructionDims,
        context_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let modalities = Modality::active(context_enabled).to_vec();
        let feature_dim = |m: &Modality| match m {
            Modality::Subject => dims.subject_dim,
            Modality::Location => dims.location_dim,
            Modality::Context => dims.candidate_dim,
        };
        let visual_projections = modalities
            .iter()
            .map(|m| {
                Linear::new(
                    store,
                    &format!("reconstruction.visual_projection.{m}"),
                    feature_dim(m),
                    dims.query_dim,
                    rng,
                )
            })
            .collect();
        let language_fc = Linear::new(
            store,
            "reconstruction.language_fc",
            modalities.len() * dims.query_dim,
            dims.embed_dim,
            rng,
        );
        let language_decoder = Decoder::new(
            store,
            "reconstruction.language_decoder",
            embedding,
            dims.embed_dim,
            dims.hidden_dim,
            dims.vocab_size,
            rng,
        );
        let visual_fc = Linear::new(
            store,
            "reconstruction.visual_fc",
            modalities.iter().map(feature_dim).sum(),
            dims.embed_dim,
            rng,
        );
        let visual_decoder = Decoder::new(
            store,
            "reconstruction.visual_decoder",
            embedding,
            dims.embed_dim,
            dims.hidden_dim,
            dims.vocab_size,
            rng,
        );
        let attribute_head = (dims.attribute_count > 0).then(|| {
            Linear::new(
                store,
                "reconstruction.attribute_head",
                dims.subject_dim,
                dims.attribute_count,
                rng,
            )
        });
        Self {
            modalities,
            visual_projections,
            language_fc,
            language_decoder,
            visual_fc,
            visual_decoder,
            attribute_head,
        }
    }

    /// Score-weighted sums `ṽ_m = Σ_i S_i r_m^i` of each `N × d_m` feature matrix.
    pub fn attend_visual(&self, g: &mut Graph, fused: Var, features: &[Var]) -> Vec<Var> {
        features.iter().map(|&f| g.matmul_at(fused, f)).collect()
    }

    pub fn project_visual(&self, g: &mut Graph, modality: usize, attended: Var) -> Var {
        self.visual_projections[modality].forward(g, attended)
    }

    /// `Σ_m w_m · mean((v_m − q_m)²)`.
    pub fn adaptive_visual_loss(
        &self,
        g: &mut Graph,
        visual: &[Var],
        language: &[Var],
        weights: Var,
    ) -> Var {
        let mut total: Option<Var> = None;
        for (m, (&v, &q)) in visual.iter().zip(language).enumerate() {
            let diff = g.sub(v, q);
            let sq = g.mul(diff, diff);
            let mse = g.mean(sq);
            let w = g.entry(weights, m);
            let term = g.scale_by(mse, w);
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        total.expect("at least one modality")
    }

    /// Seed from `ReLU(W [q_s ; q_l ; q_c] + b)`, then decode the query.
    pub fn language_seed(&self, g: &mut Graph, language: &[Var]) -> Var {
        let cat = g.concat_cols(language);
        let h = self.language_fc.forward(g, cat);
        g.relu(h)
    }

    pub fn adaptive_language_loss(
        &self,
        g: &mut Graph,
        language: &[Var],
        target: &[usize],
    ) -> Result<Var> {
        let seed = self.language_seed(g, language);
        self.language_decoder.decode_query(g, seed, target)
    }

    /// `f_vis = Σ_i S_i ReLU(W [r_s^i ; r_l^i ; r_c^i] + b)`. `features` holds
    /// the per-modality `N × d_m` matrices in modality order.
    pub fn visual_seed(&self, g: &mut Graph, features: &[Var], fused: Var) -> Var {
        let cat = g.concat_cols(features);
        let h = self.visual_fc.forward(g, cat);
        let r_vis = g.relu(h);
        g.matmul_at(fused, r_vis)
    }

    pub fn language_reconstruction_loss(
        &self,
        g: &mut Graph,
        features: &[Var],
        fused: Var,
        target: &[usize],
    ) -> Result<Var> {
        let seed = self.visual_seed(g, features, fused);
        self.visual_decoder.decode_query(g, seed, target)
    }

    /// Class-weighted binary cross-entropy of the attribute head applied to
    /// the attended subject feature, averaged over attribute classes.
    pub fn attribute_loss(
        &self,
        g: &mut Graph,
        attended_subject: Var,
        labels: &[f64],
        class_weights: &[f64],
    ) -> Result<Var> {
        let head = self.attribute_head.as_ref().ok_or(Error::NoAttributes)?;
        if labels.len() != head.out_dim {
            return Err(Error::DimensionMismatch {
                what: "attribute labels",
                expected: head.out_dim,
                actual: labels.len(),
            });
        }
        if class_weights.len() != head.out_dim {
            return Err(Error::DimensionMismatch {
                what: "attribute class weights",
                expected: head.out_dim,
                actual: class_weights.len(),
            });
        }
        let logits = head.forward(g, attended_subject);
        Ok(g.weighted_bce(logits, labels, class_weights))
    }
}
