//! The assembled network: encoders, grounding and reconstruction branches
//! over one shared parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LOCATION_DIM;
use crate::graph::{Graph, Var};
use crate::grounding::{ContextChoice, Grounding, ScoreSheet, ScoreVars};
use crate::params::ParamStore;
use crate::proposal_encoder::{ProposalEncoder, SceneGeometry};
use crate::query_encoder::{Modality, QueryEncoder};
use crate::reconstruction::{
    LossBreakdown, LossComponents, LossWeights, Reconstruction, ReconstructionDims,
};

/// Layer sizes. Query modality embeddings live in the word-embedding space,
/// so the query feature size equals `embed_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub subject_dim: usize,
    pub attention_hidden: usize,
    pub decoder_hidden: usize,
    pub attribute_count: usize,
    pub context_enabled: bool,
}

impl ModelConfig {
    pub fn candidate_dim(&self) -> usize {
        self.visual_dim + 5
    }
}

/// One query prepared for training: token ids and an optional multi-hot
/// attribute vector. There is deliberately no ground-truth field.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingQuery {
    pub tokens: Vec<usize>,
    pub attributes: Option<Vec<f64>>,
}

/// Graph handles for the loss of one scene.
#[derive(Clone, Debug)]
pub struct SceneLossVars {
    pub total: Var,
    pub avis: Var,
    pub alan: Var,
    pub lan: Var,
    pub att: Option<Var>,
    /// Context slot picked per proposal, one vector per query.
    pub context_choices: Vec<Vec<Option<usize>>>,
}

impl SceneLossVars {
    pub fn breakdown(&self, g: &Graph, weights: LossWeights) -> LossBreakdown {
        crate::reconstruction::collaborative_loss(
            LossComponents {
                avis: g.scalar(self.avis),
                alan: g.scalar(self.alan),
                lan: g.scalar(self.lan),
                att: self.att.map(|a| g.scalar(a)),
            },
            weights,
        )
    }
}

/// Grounding result for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Grounded {
    pub proposal: usize,
    pub scores: ScoreSheet,
    pub modality_weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ArnModel {
    pub config: ModelConfig,
    pub query: QueryEncoder,
    pub proposal: ProposalEncoder,
    pub grounding: Grounding,
    pub reconstruction: Reconstruction,
}

impl ArnModel {
    /// Registers every parameter in `store` and returns the layer handles.
    pub fn new<R: Rng>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Self {
        let c = &config;
        let query = QueryEncoder::new(
            store,
            c.vocab_size,
            c.embed_dim,
            c.hidden_dim,
            c.context_enabled,
            rng,
        );
        let proposal = ProposalEncoder::new(store, c.visual_dim, c.subject_dim, rng);
        let grounding = Grounding::new(
            store,
            c.embed_dim,
            c.subject_dim,
            LOCATION_DIM,
            c.candidate_dim(),
            c.attention_hidden,
            c.context_enabled,
            rng,
        );
        let reconstruction = Reconstruction::new(
            store,
            query.embedding,
            ReconstructionDims {
                query_dim: c.embed_dim,
                subject_dim: c.subject_dim,
                location_dim: LOCATION_DIM,
                candidate_dim: c.candidate_dim(),
                embed_dim: c.embed_dim,
                hidden_dim: c.decoder_hidden,
                vocab_size: c.vocab_size,
                attribute_count: c.attribute_count,
            },
            c.context_enabled,
            rng,
        );
        Self {
            config,
            query,
            proposal,
            grounding,
            reconstruction,
        }
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.grounding.modalities
    }

    fn score_query(
        &self,
        g: &mut Graph,
        geometry: &SceneGeometry,
        subject: Var,
        tokens: &[usize],
        choice: ContextChoice<'_>,
    ) -> Result<(crate::query_encoder::QueryVars, ScoreVars)> {
        let q = self.query.encode_on(g, tokens)?;
        let scores = self
            .grounding
            .score_on(g, &q.modality, q.weights, subject, geometry, choice);
        Ok((q, scores))
    }

    /// Inference: encoders and grounding only.
    pub fn ground(
        &self,
        params: &ParamStore,
        geometry: &SceneGeometry,
        tokens: &[usize],
    ) -> Result<Grounded> {
        let mut g = Graph::new(params);
        let subject = self.proposal.subject_on(&mut g, geometry)?;
        let (q, scores) =
            self.score_query(&mut g, geometry, subject, tokens, ContextChoice::Select)?;
        let sheet = ScoreSheet::from_graph(&g, &scores, self.modalities());
        Ok(Grounded {
            proposal: sheet.best(),
            modality_weights: g.value(q.weights).data().to_vec(),
            scores: sheet,
        })
    }

    /// Builds the collaborative loss of a scene: each component averaged over
    /// the scene's queries (attributes over the queries that carry them).
    /// `frozen` replays earlier context selections, one vector per query.
    pub fn scene_loss_on(
        &self,
        g: &mut Graph,
        geometry: &SceneGeometry,
        queries: &[TrainingQuery],
        class_weights: &[f64],
        weights: LossWeights,
        frozen: Option<&[Vec<Option<usize>>]>,
    ) -> Result<SceneLossVars> {
        if queries.is_empty() {
            return Err(Error::EmptySequence("scene queries"));
        }
        let subject = self.proposal.subject_on(g, geometry)?;
        let location = g.constant(geometry.location.clone());

        let mut avis = Vec::with_capacity(queries.len());
        let mut alan = Vec::with_capacity(queries.len());
        let mut lan = Vec::with_capacity(queries.len());
        let mut att = Vec::new();
        let mut context_choices = Vec::with_capacity(queries.len());
        for (k, query) in queries.iter().enumerate() {
            let choice = match frozen {
                Some(f) => ContextChoice::Frozen(&f[k]),
                None => ContextChoice::Select,
            };
            let (q, scores) = self.score_query(g, geometry, subject, &query.tokens, choice)?;
            let mut features = vec![subject, location];
            if self.config.context_enabled {
                let chosen = g.constant(geometry.chosen_context(&scores.context_choice));
                features.push(chosen);
            }
            let rec = &self.reconstruction;
            let attended = rec.attend_visual(g, scores.fused, &features);
            let visual: Vec<Var> = attended
                .iter()
                .enumerate()
                .map(|(m, &v)| rec.project_visual(g, m, v))
                .collect();
            avis.push(rec.adaptive_visual_loss(g, &visual, &q.modality, q.weights));
            alan.push(rec.adaptive_language_loss(g, &q.modality, &query.tokens)?);
            lan.push(rec.language_reconstruction_loss(
                g,
                &features,
                scores.fused,
                &query.tokens,
            )?);
            if let Some(labels) = &query.attributes {
                att.push(rec.attribute_loss(g, attended[0], labels, class_weights)?);
            }
            context_choices.push(scores.context_choice);
        }

        let avis = mean_of(g, &avis);
        let alan = mean_of(g, &alan);
        let lan = mean_of(g, &lan);
        let att = (!att.is_empty()).then(|| mean_of(g, &att));

        let a = g.scale(avis, weights.alpha);
        let b = g.scale(alan, weights.beta);
        let mut total = g.add(a, b);
        let c = g.scale(lan, weights.gamma);
        total = g.add(total, c);
        if let Some(att) = att {
            let d = g.scale(att, weights.lambda);
            total = g.add(total, d);
        }
        Ok(SceneLossVars {
            total,
            avis,
            alan,
            lan,
            att,
            context_choices,
        })
    }
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}
