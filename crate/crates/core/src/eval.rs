//! Accuracy at IoU > 0.5 against the ground-truth proposal's box.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::ArnModel;
use crate::params::ParamStore;
use crate::proposal_encoder::SceneGeometry;
use crate::query_encoder::Vocabulary;

/// IoU a prediction must strictly exceed to count as correct.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += usize::from(hit);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub accuracy: f64,
    pub correct: usize,
    pub queries: usize,
    /// Tallies keyed by template family; queries without one are not listed.
    pub per_template: BTreeMap<String, Tally>,
}

/// A prediction is correct when its IoU with the referent strictly exceeds 0.5.
pub fn is_hit(predicted: &BBox, truth: &BBox) -> Result<bool> {
    Ok(iou(predicted, truth)? > IOU_THRESHOLD)
}

/// Scores the boxes returned by `predict(scene, query_index)` for every query
/// of `scenes`. Every query must name its referent.
pub fn evaluate_predictions<F>(scenes: &[Scene], split: &str, predict: F) -> Result<EvalReport>
where
    F: Fn(&Scene, usize) -> Result<BBox> + Sync,
{
    let outcomes: Vec<Vec<(Option<String>, bool)>> = scenes
        .par_iter()
        .map(|scene| {
            scene
                .queries
                .iter()
                .enumerate()
                .map(|(k, q)| {
                    let view = q.evaluation_view();
                    let gt = view.gt_proposal.ok_or_else(|| Error::MissingGroundTruth {
                        image: scene.image_id.clone(),
                        query: k,
                    })?;
                    let truth = scene
                        .proposal_index(gt)
                        .ok_or_else(|| Error::UnknownProposal {
                            image: scene.image_id.clone(),
                            proposal: gt,
                        })?;
                    let predicted = predict(scene, k)?;
                    let hit = is_hit(&predicted, &scene.proposals[truth].bbox)?;
                    Ok((view.template.map(str::to_string), hit))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut overall = Tally::default();
    let mut per_template: BTreeMap<String, Tally> = BTreeMap::new();
    for (template, hit) in outcomes.into_iter().flatten() {
        overall.add(hit);
        if let Some(t) = template {
            per_template.entry(t).or_default().add(hit);
        }
    }
    Ok(EvalReport {
        split: split.to_string(),
        accuracy: overall.accuracy(),
        correct: overall.correct,
        queries: overall.total,
        per_template,
    })
}

/// Grounds every query with the model (encoders and grounding only) and
/// scores the chosen proposals.
pub fn evaluate(
    scenes: &[Scene],
    model: &ArnModel,
    params: &ParamStore,
    vocab: &Vocabulary,
    split: &str,
) -> Result<EvalReport> {
    let geometries = scenes
        .par_iter()
        .map(|s| SceneGeometry::new(&s.proposals, s.width, s.height))
        .collect::<Result<Vec<_>>>()?;
    let index: BTreeMap<&str, usize> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (s.image_id.as_str(), i))
        .collect();
    evaluate_predictions(scenes, split, |scene, k| {
        let geometry = &geometries[index[scene.image_id.as_str()]];
        let tokens = vocab.encode(&scene.queries[k].tokens);
        let grounded = model.ground(params, geometry, &tokens)?;
        Ok(scene.proposals[grounded.proposal].bbox)
    })
}
