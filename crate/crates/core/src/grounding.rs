//! Proposal attention per modality, language-weighted fusion, and argmax inference.

use rand::Rng;

use crate::graph::{self, Graph, Var};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::proposal_encoder::SceneGeometry;
use crate::query_encoder::Modality;
use crate::tensor::Tensor;

/// Context logit of a proposal that has no valid context candidate.
pub const CONTEXT_PAD_LOGIT: f64 = -1e4;

/// Scoring perceptrons, one per active modality.
#[derive(Clone, Debug)]
pub struct Grounding {
    pub heads: Vec<Mlp>,
    pub modalities: Vec<Modality>,
}

/// Graph handles produced while scoring one query against a scene.
#[derive(Clone, Debug)]
pub struct ScoreVars {
    /// `N × 1` logits per active modality.
    pub raw: Vec<Var>,
    /// `N × 1` distributions per active modality.
    pub distributions: Vec<Var>,
    /// `N × 1` fused distribution.
    pub fused: Var,
    /// Selected context slot per proposal (`None` when no candidate exists
    /// or context is disabled).
    pub context_choice: Vec<Option<usize>>,
}

/// Plain-valued scores of every proposal for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSheet {
    pub modalities: Vec<Modality>,
    /// `raw[m][i]`: logit of proposal `i` under modality `m`.
    pub raw: Vec<Vec<f64>>,
    pub per_modality: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    pub context_choice: Vec<Option<usize>>,
}

impl ScoreSheet {
    pub fn from_graph(g: &Graph, vars: &ScoreVars, modalities: &[Modality]) -> Self {
        let read = |v: &Var| g.value(*v).data().to_vec();
        Self {
            modalities: modalities.to_vec(),
            raw: vars.raw.iter().map(read).collect(),
            per_modality: vars.distributions.iter().map(read).collect(),
            fused: read(&vars.fused),
            context_choice: vars.context_choice.clone(),
        }
    }

    /// Proposal with the highest fused score, lowest index on ties.
    pub fn best(&self) -> usize {
        argmax(&self.fused).expect("score sheet covers at least one proposal")
    }
}

/// Per-proposal context selection: frozen slots from an earlier pass, or
/// pick the maximal response.
#[derive(Clone, Copy, Debug)]
pub enum ContextChoice<'a> {
    Select,
    Frozen(&'a [Option<usize>]),
}

impl Grounding {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        query_dim: usize,
        subject_dim: usize,
        location_dim: usize,
        candidate_dim: usize,
        hidden: usize,
        context_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let modalities = Modality::active(context_enabled).to_vec();
        let heads = modalities
            .iter()
            .map(|m| {
                let input = match m {
                    Modality::Subject => subject_dim,
                    Modality::Location => location_dim,
                    Modality::Context => candidate_dim,
                };
                Mlp::new(
                    store,
                    &format!("grounding.{m}"),
                    query_dim + input,
                    hidden,
                    1,
                    rng,
                )
            })
            .collect();
        Self { heads, modalities }
    }

    /// `W₂ ReLU(W₁ [q ; r] + b₁) + b₂` for every row `r` of `features`, giving `rows × 1` logits.
    pub fn attention_score(&self, g: &mut Graph, head: usize, query: Var, features: Var) -> Var {
        let rows = g.shape(features).0;
        let q = g.repeat_rows(query, rows);
        let x = g.concat_cols(&[q, features]);
        self.heads[head].forward(g, x)
    }

    /// Context logit per proposal: the maximum response over its valid candidates.
    pub fn context_select(
        &self,
        g: &mut Graph,
        head: usize,
        query: Var,
        geometry: &SceneGeometry,
        choice: ContextChoice<'_>,
    ) -> (Var, Vec<Option<usize>>) {
        let n = geometry.len();
        let m = geometry.candidates.rows();
        let pad = g.constant(Tensor::scalar(CONTEXT_PAD_LOGIT));
        if m == 0 {
            let logits = g.repeat_rows(pad, n);
            return (logits, vec![None; n]);
        }
        let candidates = g.constant(geometry.candidates.clone());
        let scores = self.attention_score(g, head, query, candidates);
        let values = g.value(scores).data().to_vec();

        let chosen: Vec<Option<usize>> = match choice {
            ContextChoice::Frozen(slots) => slots.to_vec(),
            ContextChoice::Select => geometry
                .candidate_slots
                .iter()
                .map(|slots| {
                    let mut best: Option<(usize, f64)> = None;
                    for (slot, row) in slots.iter().enumerate() {
                        if let Some(row) = row {
                            let v = values[*row];
                            if best.is_none_or(|(_, b)| v > b) {
                                best = Some((slot, v));
                            }
                        }
                    }
                    best.map(|(slot, _)| slot)
                })
                .collect(),
        };
        let extended = g.concat_rows(&[scores, pad]);
        let indices: Vec<usize> = chosen
            .iter()
            .zip(&geometry.candidate_slots)
            .map(|(c, slots)| c.and_then(|s| slots[s]).unwrap_or(m))
            .collect();
        (g.gather_rows(extended, &indices), chosen)
    }

    /// Scores, normalises and fuses. `queries[m]` is the query embedding for
    /// modality `m`; `subject` is the `N × d_s` projected subject matrix.
    pub fn score_on(
        &self,
        g: &mut Graph,
        queries: &[Var],
        weights: Var,
        subject: Var,
        geometry: &SceneGeometry,
        choice: ContextChoice<'_>,
    ) -> ScoreVars {
        let mut raw = Vec::with_capacity(self.heads.len());
        let mut context_choice = vec![None; geometry.len()];
        for (head, modality) in self.modalities.iter().enumerate() {
            let logits = match modality {
                Modality::Subject => self.attention_score(g, head, queries[head], subject),
                Modality::Location => {
                    let loc = g.constant(geometry.location.clone());
                    self.attention_score(g, head, queries[head], loc)
                }
                Modality::Context => {
                    let (logits, chosen) =
                        self.context_select(g, head, queries[head], geometry, choice);
                    context_choice = chosen;
                    logits
                }
            };
            raw.push(logits);
        }
        let distributions: Vec<Var> = raw.iter().map(|&r| g.softmax(r)).collect();
        let fused = fuse_on(g, &distributions, weights);
        ScoreVars {
            raw,
            distributions,
            fused,
            context_choice,
        }
    }
}

/// `Σ_m w_m · s_m` on the graph.
pub fn fuse_on(g: &mut Graph, distributions: &[Var], weights: Var) -> Var {
    let mut fused: Option<Var> = None;
    for (m, &d) in distributions.iter().enumerate() {
        let w = g.entry(weights, m);
        let term = g.scale_by(d, w);
        fused = Some(match fused {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    fused.expect("at least one modality")
}

/// Softmax over proposals, separately for each modality's logits.
pub fn normalize_scores(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter().map(|logits| graph::softmax(logits)).collect()
}

/// Convex combination of per-modality distributions.
pub fn fuse(per_modality: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    assert_eq!(per_modality.len(), weights.len(), "one weight per modality");
    let n = per_modality.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            per_modality
                .iter()
                .zip(weights)
                .map(|(d, w)| w * d[i])
                .sum()
        })
        .collect()
}

/// Index of the maximum, lowest index on ties; `None` for an empty slice.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::proposal_encoder::Proposal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grounding(store: &mut ParamStore, context: bool) -> Grounding {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Grounding::new(store, 4, 3, 30, 7, 6, context, &mut rng)
    }

    fn relu(x: f64) -> f64 {
        x.max(0.0)
    }

    /// Straight-line two-layer perceptron.
    fn mlp_reference(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> f64 {
        let w1 = store.get(mlp.hidden.weight);
        let b1 = store.get(mlp.hidden.bias);
        let w2 = store.get(mlp.output.weight);
        let b2 = store.get(mlp.output.bias);
        let hidden: Vec<f64> = (0..w1.rows())
            .map(|r| relu(w1.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1.get(0, r)))
            .collect();
        hidden
            .iter()
            .zip(w2.row(0))
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + b2.item()
    }

    #[test]
    fn attention_score_matches_reference() {
        let mut store = ParamStore::new();
        let gr = grounding(&mut store, true);
        let q = vec![0.3, -0.2, 0.8, 0.1];
        let r = vec![vec![1.0, 0.5, -0.4], vec![-0.7, 0.2, 0.9]];
        let mut g = Graph::new(&store);
        let qv = g.constant(Tensor::row_vector(q.clone()));
        let rv = g.constant(Tensor::from_rows(&r, 3));
        let s = gr.attention_score(&mut g, 0, qv, rv);
        for (i, row) in r.iter().enumerate() {
            let x: Vec<f64> = q.iter().chain(row).copied().collect();
            let expected = mlp_reference(&store, &gr.heads[0], &x);
            assert!((g.value(s).get(i, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_layer_and_dead_relu() {
        let mut store = ParamStore::new();
        let gr = grounding(&mut store, true);
        let mut zero_out = store.clone();
        zero_out
            .get_mut(gr.heads[0].output.weight)
            .data_mut()
            .fill(0.0);
        let mut g = Graph::new(&zero_out);
        let q = g.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]));
        let r = g.constant(Tensor::row_vector(vec![0.5, 0.5, 0.5]));
        let s = gr.attention_score(&mut g, 0, q, r);
        assert_eq!(g.scalar(s), 0.0);

        let mut dead = store.clone();
        dead.get_mut(gr.heads[0].hidden.weight).data_mut().fill(0.0);
        dead.get_mut(gr.heads[0].hidden.bias).data_mut().fill(-1.0);
        dead.get_mut(gr.heads[0].output.bias).data_mut().fill(0.75);
        let mut g = Graph::new(&dead);
        let q = g.constant(Tensor::row_vector(vec![1.0, -2.0, 3.0, 4.0]));
        let r = g.constant(Tensor::row_vector(vec![9.0, 0.5, 0.5]));
        let s = gr.attention_score(&mut g, 0, q, r);
        assert_eq!(g.scalar(s), 0.75);
    }

    fn scene_geometry(raws: &[Vec<f64>]) -> SceneGeometry {
        let proposals: Vec<Proposal> = raws
            .iter()
            .enumerate()
            .map(|(i, raw)| Proposal {
                id: i,
                bbox: BBox::new(
                    10.0 * i as f64,
                    3.0 * i as f64,
                    10.0 * i as f64 + 8.0,
                    3.0 * i as f64 + 5.0,
                )
                .unwrap(),
                category: 0,
                subject_raw: raw.clone(),
            })
            .collect();
        SceneGeometry::new(&proposals, 100.0, 100.0).unwrap()
    }

    #[test]
    fn context_select_singleton_and_ties() {
        let mut store = ParamStore::new();
        let gr = grounding(&mut store, true);
        let geo = scene_geometry(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4]));
        let (_, chosen) = gr.context_select(&mut g, 2, q, &geo, ContextChoice::Select);
        assert_eq!(chosen, vec![Some(0), Some(0)]);

        // Identical candidates: lowest slot wins.
        let mut geo = scene_geometry(&vec![vec![0.0, 0.0]; 6]);
        let row = geo.candidates.row(0).to_vec();
        for r in 0..geo.candidates.rows() {
            for (c, v) in row.iter().enumerate() {
                geo.candidates.set(r, c, *v);
            }
        }
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4]));
        let (_, chosen) = gr.context_select(&mut g, 2, q, &geo, ContextChoice::Select);
        assert!(chosen.iter().all(|&c| c == Some(0)));
    }

    #[test]
    fn context_select_agrees_with_brute_force() {
        let mut store = ParamStore::new();
        let gr = grounding(&mut store, true);
        let raws: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.1).cos()])
            .collect();
        let geo = scene_geometry(&raws);
        let q = vec![0.4, -0.3, 0.2, 0.9];
        let mut g = Graph::new(&store);
        let qv = g.constant(Tensor::row_vector(q.clone()));
        let (logits, chosen) = gr.context_select(&mut g, 2, qv, &geo, ContextChoice::Select);
        for (i, &picked) in chosen.iter().enumerate() {
            let scores: Vec<f64> = (0..5)
                .map(|s| {
                    let x: Vec<f64> = q.iter().copied().chain(geo.candidate(i, s)).collect();
                    mlp_reference(&store, &gr.heads[2], &x)
                })
                .collect();
            let best = (0..5)
                .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            assert_eq!(picked, Some(best));
            assert!((g.value(logits).get(i, 0) - scores[best]).abs() < 1e-12);
        }
    }

    #[test]
    fn proposals_without_candidates_get_pad_logit() {
        let mut store = ParamStore::new();
        let gr = grounding(&mut store, true);
        let geo = scene_geometry(&[vec![1.0, 1.0]]);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::row_vector(vec![0.0; 4]));
        let (logits, chosen) = gr.context_select(&mut g, 2, q, &geo, ContextChoice::Select);
        assert_eq!(chosen, vec![None]);
        assert_eq!(g.scalar(logits), CONTEXT_PAD_LOGIT);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_scores(&[vec![3.7]]), vec![vec![1.0]]);
        assert_eq!(normalize_scores(&[vec![2.0; 4]]), vec![vec![0.25; 4]]);
        let d = &normalize_scores(&[vec![0.0, 3f64.ln()]])[0];
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fuse_examples() {
        let s = vec![0.1, 0.6, 0.3];
        let l = vec![0.5, 0.25, 0.25];
        let c = vec![0.2, 0.2, 0.6];
        let dists = vec![s.clone(), l.clone(), c.clone()];
        assert_eq!(fuse(&dists, &[1.0, 0.0, 0.0]), s);
        let same = vec![s.clone(), s.clone(), s.clone()];
        let fused = fuse(&same, &[0.2, 0.3, 0.5]);
        for (a, b) in fused.iter().zip(&s) {
            assert!((a - b).abs() < 1e-15);
        }
        let mixed = fuse(&dists, &[0.5, 0.25, 0.25]);
        let expected = [0.225, 0.4125, 0.3625];
        for (a, b) in mixed.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[1.0]), Some(0));
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), Some(1));
        assert_eq!(argmax(&[0.4, 0.1, 0.4]), Some(0));
        assert_eq!(argmax(&[]), None);
    }
}
