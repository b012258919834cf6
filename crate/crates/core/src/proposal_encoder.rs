//! Proposal side: subject, location and context features for every region.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox, LOCATION_DIM, NEIGHBOR_COUNT};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One candidate region with its precomputed visual feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: u32,
    #[serde(skip)]
    pub subject_raw: Vec<f64>,
}

/// Features of one proposal in plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalFeatures {
    pub subject: Vec<f64>,
    pub location: [f64; LOCATION_DIM],
    /// Five rows of `[v_ij ; δm_ij]`; padded rows are zero.
    pub context_candidates: Vec<Vec<f64>>,
    pub context_mask: [bool; NEIGHBOR_COUNT],
}

/// The parameter-free part of a scene's proposal features, computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    pub visual_dim: usize,
    /// `N × d_v` raw visual features.
    pub subject_raw: Tensor,
    /// `N × 30` location features.
    pub location: Tensor,
    /// Every valid context candidate stacked, `M × (d_v + 5)`.
    pub candidates: Tensor,
    /// For proposal `i`, slot `j` holds the candidate row index or `None` for padding.
    pub candidate_slots: Vec<[Option<usize>; NEIGHBOR_COUNT]>,
}

impl SceneGeometry {
    pub fn new(proposals: &[Proposal], width: f64, height: f64) -> Result<Self> {
        let first = proposals.first().ok_or(Error::EmptyScene)?;
        let visual_dim = first.subject_raw.len();
        for p in proposals {
            if p.subject_raw.len() != visual_dim {
                return Err(Error::DimensionMismatch {
                    what: "proposal subject feature",
                    expected: visual_dim,
                    actual: p.subject_raw.len(),
                });
            }
        }
        let n = proposals.len();
        let candidate_dim = visual_dim + 5;
        let mut subject_raw = Vec::with_capacity(n * visual_dim);
        let mut location = Vec::with_capacity(n * LOCATION_DIM);
        let mut candidates = Vec::new();
        let mut candidate_slots = Vec::with_capacity(n);
        let mut rows = 0;
        for p in proposals {
            subject_raw.extend_from_slice(&p.subject_raw);
            location.extend_from_slice(
                &geometry::location_feature(p, proposals, width, height)?.flattened(),
            );
            let mut slots = [None; NEIGHBOR_COUNT];
            let neighbors = geometry::select_neighbors(p, proposals, false, NEIGHBOR_COUNT);
            for (slot, neighbor) in slots.iter_mut().zip(neighbors) {
                if let Some(nb) = neighbor {
                    candidates.extend_from_slice(&nb.subject_raw);
                    candidates.extend_from_slice(&geometry::relative_offset(&p.bbox, &nb.bbox)?);
                    *slot = Some(rows);
                    rows += 1;
                }
            }
            candidate_slots.push(slots);
        }
        Ok(Self {
            visual_dim,
            subject_raw: Tensor::new(n, visual_dim, subject_raw),
            location: Tensor::new(n, LOCATION_DIM, location),
            candidates: Tensor::new(rows, candidate_dim, candidates),
            candidate_slots,
        })
    }

    pub fn len(&self) -> usize {
        self.subject_raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_raw.rows() == 0
    }

    pub fn candidate_dim(&self) -> usize {
        self.visual_dim + 5
    }

    /// Context feature of proposal `i` in slot `slot`, zero when padded.
    pub fn candidate(&self, i: usize, slot: usize) -> Vec<f64> {
        match self.candidate_slots[i][slot] {
            Some(row) => self.candidates.row(row).to_vec(),
            None => vec![0.0; self.candidate_dim()],
        }
    }

    /// `N × (d_v + 5)` matrix holding each proposal's chosen candidate, zero where absent.
    pub fn chosen_context(&self, choices: &[Option<usize>]) -> Tensor {
        let rows: Vec<Vec<f64>> = choices
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                Some(slot) => self.candidate(i, *slot),
                None => vec![0.0; self.candidate_dim()],
            })
            .collect();
        Tensor::from_rows(&rows, self.candidate_dim())
    }
}

/// The trainable projection of raw visual features into the subject space.
#[derive(Clone, Debug)]
pub struct ProposalEncoder {
    pub projection: Linear,
    pub visual_dim: usize,
    pub subject_dim: usize,
}

impl ProposalEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        visual_dim: usize,
        subject_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            projection: Linear::new(
                store,
                "proposal.subject_projection",
                visual_dim,
                subject_dim,
                rng,
            ),
            visual_dim,
            subject_dim,
        }
    }

    fn check(&self, geometry: &SceneGeometry) -> Result<()> {
        if geometry.visual_dim != self.visual_dim {
            return Err(Error::DimensionMismatch {
                what: "scene visual features",
                expected: self.visual_dim,
                actual: geometry.visual_dim,
            });
        }
        Ok(())
    }

    /// `N × d_s` subject features on the graph.
    pub fn subject_on(&self, g: &mut Graph, geometry: &SceneGeometry) -> Result<Var> {
        self.check(geometry)?;
        let raw = g.constant(geometry.subject_raw.clone());
        Ok(self.projection.forward(g, raw))
    }

    pub fn encode_proposals(
        &self,
        params: &ParamStore,
        proposals: &[Proposal],
        width: f64,
        height: f64,
    ) -> Result<Vec<ProposalFeatures>> {
        let geometry = SceneGeometry::new(proposals, width, height)?;
        let mut g = Graph::new(params);
        let subject = self.subject_on(&mut g, &geometry)?;
        let subject = g.value(subject);
        Ok((0..geometry.len())
            .map(|i| {
                let mut location = [0.0; LOCATION_DIM];
                location.copy_from_slice(geometry.location.row(i));
                let slots = geometry.candidate_slots[i];
                ProposalFeatures {
                    subject: subject.row(i).to_vec(),
                    location,
                    context_candidates: (0..NEIGHBOR_COUNT)
                        .map(|s| geometry.candidate(i, s))
                        .collect(),
                    context_mask: slots.map(|s| s.is_some()),
                }
            })
            .collect())
    }
}
