//! Box arithmetic and the absolute/relative location encodings of a proposal.
//!
//! Boxes are stored in corner form, in image pixels. Normalisation by the
//! image size or by the candidate's own extent happens only inside the
//! encoders below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proposal_encoder::Proposal;

/// Number of neighbours used by both the location and the context encodings.
pub const NEIGHBOR_COUNT: usize = 5;
/// Length of a flattened [`LocationFeature`].
pub const LOCATION_DIM: usize = 5 + 5 * NEIGHBOR_COUNT;

/// Axis-aligned rectangle given by its top-left and bottom-right corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_tl: f64,
    y_tl: f64,
    x_br: f64,
    y_br: f64,
}

impl BBox {
    pub fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Result<Self> {
        let finite = [x_tl, y_tl, x_br, y_br].iter().all(|v| v.is_finite());
        if !finite || x_tl > x_br || y_tl > y_br {
            return Err(Error::InvalidBox {
                x_tl,
                y_tl,
                x_br,
                y_br,
            });
        }
        Ok(Self {
            x_tl,
            y_tl,
            x_br,
            y_br,
        })
    }

    pub fn x_tl(&self) -> f64 {
        self.x_tl
    }

    pub fn y_tl(&self) -> f64 {
        self.y_tl
    }

    pub fn x_br(&self) -> f64 {
        self.x_br
    }

    pub fn y_br(&self) -> f64 {
        self.y_br
    }

    pub fn width(&self) -> f64 {
        self.x_br - self.x_tl
    }

    pub fn height(&self) -> f64 {
        self.y_br - self.y_tl
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_br.min(other.x_br) - self.x_tl.max(other.x_tl)).max(0.0);
        let h = (self.y_br.min(other.y_br) - self.y_tl.max(other.y_tl)).max(0.0);
        w * h
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// Intersection over union. Fails only when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Err(Error::UndefinedIou);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// `[x_tl/W, y_tl/H, x_br/W, y_br/H, w·h/(W·H)]`.
pub fn absolute_location(b: &BBox, width: f64, height: f64) -> Result<[f64; 5]> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidImageSize { width, height });
    }
    Ok([
        b.x_tl / width,
        b.y_tl / height,
        b.x_br / width,
        b.y_br / height,
        b.area() / (width * height),
    ])
}

/// Offsets of `neighbor` relative to `candidate`, scaled by the candidate's
/// extent, followed by the neighbour-to-candidate area ratio.
pub fn relative_offset(candidate: &BBox, neighbor: &BBox) -> Result<[f64; 5]> {
    let (w, h) = (candidate.width(), candidate.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::ZeroAreaCandidate);
    }
    Ok([
        (neighbor.x_tl - candidate.x_tl) / w,
        (neighbor.y_tl - candidate.y_tl) / h,
        (neighbor.x_br - candidate.x_br) / w,
        (neighbor.y_br - candidate.y_br) / h,
        neighbor.area() / (w * h),
    ])
}

/// Up to `k` proposals nearest to `target` by centre distance, nearest first
/// with ties broken by ascending id, padded with `None` to length `k`.
///
/// The target itself (matched by id) is never its own neighbour.
pub fn select_neighbors<'a>(
    target: &Proposal,
    pool: &'a [Proposal],
    same_category_only: bool,
    k: usize,
) -> Vec<Option<&'a Proposal>> {
    let (cx, cy) = target.bbox.center();
    let mut candidates: Vec<(f64, &Proposal)> = pool
        .iter()
        .filter(|p| p.id != target.id)
        .filter(|p| !same_category_only || p.category == target.category)
        .map(|p| {
            let (px, py) = p.bbox.center();
            ((px - cx).powi(2) + (py - cy).powi(2), p)
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    let mut out: Vec<Option<&Proposal>> = candidates
        .into_iter()
        .take(k)
        .map(|(_, p)| Some(p))
        .collect();
    out.resize(k, None);
    out
}

/// Absolute location followed by the offsets of five same-category neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationFeature {
    pub absolute: [f64; 5],
    pub relatives: [[f64; 5]; NEIGHBOR_COUNT],
}

impl LocationFeature {
    pub fn flattened(&self) -> [f64; LOCATION_DIM] {
        let mut out = [0.0; LOCATION_DIM];
        out[..5].copy_from_slice(&self.absolute);
        for (j, rel) in self.relatives.iter().enumerate() {
            out[5 + 5 * j..10 + 5 * j].copy_from_slice(rel);
        }
        out
    }
}

pub fn location_feature(
    target: &Proposal,
    pool: &[Proposal],
    width: f64,
    height: f64,
) -> Result<LocationFeature> {
    let absolute = absolute_location(&target.bbox, width, height)?;
    let mut relatives = [[0.0; 5]; NEIGHBOR_COUNT];
    for (slot, neighbor) in
        relatives
            .iter_mut()
            .zip(select_neighbors(target, pool, true, NEIGHBOR_COUNT))
    {
        if let Some(n) = neighbor {
            *slot = relative_offset(&target.bbox, &n.bbox)?;
        }
    }
    Ok(LocationFeature {
        absolute,
        relatives,
    })
}
