//! Scenes on disk and in memory: the line-delimited manifest, the binary
//! feature store, vocabulary and attribute tables, and the synthetic scene
//! generator.
//!
//! Ground-truth referents are private to [`QueryRecord`] and only reachable
//! through [`QueryRecord::evaluation_view`]. Training consumes
//! [`QueryRecord::training_text`], which carries no referent.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::proposal_encoder::Proposal;
use crate::query_encoder::{Vocabulary, MAX_QUERY_LEN};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURE_DIR: &str = "features";
pub const FEATURE_MAGIC: &[u8; 4] = b"ARNF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, rename = "gt", skip_serializing_if = "Option::is_none")]
    gt_proposal: Option<usize>,
}

/// The part of a query that training may see.
#[derive(Clone, Copy, Debug)]
pub struct TrainingText<'a> {
    pub tokens: &'a [String],
    pub attributes: &'a [String],
}

/// The part of a query that evaluation may see.
#[derive(Clone, Copy, Debug)]
pub struct EvaluationView<'a> {
    pub tokens: &'a [String],
    pub template: Option<&'a str>,
    pub gt_proposal: Option<usize>,
}

impl QueryRecord {
    pub fn new(
        tokens: Vec<String>,
        attributes: Vec<String>,
        template: Option<String>,
        gt_proposal: Option<usize>,
    ) -> Self {
        Self {
            tokens,
            attributes,
            template,
            gt_proposal,
        }
    }

    pub fn training_text(&self) -> TrainingText<'_> {
        TrainingText {
            tokens: &self.tokens,
            attributes: &self.attributes,
        }
    }

    pub fn evaluation_view(&self) -> EvaluationView<'_> {
        EvaluationView {
            tokens: &self.tokens,
            template: self.template.as_deref(),
            gt_proposal: self.gt_proposal,
        }
    }

    pub fn set_gt_proposal(&mut self, gt: Option<usize>) {
        self.gt_proposal = gt;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    pub split: String,
    pub width: f64,
    pub height: f64,
    pub proposals: Vec<Proposal>,
    pub queries: Vec<QueryRecord>,
}

impl Scene {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.proposals.is_empty() {
            return Err(format!("scene {} has no proposals", self.image_id));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(format!(
                "scene {} has invalid size {}x{}",
                self.image_id, self.width, self.height
            ));
        }
        let mut ids: Vec<usize> = self.proposals.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.proposals.len() {
            return Err(format!("scene {} repeats a proposal id", self.image_id));
        }
        for q in &self.queries {
            if q.tokens.is_empty() || q.tokens.len() > MAX_QUERY_LEN {
                return Err(format!(
                    "scene {} has a query of {} tokens (allowed 1..={MAX_QUERY_LEN})",
                    self.image_id,
                    q.tokens.len()
                ));
            }
            if let Some(gt) = q.gt_proposal {
                if !self.proposals.iter().any(|p| p.id == gt) {
                    return Err(format!(
                        "scene {} names unknown proposal {gt} as a referent",
                        self.image_id
                    ));
                }
            }
        }
        Ok(())
    }

    /// Index of the proposal with `id`.
    pub fn proposal_index(&self, id: usize) -> Option<usize> {
        self.proposals.iter().position(|p| p.id == id)
    }
}

pub fn feature_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(FEATURE_DIR).join(format!("{image_id}.arnf"))
}

/// Writes `rows` (all the same length) as one feature record. Values are
/// stored as `f32`.
pub fn write_features(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            what: "feature row",
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut buf = Vec::with_capacity(16 + 4 * rows.len() * dim);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in rows {
        for &v in r {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let fail = |message: String| Error::FeatureStore {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(fail("missing ARNF header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let (count, dim) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 4 * count * dim;
    if bytes.len() != expected {
        return Err(fail(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    Ok((0..count)
        .map(|r| {
            (0..dim)
                .map(|c| {
                    let i = 16 + 4 * (r * dim + c);
                    f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as f64
                })
                .collect()
        })
        .collect())
}

/// Writes `dir/manifest.jsonl` and one feature record per scene.
pub fn write_manifest(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir.join(FEATURE_DIR))?;
    let mut out = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for scene in scenes {
        let line = serde_json::to_string(scene).expect("scene serializes");
        writeln!(out, "{line}")?;
        let rows: Vec<Vec<f64>> = scene
            .proposals
            .iter()
            .map(|p| p.subject_raw.clone())
            .collect();
        write_features(&feature_path(dir, &scene.image_id), &rows)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest and attaches features from the sibling feature store.
/// `path` may name the manifest file or the directory holding it.
pub fn load_manifest(path: &Path) -> Result<Vec<Scene>> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let reader = BufReader::new(fs::File::open(&file)?);
    let mut scenes = Vec::new();
    let mut visual_dim: Option<usize> = None;
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        let malformed = |message: String| Error::Manifest {
            path: file.clone(),
            line: index + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let mut scene: Scene = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        scene.validate().map_err(malformed)?;
        let fpath = feature_path(&dir, &scene.image_id);
        if !fpath.exists() {
            return Err(Error::MissingFeatures(scene.image_id));
        }
        let rows = read_features(&fpath)?;
        if rows.len() != scene.proposals.len() {
            return Err(Error::DimensionMismatch {
                what: "feature record rows",
                expected: scene.proposals.len(),
                actual: rows.len(),
            });
        }
        let dim = rows[0].len();
        let expected = *visual_dim.get_or_insert(dim);
        if dim != expected {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected,
                actual: dim,
            });
        }
        for (p, row) in scene.proposals.iter_mut().zip(rows) {
            p.subject_raw = row;
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Tokens seen at least `min_count` times, most frequent first, ties in
/// lexicographic order.
pub fn build_vocabulary(scenes: &[Scene], min_count: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for q in scenes.iter().flat_map(|s| &s.queries) {
        for t in q.training_text().tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::new(kept.into_iter().map(|(t, _)| t))
}

/// Attribute names with corpus counts and `1/count` weights, in
/// lexicographic order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTable {
    names: Vec<String>,
    counts: Vec<usize>,
}

impl AttributeTable {
    pub fn from_counts(counts: BTreeMap<String, usize>) -> Result<Self> {
        let counts: Vec<(String, usize)> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        if counts.is_empty() {
            return Err(Error::EmptyAttributeSet);
        }
        let (names, counts) = counts.into_iter().unzip();
        Ok(Self { names, counts })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| 1.0 / c as f64).collect()
    }

    /// Multi-hot vector over the table, `None` when no listed attribute occurs.
    pub fn multi_hot<S: AsRef<str>>(&self, attributes: &[S]) -> Option<Vec<f64>> {
        let mut v = vec![0.0; self.len()];
        let mut any = false;
        for a in attributes {
            if let Some(i) = self.id(a.as_ref()) {
                v[i] = 1.0;
                any = true;
            }
        }
        any.then_some(v)
    }

    /// One `name<TAB>count` line per attribute.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (n, c) in self.names.iter().zip(&self.counts) {
            text.push_str(&format!("{n}\t{c}\n"));
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut counts = BTreeMap::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let parsed = line
                .split_once('\t')
                .and_then(|(n, c)| c.trim().parse::<usize>().ok().map(|c| (n.to_string(), c)));
            let (name, count) = parsed.ok_or_else(|| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected name<TAB>count".into(),
            })?;
            counts.insert(name, count);
        }
        Self::from_counts(counts)
    }
}

/// Counts attribute occurrences across every query of `scenes`.
pub fn attribute_weights(scenes: &[Scene]) -> Result<AttributeTable> {
    let mut counts = BTreeMap::new();
    for q in scenes.iter().flat_map(|s| &s.queries) {
        for a in q.training_text().attributes {
            *counts.entry(a.clone()).or_insert(0) += 1;
        }
    }
    AttributeTable::from_counts(counts)
}

pub const CATEGORIES: [&str; 4] = ["ball", "box", "cup", "book"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];

/// Layout of synthetic scenes: proposals occupy distinct cells of a
/// `columns × rows` grid over a `width × height` image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub columns: usize,
    pub rows: usize,
    pub width: f64,
    pub height: f64,
    /// Extra pure-noise feature dimensions appended after the one-hot blocks.
    pub noise_dims: usize,
    pub noise_sigma: f64,
    /// Fraction of scenes assigned to the `train` split; the rest are `val`.
    pub train_fraction: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            columns: 4,
            rows: 3,
            width: 640.0,
            height: 480.0,
            noise_dims: 8,
            noise_sigma: 0.1,
            train_fraction: 0.8,
        }
    }
}

impl GridSpec {
    pub fn visual_dim(&self) -> usize {
        CATEGORIES.len() + COLORS.len() + self.noise_dims
    }
}

/// Symbolic content of a synthetic proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthObject {
    pub category: usize,
    pub color: usize,
    pub column: usize,
    pub row: usize,
}

/// Query families of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// `<color> <category>`
    Subject { color: usize, category: usize },
    /// `leftmost <category>` or `rightmost <category>`
    Location { rightmost: bool, category: usize },
    /// `<category> left of the <other>` or `... right of the ...`
    Context {
        right_of: bool,
        category: usize,
        other: usize,
    },
}

impl Template {
    pub fn family(&self) -> &'static str {
        match self {
            Template::Subject { .. } => "subject",
            Template::Location { .. } => "location",
            Template::Context { .. } => "context",
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        let words: Vec<&str> = match *self {
            Template::Subject { color, category } => vec![COLORS[color], CATEGORIES[category]],
            Template::Location {
                rightmost,
                category,
            } => {
                vec![
                    if rightmost { "rightmost" } else { "leftmost" },
                    CATEGORIES[category],
                ]
            }
            Template::Context {
                right_of,
                category,
                other,
            } => vec![
                CATEGORIES[category],
                if right_of { "right" } else { "left" },
                "of",
                "the",
                CATEGORIES[other],
            ],
        };
        words.into_iter().map(String::from).collect()
    }

    pub fn attributes(&self) -> Vec<String> {
        match *self {
            Template::Subject { color, .. } => vec![COLORS[color].to_string()],
            _ => Vec::new(),
        }
    }

    /// Indices of every object satisfying the template.
    pub fn resolve(&self, objects: &[SynthObject]) -> Vec<usize> {
        let of = |c: usize| {
            objects
                .iter()
                .enumerate()
                .filter(move |(_, o)| o.category == c)
        };
        match *self {
            Template::Subject { color, category } => of(category)
                .filter(|(_, o)| o.color == color)
                .map(|(i, _)| i)
                .collect(),
            Template::Location {
                rightmost,
                category,
            } => {
                let cols: Vec<usize> = of(category).map(|(_, o)| o.column).collect();
                let target = if rightmost {
                    cols.iter().max()
                } else {
                    cols.iter().min()
                };
                match target {
                    Some(&t) => of(category)
                        .filter(|(_, o)| o.column == t)
                        .map(|(i, _)| i)
                        .collect(),
                    None => Vec::new(),
                }
            }
            Template::Context {
                right_of,
                category,
                other,
            } => of(category)
                .filter(|&(i, o)| {
                    objects.iter().enumerate().any(|(j, n)| {
                        j != i
                            && n.category == other
                            && if right_of {
                                o.column > n.column
                            } else {
                                o.column < n.column
                            }
                    })
                })
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

fn sample_template<R: Rng>(rng: &mut R, family: usize) -> Template {
    let category = rng.random_range(0..CATEGORIES.len());
    match family {
        0 => Template::Subject {
            color: rng.random_range(0..COLORS.len()),
            category,
        },
        1 => Template::Location {
            rightmost: rng.random_bool(0.5),
            category,
        },
        _ => Template::Context {
            right_of: rng.random_bool(0.5),
            category,
            other: rng.random_range(0..CATEGORIES.len()),
        },
    }
}

const TEMPLATE_RETRIES: usize = 200;
const SCENE_RETRIES: usize = 50;

/// Deterministic synthetic corpus. Each scene holds one query per template
/// family that the layout can satisfy, each with exactly one referent.
pub fn generate_synthetic(
    seed: u64,
    n_scenes: usize,
    proposals_per_scene: usize,
    grid: &GridSpec,
) -> Result<Vec<Scene>> {
    let cells = grid.columns * grid.rows;
    if proposals_per_scene < 2 || proposals_per_scene > cells {
        return Err(Error::Config(format!(
            "proposals_per_scene must be in 2..={cells} for a {}x{} grid",
            grid.columns, grid.rows
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, grid.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let n_train = (n_scenes as f64 * grid.train_fraction).round() as usize;
    let mut scenes = Vec::with_capacity(n_scenes);
    for s in 0..n_scenes {
        let mut attempt = 0;
        let (objects, queries) = loop {
            let objects = sample_objects(&mut rng, proposals_per_scene, grid);
            let queries: Vec<(Template, usize)> = (0..3)
                .filter_map(|family| sample_query(&mut rng, family, &objects))
                .collect();
            if !queries.is_empty() {
                break (objects, queries);
            }
            attempt += 1;
            if attempt >= SCENE_RETRIES {
                return Err(Error::Unsatisfiable(SCENE_RETRIES));
            }
        };
        let proposals = objects
            .iter()
            .enumerate()
            .map(|(id, o)| synth_proposal(&mut rng, &noise, id, o, grid))
            .collect::<Result<Vec<_>>>()?;
        let queries = queries
            .into_iter()
            .map(|(t, gt)| {
                QueryRecord::new(
                    t.tokens(),
                    t.attributes(),
                    Some(t.family().to_string()),
                    Some(gt),
                )
            })
            .collect();
        scenes.push(Scene {
            image_id: format!("syn{s:06}"),
            split: if s < n_train { "train" } else { "val" }.to_string(),
            width: grid.width,
            height: grid.height,
            proposals,
            queries,
        });
    }
    Ok(scenes)
}

fn sample_objects<R: Rng>(rng: &mut R, n: usize, grid: &GridSpec) -> Vec<SynthObject> {
    let mut cells: Vec<usize> = (0..grid.columns * grid.rows).collect();
    cells.shuffle(rng);
    cells[..n]
        .iter()
        .map(|&c| SynthObject {
            category: rng.random_range(0..CATEGORIES.len()),
            color: rng.random_range(0..COLORS.len()),
            column: c % grid.columns,
            row: c / grid.columns,
        })
        .collect()
}

fn sample_query<R: Rng>(
    rng: &mut R,
    family: usize,
    objects: &[SynthObject],
) -> Option<(Template, usize)> {
    for _ in 0..TEMPLATE_RETRIES {
        let t = sample_template(rng, family);
        if let [only] = t.resolve(objects)[..] {
            return Some((t, only));
        }
    }
    None
}

fn synth_proposal<R: Rng>(
    rng: &mut R,
    noise: &Normal<f64>,
    id: usize,
    o: &SynthObject,
    grid: &GridSpec,
) -> Result<Proposal> {
    let cw = grid.width / grid.columns as f64;
    let ch = grid.height / grid.rows as f64;
    // boxes stay inside their cell, so distinct cells never overlap
    let margin_x = rng.random_range(0.05..0.2) * cw;
    let margin_y = rng.random_range(0.05..0.2) * ch;
    let x0 = o.column as f64 * cw;
    let y0 = o.row as f64 * ch;
    let bbox = BBox::new(
        (x0 + margin_x).round(),
        (y0 + margin_y).round(),
        (x0 + cw - margin_x).round(),
        (y0 + ch - margin_y).round(),
    )?;
    let mut feature = vec![0.0; grid.visual_dim()];
    feature[o.category] = 1.0;
    feature[CATEGORIES.len() + o.color] = 1.0;
    for v in feature.iter_mut() {
        *v = (*v + noise.sample(rng)) as f32 as f64;
    }
    Ok(Proposal {
        id,
        bbox,
        category: o.category as u32,
        subject_raw: feature,
    })
}

/// Recovers the symbolic objects of a synthetic scene from its proposals.
pub fn synth_objects(scene: &Scene, grid: &GridSpec) -> Vec<SynthObject> {
    let cw = grid.width / grid.columns as f64;
    let ch = grid.height / grid.rows as f64;
    scene
        .proposals
        .iter()
        .map(|p| {
            let (cx, cy) = p.bbox.center();
            let color = (0..COLORS.len())
                .max_by(|&a, &b| {
                    let fa = p.subject_raw[CATEGORIES.len() + a];
                    let fb = p.subject_raw[CATEGORIES.len() + b];
                    fa.total_cmp(&fb)
                })
                .expect("colors are non-empty");
            SynthObject {
                category: p.category as usize,
                color,
                column: (cx / cw) as usize,
                row: (cy / ch) as usize,
            }
        })
        .collect()
}
