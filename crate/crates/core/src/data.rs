//! Synthetic HOI scenes on a patch grid.
//!
//! Every scene holds one or two people and one to three objects. The patch
//! features are Gaussian blobs: channel 0 people, 1 objects, 2..5 object
//! class, 5 hands, 6 feet, 7 heads.
//!
//! Six verbs. Three depend only on box layout:
//!
//! | id | name    | rule                                                   |
//! |----|---------|--------------------------------------------------------|
//! | 0  | hold    | person and object boxes intersect                      |
//! | 1  | next_to | disjoint, edge gap below [`NEAR_GAP`]                  |
//! | 2  | watch   | center distance at least [`FAR_DISTANCE`]              |
//!
//! Three depend on the person's pose template and the object class:
//! `reach` (class 0), `raise` (class 1) and `kick` (class 2). Kicking is held
//! under a quota in the training split so that its category is rare.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, KeypointSet};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const FEATURE_CHANNELS: usize = 8;
pub const NUM_KEYPOINTS: usize = 5;
pub const NUM_OBJECT_CLASSES: usize = 3;
pub const NUM_VERBS: usize = 6;
pub const RARE_THRESHOLD: usize = 10;
pub const NEAR_GAP: f64 = 0.1;
pub const FAR_DISTANCE: f64 = 0.45;

pub const VERB_NAMES: [&str; NUM_VERBS] = ["hold", "next_to", "watch", "reach", "raise", "kick"];
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("annotation line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("annotation schema version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pose {
    Rest,
    Reach,
    Raise,
    Kick,
}

impl Pose {
    /// The verb this pose produces with objects of its class.
    pub fn verb(self) -> Option<(usize, usize)> {
        match self {
            Pose::Rest => None,
            Pose::Reach => Some((3, 0)),
            Pose::Raise => Some((4, 1)),
            Pose::Kick => Some((5, 2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub bbox: BBox,
    pub keypoints: KeypointSet,
    /// Noisy copy of `keypoints` used as pose supervision.
    pub pseudo_keypoints: KeypointSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub person: usize,
    pub object: usize,
    pub verbs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
    #[serde(with = "b64")]
    pub features: Vec<f64>,
    pub persons: Vec<Person>,
    pub objects: Vec<Object>,
    pub pairs: Vec<Pair>,
}

impl Scene {
    pub fn feature_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows * self.cols, FEATURE_CHANNELS], self.features.clone()).expect("consistent shape")
    }

    pub fn box_pairs(&self) -> Vec<(BBox, BBox)> {
        self.pairs.iter().map(|p| (self.persons[p.person].bbox, self.objects[p.object].bbox)).collect()
    }

    pub fn has_object_class(&self, class: usize) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub rows: usize,
    pub cols: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Upper bound on kick instances in the training split.
    pub rare_quota: usize,
    pub feature_noise: f64,
    pub keypoint_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { rows: 16, cols: 16, n_train: 500, n_val: 50, n_test: 150, rare_quota: 6, feature_noise: 0.02, keypoint_noise: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub rows: usize,
    pub cols: usize,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// `(verb, object class)` interaction category.
pub type Category = (usize, usize);

pub fn all_categories() -> Vec<Category> {
    let mut out = Vec::new();
    for v in 0..NUM_VERBS {
        for c in 0..NUM_OBJECT_CLASSES {
            if v < 3 || Pose::verb(pose_for_verb(v)) == Some((v, c)) {
                out.push((v, c));
            }
        }
    }
    out
}

fn pose_for_verb(v: usize) -> Pose {
    match v {
        3 => Pose::Reach,
        4 => Pose::Raise,
        5 => Pose::Kick,
        _ => Pose::Rest,
    }
}

/// Instance count of every category over `scenes`, indexed `[verb][class]`.
pub fn category_counts(scenes: &[Scene]) -> Vec<[usize; NUM_OBJECT_CLASSES]> {
    let mut counts = vec![[0; NUM_OBJECT_CLASSES]; NUM_VERBS];
    for s in scenes {
        for p in &s.pairs {
            for &v in &p.verbs {
                counts[v][s.objects[p.object].class] += 1;
            }
        }
    }
    counts
}

impl DatasetSplit {
    pub fn verb_counts(&self) -> [usize; NUM_VERBS] {
        let c = category_counts(&self.train);
        std::array::from_fn(|v| c[v].iter().sum())
    }

    /// Categories with fewer than [`RARE_THRESHOLD`] training instances.
    pub fn rare_categories(&self) -> Vec<Category> {
        let c = category_counts(&self.train);
        all_categories().into_iter().filter(|&(v, o)| c[v][o] < RARE_THRESHOLD).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), DataError> {
        let header = Header {
            schema_version: SCHEMA_VERSION,
            rows: self.rows,
            cols: self.cols,
            channels: FEATURE_CHANNELS,
            keypoints: NUM_KEYPOINTS,
            object_classes: NUM_OBJECT_CLASSES,
            verbs: NUM_VERBS,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for (split, scenes) in [(Split::Train, &self.train), (Split::Val, &self.val), (Split::Test, &self.test)] {
            for scene in scenes {
                let rec = RecordRef { split, scene };
                writeln!(w, "{}", serde_json::to_string(&rec).expect("serializable"))?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::read(BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read(r: impl BufRead) -> Result<Self, DataError> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or(DataError::Parse { line: 1, detail: "empty file".into() })?;
        let first = first?;
        let version: VersionProbe =
            serde_json::from_str(&first).map_err(|e| DataError::Parse { line: 1, detail: e.to_string() })?;
        if version.schema_version != SCHEMA_VERSION {
            return Err(DataError::Version { found: version.schema_version, expected: SCHEMA_VERSION });
        }
        let header: Header =
            serde_json::from_str(&first).map_err(|e| DataError::Parse { line: 1, detail: e.to_string() })?;
        let mut out = DatasetSplit { rows: header.rows, cols: header.cols, train: vec![], val: vec![], test: vec![] };
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |detail: String| DataError::Parse { line: i + 1, detail };
            let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            validate_scene(&rec.scene, &header).map_err(err)?;
            match rec.split {
                Split::Train => out.train.push(rec.scene),
                Split::Val => out.val.push(rec.scene),
                Split::Test => out.test.push(rec.scene),
            }
        }
        Ok(out)
    }
}

fn validate_scene(s: &Scene, h: &Header) -> Result<(), String> {
    if s.rows != h.rows || s.cols != h.cols || s.features.len() != h.rows * h.cols * h.channels {
        return Err(format!("scene {} feature grid does not match header", s.id));
    }
    for p in &s.persons {
        p.bbox.validate().map_err(|e| e.to_string())?;
        if p.keypoints.len() != h.keypoints || p.pseudo_keypoints.len() != h.keypoints {
            return Err(format!("scene {} has a person with the wrong keypoint count", s.id));
        }
    }
    for o in &s.objects {
        o.bbox.validate().map_err(|e| e.to_string())?;
        if o.class >= h.object_classes {
            return Err(format!("scene {} object class {} out of range", s.id, o.class));
        }
    }
    for p in &s.pairs {
        if p.person >= s.persons.len() || p.object >= s.objects.len() {
            return Err(format!("scene {} pair references a missing box", s.id));
        }
        if p.verbs.is_empty() || p.verbs.iter().any(|&v| v >= h.verbs) {
            return Err(format!("scene {} pair has invalid verbs", s.id));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    rows: usize,
    cols: usize,
    channels: usize,
    keypoints: usize,
    object_classes: usize,
    verbs: usize,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    split: Split,
    scene: &'a Scene,
}

#[derive(Deserialize)]
struct Record {
    split: Split,
    scene: Scene,
}

mod b64 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(serde::de::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(serde::de::Error::custom("feature bytes not a multiple of 8"));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl fmt::Display for DatasetSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grid {}x{}, train {}, val {}, test {}", self.rows, self.cols, self.train.len(), self.val.len(), self.test.len())?;
        let counts = category_counts(&self.train);
        let rare = self.rare_categories();
        for (v, o) in all_categories() {
            let tag = if rare.contains(&(v, o)) { " (rare)" } else { "" };
            writeln!(f, "  {:<8} class {o}: {:>5}{tag}", VERB_NAMES[v], counts[v][o])?;
        }
        Ok(())
    }
}

/// Keypoint layout for a pose template inside `b`; `side` is -1 or +1.
fn template(pose: Pose, b: &BBox, side: f64) -> [[f64; 2]; NUM_KEYPOINTS] {
    let [_, y0, _, y1] = b.corners();
    let (cx, cy, w, h) = (b.cx, b.cy, b.w, b.h);
    let mut k = [
        [cx, y0 + 0.12 * h],
        [cx - 0.3 * w, cy + 0.05 * h],
        [cx + 0.3 * w, cy + 0.05 * h],
        [cx - 0.15 * w, y1 - 0.06 * h],
        [cx + 0.15 * w, y1 - 0.06 * h],
    ];
    match pose {
        Pose::Rest => {}
        Pose::Raise => {
            k[1] = [cx - 0.25 * w, y0 + 0.04 * h];
            k[2] = [cx + 0.25 * w, y0 + 0.04 * h];
        }
        Pose::Reach => {
            let i = if side < 0.0 { 1 } else { 2 };
            k[i] = [cx + side * 0.47 * w, cy - 0.1 * h];
        }
        Pose::Kick => {
            let i = if side < 0.0 { 3 } else { 4 };
            k[i] = [cx + side * 0.47 * w, y1 - 0.3 * h];
        }
    }
    k
}

/// Edge-to-edge gap between two boxes, zero when they intersect.
pub fn box_gap(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let dx = (bx0 - ax1).max(ax0 - bx1).max(0.0);
    let dy = (by0 - ay1).max(ay0 - by1).max(0.0);
    dx.hypot(dy)
}

fn intersects(a: &BBox, b: &BBox) -> bool {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
}

fn spatial_verbs(p: &BBox, o: &BBox) -> Vec<usize> {
    let mut v = Vec::new();
    if intersects(p, o) {
        v.push(0);
    } else if box_gap(p, o) < NEAR_GAP {
        v.push(1);
    }
    if (p.cx - o.cx).hypot(p.cy - o.cy) >= FAR_DISTANCE {
        v.push(2);
    }
    v
}

fn sample_box(rng: &mut ChaCha8Rng, w: (f64, f64), h: (f64, f64)) -> BBox {
    let w = rng.gen_range(w.0..w.1);
    let h = rng.gen_range(h.0..h.1);
    let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
    BBox { cx, cy, w, h }
}

struct Draft {
    persons: Vec<(BBox, [[f64; 2]; NUM_KEYPOINTS], Pose)>,
    objects: Vec<Object>,
    pairs: Vec<Pair>,
}

fn draft_scene(rng: &mut ChaCha8Rng, allow_kick: bool) -> Draft {
    loop {
        let n_persons = rng.gen_range(1..=2);
        let n_objects = rng.gen_range(1..=3);
        let mut persons = Vec::new();
        for _ in 0..n_persons {
            let b = sample_box(rng, (0.2, 0.35), (0.35, 0.55));
            let mut pose = match rng.gen_range(0..4) {
                0 => Pose::Rest,
                1 => Pose::Reach,
                2 => Pose::Raise,
                _ => Pose::Kick,
            };
            if pose == Pose::Kick && !allow_kick {
                pose = Pose::Rest;
            }
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut k = template(pose, &b, side);
            for p in &mut k {
                p[0] += rng.gen_range(-0.03..0.03) * b.w;
                p[1] += rng.gen_range(-0.03..0.03) * b.h;
            }
            persons.push((b, k, pose));
        }
        let objects: Vec<Object> = (0..n_objects)
            .map(|_| Object { bbox: sample_box(rng, (0.1, 0.25), (0.1, 0.25)), class: rng.gen_range(0..NUM_OBJECT_CLASSES) })
            .collect();
        let mut pairs = Vec::new();
        for (pi, (pb, _, pose)) in persons.iter().enumerate() {
            for (oi, o) in objects.iter().enumerate() {
                let mut verbs = spatial_verbs(pb, &o.bbox);
                if let Some((v, c)) = pose.verb() {
                    if c == o.class {
                        verbs.push(v);
                    }
                }
                if !verbs.is_empty() {
                    pairs.push(Pair { person: pi, object: oi, verbs });
                }
            }
        }
        if !pairs.is_empty() {
            return Draft { persons, objects, pairs };
        }
    }
}

fn blob(x: f64, y: f64, cx: f64, cy: f64, sx: f64, sy: f64) -> f64 {
    (-0.5 * (((x - cx) / sx).powi(2) + ((y - cy) / sy).powi(2))).exp()
}

fn render(draft: &Draft, rows: usize, cols: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid deviation");
    let mut f = vec![0.0; rows * cols * FEATURE_CHANNELS];
    let kp_sigma = 0.5 / cols.min(rows) as f64;
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = ((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64);
            let cell = &mut f[(r * cols + c) * FEATURE_CHANNELS..][..FEATURE_CHANNELS];
            for (b, k, _) in &draft.persons {
                cell[0] += blob(x, y, b.cx, b.cy, b.w / 2.0, b.h / 2.0);
                for (i, p) in k.iter().enumerate() {
                    let ch = match i {
                        0 => 7,
                        1 | 2 => 5,
                        _ => 6,
                    };
                    cell[ch] += blob(x, y, p[0], p[1], kp_sigma, kp_sigma);
                }
            }
            for o in &draft.objects {
                let v = blob(x, y, o.bbox.cx, o.bbox.cy, o.bbox.w / 2.0, o.bbox.h / 2.0);
                cell[1] += v;
                cell[2 + o.class] += v;
            }
            if noise > 0.0 {
                for v in cell.iter_mut() {
                    *v += normal.sample(rng);
                }
            }
        }
    }
    f
}

fn finish(draft: Draft, id: usize, rows: usize, cols: usize, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Scene {
    let features = render(&draft, rows, cols, cfg.feature_noise, rng);
    let normal = Normal::new(0.0, cfg.keypoint_noise.max(f64::MIN_POSITIVE)).expect("valid deviation");
    let persons = draft
        .persons
        .iter()
        .map(|(b, k, _)| {
            let keypoints = KeypointSet::new(k.to_vec());
            let noisy = keypoints.points.iter().map(|p| [p[0] + normal.sample(rng), p[1] + normal.sample(rng)]).collect();
            Person { bbox: *b, keypoints, pseudo_keypoints: KeypointSet::new(noisy) }
        })
        .collect();
    Scene { id, rows, cols, features, persons, objects: draft.objects, pairs: draft.pairs }
}

fn kick_instances(d: &Draft) -> usize {
    d.pairs.iter().filter(|p| p.verbs.contains(&5)).count()
}

/// Reproducible train, validation and test scenes for `seed`.
pub fn generate(seed: u64, cfg: &GeneratorConfig) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kicks = 0;
    let mut train = Vec::with_capacity(cfg.n_train);
    for id in 0..cfg.n_train {
        let mut d = draft_scene(&mut rng, true);
        if kicks + kick_instances(&d) > cfg.rare_quota {
            d = draft_scene(&mut rng, false);
        }
        kicks += kick_instances(&d);
        train.push(finish(d, id, cfg.rows, cfg.cols, cfg, &mut rng));
    }
    let held_out = |n: usize, base: usize, rng: &mut ChaCha8Rng| -> Vec<Scene> {
        (0..n)
            .map(|i| {
                let d = draft_scene(rng, true);
                finish(d, base + i, cfg.rows, cfg.cols, cfg, rng)
            })
            .collect()
    };
    let val = held_out(cfg.n_val, cfg.n_train, &mut rng);
    let test = held_out(cfg.n_test, cfg.n_train + cfg.n_val, &mut rng);
    DatasetSplit { rows: cfg.rows, cols: cfg.cols, train, val, test }
}
