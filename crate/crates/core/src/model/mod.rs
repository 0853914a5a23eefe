//! The interaction detector: patch encoder, detection decoder, interaction
//! decoder with shunted cross-attention, pose decoder with keypoint head,
//! pose attention weights, fusion and the prediction heads.
//!
//! Query rows are laid out learnable queries first, box-coordinate queries
//! after. The box-coordinate rows, their masks and the pose attention weights
//! only exist in [`Mode::Train`].

mod config;
mod layers;

pub use config::{Fusion, ModelConfig, ScaMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{AttentionError, AttentionRecorder, MaskPair, ShuntedMaskSet};
use crate::config::ConfigError;
use crate::geometry::{rasterize_mask, BBox};
use crate::nn::{sinusoid, sinusoidal_grid, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use layers::{DecoderInputs, DecoderLayer, EncoderLayer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Ground-truth (human box, object box) pairs of the scene.
    Train(&'a [(BBox, BBox)]),
    Infer,
}

/// Two hidden layers of width `D` then a `D → K` projection, softmax over keypoints.
#[derive(Debug, Clone)]
struct PoseAttention {
    fc1: Linear,
    fc2: Linear,
    proj: Linear,
}

impl PoseAttention {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, p, h)?;
        let logits = self.proj.forward(tape, p, h)?;
        Ok(tape.softmax(logits, 1)?)
    }
}

#[derive(Debug, Clone)]
struct PoseBranch {
    decoder: Vec<DecoderLayer>,
    keypoints: Mlp,
    ipa: Option<PoseAttention>,
    fuse: Option<Mlp>,
    verb: Option<Linear>,
}

pub struct DirModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    positions: Tensor,
    embed: Linear,
    encoder: Vec<EncoderLayer>,
    queries: ParamId,
    sca_proj: Option<Linear>,
    detection: Vec<DecoderLayer>,
    interaction: Vec<DecoderLayer>,
    human_box: Mlp,
    object_box: Mlp,
    class_head: Linear,
    verb_head: Linear,
    pose: Option<PoseBranch>,
}

/// Handles into the tape for one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub n_learnable: usize,
    pub n_sca: usize,
    pub memory: Var,
    /// Detection embeddings, shared by both downstream decoders.
    pub q_int: Var,
    pub c_a: Var,
    pub c_p: Option<Var>,
    pub c_int: Var,
    /// `[N × 4]` sigmoid boxes `(cx, cy, w, h)`.
    pub human_boxes: Var,
    pub object_boxes: Var,
    /// `[N × (C + 1)]`; the last column is background.
    pub class_logits: Var,
    pub verb_logits: Var,
    /// `[N × 2K]`, keypoint `k` at columns `2k, 2k + 1`.
    pub keypoints: Option<Var>,
    /// `[N × K]` pose attention weights.
    pub pose_weights: Option<Var>,
    pub masks: Option<ShuntedMaskSet>,
}

impl ModelOutput {
    pub fn rows(&self) -> usize {
        self.n_learnable + self.n_sca
    }
}

impl DirModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, f) = (c.dim, c.ffn_dim);
        let embed = Linear::new(&mut store, "embed", c.feature_channels, d, &mut rng);
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc{i}"), d, f, &mut rng))
            .collect();
        let queries = store.add("queries", xavier_queries(&mut rng, c.queries, d));
        let sca_proj = c.sca.uses_sca_queries().then(|| Linear::new(&mut store, "sca_proj", d, d, &mut rng));
        let detection = (0..c.detection_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("det{i}"), d, f, &mut rng))
            .collect();
        let interaction = (0..c.interaction_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("int{i}"), d, f, &mut rng))
            .collect();
        let human_box = Mlp::new(&mut store, "human_box", &[d, d, 4], &mut rng);
        let object_box = Mlp::new(&mut store, "object_box", &[d, d, 4], &mut rng);
        let class_head = Linear::new(&mut store, "class", d, c.object_classes + 1, &mut rng);
        let verb_head = Linear::new(&mut store, "verb", d, c.verb_classes, &mut rng);
        let pose = c.use_ipe.then(|| {
            let decoder = (0..c.pose_layers)
                .map(|i| DecoderLayer::new(&mut store, &format!("pose{i}"), d, f, &mut rng))
                .collect();
            let keypoints = Mlp::new(&mut store, "keypoints", &[d, d, 2 * c.keypoints], &mut rng);
            let ipa = (c.use_pose_loss && c.use_ipa_mask).then(|| PoseAttention {
                fc1: Linear::new(&mut store, "ipa.fc1", d, d, &mut rng),
                fc2: Linear::new(&mut store, "ipa.fc2", d, d, &mut rng),
                proj: Linear::new(&mut store, "ipa.proj", d, c.keypoints, &mut rng),
            });
            let (fuse, verb) = match c.fusion {
                Fusion::Early => (Some(Mlp::new(&mut store, "fuse", &[d, d, d], &mut rng)), None),
                Fusion::Late => (None, Some(Linear::new(&mut store, "verb_pose", d, c.verb_classes, &mut rng))),
            };
            PoseBranch { decoder, keypoints, ipa, fuse, verb }
        });
        let positions = sinusoidal_grid(c.grid_rows, c.grid_cols, d);
        Ok(Self {
            config,
            store,
            positions,
            embed,
            encoder,
            queries,
            sca_proj,
            detection,
            interaction,
            human_box,
            object_box,
            class_head,
            verb_head,
            pose,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameter count derived from the configuration alone.
    pub fn expected_num_params(c: &ModelConfig) -> usize {
        let (d, f) = (c.dim, c.ffn_dim);
        let mut n = Linear::num_params(c.feature_channels, d)
            + c.encoder_layers * EncoderLayer::num_params(d, f)
            + c.queries * d
            + (c.detection_layers + c.interaction_layers) * DecoderLayer::num_params(d, f)
            + 2 * Mlp::num_params(&[d, d, 4])
            + Linear::num_params(d, c.object_classes + 1)
            + Linear::num_params(d, c.verb_classes);
        if c.sca.uses_sca_queries() {
            n += Linear::num_params(d, d);
        }
        if c.use_ipe {
            n += c.pose_layers * DecoderLayer::num_params(d, f) + Mlp::num_params(&[d, d, 2 * c.keypoints]);
            if c.use_pose_loss && c.use_ipa_mask {
                n += 2 * Linear::num_params(d, d) + Linear::num_params(d, c.keypoints);
            }
            n += match c.fusion {
                Fusion::Early => Mlp::num_params(&[d, d, d]),
                Fusion::Late => Linear::num_params(d, c.verb_classes),
            };
        }
        n
    }

    /// Sinusoidal codes of the eight box coordinates, `[n × D]`, before projection.
    pub fn box_query_codes(&self, pairs: &[(BBox, BBox)]) -> Tensor {
        let d = self.config.dim;
        let mut data = Vec::with_capacity(pairs.len() * d);
        for (h, o) in pairs {
            for v in h.to_array().into_iter().chain(o.to_array()) {
                data.extend(sinusoid(v, d / 8));
            }
        }
        Tensor::new(vec![pairs.len(), d], data).expect("consistent shape")
    }

    /// Box-coordinate queries and their mask pairs for up to `sca_queries` pairs.
    pub fn build_sca_queries(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pairs: &[(BBox, BBox)],
    ) -> Result<Option<(Var, Vec<MaskPair>)>> {
        let Some(proj) = &self.sca_proj else { return Ok(None) };
        let pairs = &pairs[..pairs.len().min(self.config.sca_queries)];
        if pairs.is_empty() {
            return Ok(None);
        }
        let codes = tape.constant(self.box_query_codes(pairs));
        let q = proj.forward(tape, p, codes)?;
        let (r, c) = (self.config.grid_rows, self.config.grid_cols);
        let masks = pairs
            .iter()
            .map(|(h, o)| MaskPair { human: rasterize_mask(h, r, c), object: rasterize_mask(o, r, c) })
            .collect();
        Ok(Some((q, masks)))
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, features: &Tensor) -> Result<Var> {
        let c = &self.config;
        if features.shape() != [c.patches(), c.feature_channels] {
            return Err(ModelError::Input(format!(
                "features have shape {:?}, expected [{}, {}]",
                features.shape(),
                c.patches(),
                c.feature_channels
            )));
        }
        let x = tape.constant(features.clone());
        let pos = c.use_positions.then(|| tape.constant(self.positions.clone()));
        let mut e = self.embed.forward(tape, p, x)?;
        for layer in &self.encoder {
            e = layer.forward(tape, p, e, pos, c.heads)?;
        }
        Ok(e)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: &Tensor,
        mode: Mode,
        mut recorder: Option<&mut AttentionRecorder>,
    ) -> Result<ModelOutput> {
        let c = &self.config;
        let memory = self.encode(tape, p, features)?;
        let key_pos = c.use_positions.then(|| tape.constant(self.positions.clone()));
        let learnable = p.var(self.queries);
        let n_l = c.queries;

        let training = matches!(mode, Mode::Train(_));
        let sca = match mode {
            Mode::Train(pairs) => self.build_sca_queries(tape, p, pairs)?,
            Mode::Infer => None,
        };
        let (queries, sca_masks) = match sca {
            Some((q, masks)) => (tape.concat(&[learnable, q], 0)?, masks),
            None => (learnable, Vec::new()),
        };
        let n_s = sca_masks.len();
        let n = n_l + n_s;
        let allowed = (n_s > 0 && c.block_sca_edges).then(|| {
            (0..n).flat_map(|i| (0..n).map(move |j| i >= n_l || j < n_l)).collect::<Vec<bool>>()
        });
        let zeros = tape.constant(Tensor::zeros(&[n, c.dim]));

        let plain = DecoderInputs {
            queries,
            memory,
            key_pos,
            allowed: allowed.as_deref(),
            shunt: None,
            heads: c.heads,
        };
        let q_int = self.run_decoder(tape, p, &self.detection, zeros, &plain, "detection", &mut recorder)?;

        let hb = self.human_box.forward(tape, p, q_int)?;
        let human_boxes = tape.sigmoid(hb);
        let ob = self.object_box.forward(tape, p, q_int)?;
        let object_boxes = tape.sigmoid(ob);
        let class_logits = self.class_head.forward(tape, p, q_int)?;

        let masks = match c.sca {
            ScaMode::GtBoxes if n_s > 0 => {
                let mut set = ShuntedMaskSet::new(n);
                for (i, pair) in sca_masks.into_iter().enumerate() {
                    set.set(n_l + i, pair);
                }
                Some(set)
            }
            ScaMode::PredictedBoxes if n_s > 0 => Some(self.predicted_masks(tape, human_boxes, object_boxes, n, n_l..n)),
            ScaMode::LearnableQueries if training => {
                Some(self.predicted_masks(tape, human_boxes, object_boxes, n, 0..n_l))
            }
            _ => None,
        };
        let shunted = DecoderInputs { queries: q_int, shunt: masks.as_ref().map(|m| (m, &c.grouping)), ..plain };
        let c_a = self.run_decoder(tape, p, &self.interaction, zeros, &shunted, "interaction", &mut recorder)?;

        let mut c_p = None;
        let mut keypoints = None;
        let mut pose_weights = None;
        let mut c_int = c_a;
        let mut verb_logits = self.verb_head.forward(tape, p, c_a)?;
        if let Some(pose) = &self.pose {
            let inputs = DecoderInputs { queries: q_int, ..plain };
            let cp = self.run_decoder(tape, p, &pose.decoder, zeros, &inputs, "pose", &mut recorder)?;
            let k = pose.keypoints.forward(tape, p, cp)?;
            keypoints = Some(tape.sigmoid(k));
            if let (true, Some(ipa)) = (training, &pose.ipa) {
                pose_weights = Some(ipa.forward(tape, p, q_int)?);
            }
            if let Some(fuse) = &pose.fuse {
                let f = fuse.forward(tape, p, cp)?;
                c_int = tape.add(c_a, f)?;
                verb_logits = self.verb_head.forward(tape, p, c_int)?;
            }
            if let Some(verb) = &pose.verb {
                let extra = verb.forward(tape, p, cp)?;
                verb_logits = tape.add(verb_logits, extra)?;
            }
            c_p = Some(cp);
        }

        Ok(ModelOutput {
            n_learnable: n_l,
            n_sca: n_s,
            memory,
            q_int,
            c_a,
            c_p,
            c_int,
            human_boxes,
            object_boxes,
            class_logits,
            verb_logits,
            keypoints,
            pose_weights,
            masks,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_decoder(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layers: &[DecoderLayer],
        init: Var,
        inputs: &DecoderInputs,
        name: &str,
        recorder: &mut Option<&mut AttentionRecorder>,
    ) -> Result<Var> {
        let mut x = init;
        for (i, layer) in layers.iter().enumerate() {
            let (next, maps) = layer.forward(tape, p, x, inputs)?;
            if let Some(rec) = recorder.as_deref_mut() {
                for (h, m) in maps.iter().enumerate() {
                    rec.record(name, i, h, tape.value(*m));
                }
            }
            x = next;
        }
        Ok(x)
    }

    fn predicted_masks(
        &self,
        tape: &Tape,
        human: Var,
        object: Var,
        n: usize,
        rows: std::ops::Range<usize>,
    ) -> ShuntedMaskSet {
        let (gr, gc) = (self.config.grid_rows, self.config.grid_cols);
        let (hv, ov) = (tape.value(human), tape.value(object));
        let mut set = ShuntedMaskSet::new(n);
        for r in rows {
            let h = BBox::from_slice(hv.row(r)).clamped();
            let o = BBox::from_slice(ov.row(r)).clamped();
            set.set(r, MaskPair { human: rasterize_mask(&h, gr, gc), object: rasterize_mask(&o, gr, gc) });
        }
        set
    }
}

fn xavier_queries(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    use rand::Rng;
    let a = (6.0 / (n + d) as f64).sqrt();
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-a..a)).collect()).expect("consistent shape")
}

#[cfg(test)]
mod tests;
