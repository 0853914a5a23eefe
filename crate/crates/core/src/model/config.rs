use std::fmt;
use std::str::FromStr;

use crate::attention::HeadGrouping;
use crate::config::{entry, parse_value, ConfigError};

/// Where shunted masks come from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaMode {
    Off,
    /// Box-coordinate queries with masks rasterized from the ground-truth boxes.
    GtBoxes,
    /// Box-coordinate queries whose masks come from their own predicted boxes.
    PredictedBoxes,
    /// No extra queries; masks from predicted boxes are applied to the learnable queries.
    LearnableQueries,
}

impl ScaMode {
    pub fn uses_sca_queries(self) -> bool {
        matches!(self, ScaMode::GtBoxes | ScaMode::PredictedBoxes)
    }
}

impl fmt::Display for ScaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaMode::Off => "off",
            ScaMode::GtBoxes => "gt",
            ScaMode::PredictedBoxes => "predicted",
            ScaMode::LearnableQueries => "learnable",
        })
    }
}

impl FromStr for ScaMode {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "off" => Ok(ScaMode::Off),
            "gt" => Ok(ScaMode::GtBoxes),
            "predicted" => Ok(ScaMode::PredictedBoxes),
            "learnable" => Ok(ScaMode::LearnableQueries),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Pose embedding passed through an FFN and added to the appearance embedding.
    Early,
    /// Separate verb classifiers on both streams; logits are added.
    Late,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Early => "early",
            Fusion::Late => "late",
        })
    }
}

impl FromStr for Fusion {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub feature_channels: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub queries: usize,
    pub sca_queries: usize,
    pub encoder_layers: usize,
    pub detection_layers: usize,
    pub interaction_layers: usize,
    pub pose_layers: usize,
    pub heads: usize,
    pub grouping: HeadGrouping,
    pub keypoints: usize,
    pub object_classes: usize,
    pub verb_classes: usize,
    pub sca: ScaMode,
    pub use_ipe: bool,
    pub fusion: Fusion,
    pub use_ipa_mask: bool,
    pub use_pose_loss: bool,
    /// Keep box-coordinate queries out of the learnable queries' self-attention.
    pub block_sca_edges: bool,
    pub use_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            grid_rows: 16,
            grid_cols: 16,
            feature_channels: 8,
            dim: 64,
            ffn_dim: 128,
            queries: 16,
            sca_queries: 8,
            encoder_layers: 2,
            detection_layers: 2,
            interaction_layers: 2,
            pose_layers: 2,
            heads: 8,
            grouping: HeadGrouping::default(),
            keypoints: 5,
            object_classes: 3,
            verb_classes: 6,
            sca: ScaMode::GtBoxes,
            use_ipe: true,
            fusion: Fusion::Early,
            use_ipa_mask: true,
            use_pose_loss: true,
            block_sca_edges: true,
            use_positions: true,
        }
    }

    /// Published sizes, kept for reference; far too large for CPU training.
    pub fn full() -> Self {
        Self {
            dim: 256,
            ffn_dim: 2048,
            queries: 64,
            sca_queries: 64,
            encoder_layers: 6,
            detection_layers: 3,
            interaction_layers: 3,
            pose_layers: 3,
            keypoints: 17,
            ..Self::desk()
        }
    }

    /// The plain one-stage detector with every addition switched off.
    pub fn baseline(mut self) -> Self {
        self.sca = ScaMode::Off;
        self.use_ipe = false;
        self
    }

    pub fn patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.grouping.total() != self.heads {
            return bad(format!("head grouping sums to {}, expected {}", self.grouping.total(), self.heads));
        }
        if self.dim % 8 != 0 {
            return bad(format!("dim {} must be a multiple of 8", self.dim));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.feature_channels == 0 {
            return bad("empty patch grid".into());
        }
        if self.queries == 0 || self.keypoints == 0 || self.object_classes == 0 || self.verb_classes == 0 {
            return bad("query, keypoint and class counts must be positive".into());
        }
        if self.detection_layers == 0 || self.interaction_layers == 0 || (self.use_ipe && self.pose_layers == 0) {
            return bad("decoders need at least one layer".into());
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            entry("grid_rows", self.grid_rows),
            entry("grid_cols", self.grid_cols),
            entry("feature_channels", self.feature_channels),
            entry("dim", self.dim),
            entry("ffn_dim", self.ffn_dim),
            entry("queries", self.queries),
            entry("sca_queries", self.sca_queries),
            entry("encoder_layers", self.encoder_layers),
            entry("detection_layers", self.detection_layers),
            entry("interaction_layers", self.interaction_layers),
            entry("pose_layers", self.pose_layers),
            entry("heads", self.heads),
            entry("human_heads", self.grouping.human),
            entry("object_heads", self.grouping.object),
            entry("global_heads", self.grouping.global),
            entry("keypoints", self.keypoints),
            entry("object_classes", self.object_classes),
            entry("verb_classes", self.verb_classes),
            entry("sca", self.sca),
            entry("ipe", self.use_ipe),
            entry("fusion", self.fusion),
            entry("ipa_mask", self.use_ipa_mask),
            entry("pose_loss", self.use_pose_loss),
            entry("block_sca_edges", self.block_sca_edges),
            entry("positions", self.use_positions),
        ]
    }

    /// Applies one key; `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        let v = value;
        match key {
            "grid_rows" => self.grid_rows = parse_value(key, v)?,
            "grid_cols" => self.grid_cols = parse_value(key, v)?,
            "feature_channels" => self.feature_channels = parse_value(key, v)?,
            "dim" => self.dim = parse_value(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, v)?,
            "queries" => self.queries = parse_value(key, v)?,
            "sca_queries" => self.sca_queries = parse_value(key, v)?,
            "encoder_layers" => self.encoder_layers = parse_value(key, v)?,
            "detection_layers" => self.detection_layers = parse_value(key, v)?,
            "interaction_layers" => self.interaction_layers = parse_value(key, v)?,
            "pose_layers" => self.pose_layers = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "human_heads" => self.grouping.human = parse_value(key, v)?,
            "object_heads" => self.grouping.object = parse_value(key, v)?,
            "global_heads" => self.grouping.global = parse_value(key, v)?,
            "keypoints" => self.keypoints = parse_value(key, v)?,
            "object_classes" => self.object_classes = parse_value(key, v)?,
            "verb_classes" => self.verb_classes = parse_value(key, v)?,
            "sca" => self.sca = parse_value(key, v)?,
            "ipe" => self.use_ipe = parse_value(key, v)?,
            "fusion" => self.fusion = parse_value(key, v)?,
            "ipa_mask" => self.use_ipa_mask = parse_value(key, v)?,
            "pose_loss" => self.use_pose_loss = parse_value(key, v)?,
            "block_sca_edges" => self.block_sca_edges = parse_value(key, v)?,
            "positions" => self.use_positions = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
