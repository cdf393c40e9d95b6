//! Structural addresses of transformer weight matrices and the naming tables
//! that map them onto checkpoint tensor names.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "sa")]
    SelfAttention,
    #[serde(rename = "ca")]
    CrossAttention,
    #[serde(rename = "ffn")]
    FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixRole {
    Wq,
    Wk,
    Wv,
    Wo,
    Wf1,
    Wf2,
}

impl MatrixRole {
    pub const ATTENTION: [MatrixRole; 4] = [MatrixRole::Wq, MatrixRole::Wk, MatrixRole::Wv, MatrixRole::Wo];
    pub const FEED_FORWARD: [MatrixRole; 2] = [MatrixRole::Wf1, MatrixRole::Wf2];

    pub fn is_attention(self) -> bool {
        !matches!(self, MatrixRole::Wf1 | MatrixRole::Wf2)
    }
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [
        LayerKind::SelfAttention,
        LayerKind::CrossAttention,
        LayerKind::FeedForward,
    ];

    pub fn matrices(self) -> &'static [MatrixRole] {
        match self {
            LayerKind::FeedForward => &MatrixRole::FEED_FORWARD,
            _ => &MatrixRole::ATTENTION,
        }
    }

    pub fn accepts(self, m: MatrixRole) -> bool {
        (self == LayerKind::FeedForward) != m.is_attention()
    }
}

/// Which blocks of a UNet carry transformers and how many.
///
/// Levels count from the full-resolution level 0. The deepest level's down
/// and up blocks are ResNet-only; up blocks are indexed by the level they
/// share with their skip-connected down block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetTopology {
    pub num_levels: usize,
    pub transformers_per_down_block: usize,
    pub transformers_per_up_block: usize,
    pub transformers_per_mid_block: usize,
}

impl UnetTopology {
    /// Stable Diffusion 2.x UNet: four levels, the first three with attention.
    pub const SD2: UnetTopology = UnetTopology {
        num_levels: 4,
        transformers_per_down_block: 2,
        transformers_per_up_block: 3,
        transformers_per_mid_block: 1,
    };

    pub fn has_attention(&self, block: BlockKind, level: usize) -> bool {
        match block {
            BlockKind::Mid => level == 0,
            BlockKind::Down | BlockKind::Up => level + 1 < self.num_levels,
        }
    }

    pub fn transformers_in(&self, block: BlockKind, level: usize) -> usize {
        if !self.has_attention(block, level) {
            return 0;
        }
        match block {
            BlockKind::Down => self.transformers_per_down_block,
            BlockKind::Mid => self.transformers_per_mid_block,
            BlockKind::Up => self.transformers_per_up_block,
        }
    }

    pub fn contains(&self, s: &TensorSelector) -> bool {
        s.layer.accepts(s.matrix) && s.transformer < self.transformers_in(s.block, s.level)
    }

    /// Every valid selector, ordered down blocks, mid, up blocks.
    pub fn selectors(&self) -> Vec<TensorSelector> {
        let mut blocks: Vec<(BlockKind, usize)> = (0..self.num_levels).map(|l| (BlockKind::Down, l)).collect();
        blocks.push((BlockKind::Mid, 0));
        blocks.extend((0..self.num_levels).map(|l| (BlockKind::Up, l)));
        let mut out = Vec::new();
        for (block, level) in blocks {
            for transformer in 0..self.transformers_in(block, level) {
                for layer in LayerKind::ALL {
                    for &matrix in layer.matrices() {
                        out.push(TensorSelector {
                            block,
                            level,
                            transformer,
                            layer,
                            matrix,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Address of one weight matrix. The canonical text form is
/// `down.0.t0.sa.wv`, `mid.t0.ffn.w1`, `up.1.t2.ca.wo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorSelector {
    pub block: BlockKind,
    pub level: usize,
    pub transformer: usize,
    pub layer: LayerKind,
    pub matrix: MatrixRole,
}

impl TensorSelector {
    pub fn new(
        block: BlockKind,
        level: usize,
        transformer: usize,
        layer: LayerKind,
        matrix: MatrixRole,
    ) -> Self {
        TensorSelector {
            block,
            level,
            transformer,
            layer,
            matrix,
        }
    }

    /// `down.0`, `mid`, `up.2`.
    pub fn block_id(&self) -> String {
        match self.block {
            BlockKind::Down => format!("down.{}", self.level),
            BlockKind::Mid => "mid".to_string(),
            BlockKind::Up => format!("up.{}", self.level),
        }
    }
}

impl fmt::Display for TensorSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&NamingScheme::canonical().format(self, 0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid selector `{input}`: {reason}")]
pub struct SelectorParseError {
    pub input: String,
    pub reason: String,
}

impl FromStr for TensorSelector {
    type Err = SelectorParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fail = |reason: &str| SelectorParseError {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = s.split('.').collect();
        let (block, level, rest) = match parts.as_slice() {
            ["mid", rest @ ..] => (BlockKind::Mid, 0, rest),
            [b @ ("down" | "up"), level, rest @ ..] => {
                let level = level.parse().map_err(|_| fail("level must be an integer"))?;
                let block = if *b == "down" { BlockKind::Down } else { BlockKind::Up };
                (block, level, rest)
            }
            _ => return Err(fail("expected `down.<level>`, `mid` or `up.<level>` prefix")),
        };
        let [t, layer, matrix] = rest else {
            return Err(fail("expected `.t<index>.<layer>.<matrix>` after the block"));
        };
        let transformer = t
            .strip_prefix('t')
            .and_then(|i| i.parse().ok())
            .ok_or_else(|| fail("transformer must look like `t0`"))?;
        let layer = match *layer {
            "sa" => LayerKind::SelfAttention,
            "ca" => LayerKind::CrossAttention,
            "ffn" => LayerKind::FeedForward,
            _ => return Err(fail("layer must be sa, ca or ffn")),
        };
        let matrix = match *matrix {
            "wq" => MatrixRole::Wq,
            "wk" => MatrixRole::Wk,
            "wv" => MatrixRole::Wv,
            "wo" => MatrixRole::Wo,
            "w1" => MatrixRole::Wf1,
            "w2" => MatrixRole::Wf2,
            _ => return Err(fail("matrix must be wq, wk, wv, wo, w1 or w2")),
        };
        if !layer.accepts(matrix) {
            return Err(fail("w1/w2 belong to ffn, wq/wk/wv/wo to sa/ca"));
        }
        Ok(TensorSelector::new(block, level, transformer, layer, matrix))
    }
}

impl Serialize for TensorSelector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TensorSelector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerNames {
    pub sa: String,
    pub ca: String,
    pub ffn: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixNames {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub wf1: String,
    pub wf2: String,
}

/// Data-driven tensor naming table.
///
/// Templates substitute `{level}`, `{rlevel}` (level counted from the
/// deepest block, as in diffusers' `up_blocks`), `{t}`, `{layer}` and
/// `{matrix}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamingScheme {
    pub name: String,
    pub down: String,
    pub mid: String,
    pub up: String,
    pub layers: LayerNames,
    pub matrices: MatrixNames,
}

impl NamingScheme {
    /// Names used by the toy model's checkpoints.
    pub fn canonical() -> Self {
        NamingScheme {
            name: "canonical".into(),
            down: "down.{level}.t{t}.{layer}.{matrix}".into(),
            mid: "mid.t{t}.{layer}.{matrix}".into(),
            up: "up.{level}.t{t}.{layer}.{matrix}".into(),
            layers: LayerNames {
                sa: "sa".into(),
                ca: "ca".into(),
                ffn: "ffn".into(),
            },
            matrices: MatrixNames {
                wq: "wq".into(),
                wk: "wk".into(),
                wv: "wv".into(),
                wo: "wo".into(),
                wf1: "w1".into(),
                wf2: "w2".into(),
            },
        }
    }

    /// diffusers-format Stable Diffusion 2.x UNet (`unet/diffusion_pytorch_model.safetensors`).
    pub fn sd2_diffusers() -> Self {
        let tb = ".transformer_blocks.0.{layer}.{matrix}.weight";
        NamingScheme {
            name: "sd2-diffusers".into(),
            down: format!("down_blocks.{{level}}.attentions.{{t}}{tb}"),
            mid: format!("mid_block.attentions.{{t}}{tb}"),
            up: format!("up_blocks.{{rlevel}}.attentions.{{t}}{tb}"),
            layers: LayerNames {
                sa: "attn1".into(),
                ca: "attn2".into(),
                ffn: "ff".into(),
            },
            matrices: MatrixNames {
                wq: "to_q".into(),
                wk: "to_k".into(),
                wv: "to_v".into(),
                wo: "to_out.0".into(),
                wf1: "net.0.proj".into(),
                wf2: "net.2".into(),
            },
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "canonical" | "toy" => Some(Self::canonical()),
            "sd2-diffusers" | "sd2" => Some(Self::sd2_diffusers()),
            _ => None,
        }
    }

    fn format(&self, s: &TensorSelector, num_levels: usize) -> String {
        let template = match s.block {
            BlockKind::Down => &self.down,
            BlockKind::Mid => &self.mid,
            BlockKind::Up => &self.up,
        };
        let layer = match s.layer {
            LayerKind::SelfAttention => &self.layers.sa,
            LayerKind::CrossAttention => &self.layers.ca,
            LayerKind::FeedForward => &self.layers.ffn,
        };
        let matrix = match s.matrix {
            MatrixRole::Wq => &self.matrices.wq,
            MatrixRole::Wk => &self.matrices.wk,
            MatrixRole::Wv => &self.matrices.wv,
            MatrixRole::Wo => &self.matrices.wo,
            MatrixRole::Wf1 => &self.matrices.wf1,
            MatrixRole::Wf2 => &self.matrices.wf2,
        };
        let rlevel = num_levels.saturating_sub(1).saturating_sub(s.level);
        template
            .replace("{level}", &s.level.to_string())
            .replace("{rlevel}", &rlevel.to_string())
            .replace("{t}", &s.transformer.to_string())
            .replace("{layer}", layer)
            .replace("{matrix}", matrix)
    }

    pub fn resolve(
        &self,
        s: &TensorSelector,
        topology: &UnetTopology,
    ) -> Result<String, CheckpointError> {
        resolve_selector(s, self, topology)
    }
}

/// Tensor name for `s`, or `UnknownTarget` when the topology has no such
/// matrix (e.g. attention in a ResNet-only block).
pub fn resolve_selector(
    s: &TensorSelector,
    scheme: &NamingScheme,
    topology: &UnetTopology,
) -> Result<String, CheckpointError> {
    if !s.layer.accepts(s.matrix) {
        return Err(CheckpointError::UnknownTarget(format!(
            "{s:?}: matrix {:?} does not belong to layer {:?}",
            s.matrix, s.layer
        )));
    }
    if s.block == BlockKind::Mid && s.level != 0 {
        return Err(CheckpointError::UnknownTarget(format!(
            "mid block has no level {}",
            s.level
        )));
    }
    if s.block != BlockKind::Mid && s.level >= topology.num_levels {
        return Err(CheckpointError::UnknownTarget(format!(
            "{} level {} is outside a {}-level UNet",
            s.block_id(),
            s.level,
            topology.num_levels
        )));
    }
    if !topology.has_attention(s.block, s.level) {
        return Err(CheckpointError::UnknownTarget(format!(
            "{} is a ResNet-only block without transformers",
            s.block_id()
        )));
    }
    let available = topology.transformers_in(s.block, s.level);
    if s.transformer >= available {
        return Err(CheckpointError::UnknownTarget(format!(
            "{} has {available} transformers, index {} requested",
            s.block_id(),
            s.transformer
        )));
    }
    Ok(scheme.format(s, topology.num_levels))
}
