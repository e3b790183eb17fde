//! Declarative detector graphs: backbone, fusion neck and detection heads.
//!
//! The graph is the single source of truth for parameter and FLOP counts and
//! for forward shapes. It lowers into an [`nn::Program`](crate::nn::Program)
//! for execution.

mod builder;
mod fusion;
mod lower;
pub mod neck;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use builder::GraphBuilder;
pub use fusion::{fuse_features, FeatureMap};
pub use lower::{CompiledModel, PredictionGrid};
pub use neck::{Neck, NeckRegistry};

use crate::error::{config_err, Result};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    P2,
    P3,
    P4,
    P5,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::P2, Level::P3, Level::P4, Level::P5];

    pub fn stride(self) -> usize {
        match self {
            Level::P2 => 4,
            Level::P3 => 8,
            Level::P4 => 16,
            Level::P5 => 32,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Level> {
        Level::ALL.get(i).copied()
    }

    /// Levels from `self` up to and including P5.
    pub fn up_to_top(self) -> Vec<Level> {
        Level::ALL[self.index()..].to_vec()
    }

    pub fn below(self) -> Option<Level> {
        self.index().checked_sub(1).and_then(Level::from_index)
    }

    pub fn above(self) -> Option<Level> {
        Level::from_index(self.index() + 1)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index() + 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_size: usize,
    pub width_multiple: f64,
    pub depth_multiple: f64,
    /// Name of a registered neck (`pan`, `bifpn`).
    pub neck_kind: String,
    pub head_levels: Vec<Level>,
    pub fusion_epsilon: f64,
    pub anchors_per_level: usize,
    /// Replicate the grayscale input to three channels ahead of the stem.
    pub rgb_stem: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::modified(4)
    }
}

impl ModelConfig {
    /// Stock small variant: PAN neck, heads at P3–P5.
    pub fn baseline(num_classes: usize) -> Self {
        Self {
            num_classes,
            input_size: 640,
            width_multiple: 0.50,
            depth_multiple: 0.33,
            neck_kind: "pan".into(),
            head_levels: vec![Level::P3, Level::P4, Level::P5],
            fusion_epsilon: 1e-4,
            anchors_per_level: 3,
            rgb_stem: false,
        }
    }

    /// Weighted bi-directional neck with the extra stride-4 head.
    pub fn modified(num_classes: usize) -> Self {
        Self {
            neck_kind: "bifpn".into(),
            head_levels: Level::ALL.to_vec(),
            ..Self::baseline(num_classes)
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.rgb_stem {
            3
        } else {
            1
        }
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn lowest_level(&self) -> Level {
        self.head_levels[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(config_err("num_classes must be at least 1"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(config_err(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.head_levels.is_empty() {
            return Err(config_err("head_levels must not be empty"));
        }
        if self.head_levels.windows(2).any(|w| w[1].index() != w[0].index() + 1) {
            return Err(config_err(format!(
                "head_levels {:?} must be sorted and contiguous",
                self.head_levels
            )));
        }
        for (name, v) in [("width_multiple", self.width_multiple), ("depth_multiple", self.depth_multiple)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config_err(format!("{name} {v} must lie in (0, 1]")));
            }
        }
        if !(self.fusion_epsilon > 0.0) {
            return Err(config_err("fusion_epsilon must be positive"));
        }
        if self.anchors_per_level == 0 {
            return Err(config_err("anchors_per_level must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    ConvBnAct,
    CspBlock,
    Sppf,
    Upsample,
    Downsample,
    Concat,
    Fusion,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Total input channels (per-input width for fusion nodes).
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Bottleneck repeats inside a CSP block.
    pub repeats: usize,
    pub shortcut: bool,
    /// Conv bias ahead of normalization.
    pub bias: bool,
    pub fusion_arity: usize,
    /// Cumulative stride of this node's output relative to the input image.
    pub feature_stride: usize,
    pub level: Option<Level>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub version: u32,
    pub config: ModelConfig,
    pub nodes: Vec<LayerSpec>,
    pub edges: Vec<(usize, usize)>,
    pub strides: BTreeMap<Level, usize>,
    /// Head node per level, ordered from finest to coarsest.
    pub heads: Vec<(Level, usize)>,
}

/// Builds and validates the detector graph for `config` using the built-in
/// neck registry.
pub fn build_graph(config: &ModelConfig) -> Result<ModelGraph> {
    build_graph_with(config, &NeckRegistry::with_builtins())
}

pub fn build_graph_with(config: &ModelConfig, necks: &NeckRegistry) -> Result<ModelGraph> {
    config.validate()?;
    let neck = necks.get(&config.neck_kind).ok_or_else(|| {
        config_err(format!(
            "unknown neck_kind {:?}; registered: {}",
            config.neck_kind,
            necks.names().join(", ")
        ))
    })?;
    let mut b = GraphBuilder::new(config.width_multiple, config.depth_multiple);
    let input = b.input(config.input_channels());
    let taps = b.yolo_backbone(input);
    let levels = config.lowest_level().up_to_top();
    let outs = neck.build(&mut b, &taps, &levels)?;
    let no = config.anchors_per_level * config.outputs_per_anchor();
    let mut heads = Vec::new();
    for &level in &config.head_levels {
        let src = *outs
            .get(&level)
            .ok_or_else(|| config_err(format!("neck {} produced no {level} output", neck.name())))?;
        heads.push((level, b.head(&format!("head.{}", level.to_string().to_lowercase()), src, level, no)));
    }
    b.finish(config.clone(), heads)
}

impl ModelGraph {
    pub fn node(&self, id: usize) -> &LayerSpec {
        &self.nodes[id]
    }

    /// Byte-stable JSON document (struct order, sorted maps).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<ModelGraph> {
        let g: ModelGraph = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    /// Hex SHA-256 of the serialized graph; identifies compatible checkpoints.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(config_err(format!("node {i} carries id {}", n.id)));
            }
            if n.inputs.iter().any(|&p| p >= i) {
                return Err(config_err(format!("node {} ({}) consumes a later node", i, n.name)));
            }
            if n.kind != LayerKind::Input && (n.channels_out == 0 || n.channels_in == 0) {
                return Err(config_err(format!("node {} has a zero channel count", n.name)));
            }
            if n.kind == LayerKind::Fusion {
                if n.fusion_arity < 2 || n.fusion_arity != n.inputs.len() {
                    return Err(config_err(format!("fusion {} needs arity >= 2", n.name)));
                }
                for &p in &n.inputs {
                    let src = &self.nodes[p];
                    if src.feature_stride != n.feature_stride || src.channels_out != n.channels_in {
                        return Err(config_err(format!(
                            "fusion {} input {} has stride {} / {} channels, expected {} / {}",
                            n.name, src.name, src.feature_stride, src.channels_out, n.feature_stride, n.channels_in
                        )));
                    }
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(level, id) in &self.heads {
            if !seen.insert(level) {
                return Err(config_err(format!("two heads at level {level}")));
            }
            let n = &self.nodes[id];
            if n.kind != LayerKind::Head || n.feature_stride != level.stride() {
                return Err(config_err(format!("head for {level} is malformed")));
            }
        }
        Ok(())
    }

    /// Spatial grid side of each head level at `input_size`.
    pub fn grid_sizes(&self, input_size: usize) -> Vec<(Level, usize)> {
        self.heads.iter().map(|&(l, _)| (l, input_size / l.stride())).collect()
    }

    /// Output shape `(channels, height, width)` of every node at `input_size`.
    pub fn shapes(&self, input_size: usize) -> Vec<(usize, usize, usize)> {
        self.nodes
            .iter()
            .map(|n| (n.channels_out, input_size / n.feature_stride, input_size / n.feature_stride))
            .collect()
    }

    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        self.nodes.iter().map(|n| (n.name.clone(), layer_params(n, &self.config))).collect()
    }

    pub fn compile(&self) -> Result<CompiledModel> {
        CompiledModel::new(self.clone())
    }
}

fn conv_params(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cin * cout * k * k + if bias { cout } else { 0 } + 2 * cout
}

fn conv_macs(cin: usize, cout: usize, k: usize, out_hw: usize) -> u64 {
    (cin * cout * k * k) as u64 * out_hw as u64
}

fn layer_params(n: &LayerSpec, cfg: &ModelConfig) -> usize {
    match n.kind {
        LayerKind::Input | LayerKind::Upsample | LayerKind::Concat => 0,
        LayerKind::ConvBnAct | LayerKind::Downsample => conv_params(n.channels_in, n.channels_out, n.kernel, n.bias),
        LayerKind::CspBlock => {
            let h = n.channels_out / 2;
            2 * conv_params(n.channels_in, h, 1, false)
                + n.repeats * (conv_params(h, h, 1, false) + conv_params(h, h, 3, false))
                + conv_params(2 * h, n.channels_out, 1, false)
        }
        LayerKind::Sppf => {
            let h = n.channels_in / 2;
            conv_params(n.channels_in, h, 1, false) + conv_params(4 * h, n.channels_out, 1, false)
        }
        LayerKind::Fusion => n.fusion_arity,
        LayerKind::Head => {
            let _ = cfg;
            n.channels_in * n.channels_out + n.channels_out
        }
    }
}

/// Exact learnable-scalar count: conv weights, biases, normalization affine
/// terms and fusion weights.
pub fn count_parameters(graph: &ModelGraph) -> usize {
    graph.nodes.iter().map(|n| layer_params(n, &graph.config)).sum()
}

/// FLOPs of one forward pass at `input_size`, counted as two per
/// multiply-accumulate of every convolution plus the fusion arithmetic.
pub fn count_flops(graph: &ModelGraph, input_size: usize) -> Result<u64> {
    let top = graph.nodes.iter().map(|n| n.feature_stride).max().unwrap_or(1);
    if input_size == 0 || input_size % top != 0 {
        return Err(config_err(format!(
            "input size {input_size} is not a multiple of the coarsest stride {top}"
        )));
    }
    let mut macs: u64 = 0;
    for n in &graph.nodes {
        let side = input_size / n.feature_stride;
        let hw = side * side;
        macs += match n.kind {
            LayerKind::Input | LayerKind::Upsample | LayerKind::Concat => 0,
            LayerKind::ConvBnAct | LayerKind::Downsample | LayerKind::Head => {
                conv_macs(n.channels_in, n.channels_out, n.kernel, hw)
            }
            LayerKind::CspBlock => {
                let h = n.channels_out / 2;
                2 * conv_macs(n.channels_in, h, 1, hw)
                    + n.repeats as u64 * (conv_macs(h, h, 1, hw) + conv_macs(h, h, 3, hw))
                    + conv_macs(2 * h, n.channels_out, 1, hw)
            }
            LayerKind::Sppf => {
                let h = n.channels_in / 2;
                conv_macs(n.channels_in, h, 1, hw) + conv_macs(4 * h, n.channels_out, 1, hw)
            }
            LayerKind::Fusion => (n.fusion_arity * n.channels_out * hw) as u64,
        };
    }
    Ok(2 * macs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_heads_sit_at_strides_8_16_32() {
        let g = build_graph(&ModelConfig::baseline(4)).unwrap();
        let strides: Vec<usize> = g.heads.iter().map(|&(l, _)| g.strides[&l]).collect();
        assert_eq!(strides, [8, 16, 32]);
        assert!(!g.nodes.iter().any(|n| n.kind == LayerKind::Fusion));
    }

    #[test]
    fn modified_adds_stride_4_head() {
        let g = build_graph(&ModelConfig::modified(4)).unwrap();
        assert_eq!(g.heads[0].0, Level::P2);
        assert_eq!(g.strides[&Level::P2], 4);
        assert_eq!(g.heads.len(), 4);
    }

    #[test]
    fn builds_are_byte_identical() {
        let cfg = ModelConfig::modified(4);
        assert_eq!(build_graph(&cfg).unwrap().to_json(), build_graph(&cfg).unwrap().to_json());
    }

    #[test]
    fn json_round_trips() {
        let g = build_graph(&ModelConfig::modified(2)).unwrap();
        assert_eq!(ModelGraph::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn rgb_stem_matches_reference_count_with_norms_folded() {
        // Folding each normalization into its conv leaves one bias per output channel.
        let cfg = ModelConfig { rgb_stem: true, ..ModelConfig::baseline(4) };
        let g = build_graph(&cfg).unwrap();
        let (convs, hw) = (conv_channel_total(&g), count_parameters(&g));
        assert_eq!(hw, 7_030_417);
        assert_eq!(hw - convs, 7_020_913);
    }

    fn conv_channel_total(g: &ModelGraph) -> usize {
        g.nodes
            .iter()
            .map(|n| match n.kind {
                LayerKind::ConvBnAct | LayerKind::Downsample => n.channels_out,
                LayerKind::CspBlock => (2 + 2 * n.repeats) * (n.channels_out / 2) + n.channels_out,
                LayerKind::Sppf => n.channels_in / 2 + n.channels_out,
                _ => 0,
            })
            .sum()
    }

    #[test]
    fn conv_block_hand_count() {
        let n = LayerSpec {
            id: 1,
            name: "c".into(),
            kind: LayerKind::ConvBnAct,
            inputs: vec![0],
            channels_in: 3,
            channels_out: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
            repeats: 0,
            shortcut: false,
            bias: true,
            fusion_arity: 0,
            feature_stride: 1,
            level: None,
        };
        let cfg = ModelConfig::baseline(1);
        assert_eq!(layer_params(&n, &cfg), 3 * 3 * 3 * 16 + 16 + 2 * 16);
        assert_eq!(layer_params(&n, &cfg), 480);
        assert_eq!(layer_params(&LayerSpec { bias: false, ..n }, &cfg), 464);
    }

    #[test]
    fn invalid_configs_name_the_invariant() {
        let bad = ModelConfig { input_size: 100, ..ModelConfig::baseline(4) };
        assert!(build_graph(&bad).unwrap_err().to_string().contains("multiple of 32"));
        let bad = ModelConfig { head_levels: vec![], ..ModelConfig::baseline(4) };
        assert!(build_graph(&bad).unwrap_err().to_string().contains("head_levels"));
        let bad = ModelConfig { head_levels: vec![Level::P2, Level::P4], ..ModelConfig::baseline(4) };
        assert!(build_graph(&bad).unwrap_err().to_string().contains("contiguous"));
        let bad = ModelConfig { width_multiple: 1.5, ..ModelConfig::baseline(4) };
        assert!(build_graph(&bad).unwrap_err().to_string().contains("width_multiple"));
        let bad = ModelConfig { neck_kind: "fpn".into(), ..ModelConfig::baseline(4) };
        assert!(build_graph(&bad).unwrap_err().to_string().contains("unknown neck_kind"));
    }

    #[test]
    fn flops_scale_with_area() {
        let g = build_graph(&ModelConfig::modified(4)).unwrap();
        let full = count_flops(&g, 640).unwrap() as f64;
        let half = count_flops(&g, 320).unwrap() as f64;
        assert!((half / full - 0.25).abs() < 1e-12);
        assert!(count_flops(&g, 100).is_err());
    }

    #[test]
    fn grids_times_stride_equal_input() {
        for cfg in [ModelConfig::baseline(3), ModelConfig::modified(3)] {
            let g = build_graph(&cfg).unwrap();
            for (level, side) in g.grid_sizes(640) {
                assert_eq!(side * level.stride(), 640);
            }
        }
    }
}
