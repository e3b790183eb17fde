use std::collections::BTreeMap;

use super::{Level, LayerKind, LayerSpec, ModelConfig, ModelGraph, GRAPH_FORMAT_VERSION};
use crate::error::{config_err, Result};

/// Incremental graph construction. Channel arguments are given at full
/// width and scaled by the width multiple here; repeat counts likewise by
/// the depth multiple.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<LayerSpec>,
    width: f64,
    depth: f64,
}

/// Backbone outputs available to a neck, keyed by pyramid level.
#[derive(Debug, Clone)]
pub struct BackboneTaps {
    pub taps: BTreeMap<Level, usize>,
}

impl BackboneTaps {
    pub fn get(&self, level: Level) -> usize {
        self.taps[&level]
    }
}

impl GraphBuilder {
    pub fn new(width: f64, depth: f64) -> Self {
        Self { nodes: Vec::new(), width, depth }
    }

    /// Scaled channel count, rounded up to a multiple of 8.
    pub fn ch(&self, full: usize) -> usize {
        let scaled = full as f64 * self.width;
        ((scaled / 8.0).ceil() as usize * 8).max(8)
    }

    pub fn repeats(&self, full: usize) -> usize {
        if full > 1 {
            ((full as f64 * self.depth).round() as usize).max(1)
        } else {
            full
        }
    }

    pub fn channels(&self, id: usize) -> usize {
        self.nodes[id].channels_out
    }

    pub fn feature_stride(&self, id: usize) -> usize {
        self.nodes[id].feature_stride
    }

    fn push(&mut self, mut spec: LayerSpec) -> usize {
        spec.id = self.nodes.len();
        self.nodes.push(spec);
        self.nodes.len() - 1
    }

    fn blank(&self, name: &str, kind: LayerKind, inputs: Vec<usize>) -> LayerSpec {
        let (cin, fs) = inputs
            .first()
            .map(|&i| (self.nodes[i].channels_out, self.nodes[i].feature_stride))
            .unwrap_or((0, 1));
        LayerSpec {
            id: 0,
            name: name.to_string(),
            kind,
            inputs,
            channels_in: cin,
            channels_out: cin,
            kernel: 1,
            stride: 1,
            padding: 0,
            repeats: 0,
            shortcut: false,
            bias: false,
            fusion_arity: 0,
            feature_stride: fs,
            level: None,
        }
    }

    pub fn input(&mut self, channels: usize) -> usize {
        let mut s = self.blank("input", LayerKind::Input, vec![]);
        s.channels_out = channels;
        self.push(s)
    }

    /// Conv + BN + SiLU with already-scaled output channels.
    pub fn conv_raw(&mut self, name: &str, input: usize, cout: usize, k: usize, stride: usize, pad: usize) -> usize {
        let kind = if stride > 1 { LayerKind::Downsample } else { LayerKind::ConvBnAct };
        let mut s = self.blank(name, kind, vec![input]);
        s.channels_out = cout;
        s.kernel = k;
        s.stride = stride;
        s.padding = pad;
        s.feature_stride *= stride;
        self.push(s)
    }

    pub fn conv(&mut self, name: &str, input: usize, full_out: usize, k: usize, stride: usize) -> usize {
        let c = self.ch(full_out);
        self.conv_raw(name, input, c, k, stride, k / 2)
    }

    /// 3×3 stride-2 conv block.
    pub fn downsample(&mut self, name: &str, input: usize, full_out: usize) -> usize {
        self.conv(name, input, full_out, 3, 2)
    }

    pub fn csp_raw(&mut self, name: &str, input: usize, cout: usize, repeats: usize, shortcut: bool) -> usize {
        let mut s = self.blank(name, LayerKind::CspBlock, vec![input]);
        s.channels_out = cout;
        s.repeats = repeats;
        s.shortcut = shortcut;
        self.push(s)
    }

    pub fn csp(&mut self, name: &str, input: usize, full_out: usize, full_repeats: usize, shortcut: bool) -> usize {
        let c = self.ch(full_out);
        let n = self.repeats(full_repeats);
        self.csp_raw(name, input, c, n, shortcut)
    }

    pub fn sppf_raw(&mut self, name: &str, input: usize, cout: usize) -> usize {
        let mut s = self.blank(name, LayerKind::Sppf, vec![input]);
        s.channels_out = cout;
        s.kernel = 5;
        s.padding = 2;
        self.push(s)
    }

    pub fn upsample(&mut self, name: &str, input: usize) -> usize {
        let mut s = self.blank(name, LayerKind::Upsample, vec![input]);
        s.feature_stride /= 2;
        s.stride = 2;
        self.push(s)
    }

    pub fn concat(&mut self, name: &str, inputs: Vec<usize>) -> Result<usize> {
        let fs = self.nodes[inputs[0]].feature_stride;
        if let Some(&bad) = inputs.iter().find(|&&i| self.nodes[i].feature_stride != fs) {
            return Err(config_err(format!("concat {name}: input {} at another stride", self.nodes[bad].name)));
        }
        let total = inputs.iter().map(|&i| self.nodes[i].channels_out).sum();
        let mut s = self.blank(name, LayerKind::Concat, inputs);
        s.channels_in = total;
        s.channels_out = total;
        Ok(self.push(s))
    }

    /// Weighted fusion node; inputs must agree in stride and width.
    pub fn fusion(&mut self, name: &str, inputs: Vec<usize>) -> Result<usize> {
        if inputs.len() < 2 {
            return Err(config_err(format!("fusion {name} needs at least two inputs")));
        }
        let (c, fs) = (self.channels(inputs[0]), self.feature_stride(inputs[0]));
        for &i in &inputs {
            if self.channels(i) != c || self.feature_stride(i) != fs {
                return Err(config_err(format!(
                    "fusion {name}: input {} is {}ch@{}, expected {c}ch@{fs}",
                    self.nodes[i].name,
                    self.channels(i),
                    self.feature_stride(i)
                )));
            }
        }
        let arity = inputs.len();
        let mut s = self.blank(name, LayerKind::Fusion, inputs);
        s.fusion_arity = arity;
        Ok(self.push(s))
    }

    /// 1×1 conv to `cout` scaled channels unless the width already matches.
    pub fn harmonize(&mut self, name: &str, input: usize, cout: usize) -> usize {
        if self.channels(input) == cout {
            input
        } else {
            self.conv_raw(name, input, cout, 1, 1, 0)
        }
    }

    pub fn head(&mut self, name: &str, input: usize, level: Level, outputs: usize) -> usize {
        let mut s = self.blank(name, LayerKind::Head, vec![input]);
        s.channels_out = outputs;
        s.level = Some(level);
        s.bias = true;
        self.push(s)
    }

    /// Small-variant CSP backbone with SPPF; taps at strides 4, 8, 16, 32.
    pub fn yolo_backbone(&mut self, input: usize) -> BackboneTaps {
        let c = self.ch(64);
        let stem = self.conv_raw("backbone.0", input, c, 6, 2, 2);
        let x = self.downsample("backbone.1", stem, 128);
        let p2 = self.csp("backbone.2", x, 128, 3, true);
        let x = self.downsample("backbone.3", p2, 256);
        let p3 = self.csp("backbone.4", x, 256, 6, true);
        let x = self.downsample("backbone.5", p3, 512);
        let p4 = self.csp("backbone.6", x, 512, 9, true);
        let x = self.downsample("backbone.7", p4, 1024);
        let x = self.csp("backbone.8", x, 1024, 3, true);
        let c = self.ch(1024);
        let p5 = self.sppf_raw("backbone.9", x, c);
        BackboneTaps {
            taps: [(Level::P2, p2), (Level::P3, p3), (Level::P4, p4), (Level::P5, p5)].into_iter().collect(),
        }
    }

    pub fn finish(self, config: ModelConfig, heads: Vec<(Level, usize)>) -> Result<ModelGraph> {
        let edges = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |&p| (p, n.id)))
            .collect();
        let strides = heads.iter().map(|&(l, _)| (l, l.stride())).collect();
        let g = ModelGraph {
            version: GRAPH_FORMAT_VERSION,
            config,
            nodes: self.nodes,
            edges,
            strides,
            heads,
        };
        g.validate()?;
        Ok(g)
    }
}

impl ModelGraph {
    /// Few-hundred-parameter detector on 8×8 inputs touching every layer
    /// kind. Used as the finite-difference gradient probe.
    pub fn gradient_probe(num_classes: usize) -> ModelGraph {
        let mut b = GraphBuilder::new(1.0, 1.0);
        let input = b.input(1);
        let b0 = b.conv_raw("backbone.0", input, 4, 3, 2, 1);
        let b1 = b.conv_raw("backbone.1", b0, 8, 3, 2, 1);
        let c1 = b.csp_raw("neck.csp", b1, 8, 1, true);
        let s1 = b.sppf_raw("neck.sppf", c1, 8);
        let b2 = b.conv_raw("neck.down", c1, 8, 3, 2, 1);
        let up = b.upsample("neck.up", b2);
        let f = b.fusion("neck.fuse", vec![s1, up, c1]).expect("probe fusion");
        let cat = b.concat("neck.cat", vec![f, b1]).expect("probe concat");
        let p2 = b.conv_raw("neck.out2", cat, 8, 1, 1, 0);
        let config = ModelConfig {
            num_classes,
            input_size: 8,
            width_multiple: 1.0,
            depth_multiple: 1.0,
            neck_kind: "probe".into(),
            head_levels: vec![Level::P2, Level::P3],
            fusion_epsilon: 1e-4,
            anchors_per_level: 3,
            rgb_stem: false,
        };
        let no = config.anchors_per_level * config.outputs_per_anchor();
        let h2 = b.head("head.p2", p2, Level::P2, no);
        let h3 = b.head("head.p3", b2, Level::P3, no);
        b.finish(config, vec![(Level::P2, h2), (Level::P3, h3)]).expect("probe graph is valid")
    }
}
