use super::{LayerKind, LayerSpec, Level, ModelGraph};
use crate::error::{shape_err, Result};
use crate::nn::{self, ConvGeom, Mode, Op, ParamRole, ParamStore, Program, Trace};
use crate::tensor::{Real, Tensor};

/// Raw head output for one level, laid out `[batch][y][x][anchor][5 + nc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub level: Level,
    pub stride: usize,
    pub batch: usize,
    pub ny: usize,
    pub nx: usize,
    pub na: usize,
    pub no: usize,
    pub data: Vec<f64>,
}

impl PredictionGrid {
    pub fn zeros(level: Level, batch: usize, ny: usize, nx: usize, na: usize, no: usize) -> Self {
        Self { level, stride: level.stride(), batch, ny, nx, na, no, data: vec![0.0; batch * ny * nx * na * no] }
    }

    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize, a: usize) -> usize {
        (((b * self.ny + y) * self.nx + x) * self.na + a) * self.no
    }

    /// The `5 + nc` logits of one slot.
    pub fn slot(&self, b: usize, y: usize, x: usize, a: usize) -> &[f64] {
        let o = self.offset(b, y, x, a);
        &self.data[o..o + self.no]
    }

    pub fn slot_mut(&mut self, b: usize, y: usize, x: usize, a: usize) -> &mut [f64] {
        let o = self.offset(b, y, x, a);
        &mut self.data[o..o + self.no]
    }

    pub fn num_slots(&self) -> usize {
        self.batch * self.ny * self.nx * self.na
    }

    pub fn same_layout(&self, other: &PredictionGrid) -> bool {
        (self.level, self.batch, self.ny, self.nx, self.na, self.no)
            == (other.level, other.batch, other.ny, other.nx, other.na, other.no)
    }

    pub fn from_nchw<T: Real>(t: &Tensor<T>, level: Level, na: usize, no: usize) -> Result<Self> {
        let (n, c, h, w) = t.nchw();
        if c != na * no {
            return Err(shape_err(format!("head has {c} channels, expected {na}x{no}")));
        }
        let mut g = Self::zeros(level, n, h, w, na, no);
        for b in 0..n {
            for a in 0..na {
                for k in 0..no {
                    let plane = &t.data[((b * c) + a * no + k) * h * w..][..h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let o = g.offset(b, y, x, a) + k;
                            g.data[o] = plane[y * w + x].f64();
                        }
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn to_nchw<T: Real>(&self) -> Tensor<T> {
        let c = self.na * self.no;
        let (h, w) = (self.ny, self.nx);
        let mut t = Tensor::zeros(&[self.batch, c, h, w]);
        for b in 0..self.batch {
            for a in 0..self.na {
                for k in 0..self.no {
                    let base = ((b * c) + a * self.no + k) * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            t.data[base + y * w + x] = T::of(self.data[self.offset(b, y, x, a) + k]);
                        }
                    }
                }
            }
        }
        t
    }
}

/// A graph together with its executable program.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub graph: ModelGraph,
    pub program: Program,
}

struct Lowering {
    prog: Program,
}

impl Lowering {
    fn conv(&mut self, name: &str, x: usize, geom: ConvGeom, role_w: ParamRole, bias: Option<ParamRole>) -> usize {
        let w = self.prog.add_param(format!("{name}.weight"), vec![geom.cout, geom.cin, geom.k, geom.k], role_w);
        let b = bias.map(|r| self.prog.add_param(format!("{name}.bias"), vec![geom.cout], r));
        self.prog.push(Op::Conv { geom, weight: w, bias: b }, vec![x])
    }

    /// conv → batch norm → SiLU
    #[allow(clippy::too_many_arguments)]
    fn cba(&mut self, name: &str, x: usize, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> usize {
        let geom = ConvGeom { cin, cout, k, stride, pad };
        let c = self.conv(&format!("{name}.conv"), x, geom, ParamRole::ConvWeight, bias.then_some(ParamRole::ConvBias));
        let scale = self.prog.add_param(format!("{name}.bn.scale"), vec![cout], ParamRole::NormScale);
        let shift = self.prog.add_param(format!("{name}.bn.shift"), vec![cout], ParamRole::NormShift);
        let mean = self.prog.add_buffer(format!("{name}.bn.running_mean"), cout, 0.0);
        let var = self.prog.add_buffer(format!("{name}.bn.running_var"), cout, 1.0);
        let bn = self.prog.push(Op::BatchNorm { scale, shift, mean, var }, vec![c]);
        self.prog.push(Op::Silu, vec![bn])
    }

    fn layer(&mut self, n: &LayerSpec, ins: &[usize], input_channels: usize) -> usize {
        let name = n.name.as_str();
        match n.kind {
            LayerKind::Input => {
                let x = self.prog.push(Op::Input { channels: input_channels }, vec![]);
                if n.channels_out != input_channels {
                    self.prog.push(Op::Replicate { channels: n.channels_out }, vec![x])
                } else {
                    x
                }
            }
            LayerKind::ConvBnAct | LayerKind::Downsample => {
                self.cba(name, ins[0], n.channels_in, n.channels_out, n.kernel, n.stride, n.padding, n.bias)
            }
            LayerKind::CspBlock => {
                let h = n.channels_out / 2;
                let mut m = self.cba(&format!("{name}.cv1"), ins[0], n.channels_in, h, 1, 1, 0, false);
                for i in 0..n.repeats {
                    let t = self.cba(&format!("{name}.m.{i}.cv1"), m, h, h, 1, 1, 0, false);
                    let t = self.cba(&format!("{name}.m.{i}.cv2"), t, h, h, 3, 1, 1, false);
                    m = if n.shortcut { self.prog.push(Op::Add, vec![m, t]) } else { t };
                }
                let side = self.cba(&format!("{name}.cv2"), ins[0], n.channels_in, h, 1, 1, 0, false);
                let cat = self.prog.push(Op::Concat, vec![m, side]);
                self.cba(&format!("{name}.cv3"), cat, 2 * h, n.channels_out, 1, 1, 0, false)
            }
            LayerKind::Sppf => {
                let h = n.channels_in / 2;
                let x = self.cba(&format!("{name}.cv1"), ins[0], n.channels_in, h, 1, 1, 0, false);
                let y1 = self.prog.push(Op::MaxPool { k: n.kernel }, vec![x]);
                let y2 = self.prog.push(Op::MaxPool { k: n.kernel }, vec![y1]);
                let y3 = self.prog.push(Op::MaxPool { k: n.kernel }, vec![y2]);
                let cat = self.prog.push(Op::Concat, vec![x, y1, y2, y3]);
                self.cba(&format!("{name}.cv2"), cat, 4 * h, n.channels_out, 1, 1, 0, false)
            }
            LayerKind::Upsample => self.prog.push(Op::Upsample, vec![ins[0]]),
            LayerKind::Concat => self.prog.push(Op::Concat, ins.to_vec()),
            LayerKind::Fusion => {
                let w = self.prog.add_param(format!("{name}.weight"), vec![n.fusion_arity], ParamRole::FusionWeight);
                self.prog.push(Op::Fuse { weights: w, eps: 0.0 }, ins.to_vec())
            }
            LayerKind::Head => {
                let geom = ConvGeom { cin: n.channels_in, cout: n.channels_out, k: 1, stride: 1, pad: 0 };
                self.conv(name, ins[0], geom, ParamRole::HeadWeight, Some(ParamRole::HeadBias))
            }
        }
    }
}

impl CompiledModel {
    pub fn new(graph: ModelGraph) -> Result<Self> {
        graph.validate()?;
        let mut lw = Lowering { prog: Program::default() };
        let mut value_of = Vec::with_capacity(graph.nodes.len());
        let in_ch = 1;
        for n in &graph.nodes {
            let ins: Vec<usize> = n.inputs.iter().map(|&i| value_of[i]).collect();
            let v = lw.layer(n, &ins, in_ch);
            value_of.push(v);
        }
        let eps = graph.config.fusion_epsilon;
        for node in &mut lw.prog.nodes {
            if let Op::Fuse { eps: e, .. } = &mut node.op {
                *e = eps;
            }
        }
        lw.prog.outputs = graph.heads.iter().map(|&(_, id)| value_of[id]).collect();
        Ok(Self { graph, program: lw.prog })
    }

    pub fn input_size(&self) -> usize {
        self.graph.config.input_size
    }

    /// Runs the network on a `[N, 1, S, S]` batch.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        images: Tensor<T>,
        mode: Mode,
    ) -> Result<(Trace<T>, Vec<PredictionGrid>)> {
        let s = self.input_size();
        if images.shape.len() != 4 || images.shape[1] != 1 || images.shape[2] != s || images.shape[3] != s {
            return Err(shape_err(format!("images {:?} do not match [N, 1, {s}, {s}]", images.shape)));
        }
        if store.params.len() != self.program.params.len()
            || store.params.iter().zip(&self.program.params).any(|(v, p)| v.len() != p.len())
        {
            return Err(shape_err("parameter store does not match the graph"));
        }
        let trace = nn::forward(&self.program, store, images, mode)?;
        let cfg = &self.graph.config;
        let grids = self
            .graph
            .heads
            .iter()
            .zip(trace.outputs(&self.program))
            .map(|(&(level, _), t)| PredictionGrid::from_nchw(t, level, cfg.anchors_per_level, cfg.outputs_per_anchor()))
            .collect::<Result<Vec<_>>>()?;
        Ok((trace, grids))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        trace: &Trace<T>,
        grads: &[PredictionGrid],
    ) -> Result<Vec<Vec<T>>> {
        let gs = grads.iter().map(|g| g.to_nchw()).collect();
        nn::backward(&self.program, store, trace, gs)
    }
}
