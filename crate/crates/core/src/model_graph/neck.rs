//! Feature-fusion necks, registered by name and selected through
//! [`ModelConfig::neck_kind`](super::ModelConfig).

use std::collections::BTreeMap;

use super::builder::{BackboneTaps, GraphBuilder};
use super::Level;
use crate::error::Result;

/// A neck consumes backbone taps and yields one feature node per level in
/// `levels` (finest first, always ending at P5).
pub trait Neck: Send + Sync {
    fn name(&self) -> &'static str;

    fn build(&self, b: &mut GraphBuilder, taps: &BackboneTaps, levels: &[Level]) -> Result<BTreeMap<Level, usize>>;
}

pub struct NeckRegistry {
    necks: BTreeMap<&'static str, Box<dyn Neck>>,
}

impl NeckRegistry {
    pub fn empty() -> Self {
        Self { necks: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(PanNeck));
        r.register(Box::new(BiFpnNeck));
        r
    }

    pub fn register(&mut self, neck: Box<dyn Neck>) {
        self.necks.insert(neck.name(), neck);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Neck> {
        self.necks.get(name).map(|b| b.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.necks.keys().copied().collect()
    }
}

fn tag(level: Level) -> String {
    level.to_string().to_lowercase()
}

/// Output width per level at full scale.
fn level_width(level: Level) -> usize {
    match level {
        Level::P2 => 128,
        Level::P3 => 256,
        Level::P4 => 512,
        Level::P5 => 1024,
    }
}

/// Path-aggregation neck: concat-based top-down then bottom-up.
pub struct PanNeck;

impl Neck for PanNeck {
    fn name(&self) -> &'static str {
        "pan"
    }

    fn build(&self, b: &mut GraphBuilder, taps: &BackboneTaps, levels: &[Level]) -> Result<BTreeMap<Level, usize>> {
        let lowest = levels[0];
        let mut out = BTreeMap::new();
        // reduce[l]: 1x1 conv output living at level l, fed upward and downward
        let mut reduce = BTreeMap::new();
        let mut td = taps.get(Level::P5);
        let mut level = Level::P5;
        while let Some(next) = level.below().filter(|l| *l >= lowest) {
            let t = tag(next);
            let r = b.conv(&format!("neck.pan.reduce_{}", tag(level)), td, level_width(next), 1, 1);
            reduce.insert(level, r);
            let up = b.upsample(&format!("neck.pan.up_{t}"), r);
            let cat = b.concat(&format!("neck.pan.cat_td_{t}"), vec![up, taps.get(next)])?;
            td = b.csp(&format!("neck.pan.td_{t}"), cat, level_width(next), 3, false);
            level = next;
        }
        out.insert(lowest, td);
        let mut prev = td;
        for &l in &levels[1..] {
            let t = tag(l);
            let below = l.below().expect("level above the lowest");
            let d = b.downsample(&format!("neck.pan.down_{t}"), prev, level_width(below));
            let cat = b.concat(&format!("neck.pan.cat_bu_{t}"), vec![d, reduce[&l]])?;
            prev = b.csp(&format!("neck.pan.out_{t}"), cat, level_width(l), 3, false);
            out.insert(l, prev);
        }
        Ok(out)
    }
}

/// Weighted bi-directional neck: one top-down and one bottom-up pass of
/// fast normalized fusion nodes.
pub struct BiFpnNeck;

impl BiFpnNeck {
    /// Width at which the inputs of each level's fusion nodes meet.
    fn fusion_width(level: Level) -> usize {
        match level {
            Level::P2 => 64,
            Level::P3 => 256,
            Level::P4 => 512,
            Level::P5 => 512,
        }
    }

    fn output_width(level: Level) -> usize {
        match level {
            Level::P2 => 64,
            l => level_width(l),
        }
    }
}

impl Neck for BiFpnNeck {
    fn name(&self) -> &'static str {
        "bifpn"
    }

    fn build(&self, b: &mut GraphBuilder, taps: &BackboneTaps, levels: &[Level]) -> Result<BTreeMap<Level, usize>> {
        let lowest = levels[0];
        let fw = |b: &GraphBuilder, l: Level| b.ch(Self::fusion_width(l));
        let mut out = BTreeMap::new();
        let mut lateral = BTreeMap::new();
        let mut td_nodes = BTreeMap::new();

        let fw_top = fw(b, Level::P5);
        let top = b.harmonize("neck.bifpn.lat_p5", taps.get(Level::P5), fw_top);
        lateral.insert(Level::P5, top);
        if lowest == Level::P5 {
            out.insert(Level::P5, taps.get(Level::P5));
            return Ok(out);
        }

        let mut td = top;
        let mut level = Level::P5;
        while let Some(next) = level.below().filter(|l| *l >= lowest) {
            let t = tag(next);
            let width = fw(b, next);
            let h = b.harmonize(&format!("neck.bifpn.reduce_{}", tag(level)), td, width);
            let up = b.upsample(&format!("neck.bifpn.up_{t}"), h);
            let lat = b.harmonize(&format!("neck.bifpn.lat_{t}"), taps.get(next), width);
            lateral.insert(next, lat);
            let f = b.fusion(&format!("neck.bifpn.fuse_td_{t}"), vec![up, lat])?;
            let cout = if next == lowest { b.ch(Self::output_width(next)) } else { width };
            let n = b.repeats(3);
            td = b.csp_raw(&format!("neck.bifpn.td_{t}"), f, cout, n, false);
            td_nodes.insert(next, td);
            level = next;
        }
        out.insert(lowest, td);

        let mut prev = td;
        for &l in &levels[1..] {
            let t = tag(l);
            let width = fw(b, l);
            let d = b.conv_raw(&format!("neck.bifpn.down_{t}"), prev, width, 3, 2, 1);
            let inputs = if l == Level::P5 {
                vec![d, lateral[&l]]
            } else {
                vec![d, td_nodes[&l], lateral[&l]]
            };
            let f = b.fusion(&format!("neck.bifpn.fuse_bu_{t}"), inputs)?;
            let n = b.repeats(3);
            let cout = b.ch(Self::output_width(l));
            prev = b.csp_raw(&format!("neck.bifpn.out_{t}"), f, cout, n, false);
            out.insert(l, prev);
        }
        Ok(out)
    }
}
