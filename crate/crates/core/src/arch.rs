//! Layer graphs with channel bookkeeping.
//!
//! An [`ArchSpec`] lists nodes in topological order and the edges between
//! them. Edge order matters for concatenations: producers are joined in the
//! order their edges appear. Parameters of a learned node `n` are named
//! `n.weight` and `n.bias`.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adacof::AdaCofConfig;
use crate::error::{Error, Result};
use crate::sparse_opt::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prunable,
    /// Learned layer whose out-channel count carries meaning and never shrinks.
    HeadOutputFixed,
    NonLearned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeKind {
    /// Externally supplied tensor.
    Input,
    Conv {
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    /// Dense layer over the flattened input.
    Linear { activation: Activation },
    Upsample,
    AvgPool,
    /// Bilinear resize to the spatial size of node `like`.
    Resize { like: String },
    Concat,
    Add,
    /// AdaCoF warp of a feature map with the model's `direction` parameter
    /// set, resampled to a level `scale` times coarser than the frames.
    Warp { direction: usize, scale: usize },
    /// Named graph output.
    Sink,
}

impl NodeKind {
    pub fn is_learned(&self) -> bool {
        matches!(self, NodeKind::Conv { .. } | NodeKind::Linear { .. })
    }

    /// Nodes whose output channels equal their single input's channels.
    pub fn is_pass_through(&self) -> bool {
        matches!(
            self,
            NodeKind::Upsample | NodeKind::AvgPool | NodeKind::Resize { .. } | NodeKind::Warp { .. } | NodeKind::Sink
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub role: Role,
}

impl Node {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.id)
    }

    pub fn kernel(&self) -> usize {
        match self.kind {
            NodeKind::Conv { kernel, .. } => kernel,
            _ => 1,
        }
    }

    /// Weight tensor shape of a learned node.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            NodeKind::Conv { kernel, .. } => Some(vec![self.out_channels, self.in_channels, kernel, kernel]),
            NodeKind::Linear { .. } => Some(vec![self.out_channels, self.in_channels]),
            _ => None,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.iter().product())
    }

    pub fn param_count(&self) -> usize {
        if self.kind.is_learned() {
            self.weight_count() + self.out_channels
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl ArchSpec {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Producer ids of `id` in edge order.
    pub fn producers(&self, id: &str) -> Vec<&str> {
        self.edges.iter().filter(|e| e.to == id).map(|e| e.from.as_str()).collect()
    }

    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.edges.iter().filter(|e| e.from == id).map(|e| e.to.as_str()).collect()
    }

    pub fn learned(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind.is_learned())
    }

    /// `(name, shape)` of every parameter tensor, in node order.
    pub fn param_slots(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for n in self.learned() {
            out.push((n.weight_name(), n.weight_shape().expect("learned node")));
            out.push((n.bias_name(), vec![n.out_channels]));
        }
        out
    }

    pub fn weight_names(&self) -> Vec<String> {
        self.learned().map(Node::weight_name).collect()
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(Node::param_count).sum()
    }

    pub fn has_node(&self, id: &str) -> bool {
        self.node(id).is_some()
    }

    /// Check ids, ordering, arities and every channel constraint.
    pub fn validate(&self) -> Result<()> {
        let mut index = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(Error::Arch(format!("duplicate node id {}", n.id)));
            }
            let learned = n.kind.is_learned();
            if learned == (n.role == Role::NonLearned) {
                return Err(Error::Arch(format!("node {} has role {:?} inconsistent with its kind", n.id, n.role)));
            }
            if n.in_channels == 0 || n.out_channels == 0 {
                return Err(Error::Arch(format!("node {} has zero channels", n.id)));
            }
            if let NodeKind::Conv { kernel, stride, .. } = n.kind {
                if kernel == 0 || stride == 0 {
                    return Err(Error::Arch(format!("node {} has zero kernel or stride", n.id)));
                }
            }
            if let NodeKind::Warp { scale, .. } = n.kind {
                if scale == 0 || !scale.is_power_of_two() {
                    return Err(Error::Arch(format!("node {} has invalid scale {scale}", n.id)));
                }
            }
        }
        for e in &self.edges {
            let (Some(&a), Some(&b)) = (index.get(e.from.as_str()), index.get(e.to.as_str())) else {
                return Err(Error::Arch(format!("edge {} -> {} references an unknown node", e.from, e.to)));
            };
            if a >= b {
                return Err(Error::Arch(format!("edge {} -> {} is not in topological order", e.from, e.to)));
            }
        }
        for n in &self.nodes {
            let producers: Vec<&Node> = self.producers(&n.id).iter().map(|p| &self.nodes[index[p]]).collect();
            self.check_node(n, &producers)?;
            if let NodeKind::Resize { like } = &n.kind {
                if !index.contains_key(like.as_str()) {
                    return Err(Error::Arch(format!("node {} resizes like unknown node {like}", n.id)));
                }
            }
        }
        Ok(())
    }

    fn check_node(&self, n: &Node, producers: &[&Node]) -> Result<()> {
        let mismatch = |p: &Node, expected: usize| Error::ChannelMismatch {
            producer: p.id.clone(),
            consumer: n.id.clone(),
            produced: p.out_channels,
            expected,
        };
        let arity = |want: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Arch(format!(
                    "node {} expects {want} producers, has {}",
                    n.id,
                    producers.len()
                )))
            }
        };
        match n.kind {
            NodeKind::Input => {
                arity("no", producers.is_empty())?;
                if n.in_channels != n.out_channels {
                    return Err(Error::Arch(format!("input {} changes channel count", n.id)));
                }
            }
            NodeKind::Concat => {
                arity("at least one", !producers.is_empty())?;
                let sum: usize = producers.iter().map(|p| p.out_channels).sum();
                if sum != n.in_channels || n.out_channels != n.in_channels {
                    return Err(Error::ChannelMismatch {
                        producer: producers.iter().map(|p| p.id.as_str()).collect::<Vec<_>>().join("+"),
                        consumer: n.id.clone(),
                        produced: sum,
                        expected: n.in_channels,
                    });
                }
            }
            NodeKind::Add => {
                arity("at least one", !producers.is_empty())?;
                for p in producers {
                    if p.out_channels != n.in_channels {
                        return Err(mismatch(p, n.in_channels));
                    }
                }
                if n.out_channels != n.in_channels {
                    return Err(Error::Arch(format!("add {} changes channel count", n.id)));
                }
            }
            _ => {
                arity("exactly one", producers.len() == 1)?;
                if producers[0].out_channels != n.in_channels {
                    return Err(mismatch(producers[0], n.in_channels));
                }
                if n.kind.is_pass_through() && n.out_channels != n.in_channels {
                    return Err(Error::Arch(format!("{} changes channel count", n.id)));
                }
            }
        }
        Ok(())
    }

    /// Check that `params` holds exactly the tensors this spec needs.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let slots = self.param_slots();
        if slots.len() != params.len() {
            return Err(Error::Arch(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                params.len()
            )));
        }
        for (name, shape) in slots {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "check_params",
                        lhs: shape,
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Arch(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// He-initialised weights and zero biases for every learned node.
pub fn init_params(spec: &ArchSpec, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for n in spec.learned() {
        let shape = n.weight_shape().expect("learned node");
        let fan_in = n.in_channels * n.kernel() * n.kernel();
        let std = (2.0 / fan_in as f64).sqrt();
        params.insert(n.weight_name(), Tensor::randn(shape, std, &mut rng));
        params.insert(n.bias_name(), Tensor::zeros(vec![n.out_channels]));
    }
    params
}

/// Incremental spec construction used by the model builders.
#[derive(Default)]
pub struct SpecBuilder {
    spec: ArchSpec,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_spec(spec: ArchSpec) -> Self {
        Self { spec }
    }

    fn out_of(&self, id: &str) -> usize {
        self.spec
            .node(id)
            .unwrap_or_else(|| panic!("builder: unknown node {id}"))
            .out_channels
    }

    fn push(&mut self, id: &str, kind: NodeKind, inputs: &[&str], in_ch: usize, out_ch: usize, role: Role) -> String {
        for i in inputs {
            self.spec.edges.push(Edge {
                from: (*i).to_string(),
                to: id.to_string(),
            });
        }
        self.spec.nodes.push(Node {
            id: id.to_string(),
            kind,
            in_channels: in_ch,
            out_channels: out_ch,
            role,
        });
        id.to_string()
    }

    pub fn input(&mut self, id: &str, channels: usize) -> String {
        self.push(id, NodeKind::Input, &[], channels, channels, Role::NonLearned)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: &str,
        from: &str,
        out: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        role: Role,
    ) -> String {
        let kind = NodeKind::Conv {
            kernel,
            stride,
            padding: kernel / 2,
            activation,
        };
        let c = self.out_of(from);
        self.push(id, kind, &[from], c, out, role)
    }

    pub fn pass(&mut self, id: &str, kind: NodeKind, from: &str) -> String {
        let c = self.out_of(from);
        self.push(id, kind, &[from], c, c, Role::NonLearned)
    }

    pub fn concat(&mut self, id: &str, inputs: &[&str]) -> String {
        let c = inputs.iter().map(|i| self.out_of(i)).sum();
        self.push(id, NodeKind::Concat, inputs, c, c, Role::NonLearned)
    }

    pub fn add(&mut self, id: &str, inputs: &[&str]) -> String {
        let c = self.out_of(inputs[0]);
        self.push(id, NodeKind::Add, inputs, c, c, Role::NonLearned)
    }

    pub fn finish(self) -> Result<ArchSpec> {
        self.spec.validate()?;
        Ok(self.spec)
    }
}

/// Widths of the baseline U-Net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Encoder widths, shallowest first; one level per entry.
    pub widths: Vec<usize>,
    /// Hidden width of every head branch.
    pub head_width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            head_width: 16,
        }
    }
}

/// Head names: kernel weights, horizontal and vertical offsets for both
/// directions, then the occlusion mask.
pub const HEADS: [&str; 7] = ["w1", "a1", "b1", "w2", "a2", "b2", "v1"];

pub fn sink_id(head: &str) -> String {
    format!("sink.{head}")
}

/// Encoder output node of level `l`.
pub fn encoder_id(level: usize) -> String {
    format!("enc{level}.1")
}

/// Last decoder layer, shared by every head.
pub const TRUNK: &str = "dec0.1";

fn head(b: &mut SpecBuilder, name: &str, hidden: usize, out: usize) {
    let h0 = b.conv(&format!("head.{name}.0"), TRUNK, hidden, 3, 1, Activation::Relu, Role::Prunable);
    let h1 = b.conv(&format!("head.{name}.1"), &h0, out, 3, 1, Activation::None, Role::HeadOutputFixed);
    b.pass(&sink_id(name), NodeKind::Sink, &h1);
}

/// Encoder/decoder with shortcut concats and seven head branches.
pub fn baseline_spec(unet: &UNetConfig, adacof: &AdaCofConfig) -> Result<ArchSpec> {
    let levels = unet.widths.len();
    if levels == 0 || unet.widths.contains(&0) || unet.head_width == 0 {
        return Err(Error::Arch("U-Net widths must be non-empty and positive".into()));
    }
    adacof.validate()?;
    let taps = adacof.taps();
    let mut b = SpecBuilder::new();
    let mut x = b.input("input", 6);
    for (l, &w) in unet.widths.iter().enumerate() {
        if l > 0 {
            x = b.pass(&format!("pool{}", l - 1), NodeKind::AvgPool, &x);
        }
        x = b.conv(&format!("enc{l}.0"), &x, w, 3, 1, Activation::Relu, Role::Prunable);
        x = b.conv(&encoder_id(l), &x, w, 3, 1, Activation::Relu, Role::Prunable);
    }
    for l in (0..levels.saturating_sub(1)).rev() {
        let w = unet.widths[l];
        let up = b.pass(&format!("up{l}"), NodeKind::Upsample, &x);
        let upc = b.conv(&format!("upconv{l}"), &up, w, 3, 1, Activation::Relu, Role::Prunable);
        let cat = b.concat(&format!("cat{l}"), &[&upc, &encoder_id(l)]);
        let d = b.conv(&format!("dec{l}.0"), &cat, w, 3, 1, Activation::Relu, Role::Prunable);
        x = b.conv(&format!("dec{l}.1"), &d, w, 3, 1, Activation::Relu, Role::Prunable);
    }
    if levels == 1 {
        let d = b.conv("dec0.0", &x, unet.widths[0], 3, 1, Activation::Relu, Role::Prunable);
        b.conv(TRUNK, &d, unet.widths[0], 3, 1, Activation::Relu, Role::Prunable);
    }
    for name in HEADS {
        let out = if name == "v1" { 1 } else { taps };
        head(&mut b, name, unet.head_width, out);
    }
    b.finish()
}

/// Number of encoder levels in a baseline-shaped spec.
pub fn encoder_levels(spec: &ArchSpec) -> usize {
    (0..).take_while(|l| spec.has_node(&encoder_id(*l))).count()
}

/// Additions made by the enhancement stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    /// Output width of the 1×1 filter per pyramid level, shallowest first.
    pub pyramid_widths: Vec<usize>,
    /// Filter encoder features with 1×1 convolutions before warping.
    pub one_by_one: bool,
    /// Learn a second mask to blend the two paths.
    pub path_select: bool,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub grid_widths: Vec<usize>,
    pub head_width: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            pyramid_widths: vec![4, 8, 12, 16, 20],
            one_by_one: true,
            path_select: true,
            grid_rows: 3,
            grid_cols: 6,
            grid_widths: vec![32, 64, 96],
            head_width: 16,
        }
    }
}

/// Synthesis output and second-mask sinks.
pub const SINK_SYNTH: &str = "sink.out";
pub const SINK_V2: &str = "sink.v2";

/// Widths of the 1×1 filters for an encoder with `levels` levels.
pub fn pyramid_widths(cfg: &EnhanceConfig, levels: usize) -> Result<Vec<usize>> {
    if levels > cfg.pyramid_widths.len() {
        return Err(Error::Arch(format!(
            "{levels} pyramid levels but only {} widths configured",
            cfg.pyramid_widths.len()
        )));
    }
    Ok(cfg.pyramid_widths[..levels].to_vec())
}

/// Attach the feature pyramid, warps, synthesis grid and (optionally) the
/// path-selection head to a baseline-shaped spec.
pub fn enhance_spec(base: &ArchSpec, cfg: &EnhanceConfig) -> Result<ArchSpec> {
    base.validate()?;
    let levels = encoder_levels(base);
    let missing = HEADS.iter().map(|h| sink_id(h)).find(|s| !base.has_node(s));
    if levels == 0 || !base.has_node(TRUNK) || missing.is_some() || base.has_node(SINK_SYNTH) {
        return Err(Error::Arch("spec is not a baseline interpolation model".into()));
    }
    let rows = cfg.grid_rows;
    if rows == 0 || cfg.grid_cols == 0 || cfg.grid_widths.len() < rows || cfg.grid_widths[..rows].contains(&0) {
        return Err(Error::Arch("grid needs at least one row and column and a width per row".into()));
    }
    let widths = if cfg.one_by_one {
        pyramid_widths(cfg, levels)?
    } else {
        Vec::new()
    };
    let mut b = SpecBuilder::from_spec(base.clone());

    let mut injections = Vec::new();
    for l in 0..levels {
        let mut feat = encoder_id(l);
        if cfg.one_by_one {
            feat = b.conv(&format!("fp{l}"), &feat, widths[l], 1, 1, Activation::None, Role::Prunable);
        }
        let scale = 1usize << l;
        let w0 = b.pass(&format!("warp{l}.0"), NodeKind::Warp { direction: 0, scale }, &feat);
        let w1 = b.pass(&format!("warp{l}.1"), NodeKind::Warp { direction: 1, scale }, &feat);
        injections.push(b.concat(&format!("inj{l}"), &[&w0, &w1]));
    }
    if levels > rows {
        let deepest = injections[rows - 1].clone();
        let mut parts = vec![deepest.clone()];
        for (l, inj) in injections.iter().enumerate().skip(rows) {
            parts.push(b.pass(&format!("fold{l}"), NodeKind::Resize { like: deepest.clone() }, inj));
        }
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        injections[rows - 1] = b.concat(&format!("inj{}.all", rows - 1), &refs);
        injections.truncate(rows);
    }

    let gw = &cfg.grid_widths;
    let conv3 = |b: &mut SpecBuilder, id: String, from: &str, out: usize, stride: usize, act: Activation| {
        b.conv(&id, from, out, 3, stride, act, Role::Prunable)
    };
    let merge = |b: &mut SpecBuilder, id: String, parts: Vec<String>| -> String {
        if parts.len() == 1 {
            parts.into_iter().next().expect("one part")
        } else {
            let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
            b.add(&id, &refs)
        }
    };
    let half = cfg.grid_cols.div_ceil(2);
    let mut state: Vec<String> = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut parts = Vec::new();
        if let Some(inj) = injections.get(r) {
            parts.push(conv3(&mut b, format!("grid.in{r}"), inj, gw[r], 1, Activation::Relu));
        }
        if r > 0 {
            let prev = state[r - 1].clone();
            parts.push(conv3(&mut b, format!("grid.down{r}.0"), &prev, gw[r], 2, Activation::Relu));
        }
        state.push(merge(&mut b, format!("grid.x{r}.0"), parts));
    }
    for c in 1..cfg.grid_cols {
        let order: Vec<usize> = if c < half {
            (0..rows).collect()
        } else {
            (0..rows).rev().collect()
        };
        for r in order {
            let prev = state[r].clone();
            let l0 = conv3(&mut b, format!("grid.lat{r}.{c}.0"), &prev, gw[r], 1, Activation::Relu);
            let l1 = conv3(&mut b, format!("grid.lat{r}.{c}.1"), &l0, gw[r], 1, Activation::None);
            let mut parts = vec![b.add(&format!("grid.res{r}.{c}"), &[&prev, &l1])];
            if c < half && r > 0 {
                let above = state[r - 1].clone();
                parts.push(conv3(&mut b, format!("grid.down{r}.{c}"), &above, gw[r], 2, Activation::Relu));
            }
            if c >= half && r + 1 < rows {
                let below = state[r + 1].clone();
                let up = b.pass(&format!("grid.upsample{r}.{c}"), NodeKind::Upsample, &below);
                parts.push(conv3(&mut b, format!("grid.up{r}.{c}"), &up, gw[r], 1, Activation::Relu));
            }
            state[r] = merge(&mut b, format!("grid.x{r}.{c}"), parts);
        }
    }
    let out = b.conv("grid.out", &state[0], 3, 3, 1, Activation::None, Role::HeadOutputFixed);
    b.pass(SINK_SYNTH, NodeKind::Sink, &out);

    if cfg.path_select {
        head(&mut b, "v2", cfg.head_width, 1);
    }
    b.finish()
}
