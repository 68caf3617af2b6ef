//! Density profiling of sparse weights and the rewrite into a smaller dense
//! architecture.
//!
//! Every learned layer is first shrunk on its own to
//! `ceil(sqrt(d) * C_in) x ceil(sqrt(d) * C_out)` (the provisional spec),
//! then [`unify_channels`] makes neighbouring layers agree again.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{init_params, ArchSpec, NodeKind, Role};
use crate::error::{Error, Result};
use crate::sparse_opt::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDensity {
    pub layer: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub zeros: usize,
    pub sparsity: f64,
    pub density: f64,
}

impl LayerDensity {
    pub fn new(layer: impl Into<String>, k: usize, zeros: usize) -> Result<Self> {
        if k == 0 || zeros > k {
            return Err(Error::invalid("layer density", format!("{zeros} zeros out of {k} weights")));
        }
        let sparsity = zeros as f64 / k as f64;
        Ok(Self {
            layer: layer.into(),
            k,
            zeros,
            sparsity,
            density: 1.0 - sparsity,
        })
    }

    pub fn nonzeros(&self) -> usize {
        self.k - self.zeros
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub layers: Vec<LayerDensity>,
    pub global_density: f64,
}

impl DensityProfile {
    pub fn from_layers(layers: Vec<LayerDensity>) -> Self {
        let total: usize = layers.iter().map(|l| l.k).sum();
        let nonzero: usize = layers.iter().map(LayerDensity::nonzeros).sum();
        let global_density = if total == 0 { 1.0 } else { nonzero as f64 / total as f64 };
        Self { layers, global_density }
    }

    /// Profile with density 1 for every learned layer of `spec`.
    pub fn dense(spec: &ArchSpec) -> Self {
        Self::from_layers(
            spec.learned()
                .map(|n| LayerDensity::new(&n.id, n.weight_count(), 0).expect("non-empty layer"))
                .collect(),
        )
    }

    pub fn get(&self, layer: &str) -> Option<&LayerDensity> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Count exact zeros in the weight tensor of every learned layer; biases
/// are not counted.
pub fn profile_density(spec: &ArchSpec, params: &ParamStore) -> Result<DensityProfile> {
    spec.check_params(params)?;
    let layers = spec
        .learned()
        .map(|n| {
            let w = &params[&n.weight_name()];
            LayerDensity::new(&n.id, w.numel(), w.count_zeros())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityProfile::from_layers(layers))
}

/// Smallest `n >= 1` with `n^2 * den >= num * c^2`, i.e. `ceil(sqrt(num/den) * c)`
/// in exact integer arithmetic.
pub fn scaled_channels(c: usize, num: usize, den: usize) -> usize {
    assert!(den > 0 && num <= den, "density must be a fraction in [0, 1]");
    let target = num as u128 * (c as u128) * (c as u128);
    let den = den as u128;
    let approx = ((num as f64 / den as f64).sqrt() * c as f64).ceil() as u128;
    let mut n = approx.max(1);
    while n > 1 && (n - 1) * (n - 1) * den >= target {
        n -= 1;
    }
    while n * n * den < target {
        n += 1;
    }
    n as usize
}

/// `ceil(sqrt(d) * c)` for a floating density, floored at 1.
pub fn scaled_channels_f64(c: usize, d: f64) -> usize {
    let target = d * (c as f64) * (c as f64);
    let mut n = ((d.sqrt() * c as f64).ceil() as usize).max(1);
    while n > 1 && ((n - 1) * (n - 1)) as f64 >= target {
        n -= 1;
    }
    while ((n * n) as f64) < target {
        n += 1;
    }
    n
}

/// Provisional layer geometry after shrinking by a density ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }
}

/// Shrink one learned layer by density `d`; head outputs keep their width.
pub fn reshape_layer(layer: &crate::arch::Node, d: f64) -> Result<LayerShape> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::invalid("reshape_layer", format!("density {d} outside [0, 1]")));
    }
    if !layer.kind.is_learned() {
        return Err(Error::invalid("reshape_layer", format!("{} has no weights", layer.id)));
    }
    Ok(LayerShape {
        in_channels: scaled_channels_f64(layer.in_channels, d),
        out_channels: if layer.role == Role::HeadOutputFixed {
            layer.out_channels
        } else {
            scaled_channels_f64(layer.out_channels, d)
        },
        kernel: layer.kernel(),
    })
}

/// Apply the per-layer shrink of `profile` to every learned node. The
/// result generally violates channel constraints until unified.
pub fn provisional_spec(spec: &ArchSpec, profile: &DensityProfile) -> Result<ArchSpec> {
    let mut out = spec.clone();
    for n in out.nodes.iter_mut().filter(|n| n.kind.is_learned()) {
        let ld = profile
            .get(&n.id)
            .ok_or_else(|| Error::Arch(format!("density profile has no entry for {}", n.id)))?;
        if ld.k != n.weight_count() {
            return Err(Error::Arch(format!(
                "profile counts {} weights for {} but the spec has {}",
                ld.k,
                n.id,
                n.weight_count()
            )));
        }
        n.in_channels = scaled_channels(n.in_channels, ld.nonzeros(), ld.k);
        if n.role != Role::HeadOutputFixed {
            n.out_channels = scaled_channels(n.out_channels, ld.nonzeros(), ld.k);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Min,
    Max,
}

impl Strategy {
    fn pick(self, a: usize, b: usize) -> usize {
        match self {
            Strategy::Min => a.min(b),
            Strategy::Max => a.max(b),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Strategy::Min),
            "max" => Ok(Strategy::Max),
            other => Err(Error::invalid("strategy", format!("expected min or max, got {other}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Min => "min",
            Strategy::Max => "max",
        })
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[rb] = ra;
        }
    }
}

#[derive(Default, Clone)]
struct Group {
    /// Widths that may not change, with the node that pins them.
    fixed: Vec<(usize, usize)>,
    provisional: Vec<usize>,
    /// Concat nodes whose output lands in this group.
    concats: Vec<usize>,
}

struct Resolver<'a> {
    spec: &'a ArchSpec,
    strategy: Strategy,
    uf: UnionFind,
    groups: Vec<Group>,
    memo: Vec<Option<usize>>,
}

fn in_port(i: usize) -> usize {
    2 * i
}

fn out_port(i: usize) -> usize {
    2 * i + 1
}

impl Resolver<'_> {
    fn width(&mut self, port: usize) -> Result<usize> {
        let g = self.uf.find(port);
        if let Some(v) = self.memo[g] {
            return Ok(v);
        }
        let group = self.groups[g].clone();
        let mut pinned: Option<(usize, usize)> = None;
        for &(w, node) in &group.fixed {
            pinned = Some(self.agree(pinned, (w, node))?);
        }
        for &c in &group.concats {
            let mut sum = 0;
            for p in self.spec.producers(&self.spec.nodes[c].id) {
                let pi = self.spec.index_of(p).expect("validated edge");
                sum += self.width(out_port(pi))?;
            }
            pinned = Some(self.agree(pinned, (sum, c))?);
        }
        let v = match pinned {
            Some((w, _)) => w,
            None => group
                .provisional
                .iter()
                .copied()
                .reduce(|a, b| self.strategy.pick(a, b))
                .ok_or_else(|| Error::Arch("channel group without a producer".into()))?,
        };
        self.memo[g] = Some(v);
        Ok(v)
    }

    fn agree(&self, have: Option<(usize, usize)>, new: (usize, usize)) -> Result<(usize, usize)> {
        match have {
            Some((w, node)) if w != new.0 => Err(Error::Unresolvable {
                from: self.spec.nodes[node].id.clone(),
                to: self.spec.nodes[new.1].id.clone(),
                msg: format!("fixed widths {w} and {} cannot both hold", new.0),
            }),
            Some(h) => Ok(h),
            None => Ok(new),
        }
    }
}

/// Make every edge of a provisional spec channel-consistent.
///
/// Each set of ports that must share a width (a producer, its simple
/// consumers, and anything reached through pass-through nodes) takes the
/// strategy's extremum of the provisional widths. Fixed widths (inputs,
/// sinks, head outputs) override the extremum. Concat outputs are the sum
/// of their producers.
pub fn unify_channels(provisional: &ArchSpec, strategy: Strategy) -> Result<ArchSpec> {
    let spec = provisional;
    let n = spec.nodes.len();
    let mut uf = UnionFind((0..2 * n).collect());
    for (i, node) in spec.nodes.iter().enumerate() {
        if node.kind.is_pass_through() || node.kind == NodeKind::Add {
            uf.union(in_port(i), out_port(i));
        }
    }
    for e in &spec.edges {
        let (Some(a), Some(b)) = (spec.index_of(&e.from), spec.index_of(&e.to)) else {
            return Err(Error::Arch(format!("edge {} -> {} references an unknown node", e.from, e.to)));
        };
        if spec.nodes[b].kind != NodeKind::Concat {
            uf.union(out_port(a), in_port(b));
        }
    }
    let mut groups = vec![Group::default(); 2 * n];
    for (i, node) in spec.nodes.iter().enumerate() {
        let gi = uf.find(in_port(i));
        let go = uf.find(out_port(i));
        match &node.kind {
            NodeKind::Input => groups[go].fixed.push((node.out_channels, i)),
            NodeKind::Sink => groups[gi].fixed.push((node.in_channels, i)),
            NodeKind::Concat => groups[go].concats.push(i),
            k if k.is_learned() => {
                groups[gi].provisional.push(node.in_channels);
                if node.role == Role::HeadOutputFixed {
                    groups[go].fixed.push((node.out_channels, i));
                } else {
                    groups[go].provisional.push(node.out_channels);
                }
            }
            _ => {}
        }
    }
    let mut r = Resolver {
        spec,
        strategy,
        uf,
        groups,
        memo: vec![None; 2 * n],
    };
    let mut out = spec.clone();
    for i in 0..n {
        let node = &spec.nodes[i];
        let (cin, cout) = match node.kind {
            NodeKind::Concat => {
                let w = r.width(out_port(i))?;
                (w, w)
            }
            NodeKind::Input => (node.in_channels, node.out_channels),
            _ => (r.width(in_port(i))?, r.width(out_port(i))?),
        };
        out.nodes[i].in_channels = cin;
        out.nodes[i].out_channels = cout;
    }
    out.validate()?;
    Ok(out)
}

/// Shrink and unify in one go.
pub fn compress(spec: &ArchSpec, profile: &DensityProfile, strategy: Strategy) -> Result<ArchSpec> {
    unify_channels(&provisional_spec(spec, profile)?, strategy)
}

/// Fresh He-initialised parameters for a (compact) spec.
pub fn rebuild_model(spec: &ArchSpec, init_seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    Ok(init_params(spec, init_seed))
}
