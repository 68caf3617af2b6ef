//! Interpolation networks built from an [`ArchSpec`].
//!
//! The spec graph is evaluated on a [`Tape`]. Head sinks become two AdaCoF
//! parameter sets and an occlusion mask; the baseline path warps both
//! frames and blends them. Enhanced specs additionally warp encoder
//! features, fuse them in the synthesis grid and blend both paths.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::adacof::{self, AdaCofConfig, AdaCofParams};
use crate::arch::{self, encoder_id, init_params, sink_id, ArchSpec, Activation, Node, NodeKind, HEADS};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::sparse_opt::ParamStore;
use crate::tensor::Tensor;

/// Frames `I0`, `I1` and the ground-truth middle frame, each `[3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub i0: Tensor,
    pub i1: Tensor,
    pub gt: Tensor,
}

impl TripletSample {
    pub fn new(i0: Tensor, i1: Tensor, gt: Tensor) -> Result<Self> {
        let (c, _, _) = i0.dims3()?;
        if c != 3 {
            return Err(Error::invalid("triplet", format!("frames need 3 channels, got {c}")));
        }
        crate::tensor::same_shape("triplet", &i0, &i1)?;
        crate::tensor::same_shape("triplet", &i0, &gt)?;
        Ok(Self { i0, i1, gt })
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.i0.shape();
        (s[1], s[2])
    }

    /// Square `size`×`size` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<Self> {
        let (h, w) = self.dims();
        if y + size > h || x + size > w {
            return Err(Error::invalid("crop", format!("window {size} at ({y},{x}) exceeds {h}x{w}")));
        }
        let cut = |t: &Tensor| {
            let mut out = Vec::with_capacity(3 * size * size);
            for c in 0..3 {
                for i in y..y + size {
                    let row = (c * h + i) * w;
                    out.extend_from_slice(&t.data()[row + x..row + x + size]);
                }
            }
            Tensor::new(vec![3, size, size], out)
        };
        Ok(Self {
            i0: cut(&self.i0)?,
            i1: cut(&self.i1)?,
            gt: cut(&self.gt)?,
        })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub i_path1: Var,
    pub i_path2: Option<Var>,
    pub v1: Var,
    pub v2: Option<Var>,
    /// `[weights, alpha, beta]` for each direction.
    pub fwd: [Var; 3],
    pub bwd: [Var; 3],
    pub i_final: Var,
}

/// Concrete values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs {
    pub i_path1: Tensor,
    pub i_path2: Option<Tensor>,
    pub v1: Tensor,
    pub v2: Option<Tensor>,
    pub params_fwd: AdaCofParams,
    pub params_bwd: AdaCofParams,
    pub i_final: Tensor,
}

impl ModelOutputs {
    fn read(tape: &Tape, v: &ForwardVars) -> Self {
        let val = |x: Var| tape.value(x).clone();
        let set = |s: [Var; 3]| AdaCofParams {
            weights: val(s[0]),
            alpha: val(s[1]),
            beta: val(s[2]),
        };
        Self {
            i_path1: val(v.i_path1),
            i_path2: v.i_path2.map(val),
            v1: val(v.v1),
            v2: v.v2.map(val),
            params_fwd: set(v.fwd),
            params_bwd: set(v.bwd),
            i_final: val(v.i_final),
        }
    }
}

/// Hook that evaluates `Warp` nodes: `(tape, node, feature, values so far)`.
pub type WarpHook<'a> = dyn FnMut(&mut Tape, &Node, Var, &BTreeMap<String, Var>) -> Result<Var> + 'a;

/// Evaluate the part of `spec` needed for `outputs`.
///
/// Nodes present in `given` take the supplied value and their ancestors
/// are skipped. Returns the value of every evaluated node.
pub fn run_graph(
    tape: &mut Tape,
    spec: &ArchSpec,
    pvars: &BTreeMap<String, Var>,
    given: &BTreeMap<String, Var>,
    outputs: &[&str],
    warp: &mut WarpHook<'_>,
) -> Result<BTreeMap<String, Var>> {
    let mut needed = BTreeSet::new();
    let mut stack: Vec<String> = outputs.iter().map(|s| s.to_string()).collect();
    while let Some(id) = stack.pop() {
        if !needed.insert(id.clone()) || given.contains_key(&id) {
            continue;
        }
        let node = spec
            .node(&id)
            .ok_or_else(|| Error::Arch(format!("graph has no node {id}")))?;
        stack.extend(spec.producers(&id).into_iter().map(String::from));
        match &node.kind {
            NodeKind::Resize { like } => stack.push(like.clone()),
            NodeKind::Warp { .. } => stack.extend(HEADS.iter().map(|h| sink_id(h))),
            _ => {}
        }
    }

    let mut values: BTreeMap<String, Var> = given.clone();
    for node in &spec.nodes {
        if !needed.contains(&node.id) || values.contains_key(&node.id) {
            continue;
        }
        let ins: Vec<Var> = spec.producers(&node.id).iter().map(|p| values[*p]).collect();
        let v = match &node.kind {
            NodeKind::Input => return Err(Error::Arch(format!("no value supplied for input {}", node.id))),
            NodeKind::Conv {
                stride,
                padding,
                activation,
                ..
            } => {
                let (w, b) = param_pair(pvars, node)?;
                let y = tape.conv2d(ins[0], w, Some(b), *stride, *padding)?;
                activate(tape, y, *activation)?
            }
            NodeKind::Linear { activation } => {
                let (w, b) = param_pair(pvars, node)?;
                let x = tape.reshape(ins[0], vec![node.in_channels, 1])?;
                let y = tape.matmul(w, x)?;
                let b = tape.reshape(b, vec![node.out_channels, 1])?;
                let y = tape.add(y, b)?;
                let y = tape.reshape(y, vec![node.out_channels, 1, 1])?;
                activate(tape, y, *activation)?
            }
            NodeKind::Upsample => tape.upsample2x(ins[0])?,
            NodeKind::AvgPool => tape.avgpool2x(ins[0])?,
            NodeKind::Resize { like } => {
                let (_, h, w) = tape.value(values[like]).dims3()?;
                tape.resize_bilinear(ins[0], h, w)?
            }
            NodeKind::Concat => tape.concat(&ins)?,
            NodeKind::Add => {
                let mut acc = ins[0];
                for &x in &ins[1..] {
                    acc = tape.add(acc, x)?;
                }
                acc
            }
            NodeKind::Warp { .. } => warp(tape, node, ins[0], &values)?,
            NodeKind::Sink => ins[0],
        };
        values.insert(node.id.clone(), v);
    }
    Ok(values)
}

fn param_pair(pvars: &BTreeMap<String, Var>, node: &Node) -> Result<(Var, Var)> {
    let get = |name: String| {
        pvars
            .get(&name)
            .copied()
            .ok_or_else(|| Error::Arch(format!("missing parameter {name}")))
    };
    Ok((get(node.weight_name())?, get(node.bias_name())?))
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::None => Ok(x),
        Activation::Relu => tape.relu(x),
    }
}

/// Average-pool a parameter set `log2(scale)` times; offsets are divided by
/// `scale` so they stay in the coarse level's pixel units.
pub fn rescale_params(params: &AdaCofParams, scale: usize) -> Result<AdaCofParams> {
    let mut p = params.clone();
    let mut s = 1;
    while s < scale {
        p.weights = nn::avgpool2x(&p.weights)?;
        p.alpha = nn::avgpool2x(&p.alpha)?;
        p.beta = nn::avgpool2x(&p.beta)?;
        s *= 2;
    }
    let inv = 1.0 / scale as f64;
    p.alpha.scale(inv);
    p.beta.scale(inv);
    Ok(p)
}

fn rescale_vars(tape: &mut Tape, set: [Var; 3], scale: usize) -> Result<[Var; 3]> {
    let mut out = set;
    let mut s = 1;
    while s < scale {
        for v in out.iter_mut() {
            *v = tape.avgpool2x(*v)?;
        }
        s *= 2;
    }
    if scale > 1 {
        let inv = 1.0 / scale as f64;
        out[1] = tape.mul_const(out[1], inv)?;
        out[2] = tape.mul_const(out[2], inv)?;
    }
    Ok(out)
}

/// Warp every pyramid level with both parameter sets, level `k` being
/// `2^k` times coarser than the frames. Returns `(fwd, bwd)` per level.
pub fn warp_pyramid(
    features: &[Tensor],
    params_fwd: &AdaCofParams,
    params_bwd: &AdaCofParams,
    cfg: &AdaCofConfig,
) -> Result<Vec<(Tensor, Tensor)>> {
    features
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let scale = 1 << k;
            let a = rescale_params(params_fwd, scale)?;
            let b = rescale_params(params_bwd, scale)?;
            Ok((
                adacof::adacof_warp_unchecked(f, &a, cfg)?,
                adacof::adacof_warp_unchecked(f, &b, cfg)?,
            ))
        })
        .collect()
}

/// `V2 * I_path1 + (1 - V2) * I_path2`.
pub fn path_select(i_path1: &Tensor, i_path2: &Tensor, v2: &Tensor) -> Result<Tensor> {
    adacof::occlusion_blend(i_path1, i_path2, v2)
}

/// Bias of the second-mask output at initialisation; favours the warped
/// frame path while the synthesis path is still untrained.
pub const V2_INIT_BIAS: f64 = 2.0;

/// Parameters, their graph, and the AdaCoF geometry they were trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub params: ParamStore,
    pub adacof: AdaCofConfig,
}

impl Model {
    pub fn new(spec: ArchSpec, params: ParamStore, adacof: AdaCofConfig) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        adacof.validate()?;
        for h in HEADS {
            let want = if h == "v1" { 1 } else { adacof.taps() };
            match spec.node(&sink_id(h)) {
                Some(n) if n.in_channels == want => {}
                Some(n) => {
                    return Err(Error::ChannelMismatch {
                        producer: format!("head.{h}"),
                        consumer: n.id.clone(),
                        produced: n.in_channels,
                        expected: want,
                    })
                }
                None => return Err(Error::Arch(format!("spec lacks head {h}"))),
            }
        }
        Ok(Self { spec, params, adacof })
    }

    pub fn init(spec: ArchSpec, adacof: AdaCofConfig, seed: u64) -> Result<Self> {
        let mut params = init_params(&spec, seed);
        if let Some(b) = params.get_mut("head.v2.1.bias") {
            b.data_mut().fill(V2_INIT_BIAS);
        }
        Self::new(spec, params, adacof)
    }

    /// Enhanced model that reuses every parameter of `self` and initialises
    /// only the added modules.
    pub fn enhance(&self, cfg: &arch::EnhanceConfig, seed: u64) -> Result<Self> {
        let spec = arch::enhance_spec(&self.spec, cfg)?;
        let mut fresh = Self::init(spec, self.adacof, seed)?;
        for (name, t) in &self.params {
            fresh.params.insert(name.clone(), t.clone());
        }
        Ok(fresh)
    }

    pub fn is_enhanced(&self) -> bool {
        self.spec.has_node(arch::SINK_SYNTH)
    }

    pub fn has_path_select(&self) -> bool {
        self.spec.has_node(arch::SINK_V2)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Frame sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        let levels = arch::encoder_levels(&self.spec).max(1);
        let rows = (1..)
            .take_while(|r| self.spec.has_node(&format!("grid.down{r}.0")))
            .count()
            + 1;
        1 << (levels.max(rows) - 1)
    }

    fn check_frames(&self, i0: &Tensor, i1: &Tensor) -> Result<()> {
        crate::tensor::same_shape("model input", i0, i1)?;
        let (c, h, w) = i0.dims3()?;
        let m = self.size_multiple();
        if c != 3 || h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "model input",
                format!("frames must be 3×H×W with H, W divisible by {m}, got {c}×{h}×{w}"),
            ));
        }
        Ok(())
    }

    /// Register every parameter on `tape`, trainable or not.
    pub fn load_params(&self, tape: &mut Tape, trainable: bool) -> Result<BTreeMap<String, Var>> {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(name.clone(), t.clone())?
                } else {
                    tape.constant(t.clone())?
                };
                Ok((name.clone(), v))
            })
            .collect()
    }

    /// Full forward pass. With `baseline_only`, enhanced modules are not
    /// evaluated and `I_final` is the warped-frame path.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        pvars: &BTreeMap<String, Var>,
        i0: Var,
        i1: Var,
        baseline_only: bool,
    ) -> Result<ForwardVars> {
        self.check_frames(tape.value(i0), tape.value(i1))?;
        let input = tape.concat(&[i0, i1])?;
        let given = BTreeMap::from([("input".to_string(), input)]);
        let enhanced = self.is_enhanced() && !baseline_only;
        let mut outputs: Vec<String> = HEADS.iter().map(|h| sink_id(h)).collect();
        if enhanced {
            outputs.push(arch::SINK_SYNTH.to_string());
            if self.has_path_select() {
                outputs.push(arch::SINK_V2.to_string());
            }
        }
        let out_refs: Vec<&str> = outputs.iter().map(String::as_str).collect();

        let cfg = self.adacof;
        let mut sets: Option<[[Var; 3]; 2]> = None;
        let mut cache: HashMap<(usize, usize), [Var; 3]> = HashMap::new();
        let mut hook = |tape: &mut Tape, node: &Node, feat: Var, values: &BTreeMap<String, Var>| -> Result<Var> {
            let NodeKind::Warp { direction, scale } = node.kind else {
                unreachable!("hook only sees warp nodes")
            };
            if direction > 1 {
                return Err(Error::Arch(format!("warp {} has direction {direction}", node.id)));
            }
            let base = match sets {
                Some(s) => s,
                None => {
                    let s = head_sets(tape, values)?;
                    sets = Some(s);
                    s
                }
            };
            let set = match cache.get(&(direction, scale)) {
                Some(s) => *s,
                None => {
                    let s = rescale_vars(tape, base[direction], scale)?;
                    cache.insert((direction, scale), s);
                    s
                }
            };
            let (fh, fw) = {
                let s = tape.value(feat).shape();
                (s[1], s[2])
            };
            let ps = tape.value(set[0]).shape();
            if (ps[1], ps[2]) != (fh, fw) {
                return Err(Error::invalid(
                    "warp_pyramid",
                    format!("resolution mismatch at {}: features {fh}×{fw}, parameters {}×{}", node.id, ps[1], ps[2]),
                ));
            }
            tape.adacof_warp(feat, set[0], set[1], set[2], cfg)
        };
        let values = run_graph(tape, &self.spec, pvars, &given, &out_refs, &mut hook)?;

        let [fwd, bwd] = head_sets(tape, &values)?;
        let v1 = tape.sigmoid(values[&sink_id("v1")])?;
        let warped0 = tape.adacof_warp(i0, fwd[0], fwd[1], fwd[2], cfg)?;
        let warped1 = tape.adacof_warp(i1, bwd[0], bwd[1], bwd[2], cfg)?;
        let i_path1 = tape.mask_blend(warped0, warped1, v1)?;

        let (i_path2, v2, i_final) = if enhanced {
            let p2 = values[arch::SINK_SYNTH];
            if self.has_path_select() {
                let v2 = tape.sigmoid(values[arch::SINK_V2])?;
                let fin = tape.mask_blend(i_path1, p2, v2)?;
                (Some(p2), Some(v2), fin)
            } else {
                let sum = tape.add(i_path1, p2)?;
                (Some(p2), None, tape.mul_const(sum, 0.5)?)
            }
        } else {
            (None, None, i_path1)
        };
        Ok(ForwardVars {
            i_path1,
            i_path2,
            v1,
            v2,
            fwd,
            bwd,
            i_final,
        })
    }

    pub fn infer(&self, i0: &Tensor, i1: &Tensor) -> Result<ModelOutputs> {
        self.infer_with(i0, i1, false)
    }

    /// Forward pass of the warped-frame path alone.
    pub fn baseline_forward(&self, i0: &Tensor, i1: &Tensor) -> Result<ModelOutputs> {
        self.infer_with(i0, i1, true)
    }

    fn infer_with(&self, i0: &Tensor, i1: &Tensor, baseline_only: bool) -> Result<ModelOutputs> {
        let mut tape = Tape::new();
        let pvars = self.load_params(&mut tape, false)?;
        let a = tape.constant(i0.clone())?;
        let b = tape.constant(i1.clone())?;
        let vars = self.forward_on(&mut tape, &pvars, a, b, baseline_only)?;
        Ok(ModelOutputs::read(&tape, &vars))
    }

    /// Filter encoder activations (shallowest first) with the 1×1 convs.
    pub fn feature_pyramid(&self, activations: &[Tensor]) -> Result<Vec<Tensor>> {
        let levels = (0..).take_while(|l| self.spec.has_node(&format!("fp{l}"))).count();
        if activations.len() > levels {
            return Err(Error::invalid(
                "feature_pyramid",
                format!("{} levels supplied, {levels} filters configured", activations.len()),
            ));
        }
        let mut tape = Tape::new();
        let pvars = self.load_params(&mut tape, false)?;
        let mut given = BTreeMap::new();
        for (l, a) in activations.iter().enumerate() {
            given.insert(encoder_id(l), tape.constant(a.clone())?);
        }
        let ids: Vec<String> = (0..activations.len()).map(|l| format!("fp{l}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let values = run_graph(&mut tape, &self.spec, &pvars, &given, &refs, &mut no_warp)?;
        Ok(ids.iter().map(|id| tape.value(values[id]).clone()).collect())
    }

    /// Synthesis grid output from warped feature pairs, one pair per level.
    pub fn synthesis_forward(&self, warped_pairs: &[(Tensor, Tensor)]) -> Result<Tensor> {
        if !self.is_enhanced() {
            return Err(Error::Arch("model has no synthesis grid".into()));
        }
        let mut tape = Tape::new();
        let pvars = self.load_params(&mut tape, false)?;
        let mut given = BTreeMap::new();
        for (l, (a, b)) in warped_pairs.iter().enumerate() {
            for (d, t) in [(0, a), (1, b)] {
                let id = format!("warp{l}.{d}");
                let node = self
                    .spec
                    .node(&id)
                    .ok_or_else(|| Error::invalid("synthesis", format!("no pyramid level {l}")))?;
                let (c, _, _) = t.dims3()?;
                if c != node.in_channels {
                    return Err(Error::ChannelMismatch {
                        producer: "injection".into(),
                        consumer: id,
                        produced: c,
                        expected: node.in_channels,
                    });
                }
                given.insert(id, tape.constant(t.clone())?);
            }
        }
        let values = run_graph(&mut tape, &self.spec, &pvars, &given, &[arch::SINK_SYNTH], &mut no_warp)
            .map_err(|e| match e {
                Error::ShapeMismatch { lhs, rhs, .. } => Error::ShapeMismatch {
                    op: "synthesis injection",
                    lhs,
                    rhs,
                },
                other => other,
            })?;
        Ok(tape.value(values[arch::SINK_SYNTH]).clone())
    }
}

fn no_warp(_: &mut Tape, node: &Node, _: Var, _: &BTreeMap<String, Var>) -> Result<Var> {
    Err(Error::Arch(format!("warp node {} needs its input supplied", node.id)))
}

fn head_sets(tape: &mut Tape, values: &BTreeMap<String, Var>) -> Result<[[Var; 3]; 2]> {
    let get = |h: &str| {
        values
            .get(&sink_id(h))
            .copied()
            .ok_or_else(|| Error::Arch(format!("head {h} was not evaluated")))
    };
    let w1 = tape.channel_softmax(get("w1")?)?;
    let w2 = tape.channel_softmax(get("w2")?)?;
    Ok([[w1, get("a1")?, get("b1")?], [w2, get("a2")?, get("b2")?]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{baseline_spec, EnhanceConfig, UNetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        let spec = baseline_spec(
            &UNetConfig {
                widths: vec![4, 6, 8],
                head_width: 4,
            },
            &AdaCofConfig::default(),
        )
        .unwrap();
        Model::init(spec, AdaCofConfig::default(), 1).unwrap()
    }

    fn enhanced() -> Model {
        let cfg = EnhanceConfig {
            grid_widths: vec![4, 4, 4],
            head_width: 4,
            ..EnhanceConfig::default()
        };
        tiny().enhance(&cfg, 2).unwrap()
    }

    #[test]
    fn shapes_and_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::uniform([3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform([3, 16, 16], 0.0, 1.0, &mut rng);
        for m in [tiny(), enhanced()] {
            let out = m.infer(&a, &b).unwrap();
            assert_eq!(out.i_final.shape(), &[3, 16, 16]);
            assert!(out.i_final.is_finite());
            assert!(out.v1.data().iter().all(|&v| v > 0.0 && v < 1.0));
            if let Some(v2) = &out.v2 {
                assert!(v2.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            out.params_fwd.validate(&m.adacof).unwrap();
        }
    }

    #[test]
    fn constant_frames_are_a_fixpoint() {
        let c = Tensor::full([3, 8, 8], 0.3);
        let out = tiny().infer(&c, &c).unwrap();
        assert!(out.i_final.max_abs_diff(&c) < 1e-12);
        let out = enhanced().infer(&c, &c).unwrap();
        assert!(out.i_path1.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn baseline_path_ignores_enhanced_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform([3, 8, 8], 0.0, 1.0, &mut rng);
        let m = enhanced();
        let before = m.baseline_forward(&a, &b).unwrap();
        let mut n = m.clone();
        for (name, t) in n.params.iter_mut() {
            if name.starts_with("grid") || name.starts_with("fp") || name.starts_with("head.v2") {
                t.data_mut().iter_mut().for_each(|x| *x += 1.0);
            }
        }
        let after = n.baseline_forward(&a, &b).unwrap();
        assert_eq!(before, after);
        assert_eq!(before.i_final, tiny().baseline_forward(&a, &b).unwrap().i_final);
    }

    #[test]
    fn rejects_bad_frames() {
        let m = tiny();
        assert!(m.infer(&Tensor::zeros([3, 6, 8]), &Tensor::zeros([3, 6, 8])).is_err());
        assert!(m.infer(&Tensor::zeros([3, 8, 8]), &Tensor::zeros([3, 16, 16])).is_err());
    }

    #[test]
    fn identity_params_warp_pyramid_is_identity() {
        let cfg = AdaCofConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = vec![
            Tensor::uniform([2, 8, 8], -1.0, 1.0, &mut rng),
            Tensor::uniform([3, 4, 4], -1.0, 1.0, &mut rng),
        ];
        let id = AdaCofParams::identity(&cfg, 8, 8);
        let out = warp_pyramid(&feats, &id, &id, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        for (f, (a, b)) in feats.iter().zip(&out) {
            assert!(a.max_abs_diff(f) < 1e-12 && b.max_abs_diff(f) < 1e-12);
        }
    }

    #[test]
    fn offsets_are_pooled_and_rescaled() {
        let cfg = AdaCofConfig::default();
        let mut p = AdaCofParams::identity(&cfg, 4, 4);
        p.alpha = Tensor::full([9, 4, 4], 2.0);
        let half = rescale_params(&p, 2).unwrap();
        assert_eq!(half.alpha.shape(), &[9, 2, 2]);
        assert!(half.alpha.data().iter().all(|&v| v == 1.0));
        half.validate(&cfg).unwrap();
    }

    #[test]
    fn pyramid_widths_follow_prefix() {
        let m = enhanced();
        let acts: Vec<Tensor> = [(4, 16), (6, 8), (8, 4)]
            .iter()
            .map(|&(c, s)| Tensor::full([c, s, s], 0.5))
            .collect();
        let fp = m.feature_pyramid(&acts).unwrap();
        let shapes: Vec<Vec<usize>> = fp.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 16, 16], vec![8, 8, 8], vec![12, 4, 4]]);
        let mut too_many = acts.clone();
        too_many.push(Tensor::full([8, 2, 2], 0.5));
        assert!(m.feature_pyramid(&too_many).is_err());
    }

    #[test]
    fn synthesis_runs_on_zero_injections() {
        let m = enhanced();
        let pairs: Vec<(Tensor, Tensor)> = [(4, 16), (8, 8), (12, 4)]
            .iter()
            .map(|&(c, s)| (Tensor::zeros([c, s, s]), Tensor::zeros([c, s, s])))
            .collect();
        let out = m.synthesis_forward(&pairs).unwrap();
        assert_eq!(out.shape(), &[3, 16, 16]);
        assert!(out.is_finite());
        let mut bad = pairs.clone();
        bad[1].0 = Tensor::zeros([8, 4, 4]);
        assert!(m.synthesis_forward(&bad).is_err());
    }

    #[test]
    fn path_select_cases() {
        let p1 = Tensor::zeros([3, 2, 2]);
        let p2 = Tensor::ones([3, 2, 2]);
        assert_eq!(path_select(&p1, &p2, &Tensor::ones([1, 2, 2])).unwrap(), p1);
        assert_eq!(path_select(&p1, &p2, &Tensor::zeros([1, 2, 2])).unwrap(), p2);
        let half = path_select(&p1, &p2, &Tensor::full([1, 2, 2], 0.5)).unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
        assert!(path_select(&p1, &Tensor::ones([3, 2, 3]), &Tensor::ones([1, 2, 2])).is_err());
    }

    #[test]
    fn crop_window() {
        let t = Tensor::new(vec![3, 4, 4], (0..48).map(f64::from).collect()).unwrap();
        let s = TripletSample::new(t.clone(), t.clone(), t).unwrap();
        let c = s.crop(1, 2, 2).unwrap();
        assert_eq!(c.i0.data()[..4], [6.0, 7.0, 10.0, 11.0]);
        assert!(s.crop(3, 3, 2).is_err());
    }
}
