//! Two-branch multi-scale feature extractor.
//!
//! Each branch is a small U-Net: three stride-2 encoder convolutions, two
//! decoder stages that upsample and concatenate the matching encoder map,
//! and 1x1 heads projecting every pyramid level to [`FEATURE_CHANNELS`].
//! The satellite and ground branches share the architecture but not the
//! weights. Parameters are grouped into `encoder` (the three encoder
//! convolutions) and `decoder` (everything else).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Graph, NodeId, Real, Tensor};

pub const FEATURE_CHANNELS: usize = 8;
/// Downsampling factor of each pyramid level, coarse to fine.
pub const LEVEL_SCALES: [u32; 3] = [8, 4, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Decoder,
    All,
}

impl Group {
    pub fn contains(self, g: Group) -> bool {
        self == Group::All || self == g
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Group::Encoder),
            "decoder" => Ok(Group::Decoder),
            "all" => Ok(Group::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown parameter group {other:?} (expected encoder, decoder or all)"
            ))),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::All => "all",
        })
    }
}

struct ParamSpec {
    name: &'static str,
    dims: &'static [usize],
    group: Group,
}

const fn spec(name: &'static str, dims: &'static [usize], group: Group) -> ParamSpec {
    ParamSpec { name, dims, group }
}

/// Per-branch parameters in canonical order.
const BRANCH_SPECS: [ParamSpec; 16] = [
    spec("enc.conv1.weight", &[8, 3, 3, 3], Group::Encoder),
    spec("enc.conv1.bias", &[8], Group::Encoder),
    spec("enc.conv2.weight", &[16, 8, 3, 3], Group::Encoder),
    spec("enc.conv2.bias", &[16], Group::Encoder),
    spec("enc.conv3.weight", &[32, 16, 3, 3], Group::Encoder),
    spec("enc.conv3.bias", &[32], Group::Encoder),
    spec("dec.conv1.weight", &[16, 48, 3, 3], Group::Decoder),
    spec("dec.conv1.bias", &[16], Group::Decoder),
    spec("dec.conv2.weight", &[8, 24, 3, 3], Group::Decoder),
    spec("dec.conv2.bias", &[8], Group::Decoder),
    spec("head.l1.weight", &[8, 8, 1, 1], Group::Decoder),
    spec("head.l1.bias", &[8], Group::Decoder),
    spec("head.l2.weight", &[8, 16, 1, 1], Group::Decoder),
    spec("head.l2.bias", &[8], Group::Decoder),
    spec("head.l3.weight", &[8, 32, 1, 1], Group::Decoder),
    spec("head.l3.bias", &[8], Group::Decoder),
];

pub const BRANCHES: [&str; 2] = ["sat", "grd"];

/// Group of a fully qualified name such as `sat.enc.conv1.weight`.
pub fn group_of(name: &str) -> Option<Group> {
    let (_, local) = name.split_once('.')?;
    BRANCH_SPECS
        .iter()
        .find(|s| s.name == local)
        .map(|s| s.group)
}

/// Parameters of both branches, keyed by fully qualified name
/// (`sat.` or `grd.` prefix). Iteration order is the canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    fn from_fn(mut f: impl FnMut(&str, &ParamSpec) -> Tensor) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for b in BRANCHES {
            for s in &BRANCH_SPECS {
                let name = format!("{b}.{}", s.name);
                tensors.push(f(&name, s));
                names.push(name);
            }
        }
        ModelParams { names, tensors }
    }

    pub fn zeros() -> Self {
        Self::from_fn(|_, s| Tensor::zeros(s.dims))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Replaces a tensor, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if self.tensors[i].dims() != value.dims() {
            return Err(Error::shape(
                "set_param",
                format!(
                    "{name}: expected {:?}, got {:?}",
                    self.tensors[i].dims(),
                    value.dims()
                ),
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Inserts every parameter into `g` as a trainable leaf.
    pub fn to_graph(&self, g: &mut Graph) -> ModelNodes {
        ModelNodes {
            ids: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Inserts every parameter as a constant.
    pub fn to_graph_frozen(&self, g: &mut Graph) -> ModelNodes {
        ModelNodes {
            ids: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Graph handles of a [`ModelParams`], in canonical order.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub ids: Vec<NodeId>,
}

impl ModelNodes {
    fn branch(&self, branch: Branch) -> &[NodeId] {
        let n = BRANCH_SPECS.len();
        match branch {
            Branch::Sat => &self.ids[..n],
            Branch::Grd => &self.ids[n..],
        }
    }

    /// Gradients of every parameter after `g.backward`, zeros where absent.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.ids.iter().map(|&id| g.grad_or_zeros(id)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Sat,
    Grd,
}

/// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_params(seed: u64) -> ModelParams {
    ModelParams::from_fn(|name, s| {
        if s.dims.len() == 1 {
            return Tensor::zeros(s.dims);
        }
        let fan_in: usize = s.dims[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        // Keyed on the spec name only, so both branches start identical.
        let spec_name = name.split_once('.').map_or(name, |(_, n)| n);
        let tag = spec_name
            .bytes()
            .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        let mut rng = seed::rng(seed, &[0x1a17, tag]);
        Tensor::from_fn(s.dims, |_| rng.gen_range(-bound..bound) as Real)
    })
}

/// Parameters of `group`, in canonical order.
pub fn param_partition(params: &ModelParams, group: Group) -> Vec<(&str, &Tensor)> {
    params
        .iter()
        .filter(|(n, _)| group_of(n).is_some_and(|g| group.contains(g)))
        .collect()
}

pub fn count_params(params: &ModelParams, group: Group) -> usize {
    param_partition(params, group)
        .iter()
        .map(|(_, t)| t.numel())
        .sum()
}

/// Feature maps of one image, coarse to fine, with each level's
/// downsampling factor relative to the input image.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<NodeId>,
    pub scales: Vec<u32>,
}

/// Runs one branch on a `3 x H x W` image node.
pub fn forward_pyramid(
    g: &mut Graph,
    image: NodeId,
    params: &ModelNodes,
    branch: Branch,
) -> Result<FeaturePyramid> {
    let dims = g.value(image).dims().to_vec();
    match dims[..] {
        [3, h, w] if h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0 => {}
        _ => {
            return Err(Error::shape(
                "forward_pyramid",
                format!("expected 3 x H x W with H, W divisible by 8, got {dims:?}"),
            ))
        }
    }
    let p = params.branch(branch);
    // Borders repeat edge values so a feature near the image edge looks like
    // the same feature in the interior.
    let conv = |g: &mut Graph, x: NodeId, w: usize, stride: usize, pad: usize| -> Result<NodeId> {
        let x = if pad > 0 { g.pad_edge(x, pad)? } else { x };
        g.conv2d(x, p[w], p[w + 1], stride, 0)
    };
    let e1 = conv(g, image, 0, 2, 1)?;
    let e1 = g.relu(e1);
    let e2 = conv(g, e1, 2, 2, 1)?;
    let e2 = g.relu(e2);
    let e3 = conv(g, e2, 4, 2, 1)?;
    let e3 = g.relu(e3);
    let u3 = g.upsample2x_nearest(e3)?;
    let c1 = g.concat_channels(u3, e2)?;
    let d1 = conv(g, c1, 6, 1, 1)?;
    let d1 = g.relu(d1);
    let u1 = g.upsample2x_nearest(d1)?;
    let c2 = g.concat_channels(u1, e1)?;
    let d2 = conv(g, c2, 8, 1, 1)?;
    let d2 = g.relu(d2);
    let fine = conv(g, d2, 10, 1, 0)?;
    let mid = conv(g, d1, 12, 1, 0)?;
    let coarse = conv(g, e3, 14, 1, 0)?;
    Ok(FeaturePyramid {
        levels: vec![coarse, mid, fine],
        scales: LEVEL_SCALES.to_vec(),
    })
}

/// Downsampling factors of the identity-feature pyramid. The finest level
/// is the image itself.
pub const IDENTITY_SCALES: [u32; 4] = [8, 4, 2, 1];

/// Replicates RGB into [`FEATURE_CHANNELS`] channels (`c -> c mod 3`).
pub fn replicate_channels(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape(
            "replicate_channels",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let plane = h * w;
    let d = image.data();
    Tensor::new(
        vec![FEATURE_CHANNELS, h, w],
        (0..FEATURE_CHANNELS)
            .flat_map(|k| d[(k % 3) * plane..(k % 3 + 1) * plane].iter().copied())
            .collect(),
    )
}

/// Separable `[1, 2, 1] / 4` blur followed by stride-2 decimation; output
/// pixel `i` is centered on input pixel `2i`, borders clamp.
pub fn binomial_downsample(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let d = x.data();
    let mut rows = vec![0.0 as Real; c * h * wo];
    for ch in 0..c {
        for y in 0..h {
            let src = &d[(ch * h + y) * w..(ch * h + y + 1) * w];
            for i in 0..wo {
                let xc = 2 * i;
                let l = src[xc.saturating_sub(1)];
                let r = src[(xc + 1).min(w - 1)];
                rows[(ch * h + y) * wo + i] = 0.25 * l + 0.5 * src[xc] + 0.25 * r;
            }
        }
    }
    let mut out = vec![0.0 as Real; c * ho * wo];
    for ch in 0..c {
        for j in 0..ho {
            let yc = 2 * j;
            let (yu, yd) = (yc.saturating_sub(1), (yc + 1).min(h - 1));
            for i in 0..wo {
                let at = |y: usize| rows[(ch * h + y) * wo + i];
                out[(ch * ho + j) * wo + i] = 0.25 * at(yu) + 0.5 * at(yc) + 0.25 * at(yd);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Fixed, parameter-free pyramid: replicated channels at scales
/// [`IDENTITY_SCALES`], as constant graph nodes.
pub fn identity_pyramid(g: &mut Graph, image: &Tensor) -> Result<FeaturePyramid> {
    identity_pyramid_with(g, image, &IDENTITY_SCALES)
}

/// Identity pyramid at arbitrary power-of-two `scales`, coarse to fine.
pub fn identity_pyramid_with(
    g: &mut Graph,
    image: &Tensor,
    scales: &[u32],
) -> Result<FeaturePyramid> {
    if scales.is_empty()
        || scales.iter().any(|s| !s.is_power_of_two())
        || scales.windows(2).any(|w| w[0] <= w[1])
    {
        return Err(Error::InvalidArgument(format!(
            "identity pyramid scales must be decreasing powers of two, got {scales:?}"
        )));
    }
    let mut map = replicate_channels(image)?;
    let mut scale = 1u32;
    let mut levels = Vec::new();
    for &s in scales.iter().rev() {
        while scale < s {
            map = binomial_downsample(&map)?;
            scale *= 2;
        }
        levels.push(g.constant(map.clone()));
    }
    levels.reverse();
    Ok(FeaturePyramid {
        levels,
        scales: scales.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub group: Group,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub params: Vec<CheckpointEntry>,
    /// Free-form provenance (scenario, round, seed).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Writes one tensor file per parameter plus `manifest.json`.
pub fn save_checkpoint(
    params: &ModelParams,
    dir: &Path,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, t) in params.iter() {
        let file = format!("{name}.cvgt");
        write_tensor(dir.join(&file), t)?;
        entries.push(CheckpointEntry {
            name: name.to_string(),
            file,
            group: group_of(name).expect("known parameter"),
            dims: t.dims().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        version: 1,
        params: entries,
        meta,
    };
    fs::write(
        dir.join(CHECKPOINT_MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let ctx = |e: Error| e.context(format!("loading checkpoint {}", dir.display()));
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST)).map_err(|e| ctx(e.into()))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| ctx(e.into()))?;
    let mut params = ModelParams::zeros();
    let mut seen = 0;
    for e in &manifest.params {
        let t = read_tensor(dir.join(&e.file)).map_err(ctx)?;
        if t.dims() != e.dims.as_slice() {
            return Err(ctx(Error::Format(format!(
                "{}: manifest dims {:?} != file {:?}",
                e.name,
                e.dims,
                t.dims()
            ))));
        }
        params.set(&e.name, t).map_err(ctx)?;
        seen += 1;
    }
    if seen != params.len() {
        return Err(ctx(Error::Format(format!(
            "expected {} parameters, found {seen}",
            params.len()
        ))));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{rand_tensor, rel_err, OP_TOL};
    use std::collections::BTreeSet;

    #[test]
    fn init_is_deterministic_per_seed() {
        assert_eq!(init_params(1), init_params(1));
        assert_ne!(init_params(1), init_params(2));
        let p = init_params(1);
        // Both branches start from the same draw.
        assert_eq!(p.get("sat.enc.conv1.weight"), p.get("grd.enc.conv1.weight"));
        assert_ne!(p.get("sat.enc.conv1.weight"), p.get("sat.enc.conv2.weight"));
    }

    #[test]
    fn init_variance_matches_kaiming() {
        let p = init_params(7);
        for (name, t) in p.iter() {
            if t.dims().len() == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
                continue;
            }
            let fan_in: usize = t.dims()[1..].iter().product();
            let n = t.numel() as f64;
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = t
                .data()
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            let target = 2.0 / fan_in as f64;
            assert!(
                (var / target - 1.0).abs() < 0.5,
                "{name}: {var} vs {target}"
            );
        }
    }

    #[test]
    fn pyramid_shapes() {
        let p = init_params(0);
        for (size, expect) in [(64, [8, 16, 32]), (128, [16, 32, 64])] {
            let mut g = Graph::new();
            let nodes = p.to_graph(&mut g);
            let img = g.constant(rand_tensor(&[3, size, size], 1).map(|v| v.abs()));
            let pyr = forward_pyramid(&mut g, img, &nodes, Branch::Sat).unwrap();
            let dims: Vec<_> = pyr
                .levels
                .iter()
                .map(|&l| g.value(l).dims().to_vec())
                .collect();
            for (d, e) in dims.iter().zip(expect) {
                assert_eq!(d, &vec![8, e, e]);
            }
        }
        let mut g = Graph::new();
        let nodes = p.to_graph(&mut g);
        let img = g.constant(Tensor::zeros(&[3, 60, 64]));
        assert!(forward_pyramid(&mut g, img, &nodes, Branch::Grd).is_err());
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_pyramid() {
        let p = init_params(3);
        let mut g = Graph::new();
        let nodes = p.to_graph(&mut g);
        let img = g.constant(Tensor::zeros(&[3, 64, 64]));
        let pyr = forward_pyramid(&mut g, img, &nodes, Branch::Grd).unwrap();
        for l in pyr.levels {
            assert!(g.value(l).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn branches_are_independent() {
        let p = init_params(4);
        let mut q = p.clone();
        for (i, n) in p.names().iter().enumerate() {
            if n.starts_with("sat.") {
                q.tensors_mut()[i] = q.tensors()[i].map(|v| v + 0.1);
            }
        }
        let img = rand_tensor(&[3, 64, 64], 5).map(|v| v.abs());
        let run = |params: &ModelParams| {
            let mut g = Graph::new();
            let nodes = params.to_graph(&mut g);
            let x = g.constant(img.clone());
            let pyr = forward_pyramid(&mut g, x, &nodes, Branch::Grd).unwrap();
            pyr.levels
                .iter()
                .map(|&l| g.value(l).clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&p), run(&q));
    }

    /// Plain `f64` conv for the reference network below.
    fn conv_ref(
        x: &[f64],
        dims: (usize, usize, usize),
        w: &[f64],
        wd: &[usize],
        b: &[f64],
        stride: usize,
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let (c, h, wi) = dims;
        let (co, k) = (wd[0], wd[2]);
        let pad = k / 2;
        let (ho, wo) = (
            (h + 2 * pad - k) / stride + 1,
            (wi + 2 * pad - k) / stride + 1,
        );
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                // Edge padding: clamp into the image.
                                let iy = ((y * stride + ky) as isize - pad as isize)
                                    .clamp(0, h as isize - 1)
                                    as usize;
                                let ix = ((xo * stride + kx) as isize - pad as isize)
                                    .clamp(0, wi as isize - 1)
                                    as usize;
                                acc += w[((o * c + ci) * k + ky) * k + kx]
                                    * x[(ci * h + iy) * wi + ix];
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xo] = acc;
                }
            }
        }
        (out, (co, ho, wo))
    }

    fn up_cat_ref(
        a: &[f64],
        ad: (usize, usize, usize),
        b: &[f64],
        bd: (usize, usize, usize),
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let (c, h, w) = ad;
        let mut out = Vec::with_capacity((c + bd.0) * 4 * h * w);
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.push(a[(ch * h + y / 2) * w + x / 2]);
                }
            }
        }
        out.extend_from_slice(b);
        (out, (c + bd.0, 2 * h, 2 * w))
    }

    /// Sum of every pyramid level, computed independently in `f64`.
    fn pyramid_sum_ref(params: &[(Vec<f64>, Vec<usize>)], img: &[f64], hw: usize) -> f64 {
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let layer = |i: usize, x: &[f64], d, s| {
            conv_ref(x, d, &params[i].0, &params[i].1, &params[i + 1].0, s)
        };
        let (e1, d1) = layer(0, img, (3, hw, hw), 2);
        let e1 = relu(e1);
        let (e2, d2) = layer(2, &e1, d1, 2);
        let e2 = relu(e2);
        let (e3, d3) = layer(4, &e2, d2, 2);
        let e3 = relu(e3);
        let (c1, dc1) = up_cat_ref(&e3, d3, &e2, d2);
        let (u1, du1) = layer(6, &c1, dc1, 1);
        let u1 = relu(u1);
        let (c2, dc2) = up_cat_ref(&u1, du1, &e1, d1);
        let (u2, du2) = layer(8, &c2, dc2, 1);
        let u2 = relu(u2);
        [
            layer(10, &u2, du2, 1).0,
            layer(12, &u1, du1, 1).0,
            layer(14, &e3, d3, 1).0,
        ]
        .iter()
        .flatten()
        .sum()
    }

    #[test]
    fn pyramid_gradient_wrt_first_conv() {
        let p = init_params(11);
        let img = rand_tensor(&[3, 16, 16], 2).map(|v| v.abs());
        let k = p.index_of("grd.enc.conv1.weight").unwrap();
        let mut g = Graph::new();
        let nodes = p.to_graph(&mut g);
        let x = g.constant(img.clone());
        let pyr = forward_pyramid(&mut g, x, &nodes, Branch::Grd).unwrap();
        let mut total = g.sum(pyr.levels[0]);
        for &l in &pyr.levels[1..] {
            let s = g.sum(l);
            total = g.add(total, s).unwrap();
        }
        g.backward(total).unwrap();
        let analytic = g.grad_or_zeros(nodes.ids[k]);

        let branch: Vec<(Vec<f64>, Vec<usize>)> = p
            .iter()
            .filter(|(n, _)| n.starts_with("grd."))
            .map(|(_, t)| {
                (
                    t.data().iter().map(|&v| v as f64).collect(),
                    t.dims().to_vec(),
                )
            })
            .collect();
        let img64: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        let h = 1e-6;
        for i in 0..analytic.numel() {
            let mut plus = branch.clone();
            plus[0].0[i] += h;
            let mut minus = branch.clone();
            minus[0].0[i] -= h;
            let num = (pyramid_sum_ref(&plus, &img64, 16) - pyramid_sum_ref(&minus, &img64, 16))
                / (2.0 * h);
            let err = rel_err(analytic.data()[i] as f64, num, 1.0);
            assert!(err < OP_TOL, "weight {i}: {} vs {num}", analytic.data()[i]);
        }
    }

    #[test]
    fn partition_is_complete_and_disjoint() {
        let p = init_params(0);
        let enc: BTreeSet<&str> = param_partition(&p, Group::Encoder)
            .iter()
            .map(|x| x.0)
            .collect();
        let dec: BTreeSet<&str> = param_partition(&p, Group::Decoder)
            .iter()
            .map(|x| x.0)
            .collect();
        let all: BTreeSet<&str> = param_partition(&p, Group::All)
            .iter()
            .map(|x| x.0)
            .collect();
        assert!(enc.is_disjoint(&dec));
        assert_eq!(enc.union(&dec).copied().collect::<BTreeSet<_>>(), all);
        assert_eq!(all.len(), p.len());
        let expected: BTreeSet<String> = ["sat", "grd"]
            .iter()
            .flat_map(|b| {
                (1..=3)
                    .flat_map(move |i| ["weight", "bias"].map(|k| format!("{b}.enc.conv{i}.{k}")))
            })
            .collect();
        assert_eq!(
            enc.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
            expected
        );
        assert!("middle".parse::<Group>().is_err());
    }

    #[test]
    fn parameter_counts_match_enumeration() {
        let p = init_params(0);
        let by_dims: usize = p
            .tensors()
            .iter()
            .map(|t| t.dims().iter().product::<usize>())
            .sum();
        assert_eq!(count_params(&p, Group::All), by_dims);
        assert_eq!(
            count_params(&p, Group::Encoder) + count_params(&p, Group::Decoder),
            count_params(&p, Group::All)
        );
        // Per branch: encoder 8*27+8 + 16*72+16 + 32*144+32; decoder
        // 16*432+16 + 8*216+8 + 8*8+8 + 8*16+8 + 8*32+8.
        assert_eq!(count_params(&p, Group::Encoder), 2 * 6032);
        assert_eq!(count_params(&p, Group::Decoder), 2 * 9136);
        let frac = count_params(&p, Group::Encoder) as f64 / count_params(&p, Group::All) as f64;
        assert!((frac - 6032.0 / 15168.0).abs() < 1e-15);
    }

    #[test]
    fn binomial_downsample_centers_on_even_pixels() {
        let ramp = Tensor::from_fn(&[1, 8, 8], |i| (i % 8) as Real);
        let d = binomial_downsample(&ramp).unwrap();
        assert_eq!(d.dims(), &[1, 4, 4]);
        // Interior samples of a ramp are exact; the left border clamps.
        assert_eq!(d.at3(0, 1, 1), 2.0);
        assert_eq!(d.at3(0, 2, 3), 6.0);
        assert_eq!(d.at3(0, 0, 0), 0.25);
        let constant = Tensor::full(&[2, 6, 6], 0.3);
        let d = binomial_downsample(&constant).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn identity_pyramid_finest_level_is_the_image() {
        let img = rand_tensor(&[3, 16, 16], 8);
        let mut g = Graph::new();
        let pyr = identity_pyramid(&mut g, &img).unwrap();
        let fine = g.value(*pyr.levels.last().unwrap());
        assert_eq!(fine.dims(), &[8, 16, 16]);
        for k in 0..8 {
            for i in 0..256 {
                assert_eq!(fine.data()[k * 256 + i], img.data()[(k % 3) * 256 + i]);
            }
        }
        assert_eq!(g.value(pyr.levels[0]).dims(), &[8, 2, 2]);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let p = init_params(9);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let meta = BTreeMap::from([("round".to_string(), "3".to_string())]);
        save_checkpoint(&p, a.path(), meta).unwrap();
        let (q, m) = load_checkpoint(a.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.params.len(), 32);
        save_checkpoint(&q, b.path(), m.meta.clone()).unwrap();
        for e in fs::read_dir(a.path()).unwrap() {
            let name = e.unwrap().file_name();
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap()
            );
        }
    }
}
