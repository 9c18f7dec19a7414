//! Procedural aerial/ground image pairs with known poses.
//!
//! A world is a flat textured plane realized as a `3 x 1024 x 1024` raster
//! at 0.2 m/px centered on the world origin. Aerial crops are orthographic
//! resamplings of that raster and ground images are perspective renderings
//! of the same plane, so the ground-to-aerial warp relates them exactly.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    aerial_pixel_to_world, ground_pixel_to_world, AerialGeoref, CameraIntrinsics, Pose,
};
use crate::seed;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Real, Tensor};

pub const TEXTURE_SIZE: usize = 1024;
pub const TEXTURE_RES_M: f64 = 0.2;
pub const AERIAL_SIZE: usize = 128;
pub const GROUND_SIZE: usize = 64;
pub const SKY_VALUE: Real = 0.6;

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 64.0,
        fy: 64.0,
        cx: 32.0,
        cy: 24.0,
        height_m: 1.6,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    UrbanGrid,
    RuralBlobs,
    HighwayStripes,
}

impl EnvironmentKind {
    pub const ALL: [EnvironmentKind; 3] = [Self::UrbanGrid, Self::RuralBlobs, Self::HighwayStripes];

    pub fn name(self) -> &'static str {
        match self {
            Self::UrbanGrid => "urban_grid",
            Self::RuralBlobs => "rural_blobs",
            Self::HighwayStripes => "highway_stripes",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

/// Texture spectrum parameters of an environment class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentClass {
    pub kind: EnvironmentKind,
    /// Street grid period (urban).
    pub grid_period_m: f64,
    /// Blob standard deviation range (rural).
    pub blob_scale_m: (f64, f64),
    /// Lane width (highway).
    pub stripe_period_m: f64,
    /// Weight of the multi-octave value noise mixed into every class.
    pub noise_weight: f64,
}

impl EnvironmentClass {
    pub fn new(kind: EnvironmentKind) -> Self {
        EnvironmentClass {
            kind,
            grid_period_m: 12.0,
            blob_scale_m: (1.5, 5.0),
            stripe_period_m: 3.5,
            noise_weight: match kind {
                EnvironmentKind::UrbanGrid => 0.45,
                EnvironmentKind::RuralBlobs => 0.35,
                EnvironmentKind::HighwayStripes => 0.5,
            },
        }
    }
}

/// A world texture raster with bilinear lookup in world meters.
#[derive(Clone, Debug)]
pub struct Texture {
    raster: Tensor,
    size: usize,
    res_m: f64,
}

impl Texture {
    pub fn from_raster(raster: Tensor, res_m: f64) -> Result<Self> {
        let (c, h, w) = raster.chw()?;
        if c != 3 || h != w {
            return Err(Error::shape(
                "texture",
                format!("expected 3 x N x N, got {:?}", raster.dims()),
            ));
        }
        Ok(Texture {
            raster,
            size: w,
            res_m,
        })
    }

    pub fn raster(&self) -> &Tensor {
        &self.raster
    }

    pub fn res_m(&self) -> f64 {
        self.res_m
    }

    /// Half-width of the textured area in meters.
    pub fn half_extent_m(&self) -> f64 {
        self.size as f64 / 2.0 * self.res_m
    }

    /// Raster coordinates `(col, row)` of a world point.
    pub fn world_to_raster(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.size as f64 / 2.0;
        (x / self.res_m + half, half - y / self.res_m)
    }

    /// Bilinear lookup; coordinates beyond the raster clamp to the edge.
    pub fn lookup(&self, x: f64, y: f64) -> [Real; 3] {
        let (col, row) = self.world_to_raster(x, y);
        let n = self.size;
        let max = (n - 1) as f64;
        let (col, row) = (col.clamp(0.0, max), row.clamp(0.0, max));
        let c0 = (col.floor() as usize).min(n - 2);
        let r0 = (row.floor() as usize).min(n - 2);
        let (fc, fr) = (col - c0 as f64, row - r0 as f64);
        let d = self.raster.data();
        std::array::from_fn(|ch| {
            let p = &d[ch * n * n..];
            let at = |r: usize, c: usize| p[r * n + c] as f64;
            let v = (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
                + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
            v as Real
        })
    }
}

/// Smooth random field with lattice spacing `cell_m`, values in `[0, 1]`.
struct ValueNoise {
    cell_m: f64,
    n: usize,
    origin_m: f64,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(cell_m: f64, extent_m: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = (2.0 * extent_m / cell_m).ceil() as usize + 3;
        ValueNoise {
            cell_m,
            n,
            origin_m: -extent_m - cell_m,
            values: (0..n * n).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let gx = (x - self.origin_m) / self.cell_m;
        let gy = (y - self.origin_m) / self.cell_m;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (ix, iy) = (ix.min(self.n - 2), iy.min(self.n - 2));
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(gx - ix as f64), s(gy - iy as f64));
        let v = |i: usize, j: usize| self.values[j * self.n + i];
        let a = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let b = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        a * (1.0 - ty) + b * ty
    }
}

/// Multi-octave value noise, one field per channel, normalized to `[0, 1]`.
struct Fbm {
    octaves: Vec<[ValueNoise; 3]>,
    amps: Vec<f64>,
}

impl Fbm {
    fn new(extent_m: f64, rng: &mut ChaCha8Rng) -> Self {
        let cells = [32.0, 16.0, 8.0, 4.0, 2.0, 1.0];
        let amps = vec![1.0, 0.8, 0.55, 0.35, 0.22, 0.15];
        let octaves = cells
            .iter()
            .map(|&c| std::array::from_fn(|_| ValueNoise::new(c, extent_m, rng)))
            .collect();
        Fbm { octaves, amps }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let total: f64 = self.amps.iter().sum();
        std::array::from_fn(|ch| {
            self.octaves
                .iter()
                .zip(&self.amps)
                .map(|(o, a)| a * o[ch].at(x, y))
                .sum::<f64>()
                / total
        })
    }
}

fn random_color(rng: &mut ChaCha8Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    std::array::from_fn(|c| (base[c] + rng.gen_range(-spread..spread)).clamp(0.0, 1.0))
}

fn hash_unit(a: i64, b: i64, salt: u64) -> f64 {
    (seed::derive(salt, &[a as u64, b as u64]) >> 11) as f64 / (1u64 << 53) as f64
}

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    color: [f64; 3],
}

/// Generates the world texture of an environment class.
pub fn gen_texture(env: &EnvironmentClass, seed: u64) -> Texture {
    let n = TEXTURE_SIZE;
    let res = TEXTURE_RES_M;
    let extent = n as f64 / 2.0 * res;
    let mut rng = seed::rng(seed, &[0x7e47, env.kind.tag()]);
    let noise = Fbm::new(extent, &mut rng);
    let salt: u64 = rng.gen();
    let mut data = vec![0.0 as Real; 3 * n * n];

    let base: Box<dyn Fn(f64, f64) -> [f64; 3]> = match env.kind {
        EnvironmentKind::UrbanGrid => {
            let period = env.grid_period_m * rng.gen_range(0.9..1.1);
            let road = 0.25 * period;
            let (ox, oy) = (rng.gen_range(0.0..period), rng.gen_range(0.0..period));
            let asphalt = random_color(&mut rng, [0.25, 0.25, 0.27], 0.05);
            let marking = random_color(&mut rng, [0.9, 0.88, 0.7], 0.05);
            let roofs: Vec<[f64; 3]> = (0..8)
                .map(|_| random_color(&mut rng, [0.6, 0.5, 0.45], 0.3))
                .collect();
            Box::new(move |x, y| {
                let (px, py) = ((x - ox).rem_euclid(period), (y - oy).rem_euclid(period));
                let on_road_x = px < road;
                let on_road_y = py < road;
                if on_road_x || on_road_y {
                    let centre = (on_road_x && (px - road / 2.0).abs() < 0.15)
                        || (on_road_y && (py - road / 2.0).abs() < 0.15);
                    if centre && !(on_road_x && on_road_y) {
                        marking
                    } else {
                        asphalt
                    }
                } else {
                    let bx = ((x - ox) / period).floor() as i64;
                    let by = ((y - oy) / period).floor() as i64;
                    // Split blocks into two buildings along a random axis.
                    let split = hash_unit(bx, by, salt) < 0.5;
                    let sub = if split {
                        px > period * 0.62
                    } else {
                        py > period * 0.62
                    };
                    let k = (hash_unit(bx, by + 7919 * sub as i64, salt ^ 1) * roofs.len() as f64)
                        as usize;
                    roofs[k.min(roofs.len() - 1)]
                }
            })
        }
        EnvironmentKind::RuralBlobs => {
            let field = random_color(&mut rng, [0.35, 0.5, 0.25], 0.08);
            let palette: Vec<[f64; 3]> = (0..6)
                .map(|_| random_color(&mut rng, [0.45, 0.45, 0.3], 0.3))
                .collect();
            let count = 900;
            let blobs: Vec<Blob> = (0..count)
                .map(|_| Blob {
                    x: rng.gen_range(-extent..extent),
                    y: rng.gen_range(-extent..extent),
                    sigma: rng.gen_range(env.blob_scale_m.0..env.blob_scale_m.1),
                    color: palette[rng.gen_range(0..palette.len())],
                })
                .collect();
            // Bucket blobs on a coarse grid so each lookup only visits
            // nearby ones.
            let cell = 3.0 * env.blob_scale_m.1;
            let cells = (2.0 * extent / cell).ceil() as usize + 1;
            let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cells * cells];
            for (i, b) in blobs.iter().enumerate() {
                let r = 3.0 * b.sigma;
                let c0 = (((b.x - r + extent) / cell).floor().max(0.0) as usize).min(cells - 1);
                let c1 = (((b.x + r + extent) / cell).floor().max(0.0) as usize).min(cells - 1);
                let r0 = (((b.y - r + extent) / cell).floor().max(0.0) as usize).min(cells - 1);
                let r1 = (((b.y + r + extent) / cell).floor().max(0.0) as usize).min(cells - 1);
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        buckets[rr * cells + cc].push(i);
                    }
                }
            }
            Box::new(move |x, y| {
                let cc = (((x + extent) / cell).floor().max(0.0) as usize).min(cells - 1);
                let rr = (((y + extent) / cell).floor().max(0.0) as usize).min(cells - 1);
                let mut col = field;
                for &i in &buckets[rr * cells + cc] {
                    let b = &blobs[i];
                    let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                    let w = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    if w > 1e-4 {
                        for c in 0..3 {
                            col[c] += w * (b.color[c] - col[c]);
                        }
                    }
                }
                col
            })
        }
        EnvironmentKind::HighwayStripes => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (ct, st) = (theta.cos(), theta.sin());
            let lane = env.stripe_period_m;
            // Dashes sit in 9 m cells with random presence, offset and
            // length, so the along-road direction is not periodic.
            let dash_cell = 9.0;
            let lanes: Vec<[f64; 3]> = (0..5)
                .map(|_| random_color(&mut rng, [0.32, 0.32, 0.34], 0.1))
                .collect();
            let paint = random_color(&mut rng, [0.92, 0.92, 0.85], 0.05);
            Box::new(move |x, y| {
                let across = x * ct + y * st;
                let along = -x * st + y * ct;
                let li = (across / lane).floor();
                let within = across - li * lane;
                let k = (li as i64).rem_euclid(lanes.len() as i64) as usize;
                if within < 0.3 {
                    let m = (along / dash_cell).floor() as i64;
                    let t = along - m as f64 * dash_cell;
                    let present = hash_unit(li as i64, m, salt) < 0.75;
                    let start = 3.0 * hash_unit(li as i64, m, salt ^ 2);
                    let len = 2.0 + 3.0 * hash_unit(li as i64, m, salt ^ 3);
                    if present && t >= start && t < start + len {
                        return paint;
                    }
                }
                lanes[k]
            })
        }
    };

    let nw = env.noise_weight;
    for r in 0..n {
        let y = (n as f64 / 2.0 - r as f64) * res;
        for c in 0..n {
            let x = (c as f64 - n as f64 / 2.0) * res;
            let b = base(x, y);
            let z = noise.at(x, y);
            for ch in 0..3 {
                let v = (1.0 - nw) * b[ch] + nw * z[ch];
                data[(ch * n + r) * n + c] = v.clamp(0.0, 1.0) as Real;
            }
        }
    }
    Texture {
        raster: Tensor::new(vec![3, n, n], data).expect("texture dims"),
        size: n,
        res_m: res,
    }
}

/// Resamples the texture at every aerial pixel's world point.
pub fn render_aerial(texture: &Texture, geo: &AerialGeoref) -> Result<Tensor> {
    let half = texture.half_extent_m();
    let (x0, y0) = aerial_pixel_to_world(0.0, 0.0, geo);
    let (x1, y1) =
        aerial_pixel_to_world((geo.width_px - 1) as f64, (geo.height_px - 1) as f64, geo);
    if x0.min(x1) < -half || x0.max(x1) > half || y0.min(y1) < -half || y0.max(y1) > half {
        return Err(Error::InvalidArgument(format!(
            "aerial crop [{x0:.1}, {x1:.1}] x [{y1:.1}, {y0:.1}] m leaves the {:.1} m texture",
            2.0 * half
        )));
    }
    let (w, h) = (geo.width_px, geo.height_px);
    let mut out = vec![0.0 as Real; 3 * w * h];
    for v in 0..h {
        for u in 0..w {
            let (x, y) = aerial_pixel_to_world(u as f64, v as f64, geo);
            let rgb = texture.lookup(x, y);
            for ch in 0..3 {
                out[(ch * h + v) * w + u] = rgb[ch];
            }
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Perspective rendering of the textured ground plane; pixels at or above
/// the horizon get [`SKY_VALUE`].
pub fn render_ground(
    texture: &Texture,
    pose: &Pose,
    intr: &CameraIntrinsics,
    size: (usize, usize),
) -> Tensor {
    let (h, w) = size;
    let mut out = vec![SKY_VALUE; 3 * w * h];
    for v in 0..h {
        for u in 0..w {
            let hit = ground_pixel_to_world(u as f64, v as f64, pose, intr);
            if !hit.valid {
                continue;
            }
            let rgb = texture.lookup(hit.x_m, hit.y_m);
            for ch in 0..3 {
                out[(ch * h + v) * w + u] = rgb[ch];
            }
        }
    }
    Tensor::new(vec![3, h, w], out).expect("ground dims")
}

/// Half-widths of the uniform initial-pose perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbRange {
    pub xy_m: f64,
    pub yaw_deg: f64,
}

impl Default for PerturbRange {
    fn default() -> Self {
        PerturbRange {
            xy_m: 5.0,
            yaw_deg: 10.0,
        }
    }
}

pub fn sample_init_pose(gt: &Pose, range: &PerturbRange, seed: u64) -> Pose {
    let mut rng = seed::rng(seed, &[0x1417]);
    let mut draw = |half: f64| {
        if half > 0.0 {
            rng.gen_range(-half..=half)
        } else {
            0.0
        }
    };
    let dx = draw(range.xy_m);
    let dy = draw(range.xy_m);
    let dyaw = draw(range.yaw_deg).to_radians();
    Pose::new(gt.x_m + dx, gt.y_m + dy, gt.yaw_rad + dyaw)
}

/// Aerial georeference centered on `init`, snapped to the texture lattice so
/// aerial pixels coincide with texture samples.
pub fn aerial_georef_for(init: &Pose) -> AerialGeoref {
    let snap = |v: f64| (v / TEXTURE_RES_M).round() * TEXTURE_RES_M;
    AerialGeoref {
        mpp: TEXTURE_RES_M,
        center_x_m: snap(init.x_m),
        center_y_m: snap(init.y_m),
        width_px: AERIAL_SIZE,
        height_px: AERIAL_SIZE,
    }
}

#[derive(Clone, Debug)]
pub struct ClientSample {
    pub id: String,
    pub env: EnvironmentKind,
    pub aerial: Tensor,
    pub georef: AerialGeoref,
    pub ground: Tensor,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: Pose,
    pub init_pose: Pose,
}

#[derive(Clone, Debug)]
pub struct ClientDataset {
    pub name: String,
    pub samples: Vec<ClientSample>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenation of several datasets, in order.
    pub fn pooled(name: &str, parts: &[ClientDataset]) -> Self {
        ClientDataset {
            name: name.to_string(),
            samples: parts
                .iter()
                .flat_map(|d| d.samples.iter().cloned())
                .collect(),
        }
    }
}

/// Renders one sample of `texture` at `gt`.
pub fn make_sample(
    id: String,
    env: EnvironmentKind,
    texture: &Texture,
    gt: Pose,
    range: &PerturbRange,
    seed: u64,
) -> Result<ClientSample> {
    let intr = default_intrinsics();
    let init = sample_init_pose(&gt, range, seed);
    let georef = aerial_georef_for(&init);
    Ok(ClientSample {
        id,
        env,
        aerial: render_aerial(texture, &georef)?,
        georef,
        ground: render_ground(texture, &gt, &intr, (GROUND_SIZE, GROUND_SIZE)),
        intrinsics: intr,
        gt_pose: gt,
        init_pose: init,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_clients: usize,
    pub per_client: usize,
    pub test_size: usize,
    pub textures_per_client: usize,
    pub test_textures: usize,
    /// Ground-truth positions are drawn uniformly within this half-width.
    pub pose_extent_m: f64,
    pub init_perturbation: PerturbRange,
    /// Environment of client `i` is `env_assignment[i % len]`.
    pub env_assignment: Vec<EnvironmentKind>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_clients: 4,
            per_client: 200,
            test_size: 100,
            textures_per_client: 4,
            test_textures: 6,
            pose_extent_m: 60.0,
            init_perturbation: PerturbRange::default(),
            env_assignment: EnvironmentKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be >= 1".into()));
        }
        if self.textures_per_client == 0
            || self.test_textures == 0
            || self.env_assignment.is_empty()
        {
            return Err(Error::Config(
                "need at least one texture and one environment".into(),
            ));
        }
        // Aerial crops around perturbed poses must stay on the texture.
        let reach =
            self.pose_extent_m + self.init_perturbation.xy_m + AERIAL_SIZE as f64 * TEXTURE_RES_M;
        if reach >= TEXTURE_SIZE as f64 / 2.0 * TEXTURE_RES_M {
            return Err(Error::Config(format!(
                "pose_extent_m {} too large",
                self.pose_extent_m
            )));
        }
        Ok(())
    }

    pub fn client_env(&self, client: usize) -> EnvironmentKind {
        self.env_assignment[client % self.env_assignment.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub env: EnvironmentKind,
    pub texture_seed: u64,
    pub aerial: String,
    pub ground: String,
    pub georef: AerialGeoref,
    pub gt: Pose,
    pub init: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub client_id: Option<usize>,
    pub environments: Vec<EnvironmentKind>,
    pub sample_count: usize,
    pub texture_seeds: Vec<u64>,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub version: u32,
    pub config: WorldConfig,
    pub mpp: f64,
    pub texture_res_m: f64,
    pub sky_value: f64,
    pub intrinsics: CameraIntrinsics,
    pub aerial_size: [usize; 2],
    pub ground_size: [usize; 2],
    pub clients: Vec<DatasetManifest>,
    pub test: DatasetManifest,
}

/// In-memory generated world: one dataset per client plus the test set.
#[derive(Clone, Debug)]
pub struct GeneratedWorld {
    pub clients: Vec<ClientDataset>,
    pub test: ClientDataset,
    pub manifest: WorldManifest,
}

const TAG_CLIENT: u64 = 0xc1;
const TAG_TEST: u64 = 0x7e;

struct Plan {
    name: String,
    client_id: Option<usize>,
    textures: Vec<(EnvironmentKind, u64)>,
    count: usize,
    seed: u64,
}

fn generate_one(
    plan: &Plan,
    cfg: &WorldConfig,
    dir_name: &str,
) -> Result<(ClientDataset, DatasetManifest)> {
    let mut samples = Vec::with_capacity(plan.count);
    let mut records = Vec::with_capacity(plan.count);
    for (t, &(env, tex_seed)) in plan.textures.iter().enumerate() {
        let texture = gen_texture(&EnvironmentClass::new(env), tex_seed);
        for j in (t..plan.count).step_by(plan.textures.len()) {
            let sample_seed = seed::derive(plan.seed, &[j as u64]);
            let mut rng = seed::rng(sample_seed, &[0x905e]);
            let e = cfg.pose_extent_m;
            let gt = Pose::new(
                rng.gen_range(-e..=e),
                rng.gen_range(-e..=e),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            let id = format!("sample_{j}");
            let s = make_sample(
                id.clone(),
                env,
                &texture,
                gt,
                &cfg.init_perturbation,
                sample_seed,
            )?;
            records.push(SampleRecord {
                id: id.clone(),
                env,
                texture_seed: tex_seed,
                aerial: format!("{dir_name}/{id}.aerial.cvgt"),
                ground: format!("{dir_name}/{id}.ground.cvgt"),
                georef: s.georef,
                gt: s.gt_pose,
                init: s.init_pose,
            });
            samples.push((j, s));
        }
    }
    samples.sort_by_key(|(j, _)| *j);
    records.sort_by_key(|r| {
        r.id.trim_start_matches("sample_")
            .parse::<usize>()
            .unwrap_or(0)
    });
    let envs: BTreeSet<EnvironmentKind> = plan.textures.iter().map(|t| t.0).collect();
    let manifest = DatasetManifest {
        name: plan.name.clone(),
        client_id: plan.client_id,
        environments: envs.into_iter().collect(),
        sample_count: plan.count,
        texture_seeds: plan.textures.iter().map(|t| t.1).collect(),
        seed: plan.seed,
        samples: records,
    };
    let ds = ClientDataset {
        name: plan.name.clone(),
        samples: samples.into_iter().map(|(_, s)| s).collect(),
    };
    Ok((ds, manifest))
}

/// Generates all client datasets and the held-out test set in memory.
///
/// Client `i` draws its textures from `cfg.client_env(i)`; the test set
/// cycles through every environment class with texture seeds no client
/// uses.
pub fn generate_world(cfg: &WorldConfig) -> Result<GeneratedWorld> {
    cfg.validate()?;
    let mut plans = Vec::new();
    for i in 0..cfg.n_clients {
        let env = cfg.client_env(i);
        plans.push(Plan {
            name: format!("client_{i}"),
            client_id: Some(i),
            textures: (0..cfg.textures_per_client)
                .map(|k| {
                    (
                        env,
                        seed::derive(cfg.seed, &[TAG_CLIENT, i as u64, k as u64]),
                    )
                })
                .collect(),
            count: cfg.per_client,
            seed: seed::derive(cfg.seed, &[TAG_CLIENT, i as u64]),
        });
    }
    let test_plan = Plan {
        name: "test".into(),
        client_id: None,
        textures: (0..cfg.test_textures)
            .map(|k| {
                let env = EnvironmentKind::ALL[k % EnvironmentKind::ALL.len()];
                (env, seed::derive(cfg.seed, &[TAG_TEST, k as u64]))
            })
            .collect(),
        count: cfg.test_size,
        seed: seed::derive(cfg.seed, &[TAG_TEST]),
    };

    let mut seen = BTreeSet::new();
    for p in plans.iter().chain(std::iter::once(&test_plan)) {
        for &(_, s) in &p.textures {
            if !seen.insert(s) {
                return Err(Error::Config(format!("texture seed collision {s}")));
            }
        }
    }

    let mut clients = Vec::new();
    let mut manifests = Vec::new();
    for p in &plans {
        let (ds, m) = generate_one(p, cfg, &p.name)?;
        clients.push(ds);
        manifests.push(m);
    }
    let (test, test_manifest) = generate_one(&test_plan, cfg, "test")?;
    let intr = default_intrinsics();
    Ok(GeneratedWorld {
        clients,
        test,
        manifest: WorldManifest {
            version: 1,
            config: cfg.clone(),
            mpp: TEXTURE_RES_M,
            texture_res_m: TEXTURE_RES_M,
            sky_value: SKY_VALUE as f64,
            intrinsics: intr,
            aerial_size: [AERIAL_SIZE, AERIAL_SIZE],
            ground_size: [GROUND_SIZE, GROUND_SIZE],
            clients: manifests,
            test: test_manifest,
        },
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a generated world as
/// `dir/client_<i>/sample_<j>.{aerial,ground}.cvgt`, `dir/test/...` and
/// `dir/manifest.json`.
pub fn write_world(world: &GeneratedWorld, dir: &Path) -> Result<()> {
    let ctx = |e: Error| e.context(format!("writing dataset to {}", dir.display()));
    for (ds, m) in world
        .clients
        .iter()
        .zip(&world.manifest.clients)
        .chain(std::iter::once((&world.test, &world.manifest.test)))
    {
        fs::create_dir_all(dir.join(&ds.name)).map_err(|e| ctx(e.into()))?;
        for (s, r) in ds.samples.iter().zip(&m.samples) {
            write_tensor(dir.join(&r.aerial), &s.aerial).map_err(ctx)?;
            write_tensor(dir.join(&r.ground), &s.ground).map_err(ctx)?;
        }
    }
    let json = serde_json::to_string_pretty(&world.manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json).map_err(|e| ctx(e.into()))?;
    Ok(())
}

/// `generate_world` followed by `write_world`.
pub fn make_client_datasets(cfg: &WorldConfig, out_dir: &Path) -> Result<GeneratedWorld> {
    let world = generate_world(cfg)?;
    write_world(&world, out_dir)?;
    Ok(world)
}

pub fn read_manifest(dir: &Path) -> Result<WorldManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_dataset(dir: &Path, m: &DatasetManifest, intr: &CameraIntrinsics) -> Result<ClientDataset> {
    let samples = m
        .samples
        .iter()
        .map(|r| {
            let ctx = |e: Error| e.context(format!("sample {}/{}", m.name, r.id));
            Ok(ClientSample {
                id: r.id.clone(),
                env: r.env,
                aerial: read_tensor(dir.join(&r.aerial)).map_err(ctx)?,
                georef: r.georef,
                ground: read_tensor(dir.join(&r.ground)).map_err(ctx)?,
                intrinsics: *intr,
                gt_pose: r.gt,
                init_pose: r.init,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientDataset {
        name: m.name.clone(),
        samples,
    })
}

/// Loads a world written by [`write_world`].
pub fn load_world(dir: &Path) -> Result<GeneratedWorld> {
    let manifest = read_manifest(dir)?;
    let clients = manifest
        .clients
        .iter()
        .map(|m| load_dataset(dir, m, &manifest.intrinsics))
        .collect::<Result<Vec<_>>>()?;
    let test = load_dataset(dir, &manifest.test, &manifest.intrinsics)?;
    Ok(GeneratedWorld {
        clients,
        test,
        manifest,
    })
}

/// Loads one sample given the path of either of its files (or the common
/// prefix), locating `manifest.json` two directories up.
pub fn load_sample(path: &Path) -> Result<ClientSample> {
    let file = path
        .file_name()
        .and_then(|f| f.to_str())
        .unwrap_or_default();
    let id = file.split('.').next().unwrap_or_default().to_string();
    let set_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let set = set_dir
        .file_name()
        .and_then(|f| f.to_str())
        .unwrap_or_default()
        .to_string();
    let root = set_dir
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = read_manifest(&root)?;
    let m = manifest
        .clients
        .iter()
        .chain(std::iter::once(&manifest.test))
        .find(|m| m.name == set)
        .ok_or_else(|| Error::InvalidArgument(format!("no dataset named {set:?} in manifest")))?;
    let one = DatasetManifest {
        samples: m.samples.iter().filter(|r| r.id == id).cloned().collect(),
        ..m.clone()
    };
    if one.samples.is_empty() {
        return Err(Error::InvalidArgument(format!("no sample {id:?} in {set}")));
    }
    Ok(load_dataset(&root, &one, &manifest.intrinsics)?
        .samples
        .remove(0))
}
