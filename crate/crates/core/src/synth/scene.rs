use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValue};
use crate::error::{Error, Result};
use crate::fusion::SceneInput;
use crate::geo::normalize_angle;
use crate::metrics::Class;
use crate::tensor::Tensor;

const LANE_WIDTH_M: f64 = 3.5;
const CROSSING_HALF_LEN_M: f64 = 2.5;
const SUPERSAMPLE: usize = 4;

/// BEV coverage around the ego vehicle, named `longitudinal x lateral`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BevRange {
    #[serde(rename = "60x30")]
    R60x30,
    #[serde(rename = "60x60")]
    R60x60,
    #[serde(rename = "120x60")]
    R120x60,
}

impl BevRange {
    pub const ALL: [BevRange; 3] = [BevRange::R60x30, BevRange::R60x60, BevRange::R120x60];

    /// (longitudinal, lateral) meters.
    pub fn extent_m(self) -> (f64, f64) {
        match self {
            BevRange::R60x30 => (60.0, 30.0),
            BevRange::R60x60 => (60.0, 60.0),
            BevRange::R120x60 => (120.0, 60.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BevRange::R60x30 => "60x30",
            BevRange::R60x60 => "60x60",
            BevRange::R120x60 => "120x60",
        }
    }
}

impl fmt::Display for BevRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BevRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "60x30" | "30x60" => Ok(BevRange::R60x30),
            "60x60" => Ok(BevRange::R60x60),
            "120x60" | "60x120" => Ok(BevRange::R120x60),
            _ => Err(Error::Config(format!(
                "unknown BEV range {s:?} (expected 60x30, 60x60 or 120x60)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTag {
    Occluded,
    TreeCovered,
    Clean,
}

impl ScenarioTag {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioTag::Occluded => "occluded",
            ScenarioTag::TreeCovered => "tree_covered",
            ScenarioTag::Clean => "clean",
        }
    }
}

/// Generator settings. `(spec, index)` fully determines a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// BEV grid rows (lateral).
    pub height: usize,
    /// BEV grid columns (longitudinal).
    pub width: usize,
    /// Onboard feature channels.
    pub channels: usize,
    /// `None` cycles through [`BevRange::ALL`] by sample index.
    pub bev_range: Option<BevRange>,
    pub n_dividers: (usize, usize),
    pub n_crossings: (usize, usize),
    pub cross_road_prob: f64,
    pub occluders: (usize, usize),
    pub occluder_sector_deg: f64,
    pub occluder_distance_m: (f64, f64),
    /// Per-axis σ of the satellite registration error, meters.
    pub sat_offset_sigma: f64,
    /// Mean fraction of the tile painted over by trees.
    pub tree_occlusion_fraction: f64,
    /// Fraction of each tile with satellite data.
    pub sat_coverage: f64,
    /// Onboard signal decay length λ, meters.
    pub decay_lambda: f64,
    /// Length scale of range-dependent cell dropout; `None` disables it.
    pub dropout_lambda: Option<f64>,
    /// Relative noise on the onboard code.
    pub bev_noise: f64,
    /// Range-independent additive noise on observed cells.
    pub noise_floor: f64,
    pub texture_noise: f64,
    /// Seed of the fixed class→feature code shared by all samples.
    pub code_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 20,
            width: 40,
            channels: 8,
            bev_range: None,
            n_dividers: (1, 3),
            n_crossings: (1, 3),
            cross_road_prob: 0.4,
            occluders: (1, 3),
            occluder_sector_deg: 30.0,
            occluder_distance_m: (4.0, 15.0),
            sat_offset_sigma: 1.5,
            tree_occlusion_fraction: 0.1,
            sat_coverage: 0.9,
            decay_lambda: 20.0,
            dropout_lambda: Some(60.0),
            bev_noise: 0.5,
            noise_floor: 0.25,
            texture_noise: 0.03,
            code_seed: 7,
        }
    }
}

impl SceneSpec {
    /// No registration error, trees, gaps, occluders, dropout or noise.
    pub fn clean() -> Self {
        Self {
            occluders: (0, 0),
            sat_offset_sigma: 0.0,
            tree_occlusion_fraction: 0.0,
            sat_coverage: 1.0,
            dropout_lambda: None,
            bev_noise: 0.0,
            noise_floor: 0.0,
            texture_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("scene grid and channels must be positive".into());
        }
        for (name, f) in [
            ("tree_occlusion_fraction", self.tree_occlusion_fraction),
            ("sat_coverage", self.sat_coverage),
            ("cross_road_prob", self.cross_road_prob),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        if self.n_dividers.0 > self.n_dividers.1
            || self.n_crossings.0 > self.n_crossings.1
            || self.occluders.0 > self.occluders.1
            || self.occluder_distance_m.0 > self.occluder_distance_m.1
        {
            return bad("range settings need min <= max".into());
        }
        if !(self.decay_lambda > 0.0) || self.dropout_lambda.is_some_and(|l| !(l > 0.0)) {
            return bad("length scales must be positive".into());
        }
        if self.sat_offset_sigma < 0.0 || self.bev_noise < 0.0 || self.noise_floor < 0.0 || self.texture_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    pub fn range_for(&self, index: usize) -> BevRange {
        self.bev_range.unwrap_or(BevRange::ALL[index % 3])
    }

    /// Grid cell size in meters: (row, col).
    pub fn cell_m(&self, range: BevRange) -> (f64, f64) {
        let (lon, lat) = range.extent_m();
        (lat / self.height as f64, lon / self.width as f64)
    }

    /// Cell centre in ego-frame meters `(u, v)`: longitudinal, lateral.
    pub fn cell_center(&self, range: BevRange, row: usize, col: usize) -> (f64, f64) {
        let (lon, lat) = range.extent_m();
        let (ch, cw) = self.cell_m(range);
        ((col as f64 + 0.5) * cw - lon / 2.0, (row as f64 + 0.5) * ch - lat / 2.0)
    }
}

impl KeyValue for SceneSpec {
    fn set_key(&mut self, key: &str, v: &str) -> Result<bool> {
        use config::{range, value};
        match key {
            "seed" => self.seed = value(key, v)?,
            "height" => self.height = value(key, v)?,
            "width" => self.width = value(key, v)?,
            "channels" => self.channels = value(key, v)?,
            "bev_range" => {
                self.bev_range = if v == "mixed" { None } else { Some(value(key, v)?) };
            }
            "n_dividers" => self.n_dividers = range(key, v)?,
            "n_crossings" => self.n_crossings = range(key, v)?,
            "cross_road_prob" => self.cross_road_prob = value(key, v)?,
            "occluders" => self.occluders = range(key, v)?,
            "occluder_sector_deg" => self.occluder_sector_deg = value(key, v)?,
            "occluder_distance_m" => self.occluder_distance_m = range(key, v)?,
            "sat_offset_sigma" => self.sat_offset_sigma = value(key, v)?,
            "tree_occlusion_fraction" => self.tree_occlusion_fraction = value(key, v)?,
            "sat_coverage" => self.sat_coverage = value(key, v)?,
            "decay_lambda" => self.decay_lambda = value(key, v)?,
            "dropout_lambda" => {
                self.dropout_lambda = if v == "off" { None } else { Some(value(key, v)?) };
            }
            "bev_noise" => self.bev_noise = value(key, v)?,
            "noise_floor" => self.noise_floor = value(key, v)?,
            "texture_noise" => self.texture_noise = value(key, v)?,
            "code_seed" => self.code_seed = value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Ellipse {
    u: f64,
    v: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.u, v - self.v);
        let x = c * du + s * dv;
        let y = -s * du + c * dv;
        (x / self.a).powi(2) + (y / self.b).powi(2) <= 1.0
    }
}

/// Road geometry of one scene in ego-frame meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Main-road centreline `v = c0 + c1·u + c2·u²`.
    pub centerline: [f64; 3],
    pub lanes: usize,
    pub half_width: f64,
    /// Crossing road `(u0, half width)`, running laterally.
    pub cross_road: Option<(f64, f64)>,
    /// Longitudinal centres of pedestrian crossings on the main road.
    pub crossings: Vec<f64>,
    /// Background texture as `(amplitude, k_u, k_v, phase)` waves.
    waves: Vec<[f64; 4]>,
}

impl Layout {
    fn random(rng: &mut ChaCha8Rng, spec: &SceneSpec, range: BevRange) -> Self {
        let (lon, lat) = range.extent_m();
        let dividers = rng.gen_range(spec.n_dividers.0..=spec.n_dividers.1);
        let lanes = dividers + 1;
        let half_width = lanes as f64 * LANE_WIDTH_M / 2.0 + 0.5;
        let c0 = rng.gen_range(-0.25..0.25) * (lat / 2.0 - half_width).max(0.0) * 2.0;
        let c1 = rng.gen_range(-0.08..0.08);
        let c2 = rng.gen_range(-1.0..1.0) * 0.05 / lon;
        let cross_road = rng
            .gen_bool(spec.cross_road_prob)
            .then(|| (rng.gen_range(-0.35..0.35) * lon, rng.gen_range(4.0..7.5)));
        let n_cross = rng.gen_range(spec.n_crossings.0..=spec.n_crossings.1);
        let mut crossings = Vec::with_capacity(n_cross);
        for _ in 0..n_cross {
            let uc = match cross_road {
                Some((u0, hw)) if rng.gen_bool(0.5) => {
                    u0 + if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * (hw + CROSSING_HALF_LEN_M + 0.5)
                }
                _ => rng.gen_range(-0.4..0.4) * lon,
            };
            crossings.push(uc);
        }
        let waves = (0..3)
            .map(|_| {
                let k = 2.0 * PI / rng.gen_range(8.0..30.0);
                let dir = rng.gen_range(0.0..PI);
                [
                    rng.gen_range(0.02..0.06),
                    k * dir.cos(),
                    k * dir.sin(),
                    rng.gen_range(0.0..2.0 * PI),
                ]
            })
            .collect();
        Self {
            centerline: [c0, c1, c2],
            lanes,
            half_width,
            cross_road,
            crossings,
            waves,
        }
    }

    pub fn center(&self, u: f64) -> f64 {
        let [c0, c1, c2] = self.centerline;
        c0 + c1 * u + c2 * u * u
    }

    fn sd_main(&self, u: f64, v: f64) -> f64 {
        (v - self.center(u)).abs() - self.half_width
    }

    /// Signed lateral distance to the drivable-area edge (negative inside).
    pub fn sd_road(&self, u: f64, v: f64) -> f64 {
        let main = self.sd_main(u, v);
        match self.cross_road {
            Some((u0, hw)) => main.min((u - u0).abs() - hw),
            None => main,
        }
    }

    fn in_junction(&self, u: f64) -> bool {
        self.cross_road.is_some_and(|(u0, hw)| (u - u0).abs() < hw)
    }

    fn divider_offsets(&self) -> impl Iterator<Item = f64> + '_ {
        (1..self.lanes).map(move |i| -self.half_width + 0.5 + i as f64 * LANE_WIDTH_M)
    }

    fn in_crossing(&self, u: f64, v: f64) -> bool {
        self.sd_main(u, v) <= 0.0
            && !self.in_junction(u)
            && self.crossings.iter().any(|&uc| (u - uc).abs() <= CROSSING_HALF_LEN_M)
    }

    /// Ground-truth class of the cell centred at `(u, v)` with size `(du, dv)`.
    /// Line classes are marked where the line passes through the cell.
    pub fn class_at(&self, u: f64, v: f64, du: f64, dv: f64) -> Class {
        let probes = [
            (u, v),
            (u - du / 2.0, v - dv / 2.0),
            (u + du / 2.0, v - dv / 2.0),
            (u - du / 2.0, v + dv / 2.0),
            (u + du / 2.0, v + dv / 2.0),
        ];
        let crosses = |f: &dyn Fn(f64, f64) -> f64| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &(pu, pv) in &probes {
                let x = f(pu, pv);
                lo = lo.min(x);
                hi = hi.max(x);
            }
            lo <= 0.0 && hi >= 0.0
        };
        if crosses(&|a, b| self.sd_road(a, b)) {
            return Class::Boundary;
        }
        if self.in_crossing(u, v) {
            return Class::Crossing;
        }
        if self.sd_main(u, v) < 0.0
            && !self.in_junction(u)
            && self.divider_offsets().any(|o| crosses(&|a, b| b - self.center(a) - o))
        {
            return Class::Divider;
        }
        Class::Background
    }

    /// Overhead colour of world point `(u, v)` before trees and noise.
    fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let sd = self.sd_road(u, v);
        if sd.abs() < 0.5 {
            return [0.72, 0.72, 0.7];
        }
        if sd > 0.0 {
            if sd < 2.5 {
                return [0.62, 0.58, 0.52];
            }
            let n: f64 = self
                .waves
                .iter()
                .map(|w| w[0] * (w[1] * u + w[2] * v + w[3]).sin())
                .sum();
            return [0.36 + n, 0.44 + 1.5 * n, 0.3 + 0.5 * n];
        }
        let lateral = v - self.center(u);
        if self.in_crossing(u, v) && (lateral / 0.6).rem_euclid(2.0) < 1.0 {
            return [0.92, 0.92, 0.9];
        }
        if !self.in_junction(u) && self.sd_main(u, v) < 0.0 && self.divider_offsets().any(|o| (lateral - o).abs() < 0.3)
        {
            return [0.9, 0.88, 0.7];
        }
        [0.27, 0.27, 0.29]
    }
}

/// Per-sample ground truth and applied corruptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub index: usize,
    pub seed: u64,
    pub range: BevRange,
    /// Satellite registration error `(longitudinal, lateral)` in meters: the
    /// render at cell `p` shows the world at `p + offset`.
    pub true_offset_m: [f64; 2],
    /// Warp offset `(Δrow, Δcol)` in cells that undoes the registration error.
    pub ideal_delta_cells: [f64; 2],
    pub tags: Vec<ScenarioTag>,
    pub layout: Layout,
    /// Occluding vehicles as `(bearing rad, distance m)` from the ego.
    pub occluders: Vec<(f64, f64)>,
    /// Onboard cells hidden behind occluders.
    pub occluded: Vec<bool>,
    /// Onboard cells lost to range-dependent dropout.
    pub dropped: Vec<bool>,
    /// Satellite cells under tree cover.
    pub tree: Vec<bool>,
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// Onboard BEV features `[H×W×C]`.
    pub f_bev: Tensor<f32>,
    /// Satellite render `[3×H×W]` in `[0, 1]`.
    pub sat: Tensor<f32>,
    /// Cells with satellite data.
    pub sat_valid: Vec<bool>,
    /// Class per cell, row-major `[H×W]`.
    pub gt: Vec<u8>,
    pub meta: SceneMeta,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.f_bev.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.f_bev.shape()[1]
    }

    pub fn input(&self) -> SceneInput<f32> {
        SceneInput {
            f_bev: self.f_bev.clone(),
            sat: self.sat.clone(),
        }
    }

    /// Satellite relevance labels: covered and not under trees.
    pub fn relevance(&self) -> Vec<bool> {
        self.sat_valid
            .iter()
            .zip(&self.meta.tree)
            .map(|(&v, &t)| v && !t)
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG seed of sample `index` under base seed `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64))
}

fn class_code(spec: &SceneSpec) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.code_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..spec.channels)
        .map(|_| [0; 4].map(|_| normal.sample(&mut rng)))
        .collect()
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 3.0 * sigma {
            return x;
        }
    }
}

/// Draws sample `index` of `spec`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<SceneSample> {
    spec.validate()?;
    let seed = sample_seed(spec.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = spec.range_for(index);
    let (lon, _) = range.extent_m();
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let plane = h * w;
    let (cell_v, cell_u) = spec.cell_m(range);
    let layout = Layout::random(&mut rng, spec, range);

    let off_u = truncated_normal(&mut rng, spec.sat_offset_sigma);
    let off_v = truncated_normal(&mut rng, spec.sat_offset_sigma);

    let centers: Vec<(f64, f64)> = (0..plane).map(|i| spec.cell_center(range, i / w, i % w)).collect();
    let gt: Vec<u8> = centers
        .iter()
        .map(|&(u, v)| layout.class_at(u, v, cell_u, cell_v) as u8)
        .collect();

    // trees hug the road edges so that they hide map elements
    let tree_target = if rng.gen_bool(0.5) {
        rng.gen_range(0.0..=4.0 * spec.tree_occlusion_fraction).min(1.0) * plane as f64
    } else {
        0.0
    };
    let mut trees: Vec<Ellipse> = Vec::new();
    let mut tree = vec![false; plane];
    let mut covered = 0usize;
    while (covered as f64) < tree_target && trees.len() < 200 {
        let u = rng.gen_range(-lon / 2.0..lon / 2.0);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let v = layout.center(u) + side * (layout.half_width + rng.gen_range(-3.0..4.0));
        let e = Ellipse {
            u,
            v,
            a: rng.gen_range(2.0..5.0),
            b: rng.gen_range(2.0..5.0),
            angle: rng.gen_range(0.0..PI),
        };
        for (i, &(cu, cv)) in centers.iter().enumerate() {
            if !tree[i] && e.contains(cu, cv) {
                tree[i] = true;
                covered += 1;
            }
        }
        trees.push(e);
    }
    let tree_shade: f64 = rng.gen_range(-0.04..0.04);

    // coverage gap: the cells furthest along a random direction
    let phi = rng.gen_range(0.0..2.0 * PI);
    let mut order: Vec<usize> = (0..plane).collect();
    let proj = |i: usize| centers[i].0 * phi.cos() + centers[i].1 * phi.sin();
    order.sort_by(|&a, &b| proj(a).total_cmp(&proj(b)).then(a.cmp(&b)));
    let n_invalid = ((1.0 - spec.sat_coverage) * plane as f64).round() as usize;
    let mut sat_valid = vec![true; plane];
    for &i in order.iter().rev().take(n_invalid) {
        sat_valid[i] = false;
    }

    let texture = Normal::new(0.0, spec.texture_noise.max(1e-12)).expect("finite noise");
    let mut sat = vec![0.0f32; 3 * plane];
    for (i, &(u, v)) in centers.iter().enumerate() {
        let mut acc = [0.0f64; 3];
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let du = ((sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5) * cell_u;
                let dv = ((sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5) * cell_v;
                let (pu, pv) = (u + du, v + dv);
                let col = if trees.iter().any(|e| e.contains(pu, pv)) {
                    [0.18 + tree_shade, 0.36 + tree_shade, 0.14]
                } else {
                    layout.color_at(pu + off_u, pv + off_v)
                };
                for k in 0..3 {
                    acc[k] += col[k];
                }
            }
        }
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for k in 0..3 {
            let noise = if spec.texture_noise > 0.0 {
                texture.sample(&mut rng)
            } else {
                0.0
            };
            let val = if sat_valid[i] {
                (acc[k] / n + noise).clamp(0.0, 1.0)
            } else {
                0.0
            };
            sat[k * plane + i] = val as f32;
        }
    }

    let n_occ = rng.gen_range(spec.occluders.0..=spec.occluders.1);
    let half_sector = spec.occluder_sector_deg.to_radians() / 2.0;
    let occluders: Vec<(f64, f64)> = (0..n_occ)
        .map(|_| {
            (
                rng.gen_range(-PI..PI),
                rng.gen_range(spec.occluder_distance_m.0..=spec.occluder_distance_m.1),
            )
        })
        .collect();
    let code = class_code(spec);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut f_bev = vec![0.0f32; plane * c];
    let mut occluded = vec![false; plane];
    let mut dropped = vec![false; plane];
    for (i, &(u, v)) in centers.iter().enumerate() {
        let d = (u * u + v * v).sqrt();
        let bearing = v.atan2(u);
        occluded[i] = occluders
            .iter()
            .any(|&(theta, r0)| d > r0 && normalize_angle(bearing - theta).abs() <= half_sector);
        let p_drop = spec.dropout_lambda.map_or(0.0, |l| 1.0 - (-d / l).exp());
        dropped[i] = p_drop > 0.0 && rng.gen_bool(p_drop.min(1.0));
        if occluded[i] || dropped[i] {
            continue;
        }
        let a = (-d / spec.decay_lambda).exp();
        let class = gt[i] as usize;
        for (k, row) in code.iter().enumerate() {
            let mut x = a * row[class];
            if spec.bev_noise > 0.0 {
                x += a * spec.bev_noise * unit.sample(&mut rng);
            }
            if spec.noise_floor > 0.0 {
                x += spec.noise_floor * unit.sample(&mut rng);
            }
            f_bev[i * c + k] = x as f32;
        }
    }

    let mut tags = Vec::new();
    if occluded.iter().any(|&o| o) {
        tags.push(ScenarioTag::Occluded);
    }
    if tree.iter().filter(|&&t| t).count() as f64 >= 0.02 * plane as f64 {
        tags.push(ScenarioTag::TreeCovered);
    }
    if tags.is_empty() {
        tags.push(ScenarioTag::Clean);
    }

    Ok(SceneSample {
        f_bev: Tensor::new(&[h, w, c], f_bev)?,
        sat: Tensor::new(&[3, h, w], sat)?,
        sat_valid,
        gt,
        meta: SceneMeta {
            index,
            seed,
            range,
            true_offset_m: [off_u, off_v],
            ideal_delta_cells: [-off_v / cell_v, -off_u / cell_u],
            tags,
            layout,
            occluders,
            occluded,
            dropped,
            tree,
        },
    })
}

/// Samples `indices` of `spec`, generated in parallel, returned in order.
pub fn generate_scenes(spec: &SceneSpec, indices: std::ops::Range<usize>) -> Result<Vec<SceneSample>> {
    indices.into_par_iter().map(|i| generate_scene(spec, i)).collect()
}
