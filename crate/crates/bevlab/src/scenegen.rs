//! Procedural vector urban scenes and exact multi-resolution rasterization.
//!
//! Ground truth is resolution-free: class geometry is stored as polygons
//! over a node/edge road graph, and rasterization evaluates point-in-geometry
//! at grid sample points. No raster is ever resampled, so masks at any two
//! resolutions agree exactly wherever their sample points coincide.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{downscale_scope, BevScope};
use crate::error::{Error, Result};
use crate::sensors::{CameraModel, PointCloud};
use crate::tensorcore::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["drivable", "divider", "walkway", "crossing"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneClass {
    Drivable = 0,
    Divider = 1,
    Walkway = 2,
    Crossing = 3,
}

impl SceneClass {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "drivable" => Ok(SceneClass::Drivable),
            "divider" => Ok(SceneClass::Divider),
            "walkway" => Ok(SceneClass::Walkway),
            "crossing" => Ok(SceneClass::Crossing),
            other => Err(Error::Parse(format!("unknown class '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }
}

/// Convex polygon (stored counter-clockwise or clockwise; the containment
/// test is winding-agnostic) tagged with its semantic class.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub class: SceneClass,
    pub poly: Vec<(f64, f64)>,
}

/// Axis-aligned obstacle used for sensor occlusion and LiDAR returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleBox {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorScene {
    pub nodes: Vec<(f64, f64)>,
    pub edges: Vec<(usize, usize, f64)>,
    pub elements: Vec<Element>,
    pub obstacles: Vec<ObstacleBox>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    /// Half-extent of the world bound in meters; all geometry stays inside.
    pub world_half: f64,
    pub nodes_x: usize,
    pub nodes_y: usize,
    /// Uniform node jitter in meters.
    pub jitter: f64,
    pub road_width_min: f64,
    pub road_width_max: f64,
    /// Probability of removing a non-bridge edge from the grid graph.
    pub prune_prob: f64,
    pub divider_width: f64,
    pub walkway_width: f64,
    pub walkway_gap: f64,
    pub crossing_prob: f64,
    pub obstacles_min: usize,
    pub obstacles_max: usize,
    pub obstacle_half_min: f64,
    pub obstacle_half_max: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            world_half: 20.0,
            nodes_x: 3,
            nodes_y: 3,
            jitter: 1.5,
            road_width_min: 3.5,
            road_width_max: 6.0,
            prune_prob: 0.3,
            divider_width: 0.5,
            walkway_width: 1.8,
            walkway_gap: 0.3,
            crossing_prob: 0.5,
            obstacles_min: 2,
            obstacles_max: 5,
            obstacle_half_min: 0.6,
            obstacle_half_max: 1.6,
        }
    }
}

/// Per-class binary raster stack bound to a scope. Classes may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub scope: BevScope,
    pub masks: Vec<Vec<u8>>, // [class][v * width + u], values 0/1
}

impl SemanticMap {
    pub fn class_mask(&self, class: SceneClass) -> &[u8] {
        &self.masks[class as usize]
    }

    /// Stack the masks into a (d, w, classes) tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        let (d, w) = (self.scope.depth(), self.scope.width());
        let nc = self.masks.len();
        let mut t = Tensor::zeros(&[d, w, nc]);
        for (c, mask) in self.masks.iter().enumerate() {
            for (i, &m) in mask.iter().enumerate() {
                t.data_mut()[i * nc + c] = m as f64;
            }
        }
        t
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, salt))
}

/// Derived sub-seed for independent random streams.
pub fn mix(seed: u64, salt: u64) -> u64 {
    mix_seed(seed, salt)
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return true;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}

/// Rectangle along the segment a-b with the given half-width, extended by
/// `cap` beyond both endpoints.
fn ribbon_quad(a: (f64, f64), b: (f64, f64), half_width: f64, cap: f64) -> Vec<(f64, f64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt().max(1e-12);
    let (ux, uy) = (dx / len, dy / len);
    let (nx, ny) = (-uy, ux);
    let a = (a.0 - ux * cap, a.1 - uy * cap);
    let b = (b.0 + ux * cap, b.1 + uy * cap);
    vec![
        (a.0 + nx * half_width, a.1 + ny * half_width),
        (b.0 + nx * half_width, b.1 + ny * half_width),
        (b.0 - nx * half_width, b.1 - ny * half_width),
        (a.0 - nx * half_width, a.1 - ny * half_width),
    ]
}

/// Offset copy of segment a-b shifted along its normal.
fn offset_segment(a: (f64, f64), b: (f64, f64), off: f64) -> ((f64, f64), (f64, f64)) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt().max(1e-12);
    let (nx, ny) = (-dy / len, dx / len);
    (
        (a.0 + nx * off, a.1 + ny * off),
        (b.0 + nx * off, b.1 + ny * off),
    )
}

/// Winding-agnostic containment test for a convex polygon; boundary points
/// count as inside.
pub fn point_in_convex(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let n = poly.len();
    let mut pos = false;
    let mut neg = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross > 0.0 {
            pos = true;
        } else if cross < 0.0 {
            neg = true;
        }
        if pos && neg {
            return false;
        }
    }
    true
}

/// Deterministic jittered-grid road network with walkways, dividers,
/// crossings, and obstacle boxes.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<VectorScene> {
    if params.nodes_x == 0 || params.nodes_y == 0 {
        return Err(Error::Config("scene needs at least one node per axis".into()));
    }
    if params.road_width_min <= 0.0 || params.road_width_max < params.road_width_min {
        return Err(Error::Config("invalid road width range".into()));
    }
    let mut rng = derive_rng(seed, 0xA11CE);
    let (nx, ny) = (params.nodes_x, params.nodes_y);
    let span = 2.0 * params.world_half * 0.8;
    let step_x = if nx > 1 { span / (nx - 1) as f64 } else { 0.0 };
    let step_y = if ny > 1 { span / (ny - 1) as f64 } else { 0.0 };
    let origin = -span / 2.0;

    let mut nodes = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = origin + i as f64 * step_x + rng.gen_range(-params.jitter..=params.jitter);
            let y = origin + j as f64 * step_y + rng.gen_range(-params.jitter..=params.jitter);
            nodes.push((x, y));
        }
    }

    // 4-neighbor grid edges, randomly pruned while keeping the graph connected.
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let idx = j * nx + i;
            if i + 1 < nx {
                candidates.push((idx, idx + 1));
            }
            if j + 1 < ny {
                candidates.push((idx, idx + nx));
            }
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut rng);
    let mut kept: Vec<bool> = vec![true; candidates.len()];
    for &ei in &order {
        if rng.gen_range(0.0..1.0) < params.prune_prob {
            kept[ei] = false;
            let remaining: Vec<(usize, usize)> = candidates
                .iter()
                .zip(&kept)
                .filter(|(_, &k)| k)
                .map(|(e, _)| *e)
                .collect();
            if !connected(nodes.len(), &remaining) {
                kept[ei] = true;
            }
        }
    }
    let mut edges = Vec::new();
    for (ei, &(a, b)) in candidates.iter().enumerate() {
        if kept[ei] {
            let w = rng.gen_range(params.road_width_min..=params.road_width_max);
            edges.push((a, b, w));
        }
    }

    let mut elements = Vec::new();
    for &(a, b, w) in &edges {
        let (pa, pb) = (nodes[a], nodes[b]);
        let hw = w / 2.0;
        elements.push(Element {
            class: SceneClass::Drivable,
            poly: ribbon_quad(pa, pb, hw, hw),
        });
        elements.push(Element {
            class: SceneClass::Divider,
            poly: ribbon_quad(pa, pb, params.divider_width / 2.0, 0.0),
        });
        for side in [-1.0, 1.0] {
            let off = side * (hw + params.walkway_gap + params.walkway_width / 2.0);
            let (qa, qb) = offset_segment(pa, pb, off);
            elements.push(Element {
                class: SceneClass::Walkway,
                poly: ribbon_quad(qa, qb, params.walkway_width / 2.0, 0.0),
            });
        }
    }
    // Crossings at a random subset of intersections (degree >= 2 nodes).
    let mut degree = vec![0usize; nodes.len()];
    let mut max_w = vec![0.0f64; nodes.len()];
    for &(a, b, w) in &edges {
        degree[a] += 1;
        degree[b] += 1;
        max_w[a] = max_w[a].max(w);
        max_w[b] = max_w[b].max(w);
    }
    for (ni, &(x, y)) in nodes.iter().enumerate() {
        if degree[ni] >= 2 && rng.gen_range(0.0..1.0) < params.crossing_prob {
            let h = max_w[ni] / 2.0 + 0.5;
            elements.push(Element {
                class: SceneClass::Crossing,
                poly: vec![(x - h, y - h), (x + h, y - h), (x + h, y + h), (x - h, y + h)],
            });
        }
    }

    let n_obs = rng.gen_range(params.obstacles_min..=params.obstacles_max);
    let mut obstacles = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let lim = params.world_half - params.obstacle_half_max;
        obstacles.push(ObstacleBox {
            cx: rng.gen_range(-lim..lim),
            cy: rng.gen_range(-lim..lim),
            hx: rng.gen_range(params.obstacle_half_min..=params.obstacle_half_max),
            hy: rng.gen_range(params.obstacle_half_min..=params.obstacle_half_max),
            height: rng.gen_range(0.8..2.2),
        });
    }

    Ok(VectorScene { nodes, edges, elements, obstacles, seed })
}

impl VectorScene {
    /// True iff the sample point belongs to the class geometry.
    pub fn contains(&self, class: SceneClass, x: f64, y: f64) -> bool {
        self.elements
            .iter()
            .any(|e| e.class == class && point_in_convex((x, y), &e.poly))
    }

    pub fn is_connected(&self) -> bool {
        let e: Vec<(usize, usize)> = self.edges.iter().map(|&(a, b, _)| (a, b)).collect();
        connected(self.nodes.len(), &e)
    }

    /// Line-oriented text serialization.
    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# vector scene")?;
        writeln!(w, "seed {}", self.seed)?;
        for (x, y) in &self.nodes {
            writeln!(w, "node {x} {y}")?;
        }
        for (a, b, width) in &self.edges {
            writeln!(w, "edge {a} {b} {width}")?;
        }
        for e in &self.elements {
            write!(w, "poly {}", e.class.name())?;
            for (x, y) in &e.poly {
                write!(w, " {x} {y}")?;
            }
            writeln!(w)?;
        }
        for o in &self.obstacles {
            writeln!(w, "box {} {} {} {} {}", o.cx, o.cy, o.hx, o.hy, o.height)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut scene = VectorScene {
            nodes: Vec::new(),
            edges: Vec::new(),
            elements: Vec::new(),
            obstacles: Vec::new(),
            seed: 0,
        };
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tok = line.split_whitespace();
            let kind = tok.next().unwrap();
            let parse_err = |e: String| Error::Parse(format!("line {}: {e}", ln + 1));
            let nums = |tok: std::str::SplitWhitespace| -> Result<Vec<f64>> {
                tok.map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| parse_err(e.to_string()))
                })
                .collect()
            };
            match kind {
                "seed" => {
                    scene.seed = tok
                        .next()
                        .ok_or_else(|| parse_err("missing seed".into()))?
                        .parse()
                        .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?;
                }
                "node" => {
                    let v = nums(tok)?;
                    if v.len() != 2 {
                        return Err(parse_err("node wants x y".into()));
                    }
                    scene.nodes.push((v[0], v[1]));
                }
                "edge" => {
                    let v = nums(tok)?;
                    if v.len() != 3 {
                        return Err(parse_err("edge wants i j width".into()));
                    }
                    scene.edges.push((v[0] as usize, v[1] as usize, v[2]));
                }
                "poly" => {
                    let class = SceneClass::from_name(
                        tok.next().ok_or_else(|| parse_err("poly wants a class".into()))?,
                    )?;
                    let v = nums(tok)?;
                    if v.len() < 6 || v.len() % 2 != 0 {
                        return Err(parse_err("poly wants >= 3 x y pairs".into()));
                    }
                    let poly = v.chunks(2).map(|c| (c[0], c[1])).collect();
                    scene.elements.push(Element { class, poly });
                }
                "box" => {
                    let v = nums(tok)?;
                    if v.len() != 5 {
                        return Err(parse_err("box wants cx cy hx hy height".into()));
                    }
                    scene.obstacles.push(ObstacleBox {
                        cx: v[0],
                        cy: v[1],
                        hx: v[2],
                        hy: v[3],
                        height: v[4],
                    });
                }
                other => return Err(parse_err(format!("unknown record '{other}'"))),
            }
        }
        Ok(scene)
    }
}

/// Exact rasterization: a pixel's bit is 1 iff the pixel's sample point lies
/// inside the class geometry. Never resamples a raster.
pub fn rasterize(scene: &VectorScene, scope: &BevScope) -> SemanticMap {
    let (d, w) = (scope.depth(), scope.width());
    let classes = [
        SceneClass::Drivable,
        SceneClass::Divider,
        SceneClass::Walkway,
        SceneClass::Crossing,
    ];
    let mut masks = vec![vec![0u8; d * w]; classes.len()];
    for (ci, &class) in classes.iter().enumerate() {
        let polys: Vec<&Element> =
            scene.elements.iter().filter(|e| e.class == class).collect();
        for v in 0..d {
            for u in 0..w {
                let (x, y) = scope.sample_point(u, v);
                if polys.iter().any(|e| point_in_convex((x, y), &e.poly)) {
                    masks[ci][v * w + u] = 1;
                }
            }
        }
    }
    SemanticMap { scope: *scope, masks }
}

/// Stride-`s` subsample of a high-resolution map onto the downscaled scope.
/// Exact: the coarse sample points are a subset of the fine ones.
pub fn subsample(map: &SemanticMap, s: usize) -> Result<SemanticMap> {
    let scope = downscale_scope(&map.scope, s)?;
    let (d, w) = (scope.depth(), scope.width());
    let fine_w = map.scope.width();
    let masks = map
        .masks
        .iter()
        .map(|m| {
            let mut out = vec![0u8; d * w];
            for v in 0..d {
                for u in 0..w {
                    out[v * w + u] = m[(v * s) * fine_w + u * s];
                }
            }
            out
        })
        .collect();
    Ok(SemanticMap { scope, masks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelPolicy {
    Majority,
    Any,
}

/// s x s block reduction of each mask: majority vote (ties become 1) or
/// any-hit.
pub fn lr_label(map_hr: &SemanticMap, s: usize, policy: LabelPolicy) -> Result<SemanticMap> {
    let scope = downscale_scope(&map_hr.scope, s)?;
    let (d, w) = (scope.depth(), scope.width());
    let fine_w = map_hr.scope.width();
    let masks = map_hr
        .masks
        .iter()
        .map(|m| {
            let mut out = vec![0u8; d * w];
            for v in 0..d {
                for u in 0..w {
                    let mut hits = 0usize;
                    for dy in 0..s {
                        for dx in 0..s {
                            hits += m[(v * s + dy) * fine_w + u * s + dx] as usize;
                        }
                    }
                    let on = match policy {
                        LabelPolicy::Any => hits > 0,
                        LabelPolicy::Majority => 2 * hits >= s * s,
                    };
                    out[v * w + u] = on as u8;
                }
            }
            out
        })
        .collect();
    Ok(SemanticMap { scope, masks })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarParams {
    pub n_rays: usize,
    pub max_range: f64,
    pub noise_sigma: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        LidarParams { n_rays: 240, max_range: 30.0, noise_sigma: 0.02 }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ray / axis-aligned box intersection distance (2D slab test).
fn ray_box(ox: f64, oy: f64, dx: f64, dy: f64, b: &ObstacleBox) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for (o, d, lo, hi) in [
        (ox, dx, b.cx - b.hx, b.cx + b.hx),
        (oy, dy, b.cy - b.hy, b.cy + b.hy),
    ] {
        if d.abs() < 1e-12 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let (t1, t2) = ((lo - o) / d, (hi - o) / d);
            let (t1, t2) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            tmin = tmin.max(t1);
            tmax = tmax.min(t2);
            if tmin > tmax {
                return None;
            }
        }
    }
    if tmax < 0.0 {
        None
    } else {
        Some(tmin.max(0.0))
    }
}

/// Ray / segment intersection distance.
fn ray_segment(ox: f64, oy: f64, dx: f64, dy: f64, a: (f64, f64), b: (f64, f64)) -> Option<f64> {
    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
    let denom = dx * ey - dy * ex;
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = ((a.0 - ox) * ey - (a.1 - oy) * ex) / denom;
    let s = ((a.0 - ox) * dy - (a.1 - oy) * dx) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&s) {
        Some(t)
    } else {
        None
    }
}

/// Wall segments the LiDAR can hit: the outer walkway borders of each road.
fn wall_segments(scene: &VectorScene, params: &SceneParams) -> Vec<((f64, f64), (f64, f64))> {
    let mut walls = Vec::new();
    for &(a, b, w) in &scene.edges {
        let off = w / 2.0 + params.walkway_gap + params.walkway_width;
        for side in [-1.0, 1.0] {
            walls.push(offset_segment(scene.nodes[a], scene.nodes[b], side * off));
        }
    }
    walls
}

/// Planar ray casting from `pose` (x, y, yaw) against obstacle boxes and
/// road-border walls; rays with no hit return a ground point at max range.
pub fn simulate_lidar(
    scene: &VectorScene,
    pose: (f64, f64, f64),
    params: &SceneParams,
    lidar: &LidarParams,
) -> PointCloud {
    let mut rng = derive_rng(scene.seed, 0x11DA2);
    let walls = wall_segments(scene, params);
    let mut pc = PointCloud::default();
    let (ox, oy, yaw) = pose;
    for i in 0..lidar.n_rays {
        let angle = yaw + 2.0 * std::f64::consts::PI * i as f64 / lidar.n_rays as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        // 0 = ground, 1 = box, 2 = wall
        let mut best = (lidar.max_range, 0u8, 0.0f64);
        for b in &scene.obstacles {
            if let Some(t) = ray_box(ox, oy, dx, dy, b) {
                if t < best.0 {
                    best = (t, 1, b.height);
                }
            }
        }
        for w in &walls {
            if let Some(t) = ray_segment(ox, oy, dx, dy, w.0, w.1) {
                if t < best.0 {
                    best = (t, 2, 2.5);
                }
            }
        }
        let noise = gaussian(&mut rng) * lidar.noise_sigma;
        let t = (best.0 + noise).max(0.0);
        let (z, intensity) = match best.1 {
            1 => (rng.gen_range(0.1..best.2), 0.6 + gaussian(&mut rng) * 0.05),
            2 => (rng.gen_range(0.1..best.2), 0.9 + gaussian(&mut rng) * 0.05),
            _ => (0.0, 0.2 + gaussian(&mut rng) * 0.05),
        };
        pc.push([ox + t * dx, oy + t * dy, z], intensity);
    }
    pc
}

pub const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.30, 0.30, 0.38], // drivable
    [0.95, 0.95, 0.95], // divider
    [0.75, 0.35, 0.35], // walkway
    [0.90, 0.85, 0.20], // crossing
];
pub const GROUND_COLOR: [f64; 3] = [0.18, 0.45, 0.20];
pub const SKY_COLOR: [f64; 3] = [0.55, 0.70, 0.95];

/// Color of the ground point (x, y), by class priority.
pub fn ground_color(scene: &VectorScene, x: f64, y: f64) -> [f64; 3] {
    for class in [
        SceneClass::Crossing,
        SceneClass::Divider,
        SceneClass::Walkway,
        SceneClass::Drivable,
    ] {
        if scene.contains(class, x, y) {
            return CLASS_COLORS[class as usize];
        }
    }
    GROUND_COLOR
}

/// Per-pixel ray to ground-plane intersection with class-color lookup; sky
/// above the horizon.
pub fn simulate_camera(scene: &VectorScene, cam: &CameraModel) -> Result<Tensor> {
    cam.validate()?;
    if cam.pos[2] <= 0.0 {
        return Err(Error::Config("camera must sit above the ground plane".into()));
    }
    // Degenerate pose: the central ray never reaches the ground.
    let central = cam.ray_dir(cam.cx, cam.cy);
    if central[2] >= 0.0 {
        return Err(Error::Config("degenerate camera pose: looking at or above horizon".into()));
    }
    let mut img = Tensor::zeros(&[cam.height, cam.width, 3]);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = cam.ray_dir(u as f64 + 0.5, v as f64 + 0.5);
            let color = if dir[2] >= -1e-9 {
                SKY_COLOR
            } else {
                let t = -cam.pos[2] / dir[2];
                let (x, y) = (cam.pos[0] + t * dir[0], cam.pos[1] + t * dir[1]);
                ground_color(scene, x, y)
            };
            for c in 0..3 {
                img.set3(v, u, c, color[c]);
            }
        }
    }
    Ok(img)
}

/// Fraction of the scope area covered by a class, from an existing raster.
pub fn class_area_fraction(map: &SemanticMap, class: SceneClass) -> f64 {
    let m = map.class_mask(class);
    m.iter().map(|&b| b as usize).sum::<usize>() as f64 / m.len() as f64
}

/// Binary PGM (P5, 0/255) export with a text sidecar recording the scope.
pub fn save_map_pgm(map: &SemanticMap, dir: &Path, stem: &str) -> Result<()> {
    use std::io::Write;
    let (d, w) = (map.scope.depth(), map.scope.width());
    for (ci, mask) in map.masks.iter().enumerate() {
        let path = dir.join(format!("{stem}_{}.pgm", CLASS_NAMES[ci]));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{w} {d}\n255\n")?;
        let bytes: Vec<u8> = mask.iter().map(|&b| if b > 0 { 255 } else { 0 }).collect();
        f.write_all(&bytes)?;
    }
    let sc = &map.scope;
    std::fs::write(
        dir.join(format!("{stem}_scope.txt")),
        format!(
            "lb_x {}\nub_x {}\nlb_y {}\nub_y {}\nr_x {}\nr_y {}\n",
            sc.lb_x, sc.ub_x, sc.lb_y, sc.ub_y, sc.r_x, sc.r_y
        ),
    )?;
    Ok(())
}

/// Inverse of [`save_map_pgm`]; round trips are bit-exact.
pub fn load_map_pgm(dir: &Path, stem: &str) -> Result<SemanticMap> {
    let sidecar = std::fs::read_to_string(dir.join(format!("{stem}_scope.txt")))?;
    let mut vals = std::collections::HashMap::new();
    for line in sidecar.lines() {
        let mut tok = line.split_whitespace();
        if let (Some(k), Some(v)) = (tok.next(), tok.next()) {
            vals.insert(k.to_string(), v.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
        }
    }
    let get = |k: &str| -> Result<f64> {
        vals.get(k).copied().ok_or_else(|| Error::Parse(format!("sidecar missing {k}")))
    };
    let scope = BevScope::new(
        get("lb_x")?,
        get("ub_x")?,
        get("lb_y")?,
        get("ub_y")?,
        get("r_x")?,
        get("r_y")?,
    )?;
    let (d, w) = (scope.depth(), scope.width());
    let mut masks = Vec::new();
    for name in CLASS_NAMES {
        let raw = std::fs::read(dir.join(format!("{stem}_{name}.pgm")))?;
        // Header: P5\n<w> <d>\n255\n
        let header_end = raw
            .windows(4)
            .position(|win| win == b"255\n")
            .ok_or_else(|| Error::Parse("bad PGM header".into()))?
            + 4;
        let pixels = &raw[header_end..];
        if pixels.len() != d * w {
            return Err(Error::Parse(format!(
                "PGM size {} vs scope grid {}",
                pixels.len(),
                d * w
            )));
        }
        masks.push(pixels.iter().map(|&b| (b > 127) as u8).collect());
    }
    Ok(SemanticMap { scope, masks })
}
