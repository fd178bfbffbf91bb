//! Procedural ground-truth BEV scenes and their rendered observations.
//!
//! A scene is a metric grid carrying per-class binary semantic rasters
//! (road layout) plus a list of 7-DoF objects placed on drivable cells.
//! Scenes are a pure function of `(seed, config)`; observations add
//! seeded Gaussian noise on top of a class-coded rendering.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{t, Scalar, Tensor};
use crate::util;

/// Map classes, in raster order.
pub const SEG_NAMES: [&str; 6] = [
    "drivable",
    "crossing",
    "walkway",
    "stop_line",
    "parking",
    "divider",
];
pub const SEG_DRIVABLE: usize = 0;
pub const SEG_CROSSING: usize = 1;
pub const SEG_WALKWAY: usize = 2;
pub const SEG_STOP_LINE: usize = 3;
pub const SEG_PARKING: usize = 4;
pub const SEG_DIVIDER: usize = 5;

/// Object classes, in channel order.
pub const DET_NAMES: [&str; 3] = ["vehicle", "pedestrian", "barrier"];

/// Per-class (l, w, h) size ranges in meters.
const SIZE_RANGES: [[(f64, f64); 3]; 3] = [
    [(3.5, 5.5), (1.6, 2.2), (1.4, 2.0)], // vehicle
    [(0.5, 0.9), (0.5, 0.9), (1.5, 1.9)], // pedestrian
    [(1.5, 3.0), (0.3, 0.6), (0.9, 1.2)], // barrier
];

/// Metric BEV grid: `h` rows by `w` columns of square cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub m_per_cell: f64,
    /// Metric coordinates of the corner of cell (0,0); scene files always
    /// use the centered convention of [`GridSpec::centered`].
    #[serde(skip, default)]
    pub origin: (f64, f64),
}

impl GridSpec {
    /// Grid centered on the metric origin.
    pub fn centered(h: usize, w: usize, m_per_cell: f64) -> Self {
        GridSpec {
            h,
            w,
            m_per_cell,
            origin: (
                -(w as f64) * m_per_cell / 2.0,
                -(h as f64) * m_per_cell / 2.0,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 8 || self.w < 8 {
            return Err(Error::Config(format!(
                "grid must be at least 8x8, got {}x{}",
                self.h, self.w
            )));
        }
        if !(self.m_per_cell > 0.0) {
            return Err(Error::Config(format!(
                "m_per_cell must be positive, got {}",
                self.m_per_cell
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Metric center of cell (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.m_per_cell,
            self.origin.1 + (row as f64 + 0.5) * self.m_per_cell,
        )
    }

    /// Cell containing a metric point, or None if outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.origin.0) / self.m_per_cell).floor();
        let row = ((y - self.origin.1) / self.m_per_cell).floor();
        if col < 0.0 || row < 0.0 || col >= self.w as f64 || row >= self.h as f64 {
            None
        } else {
            Some((row as usize, col as usize))
        }
    }

    /// Metric bounds as (x_min, y_min, x_max, y_max).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + self.w as f64 * self.m_per_cell,
            self.origin.1 + self.h as f64 * self.m_per_cell,
        )
    }

    /// Clamp a metric point to lie strictly inside the grid.
    pub fn clamp_metric(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.bounds();
        let eps = self.m_per_cell * 1e-3;
        (x.clamp(x0 + eps, x1 - eps), y.clamp(y0 + eps, y1 - eps))
    }
}

/// One ground-truth object: class plus a 7-DoF box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub c: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl SceneObject {
    /// Grid cells whose centers fall inside the rotated footprint.
    pub fn footprint_cells(&self, grid: &GridSpec) -> Vec<(usize, usize)> {
        footprint_cells(grid, self.x, self.y, self.l, self.w, self.theta)
    }
}

/// Cells whose centers lie inside a rotated rectangle.
pub fn footprint_cells(
    grid: &GridSpec,
    x: f64,
    y: f64,
    l: f64,
    w: f64,
    theta: f64,
) -> Vec<(usize, usize)> {
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let reach = 0.5 * (l * l + w * w).sqrt();
    let lo = grid.cell_of(
        (x - reach).max(grid.bounds().0),
        (y - reach).max(grid.bounds().1),
    );
    let hi = grid.cell_of(
        (x + reach).min(grid.bounds().2 - grid.m_per_cell * 1e-6),
        (y + reach).min(grid.bounds().3 - grid.m_per_cell * 1e-6),
    );
    let (Some((r0, c0)), Some((r1, c1))) = (lo, hi) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (cx, cy) = grid.cell_center(row, col);
            let (dx, dy) = (cx - x, cy - y);
            let u = cos_t * dx + sin_t * dy;
            let v = -sin_t * dx + cos_t * dy;
            if u.abs() <= l / 2.0 && v.abs() <= w / 2.0 {
                out.push((row, col));
            }
        }
    }
    out
}

/// Ground-truth BEV world: semantic rasters plus objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub grid: GridSpec,
    pub objects: Vec<SceneObject>,
    /// `k_seg` binary rasters of `h*w` bytes each.
    pub semantic: Vec<Vec<u8>>,
}

impl Scene {
    pub fn k_seg(&self) -> usize {
        self.semantic.len()
    }

    /// Semantic rasters as a `[K_seg, H, W]` tensor of 0/1 values.
    pub fn semantic_tensor<T: Scalar>(&self) -> Tensor<T> {
        let k = self.semantic.len();
        let hw = self.grid.cells();
        let mut data = vec![T::zero(); k * hw];
        for (ci, raster) in self.semantic.iter().enumerate() {
            for (i, &v) in raster.iter().enumerate() {
                if v != 0 {
                    data[ci * hw + i] = T::one();
                }
            }
        }
        Tensor::from_vec(data, &[k, self.grid.h, self.grid.w])
    }
}

/// Knobs of the procedural generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub h: usize,
    pub w: usize,
    pub m_per_cell: f64,
    /// Number of map classes emitted, a prefix of [`SEG_NAMES`].
    pub k_seg: usize,
    /// Number of object classes used, a prefix of [`DET_NAMES`].
    pub k_det: usize,
    /// Object count scale in [0,1]; 0 disables objects entirely.
    pub density: f64,
    pub max_objects: usize,
    /// Carve divider cells out of the drivable raster so the two classes
    /// never overlap.
    pub exclusive_divider: bool,
    /// Probability of a perpendicular second road.
    pub cross_road_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            h: 64,
            w: 64,
            m_per_cell: 1.0,
            k_seg: 6,
            k_det: 3,
            density: 0.35,
            max_objects: 24,
            exclusive_divider: true,
            cross_road_prob: 0.6,
        }
    }
}

impl GeneratorConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec::centered(self.h, self.w, self.m_per_cell)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        if self.k_seg == 0 || self.k_det == 0 {
            return Err(Error::Config(
                "generator needs at least one map class and one object class".into(),
            ));
        }
        if self.k_seg > SEG_NAMES.len() || self.k_det > DET_NAMES.len() {
            return Err(Error::Config(format!(
                "at most {} map and {} object classes are defined",
                SEG_NAMES.len(),
                DET_NAMES.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Config(format!(
                "density must be in [0,1], got {}",
                self.density
            )));
        }
        Ok(())
    }

    /// Observation channel count: one per map class plus one per object class.
    pub fn obs_channels(&self) -> usize {
        self.k_seg + self.k_det
    }
}

struct RasterSet {
    h: usize,
    w: usize,
    layers: Vec<Vec<u8>>,
}

impl RasterSet {
    fn new(k: usize, h: usize, w: usize) -> Self {
        RasterSet {
            h,
            w,
            layers: vec![vec![0u8; h * w]; k],
        }
    }

    fn mark(&mut self, class: usize, row: usize, col: usize) {
        if class < self.layers.len() && row < self.h && col < self.w {
            self.layers[class][row * self.w + col] = 1;
        }
    }

    fn get(&self, class: usize, row: usize, col: usize) -> bool {
        class < self.layers.len() && self.layers[class][row * self.w + col] != 0
    }

    fn clear(&mut self, class: usize, row: usize, col: usize) {
        if class < self.layers.len() {
            self.layers[class][row * self.w + col] = 0;
        }
    }
}

#[derive(Clone, Copy)]
struct Road {
    horizontal: bool,
    center: usize,
    half_width: usize,
}

impl Road {
    fn contains(&self, row: usize, col: usize) -> bool {
        let along = if self.horizontal { row } else { col };
        along + self.half_width >= self.center && along <= self.center + self.half_width
    }
}

/// Generate a scene; deterministic for a fixed `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<Scene> {
    cfg.validate()?;
    let grid = cfg.grid();
    let (h, w) = (cfg.h, cfg.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rasters = RasterSet::new(cfg.k_seg, h, w);

    // Main road plus an optional perpendicular one.
    let main = Road {
        horizontal: rng.gen_bool(0.5),
        center: rng.gen_range(h / 3..=2 * h / 3),
        half_width: rng.gen_range(4..=7).min(h / 4),
    };
    let cross = if rng.gen_bool(cfg.cross_road_prob) {
        Some(Road {
            horizontal: !main.horizontal,
            center: rng.gen_range(w / 3..=2 * w / 3),
            half_width: rng.gen_range(3..=6).min(w / 4),
        })
    } else {
        None
    };
    let roads: Vec<Road> = std::iter::once(main).chain(cross).collect();

    for row in 0..h {
        for col in 0..w {
            if roads.iter().any(|r| r.contains(row, col)) {
                rasters.mark(SEG_DRIVABLE, row, col);
            }
        }
    }

    // Lane divider: the center line of each road, skipping the other road's
    // band so intersections stay open.
    for (ri, road) in roads.iter().enumerate() {
        for t_pos in 0..(if road.horizontal { w } else { h }) {
            let (row, col) = if road.horizontal {
                (road.center, t_pos)
            } else {
                (t_pos, road.center)
            };
            let inside_other = roads
                .iter()
                .enumerate()
                .any(|(rj, other)| rj != ri && other.contains(row, col));
            if !inside_other {
                rasters.mark(SEG_DIVIDER, row, col);
            }
        }
    }

    // Pedestrian crossings: stripes across each road, with a stop line one
    // cell before each crossing.
    for road in &roads {
        let span = if road.horizontal { w } else { h };
        let n_crossings = rng.gen_range(1..=2usize);
        for _ in 0..n_crossings {
            let pos = rng.gen_range(span / 8..span - span / 8);
            let width = rng.gen_range(2..=3usize);
            for d in 0..width {
                let along = pos + d;
                if along >= span {
                    continue;
                }
                for off in 0..=2 * road.half_width {
                    let lat = road.center + off;
                    let lat = lat.checked_sub(road.half_width);
                    let Some(lat) = lat else { continue };
                    let (row, col) = if road.horizontal { (lat, along) } else { (along, lat) };
                    if rasters.get(SEG_DRIVABLE, row.min(h - 1), col.min(w - 1))
                        || (cfg.exclusive_divider && rasters.get(SEG_DIVIDER, row.min(h - 1), col.min(w - 1)))
                    {
                        rasters.mark(SEG_CROSSING, row, col);
                    }
                }
            }
            if pos > 0 {
                let along = pos - 1;
                for off in 0..=2 * road.half_width {
                    let Some(lat) = (road.center + off).checked_sub(road.half_width) else {
                        continue;
                    };
                    let (row, col) = if road.horizontal { (lat, along) } else { (along, lat) };
                    if row < h && col < w && rasters.get(SEG_DRIVABLE, row, col) {
                        rasters.mark(SEG_STOP_LINE, row, col);
                    }
                }
            }
        }
    }

    // Walkways: margins hugging each side of each road, off the asphalt.
    for road in &roads {
        let margin = rng.gen_range(2..=3usize);
        let span = if road.horizontal { w } else { h };
        for side in [-1isize, 1] {
            for d in 1..=margin {
                let lat = road.center as isize + side * (road.half_width as isize + d as isize);
                if lat < 0 {
                    continue;
                }
                let lat = lat as usize;
                for along in 0..span {
                    let (row, col) = if road.horizontal { (lat, along) } else { (along, lat) };
                    if row < h && col < w && !rasters.get(SEG_DRIVABLE, row, col) {
                        rasters.mark(SEG_WALKWAY, row, col);
                    }
                }
            }
        }
    }

    // Parking rectangles beyond the walkway on the main road's sides.
    let n_parking = rng.gen_range(1..=3usize);
    for _ in 0..n_parking {
        let side = if rng.gen_bool(0.5) { -1isize } else { 1 };
        let depth = rng.gen_range(3..=5usize);
        let len = rng.gen_range(4..=8usize);
        let span = if main.horizontal { w } else { h };
        let start = rng.gen_range(0..span.saturating_sub(len).max(1));
        let base = main.center as isize + side * (main.half_width as isize + 4);
        for d in 0..depth {
            let lat = base + side * d as isize;
            if lat < 0 {
                continue;
            }
            let lat = lat as usize;
            for along in start..start + len {
                let (row, col) = if main.horizontal { (lat, along) } else { (along, lat) };
                if row < h
                    && col < w
                    && !rasters.get(SEG_DRIVABLE, row, col)
                    && !rasters.get(SEG_WALKWAY, row, col)
                {
                    rasters.mark(SEG_PARKING, row, col);
                }
            }
        }
    }

    if cfg.exclusive_divider {
        for row in 0..h {
            for col in 0..w {
                if rasters.get(SEG_DIVIDER, row, col) {
                    rasters.clear(SEG_DRIVABLE, row, col);
                }
            }
        }
    }

    // Objects on drivable cells, separated by at least 2 m of center
    // distance, heading roughly along the local road.
    let drivable_cells: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| rasters.get(SEG_DRIVABLE, r, c))
        .collect();
    let mut objects = Vec::new();
    let target = (cfg.density * cfg.max_objects as f64).round() as usize;
    let count = if target == 0 || drivable_cells.is_empty() {
        0
    } else {
        rng.gen_range((target / 2).max(1)..=target)
    };
    let min_sep = 2.0 * cfg.m_per_cell;
    for _ in 0..count {
        for _attempt in 0..20 {
            let &(row, col) = &drivable_cells[rng.gen_range(0..drivable_cells.len())];
            let (cx, cy) = grid.cell_center(row, col);
            let jitter = 0.4 * cfg.m_per_cell;
            let x = cx + rng.gen_range(-jitter..jitter);
            let y = cy + rng.gen_range(-jitter..jitter);
            if objects
                .iter()
                .any(|o: &SceneObject| ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt() < min_sep)
            {
                continue;
            }
            let class = sample_class(&mut rng, cfg.k_det);
            let ranges = SIZE_RANGES[class];
            let l = rng.gen_range(ranges[0].0..ranges[0].1);
            let wd = rng.gen_range(ranges[1].0..ranges[1].1);
            let hgt = rng.gen_range(ranges[2].0..ranges[2].1);
            let road = roads
                .iter()
                .find(|r| r.contains(row, col))
                .copied()
                .unwrap_or(main);
            let base_theta = if class == 1 {
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
            } else {
                let along = if road.horizontal { 0.0 } else { std::f64::consts::FRAC_PI_2 };
                let flip = if rng.gen_bool(0.5) { std::f64::consts::PI } else { 0.0 };
                along + flip + rng.gen_range(-0.15..0.15)
            };
            let theta = wrap_angle(base_theta);
            let z = hgt / 2.0 + rng.gen_range(-0.05..0.05);
            objects.push(SceneObject {
                c: class,
                x,
                y,
                z,
                l,
                w: wd,
                h: hgt,
                theta,
            });
            break;
        }
    }

    Ok(Scene {
        seed,
        grid,
        objects,
        semantic: rasters.layers,
    })
}

fn sample_class(rng: &mut ChaCha8Rng, k_det: usize) -> usize {
    let weights = &[0.6, 0.25, 0.15][..k_det];
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (i, &p) in weights.iter().enumerate() {
        if draw < p {
            return i;
        }
        draw -= p;
    }
    k_det - 1
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = theta % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Noisy rendering of a scene: one channel per map class with the raster
/// values, one channel per object class with footprint silhouettes, plus
/// `N(0, sigma)` noise everywhere.
pub struct Observation<T: Scalar> {
    pub raster: Tensor<T>,
}

pub fn render_observation<T: Scalar>(
    scene: &Scene,
    cfg: &GeneratorConfig,
    noise_sigma: f64,
    seed: u64,
) -> Observation<T> {
    assert!(noise_sigma >= 0.0, "noise_sigma must be non-negative");
    let hw = scene.grid.cells();
    let channels = cfg.obs_channels();
    let mut data = vec![0.0f64; channels * hw];
    for (ci, raster) in scene.semantic.iter().enumerate() {
        for (i, &v) in raster.iter().enumerate() {
            if v != 0 {
                data[ci * hw + i] = 1.0;
            }
        }
    }
    for obj in &scene.objects {
        if obj.c >= cfg.k_det {
            continue;
        }
        let ch = cfg.k_seg + obj.c;
        for (row, col) in obj.footprint_cells(&scene.grid) {
            data[ch * hw + row * scene.grid.w + col] = 1.0;
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut data {
            let n: f64 = rng.sample(StandardNormal);
            *v += n * noise_sigma;
        }
    }
    let converted: Vec<T> = data.into_iter().map(|v| t::<T>(v)).collect();
    Observation {
        raster: Tensor::from_vec(converted, &[channels, scene.grid.h, scene.grid.w]),
    }
}

// ---------------------------------------------------------------------------
// Scene files and datasets
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneFile {
    seed: u64,
    grid: GridSpec,
    objects: Vec<SceneObject>,
    /// Per class, per row: [start, len] runs of ones.
    semantic: Vec<Vec<Vec<[u32; 2]>>>,
}

fn rle_encode_row(row: &[u8]) -> Vec<[u32; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < row.len() {
        if row[i] != 0 {
            let start = i;
            while i < row.len() && row[i] != 0 {
                i += 1;
            }
            runs.push([start as u32, (i - start) as u32]);
        } else {
            i += 1;
        }
    }
    runs
}

fn rle_decode_row(runs: &[[u32; 2]], width: usize, out: &mut [u8]) -> Result<()> {
    for &[start, len] in runs {
        let (start, len) = (start as usize, len as usize);
        if start + len > width {
            return Err(Error::Config(format!(
                "rle run {start}+{len} exceeds row width {width}"
            )));
        }
        out[start..start + len].fill(1);
    }
    Ok(())
}

pub fn scene_to_json(scene: &Scene) -> String {
    let file = SceneFile {
        seed: scene.seed,
        grid: scene.grid,
        objects: scene.objects.clone(),
        semantic: scene
            .semantic
            .iter()
            .map(|raster| {
                raster
                    .chunks(scene.grid.w)
                    .map(rle_encode_row)
                    .collect::<Vec<_>>()
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("scene serialization cannot fail")
}

pub fn scene_from_json(json: &str) -> Result<Scene> {
    let file: SceneFile =
        serde_json::from_str(json).map_err(|e| Error::json("<scene>".to_string(), e))?;
    let mut grid = file.grid;
    grid.origin = GridSpec::centered(grid.h, grid.w, grid.m_per_cell).origin;
    grid.validate()?;
    let mut semantic = Vec::with_capacity(file.semantic.len());
    for class_rows in &file.semantic {
        if class_rows.len() != grid.h {
            return Err(Error::Config(format!(
                "semantic raster has {} rows, grid has {}",
                class_rows.len(),
                grid.h
            )));
        }
        let mut raster = vec![0u8; grid.cells()];
        for (r, runs) in class_rows.iter().enumerate() {
            rle_decode_row(runs, grid.w, &mut raster[r * grid.w..(r + 1) * grid.w])?;
        }
        semantic.push(raster);
    }
    Ok(Scene {
        seed: file.seed,
        grid,
        objects: file.objects,
        semantic,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, scene_to_json(scene)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let json =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    scene_from_json(&json)
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub cfg_hash: String,
    pub base_seed: u64,
    pub generator: GeneratorConfig,
}

pub fn config_hash(cfg: &GeneratorConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serialization cannot fail");
    format!("{:016x}", util::fnv1a(json.as_bytes()))
}

pub fn scene_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("scene_{index:06}.json"))
}

/// Generate `count` scenes (seeds `base_seed..base_seed+count`) into a
/// dataset directory with a manifest.
pub fn write_dataset(dir: &Path, cfg: &GeneratorConfig, base_seed: u64, count: usize) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let results = crate::util::par::map_indexed(count, |i| {
        let scene = generate_scene(base_seed.wrapping_add(i as u64), cfg)?;
        save_scene(&scene, &scene_path(dir, i))
    });
    for r in results {
        r?;
    }
    let manifest = Manifest {
        count,
        cfg_hash: config_hash(cfg),
        base_seed,
        generator: cfg.clone(),
    };
    let json = serde_json::to_string(&manifest).expect("manifest serialization cannot fail");
    fs::write(dir.join("manifest.json"), json)
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(())
}

/// Load every scene of a dataset directory, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest = read_manifest(dir)?;
    let loaded = crate::util::par::map_indexed(manifest.count, |i| load_scene(&scene_path(dir, i)));
    let mut scenes = Vec::with_capacity(manifest.count);
    for s in loaded {
        scenes.push(s?);
    }
    Ok(scenes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let json = fs::read_to_string(&path).map_err(|_| Error::Dataset {
        path: dir.display().to_string(),
        reason: "missing manifest.json".into(),
    })?;
    serde_json::from_str(&json).map_err(|e| Error::json(path.display().to_string(), e))
}
