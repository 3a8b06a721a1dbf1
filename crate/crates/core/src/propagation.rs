//! Synthetic propagation scenes and received-signal-strength maps.
//!
//! Buildings are axis-aligned boxes standing on the ground. Paths are the
//! line-of-sight ray plus specular wall reflections found with the image
//! method (first and second order). Received power at a point is the coherent
//! superposition of the per-path field phasors.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{field_from_gain, ChannelError, Path, PathSet, WaveformConfig};
use crate::{ETA0, SPEED_OF_LIGHT};

/// Power assigned to map pixels that receive no field at all.
pub const RSS_FLOOR_DBM: f64 = -200.0;

/// Receiver height used for RSS maps.
pub const DEFAULT_RX_HEIGHT_M: f64 = 1.5;

const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error("receiver position ({0}, {1}) lies outside the scene extent")]
    RxOutsideScene(f64, f64),
    #[error("reflection order {0} is not supported (0, 1 or 2)")]
    UnsupportedOrder(usize),
    #[error("invalid scene: {0}")]
    InvalidScene(&'static str),
    #[error("RSS map has no dynamic range (max {max} dBm, min {min} dBm)")]
    DegenerateRange { min: f64, max: f64 },
    #[error("crop of {crop_px} px does not fit a {height}x{width} px map")]
    CropLargerThanMap {
        crop_px: usize,
        height: usize,
        width: usize,
    },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// An axis-aligned box: ground footprint `[min, max]` and a height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min_m: [f64; 2],
    pub max_m: [f64; 2],
    pub height_m: f64,
    pub reflection_coeff: Complex64,
}

impl Building {
    fn contains(&self, p: [f64; 3]) -> bool {
        p[0] > self.min_m[0]
            && p[0] < self.max_m[0]
            && p[1] > self.min_m[1]
            && p[1] < self.max_m[1]
            && p[2] >= 0.0
            && p[2] < self.height_m
    }

    /// True when the open segment `a -> b` passes through the box interior.
    fn blocks(&self, a: [f64; 3], b: [f64; 3]) -> bool {
        let lo = [self.min_m[0], self.min_m[1], f64::NEG_INFINITY];
        let hi = [self.max_m[0], self.max_m[1], self.height_m];
        let mut t0 = GEOM_EPS;
        let mut t1 = 1.0 - GEOM_EPS;
        for k in 0..3 {
            let dir = b[k] - a[k];
            if dir.abs() < 1e-15 {
                if a[k] <= lo[k] || a[k] >= hi[k] {
                    return false;
                }
                continue;
            }
            let mut ta = (lo[k] - a[k]) / dir;
            let mut tb = (hi[k] - a[k]) / dir;
            if ta > tb {
                core::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 >= t1 {
                return false;
            }
        }
        true
    }
}

/// A synthetic outdoor scene with one transmitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// `(width, height)` of the ground rectangle anchored at the origin.
    pub extent_m: [f64; 2],
    pub tx_position_m: [f64; 3],
    #[serde(default)]
    pub buildings: Vec<Building>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<(), PropagationError> {
        if !(self.extent_m[0] > 0.0 && self.extent_m[1] > 0.0) {
            return Err(PropagationError::InvalidScene("extent must be positive"));
        }
        let [x, y, _] = self.tx_position_m;
        if !(0.0..=self.extent_m[0]).contains(&x) || !(0.0..=self.extent_m[1]).contains(&y) {
            return Err(PropagationError::InvalidScene("transmitter outside extent"));
        }
        for b in &self.buildings {
            if b.reflection_coeff.norm() > 1.0 + 1e-12 {
                return Err(PropagationError::InvalidScene("|reflection coefficient| exceeds 1"));
            }
            if !(b.max_m[0] > b.min_m[0] && b.max_m[1] > b.min_m[1] && b.height_m > 0.0) {
                return Err(PropagationError::InvalidScene("degenerate building"));
            }
        }
        Ok(())
    }

    fn inside_extent(&self, x: f64, y: f64) -> bool {
        (0.0..=self.extent_m[0]).contains(&x) && (0.0..=self.extent_m[1]).contains(&y)
    }

    /// True when some building encloses `p`.
    pub fn is_indoor(&self, p: [f64; 3]) -> bool {
        self.buildings.iter().any(|b| b.contains(p))
    }

    fn visible(&self, a: [f64; 3], b: [f64; 3], skip: &[usize]) -> bool {
        self.buildings
            .iter()
            .enumerate()
            .all(|(i, bld)| skip.contains(&i) || !bld.blocks(a, b))
    }

    fn walls(&self) -> Vec<Wall> {
        let mut out = Vec::with_capacity(4 * self.buildings.len());
        for (i, b) in self.buildings.iter().enumerate() {
            for axis in 0..2 {
                let other = 1 - axis;
                let span = [b.min_m[other], b.max_m[other]];
                out.push(Wall {
                    building: i,
                    axis,
                    coord: b.min_m[axis],
                    outward: -1.0,
                    span,
                    height: b.height_m,
                });
                out.push(Wall {
                    building: i,
                    axis,
                    coord: b.max_m[axis],
                    outward: 1.0,
                    span,
                    height: b.height_m,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Wall {
    building: usize,
    axis: usize,
    coord: f64,
    outward: f64,
    span: [f64; 2],
    height: f64,
}

impl Wall {
    fn in_front(&self, p: [f64; 3]) -> bool {
        (p[self.axis] - self.coord) * self.outward > GEOM_EPS
    }

    fn mirror(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = p;
        q[self.axis] = 2.0 * self.coord - p[self.axis];
        q
    }

    /// Where the segment `a -> b` crosses the wall plane, if inside the wall.
    fn hit(&self, a: [f64; 3], b: [f64; 3]) -> Option<[f64; 3]> {
        let denom = b[self.axis] - a[self.axis];
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = (self.coord - a[self.axis]) / denom;
        if !(0.0..=1.0).contains(&t) {
            return None;
        }
        let p = [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ];
        let o = p[1 - self.axis];
        if o < self.span[0] || o > self.span[1] || p[2] < 0.0 || p[2] > self.height {
            return None;
        }
        Some(p)
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn direction(from: [f64; 3], to: [f64; 3]) -> (f64, f64) {
    let (dx, dy, dz) = (to[0] - from[0], to[1] - from[1], to[2] - from[2]);
    (dy.atan2(dx), dz.atan2((dx * dx + dy * dy).sqrt()))
}

/// Free-space path with carrier phase, reflection coefficients multiplied in.
fn make_path(
    length: f64,
    refl: Complex64,
    wf: &WaveformConfig,
    first: [f64; 3],
    tx: [f64; 3],
    last: [f64; 3],
    rx: [f64; 3],
) -> Path {
    let lambda = wf.wavelength_m();
    let cycles = (length / lambda).fract();
    let carrier = Complex64::from_polar(1.0, -2.0 * PI * cycles);
    let (aod_az, aod_el) = direction(tx, first);
    let (aoa_az, aoa_el) = direction(rx, last);
    Path {
        gain: refl * carrier * (lambda / (4.0 * PI * length)),
        delay_s: length / SPEED_OF_LIGHT,
        aoa_az,
        aoa_el,
        aod_az,
        aod_el,
    }
}

/// Line-of-sight plus image-method wall reflections up to `max_order`.
pub fn trace_paths(
    scene: &Scene,
    rx: [f64; 3],
    max_order: usize,
    wf: &WaveformConfig,
) -> Result<PathSet, PropagationError> {
    if max_order > 2 {
        return Err(PropagationError::UnsupportedOrder(max_order));
    }
    if !scene.inside_extent(rx[0], rx[1]) {
        return Err(PropagationError::RxOutsideScene(rx[0], rx[1]));
    }
    let tx = scene.tx_position_m;
    let one = Complex64::new(1.0, 0.0);
    let mut paths = Vec::new();
    if scene.visible(tx, rx, &[]) {
        paths.push(make_path(dist(tx, rx), one, wf, rx, tx, tx, rx));
    }
    if max_order == 0 {
        return Ok(paths);
    }
    let walls = scene.walls();
    for w in &walls {
        if !w.in_front(tx) || !w.in_front(rx) {
            continue;
        }
        let image = w.mirror(tx);
        let Some(p) = w.hit(image, rx) else { continue };
        let skip = [w.building];
        if scene.visible(tx, p, &skip) && scene.visible(p, rx, &skip) {
            let refl = scene.buildings[w.building].reflection_coeff;
            paths.push(make_path(dist(image, rx), refl, wf, p, tx, p, rx));
        }
    }
    if max_order == 1 {
        return Ok(paths);
    }
    for (i, w1) in walls.iter().enumerate() {
        if !w1.in_front(tx) {
            continue;
        }
        let image1 = w1.mirror(tx);
        for (j, w2) in walls.iter().enumerate() {
            if i == j || !w2.in_front(rx) {
                continue;
            }
            let image2 = w2.mirror(image1);
            let Some(p2) = w2.hit(image2, rx) else { continue };
            if !w1.in_front(p2) {
                continue;
            }
            let Some(p1) = w1.hit(image1, p2) else { continue };
            if !w2.in_front(p1) {
                continue;
            }
            let (b1, b2) = (w1.building, w2.building);
            if scene.visible(tx, p1, &[b1]) && scene.visible(p1, p2, &[b1, b2]) && scene.visible(p2, rx, &[b2]) {
                let refl = scene.buildings[b1].reflection_coeff * scene.buildings[b2].reflection_coeff;
                paths.push(make_path(dist(image2, rx), refl, wf, p1, tx, p2, rx));
            }
        }
    }
    Ok(paths)
}

/// Received power in watts: `(λ²/8πη₀) |Σ E_ℓ|²` over the path phasors.
pub fn rss_at(paths: &[Path], wf: &WaveformConfig) -> Result<f64, PropagationError> {
    let mut field = Complex64::new(0.0, 0.0);
    for p in paths {
        field += field_from_gain(p.gain, wf.tx_power_w)?;
    }
    let lambda = wf.wavelength_m();
    Ok(lambda * lambda / (8.0 * PI * ETA0) * field.norm_sqr())
}

pub fn watts_to_dbm(p: f64) -> f64 {
    if p > 0.0 {
        10.0 * (p * 1e3).log10()
    } else {
        RSS_FLOOR_DBM
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    if dbm <= RSS_FLOOR_DBM {
        0.0
    } else {
        10f64.powf(dbm / 10.0) * 1e-3
    }
}

/// Raster of received power in dBm, `[height_px, width_px]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssMap {
    pub height_px: usize,
    pub width_px: usize,
    pub origin_m: [f64; 2],
    pub resolution_m: f64,
    pub grid: Vec<f64>,
}

impl RssMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.width_px + col]
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin_m[0] + (col as f64 + 0.5) * self.resolution_m,
            self.origin_m[1] + (row as f64 + 0.5) * self.resolution_m,
        ]
    }

    /// `(row, col)` of the pixel containing `pos`, clamped to the grid.
    pub fn pixel_of(&self, pos: [f64; 2]) -> (usize, usize) {
        let clamp = |v: f64, n: usize| -> usize {
            let i = v.floor();
            if i < 0.0 {
                0
            } else if i as usize >= n {
                n - 1
            } else {
                i as usize
            }
        };
        let col = clamp((pos[0] - self.origin_m[0]) / self.resolution_m, self.width_px);
        let row = clamp((pos[1] - self.origin_m[1]) / self.resolution_m, self.height_px);
        (row, col)
    }

    pub fn value_at(&self, pos: [f64; 2]) -> f64 {
        let (r, c) = self.pixel_of(pos);
        self.at(r, c)
    }
}

/// Evaluates [`rss_at`] over every pixel center at `rx_height_m`.
pub fn compute_rss_map(
    scene: &Scene,
    wf: &WaveformConfig,
    resolution_m: f64,
    max_order: usize,
    rx_height_m: f64,
) -> Result<RssMap, PropagationError> {
    scene.validate()?;
    if !(resolution_m > 0.0) {
        return Err(PropagationError::InvalidScene("resolution must be positive"));
    }
    let width_px = (scene.extent_m[0] / resolution_m).round().max(1.0) as usize;
    let height_px = (scene.extent_m[1] / resolution_m).round().max(1.0) as usize;
    let mut map = RssMap {
        height_px,
        width_px,
        origin_m: [0.0, 0.0],
        resolution_m,
        grid: vec![RSS_FLOOR_DBM; width_px * height_px],
    };
    for row in 0..height_px {
        for col in 0..width_px {
            let [x, y] = map.pixel_center(row, col);
            let x = x.min(scene.extent_m[0]);
            let y = y.min(scene.extent_m[1]);
            let paths = trace_paths(scene, [x, y, rx_height_m], max_order, wf)?;
            map.grid[row * width_px + col] = watts_to_dbm(rss_at(&paths, wf)?);
        }
    }
    Ok(map)
}

/// Dataset-wide min/max used to scale crops into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RssNormalization {
    pub min_dbm: f64,
    pub max_dbm: f64,
}

impl RssNormalization {
    /// Range over all pixels above the floor.
    pub fn from_map(map: &RssMap) -> Result<Self, PropagationError> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in map.grid.iter().filter(|v| **v > RSS_FLOOR_DBM) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) {
            return Err(PropagationError::DegenerateRange { min: lo, max: hi });
        }
        Ok(RssNormalization {
            min_dbm: lo,
            max_dbm: hi,
        })
    }

    pub fn apply(&self, dbm: f64) -> f64 {
        ((dbm - self.min_dbm) / (self.max_dbm - self.min_dbm)).clamp(0.0, 1.0)
    }
}

/// Square window of a map around a GPS-perturbed position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssCrop {
    pub size_px: usize,
    /// Normalized values in `[0, 1]`, `[size_px, size_px]` row-major.
    pub patch: Vec<f64>,
    pub center_estimate_m: [f64; 2],
}

/// Crops `crop_m` meters around `true_position_m` plus `N(0, gps_sigma_m²)` noise per axis.
pub fn crop_rss<R: Rng + ?Sized>(
    map: &RssMap,
    norm: &RssNormalization,
    true_position_m: [f64; 2],
    gps_sigma_m: f64,
    crop_m: f64,
    rng: &mut R,
) -> Result<RssCrop, PropagationError> {
    if !(norm.max_dbm > norm.min_dbm) {
        return Err(PropagationError::DegenerateRange {
            min: norm.min_dbm,
            max: norm.max_dbm,
        });
    }
    let size_px = (crop_m / map.resolution_m).round().max(1.0) as usize;
    if size_px > map.width_px || size_px > map.height_px {
        return Err(PropagationError::CropLargerThanMap {
            crop_px: size_px,
            height: map.height_px,
            width: map.width_px,
        });
    }
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    let center = [
        true_position_m[0] + gps_sigma_m * nx,
        true_position_m[1] + gps_sigma_m * ny,
    ];
    let start = |c: f64, origin: f64, n: usize| -> usize {
        let s = ((c - origin) / map.resolution_m - size_px as f64 / 2.0).round();
        s.clamp(0.0, (n - size_px) as f64) as usize
    };
    let col0 = start(center[0], map.origin_m[0], map.width_px);
    let row0 = start(center[1], map.origin_m[1], map.height_px);
    let mut patch = Vec::with_capacity(size_px * size_px);
    for r in row0..row0 + size_px {
        for c in col0..col0 + size_px {
            patch.push(norm.apply(map.at(r, c)));
        }
    }
    Ok(RssCrop {
        size_px,
        patch,
        center_estimate_m: center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wf() -> WaveformConfig {
        WaveformConfig {
            sample_interval_s: 1.0 / 50e6,
            clock_offset_s: 0.0,
            rolloff: 0.4,
            num_taps: 4,
            carrier_hz: 15e9,
            tx_power_w: 100.0,
        }
    }

    fn empty_scene() -> Scene {
        Scene {
            extent_m: [200.0, 200.0],
            tx_position_m: [0.0, 0.0, 1.5],
            buildings: vec![],
            rng_seed: 0,
        }
    }

    fn wall_building(refl: f64) -> Building {
        Building {
            min_m: [50.0, 0.0],
            max_m: [52.0, 100.0],
            height_m: 30.0,
            reflection_coeff: Complex64::new(refl, 0.0),
        }
    }

    #[test]
    fn los_only_in_empty_scene() {
        let w = wf();
        let paths = trace_paths(&empty_scene(), [100.0, 0.0, 1.5], 0, &w).unwrap();
        assert_eq!(paths.len(), 1);
        let p = paths[0];
        assert!((p.delay_s - 100.0 / SPEED_OF_LIGHT).abs() < 1e-18);
        assert!((p.delay_s - 333.564e-9).abs() < 1e-12);
        let lambda = w.wavelength_m();
        assert!((p.gain.norm() - lambda / (400.0 * PI)).abs() < 1e-15);
        assert!(p.aod_az.abs() < 1e-12 && p.aoa_az.abs() > 3.0);
    }

    #[test]
    fn enclosed_receiver_sees_nothing() {
        let mut scene = empty_scene();
        scene.buildings.push(Building {
            min_m: [90.0, 90.0],
            max_m: [110.0, 110.0],
            height_m: 10.0,
            reflection_coeff: Complex64::new(0.5, 0.0),
        });
        let paths = trace_paths(&scene, [100.0, 100.0, 1.5], 0, &wf()).unwrap();
        assert!(paths.is_empty());
        assert!(scene.is_indoor([100.0, 100.0, 1.5]));
    }

    #[test]
    fn single_wall_image_path() {
        let mut scene = empty_scene();
        scene.tx_position_m = [10.0, 20.0, 10.0];
        scene.buildings.push(wall_building(-0.6));
        let rx = [30.0, 70.0, 1.5];
        let paths = trace_paths(&scene, rx, 1, &wf()).unwrap();
        assert_eq!(paths.len(), 2);
        // hand-built image of the TX across the plane x = 50
        let image = [90.0, 20.0, 10.0];
        let d = dist(image, rx);
        assert!((paths[1].delay_s - d / SPEED_OF_LIGHT).abs() < 1e-18);
        let lambda = wf().wavelength_m();
        assert!((paths[1].gain.norm() - 0.6 * lambda / (4.0 * PI * d)).abs() < 1e-15);
        // departs toward +x, arrives from +x
        assert!(paths[1].aod_az.cos() > 0.0 && paths[1].aoa_az.cos() > 0.0);
    }

    #[test]
    fn second_order_between_parallel_walls() {
        let mut scene = empty_scene();
        scene.tx_position_m = [20.0, 50.0, 5.0];
        scene.buildings.push(Building {
            min_m: [0.0, 0.0],
            max_m: [10.0, 200.0],
            height_m: 40.0,
            reflection_coeff: Complex64::new(0.5, 0.0),
        });
        scene.buildings.push(Building {
            min_m: [40.0, 0.0],
            max_m: [50.0, 200.0],
            height_m: 40.0,
            reflection_coeff: Complex64::new(0.5, 0.0),
        });
        let rx = [30.0, 120.0, 1.5];
        let p1 = trace_paths(&scene, rx, 1, &wf()).unwrap();
        let p2 = trace_paths(&scene, rx, 2, &wf()).unwrap();
        assert_eq!(p1.len(), 3);
        assert_eq!(p2.len(), 5);
        // left then right: image at x = 2*10 - 20 = 0, then 2*40 - 0 = 80
        let want = dist([80.0, 50.0, 5.0], rx) / SPEED_OF_LIGHT;
        assert!(p2.iter().any(|p| (p.delay_s - want).abs() < 1e-15));
        assert!(p2[3..].iter().all(
            |p| (p.gain.norm() * 4.0 * PI * p.delay_s * SPEED_OF_LIGHT / wf().wavelength_m() - 0.25).abs() < 1e-9
        ));
    }

    #[test]
    fn receiver_outside_is_rejected() {
        assert!(matches!(
            trace_paths(&empty_scene(), [-1.0, 5.0, 1.5], 0, &wf()),
            Err(PropagationError::RxOutsideScene(..))
        ));
        assert!(matches!(
            trace_paths(&empty_scene(), [1.0, 5.0, 1.5], 3, &wf()),
            Err(PropagationError::UnsupportedOrder(3))
        ));
    }

    #[test]
    fn rss_examples() {
        let w = wf();
        assert_eq!(rss_at(&[], &w).unwrap(), 0.0);
        let base = Path {
            gain: Complex64::new(1e-4, 0.0),
            delay_s: 0.0,
            aoa_az: 0.0,
            aoa_el: 0.0,
            aod_az: 0.0,
            aod_el: 0.0,
        };
        let rotated = Path {
            gain: base.gain * Complex64::from_polar(1.0, 2.1),
            ..base
        };
        let p0 = rss_at(&[base], &w).unwrap();
        let p1 = rss_at(&[rotated], &w).unwrap();
        assert!((p0 - p1).abs() < 1e-15 * p0);
        let opposite = Path {
            gain: -base.gain,
            delay_s: 1e-8,
            ..base
        };
        assert!(rss_at(&[base, opposite], &w).unwrap() < 1e-15 * p0 + 1e-300);
    }

    #[test]
    fn rss_is_invariant_to_global_phase() {
        let mut scene = empty_scene();
        scene.tx_position_m = [10.0, 20.0, 10.0];
        scene.buildings.push(wall_building(0.7));
        let w = wf();
        let paths = trace_paths(&scene, [30.0, 60.0, 1.5], 1, &w).unwrap();
        let rot = Complex64::from_polar(1.0, 0.8);
        let turned: Vec<Path> = paths
            .iter()
            .map(|p| Path {
                gain: p.gain * rot,
                ..*p
            })
            .collect();
        let a = rss_at(&paths, &w).unwrap();
        let b = rss_at(&turned, &w).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn empty_scene_map_decays_radially() {
        let mut scene = empty_scene();
        scene.extent_m = [40.0, 30.0];
        scene.tx_position_m = [20.0, 15.0, 10.0];
        let map = compute_rss_map(&scene, &wf(), 2.0, 0, DEFAULT_RX_HEIGHT_M).unwrap();
        assert_eq!((map.height_px, map.width_px), (15, 20));
        let mut cells: Vec<(f64, f64)> = Vec::new();
        for r in 0..map.height_px {
            for c in 0..map.width_px {
                let [x, y] = map.pixel_center(r, c);
                cells.push((((x - 20.0).powi(2) + (y - 15.0).powi(2)).sqrt(), map.at(r, c)));
            }
        }
        for a in &cells {
            for b in &cells {
                if a.0 > b.0 + 1e-9 {
                    assert!(a.1 < b.1);
                }
            }
        }
    }

    #[test]
    fn inverse_square_law() {
        let w = wf();
        let mut scene = empty_scene();
        scene.tx_position_m = [0.0, 0.0, 21.5];
        let near = rss_at(&trace_paths(&scene, [0.0, 0.0, 1.5], 0, &w).unwrap(), &w).unwrap();
        // 3D distance 40 m at the same receiver height
        let x = (40.0f64.powi(2) - 20.0f64.powi(2)).sqrt();
        let far = rss_at(&trace_paths(&scene, [x, 0.0, 1.5], 0, &w).unwrap(), &w).unwrap();
        let diff = watts_to_dbm(near) - watts_to_dbm(far);
        assert!((diff - 6.0206).abs() < 0.1, "{diff}");
    }

    /// Brute-force visibility: march along the segment and test each sample point.
    fn sampled_blocked(b: &Building, a: [f64; 3], c: [f64; 3]) -> bool {
        (1..2000).any(|i| {
            let t = i as f64 / 2000.0;
            b.contains([
                a[0] + t * (c[0] - a[0]),
                a[1] + t * (c[1] - a[1]),
                a[2] + t * (c[2] - a[2]),
            ])
        })
    }

    #[test]
    fn shadow_pixels_sit_at_the_floor() {
        let mut scene = empty_scene();
        scene.extent_m = [60.0, 60.0];
        scene.tx_position_m = [5.0, 30.0, 8.0];
        let b = Building {
            min_m: [20.0, 20.0],
            max_m: [30.0, 40.0],
            height_m: 12.0,
            reflection_coeff: Complex64::new(0.5, 0.0),
        };
        scene.buildings.push(b);
        let map = compute_rss_map(&scene, &wf(), 3.0, 0, DEFAULT_RX_HEIGHT_M).unwrap();
        let mut shadowed = 0;
        for r in 0..map.height_px {
            for c in 0..map.width_px {
                let [x, y] = map.pixel_center(r, c);
                let rx = [x, y, DEFAULT_RX_HEIGHT_M];
                let blocked = sampled_blocked(&b, scene.tx_position_m, rx) || b.contains(rx);
                assert_eq!(map.at(r, c) == RSS_FLOOR_DBM, blocked, "pixel {r},{c}");
                shadowed += blocked as usize;
            }
        }
        assert!(shadowed > 10);
    }

    /// Independent per-pixel enumeration for one thin reflecting wall.
    #[test]
    fn small_map_matches_enumeration() {
        let w = wf();
        let mut scene = empty_scene();
        scene.extent_m = [4.0, 4.0];
        scene.tx_position_m = [1.0, 2.0, 3.0];
        scene.buildings.push(Building {
            min_m: [6.0, -50.0],
            max_m: [6.5, 50.0],
            height_m: 20.0,
            reflection_coeff: Complex64::new(0.3, 0.4),
        });
        let map = compute_rss_map(&scene, &w, 1.0, 1, DEFAULT_RX_HEIGHT_M).unwrap();
        let lambda = w.wavelength_m();
        let tx = scene.tx_position_m;
        for r in 0..4 {
            for c in 0..4 {
                let rx = [c as f64 + 0.5, r as f64 + 0.5, DEFAULT_RX_HEIGHT_M];
                let mut field = Complex64::new(0.0, 0.0);
                for (len, refl) in [
                    (dist(tx, rx), Complex64::new(1.0, 0.0)),
                    (dist([12.0 - tx[0], tx[1], tx[2]], rx), Complex64::new(0.3, 0.4)),
                ] {
                    let amp = lambda / (4.0 * PI * len);
                    let phase = -2.0 * PI * len / lambda;
                    field += refl * Complex64::from_polar(amp, phase) * (2.0 * w.tx_power_w.sqrt() / ETA0.sqrt());
                }
                let want = lambda * lambda / (8.0 * PI * ETA0) * field.norm_sqr();
                let got = dbm_to_watts(map.at(r, c));
                assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn reflected_only_pixels_scale_with_coefficients() {
        let w = wf();
        let mut scene = empty_scene();
        scene.extent_m = [40.0, 40.0];
        scene.tx_position_m = [5.0, 20.0, 6.0];
        // tall blocker hiding the right half from the TX, reflector on the right edge
        scene.buildings.push(Building {
            min_m: [10.0, 0.0],
            max_m: [11.0, 40.0],
            height_m: 50.0,
            reflection_coeff: Complex64::new(0.0, 0.0),
        });
        scene.buildings.push(Building {
            min_m: [-30.0, 45.0],
            max_m: [80.0, 46.0],
            height_m: 50.0,
            reflection_coeff: Complex64::new(0.8, 0.1),
        });
        let scaled = {
            let mut s = scene.clone();
            s.buildings[1].reflection_coeff *= 0.5;
            s
        };
        let m0 = compute_rss_map(&scene, &w, 2.0, 1, DEFAULT_RX_HEIGHT_M).unwrap();
        let m1 = compute_rss_map(&scaled, &w, 2.0, 1, DEFAULT_RX_HEIGHT_M).unwrap();
        let mut checked = 0;
        for r in 0..m0.height_px {
            for c in 0..m0.width_px {
                let [x, y] = m0.pixel_center(r, c);
                let paths = trace_paths(&scene, [x, y, DEFAULT_RX_HEIGHT_M], 1, &w).unwrap();
                let los = scene.visible(scene.tx_position_m, [x, y, DEFAULT_RX_HEIGHT_M], &[]);
                if !los && !paths.is_empty() {
                    assert!((m1.at(r, c) - m0.at(r, c) - 20.0 * 0.5f64.log10()).abs() < 1e-9);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn crop_examples() {
        let w = wf();
        let mut scene = empty_scene();
        scene.extent_m = [30.0, 30.0];
        scene.tx_position_m = [15.0, 15.0, 10.0];
        let map = compute_rss_map(&scene, &w, 1.0, 0, DEFAULT_RX_HEIGHT_M).unwrap();
        let norm = RssNormalization::from_map(&map).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let crop = crop_rss(&map, &norm, [10.0, 12.0], 0.0, 6.0, &mut rng).unwrap();
        assert_eq!(crop.size_px, 6);
        // window starts at (10 - 3, 12 - 3) = pixel (row 9, col 7)
        for r in 0..6 {
            for c in 0..6 {
                let want = norm.apply(map.at(9 + r, 7 + c));
                assert_eq!(crop.patch[r * 6 + c], want);
            }
        }
        assert!(crop.patch.iter().all(|v| (0.0..=1.0).contains(v)));

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ca = crop_rss(&map, &norm, [3.0, 28.0], 3.0, 6.0, &mut a).unwrap();
        let cb = crop_rss(&map, &norm, [3.0, 28.0], 3.0, 6.0, &mut b).unwrap();
        assert_eq!(ca, cb);
        assert!(matches!(
            crop_rss(&map, &norm, [3.0, 3.0], 0.0, 60.0, &mut a),
            Err(PropagationError::CropLargerThanMap { .. })
        ));
    }

    #[test]
    fn gps_noise_statistics() {
        let map = RssMap {
            height_px: 4,
            width_px: 4,
            origin_m: [0.0, 0.0],
            resolution_m: 1.0,
            grid: (0..16).map(|v| -100.0 + v as f64).collect(),
        };
        let norm = RssNormalization::from_map(&map).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let (mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let c = crop_rss(&map, &norm, [2.0, 2.0], 3.0, 2.0, &mut rng).unwrap();
            let (dx, dy) = (c.center_estimate_m[0] - 2.0, c.center_estimate_m[1] - 2.0);
            sx += dx;
            sy += dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let n = n as f64;
        let std_x = (sxx / n - (sx / n).powi(2)).sqrt();
        let std_y = (syy / n - (sy / n).powi(2)).sqrt();
        assert!(
            (std_x - 3.0).abs() < 0.1 && (std_y - 3.0).abs() < 0.1,
            "{std_x} {std_y}"
        );
    }

    #[test]
    fn floor_only_map_has_no_range() {
        let map = RssMap {
            height_px: 2,
            width_px: 2,
            origin_m: [0.0, 0.0],
            resolution_m: 1.0,
            grid: vec![RSS_FLOOR_DBM; 4],
        };
        assert!(matches!(
            RssNormalization::from_map(&map),
            Err(PropagationError::DegenerateRange { .. })
        ));
    }
}
