//! Synthetic datasets: receiver sampling, path tracing, channel synthesis and
//! RSS crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mbce_core::channel::{synthesize_channel, ArrayConfig, ChannelTensor, Path, WaveformConfig, DELAY_MARGIN_TAPS};
use mbce_core::propagation::{
    compute_rss_map, crop_rss, dbm_to_watts, rss_at, trace_paths, Building, RssMap, RssNormalization, Scene,
    DEFAULT_RX_HEIGHT_M, RSS_FLOOR_DBM,
};
use mbce_core::{Complex64, SPEED_OF_LIGHT};

use crate::bundle::{DatasetBundle, LocationRow, Manifest, Normalization, SCHEMA_VERSION};
use crate::{HarnessError, Result};

/// Attempts per sample before a scene is declared degenerate.
const MAX_TRIES: usize = 2000;

/// `T_c ≈ 0.5 c / (v f_c)`.
pub fn coherence_time(velocity_mps: f64, carrier_hz: f64) -> Result<f64> {
    if !(velocity_mps > 0.0) {
        return Err(HarnessError::NonPositiveInput("velocity"));
    }
    if !(carrier_hz > 0.0) {
        return Err(HarnessError::NonPositiveInput("carrier frequency"));
    }
    Ok(0.5 * SPEED_OF_LIGHT / (velocity_mps * carrier_hz))
}

/// Straight-line receiver motion sampled every `step_s` for `steps` snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub velocity_mps: f64,
    pub step_s: f64,
    pub steps: usize,
}

impl TrajectoryConfig {
    /// 35 km/h with steps 5% above the coherence time.
    pub fn urban(carrier_hz: f64, steps: usize) -> Result<Self> {
        let velocity_mps = 35.0 / 3.6;
        Ok(TrajectoryConfig {
            velocity_mps,
            step_s: 1.05 * coherence_time(velocity_mps, carrier_hz)?,
            steps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub scene: Scene,
    pub array: ArrayConfig,
    pub waveform: WaveformConfig,
    pub n_samples: usize,
    pub map_resolution_m: f64,
    pub crop_m: f64,
    pub gps_sigma_m: f64,
    pub max_order: usize,
    #[serde(default = "default_rx_height")]
    pub rx_height_m: f64,
    #[serde(default)]
    pub trajectory: Option<TrajectoryConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_rx_height() -> f64 {
    DEFAULT_RX_HEIGHT_M
}

/// A 120 m square with a 3x3 grid of blocks and the transmitter just above
/// the corner of the central block.
pub fn urban_grid_scene() -> Scene {
    let heights = [18.0, 24.0, 15.0, 21.0, 30.0, 27.0, 16.0, 22.0, 19.0];
    let phases = [3.0, 2.6, 2.9, 2.4, 3.1, 2.7, 2.5, 2.8, 3.0];
    let mut buildings = Vec::new();
    for (i, (&h, &ph)) in heights.iter().zip(&phases).enumerate() {
        let (bx, by) = ((i % 3) as f64, (i / 3) as f64);
        let min = [8.0 + 40.0 * bx, 8.0 + 40.0 * by];
        buildings.push(Building {
            min_m: min,
            max_m: [min[0] + 24.0, min[1] + 24.0],
            height_m: h,
            reflection_coeff: Complex64::from_polar(0.5, ph),
        });
    }
    Scene {
        extent_m: [120.0, 120.0],
        tx_position_m: [46.0, 46.0, 32.0],
        buildings,
        rng_seed: 0,
    }
}

impl GenConfig {
    /// Desk-scale defaults: 15 GHz, 100 MHz (4 taps span 40 ns), 2x2 receive
    /// and 8x8 transmit arrays, 1 m map pixels, 12 m crops, 3 m GPS error.
    pub fn desk(n_samples: usize, seed: u64) -> Self {
        GenConfig {
            scene: urban_grid_scene(),
            array: ArrayConfig {
                nt_x: 8,
                nt_y: 8,
                nr_x: 2,
                nr_y: 2,
            },
            waveform: WaveformConfig {
                sample_interval_s: 10e-9,
                clock_offset_s: 0.0,
                rolloff: 0.4,
                num_taps: 4,
                carrier_hz: 15e9,
                tx_power_w: 100.0,
            },
            n_samples,
            map_resolution_m: 1.0,
            crop_m: 12.0,
            gps_sigma_m: 3.0,
            max_order: 2,
            rx_height_m: DEFAULT_RX_HEIGHT_M,
            trajectory: None,
            seed,
        }
    }

    pub fn with_trajectory(mut self, t: TrajectoryConfig) -> Self {
        self.trajectory = Some(t);
        self
    }

    pub fn steps(&self) -> usize {
        self.trajectory.map_or(1, |t| t.steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.array.validate()?;
        self.waveform.validate()?;
        if self.n_samples == 0 {
            return Err(HarnessError::NonPositiveInput("sample count"));
        }
        if !(self.map_resolution_m > 0.0) || !(self.crop_m > 0.0) {
            return Err(HarnessError::NonPositiveInput("map resolution and crop size"));
        }
        if !(self.gps_sigma_m >= 0.0) {
            return Err(HarnessError::InvalidSpec("GPS sigma must be non-negative".into()));
        }
        if let Some(t) = self.trajectory {
            if t.steps == 0 {
                return Err(HarnessError::NonPositiveInput("trajectory steps"));
            }
            let tc = coherence_time(t.velocity_mps, self.waveform.carrier_hz)?;
            if !(t.step_s >= tc) {
                return Err(HarnessError::StepBelowCoherence {
                    step_s: t.step_s,
                    coherence_s: tc,
                });
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_channel(h: &mut ChannelTensor) {
    for v in h.as_mut_slice() {
        *v = Complex64::new(quantize(v.re), quantize(v.im));
    }
}

/// Paths whose delay relative to `t_off` the tap window can represent.
fn in_window(paths: &[Path], t_off: f64, wf: &WaveformConfig) -> Vec<Path> {
    let hi = (wf.num_taps as f64 - 1.0 + DELAY_MARGIN_TAPS) * wf.sample_interval_s;
    paths
        .iter()
        .filter(|p| {
            let s = p.delay_s - t_off;
            s >= 0.0 && s <= hi
        })
        .copied()
        .collect()
}

struct Draw {
    positions: Vec<[f64; 3]>,
    heading: f64,
    channels: Vec<ChannelTensor>,
    all_paths: Vec<Path>,
}

fn draw_sample(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Draw> {
    let scene = &cfg.scene;
    let (step_m, steps) = cfg
        .trajectory
        .map_or((0.0, 1), |t| (t.velocity_mps * t.step_s, t.steps));
    'retry: for _ in 0..MAX_TRIES {
        let start = [
            rng.random_range(0.0..scene.extent_m[0]),
            rng.random_range(0.0..scene.extent_m[1]),
            cfg.rx_height_m,
        ];
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let positions: Vec<[f64; 3]> = (0..steps)
            .map(|k| {
                let s = k as f64 * step_m;
                [start[0] + s * heading.cos(), start[1] + s * heading.sin(), start[2]]
            })
            .collect();
        let mut traced = Vec::with_capacity(steps);
        for p in &positions {
            let inside = (0.0..=scene.extent_m[0]).contains(&p[0]) && (0.0..=scene.extent_m[1]).contains(&p[1]);
            if !inside || scene.is_indoor(*p) {
                continue 'retry;
            }
            let paths = trace_paths(scene, *p, cfg.max_order, &cfg.waveform)?;
            if paths.is_empty() {
                continue 'retry;
            }
            traced.push(paths);
        }
        // One clock offset per trajectory: the first arrival of snapshot 0.
        let t_off = traced[0].iter().map(|p| p.delay_s).fold(f64::INFINITY, f64::min);
        let wf = WaveformConfig {
            clock_offset_s: t_off,
            ..cfg.waveform
        };
        let mut channels = Vec::with_capacity(steps);
        for paths in &traced {
            let kept = in_window(paths, t_off, &wf);
            if kept.is_empty() {
                continue 'retry;
            }
            let mut h = synthesize_channel(&kept, &cfg.array, &wf)?;
            if !(h.norm_sqr() > 0.0) {
                continue 'retry;
            }
            quantize_channel(&mut h);
            channels.push(h);
        }
        return Ok(Draw {
            positions,
            heading,
            channels,
            all_paths: traced.swap_remove(0),
        });
    }
    Err(HarnessError::SceneDegenerate)
}

/// Builds a bundle: one RSS map for the scene, then `n_samples` receivers
/// (or short trajectories), each with its channels, crop and power values.
///
/// All stored values are rounded to `f32`, so a saved and reloaded bundle
/// compares equal to the one returned here.
pub fn generate_dataset(cfg: &GenConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut map = compute_rss_map(
        &cfg.scene,
        &cfg.waveform,
        cfg.map_resolution_m,
        cfg.max_order,
        cfg.rx_height_m,
    )?;
    for v in &mut map.grid {
        *v = quantize(*v);
    }
    if map.grid.iter().all(|&v| v <= RSS_FLOOR_DBM) {
        return Err(HarnessError::SceneDegenerate);
    }
    let norm = RssNormalization::from_map(&map)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = cfg.steps();
    let mut channels = Vec::with_capacity(cfg.n_samples * steps);
    let mut crops = Vec::with_capacity(cfg.n_samples);
    let mut locations = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let draw = draw_sample(cfg, &mut rng)?;
        let p0 = draw.positions[0];
        let crop = crop_rss(&map, &norm, [p0[0], p0[1]], cfg.gps_sigma_m, cfg.crop_m, &mut rng)?;
        let center_w = dbm_to_watts(map.value_at(crop.center_estimate_m));
        let crop_mean_w = crop
            .patch
            .iter()
            .map(|v| dbm_to_watts(norm.min_dbm + v * (norm.max_dbm - norm.min_dbm)))
            .sum::<f64>()
            / crop.patch.len() as f64;
        locations.push(LocationRow {
            x_m: quantize(p0[0]),
            y_m: quantize(p0[1]),
            z_m: quantize(p0[2]),
            est_x_m: quantize(crop.center_estimate_m[0]),
            est_y_m: quantize(crop.center_estimate_m[1]),
            heading_rad: quantize(draw.heading),
            rss_true_w: quantize(rss_at(&draw.all_paths, &cfg.waveform)?),
            rss_center_w: quantize(center_w),
            rss_crop_mean_w: quantize(crop_mean_w),
        });
        crops.push(crop.patch.iter().map(|&v| quantize(v)).collect::<Vec<f64>>());
        channels.extend(draw.channels);
    }
    let crop_px = crops[0].len().isqrt();
    let h_max_abs = channels
        .iter()
        .flat_map(|h| h.as_slice().iter().map(|v| v.norm()))
        .fold(0.0, f64::max);
    let rss_max_w = dbm_to_watts(norm.max_dbm);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        n_samples: cfg.n_samples,
        steps,
        d_taps: cfg.waveform.num_taps,
        nr: cfg.array.nr(),
        nt: cfg.array.nt(),
        crop_px,
        map_height_px: map.height_px,
        map_width_px: map.width_px,
        carrier_hz: cfg.waveform.carrier_hz,
        bandwidth_hz: cfg.waveform.bandwidth_hz(),
        scene_hash: crate::bundle::hash_hex(serde_json::to_string(&cfg.scene)?.as_bytes()),
        seed: cfg.seed,
        normalization: Normalization {
            rss_min_dbm: norm.min_dbm,
            rss_max_dbm: norm.max_dbm,
            rss_max_w,
            h_max_abs,
        },
        generator: cfg.clone(),
        blobs: Default::default(),
    };
    let mut bundle = DatasetBundle {
        manifest,
        channels,
        map,
        crops,
        locations,
    };
    bundle.seal()?;
    Ok(bundle)
}

impl DatasetBundle {
    /// Snapshot `step` of sample `i`.
    pub fn channel(&self, i: usize, step: usize) -> &ChannelTensor {
        &self.channels[i * self.manifest.steps + step]
    }

    pub fn array(&self) -> ArrayConfig {
        self.manifest.generator.array
    }

    pub fn waveform(&self) -> WaveformConfig {
        self.manifest.generator.waveform
    }

    pub fn rss_normalization(&self) -> RssNormalization {
        RssNormalization {
            min_dbm: self.manifest.normalization.rss_min_dbm,
            max_dbm: self.manifest.normalization.rss_max_dbm,
        }
    }

    pub fn map(&self) -> &RssMap {
        &self.map
    }
}
