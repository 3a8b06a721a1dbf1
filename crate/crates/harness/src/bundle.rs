//! On-disk dataset format.
//!
//! A bundle is a directory holding `manifest.json` plus four blobs:
//!
//! | file            | contents                                                        |
//! |-----------------|-----------------------------------------------------------------|
//! | `channels.bin`  | `f32` LE, interleaved re/im, index order `[sample*steps, d, nr, nt]` |
//! | `map.bin`       | `f32` LE RSS map in dBm, `[height, width]`                     |
//! | `crops.bin`     | `f32` LE normalized crops, `[sample, crop, crop]`              |
//! | `locations.csv` | one [`LocationRow`] per sample                                 |
//!
//! Every blob carries a 64-bit checksum (the first 8 bytes of its SHA-256),
//! verified before its size is compared with the manifest dimensions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mbce_core::channel::ChannelTensor;
use mbce_core::propagation::RssMap;
use mbce_core::Complex64;

use crate::dataset::GenConfig;
use crate::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const CHANNELS: &str = "channels.bin";
const MAP: &str = "map.bin";
const CROPS: &str = "crops.bin";
const LOCATIONS: &str = "locations.csv";

/// First 8 bytes of SHA-256 as 16 hex digits.
pub fn hash_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub len_bytes: u64,
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub rss_min_dbm: f64,
    pub rss_max_dbm: f64,
    /// Largest RSS on the map, watts.
    pub rss_max_w: f64,
    /// Largest channel entry magnitude over the dataset.
    pub h_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub n_samples: usize,
    /// Snapshots per sample; 1 without a trajectory.
    pub steps: usize,
    pub d_taps: usize,
    pub nr: usize,
    pub nt: usize,
    pub crop_px: usize,
    pub map_height_px: usize,
    pub map_width_px: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub scene_hash: String,
    pub seed: u64,
    pub normalization: Normalization,
    pub generator: GenConfig,
    pub blobs: BTreeMap<String, BlobInfo>,
}

/// Receiver ground truth and RSS readings for one sample (step 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationRow {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    /// GPS-perturbed position the crop is centred on.
    pub est_x_m: f64,
    pub est_y_m: f64,
    pub heading_rad: f64,
    /// Coherent field power of every traced path at the true position.
    pub rss_true_w: f64,
    /// Map pixel under the estimated position.
    pub rss_center_w: f64,
    /// Mean linear power over the crop.
    pub rss_crop_mean_w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    /// `n_samples * steps` tensors, sample-major.
    pub channels: Vec<ChannelTensor>,
    pub map: RssMap,
    pub crops: Vec<Vec<f64>>,
    pub locations: Vec<LocationRow>,
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn read_f32s(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
}

impl DatasetBundle {
    fn blob_bytes(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let mut ch = Vec::new();
        for h in &self.channels {
            for v in h.as_slice() {
                push_f32(&mut ch, v.re);
                push_f32(&mut ch, v.im);
            }
        }
        let mut map = Vec::with_capacity(self.map.grid.len() * 4);
        for &v in &self.map.grid {
            push_f32(&mut map, v);
        }
        let mut crops = Vec::new();
        for &v in self.crops.iter().flatten() {
            push_f32(&mut crops, v);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.locations {
            w.serialize(row)?;
        }
        let locations = w
            .into_inner()
            .map_err(|e| HarnessError::io(LOCATIONS, e.into_error()))?;
        Ok(vec![(CHANNELS, ch), (MAP, map), (CROPS, crops), (LOCATIONS, locations)])
    }

    /// Recomputes blob sizes and checksums into the manifest.
    pub fn seal(&mut self) -> Result<()> {
        let blobs = self
            .blob_bytes()?
            .into_iter()
            .map(|(name, bytes)| {
                (
                    name.to_string(),
                    BlobInfo {
                        len_bytes: bytes.len() as u64,
                        checksum: hash_hex(&bytes),
                    },
                )
            })
            .collect();
        self.manifest.blobs = blobs;
        Ok(())
    }

    /// Digest over the manifest and every blob checksum.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hash_hex(serde_json::to_string(&self.manifest)?.as_bytes()))
    }
}

/// Writes `dir/manifest.json` and the blobs, creating `dir` if needed.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut manifest = bundle.manifest.clone();
    manifest.blobs.clear();
    for (name, bytes) in bundle.blob_bytes()? {
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(|e| HarnessError::io(&path, e))?;
        manifest.blobs.insert(
            name.to_string(),
            BlobInfo {
                len_bytes: bytes.len() as u64,
                checksum: hash_hex(&bytes),
            },
        );
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(())
}

fn expected_len(m: &Manifest, name: &str) -> Option<u64> {
    let n = m.n_samples as u64;
    Some(match name {
        CHANNELS => n * m.steps as u64 * (m.d_taps * m.nr * m.nt) as u64 * 8,
        MAP => (m.map_height_px * m.map_width_px) as u64 * 4,
        CROPS => n * (m.crop_px * m.crop_px) as u64 * 4,
        _ => return None,
    })
}

fn read_blob(dir: &Path, m: &Manifest, name: &str) -> Result<Vec<u8>> {
    let info = m
        .blobs
        .get(name)
        .ok_or_else(|| HarnessError::InvalidSpec(format!("manifest lists no blob {name}")))?;
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    if hash_hex(&bytes) != info.checksum {
        return Err(HarnessError::ChecksumMismatch(name.to_string()));
    }
    if let Some(expected) = expected_len(m, name) {
        if bytes.len() as u64 != expected {
            return Err(HarnessError::SizeMismatch {
                blob: name.to_string(),
                expected,
                got: bytes.len() as u64,
            });
        }
    }
    Ok(bytes)
}

/// Reads a bundle written by [`save_bundle`], verifying checksums, sizes and
/// normalization constants.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::SchemaVersionUnsupported(manifest.schema_version));
    }
    let nrm = &manifest.normalization;
    if !(nrm.rss_max_w > 0.0 && nrm.h_max_abs > 0.0 && nrm.rss_max_dbm > nrm.rss_min_dbm) {
        return Err(HarnessError::InvalidSpec(
            "normalization constants must be positive".into(),
        ));
    }
    let m = &manifest;

    let raw = read_blob(dir, m, CHANNELS)?;
    let vals: Vec<f64> = read_f32s(&raw).collect();
    let per = m.d_taps * m.nr * m.nt;
    let channels = vals
        .chunks_exact(2 * per)
        .map(|c| {
            let data = c.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
            ChannelTensor::from_vec(m.d_taps, m.nr, m.nt, data)
        })
        .collect();

    let raw = read_blob(dir, m, MAP)?;
    let map = RssMap {
        height_px: m.map_height_px,
        width_px: m.map_width_px,
        origin_m: [0.0, 0.0],
        resolution_m: m.generator.map_resolution_m,
        grid: read_f32s(&raw).collect(),
    };

    let raw = read_blob(dir, m, CROPS)?;
    let vals: Vec<f64> = read_f32s(&raw).collect();
    let crops = vals.chunks_exact(m.crop_px * m.crop_px).map(<[f64]>::to_vec).collect();

    let raw = read_blob(dir, m, LOCATIONS)?;
    let locations = csv::Reader::from_reader(raw.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<LocationRow>, _>>()?;
    if locations.len() != m.n_samples {
        return Err(HarnessError::SizeMismatch {
            blob: LOCATIONS.to_string(),
            expected: m.n_samples as u64,
            got: locations.len() as u64,
        });
    }

    Ok(DatasetBundle {
        manifest,
        channels,
        map,
        crops,
        locations,
    })
}
