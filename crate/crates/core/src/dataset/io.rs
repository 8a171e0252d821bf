use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetConfig, LensRecord, Role, Sample};
use crate::optics::{FovImageSet, Image, LensInstance, MisalignmentOffset};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;
const CHECKSUMS: &str = "checksums.sha256";
const SEALED_DIR: &str = "sealed";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u64,
    pub role: Role,
    pub dataset_seed: u64,
    pub config_hash: String,
    pub lens_ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LensFile {
    lens: LensInstance,
    origin: MisalignmentOffset,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    sample_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dx_um: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dy_um: Option<f64>,
    rng_seed: u64,
    fov_files: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditLine {
    lens_id: u32,
    sample_id: u32,
    dx_um: f64,
    dy_um: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of the canonical JSON form of a dataset configuration.
pub fn config_hash(config: &DatasetConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

pub fn manifest_for(ds: &Dataset) -> Manifest {
    Manifest {
        schema_version: SCHEMA_VERSION,
        role: ds.role(),
        dataset_seed: ds.dataset_seed,
        config_hash: ds.config_hash(),
        lens_ids: ds.lens_ids(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn schema_err(path: &Path, msg: impl ToString) -> Error {
    Error::Schema { path: path.to_path_buf(), msg: msg.to_string() }
}

fn to_json_pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let side = img.side() as u32;
    let buf = image::GrayImage::from_raw(side, side, img.quantized_u8()).expect("buffer matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out.into_inner())
}

fn decode_png(path: &Path, side: usize) -> Result<Image> {
    let bytes = read_file(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    if img.color() != image::ColorType::L8 || img.width() as usize != side || img.height() as usize != side {
        return Err(schema_err(path, format!("expected {side}x{side} 8-bit grayscale")));
    }
    Image::from_u8(side, img.as_luma8().expect("checked L8").as_raw())
}

/// Writes the dataset under `root`, replacing any previous content.
///
/// Files are staged in a sibling directory and moved into place at the end,
/// so readers never observe a half-written dataset.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<Manifest> {
    ds.validate()?;
    let staging = staging_path(root);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    mkdir(&staging)?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    files.push(("config.json".into(), to_json_pretty(&ds.config)));
    for rec in &ds.lenses {
        let dir = format!("lens_{}", rec.lens.lens_id);
        mkdir(&staging.join(&dir).join("images"))?;
        files.push((
            format!("{dir}/lens.json"),
            to_json_pretty(&LensFile { lens: rec.lens.clone(), origin: rec.origin }),
        ));
        let mut lines = Vec::new();
        for s in &rec.samples {
            let fov_files: Vec<String> =
                (0..s.images.images.len()).map(|i| format!("images/{}_fov{i}.png", s.sample_id)).collect();
            let line = SampleLine {
                sample_id: s.sample_id,
                dx_um: s.label.map(|l| l.dx),
                dy_um: s.label.map(|l| l.dy),
                rng_seed: s.rng_seed,
                fov_files: fov_files.clone(),
            };
            serde_json::to_writer(&mut lines, &line).expect("serializable");
            lines.push(b'\n');
        }
        files.push((format!("{dir}/samples.jsonl"), lines));
        let pngs = rec
            .samples
            .par_iter()
            .flat_map_iter(|s| {
                let dir = &dir;
                s.images
                    .images
                    .iter()
                    .enumerate()
                    .map(move |(i, img)| Ok((format!("{dir}/images/{}_fov{i}.png", s.sample_id), encode_png(img)?)))
            })
            .collect::<Result<Vec<_>>>()?;
        files.extend(pngs);
    }
    let manifest = manifest_for(ds);
    files.push(("manifest.json".into(), to_json_pretty(&manifest)));
    for (rel, bytes) in &files {
        write_file(&staging.join(rel), bytes)?;
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let mut sums = String::new();
    for (rel, bytes) in &files {
        sums.push_str(&format!("{}  {rel}\n", sha256_hex(bytes)));
    }
    write_file(&staging.join(CHECKSUMS), sums.as_bytes())?;

    if let Some(sealed) = &ds.sealed {
        let dir = staging.join(SEALED_DIR);
        mkdir(&dir)?;
        let lens_id = ds.lenses[0].lens.lens_id;
        let mut out = Vec::new();
        for (i, p) in sealed.iter().enumerate() {
            let line = AuditLine { lens_id, sample_id: i as u32, dx_um: p.dx, dy_um: p.dy };
            serde_json::to_writer(&mut out, &line).expect("serializable");
            out.push(b'\n');
        }
        write_file(&dir.join("audit.jsonl"), &out)?;
    }

    if root.exists() {
        fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
    }
    if let Some(parent) = root.parent() {
        mkdir(parent)?;
    }
    fs::rename(&staging, root).map_err(|e| Error::io(root, e))?;
    Ok(manifest)
}

fn staging_path(root: &Path) -> PathBuf {
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    root.with_file_name(format!(".{name}.partial"))
}

/// Parses and version-checks `manifest.json` without touching anything else.
pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let bytes = read_file(&path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| schema_err(&path, e))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| schema_err(&path, "missing schema_version"))?;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion { path, found: version, expected: SCHEMA_VERSION });
    }
    serde_json::from_value(value).map_err(|e| schema_err(&path, e))
}

/// Checks the manifest version and every file checksum without decoding images.
pub fn verify_dataset(root: &Path) -> Result<Manifest> {
    let manifest = read_manifest(root)?;
    verify_checksums(root)?;
    Ok(manifest)
}

fn verify_checksums(root: &Path) -> Result<()> {
    let path = root.join(CHECKSUMS);
    let text = String::from_utf8(read_file(&path)?).map_err(|e| schema_err(&path, e))?;
    let entries = text
        .lines()
        .map(|line| line.split_once("  ").ok_or_else(|| schema_err(&path, format!("bad line `{line}`"))))
        .collect::<Result<Vec<_>>>()?;
    if !entries.iter().any(|(_, rel)| *rel == "manifest.json") {
        return Err(schema_err(&path, "manifest.json not covered"));
    }
    entries.par_iter().try_for_each(|(sum, rel)| {
        if rel.starts_with(SEALED_DIR) || rel.contains("..") {
            return Err(schema_err(&path, format!("illegal entry {rel}")));
        }
        let file = root.join(rel);
        if sha256_hex(&read_file(&file)?) != *sum {
            return Err(Error::Checksum(file));
        }
        Ok(())
    })
}

/// Loads a dataset written by [`save_dataset`], verifying version, checksums
/// and the configuration hash. The audit sidecar is never read.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    verify_checksums(root)?;
    let cfg_path = root.join("config.json");
    let config: DatasetConfig = serde_json::from_slice(&read_file(&cfg_path)?).map_err(|e| schema_err(&cfg_path, e))?;
    if config_hash(&config) != manifest.config_hash {
        return Err(schema_err(&cfg_path, "configuration does not match manifest hash"));
    }
    if config.role != manifest.role || config.lens_ids != manifest.lens_ids {
        return Err(schema_err(&cfg_path, "role or lens ids disagree with manifest"));
    }
    let side = config.domain.image_side;
    let labeled = config.role.is_labeled();
    let lenses = manifest
        .lens_ids
        .iter()
        .map(|&id| {
            let dir = root.join(format!("lens_{id}"));
            let lens_path = dir.join("lens.json");
            let lf: LensFile =
                serde_json::from_slice(&read_file(&lens_path)?).map_err(|e| schema_err(&lens_path, e))?;
            if lf.lens.lens_id != id {
                return Err(schema_err(&lens_path, "lens id mismatch"));
            }
            let sp = dir.join("samples.jsonl");
            let file = fs::File::open(&sp).map_err(|e| Error::io(&sp, e))?;
            let lines = BufReader::new(file)
                .lines()
                .map(|l| {
                    let l = l.map_err(|e| Error::io(&sp, e))?;
                    serde_json::from_str::<SampleLine>(&l).map_err(|e| schema_err(&sp, e))
                })
                .collect::<Result<Vec<_>>>()?;
            let samples = lines
                .into_par_iter()
                .enumerate()
                .map(|(i, line)| {
                    if line.sample_id as usize != i {
                        return Err(schema_err(&sp, "sample ids not contiguous"));
                    }
                    let label = match (line.dx_um, line.dy_um) {
                        (Some(dx), Some(dy)) => Some(MisalignmentOffset::new(dx, dy)),
                        (None, None) => None,
                        _ => return Err(schema_err(&sp, "partial label")),
                    };
                    if label.is_some() != labeled {
                        return Err(schema_err(&sp, "label presence does not match role"));
                    }
                    let images = line
                        .fov_files
                        .iter()
                        .map(|f| {
                            if f.contains("..") {
                                return Err(schema_err(&sp, format!("illegal path {f}")));
                            }
                            decode_png(&dir.join(f), side)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let set =
                        FovImageSet { images, offset: label.unwrap_or_default(), lens_id: id, seed: line.rng_seed };
                    Ok(Sample { sample_id: line.sample_id, label, images: Arc::new(set), rng_seed: line.rng_seed })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LensRecord { lens: lf.lens, origin: lf.origin, samples })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset { config, dataset_seed: manifest.dataset_seed, lenses, sealed: None };
    ds.validate()?;
    Ok(ds)
}

/// True positions of an unlabeled dataset, for reporting only.
pub fn read_sealed_audit(root: &Path) -> Result<Vec<(u32, u32, MisalignmentOffset)>> {
    let path = root.join(SEALED_DIR).join("audit.jsonl");
    let text = String::from_utf8(read_file(&path)?).map_err(|e| schema_err(&path, e))?;
    text.lines()
        .map(|l| {
            let a: AuditLine = serde_json::from_str(l).map_err(|e| schema_err(&path, e))?;
            Ok((a.lens_id, a.sample_id, MisalignmentOffset::new(a.dx_um, a.dy_um)))
        })
        .collect()
}
