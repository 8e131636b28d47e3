//! On-disk dataset layout:
//!
//! ```text
//! DIR/manifest.txt
//! DIR/images/<subject>_<view>.png
//! DIR/masks/<subject>_<view>.png
//! ```
//!
//! The manifest starts with one `#`-prefixed metadata line, then one
//! tab-separated line per record. Floats are printed in shortest
//! round-trip exponent form so conditions and labels reload bit-exactly.
//! The manifest is written last, through a temporary file and a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::record::{MultiViewRecord, View, ViewTag};
use crate::camera::{CameraLabel, LABEL_DIM};
use crate::conditioning::SemanticCondition;
use crate::error::{Error, Result};
use crate::raster::{decode_mask_png, decode_png, save_mask_png, save_png};

pub const MANIFEST: &str = "manifest.txt";
const MAGIC: &str = "# headlab-dataset";
const VIEW_FIELDS: usize = 5 + LABEL_DIM;

/// Dataset-wide facts needed to reproduce conditions from images alone.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub resolution: usize,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<MultiViewRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn view_count(&self) -> usize {
        self.records.iter().map(|r| r.views.len()).sum()
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn file_stem(subject: u64, view: usize) -> String {
    format!("{subject}_{view}.png")
}

pub fn dataset_write(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [dir, &images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let m = &dataset.meta;
    let mut manifest = format!(
        "{MAGIC}\tversion=1\tresolution={}\tembed_dim={}\tembed_seed={}\tnormalized={}\trecords={}\n",
        m.resolution,
        m.embed_dim,
        m.embed_seed,
        m.normalized,
        dataset.records.len()
    );
    for rec in &dataset.records {
        rec.validate()?;
        if rec.condition.dim() != m.embed_dim {
            return Err(Error::Shape(format!(
                "subject {} condition has {} dims, dataset declares {}",
                rec.subject_id,
                rec.condition.dim(),
                m.embed_dim
            )));
        }
        let mut fields = vec![
            rec.subject_id.to_string(),
            fmt_f64(rec.jitter_level),
            rec.views.len().to_string(),
        ];
        for (k, view) in rec.views.iter().enumerate() {
            let name = file_stem(rec.subject_id, k);
            let img_path = images.join(&name);
            let mask_path = masks.join(&name);
            save_png(&view.image, &img_path)?;
            save_mask_png(&view.mask, &mask_path)?;
            let img_sha = sha_hex(&fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?);
            let mask_sha = sha_hex(&fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?);
            fields.push(view.tag.name().to_string());
            fields.push(format!("images/{name}"));
            fields.push(format!("masks/{name}"));
            fields.push(img_sha);
            fields.push(mask_sha);
            fields.extend(view.camera.0.iter().map(|&v| fmt_f64(v)));
        }
        fields.extend(rec.condition.values.iter().map(|&v| fmt_f64(v)));
        manifest.push_str(&fields.join("\t"));
        manifest.push('\n');
    }
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    let final_path = dir.join(MANIFEST);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(dir.to_path_buf())
}

fn parse_meta(line: &str, path: &Path) -> Result<(DatasetMeta, usize)> {
    let mut parts = line.split('\t');
    if parts.next() != Some(MAGIC) {
        return Err(dataset_err(path, "missing dataset header line"));
    }
    let get = |key: &str| -> Result<String> {
        line.split('\t')
            .find_map(|p| p.strip_prefix(&format!("{key}=")).map(str::to_string))
            .ok_or_else(|| dataset_err(path, format!("header lacks '{key}'")))
    };
    let num = |s: String, key: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| dataset_err(path, format!("bad header value for {key}: {s}")))
    };
    let resolution = num(get("resolution")?, "resolution")? as usize;
    let embed_dim = num(get("embed_dim")?, "embed_dim")? as usize;
    let embed_seed = num(get("embed_seed")?, "embed_seed")?;
    let normalized = get("normalized")? == "true";
    let records = num(get("records")?, "records")? as usize;
    Ok((
        DatasetMeta {
            resolution,
            embed_dim,
            embed_seed,
            normalized,
        },
        records,
    ))
}

fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| dataset_err(path, format!("line {line}: bad float '{s}'")))
}

pub fn dataset_read(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = text.lines();
    let (meta, declared) = parse_meta(
        lines
            .next()
            .ok_or_else(|| dataset_err(&manifest_path, "empty manifest"))?,
        &manifest_path,
    )?;
    let mut records = Vec::with_capacity(declared);
    for (ln, line) in lines.enumerate().map(|(i, l)| (i + 2, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| dataset_err(&manifest_path, format!("line {ln}: {msg}"));
        if f.len() < 3 {
            return Err(bad("truncated record".into()));
        }
        let subject_id: u64 = f[0].parse().map_err(|_| bad(format!("bad subject id '{}'", f[0])))?;
        let jitter_level = parse_f64(f[1], &manifest_path, ln)?;
        let n_views: usize = f[2].parse().map_err(|_| bad(format!("bad view count '{}'", f[2])))?;
        let expected = 3 + n_views * VIEW_FIELDS + meta.embed_dim;
        if f.len() != expected {
            return Err(bad(format!("expected {expected} fields, found {}", f.len())));
        }
        let mut views = Vec::with_capacity(n_views);
        for k in 0..n_views {
            let base = 3 + k * VIEW_FIELDS;
            let tag = ViewTag::parse(f[base]).ok_or_else(|| bad(format!("bad view tag '{}'", f[base])))?;
            let img_path = dir.join(f[base + 1]);
            let mask_path = dir.join(f[base + 2]);
            let img_bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
            if sha_hex(&img_bytes) != f[base + 3] {
                return Err(dataset_err(&img_path, "checksum mismatch"));
            }
            let mask_bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
            if sha_hex(&mask_bytes) != f[base + 4] {
                return Err(dataset_err(&mask_path, "checksum mismatch"));
            }
            let label = f[base + 5..base + VIEW_FIELDS]
                .iter()
                .map(|s| parse_f64(s, &manifest_path, ln))
                .collect::<Result<Vec<_>>>()?;
            views.push(View {
                image: decode_png(&img_bytes)?,
                mask: decode_mask_png(&mask_bytes)?,
                camera: CameraLabel::from_slice(&label)?,
                tag,
            });
        }
        let values = f[3 + n_views * VIEW_FIELDS..]
            .iter()
            .map(|s| parse_f64(s, &manifest_path, ln))
            .collect::<Result<Vec<_>>>()?;
        let rec = MultiViewRecord {
            subject_id,
            views,
            condition: SemanticCondition {
                values,
                normalized: meta.normalized,
            },
            jitter_level,
        };
        rec.validate()?;
        records.push(rec);
    }
    if records.len() != declared {
        return Err(dataset_err(
            &manifest_path,
            format!("header declares {declared} records, found {}", records.len()),
        ));
    }
    let on_disk = count_pngs(&dir.join("images"))?;
    let listed: usize = records.iter().map(|r| r.views.len()).sum();
    if on_disk != listed {
        return Err(dataset_err(
            dir,
            format!("manifest lists {listed} images but images/ holds {on_disk}"),
        ));
    }
    Ok(Dataset { meta, records })
}

fn count_pngs(dir: &Path) -> Result<usize> {
    if !dir.exists() {
        return Ok(0);
    }
    let mut n = 0;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().is_some_and(|e| e == "png") {
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::ConditionEmbedder;
    use crate::raster::{quantize, quantize_mask};
    use crate::synthdata::{build_record, generate_subject, RecordConfig};

    fn small_dataset(n: u64) -> Dataset {
        let e = ConditionEmbedder::new(5, 16, true).unwrap();
        let cfg = RecordConfig {
            resolution: 16,
            n_views: 3,
            ..Default::default()
        };
        Dataset {
            meta: DatasetMeta {
                resolution: 16,
                embed_dim: 16,
                embed_seed: 5,
                normalized: true,
            },
            records: (0..n)
                .map(|s| build_record(&generate_subject(s), &cfg, &e).unwrap())
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_exact_for_labels_and_conditions() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(10);
        dataset_write(&ds, dir.path()).unwrap();
        let back = dataset_read(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.len(), 10);
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.condition, b.condition);
            assert_eq!(a.subject_id, b.subject_id);
            for (va, vb) in a.views.iter().zip(&b.views) {
                assert_eq!(va.camera, vb.camera);
                assert_eq!(va.tag, vb.tag);
                assert_eq!(quantize(&va.image), vb.image);
                assert_eq!(quantize_mask(&va.mask), vb.mask);
            }
        }
    }

    #[test]
    fn corrupt_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        dataset_write(&small_dataset(2), dir.path()).unwrap();
        let victim = dir.path().join("images").join("1_2.png");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        let err = dataset_read(dir.path()).unwrap_err().to_string();
        assert!(err.contains("1_2.png"), "{err}");
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(0);
        dataset_write(&ds, dir.path()).unwrap();
        let back = dataset_read(dir.path()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn stray_image_is_a_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        dataset_write(&small_dataset(1), dir.path()).unwrap();
        fs::copy(
            dir.path().join("images/0_0.png"),
            dir.path().join("images/extra.png"),
        )
        .unwrap();
        assert!(dataset_read(dir.path()).is_err());
    }

    #[test]
    fn missing_manifest_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(dataset_read(dir.path()).is_err());
    }
}
