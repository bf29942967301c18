use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, CorpusConfig, SceneObject, SceneSample};
use crate::error::{Error, Result};
use crate::gan::GeneratedSample;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "wastegan-corpus-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub split: Split,
    /// Scene index passed to [`generate_scene`].
    pub index: u64,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: CorpusConfig,
    pub entries: Vec<CorpusEntry>,
    /// SHA-256 over every raster in entry order.
    pub checksum: String,
}

/// Training and held-out scenes with the checksum of their rasters.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    pub checksum: String,
}

impl Corpus {
    /// Builds the corpus in memory without touching the file system.
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        let (manifest, rasters) = render(cfg)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (e, (img, msk)) in manifest.entries.iter().zip(rasters) {
            let s = decode(cfg.resolution, &img, &msk, e.objects.clone())?;
            match e.split {
                Split::Train => train.push(s),
                Split::Test => test.push(s),
            }
        }
        Ok(Self {
            config: cfg.clone(),
            train,
            test,
            checksum: manifest.checksum,
        })
    }
}

fn encode_png(write: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    write(&mut buf).map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(buf.into_inner())
}

fn encode(s: &SceneSample) -> Result<(Vec<u8>, Vec<u8>)> {
    let r = s.resolution as u32;
    let rgb = RgbImage::from_raw(r, r, s.rgb_bytes()).ok_or_else(|| Error::Format("rgb raster size".into()))?;
    let msk = GrayImage::from_raw(r, r, s.mask.clone()).ok_or_else(|| Error::Format("mask raster size".into()))?;
    Ok((
        encode_png(|b| rgb.write_to(b, ImageFormat::Png))?,
        encode_png(|b| msk.write_to(b, ImageFormat::Png))?,
    ))
}

fn decode(resolution: usize, img: &[u8], msk: &[u8], objects: Vec<SceneObject>) -> Result<SceneSample> {
    let rgb = image::load_from_memory_with_format(img, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("image raster: {e}")))?
        .into_rgb8();
    let mask = image::load_from_memory_with_format(msk, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("mask raster: {e}")))?
        .into_luma8();
    if rgb.width() as usize != resolution || mask.width() as usize != resolution {
        return Err(Error::Format(format!("raster is not {resolution}x{resolution}")));
    }
    SceneSample::from_bytes(resolution, rgb.as_raw(), mask.into_raw(), objects)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

type Rasters = Vec<(Vec<u8>, Vec<u8>)>;

fn render(cfg: &CorpusConfig) -> Result<(Manifest, Rasters)> {
    cfg.validate()?;
    if cfg.count == 0 {
        return Err(Error::config("corpus count must be at least 1"));
    }
    let mut entries = Vec::new();
    let mut rasters = Vec::new();
    let mut all = Sha256::new();
    let splits = [(Split::Train, 0, cfg.count), (Split::Test, cfg.count, cfg.test_count)];
    for (split, start, n) in splits {
        let dir = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for index in start as u64..(start + n) as u64 {
            let s = generate_scene(cfg, index)?;
            let (img, msk) = encode(&s)?;
            all.update(&img);
            all.update(&msk);
            entries.push(CorpusEntry {
                split,
                index,
                image: format!("{dir}/scene_{index:06}.img"),
                mask: format!("{dir}/scene_{index:06}.msk"),
                image_sha256: sha256_hex(&img),
                mask_sha256: sha256_hex(&msk),
                objects: s.objects,
            });
            rasters.push((img, msk));
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: cfg.clone(),
        entries,
        checksum: hex::encode(all.finalize()),
    };
    Ok((manifest, rasters))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes each sample as `sample_%06d.img` (RGB) and `.msk` (argmax labels)
/// under `dir`, in the corpus raster encoding. Returns the SHA-256 over all rasters.
pub fn save_generated(samples: &[GeneratedSample<f32>], dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut all = Sha256::new();
    for (i, g) in samples.iter().enumerate() {
        let shape = g.image.shape();
        let scene = SceneSample {
            resolution: shape[1],
            image: g.image.clone(),
            mask: g.hard_mask(),
            objects: Vec::new(),
        };
        let (img, msk) = encode(&scene)?;
        write_file(&dir.join(format!("sample_{i:06}.img")), &img)?;
        write_file(&dir.join(format!("sample_{i:06}.msk")), &msk)?;
        all.update(&img);
        all.update(&msk);
    }
    Ok(hex::encode(all.finalize()))
}

/// Reads an 8-bit index raster; returns `(height, width, labels)`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_luma8();
    Ok((m.height() as usize, m.width() as usize, m.into_raw()))
}

/// Writes `count` training and `test_count` held-out scenes plus `manifest.json` under `dir`.
pub fn generate_corpus(cfg: &CorpusConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let (manifest, rasters) = render(cfg)?;
    for (e, (img, msk)) in manifest.entries.iter().zip(&rasters) {
        write_file(&dir.join(&e.image), img)?;
        write_file(&dir.join(&e.mask), msk)?;
    }
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path: PathBuf = dir.as_ref().join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("unknown corpus format {:?}", m.format)));
    }
    Ok(m)
}

/// Reads a corpus back, verifying every raster against the manifest digests.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut all = Sha256::new();
    for e in &m.entries {
        let read = |rel: &str, want: &str| -> Result<Vec<u8>> {
            let p = dir.join(rel);
            let b = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            if sha256_hex(&b) != want {
                return Err(Error::Format(format!("{rel}: checksum mismatch")));
            }
            Ok(b)
        };
        let img = read(&e.image, &e.image_sha256)?;
        let msk = read(&e.mask, &e.mask_sha256)?;
        all.update(&img);
        all.update(&msk);
        let s = decode(m.config.resolution, &img, &msk, e.objects.clone())?;
        match e.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    let checksum = hex::encode(all.finalize());
    if checksum != m.checksum {
        return Err(Error::Format("corpus checksum mismatch".into()));
    }
    Ok(Corpus {
        config: m.config,
        train,
        test,
        checksum,
    })
}
