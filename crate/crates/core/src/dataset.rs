//! Painting manifests, PPI-ranked splits, HR/LR/Ref tile triples and the
//! grouped-reference loader.
//!
//! Manifest: UTF-8 CSV with header
//! `id,image_path,width_px,height_px,phys_width_in,phys_height_in`.
//! Relative image paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail_arg, Error, Result};
use crate::imaging::{degrade_bicubic, load_image, save_image, BitDepth, ImageTensor};

pub const MANIFEST_HEADER: [&str; 6] = ["id", "image_path", "width_px", "height_px", "phys_width_in", "phys_height_in"];
const ANISOTROPY_WARN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaintingRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub width_px: u32,
    pub height_px: u32,
    pub phys_width_in: f64,
    pub phys_height_in: f64,
    pub ppi: f64,
}

impl PaintingRecord {
    pub fn new(
        id: &str,
        image_path: impl Into<PathBuf>,
        width_px: u32,
        height_px: u32,
        phys_width_in: f64,
        phys_height_in: f64,
    ) -> Result<Self> {
        if id.trim().is_empty() {
            bail_arg!("empty painting id");
        }
        if width_px == 0 || height_px == 0 {
            bail_arg!("pixel size must be positive, got {width_px}x{height_px}");
        }
        for (name, v) in [("phys_width_in", phys_width_in), ("phys_height_in", phys_height_in)] {
            if !(v.is_finite() && v > 0.0) {
                bail_arg!("{name} must be a positive number of inches, got {v}");
            }
        }
        let ppi = f64::from(width_px) / phys_width_in;
        let ppi_h = f64::from(height_px) / phys_height_in;
        if ((ppi_h - ppi) / ppi).abs() > ANISOTROPY_WARN {
            log::warn!("{id}: width PPI {ppi:.2} and height PPI {ppi_h:.2} differ by more than 5%");
        }
        Ok(Self {
            id: id.to_string(),
            image_path: image_path.into(),
            width_px,
            height_px,
            phys_width_in,
            phys_height_in,
            ppi,
        })
    }
}

/// A manifest row that failed validation; `line` is 1-based and counts the header.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<PaintingRecord>,
    pub rejections: Vec<Rejection>,
}

#[derive(Deserialize)]
struct Row {
    id: String,
    image_path: String,
    width_px: String,
    height_px: String,
    phys_width_in: String,
    phys_height_in: String,
}

fn parse_row(row: &Row, base: &Path) -> Result<PaintingRecord> {
    fn num<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
        v.trim().parse().map_err(|_| Error::Argument(format!("{name} is not a number: {v:?}")))
    }
    let path = PathBuf::from(row.image_path.trim());
    let path = if path.is_absolute() { path } else { base.join(path) };
    PaintingRecord::new(
        row.id.trim(),
        path,
        num("width_px", &row.width_px)?,
        num("height_px", &row.height_px)?,
        num("phys_width_in", &row.phys_width_in)?,
        num("phys_height_in", &row.phys_height_in)?,
    )
}

/// Reads and validates a manifest. Invalid rows are logged and returned as
/// rejections; a missing or incomplete header is a format error.
pub fn ingest_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.clone();
    let missing: Vec<&str> = MANIFEST_HEADER.iter().copied().filter(|h| !header.iter().any(|c| c == *h)).collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "{}: manifest header lacks column(s) {}; expected {}",
            path.display(),
            missing.join(", "),
            MANIFEST_HEADER.join(",")
        )));
    }
    let mut out = Manifest::default();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let parsed = rec
            .map_err(|e| Error::Argument(e.to_string()))
            .and_then(|r| r.deserialize::<Row>(Some(&header)).map_err(|e| Error::Argument(e.to_string())))
            .and_then(|row| parse_row(&row, &base))
            .and_then(|r| {
                if seen.insert(r.id.clone()) {
                    Ok(r)
                } else {
                    Err(Error::Argument(format!("duplicate id {:?}", r.id)))
                }
            });
        match parsed {
            Ok(r) => out.records.push(r),
            Err(e) => {
                let reason = match e {
                    Error::Argument(m) => m,
                    other => other.to_string(),
                };
                log::warn!("{}:{line}: row rejected: {reason}", path.display());
                out.rejections.push(Rejection { line, reason });
            }
        }
    }
    Ok(out)
}

pub fn write_manifest(records: &[PaintingRecord], path: &Path) -> Result<()> {
    let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).map_err(fail)?;
    for r in records {
        w.write_record([
            r.id.clone(),
            r.image_path.display().to_string(),
            r.width_px.to_string(),
            r.height_px.to_string(),
            r.phys_width_in.to_string(),
            r.phys_height_in.to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    crate::checkpoint::write_atomic(path, &bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<PaintingRecord>,
    pub test: Vec<PaintingRecord>,
}

/// Ranks records with `ppi ≥ min_ppi` by PPI (descending, seeded shuffle among
/// equal values); the highest go to test, the next `n_train` to train.
pub fn select_by_ppi(records: &[PaintingRecord], min_ppi: f64, n_train: usize, n_test: usize, seed: u64) -> Result<Split> {
    let mut pool: Vec<PaintingRecord> = records.iter().filter(|r| r.ppi >= min_ppi).cloned().collect();
    if n_train + n_test > pool.len() {
        bail_arg!(
            "need {n_train} train + {n_test} test paintings at ≥ {min_ppi} PPI, but only {} of {} qualify",
            pool.len(),
            records.len()
        );
    }
    pool.sort_by(|a, b| b.ppi.total_cmp(&a.ppi).then_with(|| a.id.cmp(&b.id)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    while start < pool.len() {
        let end = start + pool[start..].iter().take_while(|r| r.ppi == pool[start].ppi).count();
        pool[start..end].shuffle(&mut rng);
        start = end;
    }
    let train = pool[n_test..n_test + n_train].to_vec();
    pool.truncate(n_test);
    Ok(Split { train, test: pool })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleConfig {
    pub scale: usize,
    pub tile_hr: usize,
    pub refs_per_tile: usize,
    /// Keep at most this many tiles per painting (seeded subset of the grid).
    pub max_tiles_per_painting: Option<usize>,
    /// Drop tiles whose luminance standard deviation is below this value.
    pub min_tile_std: f64,
    pub seed: u64,
}

impl TripleConfig {
    pub fn new(scale: usize, tile_hr: usize, seed: u64) -> Self {
        Self { scale, tile_hr, refs_per_tile: 1, max_tiles_per_painting: None, min_tile_std: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4 | 8 | 16) {
            bail_arg!("scale must be one of 2, 4, 8, 16, got {}", self.scale);
        }
        if self.tile_hr == 0 || !self.tile_hr.is_multiple_of(self.scale) {
            bail_arg!("tile_hr {} must be a positive multiple of the scale {}", self.tile_hr, self.scale);
        }
        if self.refs_per_tile == 0 {
            bail_arg!("refs_per_tile must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple {
    /// `<painting>_<tile>`, with a `.<r>` suffix when a tile has several references.
    pub key: String,
    pub painting_id: String,
    pub ref_painting_id: String,
    pub tile_index: usize,
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub reference: ImageTensor,
    pub scale: usize,
}

/// RNG keyed by a seed and a list of labels, independent of call order.
pub fn derived_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn luma_std(img: &ImageTensor) -> f64 {
    let y = img.luminance();
    let n = y.data().len() as f64;
    let mean = y.data().iter().sum::<f64>() / n;
    (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Builds triples from decoded paintings. Tiles come from a non-overlapping
/// grid; each reference is a tile-sized crop at a random position of a
/// uniformly chosen other painting.
pub fn make_triples_from(paintings: &[(String, ImageTensor)], cfg: &TripleConfig) -> Result<Vec<TrainingTriple>> {
    cfg.validate()?;
    let t = cfg.tile_hr;
    let usable: Vec<&(String, ImageTensor)> = paintings
        .iter()
        .filter(|(id, img)| {
            let ok = img.height() >= t && img.width() >= t;
            if !ok {
                log::warn!("{id}: {}x{} painting is smaller than the {t}px tile; skipped", img.height(), img.width());
            }
            ok
        })
        .collect();
    if usable.len() < 2 {
        bail_arg!(
            "no valid reference source: {} painting(s) can hold a {t}px tile, need at least 2 so references come from another painting",
            usable.len()
        );
    }
    let mut out = Vec::new();
    for (pi, (id, img)) in usable.iter().enumerate() {
        let (gy, gx) = (img.height() / t, img.width() / t);
        let mut tiles: Vec<usize> = (0..gy * gx).collect();
        if let Some(max) = cfg.max_tiles_per_painting {
            if max < tiles.len() {
                let mut rng = derived_rng(cfg.seed, &["tiles", id]);
                tiles.shuffle(&mut rng);
                tiles.truncate(max);
                tiles.sort_unstable();
            }
        }
        for tile in tiles {
            let hr = img.crop((tile / gx) * t, (tile % gx) * t, t, t)?;
            if luma_std(&hr) < cfg.min_tile_std {
                continue;
            }
            let lr = degrade_bicubic(&hr, cfg.scale)?;
            for r in 0..cfg.refs_per_tile {
                let mut rng = derived_rng(cfg.seed, &["ref", id, &tile.to_string(), &r.to_string()]);
                let mut other = rng.random_range(0..usable.len() - 1);
                if other >= pi {
                    other += 1;
                }
                let (ref_id, src) = usable[other];
                let top = rng.random_range(0..=src.height() - t);
                let left = rng.random_range(0..=src.width() - t);
                let key = if cfg.refs_per_tile == 1 { format!("{id}_{tile}") } else { format!("{id}_{tile}.{r}") };
                out.push(TrainingTriple {
                    key,
                    painting_id: id.clone(),
                    ref_painting_id: ref_id.clone(),
                    tile_index: tile,
                    hr: hr.clone(),
                    lr: lr.clone(),
                    reference: src.crop(top, left, t, t)?,
                    scale: cfg.scale,
                });
            }
        }
    }
    Ok(out)
}

/// Loads each record's image and builds its triples. Unreadable images are an error.
pub fn make_triples(records: &[PaintingRecord], cfg: &TripleConfig) -> Result<Vec<TrainingTriple>> {
    let paintings = records
        .iter()
        .map(|r| {
            let img = load_image(&r.image_path)?;
            if (img.width() as u32, img.height() as u32) != (r.width_px, r.height_px) {
                log::warn!(
                    "{}: manifest says {}x{} px, file is {}x{}",
                    r.id,
                    r.width_px,
                    r.height_px,
                    img.width(),
                    img.height()
                );
            }
            Ok((r.id.clone(), img))
        })
        .collect::<Result<Vec<_>>>()?;
    make_triples_from(&paintings, cfg)
}

/// Writes `<key>_{hr,lr,ref}.png` as 16-bit PNGs.
pub fn write_triples(triples: &[TrainingTriple], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in triples {
        for (suffix, img) in [("hr", &t.hr), ("lr", &t.lr), ("ref", &t.reference)] {
            save_image(img, dir.join(format!("{}_{suffix}.png", t.key)), BitDepth::Sixteen)?;
        }
    }
    Ok(())
}

/// Reads triples written by [`write_triples`], sorted by key. Incomplete sets
/// are skipped with a warning.
pub fn load_triples(dir: &Path, scale: usize) -> Result<Vec<TrainingTriple>> {
    let mut keys: BTreeMap<String, u8> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".png")) else { continue };
        for (bit, suffix) in [(1u8, "_hr"), (2, "_lr"), (4, "_ref")] {
            if let Some(key) = stem.strip_suffix(suffix) {
                *keys.entry(key.to_string()).or_default() |= bit;
            }
        }
    }
    let mut out = Vec::new();
    for (key, mask) in keys {
        if mask != 7 {
            log::warn!("{}: triple {key} is incomplete; skipped", dir.display());
            continue;
        }
        let load = |s: &str| load_image(dir.join(format!("{key}_{s}.png")));
        let (hr, lr) = (load("hr")?, load("lr")?);
        if hr.height() != lr.height() * scale || hr.width() != lr.width() * scale {
            bail_arg!("triple {key}: hr {:?} and lr {:?} do not differ by scale {scale}", hr.dims(), lr.dims());
        }
        let (painting_id, tile) = key.rsplit_once('_').unwrap_or((key.as_str(), "0"));
        out.push(TrainingTriple {
            painting_id: painting_id.to_string(),
            ref_painting_id: String::new(),
            tile_index: tile.split('.').next().and_then(|v| v.parse().ok()).unwrap_or(0),
            reference: load("ref")?,
            key: key.clone(),
            hr,
            lr,
            scale,
        });
    }
    Ok(out)
}

pub const GROUP_REFS: usize = 4;

/// One HR image with references ordered from most to least similar.
#[derive(Clone, Debug, PartialEq)]
pub struct RefGroup {
    pub id: String,
    pub hr: ImageTensor,
    pub refs: Vec<ImageTensor>,
}

impl RefGroup {
    pub fn most_similar(&self) -> &ImageTensor {
        &self.refs[0]
    }
}

/// Loads `<root>/<group>/{hr.png, ref_0.png..ref_3.png}`, sorted by group id.
/// Groups with missing files are skipped with a warning.
pub fn load_grouped_refs(root: &Path) -> Result<Vec<RefGroup>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let files: Vec<PathBuf> = std::iter::once(dir.join("hr.png"))
            .chain((0..GROUP_REFS).map(|i| dir.join(format!("ref_{i}.png"))))
            .collect();
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            log::warn!("group {id}: {} is missing; skipped", missing.display());
            continue;
        }
        let mut imgs = files.iter().map(load_image).collect::<Result<Vec<_>>>()?;
        let hr = imgs.remove(0);
        out.push(RefGroup { id, hr, refs: imgs });
    }
    Ok(out)
}
