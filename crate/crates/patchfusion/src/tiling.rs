//! Patch extraction, augmentation, dataset manifests and the synthetic
//! dataset generators used for small-scale training and testing.

use crate::error::{Error, Result};
use crate::init::derive_seed;
use image::imageops;
pub use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Spatially indexed patches cut from one image. Patches are stored in
/// row-major grid order; `offsets` are the (x, y) source coordinates of
/// each patch's top-left corner.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Vec<RgbImage>,
    pub rows: usize,
    pub cols: usize,
    pub offsets: Vec<(u32, u32)>,
    pub patch_size: u32,
    pub stride: u32,
}

/// Cut `patch_size` windows at every multiple of `stride` that fits.
/// Rows follow the image height, columns the width.
pub fn extract_patches(image: &RgbImage, patch_size: u32, stride: u32) -> Result<PatchGrid> {
    if stride < 1 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let (w, h) = (image.width(), image.height());
    if patch_size > w || patch_size > h {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} exceeds image dimensions {w}x{h}"
        )));
    }
    let rows = ((h - patch_size) / stride + 1) as usize;
    let cols = ((w - patch_size) / stride + 1) as usize;
    let mut patches = Vec::with_capacity(rows * cols);
    let mut offsets = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let x = j as u32 * stride;
            let y = i as u32 * stride;
            patches.push(imageops::crop_imm(image, x, y, patch_size, patch_size).to_image());
            offsets.push((x, y));
        }
    }
    Ok(PatchGrid {
        patches,
        rows,
        cols,
        offsets,
        patch_size,
        stride,
    })
}

/// Stitch a non-overlapping grid back into the source image.
pub fn reassemble(grid: &PatchGrid) -> Result<RgbImage> {
    if grid.stride != grid.patch_size {
        return Err(Error::InvalidArgument(
            "reassemble requires non-overlapping patches (stride == patch_size)".into(),
        ));
    }
    let w = grid.cols as u32 * grid.patch_size;
    let h = grid.rows as u32 * grid.patch_size;
    let mut out = RgbImage::new(w, h);
    for (patch, &(x, y)) in grid.patches.iter().zip(&grid.offsets) {
        imageops::replace(&mut out, patch, x as i64, y as i64);
    }
    Ok(out)
}

/// Center-crop to the largest region tileable by `patch_size`.
pub fn crop_to_grid(image: &RgbImage, patch_size: u32) -> Result<RgbImage> {
    let (w, h) = (image.width(), image.height());
    if patch_size > w || patch_size > h {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} exceeds image dimensions {w}x{h}"
        )));
    }
    let cw = (w / patch_size) * patch_size;
    let ch = (h / patch_size) * patch_size;
    if cw == w && ch == h {
        return Ok(image.clone());
    }
    let x = (w - cw) / 2;
    let y = (h - ch) / 2;
    Ok(imageops::crop_imm(image, x, y, cw, ch).to_image())
}

/// Augmentation policy: right-angle rotation, horizontal flip, and a
/// contrast scale / brightness offset drawn uniformly from the ranges.
#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub rotate: bool,
    pub hflip: bool,
    pub contrast: (f64, f64),
    pub brightness: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotate: true,
            hflip: true,
            contrast: (0.9, 1.1),
            brightness: (-10.0, 10.0),
        }
    }
}

impl AugmentPolicy {
    /// A policy whose every draw is the identity transform.
    pub fn identity() -> AugmentPolicy {
        AugmentPolicy {
            rotate: false,
            hflip: false,
            contrast: (1.0, 1.0),
            brightness: (0.0, 0.0),
        }
    }
}

/// Apply one random augmentation draw to a square patch.
pub fn augment(patch: &RgbImage, rng: &mut impl Rng, policy: &AugmentPolicy) -> Result<RgbImage> {
    if policy.rotate && patch.width() != patch.height() {
        return Err(Error::InvalidArgument(format!(
            "right-angle rotation needs a square patch, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    let mut out = if policy.rotate {
        match rng.gen_range(0..4u8) {
            0 => patch.clone(),
            1 => imageops::rotate90(patch),
            2 => imageops::rotate180(patch),
            _ => imageops::rotate270(patch),
        }
    } else {
        patch.clone()
    };
    if policy.hflip && rng.gen::<bool>() {
        out = imageops::flip_horizontal(&out);
    }
    let scale = if policy.contrast.0 == policy.contrast.1 {
        policy.contrast.0
    } else {
        rng.gen_range(policy.contrast.0..=policy.contrast.1)
    };
    let offset = if policy.brightness.0 == policy.brightness.1 {
        policy.brightness.0
    } else {
        rng.gen_range(policy.brightness.0..=policy.brightness.1)
    };
    if scale != 1.0 || offset != 0.0 {
        for p in out.pixels_mut() {
            for ch in 0..3 {
                p.0[ch] = (p.0[ch] as f64 * scale + offset).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// One dataset record: image path, class label, split tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: String,
}

/// A labeled image collection plus its class names.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, class_names: Vec<String>) -> Result<DatasetManifest> {
        let k = class_names.len();
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if e.label >= k {
                return Err(Error::Manifest(format!(
                    "label {} out of range for {k} classes ({})",
                    e.label,
                    e.path.display()
                )));
            }
            if !seen.insert(e.path.clone()) {
                return Err(Error::Manifest(format!(
                    "duplicate path {}",
                    e.path.display()
                )));
            }
        }
        Ok(DatasetManifest {
            entries,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Entries whose split tag matches.
    pub fn split(&self, tag: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == tag).collect()
    }

    /// Write as a UTF-8 CSV with header `path,label,split`. Paths inside
    /// the manifest's own directory are stored relative to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        wtr.write_record(["path", "label", "split"])
            .map_err(|e| Error::Csv(e.to_string()))?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(dir).unwrap_or(&e.path);
            wtr.write_record([
                rel.to_string_lossy().as_ref(),
                &e.label.to_string(),
                &e.split,
            ])
            .map_err(|e| Error::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }

    /// Load a CSV manifest; relative paths are resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Manifest(format!(
                "expected header path,label,split in {}",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        let mut max_label = 0usize;
        for record in rdr.records() {
            let record = record.map_err(|e| Error::Csv(e.to_string()))?;
            let p = PathBuf::from(&record[0]);
            let p = if p.is_relative() { dir.join(p) } else { p };
            let label: usize = record[1]
                .parse()
                .map_err(|_| Error::Manifest(format!("bad label `{}`", &record[1])))?;
            max_label = max_label.max(label);
            entries.push(ManifestEntry {
                path: p,
                label,
                split: record[2].to_string(),
            });
        }
        let class_names = (0..=max_label).map(|c| format!("class{c}")).collect();
        DatasetManifest::new(entries, class_names)
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Parameters for the class-conditional synthetic texture generator.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub seed: u64,
}

fn class_base_color(class: usize, classes: usize) -> [f64; 3] {
    let hue = class as f64 / classes as f64 * std::f64::consts::TAU;
    let mut base = [0.0; 3];
    for (ch, b) in base.iter_mut().enumerate() {
        *b = 150.0 + 55.0 * (hue + ch as f64 * std::f64::consts::TAU / 3.0).cos();
    }
    base
}

fn render_class_texture(
    img: &mut RgbImage,
    region: (u32, u32, u32, u32),
    class: usize,
    classes: usize,
    rng: &mut impl Rng,
) {
    let base = class_base_color(class, classes);
    let theta = std::f64::consts::PI * class as f64 / classes as f64;
    let freq = std::f64::consts::TAU * (0.05 + 0.03 * class as f64);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (x0, y0, w, h) = region;
    // a few soft blobs of deepened class color
    let n_blobs = 3 + 2 * class;
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(6.0..14.0),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let wave = (freq * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase).sin();
            let mut blob = 0.0;
            for &(bx, by, r) in &blobs {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                blob += 35.0 * (-d2 / (2.0 * r * r)).exp();
            }
            let p = img.get_pixel_mut(x0 + x, y0 + y);
            for ch in 0..3 {
                let noise: f64 = rng.gen_range(-8.0..8.0);
                let v = base[ch] + 30.0 * wave - blob + noise;
                p.0[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

fn render_neutral_texture(img: &mut RgbImage, region: (u32, u32, u32, u32), rng: &mut impl Rng) {
    let (x0, y0, w, h) = region;
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel_mut(x0 + x, y0 + y);
            for ch in 0..3 {
                let noise: f64 = rng.gen_range(-8.0..8.0);
                p.0[ch] = (128.0 + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Generate class-conditional texture images and write them (plus a
/// `manifest.csv`) under `out_dir`. Deterministic for a fixed seed.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.width % spec.patch_size != 0 || spec.height % spec.patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "image dims {}x{} not divisible by patch size {}",
            spec.width, spec.height, spec.patch_size
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut entries = Vec::new();
    for class in 0..spec.classes {
        for idx in 0..spec.per_class + spec.test_per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, class as u64, idx as u64));
            let mut img = RgbImage::new(spec.width, spec.height);
            render_class_texture(
                &mut img,
                (0, 0, spec.width, spec.height),
                class,
                spec.classes,
                &mut rng,
            );
            let split = if idx < spec.per_class { "train" } else { "test" };
            let path = out_dir.join(format!("class{class}_img{idx:03}.png"));
            save_png(&img, &path)?;
            entries.push(ManifestEntry {
                path,
                label: class,
                split: split.to_string(),
            });
        }
    }
    let class_names = (0..spec.classes).map(|c| format!("class{c}")).collect();
    let manifest = DatasetManifest::new(entries, class_names)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Parameters for the biased-patch set: every image is a 3x4 grid where
/// only 6 of the 12 patches carry class texture and their *position*
/// (left vs right half) is what separates the classes within a texture
/// pair. Patch-wise voting cannot split such pairs; spatial fusion can.
#[derive(Debug, Clone)]
pub struct BiasedSynthSpec {
    pub per_class: usize,
    pub test_per_class: usize,
    pub patch_size: u32,
    pub seed: u64,
}

pub const BIASED_GRID_ROWS: usize = 3;
pub const BIASED_GRID_COLS: usize = 4;
pub const BIASED_CLASSES: usize = 4;

/// Generate the biased-patch 4-class set. Classes 0/1 share one texture,
/// classes 2/3 another; even classes place it on the left two columns,
/// odd classes on the right two; the remaining patches are neutral.
pub fn synth_biased_dataset(spec: &BiasedSynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ps = spec.patch_size;
    let width = BIASED_GRID_COLS as u32 * ps;
    let height = BIASED_GRID_ROWS as u32 * ps;
    let mut entries = Vec::new();
    for class in 0..BIASED_CLASSES {
        let texture_class = (class / 2) * 2; // 0/1 -> texture 0, 2/3 -> texture 2
        let informative_cols: [usize; 2] = if class % 2 == 0 { [0, 1] } else { [2, 3] };
        for idx in 0..spec.per_class + spec.test_per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 100 + class as u64, idx as u64));
            let mut img = RgbImage::new(width, height);
            for row in 0..BIASED_GRID_ROWS {
                for col in 0..BIASED_GRID_COLS {
                    let region = (col as u32 * ps, row as u32 * ps, ps, ps);
                    if informative_cols.contains(&col) {
                        render_class_texture(
                            &mut img,
                            region,
                            texture_class,
                            BIASED_CLASSES,
                            &mut rng,
                        );
                    } else {
                        render_neutral_texture(&mut img, region, &mut rng);
                    }
                }
            }
            let split = if idx < spec.per_class { "train" } else { "test" };
            let path = out_dir.join(format!("class{class}_img{idx:03}.png"));
            save_png(&img, &path)?;
            entries.push(ManifestEntry {
                path,
                label: class,
                split: split.to_string(),
            });
        }
    }
    let class_names = (0..BIASED_CLASSES).map(|c| format!("class{c}")).collect();
    let manifest = DatasetManifest::new(entries, class_names)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
