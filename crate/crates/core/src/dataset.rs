//! Labeled image corpora: a seeded synthetic benchmark, lightness-shift
//! corruptions, and loading/writing of `<class>/<id>.png` directory trees.
//!
//! Synthetic classes are defined jointly by a shape and a hue band: for `K`
//! classes, class `c` draws shape `c % 4` and hue band `c / 2`. Neither cue
//! alone separates the classes, and every image gets a random base lightness
//! independent of its class, so lightness is never a class label by itself.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::colorspace::{lab_to_rgb, rgb_to_lab, LabImage, RgbImage};
use crate::error::{Error, Result};
use crate::image_io::{is_image_path, read_image, write_png};

/// Default lightness shifts for the corrupted evaluation set.
pub const DEFAULT_CORRUPTION_LEVELS: [f64; 6] = [-0.3, -0.2, -0.1, 0.1, 0.2, 0.3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
}

const SHAPES: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross];

impl Shape {
    /// Membership test in shape-local coordinates where the shape spans
    /// roughly `[-1, 1]^2`.
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            // apex up, base at v = 0.8
            Shape::Triangle => v <= 0.8 && v >= -1.0 && u.abs() <= (v + 1.0) * 0.55,
            Shape::Cross => (u.abs() <= 0.32 && v.abs() <= 1.0) || (v.abs() <= 0.32 && u.abs() <= 1.0),
        }
    }
}

/// How one class is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub shape: Shape,
    /// Center of the hue band in degrees (CIELAB hue angle).
    pub hue_deg: f64,
    /// Cycles of the in-shape lightness texture across the image.
    pub texture_freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Width and height in pixels.
    pub size: usize,
    pub seed: u64,
    pub recipes: Vec<ClassRecipe>,
}

impl CorpusSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            classes,
            per_class,
            size,
            seed,
            recipes: default_recipes(classes),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("corpus needs at least two classes".into()));
        }
        if self.size < 16 {
            return Err(Error::InvalidConfig("corpus images must be at least 16 pixels".into()));
        }
        if self.recipes.len() != self.classes {
            return Err(Error::InvalidConfig("one recipe per class required".into()));
        }
        Ok(())
    }

    /// Images per class that go to the training split (80%).
    pub fn train_per_class(&self) -> usize {
        (self.per_class * 4 + 2) / 5
    }
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::new(8, 200, 32, 7).expect("default corpus spec is valid")
    }
}

pub fn default_recipes(classes: usize) -> Vec<ClassRecipe> {
    let bands = classes.div_ceil(2).max(1);
    (0..classes)
        .map(|c| ClassRecipe {
            shape: SHAPES[c % SHAPES.len()],
            hue_deg: 360.0 * (c / 2) as f64 / bands as f64 + 20.0,
            texture_freq: 2.0 + (c % 3) as f64,
        })
        .collect()
}

fn render(spec: &CorpusSpec, label: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = spec.size;
    let sf = s as f64;
    let recipe = &spec.recipes[label];

    // background: desaturated, random lightness and tint
    let bg_l: f64 = rng.gen_range(0.3..0.6);
    let bg_hue = rng.gen_range(0.0..2.0 * PI);
    let bg_chroma = rng.gen_range(0.0..6.0);
    // foreground: class hue band, lightness offset from the background by a
    // random contrast that does not depend on the class
    let contrast = rng.gen_range(0.15..0.35);
    let fg_l = (bg_l + contrast).clamp(0.1, 0.9);
    let fg_hue = (recipe.hue_deg + rng.gen_range(-12.0..12.0)).to_radians();
    let fg_chroma = rng.gen_range(10.0..20.0);
    let shade_angle = rng.gen_range(0.0..2.0 * PI);
    let shade = rng.gen_range(0.0..0.1);
    let base_shift = rng.gen_range(-0.08..0.08);

    let radius = sf * rng.gen_range(0.24..0.36);
    let cx = sf / 2.0 + rng.gen_range(-sf / 10.0..sf / 10.0);
    let cy = sf / 2.0 + rng.gen_range(-sf / 10.0..sf / 10.0);
    let angle = rng.gen_range(-0.3..0.3f64);
    let (sin, cos) = angle.sin_cos();
    let tex_phase = rng.gen_range(0.0..2.0 * PI);

    let n = s * s;
    let (mut l, mut a, mut b) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            // 2x2 supersampled coverage
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let dx = (x as f64 + ox - cx) / radius;
                let dy = (y as f64 + oy - cy) / radius;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if recipe.shape.contains(u, v) {
                    cover += 0.25;
                }
            }
            let tex = 0.05 * (2.0 * PI * recipe.texture_freq * (x as f64 + y as f64) / sf + tex_phase).sin();
            let noise = rng.gen_range(-0.015..0.015);
            let lf = fg_l + tex;
            let ramp = shade * ((x as f64 / sf - 0.5) * shade_angle.cos() + (y as f64 / sf - 0.5) * shade_angle.sin());
            l[i] = (cover * lf + (1.0 - cover) * bg_l + ramp + base_shift + noise).clamp(0.0, 1.0);
            a[i] = cover * fg_chroma * fg_hue.cos() + (1.0 - cover) * bg_chroma * bg_hue.cos();
            b[i] = cover * fg_chroma * fg_hue.sin() + (1.0 - cover) * bg_chroma * bg_hue.sin();
        }
    }
    lab_to_rgb(&LabImage {
        width: s,
        height: s,
        l,
        a,
        b,
    })
}

/// Generate `(train, test)`, 80/20 per class, deterministic in `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (0..spec.per_class).map(move |i| (c, i)))
        .collect();
    let items: Vec<LabeledImage> = jobs
        .par_iter()
        .map(|&(label, index)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((label * spec.per_class + index) as u64);
            LabeledImage {
                image: render(spec, label, &mut rng),
                label,
                id: format!("c{label}_{index:05}"),
            }
        })
        .collect();
    let cut = spec.train_per_class();
    let (train, test): (Vec<_>, Vec<_>) = items
        .into_iter()
        .enumerate()
        .partition(|(k, _)| k % spec.per_class.max(1) < cut);
    Ok((
        train.into_iter().map(|(_, x)| x).collect(),
        test.into_iter().map(|(_, x)| x).collect(),
    ))
}

/// Shift lightness by each level, clamp to `[0, 1]`, and convert back.
pub fn lightness_corruptions(img: &RgbImage, levels: &[f64]) -> Result<Vec<RgbImage>> {
    if levels.is_empty() {
        return Err(Error::InvalidConfig("at least one corruption level required".into()));
    }
    let lab = rgb_to_lab(img);
    Ok(levels
        .iter()
        .map(|&c| lab_to_rgb(&shift_lightness(&lab, c)))
        .collect())
}

/// `L' = clamp(L + shift, 0, 1)` with chroma untouched.
pub fn shift_lightness(lab: &LabImage, shift: f64) -> LabImage {
    lab.with_lightness(lab.l.iter().map(|&v| (v + shift).clamp(0.0, 1.0)).collect())
}

/// Corrupt every image at every level; ids get a `@<level>` suffix.
pub fn corrupt_dataset(items: &[LabeledImage], levels: &[f64]) -> Result<Vec<LabeledImage>> {
    let per_item: Result<Vec<Vec<LabeledImage>>> = items
        .par_iter()
        .map(|item| {
            let imgs = lightness_corruptions(&item.image, levels)?;
            Ok(imgs
                .into_iter()
                .zip(levels)
                .map(|(image, c)| LabeledImage {
                    image,
                    label: item.label,
                    id: format!("{}@{c:+.2}", item.id),
                })
                .collect())
        })
        .collect();
    Ok(per_item?.into_iter().flatten().collect())
}

/// Load `<dir>/<class_index>/<id>.{png,ppm}`. Entries are visited in
/// lexicographic path order; directories whose names are not integers are
/// skipped.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<LabeledImage>> {
    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let Some(label) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<usize>().ok()) else {
            continue;
        };
        for file in std::fs::read_dir(&path)? {
            let file = file?.path();
            if file.is_file() && is_image_path(&file) {
                files.push((file, label));
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDir(dir.to_path_buf()));
    }
    let mut out = Vec::with_capacity(files.len());
    let mut expected: Option<(usize, usize)> = None;
    for (path, label) in files {
        let image = read_image(&path)?;
        match expected {
            None => expected = Some(image.dims()),
            Some(dims) if dims != image.dims() => {
                return Err(Error::InconsistentDims {
                    path,
                    expected: dims,
                    got: image.dims(),
                })
            }
            Some(_) => {}
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        out.push(LabeledImage { image, label, id });
    }
    Ok(out)
}

/// Write items as `<dir>/<label>/<id>.png`; returns relative path -> sha256.
pub fn write_split(dir: &Path, items: &[LabeledImage]) -> Result<BTreeMap<String, String>> {
    let mut sums = BTreeMap::new();
    for item in items {
        let class_dir = dir.join(item.label.to_string());
        std::fs::create_dir_all(&class_dir)?;
        let path = class_dir.join(format!("{}.png", item.id));
        write_png(&item.image, &path)?;
        let digest = Sha256::digest(std::fs::read(&path)?);
        let rel = format!("{}/{}.png", item.label, item.id);
        sums.insert(rel, hex(&digest));
    }
    Ok(sums)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub notes: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// `train/<label>/<id>.png` -> sha256
    pub checksums: BTreeMap<String, String>,
}

/// Write a generated corpus as `train/` and `test/` trees plus `manifest.json`.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, train: &[LabeledImage], test: &[LabeledImage]) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    for (split, items) in [("train", train), ("test", test)] {
        for (rel, sum) in write_split(&dir.join(split), items)? {
            checksums.insert(format!("{split}/{rel}"), sum);
        }
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        notes: "class c uses shape c % 4 and hue band c / 2; background lightness, object contrast, \
                a global lightness offset, shading, position, size and rotation are drawn independently \
                of the class, so no class is separable by lightness alone"
            .into(),
        train: train.iter().map(|x| x.id.clone()).collect(),
        test: test.iter().map(|x| x.id.clone()).collect(),
        checksums,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
