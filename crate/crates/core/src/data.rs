//! Synthetic layered RGB-D scenes.
//!
//! Each scene is a far background plane (class 0) with a few rectangles and
//! ellipses in front of it. Every object carries a class and a depth plane;
//! nearer planes occlude farther ones. Classes 1 and 2 always sit on planes
//! 1 and 2 respectively, and with `ambiguity` on they also share one colour
//! distribution, so only disparity tells them apart.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::netpbm::{self, Image};
use crate::tensor::Tensor;

// keeps the split stream independent of the scene stream
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Distinct disparity levels including the background.
    pub depth_planes: usize,
    pub ambiguity: bool,
    /// Amplitude of uniform per-pixel colour noise.
    pub texture: f64,
    /// Standard deviation of multiplicative disparity speckle.
    pub speckle: f64,
    /// Probability that a disparity pixel is invalid (0).
    pub dropout: f64,
    pub max_disparity: u16,
    /// Fraction of indices assigned to the validation split.
    pub val_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            num_classes: 4,
            min_objects: 2,
            max_objects: 5,
            min_size: 10,
            max_size: 28,
            depth_planes: 3,
            ambiguity: true,
            texture: 0.08,
            speckle: 0.05,
            dropout: 0.02,
            max_disparity: 128,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbdSample {
    /// `[H, W, 3]`, multiples of 1/255 in `[0, 1]`.
    pub rgb: Tensor,
    /// `[H, W, 1]` raw integer disparities, 0 where invalid.
    pub disparity: Tensor,
    /// Class id per pixel, raster order.
    pub labels: Vec<usize>,
}

impl RgbdSample {
    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }

    /// Mirror image, applied to all three maps.
    pub fn hflip(&self) -> RgbdSample {
        let (h, w) = (self.height(), self.width());
        let flip = |data: &[f64], c: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(data.len());
            for y in 0..h {
                for x in (0..w).rev() {
                    let at = (y * w + x) * c;
                    out.extend_from_slice(&data[at..at + c]);
                }
            }
            out
        };
        let labels = (0..h)
            .flat_map(|y| (0..w).rev().map(move |x| (y, x)))
            .map(|(y, x)| self.labels[y * w + x])
            .collect();
        RgbdSample {
            rgb: Tensor::new(vec![h, w, 3], flip(self.rgb.data(), 3)).expect("finite"),
            disparity: Tensor::new(vec![h, w, 1], flip(self.disparity.data(), 1)).expect("finite"),
            labels,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Object {
    class: usize,
    plane: usize,
    shape: Shape,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

impl Object {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.half_w;
        let dy = (y as f64 + 0.5 - self.cy) / self.half_h;
        match self.shape {
            Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

fn hue_colour(k: usize, n: usize) -> [f64; 3] {
    let h = k as f64 / n as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.6 * r, 0.2 + 0.6 * g, 0.2 + 0.6 * b]
}

fn quantise(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("zero image area");
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.num_classes > 256 {
            return bad("labels are stored as 8-bit images (at most 256 classes)");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must be non-empty and start at 1 or more");
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad("object size range must be non-empty and positive");
        }
        if self.depth_planes < 2 || (self.num_classes > 2 && self.depth_planes < 3) {
            return bad("need a background plane plus one plane per disambiguated class (>= 3 with 3+ classes)");
        }
        if usize::from(self.max_disparity) < self.depth_planes + 1 {
            return bad("max_disparity too small for the plane count");
        }
        if self.ambiguity && self.num_classes < 3 {
            return bad("colour ambiguity needs classes 1 and 2");
        }
        if !(0.0..=0.5).contains(&self.texture) || !(0.0..1.0).contains(&self.speckle) {
            return bad("texture must lie in [0, 0.5] and speckle in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction <= 0.0 {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Noise-free disparity of each plane; plane 0 (background) is farthest.
    pub fn plane_disparity(&self, plane: usize) -> f64 {
        let p = self.depth_planes as f64;
        (f64::from(self.max_disparity) * (plane as f64 + 1.0) / (p + 1.0)).round()
    }

    /// Mean colour of a class.
    pub fn class_colour(&self, class: usize) -> [f64; 3] {
        if class == 0 {
            return [0.45, 0.45, 0.45];
        }
        let class = if self.ambiguity && class == 2 { 1 } else { class };
        hue_colour(class - 1, self.num_classes - 1)
    }

    fn plane_of(&self, class: usize, rng: &mut ChaCha8Rng) -> usize {
        match class {
            1 | 2 => class.min(self.depth_planes - 1),
            _ => rng.random_range(1..self.depth_planes),
        }
    }

    fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Sample `index`; a pure function of the spec and the index.
    pub fn generate(&self, index: u64) -> Result<RgbdSample> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let mut rng = self.stream(index);
        // redraw until at least two classes and every plane are visible
        let (labels, planes) = loop {
            let n = rng.random_range(self.min_objects..=self.max_objects);
            let mut objects: Vec<Object> = (0..n)
                .map(|_| {
                    let class = rng.random_range(1..self.num_classes);
                    let plane = self.plane_of(class, &mut rng);
                    let shape = if rng.random_bool(0.5) {
                        Shape::Rect
                    } else {
                        Shape::Ellipse
                    };
                    Object {
                        class,
                        plane,
                        shape,
                        cx: rng.random_range(0.0..w as f64),
                        cy: rng.random_range(0.0..h as f64),
                        half_w: rng.random_range(self.min_size..=self.max_size) as f64 / 2.0,
                        half_h: rng.random_range(self.min_size..=self.max_size) as f64 / 2.0,
                    }
                })
                .collect();
            // stable: equal planes keep draw order
            objects.sort_by_key(|o| o.plane);
            let mut labels = vec![0usize; h * w];
            let mut planes = vec![0usize; h * w];
            for o in &objects {
                for y in 0..h {
                    for x in 0..w {
                        if o.covers(x, y) {
                            labels[y * w + x] = o.class;
                            planes[y * w + x] = o.plane;
                        }
                    }
                }
            }
            let mut seen_class = vec![false; self.num_classes];
            let mut seen_plane = vec![false; self.depth_planes];
            for (&c, &p) in labels.iter().zip(&planes) {
                seen_class[c] = true;
                seen_plane[p] = true;
            }
            let classes = seen_class.iter().filter(|&&s| s).count();
            if classes >= 2 && seen_plane.iter().all(|&s| s) {
                break (labels, planes);
            }
        };
        let mut rgb = Vec::with_capacity(h * w * 3);
        let mut disparity = Vec::with_capacity(h * w);
        let max_d = f64::from(self.max_disparity);
        for (&c, &p) in labels.iter().zip(&planes) {
            let base = self.class_colour(c);
            for ch in base {
                let noise = if self.texture > 0.0 {
                    rng.random_range(-self.texture..=self.texture)
                } else {
                    0.0
                };
                rgb.push(quantise(ch + noise));
            }
            let mut d = self.plane_disparity(p);
            if self.speckle > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                d = (d * (1.0 + self.speckle * z)).round().clamp(1.0, max_d);
            }
            if self.dropout > 0.0 && rng.random_bool(self.dropout) {
                d = 0.0;
            }
            disparity.push(d);
        }
        Ok(RgbdSample {
            rgb: Tensor::new(vec![h, w, 3], rgb)?,
            disparity: Tensor::new(vec![h, w, 1], disparity)?,
            labels,
        })
    }

    /// Split of `index`; a pure function of `(seed, index)`.
    pub fn split_of(&self, index: u64) -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SPLIT_SALT);
        rng.set_stream(index);
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.val_fraction {
            Split::Val
        } else {
            Split::Train
        }
    }

    /// The first indices (in order) that fill `train` and `val` quotas.
    pub fn split_indices(&self, train: usize, val: usize) -> (Vec<u64>, Vec<u64>) {
        let (mut t, mut v) = (Vec::with_capacity(train), Vec::with_capacity(val));
        let mut index = 0u64;
        while t.len() < train || v.len() < val {
            match self.split_of(index) {
                Split::Train if t.len() < train => t.push(index),
                Split::Val if v.len() < val => v.push(index),
                _ => {}
            }
            index += 1;
        }
        (t, v)
    }
}

impl KeyValues for SceneSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "data_seed" => self.seed = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "min_objects" => self.min_objects = parse_value(key, value)?,
            "max_objects" => self.max_objects = parse_value(key, value)?,
            "min_size" => self.min_size = parse_value(key, value)?,
            "max_size" => self.max_size = parse_value(key, value)?,
            "depth_planes" => self.depth_planes = parse_value(key, value)?,
            "ambiguity" => self.ambiguity = parse_value(key, value)?,
            "texture" => self.texture = parse_value(key, value)?,
            "speckle" => self.speckle = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "max_disparity" => {
                let v: f64 = parse_value(key, value)?;
                if v.fract() != 0.0 || !(1.0..=65535.0).contains(&v) {
                    return Err(Error::Config(format!("max_disparity {v} must be an integer in 1..=65535")));
                }
                self.max_disparity = v as u16;
            }
            "val_fraction" => self.val_fraction = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("data_seed", self.seed.to_string()),
            kv("height", self.height.to_string()),
            kv("width", self.width.to_string()),
            kv("num_classes", self.num_classes.to_string()),
            kv("min_objects", self.min_objects.to_string()),
            kv("max_objects", self.max_objects.to_string()),
            kv("min_size", self.min_size.to_string()),
            kv("max_size", self.max_size.to_string()),
            kv("depth_planes", self.depth_planes.to_string()),
            kv("ambiguity", self.ambiguity.to_string()),
            kv("texture", format!("{:?}", self.texture)),
            kv("speckle", format!("{:?}", self.speckle)),
            kv("dropout", format!("{:?}", self.dropout)),
            kv("max_disparity", self.max_disparity.to_string()),
            kv("val_fraction", format!("{:?}", self.val_fraction)),
        ]
    }
}

/// Identifies the on-disk dataset layout.
pub const DATASET_FORMAT: &str = "rgbdseg-dataset v1";

fn sample_paths(root: &Path, split: Split, index: u64) -> [PathBuf; 3] {
    let dir = root.join(split.name());
    [
        dir.join(format!("{index}_rgb.ppm")),
        dir.join(format!("{index}_disp.pgm")),
        dir.join(format!("{index}_label.pgm")),
    ]
}

pub fn write_sample(root: &Path, split: Split, index: u64, sample: &RgbdSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let dir = root.join(split.name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let [rgb_path, disp_path, label_path] = sample_paths(root, split, index);
    let rgb = sample.rgb.data().iter().map(|&v| (v * 255.0).round() as u16).collect();
    netpbm::write_ppm(&rgb_path, &Image::new(w, h, 3, 255, rgb)?)?;
    let disp = sample.disparity.data().iter().map(|&v| v as u16).collect();
    netpbm::write_pgm(&disp_path, &Image::new(w, h, 1, 65535, disp)?)?;
    let labels = sample.labels.iter().map(|&c| c as u16).collect();
    netpbm::write_pgm(&label_path, &Image::new(w, h, 1, 255, labels)?)
}

pub fn read_sample(root: &Path, split: Split, index: u64) -> Result<RgbdSample> {
    let [rgb_path, disp_path, label_path] = sample_paths(root, split, index);
    let rgb = netpbm::read_ppm(&rgb_path)?;
    let disp = netpbm::read_pgm(&disp_path)?;
    let labels = netpbm::read_pgm(&label_path)?;
    let (w, h) = (rgb.width, rgb.height);
    for (img, path) in [(&disp, &disp_path), (&labels, &label_path)] {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("{}x{} does not match rgb {w}x{h}", img.width, img.height),
            });
        }
    }
    let scale = f64::from(rgb.maxval);
    Ok(RgbdSample {
        rgb: Tensor::new(vec![h, w, 3], rgb.data.iter().map(|&v| f64::from(v) / scale).collect())?,
        disparity: Tensor::new(vec![h, w, 1], disp.data.iter().map(|&v| f64::from(v)).collect())?,
        labels: labels.data.iter().map(|&v| usize::from(v)).collect(),
    })
}

/// Writes `train + val` samples plus a `dataset.txt` description.
pub fn write_dataset(root: &Path, spec: &SceneSpec, train: usize, val: usize) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let (t, v) = spec.split_indices(train, val);
    for (split, indices) in [(Split::Train, &t), (Split::Val, &v)] {
        // an empty split still gets its directory
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for &i in indices {
            write_sample(root, split, i, &spec.generate(i)?)?;
        }
    }
    let mut text = format!("# {DATASET_FORMAT}\n");
    text.push_str(&crate::config::render_pairs(&spec.pairs()));
    let path = root.join("dataset.txt");
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Indices present in `<root>/<split>`, ascending.
pub fn list_split(root: &Path, split: Split) -> Result<Vec<u64>> {
    let dir = root.join(split.name());
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name();
        if let Some(i) = name.to_str().and_then(|n| n.strip_suffix("_rgb.ppm")) {
            indices.push(i.parse::<u64>().map_err(|_| Error::Format {
                path: entry.path().display().to_string(),
                reason: "sample file name must start with an integer index".into(),
            })?);
        }
    }
    indices.sort_unstable();
    Ok(indices)
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<RgbdSample>> {
    list_split(root, split)?
        .into_iter()
        .map(|i| read_sample(root, split, i))
        .collect()
}

/// Generates both splits in memory without touching the disk.
pub fn generate_splits(spec: &SceneSpec, train: usize, val: usize) -> Result<(Vec<RgbdSample>, Vec<RgbdSample>)> {
    let (t, v) = spec.split_indices(train, val);
    let gen = |ix: Vec<u64>| ix.into_iter().map(|i| spec.generate(i)).collect::<Result<Vec<_>>>();
    Ok((gen(t)?, gen(v)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let spec = SceneSpec::default();
        let a = spec.generate(7).unwrap();
        assert_eq!(a, spec.generate(7).unwrap());
        assert_ne!(a, spec.generate(8).unwrap());
        assert!(a.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels.iter().all(|&c| c < 4));
    }

    #[test]
    fn noise_free_planes() {
        let spec = SceneSpec {
            speckle: 0.0,
            dropout: 0.0,
            ..SceneSpec::default()
        };
        for i in 0..20 {
            let s = spec.generate(i).unwrap();
            let mut values: Vec<u64> = s.disparity.data().iter().map(|&d| d as u64).collect();
            values.sort_unstable();
            values.dedup();
            assert_eq!(values.len(), spec.depth_planes);
        }
    }

    #[test]
    fn hflip_twice_is_identity() {
        let s = SceneSpec::default().generate(3).unwrap();
        let f = s.hflip();
        assert_ne!(f, s);
        assert_eq!(f.hflip(), s);
        assert_eq!(f.labels[63], s.labels[0]);
    }

    #[test]
    fn degenerate_specs() {
        let bad = [
            SceneSpec { height: 0, ..Default::default() },
            SceneSpec { num_classes: 1, ..Default::default() },
            SceneSpec { min_objects: 0, ..Default::default() },
            SceneSpec { depth_planes: 2, ..Default::default() },
        ];
        for s in bad {
            assert!(s.generate(0).is_err());
        }
    }
}
