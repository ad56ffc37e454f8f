//! Sinusoidal positional encodings over normalised coordinates, summed
//! across spatial axes (2-D) and optionally disparity (3-D).
//!
//! Component `c` of the 1-D encoding of `i ∈ [0, 1]` is
//! `sin(i·π·I^{c/C})` for even `c` and `cos(i·π·I^{c/C})` for odd `c`, where
//! `C` is the embedding width and `I` the largest coordinate before
//! normalisation. The phase is reduced in half-turns before multiplying by
//! π, which keeps the error near 1e-13 for `I` up to 1024.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Embedding width and coordinate scale of one encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeSpec {
    dim: usize,
    max_coord: f64,
}

impl PeSpec {
    pub fn new(dim: usize, max_coord: f64) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::Domain(format!("embedding width {dim} must be even and >= 2")));
        }
        if !(max_coord > 1.0) || !max_coord.is_finite() {
            return Err(Error::Domain(format!("coordinate scale {max_coord} must exceed 1")));
        }
        Ok(Self { dim, max_coord })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_coord(&self) -> f64 {
        self.max_coord
    }

    /// Angular frequency of component `c`, `π·I^{c/C}`.
    pub fn frequency(&self, c: usize) -> f64 {
        std::f64::consts::PI * self.max_coord.powf(c as f64 / self.dim as f64)
    }

    fn check(&self, i: f64) -> Result<()> {
        if (0.0..=1.0).contains(&i) {
            Ok(())
        } else {
            Err(Error::Domain(format!("coordinate {i} outside [0, 1]")))
        }
    }

    /// Component `c` of the 1-D encoding of `i`. The angle is reduced to
    /// whole half-turns before scaling by π, which keeps the result within
    /// a few ulps for `I` up to ~10³.
    fn component(&self, i: f64, c: usize) -> f64 {
        let turns = (i * self.max_coord.powf(c as f64 / self.dim as f64)) % 2.0;
        let angle = std::f64::consts::PI * turns;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }
}

/// Sum of per-axis encodings into `out`. Terms are added in ascending order
/// so the result does not depend on the order of `axes`.
fn encode_sum(axes: &[(f64, &PeSpec)], out: &mut [f64]) {
    let mut terms = [0.0f64; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let terms = &mut terms[..axes.len()];
        for (t, (i, spec)) in terms.iter_mut().zip(axes) {
            *t = spec.component(*i, c);
        }
        terms.sort_by(f64::total_cmp);
        *o = terms.iter().sum();
    }
}

fn encode(axes: &[(f64, &PeSpec)]) -> Result<Vec<f64>> {
    for (i, spec) in axes {
        spec.check(*i)?;
    }
    let mut out = vec![0.0; axes[0].1.dim];
    encode_sum(axes, &mut out);
    Ok(out)
}

pub fn pe1d(i: f64, spec: &PeSpec) -> Result<Vec<f64>> {
    encode(&[(i, spec)])
}

pub fn pe2d(u: f64, v: f64, spec: &PeSpec) -> Result<Vec<f64>> {
    encode(&[(u, spec), (v, spec)])
}

pub fn pe3d(u: f64, v: f64, d: f64, spec: &PeSpec) -> Result<Vec<f64>> {
    encode(&[(u, spec), (v, spec), (d, spec)])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PeMode {
    None,
    #[default]
    TwoD,
    ThreeD,
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "2d" => Ok(Self::TwoD),
            "3d" => Ok(Self::ThreeD),
            _ => Err(Error::Config(format!("pe_mode {s:?}, expected none|2d|3d"))),
        }
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::TwoD => "2d",
            Self::ThreeD => "3d",
        })
    }
}

/// Normalised `(u, v, d)` per token on an `height × width` raster grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCoords {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    d: Vec<f64>,
}

impl TokenCoords {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if n == 0 {
            return Err(Error::Domain("empty token grid".into()));
        }
        if u.len() != n || v.len() != n || d.len() != n {
            return Err(Error::Domain(format!(
                "coordinate lengths {}/{}/{} for {n} tokens",
                u.len(),
                v.len(),
                d.len()
            )));
        }
        if let Some(bad) = u.iter().chain(&v).chain(&d).find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Domain(format!("coordinate {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            u,
            v,
            d,
        })
    }

    /// Token-centre coordinates for a grid with the given `stride` (pixels
    /// per token) over an image, normalised by `image_side`, with `depth`
    /// (normalised disparity at full resolution, raster order) averaged over
    /// each token's footprint.
    pub fn for_stage(
        img_height: usize,
        img_width: usize,
        stride: usize,
        image_side: f64,
        depth: &[f64],
    ) -> Result<Self> {
        if stride == 0 || img_height % stride != 0 || img_width % stride != 0 {
            return Err(Error::Domain(format!(
                "{img_height}x{img_width} not divisible by stride {stride}"
            )));
        }
        if depth.len() != img_height * img_width {
            return Err(Error::Domain("depth map size mismatch".into()));
        }
        let (gh, gw) = (img_height / stride, img_width / stride);
        let mut u = Vec::with_capacity(gh * gw);
        let mut v = Vec::with_capacity(gh * gw);
        let mut d = Vec::with_capacity(gh * gw);
        let area = (stride * stride) as f64;
        for ty in 0..gh {
            for tx in 0..gw {
                u.push((tx as f64 + 0.5) * stride as f64 / image_side);
                v.push((ty as f64 + 0.5) * stride as f64 / image_side);
                let mut acc = 0.0;
                for y in ty * stride..(ty + 1) * stride {
                    for x in tx * stride..(tx + 1) * stride {
                        acc += depth[y * img_width + x];
                    }
                }
                d.push((acc / area).clamp(0.0, 1.0));
            }
        }
        Self::new(gh, gw, u, v, d)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }
}

/// Spatial and depth encodings used together; they share `dim`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeScales {
    pub spatial: PeSpec,
    pub depth: PeSpec,
}

impl PeScales {
    pub fn new(dim: usize, spatial_max: f64, depth_max: f64) -> Result<Self> {
        Ok(Self {
            spatial: PeSpec::new(dim, spatial_max)?,
            depth: PeSpec::new(dim, depth_max)?,
        })
    }

    /// One spec for every axis.
    pub fn uniform(spec: PeSpec) -> Self {
        Self {
            spatial: spec,
            depth: spec,
        }
    }
}

/// `[n, C]` encodings of every token, `None` mode giving zeros.
pub fn encode_tokens(coords: &TokenCoords, scales: &PeScales, mode: PeMode) -> Tensor {
    let c = scales.spatial.dim;
    let mut data = vec![0.0; coords.len() * c];
    if mode != PeMode::None {
        for (n, row) in data.chunks_exact_mut(c).enumerate() {
            let (u, v, d) = (coords.u[n], coords.v[n], coords.d[n]);
            if mode == PeMode::ThreeD {
                encode_sum(&[(u, &scales.spatial), (v, &scales.spatial), (d, &scales.depth)], row);
            } else {
                encode_sum(&[(u, &scales.spatial), (v, &scales.spatial)], row);
            }
        }
    }
    Tensor::new(vec![coords.len(), c], data).expect("sinusoids are finite")
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return if a.iter().any(|x| *x != 0.0) { 1.0 } else { 0.0 };
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity between the target token's encoding and every token's
/// encoding, raster order. `target` is `(row, col)`.
pub fn similarity_map(
    target: (usize, usize),
    coords: &TokenCoords,
    scales: &PeScales,
    mode: PeMode,
) -> Result<Vec<f64>> {
    if coords.is_empty() {
        return Err(Error::Domain("empty grid".into()));
    }
    let (row, col) = target;
    if row >= coords.height || col >= coords.width {
        return Err(Error::Domain(format!(
            "target ({row}, {col}) outside {}x{} grid",
            coords.height, coords.width
        )));
    }
    let enc = encode_tokens(coords, scales, mode);
    let c = scales.spatial.dim;
    let t = row * coords.width + col;
    let target_vec = &enc.data()[t * c..(t + 1) * c];
    Ok(enc
        .data()
        .chunks_exact(c)
        .map(|e| cosine(target_vec, e))
        .collect())
}

/// Rows of 1-D encodings for positions `0..=max_coord`, each normalised by
/// the scale; one row per position.
pub fn embedding_matrix(spec: &PeSpec) -> Vec<Vec<f64>> {
    let steps = spec.max_coord.round() as usize;
    (0..=steps)
        .map(|p| {
            let i = (p as f64 / spec.max_coord).min(1.0);
            pe1d(i, spec).expect("normalised position")
        })
        .collect()
}

/// Replaces invalid (zero) disparities by the value of the nearest valid
/// pixel under 4-connectivity, breaking ties in raster order. A map with no
/// valid pixel is returned unchanged.
pub fn fill_invalid(disparity: &[f64], height: usize, width: usize) -> Vec<f64> {
    assert_eq!(disparity.len(), height * width);
    let mut out = disparity.to_vec();
    let mut filled: Vec<bool> = disparity.iter().map(|&d| d > 0.0).collect();
    let mut queue: VecDeque<usize> = (0..out.len()).filter(|&i| filled[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / width, i % width);
        let neighbours = [
            (y > 0).then(|| i - width),
            (x > 0).then(|| i - 1),
            (x + 1 < width).then(|| i + 1),
            (y + 1 < height).then(|| i + width),
        ];
        for j in neighbours.into_iter().flatten() {
            if !filled[j] {
                filled[j] = true;
                out[j] = out[i];
                queue.push_back(j);
            }
        }
    }
    out
}

/// Fills invalid pixels and divides by `max_disparity`.
pub fn normalize_disparity(
    raw: &[f64],
    height: usize,
    width: usize,
    max_disparity: f64,
) -> Result<Vec<f64>> {
    if !(max_disparity > 0.0) {
        return Err(Error::Domain(format!("max disparity {max_disparity} must be positive")));
    }
    if let Some(bad) = raw.iter().find(|&&d| !(0.0..=max_disparity).contains(&d)) {
        return Err(Error::Domain(format!(
            "disparity {bad} outside [0, {max_disparity}]"
        )));
    }
    Ok(fill_invalid(raw, height, width)
        .into_iter()
        .map(|d| d / max_disparity)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c: usize, i: f64) -> PeSpec {
        PeSpec::new(c, i).unwrap()
    }

    #[test]
    fn zero_coordinate() {
        assert_eq!(pe1d(0.0, &spec(4, 512.0)).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(pe2d(0.0, 0.0, &spec(4, 512.0)).unwrap(), vec![0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn half_coordinate_first_component_is_one() {
        assert_eq!(pe1d(0.5, &spec(4, 512.0)).unwrap()[0], 1.0);
    }

    #[test]
    fn domain_errors() {
        assert!(pe1d(1.5, &spec(4, 512.0)).is_err());
        assert!(pe1d(-0.1, &spec(4, 512.0)).is_err());
        assert!(pe3d(0.1, 0.2, 1.01, &spec(4, 512.0)).is_err());
        assert!(PeSpec::new(3, 512.0).is_err());
        assert!(PeSpec::new(0, 512.0).is_err());
        assert!(PeSpec::new(4, 1.0).is_err());
    }

    #[test]
    fn additive_decomposition_and_symmetry() {
        let s = spec(16, 64.0);
        let (u, v) = (0.3, 0.8);
        let three = pe3d(u, v, 0.0, &s).unwrap();
        let two = pe2d(u, v, &s).unwrap();
        let zero = pe1d(0.0, &s).unwrap();
        for c in 0..16 {
            assert!((three[c] - (two[c] + zero[c])).abs() < 1e-15);
        }
        assert_eq!(pe2d(0.2, 0.9, &s).unwrap(), pe2d(0.9, 0.2, &s).unwrap());
    }

    #[test]
    fn highest_frequency_below_side() {
        for &(c, i) in &[(2, 2.0), (16, 64.0), (64, 512.0), (128, 1024.0)] {
            let s = spec(c, i);
            assert!(s.frequency(c - 1) < std::f64::consts::PI * i);
            assert_eq!(s.frequency(0), std::f64::consts::PI);
        }
    }

    #[test]
    fn fill_uses_nearest_valid() {
        // row-major 1x5: [0, 3, 0, 0, 7]
        let out = fill_invalid(&[0.0, 3.0, 0.0, 0.0, 7.0], 1, 5);
        assert_eq!(out, vec![3.0, 3.0, 3.0, 7.0, 7.0]);
        assert_eq!(fill_invalid(&[0.0; 4], 2, 2), vec![0.0; 4]);
    }

    #[test]
    fn stage_coords_pool_depth() {
        let depth = vec![0.0, 0.2, 0.4, 0.6, 0.2, 0.2, 0.4, 0.4];
        let tc = TokenCoords::for_stage(2, 4, 2, 4.0, &depth).unwrap();
        assert_eq!(tc.len(), 2);
        assert_eq!(tc.u(), &[0.25, 0.75]);
        assert_eq!(tc.v(), &[0.25, 0.25]);
        assert!((tc.d()[0] - 0.15).abs() < 1e-15);
        assert!((tc.d()[1] - 0.45).abs() < 1e-15);
        assert!(TokenCoords::for_stage(2, 4, 3, 4.0, &depth).is_err());
    }

    #[test]
    fn similarity_self_is_one_and_errors() {
        let depth = vec![0.5; 16];
        let tc = TokenCoords::for_stage(4, 4, 1, 4.0, &depth).unwrap();
        let sc = PeScales::uniform(spec(8, 4.0));
        let m = similarity_map((1, 2), &tc, &sc, PeMode::ThreeD).unwrap();
        assert_eq!(m[6], 1.0);
        assert!(m.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(similarity_map((4, 0), &tc, &sc, PeMode::TwoD).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in [PeMode::None, PeMode::TwoD, PeMode::ThreeD] {
            assert_eq!(m.to_string().parse::<PeMode>().unwrap(), m);
        }
        assert!("4d".parse::<PeMode>().is_err());
    }
}
