//! Sampling grids, morph maps, and the bilinear morph operation.
//!
//! Coordinate conventions, used consistently everywhere including file
//! formats: fields are (H, W, 2) with component order (dx, dy) = (horizontal,
//! vertical); absolute coordinates are corner-aligned so pixel (0,0) is
//! (-1,-1) and pixel (H-1, W-1) is (1,1). Morphing gathers backward: the
//! value at output pixel p comes from source location p + map(p).

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Hyperparameters of the morph operation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MorphConfig {
    /// Max-displacement divisor: displacements are bounded by 1/eta in
    /// normalized coordinates (1/(2 eta) of the image extent per axis).
    pub eta: f32,
}

impl Default for MorphConfig {
    fn default() -> Self {
        MorphConfig { eta: 3.0 }
    }
}

impl MorphConfig {
    pub fn new(eta: f32) -> Result<MorphConfig> {
        if !(eta > 0.0) {
            return Err(Error::invalid(format!("eta must be positive, got {eta}")));
        }
        Ok(MorphConfig { eta })
    }
}

/// (H, W, 2) field of relative displacements in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphMap {
    field: Tensor, // shape (H, W, 2)
}

/// (H, W, 2) field of absolute sample coordinates, nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    field: Tensor, // shape (H, W, 2)
}

/// Integer class id per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, class_count: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(Error::shape("label data length mismatch"));
        }
        if class_count == 0 || class_count > 256 {
            return Err(Error::invalid("class_count must be in 1..=256"));
        }
        if let Some(&bad) = data.iter().find(|&&c| c as usize >= class_count) {
            return Err(Error::invalid(format!(
                "label id {bad} outside [0, {class_count})"
            )));
        }
        Ok(LabelMap { height, width, class_count, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

impl MorphMap {
    /// Wraps an (H,W,2) displacement field; components must stay in [-1,1].
    pub fn from_tensor(field: Tensor) -> Result<MorphMap> {
        check_hw2(&field)?;
        field.check_finite()?;
        if field.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::invalid("morph displacement outside [-1, 1]"));
        }
        Ok(MorphMap { field })
    }

    pub fn zeros(h: usize, w: usize) -> MorphMap {
        MorphMap { field: Tensor::zeros(&[h, w, 2]) }
    }

    pub fn height(&self) -> usize {
        self.field.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.field.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.field
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width() + x) * 2;
        (self.field.data()[i], self.field.data()[i + 1])
    }

    pub fn resized(&self, h: usize, w: usize) -> Result<MorphMap> {
        Ok(MorphMap { field: resize_field(&self.field, h, w)? })
    }

    pub fn max_displacement(&self) -> f32 {
        self.field.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

impl SamplingGrid {
    pub fn from_tensor(field: Tensor) -> Result<SamplingGrid> {
        check_hw2(&field)?;
        field.check_finite()?;
        Ok(SamplingGrid { field })
    }

    pub fn height(&self) -> usize {
        self.field.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.field.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.field
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width() + x) * 2;
        (self.field.data()[i], self.field.data()[i + 1])
    }

    /// Resizes via identity + resized residual, so a grid that is the
    /// identity (or identity plus a map) resizes to the target identity plus
    /// the resized map, and the pure identity grid round-trips bit-exactly.
    pub fn resized(&self, h: usize, w: usize) -> Result<SamplingGrid> {
        let (sh, sw) = (self.height(), self.width());
        let id_src = identity_grid(sh, sw)?;
        let residual = self.field.zip(&id_src.field, |g, i| g - i)?;
        let res = resize_field(&residual, h, w)?;
        let id_dst = identity_grid(h, w)?;
        let field = id_dst.field.zip(&res, |i, r| i + r)?;
        Ok(SamplingGrid { field })
    }

    /// Channel-first (1,2,H,W) layout for the sampling kernels.
    pub fn to_nchw(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let d = self.field.data();
        let mut out = vec![0.0f32; 2 * h * w];
        for i in 0..h * w {
            out[i] = d[2 * i];
            out[h * w + i] = d[2 * i + 1];
        }
        Tensor::raw(&[1, 2, h, w], out)
    }
}

fn check_hw2(t: &Tensor) -> Result<()> {
    if t.rank() != 3 || t.shape()[2] != 2 {
        return Err(Error::shape(format!("expected (H,W,2), got {:?}", t.shape())));
    }
    Ok(())
}

/// Normalized coordinate of index i along an axis of length n. The integer
/// numerator avoids the cancellation of -1 + 2i/(n-1), so the result is the
/// correctly rounded value of (2i - (n-1)) / (n-1).
#[inline]
pub fn axis_coord(i: usize, n: usize) -> f32 {
    (2 * i as i64 - (n as i64 - 1)) as f32 / (n - 1) as f32
}

/// Corner-aligned identity grid: pixel (0,0) holds (-1,-1), (H-1,W-1) holds (1,1).
pub fn identity_grid(height: usize, width: usize) -> Result<SamplingGrid> {
    if height < 2 || width < 2 {
        return Err(Error::invalid(format!(
            "identity grid needs dims >= 2, got {height}x{width}"
        )));
    }
    let mut data = Vec::with_capacity(height * width * 2);
    for y in 0..height {
        let vy = axis_coord(y, height);
        for x in 0..width {
            data.push(axis_coord(x, width));
            data.push(vy);
        }
    }
    Ok(SamplingGrid { field: Tensor::raw(&[height, width, 2], data) })
}

/// Batched identity grid in model layout (N,2,H,W).
pub fn identity_grid_tensor(n: usize, height: usize, width: usize) -> Tensor {
    let hw = height * width;
    let mut plane = vec![0.0f32; 2 * hw];
    for y in 0..height {
        for x in 0..width {
            plane[y * width + x] = axis_coord(x, width);
            plane[hw + y * width + x] = axis_coord(y, height);
        }
    }
    let mut out = Vec::with_capacity(n * 2 * hw);
    for _ in 0..n {
        out.extend_from_slice(&plane);
    }
    Tensor::raw(&[n, 2, height, width], out)
}

/// tanh squashing to [-1/eta, 1/eta].
pub fn normalize_map(raw: &Tensor, config: &MorphConfig) -> Result<MorphMap> {
    check_hw2(raw)?;
    raw.check_finite()?;
    let inv = 1.0 / config.eta;
    MorphMap::from_tensor(raw.map(|v| kernels::tanh(v) * inv))
}

/// Elementwise grid + map.
pub fn compose_grid(grid: &SamplingGrid, map: &MorphMap) -> Result<SamplingGrid> {
    let sum = grid.field.zip(&map.field, |g, m| g + m)?;
    Ok(SamplingGrid { field: sum })
}

/// The morph operation on one (C,H,W) feature block: bilinear gather at the
/// grid's absolute coordinates, zero-fading outside the support.
pub fn bilinear_sample(source: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    if source.rank() != 3 {
        return Err(Error::shape(format!("source must be (C,H,W), got {:?}", source.shape())));
    }
    let (c, h, w) = (source.shape()[0], source.shape()[1], source.shape()[2]);
    if grid.height() != h || grid.width() != w {
        return Err(Error::shape(format!(
            "grid {}x{} vs source {h}x{w}; resize the grid first",
            grid.height(),
            grid.width()
        )));
    }
    let src = source.reshaped(&[1, c, h, w])?;
    let out = kernels::bilinear_sample(&src, &grid.to_nchw());
    out.reshaped(&[c, h, w])
}

/// Channel-wise corner-aligned bilinear resize of an (H,W,2) field.
pub fn resize_field(field: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    check_hw2(field)?;
    if th < 2 || tw < 2 {
        return Err(Error::invalid(format!("resize target must be >= 2, got {th}x{tw}")));
    }
    let (h, w) = (field.shape()[0], field.shape()[1]);
    // to (1,2,h,w), resize, back to (th,tw,2)
    let d = field.data();
    let mut chw = vec![0.0f32; 2 * h * w];
    for i in 0..h * w {
        chw[i] = d[2 * i];
        chw[h * w + i] = d[2 * i + 1];
    }
    let resized = kernels::resize_bilinear(&Tensor::raw(&[1, 2, h, w], chw), th, tw);
    let rd = resized.data();
    let mut out = vec![0.0f32; th * tw * 2];
    for i in 0..th * tw {
        out[2 * i] = rd[i];
        out[2 * i + 1] = rd[th * tw + i];
    }
    Ok(Tensor::raw(&[th, tw, 2], out))
}

/// Warps a label map by a morph map: the map is resized to the label
/// resolution, composed with the identity grid, and labels are gathered by
/// nearest neighbor; out-of-range samples become class 0.
pub fn warp_labels(labels: &LabelMap, map: &MorphMap) -> Result<LabelMap> {
    let (h, w) = (labels.height, labels.width);
    let map = if map.height() == h && map.width() == w {
        map.clone()
    } else {
        map.resized(h, w)?
    };
    let grid = compose_grid(&identity_grid(h, w)?, &map)?;
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = grid.at(y, x);
            let px = (gx + 1.0) * 0.5 * (w - 1) as f32;
            let py = (gy + 1.0) * 0.5 * (h - 1) as f32;
            let sx = libm::roundf(px) as isize;
            let sy = libm::roundf(py) as isize;
            out[y * w + x] = if sx >= 0 && sx < w as isize && sy >= 0 && sy < h as isize {
                labels.at(sy as usize, sx as usize)
            } else {
                0
            };
        }
    }
    LabelMap::new(h, w, labels.class_count, out)
}

/// (1-t) a + t b; convexity keeps displacements in bounds.
pub fn lerp_maps(a: &MorphMap, b: &MorphMap, t: f32) -> Result<MorphMap> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("lerp t must be in [0,1], got {t}")));
    }
    let field = crate::tensor::lerp(&a.field, &b.field, t)?;
    MorphMap::from_tensor(field)
}

/// Adds a Gaussian-shaped displacement bump; the result is clamped to [-1,1]
/// absolute and may exceed the 1/eta band deliberately (freehand map edits).
pub fn offset_map(
    map: &MorphMap,
    center: (f32, f32),
    peak: (f32, f32),
    sigma: f32,
) -> Result<MorphMap> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = (map.height(), map.width());
    let mut out = map.field.clone();
    let d = out.data_mut();
    for y in 0..h {
        let py = axis_coord(y, h);
        for x in 0..w {
            let px = axis_coord(x, w);
            let r2 = (px - center.0) * (px - center.0) + (py - center.1) * (py - center.1);
            let g = libm::expf(-r2 / (2.0 * sigma * sigma));
            let i = (y * w + x) * 2;
            d[i] = (d[i] + peak.0 * g).clamp(-1.0, 1.0);
            d[i + 1] = (d[i + 1] + peak.1 * g).clamp(-1.0, 1.0);
        }
    }
    MorphMap::from_tensor(out)
}

/// 2D sinusoidal positional encoding, (C,H,W) with integer pixel indices.
/// Channel 4c encodes sin(x / 10000^(8c/C)), 4c+1 the matching cosine, and
/// 4c+2 / 4c+3 the same pair for y at exponent (8c+4)/C.
pub fn positional_encoding(height: usize, width: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::invalid(format!(
            "positional encoding channels must be a positive multiple of 4, got {channels}"
        )));
    }
    let mut out = vec![0.0f32; channels * height * width];
    let hw = height * width;
    for c in 0..channels / 4 {
        let fx = libm::pow(10000.0, 8.0 * c as f64 / channels as f64);
        let fy = libm::pow(10000.0, (8.0 * c as f64 + 4.0) / channels as f64);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let ax = x as f64 / fx;
                let ay = y as f64 / fy;
                out[(4 * c) * hw + i] = libm::sin(ax) as f32;
                out[(4 * c + 1) * hw + i] = libm::cos(ax) as f32;
                out[(4 * c + 2) * hw + i] = libm::sin(ay) as f32;
                out[(4 * c + 3) * hw + i] = libm::cos(ay) as f32;
            }
        }
    }
    Ok(Tensor::raw(&[channels, height, width], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_fill, Dist};

    /// Literal evaluation of the morph equation over every source texel.
    fn eq1_oracle(src: &Tensor, grid: &SamplingGrid) -> Tensor {
        let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
        let mut out = Tensor::zeros(&[c, h, w]);
        for p in 0..h {
            for q in 0..w {
                let (gx, gy) = grid.at(p, q);
                let x = (gx + 1.0) * 0.5 * (w - 1) as f32;
                let y = (gy + 1.0) * 0.5 * (h - 1) as f32;
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for n in 0..h {
                        for m in 0..w {
                            let wx = (1.0 - (x - m as f32).abs()).max(0.0);
                            let wy = (1.0 - (y - n as f32).abs()).max(0.0);
                            acc += src.data()[(ch * h + n) * w + m] * wx * wy;
                        }
                    }
                    out.data_mut()[(ch * h + p) * w + q] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_grid_corners_and_linearity() {
        let g = identity_grid(2, 2).unwrap();
        assert_eq!(g.at(0, 0), (-1.0, -1.0));
        assert_eq!(g.at(0, 1), (1.0, -1.0));
        assert_eq!(g.at(1, 0), (-1.0, 1.0));
        assert_eq!(g.at(1, 1), (1.0, 1.0));
        let g = identity_grid(3, 3).unwrap();
        assert_eq!(g.at(1, 1), (0.0, 0.0));
        let g = identity_grid(4, 5).unwrap();
        let (x, y) = g.at(1, 2);
        assert_eq!(x, 0.0);
        assert!((y - (-1.0 / 3.0)).abs() < 1e-7);
        assert!(identity_grid(1, 4).is_err());
    }

    #[test]
    fn normalize_map_tanh_and_bounds() {
        let cfg = MorphConfig::default();
        let zeros = Tensor::zeros(&[3, 3, 2]);
        let m = normalize_map(&zeros, &cfg).unwrap();
        assert!(m.tensor().data().iter().all(|&v| v == 0.0));

        let ones = Tensor::full(&[3, 3, 2], 1.0);
        let m = normalize_map(&ones, &cfg).unwrap();
        // tanh(1)/3, cross-checked against an independent evaluation
        let expect = ((1.0f64.exp().powi(2) - 1.0) / (1.0f64.exp().powi(2) + 1.0) / 3.0) as f32;
        assert!((expect - 0.253_864_72).abs() < 1e-6);
        assert!(m.tensor().data().iter().all(|&v| (v - expect).abs() < 1e-6));

        let big = Tensor::full(&[2, 2, 2], 1e20);
        let m = normalize_map(&big, &cfg).unwrap();
        assert!(m.tensor().data().iter().all(|&v| v.abs() <= 1.0 / 3.0 + 1e-7));

        let bad = Tensor::raw(&[1, 1, 2], vec![f32::NAN, 0.0]);
        assert!(normalize_map(&bad, &cfg).is_err());
    }

    #[test]
    fn compose_zero_map_is_bit_exact() {
        let g = identity_grid(5, 4).unwrap();
        let z = MorphMap::zeros(5, 4);
        assert_eq!(compose_grid(&g, &z).unwrap(), g);
        let shift = MorphMap::from_tensor(Tensor::raw(
            &[2, 2, 2],
            vec![0.1, 0.0, 0.1, 0.0, 0.1, 0.0, 0.1, 0.0],
        ))
        .unwrap();
        let g2 = compose_grid(&identity_grid(2, 2).unwrap(), &shift).unwrap();
        assert_eq!(g2.at(0, 0), (-0.9, -1.0));
        assert_eq!(g2.at(1, 1), (1.1, 1.0));
    }

    #[test]
    fn sample_identity_is_exact() {
        let src = rng_fill(&[3, 6, 7], 1, Dist::Normal).unwrap();
        let g = identity_grid(6, 7).unwrap();
        let out = bilinear_sample(&src, &g).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn sample_one_pixel_shift_left_zero_fades() {
        // 1x3x3, +x shift of one pixel (dx = 1.0 normalized for W=3)
        let src = Tensor::from_vec(
            &[1, 3, 3],
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
        )
        .unwrap();
        let map = MorphMap::from_tensor(Tensor::raw(&[3, 3, 2], {
            let mut v = vec![0.0; 18];
            for i in 0..9 {
                v[2 * i] = 1.0;
            }
            v
        }))
        .unwrap();
        let grid = compose_grid(&identity_grid(3, 3).unwrap(), &map).unwrap();
        let out = bilinear_sample(&src, &grid).unwrap();
        let want = Tensor::from_vec(
            &[1, 3, 3],
            vec![2., 3., 0., 5., 6., 0., 8., 9., 0.],
        )
        .unwrap();
        assert!(out.max_abs_diff(&want) < 1e-6);
        let oracle = eq1_oracle(&src, &grid);
        assert!(out.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn sample_matches_eq1_oracle_random() {
        for seed in 0..20u64 {
            let src = rng_fill(&[2, 8, 8], seed, Dist::Normal).unwrap();
            let raw = rng_fill(&[8, 8, 2], seed + 1000, Dist::Normal).unwrap();
            let map = normalize_map(&raw, &MorphConfig::default()).unwrap();
            let grid = compose_grid(&identity_grid(8, 8).unwrap(), &map).unwrap();
            let got = bilinear_sample(&src, &grid).unwrap();
            let want = eq1_oracle(&src, &grid);
            assert!(got.max_abs_diff(&want) <= 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn sample_constant_source_partition_of_unity() {
        let src = Tensor::full(&[1, 8, 8], 2.5);
        let raw = rng_fill(&[8, 8, 2], 77, Dist::Normal).unwrap();
        // eta 4 keeps samples well inside the support
        let map = normalize_map(&raw, &MorphConfig::new(4.0).unwrap()).unwrap();
        let grid = compose_grid(&identity_grid(8, 8).unwrap(), &map).unwrap();
        let out = bilinear_sample(&src, &grid).unwrap();
        // interior: skip the outermost ring where zero-fade may engage
        for y in 2..6 {
            for x in 2..6 {
                let v = out.data()[y * 8 + x];
                assert!((v - 2.5).abs() < 1e-5, "({y},{x}) = {v}");
            }
        }
    }

    #[test]
    fn grid_corner_addresses_top_left_texel() {
        let src = rng_fill(&[2, 4, 4], 5, Dist::Normal).unwrap();
        let mut field = identity_grid(4, 4).unwrap().tensor().clone();
        // point pixel (2,3) at (-1,-1)
        let i = (2 * 4 + 3) * 2;
        field.data_mut()[i] = -1.0;
        field.data_mut()[i + 1] = -1.0;
        let grid = SamplingGrid::from_tensor(field).unwrap();
        let out = bilinear_sample(&src, &grid).unwrap();
        for c in 0..2 {
            assert_eq!(out.data()[(c * 4 + 2) * 4 + 3], src.data()[c * 16]);
        }
    }

    #[test]
    fn resize_identity_grid_is_identity() {
        let g8 = identity_grid(8, 8).unwrap();
        let down = g8.resized(4, 4).unwrap();
        let g4 = identity_grid(4, 4).unwrap();
        assert_eq!(down.tensor(), g4.tensor());
    }

    #[test]
    fn resize_constant_and_ramp() {
        let c = MorphMap::from_tensor(Tensor::full(&[4, 4, 2], 0.2)).unwrap();
        let r = c.resized(7, 3).unwrap();
        assert!(r.tensor().data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        // linear ramp along x, 4 -> 3 columns: values at x = 0, 1, 2 of
        // linspace(0, 3)*step map to 0, 1.5, 3 times step
        let mut ramp = Tensor::zeros(&[2, 4, 2]);
        for y in 0..2 {
            for x in 0..4 {
                ramp.data_mut()[(y * 4 + x) * 2] = x as f32 * 0.1;
            }
        }
        let r = resize_field(&ramp, 2, 3).unwrap();
        for y in 0..2 {
            let vals: Vec<f32> = (0..3).map(|x| r.data()[(y * 3 + x) * 2]).collect();
            assert!((vals[0] - 0.0).abs() < 1e-6);
            assert!((vals[1] - 0.15).abs() < 1e-6);
            assert!((vals[2] - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_labels_zero_map_identity() {
        let labels = LabelMap::new(4, 4, 3, vec![
            0, 1, 1, 0,
            0, 2, 2, 0,
            0, 2, 1, 0,
            0, 0, 0, 0,
        ])
        .unwrap();
        let out = warp_labels(&labels, &MorphMap::zeros(4, 4)).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn warp_labels_one_pixel_shift() {
        let labels = LabelMap::new(3, 3, 2, vec![1, 0, 0, 1, 0, 0, 1, 0, 0]).unwrap();
        // +x shift of one pixel pulls column 1 into column 0 etc.; the
        // vacated rightmost column becomes background.
        let mut v = vec![0.0; 18];
        for i in 0..9 {
            v[2 * i] = 1.0;
        }
        let map = MorphMap::from_tensor(Tensor::raw(&[3, 3, 2], v)).unwrap();
        let out = warp_labels(&labels, &map).unwrap();
        assert_eq!(out.data, vec![0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let labels2 = LabelMap::new(3, 3, 2, vec![0, 1, 0, 0, 1, 0, 0, 1, 0]).unwrap();
        let out2 = warp_labels(&labels2, &map).unwrap();
        assert_eq!(out2.data, vec![1, 0, 0, 1, 0, 0, 1, 0, 0]);
    }

    #[test]
    fn warp_labels_matches_scalar_reimplementation() {
        // 2-class disk mask with a small radial map, against an independent
        // per-pixel gather.
        let (h, w) = (16, 16);
        let mut mask = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let px = axis_coord(x, w);
                let py = axis_coord(y, h);
                if px * px + py * py < 0.45 {
                    mask[y * w + x] = 1;
                }
            }
        }
        let labels = LabelMap::new(h, w, 2, mask).unwrap();
        let mut field = Tensor::zeros(&[h, w, 2]);
        for y in 0..h {
            for x in 0..w {
                let px = axis_coord(x, w);
                let py = axis_coord(y, h);
                let i = (y * w + x) * 2;
                field.data_mut()[i] = 0.12 * px;
                field.data_mut()[i + 1] = 0.12 * py;
            }
        }
        let map = MorphMap::from_tensor(field.clone()).unwrap();
        let got = warp_labels(&labels, &map).unwrap();
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * 2;
                let gx = axis_coord(x, w) + field.data()[i];
                let gy = axis_coord(y, h) + field.data()[i + 1];
                let sx = libm::roundf((gx + 1.0) * 0.5 * (w - 1) as f32) as isize;
                let sy = libm::roundf((gy + 1.0) * 0.5 * (h - 1) as f32) as isize;
                let want = if sx >= 0 && sx < w as isize && sy >= 0 && sy < h as isize {
                    labels.at(sy as usize, sx as usize)
                } else {
                    0
                };
                assert_eq!(got.at(y, x), want, "({y},{x})");
            }
        }
    }

    #[test]
    fn lerp_maps_basics() {
        let a = MorphMap::zeros(3, 3);
        let bt = Tensor::full(&[3, 3, 2], 0.2);
        let b = MorphMap::from_tensor(bt).unwrap();
        assert_eq!(lerp_maps(&a, &b, 0.0).unwrap(), a);
        assert_eq!(lerp_maps(&a, &b, 1.0).unwrap(), b);
        let m = lerp_maps(&a, &b, 0.5).unwrap();
        assert!(m.tensor().data().iter().all(|&v| (v - 0.1).abs() < 1e-7));
        assert!(lerp_maps(&a, &b, 1.5).is_err());
        let ra = rng_fill(&[3, 3, 2], 1, Dist::Uniform).unwrap().scale(0.3);
        let rb = rng_fill(&[3, 3, 2], 2, Dist::Uniform).unwrap().scale(0.3);
        let (ma, mb) = (
            MorphMap::from_tensor(ra.clone()).unwrap(),
            MorphMap::from_tensor(rb.clone()).unwrap(),
        );
        let m = lerp_maps(&ma, &mb, 0.25).unwrap();
        for i in 0..m.tensor().numel() {
            let want = 0.75 * ra.data()[i] + 0.25 * rb.data()[i];
            assert!((m.tensor().data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn offset_map_gaussian_bump() {
        let base = MorphMap::zeros(17, 17);
        let m = offset_map(&base, (0.0, 0.0), (0.0, -0.15), 0.25).unwrap();
        // center pixel shifted down by the full peak
        assert_eq!(m.at(8, 8), (0.0, -0.15));
        // zero peak leaves the map unchanged
        let m0 = offset_map(&base, (0.0, 0.0), (0.0, 0.0), 0.25).unwrap();
        assert_eq!(m0, base);
        // at distance sigma the bump is peak * exp(-1/2)
        let m = offset_map(&base, (0.0, 0.0), (0.2, 0.0), 0.25).unwrap();
        let x = 8 + 2; // 0.25 in normalized units = 2 pixels on a 17-wide grid
        let (dx, _) = m.at(8, x);
        let want = 0.2 * (-0.5f32).exp();
        assert!((dx - want).abs() < 1e-6, "{dx} vs {want}");
        assert!(offset_map(&base, (0.0, 0.0), (0.1, 0.0), 0.0).is_err());
    }

    #[test]
    fn positional_encoding_structure() {
        let pe = positional_encoding(5, 6, 8).unwrap();
        assert_eq!(pe.shape(), &[8, 5, 6]);
        // channel 4c at x=0 is sin(0)=0; 4c+1 is cos(0)=1
        for c in [0usize, 4] {
            assert_eq!(pe.data()[c * 30], 0.0);
            assert_eq!(pe.data()[(c + 1) * 30], 1.0);
        }
        // channel 0 at x=1 (any y): sin(1)
        let want = (1.0f64.sin()) as f32;
        for y in 0..5 {
            assert!((pe.data()[y * 6 + 1] - want).abs() < 1e-6);
        }
        // x-channels constant along y, y-channels constant along x
        for y in 1..5 {
            for x in 0..6 {
                assert_eq!(pe.data()[y * 6 + x], pe.data()[x]);
                assert_eq!(pe.data()[2 * 30 + y * 6 + x], pe.data()[2 * 30 + y * 6]);
            }
        }
        assert!(positional_encoding(4, 4, 6).is_err());
    }

    #[test]
    fn eta_bound_holds_for_any_normalized_map() {
        for seed in 0..10u64 {
            let raw = rng_fill(&[6, 6, 2], seed, Dist::Normal).unwrap().scale(50.0);
            let m = normalize_map(&raw, &MorphConfig::default()).unwrap();
            assert!(m.max_displacement() <= 1.0 / 3.0 + 1e-7);
        }
    }
}
