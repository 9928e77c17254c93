//! Hyperspectral data: cubes, label rasters, splits, PCA band reduction,
//! patch extraction, resizing, normalization and augmentation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const CUBE_MAGIC: &[u8; 4] = b"HSIC";
const LABEL_MAGIC: &[u8; 4] = b"HSGT";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// `H × W × B` reflectance (pixel-major, band-fastest) with an `H × W`
/// label raster where 0 marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u16>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Data("cube dimensions must be positive".into()));
        }
        if data.len() != height * width * bands || labels.len() != height * width {
            return Err(Error::Data(format!(
                "cube {height}x{width}x{bands} needs {} values and {} labels, got {} and {}",
                height * width * bands,
                height * width,
                data.len(),
                labels.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite reflectance at pixel ({}, {}) band {}",
                i / bands / width,
                i / bands % width,
                i % bands
            )));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
            labels,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.bands;
        &self.data[i..i + self.bands]
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Largest class id present.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Checks that the labeled ids are exactly `1..=K`.
    pub fn check_labels(&self) -> Result<usize> {
        let k = self.n_classes();
        if k == 0 {
            return Err(Error::Data("label raster has no labeled pixels".into()));
        }
        let mut seen = vec![false; k + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=k).find(|&c| !seen[c]) {
            return Err(Error::Data(format!("class ids are not contiguous: {missing} of 1..={k} is absent")));
        }
        Ok(k)
    }

    pub fn write_cube(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(CUBE_MAGIC)?;
        for v in [FORMAT_VERSION, self.height as u32, self.width as u32, self.bands as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F32])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_labels(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(LABEL_MAGIC)?;
        for v in [FORMAT_VERSION, self.height as u32, self.width as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.labels {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `.hsic` reflectance file and its `.hsgt` label raster.
    pub fn read(cube_path: &Path, label_path: &Path) -> Result<Self> {
        let (h, w, b, data) = read_cube_file(cube_path)?;
        let (lh, lw, labels) = read_label_file(label_path)?;
        if (lh, lw) != (h, w) {
            return Err(Error::Data(format!("label raster {lh}x{lw} does not match cube {h}x{w}")));
        }
        HsiCube::new(h, w, b, data, labels)
    }
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], path: &Path, n: usize) -> Result<Vec<u32>> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
    if &m != magic {
        return Err(Error::Data(format!(
            "{}: bad magic, expected {}",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
        out.push(u32::from_le_bytes(b));
    }
    if out[0] != FORMAT_VERSION {
        return Err(Error::Data(format!("{}: unsupported version {}", path.display(), out[0])));
    }
    Ok(out)
}

fn read_cube_file(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    let hdr = read_header(&mut r, CUBE_MAGIC, path, 4)?;
    let (h, w, b) = (hdr[1] as usize, hdr[2] as usize, hdr[3] as usize);
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)
        .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::Data(format!("{}: unsupported dtype {}", path.display(), dtype[0])));
    }
    if r.len() != h * w * b * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            h * w * b * 4,
            r.len()
        )));
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, b, data))
}

fn read_label_file(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    let hdr = read_header(&mut r, LABEL_MAGIC, path, 3)?;
    let (h, w) = (hdr[1] as usize, hdr[2] as usize);
    if r.len() != h * w * 2 {
        return Err(Error::Data(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            h * w * 2,
            r.len()
        )));
    }
    let labels = r
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, labels))
}

/// A labeled pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub class: u16,
    pub row: usize,
    pub col: usize,
}

/// Disjoint training and testing pixels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitTable {
    pub train: Vec<Pixel>,
    pub test: Vec<Pixel>,
}

impl SplitTable {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (set, name) in [(&self.train, "train"), (&self.test, "test")] {
            for p in set {
                writeln!(w, "{} {} {} {name}", p.class, p.row, p.col)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut split = SplitTable::default();
        for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("{}:{}: expected `class row col train|test`", path.display(), n + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            let px = Pixel {
                class: fields[0].parse().map_err(|_| bad())?,
                row: fields[1].parse().map_err(|_| bad())?,
                col: fields[2].parse().map_err(|_| bad())?,
            };
            match fields[3] {
                "train" => split.train.push(px),
                "test" => split.test.push(px),
                _ => return Err(bad()),
            }
        }
        Ok(split)
    }

    /// Checks disjointness and that every coordinate carries its class in
    /// `cube`.
    pub fn validate(&self, cube: &HsiCube) -> Result<()> {
        let mut seen = vec![false; cube.height * cube.width];
        for p in self.train.iter().chain(&self.test) {
            if p.row >= cube.height || p.col >= cube.width {
                return Err(Error::Data(format!("split pixel ({}, {}) outside the cube", p.row, p.col)));
            }
            let idx = p.row * cube.width + p.col;
            if seen[idx] {
                return Err(Error::Data(format!("pixel ({}, {}) appears twice in the split", p.row, p.col)));
            }
            seen[idx] = true;
            if p.class == 0 || cube.labels[idx] != p.class {
                return Err(Error::Data(format!(
                    "split says class {} at ({}, {}) but the raster has {}",
                    p.class, p.row, p.col, cube.labels[idx]
                )));
            }
        }
        Ok(())
    }
}

/// Samples `train_counts[k-1]` training pixels of each class `k` uniformly
/// without replacement; all remaining labeled pixels become test pixels.
pub fn build_split(cube: &HsiCube, train_counts: &[usize], seed: u64) -> Result<SplitTable> {
    let k = cube.check_labels()?;
    if train_counts.len() != k {
        return Err(Error::Config(format!(
            "{} per-class train counts given for {k} classes",
            train_counts.len()
        )));
    }
    let mut by_class: Vec<Vec<Pixel>> = vec![Vec::new(); k];
    for row in 0..cube.height {
        for col in 0..cube.width {
            let class = cube.label(row, col);
            if class > 0 {
                by_class[class as usize - 1].push(Pixel { class, row, col });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitTable::default();
    for (c, mut pixels) in by_class.into_iter().enumerate() {
        let want = train_counts[c];
        if pixels.len() < want {
            return Err(Error::Data(format!(
                "class {} has {} labeled pixels, {want} requested for training",
                c + 1,
                pixels.len()
            )));
        }
        if pixels.len() == want {
            log::warn!("class {} has no test pixels left", c + 1);
        }
        pixels.shuffle(&mut rng);
        let test = pixels.split_off(want);
        pixels.sort();
        split.train.extend(pixels);
        let mut test = test;
        test.sort();
        split.test.extend(test);
    }
    Ok(split)
}

/// Projects the spectra onto the top `n` principal axes. Returns the
/// reduced cube and the explained-variance ratio of each kept axis.
pub fn pca_reduce(cube: &HsiCube, n: usize) -> Result<(HsiCube, Vec<f64>)> {
    let b = cube.bands;
    if b < n {
        return Err(Error::Data(format!("cube has {b} bands, PCA needs at least {n}")));
    }
    let pixels = cube.height * cube.width;
    let mut mean = vec![0.0f64; b];
    for px in cube.data.chunks_exact(b) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= pixels as f64);
    let mut cov = DMatrix::<f64>::zeros(b, b);
    let mut centered = vec![0.0f64; b];
    for px in cube.data.chunks_exact(b) {
        for (c, (&v, &m)) in centered.iter_mut().zip(px.iter().zip(&mean)) {
            *c = v as f64 - m;
        }
        for i in 0..b {
            let ci = centered[i];
            for j in i..b {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..b {
        for j in i..b {
            let v = cov[(i, j)] / pixels as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total: f64 = (0..b).map(|i| cov[(i, i)]).sum();
    if !(total > 0.0) {
        return Err(Error::Data("cube has zero spectral variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let axes: Vec<Vec<f64>> = order[..n]
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let ratios = order[..n]
        .iter()
        .map(|&k| eig.eigenvalues[k].max(0.0) / total)
        .collect();
    let mut data = Vec::with_capacity(pixels * n);
    for px in cube.data.chunks_exact(b) {
        for axis in &axes {
            let dot: f64 = px
                .iter()
                .zip(&mean)
                .zip(axis)
                .map(|((&v, &m), &a)| (v as f64 - m) * a)
                .sum();
            data.push(dot as f32);
        }
    }
    Ok((
        HsiCube {
            height: cube.height,
            width: cube.width,
            bands: n,
            data,
            labels: cube.labels.clone(),
        },
        ratios,
    ))
}

/// Reflects an out-of-range index back into `[0, n)` without repeating
/// the edge sample.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// `P × P × B` window centred on `(row, col)`, mirrored at the borders.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, size: usize) -> Result<Vec<f32>> {
    if size % 2 == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {size}")));
    }
    let half = (size / 2) as isize;
    let mut out = Vec::with_capacity(size * size * cube.bands);
    for dr in -half..=half {
        let r = mirror(row as isize + dr, cube.height);
        for dc in -half..=half {
            let c = mirror(col as isize + dc, cube.width);
            out.extend_from_slice(cube.pixel(r, c));
        }
    }
    Ok(out)
}

/// Source coordinate for output index `d` when mapping `src` samples onto
/// `dst`, using pixel centres.
fn source_coord(d: usize, src: usize, dst: usize) -> (usize, usize, f32) {
    let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Bilinear resize of a `src × src × bands` patch to `dst × dst × bands`.
pub fn resize_bilinear(patch: &[f32], src: usize, bands: usize, dst: usize) -> Vec<f32> {
    debug_assert_eq!(patch.len(), src * src * bands);
    let map: Vec<_> = (0..dst).map(|d| source_coord(d, src, dst)).collect();
    let mut out = Vec::with_capacity(dst * dst * bands);
    let at = |r: usize, c: usize, b: usize| patch[(r * src + c) * bands + b];
    for &(r0, r1, fr) in &map {
        for &(c0, c1, fc) in &map {
            for b in 0..bands {
                let top = at(r0, c0, b) * (1.0 - fc) + at(r0, c1, b) * fc;
                let bottom = at(r1, c0, b) * (1.0 - fc) + at(r1, c1, b) * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Standardize,
    MinMax,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standardize" | "standard" | "zscore" => Ok(Normalization::Standardize),
            "minmax" | "min-max" => Ok(Normalization::MinMax),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::Standardize => "standardize",
            Normalization::MinMax => "minmax",
        })
    }
}

/// Per-band affine map `x ↦ (x − offset) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub offset: Vec<f32>,
    pub scale: Vec<f32>,
}

impl NormStats {
    fn checked(offset: Vec<f32>, scale: Vec<f32>, what: &str) -> Result<Self> {
        if let Some(b) = scale.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("band {b} has zero {what}; cannot normalize")));
        }
        Ok(NormStats { offset, scale })
    }

    /// Mean and population standard deviation per band over `values`
    /// (band-fastest).
    pub fn standardize(values: &[f32], bands: usize) -> Result<Self> {
        let n = (values.len() / bands) as f64;
        let mut sum = vec![0.0f64; bands];
        let mut sq = vec![0.0f64; bands];
        for px in values.chunks_exact(bands) {
            for b in 0..bands {
                sum[b] += px[b] as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for px in values.chunks_exact(bands) {
            for b in 0..bands {
                let d = px[b] as f64 - mean[b];
                sq[b] += d * d;
            }
        }
        NormStats::checked(
            mean.iter().map(|&m| m as f32).collect(),
            sq.iter().map(|s| (s / n).sqrt() as f32).collect(),
            "standard deviation",
        )
    }

    /// User-supplied per-band mean and standard deviation.
    pub fn from_moments(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Config("mean and std vectors differ in length".into()));
        }
        NormStats::checked(mean, std, "standard deviation")
    }

    /// Per-band minimum and range over `values` (band-fastest).
    pub fn min_max(values: &[f32], bands: usize) -> Result<Self> {
        let mut lo = vec![f32::INFINITY; bands];
        let mut hi = vec![f32::NEG_INFINITY; bands];
        for px in values.chunks_exact(bands) {
            for b in 0..bands {
                lo[b] = lo[b].min(px[b]);
                hi[b] = hi[b].max(px[b]);
            }
        }
        let range = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
        NormStats::checked(lo, range, "range")
    }

    pub fn apply(&self, values: &mut [f32]) {
        let bands = self.offset.len();
        for px in values.chunks_exact_mut(bands) {
            for b in 0..bands {
                px[b] = (px[b] - self.offset[b]) / self.scale[b];
            }
        }
    }
}

/// Training-time augmentation probabilities and constants.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub radiation_prob: f64,
    pub radiation_min: f64,
    pub radiation_max: f64,
    pub noise_std: f64,
    pub mixture_prob: f64,
    pub mixture_weight: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            radiation_prob: 0.5,
            radiation_min: 0.9,
            radiation_max: 1.1,
            noise_std: 1.0 / 25.0,
            mixture_prob: 0.25,
            mixture_weight: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            radiation_prob: 0.0,
            mixture_prob: 0.0,
            ..Default::default()
        }
    }
}

pub fn hflip(patch: &mut [f32], hw: usize, bands: usize) {
    for r in 0..hw {
        for c in 0..hw / 2 {
            for b in 0..bands {
                patch.swap((r * hw + c) * bands + b, (r * hw + hw - 1 - c) * bands + b);
            }
        }
    }
}

pub fn vflip(patch: &mut [f32], hw: usize, bands: usize) {
    let row = hw * bands;
    for r in 0..hw / 2 {
        let (top, bottom) = patch.split_at_mut((hw - 1 - r) * row);
        top[r * row..(r + 1) * row].swap_with_slice(&mut bottom[..row]);
    }
}

/// Applies the random augmentations to one `hw × hw × bands` patch. The
/// four coins are always drawn, in order, so the stream stays aligned.
/// `partners` holds the other training patches of the same class; mixture
/// is skipped when it is empty.
pub fn augment<R: Rng>(
    patch: &mut [f32],
    hw: usize,
    bands: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
    partners: &[&[f32]],
) {
    let coin = |rng: &mut R, p: f64| rng.random::<f64>() < p;
    let h = coin(rng, cfg.hflip_prob);
    let v = coin(rng, cfg.vflip_prob);
    let rad = coin(rng, cfg.radiation_prob);
    let mix = coin(rng, cfg.mixture_prob);
    if h {
        hflip(patch, hw, bands);
    }
    if v {
        vflip(patch, hw, bands);
    }
    let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
    if rad {
        let alpha = rng.random_range(cfg.radiation_min..=cfg.radiation_max) as f32;
        for x in patch.iter_mut() {
            *x = alpha * *x + noise.sample(rng) as f32;
        }
    }
    if mix && !partners.is_empty() {
        let other = partners[rng.random_range(0..partners.len())];
        let w = cfg.mixture_weight as f32;
        for (x, &o) in patch.iter_mut().zip(other) {
            *x = (1.0 - w) * *x + w * o + noise.sample(rng) as f32;
        }
    }
}

/// Preprocessing settings between a raw cube and model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub components: usize,
    pub patch_size: usize,
    pub input_hw: usize,
    pub normalization: Normalization,
    /// Per-band mean and std to use instead of training-split statistics.
    pub user_moments: Option<(Vec<f32>, Vec<f32>)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            components: 12,
            patch_size: 9,
            input_hw: 32,
            normalization: Normalization::Standardize,
            user_moments: None,
        }
    }
}

/// A PCA-reduced cube plus the statistics needed to turn any pixel into a
/// normalized model input.
#[derive(Clone, Debug)]
pub struct PatchSource {
    pub cube: HsiCube,
    pub config: PipelineConfig,
    pub stats: NormStats,
    pub explained_variance: Vec<f64>,
}

impl PatchSource {
    /// Reduces `cube` and fits normalization statistics: standardization
    /// from the training patches of `split`, min-max from the whole
    /// reduced cube.
    pub fn fit(cube: &HsiCube, split: &SplitTable, config: PipelineConfig) -> Result<Self> {
        if config.patch_size % 2 == 0 {
            return Err(Error::Config(format!("patch size must be odd, got {}", config.patch_size)));
        }
        let (reduced, explained_variance) = pca_reduce(cube, config.components)?;
        let placeholder = NormStats {
            offset: vec![0.0; config.components],
            scale: vec![1.0; config.components],
        };
        let mut source = PatchSource {
            cube: reduced,
            config,
            stats: placeholder,
            explained_variance,
        };
        source.stats = match (&source.config.normalization, &source.config.user_moments) {
            (Normalization::Standardize, Some((m, s))) => {
                if m.len() != source.config.components {
                    return Err(Error::Config(format!(
                        "{} user means for {} bands",
                        m.len(),
                        source.config.components
                    )));
                }
                NormStats::from_moments(m.clone(), s.clone())?
            }
            (Normalization::Standardize, None) => {
                if split.train.is_empty() {
                    return Err(Error::Data("no training pixels to fit statistics on".into()));
                }
                let mut values = Vec::new();
                for p in &split.train {
                    values.extend(source.raw_patch(p.row, p.col)?);
                }
                NormStats::standardize(&values, source.config.components)?
            }
            (Normalization::MinMax, _) => NormStats::min_max(&source.cube.data, source.config.components)?,
        };
        Ok(source)
    }

    pub fn patch_len(&self) -> usize {
        self.config.input_hw * self.config.input_hw * self.config.components
    }

    fn raw_patch(&self, row: usize, col: usize) -> Result<Vec<f32>> {
        let p = extract_patch(&self.cube, row, col, self.config.patch_size)?;
        Ok(resize_bilinear(&p, self.config.patch_size, self.config.components, self.config.input_hw))
    }

    /// Extract, resize and normalize the patch centred on `(row, col)`.
    pub fn patch(&self, row: usize, col: usize) -> Result<Vec<f32>> {
        let mut p = self.raw_patch(row, col)?;
        self.stats.apply(&mut p);
        Ok(p)
    }

    /// Patches for `pixels`, concatenated.
    pub fn batch(&self, pixels: &[Pixel]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(pixels.len() * self.patch_len());
        for p in pixels {
            out.extend(self.patch(p.row, p.col)?);
        }
        Ok(out)
    }
}

/// Deterministic synthetic scene: `k` smooth class signatures laid out as
/// Voronoi regions around random sites, plus Gaussian pixel noise.
pub fn synth_cube(height: usize, width: usize, bands: usize, k: usize, noise_std: f64, seed: u64) -> Result<HsiCube> {
    if k == 0 || k > 64 {
        return Err(Error::Config(format!("class count must be in 1..=64, got {k}")));
    }
    if height * width < k {
        return Err(Error::Config(format!("{height}x{width} scene cannot hold {k} classes")));
    }
    if bands == 0 || !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config("bands must be positive and noise_std a finite nonnegative value".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Signatures: a baseline plus three Gaussian bumps over the band axis.
    let signatures: Vec<Vec<f32>> = (0..k)
        .map(|_| {
            let base = rng.random_range(0.1..0.4);
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.0..bands as f64),
                        rng.random_range(0.05..0.25) * bands as f64,
                        rng.random_range(-0.3..0.5),
                    )
                })
                .collect();
            (0..bands)
                .map(|b| {
                    let x = b as f64;
                    let v: f64 = bumps
                        .iter()
                        .map(|&(mu, w, a)| a * (-0.5 * ((x - mu) / w).powi(2)).exp())
                        .sum();
                    (base + v) as f32
                })
                .collect()
        })
        .collect();
    let mut cells: Vec<usize> = (0..height * width).collect();
    cells.shuffle(&mut rng);
    let sites: Vec<(f64, f64)> = cells[..k]
        .iter()
        .map(|&i| ((i / width) as f64, (i % width) as f64))
        .collect();
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = Vec::with_capacity(height * width * bands);
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (rf, cf) = (r as f64, c as f64);
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, &(sr, sc))| (i, (sr - rf).powi(2) + (sc - cf).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap()
                .0;
            labels.push(nearest as u16 + 1);
            for &s in &signatures[nearest] {
                let e = if noise_std > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                data.push(s + e);
            }
        }
    }
    HsiCube::new(height, width, bands, data, labels)
}
