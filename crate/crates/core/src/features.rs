//! Descriptor grids and the 4D cosine cost volume.
//!
//! The built-in extractor is a deterministic handcrafted stand-in for a
//! learned backbone: per grid cell it concatenates mean color, an 8-bin
//! oriented gradient histogram and a fixed-seed random projection of the
//! resampled patch. Real backbone features can be imported instead through
//! the `NMFT` container, which the extractor output can also be exported to;
//! both paths meet behind [`FeatureGrid`].

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{NemfError, NemfResult};
use crate::tensor::{Scalar, Tensor};

pub const FEATURE_MAGIC: [u8; 4] = *b"NMFT";
pub const FEATURE_VERSION: u16 = 1;

/// Simple float raster, row-major, `channels` innermost, values in [0, 1].
#[derive(Clone, Debug)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize) -> NemfResult<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(NemfError::Config(format!(
                "raster must have 1 or 3 channels, got {channels}"
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        })
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    /// Wraparound lookup; the extractor uses periodic boundary handling.
    pub fn get_wrapped(&self, row: isize, col: isize, ch: usize) -> f32 {
        let r = row.rem_euclid(self.height as isize) as usize;
        let c = col.rem_euclid(self.width as isize) as usize;
        self.get(r, c, ch)
    }

    pub fn luminance(&self, row: usize, col: usize) -> f32 {
        if self.channels == 1 {
            self.get(row, col, 0)
        } else {
            0.299 * self.get(row, col, 0) + 0.587 * self.get(row, col, 1)
                + 0.114 * self.get(row, col, 2)
        }
    }

    fn luminance_wrapped(&self, row: isize, col: isize) -> f32 {
        let r = row.rem_euclid(self.height as isize) as usize;
        let c = col.rem_euclid(self.width as isize) as usize;
        self.luminance(r, c)
    }

    /// Bilinear sample with clamped borders, `(row, col)` in pixel coordinates.
    pub fn sample_clamped(&self, row: f32, col: f32, ch: usize) -> f32 {
        let row = row.clamp(0.0, (self.height - 1) as f32);
        let col = col.clamp(0.0, (self.width - 1) as f32);
        let r0 = row.floor() as usize;
        let c0 = col.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = row - r0 as f32;
        let fc = col - c0 as f32;
        self.get(r0, c0, ch) * (1.0 - fr) * (1.0 - fc)
            + self.get(r0, c1, ch) * (1.0 - fr) * fc
            + self.get(r1, c0, ch) * fr * (1.0 - fc)
            + self.get(r1, c1, ch) * fr * fc
    }

    pub fn load(path: &Path) -> NemfResult<Self> {
        let img = image::open(path).map_err(|e| NemfError::Image(format!("{path:?}: {e}")))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut out = Raster::new(h as usize, w as usize, 3)?;
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                out.set(y as usize, x as usize, ch, p.0[ch] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> NemfResult<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for ch in 0..3 {
                let src_ch = if self.channels == 1 { 0 } else { ch };
                let v = self.get(y as usize, x as usize, src_ch).clamp(0.0, 1.0);
                p.0[ch] = (v * 255.0).round() as u8;
            }
        }
        img.save(path)
            .map_err(|e| NemfError::Image(format!("{path:?}: {e}")))
    }
}

/// A source/target raster pair with provenance identifiers.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub source: Raster,
    pub target: Raster,
    pub source_id: String,
    pub target_id: String,
}

impl ImagePair {
    pub fn new(source: Raster, target: Raster) -> NemfResult<Self> {
        for (r, name) in [(&source, "source"), (&target, "target")] {
            if r.height < 16 || r.width < 16 {
                return Err(NemfError::Config(format!(
                    "{name} image is {}x{}, need at least 16x16",
                    r.height, r.width
                )));
            }
        }
        Ok(ImagePair {
            source,
            target,
            source_id: String::new(),
            target_id: String::new(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureProvenance {
    Handcrafted,
    Imported,
}

/// Dense descriptor grid: `rows x cols` cells, `dim` channels each.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub provenance: FeatureProvenance,
    /// Row-major, channel innermost.
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn descriptor(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.cols + col) * self.dim;
        &self.data[base..base + self.dim]
    }
}

#[derive(Clone, Debug)]
pub struct ExtractorConfig {
    /// Output grid resolution (coarse by default).
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Descriptor dimensionality; must exceed channels + 8 histogram bins.
    pub dim: usize,
    /// Side of the square patch each cell is resampled to before projection.
    pub patch: usize,
    /// Seed of the fixed random projection.
    pub projection_seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            grid_rows: 16,
            grid_cols: 16,
            dim: 32,
            patch: 8,
            projection_seed: 0x4e4d4654,
        }
    }
}

const HIST_BINS: usize = 8;

/// Deterministic handcrafted descriptors for one image.
///
/// Per cell: mean color over the cell's patch, an 8-bin gradient-orientation
/// histogram (magnitude weighted, L1 normalized) and a fixed-seed random
/// projection of the resampled grayscale patch. A constant image produces
/// all-zero histogram bins and is not an error.
pub fn extract_handcrafted(image: &Raster, cfg: &ExtractorConfig) -> NemfResult<FeatureGrid> {
    let fixed = image.channels + HIST_BINS;
    if cfg.dim <= fixed {
        return Err(NemfError::Config(format!(
            "descriptor dim {} must exceed {} (color + histogram)",
            cfg.dim, fixed
        )));
    }
    if image.height < cfg.patch || image.width < cfg.patch {
        return Err(NemfError::Config(format!(
            "image {}x{} smaller than patch size {}",
            image.height, image.width, cfg.patch
        )));
    }
    let proj_dim = cfg.dim - fixed;
    let patch_len = cfg.patch * cfg.patch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
    let projection = Tensor::<f64>::uniform(&mut rng, &[proj_dim, patch_len], -1.0, 1.0);
    let scale = 1.0 / (patch_len as f64).sqrt();

    let cell_h = image.height as f64 / cfg.grid_rows as f64;
    let cell_w = image.width as f64 / cfg.grid_cols as f64;

    let cells = cfg.grid_rows * cfg.grid_cols;
    let mut data = vec![0.0f32; cells * cfg.dim];
    data.par_chunks_mut(cfg.dim)
        .enumerate()
        .for_each(|(cell, desc)| {
            let gr = cell / cfg.grid_cols;
            let gc = cell % cfg.grid_cols;
            let row0 = (gr as f64 * cell_h).round() as isize;
            let col0 = (gc as f64 * cell_w).round() as isize;
            let ph = cell_h.round().max(1.0) as isize;
            let pw = cell_w.round().max(1.0) as isize;

            // mean color
            let mut means = vec![0.0f64; image.channels];
            for r in 0..ph {
                for c in 0..pw {
                    for (ch, m) in means.iter_mut().enumerate() {
                        *m += image.get_wrapped(row0 + r, col0 + c, ch) as f64;
                    }
                }
            }
            let count = (ph * pw) as f64;
            for (ch, m) in means.iter().enumerate() {
                desc[ch] = (m / count) as f32;
            }

            // oriented gradient histogram over the cell, central differences
            let mut hist = [0.0f64; HIST_BINS];
            for r in 0..ph {
                for c in 0..pw {
                    let gy = (image.luminance_wrapped(row0 + r + 1, col0 + c)
                        - image.luminance_wrapped(row0 + r - 1, col0 + c))
                        as f64;
                    let gx = (image.luminance_wrapped(row0 + r, col0 + c + 1)
                        - image.luminance_wrapped(row0 + r, col0 + c - 1))
                        as f64;
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag > 0.0 {
                        let angle = gy.atan2(gx); // [-pi, pi]
                        let frac =
                            (angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
                        let bin = ((frac * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                        hist[bin] += mag;
                    }
                }
            }
            let total: f64 = hist.iter().sum();
            for (b, h) in hist.iter().enumerate() {
                desc[image.channels + b] = if total > 0.0 { (h / total) as f32 } else { 0.0 };
            }

            // random projection of the resampled grayscale patch
            let mut patch = vec![0.0f64; patch_len];
            for (i, p) in patch.iter_mut().enumerate() {
                let pr = i / cfg.patch;
                let pc = i % cfg.patch;
                let row = row0 as f32 + (pr as f32 + 0.5) / cfg.patch as f32 * ph as f32;
                let col = col0 as f32 + (pc as f32 + 0.5) / cfg.patch as f32 * pw as f32;
                let r0 = row.floor();
                let c0 = col.floor();
                let fr = (row - r0) as f64;
                let fc = (col - c0) as f64;
                let (r0, c0) = (r0 as isize, c0 as isize);
                let v00 = image.luminance_wrapped(r0, c0) as f64;
                let v01 = image.luminance_wrapped(r0, c0 + 1) as f64;
                let v10 = image.luminance_wrapped(r0 + 1, c0) as f64;
                let v11 = image.luminance_wrapped(r0 + 1, c0 + 1) as f64;
                *p = v00 * (1.0 - fr) * (1.0 - fc)
                    + v01 * (1.0 - fr) * fc
                    + v10 * fr * (1.0 - fc)
                    + v11 * fr * fc;
            }
            for j in 0..proj_dim {
                let wrow = &projection.data()[j * patch_len..(j + 1) * patch_len];
                let mut acc = 0.0f64;
                for (&w, &p) in wrow.iter().zip(&patch) {
                    acc += w * p;
                }
                desc[fixed + j] = (acc * scale) as f32;
            }
        });

    Ok(FeatureGrid {
        rows: cfg.grid_rows,
        cols: cfg.grid_cols,
        dim: cfg.dim,
        provenance: FeatureProvenance::Handcrafted,
        data,
    })
}

/// Write a grid to the `NMFT` container:
/// magic | version u16 LE | h, w, d u32 LE | h*w*d float32 LE payload.
pub fn export_features(grid: &FeatureGrid, path: &Path) -> NemfResult<()> {
    let mut buf = Vec::with_capacity(18 + grid.data.len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for dim in [grid.rows, grid.cols, grid.dim] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &grid.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| NemfError::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| NemfError::io(path.display().to_string(), e))
}

/// Read a grid from the `NMFT` container, validating magic, version, payload
/// length and finiteness of every entry.
pub fn import_features(path: &Path) -> NemfResult<FeatureGrid> {
    let p = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NemfError::io(p.clone(), e))?;
    if bytes.len() < 18 {
        return Err(NemfError::Truncated {
            path: p,
            context: "header".into(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(NemfError::BadMagic {
            path: p,
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(NemfError::BadVersion { path: p, found: version });
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| u32::from_le_bytes(bytes[6 + i * 4..10 + i * 4].try_into().unwrap()) as usize)
        .collect();
    let (rows, cols, dim) = (dims[0], dims[1], dims[2]);
    let expected = rows * cols * dim;
    let payload = &bytes[18..];
    if payload.len() != expected * 4 {
        return Err(NemfError::Truncated {
            path: p,
            context: format!(
                "payload: header promises {expected} floats, file holds {}",
                payload.len() / 4
            ),
        });
    }
    let mut data = Vec::with_capacity(expected);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(NemfError::NonFinite {
                context: p,
                index: i,
            });
        }
        data.push(v);
    }
    Ok(FeatureGrid {
        rows,
        cols,
        dim,
        provenance: FeatureProvenance::Imported,
        data,
    })
}

/// 4D cosine similarity volume between two descriptor grids.
#[derive(Clone, Debug)]
pub struct CostVolume<T> {
    /// [src_rows, src_cols, tgt_rows, tgt_cols]
    pub grid: [usize; 4],
    pub data: Tensor<T>,
}

/// C(x, y) = <Ds(x), Dt(y)> / (|Ds(x)| |Dt(y)|), with zero-norm descriptors
/// contributing similarity 0.
pub fn correlate<T: Scalar>(src: &FeatureGrid, tgt: &FeatureGrid) -> NemfResult<CostVolume<T>> {
    if src.dim != tgt.dim {
        return Err(NemfError::ChannelMismatch {
            src: src.dim,
            tgt: tgt.dim,
        });
    }
    let norms = |g: &FeatureGrid| -> Vec<f64> {
        (0..g.rows * g.cols)
            .map(|i| {
                let d = &g.data[i * g.dim..(i + 1) * g.dim];
                d.iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    };
    let src_norms = norms(src);
    let tgt_norms = norms(tgt);
    let (ns, nt) = (src.rows * src.cols, tgt.rows * tgt.cols);
    let mut out = vec![T::zero(); ns * nt];
    out.par_chunks_mut(nt).enumerate().for_each(|(i, row)| {
        let ds = &src.data[i * src.dim..(i + 1) * src.dim];
        for (j, o) in row.iter_mut().enumerate() {
            let denom = src_norms[i] * tgt_norms[j];
            if denom == 0.0 {
                *o = T::zero();
                continue;
            }
            let dt = &tgt.data[j * tgt.dim..(j + 1) * tgt.dim];
            let mut dot = 0.0f64;
            for (&a, &b) in ds.iter().zip(dt) {
                dot += a as f64 * b as f64;
            }
            *o = T::of(dot / denom);
        }
    });
    let grid = [src.rows, src.cols, tgt.rows, tgt.cols];
    let data = Tensor::from_vec(grid.to_vec(), out)?;
    Ok(CostVolume { grid, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u64, h: usize, w: usize) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Raster::new(h, w, 3).unwrap();
        use rand::Rng;
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn identical_images_give_identical_grids() {
        let img = noise_image(1, 32, 32);
        let cfg = ExtractorConfig {
            grid_rows: 8,
            grid_cols: 8,
            ..Default::default()
        };
        let a = extract_handcrafted(&img, &cfg).unwrap();
        let b = extract_handcrafted(&img, &cfg).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn constant_image_has_zero_histogram_bins() {
        let mut img = Raster::new(32, 32, 3).unwrap();
        for v in img.data.iter_mut() {
            *v = 0.42;
        }
        let cfg = ExtractorConfig {
            grid_rows: 4,
            grid_cols: 4,
            ..Default::default()
        };
        let g = extract_handcrafted(&img, &cfg).unwrap();
        for cell in 0..16 {
            let d = g.descriptor(cell / 4, cell % 4);
            for b in 0..HIST_BINS {
                assert_eq!(d[3 + b], 0.0, "bin {b} of cell {cell}");
            }
            assert!((d[0] - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_cell_translation_translates_the_grid() {
        let base = noise_image(7, 32, 32);
        let cfg = ExtractorConfig {
            grid_rows: 8,
            grid_cols: 8,
            ..Default::default()
        };
        // translate by exactly one cell down (4 px) and two cells right (8 px)
        let mut shifted = Raster::new(32, 32, 3).unwrap();
        for r in 0..32isize {
            for c in 0..32isize {
                for ch in 0..3 {
                    shifted.set(r as usize, c as usize, ch, base.get_wrapped(r - 4, c - 8, ch));
                }
            }
        }
        let g0 = extract_handcrafted(&base, &cfg).unwrap();
        let g1 = extract_handcrafted(&shifted, &cfg).unwrap();
        for gr in 0..8usize {
            for gc in 0..8usize {
                let from = g0.descriptor(gr, gc);
                let to = g1.descriptor((gr + 1) % 8, (gc + 2) % 8);
                for (a, b) in from.iter().zip(to) {
                    assert!((a - b).abs() < 1e-5, "cell ({gr},{gc})");
                }
            }
        }
    }

    #[test]
    fn feature_container_round_trips_bitwise() {
        let img = noise_image(3, 32, 32);
        let cfg = ExtractorConfig {
            grid_rows: 4,
            grid_cols: 4,
            ..Default::default()
        };
        let g = extract_handcrafted(&img, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.nmft");
        export_features(&g, &path).unwrap();
        let back = import_features(&path).unwrap();
        assert_eq!(back.provenance, FeatureProvenance::Imported);
        assert_eq!(back.data, g.data);
        assert_eq!((back.rows, back.cols, back.dim), (4, 4, 32));
    }

    #[test]
    fn import_rejects_nan_with_offending_index() {
        let g = FeatureGrid {
            rows: 2,
            cols: 2,
            dim: 2,
            provenance: FeatureProvenance::Handcrafted,
            data: vec![0.0, 1.0, 2.0, f32::NAN, 4.0, 5.0, 6.0, 7.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nmft");
        export_features(&g, &path).unwrap();
        match import_features(&path).unwrap_err() {
            NemfError::NonFinite { index, .. } => assert_eq!(index, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn import_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nmft");
        std::fs::write(&path, b"JUNKxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            import_features(&path).unwrap_err(),
            NemfError::BadMagic { .. }
        ));

        // valid header, short payload
        let mut buf = Vec::new();
        buf.extend_from_slice(&FEATURE_MAGIC);
        buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        for d in [2u32, 2, 2] {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, &buf).unwrap();
        assert!(matches!(
            import_features(&path).unwrap_err(),
            NemfError::Truncated { .. }
        ));
    }

    #[test]
    fn consistent_header_and_payload_accepted() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&FEATURE_MAGIC);
        buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        for d in [16u32, 16, 64] {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for i in 0..16 * 16 * 64 {
            buf.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ok.nmft");
        std::fs::write(&path, &buf).unwrap();
        let g = import_features(&path).unwrap();
        assert_eq!((g.rows, g.cols, g.dim), (16, 16, 64));
    }

    #[test]
    fn self_correlation_is_one_on_the_diagonal() {
        let img = noise_image(5, 32, 32);
        let cfg = ExtractorConfig {
            grid_rows: 4,
            grid_cols: 4,
            ..Default::default()
        };
        let g = extract_handcrafted(&img, &cfg).unwrap();
        let c = correlate::<f64>(&g, &g).unwrap();
        let n = 16;
        for i in 0..n {
            let v = c.data.data()[i * n + i];
            assert!((v - 1.0).abs() < 1e-9, "diagonal {i} = {v}");
        }
    }

    #[test]
    fn orthogonal_descriptors_correlate_to_zero() {
        let mk = |data: Vec<f32>| FeatureGrid {
            rows: 1,
            cols: 1,
            dim: 4,
            provenance: FeatureProvenance::Imported,
            data,
        };
        let a = mk(vec![1.0, 0.0, 0.0, 0.0]);
        let b = mk(vec![0.0, 2.0, 0.0, 0.0]);
        let c = correlate::<f64>(&a, &b).unwrap();
        assert_eq!(c.data.data()[0], 0.0);
    }

    #[test]
    fn zero_norm_descriptor_gives_similarity_zero() {
        let mk = |data: Vec<f32>| FeatureGrid {
            rows: 1,
            cols: 1,
            dim: 2,
            provenance: FeatureProvenance::Imported,
            data,
        };
        let a = mk(vec![0.0, 0.0]);
        let b = mk(vec![1.0, 1.0]);
        let c = correlate::<f64>(&a, &b).unwrap();
        assert_eq!(c.data.data()[0], 0.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let a = FeatureGrid {
            rows: 1,
            cols: 1,
            dim: 4,
            provenance: FeatureProvenance::Imported,
            data: vec![1.0; 4],
        };
        let b = FeatureGrid {
            rows: 1,
            cols: 1,
            dim: 8,
            provenance: FeatureProvenance::Imported,
            data: vec![1.0; 8],
        };
        assert!(matches!(
            correlate::<f64>(&a, &b).unwrap_err(),
            NemfError::ChannelMismatch { src: 4, tgt: 8 }
        ));
    }

    #[test]
    fn correlate_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        let mk = |rng: &mut ChaCha8Rng| FeatureGrid {
            rows: 4,
            cols: 4,
            dim: 8,
            provenance: FeatureProvenance::Imported,
            data: (0..4 * 4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let src = mk(&mut rng);
        let tgt = mk(&mut rng);
        let c = correlate::<f64>(&src, &tgt).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let a = &src.data[i * 8..(i + 1) * 8];
                let b = &tgt.data[j * 8..(j + 1) * 8];
                let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
                let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let expect = dot / (na * nb);
                let got = c.data.data()[i * 16 + j];
                assert!((got - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn correlation_is_scale_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        use rand::Rng;
        let data: Vec<f32> = (0..2 * 2 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f32> = data
            .chunks(8)
            .enumerate()
            .flat_map(|(i, d)| {
                let s = 0.5 + i as f32;
                d.iter().map(move |&v| v * s).collect::<Vec<_>>()
            })
            .collect();
        let mk = |data: Vec<f32>| FeatureGrid {
            rows: 2,
            cols: 2,
            dim: 8,
            provenance: FeatureProvenance::Imported,
            data,
        };
        let a = correlate::<f64>(&mk(data.clone()), &mk(data.clone())).unwrap();
        let b = correlate::<f64>(&mk(scaled), &mk(data)).unwrap();
        for (x, y) in a.data.data().iter().zip(b.data.data()) {
            assert!((x - y).abs() < 1e-6);
            assert!(x.abs() <= 1.0 + 1e-6);
        }
    }
}
