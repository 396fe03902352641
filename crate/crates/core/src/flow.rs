//! Dense correspondence fields and their on-disk format.
//!
//! A flow field stores one (dy, dx) displacement per source lattice pixel,
//! in target-image pixel units. The lattice maps to source image coordinates
//! with the same align-corners convention the volume geometry uses. Files
//! carry a short text header followed by raw float32 LE pairs, so headers
//! stay inspectable while payloads stay exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NemfError, NemfResult};
use crate::tensor::Scalar;

pub const FLOW_MAGIC: &str = "NMFF";
pub const FLOW_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    pub rows: usize,
    pub cols: usize,
    /// (height, width) of the source image the lattice spans.
    pub src_image: (usize, usize),
    /// (height, width) of the target image displacements point into.
    pub tgt_image: (usize, usize),
    pub provenance: String,
    /// [rows, cols, 2] row-major, (dy, dx) innermost.
    pub data: Vec<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(
        rows: usize,
        cols: usize,
        src_image: (usize, usize),
        tgt_image: (usize, usize),
    ) -> Self {
        FlowField {
            rows,
            cols,
            src_image,
            tgt_image,
            provenance: String::new(),
            data: vec![T::zero(); rows * cols * 2],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> [T; 2] {
        let base = (r * self.cols + c) * 2;
        [self.data[base], self.data[base + 1]]
    }

    pub fn set(&mut self, r: usize, c: usize, flow: [T; 2]) {
        let base = (r * self.cols + c) * 2;
        self.data[base] = flow[0];
        self.data[base + 1] = flow[1];
    }

    /// Source image coordinate of a lattice pixel, align-corners.
    pub fn src_coord(&self, r: usize, c: usize) -> [f64; 2] {
        let map = |i: usize, n: usize, extent: usize| -> f64 {
            if n <= 1 {
                0.0
            } else {
                i as f64 * (extent - 1) as f64 / (n - 1) as f64
            }
        };
        [
            map(r, self.rows, self.src_image.0),
            map(c, self.cols, self.src_image.1),
        ]
    }

    /// Absolute target coordinate a lattice pixel currently maps to.
    pub fn target_of(&self, r: usize, c: usize) -> [f64; 2] {
        let s = self.src_coord(r, c);
        let f = self.get(r, c);
        [s[0] + f[0].to_f64(), s[1] + f[1].to_f64()]
    }

    /// Lattice pixel nearest to a source image coordinate.
    pub fn nearest_pixel(&self, src_rc: [f64; 2]) -> (usize, usize) {
        let inv = |p: f64, n: usize, extent: usize| -> usize {
            if n <= 1 || extent <= 1 {
                return 0;
            }
            let g = p * (n - 1) as f64 / (extent - 1) as f64;
            (g.round().max(0.0) as usize).min(n - 1)
        };
        (
            inv(src_rc[0], self.rows, self.src_image.0),
            inv(src_rc[1], self.cols, self.src_image.1),
        )
    }

    pub fn save(&self, path: &Path) -> NemfResult<()> {
        let p = path.display().to_string();
        let mut buf = Vec::new();
        write!(
            &mut buf,
            "{FLOW_MAGIC} {FLOW_VERSION}\nflow {} {}\nsource {} {}\ntarget {} {}\nprovenance {}\ndata\n",
            self.rows,
            self.cols,
            self.src_image.0,
            self.src_image.1,
            self.tgt_image.0,
            self.tgt_image.1,
            if self.provenance.is_empty() { "-" } else { &self.provenance },
        )
        .expect("in-memory write");
        for v in &self.data {
            buf.extend_from_slice(&v.to_f32_le());
        }
        std::fs::write(path, buf).map_err(|e| NemfError::io(p, e))
    }

    pub fn load(path: &Path) -> NemfResult<Self> {
        let p = path.display().to_string();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| NemfError::io(p.clone(), e))?;
        let header_end = find_subslice(&bytes, b"\ndata\n").ok_or_else(|| NemfError::Truncated {
            path: p.clone(),
            context: "header".into(),
        })?;
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| NemfError::Record {
            path: p.clone(),
            line: 0,
            reason: "header is not UTF-8".into(),
        })?;
        let mut rows = 0;
        let mut cols = 0;
        let mut src = (0, 0);
        let mut tgt = (0, 0);
        let mut provenance = String::new();
        for (idx, line) in header.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap_or("");
            let mut nums = |n: usize| -> NemfResult<Vec<usize>> {
                let vals: Vec<usize> = parts
                    .by_ref()
                    .take(n)
                    .filter_map(|s| s.parse().ok())
                    .collect();
                if vals.len() != n {
                    return Err(NemfError::Record {
                        path: p.clone(),
                        line: idx + 1,
                        reason: format!("malformed {head} line"),
                    });
                }
                Ok(vals)
            };
            match head {
                FLOW_MAGIC => {
                    let v = nums(1)?;
                    if v[0] as u32 != FLOW_VERSION {
                        return Err(NemfError::BadVersion {
                            path: p.clone(),
                            found: v[0] as u16,
                        });
                    }
                }
                "flow" => {
                    let v = nums(2)?;
                    rows = v[0];
                    cols = v[1];
                }
                "source" => {
                    let v = nums(2)?;
                    src = (v[0], v[1]);
                }
                "target" => {
                    let v = nums(2)?;
                    tgt = (v[0], v[1]);
                }
                "provenance" => {
                    provenance = line.trim_start_matches("provenance").trim().to_string();
                }
                _ => {}
            }
        }
        if !header.starts_with(FLOW_MAGIC) {
            return Err(NemfError::BadMagic {
                path: p,
                expected: *b"NMFF",
                found: bytes[..4.min(bytes.len())]
                    .try_into()
                    .unwrap_or([0; 4]),
            });
        }
        let payload = &bytes[header_end + 6..];
        let expected = rows * cols * 2;
        if payload.len() != expected * 4 {
            return Err(NemfError::Truncated {
                path: p,
                context: format!(
                    "payload: header promises {expected} floats, file holds {}",
                    payload.len() / 4
                ),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| T::from_f32_le(c.try_into().unwrap()))
            .collect();
        Ok(FlowField {
            rows,
            cols,
            src_image: src,
            tgt_image: tgt,
            provenance: if provenance == "-" { String::new() } else { provenance },
            data,
        })
    }

    /// Render with the usual optical-flow color wheel: hue encodes direction,
    /// saturation encodes magnitude relative to the field maximum.
    pub fn save_color_png(&self, path: &Path) -> NemfResult<()> {
        let mut max_mag = 0.0f64;
        for rc in self.data.chunks(2) {
            let m = (rc[0].to_f64().powi(2) + rc[1].to_f64().powi(2)).sqrt();
            max_mag = max_mag.max(m);
        }
        if max_mag == 0.0 {
            max_mag = 1.0;
        }
        let mut img = image::RgbImage::new(self.cols as u32, self.rows as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let f = self.get(y as usize, x as usize);
            let (dy, dx) = (f[0].to_f64(), f[1].to_f64());
            let mag = ((dy * dy + dx * dx).sqrt() / max_mag).min(1.0);
            let angle = dy.atan2(dx); // [-pi, pi]
            let hue = (angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * 360.0;
            px.0 = hsv_to_rgb(hue, mag, 1.0);
        }
        img.save(path)
            .map_err(|e| NemfError::Image(format!("{path:?}: {e}")))
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}
