//! Datasets and file emitters: the 2-D ring of Gaussians, the MNIST IDX
//! reader, PGM sample grids, and CSV helpers.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub num_modes: usize,
    pub radius: f64,
    pub mode_std: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            num_modes: 8,
            radius: 1.0,
            mode_std: 0.05,
        }
    }
}

impl RingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_modes == 0 || !(self.radius > 0.0) || !(self.mode_std >= 0.0) {
            return Err(Error::Precondition(format!("invalid ring spec {self:?}")));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.num_modes)
            .map(|k| {
                let a = TAU * k as f64 / self.num_modes as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }
}

/// `n×2` samples: a uniform mode, then isotropic jitter of `mode_std`.
pub fn sample_ring(spec: &RingSpec, n: usize, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Precondition("n must be >= 1".into()));
    }
    let centers = spec.centers();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng.below(spec.num_modes)];
        data.push(c[0] + spec.mode_std * rng.gaussian());
        data.push(c[1] + spec.mode_std * rng.gaussian());
    }
    Tensor::new(vec![n, 2], data)
}

/// Fraction of modes with at least one sample within `threshold`
/// (default `3·mode_std`).
pub fn mode_coverage(samples: &Tensor, spec: &RingSpec, threshold: Option<f64>) -> Result<f64> {
    let (n, d) = samples.dims2()?;
    if d != 2 {
        return Err(Error::Shape(format!("samples must be n×2, got n×{d}")));
    }
    let thr = threshold.unwrap_or(3.0 * spec.mode_std);
    let hit = spec
        .centers()
        .iter()
        .filter(|c| {
            (0..n).any(|i| {
                let p = &samples.data()[2 * i..2 * i + 2];
                (p[0] - c[0]).hypot(p[1] - c[1]) <= thr
            })
        })
        .count();
    Ok(hit as f64 / spec.num_modes as f64)
}

/// Grayscale images, `n×c×h×w`, values in `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub range: (f64, f64),
}

impl ImageBatch {
    pub fn new(images: Tensor, range: (f64, f64)) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("image batch must be rank 4, got {:?}", images.shape())));
        }
        if images.data().iter().any(|&v| v < range.0 || v > range.1) {
            return Err(Error::Precondition(format!("pixel outside declared range {range:?}")));
        }
        Ok(Self {
            images,
            labels: Vec::new(),
            range,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.images.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Image `i` flattened.
    pub fn image(&self, i: usize) -> &[f64] {
        let [_, c, h, w] = self.dims();
        let sz = c * h * w;
        &self.images.data()[i * sz..(i + 1) * sz]
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX3 image file into `n×1×h×w` with pixels scaled to `[0,1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let h = be_u32(bytes, 8, "images")? as usize;
    let w = be_u32(bytes, 12, "images")? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * h * w {
        return Err(Error::Format(format!(
            "images: header says {} bytes, file has {}",
            n * h * w,
            payload.len()
        )));
    }
    Tensor::batch(vec![n, 1, h, w], payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!("labels: header says {n}, file has {}", payload.len())));
    }
    Ok(payload.to_vec())
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<ImageBatch> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != images.shape()[0] {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let mut batch = ImageBatch::new(images, (0.0, 1.0))?;
    batch.labels = labels;
    Ok(batch)
}

/// Encodes IDX3 bytes from 8-bit pixels; the inverse of [`parse_idx_images`].
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn quantize(v: f64, (lo, hi): (f64, f64)) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Tiles single-channel images into a row-major grid of `cols` columns.
/// Returns `(width, height, pixels)`.
pub fn pgm_grid(images: &ImageBatch, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    let [n, c, h, w] = images.dims();
    if c != 1 {
        return Err(Error::Precondition(format!("grayscale only, got {c} channels")));
    }
    if cols == 0 {
        return Err(Error::Precondition("cols must be >= 1".into()));
    }
    let rows = n.div_ceil(cols).max(1);
    let (gw, gh) = (cols * w, rows * h);
    let mut px = vec![0u8; gw * gh];
    for i in 0..n {
        let (ty, tx) = (i / cols, i % cols);
        let img = images.image(i);
        for y in 0..h {
            for x in 0..w {
                px[(ty * h + y) * gw + tx * w + x] = quantize(img[y * w + x], images.range);
            }
        }
    }
    Ok((gw, gh, px))
}

pub fn write_pgm_grid(images: &ImageBatch, cols: usize, path: &Path) -> Result<()> {
    let (w, h, px) = pgm_grid(images, cols)?;
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&px)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm_grid`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("pgm: truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format(format!("pgm: unsupported header {fields:?}")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("pgm: bad size {s:?}")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let px = bytes.get(pos + 1..).unwrap_or(&[]).to_vec();
    if px.len() != w * h {
        return Err(Error::Format(format!("pgm: expected {} pixels, found {}", w * h, px.len())));
    }
    Ok((w, h, px))
}

/// Writes 2-D points as `x,y` rows.
pub fn write_points_csv(points: &Tensor, path: &Path) -> Result<()> {
    let (n, d) = points.dims2()?;
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = ["x", "y", "z"].iter().take(d).map(|s| s.to_string()).chain((3..d).map(|k| format!("c{k}"))).collect();
    w.write_record(&header)?;
    for i in 0..n {
        w.write_record(points.data()[i * d..(i + 1) * d].iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header and rows of reals.
pub fn write_table_csv(header: &[&str], rows: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_lands_on_lattice() {
        let spec = RingSpec {
            mode_std: 0.0,
            ..RingSpec::default()
        };
        let s = sample_ring(&spec, 200, &mut Rng::new(0)).unwrap();
        let centers = spec.centers();
        for p in s.data().chunks(2) {
            assert!(centers.iter().any(|c| c[0] == p[0] && c[1] == p[1]));
        }
    }

    #[test]
    fn single_mode_sits_at_radius() {
        let spec = RingSpec {
            num_modes: 1,
            radius: 2.0,
            mode_std: 0.1,
        };
        let s = sample_ring(&spec, 4000, &mut Rng::new(1)).unwrap();
        let mx = s.data().chunks(2).map(|p| p[0]).sum::<f64>() / 4000.0;
        let my = s.data().chunks(2).map(|p| p[1]).sum::<f64>() / 4000.0;
        assert!((mx - 2.0).abs() < 3.0 * 0.1 / 4000f64.sqrt());
        assert!(my.abs() < 3.0 * 0.1 / 4000f64.sqrt());
    }

    #[test]
    fn ring_mean_near_origin() {
        let n = 20_000;
        let s = sample_ring(&RingSpec::default(), n, &mut Rng::new(2)).unwrap();
        // per-coordinate std of the mixture: sqrt(r²/2 + std²)
        let sd = (0.5f64 + 0.0025).sqrt();
        for k in 0..2 {
            let m = s.data().iter().skip(k).step_by(2).sum::<f64>() / n as f64;
            assert!(m.abs() < 3.0 * sd / (n as f64).sqrt(), "coord {k} mean {m}");
        }
    }

    #[test]
    fn coverage_cases() {
        let spec = RingSpec::default();
        let centers: Vec<f64> = spec.centers().into_iter().flatten().collect();
        let t = Tensor::new(vec![8, 2], centers).unwrap();
        assert_eq!(mode_coverage(&t, &spec, None).unwrap(), 1.0);
        let one = Tensor::new(vec![5, 2], [1.0, 0.0].repeat(5)).unwrap();
        assert_eq!(mode_coverage(&one, &spec, None).unwrap(), 1.0 / 8.0);
        let real = sample_ring(&spec, 1000, &mut Rng::new(3)).unwrap();
        assert_eq!(mode_coverage(&real, &spec, None).unwrap(), 1.0);
    }

    #[test]
    fn idx_empty_and_one_image() {
        let t = parse_idx_images(&encode_idx_images(0, 28, 28, &[])).unwrap();
        assert_eq!(t.shape(), &[0, 1, 28, 28]);
        let t = parse_idx_images(&encode_idx_images(1, 2, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[7, 3])).unwrap(), vec![7, 3]);
    }

    #[test]
    fn idx_rejects_bad_input() {
        let mut bytes = encode_idx_images(1, 2, 2, &[1, 2, 3, 4]);
        assert!(parse_idx_images(&bytes[..18]).is_err());
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));
        assert!(parse_idx_labels(&encode_idx_images(0, 1, 1, &[])).is_err());
        assert!(parse_idx_images(&[0, 0]).is_err());
    }

    #[test]
    fn pgm_layout_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let black = ImageBatch::new(Tensor::zeros(&[1, 1, 3, 3]), (0.0, 1.0)).unwrap();
        let p = dir.path().join("black.pgm");
        write_pgm_grid(&black, 1, &p).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (3, 3));
        assert!(px.iter().all(|&b| b == 0));

        let mut rng = Rng::new(4);
        let imgs = ImageBatch::new(Tensor::from_fn(&[4, 1, 2, 3], || rng.uniform()), (0.0, 1.0)).unwrap();
        let p = dir.path().join("grid.pgm");
        write_pgm_grid(&imgs, 2, &p).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (6, 4));
        for i in 0..4 {
            let (ty, tx) = (i / 2, i % 2);
            for y in 0..2 {
                for x in 0..3 {
                    let want = (imgs.image(i)[y * 3 + x] * 255.0).round() as u8;
                    assert_eq!(px[(ty * 2 + y) * 6 + tx * 3 + x], want);
                }
            }
        }
    }
}
