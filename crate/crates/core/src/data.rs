//! Paired phone/DSLR patches: PNG I/O, the on-disk layout, a synthetic
//! degradation pipeline and seeded batching.
//!
//! Layout: `<root>/<split>/phone/<id>.png` next to `<root>/<split>/dslr/<id>.png`.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::ops::color::LUMA;
use crate::tensor::{reflect_index, Rng, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct PatchPair {
    pub phone: Tensor,
    pub dslr: Tensor,
    pub id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::arg("split", format!("expected train or test, got {s:?}"))),
        }
    }
}

fn decode_err(path: &Path, msg: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Decodes any PNG to a `(1,3,H,W)` tensor in `[0,1]`. Gray is replicated,
/// alpha dropped, 16-bit samples reduced to 8.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(decode_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        other => return Err(decode_err(path, format!("unsupported color type {other:?}"))),
    };
    let shape = Shape::new(1, 3, h, w).map_err(|_| decode_err(path, "empty image"))?;
    let mut out = Tensor::zeros(shape);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..];
            for c in 0..3 {
                let v = if channels < 3 { px[0] } else { px[c] };
                out.set(0, c, y, x, v as f32 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Writes item 0 of a 1- or 3-channel tensor as 8-bit RGB, clamping to `[0,1]`.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.c != 1 && s.c != 3 {
        return Err(Error::ChannelMismatch {
            op: "write_png",
            expected: 3,
            actual: s.c,
        });
    }
    let mut bytes = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = img.at(0, if s.c == 1 { 0 } else { c }, y, x);
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

/// Loads every pair of a split in lexicographic id order.
pub fn load_pairs(root: &Path, split: Split) -> Result<Vec<PatchPair>> {
    let base = split_dir(root, split);
    let (phone_dir, dslr_dir) = (base.join("phone"), base.join("dslr"));
    let phone_ids = png_ids(&phone_dir)?;
    let dslr_ids = png_ids(&dslr_dir)?;
    if let Some(id) = dslr_ids.iter().find(|id| phone_ids.binary_search(id).is_err()) {
        return Err(Error::MissingCounterpart {
            id: id.clone(),
            dir: phone_dir,
        });
    }
    let mut pairs = Vec::with_capacity(phone_ids.len());
    for id in phone_ids {
        if dslr_ids.binary_search(&id).is_err() {
            return Err(Error::MissingCounterpart { id, dir: dslr_dir });
        }
        let phone = read_png(&phone_dir.join(format!("{id}.png")))?;
        let dslr = read_png(&dslr_dir.join(format!("{id}.png")))?;
        if phone.shape() != dslr.shape() {
            return Err(Error::PairSizeMismatch {
                id,
                phone: phone.shape(),
                dslr: dslr.shape(),
            });
        }
        pairs.push(PatchPair { phone, dslr, id });
    }
    Ok(pairs)
}

/// Writes pairs into the directory layout `load_pairs` reads.
pub fn save_pairs(root: &Path, split: Split, pairs: &[PatchPair]) -> Result<()> {
    let base = split_dir(root, split);
    for p in pairs {
        write_png(&base.join("phone").join(format!("{}.png", p.id)), &p.phone)?;
        write_png(&base.join("dslr").join(format!("{}.png", p.id)), &p.dslr)?;
    }
    Ok(())
}

/// Synthetic stand-in for a phone camera: blur, then desaturation toward
/// luma, then additive noise, then clamping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeSpec {
    pub blur_sigma: f32,
    pub saturation_scale: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec {
            blur_sigma: 1.0,
            saturation_scale: 0.7,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn identity() -> Self {
        DegradeSpec {
            blur_sigma: 0.0,
            saturation_scale: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.blur_sigma >= 0.0
            && self.noise_sigma >= 0.0
            && self.saturation_scale > 0.0
            && self.saturation_scale <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "degrade: need blur_sigma >= 0, noise_sigma >= 0, saturation_scale in (0,1], got {self:?}"
            )))
        }
    }
}

fn gaussian_taps(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / total) as f32).collect()
}

/// Normalized separable Gaussian blur with mirror boundaries.
pub fn blur(img: &Tensor, sigma: f32) -> Tensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let s = img.shape();
    let (h, w) = (s.h, s.w);
    let mut out = img.clone();
    let mut tmp = vec![0.0f32; h * w];
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = out.plane_mut(n, c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, &g) in taps.iter().enumerate() {
                        acc += g * plane[y * w + reflect_index(x as isize + t as isize - r, w)];
                    }
                    tmp[y * w + x] = acc;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, &g) in taps.iter().enumerate() {
                        acc += g * tmp[reflect_index(y as isize + t as isize - r, h) * w + x];
                    }
                    plane[y * w + x] = acc;
                }
            }
        }
    }
    out
}

/// Moves each pixel toward its luma: `scale * rgb + (1 - scale) * l`, exact
/// at `scale = 1`.
pub fn desaturate(img: &Tensor, scale: f32) -> Result<Tensor> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::ChannelMismatch {
            op: "desaturate",
            expected: 3,
            actual: s.c,
        });
    }
    let mut out = img.clone();
    for n in 0..s.n {
        for i in 0..s.plane() {
            let rgb = [img.plane(n, 0)[i], img.plane(n, 1)[i], img.plane(n, 2)[i]];
            let l = LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2];
            for (c, v) in rgb.iter().enumerate() {
                out.plane_mut(n, c)[i] = scale * v + (1.0 - scale) * l;
            }
        }
    }
    Ok(out)
}

/// Phone side of a synthetic pair. Deterministic in `(img, spec)`.
pub fn degrade_image(img: &Tensor, spec: &DegradeSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut out = desaturate(&blur(img, spec.blur_sigma), spec.saturation_scale)?;
    let mut rng = Rng::new(spec.seed);
    for v in out.data_mut() {
        if spec.noise_sigma > 0.0 {
            *v += spec.noise_sigma * rng.standard_normal();
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn degrade(id: impl Into<String>, img: &Tensor, spec: &DegradeSpec) -> Result<PatchPair> {
    Ok(PatchPair {
        phone: degrade_image(img, spec)?,
        dslr: img.clone(),
        id: id.into(),
    })
}

/// A smooth, colorful random scene: a two-color gradient, a few soft discs
/// and rectangles and a sinusoidal texture. Values in `[0,1]`.
pub fn synthetic_scene(h: usize, w: usize, rng: &mut Rng) -> Result<Tensor> {
    let shape = Shape::new(1, 3, h, w)?;
    let color = |rng: &mut Rng| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
    let (c0, c1) = (color(rng), color(rng));
    let angle = rng.uniform(0.0, std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = Tensor::from_fn(shape, |_, c, y, x| {
        let t = 0.5 + 0.5 * (dx * (x as f32 / w as f32 - 0.5) + dy * (y as f32 / h as f32 - 0.5));
        c0[c] + (c1[c] - c0[c]) * t.clamp(0.0, 1.0)
    });
    let scale = h.min(w) as f32;
    for _ in 0..4 {
        let col = color(rng);
        let (cy, cx) = (rng.uniform(0.0, h as f32), rng.uniform(0.0, w as f32));
        let radius = rng.uniform(0.1, 0.35) * scale;
        let disc = rng.below(2) == 0;
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = ((y as f32 - cy) / radius, (x as f32 - cx) / radius);
                let d = if disc { (ry * ry + rx * rx).sqrt() } else { ry.abs().max(rx.abs()) };
                let alpha = (1.0 - d).clamp(0.0, 0.15) / 0.15;
                for (c, v) in col.iter().enumerate() {
                    let old = img.at(0, c, y, x);
                    img.set(0, c, y, x, old + alpha * (v - old));
                }
            }
        }
    }
    let freq = rng.uniform(0.3, 1.2);
    let amp = rng.uniform(0.02, 0.08);
    let phase = rng.uniform(0.0, std::f32::consts::TAU);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let t = amp * (freq * x as f32 + phase).sin() * (freq * 0.7 * y as f32).cos();
                let v = img.at(0, c, y, x) + t;
                img.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// `count` synthetic pairs of `size`×`size`. Pair `i` depends only on
/// `(seed, i)` and the degradation settings.
pub fn synthetic_pairs(count: usize, size: usize, spec: &DegradeSpec, seed: u64) -> Result<Vec<PatchPair>> {
    let root = Rng::new(seed);
    (0..count)
        .map(|i| {
            let clean = synthetic_scene(size, size, &mut root.derive(2 * i as u64))?;
            let noise_seed = root.derive(2 * i as u64 + 1).next_u64();
            let spec = DegradeSpec { seed: noise_seed, ..*spec };
            degrade(format!("{i:05}"), &clean, &spec)
        })
        .collect()
}

/// One sampled batch, with the ids it was drawn from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub phone: Tensor,
    pub dslr: Tensor,
    pub ids: Vec<String>,
}

/// Uniform sampling with replacement; the sequence depends only on the seed.
pub struct Batcher<'a> {
    pairs: &'a [PatchPair],
    size: usize,
    rng: Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(pairs: &'a [PatchPair], size: usize, seed: u64) -> Result<Batcher<'a>> {
        if size == 0 {
            return Err(Error::arg("batch", "size must be >= 1"));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no pairs to batch".into()));
        }
        Ok(Batcher {
            pairs,
            size,
            rng: Rng::new(seed),
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let picks: Vec<&PatchPair> = (0..self.size).map(|_| &self.pairs[self.rng.below(self.pairs.len())]).collect();
        let phone: Vec<&Tensor> = picks.iter().map(|p| &p.phone).collect();
        let dslr: Vec<&Tensor> = picks.iter().map(|p| &p.dslr).collect();
        Ok(Batch {
            phone: Tensor::concat_batch(&phone)?,
            dslr: Tensor::concat_batch(&dslr)?,
            ids: picks.iter().map(|p| p.id.clone()).collect(),
        })
    }
}

impl Iterator for Batcher<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Result<Batch>> {
        Some(self.next_batch())
    }
}
