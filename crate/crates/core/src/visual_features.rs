//! Visual box features: crop-and-resize from the page raster and a small
//! convolutional encoder trained jointly with the tagger.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::BoundingBox;
use crate::error::{Error, Result};
use crate::neural::{axpy, dot, Affine, Param, Parameterized};

/// 8-bit page raster, row-major, 1 (gray) or 3 (RGB) interleaved channels.
/// Intensities are exposed in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("raster with {channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} bytes for a {width}x{height}x{channels} raster",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        f64::from(self.data[(y * self.width + x) * self.channels + c]) / 255.0
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Fills the pixel rectangle `[x0, x1) x [y0, y1)` (clipped) in every channel.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: u8) {
        for y in y0.min(self.height)..y1.min(self.height) {
            for x in x0.min(self.width)..x1.min(self.width) {
                for c in 0..self.channels {
                    self.set(x, y, c, v);
                }
            }
        }
    }

    fn luminance(&self, x: usize, y: usize) -> f64 {
        if self.channels == 1 {
            self.get(x, y, 0)
        } else {
            0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2)
        }
    }

    fn channel_value(&self, x: usize, y: usize, c: usize, out_channels: usize) -> f64 {
        if out_channels == 1 {
            self.luminance(x, y)
        } else if self.channels == 1 {
            self.get(x, y, 0)
        } else {
            self.get(x, y, c)
        }
    }

    pub fn from_image(img: image::DynamicImage) -> Self {
        use image::ColorType;
        match img.color() {
            ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Raster {
                    width: w as usize,
                    height: h as usize,
                    channels: 1,
                    data: g.into_raw(),
                }
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Raster {
                    width: w as usize,
                    height: h as usize,
                    channels: 3,
                    data: rgb.into_raw(),
                }
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        Ok(Raster::from_image(img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub channels: usize,
    pub out_dim: usize,
    pub conv: Vec<ConvLayerSpec>,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig {
            crop_h: 32,
            crop_w: 64,
            channels: 1,
            out_dim: 32,
            conv: vec![
                ConvLayerSpec {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                },
                ConvLayerSpec {
                    filters: 16,
                    kernel: 3,
                    stride: 2,
                },
            ],
        }
    }
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_h == 0 || self.crop_w == 0 || self.out_dim == 0 {
            return Err(Error::Config(
                "visual crop size and out_dim must be positive".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "visual channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        for l in &self.conv {
            if l.filters == 0 || l.kernel == 0 || l.kernel % 2 == 0 || l.stride == 0 {
                return Err(Error::Config(format!(
                    "conv layer {l:?}: filters and stride must be positive, kernel odd"
                )));
            }
        }
        Ok(())
    }
}

/// A resized box crop, `crop_h x crop_w x channels`, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCrop {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub present: bool,
}

impl ImageCrop {
    pub fn absent(cfg: &VisualEncoderConfig) -> Self {
        ImageCrop {
            height: cfg.crop_h,
            width: cfg.crop_w,
            channels: cfg.channels,
            data: vec![0.0; cfg.crop_h * cfg.crop_w * cfg.channels],
            present: false,
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Half-pixel-center source coordinate for bilinear resizing, clamped to
/// the valid sample range.
fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Crops the box hull from the image and bilinearly resizes it. A missing
/// image or an empty hull yields an all-zero crop marked absent.
pub fn crop_and_resize(
    image: Option<&Raster>,
    b: &BoundingBox,
    cfg: &VisualEncoderConfig,
) -> ImageCrop {
    let Some(img) = image else {
        return ImageCrop::absent(cfg);
    };
    let hull = b.hull();
    let x0 = (hull.min_x.floor().max(0.0) as usize).min(img.width());
    let y0 = (hull.min_y.floor().max(0.0) as usize).min(img.height());
    let x1 = (hull.max_x.ceil().max(0.0) as usize).min(img.width());
    let y1 = (hull.max_y.ceil().max(0.0) as usize).min(img.height());
    if x1 <= x0 || y1 <= y0 {
        return ImageCrop::absent(cfg);
    }
    let (src_w, src_h) = (x1 - x0, y1 - y0);
    let ch = cfg.channels;
    let mut data = Vec::with_capacity(cfg.crop_h * cfg.crop_w * ch);
    for dy in 0..cfg.crop_h {
        let (ya, yb, fy) = source_coord(dy, cfg.crop_h, src_h);
        for dx in 0..cfg.crop_w {
            let (xa, xb, fx) = source_coord(dx, cfg.crop_w, src_w);
            for c in 0..ch {
                let v = |x: usize, y: usize| img.channel_value(x0 + x, y0 + y, c, ch);
                let top = v(xa, ya) * (1.0 - fx) + v(xb, ya) * fx;
                let bottom = v(xa, yb) * (1.0 - fx) + v(xb, yb) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageCrop {
        height: cfg.crop_h,
        width: cfg.crop_w,
        channels: ch,
        data,
        present: true,
    }
}

/// Same-padded convolution, ReLU, 2x2 max-pool (ceil mode).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    pub in_channels: usize,
    /// Rows `(ky * k + kx) * in_channels + c`, one column per filter.
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
struct ConvCache {
    input: Vec<f64>,
    in_h: usize,
    in_w: usize,
    conv_h: usize,
    conv_w: usize,
    pre: Vec<f64>,
    argmax: Vec<usize>,
}

impl ConvLayer {
    fn new<R: Rng>(name: &str, spec: ConvLayerSpec, in_channels: usize, rng: &mut R) -> Self {
        let fan_in = spec.kernel * spec.kernel * in_channels;
        ConvLayer {
            spec,
            in_channels,
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                fan_in,
                spec.filters,
                fan_in,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), 1, spec.filters),
        }
    }

    fn conv_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.spec.stride;
        (h.div_ceil(s), w.div_ceil(s))
    }

    fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (ch, cw) = self.conv_dims(h, w);
        (ch.div_ceil(2), cw.div_ceil(2))
    }

    fn forward(&self, input: &[f64], in_h: usize, in_w: usize) -> (Vec<f64>, ConvCache) {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let pad = (k - 1) / 2;
        let nf = self.spec.filters;
        let cin = self.in_channels;
        let (conv_h, conv_w) = self.conv_dims(in_h, in_w);
        let bias = self.bias.value.row(0);

        let mut pre = vec![0.0; conv_h * conv_w * nf];
        for oy in 0..conv_h {
            for ox in 0..conv_w {
                let out = &mut pre[(oy * conv_w + ox) * nf..(oy * conv_w + ox + 1) * nf];
                out.copy_from_slice(bias);
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        let base = (iy as usize * in_w + ix as usize) * cin;
                        for c in 0..cin {
                            let v = input[base + c];
                            if v != 0.0 {
                                axpy(v, self.weight.value.row((ky * k + kx) * cin + c), out);
                            }
                        }
                    }
                }
            }
        }

        let (ph, pw) = (conv_h.div_ceil(2), conv_w.div_ceil(2));
        let mut pooled = vec![0.0; ph * pw * nf];
        let mut argmax = vec![0usize; ph * pw * nf];
        for py in 0..ph {
            for px in 0..pw {
                for f in 0..nf {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for y in 2 * py..(2 * py + 2).min(conv_h) {
                        for x in 2 * px..(2 * px + 2).min(conv_w) {
                            let idx = (y * conv_w + x) * nf + f;
                            let v = pre[idx].max(0.0);
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (py * pw + px) * nf + f;
                    pooled[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (
            pooled,
            ConvCache {
                input: input.to_vec(),
                in_h,
                in_w,
                conv_h,
                conv_w,
                pre,
                argmax,
            },
        )
    }

    fn backward(&mut self, cache: &ConvCache, d_out: &[f64]) -> Vec<f64> {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let pad = (k - 1) / 2;
        let nf = self.spec.filters;
        let cin = self.in_channels;

        let mut d_pre = vec![0.0; cache.pre.len()];
        for (o, &idx) in cache.argmax.iter().enumerate() {
            if cache.pre[idx] > 0.0 {
                d_pre[idx] += d_out[o];
            }
        }

        let mut d_in = vec![0.0; cache.input.len()];
        for oy in 0..cache.conv_h {
            for ox in 0..cache.conv_w {
                let g = &d_pre[(oy * cache.conv_w + ox) * nf..(oy * cache.conv_w + ox + 1) * nf];
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                axpy(1.0, g, self.bias.grad.row_mut(0));
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= cache.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix < 0 || ix >= cache.in_w as isize {
                            continue;
                        }
                        let base = (iy as usize * cache.in_w + ix as usize) * cin;
                        for c in 0..cin {
                            let r = (ky * k + kx) * cin + c;
                            let v = cache.input[base + c];
                            if v != 0.0 {
                                axpy(v, g, self.weight.grad.row_mut(r));
                            }
                            d_in[base + c] += dot(self.weight.value.row(r), g);
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Conv stack followed by a dense ReLU head of size `out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEncoder {
    pub config: VisualEncoderConfig,
    pub layers: Vec<ConvLayer>,
    pub head: Affine,
}

/// Forward state for one crop.
#[derive(Clone, Debug)]
pub struct VisualCache {
    layers: Vec<ConvCache>,
    flat: Vec<f64>,
    head_pre: Vec<f64>,
}

impl VisualCache {
    /// ReLU on/off states and max-pool winners. The encoder output is smooth
    /// in its parameters wherever this stays fixed.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.pre.iter().map(|&v| usize::from(v > 0.0)));
            out.extend_from_slice(&l.argmax);
        }
        out.extend(self.head_pre.iter().map(|&v| usize::from(v > 0.0)));
        out
    }
}

impl VisualEncoder {
    pub fn new<R: Rng>(config: VisualEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.conv.len());
        let (mut h, mut w, mut c) = (config.crop_h, config.crop_w, config.channels);
        for (i, spec) in config.conv.iter().enumerate() {
            let layer = ConvLayer::new(&format!("visual.conv{i}"), *spec, c, rng);
            (h, w) = layer.output_dims(h, w);
            c = spec.filters;
            layers.push(layer);
        }
        let head = Affine::new("visual.dense", h * w * c, config.out_dim, rng);
        Ok(VisualEncoder {
            config,
            layers,
            head,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    fn check(&self, crop: &ImageCrop) -> Result<()> {
        let c = &self.config;
        if crop.height != c.crop_h
            || crop.width != c.crop_w
            || crop.channels != c.channels
            || crop.data.len() != c.crop_h * c.crop_w * c.channels
        {
            return Err(Error::Shape(format!(
                "crop {}x{}x{} vs encoder {}x{}x{}",
                crop.height, crop.width, crop.channels, c.crop_h, c.crop_w, c.channels
            )));
        }
        Ok(())
    }

    /// Forward pass; `None` cache for absent crops, which embed to zero.
    pub fn forward(&self, crop: &ImageCrop) -> Result<(Vec<f64>, Option<VisualCache>)> {
        self.check(crop)?;
        if !crop.present {
            return Ok((vec![0.0; self.out_dim()], None));
        }
        let mut x = crop.data.clone();
        let (mut h, mut w) = (crop.height, crop.width);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, h, w);
            (h, w) = layer.output_dims(h, w);
            x = y;
            caches.push(cache);
        }
        let head_pre = self.head.forward(&x)?;
        let out = head_pre.iter().map(|v| v.max(0.0)).collect();
        Ok((
            out,
            Some(VisualCache {
                layers: caches,
                flat: x,
                head_pre,
            }),
        ))
    }

    pub fn embed(&self, crop: &ImageCrop) -> Result<Vec<f64>> {
        Ok(self.forward(crop)?.0)
    }

    /// Accumulates parameter gradients for one crop given `dL/d output`.
    pub fn backward(&mut self, cache: &VisualCache, d_out: &[f64]) {
        let d_pre: Vec<f64> = d_out
            .iter()
            .zip(&cache.head_pre)
            .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
            .collect();
        if d_pre.iter().all(|v| *v == 0.0) {
            return;
        }
        let mut d = vec![0.0; cache.flat.len()];
        self.head.backward(&cache.flat, &d_pre, Some(&mut d));
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            d = layer.backward(lc, &d);
        }
    }
}

impl Parameterized for VisualEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// Externally computed visual vectors keyed by `(invoice_id, box_index)`,
/// where `box_index` is the line order of the box file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedVisual {
    pub dim: usize,
    vectors: HashMap<(String, usize), Vec<f64>>,
}

impl PrecomputedVisual {
    pub fn get(&self, invoice_id: &str, box_index: usize) -> Option<&[f64]> {
        self.vectors
            .get(&(invoice_id.to_string(), box_index))
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn parse(raw: &str, source: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(raw.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::data(source, e.to_string()))?
            .clone();
        if header.len() < 3
            || &header[0] != "invoice_id"
            || &header[1] != "box_index"
            || (2..header.len()).any(|i| header[i] != *format!("v{}", i - 2))
        {
            return Err(Error::Parse {
                path: source.to_string(),
                line: 1,
                msg: "header must be invoice_id,box_index,v0..v{d-1}".into(),
            });
        }
        let dim = header.len() - 2;
        let mut vectors = HashMap::new();
        for (row, rec) in reader.records().enumerate() {
            let line = row + 2;
            let rec = rec.map_err(|e| Error::Parse {
                path: source.to_string(),
                line,
                msg: e.to_string(),
            })?;
            if rec.len() != dim + 2 {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line,
                    msg: format!("expected {} columns, found {}", dim + 2, rec.len()),
                });
            }
            let bad = |msg: String| Error::Parse {
                path: source.to_string(),
                line,
                msg,
            };
            let idx: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad box_index {:?}", &rec[1])))?;
            let v = (2..rec.len())
                .map(|i| {
                    rec[i]
                        .trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| bad(format!("non-numeric value {:?}", &rec[i])))
                })
                .collect::<Result<Vec<f64>>>()?;
            vectors.insert((rec[0].to_string(), idx), v);
        }
        Ok(PrecomputedVisual { dim, vectors })
    }
}

pub fn load_precomputed(path: &Path) -> Result<PrecomputedVisual> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PrecomputedVisual::parse(&raw, &path.display().to_string())
}
