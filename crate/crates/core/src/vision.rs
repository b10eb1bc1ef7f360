//! Residual convolutional image encoder and grid flattening.

use lvqa_tensor::{Conv2dGeometry, Graph, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::{VisionConfig, ENCODER_STRIDE};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

const NORM_EPS: f64 = 1e-5;

/// Square image, channels first, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    size: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(size: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if size == 0 || channels == 0 || pixels.len() != size * size * channels {
            return Err(Error::Data(format!(
                "image buffer of {} values does not match {channels}x{size}x{size}",
                pixels.len()
            )));
        }
        Ok(ImageTensor { size, channels, pixels })
    }

    /// Scales 8-bit grayscale samples to `[0, 1]`.
    pub fn from_gray8(size: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(size, 1, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Replicates a grayscale plane to `channels` planes.
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            return Err(Error::Data(format!(
                "cannot convert a {}-channel image to {channels} channels",
                self.channels
            )));
        }
        Self::new(self.size, channels, self.pixels.repeat(channels))
    }
}

/// Spatial feature map `side x side x width`, row-major over positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    pub side: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn at(&self, i: usize, j: usize) -> &[T] {
        let start = (i * self.side + j) * self.width;
        &self.values[start..start + self.width]
    }

    /// Grid cells as rows: cell `(i, j)` becomes row `i * side + j`.
    pub fn flatten(&self) -> Tensor<T> {
        Tensor::new(vec![self.side * self.side, self.width], self.values.clone())
            .expect("grid buffer matches its geometry")
    }
}

fn stage_name(i: usize) -> String {
    format!("vision.stage{i}")
}

pub fn init_params<T: Real>(cfg: &VisionConfig, rng: &mut ChaCha8Rng, p: &mut ParamStore<T>) {
    let mut init = Init { rng };
    let norm = |p: &mut ParamStore<T>, prefix: &str, c: usize| {
        p.insert(format!("{prefix}.g"), Tensor::ones(&[c]));
        p.insert(format!("{prefix}.b"), Tensor::zeros(&[c]));
    };
    p.insert("vision.stem.w", init.he_conv(cfg.stem_channels, cfg.in_channels, 3));
    norm(p, "vision.stem.gn", cfg.stem_channels);
    let mut prev = cfg.stem_channels;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let s = stage_name(i);
        p.insert(format!("{s}.conv1.w"), init.he_conv(c, prev, 3));
        norm(p, &format!("{s}.gn1"), c);
        p.insert(format!("{s}.conv2.w"), init.he_conv(c, c, 3));
        norm(p, &format!("{s}.gn2"), c);
        p.insert(format!("{s}.skip.w"), init.he_conv(c, prev, 1));
        norm(p, &format!("{s}.skip.gn"), c);
        prev = c;
    }
    p.insert("vision.head.w", init.xavier(prev, cfg.embed_dim));
    p.insert("vision.head.b", Tensor::zeros(&[cfg.embed_dim]));
}

fn conv_norm<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    x: Var,
    prefix: &str,
    norm: &str,
    geo: Conv2dGeometry,
    groups: usize,
) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"), p.get(&format!("{prefix}.w"))?);
    let y = g.conv2d(x, w, None, geo)?;
    let gamma = g.param(&format!("{norm}.g"), p.get(&format!("{norm}.g"))?);
    let beta = g.param(&format!("{norm}.b"), p.get(&format!("{norm}.b"))?);
    Ok(g.group_norm(y, gamma, beta, groups, T::from_f64_lossy(NORM_EPS))?)
}

/// Packs images into a `[B, C, H, W]` constant.
pub fn image_batch<T: Real>(cfg: &VisionConfig, images: &[&ImageTensor]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Contract("empty image batch".into()));
    }
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(images.len() * cfg.in_channels * s * s);
    for img in images {
        if img.size != s {
            return Err(Error::Tensor(lvqa_tensor::TensorError::ShapeMismatch {
                op: "encode_image",
                lhs: vec![s, s],
                rhs: vec![img.size, img.size],
            }));
        }
        let img = img.with_channels(cfg.in_channels)?;
        data.extend(img.pixels.iter().map(|&v| T::from_f64_lossy(f64::from(v))));
    }
    Ok(Tensor::new(vec![images.len(), cfg.in_channels, s, s], data)?)
}

/// Encodes a batch of images to flattened grids stacked as `[B * N, E]`
/// rows, image `b` occupying rows `b * N .. (b + 1) * N`.
pub fn encode_batch<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &VisionConfig,
    images: &[&ImageTensor],
) -> Result<Var> {
    let x = g.constant(image_batch(cfg, images)?);
    let groups = cfg.norm_groups;
    let s3 = Conv2dGeometry::new(3, 1, 1);
    let s3_down = Conv2dGeometry::new(3, 2, 1);
    let s1_down = Conv2dGeometry::new(1, 2, 0);
    let mut h = conv_norm(g, p, x, "vision.stem", "vision.stem.gn", s3_down, groups)?;
    h = g.relu(h)?;
    for i in 0..cfg.stage_channels.len() {
        let s = stage_name(i);
        let mut y = conv_norm(g, p, h, &format!("{s}.conv1"), &format!("{s}.gn1"), s3_down, groups)?;
        y = g.relu(y)?;
        y = conv_norm(g, p, y, &format!("{s}.conv2"), &format!("{s}.gn2"), s3, groups)?;
        let skip = conv_norm(g, p, h, &format!("{s}.skip"), &format!("{s}.skip.gn"), s1_down, groups)?;
        let sum = g.add(y, skip)?;
        h = g.relu(sum)?;
    }
    let shape = g.shape(h).to_vec();
    let (batch, c, side) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(side * ENCODER_STRIDE, cfg.image_size);
    let n = side * side;
    let planes = g.reshape(h, &[batch, c, n])?;
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let one = g.slice_rows(planes, b, 1)?;
        let one = g.reshape(one, &[c, n])?;
        rows.push(g.transpose(one)?);
    }
    let flat = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let w = g.param("vision.head.w", p.get("vision.head.w")?);
    let b = g.param("vision.head.b", p.get("vision.head.b")?);
    Ok(g.linear(flat, w, Some(b))?)
}

/// Encodes one image outside any training graph.
pub fn encode_image<T: Real>(p: &ParamStore<T>, cfg: &VisionConfig, img: &ImageTensor) -> Result<FeatureGrid<T>> {
    let mut g = Graph::no_grad();
    let out = encode_batch(&mut g, p, cfg, &[img])?;
    Ok(FeatureGrid {
        side: cfg.grid_side(),
        width: cfg.embed_dim,
        values: g.value(out).data().to_vec(),
    })
}
