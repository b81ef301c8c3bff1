//! Dense local features: grid pyramids of expanded patches, each encoded by a
//! small convolutional backbone into one C-dimensional vector.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A square multi-channel image in CHW order with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height != width {
            return Err(Error::Contract(format!("images must be square, got {height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::dim("image", &[channels, height, width], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        ImageTensor {
            channels,
            height: side,
            width: side,
            data: vec![0.0; channels * side * side],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub(crate) fn set_pixel(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn hflip(&self) -> ImageTensor {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set_pixel(c, y, x, self.pixel(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Bilinearly resamples the region `[y0, y1) × [x0, x1)` onto a
    /// `side × side` grid using half-pixel centres. A region already of the
    /// target size is copied exactly.
    pub fn crop_resize(&self, region: PatchRegion, side: usize) -> ImageTensor {
        let (rh, rw) = (region.y1 - region.y0, region.x1 - region.x0);
        let mut out = ImageTensor::zeros(self.channels, side);
        let sy = rh as f64 / side as f64;
        let sx = rw as f64 / side as f64;
        let taps = |o: usize, scale: f64, len: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        for y in 0..side {
            let (y0, y1, wy) = taps(y, sy, rh);
            for x in 0..side {
                let (x0, x1, wx) = taps(x, sx, rw);
                for c in 0..self.channels {
                    let p = |yy: usize, xx: usize| self.pixel(c, region.y0 + yy, region.x0 + xx);
                    let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                    let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                    out.set_pixel(c, y, x, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn resize(&self, side: usize) -> ImageTensor {
        if side == self.height {
            return self.clone();
        }
        let full = PatchRegion {
            y0: 0,
            y1: self.height,
            x0: 0,
            x1: self.width,
        };
        self.crop_resize(full, side)
    }
}

/// Grid pyramid: one `g × g` partition per entry, each cell grown about its
/// centre by `expansion` and clamped to the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    grids: Vec<usize>,
    expansion: f64,
}

impl GridSpec {
    pub fn new(grids: Vec<usize>, expansion: f64) -> Result<Self> {
        if grids.is_empty() || grids.contains(&0) {
            return Err(Error::Config(format!("grid sizes must be >= 1, got {grids:?}")));
        }
        if !(expansion >= 1.0) || !expansion.is_finite() {
            return Err(Error::Config(format!("expansion factor must be >= 1, got {expansion}")));
        }
        Ok(GridSpec { grids, expansion })
    }

    /// `{2×2, 3×3}` with cells doubled in area, giving 13 patches.
    pub fn pyramid_default() -> Self {
        GridSpec {
            grids: vec![2, 3],
            expansion: 2.0,
        }
    }

    /// Parses `"4x4+2x2"` (or `×`), with the given expansion.
    pub fn parse(s: &str, expansion: f64) -> Result<Self> {
        let mut grids = Vec::new();
        for part in s.split('+') {
            let part = part.trim().replace('×', "x");
            let (a, b) = part
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("bad grid `{part}`, expected e.g. 3x3")))?;
            let (a, b): (usize, usize) = match (a.trim().parse(), b.trim().parse()) {
                (Ok(a), Ok(b)) => (a, b),
                _ => return Err(Error::Config(format!("bad grid `{part}`"))),
            };
            if a != b {
                return Err(Error::Config(format!("grids must be square, got {part}")));
            }
            grids.push(a);
        }
        GridSpec::new(grids, expansion)
    }

    /// The seven grid layouts of the grid-size study, in table order.
    pub fn study_layouts() -> [&'static str; 7] {
        ["5x5", "4x4", "3x3", "2x2", "4x4+3x3", "4x4+2x2", "3x3+2x2"]
    }

    pub fn grids(&self) -> &[usize] {
        &self.grids
    }

    pub fn expansion(&self) -> f64 {
        self.expansion
    }

    /// Total patch count `K = Σ g²`.
    pub fn patch_count(&self) -> usize {
        self.grids.iter().map(|g| g * g).sum()
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.grids.iter().map(|g| format!("{g}x{g}")).collect();
        write!(f, "{}", parts.join("+"))
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRegion {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// Cell boundaries at `round(i · side / g)`.
fn cell_edges(side: usize, g: usize) -> Vec<usize> {
    (0..=g)
        .map(|i| (i as f64 * side as f64 / g as f64).round() as usize)
        .collect()
}

fn expand(lo: usize, hi: usize, factor: f64, side: usize) -> (usize, usize) {
    let centre = (lo + hi) as f64 / 2.0;
    let half = (hi - lo) as f64 * factor / 2.0;
    let a = (centre - half).round().max(0.0) as usize;
    let b = ((centre + half).round() as usize).min(side);
    (a, b)
}

/// Pixel regions of every patch, grid by grid in declared order and
/// row-major within a grid.
pub fn patch_regions(side: usize, grid: &GridSpec) -> Result<Vec<PatchRegion>> {
    let mut out = Vec::with_capacity(grid.patch_count());
    for &g in &grid.grids {
        if g > side {
            return Err(Error::Config(format!("{g}x{g} grid exceeds image side {side}")));
        }
        let edges = cell_edges(side, g);
        for r in 0..g {
            let (y0, y1) = expand(edges[r], edges[r + 1], grid.expansion, side);
            for c in 0..g {
                let (x0, x1) = expand(edges[c], edges[c + 1], grid.expansion, side);
                out.push(PatchRegion { y0, y1, x0, x1 });
            }
        }
    }
    Ok(out)
}

/// Cuts `image` into its pyramid patches, each resized to `encoder_side`.
pub fn split_into_patches(
    image: &ImageTensor,
    grid: &GridSpec,
    encoder_side: usize,
) -> Result<Vec<ImageTensor>> {
    Ok(patch_regions(image.side(), grid)?
        .into_iter()
        .map(|r| image.crop_resize(r, encoder_side))
        .collect())
}

/// How an image becomes its K feature rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureLayout {
    /// Grid pyramid of patches, each encoded separately.
    Pyramid(GridSpec),
    /// One row: the whole image encoded at its native resolution.
    Global,
}

impl FeatureLayout {
    pub fn patch_count(&self) -> usize {
        match self {
            FeatureLayout::Pyramid(g) => g.patch_count(),
            FeatureLayout::Global => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of each conv block; the last is the embedding size C.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Side length every patch is resized to before encoding.
    pub encoder_side: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            widths: vec![64, 64, 64],
            kernel: 3,
            encoder_side: 16,
        }
    }
}

impl BackboneConfig {
    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("bad backbone widths {:?}", self.widths)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("backbone kernel must be odd".into()));
        }
        if self.encoder_side == 0 {
            return Err(Error::Config("encoder side must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[Cout, Cin, k, k]`
    pub weight: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
}

/// Conv → ReLU → 2×2 max-pool blocks followed by global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub blocks: Vec<ConvBlock>,
}

/// Backbone parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    blocks: Vec<(Var, Var)>,
}

impl BackboneVars {
    /// From `(weight, bias)` pairs in [`BackboneVars::all`] order.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if !vars.len().is_multiple_of(2) {
            return Err(Error::Contract(format!("odd number of backbone vars: {}", vars.len())));
        }
        Ok(BackboneVars {
            blocks: vars.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    pub fn all(&self) -> Vec<Var> {
        self.blocks.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

impl BackboneParams {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        let k = config.kernel;
        let mut blocks = Vec::with_capacity(config.widths.len());
        for &cout in &config.widths {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            blocks.push(ConvBlock {
                weight: Tensor::randn(&[cout, cin, k, k], std, rng),
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        Ok(BackboneParams { config, blocks })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &b.weight));
            out.push((format!("backbone.{i}.bias"), &b.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bias])
            .collect()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BackboneVars {
            blocks: self.blocks.iter().map(|b| (reg(&b.weight), reg(&b.bias))).collect(),
        }
    }
}

/// Encodes a `[B, Cin, S, S]` batch into `[B, C]` embeddings.
pub fn encode_batch(tape: &mut Tape, vars: &BackboneVars, batch: Var) -> Result<Var> {
    let mut h = batch;
    for &(w, b) in &vars.blocks {
        h = tape.conv2d(h, w, b)?;
        h = tape.relu(h);
        let s = tape.value(h).shape();
        if s[2] >= 2 && s[3] >= 2 {
            h = tape.max_pool2(h)?;
        }
    }
    tape.global_avg_pool(h)
}

/// Packs equally sized images into one `[B, C, S, S]` tensor.
pub fn images_to_batch(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (c, s) = (first.channels(), first.side());
    let mut data = Vec::with_capacity(images.len() * c * s * s);
    for im in images {
        if im.channels() != c || im.side() != s {
            return Err(Error::dim("images_to_batch", &[c, s, s], &[im.channels(), im.side()]));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(vec![images.len(), c, s, s], data)
}

/// Encodes one patch already resized to the encoder side.
pub fn encode_patch(patch: &ImageTensor, params: &BackboneParams) -> Result<Tensor> {
    if patch.channels() != params.config.in_channels {
        return Err(Error::Config(format!(
            "patch has {} channels, backbone expects {}",
            patch.channels(),
            params.config.in_channels
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(images_to_batch(&[patch])?);
    let out = encode_batch(&mut tape, &vars, x)?;
    let c = params.embedding_dim();
    tape.value(out).clone().reshape(&[c])
}

/// Stacks the K feature rows of every image, image by image, onto the tape:
/// the result is `[images.len() · K, C]`.
pub fn dense_features_on_tape(
    tape: &mut Tape,
    vars: &BackboneVars,
    config: &BackboneConfig,
    images: &[&ImageTensor],
    layout: &FeatureLayout,
) -> Result<Var> {
    if let Some(im) = images.iter().find(|im| im.channels() != config.in_channels) {
        return Err(Error::Config(format!(
            "image has {} channels, backbone expects {}",
            im.channels(),
            config.in_channels
        )));
    }
    let batch = match layout {
        FeatureLayout::Global => images_to_batch(images)?,
        FeatureLayout::Pyramid(grid) => {
            let mut patches = Vec::with_capacity(images.len() * grid.patch_count());
            for im in images {
                patches.extend(split_into_patches(im, grid, config.encoder_side)?);
            }
            let refs: Vec<&ImageTensor> = patches.iter().collect();
            images_to_batch(&refs)?
        }
    };
    // Centre pixels around zero before the first convolution.
    let centred = batch.data().iter().map(|v| v - 0.5).collect();
    let x = tape.constant(Tensor::new(batch.shape().to_vec(), centred)?);
    encode_batch(tape, vars, x)
}

/// Per-image `K × C` matrix of patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap {
    pub features: Tensor,
    pub layout: FeatureLayout,
}

impl DenseFeatureMap {
    pub fn patch_count(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

pub fn extract_dense_features(
    image: &ImageTensor,
    layout: &FeatureLayout,
    params: &BackboneParams,
) -> Result<DenseFeatureMap> {
    let mut maps = extract_dense_features_batch(&[image], layout, params)?;
    Ok(maps.remove(0))
}

/// Encodes several images in one batch; identical to encoding them one at a
/// time.
pub fn extract_dense_features_batch(
    images: &[&ImageTensor],
    layout: &FeatureLayout,
    params: &BackboneParams,
) -> Result<Vec<DenseFeatureMap>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let out = dense_features_on_tape(&mut tape, &vars, &params.config, images, layout)?;
    let all = tape.value(out);
    let k = layout.patch_count();
    let maps = (0..images.len())
        .map(|i| DenseFeatureMap {
            features: all.slice_rows(i * k, k),
            layout: layout.clone(),
        })
        .collect();
    Ok(maps)
}

/// All `M·K` patch rows of one support class, shot by shot. Never averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRepresentation {
    pub class: usize,
    pub features: Tensor,
}

impl ClassRepresentation {
    pub fn rows(&self) -> usize {
        self.features.rows()
    }
}

pub fn build_class_representation(
    class: usize,
    shots: &[DenseFeatureMap],
) -> Result<ClassRepresentation> {
    let first = shots
        .first()
        .ok_or_else(|| Error::Contract("class representation needs at least one shot".into()))?;
    let (k, c) = (first.patch_count(), first.dim());
    for s in shots {
        if s.patch_count() != k || s.dim() != c {
            return Err(Error::Contract(format!(
                "inconsistent shot features: {:?} vs {:?}",
                s.features.shape(),
                first.features.shape()
            )));
        }
    }
    let parts: Vec<&Tensor> = shots.iter().map(|s| &s.features).collect();
    Ok(ClassRepresentation {
        class,
        features: Tensor::vstack(&parts)?,
    })
}
