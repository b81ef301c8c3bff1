// Localized-glyph benchmark: the label is carried by one small glyph at a
// random cell; the rest of the image is noise plus clutter glyphs drawn from
// the same generator, so a pooled whole-image vector mixes signal with clutter.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{ClassImages, Dataset, Split, SplitKind};
use crate::backbone::ImageTensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub side: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub images_per_class: usize,
    /// Glyphs are placed on a `layout_cells × layout_cells` lattice; one
    /// glyph fills one cell.
    pub layout_cells: usize,
    /// Each glyph is a `glyph_blocks × glyph_blocks` mosaic of flat colours.
    pub glyph_blocks: usize,
    /// Opacity of the class glyph. 0 removes the label signal.
    pub glyph_intensity: f64,
    /// Opacity of the clutter glyphs. 0 leaves pure noise around the glyph.
    pub distractor_intensity: f64,
    pub distractors_per_image: usize,
    /// Per-pixel Gaussian noise added over everything.
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            side: 32,
            train_classes: 20,
            val_classes: 5,
            test_classes: 10,
            images_per_class: 30,
            layout_cells: 4,
            glyph_blocks: 4,
            glyph_intensity: 1.0,
            distractor_intensity: 1.0,
            distractors_per_image: 3,
            noise_std: 0.08,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layout_cells < 2 {
            return bad(format!(
                "layout_cells must be at least 2 so a glyph covers at most a quarter of the image, got {}",
                self.layout_cells
            ));
        }
        if self.side == 0 || !self.side.is_multiple_of(self.layout_cells) {
            return bad(format!(
                "side {} must be a positive multiple of layout_cells {}",
                self.side, self.layout_cells
            ));
        }
        let cell = self.side / self.layout_cells;
        if self.glyph_blocks == 0 || !cell.is_multiple_of(self.glyph_blocks) {
            return bad(format!("cell size {cell} is not divisible into {} blocks", self.glyph_blocks));
        }
        if self.images_per_class == 0 {
            return bad("images_per_class must be positive".into());
        }
        if self.distractors_per_image + 1 > self.layout_cells * self.layout_cells {
            return bad(format!(
                "{} clutter glyphs do not fit beside the class glyph",
                self.distractors_per_image
            ));
        }
        for (name, v) in [
            ("glyph_intensity", self.glyph_intensity),
            ("distractor_intensity", self.distractor_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }

    pub fn class_count(&self, kind: SplitKind) -> usize {
        match kind {
            SplitKind::Train => self.train_classes,
            SplitKind::Val => self.val_classes,
            SplitKind::Test => self.test_classes,
        }
    }
}

/// Flat-colour mosaic, row-major blocks of RGB.
struct Glyph {
    blocks: usize,
    colors: Vec<[f64; 3]>,
}

impl Glyph {
    fn random<R: Rng>(blocks: usize, rng: &mut R) -> Self {
        let colors = (0..blocks * blocks)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        Glyph { blocks, colors }
    }

    fn paint(&self, canvas: &mut [f64], side: usize, cell: usize, at: usize, alpha: f64, cells: usize) {
        if alpha == 0.0 {
            return;
        }
        let (cy, cx) = ((at / cells) * cell, (at % cells) * cell);
        let block = cell / self.blocks;
        for y in 0..cell {
            for x in 0..cell {
                let color = self.colors[(y / block) * self.blocks + x / block];
                for (c, &v) in color.iter().enumerate() {
                    let p = &mut canvas[(c * side + cy + y) * side + cx + x];
                    *p = (1.0 - alpha) * *p + alpha * v;
                }
            }
        }
    }
}

/// Generates all three splits from one seeded stream, split by split.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let side = spec.side;
    let cells = spec.layout_cells;
    let cell = side / cells;
    let mut dataset = Dataset::default();
    for kind in SplitKind::ALL {
        let mut classes = Vec::with_capacity(spec.class_count(kind));
        for class in 0..spec.class_count(kind) {
            let glyph = Glyph::random(spec.glyph_blocks, &mut rng);
            let mut images = Vec::with_capacity(spec.images_per_class);
            for _ in 0..spec.images_per_class {
                let mut canvas = vec![0.5; 3 * side * side];
                let slots = sample(&mut rng, cells * cells, spec.distractors_per_image + 1);
                glyph.paint(&mut canvas, side, cell, slots.index(0), spec.glyph_intensity, cells);
                for s in slots.iter().skip(1) {
                    Glyph::random(spec.glyph_blocks, &mut rng).paint(
                        &mut canvas,
                        side,
                        cell,
                        s,
                        spec.distractor_intensity,
                        cells,
                    );
                }
                if spec.noise_std > 0.0 {
                    for p in canvas.iter_mut() {
                        *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
                images.push(ImageTensor::new(3, side, side, canvas)?);
            }
            classes.push(ClassImages {
                name: format!("{}_{class:03}", kind.dir_name()),
                images,
            });
        }
        let split = Split { classes };
        match kind {
            SplitKind::Train => dataset.train = split,
            SplitKind::Val => dataset.val = split,
            SplitKind::Test => dataset.test = split,
        }
    }
    dataset.validate()?;
    Ok(dataset)
}
