use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ppm::{read_ppm, write_ppm};
use crate::backbone::ImageTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassImages {
    pub name: String,
    pub images: Vec<ImageTensor>,
}

/// Classes of one split, in a fixed order; a class id is its index here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub classes: Vec<ClassImages>,
}

/// Address of one image inside a split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageRef {
    pub class: usize,
    pub index: usize,
}

impl Split {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn image(&self, r: ImageRef) -> &ImageTensor {
        &self.classes[r.class].images[r.index]
    }

    /// Every image reference in class order.
    pub fn refs(&self) -> Vec<ImageRef> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(class, c)| (0..c.images.len()).map(move |index| ImageRef { class, index }))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn image_count(&self) -> usize {
        SplitKind::ALL.iter().map(|&k| self.split(k).image_count()).sum()
    }

    /// Checks that class names are unique across all splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for kind in SplitKind::ALL {
            for c in &self.split(kind).classes {
                if !seen.insert(c.name.as_str()) {
                    return Err(Error::Dataset(format!(
                        "class `{}` appears in more than one split",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn center_square(h: usize, w: usize, data: Vec<f64>, path: &Path) -> Result<ImageTensor> {
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let mut square = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for y in y0..y0 + side {
            let row = (c * h + y) * w;
            square.extend_from_slice(&data[row + x0..row + x0 + side]);
        }
    }
    ImageTensor::new(3, side, side, square).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads `root/{train,val,test}/<class>/*.ppm`. Non-square images are
/// centre-cropped, then everything is resized to `side`.
pub fn load_dataset(root: &Path, side: usize) -> Result<Dataset> {
    let mut dataset = Dataset::default();
    for kind in SplitKind::ALL {
        let dir = root.join(kind.dir_name());
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing split directory {}", dir.display())));
        }
        let mut classes = Vec::new();
        for class_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let name = class_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut images = Vec::new();
            for file in sorted_entries(&class_dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("ppm") {
                    continue;
                }
                let (h, w, data) = read_ppm(&file)?;
                let im = center_square(h, w, data, &file)?;
                images.push(if im.side() == side { im } else { im.resize(side) });
            }
            if images.is_empty() {
                return Err(Error::Dataset(format!(
                    "class directory {} has no images",
                    class_dir.display()
                )));
            }
            classes.push(ClassImages { name, images });
        }
        match kind {
            SplitKind::Train => dataset.train.classes = classes,
            SplitKind::Val => dataset.val.classes = classes,
            SplitKind::Test => dataset.test.classes = classes,
        }
    }
    dataset.validate()?;
    Ok(dataset)
}

/// Writes the dataset as 8-bit PPM files in the layout `load_dataset` reads.
pub fn export_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    for kind in SplitKind::ALL {
        for class in &dataset.split(kind).classes {
            let dir = root.join(kind.dir_name()).join(&class.name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, im) in class.images.iter().enumerate() {
                write_ppm(&dir.join(format!("{i:04}.ppm")), im)?;
            }
        }
    }
    Ok(())
}
