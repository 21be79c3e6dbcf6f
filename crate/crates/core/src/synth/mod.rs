//! Synthetic objects with spatially separate parts.
//!
//! Each of the `G` parts occupies a fixed axis-aligned rectangle aligned to
//! the patch lattice and is painted in one of `C` palette colors. With
//! probability `rho` all parts of an image share one color, otherwise every
//! part draws its own. Attributes are the one-hot color codes, `A = G*C`,
//! attribute `a` belonging to part `a / C`.

mod io;

pub use io::{read_dataset, write_dataset, MANIFEST};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::metrics::Keypoint;
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    Invalid(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("{file}: expected {expected} bytes, found {actual}")]
    Truncated { file: String, expected: usize, actual: usize },
    #[error("{file}: checksum mismatch")]
    Checksum { file: String },
}

/// Gray level of the background.
pub const BACKGROUND: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub groups: usize,
    pub colors: usize,
    pub rho: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Lattice the regions are aligned to.
    pub patch_size: usize,
    /// Background border around the regions, in patches.
    pub margin: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            groups: 4,
            colors: 6,
            rho: 0.5,
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            image_size: 32,
            patch_size: 4,
            margin: 1,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// A part's rectangle in patch-grid units, `[row0, row0+rows) x [col0, col0+cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row0 + self.rows).contains(&row) && (self.col0..self.col0 + self.cols).contains(&col)
    }

    pub fn center(&self) -> (usize, usize) {
        (self.row0 + self.rows / 2, self.col0 + self.cols / 2)
    }
}

impl DatasetSpec {
    pub fn attributes(&self) -> usize {
        self.groups * self.colors
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Invalid(m));
        if self.groups < 2 || self.colors < 2 {
            return bad(format!("need at least 2 parts and 2 colors, got {} and {}", self.groups, self.colors));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("patch {} does not tile image {}", self.patch_size, self.image_size));
        }
        if self.grid() > 255 {
            return bad("patch grid wider than 255".into());
        }
        self.regions().map(|_| ())
    }

    /// Column and row counts of the region layout.
    fn layout(&self) -> (usize, usize) {
        let cols = (1..).find(|c| c * c >= self.groups).unwrap_or(1);
        (self.groups.div_ceil(cols), cols)
    }

    /// Part rectangles: a near-square arrangement of equal cells inside the
    /// margin, each region filling its cell.
    pub fn regions(&self) -> Result<Vec<Region>, DatasetError> {
        let inner = self.grid().saturating_sub(2 * self.margin);
        let (rows, cols) = self.layout();
        let (h, w) = (inner / rows, inner / cols);
        if h == 0 || w == 0 {
            return Err(DatasetError::Invalid(format!(
                "{} regions do not fit a {}-patch grid with margin {}",
                self.groups,
                self.grid(),
                self.margin
            )));
        }
        Ok((0..self.groups)
            .map(|g| Region { row0: self.margin + (g / cols) * h, col0: self.margin + (g % cols) * w, rows: h, cols: w })
            .collect())
    }

    /// Ground-truth part of every attribute.
    pub fn group_of(&self) -> Vec<usize> {
        (0..self.attributes()).map(|a| a / self.colors).collect()
    }

    /// Attribute indices of every part.
    pub fn attribute_groups(&self) -> Vec<Vec<usize>> {
        (0..self.groups).map(|g| (g * self.colors..(g + 1) * self.colors).collect()).collect()
    }

    pub fn attribute_names(&self) -> Vec<String> {
        (0..self.attributes()).map(|a| format!("part{}_color{}", a / self.colors, a % self.colors)).collect()
    }

    /// `C` hues spaced evenly around the color wheel at saturation 0.8 and
    /// value 0.9, as RGB.
    pub fn palette(&self) -> Vec<[f64; 3]> {
        (0..self.colors).map(|c| hsv_to_rgb(c as f64 / self.colors as f64, 0.8, 0.9)).collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let sector = h * 6.0;
    let i = sector.floor();
    let f = sector - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3 x H x W]`.
    pub image: Tensor,
    /// Color index of every part.
    pub colors: Vec<usize>,
    /// One-hot color codes, `G*C` entries of 0 or 1.
    pub labels: Vec<f64>,
    /// Patch masks `M_g`, `grid*grid` cells each.
    pub masks: Vec<Vec<bool>>,
    /// One keypoint per part at its region center, in patch-grid units.
    pub keypoints: Vec<Keypoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Patch masks of the fixed regions.
pub fn region_masks(spec: &DatasetSpec, regions: &[Region]) -> Vec<Vec<bool>> {
    let grid = spec.grid();
    regions
        .iter()
        .map(|r| (0..grid * grid).map(|i| r.contains(i / grid, i % grid)).collect())
        .collect()
}

/// Builds one sample from its part colors, drawing pixel noise from `rng`.
pub fn render(spec: &DatasetSpec, regions: &[Region], colors: &[usize], rng: &mut Rng) -> Sample {
    let (s, p) = (spec.image_size, spec.patch_size);
    let palette = spec.palette();
    let mut data = vec![BACKGROUND; 3 * s * s];
    for (r, &c) in regions.iter().zip(colors) {
        for y in r.row0 * p..(r.row0 + r.rows) * p {
            for x in r.col0 * p..(r.col0 + r.cols) * p {
                for ch in 0..3 {
                    data[ch * s * s + y * s + x] = palette[c][ch];
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        data.iter_mut().for_each(|v| *v += spec.noise_std * rng.normal());
    }
    let mut labels = vec![0.0; spec.attributes()];
    for (g, &c) in colors.iter().enumerate() {
        labels[g * spec.colors + c] = 1.0;
    }
    let keypoints = regions
        .iter()
        .enumerate()
        .map(|(g, r)| {
            let (row, col) = r.center();
            Keypoint { row, col, group: g, visible: true }
        })
        .collect();
    Sample {
        image: Tensor::new(&[3, s, s], data).expect("image shape"),
        colors: colors.to_vec(),
        labels,
        masks: region_masks(spec, regions),
        keypoints,
    }
}

fn generate_split(spec: &DatasetSpec, regions: &[Region], split: Split, n: usize) -> Vec<Sample> {
    let mut rng = Rng::new(spec.seed, 100 + split as u64);
    (0..n)
        .map(|_| {
            let colors: Vec<usize> = if rng.bernoulli(spec.rho) {
                vec![rng.below(spec.colors); spec.groups]
            } else {
                (0..spec.groups).map(|_| rng.below(spec.colors)).collect()
            };
            render(spec, regions, &colors, &mut rng)
        })
        .collect()
}

/// Deterministic dataset for `spec`; every split has its own random stream.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let regions = spec.regions()?;
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, &regions, Split::Train, spec.n_train),
        val: generate_split(spec, &regions, Split::Val, spec.n_val),
        test: generate_split(spec, &regions, Split::Test, spec.n_test),
    })
}
