use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{region_masks, Dataset, DatasetError, DatasetSpec, Region, Sample, Split};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::metrics::Keypoint;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F64,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    file: String,
    dtype: Dtype,
    shape: Vec<usize>,
    crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    spec: DatasetSpec,
    attribute_names: Vec<String>,
    group_of: Vec<usize>,
    palette: Vec<[f64; 3]>,
    regions: Vec<Region>,
    arrays: BTreeMap<String, ArrayEntry>,
}

/// Array name, dtype, shape and row-major bytes of every array of a split.
fn split_arrays(spec: &DatasetSpec, split: Split, samples: &[Sample]) -> Vec<(String, Dtype, Vec<usize>, Vec<u8>)> {
    let (n, g, s, cells) = (samples.len(), spec.groups, spec.image_size, spec.grid() * spec.grid());
    let images = samples.iter().flat_map(|x| x.image.data()).flat_map(|v| v.to_le_bytes()).collect();
    let labels = samples.iter().flat_map(|x| &x.labels).map(|&v| v as u8).collect();
    let colors = samples.iter().flat_map(|x| &x.colors).map(|&c| c as u8).collect();
    let masks = samples.iter().flat_map(|x| x.masks.iter().flatten()).map(|&m| m as u8).collect();
    let keypoints = samples
        .iter()
        .flat_map(|x| &x.keypoints)
        .flat_map(|k| [k.row as u8, k.col as u8, k.group as u8, k.visible as u8])
        .collect();
    let name = |a: &str| format!("{}_{a}", split.name());
    vec![
        (name("images"), Dtype::F64, vec![n, 3, s, s], images),
        (name("labels"), Dtype::U8, vec![n, spec.attributes()], labels),
        (name("colors"), Dtype::U8, vec![n, g], colors),
        (name("masks"), Dtype::U8, vec![n, g, cells], masks),
        (name("keypoints"), Dtype::U8, vec![n, g, 4], keypoints),
    ]
}

/// Writes `ds` as `manifest.json` plus one raw little-endian file per array.
/// Repeated writes of the same dataset are byte-identical.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays = BTreeMap::new();
    for split in Split::ALL {
        for (name, dtype, shape, bytes) in split_arrays(&ds.spec, split, ds.split(split)) {
            let file = format!("{name}.{}", if dtype == Dtype::F64 { "f64" } else { "u8" });
            fs::write(dir.join(&file), &bytes)?;
            arrays.insert(name, ArrayEntry { file, dtype, shape, crc32: crc32fast::hash(&bytes) });
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        spec: ds.spec.clone(),
        attribute_names: ds.spec.attribute_names(),
        group_of: ds.spec.group_of(),
        palette: ds.spec.palette(),
        regions: ds.spec.regions()?,
        arrays,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn manifest_err(msg: String) -> crate::Error {
    DatasetError::Manifest(msg).into()
}

fn load_array(dir: &Path, manifest: &Manifest, name: &str, dtype: Dtype, shape: &[usize]) -> Result<Vec<u8>> {
    let entry = manifest.arrays.get(name).ok_or_else(|| manifest_err(format!("array `{name}` missing")))?;
    if entry.dtype != dtype || entry.shape != shape {
        return Err(manifest_err(format!(
            "array `{name}` declared {:?} {:?}, expected {dtype:?} {shape:?}",
            entry.dtype, entry.shape
        )));
    }
    let bytes = fs::read(dir.join(&entry.file))?;
    let expected = shape.iter().product::<usize>() * dtype.size();
    if bytes.len() != expected {
        return Err(DatasetError::Truncated { file: entry.file.clone(), expected, actual: bytes.len() }.into());
    }
    if crc32fast::hash(&bytes) != entry.crc32 {
        return Err(DatasetError::Checksum { file: entry.file.clone() }.into());
    }
    Ok(bytes)
}

fn read_split(dir: &Path, manifest: &Manifest, split: Split, n: usize) -> Result<Vec<Sample>> {
    let spec = &manifest.spec;
    let (g, c, s, cells) = (spec.groups, spec.colors, spec.image_size, spec.grid() * spec.grid());
    let name = |a: &str| format!("{}_{a}", split.name());
    let images = load_array(dir, manifest, &name("images"), Dtype::F64, &[n, 3, s, s])?;
    let labels = load_array(dir, manifest, &name("labels"), Dtype::U8, &[n, g * c])?;
    let colors = load_array(dir, manifest, &name("colors"), Dtype::U8, &[n, g])?;
    let masks = load_array(dir, manifest, &name("masks"), Dtype::U8, &[n, g, cells])?;
    let keypoints = load_array(dir, manifest, &name("keypoints"), Dtype::U8, &[n, g, 4])?;
    let pixels = 3 * s * s;
    (0..n)
        .map(|i| {
            let data = images[i * pixels * 8..(i + 1) * pixels * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let sample = Sample {
                image: Tensor::new(&[3, s, s], data)?,
                colors: colors[i * g..(i + 1) * g].iter().map(|&x| x as usize).collect(),
                labels: labels[i * g * c..(i + 1) * g * c].iter().map(|&x| f64::from(x)).collect(),
                masks: masks[i * g * cells..(i + 1) * g * cells].chunks(cells).map(|m| m.iter().map(|&x| x != 0).collect()).collect(),
                keypoints: keypoints[i * g * 4..(i + 1) * g * 4]
                    .chunks_exact(4)
                    .map(|k| Keypoint { row: k[0] as usize, col: k[1] as usize, group: k[2] as usize, visible: k[3] != 0 })
                    .collect(),
            };
            check_sample(spec, &sample).map_err(|m| manifest_err(format!("{} sample {i}: {m}", split.name())))?;
            Ok(sample)
        })
        .collect()
}

fn check_sample(spec: &DatasetSpec, s: &Sample) -> std::result::Result<(), String> {
    for (g, &c) in s.colors.iter().enumerate() {
        if c >= spec.colors {
            return Err(format!("color {c} of part {g} out of range"));
        }
        let block = &s.labels[g * spec.colors..(g + 1) * spec.colors];
        if block.iter().sum::<f64>() != 1.0 || block[c] != 1.0 {
            return Err(format!("labels of part {g} disagree with its color"));
        }
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], validating shapes, sizes
/// and checksums.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| manifest_err(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(manifest_err(format!("unsupported format {}", manifest.format)));
    }
    let spec = &manifest.spec;
    spec.validate()?;
    let regions = spec.regions()?;
    if manifest.regions != regions || manifest.group_of != spec.group_of() {
        return Err(manifest_err("layout does not match the dataset spec".into()));
    }
    let expected_masks = region_masks(spec, &regions);
    let mut ds = Dataset { spec: spec.clone(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for split in Split::ALL {
        let n = match split {
            Split::Train => spec.n_train,
            Split::Val => spec.n_val,
            Split::Test => spec.n_test,
        };
        let samples = read_split(dir, &manifest, split, n)?;
        if samples.iter().any(|s| s.masks != expected_masks) {
            return Err(manifest_err(format!("{} masks differ from the region layout", split.name())));
        }
        *ds.split_mut(split) = samples;
    }
    Ok(ds)
}
