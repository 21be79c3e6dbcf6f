use std::fs;

use partleak::synth::{generate, read_dataset, write_dataset, DatasetSpec, Split, BACKGROUND, MANIFEST};
use partleak::Error;

fn small(rho: f64, seed: u64) -> DatasetSpec {
    DatasetSpec { rho, n_train: 10, n_val: 3, n_test: 4, seed, ..Default::default() }
}

#[test]
fn regions_are_disjoint_and_keypoints_inside() {
    for groups in 2..=6 {
        let spec = DatasetSpec { groups, n_train: 5, n_val: 0, n_test: 0, ..Default::default() };
        let ds = generate(&spec).unwrap();
        for s in &ds.train {
            let cells = spec.grid() * spec.grid();
            for i in 0..cells {
                assert!(s.masks.iter().filter(|m| m[i]).count() <= 1);
            }
            for kp in &s.keypoints {
                assert!(s.masks[kp.group][kp.row * spec.grid() + kp.col]);
            }
            for g in 0..groups {
                let block = &s.labels[g * spec.colors..(g + 1) * spec.colors];
                assert_eq!(block.iter().sum::<f64>(), 1.0);
                assert_eq!(block[s.colors[g]], 1.0);
            }
        }
    }
}

#[test]
fn default_layout_is_four_quadrants_inside_a_margin() {
    let spec = DatasetSpec::default();
    let r = spec.regions().unwrap();
    assert_eq!(r.len(), 4);
    assert_eq!((r[0].row0, r[0].col0, r[0].rows, r[0].cols), (1, 1, 3, 3));
    assert_eq!((r[3].row0, r[3].col0), (4, 4));
    assert!(DatasetSpec { groups: 1, ..Default::default() }.validate().is_err());
    assert!(DatasetSpec { colors: 1, ..Default::default() }.validate().is_err());
    assert!(DatasetSpec { rho: 1.5, ..Default::default() }.validate().is_err());
    assert!(DatasetSpec { groups: 40, ..Default::default() }.validate().is_err());
    assert!(DatasetSpec { image_size: 30, ..Default::default() }.validate().is_err());
}

#[test]
fn full_correlation_shares_colors() {
    let ds = generate(&DatasetSpec { rho: 1.0, n_train: 200, ..small(1.0, 3) }).unwrap();
    for s in &ds.train {
        assert!(s.colors.iter().all(|&c| c == s.colors[0]));
    }
}

#[test]
fn noiseless_regions_equal_the_palette() {
    let spec = DatasetSpec { noise_std: 0.0, ..small(0.3, 1) };
    let ds = generate(&spec).unwrap();
    let palette = spec.palette();
    let (s, p) = (spec.image_size, spec.patch_size);
    for sample in &ds.train {
        for (g, r) in spec.regions().unwrap().iter().enumerate() {
            for y in r.row0 * p..(r.row0 + r.rows) * p {
                for x in r.col0 * p..(r.col0 + r.cols) * p {
                    for ch in 0..3 {
                        assert_eq!(sample.image.data()[ch * s * s + y * s + x], palette[sample.colors[g]][ch]);
                    }
                }
            }
        }
        assert_eq!(sample.image.data()[0], BACKGROUND);
    }
}

/// Empirical mutual information (nats) between two parts' color indices.
fn mutual_information(a: &[usize], b: &[usize], c: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![vec![0.0; c]; c];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1.0 / n;
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..c).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..c {
        for j in 0..c {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

fn correlation(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<usize>() as f64 / n, b.iter().sum::<usize>() as f64 / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    cov / (va * vb).sqrt()
}

#[test]
fn color_dependence_follows_rho() {
    let spec = DatasetSpec { image_size: 8, patch_size: 2, margin: 0, n_train: 10_000, n_val: 0, n_test: 0, ..small(0.0, 5) };
    let ds = generate(&spec).unwrap();
    let a: Vec<usize> = ds.train.iter().map(|s| s.colors[0]).collect();
    let b: Vec<usize> = ds.train.iter().map(|s| s.colors[1]).collect();
    assert!(correlation(&a, &b).abs() < 0.05);
    // plug-in MI bias is about (C-1)^2 / (2n)
    assert!(mutual_information(&a, &b, spec.colors) < 0.01);

    let ds = generate(&DatasetSpec { rho: 1.0, n_train: 5000, ..spec.clone() }).unwrap();
    let a: Vec<usize> = ds.train.iter().map(|s| s.colors[0]).collect();
    let b: Vec<usize> = ds.train.iter().map(|s| s.colors[1]).collect();
    let mi = mutual_information(&a, &b, spec.colors);
    assert!((mi - (spec.colors as f64).ln()).abs() < 0.01, "{mi}");
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    assert_eq!(generate(&small(0.5, 2)).unwrap(), generate(&small(0.5, 2)).unwrap());
    assert_ne!(generate(&small(0.5, 2)).unwrap().train, generate(&small(0.5, 3)).unwrap().train);
    let ds = generate(&small(0.5, 2)).unwrap();
    assert_ne!(ds.split(Split::Train)[0], ds.split(Split::Val)[0]);
}

#[test]
fn round_trip_is_bit_exact_and_writes_are_identical() {
    let ds = generate(&small(0.5, 4)).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&ds, a.path()).unwrap();
    write_dataset(&ds, b.path()).unwrap();
    assert_eq!(read_dataset(a.path()).unwrap(), ds);
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 1);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn tampering_is_detected() {
    let ds = generate(&small(0.5, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();

    let wrong_shape = manifest.replacen("\"n_train\": 10", "\"n_train\": 11", 1);
    assert_ne!(wrong_shape, manifest);
    fs::write(dir.path().join(MANIFEST), &wrong_shape).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset(_))));

    fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset(_))));
    fs::write(dir.path().join(MANIFEST), &manifest).unwrap();

    let labels = dir.path().join("train_labels.u8");
    let mut bytes = fs::read(&labels).unwrap();
    bytes.pop();
    fs::write(&labels, &bytes).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset(_))));

    let images = dir.path().join("test_images.f64");
    write_dataset(&ds, dir.path()).unwrap();
    let mut bytes = fs::read(&images).unwrap();
    bytes[10] ^= 1;
    fs::write(&images, &bytes).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset(_))));
}
