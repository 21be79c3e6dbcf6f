use partleak::autodiff::{Tape, Tensor};
use partleak::metrics::{
    adjusted_rand_index, average_precision, contingency, extract_early, extract_late, late_pool, mean_ap, mppo,
    nmi_ari, normalized_mutual_information, part_specificity, patch_labels, probe_matrix, train_probe, KStar,
    Keypoint, MetricError, PartAssignment, ProbeConfig,
};
use partleak::partmodel::{init_stage2, stage2_forward};
use partleak::rng::Rng;
use partleak::vit::{init_params, MaskVariant, ViTConfig};
use proptest::prelude::*;

mod common;
use common::metric_oracles::*;

// ---------- AP ----------

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.6], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    let rev = average_precision(&[0.9, 0.8, 0.7, 0.6], &[0.0, 0.0, 1.0, 1.0]).unwrap();
    assert!((rev - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    assert!((rev - 0.416_666_666_666_666_7).abs() < 1e-15);
    // ties keep input order
    assert_eq!(average_precision(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.5);
    assert_eq!(average_precision(&[0.5, 0.5], &[0.0, 0.0]), Err(MetricError::NoPositives));
}

#[test]
fn ap_matches_rank_oracle_on_random_instances() {
    let mut rng = Rng::new(1, 0);
    for trial in 0..300 {
        let n = 1 + rng.below(25);
        // coarse scores so that ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.below(6) as f64 / 5.0).collect();
        let labels: Vec<f64> = (0..n).map(|_| rng.below(2) as f64).collect();
        match ap_oracle(&scores, &labels) {
            Some(want) => {
                let got = average_precision(&scores, &labels).unwrap();
                assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
            }
            None => assert_eq!(average_precision(&scores, &labels), Err(MetricError::NoPositives)),
        }
    }
}

#[test]
fn mean_ap_skips_attributes_without_positives() {
    let scores = vec![vec![0.9, 0.1, 0.3], vec![0.2, 0.4, 0.8]];
    let labels = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
    assert_eq!(mean_ap(&scores, &labels, &[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(mean_ap(&scores, &labels, &[1]), Err(MetricError::NoPositives));
    let mut rng = Rng::new(2, 0);
    for _ in 0..100 {
        let (n, a) = (2 + rng.below(10), 1 + rng.below(5));
        let s: Vec<Vec<f64>> = (0..n).map(|_| (0..a).map(|_| rng.normal()).collect()).collect();
        let l: Vec<Vec<f64>> = (0..n).map(|_| (0..a).map(|_| rng.below(2) as f64).collect()).collect();
        let attrs: Vec<usize> = (0..a).collect();
        let aps: Vec<f64> = attrs
            .iter()
            .filter_map(|&j| ap_oracle(&s.iter().map(|r| r[j]).collect::<Vec<_>>(), &l.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect();
        match mean_ap(&s, &l, &attrs) {
            Ok(m) => assert!((m - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-10),
            Err(e) => {
                assert_eq!(e, MetricError::NoPositives);
                assert!(aps.is_empty());
            }
        }
    }
}

// ---------- PS ----------

#[test]
fn ps_worked_example() {
    // rows are discovered parts k, columns ground-truth parts g
    let m = vec![vec![0.9, 0.2], vec![0.3, 0.8], vec![0.5, 0.6]];
    let asg = PartAssignment { c: vec![vec![0.0; 3]; 2], tau: 0.25, k_plus: vec![vec![0], vec![1, 2]], k_minus: vec![vec![1, 2], vec![0]] };
    let r = part_specificity(&m, &asg).unwrap();
    assert!((r.per_group[0] - 0.5).abs() < 1e-15);
    assert!((r.per_group[1] - 0.5).abs() < 1e-15);
    assert!((r.ps - 0.5).abs() < 1e-15);
}

#[test]
fn ps_constant_matrix_and_errors() {
    let m = vec![vec![0.4; 2]; 3];
    let asg = PartAssignment::from_matrix(vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.1]], 0.25);
    assert_eq!(asg.k_plus, vec![vec![0, 2], vec![1]]);
    assert_eq!(asg.k_minus, vec![vec![1], vec![0, 2]]);
    assert_eq!(part_specificity(&m, &asg).unwrap().ps, 0.0);
    let all = PartAssignment::from_matrix(vec![vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 0.0]], 0.25);
    assert_eq!(part_specificity(&m, &all), Err(MetricError::EmptyAssignment { group: 0, which: "K-" }));
    let none = PartAssignment::from_matrix(vec![vec![0.0, 1.0, 0.0], vec![0.0; 3]], 0.25);
    assert_eq!(part_specificity(&m, &none), Err(MetricError::EmptyAssignment { group: 1, which: "K+" }));
}

fn random_assignment(rng: &mut Rng, k: usize, g: usize) -> PartAssignment {
    loop {
        let c: Vec<Vec<f64>> = (0..g).map(|_| (0..k).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
        let asg = PartAssignment::from_matrix(c, 0.5);
        if asg.k_plus.iter().chain(&asg.k_minus).all(|s| !s.is_empty()) {
            return asg;
        }
    }
}

#[test]
fn ps_matches_oracle_on_random_instances() {
    let mut rng = Rng::new(3, 0);
    for _ in 0..200 {
        let (k, g) = (2 + rng.below(5), 1 + rng.below(4));
        let m: Vec<Vec<f64>> = (0..k).map(|_| (0..g).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
        let asg = random_assignment(&mut rng, k, g);
        let r = part_specificity(&m, &asg).unwrap();
        let (per, mean) = ps_oracle(&m, &asg.k_plus, &asg.k_minus);
        for (a, b) in r.per_group.iter().zip(&per) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((r.ps - mean).abs() < 1e-10);
        assert!((-1.0..=1.0).contains(&r.ps));
    }
}

// ---------- contingency ----------

fn random_keypoints(rng: &mut Rng, groups: usize, grid: usize) -> Vec<Keypoint> {
    let n = rng.below(2 * groups + 1);
    (0..n)
        .map(|_| Keypoint { row: rng.below(grid), col: rng.below(grid), group: rng.below(groups), visible: rng.bernoulli(0.8) })
        .collect()
}

#[test]
fn contingency_examples() {
    let grid = 2;
    // ground-truth regions: part 0 = top row, part 1 = bottom row
    let gt = vec![vec![true, true, false, false], vec![false, false, true, true]];
    let kps = vec![
        Keypoint { row: 0, col: 1, group: 0, visible: true },
        Keypoint { row: 1, col: 0, group: 1, visible: true },
    ];
    let asg = contingency(&vec![kps.clone(); 3], &vec![gt.clone(); 3], 2, grid, 0.25).unwrap();
    assert_eq!(asg.c, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(asg.k_plus, vec![vec![0], vec![1]]);
    // swapped discovered masks give the transposed permutation
    let swapped = vec![gt[1].clone(), gt[0].clone()];
    let asg = contingency(&[kps.clone()], &[swapped], 2, grid, 0.25).unwrap();
    assert_eq!(asg.c, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    // part 1 never visible
    let hidden = vec![kps[0], Keypoint { visible: false, ..kps[1] }];
    assert_eq!(contingency(&[hidden], &[gt], 2, grid, 0.25), Err(MetricError::NeverVisible { group: 1 }));
}

#[test]
fn contingency_matches_counting_oracle_exactly() {
    let mut rng = Rng::new(4, 0);
    let mut checked = 0;
    while checked < 150 {
        let (groups, parts, grid, n) = (1 + rng.below(4), 1 + rng.below(4), 2 + rng.below(3), 1 + rng.below(8));
        let kps: Vec<Vec<Keypoint>> = (0..n).map(|_| random_keypoints(&mut rng, groups, grid)).collect();
        let masks: Vec<Vec<Vec<bool>>> =
            (0..n).map(|_| (0..parts).map(|_| (0..grid * grid).map(|_| rng.bernoulli(0.4)).collect()).collect()).collect();
        let (num, den) = contingency_oracle(&kps, &masks, groups, grid);
        match contingency(&kps, &masks, groups, grid, 0.25) {
            Ok(asg) => {
                for g in 0..groups {
                    for k in 0..parts {
                        assert_eq!(asg.c[g][k], num[g][k] as f64 / den[g] as f64);
                        assert_eq!(asg.k_plus[g].contains(&k), asg.c[g][k] > 0.25);
                        assert_ne!(asg.k_plus[g].contains(&k), asg.k_minus[g].contains(&k));
                    }
                }
                checked += 1;
            }
            Err(MetricError::NeverVisible { group }) => assert_eq!(den[group], 0),
            Err(e) => panic!("{e}"),
        }
    }
}

// ---------- MPPO ----------

#[test]
fn mppo_hand_built_instance() {
    // 3 samples, 2 parts, 2 attributes on ground-truth parts 0 and 1; 1x3 lattice
    let gt = vec![vec![true, false, false], vec![false, false, true]];
    let disc = vec![vec![true, true, false], vec![false, false, true]];
    // logits[s][k][a]
    let logits = vec![
        vec![vec![2.0, 0.0], vec![1.0, 3.0]], // a0 -> part 0 (hit), a1 -> part 1 (hit)
        vec![vec![0.0, 5.0], vec![1.0, 3.0]], // a0 -> part 1 (miss), a1 -> part 0 (miss)
        vec![vec![1.0, 1.0], vec![0.5, 0.0]], // a0 -> part 0 (hit); a1 absent
    ];
    let labels = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]];
    let r = mppo(&logits, &labels, &vec![disc.clone(); 3], &vec![gt.clone(); 3], &[0, 1], KStar::PerSample).unwrap();
    assert_eq!(r.per_attribute, vec![Some(2.0 / 3.0), Some(0.5)]);
    assert!((r.mppo - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    // mean logits: a0 (1, 0.833) -> part 0 for all, a1 (2.5, 3) -> part 1 for all
    let m = mppo(&logits, &labels, &vec![disc; 3], &vec![gt; 3], &[0, 1], KStar::MeanLogit).unwrap();
    assert_eq!(m.per_attribute, vec![Some(1.0), Some(1.0)]);
}

#[test]
fn mppo_matches_exhaustive_oracle() {
    let mut rng = Rng::new(5, 0);
    for _ in 0..150 {
        let (s, k, a, g, cells) = (1 + rng.below(6), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(3), 1 + rng.below(6));
        let group_of: Vec<usize> = (0..a).map(|_| rng.below(g)).collect();
        let logits: Vec<Vec<Vec<f64>>> =
            (0..s).map(|_| (0..k).map(|_| (0..a).map(|_| rng.below(4) as f64).collect()).collect()).collect();
        let labels: Vec<Vec<f64>> = (0..s).map(|_| (0..a).map(|_| rng.below(2) as f64).collect()).collect();
        let mask = |rng: &mut Rng, n: usize| -> Vec<Vec<Vec<bool>>> {
            (0..s).map(|_| (0..n).map(|_| (0..cells).map(|_| rng.bernoulli(0.3)).collect()).collect()).collect()
        };
        let disc = mask(&mut rng, k);
        let gt = mask(&mut rng, g);
        let want = mppo_oracle(&logits, &labels, &disc, &gt, &group_of);
        match mppo(&logits, &labels, &disc, &gt, &group_of, KStar::PerSample) {
            Ok(r) => {
                for (got, w) in r.per_attribute.iter().zip(&want) {
                    assert_eq!(*got, w.map(|(h, n)| h as f64 / n as f64));
                }
                let vals: Vec<f64> = want.iter().flatten().map(|(h, n)| *h as f64 / *n as f64).collect();
                assert!((r.mppo - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12);
            }
            Err(MetricError::Degenerate(_)) => assert!(want.iter().all(Option::is_none)),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn mppo_saturates_with_whole_image_masks() {
    let mut rng = Rng::new(6, 0);
    let (s, k, a) = (5, 3, 4);
    let logits: Vec<Vec<Vec<f64>>> = (0..s).map(|_| (0..k).map(|_| (0..a).map(|_| rng.normal()).collect()).collect()).collect();
    let labels = vec![vec![1.0; a]; s];
    let gt: Vec<Vec<Vec<bool>>> = (0..s).map(|_| (0..2).map(|g| (0..4).map(|i| i % 2 == g).collect()).collect()).collect();
    let full = vec![vec![vec![true; 4]; k]; s];
    let r = mppo(&logits, &labels, &full, &gt, &[0, 1, 0, 1], KStar::PerSample).unwrap();
    assert_eq!(r.mppo, 1.0);
}

// ---------- NMI / ARI ----------

#[test]
fn clustering_examples() {
    let a = [0, 0, 1, 1, 2, 2];
    let r = nmi_ari(&a, &a).unwrap();
    assert!((r.nmi - 1.0).abs() < 1e-12 && (r.ari - 1.0).abs() < 1e-12);
    let permuted = [5, 5, 3, 3, 9, 9];
    let r = nmi_ari(&permuted, &a).unwrap();
    assert!((r.nmi - 1.0).abs() < 1e-12 && (r.ari - 1.0).abs() < 1e-12);
    assert!(matches!(nmi_ari(&[0, 0, 0], &[0, 1, 2]), Err(MetricError::Degenerate(_))));
    assert!(matches!(nmi_ari(&[0, 1, 2], &[1, 1, 1]), Err(MetricError::Degenerate(_))));
}

#[test]
fn clustering_matches_direct_formula_oracles() {
    let mut rng = Rng::new(7, 0);
    let mut checked = 0;
    while checked < 150 {
        let n = if checked == 0 { 20 } else { 4 + rng.below(30) };
        let a: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let distinct = |x: &[usize]| x.iter().collect::<std::collections::HashSet<_>>().len();
        if distinct(&a) < 2 || distinct(&b) < 2 {
            continue;
        }
        let nmi = normalized_mutual_information(&a, &b).unwrap();
        let ari = adjusted_rand_index(&a, &b).unwrap();
        assert!((nmi - nmi_oracle(&a, &b).clamp(0.0, 1.0)).abs() < 1e-10);
        assert!((ari - ari_oracle(&a, &b)).abs() < 1e-10);
        checked += 1;
    }
}

// ---------- invariances ----------

proptest! {
    #[test]
    fn ap_invariant_to_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 1..30),
        bits in prop::collection::vec(0u8..2, 30),
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let labels: Vec<f64> = scores.iter().zip(&bits).map(|(_, b)| f64::from(*b)).collect();
        prop_assume!(labels.iter().any(|&l| l == 1.0));
        let base = average_precision(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| scale * s + shift).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        // exact ties can only be created, not broken, by rounding; these maps are injective on the draws
        prop_assert!((average_precision(&affine, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((average_precision(&cubed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ps_is_antisymmetric_under_swapping_assignments(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed, 1);
        let (k, g) = (2 + rng.below(4), 1 + rng.below(4));
        let m: Vec<Vec<f64>> = (0..k).map(|_| (0..g).map(|_| rng.uniform(0.0, 1.0)).collect()).collect();
        let asg = random_assignment(&mut rng, k, g);
        let a = part_specificity(&m, &asg).unwrap();
        let b = part_specificity(&m, &asg.swapped()).unwrap();
        prop_assert!((a.ps + b.ps).abs() < 1e-12);
        for (x, y) in a.per_group.iter().zip(&b.per_group) {
            prop_assert!((x + y).abs() < 1e-12);
        }
    }

    #[test]
    fn mppo_invariant_to_per_sample_monotone_transforms(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed, 2);
        let (s, k, a) = (1 + rng.below(5), 1 + rng.below(4), 1 + rng.below(4));
        let group_of: Vec<usize> = (0..a).map(|_| rng.below(2)).collect();
        let logits: Vec<Vec<Vec<f64>>> = (0..s).map(|_| (0..k).map(|_| (0..a).map(|_| rng.normal()).collect()).collect()).collect();
        let labels: Vec<Vec<f64>> = (0..s).map(|_| (0..a).map(|_| rng.below(2) as f64).collect()).collect();
        prop_assume!(labels.iter().flatten().any(|&l| l == 1.0));
        let disc: Vec<Vec<Vec<bool>>> = (0..s).map(|_| (0..k).map(|_| (0..4).map(|_| rng.bernoulli(0.4)).collect()).collect()).collect();
        let gt: Vec<Vec<Vec<bool>>> = (0..s).map(|_| (0..2).map(|_| (0..4).map(|_| rng.bernoulli(0.4)).collect()).collect()).collect();
        let transformed: Vec<Vec<Vec<f64>>> = logits
            .iter()
            .map(|sample| {
                let (sc, sh) = (rng.uniform(0.1, 5.0), rng.normal());
                sample.iter().map(|row| row.iter().map(|x| (sc * x + sh).exp()).collect()).collect()
            })
            .collect();
        let a1 = mppo(&logits, &labels, &disc, &gt, &group_of, KStar::PerSample).unwrap();
        let a2 = mppo(&transformed, &labels, &disc, &gt, &group_of, KStar::PerSample).unwrap();
        prop_assert_eq!(a1, a2);
    }

    #[test]
    fn ps_invariant_when_probe_scores_change_monotonically(seed in 0u64..2_000) {
        // mAP entries depend on rankings only, so PS built from them is unchanged
        let mut rng = Rng::new(seed, 3);
        let (n, k, g, c) = (12, 3, 2, 2);
        let labels: Vec<Vec<f64>> = (0..n).map(|_| (0..g * c).map(|_| rng.below(2) as f64).collect()).collect();
        prop_assume!((0..g * c).all(|j| labels.iter().any(|r| r[j] == 1.0)));
        let groups: Vec<Vec<usize>> = (0..g).map(|x| (x * c..(x + 1) * c).collect()).collect();
        let scores: Vec<Vec<Vec<f64>>> = (0..k).map(|_| (0..n).map(|_| (0..g * c).map(|_| rng.normal()).collect()).collect()).collect();
        let matrix = |sc: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
            sc.iter().map(|s| groups.iter().map(|gr| mean_ap(s, &labels, gr).unwrap()).collect()).collect()
        };
        let transformed: Vec<Vec<Vec<f64>>> = scores.iter().map(|s| s.iter().map(|r| r.iter().map(|x| x.exp() * 3.0 - 1.0).collect()).collect()).collect();
        let asg = random_assignment(&mut rng, k, g);
        let a = part_specificity(&matrix(&scores), &asg).unwrap();
        let b = part_specificity(&matrix(&transformed), &asg).unwrap();
        prop_assert!((a.ps - b.ps).abs() < 1e-12);
    }

    #[test]
    fn nmi_ari_invariant_to_relabeling(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed, 4);
        let n = 6 + rng.below(20);
        let a: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        prop_assume!(nmi_ari(&a, &b).is_ok());
        let relabeled: Vec<usize> = a.iter().map(|x| 10 + (x * 7) % 4 * 3).collect();
        let r1 = nmi_ari(&a, &b).unwrap();
        let r2 = nmi_ari(&relabeled, &b).unwrap();
        prop_assert!((r1.nmi - r2.nmi).abs() < 1e-12 && (r1.ari - r2.ari).abs() < 1e-12);
    }
}

// ---------- probes ----------

#[test]
fn probe_learns_separable_data() {
    let mut rng = Rng::new(8, 0);
    let (n, d) = (200, 5);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|r| vec![f64::from(u8::from(r[0] > 0.0)), f64::from(u8::from(r[1] - r[2] > 0.5)), f64::from(u8::from(r[3] < -0.3))])
        .collect();
    let probe = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    let map = mean_ap(&probe.predict(&x), &y, &[0, 1, 2]).unwrap();
    assert!(map > 0.99, "train mAP {map}");
}

#[test]
fn probe_on_independent_labels_stays_near_prevalence() {
    let mut rng = Rng::new(9, 0);
    let (n, d) = (400, 4);
    let x: Vec<Vec<f64>> = (0..2 * n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let y: Vec<Vec<f64>> = (0..2 * n).map(|_| vec![f64::from(u8::from(rng.bernoulli(0.3)))]).collect();
    let probe = train_probe(&x[..n], &y[..n], &ProbeConfig::default()).unwrap();
    let held_out = mean_ap(&probe.predict(&x[n..]), &y[n..], &[0]).unwrap();
    let prevalence = y[n..].iter().filter(|r| r[0] == 1.0).count() as f64 / n as f64;
    assert!((held_out - prevalence).abs() < 0.1, "mAP {held_out} vs prevalence {prevalence}");
}

#[test]
fn probe_is_deterministic_and_rejects_degenerate_labels() {
    let mut rng = Rng::new(10, 0);
    let x: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    let y: Vec<Vec<f64>> = x.iter().map(|r| vec![f64::from(u8::from(r[0] > 0.0)), 1.0]).collect();
    let cfg = ProbeConfig { seed: 4, ..Default::default() };
    assert_eq!(train_probe(&x, &y, &cfg).unwrap(), train_probe(&x, &y, &cfg).unwrap());
    let constant: Vec<Vec<f64>> = x.iter().map(|_| vec![1.0, 0.0]).collect();
    assert!(matches!(train_probe(&x, &constant, &cfg), Err(MetricError::Degenerate(_))));
    // a constant feature dimension keeps unit scale
    let flat: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0], 2.0]).collect();
    let p = train_probe(&flat, &y, &cfg).unwrap();
    assert_eq!(p.std[1], 1.0);
    let m = probe_matrix(&[p.clone(), p], &[flat.clone(), flat], &y, &[vec![0]]).unwrap();
    assert_eq!(m.len(), 2);
    assert!(m.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

// ---------- extraction ----------

fn tiny_vit() -> ViTConfig {
    ViTConfig { image_size: 8, patch_size: 2, channels: 3, embed_dim: 8, depth: 2, heads: 2, num_registers: 1, mlp_ratio: 2 }
}

fn jittered_backbone(cfg: &ViTConfig, rng: &mut Rng) -> partleak::params::ParamStore {
    let mut p = init_params(cfg, rng).unwrap();
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
    }
    p
}

fn image(cfg: &ViTConfig, rng: &mut Rng) -> Tensor {
    let n = cfg.channels * cfg.image_size * cfg.image_size;
    Tensor::new(&[cfg.channels, cfg.image_size, cfg.image_size], (0..n).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn late_pool_examples_and_loop_oracle() {
    let mut rng = Rng::new(11, 0);
    let (hw, d) = (9, 4);
    let z = Tensor::new(&[hw, d], (0..hw * d).map(|_| rng.normal()).collect()).unwrap();
    let all = late_pool(&z, &[vec![true; hw]]).unwrap();
    for j in 0..d {
        let mean = (0..hw).map(|i| z.get2(i, j)).sum::<f64>() / hw as f64;
        assert!((all.v[0][j] - mean).abs() < 1e-12);
    }
    let mut single = vec![false; hw];
    single[4] = true;
    assert_eq!(late_pool(&z, &[single]).unwrap().v[0], z.row(4));
    let empty = late_pool(&z, &[vec![false; hw]]).unwrap();
    assert_eq!(empty.v[0], vec![0.0; d]);
    assert_eq!(empty.empty, vec![0]);
    for _ in 0..20 {
        let masks: Vec<Vec<bool>> = (0..3).map(|_| (0..hw).map(|_| rng.bernoulli(0.5)).collect()).collect();
        let got = late_pool(&z, &masks).unwrap();
        for (k, m) in masks.iter().enumerate() {
            let count = m.iter().filter(|&&b| b).count();
            for j in 0..d {
                let mut s = 0.0;
                for i in 0..hw {
                    if m[i] {
                        s += z.get2(i, j);
                    }
                }
                let want = if count == 0 { 0.0 } else { s / count as f64 };
                assert!((got.v[k][j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn late_extraction_uses_unmasked_features() {
    let cfg = tiny_vit();
    let mut rng = Rng::new(12, 0);
    let backbone = jittered_backbone(&cfg, &mut rng);
    let img = image(&cfg, &mut rng);
    let z = partleak::partmodel::frozen_features(&backbone, &cfg, &img).unwrap();
    let masks = vec![vec![true; cfg.num_patches()]];
    assert_eq!(extract_late(&backbone, &cfg, &img, &masks).unwrap(), late_pool(&z, &masks).unwrap());
}

#[test]
fn early_single_part_full_mask_equals_unmasked_cls() {
    let cfg = tiny_vit();
    let mut rng = Rng::new(13, 0);
    let backbone = jittered_backbone(&cfg, &mut rng);
    let img = image(&cfg, &mut rng);
    let early = extract_early(&backbone, &cfg, &img, &vec![0; cfg.num_patches()], 1).unwrap();
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, |_| false);
    let out = partleak::vit::vit_forward(
        &mut tape,
        &bound.root(),
        &cfg,
        &img,
        &partleak::vit::AttentionMask::full(cfg.prefix_per_group()),
    )
    .unwrap();
    let cls = out.cls(&mut tape, 0).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&early.v[0]), bits(tape.value(cls).data()));
}

#[test]
fn early_features_ignore_content_outside_the_mask() {
    let cfg = tiny_vit();
    let mut rng = Rng::new(14, 0);
    let backbone = jittered_backbone(&cfg, &mut rng);
    let (grid, p) = (cfg.grid(), cfg.patch_size);
    for _ in 0..10 {
        let parts = 2 + rng.below(2);
        let masks: Vec<Vec<bool>> = {
            let labels: Vec<usize> = (0..grid * grid).map(|_| rng.below(parts + 1)).collect();
            (0..parts).map(|k| labels.iter().map(|&l| l == k).collect()).collect()
        };
        let labels = patch_labels(&masks, grid * grid).unwrap();
        let img = image(&cfg, &mut rng);
        let base = extract_early(&backbone, &cfg, &img, &labels, parts).unwrap();
        let k = rng.below(parts);
        let mut other = img.clone();
        let s = cfg.image_size;
        for (cell, &l) in labels.iter().enumerate() {
            if l != k {
                let (r, c) = (cell / grid, cell % grid);
                for ch in 0..3 {
                    for y in r * p..(r + 1) * p {
                        for x in c * p..(c + 1) * p {
                            other.data_mut()[ch * s * s + y * s + x] += 5.0 * rng.normal();
                        }
                    }
                }
            }
        }
        let moved = extract_early(&backbone, &cfg, &other, &labels, parts).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&base.v[k]), bits(&moved.v[k]));
    }
}

#[test]
fn early_extraction_matches_stage2_hard_path() {
    let cfg = tiny_vit();
    let mut rng = Rng::new(15, 0);
    let backbone = jittered_backbone(&cfg, &mut rng);
    let parts = 3;
    let hw = cfg.num_patches();
    let s2 = init_stage2(&backbone, &cfg, parts, 2, &mut rng).unwrap().with_prefix("s2");
    for _ in 0..5 {
        let labels: Vec<usize> = (0..hw).map(|_| rng.below(parts + 1)).collect();
        let img = image(&cfg, &mut rng);
        let early = extract_early(&backbone, &cfg, &img, &labels, parts).unwrap();
        let mut onehot = vec![0.0; hw * (parts + 1)];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * (parts + 1) + l] = 1.0;
        }
        let mut tape = Tape::new();
        let bound = s2.bind(&mut tape, |_| false);
        let maps = tape.constant(Tensor::new(&[hw, parts + 1], onehot).unwrap());
        let out = stage2_forward(&mut tape, &bound.scope("s2"), &cfg, &img, maps, MaskVariant::Hard).unwrap();
        let cls = tape.value(out.cls);
        for k in 0..parts {
            assert_eq!(early.v[k], cls.row(k));
        }
    }
}

#[test]
fn patch_labels_examples() {
    let masks = vec![vec![true, false, true, false], vec![true, true, false, false]];
    assert_eq!(patch_labels(&masks, 4).unwrap(), vec![0, 1, 0, 2]);
    assert!(patch_labels(&masks, 5).is_err());
}
