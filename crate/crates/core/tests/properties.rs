use proptest::prelude::*;
use vox_core::density::{self, DensityModel, PerformerConfig, AttentionKind};
use vox_core::eval::{auc_of};
use vox_core::seg::{self, CertaintyFormula, Connectivity, LesionSet, Method, PredictionSet};
use vox_core::volume::{read_mask, read_volume, write_mask, write_volume, IntensityDomain, LabelMask, Volume};
use vox_core::vq::{quantize, Codebook, CodebookConfig, QuantizedGrid};

fn dims_strategy() -> impl Strategy<Value = [usize; 3]> {
    (1usize..=8, 1usize..=8, 1usize..=8).prop_map(|(a, b, c)| [a, b, c])
}

fn pairwise(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

// Coarse grid so ties are common.
fn scores(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..12).prop_map(|x| x as f64 * 0.5), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_unflatten_round_trip(dims in dims_strategy(), k in 1usize..40, seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let mut s = seed;
        let indices: Vec<usize> = (0..n).map(|_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); (s >> 33) as usize % k }).collect();
        let q = QuantizedGrid { dims, indices: indices.clone(), vectors: Vec::new(), dim: 0, distances: Vec::new() };
        let seq = density::flatten(&q, k).unwrap();
        prop_assert_eq!(seq.ids[0], k);
        prop_assert_eq!(seq.len(), n);
        prop_assert_eq!(density::unflatten(&seq, dims).unwrap(), indices.clone());
        for z in 0..dims[2] { for y in 0..dims[1] { for x in 0..dims[0] {
            prop_assert_eq!(seq.ids[density::position(dims, x, y, z)], indices[x + dims[0] * (y + dims[1] * z)]);
        }}}
    }

    #[test]
    fn auc_matches_pairwise(pos in scores(1..30), neg in scores(1..30)) {
        let r = auc_of(&pos, &neg).unwrap();
        prop_assert!((r.auc - pairwise(&pos, &neg)).abs() < 1e-12);
    }

    #[test]
    fn auc_antisymmetric(pos in scores(1..30), neg in scores(1..30)) {
        let a = auc_of(&pos, &neg).unwrap().auc;
        let b = auc_of(&neg, &pos).unwrap().auc;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_map(pos in scores(1..30), neg in scores(1..30)) {
        let f = |x: &f64| (x * 0.7).exp() - 3.0;
        let a = auc_of(&pos, &neg).unwrap().auc;
        let b = auc_of(&pos.iter().map(f).collect::<Vec<_>>(), &neg.iter().map(f).collect::<Vec<_>>()).unwrap().auc;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn single_softmax_certainty_symmetric(ps in prop::collection::vec(0.0f32..=1.0, 1..50)) {
        let n = ps.len();
        let flip: Vec<f32> = ps.iter().map(|p| 1.0 - p).collect();
        let a = seg::voxel_certainty(&PredictionSet::new([n, 1, 1], vec![ps], Method::SingleSoftmax).unwrap(), CertaintyFormula::MeanEntropy);
        let b = seg::voxel_certainty(&PredictionSet::new([n, 1, 1], vec![flip], Method::SingleSoftmax).unwrap(), CertaintyFormula::MeanEntropy);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
            prop_assert!((0.5..=1.0).contains(x));
        }
    }

    #[test]
    fn mean_entropy_certainty_in_unit_range(maps in prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 20), 2..6)) {
        let c = seg::voxel_certainty(&PredictionSet::new([20, 1, 1], maps, Method::Ensemble).unwrap(), CertaintyFormula::MeanEntropy);
        for x in c {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn identical_maps_vote_is_threshold(map in prop::collection::vec(0.0f32..=1.0, 27), n in 2usize..6) {
        let ps = PredictionSet::new([3, 3, 3], vec![map.clone(); n], Method::Ensemble).unwrap();
        let vote = seg::majority_vote(&ps, 0.5);
        for (v, p) in vote.iter().zip(&map) {
            prop_assert_eq!(*v, *p >= 0.5);
        }
    }

    #[test]
    fn components_partition_foreground(bits in prop::collection::vec(any::<bool>(), 64), six in any::<bool>()) {
        let conn = if six { Connectivity::Six } else { Connectivity::TwentySix };
        let comps = seg::connected_components(&bits, [4, 4, 4], conn);
        let mut seen = vec![false; 64];
        for c in &comps {
            prop_assert!(!c.is_empty());
            for &i in c {
                prop_assert!(bits[i] && !seen[i]);
                seen[i] = true;
            }
        }
        prop_assert_eq!(seen, bits);
    }

    #[test]
    fn growing_ground_truth_keeps_true_positives(bits in prop::collection::vec(any::<bool>(), 64), gt in prop::collection::vec(any::<bool>(), 64), extra in prop::collection::vec(any::<bool>(), 64)) {
        let les = LesionSet { dims: [4, 4, 4], lesions: seg::connected_components(&bits, [4, 4, 4], Connectivity::TwentySix) };
        let small = LabelMask::new([4, 4, 4], gt.iter().map(|&b| b as u8).collect()).unwrap();
        let big = LabelMask::new([4, 4, 4], gt.iter().zip(&extra).map(|(&a, &b)| (a || b) as u8).collect()).unwrap();
        let a = seg::tp_fp_label(&les, &small).unwrap();
        let b = seg::tp_fp_label(&les, &big).unwrap();
        for (x, y) in a.true_positive.iter().zip(&b.true_positive) {
            prop_assert!(!x || *y);
        }
        prop_assert!(b.false_positives <= a.false_positives);
    }

    #[test]
    fn volume_and_mask_io_round_trip(dims in dims_strategy(), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let vox: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 999.0).collect();
        let v = Volume::new(dims, vox, IntensityDomain::Unit).unwrap();
        let m = LabelMask::new(dims, (0..n).map(|i| ((i as u32 ^ seed) & 1) as u8).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_volume(&v, &dir.path().join("a.vol3")).unwrap();
        write_mask(&m, &dir.path().join("a.msk3")).unwrap();
        prop_assert_eq!(read_volume(&dir.path().join("a.vol3")).unwrap(), v);
        prop_assert_eq!(read_mask(&dir.path().join("a.msk3")).unwrap(), m);
    }

    #[test]
    fn quantize_picks_a_nearest_code(seed in any::<u64>()) {
        let book = Codebook::new(CodebookConfig { size: 12, dim: 3, ..CodebookConfig::toy() }, &mut vox_core::seed::rng(seed)).unwrap();
        let mut r = vox_core::seed::rng(seed ^ 1);
        let z: Vec<f32> = (0..24).map(|_| rand::Rng::gen_range(&mut r, -2.0f32..2.0)).collect();
        let q = quantize(&z, [8, 1, 1], &book).unwrap();
        for (row, &k) in z.chunks(3).zip(&q.indices) {
            let d = |c: usize| book.code(c).iter().zip(row).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            let best = (0..12).map(d).fold(f64::INFINITY, f64::min);
            prop_assert!(d(k) <= best);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn conditionals_are_causal(j in 0usize..16, favor in any::<bool>(), seed in any::<u64>()) {
        let cfg = PerformerConfig {
            layers: 2, heads: 2, dim: 16, ff_dim: 32, features: 16,
            attention: if favor { AttentionKind::Favor } else { AttentionKind::Exact },
            seed, ..PerformerConfig::toy()
        };
        let k = 6;
        let model = DensityModel::new(&cfg, k, 16).unwrap();
        let ids: Vec<usize> = (0..16).map(|i| (i * 5 + seed as usize) % k).collect();
        let q = QuantizedGrid { dims: [16, 1, 1], indices: ids.clone(), vectors: Vec::new(), dim: 0, distances: Vec::new() };
        let a = model.conditionals(&density::flatten(&q, k).unwrap()).unwrap();
        let mut moved = ids;
        moved[j] = (moved[j] + 1) % k;
        let q2 = QuantizedGrid { indices: moved, ..q };
        let b = model.conditionals(&density::flatten(&q2, k).unwrap()).unwrap();
        // conditional i predicts token i from tokens < i
        for i in 0..=j {
            for (x, y) in a[i].iter().zip(&b[i]) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
