mod common;

use common::{boundary_oracle, dice_oracle, distance, hausdorff_oracle, iou_oracle, mask_pairs, percentile_oracle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph::metrics::{
    boundary, dice, dice_from_pr, evaluate_case, hd95, hd_max, iou, percentile, precision_recall, summarize,
    summarize_by_fold, to_csv, Hd95Variant, CSV_HEADER,
};
use voxgraph::volume::{region_composites, LabelVolume, Mask, Region};

const SPACINGS: [[f64; 3]; 2] = [[1.0; 3], [1.5, 0.8, 1.1]];

#[test]
fn overlap_scores_match_counting_oracle_exactly() {
    for (a, b) in mask_pairs(200, 12, 1) {
        assert_eq!(dice(&a, &b).unwrap().to_bits(), dice_oracle(&a, &b).to_bits());
        assert_eq!(iou(&a, &b).unwrap().to_bits(), iou_oracle(&a, &b).to_bits());
    }
}

#[test]
fn hausdorff_distances_match_all_pairs_oracle_bitwise() {
    for (k, (a, b)) in mask_pairs(200, 12, 2).into_iter().enumerate() {
        let spacing = SPACINGS[k % 2];
        let got95 = hd95(&a, &b, spacing, Hd95Variant::Standard).unwrap();
        let got_max = hd_max(&a, &b, spacing).unwrap();
        match hausdorff_oracle(&a, &b, spacing) {
            None => assert!(got95.is_none() && got_max.is_none()),
            Some((w95, wmax)) => {
                assert_eq!(got95.unwrap().to_bits(), w95.to_bits(), "pair {}", k);
                assert_eq!(got_max.unwrap().to_bits(), wmax.to_bits(), "pair {}", k);
            }
        }
    }
}

#[test]
fn dice_identities_hold() {
    for (a, b) in mask_pairs(200, 12, 3) {
        let d = dice(&a, &b).unwrap();
        let j = iou(&a, &b).unwrap();
        assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        if a.count() > 0 && b.count() > 0 {
            let (p, r) = precision_recall(&a, &b).unwrap();
            assert!((d - dice_from_pr(p, r)).abs() < 1e-12);
        }
    }
    assert_eq!(dice_from_pr(1.0, 1.0), 1.0);
    assert_eq!(dice_from_pr(0.5, 0.5), 0.5);
    assert_eq!(dice_from_pr(0.0, 0.0), 0.0);
}

#[test]
fn boundary_matches_scan() {
    for (a, _) in mask_pairs(40, 7, 4) {
        let got: Vec<[i64; 3]> = boundary(&a).into_iter().map(|p| p.map(|c| c as i64)).collect();
        assert_eq!(got, boundary_oracle(&a));
    }
}

#[test]
fn paper_literal_variant_matches_pairwise_percentile() {
    for (a, b) in mask_pairs(20, 6, 5) {
        let (ba, bb) = (boundary_oracle(&a), boundary_oracle(&b));
        let got = hd95(&a, &b, [1.0; 3], Hd95Variant::PaperLiteral).unwrap();
        if ba.is_empty() || bb.is_empty() {
            assert!(got.is_none());
            continue;
        }
        let all: Vec<f64> = ba.iter().flat_map(|&p| bb.iter().map(move |&q| distance(p, q, [1.0; 3]))).collect();
        assert_eq!(got.unwrap().to_bits(), percentile_oracle(all, 0.95).to_bits());
    }
}

#[test]
fn reference_examples() {
    let mut a = Mask::empty([1, 1, 4]);
    a.data[0] = true;
    let mut b = Mask::empty([1, 1, 4]);
    b.data[3] = true;
    assert_eq!(hd95(&a, &b, [1.0; 3], Hd95Variant::Standard).unwrap(), Some(3.0));
    assert_eq!(hd_max(&a, &b, [1.0; 3]).unwrap(), Some(3.0));
    assert_eq!(hd95(&a, &a, [1.0; 3], Hd95Variant::Standard).unwrap(), Some(0.0));
    let mut v = vec![4.0, 1.0, 2.0, 3.0, 0.0];
    assert_eq!(percentile(&mut v, 0.95), Some(3.8));
    assert_eq!(percentile(&mut [], 0.5), None);
    assert!(dice(&a, &Mask::empty([1, 1, 5])).is_err());
}

fn flip(m: &Mask, axis: usize) -> Mask {
    let [d, h, w] = m.dims;
    let mut out = Mask::empty(m.dims);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut c = [z, y, x];
                c[axis] = m.dims[axis] - 1 - c[axis];
                let j = out.index(c[0], c[1], c[2]);
                out.data[j] = m.data[m.index(z, y, x)];
            }
        }
    }
    out
}

fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> LabelVolume {
    LabelVolume::new(dims, (0..dims.iter().product()).map(|_| rng.random_range(0..4u8)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_bounded_and_flip_invariant(seed in any::<u64>(), axis in 0usize..3) {
        let (a, b) = mask_pairs(1, 6, seed).pop().unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let (fa, fb) = (flip(&a, axis), flip(&b, axis));
        prop_assert_eq!(d, dice(&fa, &fb).unwrap());
        prop_assert_eq!(hd95(&a, &b, [1.0; 3], Hd95Variant::Standard).unwrap(), hd95(&fa, &fb, [1.0; 3], Hd95Variant::Standard).unwrap());
        prop_assert_eq!(hd_max(&a, &b, [1.0; 3]).unwrap(), hd_max(&fa, &fb, [1.0; 3]).unwrap());
    }

    #[test]
    fn hd95_bounded_by_hd_max_and_scales_with_spacing(seed in any::<u64>(), s in 0.25f64..4.0) {
        let (a, b) = mask_pairs(1, 6, seed).pop().unwrap();
        if let (Some(p), Some(m)) = (hd95(&a, &b, [1.0; 3], Hd95Variant::Standard).unwrap(), hd_max(&a, &b, [1.0; 3]).unwrap()) {
            prop_assert!(0.0 <= p && p <= m);
            let scaled = hd95(&a, &b, [s; 3], Hd95Variant::Standard).unwrap().unwrap();
            prop_assert!((scaled - s * p).abs() <= 1e-12 * (1.0 + s * p));
            prop_assert_eq!(hd_max(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn composites_are_nested(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_labels(&mut rng, [4, 5, 3]);
        let [et, tc, wt] = region_composites(&l);
        for i in 0..l.data.len() {
            prop_assert_eq!(et.data[i], l.data[i] == 3);
            prop_assert_eq!(tc.data[i], l.data[i] == 1 || l.data[i] == 3);
            prop_assert_eq!(wt.data[i], l.data[i] != 0);
            prop_assert!(!et.data[i] || tc.data[i]);
            prop_assert!(!tc.data[i] || wt.data[i]);
        }
    }
}

#[test]
fn batch_summary_is_mean_of_case_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cases: Vec<(LabelVolume, LabelVolume)> =
        (0..3).map(|_| (random_labels(&mut rng, [5; 3]), random_labels(&mut rng, [5; 3]))).collect();
    let mut rows = Vec::new();
    for (i, (p, g)) in cases.iter().enumerate() {
        rows.extend(evaluate_case(&format!("c{}", i), Some(i % 2), p, g, [1.0; 3], Hd95Variant::Standard).unwrap());
    }
    let summary = summarize(&rows);
    for (ri, region) in Region::ALL.iter().enumerate() {
        let mut dices = Vec::new();
        let mut hds = Vec::new();
        for (p, g) in &cases {
            let (pm, gm) = (&region_composites(p)[ri], &region_composites(g)[ri]);
            dices.push(dice_oracle(pm, gm));
            hds.push(hausdorff_oracle(pm, gm, [1.0; 3]).unwrap().0);
        }
        let s = &summary[region];
        assert_eq!(s.cases, 3);
        assert!((s.dice - dices.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        assert!((s.hd95.unwrap() - hds.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
    let by_fold = summarize_by_fold(&rows);
    assert_eq!(by_fold[&Some(0)][&Region::Wt].cases, 2);
    assert_eq!(by_fold[&Some(1)][&Region::Wt].cases, 1);
}

#[test]
fn perfect_and_complementary_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gt = random_labels(&mut rng, [4; 3]);
    for row in evaluate_case("same", None, &gt, &gt, [1.0; 3], Hd95Variant::Standard).unwrap() {
        assert_eq!((row.dice, row.iou, row.hd95), (1.0, 1.0, Some(0.0)));
    }
    let inverse = LabelVolume::new([4; 3], gt.data.iter().map(|&v| if v == 0 { 3 } else { 0 }).collect()).unwrap();
    for row in evaluate_case("inv", None, &inverse, &gt, [1.0; 3], Hd95Variant::Standard).unwrap() {
        assert_eq!(row.dice, 0.0);
    }
}

#[test]
fn csv_fixture() {
    let gt = LabelVolume::new([1, 1, 4], vec![0, 2, 2, 0]).unwrap();
    let pred = LabelVolume::new([1, 1, 4], vec![0, 2, 2, 2]).unwrap();
    let rows = evaluate_case("case", Some(4), &pred, &gt, [1.0; 3], Hd95Variant::Standard).unwrap();
    // WT: |A| = 3, |B| = 2, overlap 2 → dice 0.8, iou 2/3. Every voxel is on
    // the border; nearest distances are [0, 0, 1] and [0, 0], so HD95 is the
    // interpolation at rank 1.9 between 0 and 1.
    let expected = format!(
        "{}\ncase,4,ET,1,1,,,pred_empty;gt_empty\ncase,4,TC,1,1,,,pred_empty;gt_empty\ncase,4,WT,0.8,{},{},1,\n",
        CSV_HEADER,
        2.0f64 / 3.0,
        0.95f64 * 2.0 - 1.0
    );
    assert_eq!(to_csv(&rows), expected);
}
