use proptest::prelude::*;
use rand::seq::SliceRandom;
use robustlab::analysis::accuracy;
use robustlab::data::{gen_train, IMAGE_LEN, IMAGE_SIZE, PIXELS};
use robustlab::distort::{
    apply, apply_shard, binarize, build_eval_subset, image_rng, permute_tiles, scramble, silhouette, Distortion,
};
use robustlab::model::build;

/// Tile `t` of a p×p grid, copied out by hand.
fn tile(img: &[f32], p: usize, t: usize) -> Vec<f32> {
    let s = IMAGE_SIZE / p;
    let (ty, tx) = (t / p, t % p);
    let mut out = Vec::new();
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                out.push(img[c * PIXELS + (ty * s + y) * IMAGE_SIZE + tx * s + x]);
            }
        }
    }
    out
}

fn all_perms(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_perms(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn distinct_image() -> Vec<f32> {
    (0..IMAGE_LEN).map(|i| i as f32 / IMAGE_LEN as f32).collect()
}

#[test]
fn two_by_two_scramble_matches_enumerated_permutation() {
    let img = distinct_image();
    let out = scramble(&img, 2, &mut image_rng(17, 4)).unwrap();
    let matching: Vec<Vec<usize>> = all_perms(4)
        .into_iter()
        .filter(|perm| (0..4).all(|t| tile(&out, 2, t) == tile(&img, 2, perm[t])))
        .collect();
    assert_eq!(matching.len(), 1);
    // The permutation is the seeded shuffle of 0..4.
    let mut expected: Vec<usize> = (0..4).collect();
    expected.shuffle(&mut image_rng(17, 4));
    assert_eq!(matching[0], expected);
    assert_eq!(permute_tiles(&img, 2, &expected), out);
}

#[test]
fn scramble_p1_keeps_every_image() {
    let shard = gen_train(3, 2).unwrap();
    let out = apply_shard(&shard, &Distortion::Scramble { grid: 1 }, 9).unwrap();
    assert_eq!(out.images, shard.images);
}

#[test]
fn bw_recovers_mask_when_fg_bright_and_bg_dark() {
    let shard = gen_train(5, 1).unwrap();
    let mask = shard.mask(0);
    let img: Vec<f32> = (0..IMAGE_LEN).map(|i| if mask[i % PIXELS] == 1 { 0.9 } else { 0.1 }).collect();
    let out = binarize(&img, 0.5).unwrap();
    let want: Vec<f32> = (0..IMAGE_LEN).map(|i| mask[i % PIXELS] as f32).collect();
    assert_eq!(out, want);
    assert!(binarize(&vec![0.0; IMAGE_LEN], 0.5).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn silhouette_is_idempotent_and_keeps_area() {
    let shard = gen_train(6, 1).unwrap();
    for i in 0..shard.len() {
        let s = silhouette(shard.mask(i)).unwrap();
        let mask: Vec<u8> = s[..PIXELS].iter().map(|&v| (v == 0.0) as u8).collect();
        assert_eq!(mask, shard.mask(i));
        assert_eq!(silhouette(&mask).unwrap(), s);
    }
}

#[test]
fn eval_subset_is_both_correct() {
    let shard = gen_train(8, 6).unwrap();
    let (a, b) = (build("mini3", 1).unwrap(), build("mini3", 2).unwrap());
    let sub = build_eval_subset(&a, &b, &shard).unwrap();
    let correct = |n| (accuracy(n, &shard).unwrap() * shard.len() as f64).round() as usize;
    assert!(sub.len() <= correct(&a).min(correct(&b)));
    let clean = shard.subset(&sub.indices);
    if !clean.is_empty() {
        assert_eq!(accuracy(&a, &clean).unwrap(), 1.0);
        assert_eq!(accuracy(&b, &clean).unwrap(), 1.0);
    }
    assert_eq!(build_eval_subset(&a, &a, &shard).unwrap().len(), correct(&a));
}

fn any_distortion() -> impl Strategy<Value = Distortion> {
    prop_oneof![
        prop::sample::select(vec![1usize, 2, 4, 8]).prop_map(|grid| Distortion::Scramble { grid }),
        (0.0f32..0.5).prop_map(|sigma| Distortion::GaussNoise { sigma }),
        (0.0f32..2.0).prop_map(|sigma| Distortion::GaussBlur { sigma }),
        (0.05f32..=1.0).prop_map(|factor| Distortion::Contrast { factor }),
        (0.05f32..0.95).prop_map(|threshold| Distortion::Bw { threshold }),
        Just(Distortion::Silhouette),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distortions_stay_in_unit_range(d in any_distortion(), seed in 0u64..500) {
        let shard = gen_train(seed, 1).unwrap();
        let i = (seed % 8) as usize;
        let out = apply(shard.image(i), Some(shard.mask(i)), &d, &mut image_rng(seed, i)).unwrap();
        prop_assert_eq!(out.len(), IMAGE_LEN);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scramble_preserves_pixel_multiset(grid in prop::sample::select(vec![1usize, 2, 4, 8]), seed in 0u64..500) {
        let img = distinct_image();
        let out = scramble(&img, grid, &mut image_rng(seed, 0)).unwrap();
        let mut a: Vec<u32> = img.iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = out.iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}
