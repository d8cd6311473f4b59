//! Surface-distance oracle equivalence on random masks and the
//! dice/jaccard algebraic identity.

use epl_core::error::Error;
use epl_core::labels::LabelVolume;
use epl_core::metrics::{dice_jaccard, surface_distances};
use epl_core::oracles::surface_distances_brute_force;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], density: f64) -> LabelVolume {
    let n = dims[0] * dims[1] * dims[2];
    LabelVolume::new(dims, (0..n).map(|_| rng.gen_bool(density) as u8).collect()).unwrap()
}

#[test]
fn surface_distances_match_all_pairs_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut defined = 0usize;
    for round in 0..120 {
        let side = rng.gen_range(4..=10);
        let dims = [side, side, side];
        let density = rng.gen_range(0.05..0.5);
        let pred = random_mask(&mut rng, dims, density);
        let gt = random_mask(&mut rng, dims, density);
        match (
            surface_distances(&pred, &gt, 1),
            surface_distances_brute_force(&pred, &gt, 1),
        ) {
            (Ok((hd_a, asd_a)), Ok((hd_b, asd_b))) => {
                assert_eq!(hd_a.to_bits(), hd_b.to_bits(), "round {round}: hd95");
                assert_eq!(asd_a.to_bits(), asd_b.to_bits(), "round {round}: asd");
                defined += 1;
            }
            (Err(Error::UndefinedMetric { .. }), Err(Error::UndefinedMetric { .. })) => {}
            (a, b) => panic!("round {round}: divergent outcomes {a:?} vs {b:?}"),
        }
    }
    assert!(defined >= 80, "only {defined} defined cases sampled");
}

#[test]
fn dice_jaccard_identity_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let dims = [6, 6, 6];
        let pred = random_mask(&mut rng, dims, 0.3);
        let gt = random_mask(&mut rng, dims, 0.3);
        let (dice, jaccard) = dice_jaccard(&pred, &gt, 1).unwrap();
        assert!((dice - 2.0 * jaccard / (1.0 + jaccard)).abs() <= 1e-12);
        assert!(dice >= jaccard - 1e-12);
        assert!((0.0..=1.0).contains(&dice) && (0.0..=1.0).contains(&jaccard));
    }
}

#[test]
fn surface_distances_are_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = [12usize, 12, 12];
    let n = dims[0] * dims[1] * dims[2];
    let shift = |voxels: &[(usize, usize, usize)], dz: usize, dy: usize, dx: usize| {
        let mut v = vec![0u8; n];
        for &(z, y, x) in voxels {
            v[((z + dz) * 12 + (y + dy)) * 12 + (x + dx)] = 1;
        }
        LabelVolume::new(dims, v).unwrap()
    };
    for _ in 0..20 {
        // random blobs confined to the low corner so a (2,1,3) shift fits
        let blob = |rng: &mut ChaCha8Rng| -> Vec<(usize, usize, usize)> {
            (0..8)
                .map(|_| (rng.gen_range(0..6), rng.gen_range(0..6), rng.gen_range(0..6)))
                .collect()
        };
        let a = blob(&mut rng);
        let b = blob(&mut rng);
        let base = surface_distances(&shift(&a, 0, 0, 0), &shift(&b, 0, 0, 0), 1).unwrap();
        let moved = surface_distances(&shift(&a, 2, 1, 3), &shift(&b, 2, 1, 3), 1).unwrap();
        assert_eq!(base, moved);
    }
}
