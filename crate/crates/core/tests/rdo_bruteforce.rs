mod common;

use common::{brute_force_cost, partitions};
use partpredict::rdosim::{region_optimal_cost, QpValue, Superblock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn enumerator_counts() {
    assert_eq!(partitions(8).len(), 4);
    assert_eq!(partitions(16).len(), 3 + 4usize.pow(4));
}

#[test]
fn search_matches_enumeration_on_small_regions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..12 {
        let noise: Vec<u8> = (0..4096).map(|_| rng.random()).collect();
        let amp = rng.random_range(0..64u32);
        let edge = rng.random_range(0..64usize);
        let sb = Superblock::from_fn(|x, y| {
            let base = if x + y / 2 > edge { 180 } else { 50 };
            (base + noise[y * 64 + x] as u32 * amp / 255) as u8
        });
        let q = QpValue(rng.random_range(8..=105));
        let (level, size) = if case % 2 == 0 { (0, 8) } else { (1, 16) };
        let n = 64 / size;
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let want = brute_force_cost(&sb, q, j * size, i * size, size);
        assert_eq!(region_optimal_cost(&sb, q, level, i, j), want, "case {case}");
    }
}
