use fedsda::align::{align_client, make_partition, StainGenerator};
use fedsda::io::{synthesize, SyntheticSpec};
use fedsda::metrics::ssim;
use fedsda::stain::{separate, RgbImage, SeparationParams, StainMatrix};
use fedsda::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Returns a fixed matrix per condition.
struct Fixed(Vec<StainMatrix>);

impl StainGenerator for Fixed {
    fn num_conditions(&self) -> usize {
        self.0.len()
    }

    fn draw(
        &self,
        condition: usize,
        images: &[usize],
        _: &mut ChaCha8Rng,
    ) -> Result<Vec<StainMatrix>> {
        Ok(vec![self.0[condition - 1]; images.len()])
    }
}

proptest! {
    #[test]
    fn partition_covers_every_index_once(n in 0usize..200, k in 1usize..9, seed in any::<u64>()) {
        let blocks = make_partition(n, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(blocks.len(), k);
        let mut all: Vec<usize> = blocks.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(blocks.iter().all(|b| b.windows(2).all(|w| w[0] < w[1])));
    }
}

fn fixture() -> (Vec<RgbImage>, Vec<StainMatrix>) {
    let spec = SyntheticSpec {
        images_per_client: 8,
        width: 48,
        height: 48,
        ..SyntheticSpec::with_clients(2)
    };
    let clients = synthesize(&spec, 11).unwrap();
    let targets = vec![clients[0].stains[0], clients[1].stains[0]];
    (clients[0].images.clone(), targets)
}

fn cos(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

#[test]
fn images_take_the_stains_of_their_block() {
    let (images, targets) = fixture();
    let params = SeparationParams::default();
    let out = align_client(&images, &Fixed(targets.clone()), 1, 2, 3, &params).unwrap();
    let conds = out.plan.target_conditions();
    assert_eq!(out.images.len(), images.len());
    for (i, (img, &c)) in out.images.iter().zip(&conds).enumerate() {
        assert_eq!(out.plan.sampled_w[i], Some(targets[c - 1]));
        let sep = separate(img, &params).unwrap();
        for col in 0..2 {
            let s = cos(sep.stains.column(col), targets[c - 1].column(col));
            assert!(s > 0.99, "image {i} column {col}: {s}");
        }
        assert!(ssim(img, &images[i]).unwrap() > 0.5);
    }
}

#[test]
fn alignment_is_reproducible_and_seed_dependent() {
    let (images, targets) = fixture();
    let g = Fixed(targets);
    let params = SeparationParams::default();
    let a = align_client(&images, &g, 2, 2, 9, &params).unwrap();
    let b = align_client(&images, &g, 2, 2, 9, &params).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.plan, b.plan);
    let other = (10..30)
        .map(|s| {
            align_client(&images, &g, 2, 2, s, &params)
                .unwrap()
                .plan
                .partition
        })
        .any(|p| p != a.plan.partition);
    assert!(other);
}

#[test]
fn unseparable_images_pass_through() {
    let (mut images, targets) = fixture();
    images[3] = RgbImage::filled(48, 48, [255, 255, 255]).unwrap();
    let out = align_client(
        &images,
        &Fixed(targets),
        1,
        2,
        0,
        &SeparationParams::default(),
    )
    .unwrap();
    assert_eq!(out.images[3], images[3]);
    assert_eq!(out.plan.sampled_w[3], None);
    assert!(out
        .plan
        .sampled_w
        .iter()
        .enumerate()
        .all(|(i, w)| (i == 3) == w.is_none()));
}

#[test]
fn block_count_must_fit_the_generator() {
    let (images, targets) = fixture();
    let g = Fixed(targets);
    let params = SeparationParams::default();
    assert!(align_client(&images, &g, 1, 3, 0, &params).is_err());
    assert!(align_client(&images, &g, 1, 0, 0, &params).is_err());
    let single = align_client(&images, &g, 1, 1, 0, &params).unwrap();
    assert_eq!(
        single.plan.partition,
        vec![(0..images.len()).collect::<Vec<_>>()]
    );
}
