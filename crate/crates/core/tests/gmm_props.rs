mod oracles;

use boxseg::gmm::{reassign_and_refit, to_rgb, GaussianComponent, Gmm, GmmPair, Rgb};
use boxseg::types::{BBox, Image, Trimap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type RawComponent = (f64, [f64; 3], [[f64; 3]; 3]);

fn random_model(rng: &mut impl Rng) -> Vec<RawComponent> {
    let k = rng.gen_range(1..=5);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter()
        .map(|w| {
            let sd: [f64; 3] = std::array::from_fn(|_| rng.gen_range(20.0..55.0));
            let mut cov = [[0.0; 3]; 3];
            for r in 0..3 {
                cov[r][r] = sd[r] * sd[r];
            }
            for (r, c) in [(0, 1), (0, 2), (1, 2)] {
                let rho = rng.gen_range(-0.3..0.3);
                cov[r][c] = rho * sd[r] * sd[c];
                cov[c][r] = cov[r][c];
            }
            let mean = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
            (w / total, mean, cov)
        })
        .collect()
}

#[test]
fn mixture_nll_matches_density_sum_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let raw = random_model(&mut rng);
        let model = Gmm::new(
            raw.iter()
                .map(|&(w, m, c)| GaussianComponent::new(w, m, c).unwrap())
                .collect(),
        )
        .unwrap();
        let z: Rgb = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let expected = oracles::mixture_nll(&raw, &z);
        let got = model.neg_log_likelihood(&z);
        assert!((got - expected).abs() <= 1e-9, "case {case}: {got} vs {expected}");
    }
}

fn random_image(rng: &mut impl Rng, w: u32, h: u32, palette: usize) -> Image {
    let colors: Vec<[u8; 3]> = (0..palette).map(|_| std::array::from_fn(|_| rng.gen())).collect();
    let noisy = rng.gen_bool(0.5);
    Image::from_fn(w, h, |_, _| {
        let c = colors[rng.gen_range(0..palette)];
        if noisy {
            std::array::from_fn(|i| c[i].saturating_add(rng.gen_range(0..20)))
        } else {
            c
        }
    })
    .unwrap()
}

fn assert_well_formed(model: &Gmm) {
    assert!((model.weight_sum() - 1.0).abs() <= 1e-9);
    for c in model.components() {
        // Cholesky succeeds on the stored covariance
        GaussianComponent::new(c.weight(), c.mean(), c.covariance()).unwrap();
        assert!(c.log_det().is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fits_are_normalized_and_positive_definite(seed in any::<u64>(), palette in 1usize..6, k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 12, 10, palette);
        let pixels: Vec<Rgb> = img.pixels().iter().map(to_rgb).collect();
        let model = Gmm::from_kmeans(&pixels, k, seed).unwrap();
        prop_assert!(model.components().len() <= k);
        assert_well_formed(&model);
    }

    #[test]
    fn refit_never_raises_the_data_energy(seed in any::<u64>(), palette in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 14, 12, palette);
        let b = BBox::new(3, 2, 11, 10, 0).unwrap();
        let trimap = Trimap::from_box(&b, 14, 12).unwrap();
        let energy = |m: &GmmPair| -> f64 {
            img.pixels()
                .iter()
                .zip(trimap.labels())
                .map(|(p, l)| m.side(l.is_foreground()).data_energy(&to_rgb(p)))
                .sum()
        };
        let mut models = GmmPair::init(&img, &trimap, 5, seed).unwrap();
        for _ in 0..3 {
            let next = reassign_and_refit(&models, &img, &trimap).unwrap();
            let (before, after) = (energy(&models), energy(&next));
            prop_assert!(after <= before + 1e-9 * before.abs().max(1.0), "{before} -> {after}");
            assert_well_formed(&next.foreground);
            assert_well_formed(&next.background);
            models = next;
        }
    }
}
