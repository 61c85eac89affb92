use proptest::prelude::*;

use pqm::lora::{lora_forward, merge, LoraAdapter};
use pqm::nfquant::{dequantise, quantise_block, quantise_matrix, NormalFloatCodebook};
use pqm::speakersim::{split_sizes, AdaptationDataset, SpeakerProfile, TaskConfig, Utterance};
use pqm::tensor::{gaussian_fill, matmul, Matrix, Rng};

/// Blocks drawn from three shapes: normal, uniform, and normal with one
/// large spike.
fn block() -> impl Strategy<Value = Vec<f32>> {
    let normal = (1usize..=200, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| rng.normal() as f32).collect::<Vec<_>>()
    });
    let uniform = prop::collection::vec(-3.0f32..3.0, 1..=200);
    let spiked = (2usize..=200, any::<u64>(), 10.0f32..1e4).prop_map(|(n, seed, spike)| {
        let mut rng = Rng::new(seed);
        let mut v: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        let at = rng.below(n);
        v[at] = if rng.uniform() < 0.5 { spike } else { -spike };
        v
    });
    prop_oneof![normal, uniform, spiked]
}

fn random(r: usize, c: usize, seed: u64) -> Matrix {
    gaussian_fill(Matrix::zeros(r, c), 0.0, 1.0, &mut Rng::new(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip_error_is_within_half_the_widest_gap(bits in 2u8..=8, values in block()) {
        let cb = NormalFloatCodebook::new(bits).unwrap();
        let (codes, scale) = quantise_block(&values, &cb).unwrap();
        let bound = f64::from(scale) * f64::from(cb.widest_gap()) / 2.0;
        for (&v, &c) in values.iter().zip(&codes) {
            let back = cb.level(c) * scale;
            prop_assert!((f64::from(back) - f64::from(v)).abs() <= bound, "{v} -> {back}, bound {bound}");
        }
    }

    #[test]
    fn requantising_the_reconstruction_is_bit_identical(values in block(), block_size in 1usize..=96) {
        let cb = NormalFloatCodebook::nf4();
        let m = Matrix::new(1, values.len(), values).unwrap();
        let q = quantise_matrix(&m, block_size, &cb).unwrap();
        let again = quantise_matrix(&dequantise(&q, &cb).unwrap(), block_size, &cb).unwrap();
        prop_assert_eq!(again.packed(), q.packed());
        let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(again.scales()), bits(q.scales()));
    }

    #[test]
    fn an_outlier_only_touches_its_own_block(
        seed in any::<u64>(),
        blocks in 2usize..8,
        block_size in 1usize..=64,
        spike in 5.0f32..1e5,
        pick in any::<prop::sample::Index>(),
    ) {
        let cb = NormalFloatCodebook::nf4();
        let m = random(blocks, block_size, seed);
        let mut spiked = m.clone();
        let at = pick.index(m.len());
        spiked.data_mut()[at] += spike;
        let (a, b) = (quantise_matrix(&m, block_size, &cb).unwrap(), quantise_matrix(&spiked, block_size, &cb).unwrap());
        let (ca, cb_) = (a.codes(), b.codes());
        let hit = at / block_size;
        for blk in (0..blocks).filter(|&i| i != hit) {
            prop_assert_eq!(a.scales()[blk].to_bits(), b.scales()[blk].to_bits());
            let span = blk * block_size..(blk + 1) * block_size;
            prop_assert_eq!(&ca[span.clone()], &cb_[span]);
        }
    }

    #[test]
    fn codebooks_ascend_and_pin_the_anchors(bits in 2u8..=8) {
        let cb = NormalFloatCodebook::new(bits).unwrap();
        let levels = cb.levels();
        prop_assert_eq!(levels.len(), 1usize << bits);
        prop_assert!(levels.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(levels[0], -1.0);
        prop_assert_eq!(levels[levels.len() - 1], 1.0);
        prop_assert_eq!(cb.level(cb.zero_code()), 0.0);
    }

    #[test]
    fn identity_product_is_exact(r in 1usize..12, c in 1usize..12, seed in any::<u64>()) {
        let m = random(r, c, seed);
        let v = random(c, 1, seed ^ 1);
        let via_identity = matmul(&matmul(&m, &Matrix::identity(c)).unwrap(), &v).unwrap();
        prop_assert_eq!(via_identity, matmul(&m, &v).unwrap());
    }

    #[test]
    fn fresh_adapters_are_bitwise_neutral(d in 2usize..16, k in 2usize..16, n in 1usize..6, seed in any::<u64>(), alpha in 0.1f32..8.0) {
        let r = 1 + (seed as usize) % (d.min(k) / 2).max(1);
        prop_assume!(r <= d.min(k) / 2);
        let mut rng = Rng::new(seed);
        let w0 = random(d, k, seed);
        let x = random(k, n, seed ^ 2);
        let ad = LoraAdapter::init(d, k, r, alpha, &mut rng).unwrap();
        let y = lora_forward(&w0, &ad, &x).unwrap();
        let base = matmul(&w0, &x).unwrap();
        prop_assert!(y.data().iter().zip(base.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(merge(&w0, &ad).unwrap(), w0);
    }

    #[test]
    fn forward_equals_the_merged_weight(d in 2usize..16, k in 2usize..16, n in 1usize..6, seed in any::<u64>(), alpha in 0.1f32..8.0) {
        let r = 1 + (seed as usize) % (d.min(k) / 2).max(1);
        prop_assume!(r <= d.min(k) / 2);
        let ad = LoraAdapter::from_parts(random(r, k, seed ^ 3), random(d, r, seed ^ 4), alpha).unwrap();
        let w0 = random(d, k, seed);
        let x = random(k, n, seed ^ 2);
        let y = lora_forward(&w0, &ad, &x).unwrap();
        let merged = matmul(&merge(&w0, &ad).unwrap(), &x).unwrap();
        let scale = merged.data().iter().fold(1e-6f32, |m, v| m.max(v.abs()));
        prop_assert!(y.max_abs_diff(&merged) / scale < 1e-5);
    }

    #[test]
    fn splits_are_disjoint_and_in_ratio(n in 5usize..=1000) {
        let utts: Vec<Utterance> = (0..n).map(|i| Utterance { tokens: vec![i as u32], label: 0 }).collect();
        let ds = AdaptationDataset::split("spk", utts);
        let (tr, dv, te) = split_sizes(n);
        prop_assert_eq!((ds.train().len(), ds.dev().len(), ds.test().len()), (tr, dv, te));
        prop_assert!(tr >= 1 && dv >= 1 && te >= 1);
        let mut seen: Vec<u32> = ds.train().iter().chain(ds.dev()).chain(ds.test()).map(|u| u.tokens[0]).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n as u32).collect::<Vec<_>>());
        // Two parts train, one dev, two test, to within rounding.
        prop_assert!((tr as f64 - 0.4 * n as f64).abs() <= 1.0);
        prop_assert!((dv as f64 - 0.2 * n as f64).abs() <= 1.0);
    }

    #[test]
    fn distinct_seeds_give_distinct_speakers(a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        let t = TaskConfig::default();
        let (pa, pb) = (
            SpeakerProfile::sample("a", t.latent_dim, &t.speaker, a),
            SpeakerProfile::sample("b", t.latent_dim, &t.speaker, b),
        );
        prop_assert_ne!(pa.gain, pb.gain);
        prop_assert_ne!(pa.bias, pb.bias);
    }
}
