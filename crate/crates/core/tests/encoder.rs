use coarse2fine::oracle;
use coarse2fine::rng::SplitMix64;
use coarse2fine::vim::{
    extract_patches, insert_cls_middle, patch_embed_coarse, patch_embed_fine, positional_rows, vim_block,
    BlockParams, EncoderParams, Origin, Stage,
};
use coarse2fine::{ModelConfig, Tensor};
use proptest::prelude::*;

fn swapped(p: &BlockParams) -> BlockParams {
    BlockParams {
        fwd: p.bwd.clone(),
        bwd: p.fwd.clone(),
        gate_fwd: p.gate_bwd.clone(),
        gate_bwd: p.gate_fwd.clone(),
        ..p.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reversing_input_and_directions_reverses_output(len in 1usize..12, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let p = BlockParams::init(4, 6, 3, 0.3, &mut rng);
        let x = Tensor::uniform(&[len, 4], -1.0, 1.0, &mut rng);
        let (y, _) = vim_block(&x, &p).unwrap();
        let (y_rev, _) = vim_block(&x.reverse_rows(), &swapped(&p)).unwrap();
        prop_assert_eq!(y_rev, y.reverse_rows());
    }

    #[test]
    fn block_matches_scalar_expansion(len in 1usize..8, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let p = BlockParams::init(3, 4, 2, 0.4, &mut rng);
        let x = Tensor::uniform(&[len, 3], -1.0, 1.0, &mut rng);
        let (y, acts) = vim_block(&x, &p).unwrap();
        let (want, yf, yb) = oracle::block(&oracle::rows_from(&x), &p);
        for t in 0..len {
            prop_assert!(oracle::max_abs(&want[t], y.row(t)) < 1e-5);
            prop_assert!(oracle::max_abs(&yf[t], acts.y_fwd.row(t)) < 1e-5);
            prop_assert!(oracle::max_abs(&yb[t], acts.y_bwd.row(t)) < 1e-5);
        }
    }

    #[test]
    fn patches_are_a_permutation_of_pixels(side in 1usize..5, p in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let img = Tensor::uniform(&[c, side * p, side * p], -1.0, 1.0, &mut rng);
        let patches = extract_patches(&img, p).unwrap();
        let mut a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = patches.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}

fn embed_setup(seed: u64) -> (Tensor, Tensor) {
    let mut rng = SplitMix64::new(seed);
    let img = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, &mut rng);
    let w = Tensor::gaussian(&[3 * 4 * 4, 5], 0.5, &mut rng);
    (img, w)
}

#[test]
fn constant_image_gives_identical_coarse_and_fine_tokens() {
    let img = Tensor::full(&[3, 16, 16], 0.375);
    let (_, w) = embed_setup(1);
    let fine = patch_embed_fine(&img, 4, &w).unwrap();
    let coarse = patch_embed_coarse(&img, 4, &w).unwrap();
    for t in 0..coarse.rows() {
        assert_eq!(coarse.row(t), fine.row(0));
    }
}

#[test]
fn coarse_tokens_of_upsampled_image_are_fine_tokens() {
    let (img, w) = embed_setup(2);
    let up = img.nearest_upsample_2x().unwrap();
    assert_eq!(patch_embed_coarse(&up, 4, &w).unwrap(), patch_embed_fine(&img, 4, &w).unwrap());
}

#[test]
fn both_resolutions_share_the_projection() {
    let (img, w) = embed_setup(3);
    let mut w2 = w.clone();
    w2.data_mut()[7] += 1.0;
    assert_ne!(patch_embed_fine(&img, 4, &w).unwrap(), patch_embed_fine(&img, 4, &w2).unwrap());
    assert_ne!(patch_embed_coarse(&img, 4, &w).unwrap(), patch_embed_coarse(&img, 4, &w2).unwrap());
}

#[test]
fn embedding_matches_straight_line_loops() {
    let cfg = ModelConfig {
        image_size: 16,
        coarse_patch: 8,
        fine_patch: 4,
        dim: 5,
        ..ModelConfig::tiny()
    };
    let (img, w) = embed_setup(4);
    for (coarse, got) in [
        (false, patch_embed_fine(&img, 4, &w).unwrap()),
        (true, patch_embed_coarse(&img, 4, &w).unwrap()),
    ] {
        let want = oracle::embed(&img, &cfg, &w, coarse);
        for t in 0..got.rows() {
            assert!(oracle::max_abs(&want[t], got.row(t)) < 1e-5);
        }
    }
}

#[test]
fn cls_goes_to_floor_half() {
    for m in 1..20 {
        let seq = insert_cls_middle(&Tensor::zeros(&[m, 2]), &Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(seq.cls_index, m / 2);
        assert_eq!(seq.len(), m + 1);
        assert_eq!(seq.cls_token(), [1.0, 1.0]);
        let grid: Vec<_> = seq.origin.iter().filter_map(|o| match o {
            Origin::Coarse(i) => Some(*i),
            _ => None,
        }).collect();
        assert_eq!(grid, (0..m).collect::<Vec<_>>());
    }
}

#[test]
fn coarse_positional_rows_follow_sequence_position() {
    let cfg = ModelConfig::tiny();
    let params = EncoderParams::init(&cfg);
    let seq = insert_cls_middle(&Tensor::zeros(&[cfg.num_coarse(), cfg.dim]), &params.cls).unwrap();
    let pos = positional_rows(&seq, &params, Stage::Coarse).unwrap();
    for p in 0..seq.len() {
        assert_eq!(pos.row(p), params.pos_coarse.row(p));
    }
}
