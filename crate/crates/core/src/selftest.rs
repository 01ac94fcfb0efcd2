//! Built-in property checks. Each check compares library code against an
//! independent oracle (hand values, brute force, or the straight-line
//! implementations in [`crate::oracle`]).

use std::fmt::Display;
use std::time::Instant;

use crate::config::{DataConfig, ModelConfig};
use crate::flops::{coarse_flops, expected_flops, fine_flops, stage_flops, StageKind};
use crate::geometry::{assemble_fine_sequence, fine_count, select_informative, GridMap, Selection};
use crate::oracle;
use crate::pipeline::{
    coarse_stage, fine_stage, full_fine_logits, infer, kl_divergence, loss, route, sweep_eta, Model, Route,
    StageTaken,
};
use crate::reuse::{broadcast_to_fine, broadcast_to_fine_upsample, mask_and_fuse, ReuseFeatures, ReuseMlp};
use crate::rng::SplitMix64;
use crate::scoring::{accumulate, aggregate, token_score};
use crate::ssm::{discretize_zoh, scan_with, DiscreteKernel, SsmParams};
use crate::synth::gen_synthetic;
use crate::tensor::{count_macs, softmax, softplus, Tensor};
use crate::vim::{
    classify, insert_cls_middle, patch_embed_coarse, patch_embed_fine, vim_block, BlockParams, EncoderParams,
    LayerActivations, Origin, TokenSeq,
};
use crate::weights::{decode_tensors, params_from_bytes, params_to_bytes};
use crate::LoadError;

#[derive(Debug)]
pub struct Failure(pub String);

impl<E: Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(Failure(msg()))
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Outcome {
    ensure((got - want).abs() <= tol, || format!("{what}: got {got}, want {want} (tol {tol})"))
}

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

pub fn checks() -> Vec<Check> {
    macro_rules! c {
        ($($f:ident),* $(,)?) => { vec![$(Check { name: stringify!($f), run: $f }),*] };
    }
    c![
        matmul_naive,
        softmax_hand,
        softplus_hand,
        upsample_hand,
        zoh_hand,
        scan_scalar_recurrence,
        scan_vs_kernel,
        patch_permutation,
        coarse_embed_single_patch,
        coarse_embed_pooling_inverse,
        cls_middle_index,
        block_scalar_expansion,
        encode_repeat_run,
        head_hand,
        score_spike,
        ema_hand_fold,
        mapping_coordinates,
        patch_count,
        select_hand,
        assembly_hand,
        reuse_linearization,
        reuse_single_patch,
        broadcast_paths,
        fuse_all_ones,
        fuse_leaves_unselected,
        coarse_stage_straight_line,
        fine_stage_straight_line,
        route_boundary,
        alpha_one_full_fine,
        flops_monotone_in_eta,
        loss_hand,
        kl_nonnegative,
        flops_monotone_in_alpha,
        flops_mean,
        flops_dynamic_count,
        truncation_fuzz,
        sweep_monotone,
        zero_amplitude_sanity,
    ]
}

/// Runs every check whose name contains `filter` (all if `None`).
pub fn run(filter: Option<&str>) -> Vec<CheckResult> {
    checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            let start = Instant::now();
            let res = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err(Failure("panicked".into())));
            CheckResult {
                name: c.name,
                passed: res.is_ok(),
                detail: res.err().map(|f| f.0).unwrap_or_default(),
                millis: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect()
}

pub fn run_all() -> Vec<CheckResult> {
    run(None)
}

/// Small model with a 2×2 coarse grid and two blocks.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        in_channels: 2,
        coarse_patch: 16,
        fine_patch: 8,
        dim: 8,
        inner_dim: 8,
        state_dim: 4,
        depth: 2,
        num_classes: 3,
        score_layers: 2,
        seed: 11,
        ..ModelConfig::tiny()
    }
}

/// Seeded model with weights scaled up so activations are far from zero.
pub fn lively_model(cfg: ModelConfig, scale: f32) -> Model {
    let mut params = EncoderParams::init(&cfg);
    for (name, t) in params.named_tensors_mut() {
        if !name.ends_with(".a") {
            *t = t.scale(scale);
        }
    }
    Model::new(cfg, params).expect("valid model")
}

/// Seeded tiny model with a sharpened head, so coarse confidences on
/// synthetic data sit around 0.5 instead of at `1/C`.
pub fn routed_model() -> Model {
    let mut m = lively_model(ModelConfig::tiny(), 5.0);
    m.params.head_w = m.params.head_w.scale(30.0);
    m
}

fn random_image(cfg: &ModelConfig, rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(&[cfg.in_channels, cfg.image_size, cfg.image_size], -1.0, 1.0, rng)
}

fn matmul_naive() -> Outcome {
    let mut rng = SplitMix64::new(1);
    let mut shapes = vec![(4, 3, 2)];
    for _ in 0..30 {
        shapes.push((1 + rng.below(8) as usize, 1 + rng.below(8) as usize, 1 + rng.below(8) as usize));
    }
    for (m, k, n) in shapes {
        let a = Tensor::uniform(&[m, k], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(&[k, n], -2.0, 2.0, &mut rng);
        let got = a.matmul(&b)?;
        let want = oracle::naive_matmul(a.data(), b.data(), m, k, n);
        ensure(
            got.data().iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()),
            || format!("{m}x{k}x{n} differs from triple loop"),
        )?;
    }
    Ok(())
}

fn softmax_hand() -> Outcome {
    let s = softmax(&Tensor::vector(vec![std::f32::consts::LN_2, 0.0]))?;
    close(s.data()[0] as f64, 2.0 / 3.0, 1e-6, "softmax[0]")?;
    close(s.data()[1] as f64, 1.0 / 3.0, 1e-6, "softmax[1]")
}

fn softplus_hand() -> Outcome {
    close(softplus(1.0), 1.313262, 1e-6, "softplus(1)")
}

fn upsample_hand() -> Outcome {
    let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    let want = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    ensure(t.nearest_upsample_2x()?.data() == want, || "upsample layout".into())
}

fn zoh_hand() -> Outcome {
    let (a_bar, b_bar) = discretize_zoh(-1.0, 1.0, std::f64::consts::LN_2)?;
    close(a_bar, 0.5, 1e-12, "a_bar")?;
    close(b_bar, 0.5, 1e-12, "b_bar")
}

fn scan_scalar_recurrence() -> Outcome {
    let xs = [1.0, 2.0, -1.0];
    let ds = [0.5, 1.0, 0.2];
    let bs = [1.0, 0.5, 2.0];
    let cs = [2.0, 1.0, -1.0];
    let a = -1.0f64;
    let got = scan_with(
        &Tensor::matrix(3, 1, xs.to_vec())?,
        &Tensor::matrix(3, 1, ds.to_vec())?,
        &Tensor::matrix(3, 1, bs.to_vec())?,
        &Tensor::matrix(3, 1, cs.to_vec())?,
        &Tensor::matrix(1, 1, vec![a as f32])?,
    )?;
    let mut h = 0f64;
    for t in 0..3 {
        let e = (ds[t] as f64 * a).exp();
        h = e * h + (e - 1.0) / a * bs[t] as f64 * xs[t] as f64;
        close(got.data()[t] as f64, cs[t] as f64 * h, 1e-6, "scan step")?;
    }
    Ok(())
}

/// Largest recurrence-vs-convolution gap over `cases` random frozen
/// parameter sets with `L ≤ 32`, `D' ≤ 8`, `N ≤ 4`.
pub fn scan_kernel_max_diff(seed: u64, cases: usize) -> crate::Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0f64;
    for _ in 0..cases {
        let len = 1 + rng.below(32) as usize;
        let inner = 1 + rng.below(8) as usize;
        let state = 1 + rng.below(4) as usize;
        let a: Vec<f32> = (0..inner * state).map(|_| rng.uniform(-2.0, -0.05) as f32).collect();
        let delta: Vec<f32> = (0..inner).map(|_| rng.uniform(0.01, 1.0) as f32).collect();
        let b: Vec<f32> = (0..state).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let c: Vec<f32> = (0..state).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let x = Tensor::uniform(&[len, inner], -1.0, 1.0, &mut rng);

        let delta_t = Tensor::matrix(len, inner, (0..len).flat_map(|_| delta.clone()).collect())?;
        let b_t = Tensor::matrix(len, state, (0..len).flat_map(|_| b.clone()).collect())?;
        let c_t = Tensor::matrix(len, state, (0..len).flat_map(|_| c.clone()).collect())?;
        let y = scan_with(&x, &delta_t, &b_t, &c_t, &Tensor::matrix(inner, state, a.clone())?)?;

        for ch in 0..inner {
            let mut a_bar = Vec::with_capacity(state);
            let mut b_bar = Vec::with_capacity(state);
            for n in 0..state {
                let (ab, bb) = discretize_zoh(a[ch * state + n] as f64, b[n] as f64, delta[ch] as f64)?;
                a_bar.push(ab);
                b_bar.push(bb);
            }
            let cs: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            let kernel = DiscreteKernel::new(&a_bar, &b_bar, &cs, len);
            let xc = Tensor::vector((0..len).map(|t| x.data()[t * inner + ch]).collect());
            let yk = crate::ssm::kernel_form(&xc, &kernel)?;
            for t in 0..len {
                worst = worst.max((yk.data()[t] - y.data()[t * inner + ch]).abs() as f64);
            }
        }
    }
    Ok(worst)
}

fn scan_vs_kernel() -> Outcome {
    let worst = scan_kernel_max_diff(7, 100)?;
    ensure(worst <= 1e-4, || format!("max abs gap {worst:e}"))
}

fn patch_permutation() -> Outcome {
    let mut rng = SplitMix64::new(2);
    let (p, side) = (4, 16);
    let img = Tensor::uniform(&[2, side, side], -1.0, 1.0, &mut rng);
    let w = Tensor::gaussian(&[2 * p * p, 5], 0.5, &mut rng);
    let base = patch_embed_fine(&img, p, &w)?;
    let (a, b) = (1usize, 9usize);
    let mut swapped = img.clone();
    let g = side / p;
    for ch in 0..2 {
        for y in 0..p {
            for x in 0..p {
                let at = |cell: usize| ch * side * side + ((cell / g) * p + y) * side + (cell % g) * p + x;
                swapped.data_mut().swap(at(a), at(b));
            }
        }
    }
    let after = patch_embed_fine(&swapped, p, &w)?;
    for t in 0..base.rows() {
        let src = if t == a { b } else if t == b { a } else { t };
        ensure(after.row(t) == base.row(src), || format!("token {t} not permuted"))?;
    }
    Ok(())
}

fn coarse_embed_single_patch() -> Outcome {
    let mut rng = SplitMix64::new(3);
    let img = Tensor::uniform(&[1, 8, 8], -1.0, 1.0, &mut rng);
    let w = Tensor::gaussian(&[16, 3], 0.5, &mut rng);
    let got = patch_embed_coarse(&img, 4, &w)?;
    ensure(got.dims() == [1, 3], || format!("shape {:?}", got.dims()))?;
    let px = |y: usize, x: usize| img.data()[y * 8 + x] as f64;
    let pooled: Vec<f64> = (0..16)
        .map(|k| {
            let (y, x) = (k / 4, k % 4);
            (px(2 * y, 2 * x) + px(2 * y, 2 * x + 1) + px(2 * y + 1, 2 * x) + px(2 * y + 1, 2 * x + 1)) / 4.0
        })
        .collect();
    for j in 0..3 {
        let want: f64 = (0..16).map(|k| pooled[k] * w.data()[k * 3 + j] as f64).sum();
        close(got.data()[j] as f64, want, 1e-5, "pooled embedding")?;
    }
    Ok(())
}

fn coarse_embed_pooling_inverse() -> Outcome {
    let mut rng = SplitMix64::new(4);
    let img = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, &mut rng);
    let w = Tensor::gaussian(&[3 * 16, 6], 0.3, &mut rng);
    let fine = patch_embed_fine(&img, 4, &w)?;
    let coarse_of_up = patch_embed_coarse(&img.nearest_upsample_2x()?, 4, &w)?;
    ensure(fine == coarse_of_up, || "coarse tokens of upsampled image differ".into())
}

fn cls_middle_index() -> Outcome {
    let seq = insert_cls_middle(&Tensor::zeros(&[5, 2]), &Tensor::vector(vec![1.0, 1.0]))?;
    ensure(seq.cls_index == 2 && seq.origin[2] == Origin::Cls, || format!("cls at {}", seq.cls_index))
}

fn hand_block() -> BlockParams {
    let m = |r: usize, c: usize, v: &[f32]| Tensor::matrix(r, c, v.to_vec()).unwrap();
    let ssm = |a: f32, dp: &[f32], b: &[f32], c: &[f32]| SsmParams {
        a: m(2, 1, &[a, a * 0.5]),
        delta_proj: m(2, 2, dp),
        b_proj: m(2, 1, b),
        c_proj: m(2, 1, c),
    };
    BlockParams {
        in_proj: m(2, 4, &[0.5, -0.3, 0.2, 0.1, 0.4, 0.6, -0.2, 0.3]),
        fwd: ssm(-1.0, &[0.3, 0.0, 0.1, -0.4], &[1.0, 0.5], &[0.7, -0.2]),
        bwd: ssm(-0.5, &[-0.2, 0.5, 0.3, 0.2], &[0.4, -0.6], &[0.3, 0.9]),
        gate_fwd: m(2, 2, &[0.5, 0.1, -0.3, 0.8]),
        gate_bwd: m(2, 2, &[-0.4, 0.2, 0.6, 0.1]),
        out_proj: m(2, 2, &[1.0, 0.2, -0.5, 0.7]),
    }
}

fn block_scalar_expansion() -> Outcome {
    let p = hand_block();
    let seq = Tensor::matrix(4, 2, vec![0.5, -1.0, 1.5, 0.2, -0.7, 0.9, 0.0, 1.1])?;
    let (out, acts) = vim_block(&seq, &p)?;
    let (want, yf, yb) = oracle::block(&oracle::rows_from(&seq), &p);
    for t in 0..4 {
        ensure(oracle::max_abs(&want[t], out.row(t)) <= 1e-5, || format!("output row {t}"))?;
        ensure(oracle::max_abs(&yf[t], acts.y_fwd.row(t)) <= 1e-5, || format!("y_fwd row {t}"))?;
        ensure(oracle::max_abs(&yb[t], acts.y_bwd.row(t)) <= 1e-5, || format!("y_bwd row {t}"))?;
    }
    Ok(())
}

fn encode_repeat_run() -> Outcome {
    let cfg = ModelConfig::tiny();
    let a = Model::init(cfg.clone())?;
    let b = Model::init(cfg.clone())?;
    let img = random_image(&cfg, &mut SplitMix64::new(5));
    let ra = coarse_stage(&img, &a)?;
    let rb = coarse_stage(&img, &b)?;
    ensure(ra.z_c == rb.z_c && ra.logits == rb.logits, || "repeat run differs".into())?;
    let ia = infer(&img, &a, 1.0, cfg.alpha)?;
    let ib = infer(&img, &b, 1.0, cfg.alpha)?;
    ensure(ia.p == ib.p && ia.flops_used == ib.flops_used, || "repeat infer differs".into())
}

fn head_hand() -> Outcome {
    let tokens = Tensor::matrix(3, 2, vec![9.0, 9.0, 1.0, 2.0, 9.0, 9.0])?;
    let seq = TokenSeq::new(tokens, 1, vec![Origin::Coarse(0), Origin::Cls, Origin::Coarse(1)])?;
    let w = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0])?;
    let b = Tensor::vector(vec![0.5, -0.5, 0.0]);
    let logits = classify(&seq, &w, &b)?;
    ensure(logits.data() == [1.5, 1.5, 3.0], || format!("{:?}", logits.data()))
}

fn score_spike() -> Outcome {
    let mut rows = vec![vec![0.0f32; 3]; 4];
    rows[2][1] = 10.0;
    let t = Tensor::from_rows(&rows);
    let s = token_score(&t, &t, crate::config::ScoreDirection::Mean, crate::config::ScoreMetric::SoftplusMax)?;
    close(s.data()[2] as f64, 10.0000454, 1e-6, "spike score")?;
    ensure(s.argmax() == 2 && s.data().iter().filter(|&&v| v == s.data()[2]).count() == 1, || {
        "spike not strict max".into()
    })
}

/// Layers whose `y_fwd = y_bwd` rows give softplus-max scores `target`.
fn layer_with_scores(target: &[f64]) -> LayerActivations {
    let rows: Vec<Vec<f32>> = target.iter().map(|&s| vec![(s.exp() - 1.0).ln() as f32, -5.0]).collect();
    let t = Tensor::from_rows(&rows);
    LayerActivations { y_fwd: t.clone(), y_bwd: t }
}

fn ema_hand_fold() -> Outcome {
    let l0 = [1.0, 2.0, 0.5, 3.0, 1.5];
    let l1 = [2.0, 1.0, 0.7, 0.2, 2.5];
    let l2 = [0.4, 3.0, 1.2, 1.0, 0.9];
    let acts = vec![layer_with_scores(&l0), layer_with_scores(&l1), layer_with_scores(&l2)];
    let cfg = ModelConfig {
        depth: 3,
        beta: 0.5,
        score_layer_set: Some(vec![0, 1, 2]),
        ..ModelConfig::tiny()
    };
    let agg = aggregate(&acts, 2, &cfg)?;
    ensure(agg.len() == 4, || format!("length {}", agg.len()))?;
    for (out, t) in [0usize, 1, 3, 4].into_iter().enumerate() {
        let want = 0.5 * (0.5 * l0[t] + 0.5 * l1[t]) + 0.5 * l2[t];
        close(agg.data()[out] as f64, want, 1e-6, "folded score")?;
        ensure(agg.data()[out] > 0.0, || "score not positive".into())?;
    }
    let last = accumulate(&acts, &[0, 1, 2], 0.0, cfg.score_direction, cfg.score_metric)?;
    for t in 0..5 {
        close(last.ema.data()[t] as f64, l2[t], 1e-6, "beta=0 score")?;
    }
    Ok(())
}

fn mapping_coordinates() -> Outcome {
    for h1 in 1..=8 {
        let g = GridMap::new(h1);
        let mut hit = vec![0u8; g.num_fine()];
        for i in 0..g.num_coarse() {
            let got = g.coarse_to_fine(i)?;
            ensure(got == oracle::fine_children(i, h1), || format!("h1={h1} i={i}: {got:?}"))?;
            for f in got {
                hit[f] += 1;
                ensure(g.parent(f)? == i, || format!("parent of {f}"))?;
            }
        }
        ensure(hit.iter().all(|&c| c == 1), || format!("h1={h1}: not a partition"))?;
    }
    Ok(())
}

/// Checks the token-count law for 101 α values on each grid size.
pub fn patch_count_law() -> Outcome {
    ensure(fine_count(0.8, 49) == 169, || format!("got {}", fine_count(0.8, 49)))?;
    for n_c in [1usize, 4, 9, 16, 49] {
        ensure(fine_count(0.0, n_c) == n_c, || format!("alpha=0, N_c={n_c}"))?;
        ensure(fine_count(1.0, n_c) == 4 * n_c, || format!("alpha=1, N_c={n_c}"))?;
        for j in 0..=100 {
            let alpha = j as f64 / 100.0;
            let k = (alpha * n_c as f64 - 1e-9).ceil().max(0.0) as usize;
            let kept = ((1.0 - alpha) * n_c as f64 + 1e-9).floor() as usize;
            let n_f = fine_count(alpha, n_c);
            ensure(n_f == 4 * k + kept, || format!("alpha={alpha} N_c={n_c}: {n_f}"))?;
            let sel = select_informative(&vec![1.0; n_c], alpha);
            ensure(4 * sel.important.len() + sel.unimportant.len() >= n_f, || {
                format!("alpha={alpha} N_c={n_c}: selection smaller than law")
            })?;
        }
    }
    Ok(())
}

fn patch_count() -> Outcome {
    patch_count_law()
}

fn select_hand() -> Outcome {
    let sel = select_informative(&[3.0, 1.0, 2.0], 0.34);
    ensure(sel.important == [0, 2] && sel.unimportant == [1], || format!("{sel:?}"))
}

fn assembly_hand() -> Outcome {
    let grid = GridMap::new(2);
    let fine = Tensor::from_rows(&(0..16).map(|f| vec![100.0 + f as f32]).collect::<Vec<_>>());
    let coarse_tokens = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![2.0], vec![3.0]]);
    let coarse = insert_cls_middle(&Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]), &Tensor::vector(vec![-1.0]))?;
    let coarse = TokenSeq { tokens: coarse_tokens, ..coarse };
    let sel = select_informative(&[0.1, 0.9, 0.2, 0.8], 0.5);
    let seq = assemble_fine_sequence(&fine, &coarse, &sel, &Tensor::vector(vec![-7.0]), grid, Default::default())?;
    let want = [102., 103., 106., 107., -7., 110., 111., 114., 115., 0., 2.];
    ensure(seq.tokens.data() == want, || format!("{:?}", seq.tokens.data()))?;
    ensure(seq.cls_index == 4, || format!("cls at {}", seq.cls_index))?;
    let origins = [
        Origin::Fine(2),
        Origin::Fine(3),
        Origin::Fine(6),
        Origin::Fine(7),
        Origin::Cls,
        Origin::Fine(10),
        Origin::Fine(11),
        Origin::Fine(14),
        Origin::Fine(15),
        Origin::Coarse(0),
        Origin::Coarse(2),
    ];
    ensure(seq.origin == origins, || format!("{:?}", seq.origin))
}

fn reuse_linearization() -> Outcome {
    let d = 4;
    let s = 1e-5f32;
    let eye = |v: f32| Tensor::matrix(d, d, (0..d * d).map(|i| if i % (d + 1) == 0 { v } else { 0.0 }).collect()).unwrap();
    let mlp = ReuseMlp {
        w0: eye(s),
        b0: Tensor::zeros(&[d]),
        w1: eye(1.0 / s),
        b1: Tensor::zeros(&[d]),
    };
    let x = Tensor::matrix(2, d, vec![0.3, -1.2, 2.0, 0.0, 5.0, -0.4, 1.1, -3.0])?;
    let y = mlp.forward(&x)?;
    for (a, b) in y.data().iter().zip(x.data()) {
        close(*a as f64, *b as f64 / 2.0, 1e-3, "linearised reuse")?;
    }
    Ok(())
}

fn reuse_single_patch() -> Outcome {
    let mlp = ReuseMlp {
        w0: Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, -1.0])?,
        b0: Tensor::vector(vec![0.5, 0.0]),
        w1: Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 0.0])?,
        b1: Tensor::vector(vec![0.0, 1.0]),
    };
    let x = Tensor::matrix(1, 2, vec![1.0, 3.0])?;
    // Hidden pre-activation: [1·1 + 3·0 + 0.5, 1·2 + 3·(−1)] = [1.5, −1].
    let g = |v: f64| crate::tensor::gelu(v);
    let (h0, h1) = (g(1.5), g(-1.0));
    let y = mlp.forward(&x)?;
    close(y.data()[0] as f64, h0 + 2.0 * h1, 1e-6, "reuse out[0]")?;
    close(y.data()[1] as f64, h0 + 1.0, 1e-6, "reuse out[1]")
}

fn broadcast_paths() -> Outcome {
    let mut rng = SplitMix64::new(6);
    for h1 in 1..=8 {
        let grid = GridMap::new(h1);
        let t = Tensor::uniform(&[grid.num_coarse(), 5], -1.0, 1.0, &mut rng);
        let a = broadcast_to_fine(&t, grid)?;
        let b = broadcast_to_fine_upsample(&t, grid)?;
        ensure(a == b, || format!("h1={h1}: broadcast paths differ"))?;
        for f in 0..grid.num_fine() {
            let (r, c) = (f / grid.h2, f % grid.h2);
            let parent = (r / 2) * h1 + c / 2;
            ensure(a.row(f) == t.row(parent), || format!("h1={h1} f={f}"))?;
        }
    }
    Ok(())
}

fn fine_seq_for(cfg: &ModelConfig, alpha: f64, seed: u64) -> crate::Result<(TokenSeq, Selection, GridMap)> {
    let mut rng = SplitMix64::new(seed);
    let grid = GridMap::new(cfg.coarse_side());
    let fine = Tensor::uniform(&[grid.num_fine(), cfg.dim], -1.0, 1.0, &mut rng);
    let coarse = insert_cls_middle(
        &Tensor::uniform(&[grid.num_coarse(), cfg.dim], -1.0, 1.0, &mut rng),
        &Tensor::full(&[cfg.dim], 0.25),
    )?;
    let scores: Vec<f32> = (0..grid.num_coarse()).map(|_| rng.next_f64() as f32).collect();
    let sel = select_informative(&scores, alpha);
    let seq = assemble_fine_sequence(&fine, &coarse, &sel, &Tensor::full(&[cfg.dim], 0.25), grid, cfg.order_policy)?;
    Ok((seq, sel, grid))
}

fn fuse_all_ones() -> Outcome {
    let cfg = ModelConfig::tiny();
    let (seq, sel, grid) = fine_seq_for(&cfg, 1.0, 8)?;
    let feats = ReuseFeatures::new(Tensor::full(&[grid.num_fine(), cfg.dim], 1.0), grid, &sel, true)?;
    let fused = mask_and_fuse(&seq, &feats, &sel, grid)?;
    for t in 0..seq.len() {
        let delta = if t == seq.cls_index { 0.0 } else { 1.0 };
        for (a, b) in fused.tokens.row(t).iter().zip(seq.tokens.row(t)) {
            ensure(*a == *b + delta, || format!("token {t}"))?;
        }
    }
    Ok(())
}

/// Fused rows not derived from a selected parent are bit-identical to the
/// input rows, under random features and selections.
pub fn fusion_leaves_unselected(trials: usize) -> Outcome {
    let cfg = ModelConfig::tiny();
    let mut rng = SplitMix64::new(9);
    for trial in 0..trials {
        let alpha = rng.next_f64();
        let (seq, sel, grid) = fine_seq_for(&cfg, alpha, trial as u64)?;
        for mask in [true, false] {
            let feats = ReuseFeatures::new(Tensor::uniform(&[grid.num_fine(), cfg.dim], -3.0, 3.0, &mut rng), grid, &sel, mask)?;
            let fused = mask_and_fuse(&seq, &feats, &sel, grid)?;
            for (t, o) in seq.origin.iter().enumerate() {
                let untouched = match *o {
                    Origin::Fine(f) => !sel.is_important(grid.parent(f)?),
                    _ => true,
                };
                if untouched {
                    let same = fused.tokens.row(t).iter().zip(seq.tokens.row(t)).all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure(same, || format!("trial {trial}: token {t} changed"))?;
                }
            }
        }
    }
    Ok(())
}

fn fuse_leaves_unselected() -> Outcome {
    fusion_leaves_unselected(50)
}

fn coarse_stage_straight_line() -> Outcome {
    let model = lively_model(small_config(), 10.0);
    let mut rng = SplitMix64::new(10);
    for _ in 0..3 {
        let img = random_image(&model.config, &mut rng);
        let got = coarse_stage(&img, &model)?;
        let want = oracle::single_scale(&img, &model, true);
        let gap = oracle::max_abs(&want.logits, got.logits.data());
        ensure(gap <= 1e-5, || format!("logit gap {gap:e}"))?;
        ensure(oracle::max_abs(&want.probs, got.q.data()) <= 1e-5, || "probabilities".into())?;
    }
    Ok(())
}

fn fine_stage_straight_line() -> Outcome {
    let model = lively_model(small_config(), 10.0);
    let mut rng = SplitMix64::new(12);
    for alpha in [0.25, 0.5, 0.75, 1.0] {
        let img = random_image(&model.config, &mut rng);
        let coarse = coarse_stage(&img, &model)?;
        let got = fine_stage(&img, &coarse, &model, alpha)?;
        let trace = oracle::single_scale(&img, &model, true);
        let want = oracle::fine_stage(&img, &model, &trace, alpha);
        let gap = oracle::max_abs(&want.logits, got.logits.data());
        ensure(gap <= 1e-5, || format!("alpha={alpha}: logit gap {gap:e}"))?;
    }
    Ok(())
}

fn route_boundary() -> Outcome {
    let q = Tensor::vector(vec![0.6, 0.4]);
    ensure(route(&q, 0.6) == Route::Accept, || "boundary must accept".into())?;
    ensure(route(&q, 0.600001) == Route::Refine, || "above boundary must refine".into())
}

/// Largest logit gap between the fine stage at `alpha = 1` with zero reuse
/// features and a plain full-fine pass.
pub fn alpha_one_gap(cfg: ModelConfig, scale: f32, images: usize) -> crate::Result<f32> {
    let mut model = lively_model(cfg, scale);
    model.params.reuse = ReuseMlp::zeros(model.config.dim);
    let mut rng = SplitMix64::new(13);
    let mut worst = 0f32;
    for _ in 0..images {
        let img = random_image(&model.config, &mut rng);
        let coarse = coarse_stage(&img, &model)?;
        let fine = fine_stage(&img, &coarse, &model, 1.0)?;
        let direct = full_fine_logits(&img, &model)?;
        worst = worst.max(fine.logits.max_abs_diff(&direct));
    }
    Ok(worst)
}

fn alpha_one_full_fine() -> Outcome {
    let gap = alpha_one_gap(small_config(), 10.0, 3)?;
    ensure(gap <= 1e-5, || format!("logit gap {gap:e}"))?;
    let trace_model = lively_model(small_config(), 10.0);
    let img = random_image(&trace_model.config, &mut SplitMix64::new(14));
    let direct = full_fine_logits(&img, &trace_model)?;
    let want = oracle::single_scale(&img, &trace_model, false);
    let gap = oracle::max_abs(&want.logits, direct.data());
    ensure(gap <= 1e-5, || format!("full-fine vs straight line {gap:e}"))
}

fn synthetic_set(cfg: &ModelConfig, samples: usize, amplitude: f64) -> (Vec<Tensor>, Vec<usize>) {
    let data = DataConfig {
        seed: 21,
        samples,
        amplitude,
    };
    gen_synthetic(cfg, &data).into_iter().map(|s| (s.image, s.label)).unzip()
}

fn flops_monotone_in_eta() -> Outcome {
    let model = routed_model();
    let (images, labels) = synthetic_set(&model.config, 16, 1.0);
    let rows = sweep_eta(&images, &labels, &model, &[0.0, 0.5, 1.0], model.config.alpha)?;
    ensure(rows.windows(2).all(|w| w[0].mean_flops <= w[1].mean_flops), || {
        format!("{:?}", rows.iter().map(|r| r.mean_flops).collect::<Vec<_>>())
    })?;
    let direct: Vec<u64> = images
        .iter()
        .map(|img| infer(img, &model, 0.5, model.config.alpha).map(|o| o.flops_used))
        .collect::<crate::Result<_>>()?;
    close(expected_flops(&direct), rows[1].mean_flops, 1e-6, "sweep vs infer flops")
}

fn loss_hand() -> Outcome {
    let p = Tensor::vector(vec![0.5, 0.5]);
    let q = Tensor::vector(vec![0.9, 0.1]);
    let want = 2f64.ln() + 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    let got = loss(&p, &q, 0)?;
    close(got, want, 1e-6, "loss")?;
    close(got, 1.0612, 1e-3, "loss")
}

/// Minimum KL over `pairs` random distribution pairs (some with zeros).
pub fn min_random_kl(pairs: usize, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..pairs {
        let n = 1 + rng.below(12) as usize;
        let dist = |rng: &mut SplitMix64| {
            let mut raw: Vec<f64> = (0..n).map(|_| if rng.next_f64() < 0.1 { 0.0 } else { rng.next_f64() }).collect();
            raw[0] += 1e-3;
            let s: f64 = raw.iter().sum();
            Tensor::vector(raw.iter().map(|x| (x / s) as f32).collect())
        };
        let p = dist(&mut rng);
        let q = dist(&mut rng);
        worst = worst.min(kl_divergence(&q, &p));
    }
    worst
}

fn kl_nonnegative() -> Outcome {
    let m = min_random_kl(1000, 15);
    // f32 rounding of normalised distributions can push exact zeros a hair negative.
    ensure(m >= -1e-6, || format!("min KL {m}"))
}

fn flops_monotone_in_alpha() -> Outcome {
    for cfg in [ModelConfig::tiny(), ModelConfig::vim_tiny(), small_config()] {
        let n_c = cfg.num_coarse();
        let costs: Vec<u64> = (0..=n_c).map(|j| fine_flops(&cfg, j as f64 / n_c as f64)).collect();
        ensure(costs.windows(2).all(|w| w[0] < w[1]), || "fine cost not increasing in alpha".into())?;
    }
    Ok(())
}

fn flops_mean() -> Outcome {
    close(expected_flops(&[100, 300]), 200.0, 0.0, "50/50 mean")
}

/// Relative gap between 2·(counted multiply-accumulates) and the analytic
/// cost of a coarse and a full-fine pass of the tiny model.
pub fn dynamic_count_gaps() -> crate::Result<(f64, f64)> {
    let mut cfg = ModelConfig::tiny();
    cfg.reuse_enabled = false;
    let model = Model::init(cfg.clone())?;
    let img = random_image(&cfg, &mut SplitMix64::new(16));
    let (coarse, macs_c) = count_macs(|| coarse_stage(&img, &model));
    coarse?;
    let (fine, macs_f) = count_macs(|| full_fine_logits(&img, &model));
    fine?;
    let rel = |macs: u64, analytic: u64| (2.0 * macs as f64 - analytic as f64).abs() / analytic as f64;
    Ok((
        rel(macs_c, coarse_flops(&cfg)),
        rel(macs_f, stage_flops(&cfg, StageKind::Fine { reuse: false }, cfg.num_fine() + 1)),
    ))
}

fn flops_dynamic_count() -> Outcome {
    let (c, f) = dynamic_count_gaps()?;
    ensure(c <= 0.05 && f <= 0.05, || format!("relative gaps coarse {c:.4}, fine {f:.4}"))
}

fn truncation_fuzz() -> Outcome {
    let cfg = small_config();
    let params = EncoderParams::init(&cfg);
    let bytes = params_to_bytes(&params);
    for cut in 0..bytes.len() {
        match decode_tensors(&bytes[..cut]) {
            Err(LoadError::Truncated { offset, needed }) if offset == cut && needed > 0 => {}
            other => return Err(Failure(format!("cut {cut}: {other:?}"))),
        }
    }
    let back = params_from_bytes(&bytes, &cfg)?;
    ensure(params_to_bytes(&back) == bytes, || "roundtrip differs".into())
}

fn sweep_monotone() -> Outcome {
    let model = routed_model();
    let (images, labels) = synthetic_set(&model.config, 32, 1.0);
    let rows = sweep_eta(&images, &labels, &model, &[0.0, 0.5, 1.0], model.config.alpha)?;
    ensure(rows.windows(2).all(|w| w[0].accepted_frac >= w[1].accepted_frac), || {
        format!("{:?}", rows.iter().map(|r| r.accepted_frac).collect::<Vec<_>>())
    })?;
    ensure(rows[0].accepted_frac == 1.0 && rows[2].accepted_frac == 0.0, || "endpoints".into())?;
    let one = infer(&images[0], &model, 1.0, model.config.alpha)?;
    ensure(one.stage == StageTaken::Refined, || "eta=1 must refine".into())
}

fn zero_amplitude_sanity() -> Outcome {
    let cfg = ModelConfig::tiny();
    let (images, labels) = synthetic_set(&cfg, 100, 0.0);
    let model = lively_model(cfg.clone(), 5.0);
    let rows = sweep_eta(&images, &labels, &model, &[0.5], cfg.alpha)?;
    let chance = 1.0 / cfg.num_classes as f64;
    ensure((rows[0].accuracy - chance).abs() <= 0.15, || format!("accuracy {} far from chance", rows[0].accuracy))
}
