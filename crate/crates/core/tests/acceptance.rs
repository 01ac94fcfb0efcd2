//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::time::{Duration, Instant};

use coarse2fine::config::{DataConfig, ScoreDirection, ScoreMetric};
use coarse2fine::flops::{stage_flops, StageKind};
use coarse2fine::geometry::GridMap;
use coarse2fine::oracle;
use coarse2fine::pipeline::{coarse_stage, infer, loss, sweep_eta};
use coarse2fine::reuse::{broadcast_to_fine, broadcast_to_fine_upsample};
use coarse2fine::rng::SplitMix64;
use coarse2fine::scoring::{accumulate, aggregate, fold_order, token_score};
use coarse2fine::selftest::{self, lively_model};
use coarse2fine::synth::gen_synthetic;
use coarse2fine::vim::LayerActivations;
use coarse2fine::weights::{load_weights, params_to_bytes, save_weights};
use coarse2fine::{Model, ModelConfig, Tensor};

type Verdict = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Verdict {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn scan_equivalence() -> Verdict {
    let start = Instant::now();
    let gap = selftest::scan_kernel_max_diff(2024, 100).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let msg = format!("100 cases, max gap {gap:.2e}, {:.2} s", took.as_secs_f64());
    check(gap <= 1e-4 && took < Duration::from_secs(5), msg.clone(), msg)
}

fn index_mapping() -> Verdict {
    let start = Instant::now();
    for h1 in 1..=8 {
        let g = GridMap::new(h1);
        let mut hits = vec![0u32; g.num_fine()];
        for i in 0..g.num_coarse() {
            let got = g.coarse_to_fine(i).map_err(|e| e.to_string())?;
            if got != oracle::fine_children(i, h1) {
                return Err(format!("h1={h1} i={i}: {got:?}"));
            }
            for f in got {
                hits[f] += 1;
            }
        }
        if hits.iter().any(|&h| h != 1) {
            return Err(format!("h1={h1}: fine grid not partitioned"));
        }
    }
    let took = start.elapsed();
    let msg = format!("h1 = 1..8 bijective, {:.3} s", took.as_secs_f64());
    check(took < Duration::from_secs(1), msg.clone(), msg)
}

fn patch_count() -> Verdict {
    selftest::patch_count_law()
        .map(|_| "101 alphas x N_c in {1,4,9,16,49}; (0.8, 49) -> 169".to_string())
        .map_err(|f| f.0)
}

fn flops_ratio() -> Verdict {
    let cfg = ModelConfig::vim_tiny();
    let coarse = stage_flops(&cfg, StageKind::Coarse, 50) as f64;
    let fine = stage_flops(&cfg, StageKind::Fine { reuse: false }, 197) as f64;
    let ratio = coarse / fine;
    let (gc, gf) = selftest::dynamic_count_gaps().map_err(|e| e.to_string())?;
    let msg = format!(
        "coarse {:.2} GFLOPs / fine {:.2} GFLOPs = {ratio:.3}; counted vs analytic gap {:.1}% / {:.1}%",
        coarse / 1e9,
        fine / 1e9,
        gc * 100.0,
        gf * 100.0
    );
    check((0.24..=0.30).contains(&ratio) && gc <= 0.05 && gf <= 0.05, msg.clone(), msg)
}

fn routing() -> Verdict {
    let model = selftest::routed_model();
    let data = DataConfig {
        seed: 7,
        samples: 256,
        amplitude: 1.0,
    };
    let (images, labels): (Vec<Tensor>, Vec<usize>) =
        gen_synthetic(&model.config, &data).into_iter().map(|s| (s.image, s.label)).unzip();
    let etas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let rows = sweep_eta(&images, &labels, &model, &etas, model.config.alpha).map_err(|e| e.to_string())?;
    let fracs: Vec<f64> = rows.iter().map(|r| r.accepted_frac).collect();
    let msg = format!("accepted fraction at eta {etas:?}: {fracs:?}");
    let ok = fracs.windows(2).all(|w| w[0] >= w[1]) && fracs[0] == 1.0 && fracs[4] == 0.0;
    check(ok, msg.clone(), msg)
}

fn reuse_masking() -> Verdict {
    selftest::fusion_leaves_unselected(200).map_err(|f| f.0)?;
    let mut rng = SplitMix64::new(31);
    for h1 in 1..=8 {
        let grid = GridMap::new(h1);
        let t = Tensor::uniform(&[grid.num_coarse(), 16], -4.0, 4.0, &mut rng);
        let a = broadcast_to_fine(&t, grid).map_err(|e| e.to_string())?;
        let b = broadcast_to_fine_upsample(&t, grid).map_err(|e| e.to_string())?;
        if !a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            return Err(format!("h1={h1}: broadcast paths differ"));
        }
    }
    Ok("unselected tokens bit-identical over 200 trials; broadcast paths bit-exact for h1 = 1..8".into())
}

fn alpha_one() -> Verdict {
    let gap = selftest::alpha_one_gap(ModelConfig::tiny(), 5.0, 4).map_err(|e| e.to_string())?;
    let msg = format!("max logit gap {gap:.2e}");
    check(gap <= 1e-5, msg.clone(), msg)
}

fn scored(scores: &[f64]) -> LayerActivations {
    let rows: Vec<Vec<f32>> = scores.iter().map(|&s| vec![(s.exp() - 1.0).ln() as f32, -3.0]).collect();
    let t = Tensor::from_rows(&rows);
    LayerActivations { y_fwd: t.clone(), y_bwd: t }
}

fn ema_scoring() -> Verdict {
    let layers = [[0.5, 1.5, 2.0], [2.5, 0.25, 1.0], [1.0, 3.0, 0.75]];
    let acts: Vec<LayerActivations> = layers.iter().map(|l| scored(l)).collect();
    let state = accumulate(&acts, &[0, 1, 2], 0.5, ScoreDirection::Mean, ScoreMetric::SoftplusMax)
        .map_err(|e| e.to_string())?;
    for t in 0..3 {
        let want = 0.5 * (0.5 * layers[0][t] + 0.5 * layers[1][t]) + 0.5 * layers[2][t];
        let got = state.ema.data()[t] as f64;
        if (got - want).abs() > 1e-6 {
            return Err(format!("hand fold token {t}: {got} vs {want}"));
        }
    }

    let model = lively_model(ModelConfig::tiny(), 5.0);
    let img = Tensor::uniform(&[3, 64, 64], -1.0, 1.0, &mut SplitMix64::new(5));
    let coarse = coarse_stage(&img, &model).map_err(|e| e.to_string())?;
    let cfg = ModelConfig { beta: 0.0, ..model.config.clone() };
    let agg = aggregate(&coarse.activations, coarse.z_c.cls_index, &cfg).map_err(|e| e.to_string())?;
    let last = *fold_order(&cfg).last().unwrap();
    let a = &coarse.activations[last];
    let want = token_score(&a.y_fwd, &a.y_bwd, cfg.score_direction, cfg.score_metric).map_err(|e| e.to_string())?;
    let want: Vec<f32> = want
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != coarse.z_c.cls_index)
        .map(|(_, &v)| v)
        .collect();
    if agg.data() != want.as_slice() {
        return Err(format!("beta=0 differs from layer {last}"));
    }
    let full = aggregate(&coarse.activations, coarse.z_c.cls_index, &model.config).map_err(|e| e.to_string())?;
    let n_c = model.config.num_coarse();
    let msg = format!("hand fold within 1e-6; beta=0 equals layer {last}; {} scores, min {:.4}", full.len(), full.data().iter().cloned().fold(f32::INFINITY, f32::min));
    check(full.len() == n_c && full.data().iter().all(|&s| s > 0.0), msg.clone(), msg)
}

fn loss_evaluator() -> Verdict {
    let l = loss(&Tensor::vector(vec![0.5, 0.5]), &Tensor::vector(vec![0.9, 0.1]), 0).map_err(|e| e.to_string())?;
    let min_kl = selftest::min_random_kl(1000, 99);
    let msg = format!("hand case {l:.5}; min KL over 1000 pairs {min_kl:.3e}");
    check((l - 1.0612).abs() <= 1e-3 && min_kl >= 0.0, msg.clone(), msg)
}

fn determinism_and_format() -> Verdict {
    let results = selftest::run_all();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        return Err(format!("selftest failures: {failed:?}"));
    }

    let cfg = ModelConfig::tiny();
    let model = Model::init(cfg.clone()).map_err(|e| e.to_string())?;
    let dir = std::env::temp_dir().join(format!("c2f-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("tiny.mscp");
    save_weights(&model.params, &path).map_err(|e| e.to_string())?;
    let back = load_weights(&path, &cfg).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    if params_to_bytes(&back) != params_to_bytes(&model.params) {
        return Err("weight roundtrip not bit-exact".into());
    }

    let img = Tensor::uniform(&[3, 64, 64], -1.0, 1.0, &mut SplitMix64::new(1));
    let mut worst = Duration::ZERO;
    for _ in 0..3 {
        let start = Instant::now();
        infer(&img, &model, 1.0, cfg.alpha).map_err(|e| e.to_string())?;
        worst = worst.max(start.elapsed());
    }
    let msg = format!(
        "{} selftest checks green; roundtrip bit-exact; tiny two-stage infer {:.1} ms/image",
        results.len(),
        worst.as_secs_f64() * 1e3
    );
    check(worst < Duration::from_secs(1), msg.clone(), msg)
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("scan equivalence", scan_equivalence),
        ("index mapping", index_mapping),
        ("patch-count law", patch_count),
        ("FLOPs ratio", flops_ratio),
        ("routing behaviour", routing),
        ("reuse masking", reuse_masking),
        ("alpha = 1 oracle", alpha_one),
        ("EMA and scoring", ema_scoring),
        ("loss evaluator", loss_evaluator),
        ("determinism and format", determinism_and_format),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
