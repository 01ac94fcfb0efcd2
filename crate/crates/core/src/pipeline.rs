//! Two-stage inference: coarse pass, confidence routing, then an optional
//! fine pass over the most informative coarse patches.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flops::{coarse_flops, stage_flops, StageKind};
use crate::geometry::{assemble_fine_sequence, select_informative, selected_count, GridMap, Selection};
use crate::reuse::{mask_and_fuse, ReuseFeatures};
use crate::scoring::aggregate;
use crate::tensor::{softmax, Tensor};
use crate::vim::{
    classify, encode, insert_cls_middle, insert_cls_middle_as, patch_embed_coarse, patch_embed_fine,
    EncoderParams, LayerActivations, Origin, Stage, TokenSeq,
};

/// A configuration bound to its parameters. Both stages read `params`.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: EncoderParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        let expected = EncoderParams::zeros(&config);
        let have = params.named_tensors();
        let want = expected.named_tensors();
        if have.len() != want.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config implies {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, t), (_, w)) in have.iter().zip(&want) {
            if t.dims() != w.dims() {
                return Err(Error::shape("Model::new", t.dims(), w.dims()));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("parameter {name} has non-finite entries")));
            }
        }
        Ok(Self { config, params })
    }

    /// Seeded initialisation from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = EncoderParams::init(&config);
        Self::new(config, params)
    }

    pub fn grid(&self) -> GridMap {
        GridMap::new(self.config.coarse_side())
    }

    pub fn coarse_params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn fine_params(&self) -> &EncoderParams {
        &self.params
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.image_size, c.image_size];
        if image.dims() != want {
            return Err(Error::shape("image", image.dims(), &want));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CoarseOutput {
    pub logits: Tensor,
    pub q: Tensor,
    pub activations: Vec<LayerActivations>,
    /// Final coarse-stage sequence, `N_c + 1` tokens.
    pub z_c: TokenSeq,
}

pub fn coarse_stage(image: &Tensor, model: &Model) -> Result<CoarseOutput> {
    model.check_image(image)?;
    let params = model.coarse_params();
    let tokens = patch_embed_coarse(image, model.config.fine_patch, &params.patch_embed)?;
    let seq = insert_cls_middle(&tokens, &params.cls)?;
    let (z_c, activations) = encode(&seq, params, Stage::Coarse)?;
    let logits = classify(&z_c, &params.head_w, &params.head_b)?;
    let q = softmax(&logits)?;
    Ok(CoarseOutput {
        logits,
        q,
        activations,
        z_c,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Accept,
    Refine,
}

/// Accepts iff `max(q) ≥ η`.
pub fn route(q: &Tensor, eta: f64) -> Route {
    let conf = q.data()[q.argmax()] as f64;
    if conf >= eta {
        Route::Accept
    } else {
        Route::Refine
    }
}

#[derive(Clone, Debug)]
pub struct FineOutput {
    pub logits: Tensor,
    pub p: Tensor,
    pub selection: Selection,
    /// Fine-stage sequence length including CLS.
    pub seq_len: usize,
}

/// Builds the fused fine-stage input sequence without encoding it.
pub fn fine_input(image: &Tensor, coarse: &CoarseOutput, model: &Model, alpha: f64) -> Result<(TokenSeq, Selection)> {
    model.check_image(image)?;
    let cfg = &model.config;
    let params = model.fine_params();
    let grid = model.grid();
    if selected_count(alpha, grid.num_coarse()) == 0 {
        return Err(Error::Domain("fine stage needs at least one selected patch (alpha > 0)".into()));
    }
    let scores = aggregate(&coarse.activations, coarse.z_c.cls_index, cfg)?;
    let sel = select_informative(scores.data(), alpha);
    let fine_tokens = patch_embed_fine(image, cfg.fine_patch, &params.patch_embed)?;
    let seq = assemble_fine_sequence(&fine_tokens, &coarse.z_c, &sel, &params.cls, grid, cfg.order_policy)?;
    let seq = if cfg.reuse_enabled {
        let feats = ReuseFeatures::from_coarse(&coarse.z_c, &params.reuse, grid, &sel, cfg.reuse_mask_unselected)?;
        mask_and_fuse(&seq, &feats, &sel, grid)?
    } else {
        seq
    };
    Ok((seq, sel))
}

pub fn fine_stage(image: &Tensor, coarse: &CoarseOutput, model: &Model, alpha: f64) -> Result<FineOutput> {
    let (seq, selection) = fine_input(image, coarse, model, alpha)?;
    let params = model.fine_params();
    let (out, _) = encode(&seq, params, Stage::Fine)?;
    let logits = classify(&out, &params.head_w, &params.head_b)?;
    let p = softmax(&logits)?;
    Ok(FineOutput {
        logits,
        p,
        selection,
        seq_len: seq.len(),
    })
}

/// Plain single-resolution forward pass over the full fine grid, CLS in the
/// middle. Reference path for the fine stage at `alpha = 1`.
pub fn full_fine_logits(image: &Tensor, model: &Model) -> Result<Tensor> {
    model.check_image(image)?;
    let params = &model.params;
    let tokens = patch_embed_fine(image, model.config.fine_patch, &params.patch_embed)?;
    let seq = insert_cls_middle_as(&tokens, &params.cls, Origin::Fine)?;
    let (out, _) = encode(&seq, params, Stage::Fine)?;
    classify(&out, &params.head_w, &params.head_b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StageTaken {
    CoarseAccepted,
    Refined,
}

#[derive(Clone, Debug)]
pub struct RoutingOutcome {
    pub stage: StageTaken,
    pub q: Tensor,
    pub p: Option<Tensor>,
    pub predicted: usize,
    /// Coarse-stage confidence `max(q)`.
    pub confidence: f32,
    pub selected: Option<Selection>,
    pub flops_used: u64,
}

/// Full two-stage inference for one image.
///
/// With `alpha` so small that no patch would be refined the fine stage is
/// skipped and the coarse prediction is returned whatever its confidence.
pub fn infer(image: &Tensor, model: &Model, eta: f64, alpha: f64) -> Result<RoutingOutcome> {
    let coarse = coarse_stage(image, model)?;
    let coarse_pred = coarse.q.argmax();
    let confidence = coarse.q.data()[coarse_pred];
    let mut flops = coarse_flops(&model.config);
    let refine = route(&coarse.q, eta) == Route::Refine && selected_count(alpha, model.config.num_coarse()) > 0;
    if !refine {
        return Ok(RoutingOutcome {
            stage: StageTaken::CoarseAccepted,
            q: coarse.q,
            p: None,
            predicted: coarse_pred,
            confidence,
            selected: None,
            flops_used: flops,
        });
    }
    let fine = fine_stage(image, &coarse, model, alpha)?;
    flops += stage_flops(
        &model.config,
        StageKind::Fine {
            reuse: model.config.reuse_enabled,
        },
        fine.seq_len,
    );
    Ok(RoutingOutcome {
        stage: StageTaken::Refined,
        predicted: fine.p.argmax(),
        q: coarse.q,
        p: Some(fine.p),
        confidence,
        selected: Some(fine.selection),
        flops_used: flops,
    })
}

/// Runs [`infer`] over a batch in parallel; results keep input order.
pub fn infer_batch(images: &[Tensor], model: &Model, eta: f64, alpha: f64) -> Result<Vec<RoutingOutcome>> {
    images.par_iter().map(|img| infer(img, model, eta, alpha)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub eta: f64,
    pub accepted_frac: f64,
    pub mean_flops: f64,
    pub accuracy: f64,
}

/// Routing statistics of `images` for every threshold in `etas`.
///
/// Each image runs the coarse stage once and the fine stage at most once;
/// the row for a given η is what [`infer`] would report at that η.
pub fn sweep_eta(images: &[Tensor], labels: &[usize], model: &Model, etas: &[f64], alpha: f64) -> Result<Vec<SweepRow>> {
    if images.len() != labels.len() {
        return Err(Error::shape("sweep labels", &[labels.len()], &[images.len()]));
    }
    let max_eta = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let can_refine = selected_count(alpha, model.config.num_coarse()) > 0;
    let coarse_cost = coarse_flops(&model.config);
    // (coarse confidence, coarse prediction, fine prediction and cost)
    type Routed = (f64, usize, Option<(usize, u64)>);
    let per_image: Vec<Routed> = images
        .par_iter()
        .map(|img| {
            let coarse = coarse_stage(img, model)?;
            let pred = coarse.q.argmax();
            let conf = coarse.q.data()[pred] as f64;
            let fine = if can_refine && conf < max_eta {
                let f = fine_stage(img, &coarse, model, alpha)?;
                let kind = StageKind::Fine {
                    reuse: model.config.reuse_enabled,
                };
                Some((f.p.argmax(), stage_flops(&model.config, kind, f.seq_len)))
            } else {
                None
            };
            Ok((conf, pred, fine))
        })
        .collect::<Result<_>>()?;

    let n = images.len().max(1) as f64;
    Ok(etas
        .iter()
        .map(|&eta| {
            let (mut accepted, mut flops, mut correct) = (0usize, 0f64, 0usize);
            for ((conf, pred, fine), &label) in per_image.iter().zip(labels) {
                let (p, cost) = match fine {
                    Some((fp, fc)) if *conf < eta => (*fp, coarse_cost + fc),
                    _ => {
                        accepted += 1;
                        (*pred, coarse_cost)
                    }
                };
                flops += cost as f64;
                correct += usize::from(p == label);
            }
            SweepRow {
                eta,
                accepted_frac: accepted as f64 / n,
                mean_flops: flops / n,
                accuracy: correct as f64 / n,
            }
        })
        .collect())
}

const PROB_FLOOR: f64 = 1e-12;

/// `−ln p_label + KL(q ‖ p)` with `0·ln 0 = 0` and `p` clamped at 1e-12.
pub fn loss(p: &Tensor, q: &Tensor, label: usize) -> Result<f64> {
    if p.dims() != q.dims() {
        return Err(Error::shape("loss", p.dims(), q.dims()));
    }
    if label >= p.len() {
        return Err(Error::Index {
            what: "label",
            index: label,
            len: p.len(),
        });
    }
    let ce = -(p.data()[label] as f64).max(PROB_FLOOR).ln();
    Ok(ce + kl_divergence(q, p))
}

/// `Σ_c q_c ln(q_c / p_c)`.
pub fn kl_divergence(q: &Tensor, p: &Tensor) -> f64 {
    q.data()
        .iter()
        .zip(p.data())
        .filter(|(&qc, _)| qc > 0.0)
        .map(|(&qc, &pc)| {
            let qc = qc as f64;
            qc * (qc / (pc as f64).max(PROB_FLOOR)).ln()
        })
        .sum()
}
