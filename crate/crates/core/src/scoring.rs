//! Token importance from SSM activations and its EMA across layers.

use std::collections::BTreeMap;

use crate::config::{EmaOrder, ModelConfig, ScoreDirection, ScoreMetric};
use crate::error::{Error, Result};
use crate::tensor::{softplus, Tensor};
use crate::vim::LayerActivations;

/// Per-token score of one layer.
///
/// The default metric is `max_d softplus(ŷ[t, d])`, where `ŷ` is the forward
/// output, the (token-aligned) backward output, or their mean.
pub fn token_score(y_fwd: &Tensor, y_bwd: &Tensor, direction: ScoreDirection, metric: ScoreMetric) -> Result<Tensor> {
    if y_fwd.dims() != y_bwd.dims() || y_fwd.rank() != 2 {
        return Err(Error::shape("token_score", y_fwd.dims(), y_bwd.dims()));
    }
    let (len, inner) = (y_fwd.dims()[0], y_fwd.dims()[1]);
    let mut scores = Vec::with_capacity(len);
    let mut chan = vec![0f64; inner];
    for t in 0..len {
        for (d, c) in chan.iter_mut().enumerate() {
            let f = y_fwd.row(t)[d] as f64;
            let b = y_bwd.row(t)[d] as f64;
            *c = match direction {
                ScoreDirection::Forward => f,
                ScoreDirection::Backward => b,
                ScoreDirection::Mean => 0.5 * (f + b),
            };
        }
        let s = match metric {
            ScoreMetric::SoftplusMax => chan.iter().map(|&v| softplus(v)).fold(f64::NEG_INFINITY, f64::max),
            ScoreMetric::L2Norm => chan.iter().map(|v| v * v).sum::<f64>().sqrt(),
            ScoreMetric::TopKMean { k } => {
                let mut sp: Vec<f64> = chan.iter().map(|&v| softplus(v)).collect();
                sp.sort_by(|a, b| b.total_cmp(a));
                let k = k.clamp(1, inner);
                sp[..k].iter().sum::<f64>() / k as f64
            }
        };
        scores.push(s as f32);
    }
    Ok(Tensor::vector(scores))
}

/// `ā = β·prev + (1−β)·cur`, elementwise.
pub fn ema_update(prev: &Tensor, cur: &Tensor, beta: f64) -> Result<Tensor> {
    if prev.dims() != cur.dims() {
        return Err(Error::shape("ema_update", prev.dims(), cur.dims()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("EMA factor {beta} outside [0, 1]")));
    }
    let data = prev
        .data()
        .iter()
        .zip(cur.data())
        .map(|(&p, &c)| (beta * p as f64 + (1.0 - beta) * c as f64) as f32)
        .collect();
    Ok(Tensor::vector(data))
}

/// Scores kept for every participating layer plus the running EMA.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState {
    pub beta: f64,
    /// Participating layers in fold order.
    pub layer_set: Vec<usize>,
    /// Per-token EMA over the full sequence (CLS included).
    pub ema: Tensor,
    pub per_layer: BTreeMap<usize, Tensor>,
}

impl ImportanceState {
    /// Per-coarse-patch scores: the EMA with the CLS entry removed.
    pub fn without_cls(&self, cls_index: usize) -> Tensor {
        let data = self
            .ema
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != cls_index)
            .map(|(_, &v)| v)
            .collect();
        Tensor::vector(data)
    }
}

/// Orders the configured layer set for folding.
pub fn fold_order(cfg: &ModelConfig) -> Vec<usize> {
    let mut layers = cfg.participating_layers();
    layers.sort_unstable();
    layers.dedup();
    if cfg.ema_order == EmaOrder::DeepToShallow {
        layers.reverse();
    }
    layers
}

/// Folds [`ema_update`] over `layers` (already in fold order). The first
/// layer initialises the accumulator.
pub fn accumulate(
    activations: &[LayerActivations],
    layers: &[usize],
    beta: f64,
    direction: ScoreDirection,
    metric: ScoreMetric,
) -> Result<ImportanceState> {
    let (&first, rest) = layers.split_first().ok_or(Error::EmptyLayerSet)?;
    let score = |l: usize| -> Result<Tensor> {
        let a = activations.get(l).ok_or(Error::Index {
            what: "encoder layer",
            index: l,
            len: activations.len(),
        })?;
        token_score(&a.y_fwd, &a.y_bwd, direction, metric)
    };
    let mut per_layer = BTreeMap::new();
    let mut ema = score(first)?;
    per_layer.insert(first, ema.clone());
    for &l in rest {
        let cur = score(l)?;
        ema = ema_update(&ema, &cur, beta)?;
        per_layer.insert(l, cur);
    }
    Ok(ImportanceState {
        beta,
        layer_set: layers.to_vec(),
        ema,
        per_layer,
    })
}

/// Aggregated per-coarse-patch importance (length `N_c`) from a coarse pass.
pub fn aggregate(activations: &[LayerActivations], cls_index: usize, cfg: &ModelConfig) -> Result<Tensor> {
    let state = accumulate(activations, &fold_order(cfg), cfg.beta, cfg.score_direction, cfg.score_metric)?;
    if cls_index >= state.ema.len() {
        return Err(Error::Index {
            what: "score vector",
            index: cls_index,
            len: state.ema.len(),
        });
    }
    Ok(state.without_cls(cls_index))
}
