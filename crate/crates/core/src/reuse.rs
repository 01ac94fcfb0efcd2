//! Coarse-feature reuse: an MLP over the final coarse tokens, broadcast
//! onto the fine grid and added to the fine-stage input.

use crate::error::{Error, Result};
use crate::geometry::{GridMap, Selection};
use crate::rng::SplitMix64;
use crate::tensor::{gelu, Tensor};
use crate::vim::{Origin, TokenSeq};

/// Two-layer MLP `D → D → D` with a GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct ReuseMlp {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
}

impl ReuseMlp {
    pub fn init(dim: usize, std: f32, rng: &mut SplitMix64) -> Self {
        Self {
            w0: Tensor::gaussian(&[dim, dim], std, rng),
            b0: Tensor::zeros(&[dim]),
            w1: Tensor::gaussian(&[dim, dim], std, rng),
            b1: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            w0: Tensor::zeros(&[dim, dim]),
            b0: Tensor::zeros(&[dim]),
            w1: Tensor::zeros(&[dim, dim]),
            b1: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.w0)?.add_row_vector(&self.b0)?.map(|v| gelu(v as f64) as f32);
        h.matmul(&self.w1)?.add_row_vector(&self.b1)
    }
}

/// Drops CLS from the final coarse sequence and transforms each coarse
/// token. Rows come back in coarse-grid order.
pub fn reuse_transform(z_c: &TokenSeq, mlp: &ReuseMlp) -> Result<Tensor> {
    let n_c = z_c.len() - 1;
    let mut rows = vec![usize::MAX; n_c];
    for (pos, o) in z_c.origin.iter().enumerate() {
        match *o {
            Origin::Coarse(i) if i < n_c => rows[i] = pos,
            Origin::Cls => {}
            other => {
                return Err(Error::SelectionMismatch(format!(
                    "coarse-stage sequence holds unexpected token {other:?}"
                )))
            }
        }
    }
    if rows.contains(&usize::MAX) {
        return Err(Error::SelectionMismatch("coarse-stage sequence is missing grid tokens".into()));
    }
    mlp.forward(&z_c.tokens.gather_rows(&rows)?)
}

/// Row `f` of the result is row `parent(f)` of `transformed`.
pub fn broadcast_to_fine(transformed: &Tensor, grid: GridMap) -> Result<Tensor> {
    if transformed.rank() != 2 || transformed.rows() != grid.num_coarse() {
        return Err(Error::shape("broadcast_to_fine", transformed.dims(), &[grid.num_coarse(), 0]));
    }
    let parents = (0..grid.num_fine())
        .map(|f| grid.parent(f))
        .collect::<Result<Vec<_>>>()?;
    transformed.gather_rows(&parents)
}

/// Same result as [`broadcast_to_fine`], computed as a 2× nearest upsample
/// of the `D×h1×h1` feature map.
pub fn broadcast_to_fine_upsample(transformed: &Tensor, grid: GridMap) -> Result<Tensor> {
    if transformed.rank() != 2 || transformed.rows() != grid.num_coarse() {
        return Err(Error::shape("broadcast_to_fine", transformed.dims(), &[grid.num_coarse(), 0]));
    }
    let dim = transformed.dims()[1];
    let map = transformed.transpose()?.reshape(&[dim, grid.h1, grid.h1])?;
    map.nearest_upsample_2x()?
        .reshape(&[dim, grid.num_fine()])?
        .transpose()
}

/// Reuse features on the fine grid. Rows with `mask == false` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ReuseFeatures {
    pub grid: Tensor,
    pub mask: Vec<bool>,
}

impl ReuseFeatures {
    /// Masks the broadcast features: a fine row survives iff its parent is
    /// selected, or unconditionally when `mask_unselected` is off.
    pub fn new(broadcast: Tensor, grid: GridMap, sel: &Selection, mask_unselected: bool) -> Result<Self> {
        if broadcast.rows() != grid.num_fine() {
            return Err(Error::shape("ReuseFeatures", broadcast.dims(), &[grid.num_fine(), 0]));
        }
        let mut mask = Vec::with_capacity(grid.num_fine());
        let mut feats = broadcast;
        for f in 0..grid.num_fine() {
            let keep = !mask_unselected || sel.is_important(grid.parent(f)?);
            if !keep {
                feats.row_mut(f).iter_mut().for_each(|v| *v = 0.0);
            }
            mask.push(keep);
        }
        Ok(Self { grid: feats, mask })
    }

    /// Features from the final coarse sequence in one call.
    pub fn from_coarse(z_c: &TokenSeq, mlp: &ReuseMlp, grid: GridMap, sel: &Selection, mask_unselected: bool) -> Result<Self> {
        let transformed = reuse_transform(z_c, mlp)?;
        Self::new(broadcast_to_fine(&transformed, grid)?, grid, sel, mask_unselected)
    }
}

/// Adds reuse features to fine tokens whose parent is selected. CLS and
/// retained coarse tokens are left untouched.
pub fn mask_and_fuse(fine_seq: &TokenSeq, feats: &ReuseFeatures, sel: &Selection, grid: GridMap) -> Result<TokenSeq> {
    if feats.grid.rows() != grid.num_fine() || feats.grid.dims()[1] != fine_seq.tokens.dims()[1] {
        return Err(Error::shape("mask_and_fuse", feats.grid.dims(), fine_seq.tokens.dims()));
    }
    let mut out = fine_seq.clone();
    for (pos, o) in fine_seq.origin.iter().enumerate() {
        match *o {
            Origin::Fine(j) => {
                let parent = grid.parent(j)?;
                if !sel.is_important(parent) {
                    return Err(Error::SelectionMismatch(format!(
                        "fine token {j} present but parent {parent} not selected"
                    )));
                }
                if feats.mask[j] {
                    for (t, r) in out.tokens.row_mut(pos).iter_mut().zip(feats.grid.row(j)) {
                        *t += r;
                    }
                }
            }
            Origin::Coarse(i) => {
                if sel.is_important(i) {
                    return Err(Error::SelectionMismatch(format!(
                        "coarse token {i} retained but marked for refinement"
                    )));
                }
            }
            Origin::Cls => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OrderPolicy;
    use crate::geometry::{assemble_fine_sequence, select_informative};
    use crate::vim::insert_cls_middle;

    fn coarse_seq(n_c: usize, dim: usize, rng: &mut SplitMix64) -> TokenSeq {
        insert_cls_middle(&Tensor::gaussian(&[n_c, dim], 1.0, rng), &Tensor::gaussian(&[dim], 1.0, rng)).unwrap()
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let mut rng = SplitMix64::new(1);
        let z = coarse_seq(4, 3, &mut rng);
        let out = reuse_transform(&z, &ReuseMlp::zeros(3)).unwrap();
        assert_eq!(out.dims(), &[4, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_hand_case() {
        // N_c = 1, D = 2; hand matmul through GELU.
        let z = insert_cls_middle(&Tensor::from_rows(&[vec![1.0, -1.0]]), &Tensor::vector(vec![5.0, 5.0])).unwrap();
        let mlp = ReuseMlp {
            w0: Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]),
            b0: Tensor::vector(vec![0.0, 0.5]),
            w1: Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]),
            b1: Tensor::vector(vec![0.1, 0.0]),
        };
        let out = reuse_transform(&z, &mlp).unwrap();
        // hidden pre-activation: [1, 0.5 - 1 + 0.5] = [1, 0]
        let g1 = gelu(1.0);
        let expected = [2.0 * g1 + 0.1, 0.0];
        assert!((out.data()[0] as f64 - expected[0]).abs() < 1e-6);
        assert!((out.data()[1] as f64 - expected[1]).abs() < 1e-6);
    }

    #[test]
    fn small_weight_identity_mlp_is_near_linear() {
        // Identity weights scaled by s, unscaled by 1/s in the second layer:
        // gelu(s·x)/s → x/2 as s → 0, so the output approximates x/2.
        let mut rng = SplitMix64::new(4);
        let z = coarse_seq(4, 3, &mut rng);
        let s = 1e-5f32;
        let eye = |scale: f32| {
            let mut t = Tensor::zeros(&[3, 3]);
            for i in 0..3 {
                t.data_mut()[i * 3 + i] = scale;
            }
            t
        };
        let mlp = ReuseMlp { w0: eye(s), b0: Tensor::zeros(&[3]), w1: eye(1.0 / s), b1: Tensor::zeros(&[3]) };
        let out = reuse_transform(&z, &mlp).unwrap();
        let rows: Vec<usize> = (0..4).map(|i| crate::geometry::remap_cls(i, z.cls_index)).collect();
        let x = z.tokens.gather_rows(&rows).unwrap();
        for (o, xv) in out.data().iter().zip(x.data()) {
            assert!((o - xv / 2.0).abs() < 1e-3, "{o} vs {}", xv / 2.0);
        }
    }

    #[test]
    fn broadcast_single_patch() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let out = broadcast_to_fine(&t, GridMap::new(1)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn broadcast_paths_agree() {
        let mut rng = SplitMix64::new(9);
        for h1 in 1..=8 {
            let g = GridMap::new(h1);
            let t = Tensor::gaussian(&[g.num_coarse(), 5], 1.0, &mut rng);
            let a = broadcast_to_fine(&t, g).unwrap();
            let b = broadcast_to_fine_upsample(&t, g).unwrap();
            assert_eq!(a, b);
            for i in 0..g.num_coarse() {
                for f in g.coarse_to_fine(i).unwrap() {
                    assert_eq!(a.row(f), t.row(i));
                }
            }
        }
        let c = broadcast_to_fine(&Tensor::full(&[4, 2], 3.0), GridMap::new(2)).unwrap();
        assert!(c.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn fuse_masks_and_skips() {
        let mut rng = SplitMix64::new(12);
        let g = GridMap::new(2);
        let dim = 3;
        let z = coarse_seq(4, dim, &mut rng);
        let fine = Tensor::gaussian(&[16, dim], 1.0, &mut rng);
        let sel = select_informative(&[0.1, 0.9, 0.5, 0.2], 0.5);
        let cls = Tensor::zeros(&[dim]);
        let seq = assemble_fine_sequence(&fine, &z, &sel, &cls, g, OrderPolicy::ClsMiddleOfImportant).unwrap();

        let zero = ReuseFeatures::new(Tensor::zeros(&[16, dim]), g, &sel, true).unwrap();
        assert_eq!(mask_and_fuse(&seq, &zero, &sel, g).unwrap(), seq);

        let ones = ReuseFeatures::new(Tensor::full(&[16, dim], 1.0), g, &sel, true).unwrap();
        for f in 0..16 {
            let selected = sel.is_important(g.parent(f).unwrap());
            assert_eq!(ones.mask[f], selected);
            if !selected {
                assert!(ones.grid.row(f).iter().all(|&v| v == 0.0));
            }
        }
        let fused = mask_and_fuse(&seq, &ones, &sel, g).unwrap();
        for (pos, o) in seq.origin.iter().enumerate() {
            let before = seq.tokens.row(pos);
            let after = fused.tokens.row(pos);
            match o {
                Origin::Fine(_) => {
                    for (a, b) in after.iter().zip(before) {
                        assert_eq!(*a, b + 1.0);
                    }
                }
                _ => assert_eq!(after, before),
            }
        }
    }

    #[test]
    fn fuse_rejects_inconsistent_selection() {
        let mut rng = SplitMix64::new(13);
        let g = GridMap::new(2);
        let z = coarse_seq(4, 2, &mut rng);
        let fine = Tensor::gaussian(&[16, 2], 1.0, &mut rng);
        let sel = select_informative(&[0.1, 0.9, 0.5, 0.2], 0.5);
        let seq = assemble_fine_sequence(&fine, &z, &sel, &Tensor::zeros(&[2]), g, OrderPolicy::ClsMiddleOfImportant).unwrap();
        let other = select_informative(&[0.9, 0.1, 0.2, 0.5], 0.5);
        let feats = ReuseFeatures::new(Tensor::zeros(&[16, 2]), g, &other, true).unwrap();
        assert!(matches!(mask_and_fuse(&seq, &feats, &other, g), Err(Error::SelectionMismatch(_))));
    }
}
