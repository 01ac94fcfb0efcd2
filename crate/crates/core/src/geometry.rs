//! Grid arithmetic between the coarse and fine patch grids, top-α
//! selection, and assembly of the mixed fine-stage sequence.

use crate::config::OrderPolicy;
use crate::error::{Error, Result};
use crate::tensor::{argsort_desc, Tensor};
use crate::vim::{Origin, TokenSeq};

/// Coarse grid side `h1` and fine grid side `h2 = 2·h1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridMap {
    pub h1: usize,
    pub h2: usize,
}

impl GridMap {
    pub fn new(h1: usize) -> Self {
        Self { h1, h2: 2 * h1 }
    }

    pub fn num_coarse(&self) -> usize {
        self.h1 * self.h1
    }

    pub fn num_fine(&self) -> usize {
        self.h2 * self.h2
    }

    /// The four fine indices covering coarse patch `i`, in row-major order:
    /// `I₁ = 4i − 2y` with `y = i mod h1`, `I₂ = I₁+1`, `I₃ = I₁+h2`, `I₄ = I₃+1`.
    pub fn coarse_to_fine(&self, i: usize) -> Result<[usize; 4]> {
        if i >= self.num_coarse() {
            return Err(Error::Index {
                what: "coarse grid",
                index: i,
                len: self.num_coarse(),
            });
        }
        let y = i % self.h1;
        let i1 = 4 * i - 2 * y;
        let i3 = i1 + self.h2;
        Ok([i1, i1 + 1, i3, i3 + 1])
    }

    /// Coarse patch containing fine index `f`.
    pub fn parent(&self, f: usize) -> Result<usize> {
        if f >= self.num_fine() {
            return Err(Error::Index {
                what: "fine grid",
                index: f,
                len: self.num_fine(),
            });
        }
        let (r, c) = (f / self.h2, f % self.h2);
        Ok((r / 2) * self.h1 + c / 2)
    }
}

/// Sequence position of grid index `g` once CLS sits at `cls_index`.
pub fn remap_cls(g: usize, cls_index: usize) -> usize {
    if g < cls_index {
        g
    } else {
        g + 1
    }
}

// α·N products like 0.07·100 land a hair above the integer; snap them.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// `k = ⌈α·N_c⌉`, the number of coarse patches promoted to fine resolution.
pub fn selected_count(alpha: f64, n_c: usize) -> usize {
    (snap(alpha * n_c as f64).ceil() as usize).min(n_c)
}

/// Token count after refinement, `4·⌈α·N_c⌉ + ⌊(1−α)·N_c⌋` (CLS excluded).
pub fn fine_count(alpha: f64, n_c: usize) -> usize {
    let kept = snap((1.0 - alpha) * n_c as f64).floor() as usize;
    4 * selected_count(alpha, n_c) + kept
}

/// Partition of the coarse grid into refined and retained patches. Both
/// halves are sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub important: Vec<usize>,
    pub unimportant: Vec<usize>,
}

impl Selection {
    pub fn num_coarse(&self) -> usize {
        self.important.len() + self.unimportant.len()
    }

    pub fn is_important(&self, i: usize) -> bool {
        self.important.binary_search(&i).is_ok()
    }

    /// Checks sortedness, disjointness and coverage of `[0, n_c)`.
    pub fn validate(&self, n_c: usize) -> Result<()> {
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.important) || !sorted(&self.unimportant) {
            return Err(Error::SelectionMismatch("index lists must be strictly ascending".into()));
        }
        let mut seen = vec![false; n_c];
        for &i in self.important.iter().chain(&self.unimportant) {
            match seen.get_mut(i) {
                None => {
                    return Err(Error::SelectionMismatch(format!(
                        "coarse index {i} outside grid of {n_c}"
                    )))
                }
                Some(s) if *s => {
                    return Err(Error::SelectionMismatch(format!("coarse index {i} selected twice")))
                }
                Some(s) => *s = true,
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::SelectionMismatch(format!("coarse index {i} not covered")));
        }
        Ok(())
    }
}

/// Keeps the `⌈α·N_c⌉` highest-scoring coarse patches (ties go to the lower index).
pub fn select_informative(scores: &[f32], alpha: f64) -> Selection {
    let k = selected_count(alpha, scores.len());
    let policy = argsort_desc(scores);
    let mut important = policy[..k].to_vec();
    let mut unimportant = policy[k..].to_vec();
    important.sort_unstable();
    unimportant.sort_unstable();
    Selection {
        important,
        unimportant,
    }
}

/// Builds the fine-stage input sequence.
///
/// Fine tokens of every selected coarse patch are gathered in ascending fine
/// index; CLS is placed per `policy`; retained coarse patches contribute
/// their final coarse-stage token, looked up through the coarse sequence's
/// CLS offset.
pub fn assemble_fine_sequence(
    fine_tokens: &Tensor,
    coarse_final: &TokenSeq,
    sel: &Selection,
    cls: &Tensor,
    grid: GridMap,
    policy: OrderPolicy,
) -> Result<TokenSeq> {
    let n_c = grid.num_coarse();
    sel.validate(n_c)?;
    if fine_tokens.rank() != 2 || fine_tokens.rows() != grid.num_fine() {
        return Err(Error::shape("assemble fine tokens", fine_tokens.dims(), &[grid.num_fine(), cls.len()]));
    }
    if coarse_final.len() != n_c + 1 {
        return Err(Error::SelectionMismatch(format!(
            "coarse sequence has {} tokens, expected {}",
            coarse_final.len(),
            n_c + 1
        )));
    }
    let dim = fine_tokens.dims()[1];
    if cls.len() != dim || coarse_final.tokens.dims()[1] != dim {
        return Err(Error::shape("assemble width", fine_tokens.dims(), coarse_final.tokens.dims()));
    }

    let mut imp_fine = Vec::with_capacity(4 * sel.important.len());
    for &i in &sel.important {
        imp_fine.extend(grid.coarse_to_fine(i)?);
    }
    imp_fine.sort_unstable();
    let imp_tokens = fine_tokens.gather_rows(&imp_fine)?;
    let imp_origin: Vec<Origin> = imp_fine.iter().map(|&f| Origin::Fine(f)).collect();

    let unimp_rows: Vec<usize> = sel
        .unimportant
        .iter()
        .map(|&i| remap_cls(i, coarse_final.cls_index))
        .collect();
    let unimp_tokens = coarse_final.tokens.gather_rows(&unimp_rows)?;
    let unimp_origin: Vec<Origin> = sel.unimportant.iter().map(|&i| Origin::Coarse(i)).collect();

    let cls_row = cls.reshape(&[1, dim])?;
    let m = imp_fine.len() / 2;
    let head = imp_tokens.slice_rows(0, m)?;
    let tail = imp_tokens.slice_rows(m, imp_fine.len())?;

    let (parts, origin, cls_index): (Vec<&Tensor>, Vec<Origin>, usize) = match policy {
        OrderPolicy::ClsMiddleOfImportant => (
            vec![&head, &cls_row, &tail, &unimp_tokens],
            [&imp_origin[..m], &[Origin::Cls], &imp_origin[m..], &unimp_origin].concat(),
            m,
        ),
        OrderPolicy::ClsBeforeImportant => (
            vec![&cls_row, &imp_tokens, &unimp_tokens],
            [&[Origin::Cls][..], &imp_origin, &unimp_origin].concat(),
            0,
        ),
        OrderPolicy::ClsAfterImportant => (
            vec![&imp_tokens, &cls_row, &unimp_tokens],
            [&imp_origin[..], &[Origin::Cls], &unimp_origin].concat(),
            imp_fine.len(),
        ),
        OrderPolicy::UnimportantFirst => (
            vec![&unimp_tokens, &head, &cls_row, &tail],
            [&unimp_origin[..], &imp_origin[..m], &[Origin::Cls], &imp_origin[m..]].concat(),
            unimp_origin.len() + m,
        ),
    };
    let tokens = Tensor::concat_rows(&parts)?;
    TokenSeq::new(tokens, cls_index, origin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coord_oracle(i: usize, h1: usize) -> [usize; 4] {
        let (r, y) = (i / h1, i % h1);
        let h2 = 2 * h1;
        let f = |rr: usize, cc: usize| rr * h2 + cc;
        [f(2 * r, 2 * y), f(2 * r, 2 * y + 1), f(2 * r + 1, 2 * y), f(2 * r + 1, 2 * y + 1)]
    }

    #[test]
    fn mapping_examples() {
        let g = GridMap::new(7);
        assert_eq!(g.coarse_to_fine(0).unwrap(), [0, 1, 14, 15]);
        assert_eq!(g.coarse_to_fine(8).unwrap(), [30, 31, 44, 45]);
        assert_eq!(GridMap::new(1).coarse_to_fine(0).unwrap(), [0, 1, 2, 3]);
        assert!(matches!(g.coarse_to_fine(49), Err(Error::Index { .. })));
    }

    #[test]
    fn mapping_matches_coordinates_and_parent() {
        for h1 in 1..=8 {
            let g = GridMap::new(h1);
            for i in 0..g.num_coarse() {
                let fine = g.coarse_to_fine(i).unwrap();
                assert_eq!(fine, coord_oracle(i, h1));
                for f in fine {
                    assert_eq!(g.parent(f).unwrap(), i);
                }
            }
        }
    }

    #[test]
    fn count_examples() {
        assert_eq!(fine_count(0.0, 49), 49);
        assert_eq!(fine_count(1.0, 49), 196);
        assert_eq!(fine_count(0.8, 49), 169);
        assert_eq!(selected_count(0.07, 100), 7);
    }

    #[test]
    fn selection_examples() {
        let s = select_informative(&[3.0, 1.0, 2.0], 0.34);
        assert_eq!(s.important, vec![0, 2]);
        assert_eq!(s.unimportant, vec![1]);

        let s = select_informative(&[1.0, 5.0, 2.0], 1.0);
        assert_eq!(s.important, vec![0, 1, 2]);
        assert!(s.unimportant.is_empty());

        let s = select_informative(&[0.5; 4], 0.25);
        assert_eq!(s.important, vec![0]);
    }

    #[test]
    fn remap() {
        assert_eq!(remap_cls(0, 2), 0);
        assert_eq!(remap_cls(1, 2), 1);
        assert_eq!(remap_cls(2, 2), 3);
    }

    #[test]
    fn selection_validation() {
        let ok = Selection { important: vec![1], unimportant: vec![0, 2] };
        ok.validate(3).unwrap();
        for bad in [
            Selection { important: vec![1], unimportant: vec![0] },
            Selection { important: vec![1, 0], unimportant: vec![2] },
            Selection { important: vec![1], unimportant: vec![0, 1, 2] },
            Selection { important: vec![3], unimportant: vec![0, 1, 2] },
        ] {
            assert!(matches!(bad.validate(3), Err(Error::SelectionMismatch(_))));
        }
    }
}
