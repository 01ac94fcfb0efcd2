//! Bidirectional state-space encoder: patch embedding, CLS-in-the-middle
//! sequences, the gated two-direction block, and the classifier head.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::remap_cls;
use crate::reuse::ReuseMlp;
use crate::rng::SplitMix64;
use crate::ssm::{reverse_seq, selective_scan, SsmParams};
use crate::tensor::{sigmoid, Tensor};

/// Where a token in a sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Cls,
    /// Coarse patch index (coarse-stage tokens and retained coarse tokens).
    Coarse(usize),
    /// Fine patch index on the full fine grid.
    Fine(usize),
}

/// Granularity of the stage a sequence is encoded in; picks the positional
/// row used for CLS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub tokens: Tensor,
    pub cls_index: usize,
    pub origin: Vec<Origin>,
}

impl TokenSeq {
    pub fn new(tokens: Tensor, cls_index: usize, origin: Vec<Origin>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != origin.len() {
            return Err(Error::shape("TokenSeq", tokens.dims(), &[origin.len()]));
        }
        let cls: Vec<usize> = origin
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == Origin::Cls)
            .map(|(i, _)| i)
            .collect();
        if cls != [cls_index] {
            return Err(Error::Domain(format!(
                "sequence must carry exactly one CLS at {cls_index}, found at {cls:?}"
            )));
        }
        Ok(Self {
            tokens,
            cls_index,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn cls_token(&self) -> &[f32] {
        self.tokens.row(self.cls_index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    /// `D×2D'`: first half is the SSM value path, second half the gate path.
    pub in_proj: Tensor,
    pub fwd: SsmParams,
    pub bwd: SsmParams,
    /// `D'×D'` gate projections, one per direction.
    pub gate_fwd: Tensor,
    pub gate_bwd: Tensor,
    /// `D'×D`
    pub out_proj: Tensor,
}

impl BlockParams {
    pub fn init(dim: usize, inner: usize, state: usize, std: f32, rng: &mut SplitMix64) -> Self {
        Self {
            in_proj: Tensor::gaussian(&[dim, 2 * inner], std, rng),
            fwd: SsmParams::init(inner, state, std, rng),
            bwd: SsmParams::init(inner, state, std, rng),
            gate_fwd: Tensor::gaussian(&[inner, inner], std, rng),
            gate_bwd: Tensor::gaussian(&[inner, inner], std, rng),
            out_proj: Tensor::gaussian(&[inner, dim], std, rng),
        }
    }

    pub fn zeros(dim: usize, inner: usize, state: usize) -> Self {
        Self {
            in_proj: Tensor::zeros(&[dim, 2 * inner]),
            fwd: SsmParams::zeros(inner, state),
            bwd: SsmParams::zeros(inner, state),
            gate_fwd: Tensor::zeros(&[inner, inner]),
            gate_bwd: Tensor::zeros(&[inner, inner]),
            out_proj: Tensor::zeros(&[inner, dim]),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.out_proj.dims()[0]
    }
}

/// Everything the encoder, head and reuse path need. Both stages read the
/// same instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `(p₂²·C_img)×D`, shared by the coarse and fine embeddings.
    pub patch_embed: Tensor,
    pub cls: Tensor,
    /// `(N_c+1)×D`
    pub pos_coarse: Tensor,
    /// `(4N_c+1)×D`
    pub pos_fine: Tensor,
    pub blocks: Vec<BlockParams>,
    /// `D×C`
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub reuse: ReuseMlp,
}

impl EncoderParams {
    /// Gaussian weights (std `cfg.init_std`) and zero biases from a SplitMix64
    /// stream seeded with `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = SplitMix64::new(cfg.seed);
        let d = cfg.dim;
        let std = cfg.init_std;
        let patch_embed = Tensor::gaussian(&[cfg.patch_len(), d], std, &mut rng);
        let cls = Tensor::gaussian(&[d], std, &mut rng);
        let pos_coarse = Tensor::gaussian(&[cfg.num_coarse() + 1, d], std, &mut rng);
        let pos_fine = Tensor::gaussian(&[cfg.num_fine() + 1, d], std, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams::init(d, cfg.inner_dim, cfg.state_dim, std, &mut rng))
            .collect();
        let head_w = Tensor::gaussian(&[d, cfg.num_classes], std, &mut rng);
        let head_b = Tensor::zeros(&[cfg.num_classes]);
        let reuse = ReuseMlp::init(d, std, &mut rng);
        Self {
            patch_embed,
            cls,
            pos_coarse,
            pos_fine,
            blocks,
            head_w,
            head_b,
            reuse,
        }
    }

    /// All-zero parameters with the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        Self {
            patch_embed: Tensor::zeros(&[cfg.patch_len(), d]),
            cls: Tensor::zeros(&[d]),
            pos_coarse: Tensor::zeros(&[cfg.num_coarse() + 1, d]),
            pos_fine: Tensor::zeros(&[cfg.num_fine() + 1, d]),
            blocks: (0..cfg.depth)
                .map(|_| BlockParams::zeros(d, cfg.inner_dim, cfg.state_dim))
                .collect(),
            head_w: Tensor::zeros(&[d, cfg.num_classes]),
            head_b: Tensor::zeros(&[cfg.num_classes]),
            reuse: ReuseMlp::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head_b.len()
    }

    /// Every tensor under its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.w".into(), &self.patch_embed),
            ("cls".into(), &self.cls),
            ("pos_coarse".into(), &self.pos_coarse),
            ("pos_fine".into(), &self.pos_fine),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("in_proj.w"), &b.in_proj));
            for (dir, ssm, gate) in [("fwd", &b.fwd, &b.gate_fwd), ("bwd", &b.bwd, &b.gate_bwd)] {
                out.push((p(&format!("{dir}.a")), &ssm.a));
                out.push((p(&format!("{dir}.delta_proj.w")), &ssm.delta_proj));
                out.push((p(&format!("{dir}.b_proj.w")), &ssm.b_proj));
                out.push((p(&format!("{dir}.c_proj.w")), &ssm.c_proj));
                out.push((p(&format!("{dir}.gate.w")), gate));
            }
            out.push((p("out_proj.w"), &b.out_proj));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out.push(("reuse_mlp.0.w".into(), &self.reuse.w0));
        out.push(("reuse_mlp.0.b".into(), &self.reuse.b0));
        out.push(("reuse_mlp.1.w".into(), &self.reuse.w1));
        out.push(("reuse_mlp.1.b".into(), &self.reuse.b1));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed.w".into(), &mut self.patch_embed),
            ("cls".into(), &mut self.cls),
            ("pos_coarse".into(), &mut self.pos_coarse),
            ("pos_fine".into(), &mut self.pos_fine),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("in_proj.w"), &mut b.in_proj));
            for (dir, ssm, gate) in [("fwd", &mut b.fwd, &mut b.gate_fwd), ("bwd", &mut b.bwd, &mut b.gate_bwd)] {
                out.push((p(&format!("{dir}.a")), &mut ssm.a));
                out.push((p(&format!("{dir}.delta_proj.w")), &mut ssm.delta_proj));
                out.push((p(&format!("{dir}.b_proj.w")), &mut ssm.b_proj));
                out.push((p(&format!("{dir}.c_proj.w")), &mut ssm.c_proj));
                out.push((p(&format!("{dir}.gate.w")), gate));
            }
            out.push((p("out_proj.w"), &mut b.out_proj));
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out.push(("reuse_mlp.0.w".into(), &mut self.reuse.w0));
        out.push(("reuse_mlp.0.b".into(), &mut self.reuse.b0));
        out.push(("reuse_mlp.1.w".into(), &mut self.reuse.w1));
        out.push(("reuse_mlp.1.b".into(), &mut self.reuse.b1));
        out
    }
}

/// Cuts `image` (`C×H×W`) into `patch×patch` tiles, row-major over tiles,
/// each flattened channel-major then row-major.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape("extract_patches", image.dims(), &[0, 0, 0]));
    }
    let (c, h, w) = (image.dims()[0], image.dims()[1], image.dims()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("extract_patches", image.dims(), &[c, patch, patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let plen = c * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * plen);
    let px = image.data();
    for pi in 0..gh {
        for pj in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let start = ch * h * w + (pi * patch + y) * w + pj * patch;
                    data.extend_from_slice(&px[start..start + patch]);
                }
            }
        }
    }
    Tensor::matrix(gh * gw, plen, data)
}

/// Fine tokens: every `p₂×p₂` patch projected by `patch_embed`.
pub fn patch_embed_fine(image: &Tensor, fine_patch: usize, patch_embed: &Tensor) -> Result<Tensor> {
    extract_patches(image, fine_patch)?.matmul(patch_embed)
}

/// Coarse tokens: each `2p₂×2p₂` patch is 2×2 mean-pooled down to `p₂×p₂`
/// pixels and projected by the same `patch_embed` as the fine tokens.
pub fn patch_embed_coarse(image: &Tensor, fine_patch: usize, patch_embed: &Tensor) -> Result<Tensor> {
    let coarse = 2 * fine_patch;
    if image.rank() != 3 || image.dims()[1] % coarse != 0 || image.dims()[2] % coarse != 0 {
        return Err(Error::shape("patch_embed_coarse", image.dims(), &[0, coarse, coarse]));
    }
    // Pooling blocks never straddle coarse patch borders, so pooling the
    // whole image and tiling by p₂ equals pooling patch by patch.
    patch_embed_fine(&image.mean_pool_2x2()?, fine_patch, patch_embed)
}

/// Inserts CLS at `⌊M/2⌋` of `M` coarse-grid tokens.
pub fn insert_cls_middle(tokens: &Tensor, cls: &Tensor) -> Result<TokenSeq> {
    insert_cls_middle_as(tokens, cls, Origin::Coarse)
}

/// As [`insert_cls_middle`], tagging grid token `i` with `tag(i)`.
pub fn insert_cls_middle_as(tokens: &Tensor, cls: &Tensor, tag: fn(usize) -> Origin) -> Result<TokenSeq> {
    let m = tokens.rows();
    let dim = cls.len();
    if tokens.rank() != 2 || tokens.dims()[1] != dim {
        return Err(Error::shape("insert_cls_middle", tokens.dims(), &[m, dim]));
    }
    let mid = m / 2;
    let cls_row = cls.reshape(&[1, dim])?;
    let head = tokens.slice_rows(0, mid)?;
    let tail = tokens.slice_rows(mid, m)?;
    let seq = Tensor::concat_rows(&[&head, &cls_row, &tail])?;
    let origin = (0..mid)
        .map(tag)
        .chain(std::iter::once(Origin::Cls))
        .chain((mid..m).map(tag))
        .collect();
    TokenSeq::new(seq, mid, origin)
}

/// Ungated SSM outputs of one block, aligned to token order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub y_fwd: Tensor,
    pub y_bwd: Tensor,
}

/// One bidirectional block.
///
/// `X' = T·W_in[:, :D']`, `z = T·W_in[:, D':]`; forward and (reversed)
/// backward scans over `X'`; each gated by `σ(z·W_gate)`; then
/// `T' = (y'_f + y'_b)·W_out + T`.
pub fn vim_block(seq_in: &Tensor, params: &BlockParams) -> Result<(Tensor, LayerActivations)> {
    let inner = params.inner_dim();
    let xz = seq_in.matmul(&params.in_proj)?;
    let x = xz.slice_cols(0, inner)?;
    let z = xz.slice_cols(inner, 2 * inner)?;

    let y_fwd = selective_scan(&x, &params.fwd)?;
    let y_bwd = reverse_seq(&selective_scan(&reverse_seq(&x), &params.bwd)?);

    let gate = |w: &Tensor| -> Result<Tensor> { Ok(z.matmul(w)?.map(|v| sigmoid(v as f64) as f32)) };
    let mixed = y_fwd.mul(&gate(&params.gate_fwd)?)?.add(&y_bwd.mul(&gate(&params.gate_bwd)?)?)?;
    let out = mixed.matmul(&params.out_proj)?.add(seq_in)?;
    if let Some(i) = out.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "vim_block",
            index: i / out.cols(),
        });
    }
    Ok((out, LayerActivations { y_fwd, y_bwd }))
}

/// Positional row for each token: fine tokens index `pos_fine`, coarse
/// tokens `pos_coarse`, both shifted past the table's CLS row; CLS takes the
/// middle row of the table for `stage`.
pub fn positional_rows(seq: &TokenSeq, params: &EncoderParams, stage: Stage) -> Result<Tensor> {
    let n_c = params.pos_coarse.rows() - 1;
    let n_f = params.pos_fine.rows() - 1;
    let mut rows = Vec::with_capacity(seq.len() * params.dim());
    for o in &seq.origin {
        let (table, idx, n) = match *o {
            Origin::Coarse(i) => (&params.pos_coarse, remap_cls(i, n_c / 2), n_c),
            Origin::Fine(j) => (&params.pos_fine, remap_cls(j, n_f / 2), n_f),
            Origin::Cls => match stage {
                Stage::Coarse => (&params.pos_coarse, n_c / 2, n_c),
                Stage::Fine => (&params.pos_fine, n_f / 2, n_f),
            },
        };
        if idx > n {
            return Err(Error::Index {
                what: "positional table",
                index: idx,
                len: n + 1,
            });
        }
        rows.extend_from_slice(table.row(idx));
    }
    Tensor::matrix(seq.len(), params.dim(), rows)
}

/// Adds positional embeddings once, then runs every block, collecting the
/// per-layer SSM activations.
pub fn encode(seq: &TokenSeq, params: &EncoderParams, stage: Stage) -> Result<(TokenSeq, Vec<LayerActivations>)> {
    let pos = positional_rows(seq, params, stage)?;
    let mut x = seq.tokens.add(&pos)?;
    let mut acts = Vec::with_capacity(params.depth());
    for block in &params.blocks {
        let (next, a) = vim_block(&x, block)?;
        x = next;
        acts.push(a);
    }
    let out = TokenSeq {
        tokens: x,
        cls_index: seq.cls_index,
        origin: seq.origin.clone(),
    };
    Ok((out, acts))
}

/// Head applied to the CLS row. Returns raw logits.
pub fn classify(seq: &TokenSeq, head_w: &Tensor, head_b: &Tensor) -> Result<Tensor> {
    let cls = Tensor::matrix(1, seq.tokens.dims()[1], seq.cls_token().to_vec())?;
    let logits = cls.matmul(head_w)?.add_row_vector(head_b)?;
    logits.reshape(&[head_b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;

    #[test]
    fn cls_positions() {
        let cls = Tensor::vector(vec![9.0, 9.0]);
        let s = insert_cls_middle(&Tensor::zeros(&[4, 2]), &cls).unwrap();
        assert_eq!(s.cls_index, 2);
        assert_eq!(s.len(), 5);
        let s = insert_cls_middle(&Tensor::zeros(&[5, 2]), &cls).unwrap();
        assert_eq!(s.cls_index, 2);
        assert_eq!(s.origin[3], Origin::Coarse(2));
        let s = insert_cls_middle(&Tensor::zeros(&[0, 2]), &cls).unwrap();
        assert_eq!(s.cls_index, 0);
        assert_eq!(s.tokens.data(), &[9.0, 9.0]);
    }

    #[test]
    fn token_seq_rejects_bad_tags() {
        let t = Tensor::zeros(&[2, 1]);
        assert!(TokenSeq::new(t.clone(), 0, vec![Origin::Coarse(0), Origin::Coarse(1)]).is_err());
        assert!(TokenSeq::new(t.clone(), 0, vec![Origin::Cls, Origin::Cls]).is_err());
        assert!(TokenSeq::new(t, 1, vec![Origin::Cls, Origin::Coarse(0)]).is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut rng = SplitMix64::new(2);
        let x = Tensor::gaussian(&[5, 4], 1.0, &mut rng);
        let (y, _) = vim_block(&x, &BlockParams::zeros(4, 6, 2)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_token_block() {
        let mut rng = SplitMix64::new(3);
        let p = BlockParams::init(4, 6, 2, 0.02, &mut rng);
        let x = Tensor::gaussian(&[1, 4], 1.0, &mut rng);
        let (y, acts) = vim_block(&x, &p).unwrap();
        assert_eq!(y.dims(), &[1, 4]);
        // One token: both directions see the same single step.
        assert_eq!(acts.y_fwd.dims(), &[1, 6]);
    }

    #[test]
    fn patch_embed_shapes_and_zero_image() {
        let cfg = ModelConfig::tiny();
        let params = EncoderParams::init(&cfg);
        let img = Tensor::zeros(&[3, 64, 64]);
        let fine = patch_embed_fine(&img, 8, &params.patch_embed).unwrap();
        assert_eq!(fine.dims(), &[64, 32]);
        assert!(fine.data().iter().all(|&v| v == 0.0));
        let coarse = patch_embed_coarse(&img, 8, &params.patch_embed).unwrap();
        assert_eq!(coarse.dims(), &[16, 32]);
        assert!(patch_embed_fine(&Tensor::zeros(&[3, 60, 64]), 8, &params.patch_embed).is_err());
    }

    #[test]
    fn extract_patch_layout() {
        // 1 channel, 4×4 image, 2×2 patches.
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn head_cases() {
        let seq = insert_cls_middle(&Tensor::zeros(&[2, 2]), &Tensor::vector(vec![1.0, -2.0])).unwrap();
        let q = softmax(&classify(&seq, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[4])).unwrap()).unwrap();
        assert!(q.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let q = softmax(&classify(&seq, &Tensor::zeros(&[2, 1]), &Tensor::zeros(&[1])).unwrap()).unwrap();
        assert_eq!(q.data(), &[1.0]);

        let w = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.5]]);
        let b = Tensor::vector(vec![0.0, 0.0, 1.0]);
        let logits = classify(&seq, &w, &b).unwrap();
        assert_eq!(logits.data(), &[1.0, -2.0, 2.0]);
    }

    #[test]
    fn depth_zero_encode_adds_positions() {
        let cfg = ModelConfig { depth: 0, ..ModelConfig::tiny() };
        let params = EncoderParams::init(&cfg);
        let tokens = Tensor::zeros(&[cfg.num_coarse(), cfg.dim]);
        let seq = insert_cls_middle(&tokens, &params.cls).unwrap();
        let (out, acts) = encode(&seq, &params, Stage::Coarse).unwrap();
        assert!(acts.is_empty());
        let mut expected = params.pos_coarse.clone();
        for (v, c) in expected.row_mut(seq.cls_index).iter_mut().zip(params.cls.data()) {
            *v += c;
        }
        assert_eq!(out.tokens, expected);
    }
}
