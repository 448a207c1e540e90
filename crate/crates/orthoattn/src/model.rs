//! Patch embedding, (orthogonal) self-attention, multi-head blocks, and the
//! classifier head.
//!
//! Attention weights are held as raw square `d_k x d_k` generators `A_Q`,
//! `A_K`, `A_V` per head. How a raw generator becomes the effective
//! projection is the [`ParamMode`]: `plain` and `penalty` use it directly,
//! `cayley` applies `h(W - W^T)`, and `exp` applies the matrix exponential of
//! the same skew part. In the latter two modes the effective weights are
//! orthogonal by construction on every forward pass, not because anything
//! pushed them there.
//!
//! Because the multi-head projections must be square for the skew pipeline,
//! each head reads its own `d_k`-column band of the token matrix rather than
//! projecting the full hidden width; plain mode uses the same shapes so the
//! comparison stays fair.

use crate::autodiff::{NodeId, Tape};
use crate::data::{Image, Rng};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::orthogonal::{self, skew_symmetrize};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How raw attention weights are realized as effective projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamMode {
    /// Raw weights used as-is (unconstrained baseline).
    Plain,
    /// `h(skew(W))`: orthogonal by construction via the rational map.
    Cayley,
    /// `exp(skew(W))`: orthogonal by construction via the exponential map.
    Exp,
    /// Raw weights used as-is; the training loss adds a soft orthogonality
    /// penalty.
    Penalty,
}

impl ParamMode {
    /// True when effective weights are orthogonal by construction.
    pub fn is_structural(self) -> bool {
        matches!(self, ParamMode::Cayley | ParamMode::Exp)
    }
}

impl fmt::Display for ParamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamMode::Plain => "plain",
            ParamMode::Cayley => "cayley",
            ParamMode::Exp => "exp",
            ParamMode::Penalty => "penalty",
        };
        f.write_str(s)
    }
}

impl FromStr for ParamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ParamMode::Plain),
            "cayley" => Ok(ParamMode::Cayley),
            "exp" => Ok(ParamMode::Exp),
            "penalty" => Ok(ParamMode::Penalty),
            other => Err(Error::Config {
                key: "mode".into(),
                message: format!("unknown mode `{other}` (plain|cayley|exp|penalty)"),
            }),
        }
    }
}

/// Architecture shape: block count, heads, widths, patching, and the
/// parameterization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Self-attention block count.
    pub depth: usize,
    /// Head count; `hidden` must be divisible by it.
    pub heads: usize,
    /// Token width `d`.
    pub hidden: usize,
    /// MLP hidden width.
    pub mlp: usize,
    /// Patch side in pixels.
    pub patch: usize,
    pub classes: usize,
    pub image_side: usize,
    pub channels: usize,
    pub mode: ParamMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            heads: 4,
            hidden: 64,
            mlp: 128,
            patch: 4,
            classes: 2,
            image_side: 16,
            channels: 1,
            mode: ParamMode::Cayley,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 8] = [
            ("model.depth", self.depth),
            ("model.heads", self.heads),
            ("model.hidden", self.hidden),
            ("model.mlp", self.mlp),
            ("model.patch", self.patch),
            ("model.classes", self.classes),
            ("model.image_side", self.image_side),
            ("model.channels", self.channels),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    message: "must be a positive integer".into(),
                });
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config {
                key: "model.heads".into(),
                message: format!("hidden {} is not divisible by heads {}", self.hidden, self.heads),
            });
        }
        if self.image_side % self.patch != 0 {
            return Err(Error::Config {
                key: "model.patch".into(),
                message: format!(
                    "image side {} is not divisible by patch {}",
                    self.image_side, self.patch
                ),
            });
        }
        Ok(())
    }

    /// Per-head width `d_k = hidden / heads`.
    pub fn d_k(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn tokens(&self) -> usize {
        let grid = self.image_side / self.patch;
        grid * grid
    }

    /// Flattened patch length: `patch^2 * channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Raw per-head generators, `d_k x d_k` each.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub a_q: Matrix,
    pub a_k: Matrix,
    pub a_v: Matrix,
}

/// One encoder block: attention heads, output projection, and the MLP.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Whether a parameter is an attention generator (subject to
/// parameterization, penalties, and Riemannian updates) or anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    AttentionRaw,
    Other,
}

/// Full parameter set plus its configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub patch_proj: Matrix,
    pub patch_bias: Matrix,
    pub pos: Matrix,
    pub blocks: Vec<BlockParams>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl Model {
    /// Seeded initialization: weights uniform in `[-0.1, 0.1]`, biases and
    /// positional embedding zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut weight = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| rng.uniform(-0.1, 0.1)).unwrap()
        };
        let d = config.hidden;
        let d_k = config.d_k();
        let patch_proj = weight(config.patch_dim(), d);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                heads: (0..config.heads)
                    .map(|_| HeadParams {
                        a_q: weight(d_k, d_k),
                        a_k: weight(d_k, d_k),
                        a_v: weight(d_k, d_k),
                    })
                    .collect(),
                w_o: weight(d, d),
                w1: weight(d, config.mlp),
                b1: Matrix::zeros(1, config.mlp),
                w2: weight(config.mlp, d),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        let head_w = weight(d, config.classes);
        Ok(Self {
            config,
            patch_proj,
            patch_bias: Matrix::zeros(1, d),
            pos: Matrix::zeros(config.tokens(), d),
            blocks,
            head_w,
            head_b: Matrix::zeros(1, config.classes),
        })
    }

    /// Fixed parameter order shared by [`Model::params`],
    /// [`Model::params_mut`], [`Model::roles`], and the tape leaf layout.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.patch_proj, &self.patch_bias, &self.pos];
        for block in &self.blocks {
            for head in &block.heads {
                out.extend([&head.a_q, &head.a_k, &head.a_v]);
            }
            out.extend([&block.w_o, &block.w1, &block.b1, &block.w2, &block.b2]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.patch_proj, &mut self.patch_bias, &mut self.pos];
        for block in &mut self.blocks {
            for head in &mut block.heads {
                out.extend([&mut head.a_q, &mut head.a_k, &mut head.a_v]);
            }
            out.extend([
                &mut block.w_o,
                &mut block.w1,
                &mut block.b1,
                &mut block.w2,
                &mut block.b2,
            ]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn roles(&self) -> Vec<ParamRole> {
        let mut out = vec![ParamRole::Other; 3];
        for _ in 0..self.config.depth {
            for _ in 0..self.config.heads {
                out.extend([ParamRole::AttentionRaw; 3]);
            }
            out.extend([ParamRole::Other; 5]);
        }
        out.extend([ParamRole::Other; 2]);
        out
    }

    /// Replaces every raw attention generator with its Cayley image so the
    /// weights start on the manifold (used by the Riemannian baseline).
    pub fn orthogonalize_attention(&mut self) -> Result<()> {
        for block in &mut self.blocks {
            for head in &mut block.heads {
                for raw in [&mut head.a_q, &mut head.a_k, &mut head.a_v] {
                    *raw = orthogonal::cayley(&skew_symmetrize(raw)?).into_matrix();
                }
            }
        }
        Ok(())
    }

    /// (stored, effective) float counts. `stored` counts every float held;
    /// `effective` counts each structurally parameterized `d_k x d_k` block
    /// as its `d_k (d_k - 1) / 2` free degrees.
    pub fn param_count(&self) -> (usize, usize) {
        let mut stored = 0;
        let mut effective = 0;
        for (param, role) in self.params().iter().zip(self.roles()) {
            let len = param.data().len();
            stored += len;
            effective += match role {
                ParamRole::AttentionRaw if self.config.mode.is_structural() => {
                    let n = param.rows();
                    n * (n - 1) / 2
                }
                _ => len,
            };
        }
        (stored, effective)
    }

    /// Worst orthogonality error over all effective attention weights.
    pub fn max_orthogonality_error(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for block in &self.blocks {
            for head in &block.heads {
                for raw in [&head.a_q, &head.a_k, &head.a_v] {
                    let eff = parameterize(raw, self.config.mode)?;
                    worst = worst.max(orthogonal::orthogonality_error(&eff)?);
                }
            }
        }
        Ok(worst)
    }

    /// Token embedding for one image: flattened patches through the learned
    /// projection, plus bias and positional rows.
    pub fn patch_embed(&self, image: &Image) -> Result<Matrix> {
        self.check_image(image)?;
        flatten_patches(image, self.config.patch)
            .matmul(&self.patch_proj)?
            .add_rowvec(&self.patch_bias)?
            .add(&self.pos)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.side != self.config.image_side || image.channels != self.config.channels {
            return Err(Error::Config {
                key: "model.image_side".into(),
                message: format!(
                    "image {}x{}x{} does not match configured {}x{}x{}",
                    image.side,
                    image.side,
                    image.channels,
                    self.config.image_side,
                    self.config.image_side,
                    self.config.channels
                ),
            });
        }
        Ok(())
    }

    /// Batch forward pass: logits of shape `batch x classes`. Deterministic;
    /// identical inputs yield bit-identical logits.
    pub fn forward(&self, images: &[Image]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.insert_leaves(&mut tape);
        let logits = forward_on_tape(&mut tape, &vars, self, images)?;
        Ok(tape.value(logits).clone())
    }

    /// Registers every parameter as a tape leaf, in [`Model::params`] order.
    pub fn insert_leaves(&self, tape: &mut Tape) -> TapeModel {
        let patch_proj = tape.leaf(self.patch_proj.clone());
        let patch_bias = tape.leaf(self.patch_bias.clone());
        let pos = tape.leaf(self.pos.clone());
        let mut all = vec![patch_proj, patch_bias, pos];
        let blocks = self
            .blocks
            .iter()
            .map(|block| {
                let heads = block
                    .heads
                    .iter()
                    .map(|head| {
                        let ids = TapeHead {
                            a_q: tape.leaf(head.a_q.clone()),
                            a_k: tape.leaf(head.a_k.clone()),
                            a_v: tape.leaf(head.a_v.clone()),
                        };
                        all.extend([ids.a_q, ids.a_k, ids.a_v]);
                        ids
                    })
                    .collect();
                let ids = TapeBlock {
                    heads,
                    w_o: tape.leaf(block.w_o.clone()),
                    w1: tape.leaf(block.w1.clone()),
                    b1: tape.leaf(block.b1.clone()),
                    w2: tape.leaf(block.w2.clone()),
                    b2: tape.leaf(block.b2.clone()),
                };
                all.extend([ids.w_o, ids.w1, ids.b1, ids.w2, ids.b2]);
                ids
            })
            .collect();
        let head_w = tape.leaf(self.head_w.clone());
        let head_b = tape.leaf(self.head_b.clone());
        all.extend([head_w, head_b]);
        TapeModel {
            patch_proj,
            patch_bias,
            pos,
            blocks,
            head_w,
            head_b,
            all,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TapeHead {
    pub a_q: NodeId,
    pub a_k: NodeId,
    pub a_v: NodeId,
}

#[derive(Debug, Clone)]
pub struct TapeBlock {
    pub heads: Vec<TapeHead>,
    pub w_o: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Tape leaf ids for a [`Model`]; `all` mirrors [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct TapeModel {
    pub patch_proj: NodeId,
    pub patch_bias: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<TapeBlock>,
    pub head_w: NodeId,
    pub head_b: NodeId,
    pub all: Vec<NodeId>,
}

impl TapeModel {
    /// Reassembles the structure from a flat id list in [`Model::params`]
    /// order (the layout the finite-difference harness hands back).
    pub fn from_ids(config: &ModelConfig, ids: &[NodeId]) -> Self {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("id list shorter than the parameter layout");
        let patch_proj = next();
        let patch_bias = next();
        let pos = next();
        let blocks = (0..config.depth)
            .map(|_| TapeBlock {
                heads: (0..config.heads)
                    .map(|_| TapeHead {
                        a_q: next(),
                        a_k: next(),
                        a_v: next(),
                    })
                    .collect(),
                w_o: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let head_w = next();
        let head_b = next();
        assert!(it.next().is_none(), "id list longer than the parameter layout");
        Self {
            patch_proj,
            patch_bias,
            pos,
            blocks,
            head_w,
            head_b,
            all: ids.to_vec(),
        }
    }
}

/// Flattens non-overlapping patches in row-major patch order; within a patch,
/// pixels are row-major with channels innermost. One row per token.
pub fn flatten_patches(image: &Image, patch: usize) -> Matrix {
    let grid = image.side / patch;
    let dim = patch * patch * image.channels;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for pr in 0..grid {
        for pc in 0..grid {
            for r in 0..patch {
                for c in 0..patch {
                    for ch in 0..image.channels {
                        data.push(image.get(pr * patch + r, pc * patch + c, ch));
                    }
                }
            }
        }
    }
    Matrix::from_raw(grid * grid, dim, data)
}

/// Pure-value parameterization of a raw square weight.
pub fn parameterize(raw: &Matrix, mode: ParamMode) -> Result<Matrix> {
    match mode {
        ParamMode::Plain | ParamMode::Penalty => Ok(raw.clone()),
        ParamMode::Cayley => Ok(orthogonal::cayley(&skew_symmetrize(raw)?).into_matrix()),
        ParamMode::Exp => Ok(orthogonal::matrix_exp(&skew_symmetrize(raw)?).into_matrix()),
    }
}

/// Same map expressed as tape operations, so gradients flow back to the raw
/// generator. Produces values bit-identical to [`parameterize`].
pub fn parameterize_on_tape(tape: &mut Tape, raw: NodeId, mode: ParamMode) -> Result<NodeId> {
    let n = {
        let v = tape.value(raw);
        if !v.is_square() {
            return Err(Error::NotSquare {
                op: "parameterize",
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        v.rows()
    };
    match mode {
        ParamMode::Plain | ParamMode::Penalty => Ok(raw),
        ParamMode::Cayley => {
            let e = tape.constant(Matrix::identity(n));
            let raw_t = tape.transpose(raw);
            let skew = tape.sub(raw, raw_t)?;
            let shifted = tape.add(e, skew)?;
            let inv = tape.inverse(shifted)?;
            let doubled = tape.scale(inv, 2.0);
            tape.sub(doubled, e)
        }
        ParamMode::Exp => {
            let raw_t = tape.transpose(raw);
            let skew = tape.sub(raw, raw_t)?;
            let s = orthogonal::matrix_exp_scaling(tape.value(skew).frobenius_norm());
            let scaled = tape.scale(skew, 0.5_f64.powi(s as i32));
            let e = tape.constant(Matrix::identity(n));
            let mut result = e;
            let mut term = e;
            for k in 1..=64u32 {
                let prod = tape.matmul(term, scaled)?;
                term = tape.scale(prod, 1.0 / k as f64);
                result = tape.add(result, term)?;
                if tape.value(term).frobenius_norm() < 1e-16 {
                    break;
                }
            }
            for _ in 0..s {
                result = tape.matmul(result, result)?;
            }
            Ok(result)
        }
    }
}

/// Effective per-head projections for a whole model, computed once per tape.
pub fn effective_weights_on_tape(
    tape: &mut Tape,
    vars: &TapeModel,
    mode: ParamMode,
) -> Result<Vec<Vec<TapeHead>>> {
    vars.blocks
        .iter()
        .map(|block| {
            block
                .heads
                .iter()
                .map(|head| {
                    Ok(TapeHead {
                        a_q: parameterize_on_tape(tape, head.a_q, mode)?,
                        a_k: parameterize_on_tape(tape, head.a_k, mode)?,
                        a_v: parameterize_on_tape(tape, head.a_v, mode)?,
                    })
                })
                .collect()
        })
        .collect()
}

/// Scaled dot-product attention on the tape:
/// `softmax(q k^T / sqrt(d_k)) v`, softmax row-wise and max-subtracted.
pub fn scaled_dot_attention_on_tape(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let d_k = tape.value(q).cols();
    if tape.value(k).cols() != d_k {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            left_rows: tape.value(q).rows(),
            left_cols: d_k,
            right_rows: tape.value(k).rows(),
            right_cols: tape.value(k).cols(),
        });
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            left_rows: tape.value(k).rows(),
            left_cols: tape.value(k).cols(),
            right_rows: tape.value(v).rows(),
            right_cols: tape.value(v).cols(),
        });
    }
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let soft = tape.row_softmax(scaled);
    tape.matmul(soft, v)
}

/// One encoder block on the tape: per-head band attention, concat, output
/// projection, residual, tanh MLP, residual.
fn block_on_tape(
    tape: &mut Tape,
    x: NodeId,
    block: &TapeBlock,
    effective: &[TapeHead],
    d_k: usize,
) -> Result<NodeId> {
    let mut head_outputs = Vec::with_capacity(effective.len());
    for (h, eff) in effective.iter().enumerate() {
        let band = tape.slice_cols(x, h * d_k, d_k)?;
        let q = tape.matmul(band, eff.a_q)?;
        let k = tape.matmul(band, eff.a_k)?;
        let v = tape.matmul(band, eff.a_v)?;
        head_outputs.push(scaled_dot_attention_on_tape(tape, q, k, v)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let attn = tape.matmul(concat, block.w_o)?;
    let x = tape.add(x, attn)?;

    let pre = tape.matmul(x, block.w1)?;
    let pre = tape.add(pre, block.b1)?;
    let hidden = tape.tanh(pre);
    let out = tape.matmul(hidden, block.w2)?;
    let out = tape.add(out, block.b2)?;
    tape.add(x, out)
}

/// Encoder applied to an explicit token matrix (no patch embedding); used by
/// the gradient checker, which drives token counts that no square patch grid
/// can produce.
pub fn encode_tokens_on_tape(
    tape: &mut Tape,
    vars: &TapeModel,
    config: &ModelConfig,
    tokens: NodeId,
) -> Result<NodeId> {
    let effective = effective_weights_on_tape(tape, vars, config.mode)?;
    let mut x = tokens;
    for (block, eff) in vars.blocks.iter().zip(&effective) {
        x = block_on_tape(tape, x, block, eff, config.d_k())?;
    }
    let pooled = tape.mean_rows(x);
    let logits = tape.matmul(pooled, vars.head_w)?;
    tape.add(logits, vars.head_b)
}

/// Full batch forward on the tape: per-image patch embedding, encoder
/// blocks, token mean-pooling, and the class head, stacked into a
/// `batch x classes` logits node.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &TapeModel,
    model: &Model,
    images: &[Image],
) -> Result<NodeId> {
    assert!(!images.is_empty(), "forward needs at least one image");
    let config = &model.config;
    let effective = effective_weights_on_tape(tape, vars, config.mode)?;
    let mut per_sample = Vec::with_capacity(images.len());
    for image in images {
        model.check_image(image)?;
        let flat = tape.constant(flatten_patches(image, config.patch));
        let projected = tape.matmul(flat, vars.patch_proj)?;
        let biased = tape.add(projected, vars.patch_bias)?;
        let mut x = tape.add(biased, vars.pos)?;
        for (block, eff) in vars.blocks.iter().zip(&effective) {
            x = block_on_tape(tape, x, block, eff, config.d_k())?;
        }
        let pooled = tape.mean_rows(x);
        let logits = tape.matmul(pooled, vars.head_w)?;
        let logits = tape.add(logits, vars.head_b)?;
        // 1 x classes -> classes x 1, ready for column stacking.
        per_sample.push(tape.transpose(logits));
    }
    let stacked = tape.concat_cols(&per_sample)?;
    Ok(tape.transpose(stacked))
}

/// Soft orthogonality penalty over every raw attention generator:
/// `sum ||A A^T - E||_F^2` as a scalar tape node.
pub fn orth_penalty_on_tape(tape: &mut Tape, vars: &TapeModel) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for block in &vars.blocks {
        for head in &block.heads {
            for raw in [head.a_q, head.a_k, head.a_v] {
                let n = tape.value(raw).rows();
                let e = tape.constant(Matrix::identity(n));
                let raw_t = tape.transpose(raw);
                let gram = tape.matmul(raw, raw_t)?;
                let resid = tape.sub(gram, e)?;
                let sq = tape.frobenius_sq(resid);
                total = Some(match total {
                    Some(t) => tape.add(t, sq)?,
                    None => sq,
                });
            }
        }
    }
    total.ok_or_else(|| Error::InvalidArgument("model has no attention generators".into()))
}

/// Per-head projections as plain values: `Q = x W_Q`, `K = x W_K`,
/// `V = x W_V` with each `W` realized from its raw generator per `mode`.
pub fn orthogonal_self_attention(
    x: &Matrix,
    head: &HeadParams,
    mode: ParamMode,
) -> Result<(Matrix, Matrix, Matrix)> {
    let w_q = parameterize(&head.a_q, mode)?;
    if x.cols() != w_q.rows() {
        return Err(Error::ShapeMismatch {
            op: "orthogonal_self_attention",
            left_rows: x.rows(),
            left_cols: x.cols(),
            right_rows: w_q.rows(),
            right_cols: w_q.cols(),
        });
    }
    let q = x.matmul(&w_q)?;
    let k = x.matmul(&parameterize(&head.a_k, mode)?)?;
    let v = x.matmul(&parameterize(&head.a_v, mode)?)?;
    Ok((q, k, v))
}

/// Value-level scaled dot-product attention.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let q = tape.constant(q.clone());
    let k = tape.constant(k.clone());
    let v = tape.constant(v.clone());
    let out = scaled_dot_attention_on_tape(&mut tape, q, k, v)?;
    Ok(tape.value(out).clone())
}

/// Value-level multi-head attention over head-wise column bands:
/// `concat(head_1 .. head_n) W_O`.
pub fn multi_head(x: &Matrix, block: &BlockParams, mode: ParamMode) -> Result<Matrix> {
    let heads = block.heads.len();
    if heads == 0 || x.cols() % heads != 0 {
        return Err(Error::Config {
            key: "model.heads".into(),
            message: format!("{} columns cannot split into {} heads", x.cols(), heads),
        });
    }
    let d_k = x.cols() / heads;
    let mut outputs = Vec::with_capacity(heads);
    for (h, head) in block.heads.iter().enumerate() {
        let band = Matrix::from_fn(x.rows(), d_k, |r, c| x.get(r, h * d_k + c))?;
        let (q, k, v) = orthogonal_self_attention(&band, head, mode)?;
        outputs.push(scaled_dot_attention(&q, &k, &v)?);
    }
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for r in 0..x.rows() {
        for out in &outputs {
            data.extend_from_slice(out.row(r));
        }
    }
    Matrix::from_raw(x.rows(), x.cols(), data).matmul(&block.w_o)
}
