//! Channel–modality unification: per patch, a shared set of learned queries
//! cross-attends over every channel token, then self-attends among itself.
//! The output shape `[P·Q, D]` does not depend on the channel count.

use crate::error::{Error, Result};
use crate::model::{Model, Session};
use crate::numerics::{Tensor, Var};

/// View of the learned latent queries `[Q, D]`.
#[derive(Debug, Clone, Copy)]
pub struct QuerySet<'a> {
    pub queries: &'a Tensor,
}

impl<'a> QuerySet<'a> {
    pub fn of(model: &'a Model) -> Result<Self> {
        Ok(Self { queries: model.params.tensor("unifier.queries")? })
    }

    pub fn len(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unified representation of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `[P, Q, D]`.
    pub values: Tensor,
    /// Head-averaged channel attention `[P, Q, C]` of the first block, if retained.
    pub attn: Option<Tensor>,
}

impl LatentState {
    pub fn patches(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Reorder channel-major tokens `[C·P, D]` into patch-major `[P·C, D]`.
fn patch_major(s: &mut Session, tokens: Var, c: usize, p: usize) -> Result<Var> {
    let d = s.config().d_model;
    let t = s.g.reshape(tokens, &[c, p, d])?;
    let t = s.g.permute(t, &[1, 0, 2])?;
    s.g.reshape(t, &[p * c, d])
}

/// Cross-attention of block `b`: `x + CA(LN(x), LN(tokens[·, p, ·]))` per patch.
///
/// `x` is `[P·Q, D]`, or `None` for the first block, which starts from the
/// shared query set. Returns the updated state and the attention probabilities
/// `[P·H, Q, C]`.
pub fn cross_attend_queries(
    s: &mut Session,
    block: usize,
    x: Option<Var>,
    tokens_pc: Var,
    c: usize,
    p: usize,
) -> Result<(Var, Var)> {
    if c == 0 {
        return Err(Error::EmptyInput);
    }
    let q = s.config().num_queries;
    let d = s.config().d_model;
    let pre = format!("unifier.{block}");
    let kv = s.layer_norm(&format!("{pre}.cross_norm_kv"), tokens_pc)?;
    let (x, q_in) = match x {
        Some(x) => {
            let q_in = s.layer_norm(&format!("{pre}.cross_norm_q"), x)?;
            (x, q_in)
        }
        None => {
            let queries = s.param("unifier.queries")?;
            let q_in = s.layer_norm(&format!("{pre}.cross_norm_q"), queries)?;
            let tiled = s.g.tile(queries, p);
            (s.g.reshape(tiled, &[p * q, d])?, q_in)
        }
    };
    let (out, probs) = s.attention(&format!("{pre}.cross"), q_in, kv, p, q, c, None)?;
    Ok((s.g.add(x, out)?, probs))
}

/// Self-attention among the queries of each patch, then the feed-forward sublayer.
pub fn refine_queries(s: &mut Session, block: usize, x: Var, p: usize) -> Result<Var> {
    let q = s.config().num_queries;
    let pre = format!("unifier.{block}");
    let h = s.layer_norm(&format!("{pre}.self_norm"), x)?;
    let (a, _) = s.attention(&format!("{pre}.self"), h, h, p, q, q, None)?;
    let x = s.g.add(x, a)?;
    let h = s.layer_norm(&format!("{pre}.ffn_norm"), x)?;
    let h = s.ffn(&format!("{pre}.ffn"), h)?;
    let h = s.dropout(h)?;
    s.g.add(x, h)
}

/// Unify channel-major tokens `[C·P, D]` into latents `[P·Q, D]`.
/// Stores the head-averaged first-block attention `[P, Q, C]` on the session.
pub fn unify(s: &mut Session, tokens: Var, c: usize, p: usize) -> Result<Var> {
    if c == 0 {
        return Err(Error::EmptyInput);
    }
    let tokens_pc = patch_major(s, tokens, c, p)?;
    let mut x = None;
    for b in 0..s.config().unifier_depth {
        let (y, probs) = cross_attend_queries(s, b, x, tokens_pc, c, p)?;
        if b == 0 {
            s.unifier_attn = Some(s.head_average(probs, p));
        }
        x = Some(refine_queries(s, b, y, p)?);
    }
    s.layer_norm("unifier.norm_out", x.expect("unifier depth ≥ 1"))
}

/// Evaluation-mode unification of a grid, returning values and attention.
pub fn latent_state(model: &Model, grid: &crate::sigproc::PatchGrid) -> Result<LatentState> {
    let (c, p) = grid.dims();
    let mut s = model.session();
    let tokens = crate::patch_embed::embed_grid(&mut s, grid, None)?;
    let x = unify(&mut s, tokens, c, p)?;
    let values = s.g.value(x).clone().reshape(&[p, model.config.num_queries, model.config.d_model])?;
    Ok(LatentState { values, attn: s.unifier_attn.take() })
}
