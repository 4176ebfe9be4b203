use serde::{Deserialize, Serialize};

use super::{PolicyError, PosteriorParams, Result};
use crate::dataset::ActionChunk;
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_l1: f64,
    pub kl: f64,
}

/// `KL(N(mu, diag e^logvar) || N(0, I))`.
pub fn kl_divergence(post: &PosteriorParams) -> f64 {
    0.5 * post.mu.iter().zip(&post.logvar).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>()
}

/// L1 over unpadded rows, summed over action dims and averaged over rows.
pub fn recon_l1(pred: &[f64], target: &ActionChunk) -> Result<f64> {
    check_shapes(pred.len(), target)?;
    let n = target.n_real();
    if n == 0 {
        return Err(PolicyError::AllPadded);
    }
    let d = target.action_dim;
    let mut s = 0.0;
    for (i, pad) in target.pad_mask.iter().enumerate() {
        if !pad {
            s += pred[i * d..(i + 1) * d].iter().zip(target.row(i)).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
    }
    Ok(s / n as f64)
}

fn check_shapes(pred_len: usize, target: &ActionChunk) -> Result<()> {
    if pred_len != target.actions.len() {
        return Err(PolicyError::Shape(format!("prediction has {pred_len} values, target chunk {}", target.actions.len())));
    }
    Ok(())
}

/// Reconstruction plus weighted KL on plain arrays.
pub fn compute_loss(pred: &[f64], target: &ActionChunk, post: &PosteriorParams, lambda_kl: f64) -> Result<LossBreakdown> {
    let recon = recon_l1(pred, target)?;
    let kl = kl_divergence(post);
    Ok(LossBreakdown {
        total: recon + lambda_kl * kl,
        recon_l1: recon,
        kl,
    })
}

/// Graph nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon_l1: Var,
    pub kl: Var,
}

/// Same loss as [`compute_loss`] recorded on the tape. `pred` is `[H, A]`,
/// `mu`/`logvar` are `[1, L]`.
pub fn loss_graph(g: &mut Graph, pred: Var, target: &ActionChunk, mu: Var, logvar: Var, lambda_kl: f64) -> Result<LossVars> {
    check_shapes(g.value(pred).len(), target)?;
    let n = target.n_real();
    if n == 0 {
        return Err(PolicyError::AllPadded);
    }
    let h = target.horizon();
    let t = g.input(Tensor::new(vec![h, target.action_dim], target.actions.clone()));
    let w = g.input(Tensor::vector(target.pad_mask.iter().map(|p| if *p { 0.0 } else { 1.0 / n as f64 }).collect()));
    let diff = g.sub(pred, t);
    let a = g.abs(diff);
    let a = g.mul_col(a, w);
    let recon = g.sum(a);
    let e = g.exp(logvar);
    let m2 = g.mul(mu, mu);
    let s = g.add(e, m2);
    let s = g.sub(s, logvar);
    let s = g.add_const(s, -1.0);
    let s = g.sum(s);
    let kl = g.scale(s, 0.5);
    let wkl = g.scale(kl, lambda_kl);
    let total = g.add(recon, wkl);
    Ok(LossVars { total, recon_l1: recon, kl })
}
