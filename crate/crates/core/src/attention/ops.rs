//! Parameterised MWNet modules as graph functions.
//!
//! Row-vector convention throughout: a projection is `X W` with `W` of
//! shape `in × out`.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

pub const LN_EPS: f64 = 1e-5;

/// Query/key/value projection weights of one attention module.
#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

fn check_width(g: &Graph, op: &'static str, x: Var, w: Var) -> Result<()> {
    let (xs, ws) = (g.shape(x), g.shape(w));
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape(op, &xs, &ws));
    }
    Ok(())
}

/// `x W + b`
pub fn linear(g: &Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    check_width(g, "linear", x, w)?;
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// `x + LN(x ⊙ (W1 + I)ε) + W2 ε`, with the ε terms shared by every frame.
///
/// `eps_t` is a `1 × C` timestep embedding; `w1`, `w2` are `C × C`. With
/// `eps_t = 0` the output is `x` exactly.
pub fn film(g: &Graph, x: Var, eps_t: Var, w1: Var, w2: Var) -> Result<Var> {
    let c = g.shape(x).last().copied().unwrap_or(0);
    let es = g.shape(eps_t);
    if es.len() != 2 || es[0] != 1 || es[1] != c {
        return Err(Error::shape("film", &g.shape(x), &es));
    }
    check_width(g, "film", eps_t, w1)?;
    check_width(g, "film", eps_t, w2)?;
    let gate = g.add(g.matmul(eps_t, w1)?, eps_t)?;
    let scaled = g.mul_row(x, gate)?;
    let normed = g.layer_norm(scaled, 1, LN_EPS)?;
    let shift = g.matmul(eps_t, w2)?;
    g.add_row(g.add(x, normed)?, shift)
}

/// Softmax(Q Kᵀ / scale) V for every head, heads along columns.
///
/// Returns the concatenated output and each head's attention matrix.
fn split_heads_attention(g: &Graph, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<(Var, Vec<Var>)> {
    let c = g.shape(q)[1];
    let ch = c / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * ch, (h + 1) * ch);
        let (qi, ki, vi) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
        };
        let scores = g.scale(g.matmul(qi, g.transpose(ki)?)?, 1.0 / scale)?;
        let w = g.softmax(scores, 1)?;
        outs.push(g.matmul(w, vi)?);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

fn divides(op: &str, c: usize, parts: usize) -> Result<()> {
    if parts == 0 || !c.is_multiple_of(parts) {
        return Err(Error::invalid(format!("{op}: width {c} not divisible by {parts}")));
    }
    Ok(())
}

/// Cross-attention: queries from `x` (`T × C`), keys and values from
/// `context` (`S × C_ctx`). Returns the output and per-head weights.
pub fn cross_attention_with_weights(g: &Graph, x: Var, context: Var, w: Qkv, heads: usize) -> Result<(Var, Vec<Var>)> {
    check_width(g, "attention query", x, w.wq)?;
    check_width(g, "attention key", context, w.wk)?;
    check_width(g, "attention value", context, w.wv)?;
    let c = g.shape(w.wq)[1];
    if g.shape(w.wk)[1] != c || g.shape(w.wv)[1] != c {
        return Err(Error::shape("attention projections", &g.shape(w.wq), &g.shape(w.wk)));
    }
    divides("attention", c, heads)?;
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(context, w.wk)?;
    let v = g.matmul(context, w.wv)?;
    split_heads_attention(g, q, k, v, heads, ((c / heads) as f64).sqrt())
}

pub fn cross_attention(g: &Graph, x: Var, context: Var, w: Qkv, heads: usize) -> Result<Var> {
    Ok(cross_attention_with_weights(g, x, context, w, heads)?.0)
}

/// Time-wise self-attention: attention over frames, scale √C_h.
pub fn time_wise_sa_with_weights(g: &Graph, x: Var, w: Qkv, heads: usize) -> Result<(Var, Vec<Var>)> {
    cross_attention_with_weights(g, x, x, w, heads)
}

pub fn time_wise_sa(g: &Graph, x: Var, w: Qkv, heads: usize) -> Result<Var> {
    Ok(time_wise_sa_with_weights(g, x, w, heads)?.0)
}

/// Time-wise self-attention with an explicit score divisor.
pub fn time_wise_sa_scaled(g: &Graph, x: Var, w: Qkv, heads: usize, scale: f64) -> Result<Var> {
    check_width(g, "attention", x, w.wq)?;
    let c = g.shape(w.wq)[1];
    divides("attention", c, heads)?;
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    Ok(split_heads_attention(g, q, k, v, heads, scale)?.0)
}

/// Channel-wise self-attention: per group, `(Softmax(Q_iᵀ K_i / √C_g) V_iᵀ)ᵀ`,
/// so attention mixes the group's channels rather than its frames.
pub fn channel_wise_sa_with_weights(g: &Graph, x: Var, w: Qkv, groups: usize) -> Result<(Var, Vec<Var>)> {
    check_width(g, "channel attention", x, w.wq)?;
    check_width(g, "channel attention", x, w.wk)?;
    check_width(g, "channel attention", x, w.wv)?;
    let c = g.shape(w.wq)[1];
    divides("channel attention", c, groups)?;
    let cg = c / groups;
    let scale = (cg as f64).sqrt();
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let mut outs = Vec::with_capacity(groups);
    let mut weights = Vec::with_capacity(groups);
    for i in 0..groups {
        let (lo, hi) = (i * cg, (i + 1) * cg);
        let (qi, ki, vi) = if groups == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
        };
        let scores = g.scale(g.matmul(g.transpose(qi)?, ki)?, 1.0 / scale)?;
        let a = g.softmax(scores, 1)?;
        outs.push(g.transpose(g.matmul(a, g.transpose(vi)?)?)?);
        weights.push(a);
    }
    let out = if groups == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

pub fn channel_wise_sa(g: &Graph, x: Var, w: Qkv, groups: usize) -> Result<Var> {
    Ok(channel_wise_sa_with_weights(g, x, w, groups)?.0)
}

/// Two affine maps with a GELU between.
pub fn feed_forward(g: &Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = g.gelu(linear(g, x, w1, Some(b1))?)?;
    linear(g, h, w2, Some(b2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, SplitMix64, Tensor};

    fn rand(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normals(n)).unwrap()
    }

    fn qkv(g: &Graph, cin: usize, cout: usize, rng: &mut SplitMix64) -> Qkv {
        Qkv {
            wq: g.constant(rand(&[cin, cout], rng)),
            wk: g.constant(rand(&[cin, cout], rng)),
            wv: g.constant(rand(&[cin, cout], rng)),
        }
    }

    /// Straight-line reference for multi-head attention on plain vectors.
    fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<Vec<f64>> {
        let (t, c) = q.dims2().unwrap();
        let s = k.rows();
        let ch = c / heads;
        let mut out = vec![vec![0.0; c]; t];
        for h in 0..heads {
            for i in 0..t {
                let logits: Vec<f64> = (0..s)
                    .map(|j| (0..ch).map(|d| q.at(i, h * ch + d) * k.at(j, h * ch + d)).sum::<f64>() / (ch as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..ch {
                    out[i][h * ch + d] = (0..s).map(|j| e[j] / z * v.at(j, h * ch + d)).sum();
                }
            }
        }
        out
    }

    fn project(x: &Tensor, w: &Tensor) -> Tensor {
        let g = Graph::new();
        let (a, b) = (g.constant(x.clone()), g.constant(w.clone()));
        g.value(g.matmul(a, b).unwrap())
    }

    #[test]
    fn film_zero_embedding_is_identity() {
        let mut rng = SplitMix64::new(3);
        let g = Graph::new();
        let x = g.constant(rand(&[5, 6], &mut rng));
        let e = g.constant(Tensor::zeros(&[1, 6]));
        let w1 = g.constant(rand(&[6, 6], &mut rng));
        let w2 = g.constant(rand(&[6, 6], &mut rng));
        let y = film(&g, x, e, w1, w2).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn film_zero_weights_unit_embedding() {
        let mut rng = SplitMix64::new(4);
        let g = Graph::new();
        let xv = rand(&[3, 4], &mut rng);
        let x = g.constant(xv.clone());
        let e = g.constant(Tensor::ones(&[1, 4]));
        let z = g.constant(Tensor::zeros(&[4, 4]));
        let y = g.value(film(&g, x, e, z, z).unwrap());
        let ln = g.value(g.layer_norm(x, 1, LN_EPS).unwrap());
        for i in 0..xv.len() {
            assert_eq!(y.data()[i], xv.data()[i] + ln.data()[i]);
        }
    }

    #[test]
    fn film_width_mismatch() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let e = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[3, 3]));
        assert!(film(&g, x, e, w, w).is_err());
    }

    #[test]
    fn time_sa_single_frame_returns_value_row() {
        let mut rng = SplitMix64::new(5);
        let g = Graph::new();
        let xv = rand(&[1, 6], &mut rng);
        let x = g.constant(xv.clone());
        let w = qkv(&g, 6, 6, &mut rng);
        let y = g.value(time_wise_sa(&g, x, w, 2).unwrap());
        let v = g.value(g.matmul(x, w.wv).unwrap());
        assert!(y.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn time_sa_uniform_attention_gives_column_mean() {
        let mut rng = SplitMix64::new(6);
        let g = Graph::new();
        let xv = rand(&[4, 6], &mut rng);
        let x = g.constant(xv.clone());
        let zero = g.constant(Tensor::zeros(&[6, 6]));
        let eye = g.constant(Tensor::eye(6));
        let y = g.value(time_wise_sa(&g, x, Qkv { wq: zero, wk: zero, wv: eye }, 3).unwrap());
        for c in 0..6 {
            let mean = (0..4).map(|r| xv.at(r, c)).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((y.at(r, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn time_sa_matches_reference() {
        let mut rng = SplitMix64::new(7);
        let g = Graph::new();
        let xv = rand(&[4, 6], &mut rng);
        let x = g.constant(xv.clone());
        let w = qkv(&g, 6, 6, &mut rng);
        let y = g.value(time_wise_sa(&g, x, w, 2).unwrap());
        let q = project(&xv, &g.value(w.wq));
        let k = project(&xv, &g.value(w.wk));
        let v = project(&xv, &g.value(w.wv));
        let r = reference_attention(&q, &k, &v, 2);
        for i in 0..4 {
            for c in 0..6 {
                assert!((y.at(i, c) - r[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_cases() {
        let mut rng = SplitMix64::new(8);
        let g = Graph::new();
        let x = g.constant(rand(&[4, 6], &mut rng));
        let w = qkv(&g, 6, 6, &mut rng);
        let a = g.value(cross_attention(&g, x, x, w, 2).unwrap());
        let b = g.value(time_wise_sa(&g, x, w, 2).unwrap());
        assert_eq!(a, b);

        // One context row: every output row is that row's value vector.
        let ctx = g.constant(rand(&[1, 5], &mut rng));
        let wc = Qkv {
            wq: g.constant(rand(&[6, 6], &mut rng)),
            wk: g.constant(rand(&[5, 6], &mut rng)),
            wv: g.constant(rand(&[5, 6], &mut rng)),
        };
        let y = g.value(cross_attention(&g, x, ctx, wc, 3).unwrap());
        let v = g.value(g.matmul(ctx, wc.wv).unwrap());
        for r in 0..4 {
            for c in 0..6 {
                assert!((y.at(r, c) - v.at(0, c)).abs() < 1e-15);
            }
        }

        // Against the straight-line reference with a 3-row context.
        let ctx_v = rand(&[3, 5], &mut rng);
        let ctx = g.constant(ctx_v.clone());
        let y = g.value(cross_attention(&g, x, ctx, wc, 2).unwrap());
        let q = project(&g.value(x), &g.value(wc.wq));
        let k = project(&ctx_v, &g.value(wc.wk));
        let v = project(&ctx_v, &g.value(wc.wv));
        let r = reference_attention(&q, &k, &v, 2);
        for i in 0..4 {
            for c in 0..6 {
                assert!((y.at(i, c) - r[i][c]).abs() < 1e-12);
            }
        }

        let bad = g.constant(rand(&[3, 4], &mut rng));
        assert!(cross_attention(&g, x, bad, wc, 2).is_err());
    }

    #[test]
    fn channel_sa_scalar_groups_return_value_columns() {
        let mut rng = SplitMix64::new(9);
        let g = Graph::new();
        let x = g.constant(rand(&[5, 4], &mut rng));
        let w = qkv(&g, 4, 4, &mut rng);
        let y = g.value(channel_wise_sa(&g, x, w, 4).unwrap());
        let v = g.value(g.matmul(x, w.wv).unwrap());
        assert!(y.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn channel_sa_is_transposed_time_sa() {
        let mut rng = SplitMix64::new(10);
        let g = Graph::new();
        let xv = rand(&[4, 6], &mut rng);
        let x = g.constant(xv.clone());
        let eye6 = g.constant(Tensor::eye(6));
        let y = g.value(channel_wise_sa(&g, x, Qkv { wq: eye6, wk: eye6, wv: eye6 }, 1).unwrap());
        let xt = g.constant(xv.transpose().unwrap());
        let eye4 = g.constant(Tensor::eye(4));
        let dual = time_wise_sa_scaled(&g, xt, Qkv { wq: eye4, wk: eye4, wv: eye4 }, 1, 6f64.sqrt()).unwrap();
        let dual = g.value(dual).transpose().unwrap();
        assert!(y.max_abs_diff(&dual) < 1e-10);
    }

    #[test]
    fn divisibility_errors() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 6]));
        let w = g.constant(Tensor::zeros(&[6, 6]));
        let w = Qkv { wq: w, wk: w, wv: w };
        assert!(time_wise_sa(&g, x, w, 4).is_err());
        assert!(channel_wise_sa(&g, x, w, 4).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = SplitMix64::new(11);
        let g = Graph::new();
        let x = g.constant(rand(&[6, 8], &mut rng).map(|v| v * 10.0));
        let w = qkv(&g, 8, 8, &mut rng);
        let (_, tw) = time_wise_sa_with_weights(&g, x, w, 2).unwrap();
        let (_, cw) = channel_wise_sa_with_weights(&g, x, w, 2).unwrap();
        for a in tw.into_iter().chain(cw) {
            let a = g.value(a);
            for r in 0..a.rows() {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(a.row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn film_gradients() {
        let mut rng = SplitMix64::new(12);
        let x = rand(&[3, 4], &mut rng);
        let e = rand(&[1, 4], &mut rng);
        let w1 = rand(&[4, 4], &mut rng);
        let w2 = rand(&[4, 4], &mut rng);
        let target = rand(&[3, 4], &mut rng);
        let loss = |g: &Graph, y: Var| g.mse(y, g.constant(target.clone()));
        let cases: [(&Tensor, usize); 4] = [(&x, 0), (&e, 1), (&w1, 2), (&w2, 3)];
        for (probe, slot) in cases {
            let err = finite_diff_check(
                |g, v| {
                    let mut args = [g.constant(x.clone()), g.constant(e.clone()), g.constant(w1.clone()), g.constant(w2.clone())];
                    args[slot] = v;
                    loss(g, film(g, args[0], args[1], args[2], args[3])?)
                },
                probe,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "slot {slot}: {err}");
        }
    }

    #[test]
    fn channel_sa_gradients() {
        let mut rng = SplitMix64::new(13);
        let x = rand(&[5, 6], &mut rng);
        let wv = rand(&[6, 6], &mut rng);
        let (wq, wk) = (rand(&[6, 6], &mut rng), rand(&[6, 6], &mut rng));
        let err = finite_diff_check(
            |g, v| {
                let w = Qkv { wq: g.constant(wq.clone()), wk: g.constant(wk.clone()), wv: g.constant(wv.clone()) };
                let y = channel_wise_sa(g, v, w, 2)?;
                g.sum(g.mul(y, y)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
