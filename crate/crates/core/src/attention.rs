//! Bipartite attention between image features `X` (`n` grid positions) and a
//! small set of latent variables `Y` (`m` rows).
//!
//! All tensors are batched: `X` is `[B, n, d]`, `Y` is `[B, m, d]`, and the
//! positional tables are `[n, d]` / `[m, d]`, added (not concatenated) before
//! the query/key/value maps.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Affine, Bound, LayerNorm, ParamStore, NORM_EPS};
use crate::tensor::{Real, Tensor};

/// Attention output together with the softmax weights, `[B·h, p, q]`.
pub struct Attended<'t, T> {
    pub out: Var<'t, T>,
    pub weights: Tensor<T>,
}

/// A set of rows plus the positional table added to them before projection.
#[derive(Clone, Copy)]
pub struct Elements<'t, T> {
    pub rows: Var<'t, T>,
    pub pos: Var<'t, T>,
}

impl<'t, T: Real> Elements<'t, T> {
    pub fn new(rows: Var<'t, T>, pos: Var<'t, T>) -> Self {
        Elements { rows, pos }
    }

    fn encoded(&self) -> Result<Var<'t, T>> {
        self.rows.add_bcast(self.pos, 1)
    }
}

/// `softmax(Q·Kᵀ / √d_k) · V` on `[B, p, d_k] × [B, q, d_k] × [B, q, d_v]`.
pub fn scaled_dot_attention<'t, T: Real>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<Attended<'t, T>> {
    let dk = *q.shape().last().ok_or_else(|| Error::invalid("empty query shape"))?;
    if dk == 0 {
        return Err(Error::invalid("d_k must be positive"));
    }
    let weights = q.bmm_nt(k)?.scale(T::lit(1.0 / (dk as f64).sqrt()))?.softmax()?;
    let out = weights.bmm(v)?;
    Ok(Attended {
        out,
        weights: weights.value(),
    })
}

/// Splits the feature axis into `heads` equal slices, attends per slice and
/// concatenates the results.
pub fn split_head_attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
) -> Result<Attended<'t, T>> {
    if heads == 1 {
        return scaled_dot_attention(q, k, v);
    }
    let (qs, ks) = (q.shape(), k.shape());
    let (b, p, d) = (qs[0], qs[1], qs[2]);
    let (m, dv) = (ks[1], v.shape()[2]);
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(Error::invalid(format!("feature size {d} not divisible by {heads} heads")));
    }
    let split = |x: Var<'t, T>, rows: usize, width: usize| -> Result<Var<'t, T>> {
        x.reshape(vec![b, rows, heads, width / heads])?
            .swap_axes12()?
            .reshape(vec![b * heads, rows, width / heads])
    };
    let att = scaled_dot_attention(split(q, p, d)?, split(k, m, d)?, split(v, m, dv)?)?;
    let out = att
        .out
        .reshape(vec![b, heads, p, dv / heads])?
        .swap_axes12()?
        .reshape(vec![b, p, dv])?;
    Ok(Attended {
        out,
        weights: att.weights,
    })
}

/// `Concat(head₁…head_h)·W^O` with `headᵢ` attending over the i-th slice of
/// `Q·W^Q`, `K·W^K`, `V·W^V`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    w_q: Var<'t, T>,
    w_k: Var<'t, T>,
    w_v: Var<'t, T>,
    w_o: Var<'t, T>,
) -> Result<Attended<'t, T>> {
    let att = split_head_attention(q.linear(w_q)?, k.linear(w_k)?, v.linear(w_v)?, heads)?;
    Ok(Attended {
        out: att.out.linear(w_o)?,
        weights: att.weights,
    })
}

/// Fixed sin/cos table over a `h × w` grid: the first half of the features
/// encodes the row, the second half the column.
pub fn grid_encoding<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::invalid(format!("grid encoding needs d divisible by 4, got {d}")));
    }
    let quarter = d / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|j| 1.0 / 10_000f64.powf(j as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            for pos in [r, c] {
                for &f in &freqs {
                    let a = pos as f64 * f;
                    out.push(T::lit(a.sin()));
                    out.push(T::lit(a.cos()));
                }
            }
        }
    }
    Tensor::new([h * w, d], out)
}

/// Query, key and value maps `ℝᵈ → ℝᵈ`.
#[derive(Clone, Debug)]
pub struct QkvMaps {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
}

impl QkvMaps {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, prefix: &str, d: usize) -> Result<Self> {
        Ok(QkvMaps {
            q: Affine::new(store, rng, &format!("{prefix}.q"), d, d, 0.0)?,
            k: Affine::new(store, rng, &format!("{prefix}.k"), d, d, 0.0)?,
            v: Affine::new(store, rng, &format!("{prefix}.v"), d, d, 0.0)?,
        })
    }
}

/// Multiplicative (`gamma`, bias 1) and additive (`beta`, bias 0) style maps.
#[derive(Clone, Debug)]
pub struct StyleMaps {
    pub gamma: Affine,
    pub beta: Affine,
}

impl StyleMaps {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, prefix: &str, d: usize) -> Result<Self> {
        Ok(StyleMaps {
            gamma: Affine::new(store, rng, &format!("{prefix}.gamma"), d, d, 1.0)?,
            beta: Affine::new(store, rng, &format!("{prefix}.beta"), d, d, 0.0)?,
        })
    }

    /// `γ(a) ⊙ ω(X) + β(a)`.
    fn modulate<'t, T: Real>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let omega = x.standardize(1, T::lit(NORM_EPS))?;
        self.gamma.forward(p, a)?.mul(omega)?.add(self.beta.forward(p, a)?)
    }
}

/// Projected keys and values of one element set, reusable across queries.
#[derive(Clone, Copy)]
pub struct KeyValues<'t, T> {
    pub keys: Var<'t, T>,
    pub values: Var<'t, T>,
}

pub fn project_kv<'t, T: Real>(p: &Bound<'_, 't, T>, maps: &QkvMaps, to: Elements<'t, T>) -> Result<KeyValues<'t, T>> {
    let enc = to.encoded()?;
    Ok(KeyValues {
        keys: maps.k.forward(p, enc)?,
        values: maps.v.forward(p, enc)?,
    })
}

fn attend<'t, T: Real>(
    p: &Bound<'_, 't, T>,
    maps: &QkvMaps,
    from: Elements<'t, T>,
    kv: KeyValues<'t, T>,
    heads: usize,
) -> Result<Attended<'t, T>> {
    let q = maps.q.forward(p, from.encoded()?)?;
    split_head_attention(q, kv.keys, kv.values, heads)
}

/// `a(X, Y) = Attention(q(X), k(Y), v(Y))`.
pub fn bipartite_attention<'t, T: Real>(
    p: &Bound<'_, 't, T>,
    maps: &QkvMaps,
    x: Elements<'t, T>,
    y: Elements<'t, T>,
    heads: usize,
) -> Result<Attended<'t, T>> {
    if y.rows.shape()[1] == 0 {
        return Err(Error::invalid("attention over an empty set"));
    }
    attend(p, maps, x, project_kv(p, maps, y)?, heads)
}

/// `LayerNorm(X + a(X, Y))`.
pub fn additive_update<'t, T: Real>(
    p: &Bound<'_, 't, T>,
    maps: &QkvMaps,
    norm: &LayerNorm,
    x: Elements<'t, T>,
    y: Elements<'t, T>,
    heads: usize,
) -> Result<Attended<'t, T>> {
    additive_with(p, maps, norm, x, project_kv(p, maps, y)?, heads)
}

fn additive_with<'t, T: Real>(
    p: &Bound<'_, 't, T>,
    maps: &QkvMaps,
    norm: &LayerNorm,
    x: Elements<'t, T>,
    kv: KeyValues<'t, T>,
    heads: usize,
) -> Result<Attended<'t, T>> {
    let att = attend(p, maps, x, kv, heads)?;
    Ok(Attended {
        out: norm.forward(p, x.rows.add(att.out)?)?,
        weights: att.weights,
    })
}

/// `γ(a(X, Y)) ⊙ ω(X) + β(a(X, Y))`.
pub fn simplex_update<'t, T: Real>(
    p: &Bound<'_, 't, T>,
    maps: &QkvMaps,
    styles: &StyleMaps,
    x: Elements<'t, T>,
    y: Elements<'t, T>,
    heads: usize,
) -> Result<Attended<'t, T>> {
    let att = bipartite_attention(p, maps, x, y, heads)?;
    Ok(Attended {
        out: styles.modulate(p, x.rows, att.out)?,
        weights: att.weights,
    })
}

/// `K = a(Y, X)`: each row is a softmax-weighted average of the `v(X)` rows.
pub fn compute_centroids<'t, T: Real>(
    p: &Bound<'_, 't, T>,
    maps: &QkvMaps,
    y: Elements<'t, T>,
    x: Elements<'t, T>,
    heads: usize,
) -> Result<Attended<'t, T>> {
    if x.rows.shape()[1] == 0 {
        return Err(Error::invalid("centroids of an empty feature set"));
    }
    bipartite_attention(p, maps, y, x, heads)
}

/// Duplex update given explicit keys: `γ(A) ⊙ ω(X) + β(A)` with
/// `A = Attention(q(X), keys, v(Y))`.
pub fn duplex_update_with_keys<'t, T: Real>(
    p: &Bound<'_, 't, T>,
    maps: &QkvMaps,
    styles: &StyleMaps,
    x: Elements<'t, T>,
    y: Elements<'t, T>,
    keys: Var<'t, T>,
    heads: usize,
) -> Result<Attended<'t, T>> {
    let values = maps.v.forward(p, y.encoded()?)?;
    let att = attend(p, maps, x, KeyValues { keys, values }, heads)?;
    Ok(Attended {
        out: styles.modulate(p, x.rows, att.out)?,
        weights: att.weights,
    })
}

/// Parameters of one attention layer. `latent`/`latent_norm` drive the
/// `Y ← LayerNorm(Y + a(Y, X))` update and the centroid computation.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub kind: LayerKind,
    pub dim: usize,
    pub heads: usize,
    pub image: QkvMaps,
    pub styles: StyleMaps,
    pub latent: Option<QkvMaps>,
    pub latent_norm: Option<LayerNorm>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// `X ← simplex(X, Y)`, `Y` unchanged.
    Simplex,
    /// `Y ← additive(Y, X)`, then `X ← duplex(X, Y)`.
    Duplex,
    /// `Y ← additive(Y, X)`, then `X ← simplex(X, Y)`.
    Aggregator,
}

/// Result of one layer application.
pub struct LayerOutput<'t, T> {
    pub x: Var<'t, T>,
    pub y: Var<'t, T>,
    pub weights: Vec<Tensor<T>>,
}

impl AttentionLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        kind: LayerKind,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("dimension {dim} not divisible by {heads} heads")));
        }
        let image = QkvMaps::new(store, rng, &format!("{prefix}.image"), dim)?;
        let styles = StyleMaps::new(store, rng, prefix, dim)?;
        let (latent, latent_norm) = match kind {
            LayerKind::Simplex => (None, None),
            LayerKind::Duplex | LayerKind::Aggregator => (
                Some(QkvMaps::new(store, rng, &format!("{prefix}.latent"), dim)?),
                Some(LayerNorm::new(store, &format!("{prefix}.latent_norm"), dim)?),
            ),
        };
        Ok(AttentionLayer {
            kind,
            dim,
            heads,
            image,
            styles,
            latent,
            latent_norm,
        })
    }

    fn latent_parts(&self) -> Result<(&QkvMaps, &LayerNorm)> {
        match (&self.latent, &self.latent_norm) {
            (Some(m), Some(n)) => Ok((m, n)),
            _ => Err(Error::invalid("layer has no latent update")),
        }
    }

    pub fn simplex_update<'t, T: Real>(
        &self,
        p: &Bound<'_, 't, T>,
        x: Elements<'t, T>,
        y: Elements<'t, T>,
    ) -> Result<Attended<'t, T>> {
        simplex_update(p, &self.image, &self.styles, x, y, self.heads)
    }

    /// `Y ← LayerNorm(Y + a(Y, X))`.
    pub fn update_latents<'t, T: Real>(
        &self,
        p: &Bound<'_, 't, T>,
        y: Elements<'t, T>,
        x: Elements<'t, T>,
    ) -> Result<Attended<'t, T>> {
        let (maps, norm) = self.latent_parts()?;
        additive_update(p, maps, norm, y, x, self.heads)
    }

    pub fn compute_centroids<'t, T: Real>(
        &self,
        p: &Bound<'_, 't, T>,
        y: Elements<'t, T>,
        x: Elements<'t, T>,
    ) -> Result<Attended<'t, T>> {
        let (maps, _) = self.latent_parts()?;
        compute_centroids(p, maps, y, x, self.heads)
    }

    /// `γ(A(X, K, V)) ⊙ ω(X) + β(A(X, K, V))` with `K = a(Y, X)`, `V = v(Y)`.
    pub fn duplex_update<'t, T: Real>(
        &self,
        p: &Bound<'_, 't, T>,
        x: Elements<'t, T>,
        y: Elements<'t, T>,
    ) -> Result<Attended<'t, T>> {
        let centroids = self.compute_centroids(p, y, x)?;
        duplex_update_with_keys(p, &self.image, &self.styles, x, y, centroids.out, self.heads)
    }

    /// `Y' = additive(Y, X)`, then `X' = duplex(X, Y')`. The latent keys and
    /// values of `X` are projected once and shared by both attentions.
    pub fn duplex_round<'t, T: Real>(
        &self,
        p: &Bound<'_, 't, T>,
        x: Elements<'t, T>,
        y: Elements<'t, T>,
    ) -> Result<LayerOutput<'t, T>> {
        let (maps, norm) = self.latent_parts()?;
        let x_kv = project_kv(p, maps, x)?;
        let y_new = additive_with(p, maps, norm, y, x_kv, self.heads)?;
        let y2 = Elements::new(y_new.out, y.pos);
        let centroids = attend(p, maps, y2, x_kv, self.heads)?;
        let x_new = duplex_update_with_keys(p, &self.image, &self.styles, x, y2, centroids.out, self.heads)?;
        Ok(LayerOutput {
            x: x_new.out,
            y: y_new.out,
            weights: vec![y_new.weights, centroids.weights, x_new.weights],
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'_, 't, T>,
        x: Elements<'t, T>,
        y: Elements<'t, T>,
    ) -> Result<LayerOutput<'t, T>> {
        match self.kind {
            LayerKind::Simplex => {
                let out = self.simplex_update(p, x, y)?;
                Ok(LayerOutput {
                    x: out.out,
                    y: y.rows,
                    weights: vec![out.weights],
                })
            }
            LayerKind::Duplex => self.duplex_round(p, x, y),
            LayerKind::Aggregator => {
                let y_new = self.update_latents(p, y, x)?;
                let x_new = self.simplex_update(p, x, Elements::new(y_new.out, y.pos))?;
                Ok(LayerOutput {
                    x: x_new.out,
                    y: y_new.out,
                    weights: vec![y_new.weights, x_new.weights],
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::gradient_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn eye(d: usize) -> Tensor<f64> {
        Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
    }

    fn set_identity(store: &mut ParamStore<f64>, map: &Affine) {
        map.set_effective(store, &eye(map.fan_in), &Tensor::zeros([map.fan_out])).unwrap();
    }

    fn set_constant(store: &mut ParamStore<f64>, map: &Affine, bias: f64) {
        let w = Tensor::zeros([map.fan_in, map.fan_out]);
        map.set_effective(store, &w, &Tensor::full([map.fan_out], bias)).unwrap();
    }

    /// Plain softmax-weighted average for one batch element, rows as Vec<Vec<f64>>.
    fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dk = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn rows(x: &Tensor<f64>) -> Vec<Vec<f64>> {
        let d = *x.shape().last().unwrap();
        x.data().chunks(d).map(|r| r.to_vec()).collect()
    }

    #[test]
    fn scaled_dot_attention_examples() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let k = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t(&[1, 2, 1], &[2.0, 0.0]));
        let out = scaled_dot_attention(q, k, v).unwrap();
        assert!((out.out.item() - 1.3396).abs() < 1e-3);
        assert!((out.weights.data()[0] - 0.6698).abs() < 1e-3);

        let single_k = tape.constant(t(&[1, 1, 2], &[5.0, -3.0]));
        let single_v = tape.constant(t(&[1, 1, 3], &[7.0, 8.0, 9.0]));
        let qs = tape.constant(Tensor::randn([1, 4, 2], &mut rng(0)));
        let out = scaled_dot_attention(qs, single_k, single_v).unwrap().out.value();
        for r in rows(&out) {
            assert_eq!(r, vec![7.0, 8.0, 9.0]);
        }

        let k = tape.constant(Tensor::randn([1, 3, 2], &mut rng(1)));
        let same_v = tape.constant(t(&[1, 3, 2], &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]));
        let out = scaled_dot_attention(qs, k, same_v).unwrap().out.value();
        for r in rows(&out) {
            assert!((r[0] - 1.5).abs() < 1e-12 && (r[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_examples() {
        let tape = Tape::<f64>::new();
        let q = Tensor::randn([1, 2, 4], &mut rng(2));
        let k = Tensor::randn([1, 3, 4], &mut rng(3));
        let v = Tensor::randn([1, 3, 4], &mut rng(4));
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let id = tape.constant(eye(4));
        let h1 = multi_head_attention(qv, kv, vv, 1, id, id, id, id).unwrap().out.value();
        let plain = scaled_dot_attention(qv, kv, vv).unwrap().out.value();
        assert!(h1.max_abs_diff(&plain) < 1e-12);

        // two heads against a per-slice brute force with random projections
        let ws: Vec<Tensor<f64>> = (0..4).map(|i| Tensor::randn([4, 4], &mut rng(10 + i))).collect();
        let wv: Vec<_> = ws.iter().map(|w| tape.constant(w.clone())).collect();
        let out = multi_head_attention(qv, kv, vv, 2, wv[0], wv[1], wv[2], wv[3]).unwrap().out.value();
        assert_eq!(out.shape(), &[1, 2, 4]);
        let proj = |x: &Tensor<f64>, w: &Tensor<f64>| {
            let x2 = x.clone().reshape(vec![x.numel() / 4, 4]).unwrap();
            rows(&crate::tensor::matmul(&x2, w).unwrap())
        };
        let (pq, pk, pv) = (proj(&q, &ws[0]), proj(&k, &ws[1]), proj(&v, &ws[2]));
        let slice = |m: &[Vec<f64>], h: usize| m.iter().map(|r| r[2 * h..2 * h + 2].to_vec()).collect::<Vec<_>>();
        let heads: Vec<_> = (0..2).map(|h| naive_attention(&slice(&pq, h), &slice(&pk, h), &slice(&pv, h))).collect();
        let concat: Vec<f64> = (0..2).flat_map(|r| heads.iter().flat_map(move |hh| hh[r].clone())).collect();
        let expected = crate::tensor::matmul(&t(&[2, 4], &concat), &ws[3]).unwrap();
        assert!(out.reshape(vec![2, 4]).unwrap().max_abs_diff(&expected) < 1e-9);

        assert!(split_head_attention(qv, kv, vv, 3).is_err());
    }

    fn layer(kind: LayerKind, d: usize, seed: u64) -> (ParamStore<f64>, AttentionLayer) {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, &mut rng(seed), "att", kind, d, 1).unwrap();
        (store, layer)
    }

    #[test]
    fn bipartite_with_y_equal_x_is_self_attention() {
        let (mut store, layer) = layer(LayerKind::Simplex, 4, 0);
        for m in [&layer.image.q, &layer.image.k, &layer.image.v] {
            set_identity(&mut store, m);
        }
        let x = Tensor::randn([1, 6, 4], &mut rng(5));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.constant(x.clone());
        let zero = tape.constant(Tensor::zeros([6, 4]));
        let e = Elements::new(xv, zero);
        let out = bipartite_attention(&p, &layer.image, e, e, 1).unwrap().out.value();
        let r = rows(&x);
        let expected = naive_attention(&r, &r, &r);
        for (a, b) in rows(&out).iter().zip(&expected) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bipartite_singleton_returns_projected_value() {
        let (store, layer) = layer(LayerKind::Simplex, 4, 1);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = Elements::new(tape.constant(Tensor::randn([2, 5, 4], &mut rng(1))), tape.constant(Tensor::randn([5, 4], &mut rng(2))));
        let y = Elements::new(tape.constant(Tensor::randn([2, 1, 4], &mut rng(3))), tape.constant(Tensor::randn([1, 4], &mut rng(4))));
        let out = bipartite_attention(&p, &layer.image, x, y, 1).unwrap().out.value();
        let vy = layer.image.v.forward(&p, y.rows.add_bcast(y.pos, 1).unwrap()).unwrap().value();
        for b in 0..2 {
            for i in 0..5 {
                for c in 0..4 {
                    assert!((out.data()[(b * 5 + i) * 4 + c] - vy.data()[b * 4 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn additive_update_examples() {
        let (mut store, layer) = layer(LayerKind::Duplex, 4, 2);
        let (maps, norm) = (layer.latent.clone().unwrap(), layer.latent_norm.clone().unwrap());
        let x = Tensor::randn([1, 3, 4], &mut rng(6));
        let y = Tensor::randn([1, 5, 4], &mut rng(7));
        {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let xe = Elements::new(tape.constant(x.clone()), tape.constant(Tensor::zeros([3, 4])));
            let ye = Elements::new(tape.constant(y.clone()), tape.constant(Tensor::randn([5, 4], &mut rng(8))));
            let out = additive_update(&p, &maps, &norm, xe, ye, 1).unwrap().out.value();
            for r in rows(&out) {
                assert!((r.iter().sum::<f64>() / 4.0).abs() < 1e-6);
            }
        }
        set_constant(&mut store, &maps.v, 0.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xe = Elements::new(tape.constant(x.clone()), tape.constant(Tensor::zeros([3, 4])));
        let ye = Elements::new(tape.constant(y), tape.constant(Tensor::zeros([5, 4])));
        let out = additive_update(&p, &maps, &norm, xe, ye, 1).unwrap().out.value();
        let ln = crate::tensor::instance_normalize(&x.clone().reshape(vec![3, 4]).unwrap().transpose_last2(), NORM_EPS)
            .unwrap()
            .transpose_last2();
        assert!(out.reshape(vec![3, 4]).unwrap().max_abs_diff(&ln) < 1e-12);
    }

    #[test]
    fn simplex_identity_and_zero_styles() {
        let (base, layer) = layer(LayerKind::Simplex, 4, 3);
        let x = Tensor::randn([2, 6, 4], &mut rng(9));
        let y = Tensor::randn([2, 3, 4], &mut rng(10));
        let ypos = Tensor::randn([3, 4], &mut rng(11));
        let run = |store: &ParamStore<f64>| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let xe = Elements::new(tape.constant(x.clone()), tape.constant(grid_encoding(2, 3, 4).unwrap()));
            let ye = Elements::new(tape.constant(y.clone()), tape.constant(ypos.clone()));
            let out = layer.simplex_update(&p, xe, ye).unwrap().out.value();
            let att = bipartite_attention(&p, &layer.image, xe, ye, 1).unwrap().out;
            let beta = layer.styles.beta.forward(&p, att).unwrap().value();
            (out, beta)
        };
        let mut identity = base.clone();
        set_constant(&mut identity, &layer.styles.gamma, 1.0);
        set_constant(&mut identity, &layer.styles.beta, 0.0);
        let (out, _) = run(&identity);
        let tape = Tape::new();
        let omega = tape.constant(x.clone()).standardize(1, NORM_EPS).unwrap().value();
        assert_eq!(out, omega);

        let mut zero_gamma = base;
        set_constant(&mut zero_gamma, &layer.styles.gamma, 0.0);
        let (out, beta) = run(&zero_gamma);
        assert_eq!(out, beta);
    }

    #[test]
    fn simplex_matches_hand_oracle() {
        // n=2, m=1, d=4 (smallest d the grid table allows) with zero encodings:
        // a single latent makes every attention row equal v(y).
        let (mut store, layer) = layer(LayerKind::Simplex, 4, 4);
        set_identity(&mut store, &layer.image.v);
        layer.styles.gamma.set_effective(&mut store, &eye(4), &Tensor::ones([4])).unwrap();
        set_identity(&mut store, &layer.styles.beta);
        let x = t(&[1, 2, 4], &[1.0, 2.0, 0.0, 5.0, 3.0, 6.0, 0.0, -1.0]);
        let y = t(&[1, 1, 4], &[0.5, -1.0, 2.0, 0.0]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xe = Elements::new(tape.constant(x), tape.constant(Tensor::zeros([2, 4])));
        let ye = Elements::new(tape.constant(y), tape.constant(Tensor::zeros([1, 4])));
        let out = layer.simplex_update(&p, xe, ye).unwrap().out.value();
        // column stats: col0 {1,3} -> ω = -1,1; col1 {2,6} -> -1,1; col2 const -> 0; col3 {5,-1} -> 1,-1
        // γ = 1 + a, β = a with a = y
        let omega = [[-1.0, -1.0, 0.0, 1.0], [1.0, 1.0, 0.0, -1.0]];
        let a = [0.5, -1.0, 2.0, 0.0];
        for i in 0..2 {
            for c in 0..4 {
                let expected = (1.0 + a[c]) * omega[i][c] + a[c];
                assert!((out.data()[i * 4 + c] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn centroid_examples() {
        let (mut store, layer) = layer(LayerKind::Duplex, 4, 5);
        let maps = layer.latent.clone().unwrap();
        set_identity(&mut store, &maps.v);
        let tape = Tape::new();
        {
            let p = store.bind(&tape);
            let r = [0.3, -0.7, 1.1, 2.0];
            let x = Tensor::from_fn([1, 5, 4], |i| r[i % 4]);
            let xe = Elements::new(tape.constant(x), tape.constant(Tensor::zeros([5, 4])));
            let ye = Elements::new(tape.constant(Tensor::randn([1, 3, 4], &mut rng(12))), tape.constant(Tensor::zeros([3, 4])));
            let k = layer.compute_centroids(&p, ye, xe).unwrap().out.value();
            for row in rows(&k) {
                for c in 0..4 {
                    assert!((row[c] - r[c]).abs() < 1e-12);
                }
            }
        }
        set_constant(&mut store, &maps.q, 0.0);
        let p = store.bind(&tape);
        let x = Tensor::randn([1, 5, 4], &mut rng(13));
        let xe = Elements::new(tape.constant(x.clone()), tape.constant(Tensor::zeros([5, 4])));
        let ye = Elements::new(tape.constant(Tensor::randn([1, 1, 4], &mut rng(14))), tape.constant(Tensor::zeros([1, 4])));
        let k = layer.compute_centroids(&p, ye, xe).unwrap().out.value();
        for c in 0..4 {
            let mean = (0..5).map(|i| x.data()[i * 4 + c]).sum::<f64>() / 5.0;
            assert!((k.data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn centroids_match_softmax_average_oracle() {
        let (store, layer) = layer(LayerKind::Duplex, 4, 6);
        let maps = layer.latent.clone().unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xe = Elements::new(tape.constant(Tensor::randn([1, 3, 4], &mut rng(15))), tape.constant(grid_encoding(1, 3, 4).unwrap()));
        let ye = Elements::new(tape.constant(Tensor::randn([1, 2, 4], &mut rng(16))), tape.constant(Tensor::randn([2, 4], &mut rng(17))));
        let att = layer.compute_centroids(&p, ye, xe).unwrap();
        let q = rows(&maps.q.forward(&p, ye.rows.add_bcast(ye.pos, 1).unwrap()).unwrap().value());
        let kx = rows(&maps.k.forward(&p, xe.rows.add_bcast(xe.pos, 1).unwrap()).unwrap().value());
        let vx = rows(&maps.v.forward(&p, xe.rows.add_bcast(xe.pos, 1).unwrap()).unwrap().value());
        let expected = naive_attention(&q, &kx, &vx);
        for (a, b) in rows(&att.out.value()).iter().zip(&expected) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-9);
            }
        }
        // reconstruction from the stored weights and the convex-hull bound
        for (i, w) in rows(&att.weights).iter().enumerate() {
            for c in 0..4 {
                let rec: f64 = w.iter().zip(&vx).map(|(wj, v)| wj * v[c]).sum();
                assert!((rec - expected[i][c]).abs() < 1e-12);
                let lo = vx.iter().map(|v| v[c]).fold(f64::MAX, f64::min);
                let hi = vx.iter().map(|v| v[c]).fold(f64::MIN, f64::max);
                assert!(expected[i][c] >= lo - 1e-12 && expected[i][c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn duplex_with_forced_keys_equals_simplex() {
        let (store, layer) = layer(LayerKind::Duplex, 8, 7);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xe = Elements::new(tape.constant(Tensor::randn([2, 16, 8], &mut rng(18))), tape.constant(grid_encoding(4, 4, 8).unwrap()));
        let ye = Elements::new(tape.constant(Tensor::randn([2, 3, 8], &mut rng(19))), tape.constant(Tensor::randn([3, 8], &mut rng(20))));
        let keys = layer.image.k.forward(&p, ye.rows.add_bcast(ye.pos, 1).unwrap()).unwrap();
        let duplex = duplex_update_with_keys(&p, &layer.image, &layer.styles, xe, ye, keys, 1).unwrap().out.value();
        let simplex = layer.simplex_update(&p, xe, ye).unwrap().out.value();
        assert!(duplex.max_abs_diff(&simplex) < 1e-9);
    }

    #[test]
    fn duplex_singleton_latent_is_per_feature_affine() {
        let (store, layer) = layer(LayerKind::Duplex, 4, 8);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xe = Elements::new(tape.constant(Tensor::randn([1, 4, 4], &mut rng(21))), tape.constant(grid_encoding(2, 2, 4).unwrap()));
        let ye = Elements::new(tape.constant(Tensor::randn([1, 1, 4], &mut rng(22))), tape.constant(Tensor::randn([1, 4], &mut rng(23))));
        let out = layer.duplex_update(&p, xe, ye).unwrap();
        let w = out.weights;
        assert!(w.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        // γ and β are then the same for every position: out = g ⊙ ω + b per column
        let omega = rows(&xe.rows.standardize(1, NORM_EPS).unwrap().value());
        let o = rows(&out.out.value());
        for c in 0..4 {
            let (w0, w1) = (omega[0][c], omega[1][c]);
            let g = (o[0][c] - o[1][c]) / (w0 - w1);
            let b = o[0][c] - g * w0;
            for i in 2..4 {
                assert!((o[i][c] - (g * omega[i][c] + b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplex_round_shapes_and_non_idempotence() {
        let (store, layer) = layer(LayerKind::Duplex, 4, 9);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let gpos = tape.constant(grid_encoding(3, 3, 4).unwrap());
        let lpos = tape.constant(Tensor::randn([2, 4], &mut rng(24)));
        let xe = Elements::new(tape.constant(Tensor::randn([1, 9, 4], &mut rng(25))), gpos);
        let ye = Elements::new(tape.constant(Tensor::randn([1, 2, 4], &mut rng(26))), lpos);
        let one = layer.duplex_round(&p, xe, ye).unwrap();
        assert_eq!(one.x.shape(), vec![1, 9, 4]);
        assert_eq!(one.y.shape(), vec![1, 2, 4]);
        let two = layer.duplex_round(&p, Elements::new(one.x, gpos), Elements::new(one.y, lpos)).unwrap();
        assert!(two.x.value().max_abs_diff(&one.x.value()) > 1e-3);
    }

    #[test]
    fn layers_pass_gradient_check() {
        let y = Tensor::randn([2, 3, 4], &mut rng(30));
        let ypos = Tensor::randn([3, 4], &mut rng(31));
        let probe = Tensor::randn([2, 4, 4], &mut rng(32));
        for kind in [LayerKind::Simplex, LayerKind::Duplex, LayerKind::Aggregator] {
            let (store, layer) = layer(kind, 4, 10);
            // with respect to X
            let err = gradient_check(
                |tape, x| {
                    let p = store.bind(tape);
                    let xe = Elements::new(x, tape.constant(grid_encoding(2, 2, 4)?));
                    let ye = Elements::new(tape.constant(y.clone()), tape.constant(ypos.clone()));
                    let out = layer.forward(&p, xe, ye)?;
                    out.x.mul(tape.constant(probe.clone()))?.add(out.x.mul(out.x)?)?.sum()?.add(out.y.sum()?)
                },
                &Tensor::randn([2, 4, 4], &mut rng(33)),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?} dX err {err}");
            // with respect to Y
            let x = Tensor::randn([2, 4, 4], &mut rng(34));
            let err = gradient_check(
                |tape, yv| {
                    let p = store.bind(tape);
                    let xe = Elements::new(tape.constant(x.clone()), tape.constant(grid_encoding(2, 2, 4)?));
                    let ye = Elements::new(yv, tape.constant(ypos.clone()));
                    let out = layer.forward(&p, xe, ye)?;
                    out.x.mul(tape.constant(probe.clone()))?.sum()?.add(out.y.powf(2.0)?.sum()?)
                },
                &y,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?} dY err {err}");
        }
    }

    #[test]
    fn grid_encoding_examples() {
        let g = grid_encoding::<f64>(4, 5, 8).unwrap();
        assert_eq!(g.shape(), &[20, 8]);
        for c in 0..8 {
            let expected = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(g.data()[c], expected);
        }
        assert!(g.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(g, grid_encoding::<f64>(4, 5, 8).unwrap());
        assert!(grid_encoding::<f64>(4, 4, 6).is_err());
    }

    fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let s = x.shape();
        let (b, m, d) = if s.len() == 3 { (s[0], s[1], s[2]) } else { (1, s[0], s[1]) };
        let mut out = x.clone();
        for bi in 0..b {
            for (i, &src) in perm.iter().enumerate() {
                let dst = (bi * m + i) * d;
                let from = (bi * m + src) * d;
                out.data_mut()[dst..dst + d].copy_from_slice(&x.data()[from..from + d]);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn updates_are_invariant_to_latent_permutation(seed in 0u64..1000, m in 1usize..5) {
            let mut perm: Vec<usize> = (0..m).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng(seed));
            let x = Tensor::randn([2, 4, 4], &mut rng(seed + 1));
            let y = Tensor::randn([2, m, 4], &mut rng(seed + 2));
            let pos = Tensor::randn([m, 4], &mut rng(seed + 3));
            for kind in [LayerKind::Simplex, LayerKind::Duplex, LayerKind::Aggregator] {
                let (store, layer) = layer(kind, 4, seed);
                let run = |y: &Tensor<f64>, pos: &Tensor<f64>| {
                    let tape = Tape::new();
                    let p = store.bind(&tape);
                    let xe = Elements::new(tape.constant(x.clone()), tape.constant(grid_encoding(2, 2, 4).unwrap()));
                    let ye = Elements::new(tape.constant(y.clone()), tape.constant(pos.clone()));
                    let out = layer.forward(&p, xe, ye).unwrap();
                    (out.x.value(), out.y.value())
                };
                let (x1, y1) = run(&y, &pos);
                let (x2, y2) = run(&permute_rows(&y, &perm), &permute_rows(&pos, &perm));
                prop_assert!(x1.max_abs_diff(&x2) < 1e-9);
                prop_assert!(permute_rows(&y1, &perm).max_abs_diff(&y2) < 1e-9);
            }
        }

        #[test]
        fn zero_gamma_leaves_only_beta(seed in 0u64..1000) {
            let (mut store, layer) = layer(LayerKind::Simplex, 4, seed);
            set_constant(&mut store, &layer.styles.gamma, 0.0);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let xe = Elements::new(tape.constant(Tensor::randn([1, 4, 4], &mut rng(seed))), tape.constant(grid_encoding(2, 2, 4).unwrap()));
            let ye = Elements::new(tape.constant(Tensor::randn([1, 2, 4], &mut rng(seed + 1))), tape.constant(Tensor::zeros([2, 4])));
            let out = layer.simplex_update(&p, xe, ye).unwrap().out.value();
            let a = bipartite_attention(&p, &layer.image, xe, ye, 1).unwrap().out;
            prop_assert_eq!(out, layer.styles.beta.forward(&p, a).unwrap().value());
        }

        #[test]
        fn centroids_lie_in_convex_hull(seed in 0u64..1000, n in 1usize..7, m in 1usize..4) {
            let (store, layer) = layer(LayerKind::Duplex, 4, seed);
            let maps = layer.latent.clone().unwrap();
            let tape = Tape::new();
            let p = store.bind(&tape);
            let xe = Elements::new(tape.constant(Tensor::randn([1, n, 4], &mut rng(seed))), tape.constant(Tensor::randn([n, 4], &mut rng(seed + 5))));
            let ye = Elements::new(tape.constant(Tensor::randn([1, m, 4], &mut rng(seed + 1))), tape.constant(Tensor::zeros([m, 4])));
            let att = layer.compute_centroids(&p, ye, xe).unwrap();
            let vx = rows(&maps.v.forward(&p, xe.rows.add_bcast(xe.pos, 1).unwrap()).unwrap().value());
            for (row, w) in rows(&att.out.value()).iter().zip(rows(&att.weights)) {
                for c in 0..4 {
                    let lo = vx.iter().map(|v| v[c]).fold(f64::MAX, f64::min);
                    let hi = vx.iter().map(|v| v[c]).fold(f64::MIN, f64::max);
                    prop_assert!(row[c] >= lo - 1e-12 && row[c] <= hi + 1e-12);
                    let rec: f64 = w.iter().zip(&vx).map(|(wj, v)| wj * v[c]).sum();
                    prop_assert!((rec - row[c]).abs() < 1e-12);
                }
            }
        }
    }
}
