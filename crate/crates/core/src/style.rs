//! Style-based synthesis layers: mapping network, AdaIN, modulated convolution
//! with weight demodulation, noise injection, weight averaging and style mixing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Affine, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;

/// Leaky ReLU followed by the `√2` variance-preserving gain.
pub fn lrelu_act<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.leaky_relu(T::lit(LRELU_SLOPE))?.scale(T::lit(std::f64::consts::SQRT_2))
}

/// Mapping layers learn this much slower than the rest of the generator.
pub const MAPPING_LR_MUL: f64 = 0.01;

/// Shared fully connected network applied independently to every latent row.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub layers: Vec<Affine>,
    pub latent_size: usize,
    pub dlatent_size: usize,
}

impl MappingNetwork {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        depth: usize,
        latent_size: usize,
        dlatent_size: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("mapping network needs at least one layer"));
        }
        let layers = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { latent_size } else { dlatent_size };
                Affine::with_lr_mul(store, rng, &format!("{prefix}.fc{i}"), fan_in, dlatent_size, 0.0, MAPPING_LR_MUL)
            })
            .collect::<Result<_>>()?;
        Ok(MappingNetwork {
            layers,
            latent_size,
            dlatent_size,
        })
    }

    /// `z`: `[B, k, latent_size]` → `[B, k, dlatent_size]`. Each row is first
    /// scaled to unit second moment.
    pub fn map_latents<'t, T: Real>(&self, p: &Bound<'_, 't, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = z.shape();
        if shape.len() != 3 || shape[2] != self.latent_size {
            return Err(Error::shape("map_latents", &shape, &[0, 0, self.latent_size]));
        }
        let rms = z.mul(z)?.mean_axis(2)?.add_scalar(T::lit(1e-8))?.powf(T::lit(-0.5))?;
        let mut h = z.mul_bcast(rms, 0)?;
        for layer in &self.layers {
            h = lrelu_act(layer.forward(p, h)?)?;
        }
        Ok(h)
    }
}

/// `σ_y · (x − μ(x)) / σ(x) + μ_y` per channel; `x` is `[B, C, H, W]`, the style
/// statistics `[B, C]`.
pub fn adain<'t, T: Real>(x: Var<'t, T>, mean: Var<'t, T>, std: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::invalid("adain expects [B, C, H, W]"));
    }
    let (b, c) = (shape[0], shape[1]);
    x.reshape(vec![b, c, shape[2] * shape[3]])?
        .standardize(2, T::lit(DEMOD_EPS))?
        .mul_bcast(std, 0)?
        .add_bcast(mean, 0)?
        .reshape(shape)
}

/// Convolution whose weights are scaled per input channel by a style computed
/// from `w`, optionally demodulated to unit norm per output channel.
#[derive(Clone, Debug)]
pub struct ModConv {
    pub weight: String,
    pub bias: String,
    pub style: Affine,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub demodulate: bool,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        dlatent_size: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        demodulate: bool,
    ) -> Result<Self> {
        let conv = ModConv {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            style: Affine::new(store, rng, &format!("{prefix}.style"), dlatent_size, in_channels, 1.0)?,
            in_channels,
            out_channels,
            kernel,
            demodulate,
        };
        store.insert(&conv.weight, Tensor::randn([out_channels, in_channels, kernel, kernel], rng))?;
        store.insert(&conv.bias, Tensor::zeros([out_channels]))?;
        Ok(conv)
    }

    pub fn gain(&self) -> f64 {
        1.0 / ((self.in_channels * self.kernel * self.kernel) as f64).sqrt()
    }

    pub fn styles<'t, T: Real>(&self, p: &Bound<'_, 't, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
        self.style.forward(p, w)
    }

    /// `x`: `[B, C, H, W]`, `w`: `[B, dlatent]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = self.styles(p, w)?;
        self.forward_with_styles(p, x, s)
    }

    /// Same as [`forward`](Self::forward) with the per-channel styles `[B, C]` given.
    pub fn forward_with_styles<'t, T: Real>(
        &self,
        p: &Bound<'_, 't, T>,
        x: Var<'t, T>,
        s: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let weight = p.get(&self.weight)?;
        let gain = T::lit(self.gain());
        let mut y = x.mul_bcast(s, 0)?.conv2d(weight)?.scale(gain)?;
        if self.demodulate {
            let (o, c, kk) = (self.out_channels, self.in_channels, self.kernel * self.kernel);
            let w_sq = weight
                .mul(weight)?
                .reshape(vec![o, c, kk])?
                .sum_axis(2)?
                .transpose_last2()?
                .scale(gain * gain)?;
            let demod = s.mul(s)?.matmul(w_sq)?.add_scalar(T::lit(DEMOD_EPS))?.powf(T::lit(-0.5))?;
            y = y.mul_bcast(demod, 0)?;
        }
        y.add_bcast(p.get(&self.bias)?, 1)
    }

    /// Effective per-sample kernels `[B, O, C, k, k]` for inspection.
    pub fn effective_weights<T: Real>(&self, store: &ParamStore<T>, styles: &Tensor<T>) -> Result<Tensor<T>> {
        let w = store.get(&self.weight)?;
        let (o, c, kk) = (self.out_channels, self.in_channels, self.kernel * self.kernel);
        let b = styles.shape()[0];
        let gain = T::lit(self.gain());
        let mut out = Vec::with_capacity(b * o * c * kk);
        for bi in 0..b {
            for oi in 0..o {
                let start = out.len();
                for ci in 0..c {
                    let s = styles.data()[bi * c + ci];
                    for k in 0..kk {
                        out.push(w.data()[(oi * c + ci) * kk + k] * gain * s);
                    }
                }
                if self.demodulate {
                    let norm_sq: T = out[start..].iter().map(|&v| v * v).sum();
                    let d = (norm_sq + T::lit(DEMOD_EPS)).sqrt().recip();
                    out[start..].iter_mut().for_each(|v| *v *= d);
                }
            }
        }
        Tensor::new(vec![b, o, c, self.kernel, self.kernel], out)
    }
}

/// Standard-normal tensor drawn deterministically from `seed`.
pub fn noise_tensor<T: Real>(shape: impl Into<Vec<usize>>, seed: u64) -> Tensor<T> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `x + strength · N(0, 1)` with the noise drawn from `seed`.
pub fn noise_inject<T: Real>(x: &Tensor<T>, strength: T, seed: u64) -> Tensor<T> {
    let noise = noise_tensor::<T>(x.shape().to_vec(), seed);
    x.zip_map(&noise, "noise_inject", |a, n| a + strength * n)
        .expect("same shape")
}

/// Learned scalar noise strength, initialised to zero.
#[derive(Clone, Debug)]
pub struct NoiseLayer {
    pub strength: String,
}

impl NoiseLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        let layer = NoiseLayer {
            strength: format!("{prefix}.noise_strength"),
        };
        store.insert(&layer.strength, Tensor::zeros([1]))?;
        Ok(layer)
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>, noise: Tensor<T>) -> Result<Var<'t, T>> {
        let n = x.tape().constant(noise).mul_scalar_var(p.get(&self.strength)?)?;
        x.add(n)
    }
}

/// `avg ← decay·avg + (1 − decay)·cur` for every parameter.
pub fn ema_update<T: Real>(avg: &mut ParamStore<T>, cur: &ParamStore<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("decay {decay} outside [0, 1]")));
    }
    if !avg.same_layout(cur) {
        return Err(Error::invalid("EMA parameter layouts differ"));
    }
    let (a, b) = (T::lit(decay), T::lit(1.0 - decay));
    for (dst, src) in avg.values_mut().iter_mut().zip(cur.values()) {
        if decay == 0.0 {
            *dst = src.clone();
        } else if decay < 1.0 {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = a * *d + b * s;
            }
        }
    }
    Ok(())
}

/// Per-step EMA decay for a half-life of `ema_kimg` thousand images, ramped up
/// over the first `rampup · images_seen` images.
pub fn ema_decay(batch: usize, ema_kimg: f64, rampup: Option<f64>, images_seen: u64) -> f64 {
    let mut half_life = ema_kimg * 1000.0;
    if let Some(r) = rampup {
        half_life = half_life.min(images_seen as f64 * r);
    }
    if half_life <= 0.0 {
        return 0.0;
    }
    0.5f64.powf(batch as f64 / half_life)
}

/// Which latent set drives a synthesis layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleSource {
    A,
    B,
}

/// With probability `prob`, layers before the crossover use `A` and the rest
/// `B`; otherwise every layer uses `A`. A `None` crossover is drawn uniformly
/// from `1..num_layers`.
pub fn style_mixing(num_layers: usize, crossover: Option<usize>, prob: f64, seed: u64) -> Result<Vec<StyleSource>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::invalid(format!("mixing probability {prob} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixed = rng.random::<f64>() < prob;
    let cut = match crossover {
        Some(c) => c,
        None if num_layers > 1 => rng.random_range(1..num_layers),
        None => num_layers,
    };
    Ok((0..num_layers)
        .map(|l| if mixed && l >= cut { StyleSource::B } else { StyleSource::A })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::gradient_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mapping_is_row_wise_and_shaped() {
        let mut store = ParamStore::<f64>::new();
        let net = MappingNetwork::new(&mut store, &mut rng(0), "map", 4, 32, 32).unwrap();
        let row = Tensor::<f64>::randn([32], &mut rng(1));
        let other = Tensor::<f64>::randn([32], &mut rng(2));
        let mut z = row.data().to_vec();
        z.extend_from_slice(other.data());
        z.extend_from_slice(row.data());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = net.map_latents(&p, tape.constant(Tensor::new([1, 3, 32], z).unwrap())).unwrap().value();
        assert_eq!(y.shape(), &[1, 3, 32]);
        assert_eq!(&y.data()[..32], &y.data()[64..]);
        let single = net
            .map_latents(&p, tape.constant(row.clone().reshape(vec![1, 1, 32]).unwrap()))
            .unwrap()
            .value();
        assert_eq!(single.data(), &y.data()[..32]);
        assert!(net.map_latents(&p, tape.constant(Tensor::zeros([1, 1, 31]))).is_err());
    }

    fn channel_stats(x: &Tensor<f64>, b: usize, c: usize) -> (f64, f64) {
        let (cc, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        let v = &x.data()[(b * cc + c) * hw..(b * cc + c + 1) * hw];
        let mean = v.iter().sum::<f64>() / hw as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / hw as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn adain_examples() {
        let tape = Tape::<f64>::new();
        // 1 channel, 2×2: x = [1, 2, 3, 6], μ = 3, σ = √3.5; target (10, 2)
        let x = tape.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap());
        let out = adain(x, tape.constant(Tensor::full([1, 1], 10.0)), tape.constant(Tensor::full([1, 1], 2.0)))
            .unwrap()
            .value();
        let s = 3.5f64.sqrt();
        for (o, xi) in out.data().iter().zip([1.0, 2.0, 3.0, 6.0]) {
            assert!((o - (10.0 + 2.0 * (xi - 3.0) / (s + 1e-8))).abs() < 1e-9);
        }

        let xt = Tensor::<f64>::randn([2, 3, 4, 4], &mut rng(3));
        let x = tape.constant(xt.clone());
        let (mut mu, mut sd) = (vec![], vec![]);
        for b in 0..2 {
            for c in 0..3 {
                let (m, s) = channel_stats(&xt, b, c);
                mu.push(m);
                sd.push(s);
            }
        }
        let same = adain(x, tape.constant(Tensor::new([2, 3], mu).unwrap()), tape.constant(Tensor::new([2, 3], sd).unwrap()))
            .unwrap()
            .value();
        assert!(same.max_abs_diff(&xt) < 1e-6);

        let std = adain(x, tape.constant(Tensor::zeros([2, 3])), tape.constant(Tensor::ones([2, 3]))).unwrap().value();
        for b in 0..2 {
            for c in 0..3 {
                let (m, s) = channel_stats(&std, b, c);
                assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
            }
        }
    }

    fn modconv(demod: bool, seed: u64) -> (ParamStore<f64>, ModConv) {
        let mut store = ParamStore::new();
        let conv = ModConv::new(&mut store, &mut rng(seed), "conv", 8, 3, 4, 3, demod).unwrap();
        (store, conv)
    }

    #[test]
    fn unit_style_without_demodulation_is_plain_conv() {
        let (store, conv) = modconv(false, 0);
        let x = Tensor::<f64>::randn([2, 3, 5, 5], &mut rng(1));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = conv.forward_with_styles(&p, tape.constant(x.clone()), tape.constant(Tensor::ones([2, 3]))).unwrap().value();
        let w = store.get(&conv.weight).unwrap().scale(conv.gain());
        let expected = crate::tensor::conv2d(&x, &w).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn demodulated_weights_have_unit_norm() {
        let (store, conv) = modconv(true, 2);
        let styles = Tensor::<f64>::randn([3, 3], &mut rng(3));
        let eff = conv.effective_weights(&store, &styles).unwrap();
        for chunk in eff.data().chunks(3 * 9) {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        // the fused forward agrees with convolving the explicit kernels
        let x = Tensor::<f64>::randn([3, 3, 4, 4], &mut rng(4));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let fused = conv.forward_with_styles(&p, tape.constant(x.clone()), tape.constant(styles.clone())).unwrap().value();
        for b in 0..3 {
            let kb = Tensor::new([4, 3, 3, 3], eff.data()[b * 108..(b + 1) * 108].to_vec()).unwrap();
            let xb = Tensor::new([3, 4, 4], x.data()[b * 48..(b + 1) * 48].to_vec()).unwrap();
            let yb = crate::tensor::conv2d(&xb, &kb).unwrap();
            let got = &fused.data()[b * 64..(b + 1) * 64];
            for (a, e) in got.iter().zip(yb.data()) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layers_pass_gradient_check() {
        let (store, conv) = modconv(true, 5);
        let w = Tensor::<f64>::randn([2, 8], &mut rng(6));
        let probe = Tensor::<f64>::randn([2, 4, 4, 4], &mut rng(7));
        let err = gradient_check(
            |tape, x| {
                let p = store.bind(tape);
                conv.forward(&p, x, tape.constant(w.clone()))?.mul(tape.constant(probe.clone()))?.sum()
            },
            &Tensor::randn([2, 3, 4, 4], &mut rng(8)),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "modconv dx {err}");
        let x = Tensor::<f64>::randn([2, 3, 4, 4], &mut rng(9));
        let err = gradient_check(
            |tape, wv| {
                let p = store.bind(tape);
                conv.forward(&p, tape.constant(x.clone()), wv)?.mul(tape.constant(probe.clone()))?.sum()
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "modconv dw {err}");
        let err = gradient_check(
            |tape, kernel| {
                let mut p = store.bind(tape);
                p.replace(&conv.weight, kernel)?;
                conv.forward(&p, tape.constant(x.clone()), tape.constant(w.clone()))?.mul(tape.constant(probe.clone()))?.sum()
            },
            store.get(&conv.weight).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "modconv dweight {err}");

        let mut mstore = ParamStore::<f64>::new();
        let net = MappingNetwork::new(&mut mstore, &mut rng(10), "map", 2, 4, 4).unwrap();
        let err = gradient_check(
            |tape, z| {
                let p = mstore.bind(tape);
                net.map_latents(&p, z)?.powf(2.0)?.sum()
            },
            &Tensor::randn([2, 3, 4], &mut rng(11)),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "mapping {err}");

        let mu = Tensor::<f64>::randn([2, 3], &mut rng(12));
        let probe = Tensor::<f64>::randn([2, 3, 2, 2], &mut rng(13));
        let err = gradient_check(
            |tape, x| adain(x, tape.constant(mu.clone()), tape.constant(mu.clone()))?.mul(tape.constant(probe.clone()))?.sum(),
            &Tensor::randn([2, 3, 2, 2], &mut rng(14)),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "adain {err}");

        let mut nstore = ParamStore::<f64>::new();
        let noise = NoiseLayer::new(&mut nstore, "n").unwrap();
        let field = noise_tensor::<f64>([1, 2, 2, 2], 3);
        let err = gradient_check(
            |tape, s| {
                let mut p = nstore.bind(tape);
                p.replace(&noise.strength, s)?;
                noise.forward(&p, tape.constant(Tensor::ones([1, 2, 2, 2])), field.clone())?.powf(2.0)?.sum()
            },
            &Tensor::from_f64([1], &[0.3]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "noise {err}");
    }

    #[test]
    fn noise_examples() {
        let x = Tensor::<f64>::randn([100, 100], &mut rng(0));
        assert_eq!(noise_inject(&x, 0.0, 5), x);
        assert_eq!(noise_inject(&x, 0.7, 5), noise_inject(&x, 0.7, 5));
        let y = noise_inject(&x, 0.5, 6);
        let diff: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diff.len() as f64;
        assert!((var - 0.25).abs() < 0.025, "var {var}");
    }

    #[test]
    fn ema_examples() {
        let mut avg = ParamStore::<f64>::new();
        avg.insert("p", Tensor::zeros([3])).unwrap();
        let mut cur = ParamStore::<f64>::new();
        cur.insert("p", Tensor::full([3], 2.0)).unwrap();
        let mut a = avg.clone();
        ema_update(&mut a, &cur, 0.0).unwrap();
        assert_eq!(a.get("p").unwrap(), cur.get("p").unwrap());
        let mut a = avg.clone();
        ema_update(&mut a, &cur, 1.0).unwrap();
        assert_eq!(a.get("p").unwrap(), avg.get("p").unwrap());
        let mut a = avg.clone();
        ema_update(&mut a, &cur, 0.5).unwrap();
        assert_eq!(a.get("p").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(ema_update(&mut a, &cur, 1.5).is_err());

        assert_eq!(ema_decay(8, 10.0, None, 0), 0.5f64.powf(8.0 / 10_000.0));
        assert_eq!(ema_decay(8, 10.0, Some(0.05), 0), 0.0);
    }

    #[test]
    fn style_mixing_examples() {
        for seed in 0..100 {
            assert!(style_mixing(5, None, 0.0, seed).unwrap().iter().all(|&s| s == StyleSource::A));
        }
        let always = style_mixing(5, Some(2), 1.0, 0).unwrap();
        use StyleSource::{A, B};
        assert_eq!(always, vec![A, A, B, B, B]);
        let draws = 10_000;
        let mixed = (0..draws)
            .filter(|&s| style_mixing(4, None, 0.9, s).unwrap().contains(&StyleSource::B))
            .count();
        assert!((mixed as f64 / draws as f64 - 0.9).abs() < 0.02);
        assert!(style_mixing(4, None, 1.2, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn adain_round_trip_through_statistics(seed in 0u64..10_000) {
            let x = Tensor::<f64>::randn([1, 2, 3, 3], &mut rng(seed));
            let y = Tensor::<f64>::randn([1, 2, 3, 3], &mut rng(seed + 1)).map(|v| 3.0 * v + 1.0);
            let stats = |t: &Tensor<f64>| {
                let (mut m, mut s) = (vec![], vec![]);
                for c in 0..2 {
                    let (a, b) = channel_stats(t, 0, c);
                    m.push(a);
                    s.push(b);
                }
                (Tensor::new([1, 2], m).unwrap(), Tensor::new([1, 2], s).unwrap())
            };
            let (mx, sx) = stats(&x);
            let (my, sy) = stats(&y);
            let tape = Tape::new();
            let styled = adain(tape.constant(x.clone()), tape.constant(my), tape.constant(sy)).unwrap();
            let back = adain(styled, tape.constant(mx), tape.constant(sx)).unwrap().value();
            prop_assert!(back.max_abs_diff(&x) < 1e-6);
        }

        #[test]
        fn demodulated_conv_ignores_style_scale(seed in 0u64..10_000, scale in 0.5f64..10.0) {
            let (store, conv) = modconv(true, seed);
            let x = Tensor::<f64>::randn([2, 3, 4, 4], &mut rng(seed + 1));
            // styles (and their rescaling) stay large enough that the demodulation eps is negligible
            let mut r = rng(seed + 2);
            let s = Tensor::<f64>::from_fn([2, 3], |_| {
                let m = r.random_range(0.5..2.0);
                if r.random::<bool>() { m } else { -m }
            });
            let tape = Tape::new();
            let p = store.bind(&tape);
            let a = conv.forward_with_styles(&p, tape.constant(x.clone()), tape.constant(s.clone())).unwrap().value();
            let b = conv.forward_with_styles(&p, tape.constant(x.clone()), tape.constant(s.scale(scale))).unwrap().value();
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }
}
