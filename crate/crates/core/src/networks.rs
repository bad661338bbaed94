//! Generator and discriminator assembly for the five model variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{grid_encoding, AttentionLayer, Elements, LayerKind};
use crate::autodiff::{Tape, Var};
use crate::config::{Config, GenAttention};
use crate::error::{Error, Result};
use crate::params::{Affine, Bound, Conv, ParamStore};
use crate::style::{lrelu_act, noise_tensor, MappingNetwork, ModConv, NoiseLayer};
use crate::tensor::{Direction, Real, Tensor};

/// Resolutions visited by the synthesis network, coarse to fine.
pub fn resolutions(final_res: usize) -> Vec<usize> {
    std::iter::successors(Some(4usize), |r| Some(r * 2))
        .take_while(|&r| r <= final_res)
        .collect()
}

#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    pub resolution: usize,
    pub channels: Vec<(usize, usize)>,
    pub k: usize,
    pub attention: GenAttention,
    pub attention_max_res: usize,
    pub latent_size: usize,
    pub dlatent_size: usize,
    pub mapping_layers: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorSpec {
    pub resolution: usize,
    pub channels: Vec<(usize, usize)>,
    pub attention: bool,
    pub attention_max_res: usize,
    pub k: usize,
    pub heads: usize,
}

fn channels_at(schedule: &[(usize, usize)], r: usize) -> Result<usize> {
    schedule
        .iter()
        .find(|(res, _)| *res == r)
        .map(|&(_, c)| c)
        .ok_or_else(|| Error::Config(format!("no channel count for resolution {r}")))
}

fn check_resolution(r: usize) -> Result<()> {
    if (16..=64).contains(&r) && r.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::invalid(format!("resolution must be a power of two in 16..=64, got {r}")))
    }
}

impl GeneratorSpec {
    pub fn from_config(c: &Config) -> Self {
        GeneratorSpec {
            resolution: c.resolution,
            channels: c.channels.clone(),
            k: c.k(),
            attention: c.variant.generator_attention(),
            attention_max_res: c.attention_max_res,
            latent_size: c.latent_size,
            dlatent_size: c.dlatent_size,
            mapping_layers: c.mapping_layers,
            heads: c.heads,
        }
    }
}

impl DiscriminatorSpec {
    pub fn from_config(c: &Config) -> Self {
        DiscriminatorSpec {
            resolution: c.resolution,
            channels: c.channels.clone(),
            attention: c.variant.discriminator_attention(),
            attention_max_res: c.attention_max_res,
            k: c.k(),
            heads: c.heads,
        }
    }
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
fn to_rows<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.reshape(vec![s[0], s[1], s[2] * s[3]])?.transpose_last2()
}

/// `[B, H·W, C]` → `[B, C, H, W]`.
fn to_map<'t, T: Real>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.transpose_last2()?.reshape(vec![s[0], s[2], h, w])
}

/// Repeats a parameter along a new leading batch axis.
fn broadcast_batch<'t, T: Real>(x: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
    let mut shape = vec![batch];
    shape.extend(x.shape());
    x.tape().constant(Tensor::zeros(shape)).add_bcast(x, 1)
}

#[derive(Clone, Debug)]
struct GenLayerAttention {
    layer: AttentionLayer,
    proj: Affine,
    embeddings: String,
    grid: Tensor<f64>,
}

#[derive(Clone, Debug)]
struct GenBlock {
    res: usize,
    attention: Option<GenLayerAttention>,
    conv: ModConv,
    noise: NoiseLayer,
}

/// Synthesis network: learned 4×4 constant, then per resolution
/// `[attention, modulated 3×3 conv, lrelu, noise, upsample]`, then a 1×1 toRGB
/// and a hard clamp to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub mapping: MappingNetwork,
    constant: String,
    blocks: Vec<GenBlock>,
    to_rgb: Conv,
}

impl Generator {
    pub fn build<T: Real>(spec: &GeneratorSpec, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        check_resolution(spec.resolution)?;
        if spec.k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        if spec.attention == GenAttention::None && spec.k != 1 {
            return Err(Error::invalid("an attention-free generator uses a single latent"));
        }
        let mapping = MappingNetwork::new(
            store,
            rng,
            "g.mapping",
            spec.mapping_layers,
            spec.latent_size,
            spec.dlatent_size,
        )?;
        let c4 = channels_at(&spec.channels, 4)?;
        let constant = "g.const".to_string();
        store.insert(&constant, Tensor::randn([c4, 4, 4], rng))?;
        let mut blocks = Vec::new();
        let mut in_ch = c4;
        for r in resolutions(spec.resolution) {
            let out_ch = channels_at(&spec.channels, r)?;
            let prefix = format!("g.b{r}");
            let attention = match spec.attention {
                GenAttention::None => None,
                _ if r < 8 || r > spec.attention_max_res => None,
                kind => {
                    let lk = if kind == GenAttention::Simplex { LayerKind::Simplex } else { LayerKind::Duplex };
                    let layer = AttentionLayer::new(store, rng, &format!("{prefix}.attn"), lk, in_ch, spec.heads)?;
                    let proj = Affine::new(store, rng, &format!("{prefix}.attn.latent_proj"), spec.dlatent_size, in_ch, 0.0)?;
                    let embeddings = format!("{prefix}.attn.latent_embed");
                    store.insert(&embeddings, Tensor::randn([spec.k, in_ch], rng))?;
                    Some(GenLayerAttention {
                        layer,
                        proj,
                        embeddings,
                        grid: grid_encoding(r, r, in_ch)?,
                    })
                }
            };
            let conv = ModConv::new(store, rng, &format!("{prefix}.conv"), spec.dlatent_size, in_ch, out_ch, 3, true)?;
            let noise = NoiseLayer::new(store, &prefix)?;
            blocks.push(GenBlock {
                res: r,
                attention,
                conv,
                noise,
            });
            in_ch = out_ch;
        }
        let to_rgb = Conv::new(store, rng, "g.torgb", in_ch, 3, 1)?;
        Ok(Generator {
            spec: spec.clone(),
            mapping,
            constant,
            blocks,
            to_rgb,
        })
    }

    /// Number of style layers (one per resolution), the unit of style mixing.
    pub fn num_style_layers(&self) -> usize {
        self.blocks.len()
    }

    /// `z`: `[B, k, latent]` → `Y`: `[B, k, dlatent]`.
    pub fn map<'t, T: Real>(&self, p: &Bound<'_, 't, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = z.shape();
        if s.len() != 3 || s[1] != self.spec.k || s[2] != self.spec.latent_size {
            return Err(Error::shape("generator latents", &s, &[0, self.spec.k, self.spec.latent_size]));
        }
        self.mapping.map_latents(p, z)
    }

    /// Renders images from one latent set per style layer.
    pub fn synthesize<'t, T: Real>(
        &self,
        p: &Bound<'_, 't, T>,
        ys: &[Var<'t, T>],
        noise_seed: u64,
    ) -> Result<Var<'t, T>> {
        if ys.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "expected {} latent sets, got {}",
                self.blocks.len(),
                ys.len()
            )));
        }
        let tape = ys[0].tape();
        let batch = ys[0].shape()[0];
        let mut x = broadcast_batch(p.get(&self.constant)?, batch)?;
        for (i, (block, &y)) in self.blocks.iter().zip(ys).enumerate() {
            if let Some(att) = &block.attention {
                let yp = att.proj.forward(p, y)?;
                let xe = Elements::new(to_rows(x)?, tape.constant(att.grid.cast()));
                let ye = Elements::new(yp, p.get(&att.embeddings)?);
                let out = att.layer.forward(p, xe, ye)?;
                x = to_map(out.x, block.res, block.res)?;
            }
            let w = y.mean_axis(1)?;
            x = lrelu_act(block.conv.forward(p, x, w)?)?;
            let noise = noise_tensor(x.shape(), noise_seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            x = block.noise.forward(p, x, noise)?;
            if block.res < self.spec.resolution {
                x = x.resample(Direction::Up)?;
            }
        }
        self.to_rgb.forward(p, x)?.clamp(-T::one(), T::one())
    }

    /// Maps `z` and renders it with the same latents at every layer.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'_, 't, T>, z: Var<'t, T>, noise_seed: u64) -> Result<Var<'t, T>> {
        let y = self.map(p, z)?;
        let ys = vec![y; self.blocks.len()];
        self.synthesize(p, &ys, noise_seed)
    }

    /// Reorders the latent embedding rows of every attention layer.
    pub fn permute_latent_embeddings<T: Real>(&self, store: &mut ParamStore<T>, perm: &[usize]) -> Result<()> {
        for block in &self.blocks {
            if let Some(att) = &block.attention {
                let e = store.get(&att.embeddings)?.clone();
                store.set(&att.embeddings, permute_rows(&e, perm)?)?;
            }
        }
        Ok(())
    }
}

/// Reorders the second-to-last axis: row `i` of the result is row `perm[i]`.
pub fn permute_rows<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::invalid("permute_rows needs at least 2 axes"));
    }
    let (m, d) = (s[s.len() - 2], s[s.len() - 1]);
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if perm.len() != m || sorted.iter().enumerate().any(|(i, &v)| i != v) {
        return Err(Error::invalid("not a permutation of the rows"));
    }
    let outer = x.numel() / (m * d);
    let mut out = x.clone();
    for o in 0..outer {
        for (i, &src) in perm.iter().enumerate() {
            let dst = (o * m + i) * d;
            let from = (o * m + src) * d;
            out.data_mut()[dst..dst + d].copy_from_slice(&x.data()[from..from + d]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct DiscAttention {
    layer: AttentionLayer,
    y_proj: Option<Affine>,
    grid: Tensor<f64>,
}

#[derive(Clone, Debug)]
struct DiscBlock {
    res: usize,
    conv: Conv,
    attention: Option<DiscAttention>,
}

/// fromRGB 1×1, then per resolution `[conv 3×3, lrelu, (aggregator attention),
/// 2×2 average pool]` down to 4×4, then two dense layers to one logit. With
/// attention on, the aggregator rows start from trained embeddings and are
/// concatenated to the flattened 4×4 features.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    from_rgb: Conv,
    blocks: Vec<DiscBlock>,
    aggregators: Option<String>,
    fc: Affine,
    out: Affine,
}

impl Discriminator {
    pub fn build<T: Real>(spec: &DiscriminatorSpec, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        check_resolution(spec.resolution)?;
        let top = channels_at(&spec.channels, spec.resolution)?;
        let from_rgb = Conv::new(store, rng, "d.fromrgb", 3, top, 1)?;
        let mut blocks = Vec::new();
        let mut y_dim: Option<usize> = None;
        let mut aggregators = None;
        let mut in_ch = top;
        let mut r = spec.resolution;
        while r >= 8 {
            let out_ch = channels_at(&spec.channels, r / 2)?;
            let prefix = format!("d.b{r}");
            let conv = Conv::new(store, rng, &format!("{prefix}.conv"), in_ch, out_ch, 3)?;
            let attention = if spec.attention && r <= spec.attention_max_res {
                if aggregators.is_none() {
                    let name = "d.aggregators".to_string();
                    store.insert(&name, Tensor::randn([spec.k, out_ch], rng))?;
                    aggregators = Some(name);
                    y_dim = Some(out_ch);
                }
                let y_proj = match y_dim {
                    Some(d) if d != out_ch => Some(Affine::new(store, rng, &format!("{prefix}.attn.latent_proj"), d, out_ch, 0.0)?),
                    _ => None,
                };
                y_dim = Some(out_ch);
                let layer = AttentionLayer::new(store, rng, &format!("{prefix}.attn"), LayerKind::Aggregator, out_ch, spec.heads)?;
                Some(DiscAttention {
                    layer,
                    y_proj,
                    grid: grid_encoding(r, r, out_ch)?,
                })
            } else {
                None
            };
            blocks.push(DiscBlock { res: r, conv, attention });
            in_ch = out_ch;
            r /= 2;
        }
        let c4 = in_ch;
        let flat = c4 * 16 + if spec.attention { spec.k * c4 } else { 0 };
        let fc = Affine::new(store, rng, "d.fc", flat, c4, 0.0)?;
        let out = Affine::new(store, rng, "d.out", c4, 1, 0.0)?;
        Ok(Discriminator {
            spec: spec.clone(),
            from_rgb,
            blocks,
            aggregators,
            fc,
            out,
        })
    }

    /// `images`: `[B, 3, R, R]` → logits `[B]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'_, 't, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = images.shape();
        let r = self.spec.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::shape("discriminator input", &s, &[0, 3, r, r]));
        }
        let tape = images.tape();
        let batch = s[0];
        let mut x = lrelu_act(self.from_rgb.forward(p, images)?)?;
        let mut y = match &self.aggregators {
            Some(name) => Some(broadcast_batch(p.get(name)?, batch)?),
            None => None,
        };
        for block in &self.blocks {
            x = lrelu_act(block.conv.forward(p, x)?)?;
            if let (Some(att), Some(yv)) = (&block.attention, y) {
                let yv = match &att.y_proj {
                    Some(proj) => proj.forward(p, yv)?,
                    None => yv,
                };
                let m = yv.shape()[1];
                let d = yv.shape()[2];
                let xe = Elements::new(to_rows(x)?, tape.constant(att.grid.cast()));
                let ye = Elements::new(yv, tape.constant(Tensor::zeros([m, d])));
                let out = att.layer.forward(p, xe, ye)?;
                x = to_map(out.x, block.res, block.res)?;
                y = Some(out.y);
            }
            x = x.resample(Direction::Down)?;
        }
        let xs = x.shape();
        let mut flat = x.reshape(vec![batch, xs[1] * xs[2] * xs[3]])?;
        if let Some(yv) = y {
            let ys = yv.shape();
            let yf = yv.reshape(vec![batch, ys[1] * ys[2]])?;
            flat = Var::concat_last(&[flat, yf])?;
        }
        let h = lrelu_act(self.fc.forward(p, flat)?)?;
        self.out.forward(p, h)?.reshape(vec![batch])
    }
}

/// Generator, discriminator and the averaged generator weights.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: Config,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_params: ParamStore<T>,
    pub d_params: ParamStore<T>,
    pub g_ema: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Deterministic initialisation from `config.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut g_params = ParamStore::new();
        let generator = Generator::build(&GeneratorSpec::from_config(config), &mut g_params, &mut rng)?;
        let mut d_params = ParamStore::new();
        let discriminator = Discriminator::build(&DiscriminatorSpec::from_config(config), &mut d_params, &mut rng)?;
        Ok(Model {
            config: config.clone(),
            generator,
            discriminator,
            g_ema: g_params.clone(),
            g_params,
            d_params,
        })
    }

    pub fn k(&self) -> usize {
        self.generator.spec.k
    }

    /// `[batch, k, latent]` standard-normal latents from `seed`.
    pub fn sample_latents(&self, batch: usize, seed: u64) -> Tensor<T> {
        noise_tensor([batch, self.k(), self.generator.spec.latent_size], seed)
    }

    /// Deterministic images for `z` (`[B, k, latent]`) and noise `seed`.
    pub fn generate(&self, z: &Tensor<T>, seed: u64, use_ema: bool) -> Result<Tensor<T>> {
        let store = if use_ema { &self.g_ema } else { &self.g_params };
        generate_with(&self.generator, store, z, seed)
    }

    /// Images at `z(t) = (1 − t)·z0 + t·z1` for `steps` evenly spaced `t ∈ [0, 1]`.
    pub fn interpolate(&self, z0: &Tensor<T>, z1: &Tensor<T>, steps: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
        if steps < 2 {
            return Err(Error::invalid("interpolation needs at least 2 steps"));
        }
        if z0.shape() != z1.shape() {
            return Err(Error::shape("interpolate", z0.shape(), z1.shape()));
        }
        (0..steps)
            .map(|i| {
                let t = T::lit(i as f64 / (steps - 1) as f64);
                let z = z0.zip_map(z1, "interpolate", |a, b| if a == b { a } else { (T::one() - t) * a + t * b })?;
                self.generate(&z, seed, true)
            })
            .collect()
    }
}

/// Inference with an explicit parameter store.
pub fn generate_with<T: Real>(generator: &Generator, store: &ParamStore<T>, z: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    Ok(generator.forward(&p, tape.constant(z.clone()), seed)?.value())
}

/// Parameter totals of two stores, the `base` names absent from `other`, and
/// the shared names whose shapes differ.
pub struct Census {
    pub base_count: usize,
    pub other_count: usize,
    pub missing: Vec<String>,
    pub reshaped: Vec<String>,
}

impl Census {
    pub fn contained(&self) -> bool {
        self.missing.is_empty()
    }
}

pub fn census<T: Real>(base: &ParamStore<T>, other: &ParamStore<T>) -> Census {
    let mut missing = Vec::new();
    let mut reshaped = Vec::new();
    for (name, v) in base.iter() {
        match other.get(name) {
            Err(_) => missing.push(name.to_string()),
            Ok(o) if o.shape() != v.shape() => reshaped.push(name.to_string()),
            Ok(_) => {}
        }
    }
    Census {
        base_count: base.numel(),
        other_count: other.numel(),
        missing,
        reshaped,
    }
}
