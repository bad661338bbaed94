//! Named parameter storage and the small learnable building blocks shared by
//! every network.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered collection of named tensors. Insertion order is the canonical order
/// used for checkpoints, optimizer moments and census reports.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("names", &self.names).finish()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::shape("set", self.values[i].shape(), value.shape()));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Same names, shapes and order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape<T>) -> Bound<'s, 't, T> {
        self.bind_with(tape, true)
    }

    /// Places every parameter on `tape` as a constant (no gradient).
    pub fn bind_frozen<'s, 't>(&'s self, tape: &'t Tape<T>) -> Bound<'s, 't, T> {
        self.bind_with(tape, false)
    }

    fn bind_with<'s, 't>(&'s self, tape: &'t Tape<T>, trainable: bool) -> Bound<'s, 't, T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] bound to one tape.
pub struct Bound<'s, 't, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'_, 't, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Substitutes `var` for the named parameter, e.g. to differentiate through it
    /// from an outer leaf.
    pub fn replace(&mut self, name: &str, var: Var<'t, T>) -> Result<()> {
        let i = *self
            .store
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if self.vars[i].shape() != var.shape() {
            return Err(Error::shape("replace", &self.vars[i].shape(), &var.shape()));
        }
        self.vars[i] = var;
        Ok(())
    }

    /// Gradients in store order; parameters that did not reach the output get zeros.
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Affine map on the last axis with a runtime weight gain of `lr_mul/sqrt(fan_in)`
/// (equalized learning rate); stored weights are `N(0, 1/lr_mul²)` and the
/// stored bias is also scaled by `1/lr_mul`, so `lr_mul` scales the effective
/// step size of the layer without changing its initial function.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub lr_mul: f64,
}

impl Affine {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias_init: f64,
    ) -> Result<Self> {
        Self::with_lr_mul(store, rng, prefix, fan_in, fan_out, bias_init, 1.0)
    }

    pub fn with_lr_mul<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias_init: f64,
        lr_mul: f64,
    ) -> Result<Self> {
        if !(lr_mul > 0.0 && lr_mul.is_finite()) {
            return Err(Error::invalid(format!("learning-rate multiplier must be positive, got {lr_mul}")));
        }
        let layer = Affine {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            fan_in,
            fan_out,
            lr_mul,
        };
        store.insert(&layer.weight, Tensor::randn([fan_in, fan_out], rng).scale(T::lit(1.0 / lr_mul)))?;
        store.insert(&layer.bias, Tensor::full([fan_out], T::lit(bias_init / lr_mul)))?;
        Ok(layer)
    }

    pub fn gain(&self) -> f64 {
        self.lr_mul / (self.fan_in as f64).sqrt()
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let rank = x.shape().len();
        let bias = p.get(&self.bias)?;
        let bias = if self.lr_mul == 1.0 { bias } else { bias.scale(T::lit(self.lr_mul))? };
        x.linear(p.get(&self.weight)?)?.scale(T::lit(self.gain()))?.add_bcast(bias, rank - 1)
    }

    /// Stores `weight` (`[fan_in, fan_out]`) and `bias` as the effective map,
    /// compensating for the runtime gain.
    pub fn set_effective<T: Real>(&self, store: &mut ParamStore<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
        store.set(&self.weight, weight.scale(T::lit(1.0 / self.gain())))?;
        store.set(&self.bias, bias.scale(T::lit(1.0 / self.lr_mul)))
    }
}

/// Same-padded convolution with equalized learning rate and a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let layer = Conv {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_channels,
            out_channels,
            kernel,
        };
        store.insert(&layer.weight, Tensor::randn([out_channels, in_channels, kernel, kernel], rng))?;
        store.insert(&layer.bias, Tensor::zeros([out_channels]))?;
        Ok(layer)
    }

    pub fn gain(&self) -> f64 {
        1.0 / ((self.in_channels * self.kernel * self.kernel) as f64).sqrt()
    }

    /// `x`: `[B, C, H, W]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.get(&self.weight)?)?
            .scale(T::lit(self.gain()))?
            .add_bcast(p.get(&self.bias)?, 1)
    }
}

/// Per-row layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

pub const NORM_EPS: f64 = 1e-8;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        let layer = LayerNorm {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
        };
        store.insert(&layer.gain, Tensor::ones([dim]))?;
        store.insert(&layer.bias, Tensor::zeros([dim]))?;
        Ok(layer)
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let last = x.shape().len() - 1;
        x.standardize(last, T::lit(NORM_EPS))?
            .mul_bcast(p.get(&self.gain)?, last)?
            .add_bcast(p.get(&self.bias)?, last)
    }
}
