//! Processing blocks usable in the extractor's pre- and post-processing
//! slots: plain convolutions, a non-local block (embedded-Gaussian affinity
//! over all spatial positions), and a relative-position attention block.
//!
//! Both residual blocks zero-initialize their output projection, so at
//! initialization they are exact identity maps.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 8;

/// Shape-preserving k x k convolution (pad k/2).
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub kernel: usize,
    pub channels: usize,
    pub prefix: String,
}

impl ConvBlock {
    pub fn new(kernel: usize, channels: usize, prefix: impl Into<String>) -> Result<Self> {
        if !matches!(kernel, 1 | 3 | 5) {
            return Err(Error::Config(format!("conv block kernel {kernel} not in {{1,3,5}}")));
        }
        Ok(ConvBlock { kernel, channels, prefix: prefix.into() })
    }

    pub fn build(&self, params: &mut ParamSet, rng: &mut SeededRng) -> Result<()> {
        let (c, k) = (self.channels, self.kernel);
        let fan = c * k * k;
        params.add(
            format!("{}conv.weight", self.prefix),
            Tensor::glorot_uniform(&[c, c, k, k], fan, fan, rng),
        )?;
        params.add(format!("{}conv.bias", self.prefix), Tensor::zeros(&[c]))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: VarId) -> Result<VarId> {
        if g.value(x).shape()[1] != self.channels {
            return Err(Error::Dim(format!(
                "conv block expects {} channels, got {:?}",
                self.channels,
                g.value(x).shape()
            )));
        }
        let w = g.param_by_name(params, &format!("{}conv.weight", self.prefix))?;
        let b = g.param_by_name(params, &format!("{}conv.bias", self.prefix))?;
        g.conv2d(x, w, b, 1, self.kernel / 2)
    }
}

/// Residual non-local block: per RoI, every spatial position attends to every
/// other through a softmax over embedded dot-product affinities.
#[derive(Debug, Clone)]
pub struct NonLocalBlock {
    pub channels: usize,
    pub prefix: String,
}

impl NonLocalBlock {
    pub fn new(channels: usize, prefix: impl Into<String>) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "non-local block needs even channels, got {channels}"
            )));
        }
        Ok(NonLocalBlock { channels, prefix: prefix.into() })
    }

    pub fn build(&self, params: &mut ParamSet, rng: &mut SeededRng) -> Result<()> {
        let c = self.channels;
        let c2 = c / 2;
        for name in ["theta", "phi", "g"] {
            params.add(
                format!("{}{name}.weight", self.prefix),
                Tensor::glorot_uniform(&[c2, c, 1, 1], c, c2, rng),
            )?;
            params.add(format!("{}{name}.bias", self.prefix), Tensor::zeros(&[c2]))?;
        }
        // Zero-initialized output projection: identity at init.
        params.add(format!("{}wz.weight", self.prefix), Tensor::zeros(&[c, c2, 1, 1]))?;
        params.add(format!("{}wz.bias", self.prefix), Tensor::zeros(&[c]))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: VarId) -> Result<VarId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Dim(format!(
                "non-local block expects [R,{},S,S], got {shape:?}",
                self.channels
            )));
        }
        let (r, c, s) = (shape[0], shape[1], shape[2]);
        let c2 = c / 2;
        let p = s * shape[3];
        let proj = |g: &mut Graph, name: &str, x: VarId| -> Result<VarId> {
            let w = g.param_by_name(params, &format!("{}{name}.weight", self.prefix))?;
            let b = g.param_by_name(params, &format!("{}{name}.bias", self.prefix))?;
            g.conv2d(x, w, b, 1, 0)
        };
        let theta = proj(g, "theta", x)?;
        let phi = proj(g, "phi", x)?;
        let gee = proj(g, "g", x)?;
        let theta = g.reshape(theta, &[r, c2, p])?;
        let phi = g.reshape(phi, &[r, c2, p])?;
        let gee = g.reshape(gee, &[r, c2, p])?;
        let theta_t = g.transpose12(theta)?;
        let affinity = g.bmm(theta_t, phi)?; // [R, P, P]: query i, key j
        let weights = g.softmax(affinity, 2)?;
        let weights_t = g.transpose12(weights)?;
        let y = g.bmm(gee, weights_t)?; // y[.,d,i] = sum_j w[i,j] g[.,d,j]
        let y = g.reshape(y, &[r, c2, s, shape[3]])?;
        let z = proj(g, "wz", y)?;
        g.add(z, x)
    }
}

/// Residual attention block driven by query content and relative position:
/// per head, the energy between query position q and key position k is the dot
/// product of the query projection at q with a learned embedding of the
/// offset k - q.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub channels: usize,
    pub heads: usize,
    pub out_size: usize,
    pub prefix: String,
}

impl AttentionBlock {
    pub fn new(channels: usize, heads: usize, out_size: usize, prefix: impl Into<String>) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention block needs channels ({channels}) divisible by heads ({heads})"
            )));
        }
        Ok(AttentionBlock { channels, heads, out_size, prefix: prefix.into() })
    }

    fn table_len(&self) -> usize {
        let side = 2 * self.out_size - 1;
        side * side
    }

    pub fn build(&self, params: &mut ParamSet, rng: &mut SeededRng) -> Result<()> {
        let c = self.channels;
        let d = c / self.heads;
        params.add(
            format!("{}q.weight", self.prefix),
            Tensor::glorot_uniform(&[c, c, 1, 1], c, c, rng),
        )?;
        params.add(format!("{}q.bias", self.prefix), Tensor::zeros(&[c]))?;
        params.add(
            format!("{}rel.table", self.prefix),
            Tensor::glorot_uniform(&[self.heads, self.table_len(), d], d, d, rng),
        )?;
        params.add(
            format!("{}v.weight", self.prefix),
            Tensor::glorot_uniform(&[c, c, 1, 1], c, c, rng),
        )?;
        params.add(format!("{}v.bias", self.prefix), Tensor::zeros(&[c]))?;
        // Zero-initialized output projection: identity at init.
        params.add(format!("{}out.weight", self.prefix), Tensor::zeros(&[c, c, 1, 1]))?;
        params.add(format!("{}out.bias", self.prefix), Tensor::zeros(&[c]))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: VarId) -> Result<VarId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Dim(format!(
                "attention block expects [R,{},S,S], got {shape:?}",
                self.channels
            )));
        }
        let s = self.out_size;
        if shape[2] != s || shape[3] != s {
            return Err(Error::Dim(format!(
                "attention block built for S={s}, got {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let (m, d, p) = (self.heads, self.channels / self.heads, s * s);
        let proj = |g: &mut Graph, name: &str, x: VarId| -> Result<VarId> {
            let w = g.param_by_name(params, &format!("{}{name}.weight", self.prefix))?;
            let b = g.param_by_name(params, &format!("{}{name}.bias", self.prefix))?;
            g.conv2d(x, w, b, 1, 0)
        };
        let q = proj(g, "q", x)?;
        let q = g.reshape(q, &[r, m, d, p])?;
        let table = g.param_by_name(params, &format!("{}rel.table", self.prefix))?;
        let energy = g.rel_pos_energy(q, table, s)?; // [R,M,P,P]
        let weights = g.softmax(energy, 3)?;
        let v = proj(g, "v", x)?;
        let v = g.reshape(v, &[r * m, d, p])?;
        let weights = g.reshape(weights, &[r * m, p, p])?;
        let weights_t = g.transpose12(weights)?;
        let o = g.bmm(v, weights_t)?; // o[.,d,q] = sum_k w[q,k] v[.,d,k]
        let o = g.reshape(o, &[r, c, s, s])?;
        let z = proj(g, "out", o)?;
        g.add(z, x)
    }
}

/// A block choice for one extractor slot.
#[derive(Debug, Clone)]
pub enum Block {
    Conv(ConvBlock),
    NonLocal(NonLocalBlock),
    Attention(AttentionBlock),
}

impl Block {
    pub fn build(&self, params: &mut ParamSet, rng: &mut SeededRng) -> Result<()> {
        match self {
            Block::Conv(b) => b.build(params, rng),
            Block::NonLocal(b) => b.build(params, rng),
            Block::Attention(b) => b.build(params, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: VarId) -> Result<VarId> {
        match self {
            Block::Conv(b) => b.forward(g, params, x),
            Block::NonLocal(b) => b.forward(g, params, x),
            Block::Attention(b) => b.forward(g, params, x),
        }
    }
}
