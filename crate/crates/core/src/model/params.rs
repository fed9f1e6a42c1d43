//! The forecaster's parameter tree, generic over the leaf type so the same
//! structure can hold arrays, tape handles, gradients or optimiser moments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Bridging, RunConfig};
use crate::tensor::DenseArray;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[d_in, d_out]`
    pub weight: T,
    /// `[d_out]`
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub self_attn: Attention<T>,
    pub self_norm: Norm<T>,
    /// Absent in concat mode.
    pub cross_attn: Option<Attention<T>>,
    pub cross_norm: Option<Norm<T>>,
    /// Position-wise (kernel size 1) convolutions `D → 4D → D`.
    pub conv_in: Linear<T>,
    pub conv_out: Linear<T>,
    pub conv_norm: Norm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub patch_embed: Linear<T>,
    pub exo_embed: Linear<T>,
    /// `[D]`, shared by every channel. Absent in concat mode.
    pub global_token: Option<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Linear<T>,
}

pub type ForecasterParams = Params<DenseArray>;

impl<T> Linear<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Norm<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Norm<U> {
        Norm {
            gain: f(&format!("{prefix}.gain"), &self.gain),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Attention<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Attention<U> {
        Attention {
            query: self.query.map(&format!("{prefix}.query"), f),
            key: self.key.map(&format!("{prefix}.key"), f),
            value: self.value.map(&format!("{prefix}.value"), f),
            output: self.output.map(&format!("{prefix}.output"), f),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.query.for_each_mut(&format!("{prefix}.query"), f);
        self.key.for_each_mut(&format!("{prefix}.key"), f);
        self.value.for_each_mut(&format!("{prefix}.value"), f);
        self.output.for_each_mut(&format!("{prefix}.output"), f);
    }
}

impl<T> Block<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Block<U> {
        Block {
            self_attn: self.self_attn.map(&format!("{prefix}.self_attn"), f),
            self_norm: self.self_norm.map(&format!("{prefix}.self_norm"), f),
            cross_attn: self
                .cross_attn
                .as_ref()
                .map(|a| a.map(&format!("{prefix}.cross_attn"), f)),
            cross_norm: self
                .cross_norm
                .as_ref()
                .map(|n| n.map(&format!("{prefix}.cross_norm"), f)),
            conv_in: self.conv_in.map(&format!("{prefix}.conv_in"), f),
            conv_out: self.conv_out.map(&format!("{prefix}.conv_out"), f),
            conv_norm: self.conv_norm.map(&format!("{prefix}.conv_norm"), f),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.self_attn.for_each_mut(&format!("{prefix}.self_attn"), f);
        self.self_norm.for_each_mut(&format!("{prefix}.self_norm"), f);
        if let Some(a) = self.cross_attn.as_mut() {
            a.for_each_mut(&format!("{prefix}.cross_attn"), f);
        }
        if let Some(n) = self.cross_norm.as_mut() {
            n.for_each_mut(&format!("{prefix}.cross_norm"), f);
        }
        self.conv_in.for_each_mut(&format!("{prefix}.conv_in"), f);
        self.conv_out.for_each_mut(&format!("{prefix}.conv_out"), f);
        self.conv_norm.for_each_mut(&format!("{prefix}.conv_norm"), f);
    }
}

impl<T> Params<T> {
    /// Rebuilds the tree with every leaf passed through `f`, which also
    /// receives the leaf's dotted name. Leaves are visited in a fixed order.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> Params<U> {
        Params {
            patch_embed: self.patch_embed.map("patch_embed", f),
            exo_embed: self.exo_embed.map("exo_embed", f),
            global_token: self.global_token.as_ref().map(|g| f("global_token", g)),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}"), f))
                .collect(),
            head: self.head.map("head", f),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.patch_embed.for_each_mut("patch_embed", f);
        self.exo_embed.for_each_mut("exo_embed", f);
        if let Some(g) = self.global_token.as_mut() {
            f("global_token", g);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{i}"), f);
        }
        self.head.for_each_mut("head", f);
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&str, &'a T)) {
        let _ = self.map(&mut |name, leaf| f(name, leaf));
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |name, _| out.push(name.to_string()));
        out
    }

    /// Pairs each leaf with the matching leaf of `other`, which must share
    /// this tree's structure.
    pub fn zip_with<U, V>(
        &self,
        other: &Params<U>,
        mut f: impl FnMut(&str, &T, &U) -> V,
    ) -> Params<V> {
        let mut others = Vec::new();
        other.for_each(&mut |_, leaf| others.push(leaf));
        let mut rest = others.into_iter();
        self.map(&mut |name, leaf| {
            let o = rest.next().expect("parameter trees differ in structure");
            f(name, leaf, o)
        })
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn linear(&mut self, d_in: usize, d_out: usize) -> Linear<DenseArray> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: DenseArray::uniform(&[d_in, d_out], bound, &mut self.rng),
            bias: DenseArray::zeros(&[d_out]),
        }
    }

    fn norm(d: usize) -> Norm<DenseArray> {
        Norm {
            gain: DenseArray::ones(&[d]),
            bias: DenseArray::zeros(&[d]),
        }
    }

    fn attention(&mut self, d: usize) -> Attention<DenseArray> {
        Attention {
            query: self.linear(d, d),
            key: self.linear(d, d),
            value: self.linear(d, d),
            output: self.linear(d, d),
        }
    }
}

impl ForecasterParams {
    /// Seeded initialisation: uniform(±1/√fan_in) weights, zero biases, unit
    /// norm gains and an N(0, 0.02²) global token.
    pub fn init(config: &RunConfig, seed: u64) -> Self {
        let d = config.d_model;
        let cross = config.bridging == Bridging::Cross;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let patch_embed = init.linear(config.patch_len, d);
        let exo_embed = init.linear(config.exo_lookback, d);
        let global_token = cross.then(|| DenseArray::normal(&[d], 0.02, &mut init.rng));
        let blocks = (0..config.blocks)
            .map(|_| Block {
                self_attn: init.attention(d),
                self_norm: Init::norm(d),
                cross_attn: cross.then(|| init.attention(d)),
                cross_norm: cross.then(|| Init::norm(d)),
                conv_in: init.linear(d, config.ff_hidden()),
                conv_out: init.linear(config.ff_hidden(), d),
                conv_norm: Init::norm(d),
            })
            .collect();
        let head = init.linear(config.head_tokens() * d, config.horizon);
        Self {
            patch_embed,
            exo_embed,
            global_token,
            blocks,
            head,
        }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, a| n += a.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, a| ok &= a.is_finite());
        ok
    }
}
