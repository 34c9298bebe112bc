use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::attention::{attention_var, AttentionKind};

/// Architecture of the toy denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    /// Channel width of every UNet level.
    pub channels: usize,
    /// Query/key/value width of every attention layer.
    pub attn_dim: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub time_dim: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            latent_height: 16,
            latent_width: 16,
            latent_channels: 4,
            channels: 32,
            attn_dim: 32,
            text_len: 4,
            text_dim: 32,
            time_dim: 32,
        }
    }
}

/// Identifies one attention layer of the UNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockInfo {
    pub id: usize,
    pub kind: AttentionKind,
    /// Token grid `(height, width)` the layer runs on.
    pub grid: (usize, usize),
}

impl BlockInfo {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Intercepts attention layers during a UNet evaluation.
///
/// Called with the layer's query, key and value matrices (tokens × d). A
/// hook returning `Some(y)` replaces the layer's `AM(Q, K)·V` output with
/// `y`, which must have the same shape; `None` keeps the default.
pub trait AttentionHook {
    fn attend(&mut self, g: &mut Graph, block: &BlockInfo, q: Var, k: Var, v: Var)
        -> Result<Option<Var>>;
}

/// Leaves every layer alone.
pub struct NoHook;

impl AttentionHook for NoHook {
    fn attend(&mut self, _: &mut Graph, _: &BlockInfo, _: Var, _: Var, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

impl<H: AttentionHook + ?Sized> AttentionHook for &mut H {
    fn attend(&mut self, g: &mut Graph, b: &BlockInfo, q: Var, k: Var, v: Var) -> Result<Option<Var>> {
        (**self).attend(g, b, q, k, v)
    }
}

pub type Weights = BTreeMap<String, Matrix>;

const RES_BLOCKS: [(&str, usize); 5] = [("down1", 1), ("down2", 1), ("mid", 1), ("up2", 2), ("up1", 2)];

/// Names and shapes of every parameter.
pub fn parameter_shapes(c: &UnetConfig) -> Vec<(String, (usize, usize))> {
    let ch = c.channels;
    let mut out = vec![
        ("time.w1".to_string(), (c.time_dim, c.time_dim)),
        ("time.b1".to_string(), (1, c.time_dim)),
        ("time.w2".to_string(), (c.time_dim, c.time_dim)),
        ("time.b2".to_string(), (1, c.time_dim)),
        ("conv_in.w".to_string(), (9 * c.latent_channels, ch)),
        ("conv_in.b".to_string(), (1, ch)),
    ];
    for (name, mult) in RES_BLOCKS {
        let cin = ch * mult;
        out.push((format!("{name}.conv1.w"), (9 * cin, ch)));
        out.push((format!("{name}.conv1.b"), (1, ch)));
        out.push((format!("{name}.temb.w"), (c.time_dim, ch)));
        out.push((format!("{name}.temb.b"), (1, ch)));
        out.push((format!("{name}.conv2.w"), (9 * ch, ch)));
        out.push((format!("{name}.conv2.b"), (1, ch)));
        if cin != ch {
            out.push((format!("{name}.skip.w"), (cin, ch)));
        }
    }
    for b in block_layout(c) {
        let src = match b.kind {
            AttentionKind::SelfAttention => ch,
            AttentionKind::Cross => c.text_dim,
        };
        out.push((format!("attn{}.q", b.id), (ch, c.attn_dim)));
        out.push((format!("attn{}.k", b.id), (src, c.attn_dim)));
        out.push((format!("attn{}.v", b.id), (src, c.attn_dim)));
        out.push((format!("attn{}.out.w", b.id), (c.attn_dim, ch)));
        out.push((format!("attn{}.out.b", b.id), (1, ch)));
    }
    out.push(("conv_out.w".to_string(), (9 * ch, c.latent_channels)));
    out.push(("conv_out.b".to_string(), (1, c.latent_channels)));
    out
}

/// The attention layers in evaluation order: a self and a cross layer at
/// each of the two down levels and each of the two up levels.
pub fn block_layout(c: &UnetConfig) -> Vec<BlockInfo> {
    let full = (c.latent_height, c.latent_width);
    let half = (c.latent_height / 2, c.latent_width / 2);
    [full, half, half, full]
        .iter()
        .enumerate()
        .flat_map(|(level, &grid)| {
            [AttentionKind::SelfAttention, AttentionKind::Cross]
                .into_iter()
                .enumerate()
                .map(move |(j, kind)| BlockInfo {
                    id: 2 * level + j,
                    kind,
                    grid,
                })
        })
        .collect()
}

/// Seeded He-style initialization. Output projections start small so the
/// initial network is close to its skip paths.
pub fn init_weights(c: &UnetConfig, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::new();
    for (name, (r, cols)) in parameter_shapes(c) {
        let m = if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
            Matrix::zeros(r, cols)
        } else {
            let gain = if name.starts_with("conv_out") || name.ends_with("conv2.w") {
                0.5
            } else {
                1.0
            };
            let std = gain * (2.0 / r as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Matrix::from_vec(r, cols, (0..r * cols).map(|_| normal.sample(&mut rng)).collect())
                .expect("shape")
        };
        w.insert(name, m);
    }
    w
}

/// Sinusoidal timestep embedding as a `1 × dim` row.
pub fn timestep_embedding(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        row[i] = arg.sin();
        row[half + i] = arg.cos();
    }
    Matrix::from_vec(1, dim, row).expect("shape")
}

/// Parameters bound into one graph.
pub struct BoundWeights {
    vars: HashMap<String, Var>,
}

impl BoundWeights {
    pub fn bind(g: &mut Graph, weights: &Weights, trainable: bool) -> Self {
        let vars = weights
            .iter()
            .map(|(n, m)| (n.clone(), g.leaf(m.clone(), trainable)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("weight `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

const LN_EPS: f64 = 1e-5;

struct Ctx<'a, H: AttentionHook> {
    w: &'a BoundWeights,
    hook: H,
    temb: Var,
    text: Var,
    blocks: Vec<BlockInfo>,
}

impl<H: AttentionHook> Ctx<'_, H> {
    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.w.get(&format!("{name}.w"))?;
        let b = self.w.get(&format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, grid: (usize, usize)) -> Result<Var> {
        let w = self.w.get(&format!("{name}.w"))?;
        let b = self.w.get(&format!("{name}.b"))?;
        let y = g.conv3x3(x, w, grid.0, grid.1)?;
        g.add_row(y, b)
    }

    fn res_block(&self, g: &mut Graph, x: Var, name: &str, grid: (usize, usize)) -> Result<Var> {
        let n = g.layer_norm_rows(x, LN_EPS);
        let a = g.silu(n);
        let h = self.conv(g, a, &format!("{name}.conv1"), grid)?;
        let t = self.linear(g, self.temb, &format!("{name}.temb"))?;
        let h = g.add_row(h, t)?;
        let n = g.layer_norm_rows(h, LN_EPS);
        let a = g.silu(n);
        let h = self.conv(g, a, &format!("{name}.conv2"), grid)?;
        let skip = match self.w.get(&format!("{name}.skip.w")) {
            Ok(sw) => g.matmul(x, sw)?,
            Err(_) => x,
        };
        g.add(skip, h)
    }

    fn attn_layer(&mut self, g: &mut Graph, h: Var, block: BlockInfo) -> Result<Var> {
        let p = format!("attn{}", block.id);
        let x = g.layer_norm_rows(h, LN_EPS);
        let src = match block.kind {
            AttentionKind::SelfAttention => x,
            AttentionKind::Cross => self.text,
        };
        let q = g.matmul(x, self.w.get(&format!("{p}.q"))?)?;
        let k = g.matmul(src, self.w.get(&format!("{p}.k"))?)?;
        let v = g.matmul(src, self.w.get(&format!("{p}.v"))?)?;
        let y = match self.hook.attend(g, &block, q, k, v)? {
            Some(y) => {
                if g.shape(y) != g.shape(q) {
                    return Err(Error::shape(format!(
                        "hook output for block {} is {:?}, expected {:?}",
                        block.id,
                        g.shape(y),
                        g.shape(q)
                    )));
                }
                y
            }
            None => attention_var(g, q, k, v)?.0,
        };
        let o = self.linear(g, y, &format!("{p}.out"))?;
        g.add(h, o)
    }

    fn attn_pair(&mut self, g: &mut Graph, h: Var, level: usize) -> Result<Var> {
        let (s, c) = (self.blocks[2 * level], self.blocks[2 * level + 1]);
        let h = self.attn_layer(g, h, s)?;
        self.attn_layer(g, h, c)
    }
}

/// Evaluates the noise prediction on graph `g`.
///
/// `z` is `(h·w) × latent_channels`, `text` is `text_len × text_dim`.
pub fn forward<H: AttentionHook>(
    c: &UnetConfig,
    w: &BoundWeights,
    g: &mut Graph,
    z: Var,
    t: usize,
    text: Var,
    hook: H,
) -> Result<Var> {
    let (hh, ww) = (c.latent_height, c.latent_width);
    if g.shape(z) != (hh * ww, c.latent_channels) {
        return Err(Error::shape(format!(
            "latent is {:?}, model expects {}x{}",
            g.shape(z),
            hh * ww,
            c.latent_channels
        )));
    }
    if g.shape(text) != (c.text_len, c.text_dim) {
        return Err(Error::shape(format!(
            "text embedding is {:?}, model expects {}x{}",
            g.shape(text),
            c.text_len,
            c.text_dim
        )));
    }
    let full = (hh, ww);
    let half = (hh / 2, ww / 2);

    let te = g.constant(timestep_embedding(t, c.time_dim));
    let te = {
        let w1 = w.get("time.w1")?;
        let b1 = w.get("time.b1")?;
        let y = g.matmul(te, w1)?;
        let y = g.add_row(y, b1)?;
        let y = g.silu(y);
        let w2 = w.get("time.w2")?;
        let b2 = w.get("time.b2")?;
        let y = g.matmul(y, w2)?;
        let y = g.add_row(y, b2)?;
        g.silu(y)
    };
    let mut ctx = Ctx {
        w,
        hook,
        temb: te,
        text,
        blocks: block_layout(c),
    };

    let h = ctx.conv(g, z, "conv_in", full)?;
    let h = ctx.res_block(g, h, "down1", full)?;
    let s1 = ctx.attn_pair(g, h, 0)?;
    let h = g.avg_pool2(s1, full.0, full.1)?;
    let h = ctx.res_block(g, h, "down2", half)?;
    let s2 = ctx.attn_pair(g, h, 1)?;
    let h = ctx.res_block(g, s2, "mid", half)?;
    let h = g.concat_cols(h, s2)?;
    let h = ctx.res_block(g, h, "up2", half)?;
    let h = ctx.attn_pair(g, h, 2)?;
    let h = g.upsample2(h, half.0, half.1)?;
    let h = g.concat_cols(h, s1)?;
    let h = ctx.res_block(g, h, "up1", full)?;
    let h = ctx.attn_pair(g, h, 3)?;
    let n = g.layer_norm_rows(h, LN_EPS);
    let a = g.silu(n);
    ctx.conv(g, a, "conv_out", full)
}
