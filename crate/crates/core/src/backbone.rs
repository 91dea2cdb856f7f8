//! Frozen toy transformer encoder with adapter hooks on both FFN projections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Up,
    Down,
}

/// One FFN linear projection that adapters attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub index: usize,
    pub block: usize,
    pub projection: Projection,
    pub input: usize,
    pub output: usize,
}

/// `y = x W^T + b` with `W` stored `out x in`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, seed: u64, name: &str, group: Group, out: usize, inp: usize, std: f64) -> Self {
        let weight = store.insert(format!("{name}.weight"), group, gaussian(seed, &format!("{name}.weight"), &[out, inp], std));
        let bias = store.insert(format!("{name}.bias"), group, Tensor::zeros(&[1, out]));
        Self { weight, bias }
    }

    pub(crate) fn apply(&self, tape: &mut Tape<'_>, x: Var, frozen: bool) -> Result<Var> {
        let w = read(tape, self.weight, frozen);
        let b = read(tape, self.bias, frozen);
        let y = tape.matmul_t(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Group::Backbone, Tensor::filled(&[1, width], 1.0)),
            beta: store.insert(format!("{name}.beta"), Group::Backbone, Tensor::zeros(&[1, width])),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param_const(self.gamma);
        let b = tape.param_const(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln2: Norm,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub hidden: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub sites: Vec<AdapterSite>,
}

/// Output of [`Backbone::encode_with`].
pub struct Encoded {
    pub hidden: Var,
    /// `true` for real tokens, `false` for padding.
    pub keep: Vec<bool>,
}

pub(crate) fn gaussian(seed: u64, label: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = Rng::for_label(seed, label);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(std)).collect()).expect("shape")
}

pub(crate) fn read(tape: &mut Tape<'_>, id: ParamId, frozen: bool) -> Var {
    if frozen {
        tape.param_const(id)
    } else {
        tape.param(id)
    }
}

impl Backbone {
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore) -> Self {
        let (h, f, seed) = (cfg.hidden_size, cfg.ffn_width(), cfg.seed);
        let bb = Group::Backbone;
        let tok_emb = store.insert("backbone.tok_emb", bb, gaussian(seed, "backbone.tok_emb", &[cfg.vocab_size, h], INIT_STD));
        let pos_emb = store.insert("backbone.pos_emb", bb, gaussian(seed, "backbone.pos_emb", &[cfg.max_seq_len, h], INIT_STD));
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut sites = Vec::with_capacity(2 * cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let p = format!("backbone.block{b}");
            let lin = |store: &mut ParamStore, n: &str, o, i| Linear::new(store, seed, &format!("{p}.{n}"), bb, o, i, INIT_STD);
            blocks.push(Block {
                ln1: Norm::new(store, &format!("{p}.ln1"), h),
                query: lin(store, "attn.query", h, h),
                key: lin(store, "attn.key", h, h),
                value: lin(store, "attn.value", h, h),
                attn_out: lin(store, "attn.out", h, h),
                ln2: Norm::new(store, &format!("{p}.ln2"), h),
                up: lin(store, "ffn.up", f, h),
                down: lin(store, "ffn.down", h, f),
            });
            sites.push(AdapterSite { index: 2 * b, block: b, projection: Projection::Up, input: h, output: f });
            sites.push(AdapterSite { index: 2 * b + 1, block: b, projection: Projection::Down, input: f, output: h });
        }
        Self {
            hidden: h,
            n_heads: cfg.n_heads,
            vocab_size: cfg.vocab_size,
            max_seq_len: cfg.max_seq_len,
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Norm::new(store, "backbone.final_norm", h),
            sites,
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<bool>> {
        if tokens.len() > self.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence of length {} exceeds max_seq_len {}",
                tokens.len(),
                self.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Vocab { id: bad as usize, size: self.vocab_size });
        }
        let keep: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        if !keep.iter().any(|k| *k) {
            return Err(Error::Contract("empty token sequence".into()));
        }
        Ok(keep)
    }

    /// Runs the encoder. At every adapter site the frozen projection output
    /// `base` is handed to `site_fn` together with the projection input, and
    /// whatever it returns replaces the projection output.
    pub fn encode_with<F>(&self, tape: &mut Tape<'_>, tokens: &[u32], mut site_fn: F) -> Result<Encoded>
    where
        F: FnMut(&mut Tape<'_>, &AdapterSite, Var, Var) -> Result<Var>,
    {
        let keep = self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();

        let tok = tape.param_const(self.tok_emb);
        let pos = tape.param_const(self.pos_emb);
        let te = tape.gather(tok, &ids)?;
        let pe = tape.gather(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        for (b, block) in self.blocks.iter().enumerate() {
            let h = block.ln1.apply(tape, x)?;
            let attn = self.attention(tape, block, h, &keep)?;
            x = tape.add(x, attn)?;

            let h = block.ln2.apply(tape, x)?;
            let up_site = &self.sites[2 * b];
            let base = block.up.apply(tape, h, true)?;
            let u = site_fn(tape, up_site, h, base)?;
            let a = tape.gelu(u);
            let down_site = &self.sites[2 * b + 1];
            let base = block.down.apply(tape, a, true)?;
            let d = site_fn(tape, down_site, a, base)?;
            x = tape.add(x, d)?;
        }
        let hidden = self.final_norm.apply(tape, x)?;
        Ok(Encoded { hidden, keep })
    }

    fn attention(&self, tape: &mut Tape<'_>, block: &Block, h: Var, keep: &[bool]) -> Result<Var> {
        let q = block.query.apply(tape, h, true)?;
        let k = block.key.apply(tape, h, true)?;
        let v = block.value.apply(tape, h, true)?;
        let dh = self.hidden / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for head in 0..self.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows_masked(scores, keep)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        block.attn_out.apply(tape, cat, true)
    }

    /// Hidden states (`len x H`) of the unadapted encoder.
    pub fn encode(&self, store: &ParamStore, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::frozen(store);
        let enc = self.encode_with(&mut tape, tokens, |_, _, _, base| Ok(base))?;
        Ok(tape.value(enc.hidden).clone())
    }
}
