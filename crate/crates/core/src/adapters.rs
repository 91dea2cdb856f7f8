//! LoRA experts, the shared/specific mixture, the task discriminator and the
//! adversarial objective.
//!
//! At each adapter site the frozen projection output `base` is adapted twice:
//! `z_s = base + delta_shared(z_i)` and `z_t = base + delta_task(z_i)`. A
//! per-task gate turns `z_i` into convex weights `(beta_s, beta_t)` and the site
//! emits `beta_s * z_s + beta_t * z_t`, evaluated as `z_t + beta_s * (z_s - z_t)`
//! so identical experts reproduce `base` bit for bit.
//!
//! The discriminator sees `z_s` through a gradient-reversal node with
//! `lambda = gan_weight`, so one backward pass of `L_SFT + L_GAN` gives the
//! discriminator `+dL_GAN` and the generator side `dL_SFT - gan_weight * dL_GAN`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::backbone::{gaussian, read, AdapterSite, Projection, INIT_STD};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which experts exist at each site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Shared expert, one expert per task, per-task gate, discriminator.
    Mixture,
    /// One shared expert per site and nothing else.
    SharedOnly,
    /// One expert per task per site and nothing else.
    SpecificOnly,
}

/// Low-rank update `scale * B A x` with `A: r x I`, `B: O x r`.
#[derive(Clone, Copy, Debug)]
pub struct LoraExpert {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraExpert {
    fn build(store: &mut ParamStore, seed: u64, name: &str, group: Group, site: &AdapterSite, rank: usize, scale: f64) -> Self {
        let a = store.insert(format!("{name}.a"), group, gaussian(seed, &format!("{name}.a"), &[rank, site.input], INIT_STD));
        let b = store.insert(format!("{name}.b"), group, Tensor::zeros(&[site.output, rank]));
        Self { a, b, rank, scale }
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.a).cols()
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        store.get(self.b).rows()
    }

    /// Row-wise delta for an `n x I` input.
    pub fn delta(&self, tape: &mut Tape<'_>, x: Var, frozen: bool) -> Result<Var> {
        let a = read(tape, self.a, frozen);
        let b = read(tape, self.b, frozen);
        let ax = tape.matmul_t(x, a)?;
        let bax = tape.matmul_t(ax, b)?;
        Ok(tape.scale(bax, self.scale))
    }

    /// `scale * B (A x)` for a single input vector.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let width = self.input_width(store);
        if x.len() != width {
            return Err(Error::shape("lora_forward", &[width], &[x.len()]));
        }
        let mut tape = Tape::frozen(store);
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let d = self.delta(&mut tape, xv, true)?;
        Ok(tape.value(d).data().to_vec())
    }
}

/// Per-task gate: `softmax(z_i G^T + g)` over (shared, specific).
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Discriminator {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct SiteAdapters {
    pub site: AdapterSite,
    pub shared: Option<LoraExpert>,
    pub specific: Vec<LoraExpert>,
    pub gates: Vec<Gate>,
}

#[derive(Clone, Debug)]
pub struct AdapterStack {
    pub arch: Architecture,
    pub n_tasks: usize,
    pub sites: Vec<SiteAdapters>,
    pub discriminator: Option<Discriminator>,
}

/// Result of [`AdapterStack::combine`] at one site.
pub struct Combined {
    pub z_next: Var,
    /// Shared representation, routed through gradient reversal in train mode.
    pub z_shared: Option<Var>,
    /// `n x 2` gate weights, columns (shared, specific).
    pub beta: Option<Var>,
}

impl AdapterStack {
    pub fn build(cfg: &ModelConfig, sites: &[AdapterSite], arch: Architecture, store: &mut ParamStore) -> Self {
        let (seed, n, r, s) = (cfg.seed, cfg.n_tasks(), cfg.lora_rank, cfg.lora_scale());
        let sites = sites
            .iter()
            .map(|site| {
                let i = site.index;
                let shared = matches!(arch, Architecture::Mixture | Architecture::SharedOnly).then(|| {
                    LoraExpert::build(store, seed, &format!("adapter.site{i}.shared"), Group::Shared { site: i }, site, r, s)
                });
                let specific = if matches!(arch, Architecture::Mixture | Architecture::SpecificOnly) {
                    (0..n)
                        .map(|t| {
                            LoraExpert::build(store, seed, &format!("adapter.site{i}.task{t}"), Group::Specific { task: t, site: i }, site, r, s)
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let gates = if arch == Architecture::Mixture {
                    (0..n)
                        .map(|t| {
                            let g = Group::Gate { task: t, site: i };
                            Gate {
                                weight: store.insert(format!("gate.site{i}.task{t}.weight"), g, Tensor::zeros(&[2, site.input])),
                                bias: store.insert(format!("gate.site{i}.task{t}.bias"), g, Tensor::zeros(&[1, 2])),
                            }
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                SiteAdapters { site: *site, shared, specific, gates }
            })
            .collect();
        let discriminator = (arch == Architecture::Mixture).then(|| Discriminator {
            weight: store.insert("discriminator.weight", Group::Discriminator, gaussian(seed, "discriminator.weight", &[n, cfg.hidden_size], INIT_STD)),
            bias: store.insert("discriminator.bias", Group::Discriminator, Tensor::zeros(&[1, n])),
        });
        Self { arch, n_tasks: n, sites, discriminator }
    }

    pub fn expert_count(&self) -> usize {
        self.sites
            .iter()
            .map(|s| s.shared.iter().count() + s.specific.len())
            .sum()
    }

    /// Sites whose shared representation feeds the discriminator: those with
    /// output width `H`, i.e. the FFN down projections.
    pub fn discriminator_sites(&self) -> impl Iterator<Item = &SiteAdapters> {
        self.sites.iter().filter(|s| s.site.projection == Projection::Down)
    }

    /// Mixes the adapted representations at `site`.
    ///
    /// `grl_lambda` is `Some` in train mode; the shared representation handed
    /// back for the discriminator then sits behind a gradient-reversal node.
    pub fn combine(
        &self,
        tape: &mut Tape<'_>,
        site: usize,
        task: usize,
        z_in: Var,
        base: Var,
        grl_lambda: Option<f64>,
    ) -> Result<Combined> {
        if task >= self.n_tasks {
            return Err(Error::Task { task, n_tasks: self.n_tasks });
        }
        let sa = self.sites.get(site).ok_or(Error::Index { what: "adapter site", index: site, bound: self.sites.len() })?;
        let frozen = grl_lambda.is_none();
        match self.arch {
            Architecture::SharedOnly => {
                let d = sa.shared.expect("shared expert").delta(tape, z_in, frozen)?;
                Ok(Combined { z_next: tape.add(base, d)?, z_shared: None, beta: None })
            }
            Architecture::SpecificOnly => {
                let d = sa.specific[task].delta(tape, z_in, frozen)?;
                Ok(Combined { z_next: tape.add(base, d)?, z_shared: None, beta: None })
            }
            Architecture::Mixture => {
                let ds = sa.shared.expect("shared expert").delta(tape, z_in, frozen)?;
                let z_s = tape.add(base, ds)?;
                let dt = sa.specific[task].delta(tape, z_in, frozen)?;
                let z_t = tape.add(base, dt)?;

                let gate = sa.gates[task];
                let gw = read(tape, gate.weight, frozen);
                let gb = read(tape, gate.bias, frozen);
                let logits = tape.matmul_t(z_in, gw)?;
                let logits = tape.add_row(logits, gb)?;
                let beta = tape.softmax_rows(logits)?;
                let beta_s = tape.slice_cols(beta, 0, 1)?;

                let diff = tape.sub(z_s, z_t)?;
                let mixed = tape.col_scale(diff, beta_s)?;
                let z_next = tape.add(z_t, mixed)?;

                let z_shared = match grl_lambda {
                    Some(l) => tape.grad_reverse(z_s, l),
                    None => z_s,
                };
                Ok(Combined { z_next, z_shared: Some(z_shared), beta: Some(beta) })
            }
        }
    }

    /// Discriminator logits for a pooled `1 x H` shared representation.
    pub fn discriminator_logits(&self, tape: &mut Tape<'_>, pooled: Var, frozen: bool) -> Result<Var> {
        let d = self
            .discriminator
            .ok_or_else(|| Error::Contract("architecture has no discriminator".into()))?;
        let w = read(tape, d.weight, frozen);
        let b = read(tape, d.bias, frozen);
        let l = tape.matmul_t(pooled, w)?;
        tape.add_row(l, b)
    }
}

/// Task probabilities `softmax(phi z + bias)` for one pooled shared vector.
pub fn discriminate(store: &ParamStore, disc: &Discriminator, pooled: &[f64]) -> Result<Vec<f64>> {
    let w = store.get(disc.weight);
    if pooled.len() != w.cols() {
        return Err(Error::shape("discriminate", w.shape(), &[pooled.len()]));
    }
    let logits: Vec<f64> = (0..w.rows())
        .map(|k| w.row_slice(k).iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>() + store.get(disc.bias).data()[k])
        .collect();
    Ok(autodiff::softmax_rows(&Tensor::row(logits))?.into_data())
}

/// Adversarial loss from predicted task distributions: for every site, the
/// batch-mean of `-ln p[true task]`, summed over sites.
pub fn gan_loss(per_site_probs: &[Tensor], task_ids: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for probs in per_site_probs {
        if probs.rows() != task_ids.len() {
            return Err(Error::shape("gan_loss", probs.shape(), &[task_ids.len()]));
        }
        let n = probs.cols();
        let mut site = 0.0;
        for (r, &t) in task_ids.iter().enumerate() {
            if t >= n {
                return Err(Error::Index { what: "task id", index: t, bound: n });
            }
            site -= probs.get(r, t).ln();
        }
        total += site / task_ids.len() as f64;
    }
    Ok(total)
}

/// The reported objective `L_SFT - gan_weight * L_GAN`.
pub fn total_loss(sft: f64, gan: f64, gan_weight: f64) -> f64 {
    sft - gan_weight * gan
}
