//! Backbone + adapter stack + per-task heads.

use crate::adapters::{AdapterStack, Architecture};
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, Linear, Projection, INIT_STD};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

/// Two-layer MLP head `H -> H -> K_t`. The output layer starts at zero, so an
/// untrained head predicts class 0 for every input.
#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Trainable parameters are recorded; the discriminator path goes
    /// through gradient reversal with this lambda.
    Train { grl_lambda: f64 },
    /// Every parameter is read as a constant; nothing is recorded.
    Infer,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Mean-pooled shared representation per discriminator site.
    pub shared_pooled: Vec<Var>,
    /// Discriminator logits per discriminator site.
    pub disc_logits: Vec<Var>,
    /// Largest `|beta_s + beta_t - 1|` seen at any token of any site.
    pub gate_deviation: f64,
}

/// Plain-value result of [`Model::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub shared_pooled: Vec<Vec<f64>>,
    pub disc_probs: Vec<Vec<f64>>,
    pub gate_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub adapters: AdapterStack,
    pub heads: Vec<Head>,
}

impl Model {
    /// Every tensor is drawn from a stream keyed by its name, so two models
    /// with the same seed share all common tensors regardless of
    /// architecture.
    pub fn new(config: &ModelConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::build(config, &mut store);
        let adapters = AdapterStack::build(config, &backbone.sites, arch, &mut store);
        let h = config.hidden_size;
        let heads = config
            .task_classes
            .iter()
            .enumerate()
            .map(|(t, &k)| {
                let g = Group::Head { task: t };
                let name = format!("head.task{t}");
                Head {
                    hidden: Linear::new(&mut store, config.seed, &format!("{name}.hidden"), g, h, h, INIT_STD),
                    out: Linear::new(&mut store, config.seed, &format!("{name}.out"), g, k, h, 0.0),
                    classes: k,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            adapters,
            heads,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.adapters.arch
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.n_tasks() {
            return Err(Error::Task { task, n_tasks: self.n_tasks() });
        }
        Ok(())
    }

    fn head(&self, tape: &mut Tape<'_>, task: usize, pooled: Var, frozen: bool) -> Result<Var> {
        let head = &self.heads[task];
        let h = head.hidden.apply(tape, pooled, frozen)?;
        let h = tape.gelu(h);
        head.out.apply(tape, h, frozen)
    }

    /// Full MoE-CL forward pass for one token sequence of task `task`.
    pub fn forward_with_adapters(&self, tape: &mut Tape<'_>, tokens: &[u32], task: usize, mode: Mode) -> Result<ForwardOutput> {
        self.check_task(task)?;
        let grl = match mode {
            Mode::Train { grl_lambda } => Some(grl_lambda),
            Mode::Infer => None,
        };
        let frozen = grl.is_none();
        let mut shared = Vec::new();
        let mut gate_deviation = 0.0f64;
        let enc = self.backbone.encode_with(tape, tokens, |tape, site, z_in, base| {
            let c = self.adapters.combine(tape, site.index, task, z_in, base, grl)?;
            if let Some(beta) = c.beta {
                let b = tape.value(beta);
                for r in 0..b.rows() {
                    gate_deviation = gate_deviation.max((b.get(r, 0) + b.get(r, 1) - 1.0).abs());
                }
            }
            if let (Some(z), Projection::Down) = (c.z_shared, site.projection) {
                shared.push(z);
            }
            Ok(c.z_next)
        })?;

        let mut shared_pooled = Vec::with_capacity(shared.len());
        let mut disc_logits = Vec::with_capacity(shared.len());
        for z in shared {
            let pooled = tape.mean_rows(z, &enc.keep)?;
            disc_logits.push(self.adapters.discriminator_logits(tape, pooled, frozen)?);
            shared_pooled.push(pooled);
        }
        let pooled = tape.mean_rows(enc.hidden, &enc.keep)?;
        let logits = self.head(tape, task, pooled, frozen)?;
        Ok(ForwardOutput {
            logits,
            shared_pooled,
            disc_logits,
            gate_deviation,
        })
    }

    /// Head applied to the unadapted backbone.
    pub fn forward_plain(&self, tokens: &[u32], task: usize) -> Result<Vec<f64>> {
        self.check_task(task)?;
        let mut tape = Tape::frozen(&self.store);
        let enc = self.backbone.encode_with(&mut tape, tokens, |_, _, _, base| Ok(base))?;
        let pooled = tape.mean_rows(enc.hidden, &enc.keep)?;
        let logits = self.head(&mut tape, task, pooled, true)?;
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn infer(&self, tokens: &[u32], task: usize) -> Result<Inference> {
        let mut tape = Tape::frozen(&self.store);
        let out = self.forward_with_adapters(&mut tape, tokens, task, Mode::Infer)?;
        let disc_probs = out
            .disc_logits
            .iter()
            .map(|l| crate::autodiff::softmax_rows(tape.value(*l)).map(Tensor::into_data))
            .collect::<Result<_>>()?;
        Ok(Inference {
            logits: tape.value(out.logits).data().to_vec(),
            shared_pooled: out.shared_pooled.iter().map(|v| tape.value(*v).data().to_vec()).collect(),
            disc_probs,
            gate_deviation: out.gate_deviation,
        })
    }

    pub fn parameter_hashes(&self) -> Vec<[u8; 32]> {
        self.store.hashes()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
