//! Finite-difference verification of every backward rule and of the
//! end-to-end gradients produced by a training step.

use serde::Serialize;

use crate::autodiff::{cross_entropy, Tape, Var};
use crate::config::ModelConfig;
use crate::data::Example;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check_with, relative_error, GradCheckReport};
use crate::model::Model;
use crate::par::{self, Execution};
use crate::params::{Group, ParamId};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{architecture_for, batch_gradients};

pub const SUITE_TOLERANCE: f64 = 1e-5;
pub const SUITE_STEP: f64 = 1e-5;
pub const POINTS_PER_RULE: usize = 10;
/// Step for the end-to-end checks, which combine central differences at `h`
/// and `h/2` into `(4 D(h/2) - D(h)) / 3`. Plain central differences of a
/// loss near 1 cannot resolve gradients of order 1e-7 to 1e-5 relative in
/// 64-bit: the rounding floor is about `ulp(f) / 2h`.
pub const END_TO_END_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub kinks: usize,
}

impl CheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(1.0)).collect()).expect("shape matches")
}

/// `sum(w * x)` with a fixed random `w`, turning any output into a scalar
/// whose gradient exercises every entry.
fn project(t: &mut Tape<'_>, x: Var, w: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(x, wv)?;
    Ok(t.sum(p))
}

type Build = dyn Fn(&mut Rng) -> (Tensor, Box<dyn Fn(&mut Tape<'_>, Var) -> Result<Var> + Sync>);

fn rules() -> Vec<(&'static str, Box<Build>)> {
    fn rule<F>(f: F) -> Box<Build>
    where
        F: Fn(&mut Rng) -> (Tensor, Box<dyn Fn(&mut Tape<'_>, Var) -> Result<Var> + Sync>) + 'static,
    {
        Box::new(f)
    }
    vec![
        ("matmul/lhs", rule(|r| {
            let (a, b, w) = (random(r, &[3, 4]), random(r, &[4, 2]), random(r, &[3, 2]));
            (a, Box::new(move |t, x| { let bv = t.constant(b.clone()); let y = t.matmul(x, bv)?; project(t, y, &w) }))
        })),
        ("matmul/rhs", rule(|r| {
            let (a, b, w) = (random(r, &[3, 4]), random(r, &[4, 2]), random(r, &[3, 2]));
            (b, Box::new(move |t, x| { let av = t.constant(a.clone()); let y = t.matmul(av, x)?; project(t, y, &w) }))
        })),
        ("matmul_t/lhs", rule(|r| {
            let (a, b, w) = (random(r, &[3, 4]), random(r, &[5, 4]), random(r, &[3, 5]));
            (a, Box::new(move |t, x| { let bv = t.constant(b.clone()); let y = t.matmul_t(x, bv)?; project(t, y, &w) }))
        })),
        ("matmul_t/rhs", rule(|r| {
            let (a, b, w) = (random(r, &[3, 4]), random(r, &[5, 4]), random(r, &[3, 5]));
            (b, Box::new(move |t, x| { let av = t.constant(a.clone()); let y = t.matmul_t(av, x)?; project(t, y, &w) }))
        })),
        ("add", rule(|r| {
            let (a, b, w) = (random(r, &[2, 3]), random(r, &[2, 3]), random(r, &[2, 3]));
            (a, Box::new(move |t, x| { let bv = t.constant(b.clone()); let y = t.add(x, bv)?; let y = t.add(y, x)?; project(t, y, &w) }))
        })),
        ("sub", rule(|r| {
            let (a, b, w) = (random(r, &[2, 3]), random(r, &[2, 3]), random(r, &[2, 3]));
            (a, Box::new(move |t, x| { let bv = t.constant(b.clone()); let y = t.sub(bv, x)?; project(t, y, &w) }))
        })),
        ("mul", rule(|r| {
            let (a, b, w) = (random(r, &[2, 3]), random(r, &[2, 3]), random(r, &[2, 3]));
            (a, Box::new(move |t, x| { let bv = t.constant(b.clone()); let y = t.mul(x, bv)?; let y = t.mul(y, x)?; project(t, y, &w) }))
        })),
        ("add_row/row", rule(|r| {
            let (a, b, w) = (random(r, &[3, 4]), random(r, &[1, 4]), random(r, &[3, 4]));
            (b, Box::new(move |t, x| { let av = t.constant(a.clone()); let y = t.add_row(av, x)?; project(t, y, &w) }))
        })),
        ("scale", rule(|r| {
            let (a, w) = (random(r, &[2, 3]), random(r, &[2, 3]));
            (a, Box::new(move |t, x| { let y = t.scale(x, -1.7); project(t, y, &w) }))
        })),
        ("col_scale/matrix", rule(|r| {
            let (a, c, w) = (random(r, &[3, 4]), random(r, &[3, 1]), random(r, &[3, 4]));
            (a, Box::new(move |t, x| { let cv = t.constant(c.clone()); let y = t.col_scale(x, cv)?; project(t, y, &w) }))
        })),
        ("col_scale/column", rule(|r| {
            let (a, c, w) = (random(r, &[3, 4]), random(r, &[3, 1]), random(r, &[3, 4]));
            (c, Box::new(move |t, x| { let av = t.constant(a.clone()); let y = t.col_scale(av, x)?; project(t, y, &w) }))
        })),
        ("slice_cols+concat_cols", rule(|r| {
            let (a, w) = (random(r, &[3, 5]), random(r, &[3, 5]));
            (a, Box::new(move |t, x| {
                let l = t.slice_cols(x, 0, 2)?;
                let m = t.slice_cols(x, 2, 3)?;
                let y = t.concat_cols(&[m, l])?;
                project(t, y, &w)
            }))
        })),
        ("relu", rule(|r| {
            let (a, w) = (random(r, &[3, 4]), random(r, &[3, 4]));
            (a, Box::new(move |t, x| { let y = t.relu(x); project(t, y, &w) }))
        })),
        ("gelu", rule(|r| {
            let (a, w) = (random(r, &[3, 4]), random(r, &[3, 4]));
            (a, Box::new(move |t, x| { let y = t.gelu(x); project(t, y, &w) }))
        })),
        ("softmax_rows", rule(|r| {
            let (a, w) = (random(r, &[3, 4]), random(r, &[3, 4]));
            (a, Box::new(move |t, x| { let y = t.softmax_rows(x)?; project(t, y, &w) }))
        })),
        ("softmax_rows_masked", rule(|r| {
            let (a, w) = (random(r, &[3, 4]), random(r, &[3, 4]));
            (a, Box::new(move |t, x| { let y = t.softmax_rows_masked(x, &[true, false, true, true])?; project(t, y, &w) }))
        })),
        ("layer_norm/input", rule(|r| {
            let (a, g, b, w) = (random(r, &[3, 5]), random(r, &[1, 5]), random(r, &[1, 5]), random(r, &[3, 5]));
            (a, Box::new(move |t, x| {
                let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
                let y = t.layer_norm(x, gv, bv)?;
                project(t, y, &w)
            }))
        })),
        ("layer_norm/gain", rule(|r| {
            let (a, g, b, w) = (random(r, &[3, 5]), random(r, &[1, 5]), random(r, &[1, 5]), random(r, &[3, 5]));
            (g, Box::new(move |t, x| {
                let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
                let y = t.layer_norm(av, x, bv)?;
                project(t, y, &w)
            }))
        })),
        ("layer_norm/bias", rule(|r| {
            let (a, g, b, w) = (random(r, &[3, 5]), random(r, &[1, 5]), random(r, &[1, 5]), random(r, &[3, 5]));
            (b, Box::new(move |t, x| {
                let (av, gv) = (t.constant(a.clone()), t.constant(g.clone()));
                let y = t.layer_norm(av, gv, x)?;
                project(t, y, &w)
            }))
        })),
        ("gather", rule(|r| {
            let (a, w) = (random(r, &[4, 3]), random(r, &[5, 3]));
            (a, Box::new(move |t, x| { let y = t.gather(x, &[2, 0, 2, 3, 2])?; project(t, y, &w) }))
        })),
        ("mean_rows", rule(|r| {
            let (a, w) = (random(r, &[4, 3]), random(r, &[1, 3]));
            (a, Box::new(move |t, x| { let y = t.mean_rows(x, &[true, false, true, true])?; project(t, y, &w) }))
        })),
        ("cross_entropy", rule(|r| {
            let a = random(r, &[3, 4]);
            (a, Box::new(move |t, x| t.cross_entropy(x, &[3, 0, 1])))
        })),
        ("sum", rule(|r| {
            let a = random(r, &[3, 4]);
            (a, Box::new(move |t, x| { let y = t.mul(x, x)?; Ok(t.sum(y)) }))
        })),
    ]
}

fn merge(name: &str, reports: &[GradCheckReport]) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        points: reports.len(),
        coordinates: reports.iter().map(|r| r.coordinates).sum(),
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        kinks: reports.iter().map(|r| r.kinks.len()).sum(),
    }
}

/// Every backward rule at `POINTS_PER_RULE` random points.
pub fn check_rules(seed: u64, exec: Execution) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, build) in rules() {
        let mut reports = Vec::with_capacity(POINTS_PER_RULE);
        for k in 0..POINTS_PER_RULE {
            let mut rng = Rng::for_label(seed, &format!("gradsuite/{name}/{k}"));
            let (point, f) = build(&mut rng);
            reports.push(finite_diff_check_with(exec, f, &point, SUITE_STEP)?);
        }
        out.push(merge(name, &reports));
    }
    out.push(check_grad_reverse(seed)?);
    Ok(out)
}

/// Gradient reversal is checked against the negated, scaled finite
/// difference of its (identity) forward pass.
fn check_grad_reverse(seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for k in 0..POINTS_PER_RULE {
        let mut rng = Rng::for_label(seed, &format!("gradsuite/grad_reverse/{k}"));
        let (a, w) = (random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3]));
        let lambda = rng.uniform();
        let f = |x: &Tensor| -> Result<f64> {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = t.grad_reverse(xv, lambda);
            let s = project(&mut t, y, &w)?;
            t.value(s).item()
        };
        let mut t = Tape::new();
        let xv = t.input(a.clone());
        let y = t.grad_reverse(xv, lambda);
        let s = project(&mut t, y, &w)?;
        let g = t.backward(s)?;
        let analytic = g.input(xv).cloned().unwrap_or_else(|| Tensor::zeros(a.shape()));
        for i in 0..a.numel() {
            let (mut p, mut m) = (a.clone(), a.clone());
            p.data_mut()[i] += SUITE_STEP;
            m.data_mut()[i] -= SUITE_STEP;
            let numeric = (f(&p)? - f(&m)?) / (2.0 * SUITE_STEP);
            worst = worst.max(relative_error(analytic.data()[i], -lambda * numeric));
        }
        coordinates += a.numel();
    }
    Ok(CheckResult {
        name: "grad_reverse".into(),
        points: POINTS_PER_RULE,
        coordinates,
        max_rel_error: worst,
        kinks: 0,
    })
}

/// Label, selector, and whether the group is scored against `L_GAN` alone.
type GroupCheck = (&'static str, fn(&Group) -> bool, bool);

/// The tiny model used for end-to-end checks: H=8, rank 2, 2 blocks.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        n_blocks: 2,
        n_heads: 2,
        ffn_inner: None,
        vocab_size: 12,
        max_seq_len: 6,
        task_classes: vec![2, 3, 4],
        lora_rank: 2,
        lora_alpha: 4.0,
        seed,
    }
}

/// A tiny mixture model whose every tensor is perturbed away from its
/// initialization, so no gradient is trivially zero.
pub fn perturbed_tiny_model(seed: u64) -> Result<Model> {
    let mut model = Model::new(&tiny_config(seed), architecture_for(crate::config::Method::MoeCl))?;
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = model.store.entry(id).name.clone();
        let mut rng = Rng::for_label(seed, &format!("gradsuite/perturb/{name}"));
        model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.normal(0.3));
    }
    Ok(model)
}

fn tiny_batch() -> Vec<Example> {
    vec![
        Example { tokens: vec![2, 5, 7, 3, 0, 0], label: 2 },
        Example { tokens: vec![4, 11, 9, 6, 8, 1], label: 0 },
    ]
}

/// Batch-mean `(L_SFT, L_GAN)` evaluated without recording anything.
pub fn objective(model: &Model, batch: &[Example], task: usize) -> Result<(f64, f64)> {
    let (mut sft, mut gan) = (0.0, 0.0);
    for ex in batch {
        let inf = model.infer(&ex.tokens, task)?;
        sft += cross_entropy(&Tensor::row(inf.logits), &[ex.label])?;
        gan += inf.disc_probs.iter().map(|p| -p[task].ln()).sum::<f64>();
    }
    let n = batch.len() as f64;
    Ok((sft / n, gan / n))
}

/// Compares the gradient of one training step against extrapolated central
/// differences:
/// generator-side tensors against `L_SFT - gan_weight * L_GAN`, the
/// discriminator against `L_GAN` alone.
pub fn check_end_to_end(seed: u64, gan_weight: f64, exec: Execution) -> Result<Vec<CheckResult>> {
    let model = perturbed_tiny_model(seed)?;
    let task = 1;
    let batch = tiny_batch();
    let mask = crate::trainer::trainable_mask(&model, task, true);
    let refs: Vec<&Example> = batch.iter().collect();
    let (grads, _) = batch_gradients(&model, &mask, &refs, task, gan_weight, exec)?;

    let groups: [GroupCheck; 5] = [
        ("shared expert", |g| matches!(g, Group::Shared { .. }), false),
        ("specific expert", |g| matches!(g, Group::Specific { .. }), false),
        ("gate", |g| matches!(g, Group::Gate { .. }), false),
        ("head", |g| matches!(g, Group::Head { .. }), false),
        ("discriminator", |g| matches!(g, Group::Discriminator), true),
    ];
    let mut out = Vec::new();
    for (label, pick, is_disc) in groups {
        let coords: Vec<(ParamId, usize)> = model
            .store
            .ids()
            .filter(|id| mask[id.0] && pick(&model.store.entry(*id).group))
            .flat_map(|id| (0..model.store.get(id).numel()).map(move |i| (id, i)))
            .collect();
        let loss = |m: &Model| -> Result<f64> {
            let (sft, gan) = objective(m, &batch, task)?;
            Ok(if is_disc { gan } else { sft - gan_weight * gan })
        };
        let errors = par::map(exec, &coords, |&(id, i)| -> Result<f64> {
            let mut m = model.clone();
            let x0 = m.store.get(id).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                m.store.get_mut(id).data_mut()[i] = x0 + h;
                let fp = loss(&m)?;
                m.store.get_mut(id).data_mut()[i] = x0 - h;
                let fm = loss(&m)?;
                m.store.get_mut(id).data_mut()[i] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let (d1, d2) = (central(END_TO_END_STEP)?, central(END_TO_END_STEP / 2.0)?);
            let numeric = (4.0 * d2 - d1) / 3.0;
            let analytic = grads.get(&id).map_or(0.0, |g| g.data()[i]);
            Ok(relative_error(analytic, numeric))
        });
        let mut worst = 0.0f64;
        for e in errors {
            worst = worst.max(e?);
        }
        out.push(CheckResult {
            name: format!("end-to-end/{label} (gan_weight {gan_weight})"),
            points: 1,
            coordinates: coords.len(),
            max_rel_error: worst,
            kinks: 0,
        });
    }
    Ok(out)
}

/// Discriminator gradients from two steps that differ only in `gan_weight`
/// (both nonzero) are bit-identical.
pub fn discriminator_gradient_independent_of_weight(seed: u64, w1: f64, w2: f64) -> Result<bool> {
    let model = perturbed_tiny_model(seed)?;
    let task = 1;
    let mask = crate::trainer::trainable_mask(&model, task, true);
    let batch = tiny_batch();
    let refs: Vec<&Example> = batch.iter().collect();
    let (g1, _) = batch_gradients(&model, &mask, &refs, task, w1, Execution::Sequential)?;
    let (g2, _) = batch_gradients(&model, &mask, &refs, task, w2, Execution::Sequential)?;
    let same = model
        .store
        .ids()
        .filter(|id| model.store.entry(*id).group == Group::Discriminator)
        .all(|id| match (g1.get(&id), g2.get(&id)) {
            (Some(a), Some(b)) => a.bit_eq(b),
            _ => false,
        });
    Ok(same)
}

/// The whole suite: every rule, then end-to-end checks at two GAN weights.
pub fn run_suite(seed: u64, exec: Execution) -> Result<Vec<CheckResult>> {
    let mut out = check_rules(seed, exec)?;
    for w in [0.1, 0.7] {
        out.extend(check_end_to_end(seed, w, exec)?);
    }
    Ok(out)
}
