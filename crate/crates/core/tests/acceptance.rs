//! Acceptance criteria 1-9, one PASS/FAIL line each. Exits non-zero if any
//! criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{metric_cases, small_run_config};
use moecl::checkpoint::Dtype;
use moecl::experiments::{prepare, rotation_orders, run_ablation, run_grid, GridRun, Prepared};
use moecl::gradsuite::{discriminator_gradient_independent_of_weight, run_suite, SUITE_TOLERANCE};
use moecl::params::Group;
use moecl::report::build_report;
use moecl::trainer::{evaluate_detailed, train_sequence_with};
use moecl::{
    avg_accuracy, backward_transfer, evaluate, forward_transfer, load_checkpoint, save_checkpoint, AccuracyMatrix, Architecture,
    Checkpoint, DataConfig, Execution, Method, Model, ModelConfig, Result, Rng, RunConfig, Tensor, TrainConfig,
};

type Criterion = (&'static str, fn() -> Result<Outcome>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Behavioral experiment setting shared by criteria 6, 7 and 9.
fn synthcl_run() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            hidden_size: 32,
            max_seq_len: 16,
            lora_rank: 8,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            learning_rate: 5e-4,
            epochs: 5,
            batch_size: 16,
            ..TrainConfig::default()
        },
        data: DataConfig::default(),
    }
}

fn synthcl() -> &'static (Prepared, TrainConfig) {
    static CELL: OnceLock<(Prepared, TrainConfig)> = OnceLock::new();
    CELL.get_or_init(|| {
        let run = synthcl_run();
        (prepare(&run).expect("synthetic benchmark"), run.train)
    })
}

fn forgetting_grid() -> &'static Vec<GridRun> {
    static CELL: OnceLock<Vec<GridRun>> = OnceLock::new();
    CELL.get_or_init(|| {
        let (p, train) = synthcl();
        run_grid(
            &p.tasks,
            &p.model,
            train,
            &[Method::MoeCl, Method::SequentialFt],
            &rotation_orders(3),
            &[0, 1, 2],
            Execution::Parallel,
        )
        .expect("grid runs")
    })
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let results = run_suite(0, Execution::Parallel)?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passes(SUITE_TOLERANCE)).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let independent = discriminator_gradient_independent_of_weight(0, 0.1, 0.7)?;
    outcome(
        failed.is_empty() && independent && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst relative error {worst:.2e} (tol {SUITE_TOLERANCE:e}), failing {failed:?}, phi gradient weight-independent: {independent}, {:.1}s",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn neutrality() -> Result<Outcome> {
    let p = common::small_tasks();
    let mut compared = 0;
    let mut mismatches = 0;
    for arch in [Architecture::Mixture, Architecture::SharedOnly, Architecture::SpecificOnly] {
        for seed in 0..3 {
            let mut model = Model::new(&ModelConfig { seed, ..p.model.clone() }, arch)?;
            let mut rng = Rng::new(100 + seed);
            let live: Vec<_> = model
                .store
                .ids()
                .filter(|id| matches!(model.store.entry(*id).group, Group::Gate { .. } | Group::Head { .. }))
                .collect();
            for id in live {
                let t = model.store.get(id);
                let data = (0..t.numel()).map(|_| rng.normal(1.0)).collect();
                let fresh = Tensor::new(t.shape().to_vec(), data)?;
                model.store.set(id, fresh)?;
            }
            for task in &p.tasks {
                for ex in &task.test {
                    let adapted = model.infer(&ex.tokens, task.id)?.logits;
                    let plain = model.forward_plain(&ex.tokens, task.id)?;
                    compared += 1;
                    if adapted.iter().map(|v| v.to_bits()).ne(plain.iter().map(|v| v.to_bits())) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    outcome(mismatches == 0, format!("{compared} forward passes over 3 architectures x 3 seeds, {mismatches} differ from the plain backbone"))
}

fn in_phase(group: &Group, task: usize) -> bool {
    match *group {
        Group::Backbone => false,
        Group::Shared { .. } | Group::Discriminator => true,
        Group::Specific { task: t, .. } | Group::Gate { task: t, .. } | Group::Head { task: t } => t == task,
    }
}

fn freezing() -> Result<Outcome> {
    let run = small_run_config();
    let p = prepare(&run)?;
    let mut violations = Vec::new();
    let mut phases = 0;
    for order in rotation_orders(3) {
        let train = TrainConfig { epochs: 2, order: Some(order.clone()), ..run.train.clone() };
        let mut prev = Model::new(&p.model, Architecture::Mixture)?.parameter_hashes();
        train_sequence_with(&p.tasks, &p.model, &train, &mut |state, log, _| {
            let now = state.model.parameter_hashes();
            let mut moved_in_phase = false;
            for (i, e) in state.model.store.entries().iter().enumerate() {
                if in_phase(&e.group, log.task) {
                    moved_in_phase |= prev[i] != now[i];
                } else if prev[i] != now[i] {
                    violations.push(format!("order {order:?} phase {}: {}", log.phase, e.name));
                }
            }
            if !moved_in_phase {
                violations.push(format!("order {order:?} phase {}: nothing trained", log.phase));
            }
            phases += 1;
            prev = now;
            Ok(())
        })?;
    }
    outcome(violations.is_empty(), format!("{phases} phases over 3 orders, violations {violations:?}"))
}

fn gate_normalization() -> Result<Outcome> {
    let run = small_run_config();
    let p = prepare(&run)?;
    let train = TrainConfig { epochs: 3, ..run.train.clone() };
    let mut infer_worst = 0.0f64;
    let mut evals = 0;
    let out = train_sequence_with(&p.tasks, &p.model, &train, &mut |state, _, _| {
        for t in &p.tasks {
            infer_worst = infer_worst.max(evaluate_detailed(&state.model, t, Execution::Sequential)?.gate_dev);
            evals += t.test.len();
        }
        Ok(())
    })?;
    let steps: Vec<f64> = out.logs.iter().flat_map(|l| l.steps.iter().map(|s| s.gate_dev)).collect();
    let train_worst = steps.iter().copied().fold(0.0, f64::max);
    let worst = train_worst.max(infer_worst).max(out.eval_gate_dev);
    outcome(
        worst <= 1e-6 && !steps.is_empty(),
        format!("{} training steps, {evals} inference passes, max |beta_s + beta_t - 1| = {worst:.2e}", steps.len()),
    )
}

fn metric_oracles() -> Result<Outcome> {
    let cases = metric_cases();
    let mut wrong = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let m = AccuracyMatrix::from_rows(c.order.clone(), c.rows.clone())?;
        let got = (avg_accuracy(&m)?, backward_transfer(&m)?, forward_transfer(&m, &c.chance)?);
        if got != (c.acc, c.bwt, c.fwt) {
            wrong.push(format!("case {i}: got {got:?}"));
        }
    }
    let worked = &cases[0];
    let worked_ok = (worked.acc - 0.75).abs() < 1e-15 && (worked.bwt + 0.2).abs() < 1e-15 && (worked.fwt + 0.1).abs() < 1e-15;
    outcome(wrong.is_empty() && worked_ok, format!("{} matrices, mismatches {wrong:?}", cases.len()))
}

fn adversarial_effect() -> Result<Outcome> {
    let start = Instant::now();
    let (p, train) = synthcl();
    let report = run_ablation(&p.tasks, &p.model, train, 0.1, &[0, 1, 2], Execution::Parallel)?;
    let elapsed = start.elapsed();
    let pairs: Vec<String> = report
        .pairs
        .iter()
        .map(|q| format!("seed {}: {:.4} vs {:.4}", q.seed, q.probe_without, q.probe_with))
        .collect();
    outcome(
        report.gap >= 0.05 && elapsed < Duration::from_secs(1800),
        format!(
            "probe accuracy gan=0 {:.4}, gan=0.1 {:.4}, gap {:+.4} (target >= 0.05), [{}], {:.1}s",
            report.mean_probe_without,
            report.mean_probe_with,
            report.gap,
            pairs.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn post_training_accuracy(m: &AccuracyMatrix, task: usize) -> f64 {
    let phase = m.order.iter().position(|t| *t == task).expect("task in order");
    m.rows[phase][task]
}

fn forgetting_ordering() -> Result<Outcome> {
    let start = Instant::now();
    let grid = forgetting_grid();
    let mean = |method: Method, f: &dyn Fn(&AccuracyMatrix) -> f64| {
        let v: Vec<f64> = grid.iter().filter(|r| r.method == method).map(|r| f(&r.summary.matrix)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let bwt = |m: &AccuracyMatrix| backward_transfer(m).expect("complete matrix");
    let acc = |m: &AccuracyMatrix| avg_accuracy(m).expect("complete matrix");
    let (moe_bwt, seq_bwt) = (mean(Method::MoeCl, &bwt), mean(Method::SequentialFt, &bwt));
    let (moe_acc, seq_acc) = (mean(Method::MoeCl, &acc), mean(Method::SequentialFt, &acc));

    let (p, train) = synthcl();
    let per_task = run_grid(&p.tasks, &p.model, train, &[Method::PerTaskFt], &rotation_orders(3), &[0], Execution::Parallel)?;
    let first = &per_task[0].summary.matrix;
    let per_task_same = per_task.iter().all(|r| {
        let m = &r.summary.matrix;
        m.rows.last() == first.rows.last()
            && (0..p.tasks.len()).all(|t| post_training_accuracy(m, t).to_bits() == post_training_accuracy(first, t).to_bits())
    });
    outcome(
        moe_bwt >= seq_bwt && moe_acc >= seq_acc && per_task_same,
        format!(
            "BwT moe-cl {moe_bwt:.4} vs sequential-ft {seq_bwt:.4}; Acc moe-cl {moe_acc:.4} vs sequential-ft {seq_acc:.4}; per-task-ft order-invariant: {per_task_same}; {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn determinism() -> Result<Outcome> {
    let run = small_run_config();
    let p = prepare(&run)?;
    let train = TrainConfig { order: Some(vec![1, 0, 2]), ..run.train.clone() };
    let a = moecl::train_sequence(&p.tasks, &p.model, &train)?;
    let b = moecl::train_sequence(&p.tasks, &p.model, &train)?;
    let c = moecl::train_sequence(&p.tasks, &p.model, &TrainConfig { execution: Execution::Sequential, ..train.clone() })?;
    let bits = |o: &moecl::trainer::SequenceOutcome| -> Vec<u64> {
        o.logs
            .iter()
            .flat_map(|l| l.steps.iter().flat_map(|s| [s.l_sft.to_bits(), s.l_gan.to_bits(), s.loss.to_bits()]))
            .chain(o.matrix.rows.iter().flatten().map(|v| v.to_bits()))
            .collect()
    };
    let reproducible = bits(&a) == bits(&b) && bits(&a) == bits(&c) && a.state.model.parameter_hashes() == b.state.model.parameter_hashes();

    let dir = tempfile::tempdir().expect("temporary directory");
    let path = dir.path().join("final.ckpt");
    save_checkpoint(&a.state, &RunConfig { train: train.clone(), ..run.clone() }, Some(&p.vocab), &path)?;
    let from_file = load_checkpoint(&path)?.into_state()?;
    let from_bytes = Checkpoint::from_bytes(&Checkpoint::from_state(&a.state, &run, None).to_bytes(Dtype::F64))?.into_state()?;
    let mut exact = true;
    for t in &p.tasks {
        let before = evaluate(&a.state.model, t)?.to_bits();
        exact &= evaluate(&from_file.model, t)?.to_bits() == before;
        exact &= evaluate(&from_bytes.model, t)?.to_bits() == before;
    }
    let steps: usize = a.logs.iter().map(|l| l.steps.len()).sum();
    outcome(
        reproducible && exact,
        format!("{steps}-step trajectories and matrices bit-identical across reruns and schedules: {reproducible}; checkpoint evaluate bit-exact: {exact}"),
    )
}

fn protocol_fidelity() -> Result<Outcome> {
    let runs: Vec<_> = forgetting_grid()
        .iter()
        .filter(|r| r.method == Method::MoeCl && r.seed == 0)
        .map(|r| r.summary.clone())
        .collect();
    let report = build_report(&runs)?;
    let m = &report.methods[0];

    // Independent recomputation straight from the matrices.
    let mut acc = Vec::new();
    let mut bwt = Vec::new();
    let mut fwt = Vec::new();
    for r in &runs {
        let (order, rows, n) = (&r.matrix.order, &r.matrix.rows, r.matrix.order.len());
        let last = &rows[n - 1];
        let mut a = 0.0;
        for v in last {
            a += v;
        }
        acc.push(a / n as f64);
        let mut b = 0.0;
        let mut f = 0.0;
        for j in 0..n - 1 {
            b += last[order[j]] - rows[j][order[j]];
            f += rows[j][order[j + 1]] - r.chance[order[j + 1]];
        }
        bwt.push(b / (n - 1) as f64);
        fwt.push(f / (n - 1) as f64);
    }
    let pop = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let mut worst = 0.0f64;
    for (got, want) in [(m.acc, pop(&acc)), (m.bwt, pop(&bwt)), (m.fwt, pop(&fwt))] {
        worst = worst.max((got.mean - want.0).abs()).max((got.std - want.1).abs());
    }
    let text = report.to_text();
    let avg_rows = text.lines().filter(|l| l.contains("Avg") && l.contains('±')).count();
    outcome(
        worst <= 1e-12 && avg_rows == 1 && m.orders.len() == 3,
        format!(
            "Acc {:.4} ± {:.4}, BwT {:.4} ± {:.4}, FwT {:.4} ± {:.4}; max deviation from recomputation {worst:.1e}",
            m.acc.mean, m.acc.std, m.bwt.mean, m.bwt.std, m.fwt.mean, m.fwt.std
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("neutrality", neutrality),
        ("freezing", freezing),
        ("gate normalization", gate_normalization),
        ("metric oracles", metric_oracles),
        ("adversarial effect", adversarial_effect),
        ("forgetting ordering", forgetting_ordering),
        ("determinism and persistence", determinism),
        ("protocol fidelity", protocol_fidelity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        if !pass {
            failed += 1;
        }
        println!("{} criterion {} ({name}): {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
