use serde_json::{json, Value};

use dsg_core::diagnostics::{run_checks, CheckOptions, CheckOutcome};
use dsg_core::gradient::policy_cost;
use dsg_core::riccati::{decoupled_infinite, nash_cost, solve_nash, with_population};
use dsg_core::sim::{empirical_cost, rollout, Detail, RolloutConfig};
use dsg_core::train::train_model_based;
use dsg_core::zeroth::{train_model_free, ModelFreeOptions, SmoothingConfig};
use dsg_core::{
    GameConfig, GameSpec, LiftedModel, NashSolution, Policy, Population, SolverOptions, StepSize, TerminalStatus,
    TrainLog, TrainOptions,
};

use crate::output::{num, policy_cells, policy_header, Sink, Table};
use crate::{CheckArgs, Cli, Command, Failure, Global, SimArgs, SmoothingArgs, SolveArgs, SweepArgs, Task, TrainArgs};

struct Ctx<'a> {
    global: &'a Global,
    source: String,
    cfg: GameConfig,
    sink: Sink,
}

impl Ctx<'_> {
    fn lifted(&self) -> Result<LiftedModel, Failure> {
        lift_checked(&self.cfg.game)
    }

    fn finish(&self, task: Task, params: Value, result: Value) -> Result<(), Failure> {
        let meta = json!({
            "task": clap::ValueEnum::to_possible_value(&task).map(|v| v.get_name().to_string()),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.global.seed,
            "source": self.source,
            "params": params,
            "config": self.cfg.to_toml_string(),
        });
        self.sink.json("run", &meta)?;
        if self.global.emit_json {
            self.sink.json("result", &result)?;
            println!("{}", serde_json::to_string_pretty(&result).unwrap_or_default());
        }
        Ok(())
    }
}

fn lift_checked(spec: &GameSpec) -> Result<LiftedModel, Failure> {
    let report = spec.validate()?;
    for w in report.warnings() {
        eprintln!("warning: assumption \"{}\" not met: {}", w.name, w.detail);
    }
    Ok(spec.lift()?)
}

fn load(global: &Global) -> Result<(String, GameConfig), Failure> {
    match (&global.config, &global.preset) {
        (Some(path), _) => Ok((path.display().to_string(), GameConfig::load(path)?)),
        (None, Some(name)) => Ok((name.clone(), GameConfig::preset(name)?)),
        (None, None) => Err(Failure::Config("one of --config or --preset is required".into())),
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let (source, cfg) = load(&cli.global)?;
    let ctx = Ctx {
        global: &cli.global,
        source,
        cfg,
        sink: Sink::new(&cli.global.out, cli.global.svg)?,
    };
    match &cli.command {
        Command::Solve(a) => solve(&ctx, a),
        Command::TrainMb(a) => train_mb(&ctx, a),
        Command::TrainMf { train, smoothing } => train_mf(&ctx, train, smoothing),
        Command::Simulate(a) => simulate(&ctx, a),
        Command::SweepN(a) => sweep_n(&ctx, a),
        Command::Check(a) => check(&ctx, a),
        Command::Run(r) => match r.task {
            Task::Solve => solve(&ctx, &r.solve),
            Task::TrainMb => train_mb(&ctx, &r.train),
            Task::TrainMf => train_mf(&ctx, &r.train, &r.smoothing),
            Task::Simulate => simulate(&ctx, &r.sim),
            Task::SweepN => sweep_n(&ctx, &r.sweep),
            Task::Check => check(&ctx, &r.check),
        },
    }
}

fn policy_json(p: &Policy) -> Value {
    json!({ "theta": dsg_core::linalg::to_rows(&p.theta), "theta_bar": dsg_core::linalg::to_rows(&p.theta_bar) })
}

fn solution_json(sol: &NashSolution, m: &LiftedModel) -> Value {
    json!({
        "n": m.population().to_string(),
        "policy": policy_json(&sol.policy),
        "cost": nash_cost(sol, m),
        "iterations": sol.iterations,
        "residual": sol.residual,
        "cond_f": sol.cond_f,
        "cond_f_bar": sol.cond_f_bar,
        "weighted_f_min_eigenvalue": sol.weighted_f_min_eigenvalue,
    })
}

fn solve(ctx: &Ctx, a: &SolveArgs) -> Result<(), Failure> {
    let spec = match a.n {
        Some(n) => ctx.cfg.game.with_population(n),
        None => ctx.cfg.game.clone(),
    };
    let m = lift_checked(&spec)?;
    let opts = SolverOptions {
        tol: a.solver_tol,
        ..SolverOptions::default()
    };
    let sol = solve_nash(&m, &opts)?;
    let cost = nash_cost(&sol, &m);

    let mut header: Vec<String> = ["n", "cost", "iterations", "residual", "cond_f", "cond_f_bar", "weighted_f_min_eigenvalue"]
        .map(String::from)
        .to_vec();
    header.extend(policy_header("", &sol.policy));
    let mut t = Table::new(header);
    let mut row = vec![
        m.population().to_string(),
        num(cost),
        sol.iterations.to_string(),
        num(sol.residual),
        num(sol.cond_f),
        num(sol.cond_f_bar),
        num(sol.weighted_f_min_eigenvalue),
    ];
    row.extend(policy_cells(&sol.policy));
    t.push(row);
    ctx.sink.table("nash", &t)?;

    say!("n = {}: Nash strategy after {} iterations (residual {:e})", m.population(), sol.iterations, sol.residual);
    say!("  theta     = {:?}", sol.policy.theta.as_slice());
    say!("  theta_bar = {:?}", sol.policy.theta_bar.as_slice());
    say!("  J*        = {cost}");
    if !sol.weighted_f_positive_definite() {
        eprintln!("warning: weighted F is not positive definite; the Nash strategy may not be unique");
    }
    ctx.finish(Task::Solve, json!({ "n": a.n.map(|n| n.to_string()), "solver_tol": a.solver_tol }), solution_json(&sol, &m))
}

/// Nash reference for training curves; training proceeds without one if the solve fails.
fn reference(m: &LiftedModel) -> Option<(Policy, f64)> {
    match solve_nash(m, &SolverOptions::default()) {
        Ok(sol) => {
            let j = nash_cost(&sol, m);
            Some((sol.policy, j))
        }
        Err(e) => {
            eprintln!("warning: no Nash reference ({e})");
            None
        }
    }
}

fn write_training(ctx: &Ctx, log: &TrainLog, nash: Option<&(Policy, f64)>, model_free: bool) -> Result<(), Failure> {
    let first = &log.final_policy;
    let j_star = nash.map_or(f64::NAN, |n| n.1);
    let mut header: Vec<String> = ["k", "cost", "gap", "grad_norm", "rho", "step"].map(String::from).to_vec();
    if model_free {
        header.extend(["empirical_cost", "rejected"].map(String::from));
    }
    header.extend(policy_header("", first));
    let mut t = Table::new(header);

    let mut cost_plot = Table::new(["k", "abs_gap"]);
    let mut policy_plot_header = policy_header("", first);
    policy_plot_header.insert(0, "k".into());
    if nash.is_some() {
        policy_plot_header.extend(policy_header("nash_", first));
    }
    let mut policy_plot = Table::new(policy_plot_header);

    for r in &log.records {
        let mut row = vec![
            r.k.to_string(),
            num(r.cost),
            num(r.cost - j_star),
            num(r.grad_norm),
            num(r.rho),
            num(r.step),
        ];
        if model_free {
            row.push(r.empirical_cost.map_or_else(|| "NaN".into(), num));
            row.push(r.rejected.map_or_else(String::new, |v| v.to_string()));
        }
        row.extend(policy_cells(&r.policy));
        t.push(row);
        cost_plot.push(vec![r.k.to_string(), num((r.cost - j_star).abs())]);
        let mut prow = vec![r.k.to_string()];
        prow.extend(policy_cells(&r.policy));
        if let Some((p, _)) = nash {
            prow.extend(policy_cells(p));
        }
        policy_plot.push(prow);
    }
    ctx.sink.table("train", &t)?;
    if nash.is_some() {
        ctx.sink.plot("plot_cost", "|J(theta_k) - J*| vs iteration", &cost_plot)?;
    }
    ctx.sink.plot("plot_policy", "gains vs iteration", &policy_plot)
}

fn training_json(log: &TrainLog, nash: Option<&(Policy, f64)>) -> Value {
    let last = log.records.last();
    json!({
        "terminal_status": log.terminal_status,
        "iterations": last.map(|r| r.k),
        "final_cost": last.map(|r| r.cost),
        "final_policy": policy_json(&log.final_policy),
        "nash_cost": nash.map(|n| n.1),
        "nash_policy": nash.map(|n| policy_json(&n.0)),
        "first_within_1e-6": nash.and_then(|n| log.first_within(n.1, 1e-6)),
    })
}

fn report_training(log: &TrainLog, nash: Option<&(Policy, f64)>) -> Result<(), Failure> {
    let last = log.records.last().expect("training logs at least one record");
    say!("{:?} after {} iterations; J = {}", log.terminal_status, last.k, last.cost);
    say!("  theta     = {:?}", log.final_policy.theta.as_slice());
    say!("  theta_bar = {:?}", log.final_policy.theta_bar.as_slice());
    if let Some((p, j)) = nash {
        say!("  |J - J*| = {:e}, |theta - theta*| = {:e}", (last.cost - j).abs(), log.final_policy.sub(p).norm());
        if let Some(k) = log.first_within(*j, 1e-6) {
            say!("  first within 1e-6 of J*: iteration {k}");
        }
    }
    if let TerminalStatus::Destabilized { iteration } = log.terminal_status {
        return Err(Failure::Numerical(format!("destabilized at iteration {iteration}")));
    }
    Ok(())
}

fn train_mb(ctx: &Ctx, a: &TrainArgs) -> Result<(), Failure> {
    let m = ctx.lifted()?;
    let exp = &ctx.cfg.experiment;
    let init = ctx.cfg.initial_policy()?;
    let step = a.eta.or(exp.eta.map(StepSize::Fixed)).unwrap_or(StepSize::Auto { initial: 1.0 });
    let nash = reference(&m);
    let opts = TrainOptions {
        method: a.method,
        step,
        max_iter: a.iterations.or(exp.iterations).unwrap_or(10_000),
        stop_tol: a.tol,
        nash_cost: nash.as_ref().map(|n| n.1),
    };
    let log = train_model_based(&m, &init, &opts)?;
    write_training(ctx, &log, nash.as_ref(), false)?;
    ctx.finish(Task::TrainMb, serde_json::to_value(&opts).unwrap_or(Value::Null), training_json(&log, nash.as_ref()))?;
    report_training(&log, nash.as_ref())
}

fn train_mf(ctx: &Ctx, a: &TrainArgs, s: &SmoothingArgs) -> Result<(), Failure> {
    let m = ctx.lifted()?;
    let exp = &ctx.cfg.experiment;
    let eta = match a.eta.or(exp.eta.map(StepSize::Fixed)) {
        Some(StepSize::Fixed(v)) => v,
        None => 0.04,
        Some(StepSize::Auto { .. }) => {
            return Err(Failure::Config("model-free training needs a fixed --eta".into()));
        }
    };
    let mut smoothing = SmoothingConfig::new(
        s.radius.or(exp.radius).unwrap_or(0.09),
        s.samples.or(exp.samples).unwrap_or(200),
        s.horizon.or(exp.horizon).unwrap_or(50),
    );
    smoothing.rollouts_per_perturbation = s.rollouts_per_perturbation;
    let opts = ModelFreeOptions {
        method: a.method,
        eta,
        iterations: a.iterations.or(exp.iterations).unwrap_or(500),
        smoothing,
        seed: ctx.global.seed,
        random_learner: s.random_learner,
        baseline_rollouts: s.baseline_rollouts,
    };
    let init = ctx.cfg.initial_policy()?;
    let nash = reference(&m);
    let log = train_model_free(&ctx.cfg.game, &init, &opts, Some(&m))?;
    write_training(ctx, &log, nash.as_ref(), true)?;
    ctx.finish(Task::TrainMf, serde_json::to_value(&opts).unwrap_or(Value::Null), training_json(&log, nash.as_ref()))?;
    report_training(&log, nash.as_ref())
}

fn parse_gain(entries: &[f64], d_u: usize, d_x: usize, name: &str) -> Result<nalgebra::DMatrix<f64>, Failure> {
    if entries.len() != d_u * d_x {
        return Err(Failure::Config(format!("--{name} needs {} entries, got {}", d_u * d_x, entries.len())));
    }
    Ok(nalgebra::DMatrix::from_row_slice(d_u, d_x, entries))
}

fn simulate(ctx: &Ctx, a: &SimArgs) -> Result<(), Failure> {
    let spec = &ctx.cfg.game;
    let m = ctx.lifted()?;
    let n = spec.n.finite().ok_or_else(|| Failure::Config("simulation needs a finite population".into()))?;
    if a.learner == 0 || a.learner > n {
        return Err(Failure::Config(format!("--learner must be in 1..={n}")));
    }
    let policy = match (&a.theta, &a.theta_bar) {
        (None, None) => solve_nash(&m, &SolverOptions::default())?.policy,
        (Some(t), Some(tb)) => Policy::new(
            parse_gain(t, spec.d_u, spec.d_x, "theta")?,
            parse_gain(tb, spec.d_u, spec.d_x, "theta-bar")?,
        ),
        _ => return Err(Failure::Config("give both --theta and --theta-bar, or neither".into())),
    };
    let cfg = RolloutConfig {
        learner: a.learner - 1,
        detail: if a.trace { Detail::Full } else { Detail::Summary },
        ..RolloutConfig::new(a.horizon, a.rollouts, ctx.global.seed)
    };
    let traces = rollout(spec, &policy, &policy, &cfg)?;
    let est = empirical_cost(&traces)?;
    let formula = policy_cost(&policy, &m).ok();

    let mut per = Table::new(["rollout", "discounted_cost", "overflowed"]);
    for (i, tr) in traces.iter().enumerate() {
        per.push(vec![i.to_string(), num(tr.discounted_cost), tr.overflowed.to_string()]);
    }
    ctx.sink.table("rollouts", &per)?;

    let mut summary = Table::new(["quantity", "value"]);
    summary.push(vec!["empirical_cost".into(), num(est.mean)]);
    summary.push(vec!["std_error".into(), num(est.std_error)]);
    summary.push(vec!["count".into(), est.count.to_string()]);
    if let Some(j) = formula {
        summary.push(vec!["formula_cost".into(), num(j)]);
        summary.push(vec!["relative_deviation".into(), num((est.mean - j) / j)]);
    }
    ctx.sink.table("summary", &summary)?;

    let mut per_step = Table::new(["t", "mean_cost"]);
    let ok: Vec<_> = traces.iter().filter(|t| !t.overflowed).collect();
    for t in 0..a.horizon {
        let mean = ok.iter().map(|tr| tr.per_step_costs[t]).sum::<f64>() / ok.len() as f64;
        per_step.push(vec![(t + 1).to_string(), num(mean)]);
    }
    ctx.sink.plot("plot_cost", "mean per-step cost vs t", &per_step)?;

    if a.trace {
        let (dx, du) = (spec.d_x, spec.d_u);
        let mut header = vec!["rollout".to_string(), "t".to_string()];
        for (block, d) in [("x_delta", dx), ("x_mean", dx), ("u_delta", du), ("u_mean", du)] {
            header.extend((1..=d).map(|i| format!("{block}_{i}")));
        }
        header.push("cost".into());
        let mut trace = Table::new(header);
        for (i, tr) in traces.iter().enumerate() {
            for (t, (x, u)) in tr.lifted_states.iter().zip(&tr.lifted_actions).enumerate() {
                let mut row = vec![i.to_string(), (t + 1).to_string()];
                for v in [&x.delta, &x.mean, &u.delta, &u.mean] {
                    row.extend(v.iter().copied().map(num));
                }
                row.push(num(tr.per_step_costs[t]));
                trace.push(row);
            }
        }
        ctx.sink.table("trace", &trace)?;
    }

    say!("empirical J = {} ± {} over {} rollouts (T = {})", est.mean, est.std_error, est.count, a.horizon);
    if let Some(j) = formula {
        say!("formula   J = {j}");
    }
    let result = json!({
        "empirical_cost": est.mean,
        "std_error": est.std_error,
        "count": est.count,
        "formula_cost": formula,
        "policy": policy_json(&policy),
    });
    let params = json!({ "rollouts": a.rollouts, "horizon": a.horizon, "learner": a.learner, "trace": a.trace });
    ctx.finish(Task::Simulate, params, result)
}

fn sweep_n(ctx: &Ctx, a: &SweepArgs) -> Result<(), Failure> {
    let m = ctx.lifted()?;
    let ns = a
        .ns
        .clone()
        .or_else(|| ctx.cfg.experiment.ns.clone())
        .unwrap_or_else(|| [2, 5, 10, 20, 100].map(Population::Finite).to_vec());
    let inf = with_population(&m, Population::Infinite)?;
    let limit = match decoupled_infinite(&inf) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("warning: decoupled limit unavailable ({e}); using the coupled solve at n = inf");
            solve_nash(&inf, &SolverOptions::default())?.policy
        }
    };

    let mut header = vec!["n".to_string(), "cost".to_string(), "gap_to_limit".to_string()];
    header.extend(policy_header("", &limit));
    let mut t = Table::new(header);
    let mut plot_header = vec!["n".to_string()];
    plot_header.extend(policy_header("", &limit));
    plot_header.extend(policy_header("limit_", &limit));
    let mut plot = Table::new(plot_header);
    let mut rows = Vec::new();
    for n in ns {
        let mn = with_population(&m, n)?;
        let sol = solve_nash(&mn, &SolverOptions::default())?;
        let gap = sol.policy.sub(&limit).norm();
        let mut row = vec![n.to_string(), num(nash_cost(&sol, &mn)), num(gap)];
        row.extend(policy_cells(&sol.policy));
        t.push(row);
        if n.finite().is_some() {
            let mut prow = vec![n.to_string()];
            prow.extend(policy_cells(&sol.policy));
            prow.extend(policy_cells(&limit));
            plot.push(prow);
        }
        say!("n = {n:>6}: theta = {:?}, theta_bar = {:?}, gap to limit {gap:e}", sol.policy.theta.as_slice(), sol.policy.theta_bar.as_slice());
        rows.push(json!({ "n": n.to_string(), "policy": policy_json(&sol.policy), "gap_to_limit": gap }));
    }
    ctx.sink.table("sweep", &t)?;
    ctx.sink.plot("plot_sweep", "gains vs n", &plot)?;
    say!("limit:      theta = {:?}, theta_bar = {:?}", limit.theta.as_slice(), limit.theta_bar.as_slice());
    let params = json!({ "ns": rows.iter().map(|r| r["n"].clone()).collect::<Vec<_>>() });
    ctx.finish(Task::SweepN, params, json!({ "sweep": rows, "limit": policy_json(&limit) }))
}

fn check(ctx: &Ctx, a: &CheckArgs) -> Result<(), Failure> {
    let m = ctx.lifted()?;
    let opts = CheckOptions {
        seed: ctx.global.seed,
        rollouts: a.check_rollouts,
        corrupt_gradient: a.corrupt_gradient,
        ..CheckOptions::default()
    };
    let results = run_checks(&m, &ctx.cfg.initial_policy()?, &opts)?;
    let mut t = Table::new(["check", "outcome", "detail"]);
    for r in &results {
        let label = match r.outcome {
            CheckOutcome::Pass => "PASS",
            CheckOutcome::Fail => "FAIL",
            CheckOutcome::Inapplicable => "N/A ",
        };
        say!("{label} {}: {}", r.name, r.detail);
        t.push(vec![r.name.to_string(), format!("{:?}", r.outcome).to_lowercase(), r.detail.clone()]);
    }
    ctx.sink.table("checks", &t)?;
    let params = json!({ "rollouts": a.check_rollouts, "corrupt_gradient": a.corrupt_gradient });
    ctx.finish(Task::Check, params, serde_json::to_value(&results).unwrap_or(Value::Null))?;
    let failed = results.iter().filter(|r| r.outcome == CheckOutcome::Fail).count();
    if failed > 0 {
        return Err(Failure::ChecksFailed(failed));
    }
    Ok(())
}
