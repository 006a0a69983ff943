//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any hard criterion fails; the convergence criterion is soft and only
//! reported.
//!
//! Criteria run one after another (never concurrently) so their wall-clock
//! budgets are measured on an otherwise idle process. Set
//! `GNCDE_ACCEPTANCE_QUICK=1` to skip the half-hour training grid; skipped
//! criteria print `SKIP`, never `PASS`.

use std::time::{Duration, Instant};

use gncde_autodiff::{grad_check, Tape, Tensor, TensorFile};
use gncde_core::advection::{advect_step, init_edge_state, series_rng, EdgeState, SimulationConfig};
use gncde_core::dataset::{Dataset, ForecastSample};
use gncde_core::grid::{
    run_grid_seeds, Execution, ExperimentResult, ModelSize, Variant, INFORMED_BOTH, STANDARD_VARIANTS,
};
use gncde_core::model::{
    count_params, informed_contraction, param_layout, Gncde, InnerMechanism, ModelConfig, OuterMechanism, Params,
};
use gncde_core::topology::{GraphSpec, Network, VertexAdjacency};
use gncde_core::train::{observation_scale, train, MetricRecord, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and budgets.
const MASS_DRIFT_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
/// Largest finite difference, in rounding steps of the loss, accepted where
/// the analytic gradient is exactly zero.
const ZERO_GRAD_FD_STEPS: f64 = 8.0;
const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_SERIES: usize = 500;
const TREND_EPOCHS: usize = 30;
const TREND_STATE_DIM: usize = 16;
/// Hidden width of the vector-field networks for the trend grid; the one
/// size not fixed by the criterion, chosen to fit the time budget.
const TREND_WIDTH: usize = 8;
const INFORMED_OUTER_WINS_NEEDED: usize = 4;
const AGC_INFORMED_WINS_NEEDED: usize = 3;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    SoftFail,
    Skip,
}

struct Report {
    lines: Vec<(usize, Status)>,
}

impl Report {
    fn run(&mut self, id: usize, title: &str, budget: Duration, soft: bool, check: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!(
                "{detail}; took {:.1} s, over the {:.0} s budget",
                elapsed.as_secs_f64(),
                budget.as_secs_f64()
            )),
            other => other,
        };
        let (status, tag, detail) = match outcome {
            Ok(d) => (Status::Pass, "PASS", d),
            Err(d) if soft => (Status::SoftFail, "FAIL (soft, not blocking)", d),
            Err(d) => (Status::Fail, "FAIL", d),
        };
        println!(
            "[{tag}] {id}. {title}: {detail} ({:.2} s, budget {:.0} s)",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        );
        self.lines.push((id, status));
    }

    fn skip(&mut self, id: usize, title: &str, why: &str) {
        println!("[SKIP] {id}. {title}: {why}");
        self.lines.push((id, Status::Skip));
    }
}

// ---------------------------------------------------------------- routing

/// Edges `(tail, head, weight)` enumerated row by row of the adjacency.
fn oracle_edges(adj: &VertexAdjacency) -> Vec<(usize, usize, f64)> {
    let n = adj.n_vertices();
    let mut out = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if adj.weight(u, v) > 0.0 {
                out.push((u, v, adj.weight(u, v)));
            }
        }
    }
    out
}

/// Mass leaving edge `j` at its head enters edge `i` when `i` starts where
/// `j` ends, scaled by the split weight of `i`.
fn oracle_routing(edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    edges
        .iter()
        .map(|&(tail_i, _, p_i)| {
            edges
                .iter()
                .map(|&(_, head_j, _)| if head_j == tail_i { p_i } else { 0.0 })
                .collect()
        })
        .collect()
}

fn routing() -> Check {
    for (name, adj) in [
        ("4-node", VertexAdjacency::four_node()),
        ("10-node", VertexAdjacency::ten_node()),
    ] {
        let net = Network::from_adjacency(adj.clone(), 100).map_err(err)?;
        let edges = oracle_edges(&adj);
        let got: Vec<(usize, usize)> = net.edges().edges().iter().map(|e| (e.tail, e.head)).collect();
        let want: Vec<(usize, usize)> = edges.iter().map(|&(t, h, _)| (t, h)).collect();
        ensure(got == want, || format!("{name}: edge order {got:?}, expected {want:?}"))?;
        let a = net.transition().matrix().to_rows();
        ensure(a == oracle_routing(&edges), || {
            format!("{name}: A_E differs from the routing oracle")
        })?;
    }
    let four: Vec<(usize, usize)> = oracle_edges(&VertexAdjacency::four_node())
        .iter()
        .map(|&(t, h, _)| (t, h))
        .collect();
    ensure(four == [(0, 1), (1, 2), (1, 3), (2, 3), (3, 0)], || {
        format!("4-node edges {four:?}")
    })?;
    Ok("A_E equals the oracle exactly for both graphs; 4-node graph has edges 1->2, 2->3, 2->4, 3->4, 4->1".into())
}

// -------------------------------------------------------------- transport

fn trajectory(net: &Network, init: EdgeState, sigma: usize, steps: usize) -> Result<Vec<EdgeState>, String> {
    let mut states = vec![init];
    for _ in 0..steps {
        let (next, _) = advect_step(states.last().unwrap(), net, sigma).map_err(err)?;
        states.push(next);
    }
    Ok(states)
}

fn conservation() -> Check {
    let cfg = SimulationConfig::default();
    let closed = Network::from_adjacency(VertexAdjacency::four_node(), cfg.segments_per_edge).map_err(err)?;
    let mut worst: f64 = 0.0;
    for index in 0..20 {
        let init = init_edge_state(closed.edges(), &cfg, &mut series_rng(1, index)).map_err(err)?;
        let m0 = init.total_mass();
        for s in trajectory(&closed, init, cfg.shift_per_step, cfg.n_steps)? {
            worst = worst.max((s.total_mass() - m0).abs() / m0);
        }
    }
    ensure(worst < MASS_DRIFT_TOL, || format!("4-node relative drift {worst:e}"))?;

    let path = Network::from_adjacency(VertexAdjacency::ten_node(), cfg.segments_per_edge).map_err(err)?;
    for index in 0..20 {
        let init = init_edge_state(path.edges(), &cfg, &mut series_rng(2, index)).map_err(err)?;
        let masses: Vec<f64> = trajectory(&path, init, cfg.shift_per_step, cfg.n_steps)?
            .iter()
            .map(EdgeState::total_mass)
            .collect();
        if let Some(t) = masses.windows(2).position(|w| w[1] > w[0]) {
            return Err(format!("10-node series {index}: mass rose at step {}", t + 1));
        }
    }
    Ok(format!(
        "max 4-node drift {worst:.1e} over {} steps (< {MASS_DRIFT_TOL:e}); 10-node mass non-increasing",
        cfg.n_steps
    ))
}

fn analytic_shift() -> Check {
    let cfg = SimulationConfig::default();
    let mut checked = 0usize;
    for adj in [VertexAdjacency::four_node(), VertexAdjacency::ten_node()] {
        let net = Network::from_adjacency(adj, cfg.segments_per_edge).map_err(err)?;
        for index in 0..5 {
            let init = init_edge_state(net.edges(), &cfg, &mut series_rng(3, index)).map_err(err)?;
            let steps = cfg.segments_per_edge / cfg.shift_per_step;
            let states = trajectory(&net, init.clone(), cfg.shift_per_step, steps)?;
            for (t, s) in states.iter().enumerate() {
                let offset = t * cfg.shift_per_step;
                for e in 0..net.n_edges() {
                    let (now, then) = (s.edge(e), init.edge(e));
                    for j in offset..now.len() {
                        if now[j].to_bits() != then[j - offset].to_bits() {
                            return Err(format!(
                                "step {t}, edge {e}, segment {j}: {} vs {}",
                                now[j],
                                then[j - offset]
                            ));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "{checked} interior segments equal the shifted initial condition bitwise"
    ))
}

// ------------------------------------------------------------------ model

fn small_model(adj: &VertexAdjacency, variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::for_graph(adj, variant.inner, variant.outer);
    cfg.d_h = 4;
    cfg.d_z = 4;
    cfg.hidden_width = 8;
    cfg.agc_embed_dim = 3;
    cfg.substeps = 2;
    cfg
}

fn windows(graph: &GraphSpec, n: usize, seed: u64) -> Result<Dataset, String> {
    let sim = SimulationConfig {
        seed,
        ..SimulationConfig::default()
    };
    Dataset::generate(graph, &sim, n).map_err(err)
}

fn gradient_fidelity() -> Check {
    let adj = VertexAdjacency::four_node();
    let data = windows(&GraphSpec::from_adjacency(&adj), 2, 4)?;
    let samples: Vec<&ForecastSample> = data.samples.iter().collect();
    let mut variants = STANDARD_VARIANTS.to_vec();
    variants.push(INFORMED_BOTH);
    let (mut worst_nonzero, mut worst_literal, mut worst_zero_steps) = (0.0f64, 0.0f64, 0.0f64);
    let (mut coords, mut zeros) = (0usize, 0usize);
    for variant in variants {
        let mut cfg = small_model(&adj, variant);
        cfg.obs_scale = observation_scale(&samples);
        let model = Gncde::new(cfg).map_err(err)?;
        let params = model.init_params(17);
        let report = grad_check(
            |tape, vars| {
                Ok(model
                    .forward_loss(tape, vars, &samples)
                    .map_err(|e| match e {
                        gncde_core::CoreError::Autodiff(a) => a,
                        other => gncde_autodiff::AutodiffError::Shape(other.to_string()),
                    })?
                    .1)
            },
            params.tensors(),
            FD_EPS,
        )
        .map_err(err)?;
        if report.max_rel_error_nonzero >= GRAD_REL_TOL {
            return Err(format!(
                "{variant}: max relative error {:.2e} on nonzero gradients",
                report.max_rel_error_nonzero
            ));
        }
        // an exactly zero gradient (a balanced sum of MAE signs) can only be
        // compared with the difference quotient's own rounding resolution
        let steps = report.max_abs_numeric_at_zero / report.fd_resolution();
        if steps > ZERO_GRAD_FD_STEPS {
            return Err(format!(
                "{variant}: zero analytic gradient but |finite difference| = {:.2e} ({steps:.1} rounding steps)",
                report.max_abs_numeric_at_zero
            ));
        }
        worst_nonzero = worst_nonzero.max(report.max_rel_error_nonzero);
        worst_literal = worst_literal.max(report.max_rel_error);
        worst_zero_steps = worst_zero_steps.max(steps);
        coords += report.n_coordinates;
        zeros += report.n_zero_analytic;
    }
    Ok(format!(
        "max relative error {worst_nonzero:.2e} (< {GRAD_REL_TOL:e}, eps {FD_EPS:e}) over {} coordinates with \
         nonzero gradient in 6 variants; {zeros} coordinates with exactly zero gradient have finite differences \
         within {worst_zero_steps:.1} rounding steps (relative error including them: {worst_literal:.1e})",
        coords - zeros
    ))
}

fn eye(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect()
}

fn mechanism_collapse() -> Check {
    let plain_v = Variant::new(InnerMechanism::Identity, OuterMechanism::Identity);
    let mut compared = 0usize;
    for adj in [VertexAdjacency::four_node(), VertexAdjacency::ten_node()] {
        let n = adj.n_vertices();
        let data = windows(&GraphSpec::from_adjacency(&adj), 4, 6)?;
        let plain = Gncde::new(small_model(&adj, plain_v)).map_err(err)?;
        let params = plain.init_params(23);
        for (inner, outer) in [
            (InnerMechanism::Informed, OuterMechanism::Identity),
            (InnerMechanism::Identity, OuterMechanism::Informed),
        ] {
            let mut cfg = small_model(&adj, Variant::new(inner, outer));
            cfg.a_inner = cfg.a_inner.as_ref().map(|_| eye(n));
            cfg.a_outer = cfg.a_outer.as_ref().map(|_| eye(n));
            let informed = Gncde::new(cfg).map_err(err)?;
            let same = Params::from_tensors(informed.config(), params.tensors().to_vec()).map_err(err)?;
            for s in &data.samples {
                let a = plain.predict(&params, &s.input).map_err(err)?;
                let b = informed.predict(&same, &s.input).map_err(err)?;
                ensure(a.bitwise_eq(&b), || {
                    format!("{n}-node {inner}/{outer} prediction differs")
                })?;
                compared += 1;
            }
        }
    }

    // the informed contraction with A = I against the plain per-vertex sum
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, v, dz, dh) = (3, 5, 4, 6);
    let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let g = rand_t(&[b, v, dz, dh], &mut rng);
    let dhv = rand_t(&[b, v, dh], &mut rng);
    let mut tape = Tape::new();
    let (gv, hv) = (tape.constant(g.clone()), tape.constant(dhv.clone()));
    let a = tape.constant(Tensor::eye(v));
    let with_eye = informed_contraction(&mut tape, gv, Some(a), hv).map_err(err)?;
    let without = informed_contraction(&mut tape, gv, None, hv).map_err(err)?;
    ensure(tape.value(with_eye).bitwise_eq(tape.value(without)), || {
        "contraction with A = I differs".into()
    })?;
    for bi in 0..b {
        for k in 0..v {
            for z in 0..dz {
                let want: f64 = (0..dh).map(|h| g.at(&[bi, k, z, h]) * dhv.at(&[bi, k, h])).sum();
                let got = tape.value(with_eye).at(&[bi, k, z]);
                ensure((got - want).abs() <= 1e-12, || {
                    format!("contraction entry {bi},{k},{z}: {got} vs {want}")
                })?;
            }
        }
    }
    Ok(format!(
        "{compared} predictions bitwise equal at inner and outer positions; A = I contraction equals the plain sum"
    ))
}

/// Trainable scalars written out layer by layer.
fn hand_count(size: &ModelSize, n_vertices: usize, agc: bool) -> usize {
    let (w, dh, dz, layers) = (size.hidden_width, size.d_h, size.d_z, size.n_layers);
    let channels = 2; // time and observation
    let horizon = 24;
    let mlp = |d_in: usize, d_out: usize| {
        let mut total = d_in * w + w;
        for _ in 0..layers - 2 {
            total += w * w + w;
        }
        total + w * d_out + d_out
    };
    let init = channels * dh + dh + dh * dz + dz;
    let readout = dz * horizon + horizon;
    init + mlp(dh, dh * channels) + mlp(dz, dz * dh) + readout + if agc { n_vertices * size.agc_embed_dim } else { 0 }
}

fn parameter_counts() -> Check {
    let size = ModelSize {
        d_h: TREND_STATE_DIM,
        d_z: TREND_STATE_DIM,
        hidden_width: TREND_WIDTH,
        ..ModelSize::default()
    };
    let mut variants = STANDARD_VARIANTS.to_vec();
    variants.push(INFORMED_BOTH);
    let mut agc_counts = Vec::new();
    let mut summary = Vec::new();
    for adj in [VertexAdjacency::four_node(), VertexAdjacency::ten_node()] {
        let graph = GraphSpec::from_adjacency(&adj);
        let n = adj.n_vertices();
        let mut plain = None;
        let mut agc = None;
        for &v in &variants {
            let cfg = size.model_config(&graph, v).map_err(err)?;
            let formula = count_params(&cfg);
            let enumerated = Params::init(&cfg, 0).numel();
            let from_layout: usize = param_layout(&cfg)
                .iter()
                .map(|p| p.shape.iter().product::<usize>())
                .sum();
            let by_hand = hand_count(&size, n, v.inner == InnerMechanism::Agc);
            ensure(
                formula == enumerated && formula == from_layout && formula == by_hand,
                || {
                    format!("{n}-node {v}: formula {formula}, enumerated {enumerated}, layout {from_layout}, by hand {by_hand}")
                },
            )?;
            let slot = if v.inner == InnerMechanism::Agc {
                &mut agc
            } else {
                &mut plain
            };
            match *slot {
                None => *slot = Some(formula),
                Some(c) => ensure(c == formula, || {
                    format!("{n}-node {v}: {formula} vs {c} in the same family")
                })?,
            }
        }
        let (p, a) = (plain.unwrap(), agc.unwrap());
        ensure(a > p, || format!("{n}-node: AGC {a} not above {p}"))?;
        agc_counts.push(a);
        summary.push(format!("{n}-node identity = informed = {p}, AGC = {a}"));
    }
    let diff = agc_counts[1] - agc_counts[0];
    ensure(diff == 6 * size.agc_embed_dim, || {
        format!("AGC count grows by {diff} from 4 to 10 vertices")
    })?;
    Ok(format!(
        "{}; 10-node minus 4-node AGC = 6*d_e = {diff}",
        summary.join("; ")
    ))
}

// --------------------------------------------------------------- training

fn trend_grid() -> Result<(Vec<ExperimentResult>, f64), String> {
    let graph = GraphSpec::from_adjacency(&VertexAdjacency::ten_node());
    let size = ModelSize {
        d_h: TREND_STATE_DIM,
        d_z: TREND_STATE_DIM,
        hidden_width: TREND_WIDTH,
        ..ModelSize::default()
    };
    let train_cfg = TrainConfig {
        epochs: TREND_EPOCHS,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let variants = [
        Variant::new(InnerMechanism::Identity, OuterMechanism::Identity),
        Variant::new(InnerMechanism::Identity, OuterMechanism::Informed),
        Variant::new(InnerMechanism::Agc, OuterMechanism::Identity),
        Variant::new(InnerMechanism::Agc, OuterMechanism::Informed),
    ];
    let start = Instant::now();
    let results = run_grid_seeds(
        &graph,
        &SimulationConfig::default(),
        TREND_SERIES,
        &size,
        &train_cfg,
        &variants,
        &TREND_SEEDS,
        Execution::Sequential,
        |r| {
            eprintln!(
                "    seed {} inner {} outer {}: test MAE {:.4}, epochs to threshold {}, {:.0} s",
                r.seed, r.inner, r.outer, r.mae, r.epochs_to_threshold, r.wall_time
            );
            Ok(())
        },
    )
    .map_err(err)?;
    Ok((results, start.elapsed().as_secs_f64()))
}

fn mae_of(results: &[ExperimentResult], seed: u64, inner: InnerMechanism, outer: OuterMechanism) -> f64 {
    results
        .iter()
        .find(|r| r.seed == seed && r.inner == inner && r.outer == outer)
        .map(|r| r.mae)
        .expect("every variant ran for every seed")
}

fn trend(results: &[ExperimentResult]) -> Check {
    use InnerMechanism as I;
    use OuterMechanism as O;
    let mut outer_wins = 0;
    let mut agc_wins = 0;
    let mut rows = Vec::new();
    for &seed in &TREND_SEEDS {
        let (ii, iinf) = (
            mae_of(results, seed, I::Identity, O::Identity),
            mae_of(results, seed, I::Identity, O::Informed),
        );
        let (ai, ainf) = (
            mae_of(results, seed, I::Agc, O::Identity),
            mae_of(results, seed, I::Agc, O::Informed),
        );
        outer_wins += usize::from(iinf < ii);
        agc_wins += usize::from(ainf <= ai);
        let verdict = |won: bool| if won { "yes" } else { "no" };
        rows.push(format!(
            "seed {seed}: {iinf:.3} vs {ii:.3} {}, {ainf:.3} vs {ai:.3} {}",
            verdict(iinf < ii),
            verdict(ainf <= ai)
        ));
    }
    let detail = format!(
        "informed outer beat identity in {outer_wins}/5 seeds (need {INFORMED_OUTER_WINS_NEEDED}), \
         AGC+informed <= AGC in {agc_wins}/5 (need {AGC_INFORMED_WINS_NEEDED}) [{}]",
        rows.join(", ")
    );
    if outer_wins >= INFORMED_OUTER_WINS_NEEDED && agc_wins >= AGC_INFORMED_WINS_NEEDED {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn convergence(results: &[ExperimentResult]) -> Check {
    let by_outer = |outer: OuterMechanism| -> Vec<usize> {
        results
            .iter()
            .filter(|r| r.outer == outer)
            .map(|r| r.epochs_to_threshold)
            .collect()
    };
    let informed = median(by_outer(OuterMechanism::Informed));
    let identity = median(by_outer(OuterMechanism::Identity));
    let detail = format!("median epochs to threshold: informed outer {informed}, identity outer {identity}");
    if informed <= identity {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn same_log(a: &[MetricRecord], b: &[MetricRecord]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_values(y))
}

fn determinism() -> Check {
    // datasets
    let g10 = GraphSpec::from_adjacency(&VertexAdjacency::ten_node());
    let bytes = |d: &Dataset| -> Result<Vec<u8>, String> {
        let mut buf = Vec::new();
        d.write_to(&mut buf).map_err(err)?;
        Ok(buf)
    };
    let (a, b, c) = (windows(&g10, 50, 11)?, windows(&g10, 50, 11)?, windows(&g10, 50, 12)?);
    ensure(bytes(&a)? == bytes(&b)?, || {
        "same seed gave different dataset bytes".into()
    })?;
    ensure(bytes(&a)? != bytes(&c)?, || {
        "different seeds gave identical datasets".into()
    })?;

    // training logs and predictions
    let adj = VertexAdjacency::four_node();
    let data = windows(&GraphSpec::from_adjacency(&adj), 40, 13)?;
    let model_cfg = small_model(&adj, Variant::new(InnerMechanism::Agc, OuterMechanism::Informed));
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let run1 = train(model_cfg.clone(), None, &data, cfg.clone()).map_err(err)?;
    let run2 = train(model_cfg.clone(), None, &data, cfg.clone()).map_err(err)?;
    ensure(run1.final_params.bitwise_eq(&run2.final_params), || {
        "repeat run: parameters differ".into()
    })?;
    ensure(same_log(&run1.log, &run2.log), || "repeat run: logs differ".into())?;
    let model = Gncde::new(run1.model.clone()).map_err(err)?;
    for s in &data.samples {
        let p1 = model.predict(&run1.best_params, &s.input).map_err(err)?;
        let p2 = model.predict(&run2.best_params, &s.input).map_err(err)?;
        ensure(p1.bitwise_eq(&p2), || "repeat run: predictions differ".into())?;
    }

    // interrupted and resumed from disk
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("ckpt.bin");
    let mut first = Trainer::new(model_cfg, None, &data, cfg).map_err(err)?;
    first.run_epoch().map_err(err)?;
    first.run_epoch().map_err(err)?;
    first.save_checkpoint(&path).map_err(err)?;
    drop(first);
    let file = TensorFile::load(&path).map_err(err)?;
    let mut again = Vec::new();
    file.write_to(&mut again).map_err(err)?;
    ensure(again == std::fs::read(&path).map_err(err)?, || {
        "checkpoint bytes change on reload".into()
    })?;
    let mut resumed = Trainer::from_checkpoint(file, &data).map_err(err)?;
    resumed.run(|_| Ok(())).map_err(err)?;
    let resumed = resumed.finish().map_err(err)?;
    ensure(resumed.final_params.bitwise_eq(&run1.final_params), || {
        "resume: final parameters differ".into()
    })?;
    ensure(resumed.best_params.bitwise_eq(&run1.best_params), || {
        "resume: best parameters differ".into()
    })?;
    ensure(same_log(&resumed.log, &run1.log), || "resume: logs differ".into())?;
    ensure(resumed.test_mae.to_bits() == run1.test_mae.to_bits(), || {
        format!("resume: test MAE {} vs {}", resumed.test_mae, run1.test_mae)
    })?;
    Ok(format!(
        "datasets, logs ({} records), parameters and {} predictions bitwise identical; resume after 2 of 4 epochs matches",
        run1.log.len(),
        data.len()
    ))
}

fn main() {
    let quick = std::env::var("GNCDE_ACCEPTANCE_QUICK").is_ok_and(|v| !v.is_empty() && v != "0");
    let mut report = Report { lines: Vec::new() };
    let secs = Duration::from_secs;

    report.run(1, "edge-transition routing", secs(1), false, routing);
    report.run(2, "mass conservation", secs(1), false, conservation);
    report.run(3, "exact interior advection", secs(1), false, analytic_shift);
    report.run(4, "gradient fidelity", secs(120), false, gradient_fidelity);
    report.run(
        5,
        "identity mixing collapses to the plain model",
        secs(10),
        false,
        mechanism_collapse,
    );
    report.run(6, "parameter-count structure", secs(1), false, parameter_counts);

    let trend_title = "informedness trend at desk scale";
    let conv_title = "faster convergence with informed outer mixing";
    if quick {
        report.skip(7, trend_title, "GNCDE_ACCEPTANCE_QUICK is set");
        report.skip(8, conv_title, "GNCDE_ACCEPTANCE_QUICK is set");
    } else {
        eprintln!(
            "  running the trend grid: {} seeds x 4 variants, {TREND_SERIES} series, {TREND_EPOCHS} epochs",
            TREND_SEEDS.len()
        );
        match trend_grid() {
            Ok((results, elapsed)) => {
                report.run(7, trend_title, secs(30 * 60), false, || {
                    let detail = trend(&results)?;
                    if elapsed > 30.0 * 60.0 {
                        return Err(format!("{detail}; grid took {elapsed:.0} s, over the 1800 s budget"));
                    }
                    Ok(format!("{detail}; grid took {elapsed:.0} s"))
                });
                report.run(8, conv_title, secs(1), true, || convergence(&results));
            }
            Err(e) => {
                report.run(7, trend_title, secs(30 * 60), false, || {
                    Err(format!("grid failed: {e}"))
                });
                report.run(8, conv_title, secs(1), true, || Err("no grid results".into()));
            }
        }
    }
    report.run(9, "determinism and resume", secs(300), false, determinism);

    let count = |s: Status| report.lines.iter().filter(|(_, st)| *st == s).count();
    let (pass, fail, soft, skip) = (
        count(Status::Pass),
        count(Status::Fail),
        count(Status::SoftFail),
        count(Status::Skip),
    );
    println!("acceptance: {pass} passed, {fail} failed, {soft} soft failures, {skip} skipped");
    if fail > 0 {
        std::process::exit(1);
    }
}
