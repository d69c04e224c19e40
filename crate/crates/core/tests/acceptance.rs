//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::Instant;

use cefi::datakit::format::encode_container;
use cefi::datakit::{Container, Dataset, PartitionScheme};
use cefi::ensemble::{apply, EnsembleRule};
use cefi::evalkit::{
    canonical_schemes, emit_report, evaluate_cell, run_bottleneck_suite, train_cell, verify_epsilon_bound,
    verify_fi_equivalence, BottleneckVariant, ExperimentConfig, ExperimentResult, TheoryCheckConfig,
};
use cefi::federation::{train_ce, Execution, FederationConfig, Network};
use cefi::losses::{consensus_loss, distill_loss, pairwise_consensus_loss, ContrastiveConfig, DistillConfig};
use cefi::model_zoo::{ArchConfig, CELayer, COLayer, DeviceState, HeadSource};
use cefi::nn::{Layer, Mode};
use cefi::numerics::{grad_check_richardson, Matrix, Rng};

const SEEDS: u64 = 5;

/// `(passed, detail)`, or an error that fails the criterion.
type Check = Result<(bool, String), String>;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, run: impl FnOnce() -> Check) -> Verdict {
    let start = Instant::now();
    let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
    let detail = format!("{detail} [{:.1}s]", start.elapsed().as_secs_f64());
    let v = Verdict { name, pass, detail };
    println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    v
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal() as f32).collect()).unwrap()
}

// ---- gradient fidelity ----

fn relu_margin_ce(ce: &CELayer, x: &Matrix) -> f32 {
    let Layer::Residual(res) = &ce.stack.layers()[0] else { unreachable!("CE starts with the residual block") };
    let mut h = x.clone();
    let mut margin = f32::INFINITY;
    for layer in res.branch.layers() {
        match layer {
            Layer::Linear(l) => h = l.predict(&h).unwrap(),
            Layer::Relu(_) => {
                margin = h.data().iter().fold(margin, |m, v| m.min(v.abs()));
                h = h.map(|v| v.max(0.0));
            }
            _ => {}
        }
    }
    margin
}

fn consensus_param_error(ces: &[CELayer], xs: &[Matrix], cfg: &ContrastiveConfig) -> f64 {
    let loss_and_grad = |ces: &mut [CELayer], dev: usize, pi: usize| -> (f64, Matrix) {
        let z: Vec<Matrix> = ces.iter_mut().zip(xs).map(|(c, x)| c.forward(x, Mode::Eval).unwrap()).collect();
        let out = consensus_loss(&z, cfg).unwrap();
        ces[dev].stack.zero_grads();
        ces[dev].stack.backward(&out.grads[dev]).unwrap();
        (out.loss, ces[dev].stack.params()[pi].grad.clone())
    };
    let mut worst = 0.0f64;
    for dev in 0..ces.len() {
        let n_params = ces[dev].clone().stack.params().len();
        for pi in 0..n_params {
            let value = ces[dev].clone().stack.params()[pi].value.clone();
            let report = grad_check_richardson(
                |p| {
                    let mut local = ces.to_vec();
                    *local[dev].stack.params()[pi].value = p.clone();
                    loss_and_grad(&mut local, dev, pi)
                },
                &value,
                1e-2,
            );
            worst = worst.max(report.max_rel_error);
        }
    }
    worst
}

fn distill_param_error(co: &COLayer, z: &Matrix, teacher: &Matrix, cfg: &DistillConfig) -> f64 {
    let mut worst = 0.0f64;
    let n_params = co.clone().stack.params().len();
    for pi in 0..n_params {
        let value = co.clone().stack.params()[pi].value.clone();
        let report = grad_check_richardson(
            |p| {
                let mut c = co.clone();
                *c.stack.params()[pi].value = p.clone();
                let student = c.stack.forward(z, Mode::Eval).unwrap();
                let out = distill_loss(&student, teacher, cfg).unwrap();
                c.stack.zero_grads();
                c.stack.backward(&out.grad).unwrap();
                (out.value, c.stack.params()[pi].grad.clone())
            },
            &value,
            1e-2,
        );
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    // ten random parameter points per loss, each away from ReLU kinks so
    // the ±h stencil stays on one linear piece
    let cfg = ContrastiveConfig::default();
    let (mut cons_worst, mut cons_points) = (0.0f64, 0);
    for point in 0..20_000u64 {
        let mut rng = Rng::new(9000 + point);
        let ces: Vec<CELayer> = (0..3).map(|_| CELayer::with_dims(8, 6, 0.1, &mut rng)).collect();
        let xs: Vec<Matrix> = (0..3).map(|_| random(4, 8, &mut rng)).collect();
        if ces.iter().zip(&xs).any(|(c, x)| relu_margin_ce(c, x) < 0.05) {
            continue;
        }
        cons_worst = cons_worst.max(consensus_param_error(&ces, &xs, &cfg));
        cons_points += 1;
        if cons_points == 10 {
            break;
        }
    }
    let dcfg = DistillConfig::default();
    let (mut dist_worst, mut dist_points) = (0.0f64, 0);
    for point in 0..500u64 {
        let mut rng = Rng::new(7000 + point);
        let co = COLayer::new(6, 8, 4, &mut rng);
        let z = random(5, 6, &mut rng);
        let teacher = random(5, 4, &mut rng).scale(3.0);
        let pre = co.first().predict(&z).unwrap();
        if pre.data().iter().any(|v| v.abs() < 0.05) {
            continue;
        }
        dist_worst = dist_worst.max(distill_param_error(&co, &z, &teacher, &dcfg));
        dist_points += 1;
        if dist_points == 10 {
            break;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = cons_points == 10 && dist_points == 10 && cons_worst < 1e-4 && dist_worst < 1e-4 && seconds < 30.0;
    Ok((
        pass,
        format!(
            "consensus max rel err {cons_worst:.2e} over {cons_points} points, distill {dist_worst:.2e} over {dist_points} points (< 1e-4), {seconds:.1}s (< 30s)"
        ),
    ))
}

// ---- scalar loss oracles ----

fn rows64(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn cos64(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// -log( e^{s(a, b_x)/τ} / Σ_{x' ≠ x} e^{s(a, b_x')/τ} )
fn nt_xent64(a: &[f64], b: &[Vec<f64>], x: usize, tau: f64) -> f64 {
    let pos = cos64(a, &b[x]) / tau;
    let mut den = 0.0;
    for (xp, bx) in b.iter().enumerate() {
        if xp != x {
            den += (cos64(a, bx) / tau).exp();
        }
    }
    den.ln() - pos
}

fn consensus_oracle(emb: &[Matrix], tau: f64) -> f64 {
    let k = emb.len();
    let devices: Vec<Vec<Vec<f64>>> = emb.iter().map(rows64).collect();
    let n = devices[0].len();
    let d = devices[0][0].len();
    let mut centroid = vec![vec![0.0; d]; n];
    for dev in &devices {
        for x in 0..n {
            for j in 0..d {
                centroid[x][j] += dev[x][j] / k as f64;
            }
        }
    }
    let mut total = 0.0;
    for dev in &devices {
        for x in 0..n {
            total += nt_xent64(&dev[x], &centroid, x, tau) + nt_xent64(&centroid[x], dev, x, tau);
        }
    }
    total / (2.0 * n as f64 * k as f64)
}

fn distill_oracle(student: &Matrix, teacher: &Matrix, t: f64) -> f64 {
    let soft = |row: Vec<f64>| -> Vec<f64> {
        let z: f64 = row.iter().map(|v| (v / t).exp()).sum();
        row.iter().map(|v| (v / t).exp() / z).collect()
    };
    let mut total = 0.0;
    for (s, te) in rows64(student).into_iter().zip(rows64(teacher)) {
        let (q, p) = (soft(s), soft(te));
        for c in 0..q.len() {
            total += q[c] * (q[c].ln() - p[c].ln());
        }
    }
    t * t * total
}

fn loss_oracles() -> Check {
    let mut rng = Rng::new(4242);
    let (mut cons_err, mut dist_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let k = 2 + rng.below(3);
        let n = 2 + rng.below(7);
        let d = 2 + rng.below(8);
        let emb: Vec<Matrix> = (0..k).map(|_| random(n, d, &mut rng)).collect();
        let got = consensus_loss(&emb, &ContrastiveConfig::default()).map_err(|e| e.to_string())?.loss;
        cons_err = cons_err.max((got - consensus_oracle(&emb, 0.2)).abs());

        let c = 2 + rng.below(9);
        let s = random(n, c, &mut rng).scale(2.0);
        let t = random(n, c, &mut rng).scale(2.0);
        let got = distill_loss(&s, &t, &DistillConfig::default()).map_err(|e| e.to_string())?.value;
        dist_err = dist_err.max((got - distill_oracle(&s, &t, 3.0)).abs());
    }
    Ok((
        cons_err < 1e-9 && dist_err < 1e-9,
        format!("max |diff| consensus {cons_err:.2e}, distill {dist_err:.2e} over 100 batches each (< 1e-9)"),
    ))
}

// ---- pair counts ----

fn pair_counts() -> Check {
    let mut rng = Rng::new(11);
    let n = 4;
    let mut parts = Vec::new();
    let mut pass = true;
    for k in [2usize, 4, 8, 16] {
        let emb: Vec<Matrix> = (0..k).map(|_| random(n, 5, &mut rng)).collect();
        let c = consensus_loss(&emb, &ContrastiveConfig::default()).map_err(|e| e.to_string())?.pair_terms;
        let p = pairwise_consensus_loss(&emb, &ContrastiveConfig::default()).map_err(|e| e.to_string())?.pair_terms;
        pass &= c == 2 * k * n && p == k * (k - 1) * n;
        parts.push(format!("K={k}: {c} vs {p}"));
    }
    Ok((pass, format!("centroid 2KN vs pairwise K(K-1)N at N={n}: {}", parts.join(", "))))
}

// ---- ensemble invariance ----

fn ensemble_invariance() -> Check {
    // eighth-integer logits and shifts keep every sum exact in f32
    let mut rng = Rng::new(77);
    let eighth = |rng: &mut Rng, span: i64| (rng.below((2 * span * 8 + 1) as usize) as i64 - span * 8) as f32 / 8.0;
    let rules = [
        EnsembleRule::SoftVote,
        EnsembleRule::HardVote,
        EnsembleRule::MaxSoftmax,
        EnsembleRule::MinEntropy,
        EnsembleRule::LogitsAvg,
    ];
    let mut broken = 0;
    let cases = 10_000;
    for _ in 0..cases {
        let k = 2 + rng.below(4);
        let c = 2 + rng.below(9);
        let logits: Vec<Vec<f32>> = (0..k).map(|_| (0..c).map(|_| eighth(&mut rng, 8)).collect()).collect();
        let shifted: Vec<Vec<f32>> = logits
            .iter()
            .map(|row| {
                let s = eighth(&mut rng, 32);
                row.iter().map(|v| v + s).collect()
            })
            .collect();
        let a: Vec<&[f32]> = logits.iter().map(Vec::as_slice).collect();
        let b: Vec<&[f32]> = shifted.iter().map(Vec::as_slice).collect();
        for rule in rules {
            if apply(rule, &a, None).map_err(|e| e.to_string())?.label
                != apply(rule, &b, None).map_err(|e| e.to_string())?.label
            {
                broken += 1;
            }
        }
    }
    // shifting device 0 down flips min_energy's pick from device 0 (class 0) to device 1 (class 1)
    let m = [[2.0f32, 0.0], [0.0, 1.0]];
    let before = apply(EnsembleRule::MinEnergy, &[&m[0], &m[1]], None).map_err(|e| e.to_string())?;
    let after = apply(EnsembleRule::MinEnergy, &[&[-8.0, -10.0], &m[1]], None).map_err(|e| e.to_string())?;
    let counterexample = before.label == 0 && after.label == 1;
    Ok((
        broken == 0 && counterexample,
        format!(
            "{broken} label changes over {cases} shifted cases x 5 rules; min_energy counterexample {} -> {}",
            before.label, after.label
        ),
    ))
}

// ---- desk-scale grid ----

struct Grid {
    results: Vec<ExperimentResult>,
    seconds: f64,
    fi_equivalence: Vec<(EnsembleRule, usize, usize)>,
    epsilon: Vec<cefi::evalkit::EpsilonReport>,
    bottleneck: Vec<cefi::evalkit::BottleneckReport>,
    comm: Option<(u64, u64, u64, Vec<u64>)>,
}

fn base_config() -> ExperimentConfig {
    // the edge-ensemble baseline is not part of any criterion here
    ExperimentConfig { edge_ensemble: false, ..ExperimentConfig::default() }
}

fn run_grid() -> Result<Grid, String> {
    let e = |e: cefi::Error| e.to_string();
    let start = Instant::now();
    let mut grid = Grid {
        results: Vec::new(),
        seconds: 0.0,
        fi_equivalence: Vec::new(),
        epsilon: Vec::new(),
        bottleneck: Vec::new(),
        comm: None,
    };
    let mut extra = 0.0;
    for scheme in canonical_schemes() {
        for seed in 0..SEEDS {
            let cfg = base_config().with_scheme(scheme).with_seed(seed);
            let mut cell = train_cell(&cfg).map_err(e)?;
            let result = evaluate_cell(&mut cell, &EnsembleRule::PRACTICAL).map_err(e)?;
            eprintln!(
                "  {} seed {seed}: solo {:.3}, min_energy {:.3}, oracle {:.3} ({:.0}s)",
                scheme.name(),
                result.mean_solo(),
                result.rule(EnsembleRule::MinEnergy).map_or(f64::NAN, |r| r.mean()),
                result.oracle.iter().sum::<f64>() / result.oracle.len() as f64,
                start.elapsed().as_secs_f64()
            );
            let checks = Instant::now();
            if grid.comm.is_none() {
                grid.comm = Some((
                    result.comm.inference_bytes_per_sample,
                    result.comm.ce_bytes_per_epoch,
                    cell.data.split.shared.len() as u64,
                    cell.network.meter.ce_per_epoch.clone(),
                ));
                let rules = [
                    EnsembleRule::SoftVote,
                    EnsembleRule::HardVote,
                    EnsembleRule::MaxSoftmax,
                    EnsembleRule::MinEntropy,
                ];
                for r in verify_fi_equivalence(&cell.devices, &cell.data.test, &rules, 5.0, 0xF1).map_err(e)? {
                    grid.fi_equivalence.push((r.rule, r.matches, r.total));
                }
            }
            for d in &cell.devices {
                if grid.epsilon.len() == 10 {
                    break;
                }
                let z = d.embed(&d.features(cell.data.test.as_batch()).map_err(e)?).map_err(e)?;
                let seed = 0xE5 + grid.epsilon.len() as u64;
                grid.epsilon.push(verify_epsilon_bound(&d.co, &z, &TheoryCheckConfig::default(), seed).map_err(e)?);
            }
            if scheme == PartitionScheme::Dirichlet(0.5) {
                grid.bottleneck.push(run_bottleneck_suite(&cell, EnsembleRule::MinEnergy).map_err(e)?);
            }
            extra += checks.elapsed().as_secs_f64();
            grid.results.push(result);
        }
    }
    grid.seconds = start.elapsed().as_secs_f64() - extra;
    Ok(grid)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cooperative_gain(grid: &Grid) -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut disjoint_gain = f64::NAN;
    for scheme in canonical_schemes() {
        let cells: Vec<&ExperimentResult> = grid.results.iter().filter(|r| r.scheme == scheme).collect();
        let solo = mean(&cells.iter().map(|r| r.mean_solo()).collect::<Vec<_>>());
        let cefi = mean(
            &cells.iter().map(|r| r.rule(EnsembleRule::MinEnergy).expect("evaluated").mean()).collect::<Vec<_>>(),
        );
        pass &= cells.len() == SEEDS as usize && cefi > solo;
        if scheme == PartitionScheme::Disjoint {
            disjoint_gain = cefi - solo;
        }
        parts.push(format!("{} {solo:.3}->{cefi:.3}", scheme.name()));
    }
    // averaging rules can name a class no single device predicts, so the
    // oracle only dominates them on average; per-cell shortfalls are reported
    let mut oracle_shortfalls = 0;
    let mut oracle_margin = f64::INFINITY;
    for scheme in canonical_schemes() {
        let cells: Vec<&ExperimentResult> = grid.results.iter().filter(|r| r.scheme == scheme).collect();
        let oracle = mean(&cells.iter().map(|r| mean(&r.oracle)).collect::<Vec<_>>());
        for rule in EnsembleRule::PRACTICAL {
            let acc = mean(&cells.iter().map(|r| r.rule(rule).expect("evaluated").mean()).collect::<Vec<_>>());
            oracle_margin = oracle_margin.min(oracle - acc);
        }
        for r in &cells {
            for rule in &r.cefi {
                oracle_shortfalls += rule.per_origin.iter().zip(&r.oracle).filter(|(a, o)| o < a).count();
            }
        }
    }
    pass &= disjoint_gain >= 0.15 && oracle_margin >= 0.0 && grid.seconds < 15.0 * 60.0;
    Ok((
        pass,
        format!(
            "solo->min_energy over {SEEDS} seeds: {}; disjoint gain {disjoint_gain:+.3} (>= +0.15); min oracle - rule {oracle_margin:+.3} (>= 0; {oracle_shortfalls} per-cell shortfalls); grid {:.0}s (< 900s)",
            parts.join(", "),
            grid.seconds
        ),
    ))
}

fn fi_equivalence(grid: &Grid) -> Check {
    let pass = grid.fi_equivalence.len() == 4 && grid.fi_equivalence.iter().all(|&(_, m, t)| m == t && t == 1000);
    let parts: Vec<String> = grid.fi_equivalence.iter().map(|(r, m, t)| format!("{} {m}/{t}", r.name())).collect();
    Ok((pass, format!("CE-FI vs input-sharing labels: {}", parts.join(", "))))
}

fn epsilon_bound(grid: &Grid) -> Check {
    let samples: usize = grid.epsilon.iter().map(|r| r.samples).sum();
    let violations: usize = grid.epsilon.iter().map(|r| r.violations).sum();
    let cases: usize = grid.epsilon.iter().map(|r| r.margin_cases).sum();
    let flips: usize = grid.epsilon.iter().map(|r| r.margin_flips).sum();
    let tightest =
        grid.epsilon.iter().map(|r| r.max_prob_deviation / r.bound).fold(0.0f64, f64::max);
    Ok((
        grid.epsilon.len() == 10 && samples >= 10_000 && violations == 0 && flips == 0,
        format!(
            "{} CO layers, {samples} perturbations: {violations} bound violations, {flips} flips in {cases} margin cases; max |dp|/bound {tightest:.3}",
            grid.epsilon.len()
        ),
    ))
}

fn bottleneck(grid: &Grid) -> Check {
    let deltas = |variant: BottleneckVariant| -> Vec<f64> {
        grid.bottleneck
            .iter()
            .flat_map(|b| b.variants.iter().filter(move |v| v.variant == variant).flat_map(|v| v.delta.clone()))
            .collect()
    };
    let unify = deltas(BottleneckVariant::ConsensusUnification);
    let ood = deltas(BottleneckVariant::OodExclusion);
    let min_unify = unify.iter().copied().fold(f64::INFINITY, f64::min);
    let max_ood = ood.iter().map(|d| d.abs()).fold(0.0f64, f64::max);
    let complete = grid.bottleneck.len() == SEEDS as usize && unify.len() == 3 * SEEDS as usize;
    Ok((
        complete && min_unify >= 0.0 && max_ood <= 0.03,
        format!(
            "dirichlet-0.5, min_energy, {} seeds x 3 devices: min unification delta {min_unify:+.4} (>= 0), max |OOD delta| {max_ood:.4} (<= 0.03)",
            grid.bottleneck.len()
        ),
    ))
}

fn communication(grid: &Grid) -> Check {
    let (per_sample, per_epoch, n_shared, epochs) = grid.comm.clone().ok_or("no grid cell")?;
    let (k, d, c) = (3u64, 256u64, 10u64);
    let closed = |n: u64| 2 * (k - 1) * n * d * 4;
    let inference_ok = per_sample == (k - 1) * (d + c) * 4 && per_sample == 2128;
    let vs_2_1kb = (per_sample as f64 - 2100.0).abs() / 2100.0;
    let grid_epochs_ok = per_epoch == closed(n_shared) && epochs.iter().all(|&b| b == closed(n_shared));

    // one CE epoch over a 10,000-sample shared set at the full width
    let mut devices: Vec<DeviceState> = (0..3)
        .map(|k| DeviceState::new(k, HeadSource::synthetic(64, 128, 100 + k as u64), 10, ArchConfig::default(), k as u64))
        .collect();
    let mut rng = Rng::new(5);
    let n = 10_000;
    let shared = Dataset::new((0..n as u32).collect(), random(n, 64, &mut rng), None, 10).map_err(|e| e.to_string())?;
    let fed = FederationConfig { ce_max_epochs: 1, ..FederationConfig::default() };
    let mut net = Network::new();
    train_ce(&mut devices, &shared, &fed, &mut net).map_err(|e| e.to_string())?;
    let measured = net.meter.ce_per_epoch.first().copied().unwrap_or(0);
    let vs_39_8 = (measured as f64 - 39.8e6).abs() / 39.8e6;
    let pass = inference_ok && vs_2_1kb <= 0.05 && grid_epochs_ok && measured == closed(n as u64) && vs_39_8 <= 0.10;
    Ok((
        pass,
        format!(
            "inference {per_sample} B/sample ({:.1}% from 2.1 KB); grid CE epoch {per_epoch} B = 2(K-1)·{n_shared}·d·4 on all {} epochs: {grid_epochs_ok}; N=10000 epoch {measured} B = closed form {} ({:.1}% from 39.8 MB)",
            100.0 * vs_2_1kb,
            epochs.len(),
            closed(n as u64),
            100.0 * vs_39_8
        ),
    ))
}

fn checkpoint_bytes(devices: &mut [DeviceState], hash: u64) -> Vec<u8> {
    let mut c = Container::new(hash);
    for d in devices.iter_mut() {
        d.write_sections(&mut c);
    }
    let mut bytes = Vec::new();
    encode_container(&mut bytes, &c).unwrap();
    bytes
}

fn csv_bytes(result: &ExperimentResult, hash: u64) -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = emit_report(std::slice::from_ref(result), hash, dir.path()).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for p in [paths.results, paths.summary, paths.plot] {
        out.extend(std::fs::read(p).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn determinism() -> Check {
    let e = |e: cefi::Error| e.to_string();
    let cfg = base_config().with_scheme(PartitionScheme::Dirichlet(0.5)).with_seed(3);
    let mut runs = Vec::new();
    for execution in [Execution::SingleThreaded, Execution::SingleThreaded, Execution::ThreadPerDevice] {
        let mut c = cfg.clone();
        c.federation.execution = execution;
        let mut cell = train_cell(&c).map_err(e)?;
        let result = evaluate_cell(&mut cell, &EnsembleRule::PRACTICAL).map_err(e)?;
        let ckpt = checkpoint_bytes(&mut cell.devices, c.hash());
        let csv = csv_bytes(&result, c.hash())?;
        runs.push((ckpt, csv, cell.network.trace_lines().collect::<Vec<_>>()));
    }
    let rerun = runs[0] == runs[1];
    let threaded = runs[0] == runs[2];
    Ok((
        rerun && threaded,
        format!(
            "rerun identical checkpoints+CSVs+trace: {rerun} ({} checkpoint bytes); threaded == single-threaded: {threaded}",
            runs[0].0.len()
        ),
    ))
}

const GRID_CRITERIA: [&str; 5] = [
    "FI-equivalence",
    "epsilon-perturbation bound",
    "communication accounting",
    "desk-scale cooperative gain",
    "bottleneck direction",
];

/// Optional arguments select criteria by name substring.
fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let start = Instant::now();
    let mut verdicts = Vec::new();
    let standalone: [(&'static str, fn() -> Check); 4] = [
        ("gradient fidelity", gradient_fidelity),
        ("loss oracle equivalence", loss_oracles),
        ("centroid vs pairwise complexity", pair_counts),
        ("ensemble invariances", ensemble_invariance),
    ];
    for (name, check) in standalone {
        if selected(name) {
            verdicts.push(verdict(name, check));
        }
    }
    if GRID_CRITERIA.iter().any(|n| selected(n)) {
        eprintln!("training the desk-scale grid ({} schemes x {SEEDS} seeds)...", canonical_schemes().len());
        let grid = run_grid();
        let checks: [fn(&Grid) -> Check; 5] =
            [fi_equivalence, epsilon_bound, communication, cooperative_gain, bottleneck];
        for (name, check) in GRID_CRITERIA.into_iter().zip(checks) {
            if selected(name) {
                verdicts.push(verdict(name, || match &grid {
                    Ok(g) => check(g),
                    Err(err) => Err(format!("grid failed: {err}")),
                }));
            }
        }
    }
    if selected("determinism") {
        verdicts.push(verdict("determinism", determinism));
    }

    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!(
        "{} of {} criteria passed in {:.0}s",
        verdicts.len() - failed,
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
