//! Randomized invariants of the geometry, fitting, reachability and control
//! layers on both benchmark systems.

use std::sync::OnceLock;

use koopreach::control::{admissible_input_set, simulate_closed_loop, worst_case_successors};
use koopreach::experiment::{compute_brs, duffing_config, fit, generate_data, pendulum_config, Datasets};
use koopreach::koopman::{
    fit_global, probe_dispersion, residual_center, restrict_dataset, LiftedData,
};
use koopreach::lp::{self, LinearProgram, LpStatus};
use koopreach::polytope::Support;
use koopreach::reach::pre_linear;
use koopreach::{BoxSet, BrsResult, ExperimentConfig, FitReport, HPolytope, KoopmanModel, SystemSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Bench {
    cfg: ExperimentConfig,
    data: Datasets,
    model: KoopmanModel,
    report: FitReport,
    brs: BrsResult,
}

fn bench(mut cfg: ExperimentConfig, horizon: usize) -> Bench {
    cfg.brs.horizon = horizon;
    let data = generate_data(&cfg).unwrap();
    let (model, report) = fit(&cfg, &data).unwrap();
    let brs = compute_brs(&cfg, &data.train, &model, &report).unwrap();
    Bench { cfg, data, model, report, brs }
}

fn duffing() -> &'static Bench {
    static CELL: OnceLock<Bench> = OnceLock::new();
    CELL.get_or_init(|| bench(duffing_config(), 10))
}

// Local mode on a short horizon keeps the fixture cheap.
fn pendulum() -> &'static Bench {
    static CELL: OnceLock<Bench> = OnceLock::new();
    CELL.get_or_init(|| bench(pendulum_config(), 4))
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)).normalize()
}

fn random_polytope(rng: &mut ChaCha8Rng, d: usize, extra: usize) -> HPolytope {
    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    for _ in 0..extra {
        rows.extend(random_direction(rng, d).iter().copied());
        offsets.push(rng.gen_range(0.3..1.5));
    }
    for mask in 0..(1usize << d) {
        let s = (d as f64).sqrt();
        rows.extend((0..d).map(|j| if mask >> j & 1 == 1 { 1.0 / s } else { -1.0 / s }));
        offsets.push(2.0);
    }
    let k = offsets.len();
    HPolytope::new(DMatrix::from_row_slice(k, d, &rows), DVector::from_vec(offsets)).unwrap()
}

fn support(p: &HPolytope, dir: &DVector<f64>) -> Support {
    p.support(dir).unwrap()
}

/// `sup_P(dir) <= sup_Q(dir) + tol`, reading unbounded as `+inf`.
fn support_le(p: &HPolytope, q: &HPolytope, dir: &DVector<f64>, tol: f64) -> bool {
    match (support(p, dir), support(q, dir)) {
        (Support::Empty, _) | (_, Support::Unbounded) => true,
        (Support::Finite(a), Support::Finite(b)) => a <= b + tol,
        _ => false,
    }
}

fn sample_in(p: &HPolytope, bbox: &BoxSet, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let x = bbox.sample(rng);
        if p.max_violation(&x) <= 0.0 {
            return x;
        }
    }
}

// ------------------------------------------------------------------- lp

#[test]
fn lp_weak_duality_spot_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.gen_range(2..5);
        let rows = rng.gen_range(3..10);
        let a = DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(rows, |_, _| rng.gen_range(0.1..2.0));
        let boxed = BoxSet::centered(DVector::from_element(n, 3.0)).unwrap().to_polytope();
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let (a, b) = {
            let p = HPolytope::new(a, b).unwrap().intersect(&boxed).unwrap();
            (p.normals().clone(), p.offsets().clone())
        };
        let sol = lp::solve(&LinearProgram::minimize(c.clone()).with_inequalities(&a, &b)).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        let v = sol.objective_value;
        let mut feasible = 0;
        while feasible < 200 {
            let x = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            if (&a * &x - &b).max() <= 0.0 {
                feasible += 1;
                assert!(c.dot(&x) >= v - 1e-6);
            }
        }
    }
}

#[test]
fn lp_infeasibility_has_positive_phase_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let n = rng.gen_range(2..5);
        let extra = rng.gen_range(0..6);
        // x_0 <= -1 and -x_0 <= -1 contradict; the rest is noise.
        let mut a = DMatrix::from_fn(2 + extra, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut b = DVector::from_fn(2 + extra, |_, _| rng.gen_range(0.1..2.0));
        a.row_mut(0).fill(0.0);
        a.row_mut(1).fill(0.0);
        a[(0, 0)] = 1.0;
        a[(1, 0)] = -1.0;
        b[0] = -1.0;
        b[1] = -1.0;
        let program = LinearProgram::minimize(DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)))
            .with_inequalities(&a, &b);
        assert_eq!(lp::solve(&program).unwrap().status, LpStatus::Infeasible);
        assert!(lp::phase_one_value(&program).unwrap() > 0.0);
    }
}

// ------------------------------------------------------------- polytope

#[test]
fn erosion_is_monotone_in_radii() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for inst in 0..100 {
        let d = 2 + inst % 2;
        let extra = rng.gen_range(3..8);
        let z = random_polytope(&mut rng, d, extra);
        let center = DVector::from_fn(d, |_, _| rng.gen_range(-0.1..0.1));
        let r1 = DVector::from_fn(d, |_, _| rng.gen_range(0.0..0.2));
        let r2 = r1.map(|r| r + rng.gen_range(0.0..0.2));
        let e1 = z.erode(&BoxSet::new(center.clone(), r1).unwrap()).unwrap();
        let e2 = z.erode(&BoxSet::new(center, r2).unwrap()).unwrap();
        for _ in 0..32 {
            let dir = random_direction(&mut rng, d);
            assert!(support_le(&e2, &e1, &dir, 1e-9), "instance {inst}");
        }
    }
}

#[test]
fn redundancy_removal_preserves_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for inst in 0..100 {
        let d = 2 + inst % 3;
        let extra = rng.gen_range(5..30);
        let p = random_polytope(&mut rng, d, extra);
        let q = p.remove_redundant().unwrap();
        assert!(q.num_rows() <= p.num_rows());
        for _ in 0..64 {
            let dir = random_direction(&mut rng, d);
            match (support(&p, &dir), support(&q, &dir)) {
                (Support::Finite(a), Support::Finite(b)) => assert!((a - b).abs() <= 1e-7, "instance {inst}"),
                (a, b) => panic!("instance {inst}: {a:?} vs {b:?}"),
            }
        }
    }
}

#[test]
fn split_pieces_cover_the_polytope() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for inst in 0..100 {
        let d = 2 + inst % 2;
        let extra = rng.gen_range(3..10);
        let p = random_polytope(&mut rng, d, extra);
        let (a, b) = p.split_through_center().unwrap();
        let bbox = p.bounding_box().unwrap();
        for _ in 0..200 {
            let x = sample_in(&p, &bbox, &mut rng);
            assert!(
                a.max_violation(&x) <= 1e-8 || b.max_violation(&x) <= 1e-8,
                "instance {inst}: point outside both pieces"
            );
        }
    }
}

// -------------------------------------------------------------- koopman

/// Boundary-inclusive grid over the bounding box of `domain`, refined until
/// at least `min_points` lie inside.
fn grid_in(domain: &HPolytope, min_points: usize) -> Vec<DVector<f64>> {
    let bbox = domain.bounding_box().unwrap();
    let d = domain.dim();
    let (lo, hi) = (bbox.lower(), bbox.upper());
    let mut per_axis = (min_points as f64).powf(1.0 / d as f64).ceil() as usize;
    loop {
        let total = per_axis.pow(d as u32);
        let inside: Vec<DVector<f64>> = (0..total)
            .map(|flat| {
                let mut rem = flat;
                DVector::from_fn(d, |j, _| {
                    let k = rem % per_axis;
                    rem /= per_axis;
                    lo[j] + (hi[j] - lo[j]) * k as f64 / (per_axis - 1) as f64
                })
            })
            .filter(|p| domain.max_violation(p) <= 1e-12)
            .collect();
        if inside.len() >= min_points {
            return inside;
        }
        per_axis += per_axis / 2 + 1;
    }
}

/// Grid points of the model's subdomain where the prediction error leaves
/// `W`.
fn overapproximation_violations(spec: &SystemSpec, model: &KoopmanModel) -> (usize, usize) {
    let n = spec.state_dim();
    let (lo, hi) = (model.w.lower(), model.w.upper());
    let points = grid_in(&model.subdomain, 10_000);
    let bad = points
        .iter()
        .filter(|xu| {
            let x = xu.rows(0, n).into_owned();
            let u = xu.rows(n, xu.len() - n).into_owned();
            let e = model.prediction_error(&x, &u, &spec.step(&x, &u)).unwrap();
            (0..e.len()).any(|i| e[i] < lo[i] - 1e-9 || e[i] > hi[i] + 1e-9)
        })
        .count();
    (bad, points.len())
}

#[test]
fn duffing_model_overapproximates_on_dense_grid() {
    let b = duffing();
    let (bad, total) = overapproximation_violations(&b.cfg.system.spec(), &b.model);
    assert!(total >= 10_000);
    assert_eq!(bad, 0, "{bad} of {total} grid points outside W");
}

#[test]
fn pendulum_models_overapproximate_on_dense_grid() {
    let b = pendulum();
    let spec = b.cfg.system.spec();
    let (bad, total) = overapproximation_violations(&spec, &b.model);
    assert_eq!(bad, 0, "global model: {bad} of {total} grid points outside W");
    assert!(b.brs.models.len() > 1);
    for (id, model) in &b.brs.models {
        let (bad, total) = overapproximation_violations(&spec, model);
        assert!(total >= 10_000);
        assert_eq!(bad, 0, "model {id}: {bad} of {total} grid points outside W");
    }
}

fn row_objective(data: &LiftedData, i: usize, a: &DMatrix<f64>, b: &DMatrix<f64>, c: f64) -> f64 {
    let r = data.residuals(a, b);
    r.column(i).iter().map(|v| (v - c).abs()).fold(0.0, f64::max)
}

#[test]
fn global_fit_is_locally_optimal() {
    let b = duffing();
    let lifting = &b.model.lifting;
    let g = fit_global(&b.data.train, lifting).unwrap();
    let data = LiftedData::new(&b.data.train, lifting).unwrap();
    let (p, m) = (g.a.ncols(), g.b.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..p {
        let base = row_objective(&data, i, &g.a, &g.b, g.center[i]);
        assert!((base - g.residual[i]).abs() <= 1e-9 * (1.0 + base));
        for _ in 0..100 {
            let dir = random_direction(&mut rng, p + m + 1) * 1e-3;
            let (mut a, mut bm) = (g.a.clone(), g.b.clone());
            for j in 0..p {
                a[(i, j)] += dir[j];
            }
            for j in 0..m {
                bm[(i, j)] += dir[p + j];
            }
            let moved = row_objective(&data, i, &a, &bm, g.center[i] + dir[p + m]);
            assert!(moved >= base - 1e-9, "row {i}: {moved} < {base}");
        }
    }
}

#[test]
fn residual_center_matches_lp() {
    let b = duffing();
    let lifting = &b.model.lifting;
    let data = LiftedData::new(&b.data.train, lifting).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..5 {
        let a = b.model.a.map(|v| v + rng.gen_range(-0.05..0.05));
        let bm = b.model.b.map(|v| v + rng.gen_range(-0.05..0.05));
        let (c, e) = residual_center(&b.data.train, lifting, &a, &bm).unwrap();
        let r = data.residuals(&a, &bm);
        for i in 0..r.ncols() {
            // Variables (c, t): minimize t with |r_k - c| <= t.
            let k = r.nrows();
            let g = DMatrix::from_fn(2 * k, 2, |row, col| match (row < k, col) {
                (true, 0) => -1.0,
                (false, 0) => 1.0,
                _ => -1.0,
            });
            let h = DVector::from_fn(2 * k, |row, _| if row < k { -r[(row, i)] } else { r[(row - k, i)] });
            let sol = lp::solve(&LinearProgram::minimize(DVector::from_vec(vec![0.0, 1.0])).with_inequalities(&g, &h))
                .unwrap();
            let x = sol.point.unwrap();
            assert!((x[1] - e[i]).abs() <= 1e-9, "row {i}: {} vs {}", x[1], e[i]);
            assert!((x[0] - c[i]).abs() <= 1e-9, "row {i}: {} vs {}", x[0], c[i]);
        }
    }
}

#[test]
fn restricted_data_keeps_dispersion() {
    let b = pendulum();
    let ds = &b.data.train;
    let disp = b.report.dispersion.unwrap().value;
    let domain = b.cfg.system.spec().xu_box();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let (lo, hi) = (domain.lower(), domain.upper());
        let center = DVector::from_fn(3, |j, _| rng.gen_range(lo[j]..hi[j]));
        let radii = DVector::from_fn(3, |j, _| rng.gen_range(0.05..0.25) * (hi[j] - lo[j]));
        let region = BoxSet::new(center, radii).unwrap().to_polytope().intersect(&domain.to_polytope()).unwrap();
        let sub = restrict_dataset(ds, &region, disp).unwrap();
        let points: Vec<f64> = (0..sub.len()).flat_map(|k| sub.x(k).iter().chain(sub.u(k)).copied().collect::<Vec<_>>()).collect();
        let bbox = region.bounding_box().unwrap();
        let per_axis = 25;
        let resolution = (0..3).map(|j| bbox.radii[j] / (per_axis - 1) as f64).fold(0.0, f64::max);
        let got = probe_dispersion(&points, 3, &region, &bbox, per_axis);
        assert!(got <= disp + resolution, "{got} > {disp} + {resolution}");
    }
}

// ---------------------------------------------------------------- reach

#[test]
fn pre_is_monotone_in_target() {
    let b = duffing();
    let spec = b.cfg.system.spec();
    let s_z = b.model.lifting.implicit_set(&spec.state_domain.to_polytope()).unwrap();
    let s_u = spec.input_set.to_polytope();
    let z = &b.brs.layers[3][0].polytope;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let relaxed = HPolytope::new(z.normals().clone(), z.offsets().map(|h| h + 0.05)).unwrap();
    let small = pre_linear(&b.model, z, &s_z, &s_u).unwrap();
    let large = pre_linear(&b.model, &relaxed, &s_z, &s_u).unwrap();
    for _ in 0..32 {
        let dir = random_direction(&mut rng, z.dim());
        assert!(support_le(&small, &large, &dir, 1e-7));
    }
}

#[test]
fn pieces_stay_inside_state_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for b in [duffing(), pendulum()] {
        let s_z = b.brs.lifting.implicit_set(&b.brs.state_constraints).unwrap();
        for piece in b.brs.layers.iter().flatten() {
            for _ in 0..32 {
                let dir = random_direction(&mut rng, s_z.dim());
                assert!(support_le(&piece.polytope, &s_z, &dir, 1e-7));
            }
        }
    }
}

/// For sampled states in any layer, the center of the admissible inputs
/// keeps every `W` vertex of the successor inside the target piece.
fn one_step_failures(r: &BrsResult, domain: &BoxSet, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sampled, mut failures) = (0, 0);
    while sampled < 500 {
        let x = domain.sample(&mut rng);
        let Some((k, id)) = r.first_layer_containing(&x, r.horizon()) else { continue };
        sampled += 1;
        let piece = &r.layers[k][id];
        let model = &r.models[&piece.model_id.unwrap()];
        let target = &r.layers[k - 1][piece.target_piece_id.unwrap()].polytope;
        let set = admissible_input_set(model, &x, target, &r.input_constraints).unwrap();
        let Ok((u, _)) = set.chebyshev_center() else {
            failures += 1;
            continue;
        };
        let succ = worst_case_successors(model, &x, &u).unwrap();
        if succ.iter().any(|z| target.max_violation(z) > 1e-7) {
            failures += 1;
        }
    }
    failures
}

#[test]
fn one_step_soundness_on_both_benchmarks() {
    for (b, seed) in [(duffing(), 51), (pendulum(), 52)] {
        let failures = one_step_failures(&b.brs, &b.cfg.system.spec().state_domain, seed);
        assert_eq!(failures, 0);
    }
}

#[test]
fn soundness_does_not_depend_on_split_threshold() {
    let b = pendulum();
    let mut cfg = b.cfg.clone();
    cfg.brs.horizon = 3;
    cfg.brs.split_threshold *= 0.5;
    let r = compute_brs(&cfg, &b.data.train, &b.model, &b.report).unwrap();
    assert_eq!(one_step_failures(&r, &cfg.system.spec().state_domain, 53), 0);
}

// -------------------------------------------------------------- control

#[test]
fn pendulum_guarantee_chain() {
    let b = pendulum();
    let spec = b.cfg.system.spec();
    let target = spec.target.to_polytope();
    let k = b.brs.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut sampled = 0;
    while sampled < 500 {
        let x = spec.state_domain.sample(&mut rng);
        if b.brs.membership(&x, k).is_none() {
            continue;
        }
        sampled += 1;
        let tr = simulate_closed_loop(|x, u| spec.step(x, u), &b.brs, &x, &target).unwrap();
        assert!(tr.reached && tr.steps_used <= k);
        assert!(tr.states.iter().all(|s| spec.state_domain.contains(s, 1e-9)));
    }
}
