//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! The trend criteria run the full `gen → train → eval` pipeline through the
//! command-line tool and take tens of minutes on one core.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit};
use rand::Rng;
use serde_json::Value;
use softgrasp::dataset::{self, DataRegime};
use softgrasp::fem::hyper::HyperModel;
use softgrasp::fem::sparse::{cg, CgStatus};
use softgrasp::fem::{
    apply_dirichlet, assemble_linear_system, solve_linear, solve_nonlinear, BoundaryConditions, Constants,
    LinearSystem, MaterialModel, MaterialParams,
};
use softgrasp::kelvinlet::{eval_kelvinlet, solve_coefficients, Grasp, KelvinletParams};
use softgrasp::mesh::{synth, Region};
use softgrasp::metrics::dcm;
use softgrasp::sampling::{sample_rng, SamplingConfig, DEFAULT_CUBOID};
use softgrasp::{DisplacementField, Vec3};

type Check = Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];
const LINEAR_EPOCHS: usize = 100;
const NONLINEAR_EPOCHS: usize = 200;

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("kelvinlet analytics", kelvinlet_analytics),
        ("multi-grasper solve", multi_grasp),
        ("fem linear", fem_linear),
        ("fem nonlinear", fem_nonlinear),
        ("metrics and reproducibility", metrics),
        ("latency", latency),
        ("trend linear", || trend(DataRegime::Linear)),
        ("trend nonlinear", || trend(DataRegime::Nonlinear)),
    ];
    // Optional name filters, as with the default test harness.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_norm(a: &DisplacementField, b: &DisplacementField) -> f64 {
    let d: f64 = a.u.iter().zip(&b.u).map(|(x, y)| (x - y).norm_squared()).sum();
    let n: f64 = b.u.iter().map(|y| y.norm_squared()).sum();
    (d / n).sqrt()
}

fn random_vec(rng: &mut impl Rng, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn random_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
    loop {
        let a = random_vec(rng, 1.0);
        if a.norm() > 1e-3 {
            return Rotation3::from_axis_angle(&Unit::new_normalize(a), rng.random_range(0.0..std::f64::consts::TAU));
        }
    }
}

fn params(lambda: f64) -> KelvinletParams {
    KelvinletParams { lambda, ..Default::default() }
}

/// Largest miss at a grasp point relative to the largest drag.
fn max_miss(grasps: &[Grasp], p: &KelvinletParams) -> f64 {
    let sol = solve_coefficients(grasps, p).unwrap();
    let s = grasps.iter().map(|g| g.displacement.norm()).fold(0.0, f64::max);
    grasps.iter().map(|g| (sol.eval(&g.source) - g.displacement).norm() / s).fold(0.0, f64::max)
}

/// Two grasps `d` apart dragged along a shared direction that is parallel
/// or perpendicular to their separation.
fn aligned_pair(rng: &mut impl Rng, d: f64, a: [f64; 2]) -> [Grasp; 2] {
    let rot = random_rotation(rng);
    let origin = random_vec(rng, 0.1);
    let sep = rot * Vec3::x();
    let dir = if rng.random::<bool>() { sep } else { rot * Vec3::y() };
    [Grasp::new(origin, dir * a[0]), Grasp::new(origin + sep * d, dir * a[1])]
}

fn kelvinlet_analytics() -> Check {
    let t = Instant::now();
    let p = KelvinletParams::default();
    let gain_err = (p.source_gain() - 1.2 / 2.3).abs();
    ensure(gain_err <= 1e-12, || format!("source gain off by {gain_err:e}"))?;
    let mut rng = sample_rng(100, 0);
    let (mut equiv, mut interp) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let g = Grasp::new(random_vec(&mut rng, 0.1), random_vec(&mut rng, 0.05));
        let at_source = eval_kelvinlet(&g.source, &g, &p);
        let ratio_err = (at_source - g.displacement * (1.2 / 2.3)).amax() / g.displacement.amax();
        ensure(ratio_err <= 1e-12, || format!("source ratio off by {ratio_err:e}"))?;
        // Rigid motion of the whole configuration.
        let rot = random_rotation(&mut rng);
        let shift = random_vec(&mut rng, 1.0);
        let grasps = [g, Grasp::new(g.source + Vec3::new(0.08, 0.0, 0.0) + random_vec(&mut rng, 0.02), random_vec(&mut rng, 0.05))];
        let moved: Vec<Grasp> = grasps.iter().map(|h| Grasp::new(rot * h.source + shift, rot * h.displacement)).collect();
        let x = random_vec(&mut rng, 0.2);
        let a = solve_coefficients(&grasps, &p).map_err(|e| e.to_string())?;
        let b = solve_coefficients(&moved, &p).map_err(|e| e.to_string())?;
        let s = grasps.iter().map(|h| h.displacement.norm()).fold(0.0, f64::max);
        equiv = equiv.max((b.eval(&(rot * x + shift)) - rot * a.eval(&x)).norm() / s);
        // λ = 0 reproduces representable targets exactly.
        interp = interp.max(max_miss(&[g], &params(0.0)));
        let (d, a) = (rng.random_range(0.05..0.3), [rng.random_range(0.005..0.05), rng.random_range(-0.05..0.05)]);
        let pair = aligned_pair(&mut rng, d, a);
        interp = interp.max(max_miss(&pair, &params(0.0)));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(equiv <= 1e-10, || format!("rigid equivariance error {equiv:e}"))?;
    ensure(interp <= 1e-8, || format!("interpolation error {interp:e}"))?;
    ensure(secs < 1.0, || format!("100 trials took {secs:.2} s"))?;
    Ok(format!("gain error {gain_err:.1e}, 100 trials: equivariance {equiv:.1e}, interpolation {interp:.1e}"))
}

fn multi_grasp() -> Check {
    let mut rng = sample_rng(101, 0);
    let (mut ridge, mut exact) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        // Drag magnitudes within a factor 2.5, the ridge shrinks weaker grasps more.
        let (d, a) = (rng.random_range(0.1..0.3), [rng.random_range(0.02..0.05), rng.random_range(0.02..0.05)]);
        let pair = aligned_pair(&mut rng, d, a);
        ridge = ridge.max(max_miss(&pair, &params(0.001)));
        exact = exact.max(max_miss(&pair, &params(1e-12)));
    }
    ensure(ridge <= 0.02, || format!("λ=0.001 miss {ridge:.4}"))?;
    ensure(exact <= 1e-6, || format!("λ=1e-12 miss {exact:e}"))?;
    Ok(format!("100 pairs: λ=0.001 worst miss {:.3}%, λ=1e-12 worst miss {exact:.1e}", 100.0 * ridge))
}

fn dense_solve(sys: &LinearSystem, bc: &BoundaryConditions) -> Result<(DisplacementField, usize), String> {
    let red = apply_dirichlet(sys, bc).map_err(|e| e.to_string())?;
    let k: DMatrix<f64> = red.k.to_dense();
    let b = DVector::from_iterator(red.dofs(), red.rhs.iter().flat_map(|v| [v.x, v.y, v.z]));
    let x = k.lu().solve(&b).ok_or("dense LU failed")?;
    let free: Vec<Vec3> = (0..red.free.len()).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect();
    Ok((red.reconstruct(&free), red.dofs()))
}

fn fem_linear() -> Check {
    let t = Instant::now();
    let mat = MaterialParams::linear_liver();
    let a = Matrix3::new(0.01, -0.02, 0.005, 0.003, 0.02, -0.01, 0.0, 0.004, -0.015);
    // 5-tet cube: loads consistent with the constant stress of the affine
    // field, three non-collinear nodes pinned to it.
    let cube = synth::unit_cube_5();
    let mut sys = assemble_linear_system(&cube, &mat).map_err(|e| e.to_string())?;
    let affine: Vec<Vec3> = cube.nodes().iter().map(|x| a * x).collect();
    sys.f = sys.k.mul_vec(&affine);
    let bc = BoundaryConditions {
        fixed: vec![],
        prescribed: [0, 1, 2].iter().map(|&i| (i, affine[i])).collect(),
    };
    let red = apply_dirichlet(&sys, &bc).map_err(|e| e.to_string())?;
    let mut x = vec![Vec3::zeros(); red.free.len()];
    let out = cg(&red.k, &red.rhs, &mut x, 1e-14, 1000);
    ensure(out.status == CgStatus::Converged, || format!("cube CG: {:?}", out.status))?;
    let got = red.reconstruct(&x);
    let mut patch = got.u.iter().zip(&affine).map(|(g, w)| (g - w).amax()).fold(0.0, f64::max);
    // Kuhn grids with interior nodes and the affine field on the boundary.
    for cells in [[2, 2, 2], [3, 3, 3]] {
        let mesh = synth::box_grid(cells, [1.0, 1.0, 1.0]);
        let bc = BoundaryConditions {
            fixed: vec![],
            prescribed: mesh.surface_nodes().iter().map(|&s| (s, a * mesh.node(s))).collect(),
        };
        let sol = solve_linear(&mesh, &mat, &bc).map_err(|e| e.to_string())?;
        for (i, u) in sol.field.u.iter().enumerate() {
            patch = patch.max((u - a * mesh.node(i)).amax());
        }
    }
    ensure(patch <= 1e-8, || format!("patch test error {patch:e}"))?;
    // CG against dense LU.
    let cant_cells = [10, 2, 2];
    let cantilever = synth::box_grid(cant_cells, [0.3, 0.03, 0.03]);
    let cant_bc = BoundaryConditions {
        fixed: (0..cantilever.node_count()).filter(|&i| cantilever.node(i).x == 0.0).collect(),
        prescribed: [(synth::grid_index(cant_cells, 10, 1, 1), Vec3::new(0.0, -0.01, 0.002))].into_iter().collect(),
    };
    let (organ, _) = synth::organ(synth::OrganShape { cells: [6, 3, 5], ..synth::OrganShape::desk() });
    let node = *organ.surface_nodes().iter().find(|&&s| matches!(organ.region(s), Region::Surface(_))).unwrap();
    let g = Grasp::at_node(&organ, node, Vec3::new(0.01, 0.02, -0.01)).unwrap();
    let organ_bc = BoundaryConditions::from_grasps(&organ, &[g]).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut dofs = Vec::new();
    for (mesh, bc) in [(&cantilever, &cant_bc), (&organ, &organ_bc)] {
        let sys = assemble_linear_system(mesh, &mat).map_err(|e| e.to_string())?;
        let (oracle, n) = dense_solve(&sys, bc)?;
        ensure(n <= 600, || format!("{n} DOF exceeds the oracle size"))?;
        let sol = solve_linear(mesh, &mat, bc).map_err(|e| e.to_string())?;
        let scale = oracle.max_norm();
        worst = worst.max(sol.field.u.iter().zip(&oracle.u).map(|(p, q)| (p - q).norm() / scale).fold(0.0, f64::max));
        dofs.push(n);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(worst <= 1e-8, || format!("CG vs dense {worst:e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("patch error {patch:.1e}, CG vs dense {worst:.1e} on {dofs:?} DOF"))
}

fn fem_nonlinear() -> Check {
    let t = Instant::now();
    let mr = MaterialParams::mooney_rivlin_liver();
    // Central differences of the total potential energy.
    let mesh = synth::box_grid([3, 2, 2], [0.06, 0.04, 0.04]);
    ensure(mesh.node_count() <= 50, || "gradient mesh too large".into())?;
    let model = HyperModel::new(&mesh, &mr).map_err(|e| e.to_string())?;
    let mut grad_err = 0.0f64;
    for seed in 0..3 {
        let mut rng = sample_rng(200 + seed, 0);
        let u: Vec<Vec3> = (0..mesh.node_count()).map(|_| random_vec(&mut rng, 0.003)).collect();
        let g = model.gradient(&u, 1.0).map_err(|e| e.to_string())?;
        let gmax = g.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let h = 1e-6;
        for node in 0..mesh.node_count() {
            for k in 0..3 {
                let (mut up, mut dn) = (u.clone(), u.clone());
                up[node][k] += h;
                dn[node][k] -= h;
                let fd = (model.energy(&up, 1.0).unwrap() - model.energy(&dn, 1.0).unwrap()) / (2.0 * h);
                grad_err = grad_err.max((fd - g[node][k]).abs() / g[node][k].abs().max(1e-2 * gmax));
            }
        }
    }
    ensure(grad_err <= 1e-4, || format!("gradient vs finite differences {grad_err:e}"))?;
    // Small strain against the linear solver with matched moduli.
    let cube = synth::box_grid([3, 3, 3], [0.06, 0.06, 0.06]);
    let bottom: Vec<usize> = (0..cube.node_count()).filter(|&i| cube.node(i).y == 0.0).collect();
    let mut weightless = mr.clone();
    weightless.gravity = [0.0; 3];
    let lin = MaterialParams {
        model: MaterialModel::Linear,
        constants: Constants {
            mu: 2.0 * (mr.constants.c10 + mr.constants.c01),
            nu: mr.constants.mr_equivalent_nu(),
            ..mr.constants
        },
        ..weightless.clone()
    };
    let bc = BoundaryConditions {
        fixed: bottom.clone(),
        prescribed: [(synth::grid_index([3, 3, 3], 1, 3, 2), Vec3::new(0.3, 0.8, -0.5).normalize() * 1e-5)].into_iter().collect(),
    };
    let a = solve_nonlinear(&cube, &weightless, &bc).map_err(|e| e.to_string())?.field;
    let b = solve_linear(&cube, &lin, &bc).map_err(|e| e.to_string())?.field;
    let small = rel_norm(&a, &b);
    ensure(small <= 0.02, || format!("small-strain difference {small:.4}"))?;
    // Gravity preload of the desk organ.
    let (organ, _) = synth::organ(synth::OrganShape::desk());
    let bc = BoundaryConditions {
        fixed: (0..organ.node_count()).filter(|&i| organ.region(i) == Region::Fixed).collect(),
        prescribed: Default::default(),
    };
    let sol = solve_nonlinear(&organ, &mr, &bc).map_err(|e| e.to_string())?;
    let r = &sol.report;
    ensure(r.residual <= r.tolerance, || format!("preload residual {:e} > {:e}", r.residual, r.tolerance))?;
    let monotone = r.energy_history.iter().all(|s| s.windows(2).all(|w| w[1] <= w[0]));
    ensure(monotone && r.energy < 0.0, || "preload energy not monotone".into())?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "gradient error {grad_err:.1e}, small-strain difference {:.3}%, preload {} Newton steps, energy {:.3e} J",
        100.0 * small,
        r.newton_steps,
        r.energy
    ))
}

fn softgrasp(args: &[&str], cwd: &Path) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_softgrasp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("softgrasp {}: {}", args[0], String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn read_json(path: &Path) -> Result<Value, String> {
    serde_json::from_str(&fs::read_to_string(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(tree_bytes(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

fn metrics() -> Check {
    let (mesh, specs) = synth::organ(synth::OrganShape::desk());
    let w = mesh.lumped_volumes();
    let mut rng = sample_rng(300, 0);
    let truth = DisplacementField::new((0..mesh.node_count()).map(|_| random_vec(&mut rng, 0.01)).collect());
    let one = |p: DisplacementField| dcm(&[p], std::slice::from_ref(&truth), w).unwrap();
    let ids = [one(truth.clone()), one(DisplacementField::zeros(mesh.node_count())), one(truth.scaled(0.5))];
    ensure(ids == [100.0, 0.0, 50.0], || format!("DCM identities gave {ids:?}"))?;
    // Dataset round trip.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 4);
    let ds = dataset::generate(&mesh, &MaterialParams::linear_liver(), &cfg, 5, 2, DataRegime::Linear).map_err(|e| e.to_string())?;
    dataset::write(&ds, dir.path().join("a")).map_err(|e| e.to_string())?;
    let back = dataset::read(dir.path().join("a")).map_err(|e| e.to_string())?;
    ensure(back.samples == ds.samples && back.mesh.nodes() == ds.mesh.nodes(), || "round trip changed samples".into())?;
    dataset::write(&back, dir.path().join("b")).map_err(|e| e.to_string())?;
    ensure(tree_bytes(&dir.path().join("a")) == tree_bytes(&dir.path().join("b")), || "rewritten dataset differs".into())?;
    // Seeded pipeline twice, different worker counts.
    let p = dir.path();
    for (run, jobs) in [("x", "1"), ("y", "2")] {
        let d = format!("{run}/data");
        softgrasp(&["gen", "--mesh", "synth:desk", "--count", "10", "--arity", "2", "--seed", "3", "--jobs", jobs, "--out", &d], p)?;
        let ck = format!("{run}/m.ckpt");
        softgrasp(&["train", "--data", &d, "--regime", "residual", "--epochs", "2", "--seed", "3", "--normalize", "true", "--calibrate-epsilon", "--log", &format!("{run}/log.jsonl"), "--out", &ck], p)?;
        softgrasp(&["eval", "--data", &d, "--ckpt", &ck, "--report", &format!("{run}/report.json")], p)?;
    }
    let x = tree_bytes(&p.join("x"));
    let y: Vec<(String, Vec<u8>)> = tree_bytes(&p.join("y"))
        .into_iter()
        .map(|(n, b)| {
            let b = if n.ends_with("report.json") { String::from_utf8(b).unwrap().replace("y/", "x/").into_bytes() } else { b };
            (n, b)
        })
        .collect();
    ensure(x == y, || "seeded pipelines differ".into())?;
    Ok(format!("DCM identities {ids:?}, dataset round trip bit-exact, {} pipeline files byte-identical", x.len()))
}

fn bench(mode: &str, repeat: &str) -> Result<f64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = softgrasp(&["bench", "--mesh", "synth:large", "--graspers", "2", "--mode", mode, "--repeat", repeat], dir.path())?;
    ensure(out["nodes"] == 10_400, || "bench mesh is not 10,400 nodes".into())?;
    out["latency"]["mean_ms"].as_f64().ok_or_else(|| "no latency in bench output".into())
}

fn latency() -> Check {
    let kelvinlet = bench("kelvinlet", "50")?;
    let neural = bench("neural", "20")?;
    let fem = bench("fem", "2")?;
    ensure(kelvinlet <= 10.0, || format!("kelvinlet {kelvinlet:.2} ms"))?;
    ensure(neural <= 50.0, || format!("neural {neural:.2} ms"))?;
    // Both surrogates are interactive; FEM is an order of magnitude slower.
    ensure(fem >= 10.0 * neural.max(kelvinlet), || format!("fem {fem:.0} ms is not far above neural {neural:.1} ms"))?;
    Ok(format!("10,400 nodes, 2 graspers: kelvinlet {kelvinlet:.2} ms, neural {neural:.1} ms, fem {fem:.0} ms"))
}

/// Mean test DCM per regime (and the Kelvinlet prior) over the seeds.
fn trend(regime: DataRegime) -> Check {
    let t = Instant::now();
    let (count, epochs, budget) = match regime {
        DataRegime::Linear => (250, LINEAR_EPOCHS, 30.0 * 60.0),
        DataRegime::Nonlinear => (125, NONLINEAR_EPOCHS, 2.0 * 3600.0),
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    let names = ["base", "residual", "regularized"];
    let mut sums = [0.0; 4];
    let mut eps = Vec::new();
    for seed in SEEDS {
        let s = seed.to_string();
        let data = format!("data{seed}");
        softgrasp(&["gen", "--mesh", "synth:desk", "--count", &count.to_string(), "--arity", "1", "--regime", regime.name(), "--seed", &s, "--out", &data], p)?;
        for (k, name) in names.iter().enumerate() {
            let ck = format!("{name}{seed}.ckpt");
            let report = format!("{name}{seed}.json");
            softgrasp(&["train", "--data", &data, "--regime", name, "--seed", &s, "--epochs", &epochs.to_string(), "--normalize", "true", "--calibrate-epsilon", "--out", &ck], p)?;
            softgrasp(&["eval", "--data", &data, "--ckpt", &ck, "--report", &report], p)?;
            let rows = read_json(&p.join(&report))?["rows"].clone();
            sums[k] += rows[0]["dcm"].as_f64().ok_or("missing dcm")?;
            if k == 0 {
                sums[3] += rows[1]["dcm"].as_f64().ok_or("missing dcm")?;
                eps.push(read_json(&p.join(&report))?["train_config"]["kelvinlet"]["epsilon"].as_f64().unwrap_or(f64::NAN));
            }
        }
    }
    let [base, residual, regularized, kelvinlet] = sums.map(|s| s / SEEDS.len() as f64);
    let secs = t.elapsed().as_secs_f64();
    let summary = format!(
        "mean test DCM over {} seeds: base {base:.2}, residual {residual:.2}, regularized {regularized:.2}, kelvinlet {kelvinlet:.2} (ε {eps:?}, {epochs} epochs, {:.0} min)",
        SEEDS.len(),
        secs / 60.0
    );
    ensure(residual >= base && regularized >= base, || format!("prior regime below base; {summary}"))?;
    ensure(residual.max(regularized) >= base + 0.5, || format!("no regime 0.5 above base; {summary}"))?;
    ensure(kelvinlet < base.min(residual).min(regularized), || format!("kelvinlet not below all models; {summary}"))?;
    ensure(secs <= budget, || format!("over the time budget; {summary}"))?;
    Ok(summary)
}
