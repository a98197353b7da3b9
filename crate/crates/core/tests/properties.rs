use ecrt::assembly::{assemble_eigen, assemble_poisson, load_vector, DofMap, Family, MassKind, ScalarLoad};
use ecrt::elements::{cr_eval, ecr_eval};
use ecrt::equivalence::{check_poisson_identity, EquivalenceConfig};
use ecrt::linsolve::{eig_smallest, solve_spd, SolverConfig};
use ecrt::mesh::{build_box_mesh, BoxVariant, Point, SimplexMesh};
use ecrt::problems::{solve_eigen, EigenMethod};
use ecrt::quadrature::cached_rule;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Box mesh with interior vertices jittered by up to `amount` times the box width.
fn jittered(dim: usize, m: usize, amount: f64, seed: u64) -> SimplexMesh {
    let variant = if dim == 2 { BoxVariant::CrissCross } else { BoxVariant::Diagonal };
    let mesh = build_box_mesh(dim, m, variant).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<f64> = (0..3 * mesh.n_vertices()).map(|_| rng.random_range(-amount..amount)).collect();
    let counter = std::cell::Cell::new(0usize);
    mesh.map_vertices(|x| {
        let i = counter.get();
        counter.set(i + 1);
        let mut y = *x;
        if (0..dim).all(|d| x[d] > 1e-12 && x[d] < 1.0 - 1e-12) {
            for d in 0..dim {
                y[d] += shifts[3 * i + d] / m as f64;
            }
        }
        y
    })
    .unwrap()
}

fn random_cellwise(n: usize, seed: u64) -> ScalarLoad {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarLoad::Cellwise((0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
}

fn shuffled(mesh: &SimplexMesh, seed: u64) -> SimplexMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..mesh.n_vertices()).collect();
    perm.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..mesh.n_cells()).collect();
    order.shuffle(&mut rng);
    mesh.relabeled(&perm, &order).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn jittered_meshes_keep_topology(dim in 2usize..=3, m in 1usize..=3, seed in any::<u64>()) {
        let mesh = jittered(dim, m, 0.12, seed);
        prop_assert!((mesh.total_measure() - 1.0).abs() < 1e-13);
        for f in 0..mesh.n_facets() {
            let cells: Vec<usize> = mesh.facet_cells(f).collect();
            prop_assert_eq!(cells.len() == 1, mesh.is_boundary_facet(f));
            if cells.len() == 2 {
                let s: Vec<f64> = cells
                    .iter()
                    .map(|&k| mesh.cell_facet_signs(k)[mesh.local_facet_index(k, f).unwrap()])
                    .collect();
                prop_assert_eq!(s[0], -s[1]);
            }
        }
    }

    #[test]
    fn partition_of_unity(dim in 2usize..=3, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
        let mesh = jittered(dim, 2, 0.1, seed);
        let k = (seed % mesh.n_cells() as u64) as usize;
        let g = mesh.geometry(k);
        let w = if dim == 2 { [a, b * (1.0 - a), 0.0] } else { [a, b * (1.0 - a), c * (1.0 - a) * (1.0 - b)] };
        let mut x: Point = [0.0; 3];
        let rest = 1.0 - w.iter().sum::<f64>();
        for d in 0..dim {
            x[d] = (0..dim).map(|i| w[i] * g.vertices[i][d]).sum::<f64>() + rest * g.vertices[dim][d];
        }
        prop_assert!((ecr_eval(g, &x).values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((cr_eval(g, &x).values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monomials_integrate_exactly(dim in 2usize..=3, deg in 0usize..=8, e0 in 0usize..=8, e1 in 0usize..=8) {
        // Reference simplex: int x^a y^b (z^c) = a! b! c! / (n + a + b + c)!.
        let a = e0.min(deg);
        let b = e1.min(deg - a);
        let c = if dim == 3 { deg - a - b } else { 0 };
        let fact = |n: usize| (1..=n).map(|v| v as f64).product::<f64>();
        let exact = fact(a) * fact(b) * fact(c) / fact(dim + a + b + c);
        let rule = cached_rule(dim, deg);
        let q: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32) * if dim == 3 { p[2].powi(c as i32) } else { 1.0 })
            .sum();
        prop_assert!((q - exact).abs() <= 1e-12 * exact);
    }

    #[test]
    fn ecr_jump_averages_vanish(dim in 2usize..=3, seed in any::<u64>()) {
        let mesh = jittered(dim, 2, 0.1, seed);
        let dofs = DofMap::new(&mesh, Family::Ecr, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let coef: Vec<f64> = (0..dofs.n_global()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rule = cached_rule(dim - 1, 4);
        for f in mesh.interior_facets() {
            let fg = mesh.facet_geometry_of(f);
            let mut side = vec![];
            for k in mesh.facet_cells(f) {
                let g = mesh.geometry(k);
                let cd = dofs.cell_dofs(k);
                side.push(rule.integrate_facet(fg, |x| {
                    ecr_eval(g, x).values().iter().zip(cd).map(|(v, &i)| v * coef[i]).sum()
                }));
            }
            prop_assert!((side[0] - side[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_residuals_stable_under_translation_and_relabeling(seed in any::<u64>(), tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
        // Roundoff-level residuals fluctuate; compare above a fixed floor.
        let floor = 1e-13;
        let mesh = jittered(2, 3, 0.1, seed);
        let cfg = EquivalenceConfig::default();
        let load = random_cellwise(mesh.n_cells(), seed);
        let base = check_poisson_identity(&mesh, &load, &cfg).unwrap();
        let moved = mesh.map_vertices(|x| [x[0] + tx, x[1] + ty, 0.0]).unwrap();
        let relabeled = shuffled(&mesh, seed);
        // Relabeling permutes cells, so the load must follow its cells.
        let mut order: Vec<usize> = (0..mesh.n_cells()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let ScalarLoad::Cellwise(v) = &load else { unreachable!() };
        let load_relabeled = ScalarLoad::Cellwise(order.iter().map(|&k| v[k]).collect());
        for (m, l) in [(&moved, &load), (&relabeled, &load_relabeled)] {
            let r = check_poisson_identity(m, l, &cfg).unwrap();
            prop_assert!(r.pass);
            for c in &r.checks {
                let b = base.check(&c.name).unwrap();
                prop_assert!(c.relative <= 2.0 * b.relative.max(floor), "{} {} {}", c.name, c.relative, b.relative);
            }
        }
    }

    #[test]
    fn eigenvalues_survive_relabeling(seed in any::<u64>()) {
        let mesh = jittered(2, 3, 0.1, seed);
        let cfg = SolverConfig::default();
        let other = shuffled(&mesh, seed);
        for method in [EigenMethod::Ecr, EigenMethod::Cr, EigenMethod::RtMixed] {
            let a = solve_eigen(&mesh, method, 3, &cfg).unwrap();
            let b = solve_eigen(&other, method, 3, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.value - y.value).abs() <= 1e-10 * x.value, "{method}: {} {}", x.value, y.value);
            }
        }
    }

    #[test]
    fn ecr_below_cr_with_orthonormal_vectors(dim in 2usize..=3, seed in any::<u64>()) {
        let mesh = jittered(dim, 2, 0.1, seed);
        let cfg = SolverConfig::default();
        let ecr = assemble_eigen(&mesh, Family::Ecr, MassKind::Full).unwrap();
        let cr = assemble_eigen(&mesh, Family::Cr, MassKind::Full).unwrap();
        let k = 4;
        let e = eig_smallest(&ecr.stiffness, &ecr.mass, k, &cfg).unwrap();
        let c = eig_smallest(&cr.stiffness, &cr.mass, k, &cfg).unwrap();
        for i in 0..k {
            prop_assert!(e.values[i] <= c.values[i] * (1.0 + 1e-12));
            for j in 0..k {
                let mij = ecr.mass.bilinear(&e.vectors[i], &e.vectors[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((mij - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn galerkin_residual_on_random_test_vectors() {
    let mesh = jittered(2, 6, 0.1, 11);
    let load = ScalarLoad::function(|x| (2.0 * x[0]).exp() * x[1]);
    let sys = assemble_poisson(&mesh, Family::Ecr, &load).unwrap();
    let u = solve_spd(&sys.matrix, &sys.rhs, &SolverConfig::default()).unwrap();
    let full_load = load_vector(&mesh, Family::Ecr, &load);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let v: Vec<f64> = (0..sys.dofs.n_free()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = sys.matrix.bilinear(&v, &u);
        let fv: f64 = sys.dofs.free_dofs().iter().zip(&v).map(|(&g, vi)| full_load[g] * vi).sum();
        assert!((a - fv).abs() <= 1e-10, "{a} {fv}");
    }
}

#[test]
fn assembly_is_independent_of_thread_count() {
    let mesh = jittered(3, 3, 0.1, 3);
    let load = ScalarLoad::function(|x| x[0].sin() + x[2]);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| assemble_poisson(&mesh, Family::Ecr, &load).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.rhs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.rhs.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
