use std::sync::OnceLock;

use proptest::prelude::*;

use wkam::geometry::{Lagrangian, ModelSpace, Potential, TrigTerm};
use wkam::grid::{Grid, GridFunction};
use wkam::semigroup::{lo_step, lo_step_discounted};
use wkam::simplex::{LinearProgram, SimplexOptions};
use wkam::tonelli::{KernelOptions, KernelTable};

fn bump_lagrangian() -> Lagrangian {
    let space = ModelSpace::flat_torus(1).unwrap();
    let terms = vec![
        TrigTerm { wave: vec![0], amplitude: 0.5, phase: 0.0 },
        TrigTerm { wave: vec![1], amplitude: 0.5, phase: 0.0 },
    ];
    Lagrangian::new(Potential::new(space, terms).unwrap(), &[]).unwrap()
}

fn kernel(lambda: f64) -> &'static KernelTable {
    static PLAIN: OnceLock<KernelTable> = OnceLock::new();
    static DISCOUNTED: OnceLock<KernelTable> = OnceLock::new();
    let cell = if lambda == 0.0 { &PLAIN } else { &DISCOUNTED };
    cell.get_or_init(|| {
        let lag = bump_lagrangian();
        let grid = Grid::uniform(lag.space(), 16).unwrap();
        KernelTable::build(&lag, &grid, 0.1, lambda, &KernelOptions::default()).unwrap()
    })
}

fn field(values: &[f64]) -> GridFunction {
    GridFunction::new(kernel(0.0).grid().clone(), values.to_vec()).unwrap()
}

fn sup(a: &GridFunction, b: &GridFunction) -> f64 {
    a.sup_distance(b).unwrap()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, 16)
}

fn spaces() -> impl Strategy<Value = ModelSpace> {
    prop_oneof![
        (1usize..=3).prop_map(|d| ModelSpace::flat_torus(d).unwrap()),
        Just(ModelSpace::heisenberg()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonicalize_is_idempotent_and_lands_in_the_unit_cube(
        space in spaces(),
        p in prop::array::uniform3(-5.0..5.0f64),
    ) {
        let q = space.canonicalize(&p).unwrap();
        prop_assert!(q[..space.dim()].iter().all(|v| (0.0..1.0).contains(v)));
        prop_assert_eq!(space.canonicalize(&q).unwrap(), q);
    }

    #[test]
    fn lattice_shifts_do_not_change_the_class(
        space in spaces(),
        p in prop::array::uniform3(0.0..1.0f64),
        g in prop::array::uniform3(-3i64..=3),
    ) {
        let a = space.canonicalize(&p).unwrap();
        let b = space.canonicalize(&space.shift(&p, &g)).unwrap();
        prop_assert!(space.quotient_chart_distance(&a, &b) < 1e-9, "{a:?} vs {b:?}");
    }

    #[test]
    fn heisenberg_step_is_reversible(
        p in prop::array::uniform3(-2.0..2.0f64),
        u in prop::array::uniform3(-3.0..3.0f64),
        dt in 0.0..1.0f64,
    ) {
        let space = ModelSpace::heisenberg();
        let u = [u[0], u[1], 0.0];
        let back = space.step(&space.step(&p, &u, dt), &[-u[0], -u[1], 0.0], dt);
        for i in 0..3 {
            prop_assert!((back[i] - p[i]).abs() < 1e-12);
        }
        let rk = space.rk4_step(&p, &u, dt);
        let exact = space.step(&p, &u, dt);
        for i in 0..3 {
            prop_assert!((rk[i] - exact[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lax_oleinik_step_is_monotone(a in values(), bump in prop::collection::vec(0.0..1.0f64, 16)) {
        let u = field(&a);
        let v = field(&a.iter().zip(&bump).map(|(x, d)| x + d).collect::<Vec<_>>());
        let (tu, tv) = (lo_step(kernel(0.0), &u).unwrap(), lo_step(kernel(0.0), &v).unwrap());
        prop_assert!(tu.values.iter().zip(&tv.values).all(|(x, y)| x <= y));
    }

    #[test]
    fn lax_oleinik_step_commutes_with_constants_and_is_non_expansive(
        a in values(), b in values(), shift in -3.0..3.0f64,
    ) {
        let k = kernel(0.0);
        let (u, v) = (field(&a), field(&b));
        let tu = lo_step(k, &u).unwrap();
        let shifted = lo_step(k, &u.shifted(shift)).unwrap();
        prop_assert!(sup(&shifted, &tu.shifted(shift)) < 1e-12);
        let tv = lo_step(k, &v).unwrap();
        prop_assert!(sup(&tu, &tv) <= sup(&u, &v) + 1e-12);
    }

    #[test]
    fn discounted_step_contracts(a in values(), b in values()) {
        let k = kernel(0.5);
        let (u, v) = (field(&a), field(&b));
        let (tu, tv) = (lo_step_discounted(k, &u).unwrap(), lo_step_discounted(k, &v).unwrap());
        let factor = (-0.5f64 * 0.1).exp();
        prop_assert!(sup(&tu, &tv) <= factor * sup(&u, &v) + 1e-12);
    }

    #[test]
    fn grid_function_csv_round_trips(a in values()) {
        let u = field(&a);
        let back = GridFunction::from_csv(u.grid.clone(), &u.to_csv()).unwrap();
        prop_assert_eq!(back, u);
    }

    #[test]
    fn simplex_beats_every_feasible_point(
        rows in 1usize..5,
        seed_cols in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 8),
        cost in prop::collection::vec(0.1..2.0f64, 8),
        x0 in prop::collection::vec(0.0..1.0f64, 8),
    ) {
        let columns: Vec<Vec<f64>> = seed_cols.iter().map(|c| c[..rows].to_vec()).collect();
        let rhs: Vec<f64> = (0..rows).map(|i| columns.iter().zip(&x0).map(|(c, x)| c[i] * x).sum()).collect();
        let lp = LinearProgram { cost: cost.clone(), columns: columns.clone(), rhs: rhs.clone() };
        let sol = lp.solve(&SimplexOptions::default()).unwrap();
        let feasible_value: f64 = cost.iter().zip(&x0).map(|(c, x)| c * x).sum();
        prop_assert!(sol.objective <= feasible_value + 1e-9);
        prop_assert!(sol.x.iter().all(|v| *v >= 0.0));
        for i in 0..rows {
            let ax: f64 = columns.iter().zip(&sol.x).map(|(c, x)| c[i] * x).sum();
            prop_assert!((ax - rhs[i]).abs() < 1e-7, "row {i}: {ax} vs {}", rhs[i]);
        }
        prop_assert!(sol.min_reduced_cost >= -1e-9);
    }
}

#[test]
fn kernel_csv_round_trips() {
    let k = kernel(0.0);
    let back = KernelTable::from_csv(k.grid().space(), &k.to_csv().unwrap()).unwrap();
    assert_eq!(&back, k);
}

#[test]
fn random_fields_depend_only_on_the_seed() {
    let grid = Grid::uniform(ModelSpace::flat_torus(2).unwrap(), 8).unwrap();
    let a = GridFunction::random_trig(grid.clone(), 3, 1.0, 11);
    let b = GridFunction::random_trig(grid.clone(), 3, 1.0, 11);
    let c = GridFunction::random_trig(grid, 3, 1.0, 12);
    assert_eq!(a, b);
    assert_ne!(a, c);
}
