use wkam::geometry::{Lagrangian, ModelSpace, Potential, TrigTerm};
use wkam::grid::Grid;
use wkam::mather::{build_lp, solve_lp, PhaseGrid, TestBasis};
use wkam::semigroup::solve_critical;
use wkam::tonelli::{KernelOptions, KernelTable};

fn term(wave: Vec<i64>, amplitude: f64, phase: f64) -> TrigTerm {
    TrigTerm { wave, amplitude, phase }
}

#[test]
fn lp_value_grows_with_the_test_basis() {
    let s = ModelSpace::flat_torus(2).unwrap();
    let pot = Potential::new(s, vec![term(vec![1, 0], 0.4, 0.0), term(vec![1, 2], 0.3, 0.7), term(vec![0, 3], 0.2, 0.2)]).unwrap();
    let lag = Lagrangian::new(pot, &[0.6, -0.3]).unwrap();
    let phase = PhaseGrid::new(Grid::uniform(s, 10).unwrap(), 2.0, 7).unwrap();
    for target in [None, Some([0.37, 0.21])] {
        let mut last = f64::NEG_INFINITY;
        for k in 1..=3 {
            let basis = TestBasis::for_space(&phase.grid, k).unwrap();
            let inst = build_lp(&lag, &phase, &basis, target.as_ref().map(|h| &h[..])).unwrap();
            let sol = solve_lp(&inst, &phase).unwrap();
            eprintln!("rotation {target:?}, k_max {k}: lp value {:.9}", sol.objective);
            assert!(sol.objective >= last - 1e-9, "k_max {k}: {} < {last}", sol.objective);
            last = sol.objective;
        }
    }
}

#[test]
fn critical_solution_is_stable_under_a_wider_kernel_radius() {
    let s = ModelSpace::flat_torus(1).unwrap();
    let pot = Potential::new(s, vec![term(vec![0], 0.5, 0.0), term(vec![1], 0.5, 0.0)]).unwrap();
    let lag = Lagrangian::new(pot, &[]).unwrap();
    let grid = Grid::uniform(s, 64).unwrap();
    let solve = |scale: f64| {
        let opts = KernelOptions { radius_scale: scale, ..KernelOptions::default() };
        let k = KernelTable::build(&lag, &grid, 0.1, 0.0, &opts).unwrap();
        solve_critical(&k, 1e-11, 100_000, 0).unwrap()
    };
    let (a, b) = (solve(1.0), solve(1.5));
    let dc = (a.c_estimate - b.c_estimate).abs();
    let du = a.u.sup_distance(&b.u).unwrap();
    eprintln!("radius x1.5: |dc| = {dc:.3e}, sup |du| = {du:.3e}");
    assert!(dc < 1e-6);
    assert!(du < 1e-3);
}
