use gldof::datagen::{generate, ScenarioSpec};
use gldof::problem_file::ProblemFile;
use gldof::risk::{default_grid, lambda_path, Criterion, PathOptions};
use gldof::solver::{kkt_check, lambda_max, solve, SolverOptions};
use gldof::{dof_estimate, Error};

#[test]
fn generate_round_trip_path_and_select() {
    let spec = ScenarioSpec::uniform(40, 6, 3, 2, 0.5, 11);
    let s = generate(&spec).unwrap();
    let y = s.observe(11, 0);
    let lmax = lambda_max(&s.design, &s.partition, &y);

    let text = serde_json::to_string(&ProblemFile::from_scenario(&s, &y, Some(lmax / 2.0))).unwrap();
    let file = ProblemFile::from_json(&text).unwrap();
    let problem = file.problem(None).unwrap();
    assert_eq!(problem.y(), &y);
    assert_eq!(problem.design().matrix(), s.design.matrix());

    let sol = solve(&problem, &SolverOptions::default()).unwrap();
    assert!(kkt_check(&problem, sol.beta.values(), 1e-8).is_optimal);
    let report = dof_estimate(&problem, &sol).unwrap();
    assert!(report.divergence >= 0.0 && report.divergence <= sol.support.active_dim() as f64 + 1e-9);

    let (design, partition, y) = file.parts().unwrap();
    let grid = default_grid(lmax, 20, 2.0);
    let opts = PathOptions {
        sigma: file.sigma,
        ..PathOptions::default()
    };
    let warm = lambda_path(&design, &partition, &y, &grid, &opts).unwrap();
    let cold = lambda_path(&design, &partition, &y, &grid, &PathOptions { parallel: true, ..opts }).unwrap();
    assert_eq!(warm.records.len(), 20);
    assert_eq!(warm.records[0].dof, 0.0);
    for (a, b) in warm.records.iter().zip(&cold.records) {
        assert_eq!(a.lambda, b.lambda);
        assert_eq!(a.active_dim, b.active_dim);
        assert!((a.dof - b.dof).abs() < 1e-6);
    }
    for c in [Criterion::Sure, Criterion::Gcv, Criterion::Cp, Criterion::Aic] {
        let k = warm.select(c).unwrap();
        assert!(k > 0, "{c:?} picked λ_max");
    }
    // Cp and AIC differ from SURE/σ² by constants, so they select the same λ
    assert_eq!(warm.select(Criterion::Sure), warm.select(Criterion::Cp));
    assert_eq!(warm.select(Criterion::Cp), warm.select(Criterion::Aic));
}

#[test]
fn file_without_lambda_needs_one() {
    let s = generate(&ScenarioSpec::uniform(20, 5, 2, 2, 0.5, 1)).unwrap();
    let y = s.observe(1, 0);
    let file = ProblemFile::from_scenario(&s, &y, None);
    assert!(matches!(file.problem(None), Err(Error::Format(_))));
    assert_eq!(file.problem(Some(0.3)).unwrap().lambda(), 0.3);
}
