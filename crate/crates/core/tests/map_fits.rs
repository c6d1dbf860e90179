use apcsim::datagen::{artificial_effects, generate_case, generate_dataset, CaseSpec, EffectSet};
use apcsim::grid::GridSpec;
use apcsim::inference::{map_fit, FitConfig};
use apcsim::models::{log_posterior, Model, ModelKind};
use apcsim::{bias_s, grade, CenteringIndexes, Grade};

fn case(id: usize) -> CaseSpec {
    CaseSpec::canonical(id, 0.1, 0.05).unwrap()
}

fn block_sums(e: &EffectSet) -> [f64; 3] {
    [e.age.iter().sum(), e.period.iter().sum(), e.cohort.iter().sum()]
}

#[test]
fn rw_case_3_is_unbiased() {
    let spec = GridSpec::default();
    let (truth, data) = generate_case(&case(3), &spec, 1234).unwrap();
    let fit = map_fit(ModelKind::RandomWalk, &data, &FitConfig::map()).unwrap();
    let s = bias_s(&fit.point, &truth, &CenteringIndexes::new(&spec));
    assert!(fit.converged);
    assert_eq!(grade(s), Grade::A, "s = {s}");
}

#[test]
fn re_case_3_is_biased_toward_flat_cohort() {
    let spec = GridSpec::default();
    let (truth, data) = generate_case(&case(3), &spec, 1234).unwrap();
    let fit = map_fit(ModelKind::RandomEffects, &data, &FitConfig::map()).unwrap();
    let s = bias_s(&fit.point, &truth, &CenteringIndexes::new(&spec));
    assert!((s + 0.099).abs() <= 0.03, "s = {s}");
    assert_eq!(grade(s), Grade::E);
}

#[test]
fn rw_recovers_noise_free_case_8() {
    let spec = GridSpec::new(10, 10, 10, 1e-12).unwrap();
    let truth = artificial_effects(&case(8), &spec);
    let data = generate_dataset(&truth, &spec, 1234).unwrap();
    let fit = map_fit(ModelKind::RandomWalk, &data, &FitConfig::map()).unwrap();
    let err = [
        (&fit.point.age, &truth.age),
        (&fit.point.period, &truth.period),
        (&fit.point.cohort, &truth.cohort),
    ]
    .iter()
    .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
    .fold(0.0, f64::max);
    assert!(err <= 0.05, "max abs error {err}");
}

#[test]
fn points_are_centered_and_deterministic() {
    let spec = GridSpec::default();
    let (_, data) = generate_case(&case(12), &spec, 99).unwrap();
    for kind in ModelKind::ALL {
        let a = map_fit(kind, &data, &FitConfig::map()).unwrap();
        let b = map_fit(kind, &data, &FitConfig::map()).unwrap();
        assert_eq!(a, b);
        for s in block_sums(&a.point) {
            assert!(s.abs() < 1e-9, "{kind:?} block sum {s}");
        }
        assert!(a.rhat.is_none());
    }
}

/// At the fitted scales the effects are a conditional mode: moving the
/// intercept or any std coordinate lowers the joint density.
#[test]
fn map_effects_are_a_conditional_mode() {
    let spec = GridSpec::default();
    let (_, data) = generate_case(&case(8), &spec, 1234).unwrap();
    for kind in ModelKind::ALL {
        let fit = map_fit(kind, &data, &FitConfig::map()).unwrap();
        let model = Model::new(kind, &spec);
        let x = fit.unconstrained.clone().expect("map keeps its optimum");
        let lp = |x: &[f64]| log_posterior(&model, &model.unpack(x).unwrap(), &data).unwrap();
        let base = lp(&x);
        let conditional = std::iter::once(0).chain(model.std_offset()..x.len());
        for d in conditional {
            for step in [-1e-3, 1e-3] {
                let mut y = x.clone();
                y[d] += step;
                assert!(lp(&y) <= base + 1e-6, "{kind:?} coordinate {d} improves");
            }
        }
    }
}

#[test]
fn noise_scale_is_recovered() {
    let spec = GridSpec::default();
    let (_, data) = generate_case(&case(5), &spec, 7).unwrap();
    let fit = map_fit(ModelKind::RandomWalk, &data, &FitConfig::map()).unwrap();
    assert!((fit.sigma_hat - 0.1).abs() < 0.01, "sigma {}", fit.sigma_hat);
}
