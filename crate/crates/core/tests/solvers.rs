use ndarray::{array, Array1};
use odeslab::oracle::{
    exact_substep, gaussian_ddim_kappa, gaussian_exact_kappa, gaussian_solver2_kappa, OracleOptions,
};
use odeslab::schedule::build_grid;
use odeslab::solvers::{
    ddim_step, forward_value_ideal_step, forward_value_step, ode_solver_2_step, ode_solver_3_step, ode_solver_p_step,
    PicardOptions, StepHistory,
};
use odeslab::{
    Error, GridKind, GridSpec, IsotropicGaussianModel, Lookahead, ModelSpec, NoiseLevel, NoiseSchedule, PolyLambdaModel,
    Predictor, SamplerSpec, TimeGrid,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn norm(x: &Array1<f64>) -> f64 {
    x.dot(x).sqrt()
}

fn rel(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    norm(&(a - b)) / norm(b)
}

fn vp() -> NoiseSchedule {
    NoiseSchedule::vp_linear(0.1, 20.0).unwrap()
}

fn ve_grid(m: usize) -> TimeGrid {
    build_grid(NoiseSchedule::Ve, &GridSpec::uniform_lambda(m, 10.0, 1e-3)).unwrap()
}

fn gauss(gamma: f64) -> IsotropicGaussianModel {
    IsotropicGaussianModel::new(gamma, 4).unwrap()
}

fn mixture() -> odeslab::Model {
    ModelSpec::symmetric_pair(4).build().unwrap()
}

fn randn(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// ε(x, t) = Σ c_k λ^k, independent of x.
fn poly(coeffs: Vec<Vec<f64>>) -> PolyLambdaModel {
    PolyLambdaModel::new(coeffs).unwrap()
}

#[test]
fn ddim_with_zero_noise_rescales() {
    let model = poly(vec![vec![0.0; 4]]);
    let grid = TimeGrid::from_times(vp(), &[0.8, 0.3]).unwrap();
    let x = array![1.0, -2.0, 0.5, 4.0];
    let y = ddim_step(&x, 1, &grid, &model).unwrap();
    let want = &x * (grid.alphas[1] / grid.alphas[0]);
    assert!(rel(&y, &want) <= 1e-15);
}

#[test]
fn ddim_gaussian_single_step() {
    let grid = TimeGrid::from_times(NoiseSchedule::Ve, &[1.0, (-0.1f64).exp()]).unwrap();
    let x = array![1.0, 0.0, 0.0, 0.0];
    let y = ddim_step(&x, 1, &grid, &gauss(1.0)).unwrap();
    // ε = x/2 at t = 1; σ_1 − σ_0 = e^{−0.1} − 1.
    let want = 1.0 - (1.0 - (-0.1f64).exp()) / 2.0;
    assert!((y[0] - want).abs() < 1e-15);
    assert!((y[0] - 0.952419).abs() < 5e-7);
    assert_eq!(&y.as_slice().unwrap()[1..], &[0.0, 0.0, 0.0]);
}

#[test]
fn ddim_step_size_is_first_order_in_delta() {
    let model = mixture();
    let x = array![0.7, -0.3, 1.1, 0.2];
    let mut prev = None;
    for k in 2..6 {
        let d = 10f64.powi(-k);
        let l0 = 0.3f64;
        let grid = TimeGrid::from_times(NoiseSchedule::Ve, &[(-l0).exp(), (-(l0 + d)).exp()]).unwrap();
        let step = norm(&(ddim_step(&x, 1, &grid, &model).unwrap() - &x));
        if let Some(p) = prev {
            let ratio: f64 = p / step;
            assert!((ratio - 10.0).abs() < 0.2, "ratio {ratio}");
        }
        prev = Some(step);
    }
}

#[test]
fn order_one_is_bitwise_ddim() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = mixture();
    for case in 0..100 {
        let schedule = if case % 2 == 0 { NoiseSchedule::Ve } else { vp() };
        let hi = schedule.domain().1.min(50.0);
        let t0 = hi * (0.3 + 0.7 * rng.random::<f64>());
        let t1 = t0 * rng.random::<f64>();
        let grid = TimeGrid::from_times(schedule, &[t0, t1]).unwrap();
        let x = randn(&mut rng, 4) * (1.0 + t0);
        let (y, _) = ode_solver_p_step(&x, &StepHistory::new(1), 1, &grid, &model, 1).unwrap();
        assert_eq!(y, ddim_step(&x, 1, &grid, &model).unwrap());
    }
}

fn history_at(lams: &[f64], eps: &[Array1<f64>]) -> StepHistory {
    let mut h = StepHistory::new(lams.len());
    for (l, e) in lams.iter().zip(eps) {
        h.push(*l, e.clone()).unwrap();
    }
    h
}

#[test]
fn equal_history_second_order_is_ddim() {
    let model = gauss(1.0);
    let grid = TimeGrid::from_times(vp(), &[0.7, 0.5]).unwrap();
    let x = array![0.3, 1.0, -1.0, 2.0];
    let eps = model.eval_noise(&x, &grid.level(0)).unwrap();
    let h = history_at(&[grid.lambdas[0] - 0.4], &[eps]);
    let (y, _) = ode_solver_2_step(&x, &h, 1, &grid, &model).unwrap();
    assert_eq!(y, ddim_step(&x, 1, &grid, &model).unwrap());
}

#[test]
fn detail_forms_match_general_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = mixture();
    let mut worst = 0.0f64;
    for case in 0..100 {
        let schedule = if case % 2 == 0 { NoiseSchedule::Ve } else { vp() };
        let hi = schedule.domain().1.min(20.0);
        let t0 = hi * (0.2 + 0.6 * rng.random::<f64>());
        let t1 = t0 * (0.2 + 0.7 * rng.random::<f64>());
        let grid = TimeGrid::from_times(schedule, &[t0, t1]).unwrap();
        let l0 = grid.lambdas[0];
        let gaps = [0.05 + rng.random::<f64>(), 0.05 + rng.random::<f64>()];
        let lams = [l0 - gaps[0] - gaps[1], l0 - gaps[0]];
        let eps = [randn(&mut rng, 4), randn(&mut rng, 4)];
        let h = history_at(&lams, &eps);
        let x = randn(&mut rng, 4) * (1.0 + t0);
        let (a2, _) = ode_solver_2_step(&x, &h, 1, &grid, &model).unwrap();
        let (b2, _) = ode_solver_p_step(&x, &h, 1, &grid, &model, 2).unwrap();
        let (a3, _) = ode_solver_3_step(&x, &h, 1, &grid, &model).unwrap();
        let (b3, _) = ode_solver_p_step(&x, &h, 1, &grid, &model, 3).unwrap();
        worst = worst.max(rel(&a2, &b2)).max(rel(&a3, &b3));
    }
    assert!(worst <= 1e-13, "{worst:e}");
}

#[test]
fn constant_noise_collapses_multistep_to_ddim() {
    let model = poly(vec![vec![0.5, -0.25, 1.0, 0.0]]);
    let grid = build_grid(vp(), &GridSpec::uniform_lambda(12, 0.9, 0.01)).unwrap();
    let x0 = array![1.0, 2.0, -3.0, 0.1];
    let base = odeslab::run_sampler(&SamplerSpec::ddim(), &grid, &model, &x0).unwrap();
    for s in [SamplerSpec::ode_solver(2), SamplerSpec::ode_solver(3), SamplerSpec::ode_solver(4), SamplerSpec::unipc(2)] {
        let t = odeslab::run_sampler(&s, &grid, &model, &x0).unwrap();
        for (a, b) in t.states.iter().zip(&base.states) {
            assert!(rel(a, b) <= 1e-13, "{}", s.label());
        }
    }
}

#[test]
fn second_order_integrates_linear_noise_exactly() {
    // ε(λ) = c0 + c1 λ; x/α changes by −∫ e^{−λ} ε dλ.
    let (c0, c1) = (0.4, -1.3);
    let model = poly(vec![vec![c0, 0.2, 0.0, 1.0], vec![c1, 0.5, -0.7, 0.0]]);
    let grid = TimeGrid::from_times(vp(), &[0.6, 0.35]).unwrap();
    let x = array![0.2, -0.1, 0.3, 1.5];
    let l_hist = grid.lambdas[0] - 0.3;
    let h = history_at(&[l_hist], &[model.eval_at_lambda(l_hist)]);
    let (y, _) = ode_solver_2_step(&x, &h, 1, &grid, &model).unwrap();
    let anti = |l: f64, a: f64, b: f64| -(-l).exp() * (a + b + b * l);
    let (l0, l1) = (grid.lambdas[0], grid.lambdas[1]);
    let coeffs = model.coeffs();
    let want = Array1::from_iter((0..4).map(|j| {
        let (a, b) = (coeffs[0][j], coeffs[1][j]);
        grid.alphas[1] * (x[j] / grid.alphas[0] - (anti(l1, a, b) - anti(l0, a, b)))
    }));
    assert!(rel(&y, &want) <= 1e-12, "{y} vs {want}");
}

#[test]
fn unipc_is_third_order_on_gaussian() {
    let model = gauss(1.0);
    let x0 = array![1.0, -0.5, 0.25, 2.0];
    let err = |m: usize| {
        let g = ve_grid(m);
        let t = odeslab::run_sampler(&SamplerSpec::unipc(2), &g, &model, &x0).unwrap();
        let k = gaussian_exact_kappa(1.0, &g).unwrap().last();
        norm(&(t.final_state() - &(&x0 * k)))
    };
    let ratio = err(16) / err(32);
    assert!((6.0..=11.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn unipc_first_step_is_ddim() {
    let model = mixture();
    let g = ve_grid(10);
    let x0 = array![3.0, 1.0, -2.0, 0.5];
    let t = odeslab::run_sampler(&SamplerSpec::unipc(2), &g, &model, &x0).unwrap();
    let d = odeslab::run_sampler(&SamplerSpec::ddim(), &g, &model, &x0).unwrap();
    assert_eq!(t.states[1], d.states[1]);
}

/// μ(x, t) ≡ c.
struct ConstantData(Array1<f64>);

impl Predictor for ConstantData {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval_noise(&self, x: &Array1<f64>, level: &NoiseLevel) -> odeslab::Result<Array1<f64>> {
        odeslab::noise_from_data(x, level, &self.0)
    }

    fn eval_data(&self, _x: &Array1<f64>, _level: &NoiseLevel) -> odeslab::Result<Array1<f64>> {
        Ok(self.0.clone())
    }
}

#[test]
fn ideal_step_with_constant_data_prediction() {
    let c = array![0.5, -1.0, 2.0, 0.0];
    let model = ConstantData(c.clone());
    let grid = TimeGrid::from_times(vp(), &[0.9, 0.4]).unwrap();
    let x = array![1.0, 1.0, -1.0, 3.0];
    let r = forward_value_ideal_step(&x, 1, &grid, &model, &PicardOptions::default()).unwrap();
    let (s0, s1, a0, a1) = (grid.sigmas[0], grid.sigmas[1], grid.alphas[0], grid.alphas[1]);
    let want = &x * (s1 / s0) + &c * (a1 - s1 * a0 / s0);
    assert!(rel(&r.x, &want) <= 1e-14);
    assert!(r.iters <= 2);
}

#[test]
fn ideal_step_gaussian_closed_form_and_picard_agree() {
    let model = gauss(1.0);
    let grid = TimeGrid::from_times(NoiseSchedule::Ve, &[2.0, 1.5]).unwrap();
    let x = array![1.0, 2.0, 3.0, 4.0];
    let (s0, s1) = (grid.sigmas[0], grid.sigmas[1]);
    let want = &x * ((s1 / s0) / (1.0 - (1.0 - s1 / s0) * 1.0 / (1.0 + s1 * s1)));
    let closed = forward_value_ideal_step(&x, 1, &grid, &model, &PicardOptions::default()).unwrap();
    assert_eq!(closed.iters, 0);
    assert!(rel(&closed.x, &want) <= 1e-14);
    let opts = PicardOptions {
        closed_form_linear: false,
        ..PicardOptions::default()
    };
    let picard = forward_value_ideal_step(&x, 1, &grid, &model, &opts).unwrap();
    assert!(picard.iters > 0);
    assert!(rel(&picard.x, &want) <= 1e-12);
}

fn terminal_grid(schedule: NoiseSchedule, m: usize) -> TimeGrid {
    let t0 = schedule.domain().1.min(5.0);
    let spec = GridSpec {
        kind: GridKind::UniformTime,
        ..GridSpec::uniform_lambda(m, t0, 0.0)
    };
    build_grid(schedule, &spec).unwrap()
}

#[test]
fn terminal_ideal_step() {
    let grid = terminal_grid(NoiseSchedule::Ve, 4);
    let x = array![0.5, 0.5, -0.5, 1.0];
    let err = forward_value_ideal_step(&x, 4, &grid, &gauss(1.0), &PicardOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
    let model = mixture();
    let r = forward_value_ideal_step(&x, 4, &grid, &model, &PicardOptions::default()).unwrap();
    let mu = model.eval_data(&r.x, &grid.level(4)).unwrap();
    assert!(rel(&(&mu * grid.alphas[4]), &r.x) <= 1e-12);
}

#[test]
fn terminal_forward_value_step_returns_data_prediction() {
    let model = mixture();
    for schedule in [NoiseSchedule::Ve, vp()] {
        let grid = terminal_grid(schedule, 3);
        let x = array![0.1, 0.9, -0.4, 0.2];
        let mut h = StepHistory::new(2);
        let opts = OracleOptions::default();
        let step = forward_value_step(&x, 3, &grid, &model, &model, Lookahead::Ddim, &mut h, &opts).unwrap();
        assert_eq!(step.x, model.eval_data(&step.x_hat, &grid.level(3)).unwrap());
    }
}

#[test]
fn oracle_lookahead_gap_is_second_order_per_step() {
    let model = gauss(1.0);
    let x = array![1.0, -1.0, 0.5, 0.0];
    let gap = |d: f64| {
        let grid = TimeGrid::from_times(NoiseSchedule::Ve, &[1.0, (-d).exp()]).unwrap();
        let mut h = StepHistory::new(2);
        let opts = OracleOptions::default();
        let a = forward_value_step(&x, 1, &grid, &model, &model, Lookahead::Oracle, &mut h, &opts).unwrap();
        let b = forward_value_ideal_step(&x, 1, &grid, &model, &PicardOptions::default()).unwrap();
        norm(&(a.x - b.x))
    };
    // At least O(δ²); the c_2 = O(δ) prefactor makes it O(δ³) here.
    for d in [0.1, 0.05, 0.025] {
        let r = gap(d) / gap(d / 2.0);
        assert!((3.5..=8.5).contains(&r), "ratio {r} at δ={d}");
    }
}

#[test]
fn ddim_lookahead_matches_scalar_composition() {
    let gamma = 1.0f64;
    let model = gauss(gamma);
    let grid = TimeGrid::from_times(vp(), &[0.8, 0.6]).unwrap();
    let x = array![2.0, 0.0, -1.0, 1.0];
    let mut h = StepHistory::new(2);
    let step = forward_value_step(&x, 1, &grid, &model, &model, Lookahead::Ddim, &mut h, &OracleOptions::default())
        .unwrap();
    let (a0, a1, s0, s1) = (grid.alphas[0], grid.alphas[1], grid.sigmas[0], grid.sigmas[1]);
    let (r0, r1) = (s0 / a0, s1 / a1);
    let k_hat = (a1 / a0) * (1.0 - r0 * (r0 - r1) / (gamma * gamma + r0 * r0));
    let gain = a1 * gamma * gamma / (a1 * a1 * gamma * gamma + s1 * s1);
    let factor = s1 / s0 + (a1 - s1 * a0 / s0) * gain * k_hat;
    assert!(rel(&step.x, &(&x * factor)) <= 1e-13);
}

#[test]
fn single_step_warmup_and_call_counts() {
    let model = mixture();
    let g = ve_grid(1);
    let x0 = array![1.0, 2.0, 3.0, 4.0];
    let d = odeslab::run_sampler(&SamplerSpec::ddim(), &g, &model, &x0).unwrap();
    let p3 = odeslab::run_sampler(&SamplerSpec::ode_solver(3), &g, &model, &x0).unwrap();
    assert_eq!(d.states, p3.states);

    let g = ve_grid(17);
    let d = odeslab::run_sampler(&SamplerSpec::ddim(), &g, &model, &x0).unwrap();
    assert_eq!(d.model_calls, 17);
    for l in [Lookahead::Ddim, Lookahead::DpmSolver2] {
        let f = odeslab::run_sampler(&SamplerSpec::forward_value(l), &g, &model, &x0).unwrap();
        assert_eq!(f.model_calls, 34);
    }
    let f = odeslab::run_sampler(&SamplerSpec::forward_value(Lookahead::Oracle), &g, &model, &x0).unwrap();
    assert_eq!(f.model_calls, 17);
}

#[test]
fn vector_runs_follow_scalar_recursions() {
    let x0 = array![1.0, -2.0, 0.5, 0.25];
    for gamma in [0.0, 1.0] {
        let model = gauss(gamma);
        for m in [20usize, 40] {
            let g = ve_grid(m);
            let d = odeslab::run_sampler(&SamplerSpec::ddim(), &g, &model, &x0).unwrap();
            let kd = gaussian_ddim_kappa(gamma, &g).unwrap();
            for (x, k) in d.states.iter().zip(&kd.kappas) {
                assert!(norm(&(x - &(&x0 * *k))) <= 1e-12 * norm(&x0));
                assert!((x.dot(&x0) / x0.dot(&x0) - k).abs() <= 1e-11);
            }
            let s = odeslab::run_sampler(&SamplerSpec::ode_solver(2), &g, &model, &x0).unwrap();
            let ks = gaussian_solver2_kappa(gamma, &g).unwrap();
            assert_eq!(ks.kappas[1], kd.kappas[1]);
            for (x, k) in s.states.iter().zip(&ks.kappas) {
                assert!(norm(&(x - &(&x0 * *k))) <= 1e-10 * norm(&x0));
            }
        }
    }
}

#[test]
fn exact_substep_gaussian_and_small_step_gap() {
    let model = gauss(0.8);
    let grid = ve_grid(5);
    let x = array![1.0, 1.0, 0.0, -1.0];
    let y = exact_substep(&model, &x, &grid.level(2), &grid.level(3), &grid.schedule, &OracleOptions::default()).unwrap();
    let k = odeslab::oracle::kappa_star(0.8, grid.lambdas[2], grid.lambdas[3], 1.0, 1.0).unwrap();
    assert!(rel(&y, &(&x * k)) <= 1e-15);

    let mix = mixture();
    let opts = OracleOptions::default();
    let gap = |d: f64| {
        let g = TimeGrid::from_times(NoiseSchedule::Ve, &[1.0, (-d).exp()]).unwrap();
        let e = exact_substep(&mix, &x, &g.level(0), &g.level(1), &g.schedule, &opts).unwrap();
        norm(&(e - ddim_step(&x, 1, &g, &mix).unwrap()))
    };
    let r = gap(0.02) / gap(0.01);
    assert!((3.6..=4.4).contains(&r), "ratio {r}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prop_ddim_p1_identity(t0 in 0.05f64..0.99, frac in 0.01f64..0.99, xs in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let grid = TimeGrid::from_times(vp(), &[t0, t0 * frac]).unwrap();
        let x = Array1::from(xs);
        let model = gauss(0.7);
        let (y, _) = ode_solver_p_step(&x, &StepHistory::new(1), 1, &grid, &model, 1).unwrap();
        prop_assert_eq!(y, ddim_step(&x, 1, &grid, &model).unwrap());
    }

    #[test]
    fn prop_gaussian_step_stays_colinear(t0 in 0.5f64..50.0, frac in 0.01f64..0.99, gamma in 0.1f64..3.0) {
        let grid = TimeGrid::from_times(NoiseSchedule::Ve, &[t0, t0 * frac]).unwrap();
        let x = array![1.0, -2.0, 0.5, 3.0];
        let y = ddim_step(&x, 1, &grid, &gauss(gamma)).unwrap();
        let k = y.dot(&x) / x.dot(&x);
        prop_assert!(norm(&(&y - &(&x * k))) <= 1e-13 * norm(&y).max(1e-300));
    }
}
