use ezdit_core::autodiff::{Rng, Tensor};
use ezdit_core::diffusion::oracle::{GaussianOracle, PointMassOracle};
use ezdit_core::diffusion::{
    add_noise, cfg_combine, cfg_rescale, make_schedule, sample, sample_seeds, BaseSchedule, GuidanceConfig,
    NoiseSchedule, SamplerPlan, VelocityModel,
};
use ezdit_core::parallel::Exec;
use ezdit_core::{Error, Result};
use proptest::prelude::*;

fn sched() -> NoiseSchedule {
    make_schedule(1000, BaseSchedule::ScaledLinear).unwrap()
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape, rng.normal_vec(shape.iter().product())).unwrap()
}

#[test]
fn forward_process_energy_matches_expectation() {
    let s = sched();
    let mut rng = Rng::new(17);
    let x0 = randn(&mut rng, &[16, 8]);
    let n = x0.len() as f64;
    for t in [0usize, 200, 500, 900] {
        let (a, g) = (s.alphas()[t], s.sigmas()[t]);
        let expected = x0.dot(&x0) * a * a + n * g * g;
        let mean: f64 = (0..1000)
            .map(|_| {
                let eps = randn(&mut rng, &[16, 8]);
                let xt = add_noise(&s, &x0, &eps, t).unwrap();
                xt.dot(&xt)
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean - expected).abs() / expected < 0.05, "t={t}");
    }
}

#[test]
fn fifty_step_trajectory_recovers_point_mass() {
    let s = sched();
    let mut rng = Rng::new(3);
    let oracle = PointMassOracle {
        schedule: s.clone(),
        x0: randn(&mut rng, &[4, 12]),
    };
    let plan = SamplerPlan::trailing(1000, 50).unwrap();
    let out = sample(&oracle, &[], (4, 12), &s, &plan, &GuidanceConfig::new(1.0, 0.0), &mut rng).unwrap();
    assert!(out.max_abs_diff(&oracle.x0) < 1e-8);
}

#[test]
fn more_steps_track_the_flow_more_closely() {
    let s = sched();
    for (seed, std) in [(0u64, 0.5), (1, 1.0), (2, 2.0)] {
        let oracle = GaussianOracle {
            schedule: s.clone(),
            mean: 0.3,
            std,
        };
        let noise = randn(&mut Rng::new(seed), &[8, 16]);
        let target = oracle.flow_endpoint(&noise);
        let errors: Vec<f64> = [10, 20, 30, 40, 50]
            .iter()
            .map(|&n| {
                let plan = SamplerPlan::trailing(1000, n).unwrap();
                let out = sample(&oracle, &[], (8, 16), &s, &plan, &GuidanceConfig::new(1.0, 0.0), &mut Rng::new(seed))
                    .unwrap();
                out.zip_map(&target, "err", |a, b| a - b).unwrap().norm()
            })
            .collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "std={std}: {errors:?}");
    }
}

/// Velocity that ignores `x_t` and returns a text-dependent constant.
struct TextShift;

impl VelocityModel for TextShift {
    fn velocity(&self, x_t: &Tensor, _t: usize, text: &[usize]) -> Result<Tensor> {
        let c = text.first().map_or(0.0, |&k| 0.1 * (k as f64 + 1.0));
        Ok(x_t.map(|x| 0.5 * x + c))
    }
}

#[test]
fn unit_guidance_is_bitwise_unguided() {
    let s = sched();
    let plan = SamplerPlan::trailing(1000, 20).unwrap();
    let run = |w: f64, phi: f64| {
        sample(&TextShift, &[2], (3, 7), &s, &plan, &GuidanceConfig::new(w, phi), &mut Rng::new(9)).unwrap()
    };
    let base = run(1.0, 0.0);
    assert!(base.bit_eq(&run(1.0, 0.75)));
    assert!(base.bit_eq(&run(1.0, 0.0)));
    assert!(!base.bit_eq(&run(3.0, 0.0)));
}

#[test]
fn seeds_are_reproducible_in_both_execution_modes() {
    let s = sched();
    let plan = SamplerPlan::trailing(1000, 10).unwrap();
    let g = GuidanceConfig::new(3.0, 0.5);
    let seeds: Vec<u64> = (0..6).collect();
    let a = sample_seeds(&TextShift, &[1], (2, 5), &s, &plan, &g, &seeds, Exec::Sequential).unwrap();
    let b = sample_seeds(&TextShift, &[1], (2, 5), &s, &plan, &g, &seeds, Exec::Parallel).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.bit_eq(y));
    }
    assert!(!a[0].bit_eq(&a[1]));
}

struct Exploding;

impl VelocityModel for Exploding {
    fn velocity(&self, x_t: &Tensor, t: usize, _text: &[usize]) -> Result<Tensor> {
        Ok(x_t.map(|_| if t < 900 { f64::MAX } else { 0.0 }))
    }
}

#[test]
fn divergence_reports_the_step() {
    let s = sched();
    let plan = SamplerPlan::trailing(1000, 10).unwrap();
    let r = sample(&Exploding, &[], (2, 2), &s, &plan, &GuidanceConfig::new(1.0, 0.0), &mut Rng::new(0));
    assert!(matches!(r, Err(Error::SampleDiverged { step }) if (1..=2).contains(&step)), "{r:?}");
}

fn tensor_strategy() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..40, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = Rng::new(seed);
        let a = Tensor::vector(rng.normal_vec(n));
        let b = Tensor::vector(rng.normal_vec(n).into_iter().map(|x| 3.0 * x + 0.5).collect());
        (a, b)
    })
}

proptest! {
    #[test]
    fn rescale_preserves_direction((v_pos, v_neg) in tensor_strategy(), w in 1.0f64..8.0, phi in 0.0f64..=1.0) {
        let v_cfg = cfg_combine(&v_pos, &v_neg, w).unwrap();
        let r = cfg_rescale(&v_cfg, &v_pos, phi).unwrap();
        prop_assume!(!r.degenerate && r.v.norm() > 0.0);
        let cos = r.v.dot(&v_cfg) / (r.v.norm() * v_cfg.norm());
        prop_assert!((cos - 1.0).abs() < 1e-10);
    }

    #[test]
    fn combine_of_equal_branches_is_identity((v, _) in tensor_strategy(), w in 1.0f64..20.0) {
        prop_assert!(cfg_combine(&v, &v, w).unwrap().bit_eq(&v));
    }

    #[test]
    fn schedules_satisfy_invariants(t in 2usize..3000) {
        let s = make_schedule(t, BaseSchedule::ScaledLinear).unwrap();
        prop_assert_eq!(s.alphas()[t - 1], 0.0);
        prop_assert!(s.alphas()[0] > 0.0);
        for i in 0..t {
            let (a, g) = (s.alphas()[i], s.sigmas()[i]);
            prop_assert!((a * a + g * g - 1.0).abs() < 1e-12);
            if i + 1 < t {
                prop_assert!(a > s.alphas()[i + 1]);
            }
        }
    }

    #[test]
    fn trailing_plans_start_at_terminal_step(t in 2usize..2000, frac in 0.0f64..1.0) {
        let n = 1 + ((t - 1) as f64 * frac) as usize;
        let p = SamplerPlan::trailing(t, n).unwrap();
        prop_assert_eq!(p.timesteps[0], t - 1);
        prop_assert!(p.timesteps.windows(2).all(|w| w[0] > w[1]));
        prop_assert_eq!(p.len(), n);
    }
}
