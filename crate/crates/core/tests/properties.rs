use proptest::prelude::*;
use skillworld::env::{ContextMode, EnvConfig, Split, Stage, World};
use skillworld::losses::{
    clipped_surrogate, composite_advantage, group_advantage, jsd, utilization_advantage,
};
use skillworld::router::{route, RouterState, Tier};

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(normalize)
}

proptest! {
    #[test]
    fn threshold_is_a_window_mean(w in 1usize..8, means in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let mut r = RouterState::new(w);
        for (t, &m) in means.iter().enumerate() {
            let eta = r.threshold(m);
            let window = &means[(t + 1).saturating_sub(w)..=t];
            let lo = window.iter().cloned().fold(f64::MAX, f64::min);
            let hi = window.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(eta >= lo - 1e-15 && eta <= hi + 1e-15);
            prop_assert!(r.pass_means().len() <= w);
        }
    }

    #[test]
    fn route_is_monotone(eta in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(route(lo, eta) <= route(hi, eta));
        prop_assert_eq!(route(0.0, eta), Tier::Hard);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(p in dist(6), q in dist(6)) {
        let a = jsd(&p, &q, 6).unwrap();
        let b = jsd(&q, &p, 6).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&a));
        prop_assert!(jsd(&p, &p, 6).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn group_advantages_are_standardized(rewards in prop::collection::vec(-2.0f64..2.0, 2..16), a_u in -2.0f64..2.0) {
        let g = group_advantage(&rewards);
        let n = rewards.len() as f64;
        let mean = g.advantages.iter().sum::<f64>() / n;
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-6 {
            let std = (g.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((std - 1.0).abs() <= 1e-9);
        }
        let c = composite_advantage(&g, a_u);
        let shift = c.advantages.iter().zip(&g.advantages).map(|(x, y)| x - y).sum::<f64>() / n;
        prop_assert!((shift - a_u).abs() <= 1e-12);
    }

    #[test]
    fn utilization_advantages_preserve_gain_order(gains in prop::collection::vec(-1.0f64..1.0, 2..16), anchor in -1.0f64..1.0) {
        let a = utilization_advantage(&gains, anchor);
        prop_assert_eq!(a.len(), gains.len());
        // Ordering follows the gains.
        for i in 0..gains.len() {
            for j in 0..gains.len() {
                if gains[i] < gains[j] {
                    prop_assert!(a[i] <= a[j]);
                }
            }
        }
    }

    #[test]
    fn clipped_surrogate_never_exceeds_unclipped(rho in 0.01f64..5.0, adv in -3.0f64..3.0) {
        let (v, _) = clipped_surrogate(rho, adv, 0.2);
        prop_assert!(v <= rho * adv + 1e-12);
    }
}

#[test]
fn training_contexts_never_leak_ood_skills() {
    let world = World::generate(&EnvConfig::default()).unwrap();
    let ood: Vec<String> = world.split_domains(Split::ValOod);
    for task in world.tasks_in(Split::TrainId) {
        for mode in [
            ContextMode::Standard,
            ContextMode::Privileged,
            ContextMode::FullExtern,
        ] {
            let ctx = world.build_context(mode, Stage::Training, task, 3).unwrap();
            assert!(ctx.retrieved.iter().any(|id| id.starts_with("s-")));
            for id in &ctx.retrieved {
                assert_no_ood(id, &ood);
            }
        }
    }
}

fn assert_no_ood(skill_id: &str, ood: &[String]) {
    for d in ood {
        assert!(
            !skill_id.starts_with(&format!("s-{d}-")),
            "{skill_id} leaked"
        );
    }
}
