//! Property tests over the flow, store and adversarial invariants.

use flowdistill::adversarial::{adv_losses, GeneratorLoss};
use flowdistill::distill::make_key_schedule;
use flowdistill::flow::{fm_loss, interpolate, FlowSample, TimeGrid};
use flowdistill::nn::VelocityModel;
use flowdistill::trajstore::{generate_store, TrajectoryStore, RECURRENCE_TOLERANCE};
use proptest::prelude::*;

fn vec_of(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e6f64..1e6, d)
}

fn point_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|d| (vec_of(d), vec_of(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolate_hits_its_endpoints_exactly((x0, x1) in point_pair()) {
        prop_assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
    }

    #[test]
    fn fm_loss_is_non_negative(
        seed in 0u64..500,
        samples in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..=1.0), 1..20),
    ) {
        let mut model = VelocityModel::build(1, 8, 1, seed).unwrap();
        let last = model.params().len() - 2;
        for v in &mut model.params_mut().tensors_mut()[last].data {
            *v = 0.3;
        }
        let batch: Vec<FlowSample> = samples
            .iter()
            .map(|&(a, b, t)| FlowSample { x0: vec![a], x1: vec![b], t })
            .collect();
        prop_assert!(fm_loss(&model, &batch).unwrap() >= 0.0);
        // the zero-initialized model matches targets exactly when x1 = x0
        let fresh = VelocityModel::build(1, 8, 1, seed).unwrap();
        let still: Vec<FlowSample> = samples
            .iter()
            .map(|&(a, _, t)| FlowSample { x0: vec![a], x1: vec![a], t })
            .collect();
        prop_assert_eq!(fm_loss(&fresh, &still).unwrap(), 0.0);
    }

    #[test]
    fn discriminator_loss_is_non_negative(p_real in 0.0f64..=1.0, p_fake in 0.0f64..=1.0) {
        for form in [GeneratorLoss::NonSaturating, GeneratorLoss::Minimax] {
            let (d, g) = adv_losses(p_real, p_fake, form);
            prop_assert!(d >= 0.0 && d.is_finite());
            prop_assert!(g.is_finite());
        }
        let near_opt = adv_losses(1.0 - 1e-9, 1e-9, GeneratorLoss::NonSaturating).0;
        prop_assert!(near_opt <= adv_losses(p_real, p_fake, GeneratorLoss::NonSaturating).0);
    }
}

fn perturbed_teacher(seed: u64) -> VelocityModel {
    let mut t = VelocityModel::build(1, 8, 2, seed).unwrap();
    let last = t.params().len() - 2;
    for (i, v) in t.params_mut().tensors_mut()[last].data.iter_mut().enumerate() {
        *v = 0.05 * (i as f64 - 3.5);
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stores_round_trip_bit_exactly(seed in 0u64..10_000, count in 1usize..24) {
        let teacher = perturbed_teacher(seed % 7);
        let grid = TimeGrid::uniform(10).unwrap();
        let store = generate_store(&teacher, count, &grid, seed).unwrap();
        prop_assert_eq!(&generate_store(&teacher, count, &grid, seed).unwrap(), &store);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = TrajectoryStore::load(&path, Some(&teacher)).unwrap();
        prop_assert_eq!(&back, &store);
        back.save(&path).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn stored_paths_follow_the_euler_recurrence(seed in 0u64..10_000) {
        let teacher = perturbed_teacher(seed % 5);
        let grid = TimeGrid::uniform(50).unwrap();
        let store = generate_store(&teacher, 4, &grid, seed).unwrap();
        let schedule = make_key_schedule(50, 5).unwrap();
        for (i, traj) in store.trajectories().iter().enumerate() {
            for j in 1..=50 {
                let (tj, tp) = (grid.time(j), grid.time(j - 1));
                let v = teacher.eval(&traj.states[j], tj).unwrap();
                for ((lo, hi), vc) in traj.states[j - 1].iter().zip(&traj.states[j]).zip(&v) {
                    prop_assert!((lo - hi - (tp - tj) * vc).abs() <= RECURRENCE_TOLERANCE);
                }
            }
            let keys = store.key_points(i, &schedule).unwrap();
            let mut next = traj.states.len();
            for key in &keys {
                let pos = traj.states[..next].iter().rposition(|s| s == key);
                prop_assert!(pos.is_some(), "key latent is not a stored state");
                next = pos.unwrap();
            }
        }
    }
}
