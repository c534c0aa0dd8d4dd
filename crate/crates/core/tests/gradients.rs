//! Analytic gradients of every training loss against central differences.

use flowdistill::adversarial::{
    DiscriminatorObjective, FeatureTapConfig, GeneratorLoss, GeneratorObjective, ProjectionHead,
};
use flowdistill::distill::{make_key_schedule, trajectory_objective};
use flowdistill::flow::{flow_matching_objective, gaussian, FlowSample};
use flowdistill::nn::{Objective, ParamSet, VelocityModel};
use flowdistill::seed::rng_for;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const SEEDS: u64 = 5;
const COORDS: usize = 40;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Adds N(0, scale²) to every parameter so no layer sits at its zero init.
fn jitter(params: &mut ParamSet, seed: u64, scale: f64) {
    let mut rng = rng_for(seed, "jitter");
    let normal = Normal::new(0.0, scale).unwrap();
    for t in params.tensors_mut() {
        for v in &mut t.data {
            *v += normal.sample(&mut rng);
        }
    }
}

fn model(seed: u64) -> VelocityModel {
    let mut m = VelocityModel::build(1, 16, 2, seed).unwrap();
    jitter(m.params_mut(), seed, 0.2);
    m
}

fn head(seed: u64, input: usize) -> ProjectionHead {
    let mut h = ProjectionHead::new(0, input, seed).unwrap();
    jitter(h.params_mut(), seed + 100, 0.3);
    h
}

/// Worst relative error over randomly chosen coordinates.
fn check<O: Objective>(obj: &O, params: &ParamSet, seed: u64) -> f64 {
    let (_, g) = obj.value_and_grad(params).unwrap();
    let mut rng = rng_for(seed, "coords");
    let mut worst: f64 = 0.0;
    for _ in 0..COORDS {
        let flat = rng.random_range(0..params.numel());
        let v = params.get_flat(flat).unwrap();
        let mut p = params.clone();
        p.set_flat(flat, v + H);
        let up = obj.value(&p).unwrap();
        p.set_flat(flat, v - H);
        let down = obj.value(&p).unwrap();
        let fd = (up - down) / (2.0 * H);
        let an = g.get_flat(flat).unwrap();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn flow_matching_gradient() {
    for seed in 0..SEEDS {
        let m = model(seed);
        let mut rng = rng_for(seed, "batch");
        let batch: Vec<FlowSample> = (0..24)
            .map(|_| FlowSample {
                x0: vec![if rng.random::<bool>() { 3.0 } else { -3.0 }],
                x1: vec![gaussian(1, 1, &mut rng).as_slice()[0]],
                t: rng.random(),
            })
            .collect();
        let obj = flow_matching_objective(m.shape(), &batch).unwrap();
        let err = check(&obj, m.params(), seed);
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn trajectory_gradient() {
    let schedule = make_key_schedule(50, 5).unwrap();
    for seed in 0..SEEDS {
        let m = model(seed);
        let mut rng = rng_for(seed, "keys");
        let upper = gaussian(16, 1, &mut rng);
        let lower = gaussian(16, 1, &mut rng);
        for k in [0, 2, 4] {
            let obj = trajectory_objective(&m, &upper, &lower, &schedule, k).unwrap();
            let err = check(&obj, m.params(), seed * 10 + k as u64);
            assert!(err < TOL, "seed {seed}, k {k}: relative error {err:e}");
        }
    }
}

#[test]
fn generator_gradient() {
    for seed in 0..SEEDS {
        let teacher = model(seed + 50);
        let student = model(seed);
        let head = head(seed, 16);
        let from = gaussian(12, 1, &mut rng_for(seed, "from"));
        for (t_from, t_to) in [(1.0, 0.8), (0.2, 0.0)] {
            let obj = GeneratorObjective {
                student: student.shape(),
                teacher: &teacher,
                head: &head,
                tap: FeatureTapConfig::for_blocks(2),
                from: &from,
                t_from,
                t_to,
                form: GeneratorLoss::NonSaturating,
            };
            let err = check(&obj, student.params(), seed);
            assert!(err < TOL, "seed {seed}, t {t_from}->{t_to}: relative error {err:e}");
        }
    }
}

#[test]
fn discriminator_gradient() {
    for seed in 0..SEEDS {
        let head = head(seed, 16);
        let real = gaussian(10, 16, &mut rng_for(seed, "real"));
        let fake = gaussian(10, 16, &mut rng_for(seed, "fake"));
        let obj = DiscriminatorObjective {
            head: &head,
            real: &real,
            fake: &fake,
        };
        let err = check(&obj, head.params(), seed);
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}
