use dva_core::diffusion::DiffusionSchedule;
use dva_core::model::DvaModel;
use dva_core::training::{train_step, Batch, TrainConfig};
use dva_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn setup(cfg: &TrainConfig) -> (DvaModel, DiffusionSchedule, Batch, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = DvaModel::init(cfg.model_config(), &mut rng).unwrap();
    let sched = cfg.schedule().unwrap();
    let x = normal(&mut rng, &[4, 6, cfg.t_in]);
    let y = normal(&mut rng, &[4, cfg.t_out]);
    let batch = Batch::diffuse(x, y, &sched, cfg, &mut rng).unwrap();
    (model, sched, batch, rng)
}

/// Biases feeding straight into a batch norm (possibly through a linear map)
/// are cancelled by its mean subtraction, and the energy's constant offset
/// drops out of its gradient.
fn structurally_zero(name: &str) -> bool {
    [".conv1.b", ".expand.b", ".dw.b", ".pw.b"].iter().any(|s| name.ends_with(s)) || name == "energy.b3"
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = TrainConfig {
        t_in: 8,
        t_out: 6,
        ..TrainConfig::default()
    };
    let (mut model, sched, batch, mut rng) = setup(&cfg);
    let (_, grads) = train_step(&mut model, &batch, &sched, &cfg, &mut rng).unwrap();
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut dead = Vec::new();
    for name in &names {
        let g = grads.get(name).map(|g| g.max_abs()).unwrap_or(0.0);
        if structurally_zero(name) {
            assert!(g < 1e-9, "{name} should be structurally zero, got {g}");
        } else if g == 0.0 {
            dead.push(name.clone());
        }
    }
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn denoiser_off_leaves_energy_untouched() {
    let cfg = TrainConfig {
        t_in: 8,
        t_out: 6,
        denoiser: false,
        ..TrainConfig::default()
    };
    let (mut model, sched, batch, mut rng) = setup(&cfg);
    let (c, grads) = train_step(&mut model, &batch, &sched, &cfg, &mut rng).unwrap();
    assert_eq!(c.dsm, 0.0);
    for (name, _) in model.params.iter() {
        if name.starts_with("energy.") {
            assert_eq!(grads.get(name).map(|g| g.max_abs()).unwrap_or(0.0), 0.0, "{name}");
        }
    }
}

#[test]
fn kl_toggles_zero_the_term() {
    let cfg = TrainConfig {
        t_in: 8,
        t_out: 6,
        latent_kl: false,
        output_kl: false,
        ..TrainConfig::default()
    };
    let (mut model, sched, batch, mut rng) = setup(&cfg);
    let (c, grads) = train_step(&mut model, &batch, &sched, &cfg, &mut rng).unwrap();
    assert_eq!(c.kl, 0.0);
    // without the latent KL the prior heads only matter when sampling from the prior
    for i in 0..3 {
        let name = format!("lat{i}.prior.w");
        assert_eq!(grads.get(&name).map(|g| g.max_abs()).unwrap_or(0.0), 0.0, "{name}");
    }
}
