#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadowopt_core::model::{ChannelStats, ParameterVector, ProgramTemplate, CHANNELS};
use shadowopt_core::model::NormStats;
use shadowopt_core::net::{NetArchitecture, ShadowModel};
use shadowopt_core::sim::gearbox_template;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_stats(rng: &mut ChaCha8Rng, template: &ProgramTemplate, pad: usize, shifted: bool) -> NormStats {
    let stat = |rng: &mut ChaCha8Rng| ChannelStats {
        mean: if shifted { rng.random_range(-3.0..3.0) } else { 0.0 },
        std: rng.random_range(0.5..2.0),
    };
    NormStats {
        parameters: template.parameter_specs.iter().map(|_| stat(rng)).collect(),
        trajectory: (0..pad * CHANNELS).map(|_| stat(rng)).collect(),
        cycle_time: stat(rng),
    }
}

/// Random gearbox net with random widths and depth.
pub fn random_model(seed: u64, bias_scale: f64, shifted: bool) -> ShadowModel {
    let mut r = rng(seed);
    let template = gearbox_template();
    let depth = r.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(2..=7)).collect();
    let pad = r.random_range(2..=5);
    let stats = random_stats(&mut r, &template, pad, shifted);
    let arch = NetArchitecture::new(template.dim(), hidden, 0.0, pad);
    let mut m = ShadowModel::random(&template, arch, stats, seed, bias_scale).unwrap();
    m.training_log.train_loss = vec![1.0];
    m
}

/// Interior point of the parameter box.
pub fn random_x(rng: &mut ChaCha8Rng, template: &ProgramTemplate) -> ParameterVector {
    template
        .parameter_specs
        .iter()
        .map(|s| (s.name.clone(), s.from_unit(rng.random_range(0.05..0.95))))
        .collect()
}
