mod common;

use common::{random_model, random_x, rng};
use rand::Rng;
use shadowopt_core::model::{ParameterVector, CHANNELS};
use shadowopt_core::net::{HeadGradient, Mode, Prediction, ShadowModel};
use shadowopt_core::optimizer::{objective_gradient, objective_value, ObjectiveSpec, ObjectiveTerm, ForceTerm};

const H: f64 = 1e-5;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-7 || diff <= 1e-4 * analytic.abs().max(numeric.abs())
}

/// Plain-loop forward pass in normalized output units.
fn oracle_outputs(model: &ShadowModel, x: &ParameterVector) -> Vec<f64> {
    let mut a: Vec<f64> = model.parameter_specs.iter().map(|s| (x.0[&s.name] - s.lower_bound) / (s.upper_bound - s.lower_bound)).collect();
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.bias.len()];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = layer.bias[j];
            for (i, ai) in a.iter().enumerate() {
                *zj += layer.weights[[j, i]] * ai;
            }
        }
        a = if l == last { z } else { z.into_iter().map(f64::tanh).collect() };
    }
    a
}

struct Loss {
    traj: Vec<f64>,
    cycle_time: f64,
    logit: f64,
}

impl Loss {
    fn random(model: &ShadowModel, seed: u64) -> Loss {
        let mut r = rng(seed);
        Loss {
            traj: (0..model.architecture.trajectory_dim()).map(|_| r.random_range(-1.0..1.0)).collect(),
            cycle_time: r.random_range(-1.0..1.0),
            logit: r.random_range(-1.0..1.0),
        }
    }

    fn value(&self, p: &Prediction) -> f64 {
        let mut v = self.cycle_time * p.cycle_time + self.logit * p.success_logit;
        for (t, s) in p.trajectory.samples.iter().enumerate() {
            for c in 0..3 {
                v += self.traj[t * CHANNELS + c] * s.p[c];
            }
            v += self.traj[t * CHANNELS + 3] * s.f;
        }
        v
    }

    fn upstream(&self) -> HeadGradient {
        HeadGradient { trajectory: self.traj.clone(), cycle_time: self.cycle_time, success_logit: self.logit }
    }
}

fn eval(model: &ShadowModel, x: &ParameterVector, mode: Mode, loss: &Loss) -> f64 {
    loss.value(&model.forward(x, mode).unwrap().0)
}

fn check_pair(model: &ShadowModel, x: &ParameterVector, mode: Mode, loss: &Loss) -> usize {
    let (_, cache) = model.forward(x, mode).unwrap();
    let grads = model.backward(x, &cache, &loss.upstream()).unwrap();
    let mut checked = 0;
    for (k, name) in model.parameter_specs.iter().map(|s| s.name.clone()).enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.set(&name, x.0[&name] + H);
        minus.set(&name, x.0[&name] - H);
        let fd = (eval(model, &plus, mode, loss) - eval(model, &minus, mode, loss)) / (2.0 * H);
        assert!(close(grads.input[k], fd), "dL/d{name}: {} vs {fd}", grads.input[k]);
        checked += 1;
    }
    for (l, layer) in model.layers.iter().enumerate() {
        for ((j, i), _) in layer.weights.indexed_iter() {
            let mut m = model.clone();
            m.layers[l].weights[[j, i]] += H;
            let up = eval(&m, x, mode, loss);
            m.layers[l].weights[[j, i]] -= 2.0 * H;
            let down = eval(&m, x, mode, loss);
            let fd = (up - down) / (2.0 * H);
            assert!(close(grads.layers[l].weights[[j, i]], fd), "W{l}[{j},{i}]: {} vs {fd}", grads.layers[l].weights[[j, i]]);
            checked += 1;
        }
        for j in 0..layer.bias.len() {
            let mut m = model.clone();
            m.layers[l].bias[j] += H;
            let up = eval(&m, x, mode, loss);
            m.layers[l].bias[j] -= 2.0 * H;
            let down = eval(&m, x, mode, loss);
            let fd = (up - down) / (2.0 * H);
            assert!(close(grads.layers[l].bias[j], fd), "b{l}[{j}]: {} vs {fd}", grads.layers[l].bias[j]);
            checked += 1;
        }
    }
    checked
}

#[test]
fn forward_matches_plain_loop_oracle() {
    for seed in 0..20 {
        let model = random_model(seed, 0.5, true);
        let x = random_x(&mut rng(seed + 100), &model.template());
        let (_, cache) = model.forward(&x, Mode::Eval).unwrap();
        let oracle = oracle_outputs(&model, &x);
        for (a, b) in cache.outputs().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn input_and_weight_gradients_match_central_differences() {
    let mut checked = 0;
    for seed in 0..20 {
        let model = random_model(seed, 0.5, true);
        let x = random_x(&mut rng(seed + 200), &model.template());
        checked += check_pair(&model, &x, Mode::Eval, &Loss::random(&model, seed + 300));
    }
    assert!(checked > 20 * 4);
}

#[test]
fn gradients_hold_with_dropout_masks() {
    for seed in 0..10 {
        let mut model = random_model(seed, 0.5, true);
        if model.architecture.hidden_layers.len() < 2 {
            continue;
        }
        model.architecture.dropout_rate = 0.3;
        let x = random_x(&mut rng(seed + 400), &model.template());
        check_pair(&model, &x, Mode::Train { seed: seed + 9 }, &Loss::random(&model, seed + 500));
    }
}

#[test]
fn cache_from_another_input_is_refused() {
    let model = random_model(1, 0.5, true);
    let mut r = rng(2);
    let x = random_x(&mut r, &model.template());
    let y = random_x(&mut r, &model.template());
    let (_, cache) = model.forward(&x, Mode::Eval).unwrap();
    assert!(model.backward(&y, &cache, &Loss::random(&model, 3).upstream()).is_err());
}

#[test]
fn objective_gradient_matches_central_differences() {
    let spec = ObjectiveSpec {
        cycle_time: ObjectiveTerm::on(0.7),
        path_length: ObjectiveTerm::on(0.3),
        success: ObjectiveTerm::on(1.3),
        force_threshold: ForceTerm { enabled: true, weight: 0.9, f_max: Some(0.5) },
    };
    for seed in 0..20 {
        let model = random_model(seed, 0.5, true);
        let x = random_x(&mut rng(seed + 600), &model.template());
        let total = |x: &ParameterVector| objective_value(&model.predict(x).unwrap(), &spec).total;
        let (pred, cache) = model.forward(&x, Mode::Eval).unwrap();
        let (_, upstream) = objective_gradient(&model, &pred, &spec);
        let g = model.backward(&x, &cache, &upstream).unwrap().input;
        for (k, s) in model.parameter_specs.iter().enumerate() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.set(&s.name, x.0[&s.name] + H);
            minus.set(&s.name, x.0[&s.name] - H);
            let fd = (total(&plus) - total(&minus)) / (2.0 * H);
            assert!(close(g[k], fd), "seed {seed} d total/d{}: {} vs {fd}", s.name, g[k]);
        }
    }
}
