//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParameterBundle;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Denominator floor, so that two gradients that are both ~0 compare equal.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst parameter.
    pub worst: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradients already stored in the model's bundle against
/// central differences of `loss` on up to `samples` randomly chosen scalars.
pub fn finite_difference_check<T, R: Rng>(
    model: &mut T,
    bundle: impl Fn(&mut T) -> &mut ParameterBundle,
    loss: impl Fn(&T) -> f64,
    samples: usize,
    rng: &mut R,
) -> GradCheckReport {
    let n = bundle(model).n_scalars();
    let picks = sample(rng, n, samples.min(n));
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: 0,
    };
    for k in picks.iter() {
        let p = bundle(model);
        let x0 = p.scalar(k);
        let analytic = p.grad_scalar(k);
        p.set_scalar(k, x0 + FD_STEP);
        let up = loss(model);
        bundle(model).set_scalar(k, x0 - FD_STEP);
        let down = loss(model);
        bundle(model).set_scalar(k, x0);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = relative_error(analytic, numeric);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = k;
        }
        report.checked += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::dense::{Activation, Dense, DenseLayerSpec};
    use crate::approximator::extractor::{Extractor, ExtractorKind, ExtractorSpec, ObsBatch};
    use crate::approximator::lstm::{Lstm, RecurrentBranchSpec};
    use crate::approximator::network::{Network, NetworkSpec, Role};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    fn projection_loss(y: &Array2<f64>, r: &Array2<f64>) -> f64 {
        (y * r).sum()
    }

    fn random_batch(b: usize, seq: usize, rng: &mut ChaCha8Rng) -> ObsBatch {
        ObsBatch {
            pv: random(b, seq, rng),
            dso: random(b, seq, rng),
            scalars: random(b, 8, rng),
        }
    }

    fn check_dense(act: Activation) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParameterBundle::new();
        let spec = DenseLayerSpec {
            in_dim: 12,
            out_dim: 9,
            activation: act,
        };
        let layer = Dense::new(spec, "d", &mut p, &mut rng);
        let x = random(5, 12, &mut rng);
        let r = random(5, 9, &mut rng);
        let c = layer.forward(&p, x.view()).unwrap();
        {
            let ParameterBundle { values, grads, .. } = &mut p;
            layer.backward(values, Some(grads), &c, r.clone());
        }
        let rep = finite_difference_check(
            &mut p,
            |p| p,
            |p| projection_loss(layer.forward(p, x.view()).unwrap().output(), &r),
            200,
            &mut rng,
        );
        assert!(rep.checked >= 100);
        assert!(rep.passed(), "{act:?}: {rep:?}");
    }

    #[test]
    fn dense_tanh() {
        check_dense(Activation::Tanh);
    }

    #[test]
    fn dense_relu() {
        check_dense(Activation::Relu);
    }

    #[test]
    fn dense_identity() {
        check_dense(Activation::Identity);
    }

    #[test]
    fn dense_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParameterBundle::new();
        let spec = DenseLayerSpec {
            in_dim: 4,
            out_dim: 3,
            activation: Activation::Tanh,
        };
        let layer = Dense::new(spec, "d", &mut p, &mut rng);
        let x = random(2, 4, &mut rng);
        let r = random(2, 3, &mut rng);
        let c = layer.forward(&p, x.view()).unwrap();
        let dx = layer.backward(&p.values, None, &c, r.clone());
        for i in 0..2 {
            for j in 0..4 {
                let mut up = x.clone();
                up[[i, j]] += FD_STEP;
                let mut down = x.clone();
                down[[i, j]] -= FD_STEP;
                let f = |z: &Array2<f64>| projection_loss(layer.forward(&p, z.view()).unwrap().output(), &r);
                let numeric = (f(&up) - f(&down)) / (2.0 * FD_STEP);
                assert!(relative_error(dx[[i, j]], numeric) < MAX_REL_ERROR);
            }
        }
    }

    #[test]
    fn recurrent_branch_length_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ParameterBundle::new();
        let lstm = Lstm::new(RecurrentBranchSpec::scalar_series(16, 4), "r", &mut p, &mut rng);
        let seq = random(3, 4, &mut rng);
        let r = random(3, 16, &mut rng);
        let c = lstm.forward(&p, seq.view()).unwrap();
        {
            let ParameterBundle { values, grads, .. } = &mut p;
            lstm.backward(values, grads, &c, &r);
        }
        let rep = finite_difference_check(
            &mut p,
            |p| p,
            |p| projection_loss(lstm.forward(p, seq.view()).unwrap().last_hidden(), &r),
            300,
            &mut rng,
        );
        assert!(rep.checked >= 100);
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn full_extractor() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = ParameterBundle::new();
        let ext = Extractor::mbtf(ExtractorSpec::default_for(6), &mut p, &mut rng);
        let obs = random_batch(4, 6, &mut rng);
        let r = random(4, 64, &mut rng);
        let c = ext.forward(&p, &obs).unwrap();
        {
            let ParameterBundle { values, grads, .. } = &mut p;
            ext.backward(values, grads, &c, r.clone());
        }
        let rep = finite_difference_check(
            &mut p,
            |p| p,
            |p| projection_loss(ext.forward(p, &obs).unwrap().features(), &r),
            400,
            &mut rng,
        );
        assert!(rep.checked >= 100);
        assert!(rep.passed(), "{rep:?}");
    }

    fn check_network(kind: ExtractorKind, role: Role) {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut net = Network::new(NetworkSpec::new(kind, 6), role, &mut rng);
        let obs = random_batch(4, 6, &mut rng);
        let act = random(4, 2, &mut rng);
        let out_dim = if role == Role::Actor { 2 } else { 1 };
        let r = random(4, out_dim, &mut rng);
        let actions = (role == Role::Critic).then_some(&act);
        let c = net.forward(&obs, actions).unwrap();
        net.backward(&c, r.clone());
        let rep = finite_difference_check(
            &mut net,
            |n| &mut n.params,
            |n| projection_loss(n.forward(&obs, actions).unwrap().output(), &r),
            400,
            &mut rng,
        );
        assert!(rep.checked >= 100);
        assert!(rep.passed(), "{kind} {role:?}: {rep:?}");
    }

    #[test]
    fn actor_mbtf() {
        check_network(ExtractorKind::Mbtf, Role::Actor);
    }

    #[test]
    fn critic_mbtf() {
        check_network(ExtractorKind::Mbtf, Role::Critic);
    }

    #[test]
    fn actor_flatten() {
        check_network(ExtractorKind::Mlp, Role::Actor);
    }

    #[test]
    fn critic_flatten() {
        check_network(ExtractorKind::Mlp, Role::Critic);
    }

    #[test]
    fn critic_action_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net = Network::new(NetworkSpec::new(ExtractorKind::Mbtf, 5), Role::Critic, &mut rng);
        let obs = random_batch(3, 5, &mut rng);
        let act = random(3, 2, &mut rng);
        let ones = Array2::ones((3, 1));
        let c = net.forward(&obs, Some(&act)).unwrap();
        let da = net.action_grad(&c, ones).unwrap();
        let before = net.params.clone();
        for i in 0..3 {
            for j in 0..2 {
                let mut up = act.clone();
                up[[i, j]] += FD_STEP;
                let mut down = act.clone();
                down[[i, j]] -= FD_STEP;
                let q = |a: &Array2<f64>| net.forward(&obs, Some(a)).unwrap().output().sum();
                let numeric = (q(&up) - q(&down)) / (2.0 * FD_STEP);
                assert!(relative_error(da[[i, j]], numeric) < MAX_REL_ERROR);
            }
        }
        // Action gradients leave parameter gradients alone.
        assert_eq!(net.params, before);
        assert!(net.params.grads.iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }
}
