//! Rectified flow matching: the straight-line perturbation between data and
//! noise, its velocity target, classifier-free guidance combination, and the
//! Euler ODE sampler.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Straight-line perturbation `x_t = (1 - t) x_0 + t eps` for `t` in [0, 1].
pub fn flow_perturb(x0: &Tensor, eps: &Tensor, t: f32) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "flow_perturb: data {:?} vs noise {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArg(format!(
            "flow_perturb: t = {t} outside [0, 1]"
        )));
    }
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| (1.0 - t) * a + t * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Velocity target `v = x_0 - eps` of the straight-line path.
pub fn flow_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "flow_target: data {:?} vs noise {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| a - e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Classifier-free guidance: the affine combination
/// `(1 - s) v_null + s v_cond`, which equals `v_null + s (v_cond - v_null)`
/// and reproduces the endpoints exactly at `s = 0` and `s = 1`.
pub fn cfg_combine(v_cond: &Tensor, v_null: &Tensor, s: f32) -> Result<Tensor> {
    if v_cond.shape() != v_null.shape() {
        return Err(Error::Shape(format!(
            "cfg_combine: conditional {:?} vs null {:?}",
            v_cond.shape(),
            v_null.shape()
        )));
    }
    let data = v_cond
        .data()
        .iter()
        .zip(v_null.data())
        .map(|(&c, &n)| (1.0 - s) * n + s * c)
        .collect();
    Tensor::from_vec(v_cond.shape(), data)
}

/// Euler integration of the flow ODE from `t = 1` (noise) to `t = 0` (data)
/// in `steps` uniform steps. Along the straight-line path
/// `dx_t/dt = eps - x_0 = -v`, so stepping t downward adds `+dt * v`:
/// `x <- x + dt * flow(x, t)`. With the exact field `v = x_0 - eps` a single
/// step recovers `x_0` to rounding error.
pub fn euler_sample<F>(mut flow: F, x1: Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::InvalidArg(
            "euler_sample: need at least one step".into(),
        ));
    }
    let dt = 1.0 / steps as f32;
    let mut x = x1;
    for i in 0..steps {
        let t = 1.0 - i as f32 * dt;
        let v = flow(&x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "euler_sample: flow returned {:?} for state {:?}",
                v.shape(),
                x.shape()
            )));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, "flow-test", 0);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0f32)).collect()).unwrap()
    }

    #[test]
    fn perturb_endpoints_are_exact() {
        let x0 = rand_tensor(&[3, 4], 1);
        let eps = rand_tensor(&[3, 4], 2);
        assert_eq!(flow_perturb(&x0, &eps, 0.0).unwrap().data(), x0.data());
        assert_eq!(flow_perturb(&x0, &eps, 1.0).unwrap().data(), eps.data());
    }

    #[test]
    fn perturb_midpoint_is_the_average() {
        let x0 = rand_tensor(&[2, 5], 3);
        let eps = rand_tensor(&[2, 5], 4);
        let mid = flow_perturb(&x0, &eps, 0.5).unwrap();
        for ((m, a), e) in mid.data().iter().zip(x0.data()).zip(eps.data()) {
            assert!((m - (a + e) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn perturb_rejects_bad_arguments() {
        let x0 = rand_tensor(&[2, 2], 5);
        let eps = rand_tensor(&[2, 3], 6);
        assert!(flow_perturb(&x0, &eps, 0.5).is_err());
        let eps = rand_tensor(&[2, 2], 7);
        assert!(flow_perturb(&x0, &eps, 1.5).is_err());
        assert!(flow_perturb(&x0, &eps, -0.1).is_err());
    }

    #[test]
    fn target_identities() {
        let x0 = rand_tensor(&[4, 4], 8);
        // eps = x0 -> zero field.
        let v = flow_target(&x0, &x0).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        // eps = 0 -> x0.
        let zero = Tensor::zeros(&[4, 4]);
        assert_eq!(flow_target(&x0, &zero).unwrap().data(), x0.data());
    }

    #[test]
    fn target_is_antisymmetric() {
        let a = rand_tensor(&[3, 3], 9);
        let b = rand_tensor(&[3, 3], 10);
        let ab = flow_target(&a, &b).unwrap();
        let ba = flow_target(&b, &a).unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert_eq!(*x, -y);
        }
    }

    #[test]
    fn cfg_endpoints_are_exact() {
        let c = rand_tensor(&[2, 6], 11);
        let n = rand_tensor(&[2, 6], 12);
        assert_eq!(cfg_combine(&c, &n, 1.0).unwrap().data(), c.data());
        assert_eq!(cfg_combine(&c, &n, 0.0).unwrap().data(), n.data());
    }

    #[test]
    fn cfg_is_affine_in_scale() {
        let c = rand_tensor(&[2, 4], 13);
        let n = rand_tensor(&[2, 4], 14);
        let g = cfg_combine(&c, &n, 2.0).unwrap();
        for ((gi, ci), ni) in g.data().iter().zip(c.data()).zip(n.data()) {
            assert!((gi - (2.0 * ci - ni)).abs() < 1e-6);
        }
    }

    #[test]
    fn one_step_with_the_true_field_recovers_data() {
        let x0 = rand_tensor(&[5, 7], 15);
        let eps = rand_tensor(&[5, 7], 16);
        let v = flow_target(&x0, &eps).unwrap();
        let out = euler_sample(|_, _| Ok(v.clone()), eps.clone(), 1).unwrap();
        for (o, a) in out.data().iter().zip(x0.data()) {
            assert!((o - a).abs() < 1e-6, "{o} vs {a}");
        }
    }

    #[test]
    fn many_steps_with_a_constant_field_match_one_step() {
        let x0 = rand_tensor(&[3, 8], 17);
        let eps = rand_tensor(&[3, 8], 18);
        let v = flow_target(&x0, &eps).unwrap();
        let out = euler_sample(|_, _| Ok(v.clone()), eps.clone(), 5).unwrap();
        for (o, a) in out.data().iter().zip(x0.data()) {
            assert!((o - a).abs() < 1e-5, "{o} vs {a}");
        }
    }

    #[test]
    fn sampler_visits_descending_times() {
        let mut times = Vec::new();
        let x = Tensor::zeros(&[1]);
        euler_sample(
            |_, t| {
                times.push(t);
                Ok(Tensor::zeros(&[1]))
            },
            x,
            4,
        )
        .unwrap();
        assert_eq!(times, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn sampler_rejects_zero_steps() {
        assert!(euler_sample(|_, _| Ok(Tensor::zeros(&[1])), Tensor::zeros(&[1]), 0).is_err());
    }
}
