//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use nalgebra::Matrix4;
use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rydberg_fdm::nn::{Architecture, Network, TENSOR_NAMES};
use rydberg_fdm::physics::AtomParams;

pub type M = Matrix4<C>;

fn re(x: f64) -> C {
    C::new(x, 0.0)
}

/// Ladder Hamiltonian written out from the level scheme, hbar = 1.
pub fn hamiltonian(p: &AtomParams, omega_s: f64) -> M {
    let mut h = M::zeros();
    h[(0, 1)] = re(-p.omega_p / 2.0);
    h[(1, 0)] = h[(0, 1)];
    h[(1, 2)] = re(-p.omega_c / 2.0);
    h[(2, 1)] = h[(1, 2)];
    h[(2, 3)] = re(-omega_s / 2.0);
    h[(3, 2)] = h[(2, 3)];
    h[(1, 1)] = re(p.delta_p);
    h[(2, 2)] = re(p.delta_p + p.delta_c);
    h[(3, 3)] = re(p.delta_p + p.delta_c + p.delta_s);
    h
}

/// Collapse operators sqrt(rate) |lower><upper|.
pub fn collapse_ops(p: &AtomParams) -> Vec<M> {
    [(0, 1, p.gamma_e), (1, 2, p.gamma_r), (2, 3, p.gamma_s)]
        .into_iter()
        .map(|(lo, hi, g)| {
            let mut c = M::zeros();
            c[(lo, hi)] = re(g.sqrt());
            c
        })
        .collect()
}

/// Full Lindblad generator using generic matrix products.
pub fn lindblad_rhs(h: &M, cs: &[M], rho: &M) -> M {
    let i = C::new(0.0, 1.0);
    let mut d = -(h * rho - rho * h) * i;
    for c in cs {
        let cd = c.adjoint();
        let cdc = cd * c;
        d += c * rho * cd - (cdc * rho + rho * cdc) * re(0.5);
    }
    d
}

/// Classic fourth-order Runge-Kutta from the ground state to time `t_end`
/// with step at most `max_step`.
pub fn integrate_rk4(p: &AtomParams, omega_s: f64, t_end: f64, max_step: f64) -> M {
    let h = hamiltonian(p, omega_s);
    let cs = collapse_ops(p);
    let steps = (t_end / max_step).ceil() as usize;
    let dt = re(t_end / steps as f64);
    let half = dt * 0.5;
    let mut rho = M::zeros();
    rho[(0, 0)] = re(1.0);
    for _ in 0..steps {
        let k1 = lindblad_rhs(&h, &cs, &rho);
        let k2 = lindblad_rhs(&h, &cs, &(rho + k1 * half));
        let k3 = lindblad_rhs(&h, &cs, &(rho + k2 * half));
        let k4 = lindblad_rhs(&h, &cs, &(rho + k3 * dt));
        rho += (k1 + k2 * re(2.0) + k3 * re(2.0) + k4) * (dt / 6.0);
    }
    rho
}

pub fn max_rate(p: &AtomParams, omega_s: f64) -> f64 {
    [
        p.omega_p, p.omega_c, omega_s, p.delta_p, p.delta_c, p.delta_s, p.gamma_e, p.gamma_r,
        p.gamma_s,
    ]
    .iter()
    .fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn min_decay(p: &AtomParams) -> f64 {
    p.gamma_e.min(p.gamma_r).min(p.gamma_s)
}

/// Integrates to 50 / min decay rate with step 0.01 / max rate.
pub fn long_time_state(p: &AtomParams, omega_s: f64) -> M {
    integrate_rk4(p, omega_s, 50.0 / min_decay(p), 0.01 / max_rate(p, omega_s))
}

/// Parameters in natural units (rates of order 1) with every decay rate at
/// least 0.2, so the long-time integration stays affordable.
pub fn random_params(rng: &mut ChaCha8Rng) -> (AtomParams, f64) {
    let p = AtomParams {
        omega_p: rng.random_range(0.1..2.0),
        omega_c: rng.random_range(0.1..3.0),
        delta_p: rng.random_range(-1.0..1.0),
        delta_c: rng.random_range(-1.0..1.0),
        delta_s: rng.random_range(-1.0..1.0),
        gamma_e: rng.random_range(0.5..3.0),
        gamma_r: rng.random_range(0.2..1.0),
        gamma_s: rng.random_range(0.2..1.0),
    };
    (p, rng.random_range(0.0..3.0))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest elementwise modulus difference.
pub fn max_abs_diff(a: &M, b: &[[C; 4]; 4]) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..4 {
        for j in 0..4 {
            worst = worst.max((a[(i, j)] - b[i][j]).norm());
        }
    }
    worst
}

pub fn tiny_arch(input_len: usize, kernel_len: usize, pool: usize) -> Architecture {
    Architecture {
        input_len,
        filters: 2,
        kernel_len,
        pool,
        hidden: 4,
        outputs: 3,
        ..Architecture::default()
    }
}

pub fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    len: usize,
    outs: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let xs = (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let ys = (0..n)
        .map(|_| {
            (0..outs)
                .map(|_| f64::from(rng.random_range(0..2u8)))
                .collect()
        })
        .collect();
    (xs, ys)
}

pub fn perturbed_network(arch: Architecture, rng: &mut ChaCha8Rng) -> Network {
    let mut net = Network::init(arch, rng).unwrap();
    // Move BN affine terms and biases off their defaults so every path is
    // exercised.
    for t in net.params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    net
}

/// Largest relative error between analytic and central-difference
/// gradients, per parameter tensor. Relative errors use a 1e-6 floor so
/// entries whose true gradient is ~0 compare absolutely.
pub fn gradient_errors(
    net: &Network,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
) -> Vec<(&'static str, f64)> {
    let xv: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let yv: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let (_, grads, _) = net.loss_and_grad(&xv, &yv).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let h = 1e-5;
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (k, tensor) in analytic.iter().enumerate() {
        let mut worst = 0.0_f64;
        for (j, &a) in tensor.iter().enumerate() {
            let orig = probe.params.tensors()[k][j];
            probe.params.tensors_mut()[k][j] = orig + h;
            let lp = probe.batch_loss(&xv, &yv).unwrap();
            probe.params.tensors_mut()[k][j] = orig - h;
            let lm = probe.batch_loss(&xv, &yv).unwrap();
            probe.params.tensors_mut()[k][j] = orig;
            let num = (lp - lm) / (2.0 * h);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        out.push((TENSOR_NAMES[k], worst));
    }
    out
}

pub fn max_gradient_error(net: &Network, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> (f64, &'static str) {
    gradient_errors(net, xs, ys).into_iter().fold(
        (0.0, ""),
        |acc, (n, e)| if e > acc.0 { (e, n) } else { acc },
    )
}
