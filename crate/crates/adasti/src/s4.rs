//! Structured state-space sequence kernel: HiPPO initialization, bilinear
//! discretization, convolution-kernel computation and both convolutional and
//! recurrent application.
//!
//! These are the plain reference forms. The trainable networks rebuild the
//! same arithmetic on the autodiff tape so gradients flow through kernel
//! construction.

use ndarray::{Array1, Array2};

use crate::error::{AdastiError, Result};
use crate::tape::{condition_estimate, invert_matrix};

/// Continuous-time SSM parameters x' = A x + B u, y = C x plus the
/// discretization step.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub step: f64,
}

/// Bilinear-discretized system.
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    pub a_bar: Array2<f64>,
    pub b_bar: Array2<f64>,
    pub c_bar: Array2<f64>,
}

/// Causal convolution kernel taps K_i = C_bar A_bar^i B_bar.
#[derive(Clone, Debug)]
pub struct ConvKernel {
    pub taps: Array1<f64>,
}

/// HiPPO-LegS state matrix (0-indexed):
/// entry (n,k) = -sqrt(2n+1)*sqrt(2k+1) for n>k, -(n+1) for n=k, 0 for n<k.
pub fn hippo_init(d: usize) -> Result<Array2<f64>> {
    if d == 0 {
        return Err(AdastiError::contract("state dimension must be >= 1"));
    }
    let mut a = Array2::<f64>::zeros((d, d));
    for n in 0..d {
        for k in 0..=n {
            a[[n, k]] = if n == k {
                -((n + 1) as f64)
            } else {
                -((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt()
            };
        }
    }
    Ok(a)
}

/// Bilinear transform:
/// A_bar = (I - dt/2 A)^-1 (I + dt/2 A), B_bar = (I - dt/2 A)^-1 dt B, C_bar = C.
pub fn discretize(params: &SsmParams) -> Result<DiscreteSsm> {
    let d = params.a.nrows();
    if params.step <= 0.0 {
        return Err(AdastiError::contract("discretization step must be positive"));
    }
    let eye = Array2::<f64>::eye(d);
    let half = &params.a * (params.step / 2.0);
    let minus = &eye - &half;
    let plus = &eye + &half;
    let inv = invert_matrix(&minus).map_err(|_| {
        AdastiError::Numerical(format!(
            "(I - dt/2 A) is singular; condition estimate {:.3e}",
            condition_estimate(&minus)
        ))
    })?;
    Ok(DiscreteSsm {
        a_bar: inv.dot(&plus),
        b_bar: inv.dot(&(&params.b * params.step)),
        c_bar: params.c.clone(),
    })
}

/// Kernel taps by iterated state propagation: v <- A_bar v starting from B_bar.
pub fn compute_kernel(ssm: &DiscreteSsm, len: usize) -> Result<ConvKernel> {
    if len == 0 {
        return Err(AdastiError::contract("kernel length must be >= 1"));
    }
    let mut taps = Array1::<f64>::zeros(len);
    let mut v = ssm.b_bar.clone();
    for i in 0..len {
        let y = ssm.c_bar.dot(&v);
        let tap = y[[0, 0]];
        if !tap.is_finite() {
            return Err(AdastiError::Numerical(format!("kernel tap {i} overflowed")));
        }
        taps[i] = tap;
        v = ssm.a_bar.dot(&v);
    }
    Ok(ConvKernel { taps })
}

/// Causal convolution y_t = sum_{i<=t} K_i u_{t-i}.
pub fn s4_apply_conv(u: &Array1<f64>, kernel: &ConvKernel) -> Result<Array1<f64>> {
    if u.len() != kernel.taps.len() {
        return Err(AdastiError::contract(format!(
            "sequence length {} does not match kernel length {}",
            u.len(),
            kernel.taps.len()
        )));
    }
    let l = u.len();
    let mut y = Array1::<f64>::zeros(l);
    for t in 0..l {
        let mut acc = 0.0;
        for i in 0..=t {
            acc += kernel.taps[i] * u[t - i];
        }
        y[t] = acc;
    }
    Ok(y)
}

/// Exact unrolled recursion x_t = A_bar x_{t-1} + B_bar u_t, y_t = C_bar x_t
/// with x_{-1} = 0. Reference oracle for the convolution form.
pub fn s4_apply_recurrent(u: &Array1<f64>, ssm: &DiscreteSsm) -> Array1<f64> {
    let d = ssm.a_bar.nrows();
    let mut state = Array1::<f64>::zeros(d);
    let mut y = Array1::<f64>::zeros(u.len());
    for (t, &ut) in u.iter().enumerate() {
        state = ssm.a_bar.dot(&state) + &ssm.b_bar.column(0).to_owned() * ut;
        y[t] = ssm.c_bar.row(0).dot(&state);
    }
    y
}

/// Spectral radius via power iteration, used in stability checks.
pub fn spectral_radius(a: &Array2<f64>, iters: usize) -> f64 {
    let d = a.nrows();
    let mut v = Array1::<f64>::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut radius = 0.0;
    for _ in 0..iters {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        radius = norm;
        v = w / norm;
    }
    radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stable_ssm(d: usize, seed: u64) -> SsmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.5..0.5));
        for i in 0..d {
            a[[i, i]] -= 1.0;
        }
        let b = Array2::from_shape_fn((d, 1), |_| rng.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((1, d), |_| rng.gen_range(-1.0..1.0));
        SsmParams { a, b, c, step: rng.gen_range(0.01..0.2) }
    }

    #[test]
    fn hippo_closed_form() {
        let a = hippo_init(4).unwrap();
        assert_eq!(a[[0, 0]], -1.0);
        assert!((a[[1, 0]] + 3.0f64.sqrt()).abs() < 1e-15);
        // strictly lower-triangular-plus-diagonal
        for n in 0..4 {
            for k in n + 1..4 {
                assert_eq!(a[[n, k]], 0.0);
            }
        }
        assert!(hippo_init(0).is_err());
    }

    #[test]
    fn discretize_zero_dynamics() {
        let d = 3;
        let params = SsmParams {
            a: Array2::zeros((d, d)),
            b: Array2::from_elem((d, 1), 2.0),
            c: Array2::ones((1, d)),
            step: 0.5,
        };
        let disc = discretize(&params).unwrap();
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((disc.a_bar[[i, j]] - expect).abs() < 1e-14);
            }
            assert!((disc.b_bar[[i, 0]] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn discretize_small_step_approaches_identity() {
        let params = SsmParams {
            a: hippo_init(4).unwrap(),
            b: Array2::ones((4, 1)),
            c: Array2::ones((1, 4)),
            step: 1e-9,
        };
        let disc = discretize(&params).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((disc.a_bar[[i, j]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_residual_identity() {
        let params = random_stable_ssm(4, 42);
        let disc = discretize(&params).unwrap();
        let eye = Array2::<f64>::eye(4);
        let half = &params.a * (params.step / 2.0);
        let lhs = disc.a_bar.dot(&(&eye - &half));
        let rhs = &eye + &half;
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_first_tap_and_scalar_system() {
        let disc = DiscreteSsm {
            a_bar: arr2(&[[0.5]]),
            b_bar: arr2(&[[2.0]]),
            c_bar: arr2(&[[3.0]]),
        };
        let k = compute_kernel(&disc, 5).unwrap();
        for i in 0..5 {
            let expect = 3.0 * 0.5f64.powi(i as i32) * 2.0;
            assert!((k.taps[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_matches_matrix_powers() {
        let params = random_stable_ssm(4, 7);
        let disc = discretize(&params).unwrap();
        let k = compute_kernel(&disc, 16).unwrap();
        let mut power = Array2::<f64>::eye(4);
        for i in 0..16 {
            let expect = disc.c_bar.dot(&power).dot(&disc.b_bar)[[0, 0]];
            assert!((k.taps[i] - expect).abs() < 1e-8, "tap {i}");
            power = disc.a_bar.dot(&power);
        }
    }

    #[test]
    fn impulse_response_is_kernel() {
        let params = random_stable_ssm(3, 9);
        let disc = discretize(&params).unwrap();
        let k = compute_kernel(&disc, 12).unwrap();
        let mut u = Array1::<f64>::zeros(12);
        u[0] = 1.0;
        let y = s4_apply_conv(&u, &k).unwrap();
        for i in 0..12 {
            assert!((y[i] - k.taps[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_kernel_passes_input() {
        let mut taps = Array1::<f64>::zeros(8);
        taps[0] = 1.0;
        let k = ConvKernel { taps };
        let u = Array1::from_shape_fn(8, |i| (i as f64).sin());
        let y = s4_apply_conv(&u, &k).unwrap();
        assert_eq!(y, u);
    }

    #[test]
    fn conv_matches_recurrent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let d = rng.gen_range(1..=8);
            let l = rng.gen_range(4..=64);
            let params = random_stable_ssm(d, 1000 + trial);
            let disc = discretize(&params).unwrap();
            let k = compute_kernel(&disc, l).unwrap();
            let u = Array1::from_shape_fn(l, |_| rng.gen_range(-2.0..2.0));
            let yc = s4_apply_conv(&u, &k).unwrap();
            let yr = s4_apply_recurrent(&u, &disc);
            let scale = yr.iter().map(|v| v.abs()).fold(1e-9, f64::max);
            for (a, b) in yc.iter().zip(yr.iter()) {
                assert!((a - b).abs() / scale < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn recurrent_trivial_cases() {
        let params = random_stable_ssm(4, 5);
        let disc = discretize(&params).unwrap();
        let zeros = Array1::<f64>::zeros(10);
        assert!(s4_apply_recurrent(&zeros, &disc).iter().all(|&v| v == 0.0));
        let u1 = Array1::from_vec(vec![1.7]);
        let y1 = s4_apply_recurrent(&u1, &disc);
        let expect = disc.c_bar.dot(&disc.b_bar)[[0, 0]] * 1.7;
        assert!((y1[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn linearity_and_causality() {
        let params = random_stable_ssm(6, 13);
        let disc = discretize(&params).unwrap();
        let k = compute_kernel(&disc, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u: Array1<f64> = Array1::from_shape_fn(32, |_| rng.gen_range(-1.0..1.0));
        let v: Array1<f64> = Array1::from_shape_fn(32, |_| rng.gen_range(-1.0..1.0));
        let (alpha, beta) = (0.7, -1.3);
        let lin = s4_apply_conv(&(&u * alpha + &v * beta), &k).unwrap();
        let yu = s4_apply_conv(&u, &k).unwrap();
        let yv = s4_apply_conv(&v, &k).unwrap();
        for t in 0..32 {
            assert!((lin[t] - (alpha * yu[t] + beta * yv[t])).abs() < 1e-8);
        }
        // perturb a future input; past outputs unchanged
        let mut u2 = u.clone();
        u2[20] += 5.0;
        let y2 = s4_apply_conv(&u2, &k).unwrap();
        for t in 0..20 {
            assert_eq!(yu[t], y2[t]);
        }
    }

    #[test]
    fn hippo_discretization_is_stable() {
        for d in [2usize, 4, 8, 16] {
            for &dt in &[0.001, 0.01, 0.1, 1.0] {
                let params = SsmParams {
                    a: hippo_init(d).unwrap(),
                    b: Array2::ones((d, 1)),
                    c: Array2::ones((1, d)),
                    step: dt,
                };
                let disc = discretize(&params).unwrap();
                let rho = spectral_radius(&disc.a_bar, 200);
                assert!(rho <= 1.0 + 1e-9, "spectral radius {rho} at d={d}, dt={dt}");
            }
        }
    }
}
