use astro_float::{BigFloat, Consts, RoundingMode};
use fedemb_core::accounting::{default_orders, rdp_subsampled_gaussian_step, rdp_to_dp};

const P: usize = 128;
const RM: RoundingMode = RoundingMode::ToEven;

fn big(x: f64) -> BigFloat {
    BigFloat::from_f64(x, P)
}

fn to_f64(b: &BigFloat) -> f64 {
    b.to_string().parse().expect("decimal rendering")
}

/// Direct binomial sum for integer orders at 128-bit precision.
fn oracle_rdp(q: f64, sigma: f64, alpha: usize, cc: &mut Consts) -> f64 {
    let one = big(1.0);
    let q_b = big(q);
    let one_minus_q = one.sub(&q_b, P, RM);
    let two_s2 = big(2.0 * sigma * sigma);
    let mut total = big(0.0);
    let mut binom = big(1.0);
    for k in 0..=alpha {
        if k > 0 {
            binom = binom
                .mul(&big((alpha - k + 1) as f64), P, RM)
                .div(&big(k as f64), P, RM);
        }
        let expo = big((k * k.saturating_sub(1)) as f64).div(&two_s2, P, RM).exp(P, RM, cc);
        let term = binom
            .mul(&q_b.powi(k, P, RM), P, RM)
            .mul(&one_minus_q.powi(alpha - k, P, RM), P, RM)
            .mul(&expo, P, RM);
        total = total.add(&term, P, RM);
    }
    to_f64(&total.ln(P, RM, cc).div(&big((alpha - 1) as f64), P, RM))
}

#[test]
fn integer_orders_match_high_precision_sum() {
    let mut cc = Consts::new().unwrap();
    let orders: Vec<f64> = (2..=64).map(f64::from).collect();
    let mut worst: f64 = 0.0;
    for &q in &[0.001, 0.01, 0.1, 0.5, 1.0] {
        for &sigma in &[0.5, 1.0, 1.28, 4.0] {
            let got = rdp_subsampled_gaussian_step(q, sigma, &orders).unwrap();
            for (i, &alpha) in orders.iter().enumerate() {
                let want = oracle_rdp(q, sigma, alpha as usize, &mut cc);
                let rel = ((got[i] - want) / want).abs();
                worst = worst.max(rel);
                assert!(rel < 1e-8, "q={q} sigma={sigma} alpha={alpha}: {} vs {want}", got[i]);
            }
        }
    }
    assert!(worst < 1e-8);
}

#[test]
fn full_sampling_is_closed_form() {
    let orders = default_orders();
    let got = rdp_subsampled_gaussian_step(1.0, 1.7, &orders).unwrap();
    for (a, r) in orders.iter().zip(&got) {
        assert!((r - a / (2.0 * 1.7 * 1.7)).abs() <= 1e-12 * r);
    }
    // Conversion over the same grid, minimized by hand.
    let delta: f64 = 1e-5;
    let want = orders
        .iter()
        .map(|a| a / 2.0 + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min);
    let step = rdp_subsampled_gaussian_step(1.0, 1.0, &orders).unwrap();
    let got = rdp_to_dp(&orders, &step, 1, delta).unwrap();
    assert!((got.epsilon - want).abs() < 1e-12);
    assert!((got.epsilon - 5.3026).abs() < 1e-3);
}

#[test]
fn fractional_orders_sit_between_neighbours() {
    let orders = [1.25, 1.5, 2.0, 3.0];
    for &(q, sigma) in &[(0.01, 1.0), (0.1, 2.0), (0.0131072, 1.28)] {
        let r = rdp_subsampled_gaussian_step(q, sigma, &orders).unwrap();
        // RDP is nondecreasing in the order.
        assert!(r[0] <= r[1] && r[1] <= r[2] && r[2] <= r[3], "{r:?}");
    }
    // Without subsampling the quadrature must agree with alpha / (2 sigma^2).
    let q1 = fedemb_core::accounting::log_a_quadrature(1.0 - 1e-15, 1.5, 1.5) / 0.5;
    assert!((q1 - 1.5 / (2.0 * 2.25)).abs() < 1e-8);
}
