use fedemb_core::model::{build_model, forward_loss_and_grads, init_head, Activation, Batch, MlpConfig};
use fedemb_core::{ParamVector, RngStream};
use ndarray::Array2;
use rand::Rng;

fn loss(theta: &[f64], omega: &[f64], cfg: &MlpConfig, batch: &Batch) -> f64 {
    forward_loss_and_grads(
        &ParamVector::new(theta.to_vec()).unwrap(),
        &ParamVector::new(omega.to_vec()).unwrap(),
        cfg,
        batch,
    )
    .unwrap()
    .loss
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let h = 1e-5;
    let mut rng = RngStream::new(99, 0).rng();
    for trial in 0..40u64 {
        let input_dim = rng.gen_range(2..6);
        let hidden: Vec<usize> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(2..7)).collect();
        let mut cfg = MlpConfig::new(input_dim, hidden, rng.gen_range(2..5));
        // ReLU kinks make finite differences unreliable; tanh is smooth.
        cfg.activation = Activation::Tanh;
        cfg.l2_normalize_embedding = trial % 2 == 1;
        let classes = rng.gen_range(2..5);
        let (theta, _) = build_model(&cfg, classes, &RngStream::new(trial, 1)).unwrap();
        let omega = init_head(classes, cfg.embed_dim, &RngStream::new(trial, 2)).unwrap();
        let n = rng.gen_range(1..6);
        let inputs = Array2::from_shape_fn((n, input_dim), |_| rng.gen_range(-1.5..1.5));
        let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let batch = Batch::new(inputs, labels).unwrap();
        let g = forward_loss_and_grads(&theta, &omega, &cfg, &batch).unwrap();

        let (t, o) = (theta.as_slice().to_vec(), omega.as_slice().to_vec());
        for i in 0..t.len() {
            let (mut p, mut m) = (t.clone(), t.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &o, &cfg, &batch) - loss(&m, &o, &cfg, &batch)) / (2.0 * h);
            let e = rel_err(g.g_theta.as_slice()[i], fd);
            assert!(e < 1e-5, "trial {trial} theta[{i}]: {} vs {fd}", g.g_theta.as_slice()[i]);
        }
        for i in 0..o.len() {
            let (mut p, mut m) = (o.clone(), o.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&t, &p, &cfg, &batch) - loss(&t, &m, &cfg, &batch)) / (2.0 * h);
            assert!(rel_err(g.g_omega.as_slice()[i], fd) < 1e-5, "trial {trial} omega[{i}]");
        }
    }
}
