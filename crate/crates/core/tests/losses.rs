use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfda_core::losses::*;
use sfda_core::SfdaError;
use sfda_tensor::gradcheck::check_gradients;
use sfda_tensor::{Tape, Tensor, Var};

const SEEDS: u64 = 20;

fn value(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn with_logits(shape: &[usize], data: &[f64], f: impl Fn(&mut Tape<f64>, Var) -> sfda_core::Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_f64(shape, data).unwrap());
    let out = f(&mut tape, x).unwrap();
    value(&tape, out)
}

fn random_logits(rng: &mut ChaCha8Rng, b: usize, k: usize, scale: f64) -> Vec<f64> {
    (0..b * k).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn random_soft(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * k);
    for _ in 0..b {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / s));
    }
    out
}

// Scalar oracles: written straight from the loss definitions, one row at a time.

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn xlogx(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

fn oracle_soft_ce(z: &[f64], target: &[f64], k: usize) -> f64 {
    let b = z.len() / k;
    let mut total = 0.0;
    for i in 0..b {
        let p = softmax_row(&z[i * k..(i + 1) * k]);
        for c in 0..k {
            total -= target[i * k + c] * p[c].ln();
        }
    }
    total / b as f64
}

fn oracle_ce_smooth(z: &[f64], y: &[usize], k: usize, s: f64) -> f64 {
    let mut t = vec![s / k as f64; z.len()];
    for (i, &c) in y.iter().enumerate() {
        t[i * k + c] += 1.0 - s;
    }
    oracle_soft_ce(z, &t, k)
}

fn oracle_im(z: &[f64], k: usize) -> f64 {
    let b = z.len() / k;
    let mut ent = 0.0;
    let mut pbar = vec![0.0; k];
    for i in 0..b {
        let p = softmax_row(&z[i * k..(i + 1) * k]);
        for c in 0..k {
            ent -= xlogx(p[c]);
            pbar[c] += p[c] / b as f64;
        }
    }
    ent / b as f64 + pbar.iter().map(|&v| xlogx(v)).sum::<f64>()
}

#[test]
fn ce_smooth_uniform_two_class_is_ln2() {
    let v = with_logits(&[1, 2], &[0.0, 0.0], |t, x| ce_smooth(t, x, &[0], 0.1));
    assert!((v - 2f64.ln()).abs() <= 1e-12, "{v}");
}

#[test]
fn ce_smooth_saturated_correct_goes_to_zero() {
    let v = with_logits(&[1, 3], &[60.0, 0.0, 0.0], |t, x| ce_smooth(t, x, &[0], 0.0));
    assert!(v.abs() < 1e-20, "{v}");
}

#[test]
fn ce_smooth_three_class_scalar_oracle() {
    // ŷ = (0.9 + 0.1/3, 0.1/3, 0.1/3), σ(1,0,0) = (e, 1, 1)/(e + 2)
    let e = 1f64.exp();
    let denom = e + 2.0;
    let expect = -((0.9 + 0.1 / 3.0) * (e / denom).ln() + 2.0 * (0.1 / 3.0) * (1.0 / denom).ln());
    let v = with_logits(&[1, 3], &[1.0, 0.0, 0.0], |t, x| ce_smooth(t, x, &[0], 0.1));
    assert!((v - expect).abs() <= 1e-14, "{v} vs {expect}");
}

#[test]
fn ce_smooth_matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..SEEDS {
        let (b, k) = (rng.gen_range(1..6), rng.gen_range(2..6));
        let z = random_logits(&mut rng, b, k, 4.0);
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let v = with_logits(&[b, k], &z, |t, x| ce_smooth(t, x, &y, 0.1));
        assert!((v - oracle_ce_smooth(&z, &y, k, 0.1)).abs() <= 1e-12);
    }
}

#[test]
fn im_uniform_batch_is_zero() {
    for k in 2..7 {
        let z = vec![0.3; 5 * k];
        let v = with_logits(&[5, k], &z, im_loss);
        assert!(v.abs() <= 1e-9, "K={k}: {v}");
    }
}

#[test]
fn im_confident_balanced_batch_is_minus_ln_k() {
    for k in 2..7 {
        let mut z = vec![0.0; k * k];
        for i in 0..k {
            z[i * k + i] = 50.0;
        }
        let v = with_logits(&[k, k], &z, im_loss);
        assert!((v + (k as f64).ln()).abs() <= 1e-6, "K={k}: {v}");
    }
}

#[test]
fn im_matches_scalar_oracle_on_random_4x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..SEEDS {
        let z = random_logits(&mut rng, 4, 3, 3.0);
        let v = with_logits(&[4, 3], &z, im_loss);
        assert!((v - oracle_im(&z, 3)).abs() <= 1e-12);
    }
}

#[test]
fn sl_examples() {
    let v = with_logits(&[1, 2], &[0.0, 0.0], |t, x| sl_loss(t, x, &[0]));
    assert!((v - 2f64.ln()).abs() <= 1e-15);
    let v = with_logits(&[1, 2], &[0.0, 60.0], |t, x| sl_loss(t, x, &[1]));
    assert!(v.abs() < 1e-20);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..SEEDS {
        let z = random_logits(&mut rng, 4, 3, 3.0);
        let y: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let v = with_logits(&[4, 3], &z, |t, x| sl_loss(t, x, &y));
        assert!((v - oracle_ce_smooth(&z, &y, 3, 0.0)).abs() <= 1e-12);
    }
}

#[test]
fn kd_one_hot_is_bitwise_sl() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let (b, k) = (rng.gen_range(1..9), rng.gen_range(2..7));
        let z = random_logits(&mut rng, b, k, 5.0);
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let mut hot = vec![0.0; b * k];
        for (i, &c) in y.iter().enumerate() {
            hot[i * k + c] = 1.0;
        }
        let soft = Tensor::from_f64(&[b, k], &hot).unwrap();
        let kd = with_logits(&[b, k], &z, |t, x| kd_loss(t, x, &soft));
        let sl = with_logits(&[b, k], &z, |t, x| sl_loss(t, x, &y));
        assert_eq!(kd.to_bits(), sl.to_bits(), "{kd} vs {sl}");
    }
}

#[test]
fn kd_uniform_targets_at_zero_logits_is_ln_k() {
    for k in 2..7 {
        let soft = Tensor::full(&[3, k], 1.0 / k as f64);
        let v = with_logits(&[3, k], &vec![0.0; 3 * k], |t, x| kd_loss(t, x, &soft));
        assert!((v - (k as f64).ln()).abs() <= 1e-12);
    }
}

#[test]
fn kd_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..SEEDS {
        let z = random_logits(&mut rng, 5, 4, 3.0);
        let s = random_soft(&mut rng, 5, 4);
        let soft = Tensor::from_f64(&[5, 4], &s).unwrap();
        let v = with_logits(&[5, 4], &z, |t, x| kd_loss(t, x, &soft));
        assert!((v - oracle_soft_ce(&z, &s, 4)).abs() <= 1e-12);
    }
}

fn total_of(im: f64, sl: f64, kd: f64, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let (a, b, c) = (
        tape.constant(Tensor::scalar(im)),
        tape.constant(Tensor::scalar(sl)),
        tape.constant(Tensor::scalar(kd)),
    );
    let t = total_target_loss(&mut tape, a, b, c, cfg).unwrap();
    value(&tape, t)
}

#[test]
fn total_examples() {
    assert!((total_of(1.0, 1.0, 1.0, &LossConfig::default()) - 2.3).abs() < 1e-15);
    let cfg = LossConfig {
        alpha_sl: 0.0,
        beta_kd: 0.0,
        ..LossConfig::default()
    };
    assert_eq!(total_of(0.7, 5.0, 9.0, &cfg), 0.7);
}

#[test]
fn loss_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        ce_smooth(&mut tape, x, &[0, 3], 0.1),
        Err(SfdaError::Contract(_))
    ));
    assert!(matches!(sl_loss(&mut tape, x, &[5, 0]), Err(SfdaError::Contract(_))));
    assert!(matches!(sl_loss(&mut tape, x, &[0]), Err(SfdaError::Dimension(_))));
    let bad = Tensor::from_f64(&[2, 3], &[0.5, 0.5, 0.5, 0.2, 0.3, 0.5]).unwrap();
    assert!(matches!(kd_loss(&mut tape, x, &bad), Err(SfdaError::Contract(_))));
    assert!(matches!(
        kd_loss(&mut tape, x, &Tensor::full(&[3, 2], 0.5)),
        Err(SfdaError::Dimension(_))
    ));
    let flat = tape.constant(Tensor::zeros(&[6]));
    assert!(matches!(im_loss(&mut tape, flat), Err(SfdaError::Dimension(_))));
    for (s, a, b) in [
        (1.0, 0.3, 1.0),
        (-0.1, 0.3, 1.0),
        (0.1, -1.0, 1.0),
        (0.1, 0.3, f64::NAN),
    ] {
        let cfg = LossConfig {
            smoothing: s,
            alpha_sl: a,
            beta_kd: b,
        };
        assert!(matches!(cfg.validate(), Err(SfdaError::Config(_))));
    }
    LossConfig::default().validate().unwrap();
}

// ------------------------------------------------------------ gradients

fn lift(e: SfdaError) -> sfda_tensor::TensorError {
    sfda_tensor::TensorError::Contract(e.to_string())
}

fn gradcheck(name: &str, f: impl Fn(&mut ChaCha8Rng, usize, usize) -> f64) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = (rng.gen_range(1..6), rng.gen_range(2..6));
        let err = f(&mut rng, b, k);
        assert!(err <= 1e-4, "{name} seed {seed}: relative error {err}");
    }
}

#[test]
fn gradcheck_ce_smooth() {
    gradcheck("ce_smooth", |rng, b, k| {
        let z = Tensor::from_f64(&[b, k], &random_logits(rng, b, k, 3.0)).unwrap();
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        check_gradients(&[z], None, 1e-5, |t, v| ce_smooth(t, v[0], &y, 0.1).map_err(lift))
            .unwrap()
            .max_rel_error
    });
}

#[test]
fn gradcheck_im() {
    gradcheck("im_loss", |rng, b, k| {
        let z = Tensor::from_f64(&[b, k], &random_logits(rng, b, k, 3.0)).unwrap();
        check_gradients(&[z], None, 1e-5, |t, v| im_loss(t, v[0]).map_err(lift))
            .unwrap()
            .max_rel_error
    });
}

#[test]
fn gradcheck_sl() {
    gradcheck("sl_loss", |rng, b, k| {
        let z = Tensor::from_f64(&[b, k], &random_logits(rng, b, k, 3.0)).unwrap();
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        check_gradients(&[z], None, 1e-5, |t, v| sl_loss(t, v[0], &y).map_err(lift))
            .unwrap()
            .max_rel_error
    });
}

#[test]
fn gradcheck_kd() {
    gradcheck("kd_loss", |rng, b, k| {
        let z = Tensor::from_f64(&[b, k], &random_logits(rng, b, k, 3.0)).unwrap();
        let soft = Tensor::from_f64(&[b, k], &random_soft(rng, b, k)).unwrap();
        check_gradients(&[z], None, 1e-5, |t, v| kd_loss(t, v[0], &soft).map_err(lift))
            .unwrap()
            .max_rel_error
    });
}

/// The gradient of the total is checked against finite differences of the
/// total; that it equals the weighted component gradients then follows from
/// checking each component above.
#[test]
fn gradcheck_total() {
    gradcheck("total_target_loss", |rng, b, k| {
        let z = Tensor::from_f64(&[b, k], &random_logits(rng, b, k, 3.0)).unwrap();
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let soft = Tensor::from_f64(&[b, k], &random_soft(rng, b, k)).unwrap();
        let cfg = LossConfig::default();
        check_gradients(&[z], None, 1e-5, |t, v| {
            let im = im_loss(t, v[0]).map_err(lift)?;
            let sl = sl_loss(t, v[0], &y).map_err(lift)?;
            let kd = kd_loss(t, v[0], &soft).map_err(lift)?;
            total_target_loss(t, im, sl, kd, &cfg).map_err(lift)
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn total_gradient_is_weighted_component_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (b, k) = (4, 3);
    let z = Tensor::from_f64(&[b, k], &random_logits(&mut rng, b, k, 2.0)).unwrap();
    let y = [0, 2, 1, 1];
    let soft = Tensor::from_f64(&[b, k], &random_soft(&mut rng, b, k)).unwrap();
    let cfg = LossConfig::default();
    let grad_of = |which: u8| -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.variable(z.clone());
        let im = im_loss(&mut t, x).unwrap();
        let sl = sl_loss(&mut t, x, &y).unwrap();
        let kd = kd_loss(&mut t, x, &soft).unwrap();
        let out = match which {
            0 => im,
            1 => sl,
            2 => kd,
            _ => total_target_loss(&mut t, im, sl, kd, &cfg).unwrap(),
        };
        t.backward(out).unwrap().take(x).unwrap()
    };
    let (gi, gs, gk, gt) = (grad_of(0), grad_of(1), grad_of(2), grad_of(3));
    for j in 0..b * k {
        let expect = gi[j] + cfg.alpha_sl * gs[j] + cfg.beta_kd * gk[j];
        assert!((gt[j] - expect).abs() <= 1e-12);
    }
}

// ------------------------------------------------------------ properties

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_shift_invariant(seed in 0u64..10_000, shift in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = (rng.gen_range(1..6), rng.gen_range(2..6));
        let z = random_logits(&mut rng, b, k, 4.0);
        // a different constant per row
        let shifts: Vec<f64> = (0..b).map(|i| shift * (i as f64 + 1.0)).collect();
        let zs: Vec<f64> = z.iter().enumerate().map(|(j, v)| v + shifts[j / k]).collect();
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let soft = Tensor::from_f64(&[b, k], &random_soft(&mut rng, b, k)).unwrap();
        let pairs: [(f64, f64); 4] = [
            (with_logits(&[b, k], &z, |t, x| ce_smooth(t, x, &y, 0.1)), with_logits(&[b, k], &zs, |t, x| ce_smooth(t, x, &y, 0.1))),
            (with_logits(&[b, k], &z, im_loss), with_logits(&[b, k], &zs, im_loss)),
            (with_logits(&[b, k], &z, |t, x| sl_loss(t, x, &y)), with_logits(&[b, k], &zs, |t, x| sl_loss(t, x, &y))),
            (with_logits(&[b, k], &z, |t, x| kd_loss(t, x, &soft)), with_logits(&[b, k], &zs, |t, x| kd_loss(t, x, &soft))),
        ];
        for (a, s) in pairs {
            prop_assert!((a - s).abs() <= 1e-10, "{} vs {}", a, s);
        }
    }

    #[test]
    fn im_is_bounded_by_ln_k(seed in 0u64..10_000, scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = (rng.gen_range(1..8), rng.gen_range(2..7));
        let z = random_logits(&mut rng, b, k, scale);
        let v = with_logits(&[b, k], &z, im_loss);
        let ln_k = (k as f64).ln();
        prop_assert!(v >= -ln_k - 1e-12 && v <= ln_k + 1e-12, "{}", v);
    }

    #[test]
    fn ce_smooth_respects_gibbs(seed in 0u64..10_000, smoothing in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(2..6);
        let z = random_logits(&mut rng, 1, k, 4.0);
        let y = rng.gen_range(0..k);
        let v = with_logits(&[1, k], &z, |t, x| ce_smooth(t, x, &[y], smoothing));
        let target: Vec<f64> = (0..k).map(|c| smoothing / k as f64 + if c == y { 1.0 - smoothing } else { 0.0 }).collect();
        let h: f64 = -target.iter().map(|&p| xlogx(p)).sum::<f64>();
        prop_assert!(v >= h - 1e-12);
        // equality when the prediction is the target itself
        let zt: Vec<f64> = target.iter().map(|p| p.max(1e-300).ln()).collect();
        if smoothing > 0.0 {
            let eq = with_logits(&[1, k], &zt, |t, x| ce_smooth(t, x, &[y], smoothing));
            prop_assert!((eq - h).abs() <= 1e-10, "{} vs {}", eq, h);
        }
    }
}
