//! Acceptance gate. Prints one PASS/FAIL line per criterion.
//!
//! The contract criteria (gradients, oracles, EMA/freeze, determinism) fail
//! the test when they fail. The empirical criteria measured on the 5-seed
//! ablation matrix only report: a miss there is a finding, not a bug.
//! `THREADS` runs that many seeds at once; `ACCEPTANCE_MATRIX=0` skips the
//! matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfda_core::adapt::{adapt_target, train_source, AdaptHooks};
use sfda_core::config::load_config;
use sfda_core::experiment::{
    arm_values, mean_std, run_matrix, write_jsonl, write_matrix_outputs, Arm, ExperimentConfig,
};
use sfda_core::losses::{ce_smooth, im_loss, kd_loss, sl_loss, total_target_loss, LossConfig};
use sfda_core::model::{Mode, Model, GROUP_CLASSIFIER};
use sfda_core::pseudo::pseudo_labels;
use sfda_tensor::gradcheck::{check_gradients, weighted_sum};
use sfda_tensor::{encode_checkpoint, Bindings, ParamKind, Tape, Tensor, TensorError, Var};
use std::path::PathBuf;
use std::time::Instant;

/// Writes past the test harness's output capture, so the verdicts show up in a
/// plain `cargo test` run.
macro_rules! show {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

struct Gate {
    lines: Vec<String>,
    contract_failures: Vec<&'static str>,
}

impl Gate {
    fn report(&mut self, name: &'static str, pass: bool, contract: bool, detail: String) {
        let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        show!("{line}");
        self.lines.push(line);
        if contract && !pass {
            self.contract_failures.push(name);
        }
    }
}

fn lift(e: sfda_core::SfdaError) -> TensorError {
    TensorError::Contract(e.to_string())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap()
}

fn soft_rows(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor<f64> {
    let mut out = Vec::with_capacity(b * k);
    for _ in 0..b {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![b, k], out).unwrap()
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;
type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

/// Worst relative error of `op` over 20 seeds, reduced through random weights.
fn worst_error(make: &Inputs, op: &Op) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = op(&mut tape, &vars).unwrap();
            tape.shape(out).to_vec()
        };
        let weights = uniform(&mut rng, &shape);
        let report = check_gradients(&inputs, None, 1e-5, |tape, vars| {
            let out = op(tape, vars)?;
            weighted_sum(tape, out, &weights)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn labels(b: usize, k: usize) -> Vec<usize> {
    (0..b).map(|i| (i * 7 + 3) % k).collect()
}

/// Fixed soft targets; they are not differentiated through.
fn fixed_soft() -> Tensor<f64> {
    soft_rows(&mut ChaCha8Rng::seed_from_u64(99), 4, 3)
}

fn gradient_cases() -> Vec<(&'static str, Inputs, Op)> {
    macro_rules! case {
        ($name:expr, |$r:ident| $inputs:expr, |$t:ident, $v:ident| $op:expr) => {
            (
                $name,
                Box::new(|$r: &mut ChaCha8Rng| $inputs) as Inputs,
                Box::new(|$t: &mut Tape<f64>, $v: &[Var]| $op) as Op,
            )
        };
    }
    vec![
        case!("matmul", |r| vec![uniform(r, &[3, 4]), uniform(r, &[4, 5])], |t, v| t
            .matmul(v[0], v[1])),
        case!(
            "matmul batched",
            |r| vec![uniform(r, &[2, 2, 3, 4]), uniform(r, &[2, 2, 4, 3])],
            |t, v| t.matmul(v[0], v[1])
        ),
        case!(
            "conv2d s1 p1",
            |r| vec![uniform(r, &[2, 5, 5, 2]), uniform(r, &[3, 3, 2, 3])],
            |t, v| t.conv2d(v[0], v[1], 1, 1)
        ),
        case!(
            "conv2d s2 p1",
            |r| vec![uniform(r, &[1, 6, 6, 2]), uniform(r, &[3, 3, 2, 2])],
            |t, v| t.conv2d(v[0], v[1], 2, 1)
        ),
        case!("relu", |r| vec![away_from_zero(r, &[3, 4])], |t, v| Ok(t.relu(v[0]))),
        case!(
            "add broadcast",
            |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[4])],
            |t, v| t.add(v[0], v[1])
        ),
        case!(
            "mul broadcast",
            |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[3, 4])],
            |t, v| t.mul(v[0], v[1])
        ),
        case!("scale", |r| vec![uniform(r, &[5])], |t, v| Ok(t.scale(v[0], -1.7))),
        case!("log", |r| vec![positive(r, &[2, 3])], |t, v| t.log(v[0])),
        case!("exp", |r| vec![uniform(r, &[2, 3])], |t, v| Ok(t.exp(v[0]))),
        case!("xlogx", |r| vec![positive(r, &[2, 3])], |t, v| t.xlogx(v[0])),
        case!("softmax", |r| vec![uniform(r, &[2, 3, 4])], |t, v| t.softmax(v[0], 1)),
        case!("log_softmax", |r| vec![uniform(r, &[3, 5])], |t, v| t
            .log_softmax(v[0], 1)),
        case!("sum", |r| vec![uniform(r, &[2, 3, 4])], |t, v| t.sum(v[0], 1)),
        case!("mean", |r| vec![uniform(r, &[2, 3, 4])], |t, v| t.mean(v[0], 2)),
        case!("avg_pool_global", |r| vec![uniform(r, &[2, 2, 3, 3])], |t, v| t
            .avg_pool_global(v[0])),
        case!("avg_pool2", |r| vec![uniform(r, &[2, 4, 4, 2])], |t, v| t
            .avg_pool2(v[0])),
        case!(
            "layer_norm",
            |r| vec![uniform(r, &[3, 5]), uniform(r, &[5]), uniform(r, &[5])],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)
        ),
        case!(
            "batch_norm train",
            |r| vec![uniform(r, &[4, 2, 3]), uniform(r, &[3]), uniform(r, &[3])],
            |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        ),
        case!(
            "batch_norm eval",
            |r| vec![uniform(r, &[4, 3]), uniform(r, &[3]), uniform(r, &[3])],
            |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
        ),
        case!("reshape", |r| vec![uniform(r, &[2, 6])], |t, v| t
            .reshape(v[0], &[3, 4])),
        case!("transpose", |r| vec![uniform(r, &[2, 3, 4])], |t, v| t
            .transpose(v[0], 0, 2)),
        case!("permute", |r| vec![uniform(r, &[2, 3, 4, 2])], |t, v| t
            .permute(v[0], &[0, 2, 1, 3])),
        case!("concat", |r| vec![uniform(r, &[2, 3]), uniform(r, &[2, 1])], |t, v| t
            .concat(v, 1)),
        case!("gather_rows", |r| vec![uniform(r, &[4, 3])], |t, v| t
            .gather_rows(v[0], &[3, 0, 3, 1])),
        case!("ce_smooth", |r| vec![Tensor::uniform(&[5, 4], 3.0, r)], |t, v| {
            ce_smooth(t, v[0], &labels(5, 4), 0.1).map_err(lift)
        }),
        case!("im_loss", |r| vec![Tensor::uniform(&[5, 4], 3.0, r)], |t, v| im_loss(
            t, v[0]
        )
        .map_err(lift)),
        case!("sl_loss", |r| vec![Tensor::uniform(&[5, 3], 3.0, r)], |t, v| sl_loss(
            t,
            v[0],
            &labels(5, 3)
        )
        .map_err(lift)),
        case!("kd_loss", |r| vec![Tensor::uniform(&[4, 3], 3.0, r)], |t, v| kd_loss(
            t,
            v[0],
            &fixed_soft()
        )
        .map_err(lift)),
        case!(
            "total_target_loss",
            |r| vec![Tensor::uniform(&[4, 3], 3.0, r)],
            |t, v| {
                let soft = fixed_soft();
                let im = im_loss(t, v[0]).map_err(lift)?;
                let sl = sl_loss(t, v[0], &labels(4, 3)).map_err(lift)?;
                let kd = kd_loss(t, v[0], &soft).map_err(lift)?;
                total_target_loss(t, im, sl, kd, &LossConfig::default()).map_err(lift)
            }
        ),
    ]
}

/// Gradient of ce + im through the whole hybrid model, with respect to every trainable tensor.
fn model_gradient_error(seed: u64) -> f64 {
    let cfg = tiny_model(true, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let mut m = Model::<f64>::new(cfg, seed).unwrap();
    for e in m
        .params
        .entries_mut()
        .iter_mut()
        .filter(|e| e.kind == ParamKind::Trainable)
    {
        let shape = e.tensor.shape().to_vec();
        e.tensor = Tensor::uniform(&shape, 0.5, &mut rng);
    }
    let x = Tensor::uniform(&[2, 3, 8, 8], 1.0, &mut rng);
    let names: Vec<String> = m
        .params
        .entries()
        .iter()
        .filter(|e| e.kind == ParamKind::Trainable)
        .map(|e| e.name.clone())
        .collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| m.params.get(n).unwrap().clone()).collect();
    check_gradients(&inputs, None, 1e-5, |tape, vars: &[Var]| {
        let b: Bindings = names.iter().cloned().zip(vars.iter().copied()).collect();
        let xv = tape.constant(x.clone());
        let out = m.forward(tape, &b, xv, Mode::Train).map_err(lift)?;
        let ce = ce_smooth(tape, out.logits, &[0, 1], 0.1).map_err(lift)?;
        let im = im_loss(tape, out.logits).map_err(lift)?;
        tape.add(ce, im)
    })
    .unwrap()
    .max_rel_error
}

fn tiny_model(transformer: bool, k: usize) -> sfda_core::model::ModelConfig {
    use sfda_core::model::*;
    ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            conv_channels: vec![4, 6],
            image_side: 8,
        },
        transformer: transformer.then_some(TransformerConfig {
            num_layers: 1,
            num_heads: 2,
            embed_dim: 8,
            mlp_hidden: 8,
            positional_embedding: false,
        }),
        head: HeadConfig {
            bottleneck_dim: 4,
            num_classes: k,
        },
    }
}

fn gradient_suite(gate: &mut Gate) {
    let t = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (name, make, op) in gradient_cases() {
        let e = worst_error(&make, &op);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    for seed in 0..20 {
        let e = model_gradient_error(seed);
        if e > worst.0 {
            worst = (e, "full model");
        }
    }
    let secs = t.elapsed().as_secs_f64();
    gate.report(
        "gradient suite",
        worst.0 <= 1e-4 && secs < 120.0,
        true,
        format!(
            "worst relative error {:.2e} ({}) <= 1e-4, {secs:.1}s < 120s",
            worst.0, worst.1
        ),
    );
}

fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn loss_oracles(gate: &mut Gate) {
    let k = 4usize;
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_f64(&[3, k], &[0.7; 12]).unwrap());
    let uniform_im = im_loss(&mut tape, z).unwrap();
    let uniform_im = scalar(&tape, uniform_im);

    // one confident sample per class
    let mut data = vec![-40.0; k * k];
    (0..k).for_each(|i| data[i * k + i] = 40.0);
    let z = tape.constant(Tensor::from_f64(&[k, k], &data).unwrap());
    let confident_im = im_loss(&mut tape, z).unwrap();
    let confident_im = scalar(&tape, confident_im);

    let z = tape.constant(Tensor::from_f64(&[1, 2], &[0.3, 0.3]).unwrap());
    let ce = ce_smooth(&mut tape, z, &[1], 0.1).unwrap();
    let ce = scalar(&tape, ce);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut kd_equal = true;
    for _ in 0..200 {
        let (b, k) = (rng.gen_range(1..8), rng.gen_range(2..7));
        let logits: Vec<f64> = (0..b * k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let hot: Vec<f64> = y
            .iter()
            .flat_map(|&c| (0..k).map(move |j| f64::from(u8::from(j == c))))
            .collect();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_f64(&[b, k], &logits).unwrap());
        let sl = sl_loss(&mut tape, z, &y).unwrap();
        let sl = scalar(&tape, sl);
        let kd = kd_loss(&mut tape, z, &Tensor::from_f64(&[b, k], &hot).unwrap()).unwrap();
        let kd = scalar(&tape, kd);
        kd_equal &= sl.to_bits() == kd.to_bits();
    }

    let e1 = uniform_im.abs();
    let e2 = (confident_im + (k as f64).ln()).abs();
    let e3 = (ce - 2f64.ln()).abs();
    gate.report(
        "analytic loss oracles",
        e1 <= 1e-9 && e2 <= 1e-6 && e3 <= 1e-12 && kd_equal,
        true,
        format!(
            "|im uniform| {e1:.1e} <= 1e-9, |im confident + ln K| {e2:.1e} <= 1e-6, |ce - ln 2| {e3:.1e} <= 1e-12, kd(one-hot) == sl bitwise: {kd_equal}"
        ),
    );
}

type Rows = Vec<Vec<f64>>;

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn nearest(f: &Rows, mu: &Rows) -> Vec<usize> {
    f.iter()
        .map(|x| {
            (1..mu.len()).fold(0, |best, c| {
                if cos_dist(x, &mu[c]) < cos_dist(x, &mu[best]) {
                    c
                } else {
                    best
                }
            })
        })
        .collect()
}

/// Weighted means, nearest-centroid labels, then one plain k-means step.
fn brute_force(f: &Rows, p: &Rows) -> Vec<usize> {
    let (k, d) = (p[0].len(), f[0].len());
    let mu0: Rows = (0..k)
        .map(|c| {
            let w: f64 = p.iter().map(|r| r[c]).sum();
            (0..d)
                .map(|j| f.iter().zip(p).map(|(x, r)| r[c] * x[j]).sum::<f64>() / w)
                .collect()
        })
        .collect();
    let y0 = nearest(f, &mu0);
    let mu1: Rows = (0..k)
        .map(|c| {
            let members: Vec<&Vec<f64>> = f.iter().zip(&y0).filter(|(_, &y)| y == c).map(|(x, _)| x).collect();
            if members.is_empty() {
                mu0[c].clone()
            } else {
                (0..d)
                    .map(|j| members.iter().map(|x| x[j]).sum::<f64>() / members.len() as f64)
                    .collect()
            }
        })
        .collect();
    nearest(f, &mu1)
}

fn clustering_oracle(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut matched = 0;
    for _ in 0..50 {
        let (n, k, d) = (rng.gen_range(1..=64), rng.gen_range(2..=5), rng.gen_range(2..=8));
        let f: Rows = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let p: Rows = (0..n)
            .map(|_| {
                let e: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0f64..3.0).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect();
        let ft = Tensor::new(vec![n, d], f.concat()).unwrap();
        let pt = Tensor::new(vec![n, k], p.concat()).unwrap();
        let (labels, _) = pseudo_labels(&ft, &pt, 0.1).unwrap();
        matched += usize::from(labels.hard == brute_force(&f, &p));
    }
    gate.report(
        "clustering oracle",
        matched == 50,
        true,
        format!("{matched}/50 instances label-for-label"),
    );
}

fn small_bench(seed: u64) -> sfda_core::data::Benchmark {
    use sfda_core::data::*;
    make_split(
        SplitMode::Closed,
        3,
        SplitSizes { train: 48, eval: 24 },
        seed,
        &DomainSpec::default_source(),
        &DomainSpec::default_target(),
        8,
    )
    .unwrap()
}

fn adapt_cfg(ema: f64) -> sfda_core::adapt::AdaptConfig {
    sfda_core::adapt::AdaptConfig {
        batch_size: 16,
        source_epochs: 2,
        target_epochs: 2,
        ema_momentum: ema,
        ..Default::default()
    }
}

fn params<T: sfda_tensor::Real>(m: &Model<T>, only: impl Fn(&str) -> bool) -> Vec<Vec<f64>> {
    m.params
        .entries()
        .iter()
        .filter(|e| only(e.group.as_str()))
        .map(|e| e.tensor.data().iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn ema_and_freeze(gate: &mut Gate) {
    let b = small_bench(3);

    // classifier frozen, both backbones
    let mut frozen = true;
    for transformer in [false, true] {
        let cfg = adapt_cfg(0.99);
        let m = Model::<f32>::new(tiny_model(transformer, 3), 1).unwrap();
        let (source, _) = train_source(m, &b.source.train, &cfg).unwrap();
        let state = adapt_target(&source, &b.target.train, &cfg, AdaptHooks::default()).unwrap();
        let bits = |m: &Model<f32>| -> Vec<u64> {
            params(m, |g| g == GROUP_CLASSIFIER)
                .concat()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        frozen &= bits(&state.student) == bits(&source) && bits(&state.teacher) == bits(&source);
    }

    // EMA replay
    let cfg = adapt_cfg(0.9);
    let m = Model::<f64>::new(tiny_model(true, 3), 2).unwrap();
    let (source, _) = train_source(m, &b.source.train, &cfg).unwrap();
    let mut trajectory = Vec::new();
    let mut record = |s: &Model<f64>, _: &Model<f64>| trajectory.push(params(s, |_| true));
    let hooks = AdaptHooks {
        on_step: Some(&mut record),
        ..AdaptHooks::default()
    };
    let state = adapt_target(&source, &b.target.train, &cfg, hooks).unwrap();
    let mut replay = params(&source, |_| true);
    for s in &trajectory {
        for (t, v) in replay.iter_mut().zip(s) {
            t.iter_mut().zip(v).for_each(|(a, &b)| *a = 0.9 * *a + 0.1 * b);
        }
    }
    let replay_err = replay
        .iter()
        .flatten()
        .zip(params(&state.teacher, |_| true).iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // momentum 0: teacher is the student after every step
    let cfg = adapt_cfg(0.0);
    let mut tracked = true;
    let mut check = |s: &Model<f64>, t: &Model<f64>| {
        let bits = |m: &Model<f64>| {
            params(m, |_| true)
                .concat()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        tracked &= bits(s) == bits(t);
    };
    let hooks = AdaptHooks {
        on_step: Some(&mut check),
        ..AdaptHooks::default()
    };
    adapt_target(&source, &b.target.train, &cfg, hooks).unwrap();

    // momentum 1: teacher is the source model
    let state = adapt_target(&source, &b.target.train, &adapt_cfg(1.0), AdaptHooks::default()).unwrap();
    let still = params(&state.teacher, |_| true) == params(&source, |_| true);

    gate.report(
        "EMA/freeze contracts",
        frozen && replay_err <= 1e-6 && tracked && still,
        true,
        format!(
            "classifier bitwise frozen: {frozen}, EMA replay error {replay_err:.1e} <= 1e-6, momentum 0 tracks bitwise: {tracked}, momentum 1 stays at source: {still}"
        ),
    );
}

fn determinism(gate: &mut Gate) {
    let b = small_bench(5);
    let run = || {
        let cfg = adapt_cfg(0.99);
        let m = Model::<f32>::new(tiny_model(true, 3), 4).unwrap();
        let (source, _) = train_source(m, &b.source.train, &cfg).unwrap();
        let hooks = AdaptHooks {
            eval: Some(&b.target.eval),
            ..AdaptHooks::default()
        };
        let state = adapt_target(&source, &b.target.train, &cfg, hooks).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_jsonl(&path, &state.metrics_log).unwrap();
        let meta = serde_json::json!({ "model": state.student.config() });
        (
            std::fs::read(path).unwrap(),
            encode_checkpoint(&state.student.params, &meta),
            encode_checkpoint(&state.teacher.params, &meta),
        )
    };
    let (a, b) = (run(), run());
    gate.report(
        "determinism",
        a == b,
        true,
        format!(
            "metrics log {} bytes, student {} bytes, teacher {} bytes identical across two runs: {}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            a == b
        ),
    );
}

fn matrix_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.conf");
    load_config(&path).unwrap()
}

fn empirical(gate: &mut Gate) {
    let cfg = matrix_config();
    assert_eq!((cfg.classes, cfg.train_per_domain, cfg.eval_per_domain), (4, 2000, 500));
    let threads = std::env::var("THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    let seeds: Vec<u64> = (0..5).collect();
    let t = Instant::now();
    let outcomes = run_matrix(&cfg, &seeds, &Arm::ALL, threads).unwrap();
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_matrix");
    write_matrix_outputs(&out, &outcomes, &Arm::ALL).unwrap();
    show!("matrix outputs in {}", out.display());

    let acc = |arm| mean_std(&arm_values(&outcomes, arm, |r| r.accuracy)).0 * 100.0;
    let ovl = |arm| mean_std(&arm_values(&outcomes, arm, |r| r.attention_overlap)).0;
    for arm in Arm::ALL {
        show!(
            "  {:<16} accuracy {:6.2}  overlap {:.4}",
            arm.name(),
            acc(arm),
            ovl(arm)
        );
    }

    let src = mean_std(&outcomes.iter().map(|o| o.source_accuracy).collect::<Vec<_>>()).0 * 100.0;
    let so = mean_std(
        &outcomes
            .iter()
            .map(|o| o.source_only_target_accuracy)
            .collect::<Vec<_>>(),
    )
    .0 * 100.0;
    gate.report(
        "benchmark validity",
        src - so >= 10.0,
        false,
        format!(
            "source {src:.2} - source-only target {so:.2} = {:.2} >= 10 points",
            src - so
        ),
    );

    let (s, b, t, kd) = (
        acc(Arm::SourceOnly),
        acc(Arm::Baseline),
        acc(Arm::Transformer),
        acc(Arm::TransformerKd),
    );
    let pass = s < b && b < t && b - s >= 10.0 && t - b >= 2.0 && kd >= t - 1.0 && minutes < 30.0;
    gate.report(
        "ablation ordering",
        pass,
        false,
        format!(
            "SO {s:.2} < Baseline {b:.2} < +T {t:.2}; Baseline - SO {:.2} >= 10; +T - Baseline {:.2} >= 2; +T+KD {kd:.2} >= +T - 1; runtime {minutes:.1} min < 30",
            b - s,
            t - b
        ),
    );

    let focused = mean_std(
        &outcomes
            .iter()
            .map(|o| o.transformer_focus.unwrap().focused_accuracy)
            .collect::<Vec<_>>(),
    )
    .0;
    let other = mean_std(
        &outcomes
            .iter()
            .map(|o| o.transformer_focus.unwrap().non_focused_accuracy)
            .collect::<Vec<_>>(),
    )
    .0;
    gate.report(
        "focused samples are more accurate",
        focused > other,
        false,
        format!("source-only transformer: above-median overlap {focused:.4} > below-median {other:.4}"),
    );

    let (ob, ot, ok) = (ovl(Arm::Baseline), ovl(Arm::Transformer), ovl(Arm::TransformerKd));
    gate.report(
        "attention overlap ordering",
        ob < ot && ot <= ok,
        false,
        format!("Baseline {ob:.4} < +T {ot:.4} <= +T+KD {ok:.4}"),
    );
}

#[test]
fn acceptance() {
    let mut gate = Gate {
        lines: Vec::new(),
        contract_failures: Vec::new(),
    };
    gradient_suite(&mut gate);
    loss_oracles(&mut gate);
    clustering_oracle(&mut gate);
    ema_and_freeze(&mut gate);
    if std::env::var("ACCEPTANCE_MATRIX").as_deref() == Ok("0") {
        show!("SKIP ablation matrix criteria (ACCEPTANCE_MATRIX=0)");
    } else {
        empirical(&mut gate);
    }
    determinism(&mut gate);
    show!("\nacceptance summary");
    for line in &gate.lines {
        show!("{line}");
    }
    assert!(
        gate.contract_failures.is_empty(),
        "contract criteria failed: {:?}",
        gate.contract_failures
    );
}
