//! Acceptance checks. Run with `cargo test -p saltts --test acceptance`;
//! prints one PASS or FAIL line per criterion and exits non-zero on failure.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use saltts::align::{build_schedule, target_frame_count, FrameSpec};
use saltts::batch::{Batch, BatchItem};
use saltts::cli::{cmd_eval, cmd_gen_corpus, cmd_train, SplitChoice, EVAL_CSV};
use saltts::config::{CorpusConfig, ModelConfig, RunConfig, Variant};
use saltts::eval::{evaluate, log_f0_rmse, mcd, mcd_constant, retained_coefficients};
use saltts::fastspeech2::{DurationSource, Mode};
use saltts::features::{gen_synthetic_corpus, Corpus, Split, Utterance};
use saltts::nn::layers::{FftBlock, FftBlockDims, MultiHeadAttention, VariancePredictor};
use saltts::nn::{grad_check, Graph, ParamStore, Tensor, Var};
use saltts::saltts::{count_inference_parameters, ForwardOptions, Model};
use saltts::train::{fit, FitOptions, METRICS_FILE};
use saltts::Matrix;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn repeater_anchors() -> Outcome {
    let s = build_schedule(5, &FrameSpec::SSL, &FrameSpec::FS2);
    ensure(s.dst_len() == 7, || format!("build_schedule(5) has {} entries", s.dst_len()))?;
    ensure(s.src_indices() == [0, 1, 1, 2, 3, 3, 4], || format!("src sequence {:?}", s.src_indices()))?;
    for k in 0..=10 {
        let n = 5 + 18 * k;
        let got = build_schedule(n, &FrameSpec::SSL, &FrameSpec::FS2).dst_len();
        ensure(got == 7 + 31 * k, || format!("n_src {n}: {got} entries, expected {}", 7 + 31 * k))?;
    }
    Ok("5 -> 7 entries [0,1,1,2,3,3,4]; 5+18k -> 7+31k for k = 0..10".into())
}

fn nearest_center_count(n_src: usize) -> usize {
    let last = (n_src - 1) as f64 * 20.0 + 12.5;
    (0..4 * n_src + 8)
        .map(|j| (j, (j as f64 * 11.6 + 22.8 - last).abs()))
        .fold((0, f64::INFINITY), |best, (j, d)| if d < best.1 { (j, d) } else { best })
        .0
        + 1
}

fn oracle_equivalence() -> Outcome {
    for n in 1..=1000 {
        let closed = target_frame_count(&FrameSpec::SSL, &FrameSpec::FS2, n);
        let brute = nearest_center_count(n);
        ensure(closed == brute, || format!("n_src {n}: closed form {closed}, search {brute}"))?;
    }
    Ok("n_src in [1, 1000] all agree".into())
}

type Objective = Box<dyn Fn(&mut Graph) -> saltts::Result<Var>>;

fn op_case(op: &str, seed: u64) -> (ParamStore, Objective) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (b, l) = (2usize, 4usize);
    let keep = vec![true, true, true, false, true, true, false, true];
    let mut randn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut r);
    let proj = |d: usize, randn: &mut dyn FnMut(&[usize]) -> Tensor| randn(&[b, l, d]);
    match op {
        "affine" => {
            let x = s.add("x", randn(&[b, l, 3])).unwrap();
            let w = s.add("w", randn(&[3, 5])).unwrap();
            let bias = s.add("b", randn(&[5])).unwrap();
            let p = proj(5, &mut randn);
            (s, Box::new(move |g| {
                let (x, w, bias) = (g.param(x), g.param(w), g.param(bias));
                let y = g.affine(x, w, bias)?;
                g.dot_const(y, &p)
            }))
        }
        "layer_norm" => {
            let x = s.add("x", randn(&[b, l, 5])).unwrap();
            let gm = s.add("g", randn(&[5])).unwrap();
            let bt = s.add("b", randn(&[5])).unwrap();
            let p = proj(5, &mut randn);
            (s, Box::new(move |g| {
                let (x, gm, bt) = (g.param(x), g.param(gm), g.param(bt));
                let y = g.layer_norm(x, gm, bt, 1e-5)?;
                g.dot_const(y, &p)
            }))
        }
        "attention" => {
            let mha = MultiHeadAttention::new(&mut s, "mha", 4, 2, seed).unwrap();
            let x = s.add("x", randn(&[b, l, 4])).unwrap();
            let p = proj(4, &mut randn);
            (s, Box::new(move |g| {
                let xv = g.param(x);
                let y = mha.forward(g, xv, Some(&keep))?;
                let y = g.mask_rows(y, &keep)?;
                g.dot_const(y, &p)
            }))
        }
        "conv1d" => {
            let x = s.add("x", randn(&[b, l, 3])).unwrap();
            let k = s.add("k", randn(&[3, 3, 2])).unwrap();
            let bias = s.add("b", randn(&[2])).unwrap();
            let p = proj(2, &mut randn);
            (s, Box::new(move |g| {
                let (x, k, bias) = (g.param(x), g.param(k), g.param(bias));
                let y = g.conv1d(x, k, bias)?;
                g.dot_const(y, &p)
            }))
        }
        "embedding" => {
            let t = s.add("t", randn(&[5, 3])).unwrap();
            let p = proj(3, &mut randn);
            (s, Box::new(move |g| {
                let t = g.param(t);
                let y = g.embedding(&[0, 3, 3, 1, 4, 4, 4, 2], &[b, l], t)?;
                g.dot_const(y, &p)
            }))
        }
        "relu" => {
            let mut xt = randn(&[b, l, 3]);
            for v in xt.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
            let x = s.add("x", xt).unwrap();
            let p = proj(3, &mut randn);
            (s, Box::new(move |g| {
                let x = g.param(x);
                let y = g.relu(x)?;
                g.dot_const(y, &p)
            }))
        }
        "elementwise" => {
            let x = s.add("x", randn(&[b, l, 3])).unwrap();
            let y = s.add("y", randn(&[b, l, 3])).unwrap();
            let c = randn(&[b, l, 3]);
            let f = randn(&[b, l, 3]).into_data();
            let p = proj(3, &mut randn);
            (s, Box::new(move |g| {
                let (x, y) = (g.param(x), g.param(y));
                let z = g.add(x, y)?;
                let z = g.add_const(z, c.clone())?;
                let z = g.mul_const(z, f.clone())?;
                let z = g.mask_rows(z, &keep)?;
                let z = g.reshape(z, &[b * l, 3])?;
                let z = g.reshape(z, &[b, l, 3])?;
                g.dot_const(z, &p)
            }))
        }
        "gather" => {
            let x = s.add("x", randn(&[1, 3, 2])).unwrap();
            let p = randn(&[1, 5, 2]);
            (s, Box::new(move |g| {
                let x = g.param(x);
                let y = g.gather_rows(x, vec![Some(0), Some(0), Some(2), None, Some(2)], &[1, 5, 2])?;
                g.dot_const(y, &p)
            }))
        }
        "losses" => {
            let x = s.add("x", randn(&[b, l, 3])).unwrap();
            let t = randn(&[b, l, 3]);
            (s, Box::new(move |g| {
                let x = g.param(x);
                let l1 = g.masked_l1(x, &t, &keep)?;
                let l2 = g.masked_mse(x, &t, &keep)?;
                g.weighted_sum(&[(l1, 0.7), (l2, 1.3)])
            }))
        }
        "fft_block" => {
            let dims = FftBlockDims { dim: 4, heads: 2, ffn_dim: 6, kernel: 3, dropout: 0.0 };
            let block = FftBlock::new(&mut s, "blk", &dims, seed).unwrap();
            let x = s.add("x", randn(&[b, l, 4])).unwrap();
            let p = proj(4, &mut randn);
            (s, Box::new(move |g| {
                let x = g.param(x);
                let y = block.forward(g, x, &keep)?;
                g.dot_const(y, &p)
            }))
        }
        "variance_predictor" => {
            let vp = VariancePredictor::new(&mut s, "vp", 4, 5, 3, 0.0, seed).unwrap();
            let x = s.add("x", randn(&[b, l, 4])).unwrap();
            let p = proj(1, &mut randn);
            (s, Box::new(move |g| {
                let x = g.param(x);
                let y = vp.forward(g, x, &keep)?;
                g.dot_const(y, &p)
            }))
        }
        other => panic!("unknown op {other}"),
    }
}

const OPS: [&str; 11] = [
    "affine",
    "layer_norm",
    "attention",
    "conv1d",
    "embedding",
    "relu",
    "elementwise",
    "gather",
    "losses",
    "fft_block",
    "variance_predictor",
];

fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value.add_assign(&Tensor::randn(&shape, 0.1, &mut rng));
    }
}

fn corpus_items(cfg: &ModelConfig, n: usize, seed: u64) -> (Corpus, Vec<BatchItem>) {
    let corpus = CorpusConfig { min_phonemes: 2, max_phonemes: 4, max_duration: 3, ..CorpusConfig::default() };
    let c = gen_synthetic_corpus(n, cfg, &corpus, seed).unwrap();
    let items = c.utterances.iter().map(|u| u.to_batch_item(cfg).unwrap()).collect();
    (c, items)
}

fn gradient_suite() -> Outcome {
    let mut worst_op: f64 = 0.0;
    for op in OPS {
        for seed in 0..20 {
            let (mut store, f) = op_case(op, 1000 + seed);
            if matches!(op, "attention" | "fft_block" | "variance_predictor") {
                perturb(&mut store, 2000 + seed);
            }
            let r = ok(grad_check(&mut store, 1e-5, None, &f))?;
            ensure(r.max_relative_error < 1e-4, || {
                format!("{op} seed {seed}: {:e} at {:?}", r.max_relative_error, r.worst)
            })?;
            worst_op = worst_op.max(r.max_relative_error);
        }
    }
    let mut worst_model: f64 = 0.0;
    for v in [Variant::Baseline, Variant::Parallel, Variant::Cascade] {
        let cfg = ModelConfig::tiny().with_variant(v);
        let (_, items) = corpus_items(&cfg, 2, 3);
        let batch = ok(Batch::from_items(&items))?;
        let mut model = ok(Model::new(cfg))?;
        perturb(model.store_mut(), 4);
        let probe = model.clone();
        let r = ok(grad_check(model.store_mut(), 1e-5, None, |g| {
            let out = probe.forward(g, &batch, Mode::Train)?;
            Ok(probe.loss(g, &out, &batch)?.0)
        }))?;
        ensure(r.max_relative_error < 1e-3, || format!("{v}: {:e} at {:?}", r.max_relative_error, r.worst))?;
        worst_model = worst_model.max(r.max_relative_error);
    }
    Ok(format!("{} ops x 20 seeds max {worst_op:.2e} (< 1e-4); full models max {worst_model:.2e} (< 1e-3)", OPS.len()))
}

fn parallel_equivalence() -> Outcome {
    let base_cfg = ModelConfig::tiny().with_variant(Variant::Baseline);
    let mut base = ok(Model::new(base_cfg.clone()))?;
    perturb(base.store_mut(), 7);
    let mut par = ok(Model::new(base_cfg.clone().with_variant(Variant::Parallel)))?;
    let copied = par.store_mut().copy_matching_from(base.store());
    ensure(copied == base.store().len(), || format!("copied {copied} of {} tensors", base.store().len()))?;
    let batch = Batch::phonemes_only(&[vec![1, 2, 3, 4], vec![5, 6], vec![7]]);
    let a = ok(base.synthesize_batch(&batch, DurationSource::Predicted))?;
    let b = ok(par.synthesize_batch(&batch, DurationSource::Predicted))?;
    let bits = |m: &[Matrix]| m.iter().flat_map(|x| x.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    ensure(!a.iter().all(|m| m.rows() == 0), || "no frames synthesised".into())?;
    ensure(bits(&a) == bits(&b), || "parallel mel differs from baseline".into())?;
    let nb = ok(count_inference_parameters(&base_cfg))?;
    let np = ok(count_inference_parameters(&base_cfg.with_variant(Variant::Parallel)))?;
    ensure(nb == np, || format!("inference parameters {np} vs {nb}"))?;
    Ok(format!("mel bitwise equal over {} frames; {nb} inference parameters each", a.iter().map(Matrix::rows).sum::<usize>()))
}

fn cascade_wiring() -> Outcome {
    let cfg = ModelConfig::tiny().with_variant(Variant::Cascade);
    let (_, items) = corpus_items(&cfg, 3, 9);
    let batch = ok(Batch::from_items(&items))?;
    let mut model = ok(Model::new(cfg))?;
    perturb(model.store_mut(), 10);
    let run = |residual: bool| -> Result<_, String> {
        let mut g = Graph::new(model.store());
        let out = ok(model.forward_with(&mut g, &batch, Mode::Train, DurationSource::Predicted, ForwardOptions { cascade_residual: residual }))?;
        let (_, l) = ok(model.loss(&mut g, &out, &batch))?;
        let d = g.value(out.decoder_input).data().to_vec();
        let p = g.value(out.projected.ok_or("no projector output")?).data().to_vec();
        let s = g.value(out.ssl_hat.ok_or("no predictor output")?).data().to_vec();
        Ok((l, d, p, s))
    };
    let (with, d, p, s) = run(true)?;
    let mut worst: f64 = 0.0;
    for i in 0..d.len() {
        ensure(d[i] == s[i] + p[i], || format!("element {i}: {} != {} + {}", d[i], s[i], p[i]))?;
        let diff = (d[i] - p[i] - s[i]).abs();
        ensure(diff <= f64::EPSILON * d[i].abs().max(1.0), || format!("element {i}: residual {diff:e}"))?;
        worst = worst.max(diff);
    }
    let (without, d0, _, s0) = run(false)?;
    ensure(with.aux == without.aux, || format!("aux {} vs {}", with.aux, without.aux))?;
    ensure(s0 == s, || "predictor output changed with the residual removed".into())?;
    ensure(d0 != d, || "removing the residual left the decoder input unchanged".into())?;
    Ok(format!("{} elements, max |d - p - s| {worst:.1e}; aux {:.6} either way", d.len(), with.aux))
}

fn overfit_config(variant: Variant, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny().with_variant(variant);
    cfg.train.steps = steps;
    cfg.train.batch_size = 4;
    cfg.train.learning_rate = OVERFIT_LR;
    cfg.train.warmup_steps = OVERFIT_WARMUP;
    cfg.train.log_every = 100;
    cfg.corpus = CorpusConfig { eval_fraction: 0.0, ..CorpusConfig::default() };
    cfg
}

const OVERFIT_STEPS: usize = 2000;
const OVERFIT_LR: f64 = 1e-2;
const OVERFIT_WARMUP: usize = 100;

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn overfit_smoke() -> Outcome {
    let mut parts = Vec::new();
    for v in [Variant::Baseline, Variant::Parallel, Variant::Cascade] {
        let cfg = overfit_config(v, OVERFIT_STEPS);
        let corpus = ok(gen_synthetic_corpus(4, &cfg.model, &cfg.corpus, 21))?;
        let pairs: Vec<(&Utterance, Split)> = corpus.utterances.iter().map(|u| (u, Split::Train)).collect();
        let dir = ok(tempfile::tempdir())?;
        let t = Instant::now();
        let report = ok(fit(&cfg, &pairs, dir.path(), &FitOptions::default()))?;
        let h = &report.history;
        let start = mean(h[..10].iter().map(|l| l.total));
        let end = mean(h[h.len() - 10..].iter().map(|l| l.total));
        let drop = 1.0 - end / start;
        ensure(drop >= 0.9, || format!("{v}: total {start:.4} -> {end:.4} ({:.1}% drop)", 100.0 * drop))?;
        if v.has_ssl_branch() {
            let a0 = mean(h[..10].iter().map(|l| l.aux));
            let a1 = mean(h[h.len() - 10..].iter().map(|l| l.aux));
            ensure(a1 < a0, || format!("{v}: aux {a0:.4} -> {a1:.4}"))?;
        }
        let secs = t.elapsed().as_secs_f64();
        ensure(secs < 600.0, || format!("{v}: {secs:.0} s"))?;
        parts.push(format!("{v} -{:.1}% in {secs:.0}s", 100.0 * drop));
    }
    Ok(format!("{OVERFIT_STEPS} steps: {}", parts.join(", ")))
}

fn dct_cepstrum_fft(planner: &mut FftPlanner<f64>, row: &[f64], k: usize) -> Vec<f64> {
    let n = row.len();
    let mut buf: Vec<Complex<f64>> = row.iter().chain(row.iter().rev()).map(|&x| Complex::new(x, 0.0)).collect();
    planner.plan_fft_forward(2 * n).process(&mut buf);
    (1..=k)
        .map(|q| {
            let phase = Complex::from_polar(1.0, -std::f64::consts::PI * q as f64 / (2 * n) as f64);
            (buf[q] * phase).re / 2.0 * (2.0 / n as f64).sqrt()
        })
        .collect()
}

fn mcd_oracle(planner: &mut FftPlanner<f64>, a: &Matrix, b: &Matrix) -> f64 {
    let k = 13.min(a.cols() - 1);
    let total: f64 = (0..a.rows())
        .map(|r| {
            let (ca, cb) = (dct_cepstrum_fft(planner, a.row(r), k), dct_cepstrum_fft(planner, b.row(r), k));
            ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    10.0 / std::f64::consts::LN_10 * 2f64.sqrt() * total / a.rows() as f64
}

fn log_f0_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    let voiced: Vec<(f64, f64)> = a.iter().zip(b).filter(|(x, y)| **x > 0.0 && **y > 0.0).map(|(x, y)| (*x, *y)).collect();
    if voiced.is_empty() {
        return None;
    }
    Some((voiced.iter().map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / voiced.len() as f64).sqrt())
}

fn metrics_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut planner = FftPlanner::new();
    let mut worst: f64 = 0.0;
    ensure((mcd_constant() - 10.0 * 2f64.sqrt() / 10f64.ln()).abs() < 1e-15, || "MCD constant".into())?;
    ensure(retained_coefficients(80) == 13, || "coefficient count".into())?;
    for case in 0..100 {
        let (rows, cols) = (rng.random_range(1..8), rng.random_range(2..24));
        let mut m = || Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-4.0..2.0)).collect()).unwrap();
        let (x, y) = (m(), m());
        ensure(ok(mcd(&x, &x))? == 0.0, || format!("case {case}: mcd(x, x) != 0"))?;
        let got = ok(mcd(&x, &y))?;
        let want = mcd_oracle(&mut planner, &x, &y);
        ensure((got - want).abs() <= 1e-10, || format!("case {case}: mcd {got} vs oracle {want}"))?;
        worst = worst.max((got - want).abs());

        let n = rng.random_range(1..30);
        let mut contour = |p_unvoiced: f64| -> Vec<f64> {
            (0..n).map(|_| if rng.random_bool(p_unvoiced) { 0.0 } else { rng.random_range(4.0..6.5) }).collect()
        };
        let p = if case % 10 == 0 { 1.0 } else { 0.3 };
        let (fa, fb) = (contour(p), contour(0.3));
        let same = ok(log_f0_rmse(&fa, &fa))?;
        ensure(same.is_none_or(|v| v == 0.0), || format!("case {case}: log_f0_rmse(x, x) = {same:?}"))?;
        let got = ok(log_f0_rmse(&fa, &fb))?;
        let want = log_f0_oracle(&fa, &fb);
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) => {
                ensure((g - w).abs() <= 1e-10, || format!("case {case}: f0 {g} vs oracle {w}"))?;
                worst = worst.max((g - w).abs());
            }
            _ => return Err(format!("case {case}: f0 {got:?} vs oracle {want:?}")),
        }
    }
    let voiced: Vec<f64> = vec![5.0, 5.5, 0.0, 6.0];
    ensure(ok(log_f0_rmse(&voiced, &voiced))? == Some(0.0), || "log_f0_rmse(x, x) on a voiced contour".into())?;

    let cfg = overfit_config(Variant::Parallel, 400);
    let corpus = ok(gen_synthetic_corpus(4, &cfg.model, &cfg.corpus, 21))?;
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let pairs: Vec<(&Utterance, Split)> = utts.iter().map(|u| (*u, Split::Train)).collect();
    let dir = ok(tempfile::tempdir())?;
    let report = ok(fit(&cfg, &pairs, dir.path(), &FitOptions::default()))?;
    let (trained, _, _) = ok(saltts::checkpoint::load_model(&report.final_checkpoint))?;
    let untrained = ok(Model::new(cfg.model.clone()))?;
    let m_trained = ok(evaluate(&trained, &utts, "trained"))?.mcd().ok_or("no MCD")?.mean;
    let m_untrained = ok(evaluate(&untrained, &utts, "untrained"))?.mcd().ok_or("no MCD")?.mean;
    ensure(m_trained < m_untrained, || format!("trained MCD {m_trained:.4} vs untrained {m_untrained:.4}"))?;
    Ok(format!("100 cases max deviation {worst:.1e}; overfit MCD {m_untrained:.3} -> {m_trained:.3}"))
}

fn pipeline(root: &std::path::Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny().with_variant(Variant::Cascade);
    cfg.model.seed = 77;
    cfg.model.dropout = 0.1;
    cfg.train.steps = 200;
    cfg.train.batch_size = 2;
    cfg.train.log_every = 10;
    let corpus = root.join("corpus");
    ok(cmd_gen_corpus(&cfg, 8, cfg.model.seed, &corpus))?;
    let run = root.join("run");
    let report = ok(cmd_train(&cfg, &corpus, &run, None))?;
    let eval = root.join("eval");
    ok(cmd_eval(&report.final_checkpoint, &corpus, SplitChoice::Eval, &eval, false))?;
    Ok((ok(fs::read(run.join(METRICS_FILE)))?, ok(fs::read(eval.join(EVAL_CSV)))?))
}

fn determinism() -> Outcome {
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let (train_a, eval_a) = pipeline(a.path())?;
    let (train_b, eval_b) = pipeline(b.path())?;
    ensure(train_a == train_b, || "training metrics differ".into())?;
    ensure(eval_a == eval_b, || "evaluation CSVs differ".into())?;
    Ok(format!("{} + {} bytes identical", train_a.len(), eval_a.len()))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("repeater anchors", Duration::from_secs(1), repeater_anchors),
        ("oracle equivalence", Duration::from_secs(5), oracle_equivalence),
        ("gradient suite", Duration::from_secs(120), gradient_suite),
        ("parallel-inference equivalence", Duration::from_secs(10), parallel_equivalence),
        ("cascade wiring", Duration::from_secs(10), cascade_wiring),
        ("overfit smoke", Duration::from_secs(1800), overfit_smoke),
        ("metrics sanity", Duration::from_secs(60), metrics_sanity),
        ("determinism", Duration::from_secs(300), determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = check().and_then(|detail| {
            let el = t.elapsed();
            ensure(el <= budget, || format!("took {:.2?}, budget {budget:?}", el)).map(|_| detail)
        });
        let el = t.elapsed();
        match outcome {
            Ok(d) => println!("PASS  {name:<32} {el:>10.2?}  {d}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name:<32} {el:>10.2?}  {e}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
