//! End-to-end acceptance suite. The criteria run in order inside one test; one
//! PASS/FAIL line per criterion is written straight to stdout, bypassing the
//! test harness capture.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use videomap_core::backbone::{layer_layout, LayerKind};
use videomap_core::checkpoint::{save_checkpoint, Checkpoint};
use videomap_core::config::{MaskPolicy, Readout};
use videomap_core::cost::{cost_model, crossover_len};
use videomap_core::data::{make_dataset, ClipDims, Dataset, DatasetKind};
use videomap_core::finetune::{classify, finetune_run, Init};
use videomap_core::nn::{AttentionLayer, LayerNorm, Linear, Mlp, PatchEmbed, SsmLayer};
use videomap_core::params::{param_grad_check, Bound, Builder, ParamStore};
use videomap_core::pretrain::{build_ar_mask, clip_loss, mask_count, plan_mask, run_pretrain, Teacher};
use videomap_core::tensor::{grad_check, selective_scan_forward, Rng, ScanInputs, Tape, Tensor};
use videomap_core::{ArMode, Model, RunConfig, Var};

type Outcome = Result<String, String>;
type LayerFn = Box<dyn Fn(&mut Tape, &Bound, Var) -> videomap_core::Result<Var>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn desk_dims(cfg: &RunConfig) -> ClipDims {
    let m = &cfg.model;
    ClipDims { frames: m.frames, channels: m.channels, height: m.image_size, width: m.image_size }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// The fixed 256-clip pretraining corpus.
fn pretrain_corpus(cfg: &RunConfig) -> Vec<Tensor> {
    make_dataset(DatasetKind::Pretrain, 256, 0, 1000, desk_dims(cfg)).unwrap().clips()
}

fn small_config() -> RunConfig {
    RunConfig::parse(
        "frames=3\nimage_size=8\nchannels=2\npatch=4\nembed_dim=8\nheads=2\nstate_size=4\n\
         depth=2\nmamba_per_attn=1\nteacher_dim=4\nteacher_hidden=8\ndecoder_depth=1\n",
    )
    .unwrap()
}

// ---- 1: gradient suite -------------------------------------------------------

const GRAD_SAMPLES: usize = 60;
const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;

/// Moves parameters off their initial values so zero-initialised terms carry
/// gradient; the Δ bias is raised so decay gradients clear finite-difference noise.
fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = Rng::new(seed);
    for e in store.entries_mut() {
        let shift = if e.name.ends_with("dt_up.bias") { 4.0 } else { 0.0 };
        for x in e.value.data_mut() {
            *x += shift + 0.2 * rng.standard_normal();
        }
    }
}

fn squash(tape: &mut Tape, y: Var) -> Var {
    let y = tape.tanh(y);
    tape.sum(y)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut results: Vec<(String, usize, f64)> = Vec::new();

    // Widths are chosen so every layer has at least 50 scalars to sample.
    let layer_check = |name: &str,
                       width: usize,
                       results: &mut Vec<(String, usize, f64)>,
                       build: &dyn Fn(&mut Builder<'_>) -> LayerFn|
     -> Result<(), String> {
        let x = Tensor::normal(&[8, width], 0.0, 1.0, &mut Rng::new(1));
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let f = build(&mut Builder::new(&mut store, &mut rng, name));
        perturb(&mut store, 3);
        let r = param_grad_check(
            &store,
            |tape, p| {
                let xv = tape.constant(x.clone());
                let y = f(tape, p, xv)?;
                Ok(squash(tape, y))
            },
            GRAD_SAMPLES,
            GRAD_H,
            4,
        )
        .map_err(|e| e.to_string())?;
        results.push((format!("{name}.params"), r.coords_checked, r.max_rel_err));
        let r = grad_check(
            |tape, xv| {
                let p = store.bind_frozen(tape);
                let y = f(tape, &p, xv)?;
                Ok(squash(tape, y))
            },
            &x,
            GRAD_SAMPLES,
            GRAD_H,
            5,
        )
        .map_err(|e| e.to_string())?;
        results.push((format!("{name}.input"), r.coords_checked, r.max_rel_err));
        Ok(())
    };

    layer_check("linear", 8, &mut results, &|b| {
        let l = Linear::new(b, "fc", 8, 8, true);
        Box::new(move |t, p, x| l.forward(t, p, x))
    })?;
    layer_check("layer_norm", 32, &mut results, &|b| {
        let l = LayerNorm::new(b, "norm", 32);
        Box::new(move |t, p, x| l.forward(t, p, x))
    })?;
    layer_check("mlp", 8, &mut results, &|b| {
        let l = Mlp::new(b, "mlp", 8, 16, 8);
        Box::new(move |t, p, x| l.forward(t, p, x))
    })?;
    layer_check("attention", 8, &mut results, &|b| {
        let l = AttentionLayer::new(b, 8, 2).unwrap();
        let mask = build_ar_mask(ArMode::Token, 2, 4).matrix;
        Box::new(move |t, p, x| l.forward(t, p, x, Some(&mask)))
    })?;
    for bidirectional in [false, true] {
        let name = if bidirectional { "ssm_bidirectional" } else { "ssm" };
        layer_check(name, 8, &mut results, &|b| {
            let l = SsmLayer::new(b, 8, 4, bidirectional);
            Box::new(move |t, p, x| l.forward(t, p, x))
        })?;
    }

    {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(6);
        let mut b = Builder::new(&mut store, &mut rng, "embed");
        let embed = PatchEmbed::new(&mut b, 2, 2, 8, 4, 8).unwrap();
        let mask_token = b.normal("mask_token", &[1, 8], 0.02, false);
        perturb(&mut store, 7);
        let frames = Tensor::uniform(&[2, 2, 8, 8], 0.0, 1.0, &mut Rng::new(8));
        let masked = [true, false, false, true, false, true, false, false];
        let r = param_grad_check(
            &store,
            |tape, p| {
                let y = embed.forward(tape, p, &frames, Some((&masked, mask_token)))?;
                Ok(squash(tape, y))
            },
            GRAD_SAMPLES,
            GRAD_H,
            9,
        )
        .map_err(|e| e.to_string())?;
        results.push(("patch_embed".into(), r.coords_checked, r.max_rel_err));
    }

    let cfg = small_config();
    let mut model = Model::new(&cfg).unwrap();
    model.attach_head(3, 10);
    perturb(&mut model.store, 11);
    let n = cfg.model.tokens_per_frame();
    let encoded = Tensor::normal(&[cfg.model.frames * n + 1, 8], 0.0, 1.0, &mut Rng::new(12));
    for mode in ArMode::ALL {
        let ar = build_ar_mask(mode, cfg.model.frames, n);
        let mut store = model.store.clone();
        store.set_trainable("encoder.", false);
        store.set_trainable("head.", false);
        let r = param_grad_check(
            &store,
            |tape, p| {
                let e = tape.constant(encoded.clone());
                let y = model.decoder.decode_predict(tape, p, e, &ar)?;
                Ok(squash(tape, y))
            },
            GRAD_SAMPLES,
            GRAD_H,
            13,
        )
        .map_err(|e| e.to_string())?;
        results.push((format!("decoder.{mode}"), r.coords_checked, r.max_rel_err));
    }

    let teacher = Teacher::new(&cfg.model);
    let clip = Tensor::uniform(&[3, 2, 8, 8], 0.0, 1.0, &mut Rng::new(14));
    let targets = teacher.features(&clip).unwrap();
    let plan = plan_mask(&teacher.saliency(&clip).unwrap(), 0.5, MaskPolicy::Saliency, &mut Rng::new(0)).unwrap();
    for mode in ArMode::ALL {
        let ar = build_ar_mask(mode, 3, n);
        let mut store = model.store.clone();
        store.set_trainable("head.", false);
        let r = param_grad_check(&store, |tape, p| clip_loss(tape, p, &model, &clip, &targets, &plan, &ar), 200, GRAD_H, 15)
            .map_err(|e| e.to_string())?;
        results.push((format!("pretrain_loss.{mode}"), r.coords_checked, r.max_rel_err));
    }
    for readout in [Readout::Cls, Readout::Mean] {
        let mut store = model.store.clone();
        store.set_trainable("decoder.", false);
        let r = param_grad_check(
            &store,
            |tape, p| {
                let logits = classify(tape, p, &model, &clip, readout)?;
                tape.cross_entropy(logits, &[2])
            },
            GRAD_SAMPLES,
            GRAD_H,
            16,
        )
        .map_err(|e| e.to_string())?;
        results.push((format!("classifier.{readout}"), r.coords_checked, r.max_rel_err));
    }

    let elapsed = start.elapsed();
    let (worst_name, _, worst) =
        results.iter().max_by(|a, b| a.2.total_cmp(&b.2)).cloned().expect("checks ran");
    for (name, coords, err) in &results {
        ensure!(*coords >= 50, "{name}: only {coords} coordinates");
        ensure!(*err < GRAD_TOL, "{name}: max rel err {err:.3e}");
    }
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!("{} checks, worst {worst_name} {worst:.2e}", results.len()))
}

// ---- 2: scan oracle ----------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn sequential_scan(u: &[f64], delta: &[f64], b: &[f64], c: &[f64], a: &[f64], d: &[f64], l: usize, ch: usize, s: usize) -> Vec<f64> {
    let mut y = vec![0.0; l * ch];
    for k in 0..ch {
        let mut h = vec![0.0; s];
        for t in 0..l {
            let dt = delta[t * ch + k];
            let mut out = 0.0;
            for n in 0..s {
                h[n] = (dt * a[k * s + n]).exp() * h[n] + dt * b[t * s + n] * u[t * ch + k];
                out += c[t * s + n] * h[n];
            }
            y[t * ch + k] = out + d[k] * u[t * ch + k];
        }
    }
    y
}

fn criterion_scan() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    let draw = |n: usize, rng: &mut Rng, lo: f64, hi: f64| (0..n).map(|_| rng.uniform(lo, hi)).collect::<Vec<_>>();
    for case in 0..100 {
        let (l, ch, s) = (1 + rng.below(64), 1 + rng.below(16), 1 + rng.below(16));
        let u = draw(l * ch, &mut rng, -1.0, 1.0);
        let delta = draw(l * ch, &mut rng, 1e-3, 1.0);
        let b = draw(l * s, &mut rng, -1.0, 1.0);
        let c = draw(l * s, &mut rng, -1.0, 1.0);
        let a: Vec<f64> = draw(ch * s, &mut rng, -3.0, 1.5).iter().map(|v| -v.exp()).collect();
        let d = draw(ch, &mut rng, -1.0, 1.0);
        let expect = sequential_scan(&u, &delta, &b, &c, &a, &d, l, ch, s);

        let (kernel, _) = selective_scan_forward(ScanInputs {
            u: &u,
            delta: &delta,
            b: &b,
            c: &c,
            a: &a,
            d_skip: &d,
            len: l,
            channels: ch,
            state: s,
        });
        let mut tape = Tape::new();
        let mut leaf = |v: &[f64], shape: &[usize]| tape.constant(Tensor::new(shape, v.to_vec()).unwrap());
        let vars = [
            leaf(&u, &[l, ch]),
            leaf(&delta, &[l, ch]),
            leaf(&b, &[l, s]),
            leaf(&c, &[l, s]),
            leaf(&a, &[ch, s]),
            leaf(&d, &[ch]),
        ];
        let out = tape.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]).map_err(|e| e.to_string())?;
        let taped = tape.value(out).data();
        for (i, e) in expect.iter().enumerate() {
            let err = (kernel[i] - e).abs().max((taped[i] - e).abs());
            worst = worst.max(err);
            ensure!(err <= 1e-10, "case {case} shape ({l},{ch},{s}) index {i}: error {err:.3e}");
        }
    }
    Ok(format!("100 shapes, max abs err {worst:.2e}"))
}

// ---- 3: autoregressive masks and decoder causality ---------------------------

fn decode(model: &Model, encoded: &Tensor, mode: ArMode) -> Tensor {
    let cfg = &model.config.model;
    let ar = build_ar_mask(mode, cfg.frames, cfg.tokens_per_frame());
    let mut tape = Tape::new();
    let p = model.store.bind_frozen(&mut tape);
    let e = tape.constant(encoded.clone());
    let out = model.decoder.decode_predict(&mut tape, &p, e, &ar).unwrap();
    tape.value(out).clone()
}

fn criterion_ar_masks() -> Outcome {
    let mut pairs = 0usize;
    for frames in 1..=6 {
        for tokens in 1..=6 {
            for mode in ArMode::ALL {
                let m = build_ar_mask(mode, frames, tokens);
                let l = frames * tokens;
                for q in 0..l {
                    for k in 0..l {
                        let (fq, fk, pq, pk) = (q / tokens, k / tokens, q % tokens, k % tokens);
                        let expect = match mode {
                            ArMode::Frame => fk <= fq,
                            ArMode::Token => fk < fq || (fk == fq && pk <= pq),
                            ArMode::Video => true,
                        };
                        ensure!(m.allowed(q, k) == expect, "{mode} T={frames} N={tokens} q={q} k={k}");
                        pairs += 1;
                    }
                }
            }
        }
    }

    let mut model = Model::new(&small_config()).unwrap();
    perturb(&mut model.store, 30);
    let (t_len, n, d) = (3, 4, 8);
    let encoded = Tensor::normal(&[t_len * n + 1, d], 0.0, 1.0, &mut Rng::new(31));
    let mut worst: f64 = 0.0;

    let base = decode(&model, &encoded, ArMode::Frame);
    for t in 0..t_len - 1 {
        let mut perturbed = encoded.clone();
        let mut rng = Rng::new(32 + t as u64);
        for r in 1 + (t + 1) * n..1 + t_len * n {
            for c in 0..d {
                perturbed.set(&[r, c], rng.standard_normal());
            }
        }
        let out = decode(&model, &perturbed, ArMode::Frame);
        let rows = (t + 1) * n;
        let diff = base.slice_rows(0, rows).max_abs_diff(&out.slice_rows(0, rows));
        worst = worst.max(diff);
        ensure!(diff <= 1e-12, "frame mode: slot {t} moved by {diff:.3e}");
        ensure!(base.max_abs_diff(&out) > 1e-6, "frame mode: perturbation never reached later slots");
    }

    let base = decode(&model, &encoded, ArMode::Token);
    for q in 0..t_len * n - 1 {
        let mut perturbed = encoded.clone();
        for r in q + 2..t_len * n + 1 {
            perturbed.set(&[r, 0], perturbed.at(&[r, 0]) + 1.0);
        }
        let out = decode(&model, &perturbed, ArMode::Token);
        let diff = base.slice_rows(0, q + 1).max_abs_diff(&out.slice_rows(0, q + 1));
        worst = worst.max(diff);
        ensure!(diff <= 1e-12, "token mode: token {q} moved by {diff:.3e}");
        ensure!(base.max_abs_diff(&out) > 1e-6, "token mode: perturbation never reached later tokens");
    }
    Ok(format!("{pairs} mask entries match, causality worst {worst:.1e}"))
}

// ---- 4: mask planning --------------------------------------------------------

const RATIOS: [f64; 3] = [0.2, 0.5, 0.8];

fn criterion_mask_planning() -> Outcome {
    for n in 1..=256 {
        for ratio in RATIOS {
            let expect = (ratio * n as f64).round() as usize;
            ensure!(mask_count(ratio, n) == expect, "round({ratio}·{n}) = {expect}, got {}", mask_count(ratio, n));
            let scores = Tensor::uniform(&[4, n], 0.0, 1.0, &mut Rng::new(n as u64));
            let plan = plan_mask(&scores, ratio, MaskPolicy::Saliency, &mut Rng::new(1)).map_err(|e| e.to_string())?;
            for t in 0..4 {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| scores.at(&[t, a]).partial_cmp(&scores.at(&[t, b])).unwrap());
                let mut lowest = order[..expect].to_vec();
                lowest.sort_unstable();
                ensure!(plan.frame(t) == lowest.as_slice(), "saliency selection differs from sort, n={n} ratio={ratio}");
            }
        }
    }

    let base = RunConfig::default();
    let corpus = pretrain_corpus(&base);
    let mut summary = Vec::new();
    for ratio in RATIOS {
        let mut cfg = base.clone();
        cfg.model.mask_ratio = ratio;
        let mut model = Model::new(&cfg).map_err(|e| e.to_string())?;
        let curve = run_pretrain(&mut model, &corpus, 200, None).map_err(|e| format!("ratio {ratio}: {e}"))?;
        ensure!(curve.len() == 200, "ratio {ratio}: {} steps", curve.len());
        ensure!(curve.iter().all(|l| l.is_finite()), "ratio {ratio}: non-finite loss");
        let (head, tail) = (mean(&curve[..20]), mean(&curve[180..]));
        ensure!(tail < head, "ratio {ratio}: loss did not trend down ({head:.4} -> {tail:.4})");
        summary.push(format!("ρ={ratio}: {head:.4}->{tail:.4}"));
    }
    Ok(format!("counts and sort oracle ok for N≤256; {}", summary.join(", ")))
}

// ---- 5: pretraining convergence ---------------------------------------------

fn criterion_convergence() -> Outcome {
    let cfg = RunConfig::default();
    ensure!(cfg.train.batch_size == 8, "desk-tiny batch is {}", cfg.train.batch_size);
    let corpus = pretrain_corpus(&cfg);
    let mut model = Model::new(&cfg).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let curve = run_pretrain(&mut model, &corpus, 500, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    save_checkpoint(&model, &out_dir().join("convergence.ckpt")).map_err(|e| e.to_string())?;

    let (first, last) = (mean(&curve[..10]), mean(&curve[450..]));
    let ratio = last / first;
    ensure!(ratio < 0.3, "last-50 mean {last:.5} is {:.1}% of first-10 mean {first:.5}", 100.0 * ratio);
    ensure!(elapsed < Duration::from_secs(900), "500 steps took {elapsed:?}");

    let mut again = Model::new(&cfg).map_err(|e| e.to_string())?;
    let repeat = run_pretrain(&mut again, &corpus, 500, None).map_err(|e| e.to_string())?;
    let identical = curve.iter().zip(&repeat).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(identical && curve.len() == repeat.len(), "rerun with the same seed diverged");
    Ok(format!(
        "first10 {first:.5}, last50 {last:.5} ({:.1}%), {:.0}s, rerun bit-identical",
        100.0 * ratio,
        elapsed.as_secs_f64()
    ))
}

// ---- 6: sample efficiency ----------------------------------------------------

// Pretraining recipe for the comparison: ~47 passes over the 256-clip corpus at a
// desk-scale learning rate. At the preset rate the loss stalls just below the
// copy-the-previous-frame baseline and little motion is learned.
const SE_PRETRAIN_LR: f64 = 3e-3;
const SE_PRETRAIN_STEPS: usize = 1500;
const FT_EPOCHS: usize = 15;
const FT_SEEDS: [u64; 3] = [0, 1, 2];

fn criterion_sample_efficiency() -> Outcome {
    let cfg = RunConfig::default();
    let dims = desk_dims(&cfg);
    let labeled = |clips, seed| -> Result<Vec<(Tensor, usize)>, String> {
        make_dataset(DatasetKind::Labeled, clips, 4, seed, dims).and_then(|d| d.labeled()).map_err(|e| e.to_string())
    };
    let train = labeled(64, 5000)?;
    let val = labeled(64, 9000)?;

    let corpus = pretrain_corpus(&cfg);
    let pretrained = |mode: ArMode| -> Result<(PathBuf, f64), String> {
        let mut c = cfg.clone();
        c.model.ar_mode = mode;
        c.train.lr = SE_PRETRAIN_LR;
        let mut model = Model::new(&c).map_err(|e| e.to_string())?;
        let curve = run_pretrain(&mut model, &corpus, SE_PRETRAIN_STEPS, None).map_err(|e| e.to_string())?;
        let path = out_dir().join(format!("pretrain_{mode}.ckpt"));
        save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
        Ok((path, mean(&curve[curve.len() - 50..])))
    };
    let (frame_ckpt, frame_loss) = pretrained(ArMode::Frame)?;
    let (video_ckpt, video_loss) = pretrained(ArMode::Video)?;

    let mean_top1 = |init: &Init| -> Result<f64, String> {
        let mut tops = Vec::new();
        for seed in FT_SEEDS {
            let r = finetune_run(&cfg, init, &train, &val, 4, FT_EPOCHS, seed).map_err(|e| e.to_string())?;
            tops.push(r.best.top1);
        }
        Ok(100.0 * mean(&tops))
    };
    let scratch = mean_top1(&Init::Scratch)?;
    let frame = mean_top1(&Init::Checkpoint(frame_ckpt))?;
    let video = mean_top1(&Init::Checkpoint(video_ckpt))?;
    let detail = format!(
        "top-1 scratch {scratch:.1}, frame-pretrained {frame:.1}, video-pretrained {video:.1} \
         (pretrain loss frame {frame_loss:.4}, video {video_loss:.4})"
    );
    ensure!(frame - scratch >= 10.0, "pretraining gain {:.1} points < 10: {detail}", frame - scratch);
    ensure!(frame >= video - 2.0, "frame-wise trails video-wise by {:.1} points: {detail}", video - frame);
    Ok(detail)
}

// ---- 7: layout and cost ------------------------------------------------------

fn criterion_layout_cost() -> Outcome {
    let layout = layer_layout(25, 4);
    let attention: Vec<usize> = (0..25).filter(|&i| layout[i] == LayerKind::Attention).collect();
    ensure!(attention == [4, 9, 14, 19, 24], "attention layers at {attention:?}");

    let base = RunConfig::default().model;
    let depth25 = |ratio: usize| videomap_core::ModelConfig { depth: 25, mamba_per_attn: ratio, ..base.clone() };
    let (ssm, attn, hybrid) = (depth25(25), depth25(0), depth25(4));

    let lens: Vec<u64> = (0..12).map(|k| 1u64 << k).collect();
    for r in cost_model(&ssm, &lens) {
        let doubled = &cost_model(&ssm, &[2 * r.seq_len])[0];
        ensure!(doubled.total_flops == 2 * r.total_flops, "pure SSM not linear at L={}", r.seq_len);
    }
    let report = &cost_model(&hybrid, &[64])[0];
    let twice = &cost_model(&hybrid, &[128])[0];
    let quadratic = report.layer_flops.iter().zip(&twice.layer_flops).filter(|(a, b)| **b != 2 * **a).count();
    ensure!(quadratic == 5, "{quadratic} layers carry L² terms, expected 5");

    let d = base.embed_dim as u64;
    let s = base.state_size as u64;
    let l_star = crossover_len(d, s, base.bidirectional);
    let check: Vec<u64> = (l_star..l_star + 4096).chain([4 * l_star]).collect();
    let h = cost_model(&hybrid, &check);
    let a = cost_model(&attn, &check);
    for (h, a) in h.iter().zip(&a) {
        ensure!(h.total_flops < a.total_flops, "hybrid {} ≥ attention {} at L={}", h.total_flops, a.total_flops, h.seq_len);
    }
    let at = check.len() - 1;
    Ok(format!(
        "attention at {attention:?}; L*={l_star}; at 4L*={} hybrid {} < attention {} FLOPs",
        4 * l_star,
        h[at].total_flops,
        a[at].total_flops
    ))
}

// ---- 8: format round trips ---------------------------------------------------

fn flips_detected<T>(bytes: &[u8], positions: impl Iterator<Item = usize>, parse: impl Fn(&[u8]) -> videomap_core::Result<T>) -> Result<usize, String> {
    let mut count = 0;
    let mut corrupt = bytes.to_vec();
    for i in positions {
        corrupt[i] ^= 0x01;
        ensure!(parse(&corrupt).is_err(), "flip at byte {i} of {} went unnoticed", bytes.len());
        corrupt[i] ^= 0x01;
        count += 1;
    }
    Ok(count)
}

fn criterion_formats() -> Outcome {
    let dir = out_dir();
    let mut flips = 0;

    // Desk-tiny sized artefacts: full round trip and sampled corruption.
    let cfg = RunConfig::default();
    let model = Model::new(&cfg).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.ckpt");
    save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = videomap_core::checkpoint::load_model(&path).map_err(|e| e.to_string())?;
    ensure!(Checkpoint::from_model(&loaded).to_bytes() == bytes, "checkpoint save→load→save differs");
    for (a, b) in model.store.entries().iter().zip(loaded.store.entries()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(a.name == b.name && same, "tensor {} changed on reload", a.name);
    }
    let stride = bytes.len() / 97 + 1;
    flips += flips_detected(&bytes, (0..bytes.len()).step_by(stride).chain(bytes.len() - 8..bytes.len()), Checkpoint::from_bytes)?;

    let ds = make_dataset(DatasetKind::Labeled, 64, 4, 5000, desk_dims(&cfg)).map_err(|e| e.to_string())?;
    let ds_path = dir.join("roundtrip.vmd");
    ds.write(&ds_path).map_err(|e| e.to_string())?;
    let ds_bytes = std::fs::read(&ds_path).map_err(|e| e.to_string())?;
    let reread = videomap_core::data::read_dataset(&ds_path).map_err(|e| e.to_string())?;
    ensure!(reread.to_bytes() == ds_bytes, "dataset read→write differs");
    let stride = ds_bytes.len() / 97 + 1;
    flips += flips_detected(&ds_bytes, (0..ds_bytes.len()).step_by(stride).chain(ds_bytes.len() - 4..ds_bytes.len()), Dataset::from_bytes)?;

    // Small artefacts: every single byte.
    let small = Model::new(&small_config()).map_err(|e| e.to_string())?;
    let small_bytes = Checkpoint::from_model(&small).to_bytes();
    flips += flips_detected(&small_bytes, 0..small_bytes.len(), Checkpoint::from_bytes)?;
    let tiny_ds = make_dataset(DatasetKind::Pretrain, 2, 0, 1, ClipDims { frames: 2, channels: 1, height: 6, width: 6 })
        .map_err(|e| e.to_string())?
        .to_bytes();
    flips += flips_detected(&tiny_ds, 0..tiny_ds.len(), Dataset::from_bytes)?;

    Ok(format!("bit-exact round trips; {flips} single-byte flips all rejected"))
}

// ---- 9: ablation harness -----------------------------------------------------

const ABLATION_PRETRAIN_STEPS: usize = 20;
const ABLATION_EPOCHS: usize = 2;

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_videomap")).args(args).output().map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "`videomap {}` exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn report_value(report: &str, key: &str) -> Option<String> {
    report.lines().find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

fn criterion_ablation() -> Outcome {
    let start = Instant::now();
    let dir = out_dir().join("ablation");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let p = |name: &str| dir.join(name);
    let depth = RunConfig::default().model.depth.to_string();
    let archs = [("ssm", depth.as_str()), ("attention", "0"), ("hybrid", "4")];

    cli(&["gen-data", "--kind", "pretrain", "--clips", "64", "--out", s(&p("pretrain.vmd"))])?;
    cli(&["gen-data", "--kind", "labeled", "--clips", "64", "--classes", "4", "--out", s(&p("labeled.vmd"))])?;
    cli(&["gen-data", "--kind", "labeled", "--clips", "32", "--classes", "4", "--seed", "9000", "--out", s(&p("val.vmd"))])?;

    // One bench CSV at the preset depth and one at depth 25; each holds every architecture.
    for (name, depth) in [("bench.csv", depth.as_str()), ("bench_depth25.csv", "25")] {
        let bench = p(name);
        cli(&["bench", "--depth", depth, "--ratio", "4", "--L", "64,256,1024", "--out", s(&bench)])?;
        let text = std::fs::read_to_string(&bench).map_err(|e| e.to_string())?;
        ensure!(text.starts_with("L,arch,flops,activations\n"), "bad bench header in {name}");
        for (arch, _) in archs {
            let rows = text.lines().filter(|l| l.split(',').nth(1) == Some(arch)).count();
            ensure!(rows == 3, "{name}: {rows} rows for {arch}");
        }
    }

    let mut table = String::from("arch,ar_mode,final_loss,best_top1\n");
    for (arch, ratio) in archs {
        for mode in ArMode::ALL {
            let mode = mode.to_string();
            let tag = format!("{arch}_{mode}");
            let ckpt = p(&format!("{tag}.ckpt"));
            let steps = ABLATION_PRETRAIN_STEPS.to_string();
            cli(&["pretrain", "--ratio", ratio, "--ar-mode", &mode, "--data", s(&p("pretrain.vmd")), "--steps", &steps, "--out", s(&ckpt)])?;
            let loss_csv = std::fs::read_to_string(p(&format!("{tag}.ckpt.loss.csv"))).map_err(|e| e.to_string())?;
            ensure!(loss_csv.lines().count() == ABLATION_PRETRAIN_STEPS + 1, "{tag}: loss CSV has wrong length");
            let final_loss = loss_csv.lines().last().and_then(|l| l.split(',').nth(1)).unwrap_or("nan").to_string();

            let ft = p(&format!("{tag}.ft.ckpt"));
            let epochs = ABLATION_EPOCHS.to_string();
            let report = cli(&[
                "finetune", "--ratio", ratio, "--ar-mode", &mode, "--data", s(&p("labeled.vmd")), "--val", s(&p("val.vmd")),
                "--init", s(&ckpt), "--epochs", &epochs, "--out", s(&ft),
            ])?;
            let eval_csv = std::fs::read_to_string(p(&format!("{tag}.ft.ckpt.eval.csv"))).map_err(|e| e.to_string())?;
            ensure!(eval_csv.lines().count() == ABLATION_EPOCHS + 2, "{tag}: eval CSV has wrong length");
            let top1 = report_value(&report, "top1").ok_or_else(|| format!("{tag}: report lacks top1"))?;
            cli(&["eval", "--init", s(&ft), "--data", s(&p("val.vmd"))])?;
            table.push_str(&format!("{arch},{mode},{final_loss},{top1}\n"));
        }
    }
    let summary = p("ablation.csv");
    std::fs::write(&summary, &table).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(90 * 60), "harness took {elapsed:?}");
    Ok(format!("9 runs + 2 bench CSVs in {:.0}s, summary at {}", elapsed.as_secs_f64(), summary.display()))
}

// ---- driver -------------------------------------------------------------------

fn run(number: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(outcome) => outcome,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("criterion {number} [{tag}] {name} ({secs:.1}s): {detail}\n");
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(line.as_bytes());
    let _ = stdout.flush();
    outcome.is_ok()
}

/// `VIDEOMAP_CRITERIA=1,8,9` restricts the run to the listed criteria.
fn selected(number: usize) -> bool {
    match std::env::var("VIDEOMAP_CRITERIA") {
        Ok(list) => list.split(',').any(|n| n.trim().parse() == Ok(number)),
        Err(_) => true,
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", criterion_gradients),
        ("scan oracle", criterion_scan),
        ("autoregressive masks", criterion_ar_masks),
        ("mask planning", criterion_mask_planning),
        ("pretraining convergence", criterion_convergence),
        ("sample efficiency", criterion_sample_efficiency),
        ("layout and cost", criterion_layout_cost),
        ("format round trips", criterion_formats),
        ("ablation harness", criterion_ablation),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        if selected(i + 1) && !run(i + 1, name, f) {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
