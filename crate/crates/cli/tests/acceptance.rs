//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use gatedformer::data::{encode_pairs, synth_copy_task, TokenPair, PAD_ID};
use gatedformer::eau::EvaluatorAdjusterUnit;
use gatedformer::grc::GatedResidualConnection;
use gatedformer::layers::ForwardCtx;
use gatedformer::model::{encode_model, load_checkpoint, save_checkpoint, TensorFile};
use gatedformer::optim::{rng_stream, SYNTH_STREAM};
use gatedformer::train::greedy_exact_match;
use gatedformer::verify::{micro_model_config, Component, DEFAULT_STEP};
use gatedformer::{
    AdamW, AdamWConfig, CheckpointError, Error, ModelConfig, Param, ParamKind, ReferenceSize, Tape, Tensor,
    TransformerModel, Variant, Vocab,
};
use gatedformer_cli::{
    cmd_gradcheck, cmd_params, cmd_train, evaluate_files, load_pairs, DataConfig, ParamReport, RunConfig, RUN_DIR_ENV,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

// ---------------------------------------------------------------------------

const REPORTED_COUNTS: [(&str, usize); 6] = [
    ("l3-k256-baseline", 11_066_797),
    ("l2-k256-baseline", 9_223_597),
    ("l2-k128-baseline", 3_698_221),
    ("l3-k256-eau-grc", 13_239_085),
    ("l2-k256-eau-grc", 10_671_789),
    ("l2-k128-eau-grc", 4_061_869),
];

fn ac1_reference_counts() -> Check {
    let dir = workspace_root().join("configs/reference");
    for (name, want) in REPORTED_COUNTS {
        let report = cmd_params(&dir.join(format!("{name}.json"))).map_err(err)?;
        ensure(report.src_vocab_size == 5893 && report.tgt_vocab_size == 7853, || {
            format!(
                "{name}: vocab sizes {}/{}",
                report.src_vocab_size, report.tgt_vocab_size
            )
        })?;
        ensure(report.total() == want, || {
            format!("{name}: {} != {want}", report.total())
        })?;
    }
    Ok("6/6 counts exact".into())
}

fn ac2_placement_delta() -> Check {
    let mut checked = 0;
    for size in ReferenceSize::ALL {
        let base = ParamReport::for_config(ModelConfig::reference(size, Variant::Baseline)).map_err(err)?;
        let (l, k) = (base.num_layers, base.model_dim);
        let eau = 2 * k * k + 5 * k / 2;
        let grc = k * k + k;
        for (variant, expected) in [
            (Variant::EauGrc, l * 3 * eau + l * 5 * grc),
            (Variant::Eau, l * 3 * eau),
            (Variant::Grc, l * 5 * grc),
        ] {
            let r = ParamReport::for_config(ModelConfig::reference(size, variant)).map_err(err)?;
            let delta = r.total() - base.total();
            ensure(delta == expected, || {
                format!("l={l} k={k} {}: delta {delta} != {expected}", variant.name())
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} deltas exact"))
}

fn ac3_gradcheck() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        for report in cmd_gradcheck(Component::All, seed, None).map_err(err)? {
            let want_tol = if report.component == Component::FullMicroModel {
                1e-4
            } else {
                1e-5
            };
            ensure(
                report.tolerance == want_tol && report.step == DEFAULT_STEP && DEFAULT_STEP == 1e-5,
                || {
                    format!(
                        "{}: tolerance {} step {}",
                        report.component.name(),
                        report.tolerance,
                        report.step
                    )
                },
            )?;
            ensure(report.passed, || report.to_text())?;
            worst = worst.max(report.max_scaled_error());
        }
    }
    let micro = micro_model_config(0);
    ensure(
        (
            micro.num_layers,
            micro.model_dim,
            micro.ffn_dim,
            micro.num_heads,
            micro.tgt_vocab_size,
            micro.max_seq_len,
        ) == (1, 4, 8, 2, 11, 3)
            && micro.variant() == Variant::EauGrc,
        || "micro model has the wrong shape".into(),
    )?;
    Ok(format!("6 components x 3 seeds, worst error {worst:.2e}"))
}

// ---------------------------------------------------------------------------

const CASES: u64 = 256;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, k: usize, scale: f64) -> Tensor {
    Tensor::uniform([rows, k], scale, rng)
}

fn small_config(seed: u64, variant: Variant) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        max_seq_len: 8,
        model_dim: 8,
        ffn_dim: 16,
        num_heads: 2,
        dropout: 0.1,
        use_eau: false,
        use_grc: false,
        src_vocab_size: 12,
        tgt_vocab_size: 10,
        label_smoothing: 0.1,
        seed,
        layer_norm_eps: 1e-5,
        scale_embeddings: true,
        gate_bias_init: 0.0,
    }
    .with_variant(variant)
}

fn logits(model: &TransformerModel, src: &[Vec<u32>], pad: &[Vec<bool>], tgt: &[Vec<u32>]) -> Result<Tensor, String> {
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, src, pad, tgt, &mut ForwardCtx::eval())
        .map_err(err)?;
    Ok(tape.value(out).clone())
}

fn ac4_invariants() -> Check {
    for case in 0..CASES {
        let mut rng = rng_stream(case, "acceptance-invariants", 0);
        let k = 2 * rng.gen_range(1..=8);
        let variant = Variant::ALL[rng.gen_range(0..4)];
        let fail = |what: &str| format!("case {case}: {what}");

        let mut unit = EvaluatorAdjusterUnit::new(k, &mut rng).map_err(err)?;
        let scale = rng.gen_range(0.1..3.0);
        let x = uniform(&mut rng, 3, k, scale);
        let it = unit.intermediates(&x).map_err(err)?;
        ensure(it.hidden.data().iter().all(|&h| h >= 0.0), || fail("h < 0"))?;
        ensure(it.scores.data().iter().all(|&e| e > 0.0 && e < 1.0), || {
            fail("e outside (0,1)")
        })?;
        ensure(it.adjustment.data().iter().all(|&a| a > -1.0 && a < 1.0), || {
            fail("a outside (-1,1)")
        })?;
        ensure(
            it.output.data().iter().zip(x.data()).all(|(y, x)| (y - x).abs() < 1.0),
            || fail("|y - x| >= 1"),
        )?;
        unit.adjust.weight.value.fill(0.0);
        unit.adjust.bias.value.fill(0.0);
        ensure(unit.apply(&x).map_err(err)? == x, || {
            fail("EAU not identity with w3 = b3 = 0")
        })?;

        let gk = rng.gen_range(1..=12);
        let mut grc = GatedResidualConnection::new(gk, &mut rng, 0.0).map_err(err)?;
        let scale = rng.gen_range(0.1..5.0);
        let (r, s) = (uniform(&mut rng, 3, gk, scale), uniform(&mut rng, 3, gk, scale));
        let g = grc.gate_of(&r).map_err(err)?;
        ensure(g.data().iter().all(|&g| g > 0.0 && g < 1.0), || fail("g outside (0,1)"))?;
        grc.gate.weight.value.fill(0.0);
        grc.gate.bias.value.fill(0.0);
        let y = grc.apply(&r, &s).map_err(err)?;
        ensure(
            y.data()
                .iter()
                .zip(r.data())
                .zip(s.data())
                .all(|((y, r), s)| *y == r + 0.5 * s),
            || fail("y != r + s/2 at zero parameters"),
        )?;
        grc.gate.bias.value.fill(-20.0);
        let y = grc.apply(&r, &s).map_err(err)?;
        let max_s = s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(
            y.data().iter().zip(r.data()).all(|(y, r)| (y - r).abs() < 1e-7 * max_s),
            || fail("GRC not saturated at bg = -20"),
        )?;

        // causal masking: later target tokens never change earlier logits
        let model = TransformerModel::new(small_config(case, variant)).map_err(err)?;
        let src = vec![(0..5).map(|_| rng.gen_range(4..12)).collect::<Vec<u32>>()];
        let pad = vec![vec![false; 5]];
        let tgt: Vec<u32> = (0..6).map(|_| rng.gen_range(4..10)).collect();
        let cut = rng.gen_range(1..6);
        let mut altered = tgt.clone();
        for t in &mut altered[cut..] {
            *t = rng.gen_range(0..10);
        }
        let a = logits(&model, &src, &pad, &[tgt])?;
        let b = logits(&model, &src, &pad, &[altered])?;
        ensure(a.data()[..cut * 10] == b.data()[..cut * 10], || {
            fail("future target leaked")
        })?;

        // padding: contents of padded positions are invisible
        let short = rng.gen_range(1..5);
        let src: Vec<Vec<u32>> = vec![
            (0..6).map(|_| rng.gen_range(4..12)).collect(),
            (0..6)
                .map(|j| if j < short { rng.gen_range(4..12) } else { PAD_ID })
                .collect(),
        ];
        let pad: Vec<Vec<bool>> = src.iter().map(|r| r.iter().map(|&t| t == PAD_ID).collect()).collect();
        let tgt: Vec<Vec<u32>> = (0..2).map(|_| (0..4).map(|_| rng.gen_range(4..10)).collect()).collect();
        let mut src2 = src.clone();
        for t in &mut src2[1][short..] {
            *t = rng.gen_range(4..12);
        }
        let a = logits(&model, &src, &pad, &tgt)?;
        let b = logits(&model, &src2, &pad, &tgt)?;
        ensure(a == b, || fail("padded source content changed the output"))?;
    }
    Ok(format!("{CASES} cases x 10 invariants"))
}

// ---------------------------------------------------------------------------

fn copy_config(dir: &Path, variant: Variant, max_steps: Option<u64>) -> Result<PathBuf, String> {
    let path = workspace_root().join("configs/copy-task.json");
    let mut cfg: RunConfig = serde_json::from_slice(&fs::read(&path).map_err(err)?).map_err(err)?;
    cfg.model = cfg.model.with_variant(variant);
    if let Some(n) = max_steps {
        cfg.train.max_steps = n;
    }
    cfg.output.run_dir = dir.join("run");
    let out = dir.join("config.json");
    fs::write(&out, serde_json::to_string_pretty(&cfg).map_err(err)?).map_err(err)?;
    Ok(out)
}

/// `count` synthetic pairs that occur in neither the training nor the
/// validation split.
fn held_out(cfg: &RunConfig, count: usize) -> Result<Vec<TokenPair>, String> {
    let DataConfig::Synthetic {
        vocab_size,
        min_len,
        max_len,
        mode,
        ..
    } = cfg.data
    else {
        return Err("copy-task config is not synthetic".into());
    };
    let (train, val) = load_pairs(cfg).map_err(err)?;
    let seen: HashSet<_> = train.iter().chain(&val).map(|p| p.0.clone()).collect();
    let mut rng = rng_stream(cfg.model.seed, SYNTH_STREAM, 2);
    let mut out = Vec::new();
    while out.len() < count {
        for p in synth_copy_task(vocab_size, count, min_len..=max_len, mode, &mut rng).map_err(err)? {
            if out.len() < count && !seen.contains(&p.0) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

fn ac5_copy_task() -> Check {
    let mut summary = Vec::new();
    for variant in Variant::ALL {
        let start = Instant::now();
        let dir = scratch();
        let config = copy_config(dir.path(), variant, None)?;
        let cfg = RunConfig::load(&config).map_err(err)?;
        ensure(cfg.train.batch_size == 32 && cfg.train.max_steps == 2000, || {
            "copy-task schedule changed".into()
        })?;
        let result = cmd_train(&config, false, true, &mut std::io::sink()).map_err(err)?;
        let acc = result.final_val_token_accuracy;
        ensure(acc >= 0.99, || {
            format!("{}: val token accuracy {acc:.4}", variant.name())
        })?;

        let model = load_checkpoint(&cfg.output.run_dir.join("final.ckpt")).map_err(err)?;
        let vocab = Vocab::synthetic(20).map_err(err)?;
        let samples = encode_pairs(&held_out(&cfg, 100)?, &vocab, &vocab);
        let exact = greedy_exact_match(&model, &samples).map_err(err)?;
        ensure(exact >= 0.95, || format!("{}: exact copies {exact:.2}", variant.name()))?;
        let secs = start.elapsed().as_secs_f64();
        ensure(secs < 900.0, || format!("{}: {secs:.0}s", variant.name()))?;
        summary.push(format!("{} acc {acc:.4} exact {exact:.2} {secs:.0}s", variant.name()));
    }
    Ok(summary.join("; "))
}

fn ac6_determinism() -> Check {
    let mut logs = Vec::new();
    for _ in 0..2 {
        let dir = scratch();
        let config = copy_config(dir.path(), Variant::EauGrc, Some(200))?;
        cmd_train(&config, false, true, &mut std::io::sink()).map_err(err)?;
        logs.push(fs::read(dir.path().join("run/loss.csv")).map_err(err)?);
    }
    ensure(logs[0] == logs[1], || "loss CSVs differ".into())?;
    let rows = logs[0].iter().filter(|&&b| b == b'\n').count() - 1;
    ensure(rows == 200, || format!("{rows} rows logged"))?;
    Ok(format!("{rows} rows, {} bytes identical", logs[0].len()))
}

fn bleu_via_binary(hyp: &Path, reference: &Path) -> Result<f64, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gatedformer"))
        .args(["evaluate", "--json", "--hyp"])
        .arg(hyp)
        .arg("--ref")
        .arg(reference)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        String::from_utf8_lossy(&out.stderr).into_owned()
    })?;
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(err)?;
    v["bleu"].as_f64().ok_or_else(|| "no bleu field".to_string())
}

fn ac7_bleu() -> Check {
    let dir = scratch();
    let p = |name: &str| dir.path().join(name);
    fs::write(
        p("same.txt"),
        "the cat sat on the mat .\na quick brown fox jumps over it\n",
    )
    .map_err(err)?;
    fs::write(p("hyp.txt"), "a b c d e\n").map_err(err)?;
    fs::write(p("ref.txt"), "a b c d f\n").map_err(err)?;

    let same = bleu_via_binary(&p("same.txt"), &p("same.txt"))?;
    ensure(same == 100.0, || format!("identical files scored {same}"))?;
    let fixture = bleu_via_binary(&p("hyp.txt"), &p("ref.txt"))?;
    // p = 4/5, 3/4, 2/3, 1/2 and BP = 1
    let oracle = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    ensure(
        (fixture - 66.874).abs() <= 1e-3 && (fixture - oracle).abs() < 1e-9,
        || format!("fixture scored {fixture}"),
    )?;
    let lib = evaluate_files(&p("hyp.txt"), &p("ref.txt")).map_err(err)?.bleu;
    ensure(lib == fixture, || "library and command disagree".into())?;
    Ok(format!("identical {same:.3}, fixture {fixture:.3}"))
}

fn ac8_adamw() -> Check {
    let cfg = AdamWConfig {
        beta1: 0.9,
        beta2: 0.98,
        epsilon: 1e-8,
        weight_decay: 0.05,
        decay_all: false,
        clip_grad_norm: None,
    };
    let mut rng = rng_stream(8, "acceptance-adamw", 0);
    let kinds = [
        ParamKind::Weight,
        ParamKind::Bias,
        ParamKind::Embedding,
        ParamKind::Norm,
    ];
    let mut params: Vec<Param> = kinds
        .iter()
        .map(|&kind| Param::new(Tensor::uniform([10], 1.0, &mut rng), kind))
        .collect();

    // reference state: plain vectors updated by the textbook recurrences
    let mut theta: Vec<Vec<f64>> = params.iter().map(|p| p.value.data().to_vec()).collect();
    let mut m = vec![vec![0.0; 10]; kinds.len()];
    let mut v = vec![vec![0.0; 10]; kinds.len()];

    let mut opt = AdamW::new(cfg.clone()).map_err(err)?;
    for t in 1..=100u64 {
        let lr = 1e-2 * (1.0 + (t as f64).sin()) / 2.0;
        let grads: Vec<Tensor> = kinds.iter().map(|_| Tensor::uniform([10], 2.0, &mut rng)).collect();

        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for (p, g) in params.iter().zip(&grads) {
            let pv = tape.param(p);
            let gv = tape.constant(g.clone());
            let prod = tape.mul(pv, gv).map_err(err)?;
            terms.push(tape.sum(prod).map_err(err)?);
        }
        let mut loss = terms[0];
        for &term in &terms[1..] {
            loss = tape.add(loss, term).map_err(err)?;
        }
        let gradients = tape.backward(loss).map_err(err)?;
        let named = params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (format!("p{i}"), p))
            .collect();
        opt.step(named, &gradients, lr).map_err(err)?;

        for (i, kind) in kinds.iter().enumerate() {
            let decay = matches!(kind, ParamKind::Weight | ParamKind::Embedding);
            for j in 0..10 {
                let g = grads[i].data()[j];
                m[i][j] = cfg.beta1 * m[i][j] + (1.0 - cfg.beta1) * g;
                v[i][j] = cfg.beta2 * v[i][j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i][j] / (1.0 - cfg.beta1.powf(t as f64));
                let v_hat = v[i][j] / (1.0 - cfg.beta2.powf(t as f64));
                let step = m_hat / (v_hat.sqrt() + cfg.epsilon);
                let wd = if decay { cfg.weight_decay * theta[i][j] } else { 0.0 };
                theta[i][j] -= lr * (step + wd);
            }
        }
    }
    let mut worst = 0.0f64;
    for (p, want) in params.iter().zip(&theta) {
        for (a, b) in p.value.data().iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 steps, 4 tensors, max deviation {worst:.1e}"))
}

fn ac9_checkpoint() -> Check {
    let dir = scratch();
    let path = dir.path().join("model.ckpt");
    let model = TransformerModel::new(micro_model_config(9)).map_err(err)?;
    save_checkpoint(&model, &path).map_err(err)?;
    let first = fs::read(&path).map_err(err)?;
    let loaded = load_checkpoint(&path).map_err(err)?;
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &again).map_err(err)?;
    ensure(fs::read(&again).map_err(err)? == first, || {
        "save -> load -> save changed bytes".into()
    })?;
    ensure(encode_model(&loaded).map_err(err)? == first, || {
        "re-encoding changed bytes".into()
    })?;

    let classify = |bytes: &[u8]| -> Result<CheckpointError, String> {
        let p = dir.path().join("tampered.ckpt");
        fs::write(&p, bytes).map_err(err)?;
        match load_checkpoint(&p) {
            Err(Error::Checkpoint(e)) => Ok(e),
            Err(other) => Err(format!("wrong error class: {other}")),
            Ok(_) => Err("tampered checkpoint loaded".into()),
        }
    };
    let file = || TensorFile::decode(&first).map_err(err);

    let mut bad = first.clone();
    bad[0] ^= 0xff;
    ensure(classify(&bad)? == CheckpointError::BadMagic, || "magic".into())?;
    let mut bad = first.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    ensure(
        classify(&bad)? == CheckpointError::VersionMismatch { found: 2, expected: 1 },
        || "version".into(),
    )?;
    ensure(
        matches!(classify(&first[..first.len() - 5])?, CheckpointError::Truncated { .. }),
        || "truncation".into(),
    )?;
    let mut bad = first.clone();
    let n = bad.len();
    bad[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
    ensure(matches!(classify(&bad)?, CheckpointError::NonFinite(_)), || {
        "non-finite".into()
    })?;
    let mut f = file()?;
    let shape = f.tensors[0].1.shape().to_vec();
    f.tensors[0].1 = Tensor::zeros([shape[0] + 1, shape[1]]);
    ensure(
        matches!(classify(&f.encode())?, CheckpointError::ShapeMismatch { .. }),
        || "shape".into(),
    )?;
    let mut f = file()?;
    f.tensors.pop();
    ensure(
        matches!(classify(&f.encode())?, CheckpointError::MissingTensor(_)),
        || "missing".into(),
    )?;
    let mut f = file()?;
    f.tensors.swap(0, 1);
    ensure(
        matches!(classify(&f.encode())?, CheckpointError::UnexpectedTensor { .. }),
        || "order".into(),
    )?;
    let mut f = file()?;
    f.header = f.header.replace("\"num_heads\":2", "\"num_heads\":3");
    ensure(matches!(classify(&f.encode())?, CheckpointError::Config(_)), || {
        "config".into()
    })?;

    let status = Command::new(env!("CARGO_BIN_EXE_gatedformer"))
        .args(["translate", "--checkpoint"])
        .arg(dir.path().join("tampered.ckpt"))
        .arg("--input")
        .arg(&path)
        .output()
        .map_err(err)?
        .status;
    ensure(status.code() == Some(3), || {
        format!("corrupt checkpoint exit status {status}")
    })?;
    Ok(format!("{} bytes stable, 8 tamperings classified", first.len()))
}

fn main() {
    // the suite chooses its own run directories
    std::env::remove_var(RUN_DIR_ENV);
    let criteria: [Criterion; 9] = [
        ("AC1", "reference parameter counts", ac1_reference_counts),
        ("AC2", "placement delta identity", ac2_placement_delta),
        ("AC3", "gradient oracle", ac3_gradcheck),
        ("AC4", "module invariants", ac4_invariants),
        ("AC5", "copy task, all variants", ac5_copy_task),
        ("AC6", "training determinism", ac6_determinism),
        ("AC7", "bleu fixtures", ac7_bleu),
        ("AC8", "adamw oracle", ac8_adamw),
        ("AC9", "checkpoint round trip and tampering", ac9_checkpoint),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
