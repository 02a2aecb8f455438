//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --test acceptance`, or a subset with
//! `cargo test --test acceptance -- 1 5 10`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mscnn::checkpoint::Checkpoint;
use mscnn::data::{augment_training_set, compute_standardization, elastic_transform, sample_windows, standardize, synthesize, ElasticParams};
use mscnn::gradcheck::{check_network, relative_error, RELATIVE_ERROR_FLOOR};
use mscnn::layers::{
    conv2d, conv2d_backward, maxpool, maxpool_backward, relu, relu_backward, softmax_cross_entropy, Dropout, Linear, Mode,
    Rounding,
};
use mscnn::metrics::{confusion, overlap, predict_label, pttas, tau_grid, ClassScores, EvalReport, PositiveSet, SliceEval};
use mscnn::segment::{read_label_map, write_label_map, LabelMap, LabelMapMeta};
use mscnn::seed::{self, Stream};
use mscnn::{CheckpointError, Error, Network, NetworkConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mscnn(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mscnn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`mscnn {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

const EPS: f64 = 1e-6;

/// Largest relative error between `analytic` and central differences of `f`
/// over every element of `x`, skipping probes that straddle a kink.
fn max_error(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> (f64, usize) {
    let f0 = f(x);
    let (mut worst, mut skipped) = (0.0f64, 0);
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += EPS;
        let fp = f(&p);
        p.data_mut()[i] = x.data()[i] - EPS;
        let fm = f(&p);
        let (up, down) = ((fp - f0) / EPS, (f0 - fm) / EPS);
        if (up - down).abs() > 1e-3 * up.abs().max(down.abs()).max(RELATIVE_ERROR_FLOOR) {
            skipped += 1;
            continue;
        }
        worst = worst.max(relative_error(analytic.data()[i], (fp - fm) / (2.0 * EPS)));
    }
    (worst, skipped)
}

fn c1_param_count(_: &Path) -> Check {
    let out = mscnn(&["param-count"], Path::new("."))?;
    ensure(out.trim() == "2856932", format!("printed {:?}", out.trim()))?;
    Ok("2856932 parameters".into())
}

fn c2_shapes(_: &Path) -> Check {
    let net = Network::<f32>::build(NetworkConfig::default(), &mut seed::rng(0, Stream::Init)).map_err(|e| e.to_string())?;
    let trace = net.observed_shapes().map_err(|e| e.to_string())?;
    let maps = [128, 96, 64];
    for p in 0..3 {
        ensure(trace.pathway_stage1[p] == [maps[p], 32, 32], format!("pathway {p} stage 1 {:?}", trace.pathway_stage1[p]))?;
        ensure(trace.pathway_stage2[p] == [maps[p], 16, 16], format!("pathway {p} stage 2 {:?}", trace.pathway_stage2[p]))?;
    }
    ensure(trace.concat == [288, 16, 16], format!("concat {:?}", trace.concat))?;
    ensure(trace.flatten == 8192, format!("flatten {}", trace.flatten))?;
    let mut r = rng(2);
    let x = Tensor::from_vec(&[1, 1, 65, 65], (0..65 * 65).map(|_| r.gen::<f32>()).collect()).unwrap();
    let p = net.infer(&x).map_err(|e| e.to_string())?.probs;
    ensure(p.shape() == [1, 4], format!("output {:?}", p.shape()))?;
    Ok("pathways 128/96/64 at 32 then 16, concat 288, flatten 8192".into())
}

fn c3_gradients(_: &Path) -> Check {
    let mut r = rng(3);
    let mut report = Vec::new();
    let mut worst = 0.0f64;
    let mut note = |name: &str, (err, skipped): (f64, usize)| {
        worst = worst.max(err);
        report.push(format!("{name} {err:.1e}{}", if skipped > 0 { format!(" ({skipped} kinks)") } else { String::new() }));
    };

    let x = random(&[2, 3, 9, 9], &mut r);
    let w = random(&[4, 3, 5, 5], &mut r);
    let b = random(&[4], &mut r);
    let proj = random(&[2, 4, 9, 9], &mut r);
    let g = conv2d_backward(&x, &w, &proj).unwrap();
    note("conv/input", max_error(&x, &g.input, |x| dot(&conv2d(x, &w, &b).unwrap(), &proj)));
    note("conv/weight", max_error(&w, &g.weight, |w| dot(&conv2d(&x, w, &b).unwrap(), &proj)));
    note("conv/bias", max_error(&b, &g.bias, |b| dot(&conv2d(&x, &w, b).unwrap(), &proj)));

    for (k, s, rounding) in [(3, 2, Rounding::Floor), (3, 2, Rounding::Ceil), (2, 2, Rounding::Floor)] {
        let x = random(&[2, 2, 8, 8], &mut r);
        let (y, arg) = maxpool(&x, k, s, rounding).unwrap();
        let proj = random(y.shape(), &mut r);
        let gx = maxpool_backward(x.shape(), &arg, &proj).unwrap();
        note(
            &format!("pool{k}/{s} {rounding:?}"),
            max_error(&x, &gx, |x| dot(&maxpool(x, k, s, rounding).unwrap().0, &proj)),
        );
    }

    let mut x = random(&[3, 40], &mut r);
    for v in x.data_mut() {
        if v.abs() < 0.01 {
            *v = 0.5;
        }
    }
    let proj = random(&[3, 40], &mut r);
    let gx = relu_backward(&x, &proj).unwrap();
    note("relu", max_error(&x, &gx, |x| dot(&relu(x), &proj)));

    let mut fc = Linear::<f64>::new(12, 4, &mut r).unwrap();
    let x = random(&[3, 12], &mut r);
    let proj = random(&[3, 4], &mut r);
    fc.forward(&x).unwrap();
    let gx = fc.backward(&proj).unwrap();
    let (w0, b0) = (fc.weight.value.clone(), fc.bias.value.clone());
    let (gw, gb) = (fc.weight.grad.clone(), fc.bias.grad.clone());
    note("linear/input", max_error(&x, &gx, |x| dot(&fc.infer(x).unwrap(), &proj)));
    note(
        "linear/weight",
        max_error(&w0, &gw, |w| dot(&Linear::from_parts(w.clone(), b0.clone()).unwrap().infer(&x).unwrap(), &proj)),
    );
    note(
        "linear/bias",
        max_error(&b0, &gb, |b| dot(&Linear::from_parts(w0.clone(), b.clone()).unwrap().infer(&x).unwrap(), &proj)),
    );

    let x = random(&[4, 30], &mut r);
    let proj = random(&[4, 30], &mut r);
    let mut drop = Dropout::<f64>::new(0.5).unwrap();
    drop.forward(&x, Mode::Train, &mut rng(9)).unwrap();
    let gx = drop.backward(&proj).unwrap();
    note(
        "dropout",
        max_error(&x, &gx, |x| {
            let mut d = Dropout::<f64>::new(0.5).unwrap();
            dot(&d.forward(x, Mode::Train, &mut rng(9)).unwrap(), &proj)
        }),
    );

    let logits = random(&[5, 4], &mut r);
    let labels = [0, 1, 2, 3, 1];
    let gl = softmax_cross_entropy(&logits, &labels).unwrap().grad_logits;
    note("softmax-ce", max_error(&logits, &gl, |l| softmax_cross_entropy(l, &labels).unwrap().loss));

    let config = NetworkConfig::reduced(0.125, 33).map_err(|e| e.to_string())?;
    let net = check_network(config, 3, 2, 8, EPS).map_err(|e| e.to_string())?;
    note("network 1/8", (net.max_relative_error, net.skipped));

    ensure(worst < 1e-4, format!("max relative error {worst:.2e}: {}", report.join(", ")))?;
    Ok(format!("max relative error {worst:.1e} over {} checks", report.len()))
}

fn c4_metric_oracle(_: &Path) -> Check {
    let mut r = rng(4);
    let mut evals = Vec::new();
    for case in 0..1000 {
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        let label: u8 = r.gen_range(1..=3);
        let labels: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..4)).collect();
        let mask: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..2)).collect();

        // brute force over the 2-D grid
        let (mut tp, mut fp, mut fn_, mut any_tp, mut any_fp, mut any_fn) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
        let mut per_label = [0u64; 4];
        for i in 0..h {
            for j in 0..w {
                let (p, t) = (labels[i * w + j], mask[i * w + j]);
                per_label[usize::from(p)] += 1;
                match (p == label, t == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
                match (p != 0, t == 1) {
                    (true, true) => any_tp += 1,
                    (true, false) => any_fp += 1,
                    (false, true) => any_fn += 1,
                    _ => {}
                }
            }
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let ov = overlap(&labels, &mask, label, PositiveSet::LabelMatched).map_err(|e| e.to_string())?;
        let any = overlap(&labels, &mask, label, PositiveSet::AnyTumor).map_err(|e| e.to_string())?;
        let tumor = per_label[1] + per_label[2] + per_label[3];
        let expected = [
            ratio(2 * tp, 2 * tp + fp + fn_),
            ratio(tp, tp + fn_),
            ratio(2 * any_tp, 2 * any_tp + any_fp + any_fn),
            ratio(any_tp, any_tp + any_fn),
            ratio(per_label[usize::from(label)], tumor),
        ];
        let got = [ov.dice(), ov.sensitivity(), any.dice(), any.sensitivity(), pttas(&labels, label)];
        ensure(got == expected, format!("case {case}: {got:?} vs {expected:?}"))?;

        let predicted = match r.gen_range(0..4u8) {
            0 => None,
            l => Some(l),
        };
        evals.push(SliceEval {
            slice_id: format!("c{case}"),
            label,
            predicted,
            dice: got[0],
            sensitivity: got[1],
            pttas: got[4],
            scores: ClassScores::default(),
        });
    }
    let c = confusion(&evals).map_err(|e| e.to_string())?;
    let mut matrix = [[0usize; 3]; 3];
    let mut nc = [0usize; 3];
    for e in &evals {
        let t = usize::from(e.label) - 1;
        match e.predicted {
            Some(p) => matrix[t][usize::from(p) - 1] += 1,
            None => nc[t] += 1,
        }
    }
    ensure(c.matrix == matrix && c.nonclassified == nc, "confusion counts differ")?;
    let diag = matrix[0][0] + matrix[1][1] + matrix[2][2];
    ensure(c.accuracy == diag as f64 / 1000.0, "accuracy differs")?;
    Ok("1000 random pairs match the brute-force counts exactly".into())
}

fn c5_table3(_: &Path) -> Check {
    let rows: [([usize; 3], usize); 3] = [([659, 4, 3], 42), ([7, 1414, 1], 4), ([1, 3, 911], 15)];
    let mut evals = Vec::new();
    for (t, (counts, nc)) in rows.iter().enumerate() {
        let label = t as u8 + 1;
        let mk = |predicted| SliceEval {
            slice_id: String::new(),
            label,
            predicted,
            dice: 0.0,
            sensitivity: 0.0,
            pttas: 0.0,
            scores: ClassScores::default(),
        };
        for (p, &n) in counts.iter().enumerate() {
            evals.extend(std::iter::repeat_with(|| mk(Some(p as u8 + 1))).take(n));
        }
        evals.extend(std::iter::repeat_with(|| mk(None)).take(*nc));
    }
    let c = confusion(&evals).map_err(|e| e.to_string())?;
    ensure(c.total == 3064, format!("{} slices", c.total))?;
    ensure((c.accuracy - 0.9739).abs() <= 0.0005, format!("accuracy {:.5}", c.accuracy))?;
    for (s, target) in c.sensitivity.iter().zip([0.93, 0.99, 0.98]) {
        ensure((s - target).abs() <= 0.005, format!("sensitivity {s:.4} vs {target}"))?;
    }
    Ok(format!(
        "accuracy {:.4}, sensitivities {:.3}/{:.3}/{:.3}",
        c.accuracy, c.sensitivity[0], c.sensitivity[1], c.sensitivity[2]
    ))
}

fn c6_classification(_: &Path) -> Check {
    let mut r = rng(6);
    let grid = tau_grid(101);
    let mut majority_cases = 0;
    for case in 0..10_000 {
        let scores = ClassScores {
            counts: [r.gen_range(0..500), r.gen_range(0..500), r.gen_range(0..500)],
        };
        let truth: u8 = r.gen_range(1..=3);
        let mut previous = true;
        for &tau in &grid {
            let classified = predict_label(&scores, tau).map_err(|e| e.to_string())?.is_some();
            ensure(previous || !classified, format!("case {case}: classified again at τ={tau}"))?;
            previous = classified;
        }
        let ratios = scores.ratios();
        if ratios[usize::from(truth) - 1] > 0.5 {
            majority_cases += 1;
            for &tau in grid.iter().filter(|&&t| t <= 0.5) {
                let p = predict_label(&scores, tau).map_err(|e| e.to_string())?;
                ensure(p == Some(truth), format!("case {case}: τ={tau} gave {p:?}, truth {truth}"))?;
            }
        }
        ensure(predict_label(&scores, 1.0).map_err(|e| e.to_string())?.is_none(), format!("case {case}: τ=1 classified"))?;
    }
    Ok(format!("10000 triples, {majority_cases} with a majority true label"))
}

fn c7_determinism(dir: &Path) -> Check {
    mscnn(&["gen-synthetic", "--out", "phantoms", "--slices", "20", "--size", "96", "--seed", "7"], dir)?;
    let common = [
        "train", "--data", "phantoms", "--seed", "7", "--width-scale", "0.25", "--window", "33",
        "--positive-windows", "20", "--negative-windows", "30",
    ];
    let run = |out: &str, epochs: &str, extra: &[&str]| {
        let mut args = common.to_vec();
        args.extend(["--out", out, "--epochs", epochs]);
        args.extend(extra);
        mscnn(&args, dir)
    };
    run("a", "5", &[])?;
    run("b", "5", &[])?;
    let read = |p: &str| std::fs::read(dir.join(p)).map_err(|e| format!("{p}: {e}"));
    for e in 1..=5 {
        let name = format!("epoch-{e:03}.mscn");
        ensure(read(&format!("a/{name}"))? == read(&format!("b/{name}"))?, format!("{name} differs between runs"))?;
    }
    ensure(read("a/model.mscn")? == read("b/model.mscn")?, "final checkpoints differ")?;
    run("c", "2", &[])?;
    // the headers record each run's planned epoch count, so compare state only
    let state = |p: &str| -> Result<Vec<u8>, String> {
        let mut ck = Checkpoint::decode(&read(p)?).map_err(|e| e.to_string())?;
        ck.train = None;
        ck.encode().map_err(|e| e.to_string())
    };
    ensure(state("c/epoch-002.mscn")? == state("a/epoch-002.mscn")?, "2-epoch run diverges from the 5-epoch run")?;
    run("c", "5", &["--resume", "c/epoch-002.mscn"])?;
    ensure(read("c/model.mscn")? == read("a/model.mscn")?, "resumed run differs from the uninterrupted run")?;
    Ok("two seeded runs and a resume after epoch 2 are byte-identical".into())
}

fn c8_end_to_end(dir: &Path) -> Check {
    mscnn(&["gen-synthetic", "--out", "phantoms", "--slices", "60", "--size", "128", "--seed", "7"], dir)?;
    mscnn(
        &[
            "train", "--data", "phantoms", "--out", "run", "--fold", "0", "--seed", "7", "--width-scale", "0.25",
            "--window", "33", "--epochs", "5", "--positive-windows", "40", "--negative-windows", "60",
        ],
        dir,
    )?;
    mscnn(
        &["segment", "--checkpoint", "run/model.mscn", "--data", "phantoms", "--fold", "0", "--stride", "2", "--out", "maps"],
        dir,
    )?;
    let classified = mscnn(&["classify", "maps", "--tau", "0.75"], dir)?;
    mscnn(
        &["evaluate", "--data", "phantoms", "--labels", "maps", "--fold", "0", "--tau", "0.75", "--out", "report.json"],
        dir,
    )?;
    let report = EvalReport::read_json(&dir.join("report.json")).map_err(|e| e.to_string())?;
    let a = &report.aggregate;
    ensure(a.slices == 12, format!("{} held-out slices", a.slices))?;
    for line in classified.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let s = report.slices.iter().find(|s| s.slice_id == f[0]).ok_or("classify/evaluate id mismatch")?;
        ensure(f[1] == s.predicted.map_or("-1".into(), |p| p.to_string()), "classify and evaluate disagree")?;
    }
    let summary = format!(
        "accuracy {:.3}, Dice {:.3}, sensitivity {:.3} on {} held-out slices",
        a.accuracy, a.mean_dice, a.mean_sensitivity, a.slices
    );
    ensure(a.accuracy >= 0.9 && a.mean_dice >= 0.7 && a.mean_sensitivity >= 0.8, summary.clone())?;
    Ok(summary)
}

fn c9_data_pipeline(_: &Path) -> Check {
    let records = synthesize(12, 96, 9).map_err(|e| e.to_string())?;
    let mut windows = Vec::new();
    for (i, r) in records.iter().enumerate() {
        windows.extend(sample_windows(r, 30, 40, 33, &mut seed::rng(9, Stream::Sample(i as u64))).map_err(|e| e.to_string())?);
    }
    let stats = compute_standardization(&windows).map_err(|e| e.to_string())?;
    let mut values = Vec::new();
    for w in &windows {
        let mut patch = w.patch.clone();
        standardize(&mut patch, &stats);
        values.extend(w.patch.iter().zip(&patch).filter(|(o, _)| !o.is_nan()).map(|(_, &s)| f64::from(s)));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    ensure(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6, format!("standardized mean {mean:e}, std {std}"))?;

    // real-shaped training partition: 2452 slices
    let base = &records[0];
    let train: Vec<_> = (0..2452)
        .map(|i| mscnn::data::SliceRecord {
            id: format!("t{i}"),
            ..base.clone()
        })
        .collect();
    let small: Vec<_> = train
        .iter()
        .map(|r| {
            let mut r = r.clone();
            let crop = |v: &[f32]| (0..32).flat_map(|y| v[(y + 30) * 96 + 30..(y + 30) * 96 + 62].to_vec()).collect::<Vec<_>>();
            let cropm = |v: &[u8]| (0..32).flat_map(|y| v[(y + 30) * 96 + 30..(y + 30) * 96 + 62].to_vec()).collect::<Vec<_>>();
            r.image = mscnn::data::Raster::new(32, 32, crop(&r.image.data)).unwrap();
            r.mask = mscnn::data::Raster::new(32, 32, cropm(&r.mask.data)).unwrap();
            r
        })
        .filter(|r| r.tumor_pixels() > 0)
        .collect();
    ensure(small.len() == 2452, "cropped slices lost their tumor")?;
    let augmented = augment_training_set(&small, None, &mut seed::rng(9, Stream::Augment)).map_err(|e| e.to_string())?;
    ensure(augmented.len() == 4904, format!("augmented to {}", augmented.len()))?;
    ensure(
        augmented.iter().all(|r| r.mask.data.iter().all(|&m| m <= 1)),
        "augmented mask is not binary",
    )?;

    let zero = ElasticParams { alpha: 0.0, sigma: 4.0 };
    for r in &records {
        let (img, mask) = elastic_transform(&r.image, &r.mask, &zero, &mut rng(1)).map_err(|e| e.to_string())?;
        ensure(
            img.data.iter().zip(&r.image.data).all(|(a, b)| a.to_bits() == b.to_bits()) && mask == r.mask,
            "alpha = 0 changed the slice",
        )?;
    }
    Ok(format!("mean {mean:.1e}, std 1{:+.1e}, 2452 -> 4904, identity at alpha 0", std - 1.0))
}

fn c10_formats(dir: &Path) -> Check {
    let mut net = Network::<f32>::build(NetworkConfig::default(), &mut seed::rng(10, Stream::Init)).map_err(|e| e.to_string())?;
    net.stats = Some(mscnn::data::Standardization::new(0.123456789, 0.987654321).unwrap());
    let mut r = rng(10);
    let velocity: Vec<_> = net
        .params()
        .iter()
        .map(|p| Tensor::from_vec(p.value.shape(), (0..p.value.len()).map(|_| r.gen()).collect()).unwrap())
        .collect();
    let ck = Checkpoint {
        network: net,
        velocity: Some(velocity),
        epoch: 4,
        seed: 10,
        train: None,
    };
    let path = dir.join("net.mscn");
    ck.save(&path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(back.encode().unwrap() == bytes, "checkpoint re-encodes differently")?;
    ensure(back.network.stats == ck.network.stats && back.velocity == ck.velocity, "checkpoint state differs")?;

    let map = LabelMap {
        meta: LabelMapMeta {
            width: 7,
            height: 5,
            slice_id: "s".into(),
            checkpoint: "net.mscn".into(),
            stride: 1,
        },
        labels: (0..35).map(|_| r.gen_range(0..4)).collect(),
    };
    let lp = dir.join("s.labels");
    write_label_map(&lp, &map).map_err(|e| e.to_string())?;
    ensure(read_label_map(&lp).map_err(|e| e.to_string())? == map, "label map differs after round trip")?;

    let decode = |b: &[u8]| Checkpoint::decode(b).err();
    let mut bad = bytes.clone();
    bad[1] ^= 0xff;
    ensure(matches!(decode(&bad), Some(Error::Checkpoint(CheckpointError::BadMagic(_)))), "corrupt magic")?;
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    ensure(
        matches!(decode(&bad), Some(Error::Checkpoint(CheckpointError::UnsupportedVersion(7)))),
        "bad version",
    )?;
    ensure(
        matches!(decode(&bytes[..bytes.len() / 2]), Some(Error::Checkpoint(CheckpointError::Truncated(_)))),
        "truncation",
    )?;
    Ok(format!("{} byte checkpoint and label map round-trip; distinct corruption errors", bytes.len()))
}

type Criterion = (u32, &'static str, u64, fn(&Path) -> Check);

const CRITERIA: [Criterion; 10] = [
    (1, "parameter count", 1, c1_param_count),
    (2, "shape reproduction", 10, c2_shapes),
    (3, "gradient suite", 300, c3_gradients),
    (4, "metric oracle equivalence", 60, c4_metric_oracle),
    (5, "confusion-matrix arithmetic", 1, c5_table3),
    (6, "classification-function properties", 10, c6_classification),
    (7, "pipeline determinism", 1200, c7_determinism),
    (8, "end-to-end phantom run", 2700, c8_end_to_end),
    (9, "data-pipeline invariants", 60, c9_data_pipeline),
    (10, "format round-trips", 10, c10_formats),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, limit, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let dir = tempfile::tempdir().expect("temporary directory");
        let start = Instant::now();
        let result = check(dir.path());
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(limit);
        let (status, detail) = match (&result, in_time) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over the time limit")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {status}  {name}: {detail} [{:.1} s, limit {limit} s]",
            elapsed.as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
