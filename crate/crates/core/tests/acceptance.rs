//! End-to-end acceptance checks, one line per criterion.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rskt_seg::bench::ablation::{ablation_table, AblationSetup};
use rskt_seg::bench::{aggregate_means, fwiou, macc, miou, ConfusionMatrix, SpeedReport};
use rskt_seg::cma::{multi_rotation_costs, FusionStrategy};
use rskt_seg::encoder::Trainability;
use rskt_seg::flops::{reduction_ratio, Ratio, Reading};
use rskt_seg::fusion::FusionConfig;
use rskt_seg::model::{ModelConfig, RsktModel};
use rskt_seg::params::ModuleKind;
use rskt_seg::sample::{ImageSample, LabelMap};
use rskt_seg::synth;
use rskt_seg::training::{
    build_param_groups, count_params, cross_entropy_loss, model_gradient_check, train, trainable_names,
    GradCheckOptions, TrainConfig,
};
use rskt_seg::transfer::{DecoderConfig, SegLogits};
use rskt_seg::Tensor;

const ROTATION_TOL: f64 = 1e-5;
const METRIC_TOL: f64 = 1e-12;
const TABLE_TOL: f64 = 0.01;
const GRAD_TOL: f64 = 1e-3;
const OVERFIT_MIOU: f64 = 0.95;
const OVERFIT_LOSS: f64 = 0.05;
const PERMUTATION_TOL: f64 = 1e-5;
const CE_LN4_TOL: f64 = 1e-9;
const CE_SATURATED: f64 = 1e-6;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn default_model() -> RsktModel {
    RsktModel::new(ModelConfig::default(), FusionConfig::default(), DecoderConfig::default()).unwrap()
}

fn clip_mean(sample: &ImageSample, model: &ModelConfig, text: &Tensor) -> Tensor {
    let vols = multi_rotation_costs(sample, &model.clip_spec(), text).unwrap();
    let mut acc = vols[0].values.clone();
    for v in &vols[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(v.values.data()) {
            *a += b;
        }
    }
    acc.map(|x| x / 4.0)
}

fn rotation_equivariance() -> Result<String, String> {
    let start = Instant::now();
    let model = default_model();
    let vocab = model.vocabulary(["building", "road", "tree"]).unwrap();
    let text = model.text_embeddings(&vocab).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let img = synth::random_image(seed, 64);
        let m = clip_mean(&img, &model.model, &text);
        for k in 1..4 {
            let mr = clip_mean(&img.rot90(k), &model.model, &text);
            worst = worst.max(mr.max_rel_diff(&m.rot90(k)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < ROTATION_TOL, || format!("max rel err {worst:e}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!("max rel err {worst:.2e} over 20 images, {secs:.1} s"))
}

struct Brute {
    miou: Option<f64>,
    fwiou: Option<f64>,
    macc: Option<f64>,
}

fn brute_metrics(pred: &[i64], gt: &[i64], n: usize, ignore: i64) -> Brute {
    let mut iou = Vec::new();
    let mut acc = Vec::new();
    let mut fw = 0.0;
    let labelled = gt.iter().filter(|&&g| g != ignore).count();
    for c in 0..n as i64 {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0 {
            let v = tp as f64 / (tp + fp + fn_) as f64;
            iou.push(v);
            fw += (tp + fn_) as f64 / labelled as f64 * v;
        }
        if tp + fn_ > 0 {
            acc.push(tp as f64 / (tp + fn_) as f64);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Brute {
        miou: mean(&iou),
        fwiou: (labelled > 0).then_some(fw),
        macc: mean(&acc),
    }
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() < METRIC_TOL,
        (None, None) => true,
        _ => false,
    }
}

fn metric_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ignore = 255;
    for case in 0..100 {
        let n = rng.random_range(2..=6usize);
        let pred: Vec<i64> = (0..64).map(|_| rng.random_range(0..n as i64)).collect();
        let gt: Vec<i64> = (0..64)
            .map(|_| if rng.random_bool(0.15) { ignore } else { rng.random_range(0..n as i64) })
            .collect();
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(
            &LabelMap::new(8, 8, pred.clone()).unwrap(),
            &LabelMap::new(8, 8, gt.clone()).unwrap(),
            ignore,
        )
        .map_err(|e| e.to_string())?;
        let b = brute_metrics(&pred, &gt, n, ignore);
        ensure(close(miou(&cm).0, b.miou), || format!("case {case}: mIoU differs"))?;
        ensure(close(fwiou(&cm), b.fwiou), || format!("case {case}: fwIoU differs"))?;
        ensure(close(macc(&cm), b.macc), || format!("case {case}: mACC differs"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("100 random 8x8 pairs agree, {secs:.2} s"))
}

fn table_identities() -> Result<String, String> {
    let vaihingen = [35.27, 59.57, 7.54, 46.71, 26.57, 30.34];
    let isaid = [
        62.37, 82.74, 30.46, 33.06, 11.08, 33.33, 18.16, 58.29, 62.04, 1.75, 35.71, 11.27, 60.21, 83.99, 46.27,
    ];
    let datasets = [90.60, 44.04, 32.49, 34.53, 28.14, 42.99, 37.16, 41.22];
    let mut out = Vec::new();
    for (label, values, expected) in [
        ("vaihingen", &vaihingen[..], 34.33),
        ("isaid", &isaid[..], 42.05),
        ("datasets", &datasets[..], 43.90),
    ] {
        let m = aggregate_means(values).map_err(|e| e.to_string())?;
        ensure((m - expected).abs() < TABLE_TOL, || format!("{label}: mean {m} vs {expected}"))?;
        out.push(format!("{label} {m:.2}"));
    }
    let speed = SpeedReport::from_per_dataset(BTreeMap::from([("avg".to_string(), 65.11)]), 0, 1)
        .map_err(|e| e.to_string())?;
    ensure((speed.fps - 15.36).abs() < TABLE_TOL, || format!("fps {}", speed.fps))?;
    out.push(format!("fps {:.2}", speed.fps));
    Ok(out.join(", "))
}

fn flop_law() -> Result<String, String> {
    let both = [Ratio::new(1, 1), Ratio::new(1, 16), Ratio::new(1, 256)];
    let kv = [Ratio::new(1, 1), Ratio::new(1, 4), Ratio::new(1, 16)];
    let mut seen = Vec::new();
    for (i, r) in [1u64, 2, 4].into_iter().enumerate() {
        let b = reduction_ratio(16, 16, 128, r, Reading::BothOperands).map_err(|e| e.to_string())?;
        let k = reduction_ratio(16, 16, 128, r, Reading::KeysValuesOnly).map_err(|e| e.to_string())?;
        ensure(b == both[i], || format!("r={r}: both-operands ratio {b}"))?;
        ensure(k == kv[i], || format!("r={r}: keys/values ratio {k}"))?;
        seen.push(format!("r={r}: {b} | {k}"));
    }
    Ok(seen.join("; "))
}

fn gradient_check() -> Result<String, String> {
    let start = Instant::now();
    let model = default_model();
    let sample = synth::sample(5, 64, 2, 0.05);
    let vocab = model.vocabulary(["building", "water"]).unwrap();
    let report = model_gradient_check(&model, &sample, &vocab, &GradCheckOptions::default())
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let modules = report.modules();
    let expected: Vec<ModuleKind> = model.params.names().map(ModuleKind::of).collect();
    ensure(expected.iter().all(|m| modules.contains(m)), || "a module was not sampled".into())?;
    ensure(report.entries.len() >= 50, || format!("{} coordinates", report.entries.len()))?;
    ensure(report.max_rel_err < GRAD_TOL, || format!("max rel err {:e}", report.max_rel_err))?;
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} coordinates over {} modules, max rel err {:.2e}, {secs:.1} s",
        report.entries.len(),
        modules.len(),
        report.max_rel_err
    ))
}

fn overfit() -> Result<String, String> {
    let start = Instant::now();
    let mut model = default_model();
    let data = synth::dataset(0, 4, 64, 3, 0.05);
    let vocab = model.vocabulary(["building", "tree", "water"]).unwrap();
    let cfg = TrainConfig { max_iters: 200, ..TrainConfig::default() };
    let outcome = train(&mut model, &data, &vocab, &cfg).map_err(|e| e.to_string())?;
    let mut cm = ConfusionMatrix::new(3);
    for s in &data {
        let pred = model.predict(s, &vocab).map_err(|e| e.to_string())?;
        cm.accumulate(&pred, s.label.as_ref().unwrap(), 255).map_err(|e| e.to_string())?;
    }
    let m = miou(&cm).0.unwrap_or(0.0);
    let last = *outcome.losses.last().unwrap();
    let tenth = outcome.losses.len() / 10;
    let head = outcome.losses[..tenth].iter().sum::<f64>() / tenth as f64;
    let tail = outcome.losses[outcome.losses.len() - tenth..].iter().sum::<f64>() / tenth as f64;
    let secs = start.elapsed().as_secs_f64();
    ensure(m >= OVERFIT_MIOU, || format!("training mIoU {m:.4}"))?;
    ensure(last < OVERFIT_LOSS, || format!("final loss {last:.4}"))?;
    ensure(tail < head, || format!("late mean loss {tail:.4} >= early {head:.4}"))?;
    ensure(secs < 300.0, || format!("took {secs:.1} s"))?;
    Ok(format!("mIoU {m:.4}, final loss {last:.4}, {secs:.1} s"))
}

fn permutation_equivariance() -> Result<String, String> {
    let model = default_model();
    let names = ["building", "road", "tree", "water", "car"];
    let vocab = model.vocabulary(names).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let sample = synth::random_image(seed, 64);
        let base = model.forward(&sample, &vocab).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..names.len()).collect();
        perm.shuffle(&mut rng);
        let permuted = model.forward(&sample, &vocab.permuted(&perm).unwrap()).map_err(|e| e.to_string())?;
        for (i, &p) in perm.iter().enumerate() {
            worst = worst.max(permuted.values.select(0, i).max_rel_diff(&base.values.select(0, p)));
        }
    }
    ensure(worst < PERMUTATION_TOL, || format!("max rel err {worst:e}"))?;
    Ok(format!("max rel err {worst:.2e} over 3 permutations"))
}

fn finetuning_contracts() -> Result<String, String> {
    let mut model = RsktModel::new(
        ModelConfig { encoder_layers: 2, guidance_layer: 1, ..ModelConfig::default() },
        FusionConfig { d_c: 16, heads: 2, num_layers: 1, ..FusionConfig::default() },
        DecoderConfig { num_layers: 1, clip_layers: vec![1], dino_layers: vec![1], remoteclip_layers: vec![1] },
    )
    .unwrap();
    let data = synth::dataset(1, 2, 64, 2, 0.05);
    let vocab = model.vocabulary(["a", "b"]).unwrap();

    let groups = build_param_groups(&model.params, Trainability::Attention, Trainability::Frozen);
    let trainable = trainable_names(&groups);
    let tagged: Vec<String> = model
        .params
        .names()
        .filter(|n| n.starts_with("clip.") && n.contains(".attn_proj."))
        .map(String::from)
        .collect();
    let clip_trainable: Vec<&String> = trainable.iter().filter(|n| n.starts_with("clip.")).collect();
    ensure(tagged.len() == 2 && clip_trainable.len() == 2, || {
        format!("{} tagged, {} trainable clip tensors", tagged.len(), clip_trainable.len())
    })?;
    ensure(tagged.iter().all(|n| trainable.contains(n)), || "an attention tensor is frozen".into())?;

    let mut total = 0usize;
    let mut train_count = 0usize;
    for (name, p) in model.params.iter() {
        let n = p.value.data().len();
        total += n;
        if trainable.contains(name) {
            train_count += n;
        }
    }
    let counted = count_params(&groups);
    ensure(counted.total == total && counted.trainable == train_count, || {
        format!("count_params {counted:?} vs brute force ({total}, {train_count})")
    })?;

    let frozen_before: Vec<(String, Tensor)> = model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("dino.") || n.starts_with("rclip."))
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect();
    let cfg = TrainConfig { max_iters: 3, batch_size: 2, lr: 1e-2, ..TrainConfig::default() };
    train(&mut model, &data, &vocab, &cfg).map_err(|e| e.to_string())?;
    for (name, before) in &frozen_before {
        let after = model.params.tensor(name).unwrap();
        ensure(after.data() == before.data(), || format!("{name} changed"))?;
    }
    let moved = tagged
        .iter()
        .filter(|n| model.params.tensor(n).unwrap().data() != model_fresh_value(n).data())
        .count();
    ensure(moved == tagged.len(), || format!("{moved} of {} attention tensors moved", tagged.len()))?;
    Ok(format!(
        "{} frozen tensors unchanged, 2 attention tensors trainable, {total} params / {train_count} trainable",
        frozen_before.len()
    ))
}

fn model_fresh_value(name: &str) -> Tensor {
    let m = RsktModel::new(
        ModelConfig { encoder_layers: 2, guidance_layer: 1, ..ModelConfig::default() },
        FusionConfig { d_c: 16, heads: 2, num_layers: 1, ..FusionConfig::default() },
        DecoderConfig { num_layers: 1, clip_layers: vec![1], dino_layers: vec![1], remoteclip_layers: vec![1] },
    )
    .unwrap();
    m.params.tensor(name).unwrap().clone()
}

fn cross_entropy_values() -> Result<String, String> {
    let mask = LabelMap::from_fn(4, 4, |y, x| ((y + x) % 4) as i64);
    let uniform = SegLogits { values: Tensor::full(&[4, 4, 4], 0.3) };
    let (l, _) = cross_entropy_loss(&uniform, &mask, 255).map_err(|e| e.to_string())?;
    let ln4 = 4f64.ln();
    ensure((l - ln4).abs() < CE_LN4_TOL, || format!("uniform loss {l}"))?;
    let saturated = SegLogits {
        values: Tensor::from_fn(&[4, 4, 4], |i| if i[0] as i64 == mask.at(i[1], i[2]) { 20.0 } else { 0.0 }),
    };
    let (s, _) = cross_entropy_loss(&saturated, &mask, 255).map_err(|e| e.to_string())?;
    ensure(s < CE_SATURATED, || format!("saturated loss {s:e}"))?;
    Ok(format!("uniform {l:.9} (ln 4 = {ln4:.9}), saturated {s:.2e}"))
}

fn ablation_harness() -> Result<String, String> {
    let start = Instant::now();
    let train_set = synth::dataset(2, 2, 64, 3, 0.05);
    let classes: Vec<String> = ["building", "tree", "water"].iter().map(|s| s.to_string()).collect();
    let eval_a = synth::dataset(3, 2, 64, 3, 0.05);
    let eval_b = synth::dataset(4, 2, 64, 2, 0.05);
    let setup = AblationSetup {
        model: ModelConfig::default(),
        fusion: FusionConfig::default(),
        decoder: DecoderConfig::default(),
        train: TrainConfig { max_iters: 3, batch_size: 2, ..TrainConfig::default() },
        classes: classes.clone(),
        train_set: &train_set,
        eval_sets: vec![
            ("fixture-a".into(), classes.clone(), eval_a),
            ("fixture-b".into(), vec!["building".into(), "road".into()], eval_b),
        ],
    };
    let rows = setup.sweep(&[1, 2, 3, 4, 5, 6]).map_err(|e| e.to_string())?;
    let strategies: Vec<FusionStrategy> = rows.iter().take(3).map(|r| r.strategy).collect();
    ensure(strategies == FusionStrategy::ALL, || format!("strategies {strategies:?}"))?;
    let layers: Vec<usize> = rows.iter().skip(3).map(|r| r.num_layers).collect();
    ensure(layers == [1, 2, 3, 4, 5, 6], || format!("layers {layers:?}"))?;
    ensure(
        rows.iter().all(|r| r.final_loss.is_finite() && r.m_miou.is_finite() && r.m_macc.is_finite()),
        || "non-finite ablation value".into(),
    )?;
    let table = ablation_table(&rows);
    println!("{table}");
    ensure(table.lines().count() == rows.len() + 2, || "table row count".into())?;
    Ok(format!("{} variants, {:.1} s", rows.len(), start.elapsed().as_secs_f64()))
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("rotation equivariance of mean CLIP cost", rotation_equivariance),
        ("metric oracle equivalence", metric_oracle),
        ("table aggregation identities", table_identities),
        ("attention FLOP reduction law", flop_law),
        ("full-pipeline gradient check", gradient_check),
        ("overfit sanity", overfit),
        ("class-permutation equivariance", permutation_equivariance),
        ("finetuning contracts", finetuning_contracts),
        ("cross-entropy analytic values", cross_entropy_values),
        ("fusion-strategy and depth ablation", ablation_harness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut total = Duration::ZERO;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        total += t.elapsed();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {failed} failed, {:.1} s", total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
