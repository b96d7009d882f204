//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use nodx::classifiers::{
    concat_features, decode_forest, decode_logistic, encode_forest, encode_logistic, fit_logistic_trace, mtry_for,
    train_forest, LogisticModel, FUSED_LEN,
};
use nodx::cli::{self, load_data_items, RunLog};
use nodx::consensus::{consensus_mask, Design, Label, Mask3D};
use nodx::eval::{auc, roc_points, run_reduced_training, split_by_patient, trapezoid_area, EvalConfig, EvalReport, ModelKind, ReducedMode};
use nodx::ingest::{parse_annotations_with_warnings, serialize_annotations, AnnotationSet, CtVolume, Locus, NoduleReading, ReadingSession, Roi};
use nodx::nn::{
    build_network, decode_weights, encode_weights, extract_cnn_features, patch_inputs, train_inputs, Arch, LayerSpec,
    Mode, NetworkModel, TrainConfig, FEATURE_UNITS,
};
use nodx::patchset::{extract_patch, normalize_patch, Normalization, Patch, PatchSet};
use nodx::phantom::{generate_patient, NoduleClass, PhantomConfig};
use nodx::qif::{compute_features, strip_size_features, N_FEATURES, REGISTRY};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn run_criterion(n: usize, name: &str, limit: Duration, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let took = t.elapsed();
    let (ok, detail) = match res {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; over time limit {limit:?}")),
        Err(e) => (false, e),
    };
    println!(
        "[{}] criterion {n:>2} {name} ({:.1} s): {detail}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn cli(args: &[&str]) -> Result<(), String> {
    let argv: Vec<String> = std::iter::once("nodx").chain(args.iter().copied()).map(String::from).collect();
    match cli::run(argv.clone()) {
        0 => Ok(()),
        code => Err(format!("`{}` exited {code}", argv.join(" "))),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// 1

fn max_rel_error(m: &NetworkModel, xs: &[Vec<f64>], ys: &[u8], drop: Option<u64>) -> f64 {
    const H: f64 = 1e-5;
    let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let (grads, _) = m.gradients(&batch, ys, drop).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = m.clone();
    for (t, g) in grads.iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + H;
            let up = probe.loss(&batch, ys, drop).unwrap();
            probe.params_mut()[t][i] = orig - H;
            let down = probe.loss(&batch, ys, drop).unwrap();
            probe.params_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

fn criterion_gradients() -> Check {
    use LayerSpec::*;
    let cases: Vec<(&str, [usize; 3], Vec<LayerSpec>)> = vec![
        ("dense", [2, 6, 6], vec![Flatten, Dense { out: 2 }]),
        ("conv", [2, 6, 6], vec![Conv { out: 3, k: 3 }, Flatten, Dense { out: 2 }]),
        ("relu", [2, 6, 6], vec![Conv { out: 2, k: 3 }, Relu, Flatten, Dense { out: 2 }]),
        ("maxpool", [2, 6, 6], vec![Conv { out: 2, k: 3 }, MaxPool, Flatten, Dense { out: 2 }]),
        ("dropout", [1, 5, 5], vec![Flatten, Dense { out: 6 }, Dropout { rate: 0.5 }, Dense { out: 2 }]),
        (
            "composed",
            [3, 10, 10],
            vec![
                Conv { out: 3, k: 3 },
                Relu,
                MaxPool,
                Conv { out: 2, k: 2 },
                Relu,
                Dropout { rate: 0.25 },
                Flatten,
                Dense { out: 5 },
                Relu,
                Dropout { rate: 0.5 },
                Dense { out: 2 },
            ],
        ),
    ];
    let mut report = Vec::new();
    for (k, (name, shape, specs)) in cases.iter().enumerate() {
        let mut m = NetworkModel::from_specs(None, *shape, specs, 100 + k as u64).map_err(|e| e.to_string())?;
        m.set_mode(Mode::Train);
        let mut r = rng(k as u64);
        let len = shape.iter().product::<usize>();
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let ys = [0u8, 1, 1, 0];
        let err = max_rel_error(&m, &xs, &ys, Some(17 + k as u64));
        ensure(err < 1e-4, format!("{name}: relative error {err:.2e}"))?;
        report.push(format!("{name} {err:.1e}"));
    }
    Ok(format!("max relative error per net: {}", report.join(", ")))
}

// 2

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

fn criterion_auc() -> Check {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for inst in 0..200 {
        let n = r.gen_range(2..=500);
        let levels = if inst % 2 == 0 { 10 } else { 1_000_000 };
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let brute = brute_auc(&scores, &labels);
        let trap = trapezoid_area(&roc_points(&scores, &labels).map_err(|e| e.to_string())?);
        let rank = auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((trap - brute).abs()).max((rank - brute).abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.2e}"))?;
    Ok(format!("200 instances, max deviation {worst:.1e}"))
}

// 3

fn criterion_consensus() -> Check {
    let dims = [4, 4, 1];
    let mut configs = 0usize;
    let mut check = |readers: &[Mask3D]| -> Result<(), String> {
        let refs: Vec<&Mask3D> = readers.iter().collect();
        let got = consensus_mask(&refs).map_err(|e| e.to_string())?;
        for idx in 0..16 {
            let votes = readers.iter().filter(|m| m.contains_index(idx)).count();
            let want = 2 * votes >= readers.len() && votes > 0;
            ensure(got.contains_index(idx) == want, format!("voxel {idx}: {votes}/{} votes", readers.len()))?;
        }
        configs += 1;
        Ok(())
    };
    // Every voxel carries a distinct inclusion pattern, under every cyclic placement.
    for n in 1..=4usize {
        for shift in 0..16 {
            let readers: Vec<Mask3D> = (0..n)
                .map(|k| {
                    let mut m = Mask3D::new(dims);
                    for v in 0..16usize {
                        if (((v + shift) % 16) >> k) & 1 == 1 {
                            m.insert_index(v);
                        }
                    }
                    m
                })
                .collect();
            check(&readers)?;
        }
    }
    // Every single-reader mask on the grid.
    for bits in 1u32..(1 << 16) {
        let mut m = Mask3D::new(dims);
        for v in 0..16 {
            if bits >> v & 1 == 1 {
                m.insert_index(v);
            }
        }
        check(&[m])?;
    }
    let mut r = rng(3);
    for _ in 0..20_000 {
        let n = r.gen_range(1..=4);
        let readers: Vec<Mask3D> = (0..n)
            .map(|_| {
                let mut m = Mask3D::new(dims);
                for v in 0..16 {
                    if r.gen_bool(0.5) {
                        m.insert_index(v);
                    }
                }
                m
            })
            .collect();
        check(&readers)?;
    }
    Ok(format!("{configs} reader configurations match brute force"))
}

// 4

fn phantom_patch_items(n_patients: usize, seed: u64, arch: Arch) -> Result<(Vec<Vec<f64>>, Vec<u8>), String> {
    let cfg = PhantomConfig {
        n_patients,
        non_nodules_per_patient: 0,
        seed,
        ..PhantomConfig::default()
    };
    let studies: Vec<_> = (0..n_patients)
        .into_par_iter()
        .map(|i| generate_patient(&cfg, i).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let mut set = PatchSet::new("overfit", Normalization::HuWindow);
    for s in &studies {
        let (lo, hi) = s.volume.min_max_hu();
        for t in &s.nodules {
            let raw = extract_patch(&s.volume, t.gt_centroid, arch.patch_shape()).map_err(|e| e.to_string())?;
            let label = i32::from(t.class == NoduleClass::Malignant);
            set.patches.push(
                normalize_patch(&raw, set.normalization, lo as f64, hi as f64, format!("{}-{}", t.patient_id, set.patches.len()), label)
                    .map_err(|e| e.to_string())?,
            );
        }
    }
    let labels = set.patches.iter().map(|p| p.label as u8).collect();
    Ok((patch_inputs(&set), labels))
}

fn criterion_overfit() -> Check {
    let (xs, ys) = phantom_patch_items(16, 4, Arch::Cnn21)?;
    ensure(xs.len() == 32, format!("expected 32 items, got {}", xs.len()))?;
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 64,
        seed: 4,
        augment: false,
        heldout_fraction: 0.0,
        ..TrainConfig::default()
    };
    let out = train_inputs(build_network(Arch::Cnn21, 4), &xs, &ys, &cfg).map_err(|e| e.to_string())?;
    let mut model = out.checkpoints.final_model.clone();
    model.set_mode(Mode::Eval);
    let probs = model.predict_inputs(&xs).map_err(|e| e.to_string())?;
    let correct = probs.iter().zip(&ys).filter(|(&p, &y)| (p >= 0.5) == (y == 1)).count();
    let first = out.log.iter().position(|l| {
        l.train_loss.is_finite() && l.train_loss < 0.05
    });
    ensure(correct == xs.len(), format!("training accuracy {correct}/{}", xs.len()))?;
    Ok(format!(
        "training accuracy {correct}/{} after 300 epochs (train loss {:.4}, below 0.05 from epoch {:?})",
        xs.len(),
        out.log.last().map(|l| l.train_loss).unwrap_or(f64::NAN),
        first
    ))
}

// 5, 6, 7

struct Pipeline {
    report: PathBuf,
}

fn run_pipeline(root: &Path, patients: usize, seed: u64, models: &str, extra: &[&str]) -> Result<Pipeline, String> {
    let ph = root.join("phantom");
    let c = root.join("consensus");
    let ev = root.join("eval");
    let s = seed.to_string();
    let with = |args: &[&str]| -> Vec<String> { extra.iter().chain(args).map(|a| a.to_string()).collect() };
    let call = |args: Vec<String>| cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    call(with(&["--seed", &s, "phantom", "gen", "--patients", &patients.to_string(), "--out", p(&ph)]))?;
    call(with(&["--seed", &s, "consensus", "build", "--in", p(&ph), "--out", p(&c)]))?;
    call(with(&["--arch", "cnn21", "patches", "extract", "--in", p(&c)]))?;
    call(with(&["qif", "extract", "--in", p(&c)]))?;
    call(with(&[
        "--seed", &s, "eval", "run", "--in", p(&c), "--design", "s1_vs_s45", "--models", models, "--out", p(&ev),
    ]))?;
    Ok(Pipeline { report: ev })
}

fn criterion_end_to_end(root: &Path) -> Check {
    let run = run_pipeline(root, 100, 7, "cnn21,cnn21+rf,lm", &[])?;
    let report: EvalReport =
        serde_json::from_slice(&fs::read(run.report.join("report.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let a = |m: &str| report.row(m).map(|r| r.auc).ok_or(format!("no row for {m}"));
    let (cnn, fused, lm) = (a("cnn21")?, a("cnn21+rf")?, a("lm")?);
    let detail = format!(
        "cnn21 auc {cnn:.3}, cnn21+rf auc {fused:.3}, lm auc {lm:.3} (train {}, validation {})",
        report.n_train, report.n_validation
    );
    ensure(cnn >= 0.90, format!("{detail}; cnn21 below 0.90"))?;
    ensure(fused >= cnn - 0.02, format!("{detail}; fusion below cnn21 - 0.02"))?;
    ensure(lm >= 0.80, format!("{detail}; lm below 0.80"))?;
    Ok(detail)
}

fn criterion_reduced(consensus: &Path) -> Check {
    let design = Design::S1vS45;
    let items = load_data_items(consensus, None, &[], &[ModelKind::Rf], &mut RunLog::default()).map_err(|e| e.to_string())?;
    let config = EvalConfig::default();
    let run = |mode, trials| run_reduced_training(design, ModelKind::Rf, mode, trials, &items, &config, 6).map_err(|e| e.to_string());
    let t80 = run(ReducedMode::Train80, 1)?;
    let t20 = run(ReducedMode::Train20, 1)?;
    let pm = run(ReducedMode::OnePlusOneMinus, 200)?;
    ensure(pm.trials.len() == 200, format!("{} trials", pm.trials.len()))?;

    let stripped: Vec<Vec<f64>> = items
        .iter()
        .filter_map(|i| i.qif.as_ref())
        .map(|q| strip_size_features(q).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    ensure(stripped.iter().all(|v| v.len() == 38), "size-stripped vector is not 38 long")?;
    let ns = run_reduced_training(design, ModelKind::RfNoSize, ReducedMode::Train80, 1, &items, &config, 6).map_err(|e| e.to_string())?;
    let y: Vec<u8> = (0..stripped.len()).map(|i| (i % 2) as u8).collect();
    let f = train_forest(&stripped, &y, 5, 1).map_err(|e| e.to_string())?;
    ensure(f.n_features == 38, format!("rf_no_size forest sees {} features", f.n_features))?;

    let detail = format!(
        "train80 acc {:.3}, train20 acc {:.3}, 1+/1- mean acc {:.3} over 200, rf_no_size train80 acc {:.3} on 38 features",
        t80.mean_acc, t20.mean_acc, pm.mean_acc, ns.mean_acc
    );
    ensure(t80.mean_acc >= t20.mean_acc - 0.03, format!("{detail}; train80 < train20 - 0.03"))?;
    ensure(pm.mean_acc > 0.65, format!("{detail}; 1+/1- not above 0.65"))?;
    ensure(pm.mean_acc <= t80.mean_acc + 0.02, format!("{detail}; 1+/1- above train80 + 0.02"))?;
    Ok(detail)
}

fn criterion_determinism(root: &Path) -> Check {
    let mut csvs = Vec::new();
    for k in 0..2 {
        let run = run_pipeline(&root.join(format!("run{k}")), 20, 11, "cnn21,cnn21+rf,lm", &["--threads", "1"])?;
        csvs.push(fs::read(run.report.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    ensure(!csvs[0].is_empty() && csvs[0] == csvs[1], "metrics CSVs differ")?;
    Ok(format!("two runs, metrics.csv identical ({} bytes)", csvs[0].len()))
}

// 8

fn random_patch_set(r: &mut ChaCha8Rng) -> PatchSet {
    let shape = [r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..4)];
    let norm = if r.gen_bool(0.5) { Normalization::HuWindow } else { Normalization::ScanMinmax };
    let mut set = PatchSet::new(["s1_vs_s45", "s12_vs_s45", "all"][r.gen_range(0..3)], norm);
    for k in 0..r.gen_range(0..6) {
        set.patches.push(Patch {
            shape,
            values: (0..shape.iter().product::<usize>()).map(|_| r.gen::<f32>() * 4.0 - 2.0).collect(),
            item_id: format!("PT{}-N{k}", r.gen_range(0..1000)),
            label: r.gen_range(0..6),
            scan_min_hu: r.gen_range(-3000.0..-500.0),
            scan_max_hu: r.gen_range(0.0..3000.0),
        });
    }
    set
}

fn random_annotations(r: &mut ChaCha8Rng) -> AnnotationSet {
    let locus = |r: &mut ChaCha8Rng| Locus {
        x: r.gen_range(0..512),
        y: r.gen_range(0..512),
        z: r.gen_range(0..300),
    };
    let sessions = (0..r.gen_range(1..=4))
        .map(|s| ReadingSession {
            nodules: (0..r.gen_range(0..4))
                .map(|k| NoduleReading {
                    nodule_id: format!("N{k}-R{s}"),
                    malignancy: r.gen_range(1..=5),
                    rois: (0..r.gen_range(1..4))
                        .map(|_| Roi {
                            slice_index: r.gen_range(0..300),
                            edges: (0..r.gen_range(1..8)).map(|_| (r.gen_range(0..512), r.gen_range(0..512))).collect(),
                        })
                        .collect(),
                })
                .collect(),
            small_nodules: (0..r.gen_range(0..3)).map(|_| locus(r)).collect(),
            non_nodules: (0..r.gen_range(0..3)).map(|_| locus(r)).collect(),
        })
        .collect();
    AnnotationSet {
        patient_id: format!("LIDC-{:04}", r.gen_range(0..10000)),
        sessions,
    }
}

fn criterion_round_trips() -> Check {
    let mut r = rng(8);
    for i in 0..100 {
        let set = random_patch_set(&mut r);
        let bytes = set.encode().map_err(|e| e.to_string())?;
        let back = PatchSet::decode(&bytes).map_err(|e| e.to_string())?;
        ensure(back == set && back.encode().map_err(|e| e.to_string())? == bytes, format!("NDX1 instance {i}"))?;
    }
    let specs = [LayerSpec::Conv { out: 2, k: 3 }, LayerSpec::Relu, LayerSpec::MaxPool, LayerSpec::Flatten, LayerSpec::Dense { out: 2 }];
    for i in 0..100 {
        let m = if i % 10 == 0 {
            build_network(if i % 20 == 0 { Arch::Cnn21 } else { Arch::Cnn47 }, i)
        } else {
            NetworkModel::from_specs(None, [r.gen_range(1..4), 6, 6], &specs, i).map_err(|e| e.to_string())?
        };
        let epoch = r.gen_bool(0.5).then(|| r.gen_range(0..300));
        let loss = r.gen_bool(0.5).then(|| r.gen::<f64>());
        let bytes = encode_weights(&m, epoch, loss).map_err(|e| e.to_string())?;
        let (back, e2, l2) = decode_weights(&bytes).map_err(|e| e.to_string())?;
        let same = back.arch == m.arch && back.input_shape == m.input_shape && back.layers == m.layers;
        ensure(same && e2 == epoch && l2.map(f64::to_bits) == loss.map(f64::to_bits), format!("NDXW instance {i}"))?;
        ensure(encode_weights(&back, e2, l2).map_err(|e| e.to_string())? == bytes, format!("NDXW bytes {i}"))?;
    }
    for i in 0..100 {
        let p = r.gen_range(1..12);
        let n = r.gen_range(2..40);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
        let mut y: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        let f = train_forest(&x, &y, r.gen_range(1..20), i).map_err(|e| e.to_string())?;
        let bytes = encode_forest(&f).map_err(|e| e.to_string())?;
        let back = decode_forest(&bytes).map_err(|e| e.to_string())?;
        ensure(back == f && encode_forest(&back).map_err(|e| e.to_string())? == bytes, format!("NDXF instance {i}"))?;
    }
    for i in 0..100 {
        let m = LogisticModel {
            intercept: r.sample::<f64, _>(StandardNormal) * 10.0,
            slope: r.sample::<f64, _>(StandardNormal) * 10.0,
            converged: r.gen_bool(0.5),
            iterations: r.gen_range(0..100),
        };
        let bytes = encode_logistic(&m).map_err(|e| e.to_string())?;
        let back = decode_logistic(&bytes).map_err(|e| e.to_string())?;
        ensure(
            back.intercept.to_bits() == m.intercept.to_bits() && back.slope.to_bits() == m.slope.to_bits() && back == m,
            format!("NDXL instance {i}"),
        )?;
        ensure(encode_logistic(&back).map_err(|e| e.to_string())? == bytes, format!("NDXL bytes {i}"))?;
    }
    for i in 0..100 {
        let set = random_annotations(&mut r);
        let xml = serialize_annotations(&set);
        let (back, warnings) = parse_annotations_with_warnings(xml.as_bytes()).map_err(|e| e.to_string())?;
        ensure(back == set && warnings.is_empty(), format!("XML instance {i}"))?;
        ensure(serialize_annotations(&back) == xml, format!("XML bytes {i}"))?;
    }
    Ok("NDX1, NDXW, NDXF, NDXL and XML: 100 instances each round-trip bit-exactly".into())
}

// 9

fn criterion_split() -> Check {
    let mut splits = 0;
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let n_patients = r.gen_range(2..30);
        let mut patients = Vec::new();
        let mut labels = Vec::new();
        for pt in 0..n_patients {
            let k = r.gen_range(1..=4);
            for j in 0..k {
                patients.push(format!("P{pt:03}"));
                // The first two patients carry both classes so a valid split exists.
                let l = if pt < 2 && j < 2 { j == 1 } else { r.gen_bool(0.5) };
                labels.push(if l { Label::Positive } else { Label::Negative });
            }
            if pt < 2 && k < 2 {
                patients.push(format!("P{pt:03}"));
                labels.push(Label::Positive);
            }
        }
        let refs: Vec<&str> = patients.iter().map(String::as_str).collect();
        let frac = r.gen_range(0.5..0.9);
        let (train, val) = split_by_patient(&refs, &labels, frac, r.gen_bool(0.5), seed).map_err(|e| format!("seed {seed}: {e}"))?;
        let tp: std::collections::HashSet<&str> = train.iter().map(|&i| refs[i]).collect();
        ensure(val.iter().all(|&i| !tp.contains(refs[i])), format!("seed {seed}: patient on both sides"))?;
        splits += 1;
    }
    Ok(format!("{splits} seeds, no patient overlap"))
}

// 10

fn criterion_qif() -> Check {
    let spacing = [0.7, 0.7, 1.25];
    let dims = [64, 64, 40];
    let radius = 9.0;
    let center = [32.0, 32.0, 20.0];
    let mut r = rng(10);
    let mut voxels = Vec::with_capacity(dims.iter().product());
    let mut mask = Mask3D::new(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d2: f64 = [x, y, z]
                    .iter()
                    .zip(center)
                    .zip(spacing)
                    .map(|((&v, c), s)| ((v as f64 - c) * s).powi(2))
                    .sum();
                let inside = d2 <= radius * radius;
                if inside {
                    mask.insert(x, y, z);
                }
                let base = if inside { 20.0 } else { -850.0 };
                voxels.push((base + 25.0 * r.sample::<f64, _>(StandardNormal)).round() as i16);
            }
        }
    }
    let vol = CtVolume::new(dims, spacing, voxels.clone(), "SPHERE").map_err(|e| e.to_string())?;
    let f = compute_features(&vol, &mask).map_err(|e| e.to_string())?;
    let analytic = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
    let measured = f.get("f12").ok_or("no volume feature")?;
    let rel = (measured - analytic).abs() / analytic;
    ensure(rel < 0.05, format!("sphere volume {measured:.1} vs {analytic:.1} mm3"))?;

    let doubled = CtVolume::new(dims, spacing.map(|s| 2.0 * s), voxels, "SPHERE").map_err(|e| e.to_string())?;
    let f2 = compute_features(&doubled, &mask).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut n_dimensionless = 0;
    for (i, d) in REGISTRY.iter().enumerate() {
        if d.unit == "1" {
            n_dimensionless += 1;
            let diff = (f.values()[i] - f2.values()[i]).abs();
            ensure(diff <= 1e-9, format!("{} changes by {diff:.2e} when spacing doubles", d.name))?;
            worst = worst.max(diff);
        }
    }

    let cfg = PhantomConfig {
        n_patients: 250,
        non_nodules_per_patient: 0,
        seed: 10,
        ..PhantomConfig::default()
    };
    let counts: Vec<usize> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| -> Result<usize, String> {
            let s = generate_patient(&cfg, i).map_err(|e| e.to_string())?;
            for m in &s.gt_masks {
                let v = compute_features(&s.volume, m).map_err(|e| e.to_string())?;
                if v.values().len() != N_FEATURES || !v.values().iter().all(|x| x.is_finite()) {
                    return Err(format!("{}: non-finite feature", s.volume.patient_id));
                }
            }
            Ok(s.gt_masks.len())
        })
        .collect::<Result<_, _>>()?;
    let n: usize = counts.iter().sum();
    ensure(n == 500, format!("{n} phantom nodules"))?;
    Ok(format!(
        "sphere volume error {:.2}%, {n_dimensionless} dimensionless features max change {worst:.1e}, {n} phantom nodules finite",
        rel * 100.0
    ))
}

// 11

fn criterion_logistic() -> Check {
    let mut r = rng(11);
    let (b0, b1) = (-2.0, 1.5);
    let x: Vec<f64> = (0..10_000).map(|_| r.sample(StandardNormal)).collect();
    let y: Vec<u8> = x
        .iter()
        .map(|&v| u8::from(r.gen::<f64>() < 1.0 / (1.0 + (-(b0 + b1 * v)).exp())))
        .collect();
    let (m, trace) = fit_logistic_trace(&x, &y).map_err(|e| e.to_string())?;
    let detail = format!("intercept {:.3}, slope {:.3}, {} iterations", m.intercept, m.slope, m.iterations);
    ensure((m.intercept - b0).abs() <= 0.1 && (m.slope - b1).abs() <= 0.1, format!("{detail}; outside ±0.1"))?;
    ensure(m.converged, format!("{detail}; not converged"))?;
    let monotone = trace.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs());
    ensure(monotone, format!("{detail}; log-likelihood decreased"))?;
    Ok(format!("{detail}, log-likelihood monotone over {} steps", trace.len()))
}

// 12

fn criterion_fusion() -> Check {
    let (xs, ys) = phantom_patch_items(2, 12, Arch::Cnn21)?;
    let mut set = PatchSet::new("fusion", Normalization::HuWindow);
    for (k, (x, y)) in xs.iter().zip(&ys).enumerate() {
        set.patches.push(Patch {
            shape: Arch::Cnn21.patch_shape(),
            values: x.iter().map(|&v| v as f32).collect(),
            item_id: format!("I{k}"),
            label: *y as i32,
            scan_min_hu: -1000.0,
            scan_max_hu: 1000.0,
        });
    }
    let feats = extract_cnn_features(&build_network(Arch::Cnn21, 12), &set).map_err(|e| e.to_string())?;
    ensure(feats.iter().all(|f| f.len() == 200 && f.len() == FEATURE_UNITS), "cnn feature length is not 200")?;
    let fused: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| concat_features(f, &vec![0.5; N_FEATURES]))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(fused.iter().all(|v| v.len() == 250 && v.len() == FUSED_LEN), "fused length is not 250")?;
    ensure(mtry_for(250) == 15, format!("mtry_for(250) = {}", mtry_for(250)))?;
    let forest = train_forest(&fused, &ys, 10, 12).map_err(|e| e.to_string())?;
    ensure(forest.mtry == 15, format!("forest mtry {}", forest.mtry))?;
    Ok("cnn features 200, fused 250, forest mtry 15".into())
}

fn main() {
    let secs = Duration::from_secs;
    let work = tempfile::tempdir().expect("temp dir");
    let e2e = work.path().join("e2e");
    let mut results = Vec::new();
    results.push(run_criterion(1, "gradient correctness", secs(5), criterion_gradients));
    results.push(run_criterion(2, "AUC oracle equivalence", secs(5), criterion_auc));
    results.push(run_criterion(3, "consensus correctness", secs(5), criterion_consensus));
    results.push(run_criterion(4, "overfit capacity", secs(300), criterion_overfit));
    results.push(run_criterion(5, "end-to-end phantom experiment", secs(900), || criterion_end_to_end(&e2e)));
    results.push(run_criterion(6, "reduced-training protocol", secs(600), || {
        criterion_reduced(&e2e.join("consensus"))
    }));
    results.push(run_criterion(7, "determinism", secs(1800), || criterion_determinism(&work.path().join("det"))));
    results.push(run_criterion(8, "format round-trips", secs(10), criterion_round_trips));
    results.push(run_criterion(9, "patient-split hygiene", secs(10), criterion_split));
    results.push(run_criterion(10, "QIF sanity", secs(30), criterion_qif));
    results.push(run_criterion(11, "logistic recovery", secs(5), criterion_logistic));
    results.push(run_criterion(12, "fusion arithmetic", secs(5), criterion_fusion));
    let passed = results.iter().filter(|&&b| b).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
