use std::time::Instant;

use weightgen::analysis::{
    adversarial_transfer_experiment, distill, ensemble_report, path_eval, PathKind, PathSpec,
};
use weightgen::bank::{arch_hash, WeightBank};
use weightgen::config::{parse_config_str, ExperimentKind};
use weightgen::data::load_or_synthesize;
use weightgen::hypernet::{generate, sample_z};
use weightgen::rng::stream;
use weightgen::target::dataset_accuracy;
use weightgen::tensor::Tensor;
use weightgen::trainer::{train, Task, TrainConfig};

#[test]
#[ignore]
fn toy_inspect() {
    use weightgen::analysis::toy_path_profile;
    use weightgen::data::GaussianMixture;
    use weightgen::hypernet::HyperNetConfig;
    let gm = GaussianMixture::toy_default();
    let hcfg = HyperNetConfig::toy_default();
    let configs: Vec<(f64, f64, f64)> = vec![(10.0, 1e-2, 1e-3), (30.0, 1e-4, 1e-3)];
    for (lambda, l2, lr) in configs {
        for seed in 0..2u64 {
            println!("--- lambda {lambda} l2 {l2:.0e} lr {lr:.0e} seed {seed} ---");
            for steps in [0usize, 10, 30, 100, 300, 1000, 3000] {
                let mut tcfg = TrainConfig { seed, steps, lambda, ..TrainConfig::toy_default() };
                tcfg.adam.learning_rate = lr;
                tcfg.l2_coefficient = l2;
                let out = train(&hcfg, &Task::Toy { gm: &gm }, &tcfg).unwrap();
                let profile = match toy_path_profile(&out.params, &gm, 400) {
                    Ok(p) => p,
                    Err(e) => {
                        println!("  step {steps:>5}: ERR({e})");
                        continue;
                    }
                };
                let per_mode: Vec<f64> = gm
                    .components()
                    .iter()
                    .map(|c| {
                        profile
                            .points
                            .iter()
                            .map(|p| {
                                ((p[0] - c.mean[0]).powi(2) + (p[1] - c.mean[1]).powi(2)).sqrt()
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                let rmax = profile
                    .points
                    .iter()
                    .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
                    .fold(0.0f64, f64::max);
                let rmean = profile
                    .points
                    .iter()
                    .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
                    .sum::<f64>()
                    / profile.points.len() as f64;
                // Eight evenly spaced path points to show the shape.
                let shape: Vec<String> = (0..8)
                    .map(|i| {
                        let p = profile.points[i * 399 / 7];
                        format!("({:+.1},{:+.1})", p[0], p[1])
                    })
                    .collect();
                println!(
                    "  step {steps:>5}: modes [{:.2} {:.2} {:.2} {:.2}] rmax {rmax:.2} rmean {rmean:.2}  {}",
                    per_mode[0], per_mode[1], per_mode[2], per_mode[3],
                    shape.join(" ")
                );
            }
        }
    }
}

#[test]
#[ignore]
fn toy_loopinit_probe() {
    use weightgen::analysis::toy_path_profile;
    use weightgen::data::GaussianMixture;
    use weightgen::hypernet::{build, generate_graph, HyperNetConfig, Mode};
    use weightgen::tensor::Graph;
    use weightgen::trainer::{train_from, Adam};

    let gm = GaussianMixture::toy_default();
    let hcfg = HyperNetConfig::toy_default();
    let fit_pts = 128usize;
    let radius = 2.1f64;
    let zs: Vec<f64> = (0..fit_pts).map(|j| -1.0 + 2.0 * j as f64 / (fit_pts - 1) as f64).collect();
    let mut targets = Vec::with_capacity(fit_pts * 2);
    for &z in &zs {
        let phi = 0.95 * std::f64::consts::PI * z;
        targets.push(radius * phi.cos());
        targets.push(radius * phi.sin());
    }
    let tgt = Tensor::new(vec![fit_pts, 2], targets).unwrap();
    let zt = Tensor::new(vec![fit_pts, 1], zs).unwrap();

    let grid: Vec<(f64, f64)> = vec![(30.0, 1e-3), (10.0, 1e-2), (100.0, 1e-3)];
    for (lambda, l2) in grid {
        let mut passes = 0;
        let mut detail = String::new();
        for seed in 0..5u64 {
            // Supervised pre-fit of the freshly initialized generator to the loop.
            let mut params = build(&hcfg, None, &mut stream(seed, "hypernet-init")).unwrap();
            let fit_cfg = weightgen::trainer::AdamConfig { learning_rate: 1e-2, ..Default::default() };
            let mut adam = Adam::new(fit_cfg);
            for _ in 0..800 {
                let mut g = Graph::new();
                let zn = g.constant(zt.clone());
                let gen = generate_graph(&mut g, zn, &params, Mode::Train).unwrap();
                let tn = g.constant(tgt.clone());
                let diff = g.sub(gen.theta, tn).unwrap();
                let sq = g.mul(diff, diff).unwrap();
                let loss = g.mean(sq);
                g.eval().unwrap();
                let mut grads = g.backward(vec![(loss, Tensor::scalar(1.0))]).unwrap();
                let mut views = params.trainable_mut();
                for (slot, (&leaf, view)) in gen.leaves.iter().zip(views.iter_mut()).enumerate() {
                    let grad = match grads.take(leaf) {
                        Some(gr) => gr,
                        None => Tensor::zeros(view.shape()),
                    };
                    adam.step_inplace(view, &grad, slot).unwrap();
                }
            }
            // Report the fitted loop quality, then train.
            let pre = toy_path_profile(&params, &gm, 400).unwrap();
            let pre_worst = gm
                .components()
                .iter()
                .map(|c| {
                    pre.points
                        .iter()
                        .map(|p| ((p[0] - c.mean[0]).powi(2) + (p[1] - c.mean[1]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let mut tcfg = TrainConfig { seed, steps: 3_000, lambda, ..TrainConfig::toy_default() };
            tcfg.l2_coefficient = l2;
            let out = train_from(params, &Task::Toy { gm: &gm }, &tcfg).unwrap();
            if out.diverged.is_some() {
                detail.push_str(&format!(" [pre {pre_worst:.2} DIV]"));
                continue;
            }
            let profile = match toy_path_profile(&out.params, &gm, 400) {
                Ok(p) => p,
                Err(e) => {
                    detail.push_str(&format!(" [pre {pre_worst:.2} ERR({e})]"));
                    continue;
                }
            };
            let worst = gm
                .components()
                .iter()
                .map(|c| {
                    profile
                        .points
                        .iter()
                        .map(|p| ((p[0] - c.mean[0]).powi(2) + (p[1] - c.mean[1]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let ok = worst < 0.3 && profile.pearson < 0.0;
            if ok {
                passes += 1;
            }
            detail.push_str(&format!(" [pre {pre_worst:.2} → {worst:.2}/{:+.2}]", profile.pearson));
        }
        println!("LOOP-INIT lambda {lambda:>4} l2 {l2:.0e}: {passes}/5 {detail}");
    }
}

#[test]
#[ignore]
fn toy_sweep() {
    use weightgen::analysis::toy_path_profile;
    use weightgen::data::GaussianMixture;
    use weightgen::hypernet::HyperNetConfig;
    let gm = GaussianMixture::toy_default();
    let hcfg = HyperNetConfig::toy_default();
    let grid: Vec<(f64, usize, f64, f64, usize)> = match std::env::var("WG_GRID").as_deref() {
        Ok("a") => vec![(30.0, 3_000, 1e-3, 1e-4, 64), (10.0, 3_000, 1e-3, 1e-2, 64)],
        Ok("b") => vec![
            (100.0, 3_000, 1e-3, 1e-4, 64),
            (100.0, 3_000, 1e-3, 1e-2, 64),
            (300.0, 3_000, 1e-3, 1e-4, 64),
            (300.0, 3_000, 1e-3, 1e-2, 64),
        ],
        Ok("c") => vec![
            (10.0, 3_000, 1e-3, 1e-3, 8),
            (10.0, 3_000, 1e-3, 1e-3, 16),
            (30.0, 3_000, 1e-3, 1e-3, 8),
            (30.0, 3_000, 1e-3, 1e-3, 16),
            (10.0, 3_000, 3e-3, 1e-3, 16),
            (30.0, 3_000, 3e-3, 1e-3, 16),
        ],
        Ok("d") => vec![
            (1e4, 3_000, 1e-3, 1e-4, 64),
            (1e5, 3_000, 1e-3, 1e-4, 64),
            (1e6, 3_000, 1e-3, 1e-4, 64),
        ],
        Ok("f") => vec![
            (30.0, 3_000, 1e-3, 1e-3, 128),
            (30.0, 3_000, 1e-3, 1e-3, 400),
            (100.0, 3_000, 1e-3, 1e-3, 128),
            (100.0, 3_000, 1e-3, 1e-3, 400),
        ],
        Ok("e") => vec![
            (10.0, 3_000, 1e-2, 1e-3, 64),
            (30.0, 3_000, 1e-2, 1e-3, 64),
            (100.0, 3_000, 1e-2, 1e-3, 64),
            (10.0, 3_000, 3e-2, 1e-3, 64),
            (30.0, 3_000, 3e-2, 1e-3, 64),
            (100.0, 3_000, 3e-2, 1e-3, 64),
        ],
        _ => vec![
            (10.0, 30_000, 1e-3, 1e-2, 64),
            (12.0, 30_000, 1e-3, 1e-2, 64),
            (10.0, 10_000, 1e-3, 1e-2, 256),
            (10.0, 30_000, 1e-3, 1e-2, 256),
        ],
    };
    for (lambda, steps, lr, l2, zb) in grid {
        let mut passes = 0;
        let mut detail = String::new();
        for seed in 0..5u64 {
            let mut tcfg = TrainConfig {
                seed,
                steps,
                lambda,
                z_batch: zb,
                ..TrainConfig::toy_default()
            };
            tcfg.adam.learning_rate = lr;
            tcfg.l2_coefficient = l2;
            let out = train(&hcfg, &Task::Toy { gm: &gm }, &tcfg).unwrap();
            if out.diverged.is_some() {
                detail.push_str(" DIV");
                continue;
            }
            let profile = match toy_path_profile(&out.params, &gm, 400) {
                Ok(p) => p,
                Err(e) => {
                    detail.push_str(&format!(" ERR({e})"));
                    continue;
                }
            };
            let worst = gm
                .components()
                .iter()
                .map(|c| {
                    profile
                        .points
                        .iter()
                        .map(|p| ((p[0] - c.mean[0]).powi(2) + (p[1] - c.mean[1]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let ok = worst < 0.3 && profile.pearson < 0.0;
            if ok {
                passes += 1;
            }
            detail.push_str(&format!(" [{:.2}/{:+.2}]", worst, profile.pearson));
        }
        println!("lambda {lambda:>4} l2 {l2:.0e} steps {steps} zb {zb}: {passes}/5 {detail}");
    }
}

#[test]
#[ignore]
fn calibrate_desk() {
    let dir = std::path::PathBuf::from("/root/scratch/deskdata");
    std::fs::create_dir_all(&dir).unwrap();
    let t0 = Instant::now();
    let (train_ds, test_ds) = load_or_synthesize(&dir, 12_000, 2_000, 0).unwrap();
    println!("dataset ready in {:?}", t0.elapsed());

    let cfg = parse_config_str(r#"{"experiment":"mnist"}"#).unwrap();
    let arch = cfg.arch().unwrap();
    let hcfg = cfg.hypernet();
    let task = Task::Classifier { arch, data: &train_ds };

    // Stage A: short probe for trajectory signal.
    let probe_cfg =
        TrainConfig { z_batch: 16, images_per_z: 32, steps: 600, seed: 0, ..TrainConfig::default() };
    let t0 = Instant::now();
    let out = train(hcfg, &task, &probe_cfg).unwrap();
    println!("probe 600 steps in {:?}, diverged={:?}", t0.elapsed(), out.diverged);
    for r in out.log.records.iter().step_by(100) {
        println!(
            "  step {:4}: acc_loss {:.4}, diversity {:.2}, total {:.2}",
            r.step, r.acc_loss, r.diversity, r.total
        );
    }
    let z = sample_z(16, hcfg, &mut stream(0, "desk-sample")).unwrap();
    let thetas = generate(&z, &out.params).unwrap();
    let accs: Vec<f64> = thetas
        .iter()
        .map(|w| dataset_accuracy(w, arch, &test_ds, 256).unwrap())
        .collect();
    let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
    println!("probe mean acc over 16 samples: {:.4} (min {:.4}, max {:.4})",
        mean,
        accs.iter().cloned().fold(f64::INFINITY, f64::min),
        accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));

    // Stage B: exact acceptance protocol.
    let tcfg = TrainConfig {
        z_batch: 16,
        images_per_z: 32,
        steps: 4_000,
        seed: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(hcfg, &task, &tcfg).unwrap();
    println!("full 4000 steps in {:?}, diverged={:?}", t0.elapsed(), out.diverged);
    for r in out.log.records.iter().step_by(500) {
        println!(
            "  step {:4}: acc_loss {:.4}, diversity {:.2}, total {:.2}",
            r.step, r.acc_loss, r.diversity, r.total
        );
    }

    // Criterion 6 numbers.
    let t0 = Instant::now();
    let z = sample_z(100, hcfg, &mut stream(0, "desk-sample")).unwrap();
    let thetas = generate(&z, &out.params).unwrap();
    let zd = hcfg.z_dim();
    let zs: Vec<Tensor> = (0..100)
        .map(|i| Tensor::new(vec![zd], z.data()[i * zd..(i + 1) * zd].to_vec()).unwrap())
        .collect();
    let bank = WeightBank::new(zs, thetas, arch_hash(arch), false, 0).unwrap();
    let report = ensemble_report(&bank, arch, &test_ds, 256).unwrap();
    let first50 = &report.member_accuracies[..50];
    let mean50: f64 = first50.iter().sum::<f64>() / 50.0;
    let var50: f64 = first50.iter().map(|a| (a - mean50).powi(2)).sum::<f64>() / 50.0;
    let mean100: f64 = report.member_accuracies.iter().sum::<f64>() / 100.0;
    println!(
        "crit6 ({:?}): mean50 {:.4}, var50 {:.3e}, mean100 {:.4}, majority100 {:.4}, mean-rule {:.4}",
        t0.elapsed(), mean50, var50, mean100, report.majority_accuracy, report.mean_accuracy
    );

    // Criterion 7 numbers: 10 pairs, 8 points, full test set.
    let t0 = Instant::now();
    let mut rng = stream(0, "desk-paths");
    let mut dmins = Vec::new();
    let mut imins = Vec::new();
    for _ in 0..10 {
        let ends = sample_z(2, hcfg, &mut rng).unwrap();
        let z1 = Tensor::new(vec![zd], ends.data()[..zd].to_vec()).unwrap();
        let z2 = Tensor::new(vec![zd], ends.data()[zd..].to_vec()).unwrap();
        let d = path_eval(
            &out.params, arch, &test_ds,
            &PathSpec { z1: z1.clone(), z2: z2.clone(), k: 8, kind: PathKind::Direct }, 256,
        ).unwrap();
        let i = path_eval(
            &out.params, arch, &test_ds,
            &PathSpec { z1, z2, k: 8, kind: PathKind::Interpolated }, 256,
        ).unwrap();
        dmins.push(d.accuracies.iter().cloned().fold(f64::INFINITY, f64::min));
        imins.push(i.accuracies.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    let dm: f64 = dmins.iter().sum::<f64>() / 10.0;
    let im: f64 = imins.iter().sum::<f64>() / 10.0;
    println!("crit7 ({:?}): mean min direct {:.4}, mean min interpolated {:.4}", t0.elapsed(), dm, im);

    // Criterion 8 numbers.
    let t0 = Instant::now();
    let acfg = weightgen::analysis::AdversarialConfig::default();
    let rep = adversarial_transfer_experiment(&out.params, arch, &test_ds, &acfg, 0).unwrap();
    println!("crit8 ({:?}):", t0.elapsed());
    for i in 0..rep.epsilons.len() {
        println!("  eps {:.2}: single {:.3}, ensemble {:.3}", rep.epsilons[i], rep.single_success[i], rep.ensemble_success[i]);
    }

    // Criterion 9 numbers.
    let t0 = Instant::now();
    let dw = distill(&bank);
    let dacc = dataset_accuracy(&dw, arch, &test_ds, 256).unwrap();
    println!("crit9 ({:?}): distilled {:.4} vs mean single {:.4}", t0.elapsed(), dacc, mean100);
}

#[test]
#[ignore]
fn bench_desk_step() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let (train_ds, _) = load_or_synthesize(dir.path(), 2000, 200, 0).unwrap();
    println!("synthesize 2200 images: {:?}", t0.elapsed());

    let cfg = parse_config_str(r#"{"experiment":"mnist"}"#).unwrap();
    assert_eq!(cfg.experiment, ExperimentKind::Mnist);
    let arch = cfg.arch().unwrap();
    let task = Task::Classifier { arch, data: &train_ds };

    for (zb, ipz) in [(32usize, 32usize), (16, 16), (16, 32)] {
        let tcfg = TrainConfig {
            z_batch: zb,
            images_per_z: ipz,
            steps: 2,
            seed: 0,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train(cfg.hypernet(), &task, &tcfg).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "z_batch={zb} images_per_z={ipz}: {:.2} s/step (2 steps in {:.2} s), diverged={:?}",
            dt / 2.0,
            dt,
            out.diverged
        );
    }
}

#[test]
#[ignore]
fn loop_construct_check() {
    use weightgen::analysis::toy_path_profile;
    use weightgen::data::GaussianMixture;
    use weightgen::hypernet::{build, init_spanning_loop, HyperNetConfig};
    let gm = GaussianMixture::toy_default();
    let hcfg = HyperNetConfig::toy_default();
    for seed in 0..5u64 {
        let mut params = build(&hcfg, None, &mut stream(seed, "hypernet-init")).unwrap();
        let mut rng = stream(seed, "loop");
        let ok = init_spanning_loop(&mut params, 2.1213, &mut rng);
        let prof = toy_path_profile(&params, &gm, 400).unwrap();
        let mut worst: f64 = 0.0;
        for c in gm.components() {
            let d = prof
                .points
                .iter()
                .map(|p| ((p[0] - c.mean[0]).powi(2) + (p[1] - c.mean[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(d);
        }
        let rmax = prof
            .points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .fold(0.0f64, f64::max);
        println!(
            "seed {seed}: ok={ok} worst-mode-dist {worst:.3} rmax {rmax:.3} p0 {:?} p_mid {:?} p_end {:?}",
            prof.points[0], prof.points[200], prof.points[399]
        );
    }
}

#[test]
#[ignore]
fn desk_diagnose() {
    use std::path::Path;
    use weightgen::target::{init_weights, train_target_direct, DirectTrainConfig};
    let (train_ds, test_ds) =
        load_or_synthesize(Path::new("/root/scratch/deskdata"), 2000, 200, 0).unwrap();
    let cfg = parse_config_str(r#"{"experiment":"mnist"}"#).unwrap();
    let arch = cfg.arch().unwrap();

    // 1. direct baseline learnability
    let dcfg = DirectTrainConfig { steps: 600, batch_size: 32, learning_rate: 1e-3 };
    let t0 = Instant::now();
    let (w, log) = train_target_direct(&arch, &train_ds, &dcfg, &mut stream(7, "direct")).unwrap();
    let acc = dataset_accuracy(&w, &arch, &test_ds, 200).unwrap();
    println!(
        "direct 600 steps in {:.0?}: test acc {acc:.4}, loss {:.3} -> {:.3}",
        t0.elapsed(),
        log[0],
        log[log.len() - 1]
    );

    // 2. hypernet generated-weight scale at init vs direct init scale
    let params = weightgen::hypernet::build(cfg.hypernet(), Some(&arch), &mut stream(0, "hypernet-init")).unwrap();
    let z = sample_z(4, cfg.hypernet(), &mut stream(1, "z")).unwrap();
    let thetas = generate(&z, &params).unwrap();
    let reference = init_weights(&arch, &mut stream(2, "ref")).unwrap();
    let gen_std: f64 = {
        let d = thetas[0].flat.data();
        let m: f64 = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64).sqrt()
    };
    let ref_std: f64 = {
        let d = reference.flat.data();
        let m: f64 = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64).sqrt()
    };
    println!("generated std {gen_std:.4} vs direct-init std {ref_std:.4}");
    for (i, row) in thetas.iter().enumerate().take(2) {
        let a = dataset_accuracy(row, &arch, &test_ds, 200).unwrap();
        println!("  init sample {i}: acc {a:.4}");
    }
}

#[test]
#[ignore]
fn desk_lambda_probe() {
    use std::path::Path;
    let (train_ds, test_ds) =
        load_or_synthesize(Path::new("/root/scratch/deskdata"), 2000, 200, 0).unwrap();
    let cfg = parse_config_str(r#"{"experiment":"mnist"}"#).unwrap();
    let arch = cfg.arch().unwrap();
    let task = Task::Classifier { arch, data: &train_ds };
    let lambda: f64 = std::env::var("WG_LAMBDA").ok().and_then(|v| v.parse().ok()).unwrap_or(1e7);
    let steps: usize = std::env::var("WG_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(200);
    let lr: f64 = std::env::var("WG_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4);
    let zb: usize = std::env::var("WG_ZB").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let ipz: usize = std::env::var("WG_IPZ").ok().and_then(|v| v.parse().ok()).unwrap_or(16);
    let tcfg = TrainConfig {
        z_batch: zb,
        images_per_z: ipz,
        lambda,
        steps,
        seed: 0,
        adam: weightgen::trainer::AdamConfig { learning_rate: lr, ..Default::default() },
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(cfg.hypernet(), &task, &tcfg).unwrap();
    println!("lambda {lambda:.0e} {steps} steps in {:.0?}, diverged={:?}", t0.elapsed(), out.diverged);
    for r in out.log.records.iter().step_by(25) {
        println!("  step {:4}: acc_loss {:.4} diversity {:.2}", r.step, r.acc_loss, r.diversity);
    }
    let last = out.log.records.last().unwrap();
    println!("  last: acc_loss {:.4} diversity {:.2}", last.acc_loss, last.diversity);
    let z = sample_z(4, cfg.hypernet(), &mut stream(99, "zz")).unwrap();
    let thetas = generate(&z, &out.params).unwrap();
    for (i, row) in thetas.iter().enumerate() {
        let a = dataset_accuracy(row, &arch, &test_ds, 200).unwrap();
        println!("  final sample {i}: acc {a:.4}");
    }
}

#[test]
#[ignore]
fn desk_stuck_state() {
    use std::path::Path;
    use weightgen::target::forward;
    let (train_ds, test_ds) =
        load_or_synthesize(Path::new("/root/scratch/deskdata"), 2000, 200, 0).unwrap();
    let cfg = parse_config_str(r#"{"experiment":"mnist"}"#).unwrap();
    let arch = cfg.arch().unwrap();
    let task = Task::Classifier { arch, data: &train_ds };
    let steps: usize = std::env::var("WG_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(150);
    let lr: f64 = std::env::var("WG_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let tcfg = TrainConfig {
        z_batch: 16,
        images_per_z: 32,
        lambda: 1e3,
        steps,
        seed: 0,
        adam: weightgen::trainer::AdamConfig { learning_rate: lr, ..Default::default() },
        ..TrainConfig::default()
    };
    let out = train(cfg.hypernet(), &task, &tcfg).unwrap();
    let layout = arch.layout().unwrap();
    let z = sample_z(8, cfg.hypernet(), &mut stream(99, "zz")).unwrap();
    let thetas = generate(&z, &out.params).unwrap();
    let n = thetas[0].flat.numel();
    // per-layer std across samples and weight positions
    for (l, ll) in layout.layers.iter().enumerate() {
        let mut vals = Vec::new();
        for t in &thetas {
            let d = t.flat.data();
            for f in 0..ll.filters {
                let s = ll.offset + f * ll.block;
                vals.extend_from_slice(&d[s..s + ll.block - 1]);
            }
        }
        let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
        let want = (2.0 / ((ll.block - 1 + ll.filters) as f64)).sqrt();
        println!("layer {l}: std {sd:.5} (want {want:.5}) mean {m:+.5}");
    }
    // gamma values of each generator's last BN
    for (gi, net) in out.params.nets.iter().enumerate() {
        if let Some(bn) = &net.bn {
            let g = &bn[bn.len() - 1].gamma;
            let d = g.data();
            let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean_abs: f64 = d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;
            println!("net {gi} last-BN gamma: [{lo:+.4}, {hi:+.4}] mean|gamma| {mean_abs:.4}");
        }
    }
    // logits on a test batch for sample 0
    let idx: Vec<usize> = (0..32).collect();
    let (x, _) = test_ds.batch(&idx);
    let logp = forward(&x, &thetas[0], &arch).unwrap();
    let d = logp.data();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("log-probs range [{lo:.4}, {hi:.4}] (uniform would be {:.4})", (1.0f64/10.0).ln());
    let _ = n;
}
