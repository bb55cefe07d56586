//! `weightgen` — reproducible hypernetwork experiments from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime/numeric.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use weightgen::analysis::{
    adversarial_transfer_experiment, bank_matrix, bin_accuracies, distill, ensemble_report,
    export_filter_images, path_eval, pca_scatter, toy_path_profile, PathKind, PathSpec,
};
use weightgen::bank::{arch_hash, load_bank, phi_hash, save_bank, toy_hash, WeightBank};
use weightgen::config::{parse_config, ExperimentConfig, ExperimentKind};
use weightgen::data::{load_or_synthesize, Dataset, GaussianMixture};
use weightgen::hypernet::{build, generate, sample_z, HyperNetParams};
use weightgen::report::{fmt_f64, svg_line_chart, svg_scatter, write_atomic, write_pgm, Csv};
use weightgen::rng::stream;
use weightgen::target::{dataset_accuracy, train_target_direct, DirectTrainConfig, WeightVector};
use weightgen::tensor::Tensor;
use weightgen::trainer::{train, Task};
use weightgen::{Error, Result};

#[derive(Parser)]
#[command(
    name = "weightgen",
    version,
    about = "Train a generator of neural-network weights and analyze its samples"
)]
struct Cli {
    /// Experiment configuration file (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configuration's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Weight-bank file read or written by the subcommand
    /// (default: <out>/samples.bank).
    #[arg(long, global = true, value_name = "PATH")]
    bank: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the generator; writes phi.bank and train_log.csv.
    Train,
    /// Draw a weight bank from the trained generator.
    Sample {
        /// Members to draw (default: analysis.sample_count).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Per-member accuracies, histogram, and ensemble rules on a bank.
    Eval,
    /// Accuracy along direct vs interpolated weight-space paths.
    Paths,
    /// Principal components of a bank's weight vectors.
    Pca {
        /// Components to extract (default: analysis.pca_components).
        #[arg(long)]
        components: Option<usize>,
    },
    /// Targeted FGSM sweep: generating model vs a fresh ensemble.
    Adversarial,
    /// Average a bank into a single weight vector and evaluate it.
    Distill,
    /// Density / nearest-neighbor profile of the toy generator.
    ToyProfile,
    /// Image grid of one conv filter slice across bank members.
    Filters {
        /// Target layer (default: analysis.filter_layer).
        #[arg(long)]
        layer: Option<usize>,
        /// Filter index within the layer (default: analysis.filter_index).
        #[arg(long)]
        index: Option<usize>,
        /// Members to show (default: analysis.filter_count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the target network directly as a comparison point.
    Baseline,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    if cli.config.is_none() {
        eprintln!("error: a configuration file is required (--config <PATH>)");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    bank_path: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Ctx> {
        let path = cli.config.as_ref().expect("checked in main");
        let mut cfg = parse_config(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read {path}: {source}")),
            other => other,
        })?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        std::fs::create_dir_all(&out).map_err(Error::io(out.display().to_string()))?;
        let bank_path = cli.bank.clone().unwrap_or_else(|| out.join("samples.bank"));
        Ok(Ctx { cfg, out, bank_path })
    }

    fn phi_path(&self) -> PathBuf {
        self.out.join("phi.bank")
    }

    /// The classifier experiment's datasets; synthesized into `data.dir` on
    /// first use and loaded from there afterwards.
    fn classifier_data(&self) -> Result<(Dataset, Dataset)> {
        load_or_synthesize(
            &self.cfg.data.dir,
            self.cfg.data.train_count,
            self.cfg.data.test_count,
            self.cfg.seed,
        )
    }

    fn require_mnist(&self, what: &str) -> Result<()> {
        if self.cfg.experiment != ExperimentKind::Mnist {
            return Err(Error::Config(format!("`{what}` needs the classifier experiment")));
        }
        Ok(())
    }

    fn require_toy(&self, what: &str) -> Result<()> {
        if self.cfg.experiment != ExperimentKind::Toy {
            return Err(Error::Config(format!("`{what}` needs the toy experiment")));
        }
        Ok(())
    }

    fn save_phi(&self, params: &HyperNetParams) -> Result<()> {
        let flat = params.flatten();
        let bank = WeightBank::new(
            vec![Tensor::new(vec![0], vec![])?],
            vec![WeightVector::new(flat)],
            phi_hash(&self.cfg.phi_descriptor()),
            false,
            self.cfg.seed,
        )?;
        save_bank(&self.phi_path(), &bank)
    }

    fn load_phi(&self) -> Result<HyperNetParams> {
        let path = self.phi_path();
        let bank = load_bank(&path)?;
        let want = phi_hash(&self.cfg.phi_descriptor());
        if bank.arch_hash != want {
            return Err(Error::Bank(format!(
                "{} was trained under a different configuration",
                path.display()
            )));
        }
        let arch = match self.cfg.experiment {
            ExperimentKind::Mnist => Some(self.cfg.arch()?),
            ExperimentKind::Toy => None,
        };
        let mut params = build(self.cfg.hypernet(), arch, &mut stream(0, "phi-shape"))?;
        params.load_flat(&bank.member(0).1.flat)?;
        Ok(params)
    }

    fn load_samples(&self) -> Result<WeightBank> {
        load_bank(&self.bank_path)
    }

    fn experiment_hash(&self) -> Result<u64> {
        Ok(match self.cfg.experiment {
            ExperimentKind::Mnist => arch_hash(self.cfg.arch()?),
            ExperimentKind::Toy => toy_hash(2),
        })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, bytes)?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    match cli.cmd {
        Cmd::Train => cmd_train(&ctx),
        Cmd::Sample { n } => cmd_sample(&ctx, n),
        Cmd::Eval => cmd_eval(&ctx),
        Cmd::Paths => cmd_paths(&ctx),
        Cmd::Pca { components } => cmd_pca(&ctx, components),
        Cmd::Adversarial => cmd_adversarial(&ctx),
        Cmd::Distill => cmd_distill(&ctx),
        Cmd::ToyProfile => cmd_toy_profile(&ctx),
        Cmd::Filters { layer, index, count } => cmd_filters(&ctx, layer, index, count),
        Cmd::Baseline => cmd_baseline(&ctx),
    }
}

// ---------------------------------------------------------------------------
// train / baseline
// ---------------------------------------------------------------------------

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let mut tcfg = ctx.cfg.train().clone();
    tcfg.seed = ctx.cfg.seed;
    let gm = GaussianMixture::toy_default();
    let outcome = match ctx.cfg.experiment {
        ExperimentKind::Toy => train(ctx.cfg.hypernet(), &Task::Toy { gm: &gm }, &tcfg)?,
        ExperimentKind::Mnist => {
            let (train_ds, _) = ctx.classifier_data()?;
            let arch = ctx.cfg.arch()?;
            train(ctx.cfg.hypernet(), &Task::Classifier { arch, data: &train_ds }, &tcfg)?
        }
    };
    ctx.write("train_log.csv", outcome.log.to_csv().as_bytes())?;
    ctx.save_phi(&outcome.params)?;
    println!("wrote {}", ctx.phi_path().display());
    if let Some(r) = outcome.log.records.last() {
        println!(
            "step {}: accuracy term {}, diversity term {}, total {}",
            r.step,
            fmt_f64(r.acc_loss),
            fmt_f64(r.diversity),
            fmt_f64(r.total)
        );
    }
    if let Some((step, detail)) = outcome.diverged {
        return Err(Error::Diverged { step, detail });
    }
    Ok(())
}

fn cmd_baseline(ctx: &Ctx) -> Result<()> {
    ctx.require_mnist("baseline")?;
    let arch = ctx.cfg.arch()?;
    let (train_ds, test_ds) = ctx.classifier_data()?;
    let dcfg = DirectTrainConfig::default();
    let mut rng = stream(ctx.cfg.seed, "baseline");
    let (w, losses) = train_target_direct(arch, &train_ds, &dcfg, &mut rng)?;

    let mut csv = Csv::new(&["step", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        csv.row(&[i.to_string(), fmt_f64(*l)]);
    }
    ctx.write("baseline_log.csv", csv.to_string().as_bytes())?;

    let bank = WeightBank::new(
        vec![Tensor::new(vec![0], vec![])?],
        vec![w.clone()],
        arch_hash(arch),
        false,
        ctx.cfg.seed,
    )?;
    let path = ctx.out.join("baseline.bank");
    save_bank(&path, &bank)?;
    println!("wrote {}", path.display());

    let chunk = ctx.cfg.analysis.eval_chunk;
    let train_acc = dataset_accuracy(&w, arch, &train_ds, chunk)?;
    let test_acc = dataset_accuracy(&w, arch, &test_ds, chunk)?;
    let mut csv = Csv::new(&["metric", "value"]);
    csv.row(&["train_accuracy".into(), fmt_f64(train_acc)]);
    csv.row(&["test_accuracy".into(), fmt_f64(test_acc)]);
    ctx.write("baseline.csv", csv.to_string().as_bytes())?;
    println!("baseline accuracy: train {}, test {}", fmt_f64(train_acc), fmt_f64(test_acc));
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

fn cmd_sample(ctx: &Ctx, n: Option<usize>) -> Result<()> {
    let params = ctx.load_phi()?;
    let n = n.unwrap_or(ctx.cfg.analysis.sample_count);
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample an empty bank".into()));
    }
    let hcfg = ctx.cfg.hypernet();
    let z = sample_z(n, hcfg, &mut stream(ctx.cfg.seed, "sample-z"))?;
    let thetas = generate(&z, &params)?;
    let zd = hcfg.z_dim();
    let zs: Vec<Tensor> = (0..n)
        .map(|i| Tensor::new(vec![zd], z.data()[i * zd..(i + 1) * zd].to_vec()))
        .collect::<Result<_>>()?;
    let bank = WeightBank::new(zs, thetas, ctx.experiment_hash()?, false, ctx.cfg.seed)?;
    save_bank(&ctx.bank_path, &bank)?;
    println!("wrote {} ({} members)", ctx.bank_path.display(), n);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / distill
// ---------------------------------------------------------------------------

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    ctx.require_mnist("eval")?;
    let arch = ctx.cfg.arch()?;
    let (_, test_ds) = ctx.classifier_data()?;
    let bank = ctx.load_samples()?;
    let report = ensemble_report(&bank, arch, &test_ds, ctx.cfg.analysis.eval_chunk)?;

    let mut csv = Csv::new(&["member", "accuracy"]);
    for (i, a) in report.member_accuracies.iter().enumerate() {
        csv.row(&[i.to_string(), fmt_f64(*a)]);
    }
    ctx.write("member_accuracies.csv", csv.to_string().as_bytes())?;

    let hist = bin_accuracies(&report.member_accuracies, ctx.cfg.analysis.histogram_bins)?;
    let mut csv = Csv::new(&["bin_lo", "bin_hi", "count"]);
    for (i, c) in hist.counts.iter().enumerate() {
        csv.row(&[fmt_f64(hist.edges[i]), fmt_f64(hist.edges[i + 1]), c.to_string()]);
    }
    ctx.write("histogram.csv", csv.to_string().as_bytes())?;

    let n = report.member_accuracies.len() as f64;
    let mean_member = report.member_accuracies.iter().sum::<f64>() / n;
    let mut csv = Csv::new(&["rule", "accuracy"]);
    csv.row(&["mean".into(), fmt_f64(report.mean_accuracy)]);
    csv.row(&["majority".into(), fmt_f64(report.majority_accuracy)]);
    csv.row(&["mean_single_member".into(), fmt_f64(mean_member)]);
    ctx.write("ensemble.csv", csv.to_string().as_bytes())?;
    println!(
        "ensemble of {}: mean rule {}, majority rule {}, mean single member {}",
        report.member_accuracies.len(),
        fmt_f64(report.mean_accuracy),
        fmt_f64(report.majority_accuracy),
        fmt_f64(mean_member)
    );
    Ok(())
}

fn cmd_distill(ctx: &Ctx) -> Result<()> {
    ctx.require_mnist("distill")?;
    let arch = ctx.cfg.arch()?;
    let (_, test_ds) = ctx.classifier_data()?;
    let bank = ctx.load_samples()?;
    weightgen::bank::check_arch(&bank, arch)?;
    let chunk = ctx.cfg.analysis.eval_chunk;

    let distilled = distill(&bank);
    let acc = dataset_accuracy(&distilled, arch, &test_ds, chunk)?;
    let report = ensemble_report(&bank, arch, &test_ds, chunk)?;
    let mean_member =
        report.member_accuracies.iter().sum::<f64>() / report.member_accuracies.len() as f64;

    let out_bank = WeightBank::new(
        vec![Tensor::new(vec![0], vec![])?],
        vec![distilled],
        arch_hash(arch),
        false,
        ctx.cfg.seed,
    )?;
    let path = ctx.out.join("distilled.bank");
    save_bank(&path, &out_bank)?;
    println!("wrote {}", path.display());

    let mut csv = Csv::new(&["metric", "value"]);
    csv.row(&["distilled_accuracy".into(), fmt_f64(acc)]);
    csv.row(&["mean_member_accuracy".into(), fmt_f64(mean_member)]);
    csv.row(&["bank_size".into(), bank.len().to_string()]);
    ctx.write("distill.csv", csv.to_string().as_bytes())?;
    println!("distilled accuracy {} vs mean member {}", fmt_f64(acc), fmt_f64(mean_member));
    Ok(())
}

// ---------------------------------------------------------------------------
// paths
// ---------------------------------------------------------------------------

fn cmd_paths(ctx: &Ctx) -> Result<()> {
    ctx.require_mnist("paths")?;
    let arch = ctx.cfg.arch()?;
    let (_, test_ds) = ctx.classifier_data()?;
    let params = ctx.load_phi()?;
    let hcfg = ctx.cfg.hypernet();
    let zd = hcfg.z_dim();
    let k = ctx.cfg.analysis.path_points;
    let mut rng = stream(ctx.cfg.seed, "path-z");

    let mut csv = Csv::new(&["pair", "t", "direct_accuracy", "interpolated_accuracy"]);
    let mut min_gaps = Vec::new();
    for pair in 0..ctx.cfg.analysis.path_pairs {
        let ends = sample_z(2, hcfg, &mut rng)?;
        let z1 = Tensor::new(vec![zd], ends.data()[..zd].to_vec())?;
        let z2 = Tensor::new(vec![zd], ends.data()[zd..].to_vec())?;
        let direct = path_eval(
            &params,
            arch,
            &test_ds,
            &PathSpec { z1: z1.clone(), z2: z2.clone(), k, kind: PathKind::Direct },
            ctx.cfg.analysis.eval_chunk,
        )?;
        let interp = path_eval(
            &params,
            arch,
            &test_ds,
            &PathSpec { z1, z2, k, kind: PathKind::Interpolated },
            ctx.cfg.analysis.eval_chunk,
        )?;
        for j in 0..k {
            csv.row(&[
                pair.to_string(),
                fmt_f64(direct.ts[j]),
                fmt_f64(direct.accuracies[j]),
                fmt_f64(interp.accuracies[j]),
            ]);
        }
        let dmin = direct.accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
        let imin = interp.accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
        min_gaps.push(imin - dmin);
    }
    ctx.write("paths.csv", csv.to_string().as_bytes())?;

    let mean_gap = min_gaps.iter().sum::<f64>() / min_gaps.len() as f64;
    let mut csv = Csv::new(&["metric", "value"]);
    csv.row(&["mean_min_gap_interpolated_minus_direct".into(), fmt_f64(mean_gap)]);
    ctx.write("paths_summary.csv", csv.to_string().as_bytes())?;
    println!("mean (min along interpolated − min along direct) = {}", fmt_f64(mean_gap));
    Ok(())
}

// ---------------------------------------------------------------------------
// pca
// ---------------------------------------------------------------------------

fn cmd_pca(ctx: &Ctx, components: Option<usize>) -> Result<()> {
    let bank = ctx.load_samples()?;
    if bank.arch_hash != ctx.experiment_hash()? {
        return Err(Error::Bank("bank does not belong to this experiment".into()));
    }
    let k = components.unwrap_or(ctx.cfg.analysis.pca_components);
    let pca = pca_scatter(&bank_matrix(&bank), k)?;

    let mut csv = Csv::new(&["component", "eigenvalue"]);
    for (i, ev) in pca.eigenvalues.iter().enumerate() {
        csv.row(&[(i + 1).to_string(), fmt_f64(*ev)]);
    }
    ctx.write("pca_eigenvalues.csv", csv.to_string().as_bytes())?;

    let header: Vec<String> = std::iter::once("member".to_string())
        .chain((1..=k).map(|c| format!("c{c}")))
        .collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::new(&header_refs);
    let p = pca.projections.data();
    for i in 0..bank.len() {
        let mut row = vec![i.to_string()];
        row.extend((0..k).map(|c| fmt_f64(p[i * k + c])));
        csv.row(&row);
    }
    ctx.write("pca_projections.csv", csv.to_string().as_bytes())?;

    if k >= 2 {
        let pts: Vec<(f64, f64)> = (0..bank.len()).map(|i| (p[i * k], p[i * k + 1])).collect();
        let svg = svg_scatter(
            "weights in PCA space",
            "component 1",
            "component 2",
            &[("samples".to_string(), pts)],
        );
        ctx.write("pca_scatter.svg", svg.as_bytes())?;
    }
    println!(
        "top {k} eigenvalues: {}",
        pca.eigenvalues.iter().map(|e| fmt_f64(*e)).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// adversarial
// ---------------------------------------------------------------------------

fn cmd_adversarial(ctx: &Ctx) -> Result<()> {
    ctx.require_mnist("adversarial")?;
    let arch = ctx.cfg.arch()?;
    let (_, test_ds) = ctx.classifier_data()?;
    let params = ctx.load_phi()?;
    let report = adversarial_transfer_experiment(
        &params,
        arch,
        &test_ds,
        &ctx.cfg.analysis.adversarial,
        ctx.cfg.seed,
    )?;

    let mut csv = Csv::new(&["epsilon", "single_success", "ensemble_success"]);
    for i in 0..report.epsilons.len() {
        csv.row(&[
            fmt_f64(report.epsilons[i]),
            fmt_f64(report.single_success[i]),
            fmt_f64(report.ensemble_success[i]),
        ]);
    }
    ctx.write("adversarial.csv", csv.to_string().as_bytes())?;

    let single: Vec<(f64, f64)> =
        report.epsilons.iter().cloned().zip(report.single_success.iter().cloned()).collect();
    let ens: Vec<(f64, f64)> =
        report.epsilons.iter().cloned().zip(report.ensemble_success.iter().cloned()).collect();
    let svg = svg_line_chart(
        "targeted attack success",
        "epsilon",
        "success rate",
        &[("single model".to_string(), single), ("ensemble".to_string(), ens)],
    );
    ctx.write("adversarial.svg", svg.as_bytes())?;
    println!(
        "attack success over {} trials (ensemble of {}): single {:.3} → {:.3}, ensemble {:.3} → {:.3}",
        report.trials,
        report.ensemble_size,
        report.single_success.first().copied().unwrap_or(0.0),
        report.single_success.last().copied().unwrap_or(0.0),
        report.ensemble_success.first().copied().unwrap_or(0.0),
        report.ensemble_success.last().copied().unwrap_or(0.0),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// toy profile
// ---------------------------------------------------------------------------

fn cmd_toy_profile(ctx: &Ctx) -> Result<()> {
    ctx.require_toy("toy-profile")?;
    let params = ctx.load_phi()?;
    let gm = GaussianMixture::toy_default();
    let profile = toy_path_profile(&params, &gm, ctx.cfg.analysis.toy_profile_points)?;

    let mut csv = Csv::new(&["z", "x", "y", "density", "nn_dist"]);
    for i in 0..profile.zs.len() {
        csv.row(&[
            fmt_f64(profile.zs[i]),
            fmt_f64(profile.points[i][0]),
            fmt_f64(profile.points[i][1]),
            fmt_f64(profile.density[i]),
            fmt_f64(profile.nn_dist[i]),
        ]);
    }
    ctx.write("toy_profile.csv", csv.to_string().as_bytes())?;

    let mut csv = Csv::new(&["metric", "value"]);
    csv.row(&["pearson_density_nn_dist".into(), fmt_f64(profile.pearson)]);
    ctx.write("toy_summary.csv", csv.to_string().as_bytes())?;

    let density: Vec<(f64, f64)> =
        profile.zs.iter().cloned().zip(profile.density.iter().cloned()).collect();
    let nn: Vec<(f64, f64)> =
        profile.zs.iter().cloned().zip(profile.nn_dist.iter().cloned()).collect();
    let svg = svg_line_chart(
        "mixture density and nearest-neighbor distance along z",
        "z",
        "value",
        &[("density".to_string(), density), ("nn distance".to_string(), nn)],
    );
    ctx.write("toy_profile.svg", svg.as_bytes())?;
    println!("pearson(density, nn distance) = {}", fmt_f64(profile.pearson));
    Ok(())
}

// ---------------------------------------------------------------------------
// filters
// ---------------------------------------------------------------------------

fn cmd_filters(
    ctx: &Ctx,
    layer: Option<usize>,
    index: Option<usize>,
    count: Option<usize>,
) -> Result<()> {
    ctx.require_mnist("filters")?;
    let arch = ctx.cfg.arch()?;
    let bank = ctx.load_samples()?;
    let layer = layer.unwrap_or(ctx.cfg.analysis.filter_layer);
    let index = index.unwrap_or(ctx.cfg.analysis.filter_index);
    let count = count.unwrap_or(ctx.cfg.analysis.filter_count).min(bank.len());
    let grid = export_filter_images(&bank, arch, layer, index, count)?;
    let path = ctx.out.join("filters.pgm");
    write_pgm(&path, grid.width, grid.height, &grid.pixels)?;
    println!(
        "wrote {} ({} tiles on a {}×{} grid)",
        path.display(),
        grid.tiles,
        grid.side,
        grid.side
    );
    Ok(())
}
