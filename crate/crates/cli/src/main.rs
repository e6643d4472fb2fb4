use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use segcnn::bench::{bench_conv_sweep, check_ushape, BenchRecord, SweepConfig};
use segcnn::data::{
    generate, load_dataset, prepool, read_volume, write_dataset, write_volume, Dataset, GeneratorConfig, Manifest,
    PoolStrategy, MANIFEST_FILE, RAW_SHAPE,
};
use segcnn::model::{load_weights, ArchitectureSpec};
use segcnn::segmentation::{make_plan, orient_regions, overlap_score, segment, OrientMode};
use segcnn::tensor::Tensor;
use segcnn::training::{
    evaluate, input_plan, sweep_hidden_units, sweep_k, sweep_train_size, train, write_runs_csv, Summary, TrainConfig,
};

#[derive(Parser)]
#[command(name = "segcnn", version, about = "Segmented volumetric CNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (a file for commands that write one volume)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long, default_value_t = 1, value_parser = positive)]
    threads: usize,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args, Clone)]
struct ArchArgs {
    /// baseline, proposed, seg-only or reverse-only
    #[arg(long, default_value = "proposed")]
    arch: String,
    /// Filters of the four blocks, overriding the preset, e.g. 64,32,16,8
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<usize>>,
    /// Segmentation rate, overriding the preset
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Boundary voxels added to each region
    #[arg(long, default_value_t = 3)]
    boundary: usize,
}

impl ArchArgs {
    fn spec(&self, shape: [usize; 3]) -> Result<ArchitectureSpec, CliError> {
        let mut spec = ArchitectureSpec::preset(&self.arch, shape)?;
        if let Some(f) = &self.filters {
            spec.block_filters = f
                .as_slice()
                .try_into()
                .map_err(|_| CliError::Usage(format!("--filters needs 4 values, got {}", f.len())))?;
        }
        if let Some(k) = self.k {
            spec.k = k;
        }
        spec.hidden_units = self.hidden;
        spec.boundary = self.boundary;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Dataset manifest, or the directory holding manifest.csv
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 700)]
    epochs: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    batch_size: usize,
    /// Number of seeds, counting up from --seed
    #[arg(long, default_value_t = 5, value_parser = positive)]
    seeds: usize,
    /// Stop after this many epochs without validation improvement
    #[arg(long)]
    patience: Option<usize>,
    /// native, min_overlap or max_overlap
    #[arg(long, default_value = "native")]
    orient: String,
    /// Train on a seeded subsample of this many subjects
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
}

impl TrainArgs {
    fn load(&self, common: &Common) -> Result<(TrainConfig, Dataset), CliError> {
        let ds = load_dataset(&manifest_path(&self.data))?;
        let spec = self.arch.spec(ds.volume_shape())?;
        let mut cfg = TrainConfig::new(spec);
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.seeds = (0..self.seeds as u64).map(|i| common.seed + i).collect();
        cfg.patience = self.patience;
        cfg.orient = self.orient.parse()?;
        cfg.train_subset_size = self.train_size;
        cfg.adam.alpha = self.lr;
        cfg.data_seed = common.seed;
        cfg.threads = common.threads;
        cfg.validate()?;
        Ok((cfg, ds))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of aligned volumes
    GenData {
        #[command(flatten)]
        common: Common,
        /// JSON generator settings; flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generate full-resolution 121x145x121 volumes
        #[arg(long)]
        raw: bool,
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<usize>>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Downsample a volume, or every volume of a dataset
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// average, max or naive
        #[arg(long, default_value = "average")]
        strategy: String,
        #[arg(long, default_value_t = 3, value_parser = positive)]
        factor: usize,
        /// Volume file, manifest or dataset directory
        input: PathBuf,
        /// Output file or directory (defaults to --out)
        output: Option<PathBuf>,
    },
    /// Cut a volume into k^3 regions stacked along channels
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        boundary: usize,
        /// native, min_overlap or max_overlap
        #[arg(long, default_value = "native")]
        orient: String,
        /// Foreground threshold for orientation and overlap
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        input: PathBuf,
        output: Option<PathBuf>,
    },
    /// Train one architecture over several seeds
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Write each seed's restored checkpoint
        #[arg(long)]
        save_weights: bool,
    },
    /// Evaluate saved weights on a split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        weights: PathBuf,
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "native")]
        orient: String,
        #[arg(long, default_value_t = 4, value_parser = positive)]
        batch_size: usize,
    },
    /// Train at several segmentation rates and pick the best by validation
    SweepK {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        ks: Vec<usize>,
    },
    /// Train over a grid of hidden-layer widths
    SweepHidden {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "256,2496,4736,6976,9216")]
        grid: Vec<usize>,
    },
    /// Train on growing subsamples of the training split
    SweepSize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Sizes; `full` is the whole training split
        #[arg(long, value_delimiter = ',', default_value = "100,200,300,400,full")]
        sizes: Vec<String>,
        /// Second preset to compare against at every size
        #[arg(long)]
        compare: Option<String>,
    },
    /// Time constant-work convolutions across segmentation rates
    BenchConv {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6,8,9,12,18,24,36")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 500, value_parser = positive)]
        reps: usize,
        #[arg(long, default_value_t = 72)]
        base: usize,
        #[arg(long, default_value_t = 4, value_parser = positive)]
        batch: usize,
        #[arg(long, default_value_t = 8, value_parser = positive)]
        filters: usize,
    },
    /// Print parameter counts of an architecture as JSON
    CountParams {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, value_delimiter = ',', default_value = "41,49,41")]
        shape: Vec<usize>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<segcnn::Error> for CliError {
    fn from(e: segcnn::Error) -> Self {
        match e {
            segcnn::Error::Argument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn common_of(cmd: &Command) -> &Common {
    match cmd {
        Command::GenData { common, .. }
        | Command::Preprocess { common, .. }
        | Command::Segment { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::SweepK { common, .. }
        | Command::SweepHidden { common, .. }
        | Command::SweepSize { common, .. }
        | Command::BenchConv { common, .. }
        | Command::CountParams { common, .. } => common,
    }
}

fn run(cmd: Command) -> CliResult {
    let threads = common_of(&cmd).threads;
    // Only fails when a global pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cmd {
        Command::GenData { common, config, raw, shape, n_train, n_val, n_test } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_slice(&fs::read(&p)?)?,
                None => GeneratorConfig::default(),
            };
            cfg.seed = common.seed;
            if raw {
                cfg.volume_shape = RAW_SHAPE;
            }
            if let Some(s) = shape {
                cfg.volume_shape = shape3(&s)?;
            }
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_val = n_val.unwrap_or(cfg.n_val);
            cfg.n_test = n_test.unwrap_or(cfg.n_test);
            let dir = out_dir(&common)?;
            let manifest = write_dataset(&dir, &generate(&cfg)?)?;
            println!("wrote {} subjects to {}", manifest.entries.len(), dir.display());
            Ok(())
        }
        Command::Preprocess { common, strategy, factor, input, output } => {
            let strategy: PoolStrategy = strategy.parse()?;
            let output = output
                .or(common.out)
                .ok_or_else(|| CliError::Usage("preprocess needs an output path".into()))?;
            if input.is_dir() || input.extension().is_some_and(|e| e == "csv") {
                preprocess_dataset(&manifest_path(&input), &output, factor, strategy)
            } else {
                let v: Tensor<f32> = read_volume(&input)?;
                write_volume(&output, &prepool(&v, factor, strategy)?)?;
                Ok(())
            }
        }
        Command::Segment { common, k, boundary, orient, tau, input, output } => {
            let output = output
                .or(common.out)
                .ok_or_else(|| CliError::Usage("segment needs an output path".into()))?;
            let mode: OrientMode = orient.parse()?;
            let v: Tensor<f32> = read_volume(&input)?;
            let spatial = match v.rank() {
                3 => v.shape().to_vec(),
                5 => v.shape()[1..4].to_vec(),
                _ => return Err(CliError::Data(format!("cannot segment a volume of shape {:?}", v.shape()))),
            };
            let plan = make_plan(&spatial, k, boundary)?;
            let reference = if v.rank() == 3 { v.clone() } else { v.slice_leading(0, 1)?.reshape(&spatial)? };
            let plan = orient_regions(&plan, mode, &reference, tau)?;
            let seg = segment(&v, &plan)?;
            let data = if v.rank() == 3 { seg.data.clone().reshape(&seg.data.shape()[1..])? } else { seg.data.clone() };
            write_volume(&output, &data)?;
            let score = overlap_score(&seg, tau);
            let mut csv = String::from("channel,rx,ry,rz,origin_x,origin_y,origin_z,flip_x,flip_y,flip_z\n");
            for (c, r) in plan.regions.iter().enumerate() {
                let f = r.orientation.flip.map(|b| b as u8);
                csv += &format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    c, r.grid[0], r.grid[1], r.grid[2], r.origin[0], r.origin[1], r.origin[2], f[0], f[1], f[2]
                );
            }
            fs::write(output.with_extension("csv"), csv)?;
            write_json(&output.with_extension("json"), &json!({ "plan": plan, "overlap_score": score, "shape": data.shape() }))?;
            println!("{:?} -> {:?}, overlap {:.4}", v.shape(), data.shape(), score);
            Ok(())
        }
        Command::Train { common, train: args, save_weights } => {
            let (cfg, ds) = args.load(&common)?;
            let dir = out_dir(&common)?;
            let report = train(&cfg, &ds)?;
            write_runs_csv(&dir.join("train.csv"), &report.runs)?;
            write_json(&dir.join("train.json"), &report)?;
            if save_weights {
                for (run, bytes) in report.runs.iter().zip(&report.weights) {
                    fs::write(dir.join(format!("weights_seed{}.rcnw", run.seed)), bytes)?;
                }
            }
            print_summary(&report.summary);
            Ok(())
        }
        Command::Eval { common, data, arch, weights, split, orient, batch_size } => {
            let ds = load_dataset(&manifest_path(&data))?;
            let spec = arch.spec(ds.volume_shape())?;
            let mut net = load_weights::<f32>(&weights, &spec)?;
            net.set_threads(common.threads);
            let part = match split.as_str() {
                "train" => &ds.train,
                "val" => &ds.val,
                "test" => &ds.test,
                _ => return Err(CliError::Usage(format!("unknown split {split:?}"))),
            };
            let plan = input_plan(&spec, orient.parse()?, &ds.train)?;
            let inputs = segment(&part.volumes, &plan)?.data;
            let (mse, mae) = evaluate(&mut net, &inputs, &part.labels, batch_size)?;
            let dir = out_dir(&common)?;
            fs::write(dir.join("eval.csv"), format!("spec,split,n,mse,mae\n{},{},{},{:.6},{:.6}\n", spec.label(), split, part.len(), mse, mae))?;
            write_json(&dir.join("eval.json"), &json!({ "spec": spec, "split": split, "n": part.len(), "mse": mse, "mae": mae }))?;
            println!("{} {}: mse {:.4} mae {:.4}", spec.label(), split, mse, mae);
            Ok(())
        }
        Command::SweepK { common, train: args, ks } => {
            let (cfg, ds) = args.load(&common)?;
            let dir = out_dir(&common)?;
            let report = sweep_k(&cfg, &ds, &ks)?;
            write_runs_csv(&dir.join("sweep_k.csv"), report.rows.iter().flat_map(|r| &r.runs))?;
            let mut summary = String::from("k,");
            summary += SUMMARY_HEADER;
            summary += ",selected\n";
            for row in &report.rows {
                summary += &format!("{},{},{}\n", row.k, summary_row(&row.summary), row.k == report.selected_k);
            }
            fs::write(dir.join("sweep_k_summary.csv"), summary)?;
            write_json(&dir.join("sweep_k.json"), &report)?;
            println!("selected k = {}", report.selected_k);
            Ok(())
        }
        Command::SweepHidden { common, train: args, grid } => {
            let (cfg, ds) = args.load(&common)?;
            let dir = out_dir(&common)?;
            let rows = sweep_hidden_units(&cfg, &ds, &grid)?;
            write_runs_csv(&dir.join("sweep_hidden.csv"), rows.iter().flat_map(|r| &r.runs))?;
            let mut summary = format!("hidden_units,fc_weights,{}\n", SUMMARY_HEADER);
            for row in &rows {
                summary += &format!("{},{},{}\n", row.hidden_units, row.fc_weights, summary_row(&row.summary));
            }
            fs::write(dir.join("sweep_hidden_summary.csv"), summary)?;
            write_json(&dir.join("sweep_hidden.json"), &rows)?;
            Ok(())
        }
        Command::SweepSize { common, train: args, sizes, compare } => {
            let (cfg, ds) = args.load(&common)?;
            let sizes = sizes
                .iter()
                .map(|s| match s.as_str() {
                    "full" => Ok(None),
                    n => n.parse().map(Some).map_err(|_| CliError::Usage(format!("bad size {n:?}"))),
                })
                .collect::<CliResult<Vec<_>>>()?;
            let mut cfgs = vec![cfg.clone()];
            if let Some(name) = compare {
                let other = ArchArgs { arch: name, filters: None, k: None, ..args.arch.clone() };
                cfgs.push(TrainConfig { spec: other.spec(ds.volume_shape())?, ..cfg });
            }
            let dir = out_dir(&common)?;
            let rows = sweep_train_size(&cfgs, &ds, &sizes)?;
            write_runs_csv(&dir.join("sweep_size.csv"), rows.iter().flat_map(|r| &r.runs))?;
            let mut summary = format!("size,{},test_mse_gap\n", SUMMARY_HEADER);
            for row in &rows {
                for s in &row.summaries {
                    let gap = row.test_mse_gap.map(|g| format!("{g:.6}")).unwrap_or_default();
                    summary += &format!("{},{},{}\n", row.size, summary_row(s), gap);
                }
            }
            fs::write(dir.join("sweep_size_summary.csv"), summary)?;
            write_json(&dir.join("sweep_size.json"), &rows)?;
            Ok(())
        }
        Command::BenchConv { common, ks, reps, base, batch, filters } => {
            let cfg = SweepConfig { ks, base, batch, filters, reps, threads: common.threads, seed: common.seed };
            let records = bench_conv_sweep(&cfg)?;
            let dir = out_dir(&common)?;
            let mut csv = String::from(BenchRecord::CSV_HEADER);
            csv.push('\n');
            for r in &records {
                csv += &r.csv_row();
                csv.push('\n');
            }
            fs::write(dir.join("bench.csv"), &csv)?;
            let verdict = if records.len() >= 3 { Some(check_ushape(&records)?) } else { None };
            write_json(&dir.join("bench.json"), &json!({ "config": cfg, "records": records, "verdict": verdict }))?;
            print!("{csv}");
            if let Some(v) = verdict {
                println!("u-shape: {} ({})", if v.pass { "pass" } else { "fail" }, v.reason);
            }
            Ok(())
        }
        Command::CountParams { common, arch, shape } => {
            let spec = arch.spec(shape3(&shape)?)?;
            let counts = spec.count_params()?;
            let report = json!({
                "arch": arch.arch,
                "spec": spec,
                "flatten_size": spec.flatten_size()?,
                "conv_weights": counts.conv_weights,
                "fc_weights": counts.fc_weights,
                "biases": counts.biases,
                "batchnorm": counts.batchnorm,
                "total": counts.total,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            if common.out.is_some() {
                let dir = out_dir(&common)?;
                write_json(&dir.join("params.json"), &report)?;
                fs::write(
                    dir.join("params.csv"),
                    format!(
                        "spec,conv_weights,fc_weights,biases,batchnorm,total\n{},{},{},{},{},{}\n",
                        spec.label(),
                        counts.conv_weights,
                        counts.fc_weights,
                        counts.biases,
                        counts.batchnorm,
                        counts.total
                    ),
                )?;
            }
            Ok(())
        }
    }
}

const SUMMARY_HEADER: &str =
    "spec,runs,val_mse_mean,val_mse_std,test_mse_mean,test_mse_std,test_mae_mean,test_mae_std,minutes_mean,minutes_std";

fn summary_row(s: &Summary) -> String {
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        s.spec,
        s.runs,
        s.val_mse.mean,
        s.val_mse.std,
        s.test_mse.mean,
        s.test_mse.std,
        s.test_mae.mean,
        s.test_mae.std,
        s.minutes.mean,
        s.minutes.std
    )
}

fn print_summary(s: &Summary) {
    println!(
        "{}: test mse {:.4} ± {:.4}, mae {:.4} ± {:.4}, {:.2} min/run",
        s.spec, s.test_mse.mean, s.test_mse.std, s.test_mae.mean, s.test_mae.std, s.minutes.mean
    );
}

fn shape3(s: &[usize]) -> CliResult<[usize; 3]> {
    s.try_into().map_err(|_| CliError::Usage(format!("shape needs 3 extents, got {}", s.len())))
}

fn out_dir(common: &Common) -> CliResult<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn preprocess_dataset(manifest: &Path, out: &Path, factor: usize, strategy: PoolStrategy) -> CliResult {
    let m = Manifest::read(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(out.join("volumes"))?;
    let mut entries = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let v: Tensor<f32> = read_volume(&root.join(&e.path))?;
        let name = Path::new(&e.path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let rel = format!("volumes/{name}");
        write_volume(&out.join(&rel), &prepool(&v, factor, strategy)?)?;
        entries.push(segcnn::data::ManifestEntry { path: rel, ..e.clone() });
    }
    let done = Manifest { entries };
    done.write(&out.join(MANIFEST_FILE))?;
    let summary: Value = json!({ "source": manifest, "factor": factor, "strategy": strategy, "subjects": done.entries.len() });
    write_json(&out.join("preprocess.json"), &summary)?;
    fs::write(
        out.join("preprocess.csv"),
        format!("source,factor,strategy,subjects\n{},{},{:?},{}\n", manifest.display(), factor, strategy, done.entries.len()),
    )?;
    Ok(())
}
