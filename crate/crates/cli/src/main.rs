//! `treesplat` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 non-finite values during optimization.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use treesplat::config::Config;
use treesplat::forest::{build_view_forest, default_min_mask_pixels, FULL_RES_PIXELS};
use treesplat::io::{channel_preview, load_labelmap, load_scene, save_feature_map, save_labelmap, save_scene};
use treesplat::pipeline::{
    self, cascade_stage, denoise_csv, empty_run, evaluate, global_stage, noise_sweep, prepare, run_from_scene,
    sweep_csv, sweep_medians, sweep_svg, tag_points, write_artifacts, Arm, Dataset,
};
use treesplat::query::click_query;
use treesplat::render::{rasterize, render_features};
use treesplat::train::logs_to_csv;
use treesplat::{Error, LabelMap, Scene};

#[derive(Parser)]
#[command(
    name = "treesplat",
    version,
    about = "Hierarchical instance features for Gaussian splat scenes"
)]
struct Cli {
    /// Line-based `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the `seed` key
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the output directory
    Synth,
    /// Refine per-view mask levels (`view{v}_l{l}.pgm`) and write their trees
    Forest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the global stage only
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Cluster with local refinement and denoising; starts from a trained
    /// scene when `--scene` is given
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Denoise the clusters recorded in a scene's tags
    Denoise {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Score a clustered scene against a dataset's ground truth
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Print the tree nodes selected by a click
    Query {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        x: usize,
        #[arg(long)]
        y: usize,
    },
    /// Feature perturbation sweep with and without the position block
    Sweep,
    /// Render feature maps and per-channel previews
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        view: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Lib(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| Failure::Usage(format!("{}: {}", p.display(), e)))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult {
    let cfg = load_config(&cli)?;
    let out = cli.out_dir.as_path();
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::Synth => synth(&cfg, out),
        Command::Forest { input } => forest(&cfg, input, out),
        Command::Train { data } => train(&cfg, data, out),
        Command::Cluster { data, scene } => cluster(&cfg, data, scene.as_deref(), out),
        Command::Denoise { scene } => denoise(&cfg, scene, out),
        Command::Eval { data, scene } => eval(&cfg, data, scene, out),
        Command::Query {
            data,
            scene,
            view,
            x,
            y,
        } => query(data, scene, *view, *x, *y),
        Command::Sweep => sweep(&cfg, out),
        Command::Render { data, scene, view } => render(data, scene.as_deref(), *view, out),
    }
}

fn synth(cfg: &Config, out: &Path) -> CliResult {
    let data = Dataset::synthetic(&cfg.synth)?;
    data.save(out)?;
    println!(
        "{} points, {} views -> {}",
        data.scene.len(),
        data.views.len(),
        out.display()
    );
    Ok(())
}

/// `view{v}_l{l}.pgm` -> `(v, l)`
fn parse_map_name(name: &str) -> Option<(usize, usize)> {
    let stem = name.strip_prefix("view")?.strip_suffix(".pgm")?;
    let (v, l) = stem.split_once("_l")?;
    Some((v.parse().ok()?, l.parse().ok()?))
}

fn forest(cfg: &Config, input: &Path, out: &Path) -> CliResult {
    let mut views: BTreeMap<usize, BTreeMap<usize, PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(input)? {
        let path = entry?.path();
        if let Some((v, l)) = path.file_name().and_then(|n| n.to_str()).and_then(parse_map_name) {
            views.entry(v).or_default().insert(l, path);
        }
    }
    if views.is_empty() {
        return Err(Failure::Data(format!(
            "no view{{v}}_l{{l}}.pgm files in {}",
            input.display()
        )));
    }
    fs::create_dir_all(out.join("refined"))?;
    let mut jsonl = String::new();
    let mut orphans = 0;
    for (&v, files) in &views {
        if files.keys().copied().ne(0..files.len()) {
            return Err(Failure::Data(format!(
                "view {v}: levels must be numbered 0..{}",
                files.len()
            )));
        }
        let levels: Vec<LabelMap> = files
            .iter()
            .map(|(&l, p)| load_labelmap(p, l))
            .collect::<treesplat::Result<_>>()?;
        let min_pixels = cfg
            .train
            .min_mask_pixels
            .unwrap_or_else(|| default_min_mask_pixels(levels[0].height, levels[0].width, FULL_RES_PIXELS));
        let f = build_view_forest(&levels, v, min_pixels)?;
        for (l, m) in f.levels.iter().enumerate() {
            save_labelmap(m, out.join("refined").join(format!("view{v:03}_l{l}.pgm")))?;
        }
        jsonl.push_str(&f.to_json_lines());
        orphans += f.dropped_orphans;
    }
    fs::write(out.join("forest.jsonl"), jsonl)?;
    println!("{} views refined, {orphans} orphan masks dropped", views.len());
    Ok(())
}

fn train(cfg: &Config, data: &Path, out: &Path) -> CliResult {
    let data = Dataset::load(data)?;
    let views = prepare(&data, &cfg.train)?;
    let mut run = empty_run(&data);
    let result = global_stage(&data, &views, &cfg.train, &mut run);
    fs::write(out.join("train_log.csv"), logs_to_csv(&run.logs))?;
    result?;
    save_scene(&run.scene, out.join("scene.ply"))?;
    println!("{} steps -> {}", run.logs.len(), out.display());
    Ok(())
}

fn cluster(cfg: &Config, data: &Path, scene: Option<&Path>, out: &Path) -> CliResult {
    let data = Dataset::load(data)?;
    let result = match scene {
        None => {
            let mut run = empty_run(&data);
            let r = pipeline::run_into(&data, &cfg.train, &mut run);
            (run, r)
        }
        Some(p) => {
            let mut run = run_from_scene(load_scene(p)?);
            let r = (|| {
                cfg.train.validate()?;
                check_same_points(&data.scene, &run.scene)?;
                let views = prepare(&data, &cfg.train)?;
                run.k_schedule = if cfg.train.k_schedule.is_empty() {
                    pipeline::auto_k_schedule(&views, cfg.train.max_tree_depth)
                } else {
                    cfg.train.k_schedule.clone()
                };
                cascade_stage(&views, &cfg.train, &mut run)?;
                run.metrics = evaluate(&data, &views, &run);
                Ok(())
            })();
            (run, r)
        }
    };
    let (run, r) = result;
    write_artifacts(out, &run)?;
    r?;
    if let Some(m) = &run.metrics {
        println!("{}", serde_json::to_string(m).unwrap_or_default());
    }
    Ok(())
}

fn check_same_points(a: &Scene, b: &Scene) -> treesplat::Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dataset has {} points, scene has {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn denoise(cfg: &Config, scene: &Path, out: &Path) -> CliResult {
    let mut run = run_from_scene(load_scene(scene)?);
    let mut tree = run
        .tree
        .take()
        .ok_or_else(|| Failure::Data(format!("{} carries no cluster ids", scene.display())))?;
    run.denoise = pipeline::denoise_tree(&run.scene, &mut tree, &cfg.train.denoise);
    tag_points(&mut run.scene, &tree);
    save_scene(&run.scene, out.join("scene.ply"))?;
    fs::write(out.join("denoise.csv"), denoise_csv(&run))?;
    let removed: usize = run.denoise.iter().map(|(_, d)| d.removed.len()).sum();
    println!("{} clusters, {removed} points removed", tree.nodes.len());
    Ok(())
}

fn eval(cfg: &Config, data: &Path, scene: &Path, out: &Path) -> CliResult {
    let data = Dataset::load(data)?;
    let run = run_from_scene(load_scene(scene)?);
    check_same_points(&data.scene, &run.scene)?;
    if run.tree.is_none() {
        return Err(Failure::Data(format!("{} carries no cluster ids", scene.display())));
    }
    let views = prepare(&data, &cfg.train)?;
    let m = evaluate(&data, &views, &run).ok_or_else(|| Failure::Data("dataset has no ground truth".into()))?;
    let text = serde_json::to_string_pretty(&m).map_err(Error::from)?;
    fs::write(out.join("metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn query(data: &Path, scene: &Path, view: usize, x: usize, y: usize) -> CliResult {
    let data = Dataset::load(data)?;
    let run = run_from_scene(load_scene(scene)?);
    let tree = run
        .tree
        .as_ref()
        .ok_or_else(|| Failure::Data(format!("{} carries no cluster ids", scene.display())))?;
    let v = data
        .views
        .iter()
        .find(|v| v.view_index == view)
        .ok_or_else(|| Failure::Data(format!("no view {view}")))?;
    let sel = click_query(&run.scene, tree, v, x, y)?;
    let row = serde_json::json!({ "view": view, "x": x, "y": y, "selection": sel });
    println!("{row}");
    Ok(())
}

fn sweep(cfg: &Config, out: &Path) -> CliResult {
    let rows = noise_sweep(&cfg.synth, &cfg.sweep, &cfg.train)?;
    fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
    fs::write(out.join("sweep.svg"), sweep_svg(&rows))?;
    for arm in [Arm::Position, Arm::FeatureOnly] {
        let line: Vec<String> = sweep_medians(&rows, arm)
            .iter()
            .map(|(t, a)| format!("{t}:{a:.3}"))
            .collect();
        println!("{arm}: {}", line.join(" "));
    }
    Ok(())
}

fn render(data: &Path, scene: Option<&Path>, view: Option<usize>, out: &Path) -> CliResult {
    let data = Dataset::load(data)?;
    let scene = match scene {
        Some(p) => {
            let s = load_scene(p)?;
            check_same_points(&data.scene, &s)?;
            s
        }
        None => data.scene,
    };
    let views: Vec<_> = data
        .views
        .iter()
        .filter(|v| view.is_none_or(|i| v.view_index == i))
        .collect();
    if views.is_empty() {
        return Err(Failure::Data(format!("no view {}", view.unwrap_or_default())));
    }
    let dir = out.join("render");
    fs::create_dir_all(&dir)?;
    for v in views {
        let fmap = render_features(&scene, &rasterize(&scene, v))?;
        let stem = format!("view{:03}", v.view_index);
        save_feature_map(&fmap, dir.join(format!("{stem}.fmap")))?;
        for c in 0..fmap.dim {
            fs::write(dir.join(format!("{stem}_c{c}.pgm")), channel_preview(&fmap, c))?;
        }
    }
    println!("rendered -> {}", dir.display());
    Ok(())
}
