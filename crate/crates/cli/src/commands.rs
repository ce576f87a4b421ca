use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use covtune::datagen::{build_dataset, load_dataset, save_dataset, GenConfig, ProblemKind, DATASET_MAGIC};
use covtune::experiment::{
    compare_methods, fnv1a, run_twin_experiment, summary_json, write_comparison_csv, write_metrics_csv, write_plot_csv,
    Method, TwinConfig,
};
use covtune::lstmnet::{load_checkpoint, save_checkpoint, train as train_model, TrainConfig, CHECKPOINT_MAGIC};
use covtune::{Error, RandomSource, Result};

use crate::config::{self, KvConfig};
use crate::Common;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn load_config(common: &Common, known: &[&str]) -> Result<KvConfig> {
    let c = match &common.config {
        Some(p) => KvConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", p.display())),
            other => other,
        })?,
        None => KvConfig::default(),
    }
    .with_overrides(&common.set)?;
    c.check_known(known)?;
    Ok(c)
}

/// `<path>.config`, the snapshot written next to every output file.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn generate(kind: ProblemKind, n: usize, out: &Path, common: &Common) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let c = load_config(common, config::GEN_KEYS)?;
    let mut g = GenConfig::for_kind(kind);
    config::apply_gen(&c, &mut g)?;
    let d = build_dataset(&g, n, &RandomSource::new(common.seed))?;
    save_dataset(&d, out)?;
    let snapshot = format!(
        "# generate kind={} seed={} n={}\n{}",
        kind.name(),
        common.seed,
        n,
        config::render_gen(&g)
    );
    write_text(&sidecar(out, ".config"), &snapshot)?;
    println!(
        "wrote {} samples of {} (T+1={}, obs_dim={}, param_dim={}) seed {} to {}",
        d.len(),
        kind.name(),
        d.series_len,
        d.obs_dim,
        d.param_dim,
        common.seed,
        out.display()
    );
    Ok(())
}

pub struct TrainFlags {
    pub input_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub patience: Option<usize>,
    pub hidden: Option<usize>,
    pub lr: Option<f64>,
}

pub fn train(data: &Path, out: &Path, flags: TrainFlags, common: &Common) -> Result<()> {
    let c = load_config(common, config::TRAIN_KEYS)?;
    let mut cfg = TrainConfig::default();
    config::apply_train(&c, &mut cfg)?;
    if let Some(v) = flags.input_steps {
        cfg.input_steps = Some(v);
    }
    cfg.epochs = flags.epochs.unwrap_or(cfg.epochs);
    cfg.batch = flags.batch.unwrap_or(cfg.batch);
    cfg.patience = flags.patience.unwrap_or(cfg.patience);
    cfg.hidden = flags.hidden.unwrap_or(cfg.hidden);
    cfg.lr = flags.lr.unwrap_or(cfg.lr);
    let d = load_dataset(data)?;
    let outcome = train_model(&d, &cfg, &mut RandomSource::new(common.seed))?;
    save_checkpoint(&outcome.model, out)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for e in &outcome.curve {
        csv.push_str(&format!("{},{:.17e},{:.17e}\n", e.epoch, e.train, e.val));
    }
    write_text(&sidecar(out, ".loss.csv"), &csv)?;
    let snapshot = format!(
        "# train seed={} data={}\n{}",
        common.seed,
        data.display(),
        config::render_train(&cfg)
    );
    write_text(&sidecar(out, ".config"), &snapshot)?;
    let best = outcome.curve.iter().find(|e| e.epoch == outcome.best_epoch);
    println!(
        "trained {} epochs (best {}, val {:.4e}{}) on {} samples; checkpoint {}",
        outcome.curve.len(),
        outcome.best_epoch,
        best.map_or(f64::NAN, |e| e.val),
        if outcome.stopped_early { ", stopped early" } else { "" },
        d.len(),
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct AssimilateArgs {
    #[arg(long)]
    kind: ProblemKind,
    /// Comma-separated list from true, lstm, di01, d05, free.
    #[arg(long, value_delimiter = ',', default_value = "true,di01,d05")]
    methods: Vec<Method>,
    /// Trained model, required exactly when `lstm` is among the methods.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of twin examples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    cadence: Option<usize>,
    #[arg(long = "q-di01")]
    q_di01: Option<usize>,
    #[arg(long = "q-d05")]
    q_d05: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    /// Also write the per-time curves of every method.
    #[arg(long)]
    plot: bool,
    #[command(flatten)]
    common: Common,
}

pub fn assimilate(a: &AssimilateArgs) -> Result<()> {
    let mut known: Vec<&str> = config::GEN_KEYS.to_vec();
    known.extend(config::TWIN_KEYS);
    let c = load_config(&a.common, &known)?;
    if a.methods.is_empty() {
        return Err(Error::Config("no methods given".into()));
    }
    let wants_lstm = a.methods.contains(&Method::Lstm);
    let model = match (&a.checkpoint, wants_lstm) {
        (Some(p), true) => {
            if !p.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
            Some(load_checkpoint(p)?)
        }
        (None, true) => return Err(Error::Config("method lstm needs --checkpoint".into())),
        (Some(_), false) => {
            return Err(Error::Config(
                "--checkpoint given but lstm is not among the methods".into(),
            ))
        }
        (None, false) => None,
    };
    let mut base = TwinConfig::for_kind(a.kind, a.methods[0]);
    config::apply_twin(&c, &mut base)?;
    base.seed = a.common.seed;
    base.examples = a.n.unwrap_or(base.examples);
    base.ensemble = a.ensemble.unwrap_or(base.ensemble);
    base.cadence = a.cadence.unwrap_or(base.cadence);
    base.q_di01 = a.q_di01.unwrap_or(base.q_di01);
    base.q_d05 = a.q_d05.unwrap_or(base.q_d05);
    base.mu = a.mu.unwrap_or(base.mu);
    let cfgs: Vec<TwinConfig> = a
        .methods
        .iter()
        .map(|&method| TwinConfig { method, ..base.clone() })
        .collect();
    let reports = if cfgs.len() == 1 {
        vec![run_twin_experiment(&cfgs[0], model.as_ref())?]
    } else {
        compare_methods(&cfgs, model.as_ref())?
    };
    fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("comparison.csv"))?);
    write_comparison_csv(&reports, &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(a.out.join("metrics.csv"))?);
    write_metrics_csv(&reports, &mut w)?;
    w.flush()?;
    let json = serde_json::to_string_pretty(&summary_json(&reports)).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&a.out.join("summary.json"), &(json + "\n"))?;
    if a.plot {
        for r in &reports {
            let mut w = BufWriter::new(File::create(a.out.join(format!("plot_{}.csv", r.method)))?);
            write_plot_csv(r, &mut w)?;
            w.flush()?;
        }
    }
    let methods: Vec<&str> = a.methods.iter().map(|m| m.label()).collect();
    let snapshot = format!(
        "# assimilate kind={} seed={} methods={}\n{}",
        base.kind.name(),
        base.seed,
        methods.join(","),
        config::render_twin(&base)
    );
    write_text(&a.out.join("config.txt"), &snapshot)?;
    for r in &reports {
        println!(
            "{:>5}  mean eps_mse {:.6e}  spec {:.3e} s  fallbacks {}",
            r.method.label(),
            r.mean_eps_mse,
            r.spec_seconds,
            r.fallbacks
        );
    }
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let mut magic = [0u8; 8];
    File::open(path)?.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        msg: "file too short to carry a magic".into(),
    })?;
    if &magic == DATASET_MAGIC {
        let d = load_dataset(path)?;
        let hash = d.samples.iter().fold(FNV_OFFSET, |h, s| fnv1a(h, &s.series));
        let energy: f64 = d.samples.iter().flat_map(|s| s.series.iter()).map(|v| v * v).sum();
        let count = d.len() * d.series_len * d.obs_dim;
        println!("dataset {}", path.display());
        println!("  kind        {}", d.kind.name());
        println!("  N           {}", d.len());
        println!("  T           {}", d.series_len.saturating_sub(1));
        println!("  obs_dim     {}", d.obs_dim);
        println!("  param_dim   {}", d.param_dim);
        let seeds: Vec<String> = d.samples.iter().take(4).map(|s| s.seed.to_string()).collect();
        println!(
            "  seeds       {}{}",
            seeds.join(", "),
            if d.len() > 4 { ", ..." } else { "" }
        );
        println!("  series rms  {:.6e}", (energy / count.max(1) as f64).sqrt());
        println!("  hash        {hash:016x}");
    } else if &magic == CHECKPOINT_MAGIC {
        let m = load_checkpoint(path)?;
        let p = &m.params;
        println!("checkpoint {}", path.display());
        println!("  kind        {}", m.kind.name());
        println!("  input steps {}", m.input_steps);
        println!(
            "  layer lstm  (example_size, {}, {}) -> (example_size, {})",
            m.input_steps, p.input, p.hidden
        );
        println!(
            "  layer dense (example_size, {}) -> (example_size, {})",
            p.hidden, p.output
        );
        for (name, rows, cols, _) in p.tensors() {
            println!("  tensor {name:<4} {rows} x {cols}");
        }
        println!("  parameters  {}", p.num_params());
        println!("  weight norm {:.6e}", p.norm());
        println!(
            "  hash        {:016x}",
            fnv1a(FNV_OFFSET, &p.iter().copied().collect::<Vec<_>>())
        );
    } else {
        return Err(Error::VersionMismatch {
            expected: "COVDSET1 or LSTMCOV1".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    Ok(())
}
