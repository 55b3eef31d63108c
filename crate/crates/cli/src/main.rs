use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tabench::attack::{run_attack_with, AttackOptions, AttackSpec};
use tabench::harness::config::{
    checkpoint_path, load_substitute, load_victims, snapshot_dir, BenchConfig, ModelConfig, ModelRole,
};
use tabench::harness::io::{load_batch, save_batch, AdvBatch, BatchHeader};
use tabench::harness::report::write_report;
use tabench::harness::tune::SearchTable;
use tabench::harness::{
    enumerate_grid, evaluate, grid_search, select_benign, tune_hyperparams, Combination, ReportRecord, Selection, Splits,
};
use tabench::models::{load_checkpoint, save_checkpoint};
use tabench::train::{adversarial_train, collect_lgv, train};

#[derive(Parser)]
#[command(name = "tabench", about = "Desk-scale benchmark for transfer-based adversarial attacks")]
struct Cli {
    /// Benchmark configuration (JSON).
    #[arg(long, global = true, default_value = "tabench.json")]
    config: PathBuf,
    /// Harness seed: overrides the attack seed and drives benign selection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the standard models.
    Train,
    /// Adversarially train the models with role "adversarial".
    Advtrain,
    /// Collect LGV snapshots for models with role "lgv".
    Lgv,
    /// Select benign examples and craft adversarial batches from each substitute.
    Attack,
    /// Score the crafted batches on every victim.
    Evaluate,
    /// Combination grid search over optimization back-ends.
    Grid,
    /// Tune method hyper-parameters on the validation split.
    Tune,
    /// Write results.csv, results.json and summary.json from evaluated records.
    Report,
}

struct Ctx {
    cfg: BenchConfig,
    out: PathBuf,
    seed: u64,
}

impl Ctx {
    fn attack_spec(&self) -> AttackSpec {
        AttackSpec { seed: self.seed, ..self.cfg.attack.clone() }
    }

    fn splits(&self) -> Splits {
        self.cfg.dataset.generate()
    }

    /// Held-out images for feature statistics (FDA).
    fn stats(splits: &Splits) -> tabench::engine::Tensor {
        splits.train.range(0, splits.train.len().min(256)).images
    }

    fn selection(&self, splits: &Splits) -> Result<Selection> {
        let victims = load_victims(&self.cfg, &self.out)?;
        let sel = select_benign(&splits.test, &splits.test_indices, &victims, self.cfg.grid.n_examples, self.seed)?;
        let path = self.out.join("benign.json");
        fs::write(&path, serde_json::to_string_pretty(&sel)?).with_context(|| path.display().to_string())?;
        Ok(sel)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn backend_name(spec: &AttackSpec) -> String {
    Combination { init: spec.init, optimizer: spec.optimizer, augment: spec.augment.kinds().to_vec() }.name()
}

fn method_name(spec: &AttackSpec) -> String {
    spec.method.as_ref().map_or("none".into(), |m| m.kind.name().into())
}

fn train_role(ctx: &Ctx, role: ModelRole) -> Result<()> {
    let splits = ctx.splits();
    fs::create_dir_all(ctx.out.join("models"))?;
    let selected: Vec<&ModelConfig> = ctx.cfg.models.iter().filter(|m| m.role == role).collect();
    if selected.is_empty() {
        println!("no models with role {role:?}");
    }
    for m in selected {
        let spec = ctx.cfg.spec_of(&m.name)?;
        match role {
            ModelRole::Lgv => {
                let base_name = m.base.as_deref().expect("validated");
                let base = load_checkpoint(checkpoint_path(&ctx.out, base_name))
                    .with_context(|| format!("loading base {base_name}; run `train` first"))?;
                let snaps = collect_lgv(&base, &splits.train, &m.train)?;
                let dir = snapshot_dir(&ctx.out, &m.name);
                fs::create_dir_all(&dir)?;
                for (k, s) in snaps.iter().enumerate() {
                    save_checkpoint(s, dir.join(format!("{k}.tabx")))?;
                }
                println!("{}: {} snapshots", m.name, snaps.len());
            }
            _ => {
                let model = if role == ModelRole::Adversarial {
                    adversarial_train(&spec, &splits.train, &splits.test, &m.train)?
                } else {
                    train(&spec, &splits.train, &splits.test, &m.train)?
                };
                save_checkpoint(&model, checkpoint_path(&ctx.out, &m.name))?;
                let meta = model.meta();
                println!(
                    "{}: clean {:.4}{}",
                    m.name,
                    meta.clean_test_accuracy.unwrap_or(f64::NAN),
                    meta.robust_accuracy.map(|r| format!(", robust {r:.4}")).unwrap_or_default()
                );
            }
        }
    }
    Ok(())
}

fn attack(ctx: &Ctx) -> Result<()> {
    let splits = ctx.splits();
    let sel = ctx.selection(&splits)?;
    let data = sel.data.as_ref().expect("fresh selection");
    let spec = ctx.attack_spec();
    let stats = Ctx::stats(&splits);
    let opts = AttackOptions { stats: Some(&stats), backprop_counter: None };
    let dir = ctx.out.join("adv");
    fs::create_dir_all(&dir)?;
    for name in &ctx.cfg.grid.substitutes {
        let sub = load_substitute(&ctx.cfg, &ctx.out, name)?;
        let out = run_attack_with(&sub.models, &data.images, &data.labels, &spec, &opts)?;
        for f in &out.failures {
            eprintln!("{name}: example {} aborted at iteration {}: {}", f.example, f.iteration, f.message);
        }
        let header = BatchHeader {
            substitute: name.clone(),
            method: method_name(&spec),
            backend: backend_name(&spec),
            spec: spec.clone(),
            shape: out.x_adv.shape().to_vec(),
            labels: data.labels.clone(),
            indices: sel.indices.clone(),
        };
        save_batch(&AdvBatch { header, images: out.x_adv }, &dir.join(format!("{name}.taba")))?;
        println!("{name}: {} examples", data.len());
    }
    Ok(())
}

fn evaluate_batches(ctx: &Ctx) -> Result<()> {
    let victims = load_victims(&ctx.cfg, &ctx.out)?;
    let dir = ctx.out.join("adv");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}; run `attack` first", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "taba"))
        .collect();
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        let batch = load_batch(&p)?;
        let h = &batch.header;
        for cell in evaluate(&batch.images, &h.labels, &h.substitute, &victims)? {
            records.push(ReportRecord {
                substitute: h.substitute.clone(),
                victim: cell.victim,
                method: h.method.clone(),
                backend: h.backend.clone(),
                norm: h.spec.norm,
                epsilon: h.spec.epsilon,
                iterations: h.spec.iterations,
                seed: h.spec.seed,
                n_examples: cell.n,
                accuracy: cell.accuracy,
            });
        }
    }
    ReportRecord::sort(&mut records);
    write_json(&ctx.out.join("records.json"), &records)?;
    println!("{} records", records.len());
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let path = ctx.out.join("records.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}; run `evaluate` first", path.display()))?;
    let records: Vec<ReportRecord> = serde_json::from_str(&text)?;
    write_report(&records, &ctx.out)?;
    println!("wrote {}", ctx.out.join("results.csv").display());
    Ok(())
}

fn grid(ctx: &Ctx) -> Result<()> {
    let splits = ctx.splits();
    let sel = ctx.selection(&splits)?;
    let data = sel.data.as_ref().expect("fresh selection");
    let victims = load_victims(&ctx.cfg, &ctx.out)?;
    let subs = ctx
        .cfg
        .grid
        .substitutes
        .iter()
        .map(|n| load_substitute(&ctx.cfg, &ctx.out, n))
        .collect::<Result<Vec<_>, _>>()?;
    let base = AttackSpec { method: None, ..ctx.attack_spec() };
    let outcome =
        grid_search(&base, &enumerate_grid(), &subs, &victims, &data.images, &data.labels, ctx.cfg.grid.budget)?;
    write_report(&outcome.records, &ctx.out)?;
    write_json(&ctx.out.join("grid.json"), &outcome)?;
    if outcome.truncated {
        println!("TRUNCATED: {} of {} combinations evaluated", outcome.evaluated, outcome.total);
    }
    for row in outcome.ranking.iter().take(5) {
        println!("{:32} AAA {:.4} WAA {:.4} BAA {:.4}", row.combination, row.aaa, row.waa, row.baa);
    }
    Ok(())
}

fn tune(ctx: &Ctx) -> Result<()> {
    let Some(t) = &ctx.cfg.tune else { bail!("config has no `tune` section") };
    let splits = ctx.splits();
    let victims = load_victims(&ctx.cfg, &ctx.out)?;
    let sub = load_substitute(&ctx.cfg, &ctx.out, &t.substitute)?;
    let val = select_benign(&splits.validation, &splits.validation_indices, &victims, t.n_examples, ctx.seed)?;
    let data = val.data.as_ref().expect("fresh selection");
    let table = t.table.clone().unwrap_or_else(|| SearchTable::default_for(t.method, sub.models[0].spec()));
    let base = AttackSpec { method: None, ..ctx.attack_spec() };
    let best = tune_hyperparams(
        t.method,
        &base,
        &sub,
        &victims,
        (&data.images, &data.labels),
        &val.indices,
        &splits.test_indices,
        &table,
        Some(&Ctx::stats(&splits)),
    )?;
    write_json(&ctx.out.join("tune.json"), &best)?;
    println!("{}", serde_json::to_string(&best)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build_global()?;
    let cfg = BenchConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    fs::create_dir_all(&cli.out)?;
    let seed = cli.seed.unwrap_or(cfg.attack.seed);
    let ctx = Ctx { cfg, out: cli.out, seed };
    match cli.command {
        Command::Train => train_role(&ctx, ModelRole::Standard),
        Command::Advtrain => train_role(&ctx, ModelRole::Adversarial),
        Command::Lgv => train_role(&ctx, ModelRole::Lgv),
        Command::Attack => attack(&ctx),
        Command::Evaluate => evaluate_batches(&ctx),
        Command::Grid => grid(&ctx),
        Command::Tune => tune(&ctx),
        Command::Report => report(&ctx),
    }
}
