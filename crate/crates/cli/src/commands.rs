//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use flame_core::data::{
    build_sequences, load_dataset, parse_interactions, save_dataset, SequenceDataset, Split,
};
use flame_core::ensemble::EnsembleState;
use flame_core::evaluation::{
    evaluate_network, evaluate_paths, per_matrix, per_matrix_csv, EvalOptions, MetricReport, PER_K,
};
use flame_core::training::{
    partner_trace_csv, trace_csv, trace_header, trace_row, train_observed, Checkpoint, EpochRecord,
    Mode, TrainConfig, TrainOutcome,
};
use flame_core::{Error, Result};

use crate::config::RunConfig;
use crate::{Cli, Command};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn resolve_config(cli: &Cli, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.train.validate()?;
    Ok(cfg)
}

struct Run {
    cfg: RunConfig,
    deterministic: bool,
}

impl Run {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn prepare(&self, command: &str) -> Result<()> {
        fs::create_dir_all(&self.cfg.out).map_err(io_err(&self.cfg.out))?;
        let manifest = format!(
            "# command={command}\n# version={}\n# deterministic={}\n{}",
            env!("CARGO_PKG_VERSION"),
            self.deterministic,
            self.cfg.to_text()
        );
        write_file(&self.out("manifest.txt"), &manifest)
    }

    fn dataset(&self) -> Result<SequenceDataset> {
        let path = match &self.cfg.data {
            Some(p) => p.clone(),
            None => {
                let p = self.out("dataset.bin");
                if !p.exists() {
                    return Err(Error::Config(
                        "no dataset: set data=<file> or run `flame ingest` into this output directory".into(),
                    ));
                }
                p
            }
        };
        load_dataset(&path)?.with_max_len(self.cfg.train.max_len)
    }

    fn eval_opts(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.cfg.train.eval_batch_size,
            mask_history: self.cfg.train.mask_history,
            ..EvalOptions::default()
        }
    }

    /// Trains `cfg`, appending each epoch to `metrics` as it finishes.
    fn train_logged(
        &self,
        cfg: &TrainConfig,
        ds: &SequenceDataset,
        frozen: Option<&Checkpoint>,
        metrics: &Path,
    ) -> Result<TrainOutcome> {
        let mut file = File::create(metrics).map_err(io_err(metrics))?;
        writeln!(file, "{}", trace_header()).map_err(io_err(metrics))?;
        let mut log = |r: &EpochRecord| -> Result<()> {
            writeln!(file, "{}", trace_row(r)).map_err(io_err(metrics))?;
            eprintln!(
                "[{}] epoch {:>3}  loss {:.5}  val NDCG@20 {:.4}",
                cfg.mode,
                r.epoch,
                r.train_loss,
                r.val.ndcg20()
            );
            Ok(())
        };
        train_observed(cfg, ds, frozen, &mut log)
    }

    fn pretrain(&self, ds: &SequenceDataset) -> Result<Checkpoint> {
        let cfg = TrainConfig {
            mode: Mode::Single,
            ..self.cfg.train.clone()
        };
        let outcome = self.train_logged(&cfg, ds, None, &self.out("pretrain_metrics.csv"))?;
        outcome.best.save(&self.out("frozen.ckpt"))?;
        eprintln!(
            "frozen network: best epoch {}, val NDCG@20 {:.4}",
            outcome.best_epoch(),
            outcome.best.meta.best_val_ndcg20
        );
        Ok(outcome.best)
    }

    /// The configured frozen checkpoint, else `<out>/frozen.ckpt`.
    fn frozen(&self) -> Result<Checkpoint> {
        let path = self
            .cfg
            .frozen
            .clone()
            .unwrap_or_else(|| self.out("frozen.ckpt"));
        if !path.exists() {
            return Err(Error::Config(format!(
                "frozen checkpoint {} not found; run `flame pretrain`, pass --pretrain-first, or set frozen=<file>",
                path.display()
            )));
        }
        Checkpoint::load(&path)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let rest: &[String] = match &cli.command {
        Command::Ingest { rest, .. }
        | Command::Pretrain { rest }
        | Command::Train { rest, .. }
        | Command::Eval { rest, .. }
        | Command::Diagnose { rest } => &rest.overrides,
    };
    let run = Run {
        cfg: resolve_config(&cli, rest)?,
        deterministic: cli.deterministic,
    };
    match &cli.command {
        Command::Ingest { input, output, .. } => ingest(&run, input, output.as_deref()),
        Command::Pretrain { .. } => {
            run.prepare("pretrain")?;
            let ds = run.dataset()?;
            run.pretrain(&ds).map(|_| ())
        }
        Command::Train { pretrain_first, .. } => train_cmd(&run, *pretrain_first),
        Command::Eval {
            checkpoint,
            split,
            all_paths,
            ..
        } => eval_cmd(&run, checkpoint.as_deref(), split, *all_paths),
        Command::Diagnose { .. } => diagnose(&run),
    }
}

fn ingest(run: &Run, input: &Path, output: Option<&Path>) -> Result<()> {
    let file = File::open(input).map_err(io_err(input))?;
    let log = parse_interactions(BufReader::new(file))?;
    let ds = build_sequences(&log, run.cfg.min_count, run.cfg.train.max_len)?;
    run.prepare("ingest")?;
    let target = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.out("dataset.bin"));
    save_dataset(&ds, &target)?;
    let s = ds.stats();
    println!("users\t{}", s.users);
    println!("items\t{}", s.items);
    println!("interactions\t{}", s.interactions);
    println!("avg_seq_len\t{:.4}", s.avg_seq_len);
    println!("sparsity\t{:.6}", s.sparsity);
    println!("wrote\t{}", target.display());
    Ok(())
}

fn report_both(
    run: &Run,
    net: &flame_core::backbone::NetworkParams<f32>,
    ds: &SequenceDataset,
) -> Result<()> {
    for (split, name) in [(Split::Valid, "valid"), (Split::Test, "test")] {
        let report = evaluate_network(net, ds, split, &run.eval_opts())?;
        write_file(&run.out(&format!("eval_{name}.csv")), &report.to_csv())?;
        print_report(name, &report);
    }
    Ok(())
}

fn print_report(name: &str, r: &MetricReport) {
    let cells: Vec<String> =
        r.ks.iter()
            .enumerate()
            .map(|(i, k)| format!("HR@{k} {:.4}  NDCG@{k} {:.4}", r.hr[i], r.ndcg[i]))
            .collect();
    println!("{name}: {}", cells.join("  "));
}

fn train_cmd(run: &Run, pretrain_first: bool) -> Result<()> {
    run.prepare("train")?;
    let ds = run.dataset()?;
    let cfg = &run.cfg.train;
    let frozen = if cfg.mode.needs_frozen() {
        Some(if pretrain_first {
            run.pretrain(&ds)?
        } else {
            run.frozen()?
        })
    } else {
        None
    };
    let outcome = run.train_logged(cfg, &ds, frozen.as_ref(), &run.out("metrics.csv"))?;
    outcome.best.save(&run.out("model.ckpt"))?;
    if let Some(p) = &outcome.partner {
        Checkpoint {
            params: p.clone(),
            meta: outcome.best.meta.clone(),
        }
        .save(&run.out("partner.ckpt"))?;
    }
    if let Some(csv) = partner_trace_csv(&outcome.trace) {
        write_file(&run.out("partner_metrics.csv"), &csv)?;
    }
    println!(
        "mode {}: best epoch {} of {}, val NDCG@20 {:.4}",
        cfg.mode,
        outcome.best_epoch(),
        outcome.trace.len(),
        outcome.best.meta.best_val_ndcg20
    );
    report_both(run, &outcome.best.params, &ds)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "valid" | "validation" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!(
            "unknown split {s:?} (expected valid or test)"
        ))),
    }
}

fn eval_cmd(run: &Run, checkpoint: Option<&Path>, split_name: &str, all_paths: bool) -> Result<()> {
    let split = parse_split(split_name)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.out("model.ckpt"));
    let ckpt = Checkpoint::load(&path)?;
    run.prepare("eval")?;
    let ds = run.dataset()?.with_max_len(ckpt.hyper().max_len)?;
    if ckpt.hyper().num_items != ds.num_items() {
        return Err(Error::Config(format!(
            "checkpoint scores {} items, dataset has {}",
            ckpt.hyper().num_items,
            ds.num_items()
        )));
    }
    let name = if split == Split::Valid {
        "valid"
    } else {
        "test"
    };
    let report = evaluate_network(&ckpt.params, &ds, split, &run.eval_opts())?;
    write_file(&run.out(&format!("eval_{name}.csv")), &report.to_csv())?;
    print_report(name, &report);
    if all_paths {
        let frozen = run.frozen()?;
        ckpt.check_compatible(frozen.hyper())?;
        let state = EnsembleState::new(frozen.params, ckpt.params, run.cfg.train.submodules)?;
        let pe = evaluate_paths(&state, &ds, split, &run.eval_opts())?;
        let mut csv = String::from("path,metric,k,value\n");
        for (label, r) in pe.labels().iter().zip(&pe.reports) {
            for line in r.to_csv().lines().skip(1) {
                csv.push_str(&format!("{label},{line}\n"));
            }
            print_report(label, r);
        }
        write_file(&run.out(&format!("eval_paths_{name}.csv")), &csv)?;
        write_file(&run.out(&format!("per_{name}.csv")), &pe.per_csv())?;
    }
    Ok(())
}

fn diagnose(run: &Run) -> Result<()> {
    run.prepare("diagnose")?;
    let ds = run.dataset()?;
    let opts = run.eval_opts();
    let frozen = if run.cfg.modes.iter().any(|m| m.needs_frozen()) {
        Some(match run.frozen() {
            Ok(f) => f,
            Err(Error::Config(_)) => run.pretrain(&ds)?,
            Err(e) => return Err(e),
        })
    } else {
        None
    };
    for &mode in &run.cfg.modes {
        let cfg = TrainConfig {
            mode,
            ..run.cfg.train.clone()
        };
        let name = mode.as_str();
        let trace_path = run.out(&format!("trace_{name}.csv"));
        let outcome = run.train_logged(
            &cfg,
            &ds,
            frozen.as_ref().filter(|_| mode.needs_frozen()),
            &trace_path,
        )?;
        // Rewrite in one piece so the file matches `trace_csv` exactly.
        write_file(&trace_path, &trace_csv(&outcome.trace))?;
        if let Some(csv) = partner_trace_csv(&outcome.trace) {
            write_file(&run.out(&format!("partner_trace_{name}.csv")), &csv)?;
        }
        let per_csv = match (mode, &outcome.partner, &frozen) {
            (Mode::EnsembleGuide | Mode::Flame, _, Some(f)) => {
                let state = EnsembleState::new(
                    f.params.clone(),
                    outcome.best.params.clone(),
                    cfg.submodules,
                )?;
                Some(evaluate_paths(&state, &ds, Split::Test, &opts)?.per_csv())
            }
            (_, Some(partner), _) => Some(pair_per(
                &outcome.best.params,
                partner,
                ["net_a", "net_b"],
                &ds,
                &opts,
            )?),
            (_, None, Some(f)) => Some(pair_per(
                &f.params,
                &outcome.best.params,
                ["frozen", name],
                &ds,
                &opts,
            )?),
            _ => None,
        };
        if let Some(csv) = per_csv {
            write_file(&run.out(&format!("per_{name}.csv")), &csv)?;
        }
        let test = evaluate_network(&outcome.best.params, &ds, Split::Test, &opts)?;
        print_report(&format!("{name} test"), &test);
    }
    Ok(())
}

fn pair_per(
    a: &flame_core::backbone::NetworkParams<f32>,
    b: &flame_core::backbone::NetworkParams<f32>,
    labels: [&str; 2],
    ds: &SequenceDataset,
    opts: &EvalOptions,
) -> Result<String> {
    let ra = evaluate_network(a, ds, Split::Test, opts)?;
    let rb = evaluate_network(b, ds, Split::Test, opts)?;
    let m = per_matrix(&[ra.hits(PER_K), rb.hits(PER_K)]);
    let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    Ok(per_matrix_csv(&labels, &m))
}
