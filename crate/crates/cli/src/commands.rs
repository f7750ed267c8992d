//! One function per subcommand.

use std::fs::{self, OpenOptions};
use std::path::Path;

use anyhow::{bail, Context, Result};
use l2gnet::bench::{run_bench, scaling_slopes, BenchConfig};
use l2gnet::data::{generate, load_dataset, save_dataset, GenConfig, SegDataset};
use l2gnet::l2gmapper::position_weights;
use l2gnet::metrics::Summary;
use l2gnet::numerics::{Rng, Tensor};
use l2gnet::segmodel::{argmax_classes, evaluate, model_from_checkpoint, Checkpoint, EpochRecord, SegModel, Trainer};

use crate::config::RunConfig;
use crate::gradcheck::{run_suite, Scale};
use crate::Outcome;

pub const CHECKPOINT_FILE: &str = "checkpoint.l2gc";
pub const LOG_FILE: &str = "train_log.csv";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

fn fmt_val(v: Option<f64>, have_val: bool) -> String {
    if have_val {
        fmt_opt(v)
    } else {
        "-".to_string()
    }
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

fn load(path: &Path) -> Result<SegDataset> {
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    ds.validate()?;
    Ok(ds)
}

fn load_model(path: &Path) -> Result<SegModel> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model_from_checkpoint(&ckpt)?)
}

pub fn gen_data(
    classes: usize,
    count: usize,
    hw: usize,
    channels: usize,
    seed: u64,
    difficulty: f64,
    out: &Path,
) -> Result<Outcome> {
    let cfg = GenConfig {
        classes,
        count,
        height: hw,
        width: hw,
        channels,
        difficulty,
        seed,
    };
    let split = out
        .file_stem()
        .and_then(|s| s.to_str())
        .context("output path needs a file name")?;
    let ds = generate(&cfg, split)?;
    save_dataset(&ds, out).with_context(|| format!("writing {}", out.display()))?;
    let m = &ds.manifest;
    println!(
        "wrote {} samples to {}: split {}, {}×{}×{}, {} classes, seed {}",
        ds.len(),
        out.display(),
        m.split,
        m.channels,
        m.height,
        m.width,
        m.classes,
        m.seed
    );
    let total = (ds.len() * m.height * m.width) as f64;
    for c in 0..m.classes {
        let px = ds.samples.iter().map(|s| s.labels.iter().filter(|&&l| l as usize == c).count()).sum::<usize>();
        let present = ds.samples.iter().filter(|s| s.labels.contains(&(c as u8))).count();
        println!("  class {c}: {:.1}% of pixels, present in {present}/{}", 100.0 * px as f64 / total, ds.len());
    }
    Ok(Outcome::Success)
}

fn log_writer(path: &Path, append: bool) -> Result<csv::Writer<fs::File>> {
    let existing = append && path.is_file();
    let file = if existing {
        OpenOptions::new().append(true).open(path)?
    } else {
        fs::File::create(path)?
    };
    Ok(csv::WriterBuilder::new().has_headers(!existing).from_writer(file))
}

pub fn train(config: &Path, resume: Option<&Path>, deterministic: bool) -> Result<Outcome> {
    let cfg = RunConfig::load(config)?;
    let train_ds = load(&cfg.train_data)?;
    let val_ds = cfg.val_data.as_deref().map(load).transpose()?;
    let mut tc = cfg.train_config();
    tc.deterministic |= deterministic;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let ckpt_path = cfg.output_dir.join(CHECKPOINT_FILE);
    let log_path = cfg.output_dir.join(LOG_FILE);

    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            if ckpt.header.model != cfg.model {
                bail!("checkpoint {} was trained with a different model config", p.display());
            }
            if ckpt.header.optimizer != tc.optimizer {
                bail!("checkpoint optimizer {:?} differs from config {:?}", ckpt.header.optimizer, tc.optimizer);
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.config = tc;
            t
        }
        None => {
            let mut rng = Rng::seeded(cfg.seed);
            let model = SegModel::new(cfg.model.clone(), &mut rng)?;
            Trainer::new(model, tc, rng, &train_ds)?
        }
    };

    let mut log = log_writer(&log_path, resume.is_some())?;
    let mut last: Option<EpochRecord> = None;
    for _ in 0..cfg.epochs {
        let rec = trainer.run_epoch(&train_ds, val_ds.as_ref())?;
        log.serialize(&rec)?;
        log.flush()?;
        trainer.checkpoint()?.save(&ckpt_path)?;
        println!(
            "epoch {:>3}  loss {:.5}  val DSC {}  val HD {}  {:.1}s",
            rec.epoch,
            rec.train_loss,
            fmt_val(rec.val_dsc_mean, val_ds.is_some()),
            fmt_val(rec.val_hd_mean, val_ds.is_some()),
            rec.wall_seconds
        );
        last = Some(rec);
    }
    if let Some(r) = last {
        println!(
            "final epoch {}: val DSC {}, val HD{} {}",
            r.epoch,
            fmt_val(r.val_dsc_mean, val_ds.is_some()),
            cfg.percentile,
            fmt_val(r.val_hd_mean, val_ds.is_some())
        );
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(Outcome::Success)
}

/// Prints the mean DSC, mean HD and class-wise DSC columns.
pub fn print_table(summary: &Summary, percentile: f64) {
    let classes: Vec<String> = (1..=summary.class_dsc.len()).map(|c| format!("class {c}")).collect();
    println!("{:<10}| {:>8} | {:>8} | {}", "", "DSC(↑)", format!("HD{percentile}(↓)"), classes.join(" | "));
    let dsc: Vec<String> = summary.class_dsc.iter().map(|d| format!("{:>7.2}", 100.0 * d)).collect();
    println!("{:<10}| {:>8.2} | {:>8} | {}", "DSC", 100.0 * summary.mean_dsc, fmt_opt(summary.mean_hd), dsc.join(" | "));
    let hd: Vec<String> = summary.class_hd.iter().map(|&h| format!("{:>7}", fmt_opt(h))).collect();
    println!("{:<10}| {:>8} | {:>8} | {}", "HD", "", "", hd.join(" | "));
    if summary.hd_undefined > 0 {
        println!("{} class entries had an empty mask; HD undefined there", summary.hd_undefined);
    }
}

pub fn write_metrics_csv(summary: &Summary, path: &Path) -> Result<()> {
    let k = summary.class_dsc.len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample".to_string(), "mean_dsc".into(), "mean_hd".into()];
    header.extend((1..=k).map(|c| format!("dsc_{c}")));
    header.extend((1..=k).map(|c| format!("hd_{c}")));
    w.write_record(&header)?;
    for (i, r) in summary.per_sample.iter().enumerate() {
        let mut row = vec![i.to_string(), r.mean_dsc().to_string(), csv_opt(r.mean_hd())];
        row.extend(r.dsc.iter().map(f64::to_string));
        row.extend(r.hd.iter().map(|&h| csv_opt(h)));
        w.write_record(&row)?;
    }
    let mut row = vec!["mean".to_string(), summary.mean_dsc.to_string(), csv_opt(summary.mean_hd)];
    row.extend(summary.class_dsc.iter().map(f64::to_string));
    row.extend(summary.class_hd.iter().map(|&h| csv_opt(h)));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, percentile: f64, out: Option<&Path>, deterministic: bool) -> Result<Outcome> {
    let model = load_model(ckpt)?;
    let ds = load(data)?;
    let (summary, _) = evaluate(&model, &ds, percentile, deterministic)?;
    print_table(&summary, percentile);
    if let Some(p) = out {
        write_metrics_csv(&summary, p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Outcome::Success)
}

pub fn gradcheck(scale: Scale, seed: u64, inject_fault: bool) -> Result<Outcome> {
    let groups = run_suite(scale, seed, inject_fault)?;
    let mut ok = true;
    for g in &groups {
        let status = if g.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<11} params {:>3}  max rel err {:.3e}  (tolerance {:.0e})",
            g.group,
            g.report.params.len(),
            g.report.max_rel_err(),
            g.tolerance
        );
        for p in g.report.params.iter().filter(|p| !p.passed) {
            println!("     {}: max rel err {:.3e}", p.name, p.max_rel_err);
        }
        ok &= g.passed();
    }
    Ok(if ok { Outcome::Success } else { Outcome::CheckFailed })
}

fn write_matrix(t: &Tensor, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    let cols = t.shape().last().copied().unwrap_or(1);
    for row in t.data().chunks(cols) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn inspect(ckpt: &Path, data: &Path, sample: usize, out: &Path) -> Result<Outcome> {
    let model = load_model(ckpt)?;
    let ds = load(data)?;
    let Some(s) = ds.samples.get(sample) else {
        bail!("sample {sample} out of range; dataset has {}", ds.len());
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let fwd = model.forward(&s.image)?;
    let cfg = &model.config;
    let n = cfg.codes();
    for (r, plan) in fwd.plans.iter().enumerate() {
        write_matrix(plan, &out.join(format!("plan_ref{r}.csv")))?;
        let rows = plan.row_sums();
        let (lo, hi) = rows.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "ref {r}: {n}×{} plan, row sums in [{lo:.3e}, {hi:.3e}] (target {:.3e}), residual {:.2e}",
            cfg.bins,
            1.0 / n as f64,
            fwd.diagnostics.transport_residuals[r]
        );
    }
    write_matrix(&position_weights(n, cfg.bins, cfg.sigma_pos)?, &out.join("positions.csv"))?;
    let mut w = csv::Writer::from_path(out.join("usage.csv"))?;
    w.write_record(["code", "count"])?;
    for (k, c) in fwd.diagnostics.code_usage.iter().enumerate() {
        w.write_record([k.to_string(), c.to_string()])?;
    }
    w.flush()?;
    let used = fwd.diagnostics.code_usage.iter().filter(|&&c| c > 0).count();
    println!("codes used: {used}/{} over {n} positions", cfg.codebook_size);
    let pred = argmax_classes(&fwd.logits)?;
    let grid = Tensor::new(&[cfg.height, cfg.width], pred.iter().map(|&p| p as f64).collect())?;
    write_matrix(&grid, &out.join("prediction.csv"))?;
    println!("wrote plans, positions, usage and prediction to {}", out.display());
    Ok(Outcome::Success)
}

pub fn bench(cfg: &BenchConfig, out: Option<&Path>) -> Result<Outcome> {
    let rows = run_bench(cfg)?;
    println!("{:>7} {:>4} {:>8} {:>6} {:>12} {:>12}", "n", "t", "eps", "iters", "seconds", "residual");
    for r in &rows {
        println!(
            "{:>7} {:>4} {:>8} {:>6} {:>12.4e} {:>12.3e}",
            r.n, r.t, r.epsilon, r.iterations, r.seconds, r.marginal_residual
        );
    }
    for (t, eps, it, slope) in scaling_slopes(&rows)? {
        println!("log-log slope of time in n (t {t}, eps {eps}, iters {it}): {slope:.3}");
    }
    if let Some(p) = out {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(Outcome::Success)
}
