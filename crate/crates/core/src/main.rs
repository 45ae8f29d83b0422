use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use textformer::engine::{
    evaluate, format_instances, render_overlay, Checkpoint, Pools, TrainConfig, Trainer,
};
use textformer::synth::{
    degrade_annotation, generate_sample, read_dataset, read_pgm, write_dataset, write_pgm,
    GenConfig, SupervisionKind,
};

#[derive(Parser)]
#[command(
    name = "textformer",
    version,
    about = "Desk-scale query-based text spotter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// full, text or weak.
        #[arg(long, default_value = "full")]
        kind: SupervisionKind,
        /// Image height and width.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        max_instances: usize,
    },
    /// Train from a JSON config and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print P, R, F, 1-NED and E2E-F on a fully annotated dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Detect and read text in one PGM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            count,
            seed,
            kind,
            size,
            max_instances,
        } => gen_data(&out, count, seed, kind, size, max_instances),
        Command::Train { config, out } => train(&config, &out),
        Command::Eval { ckpt, data } => eval(&ckpt, &data),
        Command::Infer {
            ckpt,
            image,
            out_prefix,
        } => infer(&ckpt, &image, &out_prefix),
    }
}

fn gen_data(
    out: &Path,
    count: usize,
    seed: u64,
    kind: SupervisionKind,
    size: usize,
    max_instances: usize,
) -> Result<()> {
    let config = GenConfig {
        height: size,
        width: size,
        max_instances,
        ..GenConfig::default()
    };
    let samples = (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            let sample = generate_sample(&config, s)?;
            degrade_annotation(&sample, kind, s)
        })
        .collect::<textformer::Result<Vec<_>>>()?;
    write_dataset(&samples, out)?;
    eprintln!(
        "wrote {count} {} samples to {}",
        kind.as_str(),
        out.display()
    );
    Ok(())
}

fn train(config_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let config: TrainConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", config_path.display()))?;
    let pools = Pools::load(&config)?;
    let every = config.checkpoint_every;
    let mut trainer = Trainer::new(config)?;
    trainer.run(&pools, |t, log| {
        let kinds: Vec<&str> = log.kinds.iter().map(|k| k.as_str()).collect();
        eprintln!(
            "iter {} lr {:.6} [{}] {} grad {:.4}",
            log.iteration,
            log.lr,
            kinds.join(","),
            log.loss,
            log.grad_norm
        );
        if every > 0 && t.iteration % every == 0 && !t.is_done() {
            t.checkpoint().save(out)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let model = checkpoint.model()?;
    let samples = read_dataset(data)?;
    if samples.iter().any(|s| s.kind() != SupervisionKind::Full) {
        bail!("{} contains samples without masks", data.display());
    }
    let m = evaluate(&model, &checkpoint.params, &samples)?;
    println!(
        "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
        m.det_precision, m.det_recall, m.det_f, m.one_minus_ned, m.e2e_f
    );
    Ok(())
}

fn infer(ckpt: &Path, image_path: &Path, prefix: &str) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let model = checkpoint.model()?;
    let image = read_pgm(image_path)?;
    let instances = model.infer(&checkpoint.params, &image)?;
    let overlay = PathBuf::from(format!("{prefix}.overlay.pgm"));
    write_pgm(&render_overlay(&image, &instances), &overlay)?;
    let txt = PathBuf::from(format!("{prefix}.txt"));
    fs::write(&txt, format_instances(&instances))
        .with_context(|| format!("writing {}", txt.display()))?;
    eprintln!(
        "{} instances; wrote {} and {}",
        instances.len(),
        overlay.display(),
        txt.display()
    );
    Ok(())
}
