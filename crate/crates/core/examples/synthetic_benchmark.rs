//! Trains a static-LN and a DLN stack on the synthetic corpus and reports
//! held-out-speaker frame error rates.
//!
//! cargo run --release -p dln-core --example synthetic_benchmark -- [epochs] [seed] [lambda]

use std::time::Instant;

use dln::data::{cluster_purity, export_summaries, gen_synthetic, modal_frequency, Batch, SyntheticSpec, Utterance};
use dln::train::{batch_summary_variance, frame_error_rate, init_model, train};
use dln::{StackConfig, StackModel, TrainConfig};

fn mean_summary_variance(model: &StackModel, data: &[Utterance]) -> dln::Result<f64> {
    let mut total = 0.0;
    let chunks: Vec<&[Utterance]> = data.chunks(16).collect();
    for chunk in &chunks {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        total += batch_summary_variance(model, &Batch::from_utterances(&refs)?)?;
    }
    Ok(total / chunks.len() as f64)
}

fn report_purity(model: &StackModel, data: &[Utterance], label: &str) -> dln::Result<()> {
    let speakers: std::collections::BTreeSet<&str> = data.iter().map(|u| u.speaker.as_str()).collect();
    let layers: Vec<usize> = (1..=model.config().num_layers).collect();
    let records = export_summaries(model, data, &layers)?;
    let labels: Vec<&str> = data.iter().map(|u| u.speaker.as_str()).collect();
    print!("  purity[{label}] chance {:.3}", modal_frequency(&labels));
    for &l in &layers {
        for dir in ["fwd", "bwd"] {
            let pts: Vec<Vec<f64>> = records
                .iter()
                .filter(|r| r.layer == l && r.direction.tag() == dir)
                .map(|r| r.values.clone())
                .collect();
            print!("  L{l}{dir} {:.3}", cluster_purity(&pts, &labels, speakers.len(), 1)?);
        }
    }
    println!();
    Ok(())
}

fn main() -> dln::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or(8, |s| s.parse().unwrap());
    let seed = args.get(2).map_or(1, |s| s.parse().unwrap());
    let lambda = args.get(3).map_or(1.0, |s| s.parse().unwrap());

    let corpus = gen_synthetic(&SyntheticSpec::default())?;
    let held_out: Vec<Utterance> = corpus.dev.iter().chain(&corpus.test).cloned().collect();
    println!(
        "train {} utts, dev {}, test {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len()
    );
    for dln in [false, true] {
        let cfg = StackConfig {
            num_layers: 2,
            cell_size: 32,
            proj_size: 16,
            input_dim: 16,
            num_classes: 8,
            dln,
            summary_size: 8,
            lambda: if dln { lambda } else { 0.0 },
            ..Default::default()
        };
        let model = init_model(cfg, seed)?;
        let var0 = if dln { Some(mean_summary_variance(&model, &corpus.train)?) } else { None };
        let tc = TrainConfig { epochs, seed, ..Default::default() };
        let start = Instant::now();
        let out = train(model, &corpus.train, &corpus.dev, &tc, |m| {
            println!("  dln={dln} {}  ({:.1}s)", m.log_line(false), m.wall_secs)
        })?;
        let fer = frame_error_rate(&out.best, &held_out, 16)?;
        println!(
            "dln={dln}: best epoch {}, held-out FER {fer:.2}%, {:.1}s",
            out.best_epoch,
            start.elapsed().as_secs_f64()
        );
        if let Some(v0) = var0 {
            println!("  summary variance init {v0:.6} best {:.6}", mean_summary_variance(&out.best, &corpus.train)?);
            report_purity(&out.best, &corpus.train, "train")?;
            report_purity(&out.best, &held_out, "held-out")?;
        }
    }
    Ok(())
}
