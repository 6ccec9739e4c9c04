use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::recurrent::{Direction, StackModel};

use super::{Batch, Utterance};

/// One utterance summary of one layer and direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    /// 1-based layer index.
    pub layer: usize,
    pub direction: Direction,
    pub values: Vec<f64>,
}

const BATCH: usize = 16;

/// Summaries of the requested (1-based) `layers` for every utterance, in
/// dataset order, then layer, then forward before backward.
pub fn export_summaries(model: &StackModel, dataset: &[Utterance], layers: &[usize]) -> Result<Vec<SummaryRecord>> {
    if !model.config().dln {
        return Err(Error::DlnDisabled);
    }
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > model.config().num_layers) {
        return Err(Error::InvalidArgument(format!(
            "layer {l} outside 1..={}",
            model.config().num_layers
        )));
    }
    let mut records = Vec::with_capacity(dataset.len() * layers.len() * 2);
    for chunk in dataset.chunks(BATCH) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let batch = Batch::from_utterances(&refs)?;
        let out = model.forward(&batch)?;
        for (b, u) in chunk.iter().enumerate() {
            for &l in layers {
                for (dir, s) in Direction::BOTH.iter().zip(&out.summaries[l - 1]) {
                    records.push(SummaryRecord {
                        utterance_id: u.id.clone(),
                        speaker_id: u.speaker.clone(),
                        layer: l,
                        direction: *dir,
                        values: s.row(b).to_vec(),
                    });
                }
            }
        }
    }
    Ok(records)
}

/// Tab-separated: a header line, then
/// `utterance, speaker, layer, direction, a_0 … a_{p'-1}` per record.
pub fn write_summaries(records: &[SummaryRecord], mut out: impl Write) -> Result<()> {
    let width = records.first().map_or(0, |r| r.values.len());
    let mut header = String::from("utterance\tspeaker\tlayer\tdirection");
    for i in 0..width {
        let _ = write!(header, "\ta{i}");
    }
    writeln!(out, "{header}")?;
    for r in records {
        let mut line = format!("{}\t{}\t{}\t{}", r.utterance_id, r.speaker_id, r.layer, r.direction.tag());
        for v in &r.values {
            let _ = write!(line, "\t{v:.9e}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_summaries(input: impl BufRead) -> Result<Vec<SummaryRecord>> {
    let bad = |n: usize, what: &str| Error::CorruptContainer(format!("summary line {n}: {what}"));
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(bad(n + 1, "too few fields"));
        }
        records.push(SummaryRecord {
            utterance_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            layer: fields[2].parse().map_err(|_| bad(n + 1, "layer"))?,
            direction: Direction::from_tag(fields[3]).ok_or_else(|| bad(n + 1, "direction"))?,
            values: fields[4..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad(n + 1, "value")))
                .collect::<Result<_>>()?,
        });
    }
    Ok(records)
}
