use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, KVCache, TransformerModel};
use crate::taps::{Capture, TapRecord};

use super::outliers::{csv_err, finish};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSink {
    pub layer: usize,
    pub head: usize,
    /// Mean over content queries of the mass on cached prefix columns.
    pub prefix_mass: f64,
    /// Mean over content queries of the mass on the first content position.
    pub first_content_mass: f64,
    /// Entropy (nats) of the query-averaged attention row.
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub prefix_len: usize,
    pub content_len: usize,
    pub heads: Vec<HeadSink>,
    /// Per-layer means over heads.
    pub layer_prefix_mass: Vec<f64>,
    pub mean_prefix_mass: f64,
    pub mean_first_content_mass: f64,
    /// `m / L`: the prefix share of all `L = m + n` columns.
    pub uniform_baseline: f64,
    /// Mean over queries of `m / (m + i + 1)`: the prefix mass of attention
    /// spread uniformly over each query's visible columns.
    pub causal_uniform_baseline: f64,
}

impl SinkReport {
    pub fn masses_in_range(&self) -> bool {
        let ok = |x: f64| (-1e-9..=1.0 + 1e-5).contains(&x);
        self.heads
            .iter()
            .all(|h| ok(h.prefix_mass) && ok(h.first_content_mass) && h.prefix_mass + h.first_content_mass <= 1.0 + 1e-5)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["prefix_len", "layer", "head", "prefix_mass", "first_content_mass", "entropy"])
            .map_err(csv_err)?;
        for h in &self.heads {
            w.write_record([
                self.prefix_len.to_string(),
                h.layer.to_string(),
                h.head.to_string(),
                h.prefix_mass.to_string(),
                h.first_content_mass.to_string(),
                h.entropy.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

/// Largest deviation of any captured attention row's sum from 1.
pub fn max_row_sum_error(record: &TapRecord) -> f64 {
    let mut worst = 0.0f64;
    for layer in &record.attention {
        for head in layer {
            let (rows, cols) = head.dims2();
            for r in 0..rows {
                let s: f64 = head.data()[r * cols..(r + 1) * cols].iter().map(|&x| x as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    worst
}

/// Sink statistics from a captured record. Rows before `content_start`
/// are literal prefix tokens and are skipped as queries; they count as
/// prefix columns along with the cached ones.
pub fn sink_stats(record: &TapRecord) -> Result<SinkReport> {
    if record.attention.is_empty() {
        return Err(Error::contract("record holds no attention maps"));
    }
    let m = record.prefix_len + record.content_start;
    let mut heads = Vec::new();
    let mut layer_prefix_mass = Vec::new();
    let mut n = 0;
    for (layer, maps) in record.attention.iter().enumerate() {
        let mut layer_sum = 0.0;
        for (head, a) in maps.iter().enumerate() {
            let (rows, cols) = a.dims2();
            n = rows - record.content_start;
            if n == 0 {
                return Err(Error::contract("record has no content queries"));
            }
            let mut avg = vec![0.0f64; cols];
            let (mut pm, mut fm) = (0.0, 0.0);
            for r in record.content_start..rows {
                let row = &a.data()[r * cols..(r + 1) * cols];
                pm += row[..m].iter().map(|&x| x as f64).sum::<f64>();
                fm += row[m] as f64;
                avg.iter_mut().zip(row).for_each(|(s, &x)| *s += x as f64);
            }
            let total: f64 = avg.iter().sum();
            let entropy = avg
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| {
                    let p = p / total;
                    -p * p.ln()
                })
                .sum();
            let h = HeadSink {
                layer,
                head,
                prefix_mass: pm / n as f64,
                first_content_mass: fm / n as f64,
                entropy,
            };
            layer_sum += h.prefix_mass;
            heads.push(h);
        }
        layer_prefix_mass.push(layer_sum / maps.len() as f64);
    }
    let count = heads.len() as f64;
    Ok(SinkReport {
        prefix_len: m,
        content_len: n,
        mean_prefix_mass: heads.iter().map(|h| h.prefix_mass).sum::<f64>() / count,
        mean_first_content_mass: heads.iter().map(|h| h.first_content_mass).sum::<f64>() / count,
        heads,
        layer_prefix_mass,
        uniform_baseline: m as f64 / (m + n) as f64,
        causal_uniform_baseline: (0..n).map(|i| m as f64 / (m + i + 1) as f64).sum::<f64>() / n as f64,
    })
}

/// Captures attention for `text` after `prefix` and summarizes it.
pub fn sink_report(model: &TransformerModel, text: &[u32], prefix: Option<&KVCache>) -> Result<(SinkReport, TapRecord)> {
    let capture = Capture {
        attention: true,
        ..Capture::NONE
    };
    let out = model.forward(text, &ForwardOptions::default().with_prefix(prefix).with_capture(capture))?;
    Ok((sink_stats(&out.taps)?, out.taps))
}

/// `rows × cols` attention of one layer, for one head or averaged over heads.
pub fn attention_map(record: &TapRecord, layer: usize, head: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let maps = record
        .attention
        .get(layer)
        .ok_or_else(|| Error::contract(format!("no attention captured for layer {layer}")))?;
    let picked: Vec<_> = match head {
        Some(h) => vec![maps.get(h).ok_or_else(|| Error::contract(format!("no head {h}")))?],
        None => maps.iter().collect(),
    };
    let (rows, cols) = picked[0].dims2();
    let k = picked.len() as f64;
    Ok((0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| picked.iter().map(|a| a.data()[r * cols + c] as f64).sum::<f64>() / k)
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn uniform_record(m: usize, n: usize) -> TapRecord {
        // Every query spreads evenly over all m + n columns (not causal, but
        // the uniform case the baseline describes).
        let l = m + n;
        let a = Tensor::full(&[n, l], 1.0 / l as f32);
        TapRecord {
            attention: vec![vec![a.clone(), a]],
            prefix_len: m,
            ..TapRecord::default()
        }
    }

    #[test]
    fn uniform_attention_gives_m_over_l() {
        let r = sink_stats(&uniform_record(3, 9)).unwrap();
        assert!((r.mean_prefix_mass - 0.25).abs() < 1e-6);
        assert!((r.uniform_baseline - 0.25).abs() < 1e-12);
        assert!((r.heads[0].entropy - (12f64).ln()).abs() < 1e-6);
        assert!(r.masses_in_range());
    }

    #[test]
    fn no_prefix_has_zero_mass() {
        let r = sink_stats(&uniform_record(0, 5)).unwrap();
        assert_eq!(r.mean_prefix_mass, 0.0);
        assert_eq!(r.uniform_baseline, 0.0);
    }

    #[test]
    fn head_average() {
        let rec = uniform_record(1, 3);
        let avg = attention_map(&rec, 0, None).unwrap();
        assert_eq!(avg.len(), 3);
        assert!((avg[0][0] - 0.25).abs() < 1e-7);
        assert!(attention_map(&rec, 1, None).is_err());
        assert!(attention_map(&rec, 0, Some(2)).is_err());
    }
}
