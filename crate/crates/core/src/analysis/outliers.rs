use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, KVCache, TransformerModel};
use crate::taps::Capture;

/// Fewest values for which top-3 ≥ p90 is guaranteed with nearest-rank p90.
pub const MIN_VALUES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderStats {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    /// 90th percentile, nearest rank.
    pub p90: f64,
    pub median: f64,
}

impl OrderStats {
    pub fn is_ordered(&self) -> bool {
        self.top1 >= self.top2
            && self.top2 >= self.top3
            && self.top3 >= self.p90
            && self.p90 >= self.median
            && self.median >= 0.0
    }
}

/// Order statistics of `|values|`.
pub fn order_stats(values: &[f32]) -> Result<OrderStats> {
    if values.len() < MIN_VALUES {
        return Err(Error::contract(format!(
            "order statistics need at least {MIN_VALUES} values, got {}",
            values.len()
        )));
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.abs() as f64).collect();
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Numerical("NaN among activations".into()));
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = (0.9 * n as f64).ceil() as usize;
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Ok(OrderStats {
        top1: v[n - 1],
        top2: v[n - 2],
        top3: v[n - 3],
        p90: v[rank - 1],
        median,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSelection {
    Last,
    All,
    Layers(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        let out = match self {
            Self::Last => vec![n_layers - 1],
            Self::All => (0..n_layers).collect(),
            Self::Layers(l) => l.clone(),
        };
        if let Some(&bad) = out.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!("layer {bad} out of range for {n_layers} layers")));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOutliers {
    pub layer: usize,
    #[serde(flatten)]
    pub stats: OrderStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub layers: Vec<LayerOutliers>,
    pub samples: usize,
    pub seq_len: usize,
    pub prefix_len: usize,
    pub prefix: String,
}

impl OutlierReport {
    pub fn is_ordered(&self) -> bool {
        self.layers.iter().all(|l| l.stats.is_ordered())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["prefix", "layer", "top1", "top2", "top3", "p90", "median"])
            .map_err(csv_err)?;
        for l in &self.layers {
            let s = &l.stats;
            w.write_record([
                self.prefix.clone(),
                l.layer.to_string(),
                s.top1.to_string(),
                s.top2.to_string(),
                s.top3.to_string(),
                s.p90.to_string(),
                s.median.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Statistics of `|block input|` over content positions, per selected
/// layer, averaged over `texts`. `label` names the prefix in the report.
pub fn outlier_stats(
    model: &TransformerModel,
    texts: &[Vec<u32>],
    prefix: Option<&KVCache>,
    label: &str,
    selection: &LayerSelection,
) -> Result<OutlierReport> {
    if texts.is_empty() {
        return Err(Error::contract("outlier statistics need at least one text"));
    }
    let layers = selection.resolve(model.config.n_layers)?;
    let capture = Capture {
        residuals: true,
        ..Capture::NONE
    };
    let opts = ForwardOptions::default().with_prefix(prefix).with_capture(capture);
    let per_text: Vec<Vec<OrderStats>> = texts
        .par_iter()
        .map(|t| {
            let out = model.forward(t, &opts)?;
            layers
                .iter()
                .map(|&l| order_stats(out.taps.residuals[l].data()))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = texts.len() as f64;
    let layers = layers
        .iter()
        .enumerate()
        .map(|(i, &layer)| {
            let avg = |f: fn(&OrderStats) -> f64| per_text.iter().map(|s| f(&s[i])).sum::<f64>() / n;
            LayerOutliers {
                layer,
                stats: OrderStats {
                    top1: avg(|s| s.top1),
                    top2: avg(|s| s.top2),
                    top3: avg(|s| s.top3),
                    p90: avg(|s| s.p90),
                    median: avg(|s| s.median),
                },
            }
        })
        .collect();
    Ok(OutlierReport {
        layers,
        samples: texts.len(),
        seq_len: texts[0].len(),
        prefix_len: prefix.map_or(0, KVCache::len),
        prefix: label.to_string(),
    })
}
