use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{Container, ForwardOptions, KVCache, TransformerModel};
use crate::taps::Capture;
use crate::tensor::Tensor;

/// Running range of one tap.
#[derive(Clone, Debug, PartialEq)]
pub struct TapStats {
    pub min: f32,
    pub max: f32,
    /// Per-channel maximum magnitude (used for smoothing).
    pub absmax: Vec<f32>,
    pub observations: usize,
}

impl TapStats {
    pub fn from_tensor(x: &Tensor) -> Self {
        let (_, cols) = x.dims2();
        let mut s = Self {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            absmax: vec![0.0; cols],
            observations: 0,
        };
        s.update(x);
        s
    }

    /// Widens the range to cover `x`; min never increases, max never decreases.
    pub fn update(&mut self, x: &Tensor) {
        let (_, cols) = x.dims2();
        debug_assert_eq!(cols, self.absmax.len());
        for row in x.data().chunks(cols) {
            for (a, &v) in self.absmax.iter_mut().zip(row) {
                self.min = self.min.min(v);
                self.max = self.max.max(v);
                *a = a.max(v.abs());
            }
        }
        self.observations += 1;
    }

    pub fn merge(&mut self, other: &TapStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        for (a, &b) in self.absmax.iter_mut().zip(&other.absmax) {
            *a = a.max(b);
        }
        self.observations += other.observations;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationStats {
    pub taps: BTreeMap<String, TapStats>,
}

impl CalibrationStats {
    pub fn get(&self, tap: &str) -> Option<&TapStats> {
        self.taps.get(tap)
    }

    pub fn observe(&mut self, tap: &str, x: &Tensor) {
        match self.taps.get_mut(tap) {
            Some(s) => s.update(x),
            None => {
                self.taps.insert(tap.to_string(), TapStats::from_tensor(x));
            }
        }
    }

    pub fn merge(&mut self, other: &CalibrationStats) {
        for (name, s) in &other.taps {
            match self.taps.get_mut(name) {
                Some(mine) => mine.merge(s),
                None => {
                    self.taps.insert(name.clone(), s.clone());
                }
            }
        }
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::new();
        let mut observations = BTreeMap::new();
        for (name, s) in &self.taps {
            tensors.push((format!("{name}.range"), Tensor::from_parts(vec![2], vec![s.min, s.max])));
            tensors.push((format!("{name}.absmax"), Tensor::from_parts(vec![s.absmax.len()], s.absmax.clone())));
            observations.insert(name.clone(), s.observations);
        }
        Container {
            header: json!({
                "kind": "calibration",
                "taps": self.taps.keys().collect::<Vec<_>>(),
                "observations": observations,
            }),
            tensors,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        c.expect_kind("calibration")?;
        let names: Vec<String> = serde_json::from_value(c.header["taps"].clone())
            .map_err(|e| Error::Format(format!("bad tap list: {e}")))?;
        if c.tensors.len() != 2 * names.len() {
            return Err(Error::Format("calibration tensor count does not match tap list".into()));
        }
        let mut out = Self::default();
        for (name, pair) in names.iter().zip(c.tensors.chunks(2)) {
            let (rn, range) = &pair[0];
            let (an, absmax) = &pair[1];
            if *rn != format!("{name}.range") || *an != format!("{name}.absmax") || range.numel() != 2 {
                return Err(Error::Format(format!("malformed calibration entry for `{name}`")));
            }
            let (min, max) = (range.data()[0], range.data()[1]);
            if min > max || !min.is_finite() || !max.is_finite() {
                return Err(Error::Format(format!("calibration range for `{name}` is invalid")));
            }
            let observations = c.header["observations"][name].as_u64().unwrap_or(0) as usize;
            out.taps.insert(
                name.clone(),
                TapStats {
                    min,
                    max,
                    absmax: absmax.to_vec(),
                    observations,
                },
            );
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Running min/max of every quantization tap over full-precision forwards
/// of `sequences`, optionally conditioned on a cached prefix. Only content
/// rows are observed.
pub fn calibrate(model: &TransformerModel, sequences: &[Vec<u32>], prefix: Option<&KVCache>) -> Result<CalibrationStats> {
    if sequences.is_empty() {
        return Err(Error::contract("calibration needs at least one sequence"));
    }
    let mut stats = CalibrationStats::default();
    let opts = ForwardOptions::default().with_prefix(prefix).with_capture(Capture::TAPS);
    for seq in sequences {
        let out = model.forward(seq, &opts)?;
        for (name, x) in &out.taps.activations {
            stats.observe(name, x);
        }
    }
    Ok(stats)
}
