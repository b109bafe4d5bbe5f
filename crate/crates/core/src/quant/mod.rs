//! Linear fake quantization.
//!
//! `q(x) = s · clamp(round((x − z) / s), qmin, qmax) + z`, with ties rounded
//! to even. Asymmetric specs use `s = (max − min) / (2^N − 1)`, `z = min` and
//! the grid `0..=2^N − 1`; symmetric specs use `s = max|x| / (2^(N−1) − 1)`,
//! `z = 0` and the grid `±(2^(N−1) − 1)`. A degenerate range (all values
//! equal, or all zero for symmetric) falls back to `s = 1`, `z = min`, which
//! reproduces constant tensors exactly.
//!
//! Tensors are viewed as `rows × cols` matrices (rows are token positions,
//! columns are channels). Granularity decides which elements share a
//! `(scale, zero)` pair: the whole tensor, one row, or one contiguous group
//! of `group_size` columns within a row.

mod calibrate;
mod smooth;

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::taps::TapRecord;
use crate::tensor::Tensor;

pub use calibrate::{calibrate, CalibrationStats, TapStats};
pub use smooth::{smooth_migrate, smooth_migrate_shared, SMOOTH_ABSMAX_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannelGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeMode {
    Static,
    Dynamic,
}

pub const DEFAULT_GROUP_SIZE: usize = 128;

fn default_group_size() -> usize {
    DEFAULT_GROUP_SIZE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u32,
    pub symmetry: Symmetry,
    pub granularity: Granularity,
    /// Columns per group for [`Granularity::PerChannelGroup`]; clamped to
    /// the channel count of narrower tensors.
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    pub range: RangeMode,
}

impl QuantSpec {
    pub fn new(bits: u32, symmetry: Symmetry, granularity: Granularity, range: RangeMode) -> Self {
        Self {
            bits,
            symmetry,
            granularity,
            group_size: DEFAULT_GROUP_SIZE,
            range,
        }
    }

    /// Asymmetric per-tensor activation quantization with calibrated ranges.
    pub fn per_tensor_static(bits: u32) -> Self {
        Self::new(bits, Symmetry::Asymmetric, Granularity::PerTensor, RangeMode::Static)
    }

    pub fn per_tensor_dynamic(bits: u32) -> Self {
        Self::new(bits, Symmetry::Asymmetric, Granularity::PerTensor, RangeMode::Dynamic)
    }

    pub fn per_token_dynamic(bits: u32) -> Self {
        Self::new(bits, Symmetry::Asymmetric, Granularity::PerToken, RangeMode::Dynamic)
    }

    /// Symmetric group-wise weight quantization (group of 128 input channels
    /// per output channel).
    pub fn weight_groupwise(bits: u32) -> Self {
        Self::new(bits, Symmetry::Symmetric, Granularity::PerChannelGroup, RangeMode::Dynamic)
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=24).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in 2..=24, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        if self.range == RangeMode::Static && self.granularity != Granularity::PerTensor {
            return Err(Error::Config(
                "static ranges are only defined for per-tensor granularity".into(),
            ));
        }
        Ok(())
    }

    /// Integer grid bounds `(qmin, qmax)`.
    pub fn grid(&self) -> (f64, f64) {
        match self.symmetry {
            Symmetry::Symmetric => {
                let h = ((1u64 << (self.bits - 1)) - 1) as f64;
                (-h, h)
            }
            Symmetry::Asymmetric => (0.0, ((1u64 << self.bits) - 1) as f64),
        }
    }

    /// `(scale, zero)` for values spanning `[min, max]`.
    pub fn params_from_range(&self, min: f32, max: f32) -> (f32, f32) {
        match self.symmetry {
            Symmetry::Asymmetric => {
                if max > min {
                    let levels = ((1u64 << self.bits) - 1) as f64;
                    (((max as f64 - min as f64) / levels) as f32, min)
                } else {
                    (1.0, min)
                }
            }
            Symmetry::Symmetric => {
                let absmax = min.abs().max(max.abs());
                if absmax > 0.0 {
                    let levels = ((1u64 << (self.bits - 1)) - 1) as f64;
                    ((absmax as f64 / levels) as f32, 0.0)
                } else {
                    (1.0, min)
                }
            }
        }
    }

    fn group_for(&self, cols: usize) -> Result<usize> {
        let g = self.group_size.min(cols);
        if cols % g != 0 {
            return Err(Error::contract(format!(
                "group size {g} does not divide channel dimension {cols}"
            )));
        }
        Ok(g)
    }
}

/// Resolved `(scale, zero)` pairs, one per quantization unit.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    pub granularity: Granularity,
    /// Effective group width (only meaningful for per-channel-group).
    pub group: usize,
    pub scale: Vec<f32>,
    pub zero: Vec<f32>,
    qmin: f64,
    qmax: f64,
}

impl QuantParams {
    fn unit(&self, row: usize, col: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerToken => row,
            Granularity::PerChannelGroup => row * (cols / self.group) + col / self.group,
        }
    }

    pub fn grid(&self) -> (f64, f64) {
        (self.qmin, self.qmax)
    }
}

/// Resolves quantization parameters for `x`.
///
/// Dynamic mode reads ranges from `x` itself at the spec's granularity;
/// static mode reads the per-tensor range from calibration `stats`.
pub fn resolve_params(x: &Tensor, spec: &QuantSpec, stats: Option<&TapStats>) -> Result<QuantParams> {
    spec.validate()?;
    let (rows, cols) = x.dims2();
    let (qmin, qmax) = spec.grid();
    let mut params = QuantParams {
        granularity: spec.granularity,
        group: cols,
        scale: Vec::new(),
        zero: Vec::new(),
        qmin,
        qmax,
    };
    let mut push = |min: f32, max: f32| {
        let (s, z) = spec.params_from_range(min, max);
        params.scale.push(s);
        params.zero.push(z);
    };
    let range = |vals: &mut dyn Iterator<Item = f32>| {
        vals.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    match spec.range {
        RangeMode::Static => {
            let st = stats.ok_or_else(|| Error::CalibrationMissing(String::new()))?;
            push(st.min, st.max);
        }
        RangeMode::Dynamic => match spec.granularity {
            Granularity::PerTensor => {
                let (lo, hi) = range(&mut x.data().iter().copied());
                push(lo, hi);
            }
            Granularity::PerToken => {
                for r in 0..rows {
                    let (lo, hi) = range(&mut x.row(r).iter().copied());
                    push(lo, hi);
                }
            }
            Granularity::PerChannelGroup => {
                let g = spec.group_for(cols)?;
                for r in 0..rows {
                    for chunk in x.row(r).chunks(g) {
                        let (lo, hi) = range(&mut chunk.iter().copied());
                        push(lo, hi);
                    }
                }
                params.group = g;
            }
        },
    }
    Ok(params)
}

/// Fake-quantizes `x` and reports which elements fell inside the grid
/// before clamping.
pub fn fake_quant_masked(x: &Tensor, params: &QuantParams) -> (Tensor, Vec<bool>) {
    let (_, cols) = x.dims2();
    let mut out = Vec::with_capacity(x.numel());
    let mut mask = Vec::with_capacity(x.numel());
    for (i, &v) in x.data().iter().enumerate() {
        let u = params.unit(i / cols, i % cols, cols);
        let s = params.scale[u] as f64;
        let z = params.zero[u] as f64;
        let k = ((v as f64 - z) / s).round_ties_even();
        let inside = k >= params.qmin && k <= params.qmax;
        let k = k.clamp(params.qmin, params.qmax);
        out.push((s * k + z) as f32);
        mask.push(inside);
    }
    (Tensor::from_parts(x.shape().to_vec(), out), mask)
}

pub fn fake_quant(x: &Tensor, params: &QuantParams) -> Tensor {
    fake_quant_masked(x, params).0
}

/// Squared quantization error summed over a set of taps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantErrorSum {
    pub total: f64,
    pub per_tap: Vec<(String, f64)>,
    /// Set when there was nothing to measure; `total` is then zero.
    pub empty: bool,
}

fn tap_error(name: &str, x: &Tensor, spec: &QuantSpec, stats: Option<&CalibrationStats>) -> Result<f64> {
    let tap_stats = stats.and_then(|s| s.get(name));
    let params = resolve_params(x, spec, tap_stats).map_err(|e| match e {
        Error::CalibrationMissing(_) => Error::CalibrationMissing(name.to_string()),
        e => e,
    })?;
    let q = fake_quant(x, &params);
    Ok(x.data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

fn error_over(
    taps: &[(String, Tensor)],
    spec: &QuantSpec,
    stats: Option<&CalibrationStats>,
) -> Result<QuantErrorSum> {
    if taps.is_empty() {
        log::warn!("quantization error requested over an empty tap record");
        return Ok(QuantErrorSum {
            total: 0.0,
            per_tap: Vec::new(),
            empty: true,
        });
    }
    let mut per_tap = Vec::with_capacity(taps.len());
    let mut total = 0.0;
    for (name, x) in taps {
        let e = tap_error(name, x, spec, stats)?;
        total += e;
        per_tap.push((name.clone(), e));
    }
    Ok(QuantErrorSum {
        total,
        per_tap,
        empty: false,
    })
}

/// `Σ_taps ‖X − q(X)‖²` over every captured row.
pub fn quant_error(
    taps: &TapRecord,
    spec: &QuantSpec,
    stats: Option<&CalibrationStats>,
) -> Result<QuantErrorSum> {
    error_over(&taps.activations, spec, stats)
}

/// Quantization error over content positions only, with ranges resolved
/// from those positions alone. Rows recorded for literal prefix tokens are
/// dropped before anything is measured; a cached prefix contributes no rows
/// in the first place.
pub fn conditional_quant_error(
    taps: &TapRecord,
    spec: &QuantSpec,
    stats: Option<&CalibrationStats>,
) -> Result<QuantErrorSum> {
    if taps.content_start == 0 {
        return quant_error(taps, spec, stats);
    }
    let mut content = Vec::with_capacity(taps.activations.len());
    for (name, x) in &taps.activations {
        let rows = x.dims2().0;
        if taps.content_start >= rows {
            return Err(Error::contract(format!(
                "tap `{name}` has no content positions ({rows} rows, content starts at {})",
                taps.content_start
            )));
        }
        content.push((name.clone(), x.slice_rows(taps.content_start, rows)?));
    }
    error_over(&content, spec, stats)
}

/// Hook applied to every tapped activation inside a forward pass.
pub trait ActivationQuantizer: Sync {
    /// Returns the quantized stand-in for `x`. Rows before `content_start`
    /// belong to literal prefix tokens and do not shape dynamic ranges.
    fn quantize(&self, g: &mut Graph, tap: &str, x: Var, content_start: usize) -> Result<Var>;
}

/// Fake quantization with stop-gradient parameters and a straight-through
/// rounding estimator: the backward pass is the identity on in-range
/// elements and zero on clamped ones.
#[derive(Clone, Debug)]
pub struct FakeQuantizer {
    pub spec: QuantSpec,
    pub stats: Option<CalibrationStats>,
}

impl FakeQuantizer {
    pub fn new(spec: QuantSpec, stats: Option<CalibrationStats>) -> Result<Self> {
        spec.validate()?;
        if spec.range == RangeMode::Static && stats.is_none() {
            return Err(Error::CalibrationMissing("<all taps>".into()));
        }
        Ok(Self { spec, stats })
    }

    pub fn dynamic(spec: QuantSpec) -> Result<Self> {
        Self::new(spec, None)
    }

    /// Parameters for `x`, with per-tensor ranges taken from content rows.
    pub fn params_for(&self, tap: &str, x: &Tensor, content_start: usize) -> Result<QuantParams> {
        let stats = self.stats.as_ref().and_then(|s| s.get(tap));
        let rows = x.dims2().0;
        let res = if content_start > 0 && self.spec.granularity == Granularity::PerTensor {
            if content_start >= rows {
                return Err(Error::contract(format!("tap `{tap}` has no content rows")));
            }
            resolve_params(&x.slice_rows(content_start, rows)?, &self.spec, stats)
        } else {
            resolve_params(x, &self.spec, stats)
        };
        res.map_err(|e| match e {
            Error::CalibrationMissing(_) => Error::CalibrationMissing(tap.to_string()),
            e => e,
        })
    }
}

impl ActivationQuantizer for FakeQuantizer {
    fn quantize(&self, g: &mut Graph, tap: &str, x: Var, content_start: usize) -> Result<Var> {
        let params = self.params_for(tap, g.value(x), content_start)?;
        let (value, mask) = fake_quant_masked(g.value(x), &params);
        g.straight_through(x, value, mask)
    }
}

/// A quantizer whose output is affine in its input: `mask ⊙ x + offset`,
/// with mask and offset frozen from a reference pass of a
/// [`FakeQuantizer`]. At the reference point it reproduces the fake
/// quantized values exactly, and its true derivative equals the
/// straight-through gradient, so finite differences of a loss built on it
/// probe the same quantity the backward pass computes.
#[derive(Debug, Default)]
pub struct LinearizedQuantizer {
    frozen: HashMap<String, (Vec<bool>, Vec<f32>)>,
    recording: Option<(FakeQuantizer, Mutex<HashMap<String, (Vec<bool>, Vec<f32>)>>)>,
}

impl LinearizedQuantizer {
    /// Starts in recording mode: behaves like `inner` and remembers each tap.
    pub fn recording(inner: FakeQuantizer) -> Self {
        Self {
            frozen: HashMap::new(),
            recording: Some((inner, Mutex::new(HashMap::new()))),
        }
    }

    /// Switches to replay mode using what was recorded.
    pub fn freeze(self) -> Self {
        let frozen = match self.recording {
            Some((_, m)) => m.into_inner().unwrap_or_else(|e| e.into_inner()),
            None => self.frozen,
        };
        Self {
            frozen,
            recording: None,
        }
    }
}

impl ActivationQuantizer for LinearizedQuantizer {
    fn quantize(&self, g: &mut Graph, tap: &str, x: Var, content_start: usize) -> Result<Var> {
        if let Some((inner, log)) = &self.recording {
            let params = inner.params_for(tap, g.value(x), content_start)?;
            let (value, mask) = fake_quant_masked(g.value(x), &params);
            let offset = value
                .data()
                .iter()
                .zip(g.value(x).data())
                .zip(&mask)
                .map(|((&q, &v), &m)| if m { q - v } else { q })
                .collect();
            log.lock()
                .unwrap_or_else(|e| e.into_inner())
                .insert(tap.to_string(), (mask.clone(), offset));
            return g.straight_through(x, value, mask);
        }
        let (mask, offset) = self
            .frozen
            .get(tap)
            .ok_or_else(|| Error::contract(format!("no frozen quantization for tap `{tap}`")))?;
        let xv = g.value(x);
        if xv.numel() != mask.len() {
            return Err(Error::shape("linearized_quant", xv.shape(), &[mask.len()]));
        }
        let value = xv
            .data()
            .iter()
            .zip(mask)
            .zip(offset)
            .map(|((&v, &m), &o)| if m { v + o } else { o })
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), value);
        g.straight_through(x, value, mask.clone())
    }
}
