//! Static cost model and inference-speed measurement.
//!
//! Conventions: MAC counts multiply-accumulates (conv
//! `C_out·(C_in/g)·k²·H_out·W_out`, linear `in·out` per token, attention
//! core `2·N²·C`); normalizations, activations, pooling and elementwise
//! products count 0. GFLOPS is `2·MAC/1e9`. The memory column estimates f32
//! bytes moved per layer (inputs + outputs + parameters).

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use efcm_tensor::nn::Mode;
use efcm_tensor::{Graph, Tensor};

use crate::error::{CoreError, Result};
use crate::students::{ModelSpec, Student, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
        h_in: usize,
        w_in: usize,
        h_out: usize,
        w_out: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
        tokens: usize,
    },
    Attention {
        tokens: usize,
        dim: usize,
        heads: usize,
    },
    BatchNorm {
        channels: usize,
        elems: usize,
    },
    LayerNorm {
        dim: usize,
        tokens: usize,
    },
    /// Activations, pooling and elementwise products.
    Elementwise {
        elems_in: usize,
        elems_out: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDesc {
    pub fn params(&self) -> u64 {
        match self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                groups,
                bias,
                ..
            } => (out_ch * (in_ch / groups) * kernel * kernel + if bias { out_ch } else { 0 }) as u64,
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
                ..
            } => (in_features * out_features + if bias { out_features } else { 0 }) as u64,
            LayerKind::BatchNorm { channels, .. } => 2 * channels as u64,
            LayerKind::LayerNorm { dim, .. } => 2 * dim as u64,
            LayerKind::Attention { .. } | LayerKind::Elementwise { .. } => 0,
        }
    }

    pub fn mac(&self) -> u64 {
        match self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                groups,
                h_out,
                w_out,
                ..
            } => (out_ch * (in_ch / groups) * kernel * kernel) as u64 * (h_out * w_out) as u64,
            LayerKind::Linear {
                in_features,
                out_features,
                tokens,
                ..
            } => (in_features * out_features) as u64 * tokens as u64,
            LayerKind::Attention { tokens, dim, .. } => 2 * (tokens * tokens) as u64 * dim as u64,
            LayerKind::BatchNorm { .. } | LayerKind::LayerNorm { .. } | LayerKind::Elementwise { .. } => 0,
        }
    }

    /// Estimated f32 bytes read and written.
    pub fn memory_bytes(&self) -> u64 {
        let elems = match self.kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                h_in,
                w_in,
                h_out,
                w_out,
                ..
            } => (in_ch * h_in * w_in + out_ch * h_out * w_out) as u64 + self.params(),
            LayerKind::Linear {
                in_features,
                out_features,
                tokens,
                ..
            } => ((in_features + out_features) * tokens) as u64 + self.params(),
            LayerKind::Attention { tokens, dim, heads } => (4 * tokens * dim + 2 * heads * tokens * tokens) as u64,
            LayerKind::BatchNorm { channels, elems } => 2 * elems as u64 + 4 * channels as u64,
            LayerKind::LayerNorm { dim, tokens } => 2 * (dim * tokens) as u64 + 2 * dim as u64,
            LayerKind::Elementwise { elems_in, elems_out } => (elems_in + elems_out) as u64,
        };
        4 * elems
    }
}

struct Builder {
    layers: Vec<LayerDesc>,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, kind: LayerKind) {
        self.layers.push(LayerDesc { name: name.into(), kind });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dil: usize,
        groups: usize,
        bias: bool,
        hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        let ext = |n: usize| {
            (n + 2 * pad)
                .checked_sub(dil * (k - 1) + 1)
                .map(|v| v / stride + 1)
                .ok_or_else(|| CoreError::Shape(format!("{name}: input {n} too small for kernel {k}")))
        };
        let (h_out, w_out) = (ext(hw.0)?, ext(hw.1)?);
        self.push(
            name,
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel: k,
                groups,
                bias,
                h_in: hw.0,
                w_in: hw.1,
                h_out,
                w_out,
            },
        );
        Ok((h_out, w_out))
    }

    fn bn(&mut self, name: &str, channels: usize, hw: (usize, usize)) {
        self.push(
            name,
            LayerKind::BatchNorm {
                channels,
                elems: channels * hw.0 * hw.1,
            },
        );
    }

    fn act(&mut self, name: &str, elems: usize) {
        self.push(
            name,
            LayerKind::Elementwise {
                elems_in: elems,
                elems_out: elems,
            },
        );
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, tokens: usize) {
        self.push(
            name,
            LayerKind::Linear {
                in_features: i,
                out_features: o,
                bias: true,
                tokens,
            },
        );
    }

    fn extractor(&mut self, spec: &ModelSpec, s: usize) -> Result<(usize, (usize, usize))> {
        let mut hw = self.conv("extractor.conv1", 3, 64, 7, 2, 3, 1, 1, false, (s, s))?;
        self.bn("extractor.bn1", 64, hw);
        self.act("extractor.relu", 64 * hw.0 * hw.1);
        let pooled = ((hw.0 + 2 - 3) / 2 + 1, (hw.1 + 2 - 3) / 2 + 1);
        self.push(
            "extractor.maxpool",
            LayerKind::Elementwise {
                elems_in: 64 * hw.0 * hw.1,
                elems_out: 64 * pooled.0 * pooled.1,
            },
        );
        hw = pooled;
        let mut in_ch = 64;
        for (si, &(blocks, width, stride)) in spec.extractor_depth().stages().iter().enumerate() {
            for bi in 0..blocks {
                let p = format!("extractor.layer{}.{bi}", si + 1);
                let st = if bi == 0 { stride } else { 1 };
                let out = width * 4;
                let h1 = self.conv(&format!("{p}.conv1"), in_ch, width, 1, 1, 0, 1, 1, false, hw)?;
                self.bn(&format!("{p}.bn1"), width, h1);
                let h2 = self.conv(&format!("{p}.conv2"), width, width, 3, st, 1, 1, 1, false, h1)?;
                self.bn(&format!("{p}.bn2"), width, h2);
                let h3 = self.conv(&format!("{p}.conv3"), width, out, 1, 1, 0, 1, 1, false, h2)?;
                self.bn(&format!("{p}.bn3"), out, h3);
                if st != 1 || in_ch != out {
                    let hd = self.conv(&format!("{p}.downsample.0"), in_ch, out, 1, st, 0, 1, 1, false, hw)?;
                    self.bn(&format!("{p}.downsample.1"), out, hd);
                }
                self.act(&format!("{p}.relu"), out * h3.0 * h3.1);
                hw = h3;
                in_ch = out;
            }
        }
        Ok((in_ch, hw))
    }

    fn transscan(&mut self, spec: &ModelSpec, prefix: &str, hw: (usize, usize)) -> Result<()> {
        let (c, g, d) = (spec.dim, spec.groups, spec.reduced);
        let n = hw.0 * hw.1;
        let sp = format!("{prefix}.scan");
        self.conv(&format!("{sp}.branch1"), c, c, 3, 1, 1, 1, g, true, hw)?;
        self.conv(&format!("{sp}.branch2"), c, c, 3, 1, 2, 2, g, true, hw)?;
        self.push(
            format!("{sp}.gap"),
            LayerKind::Elementwise {
                elems_in: c * n,
                elems_out: c,
            },
        );
        self.linear(&format!("{sp}.fc"), c, d, 1);
        self.push(format!("{sp}.bn"), LayerKind::BatchNorm { channels: d, elems: d });
        self.linear(&format!("{sp}.A"), d, c, 1);
        self.linear(&format!("{sp}.B"), d, c, 1);
        self.act(&format!("{sp}.select"), 2 * c * n);
        self.conv(&format!("{sp}.spatial"), c, 1, 1, 1, 0, 1, 1, true, hw)?;
        self.act(&format!("{sp}.mask"), c * n);
        let tp = format!("{prefix}.tr");
        let hidden = c * spec.mlp_ratio;
        self.push(format!("{tp}.ln1"), LayerKind::LayerNorm { dim: c, tokens: n });
        self.linear(&format!("{tp}.msa.qkv"), c, 3 * c, n);
        self.push(
            format!("{tp}.msa.core"),
            LayerKind::Attention {
                tokens: n,
                dim: c,
                heads: spec.heads(),
            },
        );
        self.linear(&format!("{tp}.msa.proj"), c, c, n);
        self.push(format!("{tp}.ln2"), LayerKind::LayerNorm { dim: c, tokens: n });
        self.linear(&format!("{tp}.mlp.fc1"), c, hidden, n);
        self.act(&format!("{tp}.mlp.gelu"), hidden * n);
        self.linear(&format!("{tp}.mlp.fc2"), hidden, c, n);
        Ok(())
    }
}

/// Every layer of `spec` at its configured input size, in execution order.
pub fn layers(spec: &ModelSpec) -> Result<Vec<LayerDesc>> {
    spec.validate()?;
    let s = spec.input_size;
    let mut b = Builder { layers: Vec::new() };
    match spec.variant {
        Variant::Fpd => {
            let (ch, hw) = b.extractor(spec, s)?;
            let hw = b.conv("proj", ch, spec.dim, 4, 4, 0, 1, 1, true, hw)?;
            for i in 0..spec.depth {
                b.transscan(spec, &format!("blocks.{i}"), hw)?;
            }
            b.push(
                "pool",
                LayerKind::Elementwise {
                    elems_in: spec.dim * hw.0 * hw.1,
                    elems_out: spec.dim,
                },
            );
            b.linear("head", spec.dim, spec.teacher_dim, 1);
        }
        Variant::Vfd => {
            let (ch, hw) = b.extractor(spec, s)?;
            b.push(
                "pool",
                LayerKind::Elementwise {
                    elems_in: ch * hw.0 * hw.1,
                    elems_out: ch,
                },
            );
            b.linear("head", ch, spec.teacher_dim, 1);
        }
        Variant::TeacherFrozenRandom => {
            let mut hw = (s, s);
            let widths = [3, 32, 64, 128];
            for (i, w) in widths.windows(2).enumerate() {
                hw = b.conv(&format!("conv{i}"), w[0], w[1], 3, 2, 1, 1, 1, true, hw)?;
                b.act(&format!("relu{i}"), w[1] * hw.0 * hw.1);
            }
            b.push(
                "pool",
                LayerKind::Elementwise {
                    elems_in: 128 * hw.0 * hw.1,
                    elems_out: 128,
                },
            );
            b.linear("head", 128, spec.teacher_dim, 1);
        }
    }
    Ok(b.layers)
}

/// Exact parameter count, frozen parameters included.
pub fn count_params(spec: &ModelSpec) -> Result<u64> {
    Ok(layers(spec)?.iter().map(LayerDesc::params).sum())
}

/// Per-layer `(name, params)` for layers that carry parameters.
pub fn param_breakdown(spec: &ModelSpec) -> Result<Vec<(String, u64)>> {
    Ok(layers(spec)?
        .into_iter()
        .filter(|l| l.params() > 0)
        .map(|l| {
            let p = l.params();
            (l.name, p)
        })
        .collect())
}

/// Multiply-accumulates for one image at `input_size`.
pub fn count_mac(spec: &ModelSpec, input_size: usize) -> Result<u64> {
    let spec = ModelSpec { input_size, ..*spec };
    Ok(layers(&spec)?.iter().map(LayerDesc::mac).sum())
}

pub fn memory_traffic(spec: &ModelSpec, input_size: usize) -> Result<u64> {
    let spec = ModelSpec { input_size, ..*spec };
    Ok(layers(&spec)?.iter().map(LayerDesc::memory_bytes).sum())
}

pub fn gflops(mac: u64) -> f64 {
    2.0 * mac as f64 / 1e9
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpsProtocol {
    pub batch: usize,
    pub warmup: usize,
    pub timed: usize,
}

impl Default for FpsProtocol {
    fn default() -> Self {
        Self {
            batch: 1,
            warmup: 10,
            timed: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsMeasurement {
    pub fps: f64,
    pub median_seconds: f64,
    pub samples: Vec<f64>,
    pub protocol: FpsProtocol,
    pub aggregation: String,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time `run` (one forward of `protocol.batch` images per call): warmup
/// calls are discarded, fps = batch / median of the timed calls.
pub fn measure_fps(mut run: impl FnMut() -> Result<()>, protocol: FpsProtocol) -> Result<FpsMeasurement> {
    if protocol.timed == 0 {
        return Err(crate::error::config("FPS protocol needs at least one timed iteration"));
    }
    for _ in 0..protocol.warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(protocol.timed);
    for _ in 0..protocol.timed {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64().max(1e-9));
    }
    let med = median(&samples);
    Ok(FpsMeasurement {
        fps: protocol.batch.max(1) as f64 / med,
        median_seconds: med,
        samples,
        protocol,
        aggregation: "median".into(),
    })
}

/// Inference speed of a randomly initialized student built from `spec`.
pub fn measure_model_fps(spec: &ModelSpec, protocol: FpsProtocol, seed: u64) -> Result<FpsMeasurement> {
    let student = Student::<f32>::new(*spec, seed)?;
    let s = spec.input_size;
    let x = Tensor::from_fn([protocol.batch.max(1), 3, s, s], |i| ((i % 97) as f32 / 97.0) - 0.5);
    measure_fps(
        || {
            let mut g = Graph::inference();
            let xi = g.constant(x.clone());
            student.forward(&mut g, xi, Mode::Eval)?;
            Ok(())
        },
        protocol,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub model: String,
    pub params: u64,
    pub mac: u64,
    pub gflops: f64,
    pub fps: f64,
    pub input_shape: String,
    pub protocol_json: String,
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub version: u32,
    pub mac_convention: String,
    pub rows: Vec<EfficiencyRow>,
}

pub fn efficiency_report(specs: &[(String, ModelSpec)], protocol: FpsProtocol, seed: u64) -> Result<EfficiencyReport> {
    let mut rows = Vec::with_capacity(specs.len());
    for (name, spec) in specs {
        let mac = count_mac(spec, spec.input_size)?;
        let fps = measure_model_fps(spec, protocol, seed)?;
        rows.push(EfficiencyRow {
            model: name.clone(),
            params: count_params(spec)?,
            mac,
            gflops: gflops(mac),
            fps: fps.fps,
            input_shape: format!("{}x3x{}x{}", protocol.batch.max(1), spec.input_size, spec.input_size),
            protocol_json: serde_json::to_string(&protocol)?,
            memory_bytes: memory_traffic(spec, spec.input_size)?,
        });
    }
    Ok(EfficiencyReport {
        version: 1,
        mac_convention: "multiply-accumulate; gflops = 2*mac/1e9; norms/activations = 0".into(),
        rows,
    })
}

impl EfficiencyReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::Io(e.into()))?;
        w.write_record(["model", "params", "mac", "gflops", "fps", "input_shape", "protocol_json", "memory_bytes"])
            .map_err(|e| CoreError::Io(e.into()))?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.params.to_string(),
                r.mac.to_string(),
                r.gflops.to_string(),
                r.fps.to_string(),
                r.input_shape.clone(),
                r.protocol_json.clone(),
                r.memory_bytes.to_string(),
            ])
            .map_err(|e| CoreError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(in_ch: usize, out_ch: usize, k: usize, groups: usize, hw: usize) -> LayerDesc {
        LayerDesc {
            name: "c".into(),
            kind: LayerKind::Conv {
                in_ch,
                out_ch,
                kernel: k,
                groups,
                bias: false,
                h_in: hw,
                w_in: hw,
                h_out: hw,
                w_out: hw,
            },
        }
    }

    #[test]
    fn closed_form_oracles() {
        assert_eq!(conv(64, 64, 3, 1, 56).mac(), 115_605_504);
        assert_eq!(conv(384, 384, 3, 32, 14).mac() * 32, conv(384, 384, 3, 1, 14).mac());
        let fc = LayerDesc {
            name: "fc".into(),
            kind: LayerKind::Linear {
                in_features: 384,
                out_features: 1024,
                bias: true,
                tokens: 1,
            },
        };
        assert_eq!(fc.mac(), 393_216);
        assert_eq!(fc.params(), 394_240);
    }

    #[test]
    fn median_and_protocol_errors() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let p = FpsProtocol {
            timed: 0,
            ..Default::default()
        };
        assert!(measure_fps(|| Ok(()), p).is_err());
    }

    #[test]
    fn depth_adds_a_constant_block_cost() {
        let c = |d| count_params(&ModelSpec::fpd(384, d)).unwrap();
        let m = |d| count_mac(&ModelSpec::fpd(384, d), 224).unwrap();
        assert_eq!(c(3) - c(2), c(4) - c(3));
        assert_eq!(c(3) - c(2), 1_896_289);
        assert_eq!(m(3) - m(2), m(4) - m(3));
    }

    #[test]
    fn static_count_matches_built_models() {
        for spec in [ModelSpec::fpd(384, 3), ModelSpec::vfd(), ModelSpec::desk_fpd(), ModelSpec::fpd(128, 1)] {
            let built = Student::<f32>::new(spec, 0).unwrap().num_params() as u64;
            assert_eq!(count_params(&spec).unwrap(), built, "{spec:?}");
        }
        assert_eq!(count_params(&ModelSpec::fpd(384, 3)).unwrap(), 7_881_699);
        assert_eq!(count_params(&ModelSpec::vfd()).unwrap(), 9_592_896);
    }
}
