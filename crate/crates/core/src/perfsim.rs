//! Static cost model: detection-head parameter formulas, per-layer OPs and
//! bytes, and a roofline frame-rate estimate under a DDR bandwidth budget.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Mode, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Rpn,
    YlDet,
    ConvDet,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Rpn, HeadKind::YlDet, HeadKind::ConvDet];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Rpn => "rpn",
            HeadKind::YlDet => "yldet",
            HeadKind::ConvDet => "convdet",
        }
    }
}

/// Dimensions used by the head formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// ConvDet kernel width and height.
    pub f_w: u64,
    pub f_h: u64,
    /// ConvDet hidden channels.
    pub ch_d1: u64,
    /// Channels of the backbone feature map.
    pub ch_f: u64,
    /// Width of YLDet's fully connected layer.
    pub f_fc1: u64,
    /// Feature map size.
    pub w_f: u64,
    pub h_f: u64,
    /// Output grid size.
    pub w_o: u64,
    pub h_o: u64,
    pub num_classes: u64,
    pub boxes: u64,
}

impl HeadDims {
    /// 3x3 ConvDet with 256 hidden channels on a 7x7x1024 feature map, 20
    /// classes, 3 boxes, 4096-wide fully connected layer.
    pub fn reference() -> Self {
        Self {
            f_w: 3,
            f_h: 3,
            ch_d1: 256,
            ch_f: 1024,
            f_fc1: 4096,
            w_f: 7,
            h_f: 7,
            w_o: 7,
            h_o: 7,
            num_classes: 20,
            boxes: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.f_w,
            self.f_h,
            self.ch_d1,
            self.ch_f,
            self.f_fc1,
            self.w_f,
            self.h_f,
            self.w_o,
            self.h_o,
            self.num_classes,
            self.boxes,
        ];
        if all.iter().all(|&d| d >= 1) {
            Ok(())
        } else {
            Err(Error::config(format!("head dims must all be >= 1: {self:?}")))
        }
    }
}

/// Parameter count of a detection head, biases excluded.
///
/// * RPN: `Ch_f * K * (5 + C)`
/// * YLDet: `F_fc1 * (W_f * H_f * Ch_f + W_o * H_o * (C + 5K))`
/// * ConvDet: `F_w * F_h * Ch_d1 * (Ch_f + C + 5K)`
pub fn head_params(kind: HeadKind, d: &HeadDims) -> Result<u64> {
    d.validate()?;
    let out = d.num_classes + 5 * d.boxes;
    let v = match kind {
        HeadKind::Rpn => d.ch_f.checked_mul(d.boxes).and_then(|v| v.checked_mul(5 + d.num_classes)),
        HeadKind::YlDet => (d.w_f * d.h_f)
            .checked_mul(d.ch_f)
            .and_then(|a| a.checked_add(d.w_o * d.h_o * out))
            .and_then(|s| s.checked_mul(d.f_fc1)),
        HeadKind::ConvDet => (d.f_w * d.f_h * d.ch_d1).checked_mul(d.ch_f + out),
    };
    v.ok_or_else(|| Error::Numeric("head parameter count overflows u64".into()))
}

/// Bytes per activation or weight element.
pub fn element_bytes(mode: Mode) -> u64 {
    match mode {
        Mode::Float => 4,
        Mode::Quantized => 1,
    }
}

/// Bytes added per quantized tensor for its stored range.
pub const RANGE_BYTES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: LayerKind,
    /// `[h, w, c]`
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub ops: u64,
    pub params: u64,
    pub weight_bytes_float: u64,
    pub weight_bytes_u8: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    /// Input + output activations + weights for the report's mode.
    pub traffic_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub profile: String,
    /// `[h, w]`
    pub input: [usize; 2],
    pub mode: Mode,
    pub layers: Vec<LayerCost>,
    pub total_ops: u64,
    pub total_params: u64,
    pub total_weight_bytes: u64,
    pub total_activation_bytes: u64,
    pub total_traffic_bytes: u64,
    /// Max over layers of input + output activation bytes.
    pub peak_activation_bytes: u64,
}

impl PerfReport {
    pub fn weight_bytes(&self, mode: Mode) -> u64 {
        self.layers
            .iter()
            .map(|l| match mode {
                Mode::Float => l.weight_bytes_float,
                Mode::Quantized => l.weight_bytes_u8,
            })
            .sum()
    }
}

/// Per-layer cost of running `net` on an `h x w` input.
pub fn analyze(net: &NetworkSpec, (h, w): (usize, usize), mode: Mode) -> Result<PerfReport> {
    let shapes = net.shapes(h, w)?;
    let params = net.layer_params();
    let eb = element_bytes(mode);
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, ((l, s), &p)) in net.layers.iter().zip(&shapes).zip(&params).enumerate() {
        let (input, output): ([usize; 3], [usize; 3]) = (s.input.into(), s.output.into());
        let out_elems = output.iter().product::<usize>() as u64;
        let in_elems = input.iter().product::<usize>() as u64;
        let window = (l.kernel[0] * l.kernel[1]) as u64;
        let ops = match l.kind {
            LayerKind::Maxpool => window * out_elems,
            LayerKind::Conv | LayerKind::DetectionHead => 2 * window * input[2] as u64 * out_elems,
        };
        let p = p as u64;
        let tensors = if l.has_weights() { 2 } else { 0 };
        let (wf, wq) = (4 * p, p + RANGE_BYTES * tensors);
        let wb = match mode {
            Mode::Float => wf,
            Mode::Quantized => wq,
        };
        layers.push(LayerCost {
            index: i,
            kind: l.kind,
            input,
            output,
            ops,
            params: p,
            weight_bytes_float: wf,
            weight_bytes_u8: wq,
            input_bytes: in_elems * eb,
            output_bytes: out_elems * eb,
            traffic_bytes: in_elems * eb + out_elems * eb + wb,
        });
    }
    let sum = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
    let total_weight_bytes = match mode {
        Mode::Float => sum(|l| l.weight_bytes_float),
        Mode::Quantized => sum(|l| l.weight_bytes_u8),
    };
    Ok(PerfReport {
        profile: net.profile.clone(),
        input: [h, w],
        mode,
        total_ops: sum(|l| l.ops),
        total_params: sum(|l| l.params),
        total_weight_bytes,
        total_activation_bytes: sum(|l| l.input_bytes + l.output_bytes),
        total_traffic_bytes: sum(|l| l.traffic_bytes),
        peak_activation_bytes: layers.iter().map(|l| l.input_bytes + l.output_bytes).max().unwrap_or(0),
        layers,
    })
}

/// Compute and memory budget. `ddr_bandwidth_bps = None` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BwScenario {
    /// bits per second
    pub ddr_bandwidth_bps: Option<f64>,
    /// OPs per second
    pub compute_rate_ops: f64,
}

impl BwScenario {
    pub fn validate(&self) -> Result<()> {
        let bw_ok = self.ddr_bandwidth_bps.is_none_or(|b| b > 0.0 && !b.is_nan());
        if bw_ok && self.compute_rate_ops > 0.0 && self.compute_rate_ops.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!("scenario rates must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Bandwidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBandwidth {
    pub index: usize,
    pub traffic_bytes: u64,
    /// Fraction of frame time spent in the layer, by OPs.
    pub time_share: f64,
    /// Instantaneous bandwidth the layer needs at the achieved frame rate.
    pub bandwidth_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRate {
    pub fps: f64,
    pub compute_fps: f64,
    /// Infinite when bandwidth is unlimited.
    pub bandwidth_fps: f64,
    pub bound: Bound,
    /// Average DDR bandwidth at the achieved frame rate.
    pub average_bandwidth_bps: f64,
    pub layers: Vec<LayerBandwidth>,
}

/// `fps = min(compute_rate / total_ops, bandwidth / (8 * total_bytes))`.
pub fn frame_rate(report: &PerfReport, scenario: &BwScenario) -> Result<FrameRate> {
    scenario.validate()?;
    if report.total_ops == 0 || report.total_traffic_bytes == 0 {
        return Err(Error::config("report has no work"));
    }
    let compute_fps = scenario.compute_rate_ops / report.total_ops as f64;
    let bandwidth_fps = scenario
        .ddr_bandwidth_bps
        .map_or(f64::INFINITY, |b| b / (8.0 * report.total_traffic_bytes as f64));
    let (fps, bound) = if bandwidth_fps < compute_fps {
        (bandwidth_fps, Bound::Bandwidth)
    } else {
        (compute_fps, Bound::Compute)
    };
    let layers = report
        .layers
        .iter()
        .map(|l| {
            let share = l.ops as f64 / report.total_ops as f64;
            LayerBandwidth {
                index: l.index,
                traffic_bytes: l.traffic_bytes,
                time_share: share,
                bandwidth_bps: l.traffic_bytes as f64 * 8.0 * fps / share,
            }
        })
        .collect();
    Ok(FrameRate {
        fps,
        compute_fps,
        bandwidth_fps,
        bound,
        average_bandwidth_bps: report.total_traffic_bytes as f64 * 8.0 * fps,
        layers,
    })
}

/// Scenario file: one compute rate and a list of bandwidths to try.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub compute_rate_ops: f64,
    pub bandwidth_sweep_gbps: Vec<f64>,
    /// Also evaluate with unlimited bandwidth.
    #[serde(default)]
    pub include_unlimited: bool,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::parse("scenario file", e))?;
        if s.bandwidth_sweep_gbps.is_empty() && !s.include_unlimited {
            return Err(Error::config("scenario file lists no bandwidths"));
        }
        Ok(s)
    }

    pub fn scenarios(&self) -> Vec<BwScenario> {
        let mut v: Vec<BwScenario> = self
            .bandwidth_sweep_gbps
            .iter()
            .map(|g| BwScenario {
                ddr_bandwidth_bps: Some(g * 1e9),
                compute_rate_ops: self.compute_rate_ops,
            })
            .collect();
        if self.include_unlimited {
            v.push(BwScenario {
                ddr_bandwidth_bps: None,
                compute_rate_ops: self.compute_rate_ops,
            });
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// `None` for unlimited.
    pub bandwidth_gbps: Option<f64>,
    pub fps: f64,
    pub bound: Bound,
}

pub fn bandwidth_sweep(report: &PerfReport, scenarios: &[BwScenario]) -> Result<Vec<SweepPoint>> {
    scenarios
        .iter()
        .map(|s| {
            let fr = frame_rate(report, s)?;
            Ok(SweepPoint {
                bandwidth_gbps: s.ddr_bandwidth_bps.map(|b| b / 1e9),
                fps: fr.fps,
                bound: fr.bound,
            })
        })
        .collect()
}

/// Per-layer CSV. With a frame rate, time share and instantaneous bandwidth
/// columns are filled.
pub fn write_layers_csv<W: Write>(w: W, report: &PerfReport, fr: Option<&FrameRate>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    out.write_record([
        "layer",
        "kind",
        "input",
        "output",
        "ops",
        "params",
        "weight_bytes",
        "input_bytes",
        "output_bytes",
        "traffic_bytes",
        "time_share",
        "bandwidth_bps",
    ])
    .map_err(io)?;
    let dims = |d: &[usize; 3]| format!("{}x{}x{}", d[0], d[1], d[2]);
    for (i, l) in report.layers.iter().enumerate() {
        let wb = match report.mode {
            Mode::Float => l.weight_bytes_float,
            Mode::Quantized => l.weight_bytes_u8,
        };
        let (share, bw) = fr.map_or((String::new(), String::new()), |f| {
            (f.layers[i].time_share.to_string(), f.layers[i].bandwidth_bps.to_string())
        });
        out.write_record([
            l.index.to_string(),
            format!("{:?}", l.kind).to_lowercase(),
            dims(&l.input),
            dims(&l.output),
            l.ops.to_string(),
            l.params.to_string(),
            wb.to_string(),
            l.input_bytes.to_string(),
            l.output_bytes.to_string(),
            l.traffic_bytes.to_string(),
            share,
            bw,
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(w: W, points: &[SweepPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    out.write_record(["bandwidth_gbps", "fps", "bound"]).map_err(io)?;
    for p in points {
        out.write_record([
            p.bandwidth_gbps.map_or_else(|| "inf".to_string(), |b| b.to_string()),
            p.fps.to_string(),
            format!("{:?}", p.bound).to_lowercase(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// Totals plus named scenario results, for the summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfSummary {
    pub profile: String,
    pub input: [usize; 2],
    pub mode: Mode,
    pub total_ops: u64,
    pub total_params: u64,
    pub total_weight_bytes: u64,
    pub total_activation_bytes: u64,
    pub total_traffic_bytes: u64,
    pub peak_activation_bytes: u64,
    pub output_grid: [usize; 3],
    pub scenarios: Vec<SweepPoint>,
}

impl PerfSummary {
    pub fn new(report: &PerfReport, scenarios: Vec<SweepPoint>) -> Self {
        Self {
            profile: report.profile.clone(),
            input: report.input,
            mode: report.mode,
            total_ops: report.total_ops,
            total_params: report.total_params,
            total_weight_bytes: report.total_weight_bytes,
            total_activation_bytes: report.total_activation_bytes,
            total_traffic_bytes: report.total_traffic_bytes,
            peak_activation_bytes: report.peak_activation_bytes,
            output_grid: report.layers.last().map_or([0; 3], |l| l.output),
            scenarios,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_from_config, profile, LayerActivation, LayerSpec};
    use proptest::prelude::*;

    fn toy() -> NetworkSpec {
        build_from_config(&profile("toy").unwrap()).unwrap()
    }

    #[test]
    fn head_formulas_reference_dims() {
        let d = HeadDims::reference();
        assert_eq!(head_params(HeadKind::ConvDet, &d).unwrap(), 2_439_936);
        assert_eq!(head_params(HeadKind::YlDet, &d).unwrap(), 212_545_536);
        assert_eq!(head_params(HeadKind::Rpn, &d).unwrap(), 76_800);
        assert!(head_params(HeadKind::Rpn, &HeadDims { boxes: 0, ..d }).is_err());
    }

    #[test]
    fn one_mac_is_two_ops() {
        let net = NetworkSpec {
            profile: "unit".into(),
            input_channels: 1,
            num_classes: 1,
            boxes_per_cell: 1,
            input_size: [1, 1],
            layers: vec![LayerSpec::conv(1, 1, 1, LayerActivation::Identity), LayerSpec::head(6)],
        };
        let r = analyze(&net, (1, 1), Mode::Float).unwrap();
        assert_eq!(r.layers[0].ops, 2);
    }

    #[test]
    fn head_activation_bytes() {
        let r = analyze(&toy(), (112, 112), Mode::Float).unwrap();
        let head = r.layers.last().unwrap();
        assert_eq!(head.output, [7, 7, 16]);
        assert_eq!(head.output_bytes, 3136);
        let q = analyze(&toy(), (112, 112), Mode::Quantized).unwrap();
        assert_eq!(q.layers.last().unwrap().output_bytes, 784);
    }

    #[test]
    fn toy_totals_match_hand_sum() {
        let net = toy();
        let r = analyze(&net, (112, 112), Mode::Float).unwrap();
        // walk the config independently
        let (mut h, mut w, mut c) = (112usize, 112usize, 3usize);
        let mut ops = 0u64;
        for l in &net.layers {
            match l.kind {
                LayerKind::Maxpool => {
                    let (oh, ow) = ((h - l.kernel[0]).div_ceil(l.stride) + 1, (w - l.kernel[1]).div_ceil(l.stride) + 1);
                    ops += (l.kernel[0] * l.kernel[1] * oh * ow * c) as u64;
                    (h, w) = (oh, ow);
                }
                _ => {
                    let (oh, ow) = (h.div_ceil(l.stride), w.div_ceil(l.stride));
                    ops += 2 * (l.kernel[0] * l.kernel[1] * c * oh * ow * l.out_channels) as u64;
                    (h, w, c) = (oh, ow, l.out_channels);
                }
            }
        }
        assert_eq!(r.total_ops, ops);
        assert_eq!(r.total_ops, r.layers.iter().map(|l| l.ops).sum::<u64>());
        assert_eq!(r.total_traffic_bytes, r.layers.iter().map(|l| l.traffic_bytes).sum::<u64>());
    }

    #[test]
    fn u8_weight_law() {
        let r = analyze(&toy(), (112, 112), Mode::Quantized).unwrap();
        for l in r.layers.iter().filter(|l| l.params > 0) {
            assert_eq!(l.weight_bytes_u8, l.weight_bytes_float / 4 + 2 * RANGE_BYTES);
        }
        assert!((r.weight_bytes(Mode::Quantized) as f64) < 0.26 * r.weight_bytes(Mode::Float) as f64);
    }

    #[test]
    fn roofline_examples() {
        let r = analyze(&toy(), (112, 112), Mode::Quantized).unwrap();
        let unlimited = frame_rate(
            &r,
            &BwScenario {
                ddr_bandwidth_bps: None,
                compute_rate_ops: 1e10,
            },
        )
        .unwrap();
        assert_eq!(unlimited.fps, 1e10 / r.total_ops as f64);
        assert_eq!(unlimited.bound, Bound::Compute);
        let tight = BwScenario {
            ddr_bandwidth_bps: Some(1e6),
            compute_rate_ops: 1e12,
        };
        let a = frame_rate(&r, &tight).unwrap();
        let b = frame_rate(
            &r,
            &BwScenario {
                ddr_bandwidth_bps: Some(5e5),
                ..tight
            },
        )
        .unwrap();
        assert_eq!(a.bound, Bound::Bandwidth);
        assert_eq!(b.fps * 2.0, a.fps);
        // averaged over the frame the layers use exactly the budget
        let avg: f64 = a.layers.iter().map(|l| l.bandwidth_bps * l.time_share).sum();
        assert!((avg - 1e6).abs() < 1e-3);
        assert!(frame_rate(
            &r,
            &BwScenario {
                ddr_bandwidth_bps: Some(0.0),
                compute_rate_ops: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn scenario_file() {
        let s = ScenarioFile::from_json(r#"{"compute_rate_ops": 1e11, "bandwidth_sweep_gbps": [1, 2], "include_unlimited": true}"#).unwrap();
        assert_eq!(s.scenarios().len(), 3);
        assert!(ScenarioFile::from_json(r#"{"compute_rate_ops": 1e11, "bandwidth_sweep_gbps": []}"#).is_err());
        let r = analyze(&toy(), (112, 112), Mode::Float).unwrap();
        let pts = bandwidth_sweep(&r, &s.scenarios()).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bandwidth_gbps,fps,bound\n1,"));
        assert!(text.lines().last().unwrap().starts_with("inf,"));
    }

    proptest! {
        #[test]
        fn fps_monotone(bw1 in 1e6f64..1e11, bw2 in 1e6f64..1e11, c1 in 1e8f64..1e13, c2 in 1e8f64..1e13) {
            let r = analyze(&toy(), (112, 112), Mode::Quantized).unwrap();
            let f = |bw: f64, c: f64| frame_rate(&r, &BwScenario { ddr_bandwidth_bps: Some(bw), compute_rate_ops: c }).unwrap().fps;
            let (lo, hi) = (bw1.min(bw2), bw1.max(bw2));
            prop_assert!(f(lo, c1) <= f(hi, c1));
            let (lo, hi) = (c1.min(c2), c1.max(c2));
            prop_assert!(f(bw1, lo) <= f(bw1, hi));
        }

        #[test]
        fn convdet_smaller_than_yldet(fw in 1u64..6, ch_d1 in 1u64..512, ch_f in 1u64..2048, wf in 1u64..20, c in 1u64..50, k in 1u64..10, extra in 0u64..4096) {
            let d = HeadDims { f_w: fw, f_h: fw, ch_d1, ch_f, f_fc1: fw * fw * ch_d1 + extra, w_f: wf, h_f: wf, w_o: wf, h_o: wf, num_classes: c, boxes: k };
            prop_assume!(wf * wf * ch_f >= ch_f + c + 5 * k);
            prop_assert!(head_params(HeadKind::ConvDet, &d).unwrap() < head_params(HeadKind::YlDet, &d).unwrap());
        }

        #[test]
        fn u8_weights_under_26_percent(chans in proptest::collection::vec(12usize..64, 1..5)) {
            let mut layers: Vec<LayerSpec> = chans.iter().map(|&c| LayerSpec::conv(3, c, 1, LayerActivation::Relu)).collect();
            layers.push(LayerSpec::head(112));
            let net = NetworkSpec { profile: "p".into(), input_channels: 12, num_classes: 2, boxes_per_cell: 22, input_size: [8, 8], layers };
            let r = analyze(&net, (8, 8), Mode::Quantized).unwrap();
            prop_assume!(r.layers.iter().filter(|l| l.params > 0).all(|l| l.params >= 1000));
            prop_assert!((r.weight_bytes(Mode::Quantized) as f64) < 0.26 * r.weight_bytes(Mode::Float) as f64);
        }
    }
}
