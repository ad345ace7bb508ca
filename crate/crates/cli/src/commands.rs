use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fgmp::assignment::{
    assign_online, calibrate_threshold, CalibrationInput, Domain, Scope, Thresholds,
};
use fgmp::blockquant::{fp8_tensor_scale, QuantizedTensor};
use fgmp::clipping::{quantize_tensor_fgmp, ClipMode};
use fgmp::costmodel::{memory_bits, CostReport, EnergyCoefficients, MemoryReport};
use fgmp::format::{decode_fgq, encode_fgq, TensorFile, TensorKind, FGQ_MAGIC, FGT_MAGIC};
use fgmp::sensitivity::{
    calibrate_channel_stats, ChannelMagnitudeMap, FisherKind, FisherMap, Policy, Sensitivity,
};
use fgmp::simkernel::{gemm_fgmp, ppu_pipeline, GemmConfig, TraceCounts};
use fgmp::Tensor;

use crate::config::{decimal, LayerEntry, LoadedConfig, ThresholdSet, ThresholdValue};
use crate::error::{CliError, CliResult, WithPath};

pub const TRACE_HEADER: &str = "# fgmp trace v1";

/// Settings given on the command line that take precedence over the config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub ratio: Option<f64>,
    pub policy: Option<Policy>,
    pub scope: Option<Scope>,
    pub clip: Option<ClipMode>,
}

/// Everything loaded for one layer.
struct LayerData {
    name: String,
    weight: Tensor,
    weight_fisher: Option<FisherMap>,
    activation: Option<Tensor>,
    activation_fisher: Option<FisherMap>,
    activation_magnitudes: Option<ChannelMagnitudeMap>,
}

fn read_fgt(path: &Path) -> CliResult<TensorFile> {
    TensorFile::read(path).at(path)
}

impl LayerData {
    fn load(cfg: &LoadedConfig, entry: &LayerEntry) -> CliResult<Self> {
        let path = cfg.resolve(&entry.weight);
        let weight = read_fgt(&path)?.to_tensor().at(&path)?;
        let weight_fisher = match &entry.weight_fisher {
            Some(p) => {
                let path = cfg.resolve(p);
                let f = read_fgt(&path)?.to_fisher().at(&path)?;
                if !matches!(f.kind(), FisherKind::PerElement { .. }) {
                    return Err(CliError::data(format!(
                        "{}: weight fisher must be per-element",
                        path.display()
                    )));
                }
                Some(f)
            }
            None => None,
        };
        let activation = match &entry.activation {
            Some(p) => {
                let path = cfg.resolve(p);
                Some(read_fgt(&path)?.to_tensor().at(&path)?)
            }
            None => None,
        };
        let activation_fisher = match &entry.activation_fisher {
            Some(p) => {
                let path = cfg.resolve(p);
                let f = read_fgt(&path)?.to_fisher().at(&path)?;
                if f.kind() != FisherKind::PerChannel {
                    return Err(CliError::data(format!(
                        "{}: activation fisher must be per-channel",
                        path.display()
                    )));
                }
                Some(f)
            }
            None => None,
        };
        let activation_magnitudes = match &entry.activation_magnitudes {
            Some(p) => {
                let path = cfg.resolve(p);
                Some(read_fgt(&path)?.to_magnitudes().at(&path)?)
            }
            None => None,
        };
        Ok(LayerData {
            name: entry.name.clone(),
            weight,
            weight_fisher,
            activation,
            activation_fisher,
            activation_magnitudes,
        })
    }

    fn missing(&self, what: &str, policy: Policy) -> CliError {
        CliError::data(format!(
            "layer {:?}: policy {policy} needs {what}",
            self.name
        ))
    }

    fn weight_sensitivity(&self, policy: Policy) -> CliResult<OwnedSensitivity> {
        Ok(match policy {
            Policy::Fisher => OwnedSensitivity::Fisher(
                self.weight_fisher
                    .clone()
                    .ok_or_else(|| self.missing("weight_fisher", policy))?,
            ),
            Policy::Qe => OwnedSensitivity::Qe,
            Policy::Oe => {
                OwnedSensitivity::Oe(match (&self.activation_magnitudes, &self.activation) {
                    (Some(m), _) => m.clone(),
                    (None, Some(a)) => calibrate_channel_stats(std::slice::from_ref(a))?,
                    (None, None) => {
                        return Err(self.missing("activation_magnitudes or activation", policy))
                    }
                })
            }
        })
    }

    /// Per-input-channel weights used to score this layer's activations.
    fn activation_weights(&self, policy: Policy) -> CliResult<FisherMap> {
        Ok(match policy {
            Policy::Fisher => self
                .activation_fisher
                .clone()
                .ok_or_else(|| self.missing("activation_fisher", policy))?,
            Policy::Qe => FisherMap::per_channel(vec![1.0; self.weight.cols()])?,
            Policy::Oe => calibrate_channel_stats(std::slice::from_ref(&self.weight))?.into(),
        })
    }
}

enum OwnedSensitivity {
    Fisher(FisherMap),
    Qe,
    Oe(ChannelMagnitudeMap),
}

impl OwnedSensitivity {
    fn borrow(&self) -> Sensitivity<'_> {
        match self {
            OwnedSensitivity::Fisher(f) => Sensitivity::Fisher(f),
            OwnedSensitivity::Qe => Sensitivity::QuantError,
            OwnedSensitivity::Oe(m) => Sensitivity::OutputError(m),
        }
    }
}

fn load_layers(cfg: &LoadedConfig) -> CliResult<Vec<LayerData>> {
    if cfg.config.layers.is_empty() {
        return Err(CliError::data(format!(
            "{}: the layer list is empty",
            cfg.path.display()
        )));
    }
    cfg.config
        .layers
        .iter()
        .map(|l| LayerData::load(cfg, l))
        .collect()
}

fn fp8_fraction(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|s| **s > threshold).count() as f64 / scores.len().max(1) as f64
}

fn threshold_value(t: &Thresholds, names: &[&str]) -> ThresholdValue {
    match t {
        Thresholds::Global(t) => ThresholdValue::Global(decimal(t.value)),
        Thresholds::Local(_) => ThresholdValue::Local(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), decimal(t.for_tensor(i).value)))
                .collect(),
        ),
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::data(format!("writing output: {e}"))
}

/// Scores every layer, calibrates thresholds and writes them into the config.
pub fn calibrate(
    config_path: &Path,
    overrides: &Overrides,
    out_path: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let mut cfg = LoadedConfig::load(config_path)?;
    let c = &mut cfg.config;
    c.ratio = overrides.ratio.unwrap_or(c.ratio);
    c.policy = overrides.policy.unwrap_or(c.policy);
    c.scope = overrides.scope.unwrap_or(c.scope);
    c.clip = overrides.clip.unwrap_or(c.clip);
    let (policy, ratio, scope, clip) = (c.policy, c.ratio, c.scope, c.clip);
    c.validate().at(config_path)?;

    let layers = load_layers(&cfg)?;
    let sens: Vec<OwnedSensitivity> = layers
        .iter()
        .map(|l| l.weight_sensitivity(policy))
        .collect::<CliResult<_>>()?;
    let inputs: Vec<CalibrationInput> = layers
        .iter()
        .zip(&sens)
        .map(|(l, s)| CalibrationInput {
            tensor: &l.weight,
            sensitivity: s.borrow(),
            fp8_scale: None,
        })
        .collect();
    let (w_thr, w_pools) = calibrate_threshold(&inputs, ratio, scope, Domain::Weights, clip)?;
    let names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();

    let with_act: Vec<&LayerData> = layers.iter().filter(|l| l.activation.is_some()).collect();
    let mut scales = BTreeMap::new();
    let mut act_result = None;
    if !with_act.is_empty() {
        let weights: Vec<FisherMap> = with_act
            .iter()
            .map(|l| l.activation_weights(policy))
            .collect::<CliResult<_>>()?;
        let mut inputs = Vec::new();
        for (l, w) in with_act.iter().zip(&weights) {
            let act = l.activation.as_ref().unwrap();
            let scale = fp8_tensor_scale(act.data())?;
            scales.insert(l.name.clone(), decimal(scale as f64));
            inputs.push(CalibrationInput {
                tensor: act,
                sensitivity: Sensitivity::Fisher(w),
                fp8_scale: Some(scale),
            });
        }
        act_result = Some(calibrate_threshold(
            &inputs,
            ratio,
            scope,
            Domain::Activations,
            ClipMode::Dynmax,
        )?);
    }

    writeln!(
        out,
        "calibrated {} layer(s): policy {policy}, ratio {ratio}, scope {}, clip {clip}",
        layers.len(),
        scope_name(scope)
    )
    .map_err(io_err)?;
    writeln!(
        out,
        "{:<24} {:>14} {:>18}",
        "layer", "weights fp8 %", "activations fp8 %"
    )
    .map_err(io_err)?;
    let act_names: Vec<&str> = with_act.iter().map(|l| l.name.as_str()).collect();
    for (i, name) in names.iter().enumerate() {
        let w = 100.0 * fp8_fraction(&w_pools[i], w_thr.for_tensor(i).value);
        let a = match (&act_result, act_names.iter().position(|n| n == name)) {
            (Some((t, pools)), Some(j)) => format!(
                "{:.2}",
                100.0 * fp8_fraction(&pools[j], t.for_tensor(j).value)
            ),
            _ => "-".to_string(),
        };
        writeln!(out, "{name:<24} {w:>14.2} {a:>18}").map_err(io_err)?;
    }

    let c = &mut cfg.config;
    c.thresholds = Some(ThresholdSet {
        weights: threshold_value(&w_thr, &names),
        activations: act_result
            .as_ref()
            .map(|(t, _)| threshold_value(t, &act_names)),
    });
    c.activation_fp8_scales = scales;
    let target = out_path.unwrap_or(config_path);
    fs::write(target, c.to_json()).at(target)?;
    writeln!(out, "thresholds written to {}", target.display()).map_err(io_err)?;
    Ok(())
}

fn scope_name(s: Scope) -> &'static str {
    match s {
        Scope::Local => "local",
        Scope::Global => "global",
    }
}

fn selected<'a>(cfg: &'a LoadedConfig, layer: Option<&str>) -> CliResult<Vec<&'a LayerEntry>> {
    match layer {
        Some(name) => Ok(vec![cfg.layer(name)?]),
        None if cfg.config.layers.is_empty() => Err(CliError::data(format!(
            "{}: the layer list is empty",
            cfg.path.display()
        ))),
        None => Ok(cfg.config.layers.iter().collect()),
    }
}

fn write_fgq(qt: &QuantizedTensor, path: &Path) -> CliResult<()> {
    fs::write(path, encode_fgq(qt)).at(path)
}

fn summary_line(out: &mut dyn Write, layer: &str, what: &str, m: &MemoryReport) -> CliResult<()> {
    writeln!(
        out,
        "{layer:<24} {what:<11} {:>10} {:>10} {:>8.2} {:>10.2}",
        m.nvfp4_blocks,
        m.fp8_blocks,
        100.0 * m.fp8_blocks as f64 / m.blocks().max(1) as f64,
        m.savings_pct()
    )
    .map_err(io_err)
}

/// Quantizes the weights (and calibration activations, when thresholds for
/// them exist) of every selected layer into `.fgq` files.
pub fn quantize(
    config_path: &Path,
    layer: Option<&str>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> CliResult<()> {
    let cfg = LoadedConfig::load(config_path)?;
    let c = &cfg.config;
    let entries = selected(&cfg, layer)?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    writeln!(
        out,
        "{:<24} {:<11} {:>10} {:>10} {:>8} {:>10}",
        "layer", "tensor", "nvfp4", "fp8", "fp8 %", "savings %"
    )
    .map_err(io_err)?;
    let mut total: Option<MemoryReport> = None;
    let has_act_thresholds = c
        .thresholds
        .as_ref()
        .is_some_and(|t| t.activations.is_some());
    for entry in entries {
        let data = LayerData::load(&cfg, entry)?;
        let thr = cfg.threshold(&entry.name, Domain::Weights)?;
        let sens = data.weight_sensitivity(c.policy)?;
        let qt = quantize_tensor_fgmp(&data.weight, sens.borrow(), &thr, c.clip, None)
            .at(&cfg.resolve(&entry.weight))?;
        write_fgq(&qt, &out_dir.join(format!("{}.weight.fgq", entry.name)))?;
        let m = memory_bits(&qt);
        summary_line(out, &entry.name, "weight", &m)?;
        total = Some(total.map_or(m, |t| t + m));

        if let (Some(act), true) = (&data.activation, has_act_thresholds) {
            let thr = cfg.threshold(&entry.name, Domain::Activations)?;
            let weights = data.activation_weights(c.policy)?;
            let scale = match cfg.activation_scale(&entry.name)? {
                Some(s) => s,
                None => fp8_tensor_scale(act.data())?,
            };
            let (qa, _) = assign_online(act, &weights, &thr, scale)?;
            write_fgq(&qa, &out_dir.join(format!("{}.activation.fgq", entry.name)))?;
            let m = memory_bits(&qa);
            summary_line(out, &entry.name, "activation", &m)?;
            total = Some(total.map_or(m, |t| t + m));
        }
    }
    if let Some(t) = total {
        summary_line(out, "total", "", &t)?;
        writeln!(out, "memory savings vs fp8: {:.2}%", t.savings_pct()).map_err(io_err)?;
    }
    Ok(())
}

/// What a file holds, from its first bytes.
pub enum Sniffed {
    Tensor(TensorFile),
    Quantized(QuantizedTensor),
    Trace(TraceCounts),
}

pub fn sniff(path: &Path) -> CliResult<Sniffed> {
    let bytes = fs::read(path).at(path)?;
    if bytes.starts_with(FGT_MAGIC) {
        Ok(Sniffed::Tensor(TensorFile::decode(&bytes).at(path)?))
    } else if bytes.starts_with(FGQ_MAGIC) {
        Ok(Sniffed::Quantized(decode_fgq(&bytes).at(path)?))
    } else if bytes.starts_with(TRACE_HEADER.as_bytes()) {
        let text = std::str::from_utf8(&bytes).at(path)?;
        Ok(Sniffed::Trace(text.parse().at(path)?))
    } else {
        Err(CliError::data(format!(
            "{}: not an .fgt, .fgq or trace file",
            path.display()
        )))
    }
}

pub struct SimulateArgs<'a> {
    pub weights: &'a Path,
    pub input: &'a Path,
    pub config: Option<&'a Path>,
    pub layer: Option<&'a str>,
    pub next_layer: Option<&'a str>,
    pub lanes: usize,
    pub out_dir: &'a Path,
}

fn need_config<'a>(cfg: &'a Option<LoadedConfig>, why: &str) -> CliResult<&'a LoadedConfig> {
    cfg.as_ref()
        .ok_or_else(|| CliError::Usage(format!("--config is required {why}")))
}

/// Runs one layer on the simulated datapath.
pub fn simulate(args: &SimulateArgs<'_>, out: &mut dyn Write) -> CliResult<()> {
    let cfg = args.config.map(LoadedConfig::load).transpose()?;
    let w = match sniff(args.weights)? {
        Sniffed::Quantized(q) => q,
        _ => {
            return Err(CliError::data(format!(
                "{}: weights must be an .fgq file",
                args.weights.display()
            )))
        }
    };
    let x = match sniff(args.input)? {
        Sniffed::Quantized(q) => q,
        Sniffed::Tensor(t) => {
            let cfg = need_config(&cfg, "to quantize an .fgt input")?;
            let name = args.layer.ok_or_else(|| {
                CliError::Usage("--layer is required to quantize an .fgt input".into())
            })?;
            let data = LayerData::load(cfg, cfg.layer(name)?)?;
            let act = t.to_tensor().at(args.input)?;
            let thr = cfg.threshold(name, Domain::Activations)?;
            let weights = data.activation_weights(cfg.config.policy)?;
            let scale = match cfg.activation_scale(name)? {
                Some(s) => s,
                None => fp8_tensor_scale(act.data())?,
            };
            assign_online(&act, &weights, &thr, scale).at(args.input)?.0
        }
        Sniffed::Trace(_) => {
            return Err(CliError::data(format!(
                "{}: input must be .fgt or .fgq",
                args.input.display()
            )))
        }
    };
    if args.lanes == 0 {
        return Err(CliError::Usage("--lanes must be at least 1".into()));
    }
    let gemm_cfg = GemmConfig {
        lanes: args.lanes,
        record_cycles: false,
    };
    let (y, mut trace) = gemm_fgmp(&w, &x, &gemm_cfg)?;

    fs::create_dir_all(args.out_dir).at(args.out_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let y_path = args.out_dir.join("y.fgt");
    TensorFile::from_tensor(&y).write(&y_path).at(&y_path)?;
    written.push(y_path);

    if let Some(next) = args.next_layer {
        let cfg = need_config(&cfg, "for --next-layer")?;
        let data = LayerData::load(cfg, cfg.layer(next)?)?;
        let thr = cfg.threshold(next, Domain::Activations)?;
        let weights = data.activation_weights(cfg.config.policy)?;
        let scale = match cfg.activation_scale(next)? {
            Some(s) => s,
            None => fp8_tensor_scale(y.data())?,
        };
        let (yq, _) = ppu_pipeline(&y, &weights, &thr, scale, &mut trace.counts)?;
        let p = args.out_dir.join("y.fgq");
        write_fgq(&yq, &p)?;
        written.push(p);
    }

    let coeff = cfg.as_ref().map(|c| c.config.energy).unwrap_or_default();
    let report = CostReport::new(
        Some(memory_bits(&w) + memory_bits(&x)),
        trace.counts,
        &coeff,
    );
    let trace_path = args.out_dir.join("trace.txt");
    fs::write(&trace_path, trace.to_string()).at(&trace_path)?;
    written.push(trace_path);
    let report_path = args.out_dir.join("report.txt");
    fs::write(&report_path, format_records(&report)).at(&report_path)?;
    written.push(report_path);

    writeln!(
        out,
        "gemm {}x{} weights, {} tokens, {} lanes",
        trace.m, trace.k, trace.n, trace.lanes
    )
    .map_err(io_err)?;
    write!(out, "{report}").map_err(io_err)?;
    for p in written {
        writeln!(out, "wrote {}", p.display()).map_err(io_err)?;
    }
    Ok(())
}

pub fn format_records(report: &CostReport) -> String {
    report
        .records()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Aggregates traces (datapath and PPU counts) and `.fgq` files (memory).
pub fn report(
    files: &[PathBuf],
    config: Option<&Path>,
    records_out: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    if files.is_empty() {
        return Err(CliError::Usage(
            "report needs at least one trace or .fgq file".into(),
        ));
    }
    let coeff = match config {
        Some(p) => LoadedConfig::load(p)?.config.energy,
        None => EnergyCoefficients::default(),
    };
    let mut counts = TraceCounts::default();
    let mut memory: Option<MemoryReport> = None;
    let mut traces = 0;
    for f in files {
        match sniff(f)? {
            Sniffed::Trace(t) => {
                counts += t;
                traces += 1;
            }
            Sniffed::Quantized(q) => {
                let m = memory_bits(&q);
                memory = Some(memory.map_or(m, |t| t + m));
            }
            Sniffed::Tensor(_) => {
                return Err(CliError::data(format!(
                    "{}: reports take traces and .fgq files",
                    f.display()
                )))
            }
        }
    }
    let report = CostReport::new(memory, counts, &coeff);
    writeln!(out, "{} trace(s), {} file(s)", traces, files.len()).map_err(io_err)?;
    write!(out, "{report}").map_err(io_err)?;
    if let Some(p) = records_out {
        fs::write(p, format_records(&report)).at(p)?;
        writeln!(out, "records written to {}", p.display()).map_err(io_err)?;
    }
    Ok(())
}

/// Describes a `.fgt`, `.fgq` or trace file.
pub fn inspect(path: &Path, out: &mut dyn Write) -> CliResult<()> {
    match sniff(path)? {
        Sniffed::Tensor(t) => {
            // Sensitivity files are checked for sign and shape as they would
            // be when loaded.
            match t.kind {
                TensorKind::Tensor => drop(t.to_tensor().at(path)?),
                TensorKind::ElementFisher | TensorKind::ChannelFisher => {
                    drop(t.to_fisher().at(path)?)
                }
                TensorKind::ChannelMagnitudes => drop(t.to_magnitudes().at(path)?),
            }
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
            for &v in &t.data {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
                sum += v as f64;
            }
            writeln!(out, "format   fgt").map_err(io_err)?;
            writeln!(out, "kind     {}", t.kind.name()).map_err(io_err)?;
            writeln!(out, "dims     {:?}", t.dims).map_err(io_err)?;
            writeln!(out, "elements {}", t.data.len()).map_err(io_err)?;
            if !t.data.is_empty() {
                writeln!(out, "min      {lo}").map_err(io_err)?;
                writeln!(out, "max      {hi}").map_err(io_err)?;
                writeln!(out, "mean     {}", sum / t.data.len() as f64).map_err(io_err)?;
            }
        }
        Sniffed::Quantized(q) => {
            let m = memory_bits(&q);
            writeln!(out, "format     fgq").map_err(io_err)?;
            writeln!(out, "shape      {}x{}", q.rows(), q.cols()).map_err(io_err)?;
            writeln!(out, "fp8 scale  {:?}", q.fp8_scale()).map_err(io_err)?;
            writeln!(
                out,
                "blocks     {} nvfp4, {} fp8 ({:.2}% fp8)",
                m.nvfp4_blocks,
                m.fp8_blocks,
                100.0 * m.fp8_blocks as f64 / m.blocks().max(1) as f64
            )
            .map_err(io_err)?;
            writeln!(
                out,
                "bits       {} (fp8 baseline {})",
                m.total_bits, m.baseline_bits
            )
            .map_err(io_err)?;
            writeln!(out, "savings    {:.2}%", m.savings_pct()).map_err(io_err)?;
        }
        Sniffed::Trace(t) => {
            writeln!(out, "format   trace").map_err(io_err)?;
            write!(
                out,
                "{}",
                CostReport::new(None, t, &EnergyCoefficients::default())
            )
            .map_err(io_err)?;
        }
    }
    Ok(())
}
