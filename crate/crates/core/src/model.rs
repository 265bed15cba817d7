//! The V-shaped residual segmentation network.
//!
//! The compression path is a sequence of residual stages at halving
//! resolutions, joined by 2x2x2 stride-2 convolutions that also double the
//! channel count. The decompression path mirrors it with 2x2x2 stride-2
//! transposed convolutions; each decoder stage concatenates the upsampled
//! features with the encoder features of the same resolution. A 1x1x1
//! convolution maps the last stage to two logit channels.
//!
//! Every stage computes `out = in + chain(in)` where `chain` is one to three
//! (convolution, PReLU) pairs with same-size padding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{format_list, format_xyz, parse_xyz, KvConfig};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::ops::{self, PRELU_INIT_SLOPE};
use crate::tape::{Eager, Graph, ParamId, ParamStore};
use crate::tensor::{Shape5, Tensor5};

/// 2x2x2 stride-2 resampling between stages.
pub const RESAMPLE: ConvGeometry = ConvGeometry::new(2, 2, 0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub convs: usize,
    pub kernel: usize,
    pub channels: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Input extent in (z, y, x) voxels.
    pub input: [usize; 3],
    pub in_channels: usize,
    pub base_channels: usize,
    pub kernel: usize,
    /// Convolutions per encoder stage, top (full resolution) first.
    pub convs_down: Vec<usize>,
    /// Convolutions per decoder stage, deepest first (one fewer than encoder).
    pub convs_up: Vec<usize>,
}

impl Default for NetworkConfig {
    /// Full-size architecture: 128x128x64 input, five stages, 16 base channels.
    fn default() -> Self {
        Self {
            input: [64, 128, 128],
            in_channels: 1,
            base_channels: 16,
            kernel: 5,
            convs_down: vec![1, 2, 3, 3, 3],
            convs_up: vec![3, 3, 2, 1],
        }
    }
}

pub const NETWORK_KEYS: &[&str] = &[
    "stages",
    "base_channels",
    "input",
    "convs_down",
    "convs_up",
    "kernel",
];

impl NetworkConfig {
    /// Small three-stage variant for 32^3 volumes on a CPU.
    pub fn desk() -> Self {
        Self {
            input: [32, 32, 32],
            in_channels: 1,
            base_channels: 4,
            kernel: 5,
            convs_down: vec![1, 2, 3],
            convs_up: vec![2, 1],
        }
    }

    pub fn stages(&self) -> usize {
        self.convs_down.len()
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn encoder(&self) -> Vec<StageSpec> {
        self.convs_down
            .iter()
            .enumerate()
            .map(|(level, &convs)| StageSpec {
                convs,
                kernel: self.kernel,
                channels: self.base_channels << level,
                residual: true,
            })
            .collect()
    }

    /// Decoder stages, deepest first. A decoder stage at level `l` carries
    /// twice the encoder width of that level (upsampled + skip features).
    pub fn decoder(&self) -> Vec<StageSpec> {
        let levels = self.stages().saturating_sub(1);
        self.convs_up
            .iter()
            .enumerate()
            .map(|(i, &convs)| StageSpec {
                convs,
                kernel: self.kernel,
                channels: 2 * (self.base_channels << (levels - 1 - i)),
                residual: true,
            })
            .collect()
    }

    /// Grid size at encoder level `l`.
    pub fn level_dims(&self, level: usize) -> [usize; 3] {
        self.input.map(|s| s >> level)
    }

    /// Checks the structural invariants, including that the receptive-field
    /// table is computable. Only [`NetworkConfig::validate_buildable`] needs
    /// an odd kernel and divisible input.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Error::Config {
            key: key.into(),
            detail,
        };
        if self.convs_down.is_empty() {
            return Err(bad("convs_down", "at least one stage required".into()));
        }
        if self.convs_up.len() + 1 != self.convs_down.len() {
            return Err(bad(
                "convs_up",
                format!(
                    "{} encoder stages need {} decoder stages, got {}",
                    self.convs_down.len(),
                    self.convs_down.len() - 1,
                    self.convs_up.len()
                ),
            ));
        }
        for (key, list) in [
            ("convs_down", &self.convs_down),
            ("convs_up", &self.convs_up),
        ] {
            if let Some(c) = list.iter().find(|c| !(1..=3).contains(*c)) {
                return Err(bad(
                    key,
                    format!("each stage has 1 to 3 convolutions, got {c}"),
                ));
            }
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(bad(
                "base_channels",
                "channel counts must be positive".into(),
            ));
        }
        if self.kernel == 0 {
            return Err(bad("kernel", "kernel must be positive".into()));
        }
        if self.input.contains(&0) {
            return Err(bad("input", "input extent must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_buildable(&self) -> Result<()> {
        self.validate()?;
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config {
                key: "kernel".into(),
                detail: format!("same-size padding needs an odd kernel, got {}", self.kernel),
            });
        }
        let factor = 1usize << (self.stages() - 1);
        if self.input.iter().any(|s| s % factor != 0) {
            return Err(Error::Shape(format!(
                "input {} is not divisible by {factor} along every axis",
                format_xyz(&self.input)
            )));
        }
        if !self.base_channels.is_multiple_of(self.in_channels) {
            return Err(Error::Config {
                key: "base_channels".into(),
                detail: format!(
                    "first-stage width {} must be a multiple of the {} input channels",
                    self.base_channels, self.in_channels
                ),
            });
        }
        Ok(())
    }

    /// Output shape of [`VNetModel::forward`] for a batch of `n`.
    pub fn output_shape(&self, n: usize) -> Shape5 {
        [n, 2, self.input[0], self.input[1], self.input[2]]
    }

    /// Reads network keys from `kv`, falling back to `self` for absent ones.
    pub fn overlay(mut self, kv: &KvConfig) -> Result<Self> {
        if let Some(input) = kv.get_raw("input") {
            self.input = parse_xyz("input", input)?;
        }
        if let Some(v) = kv.get("base_channels")? {
            self.base_channels = v;
        }
        if let Some(v) = kv.get("kernel")? {
            self.kernel = v;
        }
        if let Some(v) = kv.get_list("convs_down")? {
            self.convs_down = v;
        }
        if let Some(v) = kv.get_list("convs_up")? {
            self.convs_up = v;
        }
        if let Some(stages) = kv.get::<usize>("stages")? {
            if stages != self.stages() {
                return Err(Error::Config {
                    key: "stages".into(),
                    detail: format!(
                        "stages={stages} disagrees with {} entries in convs_down",
                        self.stages()
                    ),
                });
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn write_to(&self, kv: &mut KvConfig) {
        kv.set("stages", self.stages());
        kv.set("base_channels", self.base_channels);
        kv.set("input", format_xyz(&self.input));
        kv.set("convs_down", format_list(&self.convs_down));
        kv.set("convs_up", format_list(&self.convs_up));
        kv.set("kernel", self.kernel);
    }
}

/// Convolution followed by an optional per-channel PReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Unit {
    w: ParamId,
    b: ParamId,
    slope: Option<ParamId>,
    geom: ConvGeometry,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderStage {
    convs: Vec<Unit>,
    down: Option<Unit>,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage {
    up: Unit,
    convs: Vec<Unit>,
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<N> {
    /// Output of each encoder stage (after the residual add), top first.
    pub encoder: Vec<N>,
    /// Output of each decoder stage, deepest first.
    pub decoder: Vec<N>,
    /// Two-channel logits.
    pub logits: N,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VNetModel {
    config: NetworkConfig,
    params: ParamStore,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: Unit,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`.
    fn he(&mut self, shape: Shape5, fan_in: usize) -> Tensor5 {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor5::from_vec(shape, data).expect("shape product")
    }
}

fn conv_unit(
    params: &mut ParamStore,
    init: &mut Init,
    name: &str,
    cin: usize,
    cout: usize,
    geom: ConvGeometry,
) -> (ParamId, ParamId) {
    let k = geom.kernel;
    let w = params.add(
        format!("{name}.weight"),
        init.he([cout, cin, k, k, k], cin * k * k * k),
    );
    let b = params.add(format!("{name}.bias"), bias(cout));
    (w, b)
}

fn bias(c: usize) -> Tensor5 {
    Tensor5::zeros([1, c, 1, 1, 1])
}

fn slopes(c: usize) -> Tensor5 {
    Tensor5::full([1, c, 1, 1, 1], PRELU_INIT_SLOPE)
}

impl VNetModel {
    /// Instantiates every parameter block; identical seeds give identical
    /// parameters.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate_buildable()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let k = config.kernel;
        let same = ConvGeometry::new(k, 1, config.padding());

        let enc_specs = config.encoder();
        let mut encoder = Vec::new();
        for (level, spec) in enc_specs.iter().enumerate() {
            let mut convs = Vec::new();
            for i in 0..spec.convs {
                let cin = if level == 0 && i == 0 {
                    config.in_channels
                } else {
                    spec.channels
                };
                let name = format!("enc{}.conv{}", level + 1, i + 1);
                let (w, b) = conv_unit(&mut params, &mut init, &name, cin, spec.channels, same);
                let slope = params.add(format!("{name}.prelu"), slopes(spec.channels));
                convs.push(Unit {
                    w,
                    b,
                    slope: Some(slope),
                    geom: same,
                });
            }
            let down = if level + 1 < enc_specs.len() {
                let name = format!("down{}", level + 1);
                let cout = enc_specs[level + 1].channels;
                let (w, b) =
                    conv_unit(&mut params, &mut init, &name, spec.channels, cout, RESAMPLE);
                let slope = params.add(format!("{name}.prelu"), slopes(cout));
                Some(Unit {
                    w,
                    b,
                    slope: Some(slope),
                    geom: RESAMPLE,
                })
            } else {
                None
            };
            encoder.push(EncoderStage { convs, down });
        }

        let mut decoder = Vec::new();
        let levels = enc_specs.len() - 1;
        let mut width_below = enc_specs[levels].channels;
        for (i, spec) in config.decoder().iter().enumerate() {
            let level = levels - 1 - i;
            let skip = enc_specs[level].channels;
            let name = format!("up{}", level + 1);
            // Transposed kernel layout (c_in, c_out, k, k, k); each output
            // voxel sees one input voxel per input channel.
            let w = params.add(
                format!("{name}.weight"),
                init.he([width_below, skip, 2, 2, 2], width_below),
            );
            let b = params.add(format!("{name}.bias"), bias(skip));
            let slope = params.add(format!("{name}.prelu"), slopes(skip));
            let up = Unit {
                w,
                b,
                slope: Some(slope),
                geom: RESAMPLE,
            };
            let mut convs = Vec::new();
            for j in 0..spec.convs {
                let name = format!("dec{}.conv{}", level + 1, j + 1);
                let (w, b) = conv_unit(
                    &mut params,
                    &mut init,
                    &name,
                    spec.channels,
                    spec.channels,
                    same,
                );
                let slope = params.add(format!("{name}.prelu"), slopes(spec.channels));
                convs.push(Unit {
                    w,
                    b,
                    slope: Some(slope),
                    geom: same,
                });
            }
            decoder.push(DecoderStage { up, convs });
            width_below = spec.channels;
        }

        let head_geom = ConvGeometry::new(1, 1, 0);
        let (w, b) = conv_unit(&mut params, &mut init, "head", width_below, 2, head_geom);
        let head = Unit {
            w,
            b,
            slope: None,
            geom: head_geom,
        };
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Parameter blocks of the convolutions inside encoder stage `level`
    /// (weights and biases, not PReLU slopes).
    pub fn encoder_conv_params(&self, level: usize) -> Vec<ParamId> {
        self.encoder[level]
            .convs
            .iter()
            .flat_map(|u| [u.w, u.b])
            .collect()
    }

    pub fn check_input(&self, shape: Shape5) -> Result<()> {
        let [_, c, d, h, w] = shape;
        if c != self.config.in_channels || [d, h, w] != self.config.input {
            return Err(Error::Shape(format!(
                "model expects (n, {}, {}, {}, {}) input, got {shape:?}",
                self.config.in_channels,
                self.config.input[0],
                self.config.input[1],
                self.config.input[2]
            )));
        }
        Ok(())
    }

    fn apply<G: Graph>(g: &mut G, unit: &Unit, x: &G::Node, up: bool) -> Result<G::Node> {
        let y = if up {
            g.up_conv(x, unit.w, unit.b, unit.geom)?
        } else {
            g.conv(x, unit.w, unit.b, unit.geom)?
        };
        match unit.slope {
            Some(s) => g.prelu(&y, s),
            None => Ok(y),
        }
    }

    fn residual_stage<G: Graph>(
        g: &mut G,
        convs: &[Unit],
        input: &G::Node,
        shortcut: &G::Node,
    ) -> Result<G::Node> {
        let mut h = input.clone();
        for unit in convs {
            h = Self::apply(g, unit, &h, false)?;
        }
        g.add(&h, shortcut)
    }

    /// Runs the network on `x` (`(n, in_channels, d, h, w)`), returning the
    /// two-channel logits and the stage outputs.
    pub fn forward<G: Graph>(&self, g: &mut G, x: G::Node) -> Result<ForwardTrace<G::Node>> {
        self.check_input(g.shape(&x))?;
        let mut encoder_out = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (level, stage) in self.encoder.iter().enumerate() {
            let shortcut = if level == 0 {
                let width = self.config.base_channels / self.config.in_channels;
                g.tile_channels(&h, width)?
            } else {
                h.clone()
            };
            let out = Self::residual_stage(g, &stage.convs, &h, &shortcut)?;
            h = match &stage.down {
                Some(down) => Self::apply(g, down, &out, false)?,
                None => out.clone(),
            };
            encoder_out.push(out);
        }
        let levels = self.encoder.len() - 1;
        let mut decoder_out = Vec::with_capacity(self.decoder.len());
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = levels - 1 - i;
            let up = Self::apply(g, &stage.up, &h, true)?;
            let merged = g.concat(&up, &encoder_out[level])?;
            h = Self::residual_stage(g, &stage.convs, &merged, &merged)?;
            decoder_out.push(h.clone());
        }
        let logits = Self::apply(g, &self.head, &h, false)?;
        Ok(ForwardTrace {
            encoder: encoder_out,
            decoder: decoder_out,
            logits,
        })
    }

    /// Forward pass without gradient bookkeeping; returns voxelwise softmax
    /// probabilities `(n, 2, d, h, w)`, channel 1 = foreground.
    pub fn predict(&self, x: &Tensor5) -> Result<Tensor5> {
        let mut g = Eager::new(&self.params);
        let trace = self.forward(&mut g, x.clone())?;
        ops::softmax2(&trace.logits)
    }
}

/// One row of the receptive-field table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfRow {
    pub layer: String,
    /// Grid the layer group operates on, (z, y, x).
    pub input_size: [usize; 3],
    /// Cubic receptive-field extent in input voxels.
    pub receptive_field: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceptiveFieldReport {
    pub rows: Vec<RfRow>,
}

impl ReceptiveFieldReport {
    pub fn get(&self, layer: &str) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.layer == layer)
            .map(|r| r.receptive_field)
    }

    /// Encoder rows on the left, decoder rows (deepest first) and the output
    /// on the right.
    pub fn to_table(&self) -> String {
        let stages = self
            .rows
            .iter()
            .filter(|r| r.layer.starts_with("L-"))
            .count();
        let (left, right) = self.rows.split_at(stages);
        let cell = |r: Option<&RfRow>| match r {
            Some(r) => (
                r.layer.clone(),
                format_size(&r.input_size),
                format!("{0}x{0}x{0}", r.receptive_field),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        let mut rows = vec![(
            (
                "Layer".to_string(),
                "Input Size".to_string(),
                "Receptive Field".to_string(),
            ),
            (
                "Layer".to_string(),
                "Input Size".to_string(),
                "Receptive Field".to_string(),
            ),
        )];
        for i in 0..left.len().max(right.len()) {
            rows.push((cell(left.get(i)), cell(right.get(i))));
        }
        let width = |f: &dyn Fn(&((String, String, String), (String, String, String))) -> usize| {
            rows.iter().map(f).max().unwrap_or(0)
        };
        let w = [
            width(&|r| r.0 .0.len()),
            width(&|r| r.0 .1.len()),
            width(&|r| r.0 .2.len()),
            width(&|r| r.1 .0.len()),
            width(&|r| r.1 .1.len()),
            width(&|r| r.1 .2.len()),
        ];
        let mut out = String::new();
        for (a, b) in &rows {
            let line = format!(
                "{:<w0$}  {:>w1$}  {:>w2$}  |  {:<w3$}  {:>w4$}  {:>w5$}",
                a.0,
                a.1,
                a.2,
                b.0,
                b.1,
                b.2,
                w0 = w[0],
                w1 = w[1],
                w2 = w[2],
                w3 = w[3],
                w4 = w[4],
                w5 = w[5]
            );
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

fn format_size(zyx: &[usize; 3]) -> String {
    if zyx[0] == zyx[1] && zyx[1] == zyx[2] {
        zyx[0].to_string()
    } else {
        format!("{}x{}x{}", zyx[2], zyx[1], zyx[0])
    }
}

/// Theoretical receptive fields along the main path.
///
/// With extent `r` and jump `j` (input voxels between adjacent units), a
/// convolution of kernel `k` and stride `s` gives `r' = r + (k-1) j`,
/// `j' = j s`. A stride-2 transposed convolution first halves the jump and
/// then grows the extent by `(k-1) j'`.
pub fn receptive_fields(config: &NetworkConfig) -> ReceptiveFieldReport {
    let mut r = 1usize;
    let mut j = 1usize;
    let mut rows = Vec::new();
    let stages = config.stages();
    let k = config.kernel;
    for (level, &convs) in config.convs_down.iter().enumerate() {
        if level > 0 {
            r += (RESAMPLE.kernel - 1) * j;
            j *= RESAMPLE.stride;
        }
        r += convs * (k - 1) * j;
        rows.push(RfRow {
            layer: format!("L-Stage {}", level + 1),
            input_size: config.level_dims(level),
            receptive_field: r,
        });
    }
    for (i, &convs) in config.convs_up.iter().enumerate() {
        let level = stages - 2 - i;
        j /= RESAMPLE.stride;
        r += (RESAMPLE.kernel - 1) * j;
        r += convs * (k - 1) * j;
        rows.push(RfRow {
            layer: format!("R-Stage {}", level + 1),
            input_size: config.level_dims(level),
            receptive_field: r,
        });
    }
    // 1x1x1 head leaves the extent unchanged.
    rows.push(RfRow {
        layer: "Output".into(),
        input_size: config.input,
        receptive_field: r,
    });
    ReceptiveFieldReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn single_conv_receptive_field() {
        let cfg = NetworkConfig {
            convs_down: vec![1],
            convs_up: vec![],
            ..NetworkConfig::default()
        };
        let rf = receptive_fields(&cfg);
        assert_eq!(rf.get("L-Stage 1"), Some(5));
        assert_eq!(rf.get("Output"), Some(5));
    }

    #[test]
    fn default_output_shape_matches_input() {
        let cfg = NetworkConfig::default();
        cfg.validate_buildable().unwrap();
        assert_eq!(cfg.output_shape(1), [1, 2, 64, 128, 128]);
    }

    #[test]
    fn channel_doubling() {
        let enc = NetworkConfig::default().encoder();
        let widths: Vec<usize> = enc.iter().map(|s| s.channels).collect();
        assert_eq!(widths, vec![16, 32, 64, 128, 256]);
        let dec: Vec<usize> = NetworkConfig::default()
            .decoder()
            .iter()
            .map(|s| s.channels)
            .collect();
        assert_eq!(dec, vec![256, 128, 64, 32]);
    }

    #[test]
    fn config_errors() {
        let mut cfg = NetworkConfig::desk();
        cfg.input = [30, 32, 32];
        assert!(VNetModel::build(cfg, 0).is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.convs_up = vec![1];
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.convs_down = vec![1, 4, 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let mut kv = KvConfig::new();
        NetworkConfig::default().write_to(&mut kv);
        let back = NetworkConfig::desk().overlay(&kv).unwrap();
        assert_eq!(back, NetworkConfig::default());
        let kv = KvConfig::parse("stages=4").unwrap();
        assert!(NetworkConfig::default().overlay(&kv).is_err());
    }

    fn toy() -> NetworkConfig {
        NetworkConfig {
            input: [8, 8, 8],
            in_channels: 1,
            base_channels: 2,
            kernel: 3,
            convs_down: vec![1, 2, 1],
            convs_up: vec![1, 1],
        }
    }

    #[test]
    fn eager_and_tape_agree() {
        let model = VNetModel::build(toy(), 3).unwrap();
        let x = Tensor5::from_vec(
            [2, 1, 8, 8, 8],
            (0..1024)
                .map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0)
                .collect(),
        )
        .unwrap();
        let probs = model.predict(&x).unwrap();
        assert_eq!(probs.shape(), [2, 2, 8, 8, 8]);
        let mut tape = Tape::new(model.params());
        let xv = tape.input(x);
        let trace = model.forward(&mut tape, xv).unwrap();
        let p = tape.softmax(trace.logits).unwrap();
        assert_eq!(tape.value(p), &probs);
        assert!(model.predict(&Tensor5::zeros([1, 1, 8, 8, 4])).is_err());
    }
}
