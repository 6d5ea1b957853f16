//! Shared-weight (Siamese) autoencoder with optional geographic-temporal fusion.
//!
//! Both branches of a pair run through the same [`Params`]. The encoder maps a
//! case to a latent code; the decoder maps the code back to feature space.
//! With [`Fusion::DecoderAdd`] the pair's log distance and log interval pass
//! through a linear layer whose output is added to the first decoder layer's
//! activation. With [`Fusion::InputConcat`] the same two values are appended to
//! each branch's encoder input instead.
//!
//! Every layer but the final decoder layer is followed by the activation. The
//! backward pass is written out by hand for this fixed graph.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::GeoTemporalPair;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFNP";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fusion {
    None,
    InputConcat,
    DecoderAdd,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sine => "sine",
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Sine => 1,
        }
    }
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::None => "none",
            Fusion::InputConcat => "input_concat",
            Fusion::DecoderAdd => "decoder_add",
        }
    }

    fn code(self) -> u32 {
        match self {
            Fusion::None => 0,
            Fusion::InputConcat => 1,
            Fusion::DecoderAdd => 2,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sine" | "siren" => Ok(Activation::Sine),
            other => Err(format!("unknown activation `{other}` (expected relu|sine)")),
        }
    }
}

impl FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Fusion::None),
            "input_concat" | "concat" => Ok(Fusion::InputConcat),
            "decoder_add" | "decoder" => Ok(Fusion::DecoderAdd),
            other => Err(format!(
                "unknown fusion `{other}` (expected none|input_concat|decoder_add)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Layers per side.
    pub depth: usize,
    pub activation: Activation,
    pub skip_connections: bool,
    pub fusion: Fusion,
    pub sine_omega0: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 446,
            hidden_dim: 128,
            latent_dim: 8,
            depth: 2,
            activation: Activation::Relu,
            skip_connections: false,
            fusion: Fusion::DecoderAdd,
            sine_omega0: 30.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be >= 1"));
        }
        if self.input_dim < self.latent_dim {
            return Err(Error::config("input_dim", "must be >= latent_dim"));
        }
        if self.depth == 0 {
            return Err(Error::config("depth", "must be >= 1"));
        }
        if self.depth == 2 && self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be >= 1"));
        }
        if self.activation == Activation::Sine && !(self.sine_omega0.is_finite() && self.sine_omega0 > 0.0) {
            return Err(Error::config("sine_omega0", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Feature-space widths from input to latent, `depth + 1` entries.
    ///
    /// Depth 2 uses `hidden_dim`; other depths interpolate geometrically
    /// between `input_dim` and `latent_dim`.
    pub fn widths(&self) -> Vec<usize> {
        if self.depth == 2 {
            return vec![self.input_dim, self.hidden_dim, self.latent_dim];
        }
        let ratio = self.latent_dim as f64 / self.input_dim as f64;
        (0..=self.depth)
            .map(|k| match k {
                0 => self.input_dim,
                k if k == self.depth => self.latent_dim,
                k => ((self.input_dim as f64) * ratio.powf(k as f64 / self.depth as f64))
                    .round()
                    .max(1.0) as usize,
            })
            .collect()
    }

    /// Width of the vector fed to the first encoder layer.
    pub fn encoder_input_dim(&self) -> usize {
        match self.fusion {
            Fusion::InputConcat => self.input_dim + 2,
            _ => self.input_dim,
        }
    }

    /// (fan_in, fan_out) per encoder layer.
    fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        let w = self.widths();
        (0..self.depth)
            .map(|k| {
                let fan_in = if k == 0 { self.encoder_input_dim() } else { w[k] };
                (fan_in, w[k + 1])
            })
            .collect()
    }

    fn decoder_shapes(&self) -> Vec<(usize, usize)> {
        let mut w = self.widths();
        w.reverse();
        (0..self.depth).map(|k| (w[k], w[k + 1])).collect()
    }

    fn fusion_width(&self) -> Option<usize> {
        (self.fusion == Fusion::DecoderAdd).then(|| self.decoder_shapes()[0].1)
    }
}

/// Number of scalar parameters implied by a configuration.
pub fn num_params(config: &NetConfig) -> usize {
    let dense = |(i, o): (usize, usize)| i * o + o;
    let enc: usize = config.encoder_shapes().into_iter().map(dense).sum();
    let dec: usize = config.decoder_shapes().into_iter().map(dense).sum();
    let fusion = config.fusion_width().map_or(0, |w| dense((2, w)));
    enc + dec + fusion
}

/// Fully connected layer, weight stored row-major as `fan_out x fan_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Dense {
            fan_in,
            fan_out,
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.fan_in..(o + 1) * self.fan_in]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.fan_in);
        self.bias
            .iter()
            .enumerate()
            .map(|(o, b)| b + dot(self.row(o), x))
            .collect()
    }
}

/// Four interleaved partial sums so the loop vectorises; the summation order
/// is fixed, so results stay deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &mut y[..n]);
    let mut yc = y.chunks_exact_mut(4);
    let mut xc = x.chunks_exact(4);
    for (yy, xx) in (&mut yc).zip(&mut xc) {
        for k in 0..4 {
            yy[k] += alpha * xx[k];
        }
    }
    for (yi, xi) in yc.into_remainder().iter_mut().zip(xc.remainder()) {
        *yi += alpha * xi;
    }
}

/// All learnable weights. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub config: NetConfig,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
    /// 2 -> first decoder width; present iff fusion is `DecoderAdd`.
    pub fusion: Option<Dense>,
}

pub type Grads = Params;

pub fn init_params(config: &NetConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = config.sine_omega0;
    let mut first = true;
    let mut layer = |(fan_in, fan_out): (usize, usize), rng: &mut ChaCha8Rng| {
        let bound = match config.activation {
            Activation::Relu => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Activation::Sine if first => 1.0 / fan_in as f64,
            Activation::Sine => (6.0 / fan_in as f64).sqrt() / omega,
        };
        first = false;
        Dense::uniform(fan_in, fan_out, bound, rng)
    };
    let encoder = config.encoder_shapes().into_iter().map(|s| layer(s, &mut rng)).collect();
    let decoder = config.decoder_shapes().into_iter().map(|s| layer(s, &mut rng)).collect();
    let fusion = config.fusion_width().map(|w| layer((2, w), &mut rng));
    Ok(Params {
        config: *config,
        encoder,
        decoder,
        fusion,
    })
}

impl Params {
    pub fn zeros(config: &NetConfig) -> Params {
        Params {
            config: *config,
            encoder: config.encoder_shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
            decoder: config.decoder_shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
            fusion: config.fusion_width().map(|w| Dense::zeros(2, w)),
        }
    }

    pub fn zeros_like(&self) -> Params {
        Params::zeros(&self.config)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(&self.decoder).chain(&self.fusion)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(self.fusion.iter_mut())
    }

    /// Flat views in declaration order: each layer's weight then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn activate(act: Activation, omega: f64, z: f64) -> f64 {
    match act {
        Activation::Relu => z.max(0.0),
        Activation::Sine => (omega * z).sin(),
    }
}

/// Derivative; the ReLU subgradient at 0 is 0.
fn activate_grad(act: Activation, omega: f64, z: f64) -> f64 {
    match act {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sine => omega * (omega * z).cos(),
    }
}

/// Cached intermediate values of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

/// One branch of a pair: encoder input, every layer's pre-activation and output.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchTrace {
    pub input: Vec<f64>,
    pub encoder: Vec<LayerTrace>,
    pub decoder: Vec<LayerTrace>,
}

impl BranchTrace {
    pub fn latent(&self) -> &[f64] {
        &self.encoder.last().expect("depth >= 1").out
    }

    pub fn reconstruction(&self) -> &[f64] {
        &self.decoder.last().expect("depth >= 1").out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub geo: GeoTemporalPair,
    pub branches: [BranchTrace; 2],
}

impl ForwardTrace {
    pub fn latent(&self, branch: usize) -> &[f64] {
        self.branches[branch].latent()
    }

    pub fn reconstruction(&self, branch: usize) -> &[f64] {
        self.branches[branch].reconstruction()
    }
}

/// Gradients of the scalar loss with respect to the four trace heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub latent: [Vec<f64>; 2],
    pub reconstruction: [Vec<f64>; 2],
}

impl HeadGrads {
    pub fn zeros(config: &NetConfig) -> Self {
        let l = vec![0.0; config.latent_dim];
        let r = vec![0.0; config.input_dim];
        HeadGrads {
            latent: [l.clone(), l],
            reconstruction: [r.clone(), r],
        }
    }
}

/// Build the encoder input for a case: features, plus the pair's geo values
/// when fusion is `InputConcat`.
pub fn encoder_input(config: &NetConfig, features: &[f64], geo: &GeoTemporalPair) -> Vec<f64> {
    let mut x = features.to_vec();
    if config.fusion == Fusion::InputConcat {
        x.extend(geo.as_array());
    }
    x
}

fn layer_forward(
    layer: &Dense,
    input: &[f64],
    activation: Option<(Activation, f64)>,
    skip: bool,
    extra: Option<&[f64]>,
) -> LayerTrace {
    let pre = layer.apply(input);
    let mut out: Vec<f64> = match activation {
        Some((act, omega)) => pre.iter().map(|&z| activate(act, omega, z)).collect(),
        None => pre.clone(),
    };
    if skip && layer.fan_in == layer.fan_out {
        axpy(1.0, input, &mut out);
    }
    if let Some(e) = extra {
        axpy(1.0, e, &mut out);
    }
    LayerTrace { pre, out }
}

fn fusion_output(params: &Params, geo: &GeoTemporalPair) -> Option<Vec<f64>> {
    params.fusion.as_ref().map(|f| f.apply(&geo.as_array()))
}

fn encode_trace(params: &Params, x: &[f64]) -> Vec<LayerTrace> {
    let cfg = &params.config;
    let act = Some((cfg.activation, cfg.sine_omega0));
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(params.encoder.len());
    for (k, layer) in params.encoder.iter().enumerate() {
        let input = if k == 0 { x } else { &traces[k - 1].out };
        let t = layer_forward(layer, input, act, cfg.skip_connections, None);
        traces.push(t);
    }
    traces
}

fn decode_trace(params: &Params, latent: &[f64], fused: Option<&[f64]>) -> Vec<LayerTrace> {
    let cfg = &params.config;
    let n = params.decoder.len();
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(n);
    for (k, layer) in params.decoder.iter().enumerate() {
        let input = if k == 0 { latent } else { &traces[k - 1].out };
        let last = k + 1 == n;
        let act = (!last).then_some((cfg.activation, cfg.sine_omega0));
        let skip = cfg.skip_connections && !last;
        let extra = if k == 0 { fused } else { None };
        let t = layer_forward(layer, input, act, skip, extra);
        traces.push(t);
    }
    traces
}

/// Latent code of one (already assembled) encoder input.
pub fn encode(params: &Params, x: &[f64]) -> Result<Vec<f64>> {
    let expected = params.config.encoder_input_dim();
    if x.len() != expected {
        return Err(Error::Shape(format!("encoder input has length {}, expected {expected}", x.len())));
    }
    Ok(encode_trace(params, x).pop().expect("depth >= 1").out)
}

/// Feature part of the first encoder layer's pre-activation (bias included)
/// under `InputConcat` fusion. Combine with a pair's geo values through
/// [`encode_concat_partial`].
pub fn concat_partial(params: &Params, features: &[f64]) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if cfg.fusion != Fusion::InputConcat {
        return Err(Error::InvalidInput("partial encoding applies to input_concat fusion only".into()));
    }
    if features.len() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "input has length {}, expected {}",
            features.len(),
            cfg.input_dim
        )));
    }
    let first = &params.encoder[0];
    Ok((0..first.fan_out)
        .map(|o| first.bias[o] + dot(&first.row(o)[..cfg.input_dim], features))
        .collect())
}

/// Latent code from a [`concat_partial`] and the pair's geo values. Agrees
/// with [`encode`] up to floating-point summation order.
pub fn encode_concat_partial(params: &Params, partial: &[f64], geo: &GeoTemporalPair) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let first = &params.encoder[0];
    if partial.len() != first.fan_out {
        return Err(Error::Shape("partial does not match the first encoder layer".into()));
    }
    if cfg.skip_connections && first.fan_in == first.fan_out {
        return Err(Error::InvalidInput("first layer has an identity shortcut; use encode".into()));
    }
    let m = cfg.input_dim;
    let [g0, g1] = geo.as_array();
    let mut h: Vec<f64> = partial
        .iter()
        .enumerate()
        .map(|(o, &p)| {
            let row = first.row(o);
            activate(cfg.activation, cfg.sine_omega0, p + row[m] * g0 + row[m + 1] * g1)
        })
        .collect();
    for layer in &params.encoder[1..] {
        h = layer_forward(layer, &h, Some((cfg.activation, cfg.sine_omega0)), cfg.skip_connections, None).out;
    }
    Ok(h)
}

pub fn decode(params: &Params, latent: &[f64], geo: Option<&GeoTemporalPair>) -> Result<Vec<f64>> {
    if latent.len() != params.config.latent_dim {
        return Err(Error::Shape(format!(
            "latent has length {}, expected {}",
            latent.len(),
            params.config.latent_dim
        )));
    }
    let fused = match (params.config.fusion, geo) {
        (Fusion::DecoderAdd, None) => {
            return Err(Error::InvalidInput("decoder_add fusion needs geo-temporal input".into()))
        }
        (Fusion::DecoderAdd, Some(g)) => fusion_output(params, g),
        _ => None,
    };
    Ok(decode_trace(params, latent, fused.as_deref())
        .pop()
        .expect("depth >= 1")
        .out)
}

/// Run both branches with shared weights. `x1`, `x2` are feature vectors of
/// length `input_dim`; geo enters both branches identically.
pub fn forward_pair(params: &Params, x1: &[f64], x2: &[f64], geo: &GeoTemporalPair) -> Result<ForwardTrace> {
    let cfg = &params.config;
    for x in [x1, x2] {
        if x.len() != cfg.input_dim {
            return Err(Error::Shape(format!("input has length {}, expected {}", x.len(), cfg.input_dim)));
        }
    }
    let fused = fusion_output(params, geo);
    let branch = |x: &[f64]| {
        let input = encoder_input(cfg, x, geo);
        let encoder = encode_trace(params, &input);
        let decoder = decode_trace(params, &encoder.last().expect("depth >= 1").out, fused.as_deref());
        BranchTrace { input, encoder, decoder }
    };
    Ok(ForwardTrace {
        geo: *geo,
        branches: [branch(x1), branch(x2)],
    })
}

/// Backward through one layer. `d_out` is the gradient w.r.t. the layer output.
/// Returns the gradient w.r.t. the layer input when `want_input` is set.
fn layer_backward(
    layer: &Dense,
    grad: &mut Dense,
    input: &[f64],
    trace: &LayerTrace,
    d_out: &[f64],
    activation: Option<(Activation, f64)>,
    skip: bool,
    want_input: bool,
) -> Option<Vec<f64>> {
    let dz: Vec<f64> = match activation {
        Some((act, omega)) => d_out
            .iter()
            .zip(&trace.pre)
            .map(|(&g, &z)| g * activate_grad(act, omega, z))
            .collect(),
        None => d_out.to_vec(),
    };
    let mut d_in = want_input.then(|| vec![0.0; layer.fan_in]);
    for (o, &g) in dz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad.bias[o] += g;
        axpy(g, input, &mut grad.weight[o * layer.fan_in..(o + 1) * layer.fan_in]);
        if let Some(d) = d_in.as_mut() {
            axpy(g, layer.row(o), d);
        }
    }
    if let Some(d) = d_in.as_mut() {
        if skip && layer.fan_in == layer.fan_out {
            axpy(1.0, d_out, d);
        }
    }
    d_in
}

/// Accumulate the parameter gradients of one pair into `grads`.
pub fn backward_into(params: &Params, trace: &ForwardTrace, heads: &HeadGrads, grads: &mut Grads) -> Result<()> {
    let cfg = &params.config;
    if heads.latent.iter().any(|g| g.len() != cfg.latent_dim)
        || heads.reconstruction.iter().any(|g| g.len() != cfg.input_dim)
    {
        return Err(Error::Shape("head gradients do not match the network".into()));
    }
    if grads.config != *cfg {
        return Err(Error::Shape("gradient buffer built for another configuration".into()));
    }
    let act = Some((cfg.activation, cfg.sine_omega0));
    let n = params.decoder.len();
    let geo = trace.geo.as_array();
    for (b, branch) in trace.branches.iter().enumerate() {
        // decoder, last layer first
        let mut d = heads.reconstruction[b].clone();
        for k in (0..n).rev() {
            let last = k + 1 == n;
            if k == 0 {
                // the fusion output is added after the activation
                if let Some(gf) = grads.fusion.as_mut() {
                    for (o, &g) in d.iter().enumerate() {
                        gf.bias[o] += g;
                        gf.weight[2 * o] += g * geo[0];
                        gf.weight[2 * o + 1] += g * geo[1];
                    }
                }
            }
            let input = if k == 0 { branch.latent() } else { &branch.decoder[k - 1].out };
            d = layer_backward(
                &params.decoder[k],
                &mut grads.decoder[k],
                input,
                &branch.decoder[k],
                &d,
                (!last).then_some((cfg.activation, cfg.sine_omega0)),
                cfg.skip_connections && !last,
                true,
            )
            .expect("input gradient requested");
        }
        axpy(1.0, &heads.latent[b], &mut d);
        for k in (0..params.encoder.len()).rev() {
            let input = if k == 0 { &branch.input } else { &branch.encoder[k - 1].out };
            match layer_backward(
                &params.encoder[k],
                &mut grads.encoder[k],
                input,
                &branch.encoder[k],
                &d,
                act,
                cfg.skip_connections,
                k > 0,
            ) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
    Ok(())
}

/// Exact parameter gradients for one pair given the head gradients.
pub fn backward(params: &Params, trace: &ForwardTrace, heads: &HeadGrads) -> Result<Grads> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, heads, &mut grads)?;
    Ok(grads)
}

pub fn write_params<W: Write>(params: &Params, out: &mut W) -> std::io::Result<()> {
    let c = &params.config;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [c.input_dim, c.hidden_dim, c.latent_dim, c.depth] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&c.activation.code().to_le_bytes())?;
    out.write_all(&u32::from(c.skip_connections).to_le_bytes())?;
    out.write_all(&c.fusion.code().to_le_bytes())?;
    out.write_all(&c.sine_omega0.to_le_bytes())?;
    for t in params.tensors() {
        for v in t {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::InvalidInput(format!("truncated params header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::InvalidInput(format!("truncated params file: {e}")))?;
    Ok(f64::from_le_bytes(buf))
}

pub fn read_params<R: Read>(input: &mut R) -> Result<Params> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::InvalidInput(format!("truncated params header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput("not a params file (bad magic)".into()));
    }
    let version = read_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(Error::InvalidInput(format!("unsupported params version {version}")));
    }
    let input_dim = read_u32(input)? as usize;
    let hidden_dim = read_u32(input)? as usize;
    let latent_dim = read_u32(input)? as usize;
    let depth = read_u32(input)? as usize;
    let activation = match read_u32(input)? {
        0 => Activation::Relu,
        1 => Activation::Sine,
        other => return Err(Error::InvalidInput(format!("unknown activation code {other}"))),
    };
    let skip_connections = match read_u32(input)? {
        0 => false,
        1 => true,
        other => return Err(Error::InvalidInput(format!("bad skip flag {other}"))),
    };
    let fusion = match read_u32(input)? {
        0 => Fusion::None,
        1 => Fusion::InputConcat,
        2 => Fusion::DecoderAdd,
        other => return Err(Error::InvalidInput(format!("unknown fusion code {other}"))),
    };
    let sine_omega0 = read_f64(input)?;
    let config = NetConfig {
        input_dim,
        hidden_dim,
        latent_dim,
        depth,
        activation,
        skip_connections,
        fusion,
        sine_omega0,
    };
    config.validate()?;
    let mut params = Params::zeros(&config);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = read_f64(input)?;
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| Error::InvalidInput(e.to_string()))? != 0 {
        return Err(Error::InvalidInput("trailing bytes after params".into()));
    }
    Ok(params)
}

pub fn save_params(params: &Params, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(64 + 8 * params.num_scalars());
    write_params(params, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Params> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(fusion: Fusion) -> NetConfig {
        NetConfig {
            input_dim: 4,
            hidden_dim: 3,
            latent_dim: 2,
            depth: 2,
            fusion,
            ..NetConfig::default()
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(num_params(&small(Fusion::DecoderAdd)), 57);
        assert_eq!(num_params(&small(Fusion::None)), 48);
        let p = init_params(&small(Fusion::DecoderAdd), 1).unwrap();
        assert_eq!(p.num_scalars(), 57);
        let q = init_params(&small(Fusion::DecoderAdd), 2).unwrap();
        assert_eq!(q.num_scalars(), 57);
        // concat widens the first encoder layer by two inputs
        assert_eq!(num_params(&small(Fusion::InputConcat)), 48 + 2 * 3);
        // 446 -> 128 -> 8 with decoder fusion
        let full = NetConfig::default();
        assert_eq!(num_params(&full), (446 * 128 + 128) + (128 * 8 + 8) + (8 * 128 + 128) + (128 * 446 + 446) + (2 * 128 + 128));
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = NetConfig::default();
        let p = init_params(&cfg, 3).unwrap();
        assert_eq!(p, init_params(&cfg, 3).unwrap());
        let shapes: Vec<(usize, usize)> = p.encoder.iter().map(|l| (l.fan_out, l.fan_in)).collect();
        assert_eq!(shapes, vec![(128, 446), (8, 128)]);
        let shapes: Vec<(usize, usize)> = p.decoder.iter().map(|l| (l.fan_out, l.fan_in)).collect();
        assert_eq!(shapes, vec![(128, 8), (446, 128)]);
        let f = p.fusion.as_ref().unwrap();
        assert_eq!((f.fan_out, f.fan_in), (128, 2));
        assert!(p.all_finite());
        for l in p.layers() {
            assert!(l.bias.iter().all(|&b| b == 0.0));
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            assert!(l.weight.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn sine_init_bounds() {
        let cfg = NetConfig {
            activation: Activation::Sine,
            ..small(Fusion::DecoderAdd)
        };
        let p = init_params(&cfg, 5).unwrap();
        assert!(p.encoder[0].weight.iter().all(|w| w.abs() <= 1.0 / 4.0));
        let later = (6.0f64 / 3.0).sqrt() / 30.0;
        assert!(p.encoder[1].weight.iter().all(|w| w.abs() <= later));
    }

    #[test]
    fn depth_widths_interpolate() {
        let cfg = NetConfig {
            input_dim: 256,
            latent_dim: 4,
            depth: 3,
            ..NetConfig::default()
        };
        assert_eq!(cfg.widths(), vec![256, 64, 16, 4]);
        let cfg = NetConfig { depth: 1, ..cfg };
        assert_eq!(cfg.widths(), vec![256, 4]);
        assert_eq!(num_params(&cfg), (256 * 4 + 4) + (4 * 256 + 256) + (2 * 256 + 256));
    }

    #[test]
    fn zero_params_give_zero_latent() {
        let cfg = small(Fusion::None);
        let p = Params::zeros(&cfg);
        assert_eq!(encode(&p, &[1.0, 0.5, 0.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert!(encode(&p, &[1.0]).is_err());
    }

    #[test]
    fn hand_computed_encoder() {
        // 2 -> 2 -> 1, relu everywhere in the encoder
        let cfg = NetConfig {
            input_dim: 2,
            hidden_dim: 2,
            latent_dim: 1,
            depth: 2,
            fusion: Fusion::None,
            ..NetConfig::default()
        };
        let mut p = Params::zeros(&cfg);
        p.encoder[0].weight = vec![1.0, 2.0, -3.0, 0.5];
        p.encoder[0].bias = vec![0.5, 1.0];
        p.encoder[1].weight = vec![2.0, -1.0];
        p.encoder[1].bias = vec![0.25];
        // h = relu([1*1 + 0.5, -3*1 + 1]) = [1.5, 0]; e = relu(2*1.5 + 0.25) = 3.25
        assert_eq!(encode(&p, &[1.0, 0.0]).unwrap(), vec![3.25]);
    }

    #[test]
    fn hand_computed_decoder_with_fusion() {
        // latent 1 -> hidden 2 -> output 2
        let cfg = NetConfig {
            input_dim: 2,
            hidden_dim: 2,
            latent_dim: 1,
            depth: 2,
            fusion: Fusion::DecoderAdd,
            ..NetConfig::default()
        };
        let mut p = Params::zeros(&cfg);
        p.decoder[0].weight = vec![1.0, -1.0];
        p.decoder[0].bias = vec![0.0, 0.5];
        p.decoder[1].weight = vec![1.0, 2.0, 0.0, -1.0];
        p.decoder[1].bias = vec![0.1, 0.2];
        let f = p.fusion.as_mut().unwrap();
        f.weight = vec![1.0, 0.0, 0.5, 0.5];
        f.bias = vec![0.0, -1.0];
        let geo = GeoTemporalPair { log_distance: 1.0, log_interval: 1.0 };
        // h = relu([2, -2 + 0.5]) + [1, 0.5 + 0.5 - 1] = [2, 0] + [1, 0] = [3, 0]
        // out = [3 + 0 + 0.1, 0 - 0 + 0.2]
        let out = decode(&p, &[2.0], Some(&geo)).unwrap();
        assert_eq!(out, vec![3.1, 0.2]);
        assert!(decode(&p, &[2.0], None).is_err());
    }

    #[test]
    fn zero_fusion_matches_no_fusion() {
        let with = init_params(&small(Fusion::DecoderAdd), 9).unwrap();
        let mut without = Params::zeros(&small(Fusion::None));
        without.encoder = with.encoder.clone();
        without.decoder = with.decoder.clone();
        let geo = GeoTemporalPair::default();
        let latent = [0.3, -0.7];
        assert_eq!(
            decode(&with, &latent, Some(&geo)).unwrap(),
            decode(&without, &latent, None).unwrap()
        );
    }

    #[test]
    fn serialization_round_trip() {
        for fusion in [Fusion::None, Fusion::InputConcat, Fusion::DecoderAdd] {
            let cfg = NetConfig {
                activation: Activation::Sine,
                skip_connections: true,
                ..small(fusion)
            };
            let p = init_params(&cfg, 11).unwrap();
            let mut buf = Vec::new();
            write_params(&p, &mut buf).unwrap();
            assert_eq!(&buf[..4], b"LFNP");
            assert_eq!(buf.len(), 4 + 4 + 7 * 4 + 8 + 8 * num_params(&cfg));
            assert_eq!(read_params(&mut buf.as_slice()).unwrap(), p);
            buf.push(0);
            assert!(read_params(&mut buf.as_slice()).is_err());
        }
    }
}
