//! Geometry-conditioned U-Net predicting a complex mixing matrix per
//! time-frequency tile.

use ambienc_core::array::QuantizedGeometry;
use ambienc_core::dsp::Spectrogram;
use ambienc_core::sh::channel_count;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParameterStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Number of quantization levels per coordinate.
pub const GEOMETRY_LEVELS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub mics: usize,
    pub order: usize,
    pub sample_rate: u32,
    pub fft: usize,
    pub hop: usize,
    pub enc_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub dec_channels: Vec<usize>,
    /// Channels of the strided geometry convolutions.
    pub geom_channels: usize,
    pub kernel: usize,
    pub dropout_enc: f64,
    pub dropout_dec: f64,
    /// Zero-padded (frames, bins) the U-Net runs at.
    pub padded_shape: (usize, usize),
    pub subband_size: usize,
    /// Use the complex modulus in the loss instead of `|Re| + |Im|`.
    pub loss_modulus: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            mics: 5,
            order: 1,
            sample_rate: 24_000,
            fft: 1024,
            hop: 512,
            enc_channels: vec![32, 64, 128, 256],
            bottleneck_channels: 512,
            dec_channels: vec![256, 128, 64, 32],
            geom_channels: 15,
            kernel: 3,
            dropout_enc: 0.25,
            dropout_dec: 0.5,
            padded_shape: (96, 560),
            subband_size: 1,
            loss_modulus: false,
        }
    }
}

impl NetworkConfig {
    /// Reduced channel plan for CPU-scale runs. Dropout is off: a few
    /// hundred steps on a few dozen examples is a fitting exercise.
    pub fn desk() -> Self {
        Self {
            enc_channels: vec![8, 16, 32, 64],
            bottleneck_channels: 128,
            dec_channels: vec![64, 32, 16, 8],
            dropout_enc: 0.0,
            dropout_dec: 0.0,
            ..Self::default()
        }
    }

    pub fn ambi_channels(&self) -> usize {
        channel_count(self.order)
    }

    pub fn bins(&self) -> usize {
        self.fft / 2 + 1
    }

    pub fn output_channels(&self) -> usize {
        2 * self.ambi_channels() * self.mics
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        let levels = self.enc_channels.len();
        if levels == 0 || levels != self.dec_channels.len() {
            return bad(format!(
                "encoder and decoder need the same nonzero depth, got {} and {}",
                levels,
                self.dec_channels.len()
            ));
        }
        if self.mics == 0 || self.geom_channels == 0 || self.bottleneck_channels == 0 {
            return bad("mics, geometry channels and bottleneck channels must be positive".into());
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        let (tp, fp) = self.padded_shape;
        let div = 1usize << levels;
        if tp % div != 0 || fp % div != 0 {
            return bad(format!("padded shape {tp}×{fp} is not divisible by {div}"));
        }
        if self.fft < 2 || self.hop == 0 || self.bins() > fp {
            return bad(format!("{} bins do not fit the padded height {fp}", self.bins()));
        }
        if self.subband_size == 0 || fp % self.subband_size != 0 {
            return bad(format!("sub-band size {} does not divide {fp}", self.subband_size));
        }
        for p in [self.dropout_enc, self.dropout_dec] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout rate {p} outside [0, 1)"));
            }
        }
        if channel_count(self.order) == 0 || self.order > ambienc_core::sh::MAX_ORDER {
            return bad(format!("unsupported order {}", self.order));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderIds {
    geo: Option<ConvIds>,
    gate: ConvIds,
    conv: ConvIds,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    down: ConvIds,
}

#[derive(Debug, Clone)]
struct DecoderIds {
    up: ConvIds,
    conv1: ConvIds,
    conv2: ConvIds,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    encoder: Vec<EncoderIds>,
    bottleneck: [ConvIds; 2],
    decoder: Vec<DecoderIds>,
    head: ConvIds,
}

struct Init<'a, T> {
    store: &'a mut ParameterStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) -> Result<ParamId> {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, gain: f64, bias: f64) -> Result<ConvIds> {
        Ok(ConvIds {
            w: self.weight(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, gain)?,
            b: self.store.add(format!("{name}.bias"), Tensor::filled(&[cout], T::of(bias)))?,
        })
    }
}

/// The model: configuration, parameters and their layout.
#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    cfg: NetworkConfig,
    params: ParameterStore<T>,
    layout: Layout,
}

/// Complex mixing matrices, one per tile, stored `[channel][mic][bin][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingField {
    pub channels: usize,
    pub mics: usize,
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl MixingField {
    pub fn get(&self, c: usize, q: usize, f: usize, t: usize) -> Complex64 {
        self.data[((c * self.mics + q) * self.bins + f) * self.frames + t]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Per-tile product with the microphone spectrogram.
    pub fn apply(&self, x: &Spectrogram) -> Result<Spectrogram> {
        if x.channels != self.mics || x.bins != self.bins || x.frames != self.frames {
            return Err(NnError::Format(format!(
                "mixing field [{}][{}][{}][{}] does not fit spectrogram [{}][{}][{}]",
                self.channels, self.mics, self.bins, self.frames, x.channels, x.bins, x.frames
            )));
        }
        let mut out = Spectrogram::zeros(self.channels, self.bins, self.frames, x.sample_rate, x.fft, x.hop);
        let plane = self.bins * self.frames;
        for c in 0..self.channels {
            for q in 0..self.mics {
                let e = &self.data[(c * self.mics + q) * plane..(c * self.mics + q + 1) * plane];
                let xs = x.channel(q);
                let o = &mut out.data[c * plane..(c + 1) * plane];
                for i in 0..plane {
                    o[i] += e[i] * xs[i];
                }
            }
        }
        Ok(out)
    }

    /// Real-first planar layout used by the graph: `[2·C·Q][bins][frames]`.
    fn from_planar<T: Real>(t: &Tensor<T>, channels: usize, mics: usize) -> Self {
        let (_, bins, frames) = t.dims3();
        let plane = bins * frames;
        let half = channels * mics * plane;
        let data = (0..half)
            .map(|i| Complex64::new(t.data[i].f64(), t.data[half + i].f64()))
            .collect();
        Self {
            channels,
            mics,
            bins,
            frames,
            data,
        }
    }
}

/// Splits a spectrogram into `[2C][bins][frames]`, real parts first.
pub fn spectrogram_to_tensor<T: Real>(s: &Spectrogram) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * s.data.len());
    data.extend(s.data.iter().map(|z| T::of(z.re)));
    data.extend(s.data.iter().map(|z| T::of(z.im)));
    Tensor {
        shape: vec![2 * s.channels, s.bins, s.frames],
        data,
    }
}

/// Inverse of [`spectrogram_to_tensor`]; STFT metadata comes from `like`.
pub fn tensor_to_spectrogram<T: Real>(t: &Tensor<T>, like: &Spectrogram) -> Result<Spectrogram> {
    let (c2, bins, frames) = t.dims3();
    if c2 % 2 != 0 {
        return Err(NnError::Format(format!("{c2} channels do not split into real and imaginary parts")));
    }
    let half = t.len() / 2;
    let mut s = Spectrogram::zeros(c2 / 2, bins, frames, like.sample_rate, like.fft, like.hop);
    for (i, z) in s.data.iter_mut().enumerate() {
        *z = Complex64::new(t.data[i].f64(), t.data[half + i].f64());
    }
    Ok(s)
}

/// Graph handles produced by [`Network::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Mixing matrices cropped to the input size, planar layout.
    pub mixing: Var,
    /// `E·x`, planar layout.
    pub encoded: Var,
}

impl<T: Real> Network<T> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let k = cfg.kernel;
        let q = cfg.mics;
        let (_, fp) = cfg.padded_shape;
        let embedding = init.store.add(
            "geometry.embedding",
            Tensor::randn(&[GEOMETRY_LEVELS, fp], 1.0, &mut init.rng),
        )?;
        let mut encoder = Vec::new();
        let mut cin = 2 * q;
        let mut geo_in = 3 * q;
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            let geo = if i == 0 {
                None
            } else {
                let ids = init.conv(&format!("enc{i}.geometry"), cfg.geom_channels, geo_in, k, 1.0, 0.0)?;
                geo_in = cfg.geom_channels;
                Some(ids)
            };
            // gates start close to one
            let gate = init.conv(&format!("enc{i}.gate"), cin, geo_in, 1, 0.1, 1.0)?;
            let conv = if i == 0 {
                let bands = fp / cfg.subband_size;
                ConvIds {
                    w: init.weight(format!("enc{i}.conv.weight"), &[bands, c, cin, k, k], cin * k * k, 1.0)?,
                    b: init.store.add(format!("enc{i}.conv.bias"), Tensor::zeros(&[bands, c]))?,
                }
            } else {
                init.conv(&format!("enc{i}.conv"), c, cin, k, 1.0, 0.0)?
            };
            let norm_gamma = init.store.add(format!("enc{i}.norm.gamma"), Tensor::filled(&[c], T::one()))?;
            let norm_beta = init.store.add(format!("enc{i}.norm.beta"), Tensor::zeros(&[c]))?;
            let down = init.conv(&format!("enc{i}.down"), c, c, k, 1.0, 0.0)?;
            encoder.push(EncoderIds {
                geo,
                gate,
                conv,
                norm_gamma,
                norm_beta,
                down,
            });
            cin = c;
        }
        let bc = cfg.bottleneck_channels;
        let bottleneck = [
            init.conv("bottleneck.conv1", bc, cin, k, 1.0, 0.0)?,
            init.conv("bottleneck.conv2", bc, bc, k, 1.0, 0.0)?,
        ];
        let mut decoder = Vec::new();
        let mut up_in = bc;
        for (j, &c) in cfg.dec_channels.iter().enumerate() {
            let skip = cfg.enc_channels[cfg.enc_channels.len() - 1 - j];
            // transposed weights are [cin, cout, k, k]; each output sees cin·k²/4 taps
            let up = ConvIds {
                w: init.weight(format!("dec{j}.up.weight"), &[up_in, c, k, k], (up_in * k * k / 4).max(1), 1.0)?,
                b: init.store.add(format!("dec{j}.up.bias"), Tensor::zeros(&[c]))?,
            };
            let conv1 = init.conv(&format!("dec{j}.conv1"), c, c + skip, k, 1.0, 0.0)?;
            let conv2 = init.conv(&format!("dec{j}.conv2"), c, c, k, 1.0, 0.0)?;
            decoder.push(DecoderIds { up, conv1, conv2 });
            up_in = c;
        }
        let head = init.conv("head", cfg.output_channels(), up_in, 1, 0.1, 0.0)?;
        let layout = Layout {
            embedding,
            encoder,
            bottleneck,
            decoder,
            head,
        };
        Ok(Self {
            cfg,
            params: store,
            layout,
        })
    }

    /// Rebuilds a network around loaded parameters; names and shapes must match.
    pub fn from_parts(cfg: NetworkConfig, params: ParameterStore<T>) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        if params.len() != net.params.len() {
            return Err(NnError::Format(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for id in net.params.ids() {
            let name = net.params.name(id);
            let other = params
                .id(name)
                .ok_or_else(|| NnError::Format(format!("missing parameter {name}")))?;
            if other != id || params.value(other).shape != net.params.value(id).shape {
                return Err(NnError::Format(format!("parameter {name} has the wrong shape or position")));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore<T> {
        self.params
    }

    fn check_geometry(&self, qg: &QuantizedGeometry) -> Result<Vec<usize>> {
        if qg.len() != self.cfg.mics {
            return Err(NnError::Input(format!(
                "geometry has {} microphones, the network expects {}",
                qg.len(),
                self.cfg.mics
            )));
        }
        Ok(qg.flat())
    }

    /// Embedded geometry `[3Q][padded bins][padded frames]`.
    pub fn geometry_features(&self, g: &mut Graph<T>, qg: &QuantizedGeometry) -> Result<Var> {
        let idx = self.check_geometry(qg)?;
        let table = g.param(&self.params, self.layout.embedding);
        g.set_scope("geometry");
        g.embedding(table, &idx, self.cfg.padded_shape.0)
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, ids: ConvIds, stride: usize) -> Result<Var> {
        let w = g.param(&self.params, ids.w);
        let b = g.param(&self.params, ids.b);
        let pad = self.params.value(ids.w).shape[2] / 2;
        g.conv2d(x, w, Some(b), [stride, stride], [pad, pad])
    }

    /// Records the forward pass of one example. `x` is the planar
    /// `[2Q][bins][frames]` microphone spectrogram.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, qg: &QuantizedGeometry) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        let (c2, bins, frames) = {
            let s = g.shape(x);
            if s.len() != 3 {
                return Err(NnError::Format(format!("input must be [2Q, bins, frames], got {s:?}")));
            }
            (s[0], s[1], s[2])
        };
        let (tp, fp) = cfg.padded_shape;
        if c2 != 2 * cfg.mics || bins != cfg.bins() || frames > tp || frames == 0 {
            return Err(NnError::Format(format!(
                "input [{c2}, {bins}, {frames}] does not fit {} mics, {} bins and at most {tp} frames",
                cfg.mics,
                cfg.bins()
            )));
        }
        let mut geo = self.geometry_features(g, qg)?;
        g.set_scope("input");
        let mut h = g.pad(x, fp, tp)?;
        let mut skips = Vec::new();
        for (i, ids) in self.layout.encoder.iter().enumerate() {
            g.set_scope(format!("enc{i}"));
            if let Some(geo_ids) = ids.geo {
                let c = self.conv(g, geo, geo_ids, 2)?;
                geo = g.swish(c)?;
            }
            let gate = self.conv(g, geo, ids.gate, 1)?;
            h = g.mul(h, gate)?;
            h = if i == 0 {
                let w = g.param(&self.params, ids.conv.w);
                let b = g.param(&self.params, ids.conv.b);
                g.subband_conv2d(h, w, Some(b), cfg.subband_size)?
            } else {
                self.conv(g, h, ids.conv, 1)?
            };
            h = g.swish(h)?;
            let gamma = g.param(&self.params, ids.norm_gamma);
            let beta = g.param(&self.params, ids.norm_beta);
            h = g.channel_norm(h, gamma, beta)?;
            h = g.dropout(h, cfg.dropout_enc)?;
            skips.push(h);
            h = self.conv(g, h, ids.down, 2)?;
            h = g.swish(h)?;
        }
        g.set_scope("bottleneck");
        for ids in &self.layout.bottleneck {
            h = self.conv(g, h, *ids, 1)?;
            h = g.swish(h)?;
        }
        for (j, ids) in self.layout.decoder.iter().enumerate() {
            g.set_scope(format!("dec{j}"));
            let w = g.param(&self.params, ids.up.w);
            let b = g.param(&self.params, ids.up.b);
            let p = cfg.kernel / 2;
            h = g.conv_transpose2d(h, w, Some(b), [2, 2], [p, p], [1, 1])?;
            let skip = skips[skips.len() - 1 - j];
            h = g.concat(&[h, skip])?;
            h = g.dropout(h, cfg.dropout_dec)?;
            h = self.conv(g, h, ids.conv1, 1)?;
            h = g.swish(h)?;
            h = self.conv(g, h, ids.conv2, 1)?;
            h = g.swish(h)?;
        }
        g.set_scope("head");
        h = self.conv(g, h, self.layout.head, 1)?;
        let mixing = g.crop(h, bins, frames)?;
        g.set_scope("output");
        let encoded = g.apply_mixing(mixing, x, cfg.ambi_channels())?;
        Ok(ForwardVars { mixing, encoded })
    }

    fn check_spectrogram(&self, x: &Spectrogram) -> Result<()> {
        if x.fft != self.cfg.fft || x.hop != self.cfg.hop {
            return Err(NnError::Format(format!(
                "spectrogram uses fft {} hop {}, the network expects fft {} hop {}",
                x.fft, x.hop, self.cfg.fft, self.cfg.hop
            )));
        }
        Ok(())
    }

    /// Eval-mode mixing matrices for one example.
    pub fn predict(&self, x: &Spectrogram, qg: &QuantizedGeometry) -> Result<MixingField> {
        self.check_spectrogram(x)?;
        let mut g = Graph::new(false, ChaCha8Rng::seed_from_u64(0));
        let xv = g.input(spectrogram_to_tensor(x));
        let out = self.forward(&mut g, xv, qg)?;
        Ok(MixingField::from_planar(
            g.value(out.mixing),
            self.cfg.ambi_channels(),
            self.cfg.mics,
        ))
    }

    /// Eval-mode encoding `E·x`.
    pub fn encode(&self, x: &Spectrogram, qg: &QuantizedGeometry) -> Result<Spectrogram> {
        self.check_spectrogram(x)?;
        let mut g = Graph::new(false, ChaCha8Rng::seed_from_u64(0));
        let xv = g.input(spectrogram_to_tensor(x));
        let out = self.forward(&mut g, xv, qg)?;
        tensor_to_spectrogram(g.value(out.encoded), x)
    }

    /// Loss of one example and the gradient of every parameter.
    pub fn loss_and_grads(
        &self,
        x: &Tensor<T>,
        qg: &QuantizedGeometry,
        target: &Tensor<T>,
        train: bool,
        rng: ChaCha8Rng,
    ) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let mut g = Graph::new(train, rng);
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv, qg)?;
        let tv = g.input(target.clone());
        g.set_scope("loss");
        let loss = g.complex_l1(out.encoded, tv, self.cfg.loss_modulus)?;
        let value = g.value(loss).data[0].f64();
        let grads = g.backward(loss)?;
        Ok((value, g.param_grads(&grads, &self.params)))
    }

    /// Eval-mode loss of one example.
    pub fn loss(&self, x: &Tensor<T>, qg: &QuantizedGeometry, target: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new(false, ChaCha8Rng::seed_from_u64(0));
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv, qg)?;
        let tv = g.input(target.clone());
        let loss = g.complex_l1(out.encoded, tv, self.cfg.loss_modulus)?;
        Ok(g.value(loss).data[0].f64())
    }
}
