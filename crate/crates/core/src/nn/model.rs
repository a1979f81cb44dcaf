//! The six window classifiers.
//!
//! Every model maps a `[B, W, C]` batch to `[B, 1]` logits through a shared
//! final affine head named `head.w` / `head.b`. Normalization is layer norm
//! over channels, so no model mixes information across batch items.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParameterSet;
use crate::nn::tensor::Tensor;
use crate::rng;
use crate::scalar::Scalar;
use crate::signals::CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gru,
    Lstm,
    GruFcn,
    LstmFcn,
    Tcn,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 6] = [Arch::Gru, Arch::Lstm, Arch::GruFcn, Arch::LstmFcn, Arch::Tcn, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Gru => "gru",
            Arch::Lstm => "lstm",
            Arch::GruFcn => "gru_fcn",
            Arch::LstmFcn => "lstm_fcn",
            Arch::Tcn => "tcn",
            Arch::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }

    fn recurrent(self) -> Option<Cell> {
        match self {
            Arch::Gru | Arch::GruFcn => Some(Cell::Gru),
            Arch::Lstm | Arch::LstmFcn => Some(Cell::Lstm),
            _ => None,
        }
    }

    fn has_fcn(self) -> bool {
        matches!(self, Arch::GruFcn | Arch::LstmFcn)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cell {
    Gru,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub arch: Arch,
    /// RNN state width, TCN channels, transformer model width.
    pub hidden: usize,
    /// RNN layers, TCN residual blocks or transformer encoder layers.
    pub depth: usize,
    pub fcn_channels: Vec<usize>,
    pub fcn_kernels: Vec<usize>,
    pub tcn_kernel: usize,
    pub heads: usize,
    pub ffn: usize,
    pub positional_encoding: bool,
    pub input_channels: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::new(Arch::GruFcn, 0)
    }
}

impl ModelSpec {
    pub fn new(arch: Arch, seed: u64) -> Self {
        let depth = match arch {
            Arch::Tcn => 4,
            Arch::Transformer => 2,
            _ => 1,
        };
        Self {
            arch,
            hidden: 32,
            depth,
            fcn_channels: vec![32, 64, 32],
            fcn_kernels: vec![8, 5, 3],
            tcn_kernel: 3,
            heads: 2,
            ffn: 64,
            positional_encoding: true,
            input_channels: CHANNELS,
            seed,
        }
    }

    /// A small variant for gradient checks: width 4, FCN 4/6/4.
    pub fn tiny(arch: Arch, seed: u64) -> Self {
        Self {
            hidden: 4,
            depth: match arch {
                Arch::Tcn => 2,
                Arch::Transformer => 1,
                _ => 1,
            },
            fcn_channels: vec![4, 6, 4],
            ffn: 6,
            ..Self::new(arch, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.depth == 0 || self.input_channels == 0 {
            return bad("hidden, depth and input_channels must be >= 1".into());
        }
        if self.arch.has_fcn() {
            if self.fcn_channels.is_empty() || self.fcn_channels.len() != self.fcn_kernels.len() {
                return bad("fcn_channels and fcn_kernels must be non-empty and the same length".into());
            }
            if self.fcn_channels.contains(&0) || self.fcn_kernels.contains(&0) {
                return bad("FCN channels and kernels must be >= 1".into());
            }
        }
        if self.arch == Arch::Tcn && self.tcn_kernel == 0 {
            return bad("tcn_kernel must be >= 1".into());
        }
        if self.arch == Arch::Transformer && (self.heads == 0 || self.hidden % self.heads != 0 || self.ffn == 0) {
            return bad(format!("transformer width {} must be divisible by {} heads", self.hidden, self.heads));
        }
        Ok(())
    }

    /// Width of the vector fed to the head.
    pub fn feature_width(&self) -> usize {
        let fcn = if self.arch.has_fcn() { *self.fcn_channels.last().unwrap() } else { 0 };
        self.hidden + fcn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParameterSet<T>,
}

struct Init<'a, T> {
    params: &'a mut ParameterSet<T>,
    rng: rng::Rng,
}

impl<T: Scalar> Init<'_, T> {
    /// Glorot-uniform weights with the given fan-in / fan-out.
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-limit..limit))).collect();
        self.params.add(name, Tensor::new(shape.to_vec(), data)?)?;
        Ok(())
    }

    fn fill(&mut self, name: &str, n: usize, v: f64) -> Result<()> {
        self.params.add(name, Tensor::full(&[n], T::lit(v)))?;
        Ok(())
    }

    fn affine(&mut self, prefix: &str, i: usize, o: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w"), &[i, o], i, o)?;
        self.fill(&format!("{prefix}.b"), o, 0.0)
    }

    fn conv(&mut self, prefix: &str, k: usize, i: usize, o: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w"), &[k, i, o], k * i, k * o)?;
        self.fill(&format!("{prefix}.b"), o, 0.0)
    }

    fn norm(&mut self, prefix: &str, n: usize) -> Result<()> {
        self.fill(&format!("{prefix}.g"), n, 1.0)?;
        self.fill(&format!("{prefix}.b"), n, 0.0)
    }
}

/// What [`Model::probe`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// `[B, W, C]` activations right before temporal pooling (TCN, transformer, FCN branch).
    Sequence,
    /// `[B, F]` vector fed to the head.
    Features,
}

struct Trunk {
    sequence: Option<Var>,
    features: Var,
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = ParameterSet::new();
        let mut init = Init { params: &mut params, rng: rng::rng_for(spec.seed, &[0x1A17]) };
        let c = spec.input_channels;
        let h = spec.hidden;
        if let Some(cell) = spec.arch.recurrent() {
            let gates = match cell {
                Cell::Gru => 3,
                Cell::Lstm => 4,
            };
            for l in 0..spec.depth {
                let inp = if l == 0 { c } else { h };
                init.weight(&format!("rnn{l}.wx"), &[inp, gates * h], inp, h)?;
                init.weight(&format!("rnn{l}.wh"), &[h, gates * h], h, h)?;
                init.fill(&format!("rnn{l}.bx"), gates * h, 0.0)?;
                if cell == Cell::Gru {
                    init.fill(&format!("rnn{l}.bh"), gates * h, 0.0)?;
                }
            }
        }
        if spec.arch.has_fcn() {
            let mut inp = c;
            for (i, (&ch, &k)) in spec.fcn_channels.iter().zip(&spec.fcn_kernels).enumerate() {
                init.conv(&format!("fcn{i}.conv"), k, inp, ch)?;
                init.norm(&format!("fcn{i}.ln"), ch)?;
                inp = ch;
            }
        }
        if spec.arch == Arch::Tcn {
            let k = spec.tcn_kernel;
            for i in 0..spec.depth {
                let inp = if i == 0 { c } else { h };
                init.conv(&format!("tcn{i}.conv1"), k, inp, h)?;
                init.norm(&format!("tcn{i}.ln1"), h)?;
                init.conv(&format!("tcn{i}.conv2"), k, h, h)?;
                init.norm(&format!("tcn{i}.ln2"), h)?;
                if inp != h {
                    init.conv(&format!("tcn{i}.res"), 1, inp, h)?;
                }
            }
        }
        if spec.arch == Arch::Transformer {
            init.affine("embed", c, h)?;
            for l in 0..spec.depth {
                for part in ["q", "k", "v", "o"] {
                    init.affine(&format!("enc{l}.{part}"), h, h)?;
                }
                init.norm(&format!("enc{l}.ln1"), h)?;
                init.affine(&format!("enc{l}.ff1"), h, spec.ffn)?;
                init.affine(&format!("enc{l}.ff2"), spec.ffn, h)?;
                init.norm(&format!("enc{l}.ln2"), h)?;
            }
        }
        init.affine("head", spec.feature_width(), 1)?;
        Ok(Self { spec, params })
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    /// Makes only `head.*` trainable.
    pub fn freeze_backbone(&mut self) {
        self.params.freeze_except("head.");
    }

    pub fn unfreeze(&mut self) {
        self.params.unfreeze_all();
    }

    pub fn backbone_digest(&self) -> String {
        self.params.digest_where(|p| !p.name.starts_with("head."))
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> Var {
        let idx = self.params.index_of(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        g.param(&self.params, idx)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 || shape[2] != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "expected a [batch, window, {}] input, got {shape:?}",
                self.spec.input_channels
            )));
        }
        Ok(())
    }

    fn trunk(&self, g: &mut Graph<T>, x: Var) -> Result<Trunk> {
        self.check_input(g.shape(x))?;
        Ok(match self.spec.arch {
            Arch::Gru | Arch::Lstm => Trunk { sequence: None, features: self.rnn(g, x) },
            Arch::GruFcn | Arch::LstmFcn => {
                let h = self.rnn(g, x);
                let seq = self.fcn(g, x);
                let pooled = g.mean_time(seq);
                Trunk { sequence: Some(seq), features: g.concat(h, pooled) }
            }
            Arch::Tcn => {
                let seq = self.tcn(g, x);
                Trunk { sequence: Some(seq), features: g.mean_time(seq) }
            }
            Arch::Transformer => {
                let seq = self.transformer(g, x);
                Trunk { sequence: Some(seq), features: g.mean_time(seq) }
            }
        })
    }

    /// Adds the forward pass to `g` and returns the `[B, 1]` logits.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let trunk = self.trunk(g, x)?;
        let w = self.p(g, "head.w");
        let b = self.p(g, "head.b");
        Ok(g.affine(trunk.features, w, b))
    }

    pub fn predict_logits(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let x = g.input(batch.clone());
        let z = self.forward(&mut g, x)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.predict_logits(batch)?.into_iter().map(crate::nn::loss::sigmoid).collect())
    }

    /// Intermediate activations for diagnostics.
    pub fn probe(&self, batch: &Tensor<T>, probe: Probe) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.input(batch.clone());
        let trunk = self.trunk(&mut g, x)?;
        let v = match probe {
            Probe::Features => trunk.features,
            Probe::Sequence => trunk
                .sequence
                .ok_or_else(|| Error::Config(format!("{} has no pre-pooling sequence", self.spec.arch)))?,
        };
        Ok(g.value(v).clone())
    }

    /// Last hidden state of the (possibly stacked) recurrent layers.
    fn rnn(&self, g: &mut Graph<T>, x: Var) -> Var {
        let cell = self.spec.arch.recurrent().expect("recurrent arch");
        let (b, w) = (g.shape(x)[0], g.shape(x)[1]);
        let hd = self.spec.hidden;
        let mut input = x;
        let mut last = None;
        for l in 0..self.spec.depth {
            let wx = self.p(g, &format!("rnn{l}.wx"));
            let wh = self.p(g, &format!("rnn{l}.wh"));
            let bx = self.p(g, &format!("rnn{l}.bx"));
            let gx = g.affine(input, wx, bx);
            let mut h = g.input(Tensor::zeros(&[b, hd]));
            let mut c = g.input(Tensor::zeros(&[b, hd]));
            let mut outputs = Vec::with_capacity(w);
            for t in 0..w {
                let xt = g.time_step(gx, t);
                match cell {
                    Cell::Gru => {
                        let bh = self.p(g, &format!("rnn{l}.bh"));
                        let gh = g.affine(h, wh, bh);
                        let xr = g.cols(xt, 0, hd);
                        let hr = g.cols(gh, 0, hd);
                        let r = g.add(xr, hr);
                        let r = g.sigmoid(r);
                        let xz = g.cols(xt, hd, hd);
                        let hz = g.cols(gh, hd, hd);
                        let z = g.add(xz, hz);
                        let z = g.sigmoid(z);
                        let xn = g.cols(xt, 2 * hd, hd);
                        let hn = g.cols(gh, 2 * hd, hd);
                        let rn = g.mul(r, hn);
                        let n = g.add(xn, rn);
                        let n = g.tanh(n);
                        // h' = n + z (h - n)
                        let d = g.sub(h, n);
                        let zd = g.mul(z, d);
                        h = g.add(n, zd);
                    }
                    Cell::Lstm => {
                        let hh = g.matmul(h, wh);
                        let pre = g.add(xt, hh);
                        let i = g.cols(pre, 0, hd);
                        let i = g.sigmoid(i);
                        let f = g.cols(pre, hd, hd);
                        let f = g.sigmoid(f);
                        let gg = g.cols(pre, 2 * hd, hd);
                        let gg = g.tanh(gg);
                        let o = g.cols(pre, 3 * hd, hd);
                        let o = g.sigmoid(o);
                        let fc = g.mul(f, c);
                        let ig = g.mul(i, gg);
                        c = g.add(fc, ig);
                        let tc = g.tanh(c);
                        h = g.mul(o, tc);
                    }
                }
                if l + 1 < self.spec.depth {
                    outputs.push(h);
                }
            }
            last = Some(h);
            if l + 1 < self.spec.depth {
                input = g.stack_time(&outputs);
            }
        }
        last.expect("depth >= 1")
    }

    /// Convolution blocks with same padding; returns `[B, W, C_last]`.
    fn fcn(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut y = x;
        for (i, &k) in self.spec.fcn_kernels.iter().enumerate() {
            let w = self.p(g, &format!("fcn{i}.conv.w"));
            let b = self.p(g, &format!("fcn{i}.conv.b"));
            let gain = self.p(g, &format!("fcn{i}.ln.g"));
            let bias = self.p(g, &format!("fcn{i}.ln.b"));
            y = g.conv1d(y, w, b, 1, (k - 1) / 2);
            y = g.layer_norm(y, gain, bias);
            y = g.relu(y);
        }
        y
    }

    fn tcn(&self, g: &mut Graph<T>, x: Var) -> Var {
        let k = self.spec.tcn_kernel;
        let mut y = x;
        for i in 0..self.spec.depth {
            let d = 1usize << i;
            let pad = (k - 1) * d;
            let mut h = y;
            for j in 1..=2 {
                let w = self.p(g, &format!("tcn{i}.conv{j}.w"));
                let b = self.p(g, &format!("tcn{i}.conv{j}.b"));
                let gain = self.p(g, &format!("tcn{i}.ln{j}.g"));
                let bias = self.p(g, &format!("tcn{i}.ln{j}.b"));
                h = g.conv1d(h, w, b, d, pad);
                h = g.layer_norm(h, gain, bias);
                h = g.relu(h);
            }
            let res = if self.params.index_of(&format!("tcn{i}.res.w")).is_some() {
                let w = self.p(g, &format!("tcn{i}.res.w"));
                let b = self.p(g, &format!("tcn{i}.res.b"));
                g.conv1d(y, w, b, 1, 0)
            } else {
                y
            };
            let s = g.add(h, res);
            y = g.relu(s);
        }
        y
    }

    fn transformer(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.shape(x)[1];
        let d = self.spec.hidden;
        let ew = self.p(g, "embed.w");
        let eb = self.p(g, "embed.b");
        let mut y = g.affine(x, ew, eb);
        if self.spec.positional_encoding {
            y = g.add_const(y, &positional_encoding(w, d));
        }
        for l in 0..self.spec.depth {
            let proj = |g: &mut Graph<T>, input: Var, part: &str| {
                let pw = self.p(g, &format!("enc{l}.{part}.w"));
                let pb = self.p(g, &format!("enc{l}.{part}.b"));
                g.affine(input, pw, pb)
            };
            let q = proj(g, y, "q");
            let k = proj(g, y, "k");
            let v = proj(g, y, "v");
            let a = g.attention(q, k, v, self.spec.heads);
            let o = proj(g, a, "o");
            let s = g.add(y, o);
            let g1 = self.p(g, &format!("enc{l}.ln1.g"));
            let b1 = self.p(g, &format!("enc{l}.ln1.b"));
            y = g.layer_norm(s, g1, b1);
            let f = proj(g, y, "ff1");
            let f = g.relu(f);
            let f = proj(g, f, "ff2");
            let s = g.add(y, f);
            let g2 = self.p(g, &format!("enc{l}.ln2.g"));
            let b2 = self.p(g, &format!("enc{l}.ln2.b"));
            y = g.layer_norm(s, g2, b2);
        }
        y
    }
}

/// Sinusoidal encodings `[W, D]`: `sin(t / 10000^(2i/D))` on even columns, `cos` on odd.
pub fn positional_encoding<T: Scalar>(w: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(w * d);
    for t in 0..w {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![w, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, w: usize) -> Tensor<f64> {
        let data = (0..b * w * CHANNELS).map(|i| ((i as f64) * 0.37).sin()).collect();
        Tensor::new(vec![b, w, CHANNELS], data).unwrap()
    }

    #[test]
    fn every_arch_builds_and_runs() {
        for arch in Arch::ALL {
            let m: Model<f64> = Model::new(ModelSpec::tiny(arch, 1)).unwrap();
            let z = m.predict_logits(&batch(3, 7)).unwrap();
            assert_eq!(z.len(), 3);
            assert!(z.iter().all(|v| v.is_finite()), "{arch}");
            assert_eq!(Arch::parse(arch.name()).unwrap(), arch);
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let m: Model<f64> = Model::new(ModelSpec::tiny(Arch::Gru, 1)).unwrap();
        let x = Tensor::zeros(&[1, 5, 3]);
        assert!(matches!(m.predict_logits(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_transformer_width() {
        let spec = ModelSpec { hidden: 5, ..ModelSpec::new(Arch::Transformer, 0) };
        assert!(Model::<f64>::new(spec).is_err());
    }
}
