//! Gate-latent generators.
//!
//! The full hypernetwork runs a bidirectional GRU over a fixed random input
//! sequence (one step per block), normalizes, applies GeLU and maps each
//! block's 128 features through its own linear head to `4d + d_mid` latents.

use crate::error::{DispError, Result};
use crate::model::{GateSlot, ModelSpec, NORM_EPS};
use crate::rng::{normal_tensor, stream_rng, uniform_tensor, Stream};
use crate::tensor::{lit, Graph, NormKind, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateParam {
    HyperNet,
    NoGru,
    Elementwise,
}

impl GateParam {
    pub const ALL: [GateParam; 3] = [GateParam::HyperNet, GateParam::NoGru, GateParam::Elementwise];

    pub fn as_str(self) -> &'static str {
        match self {
            GateParam::HyperNet => "hypernet",
            GateParam::NoGru => "no-gru",
            GateParam::Elementwise => "elementwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hypernet" => Ok(GateParam::HyperNet),
            "no-gru" => Ok(GateParam::NoGru),
            "elementwise" => Ok(GateParam::Elementwise),
            other => Err(DispError::Usage(format!("unknown gate parametrization `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyperNetDims {
    pub input: usize,
    /// Hidden width per direction.
    pub hidden: usize,
}

impl Default for HyperNetDims {
    fn default() -> Self {
        HyperNetDims { input: 32, hidden: 64 }
    }
}

impl HyperNetDims {
    pub fn features(&self) -> usize {
        2 * self.hidden
    }
}

/// One direction of a GRU; gate columns are ordered reset, update, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell<T> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub b_ih: Tensor<T>,
    pub b_hh: Tensor<T>,
}

impl<T: Real> GruCell<T> {
    fn init<R: rand::Rng>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        GruCell {
            w_ih: uniform_tensor(rng, &[input, 3 * hidden], -k, k),
            w_hh: uniform_tensor(rng, &[hidden, 3 * hidden], -k, k),
            b_ih: uniform_tensor(rng, &[3 * hidden], -k, k),
            b_hh: uniform_tensor(rng, &[3 * hidden], -k, k),
        }
    }
}

/// Trainable gate parametrization Θ plus its frozen input.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet<T> {
    pub mode: GateParam,
    pub dims: HyperNetDims,
    pub d: usize,
    pub d_mid: usize,
    pub n_layers: usize,
    /// `L × input` for the hypernetwork, `L × 2·hidden` without the GRU,
    /// absent for elementwise latents. Never trained.
    pub fixed_input: Option<Tensor<T>>,
    pub gru: Option<[GruCell<T>; 2]>,
    pub norm_gain: Option<Tensor<T>>,
    pub norm_bias: Option<Tensor<T>>,
    pub head_w: Vec<Tensor<T>>,
    pub head_b: Vec<Tensor<T>>,
    /// Elementwise mode only: one latent vector per block.
    pub latents: Vec<Tensor<T>>,
}

impl<T: Real> HyperNet<T> {
    pub fn new(spec: &ModelSpec, mode: GateParam, seed: u64) -> Result<Self> {
        Self::with_dims(spec, mode, HyperNetDims::default(), seed)
    }

    pub fn with_dims(spec: &ModelSpec, mode: GateParam, dims: HyperNetDims, seed: u64) -> Result<Self> {
        spec.validate()?;
        if dims.input == 0 || dims.hidden == 0 {
            return Err(DispError::Config("hypernetwork widths must be positive".into()));
        }
        let (l, n) = (spec.n_layers, latent_width(spec));
        let f = dims.features();
        let mut net = HyperNet {
            mode,
            dims,
            d: spec.d,
            d_mid: spec.d_mid,
            n_layers: l,
            fixed_input: None,
            gru: None,
            norm_gain: None,
            norm_bias: None,
            head_w: Vec::new(),
            head_b: Vec::new(),
            latents: Vec::new(),
        };
        let mut input_rng = stream_rng(seed, Stream::HyperInput, 0);
        match mode {
            GateParam::Elementwise => {
                net.latents = (0..l).map(|_| Tensor::zeros(&[n])).collect();
                return Ok(net);
            }
            GateParam::HyperNet => {
                net.fixed_input = Some(normal_tensor(&mut input_rng, &[l, dims.input], 1.0));
                let mut rng = stream_rng(seed, Stream::HyperInit, 0);
                net.gru = Some([
                    GruCell::init(&mut rng, dims.input, dims.hidden),
                    GruCell::init(&mut rng, dims.input, dims.hidden),
                ]);
            }
            GateParam::NoGru => {
                net.fixed_input = Some(normal_tensor(&mut input_rng, &[l, f], 1.0));
            }
        }
        net.norm_gain = Some(Tensor::full(&[f], T::one()));
        net.norm_bias = Some(Tensor::zeros(&[f]));
        net.head_w = (0..l).map(|_| Tensor::zeros(&[f, n])).collect();
        net.head_b = (0..l).map(|_| Tensor::zeros(&[n])).collect();
        Ok(net)
    }

    /// Trainable tensors under stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(cells) = &self.gru {
            for (dir, c) in ["fwd", "bwd"].iter().zip(cells) {
                out.push((format!("gru.{dir}.w_ih"), &c.w_ih));
                out.push((format!("gru.{dir}.w_hh"), &c.w_hh));
                out.push((format!("gru.{dir}.b_ih"), &c.b_ih));
                out.push((format!("gru.{dir}.b_hh"), &c.b_hh));
            }
        }
        out.extend(self.norm_gain.as_ref().map(|t| ("norm.gain".to_string(), t)));
        out.extend(self.norm_bias.as_ref().map(|t| ("norm.bias".to_string(), t)));
        for (l, (w, b)) in self.head_w.iter().zip(&self.head_b).enumerate() {
            out.push((format!("heads.{l}.w"), w));
            out.push((format!("heads.{l}.b"), b));
        }
        for (l, t) in self.latents.iter().enumerate() {
            out.push((format!("latents.{l}"), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(cells) = &mut self.gru {
            for (dir, c) in ["fwd", "bwd"].iter().zip(cells.iter_mut()) {
                out.push((format!("gru.{dir}.w_ih"), &mut c.w_ih));
                out.push((format!("gru.{dir}.w_hh"), &mut c.w_hh));
                out.push((format!("gru.{dir}.b_ih"), &mut c.b_ih));
                out.push((format!("gru.{dir}.b_hh"), &mut c.b_hh));
            }
        }
        out.extend(self.norm_gain.as_mut().map(|t| ("norm.gain".to_string(), t)));
        out.extend(self.norm_bias.as_mut().map(|t| ("norm.bias".to_string(), t)));
        for (l, (w, b)) in self.head_w.iter_mut().zip(self.head_b.iter_mut()).enumerate() {
            out.push((format!("heads.{l}.w"), w));
            out.push((format!("heads.{l}.b"), b));
        }
        for (l, t) in self.latents.iter_mut().enumerate() {
            out.push((format!("latents.{l}"), t));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn latent_width(&self) -> usize {
        4 * self.d + self.d_mid
    }

    /// Places Θ on `g` as trainable leaves, in [`Self::named_tensors`] order.
    pub fn bind(&self, g: &Graph<T>) -> Vec<Var> {
        self.named_tensors().into_iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Latent vectors `[4d + d_mid]`, one per block.
    pub fn forward(&self, g: &Graph<T>, theta: &[Var]) -> Result<Vec<Var>> {
        let want = self.named_tensors().len();
        if theta.len() != want {
            return Err(DispError::contract(format!(
                "hypernetwork expects {want} parameter tensors, got {}",
                theta.len()
            )));
        }
        let n = self.latent_width();
        if self.mode == GateParam::Elementwise {
            return Ok(theta.to_vec());
        }
        let input = g.constant(self.fixed_input.clone().expect("fixed input present"));
        let mut it = theta.iter().copied();
        let features: Vec<Var> = match self.mode {
            GateParam::HyperNet => {
                let mut cell = || -> [Var; 4] { std::array::from_fn(|_| it.next().unwrap()) };
                let (fwd, bwd) = (cell(), cell());
                let steps: Vec<Var> = (0..self.n_layers)
                    .map(|l| g.gather_rows(input, &[l]))
                    .collect::<Result<_>>()?;
                let hf = self.run_direction(g, &fwd, steps.iter().copied())?;
                let mut hb = self.run_direction(g, &bwd, steps.iter().rev().copied())?;
                hb.reverse();
                hf.into_iter()
                    .zip(hb)
                    .map(|(a, b)| g.concat_cols(&[a, b]))
                    .collect::<Result<_>>()?
            }
            GateParam::NoGru => (0..self.n_layers)
                .map(|l| g.gather_rows(input, &[l]))
                .collect::<Result<_>>()?,
            GateParam::Elementwise => unreachable!(),
        };
        let gain = it.next().unwrap();
        let bias = it.next().unwrap();
        let full = vec![true; self.dims.features()];
        let mut out = Vec::with_capacity(self.n_layers);
        for h in features {
            let h = g.masked_norm(h, &full, gain, Some(bias), NormKind::LayerNorm, lit(NORM_EPS))?;
            let h = g.gelu(h);
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            let y = g.add_row(g.matmul(h, w)?, b)?;
            out.push(g.reshape(y, &[n])?);
        }
        Ok(out)
    }

    fn run_direction(&self, g: &Graph<T>, cell: &[Var; 4], steps: impl Iterator<Item = Var>) -> Result<Vec<Var>> {
        let hsz = self.dims.hidden;
        let [w_ih, w_hh, b_ih, b_hh] = *cell;
        let cols = |k: usize| -> Vec<usize> { (k * hsz..(k + 1) * hsz).collect() };
        let (ri, zi, ni) = (cols(0), cols(1), cols(2));
        let mut h = g.constant(Tensor::zeros(&[1, hsz]));
        let mut out = Vec::new();
        for x in steps {
            let gi = g.add_row(g.matmul(x, w_ih)?, b_ih)?;
            let gh = g.add_row(g.matmul(h, w_hh)?, b_hh)?;
            let r = g.sigmoid(g.add(g.index_select(gi, &ri)?, g.index_select(gh, &ri)?)?);
            let z = g.sigmoid(g.add(g.index_select(gi, &zi)?, g.index_select(gh, &zi)?)?);
            let cand = g.add(g.index_select(gi, &ni)?, g.mul(r, g.index_select(gh, &ni)?)?)?;
            let cand = g.tanh(cand);
            // h' = (1 − z)·n + z·h = n + z·(h − n)
            h = g.add(cand, g.mul(z, g.sub(h, cand)?)?)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Latent values without gradient tracking.
    pub fn latents(&self) -> Result<Vec<Tensor<T>>> {
        let g = Graph::new();
        let theta = self.bind(&g);
        Ok(self.forward(&g, &theta)?.into_iter().map(|v| g.value(v)).collect())
    }
}

/// `4d + d_mid`: latents emitted per block.
pub fn latent_width(spec: &ModelSpec) -> usize {
    4 * spec.d + spec.d_mid
}

/// Column range of one gate inside a block's latent vector.
pub fn latent_range(slot: GateSlot, d: usize, d_mid: usize) -> std::ops::Range<usize> {
    match slot {
        GateSlot::AttnIn => 0..d,
        GateSlot::AttnOut => d..2 * d,
        GateSlot::MlpIn => 2 * d..3 * d,
        GateSlot::MlpOut => 3 * d..4 * d,
        GateSlot::MlpMid => 4 * d..4 * d + d_mid,
    }
}

/// Splits a block latent `[4d + d_mid]` into the five gate latents.
pub fn split_latent<T: Real>(g: &Graph<T>, latent: Var, d: usize, d_mid: usize) -> Result<[Var; 5]> {
    let mut out = [latent; 5];
    for slot in GateSlot::ALL {
        let ind: Vec<usize> = latent_range(slot, d, d_mid).collect();
        out[slot as usize] = g.index_select(latent, &ind)?;
    }
    Ok(out)
}
