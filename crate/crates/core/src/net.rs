//! A compact 3D U-Net with hand-written reverse-mode gradients, Adam, He
//! initialization, inverted dropout and an EMA teacher update.
//!
//! Layer plan for `levels = L`, `base_filters = F`:
//! encoder level `i` runs two `conv3 -> ReLU -> dropout` blocks with `F * 2^i`
//! filters and (except at the bottom) a 2x max-pool; decoder level `i` upsamples
//! the level below by nearest neighbor, concatenates `[upsampled, skip_i]` and
//! runs two more blocks. A 1x1x1 convolution maps the last decoder block (the
//! penultimate features) to two class logits. Convolutions zero-pad by one.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::volume::{voxel_count, Dims, FeatureMap, Volume3D};

pub const IN_CHANNELS: usize = 1;
pub const OUT_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub levels: usize,
    pub base_filters: usize,
    pub dropout_rate: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_filters: 8,
            dropout_rate: 0.15,
        }
    }
}

/// One convolution in the layer plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.ksize, self.ksize, self.ksize]
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.ksize.pow(3)
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::invalid(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_filters < 2 {
            return Err(Error::invalid(format!(
                "base_filters must be >= 2, got {}",
                self.base_filters
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Convolutions in forward order: encoder levels, decoder levels (deepest
    /// first), output head.
    pub fn layer_plan(&self) -> Vec<ConvSpec> {
        let conv = |name: String, cin, cout, ksize| ConvSpec {
            name,
            cin,
            cout,
            ksize,
        };
        let mut plan = Vec::new();
        let mut cin = IN_CHANNELS;
        for level in 0..self.levels {
            let f = self.filters(level);
            plan.push(conv(format!("enc{level}.conv1"), cin, f, 3));
            plan.push(conv(format!("enc{level}.conv2"), f, f, 3));
            cin = f;
        }
        for level in (0..self.levels - 1).rev() {
            let f = self.filters(level);
            plan.push(conv(
                format!("dec{level}.conv1"),
                self.filters(level + 1) + f,
                f,
                3,
            ));
            plan.push(conv(format!("dec{level}.conv2"), f, f, 3));
        }
        plan.push(conv("out".to_string(), self.base_filters, OUT_CLASSES, 1));
        plan
    }

    /// Spatial dims must survive `levels - 1` halvings.
    pub fn check_input_dims(&self, dims: Dims) -> Result<()> {
        let factor = 1usize << (self.levels - 1);
        if dims.iter().any(|&d| d == 0 || d % factor != 0) {
            return Err(Error::shape(format!(
                "input dims {dims:?} must be divisible by {factor} for a {}-level network",
                self.levels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Weights and biases of every convolution, ordered as in [`NetConfig::layer_plan`]
/// (`weight`, `bias` per layer).
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T = f32> {
    config: NetConfig,
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layer_plan()
            .into_iter()
            .flat_map(|spec| {
                let w = spec.weight_shape();
                let wn = w.iter().product();
                [
                    ParamTensor {
                        name: format!("{}.weight", spec.name),
                        shape: w,
                        data: vec![T::zero(); wn],
                    },
                    ParamTensor {
                        name: format!("{}.bias", spec.name),
                        shape: vec![spec.cout],
                        data: vec![T::zero(); spec.cout],
                    },
                ]
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Rebuilds parameters from named tensors, checking every shape against `config`.
    pub fn from_tensors(config: NetConfig, tensors: Vec<ParamTensor<T>>) -> Result<Self> {
        let template = Self::zeros(config)?;
        if template.tensors.len() != tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                template.tensors.len(),
                tensors.len()
            )));
        }
        for (want, got) in template.tensors.iter().zip(&tensors) {
            if want.name != got.name || want.shape != got.shape || got.data.len() != want.data.len()
            {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn same_shape(&self, other: &NetParams<T>) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Adds `alpha * other` to every entry.
    pub fn axpy(&mut self, alpha: T, other: &NetParams<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn weight(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer].data
    }

    fn bias(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer + 1].data
    }
}

/// He-normal weights (`N(0, 2 / fan_in)`) and zero biases.
pub fn he_init<T: Real, R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<NetParams<T>> {
    let mut params = NetParams::zeros(config)?;
    for (layer, spec) in config.layer_plan().iter().enumerate() {
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        for w in params.tensors[2 * layer].data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *w = T::lit(std * z);
        }
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, student training pass.
    Train,
    /// Dropout off.
    Eval,
    /// Dropout on, Monte Carlo uncertainty pass.
    McDropout,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

struct ConvRecord<T> {
    input: Vec<T>,
    dims: Dims,
    /// `relu'(pre) * dropout_scale`; empty for the output head.
    gate: Vec<T>,
}

/// Outputs of one forward pass plus the cached activations needed by [`backward`].
pub struct ForwardTrace<T = f32> {
    pub logits: FeatureMap<T>,
    pub penultimate: FeatureMap<T>,
    config: NetConfig,
    convs: Vec<ConvRecord<T>>,
    pool_args: Vec<Vec<u32>>,
    level_dims: Vec<Dims>,
}

impl<T: Real> ForwardTrace<T> {
    /// Dropout keep/drop pattern of every hidden block (1 = kept).
    pub fn dropout_masks(&self) -> Vec<Vec<u8>> {
        self.convs
            .iter()
            .filter(|r| !r.gate.is_empty())
            .map(|r| r.gate.iter().map(|g| (*g != T::zero()) as u8).collect())
            .collect()
    }

    /// Compact record of every ReLU/dropout gate and max-pool choice; equal
    /// signatures mean the network is smooth between the two passes.
    pub fn activation_signature(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.convs {
            out.extend(r.gate.chunks(8).map(|c| {
                c.iter().enumerate().fold(0u8, |acc, (i, g)| acc | (((*g != T::zero()) as u8) << i))
            }));
        }
        for args in &self.pool_args {
            out.extend(args.iter().flat_map(|a| a.to_le_bytes()));
        }
        out
    }

    /// True when both passes took the same branch at every ReLU, dropout and
    /// max-pool decision, i.e. the network is smooth between the two inputs.
    pub fn same_activation_pattern(&self, other: &ForwardTrace<T>) -> bool {
        self.pool_args == other.pool_args
            && self.convs.len() == other.convs.len()
            && self.convs.iter().zip(&other.convs).all(|(a, b)| {
                a.gate.len() == b.gate.len()
                    && a.gate.iter().zip(&b.gate).all(|(x, y)| (*x == T::zero()) == (*y == T::zero()))
            })
    }
}

fn activate<T: Real, R: RngCore + ?Sized>(
    pre: &mut [T],
    rate: f64,
    active: bool,
    rng: &mut R,
) -> Vec<T> {
    let mut gate = vec![T::zero(); pre.len()];
    if active && rate > 0.0 {
        let threshold = (rate * 4_294_967_296.0) as u64;
        let scale = T::lit(1.0 / (1.0 - rate));
        for (x, g) in pre.iter_mut().zip(gate.iter_mut()) {
            let keep = (rng.next_u32() as u64) >= threshold;
            if keep && *x > T::zero() {
                *g = scale;
                *x *= scale;
            } else {
                *x = T::zero();
            }
        }
    } else {
        for (x, g) in pre.iter_mut().zip(gate.iter_mut()) {
            if *x > T::zero() {
                *g = T::one();
            } else {
                *x = T::zero();
            }
        }
    }
    gate
}

/// Runs the network on a single-channel volume.
pub fn forward<T: Real, R: RngCore + ?Sized>(
    params: &NetParams<T>,
    x: &Volume3D,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardTrace<T>> {
    let cfg = *params.config();
    cfg.check_input_dims(x.dims())?;
    let plan = cfg.layer_plan();
    let levels = cfg.levels;
    let rate = cfg.dropout_rate;
    let active = mode.dropout_active();

    let mut level_dims = vec![x.dims()];
    for l in 1..levels {
        level_dims.push(ops::half(level_dims[l - 1]));
    }

    let mut convs: Vec<ConvRecord<T>> = Vec::with_capacity(plan.len());
    let mut pool_args = Vec::with_capacity(levels - 1);
    let mut skips: Vec<Vec<T>> = Vec::with_capacity(levels);

    let mut run_block =
        |layer: usize, input: Vec<T>, dims: Dims, convs: &mut Vec<ConvRecord<T>>| -> Vec<T> {
            let spec = &plan[layer];
            let mut out = ops::conv_forward(
                params.weight(layer),
                params.bias(layer),
                &input,
                spec.cin,
                spec.cout,
                spec.ksize,
                dims,
            );
            let gate = activate(&mut out, rate, active, rng);
            convs.push(ConvRecord { input, dims, gate });
            out
        };

    let mut h: Vec<T> = x.data().iter().map(|&v| T::of_f32(v)).collect();
    for level in 0..levels {
        let dims = level_dims[level];
        h = run_block(2 * level, h, dims, &mut convs);
        h = run_block(2 * level + 1, h, dims, &mut convs);
        if level + 1 < levels {
            let (pooled, arg) = ops::maxpool2(&h, cfg.filters(level), dims);
            pool_args.push(arg);
            skips.push(std::mem::replace(&mut h, pooled));
        }
    }
    let mut layer = 2 * levels;
    for level in (0..levels - 1).rev() {
        let dims = level_dims[level];
        let mut cat = ops::upsample2(&h, cfg.filters(level + 1), level_dims[level + 1]);
        cat.extend_from_slice(&skips[level]);
        h = run_block(layer, cat, dims, &mut convs);
        h = run_block(layer + 1, h, dims, &mut convs);
        layer += 2;
    }
    let out_spec = &plan[layer];
    let logits = ops::conv_forward(
        params.weight(layer),
        params.bias(layer),
        &h,
        out_spec.cin,
        out_spec.cout,
        1,
        x.dims(),
    );
    let penultimate = FeatureMap::new(cfg.base_filters, x.dims(), h.clone())?;
    convs.push(ConvRecord {
        input: h,
        dims: x.dims(),
        gate: Vec::new(),
    });
    Ok(ForwardTrace {
        logits: FeatureMap::new(OUT_CLASSES, x.dims(), logits)?,
        penultimate,
        config: cfg,
        convs,
        pool_args,
        level_dims,
    })
}

/// Parameter gradients of a scalar loss given its cotangents with respect to the
/// logits and the penultimate features.
pub fn backward<T: Real>(
    params: &NetParams<T>,
    trace: &ForwardTrace<T>,
    d_logits: &FeatureMap<T>,
    d_penultimate: Option<&FeatureMap<T>>,
) -> Result<NetParams<T>> {
    let cfg = trace.config;
    if *params.config() != cfg {
        return Err(Error::shape("parameters do not match the traced network"));
    }
    if d_logits.channels() != OUT_CLASSES || d_logits.dims() != trace.logits.dims() {
        return Err(Error::shape("logit cotangent does not match traced logits"));
    }
    if let Some(dp) = d_penultimate {
        if dp.channels() != trace.penultimate.channels() || dp.dims() != trace.penultimate.dims() {
            return Err(Error::shape(
                "penultimate cotangent does not match traced features",
            ));
        }
    }
    let plan = cfg.layer_plan();
    let levels = cfg.levels;
    let mut grads = NetParams::<T>::zeros(cfg)?;

    let mut layer = plan.len() - 1;
    let rec = &trace.convs[layer];
    let mut g = {
        let (dw, db) = split_grad(&mut grads, layer);
        ops::conv_backward(
            params.weight(layer),
            &rec.input,
            d_logits.data(),
            plan[layer].cin,
            plan[layer].cout,
            1,
            rec.dims,
            dw,
            db,
            true,
        )
        .expect("input grad requested")
    };
    if let Some(dp) = d_penultimate {
        for (a, &b) in g.iter_mut().zip(dp.data()) {
            *a += b;
        }
    }

    let block_back = |layer: usize,
                      d_out: Vec<T>,
                      grads: &mut NetParams<T>,
                      want_input: bool|
     -> Option<Vec<T>> {
        let rec = &trace.convs[layer];
        let spec = &plan[layer];
        let d_pre: Vec<T> = d_out.iter().zip(&rec.gate).map(|(&d, &m)| d * m).collect();
        let (dw, db) = split_grad(grads, layer);
        ops::conv_backward(
            params.weight(layer),
            &rec.input,
            &d_pre,
            spec.cin,
            spec.cout,
            spec.ksize,
            rec.dims,
            dw,
            db,
            want_input,
        )
    };

    // decoder, shallowest level first (reverse of forward order)
    let mut skip_grads: Vec<Option<Vec<T>>> = vec![None; levels];
    for level in 0..levels - 1 {
        layer -= 2;
        g = block_back(layer + 1, g, &mut grads, true).expect("input grad requested");
        let d_cat = block_back(layer, g, &mut grads, true).expect("input grad requested");
        let n = voxel_count(trace.level_dims[level]);
        let up_channels = cfg.filters(level + 1);
        let (d_up, d_skip) = d_cat.split_at(up_channels * n);
        skip_grads[level] = Some(d_skip.to_vec());
        g = ops::upsample2_backward(d_up, up_channels, trace.level_dims[level + 1]);
    }

    // encoder, deepest level first
    for level in (0..levels).rev() {
        if level + 1 < levels {
            let mut d = ops::maxpool2_backward(
                &g,
                &trace.pool_args[level],
                cfg.filters(level),
                trace.level_dims[level],
            );
            if let Some(s) = skip_grads[level].take() {
                for (a, b) in d.iter_mut().zip(s) {
                    *a += b;
                }
            }
            g = d;
        }
        g = block_back(2 * level + 1, g, &mut grads, true).expect("input grad requested");
        match block_back(2 * level, g, &mut grads, level > 0) {
            Some(next) => g = next,
            None => break,
        }
    }
    Ok(grads)
}

fn split_grad<T>(grads: &mut NetParams<T>, layer: usize) -> (&mut [T], &mut [T]) {
    let (w, b) = grads.tensors[2 * layer..2 * layer + 2].split_at_mut(1);
    (&mut w[0].data, &mut b[0].data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam moments mirroring a [`NetParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub hyper: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &NetParams<T>, hyper: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.data.len()])
            .collect();
        Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step<T: Real>(
    params: &mut NetParams<T>,
    grads: &NetParams<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if !params.same_shape(grads) || state.m.len() != params.tensors.len() {
        return Err(Error::shape(
            "adam: parameters, gradients and moments disagree",
        ));
    }
    for t in &grads.tensors {
        if let Some(pos) = t.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient in {} at element {pos}",
                t.name
            )));
        }
    }
    let h = state.hyper;
    state.t += 1;
    let step = state.t as i32;
    let bc1 = 1.0 - h.beta1.powi(step);
    let bc2 = 1.0 - h.beta2.powi(step);
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let (lr, eps) = (T::lit(h.learning_rate), T::lit(h.eps));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let g = &grads.tensors[i].data;
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.data.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
pub fn ema_update<T: Real>(
    teacher: &mut NetParams<T>,
    student: &NetParams<T>,
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!(
            "ema decay must be in [0, 1], got {decay}"
        )));
    }
    if !teacher.same_shape(student) {
        return Err(Error::shape("ema: teacher and student shapes differ"));
    }
    let a = T::lit(decay);
    let b = T::lit(1.0 - decay);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (x, &y) in t.data.iter_mut().zip(&s.data) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::volume::softmax_over_classes;

    fn small() -> NetConfig {
        NetConfig {
            levels: 2,
            base_filters: 4,
            dropout_rate: 0.15,
        }
    }

    fn wavy(dims: Dims) -> Volume3D {
        let data = (0..voxel_count(dims))
            .map(|i| ((i as f32) * 0.37).sin())
            .collect();
        Volume3D::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig {
            levels: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(NetConfig {
            base_filters: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(NetConfig {
            dropout_rate: 1.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn layer_plan_channels() {
        let plan = NetConfig::default().layer_plan();
        let names: Vec<_> = plan.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "enc0.conv1",
                "enc0.conv2",
                "enc1.conv1",
                "enc1.conv2",
                "enc2.conv1",
                "enc2.conv2",
                "dec1.conv1",
                "dec1.conv2",
                "dec0.conv1",
                "dec0.conv2",
                "out"
            ]
        );
        assert_eq!((plan[6].cin, plan[6].cout), (32 + 16, 16));
        assert_eq!((plan[8].cin, plan[8].cout), (16 + 8, 8));
        assert_eq!((plan[10].cin, plan[10].cout, plan[10].ksize), (8, 2, 1));
    }

    #[test]
    fn he_init_biases_zero_and_variance() {
        let p: NetParams<f64> = he_init(NetConfig::default(), &mut rng::stream(3, &[])).unwrap();
        for t in p.tensors().iter().filter(|t| t.name.ends_with(".bias")) {
            assert!(t.data.iter().all(|&b| b == 0.0));
        }
        // the first conv holds 8 * 27 weights per draw; pool fresh initializations
        let cfg = NetConfig {
            levels: 2,
            base_filters: 8,
            dropout_rate: 0.0,
        };
        let mut r = rng::stream(4, &[]);
        let mut draws = Vec::new();
        while draws.len() < 10_000 {
            let p: NetParams<f64> = he_init(cfg, &mut r).unwrap();
            draws.extend_from_slice(&p.tensors()[0].data);
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / 27.0;
        assert!((var - want).abs() / want < 0.1, "var {var} vs {want}");
    }

    #[test]
    fn he_init_deterministic() {
        let a: NetParams<f32> = he_init(small(), &mut rng::stream(9, &[])).unwrap();
        let b: NetParams<f32> = he_init(small(), &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_shapes_default_config() {
        let p: NetParams<f32> = he_init(NetConfig::default(), &mut rng::stream(1, &[])).unwrap();
        let x = wavy([32, 32, 32]);
        let tr = forward(&p, &x, Mode::Eval, &mut rng::stream(2, &[])).unwrap();
        assert_eq!((tr.logits.channels(), tr.logits.dims()), (2, [32, 32, 32]));
        assert_eq!(
            (tr.penultimate.channels(), tr.penultimate.dims()),
            (8, [32, 32, 32])
        );
    }

    #[test]
    fn forward_rejects_indivisible_dims() {
        let p: NetParams<f32> = NetParams::zeros(NetConfig::default()).unwrap();
        let x = wavy([8, 8, 6]);
        assert!(matches!(
            forward(&p, &x, Mode::Eval, &mut rng::stream(0, &[])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn eval_is_deterministic_and_dropout_is_not() {
        let p: NetParams<f32> = he_init(small(), &mut rng::stream(1, &[])).unwrap();
        let x = wavy([8, 8, 8]);
        let a = forward(&p, &x, Mode::Eval, &mut rng::stream(1, &[])).unwrap();
        let b = forward(&p, &x, Mode::Eval, &mut rng::stream(2, &[])).unwrap();
        assert_eq!(a.logits, b.logits);
        let c = forward(&p, &x, Mode::McDropout, &mut rng::stream(1, &[])).unwrap();
        let d = forward(&p, &x, Mode::McDropout, &mut rng::stream(2, &[])).unwrap();
        assert_ne!(c.logits, d.logits);
        assert_ne!(c.dropout_masks(), d.dropout_masks());
        let e = forward(&p, &x, Mode::Train, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(c.logits, e.logits);
    }

    #[test]
    fn zero_network_gives_uniform_probabilities() {
        let p: NetParams<f32> = NetParams::zeros(small()).unwrap();
        let tr = forward(&p, &wavy([8, 8, 8]), Mode::Eval, &mut rng::stream(0, &[])).unwrap();
        assert!(tr.logits.data().iter().all(|&z| z == 0.0));
        let probs = softmax_over_classes(&tr.logits).unwrap();
        assert!(probs.data().iter().all(|&q| q == 0.5));
    }

    #[test]
    fn inverted_dropout_preserves_expected_scale() {
        let rate = 0.15;
        let mut pre = vec![1.0f64; 200_000];
        activate(&mut pre, rate, true, &mut rng::stream(5, &[]));
        let mean = pre.iter().sum::<f64>() / pre.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        let kept = pre.iter().filter(|&&v| v > 0.0).count() as f64 / pre.len() as f64;
        assert!((kept - 0.85).abs() < 0.005);
    }

    #[test]
    fn zero_cotangents_give_zero_gradients() {
        let p: NetParams<f64> = he_init(small(), &mut rng::stream(1, &[])).unwrap();
        let tr = forward(&p, &wavy([8, 8, 8]), Mode::Train, &mut rng::stream(1, &[])).unwrap();
        let dl = FeatureMap::zeros(2, [8, 8, 8]);
        let g = backward(&p, &tr, &dl, None).unwrap();
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn penultimate_cotangent_leaves_output_head_untouched() {
        let p: NetParams<f64> = he_init(small(), &mut rng::stream(1, &[])).unwrap();
        let tr = forward(&p, &wavy([8, 8, 8]), Mode::Train, &mut rng::stream(1, &[])).unwrap();
        let dl = FeatureMap::zeros(2, [8, 8, 8]);
        let dp = FeatureMap::new(4, [8, 8, 8], vec![1.0; 4 * 512]).unwrap();
        let g = backward(&p, &tr, &dl, Some(&dp)).unwrap();
        assert!(g
            .tensor("out.weight")
            .unwrap()
            .data
            .iter()
            .all(|&x| x == 0.0));
        assert!(g.tensor("out.bias").unwrap().data.iter().all(|&x| x == 0.0));
        assert!(g
            .tensor("enc0.conv1.weight")
            .unwrap()
            .data
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn backward_is_linear_in_cotangents() {
        let p: NetParams<f64> = he_init(small(), &mut rng::stream(2, &[])).unwrap();
        let tr = forward(&p, &wavy([8, 8, 8]), Mode::Train, &mut rng::stream(3, &[])).unwrap();
        let a = FeatureMap::new(
            2,
            [8, 8, 8],
            (0..1024).map(|i| (i as f64 * 0.1).sin()).collect(),
        )
        .unwrap();
        let b = FeatureMap::new(
            2,
            [8, 8, 8],
            (0..1024).map(|i| (i as f64 * 0.3).cos()).collect(),
        )
        .unwrap();
        let sum = FeatureMap::new(
            2,
            [8, 8, 8],
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| 2.0 * x + y)
                .collect(),
        )
        .unwrap();
        let ga = backward(&p, &tr, &a, None).unwrap();
        let gb = backward(&p, &tr, &b, None).unwrap();
        let gs = backward(&p, &tr, &sum, None).unwrap();
        for ((ta, tb), ts) in ga.tensors().iter().zip(gb.tensors()).zip(gs.tensors()) {
            for ((x, y), z) in ta.data.iter().zip(&tb.data).zip(&ts.data) {
                assert!((2.0 * x + y - z).abs() < 1e-9 * (1.0 + z.abs()));
            }
        }
    }

    #[test]
    fn backward_rejects_bad_cotangent() {
        let p: NetParams<f64> = he_init(small(), &mut rng::stream(2, &[])).unwrap();
        let tr = forward(&p, &wavy([8, 8, 8]), Mode::Eval, &mut rng::stream(3, &[])).unwrap();
        let bad = FeatureMap::zeros(2, [4, 4, 4]);
        assert!(backward(&p, &tr, &bad, None).is_err());
    }

    #[test]
    fn sum_of_logits_gradient_matches_finite_differences() {
        let cfg = NetConfig {
            levels: 2,
            base_filters: 8,
            dropout_rate: 0.15,
        };
        let p: NetParams<f64> = he_init(cfg, &mut rng::stream(21, &[])).unwrap();
        let x = wavy([8, 8, 8]);
        let seed = 77;
        let run = |q: &NetParams<f64>| forward(q, &x, Mode::Train, &mut rng::stream(seed, &[])).unwrap();
        let loss = |tr: &ForwardTrace<f64>| -> f64 { tr.logits.data().iter().sum() };
        let tr = run(&p);
        let ones = FeatureMap::new(2, [8, 8, 8], vec![1.0; 1024]).unwrap();
        let g = backward(&p, &tr, &ones, None).unwrap();
        let (mut checked, mut unverified) = (0, 0);
        for (ti, t) in p.tensors().iter().enumerate() {
            // every bias, strided sample of weights keeps this unit test quick
            let stride = if t.data.len() > 64 { 7 } else { 1 };
            for j in (0..t.data.len()).step_by(stride) {
                let an = g.tensors()[ti].data[j];
                // a stencil straddling a ReLU or pooling switch is retried with a smaller step
                checked += 1;
                for h in [1e-3, 1e-6] {
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti].data[j] += h;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti].data[j] -= h;
                    let (tp, tm) = (run(&plus), run(&minus));
                    if !(tp.same_activation_pattern(&tr) && tm.same_activation_pattern(&tr)) {
                        unverified += (h < 1e-3) as usize;
                        continue;
                    }
                    let fd = (loss(&tp) - loss(&tm)) / (2.0 * h);
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{} [{j}] h={h}: analytic {an} vs fd {fd}", t.name);
                    break;
                }
            }
        }
        assert!(unverified * 100 < checked, "{unverified} of {checked} stencils never smooth");
    }

    fn scalar_params(value: f64) -> NetParams<f64> {
        let mut p = NetParams::zeros(small()).unwrap();
        for t in p.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = value);
        }
        p
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar_params(0.3);
        let before = p.clone();
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar_params(0.0), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = scalar_params(1.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar_params(0.5), &mut st).unwrap();
        let want = 1.0 - 1e-4 * (0.5 / (0.25f64.sqrt() + 1e-8));
        assert!((p.tensors()[0].data[0] - want).abs() < 1e-15);
        assert!((p.tensors()[0].data[0] - (1.0 - 1e-4)).abs() < 1e-11);
    }

    #[test]
    fn adam_momentum_decays() {
        let mut p = scalar_params(1.0);
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar_params(0.5), &mut st).unwrap();
        let mut prev = p.tensors()[0].data[0];
        let mut last_move = f64::INFINITY;
        for _ in 0..2 {
            adam_step(&mut p, &scalar_params(0.0), &mut st).unwrap();
            let now = p.tensors()[0].data[0];
            let moved = prev - now;
            assert!(moved > 0.0 && moved < last_move);
            last_move = moved;
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_nan_with_parameter_name() {
        let mut p = scalar_params(1.0);
        let mut g = scalar_params(0.0);
        g.tensors_mut()[3].data[0] = f64::NAN;
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        match adam_step(&mut p, &g, &mut st) {
            Err(Error::Divergence(msg)) => assert!(msg.contains("enc0.conv2.bias"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.t, 0);
    }

    #[test]
    fn ema_endpoints_and_arithmetic() {
        let student = scalar_params(0.0);
        let mut t = scalar_params(1.0);
        ema_update(&mut t, &student, 0.99).unwrap();
        assert!(t
            .tensors()
            .iter()
            .all(|x| x.data.iter().all(|&v| v == 0.99)));
        let mut t = scalar_params(1.0);
        ema_update(&mut t, &scalar_params(0.25), 0.0).unwrap();
        assert_eq!(t, scalar_params(0.25));
        let mut t = scalar_params(1.0);
        ema_update(&mut t, &scalar_params(0.25), 1.0).unwrap();
        assert_eq!(t, scalar_params(1.0));
        assert!(ema_update(&mut t, &student, 1.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ema_is_homogeneous(t0 in -5.0f64..5.0, s0 in -5.0f64..5.0, a in -3.0f64..3.0, decay in 0.0f64..=1.0) {
                let mut lhs = scalar_params(a * t0);
                ema_update(&mut lhs, &scalar_params(a * s0), decay).unwrap();
                let mut rhs = scalar_params(t0);
                ema_update(&mut rhs, &scalar_params(s0), decay).unwrap();
                let l = lhs.tensors()[0].data[0];
                let r = a * rhs.tensors()[0].data[0];
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs()));
            }
        }
    }
}
