//! Difference learner (two-stream encoder–decoder) and outlier-masking head.
//!
//! Both networks share one flat parameter vector. The difference learner
//! comes first, then the masking head; every layer stores its weights
//! (`cout × cin × 3 × 3`) followed by its biases.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerHeader};
use crate::error::{Error, Result};
use crate::image::{DefectMap, ImageBuf, Plane};
use crate::nn::{self, ConvSpec, Tensor};
use crate::registration::{self, RegistrationResult};
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// One luminance plane per image.
    #[default]
    Gray,
    /// Three color planes per image.
    Rgb,
}

impl InputMode {
    pub fn planes_per_image(self) -> usize {
        match self {
            InputMode::Gray => 1,
            InputMode::Rgb => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Encoder depth including the full-resolution level.
    pub levels: usize,
    pub base_width: usize,
    pub mask_width: usize,
    pub leaky_slope: f64,
    pub input: InputMode,
    /// Initial bias of the masking head output. Negative values start O near
    /// the defect-free prior; 0 gives all-zero biases.
    pub mask_prior_logit: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_width: 16,
            mask_width: 16,
            leaky_slope: 0.1,
            input: InputMode::Gray,
            mask_prior_logit: -4.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.levels) {
            return Err(Error::InvalidConfig(format!(
                "levels must be in 1..=8, got {}",
                self.levels
            )));
        }
        if self.base_width == 0 || self.mask_width == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope must be in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        if !self.mask_prior_logit.is_finite() {
            return Err(Error::InvalidConfig("mask_prior_logit must be finite".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.input.planes_per_image()
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// (cin, cout, stride) of every layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        out.push(("d.enc0".to_string(), self.input_channels(), self.width_at(0), 1));
        for l in 1..self.levels {
            out.push((format!("d.down{l}"), self.width_at(l - 1), self.width_at(l), 2));
        }
        for l in (0..self.levels - 1).rev() {
            out.push((
                format!("d.up{l}"),
                self.width_at(l + 1) + self.width_at(l),
                self.width_at(l),
                1,
            ));
        }
        out.push(("d.head".to_string(), self.width_at(0), 2, 1));
        out.push(("m.conv0".to_string(), 2, self.mask_width, 1));
        out.push(("m.conv1".to_string(), self.mask_width, self.mask_width, 1));
        out.push(("m.head".to_string(), self.mask_width, 1, 1));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub arch: ArchConfig,
    pub seed: u64,
    pub layers: Vec<ConvSpec>,
    pub values: Vec<f64>,
}

/// Builds the layer table for `arch` with offsets into a flat vector.
pub fn topology(arch: &ArchConfig) -> Vec<ConvSpec> {
    let mut offset = 0;
    arch.layer_shapes()
        .into_iter()
        .map(|(name, cin, cout, stride)| {
            let weight_offset = offset;
            let bias_offset = weight_offset + cout * cin * 9;
            offset = bias_offset + cout;
            ConvSpec {
                name,
                cin,
                cout,
                stride,
                weight_offset,
                bias_offset,
            }
        })
        .collect()
}

pub fn init_params(seed: u64, arch: ArchConfig) -> Result<NetParams> {
    arch.validate()?;
    let layers = topology(&arch);
    let count = layers.last().map_or(0, |l| l.bias_offset + l.cout);
    let mut values = vec![0.0; count];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = 1.0 + arch.leaky_slope * arch.leaky_slope;
    for layer in &layers {
        let bound = (6.0 / (gain * layer.fan_in() as f64)).sqrt();
        for w in &mut values[layer.weight_offset..layer.weight_offset + layer.weight_len()] {
            *w = rng.gen_range(-bound..bound);
        }
    }
    if let Some(head) = layers.last() {
        values[head.bias_offset..head.bias_offset + head.cout].fill(arch.mask_prior_logit);
    }
    Ok(NetParams {
        arch,
        seed,
        layers,
        values,
    })
}

const NET_KIND: &str = "net-params";

impl NetParams {
    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn difference_layers(&self) -> &[ConvSpec] {
        &self.layers[..self.layers.len() - 3]
    }

    fn mask_layers(&self) -> &[ConvSpec] {
        &self.layers[self.layers.len() - 3..]
    }

    /// Index range of the masking head inside [`values`](Self::values).
    pub fn mask_param_range(&self) -> std::ops::Range<usize> {
        self.mask_layers()[0].weight_offset..self.values.len()
    }

    pub fn header(&self, kind: &str) -> ContainerHeader {
        ContainerHeader {
            kind: kind.to_string(),
            arch: self.arch,
            seed: self.seed,
            param_count: self.param_count(),
            layers: self.layers.clone(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, &self.header(NET_KIND), &[&self.values])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = container::read(path)?;
        Self::from_parts(path, header, blocks.into_iter().next())
    }

    /// Rebuilds parameters from a container header and its first tensor block.
    pub fn from_parts(path: &Path, header: ContainerHeader, values: Option<Vec<f64>>) -> Result<Self> {
        header.arch.validate()?;
        let layers = topology(&header.arch);
        if layers != header.layers {
            return Err(Error::corrupt(path, "layer table does not match architecture"));
        }
        let values = values.ok_or_else(|| Error::corrupt(path, "missing parameter block"))?;
        if values.len() != header.param_count
            || layers.last().map_or(0, |l| l.bias_offset + l.cout) != values.len()
        {
            return Err(Error::corrupt(path, "parameter count mismatch"));
        }
        Ok(Self {
            arch: header.arch,
            seed: header.seed,
            layers,
            values,
        })
    }
}

/// Stacks template planes then source planes into the network input.
pub fn network_input(arch: &ArchConfig, template: &ImageBuf, source: &ImageBuf) -> Result<Tensor> {
    template.ensure_same_shape(source, "network input")?;
    let (h, w) = template.shape();
    let m = arch.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} is not divisible by {m} required by a {}-level network",
            arch.levels
        )));
    }
    let planes: Vec<Plane> = match arch.input {
        InputMode::Gray => vec![spectral::to_grayscale(template)?, spectral::to_grayscale(source)?],
        InputMode::Rgb => {
            let mut v = Vec::with_capacity(6);
            for img in [template, source] {
                match img.channels() {
                    3 => (0..3).for_each(|c| v.push(img.channel(c))),
                    1 => (0..3).for_each(|_| v.push(img.channel(0))),
                    n => return Err(Error::UnsupportedChannels(n)),
                }
            }
            v
        }
    };
    let refs: Vec<&[f64]> = planes.iter().map(|p| p.data()).collect();
    Ok(Tensor::from_planes(&refs, h, w))
}

/// Activations kept for the reverse pass of the difference learner.
#[derive(Debug, Clone)]
pub struct DifferenceTape {
    input: Tensor,
    enc: Vec<Tensor>,
    cat: Vec<Tensor>,
    dec: Vec<Tensor>,
    out: Tensor,
}

impl DifferenceTape {
    /// The two sigmoid streams (channel 0 = O_t, channel 1 = O_s).
    pub fn outputs(&self) -> (DefectMap, DefectMap) {
        let (h, w) = (self.out.height, self.out.width);
        (
            Plane::new(h, w, self.out.channel(0).to_vec()).expect("shape"),
            Plane::new(h, w, self.out.channel(1).to_vec()).expect("shape"),
        )
    }
}

fn conv_act(layer: &ConvSpec, values: &[f64], x: &Tensor, slope: f64) -> Tensor {
    let mut y = layer.forward(values, x);
    nn::leaky_relu_inplace(&mut y, slope);
    y
}

pub fn difference_forward_taped(params: &NetParams, input: Tensor) -> Result<DifferenceTape> {
    let arch = &params.arch;
    if input.channels != arch.input_channels() {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} input channels, got {}",
            arch.input_channels(),
            input.channels
        )));
    }
    let m = arch.size_multiple();
    if input.height % m != 0 || input.width % m != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} is not divisible by {m}",
            input.height, input.width
        )));
    }
    let layers = params.difference_layers();
    let v = &params.values;
    let slope = arch.leaky_slope;
    let levels = arch.levels;

    let mut enc = Vec::with_capacity(levels);
    enc.push(conv_act(&layers[0], v, &input, slope));
    for l in 1..levels {
        let y = conv_act(&layers[l], v, &enc[l - 1], slope);
        enc.push(y);
    }
    // cat[l] / dec[l] for l in 0..levels-1; dec[levels-1] is the bottleneck.
    let mut cat: Vec<Option<Tensor>> = vec![None; levels.saturating_sub(1)];
    let mut dec: Vec<Option<Tensor>> = vec![None; levels];
    dec[levels - 1] = Some(enc[levels - 1].clone());
    for (i, l) in (0..levels - 1).rev().enumerate() {
        let up = nn::upsample2(dec[l + 1].as_ref().expect("decoded"));
        let c = Tensor::concat(&up, &enc[l]);
        let y = conv_act(&layers[levels + i], v, &c, slope);
        cat[l] = Some(c);
        dec[l] = Some(y);
    }
    let head = &layers[2 * levels - 1];
    let mut out = head.forward(v, dec[0].as_ref().expect("decoded"));
    nn::sigmoid_inplace(&mut out);
    Ok(DifferenceTape {
        input,
        enc,
        cat: cat.into_iter().map(|c| c.expect("filled")).collect(),
        dec: dec.into_iter().map(|d| d.expect("filled")).collect(),
        out,
    })
}

/// Accumulates parameter gradients of the difference learner given the loss
/// gradients with respect to O_t and O_s. Returns the input gradient when
/// requested.
pub fn difference_backward(
    params: &NetParams,
    tape: &DifferenceTape,
    grad_t: &Plane,
    grad_s: &Plane,
    grads: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let layers = params.difference_layers();
    let v = &params.values;
    let slope = params.arch.leaky_slope;
    let levels = params.arch.levels;

    let mut g = Tensor::from_planes(&[grad_t.data(), grad_s.data()], tape.out.height, tape.out.width);
    nn::sigmoid_backward(&tape.out, &mut g);
    let head = &layers[2 * levels - 1];
    let mut g_dec = head
        .backward(v, &tape.dec[0], &g, grads, true)
        .expect("input grad requested");

    // Gradients flowing into each encoder output through the skip connections.
    let mut g_skip: Vec<Option<Tensor>> = vec![None; levels];
    for l in 0..levels - 1 {
        let layer = &layers[2 * levels - 2 - l];
        nn::leaky_relu_backward(&tape.dec[l], &mut g_dec, slope);
        let g_cat = layer
            .backward(v, &tape.cat[l], &g_dec, grads, true)
            .expect("input grad requested");
        let up_channels = params.arch.width_at(l + 1);
        let (g_up, g_enc) = g_cat.split(up_channels);
        g_skip[l] = Some(g_enc);
        g_dec = nn::upsample2_backward(&g_up);
    }
    // g_dec now holds the gradient at the bottleneck = enc[levels-1].
    let mut g_enc = g_dec;
    for l in (0..levels).rev() {
        if let Some(s) = g_skip[l].take() {
            for (a, b) in g_enc.data.iter_mut().zip(&s.data) {
                *a += b;
            }
        }
        nn::leaky_relu_backward(&tape.enc[l], &mut g_enc, slope);
        let x = if l == 0 { &tape.input } else { &tape.enc[l - 1] };
        let want = l > 0 || need_input_grad;
        match layers[l].backward(v, x, &g_enc, grads, want) {
            Some(g) => g_enc = g,
            None => return None,
        }
    }
    Some(g_enc)
}

pub fn difference_forward(
    params: &NetParams,
    aligned_template: &ImageBuf,
    source: &ImageBuf,
) -> Result<(DefectMap, DefectMap)> {
    let input = network_input(&params.arch, aligned_template, source)?;
    Ok(difference_forward_taped(params, input)?.outputs())
}

#[derive(Debug, Clone)]
pub struct MaskTape {
    input: Tensor,
    h0: Tensor,
    h1: Tensor,
    out: Tensor,
}

impl MaskTape {
    pub fn output(&self) -> DefectMap {
        Plane::new(self.out.height, self.out.width, self.out.data.clone()).expect("shape")
    }
}

pub fn mask_forward_taped(params: &NetParams, o_t: &DefectMap, o_s: &DefectMap) -> Result<MaskTape> {
    o_t.ensure_same_shape(o_s, "mask_forward")?;
    let layers = params.mask_layers();
    let v = &params.values;
    let slope = params.arch.leaky_slope;
    let input = Tensor::from_planes(&[o_t.data(), o_s.data()], o_t.height(), o_t.width());
    let h0 = conv_act(&layers[0], v, &input, slope);
    let h1 = conv_act(&layers[1], v, &h0, slope);
    let mut out = layers[2].forward(v, &h1);
    nn::sigmoid_inplace(&mut out);
    Ok(MaskTape { input, h0, h1, out })
}

/// Returns the gradients with respect to (O_t, O_s).
pub fn mask_backward(params: &NetParams, tape: &MaskTape, grad_o: &Plane, grads: &mut [f64]) -> (Plane, Plane) {
    let layers = params.mask_layers();
    let v = &params.values;
    let slope = params.arch.leaky_slope;
    let mut g = Tensor::from_planes(&[grad_o.data()], tape.out.height, tape.out.width);
    nn::sigmoid_backward(&tape.out, &mut g);
    let mut g1 = layers[2].backward(v, &tape.h1, &g, grads, true).expect("input grad");
    nn::leaky_relu_backward(&tape.h1, &mut g1, slope);
    let mut g0 = layers[1].backward(v, &tape.h0, &g1, grads, true).expect("input grad");
    nn::leaky_relu_backward(&tape.h0, &mut g0, slope);
    let gi = layers[0].backward(v, &tape.input, &g0, grads, true).expect("input grad");
    let (h, w) = (gi.height, gi.width);
    (
        Plane::new(h, w, gi.channel(0).to_vec()).expect("shape"),
        Plane::new(h, w, gi.channel(1).to_vec()).expect("shape"),
    )
}

pub fn mask_forward(params: &NetParams, o_t: &DefectMap, o_s: &DefectMap) -> Result<DefectMap> {
    Ok(mask_forward_taped(params, o_t, o_s)?.output())
}

#[derive(Debug, Clone)]
pub struct FullOutput {
    pub o: DefectMap,
    pub o_t: DefectMap,
    pub o_s: DefectMap,
    pub registration: RegistrationResult,
}

pub fn full_forward(params: &NetParams, template: &ImageBuf, source: &ImageBuf) -> Result<FullOutput> {
    let registration = registration::register(template, source)?;
    let (o_t, o_s) = difference_forward(params, &registration.aligned_template, source)?;
    let o = mask_forward(params, &o_t, &o_s)?;
    Ok(FullOutput {
        o,
        o_t,
        o_s,
        registration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::grad_check;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            levels: 3,
            base_width: 2,
            mask_width: 3,
            ..ArchConfig::default()
        }
    }

    fn random_image(seed: u64, n: usize) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuf::from_plane(Plane::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn default_parameter_count_matches_layer_sum() {
        let p = init_params(0, ArchConfig::default()).unwrap();
        // 2→16, 16→32, 32→64, 64→128, (128+64)→64, (64+32)→32, (32+16)→16, 16→2, 2→16, 16→16, 16→1
        let dims = [
            (2, 16),
            (16, 32),
            (32, 64),
            (64, 128),
            (192, 64),
            (96, 32),
            (48, 16),
            (16, 2),
            (2, 16),
            (16, 16),
            (16, 1),
        ];
        let expected: usize = dims.iter().map(|(i, o)| o * i * 9 + o).sum();
        assert_eq!(p.param_count(), expected);
        assert_eq!(p.layers.len(), dims.len());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(5, small_arch()).unwrap();
        let b = init_params(5, small_arch()).unwrap();
        let c = init_params(6, small_arch()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
        let (head, rest) = a.layers.split_last().unwrap();
        for l in rest {
            assert!(a.values[l.bias_offset..l.bias_offset + l.cout].iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.values[head.bias_offset], -4.0);
        let z = init_params(5, ArchConfig { mask_prior_logit: 0.0, ..small_arch() }).unwrap();
        assert_eq!(z.values[head.bias_offset], 0.0);
    }

    #[test]
    fn forward_shapes_and_range() {
        let p = init_params(1, small_arch()).unwrap();
        let t = random_image(1, 16);
        let s = random_image(2, 16);
        let (ot, os) = difference_forward(&p, &t, &s).unwrap();
        assert_eq!(ot.shape(), (16, 16));
        assert!(ot.data().iter().chain(os.data()).all(|&v| v > 0.0 && v < 1.0));
        let o = mask_forward(&p, &ot, &os).unwrap();
        assert_eq!(o.shape(), (16, 16));
        assert!(difference_forward(&p, &random_image(1, 18), &random_image(2, 18)).is_err());
    }

    #[test]
    fn zero_mask_weights_give_half() {
        let mut p = init_params(1, small_arch()).unwrap();
        let r = p.mask_param_range();
        p.values[r].fill(0.0);
        let o = mask_forward(&p, &Plane::filled(8, 8, 0.3), &Plane::filled(8, 8, 0.9)).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.5));
    }

    fn composite_loss(p: &NetParams, t: &ImageBuf, s: &ImageBuf, w: &[f64]) -> f64 {
        let (ot, os) = difference_forward(p, t, s).unwrap();
        let o = mask_forward(p, &ot, &os).unwrap();
        let n = o.len();
        o.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            + ot.data().iter().zip(&w[n..]).map(|(a, b)| a * b).sum::<f64>()
            + os.data().iter().zip(&w[2 * n..]).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let arch = small_arch();
        let p = init_params(3, arch).unwrap();
        let n = 8;
        let t = random_image(4, n);
        let s = random_image(5, n);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let tape = difference_forward_taped(&p, network_input(&arch, &t, &s).unwrap()).unwrap();
        let (ot, os) = tape.outputs();
        let mtape = mask_forward_taped(&p, &ot, &os).unwrap();
        let mut grads = vec![0.0; p.param_count()];
        let g_o = Plane::new(n, n, w[..n * n].to_vec()).unwrap();
        let (mut g_t, mut g_s) = mask_backward(&p, &mtape, &g_o, &mut grads);
        for (a, b) in g_t.data_mut().iter_mut().zip(&w[n * n..2 * n * n]) {
            *a += b;
        }
        for (a, b) in g_s.data_mut().iter_mut().zip(&w[2 * n * n..]) {
            *a += b;
        }
        difference_backward(&p, &tape, &g_t, &g_s, &mut grads, false);

        let f = |x: &[f64]| {
            let mut q = p.clone();
            q.values.copy_from_slice(x);
            composite_loss(&q, &t, &s, &w)
        };
        let report = grad_check(f, &grads, &p.values, 1e-6, 200, 11).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let arch = small_arch();
        let p = init_params(3, arch).unwrap();
        let n = 8;
        let t = random_image(6, n);
        let s = random_image(7, n);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w: Vec<f64> = (0..2 * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = network_input(&arch, &t, &s).unwrap();
        let tape = difference_forward_taped(&p, input.clone()).unwrap();
        let mut grads = vec![0.0; p.param_count()];
        let gt = Plane::new(n, n, w[..n * n].to_vec()).unwrap();
        let gs = Plane::new(n, n, w[n * n..].to_vec()).unwrap();
        let gi = difference_backward(&p, &tape, &gt, &gs, &mut grads, true).unwrap();
        let f = |x: &[f64]| {
            let inp = Tensor {
                data: x.to_vec(),
                ..input.clone()
            };
            let (a, b) = difference_forward_taped(&p, inp).unwrap().outputs();
            a.data().iter().chain(b.data()).zip(&w).map(|(u, v)| u * v).sum::<f64>()
        };
        let report = grad_check(f, &gi.data, &input.data, 1e-6, 100, 2).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let p = init_params(42, small_arch()).unwrap();
        p.save(&path).unwrap();
        let q = NetParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert!(p.values.iter().zip(&q.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
