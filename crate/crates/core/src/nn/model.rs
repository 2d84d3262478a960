//! Network architecture, forward/backward passes and the trained model.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::layers::{relu_backward, relu_inplace, Act, BatchNorm2d, BlockRecord, BnRecord, Conv2d, ConvRecord, Dense, Mode, ResidualBlock};
use super::tensor::Tensor;
use crate::patch::{Patch, Plane};
use crate::rng::stream;
use crate::textfmt::{parse_key_values, parse_u64};
use crate::{Error, Predictor, Result};

/// Patches per inference batch.
pub const INFER_CHUNK: usize = 64;

const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
}

/// Architecture descriptor. Stage 0 keeps the stem resolution; every later
/// stage halves it in its first block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_side: usize,
    /// Patch planes fed to the network, in channel order.
    pub planes: Vec<Plane>,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
}

impl ModelSpec {
    /// A 16-channel stride-2 stem, then residual stages of 16, 32 and 32
    /// channels with one block each.
    pub fn desk(input_side: usize) -> Self {
        ModelSpec {
            input_side,
            planes: Plane::ALL.to_vec(),
            stem_channels: 16,
            stem_stride: 2,
            stages: vec![
                StageSpec { channels: 16, blocks: 1 },
                StageSpec { channels: 32, blocks: 1 },
                StageSpec { channels: 32, blocks: 1 },
            ],
        }
    }

    pub fn with_planes(mut self, planes: &[Plane]) -> Self {
        self.planes = planes.to_vec();
        self
    }

    pub fn input_channels(&self) -> usize {
        self.planes.len()
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArg(format!("model spec: {m}")));
        if self.input_side == 0 {
            return bad("input_side must be positive");
        }
        if self.planes.is_empty() {
            return bad("at least one input plane is required");
        }
        let mut seen = self.planes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.planes.len() {
            return bad("duplicate input plane");
        }
        if self.stem_channels == 0 || self.stem_stride == 0 {
            return bad("stem channels and stride must be positive");
        }
        if self.num_residual_blocks() == 0 {
            return bad("at least one residual block is required");
        }
        if self.stages.iter().any(|s| s.channels == 0) {
            return bad("stage channels must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let planes: String = self.planes.iter().map(|p| p.letter()).collect();
        let stages: Vec<String> = self.stages.iter().map(|s| format!("{}x{}", s.channels, s.blocks)).collect();
        format!(
            "input_side = {}\nplanes = {}\nstem_channels = {}\nstem_stride = {}\nstages = {}\n",
            self.input_side,
            planes,
            self.stem_channels,
            self.stem_stride,
            stages.join(",")
        )
    }

    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("model spec: missing `{k}`")));
        let num = |k: &str| -> Result<usize> { Ok(parse_u64(k, get(k)?)? as usize) };
        let planes = get("planes")?
            .chars()
            .map(|c| Plane::from_letter(c).ok_or_else(|| Error::Format(format!("model spec: unknown plane `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        let stages = get("stages")?
            .split(',')
            .map(|s| {
                let (c, b) = s
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| Error::Format(format!("model spec: bad stage `{s}`")))?;
                Ok(StageSpec { channels: parse_u64("stages", c)? as usize, blocks: parse_u64("stages", b)? as usize })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec {
            input_side: num("input_side")?,
            planes,
            stem_channels: num("stem_channels")?,
            stem_stride: num("stem_stride")?,
            stages,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(spec)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(&parse_key_values(text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<ResidualBlock>,
    pub head: Dense,
}

/// Everything the backward pass needs from one training-mode forward.
#[derive(Debug)]
pub struct Tape {
    stem: ConvRecord,
    stem_bn: BnRecord,
    stem_out: Vec<f64>,
    blocks: Vec<BlockRecord>,
    pooled: Vec<f64>,
    /// Shape of the last feature map: channels, batch, height * width.
    last: (usize, usize, usize),
}

impl Network {
    /// Seeded initialization. Weights are rounded to f32 so that a model
    /// written to disk reads back bit-identical.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(seed, &[INIT_STREAM]);
        let stem = Conv2d::new(spec.input_channels(), spec.stem_channels, 3, spec.stem_stride, &mut rng);
        let mut blocks = Vec::new();
        let mut ch = spec.stem_channels;
        for (i, stage) in spec.stages.iter().enumerate() {
            for j in 0..stage.blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(ch, stage.channels, stride, &mut rng));
                ch = stage.channels;
            }
        }
        let head = Dense::new(ch, 2, &mut rng);
        let mut net = Network { stem_bn: BatchNorm2d::new(spec.stem_channels), spec, stem, blocks, head };
        net.quantize();
        Ok(net)
    }

    /// Named tensors in canonical order; the flag marks learnable ones.
    pub fn tensors(&self) -> Vec<(String, &Tensor, bool)> {
        fn bn<'a>(v: &mut Vec<(String, &'a Tensor, bool)>, p: &str, b: &'a BatchNorm2d) {
            v.push((format!("{p}.gamma"), &b.gamma, true));
            v.push((format!("{p}.beta"), &b.beta, true));
            v.push((format!("{p}.running_mean"), &b.running_mean, false));
            v.push((format!("{p}.running_var"), &b.running_var, false));
        }
        let mut v = vec![("stem.conv.weight".to_string(), &self.stem.weight, true)];
        bn(&mut v, "stem.bn", &self.stem_bn);
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("blocks.{i}.conv1.weight"), &b.conv1.weight, true));
            bn(&mut v, &format!("blocks.{i}.bn1"), &b.bn1);
            v.push((format!("blocks.{i}.conv2.weight"), &b.conv2.weight, true));
            bn(&mut v, &format!("blocks.{i}.bn2"), &b.bn2);
            if let Some((c, n)) = &b.projection {
                v.push((format!("blocks.{i}.proj.conv.weight"), &c.weight, true));
                bn(&mut v, &format!("blocks.{i}.proj.bn"), n);
            }
        }
        v.push(("head.weight".to_string(), &self.head.weight, true));
        v.push(("head.bias".to_string(), &self.head.bias, true));
        v
    }

    /// Mutable counterpart of [`Network::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        fn bn<'a>(v: &mut Vec<(String, &'a mut Tensor, bool)>, p: &str, b: &'a mut BatchNorm2d) {
            v.push((format!("{p}.gamma"), &mut b.gamma, true));
            v.push((format!("{p}.beta"), &mut b.beta, true));
            v.push((format!("{p}.running_mean"), &mut b.running_mean, false));
            v.push((format!("{p}.running_var"), &mut b.running_var, false));
        }
        let mut v = vec![("stem.conv.weight".to_string(), &mut self.stem.weight, true)];
        bn(&mut v, "stem.bn", &mut self.stem_bn);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.push((format!("blocks.{i}.conv1.weight"), &mut b.conv1.weight, true));
            bn(&mut v, &format!("blocks.{i}.bn1"), &mut b.bn1);
            v.push((format!("blocks.{i}.conv2.weight"), &mut b.conv2.weight, true));
            bn(&mut v, &format!("blocks.{i}.bn2"), &mut b.bn2);
            if let Some((c, n)) = &mut b.projection {
                v.push((format!("blocks.{i}.proj.conv.weight"), &mut c.weight, true));
                bn(&mut v, &format!("blocks.{i}.proj.bn"), n);
            }
        }
        v.push(("head.weight".to_string(), &mut self.head.weight, true));
        v.push(("head.bias".to_string(), &mut self.head.bias, true));
        v
    }

    /// Learnable tensors only, in gradient order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut().into_iter().filter(|t| t.2).map(|t| t.1).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().filter(|t| t.2).map(|t| t.1.len()).sum()
    }

    /// Rounds every stored value to the nearest f32.
    pub fn quantize(&mut self) {
        for (_, t, _) in self.tensors_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Stacks the selected planes of `patches` into a `[C, N, s, s]` input.
    pub fn input<'a>(&self, patches: impl ExactSizeIterator<Item = &'a Patch>) -> Result<Act> {
        let s = self.spec.input_side;
        let n = patches.len();
        let c = self.spec.input_channels();
        let mut data = vec![0.0; c * n * s * s];
        for (i, p) in patches.enumerate() {
            if p.side != s || p.data.len() != 3 * s * s {
                return Err(Error::ShapeMismatch {
                    expected: format!("{s}x{s}x3 patch"),
                    got: format!("side {} with {} values", p.side, p.data.len()),
                });
            }
            for (k, plane) in self.spec.planes.iter().enumerate() {
                let dst = &mut data[(k * n + i) * s * s..(k * n + i + 1) * s * s];
                for (d, &v) in dst.iter_mut().zip(p.plane(*plane)) {
                    *d = v as f64;
                }
            }
        }
        Ok(Act { channels: c, batch: n, height: s, width: s, data })
    }

    /// Normalized outputs `[N, 2]`, plus the tape in training mode.
    pub fn forward(&self, x: &Act, mode: Mode) -> (Vec<f64>, Option<Tape>) {
        let (a, stem_rec) = self.stem.forward(x, mode);
        let (mut a, stem_bn_rec) = self.stem_bn.forward(a, mode);
        relu_inplace(&mut a.data);
        let stem_out = (mode == Mode::Train).then(|| a.data.clone());
        let mut records = Vec::new();
        for block in &self.blocks {
            let (next, rec) = block.forward(&a, mode);
            records.extend(rec);
            a = next;
        }
        let hw = a.height * a.width;
        let (c, n) = (a.channels, a.batch);
        let mut pooled = vec![0.0; n * c];
        for ch in 0..c {
            for i in 0..n {
                let s: f64 = a.data[(ch * n + i) * hw..(ch * n + i + 1) * hw].iter().sum();
                pooled[i * c + ch] = s / hw as f64;
            }
        }
        let y = self.head.forward(&pooled, n);
        let tape = match mode {
            Mode::Infer => None,
            Mode::Train => Some(Tape {
                stem: stem_rec.unwrap(),
                stem_bn: stem_bn_rec.unwrap(),
                stem_out: stem_out.unwrap(),
                blocks: records,
                pooled,
                last: (c, n, hw),
            }),
        };
        (y, tape)
    }

    /// Gradients of every learnable tensor (in [`Network::params_mut`]
    /// order) given the loss gradient `dy` on the `[N, 2]` outputs.
    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Vec<Vec<f64>> {
        let (c, n, hw) = tape.last;
        let (dhw, dhb, dpooled) = self.head.backward(&tape.pooled, dy, n);
        let mut da = vec![0.0; c * n * hw];
        for ch in 0..c {
            for i in 0..n {
                let g = dpooled[i * c + ch] / hw as f64;
                da[(ch * n + i) * hw..(ch * n + i + 1) * hw].iter_mut().for_each(|v| *v = g);
            }
        }
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, rec) in self.blocks.iter().zip(&tape.blocks).rev() {
            let g = block.backward(rec, da);
            da = g.dx;
            block_grads.push(g.tensors);
        }
        relu_backward(&mut da, &tape.stem_out);
        let (dg, db, dconv) = self.stem_bn.backward(&tape.stem_bn, da);
        let (dw, _) = self.stem.backward(&tape.stem, &dconv, false);
        let mut out = vec![dw, dg, db];
        for g in block_grads.into_iter().rev() {
            out.extend(g);
        }
        out.push(dhw);
        out.push(dhb);
        out
    }

    /// Folds the batch statistics of a training step into the running
    /// statistics.
    pub fn update_running(&mut self, tape: &Tape) {
        self.stem_bn.update_running(&tape.stem_bn);
        for (block, rec) in self.blocks.iter_mut().zip(&tape.blocks) {
            block.update_running(rec);
        }
    }

    /// Inference-mode normalized outputs.
    pub fn infer(&self, patches: &[Patch]) -> Result<Vec<(f64, f64)>> {
        let refs: Vec<&Patch> = patches.iter().collect();
        self.infer_refs(&refs)
    }

    pub fn infer_refs(&self, patches: &[&Patch]) -> Result<Vec<(f64, f64)>> {
        let chunks: Vec<Result<Vec<(f64, f64)>>> = patches
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let x = self.input(chunk.iter().copied())?;
                let (y, _) = self.forward(&x, Mode::Infer);
                Ok(y.chunks(2).map(|p| (p[0], p[1])).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(patches.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// Mean per-sample loss on Train, one entry per epoch.
    pub train_losses: Vec<f64>,
    /// Mean per-sample inference loss on Test per epoch; NaN without a Test split.
    pub test_losses: Vec<f64>,
}

impl TrainingMeta {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_losses.last().copied()
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.test_losses.last().copied()
    }
}

/// A trained network with the output normalizers `(max_w, max_v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: Network,
    pub normalizers: (f64, f64),
    pub meta: TrainingMeta,
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }

    pub fn forward(&self, patches: &[Patch]) -> Result<Vec<(f64, f64)>> {
        let (mw, mv) = self.normalizers;
        Ok(self.net.infer(patches)?.into_iter().map(|(a, b)| (a * mw, b * mv)).collect())
    }
}

impl Predictor for Model {
    fn predict(&self, patches: &[Patch]) -> Result<Vec<(f64, f64)>> {
        self.forward(patches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_side: 8,
            planes: Plane::ALL.to_vec(),
            stem_channels: 4,
            stem_stride: 1,
            stages: vec![StageSpec { channels: 4, blocks: 1 }, StageSpec { channels: 6, blocks: 1 }],
        }
    }

    pub(crate) fn random_patches(n: usize, side: usize, seed: u64) -> Vec<Patch> {
        let mut rng = crate::rng::SplitMix64::seed_from_u64(seed);
        (0..n)
            .map(|_| Patch { side, data: (0..3 * side * side).map(|_| rng.random::<f32>()).collect(), segment: None })
            .collect()
    }

    #[test]
    fn desk_spec_shape() {
        let net = Network::new(ModelSpec::desk(20), 1).unwrap();
        assert_eq!(net.blocks.len(), 3);
        assert!(net.blocks[0].projection.is_none());
        assert!(net.blocks[1].projection.is_some());
        let x = net.input(random_patches(2, 20, 1).iter()).unwrap();
        let (y, _) = net.forward(&x, Mode::Infer);
        assert_eq!(y.len(), 4);
    }

    #[test]
    fn spec_text_round_trip_and_validation() {
        let s = ModelSpec::desk(20).with_planes(&[Plane::Height]);
        assert_eq!(ModelSpec::from_text(&s.to_text()).unwrap(), s);
        let mut bad = s.clone();
        bad.stages.iter_mut().for_each(|st| st.blocks = 0);
        assert!(bad.validate().is_err());
        assert!(ModelSpec::from_text("input_side = 4\nplanes = OX\n").is_err());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut net = Network::new(tiny_spec(), 3).unwrap();
        for (_, t, learnable) in net.tensors_mut() {
            if learnable {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let model = Model { net, normalizers: (100.0, 1.0), meta: TrainingMeta::default() };
        let y = model.forward(&random_patches(3, 8, 2)).unwrap();
        assert!(y.iter().all(|&(w, v)| w == 0.0 && v == 0.0));
    }

    #[test]
    fn identical_patches_identical_outputs_and_batch_independence() {
        let net = Network::new(tiny_spec(), 4).unwrap();
        let p = random_patches(5, 8, 9);
        let same = vec![p[0].clone(); 4];
        let y = net.infer(&same).unwrap();
        assert!(y.iter().all(|o| *o == y[0]));
        let alone = net.infer(&p[2..3]).unwrap()[0];
        let within = net.infer(&p).unwrap()[2];
        assert!((alone.0 - within.0).abs() <= 1e-6 && (alone.1 - within.1).abs() <= 1e-6);
    }

    #[test]
    fn head_scaling_is_homogeneous() {
        let net = Network::new(tiny_spec(), 5).unwrap();
        let p = random_patches(3, 8, 10);
        let base = net.infer(&p).unwrap();
        let mut scaled = net.clone();
        for v in scaled.head.weight.data.iter_mut().chain(scaled.head.bias.data.iter_mut()) {
            *v *= 2.5;
        }
        for (a, b) in base.iter().zip(scaled.infer(&p).unwrap()) {
            assert!((b.0 - 2.5 * a.0).abs() <= 1e-12 * a.0.abs().max(1.0));
            assert!((b.1 - 2.5 * a.1).abs() <= 1e-12 * a.1.abs().max(1.0));
        }
    }

    #[test]
    fn wrong_patch_side_is_shape_mismatch() {
        let net = Network::new(tiny_spec(), 1).unwrap();
        assert!(matches!(net.infer(&random_patches(1, 9, 1)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn initialization_is_seeded() {
        assert_eq!(Network::new(tiny_spec(), 7).unwrap(), Network::new(tiny_spec(), 7).unwrap());
        assert_ne!(Network::new(tiny_spec(), 7).unwrap(), Network::new(tiny_spec(), 8).unwrap());
    }

    /// Central finite differences on a Train-mode forward with batch-norm
    /// batch statistics, loss = nrmse over a batch of four.
    #[test]
    fn gradients_match_finite_differences() {
        use crate::nn::loss::{nrmse_grad, nrmse_loss};
        let net = Network::new(tiny_spec(), 11).unwrap();
        assert!(net.param_count() <= 5000);
        let patches = random_patches(4, 8, 12);
        let truths = [(40.0, 0.5), (70.0, 0.9), (55.0, 0.3), (90.0, 0.7)];
        let (mw, mv) = (100.0, 1.0);
        let loss = |net: &Network| {
            let x = net.input(patches.iter()).unwrap();
            let (y, _) = net.forward(&x, Mode::Train);
            let p: Vec<(f64, f64)> = y.chunks(2).map(|c| (c[0] * mw, c[1] * mv)).collect();
            nrmse_loss(&p, &truths, mw, mv).unwrap().sum
        };
        let x = net.input(patches.iter()).unwrap();
        let (y, tape) = net.forward(&x, Mode::Train);
        let p: Vec<(f64, f64)> = y.chunks(2).map(|c| (c[0] * mw, c[1] * mv)).collect();
        let dy: Vec<f64> = nrmse_grad(&p, &truths, mw, mv).unwrap().into_iter().flat_map(|(a, b)| [a, b]).collect();
        let grads = net.backward(&tape.unwrap(), &dy);
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        let mut probe = net.clone();
        let count = probe.params_mut().len();
        assert_eq!(grads.len(), count);
        for t in 0..count {
            for i in 0..grads[t].len() {
                let orig = probe.params_mut()[t].data[i];
                probe.params_mut()[t].data[i] = orig + eps;
                let up = loss(&probe);
                probe.params_mut()[t].data[i] = orig - eps;
                let down = loss(&probe);
                probe.params_mut()[t].data[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads[t][i];
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }
}
