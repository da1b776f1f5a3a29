//! U-Net encoder-decoder over range images.

pub mod checkpoint;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    BatchNorm2d, Binder, Conv2d, ConvTranspose2d, Gradients, Graph, Mode, Parameter, Scalar,
    Tensor, Var,
};
pub use checkpoint::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth_levels: usize,
    pub base_features: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            num_classes: 4,
            depth_levels: 4,
            base_features: 64,
            input_height: 64,
            input_width: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 || self.base_features == 0 {
            return Err(Error::InvalidArgument(
                "in_channels and base_features must be positive".into(),
            ));
        }
        if self.depth_levels > 16 {
            return Err(Error::InvalidArgument(format!(
                "depth_levels {} is too deep",
                self.depth_levels
            )));
        }
        let factor = 1usize << self.depth_levels;
        for (what, extent) in [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
        ] {
            if extent == 0 || extent % factor != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{what} {extent} is not a positive multiple of 2^{} = {factor}",
                    self.depth_levels
                )));
            }
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_features << level
    }
}

/// Two conv-batchnorm-ReLU stages.
#[derive(Clone, Debug)]
pub struct DoubleConv<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

type BnUpdate<T> = (Vec<T>, Vec<T>);

impl<T: Scalar> DoubleConv<T> {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
        }
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        binder: &mut Binder,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2)] {
            h = conv.forward(g, h, binder)?;
            let (y, upd) = bn.forward(g, h, mode, binder)?;
            updates.extend(upd);
            h = g.relu(y);
        }
        Ok(h)
    }

    fn params(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.conv1
            .params()
            .into_iter()
            .chain(self.bn1.params())
            .chain(self.conv2.params())
            .chain(self.bn2.params())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.conv1
            .params_mut()
            .into_iter()
            .chain(self.bn1.params_mut())
            .chain(self.conv2.params_mut())
            .chain(self.bn2.params_mut())
    }

    fn batchnorms(&self) -> [&BatchNorm2d<T>; 2] {
        [&self.bn1, &self.bn2]
    }

    fn batchnorms_mut(&mut self) -> [&mut BatchNorm2d<T>; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLevel<T> {
    pub level: usize,
    pub up: ConvTranspose2d<T>,
    pub block: DoubleConv<T>,
}

/// Encoder levels run shallow to deep; decoder levels deep to shallow.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    cfg: ModelConfig,
    pub encoders: Vec<DoubleConv<T>>,
    pub bottleneck: DoubleConv<T>,
    pub decoders: Vec<DecoderLevel<T>>,
    pub head: Conv2d<T>,
}

/// A training-mode forward pass: logits plus the bindings needed to route
/// gradients back to the model.
pub struct ForwardPass {
    pub logits: Var,
    binder: Binder,
}

impl<T: Scalar> UNet<T> {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoders = Vec::with_capacity(cfg.depth_levels);
        let mut cin = cfg.in_channels;
        for level in 0..cfg.depth_levels {
            let cout = cfg.width_at(level);
            encoders.push(DoubleConv::new(&format!("enc{level}"), cin, cout, &mut rng));
            cin = cout;
        }
        let bottleneck = DoubleConv::new("bottleneck", cin, cfg.width_at(cfg.depth_levels), &mut rng);
        let mut decoders = Vec::with_capacity(cfg.depth_levels);
        for level in (0..cfg.depth_levels).rev() {
            let width = cfg.width_at(level);
            decoders.push(DecoderLevel {
                level,
                up: ConvTranspose2d::new(&format!("up{level}"), 2 * width, width, &mut rng),
                block: DoubleConv::new(&format!("dec{level}"), 2 * width, width, &mut rng),
            });
        }
        let head = Conv2d::new("head", cfg.base_features, cfg.num_classes, 1, 0, &mut rng);
        Ok(Self {
            cfg,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameters in forward visiting order.
    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out: Vec<&Parameter<T>> = Vec::new();
        for e in &self.encoders {
            out.extend(e.params());
        }
        out.extend(self.bottleneck.params());
        for d in &self.decoders {
            out.extend(d.up.params());
            out.extend(d.block.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<&mut Parameter<T>> = Vec::new();
        for e in &mut self.encoders {
            out.extend(e.params_mut());
        }
        out.extend(self.bottleneck.params_mut());
        for d in &mut self.decoders {
            out.extend(d.up.params_mut());
            out.extend(d.block.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.extend(e.batchnorms());
        }
        out.extend(self.bottleneck.batchnorms());
        for d in &self.decoders {
            out.extend(d.block.batchnorms());
        }
        out
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            out.extend(e.batchnorms_mut());
        }
        out.extend(self.bottleneck.batchnorms_mut());
        for d in &mut self.decoders {
            out.extend(d.block.batchnorms_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_bn_momentum(&mut self, momentum: f64) {
        for bn in self.batchnorms_mut() {
            bn.momentum = momentum;
        }
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4("unet forward")?;
        let cfg = &self.cfg;
        if (c, h, w) != (cfg.in_channels, cfg.input_height, cfg.input_width) {
            return Err(Error::shape(
                "unet forward",
                format!(
                    "input is {c}×{h}×{w}, model expects {}×{}×{}",
                    cfg.in_channels, cfg.input_height, cfg.input_width
                ),
            ));
        }
        Ok(())
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        binder: &mut Binder,
    ) -> Result<(Var, Vec<BnUpdate<T>>)> {
        self.check_input(g, x)?;
        let mut updates = Vec::new();
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x;
        for enc in &self.encoders {
            let f = enc.forward(g, h, mode, binder, &mut updates)?;
            skips.push(f);
            h = g.maxpool2d(f)?;
        }
        h = self.bottleneck.forward(g, h, mode, binder, &mut updates)?;
        for dec in &self.decoders {
            let up = dec.up.forward(g, h, binder)?;
            let skip = skips.pop().expect("one skip per level");
            let (us, ss) = (g.value(up).shape(), g.value(skip).shape());
            if us[2..] != ss[2..] {
                return Err(Error::shape(
                    "unet skip",
                    format!(
                        "level {}: upsampled {:?} vs skip {:?}",
                        dec.level,
                        &us[2..],
                        &ss[2..]
                    ),
                ));
            }
            let cat = g.concat_channels(skip, up)?;
            h = dec.block.forward(g, cat, mode, binder, &mut updates)?;
        }
        let logits = self.head.forward(g, h, binder)?;
        Ok((logits, updates))
    }

    /// Forward with trainable parameters. In [`Mode::Train`] the batchnorm
    /// running statistics are updated.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<ForwardPass> {
        let mut binder = Binder::new(true);
        let (logits, updates) = self.run(g, x, mode, &mut binder)?;
        for (bn, upd) in self.batchnorms_mut().into_iter().zip(updates) {
            bn.set_running(upd);
        }
        Ok(ForwardPass { logits, binder })
    }

    /// Eval-mode forward with frozen parameters; safe to run concurrently.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut binder = Binder::new(false);
        Ok(self.run(g, x, Mode::Eval, &mut binder)?.0)
    }

    /// Moves the gradients of `pass` onto the parameters.
    pub fn collect_grads(&mut self, pass: &ForwardPass, grads: &mut Gradients<T>) -> Result<()> {
        pass.binder.collect_grads(self.parameters_mut(), grads)
    }

    /// Eval-mode logits for an `[N, C, H, W]` batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = self.forward_eval(&mut g, x)?;
        let out = g.value(y).clone();
        Ok(out)
    }

    /// Serializes parameters and batchnorm statistics, plus Adam state when
    /// `with_optimizer` is set.
    pub fn to_checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let cfg = &self.cfg;
        for (key, v) in [
            ("in_channels", cfg.in_channels),
            ("num_classes", cfg.num_classes),
            ("depth_levels", cfg.depth_levels),
            ("base_features", cfg.base_features),
            ("input_height", cfg.input_height),
            ("input_width", cfg.input_width),
        ] {
            ck.push_u64(format!("@config.{key}"), v as u64);
        }
        let f32s = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64() as f32).collect();
        for p in self.parameters() {
            ck.push(p.name.clone(), p.value.shape(), f32s(&p.value));
        }
        for bn in self.batchnorms() {
            let to = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
            ck.push(
                format!("{}.running_mean", bn.name),
                &[bn.running_mean.len()],
                to(&bn.running_mean),
            );
            ck.push(
                format!("{}.running_var", bn.name),
                &[bn.running_var.len()],
                to(&bn.running_var),
            );
        }
        if with_optimizer {
            for p in self.parameters() {
                ck.push(format!("{}#adam_m", p.name), p.adam_m.shape(), f32s(&p.adam_m));
                ck.push(format!("{}#adam_v", p.name), p.adam_v.shape(), f32s(&p.adam_v));
                ck.push_u64(format!("{}#adam_step", p.name), p.step_count);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |key: &str| -> Result<usize> { Ok(ck.get_u64(&format!("@config.{key}"))? as usize) };
        let cfg = ModelConfig {
            in_channels: get("in_channels")?,
            num_classes: get("num_classes")?,
            depth_levels: get("depth_levels")?,
            base_features: get("base_features")?,
            input_height: get("input_height")?,
            input_width: get("input_width")?,
        };
        let mut model = Self::build(cfg, 0)?;
        model.load_state(ck)?;
        Ok(model)
    }

    /// Loads parameters (and Adam state, if present) from `ck`. Fails on
    /// the first parameter whose name or shape does not match.
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        fn fetch<T: Scalar>(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
            let e = ck.get(name).ok_or_else(|| {
                Error::CheckpointMismatch(format!("parameter `{name}` missing from checkpoint"))
            })?;
            if e.shape != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, model expects {:?}",
                    e.shape, shape
                )));
            }
            Tensor::from_vec(shape, e.data.iter().map(|&v| T::of(v as f64)).collect())
        }

        let mut known = std::collections::HashSet::new();
        let with_optimizer = self
            .parameters()
            .first()
            .is_some_and(|p| ck.get(&format!("{}#adam_m", p.name)).is_some());
        // Stage everything first so a failed load leaves the model untouched.
        let mut staged = Vec::new();
        for p in self.parameters() {
            let shape = p.value.shape();
            let value = fetch::<T>(ck, &p.name, shape)?;
            known.insert(p.name.clone());
            let adam = if with_optimizer {
                let m = fetch::<T>(ck, &format!("{}#adam_m", p.name), shape)?;
                let v = fetch::<T>(ck, &format!("{}#adam_v", p.name), shape)?;
                let step_name = format!("{}#adam_step", p.name);
                let step = ck.get_u64(&step_name)?;
                known.extend([format!("{}#adam_m", p.name), format!("{}#adam_v", p.name), step_name]);
                Some((m, v, step))
            } else {
                None
            };
            staged.push((value, adam));
        }
        let mut stats = Vec::new();
        for bn in self.batchnorms() {
            let c = bn.running_mean.len();
            let names = [format!("{}.running_mean", bn.name), format!("{}.running_var", bn.name)];
            let mean = fetch::<T>(ck, &names[0], &[c])?.into_data();
            let var = fetch::<T>(ck, &names[1], &[c])?.into_data();
            known.extend(names);
            stats.push((mean, var));
        }
        if let Some(extra) = ck
            .entries
            .iter()
            .find(|e| !e.name.starts_with('@') && !known.contains(&e.name))
        {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint entry `{}` has no counterpart in the model",
                extra.name
            )));
        }
        for (p, (value, adam)) in self.parameters_mut().into_iter().zip(staged) {
            p.value = value;
            p.grad = None;
            match adam {
                Some((m, v, step)) => {
                    p.adam_m = m;
                    p.adam_v = v;
                    p.step_count = step;
                }
                None => {
                    p.adam_m = Tensor::zeros(p.value.shape());
                    p.adam_v = Tensor::zeros(p.value.shape());
                    p.step_count = 0;
                }
            }
        }
        for (bn, s) in self.batchnorms_mut().into_iter().zip(stats) {
            bn.set_running(s);
        }
        Ok(())
    }

    pub fn save_weights(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        self.to_checkpoint(with_optimizer).write(path)
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            depth_levels: 1,
            base_features: 4,
            num_classes: 2,
            input_height: 8,
            input_width: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_ladder() {
        let m = UNet::<f32>::build(ModelConfig::default(), 0).unwrap();
        let widths: Vec<usize> = m.encoders.iter().map(|e| e.conv2.weight.value.shape()[0]).collect();
        assert_eq!(widths, [64, 128, 256, 512]);
        assert_eq!(m.encoders[0].conv1.weight.value.shape()[1], 2);
        assert_eq!(m.bottleneck.conv2.weight.value.shape()[0], 1024);
        let ups: Vec<[usize; 2]> = m
            .decoders
            .iter()
            .map(|d| [d.up.weight.value.shape()[0], d.up.weight.value.shape()[1]])
            .collect();
        assert_eq!(ups, [[1024, 512], [512, 256], [256, 128], [128, 64]]);
        assert_eq!(m.head.weight.value.shape(), &[4, 64, 1, 1]);
    }

    #[test]
    fn invalid_configs_name_the_extent() {
        let err = UNet::<f32>::build(ModelConfig { input_width: 500, ..ModelConfig::default() }, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("input_width 500"), "{err}");
        let err = UNet::<f32>::build(ModelConfig { input_height: 60, ..ModelConfig::default() }, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("input_height 60"), "{err}");
        assert!(UNet::<f32>::build(ModelConfig { num_classes: 1, ..ModelConfig::default() }, 0).is_err());
    }

    #[test]
    fn names_are_unique_and_stable() {
        let a = UNet::<f32>::build(toy(), 1).unwrap();
        let b = UNet::<f32>::build(toy(), 1).unwrap();
        let names: Vec<&str> = a.parameters().iter().map(|p| p.name.as_str()).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        for (p, q) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let c = UNet::<f32>::build(toy(), 2).unwrap();
        assert_ne!(a.encoders[0].conv1.weight.value, c.encoders[0].conv1.weight.value);
    }

    #[test]
    fn rejects_wrong_input_extent() {
        let m = UNet::<f32>::build(toy(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 2, 8, 8])).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 3, 8, 16])).is_err());
    }
}
