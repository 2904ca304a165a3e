//! Executing architectures on the tape: parameter layout, initialization,
//! generator and discriminator forward passes, and parameter surgery for
//! pruned models.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{
    branch_layer_id, head_id, plain_layer_id, tail_id, ActivationKind, Block, GeneratorArch, LayerSpec, NormKind,
    PadMode, LEAKY_SLOPE,
};
use crate::error::{Error, Result};
use crate::prune::ChannelPlan;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var, BN_MOMENTUM};

/// Standard deviation of the normal used for convolution weights.
pub const INIT_STD: f64 = 0.02;

/// Discriminator widths; the last layer emits one logit per patch.
pub const DISC_CHANNELS: [usize; 3] = [32, 64, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub role: ParamRole,
}

/// Parameters owned by one layer, in a fixed order.
pub fn layer_params(id: &str, layer: &LayerSpec) -> Vec<ParamSpec> {
    let spec = |role: ParamRole, shape| ParamSpec {
        name: format!("{id}.{}", role.suffix()),
        shape,
        role,
    };
    let mut out = Vec::new();
    match *layer {
        LayerSpec::Conv {
            kernel,
            in_ch,
            out_ch,
            bias,
            ..
        } => {
            out.push(spec(ParamRole::Weight, [out_ch, in_ch, kernel, kernel]));
            if bias {
                out.push(spec(ParamRole::Bias, [out_ch, 1, 1, 1]));
            }
        }
        LayerSpec::TransposedConv {
            kernel,
            in_ch,
            out_ch,
            bias,
            ..
        } => {
            out.push(spec(ParamRole::Weight, [in_ch, out_ch, kernel, kernel]));
            if bias {
                out.push(spec(ParamRole::Bias, [out_ch, 1, 1, 1]));
            }
        }
        LayerSpec::DepthwiseConv { kernel, channels, .. } => {
            out.push(spec(ParamRole::Weight, [channels, 1, kernel, kernel]));
        }
        LayerSpec::Norm {
            channels,
            tracks_running_stats,
            ..
        } => {
            out.push(spec(ParamRole::Gamma, [channels, 1, 1, 1]));
            out.push(spec(ParamRole::Beta, [channels, 1, 1, 1]));
            if tracks_running_stats {
                out.push(spec(ParamRole::RunningMean, [channels, 1, 1, 1]));
                out.push(spec(ParamRole::RunningVar, [channels, 1, 1, 1]));
            }
        }
        LayerSpec::Activation { .. } | LayerSpec::ResidualAdd => {}
    }
    out
}

/// A layer together with its id and, for branch layers, its position.
#[derive(Debug, Clone, Copy)]
pub struct LayerRef<'a> {
    pub layer: &'a LayerSpec,
    pub branch: Option<(usize, usize)>,
}

/// Every executed layer in order. Layers of dead branches are skipped.
pub fn executed_layers(arch: &GeneratorArch) -> Vec<(String, LayerRef<'_>)> {
    let mut out = Vec::new();
    let plain = |layer| LayerRef { layer, branch: None };
    for (i, l) in arch.head.iter().enumerate() {
        out.push((head_id(i), plain(l)));
    }
    for (b, block) in arch.blocks.iter().enumerate() {
        match block {
            Block::IncRes(inc) => {
                for (j, br) in inc.branches.iter().enumerate().filter(|(_, br)| br.alive) {
                    for (i, l) in br.layers.iter().enumerate() {
                        out.push((
                            branch_layer_id(b, j, i),
                            LayerRef {
                                layer: l,
                                branch: Some((b, j)),
                            },
                        ));
                    }
                }
            }
            Block::Plain(p) => {
                for (i, l) in p.layers.iter().enumerate() {
                    out.push((plain_layer_id(b, i), plain(l)));
                }
            }
        }
    }
    for (i, l) in arch.tail.iter().enumerate() {
        out.push((tail_id(i), plain(l)));
    }
    out
}

/// Every parameter of an architecture, in store order.
pub fn param_specs(arch: &GeneratorArch) -> Vec<ParamSpec> {
    executed_layers(arch)
        .iter()
        .flat_map(|(id, r)| layer_params(id, r.layer))
        .collect()
}

fn init_layer_params<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    id: &str,
    layer: &LayerSpec,
    rng: &mut R,
) {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for p in layer_params(id, layer) {
        let t = match (p.role, layer) {
            (ParamRole::Weight, _) => Tensor::from_fn(p.shape, |_| T::of(normal.sample(rng))),
            (ParamRole::Gamma, LayerSpec::Norm { gamma, .. }) => {
                Tensor::new(p.shape, gamma.iter().map(|&g| T::of(g as f64)).collect())
            }
            (ParamRole::Beta, LayerSpec::Norm { beta, .. }) => {
                Tensor::new(p.shape, beta.iter().map(|&g| T::of(g as f64)).collect())
            }
            (ParamRole::RunningVar, _) => Tensor::full(p.shape, T::one()),
            _ => Tensor::zeros(p.shape),
        };
        store.insert(p.name, t, p.role.trainable());
    }
}

/// Fresh parameters: convolution weights from `N(0, 0.02²)`, biases zero,
/// normalization scales and shifts copied from the architecture.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(arch: &GeneratorArch, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (id, r) in executed_layers(arch) {
        init_layer_params(&mut store, &id, r.layer, rng);
    }
    store
}

/// Copies trained normalization scales and shifts back into the
/// architecture, so pruning sees them.
pub fn sync_scales<T: Scalar>(arch: &mut GeneratorArch, store: &ParamStore<T>) -> Result<()> {
    let visit = |l: &mut LayerSpec, id: &str| -> Result<()> {
        if let LayerSpec::Norm { gamma, beta, .. } = l {
            for (v, role) in [(gamma, ParamRole::Gamma), (beta, ParamRole::Beta)] {
                let name = format!("{id}.{}", role.suffix());
                let e = store
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                *v = e.value.data().iter().map(|x| x.f64() as f32).collect();
            }
        }
        Ok(())
    };
    for (i, l) in arch.head.iter_mut().enumerate() {
        visit(l, &head_id(i))?;
    }
    for (b, block) in arch.blocks.iter_mut().enumerate() {
        match block {
            Block::IncRes(inc) => {
                for (j, br) in inc.branches.iter_mut().enumerate().filter(|(_, br)| br.alive) {
                    for (i, l) in br.layers.iter_mut().enumerate() {
                        visit(l, &branch_layer_id(b, j, i))?;
                    }
                }
            }
            Block::Plain(p) => {
                for (i, l) in p.layers.iter_mut().enumerate() {
                    visit(l, &plain_layer_id(b, i))?;
                }
            }
        }
    }
    for (i, l) in arch.tail.iter_mut().enumerate() {
        visit(l, &tail_id(i))?;
    }
    Ok(())
}

/// Batch statistics gathered during a training-mode forward pass, to be
/// folded into running estimates.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Exponential moving average of batch statistics into running buffers.
/// The running variance uses the unbiased estimate.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[StatUpdate]) -> Result<()> {
    for u in updates {
        let m = BN_MOMENTUM;
        let unbias = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        for (role, batch, scale) in [
            (ParamRole::RunningMean, &u.mean, 1.0),
            (ParamRole::RunningVar, &u.var, unbias),
        ] {
            let name = format!("{}.{}", u.layer, role.suffix());
            let e = store
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
            for (r, &b) in e.value.data_mut().iter_mut().zip(batch) {
                *r = T::of((1.0 - m) * r.f64() + m * b * scale);
            }
        }
    }
    Ok(())
}

/// Output of a generator forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    /// Head output followed by every block output; index `b + 1` is the
    /// output of block `b`.
    pub features: Vec<Var>,
    pub stats: Vec<StatUpdate>,
}

struct Exec<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    stats: Vec<StatUpdate>,
}

impl<T: Scalar> Exec<'_, T> {
    fn param(&mut self, id: &str, role: ParamRole) -> Result<Var> {
        self.tape.param(self.store, &format!("{id}.{}", role.suffix()))
    }

    fn layer(&mut self, id: &str, layer: &LayerSpec, x: Var, residual: Option<Var>) -> Result<Var> {
        match *layer {
            LayerSpec::Conv {
                kernel,
                stride,
                pad_mode,
                bias,
                ..
            } => {
                let w = self.param(id, ParamRole::Weight)?;
                let b = if bias { Some(self.param(id, ParamRole::Bias)?) } else { None };
                self.tape.conv2d(x, w, b, stride, kernel / 2, pad_mode)
            }
            LayerSpec::DepthwiseConv {
                kernel,
                stride,
                pad_mode,
                ..
            } => {
                let w = self.param(id, ParamRole::Weight)?;
                self.tape.depthwise_conv2d(x, w, stride, kernel / 2, pad_mode)
            }
            LayerSpec::TransposedConv {
                kernel,
                stride,
                output_pad,
                bias,
                ..
            } => {
                let w = self.param(id, ParamRole::Weight)?;
                let b = if bias { Some(self.param(id, ParamRole::Bias)?) } else { None };
                self.tape.conv_transpose2d(x, w, b, stride, kernel / 2, output_pad)
            }
            LayerSpec::Norm {
                norm_type,
                tracks_running_stats,
                ..
            } => {
                let g = self.param(id, ParamRole::Gamma)?;
                let b = self.param(id, ParamRole::Beta)?;
                match (norm_type, tracks_running_stats, self.mode) {
                    (NormKind::Instance, ..) => self.tape.instance_norm(x, g, b),
                    (NormKind::Batch, true, Mode::Eval) => {
                        let name = |r: ParamRole| format!("{id}.{}", r.suffix());
                        let missing = |n: String| Error::Checkpoint(format!("missing buffer {n}"));
                        let mean = self
                            .store
                            .get(&name(ParamRole::RunningMean))
                            .ok_or_else(|| missing(name(ParamRole::RunningMean)))?;
                        let var = self
                            .store
                            .get(&name(ParamRole::RunningVar))
                            .ok_or_else(|| missing(name(ParamRole::RunningVar)))?;
                        self.tape.norm_fixed(x, g, b, mean.value.data(), var.value.data())
                    }
                    (NormKind::Batch, tracks, _) => {
                        let [n, _, h, w] = self.tape.shape(x);
                        let (y, mean, var) = self.tape.batch_norm(x, g, b)?;
                        if tracks {
                            self.stats.push(StatUpdate {
                                layer: id.to_string(),
                                mean,
                                var,
                                count: n * h * w,
                            });
                        }
                        Ok(y)
                    }
                }
            }
            LayerSpec::Activation { function } => Ok(match function {
                ActivationKind::Relu => self.tape.relu(x),
                ActivationKind::LeakyRelu => self.tape.leaky_relu(x, LEAKY_SLOPE as f64),
                ActivationKind::Tanh => self.tape.tanh(x),
                ActivationKind::Sigmoid => self.tape.sigmoid(x),
            }),
            LayerSpec::ResidualAdd => {
                let r = residual.ok_or_else(|| Error::Shape(format!("{id}: residual add outside a block")))?;
                self.tape.add(x, r)
            }
        }
    }

    fn sequence(
        &mut self,
        layers: &[LayerSpec],
        id: &dyn Fn(usize) -> String,
        mut x: Var,
        residual: Option<Var>,
    ) -> Result<Var> {
        for (i, l) in layers.iter().enumerate() {
            x = self.layer(&id(i), l, x, residual)?;
        }
        Ok(x)
    }
}

/// Runs a generator. Blocks with no live branch pass their input through.
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &GeneratorArch,
    store: &ParamStore<T>,
    x: Var,
    mode: Mode,
) -> Result<Forward> {
    let mut ex = Exec {
        tape,
        store,
        mode,
        stats: Vec::new(),
    };
    let mut h = ex.sequence(&arch.head, &head_id, x, None)?;
    let mut features = vec![h];
    for (b, block) in arch.blocks.iter().enumerate() {
        h = match block {
            Block::IncRes(inc) => {
                let mut acc = h;
                for (j, br) in inc.branches.iter().enumerate().filter(|(_, br)| br.alive) {
                    let id = move |i| branch_layer_id(b, j, i);
                    let y = ex.sequence(&br.layers, &id, h, None)?;
                    acc = ex.tape.add(acc, y)?;
                }
                acc
            }
            Block::Plain(p) => {
                let id = move |i| plain_layer_id(b, i);
                ex.sequence(&p.layers, &id, h, Some(h))?
            }
        };
        features.push(h);
    }
    let output = ex.sequence(&arch.tail, &tail_id, h, None)?;
    Ok(Forward {
        output,
        features,
        stats: ex.stats,
    })
}

/// Convenience: evaluation-mode forward on a constant input, returning the
/// output tensor and the multiply count.
pub fn generate<T: Scalar>(arch: &GeneratorArch, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = generator_forward(&mut tape, arch, store, xv, Mode::Eval)?;
    Ok((tape.value(f.output).clone(), tape.muls()))
}

/// The conditional patch discriminator. It sees the input image and a
/// candidate output concatenated along channels.
pub fn discriminator_layers(in_ch: usize, out_ch: usize) -> Vec<LayerSpec> {
    let [c1, c2, c3] = DISC_CHANNELS;
    let conv = |in_ch, out_ch, stride| LayerSpec::Conv {
        kernel: 3,
        in_ch,
        out_ch,
        stride,
        pad_mode: PadMode::Zero,
        bias: true,
    };
    let leaky = LayerSpec::activation(ActivationKind::LeakyRelu);
    vec![
        conv(in_ch + out_ch, c1, 2),
        leaky.clone(),
        conv(c1, c2, 2),
        leaky,
        conv(c2, c3, 1),
    ]
}

pub fn disc_id(i: usize) -> String {
    format!("disc.{i}")
}

pub fn init_disc_params<T: Scalar, R: Rng + ?Sized>(layers: &[LayerSpec], rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (i, l) in layers.iter().enumerate() {
        init_layer_params(&mut store, &disc_id(i), l, rng);
    }
    store
}

/// Patch logits for `(condition, image)` pairs.
pub fn disc_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[LayerSpec],
    store: &ParamStore<T>,
    condition: Var,
    image: Var,
) -> Result<Var> {
    let x = tape.concat_channels(&[condition, image])?;
    let mut ex = Exec {
        tape,
        store,
        mode: Mode::Train,
        stats: Vec::new(),
    };
    ex.sequence(layers, &disc_id, x, None)
}

fn branch_alive(arch: &GeneratorArch, b: usize, j: usize) -> bool {
    match arch.blocks.get(b) {
        Some(Block::IncRes(inc)) => inc.branches.get(j).is_some_and(|br| br.alive),
        _ => false,
    }
}

fn in_set(set: &[usize], i: usize) -> bool {
    set.binary_search(&i).is_ok()
}

/// Copy of `store` with every entry the pruned model would not carry set
/// to zero: weights touching removed channels, γ and β of removed channels,
/// and all parameters of branches that no longer execute.
pub fn mask_params<T: Scalar>(
    arch: &GeneratorArch,
    store: &ParamStore<T>,
    pruned: &GeneratorArch,
    plan: &ChannelPlan,
) -> Result<ParamStore<T>> {
    let mut out = store.clone();
    for (id, r) in executed_layers(arch) {
        let dead = r.branch.is_some_and(|(b, j)| !branch_alive(pruned, b, j));
        let keep = plan
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("channel plan has no entry for {id}")))?;
        for p in layer_params(&id, r.layer) {
            let e = out
                .get_mut(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let [d0, d1, kh, kw] = p.shape;
            let data = e.value.data_mut();
            if dead {
                if p.role.trainable() {
                    data.iter_mut().for_each(|v| *v = T::zero());
                }
                continue;
            }
            let per = d1 * kh * kw;
            let keep_entry = |a: usize, c: usize| -> bool {
                match (p.role, r.layer) {
                    (ParamRole::Weight, LayerSpec::Conv { .. }) => in_set(&keep.output, a) && in_set(&keep.input, c),
                    (ParamRole::Weight, LayerSpec::TransposedConv { .. }) => {
                        in_set(&keep.input, a) && in_set(&keep.output, c)
                    }
                    (ParamRole::RunningMean | ParamRole::RunningVar, _) => true,
                    _ => in_set(&keep.output, a),
                }
            };
            for a in 0..d0 {
                for c in 0..d1 {
                    if !keep_entry(a, c) {
                        let s = a * per + c * kh * kw;
                        data[s..s + kh * kw].iter_mut().for_each(|v| *v = T::zero());
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Parameters of the pruned model, gathered from the unpruned store by the
/// channel plan.
pub fn slice_params<T: Scalar>(store: &ParamStore<T>, pruned: &GeneratorArch, plan: &ChannelPlan) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (id, r) in executed_layers(pruned) {
        let keep = plan
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("channel plan has no entry for {id}")))?;
        for p in layer_params(&id, r.layer) {
            let src = store
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let [_, s1, kh, kw] = src.value.shape();
            let (rows, cols): (&[usize], &[usize]) = match (p.role, r.layer) {
                (ParamRole::Weight, LayerSpec::Conv { .. }) => (&keep.output, &keep.input),
                (ParamRole::Weight, LayerSpec::TransposedConv { .. }) => (&keep.input, &keep.output),
                _ => (&keep.output, &[0]),
            };
            let sd = src.value.data();
            let mut data = Vec::with_capacity(p.shape.iter().product());
            for &a in rows {
                for &c in cols {
                    let s = (a * s1 + c) * kh * kw;
                    data.extend_from_slice(&sd[s..s + kh * kw]);
                }
            }
            out.insert(p.name, Tensor::new(p.shape, data), src.trainable);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_resnet_template, BlockKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: BlockKind) -> GeneratorArch {
        crate::arch::TemplateOptions::new(6, 2, 1, 3, kind)
            .with_size(16, 16)
            .build()
            .unwrap()
    }

    #[test]
    fn generator_preserves_spatial_size() {
        for kind in [BlockKind::Plain, BlockKind::IncRes] {
            let arch = small(kind);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let store: ParamStore<f32> = init_params(&arch, &mut rng);
            let x = Tensor::full([2, 1, 16, 16], 0.5);
            let (y, muls) = generate(&arch, &store, &x).unwrap();
            assert_eq!(y.shape(), [2, 3, 16, 16]);
            assert!(y.data().iter().all(|v| v.abs() <= 1.0));
            let analytic = crate::macs::total_macs(&arch).unwrap();
            assert_eq!(muls, 2 * analytic);
        }
    }

    #[test]
    fn param_count_matches_specs() {
        let arch = build_resnet_template(6, 1, 1, 3, BlockKind::IncRes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store: ParamStore<f32> = init_params(&arch, &mut rng);
        assert_eq!(store.len(), param_specs(&arch).len());
        assert_eq!(store.trainable_count(), store.len());
    }

    #[test]
    fn batch_norm_tracks_running_stats() {
        let arch = crate::arch::TemplateOptions::new(6, 1, 1, 3, BlockKind::Plain)
            .with_norm(NormKind::Batch)
            .with_size(8, 8)
            .build()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f32> = init_params(&arch, &mut rng);
        assert!(store.trainable_count() < store.len());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 1, 8, 8], |i| (i % 5) as f32));
        let f = generator_forward(&mut tape, &arch, &store, x, Mode::Train).unwrap();
        assert!(!f.stats.is_empty());
        apply_stat_updates(&mut store, &f.stats).unwrap();
        let rm = store.get("head.1.running_mean").unwrap();
        assert!(rm.value.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn discriminator_emits_patch_grid() {
        let layers = discriminator_layers(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store: ParamStore<f32> = init_disc_params(&layers, &mut rng);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros([2, 1, 32, 32]));
        let i = tape.constant(Tensor::zeros([2, 3, 32, 32]));
        let d = disc_forward(&mut tape, &layers, &store, c, i).unwrap();
        assert_eq!(tape.shape(d), [2, 1, 8, 8]);
    }

    #[test]
    fn sync_scales_round_trip() {
        let mut arch = small(BlockKind::IncRes);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store: ParamStore<f32> = init_params(&arch, &mut rng);
        store.get_mut("head.1.gamma").unwrap().value.data_mut()[0] = 0.25;
        sync_scales(&mut arch, &store).unwrap();
        match &arch.head[1] {
            LayerSpec::Norm { gamma, .. } => assert_eq!(gamma[0], 0.25),
            _ => unreachable!(),
        }
    }

    #[test]
    fn pruned_execution_matches_masked_reference() {
        let mut arch = small(BlockKind::IncRes);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        arch.randomize_scales(&mut rng, 1.0, 0.5);
        let store: ParamStore<f32> = init_params(&arch, &mut rng);
        let scales = crate::prune::collect_scales(&arch).unwrap();
        let tau = scales[scales.len() / 2];
        let masks = crate::prune::threshold_masks(&arch, tau, 2);
        let (pruned, plan) = crate::prune::apply_masks(&arch, &masks);
        let sliced = slice_params(&store, &pruned, &plan).unwrap();
        let masked = mask_params(&arch, &store, &pruned, &plan).unwrap();
        let x = Tensor::from_fn([2, 1, 16, 16], |i| ((i * 31) % 17) as f32 / 17.0);
        let (a, _) = generate(&pruned, &sliced, &x).unwrap();
        let (b, _) = generate(&arch, &masked, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5, "{}", a.max_abs_diff(&b));
    }
}
