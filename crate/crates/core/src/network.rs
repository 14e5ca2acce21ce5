//! The segmentation network: point-cloud embedding, an L-layer backbone
//! alternating plane-space mixing (project, convolve, back-project, gate)
//! with channel-space mixing, and a linear head.
//!
//! The backbone cycles through the five projection planes with period 5;
//! each plane's previous convolution output is added back the next time
//! the same plane comes around (the layer-skip recurrence). A batch of
//! clouds shares one tape: per-cloud sub-graphs are independent except
//! for batch normalization, which sees the concatenated point sets.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormState, Gradients, Mode, Tape, Var};
use crate::cloud::{self, PointCloud};
use crate::error::{Error, Result};
use crate::projection::{assign_cells, CellAssignment, PlaneKind, PlaneSetConfig};
use crate::tensor::{Real, Tensor};

pub const INPUT_CHANNELS: usize = 5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    /// Backbone depth L; must be a positive multiple of 5.
    pub layers: usize,
    /// Point feature width C.
    pub channels: usize,
    /// Neighborhood size for the embedding.
    pub k_neighbors: usize,
    pub num_classes: usize,
    /// Hidden width of the embedding MLP and the channel-mix linears.
    pub mlp_hidden: usize,
    /// Hidden channels of the two-layer plane convolution.
    pub conv_hidden: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Plane cycle; layer l uses entry (l - 1) mod 5.
    pub plane_order: [PlaneKind; 5],
    pub planes: PlaneSetConfig,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || !self.layers.is_multiple_of(5) {
            return Err(Error::config(format!(
                "layer count {} must be a positive multiple of 5",
                self.layers
            )));
        }
        if self.channels == 0 || self.mlp_hidden == 0 || self.conv_hidden == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.k_neighbors == 0 {
            return Err(Error::config("k_neighbors must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::config("bn_momentum must lie in (0, 1)"));
        }
        if self.bn_eps < 0.0 {
            return Err(Error::config("bn_eps must be non-negative"));
        }
        let mut seen = [false; 5];
        for kind in self.plane_order {
            seen[kind_index(kind)] = true;
        }
        if seen != [true; 5] {
            return Err(Error::config("plane_order must list each plane exactly once"));
        }
        self.planes.validate()
    }

    /// Plane used by backbone layer `l` (1-based).
    pub fn plane_for_layer(&self, l: usize) -> Result<PlaneKind> {
        crate::projection::plane_for_layer_in(&self.plane_order, l, self.layers)
    }
}

/// Position of a plane kind in [`PlaneKind::ALL`].
pub fn kind_index(kind: PlaneKind) -> usize {
    PlaneKind::ALL.iter().position(|&k| k == kind).expect("known kind")
}

#[derive(Debug, Clone)]
pub struct LinearParams<R: Real> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

#[derive(Debug, Clone)]
pub struct ConvParams<R: Real> {
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
}

#[derive(Debug, Clone)]
pub struct BnParams<R: Real> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    pub state: BatchNormState<R>,
}

#[derive(Debug, Clone)]
pub struct EmbedParams<R: Real> {
    pub bn_point: BnParams<R>,
    pub point_linear: LinearParams<R>,
    pub mlp_bn_in: BnParams<R>,
    pub mlp_fc1: LinearParams<R>,
    pub mlp_fc2: LinearParams<R>,
    pub mlp_bn_out: BnParams<R>,
    pub merge: LinearParams<R>,
}

#[derive(Debug, Clone)]
pub struct SpatialMixParams<R: Real> {
    pub bn: BnParams<R>,
    pub conv1: ConvParams<R>,
    pub conv2: ConvParams<R>,
    pub gate: LinearParams<R>,
    pub gate_bn: BnParams<R>,
}

#[derive(Debug, Clone)]
pub struct ChannelMixParams<R: Real> {
    pub bn: BnParams<R>,
    pub fc1: LinearParams<R>,
    pub fc2: LinearParams<R>,
    pub dw_weight: Tensor<R>,
    pub dw_bias: Tensor<R>,
}

/// All learnable state of the network, addressable per layer and block.
#[derive(Debug, Clone)]
pub struct NetworkParams<R: Real> {
    pub embed: EmbedParams<R>,
    pub layers: Vec<(SpatialMixParams<R>, ChannelMixParams<R>)>,
    pub head: LinearParams<R>,
}

fn kaiming_linear<R: Real>(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize) -> LinearParams<R> {
    let bound = (6.0 / in_c as f64).sqrt();
    let data = (0..out_c * in_c)
        .map(|_| R::from_f64_c(rng.gen_range(-bound..bound)))
        .collect();
    LinearParams {
        weight: Tensor::new(&[out_c, in_c], data),
        bias: Tensor::zeros(&[out_c]),
    }
}

fn kaiming_conv<R: Real>(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize) -> ConvParams<R> {
    let fan_in = 9 * in_c;
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..out_c * 9 * in_c)
        .map(|_| R::from_f64_c(rng.gen_range(-bound..bound)))
        .collect();
    ConvParams {
        kernel: Tensor::new(&[out_c, 3, 3, in_c], data),
        bias: Tensor::zeros(&[out_c]),
    }
}

fn bn_params<R: Real>(channels: usize, cfg: &NetworkConfig) -> BnParams<R> {
    BnParams {
        gamma: Tensor::full(&[channels], R::one()),
        beta: Tensor::zeros(&[channels]),
        state: BatchNormState::new(channels, cfg.bn_momentum, cfg.bn_eps),
    }
}

/// Deterministic parameter initialization: Kaiming-uniform fan-in for
/// weights and kernels, zeros for biases, gamma 1 / beta 0, and neutral
/// (unit) depthwise scales.
pub fn init_params<R: Real>(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<R>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.channels;
    let embed = EmbedParams {
        bn_point: bn_params(INPUT_CHANNELS, config),
        point_linear: kaiming_linear(&mut rng, c, INPUT_CHANNELS),
        mlp_bn_in: bn_params(INPUT_CHANNELS, config),
        mlp_fc1: kaiming_linear(&mut rng, config.mlp_hidden, INPUT_CHANNELS),
        mlp_fc2: kaiming_linear(&mut rng, c, config.mlp_hidden),
        mlp_bn_out: bn_params(c, config),
        merge: kaiming_linear(&mut rng, c, 2 * c),
    };
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let spatial = SpatialMixParams {
            bn: bn_params(c, config),
            conv1: kaiming_conv(&mut rng, config.conv_hidden, c),
            conv2: kaiming_conv(&mut rng, c, config.conv_hidden),
            gate: kaiming_linear(&mut rng, c, c),
            gate_bn: bn_params(c, config),
        };
        let channel = ChannelMixParams {
            bn: bn_params(c, config),
            fc1: kaiming_linear(&mut rng, config.mlp_hidden, c),
            fc2: kaiming_linear(&mut rng, c, config.mlp_hidden),
            dw_weight: Tensor::full(&[c], R::one()),
            dw_bias: Tensor::zeros(&[c]),
        };
        layers.push((spatial, channel));
    }
    let head = kaiming_linear(&mut rng, config.num_classes, c);
    Ok(NetworkParams {
        embed,
        layers,
        head,
    })
}

impl<R: Real> NetworkParams<R> {
    /// Visit every learnable tensor in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor<R>)) {
        let e = &self.embed;
        f("embed.bn_point.gamma", &e.bn_point.gamma);
        f("embed.bn_point.beta", &e.bn_point.beta);
        f("embed.point_linear.weight", &e.point_linear.weight);
        f("embed.point_linear.bias", &e.point_linear.bias);
        f("embed.mlp_bn_in.gamma", &e.mlp_bn_in.gamma);
        f("embed.mlp_bn_in.beta", &e.mlp_bn_in.beta);
        f("embed.mlp_fc1.weight", &e.mlp_fc1.weight);
        f("embed.mlp_fc1.bias", &e.mlp_fc1.bias);
        f("embed.mlp_fc2.weight", &e.mlp_fc2.weight);
        f("embed.mlp_fc2.bias", &e.mlp_fc2.bias);
        f("embed.mlp_bn_out.gamma", &e.mlp_bn_out.gamma);
        f("embed.mlp_bn_out.beta", &e.mlp_bn_out.beta);
        f("embed.merge.weight", &e.merge.weight);
        f("embed.merge.bias", &e.merge.bias);
        for (i, (s, ch)) in self.layers.iter().enumerate() {
            let l = i + 1;
            f(&format!("layer{l:02}.spatial.bn.gamma"), &s.bn.gamma);
            f(&format!("layer{l:02}.spatial.bn.beta"), &s.bn.beta);
            f(&format!("layer{l:02}.spatial.conv1.kernel"), &s.conv1.kernel);
            f(&format!("layer{l:02}.spatial.conv1.bias"), &s.conv1.bias);
            f(&format!("layer{l:02}.spatial.conv2.kernel"), &s.conv2.kernel);
            f(&format!("layer{l:02}.spatial.conv2.bias"), &s.conv2.bias);
            f(&format!("layer{l:02}.spatial.gate.weight"), &s.gate.weight);
            f(&format!("layer{l:02}.spatial.gate.bias"), &s.gate.bias);
            f(&format!("layer{l:02}.spatial.gate_bn.gamma"), &s.gate_bn.gamma);
            f(&format!("layer{l:02}.spatial.gate_bn.beta"), &s.gate_bn.beta);
            f(&format!("layer{l:02}.channel.bn.gamma"), &ch.bn.gamma);
            f(&format!("layer{l:02}.channel.bn.beta"), &ch.bn.beta);
            f(&format!("layer{l:02}.channel.fc1.weight"), &ch.fc1.weight);
            f(&format!("layer{l:02}.channel.fc1.bias"), &ch.fc1.bias);
            f(&format!("layer{l:02}.channel.fc2.weight"), &ch.fc2.weight);
            f(&format!("layer{l:02}.channel.fc2.bias"), &ch.fc2.bias);
            f(&format!("layer{l:02}.channel.dw.weight"), &ch.dw_weight);
            f(&format!("layer{l:02}.channel.dw.bias"), &ch.dw_bias);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    /// Mutable visit in the same order as [`NetworkParams::for_each`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<R>)) {
        let e = &mut self.embed;
        f("embed.bn_point.gamma", &mut e.bn_point.gamma);
        f("embed.bn_point.beta", &mut e.bn_point.beta);
        f("embed.point_linear.weight", &mut e.point_linear.weight);
        f("embed.point_linear.bias", &mut e.point_linear.bias);
        f("embed.mlp_bn_in.gamma", &mut e.mlp_bn_in.gamma);
        f("embed.mlp_bn_in.beta", &mut e.mlp_bn_in.beta);
        f("embed.mlp_fc1.weight", &mut e.mlp_fc1.weight);
        f("embed.mlp_fc1.bias", &mut e.mlp_fc1.bias);
        f("embed.mlp_fc2.weight", &mut e.mlp_fc2.weight);
        f("embed.mlp_fc2.bias", &mut e.mlp_fc2.bias);
        f("embed.mlp_bn_out.gamma", &mut e.mlp_bn_out.gamma);
        f("embed.mlp_bn_out.beta", &mut e.mlp_bn_out.beta);
        f("embed.merge.weight", &mut e.merge.weight);
        f("embed.merge.bias", &mut e.merge.bias);
        for (i, (s, ch)) in self.layers.iter_mut().enumerate() {
            let l = i + 1;
            f(&format!("layer{l:02}.spatial.bn.gamma"), &mut s.bn.gamma);
            f(&format!("layer{l:02}.spatial.bn.beta"), &mut s.bn.beta);
            f(&format!("layer{l:02}.spatial.conv1.kernel"), &mut s.conv1.kernel);
            f(&format!("layer{l:02}.spatial.conv1.bias"), &mut s.conv1.bias);
            f(&format!("layer{l:02}.spatial.conv2.kernel"), &mut s.conv2.kernel);
            f(&format!("layer{l:02}.spatial.conv2.bias"), &mut s.conv2.bias);
            f(&format!("layer{l:02}.spatial.gate.weight"), &mut s.gate.weight);
            f(&format!("layer{l:02}.spatial.gate.bias"), &mut s.gate.bias);
            f(&format!("layer{l:02}.spatial.gate_bn.gamma"), &mut s.gate_bn.gamma);
            f(&format!("layer{l:02}.spatial.gate_bn.beta"), &mut s.gate_bn.beta);
            f(&format!("layer{l:02}.channel.bn.gamma"), &mut ch.bn.gamma);
            f(&format!("layer{l:02}.channel.bn.beta"), &mut ch.bn.beta);
            f(&format!("layer{l:02}.channel.fc1.weight"), &mut ch.fc1.weight);
            f(&format!("layer{l:02}.channel.fc1.bias"), &mut ch.fc1.bias);
            f(&format!("layer{l:02}.channel.fc2.weight"), &mut ch.fc2.weight);
            f(&format!("layer{l:02}.channel.fc2.bias"), &mut ch.fc2.bias);
            f(&format!("layer{l:02}.channel.dw.weight"), &mut ch.dw_weight);
            f(&format!("layer{l:02}.channel.dw.bias"), &mut ch.dw_bias);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    /// Visit batch-norm running buffers (not learnable, but persisted).
    pub fn for_each_buffer(&self, mut f: impl FnMut(&str, &[R])) {
        self.for_each_bn(|name, bn| {
            f(&format!("{name}.running_mean"), &bn.state.running_mean);
            f(&format!("{name}.running_var"), &bn.state.running_var);
        });
    }

    fn for_each_bn(&self, mut f: impl FnMut(&str, &BnParams<R>)) {
        f("embed.bn_point", &self.embed.bn_point);
        f("embed.mlp_bn_in", &self.embed.mlp_bn_in);
        f("embed.mlp_bn_out", &self.embed.mlp_bn_out);
        for (i, (s, ch)) in self.layers.iter().enumerate() {
            let l = i + 1;
            f(&format!("layer{l:02}.spatial.bn"), &s.bn);
            f(&format!("layer{l:02}.spatial.gate_bn"), &s.gate_bn);
            f(&format!("layer{l:02}.channel.bn"), &ch.bn);
        }
    }

    pub fn for_each_bn_mut(&mut self, mut f: impl FnMut(&str, &mut BnParams<R>)) {
        f("embed.bn_point", &mut self.embed.bn_point);
        f("embed.mlp_bn_in", &mut self.embed.mlp_bn_in);
        f("embed.mlp_bn_out", &mut self.embed.mlp_bn_out);
        for (i, (s, ch)) in self.layers.iter_mut().enumerate() {
            let l = i + 1;
            f(&format!("layer{l:02}.spatial.bn"), &mut s.bn);
            f(&format!("layer{l:02}.spatial.gate_bn"), &mut s.gate_bn);
            f(&format!("layer{l:02}.channel.bn"), &mut ch.bn);
        }
    }

    /// Total learnable scalar count.
    pub fn count(&self) -> usize {
        let mut total = 0;
        self.for_each(|_, t| total += t.len());
        total
    }

    /// Scale every learnable tensor in the backbone layers by zero,
    /// leaving embedding and head untouched (the pure residual network).
    pub fn zero_backbone(&mut self) {
        for (s, ch) in &mut self.layers {
            for t in [
                &mut s.conv1.kernel,
                &mut s.conv1.bias,
                &mut s.conv2.kernel,
                &mut s.conv2.bias,
                &mut s.gate.weight,
                &mut s.gate.bias,
                &mut ch.fc1.weight,
                &mut ch.fc1.bias,
                &mut ch.fc2.weight,
                &mut ch.fc2.bias,
                &mut ch.dw_weight,
                &mut ch.dw_bias,
            ] {
                for v in t.data_mut() {
                    *v = R::zero();
                }
            }
        }
    }
}

struct LinearVars {
    w: Var,
    b: Var,
}

struct ConvVars {
    k: Var,
    b: Var,
}

struct BnVars {
    gamma: Var,
    beta: Var,
}

struct SpatialVars {
    bn: BnVars,
    conv1: ConvVars,
    conv2: ConvVars,
    gate: LinearVars,
    gate_bn: BnVars,
}

struct ChannelVars {
    bn: BnVars,
    fc1: LinearVars,
    fc2: LinearVars,
    dw_w: Var,
    dw_b: Var,
}

struct EmbedVars {
    bn_point: BnVars,
    point_linear: LinearVars,
    mlp_bn_in: BnVars,
    mlp_fc1: LinearVars,
    mlp_fc2: LinearVars,
    mlp_bn_out: BnVars,
    merge: LinearVars,
}

struct NetVars {
    embed: EmbedVars,
    layers: Vec<(SpatialVars, ChannelVars)>,
    head: LinearVars,
}

/// Register every parameter as a named tape leaf, in the same order as
/// [`NetworkParams::for_each`].
fn register_params<R: Real>(tape: &mut Tape<R>, params: &NetworkParams<R>) -> NetVars {
    let lin = |tape: &mut Tape<R>, name: &str, p: &LinearParams<R>| LinearVars {
        w: tape.param(format!("{name}.weight"), p.weight.clone()),
        b: tape.param(format!("{name}.bias"), p.bias.clone()),
    };
    let conv = |tape: &mut Tape<R>, name: &str, p: &ConvParams<R>| ConvVars {
        k: tape.param(format!("{name}.kernel"), p.kernel.clone()),
        b: tape.param(format!("{name}.bias"), p.bias.clone()),
    };
    let bn = |tape: &mut Tape<R>, name: &str, p: &BnParams<R>| BnVars {
        gamma: tape.param(format!("{name}.gamma"), p.gamma.clone()),
        beta: tape.param(format!("{name}.beta"), p.beta.clone()),
    };
    let e = &params.embed;
    let embed = EmbedVars {
        bn_point: bn(tape, "embed.bn_point", &e.bn_point),
        point_linear: lin(tape, "embed.point_linear", &e.point_linear),
        mlp_bn_in: bn(tape, "embed.mlp_bn_in", &e.mlp_bn_in),
        mlp_fc1: lin(tape, "embed.mlp_fc1", &e.mlp_fc1),
        mlp_fc2: lin(tape, "embed.mlp_fc2", &e.mlp_fc2),
        mlp_bn_out: bn(tape, "embed.mlp_bn_out", &e.mlp_bn_out),
        merge: lin(tape, "embed.merge", &e.merge),
    };
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, (s, ch)) in params.layers.iter().enumerate() {
        let l = i + 1;
        let spatial = SpatialVars {
            bn: bn(tape, &format!("layer{l:02}.spatial.bn"), &s.bn),
            conv1: conv(tape, &format!("layer{l:02}.spatial.conv1"), &s.conv1),
            conv2: conv(tape, &format!("layer{l:02}.spatial.conv2"), &s.conv2),
            gate: lin(tape, &format!("layer{l:02}.spatial.gate"), &s.gate),
            gate_bn: bn(tape, &format!("layer{l:02}.spatial.gate_bn"), &s.gate_bn),
        };
        let channel = ChannelVars {
            bn: bn(tape, &format!("layer{l:02}.channel.bn"), &ch.bn),
            fc1: lin(tape, &format!("layer{l:02}.channel.fc1"), &ch.fc1),
            fc2: lin(tape, &format!("layer{l:02}.channel.fc2"), &ch.fc2),
            dw_w: tape.param(format!("layer{l:02}.channel.dw.weight"), ch.dw_weight.clone()),
            dw_b: tape.param(format!("layer{l:02}.channel.dw.bias"), ch.dw_bias.clone()),
        };
        layers.push((spatial, channel));
    }
    let head = lin(tape, "head", &params.head);
    NetVars {
        embed,
        layers,
        head,
    }
}

/// One preprocessed cloud ready for the network: input features, the
/// self-inclusive neighbor table, and the cell assignment of every plane.
#[derive(Clone)]
pub struct NetworkInput<R: Real> {
    pub features: Tensor<R>,
    pub neighbors: Rc<Vec<u32>>,
    pub k: usize,
    /// Indexed by [`kind_index`].
    pub assignments: [Rc<CellAssignment>; 5],
}

impl<R: Real> NetworkInput<R> {
    pub fn prepare(cloud: &PointCloud, config: &NetworkConfig) -> Result<Self> {
        let features = cloud::build_features::<R>(cloud)?;
        let table = cloud::knn(cloud, config.k_neighbors)?;
        let assignments = PlaneKind::ALL
            .map(|kind| assign_cells(cloud, kind, &config.planes).map(Rc::new));
        // `array::map` cannot early-return, so lift errors afterwards.
        let mut out = Vec::with_capacity(5);
        for a in assignments {
            out.push(a?);
        }
        Ok(NetworkInput {
            features,
            neighbors: Rc::new(table.indices().to_vec()),
            k: table.k(),
            assignments: out.try_into().map_err(|_| Error::shape("plane count"))?,
        })
    }

    pub fn points(&self) -> usize {
        self.features.rows()
    }
}

/// Joint batch normalization over a batch of row blocks: statistics are
/// computed on the concatenated rows, then the result is split back.
fn bn_joint<R: Real>(
    tape: &mut Tape<R>,
    xs: &[Var],
    vars: &BnVars,
    bn: &mut BnParams<R>,
    mode: Mode,
) -> Result<Vec<Var>> {
    if xs.len() == 1 {
        return Ok(vec![tape.batch_norm(
            xs[0],
            vars.gamma,
            vars.beta,
            &mut bn.state,
            mode,
        )?]);
    }
    let cat = tape.concat_rows(xs)?;
    let normed = tape.batch_norm(cat, vars.gamma, vars.beta, &mut bn.state, mode)?;
    let mut out = Vec::with_capacity(xs.len());
    let mut start = 0;
    for &x in xs {
        let rows = tape.value(x).rows();
        out.push(tape.take_rows(normed, start, rows)?);
        start += rows;
    }
    Ok(out)
}

/// Result of a forward pass over a batch of clouds sharing one tape.
pub struct ForwardPass<R: Real> {
    pub tape: Tape<R>,
    /// Per-cloud logits nodes, `[n_points, num_classes]`.
    pub logits: Vec<Var>,
    /// Per-cloud embedding output nodes (the head skip input).
    pub embeddings: Vec<Var>,
    /// Per cloud and plane (indexed by [`kind_index`]): the last
    /// convolution output grid of that plane.
    pub grid_memory: Vec<[Option<Var>; 5]>,
    /// Per cloud, per layer: the convolution output grid of every layer.
    pub layer_grids: Vec<Vec<Var>>,
}

impl<R: Real> ForwardPass<R> {
    pub fn logits_value(&self, cloud_index: usize) -> &Tensor<R> {
        self.tape.value(self.logits[cloud_index])
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<R>> {
        self.tape.backward(loss)
    }
}

/// Run the network over a batch of prepared clouds.
///
/// Training mode updates the batch-norm running buffers in `params`;
/// evaluation mode leaves them untouched.
pub fn forward_batch<R: Real>(
    inputs: &[NetworkInput<R>],
    params: &mut NetworkParams<R>,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<ForwardPass<R>> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::empty("forward over an empty batch"));
    }
    for input in inputs {
        if input.features.cols() != INPUT_CHANNELS {
            return Err(Error::shape("network input features must have 5 channels"));
        }
    }
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let feats: Vec<Var> = inputs
        .iter()
        .map(|inp| tape.leaf(inp.features.clone()))
        .collect();

    let embeddings = embed_batch(&mut tape, &vars.embed, &mut params.embed, inputs, &feats, mode)?;

    let mut current = embeddings.clone();
    let mut grid_memory: Vec<[Option<Var>; 5]> = vec![[None; 5]; inputs.len()];
    let mut layer_grids: Vec<Vec<Var>> = vec![Vec::with_capacity(config.layers); inputs.len()];
    for l in 1..=config.layers {
        let kind = config.plane_for_layer(l)?;
        let (sv, cv) = &vars.layers[l - 1];
        let (sp, cp) = &mut params.layers[l - 1];
        current = spatial_mix_batch(
            &mut tape,
            sv,
            sp,
            inputs,
            &current,
            kind,
            &mut grid_memory,
            mode,
        )?;
        for (b, grids) in layer_grids.iter_mut().enumerate() {
            grids.push(grid_memory[b][kind_index(kind)].expect("grid set by spatial mix"));
        }
        current = channel_mix_batch(&mut tape, cv, cp, &current, mode)?;
    }

    let mut logits = Vec::with_capacity(inputs.len());
    for (b, &f) in current.iter().enumerate() {
        let skip = tape.add(f, embeddings[b])?;
        logits.push(tape.linear_pointwise(skip, vars.head.w, vars.head.b)?);
    }
    Ok(ForwardPass {
        tape,
        logits,
        embeddings,
        grid_memory,
        layer_grids,
    })
}

/// Per-point embedding combining a pointwise branch with a neighborhood
/// max-pool branch.
fn embed_batch<R: Real>(
    tape: &mut Tape<R>,
    vars: &EmbedVars,
    params: &mut EmbedParams<R>,
    inputs: &[NetworkInput<R>],
    feats: &[Var],
    mode: Mode,
) -> Result<Vec<Var>> {
    // Branch 1: per-point affine map of the normalized input features.
    let normed = bn_joint(tape, feats, &vars.bn_point, &mut params.bn_point, mode)?;
    let mut branch1 = Vec::with_capacity(inputs.len());
    for &x in &normed {
        branch1.push(tape.linear_pointwise(x, vars.point_linear.w, vars.point_linear.b)?);
    }
    // Branch 2: MLP over neighbor differences, max-pooled per point.
    let mut diffs = Vec::with_capacity(inputs.len());
    for (inp, &f) in inputs.iter().zip(feats) {
        diffs.push(tape.neighbor_diffs(f, inp.neighbors.clone(), inp.k)?);
    }
    let normed = bn_joint(tape, &diffs, &vars.mlp_bn_in, &mut params.mlp_bn_in, mode)?;
    let mut hidden = Vec::with_capacity(inputs.len());
    for &x in &normed {
        let h = tape.linear_pointwise(x, vars.mlp_fc1.w, vars.mlp_fc1.b)?;
        let r = tape.relu(h);
        hidden.push(tape.linear_pointwise(r, vars.mlp_fc2.w, vars.mlp_fc2.b)?);
    }
    let normed = bn_joint(tape, &hidden, &vars.mlp_bn_out, &mut params.mlp_bn_out, mode)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (b, &x) in normed.iter().enumerate() {
        let pooled = tape.max_over_neighbors(x, inputs[b].k)?;
        let cat = tape.concat_cols(branch1[b], pooled)?;
        out.push(tape.linear_pointwise(cat, vars.merge.w, vars.merge.b)?);
    }
    Ok(out)
}

/// Plane-space mixing: project normalized point features onto the layer's
/// plane, add the plane's previous convolution output (the layer skip),
/// convolve, back-project, and gate with a sigmoid mask plus residual.
#[allow(clippy::too_many_arguments)]
fn spatial_mix_batch<R: Real>(
    tape: &mut Tape<R>,
    vars: &SpatialVars,
    params: &mut SpatialMixParams<R>,
    inputs: &[NetworkInput<R>],
    f_prev: &[Var],
    kind: PlaneKind,
    grid_memory: &mut [[Option<Var>; 5]],
    mode: Mode,
) -> Result<Vec<Var>> {
    let ki = kind_index(kind);
    let normed = bn_joint(tape, f_prev, &vars.bn, &mut params.bn, mode)?;
    let mut gathered = Vec::with_capacity(inputs.len());
    for (b, &x) in normed.iter().enumerate() {
        let assignment = inputs[b].assignments[ki].clone();
        let mut grid = tape.scatter_mean(x, assignment.clone())?;
        if let Some(prev) = grid_memory[b][ki] {
            grid = tape.add(grid, prev)?;
        }
        let h = tape.conv2d_same(grid, vars.conv1.k, vars.conv1.b)?;
        let r = tape.relu(h);
        let p = tape.conv2d_same(r, vars.conv2.k, vars.conv2.b)?;
        grid_memory[b][ki] = Some(p);
        gathered.push(tape.gather_cells(p, Rc::new(assignment.cells.clone()))?);
    }
    let mut gate_pre = Vec::with_capacity(inputs.len());
    for &fhat in &gathered {
        gate_pre.push(tape.linear_pointwise(fhat, vars.gate.w, vars.gate.b)?);
    }
    let gate_normed = bn_joint(tape, &gate_pre, &vars.gate_bn, &mut params.gate_bn, mode)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (b, &g) in gate_normed.iter().enumerate() {
        let mask = tape.sigmoid(g);
        let gated = tape.mul(gathered[b], mask)?;
        out.push(tape.add(gated, f_prev[b])?);
    }
    Ok(out)
}

/// Channel-space mixing: two pointwise linears around a ReLU, a depthwise
/// per-channel affine, and the residual connection.
fn channel_mix_batch<R: Real>(
    tape: &mut Tape<R>,
    vars: &ChannelVars,
    params: &mut ChannelMixParams<R>,
    f_bar: &[Var],
    mode: Mode,
) -> Result<Vec<Var>> {
    let normed = bn_joint(tape, f_bar, &vars.bn, &mut params.bn, mode)?;
    let mut out = Vec::with_capacity(f_bar.len());
    for (b, &x) in normed.iter().enumerate() {
        let h = tape.linear_pointwise(x, vars.fc1.w, vars.fc1.b)?;
        let r = tape.relu(h);
        let y = tape.linear_pointwise(r, vars.fc2.w, vars.fc2.b)?;
        let dw = tape.depthwise_pointwise(y, vars.dw_w, vars.dw_b)?;
        out.push(tape.add(dw, f_bar[b])?);
    }
    Ok(out)
}

/// Single-cloud forward returning the logits tensor.
pub fn forward<R: Real>(
    input: &NetworkInput<R>,
    params: &mut NetworkParams<R>,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<Tensor<R>> {
    let pass = forward_batch(std::slice::from_ref(input), params, config, mode)?;
    Ok(pass.logits_value(0).clone())
}

/// Argmax class per row of a logits tensor.
pub fn argmax_rows<R: Real>(logits: &Tensor<R>) -> Vec<u32> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}
