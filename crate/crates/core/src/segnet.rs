//! Encoder-decoder segmentation network with graph cross attention on the
//! coarse decoder stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxgraph_tensor::{Checkpoint, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::{build_grid_graph, Connectivity, EdgeIndex, GcaBlock, GcaOptions};
use crate::init::uniform;
use crate::volume::LabelVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub base_width: usize,
    pub n_stages: usize,
    pub kernel_size: usize,
    pub blocks_per_stage: usize,
    pub deep_sup: bool,
    /// Spatial extent the network is built for; decides where attention fits.
    pub roi: [usize; 3],
    pub gca: GcaOptions,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 4,
            n_classes: 4,
            base_width: 16,
            n_stages: 3,
            kernel_size: 3,
            blocks_per_stage: 1,
            deep_sup: true,
            roi: [32; 3],
            gca: GcaOptions::default(),
        }
    }
}

/// `(base_width, blocks_per_stage)` for a size letter.
pub fn size_preset(letter: &str) -> Option<(usize, usize)> {
    match letter {
        "S" => Some((8, 1)),
        "B" => Some((16, 1)),
        "M" => Some((32, 2)),
        _ => None,
    }
}

impl NetworkConfig {
    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages < 2 {
            return Err(Error::Config("n_stages must be at least 2".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.in_channels == 0 || self.n_classes == 0 || self.base_width == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("channel counts and block count must be positive".into()));
        }
        self.check_extents(self.roi)
    }

    pub fn check_extents(&self, extents: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.n_stages - 1);
        if extents.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::Config(format!(
                "spatial extents {:?} must be positive multiples of {} for {} stages",
                extents, f, self.n_stages
            )));
        }
        Ok(())
    }

    /// Resolution factor `2^k` of every auxiliary output, finest first.
    pub fn aux_levels(&self) -> Vec<usize> {
        if self.deep_sup {
            (1..self.n_stages).collect()
        } else {
            Vec::new()
        }
    }

    fn stage_extents(&self, stage: usize) -> [usize; 3] {
        self.roi.map(|e| e >> stage)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new<T: Element>(
        params: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = cin * k * k * k;
        Ok(Conv {
            weight: params.add(format!("{}.weight", name), uniform(&[cout, cin, k, k, k], fan_in, rng))?,
            bias: params.add(format!("{}.bias", name), uniform(&[cout], fan_in, rng))?,
            stride,
            padding: if stride == 1 { k / 2 } else { 0 },
        })
    }

    fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        Ok(tape.conv3d(x, w, Some(b), self.stride, self.padding)?)
    }
}

#[derive(Debug, Clone)]
struct Up {
    weight: ParamId,
    bias: ParamId,
}

impl Up {
    fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        Ok(tape.conv_transpose3d(x, w, Some(b), 2)?)
    }
}

/// Convolutions with a ReLU after every one except, when `last_linear`, the final.
fn conv_chain<T: Element>(
    convs: &[Conv],
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    mut x: Var,
    last_linear: bool,
) -> Result<Var> {
    for (i, c) in convs.iter().enumerate() {
        x = c.forward(tape, params, x)?;
        if !(last_linear && i + 1 == convs.len()) {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
struct Decoder {
    stage: usize,
    up: Up,
    convs: Vec<Conv>,
    gca: Option<(GcaBlock, EdgeIndex)>,
}

#[derive(Debug, Clone)]
pub struct SegNet {
    config: NetworkConfig,
    encoders: Vec<(Vec<Conv>, Conv)>,
    bottleneck: Vec<Conv>,
    decoders: Vec<Decoder>,
    head: Conv,
    aux_heads: Vec<Conv>,
}

pub struct ForwardOutput {
    /// `[B, n_classes, D, H, W]`.
    pub logits: Var,
    /// Auxiliary logits, entry `k - 1` at resolution `1 / 2^k`.
    pub aux: Vec<Var>,
    /// Decoder stages where attention ran, with their spatial extents.
    pub gca_stages: Vec<(usize, [usize; 3])>,
    /// Attention matrices, one per entry of `gca_stages`.
    pub attention: Vec<Var>,
}

impl SegNet {
    /// Builds the network and its parameters, initialised from `seed`.
    pub fn new<T: Element>(config: NetworkConfig, seed: u64) -> Result<(SegNet, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let n = config.n_stages;
        let k = config.kernel_size;
        let reps = config.blocks_per_stage;

        let mut encoders = Vec::new();
        let mut cin = config.in_channels;
        for s in 0..n - 1 {
            let w = config.width(s);
            let mut convs = Vec::new();
            for j in 0..reps {
                convs.push(Conv::new(&mut params, &format!("enc.{}.conv{}", s, j), cin, w, k, 1, &mut rng)?);
                cin = w;
            }
            let down = Conv::new(&mut params, &format!("enc.{}.down", s), w, config.width(s + 1), 2, 2, &mut rng)?;
            cin = config.width(s + 1);
            encoders.push((convs, down));
        }
        let wb = config.width(n - 1);
        let bottleneck = (0..reps)
            .map(|j| Conv::new(&mut params, &format!("bottleneck.conv{}", j), wb, wb, k, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let mut decoders = Vec::new();
        for s in (0..n - 1).rev() {
            let (wi, wo) = (config.width(s + 1), config.width(s));
            let up = Up {
                weight: params.add(format!("dec.{}.up.weight", s), uniform(&[wi, wo, 2, 2, 2], wi, &mut rng))?,
                bias: params.add(format!("dec.{}.up.bias", s), uniform(&[wo], wi, &mut rng))?,
            };
            let mut convs = Vec::new();
            for j in 0..reps {
                let c_in = if j == 0 { 2 * wo } else { wo };
                convs.push(Conv::new(&mut params, &format!("dec.{}.conv{}", s, j), c_in, wo, k, 1, &mut rng)?);
            }
            let [d, h, w] = config.stage_extents(s);
            let gca = if d * h * w <= config.gca.dense_cap {
                let block = GcaBlock::new(&mut params, &format!("gca.{}", s), wo, config.gca, &mut rng)?;
                Some((block, build_grid_graph(d, h, w, Connectivity::Six)))
            } else {
                None
            };
            decoders.push(Decoder { stage: s, up, convs, gca });
        }
        let head = Conv::new(&mut params, "head", config.width(0), config.n_classes, 1, 1, &mut rng)?;
        let aux_heads = config
            .aux_levels()
            .into_iter()
            .map(|lvl| {
                Conv::new(&mut params, &format!("aux.{}", lvl), config.width(lvl), config.n_classes, 1, 1, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            SegNet {
                config,
                encoders,
                bottleneck,
                decoders,
                head,
                aux_heads,
            },
            params,
        ))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Decoder stages that carry an attention block.
    pub fn gca_blocks(&self) -> impl Iterator<Item = (usize, &GcaBlock)> {
        self.decoders
            .iter()
            .filter_map(|d| d.gca.as_ref().map(|(b, _)| (d.stage, b)))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, input: Var) -> Result<ForwardOutput> {
        let shape = tape.shape(input).to_vec();
        let &[_, c, d, h, w] = shape.as_slice() else {
            return Err(Error::Config(format!("input must be [B, C, D, H, W], got {:?}", shape)));
        };
        if c != self.config.in_channels {
            return Err(Error::Config(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, c
            )));
        }
        self.config.check_extents([d, h, w])?;

        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut x = input;
        for (convs, down) in &self.encoders {
            x = conv_chain(convs, tape, params, x, false)?;
            skips.push(x);
            x = down.forward(tape, params, x)?;
        }
        x = conv_chain(&self.bottleneck, tape, params, x, false)?;

        // Feature maps feeding each aux head, indexed by level.
        let mut level_feats = vec![None; self.config.n_stages];
        level_feats[self.config.n_stages - 1] = Some(x);
        let mut gca_stages = Vec::new();
        let mut attention = Vec::new();
        for dec in &self.decoders {
            x = dec.up.forward(tape, params, x)?;
            x = tape.concat(&[x, skips[dec.stage]], 1)?;
            x = conv_chain(&dec.convs, tape, params, x, true)?;
            if let Some((block, edges)) = &dec.gca {
                let ext = tape.shape(x)[2..].to_vec();
                let rebuilt;
                let edges = if ext.iter().product::<usize>() == edges.node_count {
                    edges
                } else {
                    rebuilt = build_grid_graph(ext[0], ext[1], ext[2], Connectivity::Six);
                    &rebuilt
                };
                let out = block.forward(tape, params, x, edges)?;
                x = out.output;
                gca_stages.push((dec.stage, [ext[0], ext[1], ext[2]]));
                attention.push(out.attention);
            }
            level_feats[dec.stage] = Some(x);
        }
        let logits = self.head.forward(tape, params, x)?;
        let aux = self
            .config
            .aux_levels()
            .into_iter()
            .zip(&self.aux_heads)
            .map(|(lvl, head)| head.forward(tape, params, level_feats[lvl].expect("every level visited")))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            logits,
            aux,
            gca_stages,
            attention,
        })
    }

    /// Main-head logits for a batch without recording gradients.
    pub fn predict<T: Element>(&self, params: &ParamStore<T>, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(input);
        let out = self.forward(&mut tape, params, x)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Loads pretrained weights by name; every parameter must be present.
pub fn load_pretrained<T: Element>(params: &mut ParamStore<T>, ckpt: &Checkpoint) -> Result<()> {
    Ok(ckpt.load_params(params)?)
}

/// Per-voxel argmax over the class axis, ties to the lowest class.
pub fn predict_labels<T: Element>(logits: &Tensor<T>) -> Result<Vec<LabelVolume>> {
    let shape = logits.shape();
    let &[b, c, d, h, w] = shape else {
        return Err(Error::Config(format!("logits must be [B, C, D, H, W], got {:?}", shape)));
    };
    if c > u8::MAX as usize + 1 {
        return Err(Error::Config(format!("{} classes do not fit a label byte", c)));
    }
    let s = d * h * w;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let base = &logits.data()[bi * c * s..(bi + 1) * c * s];
        let data = (0..s)
            .map(|v| {
                let mut best = 0;
                for k in 1..c {
                    if base[k * s + v] > base[best * s + v] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        out.push(LabelVolume { dims: [d, h, w], data });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_tie_goes_low() {
        let logits = Tensor::<f32>::from_fn(&[1, 4, 1, 1, 2], |i| if i == 7 { 2.0 } else { 0.0 });
        let labels = predict_labels(&logits).unwrap();
        assert_eq!(labels[0].data, vec![0, 3]);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let (net, params) = SegNet::new::<f32>(NetworkConfig { roi: [8; 3], base_width: 2, ..Default::default() }, 0).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, 4, 8, 8, 6]));
        assert!(net.forward(&mut tape, &params, x).is_err());
    }
}
