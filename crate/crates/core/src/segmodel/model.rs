//! Encoder, quantizer, mapper and decoder wired into one network.

use crate::error::{Error, Result};
use crate::l2gmapper::{
    init_anchors, map_on_tape, median_heuristic, MapperSettings, NystromEmbedding, ReferenceSet,
    GRAM_EIGEN_FLOOR,
};
use crate::numerics::{softmax_classes, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::quantizer::{codebook_usage, nearest_codes, quantize_on_tape, Codebook};
use crate::segmodel::{ModelConfig, Strategies};
use crate::sinkhorn::marginal_residual;

const GN_EPS: f64 = 1e-5;
/// Lower bound kept on the kernel bandwidth after every update.
pub const MIN_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
    relu: bool,
    stride: usize,
    pad: usize,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let v = self.rng.normal_tensor(shape, std);
        self.store.add(name, v)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, norm: bool, relu: bool) -> ConvBlock {
        let weight = self.he(format!("{name}.w"), &[cout, cin, k, k], cin * k * k);
        let bias = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        let norm = norm.then(|| {
            (
                self.store.add(format!("{name}.gn.gamma"), Tensor::ones(&[cout])),
                self.store.add(format!("{name}.gn.beta"), Tensor::zeros(&[cout])),
            )
        });
        ConvBlock {
            weight,
            bias,
            norm,
            relu,
            stride,
            pad: k / 2,
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvBlock,
    down: Vec<[ConvBlock; 2]>,
    pre: Vec<ConvBlock>,
    codebook: ParamId,
    anchors: ParamId,
    bandwidth: ParamId,
    refs: Vec<ParamId>,
    proj_w: ParamId,
    proj_b: ParamId,
    post: Vec<ConvBlock>,
    /// Transposed conv weight and bias, then the fusing block; deepest first.
    up: Vec<(ParamId, ParamId, ConvBlock)>,
    head: ConvBlock,
}

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let mut b = Builder { store, rng };
        let w = &cfg.widths;
        let stem = b.conv("enc.stem", cfg.channels, w[0], 3, 1, true, true);
        let down = (1..=cfg.depth)
            .map(|i| {
                [
                    b.conv(&format!("enc.down{i}"), w[i - 1], w[i], 3, 2, true, true),
                    b.conv(&format!("enc.stage{i}"), w[i], w[i], 3, 1, true, true),
                ]
            })
            .collect();
        let deep = w[cfg.depth];
        let pre = (0..cfg.pre_blocks)
            .map(|j| {
                let last = j + 1 == cfg.pre_blocks;
                let cout = if last { cfg.code_dim } else { deep };
                b.conv(&format!("pre{j}"), deep, cout, 3, 1, !last, !last)
            })
            .collect();

        let codebook = b.store.add("codebook", crate::quantizer::init_uniform(cfg.codebook_size, cfg.code_dim, b.rng));
        let anchors = b.store.add("mapper.anchors", b.rng.normal_tensor(&[cfg.anchors, cfg.code_dim], 1.0));
        let bandwidth = b.store.add("mapper.bandwidth", Tensor::scalar(1.0));
        let refs = (0..cfg.references)
            .map(|r| {
                let v = crate::l2gmapper::RandomUnit
                    .init_one(b.rng, cfg.bins, cfg.anchors);
                b.store.add(format!("mapper.ref{r}"), v)
            })
            .collect();
        let q_in = cfg.references * cfg.bins * cfg.anchors;
        let q_out = cfg.codes() * cfg.code_dim;
        let proj_w = {
            let v = b.rng.normal_tensor(&[q_in, q_out], (1.0 / q_in as f64).sqrt());
            b.store.add("proj.w", v)
        };
        let proj_b = b.store.add("proj.b", Tensor::zeros(&[q_out]));

        let post = (0..cfg.post_blocks)
            .map(|j| {
                let cin = if j == 0 { cfg.code_dim } else { deep };
                b.conv(&format!("post{j}"), cin, deep, 3, 1, true, true)
            })
            .collect();
        let mut up = Vec::new();
        for i in (1..=cfg.depth).rev() {
            let tw = b.he(format!("dec.up{i}.w"), &[w[i], w[i - 1], 2, 2], w[i]);
            let tb = b.store.add(format!("dec.up{i}.b"), Tensor::zeros(&[w[i - 1]]));
            let cin = if cfg.skips { 2 * w[i - 1] } else { w[i - 1] };
            let fuse = b.conv(&format!("dec.fuse{i}"), cin, w[i - 1], 3, 1, true, true);
            up.push((tw, tb, fuse));
        }
        let head = b.conv("head", w[0], cfg.classes, 1, 1, false, false);
        Ok(Self {
            stem,
            down,
            pre,
            codebook,
            anchors,
            bandwidth,
            refs,
            proj_w,
            proj_b,
            post,
            up,
            head,
        })
    }
}

/// Tape handles of one forward pass.
pub struct TapeForward {
    /// classes×H×W.
    pub logits: Var,
    pub quant_loss: Var,
    /// n×dim encoder output.
    pub z_con: Var,
    pub indices: Vec<usize>,
    /// One n×t plan per reference.
    pub plans: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub code_usage: Vec<usize>,
    /// Marginal residual of each reference's plan.
    pub transport_residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub quant_loss: f64,
    pub diagnostics: Diagnostics,
    /// n×t plans, one per reference.
    pub plans: Vec<Tensor>,
}

pub struct SegModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    strategies: Strategies,
    layout: Layout,
}

impl Clone for SegModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            strategies: Strategies::resolve(&self.config).expect("config resolved before"),
            layout: self.layout.clone(),
        }
    }
}

impl std::fmt::Debug for SegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegModel")
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

/// Tags non-finite errors with the layer that produced them.
fn at<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{layer}/{op}"),
        },
        other => other,
    })
}

impl SegModel {
    /// Randomly initialized model. Data-dependent initialization is done by
    /// [`SegModel::warm_start`].
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let strategies = Strategies::resolve(&config)?;
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, rng)?;
        Ok(Self {
            config,
            params,
            strategies,
            layout,
        })
    }

    pub fn strategies(&self) -> &Strategies {
        &self.strategies
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.params.get(self.layout.codebook).value.clone())
    }

    pub fn nystrom(&self) -> Result<NystromEmbedding> {
        NystromEmbedding::new(
            self.params.get(self.layout.anchors).value.clone(),
            self.params.get(self.layout.bandwidth).value.item(),
        )
    }

    pub fn mapper_settings(&self) -> MapperSettings {
        MapperSettings {
            sigma_pos: self.config.sigma_pos,
            epsilon: self.config.epsilon,
            iterations: self.config.sinkhorn_iters,
        }
    }

    pub fn references(&self) -> Result<ReferenceSet> {
        let refs = self
            .layout
            .refs
            .iter()
            .map(|&id| self.params.get(id).value.clone())
            .collect();
        ReferenceSet::new(refs, self.mapper_settings())
    }

    /// Keeps parameters that must stay in a valid range there after an update.
    pub fn project_parameters(&mut self) {
        let bw = &mut self.params.get_mut(self.layout.bandwidth).value;
        let v = bw.data()[0].max(MIN_BANDWIDTH);
        bw.data_mut()[0] = v;
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        if image.shape() != [c.channels, c.height, c.width] {
            return Err(Error::shape(
                "forward",
                format!("image {:?}, model expects {:?}", image.shape(), [c.channels, c.height, c.width]),
            ));
        }
        Ok(())
    }

    fn block(&self, tape: &Tape, v: &[Var], x: Var, b: &ConvBlock, name: &str) -> Result<Var> {
        at(name, (|| {
            let mut h = tape.conv2d(x, v[b.weight.0], v[b.bias.0], b.stride, b.pad)?;
            if let Some((g, be)) = b.norm {
                h = tape.group_norm(h, v[g.0], v[be.0], self.config.norm_groups.min(tape.shape(h)[0]), GN_EPS)?;
            }
            if b.relu {
                h = tape.relu(h)?;
            }
            Ok(h)
        })())
    }

    /// Encoder and pre-bottleneck blocks: returns z_con (n×dim) and the skips.
    fn encode(&self, tape: &Tape, v: &[Var], image: &Tensor) -> Result<(Var, Vec<Var>)> {
        self.check_image(image)?;
        let l = &self.layout;
        let x = tape.constant(image.clone());
        let mut h = self.block(tape, v, x, &l.stem, "enc.stem")?;
        let mut skips = vec![h];
        for (i, [down, stage]) in l.down.iter().enumerate() {
            h = self.block(tape, v, h, down, &format!("enc.down{}", i + 1))?;
            h = self.block(tape, v, h, stage, &format!("enc.stage{}", i + 1))?;
            skips.push(h);
        }
        skips.pop();
        for (j, b) in l.pre.iter().enumerate() {
            h = self.block(tape, v, h, b, &format!("pre{j}"))?;
        }
        let n = self.config.codes();
        let flat = tape.reshape(h, &[self.config.code_dim, n])?;
        Ok((tape.transpose(flat)?, skips))
    }

    /// Full forward pass on a tape whose parameter leaves are `vars`
    /// (indexed by [`ParamId`]).
    pub fn forward_on_tape(&self, tape: &Tape, vars: &[Var], image: &Tensor) -> Result<TapeForward> {
        let cfg = &self.config;
        let l = &self.layout;
        let (z_con, skips) = self.encode(tape, vars, image)?;

        let q = at("quantizer", quantize_on_tape(tape, z_con, vars[l.codebook.0], self.strategies.quant.as_ref()))?;
        let refs: Vec<Var> = l.refs.iter().map(|id| vars[id.0]).collect();
        let mapped = at(
            "mapper",
            map_on_tape(
                tape,
                q.z_dis,
                vars[l.anchors.0],
                vars[l.bandwidth.0],
                &refs,
                &self.mapper_settings(),
                GRAM_EIGEN_FLOOR,
            ),
        )?;
        let n = cfg.codes();
        let merged = at("projection", (|| {
            let flat = tape.reshape(mapped.embedding, &[1, cfg.references * cfg.bins * cfg.anchors])?;
            let p = tape.matmul(flat, vars[l.proj_w.0])?;
            let p = tape.add_row_bias(p, vars[l.proj_b.0])?;
            let p = tape.reshape(p, &[n, cfg.code_dim])?;
            self.strategies.merge.merge(tape, q.z_dis, p)
        })())?;

        let (gh, gw) = cfg.grid();
        let grid = tape.transpose(merged)?;
        let mut h = tape.reshape(grid, &[cfg.code_dim, gh, gw])?;
        for (j, b) in l.post.iter().enumerate() {
            h = self.block(tape, vars, h, b, &format!("post{j}"))?;
        }
        for (k, (tw, tb, fuse)) in l.up.iter().enumerate() {
            let i = cfg.depth - k;
            h = at(&format!("dec.up{i}"), tape.conv_transpose2x2(h, vars[tw.0], vars[tb.0]))?;
            if cfg.skips {
                h = tape.concat0(&[h, skips[i - 1]])?;
            }
            h = self.block(tape, vars, h, fuse, &format!("dec.fuse{i}"))?;
        }
        let logits = self.block(tape, vars, h, &l.head, "head")?;
        Ok(TapeForward {
            logits,
            quant_loss: q.loss,
            z_con,
            indices: q.indices,
            plans: mapped.plans,
        })
    }

    /// Segmentation loss plus quantization loss for one labelled image.
    pub fn loss_on_tape(&self, tape: &Tape, vars: &[Var], image: &Tensor, labels: &[u8]) -> Result<Var> {
        let fwd = self.forward_on_tape(tape, vars, image)?;
        let cfg = &self.config;
        let logits = tape.reshape(fwd.logits, &[cfg.classes, cfg.height * cfg.width])?;
        let seg = self.strategies.seg.loss(tape, logits, labels, cfg.dice_smooth)?;
        tape.add(seg, fwd.quant_loss)
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let vars = self.bind_constants(&tape);
        let fwd = self.forward_on_tape(&tape, &vars, image)?;
        let plans: Vec<Tensor> = fwd.plans.iter().map(|&p| tape.value(p).clone()).collect();
        let transport_residuals = plans
            .iter()
            .map(|p| {
                let (n, t) = (p.rows(), p.cols());
                marginal_residual(p, &vec![1.0 / n as f64; n], &vec![1.0 / t as f64; t])
            })
            .collect();
        let logits = tape.value(fwd.logits).clone();
        let quant_loss = tape.value(fwd.quant_loss).item();
        Ok(ForwardOutput {
            logits,
            quant_loss,
            diagnostics: Diagnostics {
                code_usage: codebook_usage(&fwd.indices, self.config.codebook_size)?,
                transport_residuals,
            },
            plans,
        })
    }

    pub fn predict(&self, image: &Tensor) -> Result<Vec<u8>> {
        argmax_classes(&self.forward(image)?.logits)
    }

    pub fn loss(&self, image: &Tensor, labels: &[u8]) -> Result<f64> {
        let tape = Tape::new();
        let vars = self.bind_constants(&tape);
        let l = self.loss_on_tape(&tape, &vars, image, labels)?;
        let v = tape.value(l).item();
        Ok(v)
    }

    fn bind_constants(&self, tape: &Tape) -> Vec<Var> {
        self.params
            .params()
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    /// Encoder output rows for a batch of images.
    pub fn encode_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut rows = Vec::new();
        for img in images {
            let tape = Tape::new();
            let vars = self.bind_constants(&tape);
            let (z, _) = self.encode(&tape, &vars, img)?;
            rows.extend_from_slice(tape.value(z).data());
        }
        Tensor::new(&[rows.len() / self.config.code_dim, self.config.code_dim], rows)
    }

    /// Data-dependent initialization from a first batch: codebook (per the
    /// configured strategy), anchors drawn from the quantized codes, the
    /// kernel bandwidth by the median heuristic, then the references.
    pub fn warm_start(&mut self, images: &[&Tensor], rng: &mut Rng) -> Result<()> {
        if images.is_empty() {
            return Err(Error::invalid("warm start needs at least one image"));
        }
        let cfg = self.config.clone();
        let l = self.layout.clone();
        let z_con = self.encode_batch(images)?;
        let table = self
            .strategies
            .codebook_init
            .init(cfg.codebook_size, cfg.code_dim, Some(&z_con), rng)?;
        self.params.get_mut(l.codebook).value = table;
        let idx = nearest_codes(&z_con, &self.params.get(l.codebook).value)?;
        let z_dis = crate::numerics::gather_rows(&self.params.get(l.codebook).value, &idx)?;
        self.params.get_mut(l.anchors).value = init_anchors(&z_dis, cfg.anchors, rng)?;
        let bw = median_heuristic(&z_dis)?.max(MIN_BANDWIDTH);
        self.params.get_mut(l.bandwidth).value = Tensor::scalar(bw);
        let psi = self.nystrom()?.embed(&z_dis)?;
        let refs = self
            .strategies
            .reference_init
            .init(rng, cfg.bins, cfg.anchors, cfg.references, Some(&psi))?;
        for (id, r) in l.refs.iter().zip(refs) {
            self.params.get_mut(*id).value = r;
        }
        Ok(())
    }
}

/// Per-pixel argmax of classes×H×W logits; ties go to the lowest class.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 3 && s.len() != 2 {
        return Err(Error::shape("predict", format!("logits {s:?}")));
    }
    let c = s[0];
    let p = logits.numel() / c.max(1);
    let d = logits.data();
    Ok((0..p)
        .map(|k| {
            let mut best = 0;
            for j in 1..c {
                if d[j * p + k] > d[best * p + k] {
                    best = j;
                }
            }
            best as u8
        })
        .collect())
}

/// Class probabilities for classes×H×W logits.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    let c = logits.shape()[0];
    let flat = logits.clone().reshape(&[c, logits.numel() / c])?;
    softmax_classes(&flat)?.reshape(logits.shape())
}
