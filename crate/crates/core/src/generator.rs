//! Mel-conditioned upsampling generator: a pre-convolution, one transposed
//! convolution per stage followed by parallel WOLO blocks whose outputs are
//! averaged, and a tanh-bounded post-convolution down to one channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Conv1dSpec, Tape, Tensor, Var};
use crate::wolo::{ActivationMode, WoloParams, WoloVars, LEAKY_SLOPE};

/// Slope of the LeakyReLU before the post-convolution.
const POST_LEAKY_SLOPE: f64 = 0.01;
const INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub upsample_strides: Vec<usize>,
    pub upsample_kernels: Vec<usize>,
    /// Width after the pre-convolution; each stage halves it.
    pub base_channels: usize,
    pub wolo_per_stage: usize,
    pub wolo_dilations: Vec<usize>,
    pub wolo_kernel: usize,
    pub activation: ActivationMode,
    pub mel_bins: usize,
    pub pre_kernel: usize,
    pub post_kernel: usize,
    /// Samples per mel frame; the strides must multiply to it.
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            upsample_strides: vec![8, 8, 2, 2],
            upsample_kernels: vec![16, 16, 4, 4],
            base_channels: 512,
            wolo_per_stage: 3,
            wolo_dilations: vec![1, 3, 5],
            wolo_kernel: 5,
            activation: ActivationMode::Sine,
            mel_bins: 80,
            pre_kernel: 7,
            post_kernel: 7,
            hop: 256,
            sample_rate: 22050,
        }
    }
}

impl GeneratorConfig {
    /// The small configuration used for desk-scale training runs.
    pub fn tiny() -> Self {
        GeneratorConfig {
            base_channels: 32,
            wolo_kernel: 3,
            ..Self::default()
        }
    }

    /// Same strides and `2 * stride` kernels for each stage.
    pub fn with_strides(mut self, strides: &[usize]) -> Self {
        self.upsample_strides = strides.to_vec();
        self.upsample_kernels = strides.iter().map(|s| 2 * s).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("generator: {m}")));
        let n = self.upsample_strides.len();
        if n == 0 || self.upsample_kernels.len() != n {
            return fail(format!(
                "{n} strides but {} upsample kernels",
                self.upsample_kernels.len()
            ));
        }
        let product: usize = self.upsample_strides.iter().product();
        if product != self.hop {
            return fail(format!(
                "upsample strides {:?} multiply to {product}, not the hop {}",
                self.upsample_strides, self.hop
            ));
        }
        for (&s, &k) in self.upsample_strides.iter().zip(&self.upsample_kernels) {
            if s == 0 || k < s {
                return fail(format!("upsample kernel {k} must be at least its stride {s}"));
            }
        }
        if self.wolo_dilations.len() != self.wolo_per_stage || self.wolo_per_stage == 0 {
            return fail(format!(
                "{} WOLO blocks per stage but dilations {:?}",
                self.wolo_per_stage, self.wolo_dilations
            ));
        }
        if self.wolo_dilations.contains(&0) {
            return fail("dilations must be positive".into());
        }
        for (what, k) in [
            ("wolo_kernel", self.wolo_kernel),
            ("pre_kernel", self.pre_kernel),
            ("post_kernel", self.post_kernel),
        ] {
            if k % 2 == 0 {
                return fail(format!("{what} {k} must be odd"));
            }
        }
        if self.mel_bins == 0 || self.base_channels >> n == 0 {
            return fail(format!(
                "base_channels {} cannot be halved {n} times",
                self.base_channels
            ));
        }
        Ok(())
    }

    /// Channel width of every stage's output.
    pub fn stage_channels(&self) -> Vec<usize> {
        (1..=self.upsample_strides.len())
            .map(|i| self.base_channels >> i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct WoloIds {
    u: ParamId,
    v: ParamId,
    post_w: ParamId,
    post_b: ParamId,
    dilation: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    up: ConvIds,
    stride: usize,
    padding: usize,
    blocks: Vec<WoloIds>,
}

/// Assembled generator; parameters live in [`Generator::params`].
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
    pre: ConvIds,
    stages: Vec<Stage>,
    post: ConvIds,
}

fn add_conv(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Result<ConvIds> {
    Ok(ConvIds {
        weight: store.add(format!("{name}.weight"), weight)?,
        bias: store.add(format!("{name}.bias"), bias)?,
    })
}

/// Builds a generator with weights drawn deterministically from `seed`.
pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Generator> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    // default fan-in uniform init for the input convolution
    let c0 = cfg.base_channels;
    let bound = 1.0 / ((cfg.mel_bins * cfg.pre_kernel) as f64).sqrt();
    let pre = add_conv(
        &mut store,
        "pre",
        Tensor::uniform(vec![c0, cfg.mel_bins, cfg.pre_kernel], -bound, bound, &mut rng),
        Tensor::uniform(vec![c0], -bound, bound, &mut rng),
    )?;

    let mut stages = Vec::new();
    let mut cin = c0;
    for (i, (&stride, &kernel)) in cfg.upsample_strides.iter().zip(&cfg.upsample_kernels).enumerate() {
        let cout = cin / 2;
        let prefix = format!("stage{}", i + 1);
        let up = add_conv(
            &mut store,
            &format!("{prefix}.up"),
            Tensor::randn(vec![cin, cout, kernel], INIT_STD, &mut rng),
            Tensor::zeros(vec![cout]),
        )?;
        let mut blocks = Vec::new();
        for (j, &dilation) in cfg.wolo_dilations.iter().enumerate() {
            let p = WoloParams::init(cout, cfg.wolo_kernel, dilation, cfg.activation, &mut rng)?;
            let name = format!("{prefix}.block{}", j + 1);
            blocks.push(WoloIds {
                u: store.add(format!("{name}.U"), p.u)?,
                v: store.add(format!("{name}.V"), p.v)?,
                post_w: store.add(format!("{name}.post_w"), p.post_w)?,
                post_b: store.add(format!("{name}.post_b"), p.post_b)?,
                dilation,
            });
        }
        stages.push(Stage {
            up,
            stride,
            padding: (kernel - stride) / 2,
            blocks,
        });
        cin = cout;
    }

    let post = add_conv(
        &mut store,
        "post",
        Tensor::randn(vec![1, cin, cfg.post_kernel], INIT_STD, &mut rng),
        Tensor::zeros(vec![1]),
    )?;

    Ok(Generator {
        cfg: cfg.clone(),
        params: store,
        pre,
        stages,
        post,
    })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Exact number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Samples produced per mel frame.
    pub fn upsample_factor(&self) -> usize {
        self.cfg.upsample_strides.iter().product()
    }

    fn wolo<'t>(&self, bound: &Bound<'t>, ids: &WoloIds) -> WoloVars<'t> {
        WoloVars {
            u: bound[ids.u],
            v: bound[ids.v],
            post_w: bound[ids.post_w],
            post_b: bound[ids.post_b],
            kernel: self.cfg.wolo_kernel,
            dilation: ids.dilation,
            mode: self.cfg.activation,
        }
    }

    fn run<'t>(&self, bound: &Bound<'t>, mel: Var<'t>, mut probe: Option<&mut Vec<Tensor>>) -> Result<Var<'t>> {
        let shape = mel.shape();
        let mel = match shape.as_slice() {
            &[m, f] => mel.reshape(vec![1, m, f])?,
            [_, _, _] => mel,
            s => return Err(Error::shape("synthesize", &[s])),
        };
        let ms = mel.shape();
        if ms[1] != self.cfg.mel_bins || ms[2] == 0 {
            return Err(Error::invalid(
                "synthesize",
                format!(
                    "expected {} mel bins and at least one frame, got {:?}",
                    self.cfg.mel_bins, ms
                ),
            ));
        }
        let (batch, frames) = (ms[0], ms[2]);

        let mut x = mel.conv1d(bound[self.pre.weight], Some(bound[self.pre.bias]), Conv1dSpec::same())?;
        let mut len = frames;
        for stage in &self.stages {
            len *= stage.stride;
            x = x.leaky_relu(LEAKY_SLOPE).conv_transpose1d(
                bound[stage.up.weight],
                Some(bound[stage.up.bias]),
                stage.stride,
                stage.padding,
            )?;
            if x.shape()[2] > len {
                x = x.slice(2, 0, len)?;
            }
            let mut acc: Option<Var<'t>> = None;
            for ids in &stage.blocks {
                let vars = self.wolo(bound, ids);
                if let Some(out) = probe.as_deref_mut() {
                    let (w, _) = vars.kernels(x.leaky_relu(LEAKY_SLOPE))?;
                    out.push(w.to_tensor());
                }
                let y = vars.block(x)?;
                acc = Some(match acc {
                    Some(a) => a.add(y)?,
                    None => y,
                });
            }
            x = acc
                .expect("validated: at least one block per stage")
                .scale(1.0 / stage.blocks.len() as f64);
        }
        let y = x
            .leaky_relu(POST_LEAKY_SLOPE)
            .conv1d(bound[self.post.weight], Some(bound[self.post.bias]), Conv1dSpec::same())?
            .tanh();
        let y = y.reshape(vec![batch, len])?;
        if shape.len() == 2 {
            y.reshape(vec![len])
        } else {
            Ok(y)
        }
    }

    /// Waveform `(B, F * hop)` from mel `(B, n_mels, F)`, or `(F * hop)` from
    /// `(n_mels, F)`, on the tape of `bound`.
    pub fn forward<'t>(&self, bound: &Bound<'t>, mel: Var<'t>) -> Result<Var<'t>> {
        self.run(bound, mel, None)
    }

    /// Inference on a single `(n_mels, F)` spectrogram.
    pub fn synthesize(&self, mel: &Tensor) -> Result<Waveform> {
        if mel.rank() != 2 {
            return Err(Error::shape("synthesize", &[mel.shape()]));
        }
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let y = self.forward(&bound, tape.constant(mel.clone()))?;
        Ok(Waveform::new(y.to_tensor().into_data(), self.cfg.sample_rate))
    }

    /// Activated WOLO kernels `(B, T, K, K)` of every block, in stage/block
    /// order, for the given mel input.
    pub fn probe_kernels(&self, mel: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let mut out = Vec::new();
        self.run(&bound, tape.constant(mel.clone()), Some(&mut out))?;
        Ok(out)
    }

    /// Copies every tensor of `store` whose name matches one of ours; all of
    /// ours must be present with matching shapes.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks generator parameter {name}")))?;
            self.params.set(&name, store.get(id).clone())?;
        }
        Ok(())
    }
}
