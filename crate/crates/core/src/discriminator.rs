//! Multi-period and multi-scale discriminators with feature-map capture.
//!
//! Period sub-discriminators fold the waveform into `period` columns and run
//! `(k, 1)` convolutions down each column; this is realised as 1-D
//! convolutions over the columns stacked into the batch axis. Scale
//! sub-discriminators run grouped 1-D convolutions over progressively
//! average-pooled copies of the waveform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Conv1dSpec, PadMode, Tape, Tensor, Var};

/// One convolution of a sub-discriminator stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub padding: usize,
}

const fn layer(channels: usize, kernel: usize, stride: usize, groups: usize, padding: usize) -> ConvLayer {
    ConvLayer {
        channels,
        kernel,
        stride,
        groups,
        padding,
    }
}

/// HiFiGAN period stack (kernel `(5, 1)`, stride `(3, 1)` except the last).
pub const PERIOD_LAYERS: [ConvLayer; 5] = [
    layer(32, 5, 3, 1, 2),
    layer(128, 5, 3, 1, 2),
    layer(512, 5, 3, 1, 2),
    layer(1024, 5, 3, 1, 2),
    layer(1024, 5, 1, 1, 2),
];

/// HiFiGAN scale stack.
pub const SCALE_LAYERS: [ConvLayer; 7] = [
    layer(128, 15, 1, 1, 7),
    layer(128, 41, 2, 4, 20),
    layer(256, 41, 2, 16, 20),
    layer(512, 41, 4, 16, 20),
    layer(1024, 41, 4, 16, 20),
    layer(1024, 41, 1, 16, 20),
    layer(1024, 5, 1, 1, 2),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    pub period_layers: Vec<ConvLayer>,
    /// Number of scale sub-discriminators; scale `i` sees the waveform pooled
    /// `i` times.
    pub scales: usize,
    pub scale_layers: Vec<ConvLayer>,
    pub post_kernel: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::hifigan()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl DiscriminatorConfig {
    pub fn hifigan() -> Self {
        DiscriminatorConfig {
            periods: vec![2, 3, 5, 7, 11],
            period_layers: PERIOD_LAYERS.to_vec(),
            scales: 3,
            scale_layers: SCALE_LAYERS.to_vec(),
            post_kernel: 3,
            leaky_slope: 0.1,
        }
    }

    /// The HiFiGAN layout with every width divided by `divisor` and group
    /// counts reduced to divide the new widths.
    pub fn narrowed(divisor: usize) -> Self {
        let base = Self::hifigan();
        let shrink = |layers: &[ConvLayer]| {
            let mut cin = 1;
            layers
                .iter()
                .map(|l| {
                    let channels = (l.channels / divisor.max(1)).max(1);
                    let groups = gcd(gcd(l.groups, cin), channels);
                    cin = channels;
                    ConvLayer { channels, groups, ..*l }
                })
                .collect::<Vec<_>>()
        };
        DiscriminatorConfig {
            period_layers: shrink(&base.period_layers),
            scale_layers: shrink(&base.scale_layers),
            ..base
        }
    }

    /// Widths divided by 16; what desk-scale training uses.
    pub fn tiny() -> Self {
        Self::narrowed(16)
    }

    pub fn sub_count(&self) -> usize {
        self.periods.len() + self.scales
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("discriminator: {m}")));
        if self.sub_count() == 0 {
            return fail("no sub-discriminators".into());
        }
        if self.periods.contains(&0) {
            return fail("periods must be positive".into());
        }
        for stack in [&self.period_layers, &self.scale_layers] {
            let mut cin = 1;
            for l in stack.iter() {
                if l.kernel == 0 || l.stride == 0 || l.groups == 0 || cin % l.groups != 0 || l.channels % l.groups != 0
                {
                    return fail(format!("invalid layer {l:?} after {cin} channels"));
                }
                cin = l.channels;
            }
        }
        if self.post_kernel.is_multiple_of(2) {
            return fail(format!("post_kernel {} must be odd", self.post_kernel));
        }
        Ok(())
    }

    /// Shortest waveform every sub-discriminator accepts.
    pub fn min_len(&self) -> usize {
        self.periods.iter().copied().max().unwrap_or(1).max(4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubKind {
    Period(usize),
    /// Number of pooling steps applied before the stack.
    Scale(usize),
}

#[derive(Clone, Debug)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
    spec: Conv1dSpec,
}

#[derive(Clone, Debug)]
struct Sub {
    kind: SubKind,
    convs: Vec<ConvIds>,
    post: ConvIds,
}

/// Score map and captured activations of one sub-discriminator.
#[derive(Clone, Debug)]
pub struct SubOutput<'t> {
    /// Final map flattened to `(B, N)`.
    pub score: Var<'t>,
    /// Activation after every layer, outermost first, ending with the
    /// unflattened score map. Period maps are `(B, C, H, period)`.
    pub features: Vec<Var<'t>>,
}

/// The full set of sub-discriminators; parameters are named under `disc.`.
#[derive(Clone, Debug)]
pub struct DiscriminatorBank {
    cfg: DiscriminatorConfig,
    params: ParamStore,
    subs: Vec<Sub>,
}

/// Uniform `±1/sqrt(fan_in)` weights and biases, the usual default.
fn add_conv(store: &mut ParamStore, name: &str, cin: usize, l: &ConvLayer, rng: &mut ChaCha8Rng) -> Result<ConvIds> {
    let fan_in = cin / l.groups * l.kernel;
    let bound = 1.0 / (fan_in as f64).sqrt();
    Ok(ConvIds {
        weight: store.add(
            format!("{name}.weight"),
            Tensor::uniform(vec![l.channels, cin / l.groups, l.kernel], -bound, bound, rng),
        )?,
        bias: store.add(
            format!("{name}.bias"),
            Tensor::uniform(vec![l.channels], -bound, bound, rng),
        )?,
        spec: Conv1dSpec::default()
            .with_stride(l.stride)
            .with_groups(l.groups)
            .with_padding(l.padding, l.padding),
    })
}

fn build_sub(
    store: &mut ParamStore,
    prefix: &str,
    kind: SubKind,
    layers: &[ConvLayer],
    post_kernel: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sub> {
    let mut cin = 1;
    let mut convs = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        convs.push(add_conv(store, &format!("{prefix}.conv{}", i + 1), cin, l, rng)?);
        cin = l.channels;
    }
    let post_layer = layer(1, post_kernel, 1, 1, post_kernel / 2);
    let post = add_conv(store, &format!("{prefix}.post"), cin, &post_layer, rng)?;
    Ok(Sub { kind, convs, post })
}

/// Builds the bank with weights drawn deterministically from `seed`.
pub fn build_discriminators(cfg: &DiscriminatorConfig, seed: u64) -> Result<DiscriminatorBank> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut subs = Vec::new();
    for &p in &cfg.periods {
        subs.push(build_sub(
            &mut store,
            &format!("disc.mpd{p}"),
            SubKind::Period(p),
            &cfg.period_layers,
            cfg.post_kernel,
            &mut rng,
        )?);
    }
    for s in 0..cfg.scales {
        subs.push(build_sub(
            &mut store,
            &format!("disc.msd{}", s + 1),
            SubKind::Scale(s),
            &cfg.scale_layers,
            cfg.post_kernel,
            &mut rng,
        )?);
    }
    Ok(DiscriminatorBank {
        cfg: cfg.clone(),
        params: store,
        subs,
    })
}

impl DiscriminatorBank {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn kinds(&self) -> Vec<SubKind> {
        self.subs.iter().map(|s| s.kind).collect()
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    fn stack<'t>(&self, bound: &Bound<'t>, sub: &Sub, mut x: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let mut features = Vec::with_capacity(sub.convs.len() + 1);
        for c in &sub.convs {
            x = x
                .conv1d(bound[c.weight], Some(bound[c.bias]), c.spec)?
                .leaky_relu(self.cfg.leaky_slope);
            features.push(x);
        }
        let p = &sub.post;
        x = x.conv1d(bound[p.weight], Some(bound[p.bias]), p.spec)?;
        features.push(x);
        Ok((x, features))
    }

    /// Runs every sub-discriminator on `x: (B, L)`.
    pub fn discriminate<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Vec<SubOutput<'t>>> {
        let shape = x.shape();
        let &[batch, len] = shape.as_slice() else {
            return Err(Error::shape("discriminate", &[&shape]));
        };
        if len < self.cfg.min_len() {
            return Err(Error::invalid(
                "discriminate",
                format!("{len} samples is shorter than the minimum {}", self.cfg.min_len()),
            ));
        }
        let mut pooled = vec![x.reshape(vec![batch, 1, len])?];
        let mut outputs = Vec::with_capacity(self.subs.len());
        for sub in &self.subs {
            match sub.kind {
                SubKind::Period(p) => {
                    let pad = (p - len % p) % p;
                    let padded = x.pad(1, 0, pad, PadMode::Reflect)?;
                    let rows = (len + pad) / p;
                    // (B, H, p) -> (B, p, H) -> (B * p, 1, H)
                    let cols = padded
                        .reshape(vec![batch, rows, p])?
                        .permute(&[0, 2, 1])?
                        .reshape(vec![batch * p, 1, rows])?;
                    let (score, maps) = self.stack(bound, sub, cols)?;
                    let features = maps
                        .into_iter()
                        .map(|m| {
                            let s = m.shape();
                            m.reshape(vec![batch, p, s[1], s[2]])?.permute(&[0, 2, 3, 1])
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let n = score.value().len() / batch;
                    let score = features.last().expect("post map").reshape(vec![batch, n])?;
                    outputs.push(SubOutput { score, features });
                }
                SubKind::Scale(s) => {
                    while pooled.len() <= s {
                        let prev = *pooled.last().expect("raw input");
                        pooled.push(prev.avg_pool1d(4, 2, 2)?);
                    }
                    let (score, features) = self.stack(bound, sub, pooled[s])?;
                    let n = score.value().len() / batch;
                    let score = score.reshape(vec![batch, n])?;
                    outputs.push(SubOutput { score, features });
                }
            }
        }
        Ok(outputs)
    }

    /// Frozen evaluation of `x: (B, L)`; returns `(score, features)` per
    /// sub-discriminator.
    pub fn evaluate(&self, x: &Tensor) -> Result<Vec<(Tensor, Vec<Tensor>)>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let outs = self.discriminate(&bound, tape.constant(x.clone()))?;
        Ok(outs
            .into_iter()
            .map(|o| (o.score.to_tensor(), o.features.iter().map(Var::to_tensor).collect()))
            .collect())
    }

    /// Copies every `disc.` tensor of `store` into this bank.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks discriminator parameter {name}")))?;
            self.params.set(&name, store.get(id).clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_len(len: usize, l: &ConvLayer) -> usize {
        (len + 2 * l.padding - l.kernel) / l.stride + 1
    }

    #[test]
    fn bank_has_eight_members_with_documented_shapes() {
        let cfg = DiscriminatorConfig::tiny();
        let bank = build_discriminators(&cfg, 0).unwrap();
        assert_eq!(bank.len(), 8);
        let len = 1000;
        let outs = bank.evaluate(&Tensor::zeros(vec![2, len])).unwrap();
        assert_eq!(outs.len(), 8);
        for (kind, (score, feats)) in bank.kinds().into_iter().zip(&outs) {
            assert!(score.all_finite());
            assert!(feats.iter().all(Tensor::all_finite));
            match kind {
                SubKind::Period(p) => {
                    assert_eq!(feats.len(), 6);
                    let mut h = len.div_ceil(p);
                    for (l, f) in cfg.period_layers.iter().zip(feats) {
                        h = conv_len(h, l);
                        assert_eq!(f.shape(), &[2, l.channels, h, p]);
                    }
                    assert_eq!(feats[5].shape(), &[2, 1, h, p]);
                    assert_eq!(score.shape(), &[2, h * p]);
                }
                SubKind::Scale(s) => {
                    assert_eq!(feats.len(), 8);
                    let mut t = len;
                    for _ in 0..s {
                        t = (t + 4 - 4) / 2 + 1;
                    }
                    for (l, f) in cfg.scale_layers.iter().zip(feats) {
                        t = conv_len(t, l);
                        assert_eq!(f.shape(), &[2, l.channels, t]);
                    }
                    assert_eq!(score.shape(), &[2, t]);
                }
            }
        }
    }

    #[test]
    fn full_table_layer_widths() {
        let cfg = DiscriminatorConfig::hifigan();
        cfg.validate().unwrap();
        let chans: Vec<_> = cfg.scale_layers.iter().map(|l| (l.channels, l.groups)).collect();
        assert_eq!(
            chans,
            [
                (128, 1),
                (128, 4),
                (256, 16),
                (512, 16),
                (1024, 16),
                (1024, 16),
                (1024, 1)
            ]
        );
        let tiny = DiscriminatorConfig::tiny();
        tiny.validate().unwrap();
        assert_eq!(tiny.scale_layers[1].channels, 8);
        assert_eq!(tiny.period_layers[0].channels, 2);
    }

    #[test]
    fn deterministic_and_rejects_short_input() {
        let bank = build_discriminators(&DiscriminatorConfig::tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(vec![1, 300], 0.3, &mut rng);
        let a = bank.evaluate(&x).unwrap();
        let b = bank.evaluate(&x).unwrap();
        for ((sa, _), (sb, _)) in a.iter().zip(&b) {
            assert_eq!(sa, sb);
        }
        assert!(bank.evaluate(&Tensor::zeros(vec![1, 10])).is_err());
        assert!(bank.evaluate(&Tensor::zeros(vec![1, 0])).is_err());
    }

    #[test]
    fn single_layer_matches_conv_loop() {
        let cfg = DiscriminatorConfig {
            periods: vec![3],
            period_layers: vec![layer(2, 5, 3, 1, 2)],
            scales: 0,
            scale_layers: vec![],
            post_kernel: 3,
            leaky_slope: 0.1,
        };
        let bank = build_discriminators(&cfg, 1).unwrap();
        let p = bank.params();
        let w = p.get(p.id("disc.mpd3.conv1.weight").unwrap());
        let bias = p.get(p.id("disc.mpd3.conv1.bias").unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let len = 31;
        let x = Tensor::randn(vec![1, len], 1.0, &mut rng);
        let outs = bank.evaluate(&x).unwrap();
        let feat = &outs[0].1[0];

        // reflect-pad to 33, fold to (11, 3), convolve each column
        let mut xp = x.data().to_vec();
        xp.push(x.data()[len - 2]);
        xp.push(x.data()[len - 3]);
        let rows = 11;
        let h_out = (rows + 4 - 5) / 3 + 1;
        for c in 0..2 {
            for h in 0..h_out {
                for col in 0..3 {
                    let mut acc = bias.data()[c];
                    for k in 0..5 {
                        let r = (h * 3 + k) as isize - 2;
                        if (0..rows as isize).contains(&r) {
                            acc += w.at(&[c, 0, k]) * xp[r as usize * 3 + col];
                        }
                    }
                    let want = if acc > 0.0 { acc } else { 0.1 * acc };
                    assert!((feat.at(&[0, c, h, col]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn every_member_passes_gradient_to_input() {
        let bank = build_discriminators(&DiscriminatorConfig::tiny(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![1, 512], 0.3, &mut rng);
        for k in 0..bank.len() {
            let tape = Tape::new();
            let bound = bank.params().bind(&tape, false);
            let xv = tape.leaf(x.clone());
            let outs = bank.discriminate(&bound, xv).unwrap();
            let g = tape.backward(outs[k].score.sum()).unwrap().wrt(xv);
            assert!(g.data().iter().map(|v| v * v).sum::<f64>() > 0.0, "member {k}");
        }
    }

    #[test]
    fn parameter_names_carry_prefix() {
        let bank = build_discriminators(&DiscriminatorConfig::tiny(), 0).unwrap();
        assert!(bank.params().iter().all(|(n, _)| n.starts_with("disc.")));
        assert!(bank.params().id("disc.mpd11.post.weight").is_some());
        assert!(bank.params().id("disc.msd3.conv7.bias").is_some());
    }
}
