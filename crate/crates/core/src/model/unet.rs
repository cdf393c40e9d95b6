use super::ops::{
    attention, conv1x1, conv3x3, ffn, group_norm, layer_norm, silu, upsample_nearest2,
    AttentionWeights, FeatureMap, Tokens,
};
use super::{DiffuserConfig, ModelError, ModelWeights};
use crate::selector::BlockKind;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Skip every transformer, leaving the ResNet and sampler path.
    pub bypass_transformers: bool,
}

/// Named block-boundary activations captured during one forward pass.
///
/// Names: `down.{l}.in`, `down.{l}.skip`, `down.{l}.out`, `mid.in`,
/// `mid.out`, `up.{l}.in` (after skip concatenation), `up.{l}.out`, `out`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTrace {
    pub entries: Vec<(String, FeatureMap)>,
}

impl ActivationTrace {
    pub fn get(&self, name: &str) -> Option<&FeatureMap> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn record(trace: &mut Option<&mut ActivationTrace>, name: impl Into<String>, map: &FeatureMap) {
        if let Some(t) = trace.as_deref_mut() {
            t.entries.push((name.into(), map.clone()));
        }
    }
}

fn resnets_in(cfg: &DiffuserConfig, block: BlockKind) -> usize {
    match block {
        BlockKind::Down => cfg.transformers_per_down_block.max(2),
        BlockKind::Mid => 2,
        BlockKind::Up => cfg.transformers_per_up_block.max(3),
    }
}

fn transformer_specs(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize, cfg: &DiffuserConfig) {
    let ctx = cfg.embed_width;
    let hidden = cfg.ff_mult * c;
    for (layer, kv_in) in [("sa", c), ("ca", ctx)] {
        out.push((format!("{prefix}.{layer}.wq"), vec![c, c]));
        out.push((format!("{prefix}.{layer}.wk"), vec![c, kv_in]));
        out.push((format!("{prefix}.{layer}.wv"), vec![c, kv_in]));
        out.push((format!("{prefix}.{layer}.wo"), vec![c, c]));
    }
    out.push((format!("{prefix}.ffn.w1"), vec![hidden, c]));
    out.push((format!("{prefix}.ffn.w2"), vec![c, hidden]));
}

fn resnet_specs(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, cin: usize, cout: usize, cfg: &DiffuserConfig) {
    out.push((format!("{prefix}.conv1"), vec![cout, cin, 3, 3]));
    out.push((format!("{prefix}.temb"), vec![cout, cfg.time_dim]));
    out.push((format!("{prefix}.conv2"), vec![cout, cout, 3, 3]));
    if cin != cout {
        out.push((format!("{prefix}.skip"), vec![cout, cin]));
    }
}

/// Every tensor of the toy UNet with its shape. Linear weights are
/// `[out, in]`, convolutions `[out, in, 3, 3]`.
pub fn tensor_specs(cfg: &DiffuserConfig) -> Vec<(String, Vec<usize>)> {
    let topo = cfg.topology();
    let ch = &cfg.channels;
    let n = ch.len();
    let mut out = Vec::new();
    out.push(("conv_in".to_string(), vec![ch[0], cfg.latent_channels, 3, 3]));

    let mut cin = ch[0];
    for (l, &c) in ch.iter().enumerate() {
        let transformers = topo.transformers_in(BlockKind::Down, l);
        for i in 0..resnets_in(cfg, BlockKind::Down) {
            resnet_specs(&mut out, &format!("down.{l}.r{i}"), cin, c, cfg);
            cin = c;
            if i < transformers {
                transformer_specs(&mut out, &format!("down.{l}.t{i}"), c, cfg);
            }
        }
        if l + 1 < n {
            out.push((format!("down.{l}.downsample"), vec![c, c, 3, 3]));
        }
    }

    let cm = ch[n - 1];
    resnet_specs(&mut out, "mid.r0", cm, cm, cfg);
    for t in 0..topo.transformers_in(BlockKind::Mid, 0) {
        transformer_specs(&mut out, &format!("mid.t{t}"), cm, cfg);
    }
    resnet_specs(&mut out, "mid.r1", cm, cm, cfg);

    let mut cprev = cm;
    for l in (0..n).rev() {
        let c = ch[l];
        let transformers = topo.transformers_in(BlockKind::Up, l);
        let mut cin = cprev + c;
        for i in 0..resnets_in(cfg, BlockKind::Up) {
            resnet_specs(&mut out, &format!("up.{l}.r{i}"), cin, c, cfg);
            cin = c;
            if i < transformers {
                transformer_specs(&mut out, &format!("up.{l}.t{i}"), c, cfg);
            }
        }
        if l > 0 {
            out.push((format!("up.{l}.upsample"), vec![c, c, 3, 3]));
        }
        cprev = c;
    }
    out.push(("conv_out".to_string(), vec![cfg.latent_channels, ch[0], 3, 3]));
    out
}

fn time_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10000f32.ln()) * j as f32 / half as f32).exp();
        out[j] = (t * freq).sin();
        out[j + half] = (t * freq).cos();
    }
    out
}

struct Ctx<'a> {
    cfg: &'a DiffuserConfig,
    w: &'a ModelWeights,
    temb: Vec<f32>,
    text: &'a Tokens,
    options: ForwardOptions,
}

impl Ctx<'_> {
    fn resnet(&self, prefix: &str, x: &FeatureMap, cout: usize) -> Result<FeatureMap, ModelError> {
        let g = self.cfg.norm_groups;
        let mut h = group_norm(x, g);
        h.data.iter_mut().for_each(|v| *v = silu(*v));
        let mut h = conv3x3(&h, self.w.get(&format!("{prefix}.conv1"))?, cout, 1)?;

        let temb_w = self.w.get(&format!("{prefix}.temb"))?;
        let td = self.temb.len();
        let plane = h.height * h.width;
        for oc in 0..cout {
            let bias: f32 = temb_w[oc * td..(oc + 1) * td]
                .iter()
                .zip(&self.temb)
                .fold(0.0, |acc, (a, b)| acc + a * silu(*b));
            h.data[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bias);
        }

        let mut h2 = group_norm(&h, g);
        h2.data.iter_mut().for_each(|v| *v = silu(*v));
        let h2 = conv3x3(&h2, self.w.get(&format!("{prefix}.conv2"))?, cout, 1)?;

        let mut out = if x.channels != cout {
            conv1x1(x, self.w.get(&format!("{prefix}.skip"))?, cout)?
        } else {
            x.clone()
        };
        for (o, v) in out.data.iter_mut().zip(&h2.data) {
            *o += v;
        }
        Ok(out)
    }

    fn attention_weights(&self, prefix: &str) -> Result<AttentionWeights<'_>, ModelError> {
        Ok(AttentionWeights {
            wq: self.w.get(&format!("{prefix}.wq"))?,
            wk: self.w.get(&format!("{prefix}.wk"))?,
            wv: self.w.get(&format!("{prefix}.wv"))?,
            wo: self.w.get(&format!("{prefix}.wo"))?,
        })
    }

    /// Pre-norm transformer: SA, then CA on the text tokens, then FFN, each
    /// added back through a residual connection.
    fn transformer(&self, prefix: &str, x: &FeatureMap) -> Result<FeatureMap, ModelError> {
        if self.options.bypass_transformers {
            return Ok(x.clone());
        }
        let heads = self.cfg.heads;
        let mut t = x.to_tokens();

        let n = layer_norm(&t);
        let sa = attention(&n, &n, self.attention_weights(&format!("{prefix}.sa"))?, heads)?;
        t.add_assign(&sa);

        let n = layer_norm(&t);
        let ca = attention(&n, self.text, self.attention_weights(&format!("{prefix}.ca"))?, heads)?;
        t.add_assign(&ca);

        let n = layer_norm(&t);
        let f = ffn(
            &n,
            self.w.get(&format!("{prefix}.ffn.w1"))?,
            self.w.get(&format!("{prefix}.ffn.w2"))?,
        )?;
        t.add_assign(&f);
        Ok(FeatureMap::from_tokens(&t, x.height, x.width))
    }
}

pub(super) fn forward(
    cfg: &DiffuserConfig,
    weights: &ModelWeights,
    latent: &FeatureMap,
    text: &Tokens,
    timestep: f32,
    options: ForwardOptions,
    mut trace: Option<&mut ActivationTrace>,
) -> Result<FeatureMap, ModelError> {
    if latent.channels != cfg.latent_channels
        || latent.height != cfg.latent_size
        || latent.width != cfg.latent_size
    {
        return Err(ModelError::DimensionMismatch(format!(
            "latent is {}x{}x{}, model expects {}x{}x{}",
            latent.channels, latent.height, latent.width, cfg.latent_channels, cfg.latent_size, cfg.latent_size
        )));
    }
    if text.cols != cfg.embed_width {
        return Err(ModelError::DimensionMismatch(format!(
            "text tokens have width {}, model expects {}",
            text.cols, cfg.embed_width
        )));
    }
    let ctx = Ctx {
        cfg,
        w: weights,
        temb: time_embedding(timestep, cfg.time_dim),
        text,
        options,
    };
    let topo = cfg.topology();
    let ch = &cfg.channels;
    let n = ch.len();

    let mut h = conv3x3(latent, weights.get("conv_in")?, ch[0], 1)?;
    let mut skips = Vec::with_capacity(n);
    for (l, &c) in ch.iter().enumerate() {
        ActivationTrace::record(&mut trace, format!("down.{l}.in"), &h);
        let transformers = topo.transformers_in(BlockKind::Down, l);
        for i in 0..resnets_in(cfg, BlockKind::Down) {
            h = ctx.resnet(&format!("down.{l}.r{i}"), &h, c)?;
            if i < transformers {
                h = ctx.transformer(&format!("down.{l}.t{i}"), &h)?;
            }
        }
        ActivationTrace::record(&mut trace, format!("down.{l}.skip"), &h);
        skips.push(h.clone());
        if l + 1 < n {
            h = conv3x3(&h, weights.get(&format!("down.{l}.downsample"))?, c, 2)?;
        }
        ActivationTrace::record(&mut trace, format!("down.{l}.out"), &h);
    }

    let cm = ch[n - 1];
    ActivationTrace::record(&mut trace, "mid.in", &h);
    h = ctx.resnet("mid.r0", &h, cm)?;
    for t in 0..topo.transformers_in(BlockKind::Mid, 0) {
        h = ctx.transformer(&format!("mid.t{t}"), &h)?;
    }
    h = ctx.resnet("mid.r1", &h, cm)?;
    ActivationTrace::record(&mut trace, "mid.out", &h);

    for l in (0..n).rev() {
        let c = ch[l];
        h = h.concat(&skips[l])?;
        ActivationTrace::record(&mut trace, format!("up.{l}.in"), &h);
        let transformers = topo.transformers_in(BlockKind::Up, l);
        for i in 0..resnets_in(cfg, BlockKind::Up) {
            h = ctx.resnet(&format!("up.{l}.r{i}"), &h, c)?;
            if i < transformers {
                h = ctx.transformer(&format!("up.{l}.t{i}"), &h)?;
            }
        }
        if l > 0 {
            h = upsample_nearest2(&h);
            h = conv3x3(&h, weights.get(&format!("up.{l}.upsample"))?, c, 1)?;
        }
        ActivationTrace::record(&mut trace, format!("up.{l}.out"), &h);
    }

    let mut o = group_norm(&h, cfg.norm_groups);
    o.data.iter_mut().for_each(|v| *v = silu(*v));
    let out = conv3x3(&o, weights.get("conv_out")?, cfg.latent_channels, 1)?;
    ActivationTrace::record(&mut trace, "out", &out);
    Ok(out)
}
