use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PinnConfig, PinnError};
use crate::autodiff::{uniform_fan_in, ParamStore, Tape, Tensor, Var};

const LEAKY_SLOPE: f64 = 0.2;
const MAX_GROUPS: usize = 8;

/// Trained (or freshly initialized) network plus the dataset constants the
/// physics term was calibrated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: PinnConfig,
    pub store: ParamStore,
    /// Least-squares ratio between RSS power and channel power.
    pub kappa: f64,
    /// Global constant dividing both power terms.
    pub power_norm: f64,
}

/// Largest group count <= 8 dividing `c`.
fn groups_for(c: usize) -> usize {
    (1..=MAX_GROUPS.min(c))
        .rev()
        .find(|g| c.is_multiple_of(*g))
        .unwrap_or(1)
}

struct Init<'a, R: Rng + ?Sized> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn add(&mut self, name: String, t: Tensor) -> Result<(), PinnError> {
        self.store.add(&name, t)?;
        Ok(())
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) -> Result<(), PinnError> {
        let w = uniform_fan_in(&[co, ci, k, k], ci * k * k, self.rng);
        self.add(format!("{name}.w"), w)?;
        self.add(format!("{name}.b"), Tensor::zeros(&[co]))
    }

    fn conv_t(&mut self, name: &str, ci: usize, co: usize, k: usize) -> Result<(), PinnError> {
        let w = uniform_fan_in(&[ci, co, k, k], ci * k * k, self.rng);
        self.add(format!("{name}.w"), w)?;
        self.add(format!("{name}.b"), Tensor::zeros(&[co]))
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<(), PinnError> {
        self.add(format!("{name}.g"), Tensor::full(&[c], 1.0))?;
        self.add(format!("{name}.b"), Tensor::zeros(&[c]))
    }

    fn linear(&mut self, name: &str, k: usize, o: usize) -> Result<(), PinnError> {
        let w = uniform_fan_in(&[k, o], k, self.rng);
        self.add(format!("{name}.w"), w)?;
        self.add(format!("{name}.b"), Tensor::zeros(&[o]))
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<(), PinnError> {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d)?;
        }
        Ok(())
    }

    fn down(&mut self, name: &str, ci: usize, co: usize) -> Result<(), PinnError> {
        self.conv(&format!("{name}.conv1"), co, ci, 3)?;
        self.norm(&format!("{name}.gn1"), co)?;
        self.conv(&format!("{name}.conv2"), co, co, 3)?;
        self.norm(&format!("{name}.gn2"), co)?;
        self.conv(&format!("{name}.res"), co, ci, 1)?;
        self.norm(&format!("{name}.res_gn"), co)
    }

    fn up(&mut self, name: &str, ci: usize, co: usize) -> Result<(), PinnError> {
        self.conv_t(&format!("{name}.convt"), ci, co, 3)?;
        self.norm(&format!("{name}.gn1"), co)?;
        self.conv(&format!("{name}.conv2"), co, co, 3)?;
        self.norm(&format!("{name}.gn2"), co)?;
        self.conv_t(&format!("{name}.res"), ci, co, 1)?;
        self.norm(&format!("{name}.res_gn"), co)
    }
}

/// Draws a fresh parameter set for `cfg`.
///
/// Convolution and linear weights are `U(±1/sqrt(fan_in))`, biases and norm
/// shifts zero, norm gains one. The output head starts at zero so an
/// untrained model returns its input estimate unchanged.
pub fn init_params<R: Rng + ?Sized>(cfg: &PinnConfig, rng: &mut R) -> Result<ModelParams, PinnError> {
    cfg.validate()?;
    let mut init = Init {
        store: ParamStore::new(),
        rng,
    };
    let [c1, c2, c3] = cfg.base_channels;
    let dz = cfg.latent_dim;
    init.down("enc1", cfg.in_channels(), c1)?;
    init.down("enc2", c1, c2)?;
    init.down("enc3", c2, c3)?;

    let mut ci = 1;
    for (i, &co) in cfg.rss_channels.iter().enumerate() {
        init.conv(&format!("rss{}", i + 1), co, ci, 3)?;
        ci = co;
    }
    init.linear("proj_rss", cfg.rss_channels[3], dz)?;
    init.linear("proj_chan", c3, dz)?;
    init.attention("xattn", dz)?;
    for b in 0..cfg.num_blocks {
        let name = format!("tf{b}");
        init.norm(&format!("{name}.ln1"), dz)?;
        init.attention(&format!("{name}.attn"), dz)?;
        init.norm(&format!("{name}.ln2"), dz)?;
        init.linear(&format!("{name}.ff1"), dz, cfg.ff_dim)?;
        init.linear(&format!("{name}.ff2"), cfg.ff_dim, dz)?;
    }
    if dz != c3 {
        init.linear("proj_back", dz, c3)?;
    }

    init.up("dec1", c3, c2)?;
    init.up("dec2", 2 * c2, c1)?;
    init.up("dec3", 2 * c1, cfg.head_channels)?;
    let out = cfg.in_channels() * cfg.multi_step;
    init.add(
        "head.w".into(),
        Tensor::zeros(&[out, cfg.head_channels + cfg.in_channels(), 1, 1]),
    )?;
    init.add("head.b".into(), Tensor::zeros(&[out]))?;

    Ok(ModelParams {
        config: cfg.clone(),
        store: init.store,
        kappa: 1.0,
        power_norm: 1.0,
    })
}

/// A parameter set attached to a tape, addressed by name.
pub struct Net<'a> {
    pub cfg: &'a PinnConfig,
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Net<'a> {
    pub fn attach(params: &'a ModelParams, tape: &mut Tape) -> Self {
        Net {
            cfg: &params.config,
            store: &params.store,
            vars: params.store.attach(tape),
        }
    }

    /// Uses vars already on the tape, one per tensor of `store` in order.
    pub fn from_vars(cfg: &'a PinnConfig, store: &'a ParamStore, vars: &[Var]) -> Self {
        Net {
            cfg,
            store,
            vars: vars.to_vec(),
        }
    }

    fn p(&self, name: &str) -> Result<Var, PinnError> {
        self.store
            .index_of(name)
            .and_then(|i| self.vars.get(i).copied())
            .ok_or_else(|| PinnError::MissingParam(name.into()))
    }

    fn wb(&self, name: &str) -> Result<(Var, Var), PinnError> {
        Ok((self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?))
    }

    fn gb(&self, name: &str) -> Result<(Var, Var), PinnError> {
        Ok((self.p(&format!("{name}.g"))?, self.p(&format!("{name}.b"))?))
    }

    fn conv(&self, t: &mut Tape, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, PinnError> {
        let (w, b) = self.wb(name)?;
        Ok(t.conv2d(x, w, Some(b), stride, pad)?)
    }

    fn conv_t(&self, t: &mut Tape, name: &str, x: Var, pad: usize, op: [usize; 2]) -> Result<Var, PinnError> {
        let (w, b) = self.wb(name)?;
        Ok(t.conv_transpose2d(x, w, Some(b), 2, pad, op)?)
    }

    fn gn(&self, t: &mut Tape, name: &str, x: Var) -> Result<Var, PinnError> {
        let (g, b) = self.gb(name)?;
        let c = t.shape(x)[1];
        Ok(t.group_norm(x, g, b, groups_for(c))?)
    }

    fn ln(&self, t: &mut Tape, name: &str, x: Var) -> Result<Var, PinnError> {
        let (g, b) = self.gb(name)?;
        Ok(t.layer_norm(x, g, b)?)
    }

    fn linear(&self, t: &mut Tape, name: &str, x: Var) -> Result<Var, PinnError> {
        let (w, b) = self.wb(name)?;
        Ok(t.linear(x, w, Some(b))?)
    }

    fn down(&self, t: &mut Tape, name: &str, x: Var) -> Result<Var, PinnError> {
        let h = self.conv(t, &format!("{name}.conv1"), x, 1, 1)?;
        let h = self.gn(t, &format!("{name}.gn1"), h)?;
        let h = t.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv(t, &format!("{name}.conv2"), h, 2, 1)?;
        let h = self.gn(t, &format!("{name}.gn2"), h)?;
        let h = t.leaky_relu(h, LEAKY_SLOPE);
        let r = self.conv(t, &format!("{name}.res"), x, 2, 0)?;
        let r = self.gn(t, &format!("{name}.res_gn"), r)?;
        Ok(t.add(h, r)?)
    }

    /// Doubles the spatial size, then trims to `target` via output padding.
    fn up(&self, t: &mut Tape, name: &str, x: Var, target: [usize; 2]) -> Result<Var, PinnError> {
        let s = t.shape(x);
        let mut op = [0; 2];
        for i in 0..2 {
            let base = 2 * s[2 + i] - 1;
            match target[i].checked_sub(base) {
                Some(p) if p < 2 => op[i] = p,
                _ => {
                    return Err(PinnError::ShapeMismatch {
                        expected: target.to_vec(),
                        got: s[2..].to_vec(),
                    })
                }
            }
        }
        let h = self.conv_t(t, &format!("{name}.convt"), x, 1, op)?;
        let h = self.gn(t, &format!("{name}.gn1"), h)?;
        let h = t.relu(h);
        let h = self.conv(t, &format!("{name}.conv2"), h, 1, 1)?;
        let h = self.gn(t, &format!("{name}.gn2"), h)?;
        let h = t.relu(h);
        let r = self.conv_t(t, &format!("{name}.res"), x, 0, op)?;
        let r = self.gn(t, &format!("{name}.res_gn"), r)?;
        Ok(t.add(h, r)?)
    }
}

/// Deepest encoder features plus the two intermediate skips.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub latent: Var,
    pub skips: [Var; 2],
}

fn expect_shape(got: &[usize], expected: &[usize]) -> Result<(), PinnError> {
    if got[1..] != expected[1..] || got.len() != expected.len() {
        return Err(PinnError::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

/// Three stride-2 residual blocks over `[N, 2D, Nr, Nt]`.
pub fn encode_channel(t: &mut Tape, net: &Net, x: Var) -> Result<EncoderOutput, PinnError> {
    let cfg = net.cfg;
    let n = t.shape(x).first().copied().unwrap_or(0);
    expect_shape(t.shape(x), &[n, cfg.in_channels(), cfg.nr, cfg.nt])?;
    let e1 = net.down(t, "enc1", x)?;
    let e2 = net.down(t, "enc2", e1)?;
    let e3 = net.down(t, "enc3", e2)?;
    Ok(EncoderOutput {
        latent: e3,
        skips: [e1, e2],
    })
}

/// CNN over `[N, 1, c, c]` RSS crops, returning `[N, rss_channels[3]]`.
pub fn encode_rss(t: &mut Tape, net: &Net, crop: Var) -> Result<Var, PinnError> {
    let stages = encode_rss_stages(t, net, crop)?;
    Ok(t.adaptive_avg_pool(stages[3])?)
}

/// Output of each of the four RSS convolution stages, before global pooling.
///
/// The first three convolutions are followed by 2x2 max pooling while the
/// map is still at least 2x2.
pub fn encode_rss_stages(t: &mut Tape, net: &Net, crop: Var) -> Result<[Var; 4], PinnError> {
    let c = net.cfg.crop_px;
    let n = t.shape(crop).first().copied().unwrap_or(0);
    expect_shape(t.shape(crop), &[n, 1, c, c])?;
    let mut h = crop;
    let mut stages = [crop; 4];
    for (i, stage) in stages.iter_mut().enumerate() {
        h = net.conv(t, &format!("rss{}", i + 1), h, 1, 1)?;
        h = t.relu(h);
        let s = t.shape(h);
        if i < 3 && s[2] >= 2 && s[3] >= 2 {
            h = t.max_pool2(h)?;
        }
        *stage = h;
    }
    Ok(stages)
}

/// Multi-head attention `softmax(Q K^T / sqrt(d_head)) V` followed by the
/// output projection. `q_in` is `[N, Tq, Dz]`, `kv_in` is `[N, Tk, Dz]`.
///
/// Returns the projected output and the attention weights `[N * heads, Tq, Tk]`.
pub fn multi_head_attention(
    t: &mut Tape,
    net: &Net,
    name: &str,
    q_in: Var,
    kv_in: Var,
) -> Result<(Var, Var), PinnError> {
    let heads = net.cfg.num_heads;
    let dz = net.cfg.latent_dim;
    if !dz.is_multiple_of(heads) {
        return Err(PinnError::HeadDivisibility { dim: dz, heads });
    }
    let dh = dz / heads;
    let (qs, ks) = (t.shape(q_in).to_vec(), t.shape(kv_in).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != dz || ks[2] != dz {
        return Err(PinnError::ShapeMismatch { expected: qs, got: ks });
    }
    let (n, tq, tk) = (qs[0], qs[1], ks[1]);
    let split = |t: &mut Tape, x: Var, len: usize| -> Result<Var, PinnError> {
        let x = t.reshape(x, &[n, len, heads, dh])?;
        let x = t.permute(x, &[0, 2, 1, 3])?;
        Ok(t.reshape(x, &[n * heads, len, dh])?)
    };
    let q = net.linear(t, &format!("{name}.q"), q_in)?;
    let k = net.linear(t, &format!("{name}.k"), kv_in)?;
    let v = net.linear(t, &format!("{name}.v"), kv_in)?;
    let (q, k, v) = (split(t, q, tq)?, split(t, k, tk)?, split(t, v, tk)?);
    let scores = t.bmm(q, k, false, true)?;
    let scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = t.softmax_last(scores)?;
    let o = t.bmm(weights, v, false, false)?;
    let o = t.reshape(o, &[n, heads, tq, dh])?;
    let o = t.permute(o, &[0, 2, 1, 3])?;
    let o = t.reshape(o, &[n, tq, dz])?;
    Ok((net.linear(t, &format!("{name}.o"), o)?, weights))
}

/// Channel tokens (queries) attend over RSS tokens (keys and values); the
/// result is added back onto the channel tokens.
pub fn cross_attention(t: &mut Tape, net: &Net, x_chan: Var, x_rss: Var) -> Result<Var, PinnError> {
    let (a, _) = multi_head_attention(t, net, "xattn", x_chan, x_rss)?;
    Ok(t.add(x_chan, a)?)
}

/// Pre-norm self-attention and feed-forward blocks over `[N, T, Dz]` tokens.
/// No positional encoding is added.
pub fn transformer_latent(t: &mut Tape, net: &Net, tokens: Var) -> Result<Var, PinnError> {
    let mut x = tokens;
    for b in 0..net.cfg.num_blocks {
        let h = net.ln(t, &format!("tf{b}.ln1"), x)?;
        let (a, _) = multi_head_attention(t, net, &format!("tf{b}.attn"), h, h)?;
        x = t.add(x, a)?;
        let h = net.ln(t, &format!("tf{b}.ln2"), x)?;
        let h = net.linear(t, &format!("tf{b}.ff1"), h)?;
        let h = t.relu(h);
        let h = net.linear(t, &format!("tf{b}.ff2"), h)?;
        x = t.add(x, h)?;
    }
    Ok(x)
}

/// Upsamples the latent through three blocks, concatenating the encoder
/// skips, and emits `[N, L, 2D, Nr, Nt]` from a 1x1 output convolution that
/// also sees the network input.
pub fn decode(t: &mut Tape, net: &Net, latent: Var, skips: [Var; 2], input: Var) -> Result<Var, PinnError> {
    let cfg = net.cfg;
    let n = t.shape(latent)[0];
    let hw = |t: &Tape, v: Var| [t.shape(v)[2], t.shape(v)[3]];
    let [e1, e2] = skips;
    let u1 = net.up(t, "dec1", latent, hw(t, e2))?;
    let u1 = t.concat(&[u1, e2], 1)?;
    let u2 = net.up(t, "dec2", u1, hw(t, e1))?;
    let u2 = t.concat(&[u2, e1], 1)?;
    let u3 = net.up(t, "dec3", u2, [cfg.nr, cfg.nt])?;
    let u3 = t.concat(&[u3, input], 1)?;
    let out = net.conv(t, "head", u3, 1, 0)?;
    Ok(t.reshape(out, &[n, cfg.multi_step, cfg.in_channels(), cfg.nr, cfg.nt])?)
}

/// Full network in normalized units: `x` is `[N, 2D, Nr, Nt]`, `crop` is
/// `[N, 1, c, c]`; the output `[N, L, 2D, Nr, Nt]` is the decoder correction
/// added to the input estimate repeated over the `L` steps.
pub fn forward(t: &mut Tape, net: &Net, x: Var, crop: Var) -> Result<Var, PinnError> {
    let cfg = net.cfg;
    let enc = encode_channel(t, net, x)?;
    let n = t.shape(x)[0];
    let f_rss = encode_rss(t, net, crop)?;
    let x_rss = net.linear(t, "proj_rss", f_rss)?;
    let x_rss = t.reshape(x_rss, &[n, 1, cfg.latent_dim])?;

    let ls = t.shape(enc.latent).to_vec();
    let (c3, h3, w3) = (ls[1], ls[2], ls[3]);
    let tokens = t.reshape(enc.latent, &[n, c3, h3 * w3])?;
    let tokens = t.permute(tokens, &[0, 2, 1])?;
    let x_chan = net.linear(t, "proj_chan", tokens)?;
    let fused = cross_attention(t, net, x_chan, x_rss)?;
    let mut z = transformer_latent(t, net, fused)?;
    if cfg.latent_dim != c3 {
        z = net.linear(t, "proj_back", z)?;
    }
    let z = t.permute(z, &[0, 2, 1])?;
    let z = t.reshape(z, &[n, c3, h3, w3])?;

    let delta = decode(t, net, z, enc.skips, x)?;
    let x5 = t.reshape(x, &[n, 1, cfg.in_channels(), cfg.nr, cfg.nt])?;
    let base = if cfg.multi_step == 1 {
        x5
    } else {
        t.concat(&vec![x5; cfg.multi_step], 1)?
    };
    Ok(t.add(delta, base)?)
}
