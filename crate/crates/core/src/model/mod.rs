//! The joint time-frequency forecaster.
//!
//! Each input window `[D, L]` is instance-normalized and cut into `M`
//! patches. The frequency branch applies the learnable cosine transform
//! along the patch axis (separately for every intra-patch position) and keeps
//! `n_f` coefficient rows; these are stacked in front of the latest `n_t`
//! patches, so the encoder always sees `n_t + n_f` tokens whatever `L` is.
//! A channel-independent Transformer encoder embeds the tokens, low-rank
//! cross-channel attention layers mix channels through a `d_r`-row router,
//! and a linear head maps the flattened tokens to the horizon.

mod config;
mod layers;
mod prep;

pub use config::{patch_count, ModelConfig};
pub use layers::{attention, Linear, Mlp, Norm, SelfAttention, SharedKvAttention};
pub use prep::{denormalize, instance_normalize, patchify, NormStats, PatchSet, NORM_EPS};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::spectral::{cdct_on_tape, constrain_frequencies, init_frequencies_topk};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use layers::{collect, layer_name, lookup, uniform};

/// Scale of the uniform initialization of position embeddings.
const POS_INIT: f64 = 0.02;

/// Forward stages reported to a probe, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Normalization, patching and the joint representation.
    Prepare,
    Encoder,
    Lra,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayer {
    pub attn: SelfAttention,
    pub norm1: Norm,
    pub ffn: Mlp,
    pub norm2: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LraLayer {
    /// Router queries `[d_r, h·d_k]`.
    pub router: ParamId,
    pub attn: SharedKvAttention,
    /// Compact position embedding `[d_r, d_m]`.
    pub pos: ParamId,
    /// Distribution matrix `[D, d_r]`.
    pub distribute: ParamId,
    pub norm1: Norm,
    pub mlp: Mlp,
    pub norm2: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jtft {
    cfg: ModelConfig,
    params: ParamStore,
    psi: Option<ParamId>,
    embed: Linear,
    pos: ParamId,
    encoder: Vec<EncoderLayer>,
    lra: Vec<LraLayer>,
    head: Linear,
}

impl Jtft {
    /// Builds a freshly initialized model. Frequencies start on the DCT grid
    /// of the patch axis; see [`Jtft::init_frequencies`] for data-driven
    /// initialization.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        validate(&cfg)?;
        let (d_m, ffn, seq, m) = (cfg.d_m, cfg.ffn_width, cfg.seq_len(), cfg.patch_count());
        let mut p = ParamStore::new();
        let psi = (cfg.n_f > 0).then(|| {
            let grid: Vec<f64> = (0..cfg.n_f).map(|k| k as f64 / m as f64).collect();
            p.add("psi", Tensor::new(&[cfg.n_f], grid).expect("n_f > 0"))
        });
        let embed = Linear::init(&mut p, "embed.proj", cfg.patch_len, d_m, true, rng);
        let pos = p.add("embed.pos", uniform(rng, &[seq, d_m], POS_INIT));
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                let n = layer_name("encoder", i);
                EncoderLayer {
                    attn: SelfAttention::init(&mut p, &format!("{n}.attn"), d_m, cfg.heads, rng),
                    norm1: Norm::init(&mut p, &format!("{n}.norm1"), d_m),
                    ffn: Mlp::init(&mut p, &format!("{n}.ffn"), d_m, ffn, rng),
                    norm2: Norm::init(&mut p, &format!("{n}.norm2"), d_m),
                }
            })
            .collect();
        let lra = (0..cfg.lra_layers)
            .map(|i| {
                let n = layer_name("lra", i);
                let router = p.add(format!("{n}.router"), uniform(rng, &[cfg.d_r, d_m], libm::sqrt(3.0)));
                let attn = SharedKvAttention::init(&mut p, &n, seq * d_m, cfg.heads, cfg.head_dim(), d_m, rng);
                let pos = p.add(format!("{n}.pos"), uniform(rng, &[cfg.d_r, d_m], POS_INIT));
                let bound = 1.0 / libm::sqrt(cfg.d_r as f64);
                let distribute = p.add(format!("{n}.distribute"), uniform(rng, &[cfg.channels, cfg.d_r], bound));
                LraLayer {
                    router,
                    attn,
                    pos,
                    distribute,
                    norm1: Norm::init(&mut p, &format!("{n}.norm1"), d_m),
                    mlp: Mlp::init(&mut p, &format!("{n}.mlp"), d_m, ffn, rng),
                    norm2: Norm::init(&mut p, &format!("{n}.norm2"), d_m),
                }
            })
            .collect();
        let head = Linear::init(&mut p, "head", seq * d_m, cfg.horizon, true, rng);
        Ok(Jtft { cfg, params: p, psi, embed, pos, encoder, lra, head })
    }

    /// Rebinds a model to a parameter store, e.g. one read from a checkpoint.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        validate(&cfg)?;
        let (d_m, ffn, seq) = (cfg.d_m, cfg.ffn_width, cfg.seq_len());
        let p = &params;
        let psi = if cfg.n_f > 0 { Some(lookup(p, "psi", &[cfg.n_f])?) } else { None };
        let embed = Linear::bind(p, "embed.proj", cfg.patch_len, d_m, true)?;
        let pos = lookup(p, "embed.pos", &[seq, d_m])?;
        let encoder = collect(cfg.encoder_layers, |i| {
            let n = layer_name("encoder", i);
            Ok(EncoderLayer {
                attn: SelfAttention::bind(p, &format!("{n}.attn"), d_m, cfg.heads)?,
                norm1: Norm::bind(p, &format!("{n}.norm1"), d_m)?,
                ffn: Mlp::bind(p, &format!("{n}.ffn"), d_m, ffn)?,
                norm2: Norm::bind(p, &format!("{n}.norm2"), d_m)?,
            })
        })?;
        let lra = collect(cfg.lra_layers, |i| {
            let n = layer_name("lra", i);
            Ok(LraLayer {
                router: lookup(p, &format!("{n}.router"), &[cfg.d_r, d_m])?,
                attn: SharedKvAttention::bind(p, &n, seq * d_m, cfg.heads, cfg.head_dim(), d_m)?,
                pos: lookup(p, &format!("{n}.pos"), &[cfg.d_r, d_m])?,
                distribute: lookup(p, &format!("{n}.distribute"), &[cfg.channels, cfg.d_r])?,
                norm1: Norm::bind(p, &format!("{n}.norm1"), d_m)?,
                mlp: Mlp::bind(p, &format!("{n}.mlp"), d_m, ffn)?,
                norm2: Norm::bind(p, &format!("{n}.norm2"), d_m)?,
            })
        })?;
        let head = Linear::bind(p, "head", seq * d_m, cfg.horizon, true)?;
        let expected = layers_param_count(&cfg);
        if params.len() != expected {
            return Err(Error::Parameter(format!(
                "parameter store holds {} tensors, the configuration needs {expected}",
                params.len()
            )));
        }
        Ok(Jtft { cfg, params, psi, embed, pos, encoder, lra, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn psi(&self) -> Option<ParamId> {
        self.psi
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    pub fn lra_layers(&self) -> &[LraLayer] {
        &self.lra
    }

    /// Sets the frequencies to DC plus the strongest patch-axis grid
    /// frequencies of `windows` (`[B, D, L]` look-back windows).
    pub fn init_frequencies(&mut self, windows: &Tensor) -> Result<()> {
        let Some(psi) = self.psi else { return Ok(()) };
        let (b, d) = self.check_input(windows)?;
        let (normed, _) = instance_normalize(windows)?;
        let patches = patchify(&normed, self.cfg.patch_len, self.cfg.stride)?;
        let along_m = patch_axis_last(&patches, b * d);
        let m = patches.count();
        let rows = Tensor::new(&[along_m.len() / m, m], along_m)?;
        let freqs = init_frequencies_topk(&rows, self.cfg.n_f)?;
        self.params.get_mut(psi).data_mut().copy_from_slice(freqs.psi());
        Ok(())
    }

    /// Projects the frequencies back into their admissible range.
    pub fn constrain(&mut self) {
        if let Some(psi) = self.psi {
            constrain_frequencies(self.params.get_mut(psi).data_mut());
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (b, d, l) = match *x.shape() {
            [d, l] => (1, d, l),
            [b, d, l] => (b, d, l),
            _ => return Err(dim_err!("expected [D, L] or [B, D, L] input, got {:?}", x.shape())),
        };
        if d != self.cfg.channels || l != self.cfg.lookback {
            return Err(dim_err!(
                "input {:?} does not match channels {} / lookback {}",
                x.shape(),
                self.cfg.channels,
                self.cfg.lookback
            ));
        }
        Ok((b, d))
    }

    /// Joint representation `[N, n_f + n_t, P]` from patches `[..., M, P]`:
    /// frequency rows first, then the latest `n_t` patches.
    pub fn build_jtfr(&self, tape: &mut Tape, patches: &PatchSet) -> Result<Var> {
        let (m, p) = (patches.count(), patches.len());
        let n = patches.patches.numel() / (m * p);
        if self.cfg.n_t > m {
            return Err(Error::Config(format!("n_t = {} exceeds the patch count {m}", self.cfg.n_t)));
        }
        if p != self.cfg.patch_len {
            return Err(dim_err!("patch length {p} differs from the configured {}", self.cfg.patch_len));
        }
        let n_t = self.cfg.n_t;
        let mut td = Vec::with_capacity(n * n_t * p);
        for chunk in patches.patches.data().chunks_exact(m * p) {
            td.extend_from_slice(&chunk[(m - n_t) * p..]);
        }
        let td = tape.constant_owned(Tensor::new(&[n, n_t, p], td)?);
        let Some(psi) = self.psi else { return Ok(td) };
        let along_m = tape.constant_owned(Tensor::new(&[n, p, m], patch_axis_last(patches, n))?);
        let psi = tape.param(&self.params, psi);
        let fd = cdct_on_tape(tape, psi, along_m)?;
        let fd = tape.permute(fd, &[0, 2, 1])?;
        tape.concat(&[fd, td], 1)
    }

    /// Projection to `d_m` plus the position embedding: `[N, L̂, P] -> [N, L̂, d_m]`.
    pub fn embed(&self, tape: &mut Tape, jtfr: Var) -> Result<Var> {
        let seq = self.cfg.seq_len();
        match tape.shape(jtfr) {
            [_, l, _] if *l == seq => {}
            s => return Err(dim_err!("joint representation {:?} does not have {seq} tokens", s)),
        }
        let x = self.embed.apply(tape, &self.params, jtfr)?;
        let pos = tape.param(&self.params, self.pos);
        tape.add(x, pos)
    }

    /// One post-norm Transformer block on `[N, L̂, d_m]`.
    pub fn encoder_layer<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        index: usize,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let layer = &self.encoder[index];
        let p = self.cfg.dropout;
        let a = layer.attn.apply(tape, &self.params, x)?;
        let a = tape.dropout(a, p, training, rng)?;
        let x = tape.add(x, a)?;
        let x = layer.norm1.apply(tape, &self.params, x)?;
        let f = layer.ffn.apply(tape, &self.params, x, p, training, rng)?;
        let f = tape.dropout(f, p, training, rng)?;
        let x = tape.add(x, f)?;
        layer.norm2.apply(tape, &self.params, x)
    }

    /// Embedding followed by every encoder block.
    pub fn encode<R: Rng + ?Sized>(&self, tape: &mut Tape, jtfr: Var, training: bool, rng: &mut R) -> Result<Var> {
        let mut x = self.embed(tape, jtfr)?;
        for i in 0..self.encoder.len() {
            x = self.encoder_layer(tape, i, x, training, rng)?;
        }
        Ok(x)
    }

    /// Low-rank cross-channel attention on `[B, D, L̂, d_m]`.
    ///
    /// The router attends over the `D` flattened channel sequences, the `d_r`
    /// results are redistributed to the channels by `W_e` and added to every
    /// token before the residual MLP.
    pub fn lra_layer(&self, tape: &mut Tape, index: usize, z: Var) -> Result<Var> {
        let layer = &self.lra[index];
        let s = tape.shape(z).to_vec();
        let &[b, d, l, w] = s.as_slice() else {
            return Err(dim_err!("LRA expects [B, D, L̂, d_m], got {:?}", s));
        };
        let p = &self.params;
        let flat = tape.reshape(z, &[b, d, l * w])?;
        let router = tape.param(p, layer.router);
        let routed = layer.attn.apply(tape, p, router, flat)?;
        let pos = tape.param(p, layer.pos);
        let routed = tape.add(routed, pos)?;
        let we = tape.param(p, layer.distribute);
        let spread = tape.matmul(we, routed)?;
        let spread = tape.reshape(spread, &[b, d, 1, w])?;
        let x = tape.add(z, spread)?;
        let x = layer.norm1.apply(tape, p, x)?;
        let h = layer.mlp.fc1.apply(tape, p, x)?;
        let h = tape.gelu(h);
        let m = layer.mlp.fc2.apply(tape, p, h)?;
        let x = tape.add(x, m)?;
        layer.norm2.apply(tape, p, x)
    }

    /// Flatten, GELU, dropout and the linear map to the horizon:
    /// `[B, D, L̂, d_m] -> [B, D, T]`, denormalized with `stats`.
    pub fn head<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        z: Var,
        stats: &NormStats,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        let &[b, d, l, w] = s.as_slice() else {
            return Err(dim_err!("head expects [B, D, L̂, d_m], got {:?}", s));
        };
        if stats.mean.len() != b * d {
            return Err(dim_err!("stats for {:?} do not match {b}×{d} series", stats.shape));
        }
        let x = tape.reshape(z, &[b, d, l * w])?;
        let x = tape.gelu(x);
        let x = tape.dropout(x, self.cfg.dropout, training, rng)?;
        let y = self.head.apply(tape, &self.params, x)?;
        let std = tape.constant_owned(Tensor::new(&[b, d, 1], stats.std.clone())?);
        let mean = tape.constant_owned(Tensor::new(&[b, d, 1], stats.mean.clone())?);
        let y = tape.mul(y, std)?;
        tape.add(y, mean)
    }

    /// Full forward pass. `x` is `[D, L]` or `[B, D, L]`; the result has the
    /// same leading layout with `T` steps.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, x: &Tensor, training: bool, rng: &mut R) -> Result<Var> {
        self.forward_probed(tape, x, training, rng, &mut |_| {})
    }

    /// [`Jtft::forward`] calling `probe` after each [`Stage`].
    pub fn forward_probed<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        training: bool,
        rng: &mut R,
        probe: &mut dyn FnMut(Stage),
    ) -> Result<Var> {
        let (b, d) = self.check_input(x)?;
        let (normed, stats) = instance_normalize(x)?;
        let patches = patchify(&normed, self.cfg.patch_len, self.cfg.stride)?;
        let jtfr = self.build_jtfr(tape, &patches)?;
        probe(Stage::Prepare);
        let z = self.encode(tape, jtfr, training, rng)?;
        probe(Stage::Encoder);
        let mut z = tape.reshape(z, &[b, d, self.cfg.seq_len(), self.cfg.d_m])?;
        for i in 0..self.lra.len() {
            z = self.lra_layer(tape, i, z)?;
        }
        probe(Stage::Lra);
        let stats = NormStats { shape: vec![b, d], ..stats };
        let y = self.head(tape, z, &stats, training, rng)?;
        probe(Stage::Head);
        if x.shape().len() == 2 {
            tape.reshape(y, &[d, self.cfg.horizon])
        } else {
            Ok(y)
        }
    }

    /// Inference without dropout.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let y = self.forward(&mut tape, x, false, &mut rng)?;
        Ok(tape.tensor(y))
    }
}

fn validate(cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let m = cfg.patch_count();
    if cfg.n_f > m {
        return Err(Error::Config(format!("n_f = {} exceeds the patch count {m}", cfg.n_f)));
    }
    Ok(())
}

fn layers_param_count(cfg: &ModelConfig) -> usize {
    let psi = usize::from(cfg.n_f > 0);
    // embed: proj weight/bias + pos; encoder: 4 linears, 2 norms, mlp;
    // lra: router, kv, out, pos, distribute, 2 norms, mlp; head: weight/bias
    psi + 3 + cfg.encoder_layers * (8 + 4 + 4) + cfg.lra_layers * (5 + 4 + 4) + 2
}

/// Reorders patches `[n, M, P]` to `[n, P, M]`.
fn patch_axis_last(patches: &PatchSet, n: usize) -> Vec<f64> {
    let (m, p) = (patches.count(), patches.len());
    let src = patches.patches.data();
    let mut out = vec![0.0; n * m * p];
    for s in 0..n {
        for i in 0..m {
            for j in 0..p {
                out[(s * p + j) * m + i] = src[(s * m + i) * p + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
