//! Parameterized building blocks recorded on a [`Tape`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// Looks up a parameter by name and checks its shape.
pub(crate) fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store.find(name).ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Parameter(format!(
            "parameter {name} has shape {:?}, expected {:?}",
            store.get(id).shape(),
            shape
        )));
    }
    Ok(id)
}

/// Affine map `x·W (+ b)` over the last axis; `W` is stored `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub(crate) fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound)));
        Linear { weight, bias }
    }

    pub(crate) fn bind(store: &ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"), &[fan_in, fan_out])?;
        let bias = if bias { Some(lookup(store, &format!("{name}.bias"), &[fan_out])?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learnable gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub(crate) fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub(crate) fn bind(store: &ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Norm { gain: lookup(store, &format!("{name}.gain"), &[width])?, bias: lookup(store, &format!("{name}.bias"), &[width])? })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Two affine maps with a GELU in between; dropout after the activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub(crate) fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::init(store, &format!("{name}.fc1"), width, hidden, true, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, width, true, rng),
        }
    }

    pub(crate) fn bind(store: &ParamStore, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::bind(store, &format!("{name}.fc1"), width, hidden, true)?,
            fc2: Linear::bind(store, &format!("{name}.fc2"), hidden, width, true)?,
        })
    }

    pub fn apply<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.fc1.apply(tape, store, x)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, dropout, training, rng)?;
        self.fc2.apply(tape, store, h)
    }
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V` over the last two
/// axes; leading axes are batch axes and must agree.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = *tape.shape(q).last().ok_or_else(|| dim_err!("attention of a scalar"))?;
    if tape.shape(k).last() != Some(&dk) {
        return Err(dim_err!("query width {dk} differs from key shape {:?}", tape.shape(k)));
    }
    let sk = tape.shape(k);
    let sv = tape.shape(v);
    if sk.len() < 2 || sv.len() != sk.len() || sk[sk.len() - 2] != sv[sv.len() - 2] {
        return Err(dim_err!("keys {:?} and values {:?} disagree", sk, sv));
    }
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(dk as f64));
    let weights = tape.softmax(scores)?;
    tape.matmul(weights, v)
}

/// `[N, l, h·d_k] -> [N·h, l, d_k]`
pub(crate) fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, l, w) = (s[0], s[1], s[2]);
    let dk = w / heads;
    let x = tape.reshape(x, &[n, l, heads, dk])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n * heads, l, dk])
}

/// `[N·h, l, d_k] -> [N, l, h·d_k]`
pub(crate) fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (nh, l, dk) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[nh / heads, heads, l, dk])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[nh / heads, l, heads * dk])
}

/// Standard multi-head self-attention with query/key/value/output maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub(crate) fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_m: usize, heads: usize, rng: &mut R) -> Self {
        let mut lin = |part: &str, rng: &mut R| Linear::init(store, &format!("{name}.{part}"), d_m, d_m, true, rng);
        SelfAttention { q: lin("q", rng), k: lin("k", rng), v: lin("v", rng), out: lin("out", rng), heads }
    }

    pub(crate) fn bind(store: &ParamStore, name: &str, d_m: usize, heads: usize) -> Result<Self> {
        let lin = |part: &str| Linear::bind(store, &format!("{name}.{part}"), d_m, d_m, true);
        Ok(SelfAttention { q: lin("q")?, k: lin("k")?, v: lin("v")?, out: lin("out")?, heads })
    }

    /// `x: [N, l, d_m] -> [N, l, d_m]`
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 3 {
            return Err(dim_err!("self-attention expects [N, l, d_m], got {:?}", tape.shape(x)));
        }
        let q = self.q.apply(tape, store, x)?;
        let k = self.k.apply(tape, store, x)?;
        let v = self.v.apply(tape, store, x)?;
        let q = split_heads(tape, q, self.heads)?;
        let k = split_heads(tape, k, self.heads)?;
        let v = split_heads(tape, v, self.heads)?;
        let o = attention(tape, q, k, v)?;
        let o = merge_heads(tape, o, self.heads)?;
        self.out.apply(tape, store, o)
    }
}

/// Multi-head attention whose queries are supplied directly (no query map)
/// and whose keys and values share one projection.
///
/// Head `i` attends with query columns `i·d_k..(i+1)·d_k` against
/// `K̂·W_kv,i`; concatenated heads are mapped by `W_o`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharedKvAttention {
    /// `[d_in, h·d_k]`, the per-head maps `W_kv,i` side by side.
    pub kv: Linear,
    /// `[h·d_k, d_out]`
    pub out: Linear,
    pub heads: usize,
}

impl SharedKvAttention {
    pub(crate) fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        heads: usize,
        d_k: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        SharedKvAttention {
            kv: Linear::init(store, &format!("{name}.kv"), d_in, heads * d_k, false, rng),
            out: Linear::init(store, &format!("{name}.out"), heads * d_k, d_out, false, rng),
            heads,
        }
    }

    pub(crate) fn bind(store: &ParamStore, name: &str, d_in: usize, heads: usize, d_k: usize, d_out: usize) -> Result<Self> {
        Ok(SharedKvAttention {
            kv: Linear::bind(store, &format!("{name}.kv"), d_in, heads * d_k, false)?,
            out: Linear::bind(store, &format!("{name}.out"), heads * d_k, d_out, false)?,
            heads,
        })
    }

    /// `queries: [l_q, h·d_k]`, `keys: [B, l_kv, d_in]` → `[B, l_q, d_out]`.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, queries: Var, keys: Var) -> Result<Var> {
        let qs = tape.shape(queries).to_vec();
        let ks = tape.shape(keys).to_vec();
        if qs.len() != 2 || ks.len() != 3 {
            return Err(dim_err!("shared-kv attention expects [l_q, w] and [B, l, d], got {:?}, {:?}", qs, ks));
        }
        let width = store.get(self.kv.weight).shape()[1];
        if qs[1] != width || !width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "query width {} must equal h·d_k = {width} with {} heads",
                qs[1], self.heads
            )));
        }
        let (b, l_q) = (ks[0], qs[0]);
        let kv = self.kv.apply(tape, store, keys)?;
        let kv = split_heads(tape, kv, self.heads)?;
        let q = tape.reshape(queries, &[1, l_q, width])?;
        let q = split_heads(tape, q, self.heads)?;
        let dk = width / self.heads;
        let q = tape.reshape(q, &[1, self.heads, l_q, dk])?;
        let q = tape.expand(q, &[b, self.heads, l_q, dk])?;
        let q = tape.reshape(q, &[b * self.heads, l_q, dk])?;
        let o = attention(tape, q, kv, kv)?;
        let o = merge_heads(tape, o, self.heads)?;
        self.out.apply(tape, store, o)
    }
}

pub(crate) fn layer_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.{i}")
}

pub(crate) fn collect<T>(n: usize, f: impl FnMut(usize) -> Result<T>) -> Result<Vec<T>> {
    (0..n).map(f).collect()
}
