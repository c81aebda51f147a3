//! Multi-head cross-modal attention with per-head dense expert routing.
//!
//! The image and text sequences are split into head subspaces; each head
//! cross-attends image queries over text keys (padded keys masked out),
//! pools its output into a gate over a small set of feed-forward experts,
//! and mixes every expert's output by the gate. Head outputs concatenate
//! back to the hidden width.

use rand_chacha::ChaCha20Rng;

use crate::params::{self, Binding, ParamId, ParamSet};
use crate::tensor::{Parameter, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    pub heads: usize,
    pub n_experts: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { heads: 8, n_experts: 4 }
    }
}

/// Ablation arms of the cross-modal stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Attention replaced by the plain sum of the two streams.
    NoCrossAttn,
    /// Routing replaced by a single expert per head.
    NoMoe,
    /// Coordination loss off (handled by the trainer, not this module).
    NoIicm,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::NoCrossAttn => "w/o Cross-Attn",
            Variant::NoIicm => "w/o IICM",
            Variant::NoMoe => "w/o MoE",
        }
    }
}

/// Two affine layers `d_h -> 2 d_h -> d_h` with gelu between.
#[derive(Debug, Clone)]
pub struct Expert {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    d_h: usize,
}

impl Expert {
    fn init(set: &mut ParamSet, prefix: &str, d_h: usize, rng: &mut ChaCha20Rng) -> Self {
        let hidden = 2 * d_h;
        let std1 = (1.0 / d_h as f64).sqrt();
        let std2 = (1.0 / hidden as f64).sqrt();
        Expert {
            w1: set.add(Parameter::new(format!("{prefix}.w1"), params::normal(rng, &[d_h, hidden], std1))),
            b1: set.add(Parameter::new(format!("{prefix}.b1"), params::zeros(&[hidden]))),
            w2: set.add(Parameter::new(format!("{prefix}.w2"), params::normal(rng, &[hidden, d_h], std2))),
            b2: set.add(Parameter::new(format!("{prefix}.b2"), params::zeros(&[d_h]))),
            d_h,
        }
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId, TensorError> {
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, vec![s[0] * s[1], self.d_h])?;
        let h = tape.matmul(flat, bind.id(self.w1))?;
        let hb = tape.add(h, bind.id(self.b1))?;
        let act = tape.gelu(hb)?;
        let out = tape.matmul(act, bind.id(self.w2))?;
        let outb = tape.add(out, bind.id(self.b2))?;
        tape.reshape(outb, s)
    }
}

/// Per-head affine map `d_h -> N_e` over the pooled head output, softmaxed.
#[derive(Debug, Clone)]
struct Router {
    w: ParamId,
    b: ParamId,
}

impl Router {
    fn init(set: &mut ParamSet, prefix: &str, d_h: usize, n_experts: usize, rng: &mut ChaCha20Rng) -> Self {
        Router {
            w: set.add(Parameter::new(
                format!("{prefix}.w"),
                params::normal(rng, &[d_h, n_experts], (1.0 / d_h as f64).sqrt()),
            )),
            b: set.add(Parameter::new(format!("{prefix}.b"), params::zeros(&[n_experts]))),
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    router: Option<Router>,
    experts: Vec<Expert>,
}

/// The full cross-modal stage.
#[derive(Debug, Clone)]
pub struct CrossModalMoe {
    pub cfg: HeadConfig,
    pub d_hidden: usize,
    pub d_h: usize,
    variant: Variant,
    heads: Vec<Head>,
}

impl CrossModalMoe {
    /// `variant` fixes the architecture: the single-expert arm allocates no
    /// router and exactly one expert per head.
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        d_hidden: usize,
        cfg: &HeadConfig,
        variant: Variant,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self, TensorError> {
        if cfg.heads == 0 || d_hidden % cfg.heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                details: format!("{} heads do not divide hidden width {d_hidden}", cfg.heads),
            });
        }
        let d_h = d_hidden / cfg.heads;
        let single_expert = variant == Variant::NoMoe;
        let heads = (0..cfg.heads)
            .map(|h| {
                let hp = format!("{prefix}.head{h}");
                let n_e = if single_expert { 1 } else { cfg.n_experts };
                Head {
                    router: if single_expert {
                        None
                    } else {
                        Some(Router::init(set, &format!("{hp}.router"), d_h, cfg.n_experts, rng))
                    },
                    experts: (0..n_e)
                        .map(|k| Expert::init(set, &format!("{hp}.expert{k}"), d_h, rng))
                        .collect(),
                }
            })
            .collect();
        Ok(CrossModalMoe { cfg: *cfg, d_hidden, d_h, variant, heads })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Contiguous channel slices; concatenating them reproduces the input.
    pub fn split_heads(&self, tape: &mut Tape, z: TensorId) -> Result<Vec<TensorId>, TensorError> {
        (0..self.cfg.heads)
            .map(|h| tape.slice_last(z, h * self.d_h, self.d_h))
            .collect()
    }

    /// Scaled dot-product cross attention of one head with padded keys
    /// masked to -inf, residual form `O = Zi + A Zt`.
    pub fn cross_attention_head(
        &self,
        tape: &mut Tape,
        zi: TensorId,
        zt: TensorId,
        valid_len: &[usize],
    ) -> Result<TensorId, TensorError> {
        let s = tape.shape(zi).to_vec();
        let (bsz, l) = (s[0], s[1]);
        let scores = tape.bmm_nt(zi, zt)?;
        let scaled = tape.scale(scores, 1.0 / (self.d_h as f64).sqrt())?;
        let mask = key_mask(bsz, l, valid_len);
        let mask_id = tape.constant(mask)?;
        let masked = tape.add(scaled, mask_id)?;
        let attn = tape.softmax_last(masked)?;
        let mixed = tape.bmm(attn, zt)?;
        tape.add(zi, mixed)
    }

    /// Masked mean-pool over valid positions, affine, softmax -> `[B, N_e]`.
    pub fn route(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        head: usize,
        o_h: TensorId,
        valid_len: &[usize],
    ) -> Result<TensorId, TensorError> {
        let router = self.heads[head]
            .router
            .as_ref()
            .ok_or_else(|| TensorError::Graph("routing disabled in the single-expert arm".into()))?;
        let s = tape.shape(o_h).to_vec();
        let (bsz, _l, d_h) = (s[0], s[1], s[2]);
        // o_h is already zero past valid_len, so the time sum is a valid sum
        let summed = tape.sum_axis(o_h, 1)?;
        let inv: Vec<f64> = valid_len
            .iter()
            .flat_map(|&v| std::iter::repeat(1.0 / v as f64).take(d_h))
            .collect();
        let inv_id = tape.constant(Tensor::new(vec![bsz, d_h], inv))?;
        let pooled = tape.mul(summed, inv_id)?;
        let logits = tape.matmul(pooled, bind.id(router.w))?;
        let logits_b = tape.add(logits, bind.id(router.b))?;
        tape.softmax_last(logits_b)
    }

    /// Dense mixture: every expert runs, outputs weighted per batch row.
    pub fn expert_mix(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        head: usize,
        o_h: TensorId,
        gates: TensorId,
    ) -> Result<TensorId, TensorError> {
        let s = tape.shape(o_h).to_vec();
        let (_bsz, l, d_h) = (s[0], s[1], s[2]);
        let experts = &self.heads[head].experts;
        let mut mixed: Option<TensorId> = None;
        for (k, expert) in experts.iter().enumerate() {
            let out = expert.forward(tape, bind, o_h)?;
            let gate_col = tape.slice_last(gates, k, 1)?;
            let gate_b = tape.reshape(gate_col, vec![s[0]])?;
            let gate_full = tape.expand_batch(gate_b, l, d_h)?;
            let weighted = tape.mul(out, gate_full)?;
            mixed = Some(match mixed {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        mixed.ok_or_else(|| TensorError::Graph("head has no experts".into()))
    }

    /// Run the whole stage. Returns `(O_exp [B,L,d_hidden], o_exp_last [B,d_hidden])`.
    /// Positions past `valid_len` are zeroed before routing and mixing.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        z_img: TensorId,
        z_txt: TensorId,
        valid_len: &[usize],
    ) -> Result<(TensorId, TensorId), TensorError> {
        let s = tape.shape(z_img).to_vec();
        if tape.shape(z_txt) != &s[..] || s.len() != 3 || s[2] != self.d_hidden {
            return Err(TensorError::ShapeMismatch {
                op: "cross_modal_forward",
                details: format!("img {s:?} vs txt {:?}", tape.shape(z_txt)),
            });
        }
        let (bsz, l) = (s[0], s[1]);
        let valid = valid_mask(bsz, l, self.d_h, valid_len);
        let img_heads = self.split_heads(tape, z_img)?;
        let txt_heads = self.split_heads(tape, z_txt)?;
        let mut outputs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let o_pre = match self.variant {
                Variant::NoCrossAttn => tape.add(img_heads[h], txt_heads[h])?,
                _ => self.cross_attention_head(tape, img_heads[h], txt_heads[h], valid_len)?,
            };
            let valid_id = tape.constant(valid.clone())?;
            let o_h = tape.mul(o_pre, valid_id)?;
            let e_h = match self.variant {
                Variant::NoMoe => self.heads[h].experts[0].forward(tape, bind, o_h)?,
                _ => {
                    let gates = self.route(tape, bind, h, o_h, valid_len)?;
                    self.expert_mix(tape, bind, h, o_h, gates)?
                }
            };
            outputs.push(e_h);
        }
        let o_exp = tape.concat_last(&outputs)?;
        let last_idx: Vec<usize> = valid_len.iter().map(|&v| v - 1).collect();
        let o_exp_last = tape.select_time(o_exp, &last_idx)?;
        Ok((o_exp, o_exp_last))
    }
}

fn key_mask(bsz: usize, l: usize, valid_len: &[usize]) -> Tensor {
    let mut data = vec![0.0; bsz * l * l];
    for b in 0..bsz {
        for q in 0..l {
            for k in valid_len[b]..l {
                data[(b * l + q) * l + k] = -1e30;
            }
        }
    }
    Tensor::new(vec![bsz, l, l], data)
}

fn valid_mask(bsz: usize, l: usize, d_h: usize, valid_len: &[usize]) -> Tensor {
    let mut data = vec![0.0; bsz * l * d_h];
    for b in 0..bsz {
        for t in 0..valid_len[b] {
            data[(b * l + t) * d_h..(b * l + t + 1) * d_h].fill(1.0);
        }
    }
    Tensor::new(vec![bsz, l, d_h], data)
}
