//! Parameter layout, initialisation, forward pass and analytic gradients for
//! the IRT family.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "onePL")]
    OnePl,
    #[serde(rename = "twoPL")]
    TwoPl,
    #[serde(rename = "mirt")]
    Mirt,
    #[serde(rename = "mirt_icl")]
    MirtIcl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::OnePl, Variant::TwoPl, Variant::Mirt, Variant::MirtIcl];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::OnePl => "onePL",
            Variant::TwoPl => "twoPL",
            Variant::Mirt => "mirt",
            Variant::MirtIcl => "mirt_icl",
        }
    }
}

/// Whether item traits are free per-item parameters or computed from the
/// query embedding. Only `mirt` honours the choice: the logistic baselines
/// are always per-item and `mirt_icl` always reads embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemMode {
    #[default]
    Content,
    Classic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrtConfig {
    pub variant: Variant,
    pub item_mode: ItemMode,
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for IrtConfig {
    fn default() -> Self {
        IrtConfig {
            variant: Variant::MirtIcl,
            item_mode: ItemMode::Content,
            latent_dim: 32,
            embedding_dim: 768,
            lr: 2e-4,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl IrtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.latent_dim == 0 || self.embedding_dim == 0 {
            return bad("latent and embedding dimensions must be positive");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr and batch size must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn content_aware(&self) -> bool {
        match self.variant {
            Variant::OnePl | Variant::TwoPl => false,
            Variant::Mirt => self.item_mode == ItemMode::Content,
            Variant::MirtIcl => true,
        }
    }

    /// Length of θ (and α).
    pub fn ability_dim(&self) -> usize {
        match self.variant {
            Variant::OnePl | Variant::TwoPl => 1,
            Variant::Mirt | Variant::MirtIcl => self.latent_dim,
        }
    }
}

/// Offsets of each parameter block inside the flat vector. Matrices are
/// row-major with one row per output unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_models: usize,
    pub n_items: usize,
    pub k: usize,
    pub emb: usize,
    pub theta: usize,
    pub theta_icl: Option<usize>,
    pub item_d: Option<usize>,
    pub item_alpha: Option<usize>,
    pub w_d: Option<usize>,
    pub b_d: Option<usize>,
    pub w_alpha: Option<usize>,
    pub b_alpha: Option<usize>,
    pub w_alpha_icl: Option<usize>,
    pub b_alpha_icl: Option<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &IrtConfig, n_models: usize, n_items: usize) -> Self {
        let k = cfg.ability_dim();
        let emb = cfg.embedding_dim;
        let mut len = 0;
        let mut take = |n: usize| {
            let at = len;
            len += n;
            at
        };
        let theta = take(n_models * k);
        let theta_icl = (cfg.variant == Variant::MirtIcl).then(|| take(n_models * k));
        let (mut item_d, mut item_alpha) = (None, None);
        let (mut w_d, mut b_d, mut w_alpha, mut b_alpha, mut w_alpha_icl, mut b_alpha_icl) =
            (None, None, None, None, None, None);
        if cfg.content_aware() {
            w_d = Some(take(emb));
            b_d = Some(take(1));
            w_alpha = Some(take(k * emb));
            b_alpha = Some(take(k));
            if cfg.variant == Variant::MirtIcl {
                w_alpha_icl = Some(take(k * emb));
                b_alpha_icl = Some(take(k));
            }
        } else {
            item_d = Some(take(n_items));
            if cfg.variant != Variant::OnePl {
                item_alpha = Some(take(n_items * k));
            }
        }
        Layout {
            n_models,
            n_items,
            k,
            emb,
            theta,
            theta_icl,
            item_d,
            item_alpha,
            w_d,
            b_d,
            w_alpha,
            b_alpha,
            w_alpha_icl,
            b_alpha_icl,
            len,
        }
    }
}

/// The item side of one observation: its slot in the item table (used by
/// per-item variants) and its embedding (used by content-aware variants).
#[derive(Debug, Clone, Copy)]
pub struct ItemRef<'a> {
    pub slot: usize,
    pub embedding: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrtParams {
    pub config: IrtConfig,
    pub layout: Layout,
    pub values: Vec<f64>,
}

/// Item traits plus the pre-activations needed for backprop.
#[derive(Debug, Clone)]
pub struct ItemTraits {
    pub d: f64,
    pub alpha: Vec<f64>,
    pub alpha_icl: Vec<f64>,
    pre_d: f64,
    pre_alpha: Vec<f64>,
    pre_alpha_icl: Vec<f64>,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn affine(w: &[f64], b: &[f64], e: &[f64], out: &mut Vec<f64>) {
    let n = e.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(h, &bias)| {
        let row = &w[h * n..(h + 1) * n];
        bias + row.iter().zip(e).map(|(a, x)| a * x).sum::<f64>()
    }));
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn init_params(cfg: &IrtConfig, n_models: usize, n_items: usize) -> Result<IrtParams> {
    cfg.validate()?;
    let layout = Layout::new(cfg, n_models, n_items);
    let mut values = vec![0.0; layout.len];
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, "irt/init"));
    let ability = Normal::new(0.0, 0.1).expect("valid normal");
    let k = layout.k;
    for v in &mut values[layout.theta..layout.theta + n_models * k] {
        *v = ability.sample(&mut rng);
    }
    if let Some(at) = layout.theta_icl {
        for v in &mut values[at..at + n_models * k] {
            *v = ability.sample(&mut rng);
        }
    }
    if let Some(at) = layout.item_alpha {
        if cfg.variant == Variant::TwoPl {
            values[at..at + n_items].fill(1.0);
        } else {
            let bound = 1.0 / (k as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            for v in &mut values[at..at + n_items * k] {
                *v = u.sample(&mut rng);
            }
        }
    }
    let bound = 1.0 / (layout.emb as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    for (block, rows) in [(layout.w_d, 1), (layout.w_alpha, k), (layout.w_alpha_icl, k)] {
        if let Some(at) = block {
            for v in &mut values[at..at + rows * layout.emb] {
                *v = u.sample(&mut rng);
            }
        }
    }
    Ok(IrtParams {
        config: cfg.clone(),
        layout,
        values,
    })
}

impl IrtParams {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn theta(&self, model: usize) -> &[f64] {
        let k = self.layout.k;
        let at = self.layout.theta + model * k;
        &self.values[at..at + k]
    }

    pub fn theta_icl(&self, model: usize) -> Option<&[f64]> {
        let k = self.layout.k;
        self.layout.theta_icl.map(|t| &self.values[t + model * k..t + (model + 1) * k])
    }

    fn block(&self, at: Option<usize>, n: usize) -> &[f64] {
        let at = at.expect("block present for this variant");
        &self.values[at..at + n]
    }

    fn check(&self, model: usize, item: &ItemRef<'_>) -> Result<()> {
        if model >= self.layout.n_models {
            return Err(Error::InvalidArgument(format!("model index {model} out of range")));
        }
        self.check_item(item)
    }

    fn check_item(&self, item: &ItemRef<'_>) -> Result<()> {
        if self.config.content_aware() {
            match item.embedding {
                Some(e) if e.len() == self.layout.emb => Ok(()),
                Some(e) => Err(Error::DimensionMismatch {
                    expected: self.layout.emb,
                    found: e.len(),
                }),
                None => Err(Error::MissingEmbedding(format!("item slot {}", item.slot))),
            }
        } else if item.slot >= self.layout.n_items {
            Err(Error::InvalidArgument(format!("item slot {} out of range", item.slot)))
        } else {
            Ok(())
        }
    }

    pub fn item_traits(&self, item: &ItemRef<'_>) -> Result<ItemTraits> {
        self.check_item(item)?;
        Ok(self.traits_unchecked(item))
    }

    fn traits_unchecked(&self, item: &ItemRef<'_>) -> ItemTraits {
        let l = &self.layout;
        let k = l.k;
        if let Some(e) = item.embedding.filter(|_| self.config.content_aware()) {
            let mut pre = Vec::with_capacity(1);
            affine(self.block(l.w_d, l.emb), self.block(l.b_d, 1), e, &mut pre);
            let pre_d = pre[0];
            let mut pre_alpha = Vec::with_capacity(k);
            affine(self.block(l.w_alpha, k * l.emb), self.block(l.b_alpha, k), e, &mut pre_alpha);
            let mut pre_alpha_icl = Vec::new();
            if l.w_alpha_icl.is_some() {
                affine(self.block(l.w_alpha_icl, k * l.emb), self.block(l.b_alpha_icl, k), e, &mut pre_alpha_icl);
            }
            ItemTraits {
                d: relu(pre_d),
                alpha: pre_alpha.iter().map(|&x| relu(x)).collect(),
                alpha_icl: pre_alpha_icl.iter().map(|&x| relu(x)).collect(),
                pre_d,
                pre_alpha,
                pre_alpha_icl,
            }
        } else {
            let d = self.values[l.item_d.expect("per-item difficulty") + item.slot];
            let alpha = match l.item_alpha {
                Some(at) => self.values[at + item.slot * k..at + (item.slot + 1) * k].to_vec(),
                None => vec![1.0],
            };
            ItemTraits {
                d,
                pre_d: d,
                pre_alpha: alpha.clone(),
                alpha,
                alpha_icl: Vec::new(),
                pre_alpha_icl: Vec::new(),
            }
        }
    }

    /// `θᵀα − d` for the model, and the ICL term `θᶜᵀαᶜ` (0 when absent).
    fn terms(&self, model: usize, t: &ItemTraits) -> (f64, f64) {
        let theta = self.theta(model);
        let base = theta.iter().zip(&t.alpha).map(|(a, b)| a * b).sum::<f64>() - t.d;
        let icl = match self.theta_icl(model) {
            Some(tc) => tc.iter().zip(&t.alpha_icl).map(|(a, b)| a * b).sum(),
            None => 0.0,
        };
        (base, icl)
    }

    fn logit(&self, model: usize, t: &ItemTraits, gate: u8) -> f64 {
        let (base, icl) = self.terms(model, t);
        if gate == 1 && self.variant() == Variant::MirtIcl {
            base + icl
        } else {
            base
        }
    }

    /// Probability of a correct response. The gate is ignored below
    /// `mirt_icl`.
    pub fn forward(&self, model: usize, item: &ItemRef<'_>, gate: u8) -> Result<f64> {
        self.check(model, item)?;
        if gate > 1 {
            return Err(Error::InvalidArgument(format!("gate must be 0 or 1, got {gate}")));
        }
        Ok(sigmoid(self.logit(model, &self.traits_unchecked(item), gate)))
    }

    /// `(θᵀα − d, θᶜᵀαᶜ)` for one item; the second term needs `mirt_icl`.
    pub fn decompose(&self, model: usize, item: &ItemRef<'_>) -> Result<(f64, f64)> {
        self.check(model, item)?;
        if self.variant() != Variant::MirtIcl {
            return Err(Error::InvalidArgument("ICL term requires the mirt_icl variant".into()));
        }
        Ok(self.terms(model, &self.traits_unchecked(item)))
    }

    /// The plain `mirt` model sharing this model's θ, d and α networks.
    pub fn shared_mirt(&self) -> Result<IrtParams> {
        if self.variant() != Variant::MirtIcl {
            return Err(Error::InvalidArgument("shared_mirt needs a mirt_icl model".into()));
        }
        let cfg = IrtConfig {
            variant: Variant::Mirt,
            item_mode: ItemMode::Content,
            ..self.config.clone()
        };
        let layout = Layout::new(&cfg, self.layout.n_models, self.layout.n_items);
        let mut values = vec![0.0; layout.len];
        let l = &self.layout;
        let n_theta = l.n_models * l.k;
        let copies = [
            (l.theta, layout.theta, n_theta),
            (l.w_d.unwrap(), layout.w_d.unwrap(), l.emb),
            (l.b_d.unwrap(), layout.b_d.unwrap(), 1),
            (l.w_alpha.unwrap(), layout.w_alpha.unwrap(), l.k * l.emb),
            (l.b_alpha.unwrap(), layout.b_alpha.unwrap(), l.k),
        ];
        for (src, dst, n) in copies {
            values[dst..dst + n].copy_from_slice(&self.values[src..src + n]);
        }
        Ok(IrtParams {
            config: cfg,
            layout,
            values,
        })
    }

    /// Mean clipped binary cross-entropy over `batch` and its gradient with
    /// respect to every parameter. `dL/dz` uses the clipped probability.
    pub fn loss_and_grads(&self, batch: &[Observation<'_>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptySet("loss batch".into()));
        }
        let mut grads = vec![0.0; self.values.len()];
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for obs in batch {
            self.check(obs.model, &obs.item)?;
            let t = self.traits_unchecked(&obs.item);
            let gate = if self.variant() == Variant::MirtIcl { obs.gate } else { 0 };
            let p = sigmoid(self.logit(obs.model, &t, gate)).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            let y = if obs.label { 1.0 } else { 0.0 };
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            self.backward(obs.model, &obs.item, &t, gate, (p - y) * scale, &mut grads);
        }
        Ok((loss * scale, grads))
    }

    /// Mean clipped cross-entropy without gradients.
    pub fn loss(&self, batch: &[Observation<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptySet("loss batch".into()));
        }
        let mut total = 0.0;
        for obs in batch {
            let p = self.forward(obs.model, &obs.item, obs.gate)?.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            total -= if obs.label { p.ln() } else { (1.0 - p).ln() };
        }
        Ok(total / batch.len() as f64)
    }

    fn backward(&self, model: usize, item: &ItemRef<'_>, t: &ItemTraits, gate: u8, gz: f64, grads: &mut [f64]) {
        let l = &self.layout;
        let k = l.k;
        let theta = self.theta(model);
        let th = l.theta + model * k;
        for h in 0..k {
            grads[th + h] += gz * t.alpha[h];
        }
        let g_alpha: Vec<f64> = theta.iter().map(|&x| gz * x).collect();
        let g_d = -gz;

        match item.embedding.filter(|_| self.config.content_aware()) {
            Some(e) => {
                let n = l.emb;
                if t.pre_d > 0.0 {
                    let (w, b) = (l.w_d.unwrap(), l.b_d.unwrap());
                    for (g, x) in grads[w..w + n].iter_mut().zip(e) {
                        *g += g_d * x;
                    }
                    grads[b] += g_d;
                }
                accumulate_affine(grads, l.w_alpha.unwrap(), l.b_alpha.unwrap(), &t.pre_alpha, &g_alpha, e);
                if gate == 1 {
                    let tc_at = l.theta_icl.unwrap() + model * k;
                    let theta_c = self.theta_icl(model).unwrap();
                    for h in 0..k {
                        grads[tc_at + h] += gz * t.alpha_icl[h];
                    }
                    let g_alpha_c: Vec<f64> = theta_c.iter().map(|&x| gz * x).collect();
                    accumulate_affine(
                        grads,
                        l.w_alpha_icl.unwrap(),
                        l.b_alpha_icl.unwrap(),
                        &t.pre_alpha_icl,
                        &g_alpha_c,
                        e,
                    );
                }
            }
            None => {
                grads[l.item_d.unwrap() + item.slot] += g_d;
                if let Some(at) = l.item_alpha {
                    for h in 0..k {
                        grads[at + item.slot * k + h] += g_alpha[h];
                    }
                }
            }
        }
    }
}

fn accumulate_affine(grads: &mut [f64], w: usize, b: usize, pre: &[f64], g_out: &[f64], e: &[f64]) {
    let n = e.len();
    for (h, (&p, &g)) in pre.iter().zip(g_out).enumerate() {
        if p <= 0.0 || g == 0.0 {
            continue;
        }
        grads[b + h] += g;
        for (gw, x) in grads[w + h * n..w + (h + 1) * n].iter_mut().zip(e) {
            *gw += g * x;
        }
    }
}

/// One labelled response for training or evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub model: usize,
    pub item: ItemRef<'a>,
    pub gate: u8,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: betas.0,
            beta2: betas.1,
            eps,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
