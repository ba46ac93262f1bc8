//! The velocity network: a transformer over context and noisy target latent
//! tokens, with flow-time modulation from a shared MLP plus per-block
//! low-rank (LoRA) corrections, cross-attention to per-frame timestamp
//! embeddings, and rotary or trainable positional encodings.
//!
//! Blocks follow the adaLN-zero convention: modulation gates and the output
//! head start at zero, so the whole network is the identity (and the
//! predicted velocity exactly zero) at initialization.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::collections::HashMap;

use ndarray::{Array1, Array2, Array4, ArrayD};

use crate::error::{Error, Result};
use crate::grid::{timestamp_index, CalendarTime, HOURS_PER_YEAR};
use crate::pos::{rope3d_angles, rope_angles, RopeConfig};
use crate::rng::{derive_seed_tagged, SeedStream};
use crate::tape::{Grads, Real, Tape, Var};

/// Positional scheme: temporal rotary + trainable 2-D table (default), or
/// rotary over all three axes (ablation variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosScheme {
    Rope1dTrainable2d,
    Rope3d,
}

/// What the cross-attention keys/values read: the per-frame timestamp rows
/// alone, or those rows concatenated with the visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XattnKv {
    Timestamps,
    Concat,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DitConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    /// LoRA rank of the per-block modulation correction (0 disables it).
    pub lora_rank: usize,
    pub timestamp_embed_dim: usize,
    /// Sinusoidal flow-time embedding width (also the shared head's hidden).
    pub flow_embed_dim: usize,
    pub max_context_frames: usize,
    pub max_target_frames: usize,
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub pos_scheme: PosScheme,
    pub xattn_kv: XattnKv,
    pub rope_base: f64,
    /// Conditioning on per-frame timestamps (ablation switch).
    pub use_timestamps: bool,
}

impl DitConfig {
    /// Desk-scale default used by the reports and the CLI.
    pub fn default_desk(latent_channels: usize, latent_h: usize, latent_w: usize) -> Self {
        DitConfig {
            d_model: 192,
            n_heads: 6,
            n_blocks: 8,
            mlp_ratio: 4,
            lora_rank: 8,
            timestamp_embed_dim: 128,
            flow_embed_dim: 256,
            max_context_frames: 4,
            max_target_frames: 32,
            latent_channels,
            latent_h,
            latent_w,
            pos_scheme: PosScheme::Rope1dTrainable2d,
            xattn_kv: XattnKv::Timestamps,
            rope_base: 10_000.0,
            use_timestamps: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn sites(&self) -> usize {
        self.latent_h * self.latent_w
    }

    pub fn n_tokens(&self, k_frames: usize, n_frames: usize) -> usize {
        (k_frames + n_frames) * self.sites()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary encodings",
                self.head_dim()
            )));
        }
        if self.n_blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("n_blocks and mlp_ratio must be >= 1".into()));
        }
        if self.max_context_frames == 0 || self.max_target_frames == 0 {
            return Err(Error::Config("frame maxima must be >= 1".into()));
        }
        if self.flow_embed_dim % 2 != 0 || self.flow_embed_dim == 0 {
            return Err(Error::Config("flow_embed_dim must be positive and even".into()));
        }
        if self.latent_channels == 0 || self.latent_h == 0 || self.latent_w == 0 {
            return Err(Error::Config("latent shape must be nonzero".into()));
        }
        self.rope_config()?;
        Ok(())
    }

    pub fn rope_config(&self) -> Result<RopeConfig> {
        match self.pos_scheme {
            PosScheme::Rope1dTrainable2d => RopeConfig::new_1d(self.head_dim(), self.rope_base),
            PosScheme::Rope3d => RopeConfig::new_3d(
                self.head_dim(),
                self.rope_base,
                RopeConfig::default_split(self.head_dim()),
            ),
        }
    }
}

/// Named trainable arrays with matching gradient buffers.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let grad = ArrayD::zeros(value.shape().to_vec());
        self.entries.insert(name.to_string(), ParamEntry { value, grad });
        Ok(())
    }

    pub fn value(&self, name: &str) -> &ArrayD<T> {
        &self.entries[name].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        &mut self.entries.get_mut(name).expect("parameter exists").value
    }

    pub fn grad(&self, name: &str) -> &ArrayD<T> {
        &self.entries[name].grad
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for e in self.entries.values_mut() {
            e.grad.mapv_inplace(|g| g * s);
        }
    }

    pub fn add_to_grad(&mut self, name: &str, delta: &ArrayD<T>) {
        let e = self.entries.get_mut(name).expect("parameter exists");
        e.grad += delta;
    }

    /// Sorted parameter names.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn n_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }
}

/// Initialization recipe for one named parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    Zeros,
    /// Truncated normal, resampling beyond two standard deviations.
    TruncNormal { std: f64 },
}

/// Full list of `(name, shape, init)` for a configuration. Both `init` and
/// `param_report` derive from this single source.
pub fn parameter_specs(config: &DitConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = config.d_model;
    let tn = InitKind::TruncNormal { std: 0.02 };
    let mut specs: Vec<(String, Vec<usize>, InitKind)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
        specs.push((name, shape, init));
    };

    push("token_proj.w".into(), vec![config.latent_channels, d], tn);
    push("token_proj.b".into(), vec![d], InitKind::Zeros);
    push("ctx_flag".into(), vec![d], tn);
    if config.pos_scheme == PosScheme::Rope1dTrainable2d {
        push("spatial_embed".into(), vec![config.sites(), d], tn);
    }
    if config.use_timestamps {
        push(
            "timestamp_table".into(),
            vec![HOURS_PER_YEAR as usize, config.timestamp_embed_dim],
            tn,
        );
    }
    push(
        "mod_shared.fc1.w".into(),
        vec![config.flow_embed_dim, config.flow_embed_dim],
        tn,
    );
    push("mod_shared.fc1.b".into(), vec![config.flow_embed_dim], InitKind::Zeros);
    push(
        "mod_shared.fc2.w".into(),
        vec![config.flow_embed_dim, 6 * d],
        InitKind::Zeros,
    );
    push("mod_shared.fc2.b".into(), vec![6 * d], InitKind::Zeros);
    push("head.w".into(), vec![d, config.latent_channels], InitKind::Zeros);
    push("head.b".into(), vec![config.latent_channels], InitKind::Zeros);

    for b in 0..config.n_blocks {
        let p = format!("blocks.{b:02}");
        push(format!("{p}.attn.qkv.w"), vec![d, 3 * d], tn);
        push(format!("{p}.attn.qkv.b"), vec![3 * d], InitKind::Zeros);
        push(format!("{p}.attn.out.w"), vec![d, d], tn);
        push(format!("{p}.attn.out.b"), vec![d], InitKind::Zeros);
        if config.use_timestamps {
            push(format!("{p}.xattn.q.w"), vec![d, d], tn);
            push(format!("{p}.xattn.q.b"), vec![d], InitKind::Zeros);
            push(
                format!("{p}.xattn.k.w"),
                vec![config.timestamp_embed_dim, d],
                tn,
            );
            push(format!("{p}.xattn.k.b"), vec![d], InitKind::Zeros);
            push(
                format!("{p}.xattn.v.w"),
                vec![config.timestamp_embed_dim, d],
                tn,
            );
            push(format!("{p}.xattn.v.b"), vec![d], InitKind::Zeros);
            if config.xattn_kv == XattnKv::Concat {
                push(format!("{p}.xattn.kvis.w"), vec![d, d], tn);
                push(format!("{p}.xattn.kvis.b"), vec![d], InitKind::Zeros);
                push(format!("{p}.xattn.vvis.w"), vec![d, d], tn);
                push(format!("{p}.xattn.vvis.b"), vec![d], InitKind::Zeros);
            }
            // Zero-init output projection keeps the block an identity at init.
            push(format!("{p}.xattn.out.w"), vec![d, d], InitKind::Zeros);
            push(format!("{p}.xattn.out.b"), vec![d], InitKind::Zeros);
        }
        push(format!("{p}.mlp.fc1.w"), vec![d, config.mlp_ratio * d], tn);
        push(format!("{p}.mlp.fc1.b"), vec![config.mlp_ratio * d], InitKind::Zeros);
        push(format!("{p}.mlp.fc2.w"), vec![config.mlp_ratio * d, d], tn);
        push(format!("{p}.mlp.fc2.b"), vec![d], InitKind::Zeros);
        if config.lora_rank > 0 {
            push(
                format!("{p}.mod_lora.a"),
                vec![config.lora_rank, config.flow_embed_dim],
                tn,
            );
            push(
                format!("{p}.mod_lora.b"),
                vec![6 * d, config.lora_rank],
                InitKind::Zeros,
            );
        }
    }
    specs
}

fn init_array<T: Real>(shape: &[usize], init: InitKind, seed: u64) -> ArrayD<T> {
    match init {
        InitKind::Zeros => ArrayD::zeros(shape.to_vec()),
        InitKind::TruncNormal { std } => {
            let mut stream = SeedStream::new(seed);
            let n: usize = shape.iter().product();
            let data: Vec<T> = (0..n)
                .map(|_| {
                    let mut z = stream.normal();
                    while z.abs() > 2.0 {
                        z = stream.normal();
                    }
                    T::cast_f64(z * std)
                })
                .collect();
            ArrayD::from_shape_vec(shape.to_vec(), data).expect("init shape")
        }
    }
}

///256-dim style sinusoidal embedding of a flow time in [0, 1]:
/// `[sin(1000 t w_i) .. cos(1000 t w_i) ..]` with `w_i = base^(-i/half)`.
pub fn flow_time_embedding(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let angle = 1000.0 * t * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// Lazily-registered tape leaves for named parameters.
pub(crate) struct Leaves<'a, T: Real> {
    tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    map: RefCell<HashMap<String, Var>>,
}

impl<'a, T: Real> Leaves<'a, T> {
    pub(crate) fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Leaves {
            tape,
            store,
            map: RefCell::new(HashMap::new()),
        }
    }

    pub(crate) fn get(&self, name: &str) -> Var {
        if let Some(v) = self.map.borrow().get(name) {
            return *v;
        }
        let var = self.tape.leaf(self.store.value(name).clone());
        self.map.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Extract accumulated gradients per parameter name.
    pub(crate) fn take_grads(&self, grads: &Grads<T>) -> Vec<(String, ArrayD<T>)> {
        self.map
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.get_opt(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Parameter accounting relative to a hypothetical per-block modulation head.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub modulation_shared: usize,
    pub modulation_lora: usize,
    pub modulation_total: usize,
    pub modulation_fraction: f64,
    /// Modulation count if every block carried its own full shared head.
    pub hypothetical_per_block: usize,
    /// Fraction of the hypothetical model's total that modulation would take.
    pub hypothetical_fraction: f64,
    pub groups: Vec<(String, usize)>,
}

/// Count parameters by walking the same spec list the initializer uses.
pub fn param_report(config: &DitConfig) -> Result<ParamReport> {
    config.validate()?;
    let specs = parameter_specs(config);
    let count = |pred: &dyn Fn(&str) -> bool| -> usize {
        specs
            .iter()
            .filter(|(name, _, _)| pred(name))
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    };
    let total = count(&|_| true);
    let shared = count(&|n| n.starts_with("mod_shared."));
    let lora = count(&|n| n.contains(".mod_lora."));
    let modulation_total = shared + lora;
    let hypothetical_per_block = config.n_blocks * shared;
    let hypothetical_total = total - modulation_total + hypothetical_per_block;

    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (name, shape, _) in &specs {
        let group = if let Some(rest) = name.strip_prefix("blocks.") {
            let sub = rest.splitn(2, '.').nth(1).unwrap_or(rest);
            format!("blocks.*.{}", sub.split('.').next().unwrap_or(sub))
        } else {
            name.split('.').next().unwrap_or(name).to_string()
        };
        *groups.entry(group).or_insert(0) += shape.iter().product::<usize>();
    }

    Ok(ParamReport {
        total,
        modulation_shared: shared,
        modulation_lora: lora,
        modulation_total,
        modulation_fraction: modulation_total as f64 / total as f64,
        hypothetical_per_block,
        hypothetical_fraction: hypothetical_per_block as f64 / hypothetical_total as f64,
        groups: groups.into_iter().collect(),
    })
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "parameter report")?;
        for (g, n) in &self.groups {
            writeln!(f, "  {g:<24} {n:>12}")?;
        }
        writeln!(f, "  {:<24} {:>12}", "total", self.total)?;
        writeln!(
            f,
            "  modulation shared {} + lora {} = {} ({:.2}% of total)",
            self.modulation_shared,
            self.modulation_lora,
            self.modulation_total,
            100.0 * self.modulation_fraction
        )?;
        writeln!(
            f,
            "  per-block hypothetical {} ({:.2}% of its total)",
            self.hypothetical_per_block,
            100.0 * self.hypothetical_fraction
        )
    }
}

/// The velocity network.
#[derive(Debug, Clone)]
pub struct DitModel<T: Real> {
    pub config: DitConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> DitModel<T> {
    /// Deterministic initialization: every parameter gets its own seed stream
    /// derived from `seed` and its name, so init is order-independent.
    pub fn init(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in parameter_specs(&config) {
            let sub_seed = derive_seed_tagged(seed, &name);
            params.insert(&name, init_array(&shape, init, sub_seed))?;
        }
        Ok(DitModel { config, params })
    }

    /// Latent frames `[F, c_z, h, w]` to a token matrix `[F * S, c_z]`,
    /// time-major (frame 0 first, sites in row-major y, x order).
    fn frames_to_rows(&self, frames: &Array4<T>) -> Array2<T> {
        let (f, c, h, w) = frames.dim();
        let s = h * w;
        let mut out = Array2::<T>::zeros((f * s, c));
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        out[[fi * s + y * w + x, ci]] = frames[[fi, ci, y, x]];
                    }
                }
            }
        }
        out
    }

    fn rows_to_frames(&self, rows: &Array2<T>, n_frames: usize) -> Array4<T> {
        let c = self.config.latent_channels;
        let (h, w) = (self.config.latent_h, self.config.latent_w);
        let s = h * w;
        let mut out = Array4::<T>::zeros((n_frames, c, h, w));
        for fi in 0..n_frames {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        out[[fi, ci, y, x]] = rows[[fi * s + y * w + x, ci]];
                    }
                }
            }
        }
        out
    }

    fn check_frames(&self, ctx: &Array4<T>, noisy: &Array4<T>) -> Result<(usize, usize)> {
        let cfg = &self.config;
        let (k, cc, ch, cw) = ctx.dim();
        let (n, nc, nh, nw) = noisy.dim();
        if k == 0 || k > cfg.max_context_frames {
            return Err(Error::Data(format!(
                "context frames {k} outside [1, {}]",
                cfg.max_context_frames
            )));
        }
        if n == 0 || n > cfg.max_target_frames {
            return Err(Error::Data(format!(
                "target frames {n} outside [1, {}]",
                cfg.max_target_frames
            )));
        }
        for (label, (c, h, w)) in [("context", (cc, ch, cw)), ("target", (nc, nh, nw))] {
            if c != cfg.latent_channels || h != cfg.latent_h || w != cfg.latent_w {
                return Err(Error::Data(format!(
                    "{label} latent shape ({c}, {h}, {w}) != config ({}, {}, {})",
                    cfg.latent_channels, cfg.latent_h, cfg.latent_w
                )));
            }
        }
        Ok((k, n))
    }

    /// Token embedding: project per-gridpoint latent vectors, add the learned
    /// context flag to context rows and (scheme permitting) spatial rows.
    pub(crate) fn tokenize(
        &self,
        tape: &Tape<T>,
        leaves: &Leaves<'_, T>,
        ctx: &Array4<T>,
        noisy: &Array4<T>,
    ) -> Result<Var> {
        let (k, n) = self.check_frames(ctx, noisy)?;
        let s = self.config.sites();
        let ctx_rows = self.frames_to_rows(ctx);
        let tgt_rows = self.frames_to_rows(noisy);
        let input = tape.leaf(
            ndarray::concatenate(ndarray::Axis(0), &[ctx_rows.view(), tgt_rows.view()])
                .expect("token concat")
                .into_dyn(),
        );
        let mut tokens = tape.matmul(input, leaves.get("token_proj.w"));
        tokens = tape.add_row(tokens, leaves.get("token_proj.b"));
        tokens = tape.add_vec_to_rows(tokens, leaves.get("ctx_flag"), 0, k * s);
        if self.config.pos_scheme == PosScheme::Rope1dTrainable2d {
            tokens = tape.add_tiled_rows(tokens, leaves.get("spatial_embed"), k + n);
        }
        Ok(tokens)
    }

    /// Six modulation vectors for block `b` at flow time `t`:
    /// shared head output plus the block's low-rank correction, split as
    /// (shift1, scale1, gate1, shift2, scale2, gate2).
    fn build_modulation(
        &self,
        tape: &Tape<T>,
        leaves: &Leaves<'_, T>,
        flow_time: f64,
        block: usize,
    ) -> [Var; 6] {
        let d = self.config.d_model;
        let emb64 = flow_time_embedding(flow_time, self.config.flow_embed_dim);
        let emb = tape.leaf(
            Array2::from_shape_fn((1, self.config.flow_embed_dim), |(_, i)| {
                T::cast_f64(emb64[i])
            })
            .into_dyn(),
        );
        let mut hidden = tape.matmul(emb, leaves.get("mod_shared.fc1.w"));
        hidden = tape.add_row(hidden, leaves.get("mod_shared.fc1.b"));
        hidden = tape.silu(hidden);
        let mut m = tape.matmul(hidden, leaves.get("mod_shared.fc2.w"));
        m = tape.add_row(m, leaves.get("mod_shared.fc2.b"));
        if self.config.lora_rank > 0 {
            let a = leaves.get(&format!("blocks.{block:02}.mod_lora.a"));
            let b = leaves.get(&format!("blocks.{block:02}.mod_lora.b"));
            let low = tape.matmul(emb, tape.transpose(a));
            let corr = tape.matmul(low, tape.transpose(b));
            m = tape.add(m, corr);
        }
        std::array::from_fn(|i| {
            let part = tape.slice_cols(m, i * d, d);
            tape.reshape(part, vec![d])
        })
    }

    /// Rotation angles for every token's query/key rows, per scheme.
    fn token_angles(&self, k_frames: usize, n_frames: usize) -> Result<Array2<f64>> {
        let s = self.config.sites();
        let n_tok = (k_frames + n_frames) * s;
        let rope = self.config.rope_config()?;
        let mut frame_pos = Vec::with_capacity(n_tok);
        for f in 0..(k_frames + n_frames) {
            for _ in 0..s {
                frame_pos.push(f as i64);
            }
        }
        match self.config.pos_scheme {
            PosScheme::Rope1dTrainable2d => Ok(rope_angles(&rope, &frame_pos)),
            PosScheme::Rope3d => {
                let mut lat = Vec::with_capacity(n_tok);
                let mut lon = Vec::with_capacity(n_tok);
                for _ in 0..(k_frames + n_frames) {
                    for y in 0..self.config.latent_h {
                        for x in 0..self.config.latent_w {
                            lat.push(y as i64);
                            lon.push(x as i64);
                        }
                    }
                }
                rope3d_angles(&rope, &frame_pos, &lat, &lon)
            }
        }
    }

    fn multi_head_attention(
        &self,
        tape: &Tape<T>,
        q: Var,
        keys: Var,
        vals: Var,
        angles: Option<&Array2<f64>>,
        key_angles: Option<&Array2<f64>>,
    ) -> Var {
        let dh = self.config.head_dim();
        let scale = T::cast_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for hi in 0..self.config.n_heads {
            let mut qh = tape.slice_cols(q, hi * dh, dh);
            let mut kh = tape.slice_cols(keys, hi * dh, dh);
            let vh = tape.slice_cols(vals, hi * dh, dh);
            if let Some(a) = angles {
                qh = tape.rotate_pairs(qh, a.clone());
            }
            if let Some(a) = key_angles {
                kh = tape.rotate_pairs(kh, a.clone());
            }
            let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
            let probs = tape.softmax(scores);
            heads.push(tape.matmul(probs, vh));
        }
        tape.concat_cols(&heads)
    }

    /// One transformer block: modulated self-attention with rotary q/k, then
    /// cross-attention to the timestamp rows, then the modulated MLP.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build_block(
        &self,
        tape: &Tape<T>,
        leaves: &Leaves<'_, T>,
        x: Var,
        ts_rows: Option<Var>,
        flow_time: f64,
        block: usize,
        angles: &Array2<f64>,
    ) -> Var {
        let p = format!("blocks.{block:02}");
        let d = self.config.d_model;
        let ones = tape.leaf(ArrayD::from_elem(vec![d], T::one()));
        let [shift1, scale1, gate1, shift2, scale2, gate2] =
            self.build_modulation(tape, leaves, flow_time, block);

        // Self-attention branch.
        let normed = tape.layer_norm(x, 1e-6);
        let scale1p = tape.add(scale1, ones);
        let modded = tape.add_row(tape.mul_row(normed, scale1p), shift1);
        let qkv = tape.add_row(
            tape.matmul(modded, leaves.get(&format!("{p}.attn.qkv.w"))),
            leaves.get(&format!("{p}.attn.qkv.b")),
        );
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let attn = self.multi_head_attention(tape, q, k, v, Some(angles), Some(angles));
        let attn = tape.add_row(
            tape.matmul(attn, leaves.get(&format!("{p}.attn.out.w"))),
            leaves.get(&format!("{p}.attn.out.b")),
        );
        let mut x = tape.add(x, tape.mul_row(attn, gate1));

        // Cross-attention to the per-frame timestamp rows (zero-init output
        // projection; not gated by the modulation).
        if let Some(ts) = ts_rows {
            let normed = tape.layer_norm(x, 1e-6);
            let q = tape.add_row(
                tape.matmul(normed, leaves.get(&format!("{p}.xattn.q.w"))),
                leaves.get(&format!("{p}.xattn.q.b")),
            );
            let mut keys = tape.add_row(
                tape.matmul(ts, leaves.get(&format!("{p}.xattn.k.w"))),
                leaves.get(&format!("{p}.xattn.k.b")),
            );
            let mut vals = tape.add_row(
                tape.matmul(ts, leaves.get(&format!("{p}.xattn.v.w"))),
                leaves.get(&format!("{p}.xattn.v.b")),
            );
            if self.config.xattn_kv == XattnKv::Concat {
                let kvis = tape.add_row(
                    tape.matmul(normed, leaves.get(&format!("{p}.xattn.kvis.w"))),
                    leaves.get(&format!("{p}.xattn.kvis.b")),
                );
                let vvis = tape.add_row(
                    tape.matmul(normed, leaves.get(&format!("{p}.xattn.vvis.w"))),
                    leaves.get(&format!("{p}.xattn.vvis.b")),
                );
                keys = tape.concat_rows(&[keys, kvis]);
                vals = tape.concat_rows(&[vals, vvis]);
            }
            let xattn = self.multi_head_attention(tape, q, keys, vals, None, None);
            let xattn = tape.add_row(
                tape.matmul(xattn, leaves.get(&format!("{p}.xattn.out.w"))),
                leaves.get(&format!("{p}.xattn.out.b")),
            );
            x = tape.add(x, xattn);
        }

        // MLP branch.
        let normed = tape.layer_norm(x, 1e-6);
        let scale2p = tape.add(scale2, ones);
        let modded = tape.add_row(tape.mul_row(normed, scale2p), shift2);
        let h = tape.gelu(tape.add_row(
            tape.matmul(modded, leaves.get(&format!("{p}.mlp.fc1.w"))),
            leaves.get(&format!("{p}.mlp.fc1.b")),
        ));
        let m = tape.add_row(
            tape.matmul(h, leaves.get(&format!("{p}.mlp.fc2.w"))),
            leaves.get(&format!("{p}.mlp.fc2.b")),
        );
        tape.add(x, tape.mul_row(m, gate2))
    }

    fn timestamp_rows(
        &self,
        tape: &Tape<T>,
        leaves: &Leaves<'_, T>,
        stamps: &[CalendarTime],
    ) -> Option<Var> {
        if !self.config.use_timestamps {
            return None;
        }
        let indices: Vec<usize> = stamps.iter().map(timestamp_index).collect();
        Some(tape.gather_rows(leaves.get("timestamp_table"), indices))
    }

    /// Build the full forward pass on a tape; returns the predicted velocity
    /// as a `[N * S, c_z]` matrix node.
    pub(crate) fn build_forward(
        &self,
        tape: &Tape<T>,
        leaves: &Leaves<'_, T>,
        ctx: &Array4<T>,
        noisy: &Array4<T>,
        flow_time: f64,
        stamps: &[CalendarTime],
    ) -> Result<Var> {
        let (k, n) = self.check_frames(ctx, noisy)?;
        if stamps.len() != k + n {
            return Err(Error::Data(format!(
                "expected {} frame timestamps, got {}",
                k + n,
                stamps.len()
            )));
        }
        let s = self.config.sites();
        let mut x = self.tokenize(tape, leaves, ctx, noisy)?;
        let ts_rows = self.timestamp_rows(tape, leaves, stamps);
        let angles = self.token_angles(k, n)?;
        for b in 0..self.config.n_blocks {
            x = self.build_block(tape, leaves, x, ts_rows, flow_time, b, &angles);
        }
        let x = tape.layer_norm(x, 1e-6);
        let target_rows = tape.slice_rows(x, k * s, n * s);
        let out = tape.add_row(
            tape.matmul(target_rows, leaves.get("head.w")),
            leaves.get("head.b"),
        );
        Ok(out)
    }

    /// Predicted velocity for the target frames, `[N, c_z, h, w]`.
    ///
    /// Pure function of (params, inputs); no gradients are produced.
    pub fn forward(
        &self,
        ctx: &Array4<T>,
        noisy: &Array4<T>,
        flow_time: f64,
        stamps: &[CalendarTime],
    ) -> Result<Array4<T>> {
        let tape = Tape::new();
        let leaves = Leaves::new(&tape, &self.params);
        let out = self.build_forward(&tape, &leaves, ctx, noisy, flow_time, stamps)?;
        let rows = tape
            .value(out)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-D output");
        Ok(self.rows_to_frames(&rows, noisy.dim().0))
    }

    /// Standalone modulation vectors for inspection and tests.
    pub fn modulation(&self, flow_time: f64, block: usize) -> Result<[Array1<T>; 6]> {
        if block >= self.config.n_blocks {
            return Err(Error::Data(format!("block {block} out of range")));
        }
        let tape = Tape::new();
        let leaves = Leaves::new(&tape, &self.params);
        let vars = self.build_modulation(&tape, &leaves, flow_time, block);
        Ok(std::array::from_fn(|i| {
            tape.value(vars[i])
                .into_dimensionality::<ndarray::Ix1>()
                .expect("1-D modulation vector")
        }))
    }

    /// Run a single block on a raw token matrix (introspection surface used
    /// by the identity-at-init checks).
    pub fn block_forward(
        &self,
        tokens: &Array2<T>,
        stamps: &[CalendarTime],
        k_frames: usize,
        flow_time: f64,
        block: usize,
    ) -> Result<Array2<T>> {
        let s = self.config.sites();
        if tokens.nrows() % s != 0 || tokens.ncols() != self.config.d_model {
            return Err(Error::Data(format!(
                "token matrix {:?} incompatible with config",
                tokens.dim()
            )));
        }
        let n_frames = tokens.nrows() / s;
        if stamps.len() != n_frames || k_frames > n_frames {
            return Err(Error::Data("frame bookkeeping mismatch".into()));
        }
        if block >= self.config.n_blocks {
            return Err(Error::Data(format!("block {block} out of range")));
        }
        let tape = Tape::new();
        let leaves = Leaves::new(&tape, &self.params);
        let x = tape.leaf(tokens.clone().into_dyn());
        let ts_rows = self.timestamp_rows(&tape, &leaves, stamps);
        let angles = self.token_angles(k_frames, n_frames - k_frames)?;
        let out = self.build_block(&tape, &leaves, x, ts_rows, flow_time, block, &angles);
        Ok(tape
            .value(out)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-D tokens"))
    }
}
