//! The hybrid 2D-3D network.
//!
//! * `G_f`: per-B-scan 2D encoder (shared weights, per-slice instance norm).
//! * `G_a`: 3D decoder over the stacked features ending in a row
//!   soft-argmax head that yields one displacement per B-scan.
//! * STM: every feature map entering `G_s` is shifted along the row axis by
//!   `d / 2^level`.
//! * `G_s`: 3D decoder with a surface head (softmax over rows, soft-argmax,
//!   ordering) and a semantic head (K + 1 classes).
//!
//! Tensors are laid out `[N_B, C, rows, N_A]`, so a B-scan is one slice.

pub mod checkpoint;
pub mod ops;

use octsurf_autograd::{he_normal, BoundParams, Float, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::types::{DisplacementVector, OctVolume, SurfaceDistribution, SurfaceSet};
use ops::{soft_argmax, stm_warp, topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// 2D encoder, 3D decoders coupled by the STM.
    Hybrid2d3d,
    /// 3D encoder, STM bypassed.
    Full3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    /// Channels at level 0; doubled per level.
    pub base_channels: usize,
    pub k: usize,
    pub mode: ModelMode,
    /// Decoder levels below this use in-plane kernels instead of 3D ones.
    pub decoder_3d_min_level: usize,
    /// Level at which the alignment decoder stops and its head reads out.
    pub align_head_level: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 32,
            k: 3,
            mode: ModelMode::Hybrid2d3d,
            decoder_3d_min_level: 0,
            align_head_level: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU training on synthetic data.
    pub fn desk() -> Self {
        Self { base_channels: 4, decoder_3d_min_level: 1, align_head_level: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(OctError::Config("model.levels must be >= 2".into()));
        }
        if self.k < 1 {
            return Err(OctError::Config("model.k must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(OctError::Config("model.base_channels must be >= 1".into()));
        }
        if self.align_head_level >= self.levels {
            return Err(OctError::Config("model.align_head_level must be < levels".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of the row and A-scan extents.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input(&self, rows: usize, n_a: usize) -> Result<()> {
        let m = self.divisor();
        if rows % m != 0 || n_a % m != 0 {
            return Err(OctError::Shape(format!(
                "patch rows {rows} and A-scans {n_a} must be divisible by {m} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Where the displacement used by the STM comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum AlignSource {
    /// Predicted by `G_a`.
    Learned,
    /// Supplied externally (pre-aligned); `G_a` is not run.
    Fixed(Vec<f64>),
    /// No alignment: `d = 0`, `G_a` is not run.
    Off,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[N_B]`, zero-mean; `None` when the alignment branch is off.
    pub displacement: Option<Var>,
    /// Displacement used for warping (`[N_B]`), possibly constant.
    pub warp: Option<Var>,
    /// `[N_B, K, R, N_A]`.
    pub surface_logits: Var,
    /// Softmax of `surface_logits` over rows.
    pub q: Var,
    /// Soft-argmax positions before ordering, aligned frame, `[N_B, K, N_A]`.
    /// The position and smoothness losses read these, so a clamped surface
    /// still receives its own gradient.
    pub raw_aligned: Var,
    /// `raw_aligned` in the input frame.
    pub raw: Var,
    /// Ordered surfaces in the aligned frame, `[N_B, K, N_A]`.
    pub pred_aligned: Var,
    /// Ordered surfaces in the input frame, `[N_B, K, N_A]`.
    pub pred: Var,
    /// `[N_B, K + 1, R, N_A]`.
    pub semantic_logits: Var,
}

/// Value-level network output for one volume.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    pub displacement: DisplacementVector,
    /// Surface distribution in the aligned frame.
    pub q: SurfaceDistribution,
    /// `[N_B, K, R, N_A]` surface logits.
    pub surface_logits: Tensor<f32>,
    /// `[N_B, K + 1, R, N_A]` semantic logits.
    pub semantic_logits: Tensor<f32>,
    /// Predicted surfaces in the input frame.
    pub surfaces: SurfaceSet,
    /// Predicted surfaces in the aligned frame.
    pub surfaces_aligned: SurfaceSet,
}

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    cfg: ModelConfig,
    params: ParamStore<T>,
}

struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Float> Builder<'_, T> {
    fn conv(&mut self, name: &str, kd: usize, cin: usize, cout: usize, k: usize) {
        let w = he_normal(&[kd, cout, cin, k, k], kd * cin * k * k, &mut self.rng);
        self.store.push(format!("{name}.weight"), w);
        self.store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.store.push(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        self.store.push(format!("{name}.beta"), Tensor::zeros(&[c]));
    }

    fn conv_norm(&mut self, name: &str, kd: usize, cin: usize, cout: usize) {
        self.conv(name, kd, cin, cout, 3);
        self.norm(&format!("{name}.norm"), cout);
    }
}

/// Per-forward context: graph, bound parameters and name lookup.
struct Ctx<'a, T: Float> {
    g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: &'a BoundParams,
}

impl<T: Float> Ctx<'_, T> {
    fn p(&self, name: &str) -> Var {
        let idx = self.store.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.bound.var(idx)
    }

    fn conv(&mut self, name: &str, x: Var) -> Var {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        self.g.conv(x, w, b)
    }

    fn norm(&mut self, name: &str, x: Var, per_slice: bool) -> Var {
        let (gm, bt) = (self.p(&format!("{name}.gamma")), self.p(&format!("{name}.beta")));
        self.g.instance_norm(x, gm, bt, per_slice)
    }

    fn conv_norm(&mut self, name: &str, x: Var, per_slice: bool) -> Var {
        let h = self.conv(name, x);
        self.norm(&format!("{name}.norm"), h, per_slice)
    }

    fn conv_norm_relu(&mut self, name: &str, x: Var, per_slice: bool) -> Var {
        let h = self.conv_norm(name, x, per_slice);
        self.g.relu(h)
    }

    /// `relu(x + norm(conv(relu(norm(conv(x))))))`.
    fn res_block(&mut self, name: &str, x: Var, per_slice: bool) -> Var {
        let h = self.conv_norm_relu(&format!("{name}.a"), x, per_slice);
        let h = self.conv_norm(&format!("{name}.b"), h, per_slice);
        let s = self.g.add(x, h);
        self.g.relu(s)
    }
}

impl<T: Float> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
        let enc_kd = if cfg.mode == ModelMode::Full3d { 3 } else { 1 };
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
            b.conv_norm(&format!("enc{l}.stem"), enc_kd, cin, c);
            b.conv_norm(&format!("enc{l}.res.a"), enc_kd, c, c);
            b.conv_norm(&format!("enc{l}.res.b"), enc_kd, c, c);
        }
        for (prefix, stop) in [("align", cfg.align_head_level), ("seg", 0)] {
            for l in (stop..cfg.levels - 1).rev() {
                let kd = if l >= cfg.decoder_3d_min_level { 3 } else { 1 };
                let c = cfg.channels(l);
                b.conv_norm(&format!("{prefix}{l}.fuse"), kd, cfg.channels(l + 1) + c, c);
                b.conv_norm(&format!("{prefix}{l}.refine"), kd, c, c);
            }
        }
        b.conv("align.head", 1, cfg.channels(cfg.align_head_level), 1, 1);
        b.conv("seg.surface", 1, cfg.channels(0), cfg.k, 1);
        b.conv("seg.semantic", 1, cfg.channels(0), cfg.k + 1, 1);
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Model::<T>::new(cfg.clone())?;
        if fresh.params.len() != params.len() {
            return Err(OctError::Config(format!(
                "parameter count {} does not match the configuration ({})",
                params.len(),
                fresh.params.len()
            )));
        }
        for (a, b) in fresh.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(OctError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    /// Encoder pyramid: level `l` has shape `[N_B, C_l, R / 2^l, N_A / 2^l]`.
    pub fn encode(&self, g: &mut Graph<T>, bound: &BoundParams, input: Var) -> Vec<Var> {
        let per_slice = self.cfg.mode == ModelMode::Hybrid2d3d;
        let mut ctx = Ctx { g, store: &self.params, bound };
        let mut feats = Vec::with_capacity(self.cfg.levels);
        let mut h = input;
        for l in 0..self.cfg.levels {
            if l > 0 {
                h = ctx.g.max_pool2(h);
            }
            h = ctx.conv_norm_relu(&format!("enc{l}.stem"), h, per_slice);
            h = ctx.res_block(&format!("enc{l}.res"), h, per_slice);
            feats.push(h);
        }
        feats
    }

    fn decode(&self, ctx: &mut Ctx<'_, T>, prefix: &str, feats: &[Var], stop: usize) -> Var {
        let mut h = feats[self.cfg.levels - 1];
        for l in (stop..self.cfg.levels - 1).rev() {
            let up = ctx.g.upsample2(h);
            let cat = ctx.g.concat_channels(&[up, feats[l]]);
            let f = ctx.conv_norm_relu(&format!("{prefix}{l}.fuse"), cat, false);
            let r = ctx.conv_norm(&format!("{prefix}{l}.refine"), f, false);
            let s = ctx.g.add(f, r);
            h = ctx.g.relu(s);
        }
        h
    }

    /// Full forward pass on a `[N_B, 1, R, N_A]` input.
    pub fn forward(&self, g: &mut Graph<T>, bound: &BoundParams, input: Var, align: &AlignSource) -> Result<ForwardVars> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(OctError::Shape(format!("network input must be [N_B, 1, R, N_A], got {shape:?}")));
        }
        let (nb, rows, na) = (shape[0], shape[2], shape[3]);
        if nb < 1 {
            return Err(OctError::Shape("network input has no B-scans".into()));
        }
        self.cfg.check_input(rows, na)?;
        let feats = self.encode(g, bound, input);
        let mut ctx = Ctx { g, store: &self.params, bound };
        let k = self.cfg.k;

        let displacement = match align {
            AlignSource::Learned => {
                let lh = self.cfg.align_head_level;
                let h = self.decode(&mut ctx, "align", &feats, lh);
                let logits = ctx.conv("align.head", h);
                let prob = ctx.g.softmax(logits, 2);
                let loc = soft_argmax(ctx.g, prob);
                let per_scan = ctx.g.mean_axis(loc, 2);
                let per_scan = ctx.g.reshape(per_scan, &[nb]);
                let scaled = ctx.g.scale(per_scan, (1usize << lh) as f64);
                let mean = ctx.g.mean_axis(scaled, 0);
                let neg = ctx.g.scale(mean, -1.0);
                Some(ctx.g.broadcast_add(scaled, neg))
            }
            AlignSource::Fixed(d) => {
                if d.len() != nb {
                    return Err(OctError::Shape(format!("fixed displacement has {} entries, input has {nb} B-scans", d.len())));
                }
                let t = Tensor::from_vec(&[nb], d.iter().map(|&v| T::from_f64_lossy(v)).collect()).unwrap();
                Some(ctx.g.constant(t))
            }
            AlignSource::Off => None,
        };
        let learned = matches!(align, AlignSource::Learned);
        let warp = if self.cfg.mode == ModelMode::Full3d { None } else { displacement };

        let seg_feats: Vec<Var> = match warp {
            Some(d) => feats
                .iter()
                .enumerate()
                .map(|(l, &f)| {
                    let dl = ctx.g.scale(d, 1.0 / (1usize << l) as f64);
                    stm_warp(ctx.g, f, dl)
                })
                .collect(),
            None => feats.clone(),
        };
        let h = self.decode(&mut ctx, "seg", &seg_feats, 0);
        let surface_logits = ctx.conv("seg.surface", h);
        let semantic_logits = ctx.conv("seg.semantic", h);
        let q = ctx.g.softmax(surface_logits, 2);
        let raw = soft_argmax(ctx.g, q);
        let pred_aligned = topology(ctx.g, raw);
        let (raw_input, pred) = match warp {
            Some(d) => {
                let col = ctx.g.reshape(d, &[nb, 1, 1]);
                (ctx.g.broadcast_add(raw, col), ctx.g.broadcast_add(pred_aligned, col))
            }
            None => (raw, pred_aligned),
        };
        debug_assert_eq!(ctx.g.value(pred).shape(), &[nb, k, na]);
        Ok(ForwardVars {
            displacement: if learned { displacement } else { None },
            warp,
            surface_logits,
            q,
            raw_aligned: raw,
            raw: raw_input,
            pred_aligned,
            pred,
            semantic_logits,
        })
    }

    /// Inference on a whole volume. Rows and A-scans are edge-padded to the
    /// required multiple and the outputs cropped back.
    pub fn predict(&self, v: &OctVolume, align: &AlignSource) -> Result<NetworkOutput> {
        let (na, nb, nr) = v.shape();
        let m = self.cfg.divisor();
        let (pr, pa) = (nr.div_ceil(m) * m, na.div_ceil(m) * m);
        let padded = if (pr, pa) == (nr, na) {
            v.clone()
        } else {
            OctVolume::from_fn(v.id(), pa, nb, pr, v.spacing(), |a, b, r| v.get(a.min(na - 1), b, r.min(nr - 1)))?
        };
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let input = g.constant(padded.to_network_tensor::<T>());
        let out = self.forward(&mut g, &bound, input, align)?;
        let k = self.cfg.k;
        let d = match out.warp.or(out.displacement) {
            Some(dv) => g.value(dv).data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; nb],
        };
        let displacement = DisplacementVector::new(d)?;
        let crop4 = |t: &Tensor<T>, c: usize| -> Tensor<f32> {
            Tensor::from_fn(&[nb, c, nr, na], |i| {
                let a = i % na;
                let r = (i / na) % nr;
                let ch = (i / (na * nr)) % c;
                let b = i / (na * nr * c);
                t.data()[((b * c + ch) * pr + r) * pa + a].as_f64() as f32
            })
        };
        let surface_logits = crop4(g.value(out.surface_logits), k);
        let semantic_logits = crop4(g.value(out.semantic_logits), k + 1);
        let mut qt = crop4(g.value(out.q), k);
        // renormalise after cropping padded rows
        for b in 0..nb {
            for ch in 0..k {
                for a in 0..na {
                    let idx = |r: usize| ((b * k + ch) * nr + r) * na + a;
                    let s: f32 = (0..nr).map(|r| qt.data()[idx(r)]).sum();
                    if s > 0.0 {
                        for r in 0..nr {
                            qt.data_mut()[idx(r)] /= s;
                        }
                    }
                }
            }
        }
        let q = SurfaceDistribution::from_network_tensor(&qt)?;
        let to_set = |t: &Tensor<T>| -> Result<SurfaceSet> {
            SurfaceSet::from_fn(SurfaceSet::default_names(k), nb, na, |kk, b, a| {
                t.data()[(b * k + kk) * pa + a].as_f64().clamp(1.0, nr as f64)
            })
        };
        let surfaces = to_set(g.value(out.pred))?;
        let surfaces_aligned = to_set(g.value(out.pred_aligned))?;
        Ok(NetworkOutput { displacement, q, surface_logits, semantic_logits, surfaces, surfaces_aligned })
    }
}

/// `[N_B, K, N_A]` network surfaces from a `SurfaceSet` (`[K, N_B, N_A]`).
pub fn surfaces_to_network<T: Float>(s: &SurfaceSet) -> Tensor<T> {
    let (k, nb, na) = (s.k(), s.n_b(), s.n_a());
    Tensor::from_fn(&[nb, k, na], |i| {
        let a = i % na;
        let kk = (i / na) % k;
        let b = i / (na * k);
        T::from_f64_lossy(s.at(kk, b, a))
    })
}

/// Inverse of [`surfaces_to_network`].
pub fn surfaces_from_network<T: Float>(names: Vec<String>, t: &Tensor<T>) -> Result<SurfaceSet> {
    let s = t.shape();
    if s.len() != 3 || s[1] != names.len() {
        return Err(OctError::Shape(format!("expected [N_B, {}, N_A], got {s:?}", names.len())));
    }
    let (k, na) = (s[1], s[2]);
    SurfaceSet::from_fn(names, s[0], na, |kk, b, a| t.data()[(b * k + kk) * na + a].as_f64())
}
