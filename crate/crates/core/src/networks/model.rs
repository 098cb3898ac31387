use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{AvailabilityMask, ModelConfig};
use super::layers::{Conv, ConvBlock, Dense, Film, Fusion, LEAKY_SLOPE};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Tensor};

pub const TEMPERATURE_PARAM: &str = "temperature.log_t";

#[derive(Debug, Clone)]
struct AnatEncoder {
    levels: Vec<Vec<ConvBlock>>,
    head: Conv,
}

impl AnatEncoder {
    fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, j: usize) -> Self {
        let mut cin = 1;
        let levels = cfg
            .encoder_widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let blocks = (0..cfg.convs_per_level)
                    .map(|b| {
                        let stride = if l > 0 && b == 0 { 2 } else { 1 };
                        let block = ConvBlock::build(store, rng, &format!("enc_ana.{j}.level{l}.block{b}"), cin, w, stride);
                        cin = w;
                        block
                    })
                    .collect();
                blocks
            })
            .collect();
        let head = Conv::build(store, rng, &format!("enc_ana.{j}.head"), cin, cfg.anat_channels, 1, 1);
        Self { levels, head }
    }

    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for block in self.levels.iter().flatten() {
            h = block.forward(t, h);
        }
        self.head.forward(t, h)
    }
}

#[derive(Debug, Clone)]
struct ModEncoder {
    convs: [Conv; 2],
    hidden: Dense,
    out: Dense,
}

impl ModEncoder {
    fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, j: usize) -> Self {
        let w0 = cfg.encoder_widths[0];
        let w1 = cfg.encoder_widths.get(1).copied().unwrap_or(w0);
        Self {
            convs: [
                Conv::build(store, rng, &format!("enc_mod.{j}.conv0"), 1, w0, 3, 2),
                Conv::build(store, rng, &format!("enc_mod.{j}.conv1"), w0, w1, 3, 2),
            ],
            hidden: Dense::build(store, rng, &format!("enc_mod.{j}.fc0"), w1, cfg.modality_hidden),
            out: Dense::build(store, rng, &format!("enc_mod.{j}.fc1"), cfg.modality_hidden, cfg.modality_dim),
        }
    }

    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(t, h);
            h = t.leaky_relu(h, LEAKY_SLOPE);
        }
        let h = t.global_avg_pool(h);
        let h = self.hidden.forward(t, h);
        let h = t.leaky_relu(h, LEAKY_SLOPE);
        let h = self.out.forward(t, h);
        t.tanh(h)
    }
}

/// Upsampling decoder from the latent grid to full resolution. Stages run
/// from the coarsest level to level 0; every stage but the first upsamples
/// by two before its convolutions.
#[derive(Debug, Clone)]
struct Decoder {
    stages: Vec<Vec<ConvBlock>>,
    films: Option<Vec<Film>>,
    head: Conv,
}

impl Decoder {
    fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, prefix: &str, out: usize, conditioned: bool) -> Self {
        let mut cin = cfg.anat_channels;
        let mut stages = Vec::new();
        let mut films = Vec::new();
        for l in (0..cfg.levels()).rev() {
            let w = cfg.encoder_widths[l];
            let blocks = (0..cfg.decoder_convs_per_level)
                .map(|b| {
                    let block = ConvBlock::build(store, rng, &format!("{prefix}.level{l}.block{b}"), cin, w, 1);
                    cin = w;
                    block
                })
                .collect();
            stages.push(blocks);
            if conditioned {
                films.push(Film::build(store, rng, &format!("{prefix}.level{l}.film"), cfg.modality_dim, w));
            }
        }
        let head = Conv::build(store, rng, &format!("{prefix}.head"), cin, out, 1, 1);
        Self {
            stages,
            films: conditioned.then_some(films),
            head,
        }
    }

    fn forward(&self, t: &mut Tape, z: Var, cond: Option<Var>) -> Var {
        let mut h = z;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                h = t.upsample2x(h);
            }
            for block in blocks {
                h = block.forward(t, h);
            }
            if let (Some(films), Some(c)) = (&self.films, cond) {
                h = films[s].forward(t, h, c);
            }
        }
        self.head.forward(t, h)
    }
}

/// Which optional branches a training forward pass builds. Branches that
/// are not built contribute no tape nodes and hence no gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branches {
    pub modality: bool,
    pub reconstruction: bool,
    pub separate: bool,
}

impl Branches {
    pub const ALL: Branches = Branches {
        modality: true,
        reconstruction: true,
        separate: true,
    };
}

/// Tape handles for every intermediate of one training forward pass.
/// Per-modality lists are indexed by modality.
#[derive(Debug, Clone)]
pub struct TrainingForward {
    /// `(B, C, d, d, d)` per modality.
    pub anat: Vec<Var>,
    /// `(B, C_mod)` per modality.
    pub modality: Option<Vec<Var>>,
    /// `(B, C, d, d, d)`.
    pub fused: Var,
    /// `(B, 1, s, s, s)` per modality.
    pub recon: Option<Vec<Var>>,
    /// `(M·B, K, s, s, s)`, item `j·B + b` is modality `j` of sample `b`.
    pub sep_logits: Option<Var>,
    /// `(B, K, s, s, s)`.
    pub fused_logits: Var,
}

/// The complete network: per-modality anatomical and modality encoders,
/// masked fusion, conditioned reconstruction decoders, the shared
/// single-modality segmentation decoder and the fused segmentation decoder.
#[derive(Debug, Clone)]
pub struct DcSegModel {
    config: ModelConfig,
    params: ParamStore,
    enc_ana: Vec<AnatEncoder>,
    enc_mod: Vec<ModEncoder>,
    fusion: Fusion,
    dec_rec: Vec<Decoder>,
    dec_sep: Decoder,
    dec_fuse: Decoder,
    log_t: ParamId,
}

impl DcSegModel {
    /// Builds a freshly initialized model. Equal `(config, seed)` give
    /// identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = config.modality_count;
        let enc_ana = (0..m).map(|j| AnatEncoder::build(&mut store, &mut rng, &config, j)).collect();
        let enc_mod = (0..m).map(|j| ModEncoder::build(&mut store, &mut rng, &config, j)).collect();
        let fusion = Fusion::build(&mut store, &mut rng, m, config.anat_channels);
        let dec_rec = (0..m)
            .map(|j| Decoder::build(&mut store, &mut rng, &config, &format!("dec_rec.{j}"), 1, true))
            .collect();
        let dec_sep = Decoder::build(&mut store, &mut rng, &config, "dec_sep", config.class_count, false);
        let dec_fuse = Decoder::build(&mut store, &mut rng, &config, "dec_fuse", config.class_count, false);
        let log_t = store.add(
            TEMPERATURE_PARAM,
            Tensor::from_elem(IxDyn(&[1]), config.initial_temperature.ln() as f32),
        );
        Ok(Self {
            config,
            params: store,
            enc_ana,
            enc_mod,
            fusion,
            dec_rec,
            dec_sep,
            dec_fuse,
            log_t,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn temperature_id(&self) -> ParamId {
        self.log_t
    }

    /// Current contrastive temperature `t = exp(log_t)`.
    pub fn temperature(&self) -> f64 {
        (self.params.get(self.log_t)[[0]] as f64).exp()
    }

    /// Parameter-name prefix of each trainable group, in a stable order.
    pub fn parameter_groups(&self) -> Vec<String> {
        let m = self.config.modality_count;
        let mut groups: Vec<String> = (0..m).map(|j| format!("enc_ana.{j}.")).collect();
        groups.extend((0..m).map(|j| format!("enc_mod.{j}.")));
        groups.push("fusion.".into());
        groups.extend((0..m).map(|j| format!("dec_rec.{j}.")));
        groups.push("dec_sep.".into());
        groups.push("dec_fuse.".into());
        groups
    }

    fn check_volume(&self, x: &Tensor, what: &str) -> Result<usize> {
        let s = self.config.patch_side;
        let sh = x.shape();
        if sh.len() != 5 || sh[1] != 1 || sh[2..] != [s, s, s] || sh[0] == 0 {
            return Err(Error::contract(format!(
                "{what}: expected (B, 1, {s}, {s}, {s}) volume, got {sh:?}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("{what}: non-finite input")));
        }
        Ok(sh[0])
    }

    fn check_latent(&self, a: &Tensor, what: &str) -> Result<usize> {
        let (c, d) = (self.config.anat_channels, self.config.latent_side());
        let sh = a.shape();
        if sh.len() != 5 || sh[1] != c || sh[2..] != [d, d, d] || sh[0] == 0 {
            return Err(Error::contract(format!(
                "{what}: expected (B, {c}, {d}, {d}, {d}) feature map, got {sh:?}"
            )));
        }
        Ok(sh[0])
    }

    fn check_modality(&self, j: usize) -> Result<()> {
        if j >= self.config.modality_count {
            return Err(Error::contract(format!(
                "modality index {j} out of range for {} modalities",
                self.config.modality_count
            )));
        }
        Ok(())
    }

    /// Builds every branch needed for training on complete-modality inputs.
    /// `inputs[j]` is `(B, 1, s, s, s)`; `masks[b]` only affects fusion.
    pub fn forward_training(
        &self,
        t: &mut Tape,
        inputs: &[Tensor],
        masks: &[AvailabilityMask],
        branches: Branches,
    ) -> Result<TrainingForward> {
        let m = self.config.modality_count;
        if inputs.len() != m {
            return Err(Error::contract(format!("expected {m} modality inputs, got {}", inputs.len())));
        }
        let batch = self.check_volume(&inputs[0], "forward_training")?;
        for x in inputs {
            if self.check_volume(x, "forward_training")? != batch {
                return Err(Error::contract("modality inputs have different batch sizes"));
            }
        }
        if masks.len() != batch {
            return Err(Error::contract(format!("expected {batch} masks, got {}", masks.len())));
        }
        for mask in masks {
            if mask.len() != m {
                return Err(Error::contract(format!("mask has {} entries, expected {m}", mask.len())));
            }
            mask.check_nonempty()?;
        }

        let xs: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        let anat: Vec<Var> = self.enc_ana.iter().zip(&xs).map(|(e, &x)| e.forward(t, x)).collect();
        let need_mod = branches.modality || branches.reconstruction;
        let modality = need_mod.then(|| self.enc_mod.iter().zip(&xs).map(|(e, &x)| e.forward(t, x)).collect::<Vec<_>>());
        let raw_masks: Vec<Vec<bool>> = masks.iter().map(|m| m.as_slice().to_vec()).collect();
        let fused = self.fusion.forward(t, &anat, &raw_masks);
        let recon = match (&modality, branches.reconstruction) {
            (Some(mods), true) => Some(self.dec_rec.iter().zip(mods).map(|(d, &mj)| d.forward(t, fused, Some(mj))).collect()),
            _ => None,
        };
        let sep_logits = branches.separate.then(|| {
            let stacked = t.concat_batch(&anat);
            self.dec_sep.forward(t, stacked, None)
        });
        let fused_logits = self.dec_fuse.forward(t, fused, None);
        Ok(TrainingForward {
            anat,
            modality,
            fused,
            recon,
            sep_logits,
            fused_logits,
        })
    }

    /// The learnable log-temperature as a tape variable.
    pub fn log_temperature(&self, t: &mut Tape) -> Var {
        t.param(self.log_t)
    }

    fn run<F>(&self, f: F) -> Tensor
    where
        F: FnOnce(&mut Tape) -> Var,
    {
        let mut t = Tape::new(&self.params);
        let out = f(&mut t);
        t.value(out).clone()
    }

    /// `a_j = E_j^ana(x_j)`: `(B, 1, s, s, s)` to `(B, C, d, d, d)`.
    pub fn encode_anatomical(&self, j: usize, x: &Tensor) -> Result<Tensor> {
        self.check_modality(j)?;
        self.check_volume(x, "encode_anatomical")?;
        Ok(self.run(|t| {
            let xi = t.input(x.clone());
            self.enc_ana[j].forward(t, xi)
        }))
    }

    /// `m_j = E_j^mod(x_j)`: `(B, 1, s, s, s)` to `(B, C_mod)`.
    pub fn encode_modality(&self, j: usize, x: &Tensor) -> Result<Tensor> {
        self.check_modality(j)?;
        self.check_volume(x, "encode_modality")?;
        Ok(self.run(|t| {
            let xi = t.input(x.clone());
            self.enc_mod[j].forward(t, xi)
        }))
    }

    /// `z = F(δ ⊙ a)` with one mask for every batch item. Masked-out maps are
    /// never read.
    pub fn fuse(&self, anat: &[Tensor], mask: &AvailabilityMask) -> Result<Tensor> {
        let m = self.config.modality_count;
        if anat.len() != m || mask.len() != m {
            return Err(Error::contract(format!(
                "fuse expects {m} maps and a {m}-entry mask, got {} and {}",
                anat.len(),
                mask.len()
            )));
        }
        mask.check_nonempty()?;
        let batch = self.check_latent(&anat[0], "fuse")?;
        for a in anat {
            if self.check_latent(a, "fuse")? != batch {
                return Err(Error::contract("fuse inputs have different batch sizes"));
            }
        }
        let masks = vec![mask.as_slice().to_vec(); batch];
        Ok(self.run(|t| {
            let vars: Vec<Var> = anat.iter().map(|a| t.input(a.clone())).collect();
            self.fusion.forward(t, &vars, &masks)
        }))
    }

    /// `D_j^rec(z, m_j)`: `(B, C, d, d, d)` and `(B, C_mod)` to `(B, 1, s, s, s)`.
    pub fn decode_reconstruction(&self, j: usize, z: &Tensor, m_j: &Tensor) -> Result<Tensor> {
        self.check_modality(j)?;
        let batch = self.check_latent(z, "decode_reconstruction")?;
        if m_j.shape() != [batch, self.config.modality_dim] {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, self.config.modality_dim],
                actual: m_j.shape().to_vec(),
            });
        }
        Ok(self.run(|t| {
            let zi = t.input(z.clone());
            let mi = t.input(m_j.clone());
            self.dec_rec[j].forward(t, zi, Some(mi))
        }))
    }

    /// `D^sep(a)`: `(B, C, d, d, d)` to `(B, K, s, s, s)`. One parameter set
    /// serves every modality.
    pub fn decode_separate(&self, a: &Tensor) -> Result<Tensor> {
        self.check_latent(a, "decode_separate")?;
        Ok(self.run(|t| {
            let ai = t.input(a.clone());
            self.dec_sep.forward(t, ai, None)
        }))
    }

    /// `D^fuse(z)`: `(B, C, d, d, d)` to `(B, K, s, s, s)`.
    pub fn decode_fused(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z, "decode_fused")?;
        Ok(self.run(|t| {
            let zi = t.input(z.clone());
            self.dec_fuse.forward(t, zi, None)
        }))
    }

    /// Replaces all parameters, e.g. when restoring a checkpoint. Names and
    /// shapes must match this model exactly.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, name, value) in self.params.iter() {
            let other = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.get(other).shape() != value.shape() || other != id {
                return Err(Error::Checkpoint(format!("parameter {name} has wrong shape or position")));
            }
        }
        self.params = store;
        Ok(())
    }
}
