//! The full network for every training method, plus checkpoint I/O.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::critic::{Critic, CriticConfig};
use crate::decoders::{probabilities, ImageDecoder, ReconOutput, SegDecoder, SpadeDecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::io::{self, Array};
use crate::nn::{Mode, Module, Param};
use crate::tensor::Tensor;
use crate::volume::{Grid3, Mask, Volume};

/// Training method: the disentangler or one of the ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Disentangler,
    SegOnly,
    SegRecon,
    SegReconHealthy,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Disentangler, Method::SegOnly, Method::SegRecon, Method::SegReconHealthy];

    pub fn has_image_decoder(self) -> bool {
        self != Method::SegOnly
    }

    /// Dual bottleneck, SPADE image decoder and critic.
    pub fn is_disentangler(self) -> bool {
        self == Method::Disentangler
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Disentangler => "disentangler",
            Method::SegOnly => "seg_only",
            Method::SegRecon => "seg_recon",
            Method::SegReconHealthy => "seg_recon_healthy",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    pub grid_size: usize,
    pub encoder: EncoderConfig,
    pub image_decoder: SpadeDecoderConfig,
    pub critic: CriticConfig,
    /// Let reconstruction gradients reach the segmentation decoder through
    /// the predicted mask.
    pub mask_grad: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder.check_input([self.grid_size; 3])?;
        self.image_decoder.validate(&self.encoder)?;
        self.critic.validate()
    }

    pub fn latent_len(&self) -> usize {
        let b = self.encoder.bottleneck_side(self.grid_size);
        self.encoder.latent_channels * b * b * b
    }
}

/// Outputs of one inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub probs: Mask,
    /// Decoded with the predicted mask.
    pub recon: Option<ReconOutput>,
    /// Decoded with the empty mask.
    pub pseudo_healthy: Option<ReconOutput>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub seg: SegDecoder,
    pub img: Option<ImageDecoder>,
    pub critic: Option<Critic>,
}

const CONFIG_KEY: &str = "__config__";

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.method;
        let seed = cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D);
        let encoder = Encoder::new(&cfg.encoder, m.is_disentangler(), seed ^ 1)?;
        let seg = SegDecoder::new(&cfg.encoder, seed ^ 2)?;
        let img = if m.has_image_decoder() {
            Some(ImageDecoder::new(&cfg.encoder, &cfg.image_decoder, m.is_disentangler(), seed ^ 3)?)
        } else {
            None
        };
        let critic = if m.is_disentangler() { Some(Critic::new(cfg.latent_len(), &cfg.critic, seed ^ 4)?) } else { None };
        Ok(Model { cfg: cfg.clone(), encoder, seg, img, critic })
    }

    /// Encoder and both decoders.
    pub fn visit_generator(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit("encoder", f);
        self.seg.visit("seg_dec", f);
        if let Some(img) = self.img.as_mut() {
            img.visit("img_dec", f);
        }
    }

    pub fn visit_critic(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(c) = self.critic.as_mut() {
            c.visit("critic", f);
        }
    }

    /// Name → values of every parameter and buffer.
    pub fn snapshot(&mut self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    fn check_volume(&self, v: &Grid3) -> Result<()> {
        if v.dims() != [self.cfg.grid_size; 3] {
            return Err(Error::Config(format!(
                "model expects {}³ volumes, got {:?}",
                self.cfg.grid_size,
                v.dims()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass on one volume.
    pub fn infer(&mut self, volume: &Volume) -> Result<Inference> {
        self.check_volume(volume)?;
        let x = volume.to_tensor();
        let (lat, skips) = self.encoder.forward(&x, Mode::Eval)?;
        let logits = self.seg.forward(&lat.z_d, &skips, Mode::Eval)?;
        let probs_t = probabilities(&logits);
        let probs = Mask(Grid3::from_tensor(&probs_t, 0, 0));
        let (recon, pseudo_healthy) = match self.img.as_mut() {
            None => (None, None),
            Some(img) if img.is_spade() => {
                let r = img.forward(&lat.z_h, &skips, Some(&probs_t), Mode::Eval)?;
                let empty = Tensor::zeros(probs_t.shape());
                let p = img.forward(&lat.z_h, &skips, Some(&empty), Mode::Eval)?;
                let r = ReconOutput::new(Volume(Grid3::from_tensor(&r, 0, 0)), &probs);
                let p = ReconOutput::new(Volume(Grid3::from_tensor(&p, 0, 0)), &Mask::empty(probs.dims()));
                (Some(r), Some(p))
            }
            Some(img) => {
                let r = img.forward(&lat.z_h, &skips, None, Mode::Eval)?;
                (Some(ReconOutput::new(Volume(Grid3::from_tensor(&r, 0, 0)), &probs)), None)
            }
        };
        Ok(Inference { probs, recon, pseudo_healthy })
    }

    /// Lesion probabilities only.
    pub fn predict(&mut self, volume: &Volume) -> Result<Mask> {
        self.check_volume(volume)?;
        let (lat, skips) = self.encoder.forward(&volume.to_tensor(), Mode::Eval)?;
        let logits = self.seg.forward(&lat.z_d, &skips, Mode::Eval)?;
        Ok(Mask(Grid3::from_tensor(&probabilities(&logits), 0, 0)))
    }

    pub fn to_checkpoint_bytes(&mut self) -> Result<Vec<u8>> {
        let cfg = toml::to_string(&self.cfg).map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        let mut entries = vec![(
            CONFIG_KEY.to_string(),
            Array::U8 { shape: [cfg.len() as u32, 1, 1], data: cfg.into_bytes() },
        )];
        self.visit("", &mut |name, p| {
            entries.push((name.to_string(), Array::F32 { shape: [p.len() as u32, 1, 1], data: p.value.clone() }));
        });
        io::encode_table(&entries)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_checkpoint_bytes()?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = io::decode_table(bytes)?;
        let mut map: std::collections::HashMap<String, Array> = entries.into_iter().collect();
        let cfg = match map.remove(CONFIG_KEY) {
            Some(Array::U8 { data, .. }) => {
                let text = String::from_utf8(data).map_err(|_| Error::Format("config is not UTF-8".into()))?;
                toml::from_str::<ModelConfig>(&text).map_err(|e| Error::Format(format!("config: {e}")))?
            }
            _ => return Err(Error::Format("checkpoint has no config entry".into())),
        };
        let mut model = Model::new(&cfg)?;
        let mut problem = None;
        model.visit("", &mut |name, p| match map.remove(name) {
            Some(Array::F32 { data, .. }) if data.len() == p.len() => p.value = data,
            Some(_) => problem = problem.take().or(Some(format!("entry {name} has the wrong type or size"))),
            None => problem = problem.take().or(Some(format!("missing entry {name}"))),
        });
        if let Some(msg) = problem {
            return Err(Error::Format(msg));
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected entry {extra}")));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_bytes(path)
            .and_then(|bytes| Model::from_checkpoint_bytes(&bytes))
            .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
    }
}

impl Module for Model {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        debug_assert!(prefix.is_empty());
        self.visit_generator(f);
        self.visit_critic(f);
    }
}
