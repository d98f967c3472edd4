//! The seven segmentation variants and the [`Network`] wrapper that owns
//! their weights.

pub mod enet;
pub mod topformer;
pub mod unet;
pub mod unext;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::archive::{self, Archive, ArchiveMeta};
use crate::nn::params::{Builder, ParamKind, ParamStore};

pub use enet::ENet;
pub use topformer::{TopFormer, TopFormerPlan};
pub use unet::UNet;
pub use unext::{UNeXt, UNeXtPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "UNet")]
    UNet,
    #[serde(rename = "ENet")]
    ENet,
    #[serde(rename = "UNeXt-S")]
    UNeXtS,
    #[serde(rename = "UNeXt-B")]
    UNeXtB,
    #[serde(rename = "TopFormer-T")]
    TopFormerT,
    #[serde(rename = "TopFormer-S")]
    TopFormerS,
    #[serde(rename = "TopFormer-B")]
    TopFormerB,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::UNet,
        ModelVariant::ENet,
        ModelVariant::UNeXtB,
        ModelVariant::UNeXtS,
        ModelVariant::TopFormerB,
        ModelVariant::TopFormerS,
        ModelVariant::TopFormerT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::UNet => "UNet",
            ModelVariant::ENet => "ENet",
            ModelVariant::UNeXtS => "UNeXt-S",
            ModelVariant::UNeXtB => "UNeXt-B",
            ModelVariant::TopFormerT => "TopFormer-T",
            ModelVariant::TopFormerS => "TopFormer-S",
            ModelVariant::TopFormerB => "TopFormer-B",
        }
    }

    /// Published parameter budget with a single output channel.
    pub fn reference_params(self) -> usize {
        match self {
            ModelVariant::UNet => 31_030_000,
            ModelVariant::ENet => 350_000,
            ModelVariant::UNeXtB => 1_470_000,
            ModelVariant::UNeXtS => 250_000,
            ModelVariant::TopFormerB => 5_030_000,
            ModelVariant::TopFormerS => 3_010_000,
            ModelVariant::TopFormerT => 1_390_000,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name().replace('-', "").to_lowercase() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Arch {
    UNet(UNet),
    ENet(ENet),
    UNeXt(UNeXt),
    TopFormer(TopFormer),
}

/// Spatial sizes must survive five halvings.
pub const SPATIAL_MULTIPLE: usize = 32;
pub const MIN_SPATIAL: usize = 64;

/// A built variant together with its weights.
///
/// In eval mode the network is immutable and may be shared across threads;
/// forward passes are deterministic.
#[derive(Clone, Debug)]
pub struct Network {
    variant: ModelVariant,
    seed: u64,
    arch: Arch,
    params: ParamStore,
    mode: Mode,
}

/// Builds `variant` with weights drawn from `seed`, in eval mode.
pub fn build_model(variant: ModelVariant, seed: u64) -> Result<Network> {
    Network::build(variant, seed, DType::F32)
}

impl Network {
    pub fn build(variant: ModelVariant, seed: u64, dtype: DType) -> Result<Self> {
        let mut b = Builder::new(seed, dtype);
        let arch = match variant {
            ModelVariant::UNet => Arch::UNet(UNet::new(&mut b, 64)?),
            ModelVariant::ENet => Arch::ENet(ENet::new(&mut b)?),
            ModelVariant::UNeXtB => Arch::UNeXt(UNeXt::new(&mut b, UNeXtPlan::BASE)?),
            ModelVariant::UNeXtS => Arch::UNeXt(UNeXt::new(&mut b, UNeXtPlan::SMALL)?),
            ModelVariant::TopFormerT => Arch::TopFormer(TopFormer::new(&mut b, TopFormerPlan::TINY)?),
            ModelVariant::TopFormerS => Arch::TopFormer(TopFormer::new(&mut b, TopFormerPlan::SMALL)?),
            ModelVariant::TopFormerB => Arch::TopFormer(TopFormer::new(&mut b, TopFormerPlan::BASE)?),
        };
        Ok(Self { variant, seed, arch, params: b.finish(), mode: Mode::Eval })
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.trainable().map(|p| p.var.clone()).collect()
    }

    /// Copies of the running statistics, for probing a training-mode
    /// forward pass without disturbing them.
    pub fn snapshot_buffers(&self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Buffer)
            .map(|p| Ok(p.var.as_tensor().copy()?))
            .collect()
    }

    pub fn restore_buffers(&self, saved: &[Tensor]) -> Result<()> {
        let buffers: Vec<_> = self.params.iter().filter(|p| p.kind == ParamKind::Buffer).collect();
        if buffers.len() != saved.len() {
            return Err(Error::Contract(format!("expected {} buffers, got {}", buffers.len(), saved.len())));
        }
        for (p, t) in buffers.into_iter().zip(saved) {
            p.var.set(t)?;
        }
        Ok(())
    }

    /// Trainable scalars, including normalization affine parameters but not
    /// running statistics.
    pub fn count_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    /// Raw logits `(N, 1, H, W)` for a normalized `(N, 3, H, W)` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = batch
            .dims4()
            .map_err(|_| Error::Shape(format!("expected an (N, 3, H, W) batch, got {:?}", batch.dims())))?;
        if n == 0 || c != 3 {
            return Err(Error::Shape(format!("expected an (N >= 1, 3, H, W) batch, got {:?}", batch.dims())));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 || h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} must be a multiple of {SPATIAL_MULTIPLE} and at least {MIN_SPATIAL}"
            )));
        }
        let x = batch.to_dtype(self.params.iter().next().map(|p| p.var.dtype()).unwrap_or(DType::F32))?;
        let train = self.mode == Mode::Train;
        match &self.arch {
            Arch::UNet(m) => m.forward(&x, train),
            Arch::ENet(m) => m.forward(&x, train),
            Arch::UNeXt(m) => m.forward(&x, train),
            Arch::TopFormer(m) => m.forward(&x, train),
        }
    }

    pub fn metadata(&self) -> ArchiveMeta {
        ArchiveMeta { variant: self.variant.name().to_string(), seed: self.seed, provenance: Default::default() }
    }

    pub fn save_weights(&self, provenance: &ArchiveMeta) -> Result<Vec<u8>> {
        archive::encode(&self.params, provenance)
    }

    pub fn save_weights_file(&self, path: &Path, meta: &ArchiveMeta) -> Result<()> {
        archive::write_file(path, &self.params, meta)
    }

    /// Loads every tensor (including running statistics) from an archive.
    /// Nothing is modified unless the whole archive matches.
    pub fn load_weights(&mut self, archive: &Archive) -> Result<()> {
        if !archive.metadata.variant.is_empty() {
            let v: ModelVariant = archive.metadata.variant.parse()?;
            if v != self.variant {
                return Err(Error::ArchiveMismatch(format!(
                    "archive holds {} weights, network is {}",
                    v, self.variant
                )));
            }
        }
        archive::apply(&self.params, archive)
    }

    pub fn load_weights_bytes(&mut self, bytes: &[u8]) -> Result<ArchiveMeta> {
        let a = archive::decode(bytes)?;
        self.load_weights(&a)?;
        Ok(a.metadata)
    }

    /// Builds the archived variant and loads its weights.
    pub fn from_archive_file(path: &Path) -> Result<(Self, ArchiveMeta)> {
        let a = archive::read_file(path)?;
        let variant: ModelVariant = a.metadata.variant.parse()?;
        let mut net = Network::build(variant, a.metadata.seed, DType::F32)?;
        net.load_weights(&a)?;
        Ok((net, a.metadata))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        }
        assert_eq!("unext_s".parse::<ModelVariant>().unwrap(), ModelVariant::UNeXtS);
        assert!("SegFormer".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn buffers_round_trip() {
        let net = build_model(ModelVariant::UNeXtS, 0).unwrap();
        let saved = net.snapshot_buffers().unwrap();
        assert!(!saved.is_empty());
        let p = net.params().iter().find(|p| p.kind == ParamKind::Buffer).unwrap();
        p.var.set(&p.var.as_tensor().affine(0.0, 3.0).unwrap()).unwrap();
        net.restore_buffers(&saved).unwrap();
        assert_eq!(
            p.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            saved[0].flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(net.restore_buffers(&saved[1..]).is_err());
    }
}
