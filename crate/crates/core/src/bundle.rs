//! On-disk model bundle for one trained channel.
//!
//! A bundle directory holds generator.json and discriminator.json (network
//! checkpoints), whitener.json, ecdf.json (per-component sorted references),
//! and manifest.json recording the training configuration and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{IcaGenerator, TrainConfig};
use crate::nn::MlpParams;
use crate::preprocess::{self, EcdfModel, Whitener};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub seed: u64,
    /// Channel index this bundle was trained on.
    pub channel: usize,
    /// Bin count for the downstream uniformity test.
    pub k_bins: usize,
}

#[derive(Serialize, Deserialize)]
struct EcdfJson {
    /// One sorted reference list per generator output component.
    sorted: Vec<Vec<f64>>,
}

/// Everything needed to map a raw measurement window to uniform components.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub generator: IcaGenerator,
    pub discriminator: MlpParams,
    pub ecdfs: Vec<EcdfModel>,
    pub manifest: Manifest,
}

impl ModelBundle {
    /// Raw samples one window needs: whitener lead-in plus the window itself.
    pub fn input_len(&self) -> usize {
        self.generator.whitener.order + self.manifest.config.window
    }

    /// Whiten a raw window, run the generator, and uniformize per component.
    pub fn uniformize_raw(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "window has {} samples, bundle expects {} (lead-in {} + window {})",
                raw.len(),
                self.input_len(),
                self.generator.whitener.order,
                self.manifest.config.window
            )));
        }
        let residuals = preprocess::whiten(&self.generator.whitener, raw)?;
        self.uniformize_residuals(&residuals)
    }

    /// Generator plus ECDF on an already-whitened window.
    pub fn uniformize_residuals(&self, residuals: &[f64]) -> Result<Vec<f64>> {
        let out = self.generator.transform(residuals)?;
        if out.len() != self.ecdfs.len() {
            return Err(Error::Shape(format!(
                "generator emits {} components but bundle has {} ECDFs",
                out.len(),
                self.ecdfs.len()
            )));
        }
        Ok(out
            .iter()
            .zip(&self.ecdfs)
            .map(|(&v, e)| preprocess::apply_ecdf(e, v))
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.generator.net.save_checkpoint(&dir.join("generator.json"))?;
        self.discriminator.save_checkpoint(&dir.join("discriminator.json"))?;
        self.generator.whitener.save(&dir.join("whitener.json"))?;
        let ecdf = EcdfJson { sorted: self.ecdfs.iter().map(|e| e.sorted.clone()).collect() };
        std::fs::write(dir.join("ecdf.json"), serde_json::to_string(&ecdf)?)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let net = MlpParams::load_checkpoint(&dir.join("generator.json"))?;
        let discriminator = MlpParams::load_checkpoint(&dir.join("discriminator.json"))?;
        let whitener = Whitener::load(&dir.join("whitener.json"))?;
        let ecdf: EcdfJson = serde_json::from_str(&std::fs::read_to_string(dir.join("ecdf.json"))?)?;
        let ecdfs: Vec<EcdfModel> = ecdf
            .sorted
            .into_iter()
            .map(|sorted| {
                if sorted.len() < 2 {
                    Err(Error::Data("ECDF reference needs at least 2 samples".into()))
                } else {
                    Ok(EcdfModel { sorted })
                }
            })
            .collect::<Result<_>>()?;
        if net.output_width() != ecdfs.len() {
            return Err(Error::Data(format!(
                "bundle mismatch: generator emits {} components, ecdf.json has {}",
                net.output_width(),
                ecdfs.len()
            )));
        }
        Ok(ModelBundle {
            generator: IcaGenerator { whitener, net },
            discriminator,
            ecdfs,
            manifest,
        })
    }

    /// Bundle directories under `dir` named ch_<i>, for multi-channel models.
    pub fn load_channels(dir: &Path) -> Result<Vec<ModelBundle>> {
        let mut found: Vec<(usize, ModelBundle)> = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(idx) = name.strip_prefix("ch_").and_then(|s| s.parse::<usize>().ok()) {
                found.push((idx, ModelBundle::load(&entry.path())?));
            }
        }
        if found.is_empty() {
            return Err(Error::Data(format!(
                "{}: no ch_<i> bundle directories found",
                dir.display()
            )));
        }
        found.sort_by_key(|(idx, _)| *idx);
        Ok(found.into_iter().map(|(_, b)| b).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan;
    use crate::preprocess::fit_ecdf;

    fn tiny_bundle() -> ModelBundle {
        let config = gan::TrainConfig {
            window: 6,
            components: 3,
            hidden: vec![4],
            seed: 2,
            ..gan::TrainConfig::default()
        };
        let (net, disc) = gan::init(&config, 2).unwrap();
        let whitener = Whitener { order: 2, coeffs: vec![0.4, -0.1], intercept: 0.05 };
        let ecdfs = vec![
            fit_ecdf(&[0.0, 0.5, 1.0, 2.0]).unwrap(),
            fit_ecdf(&[-1.0, 0.0, 1.0]).unwrap(),
            fit_ecdf(&[0.2, 0.4]).unwrap(),
        ];
        ModelBundle {
            generator: IcaGenerator { whitener, net },
            discriminator: disc,
            ecdfs,
            manifest: Manifest { config, seed: 2, channel: 0, k_bins: 9 },
        }
    }

    #[test]
    fn save_load_round_trip() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(back.manifest.channel, 0);
        assert_eq!(back.manifest.k_bins, 9);
        assert_eq!(back.ecdfs.len(), 3);
        let raw: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(bundle.uniformize_raw(&raw).unwrap(), back.uniformize_raw(&raw).unwrap());
    }

    #[test]
    fn uniformize_outputs_are_interior() {
        let bundle = tiny_bundle();
        let raw: Vec<f64> = (0..8).map(|i| (i as f64 * 1.7).cos() * 3.0).collect();
        for u in bundle.uniformize_raw(&raw).unwrap() {
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn wrong_window_length_rejected() {
        let bundle = tiny_bundle();
        assert!(bundle.uniformize_raw(&[0.0; 5]).is_err());
    }

    #[test]
    fn multi_channel_layout() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(&dir.path().join("ch_0")).unwrap();
        bundle.save(&dir.path().join("ch_1")).unwrap();
        let all = ModelBundle::load_channels(dir.path()).unwrap();
        assert_eq!(all.len(), 2);
        assert!(ModelBundle::load_channels(&dir.path().join("nope")).is_err());
    }
}
