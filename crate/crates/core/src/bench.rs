//! The desk-scale synthetic benchmark behind the variant comparison.
//!
//! One seed drives the dataset, initialization, episode streams and
//! evaluation, so a `(Benchmark, seed)` pair names a run exactly.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, GridSpec};
use crate::data::{generate_synthetic_dataset, Dataset, SyntheticSpec};
use crate::episodes::EpisodeConfig;
use crate::error::Result;
use crate::model::{HeadInit, ModelConfig, Variant};
use crate::training::{run_ablation, AblationConfig, AblationRow, Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Benchmark {
    pub data: SyntheticSpec,
    pub ablation: AblationConfig,
}

impl Default for Benchmark {
    fn default() -> Self {
        Benchmark::desk()
    }
}

impl Benchmark {
    /// 64/16/20 classes of cluttered 32 px glyph images, a 4x4 patch grid,
    /// 240 meta-training episodes per variant and 600 evaluation episodes.
    /// Roughly two minutes per patch-based variant on one core.
    pub fn desk() -> Self {
        let data = SyntheticSpec {
            side: 32,
            train_classes: 64,
            val_classes: 16,
            test_classes: 20,
            images_per_class: 30,
            ..SyntheticSpec::default()
        };
        let model = ModelConfig {
            backbone: BackboneConfig {
                widths: vec![16, 32, 32],
                encoder_side: 16,
                ..BackboneConfig::default()
            },
            grid: GridSpec::new(vec![4], 1.0).expect("static grid"),
            head_init: HeadInit::Identity,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            schedule: Schedule {
                learning_rate: 3e-3,
                decay_every_epochs: 3,
                epochs: 6,
                ..Schedule::default()
            },
            episodes_per_epoch: 40,
            episode: EpisodeConfig {
                b_query: 5,
                ..EpisodeConfig::default()
            },
        };
        Benchmark {
            data,
            ablation: AblationConfig {
                model,
                pretrain: None,
                train,
                eval: EpisodeConfig::default(),
                seed: 1,
            },
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.ablation.seed = seed;
        self
    }

    pub fn dataset(&self) -> Result<Dataset> {
        generate_synthetic_dataset(&self.data, self.ablation.seed)
    }

    pub fn run(&self, variants: &[Variant]) -> Result<Vec<AblationRow>> {
        run_ablation(&self.dataset()?, variants, &self.ablation)
    }
}
