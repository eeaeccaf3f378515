//! End-to-end configuration tying corpus, decoder, GAN and baseline
//! together under one root seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{build_pca, evaluate_comparison, ComparisonReport, PcaModel, Ridge};
use crate::decoder::{DecoderConfig, EpochLog, PairSource, S2dDecoder, S2dTrainConfig, S2dTrainLog};
use crate::error::{Error, Result};
use crate::gan::{motion_samples, reference_point, GanConfig, GanEpochLog, GanTrainLog, MotionGan, MotionSample};
use crate::curve::MotionNormalization;
use crate::synth::{Corpus, CorpusSpec, SplitSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own named stream from it.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub split: SplitSpec,
    /// Expected landmark count, frame count and class count, checked against
    /// the corpus when given.
    pub k: Option<usize>,
    pub frames: Option<usize>,
    pub classes: Option<usize>,
    /// Expected mesh topology hash, checked when given.
    pub topology_hash: Option<String>,
    pub decoder: DecoderConfig,
    pub s2d: S2dTrainConfig,
    /// Frames of each training sequence used as decoder examples
    /// (`None` = all).
    pub s2d_frames: Option<Vec<usize>>,
    pub validation_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
    pub gan: GanConfig,
    /// Corpus classes the GAN learns, in label order (`None` = all).
    pub gan_classes: Option<Vec<usize>>,
    /// Identities whose sequences feed the GAN (`None` = all).
    pub gan_identities: Option<usize>,
    pub motion_normalization: MotionNormalization,
    pub pca_components: usize,
    pub pca_frames: Vec<usize>,
    /// Ridge relative to the largest eigenvalue of the restricted system.
    pub relative_ridge: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus: CorpusSpec::default(),
            split: SplitSpec::default(),
            k: None,
            frames: None,
            classes: None,
            topology_hash: None,
            decoder: DecoderConfig::default(),
            s2d: S2dTrainConfig::default(),
            s2d_frames: None,
            validation_frames: vec![5, 15, 29],
            test_frames: vec![8, 16, 22, 29],
            gan: GanConfig::default(),
            gan_classes: None,
            gan_identities: None,
            motion_normalization: MotionNormalization::CenterUnitNorm,
            pca_components: 220,
            pca_frames: vec![15, 29],
            relative_ridge: crate::baseline::DEFAULT_RELATIVE_RIDGE,
        }
    }
}

impl PipelineConfig {
    /// Budget that trains on one laptop core in minutes: the decoder sees
    /// 800 random pairs per epoch for 40 epochs, and a narrower GAN learns
    /// two classes.
    pub fn desk() -> Self {
        PipelineConfig {
            s2d: S2dTrainConfig {
                epochs: 40,
                pairs_per_epoch: Some(800),
                ..S2dTrainConfig::default()
            },
            gan: GanConfig {
                noise: 32,
                generator_hidden: vec![128; 3],
                critic_hidden: vec![128; 3],
                batch: 64,
                epochs: 80,
                ..GanConfig::default()
            },
            gan_classes: Some(vec![0, 1]),
            ..PipelineConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let frames = self.corpus.face.frames;
        for (name, list) in [
            ("validation_frames", &self.validation_frames),
            ("test_frames", &self.test_frames),
            ("pca_frames", &self.pca_frames),
        ] {
            if list.is_empty() || list.iter().any(|&t| t >= frames) {
                return Err(Error::Config(format!("{name} must be non-empty frame indices below {frames}")));
            }
        }
        if let Some(f) = &self.s2d_frames {
            if f.is_empty() || f.iter().any(|&t| t >= frames) {
                return Err(Error::Config(format!("s2d_frames must be frame indices below {frames}")));
            }
        }
        if self.decoder.k != crate::synth::LANDMARK_COUNT {
            return Err(Error::Config(format!(
                "decoder k = {} but the synthetic face has {} landmarks",
                self.decoder.k,
                crate::synth::LANDMARK_COUNT
            )));
        }
        let checks = [
            ("k", self.k, crate::synth::LANDMARK_COUNT),
            ("frames", self.frames, frames),
            ("classes", self.classes, self.corpus.face.classes),
        ];
        for (name, want, have) in checks {
            if let Some(w) = want {
                if w != have {
                    return Err(Error::Config(format!("{name} = {w} but the corpus has {have}")));
                }
            }
        }
        if let Some(c) = self.gan_classes.as_ref().and_then(|g| g.iter().find(|&&c| c >= self.corpus.face.classes)) {
            return Err(Error::Config(format!("GAN class {c} does not exist")));
        }
        if !(self.relative_ridge >= 0.0) {
            return Err(Error::Config("relative_ridge must be >= 0".into()));
        }
        Ok(())
    }

    /// Corpus generated from the root seed, with the topology hash checked.
    pub fn corpus(&self) -> Result<Corpus> {
        let spec = CorpusSpec {
            seed: self.seed,
            ..self.corpus.clone()
        };
        let corpus = Corpus::generate(&spec)?;
        if let Some(h) = &self.topology_hash {
            let have = corpus.face.topology().hash();
            if *h != have {
                return Err(Error::Topology(format!("configured topology hash {h} but corpus has {have}")));
            }
        }
        Ok(corpus)
    }

    fn train_frames(&self) -> Vec<usize> {
        self.s2d_frames
            .clone()
            .unwrap_or_else(|| (0..self.corpus.face.frames).collect())
    }

    /// Untrained decoder on the corpus template neutral.
    pub fn new_decoder(&self, corpus: &Corpus) -> Result<S2dDecoder> {
        S2dDecoder::new(self.decoder.clone(), &corpus.template_neutral(), self.seed)
    }

    pub fn s2d_config(&self) -> S2dTrainConfig {
        S2dTrainConfig {
            seed: self.seed,
            ..self.s2d.clone()
        }
    }

    pub fn train_decoder(
        &self,
        corpus: &Corpus,
        net: &mut S2dDecoder,
        on_epoch: impl FnMut(&EpochLog),
    ) -> Result<S2dTrainLog> {
        let split = corpus.split(&self.split)?;
        let train = corpus.pairs(&split.train, &self.train_frames())?;
        let val = corpus.pairs(&split.validation, &self.validation_frames)?;
        net.train(&train, &val, &self.s2d_config(), on_epoch)
    }

    /// PCA over the training displacements at `pca_frames`.
    pub fn fit_pca(&self, corpus: &Corpus) -> Result<PcaModel> {
        let split = corpus.split(&self.split)?;
        let pairs = corpus.pairs(&split.train, &self.pca_frames)?;
        let fields = (0..pairs.len())
            .map(|i| pairs.pair(i)?.displacement())
            .collect::<Result<Vec<_>>>()?;
        build_pca(&fields, self.pca_components)
    }

    /// Report over both test splits. PCA rows use every preset that fits in
    /// `pca` plus its full size.
    pub fn evaluate(&self, corpus: &Corpus, decoder: Option<&S2dDecoder>, pca: Option<&PcaModel>) -> Result<ComparisonReport> {
        let split = corpus.split(&self.split)?;
        let mut models = Vec::new();
        if let Some(p) = pca {
            let mut sizes: Vec<usize> = crate::baseline::PRESETS
                .iter()
                .copied()
                .filter(|&n| n <= p.n_components())
                .collect();
            if !sizes.contains(&p.n_components()) {
                sizes.push(p.n_components());
            }
            for n in sizes {
                models.push((format!("pca-{n}"), p.truncated(n)?));
            }
        }
        let mut report = ComparisonReport::default();
        let ridge = Ridge::Relative(self.relative_ridge);
        for (name, seqs) in [("expression", &split.expression_test), ("identity", &split.identity_test)] {
            if seqs.is_empty() {
                continue;
            }
            let test = corpus.pairs(seqs, &self.test_frames)?;
            evaluate_comparison(&mut report, name, &test, decoder, &models, ridge)?;
        }
        Ok(report)
    }

    /// Corpus classes the GAN is trained on, in label order.
    pub fn gan_classes(&self) -> Vec<usize> {
        self.gan_classes
            .clone()
            .unwrap_or_else(|| (0..self.corpus.face.classes).collect())
    }

    /// Normalized SRVF sphere points of the selected sequences, labeled by
    /// their position in [`PipelineConfig::gan_classes`].
    pub fn gan_samples(&self, corpus: &Corpus) -> Result<Vec<MotionSample>> {
        let classes = self.gan_classes();
        let ids = self.gan_identities.unwrap_or(corpus.identities.len());
        let mut seqs = Vec::new();
        for (s, seq) in corpus.sequences.iter().enumerate() {
            if corpus.identity_of(s) >= ids {
                continue;
            }
            if let Some(label) = classes.iter().position(|&c| c == seq.class) {
                seqs.push((seq.landmark_sequence()?, label));
            }
        }
        motion_samples(&seqs, self.motion_normalization)
    }

    /// GAN with the reference point and class amplitudes taken from `samples`.
    pub fn new_gan(&self, samples: &[MotionSample]) -> Result<MotionGan> {
        let classes = self.gan_classes().len();
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in samples {
            let e = sums.entry(s.class).or_default();
            e.0 += s.point.scale();
            e.1 += 1;
        }
        let scales = (0..classes)
            .map(|c| {
                sums.get(&c)
                    .map(|(t, n)| t / *n as f64)
                    .ok_or_else(|| Error::InvalidInput(format!("no training motion for GAN label {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = GanConfig {
            classes,
            seed: self.seed,
            ..self.gan.clone()
        };
        MotionGan::new(cfg, reference_point(samples)?, scales)
    }

    pub fn train_gan(&self, corpus: &Corpus, on_epoch: impl FnMut(&GanEpochLog)) -> Result<(MotionGan, GanTrainLog)> {
        let samples = self.gan_samples(corpus)?;
        let mut gan = self.new_gan(&samples)?;
        let log = gan.train(&samples, on_epoch)?;
        Ok((gan, log))
    }
}
