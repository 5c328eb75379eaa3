//! Every diagnostic for one model, on the data its configuration defines.

use super::{
    cca_matrix, derived_seed, embed, eval_splits, grad_alignment, invariance_score, knn_accuracy, linear_probe,
    p_equivariance, r_equivariance, reg_grid, routing_stats, view_triples, CcaMatrix, EvalSplits, ProbeResult,
    RoutingReport, Tap, Triples, PROBE_GRID_SIZE, PROBE_REG_RANGE,
};
use crate::data::{generate_dataset, param_stats, Dataset, Image, ParamStats};
use crate::error::Result;
use crate::models::Model;
use crate::trainer::{build_batch, RunOutput, TrainBatch, TrainConfig, PARAM_STATS_SAMPLES};

/// Batches drawn from the test split for gradient alignment.
pub const ALIGN_BATCHES: usize = 16;

const TAG_TRIPLES_TRAIN: u64 = 0x51;
const TAG_TRIPLES_TEST: u64 = 0x52;
const TAG_TRIPLES_PAIR: u64 = 0x53;
const TAG_ALIGN: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivarianceScores {
    /// Higher is better.
    pub r: f64,
    /// Held-out MSE; lower is better.
    pub p: f64,
    /// Mean cosine between two independent views of each test image.
    pub invariance: f64,
}

/// A frozen model together with its training set, held-out splits and
/// augmentation statistics, all regenerated from the configuration.
#[derive(Clone, Debug)]
pub struct EvalSession {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub train: Dataset,
    pub splits: EvalSplits,
    pub stats: ParamStats,
}

fn labels(d: &Dataset) -> Vec<usize> {
    d.labels.iter().map(|&l| l as usize).collect()
}

impl EvalSession {
    pub fn new(cfg: &TrainConfig, model: Model<f32>) -> Result<Self> {
        cfg.validate()?;
        let stats = param_stats(&cfg.aug_config(), PARAM_STATS_SAMPLES, cfg.seed)?;
        Ok(EvalSession {
            cfg: cfg.clone(),
            model,
            train: generate_dataset(&cfg.dataset_spec())?,
            splits: eval_splits(&cfg.dataset_spec())?,
            stats,
        })
    }

    pub fn from_run(cfg: &TrainConfig, run: RunOutput) -> Result<Self> {
        Ok(EvalSession {
            cfg: cfg.clone(),
            model: run.model,
            train: run.dataset,
            splits: eval_splits(&cfg.dataset_spec())?,
            stats: run.stats,
        })
    }

    /// The same setup around a freshly initialized model.
    pub fn random_init(&self) -> Result<Self> {
        Ok(EvalSession {
            model: Model::new(self.cfg.model.clone(), self.cfg.seed)?,
            ..self.clone()
        })
    }

    pub fn linear(&self, tap: Tap) -> Result<ProbeResult> {
        let taps = [tap];
        let tr = embed(&self.model, &self.train.images, &taps)?;
        let va = embed(&self.model, &self.splits.val.images, &taps)?;
        let te = embed(&self.model, &self.splits.test.images, &taps)?;
        let grid = reg_grid(PROBE_GRID_SIZE, PROBE_REG_RANGE.0, PROBE_REG_RANGE.1);
        linear_probe(
            (&tr[0], &labels(&self.train)),
            (&va[0], &labels(&self.splits.val)),
            (&te[0], &labels(&self.splits.test)),
            &grid,
        )
    }

    /// Test-split accuracy of a `k`-NN vote against the training set.
    pub fn knn(&self, tap: Tap, k: usize) -> Result<f64> {
        let db = embed(&self.model, &self.train.images, &[tap])?;
        let q = embed(&self.model, &self.splits.test.images, &[tap])?;
        knn_accuracy(&db[0], &labels(&self.train), &q[0], &labels(&self.splits.test), k)
    }

    /// Pairwise CCA of the raw expert outputs on the test split.
    pub fn expert_cca(&self, ridge: f64) -> Result<CcaMatrix> {
        let taps: Vec<Tap> = (0..self.model.n_experts()).map(Tap::Expert).collect();
        cca_matrix(&embed(&self.model, &self.splits.test.images, &taps)?, ridge)
    }

    pub fn routing(&self) -> Result<RoutingReport> {
        routing_stats(&self.model, &self.splits.test.images)
    }

    fn triples(&self, images: &[Image], tap: Tap, tag: u64) -> Result<Triples> {
        let aug = self.cfg.aug_config();
        let (views, _, norm) = view_triples(images, &aug, &self.stats, self.cfg.seed, tag)?;
        let mut orig = embed(&self.model, images, &[tap])?;
        let mut augd = embed(&self.model, &views, &[tap])?;
        Triples::new(orig.remove(0), augd.remove(0), norm)
    }

    /// Equivariance probes fitted on training-set triples and scored on
    /// test-set triples.
    pub fn equivariance(&self, tap: Tap) -> Result<EquivarianceScores> {
        let train = self.triples(&self.train.images, tap, TAG_TRIPLES_TRAIN)?;
        let test = self.triples(&self.splits.test.images, tap, TAG_TRIPLES_TEST)?;
        let aug = self.cfg.aug_config();
        let (second, _, _) = view_triples(
            &self.splits.test.images,
            &aug,
            &self.stats,
            self.cfg.seed,
            TAG_TRIPLES_PAIR,
        )?;
        let second = embed(&self.model, &second, &[tap])?;
        Ok(EquivarianceScores {
            r: r_equivariance(&train, &test, self.cfg.seed)?,
            p: p_equivariance(&train, &test)?,
            invariance: invariance_score(&test.aug, &second[0])?,
        })
    }

    /// Batches of test images with their own augmentation stream.
    pub fn align_batches(&self) -> Result<Vec<TrainBatch>> {
        let b = self.cfg.batch_size;
        let images: Vec<&Image> = self.splits.test.images.iter().collect();
        let n = ALIGN_BATCHES.min(images.len() / b);
        let seed = derived_seed(self.cfg.seed, TAG_ALIGN);
        (0..n)
            .map(|i| build_batch(&images[i * b..(i + 1) * b], 0, i, seed, &self.cfg.aug_config()))
            .collect()
    }

    pub fn gradalign(&self) -> Result<f64> {
        grad_alignment(&self.model, &self.align_batches()?, &self.stats, &self.cfg.loss)
    }
}
