//! Diagnostics over frozen models: probes, retrieval, CCA, routing,
//! equivariance and task-gradient alignment.

mod align;
mod cca;
mod equivariance;
mod knn;
mod probe;
mod routing;
mod session;

pub use align::{grad_alignment, task_gradient_cosine, LossTerm};
pub use cca::{cca, cca_matrix, CcaMatrix, CcaResult, DEFAULT_RIDGE, EIGEN_FLOOR};
pub use equivariance::{
    invariance_score, p_equivariance, r_equivariance, view_triples, Triples, ViewSet, MIN_TRAIN_TRIPLES, R_EQUIV_DIM,
    R_EQUIV_LR, R_EQUIV_STEPS,
};
pub use knn::{knn_accuracy, knn_retrieve};
pub use probe::{linear_probe, reg_grid, ProbeResult, PROBE_GRID_SIZE, PROBE_MAX_ITER, PROBE_REG_RANGE, PROBE_TOL};
pub use routing::{routing_stats, ExpertRouting, RoutingReport};
pub use session::{EquivarianceScores, EvalSession, ALIGN_BATCHES};

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Graph;
use crate::data::{generate_dataset, Dataset, DatasetSpec, Image};
use crate::error::{Error, Result};
use crate::models::{image_batch, Mode, Model, Task};

/// Where in the network an embedding is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tap {
    /// Encoder output `y`.
    Repr,
    ZInv,
    ZEq,
    /// `z°`: the equivariant embedding of an unaugmented image.
    ZOrig,
    /// Raw output of expert `k`, before any mixing.
    Expert(usize),
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repr" => Ok(Tap::Repr),
            "zinv" => Ok(Tap::ZInv),
            "zeq" => Ok(Tap::ZEq),
            "zo" => Ok(Tap::ZOrig),
            _ => s
                .strip_prefix("expert:")
                .and_then(|k| k.parse().ok())
                .map(Tap::Expert)
                .ok_or_else(|| Error::Contract(format!("unknown tap {s:?}; expected repr|zinv|zeq|zo|expert:K"))),
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::Repr => f.write_str("repr"),
            Tap::ZInv => f.write_str("zinv"),
            Tap::ZEq => f.write_str("zeq"),
            Tap::ZOrig => f.write_str("zo"),
            Tap::Expert(k) => write!(f, "expert:{k}"),
        }
    }
}

/// An `n × d` matrix of embeddings, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// `None` for matrices that did not come from a model.
    pub tap: Option<Tap>,
}

impl EmbeddingSet {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, tap: Option<Tap>) -> Result<Self> {
        if data.len() != rows * cols || cols == 0 {
            return Err(Error::shape(
                "EmbeddingSet",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        if rows < 2 {
            return Err(Error::InsufficientData(format!(
                "embedding sets need at least 2 rows, got {rows}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(EmbeddingSet { rows, cols, data, tap })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("EmbeddingSet", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat(), None)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Row-major `f32` copy, as written to dump files.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Threads for evaluation work, from `STAR_THREADS` (default 1).
pub fn threads() -> usize {
    std::env::var("STAR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on up to [`threads`] scoped threads. Output order
/// matches input order, so results never depend on the thread count.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let n_threads = threads().min(items.len()).max(1);
    if n_threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(n_threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// Images per forward pass when embedding a dataset.
pub const EMBED_BATCH: usize = 250;

/// Eval-mode embeddings of `images` at every tap in `taps`, from one
/// encoder pass per chunk.
pub fn embed(model: &Model<f32>, images: &[Image], taps: &[Tap]) -> Result<Vec<EmbeddingSet>> {
    for &t in taps {
        if let Tap::Expert(k) = t {
            if k >= model.n_experts() {
                return Err(Error::Contract(format!(
                    "tap expert:{k} but the model has {} experts",
                    model.n_experts()
                )));
            }
        }
    }
    let chunks: Vec<&[Image]> = images.chunks(EMBED_BATCH).collect();
    let parts = par_map(&chunks, |chunk| -> Result<Vec<(usize, Vec<f64>)>> {
        let mut g = Graph::new();
        let mut ctx = model.bind(&mut g, Mode::Eval, false);
        let x = ctx.graph.constant(image_batch(&chunk.iter().collect::<Vec<_>>())?);
        let y = model.encode(&mut ctx, x)?;
        let outs = if taps.iter().any(|t| !matches!(t, Tap::Repr)) {
            model.expert_outputs(&mut ctx, y)?
        } else {
            Vec::new()
        };
        let mut res = Vec::with_capacity(taps.len());
        for &t in taps {
            let v = match t {
                Tap::Repr => y,
                Tap::ZInv => model.mix(&mut ctx, y, &outs, Task::Inv)?,
                Tap::ZEq | Tap::ZOrig => model.mix(&mut ctx, y, &outs, Task::Eq)?,
                Tap::Expert(k) => outs[k],
            };
            let val = ctx.graph.value(v);
            res.push((val.shape()[1], val.to_f64_vec()));
        }
        Ok(res)
    });
    let mut sets: Vec<(usize, Vec<f64>)> = vec![(0, Vec::new()); taps.len()];
    for part in parts {
        for (acc, (cols, data)) in sets.iter_mut().zip(part?) {
            acc.0 = cols;
            acc.1.extend(data);
        }
    }
    sets.into_iter()
        .zip(taps)
        .map(|((cols, data), &t)| EmbeddingSet::new(images.len(), cols, data, Some(t)))
        .collect()
}

/// Eval-mode embeddings of `images` at `tap`, computed in fixed-size chunks.
pub fn dump_embeddings(model: &Model<f32>, images: &[Image], tap: Tap) -> Result<EmbeddingSet> {
    Ok(embed(model, images, &[tap])?.remove(0))
}

/// Held-out splits generated from seeds derived from the training seed.
#[derive(Clone, Debug)]
pub struct EvalSplits {
    pub val: Dataset,
    pub test: Dataset,
}

pub const VAL_IMAGES: usize = 600;
pub const TEST_IMAGES: usize = 1200;

pub(crate) fn derived_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the tagged seed
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Validation and test images with the training spec's classes and size.
pub fn eval_splits(train: &DatasetSpec) -> Result<EvalSplits> {
    let split = |n_images, tag| {
        generate_dataset(&DatasetSpec {
            n_images,
            seed: derived_seed(train.seed, tag),
            ..train.clone()
        })
    };
    Ok(EvalSplits {
        val: split(VAL_IMAGES, 1)?,
        test: split(TEST_IMAGES, 2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_parse_and_print() {
        for s in ["repr", "zinv", "zeq", "zo", "expert:3"] {
            assert_eq!(s.parse::<Tap>().unwrap().to_string(), s);
        }
        for s in ["z", "expert:", "expert:x", "EXPERT:1"] {
            assert!(matches!(s.parse::<Tap>(), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u32> = (0..37).collect();
        assert_eq!(par_map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn embedding_sets_validate() {
        assert!(EmbeddingSet::new(1, 2, vec![0.0; 2], None).is_err());
        assert!(EmbeddingSet::new(2, 2, vec![0.0; 3], None).is_err());
        assert!(EmbeddingSet::new(2, 1, vec![0.0, f64::NAN], None).is_err());
        assert_eq!(EmbeddingSet::from_rows(&[vec![1.0], vec![2.0]]).unwrap().row(1), &[2.0]);
    }

    #[test]
    fn splits_differ_from_training_data() {
        let spec = DatasetSpec::default();
        let a = eval_splits(&spec).unwrap();
        assert_eq!(a.val.len(), VAL_IMAGES);
        assert_eq!(a.test.len(), TEST_IMAGES);
        assert_ne!(a.val.images[0], generate_dataset(&spec).unwrap().images[0]);
        assert_ne!(derived_seed(0, 1), derived_seed(0, 2));
    }
}
