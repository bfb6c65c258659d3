//! Deterministic synthetic inputs: named RNG substreams of one experiment
//! seed, random matrices and model instances for gradient certification,
//! the planted classification task, and default parameter initializers.
//!
//! Every generator is a pure function of the seed (ChaCha8 with fixed
//! stream ids), so datasets and initial parameters are bitwise
//! reproducible across runs and platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{argmax_per_column, Matrix};
use crate::models::{GradForm, LabelMatrix, LinearParams, QuadParams};
use crate::training::{Dataset, Dims, Sample, StackParams, TrainableParams};

/// Independent substreams of one seed, so that e.g. drawing more data
/// never shifts the parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Data,
    Init,
    Probe,
}

pub fn substream(seed: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Matrix with i.i.d. standard normal entries, filled row-major.
pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Strictly one-hot labels with uniformly random hot positions.
pub fn random_onehot_labels<R: Rng>(rng: &mut R, s: usize, fo: usize) -> LabelMatrix {
    let positions: Vec<usize> = (0..fo).map(|_| rng.gen_range(0..s)).collect();
    LabelMatrix::from_hot_positions(s, &positions).expect("positions are in range")
}

/// Column-stochastic labels with all entries strictly inside (0, 1).
pub fn random_stochastic_labels<R: Rng>(rng: &mut R, s: usize, fo: usize) -> LabelMatrix {
    let raw = Matrix::from_fn(s, fo, |_, _| rng.gen_range(0.05..1.0));
    let sums = raw.col_sums();
    LabelMatrix::new(Matrix::from_fn(s, fo, |i, j| raw.get(i, j) / sums[j]))
        .expect("normalized columns are stochastic")
}

/// Lower-triangular square root with diagonal bounded away from zero,
/// suitable for [`QuadParams::new`].
pub fn random_phi<R: Rng>(rng: &mut R, dim: usize) -> Matrix {
    Matrix::from_fn(dim, dim, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => 0.0,
        std::cmp::Ordering::Equal => 0.5 + 0.5 * rng.sample::<f64, _>(StandardNormal).abs(),
        std::cmp::Ordering::Greater => 0.5 * rng.sample::<f64, _>(StandardNormal),
    })
}

/// Random linear-model instance with O(1)-scaled entries and small
/// dimensions (S in 2..=6, Fi in 1..=8, Fo in 2..=5), keeping the softmax
/// away from saturation so finite differences stay accurate.
pub fn random_linear_instance<R: Rng>(
    rng: &mut R,
    one_hot: bool,
) -> (Matrix, LinearParams, LabelMatrix) {
    let s = rng.gen_range(2..=6);
    let fi = rng.gen_range(1..=8);
    let fo = rng.gen_range(2..=5);
    let z = normal_matrix(rng, s, fi);
    let theta = normal_matrix(rng, fo, fi);
    let c = if one_hot {
        random_onehot_labels(rng, s, fo)
    } else {
        random_stochastic_labels(rng, s, fo)
    };
    (z, LinearParams::new(theta), c)
}

/// Random quadratic-model instance (S in 2..=6, Fi in 2..=5); labels are
/// square over sequence positions.
pub fn random_quad_instance<R: Rng>(
    rng: &mut R,
    one_hot: bool,
) -> (Matrix, QuadParams, LabelMatrix) {
    let s = rng.gen_range(2..=6);
    let fi = rng.gen_range(2..=5);
    let z = normal_matrix(rng, s, fi);
    let phi = random_phi(rng, fi);
    let p = QuadParams::new(phi).expect("random_phi yields a valid square root");
    let c = if one_hot {
        random_onehot_labels(rng, s, s)
    } else {
        random_stochastic_labels(rng, s, s)
    };
    (z, p, c)
}

/// The planted task: i.i.d. standard-normal embeddings, a hidden matrix
/// `W` (Fo x Fi), and labels one-hot at the argmax over positions of
/// `Z0 W^T` per output column, so a perfect classifier exists by
/// construction. Returns the dataset and the hidden `W`.
pub fn planted_dataset(dims: Dims, n: usize, seed: u64) -> Result<(Dataset, Matrix)> {
    if n == 0 {
        return Err(Error::param("planted_dataset", "need at least one sample"));
    }
    let mut rng = substream(seed, StreamPurpose::Data);
    let w = normal_matrix(&mut rng, dims.fo, dims.fi);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z0 = normal_matrix(&mut rng, dims.s, dims.fi);
        let logits = z0.matmul(&w.transpose())?;
        let c = LabelMatrix::from_hot_positions(dims.s, &argmax_per_column(&logits))?;
        samples.push(Sample { z0, c });
    }
    Ok((Dataset::new(samples, dims, seed)?, w))
}

/// Default linear training initialization: 0.1-scaled normal entries for
/// the stack parameters and the readout, drawn from the `Init` substream
/// (stack first, readout second, so the readout draw is independent of
/// depth and sharing).
pub fn default_linear_init(dims: Dims, depth: usize, shared: bool, seed: u64) -> TrainableParams {
    let mut rng = substream(seed, StreamPurpose::Init);
    let stack = if shared {
        StackParams::LinearShared {
            theta: normal_matrix(&mut rng, dims.fo, dims.fi).scale(0.1),
            depth,
        }
    } else {
        StackParams::LinearFree {
            layers: (0..depth)
                .map(|_| {
                    (
                        normal_matrix(&mut rng, dims.fo, dims.fi).scale(0.1),
                        normal_matrix(&mut rng, dims.fo, dims.fi).scale(0.1),
                    )
                })
                .collect(),
        }
    };
    let readout = LinearParams::new(normal_matrix(&mut rng, dims.fo, dims.fi).scale(0.1));
    TrainableParams { stack, readout }
}

/// Default quadratic training initialization: square roots near
/// (1/2-scaled) identity, label matrices starting at `phi phi^T`, readout
/// as in the linear case.
pub fn default_quad_init(
    dims: Dims,
    depth: usize,
    shared: bool,
    form: GradForm,
    seed: u64,
) -> TrainableParams {
    let mut rng = substream(seed, StreamPurpose::Init);
    let near_identity = |rng: &mut ChaCha8Rng, dim: usize| {
        Matrix::from_fn(dim, dim, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => 0.5 + 0.05 * rng.sample::<f64, _>(StandardNormal).abs(),
            std::cmp::Ordering::Greater => 0.05 * rng.sample::<f64, _>(StandardNormal),
        })
    };
    let stack = if shared {
        StackParams::QuadShared {
            phi: near_identity(&mut rng, dims.fi),
            depth,
            form,
        }
    } else {
        StackParams::QuadFree {
            layers: (0..depth)
                .map(|_| {
                    let phi = near_identity(&mut rng, dims.fi);
                    let label = QuadParams::new(phi.clone())
                        .expect("near-identity phi is valid")
                        .theta()
                        .clone();
                    (phi, label)
                })
                .collect(),
            form,
        }
    };
    let readout = LinearParams::new(normal_matrix(&mut rng, dims.fo, dims.fi).scale(0.1));
    TrainableParams { stack, readout }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::classify;

    #[test]
    fn substreams_are_deterministic_and_independent() {
        let a: Vec<f64> = {
            let mut rng = substream(7, StreamPurpose::Data);
            (0..4).map(|_| rng.gen::<f64>()).collect()
        };
        let b: Vec<f64> = {
            let mut rng = substream(7, StreamPurpose::Data);
            (0..4).map(|_| rng.gen::<f64>()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<f64> = {
            let mut rng = substream(7, StreamPurpose::Init);
            (0..4).map(|_| rng.gen::<f64>()).collect()
        };
        assert_ne!(a, c);
    }

    #[test]
    fn planted_dataset_is_bitwise_reproducible() {
        let dims = Dims { s: 4, fi: 8, fo: 4 };
        let (d1, w1) = planted_dataset(dims, 16, 99).unwrap();
        let (d2, w2) = planted_dataset(dims, 16, 99).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(d1, d2);
        let (d3, _) = planted_dataset(dims, 16, 100).unwrap();
        assert_ne!(d1, d3);
    }

    #[test]
    fn planted_dataset_single_sample() {
        let dims = Dims { s: 3, fi: 5, fo: 2 };
        let (data, _) = planted_dataset(dims, 1, 5).unwrap();
        assert_eq!(data.len(), 1);
        let sample = &data.samples()[0];
        assert!(sample.c.is_strict_one_hot());
        assert_eq!(sample.z0.shape(), (3, 5));
        assert!(planted_dataset(dims, 0, 5).is_err());
    }

    #[test]
    fn hidden_matrix_classifies_its_own_dataset_perfectly() {
        let dims = Dims { s: 4, fi: 8, fo: 4 };
        let (data, w) = planted_dataset(dims, 64, 31).unwrap();
        let readout = LinearParams::new(w);
        for sample in data.samples() {
            let predicted = classify(&sample.z0, &readout).unwrap();
            assert_eq!(predicted, sample.c.hot_positions().unwrap());
        }
    }

    #[test]
    fn random_instances_stay_in_bounds() {
        let mut rng = substream(11, StreamPurpose::Probe);
        for k in 0..50 {
            let (z, p, c) = random_linear_instance(&mut rng, k % 2 == 0);
            assert!((2..=6).contains(&z.rows()));
            assert!((1..=8).contains(&z.cols()));
            assert!((2..=5).contains(&p.out_dim()));
            assert_eq!(p.in_dim(), z.cols());
            assert_eq!((c.rows(), c.cols()), (z.rows(), p.out_dim()));
            assert_eq!(c.is_strict_one_hot(), k % 2 == 0);

            let (zq, pq, cq) = random_quad_instance(&mut rng, k % 2 == 1);
            assert!((2..=6).contains(&zq.rows()));
            assert!((2..=5).contains(&zq.cols()));
            assert_eq!(pq.dim(), zq.cols());
            assert_eq!((cq.rows(), cq.cols()), (zq.rows(), zq.rows()));
        }
    }

    #[test]
    fn default_inits_are_deterministic_and_depth_stable() {
        let dims = Dims { s: 4, fi: 8, fo: 4 };
        let a = default_linear_init(dims, 4, true, 42);
        let b = default_linear_init(dims, 4, true, 42);
        assert_eq!(a, b);
        // shared draw order: readout is the second draw regardless of depth
        let zero_depth = default_linear_init(dims, 0, true, 42);
        assert_eq!(a.readout, zero_depth.readout);
    }

    #[test]
    fn quad_init_is_valid() {
        let dims = Dims { s: 3, fi: 4, fo: 3 };
        let p = default_quad_init(dims, 2, true, GradForm::Exact, 17);
        match &p.stack {
            StackParams::QuadShared { phi, depth, .. } => {
                assert_eq!(*depth, 2);
                assert!(QuadParams::new(phi.clone()).is_ok());
            }
            other => panic!("unexpected stack params {other:?}"),
        }
        let free = default_quad_init(dims, 2, false, GradForm::Exact, 17);
        match &free.stack {
            StackParams::QuadFree { layers, .. } => assert_eq!(layers.len(), 2),
            other => panic!("unexpected stack params {other:?}"),
        }
    }
}
