//! Central finite-difference gradient checking in double precision.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::graph::{Graph, Var};
use super::layers::LayerSpec;
use super::tensor::Tensor;
use super::NnError;

/// Worst relative disagreement between tape gradients and central
/// differences, `|a − n| / max(|a|, |n|, floor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Compare reverse-mode gradients of `f` with central differences of step
/// `eps` for every entry of every leaf in `leaves`.
///
/// `f` receives a fresh graph and the leaf handles (in order) and returns a
/// scalar node. It must be deterministic.
pub fn check_gradients<F>(leaves: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck, NnError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NnError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *var);
        for i in 0..leaves[li].len() {
            let orig = leaves[li].data()[i];
            probe[li].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[li].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[li].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DEFAULT_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// Layer kinds covered by [`random_case`] and [`check_case`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Linear,
    Softmax,
    CrossEntropy,
    ResidualAdd,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Conv2d,
        LayerKind::BatchNormTrain,
        LayerKind::BatchNormEval,
        LayerKind::Relu,
        LayerKind::MaxPool,
        LayerKind::GlobalAvgPool,
        LayerKind::Linear,
        LayerKind::Softmax,
        LayerKind::CrossEntropy,
        LayerKind::ResidualAdd,
    ];
}

/// One randomly sized gradient-check problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub kind: LayerKind,
    pub input_dims: Vec<usize>,
    /// Layer hyper-parameters; `None` for parameter-free element-wise kinds.
    pub spec: Option<LayerSpec>,
}

/// Draw a small random shape for `kind`.
pub fn random_case<R: Rng>(kind: LayerKind, rng: &mut R) -> GradCase {
    let b = rng.random_range(1..=3);
    let c = rng.random_range(1..=4);
    let h = rng.random_range(2..=7);
    let w = rng.random_range(2..=7);
    let nchw = vec![b, c, h, w];
    let (input_dims, spec) = match kind {
        LayerKind::Conv2d => {
            let kernel = rng.random_range(1..=h.min(w).min(3));
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=kernel / 2);
            let out_c = rng.random_range(1..=4);
            (
                nchw,
                Some(LayerSpec::Conv2d {
                    in_c: c,
                    out_c,
                    kernel,
                    stride,
                    pad,
                }),
            )
        }
        LayerKind::BatchNormTrain | LayerKind::BatchNormEval => {
            let b = b.max(2);
            (vec![b, c, h, w], Some(LayerSpec::batch_norm(c)))
        }
        LayerKind::MaxPool => {
            let kernel = rng.random_range(1..=h.min(w).min(3));
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=kernel / 2);
            (nchw, Some(LayerSpec::MaxPool2d { kernel, stride, pad }))
        }
        LayerKind::GlobalAvgPool => (nchw, Some(LayerSpec::GlobalAvgPool)),
        LayerKind::Linear => {
            let inputs = rng.random_range(1..=8);
            let outputs = rng.random_range(1..=5);
            (vec![b, inputs], Some(LayerSpec::Linear { inputs, outputs }))
        }
        LayerKind::Softmax | LayerKind::CrossEntropy => (vec![b, rng.random_range(2..=5)], None),
        LayerKind::Relu | LayerKind::ResidualAdd => (nchw, None),
    };
    GradCase {
        kind,
        input_dims,
        spec,
    }
}

/// Distinct values on a half-integer lattice, shuffled: none sits within the
/// finite-difference step of zero or of another entry, so ReLU and max-pool
/// kinks are never straddled.
fn lattice<R: Rng>(dims: &[usize], spacing: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - (n / 2) as f64 + 0.5) * spacing).collect();
    v.shuffle(rng);
    Tensor::from_vec(dims, v).expect("positive dims")
}

fn uniform<R: Rng>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive dims")
}

/// Gradient check of one layer with respect to its input and parameters.
/// The layer output is reduced to a scalar by a fixed random projection.
pub fn check_case(case: &GradCase, seed: u64) -> Result<GradCheck, NnError> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let dims = &case.input_dims;
    let x = lattice(dims, 0.05, &mut rng);
    let eps = 1e-5;

    let mut leaves = vec![x];
    let spec = case.spec;
    match (case.kind, spec) {
        (LayerKind::Conv2d, Some(LayerSpec::Conv2d { in_c, out_c, kernel, .. })) => {
            leaves.push(uniform(&[out_c, in_c, kernel, kernel], -0.5, 0.5, &mut rng));
            leaves.push(uniform(&[out_c], -0.5, 0.5, &mut rng));
        }
        (LayerKind::BatchNormTrain | LayerKind::BatchNormEval, Some(LayerSpec::BatchNorm2d { channels, .. })) => {
            leaves.push(uniform(&[channels], 0.5, 1.5, &mut rng));
            leaves.push(uniform(&[channels], -0.5, 0.5, &mut rng));
        }
        (LayerKind::Linear, Some(LayerSpec::Linear { inputs, outputs })) => {
            leaves.push(uniform(&[outputs, inputs], -0.5, 0.5, &mut rng));
            leaves.push(uniform(&[outputs], -0.5, 0.5, &mut rng));
        }
        (LayerKind::ResidualAdd, _) => {
            // Offset so no sum of the two lattices lands on the ReLU kink.
            leaves.push(lattice(dims, 0.05, &mut rng).map(|v| v + 0.0123));
        }
        (LayerKind::Relu | LayerKind::MaxPool | LayerKind::GlobalAvgPool, _)
        | (LayerKind::Softmax | LayerKind::CrossEntropy, _) => {}
        (kind, spec) => {
            return Err(NnError::BadLayer(format!("{kind:?} with {spec:?}")));
        }
    }

    let channels = dims.get(1).copied().unwrap_or(1);
    let running_mean = uniform(&[channels], -0.2, 0.2, &mut rng).into_data();
    let running_var = uniform(&[channels], 0.5, 2.0, &mut rng).into_data();
    let labels: Vec<usize> = (0..dims[0]).map(|_| rng.random_range(0..dims[dims.len() - 1])).collect();

    let out_dims = match case.kind {
        LayerKind::CrossEntropy => vec![1],
        LayerKind::Softmax | LayerKind::Relu | LayerKind::ResidualAdd => dims.clone(),
        LayerKind::BatchNormEval => dims.clone(),
        _ => spec.expect("checked above").output_shape(dims)?,
    };
    let projection = uniform(&out_dims, -1.0, 1.0, &mut rng);

    check_gradients(&leaves, eps, |g, v| {
        let y = match (case.kind, spec) {
            (LayerKind::Conv2d, Some(LayerSpec::Conv2d { stride, pad, .. })) => {
                g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?
            }
            (LayerKind::BatchNormTrain, Some(LayerSpec::BatchNorm2d { eps, .. })) => {
                g.batch_norm_train(v[0], v[1], v[2], eps)?.0
            }
            (LayerKind::BatchNormEval, Some(LayerSpec::BatchNorm2d { eps, .. })) => {
                g.batch_norm_eval(v[0], v[1], v[2], &running_mean, &running_var, eps)?
            }
            (LayerKind::MaxPool, Some(LayerSpec::MaxPool2d { kernel, stride, pad })) => {
                g.max_pool2d(v[0], kernel, stride, pad)?
            }
            (LayerKind::Linear, _) => g.linear(v[0], v[1], v[2])?,
            (LayerKind::GlobalAvgPool, _) => g.global_avg_pool(v[0])?,
            (LayerKind::Relu, _) => g.relu(v[0]),
            (LayerKind::Softmax, _) => g.softmax(v[0])?,
            (LayerKind::CrossEntropy, _) => g.cross_entropy(v[0], &labels)?,
            (LayerKind::ResidualAdd, _) => {
                let s = g.add(v[0], v[1])?;
                g.relu(s)
            }
            (kind, spec) => return Err(NnError::BadLayer(format!("{kind:?} with {spec:?}"))),
        };
        g.dot(y, projection.clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // d/dx Σ relu(x)·p is p on the positive side; mul by itself is x².
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let ok = check_gradients(&[x.clone()], 1e-5, |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");
        assert_eq!(ok.checked, 3);
        // A non-deterministic function cannot agree with its own gradient.
        let counter = std::cell::Cell::new(0.0);
        let bad = check_gradients(&[x], 1e-5, |g, v| {
            counter.set(counter.get() + 1.0);
            let c = g.input(Tensor::full(&[3], counter.get()));
            let y = g.mul(v[0], c)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(bad.max_rel_error > 1e-2);
    }

    #[test]
    fn every_kind_passes_on_one_seed() {
        let mut rng = SplitMix64::seed_from_u64(11);
        for kind in LayerKind::ALL {
            let case = random_case(kind, &mut rng);
            let r = check_case(&case, 5).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{case:?}: {r:?}");
        }
    }
}
