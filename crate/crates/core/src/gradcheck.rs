//! Central-difference gradient verification, both as a primitive and as a
//! named suite covering every differentiable operation in the graph.

use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Compares an analytic gradient against central finite differences of `f`
/// and returns the maximum relative error
/// |g_a - g_n| / max(1e-8, |g_a| + |g_n|) over all parameter entries.
pub fn finite_diff_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert!(h > 0.0, "finite_diff_check requires h > 0");
    assert_eq!(theta.len(), analytic.len(), "parameter and gradient lengths differ");
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// One named gradient check result.
pub struct CheckCase {
    pub name: String,
    pub max_rel_err: f64,
}

/// Runs every differentiable graph operation through `finite_diff_check` on
/// small random inputs. Each case composes the operation with a nonlinearity
/// so upstream gradients are non-uniform.
pub fn op_gradient_suite(seed: u64) -> Vec<CheckCase> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let mut case = |name: &str,
                    shapes: &[(usize, usize)],
                    rng: &mut Rng,
                    build: &dyn Fn(&[Tensor]) -> Tensor| {
        let total: usize = shapes.iter().map(|&(r, c)| r * c).sum();
        let theta: Vec<f64> = (0..total).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let run = |params: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let g = Graph::new();
            let mut leaves = Vec::new();
            let mut offset = 0;
            for &(r, c) in shapes {
                leaves.push(g.leaf(r, c, params[offset..offset + r * c].to_vec()));
                offset += r * c;
            }
            let loss = build(&leaves);
            if !want_grad {
                return (loss.item(), Vec::new());
            }
            loss.backward();
            let mut grads = Vec::with_capacity(total);
            for leaf in &leaves {
                grads.extend(leaf.grad());
            }
            (loss.item(), grads)
        };
        let (_, analytic) = run(&theta, true);
        let err = finite_diff_check(|p| run(p, false).0, &theta, &analytic, DEFAULT_H);
        out.push(CheckCase { name: name.to_string(), max_rel_err: err });
    };

    case("matmul", &[(2, 3), (3, 2)], &mut rng, &|t| {
        t[0].matmul(&t[1]).sigmoid().sum_all()
    });
    case("transpose", &[(2, 3)], &mut rng, &|t| t[0].transpose().sigmoid().sum_all());
    case("add", &[(2, 2), (2, 2)], &mut rng, &|t| t[0].add(&t[1]).sigmoid().sum_all());
    case("sub", &[(2, 2), (2, 2)], &mut rng, &|t| t[0].sub(&t[1]).sigmoid().sum_all());
    case("mul", &[(2, 2), (2, 2)], &mut rng, &|t| t[0].mul(&t[1]).sigmoid().sum_all());
    case("scale_add_const", &[(2, 2)], &mut rng, &|t| {
        t[0].scale(1.7).add_const(0.3).sigmoid().sum_all()
    });
    case("add_row", &[(3, 2), (1, 2)], &mut rng, &|t| {
        t[0].add_row(&t[1]).sigmoid().sum_all()
    });
    case("sigmoid", &[(2, 3)], &mut rng, &|t| t[0].sigmoid().mul(&t[0]).sum_all());
    case("gelu", &[(2, 3)], &mut rng, &|t| t[0].gelu().sigmoid().sum_all());
    case("log_clamped", &[(2, 2)], &mut rng, &|t| {
        t[0].sigmoid().log_clamped().sum_all()
    });
    case("softmax_rows", &[(3, 4)], &mut rng, &|t| {
        t[0].softmax_rows().mul(&t[0]).sum_all()
    });
    case("layer_norm", &[(3, 4), (1, 4), (1, 4)], &mut rng, &|t| {
        t[0].layer_norm(&t[1], &t[2]).sigmoid().sum_all()
    });
    case("mean_all", &[(3, 2)], &mut rng, &|t| t[0].sigmoid().mean_all());
    case("mean_rows", &[(3, 2)], &mut rng, &|t| t[0].mean_rows().sigmoid().sum_all());
    case("concat_rows", &[(2, 3), (1, 3)], &mut rng, &|t| {
        t[0].concat_rows(&t[1]).sigmoid().sum_all()
    });
    case("concat_cols", &[(2, 2), (2, 1)], &mut rng, &|t| {
        t[0].concat_cols(&t[1]).sigmoid().sum_all()
    });
    case("slice_rows", &[(4, 2)], &mut rng, &|t| {
        t[0].slice_rows(1, 3).sigmoid().sum_all()
    });
    case("slice_cols", &[(2, 4)], &mut rng, &|t| {
        t[0].slice_cols(0, 2).sigmoid().sum_all()
    });
    case("embed", &[(4, 3)], &mut rng, &|t| {
        t[0].embed_rows(&[1, 3, 1]).sigmoid().sum_all()
    });
    case("composite_chain", &[(3, 3), (3, 3), (1, 3), (1, 3)], &mut rng, &|t| {
        let scores = t[0].matmul(&t[1].transpose()).scale(1.0 / 3.0f64.sqrt());
        let mixed = scores.softmax_rows().matmul(&t[1]);
        mixed.layer_norm(&t[2], &t[3]).gelu().mean_all()
    });

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let theta = vec![0.3, -1.2, 2.5];
        let f = |p: &[f64]| p.iter().map(|&x| x * x).sum::<f64>();
        let analytic: Vec<f64> = theta.iter().map(|&x| 2.0 * x).collect();
        let err = finite_diff_check(f, &theta, &analytic, 1e-5);
        assert!(err < 1e-10, "quadratic error {err}");
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let theta = vec![0.2, -0.4, 1.1];
        let run = |p: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let g = Graph::new();
            let x = g.leaf(1, 3, p.to_vec());
            let onehot = g.constant(1, 3, vec![1.0, 0.0, 0.0]);
            let loss = x.softmax_rows().log_clamped().mul(&onehot).sum_all().scale(-1.0);
            if !grad {
                return (loss.item(), Vec::new());
            }
            loss.backward();
            (loss.item(), x.grad())
        };
        let (_, analytic) = run(&theta, true);
        let err = finite_diff_check(|p| run(p, false).0, &theta, &analytic, 1e-5);
        assert!(err < 1e-6, "softmax cross-entropy error {err}");
    }

    #[test]
    fn every_op_passes() {
        for case in op_gradient_suite(11) {
            assert!(
                case.max_rel_err < 1e-4,
                "op {} exceeded tolerance: {}",
                case.name,
                case.max_rel_err
            );
        }
    }
}
