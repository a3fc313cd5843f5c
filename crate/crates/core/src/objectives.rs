//! Image-text matching and in-batch image-text contrastive objectives used
//! during pretraining to strengthen pairwise relevance between the visual
//! query and description encodings.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// A batch for the matching objective: per example, the visual-query rows of
/// a joint pass, the description rows, and whether the pair matches.
pub struct MatchBatch {
    pub vq: Vec<Tensor>,
    pub desc: Vec<Tensor>,
    pub labels: Vec<bool>,
}

impl MatchBatch {
    pub fn new(vq: Vec<Tensor>, desc: Vec<Tensor>, labels: Vec<bool>) -> Result<Self> {
        if vq.len() != desc.len() || vq.len() != labels.len() {
            return Err(Error::Usage(format!(
                "match batch fields disagree in length: {} visual, {} description, {} labels",
                vq.len(),
                desc.len(),
                labels.len()
            )));
        }
        Ok(MatchBatch { vq, desc, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A batch for the contrastive objective: first-token summaries of the
/// image-grounded and description passes, one row per example.
pub struct ContrastBatch {
    pub img_cls: Tensor,
    pub txt_cls: Tensor,
}

impl ContrastBatch {
    pub fn new(img_cls: Tensor, txt_cls: Tensor) -> Result<Self> {
        if img_cls.rows() != txt_cls.rows() || img_cls.cols() != txt_cls.cols() {
            return Err(Error::Usage(format!(
                "contrast batch shapes disagree: {}x{} image versus {}x{} text",
                img_cls.rows(),
                img_cls.cols(),
                txt_cls.rows(),
                txt_cls.cols()
            )));
        }
        Ok(ContrastBatch { img_cls, txt_cls })
    }

    pub fn len(&self) -> usize {
        self.img_cls.rows()
    }
}

/// Projects every token of the joint sequence to two logits and averages the
/// visual-query rows, yielding the 2-class match prediction.
pub fn itm_logits(w_itm: &Tensor, vq: &Tensor, desc: &Tensor) -> Tensor {
    let lp = vq.rows();
    vq.concat_rows(desc).matmul(w_itm).slice_rows(0, lp).mean_rows()
}

/// Mean 2-class cross-entropy over the batch; label true means class 1
/// (matching pair).
pub fn itm_loss(batch: &MatchBatch, w_itm: &Tensor) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Usage("itm_loss requires a nonempty batch".to_string()));
    }
    let b = batch.len();
    let mut stacked: Option<Tensor> = None;
    let mut onehot = Vec::with_capacity(2 * b);
    for i in 0..b {
        let logits = itm_logits(w_itm, &batch.vq[i], &batch.desc[i]);
        stacked = Some(match stacked {
            Some(acc) => acc.concat_rows(&logits),
            None => logits,
        });
        let y = batch.labels[i] as usize as f64;
        onehot.push(1.0 - y);
        onehot.push(y);
    }
    let logits = stacked.unwrap();
    let targets = logits.graph().constant(b, 2, onehot);
    Ok(logits
        .softmax_rows()
        .log_clamped()
        .mul(&targets)
        .sum_all()
        .scale(-1.0 / b as f64))
}

/// Similarity vectors for example `i`: image-to-description and
/// description-to-image inner products against every batch element.
pub fn itc_similarities(batch: &ContrastBatch, i: usize) -> (Vec<f64>, Vec<f64>) {
    let b = batch.len();
    let d = batch.img_cls.cols();
    assert!(i < b, "index {i} out of range for a batch of {b}");
    let img = batch.img_cls.value();
    let txt = batch.txt_cls.value();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(&a, &b)| a * b).sum::<f64>();
    let i2d = (0..b).map(|j| dot(&img[i * d..(i + 1) * d], &txt[j * d..(j + 1) * d])).collect();
    let d2i = (0..b).map(|j| dot(&txt[i * d..(i + 1) * d], &img[j * d..(j + 1) * d])).collect();
    (i2d, d2i)
}

/// In-batch contrastive loss: cross-entropy towards the diagonal of the
/// similarity matrix, averaged over both directions.
pub fn itc_loss(batch: &ContrastBatch) -> Tensor {
    let b = batch.len();
    let sim = batch.img_cls.matmul(&batch.txt_cls.transpose());
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = sim.graph().constant(b, b, eye);
    let i2d = sim.softmax_rows().log_clamped().mul(&eye).sum_all();
    let d2i = sim.transpose().softmax_rows().log_clamped().mul(&eye).sum_all();
    i2d.add(&d2i).scale(-1.0 / (2 * b) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::rng::Rng;
    use crate::tensor::Graph;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn rand_leaf(g: &Graph, rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        g.leaf(rows, cols, data)
    }

    #[test]
    fn zero_projection_gives_zero_logits_and_ln2_loss() {
        let g = Graph::new();
        let mut rng = Rng::new(1);
        let w = g.leaf(4, 2, vec![0.0; 8]);
        let vq = rand_leaf(&g, &mut rng, 3, 4);
        let desc = rand_leaf(&g, &mut rng, 2, 4);
        assert_eq!(itm_logits(&w, &vq, &desc).value(), vec![0.0, 0.0]);
        let batch =
            MatchBatch::new(vec![vq], vec![desc], vec![true]).unwrap();
        let loss = itm_loss(&batch, &w).unwrap().item();
        assert!((loss - LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_visual_row_logits_equal_its_projection() {
        let g = Graph::new();
        let mut rng = Rng::new(2);
        let w = rand_leaf(&g, &mut rng, 3, 2);
        let vq = rand_leaf(&g, &mut rng, 1, 3);
        let desc = rand_leaf(&g, &mut rng, 4, 3);
        let got = itm_logits(&w, &vq, &desc).value();
        let want = vq.matmul(&w).value();
        assert_eq!(got, want);
    }

    #[test]
    fn itm_logits_match_arithmetic_oracle() {
        let g = Graph::new();
        let mut rng = Rng::new(3);
        let (lp, ld, d) = (2, 3, 4);
        let w = rand_leaf(&g, &mut rng, d, 2);
        let vq = rand_leaf(&g, &mut rng, lp, d);
        let desc = rand_leaf(&g, &mut rng, ld, d);
        let got = itm_logits(&w, &vq, &desc).value();
        let wv = w.value();
        let vv = vq.value();
        let mut want = [0.0f64; 2];
        for row in 0..lp {
            for c in 0..2 {
                let mut s = 0.0;
                for j in 0..d {
                    s += vv[row * d + j] * wv[j * 2 + c];
                }
                want[c] += s / lp as f64;
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_batch_is_the_mean_of_item_losses() {
        let g = Graph::new();
        let d = 3;
        let w = g.leaf(d, 2, vec![0.0, 30.0, 0.0, 0.0, 0.0, 0.0]);
        // First item: feature picks up the large weight, label 1 -> loss ~ 0.
        let vq_confident = g.leaf(1, d, vec![1.0, 0.0, 0.0]);
        // Second item: zero features -> zero logits -> ln 2.
        let vq_zero = g.leaf(1, d, vec![0.0; d]);
        let desc = g.leaf(1, d, vec![0.0; d]);
        let batch = MatchBatch::new(
            vec![vq_confident, vq_zero],
            vec![desc.clone(), desc],
            vec![true, false],
        )
        .unwrap();
        let loss = itm_loss(&batch, &w).unwrap().item();
        assert!((loss - LN_2 / 2.0).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn itm_loss_rejects_empty_batches() {
        let g = Graph::new();
        let w = g.leaf(2, 2, vec![0.0; 4]);
        let batch = MatchBatch::new(vec![], vec![], vec![]).unwrap();
        assert!(itm_loss(&batch, &w).is_err());
    }

    #[test]
    fn itc_singleton_batch_is_exactly_zero() {
        let g = Graph::new();
        let mut rng = Rng::new(4);
        let batch = ContrastBatch::new(
            rand_leaf(&g, &mut rng, 1, 5),
            rand_leaf(&g, &mut rng, 1, 5),
        )
        .unwrap();
        assert_eq!(itc_loss(&batch).item(), 0.0);
    }

    #[test]
    fn itc_identical_summaries_give_ln2() {
        let g = Graph::new();
        let data = vec![0.4, -0.2, 0.4, -0.2];
        let batch = ContrastBatch::new(g.leaf(2, 2, data.clone()), g.leaf(2, 2, data)).unwrap();
        let loss = itc_loss(&batch).item();
        assert!((loss - LN_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn itc_diagonal_dominant_closed_form() {
        let g = Graph::new();
        // Orthogonal summaries scaled so the diagonal similarity is 10.
        let s = 10.0f64.sqrt();
        let img = g.leaf(2, 2, vec![s, 0.0, 0.0, s]);
        let txt = g.leaf(2, 2, vec![s, 0.0, 0.0, s]);
        let batch = ContrastBatch::new(img, txt).unwrap();
        let loss = itc_loss(&batch).item();
        let want = -(10.0f64.exp() / (10.0f64.exp() + 1.0)).ln();
        assert!((loss - want).abs() < 1e-12, "loss {loss} want {want}");
    }

    #[test]
    fn orthonormal_pairs_give_basis_similarity_vectors() {
        let g = Graph::new();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let batch = ContrastBatch::new(g.leaf(3, 3, eye.clone()), g.leaf(3, 3, eye)).unwrap();
        let (i2d, d2i) = itc_similarities(&batch, 1);
        assert_eq!(i2d, vec![0.0, 1.0, 0.0]);
        assert_eq!(d2i, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn itc_random_similarities_match_oracle() {
        let g = Graph::new();
        let mut rng = Rng::new(5);
        let img = rand_leaf(&g, &mut rng, 3, 4);
        let txt = rand_leaf(&g, &mut rng, 3, 4);
        let batch = ContrastBatch::new(img.clone(), txt.clone()).unwrap();
        let (i2d, _) = itc_similarities(&batch, 2);
        let iv = img.value();
        let tv = txt.value();
        for j in 0..3 {
            let want: f64 = (0..4).map(|c| iv[2 * 4 + c] * tv[j * 4 + c]).sum();
            assert!((i2d[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_invariant_to_consistent_reordering() {
        let mut rng = Rng::new(6);
        let vq_data: Vec<Vec<f64>> =
            (0..3).map(|_| (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let desc_data: Vec<Vec<f64>> =
            (0..3).map(|_| (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let w_data: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let labels = [true, false, true];

        let eval = |order: &[usize]| -> (f64, f64) {
            let g = Graph::new();
            let w = g.leaf(3, 2, w_data.clone());
            let vq: Vec<Tensor> = order.iter().map(|&i| g.leaf(2, 3, vq_data[i].clone())).collect();
            let desc: Vec<Tensor> =
                order.iter().map(|&i| g.leaf(3, 3, desc_data[i].clone())).collect();
            let lab: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
            let cls_img = vq[0].slice_rows(0, 1)
                .concat_rows(&vq[1].slice_rows(0, 1))
                .concat_rows(&vq[2].slice_rows(0, 1));
            let cls_txt = desc[0].slice_rows(0, 1)
                .concat_rows(&desc[1].slice_rows(0, 1))
                .concat_rows(&desc[2].slice_rows(0, 1));
            let itm = itm_loss(&MatchBatch::new(vq, desc, lab).unwrap(), &w).unwrap().item();
            let itc = itc_loss(&ContrastBatch::new(cls_img, cls_txt).unwrap()).item();
            (itm, itc)
        };
        let (itm_a, itc_a) = eval(&[0, 1, 2]);
        let (itm_b, itc_b) = eval(&[2, 0, 1]);
        assert!((itm_a - itm_b).abs() < 1e-12);
        assert!((itc_a - itc_b).abs() < 1e-12);
    }

    #[test]
    fn itc_is_symmetric_in_modalities() {
        let mut rng = Rng::new(7);
        let a: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let eval = |x: &[f64], y: &[f64]| {
            let g = Graph::new();
            let batch =
                ContrastBatch::new(g.leaf(2, 4, x.to_vec()), g.leaf(2, 4, y.to_vec())).unwrap();
            itc_loss(&batch).item()
        };
        assert!((eval(&a, &b) - eval(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let (b, lp, ld, d) = (3, 2, 2, 3);
        let total = d * 2 + b * lp * d + b * ld * d;
        let theta: Vec<f64> = (0..total).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let run = |p: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let g = Graph::new();
            let mut leaves = Vec::new();
            let mut offset = 0;
            let mut take = |rows: usize, cols: usize, leaves: &mut Vec<Tensor>| {
                let t = g.leaf(rows, cols, p[offset..offset + rows * cols].to_vec());
                offset += rows * cols;
                leaves.push(t.clone());
                t
            };
            let w = take(d, 2, &mut leaves);
            let vq: Vec<Tensor> = (0..b).map(|_| take(lp, d, &mut leaves)).collect();
            let desc: Vec<Tensor> = (0..b).map(|_| take(ld, d, &mut leaves)).collect();
            let img_cls = vq[0].slice_rows(0, 1)
                .concat_rows(&vq[1].slice_rows(0, 1))
                .concat_rows(&vq[2].slice_rows(0, 1));
            let txt_cls = desc[0].slice_rows(0, 1)
                .concat_rows(&desc[1].slice_rows(0, 1))
                .concat_rows(&desc[2].slice_rows(0, 1));
            let itm = itm_loss(
                &MatchBatch::new(vq.clone(), desc.clone(), vec![true, false, true]).unwrap(),
                &w,
            )
            .unwrap();
            let itc = itc_loss(&ContrastBatch::new(img_cls, txt_cls).unwrap());
            let loss = itm.add(&itc);
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
        let err = finite_diff_check(|p| run(p, false).0, &theta, &analytic, 1e-5);
        assert!(err < 1e-4, "objective gradient error {err}");
    }
}
