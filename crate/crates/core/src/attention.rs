//! Attention primitives and the prompt-as-dual-query block stack.
//!
//! Multi-head scaled dot-product attention serves two layer kinds: plain
//! self-attention over a token sequence, and image-to-text cross-attention in
//! which only the prompt prefix queries projected image features while the
//! remaining rows pass through bit-identical. Blocks alternate: even indices
//! carry a cross sub-layer, odd indices are self-attention only. Sub-layer
//! order inside a block is self-attention, cross-attention, feed-forward,
//! each with residual connection and post layer norm.

use std::cell::Cell;

use crate::tensor::Tensor;
use crate::{Error, Result};

thread_local! {
    static CROSS_EVALS: Cell<usize> = const { Cell::new(0) };
}

/// Number of cross-attention evaluations on this thread, for containment
/// checks on ablation variants.
pub fn cross_eval_count() -> usize {
    CROSS_EVALS.with(|c| c.get())
}

pub fn reset_cross_eval_count() {
    CROSS_EVALS.with(|c| c.set(0));
}

/// Projection matrices of one attention layer. All matrices are stored in
/// input-width by output-width orientation and applied by right
/// multiplication. For self-attention the key/value input width equals the
/// model width d; for cross-attention it is the image feature width.
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let d = w_q.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("head count {heads} must divide the model width {d}"),
            ));
        }
        Ok(AttentionParams { w_q, w_k, w_v, w_o, heads })
    }

    fn d(&self) -> usize {
        self.w_q.cols()
    }
}

pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// One encoder block. `cross_attn` is present on cross-type blocks only.
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: Option<AttentionParams>,
    pub ffn: FfnParams,
    pub norms: [LayerNormParams; 3],
}

impl BlockParams {
    pub fn has_cross(&self) -> bool {
        self.cross_attn.is_some()
    }
}

/// The three sequence kinds the stack accepts. Only prompt-bearing kinds may
/// cross-attend image features.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SeqKind {
    DescriptionOnly,
    PromptOnly,
    PromptPlusDescription,
}

impl SeqKind {
    pub fn has_prompt(self) -> bool {
        !matches!(self, SeqKind::DescriptionOnly)
    }
}

/// Hidden state of one sequence between blocks.
pub struct SequenceState {
    pub hidden: Tensor,
    pub prompt_len: usize,
    pub kind: SeqKind,
}

impl SequenceState {
    pub fn new(hidden: Tensor, prompt_len: usize, kind: SeqKind) -> Result<Self> {
        if prompt_len > hidden.rows() {
            return Err(Error::Contract(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                hidden.rows()
            )));
        }
        if kind == SeqKind::DescriptionOnly && prompt_len != 0 {
            return Err(Error::Contract(
                "a DescriptionOnly sequence cannot carry a prompt prefix".to_string(),
            ));
        }
        if kind.has_prompt() && prompt_len == 0 {
            return Err(Error::Contract(format!(
                "{kind:?} requires a nonempty prompt prefix"
            )));
        }
        Ok(SequenceState { hidden, prompt_len, kind })
    }
}

/// Projected image features, fixed for the duration of a forward pass.
pub struct ImageFeatures {
    pub features: Tensor,
}

/// Scaled dot-product attention. Returns the attended values and the
/// row-stochastic weight matrix for inspection.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    assert_eq!(
        k.rows(),
        v.rows(),
        "key/value row counts differ: {}x{} versus {}x{}",
        k.rows(),
        k.cols(),
        v.rows(),
        v.cols()
    );
    assert!(q.cols() >= 1, "attention head width must be at least 1");
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let weights = q.matmul(&k.transpose()).scale(scale).softmax_rows();
    (weights.matmul(v), weights)
}

/// Multi-head attention of `queries` over `keys_values`, with head-averaged
/// weights returned alongside.
fn multi_head(params: &AttentionParams, queries: &Tensor, keys_values: &Tensor) -> (Tensor, Tensor) {
    let d = params.d();
    let d_h = d / params.heads;
    let q = queries.matmul(&params.w_q);
    let k = keys_values.matmul(&params.w_k);
    let v = keys_values.matmul(&params.w_v);
    let mut head_outputs: Option<Tensor> = None;
    let mut weight_sum: Option<Tensor> = None;
    for h in 0..params.heads {
        let (lo, hi) = (h * d_h, (h + 1) * d_h);
        let (out, w) =
            scaled_dot_attention(&q.slice_cols(lo, hi), &k.slice_cols(lo, hi), &v.slice_cols(lo, hi));
        head_outputs = Some(match head_outputs {
            Some(acc) => acc.concat_cols(&out),
            None => out,
        });
        weight_sum = Some(match weight_sum {
            Some(acc) => acc.add(&w),
            None => w,
        });
    }
    let combined = head_outputs.unwrap().matmul(&params.w_o);
    let weights = weight_sum.unwrap().scale(1.0 / params.heads as f64);
    (combined, weights)
}

/// Self-attention over the full hidden sequence.
pub fn self_attention(params: &AttentionParams, state: &SequenceState) -> Tensor {
    multi_head(params, &state.hidden, &state.hidden).0
}

pub struct CrossOutput {
    /// Attended prompt rows concatenated with the untouched remainder.
    pub hidden: Tensor,
    /// Head-averaged attention weights, prompt rows by image rows.
    pub weights: Tensor,
}

/// Image-to-text cross-attention: the prompt prefix queries projected image
/// features; rows at or beyond the prompt length pass through unchanged.
pub fn i2t_cross_attention(
    params: &AttentionParams,
    state: &SequenceState,
    img: &ImageFeatures,
) -> Result<CrossOutput> {
    if !state.kind.has_prompt() {
        return Err(Error::Contract(
            "i2t_cross_attention: only sequences belonging to the prompt-bearing set \
             (PromptOnly, PromptPlusDescription) may cross-attend image features"
                .to_string(),
        ));
    }
    CROSS_EVALS.with(|c| c.set(c.get() + 1));
    let l = state.hidden.rows();
    let lp = state.prompt_len;
    let prefix = state.hidden.slice_rows(0, lp);
    let (attended, weights) = multi_head(params, &prefix, &img.features);
    let hidden = attended.concat_rows(&state.hidden.slice_rows(lp, l));
    Ok(CrossOutput { hidden, weights })
}

pub struct BlockOutput {
    pub state: SequenceState,
    pub cross_weights: Option<Tensor>,
}

/// One block: self-attention, then (on cross blocks with a prompt and image
/// present) cross-attention over the prompt prefix only, then the
/// feed-forward net, each sub-layer with residual and post layer norm. The
/// cross residual and norm touch prompt rows only so the passthrough segment
/// stays bit-identical through the cross sub-layer.
pub fn block_forward(
    block: &BlockParams,
    state: SequenceState,
    img: Option<&ImageFeatures>,
) -> Result<BlockOutput> {
    let sa = self_attention(&block.self_attn, &state);
    let h1 = state.hidden.add(&sa).layer_norm(&block.norms[0].gain, &block.norms[0].bias);
    let mid = SequenceState { hidden: h1, prompt_len: state.prompt_len, kind: state.kind };

    let mut cross_weights = None;
    let h2 = match (&block.cross_attn, img) {
        (Some(cross), Some(img)) if mid.kind.has_prompt() => {
            let lp = mid.prompt_len;
            let l = mid.hidden.rows();
            let crossed = i2t_cross_attention(cross, &mid, img)?;
            cross_weights = Some(crossed.weights);
            let prefix = mid
                .hidden
                .slice_rows(0, lp)
                .add(&crossed.hidden.slice_rows(0, lp))
                .layer_norm(&block.norms[1].gain, &block.norms[1].bias);
            prefix.concat_rows(&mid.hidden.slice_rows(lp, l))
        }
        _ => mid.hidden,
    };

    let ffn = h2
        .matmul(&block.ffn.w1)
        .add_row(&block.ffn.b1)
        .gelu()
        .matmul(&block.ffn.w2)
        .add_row(&block.ffn.b2);
    let h3 = h2.add(&ffn).layer_norm(&block.norms[2].gain, &block.norms[2].bias);
    Ok(BlockOutput {
        state: SequenceState { hidden: h3, prompt_len: state.prompt_len, kind: state.kind },
        cross_weights,
    })
}

pub struct PdqOutput {
    /// Prompt-prefix rows after the final block: the prompt-aware visual
    /// summary (empty for DescriptionOnly input).
    pub vq: Tensor,
    /// Remaining rows after the final block.
    pub rest: Tensor,
    /// Head-averaged weights of the last cross-attention layer that ran.
    pub last_cross_weights: Option<Tensor>,
}

/// Applies the block stack in order and splits the result at the prompt
/// boundary. Image features may be absent for text-only passes; cross
/// sub-layers are then skipped.
pub fn pdq_forward(
    blocks: &[BlockParams],
    state: SequenceState,
    img: Option<&ImageFeatures>,
) -> Result<PdqOutput> {
    assert!(!blocks.is_empty(), "pdq_forward requires at least one block");
    let mut state = state;
    let mut last_cross_weights = None;
    for block in blocks {
        let out = block_forward(block, state, img)?;
        state = out.state;
        if out.cross_weights.is_some() {
            last_cross_weights = out.cross_weights;
        }
    }
    let l = state.hidden.rows();
    let lp = state.prompt_len;
    Ok(PdqOutput {
        vq: state.hidden.slice_rows(0, lp),
        rest: state.hidden.slice_rows(lp, l),
        last_cross_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::rng::Rng;
    use crate::tensor::Graph;

    fn rand_leaf(g: &Graph, rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        g.leaf(rows, cols, data)
    }

    fn rand_attention(g: &Graph, rng: &mut Rng, d: usize, kv_width: usize, heads: usize) -> AttentionParams {
        AttentionParams::new(
            rand_leaf(g, rng, d, d),
            rand_leaf(g, rng, kv_width, d),
            rand_leaf(g, rng, kv_width, d),
            rand_leaf(g, rng, d, d),
            heads,
        )
        .unwrap()
    }

    fn rand_block(g: &Graph, rng: &mut Rng, d: usize, d_img: usize, heads: usize, cross: bool) -> BlockParams {
        let ln = |g: &Graph, rng: &mut Rng| LayerNormParams {
            gain: rand_leaf(g, rng, 1, d),
            bias: rand_leaf(g, rng, 1, d),
        };
        BlockParams {
            self_attn: rand_attention(g, rng, d, d, heads),
            cross_attn: cross.then(|| rand_attention(g, rng, d, d_img, heads)),
            ffn: FfnParams {
                w1: rand_leaf(g, rng, d, 4 * d),
                b1: rand_leaf(g, rng, 1, 4 * d),
                w2: rand_leaf(g, rng, 4 * d, d),
                b2: rand_leaf(g, rng, 1, d),
            },
            norms: [ln(g, rng), ln(g, rng), ln(g, rng)],
        }
    }

    #[test]
    fn single_key_forces_unit_weights() {
        let g = Graph::new();
        let mut rng = Rng::new(1);
        let q = rand_leaf(&g, &mut rng, 3, 4);
        let k = rand_leaf(&g, &mut rng, 1, 4);
        let v = g.leaf(1, 4, vec![0.5, -1.0, 2.0, 0.25]);
        let (out, w) = scaled_dot_attention(&q, &k, &v);
        assert_eq!(w.value(), vec![1.0, 1.0, 1.0]);
        for row in 0..3 {
            assert_eq!(&out.value()[row * 4..(row + 1) * 4], &v.value()[..]);
        }
    }

    #[test]
    fn orthogonal_queries_with_identical_values() {
        let g = Graph::new();
        let q = g.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let k = g.leaf(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
        let v = g.leaf(2, 3, vec![0.3, 0.7, -0.2, 0.3, 0.7, -0.2]);
        let (out, w) = scaled_dot_attention(&q, &k, &v);
        for &wv in &w.value() {
            assert!((wv - 0.5).abs() < 1e-15);
        }
        for row in 0..2 {
            for j in 0..3 {
                assert!((out.value()[row * 3 + j] - v.value()[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_by_two_matches_arithmetic_oracle() {
        let g = Graph::new();
        let q = g.leaf(2, 2, vec![1.0, 0.0, 0.5, -0.5]);
        let k = g.leaf(2, 2, vec![0.2, 0.4, -0.6, 0.1]);
        let v = g.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (out, w) = scaled_dot_attention(&q, &k, &v);

        let scale = 1.0 / 2.0f64.sqrt();
        let mut expect_w = [0.0; 4];
        let qv = [[1.0, 0.0], [0.5, -0.5]];
        let kv = [[0.2, 0.4], [-0.6, 0.1]];
        for i in 0..2 {
            let s0 = (qv[i][0] * kv[0][0] + qv[i][1] * kv[0][1]) * scale;
            let s1 = (qv[i][0] * kv[1][0] + qv[i][1] * kv[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            expect_w[i * 2] = e0 / (e0 + e1);
            expect_w[i * 2 + 1] = e1 / (e0 + e1);
        }
        for (got, want) in w.value().iter().zip(&expect_w) {
            assert!((got - want).abs() < 1e-12);
        }
        let vv = [[1.0, 2.0], [3.0, 4.0]];
        for i in 0..2 {
            for j in 0..2 {
                let want = expect_w[i * 2] * vv[0][j] + expect_w[i * 2 + 1] * vv[1][j];
                assert!((out.value()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let g = Graph::new();
            let n_q = 1 + rng.below(5);
            let n_k = 1 + rng.below(5);
            let d_h = 1 + rng.below(6);
            let q = rand_leaf(&g, &mut rng, n_q, d_h);
            let k = rand_leaf(&g, &mut rng, n_k, d_h);
            let v = rand_leaf(&g, &mut rng, n_k, d_h);
            let (_, w) = scaled_dot_attention(&q, &k, &v);
            let wv = w.value();
            for i in 0..n_q {
                let sum: f64 = wv[i * n_k..(i + 1) * n_k].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        let g = Graph::new();
        let mut rng = Rng::new(2);
        let make = |g: &Graph, rng: &mut Rng| {
            (
                rand_leaf(g, rng, 6, 6),
                rand_leaf(g, rng, 6, 6),
                rand_leaf(g, rng, 6, 6),
                rand_leaf(g, rng, 6, 6),
            )
        };
        let (a, b, c, d) = make(&g, &mut rng);
        assert!(AttentionParams::new(a, b, c, d, 4).is_err());
        let (a, b, c, d) = make(&g, &mut rng);
        assert!(AttentionParams::new(a, b, c, d, 3).is_ok());
    }

    #[test]
    fn cross_attention_rejects_description_only() {
        let g = Graph::new();
        let mut rng = Rng::new(3);
        let params = rand_attention(&g, &mut rng, 4, 3, 2);
        let state = SequenceState::new(rand_leaf(&g, &mut rng, 5, 4), 0, SeqKind::DescriptionOnly).unwrap();
        let img = ImageFeatures { features: rand_leaf(&g, &mut rng, 2, 3) };
        let err = i2t_cross_attention(&params, &state, &img).err().unwrap();
        assert!(err.to_string().contains("only sequences belonging to"));
    }

    #[test]
    fn cross_attention_passthrough_is_bit_identical() {
        let g = Graph::new();
        let mut rng = Rng::new(4);
        let params = rand_attention(&g, &mut rng, 4, 3, 2);
        let hidden = rand_leaf(&g, &mut rng, 6, 4);
        let state = SequenceState::new(hidden.clone(), 2, SeqKind::PromptPlusDescription).unwrap();
        let img = ImageFeatures { features: rand_leaf(&g, &mut rng, 3, 3) };
        let out = i2t_cross_attention(&params, &state, &img).unwrap();
        let before = hidden.value();
        let after = out.hidden.value();
        for i in 2 * 4..6 * 4 {
            assert_eq!(before[i].to_bits(), after[i].to_bits());
        }
        assert_eq!(out.weights.rows(), 2);
        assert_eq!(out.weights.cols(), 3);
    }

    #[test]
    fn block_passthrough_survives_the_cross_sublayer() {
        let g = Graph::new();
        let mut rng = Rng::new(6);
        let block = rand_block(&g, &mut rng, 4, 3, 2, true);
        let hidden = rand_leaf(&g, &mut rng, 5, 4);
        let img = ImageFeatures { features: rand_leaf(&g, &mut rng, 3, 3) };

        let state = SequenceState::new(hidden.clone(), 2, SeqKind::PromptPlusDescription).unwrap();
        let sa = self_attention(&block.self_attn, &state);
        let h1 = hidden.add(&sa).layer_norm(&block.norms[0].gain, &block.norms[0].bias);
        let mid = SequenceState { hidden: h1.clone(), prompt_len: 2, kind: state.kind };
        let crossed = i2t_cross_attention(block.cross_attn.as_ref().unwrap(), &mid, &img).unwrap();
        let prefix = h1
            .slice_rows(0, 2)
            .add(&crossed.hidden.slice_rows(0, 2))
            .layer_norm(&block.norms[1].gain, &block.norms[1].bias);
        let h2 = prefix.concat_rows(&h1.slice_rows(2, 5));

        let h1v = h1.value();
        let h2v = h2.value();
        for i in 2 * 4..5 * 4 {
            assert_eq!(h1v[i].to_bits(), h2v[i].to_bits());
        }
    }

    #[test]
    fn image_row_permutation_leaves_output_unchanged() {
        let mut rng = Rng::new(7);
        let build = |perm: &[usize], rng_seed: u64| -> Vec<f64> {
            let mut rng = Rng::new(rng_seed);
            let g = Graph::new();
            let params = rand_attention(&g, &mut rng, 4, 3, 2);
            let hidden = rand_leaf(&g, &mut rng, 4, 4);
            let img_rows: Vec<Vec<f64>> =
                (0..3).map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
            let mut data = Vec::new();
            for &p in perm {
                data.extend(&img_rows[p]);
            }
            let img = ImageFeatures { features: g.leaf(3, 3, data) };
            let state = SequenceState::new(hidden, 2, SeqKind::PromptPlusDescription).unwrap();
            i2t_cross_attention(&params, &state, &img).unwrap().hidden.value()
        };
        let seed = rng.below(1000) as u64;
        let a = build(&[0, 1, 2], seed);
        let b = build(&[2, 0, 1], seed);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn description_only_ignores_image_features() {
        let build = |with_img: bool| -> Vec<f64> {
            let mut rng = Rng::new(9);
            let g = Graph::new();
            let blocks = vec![
                rand_block(&g, &mut rng, 4, 3, 2, true),
                rand_block(&g, &mut rng, 4, 3, 2, false),
            ];
            let hidden = rand_leaf(&g, &mut rng, 5, 4);
            let state = SequenceState::new(hidden, 0, SeqKind::DescriptionOnly).unwrap();
            let img_data: Vec<f64> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let img = ImageFeatures { features: g.leaf(3, 3, img_data) };
            let out = pdq_forward(&blocks, state, with_img.then_some(&img)).unwrap();
            assert_eq!(out.vq.rows(), 0);
            out.rest.value()
        };
        let with_img = build(true);
        let without = build(false);
        for (a, b) in with_img.iter().zip(&without) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn prompt_only_has_no_passthrough_segment() {
        let g = Graph::new();
        let mut rng = Rng::new(10);
        let blocks = vec![rand_block(&g, &mut rng, 4, 3, 2, true)];
        let hidden = rand_leaf(&g, &mut rng, 3, 4);
        let state = SequenceState::new(hidden, 3, SeqKind::PromptOnly).unwrap();
        let img = ImageFeatures { features: rand_leaf(&g, &mut rng, 2, 3) };
        let out = pdq_forward(&blocks, state, Some(&img)).unwrap();
        assert_eq!(out.vq.rows(), 3);
        assert_eq!(out.rest.rows(), 0);
        assert!(out.last_cross_weights.is_some());
    }

    #[test]
    fn single_image_token_pins_all_prompt_rows() {
        let g = Graph::new();
        let mut rng = Rng::new(11);
        let params = rand_attention(&g, &mut rng, 4, 3, 2);
        let hidden = rand_leaf(&g, &mut rng, 3, 4);
        let state = SequenceState::new(hidden, 3, SeqKind::PromptOnly).unwrap();
        let img = ImageFeatures { features: rand_leaf(&g, &mut rng, 1, 3) };
        let out = i2t_cross_attention(&params, &state, &img).unwrap();
        assert_eq!(out.weights.value(), vec![1.0, 1.0, 1.0]);
        let projected = img
            .features
            .matmul(&params.w_v)
            .matmul(&params.w_o)
            .value();
        let got = out.hidden.value();
        for row in 0..3 {
            for j in 0..4 {
                assert!((got[row * 4 + j] - projected[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let d = 4;
        let d_img = 3;
        let shapes: Vec<(usize, usize)> = vec![
            (d, d), (d, d), (d, d), (d, d),                 // self attention
            (d_img, d), (d_img, d), (d, d), (d, d),         // cross attention (w_q, w_o are d x d)
            (d, 4 * d), (1, 4 * d), (4 * d, d), (1, d),     // ffn
            (1, d), (1, d), (1, d), (1, d), (1, d), (1, d), // norms
        ];
        let total: usize = shapes.iter().map(|&(r, c)| r * c).sum();
        let mut rng = Rng::new(12);
        let theta: Vec<f64> = (0..total).map(|_| rng.uniform(-0.8, 0.8)).collect();
        let hidden_data: Vec<f64> = (0..5 * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let img_data: Vec<f64> = (0..2 * d_img).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let run = |params: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let g = Graph::new();
            let mut leaves = Vec::new();
            let mut offset = 0;
            for &(r, c) in &shapes {
                leaves.push(g.leaf(r, c, params[offset..offset + r * c].to_vec()));
                offset += r * c;
            }
            let block = BlockParams {
                self_attn: AttentionParams::new(
                    leaves[0].clone(), leaves[1].clone(), leaves[2].clone(), leaves[3].clone(), 2,
                ).unwrap(),
                cross_attn: Some(AttentionParams::new(
                    leaves[6].clone(), leaves[4].clone(), leaves[5].clone(), leaves[7].clone(), 2,
                ).unwrap()),
                ffn: FfnParams {
                    w1: leaves[8].clone(), b1: leaves[9].clone(),
                    w2: leaves[10].clone(), b2: leaves[11].clone(),
                },
                norms: [
                    LayerNormParams { gain: leaves[12].clone(), bias: leaves[13].clone() },
                    LayerNormParams { gain: leaves[14].clone(), bias: leaves[15].clone() },
                    LayerNormParams { gain: leaves[16].clone(), bias: leaves[17].clone() },
                ],
            };
            let state = SequenceState::new(
                g.constant(5, d, hidden_data.clone()), 2, SeqKind::PromptPlusDescription,
            ).unwrap();
            let img = ImageFeatures { features: g.constant(2, d_img, img_data.clone()) };
            let out = block_forward(&block, state, Some(&img)).unwrap();
            let loss = out.state.hidden.sigmoid().mean_all();
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
        assert!(err < 1e-4, "block gradient error {err}");
    }
}
