//! Energy-based pairwise span extraction. A bilinear form over projected
//! start and end token representations yields a component energy per boundary
//! pair; spans decode by unconstrained minimization of the summed system
//! energy, which separates into per-pair thresholding at zero.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Sentiment polarity of a span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Polarity {
    Pos,
    Neg,
    Neu,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Pos, Polarity::Neg, Polarity::Neu];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neg => "NEG",
            Polarity::Neu => "NEU",
        }
    }

    pub fn parse(s: &str) -> Option<Polarity> {
        match s {
            "POS" => Some(Polarity::Pos),
            "NEG" => Some(Polarity::Neg),
            "NEU" => Some(Polarity::Neu),
            _ => None,
        }
    }
}

/// Inclusive token span with an optional polarity label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: Option<Polarity>,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Span {
        assert!(start <= end, "span start {start} exceeds end {end}");
        Span { start, end, label: None }
    }

    pub fn labeled(start: usize, end: usize, label: Polarity) -> Span {
        Span { label: Some(label), ..Span::new(start, end) }
    }
}

/// Projection pair of the span head; both matrices map the model width to a
/// shared energy width.
pub struct EpeParams {
    pub w_s: Tensor,
    pub w_e: Tensor,
}

impl EpeParams {
    pub fn new(w_s: Tensor, w_e: Tensor) -> Result<Self> {
        if w_s.cols() != w_e.cols() || w_s.rows() != w_e.rows() {
            return Err(Error::config(
                "epe",
                format!(
                    "start and end projections disagree: {}x{} versus {}x{}",
                    w_s.rows(),
                    w_s.cols(),
                    w_e.rows(),
                    w_e.cols()
                ),
            ));
        }
        Ok(EpeParams { w_s, w_e })
    }
}

/// Pairwise energies over boundary pairs; entries below the diagonal are
/// unused.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMatrix {
    l: usize,
    e: Vec<f64>,
}

impl EnergyMatrix {
    pub fn new(l: usize, e: Vec<f64>) -> EnergyMatrix {
        assert_eq!(e.len(), l * l, "energy matrix data does not match {l}x{l}");
        for i in 0..l {
            for j in i..l {
                assert!(e[i * l + j].is_finite(), "non-finite energy at ({i},{j})");
            }
        }
        EnergyMatrix { l, e }
    }

    pub fn from_tensor(t: &Tensor) -> EnergyMatrix {
        assert_eq!(t.rows(), t.cols(), "energy tensor must be square, got {}x{}", t.rows(), t.cols());
        EnergyMatrix::new(t.rows(), t.value())
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i <= j && j < self.l, "energy index ({i},{j}) outside the defined triangle");
        self.e[i * self.l + j]
    }
}

/// Binary upper-triangular selection of spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMatrix {
    l: usize,
    y: Vec<u8>,
}

impl SpanMatrix {
    pub fn zeros(l: usize) -> SpanMatrix {
        SpanMatrix { l, y: vec![0; l * l] }
    }

    pub fn from_spans(l: usize, spans: &[Span]) -> SpanMatrix {
        let mut m = SpanMatrix::zeros(l);
        for s in spans {
            assert!(s.end < l, "span ({},{}) outside a length-{l} sequence", s.start, s.end);
            m.set(s.start, s.end);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0
    }

    pub fn set(&mut self, i: usize, j: usize) {
        assert!(i <= j && j < self.l, "span index ({i},{j}) outside the upper triangle");
        self.y[i * self.l + j] = 1;
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        assert!(i <= j && j < self.l, "span index ({i},{j}) outside the upper triangle");
        self.y[i * self.l + j] == 1
    }

    pub fn spans(&self) -> Vec<Span> {
        let mut out = Vec::new();
        for i in 0..self.l {
            for j in i..self.l {
                if self.get(i, j) {
                    out.push(Span::new(i, j));
                }
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.y.iter().map(|&v| v as usize).sum()
    }
}

/// Component energies as a graph tensor: E[i,j] = -(s_i W_S) . (s_j W_E).
/// The full square is produced; consumers mask or read the upper triangle.
pub fn component_energy(params: &EpeParams, s: &Tensor) -> Tensor {
    s.matmul(&params.w_s).matmul(&s.matmul(&params.w_e).transpose()).scale(-1.0)
}

/// Total energy of a span selection.
pub fn system_energy(e: &EnergyMatrix, y: &SpanMatrix) -> f64 {
    assert_eq!(e.len(), y.len(), "energy and span matrices disagree in size");
    let mut total = 0.0;
    for i in 0..e.len() {
        for j in i..e.len() {
            if y.get(i, j) {
                total += e.get(i, j);
            }
        }
    }
    total
}

/// Pairwise binary cross-entropy between x = sigmoid(-E) and the span
/// indicators, averaged over the L(L+1)/2 boundary pairs. Graph form for
/// training.
pub fn epe_loss_tensor(e: &Tensor, y: &SpanMatrix) -> Tensor {
    let l = y.len();
    assert!(
        e.rows() == l && e.cols() == l,
        "energy tensor {}x{} does not match span matrix of size {l}",
        e.rows(),
        e.cols()
    );
    assert!(l >= 1, "epe loss requires at least one position");
    let g = e.graph();
    let mut mask = vec![0.0; l * l];
    let mut target = vec![0.0; l * l];
    for i in 0..l {
        for j in i..l {
            mask[i * l + j] = 1.0;
            target[i * l + j] = y.get(i, j) as u8 as f64;
        }
    }
    let mask = g.constant(l, l, mask);
    let target = g.constant(l, l, target);
    let ones = g.constant(l, l, vec![1.0; l * l]);
    let x = e.scale(-1.0).sigmoid();
    let term = target
        .mul(&x.log_clamped())
        .add(&ones.sub(&target).mul(&ones.sub(&x).log_clamped()));
    term.mul(&mask).sum_all().scale(-2.0 / (l * (l + 1)) as f64)
}

/// Scalar form of the pairwise loss for fixed energies.
pub fn epe_loss(e: &EnergyMatrix, y: &SpanMatrix) -> f64 {
    let g = crate::tensor::Graph::new();
    let l = e.len();
    let t = g.constant(l, l, e.e.clone());
    epe_loss_tensor(&t, y).item()
}

/// Spans whose energy falls strictly below the threshold. With no exact-zero
/// entries and the default threshold this is the unique unconstrained
/// minimizer of the system energy; ties at the threshold are excluded.
pub fn decode_spans(e: &EnergyMatrix, tau: f64) -> Vec<Span> {
    let mut out = Vec::new();
    for i in 0..e.len() {
        for j in i..e.len() {
            if e.get(i, j) < tau {
                out.push(Span::new(i, j));
            }
        }
    }
    out
}

/// Exhaustive minimizer of the system energy over all binary selections,
/// breaking ties by fewest spans and then lexicographically smallest matrix
/// in row-major triangle order. Refuses lengths above 5.
pub fn brute_force_decode(e: &EnergyMatrix) -> Result<SpanMatrix> {
    let l = e.len();
    if l > 5 {
        return Err(Error::Usage(format!(
            "brute_force_decode refuses L = {l}; enumeration is bounded at L = 5"
        )));
    }
    let mut pairs = Vec::new();
    for i in 0..l {
        for j in i..l {
            pairs.push((i, j));
        }
    }
    let t = pairs.len();
    let mut best: Option<(f64, usize, Vec<u8>)> = None;
    for mask in 0u64..(1u64 << t) {
        let mut energy = 0.0;
        let mut count = 0;
        let mut bits = vec![0u8; t];
        for (idx, &(i, j)) in pairs.iter().enumerate() {
            if mask >> idx & 1 == 1 {
                energy += e.get(i, j);
                count += 1;
                bits[idx] = 1;
            }
        }
        let better = match &best {
            None => true,
            Some((be, bc, bb)) => {
                energy < *be
                    || (energy == *be && (count < *bc || (count == *bc && bits < *bb)))
            }
        };
        if better {
            best = Some((energy, count, bits));
        }
    }
    let (_, _, bits) = best.unwrap();
    let mut out = SpanMatrix::zeros(l);
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        if bits[idx] == 1 {
            out.set(i, j);
        }
    }
    Ok(out)
}

/// Baseline head decoding: thresholded start and end positions paired
/// greedily, each start taking the nearest unconsumed end at or after it.
pub fn independent_boundary_decode(
    start_logits: &[f64],
    end_logits: &[f64],
    tau_b: f64,
) -> Vec<Span> {
    assert_eq!(start_logits.len(), end_logits.len(), "boundary logit lengths differ");
    let starts: Vec<usize> =
        (0..start_logits.len()).filter(|&i| start_logits[i] > tau_b).collect();
    let mut end_open: Vec<bool> = end_logits.iter().map(|&v| v > tau_b).collect();
    let mut out = Vec::new();
    for &i in &starts {
        if let Some(j) = (i..end_open.len()).find(|&j| end_open[j]) {
            end_open[j] = false;
            out.push(Span::new(i, j));
        }
    }
    out
}
