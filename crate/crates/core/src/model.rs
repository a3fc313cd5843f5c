//! Full model assembly: a frozen image-encoder stub, the prompt-as-dual-query
//! stack, a self-attention text encoder, and the span head, trained under the
//! weighted sum of the matching, contrastive, and span objectives.
//!
//! Parameters live in a flat registry whose declaration order fixes the
//! checkpoint layout, the optimizer state layout, and the initialization
//! stream, so identical seeds give bit-identical models.

use std::cell::{Cell, RefCell};

use crate::attention::{
    self, AttentionParams, BlockParams, FfnParams, ImageFeatures, LayerNormParams, SeqKind,
    SequenceState,
};
use crate::data::{self, Dataset, Example, ImageMatrix, Task, Vocab};
use crate::epe::{self, EnergyMatrix, EpeParams, Polarity, Span, SpanMatrix};
use crate::gradcheck::DEFAULT_H;
use crate::metrics::{self, EvalReport, MatchMode, MetricsRow};
use crate::objectives::{self, ContrastBatch, MatchBatch};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

thread_local! {
    static IMAGE_ENCODES: Cell<usize> = const { Cell::new(0) };
}

/// Number of image-stub evaluations on this thread since the last reset.
/// Together with `attention::cross_eval_count` this pins down variant
/// containment: the text-only variant must never encode an image.
pub fn image_encode_count() -> usize {
    IMAGE_ENCODES.with(|c| c.get())
}

pub fn reset_image_encode_count() {
    IMAGE_ENCODES.with(|c| c.set(0));
}

/// Named parameter groups; freeze masks and checkpoints address these.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    ImageStub,
    Embeddings,
    Pdq,
    VqProj,
    TextEncoder,
    FreeQuery,
    Epe,
    BoundaryHead,
    ItmHead,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::ImageStub => "image_stub",
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Pdq => "pdq",
            ParamGroup::VqProj => "vq_proj",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::FreeQuery => "free_query",
            ParamGroup::Epe => "epe",
            ParamGroup::BoundaryHead => "boundary_head",
            ParamGroup::ItmHead => "itm_head",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::ImageStub => 0,
            ParamGroup::Embeddings => 1,
            ParamGroup::Pdq => 2,
            ParamGroup::VqProj => 3,
            ParamGroup::TextEncoder => 4,
            ParamGroup::FreeQuery => 5,
            ParamGroup::Epe => 6,
            ParamGroup::BoundaryHead => 7,
            ParamGroup::ItmHead => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<ParamGroup> {
        [
            ParamGroup::ImageStub,
            ParamGroup::Embeddings,
            ParamGroup::Pdq,
            ParamGroup::VqProj,
            ParamGroup::TextEncoder,
            ParamGroup::FreeQuery,
            ParamGroup::Epe,
            ParamGroup::BoundaryHead,
            ParamGroup::ItmHead,
        ]
        .into_iter()
        .find(|g| g.tag() == tag)
    }
}

/// One named parameter matrix.
#[derive(Clone, Debug)]
pub struct PVar {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    pub value: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct PId(usize);

#[derive(Clone, Debug, Default)]
pub struct Params {
    vars: Vec<PVar>,
}

enum Init {
    Glorot,
    Zeros,
    Ones,
}

impl Params {
    fn add(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        init: Init,
        rng: &mut Rng,
    ) -> PId {
        let value = match init {
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..rows * cols).map(|_| rng.uniform(-a, a)).collect()
            }
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
        };
        self.vars.push(PVar { name, rows, cols, group, value });
        PId(self.vars.len() - 1)
    }

    pub fn vars(&self) -> &[PVar] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Model shape. `pdq_blocks` is the depth of the cross-attending stack and
/// `text_blocks` the depth of the self-attention-only encoder above it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelGeometry {
    pub d: usize,
    pub heads: usize,
    pub pdq_blocks: usize,
    pub text_blocks: usize,
    pub d_ff: usize,
    pub d_img: usize,
    pub d_raw: usize,
    pub l_i: usize,
    pub l_p: usize,
    pub d_e: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 12] = [
            ("d", self.d),
            ("heads", self.heads),
            ("pdq_blocks", self.pdq_blocks),
            ("text_blocks", self.text_blocks),
            ("d_ff", self.d_ff),
            ("d_img", self.d_img),
            ("d_raw", self.d_raw),
            ("l_i", self.l_i),
            ("l_p", self.l_p),
            ("d_e", self.d_e),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::config("heads", "must divide the model width d"));
        }
        if self.l_p > self.max_len {
            return Err(Error::config("l_p", "prompt length exceeds max_len"));
        }
        Ok(())
    }

    /// The small fixed geometry used by the gradient-check command.
    pub fn reference() -> ModelGeometry {
        ModelGeometry {
            d: 8,
            heads: 2,
            pdq_blocks: 2,
            text_blocks: 2,
            d_ff: 16,
            d_img: 8,
            d_raw: 8,
            l_i: 4,
            l_p: 4,
            d_e: 8,
            vocab_size: Vocab::standard().len(),
            max_len: 16,
        }
    }
}

/// Model variants: the full assembly and its three reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoPdq,
    NoEpe,
    Psa,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPdq => "no-pdq",
            Variant::NoEpe => "no-epe",
            Variant::Psa => "psa",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "full" => Some(Variant::Full),
            "no-pdq" => Some(Variant::NoPdq),
            "no-epe" => Some(Variant::NoEpe),
            "psa" => Some(Variant::Psa),
            _ => None,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::NoPdq => 1,
            Variant::NoEpe => 2,
            Variant::Psa => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Variant> {
        [Variant::Full, Variant::NoPdq, Variant::NoEpe, Variant::Psa]
            .into_iter()
            .find(|v| v.tag() == tag)
    }

    /// Whether the matching and contrastive objectives apply at all.
    fn has_objectives(self) -> bool {
        self != Variant::Psa
    }
}

/// Training stages, each with its own loss weights, learning rate, and
/// freeze mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain1,
    Pretrain2,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain1 => "pretrain1",
            Stage::Pretrain2 => "pretrain2",
            Stage::Finetune => "finetune",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain1 => 1,
            Stage::Pretrain2 => 2,
            Stage::Finetune => 3,
        }
    }
}

/// Per-stage training configuration. `for_stage` carries the stock defaults:
/// pretraining runs 5 epochs per stage, finetuning up to 50 with selection on
/// the development set.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lambda_itm: f64,
    pub lambda_itc: f64,
    pub lambda_epe: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> TrainConfig {
        let (lambda_itm, lambda_itc, lambda_epe, lr, epochs) = match stage {
            Stage::Pretrain1 => (2.0, 2.0, 1.0, 5e-5, 5),
            Stage::Pretrain2 => (1.0, 1.0, 1.0, 3e-5, 5),
            Stage::Finetune => (0.1, 0.1, 1.0, 2e-5, 50),
        };
        TrainConfig {
            stage,
            lambda_itm,
            lambda_itc,
            lambda_epe,
            lr,
            epochs,
            batch_size: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_itm", self.lambda_itm),
            ("lambda_itc", self.lambda_itc),
            ("lambda_epe", self.lambda_epe),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(name, "loss weights must be nonnegative"));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

struct AttnIds {
    q: PId,
    k: PId,
    v: PId,
    o: PId,
}

struct BlockIds {
    self_attn: AttnIds,
    cross: Option<AttnIds>,
    w1: PId,
    b1: PId,
    w2: PId,
    b2: PId,
    norms: [(PId, PId); 3],
}

struct Ids {
    stub: PId,
    tok: PId,
    pos: PId,
    pdq: Vec<BlockIds>,
    vq_proj: PId,
    text: Vec<BlockIds>,
    free_query: PId,
    epe_s: PId,
    epe_e: PId,
    bnd_s: PId,
    bnd_e: PId,
    itm: PId,
}

/// The assembled model. All parameter groups exist in every variant so that
/// checkpoints are interchangeable; variants differ only in which paths the
/// forward functions take.
pub struct DqpsaModel {
    pub geometry: ModelGeometry,
    pub variant: Variant,
    params: Params,
    ids: Ids,
}

impl DqpsaModel {
    pub fn new(geometry: ModelGeometry, variant: Variant, seed: u64) -> Result<DqpsaModel> {
        geometry.validate()?;
        let g = &geometry;
        let mut params = Params::default();
        let mut rng = Rng::new(seed);
        let r = &mut rng;
        let p = &mut params;

        let stub =
            p.add("stub.proj".into(), g.d_raw, g.d_img, ParamGroup::ImageStub, Init::Glorot, r);
        let tok = p.add(
            "emb.token".into(),
            g.vocab_size,
            g.d,
            ParamGroup::Embeddings,
            Init::Glorot,
            r,
        );
        let pos =
            p.add("emb.pos".into(), g.max_len, g.d, ParamGroup::Embeddings, Init::Glorot, r);

        let declare_attn = |p: &mut Params, r: &mut Rng, name: &str, dk: usize, group| AttnIds {
            q: p.add(format!("{name}.wq"), g.d, g.d, group, Init::Glorot, r),
            k: p.add(format!("{name}.wk"), dk, g.d, group, Init::Glorot, r),
            v: p.add(format!("{name}.wv"), dk, g.d, group, Init::Glorot, r),
            o: p.add(format!("{name}.wo"), g.d, g.d, group, Init::Glorot, r),
        };
        let declare_block =
            |p: &mut Params, r: &mut Rng, name: &str, cross: bool, group| BlockIds {
                self_attn: declare_attn(p, r, &format!("{name}.self"), g.d, group),
                cross: cross
                    .then(|| declare_attn(p, r, &format!("{name}.cross"), g.d_img, group)),
                w1: p.add(format!("{name}.ffn.w1"), g.d, g.d_ff, group, Init::Glorot, r),
                b1: p.add(format!("{name}.ffn.b1"), 1, g.d_ff, group, Init::Zeros, r),
                w2: p.add(format!("{name}.ffn.w2"), g.d_ff, g.d, group, Init::Glorot, r),
                b2: p.add(format!("{name}.ffn.b2"), 1, g.d, group, Init::Zeros, r),
                norms: std::array::from_fn(|k| {
                    (
                        p.add(format!("{name}.norm{k}.gain"), 1, g.d, group, Init::Ones, r),
                        p.add(format!("{name}.norm{k}.bias"), 1, g.d, group, Init::Zeros, r),
                    )
                }),
            };

        let pdq = (0..g.pdq_blocks)
            .map(|i| declare_block(p, r, &format!("pdq{i}"), true, ParamGroup::Pdq))
            .collect();
        let vq_proj = p.add("vq.proj".into(), g.d, g.d, ParamGroup::VqProj, Init::Glorot, r);
        let text = (0..g.text_blocks)
            .map(|i| declare_block(p, r, &format!("text{i}"), false, ParamGroup::TextEncoder))
            .collect();
        let free_query =
            p.add("free.query".into(), g.l_p, g.d, ParamGroup::FreeQuery, Init::Glorot, r);
        let epe_s = p.add("epe.ws".into(), g.d, g.d_e, ParamGroup::Epe, Init::Glorot, r);
        let epe_e = p.add("epe.we".into(), g.d, g.d_e, ParamGroup::Epe, Init::Glorot, r);
        let bnd_s =
            p.add("boundary.start".into(), g.d, 1, ParamGroup::BoundaryHead, Init::Glorot, r);
        let bnd_e =
            p.add("boundary.end".into(), g.d, 1, ParamGroup::BoundaryHead, Init::Glorot, r);
        let itm = p.add("itm.w".into(), g.d, 2, ParamGroup::ItmHead, Init::Glorot, r);

        let ids = Ids {
            stub,
            tok,
            pos,
            pdq,
            vq_proj,
            text,
            free_query,
            epe_s,
            epe_e,
            bnd_s,
            bnd_e,
            itm,
        };
        Ok(DqpsaModel { geometry, variant, params, ids })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Overwrites parameter values in declaration order, validating names and
    /// shapes against this model's registry.
    pub fn load_values(
        &mut self,
        stored: impl IntoIterator<Item = (String, usize, usize, Vec<f64>)>,
    ) -> Result<()> {
        let mut n = 0;
        for (i, (name, rows, cols, value)) in stored.into_iter().enumerate() {
            let var = self.params.vars.get_mut(i).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected extra parameter `{name}`"))
            })?;
            if var.name != name || var.rows != rows || var.cols != cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} is `{name}` ({rows}x{cols}), expected `{}` ({}x{})",
                    var.name, var.rows, var.cols
                )));
            }
            if value.len() != rows * cols {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` carries {} values for a {rows}x{cols} shape",
                    value.len()
                )));
            }
            var.value = value;
            n += 1;
        }
        if n != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {n} parameters, model has {}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.vars.iter().map(|v| v.value.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Vec<f64>]) {
        assert_eq!(snap.len(), self.params.len(), "snapshot size mismatch");
        for (var, s) in self.params.vars.iter_mut().zip(snap) {
            assert_eq!(var.value.len(), s.len(), "snapshot entry size mismatch");
            var.value.copy_from_slice(s);
        }
    }
}

/// Binds registry parameters into one computation graph, each at most once,
/// so gradients accumulate across every use within a batch.
struct Bind<'m> {
    g: Graph,
    model: &'m DqpsaModel,
    slots: RefCell<Vec<Option<Tensor>>>,
}

impl<'m> Bind<'m> {
    fn new(model: &'m DqpsaModel) -> Bind<'m> {
        Bind {
            g: Graph::new(),
            model,
            slots: RefCell::new(vec![None; model.params.len()]),
        }
    }

    fn p(&self, id: PId) -> Tensor {
        let mut slots = self.slots.borrow_mut();
        if slots[id.0].is_none() {
            let var = &self.model.params.vars[id.0];
            slots[id.0] = Some(self.g.leaf(var.rows, var.cols, var.value.clone()));
        }
        slots[id.0].clone().unwrap()
    }

    fn attn(&self, ids: &AttnIds, heads: usize) -> AttentionParams {
        AttentionParams::new(self.p(ids.q), self.p(ids.k), self.p(ids.v), self.p(ids.o), heads)
            .expect("geometry validated at construction")
    }

    fn block(&self, ids: &BlockIds) -> BlockParams {
        let heads = self.model.geometry.heads;
        BlockParams {
            self_attn: self.attn(&ids.self_attn, heads),
            cross_attn: ids.cross.as_ref().map(|c| self.attn(c, heads)),
            ffn: FfnParams {
                w1: self.p(ids.w1),
                b1: self.p(ids.b1),
                w2: self.p(ids.w2),
                b2: self.p(ids.b2),
            },
            norms: std::array::from_fn(|k| LayerNormParams {
                gain: self.p(ids.norms[k].0),
                bias: self.p(ids.norms[k].1),
            }),
        }
    }

    fn blocks(&self, ids: &[BlockIds]) -> Vec<BlockParams> {
        ids.iter().map(|b| self.block(b)).collect()
    }

    fn epe(&self) -> EpeParams {
        EpeParams::new(self.p(self.model.ids.epe_s), self.p(self.model.ids.epe_e))
            .expect("projection shapes fixed at construction")
    }

    fn into_slots(self) -> Vec<Option<Tensor>> {
        self.slots.into_inner()
    }
}

/// Span-scoring head of one forward pass.
enum SpanHead {
    Energies(Tensor),
    Boundary(Tensor, Tensor),
}

struct SpanPass {
    s_out: Tensor,
    head: SpanHead,
    vq: Option<Tensor>,
    cross_weights: Option<Tensor>,
}

/// Forward modes: span scoring, pair matching, and contrastive encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    SpanTask,
    Itm,
    Itc,
}

/// Outputs of a public forward pass; fields are present per mode.
pub struct ForwardOutput {
    pub s_out: Option<Tensor>,
    pub energies: Option<Tensor>,
    pub boundary: Option<(Tensor, Tensor)>,
    pub vq: Option<Tensor>,
    pub desc_enc: Option<Tensor>,
    pub itm_logits: Option<Tensor>,
    pub itc_cls: Option<(Tensor, Tensor)>,
    pub cross_weights: Option<Tensor>,
}

impl ForwardOutput {
    fn empty() -> ForwardOutput {
        ForwardOutput {
            s_out: None,
            energies: None,
            boundary: None,
            vq: None,
            desc_enc: None,
            itm_logits: None,
            itc_cls: None,
            cross_weights: None,
        }
    }
}

/// One training example with its image features resolved.
#[derive(Clone, Copy)]
pub struct BatchItem<'a> {
    pub example: &'a Example,
    pub image: Option<&'a ImageMatrix>,
}

/// A built batch loss: the weighted total plus the unweighted term values.
pub struct BatchLoss {
    pub loss: Tensor,
    pub epe: f64,
    pub itm: Option<f64>,
    pub itc: Option<f64>,
    slots: Vec<Option<Tensor>>,
}

impl BatchLoss {
    /// Runs backward and extracts per-parameter gradients in registry order.
    pub fn backward_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.loss.backward();
        self.slots.iter().map(|s| s.as_ref().map(|t| t.grad())).collect()
    }
}

impl DqpsaModel {
    fn embed(&self, b: &Bind, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Usage("cannot embed an empty token sequence".into()));
        }
        if ids.len() > self.geometry.max_len {
            return Err(Error::Usage(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.geometry.max_len
            )));
        }
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.geometry.vocab_size {
                return Err(Error::Usage(format!(
                    "token id {id} outside vocabulary of {}",
                    self.geometry.vocab_size
                )));
            }
            idx.push(id as usize);
        }
        let tok = b.p(self.ids.tok).embed_rows(&idx);
        let pos_idx: Vec<usize> = (0..ids.len()).collect();
        let pos = b.p(self.ids.pos).embed_rows(&pos_idx);
        Ok(tok.add(&pos))
    }

    /// Prompt embeddings padded to the fixed prompt width with the pad token.
    fn embed_prompt(&self, b: &Bind, prompt: &[u32]) -> Result<Tensor> {
        if prompt.is_empty() {
            return Err(Error::Usage("span task requires a nonempty prompt".into()));
        }
        if prompt.len() > self.geometry.l_p {
            return Err(Error::Usage(format!(
                "prompt length {} exceeds the prompt width {}",
                prompt.len(),
                self.geometry.l_p
            )));
        }
        let mut padded = prompt.to_vec();
        padded.resize(self.geometry.l_p, 0);
        self.embed(b, &padded)
    }

    fn encode_image(&self, b: &Bind, img: &ImageMatrix) -> Result<ImageFeatures> {
        if img.cols != self.geometry.d_raw {
            return Err(Error::Usage(format!(
                "image feature width {} differs from d_raw {}",
                img.cols, self.geometry.d_raw
            )));
        }
        if img.rows == 0 {
            return Err(Error::Usage("image has no feature rows".into()));
        }
        IMAGE_ENCODES.with(|c| c.set(c.get() + 1));
        let raw = b.g.constant(img.rows, img.cols, img.data.clone());
        Ok(ImageFeatures { features: raw.matmul(&b.p(self.ids.stub)) })
    }

    /// Description-only pass through the dual-query stack (no image).
    fn desc_encode(&self, b: &Bind, desc: &[u32]) -> Result<Tensor> {
        let state = SequenceState::new(self.embed(b, desc)?, 0, SeqKind::DescriptionOnly)?;
        Ok(attention::pdq_forward(&b.blocks(&self.ids.pdq), state, None)?.rest)
    }

    /// Joint prompt-plus-description pass for the matching objective. The
    /// free-query variant pairs its learned query rows with an image-free
    /// description encoding instead.
    fn joint_pass(
        &self,
        b: &Bind,
        prompt: &[u32],
        desc: &[u32],
        img: Option<&ImageMatrix>,
    ) -> Result<(Tensor, Tensor)> {
        match self.variant {
            Variant::Psa => Err(Error::Usage(
                "the text-only variant has no matching objective".into(),
            )),
            Variant::NoPdq => Ok((b.p(self.ids.free_query), self.desc_encode(b, desc)?)),
            Variant::Full | Variant::NoEpe => {
                let image = img.ok_or_else(|| {
                    Error::Usage("matching objective requires image features".into())
                })?;
                let feats = self.encode_image(b, image)?;
                let hidden = self.embed_prompt(b, prompt)?.concat_rows(&self.embed(b, desc)?);
                let state =
                    SequenceState::new(hidden, self.geometry.l_p, SeqKind::PromptPlusDescription)?;
                let out = attention::pdq_forward(&b.blocks(&self.ids.pdq), state, Some(&feats))?;
                Ok((out.vq, out.rest))
            }
        }
    }

    /// Span-task pass: visual query (unless text-only), then the text encoder
    /// over [projected query ; prompt ; text], then the span head over the
    /// text positions alone.
    fn span_pass(&self, b: &Bind, ex: &Example, img: Option<&ImageMatrix>) -> Result<SpanPass> {
        if ex.tokens.is_empty() {
            return Err(Error::Usage("span task requires a nonempty text".into()));
        }
        let text_emb = self.embed(b, &ex.tokens)?;
        let prompt_emb = self.embed_prompt(b, &ex.prompt)?;
        let (enc_input, vq, cross_weights) = match self.variant {
            Variant::Psa => (prompt_emb.concat_rows(&text_emb), None, None),
            Variant::NoPdq => {
                let vq = b.p(self.ids.free_query);
                let lifted = vq.matmul(&b.p(self.ids.vq_proj));
                (lifted.concat_rows(&prompt_emb).concat_rows(&text_emb), Some(vq), None)
            }
            Variant::Full | Variant::NoEpe => {
                let image = img.ok_or_else(|| {
                    Error::Usage("span task requires image features for this variant".into())
                })?;
                let feats = self.encode_image(b, image)?;
                let state =
                    SequenceState::new(prompt_emb.clone(), self.geometry.l_p, SeqKind::PromptOnly)?;
                let out = attention::pdq_forward(&b.blocks(&self.ids.pdq), state, Some(&feats))?;
                let lifted = out.vq.matmul(&b.p(self.ids.vq_proj));
                (
                    lifted.concat_rows(&prompt_emb).concat_rows(&text_emb),
                    Some(out.vq),
                    out.last_cross_weights,
                )
            }
        };
        // The text encoder has no cross sub-layers; the prompt-free kind
        // routes every row through plain self-attention.
        let state = SequenceState::new(enc_input, 0, SeqKind::DescriptionOnly)?;
        let enc = attention::pdq_forward(&b.blocks(&self.ids.text), state, None)?.rest;
        let l = ex.tokens.len();
        let s_out = enc.slice_rows(enc.rows() - l, enc.rows());
        let head = match self.variant {
            Variant::NoEpe => SpanHead::Boundary(
                s_out.matmul(&b.p(self.ids.bnd_s)),
                s_out.matmul(&b.p(self.ids.bnd_e)),
            ),
            _ => SpanHead::Energies(epe::component_energy(&b.epe(), &s_out)),
        };
        Ok(SpanPass { s_out, head, vq, cross_weights })
    }

    /// Public single-example forward.
    pub fn forward(
        &self,
        ex: &Example,
        img: Option<&ImageMatrix>,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let b = Bind::new(self);
        let mut out = ForwardOutput::empty();
        match mode {
            Mode::SpanTask => {
                let pass = self.span_pass(&b, ex, img)?;
                out.s_out = Some(pass.s_out);
                match pass.head {
                    SpanHead::Energies(e) => out.energies = Some(e),
                    SpanHead::Boundary(s, e) => out.boundary = Some((s, e)),
                }
                out.vq = pass.vq;
                out.cross_weights = pass.cross_weights;
            }
            Mode::Itm => {
                let desc = data::derived_description(ex);
                let (vq, de) = self.joint_pass(&b, &ex.prompt, &desc, img)?;
                out.itm_logits = Some(objectives::itm_logits(&b.p(self.ids.itm), &vq, &de));
                out.vq = Some(vq);
                out.desc_enc = Some(de);
            }
            Mode::Itc => {
                if !self.variant.has_objectives() {
                    return Err(Error::Usage(
                        "the text-only variant has no contrastive objective".into(),
                    ));
                }
                let desc = data::derived_description(ex);
                let vq = match self.variant {
                    Variant::NoPdq => b.p(self.ids.free_query),
                    _ => {
                        let image = img.ok_or_else(|| {
                            Error::Usage("contrastive objective requires image features".into())
                        })?;
                        let feats = self.encode_image(&b, image)?;
                        let state = SequenceState::new(
                            self.embed_prompt(&b, &ex.prompt)?,
                            self.geometry.l_p,
                            SeqKind::PromptOnly,
                        )?;
                        attention::pdq_forward(&b.blocks(&self.ids.pdq), state, Some(&feats))?.vq
                    }
                };
                let de = self.desc_encode(&b, &desc)?;
                out.itc_cls = Some((vq.slice_rows(0, 1), de.slice_rows(0, 1)));
                out.vq = Some(vq);
                out.desc_enc = Some(de);
            }
        }
        Ok(out)
    }

    fn span_loss(&self, pass: &SpanPass, gold: &[Span]) -> Tensor {
        match &pass.head {
            SpanHead::Energies(e) => {
                let y = SpanMatrix::from_spans(pass.s_out.rows(), gold);
                epe::epe_loss_tensor(e, &y)
            }
            SpanHead::Boundary(s, e) => {
                let l = pass.s_out.rows();
                let mut ts = vec![0.0; l];
                let mut te = vec![0.0; l];
                for span in gold {
                    ts[span.start] = 1.0;
                    te[span.end] = 1.0;
                }
                let g = s.graph();
                let bce = |logits: &Tensor, targets: Vec<f64>| {
                    let t = g.constant(l, 1, targets);
                    let p = logits.sigmoid();
                    let pos = t.mul(&p.log_clamped());
                    let neg = t
                        .scale(-1.0)
                        .add_const(1.0)
                        .mul(&p.scale(-1.0).add_const(1.0).log_clamped());
                    pos.add(&neg).mean_all().scale(-1.0)
                };
                bce(s, ts).add(&bce(e, te)).scale(0.5)
            }
        }
    }

    /// The weighted training loss over one task-homogeneous batch. Terms
    /// whose inputs are absent (text-only variant, zero weight) contribute
    /// nothing and are not evaluated.
    pub fn total_loss(&self, items: &[BatchItem], cfg: &TrainConfig) -> Result<BatchLoss> {
        cfg.validate()?;
        if items.is_empty() {
            return Err(Error::Usage("training batch is empty".into()));
        }
        let b = Bind::new(self);
        let mut passes = Vec::with_capacity(items.len());
        let mut span_sum: Option<Tensor> = None;
        for item in items {
            let pass = self.span_pass(&b, item.example, item.image)?;
            let term = self.span_loss(&pass, &item.example.spans);
            span_sum = Some(match span_sum {
                Some(acc) => acc.add(&term),
                None => term,
            });
            passes.push(pass);
        }
        let epe_term = span_sum.expect("nonempty batch").scale(1.0 / items.len() as f64);
        let epe_val = epe_term.item();
        let mut loss = epe_term.scale(cfg.lambda_epe);
        let mut itm_val = None;
        let mut itc_val = None;

        let descs: Vec<Vec<u32>> =
            items.iter().map(|it| data::derived_description(it.example)).collect();

        if self.variant.has_objectives() && cfg.lambda_itm > 0.0 {
            let mut vqs = Vec::new();
            let mut des = Vec::new();
            let mut labels = Vec::new();
            for (i, item) in items.iter().enumerate() {
                let (vq, de) = self.joint_pass(&b, &item.example.prompt, &descs[i], item.image)?;
                vqs.push(vq);
                des.push(de);
                labels.push(true);
                // One in-batch negative per positive: this image with the
                // next example's description.
                let neg = (i + 1) % items.len();
                let (vq_n, de_n) =
                    self.joint_pass(&b, &item.example.prompt, &descs[neg], item.image)?;
                vqs.push(vq_n);
                des.push(de_n);
                labels.push(false);
            }
            let batch = MatchBatch::new(vqs, des, labels)?;
            let term = objectives::itm_loss(&batch, &b.p(self.ids.itm))?;
            itm_val = Some(term.item());
            loss = loss.add(&term.scale(cfg.lambda_itm));
        }

        if self.variant.has_objectives() && cfg.lambda_itc > 0.0 {
            let mut img_cls: Option<Tensor> = None;
            let mut txt_cls: Option<Tensor> = None;
            for i in 0..items.len() {
                let iv = passes[i].vq.as_ref().expect("variant with objectives has a query");
                let tv = self.desc_encode(&b, &descs[i])?;
                let (ir, tr) = (iv.slice_rows(0, 1), tv.slice_rows(0, 1));
                img_cls = Some(match img_cls {
                    Some(acc) => acc.concat_rows(&ir),
                    None => ir,
                });
                txt_cls = Some(match txt_cls {
                    Some(acc) => acc.concat_rows(&tr),
                    None => tr,
                });
            }
            let batch = ContrastBatch::new(img_cls.unwrap(), txt_cls.unwrap())?;
            let term = objectives::itc_loss(&batch);
            itc_val = Some(term.item());
            loss = loss.add(&term.scale(cfg.lambda_itc));
        }

        Ok(BatchLoss { loss, epe: epe_val, itm: itm_val, itc: itc_val, slots: b.into_slots() })
    }

    /// Decodes the spans the model predicts for one example.
    pub fn predict_spans(&self, ex: &Example, img: Option<&ImageMatrix>) -> Result<Vec<Span>> {
        let b = Bind::new(self);
        let pass = self.span_pass(&b, ex, img)?;
        Ok(match &pass.head {
            SpanHead::Energies(e) => epe::decode_spans(&EnergyMatrix::from_tensor(e), 0.0),
            SpanHead::Boundary(s, e) => {
                epe::independent_boundary_decode(&s.value(), &e.value(), 0.0)
            }
        })
    }

    /// Sentiment for one polarity-augmented example: the predicted span on a
    /// candidate word, best-scored first, or neutral when none decodes.
    pub fn predict_masc(
        &self,
        ex: &Example,
        img: Option<&ImageMatrix>,
        vocab: &Vocab,
    ) -> Result<Polarity> {
        let b = Bind::new(self);
        let pass = self.span_pass(&b, ex, img)?;
        let candidates = data::candidate_positions(ex, vocab);
        let hit = |spans: &[Span], pos: usize| {
            spans.iter().any(|s| s.start == pos && s.end == pos)
        };
        let scored: Vec<(f64, Polarity)> = match &pass.head {
            SpanHead::Energies(e) => {
                let em = EnergyMatrix::from_tensor(e);
                let spans = epe::decode_spans(&em, 0.0);
                candidates
                    .iter()
                    .filter(|&&(pos, _)| hit(&spans, pos))
                    .map(|&(pos, p)| (em.get(pos, pos), p))
                    .collect()
            }
            SpanHead::Boundary(s, e) => {
                let (sv, ev) = (s.value(), e.value());
                let spans = epe::independent_boundary_decode(&sv, &ev, 0.0);
                candidates
                    .iter()
                    .filter(|&&(pos, _)| hit(&spans, pos))
                    .map(|&(pos, p)| (-(sv[pos] + ev[pos]), p))
                    .collect()
            }
        };
        Ok(scored
            .into_iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"))
            .map(|(_, p)| p)
            .unwrap_or(Polarity::Neu))
    }

    /// Joint extraction: aspect spans from the extraction prompt, then one
    /// sentiment query per extracted aspect over the candidate-augmented
    /// text.
    pub fn run_jmasa(
        &self,
        ex: &Example,
        img: Option<&ImageMatrix>,
        vocab: &Vocab,
    ) -> Result<Vec<Span>> {
        let aspects = self.predict_spans(ex, img)?;
        let cand_ids = vocab.encode("positive negative neutral")?;
        let stem = vocab.encode("what is the sentiment of")?;
        let tail = vocab.encode("?")?;
        let mut out = Vec::with_capacity(aspects.len());
        for a in aspects {
            let mut tokens = ex.tokens.clone();
            tokens.extend(&cand_ids);
            let mut prompt = stem.clone();
            let avail = self.geometry.l_p.saturating_sub(prompt.len() + tail.len());
            let phrase = &ex.tokens[a.start..=a.end.min(ex.tokens.len() - 1)];
            prompt.extend(phrase.iter().take(avail));
            prompt.extend(&tail);
            let query = Example {
                id: "masc-query".into(),
                tokens,
                spans: Vec::new(),
                prompt,
                image_ref: ex.image_ref.clone(),
            };
            let p = self.predict_masc(&query, img, vocab)?;
            out.push(Span::labeled(a.start, a.end, p));
        }
        Ok(out)
    }

    /// Micro span F1 over the extraction records of a dataset.
    pub fn eval_mate(&self, ds: &Dataset, threads: usize) -> Result<EvalReport> {
        let idxs = ds.task_indices(Task::Mate);
        let preds = par_results(idxs.len(), threads, |k| {
            let ex = &ds.examples[idxs[k]];
            self.predict_spans(ex, ds.image(ex))
        })?;
        let gold: Vec<Vec<Span>> = idxs.iter().map(|&i| ds.examples[i].spans.clone()).collect();
        Ok(metrics::span_prf1(&gold, &preds, MatchMode::SpanOnly))
    }

    /// Accuracy over the sentiment-classification records of a dataset.
    pub fn eval_masc(&self, ds: &Dataset, threads: usize) -> Result<f64> {
        let idxs = ds.task_indices(Task::Masc);
        let preds = par_results(idxs.len(), threads, |k| {
            let ex = &ds.examples[idxs[k]];
            self.predict_masc(ex, ds.image(ex), &ds.vocab)
        })?;
        let gold: Vec<Polarity> = idxs
            .iter()
            .map(|&i| ds.examples[i].spans[0].label.expect("sentiment record is labeled"))
            .collect();
        Ok(metrics::accuracy(&gold, &preds))
    }

    /// Micro pair F1 (boundaries and polarity) over the joint records.
    pub fn eval_jmasa(&self, ds: &Dataset, threads: usize) -> Result<EvalReport> {
        let idxs = ds.task_indices(Task::Jmasa);
        let preds = par_results(idxs.len(), threads, |k| {
            let ex = &ds.examples[idxs[k]];
            self.run_jmasa(ex, ds.image(ex), &ds.vocab)
        })?;
        let gold: Vec<Vec<Span>> = idxs.iter().map(|&i| ds.examples[i].spans.clone()).collect();
        Ok(metrics::span_prf1(&gold, &preds, MatchMode::SpanAndPolarity))
    }
}

/// Deterministic fan-out over examples with fixed-order collection.
fn par_results<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        for (t, slice) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (k, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(t * chunk + k));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("all slots filled")).collect()
}

fn trainable(stage: Stage, group: ParamGroup) -> bool {
    if group == ParamGroup::ImageStub {
        return false;
    }
    match stage {
        // First stage: adapter and heads only; embeddings and the text
        // encoder stay at their initial values.
        Stage::Pretrain1 => matches!(
            group,
            ParamGroup::Pdq
                | ParamGroup::VqProj
                | ParamGroup::FreeQuery
                | ParamGroup::Epe
                | ParamGroup::BoundaryHead
                | ParamGroup::ItmHead
        ),
        Stage::Pretrain2 | Stage::Finetune => true,
    }
}

/// Decoupled-weight-decay adaptive optimizer with global-norm gradient
/// clipping. Moments are kept per parameter in registry order; a fresh
/// optimizer is used for each training stage.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &DqpsaModel, lr: f64) -> AdamW {
        let m = model.params.vars.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = model.params.vars.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: 1.0,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, model: &mut DqpsaModel, grads: &[Option<Vec<f64>>], stage: Stage) {
        assert_eq!(grads.len(), model.params.len(), "gradient count mismatch");
        self.t += 1;
        let mut sq = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if trainable(stage, model.params.vars[i].group) {
                    sq += g.iter().map(|x| x * x).sum::<f64>();
                }
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let var = &mut model.params.vars[i];
            if !trainable(stage, var.group) {
                continue;
            }
            let Some(g) = g else { continue };
            // Decay applies to matrices only; bias and gain rows keep their
            // magnitude.
            let decay =
                if var.rows > 1 && var.cols > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                let gk = g[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                let cur = var.value[k];
                var.value[k] = cur - self.lr * (update + decay * cur);
            }
        }
    }
}

/// One optimizer step over a batch. Frozen groups are bit-untouched.
pub fn train_step(
    model: &mut DqpsaModel,
    opt: &mut AdamW,
    items: &[BatchItem],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss_val, grads) = {
        let bl = model.total_loss(items, cfg)?;
        (bl.loss.item(), bl.backward_grads())
    };
    opt.step(model, &grads, cfg.stage);
    Ok(loss_val)
}

/// Tasks that participate in gradient updates. Joint records are an
/// evaluation view composed from the other two and are not trained on.
const TRAIN_TASKS: [Task; 4] = [Task::LabelChoice, Task::DescChoice, Task::Mate, Task::Masc];

fn epoch_batches(ds: &Dataset, batch: usize, rng: &mut Rng) -> Vec<(Task, Vec<usize>)> {
    let mut out = Vec::new();
    for task in TRAIN_TASKS {
        let mut idx = ds.task_indices(task);
        if idx.is_empty() {
            continue;
        }
        rng.shuffle(&mut idx);
        for chunk in idx.chunks(batch) {
            out.push((task, chunk.to_vec()));
        }
    }
    rng.shuffle(&mut out);
    out
}

/// One pass over the trainable records, returning the mean loss per task.
fn run_epoch(
    model: &mut DqpsaModel,
    opt: &mut AdamW,
    ds: &Dataset,
    cfg: &TrainConfig,
    epoch_tag: u64,
) -> Result<Vec<(Task, f64)>> {
    let mut rng = Rng::new(cfg.seed).fork(epoch_tag);
    let mut sums: Vec<(Task, f64, usize)> =
        TRAIN_TASKS.iter().map(|&t| (t, 0.0, 0)).collect();
    for (task, idxs) in epoch_batches(ds, cfg.batch_size, &mut rng) {
        let items: Vec<BatchItem> = idxs
            .iter()
            .map(|&i| {
                let ex = &ds.examples[i];
                BatchItem { example: ex, image: ds.image(ex) }
            })
            .collect();
        let loss = train_step(model, opt, &items, cfg)?;
        let slot = sums.iter_mut().find(|(t, _, _)| *t == task).expect("known task");
        slot.1 += loss;
        slot.2 += 1;
    }
    Ok(sums
        .into_iter()
        .filter(|&(_, _, n)| n > 0)
        .map(|(t, s, n)| (t, s / n as f64))
        .collect())
}

/// Runs every epoch of one stage with a fresh optimizer, appending per-task
/// train-loss rows numbered from `epoch_base + 1`.
pub fn train_stage(
    model: &mut DqpsaModel,
    ds: &Dataset,
    cfg: &TrainConfig,
    epoch_base: usize,
    rows: &mut Vec<MetricsRow>,
) -> Result<usize> {
    cfg.validate()?;
    let mut opt = AdamW::new(model, cfg.lr);
    for e in 1..=cfg.epochs {
        let tag = cfg.stage.tag() * 0x0100_0000 + e as u64;
        let avgs = run_epoch(model, &mut opt, ds, cfg, tag)?;
        for (task, loss) in avgs {
            rows.push(MetricsRow::loss(epoch_base + e, "train", task.prefix(), loss));
        }
    }
    Ok(cfg.epochs)
}

/// Per-stage plan for the full pipeline.
#[derive(Clone, Debug)]
pub struct StagePlan {
    pub pretrain1: TrainConfig,
    pub pretrain2: TrainConfig,
    pub finetune: TrainConfig,
}

impl StagePlan {
    pub fn defaults(seed: u64, batch_size: usize) -> StagePlan {
        let make = |stage| {
            let mut c = TrainConfig::for_stage(stage);
            c.seed = seed;
            c.batch_size = batch_size;
            c
        };
        StagePlan {
            pretrain1: make(Stage::Pretrain1),
            pretrain2: make(Stage::Pretrain2),
            finetune: make(Stage::Finetune),
        }
    }
}

/// Epochs without development-set improvement before finetuning stops.
pub const DEV_PATIENCE: usize = 6;

/// Finetunes with per-epoch development evaluation, keeping the parameters
/// of the best-scoring epoch (joint pair F1 plus sentiment accuracy) and
/// stopping after `DEV_PATIENCE` epochs without improvement.
pub fn finetune_with_selection(
    model: &mut DqpsaModel,
    train: &Dataset,
    dev: &Dataset,
    cfg: &TrainConfig,
    epoch_base: usize,
    threads: usize,
    rows: &mut Vec<MetricsRow>,
) -> Result<()> {
    cfg.validate()?;
    let mut opt = AdamW::new(model, cfg.lr);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_snap = model.snapshot();
    let mut best_epoch = 0;
    for e in 1..=cfg.epochs {
        let tag = cfg.stage.tag() * 0x0100_0000 + e as u64;
        let avgs = run_epoch(model, &mut opt, train, cfg, tag)?;
        let epoch = epoch_base + e;
        for (task, loss) in avgs {
            rows.push(MetricsRow::loss(epoch, "train", task.prefix(), loss));
        }
        let mate = model.eval_mate(dev, threads)?;
        let masc = model.eval_masc(dev, threads)?;
        let jmasa = model.eval_jmasa(dev, threads)?;
        rows.push(MetricsRow::report(epoch, "dev", "mate", &mate));
        rows.push(MetricsRow::accuracy(epoch, "dev", "masc", masc));
        rows.push(MetricsRow::report(epoch, "dev", "jmasa", &jmasa));
        let score = jmasa.f1 + masc;
        if score > best_score + 1e-12 {
            best_score = score;
            best_snap = model.snapshot();
            best_epoch = e;
        }
        if score >= 2.0 - 1e-9 || e - best_epoch >= DEV_PATIENCE {
            break;
        }
    }
    model.restore(&best_snap);
    Ok(())
}

/// The full pipeline: both pretraining stages over the pretraining corpus,
/// then finetuning with development-set selection.
pub fn train_two_stage(
    model: &mut DqpsaModel,
    pretrain: &Dataset,
    train: &Dataset,
    dev: &Dataset,
    plan: &StagePlan,
    threads: usize,
) -> Result<Vec<MetricsRow>> {
    for (cfg, want) in [
        (&plan.pretrain1, Stage::Pretrain1),
        (&plan.pretrain2, Stage::Pretrain2),
        (&plan.finetune, Stage::Finetune),
    ] {
        if cfg.stage != want {
            return Err(Error::config("stage", format!("plan slot expects {}", want.as_str())));
        }
    }
    let mut rows = Vec::new();
    train_stage(model, pretrain, &plan.pretrain1, 0, &mut rows)?;
    train_stage(model, pretrain, &plan.pretrain2, plan.pretrain1.epochs, &mut rows)?;
    let base = plan.pretrain1.epochs + plan.pretrain2.epochs;
    finetune_with_selection(model, train, dev, &plan.finetune, base, threads, &mut rows)?;
    Ok(rows)
}

/// Report of the combined-loss gradient check on the reference geometry.
#[derive(Clone, Copy, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Central finite differences over every parameter entry (strided when
/// `stride > 1`) of the combined loss on the reference geometry, against the
/// gradients the graph computes.
pub fn reference_gradcheck(seed: u64, stride: usize) -> Result<GradcheckReport> {
    let stride = stride.max(1);
    let geometry = ModelGeometry::reference();
    let mut model = DqpsaModel::new(geometry.clone(), Variant::Full, seed)?;
    let mut rng = Rng::new(seed).fork(0x6763);

    let mut examples = Vec::new();
    let mut images = Vec::new();
    for l in [4usize, 5, 6] {
        let tokens: Vec<u32> =
            (0..l).map(|_| rng.below(geometry.vocab_size - 1) as u32 + 1).collect();
        let prompt: Vec<u32> =
            (0..geometry.l_p).map(|_| rng.below(geometry.vocab_size - 1) as u32 + 1).collect();
        let mut spans = vec![Span::new(0, rng.below(l))];
        if l > 2 {
            spans.push(Span::new(l - 1, l - 1));
        }
        examples.push(Example {
            id: format!("mate-ref-{l}"),
            tokens,
            spans,
            prompt,
            image_ref: None,
        });
        let data: Vec<f64> =
            (0..geometry.l_i * geometry.d_raw).map(|_| rng.normal(0.0, 1.0)).collect();
        images.push(ImageMatrix { rows: geometry.l_i, cols: geometry.d_raw, data });
    }
    let items: Vec<BatchItem> = examples
        .iter()
        .zip(&images)
        .map(|(example, image)| BatchItem { example, image: Some(image) })
        .collect();
    // Unit loss weights: down-weighting the matching/contrastive terms pushes
    // some cross-attention gradient entries into finite-difference noise.
    let cfg = TrainConfig { seed, ..TrainConfig::for_stage(Stage::Pretrain2) };

    let analytic = {
        let bl = model.total_loss(&items, &cfg)?;
        bl.backward_grads()
    };

    let h = DEFAULT_H;
    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    for i in 0..model.params.len() {
        let n = model.params.vars[i].value.len();
        for k in (0..n).step_by(stride) {
            let orig = model.params.vars[i].value[k];
            model.params.vars[i].value[k] = orig + h;
            let up = model.total_loss(&items, &cfg)?.loss.item();
            model.params.vars[i].value[k] = orig - h;
            let down = model.total_loss(&items, &cfg)?.loss.item();
            model.params.vars[i].value[k] = orig;
            let gn = (up - down) / (2.0 * h);
            let ga = analytic[i].as_ref().map_or(0.0, |g| g[k]);
            let rel = (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            entries += 1;
        }
    }
    Ok(GradcheckReport { max_rel_err: max_rel, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_mabsa, SyntheticWorldSpec};

    fn tiny_geometry() -> ModelGeometry {
        ModelGeometry {
            d: 8,
            heads: 2,
            pdq_blocks: 1,
            text_blocks: 1,
            d_ff: 16,
            d_img: 8,
            d_raw: 8,
            l_i: 4,
            l_p: 8,
            d_e: 8,
            vocab_size: Vocab::standard().len(),
            max_len: 32,
        }
    }

    fn tiny_world() -> SyntheticWorldSpec {
        SyntheticWorldSpec { d_raw: 8, l_i: 4, ..Default::default() }
    }

    fn tiny_model(variant: Variant) -> DqpsaModel {
        DqpsaModel::new(tiny_geometry(), variant, 7).unwrap()
    }

    fn items(ds: &Dataset, task: Task, n: usize) -> Vec<BatchItem<'_>> {
        ds.task_indices(task)
            .into_iter()
            .take(n)
            .map(|i| {
                let ex = &ds.examples[i];
                BatchItem { example: ex, image: ds.image(ex) }
            })
            .collect()
    }

    fn quick_cfg(stage: Stage) -> TrainConfig {
        let mut cfg = TrainConfig::for_stage(stage);
        cfg.lr = 5e-3;
        cfg
    }

    #[test]
    fn registry_is_deterministic_and_named() {
        let a = tiny_model(Variant::Full);
        let b = tiny_model(Variant::Psa);
        assert_eq!(a.params.len(), b.params.len());
        for (x, y) in a.params.vars().iter().zip(b.params.vars()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value, "same seed must init identically");
        }
        let mut names: Vec<&str> = a.params.vars().iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names[0], "stub.proj");
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), a.params.len(), "parameter names must be unique");
    }

    #[test]
    fn stage_defaults_match_the_pinned_schedule() {
        let p1 = TrainConfig::for_stage(Stage::Pretrain1);
        assert_eq!(
            (p1.lambda_itm, p1.lambda_itc, p1.lambda_epe, p1.lr, p1.epochs),
            (2.0, 2.0, 1.0, 5e-5, 5)
        );
        let p2 = TrainConfig::for_stage(Stage::Pretrain2);
        assert_eq!((p2.lambda_itm, p2.lambda_itc, p2.lambda_epe, p2.lr), (1.0, 1.0, 1.0, 3e-5));
        let ft = TrainConfig::for_stage(Stage::Finetune);
        assert_eq!((ft.lambda_itm, ft.lambda_itc, ft.lambda_epe, ft.lr), (0.1, 0.1, 1.0, 2e-5));
        assert_eq!(ft.epochs, 50);
    }

    #[test]
    fn span_forward_shapes_are_consistent() {
        let model = tiny_model(Variant::Full);
        let ds = gen_mabsa(&tiny_world(), 3, "t").unwrap();
        let i = ds.task_indices(Task::Mate)[0];
        let ex = &ds.examples[i];
        let out = model.forward(ex, ds.image(ex), Mode::SpanTask).unwrap();
        let l = ex.tokens.len();
        let s_out = out.s_out.unwrap();
        assert_eq!((s_out.rows(), s_out.cols()), (l, model.geometry.d));
        let e = out.energies.unwrap();
        assert_eq!((e.rows(), e.cols()), (l, l));
        let vq = out.vq.unwrap();
        assert_eq!((vq.rows(), vq.cols()), (model.geometry.l_p, model.geometry.d));
        let w = out.cross_weights.unwrap();
        assert_eq!((w.rows(), w.cols()), (model.geometry.l_p, model.geometry.l_i));
    }

    #[test]
    fn objective_modes_produce_their_outputs() {
        let model = tiny_model(Variant::Full);
        let ds = gen_mabsa(&tiny_world(), 3, "t").unwrap();
        let i = ds.task_indices(Task::Masc)[0];
        let ex = &ds.examples[i];
        let itm = model.forward(ex, ds.image(ex), Mode::Itm).unwrap();
        let logits = itm.itm_logits.unwrap();
        assert_eq!((logits.rows(), logits.cols()), (1, 2));
        let itc = model.forward(ex, ds.image(ex), Mode::Itc).unwrap();
        let (i_cls, t_cls) = itc.itc_cls.unwrap();
        assert_eq!((i_cls.rows(), i_cls.cols()), (1, model.geometry.d));
        assert_eq!((t_cls.rows(), t_cls.cols()), (1, model.geometry.d));
    }

    #[test]
    fn text_only_variant_rejects_objective_modes() {
        let model = tiny_model(Variant::Psa);
        let ds = gen_mabsa(&tiny_world(), 2, "t").unwrap();
        let i = ds.task_indices(Task::Mate)[0];
        let ex = &ds.examples[i];
        assert!(model.forward(ex, ds.image(ex), Mode::Itm).is_err());
        assert!(model.forward(ex, ds.image(ex), Mode::Itc).is_err());
    }

    #[test]
    fn image_bearing_variants_require_images_for_spans() {
        let model = tiny_model(Variant::Full);
        let ds = gen_mabsa(&tiny_world(), 2, "t").unwrap();
        let i = ds.task_indices(Task::Mate)[0];
        let err = model.forward(&ds.examples[i], None, Mode::SpanTask).err().unwrap();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn total_loss_decomposes_by_weights() {
        let model = tiny_model(Variant::Full);
        let ds = gen_mabsa(&tiny_world(), 4, "t").unwrap();
        let batch = items(&ds, Task::Mate, 3);
        let pure = |itm: f64, itc: f64, epe: f64| {
            let mut cfg = TrainConfig::for_stage(Stage::Finetune);
            (cfg.lambda_itm, cfg.lambda_itc, cfg.lambda_epe) = (itm, itc, epe);
            model.total_loss(&batch, &cfg).unwrap().loss.item()
        };
        let (a, b, c) = (pure(1.0, 0.0, 0.0), pure(0.0, 1.0, 0.0), pure(0.0, 0.0, 1.0));
        let combined = pure(0.1, 0.1, 1.0);
        assert!((combined - (0.1 * a + 0.1 * b + c)).abs() < 1e-12);
        let epe_only = pure(0.0, 0.0, 1.0);
        let bl = {
            let mut cfg = TrainConfig::for_stage(Stage::Finetune);
            (cfg.lambda_itm, cfg.lambda_itc) = (0.0, 0.0);
            model.total_loss(&batch, &cfg).unwrap()
        };
        assert_eq!(bl.loss.item(), epe_only);
        assert!(bl.itm.is_none() && bl.itc.is_none());
    }

    #[test]
    fn empty_batches_are_rejected() {
        let mut model = tiny_model(Variant::Full);
        let cfg = TrainConfig::for_stage(Stage::Finetune);
        let mut opt = AdamW::new(&model, cfg.lr);
        let err = train_step(&mut model, &mut opt, &[], &cfg).err().unwrap();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn training_reduces_the_loss() {
        let mut model = tiny_model(Variant::Full);
        let ds = gen_mabsa(&tiny_world(), 6, "t").unwrap();
        let batch = items(&ds, Task::Mate, 6);
        let cfg = quick_cfg(Stage::Finetune);
        let mut opt = AdamW::new(&model, cfg.lr);
        let first = train_step(&mut model, &mut opt, &batch, &cfg).unwrap();
        let mut last = first;
        for _ in 0..39 {
            last = train_step(&mut model, &mut opt, &batch, &cfg).unwrap();
        }
        assert!(
            last < 0.5 * first,
            "loss should shrink when memorizing a fixed batch: {first} -> {last}"
        );
    }

    #[test]
    fn freeze_masks_hold_bit_exactly() {
        let mut model = tiny_model(Variant::Full);
        let ds = gen_mabsa(&tiny_world(), 4, "t").unwrap();
        let batch = items(&ds, Task::Mate, 4);
        let before = model.snapshot();
        let cfg = quick_cfg(Stage::Pretrain1);
        let mut opt = AdamW::new(&model, cfg.lr);
        train_step(&mut model, &mut opt, &batch, &cfg).unwrap();
        let mut moved = 0;
        for (i, var) in model.params.vars().iter().enumerate() {
            let same = var.value.iter().zip(&before[i]).all(|(a, b)| a.to_bits() == b.to_bits());
            match var.group {
                ParamGroup::ImageStub | ParamGroup::Embeddings | ParamGroup::TextEncoder => {
                    assert!(same, "frozen `{}` moved in the first stage", var.name);
                }
                _ => moved += usize::from(!same),
            }
        }
        assert!(moved > 0, "trainable parameters must move");

        let before = model.snapshot();
        let cfg = quick_cfg(Stage::Pretrain2);
        let mut opt = AdamW::new(&model, cfg.lr);
        train_step(&mut model, &mut opt, &batch, &cfg).unwrap();
        let mut emb_moved = false;
        for (i, var) in model.params.vars().iter().enumerate() {
            let same = var.value.iter().zip(&before[i]).all(|(a, b)| a.to_bits() == b.to_bits());
            match var.group {
                ParamGroup::ImageStub => assert!(same, "the image stub must never move"),
                ParamGroup::Embeddings => emb_moved |= !same,
                _ => {}
            }
        }
        assert!(emb_moved, "embeddings must train in the second stage");
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let ds = gen_mabsa(&tiny_world(), 4, "t").unwrap();
        let run = || {
            let mut model = tiny_model(Variant::Full);
            let batch = items(&ds, Task::Mate, 4);
            let cfg = quick_cfg(Stage::Finetune);
            let mut opt = AdamW::new(&model, cfg.lr);
            let losses: Vec<u64> = (0..3)
                .map(|_| train_step(&mut model, &mut opt, &batch, &cfg).unwrap().to_bits())
                .collect();
            (losses, model.snapshot())
        };
        let (la, sa) = run();
        let (lb, sb) = run();
        assert_eq!(la, lb);
        for (x, y) in sa.iter().zip(&sb) {
            let same = x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "parameters must match bit-for-bit");
        }
    }

    #[test]
    fn variant_containment_counters() {
        let ds = gen_mabsa(&tiny_world(), 3, "t").unwrap();
        let cfg = quick_cfg(Stage::Finetune);
        let batch = items(&ds, Task::Mate, 3);

        attention::reset_cross_eval_count();
        reset_image_encode_count();
        let psa = tiny_model(Variant::Psa);
        psa.total_loss(&batch, &cfg).unwrap().loss.backward();
        assert_eq!(attention::cross_eval_count(), 0, "text-only variant crossed");
        assert_eq!(image_encode_count(), 0, "text-only variant read an image");

        attention::reset_cross_eval_count();
        reset_image_encode_count();
        let nopdq = tiny_model(Variant::NoPdq);
        nopdq.total_loss(&batch, &cfg).unwrap().loss.backward();
        assert_eq!(attention::cross_eval_count(), 0, "free-query variant crossed");
        assert_eq!(image_encode_count(), 0, "free-query variant read an image");

        attention::reset_cross_eval_count();
        reset_image_encode_count();
        let full = tiny_model(Variant::Full);
        full.total_loss(&batch, &cfg).unwrap().loss.backward();
        assert!(attention::cross_eval_count() > 0);
        assert!(image_encode_count() > 0);
    }

    #[test]
    fn joint_inference_is_repeatable_and_well_formed() {
        let model = tiny_model(Variant::Full);
        let ds = gen_mabsa(&tiny_world(), 4, "t").unwrap();
        for &i in &ds.task_indices(Task::Jmasa) {
            let ex = &ds.examples[i];
            let a = model.run_jmasa(ex, ds.image(ex), &ds.vocab).unwrap();
            let b = model.run_jmasa(ex, ds.image(ex), &ds.vocab).unwrap();
            assert_eq!(a, b);
            for s in &a {
                assert!(s.end < ex.tokens.len());
                assert!(s.label.is_some());
            }
        }
    }

    #[test]
    fn empty_decode_falls_back_to_neutral() {
        let mut model = tiny_model(Variant::Full);
        // Zero span projections give zero energies everywhere, and the
        // strict threshold then decodes no spans at all.
        model.params.vars[model.ids.epe_s.0].value.fill(0.0);
        model.params.vars[model.ids.epe_e.0].value.fill(0.0);
        let ds = gen_mabsa(&tiny_world(), 2, "t").unwrap();
        let i = ds.task_indices(Task::Masc)[0];
        let ex = &ds.examples[i];
        assert!(model.predict_spans(ex, ds.image(ex)).unwrap().is_empty());
        assert_eq!(model.predict_masc(ex, ds.image(ex), &ds.vocab).unwrap(), Polarity::Neu);
    }

    #[test]
    fn boundary_variant_decodes_and_differentiates() {
        let mut model = tiny_model(Variant::NoEpe);
        let ds = gen_mabsa(&tiny_world(), 3, "t").unwrap();
        let i = ds.task_indices(Task::Mate)[0];
        let ex = &ds.examples[i];
        let out = model.forward(ex, ds.image(ex), Mode::SpanTask).unwrap();
        assert!(out.energies.is_none());
        let (s, e) = out.boundary.unwrap();
        assert_eq!((s.rows(), s.cols()), (ex.tokens.len(), 1));
        assert_eq!((e.rows(), e.cols()), (ex.tokens.len(), 1));
        model.predict_spans(ex, ds.image(ex)).unwrap();

        // Finite differences on the boundary head entries.
        let batch = items(&ds, Task::Mate, 2);
        let mut cfg = TrainConfig::for_stage(Stage::Finetune);
        (cfg.lambda_itm, cfg.lambda_itc) = (0.0, 0.0);
        let analytic = model.total_loss(&batch, &cfg).unwrap().backward_grads();
        let idx = model.ids.bnd_s.0;
        let ga = analytic[idx].as_ref().unwrap().clone();
        for k in 0..ga.len() {
            let orig = model.params.vars[idx].value[k];
            model.params.vars[idx].value[k] = orig + DEFAULT_H;
            let up = model.total_loss(&batch, &cfg).unwrap().loss.item();
            model.params.vars[idx].value[k] = orig - DEFAULT_H;
            let down = model.total_loss(&batch, &cfg).unwrap().loss.item();
            model.params.vars[idx].value[k] = orig;
            let gn = (up - down) / (2.0 * DEFAULT_H);
            let rel = (ga[k] - gn).abs() / (ga[k].abs() + gn.abs()).max(1e-8);
            assert!(rel < 1e-4, "boundary gradient entry {k}: rel err {rel}");
        }
    }

    #[test]
    fn sampled_reference_gradcheck_passes() {
        let report = reference_gradcheck(11, 41).unwrap();
        assert!(report.entries > 50);
        assert!(
            report.max_rel_err < 1e-4,
            "sampled combined-loss gradients off by {}",
            report.max_rel_err
        );
    }

    #[test]
    fn stored_values_round_trip_through_the_registry() {
        let model = tiny_model(Variant::Full);
        let stored: Vec<(String, usize, usize, Vec<f64>)> = model
            .params
            .vars()
            .iter()
            .map(|v| (v.name.clone(), v.rows, v.cols, v.value.clone()))
            .collect();
        let mut fresh = DqpsaModel::new(tiny_geometry(), Variant::Full, 12345).unwrap();
        fresh.load_values(stored).unwrap();
        for (a, b) in model.params.vars().iter().zip(fresh.params.vars()) {
            assert_eq!(a.value, b.value);
        }
        let mut broken = DqpsaModel::new(tiny_geometry(), Variant::Full, 1).unwrap();
        let err = broken
            .load_values(vec![("wrong.name".to_string(), 1, 1, vec![0.0])])
            .err()
            .unwrap();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn long_prompts_and_foreign_widths_are_rejected() {
        let model = tiny_model(Variant::Full);
        let ds = gen_mabsa(&tiny_world(), 2, "t").unwrap();
        let i = ds.task_indices(Task::Mate)[0];
        let mut ex = ds.examples[i].clone();
        ex.prompt = vec![1; model.geometry.l_p + 1];
        assert!(model.forward(&ex, ds.image(&ds.examples[i]), Mode::SpanTask).is_err());

        let ex = &ds.examples[i];
        let bad = ImageMatrix { rows: 2, cols: 3, data: vec![0.0; 6] };
        assert!(model.forward(ex, Some(&bad), Mode::SpanTask).is_err());
    }
}
