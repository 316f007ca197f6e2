//! Utterance-level embeddings and the training objective.
//!
//! Clip-level fused features become a single utterance vector through
//! attentive statistics pooling: a small attention network scores each
//! clip, and the embedding is the attention-weighted mean concatenated
//! with the attention-weighted standard deviation. Pairs of embeddings are
//! compared by cosine similarity. Training optimizes an additive angular
//! margin softmax over scaled cosine logits.

use crate::attention::FusedIds;
use crate::error::{DcaError, Result};
use crate::numerics::{Matrix, Tape, ValueId};

/// Attentive-statistics-pooling parameters for one input dimension `d`:
/// clip scores are `v^T tanh(W h_l + b)` with hidden size equal to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AspParams {
    pub w: Matrix,
    pub b: Matrix,
    pub v: Matrix,
}

impl AspParams {
    pub fn init(dim: usize, rng: &mut impl rand::Rng) -> Self {
        let bound_w = 1.0 / (dim as f64).sqrt();
        let w = Matrix::from_fn(dim, dim, |_, _| rng.random_range(-bound_w..bound_w))
            .expect("uniform init is finite");
        let b = Matrix::zeros(dim, 1);
        let v = Matrix::from_fn(dim, 1, |_, _| rng.random_range(-bound_w..bound_w))
            .expect("uniform init is finite");
        AspParams { w, b, v }
    }

    pub fn tensors(&self, prefix: &'static str) -> Vec<(&'static str, &Matrix)> {
        let names = asp_tensor_names(prefix);
        vec![(names[0], &self.w), (names[1], &self.b), (names[2], &self.v)]
    }

    pub fn tensors_mut(&mut self, prefix: &'static str) -> Vec<(&'static str, &mut Matrix)> {
        let names = asp_tensor_names(prefix);
        vec![
            (names[0], &mut self.w),
            (names[1], &mut self.b),
            (names[2], &mut self.v),
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> (AspIds, Vec<ValueId>) {
        let w = tape.input(self.w.clone());
        let b = tape.input(self.b.clone());
        let v = tape.input(self.v.clone());
        (AspIds { w, b, v }, vec![w, b, v])
    }
}

fn asp_tensor_names(prefix: &'static str) -> [&'static str; 3] {
    match prefix {
        "asp" => ["asp.w", "asp.b", "asp.v"],
        "asp_a" => ["asp_a.w", "asp_a.b", "asp_a.v"],
        "asp_v" => ["asp_v.w", "asp_v.b", "asp_v.v"],
        _ => unreachable!("unknown asp prefix"),
    }
}

/// Tape handles of one ASP parameter set.
#[derive(Debug, Clone, Copy)]
pub struct AspIds {
    pub w: ValueId,
    pub b: ValueId,
    pub v: ValueId,
}

/// Pooling configuration over the fusion output: either one ASP over the
/// row-concatenated sequence, or one ASP per modality with the embeddings
/// concatenated afterwards. Either way the embedding length is
/// 2 (d_a + d_v).
#[derive(Debug, Clone, PartialEq)]
pub enum PoolingParams {
    Joint(AspParams),
    PerModality { audio: AspParams, visual: AspParams },
}

/// Tape handles of the pooling parameters.
#[derive(Debug, Clone, Copy)]
pub enum PoolingIds {
    Joint(AspIds),
    PerModality { audio: AspIds, visual: AspIds },
}

impl PoolingParams {
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            PoolingParams::Joint(p) => p.tensors("asp"),
            PoolingParams::PerModality { audio, visual } => {
                let mut out = audio.tensors("asp_a");
                out.extend(visual.tensors("asp_v"));
                out
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            PoolingParams::Joint(p) => p.tensors_mut("asp"),
            PoolingParams::PerModality { audio, visual } => {
                let mut out = audio.tensors_mut("asp_a");
                out.extend(visual.tensors_mut("asp_v"));
                out
            }
        }
    }

    pub fn register(&self, tape: &mut Tape) -> (PoolingIds, Vec<ValueId>) {
        match self {
            PoolingParams::Joint(p) => {
                let (ids, flat) = p.register(tape);
                (PoolingIds::Joint(ids), flat)
            }
            PoolingParams::PerModality { audio, visual } => {
                let (a_ids, mut flat) = audio.register(tape);
                let (v_ids, v_flat) = visual.register(tape);
                flat.extend(v_flat);
                (
                    PoolingIds::PerModality {
                        audio: a_ids,
                        visual: v_ids,
                    },
                    flat,
                )
            }
        }
    }
}

/// Classifier head for the margin softmax: one weight row per speaker,
/// rows L2-normalized at loss time, not in storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Matrix,
    /// Logit scale s.
    pub scale: f64,
    /// Additive angular margin m, radians, in [0, 0.5].
    pub margin: f64,
}

impl ClassifierHead {
    pub fn init(
        n_speakers: usize,
        embed_dim: usize,
        scale: f64,
        margin: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(DcaError::InvalidParameter(format!(
                "classifier scale must be positive, got {scale}"
            )));
        }
        if !(0.0..=0.5).contains(&margin) {
            return Err(DcaError::InvalidParameter(format!(
                "classifier margin must be in [0, 0.5], got {margin}"
            )));
        }
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let weights = Matrix::from_fn(n_speakers, embed_dim, |_, _| {
            rng.random_range(-bound..bound)
        })
        .expect("uniform init is finite");
        Ok(ClassifierHead {
            weights,
            scale,
            margin,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.weights.rows()
    }
}

/// One utterance's pooled representation: weighted mean concatenated with
/// weighted standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
}

impl UtteranceEmbedding {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        UtteranceEmbedding {
            id: id.into(),
            vector,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

// ── Tape-level builders ─────────────────────────────────────────────────

/// Attentive statistics pooling of a d x L sequence into a 2d x 1 vector.
///
/// Clip scores e_l = v^T tanh(W h_l + b), weights alpha = softmax(e), mean
/// mu = sum_l alpha_l h_l, std sigma = sqrt(max(sum_l alpha_l h_l^2 -
/// mu^2, 0)); the output stacks mu over sigma.
pub(crate) fn build_asp_pool(tape: &mut Tape, h: ValueId, ids: &AspIds) -> Result<ValueId> {
    let clips = tape.value(h).cols();
    let wh = tape.matmul(ids.w, h)?;
    let bias = tape.broadcast_col(ids.b, clips)?;
    let pre = tape.add(wh, bias)?;
    let hidden = tape.tanh(pre);
    let v_t = tape.transpose(ids.v);
    let scores = tape.matmul(v_t, hidden)?; // 1 x L
    let scores_col = tape.transpose(scores);
    let alpha = tape.softmax_cols(scores_col, 1.0)?; // L x 1
    let mu = tape.matmul(h, alpha)?;
    let h_sq = tape.hadamard(h, h)?;
    let second_moment = tape.matmul(h_sq, alpha)?;
    let mu_sq = tape.hadamard(mu, mu)?;
    let var = tape.sub(second_moment, mu_sq)?;
    let sigma = tape.sqrt_floor(var);
    tape.concat_rows(mu, sigma)
}

/// Pool the fusion output into a single embedding column.
pub(crate) fn build_pooled_embedding(
    tape: &mut Tape,
    fused: FusedIds,
    pooling: &PoolingIds,
) -> Result<ValueId> {
    match (fused, pooling) {
        (FusedIds::Single(seq), PoolingIds::Joint(asp)) => build_asp_pool(tape, seq, asp),
        (FusedIds::Pair { audio, visual }, PoolingIds::Joint(asp)) => {
            let joint = tape.concat_rows(audio, visual)?;
            build_asp_pool(tape, joint, asp)
        }
        (FusedIds::Pair { audio, visual }, PoolingIds::PerModality { audio: pa, visual: pv }) => {
            let ea = build_asp_pool(tape, audio, pa)?;
            let ev = build_asp_pool(tape, visual, pv)?;
            tape.concat_rows(ea, ev)
        }
        (FusedIds::Single(_), PoolingIds::PerModality { .. }) => Err(DcaError::Config(
            "per-modality pooling needs a two-sequence fusion output".into(),
        )),
    }
}

/// Margin softmax loss of an embedding column against `label`:
/// cos theta_j from the normalized head rows and normalized embedding, the
/// additive angular margin on the true class, scaling by s, then softmax
/// cross-entropy.
pub(crate) fn build_aam_loss(
    tape: &mut Tape,
    embedding: ValueId,
    label: usize,
    head_weights: ValueId,
    scale: f64,
    margin: f64,
) -> Result<ValueId> {
    let w_norm = tape.normalize_rows(head_weights)?;
    let e_norm = tape.normalize_cols(embedding)?;
    let cos = tape.matmul(w_norm, e_norm)?;
    let with_margin = tape.aam_margin(cos, label, margin)?;
    let logits = tape.scale(with_margin, scale)?;
    tape.cross_entropy_logits(logits, label)
}

// ── Value-level operations ──────────────────────────────────────────────

/// Pool one clip-level sequence; the caller assigns the utterance id.
pub fn asp_pool(h: &Matrix, params: &AspParams) -> Result<UtteranceEmbedding> {
    if params.w.cols() != h.rows() {
        return Err(DcaError::ShapeMismatch {
            op: "asp_pool",
            lhs: params.w.shape(),
            rhs: h.shape(),
        });
    }
    let mut tape = Tape::new();
    let h_id = tape.input(h.clone());
    let (ids, _) = params.register(&mut tape);
    let emb = build_asp_pool(&mut tape, h_id, &ids)?;
    Ok(UtteranceEmbedding::new(
        String::new(),
        tape.value(emb).data().to_vec(),
    ))
}

/// Cosine similarity of two embeddings, in [-1, 1].
pub fn cosine_score(e1: &UtteranceEmbedding, e2: &UtteranceEmbedding) -> Result<f64> {
    if e1.dim() != e2.dim() {
        return Err(DcaError::ShapeMismatch {
            op: "cosine_score",
            lhs: (e1.dim(), 1),
            rhs: (e2.dim(), 1),
        });
    }
    let dot: f64 = e1.vector.iter().zip(&e2.vector).map(|(a, b)| a * b).sum();
    let n1: f64 = e1.vector.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2: f64 = e2.vector.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(DcaError::DegenerateEmbedding);
    }
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Margin softmax loss of a single embedding.
pub fn aam_softmax_loss(
    embedding: &UtteranceEmbedding,
    label: usize,
    head: &ClassifierHead,
) -> Result<f64> {
    if label >= head.n_speakers() {
        return Err(DcaError::InvalidLabel {
            label,
            n_speakers: head.n_speakers(),
        });
    }
    let mut tape = Tape::new();
    let emb = tape.input(Matrix::new(embedding.dim(), 1, embedding.vector.clone())?);
    let w = tape.input(head.weights.clone());
    let loss = build_aam_loss(&mut tape, emb, label, w, head.scale, head.margin)?;
    Ok(tape.scalar(loss))
}
