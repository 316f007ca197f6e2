//! Audio-visual fusion variants.
//!
//! All variants consume a pair of clip-level feature sequences, one per
//! modality, and produce attended clip-level features:
//!
//! - `concat`: row-wise feature concatenation, no parameters.
//! - `self_attention`: single-head scaled dot-product attention over the
//!   concatenated features, with learned query/key/value projections.
//! - `ca`: cross-attention. A learned cross-correlation `Z = Xa^T W Xv`
//!   scores every (audio clip, visual clip) pair; normalized scores mix each
//!   modality's clips, and the mixed features are added back through tanh.
//! - `jca`: joint cross-attention. Each modality is correlated against the
//!   column-concatenated joint representation `J = [Xa, Xv]`, capturing
//!   intra- and inter-modal structure in one set of weights.
//! - `ca_dca` / `jca_dca`: the above plus a conditional gating layer per
//!   modality that scores cross-attended vs. unattended features per clip
//!   through a low-temperature softmax and recombines them under ReLU, so
//!   the model can fall back to unattended features when the other modality
//!   stops being informative.
//!
//! Every operation is a pure function of immutable inputs; training-time
//! differentiation runs the same graph-builder code on a [`Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{DcaError, Result};
use crate::numerics::{Matrix, Tape, ValueId};

/// Which stream a feature sequence carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
    /// Output of an operation that merged both streams.
    Fused,
}

/// One modality's clip-level features: a d x L matrix whose column `l` is
/// the feature vector of clip `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    data: Matrix,
}

impl FeatureSequence {
    pub fn new(modality: Modality, data: Matrix) -> Self {
        FeatureSequence { modality, data }
    }

    /// Feature dimension d.
    pub fn dim(&self) -> usize {
        self.data.rows()
    }

    /// Clip count L.
    pub fn clips(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }
}

/// Fusion strategies, in ladder order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    Concat,
    SelfAttention,
    Ca,
    Jca,
    CaDca,
    JcaDca,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 6] = [
        FusionVariant::Concat,
        FusionVariant::SelfAttention,
        FusionVariant::Ca,
        FusionVariant::Jca,
        FusionVariant::CaDca,
        FusionVariant::JcaDca,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionVariant::Concat => "concat",
            FusionVariant::SelfAttention => "self_attention",
            FusionVariant::Ca => "ca",
            FusionVariant::Jca => "jca",
            FusionVariant::CaDca => "ca_dca",
            FusionVariant::JcaDca => "jca_dca",
        }
    }

    /// Whether the variant ends in the conditional gating layer.
    pub fn gated(&self) -> bool {
        matches!(self, FusionVariant::CaDca | FusionVariant::JcaDca)
    }

    /// Whether fusion emits one attended sequence per modality rather
    /// than a single merged sequence.
    pub fn emits_pair(&self) -> bool {
        !matches!(self, FusionVariant::Concat | FusionVariant::SelfAttention)
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = DcaError;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DcaError::InvalidParameter(format!("unknown fusion variant '{s}'")))
    }
}

impl std::fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Normalization convention for the visual attention map.
///
/// The audio map is always the column-wise softmax of `Z`. The visual map
/// admits two readings that differ in which clip axis is normalized:
/// normalizing each visual clip's scores over the audio axis (so rows of
/// `A_v` sum to 1, and `A_v` is exactly the transpose of the audio map), or
/// applying an independent column-wise softmax to `Z^T` (so columns sum
/// to 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisualAttentionNorm {
    #[default]
    AudioAxis,
    VisualAxis,
}

/// Learned query/key/value projections for the self-attention baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Learnable weights of a fusion variant. Exactly the fields the variant
/// needs are populated; [`FusionParams::validate`] enforces this.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub variant: FusionVariant,
    /// Gate softmax temperature; small values sharpen the selection.
    pub temperature: f64,
    pub av_norm: VisualAttentionNorm,
    /// Cross-correlation weights, d_a x d_v.
    pub w_cross: Option<Matrix>,
    /// Gating layer weights, d x 2 per modality; column 0 scores the
    /// unattended features, column 1 the cross-attended ones.
    pub w_gate_a: Option<Matrix>,
    pub w_gate_v: Option<Matrix>,
    pub w_self: Option<SelfAttentionWeights>,
    /// Joint-attention correlation weights, d x d per modality.
    pub w_joint_a: Option<Matrix>,
    pub w_joint_v: Option<Matrix>,
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], row-major fill order.
fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl rand::Rng) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        .expect("uniform init is finite")
}

impl FusionParams {
    /// Initialize the weights a variant needs. Fan-in is the dimension each
    /// matrix contracts against incoming features.
    pub fn init(
        variant: FusionVariant,
        d_a: usize,
        d_v: usize,
        temperature: f64,
        av_norm: VisualAttentionNorm,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(DcaError::InvalidParameter(format!(
                "gate temperature must be positive, got {temperature}"
            )));
        }
        let mut p = FusionParams {
            variant,
            temperature,
            av_norm,
            w_cross: None,
            w_gate_a: None,
            w_gate_v: None,
            w_self: None,
            w_joint_a: None,
            w_joint_v: None,
        };
        match variant {
            FusionVariant::Concat => {}
            FusionVariant::SelfAttention => {
                let d = d_a + d_v;
                p.w_self = Some(SelfAttentionWeights {
                    query: init_uniform(d, d, d, rng),
                    key: init_uniform(d, d, d, rng),
                    value: init_uniform(d, d, d, rng),
                });
            }
            FusionVariant::Ca => {
                p.w_cross = Some(init_uniform(d_a, d_v, d_a, rng));
            }
            FusionVariant::Jca => {
                Self::require_equal_dims(d_a, d_v)?;
                p.w_joint_a = Some(init_uniform(d_a, d_a, d_a, rng));
                p.w_joint_v = Some(init_uniform(d_v, d_v, d_v, rng));
            }
            FusionVariant::CaDca => {
                p.w_cross = Some(init_uniform(d_a, d_v, d_a, rng));
                p.w_gate_a = Some(Matrix::zeros(d_a, 2));
                p.w_gate_v = Some(Matrix::zeros(d_v, 2));
            }
            FusionVariant::JcaDca => {
                Self::require_equal_dims(d_a, d_v)?;
                p.w_joint_a = Some(init_uniform(d_a, d_a, d_a, rng));
                p.w_joint_v = Some(init_uniform(d_v, d_v, d_v, rng));
                p.w_gate_a = Some(Matrix::zeros(d_a, 2));
                p.w_gate_v = Some(Matrix::zeros(d_v, 2));
            }
        }
        Ok(p)
    }

    fn require_equal_dims(d_a: usize, d_v: usize) -> Result<()> {
        if d_a != d_v {
            return Err(DcaError::InvalidParameter(format!(
                "joint cross-attention requires equal feature dimensions, got d_a={d_a}, d_v={d_v}"
            )));
        }
        Ok(())
    }

    /// Check that exactly the fields the variant requires are present and
    /// correctly shaped for the given feature dimensions.
    pub fn validate(&self, d_a: usize, d_v: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(DcaError::InvalidParameter(format!(
                "gate temperature must be positive, got {}",
                self.temperature
            )));
        }
        let expect = |present: bool, want: bool, name: &str| -> Result<()> {
            if present != want {
                let verb = if want { "missing" } else { "unexpected" };
                return Err(DcaError::InvalidParameter(format!(
                    "{verb} {name} for variant {}",
                    self.variant
                )));
            }
            Ok(())
        };
        let v = self.variant;
        expect(
            self.w_cross.is_some(),
            matches!(v, FusionVariant::Ca | FusionVariant::CaDca),
            "w_cross",
        )?;
        expect(
            self.w_gate_a.is_some() && self.w_gate_v.is_some(),
            v.gated(),
            "gate weights",
        )?;
        expect(
            self.w_self.is_some(),
            v == FusionVariant::SelfAttention,
            "self-attention weights",
        )?;
        expect(
            self.w_joint_a.is_some() && self.w_joint_v.is_some(),
            matches!(v, FusionVariant::Jca | FusionVariant::JcaDca),
            "joint weights",
        )?;

        if let Some(w) = &self.w_cross {
            check_shape("w_cross", w, (d_a, d_v))?;
        }
        if let Some(w) = &self.w_gate_a {
            check_shape("w_gate_a", w, (d_a, 2))?;
        }
        if let Some(w) = &self.w_gate_v {
            check_shape("w_gate_v", w, (d_v, 2))?;
        }
        if let Some(w) = &self.w_self {
            let d = d_a + d_v;
            check_shape("w_query", &w.query, (d, d))?;
            check_shape("w_key", &w.key, (d, d))?;
            check_shape("w_value", &w.value, (d, d))?;
        }
        if self.w_joint_a.is_some() {
            Self::require_equal_dims(d_a, d_v)?;
        }
        if let Some(w) = &self.w_joint_a {
            check_shape("w_joint_a", w, (d_a, d_a))?;
        }
        if let Some(w) = &self.w_joint_v {
            check_shape("w_joint_v", w, (d_v, d_v))?;
        }
        Ok(())
    }

    /// Parameter tensors in declared order; the checkpoint format and the
    /// optimizer state rely on this order being stable.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = Vec::new();
        if let Some(w) = &self.w_cross {
            out.push(("fusion.w_cross", w));
        }
        if let Some(w) = &self.w_joint_a {
            out.push(("fusion.w_joint_a", w));
        }
        if let Some(w) = &self.w_joint_v {
            out.push(("fusion.w_joint_v", w));
        }
        if let Some(w) = &self.w_self {
            out.push(("fusion.w_query", &w.query));
            out.push(("fusion.w_key", &w.key));
            out.push(("fusion.w_value", &w.value));
        }
        if let Some(w) = &self.w_gate_a {
            out.push(("fusion.w_gate_a", w));
        }
        if let Some(w) = &self.w_gate_v {
            out.push(("fusion.w_gate_v", w));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.w_cross {
            out.push(("fusion.w_cross", w));
        }
        if let Some(w) = &mut self.w_joint_a {
            out.push(("fusion.w_joint_a", w));
        }
        if let Some(w) = &mut self.w_joint_v {
            out.push(("fusion.w_joint_v", w));
        }
        if let Some(w) = &mut self.w_self {
            out.push(("fusion.w_query", &mut w.query));
            out.push(("fusion.w_key", &mut w.key));
            out.push(("fusion.w_value", &mut w.value));
        }
        if let Some(w) = &mut self.w_gate_a {
            out.push(("fusion.w_gate_a", w));
        }
        if let Some(w) = &mut self.w_gate_v {
            out.push(("fusion.w_gate_v", w));
        }
        out
    }
}

fn check_shape(name: &str, m: &Matrix, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(DcaError::InvalidParameter(format!(
            "{name} has shape {:?}, expected {:?}",
            m.shape(),
            want
        )));
    }
    Ok(())
}

/// Clip-to-clip attention maps of one fusion pass. For plain
/// cross-attention both maps are L x L; for joint cross-attention they are
/// L x 2L (scores against the joint representation).
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub a_audio: Matrix,
    pub a_visual: Matrix,
}

/// Per-clip gate scores, L x 2: column 0 weighs the unattended features,
/// column 1 the cross-attended features. Rows sum to 1 and every entry is
/// strictly inside (0, 1) for finite logits.
#[derive(Debug, Clone)]
pub struct GateScores {
    pub g: Matrix,
}

// ── Tape-level graph builders ───────────────────────────────────────────
//
// These are the single source of the fusion formulas: the value-level API
// below and the trainer both run them.

/// Ids of fusion parameters registered on a tape, in `tensors()` order.
#[derive(Debug, Clone, Default)]
pub struct FusionIds {
    pub w_cross: Option<ValueId>,
    pub w_joint_a: Option<ValueId>,
    pub w_joint_v: Option<ValueId>,
    pub w_query: Option<ValueId>,
    pub w_key: Option<ValueId>,
    pub w_value: Option<ValueId>,
    pub w_gate_a: Option<ValueId>,
    pub w_gate_v: Option<ValueId>,
}

impl FusionParams {
    /// Register every present tensor on the tape, in `tensors()` order, and
    /// return both the semantic handle struct and the flat ordered ids.
    pub fn register(&self, tape: &mut Tape) -> (FusionIds, Vec<ValueId>) {
        let mut ids = FusionIds::default();
        let mut flat = Vec::new();
        let reg = |tape: &mut Tape, m: &Matrix, slot: &mut Option<ValueId>, flat: &mut Vec<ValueId>| {
            let id = tape.input(m.clone());
            *slot = Some(id);
            flat.push(id);
        };
        if let Some(w) = &self.w_cross {
            reg(tape, w, &mut ids.w_cross, &mut flat);
        }
        if let Some(w) = &self.w_joint_a {
            reg(tape, w, &mut ids.w_joint_a, &mut flat);
        }
        if let Some(w) = &self.w_joint_v {
            reg(tape, w, &mut ids.w_joint_v, &mut flat);
        }
        if let Some(w) = &self.w_self {
            reg(tape, &w.query, &mut ids.w_query, &mut flat);
            reg(tape, &w.key, &mut ids.w_key, &mut flat);
            reg(tape, &w.value, &mut ids.w_value, &mut flat);
        }
        if let Some(w) = &self.w_gate_a {
            reg(tape, w, &mut ids.w_gate_a, &mut flat);
        }
        if let Some(w) = &self.w_gate_v {
            reg(tape, w, &mut ids.w_gate_v, &mut flat);
        }
        (ids, flat)
    }
}

/// Fusion output on the tape: either a single merged sequence or one
/// attended sequence per modality.
#[derive(Debug, Clone, Copy)]
pub enum FusedIds {
    Single(ValueId),
    Pair { audio: ValueId, visual: ValueId },
}

pub(crate) struct CrossAttendIds {
    pub xatt_a: ValueId,
    pub xatt_v: ValueId,
    pub a_audio: ValueId,
    pub a_visual: ValueId,
}

/// Cross-attention: Z = Xa^T W Xv; the audio map is the column softmax of
/// Z, the visual map follows `av_norm`; each modality mixes its own clips
/// with its map and re-enters through a tanh residual.
pub(crate) fn build_cross_attend(
    tape: &mut Tape,
    xa: ValueId,
    xv: ValueId,
    w_cross: ValueId,
    av_norm: VisualAttentionNorm,
) -> Result<CrossAttendIds> {
    let xa_t = tape.transpose(xa);
    let xat_w = tape.matmul(xa_t, w_cross).map_err(|e| match e {
        DcaError::ShapeMismatch { lhs, rhs, .. } => DcaError::ShapeMismatch {
            op: "cross_correlation",
            lhs,
            rhs,
        },
        other => other,
    })?;
    let z = tape.matmul(xat_w, xv).map_err(|e| match e {
        DcaError::ShapeMismatch { lhs, rhs, .. } => DcaError::ShapeMismatch {
            op: "cross_correlation",
            lhs,
            rhs,
        },
        other => other,
    })?;
    let a_audio = tape.softmax_cols(z, 1.0)?;
    let a_visual = match av_norm {
        VisualAttentionNorm::AudioAxis => tape.transpose(a_audio),
        VisualAttentionNorm::VisualAxis => {
            let z_t = tape.transpose(z);
            tape.softmax_cols(z_t, 1.0)?
        }
    };
    let xhat_a = tape.matmul(xa, a_audio)?;
    let xhat_v = tape.matmul(xv, a_visual)?;
    let sum_a = tape.add(xa, xhat_a)?;
    let sum_v = tape.add(xv, xhat_v)?;
    Ok(CrossAttendIds {
        xatt_a: tape.tanh(sum_a),
        xatt_v: tape.tanh(sum_v),
        a_audio,
        a_visual,
    })
}

/// Joint cross-attention: each modality is correlated against the joint
/// representation J = [Xa, Xv] (d x 2L), scores are normalized over the
/// joint 2L axis so each clip holds a convex weighting of the joint
/// columns, and the mixed joint columns are projected back to d x L.
pub(crate) fn build_joint_cross_attend(
    tape: &mut Tape,
    xa: ValueId,
    xv: ValueId,
    w_joint_a: ValueId,
    w_joint_v: ValueId,
) -> Result<CrossAttendIds> {
    let j = tape.concat_cols(xa, xv)?;
    let branch = |tape: &mut Tape, x: ValueId, w: ValueId| -> Result<(ValueId, ValueId)> {
        let x_t = tape.transpose(x);
        let xw = tape.matmul(x_t, w)?;
        let z = tape.matmul(xw, j)?; // L x 2L
        let z_t = tape.transpose(z);
        let a_t = tape.softmax_cols(z_t, 1.0)?; // 2L x L, columns sum to 1
        let a = tape.transpose(a_t); // L x 2L, rows sum to 1
        let xhat = tape.matmul(j, a_t)?; // d x L
        let sum = tape.add(x, xhat)?;
        Ok((tape.tanh(sum), a))
    };
    let (xatt_a, a_audio) = branch(tape, xa, w_joint_a)?;
    let (xatt_v, a_visual) = branch(tape, xv, w_joint_v)?;
    Ok(CrossAttendIds {
        xatt_a,
        xatt_v,
        a_audio,
        a_visual,
    })
}

/// Conditional gating layer: per-clip scores over {unattended,
/// cross-attended} from a linear layer on the cross-attended features,
/// sharpened by a temperature softmax, replicated across the feature
/// dimension, and recombined under ReLU.
pub(crate) fn build_dynamic_gate(
    tape: &mut Tape,
    x: ValueId,
    xatt: ValueId,
    w_gate: ValueId,
    temperature: f64,
) -> Result<(ValueId, ValueId)> {
    let dim = tape.value(x).rows();
    let xatt_t = tape.transpose(xatt);
    let y_go = tape.matmul(xatt_t, w_gate)?; // L x 2
    // row-wise softmax via the transposed column softmax
    let y_t = tape.transpose(y_go);
    let g_t = tape.softmax_cols(y_t, temperature)?;
    let g = tape.transpose(g_t); // L x 2, rows sum to 1
    let g0 = tape.replicate_col(g, 0, dim)?;
    let g1 = tape.replicate_col(g, 1, dim)?;
    let unattended = tape.hadamard(x, g0)?;
    let attended = tape.hadamard(xatt, g1)?;
    let mixed = tape.add(unattended, attended)?;
    Ok((tape.relu(mixed), g))
}

/// Single-head scaled dot-product self-attention over the concatenated
/// features, with a tanh residual matching the cross-attention variants.
pub(crate) fn build_self_attention(
    tape: &mut Tape,
    xa: ValueId,
    xv: ValueId,
    w_query: ValueId,
    w_key: ValueId,
    w_value: ValueId,
) -> Result<ValueId> {
    let c = tape.concat_rows(xa, xv)?;
    let d = tape.value(c).rows();
    let q = tape.matmul(w_query, c)?;
    let k = tape.matmul(w_key, c)?;
    let v = tape.matmul(w_value, c)?;
    let k_t = tape.transpose(k);
    let scores = tape.matmul(k_t, q)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let a = tape.softmax_cols(scaled, 1.0)?;
    let ctx = tape.matmul(v, a)?;
    let sum = tape.add(c, ctx)?;
    Ok(tape.tanh(sum))
}

/// Build the configured variant's full fusion graph.
pub(crate) fn build_fusion(
    tape: &mut Tape,
    ids: &FusionIds,
    params: &FusionParams,
    xa: ValueId,
    xv: ValueId,
) -> Result<FusedIds> {
    let missing =
        |name: &str| DcaError::InvalidParameter(format!("missing {name} for variant {}", params.variant));
    match params.variant {
        FusionVariant::Concat => Ok(FusedIds::Single(tape.concat_rows(xa, xv)?)),
        FusionVariant::SelfAttention => {
            let (q, k, v) = (
                ids.w_query.ok_or_else(|| missing("w_query"))?,
                ids.w_key.ok_or_else(|| missing("w_key"))?,
                ids.w_value.ok_or_else(|| missing("w_value"))?,
            );
            Ok(FusedIds::Single(build_self_attention(tape, xa, xv, q, k, v)?))
        }
        FusionVariant::Ca => {
            let w = ids.w_cross.ok_or_else(|| missing("w_cross"))?;
            let ca = build_cross_attend(tape, xa, xv, w, params.av_norm)?;
            Ok(FusedIds::Pair {
                audio: ca.xatt_a,
                visual: ca.xatt_v,
            })
        }
        FusionVariant::Jca => {
            let wa = ids.w_joint_a.ok_or_else(|| missing("w_joint_a"))?;
            let wv = ids.w_joint_v.ok_or_else(|| missing("w_joint_v"))?;
            let ca = build_joint_cross_attend(tape, xa, xv, wa, wv)?;
            Ok(FusedIds::Pair {
                audio: ca.xatt_a,
                visual: ca.xatt_v,
            })
        }
        FusionVariant::CaDca | FusionVariant::JcaDca => {
            let ca = if params.variant == FusionVariant::CaDca {
                let w = ids.w_cross.ok_or_else(|| missing("w_cross"))?;
                build_cross_attend(tape, xa, xv, w, params.av_norm)?
            } else {
                let wa = ids.w_joint_a.ok_or_else(|| missing("w_joint_a"))?;
                let wv = ids.w_joint_v.ok_or_else(|| missing("w_joint_v"))?;
                build_joint_cross_attend(tape, xa, xv, wa, wv)?
            };
            let ga = ids.w_gate_a.ok_or_else(|| missing("w_gate_a"))?;
            let gv = ids.w_gate_v.ok_or_else(|| missing("w_gate_v"))?;
            let (gated_a, _) = build_dynamic_gate(tape, xa, ca.xatt_a, ga, params.temperature)?;
            let (gated_v, _) = build_dynamic_gate(tape, xv, ca.xatt_v, gv, params.temperature)?;
            Ok(FusedIds::Pair {
                audio: gated_a,
                visual: gated_v,
            })
        }
    }
}

// ── Value-level operations ──────────────────────────────────────────────

fn check_clip_counts(xa: &FeatureSequence, xv: &FeatureSequence) -> Result<()> {
    if xa.clips() != xv.clips() {
        return Err(DcaError::ShapeMismatch {
            op: "clip count",
            lhs: xa.data.shape(),
            rhs: xv.data.shape(),
        });
    }
    Ok(())
}

/// Cross-correlation Z = Xa^T W Xv; entry (i, j) scores how related audio
/// clip i and visual clip j are.
pub fn cross_correlation(xa: &FeatureSequence, xv: &FeatureSequence, w: &Matrix) -> Result<Matrix> {
    check_clip_counts(xa, xv)?;
    if w.shape() != (xa.dim(), xv.dim()) {
        return Err(DcaError::ShapeMismatch {
            op: "cross_correlation weights",
            lhs: w.shape(),
            rhs: (xa.dim(), xv.dim()),
        });
    }
    xa.data.transpose().matmul(w)?.matmul(&xv.data)
}

/// Vanilla cross-attention. Returns the attended sequences and the
/// attention maps.
pub fn cross_attend(
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    params: &FusionParams,
) -> Result<(FeatureSequence, FeatureSequence, AttentionMaps)> {
    check_clip_counts(xa, xv)?;
    let w = params
        .w_cross
        .as_ref()
        .ok_or_else(|| DcaError::InvalidParameter("missing w_cross".into()))?;
    if w.shape() != (xa.dim(), xv.dim()) {
        return Err(DcaError::ShapeMismatch {
            op: "cross_correlation weights",
            lhs: w.shape(),
            rhs: (xa.dim(), xv.dim()),
        });
    }
    let mut tape = Tape::new();
    let a = tape.input(xa.data.clone());
    let v = tape.input(xv.data.clone());
    let wid = tape.input(w.clone());
    let out = build_cross_attend(&mut tape, a, v, wid, params.av_norm)?;
    Ok((
        FeatureSequence::new(Modality::Audio, tape.value(out.xatt_a).clone()),
        FeatureSequence::new(Modality::Visual, tape.value(out.xatt_v).clone()),
        AttentionMaps {
            a_audio: tape.value(out.a_audio).clone(),
            a_visual: tape.value(out.a_visual).clone(),
        },
    ))
}

/// Joint cross-attention against the concatenated representation.
pub fn joint_cross_attend(
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    params: &FusionParams,
) -> Result<(FeatureSequence, FeatureSequence, AttentionMaps)> {
    check_clip_counts(xa, xv)?;
    FusionParams::require_equal_dims(xa.dim(), xv.dim())?;
    let (wa, wv) = match (&params.w_joint_a, &params.w_joint_v) {
        (Some(a), Some(v)) => (a, v),
        _ => {
            return Err(DcaError::InvalidParameter(
                "missing joint weights".into(),
            ))
        }
    };
    let mut tape = Tape::new();
    let a = tape.input(xa.data.clone());
    let v = tape.input(xv.data.clone());
    let wa_id = tape.input(wa.clone());
    let wv_id = tape.input(wv.clone());
    let out = build_joint_cross_attend(&mut tape, a, v, wa_id, wv_id)?;
    Ok((
        FeatureSequence::new(Modality::Audio, tape.value(out.xatt_a).clone()),
        FeatureSequence::new(Modality::Visual, tape.value(out.xatt_v).clone()),
        AttentionMaps {
            a_audio: tape.value(out.a_audio).clone(),
            a_visual: tape.value(out.a_visual).clone(),
        },
    ))
}

/// Conditional gating layer over one modality.
pub fn dynamic_gate(
    x: &FeatureSequence,
    xatt: &FeatureSequence,
    w_gate: &Matrix,
    temperature: f64,
) -> Result<(FeatureSequence, GateScores)> {
    if x.data.shape() != xatt.data.shape() {
        return Err(DcaError::ShapeMismatch {
            op: "dynamic_gate",
            lhs: x.data.shape(),
            rhs: xatt.data.shape(),
        });
    }
    if w_gate.shape() != (x.dim(), 2) {
        return Err(DcaError::ShapeMismatch {
            op: "gate weights",
            lhs: w_gate.shape(),
            rhs: (x.dim(), 2),
        });
    }
    let mut tape = Tape::new();
    let x_id = tape.input(x.data.clone());
    let xatt_id = tape.input(xatt.data.clone());
    let w_id = tape.input(w_gate.clone());
    let (gated, g) = build_dynamic_gate(&mut tape, x_id, xatt_id, w_id, temperature)?;
    Ok((
        FeatureSequence::new(x.modality, tape.value(gated).clone()),
        GateScores {
            g: tape.value(g).clone(),
        },
    ))
}

/// Full dynamically gated fusion: cross-attend (plain or joint), then gate
/// each modality with its own weights.
pub fn dca_fuse(
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    params: &FusionParams,
) -> Result<(FeatureSequence, FeatureSequence)> {
    if !params.variant.gated() {
        return Err(DcaError::InvalidParameter(format!(
            "dca_fuse requires a gated variant, got {}",
            params.variant
        )));
    }
    check_clip_counts(xa, xv)?;
    let mut tape = Tape::new();
    let a = tape.input(xa.data.clone());
    let v = tape.input(xv.data.clone());
    let (ids, _) = params.register(&mut tape);
    match build_fusion(&mut tape, &ids, params, a, v)? {
        FusedIds::Pair { audio, visual } => Ok((
            FeatureSequence::new(Modality::Audio, tape.value(audio).clone()),
            FeatureSequence::new(Modality::Visual, tape.value(visual).clone()),
        )),
        FusedIds::Single(_) => unreachable!("gated variants produce a pair"),
    }
}

/// Self-attention fusion of the concatenated features.
pub fn self_attention_fuse(
    xa: &FeatureSequence,
    xv: &FeatureSequence,
    params: &FusionParams,
) -> Result<FeatureSequence> {
    check_clip_counts(xa, xv)?;
    let w = params
        .w_self
        .as_ref()
        .ok_or_else(|| DcaError::InvalidParameter("missing self-attention weights".into()))?;
    let mut tape = Tape::new();
    let a = tape.input(xa.data.clone());
    let v = tape.input(xv.data.clone());
    let q = tape.input(w.query.clone());
    let k = tape.input(w.key.clone());
    let val = tape.input(w.value.clone());
    let out = build_self_attention(&mut tape, a, v, q, k, val)?;
    Ok(FeatureSequence::new(Modality::Fused, tape.value(out).clone()))
}

/// Row-wise feature concatenation, audio rows first.
pub fn concat_fuse(xa: &FeatureSequence, xv: &FeatureSequence) -> Result<FeatureSequence> {
    check_clip_counts(xa, xv)?;
    let mut tape = Tape::new();
    let a = tape.input(xa.data.clone());
    let v = tape.input(xv.data.clone());
    let c = tape.concat_rows(a, v)?;
    Ok(FeatureSequence::new(Modality::Fused, tape.value(c).clone()))
}
