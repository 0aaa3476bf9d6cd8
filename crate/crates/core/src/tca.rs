//! Temporal context aggregation.
//!
//! Three branches refine the current frame's features: self-attention over
//! the frame itself, cross-attention of the frame's query against the
//! previous frame's key/value pair (short-term), and cross-attention of a
//! persistent query against the same pair (long-term). The branch outputs
//! are summed, and the sum provides the next frame's key/value plus the next
//! persistent query — a recurrence whose carry is three token matrices no
//! matter how long the video runs.

use crate::array::RealArray;
use crate::attention::{self, AttentionWeightIds, AttentionWeights, TokenMatrix};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};

/// The recurrent carry between frames: previous key/value token matrices and
/// the accumulative query, all HW×C, plus the frame counter. Size is
/// independent of how many frames have been processed.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalState {
    pub k_prev: TokenMatrix,
    pub v_prev: TokenMatrix,
    pub q_acc: TokenMatrix,
    pub frame_index: usize,
}

impl TemporalState {
    pub fn new(
        k_prev: TokenMatrix,
        v_prev: TokenMatrix,
        q_acc: TokenMatrix,
        frame_index: usize,
    ) -> Result<Self> {
        let shape = k_prev.as_array().shape().to_vec();
        for m in [&v_prev, &q_acc] {
            if m.as_array().shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "TemporalState",
                    left: shape,
                    right: m.as_array().shape().to_vec(),
                });
            }
        }
        Ok(TemporalState {
            k_prev,
            v_prev,
            q_acc,
            frame_index,
        })
    }

    /// Total bytes held by the three token matrices.
    pub fn byte_size(&self) -> usize {
        self.k_prev.byte_size() + self.v_prev.byte_size() + self.q_acc.byte_size()
    }

    pub fn is_populated(&self) -> bool {
        self.frame_index >= 1
    }

    /// Reset the accumulative query to its video-start zero state.
    pub fn zero_accumulative_query(&mut self) {
        self.q_acc = TokenMatrix::zeros(self.q_acc.tokens(), self.q_acc.channels());
    }
}

/// All learnable parameters of the aggregation network: self-attention for
/// the current branch, the shared query/key projection, and one attention
/// block per cross branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TCAWeights {
    pub self_attn: AttentionWeights,
    /// C×C projection producing queries from current features and keys from
    /// refined features.
    pub phi: RealArray,
    pub adjacent: AttentionWeights,
    pub accumulative: AttentionWeights,
}

impl TCAWeights {
    pub fn zeros(channels: usize, heads: usize) -> Self {
        TCAWeights {
            self_attn: AttentionWeights::zeros(channels, heads),
            phi: RealArray::zeros(vec![channels, channels]),
            adjacent: AttentionWeights::zeros(channels, heads),
            accumulative: AttentionWeights::zeros(channels, heads),
        }
    }

    pub fn random(channels: usize, heads: usize, rng: &mut SplitMix64) -> Self {
        let s = 1.0 / (channels as f64).sqrt();
        TCAWeights {
            self_attn: AttentionWeights::random(channels, heads, rng),
            phi: RealArray::fill_with(vec![channels, channels], || rng.uniform(-s, s)),
            adjacent: AttentionWeights::random(channels, heads, rng),
            accumulative: AttentionWeights::random(channels, heads, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &RealArray)) {
        self.self_attn.visit(&format!("{prefix}.self"), f);
        f(format!("{prefix}.phi"), &self.phi);
        self.adjacent.visit(&format!("{prefix}.adjacent"), f);
        self.accumulative.visit(&format!("{prefix}.accumulative"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut RealArray)) {
        self.self_attn.visit_mut(&format!("{prefix}.self"), f);
        f(format!("{prefix}.phi"), &mut self.phi);
        self.adjacent.visit_mut(&format!("{prefix}.adjacent"), f);
        self.accumulative.visit_mut(&format!("{prefix}.accumulative"), f);
    }
}

/// Tape ids for registered [`TCAWeights`].
#[derive(Debug, Clone)]
pub struct TcaIds {
    pub self_attn: AttentionWeightIds,
    pub phi: NodeId,
    pub adjacent: AttentionWeightIds,
    pub accumulative: AttentionWeightIds,
}

impl TCAWeights {
    pub fn register(&self, tape: &mut Tape) -> TcaIds {
        TcaIds {
            self_attn: self.self_attn.register(tape),
            phi: tape.leaf(self.phi.clone()),
            adjacent: self.adjacent.register(tape),
            accumulative: self.accumulative.register(tape),
        }
    }
}

/// State entries as tape nodes for one frame's graph. For frames past the
/// second these are constant leaves (gradient flow is truncated at the frame
/// boundary); for the second frame they may be live nodes built from the
/// current frame's own features.
#[derive(Debug, Clone, Copy)]
pub struct StateNodes {
    pub k_prev: NodeId,
    pub v_prev: NodeId,
    pub q_acc: NodeId,
}

impl TemporalState {
    /// Register the carried state on a tape as constant leaves.
    pub fn register(&self, tape: &mut Tape) -> StateNodes {
        StateNodes {
            k_prev: tape.leaf(self.k_prev.as_array().clone()),
            v_prev: tape.leaf(self.v_prev.as_array().clone()),
            q_acc: tape.leaf(self.q_acc.as_array().clone()),
        }
    }
}

fn grid_of(tape: &Tape, node: NodeId) -> Result<(usize, usize, usize)> {
    match *tape.value(node).shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::BadShape {
            op: "tca",
            shape: tape.value(node).shape().to_vec(),
            reason: "expected H×W×C features".into(),
        }),
    }
}

/// Flatten H×W×C features to HW×C tokens (metadata-only).
pub fn tokens_of(tape: &mut Tape, features: NodeId) -> Result<NodeId> {
    let (h, w, c) = grid_of(tape, features)?;
    tape.reshape(features, vec![h * w, c])
}

fn to_map(tape: &mut Tape, tokens: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let c = tape.value(tokens).shape()[1];
    tape.reshape(tokens, vec![h, w, c])
}

/// Current branch: self-attention over the frame, then the shared projection
/// to produce the frame's query.
pub fn current_branch(
    tape: &mut Tape,
    features: NodeId,
    ids: &TcaIds,
) -> Result<(NodeId, NodeId)> {
    let (h, w, _) = grid_of(tape, features)?;
    let toks = tokens_of(tape, features)?;
    let refined = attention::self_attention(tape, toks, &ids.self_attn)?;
    let f_t = to_map(tape, refined, h, w)?;
    let q_t = tape.matmul(refined, ids.phi)?;
    Ok((f_t, q_t))
}

fn require_populated(frame_index: usize, op: &'static str) -> Result<()> {
    if frame_index < 1 {
        return Err(Error::Contract {
            op,
            reason: "temporal state is unpopulated; bootstrap the video first".into(),
        });
    }
    Ok(())
}

/// Short-term branch: the current query against the previous key/value pair.
pub fn adjacent_branch(
    tape: &mut Tape,
    q_t: NodeId,
    state: StateNodes,
    frame_index: usize,
    ids: &TcaIds,
    grid: (usize, usize),
) -> Result<NodeId> {
    require_populated(frame_index, "adjacent_branch")?;
    let out = attention::mha(tape, q_t, state.k_prev, state.v_prev, &ids.adjacent)?;
    to_map(tape, out, grid.0, grid.1)
}

/// Long-term branch: the persistent query against the previous key/value
/// pair. Returns the branch output and its token view, which becomes the
/// next persistent query.
pub fn accumulative_branch(
    tape: &mut Tape,
    state: StateNodes,
    frame_index: usize,
    ids: &TcaIds,
    grid: (usize, usize),
) -> Result<(NodeId, NodeId)> {
    require_populated(frame_index, "accumulative_branch")?;
    let out = attention::mha(tape, state.q_acc, state.k_prev, state.v_prev, &ids.accumulative)?;
    let f_ac = to_map(tape, out, grid.0, grid.1)?;
    Ok((f_ac, out))
}

/// Plain unweighted sum of the three branch outputs.
pub fn aggregate(tape: &mut Tape, f_t: NodeId, f_ad: NodeId, f_ac: NodeId) -> Result<NodeId> {
    let partial = tape.add(f_t, f_ad)?;
    tape.add(partial, f_ac)
}

/// Next frame's key/value from the refined features: k = φ(tokens), v is the
/// token view itself with no transformation.
pub fn temporal_update(tape: &mut Tape, fhat: NodeId, phi: NodeId) -> Result<(NodeId, NodeId)> {
    let toks = tokens_of(tape, fhat)?;
    let k_t = tape.matmul(toks, phi)?;
    Ok((k_t, toks))
}

/// All node outputs of one aggregation step. Branch outputs are None when
/// the branch is toggled off.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub fhat: NodeId,
    pub f_current: NodeId,
    pub f_adjacent: Option<NodeId>,
    pub f_accumulative: Option<NodeId>,
    pub k_next: NodeId,
    pub v_next: NodeId,
    pub q_acc_next: NodeId,
}

/// One full aggregation step on an existing tape.
pub fn build_step(
    tape: &mut Tape,
    features: NodeId,
    state: StateNodes,
    frame_index: usize,
    ids: &TcaIds,
) -> Result<StepNodes> {
    build_step_with_branches(
        tape,
        features,
        state,
        frame_index,
        ids,
        crate::config::BranchToggle::default(),
    )
}

/// Aggregation step with selectable cross branches (the current branch
/// always runs). A disabled branch contributes nothing to the sum; with the
/// long-term branch off, the persistent query is carried through unchanged.
pub fn build_step_with_branches(
    tape: &mut Tape,
    features: NodeId,
    state: StateNodes,
    frame_index: usize,
    ids: &TcaIds,
    branches: crate::config::BranchToggle,
) -> Result<StepNodes> {
    let (h, w, _) = grid_of(tape, features)?;
    let (f_t, q_t) = current_branch(tape, features, ids)?;
    let mut fhat = f_t;
    let mut f_ad = None;
    if branches.adjacent {
        let b = adjacent_branch(tape, q_t, state, frame_index, ids, (h, w))?;
        fhat = tape.add(fhat, b)?;
        f_ad = Some(b);
    }
    let mut f_ac = None;
    let mut q_acc_next = state.q_acc;
    if branches.accumulative {
        let (b, q_next) = accumulative_branch(tape, state, frame_index, ids, (h, w))?;
        fhat = tape.add(fhat, b)?;
        f_ac = Some(b);
        q_acc_next = q_next;
    }
    let (k_next, v_next) = temporal_update(tape, fhat, ids.phi)?;
    Ok(StepNodes {
        fhat,
        f_current: f_t,
        f_adjacent: f_ad,
        f_accumulative: f_ac,
        k_next,
        v_next,
        q_acc_next,
    })
}

/// Value-level step: refine one frame and advance the state.
pub fn step(
    features: &RealArray,
    state: &TemporalState,
    weights: &TCAWeights,
) -> Result<(RealArray, TemporalState)> {
    step_with_branches(features, state, weights, crate::config::BranchToggle::default())
}

/// Value-level step honoring a branch toggle.
pub fn step_with_branches(
    features: &RealArray,
    state: &TemporalState,
    weights: &TCAWeights,
    branches: crate::config::BranchToggle,
) -> Result<(RealArray, TemporalState)> {
    require_populated(state.frame_index, "step")?;
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let s = state.register(&mut tape);
    let ids = weights.register(&mut tape);
    let nodes = build_step_with_branches(&mut tape, f, s, state.frame_index, &ids, branches)?;
    let fhat = tape.value(nodes.fhat).clone();
    let next = TemporalState {
        k_prev: TokenMatrix::new(tape.value(nodes.k_next).clone())?,
        v_prev: TokenMatrix::new(tape.value(nodes.v_next).clone())?,
        q_acc: TokenMatrix::new(tape.value(nodes.q_acc_next).clone())?,
        frame_index: state.frame_index + 1,
    };
    Ok((fhat, next))
}
