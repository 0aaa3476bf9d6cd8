//! Recursive video inference.
//!
//! Frame 1 is detected image-style from raw encoder features. Frame 2 runs
//! the aggregation network against a state hand-built from its own features
//! plus (by default) the first frame's lane-mask embedding. Every later
//! frame consumes the state left behind by its predecessor. The state is
//! three HW×C matrices regardless of video length, and frames are consumed
//! strictly in order through a single-pass stream.

use crate::array::RealArray;
use crate::attention::TokenMatrix;
use crate::bootstrap::{bootstrap_second_frame, first_frame_detect, id_embedding, rasterize_lanes};
use crate::config::MaskCueMode;
use crate::error::Result;
use crate::lane::Lane;
use crate::lanehead::detect_lanes;
use crate::model::Model;
use crate::tca::{step_with_branches, TemporalState};

/// Per-frame instrumentation of the recurrence invariants.
#[derive(Debug, Clone)]
pub struct FrameTrace {
    /// 1-based frame number.
    pub frame_number: usize,
    /// Bytes held by the temporal state after this frame (None for frame 1,
    /// which has no state yet).
    pub state_bytes: Option<usize>,
    /// Whether the carried value tokens bitwise-equal the refined feature
    /// tokens of this frame (None for frame 1).
    pub value_tokens_match_refined: Option<bool>,
    /// Whether a lane mask was rasterized and embedded while processing
    /// this frame.
    pub mask_consulted: bool,
    /// Whether the accumulative query was re-zeroed before this frame.
    pub accumulative_reset: bool,
    /// FNV-1a over the refined feature bytes; a cheap divergence probe.
    pub refined_checksum: u64,
}

#[derive(Debug, Clone)]
pub struct VideoInference {
    pub lanes: Vec<Vec<Lane>>,
    pub traces: Vec<FrameTrace>,
}

fn embed_lane_mask(lanes: &[Lane], model: &Model) -> Result<RealArray> {
    let (h, w) = (model.config.image_h, model.config.image_w);
    let mask = rasterize_lanes(lanes, h, w);
    id_embedding(&mask, &model.id_embed, model.config.feature_grid())
}

/// Replace the carried value tokens with φ′(tokens(F̂ + E)) where E embeds
/// this frame's detected lanes (the all-frames mask-cue mode).
fn masked_value_override(
    state: &mut TemporalState,
    fhat: &RealArray,
    lanes: &[Lane],
    model: &Model,
) -> Result<()> {
    let e = embed_lane_mask(lanes, model)?;
    let summed = RealArray::new(
        fhat.shape().to_vec(),
        fhat.data().iter().zip(e.data()).map(|(a, b)| a + b).collect(),
    );
    let hw = fhat.shape()[0] * fhat.shape()[1];
    let toks = summed.reshaped(vec![hw, fhat.shape()[2]])?;
    let v = crate::array::matmul(&toks, &model.phi_prime)?;
    state.v_prev = TokenMatrix::new(v)?;
    Ok(())
}

/// Run the full protocol over a single-pass frame stream.
pub fn infer_stream<I>(frames: I, model: &Model) -> Result<VideoInference>
where
    I: IntoIterator<Item = RealArray>,
{
    let det = model.detection_params();
    let branches = model.config.branches;
    let mut out = VideoInference {
        lanes: Vec::new(),
        traces: Vec::new(),
    };
    let mut state: Option<TemporalState> = None;
    let mut prev_lanes: Vec<Lane> = Vec::new();

    for (t, image) in frames.into_iter().enumerate() {
        let frame_number = t + 1;
        let features = model.encode_value(&image)?;
        let mut mask_consulted = false;
        let mut accumulative_reset = false;

        let (lanes, fhat, new_state) = if frame_number == 1 {
            let (lanes, fhat) = first_frame_detect(&features, &model.heads, &model.basis, &det)?;
            (lanes, fhat, None)
        } else if frame_number == 2 {
            let embedding = match model.config.mask_cue {
                MaskCueMode::Off => None,
                MaskCueMode::SecondFrame | MaskCueMode::AllFrames => {
                    mask_consulted = true;
                    Some(embed_lane_mask(&prev_lanes, model)?)
                }
            };
            let boot = bootstrap_second_frame(
                &features,
                embedding.as_ref(),
                &model.tca.phi,
                &model.phi_prime,
            )?;
            let (fhat, next) = step_with_branches(&features, &boot, &model.tca, branches)?;
            let lanes = detect_lanes(&fhat, &model.heads, &model.basis, &det)?;
            (lanes, fhat, Some(next))
        } else {
            let mut s = state.take().expect("state exists from frame 2 onward");
            if model
                .config
                .accumulative_length
                .resets_before_frame(frame_number)
            {
                s.zero_accumulative_query();
                accumulative_reset = true;
            }
            let (fhat, next) = step_with_branches(&features, &s, &model.tca, branches)?;
            let lanes = detect_lanes(&fhat, &model.heads, &model.basis, &det)?;
            (lanes, fhat, Some(next))
        };

        let mut new_state = new_state;
        if let Some(s) = new_state.as_mut() {
            if model.config.mask_cue == MaskCueMode::AllFrames {
                masked_value_override(s, &fhat, &lanes, model)?;
                mask_consulted = true;
            }
        }

        // the all-frames value override intentionally breaks this identity,
        // so the flag reads false in that mode
        let (state_bytes, v_match) = match &new_state {
            Some(s) => {
                let hw = fhat.shape()[0] * fhat.shape()[1];
                let toks = fhat.reshaped(vec![hw, fhat.shape()[2]])?;
                let matches = s.v_prev.as_array().data() == toks.data();
                (Some(s.byte_size()), Some(matches))
            }
            None => (None, None),
        };

        let refined_checksum = {
            let mut bytes = Vec::with_capacity(fhat.len() * 8);
            for v in fhat.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            crate::synth::fnv1a(&bytes)
        };
        out.traces.push(FrameTrace {
            frame_number,
            state_bytes,
            value_tokens_match_refined: v_match,
            mask_consulted,
            accumulative_reset,
            refined_checksum,
        });
        prev_lanes = lanes.clone();
        out.lanes.push(lanes);
        state = new_state;
    }
    Ok(out)
}

/// Slice-based wrapper over [`infer_stream`]. Empty input yields empty
/// output.
pub fn infer_video(frames: &[RealArray], model: &Model) -> Result<VideoInference> {
    infer_stream(frames.iter().cloned(), model)
}
