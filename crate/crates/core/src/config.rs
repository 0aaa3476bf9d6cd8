//! Run configuration: network sizes, optimizer settings, and the video
//! protocol knobs (mask cue, accumulative length).

use crate::error::{Error, Result};
use crate::losses::FocalConfig;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// When the previous frame's lane mask feeds the value tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskCueMode {
    /// Never use a mask.
    Off,
    /// Only when predicting the second frame (default).
    SecondFrame,
    /// At every frame, from the previous frame's detections.
    AllFrames,
}

impl FromStr for MaskCueMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(MaskCueMode::Off),
            "second-frame" => Ok(MaskCueMode::SecondFrame),
            "all-frames" => Ok(MaskCueMode::AllFrames),
            other => Err(format!(
                "unknown mask-cue mode {other:?} (expected off, second-frame or all-frames)"
            )),
        }
    }
}

impl std::fmt::Display for MaskCueMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskCueMode::Off => "off",
            MaskCueMode::SecondFrame => "second-frame",
            MaskCueMode::AllFrames => "all-frames",
        };
        f.write_str(s)
    }
}

/// How many frames the accumulative query integrates before it is re-zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulativeLength {
    Fixed(usize),
    All,
}

impl AccumulativeLength {
    /// Whether the query resets before processing 1-based frame number `f`.
    /// With length L the query is re-zeroed before frames 2+L, 2+2L, …, so
    /// it never integrates more than L frames of history.
    pub fn resets_before_frame(&self, frame_number: usize) -> bool {
        match self {
            AccumulativeLength::All => false,
            AccumulativeLength::Fixed(l) => {
                frame_number > 2 && (frame_number - 2) % l == 0
            }
        }
    }
}

impl FromStr for AccumulativeLength {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(AccumulativeLength::All);
        }
        s.parse::<usize>()
            .map_err(|_| format!("bad accumulative length {s:?} (expected a number or \"all\")"))
            .and_then(|n| {
                if n == 0 {
                    Err("accumulative length must be positive".into())
                } else {
                    Ok(AccumulativeLength::Fixed(n))
                }
            })
    }
}

impl AccumulativeLength {
    fn as_string(&self) -> String {
        match self {
            AccumulativeLength::All => "all".into(),
            AccumulativeLength::Fixed(n) => n.to_string(),
        }
    }
}

impl std::fmt::Display for AccumulativeLength {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.as_string())
    }
}

impl Serialize for AccumulativeLength {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for AccumulativeLength {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which aggregation branches are active (the current branch always runs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchToggle {
    pub adjacent: bool,
    pub accumulative: bool,
}

impl Default for BranchToggle {
    fn default() -> Self {
        BranchToggle {
            adjacent: true,
            accumulative: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Feature channels C; the feature grid is the image divided by 8.
    pub channels: usize,
    pub heads: usize,
    pub basis_k: usize,
    pub basis_n: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mask_cue: MaskCueMode,
    pub accumulative_length: AccumulativeLength,
    pub branches: BranchToggle,
    pub prob_threshold: f64,
    pub nms_iou: f64,
    /// Frames unrolled per optimization step; state resets between clips.
    pub clip_len: usize,
    pub clips_per_sequence: usize,
    pub focal: FocalConfig,
    /// LIoU band half-width in feature-grid cells.
    pub liou_extension_cells: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_h: 192,
            image_w: 320,
            channels: 64,
            heads: 4,
            basis_k: 4,
            basis_n: 36,
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 10,
            seed: 1,
            mask_cue: MaskCueMode::SecondFrame,
            accumulative_length: AccumulativeLength::All,
            branches: BranchToggle::default(),
            prob_threshold: 0.5,
            nms_iou: 0.5,
            clip_len: 4,
            clips_per_sequence: 1,
            focal: FocalConfig::default(),
            liou_extension_cells: 3.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Contract {
                op: "RunConfig",
                reason: format!(
                    "channels {} must divide into heads {}",
                    self.channels, self.heads
                ),
            });
        }
        if self.image_h % 8 != 0 || self.image_w % 8 != 0 || self.image_h == 0 {
            return Err(Error::Contract {
                op: "RunConfig",
                reason: format!(
                    "image {}×{} must be divisible by 8 (feature grid = image / 8)",
                    self.image_h, self.image_w
                ),
            });
        }
        if self.basis_k == 0 || self.basis_n < self.basis_k || self.clip_len < 1 {
            return Err(Error::Contract {
                op: "RunConfig",
                reason: "need basis N ≥ K ≥ 1 and clip length ≥ 1".into(),
            });
        }
        Ok(())
    }

    pub fn feature_grid(&self) -> (usize, usize) {
        (self.image_h / 8, self.image_w / 8)
    }

    pub fn cell_width(&self) -> f64 {
        self.image_w as f64 / self.feature_grid().1 as f64
    }

    /// LIoU half-width in image pixels.
    pub fn liou_extension_px(&self) -> f64 {
        self.liou_extension_cells * self.cell_width()
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::data(path.display().to_string(), format!("line {}: {e}", e.line()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
