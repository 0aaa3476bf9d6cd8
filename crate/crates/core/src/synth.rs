//! Procedural road-scene generator.
//!
//! Scenes are perspective-projected lane lines converging toward a drifting
//! vanishing point, with curvature, ego sway, dashed markings, rectangular
//! occluders, glare discs, lane-change events and Gaussian pixel noise. All
//! randomness comes from one SplitMix64 stream, so a seed pins every pixel
//! and every annotation bit-for-bit.
//!
//! Dataset directory layout:
//!   frames/NNNNN.ppm   binary P6, 8-bit
//!   annotations.json   per-frame lanes as normalized [x, y] points + ids,
//!                      with an FNV-1a checksum over the frame array
//!   meta.json          the generating SceneConfig, seed included

use crate::array::RealArray;
use crate::error::{Error, Result};
use crate::lane::Lane;
use crate::ppm;
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_lanes: usize,
    pub max_lanes: usize,
    /// Road curvature strength in [0, 1].
    pub curvature_amplitude: f64,
    /// Scene evolution rate per frame in [0, 1].
    pub ego_speed: f64,
    /// Per-frame probability of spawning an occluder (and half that for a
    /// glare disc).
    pub occlusion_prob: f64,
    /// Fraction of each dash cycle that is painted; 1.0 draws solid lines.
    pub dash_duty: f64,
    /// Per-frame probability of starting a lane-change event.
    pub lane_change_prob: f64,
    /// Gaussian pixel noise sigma.
    pub noise_level: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 1,
            frames: 20,
            height: 192,
            width: 320,
            min_lanes: 2,
            max_lanes: 4,
            curvature_amplitude: 0.5,
            ego_speed: 0.5,
            occlusion_prob: 0.15,
            dash_duty: 0.7,
            lane_change_prob: 0.02,
            noise_level: 0.01,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.frames == 0
            || self.height < 16
            || self.width < 16
            || self.min_lanes == 0
            || self.max_lanes < self.min_lanes
            || self.max_lanes > 4
            || !(0.0..=1.0).contains(&self.dash_duty)
        {
            return Err(Error::Contract {
                op: "SceneConfig",
                reason: format!("invalid configuration {self:?}"),
            });
        }
        Ok(())
    }
}

/// Number of ground-truth sample points per lane.
pub const GT_SAMPLES: usize = 32;
/// Horizon height as a fraction of the image.
pub const HORIZON: f64 = 0.35;
/// Lowest sampled lane position, as the parameter v in (0, 1].
pub const GT_V_START: f64 = 0.08;

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub config: SceneConfig,
    /// T images, H×W×3 reals in [0, 1].
    pub frames: Vec<RealArray>,
    /// Per-frame ground-truth lanes.
    pub gt: Vec<Vec<Lane>>,
    /// Per-frame stable lane ids, parallel to `gt`.
    pub ids: Vec<Vec<u32>>,
}

/// Upper bound on per-lane horizontal point displacement between adjacent
/// frames, outside lane-change events. Derived from the motion model: the
/// vanishing point, sway and curvature terms each advance their phase by a
/// rate proportional to ego speed.
pub fn max_frame_displacement(cfg: &SceneConfig) -> f64 {
    let w = cfg.width as f64;
    let vp = 0.05 * w * 0.10 * cfg.ego_speed;
    let sway = 0.01 * w * 0.30 * cfg.ego_speed;
    let curve = 0.25 * w * cfg.curvature_amplitude * 0.15 * cfg.ego_speed;
    vp + sway + curve
}

struct Occluder {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    vy: f64,
    color: [f64; 3],
    ttl: usize,
}

struct Glare {
    cx: f64,
    cy: f64,
    radius: f64,
    intensity: f64,
    ttl: usize,
}

struct SceneState {
    n_lanes: usize,
    /// Ego lateral position in slot units; lanes sit at integer slots.
    ego: f64,
    ego_from: f64,
    ego_target: f64,
    change_progress: Option<f64>,
    slot_base: i64,
    theta_vp: f64,
    theta_sway: f64,
    theta_curve: f64,
    dash_phase: f64,
    occluders: Vec<Occluder>,
    glares: Vec<Glare>,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Lane-line center x at vertical parameter v (0 at horizon, 1 at bottom).
fn lane_x(cfg: &SceneConfig, s: &SceneState, slot: i64, v: f64) -> f64 {
    let w = cfg.width as f64;
    let spacing = w / 5.0;
    let x_vp = w / 2.0 + 0.05 * w * s.theta_vp.sin();
    let sway = 0.01 * w * s.theta_sway.sin();
    let bottom = w / 2.0 + (slot as f64 - s.ego) * spacing + sway;
    let kappa = cfg.curvature_amplitude * s.theta_curve.sin();
    x_vp + (bottom - x_vp) * v + 0.25 * w * kappa * (1.0 - v) * (1.0 - v)
}

fn visible_slots(s: &SceneState) -> Vec<i64> {
    let n = s.n_lanes as i64;
    (0..n).map(|i| s.slot_base + i).collect()
}

fn gt_lanes(cfg: &SceneConfig, s: &SceneState) -> (Vec<Lane>, Vec<u32>) {
    let h = cfg.height as f64;
    let horizon = HORIZON * (h - 1.0);
    let mut lanes = Vec::new();
    let mut ids = Vec::new();
    for slot in visible_slots(s) {
        let mut pts = Vec::with_capacity(GT_SAMPLES);
        for i in 0..GT_SAMPLES {
            let v = GT_V_START + (1.0 - GT_V_START) * i as f64 / (GT_SAMPLES - 1) as f64;
            let y = horizon + v * ((h - 1.0) - horizon);
            let x = lane_x(cfg, s, slot, v).clamp(0.0, (cfg.width - 1) as f64);
            pts.push((x, y));
        }
        lanes.push(Lane::new(pts, 1.0).expect("v grid is strictly increasing"));
        // slots are small signed integers; bias them into u32 space
        ids.push((slot + 1024) as u32);
    }
    (lanes, ids)
}

fn render_frame(cfg: &SceneConfig, s: &SceneState, rng: &mut SplitMix64) -> RealArray {
    let (h, w) = (cfg.height, cfg.width);
    let horizon = HORIZON * (h - 1) as f64;
    let mut img = vec![0.0f64; h * w * 3];
    let slots = visible_slots(s);
    for y in 0..h {
        let yf = y as f64;
        let row = &mut img[y * w * 3..(y + 1) * w * 3];
        if yf < horizon {
            // sky with a slight vertical gradient
            let t = yf / horizon.max(1.0);
            let c = [0.55 + 0.10 * t, 0.68 + 0.07 * t, 0.88 + 0.04 * t];
            for px in row.chunks_mut(3) {
                px.copy_from_slice(&c);
            }
            continue;
        }
        let v = ((yf - horizon) / ((h - 1) as f64 - horizon)).clamp(0.0, 1.0);
        let road = [0.24 + 0.05 * v, 0.24 + 0.05 * v, 0.26 + 0.05 * v];
        for px in row.chunks_mut(3) {
            px.copy_from_slice(&road);
        }
        // lane markings
        let half_width = 0.8 + 1.8 * v;
        let dash_on = |v: f64| -> bool {
            if cfg.dash_duty >= 1.0 {
                return true;
            }
            let z = 2.5 / v.max(0.05);
            (z + s.dash_phase).fract() < cfg.dash_duty
        };
        for &slot in &slots {
            if !dash_on(v) {
                continue;
            }
            let cx = lane_x(cfg, s, slot, v);
            let lo = ((cx - half_width).floor().max(0.0)) as usize;
            let hi = ((cx + half_width).ceil().min((w - 1) as f64)) as usize;
            for x in lo..=hi {
                if (x as f64 - cx).abs() <= half_width {
                    row[x * 3..x * 3 + 3].copy_from_slice(&[0.92, 0.93, 0.90]);
                }
            }
        }
    }
    // occluders cover whatever is beneath them
    for occ in &s.occluders {
        let ylo = ((occ.cy - occ.half_h).floor().max(0.0)) as usize;
        let yhi = ((occ.cy + occ.half_h).ceil().min((h - 1) as f64)) as usize;
        let xlo = ((occ.cx - occ.half_w).floor().max(0.0)) as usize;
        let xhi = ((occ.cx + occ.half_w).ceil().min((w - 1) as f64)) as usize;
        for y in ylo..=yhi {
            for x in xlo..=xhi {
                img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&occ.color);
            }
        }
    }
    // additive glare
    for g in &s.glares {
        let ylo = ((g.cy - g.radius).floor().max(0.0)) as usize;
        let yhi = ((g.cy + g.radius).ceil().min((h - 1) as f64)) as usize;
        let xlo = ((g.cx - g.radius).floor().max(0.0)) as usize;
        let xhi = ((g.cx + g.radius).ceil().min((w - 1) as f64)) as usize;
        let r2 = g.radius * g.radius;
        for y in ylo..=yhi {
            for x in xlo..=xhi {
                let dx = x as f64 - g.cx;
                let dy = y as f64 - g.cy;
                let d2 = dx * dx + dy * dy;
                if d2 <= r2 {
                    let fall = g.intensity * (1.0 - d2 / r2);
                    for c in 0..3 {
                        let p = &mut img[(y * w + x) * 3 + c];
                        *p = (*p + fall).min(1.0);
                    }
                }
            }
        }
    }
    if cfg.noise_level > 0.0 {
        for p in img.iter_mut() {
            *p = (*p + cfg.noise_level * rng.normal()).clamp(0.0, 1.0);
        }
    }
    RealArray::new(vec![h, w, 3], img)
}

/// Generate a full sequence deterministically from the config's seed.
pub fn generate(cfg: &SceneConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let n_lanes = cfg.min_lanes + rng.below(cfg.max_lanes - cfg.min_lanes + 1);
    let mut state = SceneState {
        n_lanes,
        ego: rng.uniform(-0.2, 0.2),
        ego_from: 0.0,
        ego_target: 0.0,
        change_progress: None,
        slot_base: -((n_lanes as i64 - 1) / 2),
        theta_vp: rng.uniform(0.0, std::f64::consts::TAU),
        theta_sway: rng.uniform(0.0, std::f64::consts::TAU),
        theta_curve: rng.uniform(0.0, std::f64::consts::TAU),
        dash_phase: rng.next_f64(),
        occluders: Vec::new(),
        glares: Vec::new(),
    };
    state.ego_from = state.ego;
    state.ego_target = state.ego;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::with_capacity(cfg.frames);
    let mut ids = Vec::with_capacity(cfg.frames);

    for _t in 0..cfg.frames {
        // spawn events
        if state.change_progress.is_none() && rng.next_f64() < cfg.lane_change_prob {
            let dir = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            state.ego_from = state.ego;
            state.ego_target = state.ego + dir;
            state.change_progress = Some(0.0);
            state.slot_base += dir as i64;
        }
        if rng.next_f64() < cfg.occlusion_prob {
            let slot = state.slot_base + rng.below(state.n_lanes) as i64;
            let v = rng.uniform(0.3, 0.9);
            let h = cfg.height as f64;
            let horizon = HORIZON * (h - 1.0);
            let cy = horizon + v * ((h - 1.0) - horizon);
            let cx = lane_x(cfg, &state, slot, v) + rng.uniform(-8.0, 8.0);
            let half_w = cfg.width as f64 * rng.uniform(0.04, 0.10);
            let shade = rng.uniform(0.08, 0.45);
            state.occluders.push(Occluder {
                cx,
                cy,
                half_w,
                half_h: half_w * rng.uniform(0.5, 0.9),
                vy: (0.4 + rng.next_f64()) * cfg.ego_speed * 2.0,
                color: [shade, shade * rng.uniform(0.8, 1.2), shade],
                ttl: 6 + rng.below(9),
            });
        }
        if rng.next_f64() < cfg.occlusion_prob * 0.5 {
            state.glares.push(Glare {
                cx: rng.uniform(0.0, cfg.width as f64),
                cy: rng.uniform(HORIZON * cfg.height as f64, cfg.height as f64),
                radius: cfg.width as f64 * rng.uniform(0.08, 0.18),
                intensity: rng.uniform(0.4, 0.8),
                ttl: 3 + rng.below(6),
            });
        }

        let (lanes, lane_ids) = gt_lanes(cfg, &state);
        frames.push(render_frame(cfg, &state, &mut rng));
        gt.push(lanes);
        ids.push(lane_ids);

        // evolve: phases advance at rates proportional to ego speed
        state.theta_vp += 0.10 * cfg.ego_speed;
        state.theta_sway += 0.30 * cfg.ego_speed;
        state.theta_curve += 0.15 * cfg.ego_speed;
        state.dash_phase = (state.dash_phase + 0.8 * cfg.ego_speed).fract();
        if let Some(p) = state.change_progress {
            let p = p + 1.0 / 8.0;
            if p >= 1.0 {
                state.ego = state.ego_target;
                state.change_progress = None;
            } else {
                state.ego = state.ego_from + (state.ego_target - state.ego_from) * smoothstep(p);
                state.change_progress = Some(p);
            }
        }
        for occ in state.occluders.iter_mut() {
            occ.cy += occ.vy;
            occ.ttl = occ.ttl.saturating_sub(1);
        }
        state.occluders.retain(|o| o.ttl > 0);
        for g in state.glares.iter_mut() {
            g.ttl = g.ttl.saturating_sub(1);
        }
        state.glares.retain(|g| g.ttl > 0);
    }

    Ok(SyntheticSequence {
        config: cfg.clone(),
        frames,
        gt,
        ids,
    })
}

// ── Dataset serialization ────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct LaneRecord {
    id: u32,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    lanes: Vec<LaneRecord>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    checksum: String,
    frames: Vec<FrameRecord>,
}

/// FNV-1a 64-bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn frame_records(seq: &SyntheticSequence) -> Vec<FrameRecord> {
    let (h, w) = (seq.config.height as f64, seq.config.width as f64);
    seq.gt
        .iter()
        .zip(&seq.ids)
        .map(|(lanes, ids)| FrameRecord {
            lanes: lanes
                .iter()
                .zip(ids)
                .map(|(lane, &id)| LaneRecord {
                    id,
                    points: lane
                        .points()
                        .iter()
                        .map(|&(x, y)| [x / w, y / h])
                        .collect(),
                })
                .collect(),
        })
        .collect()
}

pub fn export(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)
        .map_err(|e| Error::io(frames_dir.display().to_string(), e))?;
    let (h, w) = (seq.config.height, seq.config.width);
    for (t, frame) in seq.frames.iter().enumerate() {
        let rgb: Vec<u8> = frame
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ppm::write_ppm(&frames_dir.join(format!("{t:05}.ppm")), w, h, &rgb)?;
    }
    let records = frame_records(seq);
    let payload = serde_json::to_string(&records).expect("serializable records");
    let ann = AnnotationFile {
        checksum: format!("{:016x}", fnv1a(payload.as_bytes())),
        frames: records,
    };
    let ann_path = dir.join("annotations.json");
    std::fs::write(&ann_path, serde_json::to_string_pretty(&ann).unwrap())
        .map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    let meta_path = dir.join("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&seq.config).unwrap())
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    Ok(())
}

pub fn import(dir: &Path) -> Result<SyntheticSequence> {
    let meta_path = dir.join("meta.json");
    let meta = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let config: SceneConfig = serde_json::from_str(&meta).map_err(|e| {
        Error::data(
            meta_path.display().to_string(),
            format!("line {}: {e}", e.line()),
        )
    })?;
    let ann_path = dir.join("annotations.json");
    let ann_text = std::fs::read_to_string(&ann_path)
        .map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    let ann: AnnotationFile = serde_json::from_str(&ann_text).map_err(|e| {
        Error::data(
            ann_path.display().to_string(),
            format!("line {}: {e}", e.line()),
        )
    })?;
    let payload = serde_json::to_string(&ann.frames).expect("serializable records");
    let expect = format!("{:016x}", fnv1a(payload.as_bytes()));
    if expect != ann.checksum {
        return Err(Error::data(
            ann_path.display().to_string(),
            format!("checksum mismatch: stored {} regenerated {expect}", ann.checksum),
        ));
    }
    let (h, w) = (config.height, config.width);
    let mut frames = Vec::with_capacity(ann.frames.len());
    let mut gt = Vec::with_capacity(ann.frames.len());
    let mut ids = Vec::with_capacity(ann.frames.len());
    for (t, record) in ann.frames.iter().enumerate() {
        let frame_path = dir.join("frames").join(format!("{t:05}.ppm"));
        if !frame_path.exists() {
            return Err(Error::data(
                frame_path.display().to_string(),
                format!("missing image for frame {t}"),
            ));
        }
        let (fw, fh, rgb) = ppm::read_ppm(&frame_path)?;
        if (fw, fh) != (w, h) {
            return Err(Error::data(
                frame_path.display().to_string(),
                format!("frame {t} is {fw}×{fh}, expected {w}×{h}"),
            ));
        }
        frames.push(RealArray::new(
            vec![h, w, 3],
            rgb.iter().map(|&b| b as f64 / 255.0).collect(),
        ));
        let mut frame_lanes = Vec::new();
        let mut frame_ids = Vec::new();
        for lr in &record.lanes {
            let pts: Vec<(f64, f64)> = lr
                .points
                .iter()
                .map(|&[x, y]| (x * w as f64, y * h as f64))
                .collect();
            frame_lanes.push(Lane::new(pts, 1.0).map_err(|e| {
                Error::data(
                    ann_path.display().to_string(),
                    format!("frame {t} lane {}: {e}", lr.id),
                )
            })?);
            frame_ids.push(lr.id);
        }
        gt.push(frame_lanes);
        ids.push(frame_ids);
    }
    Ok(SyntheticSequence {
        config,
        frames,
        gt,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            seed: 7,
            frames: 6,
            height: 64,
            width: 96,
            min_lanes: 2,
            max_lanes: 3,
            curvature_amplitude: 0.4,
            ego_speed: 0.5,
            occlusion_prob: 0.3,
            dash_duty: 0.7,
            lane_change_prob: 0.1,
            noise_level: 0.02,
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa, fb);
        }
        assert_eq!(a.gt.len(), b.gt.len());
        for (la, lb) in a.gt.iter().zip(&b.gt) {
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn clean_solid_scene_paints_markings_under_every_gt_pixel() {
        let cfg = SceneConfig {
            occlusion_prob: 0.0,
            noise_level: 0.0,
            dash_duty: 1.0,
            lane_change_prob: 0.0,
            ..small_cfg()
        };
        let seq = generate(&cfg).unwrap();
        let marking = [0.92, 0.93, 0.90];
        for (frame, lanes) in seq.frames.iter().zip(&seq.gt) {
            let mask = crate::bootstrap::rasterize_lanes(lanes, cfg.height, cfg.width);
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    if mask.get(x, y) {
                        let px = &frame.data()[(y * cfg.width + x) * 3..(y * cfg.width + x) * 3 + 3];
                        assert_eq!(px, &marking, "gt pixel ({x},{y}) not marking-colored");
                    }
                }
            }
        }
    }

    #[test]
    fn adjacent_frame_displacement_respects_derived_bound() {
        let cfg = SceneConfig {
            lane_change_prob: 0.0,
            ..small_cfg()
        };
        let seq = generate(&cfg).unwrap();
        let bound = max_frame_displacement(&cfg) + 1e-9;
        for t in 1..seq.gt.len() {
            for (prev_idx, &id) in seq.ids[t - 1].iter().enumerate() {
                if let Some(cur_idx) = seq.ids[t].iter().position(|&i| i == id) {
                    let a = &seq.gt[t - 1][prev_idx];
                    let b = &seq.gt[t][cur_idx];
                    for (pa, pb) in a.points().iter().zip(b.points()) {
                        // clamping at the border can only shrink displacement
                        let d = (pa.0 - pb.0).abs();
                        assert!(
                            d <= bound,
                            "frame {t}: displacement {d} exceeds bound {bound}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gt_lanes_satisfy_lane_invariants() {
        let seq = generate(&small_cfg()).unwrap();
        for lanes in &seq.gt {
            assert!(!lanes.is_empty());
            for lane in lanes {
                for &(x, y) in lane.points() {
                    assert!(x >= 0.0 && x < 96.0);
                    assert!(y >= 0.0 && y < 64.0);
                }
                for w in lane.points().windows(2) {
                    assert!(w[1].1 > w[0].1);
                }
            }
        }
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate(&small_cfg()).unwrap();
        export(&seq, dir.path()).unwrap();
        let back = import(dir.path()).unwrap();
        assert_eq!(back.config, seq.config);
        assert_eq!(back.gt.len(), seq.gt.len());
        // the JSON itself is lossless for f64; the only loss is the ulp-level
        // normalize/denormalize transform of the coordinate format
        for (a, b) in seq.gt.iter().zip(&back.gt) {
            assert_eq!(a.len(), b.len());
            for (la, lb) in a.iter().zip(b) {
                for (pa, pb) in la.points().iter().zip(lb.points()) {
                    assert!((pa.0 - pb.0).abs() < 1e-9 && (pa.1 - pb.1).abs() < 1e-9);
                }
            }
        }
        assert_eq!(seq.ids, back.ids);
        // images round-trip to 8-bit precision
        for (fa, fb) in seq.frames.iter().zip(&back.frames) {
            for (va, vb) in fa.data().iter().zip(fb.data()) {
                assert!((va - vb).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn missing_frame_file_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate(&small_cfg()).unwrap();
        export(&seq, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("frames/00003.ppm")).unwrap();
        let err = import(dir.path()).unwrap_err();
        assert!(err.to_string().contains('3'), "{err}");
    }

    #[test]
    fn checksum_mismatch_is_rejected_and_recomputable() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate(&small_cfg()).unwrap();
        export(&seq, dir.path()).unwrap();
        // independent hash pass over the stored payload
        let text = std::fs::read_to_string(dir.path().join("annotations.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        let payload = serde_json::to_string(&parsed["frames"]).unwrap();
        let mut hash = 0xcbf29ce484222325u64;
        for &b in payload.as_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        assert_eq!(parsed["checksum"].as_str().unwrap(), format!("{hash:016x}"));
        // tampering breaks the import
        let tampered = text.replacen("\"id\":", "\"id\" :", 1);
        assert_ne!(tampered, text);
        std::fs::write(dir.path().join("annotations.json"), tampered).unwrap();
        // (whitespace-only change keeps json equal; reserialization hides it,
        // so instead corrupt a coordinate)
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["frames"][0]["lanes"][0]["points"][0][0] = serde_json::json!(0.123456);
        std::fs::write(
            dir.path().join("annotations.json"),
            serde_json::to_string(&v).unwrap(),
        )
        .unwrap();
        assert!(import(dir.path()).is_err());
    }
}
