//! The full network: a three-stage strided convolutional encoder, the
//! aggregation weights, the bootstrap projections, and the decoder heads,
//! plus the lane basis they decode against.

use crate::array::{Padding, RealArray};
use crate::bootstrap::IDEmbedKernel;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lanehead::{DecoderHeads, DetectionParams, LaneBasis};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tca::TCAWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: RealArray, // kh×kw×Cin×Cout
    pub bias: RealArray,   // [Cout]
}

impl ConvLayer {
    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        ConvLayer {
            kernel: RealArray::zeros(vec![kh, kw, cin, cout]),
            bias: RealArray::zeros(vec![cout]),
        }
    }

    pub fn random(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut SplitMix64) -> Self {
        let s = (2.0 / (kh * kw * cin) as f64).sqrt();
        ConvLayer {
            kernel: RealArray::fill_with(vec![kh, kw, cin, cout], || rng.uniform(-s, s)),
            bias: RealArray::zeros(vec![cout]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &RealArray)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut RealArray)) {
        f(format!("{prefix}.kernel"), &mut self.kernel);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Three stride-2 stages with channel widths C/4 → C/2 → C and a smooth
/// nonlinearity between stages; the output grid is the input divided by 8.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

impl Encoder {
    pub fn random(channels: usize, rng: &mut SplitMix64) -> Self {
        let (c1, c2) = (channels / 4, channels / 2);
        Encoder {
            conv1: ConvLayer::random(3, 3, 3, c1, rng),
            conv2: ConvLayer::random(3, 3, c1, c2, rng),
            conv3: ConvLayer::random(3, 3, c2, channels, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &RealArray)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.conv3.visit(&format!("{prefix}.conv3"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut RealArray)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        self.conv3.visit_mut(&format!("{prefix}.conv3"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderIds {
    pub k1: NodeId,
    pub b1: NodeId,
    pub k2: NodeId,
    pub b2: NodeId,
    pub k3: NodeId,
    pub b3: NodeId,
}

impl Encoder {
    pub fn register(&self, tape: &mut Tape) -> EncoderIds {
        EncoderIds {
            k1: tape.leaf(self.conv1.kernel.clone()),
            b1: tape.leaf(self.conv1.bias.clone()),
            k2: tape.leaf(self.conv2.kernel.clone()),
            b2: tape.leaf(self.conv2.bias.clone()),
            k3: tape.leaf(self.conv3.kernel.clone()),
            b3: tape.leaf(self.conv3.bias.clone()),
        }
    }
}

/// Encoder forward on the tape: image H×W×3 to features H/8 × W/8 × C.
pub fn encode(tape: &mut Tape, image: NodeId, ids: &EncoderIds) -> Result<NodeId> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::BadShape {
            op: "encode",
            shape,
            reason: "expected an H×W×3 image".into(),
        });
    }
    let c1 = tape.conv2d(image, ids.k1, 2, Padding::Same)?;
    let c1 = tape.add_bias(c1, ids.b1)?;
    let a1 = tape.silu(c1);
    let c2 = tape.conv2d(a1, ids.k2, 2, Padding::Same)?;
    let c2 = tape.add_bias(c2, ids.b2)?;
    let a2 = tape.silu(c2);
    let c3 = tape.conv2d(a2, ids.k3, 2, Padding::Same)?;
    tape.add_bias(c3, ids.b3)
}

/// Everything learnable plus the frozen lane basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub encoder: Encoder,
    pub tca: TCAWeights,
    /// The second projection of the bootstrap (value mapping).
    pub phi_prime: RealArray,
    pub id_embed: IDEmbedKernel,
    pub heads: DecoderHeads,
    pub basis: LaneBasis,
}

impl Model {
    pub fn new(config: RunConfig, basis: LaneBasis, rng: &mut SplitMix64) -> Result<Model> {
        config.validate()?;
        if basis.k() != config.basis_k || basis.n() != config.basis_n {
            return Err(Error::Contract {
                op: "Model::new",
                reason: format!(
                    "basis {}×{} does not match config {}×{}",
                    basis.k(),
                    basis.n(),
                    config.basis_k,
                    config.basis_n
                ),
            });
        }
        let c = config.channels;
        let s = 1.0 / (c as f64).sqrt();
        Ok(Model {
            encoder: Encoder::random(c, rng),
            tca: TCAWeights::random(c, config.heads, rng),
            phi_prime: RealArray::fill_with(vec![c, c], || rng.uniform(-s, s)),
            id_embed: IDEmbedKernel::random(c, rng),
            heads: DecoderHeads::random(c, config.basis_k, rng),
            basis,
            config,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &RealArray)) {
        self.encoder.visit("encoder", f);
        self.tca.visit("tca", f);
        f("bootstrap.phi_prime".into(), &self.phi_prime);
        self.id_embed.visit("bootstrap.id_embed", f);
        self.heads.visit("heads", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut RealArray)) {
        self.encoder.visit_mut("encoder", f);
        self.tca.visit_mut("tca", f);
        f("bootstrap.phi_prime".into(), &mut self.phi_prime);
        self.id_embed.visit_mut("bootstrap.id_embed", f);
        self.heads.visit_mut("heads", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    pub fn named_params(&self) -> Vec<(String, RealArray)> {
        let mut out = Vec::new();
        self.visit(&mut |name, a| out.push((name, a.clone())));
        out
    }

    pub fn detection_params(&self) -> DetectionParams {
        DetectionParams {
            prob_threshold: self.config.prob_threshold,
            nms_iou: self.config.nms_iou,
            nms_width: 30.0,
            image_h: self.config.image_h,
            image_w: self.config.image_w,
        }
    }

    /// Value-level encoder pass.
    pub fn encode_value(&self, image: &RealArray) -> Result<RealArray> {
        let (h, w) = (self.config.image_h, self.config.image_w);
        if image.shape() != [h, w, 3] {
            return Err(Error::BadShape {
                op: "encode",
                shape: image.shape().to_vec(),
                reason: format!("expected {h}×{w}×3 per the run config"),
            });
        }
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone());
        let ids = self.encoder.register(&mut tape);
        let f = encode(&mut tape, img, &ids)?;
        Ok(tape.value(f).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::lanehead::default_row_positions;

    fn tiny_basis(k: usize, n: usize) -> LaneBasis {
        let library: Vec<Vec<f64>> = (0..n + 1)
            .map(|i| (0..n).map(|j| ((i * 7 + j * 3) % 11) as f64 - 5.0).collect())
            .collect();
        crate::lanehead::build_basis(&library, k, default_row_positions(n)).unwrap()
    }

    #[test]
    fn encoder_shape_arithmetic() {
        let cfg = RunConfig {
            image_h: 192,
            image_w: 320,
            ..Default::default()
        };
        let mut rng = SplitMix64::new(131);
        let model = Model::new(cfg, tiny_basis(4, 36), &mut rng).unwrap();
        let img = RealArray::zeros(vec![192, 320, 3]);
        let f = model.encode_value(&img).unwrap();
        assert_eq!(f.shape(), &[24, 40, 64]);
    }

    #[test]
    fn zero_image_zero_biases_encode_to_zero() {
        let cfg = RunConfig::default();
        let mut rng = SplitMix64::new(132);
        let model = Model::new(cfg, tiny_basis(4, 36), &mut rng).unwrap();
        // biases are zero-initialized; convolution of zeros stays zero and
        // the nonlinearity fixes zero
        let img = RealArray::zeros(vec![192, 320, 3]);
        let f = model.encode_value(&img).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_a_dimension_error() {
        let cfg = RunConfig::default();
        let mut rng = SplitMix64::new(133);
        let model = Model::new(cfg, tiny_basis(4, 36), &mut rng).unwrap();
        let img = RealArray::zeros(vec![64, 64, 3]);
        assert!(model.encode_value(&img).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences_on_toy_image() {
        let mut rng = SplitMix64::new(134);
        let enc = Encoder::random(8, &mut rng);
        let img = RealArray::fill_with(vec![16, 16, 3], || rng.uniform(0.0, 1.0));
        let mut params = vec![("img".to_string(), img)];
        enc.visit("enc", &mut |name, a| params.push((name, a.clone())));
        let report = grad_check(&params, DEFAULT_STEP, |tape, ids| {
            let e = EncoderIds {
                k1: ids[1],
                b1: ids[2],
                k2: ids[3],
                b2: ids[4],
                k3: ids[5],
                b3: ids[6],
            };
            let f = encode(tape, ids[0], &e)?;
            let sq = tape.mul(f, f)?;
            Ok(tape.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn visit_orders_match_between_const_and_mut() {
        let cfg = RunConfig {
            channels: 16,
            ..Default::default()
        };
        let mut rng = SplitMix64::new(135);
        let mut model = Model::new(cfg, tiny_basis(4, 36), &mut rng).unwrap();
        let mut names_a = Vec::new();
        model.visit(&mut |n, _| names_a.push(n));
        let mut names_b = Vec::new();
        model.visit_mut(&mut |n, _| names_b.push(n));
        assert_eq!(names_a, names_b);
        assert!(names_a.len() > 10);
        // names are unique
        let mut sorted = names_a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names_a.len());
    }
}
