//! The projection layer and the five fusion heads.
//!
//! Every head takes the two aligned feature vectors and emits a length-C
//! score vector. Late fusion returns a probability distribution (the average
//! of two per-stream softmaxes); the other four return unnormalized logits.
//! Argmax is well-defined for all five.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::layers::{LayerNormLayer, LinearLayer, MultiHeadAttention};
use crate::rng::DropoutRng;
use crate::tensor::ops::{concat, cross_entropy_logits, dropout, nll_from_probs};
use crate::tensor::{ParamRegistry, Parameter, Scalar, Tape, Tensor, TensorError, Var};

/// Attention-fusion head count.
pub const FUSION_ATTN_HEADS: usize = 4;
/// Dropout after the projection ReLU.
pub const PROJECTION_DROPOUT: f64 = 0.1;
/// Dropout after the concat-fusion ReLU.
pub const CONCAT_DROPOUT: f64 = 0.3;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attention fusion: {heads} heads must divide feature dim {dim}")]
    HeadsMismatch { heads: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Late,
    Concat,
    Attention,
    Weighted,
    Gated,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Late,
        FusionKind::Concat,
        FusionKind::Attention,
        FusionKind::Weighted,
        FusionKind::Gated,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::Late => "late",
            FusionKind::Concat => "concat",
            FusionKind::Attention => "attention",
            FusionKind::Weighted => "weighted",
            FusionKind::Gated => "gated",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "late" => Ok(FusionKind::Late),
            "concat" => Ok(FusionKind::Concat),
            "attention" => Ok(FusionKind::Attention),
            "weighted" => Ok(FusionKind::Weighted),
            "gated" => Ok(FusionKind::Gated),
            other => Err(format!("unknown fusion kind {other:?}")),
        }
    }
}

/// Motion-feature projection: `Dropout_0.1(ReLU(W_p f + b_p))`.
pub struct Projection<T: Scalar> {
    pub fc: LinearLayer<T>,
}

impl<T: Scalar> Projection<T> {
    pub fn new(scope: &str, out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc: LinearLayer::new(&format!("{scope}.fc"), out_dim, in_dim, rng),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        f_flow: Var<'t, T>,
        train: bool,
        rng: &DropoutRng,
    ) -> Result<Var<'t, T>, TensorError> {
        let y = self.fc.forward(tape, f_flow)?.relu();
        Ok(dropout(y, PROJECTION_DROPOUT, train, &mut rng.next_stream()))
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        self.fc.register(reg);
    }
}

/// Per-stream classifiers whose softmax outputs are averaged.
pub struct LateFusion<T: Scalar> {
    pub rgb_head: LinearLayer<T>,
    pub flow_head: LinearLayer<T>,
}

/// MLP over the concatenated features.
pub struct ConcatFusion<T: Scalar> {
    pub fc1: LinearLayer<T>,
    pub fc2: LinearLayer<T>,
}

/// Appearance queries attend over the motion feature; residual + layer norm.
pub struct AttentionFusion<T: Scalar> {
    pub mha: MultiHeadAttention<T>,
    pub ln: LayerNormLayer<T>,
    pub classifier: LinearLayer<T>,
}

/// Convex combination of the streams with two learned scalars.
pub struct WeightedFusion<T: Scalar> {
    pub w: Parameter<T>,
    pub classifier: LinearLayer<T>,
}

/// Per-dimension sigmoid gate blending the streams.
pub struct GatedFusion<T: Scalar> {
    pub gate: LinearLayer<T>,
    pub classifier: LinearLayer<T>,
}

pub enum FusionHead<T: Scalar> {
    Late(LateFusion<T>),
    Concat(ConcatFusion<T>),
    Attention(AttentionFusion<T>),
    Weighted(WeightedFusion<T>),
    Gated(GatedFusion<T>),
}

impl<T: Scalar> FusionHead<T> {
    pub fn new(
        kind: FusionKind,
        scope: &str,
        dim: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FusionError> {
        Ok(match kind {
            FusionKind::Late => FusionHead::Late(LateFusion {
                rgb_head: LinearLayer::new(&format!("{scope}.rgb_head"), num_classes, dim, rng),
                flow_head: LinearLayer::new(&format!("{scope}.flow_head"), num_classes, dim, rng),
            }),
            FusionKind::Concat => FusionHead::Concat(ConcatFusion {
                fc1: LinearLayer::new(&format!("{scope}.fc1"), dim, 2 * dim, rng),
                fc2: LinearLayer::new(&format!("{scope}.fc2"), num_classes, dim, rng),
            }),
            FusionKind::Attention => {
                if dim % FUSION_ATTN_HEADS != 0 {
                    return Err(FusionError::HeadsMismatch {
                        heads: FUSION_ATTN_HEADS,
                        dim,
                    });
                }
                FusionHead::Attention(AttentionFusion {
                    mha: MultiHeadAttention::new(
                        &format!("{scope}.mha"),
                        dim,
                        FUSION_ATTN_HEADS,
                        rng,
                    ),
                    ln: LayerNormLayer::new(&format!("{scope}.ln"), dim),
                    classifier: LinearLayer::new(
                        &format!("{scope}.classifier"),
                        num_classes,
                        dim,
                        rng,
                    ),
                })
            }
            FusionKind::Weighted => FusionHead::Weighted(WeightedFusion {
                // zero init: alphas start at (0.5, 0.5)
                w: Parameter::new(format!("{scope}.w"), Tensor::zeros(&[2])),
                classifier: LinearLayer::new(&format!("{scope}.classifier"), num_classes, dim, rng),
            }),
            FusionKind::Gated => FusionHead::Gated(GatedFusion {
                gate: LinearLayer::new(&format!("{scope}.gate"), dim, 2 * dim, rng),
                classifier: LinearLayer::new(&format!("{scope}.classifier"), num_classes, dim, rng),
            }),
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionHead::Late(_) => FusionKind::Late,
            FusionHead::Concat(_) => FusionKind::Concat,
            FusionHead::Attention(_) => FusionKind::Attention,
            FusionHead::Weighted(_) => FusionKind::Weighted,
            FusionHead::Gated(_) => FusionKind::Gated,
        }
    }

    /// Late fusion emits probabilities; every other head emits logits.
    pub fn outputs_probabilities(&self) -> bool {
        matches!(self, FusionHead::Late(_))
    }

    /// h_rgb, h_flow: [B, d] -> scores [B, C].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        h_rgb: Var<'t, T>,
        h_flow: Var<'t, T>,
        train: bool,
        rng: &DropoutRng,
    ) -> Result<Var<'t, T>, FusionError> {
        let rgb_shape = h_rgb.shape();
        let flow_shape = h_flow.shape();
        if rgb_shape != flow_shape || rgb_shape.len() != 2 {
            return Err(FusionError::Tensor(TensorError::ShapeMismatch {
                op: "fusion",
                lhs: rgb_shape,
                rhs: flow_shape,
            }));
        }
        let (b, d) = (rgb_shape[0], rgb_shape[1]);
        match self {
            FusionHead::Late(head) => {
                let p_rgb = head.rgb_head.forward(tape, h_rgb)?.softmax(1)?;
                let p_flow = head.flow_head.forward(tape, h_flow)?.softmax(1)?;
                Ok(p_rgb.add(p_flow)?.scale(T::of_f64(0.5)))
            }
            FusionHead::Concat(head) => {
                let joint = concat(&[h_rgb, h_flow], 1)?;
                let hidden = head.fc1.forward(tape, joint)?.relu();
                let hidden = dropout(hidden, CONCAT_DROPOUT, train, &mut rng.next_stream());
                Ok(head.fc2.forward(tape, hidden)?)
            }
            FusionHead::Attention(head) => {
                let q = h_rgb.reshape(vec![b, 1, d])?;
                let kv = h_flow.reshape(vec![b, 1, d])?;
                let att = head.mha.forward(tape, q, kv, kv)?.reshape(vec![b, d])?;
                let cross = head.ln.forward(tape, h_rgb.add(att)?)?;
                Ok(head.classifier.forward(tape, cross)?)
            }
            FusionHead::Weighted(head) => {
                let alpha = tape.param(&head.w).softmax(0)?;
                let a_rgb = alpha.narrow(0, 0, 1)?;
                let a_flow = alpha.narrow(0, 1, 1)?;
                let blended = h_rgb.scale_by(a_rgb)?.add(h_flow.scale_by(a_flow)?)?;
                Ok(head.classifier.forward(tape, blended)?)
            }
            FusionHead::Gated(head) => {
                let joint = concat(&[h_rgb, h_flow], 1)?;
                let gate = head.gate.forward(tape, joint)?.sigmoid();
                let ones = tape.constant(Tensor::full(&[b, d], T::one()));
                let inv_gate = ones.sub(gate)?;
                let blended = gate.mul(h_rgb)?.add(inv_gate.mul(h_flow)?)?;
                Ok(head.classifier.forward(tape, blended)?)
            }
        }
    }

    /// The learned stream weights (softmaxed), for weighted fusion only.
    pub fn alphas(&self) -> Option<(f64, f64)> {
        match self {
            FusionHead::Weighted(head) => {
                let w = head.w.value();
                let (w1, w2) = (w.data()[0].to_f64s(), w.data()[1].to_f64s());
                let m = w1.max(w2);
                let (e1, e2) = ((w1 - m).exp(), (w2 - m).exp());
                let z = e1 + e2;
                Some((e1 / z, e2 / z))
            }
            _ => None,
        }
    }

    pub fn register(&self, reg: &mut ParamRegistry<T>) {
        match self {
            FusionHead::Late(h) => {
                h.rgb_head.register(reg);
                h.flow_head.register(reg);
            }
            FusionHead::Concat(h) => {
                h.fc1.register(reg);
                h.fc2.register(reg);
            }
            FusionHead::Attention(h) => {
                h.mha.register(reg);
                h.ln.register(reg);
                h.classifier.register(reg);
            }
            FusionHead::Weighted(h) => {
                reg.register(&h.w);
                h.classifier.register(reg);
            }
            FusionHead::Gated(h) => {
                h.gate.register(reg);
                h.classifier.register(reg);
            }
        }
    }
}

/// Loss matching the head's output convention.
pub fn fusion_loss<'t, T: Scalar>(
    scores: Var<'t, T>,
    labels: &[usize],
    outputs_probabilities: bool,
) -> Result<Var<'t, T>, TensorError> {
    if outputs_probabilities {
        nll_from_probs(scores, labels)
    } else {
        cross_entropy_logits(scores, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(i: u64) -> ChaCha8Rng {
        crate::rng::stream(11, "fusion-test", i)
    }

    fn feats(b: usize, d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut r = rng(seed + 1000);
        use rand::Rng;
        let mut mk = |r: &mut ChaCha8Rng| {
            Tensor::new(
                vec![b, d],
                (0..b * d).map(|_| r.random_range(-2.0..2.0)).collect(),
            )
        };
        let a = mk(&mut r);
        let b_ = mk(&mut r);
        (a, b_)
    }

    #[test]
    fn late_fusion_outputs_distribution() {
        let head = FusionHead::<f64>::new(FusionKind::Late, "f", 8, 5, &mut rng(0)).unwrap();
        let (hr, hf) = feats(3, 8, 0);
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let out = head
            .forward(&tape, tape.constant(hr), tape.constant(hf), false, &drng)
            .unwrap()
            .value();
        for r in 0..3 {
            let row = &out.data()[r * 5..(r + 1) * 5];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn late_fusion_shift_invariance() {
        // shifting one stream's logits (via its bias) leaves the output alone
        let head = FusionHead::<f64>::new(FusionKind::Late, "f", 4, 3, &mut rng(1)).unwrap();
        let (hr, hf) = feats(2, 4, 1);
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let out1 = head
            .forward(
                &tape,
                tape.constant(hr.clone()),
                tape.constant(hf.clone()),
                false,
                &drng,
            )
            .unwrap()
            .value();
        if let FusionHead::Late(l) = &head {
            let b = l.rgb_head.bias.value().map(|v| v + 7.5);
            l.rgb_head.bias.set_value(b);
        }
        let out2 = head
            .forward(&tape, tape.constant(hr), tape.constant(hf), false, &drng)
            .unwrap()
            .value();
        for (a, b) in out1.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_with_zero_w1_is_input_independent() {
        let head = FusionHead::<f64>::new(FusionKind::Concat, "f", 4, 3, &mut rng(2)).unwrap();
        if let FusionHead::Concat(c) = &head {
            c.fc1.weight.set_value(Tensor::zeros(&[4, 8]));
        }
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let (a1, a2) = feats(2, 4, 2);
        let (b1, b2) = feats(2, 4, 3);
        let o1 = head
            .forward(&tape, tape.constant(a1), tape.constant(a2), false, &drng)
            .unwrap()
            .value();
        let o2 = head
            .forward(&tape, tape.constant(b1), tape.constant(b2), false, &drng)
            .unwrap()
            .value();
        assert_eq!(o1.data(), o2.data());
    }

    #[test]
    fn weighted_symmetric_init_gives_half_half() {
        let head = FusionHead::<f64>::new(FusionKind::Weighted, "f", 4, 3, &mut rng(3)).unwrap();
        let (a, b) = head.alphas().unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(b, 0.5);
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn weighted_saturation_selects_rgb() {
        let head = FusionHead::<f64>::new(FusionKind::Weighted, "f", 4, 3, &mut rng(4)).unwrap();
        if let FusionHead::Weighted(w) = &head {
            w.w.set_value(Tensor::from_vec(vec![50.0, -50.0]));
        }
        let (hr, hf) = feats(2, 4, 4);
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let out = head
            .forward(
                &tape,
                tape.constant(hr.clone()),
                tape.constant(hf),
                false,
                &drng,
            )
            .unwrap()
            .value();
        if let FusionHead::Weighted(w) = &head {
            let tape2 = Tape::new();
            let direct = w
                .classifier
                .forward(&tape2, tape2.constant(hr))
                .unwrap()
                .value();
            for (a, b) in out.data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let (ar, af) = head.alphas().unwrap();
        assert!(ar > 1.0 - 1e-12 && af < 1e-12);
    }

    #[test]
    fn gated_half_gate_is_mean() {
        let head = FusionHead::<f64>::new(FusionKind::Gated, "f", 4, 3, &mut rng(5)).unwrap();
        if let FusionHead::Gated(g) = &head {
            g.gate.weight.set_value(Tensor::zeros(&[4, 8]));
            g.gate.bias.set_value(Tensor::zeros(&[4]));
            let mut w = vec![0.0; 12];
            w[0] = 1.0;
            w[4 + 1] = 1.0;
            w[8 + 2] = 1.0;
            g.classifier.weight.set_value(Tensor::new(vec![3, 4], w));
            g.classifier.bias.set_value(Tensor::zeros(&[3]));
        }
        let (hr, hf) = feats(2, 4, 5);
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let out = head
            .forward(
                &tape,
                tape.constant(hr.clone()),
                tape.constant(hf.clone()),
                false,
                &drng,
            )
            .unwrap()
            .value();
        for r in 0..2 {
            for c in 0..3 {
                let expected = 0.5 * (hr.data()[r * 4 + c] + hf.data()[r * 4 + c]);
                assert!((out.data()[r * 3 + c] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gated_saturated_gate_selects_rgb() {
        let head = FusionHead::<f64>::new(FusionKind::Gated, "f", 4, 3, &mut rng(6)).unwrap();
        if let FusionHead::Gated(g) = &head {
            g.gate.weight.set_value(Tensor::zeros(&[4, 8]));
            g.gate.bias.set_value(Tensor::full(&[4], 100.0));
        }
        let (hr, hf) = feats(1, 4, 6);
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let out = head
            .forward(
                &tape,
                tape.constant(hr.clone()),
                tape.constant(hf),
                false,
                &drng,
            )
            .unwrap()
            .value();
        if let FusionHead::Gated(g) = &head {
            let tape2 = Tape::new();
            let direct = g
                .classifier
                .forward(&tape2, tape2.constant(hr))
                .unwrap()
                .value();
            for (a, b) in out.data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_zeroed_output_projection_isolates_rgb() {
        let head = FusionHead::<f64>::new(FusionKind::Attention, "f", 8, 3, &mut rng(7)).unwrap();
        if let FusionHead::Attention(a) = &head {
            a.mha.wo.weight.set_value(Tensor::zeros(&[8, 8]));
            a.mha.wo.bias.set_value(Tensor::zeros(&[8]));
        }
        let (hr, hf1) = feats(2, 8, 7);
        let (_, hf2) = feats(2, 8, 8);
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let o1 = head
            .forward(
                &tape,
                tape.constant(hr.clone()),
                tape.constant(hf1),
                false,
                &drng,
            )
            .unwrap()
            .value();
        let o2 = head
            .forward(&tape, tape.constant(hr), tape.constant(hf2), false, &drng)
            .unwrap()
            .value();
        for (a, b) in o1.data().iter().zip(o2.data()) {
            assert!((a - b).abs() < 1e-9, "flow leaked through zeroed projection");
        }
    }

    #[test]
    fn attention_dim_not_divisible_rejected() {
        assert!(matches!(
            FusionHead::<f64>::new(FusionKind::Attention, "f", 6, 3, &mut rng(8)),
            Err(FusionError::HeadsMismatch { heads: 4, dim: 6 })
        ));
    }

    #[test]
    fn mismatched_stream_shapes_rejected() {
        let head = FusionHead::<f64>::new(FusionKind::Concat, "f", 4, 3, &mut rng(9)).unwrap();
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let hr = tape.constant(Tensor::zeros(&[2, 4]));
        let hf = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(head.forward(&tape, hr, hf, false, &drng).is_err());
    }

    #[test]
    fn projection_zero_params_give_zero_output_and_relu_range() {
        let mut r = rng(10);
        let proj = Projection::<f64>::new("p", 6, 10, &mut r);
        proj.fc.weight.set_value(Tensor::zeros(&[6, 10]));
        proj.fc.bias.set_value(Tensor::zeros(&[6]));
        let tape = Tape::new();
        let drng = DropoutRng::new(0);
        let x = tape.constant(Tensor::full(&[2, 10], 3.0));
        let y = proj.forward(&tape, x, false, &drng).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let proj2 = Projection::<f64>::new("p2", 6, 10, &mut r);
        let x2 = tape.constant(Tensor::full(&[2, 10], -1.5));
        let y2 = proj2.forward(&tape, x2, false, &drng).unwrap().value();
        assert!(y2.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn projection_dropout_expectation_matches_eval() {
        // inverted dropout: the train-mode expectation equals the eval output
        let mut r = rng(11);
        let proj = Projection::<f64>::new("p", 4, 6, &mut r);
        let x = Tensor::full(&[1, 6], 1.0);
        let tape = Tape::new();
        let eval = proj
            .forward(&tape, tape.constant(x.clone()), false, &DropoutRng::new(7))
            .unwrap()
            .value();

        let trials = 20_000;
        let mut sums = vec![0.0f64; 4];
        let drng = DropoutRng::new(7);
        for _ in 0..trials {
            let tape_t = Tape::new();
            let out = proj
                .forward(&tape_t, tape_t.constant(x.clone()), true, &drng)
                .unwrap()
                .value();
            for (s, v) in sums.iter_mut().zip(out.data()) {
                *s += v;
            }
        }
        for (s, e) in sums.iter().zip(eval.data()) {
            let mean = s / trials as f64;
            if *e > 1e-9 {
                let rel = (mean - e).abs() / e;
                assert!(rel < 0.02, "MC mean {mean} vs eval {e}");
            }
        }
    }
}
