//! Two-level recurrent part aggregation.
//!
//! Per view `t`: the first-level LSTM reads the global feature `v_t` and
//! yields `o1_t`; regional attention over the middle representation `m_t`,
//! keyed by `o1_t`, yields `attPart_t`; the second-level LSTM reads
//! `x_t = concat(attPart_t, o1_t)` and its output is the fused feature `d_t`.
//! The shape descriptor is the coordinatewise maximum of all `d_t`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{CnnEncoderParams, EncoderConfig, EncoderVars, ViewFeatureVars, ViewFeatures};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{prefixed, prefixed_mut, Parameterized};
use crate::rau::{AttentivePart, ConfidenceMap, RauOutputVars, RauParams, RauVars};
use crate::recurrent::{bilstm_vars, LstmParams, LstmState, LstmVars, StateVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationVariant {
    #[serde(rename = "PREMA")]
    Prema,
    #[serde(rename = "DoubleLSTMs")]
    DoubleLstms,
    #[serde(rename = "MaxPoolOnly")]
    MaxPoolOnly,
    #[serde(rename = "SingleDirectionPREMA")]
    SingleDirectionPrema,
}

impl AggregationVariant {
    pub const ALL: [AggregationVariant; 4] = [
        AggregationVariant::Prema,
        AggregationVariant::DoubleLstms,
        AggregationVariant::MaxPoolOnly,
        AggregationVariant::SingleDirectionPrema,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationVariant::Prema => "PREMA",
            AggregationVariant::DoubleLstms => "DoubleLSTMs",
            AggregationVariant::MaxPoolOnly => "MaxPoolOnly",
            AggregationVariant::SingleDirectionPrema => "SingleDirectionPREMA",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            AggregationVariant::Prema => 0,
            AggregationVariant::DoubleLstms => 1,
            AggregationVariant::MaxPoolOnly => 2,
            AggregationVariant::SingleDirectionPrema => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn has_attention(self) -> bool {
        matches!(
            self,
            AggregationVariant::Prema | AggregationVariant::SingleDirectionPrema
        )
    }

    pub fn bidirectional(self) -> bool {
        matches!(self, AggregationVariant::Prema | AggregationVariant::DoubleLstms)
    }
}

impl fmt::Display for AggregationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown aggregation variant `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_h1: usize,
    pub d_k: usize,
    pub d_h2: usize,
    pub classes: usize,
    pub variant: AggregationVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            d_h1: 32,
            d_k: 32,
            d_h2: 64,
            classes: 8,
            variant: AggregationVariant::Prema,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_h1 == 0 || self.d_k == 0 || self.d_h2 == 0 {
            return Err(Error::Config("hidden and projection sizes must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

/// One LSTM level: a forward direction and, when bidirectional, a backward one.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLevel {
    pub fwd: LstmParams,
    pub bwd: Option<LstmParams>,
}

impl LstmLevel {
    fn init<R: Rng + ?Sized>(d_in: usize, d_h: usize, bidirectional: bool, rng: &mut R) -> Self {
        let fwd = LstmParams::init(d_in, d_h, rng);
        let bwd = bidirectional.then(|| LstmParams::init(d_in, d_h, rng));
        LstmLevel { fwd, bwd }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden_dim() * if self.bwd.is_some() { 2 } else { 1 }
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("fwd", self.fwd.named_params());
        if let Some(b) = &self.bwd {
            out.extend(prefixed("bwd", b.named_params()));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("fwd", self.fwd.named_params_mut());
        if let Some(b) = &mut self.bwd {
            out.extend(prefixed_mut("bwd", b.named_params_mut()));
        }
        out
    }

    fn validate(&self, d_in: usize) -> Result<()> {
        self.fwd.validate()?;
        if self.fwd.input_dim() != d_in {
            return Err(shape_err!(
                "lstm level expects input {}, wiring provides {d_in}",
                self.fwd.input_dim()
            ));
        }
        if let Some(b) = &self.bwd {
            b.validate()?;
            if b.input_dim() != d_in || b.hidden_dim() != self.fwd.hidden_dim() {
                return Err(shape_err!("backward direction disagrees with forward"));
            }
        }
        Ok(())
    }
}

/// Full model: encoder, aggregation stack and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PremaParams {
    pub variant: AggregationVariant,
    pub encoder: CnnEncoderParams,
    pub level1: Option<LstmLevel>,
    pub rau: Option<RauParams>,
    pub level2: Option<LstmLevel>,
    /// `classes × descriptor_dim`
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

impl PremaParams {
    /// Fresh aggregation stack on top of an existing (e.g. pre-trained) encoder.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        encoder: CnnEncoderParams,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if encoder.config != config.encoder {
            return Err(Error::Config("encoder parameters do not match the model config".into()));
        }
        let variant = config.variant;
        let c_v = encoder.feature_dim();
        let (c_m, _, _) = encoder.config.middle_dims();
        let (level1, rau, level2, desc_dim) = match variant {
            AggregationVariant::MaxPoolOnly => (None, None, None, c_v),
            _ => {
                let bi = variant.bidirectional();
                let l1 = LstmLevel::init(c_v, config.d_h1, bi, rng);
                let c_o = l1.output_dim();
                let rau = variant
                    .has_attention()
                    .then(|| RauParams::init(c_o, c_m, config.d_k, rng));
                let x_dim = c_o + rau.as_ref().map_or(0, |r| r.d_k());
                let l2 = LstmLevel::init(x_dim, config.d_h2, bi, rng);
                let dd = l2.output_dim();
                (Some(l1), rau, Some(l2), dd)
            }
        };
        Ok(PremaParams {
            variant,
            encoder,
            level1,
            rau,
            level2,
            classifier_w: Tensor::glorot(&[config.classes, desc_dim], desc_dim, config.classes, rng),
            classifier_b: Tensor::zeros(&[config.classes]),
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.classifier_w.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classifier_w.shape()[0]
    }

    /// Checks every wiring invariant between components.
    pub fn validate(&self) -> Result<()> {
        self.encoder.config.validate()?;
        let c_v = self.encoder.feature_dim();
        let (c_m, _, _) = self.encoder.config.middle_dims();
        let bi = self.variant.bidirectional();
        let desc = match self.variant {
            AggregationVariant::MaxPoolOnly => {
                if self.level1.is_some() || self.rau.is_some() || self.level2.is_some() {
                    return Err(Error::Config("MaxPoolOnly carries no recurrent parameters".into()));
                }
                c_v
            }
            v => {
                let (l1, l2) = match (&self.level1, &self.level2) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::Config(format!("{v} needs both LSTM levels"))),
                };
                if l1.bwd.is_some() != bi || l2.bwd.is_some() != bi {
                    return Err(Error::Config(format!("{v}: LSTM directionality mismatch")));
                }
                l1.validate(c_v)?;
                let c_o = l1.output_dim();
                let x_dim = match (&self.rau, v.has_attention()) {
                    (Some(r), true) => {
                        r.validate()?;
                        if r.query_dim() != c_o || r.middle_channels() != c_m {
                            return Err(shape_err!(
                                "rau expects C_o={} C_m={}, wiring has C_o={c_o} C_m={c_m}",
                                r.query_dim(),
                                r.middle_channels()
                            ));
                        }
                        c_o + r.d_k()
                    }
                    (None, false) => c_o,
                    _ => return Err(Error::Config(format!("{v}: attention parameters mismatch"))),
                };
                l2.validate(x_dim)?;
                l2.output_dim()
            }
        };
        if self.classifier_w.shape().len() != 2
            || self.classifier_w.shape()[1] != desc
            || self.classifier_b.shape() != [self.classifier_w.shape()[0]]
        {
            return Err(shape_err!(
                "classifier {:?}/{:?} does not fit descriptor dim {desc}",
                self.classifier_w.shape(),
                self.classifier_b.shape()
            ));
        }
        Ok(())
    }

    /// Places every parameter on `g`; the returned handle also keeps the
    /// flat var list for gradient write-back.
    pub fn bind(&self, g: &mut Graph) -> PremaVars {
        let all = self.bind_all(g);
        let mut rest: &[Var] = &all;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let enc_n = self.encoder.named_params().len();
        let encoder = self.encoder.vars_from(&take(enc_n));
        let level = |lvl: &Option<LstmLevel>, take: &mut dyn FnMut(usize) -> Vec<Var>| {
            lvl.as_ref().map(|l| {
                let f = LstmVars::from_bound(&take(15), l.fwd.input_dim(), l.fwd.hidden_dim());
                let b = l
                    .bwd
                    .as_ref()
                    .map(|b| LstmVars::from_bound(&take(15), b.input_dim(), b.hidden_dim()));
                (f, b)
            })
        };
        let level1 = level(&self.level1, &mut take);
        let rau = self.rau.as_ref().map(|r| r.vars_from(&take(3)));
        let level2 = level(&self.level2, &mut take);
        let cls = take(2);
        PremaVars {
            variant: self.variant,
            encoder,
            level1,
            rau,
            level2,
            classifier_w: cls[0],
            classifier_b: cls[1],
            all,
        }
    }
}

impl Parameterized for PremaParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("encoder", self.encoder.named_params());
        if let Some(l) = &self.level1 {
            out.extend(prefixed("level1", l.named()));
        }
        if let Some(r) = &self.rau {
            out.extend(prefixed("rau", r.named_params()));
        }
        if let Some(l) = &self.level2 {
            out.extend(prefixed("level2", l.named()));
        }
        out.push(("classifier.w".into(), &self.classifier_w));
        out.push(("classifier.b".into(), &self.classifier_b));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed_mut("encoder", self.encoder.named_params_mut());
        if let Some(l) = &mut self.level1 {
            out.extend(prefixed_mut("level1", l.named_mut()));
        }
        if let Some(r) = &mut self.rau {
            out.extend(prefixed_mut("rau", r.named_params_mut()));
        }
        if let Some(l) = &mut self.level2 {
            out.extend(prefixed_mut("level2", l.named_mut()));
        }
        out.push(("classifier.w".into(), &mut self.classifier_w));
        out.push(("classifier.b".into(), &mut self.classifier_b));
        out
    }
}

type LevelVars = (LstmVars, Option<LstmVars>);

/// [`PremaParams`] bound to a graph.
#[derive(Clone, Debug)]
pub struct PremaVars {
    variant: AggregationVariant,
    pub encoder: EncoderVars,
    level1: Option<LevelVars>,
    rau: Option<RauVars>,
    level2: Option<LevelVars>,
    classifier_w: Var,
    classifier_b: Var,
    /// Every bound parameter in [`Parameterized`] order.
    pub all: Vec<Var>,
}

/// Per-step intermediate nodes.
#[derive(Clone, Copy, Debug)]
pub struct StepTraceVars {
    pub o1: Var,
    pub attention: Option<RauOutputVars>,
    pub o2: Var,
}

impl StepTraceVars {
    pub fn d(&self) -> Var {
        self.o2
    }
}

fn run_level(g: &mut Graph, level: &LevelVars, xs: &[Var]) -> Result<Vec<Var>> {
    match level {
        (f, Some(b)) => bilstm_vars(g, f, b, xs),
        (f, None) => {
            let init = f.zero_state(g);
            Ok(f.run(g, xs, init)?.into_iter().map(|s| s.h).collect())
        }
    }
}

impl PremaVars {
    pub fn variant(&self) -> AggregationVariant {
        self.variant
    }

    /// RAU over one view and the second-level input it feeds.
    fn attend(&self, g: &mut Graph, o1: Var, m: Var) -> Result<(Var, Option<RauOutputVars>)> {
        match &self.rau {
            Some(rau) => {
                let out = rau.forward(g, o1, m)?;
                let x = g.concat(out.att_part, o1, 0)?;
                Ok((x, Some(out)))
            }
            None => Ok((o1, None)),
        }
    }

    /// One aggregation unit on the forward second-level direction.
    pub fn step(
        &self,
        g: &mut Graph,
        o1: Var,
        m: Var,
        state: StateVars,
    ) -> Result<(StepTraceVars, StateVars)> {
        let (lstm2, _) = self
            .level2
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no second LSTM level", self.variant)))?;
        let (x, attention) = self.attend(g, o1, m)?;
        let (next, _) = lstm2.step(g, x, state)?;
        Ok((
            StepTraceVars {
                o1,
                attention,
                o2: next.h,
            },
            next,
        ))
    }

    /// Descriptor node and per-step traces (empty for MaxPoolOnly).
    pub fn aggregate(&self, g: &mut Graph, views: &[ViewFeatureVars]) -> Result<(Var, Vec<StepTraceVars>)> {
        if views.is_empty() {
            return Err(Error::Argument("aggregate: empty view list".into()));
        }
        let vs: Vec<Var> = views.iter().map(|f| f.v).collect();
        let (Some(level1), Some(level2)) = (&self.level1, &self.level2) else {
            let d = g.max_over_set(&vs)?;
            return Ok((d, Vec::new()));
        };
        let o1 = run_level(g, level1, &vs)?;
        let mut xs = Vec::with_capacity(views.len());
        let mut attn = Vec::with_capacity(views.len());
        for (&o, f) in o1.iter().zip(views) {
            let (x, a) = self.attend(g, o, f.m)?;
            xs.push(x);
            attn.push(a);
        }
        let o2 = run_level(g, level2, &xs)?;
        let d = g.max_over_set(&o2)?;
        let traces = o1
            .into_iter()
            .zip(attn)
            .zip(o2)
            .map(|((o1, attention), o2)| StepTraceVars { o1, attention, o2 })
            .collect();
        Ok((d, traces))
    }

    pub fn classify(&self, g: &mut Graph, descriptor: Var) -> Result<Var> {
        let z = g.matvec(self.classifier_w, descriptor)?;
        g.add(z, self.classifier_b)
    }

    /// Encodes images and aggregates them: returns `(descriptor, logits, traces)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &[Var],
    ) -> Result<(Var, Var, Vec<StepTraceVars>)> {
        let feats = images
            .iter()
            .map(|&img| self.encoder.encode(g, img))
            .collect::<Result<Vec<_>>>()?;
        let (d, traces) = self.aggregate(g, &feats)?;
        let logits = self.classify(g, d)?;
        Ok((d, logits, traces))
    }
}

/// Aggregated shape representation.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDescriptor {
    pub d: Tensor,
    pub variant: AggregationVariant,
    pub shape_id: String,
}

/// Values recorded at one aggregation step.
#[derive(Clone, Debug, PartialEq)]
pub struct PremaStepTrace {
    pub o1: Tensor,
    pub conf: Option<ConfidenceMap>,
    pub att_part: Option<AttentivePart>,
    pub o2: Tensor,
    /// The fused feature; always equal to `o2`.
    pub d: Tensor,
}

fn trace_values(g: &Graph, t: &StepTraceVars) -> PremaStepTrace {
    PremaStepTrace {
        o1: g.value(t.o1).clone(),
        conf: t.attention.map(|a| ConfidenceMap {
            conf: g.value(a.conf).clone(),
            scores: g.value(a.scores).clone(),
        }),
        att_part: t.attention.map(|a| AttentivePart {
            att_part: g.value(a.att_part).clone(),
        }),
        o2: g.value(t.o2).clone(),
        d: g.value(t.o2).clone(),
    }
}

fn check_variant(params: &PremaParams, variant: AggregationVariant) -> Result<()> {
    if params.variant != variant {
        return Err(Error::Config(format!(
            "parameters were built for {}, not {variant}",
            params.variant
        )));
    }
    params.validate()
}

/// Single aggregation unit: attention on `m_t`, then one forward LSTM2 step.
pub fn prema_step(
    params: &PremaParams,
    level1_out: &Tensor,
    m: &Tensor,
    level2_state: &LstmState,
) -> Result<(PremaStepTrace, LstmState)> {
    params.validate()?;
    let mut g = Graph::inference();
    let p = params.bind(&mut g);
    let o1 = g.constant(level1_out.clone());
    let mv = g.constant(m.clone());
    let h = g.constant(level2_state.h.clone());
    let c = g.constant(level2_state.c.clone());
    let (trace, next) = p.step(&mut g, o1, mv, StateVars { h, c })?;
    Ok((
        trace_values(&g, &trace),
        LstmState {
            h: g.value(next.h).clone(),
            c: g.value(next.c).clone(),
        },
    ))
}

pub fn aggregate(
    params: &PremaParams,
    views: &[ViewFeatures],
    variant: AggregationVariant,
) -> Result<(ShapeDescriptor, Vec<PremaStepTrace>)> {
    check_variant(params, variant)?;
    let mut g = Graph::inference();
    let p = params.bind(&mut g);
    let feats: Vec<ViewFeatureVars> = views
        .iter()
        .map(|f| ViewFeatureVars {
            m: g.constant(f.m.clone()),
            v: g.constant(f.v.clone()),
        })
        .collect();
    let (d, traces) = p.aggregate(&mut g, &feats)?;
    Ok((
        ShapeDescriptor {
            d: g.value(d).clone(),
            variant,
            shape_id: String::new(),
        },
        traces.iter().map(|t| trace_values(&g, t)).collect(),
    ))
}

pub fn classify(params: &PremaParams, descriptor: &ShapeDescriptor) -> Result<Tensor> {
    if descriptor.d.shape() != [params.descriptor_dim()] {
        return Err(shape_err!(
            "descriptor {:?} does not match classifier input {}",
            descriptor.d.shape(),
            params.descriptor_dim()
        ));
    }
    let mut g = Graph::inference();
    let p = params.bind(&mut g);
    let d = g.constant(descriptor.d.clone());
    let logits = p.classify(&mut g, d)?;
    Ok(g.value(logits).clone())
}

/// Inference on raw view images.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub descriptor: ShapeDescriptor,
    pub logits: Tensor,
    pub traces: Vec<PremaStepTrace>,
}

pub fn embed(params: &PremaParams, shape_id: &str, images: &[Tensor]) -> Result<Embedding> {
    let mut g = Graph::inference();
    let p = params.bind(&mut g);
    let imgs: Vec<Var> = images.iter().map(|t| g.constant(t.clone())).collect();
    let (d, logits, traces) = p.forward(&mut g, &imgs)?;
    Ok(Embedding {
        descriptor: ShapeDescriptor {
            d: g.value(d).clone(),
            variant: params.variant,
            shape_id: shape_id.to_string(),
        },
        logits: g.value(logits).clone(),
        traces: traces.iter().map(|t| trace_values(&g, t)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(variant: AggregationVariant) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 8,
                channels: vec![2, 3],
                kernel: 3,
                stride: 2,
                pad: 1,
                middle_tap: 0,
                feature_dim: 4,
            },
            d_h1: 3,
            d_k: 2,
            d_h2: 3,
            classes: 3,
            variant,
        }
    }

    fn tiny(variant: AggregationVariant, seed: u64) -> PremaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = tiny_config(variant);
        let enc = CnnEncoderParams::init(&cfg.encoder, &mut rng).unwrap();
        PremaParams::init(&cfg, enc, &mut rng).unwrap()
    }

    fn features(n: usize, rng: &mut ChaCha8Rng) -> Vec<ViewFeatures> {
        (0..n)
            .map(|_| ViewFeatures {
                m: Tensor::uniform(&[2, 16], 0.0, 1.0, rng),
                v: Tensor::uniform(&[4], -1.0, 1.0, rng),
            })
            .collect()
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in AggregationVariant::ALL {
            assert_eq!(v.name().parse::<AggregationVariant>().unwrap(), v);
            assert_eq!(AggregationVariant::from_code(v.code()), Some(v));
        }
        assert!("nope".parse::<AggregationVariant>().is_err());
    }

    #[test]
    fn descriptor_dims_per_variant() {
        assert_eq!(tiny(AggregationVariant::Prema, 0).descriptor_dim(), 6);
        assert_eq!(tiny(AggregationVariant::DoubleLstms, 0).descriptor_dim(), 6);
        assert_eq!(tiny(AggregationVariant::SingleDirectionPrema, 0).descriptor_dim(), 3);
        assert_eq!(tiny(AggregationVariant::MaxPoolOnly, 0).descriptor_dim(), 4);
        for v in AggregationVariant::ALL {
            tiny(v, 1).validate().unwrap();
        }
    }

    #[test]
    fn empty_views_rejected() {
        let p = tiny(AggregationVariant::Prema, 2);
        let err = aggregate(&p, &[], AggregationVariant::Prema).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        let err = aggregate(&p, &[], AggregationVariant::DoubleLstms).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_view_descriptor_is_d1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = features(1, &mut rng);
        for v in AggregationVariant::ALL {
            let p = tiny(v, 4);
            let (desc, traces) = aggregate(&p, &f, v).unwrap();
            match v {
                AggregationVariant::MaxPoolOnly => assert!(desc.d.bit_eq(&f[0].v)),
                _ => assert!(desc.d.bit_eq(&traces[0].d)),
            }
        }
    }

    #[test]
    fn descriptor_is_max_of_traces_and_d_equals_o2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in [AggregationVariant::Prema, AggregationVariant::DoubleLstms, AggregationVariant::SingleDirectionPrema] {
            let p = tiny(v, 6);
            let f = features(5, &mut rng);
            let (desc, traces) = aggregate(&p, &f, v).unwrap();
            assert_eq!(traces.len(), 5);
            for j in 0..desc.d.numel() {
                let m = traces.iter().map(|t| t.d.data()[j]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(desc.d.data()[j].to_bits(), m.to_bits());
            }
            assert!(traces.iter().all(|t| t.d.bit_eq(&t.o2)));
            assert_eq!(traces[0].conf.is_some(), v.has_attention());
        }
    }

    #[test]
    fn zero_aggregation_stack_gives_zero_descriptor_and_uniform_attention() {
        let mut p = tiny(AggregationVariant::Prema, 7);
        for (name, t) in p.named_params_mut() {
            if !name.starts_with("encoder") {
                t.data_mut().fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = features(3, &mut rng);
        let (desc, traces) = aggregate(&p, &f, AggregationVariant::Prema).unwrap();
        assert!(desc.d.data().iter().all(|&v| v == 0.0));
        for t in traces {
            let conf = t.conf.unwrap().conf;
            assert!(conf.data().iter().all(|&c| (c - 1.0 / 16.0).abs() < 1e-15));
        }
    }

    #[test]
    fn classify_examples() {
        let mut p = tiny(AggregationVariant::MaxPoolOnly, 9);
        p.classifier_w.data_mut().fill(0.0);
        let desc = ShapeDescriptor {
            d: Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            variant: AggregationVariant::MaxPoolOnly,
            shape_id: "x".into(),
        };
        assert!(classify(&p, &desc).unwrap().data().iter().all(|&v| v == 0.0));

        let mut q = p.clone();
        q.classifier_w = Tensor::identity(2);
        q.classifier_b = Tensor::zeros(&[2]);
        let d2 = ShapeDescriptor {
            d: Tensor::vector(vec![3.0, -1.0]).unwrap(),
            ..desc.clone()
        };
        assert_eq!(classify(&q, &d2).unwrap().data(), &[3.0, -1.0]);
        assert!(classify(&p, &d2).is_err());
    }

    #[test]
    fn validate_catches_bad_wiring() {
        let mut p = tiny(AggregationVariant::Prema, 10);
        p.rau.as_mut().unwrap().w_h = Tensor::zeros(&[5, 2]);
        assert!(p.validate().is_err());
        let mut q = tiny(AggregationVariant::DoubleLstms, 10);
        q.rau = Some(RauParams::zeros(6, 2, 2));
        assert!(q.validate().is_err());
    }
}
