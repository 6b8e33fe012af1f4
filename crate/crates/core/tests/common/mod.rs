#![allow(dead_code)]

use prema::aggregator::{AggregationVariant, ModelConfig, PremaParams};
use prema::encoder::{EncoderConfig, ViewFeatureVars};
use prema::gradcheck::{check_inputs, check_params, GradCheckOptions, GradCheckReport};
use prema::params::Parameterized;
use prema::train::{stage2_batch_loss, LabeledViews, LossReduction};
use prema::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Every parameter array redrawn uniformly, so zero-initialized biases and
/// peepholes are exercised too.
pub fn randomize<P: Parameterized>(p: &mut P, scale: f64, r: &mut ChaCha8Rng) {
    for t in p.params_mut() {
        for x in t.data_mut() {
            *x = r.gen_range(-scale..scale);
        }
    }
}

/// Reduces any output to a scalar through fixed random weights so that every
/// output entry carries a distinct gradient.
pub fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(g.shape(out), &mut rng(seed));
    let w = g.constant(w);
    let h = g.hadamard(out, w)?;
    g.sum(h)
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// One report per differentiable graph operation.
pub fn op_reports() -> Result<Vec<(String, GradCheckReport)>> {
    let o = GradCheckOptions::default();
    let mut r = rng(11);
    let mut t = |s: &[usize]| rand_tensor(s, &mut r);
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $inputs:expr, $f:expr) => {
            out.push(($name.to_string(), check_inputs(&named($inputs), $f, o)?));
        };
    }
    check!("matmul", vec![("a", t(&[2, 3])), ("b", t(&[3, 4]))], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 1)
    });
    check!("matvec", vec![("w", t(&[3, 5])), ("x", t(&[5]))], |g, v| {
        let y = g.matvec(v[0], v[1])?;
        probe(g, y, 2)
    });
    check!("weighted_columns", vec![("values", t(&[3, 4])), ("weights", t(&[4]))], |g, v| {
        let y = g.weighted_columns(v[0], v[1])?;
        probe(g, y, 3)
    });
    check!("transpose", vec![("a", t(&[2, 5]))], |g, v| {
        let y = g.transpose(v[0])?;
        probe(g, y, 4)
    });
    check!("add", vec![("a", t(&[4])), ("b", t(&[4]))], |g, v| {
        let y = g.add(v[0], v[1])?;
        probe(g, y, 5)
    });
    check!("hadamard", vec![("a", t(&[2, 3])), ("b", t(&[2, 3]))], |g, v| {
        let y = g.hadamard(v[0], v[1])?;
        probe(g, y, 6)
    });
    check!("scale", vec![("a", t(&[5]))], |g, v| {
        let y = g.scale(v[0], -0.37)?;
        probe(g, y, 7)
    });
    check!("sigmoid", vec![("a", t(&[6]))], |g, v| {
        let y = g.sigmoid(v[0])?;
        probe(g, y, 8)
    });
    check!("tanh", vec![("a", t(&[6]))], |g, v| {
        let y = g.tanh(v[0])?;
        probe(g, y, 9)
    });
    check!("relu", vec![("a", t(&[8]))], |g, v| {
        let y = g.relu(v[0])?;
        probe(g, y, 10)
    });
    check!("softmax", vec![("a", t(&[7]))], |g, v| {
        let y = g.softmax(v[0])?;
        probe(g, y, 11)
    });
    check!(
        "conv2d",
        vec![("input", t(&[2, 5, 6])), ("kernels", t(&[3, 2, 3, 3])), ("bias", t(&[3]))],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(g, y, 12)
        }
    );
    check!("conv2d_unpadded", vec![("input", t(&[1, 4, 4])), ("kernels", t(&[2, 1, 2, 2]))], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0)?;
        probe(g, y, 13)
    });
    check!("global_avg_pool", vec![("a", t(&[3, 2, 4]))], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        probe(g, y, 14)
    });
    check!("reshape", vec![("a", t(&[2, 3, 2]))], |g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        probe(g, y, 15)
    });
    check!("concat_axis0", vec![("a", t(&[3])), ("b", t(&[2]))], |g, v| {
        let y = g.concat(v[0], v[1], 0)?;
        probe(g, y, 16)
    });
    check!("concat_axis1", vec![("a", t(&[2, 3])), ("b", t(&[2, 1])), ("c", t(&[2, 2]))], |g, v| {
        let y = g.concat_all(&[v[0], v[1], v[2]], 1)?;
        probe(g, y, 17)
    });
    check!("max_over_set", vec![("a", t(&[5])), ("b", t(&[5])), ("c", t(&[5]))], |g, v| {
        let y = g.max_over_set(&[v[0], v[1], v[2]])?;
        probe(g, y, 18)
    });
    check!("cross_entropy", vec![("logits", t(&[4]))], |g, v| g.cross_entropy(v[0], 2));
    check!("sum", vec![("a", t(&[3, 2]))], |g, v| g.sum(v[0]));
    check!("add_all", vec![("a", t(&[1])), ("b", t(&[1])), ("c", t(&[1]))], |g, v| {
        let y = g.add_all(&[v[0], v[1], v[2]])?;
        let y2 = g.hadamard(y, y)?;
        g.sum(y2)
    });
    Ok(out)
}

/// The sliced configuration: 3 views, C_m = 4, N = 6, d_h1 = 3, d_k = 4,
/// d_h2 = 4, 3 classes. Views enter as feature maps so N need not be square.
pub const SLICED_VIEWS: usize = 3;
pub const SLICED_N: usize = 6;

pub fn sliced_config(variant: AggregationVariant) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 4,
            channels: vec![4],
            kernel: 3,
            stride: 2,
            pad: 1,
            middle_tap: 0,
            feature_dim: 5,
        },
        d_h1: 3,
        d_k: 4,
        d_h2: 4,
        classes: 3,
        variant,
    }
}

pub fn sliced_params(variant: AggregationVariant, seed: u64) -> PremaParams {
    let cfg = sliced_config(variant);
    let mut r = rng(seed);
    let enc = prema::encoder::CnnEncoderParams::init(&cfg.encoder, &mut r).unwrap();
    let mut p = PremaParams::init(&cfg, enc, &mut r).unwrap();
    randomize(&mut p, 0.8, &mut r);
    p
}

pub fn sliced_features(seed: u64) -> Vec<(Tensor, Tensor)> {
    let mut r = rng(seed);
    (0..SLICED_VIEWS)
        .map(|_| (Tensor::uniform(&[4, SLICED_N], 0.0, 1.5, &mut r), rand_tensor(&[5], &mut r)))
        .collect()
}

/// Cross-entropy of the aggregation stack over fixed view features.
pub fn sliced_loss(p: &PremaParams, g: &mut Graph, feats: &[(Tensor, Tensor)], label: usize) -> Result<(Var, Vec<Var>)> {
    let vars = p.bind(g);
    let views: Vec<ViewFeatureVars> = feats
        .iter()
        .map(|(m, v)| ViewFeatureVars {
            m: g.constant(m.clone()),
            v: g.constant(v.clone()),
        })
        .collect();
    let (d, _) = vars.aggregate(g, &views)?;
    let logits = vars.classify(g, d)?;
    let loss = g.cross_entropy(logits, label)?;
    Ok((loss, vars.all))
}

/// End-to-end reports: the aggregation stack of every variant on the sliced
/// configuration, then the whole network (encoder included) on raw images.
pub fn end_to_end_reports() -> Result<Vec<(String, GradCheckReport)>> {
    let o = GradCheckOptions::default();
    let mut out = Vec::new();
    let feats = sliced_features(21);
    for variant in AggregationVariant::ALL {
        let p = sliced_params(variant, 31);
        let rep = check_params(&p, |p, g| sliced_loss(p, g, &feats, 1), o)?;
        out.push((format!("sliced_{variant}"), rep));
    }

    let cfg = sliced_config(AggregationVariant::Prema);
    let mut p = sliced_params(AggregationVariant::Prema, 41);
    let mut r = rng(43);
    randomize(&mut p, 0.8, &mut r);
    let batch: Vec<LabeledViews> = (0..2)
        .map(|k| LabeledViews {
            shape_id: format!("s{k}"),
            class_id: k,
            views: (0..SLICED_VIEWS)
                .map(|_| Tensor::uniform(&[1, cfg.encoder.image_size, cfg.encoder.image_size], 0.0, 1.0, &mut r))
                .collect(),
        })
        .collect();
    let refs: Vec<&LabeledViews> = batch.iter().collect();
    let rep = check_params(&p, |p, g| stage2_batch_loss(p, g, &refs, LossReduction::Mean), o)?;
    out.push(("full_network_batch".to_string(), rep));
    Ok(out)
}
