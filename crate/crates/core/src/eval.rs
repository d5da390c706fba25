//! Inference and dataset evaluation.

use std::path::Path;

use crate::autograd::{ResampleMap, Tape};
use crate::data::{save_gray, Sample};
use crate::encoder::preprocess_depth;
use crate::error::{shape_err, Error, Result};
use crate::metrics::{EvalReport, ImageScores};
use crate::model::PicrNet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Bilinear resize of a `[C,H,W]` tensor.
pub fn resize(t: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = *t.shape() else {
        return Err(shape_err("resize", format!("{:?} is not [C,H,W]", t.shape())));
    };
    if (h, w) == (oh, ow) {
        return Ok(t.clone());
    }
    ResampleMap::bilinear(c, h, w, oh, ow).apply(t)
}

/// Final saliency map `[S,S]` for inputs already at the configured size.
pub fn predict(net: &PicrNet, params: &ParamStore<f32>, rgb: &Tensor<f32>, depth: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let d3 = preprocess_depth(depth)?;
    let pred = net.forward(&p, tape.constant(rgb.clone()), tape.constant(d3))?;
    Ok(pred.out.value().as_ref().clone())
}

/// Resizes the inputs to the configured size, predicts, and resizes the map
/// back to the original `[H,W]`.
pub fn infer(net: &PicrNet, params: &ParamStore<f32>, rgb: &Tensor<f32>, depth: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    if depth.shape() != [1, h, w] {
        return Err(shape_err("infer", format!("rgb {:?} against depth {:?}", rgb.shape(), depth.shape())));
    }
    let s = net.config.input_size;
    let out = predict(net, params, &resize(rgb, s, s)?, &resize(depth, s, s)?)?;
    resize(&out.reshape([1, s, s])?, h, w)?
        .map(|v| v.clamp(0.0, 1.0))
        .reshape([h, w])
}

/// Scores every sample; predictions are written to `dump/<name>.png` when
/// given.
pub fn evaluate(net: &PicrNet, params: &ParamStore<f32>, data: &[Sample], dump: Option<&Path>) -> Result<EvalReport> {
    let s = net.config.input_size;
    let mut rows = Vec::with_capacity(data.len());
    for sample in data {
        let (h, w) = sample.size();
        if (h, w) != (s, s) {
            return Err(Error::Config(format!(
                "sample `{}` is {h}x{w} but the model expects {s}x{s}",
                sample.name
            )));
        }
        let pred = predict(net, params, &sample.rgb, &sample.depth)?;
        if let Some(dir) = dump {
            save_gray(&pred, &dir.join(format!("{}.png", sample.name)))?;
        }
        rows.push(ImageScores::compute(sample.name.clone(), &pred, &sample.gt)?);
    }
    Ok(EvalReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::{generate_sample, load_gray, Quality};

    fn tiny() -> (PicrNet, ParamStore<f32>) {
        let mut c = Config::toy().model;
        c.input_size = 32;
        PicrNet::build(&c, 0).unwrap()
    }

    #[test]
    fn infer_restores_original_size() {
        let (net, params) = tiny();
        let s = generate_sample(1, (40, 48), Quality::Degraded).unwrap();
        let out = infer(&net, &params, &s.rgb, &s.depth).unwrap();
        assert_eq!(out.shape(), [40, 48]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out, infer(&net, &params, &s.rgb, &s.depth).unwrap());
    }

    #[test]
    fn evaluate_refuses_wrong_size_and_dumps() {
        let (net, params) = tiny();
        let wrong = generate_sample(1, (64, 64), Quality::Good).unwrap();
        let err = evaluate(&net, &params, &[wrong], None).unwrap_err();
        assert!(err.to_string().contains("64x64") && err.to_string().contains("32x32"));

        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(2, (32, 32), Quality::Good).unwrap();
        let r = evaluate(&net, &params, std::slice::from_ref(&s), Some(dir.path())).unwrap();
        assert_eq!(r.rows.len(), 1);
        let pred = predict(&net, &params, &s.rgb, &s.depth).unwrap();
        let back = load_gray(&dir.path().join(format!("{}.png", s.name))).unwrap();
        assert!(back.max_abs_diff(&pred) <= 0.5 / 255.0 + 1e-6);
    }
}
