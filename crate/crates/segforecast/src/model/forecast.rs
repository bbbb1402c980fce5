//! Temporal forecasting module: a 3D-convolution stack that fuses the
//! lowest-resolution feature maps of every input frame into one map.
//!
//! Two kernel-(3,3,3) layers with temporal padding keep the temporal depth,
//! then a final layer spanning the whole remaining depth collapses it to 1.
//! Every layer is followed by batch norm and ReLU; the channel count is
//! preserved throughout.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{relu_backward_slice, relu_slice, BatchNorm, BnCache, Conv3d, Feature, Volume};
use super::params::{Gradients, ParamKind, ParamVisit};
use crate::error::{Error, Result};

pub struct ForecastModule {
    layers: Vec<(Conv3d, BatchNorm)>,
    num_frames: usize,
}

pub struct ForecastCache {
    /// Input to each conv layer.
    inputs: Vec<Volume>,
    bn: Vec<BnCache>,
    /// Pre-ReLU activations per layer.
    pre: Vec<Volume>,
}

impl ForecastModule {
    pub fn init(path: &str, channels: usize, num_frames: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(num_frames >= 2);
        let mut layers = Vec::new();
        for i in 0..2 {
            layers.push((
                Conv3d::init(
                    format!("{path}.layer{i}.conv"),
                    channels,
                    channels,
                    3,
                    3,
                    1,
                    1,
                    rng,
                ),
                BatchNorm::init(format!("{path}.layer{i}.bn"), channels),
            ));
        }
        layers.push((
            Conv3d::init(
                format!("{path}.layer2.conv"),
                channels,
                channels,
                num_frames,
                3,
                0,
                1,
                rng,
            ),
            BatchNorm::init(format!("{path}.layer2.bn"), channels),
        ));
        ForecastModule { layers, num_frames }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    /// Stack per-frame features `(C, h, w)` into a `(C, T, h, w)` volume.
    pub fn stack(features: &[Feature]) -> Volume {
        let views: Vec<_> = features
            .iter()
            .map(|f| f.view().insert_axis(Axis(1)))
            .collect();
        ndarray::concatenate(Axis(1), &views).expect("uniform feature shapes")
    }

    fn check_depth(&self, stack: &Volume) -> Result<()> {
        if stack.dim().1 != self.num_frames {
            return Err(Error::Shape(format!(
                "forecast module is built for {} stacked frames, got {}",
                self.num_frames,
                stack.dim().1
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, stack: Volume) -> Result<(Feature, ForecastCache)> {
        self.check_depth(&stack)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut bn_caches = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = stack;
        for (conv, bn) in &self.layers {
            let z = conv.forward(&h);
            inputs.push(h);
            let shape = z.dim();
            let (bn_out, bn_cache) = bn.forward_train(z.as_slice().unwrap());
            let pre = Volume::from_shape_vec(shape, bn_out).unwrap();
            let mut y = pre.clone();
            relu_slice(y.as_slice_mut().unwrap());
            bn_caches.push(bn_cache);
            pres.push(pre);
            h = y;
        }
        let (c, t, hh, ww) = h.dim();
        debug_assert_eq!(t, 1);
        let fused = h.into_shape_with_order((c, hh, ww)).unwrap();
        Ok((
            fused,
            ForecastCache {
                inputs,
                bn: bn_caches,
                pre: pres,
            },
        ))
    }

    pub fn forward_eval(&self, stack: Volume) -> Result<Feature> {
        self.check_depth(&stack)?;
        let mut h = stack;
        for (conv, bn) in &self.layers {
            let z = conv.forward(&h);
            let shape = z.dim();
            let mut y =
                Volume::from_shape_vec(shape, bn.forward_eval(z.as_slice().unwrap())).unwrap();
            relu_slice(y.as_slice_mut().unwrap());
            h = y;
        }
        let (c, _, hh, ww) = h.dim();
        Ok(h.into_shape_with_order((c, hh, ww)).unwrap())
    }

    /// Returns the gradient with respect to the stacked input volume.
    pub fn backward(
        &self,
        cache: &ForecastCache,
        g_fused: &Feature,
        grads: &mut Gradients,
    ) -> Volume {
        let (c, hh, ww) = g_fused.dim();
        let mut g = g_fused
            .clone()
            .into_shape_with_order((c, 1, hh, ww))
            .unwrap();
        for (i, (conv, bn)) in self.layers.iter().enumerate().rev() {
            relu_backward_slice(
                g.as_slice_mut().unwrap(),
                cache.pre[i].as_slice().unwrap(),
            );
            let g_bn = bn.backward(&cache.bn[i], g.as_slice().unwrap(), grads);
            let g_conv = Volume::from_shape_vec(g.dim(), g_bn).unwrap();
            g = conv
                .backward(&cache.inputs[i], &g_conv, grads, true)
                .unwrap();
        }
        g
    }

    pub fn bn_stats<'a>(
        cache: &'a ForecastCache,
        out: &mut Vec<(&'a Array1<f64>, &'a Array1<f64>)>,
    ) {
        for c in &cache.bn {
            out.push((&c.mean, &c.var));
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        for (_, bn) in &mut self.layers {
            f(bn);
        }
    }
}

impl ParamVisit for ForecastModule {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        for (conv, bn) in &self.layers {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        for (conv, bn) in &mut self.layers {
            conv.visit_params_mut(f);
            bn.visit_params_mut(f);
        }
    }
}
