//! Per-frame encoder pathway: five blocks of [3x3 conv, batch norm, ReLU]
//! with 2x2 max pooling between blocks. The feature pyramid collects each
//! block's pre-pool output.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    maxpool2_backward, maxpool2_forward, relu_backward_slice, relu_slice, BatchNorm, BnCache,
    Conv2d, Feature, PoolCache,
};
use super::params::{Gradients, ParamKind, ParamVisit};
use crate::error::{Error, Result};

/// 3x3 convolution + batch norm + ReLU.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

pub struct CbrCache {
    /// Convolution input.
    pub x: Feature,
    pub bn: BnCache,
    /// Pre-ReLU activations (batch-norm output), for the ReLU mask.
    pub pre: Feature,
}

impl ConvBnRelu {
    pub fn init(path: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBnRelu {
            conv: Conv2d::init(format!("{path}.conv"), c_in, c_out, 3, 1, rng),
            bn: BatchNorm::init(format!("{path}.bn"), c_out),
        }
    }

    pub fn forward_train(&self, x: Feature) -> (Feature, CbrCache) {
        let z = self.conv.forward(&x);
        let shape = z.dim();
        let (bn_out, bn_cache) = self.bn.forward_train(z.as_slice().unwrap());
        let pre = Feature::from_shape_vec(shape, bn_out).unwrap();
        let mut y = pre.clone();
        relu_slice(y.as_slice_mut().unwrap());
        (
            y,
            CbrCache {
                x,
                bn: bn_cache,
                pre,
            },
        )
    }

    pub fn forward_eval(&self, x: &Feature) -> Feature {
        let z = self.conv.forward(x);
        let shape = z.dim();
        let mut y = Feature::from_shape_vec(shape, self.bn.forward_eval(z.as_slice().unwrap()))
            .unwrap();
        relu_slice(y.as_slice_mut().unwrap());
        y
    }

    pub fn backward(
        &self,
        cache: &CbrCache,
        gy: &Feature,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Feature> {
        let mut g = gy.clone();
        relu_backward_slice(g.as_slice_mut().unwrap(), cache.pre.as_slice().unwrap());
        let g_bn = self.bn.backward(&cache.bn, g.as_slice().unwrap(), grads);
        let g_conv = Feature::from_shape_vec(g.dim(), g_bn).unwrap();
        self.conv.backward(&cache.x, &g_conv, grads, need_dx)
    }
}

impl ParamVisit for ConvBnRelu {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
    }
}

/// One encoder pathway producing a 5-level feature pyramid.
pub struct Encoder {
    pub blocks: Vec<Vec<ConvBnRelu>>,
}

pub struct EncoderCache {
    pub block_caches: Vec<Vec<CbrCache>>,
    pub pool_caches: Vec<PoolCache>,
}

/// Pre-pool outputs of the five blocks, full to 1/16 resolution.
pub type Pyramid = Vec<Feature>;

impl Encoder {
    pub fn init(
        path: &str,
        in_channels: usize,
        channels: &[usize],
        repeats: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(channels.len(), 5);
        assert_eq!(repeats.len(), 5);
        let mut blocks = Vec::with_capacity(5);
        let mut c_prev = in_channels;
        for (b, (&c, &r)) in channels.iter().zip(repeats).enumerate() {
            let mut layers = Vec::with_capacity(r);
            for i in 0..r {
                layers.push(ConvBnRelu::init(
                    &format!("{path}.block{b}.layer{i}"),
                    if i == 0 { c_prev } else { c },
                    c,
                    rng,
                ));
            }
            c_prev = c;
            blocks.push(layers);
        }
        Encoder { blocks }
    }

    /// Shape error raised before any compute when the input cannot be
    /// halved four times.
    fn check_input(&self, x: &Feature) -> Result<()> {
        let (c, h, w) = x.dim();
        let expect = self.blocks[0][0].conv.weight.dim().1;
        if c != expect {
            return Err(Error::Shape(format!(
                "encoder expects {expect} input channels, got {c}"
            )));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "encoder input dimensions must be divisible by 16, got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, x: &Feature) -> Result<(Pyramid, EncoderCache)> {
        self.check_input(x)?;
        let mut pyramid = Vec::with_capacity(5);
        let mut block_caches = Vec::with_capacity(5);
        let mut pool_caches = Vec::with_capacity(4);
        let mut h = x.clone();
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                let (pooled, pc) = maxpool2_forward(&h);
                pool_caches.push(pc);
                h = pooled;
            }
            let mut caches = Vec::with_capacity(block.len());
            for layer in block {
                let (y, c) = layer.forward_train(h);
                caches.push(c);
                h = y;
            }
            block_caches.push(caches);
            pyramid.push(h.clone());
        }
        Ok((
            pyramid,
            EncoderCache {
                block_caches,
                pool_caches,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Feature) -> Result<Pyramid> {
        self.check_input(x)?;
        let mut pyramid = Vec::with_capacity(5);
        let mut h = x.clone();
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                h = maxpool2_forward(&h).0;
            }
            for layer in block {
                h = layer.forward_eval(&h);
            }
            pyramid.push(h.clone());
        }
        Ok(pyramid)
    }

    /// Backpropagate gradients arriving at each pyramid level (level 5 from
    /// the forecasting module, lower levels from decoder skip connections).
    /// Returns the gradient with respect to the input frame when requested.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        mut grad_pyramid: Vec<Option<Feature>>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Option<Feature> {
        assert_eq!(grad_pyramid.len(), 5);
        let mut g = grad_pyramid[4]
            .take()
            .expect("level-5 gradient is always present");
        for b in (0..5).rev() {
            if b < 4 {
                if let Some(extra) = grad_pyramid[b].take() {
                    g += &extra;
                }
            }
            let caches = &cache.block_caches[b];
            for (i, layer) in self.blocks[b].iter().enumerate().rev() {
                let last_layer = b == 0 && i == 0;
                match layer.backward(&caches[i], &g, grads, !last_layer || need_dx) {
                    Some(gx) => g = gx,
                    None => return None,
                }
            }
            if b > 0 {
                g = maxpool2_backward(&cache.pool_caches[b - 1], &g);
            }
        }
        Some(g)
    }

    /// Per-layer batch-norm statistics of one training pass, in visit order.
    pub fn bn_stats<'a>(cache: &'a EncoderCache, out: &mut Vec<(&'a Array1<f64>, &'a Array1<f64>)>) {
        for block in &cache.block_caches {
            for c in block {
                out.push((&c.bn.mean, &c.bn.var));
            }
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        for block in &mut self.blocks {
            for layer in block {
                f(&mut layer.bn);
            }
        }
    }
}

impl ParamVisit for Encoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        for block in &self.blocks {
            for layer in block {
                layer.visit_params(f);
            }
        }
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        for block in &mut self.blocks {
            for layer in block {
                layer.visit_params_mut(f);
            }
        }
    }
}
