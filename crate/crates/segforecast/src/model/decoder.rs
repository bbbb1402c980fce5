//! Decoder symmetric to the encoder. The bottom stage fuses the temporal
//! features with the level-5 skip at 1/16 resolution; each following stage
//! upsamples 2x with a transpose convolution, concatenates the skip feature
//! of matching resolution from the latest input frame's pyramid, and applies
//! the mirrored convolution blocks. A final 1x1 convolution produces the
//! output channels at full resolution.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;

use super::encoder::{CbrCache, ConvBnRelu, Pyramid};
use super::layers::{BatchNorm, Conv2d, ConvTranspose2d, Feature};
use super::params::{Gradients, ParamKind, ParamVisit};
use crate::error::{Error, Result};

struct Stage {
    /// Absent on the bottom stage (level 5), which starts at 1/16 resolution.
    upconv: Option<ConvTranspose2d>,
    convs: Vec<ConvBnRelu>,
}

pub struct Decoder {
    /// Stages from level 5 (bottom) up to level 1 (full resolution).
    stages: Vec<Stage>,
    classifier: Conv2d,
}

pub struct StageCache {
    upconv_in: Option<Feature>,
    conv_caches: Vec<CbrCache>,
    skip_channels: usize,
}

pub struct DecoderCache {
    stages: Vec<StageCache>,
    classifier_in: Feature,
}

impl Decoder {
    pub fn init(
        path: &str,
        channels: &[usize],
        repeats: &[usize],
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(channels.len(), 5);
        let mut stages = Vec::with_capacity(5);
        // Stage index s walks levels 5,4,3,2,1 (channel indices 4..=0).
        for s in 0..5 {
            let level = 4 - s;
            let c = channels[level];
            let upconv = (s > 0).then(|| {
                ConvTranspose2d::init(
                    format!("{path}.stage{level}.upconv"),
                    channels[level + 1],
                    c,
                    rng,
                )
            });
            let r = repeats[level];
            let mut convs = Vec::with_capacity(r);
            for i in 0..r {
                convs.push(ConvBnRelu::init(
                    &format!("{path}.stage{level}.layer{i}"),
                    if i == 0 { 2 * c } else { c },
                    c,
                    rng,
                ));
            }
            stages.push(Stage { upconv, convs });
        }
        let classifier = Conv2d::init(
            format!("{path}.classifier"),
            channels[0],
            out_channels,
            1,
            0,
            rng,
        );
        Decoder { stages, classifier }
    }

    fn check_skip(stage_level: usize, h: &Feature, skip: &Feature) -> Result<()> {
        if (h.dim().1, h.dim().2) != (skip.dim().1, skip.dim().2) {
            return Err(Error::Shape(format!(
                "decoder stage {stage_level}: skip resolution {}x{} does not match stage resolution {}x{}",
                skip.dim().1,
                skip.dim().2,
                h.dim().1,
                h.dim().2,
            )));
        }
        Ok(())
    }

    pub fn forward_train(
        &self,
        fused: Feature,
        pyramid: &Pyramid,
    ) -> Result<(Feature, DecoderCache)> {
        let mut h = fused;
        let mut stage_caches = Vec::with_capacity(5);
        for (s, stage) in self.stages.iter().enumerate() {
            let level = 4 - s;
            let mut upconv_in = None;
            if let Some(up) = &stage.upconv {
                upconv_in = Some(h.clone());
                h = up.forward(&h);
            }
            let skip = &pyramid[level];
            Self::check_skip(level + 1, &h, skip)?;
            let mut x = ndarray::concatenate(Axis(0), &[h.view(), skip.view()]).unwrap();
            let mut conv_caches = Vec::with_capacity(stage.convs.len());
            for conv in &stage.convs {
                let (y, c) = conv.forward_train(x);
                conv_caches.push(c);
                x = y;
            }
            stage_caches.push(StageCache {
                upconv_in,
                conv_caches,
                skip_channels: skip.dim().0,
            });
            h = x;
        }
        let logits = self.classifier.forward(&h);
        Ok((
            logits,
            DecoderCache {
                stages: stage_caches,
                classifier_in: h,
            },
        ))
    }

    pub fn forward_eval(&self, fused: Feature, pyramid: &Pyramid) -> Result<Feature> {
        let mut h = fused;
        for (s, stage) in self.stages.iter().enumerate() {
            let level = 4 - s;
            if let Some(up) = &stage.upconv {
                h = up.forward(&h);
            }
            let skip = &pyramid[level];
            Self::check_skip(level + 1, &h, skip)?;
            let mut x = ndarray::concatenate(Axis(0), &[h.view(), skip.view()]).unwrap();
            for conv in &stage.convs {
                x = conv.forward_eval(&x);
            }
            h = x;
        }
        Ok(self.classifier.forward(&h))
    }

    /// Returns the gradient for the fused temporal features and one gradient
    /// per pyramid level of the skip-providing frame.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        g_logits: &Feature,
        grads: &mut Gradients,
    ) -> (Feature, Vec<Feature>) {
        let mut g = self
            .classifier
            .backward(&cache.classifier_in, g_logits, grads, true)
            .unwrap();
        let mut g_skips: Vec<Option<Feature>> = (0..5).map(|_| None).collect();
        for (s, stage) in self.stages.iter().enumerate().rev() {
            let level = 4 - s;
            let sc = &cache.stages[s];
            for (i, conv) in stage.convs.iter().enumerate().rev() {
                g = conv.backward(&sc.conv_caches[i], &g, grads, true).unwrap();
            }
            // Split the concat gradient into the upsampled half and the skip half.
            let c_up = g.dim().0 - sc.skip_channels;
            let g_up = g.slice(ndarray::s![..c_up, .., ..]).to_owned();
            let g_skip = g.slice(ndarray::s![c_up.., .., ..]).to_owned();
            g_skips[level] = Some(g_skip);
            g = match (&stage.upconv, &sc.upconv_in) {
                (Some(up), Some(xin)) => up.backward(xin, &g_up, grads),
                _ => g_up,
            };
        }
        (g, g_skips.into_iter().map(|g| g.unwrap()).collect())
    }

    pub fn bn_stats<'a>(
        cache: &'a DecoderCache,
        out: &mut Vec<(&'a Array1<f64>, &'a Array1<f64>)>,
    ) {
        for stage in &cache.stages {
            for c in &stage.conv_caches {
                out.push((&c.bn.mean, &c.bn.var));
            }
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        for stage in &mut self.stages {
            for conv in &mut stage.convs {
                f(&mut conv.bn);
            }
        }
    }
}

impl ParamVisit for Decoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        for stage in &self.stages {
            if let Some(up) = &stage.upconv {
                up.visit_params(f);
            }
            for conv in &stage.convs {
                conv.visit_params(f);
            }
        }
        self.classifier.visit_params(f);
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        for stage in &mut self.stages {
            if let Some(up) = &mut stage.upconv {
                up.visit_params_mut(f);
            }
            for conv in &mut stage.convs {
                conv.visit_params_mut(f);
            }
        }
        self.classifier.visit_params_mut(f);
    }
}
