//! Forward/backward computation graphs: the forecasting student network,
//! the single-frame teacher network, and label prediction.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod forecast;
pub mod layers;
pub mod params;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::types::SegMap;

use decoder::{Decoder, DecoderCache};
use encoder::{Encoder, EncoderCache, Pyramid};
use forecast::{ForecastCache, ForecastModule};
use layers::{BatchNorm, Feature};
use params::{Gradients, ParamKind, ParamVisit};

/// Pre-softmax network output, `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTensor(Array3<f64>);

impl LogitTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("logits contain non-finite values".into()));
        }
        Ok(LogitTensor(data))
    }

    pub fn num_classes(&self) -> usize {
        self.0.dim().0
    }
    pub fn height(&self) -> usize {
        self.0.dim().1
    }
    pub fn width(&self) -> usize {
        self.0.dim().2
    }
    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }
    pub fn into_data(self) -> Array3<f64> {
        self.0
    }
}

/// Per-pixel class probabilities, `(C, H, W)`; channels sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor(Array3<f64>);

impl ProbTensor {
    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }
}

/// Numerically stable per-pixel softmax (max-subtraction).
pub fn softmax(logits: &LogitTensor) -> Result<ProbTensor> {
    let o = logits.data();
    let (c, h, w) = o.dim();
    if o.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut p = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(o[[ci, y, x]]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (o[[ci, y, x]] - m).exp();
                p[[ci, y, x]] = e;
                z += e;
            }
            for ci in 0..c {
                p[[ci, y, x]] /= z;
            }
        }
    }
    Ok(ProbTensor(p))
}

/// Per-pixel argmax; ties resolve to the lowest class index.
pub fn predict_labels(p: &ProbTensor) -> SegMap {
    let (c, h, w) = p.0.dim();
    let mut labels = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = p.0[[0, y, x]];
            let mut arg = 0u8;
            for ci in 1..c {
                let v = p.0[[ci, y, x]];
                if v > best {
                    best = v;
                    arg = ci as u8;
                }
            }
            labels[[y, x]] = arg;
        }
    }
    SegMap::new(labels, c).expect("argmax labels are valid by construction")
}

fn check_frame_inputs(inputs: &[Feature], expected: usize, in_channels: usize) -> Result<()> {
    if inputs.len() != expected {
        return Err(Error::Shape(format!(
            "expected {expected} input frames, got {}",
            inputs.len()
        )));
    }
    let dims = inputs[0].dim();
    for (i, f) in inputs.iter().enumerate() {
        if f.dim() != dims {
            return Err(Error::Shape(format!(
                "input frame {i} has shape {:?}, expected {dims:?}",
                f.dim()
            )));
        }
    }
    if dims.0 != in_channels {
        return Err(Error::Shape(format!(
            "input frames have {} channels, model expects {in_channels}",
            dims.0
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Student network
// ---------------------------------------------------------------------------

/// The forecasting network: per-frame encoder pathways (weights shared by
/// default), the temporal fusion module, and the skip-connected decoder fed
/// by the latest frame's pyramid.
pub struct Student {
    encoders: Vec<Encoder>,
    forecast: ForecastModule,
    decoder: Decoder,
    pub config: ModelConfig,
    pub out_channels: usize,
}

pub struct StudentCache {
    enc: Vec<EncoderCache>,
    forecast: ForecastCache,
    dec: DecoderCache,
}

impl Student {
    /// `out_channels` is the class count for segmentation or 3 for the
    /// RGB-forecasting variant used by the two-stage baseline.
    pub fn init(config: &ModelConfig, out_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let channels = config.scaled_channels()?;
        let repeats = &config.conv_repeats;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_enc = if config.shared_encoder_weights {
            1
        } else {
            config.num_input_frames
        };
        let mut encoders = Vec::with_capacity(n_enc);
        for t in 0..n_enc {
            let path = if n_enc == 1 {
                "encoder".to_string()
            } else {
                format!("encoder{t}")
            };
            encoders.push(Encoder::init(
                &path,
                config.in_channels(),
                &channels,
                repeats,
                &mut rng,
            ));
        }
        let forecast = ForecastModule::init(
            "forecast",
            channels[4],
            config.num_input_frames,
            &mut rng,
        );
        let decoder = Decoder::init("decoder", &channels, repeats, out_channels, &mut rng);
        Ok(Student {
            encoders,
            forecast,
            decoder,
            config: config.clone(),
            out_channels,
        })
    }

    fn encoder_for(&self, t: usize) -> &Encoder {
        if self.encoders.len() == 1 {
            &self.encoders[0]
        } else {
            &self.encoders[t]
        }
    }

    pub fn forward_train(&self, inputs: &[Feature]) -> Result<(LogitTensor, StudentCache)> {
        check_frame_inputs(
            inputs,
            self.config.num_input_frames,
            self.config.in_channels(),
        )?;
        let mut enc_caches = Vec::with_capacity(inputs.len());
        let mut level5 = Vec::with_capacity(inputs.len());
        let mut pyramid_last = None;
        for (t, frame) in inputs.iter().enumerate() {
            let (pyr, cache) = self.encoder_for(t).forward_train(frame)?;
            enc_caches.push(cache);
            level5.push(pyr[4].clone());
            if t + 1 == inputs.len() {
                pyramid_last = Some(pyr);
            }
        }
        let pyramid_last = pyramid_last.unwrap();
        let stack = ForecastModule::stack(&level5);
        let (fused, fc) = self.forecast.forward_train(stack)?;
        let (logits, dc) = self.decoder.forward_train(fused, &pyramid_last)?;
        Ok((
            LogitTensor::new(logits)?,
            StudentCache {
                enc: enc_caches,
                forecast: fc,
                dec: dc,
            },
        ))
    }

    pub fn forward_eval(&self, inputs: &[Feature]) -> Result<LogitTensor> {
        check_frame_inputs(
            inputs,
            self.config.num_input_frames,
            self.config.in_channels(),
        )?;
        let mut level5 = Vec::with_capacity(inputs.len());
        let mut pyramid_last = None;
        for (t, frame) in inputs.iter().enumerate() {
            let pyr = self.encoder_for(t).forward_eval(frame)?;
            level5.push(pyr[4].clone());
            if t + 1 == inputs.len() {
                pyramid_last = Some(pyr);
            }
        }
        let stack = ForecastModule::stack(&level5);
        let fused = self.forecast.forward_eval(stack)?;
        let logits = self
            .decoder
            .forward_eval(fused, &pyramid_last.unwrap())?;
        LogitTensor::new(logits)
    }

    /// Accumulates parameter gradients for one sample.
    pub fn backward(&self, cache: &StudentCache, g_logits: &Array3<f64>, grads: &mut Gradients) {
        let (g_fused, g_skips) = self.decoder.backward(&cache.dec, g_logits, grads);
        let g_stack = self.forecast.backward(&cache.forecast, &g_fused, grads);
        let t_count = cache.enc.len();
        for t in (0..t_count).rev() {
            let g5 = g_stack.index_axis(ndarray::Axis(1), t).to_owned();
            let mut grad_pyramid: Vec<Option<Feature>> = vec![None, None, None, None, Some(g5)];
            if t + 1 == t_count {
                // The latest frame also receives the decoder skip gradients.
                for (level, g_skip) in g_skips.iter().enumerate().take(4) {
                    grad_pyramid[level] = Some(g_skip.clone());
                }
                if let Some(g5) = grad_pyramid[4].as_mut() {
                    *g5 += &g_skips[4];
                }
            }
            self.encoder_for(t)
                .backward(&cache.enc[t], grad_pyramid, grads, false);
        }
    }

    /// Fold the batch-averaged batch-norm statistics into running estimates.
    pub fn apply_bn_updates(&mut self, caches: &[StudentCache]) {
        if caches.is_empty() {
            return;
        }
        let shared = self.encoders.len() == 1;
        let per_cache: Vec<Vec<(&Array1<f64>, &Array1<f64>)>> = caches
            .iter()
            .map(|c| {
                let mut v = Vec::new();
                for e in &c.enc {
                    Encoder::bn_stats(e, &mut v);
                }
                ForecastModule::bn_stats(&c.forecast, &mut v);
                Decoder::bn_stats(&c.dec, &mut v);
                v
            })
            .collect();
        let frames = caches[0].enc.len();
        let enc_layer_count = {
            let mut v = Vec::new();
            Encoder::bn_stats(&caches[0].enc[0], &mut v);
            v.len()
        };
        let update = |bn: &mut BatchNorm, positions: &[usize]| {
            let c = bn.channels();
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            let mut n = 0.0;
            for stats in &per_cache {
                for &p in positions {
                    mean += stats[p].0;
                    var += stats[p].1;
                    n += 1.0;
                }
            }
            mean /= n;
            var /= n;
            bn.update_running(&mean, &var);
        };
        let mut cursor = 0usize;
        if shared {
            let mut i = 0usize;
            self.encoders[0].visit_bn_mut(&mut |bn| {
                // One shared encoder runs T times; average over all passes.
                let positions: Vec<usize> = (0..frames).map(|t| t * enc_layer_count + i).collect();
                update(bn, &positions);
                i += 1;
            });
            cursor = frames * enc_layer_count;
        } else {
            for e in &mut self.encoders {
                e.visit_bn_mut(&mut |bn| {
                    update(bn, &[cursor]);
                    cursor += 1;
                });
            }
        }
        self.forecast.visit_bn_mut(&mut |bn| {
            update(bn, &[cursor]);
            cursor += 1;
        });
        self.decoder.visit_bn_mut(&mut |bn| {
            update(bn, &[cursor]);
            cursor += 1;
        });
    }
}

impl ParamVisit for Student {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        for e in &self.encoders {
            e.visit_params(f);
        }
        self.forecast.visit_params(f);
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        for e in &mut self.encoders {
            e.visit_params_mut(f);
        }
        self.forecast.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Teacher network
// ---------------------------------------------------------------------------

/// Single-frame segmentation network: one encoder pathway plus the decoder,
/// with skips from the same frame's pyramid and no forecasting module. Same
/// architecture family as the student, entirely disjoint parameters.
pub struct Teacher {
    encoder: Encoder,
    decoder: Decoder,
    pub config: ModelConfig,
}

pub struct TeacherCache {
    enc: EncoderCache,
    dec: DecoderCache,
}

impl Teacher {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let channels = config.scaled_channels()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(
            "encoder",
            config.in_channels(),
            &channels,
            &config.conv_repeats,
            &mut rng,
        );
        let decoder = Decoder::init(
            "decoder",
            &channels,
            &config.conv_repeats,
            config.num_classes,
            &mut rng,
        );
        Ok(Teacher {
            encoder,
            decoder,
            config: config.clone(),
        })
    }

    pub fn forward_train(&self, frame: &Feature) -> Result<(LogitTensor, TeacherCache)> {
        let (pyramid, enc) = self.encoder.forward_train(frame)?;
        let fused = pyramid[4].clone();
        let (logits, dec) = self.decoder.forward_train(fused, &pyramid)?;
        Ok((LogitTensor::new(logits)?, TeacherCache { enc, dec }))
    }

    pub fn forward_eval(&self, frame: &Feature) -> Result<LogitTensor> {
        let pyramid = self.encoder.forward_eval(frame)?;
        let fused = pyramid[4].clone();
        LogitTensor::new(self.decoder.forward_eval(fused, &pyramid)?)
    }

    pub fn backward(&self, cache: &TeacherCache, g_logits: &Array3<f64>, grads: &mut Gradients) {
        let (g_fused, g_skips) = self.decoder.backward(&cache.dec, g_logits, grads);
        let mut grad_pyramid: Vec<Option<Feature>> = g_skips.into_iter().map(Some).collect();
        if let Some(g5) = grad_pyramid[4].as_mut() {
            *g5 += &g_fused;
        }
        self.encoder
            .backward(&cache.enc, grad_pyramid, grads, false);
    }

    pub fn apply_bn_updates(&mut self, caches: &[TeacherCache]) {
        if caches.is_empty() {
            return;
        }
        let per_cache: Vec<Vec<(&Array1<f64>, &Array1<f64>)>> = caches
            .iter()
            .map(|c| {
                let mut v = Vec::new();
                Encoder::bn_stats(&c.enc, &mut v);
                Decoder::bn_stats(&c.dec, &mut v);
                v
            })
            .collect();
        let mut cursor = 0usize;
        let mut update = |bn: &mut BatchNorm| {
            let c = bn.channels();
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for stats in &per_cache {
                mean += stats[cursor].0;
                var += stats[cursor].1;
            }
            let n = per_cache.len() as f64;
            mean /= n;
            var /= n;
            bn.update_running(&mean, &var);
            cursor += 1;
        };
        self.encoder.visit_bn_mut(&mut update);
        self.decoder.visit_bn_mut(&mut update);
    }
}

impl ParamVisit for Teacher {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, f64>)) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, f64>),
    ) {
        self.encoder.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
}
