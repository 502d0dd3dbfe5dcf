use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::{adam_step, checkpoint, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::screen::{PixelGrid, SIDE};
use crate::surrogate::SpectralResponse;

use super::config::{
    Channel, Direction, Family, InputMode, ModelConfig, IMAGE_POOL, SPECTRUM_POOL, SUPPLEMENT_POOL,
};
use super::layers::{Block, Builder, Conv, Dense, GruLayer, LstmLayer, SeqBody};
use super::params::{Init, ParamStore};
use super::{decode_output, spectrum_features, SPECTRUM_FEATURES};

/// Screens plus optional supplementary-band spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardBatch {
    /// `[B, 1, 25, 25]` images or `[B, 25, 25]` token bit vectors.
    pub pattern: Tensor,
    /// `[B, L, 4]` features of the supplementary band.
    pub supplement: Option<Tensor>,
}

/// Band spectra for inverse design; the targets travel separately.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseBatch {
    /// `[B, L, 4]`
    pub spectrum: Tensor,
}

/// Spectra of one band used to predict the other.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBatch {
    /// `[B, L, 4]`
    pub spectrum: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Forward(ForwardBatch),
    Inverse(InverseBatch),
    Spectral(SpectralBatch),
}

/// Stacks band-sliced responses into `[B, L, 4]`.
pub(crate) fn spectra_tensor(spectra: &[&SpectralResponse]) -> Result<Tensor> {
    let len = spectra
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::domain("empty batch"))?;
    let mut data = Vec::with_capacity(spectra.len() * len * SPECTRUM_FEATURES);
    for s in spectra {
        if s.len() != len {
            return Err(Error::shape("spectra_tensor", &[len], &[s.len()]));
        }
        data.extend(spectrum_features(s));
    }
    Tensor::new(vec![spectra.len(), len, SPECTRUM_FEATURES], data)
}

impl ForwardBatch {
    pub fn new(
        grids: &[&PixelGrid],
        mode: InputMode,
        supplement: Option<&[&SpectralResponse]>,
    ) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let pattern = match mode {
            InputMode::Image => {
                let data = grids.iter().flat_map(|g| g.to_f64()).collect();
                Tensor::new(vec![grids.len(), 1, SIDE, SIDE], data)?
            }
            InputMode::Tokens => {
                let data = grids
                    .iter()
                    .flat_map(|g| g.to_tokens().to_bit_vectors())
                    .collect();
                Tensor::new(vec![grids.len(), SIDE, SIDE], data)?
            }
        };
        let supplement = match supplement {
            Some(s) if s.len() != grids.len() => {
                return Err(Error::shape("forward batch", &[grids.len()], &[s.len()]));
            }
            Some(s) => Some(spectra_tensor(s)?),
            None => None,
        };
        Ok(Self {
            pattern,
            supplement,
        })
    }
}

impl InverseBatch {
    pub fn new(spectra: &[&SpectralResponse]) -> Result<Self> {
        Ok(Self {
            spectrum: spectra_tensor(spectra)?,
        })
    }
}

impl SpectralBatch {
    pub fn new(spectra: &[&SpectralResponse]) -> Result<Self> {
        Ok(Self {
            spectrum: spectra_tensor(spectra)?,
        })
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Forward(b) => b.pattern.shape()[0],
            Batch::Inverse(b) => b.spectrum.shape()[0],
            Batch::Spectral(b) => b.spectrum.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn direction(&self) -> Direction {
        match self {
            Batch::Forward(_) => Direction::Forward,
            Batch::Inverse(_) => Direction::Inverse,
            Batch::Spectral(_) => Direction::Spectral,
        }
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Cnn {
        convs: Vec<Conv>,
        dense: Dense,
        flat: usize,
        spectrum: bool,
    },
    Sequence {
        embed: Dense,
        body: SeqBody,
        /// Spectrum samples per step; `None` for token input.
        patch: Option<usize>,
    },
}

#[derive(Clone, Debug)]
struct Network {
    encoder: Encoder,
    supplement: Option<Dense>,
    fusion_main: usize,
    fusion_supp: Option<usize>,
    fusion_bias: usize,
    head: Dense,
}

fn cnn_channels(hidden: usize, layer: usize) -> usize {
    (hidden / 8).max(1) << layer
}

fn build_network(cfg: &ModelConfig, store: &mut ParamStore) -> Network {
    let mut b = Builder {
        store,
        seed: cfg.seed,
    };
    let h = cfg.hidden_size;
    let spectrum = cfg.direction != Direction::Forward;
    let encoder = match cfg.family {
        Family::Cnn => {
            let mut convs = Vec::new();
            let mut cin = if spectrum { SPECTRUM_FEATURES } else { 1 };
            let (mut rows, mut cols) = if spectrum {
                (1, cfg.band_samples)
            } else {
                (SIDE, SIDE)
            };
            for i in 0..cfg.depth {
                let cout = cnn_channels(h, i);
                let name = format!("encoder.conv{i}");
                if spectrum {
                    convs.push(Conv::new(&mut b, &name, cin, cout, (1, 5), (0, 2)));
                    cols /= SPECTRUM_POOL;
                } else {
                    convs.push(Conv::new(&mut b, &name, cin, cout, (3, 3), (1, 1)));
                    rows /= IMAGE_POOL;
                    cols /= IMAGE_POOL;
                }
                cin = cout;
            }
            let flat = cin * rows * cols;
            Encoder::Cnn {
                convs,
                dense: Dense::new(&mut b, "encoder.dense", flat, h),
                flat,
                spectrum,
            }
        }
        family => {
            let (patch, width) = if spectrum {
                (Some(cfg.patch), cfg.patch * SPECTRUM_FEATURES)
            } else {
                (None, SIDE)
            };
            let embed = Dense::new(&mut b, "encoder.embed", width, h);
            let body = match family {
                Family::Lstm => SeqBody::Lstm(
                    (0..cfg.depth)
                        .map(|i| LstmLayer::new(&mut b, &format!("encoder.lstm{i}"), h, h))
                        .collect(),
                ),
                Family::Gru => SeqBody::Gru(
                    (0..cfg.depth)
                        .map(|i| GruLayer::new(&mut b, &format!("encoder.gru{i}"), h, h))
                        .collect(),
                ),
                _ => SeqBody::Transformer(
                    (0..cfg.depth)
                        .map(|i| {
                            Block::new(&mut b, &format!("encoder.block{i}"), h, cfg.attention_heads)
                        })
                        .collect(),
                ),
            };
            Encoder::Sequence { embed, body, patch }
        }
    };
    let supplement = cfg.supplement_band.band().map(|_| {
        Dense::new(
            &mut b,
            "supplement.dense",
            cfg.band_samples / SUPPLEMENT_POOL * SPECTRUM_FEATURES,
            h,
        )
    });
    let fusion_init = Init::Glorot {
        fan_in: h,
        fan_out: h,
    };
    let fusion_main = b.param("fusion.w_main", &[h, h], fusion_init);
    let fusion_supp = supplement
        .as_ref()
        .map(|_| b.param("fusion.w_supp", &[h, h], fusion_init));
    let fusion_bias = b.param("fusion.b", &[h], Init::Constant(0.0));
    let head = Dense::new(&mut b, "head", h, cfg.output_len());
    Network {
        encoder,
        supplement,
        fusion_main,
        fusion_supp,
        fusion_bias,
        head,
    }
}

/// A network plus its trainable parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    net: Network,
}

/// Builds a freshly initialized model; initial values are a function of the config.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut params = ParamStore::default();
    let net = build_network(config, &mut params);
    Ok(Model {
        config: config.clone(),
        params,
        net,
    })
}

impl Encoder {
    fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        match self {
            Encoder::Cnn {
                convs,
                dense,
                flat,
                spectrum,
            } => {
                let mut h = if *spectrum {
                    let s = tape.shape(x).to_vec();
                    let t = tape.permute(x, &[0, 2, 1])?;
                    tape.reshape(t, &[s[0], s[2], 1, s[1]])?
                } else {
                    x
                };
                let window = if *spectrum {
                    (1, SPECTRUM_POOL)
                } else {
                    (IMAGE_POOL, IMAGE_POOL)
                };
                for conv in convs {
                    h = conv.apply(tape, p, h)?;
                    h = tape.relu(h);
                    h = tape.max_pool2d(h, window)?;
                }
                let h = tape.reshape(h, &[batch, *flat])?;
                let h = dense.apply(tape, p, h)?;
                Ok(tape.relu(h))
            }
            Encoder::Sequence { embed, body, patch } => {
                let seq = match patch {
                    Some(patch) => {
                        let s = tape.shape(x).to_vec();
                        tape.reshape(x, &[s[0], s[1] / patch, patch * s[2]])?
                    }
                    None => x,
                };
                let e = embed.apply(tape, p, seq)?;
                body.apply(tape, p, e)
            }
        }
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = &self.config;
        if batch.direction() != cfg.direction {
            return Err(Error::domain(format!(
                "{} model received a {} batch",
                cfg.direction,
                batch.direction()
            )));
        }
        let n = batch.len();
        let spec_shape = [n, cfg.band_samples, SPECTRUM_FEATURES];
        match batch {
            Batch::Forward(fb) => {
                let want: Vec<usize> = match cfg.input_mode {
                    InputMode::Image => vec![n, 1, SIDE, SIDE],
                    InputMode::Tokens => vec![n, SIDE, SIDE],
                };
                if fb.pattern.shape() != want {
                    return Err(Error::shape("pattern input", fb.pattern.shape(), &want));
                }
                match (&fb.supplement, cfg.supplement_band.band()) {
                    (Some(s), Some(_)) if s.shape() != spec_shape => {
                        return Err(Error::shape("supplement input", s.shape(), &spec_shape));
                    }
                    (Some(_), None) => {
                        return Err(Error::domain("model takes no supplementary input"))
                    }
                    (None, Some(b)) => {
                        return Err(Error::domain(format!(
                            "model needs {b}-band supplementary input"
                        )));
                    }
                    _ => {}
                }
            }
            Batch::Inverse(InverseBatch { spectrum })
            | Batch::Spectral(SpectralBatch { spectrum }) => {
                if spectrum.shape() != spec_shape {
                    return Err(Error::shape(
                        "spectrum input",
                        spectrum.shape(),
                        &spec_shape,
                    ));
                }
            }
        }
        Ok(())
    }

    /// Records the network on `tape` with parameters `p` (from [`ParamStore::bind`])
    /// and returns the training-space output `[B, output_len]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let net = &self.net;
        let (main_input, supp_input) = match batch {
            Batch::Forward(fb) => (&fb.pattern, fb.supplement.as_ref()),
            Batch::Inverse(b) => (&b.spectrum, None),
            Batch::Spectral(b) => (&b.spectrum, None),
        };
        let x = tape.constant(main_input);
        let main = net.encoder.apply(tape, p, x)?;
        let fused = match (&net.supplement, supp_input, net.fusion_supp) {
            (Some(dense), Some(s), Some(w_supp)) => {
                let (n, l) = (s.shape()[0], s.shape()[1]);
                let sx = tape.constant(s);
                let sx = tape.reshape(
                    sx,
                    &[n, l / SUPPLEMENT_POOL, SUPPLEMENT_POOL, SPECTRUM_FEATURES],
                )?;
                let sx = tape.mean(sx, 2)?;
                let sx = tape.reshape(sx, &[n, l / SUPPLEMENT_POOL * SPECTRUM_FEATURES])?;
                let sh = dense.apply(tape, p, sx)?;
                let sh = tape.relu(sh);
                let joined = tape.concat(&[main, sh], 1)?;
                let w = tape.concat(&[p[net.fusion_main], p[w_supp]], 0)?;
                tape.matmul(joined, w)?
            }
            _ => tape.matmul(main, p[net.fusion_main])?,
        };
        let fused = tape.add(fused, p[net.fusion_bias])?;
        let fused = tape.tanh(fused);
        let out = net.head.apply(tape, p, fused)?;
        Ok(match self.config.direction {
            Direction::Inverse => tape.sigmoid(out),
            _ => out,
        })
    }

    /// Training-space output without recording gradients.
    pub fn predict_raw(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, batch)?;
        Ok(tape.tensor(out))
    }

    /// Predictions in reporting units: amplitudes, wrapped phase, or pixel
    /// probabilities, shape `[B, band_samples]` or `[B, 625]`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let raw = self.predict_raw(batch)?;
        if self.config.direction == Direction::Inverse
            || self.config.target.channel != Channel::Phase
        {
            return Ok(raw);
        }
        let (n, w) = (raw.shape()[0], raw.shape()[1]);
        let data = raw
            .data()
            .chunks(w)
            .flat_map(|row| decode_output(row, Channel::Phase))
            .collect();
        Tensor::new(vec![n, w / 2], data)
    }

    /// One optimizer step on `batch` against training-space `target`; returns the batch loss.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        target: &Tensor,
        states: &mut [AdamState],
        adam: &AdamConfig,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let out = self.forward(&mut tape, &p, batch)?;
        let t = tape.constant(target);
        let loss = tape.mse_loss(out, t)?;
        let value = tape.value(loss)[0];
        let mut grads = tape.backward(loss)?;
        for (tensor, var) in self.params.tensors_mut().iter_mut().zip(&p) {
            let g = grads
                .take(*var)
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            tensor.set_grad(g)?;
        }
        adam_step(self.params.tensors_mut(), states, adam)?;
        Ok(value)
    }

    pub fn optimizer_states(&self) -> Vec<AdamState> {
        self.params
            .tensors()
            .iter()
            .map(AdamState::for_tensor)
            .collect()
    }

    /// Sets the output bias so the untrained network starts near `mean`
    /// (per output, in training space).
    pub fn init_output_bias(&mut self, mean: &[f64]) -> Result<()> {
        let idx = self.net.head.bias_index();
        let inverse = self.config.direction == Direction::Inverse;
        let bias = &mut self.params.tensors_mut()[idx];
        if mean.len() != bias.numel() {
            return Err(Error::shape(
                "init_output_bias",
                bias.shape(),
                &[mean.len()],
            ));
        }
        for (b, &m) in bias.data_mut().iter_mut().zip(mean) {
            *b = if inverse {
                let q = m.clamp(0.01, 0.99);
                (q / (1.0 - q)).ln()
            } else {
                m
            };
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Format {
            what: "model config",
            detail: e.to_string(),
        })?;
        let named: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        checkpoint::write(w, &config, &named)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let ck = checkpoint::read(r)?;
        let config: ModelConfig = serde_json::from_str(&ck.config).map_err(|e| Error::Format {
            what: "checkpoint",
            detail: format!("config block: {e}"),
        })?;
        let mut model = build_model(&config)?;
        model.params.load(ck.params)?;
        Ok(model)
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SupplementBand, Target};
    use crate::screen::random_pattern;
    use crate::surrogate::{simulate, Band, FrequencyGrid, OracleConfig};

    fn small(mut cfg: ModelConfig) -> ModelConfig {
        cfg.hidden_size = 8;
        cfg.depth = 1;
        cfg.attention_heads = 2;
        cfg.band_samples = 64;
        cfg.patch = 16;
        cfg
    }

    fn spectra(n: usize, samples: usize) -> Vec<SpectralResponse> {
        let freq = FrequencyGrid::new(samples, 2.0 / samples as f64, 2.0).unwrap();
        (0..n)
            .map(|i| {
                simulate(
                    &random_pattern(i as u64, 0.5).unwrap(),
                    &freq,
                    &OracleConfig::default(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn cnn_forward_shape_contract() {
        let model = build_model(&ModelConfig::default()).unwrap();
        let grids: Vec<PixelGrid> = (0..3).map(|s| random_pattern(s, 0.4).unwrap()).collect();
        let refs: Vec<&PixelGrid> = grids.iter().collect();
        let batch = Batch::Forward(ForwardBatch::new(&refs, InputMode::Image, None).unwrap());
        let out = model.predict(&batch).unwrap();
        assert_eq!(out.shape(), &[3, 512]);
    }

    #[test]
    fn transformer_inverse_outputs_probabilities() {
        let cfg = small(ModelConfig::inverse(Family::Transformer, Band::High));
        let model = build_model(&cfg).unwrap();
        let sp = spectra(2, 128);
        let refs: Vec<&SpectralResponse> = sp.iter().collect();
        let sliced: Vec<SpectralResponse> = refs.iter().map(|s| s.slice(64..128)).collect();
        let sref: Vec<&SpectralResponse> = sliced.iter().collect();
        let out = model
            .predict(&Batch::Inverse(InverseBatch::new(&sref).unwrap()))
            .unwrap();
        assert_eq!(out.shape(), &[2, 625]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn direction_mismatch_is_rejected() {
        let model = build_model(&small(ModelConfig::inverse(Family::Cnn, Band::Low))).unwrap();
        let g = PixelGrid::zeros();
        let batch = Batch::Forward(ForwardBatch::new(&[&g], InputMode::Image, None).unwrap());
        assert!(matches!(model.predict(&batch), Err(Error::Domain(_))));
    }

    #[test]
    fn supplement_only_adds_parameters() {
        let base_cfg = small(ModelConfig::forward(
            Family::Gru,
            Target {
                channel: Channel::AmpX,
                band: Band::Low,
            },
        ));
        let mut aug_cfg = base_cfg.clone();
        aug_cfg.supplement_band = SupplementBand::High;
        let base = build_model(&base_cfg).unwrap();
        let aug = build_model(&aug_cfg).unwrap();
        for (name, t) in base.params().iter() {
            assert_eq!(aug.params().get(name), Some(t), "{name}");
        }
        let extra: Vec<&str> = aug
            .params()
            .names()
            .iter()
            .map(String::as_str)
            .filter(|n| base.params().get(n).is_none())
            .collect();
        assert!(
            extra
                .iter()
                .all(|n| n.starts_with("supplement.") || *n == "fusion.w_supp"),
            "{extra:?}"
        );
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = small(ModelConfig::forward(
            Family::Lstm,
            Target {
                channel: Channel::Phase,
                band: Band::High,
            },
        ));
        let model = build_model(&cfg).unwrap();
        let grids: Vec<PixelGrid> = (0..4).map(|s| random_pattern(s, 0.5).unwrap()).collect();
        let refs: Vec<&PixelGrid> = grids.iter().collect();
        let batch = Batch::Forward(ForwardBatch::new(&refs, InputMode::Tokens, None).unwrap());
        let before = model.predict(&batch).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let loaded = Model::load(buf.as_slice()).unwrap();
        assert_eq!(loaded.config(), &cfg);
        assert_eq!(loaded.predict(&batch).unwrap(), before);
        assert!(before
            .data()
            .iter()
            .all(|p| p.abs() <= std::f64::consts::PI));
    }
}
