//! End-to-end FlexIO model: per-channel encoder, prompt attachment,
//! multi-channel cross-prompt module, reference-channel conditional TSE,
//! and complex-mask decoding.

use indexmap::IndexMap;
use ndarray::{Array2, Array3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autograd::{Arr, Graph, Var};
use crate::comm::{
    cross_channel_attention, init_cross_channel_attention, init_tac, tac, CommMechanism, CommSpec,
};
use crate::error::{FlexioError, Result};
use crate::layers::{
    ensure_block_spec, global_layer_norm, init_global_layer_norm, init_locoformer_block,
    locoformer_block, BlockSpec,
};
use crate::params::{Bind, ParamInit, ParamSet};
use crate::stft::{stft, ComplexSpec, StftConfig, Waveform};

const EPS: f64 = 1e-5;

/// All architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension D.
    pub dim: usize,
    /// Attention heads H in the TF-locoformer blocks.
    pub heads: usize,
    /// Per-head dimension D_att.
    pub head_dim: usize,
    /// TAC hidden dimension E.
    pub tac_hidden: usize,
    pub cross_prompt_blocks: usize,
    pub tse_blocks: usize,
    pub comm: CommMechanism,
    /// Defaults so run configs can carry the transform in a separate section.
    #[serde(default)]
    pub stft: StftConfig,
    /// Reference channel index.
    pub ref_channel: usize,
    /// Soft cap on the number of prompt vectors.
    pub max_prompts: usize,
    pub ffn_expansion: usize,
    pub norm_groups: usize,
    pub conv_kernel: usize,
    /// Skip ConvSwiGLU before MHSA in cross-prompt blocks (medium config).
    pub omit_cross_prompt_pre_ffn: bool,
    /// Cross-channel attention head count / per-head dimension.
    pub ca_heads: usize,
    pub ca_head_dim: usize,
}

impl ModelConfig {
    pub fn medium(comm: CommMechanism) -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            head_dim: 16,
            tac_hidden: 128,
            cross_prompt_blocks: 2,
            tse_blocks: 4,
            comm,
            stft: StftConfig::default(),
            ref_channel: 0,
            max_prompts: 5,
            ffn_expansion: 4,
            norm_groups: 4,
            conv_kernel: 4,
            omit_cross_prompt_pre_ffn: true,
            ca_heads: 4,
            ca_head_dim: 16,
        }
    }

    pub fn large(comm: CommMechanism) -> Self {
        ModelConfig {
            dim: 96,
            omit_cross_prompt_pre_ffn: false,
            ..Self::medium(comm)
        }
    }

    /// Desk-scale configuration for tests and CPU experiments.
    pub fn toy(comm: CommMechanism) -> Self {
        ModelConfig {
            dim: 16,
            heads: 1,
            head_dim: 4,
            tac_hidden: 16,
            cross_prompt_blocks: 1,
            tse_blocks: 1,
            ffn_expansion: 2,
            ca_heads: 2,
            ca_head_dim: 4,
            ..Self::medium(comm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.cross_prompt_blocks < 1 || self.tse_blocks < 1 {
            return Err(FlexioError::ConfigError("block counts must be >= 1".into()));
        }
        if self.dim % self.norm_groups != 0 {
            return Err(FlexioError::ConfigError(format!(
                "dim {} not divisible by norm_groups {}",
                self.dim, self.norm_groups
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(FlexioError::ConfigError("head_dim must be even for RoPE".into()));
        }
        if self.max_prompts < 1 {
            return Err(FlexioError::ConfigError("max_prompts must be >= 1".into()));
        }
        Ok(())
    }

    fn cross_prompt_spec(&self) -> BlockSpec {
        BlockSpec {
            dim: self.dim,
            heads: self.heads,
            head_dim: self.head_dim,
            conv_kernel: self.conv_kernel,
            ffn_expansion: self.ffn_expansion,
            norm_groups: self.norm_groups,
            eps: EPS,
            omit_pre_mhsa_ffn: self.omit_cross_prompt_pre_ffn,
            co_attention: self.comm == CommMechanism::CoAttention,
        }
    }

    fn tse_spec(&self) -> BlockSpec {
        BlockSpec {
            omit_pre_mhsa_ffn: false,
            co_attention: false,
            ..self.cross_prompt_spec()
        }
    }

    fn comm_spec(&self) -> CommSpec {
        CommSpec {
            dim: self.dim,
            tac_hidden: self.tac_hidden,
            att_heads: self.ca_heads,
            att_head_dim: self.ca_head_dim,
            norm_groups: self.norm_groups,
            eps: EPS,
        }
    }
}

/// Per-speaker estimates at the reference channel.
pub struct SeparationResult {
    /// [N, L] waveforms.
    pub waveforms: Array2<f64>,
    /// [N, T, F] complex masks.
    pub masks: Array3<Complex64>,
}

/// Model = config + named parameters. Parameter shapes never depend on the
/// number of microphones or prompts.
#[derive(Clone, Debug)]
pub struct FlexioModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl FlexioModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure_block_spec(&config.cross_prompt_spec());
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit::new(&mut params, &mut rng);
        let d = config.dim;

        init.fan_in("prompt", &[d], d);
        init.fan_in("encoder.conv.w", &[d, 2, 3, 3], 2 * 9);
        init.fan_in("encoder.conv.b", &[d], 2 * 9);
        init_global_layer_norm(&mut init, "encoder.norm", d);

        let cp_spec = config.cross_prompt_spec();
        for i in 0..config.cross_prompt_blocks {
            init_locoformer_block(&mut init, &format!("cross_prompt.{i}"), &cp_spec);
            match config.comm {
                CommMechanism::Tac => init_tac(&mut init, &format!("comm.{i}"), &config.comm_spec()),
                CommMechanism::CrossChannelAttention => {
                    init_cross_channel_attention(&mut init, &format!("comm.{i}"), &config.comm_spec())
                }
                CommMechanism::CoAttention | CommMechanism::None => {}
            }
        }
        let tse_spec = config.tse_spec();
        for i in 0..config.tse_blocks {
            init_locoformer_block(&mut init, &format!("tse.{i}"), &tse_spec);
        }
        init.fan_in("decoder.conv.w", &[2, d, 3, 3], d * 9);
        init.fan_in("decoder.conv.b", &[2], d * 9);

        Ok(FlexioModel { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter counts grouped by top-level module name.
    pub fn param_breakdown(&self) -> IndexMap<String, usize> {
        let mut out: IndexMap<String, usize> = IndexMap::new();
        for (name, t) in &self.params.tensors {
            let head = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(head).or_insert(0) += t.len();
        }
        out
    }

    // ----- pipeline stages (graph-level) -----

    /// Encode each channel of the mixture spectrogram into a [D, T, F] map.
    pub fn encode(&self, g: &mut Graph, bind: &Bind, mix: &ComplexSpec) -> Vec<Var> {
        let (t, f) = (mix.frames(), mix.bins());
        let w = bind.var("encoder.conv.w");
        let b = bind.var("encoder.conv.b");
        (0..mix.channels())
            .map(|m| {
                let mut input = Arr::zeros(IxDyn(&[1, 2, t, f]));
                for ti in 0..t {
                    for fi in 0..f {
                        let v = mix.values[[m, ti, fi]];
                        input[[0, 0, ti, fi]] = v.re;
                        input[[0, 1, ti, fi]] = v.im;
                    }
                }
                let x = g.constant(input);
                let y = g.conv2d(x, w, b);
                let y = g.reshape(y, &[self.config.dim, t, f]);
                global_layer_norm(g, bind, "encoder.norm", y, EPS)
            })
            .collect()
    }

    /// Prepend `n` copies of the shared prompt vector along the time axis.
    pub fn attach_prompts(&self, g: &mut Graph, bind: &Bind, z: Var, n: usize) -> Result<Var> {
        if n < 1 {
            return Err(FlexioError::InvalidInput("need at least one prompt".into()));
        }
        let shape = g.value(z).shape().to_vec();
        let (d, f) = (shape[0], shape[2]);
        let p = bind.var("prompt");
        let p3 = g.reshape(p, &[d, 1, 1]);
        let frame = g.broadcast_to(p3, &[d, 1, f]);
        let mut parts = vec![frame; n];
        parts.push(z);
        Ok(g.concat(&parts, 1))
    }

    /// Run the cross-prompt blocks with the configured channel communication.
    pub fn cross_prompt_forward(&self, g: &mut Graph, bind: &Bind, mut xs: Vec<Var>) -> Vec<Var> {
        let spec = self.config.cross_prompt_spec();
        for i in 0..self.config.cross_prompt_blocks {
            xs = locoformer_block(g, bind, &format!("cross_prompt.{i}"), xs, &spec);
            xs = match self.config.comm {
                CommMechanism::Tac => tac(g, bind, &format!("comm.{i}"), &xs, &self.config.comm_spec()),
                CommMechanism::CrossChannelAttention => {
                    cross_channel_attention(g, bind, &format!("comm.{i}"), &xs, &self.config.comm_spec())
                }
                CommMechanism::CoAttention | CommMechanism::None => xs,
            };
        }
        xs
    }

    /// Split a prompted map into per-prompt states and the mixture state.
    pub fn split_prompts(&self, g: &mut Graph, x: Var, n: usize) -> (Vec<Var>, Var) {
        let t_total = g.value(x).shape()[1];
        let prompts = (0..n).map(|i| g.slice(x, 1, i, i + 1)).collect();
        let mixture = g.slice(x, 1, n, t_total);
        (prompts, mixture)
    }

    /// Gate the mixture state with each prompt state and refine per speaker.
    pub fn conditional_tse(
        &self,
        g: &mut Graph,
        bind: &Bind,
        prompts: &[Var],
        mixture: Var,
    ) -> Vec<Var> {
        let spec = self.config.tse_spec();
        prompts
            .iter()
            .map(|&p| {
                let mut z = g.mul_bc(mixture, p);
                for i in 0..self.config.tse_blocks {
                    z = locoformer_block(g, bind, &format!("tse.{i}"), vec![z], &spec)[0];
                }
                z
            })
            .collect()
    }

    /// Decode one speaker feature map into a complex mask and masked waveform.
    /// Returns (waveform, mask_re, mask_im).
    pub fn decode_one(
        &self,
        g: &mut Graph,
        bind: &Bind,
        feat: Var,
        mix_ref: (Var, Var),
        out_len: usize,
    ) -> (Var, Var, Var) {
        let shape = g.value(feat).shape().to_vec();
        let (d, t, f) = (shape[0], shape[1], shape[2]);
        let x = g.reshape(feat, &[1, d, t, f]);
        let w = bind.var("decoder.conv.w");
        let b = bind.var("decoder.conv.b");
        let y = g.conv2d(x, w, b);
        let y = g.reshape(y, &[2, t, f]);
        let mask_re = g.slice(y, 0, 0, 1);
        let mask_re = g.reshape(mask_re, &[t, f]);
        let mask_im = g.slice(y, 0, 1, 2);
        let mask_im = g.reshape(mask_im, &[t, f]);
        let (x_re, x_im) = mix_ref;
        // (a + bi)(c + di) with unbounded complex mask values.
        let rr = g.mul(mask_re, x_re);
        let ii = g.mul(mask_im, x_im);
        let est_re = g.sub(rr, ii);
        let ri = g.mul(mask_re, x_im);
        let ir = g.mul(mask_im, x_re);
        let est_im = g.add(ri, ir);
        let wave = g.istft(est_re, est_im, self.config.stft, out_len);
        (wave, mask_re, mask_im)
    }

    /// Full pipeline on an existing graph; returns per-speaker
    /// (waveform, mask_re, mask_im) vars.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Bind,
        w: &Waveform,
        n: usize,
    ) -> Result<Vec<(Var, Var, Var)>> {
        let m = w.channels();
        if self.config.ref_channel >= m {
            return Err(FlexioError::ConfigError(format!(
                "reference channel {} out of range for {} channels",
                self.config.ref_channel, m
            )));
        }
        if n < 1 {
            return Err(FlexioError::InvalidInput("need at least one prompt".into()));
        }
        if n > self.config.max_prompts {
            return Err(FlexioError::InvalidInput(format!(
                "{n} prompts exceed max_prompts {}",
                self.config.max_prompts
            )));
        }
        let mix = stft(w, &self.config.stft)?;
        let encoded = self.encode(g, bind, &mix);
        let prompted = encoded
            .into_iter()
            .map(|z| self.attach_prompts(g, bind, z, n))
            .collect::<Result<Vec<_>>>()?;
        let processed = self.cross_prompt_forward(g, bind, prompted);
        let (prompt_states, mixture_state) =
            self.split_prompts(g, processed[self.config.ref_channel], n);
        let feats = self.conditional_tse(g, bind, &prompt_states, mixture_state);

        let (t, f) = (mix.frames(), mix.bins());
        let mut re = Arr::zeros(IxDyn(&[t, f]));
        let mut im = Arr::zeros(IxDyn(&[t, f]));
        for ti in 0..t {
            for fi in 0..f {
                let v = mix.values[[self.config.ref_channel, ti, fi]];
                re[[ti, fi]] = v.re;
                im[[ti, fi]] = v.im;
            }
        }
        let x_re = g.constant(re);
        let x_im = g.constant(im);
        Ok(feats
            .into_iter()
            .map(|feat| self.decode_one(g, bind, feat, (x_re, x_im), w.len()))
            .collect())
    }

    /// Inference entry point: waveform in, per-speaker waveforms and masks out.
    pub fn separate(&self, w: &Waveform, n: usize) -> Result<SeparationResult> {
        let mut g = Graph::inference();
        let bind = Bind::new(&mut g, &self.params);
        let outputs = self.forward(&mut g, &bind, w, n)?;
        let len = w.len();
        let t = self.config.stft.frames_for(len);
        let f = self.config.stft.bins();
        let mut waveforms = Array2::<f64>::zeros((n, len));
        let mut masks = Array3::<Complex64>::zeros((n, t, f));
        for (si, (wave, m_re, m_im)) in outputs.into_iter().enumerate() {
            let wv = g.value(wave);
            for i in 0..len {
                waveforms[[si, i]] = wv[[i]];
            }
            let (rv, iv) = (g.value(m_re), g.value(m_im));
            for ti in 0..t {
                for fi in 0..f {
                    masks[[si, ti, fi]] = Complex64::new(rv[[ti, fi]], iv[[ti, fi]]);
                }
            }
        }
        Ok(SeparationResult { waveforms, masks })
    }
}
