//! Conditional-VAE action-chunking transformer.
//!
//! Each camera image goes through its own three-layer stride-2 CNN; the
//! resulting feature map cells become tokens. A linear projection of the
//! state vector and a projection of the style latent `z` add one token each.
//! A transformer encoder mixes the tokens and a decoder with `k` learned
//! queries reads out the action chunk. During training a separate style
//! encoder infers `z` from the demonstrated chunk.

mod layers;
mod params;

pub use layers::sinusoidal_table;
pub use params::{Binder, ParamSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{seeded, streams};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use layers::*;

pub const LOGVAR_LIMIT: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad model input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub chunk_size: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// `[height, width]` of every camera image.
    pub image_size: [usize; 2],
    pub cameras: usize,
    /// Output channels of the first two conv layers; the third emits `embed_dim`.
    pub cnn_channels: [usize; 2],
    pub style_layers: usize,
    pub kl_weight: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for the given input and output sizes.
    pub fn desk(state_dim: usize, action_dim: usize, cameras: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            chunk_size: 16,
            latent_dim: 8,
            embed_dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 128,
            image_size: [32, 32],
            cameras,
            cnn_channels: [8, 16],
            style_layers: 1,
            kl_weight: 10.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("chunk_size", self.chunk_size),
            ("latent_dim", self.latent_dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("image height", self.image_size[0]),
            ("image width", self.image_size[1]),
            ("cameras", self.cameras),
            ("cnn_channels[0]", self.cnn_channels[0]),
            ("cnn_channels[1]", self.cnn_channels[1]),
            ("style_layers", self.style_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(ModelError::Config("kl_weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Spatial size after the three stride-2 convolutions.
    pub fn feature_map(&self) -> [usize; 2] {
        let down = |n: usize| (n - 1) / 2 + 1;
        self.image_size.map(|n| down(down(down(n))))
    }

    pub fn tokens_per_camera(&self) -> usize {
        let [h, w] = self.feature_map();
        h * w
    }

    /// Encoder sequence length: visual tokens, state token, latent token.
    pub fn token_count(&self) -> usize {
        self.cameras * self.tokens_per_camera() + 2
    }

    fn image_len(&self) -> usize {
        self.image_size[0] * self.image_size[1] * 3
    }
}

/// Model weights with the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ActParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// `k × action_dim` predicted targets; row `i` is for offset `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon_l1: f64,
    pub kl: f64,
}

/// One observation: an HWC u8 image per selected camera plus the state vector.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub images: &'a [&'a [u8]],
    pub state: &'a [f64],
}

pub fn init_model(config: &ModelConfig) -> Result<ActParams, ModelError> {
    config.validate()?;
    let mut rng = seeded(config.seed, streams::INIT);
    let mut init = |shape: &[usize], fan_in: usize, fan_out: usize| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    };
    let c = config;
    let (d, f) = (c.embed_dim, c.ffn_dim);
    let mut p = ParamSet::new();

    let chans = [3, c.cnn_channels[0], c.cnn_channels[1], d];
    for cam in 0..c.cameras {
        for l in 0..3 {
            let (ci, co) = (chans[l], chans[l + 1]);
            p.insert(format!("cam{cam}.conv{l}.w"), init(&[co, ci, 3, 3], ci * 9, co * 9));
            p.insert(format!("cam{cam}.conv{l}.b"), Tensor::zeros(&[co]));
        }
    }
    add_linear(&mut p, "state_proj", c.state_dim, d, &mut init);
    add_linear(&mut p, "latent_proj", c.latent_dim, d, &mut init);
    for l in 0..c.enc_layers {
        add_encoder_layer(&mut p, &format!("enc{l}"), d, f, &mut init);
    }
    add_norm(&mut p, "enc_norm", d);
    p.insert("queries", init(&[c.chunk_size, d], c.chunk_size, d));
    for l in 0..c.dec_layers {
        add_decoder_layer(&mut p, &format!("dec{l}"), d, f, &mut init);
    }
    add_norm(&mut p, "dec_norm", d);
    add_linear(&mut p, "head", d, c.action_dim, &mut init);

    p.insert("style.cls", init(&[1, d], 1, d));
    add_linear(&mut p, "style.action_proj", c.action_dim, d, &mut init);
    add_linear(&mut p, "style.state_proj", c.state_dim, d, &mut init);
    for l in 0..c.style_layers {
        add_encoder_layer(&mut p, &format!("style.enc{l}"), d, f, &mut init);
    }
    add_norm(&mut p, "style.norm", d);
    add_linear(&mut p, "style.latent", d, 2 * c.latent_dim, &mut init);

    Ok(ActParams {
        config: config.clone(),
        params: p,
    })
}

/// Stacks HWC u8 frames into a `[B, 3, H, W]` tensor scaled to `[0, 1]`.
pub fn images_tensor(frames: &[&[u8]], height: usize, width: usize) -> Result<Tensor, ModelError> {
    let plane = height * width;
    let mut data = vec![0.0; frames.len() * 3 * plane];
    for (b, f) in frames.iter().enumerate() {
        if f.len() != plane * 3 {
            return Err(ModelError::Input(format!(
                "image has {} bytes, expected {height}x{width}x3",
                f.len()
            )));
        }
        let dst = &mut data[b * 3 * plane..(b + 1) * 3 * plane];
        for (i, px) in f.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                dst[ch * plane + i] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![frames.len(), 3, height, width], data)?)
}

type R<T> = Result<T, ModelError>;

impl ActParams {
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Visual tokens `[B, cameras·tokens_per_camera, d]` from per-camera
    /// image batches `[B, 3, H, W]`.
    pub fn build_visual(&self, g: &mut Graph, b: &mut Binder, images: &[Var]) -> R<Var> {
        let c = &self.config;
        if images.len() != c.cameras {
            return Err(ModelError::Input(format!(
                "{} camera inputs for a {}-camera model",
                images.len(),
                c.cameras
            )));
        }
        let mut per_cam = Vec::with_capacity(images.len());
        for (cam, &x) in images.iter().enumerate() {
            let s = g.shape(x).to_vec();
            if s.len() != 4 || s[1] != 3 || [s[2], s[3]] != c.image_size {
                return Err(ModelError::Input(format!(
                    "camera {cam} batch has shape {s:?}, expected [B, 3, {}, {}]",
                    c.image_size[0], c.image_size[1]
                )));
            }
            let mut h = x;
            for l in 0..3 {
                let w = b.get(g, &format!("cam{cam}.conv{l}.w"));
                let bias = b.get(g, &format!("cam{cam}.conv{l}.b"));
                h = g.conv2d(h, w, bias, 2, 1)?;
                if l < 2 {
                    h = g.relu(h)?;
                }
            }
            let t = c.tokens_per_camera();
            let h = g.reshape(h, &[s[0], c.embed_dim, t])?;
            per_cam.push(g.permute(h, &[0, 2, 1])?);
        }
        Ok(g.concat(&per_cam, 1)?)
    }

    /// Style posterior `(mu, logvar)`, each `[B, latent_dim]`, from the first
    /// state `[B, state_dim]` and an action sequence `[B, T, action_dim]`.
    pub fn build_style(&self, g: &mut Graph, b: &mut Binder, state: Var, actions: Var) -> R<(Var, Var)> {
        let c = &self.config;
        let sa = g.shape(actions).to_vec();
        let ss = g.shape(state).to_vec();
        if sa.len() != 3 || sa[2] != c.action_dim || ss != [sa[0], c.state_dim] {
            return Err(ModelError::Input(format!(
                "style encoder got state {ss:?} and actions {sa:?}"
            )));
        }
        let (bsz, t, d) = (sa[0], sa[1], c.embed_dim);
        let zeros = g.constant(Tensor::zeros(&[bsz, 1, d]));
        let cls = b.get(g, "style.cls");
        let cls = g.add(zeros, cls)?;
        let st = linear(g, b, "style.state_proj", state)?;
        let st = g.reshape(st, &[bsz, 1, d])?;
        let at = linear(g, b, "style.action_proj", actions)?;
        let seq = g.concat(&[cls, st, at], 1)?;
        let pe = g.constant(sinusoidal_table(t + 2, d));
        let mut x = g.add(seq, pe)?;
        for l in 0..c.style_layers {
            x = encoder_layer(g, b, &format!("style.enc{l}"), c.heads, x)?;
        }
        let x = g.slice(x, 1, 0, 1)?;
        let x = g.reshape(x, &[bsz, d])?;
        let x = norm(g, b, "style.norm", x)?;
        let out = linear(g, b, "style.latent", x)?;
        let mu = g.slice(out, 1, 0, c.latent_dim)?;
        let lv = g.slice(out, 1, c.latent_dim, 2 * c.latent_dim)?;
        let lv = g.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT)?;
        Ok((mu, lv))
    }

    /// Predicted chunk `[B, k, action_dim]`.
    pub fn build_decoder(&self, g: &mut Graph, b: &mut Binder, images: &[Var], state: Var, z: Var) -> R<Var> {
        let c = &self.config;
        let d = c.embed_dim;
        let vis = self.build_visual(g, b, images)?;
        let bsz = g.shape(vis)[0];
        if g.shape(state) != [bsz, c.state_dim] || g.shape(z) != [bsz, c.latent_dim] {
            return Err(ModelError::Input(format!(
                "state {:?} / latent {:?} do not match batch {bsz} (state_dim {}, latent_dim {})",
                g.shape(state),
                g.shape(z),
                c.state_dim,
                c.latent_dim
            )));
        }
        let st = linear(g, b, "state_proj", state)?;
        let st = g.reshape(st, &[bsz, 1, d])?;
        let zt = linear(g, b, "latent_proj", z)?;
        let zt = g.reshape(zt, &[bsz, 1, d])?;
        let seq = g.concat(&[vis, st, zt], 1)?;
        let pe = g.constant(sinusoidal_table(c.token_count(), d));
        let mut x = g.add(seq, pe)?;
        for l in 0..c.enc_layers {
            x = encoder_layer(g, b, &format!("enc{l}"), c.heads, x)?;
        }
        let memory = norm(g, b, "enc_norm", x)?;

        let zeros = g.constant(Tensor::zeros(&[bsz, c.chunk_size, d]));
        let q = b.get(g, "queries");
        let mut y = g.add(zeros, q)?;
        for l in 0..c.dec_layers {
            y = decoder_layer(g, b, &format!("dec{l}"), c.heads, y, memory)?;
        }
        let y = norm(g, b, "dec_norm", y)?;
        linear(g, b, "head", y).map_err(Into::into)
    }

    /// `(total, recon_l1, kl)` with `total = recon_l1 + β·kl`.
    pub fn build_loss(g: &mut Graph, pred: Var, target: Var, mu: Var, logvar: Var, beta: f64) -> R<(Var, Var, Var)> {
        let recon = g.l1_loss(pred, target)?;
        let kl = g.gaussian_kl(mu, logvar)?;
        let weighted = g.scale(kl, beta)?;
        let total = g.add(recon, weighted)?;
        Ok((total, recon, kl))
    }

    fn check_observation(&self, obs: &Observation<'_>) -> R<()> {
        let c = &self.config;
        if obs.images.len() != c.cameras {
            return Err(ModelError::Input(format!(
                "{} images for a {}-camera model",
                obs.images.len(),
                c.cameras
            )));
        }
        if let Some(img) = obs.images.iter().find(|i| i.len() != c.image_len()) {
            return Err(ModelError::Input(format!(
                "image has {} bytes, expected {}",
                img.len(),
                c.image_len()
            )));
        }
        if obs.state.len() != c.state_dim {
            return Err(ModelError::Input(format!(
                "state has {} values, expected {}",
                obs.state.len(),
                c.state_dim
            )));
        }
        Ok(())
    }
}

/// Visual tokens `[cameras·tokens_per_camera, d]` for one set of images.
pub fn visual_tokenize(params: &ActParams, images: &[&[u8]]) -> Result<Tensor, ModelError> {
    let c = &params.config;
    if images.len() != c.cameras {
        return Err(ModelError::Input(format!(
            "{} images for a {}-camera model",
            images.len(),
            c.cameras
        )));
    }
    let mut g = Graph::no_grad();
    let mut b = Binder::new(&params.params);
    let mut vars = Vec::new();
    for img in images {
        vars.push(g.constant(images_tensor(&[img], c.image_size[0], c.image_size[1])?));
    }
    let v = params.build_visual(&mut g, &mut b, &vars)?;
    let s = g.shape(v).to_vec();
    Ok(g.value(v).clone().reshaped(&s[1..])?)
}

/// Style posterior from a `T × state_dim` state matrix (only the first row
/// conditions the encoder) and a `T × action_dim` action matrix.
pub fn encode_style(params: &ActParams, states: &Tensor, actions: &Tensor) -> Result<LatentPosterior, ModelError> {
    let c = &params.config;
    let (ss, sa) = (states.shape(), actions.shape());
    if ss.len() != 2 || sa.len() != 2 || ss[0] == 0 || sa[0] == 0 || ss[1] != c.state_dim || sa[1] != c.action_dim {
        return Err(ModelError::Input(format!("states {ss:?}, actions {sa:?}")));
    }
    let mut g = Graph::no_grad();
    let mut b = Binder::new(&params.params);
    let first = Tensor::new(vec![1, c.state_dim], states.data()[..c.state_dim].to_vec())?;
    let s = g.constant(first);
    let a = g.constant(actions.clone().reshaped(&[1, sa[0], sa[1]])?);
    let (mu, lv) = params.build_style(&mut g, &mut b, s, a)?;
    Ok(LatentPosterior {
        mu: g.value(mu).data().to_vec(),
        logvar: g.value(lv).data().to_vec(),
    })
}

/// Deterministic chunk prediction for one observation and latent.
pub fn forward(params: &ActParams, obs: &Observation<'_>, z: &[f64]) -> Result<ActionChunk, ModelError> {
    let c = &params.config;
    params.check_observation(obs)?;
    if z.len() != c.latent_dim {
        return Err(ModelError::Input(format!("z has {} values, expected {}", z.len(), c.latent_dim)));
    }
    let mut g = Graph::no_grad();
    let mut b = Binder::new(&params.params);
    let mut imgs = Vec::with_capacity(c.cameras);
    for img in obs.images {
        imgs.push(g.constant(images_tensor(&[img], c.image_size[0], c.image_size[1])?));
    }
    let s = g.constant(Tensor::new(vec![1, c.state_dim], obs.state.to_vec())?);
    let zv = g.constant(Tensor::new(vec![1, c.latent_dim], z.to_vec())?);
    let out = params.build_decoder(&mut g, &mut b, &imgs, s, zv)?;
    Ok(ActionChunk {
        rows: c.chunk_size,
        cols: c.action_dim,
        data: g.value(out).data().to_vec(),
    })
}

/// ACT objective for one predicted chunk.
pub fn loss(pred: &ActionChunk, target: &ActionChunk, post: &LatentPosterior, beta: f64) -> Result<LossTerms, ModelError> {
    if (pred.rows, pred.cols) != (target.rows, target.cols) || pred.data.len() != target.data.len() {
        return Err(ModelError::Input(format!(
            "prediction {}x{} vs target {}x{}",
            pred.rows, pred.cols, target.rows, target.cols
        )));
    }
    if post.mu.len() != post.logvar.len() || post.mu.is_empty() {
        return Err(ModelError::Input("posterior mu/logvar lengths differ".into()));
    }
    let mut g = Graph::no_grad();
    let p = g.constant(Tensor::new(vec![pred.rows, pred.cols], pred.data.clone())?);
    let t = g.constant(Tensor::new(vec![target.rows, target.cols], target.data.clone())?);
    let mu = g.constant(Tensor::from_vec(post.mu.clone()));
    let lv = g.constant(Tensor::from_vec(post.logvar.clone()));
    let (total, recon, kl) = ActParams::build_loss(&mut g, p, t, mu, lv, beta)?;
    Ok(LossTerms {
        total: g.value(total).item(),
        recon_l1: g.value(recon).item(),
        kl: g.value(kl).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            state_dim: 3,
            action_dim: 2,
            chunk_size: 4,
            latent_dim: 2,
            embed_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 32,
            image_size: [8, 8],
            cameras: 2,
            cnn_channels: [4, 8],
            style_layers: 1,
            kl_weight: 10.0,
            seed: 3,
        }
    }

    #[test]
    fn token_arithmetic() {
        let c = ModelConfig::desk(4, 4, 2);
        assert_eq!(c.tokens_per_camera(), 16);
        assert_eq!(c.token_count(), 34);
        assert_eq!(micro().tokens_per_camera(), 1);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_model(&micro()).unwrap();
        assert_eq!(a, init_model(&micro()).unwrap());
        let b = init_model(&ModelConfig { seed: 4, ..micro() }).unwrap();
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(init_model(&ModelConfig { heads: 3, ..micro() }).is_err());
        assert!(init_model(&ModelConfig { chunk_size: 0, ..micro() }).is_err());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let p = init_model(&micro()).unwrap();
        let img = vec![100u8; 8 * 8 * 3];
        let imgs = [img.as_slice(), img.as_slice()];
        let obs = Observation {
            images: &imgs,
            state: &[0.1, -0.2, 0.3],
        };
        let a = forward(&p, &obs, &[0.0, 0.0]).unwrap();
        assert_eq!((a.rows, a.cols, a.data.len()), (4, 2, 8));
        assert_eq!(a, forward(&p, &obs, &[0.0, 0.0]).unwrap());
        assert!(forward(&p, &obs, &[0.0]).is_err());
    }

    #[test]
    fn loss_identities() {
        let c = ActionChunk {
            rows: 1,
            cols: 2,
            data: vec![1.0, 2.0],
        };
        let zero = LatentPosterior {
            mu: vec![0.0],
            logvar: vec![0.0],
        };
        assert_eq!(loss(&c, &c, &zero, 10.0).unwrap().total, 0.0);
        let one = LatentPosterior {
            mu: vec![1.0],
            logvar: vec![0.0],
        };
        assert_eq!(loss(&c, &c, &one, 1.0).unwrap().kl, 0.5);
        let other = ActionChunk {
            data: vec![0.0, 0.0],
            ..c.clone()
        };
        let t = loss(&other, &c, &one, 0.0).unwrap();
        assert_eq!(t.total, t.recon_l1);
    }
}
