//! The assembled encoder-decoder model over pluggable visual features:
//! input projection, static-expansion encoder stack, dynamic-expansion
//! decoder stack, token embedding with sinusoidal positions, and the
//! vocabulary classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{DecoderLayer, DecoderLayerState, EncoderLayer};
use crate::error::{Error, Result};
use crate::expansion::BackwardNormScope;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tape, Tensor, Var};

/// All architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_m: usize,
    pub d_ff: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Dynamic expansion factor per decoder layer.
    pub dyn_n_e: usize,
    /// Block static expansion group of target lengths.
    pub groups: Vec<usize>,
    pub heads: usize,
    pub vocab_size: usize,
    /// Maximum total caption length including BOS and EOS.
    pub max_caption_len: usize,
    /// Width of the incoming visual features.
    pub feature_dim: usize,
    #[serde(default = "default_eps")]
    pub expansion_eps: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub backward_norm: BackwardNormScope,
}

fn default_eps() -> f64 {
    1e-6
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Full-scale configuration: d_m 512, d_ff 2048, three layers each
    /// way, dynamic factor 16, group {32, 64, 128, 256, 512}, 8 heads.
    pub fn paper() -> Self {
        ModelConfig {
            d_m: 512,
            d_ff: 2048,
            n_enc: 3,
            n_dec: 3,
            dyn_n_e: 16,
            groups: vec![32, 64, 128, 256, 512],
            heads: 8,
            vocab_size: 10000,
            max_caption_len: 22,
            feature_dim: 1536,
            expansion_eps: 1e-6,
            ln_eps: 1e-5,
            backward_norm: BackwardNormScope::PerGroup,
        }
    }

    /// Desk-scale configuration that trains in seconds on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            d_m: 32,
            d_ff: 64,
            n_enc: 2,
            n_dec: 2,
            dyn_n_e: 4,
            groups: vec![4, 8, 16],
            heads: 2,
            vocab_size: 64,
            max_caption_len: 22,
            feature_dim: 12,
            expansion_eps: 1e-6,
            ln_eps: 1e-5,
            backward_norm: BackwardNormScope::PerGroup,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.d_ff == 0 || self.n_enc == 0 || self.n_dec == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.heads == 0 || self.d_m % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide model width {}",
                self.heads, self.d_m
            )));
        }
        if self.groups.is_empty() || self.groups.iter().any(|&g| g == 0) {
            return Err(Error::Config("expansion group lengths must all be >= 1".into()));
        }
        if self.dyn_n_e == 0 {
            return Err(Error::Config("dynamic expansion factor must be >= 1".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocabulary must hold the four reserved ids and a word".into()));
        }
        if self.max_caption_len < 3 {
            return Err(Error::Config("maximum caption length must fit BOS, a token and EOS".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature width must be >= 1".into()));
        }
        Ok(())
    }

    /// Closed-form count of learned scalars; must match the registry.
    pub fn param_count(&self) -> usize {
        let enc = crate::blocks::EncoderLayer::param_count(self.d_m, self.d_ff, &self.groups);
        let dec = crate::blocks::DecoderLayer::param_count(self.d_m, self.d_ff, self.dyn_n_e);
        self.feature_dim * self.d_m
            + self.n_enc * enc
            + self.n_dec * dec
            + self.vocab_size * self.d_m
            + self.d_m * self.vocab_size
            + self.vocab_size
    }
}

// ── Visual features ─────────────────────────────────────────────────────────

/// One image's backbone output: N position rows of width d_b, stored as
/// f32 (the wire and cache precision for features).
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub id: String,
    pub n: usize,
    pub d_b: usize,
    pub data: Vec<f32>,
}

impl VisualFeatures {
    pub fn new(id: String, n: usize, d_b: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("features need at least one position".into()));
        }
        if data.len() != n * d_b {
            return Err(Error::Shape(format!(
                "feature buffer holds {} values, expected {}x{}",
                data.len(),
                n,
                d_b
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("features for {id:?} contain non-finite values")));
        }
        Ok(VisualFeatures { id, n, d_b, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.n, self.d_b], data).expect("validated dims")
    }
}

/// A small RGB raster with channel values in [0, 1], row-major H×W×3.
#[derive(Debug, Clone)]
pub struct ToyImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ToyImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::Shape(format!(
                "image buffer holds {} values, expected {h}x{w}x3",
                data.len()
            )));
        }
        Ok(ToyImage { h, w, data })
    }

    pub fn pixel(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.w + j) * 3 + c]
    }
}

/// Deterministic stand-in for a real visual backbone.
///
/// The image is cut into (H/P)·(W/P) patches of P×P pixels. Each patch
/// yields a feature of width d_b = 3P: for every pixel row r inside the
/// patch, the per-channel mean over the patch's P columns, laid out as
/// [r0·R, r0·G, r0·B, r1·R, …]. Means are computed in f64 and cast to
/// f32, so cached and recomputed features are bit-identical.
pub fn toy_backbone(id: &str, image: &ToyImage, patch: usize) -> Result<VisualFeatures> {
    if patch == 0 || image.h % patch != 0 || image.w % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} must divide image {}x{}",
            image.h, image.w
        )));
    }
    let rows = image.h / patch;
    let cols = image.w / patch;
    let d_b = 3 * patch;
    let mut data = Vec::with_capacity(rows * cols * d_b);
    for pi in 0..rows {
        for pj in 0..cols {
            for r in 0..patch {
                for c in 0..3 {
                    let mut sum = 0.0;
                    for j in 0..patch {
                        sum += image.pixel(pi * patch + r, pj * patch + j, c);
                    }
                    data.push((sum / patch as f64) as f32);
                }
            }
        }
    }
    VisualFeatures::new(id.to_string(), rows * cols, d_b, data)
}

// ── Model ───────────────────────────────────────────────────────────────────

/// Encoder output rows, ready for decoding.
#[derive(Debug, Clone)]
pub struct EncOut {
    pub rows: Vec<Vec<f64>>,
}

impl EncOut {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.rows).expect("rectangular rows")
    }
}

/// Per-sequence incremental decoding state: one expansion/attention state
/// per decoder layer plus the number of tokens consumed so far.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    layers: Vec<DecoderLayerState>,
    consumed: usize,
}

impl DecodeCache {
    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    input_proj: ParamId,
    embed: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
    pos: Tensor,
}

/// Parameter-name prefix of the backbone-side projection; the frozen
/// training stages freeze exactly this prefix.
pub const BACKBONE_PREFIX: &str = "backbone_proj";

fn sinusoidal_positions(max_len: usize, d_m: usize) -> Tensor {
    let mut t = Tensor::zeros(max_len, d_m);
    for p in 0..max_len {
        for i in 0..d_m {
            let exponent = 2.0 * (i / 2) as f64 / d_m as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            t.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl Model {
    /// Builds a model with all weights drawn from one seeded generator in
    /// registration order, so a (config, seed) pair pins every value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let scale = 1.0 / (config.d_m as f64).sqrt();

        let input_proj = store.register(
            &format!("{BACKBONE_PREFIX}.w"),
            Tensor::uniform(config.feature_dim, config.d_m, scale, &mut rng),
        )?;
        let mut enc_layers = Vec::with_capacity(config.n_enc);
        for i in 0..config.n_enc {
            enc_layers.push(EncoderLayer::new(
                &mut store,
                &format!("enc.{i}"),
                config.d_m,
                config.d_ff,
                &config.groups,
                config.expansion_eps,
                config.ln_eps,
                config.backward_norm,
                &mut rng,
            )?);
        }
        let mut dec_layers = Vec::with_capacity(config.n_dec);
        for i in 0..config.n_dec {
            dec_layers.push(DecoderLayer::new(
                &mut store,
                &format!("dec.{i}"),
                config.d_m,
                config.d_ff,
                config.dyn_n_e,
                config.heads,
                config.expansion_eps,
                config.ln_eps,
                &mut rng,
            )?);
        }
        let embed = store.register(
            "embed.table",
            Tensor::uniform(config.vocab_size, config.d_m, scale, &mut rng),
        )?;
        let cls_w = store.register(
            "classifier.w",
            Tensor::uniform(config.d_m, config.vocab_size, scale, &mut rng),
        )?;
        let cls_b = store.register("classifier.b", Tensor::zeros(1, config.vocab_size))?;

        let pos = sinusoidal_positions(config.max_caption_len, config.d_m);
        Ok(Model { config, store, input_proj, embed, cls_w, cls_b, enc_layers, dec_layers, pos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Learned linear map from backbone width to model width.
    pub fn input_projection(&self, tape: &mut Tape, features: &VisualFeatures) -> Result<Var> {
        if features.d_b != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "features are {} wide, model expects {}",
                features.d_b, self.config.feature_dim
            )));
        }
        let x = tape.constant(&features.to_tensor());
        let w = tape.param(&self.store, self.input_proj);
        tape.matmul(x, w)
    }

    /// Full encoder stack on one image's features.
    pub fn encode(&self, tape: &mut Tape, features: &VisualFeatures) -> Result<Var> {
        let mut x = self.input_projection(tape, features)?;
        for layer in &self.enc_layers {
            x = layer.forward(&self.store, tape, x)?;
        }
        Ok(x)
    }

    /// Encoder pass on a throwaway tape, for decoding.
    pub fn encode_eval(&self, features: &VisualFeatures) -> Result<EncOut> {
        let mut tape = Tape::new();
        let out = self.encode(&mut tape, features)?;
        let t = tape.value(out);
        Ok(EncOut { rows: (0..t.rows()).map(|i| t.row(i).to_vec()).collect() })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Config("token sequence is empty".into()));
        }
        if tokens[0] != crate::data::BOS {
            return Err(Error::Config("token sequences must begin with BOS".into()));
        }
        if tokens.len() > self.config.max_caption_len {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds the maximum caption length {}",
                tokens.len(),
                self.config.max_caption_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Config(format!(
                "unknown token id {bad} for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced decoder pass: logits row t depends only on tokens
    /// 0..=t and the encoder output.
    pub fn decode_train(&self, tape: &mut Tape, tokens: &[usize], enc_out: Var) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = tape.param(&self.store, self.embed);
        let emb = tape.embed(table, tokens)?;
        let scaled = tape.scale(emb, (self.config.d_m as f64).sqrt());
        let pos_rows = Tensor::from_rows(
            &(0..tokens.len()).map(|p| self.pos.row(p).to_vec()).collect::<Vec<_>>(),
        )?;
        let posc = tape.constant(&pos_rows);
        let mut y = tape.add(scaled, posc)?;
        for layer in &self.dec_layers {
            y = layer.forward(&self.store, tape, y, enc_out, true)?;
        }
        let w = tape.param(&self.store, self.cls_w);
        let b = tape.param(&self.store, self.cls_b);
        let logits = tape.matmul(y, w)?;
        tape.add(logits, b)
    }

    /// Starts an incremental decoding cache for one sequence.
    pub fn begin_decode(&self, enc: &EncOut) -> DecodeCache {
        DecodeCache {
            layers: self.dec_layers.iter().map(|l| l.begin(&self.store, &enc.rows)).collect(),
            consumed: 0,
        }
    }

    /// Next-token logits after `prefix`.
    ///
    /// Without a cache this recomputes the whole prefix through
    /// [`Self::decode_train`] and returns the last row. With a cache it
    /// feeds only the unseen suffix through the incremental row path; the
    /// two routes agree to the last bit.
    pub fn decode_step(
        &self,
        prefix: &[usize],
        enc: &EncOut,
        cache: Option<&mut DecodeCache>,
    ) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        match cache {
            None => {
                let mut tape = Tape::new();
                let enc_t = enc.to_tensor();
                let enc_v = tape.constant(&enc_t);
                let logits = self.decode_train(&mut tape, prefix, enc_v)?;
                let (rows, cols) = tape.shape(logits);
                Ok(tape.data(logits)[(rows - 1) * cols..].to_vec())
            }
            Some(cache) => {
                if cache.consumed > prefix.len() {
                    return Err(Error::Config(format!(
                        "decode cache already consumed {} tokens, prefix has {}",
                        cache.consumed,
                        prefix.len()
                    )));
                }
                if cache.consumed == prefix.len() {
                    return Err(Error::Config("decode cache is already past this prefix".into()));
                }
                let mut last = Vec::new();
                for t in cache.consumed..prefix.len() {
                    last = self.step_token(cache, prefix[t], t)?;
                }
                Ok(last)
            }
        }
    }

    fn step_token(&self, cache: &mut DecodeCache, token: usize, position: usize) -> Result<Vec<f64>> {
        if position >= self.config.max_caption_len {
            return Err(Error::Config(format!(
                "position {position} exceeds the maximum caption length {}",
                self.config.max_caption_len
            )));
        }
        let d = self.config.d_m;
        let table = self.store.get(self.embed);
        let scale = (d as f64).sqrt();
        let mut row: Vec<f64> = (0..d)
            .map(|z| table.get(token, z) * scale + self.pos.get(position, z))
            .collect();
        for (layer, state) in self.dec_layers.iter().zip(&mut cache.layers) {
            row = layer.step_row(&self.store, state, &row);
        }
        cache.consumed += 1;
        let v = self.config.vocab_size;
        let mut logits = vec![0.0; v];
        tensor::vec_mat(&row, self.store.get(self.cls_w).data(), v, &mut logits);
        let b = self.store.get(self.cls_b).data();
        for (j, l) in logits.iter_mut().enumerate() {
            *l += b[j];
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BOS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_m: 4,
            d_ff: 8,
            n_enc: 1,
            n_dec: 1,
            dyn_n_e: 2,
            groups: vec![2, 3],
            heads: 2,
            vocab_size: 11,
            max_caption_len: 10,
            feature_dim: 6,
            expansion_eps: 1e-6,
            ln_eps: 1e-5,
            backward_norm: BackwardNormScope::PerGroup,
        }
    }

    fn random_features(n: usize, d_b: usize, seed: u64) -> VisualFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d_b).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        VisualFeatures::new("img".into(), n, d_b, data).unwrap()
    }

    #[test]
    fn paper_preset_roundtrips_through_serialization() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.d_m, 512);
        assert_eq!(cfg.d_ff, 2048);
        assert_eq!(cfg.n_enc, 3);
        assert_eq!(cfg.n_dec, 3);
        assert_eq!(cfg.dyn_n_e, 16);
        assert_eq!(cfg.groups, vec![32, 64, 128, 256, 512]);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn input_projection_identity_and_zero() {
        let mut cfg = tiny_config();
        cfg.feature_dim = cfg.d_m;
        let mut model = Model::new(cfg, 1).unwrap();
        let eye: Vec<f64> = Tensor::eye(4).data().to_vec();
        model.store.get_mut(model.input_proj).data_mut().copy_from_slice(&eye);
        let feats = random_features(3, 4, 2);
        let mut tape = Tape::new();
        let out = model.input_projection(&mut tape, &feats).unwrap();
        let want = feats.to_tensor();
        for (a, b) in tape.data(out).iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for v in model.store.get_mut(model.input_proj).data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let out = model.input_projection(&mut tape, &feats).unwrap();
        assert!(tape.data(out).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_projection_rejects_width_mismatch() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let feats = random_features(3, 5, 3);
        let mut tape = Tape::new();
        assert!(model.input_projection(&mut tape, &feats).is_err());
    }

    #[test]
    fn toy_backbone_uniform_gray_gives_identical_rows() {
        let img = ToyImage::new(4, 4, vec![0.5; 4 * 4 * 3]).unwrap();
        let f = toy_backbone("gray", &img, 2).unwrap();
        assert_eq!(f.n, 4);
        assert_eq!(f.d_b, 6);
        for row in 1..f.n {
            assert_eq!(&f.data[row * 6..(row + 1) * 6], &f.data[0..6]);
        }
    }

    #[test]
    fn toy_backbone_single_patch() {
        let img = ToyImage::new(3, 3, vec![0.25; 27]).unwrap();
        let f = toy_backbone("one", &img, 3).unwrap();
        assert_eq!(f.n, 1);
        assert_eq!(f.d_b, 9);
    }

    #[test]
    fn toy_backbone_rejects_bad_patch() {
        let img = ToyImage::new(4, 4, vec![0.0; 48]).unwrap();
        assert!(toy_backbone("bad", &img, 3).is_err());
        assert!(toy_backbone("bad", &img, 0).is_err());
    }

    #[test]
    fn toy_backbone_hand_pooled_means() {
        // 4×4 image, patch 2. Red channel = row index, green = column
        // index, blue = 0. Patch (0,1), pixel row 0 → R mean 0, G mean
        // (2+3)/2 = 2.5.
        let mut data = vec![0.0; 48];
        for i in 0..4 {
            for j in 0..4 {
                data[(i * 4 + j) * 3] = i as f64;
                data[(i * 4 + j) * 3 + 1] = j as f64;
            }
        }
        let img = ToyImage::new(4, 4, data).unwrap();
        let f = toy_backbone("hand", &img, 2).unwrap();
        // Patch order: (0,0), (0,1), (1,0), (1,1); row layout [R,G,B]×2.
        let patch01 = &f.data[6..12];
        assert_eq!(patch01, &[0.0, 2.5, 0.0, 1.0, 2.5, 0.0]);
        let patch10 = &f.data[12..18];
        assert_eq!(patch10, &[2.0, 0.5, 0.0, 3.0, 0.5, 0.0]);
    }

    #[test]
    fn encode_restores_width_and_position_count() {
        let model = Model::new(tiny_config(), 4).unwrap();
        let feats = random_features(5, 6, 5);
        let mut tape = Tape::new();
        let out = model.encode(&mut tape, &feats).unwrap();
        assert_eq!(tape.shape(out), (5, 4));
    }

    #[test]
    fn decode_train_shapes_and_token_validation() {
        let model = Model::new(tiny_config(), 6).unwrap();
        let feats = random_features(3, 6, 7);
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &feats).unwrap();
        let logits = model.decode_train(&mut tape, &[BOS, 5, 6, 7], enc).unwrap();
        assert_eq!(tape.shape(logits), (4, 11));

        assert!(model.decode_train(&mut tape, &[5, 6], enc).is_err(), "missing BOS");
        assert!(model.decode_train(&mut tape, &[BOS, 11], enc).is_err(), "id out of range");
        assert!(model.decode_train(&mut tape, &[], enc).is_err(), "empty");
    }

    #[test]
    fn decode_train_is_causal_in_token_edits() {
        let model = Model::new(tiny_config(), 8).unwrap();
        let feats = random_features(3, 6, 9);
        let run = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, &feats).unwrap();
            let logits = model.decode_train(&mut tape, tokens, enc).unwrap();
            tape.value(logits)
        };
        let a = run(&[BOS, 5, 6, 7]);
        let b = run(&[BOS, 5, 6, 9]);
        for t in 0..3 {
            for v in 0..11 {
                assert_eq!(a.get(t, v).to_bits(), b.get(t, v).to_bits(), "row {t}");
            }
        }
    }

    #[test]
    fn decode_step_prefix_bos_equals_first_train_row() {
        let model = Model::new(tiny_config(), 10).unwrap();
        let feats = random_features(3, 6, 11);
        let enc = model.encode_eval(&feats).unwrap();
        let step = model.decode_step(&[BOS], &enc, None).unwrap();

        let mut tape = Tape::new();
        let enc_v = tape.constant(&enc.to_tensor());
        let logits = model.decode_train(&mut tape, &[BOS], enc_v).unwrap();
        for (a, b) in step.iter().zip(tape.data(logits)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn decode_step_cached_matches_uncached() {
        let model = Model::new(tiny_config(), 12).unwrap();
        let feats = random_features(4, 6, 13);
        let enc = model.encode_eval(&feats).unwrap();
        let mut cache = model.begin_decode(&enc);
        let mut prefix = vec![BOS];
        for next in [4usize, 8, 5, 9] {
            let cached = model.decode_step(&prefix, &enc, Some(&mut cache)).unwrap();
            let uncached = model.decode_step(&prefix, &enc, None).unwrap();
            for (a, b) in cached.iter().zip(&uncached) {
                assert!((a - b).abs() <= 1e-12, "cached {a} vs uncached {b}");
            }
            prefix.push(next);
        }
    }

    #[test]
    fn decode_step_consistent_after_appending_argmax() {
        let model = Model::new(tiny_config(), 14).unwrap();
        let feats = random_features(4, 6, 15);
        let enc = model.encode_eval(&feats).unwrap();
        let first = model.decode_step(&[BOS], &enc, None).unwrap();
        let argmax = first
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let second = model.decode_step(&[BOS, argmax], &enc, None).unwrap();

        let mut tape = Tape::new();
        let enc_v = tape.constant(&enc.to_tensor());
        let logits = model.decode_train(&mut tape, &[BOS, argmax], enc_v).unwrap();
        let last = &tape.data(logits)[11..22];
        for (a, b) in second.iter().zip(last) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn parameter_count_formula_matches_registry() {
        for (cfg, seed) in [(tiny_config(), 20u64), (ModelConfig::desk(), 21)] {
            let model = Model::new(cfg.clone(), seed).unwrap();
            assert_eq!(cfg.param_count(), model.store.total_scalars(), "config {cfg:?}");
        }
    }

    #[test]
    fn tiny_model_end_to_end_gradient_check() {
        let mut model = Model::new(tiny_config(), 22).unwrap();
        let feats = random_features(3, 6, 23);
        let tokens = [BOS, 5, 6, 2];
        let Model { store, enc_layers, dec_layers, pos, .. } = &mut model;
        let (enc_layers, dec_layers, pos) = (&*enc_layers, &*dec_layers, &*pos);
        let report = crate::params::grad_check(
            store,
            |s| {
                // Rebuild the graph against the same layer structure but
                // the possibly perturbed parameters in `s`.
                let mut tape = Tape::new();
                let x = tape.constant(&feats.to_tensor());
                let w = tape.param(s, s.find("backbone_proj.w").unwrap());
                let mut enc = tape.matmul(x, w)?;
                for layer in enc_layers {
                    enc = layer.forward(s, &mut tape, enc)?;
                }
                let table = tape.param(s, s.find("embed.table").unwrap());
                let emb = tape.embed(table, &tokens)?;
                let scaled = tape.scale(emb, 2.0);
                let pos_rows = Tensor::from_rows(
                    &(0..tokens.len()).map(|p| pos.row(p).to_vec()).collect::<Vec<_>>(),
                )
                .unwrap();
                let posc = tape.constant(&pos_rows);
                let mut y = tape.add(scaled, posc)?;
                for layer in dec_layers {
                    y = layer.forward(s, &mut tape, y, enc, true)?;
                }
                let wc = tape.param(s, s.find("classifier.w").unwrap());
                let bc = tape.param(s, s.find("classifier.b").unwrap());
                let raw = tape.matmul(y, wc)?;
                let logits = tape.add(raw, bc)?;
                let lp = tape.log_softmax_rows(logits);
                let picked = tape.gather_cols(lp, &[5, 6, 2, 2])?;
                let total = tape.sum_all(picked);
                let loss = tape.scale(total, -1.0);
                Ok((tape, loss))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err());
    }
}
