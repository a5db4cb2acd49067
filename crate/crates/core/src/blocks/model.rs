//! Token-level models assembled from Mamba blocks: an encoder with a linear
//! readout, optionally followed by a cross-attending decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::mamba::{DecoderLayer, EncoderLayer, Norm};
use crate::blocks::{BlockConfig, BlockVariant};
use crate::config::{render, KvMap};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::ssm::{ScanMode, Selection};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_in: usize,
    pub n_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub dropout_p: f64,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub encoder_variant: BlockVariant,
    /// Zero for encoder-only models.
    pub decoder_layers: usize,
    pub selection: Selection,
    pub scan: ScanMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BlockConfig::default();
        Self {
            vocab_size: 16,
            d_in: b.d_in,
            n_state: b.n_state,
            expand: b.expand,
            conv_width: b.conv_width,
            dropout_p: b.dropout_p,
            n_heads: b.n_heads,
            encoder_layers: 2,
            encoder_variant: BlockVariant::Bidirectional,
            decoder_layers: 0,
            selection: Selection::Selective,
            scan: ScanMode::default(),
        }
    }
}

impl ModelConfig {
    pub fn block(&self, variant: BlockVariant) -> BlockConfig {
        BlockConfig {
            d_in: self.d_in,
            n_state: self.n_state,
            expand: self.expand,
            conv_width: self.conv_width,
            dropout_p: self.dropout_p,
            variant,
            n_heads: self.n_heads,
            selection: self.selection,
            scan: self.scan,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.encoder_variant == BlockVariant::Decoder {
            return Err(Error::Config("encoder_variant must be unidirectional or bidirectional".into()));
        }
        self.block(self.encoder_variant).validate()?;
        if self.decoder_layers > 0 {
            self.block(BlockVariant::Decoder).validate()?;
        }
        Ok(())
    }

    pub fn to_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        let (scan, chunk) = match self.scan {
            ScanMode::Sequential => ("sequential", 0),
            ScanMode::Parallel { chunk } => ("parallel", chunk),
        };
        let mut pairs = vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_in", self.d_in.to_string()),
            ("n_state", self.n_state.to_string()),
            ("expand", self.expand.to_string()),
            ("conv_width", self.conv_width.to_string()),
            ("dropout", self.dropout_p.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("encoder_variant", self.encoder_variant.as_str().to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("selective", (self.selection == Selection::Selective).to_string()),
            ("scan", scan.to_string()),
        ];
        if chunk > 0 {
            pairs.push(("scan_chunk", chunk.to_string()));
        }
        pairs.into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
    }

    /// Reads `prefix`-qualified keys, falling back to defaults.
    pub fn from_kv(kv: &mut KvMap, prefix: &str) -> Result<Self> {
        Self::from_kv_or(kv, prefix, &Self::default())
    }

    /// Like [`Self::from_kv`], with absent keys taken from `base`.
    pub fn from_kv_or(kv: &mut KvMap, prefix: &str, base: &Self) -> Result<Self> {
        let d = base.clone();
        let key = |k: &str| format!("{prefix}{k}");
        let variant = match kv.take_string(&key("encoder_variant")) {
            Some(v) => BlockVariant::parse(&v)?,
            None => d.encoder_variant,
        };
        let selective = kv.take_or(&key("selective"), d.selection == Selection::Selective)?;
        let base_chunk = match d.scan {
            ScanMode::Parallel { chunk } => chunk,
            ScanMode::Sequential => 64,
        };
        let chunk = kv.take_or(&key("scan_chunk"), base_chunk)?;
        let scan = match kv.take_string(&key("scan")).as_deref() {
            None => match d.scan {
                ScanMode::Parallel { .. } => ScanMode::Parallel { chunk },
                ScanMode::Sequential => ScanMode::Sequential,
            },
            Some("parallel") => ScanMode::Parallel { chunk },
            Some("sequential") => ScanMode::Sequential,
            Some(other) => return Err(Error::Config(format!("unknown scan mode `{other}`"))),
        };
        let cfg = Self {
            vocab_size: kv.take_or(&key("vocab_size"), d.vocab_size)?,
            d_in: kv.take_or(&key("d_in"), d.d_in)?,
            n_state: kv.take_or(&key("n_state"), d.n_state)?,
            expand: kv.take_or(&key("expand"), d.expand)?,
            conv_width: kv.take_or(&key("conv_width"), d.conv_width)?,
            dropout_p: kv.take_or(&key("dropout"), d.dropout_p)?,
            n_heads: kv.take_or(&key("n_heads"), d.n_heads)?,
            encoder_layers: kv.take_or(&key("encoder_layers"), d.encoder_layers)?,
            encoder_variant: variant,
            decoder_layers: kv.take_or(&key("decoder_layers"), d.decoder_layers)?,
            selection: if selective { Selection::Selective } else { Selection::Fixed },
            scan,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: Norm,
}

/// Embedding → encoder layers → norm → linear head, with an optional decoder.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub decoder: Option<DecoderStack>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl SequenceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (v, d) = (config.vocab_size, config.d_in);

        let embed = store.add("embed", Tensor::randn(&[v, d], 1.0, &mut rng), false);
        let enc_cfg = config.block(config.encoder_variant);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc.{i}"), &enc_cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = Norm::new(&mut store, "enc.norm", d);

        let decoder = if config.decoder_layers > 0 {
            let dec_cfg = config.block(BlockVariant::Decoder);
            let embed = store.add("dec.embed", Tensor::randn(&[v, d], 1.0, &mut rng), false);
            let layers = (0..config.decoder_layers)
                .map(|i| DecoderLayer::new(&mut store, &format!("dec.{i}"), &dec_cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let norm = Norm::new(&mut store, "dec.norm", d);
            Some(DecoderStack { embed, layers, norm })
        } else {
            None
        };

        let bound = 1.0 / (d as f64).sqrt();
        let head_w = store.add("head.w", Tensor::uniform(&[d, v], -bound, bound, &mut rng), true);
        let head_b = store.add("head.b", Tensor::zeros(&[v]), false);
        Ok(Self {
            config,
            store,
            embed,
            encoder,
            encoder_norm,
            decoder,
            head_w,
            head_b,
        })
    }

    fn check_tokens(tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::contract(format!("{} tokens do not split into {batch} sequences", tokens.len())));
        }
        Ok(tokens.len() / batch)
    }

    /// Normalized encoder states `[B, L, D]` for `batch` equal-length sequences.
    pub fn encode(&self, tape: &mut Tape, tokens: &[usize], batch: usize) -> Result<Var> {
        let len = Self::check_tokens(tokens, batch)?;
        let table = tape.param(&self.store, self.embed);
        let mut x = tape.embedding(table, tokens, &[batch, len])?;
        for (i, layer) in self.encoder.iter().enumerate() {
            x = layer.forward(tape, &self.store, x).map_err(|e| e.in_block(i))?;
        }
        self.encoder_norm.forward(tape, &self.store, x)
    }

    fn head(&self, tape: &mut Tape, states: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        let logits = tape.matmul(states, w)?;
        tape.add_bias(logits, b)
    }

    /// Logits `[B·k, V]` read from `positions` (k per sequence) of the encoder.
    pub fn classify(&self, tape: &mut Tape, tokens: &[usize], batch: usize, positions: &[usize]) -> Result<Var> {
        let len = Self::check_tokens(tokens, batch)?;
        if positions.iter().any(|&p| p >= len) {
            return Err(Error::contract(format!("readout position outside sequence of length {len}")));
        }
        let states = self.encode(tape, tokens, batch)?;
        let rows: Vec<usize> = (0..batch)
            .flat_map(|b| positions.iter().map(move |&p| b * len + p))
            .collect();
        let picked = tape.select_rows(states, &rows)?;
        self.head(tape, picked)
    }

    /// Teacher-forced decoder logits `[B, Lt, V]`.
    pub fn seq2seq(&self, tape: &mut Tape, source: &[usize], decoder_input: &[usize], batch: usize) -> Result<Var> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::contract("model has no decoder"))?;
        let tgt_len = Self::check_tokens(decoder_input, batch)?;
        let memory = self.encode(tape, source, batch)?;
        let table = tape.param(&self.store, dec.embed);
        let mut y = tape.embedding(table, decoder_input, &[batch, tgt_len])?;
        let offset = self.encoder.len();
        for (i, layer) in dec.layers.iter().enumerate() {
            y = layer
                .forward(tape, &self.store, y, memory)
                .map_err(|e| e.in_block(offset + i))?;
        }
        let y = dec.norm.forward(tape, &self.store, y)?;
        self.head(tape, y)
    }

    pub fn header(&self) -> String {
        render(&self.config.to_pairs("model."))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let mut kv = KvMap::parse(&ckpt.header)?;
        let config = ModelConfig::from_kv(&mut kv, "model.")?;
        kv.finish()?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}
