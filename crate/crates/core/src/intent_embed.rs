//! Customer-intention embedding model.
//!
//! A small transformer encoder maps an ad's token sequence to a unit vector.
//! Token embeddings plus learned positional embeddings feed a stack of
//! post-norm encoder blocks; sequence states are mean-pooled over non-pad
//! positions, passed through a tanh pooling layer and two feed-forward head
//! layers, then L2-normalized.
//!
//! Training minimizes `-im * log(sigmoid(dot))` over ad pairs, so pairs with
//! a high interactive metric pull their embeddings together while sampled
//! negatives (im = -1) push theirs apart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{Ad, AdPair};
use crate::nn::{gelu, gelu_prime, sigmoid, softplus, Adam, Linear, Mat, Param, TransformerBlock};
use crate::seed;
use crate::tokenize::{TokenSequence, Vocabulary, PAD_ID};

/// Architecture and optimizer settings.
///
/// `Default` reproduces the production shape (3 encoder layers, 512-dim
/// output); [`TrainConfig::desk_scale`] is the small shape used by the test
/// and simulation pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_out: usize,
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            n_layers: 3,
            n_heads: 8,
            d_model: 512,
            d_ff: 2048,
            d_out: 512,
            seq_len: 64,
        }
    }
}

impl TrainConfig {
    /// Small configuration for desk-scale runs and CI.
    pub fn desk_scale() -> Self {
        TrainConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            d_out: 32,
            seq_len: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_out == 0 || self.seq_len == 0 || self.n_heads == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model ({}) must be divisible by the head count ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// The embedding network. All parameters are `f64`.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    pub cfg: TrainConfig,
    pub vocab_size: usize,
    pub vocab_hash: u64,
    tok: Param,
    pos: Param,
    blocks: Vec<TransformerBlock>,
    pooler: Linear,
    head1: Linear,
    head2: Linear,
}

struct ForwardCache {
    ids: Vec<u32>,
    mask: Vec<bool>,
    any_content: bool,
    blocks: Vec<crate::nn::BlockCache>,
    pooled: Mat,
    pooler_out: Mat,
    head1_pre: Mat,
    head1_out: Mat,
    norm: f64,
    out: Vec<f64>,
}

impl EmbeddingNet {
    pub fn new(vocab_size: usize, vocab_hash: u64, cfg: &TrainConfig) -> Result<EmbeddingNet> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "embed-init"));
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|_| TransformerBlock::new(d, cfg.n_heads, cfg.d_ff, &mut rng))
            .collect();
        Ok(EmbeddingNet {
            cfg: cfg.clone(),
            vocab_size,
            vocab_hash,
            tok: Param::new(Mat::uniform_init(vocab_size, d, d, &mut rng)),
            pos: Param::new(Mat::uniform_init(cfg.seq_len, d, d, &mut rng)),
            blocks,
            pooler: Linear::new(d, d, &mut rng),
            head1: Linear::new(d, d, &mut rng),
            head2: Linear::new(d, cfg.d_out, &mut rng),
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut probe = self.clone();
        for p in probe.params_mut() {
            n += p.len();
        }
        n
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps: Vec<&mut Param> = vec![&mut self.tok, &mut self.pos];
        for b in &mut self.blocks {
            ps.extend(b.params_mut());
        }
        ps.extend(self.pooler.params_mut());
        ps.extend(self.head1.params_mut());
        ps.extend(self.head2.params_mut());
        ps
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn scale_grads(&mut self, s: f64) {
        for p in self.params_mut() {
            p.g.scale(s);
        }
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() != self.cfg.seq_len {
            return Err(Error::InvalidArgument(format!(
                "token sequence length {} does not match the network's sequence length {}",
                tokens.len(),
                self.cfg.seq_len
            )));
        }
        for &id in tokens.ids() {
            if id as usize >= self.vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab_size: self.vocab_size });
            }
        }
        Ok(())
    }

    fn forward_cached(&self, tokens: &TokenSequence) -> ForwardCache {
        let l = self.cfg.seq_len;
        let d = self.cfg.d_model;
        let ids = tokens.ids();
        let mask: Vec<bool> = ids.iter().map(|&id| id != PAD_ID).collect();
        let any_content = mask.iter().any(|&b| b);

        let mut x0 = Mat::zeros(l, d);
        for (i, &id) in ids.iter().enumerate() {
            let tok_row = self.tok.v.row(id as usize);
            let pos_row = self.pos.v.row(i);
            for (o, (&t, &p)) in x0.row_mut(i).iter_mut().zip(tok_row.iter().zip(pos_row)) {
                *o = t + p;
            }
        }

        let attn_mask = if any_content { Some(mask.as_slice()) } else { None };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut x = x0.clone();
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, attn_mask);
            blocks.push(cache);
            x = y;
        }

        // Mean over non-pad positions; a fully padded sequence falls back to
        // the mean over all positions so the output stays defined.
        let pool_rows: Vec<usize> = if any_content {
            mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
        } else {
            (0..l).collect()
        };
        let mut pooled = Mat::zeros(1, d);
        for &r in &pool_rows {
            for (o, &v) in pooled.row_mut(0).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        pooled.scale(1.0 / pool_rows.len() as f64);

        let pooler_pre = self.pooler.forward(&pooled);
        let mut pooler_out = pooler_pre.clone();
        pooler_out.data.iter_mut().for_each(|v| *v = v.tanh());

        let head1_pre = self.head1.forward(&pooler_out);
        let mut head1_out = head1_pre.clone();
        head1_out.data.iter_mut().for_each(|v| *v = gelu(*v));

        let z = self.head2.forward(&head1_out).data;
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = if norm > 0.0 {
            z.iter().map(|v| v / norm).collect()
        } else {
            let mut e = vec![0.0; self.cfg.d_out];
            e[0] = 1.0;
            e
        };

        ForwardCache {
            ids: ids.to_vec(),
            mask,
            any_content,
            blocks,
            pooled,
            pooler_out,
            head1_pre,
            head1_out,
            norm,
            out,
        }
    }

    /// Embeds a token sequence into a unit vector of dimension `d_out`.
    pub fn forward(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        Ok(self.forward_cached(tokens).out)
    }

    /// Backpropagates `d_out_grad` (gradient w.r.t. the normalized output)
    /// through one tower, accumulating parameter gradients.
    fn backward_tower(&mut self, cache: &ForwardCache, d_out_grad: &[f64]) {
        // Through the normalization z -> z / |z|.
        let dz: Vec<f64> = if cache.norm > 0.0 {
            let u = &cache.out;
            let gdotu: f64 = d_out_grad.iter().zip(u).map(|(g, uu)| g * uu).sum();
            d_out_grad
                .iter()
                .zip(u)
                .map(|(g, uu)| (g - gdotu * uu) / cache.norm)
                .collect()
        } else {
            vec![0.0; d_out_grad.len()]
        };

        let dz = Mat::from_vec(1, self.cfg.d_out, dz);
        let mut dh1 = self.head2.backward(&cache.head1_out, &dz);
        for (d, &p) in dh1.data.iter_mut().zip(&cache.head1_pre.data) {
            *d *= gelu_prime(p);
        }
        let mut dpool_out = self.head1.backward(&cache.pooler_out, &dh1);
        for (d, &o) in dpool_out.data.iter_mut().zip(&cache.pooler_out.data) {
            *d *= 1.0 - o * o; // tanh'
        }
        let dpooled = self.pooler.backward(&cache.pooled, &dpool_out);

        // Distribute the pooled gradient back over the averaged rows.
        let l = self.cfg.seq_len;
        let pool_rows: Vec<usize> = if cache.any_content {
            cache.mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
        } else {
            (0..l).collect()
        };
        let inv = 1.0 / pool_rows.len() as f64;
        let mut dx = Mat::zeros(l, self.cfg.d_model);
        for &r in &pool_rows {
            for (o, &g) in dx.row_mut(r).iter_mut().zip(dpooled.row(0)) {
                *o = g * inv;
            }
        }

        for (block, cache_b) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(cache_b, &dx);
        }

        // Token + positional embedding gradients; pad rows also carry
        // embeddings, so every position contributes.
        for i in 0..l {
            let row = dx.row(i).to_vec();
            for (g, &v) in self.pos.g.row_mut(i).iter_mut().zip(&row) {
                *g += v;
            }
            let tok_id = cache.ids[i] as usize;
            for (g, &v) in self.tok.g.row_mut(tok_id).iter_mut().zip(&row) {
                *g += v;
            }
        }
    }

    /// Forward + backward for one pair. Returns the pair loss; gradients are
    /// accumulated into the parameters.
    fn pair_backward(&mut self, a: &TokenSequence, b: &TokenSequence, im: f64) -> f64 {
        let ca = self.forward_cached(a);
        let cb = self.forward_cached(b);
        let dot: f64 = ca.out.iter().zip(&cb.out).map(|(x, y)| x * y).sum();
        let loss = pair_loss(im, dot);
        // dL/ddot = -im * (1 - sigmoid(dot)); exact zero when im == 0.
        let dldot = -im * (1.0 - sigmoid(dot));
        if dldot != 0.0 {
            let ga: Vec<f64> = cb.out.iter().map(|v| dldot * v).collect();
            let gb: Vec<f64> = ca.out.iter().map(|v| dldot * v).collect();
            self.backward_tower(&ca, &ga);
            self.backward_tower(&cb, &gb);
        }
        loss
    }
}

/// Contrastive loss for one ad pair: `-im * log(sigmoid(dot))`.
///
/// Bounded on the working domain: for `im` and `dot` both in [-1, 1] the loss
/// lies in [-softplus(1), softplus(1)] = [-1.3133, 1.3133].
pub fn pair_loss(im: f64, dot: f64) -> f64 {
    im * softplus(-dot)
}

/// Per-epoch mean training loss.
pub type LossCurve = Vec<f64>;

/// Trains an embedding net on interactive-metric pairs.
pub fn train(
    pairs: &[AdPair],
    tokens: &BTreeMap<String, TokenSequence>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(EmbeddingNet, LossCurve)> {
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingSet { context: "no ad pairs to train on".into() });
    }
    for p in pairs {
        for id in [&p.ad_i, &p.ad_j] {
            if !tokens.contains_key(id) {
                return Err(Error::InvalidArgument(format!(
                    "pair references ad `{id}` with no token sequence"
                )));
            }
        }
    }
    let mut net = EmbeddingNet::new(vocab.len(), vocab.content_hash(), cfg)?;
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(cfg.seed, "embed-epoch", epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            net.zero_grads();
            let mut batch_loss = 0.0;
            for &pi in batch {
                let p = &pairs[pi];
                let ta = &tokens[&p.ad_i];
                let tb = &tokens[&p.ad_j];
                batch_loss += net.pair_backward(ta, tb, p.im);
            }
            net.scale_grads(1.0 / batch.len() as f64);
            adam.step(&mut net.params_mut());
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite { context: format!("epoch {epoch} training loss") });
        }
        curve.push(mean);
    }
    Ok((net, curve))
}

/// Compares analytic gradients of the pair loss against central finite
/// differences on `n_coords` randomly sampled parameter coordinates, returning
/// the maximum relative error.
pub fn grad_check(
    net: &mut EmbeddingNet,
    pair: (&TokenSequence, &TokenSequence, f64),
    epsilon: f64,
    n_coords: usize,
    check_seed: u64,
) -> Result<f64> {
    let (ta, tb, im) = pair;
    net.check_tokens(ta)?;
    net.check_tokens(tb)?;

    net.zero_grads();
    let _ = net.pair_backward(ta, tb, im);
    let analytic: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.g.data.clone()).collect();
    for grads in &analytic {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { context: "analytic gradient".into() });
        }
    }

    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(check_seed);
    let mut max_rel: f64 = 0.0;
    let n = n_coords.min(total);
    let mut picked = std::collections::HashSet::new();
    while picked.len() < n {
        let flat = rng.gen_range(0..total);
        if !picked.insert(flat) {
            continue;
        }
        let (pi, off) = locate(&sizes, flat);

        let loss_at = |net: &EmbeddingNet| -> f64 {
            let ua = net.forward_cached(ta).out;
            let ub = net.forward_cached(tb).out;
            let dot: f64 = ua.iter().zip(&ub).map(|(x, y)| x * y).sum();
            pair_loss(im, dot)
        };

        {
            let mut ps = net.params_mut();
            ps[pi].v.data[off] += epsilon;
        }
        let up = loss_at(net);
        {
            let mut ps = net.params_mut();
            ps[pi].v.data[off] -= 2.0 * epsilon;
        }
        let down = loss_at(net);
        {
            let mut ps = net.params_mut();
            ps[pi].v.data[off] += epsilon;
        }
        let numeric = (up - down) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::NonFinite { context: "finite-difference gradient".into() });
        }
        let a = analytic[pi][off];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (pi, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (pi, flat);
        }
        flat -= s;
    }
    unreachable!("flat index out of range")
}

/// Embeds every ad in the catalog. Inference is parallel over ads and
/// order-independent.
pub fn embed_catalog(
    net: &EmbeddingNet,
    ads: &[Ad],
    vocab: &Vocabulary,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let rows: Vec<(String, Result<Vec<f64>>)> = ads
        .par_iter()
        .map(|ad| {
            let tokens = crate::tokenize::tokenize_ad(ad, vocab, net.cfg.seq_len);
            (ad.ad_id.clone(), net.forward(&tokens))
        })
        .collect();
    let mut out = BTreeMap::new();
    for (id, r) in rows {
        out.insert(id, r?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "sembid.embedding.v1";

impl EmbeddingNet {
    fn named_tensors(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        out.push(("tok_embed".into(), &mut self.tok));
        out.push(("pos_embed".into(), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let names = [
                "attn.wq.w", "attn.wq.b", "attn.wk.w", "attn.wk.b", "attn.wv.w", "attn.wv.b",
                "attn.wo.w", "attn.wo.b", "ln1.gamma", "ln1.beta", "ff.l1.w", "ff.l1.b",
                "ff.l2.w", "ff.l2.b", "ln2.gamma", "ln2.beta",
            ];
            for (name, p) in names.iter().zip(b.params_mut()) {
                out.push((format!("block{i}.{name}"), p));
            }
        }
        for (name, p) in ["pooler.w", "pooler.b"].iter().zip(self.pooler.params_mut()) {
            out.push(((*name).into(), p));
        }
        for (name, p) in ["head1.w", "head1.b"].iter().zip(self.head1.params_mut()) {
            out.push(((*name).into(), p));
        }
        for (name, p) in ["head2.w", "head2.b"].iter().zip(self.head2.params_mut()) {
            out.push(((*name).into(), p));
        }
        out
    }

    /// Writes a versioned text checkpoint: config, vocabulary hash, and every
    /// parameter tensor with its shape. Floats use shortest round-trip
    /// formatting, so save/load is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut net = self.clone();
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "vocab_hash {:016x}", net.vocab_hash);
        let _ = writeln!(out, "vocab_size {}", net.vocab_size);
        let c = &net.cfg;
        let _ = writeln!(
            out,
            "config n_layers={} n_heads={} d_model={} d_ff={} d_out={} seq_len={} seed={}",
            c.n_layers, c.n_heads, c.d_model, c.d_ff, c.d_out, c.seq_len, c.seed
        );
        for (name, p) in net.named_tensors() {
            let _ = writeln!(out, "tensor {name} {} {}", p.v.rows, p.v.cols);
            for r in 0..p.v.rows {
                let row: Vec<String> = p.v.row(r).iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        let _ = writeln!(out, "end");
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EmbeddingNet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses the checkpoint text format, validating shapes as declared.
    pub fn parse(text: &str, origin: &str) -> Result<EmbeddingNet> {
        let bad = |line: u64, msg: String| Error::BadFormat { path: origin.to_string(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));

        let (line, magic) = lines.next().ok_or_else(|| bad(0, "empty checkpoint".into()))?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(bad(line, format!("expected header `{CHECKPOINT_MAGIC}`")));
        }

        let (line, hash_line) = lines.next().ok_or_else(|| bad(0, "missing vocab_hash".into()))?;
        let vocab_hash = hash_line
            .strip_prefix("vocab_hash ")
            .and_then(|h| u64::from_str_radix(h.trim(), 16).ok())
            .ok_or_else(|| bad(line, "bad vocab_hash line".into()))?;

        let (line, size_line) = lines.next().ok_or_else(|| bad(0, "missing vocab_size".into()))?;
        let vocab_size: usize = size_line
            .strip_prefix("vocab_size ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(line, "bad vocab_size line".into()))?;

        let (line, cfg_line) = lines.next().ok_or_else(|| bad(0, "missing config".into()))?;
        let cfg_body = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| bad(line, "bad config line".into()))?;
        let mut cfg = TrainConfig::default();
        for kv in cfg_body.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(line, format!("bad config entry `{kv}`")))?;
            let parse_usize =
                |v: &str| v.parse::<usize>().map_err(|_| bad(line, format!("bad value `{v}`")));
            match k {
                "n_layers" => cfg.n_layers = parse_usize(v)?,
                "n_heads" => cfg.n_heads = parse_usize(v)?,
                "d_model" => cfg.d_model = parse_usize(v)?,
                "d_ff" => cfg.d_ff = parse_usize(v)?,
                "d_out" => cfg.d_out = parse_usize(v)?,
                "seq_len" => cfg.seq_len = parse_usize(v)?,
                "seed" => {
                    cfg.seed =
                        v.parse().map_err(|_| bad(line, format!("bad value `{v}`")))?
                }
                other => return Err(bad(line, format!("unknown config key `{other}`"))),
            }
        }

        let mut net = EmbeddingNet::new(vocab_size, vocab_hash, &cfg)?;
        let mut filled = std::collections::HashSet::new();
        let expected: Vec<(String, usize, usize)> = {
            let mut probe = net.clone();
            probe
                .named_tensors()
                .into_iter()
                .map(|(n, p)| (n, p.v.rows, p.v.cols))
                .collect()
        };
        let shape_of: std::collections::HashMap<&str, (usize, usize)> =
            expected.iter().map(|(n, r, c)| (n.as_str(), (*r, *c))).collect();

        loop {
            let (line, text_line) = match lines.next() {
                Some(x) => x,
                None => return Err(bad(0, "missing `end` terminator".into())),
            };
            let trimmed = text_line.trim();
            if trimmed == "end" {
                break;
            }
            let rest = trimmed
                .strip_prefix("tensor ")
                .ok_or_else(|| bad(line, format!("expected `tensor ...`, got `{trimmed}`")))?;
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| bad(line, "tensor missing name".into()))?;
            let rows: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(line, "tensor missing rows".into()))?;
            let cols: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(line, "tensor missing cols".into()))?;
            let &(er, ec) = shape_of
                .get(name)
                .ok_or_else(|| bad(line, format!("unknown tensor `{name}`")))?;
            if (rows, cols) != (er, ec) {
                return Err(Error::ShapeMismatch {
                    tensor: name.to_string(),
                    expected: format!("{er}x{ec}"),
                    found: format!("{rows}x{cols}"),
                });
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (rline, row) = lines
                    .next()
                    .ok_or_else(|| bad(0, format!("tensor `{name}` truncated")))?;
                for v in row.split_whitespace() {
                    let x: f64 = v
                        .parse()
                        .map_err(|_| bad(rline, format!("bad float `{v}`")))?;
                    data.push(x);
                }
            }
            if data.len() != rows * cols {
                return Err(Error::ShapeMismatch {
                    tensor: name.to_string(),
                    expected: format!("{} values", rows * cols),
                    found: format!("{} values", data.len()),
                });
            }
            let name_owned = name.to_string();
            let mut data = Some(data);
            for (tname, p) in net.named_tensors() {
                if tname == name_owned {
                    p.v = Mat::from_vec(rows, cols, data.take().expect("tensor filled twice"));
                    break;
                }
            }
            filled.insert(name_owned);
        }
        for (name, _, _) in &expected {
            if !filled.contains(name) {
                return Err(Error::BadFormat {
                    path: origin.to_string(),
                    line: 0,
                    msg: format!("checkpoint missing tensor `{name}`"),
                });
            }
        }
        Ok(net)
    }

    /// Verifies that a loaded checkpoint matches the vocabulary it will be
    /// applied with.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.content_hash();
        if self.vocab_hash != found {
            return Err(Error::VocabHashMismatch { expected: self.vocab_hash, found });
        }
        Ok(())
    }
}

/// Writes embeddings as `ad_id,v_0,...,v_{d_out-1}`.
pub fn write_embeddings(path: &Path, embeddings: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let d_out = embeddings.values().next().map(Vec::len).unwrap_or(0);
    let mut out = String::from("ad_id");
    for i in 0..d_out {
        let _ = write!(out, ",v_{i}");
    }
    out.push('\n');
    for (id, v) in embeddings {
        out.push_str(id);
        for x in v {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings_str(&text, &path.display().to_string())
}

pub fn parse_embeddings_str(text: &str, origin: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let width = reader
        .headers()
        .map_err(|e| Error::BadFormat { path: origin.into(), line: 1, msg: e.to_string() })?
        .len();
    if width < 2 {
        return Err(Error::BadFormat {
            path: origin.into(),
            line: 1,
            msg: "embeddings need an ad_id column plus at least one component".into(),
        });
    }
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let record = row.map_err(|e| Error::BadFormat {
            path: origin.into(),
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(0).unwrap_or("").to_string();
        let mut v = Vec::with_capacity(width - 1);
        for k in 1..width {
            let x: f64 = record.get(k).unwrap_or("").trim().parse().map_err(|_| {
                Error::MalformedField {
                    path: origin.into(),
                    line,
                    field: format!("v_{}", k - 1),
                    msg: "must be a real number".into(),
                }
            })?;
            v.push(x);
        }
        if out.insert(id.clone(), v).is_some() {
            return Err(Error::DuplicateKey { path: origin.into(), line, key: id });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{build_vocab, tokenize_text};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            d_out: 8,
            seq_len: 6,
            batch_size: 4,
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    fn tiny_vocab() -> Vocabulary {
        build_vocab(
            &["oak chair seat wood".into(), "desk lamp light bulb".into(), "sofa couch".into()],
            32,
        )
    }

    #[test]
    fn pair_loss_matches_analytic_values() {
        // -log(sigmoid(0)) = log 2
        assert!((pair_loss(1.0, 0.0) - 0.6931471805599453).abs() < 1e-12);
        // log(sigmoid(-1)) = -softplus(1)
        assert!((pair_loss(-1.0, -1.0) - (-1.3132616875182228)).abs() < 1e-12);
        // 0.958 * (-log sigmoid(1)), evaluated directly from the definition
        let direct = -0.958 * (1.0 / (1.0 + (-1.0f64).exp())).ln();
        assert!((pair_loss(0.958, 1.0) - direct).abs() < 1e-12);
        assert!((direct - 0.3001).abs() < 1e-4, "{direct}");
    }

    #[test]
    fn pair_loss_is_bounded_on_the_working_domain() {
        let bound = softplus(1.0);
        for im_step in 0..=20 {
            for dot_step in 0..=20 {
                let im = -1.0 + 0.1 * im_step as f64;
                let dot = -1.0 + 0.1 * dot_step as f64;
                let l = pair_loss(im, dot);
                assert!(l.abs() <= bound + 1e-12, "loss {l} out of bounds at ({im}, {dot})");
            }
        }
        assert!((pair_loss(1.0, -1.0) - bound).abs() < 1e-12);
        assert!((pair_loss(-1.0, -1.0) + bound).abs() < 1e-12);
    }

    #[test]
    fn forward_is_unit_norm_and_deterministic() {
        let vocab = tiny_vocab();
        let net = EmbeddingNet::new(vocab.len(), vocab.content_hash(), &tiny_cfg()).unwrap();
        for text in ["oak chair", "desk lamp light bulb sofa couch oak", ""] {
            let seq = tokenize_text(text, &vocab, 6);
            let a = net.forward(&seq).unwrap();
            let b = net.forward(&seq).unwrap();
            assert_eq!(a, b);
            let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm} for `{text}`");
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let vocab = tiny_vocab();
        let net = EmbeddingNet::new(4, vocab.content_hash(), &tiny_cfg()).unwrap();
        let seq = tokenize_text("oak chair seat wood desk", &vocab, 6);
        assert!(matches!(net.forward(&seq), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let vocab = tiny_vocab();
        let mut net = EmbeddingNet::new(vocab.len(), vocab.content_hash(), &tiny_cfg()).unwrap();
        let a = tokenize_text("oak chair seat", &vocab, 6);
        let b = tokenize_text("desk lamp light bulb", &vocab, 6);
        let max_rel = grad_check(&mut net, (&a, &b, 0.83), 1e-5, 120, 7).unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
        let max_rel_neg = grad_check(&mut net, (&a, &b, -1.0), 1e-5, 120, 8).unwrap();
        assert!(max_rel_neg < 1e-4, "max relative error {max_rel_neg}");
    }

    #[test]
    fn zero_im_pair_has_exactly_zero_gradients() {
        let vocab = tiny_vocab();
        let mut net = EmbeddingNet::new(vocab.len(), vocab.content_hash(), &tiny_cfg()).unwrap();
        let a = tokenize_text("oak chair", &vocab, 6);
        let b = tokenize_text("desk lamp", &vocab, 6);
        net.zero_grads();
        let loss = net.pair_backward(&a, &b, 0.0);
        assert_eq!(loss, 0.0);
        for p in net.params_mut() {
            assert!(p.g.data.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn one_descent_step_on_a_positive_pair_lowers_the_loss() {
        let vocab = tiny_vocab();
        let cfg = TrainConfig { learning_rate: 1e-3, ..tiny_cfg() };
        let mut net = EmbeddingNet::new(vocab.len(), vocab.content_hash(), &cfg).unwrap();
        let a = tokenize_text("oak chair seat", &vocab, 6);
        let b = tokenize_text("oak chair wood", &vocab, 6);
        let dot_of = |net: &EmbeddingNet| -> f64 {
            let ua = net.forward(&a).unwrap();
            let ub = net.forward(&b).unwrap();
            ua.iter().zip(&ub).map(|(x, y)| x * y).sum()
        };
        let loss_before = pair_loss(1.0, dot_of(&net));
        net.zero_grads();
        let _ = net.pair_backward(&a, &b, 1.0);
        let mut adam = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
        adam.step(&mut net.params_mut());
        assert!(pair_loss(1.0, dot_of(&net)) < loss_before);
    }

    #[test]
    fn duplicated_inputs_sit_at_the_constrained_optimum() {
        // With both towers fed the same sequence the outputs coincide, the
        // dot is exactly 1, and the normalization layer projects the pull
        // toward higher dot to zero: the pair is already optimal.
        let vocab = tiny_vocab();
        let mut net = EmbeddingNet::new(vocab.len(), vocab.content_hash(), &tiny_cfg()).unwrap();
        let a = tokenize_text("oak chair seat", &vocab, 6);
        net.zero_grads();
        let loss = net.pair_backward(&a, &a, 1.0);
        assert!((loss - softplus(-1.0)).abs() < 1e-12);
        for p in net.params_mut() {
            for &g in &p.g.data {
                assert!(g.abs() < 1e-12, "residual gradient {g}");
            }
        }
    }

    fn tiny_training_setup() -> (Vec<AdPair>, BTreeMap<String, TokenSequence>, Vocabulary) {
        let vocab = tiny_vocab();
        let mut tokens = BTreeMap::new();
        tokens.insert("a".to_string(), tokenize_text("oak chair seat", &vocab, 6));
        tokens.insert("b".to_string(), tokenize_text("chair seat wood", &vocab, 6));
        tokens.insert("c".to_string(), tokenize_text("desk lamp light", &vocab, 6));
        tokens.insert("d".to_string(), tokenize_text("lamp light bulb", &vocab, 6));
        let pairs = vec![
            AdPair::new("a", "b", 0.9),
            AdPair::new("c", "d", 0.8),
            AdPair::new("a", "c", -1.0),
            AdPair::new("b", "d", -1.0),
        ];
        (pairs, tokens, vocab)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (pairs, tokens, vocab) = tiny_training_setup();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, ..tiny_cfg() };
        let (net, curve) = train(&pairs, &tokens, &vocab, &cfg).unwrap();
        let fresh = EmbeddingNet::new(vocab.len(), vocab.content_hash(), &cfg).unwrap();
        let seq = &tokens["a"];
        assert_eq!(net.forward(seq).unwrap(), fresh.forward(seq).unwrap());
        for w in curve.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn training_is_deterministic_and_separates_themes() {
        let (pairs, tokens, vocab) = tiny_training_setup();
        let cfg = TrainConfig { epochs: 30, learning_rate: 5e-3, ..tiny_cfg() };
        let (net1, curve1) = train(&pairs, &tokens, &vocab, &cfg).unwrap();
        let (net2, curve2) = train(&pairs, &tokens, &vocab, &cfg).unwrap();
        assert_eq!(curve1, curve2);
        assert_eq!(net1.forward(&tokens["a"]).unwrap(), net2.forward(&tokens["a"]).unwrap());

        let e: BTreeMap<&str, Vec<f64>> = ["a", "b", "c", "d"]
            .iter()
            .map(|k| (*k, net1.forward(&tokens[*k]).unwrap()))
            .collect();
        let dot = |x: &str, y: &str| e[x].iter().zip(&e[y]).map(|(a, b)| a * b).sum::<f64>();
        let within = (dot("a", "b") + dot("c", "d")) / 2.0;
        let across = (dot("a", "c") + dot("b", "d")) / 2.0;
        assert!(within > across, "within {within} <= across {across}");
    }

    #[test]
    fn empty_pair_list_is_an_error() {
        let (_, tokens, vocab) = tiny_training_setup();
        assert!(matches!(
            train(&[], &tokens, &vocab, &tiny_cfg()),
            Err(Error::EmptyTrainingSet { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let (pairs, tokens, vocab) = tiny_training_setup();
        let cfg = TrainConfig { epochs: 2, ..tiny_cfg() };
        let (net, _) = train(&pairs, &tokens, &vocab, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let back = EmbeddingNet::load(&path).unwrap();
        assert_eq!(back.vocab_hash, net.vocab_hash);
        back.check_vocab(&vocab).unwrap();
        for key in ["a", "b", "c", "d"] {
            assert_eq!(net.forward(&tokens[key]).unwrap(), back.forward(&tokens[key]).unwrap());
        }
        // Re-saving the loaded net reproduces the identical file.
        let path2 = dir.path().join("net2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            std::fs::read_to_string(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_wrong_vocab_and_bad_shapes() {
        let (pairs, tokens, vocab) = tiny_training_setup();
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        let (net, _) = train(&pairs, &tokens, &vocab, &cfg).unwrap();
        let other = build_vocab(&["entirely different words".into()], 16);
        assert!(matches!(net.check_vocab(&other), Err(Error::VocabHashMismatch { .. })));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("tensor pos_embed 6 8", "tensor pos_embed 5 8");
        assert!(EmbeddingNet::parse(&tampered, "mem").is_err());
    }

    #[test]
    fn embeddings_csv_round_trips_and_ignores_order() {
        let (pairs, tokens, vocab) = tiny_training_setup();
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        let (net, _) = train(&pairs, &tokens, &vocab, &cfg).unwrap();
        let mut ads = Vec::new();
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            ads.push(crate::ingest::Ad {
                ad_id: id.to_string(),
                items: vec![crate::ingest::Item {
                    title: format!("oak chair {i}"),
                    description: String::new(),
                    revenue_rank: 1,
                }],
                product_type: None,
                total_clicks: 0,
                feedback: crate::rpc_model::Feedback::empty(0),
            });
        }
        let fwd = embed_catalog(&net, &ads, &vocab).unwrap();
        ads.reverse();
        let rev = embed_catalog(&net, &ads, &vocab).unwrap();
        assert_eq!(fwd, rev);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        write_embeddings(&path, &fwd).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(fwd, back);
    }
}
