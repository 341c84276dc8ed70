//! Attention sequence decoder over flattened masked instance features.
//!
//! At step `i` the decoder attends with the previous LSTM state,
//! `e_j = V^T tanh(W_s s_{i-1} + W_h h_j)`, `alpha = softmax(e)`, `c_i = sum_j alpha_j h_j`,
//! then advances the LSTM on `[embed(y_{i-1}); c_i]` and emits `W_o o_i + b_o`.
//! There is no positional encoding: positions differ only through feature content.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{bilinear_taps, Graph, ParamId, Var};
use crate::corpus::Image;
use crate::detector::Transcription;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::ParamStore;
use crate::roimask::InstanceBatch;
use crate::tensor::{Real, Tensor};

pub const DIGITS: &str = "0123456789";
pub const DESK_SYMBOLS: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Glyph symbols plus the EOS (id `n`) and START (id `n + 1`) specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Config(
                "vocabulary must contain at least one symbol".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Number of glyph symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.symbols.len()
    }

    pub fn start(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Size of the output distribution (glyphs and EOS).
    pub fn num_outputs(&self) -> usize {
        self.symbols.len() + 1
    }

    /// Size of the embedding table (glyphs, EOS and START).
    pub fn num_inputs(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or(Error::UnknownSymbol { symbol: c })
            })
            .collect()
    }

    /// Encoded text followed by EOS.
    pub fn target(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = self.encode(text)?;
        ids.push(self.eos());
        Ok(ids)
    }

    /// Glyph ids to text; specials are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    /// File-name friendly label of an output id.
    pub fn label(&self, id: usize) -> String {
        match self.symbol(id) {
            Some(c) if c.is_ascii_alphanumeric() => c.to_string(),
            Some(c) => format!("u{:04x}", c as u32),
            None if id == self.eos() => "EOS".into(),
            None => "START".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    pub symbols: String,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    /// Dropout rate on the LSTM cell candidate during training.
    pub recurrent_dropout: f64,
    pub layer_norm: bool,
    pub max_steps: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            symbols: DESK_SYMBOLS.into(),
            feature_dim: 128,
            embed_dim: 64,
            hidden: 256,
            attn_dim: 128,
            recurrent_dropout: 0.1,
            layer_norm: true,
            max_steps: 40,
        }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(&self.symbols)?;
        if [
            self.feature_dim,
            self.embed_dim,
            self.hidden,
            self.attn_dim,
            self.max_steps,
        ]
        .contains(&0)
        {
            return Err(Error::Config(
                "recognizer dimensions and max_steps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.recurrent_dropout) {
            return Err(Error::Config("recurrent_dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// LSTM hidden and cell state, each `[B, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Everything computed by one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct DecoderStep {
    /// `[B, J]` attention weights.
    pub alpha: Var,
    /// `[B, C]` context vectors.
    pub context: Var,
    pub state: LstmState,
    /// `[B, V]` output logits.
    pub logits: Var,
}

/// Attention memory of an instance batch with the `W_h h_j` term precomputed.
#[derive(Clone, Debug)]
pub struct Memory {
    feats: Var,
    keys: Var,
    rows: Vec<Var>,
    valid: Vec<bool>,
    batch: usize,
    positions: usize,
    hw: (usize, usize),
    sizes: Vec<(usize, usize)>,
}

impl Memory {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Per-step attention maps of one decoded instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub hw: (usize, usize),
    /// One row-major `h' x w'` grid per step, including the EOS step.
    pub alphas: Vec<Vec<f64>>,
    /// Emitted output ids, including a final EOS when one was produced.
    pub symbols: Vec<usize>,
    /// Softmax probability of each emitted id.
    pub confidences: Vec<f64>,
}

impl AttentionTrace {
    /// Attention-weighted centre of step `i` in grid units (`x`, `y`), cell centres at `+0.5`.
    pub fn centroid(&self, i: usize) -> (f64, f64) {
        let (_, w) = self.hw;
        let (mut x, mut y) = (0.0, 0.0);
        for (k, &a) in self.alphas[i].iter().enumerate() {
            x += a * ((k % w) as f64 + 0.5);
            y += a * ((k / w) as f64 + 0.5);
        }
        (x, y)
    }

    /// [`AttentionTrace::centroid`] mapped into image pixels through the instance box.
    pub fn centroid_in_box(&self, i: usize, bbox: &BBox) -> (f64, f64) {
        let (x, y) = self.centroid(i);
        (
            bbox.x0 + x / self.hw.1 as f64 * bbox.width(),
            bbox.y0 + y / self.hw.0 as f64 * bbox.height(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    cfg: RecognizerConfig,
    vocab: Vocabulary,
    embed: ParamId,
    lstm_w: ParamId,
    lstm_gain: Option<ParamId>,
    lstm_bias: ParamId,
    attn_s: ParamId,
    attn_h: ParamId,
    attn_v: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Recognizer {
    pub fn new<T: Real, R: Rng>(
        cfg: &RecognizerConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new(&cfg.symbols)?;
        let (e, c, h, d) = (cfg.embed_dim, cfg.feature_dim, cfg.hidden, cfg.attn_dim);
        let (vi, vo) = (vocab.num_inputs(), vocab.num_outputs());
        let embed = store.add_uniform(rng, "recog.embed", &[vi, e], 0.1);
        let lstm_w = store.add_glorot(rng, "recog.lstm.w", &[4 * h, e + c + h], e + c + h, 4 * h);
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].fill(1.0);
        let lstm_bias = store.add(
            "recog.lstm.b",
            Tensor::new(&[4 * h], bias.iter().map(|&v| T::from_f64(v)).collect()),
        );
        let lstm_gain = cfg
            .layer_norm
            .then(|| store.add_const("recog.lstm.ln_gain", &[4 * h], 1.0));
        let attn_s = store.add_glorot(rng, "recog.attn.ws", &[d, h], h, d);
        let attn_h = store.add_glorot(rng, "recog.attn.wh", &[d, c], c, d);
        let attn_v = store.add_glorot(rng, "recog.attn.v", &[1, d], d, 1);
        let out_w = store.add_glorot(rng, "recog.out.w", &[vo, h], h, vo);
        let out_b = store.add_const("recog.out.b", &[vo], 0.0);
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            embed,
            lstm_w,
            lstm_gain,
            lstm_bias,
            attn_s,
            attn_h,
            attn_v,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Projects the batch features once for all decoding steps.
    pub fn memory<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &InstanceBatch,
    ) -> Result<Memory> {
        if batch.channels != self.cfg.feature_dim {
            return Err(Error::invalid(format!(
                "features have {} channels, recognizer expects {}",
                batch.channels, self.cfg.feature_dim
            )));
        }
        let j = batch.positions();
        let wh = store.var(g, self.attn_h);
        let keys = g.linear(batch.flat, wh, None);
        let rows = if batch.len() == 1 {
            vec![batch.flat]
        } else {
            (0..batch.len())
                .map(|b| g.gather_rows(batch.flat, &(b * j..(b + 1) * j).collect::<Vec<_>>()))
                .collect()
        };
        Ok(Memory {
            feats: batch.flat,
            keys,
            rows,
            valid: batch.valid.clone(),
            batch: batch.len(),
            positions: j,
            hw: batch.hw,
            sizes: batch.sizes.clone(),
        })
    }

    pub fn initial_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(&[batch, self.cfg.hidden]));
        let c = g.constant(Tensor::zeros(&[batch, self.cfg.hidden]));
        LstmState { h, c }
    }

    /// One decoder step. `dropout` supplies the random stream for recurrent dropout in training.
    pub fn decode_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mem: &Memory,
        y_prev: &[usize],
        prev: LstmState,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> DecoderStep {
        let (b, j, hd) = (mem.batch, mem.positions, self.cfg.hidden);
        assert_eq!(y_prev.len(), b, "one previous symbol per instance");
        let ws = store.var(g, self.attn_s);
        let query = g.linear(prev.h, ws, None);
        let query = if j == 1 && b == 1 {
            query
        } else {
            let rep: Vec<usize> = (0..b * j).map(|k| k / j).collect();
            g.gather_rows(query, &rep)
        };
        let pre = g.add(mem.keys, query);
        let act = g.tanh(pre);
        let v = store.var(g, self.attn_v);
        let energy = g.linear(act, v, None);
        let energy = g.reshape(energy, &[b, j]);
        let alpha = g.masked_softmax(energy, Some(&mem.valid));
        let context = if b == 1 {
            g.matmul(alpha, mem.feats)
        } else {
            let parts: Vec<Var> = (0..b)
                .map(|k| {
                    let a = g.gather_rows(alpha, &[k]);
                    g.matmul(a, mem.rows[k])
                })
                .collect();
            let wide = g.concat_cols(&parts);
            g.reshape(wide, &[b, self.cfg.feature_dim])
        };
        let table = store.var(g, self.embed);
        let emb = g.gather_rows(table, y_prev);
        let x = g.concat_cols(&[emb, context, prev.h]);
        let w = store.var(g, self.lstm_w);
        let mut z = g.linear(x, w, None);
        if let Some(gain) = self.lstm_gain {
            z = g.layer_norm(z, 1e-5);
            let gv = store.var(g, gain);
            z = g.mul_row(z, gv);
        }
        let bias = store.var(g, self.lstm_bias);
        let z = g.add_row(z, bias);
        let zi = g.slice_cols(z, 0, hd);
        let zf = g.slice_cols(z, hd, hd);
        let zg = g.slice_cols(z, 2 * hd, hd);
        let zo = g.slice_cols(z, 3 * hd, hd);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let mut cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        if let Some(rng) = dropout {
            let p = self.cfg.recurrent_dropout;
            if p > 0.0 {
                let keep = T::from_f64(1.0 / (1.0 - p));
                let m: Vec<T> = (0..b * hd)
                    .map(|_| {
                        if rng.random::<f64>() < p {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                cand = g.mul_const(cand, Rc::new(m));
            }
        }
        let fc = g.mul(f, prev.c);
        let ig = g.mul(i, cand);
        let c = g.add(fc, ig);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        let ow = store.var(g, self.out_w);
        let ob = store.var(g, self.out_b);
        let logits = g.linear(h, ow, Some(ob));
        DecoderStep {
            alpha,
            context,
            state: LstmState { h, c },
            logits,
        }
    }

    /// Logits `[T_b, V]` per instance, feeding ground-truth symbols (START first).
    pub fn teacher_forced_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &InstanceBatch,
        targets: &[Vec<usize>],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        if targets.len() != batch.len() {
            return Err(Error::invalid("one target per instance required"));
        }
        for t in targets {
            if t.is_empty() {
                return Err(Error::invalid("empty recognition target"));
            }
            if *t.last().unwrap() != self.vocab.eos() {
                return Err(Error::invalid("recognition target must end with EOS"));
            }
            if t.iter().any(|&s| s >= self.vocab.num_outputs()) {
                return Err(Error::invalid("target symbol out of range"));
            }
        }
        let mem = self.memory(g, store, batch)?;
        let b = batch.len();
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut state = self.initial_state(g, b);
        let mut per_step = Vec::with_capacity(steps);
        for i in 0..steps {
            let y: Vec<usize> = targets
                .iter()
                .map(|t| match i {
                    0 => self.vocab.start(),
                    _ => *t.get(i - 1).unwrap_or(&self.vocab.eos()),
                })
                .collect();
            let step = self.decode_step(g, store, &mem, &y, state, dropout.as_deref_mut());
            state = step.state;
            per_step.push(step.logits);
        }
        let v = self.vocab.num_outputs();
        Ok(targets
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let rows: Vec<Var> = per_step[..t.len()]
                    .iter()
                    .map(|&l| if b == 1 { l } else { g.gather_rows(l, &[k]) })
                    .collect();
                if rows.len() == 1 {
                    rows[0]
                } else {
                    let wide = g.concat_cols(&rows);
                    g.reshape(wide, &[t.len(), v])
                }
            })
            .collect())
    }

    /// Greedy decoding of every instance until EOS or `max_steps`. Nodes of each step are
    /// dropped from `g` once its outputs are read.
    pub fn greedy_decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &InstanceBatch,
        max_steps: usize,
    ) -> Result<Vec<(Transcription, AttentionTrace)>> {
        if max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        let mem = self.memory(g, store, batch)?;
        let b = batch.len();
        let v = self.vocab.num_outputs();
        let eos = self.vocab.eos();
        let mut traces: Vec<AttentionTrace> = mem
            .sizes
            .iter()
            .map(|&hw| AttentionTrace {
                hw,
                alphas: Vec::new(),
                symbols: Vec::new(),
                confidences: Vec::new(),
            })
            .collect();
        let mut done = vec![false; b];
        let mut y = vec![self.vocab.start(); b];
        let mut state = self.initial_state(g, b);
        let mark = g.len();
        for _ in 0..max_steps {
            let step = self.decode_step(g, store, &mem, &y, state, None);
            let logits = g.value(step.logits).data().to_vec();
            let alpha = g.value(step.alpha).data().to_vec();
            let (h, c) = (g.value(step.state.h).clone(), g.value(step.state.c).clone());
            g.truncate(mark);
            state = LstmState {
                h: g.constant(h),
                c: g.constant(c),
            };
            for k in 0..b {
                if done[k] {
                    continue;
                }
                let row: Vec<f64> = logits[k * v..(k + 1) * v]
                    .iter()
                    .map(|x| x.to_f64())
                    .collect();
                let best = (0..v).fold(0, |bi, i| if row[i] > row[bi] { i } else { bi });
                let mx = row[best];
                let z: f64 = row.iter().map(|&l| (l - mx).exp()).sum();
                let (h, w) = mem.sizes[k];
                let mut grid = Vec::with_capacity(h * w);
                for yy in 0..h {
                    for xx in 0..w {
                        grid.push(alpha[k * mem.positions + yy * mem.hw.1 + xx].to_f64());
                    }
                }
                let tr = &mut traces[k];
                tr.alphas.push(grid);
                tr.symbols.push(best);
                tr.confidences.push(1.0 / z);
                y[k] = best;
                if best == eos {
                    done[k] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(traces
            .into_iter()
            .map(|tr| {
                let n = tr.symbols.iter().take_while(|&&s| s != eos).count();
                let t = Transcription {
                    text: self.vocab.decode(&tr.symbols[..n]),
                    confidences: tr.confidences[..n].to_vec(),
                };
                (t, tr)
            })
            .collect())
    }
}

/// Writes one grayscale heatmap per decoding step as `{detection_id}_{step}_{symbol}.png`:
/// the attention grid upsampled over the box and blended with the image crop.
pub fn write_attention_heatmaps(
    trace: &AttentionTrace,
    image: &Image,
    bbox: &BBox,
    vocab: &Vocabulary,
    detection_id: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let b = bbox.clip(image.width() as f64, image.height() as f64);
    let x0 = b.x0.floor().max(0.0) as usize;
    let y0 = b.y0.floor().max(0.0) as usize;
    let x1 = (b.x1.ceil() as usize).clamp(x0 + 1, image.width().max(x0 + 1));
    let y1 = (b.y1.ceil() as usize).clamp(y0 + 1, image.height().max(y0 + 1));
    let (cw, ch) = (x1 - x0, y1 - y0);
    std::fs::create_dir_all(dir)?;
    let (gh, gw) = trace.hw;
    let mut paths = Vec::with_capacity(trace.alphas.len());
    for (step, alpha) in trace.alphas.iter().enumerate() {
        let peak = alpha.iter().copied().fold(0.0, f64::max);
        let mut out = image::GrayImage::new(cw as u32, ch as u32);
        for yy in 0..ch {
            for xx in 0..cw {
                let (px, py) = ((x0 + xx) as f64 + 0.5, (y0 + yy) as f64 + 0.5);
                let v = (py - bbox.y0) / bbox.height() * gh as f64;
                let u = (px - bbox.x0) / bbox.width() * gw as f64;
                let a: f64 = bilinear_taps::<f64>(gh, gw, v, u)
                    .iter()
                    .map(|&(k, w)| w * alpha[k])
                    .sum();
                let a = if peak > 0.0 { a / peak } else { 0.0 };
                let lum = (0..3)
                    .map(|c| image.get(y0 + yy, x0 + xx, c) as f64)
                    .sum::<f64>()
                    / 3.0;
                let val = 0.4 * lum + 0.6 * a;
                out.put_pixel(
                    xx as u32,
                    yy as u32,
                    image::Luma([(val.clamp(0.0, 1.0) * 255.0).round() as u8]),
                );
            }
        }
        let sym = trace
            .symbols
            .get(step)
            .map_or_else(|| "none".into(), |&s| vocab.label(s));
        let path = dir.join(format!("{detection_id}_{step}_{sym}.png"));
        out.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
