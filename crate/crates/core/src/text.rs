//! Word-level tokenizer and a small staged transformer text encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{attention, Ctx, LayerNorm, Linear, Mlp, Scope};
use crate::tensor::{Init, ParamId, Var};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

const FROZEN_WORDS: &str = include_str!("../assets/words.txt");

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials only.
    pub fn empty() -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Synthetic-data lexicon followed by the frozen word list.
    pub fn builtin() -> Self {
        let mut v = Self::empty();
        v.extend(crate::data::synth::lexicon());
        v.extend(FROZEN_WORDS.lines().map(str::trim).filter(|w| !w.is_empty()));
        v
    }

    /// Appends unseen words; existing ids never change.
    pub fn extend<'w>(&mut self, words: impl IntoIterator<Item = &'w str>) {
        for w in words {
            let w = w.to_lowercase();
            if !self.index.contains_key(&w) {
                self.index.insert(w.clone(), self.tokens.len());
                self.tokens.push(w);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; the token on line `n` (0-based) has id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens[SPECIALS.len()..].join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self::empty();
        for (n, line) in text.lines().enumerate() {
            let w = line.trim();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("invalid vocabulary token {line:?}"),
                });
            }
            if v.index.contains_key(w) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("duplicate token {w:?}"),
                });
            }
            v.extend([w]);
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// True for real tokens (CLS, words, SEP).
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Lowercases and splits on whitespace and ASCII punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn tokenize(description: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::Config(format!("max text length must be at least 3, got {max_len}")));
    }
    let mut ids = vec![CLS];
    ids.extend(split_words(description).iter().take(max_len - 2).map(|w| vocab.id(w)));
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    Ok(TokenSequence { ids, mask })
}

/// Pre-norm transformer encoder layer with masked self-attention.
#[derive(Clone, Debug)]
struct TextLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl TextLayer {
    fn new(s: &mut Scope, name: &str, dim: usize, heads: usize, ratio: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut s, "ln1", dim)?,
            q: Linear::new(&mut s, "q", dim, dim, true)?,
            k: Linear::new(&mut s, "k", dim, dim, true)?,
            v: Linear::new(&mut s, "v", dim, dim, true)?,
            o: Linear::new(&mut s, "o", dim, dim, true)?,
            ln2: LayerNorm::new(&mut s, "ln2", dim)?,
            mlp: Mlp::new(&mut s, "mlp", dim, ratio)?,
            heads,
        })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let q = self.q.forward(ctx, h)?;
        let k = self.k.forward(ctx, h)?;
        let v = self.v.forward(ctx, h)?;
        let (a, _) = attention(ctx.tape, q, k, v, self.heads, Some(mask))?;
        let a = self.o.forward(ctx, a)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: ParamId,
    pos: ParamId,
    adapters: [Option<Linear>; 3],
    stages: [Vec<TextLayer>; 3],
    pub dims: [usize; 3],
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new(
        s: &mut Scope,
        vocab_size: usize,
        max_len: usize,
        layers: [usize; 3],
        dims: [usize; 3],
        heads: [usize; 3],
        mlp_ratio: usize,
    ) -> Result<Self> {
        for i in 0..3 {
            if heads[i] == 0 || dims[i] % heads[i] != 0 {
                return Err(Error::Config(format!(
                    "text stage {}: dim {} not divisible by {} heads",
                    i + 1,
                    dims[i],
                    heads[i]
                )));
            }
        }
        let embed = s.param("embed", &[vocab_size, dims[0]], Init::Normal(0.5))?;
        let pos = s.param("pos", &[max_len, dims[0]], Init::Normal(0.1))?;
        let mut adapters: [Option<Linear>; 3] = [None, None, None];
        let mut stages: [Vec<TextLayer>; 3] = Default::default();
        for i in 0..3 {
            let mut st = s.sub(&format!("stage{}", i + 1));
            if i > 0 && dims[i] != dims[i - 1] {
                adapters[i] = Some(Linear::new(&mut st, "adapter", dims[i - 1], dims[i], true)?);
            }
            for l in 0..layers[i] {
                stages[i].push(TextLayer::new(&mut st, &format!("layer{l}"), dims[i], heads[i], mlp_ratio)?);
            }
        }
        Ok(Self {
            embed,
            pos,
            adapters,
            stages,
            dims,
            max_len,
            vocab_size,
        })
    }

    pub fn layers(&self) -> [usize; 3] {
        [self.stages[0].len(), self.stages[1].len(), self.stages[2].len()]
    }

    /// Token plus positional embedding, `[B, L, dims[0]]`.
    pub fn embed(&self, ctx: &mut Ctx, batch: &[TokenSequence]) -> Result<Var> {
        let mut ids = Vec::with_capacity(batch.len() * self.max_len);
        for seq in batch {
            if seq.len() != self.max_len {
                return Err(Error::shape(
                    "text_embed",
                    format!("sequence of length {}, encoder expects {}", seq.len(), self.max_len),
                ));
            }
            if let Some(&bad) = seq.ids.iter().find(|&&i| i >= self.vocab_size) {
                return Err(Error::Config(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
            }
            ids.extend_from_slice(&seq.ids);
        }
        let table = ctx.p(self.embed);
        let e = ctx.tape.gather_rows(table, &ids)?;
        let e = ctx.tape.reshape(e, &[batch.len(), self.max_len, self.dims[0]])?;
        let pos = ctx.p(self.pos);
        let pos = ctx.tape.reshape(pos, &[1, self.max_len, self.dims[0]])?;
        let pos = ctx.tape.expand(pos, 0, batch.len())?;
        ctx.tape.add(e, pos)
    }

    /// Runs text stage `stage` (1-based). `mask` covers `B * L` positions.
    pub fn stage_forward(&self, ctx: &mut Ctx, x: Var, mask: &[bool], stage: usize) -> Result<Var> {
        if !(1..=3).contains(&stage) {
            return Err(Error::Config(format!("text stage {stage} out of range 1..=3")));
        }
        let i = stage - 1;
        let mut x = match &self.adapters[i] {
            Some(a) => a.forward(ctx, x)?,
            None => x,
        };
        for layer in &self.stages[i] {
            x = layer.forward(ctx, x, mask)?;
        }
        Ok(x)
    }
}

/// Flattened masks of a batch, `B * L` entries.
pub fn batch_mask(batch: &[TokenSequence]) -> Vec<bool> {
    batch.iter().flat_map(|s| s.mask.iter().copied()).collect()
}
