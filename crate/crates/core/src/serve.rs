//! Serving: embedding a response set into an index, answering contexts, and
//! a line-oriented chat loop.

use std::io::{BufRead, Write};
use std::time::{Duration, Instant};

use crate::biencoder::EncoderParams;
use crate::corpus::{detokenize, tokenize, Context, ResponseSet, Vocab};
use crate::error::{G2rError, Result};
use crate::mips::{HnswParams, IndexKind, MipsIndex, QueryResult};
use crate::rng::sha256_hex;

/// Hash tying an index to the encoder and response set it was built from.
pub fn source_fingerprint(params: &EncoderParams, set: &ResponseSet) -> String {
    sha256_hex(format!("{}:{}", params.fingerprint(), set.fingerprint()).as_bytes())
}

/// Response embeddings as one row-major f32 buffer.
pub fn embed_responses(params: &EncoderParams, vocab: &Vocab, set: &ResponseSet) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(set.len() * params.dim());
    for r in set.responses() {
        out.extend(params.encode_response_ids(&vocab.ids(r))?.into_iter().map(|x| x as f32));
    }
    Ok(out)
}

pub fn build_response_index(
    params: &EncoderParams,
    vocab: &Vocab,
    set: &ResponseSet,
    kind: IndexKind,
    hnsw: HnswParams,
) -> Result<MipsIndex> {
    let data = embed_responses(params, vocab, set)?;
    let mut index = match kind {
        IndexKind::Exact => MipsIndex::exact_flat(data, params.dim())?,
        IndexKind::Hnsw => MipsIndex::hnsw_flat(data, params.dim(), hnsw)?,
    };
    index.set_source(source_fingerprint(params, set));
    Ok(index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub text: String,
    pub result: QueryResult,
    pub elapsed: Duration,
}

/// Retrieval-based responder over a built index.
pub struct Responder<'a> {
    params: &'a EncoderParams,
    vocab: &'a Vocab,
    set: &'a ResponseSet,
    index: &'a MipsIndex,
    pub ef_search: usize,
}

impl<'a> Responder<'a> {
    /// Fails when the index was not built from `params` and `set`, unless
    /// `force` is set.
    pub fn new(
        params: &'a EncoderParams,
        vocab: &'a Vocab,
        set: &'a ResponseSet,
        index: &'a MipsIndex,
        ef_search: usize,
        force: bool,
    ) -> Result<Self> {
        if index.len() != set.len() || index.dim() != params.dim() {
            return Err(G2rError::ShapeMismatch {
                expected: format!("{} responses of dimension {}", set.len(), params.dim()),
                actual: format!("{} vectors of dimension {}", index.len(), index.dim()),
            });
        }
        if params.vocab_size() != vocab.len() {
            return Err(G2rError::VocabMismatch(format!(
                "encoder has {} rows, vocabulary {} tokens",
                params.vocab_size(),
                vocab.len()
            )));
        }
        let want = source_fingerprint(params, set);
        if !force && index.source() != want {
            return Err(G2rError::HashMismatch {
                artifact: "index".into(),
                expected: want,
                found: index.source().to_string(),
            });
        }
        Ok(Responder {
            params,
            vocab,
            set,
            index,
            ef_search,
        })
    }

    pub fn respond(&self, history: &Context) -> Result<Reply> {
        let start = Instant::now();
        let c: Vec<f32> = self
            .params
            .encode_context_ids(&self.vocab.context_ids(history))?
            .into_iter()
            .map(|x| x as f32)
            .collect();
        let result = self.index.query(&c, 1, self.ef_search)?[0];
        let elapsed = start.elapsed();
        let text = detokenize(self.set.get(result.response_id as usize).ok_or_else(|| {
            G2rError::Format(format!("index returned unknown response {}", result.response_id))
        })?);
        Ok(Reply {
            text,
            result,
            elapsed,
        })
    }
}

/// Reads user turns from `input` and writes one reply line per turn.
///
/// The history keeps the last `window` turns from both speakers. `/reset`
/// clears it and `/quit` ends the session. With `show_latency` off the
/// latency column prints `-`, so a replayed transcript is byte-identical.
pub fn chat_repl<R: BufRead, W: Write>(
    responder: &Responder,
    window: usize,
    input: R,
    mut output: W,
    show_latency: bool,
) -> Result<()> {
    if window == 0 {
        return Err(G2rError::invalid("window must be at least 1 turn"));
    }
    let io = |e| G2rError::io("<chat output>", e);
    let mut history: Vec<Vec<String>> = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| G2rError::io("<chat input>", e))?;
        let line = line.trim();
        match line {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                history.clear();
                writeln!(output, "(history cleared)").map_err(io)?;
                continue;
            }
            _ => {}
        }
        let turn = tokenize(line);
        if turn.is_empty() {
            continue;
        }
        history.push(turn);
        let ctx = Context::with_max_turns(history.clone(), window)?;
        let reply = responder.respond(&ctx)?;
        let latency = if show_latency {
            format!("{}", reply.elapsed.as_micros())
        } else {
            "-".to_string()
        };
        writeln!(
            output,
            "bot: {}\t[id={} score={:.6} latency_us={}]",
            reply.text, reply.result.response_id, reply.result.score, latency
        )
        .map_err(io)?;
        history.push(tokenize(&reply.text));
        if history.len() > window {
            history.drain(..history.len() - window);
        }
    }
    output.flush().map_err(io)
}
