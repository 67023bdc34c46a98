//! Corpus handling: tokenization, vocabulary, clip preprocessing, corpus
//! file formats, statistics, and the synthetic-corpus generator.

mod corpus;
mod preprocess;
mod synth;
mod tokenize;
mod vocab;

pub use corpus::{
    read_corpus, read_streams, write_corpus, write_streams, ClipExample, CommentRecord, Corpus,
    CorpusManifest, CorpusStats, RawStream, TimedText, CORPUS_FILE, MANIFEST_FILE, VOCAB_FILE,
};
pub use preprocess::{
    densest_window, preprocess_stream, select_context_comments, slice_clips,
};
pub use synth::{synthesize_corpus, SynthParams};
pub use tokenize::tokenize;
pub use vocab::{Vocabulary, BOS_ID, EOS_ID, MASK_ID, PAD_ID, RESERVED_TOKENS, UNK_ID};
