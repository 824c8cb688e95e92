//! Tabular life histories to token sequences and back: vocabulary, income
//! quantization, calendar-grammar encoding, augmentation, and corpus files.

mod quantize;
mod sequence;
mod vocab;

pub use quantize::{real_monthly, IncomeQuantizer, N_BINS};
pub use sequence::{
    augment, decode_events, decode_tokens, pad_to, read_corpus_jsonl, tokenize_person, truncate_whole_years,
    write_corpus_jsonl, DecodedEvent, DecodedHistory, DecodedYear, EncodeOptions, LifeSequence, TokenizedPerson,
    YEAR_INDEX_BASE,
};
pub use vocab::{
    discretize_intensity, IntensityLevel, Token, TokenCategory, Vocabulary, BOL_ID, EOL_ID, EOY_ID, PAD_ID, UNK_ID,
};
