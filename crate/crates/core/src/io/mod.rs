//! Configuration files, checkpoints, embedding dumps and JSON reports.

mod checkpoint;
mod config;
mod report;

pub use checkpoint::{
    decode_checkpoint, decode_embeddings, encode_checkpoint, encode_embeddings, load_checkpoint, save_checkpoint,
    write_atomic, CHECKPOINT_MAGIC, EMBEDDING_MAGIC,
};
pub use config::{config_echo, config_text, parse_config, parse_config_str, CONFIG_KEYS};
pub use report::{build_report, report_string, round_floats, round_sig, write_report, SIGNIFICANT_DIGITS};
