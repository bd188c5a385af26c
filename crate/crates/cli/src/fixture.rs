//! The desk-scale fixture and the config that runs it.

use std::fs;
use std::io;
use std::path::Path;

use mainforge_core::evalkit::{DESK_ADD_K, DESK_GLOBAL_SEED, FixtureSpec};

pub const CONFIG_FILE: &str = "config.toml";

/// Curated pairs kept from the 2000 unlabeled responses.
pub const DESK_TOP_K: usize = 500;

pub fn desk_config() -> String {
    format!(
        "# Desk-scale fixture: five topics, 25 words, order-2 reference models.\n\
         global_seed = {DESK_GLOBAL_SEED}\n\
         \n\
         [paths]\n\
         seed = \"seed.jsonl\"\n\
         unlabeled = \"unlabeled.jsonl\"\n\
         heldout = \"heldout.jsonl\"\n\
         output = \"out\"\n\
         \n\
         [forward]\n\
         kind = \"reference\"\n\
         add_k = {DESK_ADD_K}\n\
         \n\
         [reverse]\n\
         kind = \"reference\"\n\
         add_k = {DESK_ADD_K}\n\
         \n\
         [curation]\n\
         top_k = {DESK_TOP_K}\n"
    )
}

/// Write the fixture corpora and its config into `dir`.
pub fn write_desk(dir: &Path) -> io::Result<()> {
    FixtureSpec::default().generate().write(dir)?;
    fs::write(dir.join(CONFIG_FILE), desk_config())
}
