//! Chat and embedding backends selected by configuration.

use std::sync::Arc;

use kgdx_core::llm::{HttpChat, HttpEmbedder, MockChat, MockEmbedder, RateLimited, TokenBucket};
use kgdx_core::{ChatBackend, Embedder, LlmError};

use crate::config::{BackendMode, Config};

pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn Embedder>,
}

pub fn from_config(cfg: &Config) -> Result<Backends, LlmError> {
    match cfg.backend.mode {
        BackendMode::Mock => {
            let mut chat = match &cfg.mock.transcript_path {
                Some(p) => MockChat::from_transcript_file(p)?,
                None => MockChat::new(),
            };
            if let Some(f) = &cfg.mock.fallback {
                chat = chat.with_fallback(f.clone());
            }
            let embedder = match &cfg.mock.embedding_table_path {
                Some(p) => MockEmbedder::from_table_file(p, cfg.mock.dimension)?,
                None => MockEmbedder::new(cfg.mock.dimension),
            };
            Ok(Backends {
                chat: Arc::new(chat),
                embedder: Arc::new(embedder),
            })
        }
        BackendMode::Live => {
            let http = cfg.backend.http();
            let chat = HttpChat::new(http.clone())?;
            let embedder = HttpEmbedder::new(http)?;
            Ok(match cfg.backend.requests_per_second {
                Some(rps) => {
                    let bucket = TokenBucket::new(cfg.backend.burst, rps);
                    Backends {
                        chat: Arc::new(RateLimited::new(chat, bucket.clone())),
                        embedder: Arc::new(RateLimited::new(embedder, bucket)),
                    }
                }
                None => Backends {
                    chat: Arc::new(chat),
                    embedder: Arc::new(embedder),
                },
            })
        }
    }
}
