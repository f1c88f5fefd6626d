//! Talks to an OpenAI-compatible server. Set MEMREC_ENDPOINT (for example
//! http://localhost:8000/v1) and optionally MEMREC_API_KEY and MEMREC_MODEL.
//! Without an endpoint it prints the config section that selects this backend.
//!
//! cargo run --example http_gateway

use std::time::Duration;

use memrec::gateway::{ChatSettings, Embedder, HttpGateway, HttpSettings, Llm, RetryPolicy};

const CONFIG_SNIPPET: &str = r#"[gateway]
backend = "http"
endpoint = "http://localhost:8000/v1"
api_key_env = "MEMREC_API_KEY"
chat_model = "qwen2.5-3b-instruct"
judge_model = "qwen2.5-7b-instruct"
temperature = 1.0
max_tokens = 768
timeout_secs = 60
max_retries = 2

[embedding]
backend = "http"
model = "qwen3-embedding-0.6b"
dim = 1024
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Ok(endpoint) = std::env::var("MEMREC_ENDPOINT") else {
        println!("MEMREC_ENDPOINT is not set. A run config selects the HTTP backend like this:\n\n{CONFIG_SNIPPET}");
        return Ok(());
    };
    let gw = HttpGateway::new(HttpSettings {
        endpoint,
        api_key: std::env::var("MEMREC_API_KEY").ok(),
        embedding_model: std::env::var("MEMREC_EMBED_MODEL")
            .unwrap_or_else(|_| "qwen3-embedding-0.6b".into()),
        embedding_dim: std::env::var("MEMREC_EMBED_DIM")
            .ok()
            .and_then(|d| d.parse().ok())
            .unwrap_or(1024),
        timeout: Duration::from_secs(60),
        retry: RetryPolicy {
            max_retries: 2,
            base_delay_ms: 500,
        },
    })?;
    let settings = ChatSettings {
        model: std::env::var("MEMREC_MODEL").unwrap_or_else(|_| "qwen2.5-3b-instruct".into()),
        ..ChatSettings::default()
    };
    let (text, usage) =
        Llm::new(&gw, &settings).ask("In one sentence, what makes a good winter cap?")?;
    println!(
        "{text}\n({} prompt / {} completion tokens)",
        usage.prompt_tokens, usage.completion_tokens
    );
    if std::env::var("MEMREC_EMBED_MODEL").is_ok() {
        let v = gw.embed(&["a leather cap".to_string()])?;
        println!("embedding dim {}", v[0].values.len());
    }
    Ok(())
}
