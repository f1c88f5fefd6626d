//! Builds one user's behavior records, preference patterns and profile with a
//! scripted model, then queries them with the memory tool's retrieval.
//!
//! cargo run --example local_memory

use std::path::Path;

use memrec::corpus::{group_by_user, load_catalog, load_interactions};
use memrec::gateway::{ChatSettings, HashEmbedder, Llm, ScriptedGateway};
use memrec::indexer::build_local_memory;
use memrec::memory::{ChunkParams, MemoryStore, MemoryTier};
use memrec::retriever::{search_memory, RetrievalBackend, Retriever};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/case_study");
    let interactions = load_interactions(&dir.join("interactions.jsonl"))?;
    let catalog = load_catalog(&dir.join("catalog.jsonl"))?;
    let chat = ScriptedGateway::from_file(&dir.join("scripts/index_local.json"))?;
    let settings = ChatSettings::default();

    let users = group_by_user(&interactions);
    let (user, records) = users.iter().next().expect("fixture has a user");
    let memory = build_local_memory(
        user,
        records,
        &catalog,
        Llm::new(&chat, &settings),
        ChunkParams::default(),
    )?;
    println!(
        "{user}: {} entries, {} model calls",
        memory.entries.len(),
        chat.calls_made()
    );
    for tier in MemoryTier::LOCAL {
        let n = memory.entries.iter().filter(|e| e.tier == tier).count();
        println!("  {:<20} {n}", tier.as_str());
    }

    let mut store = MemoryStore::new(64);
    store.put_entries(memory.entries)?;
    let embedder = HashEmbedder::new(64, 7);
    let retriever = Retriever::new(RetrievalBackend::Bm25, &embedder);
    let aspects = ["material quality".to_string(), "adjustable fit".to_string()];
    for hit in search_memory(&store, user, &aspects, 2, &retriever)? {
        let e = store.get(&hit.hit.doc_id).expect("hit is stored");
        println!(
            "\n[{}] {} ({:.3})\n  {}",
            e.tier.as_str(),
            e.entry_id,
            hit.hit.score,
            e.text
        );
    }
    Ok(())
}
