//! Sparse and dense retrieval over a handful of item texts.
//!
//! cargo run --example retrieval -- "waterproof hiking jacket"

use memrec::gateway::HashEmbedder;
use memrec::retriever::{tokenize, Bm25Index, Bm25Params, IndexDoc, RetrievalBackend, Retriever};

const DOCS: &[(&str, &str)] = &[
    (
        "jacket-1",
        "Waterproof hiking jacket with sealed seams and a packable hood",
    ),
    (
        "jacket-2",
        "Insulated winter jacket, warm down fill, city cut",
    ),
    (
        "boots-1",
        "Leather hiking boots, waterproof membrane, ankle support",
    ),
    ("cap-1", "Adjustable snapback cap with a real leather patch"),
    (
        "mug-1",
        "Insulated travel mug that keeps coffee hot for hours",
    ),
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let query = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "waterproof hiking jacket".into());
    let q = tokenize(&query);
    println!("query tokens: {q:?}\n");

    let bm25 = Bm25Index::build(
        DOCS.iter().map(|(id, t)| (id.to_string(), tokenize(t))),
        Bm25Params::default(),
    );
    println!("avg doc length {:.2}", bm25.avg_doc_len());
    for t in &q {
        println!(
            "  idf({t}) = {:.4} (df {})",
            bm25.idf(t),
            bm25.document_frequency(t)
        );
    }
    println!("\nBM25");
    for hit in bm25.search(&q, 3)? {
        println!("  {}. {:<9} {:.4}", hit.rank, hit.doc_id, hit.score);
    }

    let embedder = HashEmbedder::new(64, 7);
    let docs: Vec<IndexDoc> = DOCS
        .iter()
        .map(|(id, t)| IndexDoc {
            id: id.to_string(),
            text: t.to_string(),
            embedding: None,
        })
        .collect();
    for backend in [RetrievalBackend::Bm25, RetrievalBackend::Dense] {
        let r = Retriever::new(backend, &embedder);
        let index = r.build(docs.clone())?;
        let ids: Vec<String> = r
            .search(&index, &query, 3)?
            .into_iter()
            .map(|h| h.doc_id)
            .collect();
        println!("\n{backend:?} via Retriever: {ids:?}");
    }
    Ok(())
}
