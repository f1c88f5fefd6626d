//! Walks one recommendation episode end to end on the bundled case-study fixture:
//! build memory, run the agent, show what it retrieved and where the target item landed.
//!
//! cargo run --example case_study

use std::path::Path;

use memrec::agent::EventKind;
use memrec::config::RunConfig;
use memrec::pipeline::{
    read_json, IndexGlobalArgs, IndexLocalArgs, IngestArgs, Pipeline, RecommendArgs, RunOptions,
};
use memrec::reward::{combined_reward, ndcg_for_rank, RankedList, RewardWeights};

fn copy_dir(src: &Path, dst: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dst)?;
    for entry in std::fs::read_dir(src)? {
        let entry = entry?;
        let target = dst.join(entry.file_name());
        if entry.path().is_dir() {
            if entry.file_name() != "out" {
                copy_dir(&entry.path(), &target)?;
            }
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = tempfile::tempdir()?;
    copy_dir(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/case_study"),
        work.path(),
    )?;
    let cfg = RunConfig::load(&work.path().join("memrec.toml"))?;
    let p = Pipeline::new(
        cfg,
        RunOptions {
            deterministic: true,
            jobs: 1,
        },
    );

    p.ingest(&IngestArgs::default())?;
    println!("{}", p.index_local(&IndexLocalArgs::default())?.message);
    println!("{}", p.index_global(&IndexGlobalArgs::default())?.message);

    let out = p.recommend(&RecommendArgs {
        query_id: "q_cap".into(),
        k: Some(5),
        ..Default::default()
    })?;
    println!("\n{}\n", out.message);

    let trace: memrec::agent::ReasoningTrace = read_json(&out.artifacts[0])?;
    let store = p.load_store()?;
    for event in &trace.events {
        match event.kind {
            EventKind::ToolCallIssued => println!("tool call: {}", event.payload),
            EventKind::ToolResult => {
                println!("retrieved {} entries:", event.injected_entry_ids.len());
                for id in &event.injected_entry_ids {
                    let e = store.get(id).expect("injected entries come from the store");
                    println!("  [{}] {}", e.tier.as_str(), e.text);
                }
            }
            EventKind::FinalAnswer => println!("answer: {}", event.payload),
            _ => {}
        }
    }

    let ranked = RankedList::new("q_cap", vec!["B0DALLY01".into()], "B0DALLY01")?;
    let reward = combined_reward(&trace, &ranked, &RewardWeights::default());
    println!(
        "\nnDCG@10 {:.3}, reward {:.2} (format {}, rec {:.2}, memory {})",
        ndcg_for_rank(Some(1), 10),
        reward.combined,
        reward.r_format,
        reward.r_rec,
        reward.r_mem
    );
    println!(
        "usage: {} prompt / {} completion tokens",
        trace.usage.prompt_tokens, trace.usage.completion_tokens
    );
    Ok(())
}
