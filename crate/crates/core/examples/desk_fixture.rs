//! Generates the desk-scale fixture: 20 users, 50 items in 4 categories,
//! one query per user plus four edge-case queries, and scripted gateway
//! responses for every stage.
//!
//! ```text
//! cargo run --example desk_fixture -- crates/core/fixtures/desk
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use memrec::corpus::{write_jsonl, InteractionRecord, ItemDoc, QueryRecord};
use memrec::gateway::{ScriptStep, MEMORY_TOOL};
use memrec::memory::{entry_id_for, MemoryScope, MemoryTier};
use memrec::seed::rng_for;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

const SEED: u64 = 2024;

struct Category {
    name: &'static str,
    nouns: &'static [&'static str],
    traits: &'static [&'static str],
    uses: &'static [&'static str],
}

const CATEGORIES: [Category; 4] = [
    Category {
        name: "Clothing",
        nouns: &["cap", "jacket", "scarf", "gloves", "sweater"],
        traits: &[
            "leather",
            "wool",
            "cotton",
            "waterproof",
            "adjustable",
            "lightweight",
        ],
        uses: &["spring walks", "cold commutes", "weekend hikes"],
    },
    Category {
        name: "Electronics",
        nouns: &["headphones", "charger", "speaker", "keyboard", "mouse"],
        traits: &[
            "wireless",
            "compact",
            "noise-cancelling",
            "fast-charging",
            "ergonomic",
            "durable",
        ],
        uses: &["travel", "home office", "gaming"],
    },
    Category {
        name: "Home",
        nouns: &["lamp", "blanket", "mug", "kettle", "pillow"],
        traits: &[
            "ceramic",
            "dimmable",
            "organic",
            "stainless",
            "handmade",
            "quiet",
        ],
        uses: &["reading nights", "morning coffee", "guest rooms"],
    },
    Category {
        name: "Sports",
        nouns: &["bottle", "mat", "backpack", "shoes", "band"],
        traits: &[
            "insulated",
            "non-slip",
            "breathable",
            "lightweight",
            "recycled",
            "padded",
        ],
        uses: &["trail running", "yoga classes", "long rides"],
    },
];

const ITEMS_PER_CATEGORY: [usize; 4] = [13, 13, 12, 12];
const USERS: usize = 20;

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Generated {
    items: Vec<ItemDoc>,
    /// item_id -> (category index, trait pair)
    traits: BTreeMap<String, (usize, [&'static str; 2])>,
}

fn items() -> Generated {
    let mut rng = rng_for(SEED, "items");
    let mut out = Generated {
        items: Vec::new(),
        traits: BTreeMap::new(),
    };
    for (ci, (cat, n)) in CATEGORIES.iter().zip(ITEMS_PER_CATEGORY).enumerate() {
        for j in 0..n {
            let noun = cat.nouns[j % cat.nouns.len()];
            let picks: Vec<&str> = cat.traits.choose_multiple(&mut rng, 2).copied().collect();
            let pair = [picks[0], picks[1]];
            let use_case = cat.uses.choose(&mut rng).expect("uses non-empty");
            let id = format!("{}{:02}", cat.name[..3].to_uppercase(), j + 1);
            out.items.push(ItemDoc {
                item_id: id.clone(),
                title: format!(
                    "{} {} {}",
                    title_case(pair[0]),
                    title_case(pair[1]),
                    title_case(noun)
                ),
                category: cat.name.to_string(),
                metadata_text: format!(
                    "{} {} {} designed for {}",
                    pair[0], pair[1], noun, use_case
                ),
            });
            out.traits.insert(id, (ci, pair));
        }
    }
    out
}

struct User {
    id: String,
    favorite: usize,
    liked_trait: &'static str,
    history: Vec<InteractionRecord>,
}

fn users(g: &Generated) -> Vec<User> {
    let mut rng = rng_for(SEED, "users");
    let mut out = Vec::new();
    for u in 0..USERS {
        let id = format!("u{:02}", u + 1);
        let favorite = u % CATEGORIES.len();
        let second = (favorite + 1 + rng.gen_range(0..3)) % CATEGORIES.len();
        let liked_trait = *CATEGORIES[favorite]
            .traits
            .choose(&mut rng)
            .expect("traits non-empty");
        let mut history = Vec::new();
        for (ci, count) in [(favorite, 3), (second, 2)] {
            let pool: Vec<&ItemDoc> = g
                .items
                .iter()
                .filter(|i| g.traits[&i.item_id].0 == ci)
                .collect();
            for item in pool.choose_multiple(&mut rng, count) {
                let pair = g.traits[&item.item_id].1;
                let (rating, review) = if pair.contains(&liked_trait) {
                    (
                        5.0,
                        format!("Exactly what I wanted, the {liked_trait} quality shows."),
                    )
                } else if ci == favorite {
                    (3.0, format!("Decent, but I wish it were {liked_trait}."))
                } else {
                    (4.0, format!("Solid {}, does the job.", pair[0]))
                };
                history.push(InteractionRecord {
                    user_id: id.clone(),
                    item_id: item.item_id.clone(),
                    category: item.category.clone(),
                    rating: Some(rating),
                    review_text: review,
                    timestamp: 1_600_000_000 + (history.len() as i64 + 10 * u as i64) * 86_400,
                });
            }
        }
        out.push(User {
            id,
            favorite,
            liked_trait,
            history,
        });
    }
    out
}

fn pattern_text(category: &str, liked: Option<&str>) -> String {
    match liked {
        Some(t) => format!(
            "In {category} the user rates {t} items highest and marks down items that lack it."
        ),
        None => format!(
            "In {category} the user is practical and mostly satisfied with solid, durable items."
        ),
    }
}

fn profile_text(u: &User) -> String {
    format!(
        "Practical buyer whose strongest preference is {} in {}; reviews focus on build quality.",
        u.liked_trait, CATEGORIES[u.favorite].name
    )
}

fn boxed(profile: &str, ids: &[String]) -> String {
    format!(
        "\\boxed{{{}}}",
        json!({"ideal_item_profile": profile, "useful_memory_ids": ids})
    )
}

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/desk"));
    std::fs::create_dir_all(dir.join("scripts")).expect("create fixture dir");

    let g = items();
    let users = users(&g);

    // Local memory: one pattern per (user, category) in category order, then a profile.
    let mut local = Vec::new();
    for u in &users {
        let mut cats: Vec<&str> = u.history.iter().map(|r| r.category.as_str()).collect();
        cats.sort();
        cats.dedup();
        for c in cats {
            let liked = (c == CATEGORIES[u.favorite].name).then_some(u.liked_trait);
            local.push(ScriptStep::text(
                Some(&format!("Category: {c}")),
                pattern_text(c, liked),
            ));
        }
        local.push(ScriptStep::text(
            Some("preferences across different categories"),
            profile_text(u),
        ));
    }

    // Queries: one per user, the ground truth carries the user's liked trait.
    let mut rng = rng_for(SEED, "queries");
    let mut queries = Vec::new();
    let mut eval = Vec::new();
    for u in &users {
        let cat = &CATEGORIES[u.favorite];
        let seen: Vec<&str> = u.history.iter().map(|r| r.item_id.as_str()).collect();
        let candidates: Vec<&ItemDoc> = g
            .items
            .iter()
            .filter(|i| {
                let (ci, pair) = g.traits[&i.item_id];
                ci == u.favorite
                    && pair.contains(&u.liked_trait)
                    && !seen.contains(&i.item_id.as_str())
            })
            .collect();
        let gt = candidates
            .choose(&mut rng)
            .copied()
            .or_else(|| {
                g.items.iter().find(|i| {
                    g.traits[&i.item_id].0 == u.favorite && !seen.contains(&i.item_id.as_str())
                })
            })
            .expect("an unseen item exists");
        let noun = gt
            .title
            .rsplit(' ')
            .next()
            .expect("title has words")
            .to_lowercase();
        let use_case = cat.uses.choose(&mut rng).expect("uses non-empty");
        let qid = format!("q{}", &u.id[1..]);
        let text = format!("I need a new {noun} for {use_case}, any suggestions?");
        queries.push(QueryRecord {
            query_id: qid,
            user_id: u.id.clone(),
            query_text: text.clone(),
            ground_truth_item_id: gt.item_id.clone(),
            scenario: cat.name.to_string(),
        });
        let profile_id = entry_id_for(
            MemoryTier::UserProfile,
            &MemoryScope::user(&u.id),
            None,
            &profile_text(u),
        );
        eval.push(ScriptStep::tool_call(
            Some(&format!("User query: {text}")),
            MEMORY_TOOL,
            json!({"aspects": [format!("{} material and features", cat.name), format!("{noun} quality")]}),
        ));
        eval.push(ScriptStep::text(
            Some("1. ["),
            format!(
                "Memory shows a steady preference for {} {}.\n{}",
                u.liked_trait,
                cat.name,
                boxed(
                    &format!("{} {noun} for {use_case}", u.liked_trait),
                    &[profile_id]
                )
            ),
        ));
    }

    // Edge cases, all for user u01.
    let edge = |id: &str, text: &str| QueryRecord {
        query_id: id.to_string(),
        user_id: "u01".to_string(),
        query_text: text.to_string(),
        ground_truth_item_id: "CLO01".to_string(),
        scenario: "Clothing".to_string(),
    };
    queries.push(edge("q_notool", "Just pick any cap for me."));
    eval.push(ScriptStep::text(
        Some("User query: Just pick any cap"),
        boxed("simple cap", &[]),
    ));
    queries.push(edge("q_turns", "Something warm to wear, I cannot decide."));
    for _ in 0..4 {
        eval.push(ScriptStep::text(
            None,
            "Let me think about warmth and style a bit more.",
        ));
    }
    queries.push(edge("q_malformed", "A scarf that goes with everything."));
    eval.push(ScriptStep::text(
        Some("User query: A scarf"),
        "\\boxed{ideal_item_profile: a scarf",
    ));
    queries.push(edge("q_gateway", "Gloves for cycling in the rain."));
    eval.push(ScriptStep::error(
        Some("User query: Gloves"),
        503,
        "upstream overloaded",
    ));

    // Global memory: up to five extraction calls per scenario, then one merge.
    let mut global = Vec::new();
    let mut per_scenario: BTreeMap<&str, usize> = BTreeMap::new();
    for q in &queries {
        *per_scenario.entry(q.scenario.as_str()).or_default() += 1;
    }
    for (scenario, n) in &per_scenario {
        let cat = CATEGORIES
            .iter()
            .find(|c| c.name == *scenario)
            .expect("known scenario");
        for _ in 0..(*n).min(5) {
            let aspects = json!({
                "category_level_personalization_aspects": [
                    {"category": scenario, "aspect": "Material", "description": format!("Whether the item is {} or {}.", cat.traits[0], cat.traits[1])},
                    {"category": scenario, "aspect": "Use Case Fit", "description": format!("Suited to {}.", cat.uses[0])}
                ],
                "subcategory_level_personalization_aspects": []
            });
            global.push(ScriptStep::text(
                Some(&format!("-Recommendation scenario: {scenario}")),
                aspects.to_string(),
            ));
        }
        let merged = json!({
            "Material": [format!("Prefers {} or {} builds.", cat.traits[0], cat.traits[1])],
            "Use Case Fit": [format!("Matches {} and {}.", cat.uses[0], cat.uses[1])]
        });
        global.push(ScriptStep::text(
            Some(&format!("Category: {scenario}")),
            merged.to_string(),
        ));
    }

    let recommend: Vec<ScriptStep> = eval[..2].to_vec();
    let mut grpo = Vec::new();
    for i in 0..5 {
        if i < 2 {
            grpo.extend(eval[..2].iter().cloned());
        } else {
            grpo.push(ScriptStep::text(None, boxed("generic everyday item", &[])));
        }
    }

    let interactions: Vec<InteractionRecord> =
        users.iter().flat_map(|u| u.history.clone()).collect();
    write_jsonl(&dir.join("catalog.jsonl"), &g.items).expect("write catalog");
    write_jsonl(&dir.join("interactions.jsonl"), &interactions).expect("write interactions");
    write_jsonl(&dir.join("queries.jsonl"), &queries).expect("write queries");
    let dump = |name: &str, steps: &[ScriptStep]| {
        let mut text = serde_json::to_string_pretty(steps).expect("steps serialize");
        text.push('\n');
        std::fs::write(dir.join("scripts").join(name), text).expect("write script");
    };
    dump("index_local.json", &local);
    dump("index_global.json", &global);
    dump("eval.json", &eval);
    dump("recommend.json", &recommend);
    dump("grpo.json", &grpo);
    let config = memrec::config::EXAMPLE_CONFIG.replace("seed = 7", &format!("seed = {SEED}"));
    std::fs::write(dir.join("memrec.toml"), config).expect("write config");
    println!(
        "wrote {} items, {} interactions, {} queries to {}",
        g.items.len(),
        interactions.len(),
        queries.len(),
        dir.display()
    );
}
