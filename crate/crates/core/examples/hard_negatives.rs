//! Attribute permutations for structured captions and tag-aware shuffles
//! for free-form ones.

use labalign::captions::{permute_attributes, render, shuffle_tagged, ArticleMode};
use labalign::datamodel::{PosTag, Slot, StructuredCaption, TokenTag};

fn main() -> labalign::Result<()> {
    let caption = StructuredCaption::new(
        "",
        vec![Slot::new("red", "cube"), Slot::new("blue", "sphere"), Slot::new("green", "cylinder")],
    );
    println!("original: {}", render(&caption, ArticleMode::None));
    for seed in 0..8 {
        let neg = permute_attributes(&caption, seed)?;
        println!("seed {seed}:   {}", render(&neg, ArticleMode::None));
    }

    use PosTag::*;
    let tagged: Vec<TokenTag> = [
        ("a", Other),
        ("small", Adjective),
        ("dog", Noun),
        ("chasing", Other),
        ("a", Other),
        ("brown", Adjective),
        ("cat", Noun),
    ]
    .into_iter()
    .map(|(w, t)| TokenTag(w.to_string(), t))
    .collect();
    println!("tagged:   {}", shuffle_tagged(&tagged, 7)?);
    Ok(())
}
