//! How many distinct captions a vocabulary supports under different rules.

use labalign::captions::{combination_count, enumerate_combinations, ComboRules, Vocabulary};

fn main() -> labalign::Result<()> {
    let v = Vocabulary::clevr();
    println!("{} objects, {} attributes", v.objects.len(), v.attributes.len());
    for (name, rules) in [
        ("clevr pairs", ComboRules::CLEVR_PAIRS),
        ("distinct pairs", ComboRules::DISTINCT_PAIRS),
        ("multiset", ComboRules::MULTISET),
    ] {
        let counts: Vec<String> = (1..=4)
            .map(|m| combination_count(&v, m, rules).map(|c| c.to_string()).unwrap_or_else(|_| "-".into()))
            .collect();
        println!("{name:<15} m=1..4: {}", counts.join(", "));
    }
    let listed = enumerate_combinations(&v, 2, ComboRules::CLEVR_PAIRS)?;
    assert_eq!(listed.len() as u128, combination_count(&v, 2, ComboRules::CLEVR_PAIRS)?);
    println!("first: {:?}", listed[0]);
    Ok(())
}
