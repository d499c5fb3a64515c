//! Builds a vocabulary restricted to the words of an embedding file and
//! loads the matching vectors.
//!
//! Run with `cargo run --example embeddings`.

use msin::data::{tokenize, Vocab};
use msin::rng::{seeded, Stream};
use msin::text::{embedding_words, EmbeddingTable};

const GLOVE: &str = "\
apple 0.1 0.2 0.3
iphone -0.4 0.5 0.0
shares 0.9 -0.1 0.2
";

fn main() -> anyhow::Result<()> {
    let text = "Apple shares rise as iPhone sales beat zorblax estimates";
    let tokens = tokenize(text, 16);
    let known = embedding_words(GLOVE.as_bytes())?;
    let vocab = Vocab::build(tokens.iter().map(String::as_str), 100, Some(&|w| known.contains(w)));
    println!("tokens {tokens:?}");
    println!("vocabulary {:?}", vocab.words());

    let mut table = EmbeddingTable::random(vocab.len(), 3, &mut seeded(1, Stream::Init))?;
    let stats = table.load_glove(GLOVE.as_bytes(), &vocab)?;
    println!("loaded {} vectors, skipped {} lines", stats.matched, stats.skipped);
    for (id, w) in vocab.words().iter().enumerate() {
        println!("{id:>2} {w:<8} {:?}", &table.tensor().data()[id * 3..id * 3 + 3]);
    }
    println!("ids {:?}", vocab.encode(&tokens));
    Ok(())
}
