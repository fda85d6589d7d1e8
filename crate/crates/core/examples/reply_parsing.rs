//! How free-text VLM replies are read.

use detvlm::{classify_existence, classify_state, RawReply};

fn main() {
    for text in [
        "Yes",
        "yes, there is a sun visor.",
        "No.",
        "It is unclear",
        "I cannot tell",
        "Yes, but it is unclear",
        "Nope",
    ] {
        println!("{text:?} -> {:?}", classify_existence(&RawReply::new(text)));
    }
    let options = vec!["raised".to_string(), "lowered".to_string()];
    for text in ["The visor is lowered.", "raised, not lowered", "hard to say"] {
        println!("{text:?} -> {:?}", classify_state(&RawReply::new(text), &options));
    }
}
