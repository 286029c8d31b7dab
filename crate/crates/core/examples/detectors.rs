// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language, repetition and BLEU on hand-written token strings.

use mtlab::corpus::CorpusConfig;
use mtlab::detect::{corpus_bleu, detect_language, detect_repetition};
use mtlab::model::TokenSeq;

fn main() -> mtlab::error::Result<()> {
    let layout = CorpusConfig::default().layout()?;
    // content ids 56.. are the second language
    let s = [56, 57, 58, 7];
    println!("{s:?}: {:?}", detect_language(&s, &layout).detected);

    let looping = [60, 61, 62, 63, 62, 63, 62, 63, 62, 63];
    let v = detect_repetition(&looping, true);
    println!(
        "loop flagged {} unit {:?} repeats {}",
        v.flagged, v.y_repe.0, v.repeats
    );
    println!(
        "stopped early flagged {}",
        detect_repetition(&looping, false).flagged
    );

    let hyp = [TokenSeq(vec![1, 2, 3, 4])];
    let refs = [TokenSeq(vec![1, 2, 3, 4, 5])];
    println!("BLEU {:.3}", corpus_bleu(&hyp, &refs)?.bleu);
    Ok(())
}
