use rand::seq::SliceRandom;

use super::{EmotionCategory, Example, PAD};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Padded mini-batch. Masks are `true` on real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the batch members in the source example list.
    pub indices: Vec<usize>,
    /// `[batch][sentence][token]`, padded to the batch maxima.
    pub articles: Vec<Vec<Vec<usize>>>,
    pub token_mask: Vec<Vec<Vec<bool>>>,
    pub sentence_mask: Vec<Vec<bool>>,
    /// `[batch][position]`, padded comments including BOS/EOS.
    pub comments: Vec<Vec<usize>>,
    pub comment_mask: Vec<Vec<bool>>,
    pub emotions: Vec<EmotionCategory>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn from_examples(indices: Vec<usize>, examples: &[Example]) -> Self {
        let members: Vec<&Example> = indices.iter().map(|&i| &examples[i]).collect();
        let max_sent = members.iter().map(|e| e.article.len()).max().unwrap_or(0);
        let max_tok = members
            .iter()
            .flat_map(|e| e.article.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let max_comment = members.iter().map(|e| e.comment.len()).max().unwrap_or(0);

        let mut b = Batch {
            indices,
            articles: Vec::new(),
            token_mask: Vec::new(),
            sentence_mask: Vec::new(),
            comments: Vec::new(),
            comment_mask: Vec::new(),
            emotions: Vec::new(),
        };
        for e in members {
            let mut sents = Vec::with_capacity(max_sent);
            let mut tmask = Vec::with_capacity(max_sent);
            for s in 0..max_sent {
                let src = e.article.get(s).map(Vec::as_slice).unwrap_or(&[]);
                let mut row = src.to_vec();
                row.resize(max_tok, PAD);
                sents.push(row);
                tmask.push((0..max_tok).map(|t| t < src.len()).collect());
            }
            b.articles.push(sents);
            b.token_mask.push(tmask);
            b.sentence_mask
                .push((0..max_sent).map(|s| s < e.article.len()).collect());
            let mut c = e.comment.clone();
            c.resize(max_comment, PAD);
            b.comments.push(c);
            b.comment_mask
                .push((0..max_comment).map(|t| t < e.comment.len()).collect());
            b.emotions.push(e.emotion);
        }
        b
    }
}

/// Shuffles `examples` with `rng` and cuts them into padded batches.
pub fn make_batches(examples: &[Example], batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch::from_examples(c.to_vec(), examples))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, synth_corpus, Granularity};

    fn examples(n: usize) -> Vec<Example> {
        let records = synth_corpus(&mut Rng::new(2), n, Granularity::Fine).unwrap();
        let vocab = build_vocab(&records, 5000).unwrap();
        Example::encode_all(&records, &vocab).unwrap()
    }

    #[test]
    fn sizes_and_order() {
        let ex = examples(10);
        let batches = make_batches(&ex, 4, &mut Rng::new(1)).unwrap();
        let sizes: Vec<_> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let again = make_batches(&ex, 4, &mut Rng::new(1)).unwrap();
        assert_eq!(batches, again);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn masks_match_true_lengths() {
        let ex = examples(9);
        for b in make_batches(&ex, 3, &mut Rng::new(8)).unwrap() {
            for (k, &i) in b.indices.iter().enumerate() {
                let e = &ex[i];
                let sent: usize = b.sentence_mask[k].iter().filter(|m| **m).count();
                assert_eq!(sent, e.article.len());
                for (s, sentence) in e.article.iter().enumerate() {
                    let t = b.token_mask[k][s].iter().filter(|m| **m).count();
                    assert_eq!(t, sentence.len());
                }
                let c = b.comment_mask[k].iter().filter(|m| **m).count();
                assert_eq!(c, e.comment.len());
            }
        }
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(make_batches(&examples(2), 0, &mut Rng::new(1)).is_err());
    }
}
