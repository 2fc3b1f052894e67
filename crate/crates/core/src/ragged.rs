//! Unpadded input batching.
//!
//! Per-sample inputs of different lengths are concatenated into one flat
//! token list. During attention each flat token recovers its sample and its
//! offset within that sample's chunk, which is enough to locate the cache
//! rows it may attend to. Work is scheduled per flat token rather than per
//! sample, so no sample needs padding to the longest input.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RaggedError {
    #[error("flat index {index} out of range for {total} input tokens")]
    IndexOutOfRange { index: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RaggedBatch {
    pub concatenated_tokens: Vec<u32>,
    pub token_nums_per_sample: Vec<usize>,
    pub total_input_token_nums: usize,
}

/// Where a flat token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSlot {
    pub original_batch_index: usize,
    /// Offset within the sample's current input chunk.
    pub original_sequence_position: usize,
}

impl RaggedBatch {
    pub fn batch_size(&self) -> usize {
        self.token_nums_per_sample.len()
    }

    /// The flat slice belonging to one sample.
    pub fn sample_tokens(&self, sample: usize) -> &[u32] {
        let start: usize = self.token_nums_per_sample[..sample].iter().sum();
        &self.concatenated_tokens[start..start + self.token_nums_per_sample[sample]]
    }

    /// Visits every flat token with its restored slot, in flat order.
    pub fn slots(&self) -> impl Iterator<Item = TokenSlot> + '_ {
        (0..self.total_input_token_nums)
            .map(move |i| restore_indices(&self.token_nums_per_sample, i).expect("index within total"))
    }
}

pub fn concatenate_inputs<T: AsRef<[u32]>>(list_of_input_tokens: &[T]) -> RaggedBatch {
    let batch_size = list_of_input_tokens.len();
    let mut concatenated_tokens = Vec::new();
    let mut token_nums_per_sample = vec![0; batch_size];
    let mut total_input_token_nums = 0;
    for (i, tokens) in list_of_input_tokens.iter().enumerate() {
        let tokens = tokens.as_ref();
        total_input_token_nums += tokens.len();
        token_nums_per_sample[i] = tokens.len();
        concatenated_tokens.extend_from_slice(tokens);
    }
    RaggedBatch { concatenated_tokens, token_nums_per_sample, total_input_token_nums }
}

/// Walks the samples, subtracting each count until the index fits.
pub fn restore_indices(token_nums_per_sample: &[usize], flat_index: usize) -> Result<TokenSlot, RaggedError> {
    let total: usize = token_nums_per_sample.iter().sum();
    if flat_index >= total {
        return Err(RaggedError::IndexOutOfRange { index: flat_index, total });
    }
    let mut original_sequence_position = flat_index;
    let mut original_batch_index = 0;
    for &count in token_nums_per_sample {
        if original_sequence_position >= count {
            original_batch_index += 1;
            original_sequence_position -= count;
        } else {
            break;
        }
    }
    Ok(TokenSlot { original_batch_index, original_sequence_position })
}

/// Number of cache rows visible to a token, counting its own fresh entry.
pub fn attention_extent(slot: TokenSlot, cache_committed_len: usize) -> usize {
    cache_committed_len + slot.original_sequence_position + 1
}
