//! Byte-level tokenizer with a handful of chat specials.

/// Opens a user turn.
pub const USER: u32 = 256;
/// Opens the assistant turn.
pub const ASSISTANT: u32 = 257;
/// Closes the assistant turn; also the generation stop token.
pub const END: u32 = 258;
pub const PAD: u32 = 259;
/// 256 bytes, 4 specials, 4 reserved ids.
pub const VOCAB_SIZE: usize = 264;

const MARKERS: [(u32, &str); 4] = [
    (USER, "<|user|>"),
    (ASSISTANT, "<|assistant|>"),
    (END, "<|end|>"),
    (PAD, "<|pad|>"),
];

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes bytes (lossily) and renders specials as their markers.
pub fn decode(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &id in ids {
        if id < 256 {
            bytes.push(id as u8);
            continue;
        }
        flush(&mut bytes, &mut out);
        match MARKERS.iter().find(|(m, _)| *m == id) {
            Some((_, s)) => out.push_str(s),
            None => out.push_str(&format!("<|reserved{id}|>")),
        }
    }
    flush(&mut bytes, &mut out);
    out
}

/// `<|user|>prompt<|assistant|>`, ready for generation.
pub fn chat_prompt(prompt: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(prompt.len() + 2);
    ids.push(USER);
    ids.extend(encode(prompt));
    ids.push(ASSISTANT);
    ids
}

/// Tokenized chat sample and its loss mask (1 on the response and the
/// closing `<|end|>`).
pub fn chat_sample(prompt: &str, response: &str) -> (Vec<u32>, Vec<u8>) {
    let mut ids = chat_prompt(prompt);
    let n_prompt = ids.len();
    ids.extend(encode(response));
    ids.push(END);
    let mask = (0..ids.len()).map(|i| u8::from(i >= n_prompt)).collect();
    (ids, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_markers() {
        let (ids, mask) = chat_sample("1+2", "3");
        assert_eq!(decode(&ids), "<|user|>1+2<|assistant|>3<|end|>");
        assert_eq!(mask, vec![0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(decode(&encode("héllo")), "héllo");
        assert!(ids.iter().all(|&i| (i as usize) < VOCAB_SIZE));
    }
}
