use super::config::ModelConfig;

fn linear(input: usize, output: usize) -> usize {
    input * output + output
}

fn norm(d: usize) -> usize {
    2 * d
}

fn attention(d: usize, heads: usize, rel_width: Option<usize>) -> usize {
    4 * linear(d, d) + rel_width.map_or(0, |w| heads * w)
}

fn conformer(c: &ModelConfig) -> usize {
    let d = c.d;
    let ff = linear(d, c.ff) + linear(c.ff, d);
    let conv = linear(d, 2 * d) + c.kernel * d + d + norm(d) + linear(d, d);
    5 * norm(d) + 2 * ff + attention(d, c.heads, Some(2 * c.max_dist + 1)) + conv
}

fn decoder(c: &ModelConfig) -> usize {
    let d = c.d;
    let block = 3 * norm(d) + 2 * attention(d, c.heads, None) + linear(d, c.dec_ff) + linear(c.dec_ff, d);
    c.vocab * d + c.dec_blocks * block + norm(d) + linear(d, c.vocab)
}

/// Exact trainable scalar count, computed from the topology alone.
pub fn count_parameters(c: &ModelConfig) -> usize {
    let v = c.variant;
    let ch = c.subsample_channels;
    let mut n = linear(3 * c.feat_dim, ch) + linear(3 * ch, ch) + linear(ch, c.d);
    if c.mix_conv {
        n += linear(3 * c.d, c.d);
    }
    let blocks = c.mix_blocks + 2 * c.spkr_blocks + c.cross_blocks + c.rec_blocks + c.plain_blocks;
    n += blocks * conformer(c);
    if v.has_cross() && v.uses_ppe() {
        n += 3 * c.d;
    }
    n += linear(c.d, c.vocab);
    if v.has_decoder() {
        n += decoder(c);
    }
    n
}
