//! Signed feature hashing of unigrams and bigrams.

pub const EMBED_DIM: usize = 128;

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn add_feature(v: &mut [f64], key: &str) {
    let h = fnv1a(key.as_bytes());
    let bucket = (h % EMBED_DIM as u64) as usize;
    let sign = if (h / EMBED_DIM as u64) % 2 == 0 {
        1.0
    } else {
        -1.0
    };
    v[bucket] += sign;
}

/// Unit-norm hashed embedding; the zero vector for empty input.
pub fn feature_embed(tokens: &[String]) -> Vec<f64> {
    feature_embed_with(tokens, true)
}

/// As [`feature_embed`], with bigram features switchable.
pub fn feature_embed_with(tokens: &[String], bigrams: bool) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    for t in tokens {
        add_feature(&mut v, t);
    }
    if bigrams {
        for w in tokens.windows(2) {
            add_feature(&mut v, &format!("{} {}", w[0], w[1]));
        }
    }
    normalize(&mut v);
    v
}

/// Scales to unit L2 norm; zero vectors are left alone.
pub fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn embed_text(text: &str) -> Vec<f64> {
    feature_embed(&super::tokenize(text))
}
