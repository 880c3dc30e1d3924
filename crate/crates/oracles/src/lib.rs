//! Host-language reference implementations of every corpus program, written
//! independently of the corpus assembly and used only by tests.

pub mod aes;
pub mod corpus;

pub const XTEA_DELTA: u32 = 0x9e37_79b9;

pub fn xtea_encrypt(v: [u32; 2], key: [u32; 4], cycles: u32) -> [u32; 2] {
    let [mut v0, mut v1] = v;
    let mut sum = 0u32;
    for _ in 0..cycles {
        v0 = v0.wrapping_add(((v1 << 4) ^ (v1 >> 5)).wrapping_add(v1) ^ sum.wrapping_add(key[(sum & 3) as usize]));
        sum = sum.wrapping_add(XTEA_DELTA);
        v1 = v1
            .wrapping_add(((v0 << 4) ^ (v0 >> 5)).wrapping_add(v0) ^ sum.wrapping_add(key[((sum >> 11) & 3) as usize]));
    }
    [v0, v1]
}

pub fn xtea_decrypt(v: [u32; 2], key: [u32; 4], cycles: u32) -> [u32; 2] {
    let [mut v0, mut v1] = v;
    let mut sum = XTEA_DELTA.wrapping_mul(cycles);
    for _ in 0..cycles {
        v1 = v1
            .wrapping_sub(((v0 << 4) ^ (v0 >> 5)).wrapping_add(v0) ^ sum.wrapping_add(key[((sum >> 11) & 3) as usize]));
        sum = sum.wrapping_sub(XTEA_DELTA);
        v0 = v0.wrapping_sub(((v1 << 4) ^ (v1 >> 5)).wrapping_add(v1) ^ sum.wrapping_add(key[(sum & 3) as usize]));
    }
    [v0, v1]
}

pub fn tea_encrypt(v: [u32; 2], k: [u32; 4]) -> [u32; 2] {
    let [mut v0, mut v1] = v;
    let mut sum = 0u32;
    for _ in 0..32 {
        sum = sum.wrapping_add(XTEA_DELTA);
        v0 = v0.wrapping_add((v1 << 4).wrapping_add(k[0]) ^ v1.wrapping_add(sum) ^ (v1 >> 5).wrapping_add(k[1]));
        v1 = v1.wrapping_add((v0 << 4).wrapping_add(k[2]) ^ v0.wrapping_add(sum) ^ (v0 >> 5).wrapping_add(k[3]));
    }
    [v0, v1]
}

pub fn tea_decrypt(v: [u32; 2], k: [u32; 4]) -> [u32; 2] {
    let [mut v0, mut v1] = v;
    let mut sum = XTEA_DELTA.wrapping_mul(32);
    for _ in 0..32 {
        v1 = v1.wrapping_sub((v0 << 4).wrapping_add(k[2]) ^ v0.wrapping_add(sum) ^ (v0 >> 5).wrapping_add(k[3]));
        v0 = v0.wrapping_sub((v1 << 4).wrapping_add(k[0]) ^ v1.wrapping_add(sum) ^ (v1 >> 5).wrapping_add(k[1]));
        sum = sum.wrapping_sub(XTEA_DELTA);
    }
    [v0, v1]
}

pub const SPECK_ROUNDS: u16 = 22;

/// Speck32/64 on `(x, y)` with key words `(k0, l0, l1, l2)`. Returns the
/// ciphertext and the key state after `rounds` schedule updates.
pub fn speck32_64(pt: [u16; 2], key: [u16; 4], rounds: u16) -> ([u16; 2], [u16; 4]) {
    let [mut x, mut y] = pt;
    let [mut k, mut l0, mut l1, mut l2] = key;
    for i in 0..rounds {
        x = x.rotate_right(7).wrapping_add(y) ^ k;
        y = y.rotate_left(2) ^ x;
        let l_new = k.wrapping_add(l0.rotate_right(7)) ^ i;
        k = k.rotate_left(2) ^ l_new;
        (l0, l1, l2) = (l1, l2, l_new);
    }
    ([x, y], [k, l0, l1, l2])
}

pub fn speck32_64_decrypt(ct: [u16; 2], key: [u16; 4]) -> [u16; 2] {
    let mut ks = Vec::with_capacity(SPECK_ROUNDS as usize);
    let [mut k, mut l0, mut l1, mut l2] = key;
    for i in 0..SPECK_ROUNDS {
        ks.push(k);
        let l_new = k.wrapping_add(l0.rotate_right(7)) ^ i;
        k = k.rotate_left(2) ^ l_new;
        (l0, l1, l2) = (l1, l2, l_new);
    }
    let [mut x, mut y] = ct;
    for &k in ks.iter().rev() {
        y = (y ^ x).rotate_right(2);
        x = (x ^ k).wrapping_sub(y).rotate_left(7);
    }
    [x, y]
}

pub const RC4_DROP: usize = 256;

/// RC4 output generation from state `s` with `i = j = 0`: `drop` discarded
/// steps, then `n` keystream bytes. Returns the keystream and the final state.
pub fn rc4_keystream(mut s: [u8; 256], drop: usize, n: usize) -> (Vec<u8>, [u8; 256]) {
    let (mut i, mut j) = (0u8, 0u8);
    let mut out = Vec::with_capacity(n);
    for step in 0..drop + n {
        i = i.wrapping_add(1);
        j = j.wrapping_add(s[i as usize]);
        s.swap(i as usize, j as usize);
        if step >= drop {
            out.push(s[s[i as usize].wrapping_add(s[j as usize]) as usize]);
        }
    }
    (out, s)
}

pub fn rc4_key_schedule(key: &[u8]) -> [u8; 256] {
    let mut s: [u8; 256] = std::array::from_fn(|i| i as u8);
    let mut j = 0u8;
    for i in 0..256 {
        j = j.wrapping_add(s[i]).wrapping_add(key[i % key.len()]);
        s.swap(i, j as usize);
    }
    s
}

pub fn crc32(data: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in data {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xedb8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

pub const ARX_ROUNDS: usize = 10;

fn quarter(s: &mut [u32; 8], a: usize, b: usize, c: usize, d: usize) {
    s[a] = s[a].wrapping_add(s[b]);
    s[d] = (s[d] ^ s[a]).rotate_left(16);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_left(12);
    s[a] = s[a].wrapping_add(s[b]);
    s[d] = (s[d] ^ s[a]).rotate_left(8);
    s[c] = s[c].wrapping_add(s[d]);
    s[b] = (s[b] ^ s[c]).rotate_left(7);
}

/// The ARX permutation: each round mixes the two interleaved halves and then
/// the crossed pairs.
pub fn arx_rounds(mut s: [u32; 8], rounds: usize) -> [u32; 8] {
    for _ in 0..rounds {
        quarter(&mut s, 0, 2, 4, 6);
        quarter(&mut s, 1, 3, 5, 7);
        quarter(&mut s, 0, 3, 4, 7);
        quarter(&mut s, 1, 2, 5, 6);
    }
    s
}

pub const ARX_IV: [u32; 8] =
    [0x6a09_e667, 0xbb67_ae85, 0x3c6e_f372, 0xa54f_f53a, 0x510e_527f, 0x9b05_688c, 0x1f83_d9ab, 0x5be0_cd19];

/// Work state = IV ^ message, permuted, then added back to the message.
pub fn arx_hash(msg: [u32; 8]) -> [u32; 8] {
    let work: [u32; 8] = std::array::from_fn(|i| ARX_IV[i] ^ msg[i]);
    let out = arx_rounds(work, ARX_ROUNDS);
    std::array::from_fn(|i| out[i].wrapping_add(msg[i]))
}

pub const CLASSIC_ROUNDS: usize = 20;

/// A SHA-1 flavoured compression loop whose round function leans on AND/OR.
pub fn classic_hash_rounds(mut h: [u32; 5], w: &[u32; CLASSIC_ROUNDS]) -> [u32; 5] {
    for &wt in w {
        let [a, b, c, d, e] = h;
        let ch = (b & c) | (!b & d);
        let maj = (b & c) | (b & d) | (c & d);
        let t = a.rotate_left(5).wrapping_add(ch ^ maj).wrapping_add(e).wrapping_add(wt).wrapping_add(0x5a82_7999);
        h = [t, a, b.rotate_left(30), c, d];
    }
    h
}

/// Running sums truncated to 16 bits.
pub fn checksum16(data: &[u8]) -> (u16, u16) {
    let (mut s1, mut s2) = (0u16, 0u16);
    for &b in data {
        s1 = s1.wrapping_add(u16::from(b));
        s2 = s2.wrapping_add(s1);
    }
    (s1, s2)
}

/// `(count, value)` pairs with runs capped at 255.
pub fn rle_encode(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut iter = data.iter().copied();
    let Some(mut cur) = iter.next() else { return out };
    let mut count = 1u8;
    for b in iter {
        if b == cur && count < 255 {
            count += 1;
        } else {
            out.extend([count, cur]);
            cur = b;
            count = 1;
        }
    }
    out.extend([count, cur]);
    out
}

pub const BASE64_ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

/// Encodes whole 3-byte groups; `data.len()` must be a multiple of 3.
pub fn base64_encode(data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len() % 3, 0);
    data.chunks(3)
        .flat_map(|c| {
            let n = u32::from(c[0]) << 16 | u32::from(c[1]) << 8 | u32::from(c[2]);
            [18, 12, 6, 0].map(|s| BASE64_ALPHABET[(n >> s & 63) as usize])
        })
        .collect()
}

pub fn matmul(a: &[[i32; 2]; 3], b: &[[i32; 4]; 2]) -> [[i32; 4]; 3] {
    let mut res = [[0i32; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            for k in 0..2 {
                res[i][j] = res[i][j].wrapping_add(a[i][k].wrapping_mul(b[k][j]));
            }
        }
    }
    res
}

/// The round loop alone, on the temporary buffer.
pub fn compress_rounds(mut temp: [u32; 4], block: &[u32; 4], rounds: usize) -> [u32; 4] {
    for _ in 0..rounds {
        for i in 0..4 {
            temp[i] = temp[i].wrapping_add(block[i]);
            temp[i] = temp[i].rotate_left(7);
            temp[i] ^= temp[(i + 1) % 4];
        }
        for i in 0..4 {
            temp[i] = temp[i].wrapping_add(temp[(i + 1) % 4]);
            temp[i] = temp[i].rotate_left(13);
        }
    }
    temp
}

pub fn compress_block(state: &mut [u32; 4], block: &[u32; 4]) {
    let temp = compress_rounds(*state, block, 10);
    for i in 0..4 {
        state[i] ^= temp[i];
    }
}

pub fn words_le(bytes: &[u8]) -> Vec<u32> {
    bytes.chunks(4).map(|c| u32::from_le_bytes(c.try_into().expect("whole words"))).collect()
}

pub fn words_to_le(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}
