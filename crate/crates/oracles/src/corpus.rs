//! Expected buffer contents for the corpus programs, keyed by the buffer
//! names used in the corpus manifest.

use crate::aes;
use crate::*;

/// Named input buffers and the named output buffers they must produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Case {
    pub inputs: Vec<(&'static str, Vec<u8>)>,
    pub expected: Vec<(&'static str, Vec<u8>)>,
}

impl Case {
    pub fn input_refs(&self) -> Vec<(&str, &[u8])> {
        self.inputs.iter().map(|(n, v)| (*n, v.as_slice())).collect()
    }
}

fn u16s_le(b: &[u8]) -> Vec<u16> {
    b.chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
}

fn u16s_to_le(v: &[u16]) -> Vec<u8> {
    v.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn two(b: &[u8]) -> [u32; 2] {
    let w = words_le(b);
    [w[0], w[1]]
}

fn four(b: &[u8]) -> [u32; 4] {
    words_le(b).try_into().expect("four words")
}

/// Programs [`program_case`] knows.
pub const PROGRAMS: [&str; 14] = [
    "xtea",
    "tea",
    "speck",
    "rc4",
    "aes",
    "arx_hash",
    "classic_hash",
    "crc32",
    "rle",
    "checksum",
    "memcpy",
    "base64",
    "matmul",
    "compress_block",
];

/// A whole-program case with inputs drawn from `random(len)`.
pub fn program_case(program: &str, random: &mut dyn FnMut(usize) -> Vec<u8>) -> Option<Case> {
    let case = match program {
        "xtea" | "tea" => {
            let (pt, key) = (random(8), random(16));
            let ct = if program == "xtea" {
                xtea_encrypt(two(&pt), four(&key), 32)
            } else {
                tea_encrypt(two(&pt), four(&key))
            };
            Case { inputs: vec![("plaintext", pt), ("key", key)], expected: vec![("ciphertext", words_to_le(&ct))] }
        }
        "speck" => {
            let (pt, key) = (random(4), random(8));
            let p = u16s_le(&pt);
            let k = u16s_le(&key);
            let (ct, _) = speck32_64([p[0], p[1]], [k[0], k[1], k[2], k[3]], SPECK_ROUNDS);
            Case { inputs: vec![("plaintext", pt), ("key", key)], expected: vec![("ciphertext", u16s_to_le(&ct))] }
        }
        "rc4" => {
            let s = random(256);
            let (ks, _) = rc4_keystream(s.clone().try_into().expect("256 bytes"), RC4_DROP, 32);
            Case { inputs: vec![("plaintext", s)], expected: vec![("ciphertext", ks)] }
        }
        "aes" => {
            let (pt, rk) = (random(16), random(176));
            let pt16: [u8; 16] = pt.clone().try_into().expect("16 bytes");
            let rk176: [u8; 176] = rk.clone().try_into().expect("176 bytes");
            let mut whitened = pt16;
            for (b, k) in whitened.iter_mut().zip(&rk176) {
                *b ^= k;
            }
            Case {
                inputs: vec![("plaintext", pt), ("key", rk)],
                expected: vec![
                    ("ciphertext", aes::full_rounds(whitened, &rk176, 1, 9).to_vec()),
                    ("result", aes::encrypt_block(&pt16, &rk176).to_vec()),
                ],
            }
        }
        "arx_hash" => {
            let msg = random(32);
            let m: [u32; 8] = words_le(&msg).try_into().expect("eight words");
            let work = arx_rounds(std::array::from_fn(|i| ARX_IV[i] ^ m[i]), ARX_ROUNDS);
            Case {
                inputs: vec![("message", msg)],
                expected: vec![("ciphertext", words_to_le(&work)), ("digest", words_to_le(&arx_hash(m)))],
            }
        }
        "classic_hash" => {
            let (h, w) = (random(20), random(80));
            let hw: [u32; 5] = words_le(&h).try_into().expect("five words");
            let ww: [u32; CLASSIC_ROUNDS] = words_le(&w).try_into().expect("twenty words");
            let out = classic_hash_rounds(hw, &ww);
            Case { inputs: vec![("state", h), ("message", w)], expected: vec![("state", words_to_le(&out))] }
        }
        "crc32" => {
            let data = random(64);
            let crc = crc32(&data);
            Case {
                inputs: vec![("plaintext", data)],
                expected: vec![("result", crc.to_le_bytes().to_vec()), ("state", (!crc).to_le_bytes().to_vec())],
            }
        }
        "rle" => {
            // A four-symbol alphabet gives runs of useful length.
            let data: Vec<u8> = random(64).into_iter().map(|b| b % 4).collect();
            let mut out = rle_encode(&data);
            out.resize(128, 0);
            Case { inputs: vec![("plaintext", data)], expected: vec![("ciphertext", out)] }
        }
        "checksum" => {
            let data = random(64);
            let (s1, s2) = checksum16(&data);
            let sums = [s1.to_le_bytes(), s2.to_le_bytes()].concat();
            Case { inputs: vec![("plaintext", data)], expected: vec![("ciphertext", sums)] }
        }
        "memcpy" => {
            let data = random(64);
            Case { inputs: vec![("plaintext", data.clone())], expected: vec![("ciphertext", data)] }
        }
        "base64" => {
            let data = random(48);
            let enc = base64_encode(&data);
            Case { inputs: vec![("plaintext", data)], expected: vec![("ciphertext", enc)] }
        }
        "matmul" => {
            let (a, b) = (random(24), random(32));
            let aw = words_le(&a);
            let bw = words_le(&b);
            let am: [[i32; 2]; 3] = std::array::from_fn(|i| std::array::from_fn(|k| aw[2 * i + k] as i32));
            let bm: [[i32; 4]; 2] = std::array::from_fn(|k| std::array::from_fn(|j| bw[4 * k + j] as i32));
            let res: Vec<u32> = matmul(&am, &bm).iter().flatten().map(|&v| v as u32).collect();
            Case { inputs: vec![("plaintext", a), ("key", b)], expected: vec![("ciphertext", words_to_le(&res))] }
        }
        "compress_block" => {
            let (block, state) = (random(16), random(16));
            let mut st = four(&state);
            compress_block(&mut st, &four(&block));
            Case { inputs: vec![("plaintext", block), ("state", state)], expected: vec![("state", words_to_le(&st))] }
        }
        _ => return None,
    };
    Some(case)
}

/// Output of a cipher program's loop alone, started from the loop-entry
/// contents of its plaintext and key buffers.
pub fn cipher_loop_output(program: &str, plaintext: &[u8], key: &[u8]) -> Option<Vec<u8>> {
    Some(match program {
        "xtea" => words_to_le(&xtea_encrypt(two(plaintext), four(key), 32)),
        "tea" => words_to_le(&tea_encrypt(two(plaintext), four(key))),
        "speck" => {
            let p = u16s_le(plaintext);
            let k = u16s_le(key);
            u16s_to_le(&speck32_64([p[0], p[1]], [k[0], k[1], k[2], k[3]], SPECK_ROUNDS).0)
        }
        "rc4" => rc4_keystream(plaintext.try_into().ok()?, RC4_DROP, 32).0,
        "aes" => aes::full_rounds(plaintext.try_into().ok()?, key.try_into().ok()?, 1, 9).to_vec(),
        _ => return None,
    })
}

/// Cipher programs with a loop-level oracle.
pub const CIPHERS: [&str; 5] = ["xtea", "tea", "speck", "rc4", "aes"];
