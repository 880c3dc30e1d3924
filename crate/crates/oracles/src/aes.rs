//! Byte-oriented AES-128. The S-box is computed from the field inverse and
//! the affine map rather than copied from a table.

fn xtime(a: u8) -> u8 {
    (a << 1) ^ if a & 0x80 != 0 { 0x1b } else { 0 }
}

pub fn gmul(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0;
    while b != 0 {
        if b & 1 != 0 {
            p ^= a;
        }
        a = xtime(a);
        b >>= 1;
    }
    p
}

pub fn sbox() -> [u8; 256] {
    std::array::from_fn(|x| {
        let x = x as u8;
        let inv = if x == 0 { 0 } else { (1..=255u8).find(|&y| gmul(x, y) == 1).expect("field inverse") };
        inv ^ inv.rotate_left(1) ^ inv.rotate_left(2) ^ inv.rotate_left(3) ^ inv.rotate_left(4) ^ 0x63
    })
}

pub fn expand_key(key: &[u8; 16]) -> [u8; 176] {
    let s = sbox();
    let mut w = [0u8; 176];
    w[..16].copy_from_slice(key);
    let mut rcon = 1u8;
    for i in 4..44 {
        let mut t = [w[4 * i - 4], w[4 * i - 3], w[4 * i - 2], w[4 * i - 1]];
        if i % 4 == 0 {
            t = [s[t[1] as usize] ^ rcon, s[t[2] as usize], s[t[3] as usize], s[t[0] as usize]];
            rcon = xtime(rcon);
        }
        for k in 0..4 {
            w[4 * i + k] = w[4 * i - 16 + k] ^ t[k];
        }
    }
    w
}

fn sub_shift(state: &[u8; 16], s: &[u8; 256]) -> [u8; 16] {
    // Byte (row r, column c) lives at 4c + r.
    std::array::from_fn(|idx| {
        let (c, r) = (idx / 4, idx % 4);
        s[state[4 * ((c + r) % 4) + r] as usize]
    })
}

fn mix_columns(state: &mut [u8; 16]) {
    for c in 0..4 {
        let a: [u8; 4] = state[4 * c..4 * c + 4].try_into().expect("column");
        for r in 0..4 {
            state[4 * c + r] = gmul(a[r], 2) ^ gmul(a[(r + 1) % 4], 3) ^ a[(r + 2) % 4] ^ a[(r + 3) % 4];
        }
    }
}

fn add_round_key(state: &mut [u8; 16], rk: &[u8]) {
    for (b, k) in state.iter_mut().zip(rk) {
        *b ^= k;
    }
}

/// Full rounds `first..=last` (each SubBytes, ShiftRows, MixColumns,
/// AddRoundKey) on an already-whitened state.
pub fn full_rounds(mut state: [u8; 16], rk: &[u8; 176], first: usize, last: usize) -> [u8; 16] {
    let s = sbox();
    for round in first..=last {
        state = sub_shift(&state, &s);
        mix_columns(&mut state);
        add_round_key(&mut state, &rk[16 * round..16 * round + 16]);
    }
    state
}

pub fn encrypt_block(pt: &[u8; 16], rk: &[u8; 176]) -> [u8; 16] {
    let mut state = *pt;
    add_round_key(&mut state, &rk[..16]);
    let mut state = full_rounds(state, rk, 1, 9);
    state = sub_shift(&state, &sbox());
    add_round_key(&mut state, &rk[160..]);
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(s: &str) -> Vec<u8> {
        (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
    }

    #[test]
    fn sbox_spot_values() {
        let s = sbox();
        assert_eq!((s[0x00], s[0x01], s[0x53], s[0xff]), (0x63, 0x7c, 0xed, 0x16));
    }

    #[test]
    fn fips197_appendix_b() {
        let key: [u8; 16] = hex("2b7e151628aed2a6abf7158809cf4f3c").try_into().unwrap();
        let pt: [u8; 16] = hex("3243f6a8885a308d313198a2e0370734").try_into().unwrap();
        let rk = expand_key(&key);
        assert_eq!(&rk[160..], &hex("d014f9a8c9ee2589e13f0cc8b6630ca6")[..]);
        assert_eq!(encrypt_block(&pt, &rk).to_vec(), hex("3925841d02dc09fbdc118597196a0b32"));
    }

    #[test]
    fn fips197_appendix_c1() {
        let key: [u8; 16] = hex("000102030405060708090a0b0c0d0e0f").try_into().unwrap();
        let pt: [u8; 16] = hex("00112233445566778899aabbccddeeff").try_into().unwrap();
        let ct = encrypt_block(&pt, &expand_key(&key));
        assert_eq!(ct.to_vec(), hex("69c4e0d86a7b0430d8cdb78070b4c55a"));
    }
}
