#!/usr/bin/env python3
"""Fill the generated regions of the corpus assembly sources.

Each region sits between `; generated: NAME begin` and `; generated: NAME end`
lines and is rewritten in place. Running the script twice is a no-op.
"""

import pathlib
import re
import sys

CORPUS = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "corpus"


def xtime(a):
    a <<= 1
    return (a ^ 0x11B) if a & 0x100 else a


def gmul(a, b):
    p = 0
    while b:
        if b & 1:
            p ^= a
        a = xtime(a)
        b >>= 1
    return p


def sbox():
    out = []
    for x in range(256):
        inv = 0 if x == 0 else next(y for y in range(1, 256) if gmul(x, y) == 1)
        s = inv
        for k in range(1, 5):
            s ^= ((inv << k) | (inv >> (8 - k))) & 0xFF
        out.append(s ^ 0x63)
    return out


def expand_key(key):
    s = sbox()
    w = list(key)
    rcon = 1
    for i in range(4, 44):
        t = w[4 * i - 4 : 4 * i]
        if i % 4 == 0:
            t = [s[t[1]] ^ rcon, s[t[2]], s[t[3]], s[t[0]]]
            rcon = xtime(rcon)
        w += [w[4 * i - 16 + k] ^ t[k] for k in range(4)]
    return w


def word_rows(words, per_row=8, indent="        "):
    return [
        indent + ".word " + ", ".join(f"0x{w:08x}" for w in words[i : i + per_row])
        for i in range(0, len(words), per_row)
    ]


def byte_rows(data, per_row=16, indent="        "):
    return [
        indent + ".byte " + ", ".join(f"0x{b:02x}" for b in data[i : i + per_row])
        for i in range(0, len(data), per_row)
    ]


def le(bs):
    return bs[0] | bs[1] << 8 | bs[2] << 16 | bs[3] << 24


def aes_regions():
    s = sbox()
    # Byte k of table t holds the MixColumns coefficient for output row k
    # when the input byte comes from row t.
    coeff = [2, 1, 1, 3]
    tables = []
    for t in range(4):
        col = [coeff[(k - t) % 4] for k in range(4)]
        tables.append([le([gmul(s[x], c) for c in col]) for x in range(256)])
    table_lines = []
    for t, words in enumerate(tables):
        table_lines.append(f"te{t}:")
        table_lines += word_rows(words)
    rk = expand_key(list(range(16)))
    whiten = []
    for w in range(4):
        whiten += [
            f"        ld32 r1, [r13+{4 * w}]",
            f"        ld32 r2, [r12+{4 * w}]",
            "        xor  r1, r1, r2",
            f"        st32 [r13+{4 * w}], r1",
        ]
    rnd = []
    for c in range(4):
        t = f"r{1 + c}"
        for row in range(4):
            src = 4 * ((c + row) % 4) + row
            rnd += [f"        ld8  r5, [r13+{src}]", "        shl  r5, r5, 2"]
            if row == 0:
                rnd.append(f"        ld32 {t}, [r5+te0]")
            else:
                rnd += [f"        ld32 r6, [r5+te{row}]", f"        xor  {t}, {t}, r6"]
        rnd += [f"        ld32 r6, [r12+{4 * c}]", f"        xor  {t}, {t}, r6"]
    rnd += [f"        st32 [r13+{4 * c}], r{1 + c}" for c in range(4)]
    final = []
    for c in range(4):
        for row in range(4):
            src = 4 * ((c + row) % 4) + row
            final += [
                f"        ld8  r5, [r13+{src}]",
                "        shl  r5, r5, 2",
                "        ld8  r5, [r5+te0+1]",
                f"        ld8  r6, [r12+{4 * c + row}]",
                "        xor  r5, r5, r6",
                f"        st8  [r10+{4 * c + row}], r5",
            ]
    return {
        "aes_tables": table_lines,
        "aes_round_keys": byte_rows(rk),
        "aes_whiten": whiten,
        "aes_round": rnd,
        "aes_final": final,
    }


def crc_regions():
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ 0xEDB88320 if c & 1 else c >> 1
        table.append(c)
    return {"crc_table": word_rows(table)}


def rc4_regions():
    key = b"Key"
    st = list(range(256))
    j = 0
    for i in range(256):
        j = (j + st[i] + key[i % len(key)]) & 0xFF
        st[i], st[j] = st[j], st[i]
    return {"rc4_state": byte_rows(st)}


def arx_regions():
    init = []
    for w in range(8):
        init += [
            f"        ld32 r{w}, [r9+{4 * w}]",
            f"        ld32 r11, [r10+{4 * w}]",
            f"        xor  r{w}, r{w}, r11",
            f"        st32 [r8+{4 * w}], r{w}",
        ]
    rnd = [f"        ld32 r{w}, [r8+{4 * w}]" for w in range(8)]
    for a, b, c, d in [(0, 2, 4, 6), (1, 3, 5, 7), (0, 3, 4, 7), (1, 2, 5, 6)]:
        for x, y, z, rot in [(a, b, d, 16), (c, d, b, 12), (a, b, d, 8), (c, d, b, 7)]:
            rnd += [
                f"        add  r{x}, r{x}, r{y}",
                f"        xor  r{z}, r{z}, r{x}",
                f"        rol  r{z}, r{z}, {rot}",
            ]
    rnd += [f"        st32 [r8+{4 * w}], r{w}" for w in range(8)]
    final = ["        li   r10, digest"]
    for w in range(8):
        final += [
            f"        ld32 r{w}, [r8+{4 * w}]",
            f"        ld32 r11, [r9+{4 * w}]",
            f"        add  r{w}, r{w}, r11",
            f"        st32 [r10+{4 * w}], r{w}",
        ]
    return {"arx_init": init, "arx_round": rnd, "arx_final": final}


FILES = {
    "aes.asm": aes_regions,
    "crc32.asm": crc_regions,
    "rc4.asm": rc4_regions,
    "arx_hash.asm": arx_regions,
}


def fill(text, regions):
    for name, lines in regions.items():
        pattern = re.compile(
            rf"(; generated: {name} begin\n).*?(; generated: {name} end\n)", re.S
        )
        body = "".join(line + "\n" for line in lines)
        text, n = pattern.subn(lambda m: m.group(1) + body + m.group(2), text)
        if n != 1:
            sys.exit(f"region {name} not found exactly once")
    return text


def main():
    for name, make in FILES.items():
        path = CORPUS / name
        old = path.read_text()
        new = fill(old, make())
        if new != old:
            path.write_text(new)
            print(f"updated {path}")


if __name__ == "__main__":
    main()
