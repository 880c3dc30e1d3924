//! The micro-ISA: a 32-bit register machine with fixed-width 8-byte instructions.
//!
//! Encoding (little-endian immediate):
//!
//! ```text
//! byte 0    opcode
//! byte 1    destination / stored register
//! byte 2    first source register or memory base register
//! byte 3    second source register, or 0x80 when the operand is the immediate
//! byte 4..8 32-bit immediate, signed displacement or branch target
//! ```
//!
//! Fields an instruction does not use must be zero; decoding rejects anything
//! else so that every byte sequence has at most one meaning.

use std::fmt;

use thiserror::Error;

/// Number of general registers.
pub const NUM_REGS: usize = 16;
/// Register used as the call stack pointer by `call`/`ret`.
pub const SP: Reg = Reg(15);
/// Width of every encoded instruction.
pub const INSN_BYTES: u32 = 8;

const IMM_FLAG: u8 = 0x80;

/// A general register index in `0..16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: u8) -> Option<Self> {
        (usize::from(index) < NUM_REGS).then_some(Self(index))
    }

    #[inline]
    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Condition flags. Each conditional branch tests exactly one of them.
pub mod flags {
    pub const ZERO: u8 = 0b001;
    pub const CARRY: u8 = 0b010;
    pub const SIGN: u8 = 0b100;
    pub const MASK: u8 = 0b111;
}

/// Access width of a load or store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Width {
    B1,
    B2,
    B4,
}

impl Width {
    pub fn bytes(self) -> u8 {
        match self {
            Width::B1 => 1,
            Width::B2 => 2,
            Width::B4 => 4,
        }
    }

    pub fn from_bytes(n: u8) -> Option<Self> {
        match n {
            1 => Some(Width::B1),
            2 => Some(Width::B2),
            4 => Some(Width::B4),
            _ => None,
        }
    }

    pub fn mask(self) -> u32 {
        match self {
            Width::B1 => 0xff,
            Width::B2 => 0xffff,
            Width::B4 => 0xffff_ffff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Xor,
    And,
    Or,
    Shl,
    Shr,
    Rol,
}

impl AluOp {
    pub const ALL: [AluOp; 9] =
        [AluOp::Add, AluOp::Sub, AluOp::Mul, AluOp::Xor, AluOp::And, AluOp::Or, AluOp::Shl, AluOp::Shr, AluOp::Rol];

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Xor => "xor",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Shl => "shl",
            AluOp::Shr => "shr",
            AluOp::Rol => "rol",
        }
    }

    /// Computes the result and the carry flag.
    #[inline]
    pub fn apply(self, a: u32, b: u32) -> (u32, bool) {
        match self {
            AluOp::Add => a.overflowing_add(b),
            AluOp::Sub => a.overflowing_sub(b),
            AluOp::Mul => (a.wrapping_mul(b), false),
            AluOp::Xor => (a ^ b, false),
            AluOp::And => (a & b, false),
            AluOp::Or => (a | b, false),
            AluOp::Shl => {
                let s = b & 31;
                let carry = s != 0 && (a >> (32 - s)) & 1 == 1;
                (a << s, carry)
            }
            AluOp::Shr => {
                let s = b & 31;
                let carry = s != 0 && (a >> (s - 1)) & 1 == 1;
                (a >> s, carry)
            }
            AluOp::Rol => (a.rotate_left(b & 31), false),
        }
    }

    fn code(self) -> u8 {
        0x20 + self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Zero,
    NotZero,
    Carry,
    NotCarry,
    Sign,
    NotSign,
}

impl Cond {
    pub const ALL: [Cond; 6] = [Cond::Zero, Cond::NotZero, Cond::Carry, Cond::NotCarry, Cond::Sign, Cond::NotSign];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Zero => "jz",
            Cond::NotZero => "jnz",
            Cond::Carry => "jc",
            Cond::NotCarry => "jnc",
            Cond::Sign => "js",
            Cond::NotSign => "jns",
        }
    }

    #[inline]
    pub fn holds(self, f: u8) -> bool {
        match self {
            Cond::Zero => f & flags::ZERO != 0,
            Cond::NotZero => f & flags::ZERO == 0,
            Cond::Carry => f & flags::CARRY != 0,
            Cond::NotCarry => f & flags::CARRY == 0,
            Cond::Sign => f & flags::SIGN != 0,
            Cond::NotSign => f & flags::SIGN == 0,
        }
    }

    fn code(self) -> u8 {
        0x40 + self as u8
    }
}

/// Second operand of an ALU or compare instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(u32),
}

/// `base + disp` memory operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemOperand {
    pub base: Reg,
    pub disp: i32,
}

impl MemOperand {
    #[inline]
    pub fn effective(&self, regs: &[u32; NUM_REGS]) -> u32 {
        regs[self.base.index()].wrapping_add(self.disp as u32)
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.disp {
            0 => write!(f, "[{}]", self.base),
            d if d < 0 => write!(f, "[{}-{:#x}]", self.base, (d as i64).unsigned_abs()),
            d => write!(f, "[{}+{:#x}]", self.base, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Halt,
    Li { rd: Reg, imm: u32 },
    Mov { rd: Reg, rs: Reg },
    Load { width: Width, rd: Reg, mem: MemOperand },
    Store { width: Width, rs: Reg, mem: MemOperand },
    Alu { op: AluOp, rd: Reg, ra: Reg, rb: Operand },
    Cmp { ra: Reg, rb: Operand },
    Branch { cond: Cond, target: u32 },
    Jmp { target: u32 },
    JmpReg { rs: Reg },
    Call { target: u32 },
    Ret,
}

/// How an instruction transfers control; used to partition traces into blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlKind {
    None,
    Conditional,
    Jump,
    Call,
    Ret,
    Halt,
}

impl ControlKind {
    /// Whether a record with this control kind terminates a basic block.
    pub fn ends_block(self) -> bool {
        matches!(self, ControlKind::Conditional | ControlKind::Jump | ControlKind::Call | ControlKind::Ret)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("register index {0} out of range")]
    BadRegister(u8),
    #[error("non-canonical encoding: unused field is non-zero")]
    NonCanonical,
}

const OP_HALT: u8 = 0x00;
const OP_LI: u8 = 0x01;
const OP_MOV: u8 = 0x02;
const OP_LD8: u8 = 0x10;
const OP_LD16: u8 = 0x11;
const OP_LD32: u8 = 0x12;
const OP_ST8: u8 = 0x18;
const OP_ST16: u8 = 0x19;
const OP_ST32: u8 = 0x1a;
const OP_CMP: u8 = 0x30;
const OP_JMP: u8 = 0x48;
const OP_JMPR: u8 = 0x49;
const OP_CALL: u8 = 0x4a;
const OP_RET: u8 = 0x4b;

fn width_code(base: u8, width: Width) -> u8 {
    base + match width {
        Width::B1 => 0,
        Width::B2 => 1,
        Width::B4 => 2,
    }
}

fn operand_fields(op: Operand) -> (u8, u32) {
    match op {
        Operand::Reg(r) => (r.0, 0),
        Operand::Imm(v) => (IMM_FLAG, v),
    }
}

impl Instruction {
    pub fn encode(&self) -> [u8; 8] {
        let (op, b1, b2, b3, imm): (u8, u8, u8, u8, u32) = match *self {
            Instruction::Halt => (OP_HALT, 0, 0, 0, 0),
            Instruction::Li { rd, imm } => (OP_LI, rd.0, 0, 0, imm),
            Instruction::Mov { rd, rs } => (OP_MOV, rd.0, rs.0, 0, 0),
            Instruction::Load { width, rd, mem } => (width_code(OP_LD8, width), rd.0, mem.base.0, 0, mem.disp as u32),
            Instruction::Store { width, rs, mem } => (width_code(OP_ST8, width), rs.0, mem.base.0, 0, mem.disp as u32),
            Instruction::Alu { op, rd, ra, rb } => {
                let (b3, imm) = operand_fields(rb);
                (op.code(), rd.0, ra.0, b3, imm)
            }
            Instruction::Cmp { ra, rb } => {
                let (b3, imm) = operand_fields(rb);
                (OP_CMP, 0, ra.0, b3, imm)
            }
            Instruction::Branch { cond, target } => (cond.code(), 0, 0, 0, target),
            Instruction::Jmp { target } => (OP_JMP, 0, 0, 0, target),
            Instruction::JmpReg { rs } => (OP_JMPR, 0, rs.0, 0, 0),
            Instruction::Call { target } => (OP_CALL, 0, 0, 0, target),
            Instruction::Ret => (OP_RET, 0, 0, 0, 0),
        };
        let i = imm.to_le_bytes();
        [op, b1, b2, b3, i[0], i[1], i[2], i[3]]
    }

    pub fn decode(bytes: [u8; 8]) -> Result<Self, DecodeError> {
        let [op, b1, b2, b3, i0, i1, i2, i3] = bytes;
        let imm = u32::from_le_bytes([i0, i1, i2, i3]);
        let reg = |b: u8| Reg::new(b).ok_or(DecodeError::BadRegister(b));
        let zero = |fields: &[u8]| {
            if fields.iter().all(|&b| b == 0) {
                Ok(())
            } else {
                Err(DecodeError::NonCanonical)
            }
        };
        let no_imm = || if imm == 0 { Ok(()) } else { Err(DecodeError::NonCanonical) };
        let operand = || -> Result<Operand, DecodeError> {
            if b3 == IMM_FLAG {
                Ok(Operand::Imm(imm))
            } else {
                no_imm()?;
                Ok(Operand::Reg(reg(b3)?))
            }
        };

        let insn = match op {
            OP_HALT => {
                zero(&[b1, b2, b3])?;
                no_imm()?;
                Instruction::Halt
            }
            OP_LI => {
                zero(&[b2, b3])?;
                Instruction::Li { rd: reg(b1)?, imm }
            }
            OP_MOV => {
                zero(&[b3])?;
                no_imm()?;
                Instruction::Mov { rd: reg(b1)?, rs: reg(b2)? }
            }
            OP_LD8 | OP_LD16 | OP_LD32 => {
                zero(&[b3])?;
                let width = [Width::B1, Width::B2, Width::B4][usize::from(op - OP_LD8)];
                Instruction::Load { width, rd: reg(b1)?, mem: MemOperand { base: reg(b2)?, disp: imm as i32 } }
            }
            OP_ST8 | OP_ST16 | OP_ST32 => {
                zero(&[b3])?;
                let width = [Width::B1, Width::B2, Width::B4][usize::from(op - OP_ST8)];
                Instruction::Store { width, rs: reg(b1)?, mem: MemOperand { base: reg(b2)?, disp: imm as i32 } }
            }
            0x20..=0x28 => {
                Instruction::Alu { op: AluOp::ALL[usize::from(op - 0x20)], rd: reg(b1)?, ra: reg(b2)?, rb: operand()? }
            }
            OP_CMP => {
                zero(&[b1])?;
                Instruction::Cmp { ra: reg(b2)?, rb: operand()? }
            }
            0x40..=0x45 => {
                zero(&[b1, b2, b3])?;
                Instruction::Branch { cond: Cond::ALL[usize::from(op - 0x40)], target: imm }
            }
            OP_JMP => {
                zero(&[b1, b2, b3])?;
                Instruction::Jmp { target: imm }
            }
            OP_JMPR => {
                zero(&[b1, b3])?;
                no_imm()?;
                Instruction::JmpReg { rs: reg(b2)? }
            }
            OP_CALL => {
                zero(&[b1, b2, b3])?;
                Instruction::Call { target: imm }
            }
            OP_RET => {
                zero(&[b1, b2, b3])?;
                no_imm()?;
                Instruction::Ret
            }
            other => return Err(DecodeError::UnknownOpcode(other)),
        };
        Ok(insn)
    }

    pub fn control_kind(&self) -> ControlKind {
        match self {
            Instruction::Branch { .. } => ControlKind::Conditional,
            Instruction::Jmp { .. } | Instruction::JmpReg { .. } => ControlKind::Jump,
            Instruction::Call { .. } => ControlKind::Call,
            Instruction::Ret => ControlKind::Ret,
            Instruction::Halt => ControlKind::Halt,
            _ => ControlKind::None,
        }
    }

    /// The explicit memory operand, if any (`call`/`ret` stack traffic excluded).
    pub fn mem_operand(&self) -> Option<MemOperand> {
        match self {
            Instruction::Load { mem, .. } | Instruction::Store { mem, .. } => Some(*mem),
            _ => None,
        }
    }

    pub fn is_bitwise_and_or(&self) -> bool {
        matches!(self, Instruction::Alu { op: AluOp::And | AluOp::Or, .. })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let operand = |op: &Operand| match op {
            Operand::Reg(r) => r.to_string(),
            Operand::Imm(v) => format!("{v:#x}"),
        };
        match self {
            Instruction::Halt => write!(f, "halt"),
            Instruction::Li { rd, imm } => write!(f, "li {rd}, {imm:#x}"),
            Instruction::Mov { rd, rs } => write!(f, "mov {rd}, {rs}"),
            Instruction::Load { width, rd, mem } => write!(f, "ld{} {rd}, {mem}", width.bytes() * 8),
            Instruction::Store { width, rs, mem } => write!(f, "st{} {mem}, {rs}", width.bytes() * 8),
            Instruction::Alu { op, rd, ra, rb } => {
                write!(f, "{} {rd}, {ra}, {}", op.mnemonic(), operand(rb))
            }
            Instruction::Cmp { ra, rb } => write!(f, "cmp {ra}, {}", operand(rb)),
            Instruction::Branch { cond, target } => write!(f, "{} {target:#x}", cond.mnemonic()),
            Instruction::Jmp { target } => write!(f, "jmp {target:#x}"),
            Instruction::JmpReg { rs } => write!(f, "jmp {rs}"),
            Instruction::Call { target } => write!(f, "call {target:#x}"),
            Instruction::Ret => write!(f, "ret"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reg() -> impl Strategy<Value = Reg> {
        (0u8..16).prop_map(|r| Reg::new(r).unwrap())
    }

    fn operand() -> impl Strategy<Value = Operand> {
        prop_oneof![reg().prop_map(Operand::Reg), any::<u32>().prop_map(Operand::Imm)]
    }

    fn width() -> impl Strategy<Value = Width> {
        prop_oneof![Just(Width::B1), Just(Width::B2), Just(Width::B4)]
    }

    fn mem() -> impl Strategy<Value = MemOperand> {
        (reg(), any::<i32>()).prop_map(|(base, disp)| MemOperand { base, disp })
    }

    fn instruction() -> impl Strategy<Value = Instruction> {
        prop_oneof![
            Just(Instruction::Halt),
            Just(Instruction::Ret),
            (reg(), any::<u32>()).prop_map(|(rd, imm)| Instruction::Li { rd, imm }),
            (reg(), reg()).prop_map(|(rd, rs)| Instruction::Mov { rd, rs }),
            (width(), reg(), mem()).prop_map(|(width, rd, mem)| Instruction::Load { width, rd, mem }),
            (width(), reg(), mem()).prop_map(|(width, rs, mem)| Instruction::Store { width, rs, mem }),
            (0usize..9, reg(), reg(), operand()).prop_map(|(o, rd, ra, rb)| Instruction::Alu {
                op: AluOp::ALL[o],
                rd,
                ra,
                rb
            }),
            (reg(), operand()).prop_map(|(ra, rb)| Instruction::Cmp { ra, rb }),
            (0usize..6, any::<u32>()).prop_map(|(c, target)| Instruction::Branch { cond: Cond::ALL[c], target }),
            any::<u32>().prop_map(|target| Instruction::Jmp { target }),
            reg().prop_map(|rs| Instruction::JmpReg { rs }),
            any::<u32>().prop_map(|target| Instruction::Call { target }),
        ]
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(insn in instruction()) {
            prop_assert_eq!(Instruction::decode(insn.encode()), Ok(insn));
        }

        #[test]
        fn decoded_bytes_reencode_identically(bytes in any::<[u8; 8]>()) {
            if let Ok(insn) = Instruction::decode(bytes) {
                prop_assert_eq!(insn.encode(), bytes);
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(Instruction::decode([0xff, 0, 0, 0, 0, 0, 0, 0]), Err(DecodeError::UnknownOpcode(0xff)));
        assert_eq!(Instruction::decode([OP_MOV, 16, 0, 0, 0, 0, 0, 0]), Err(DecodeError::BadRegister(16)));
        assert_eq!(Instruction::decode([OP_HALT, 0, 0, 0, 1, 0, 0, 0]), Err(DecodeError::NonCanonical));
    }

    #[test]
    fn shifts_report_last_bit_out() {
        assert_eq!(AluOp::Shl.apply(0x8000_0001, 1), (2, true));
        assert_eq!(AluOp::Shr.apply(0b11, 1), (1, true));
        assert_eq!(AluOp::Shr.apply(0b10, 0), (2, false));
        assert_eq!(AluOp::Rol.apply(0x8000_0000, 1), (1, false));
        assert_eq!(AluOp::Sub.apply(1, 2), (u32::MAX, true));
    }
}
