use std::fmt::Write;

use super::*;

fn imm(v: u64) -> String {
    let s = v as i64;
    if (-(1 << 31)..0).contains(&s) {
        format!("-{}", s.unsigned_abs())
    } else if v < 0x1_0000 {
        v.to_string()
    } else {
        format!("{v:#x}")
    }
}

fn operand(o: &Operand) -> String {
    match o {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => imm(*v),
        Operand::Sp => "sp".into(),
    }
}

fn mem(m: &MemOperand) -> String {
    let base = match m.base {
        Base::Reg(r) => r.to_string(),
        Base::Sp => "sp".into(),
    };
    let mut s = format!("[{base}");
    match m.offset {
        0 => {}
        o if o < 0 => write!(s, "-{}", imm(o.unsigned_abs())).unwrap(),
        o => write!(s, "+{}", imm(o as u64)).unwrap(),
    }
    s.push(']');
    if m.width != 8 {
        write!(s, ":{}", m.width).unwrap();
    }
    s
}

/// Assembly text of one operation, without site prefix.
pub fn op_text(op: &Op) -> String {
    let args: Vec<String> = match op {
        Op::Load { dst, mem: m } => vec![dst.to_string(), mem(m)],
        Op::Store { mem: m, src } => vec![mem(m), operand(src)],
        Op::Mov { dst, src } => vec![dst.to_string(), operand(src)],
        Op::Alu { dst, a, b, .. } => vec![dst.to_string(), operand(a), operand(b)],
        Op::Cmp { a, b } | Op::Test { a, b } => vec![operand(a), operand(b)],
        Op::Select { dst, cond, a, b } => vec![
            dst.to_string(),
            cond.mnemonic().into(),
            operand(a),
            operand(b),
        ],
        Op::Jmp { target } => vec![target.clone()],
        Op::BrCond {
            cond,
            taken,
            not_taken,
        } => vec![cond.mnemonic().into(), taken.clone(), not_taken.clone()],
        Op::Call { func } => vec![func.clone()],
        Op::Ret | Op::Halt => vec![],
        Op::SaveFlags { dst } | Op::Rdrand { dst } => vec![dst.to_string()],
        Op::RestoreFlags { src } => vec![src.to_string()],
        Op::PrfEnc { dst, key } => vec![dst.to_string(), key.to_string()],
        Op::HeapAlloc { dst, size } => vec![dst.to_string(), operand(size)],
        Op::TaintLabel { mem: m, len } => vec![mem(m), imm(*len)],
    };
    if args.is_empty() {
        op.mnemonic().to_string()
    } else {
        format!("{} {}", op.mnemonic(), args.join(", "))
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{} {}", self.site, op_text(&self.op))
    }
}

/// Renders a program in the textual format accepted by [`parse_program`].
pub fn print_program(p: &Program) -> String {
    let mut s = String::new();
    writeln!(s, ".entry {}", p.entry).unwrap();
    for sp in &p.secrets {
        writeln!(s, ".secret {:#x}, {}", sp.addr, sp.len).unwrap();
    }
    if let Some(o) = p.output {
        writeln!(s, ".output {:#x}, {}", o.addr, o.len).unwrap();
    }
    for img in &p.images {
        let kw = match img.kind {
            ImageKind::Heap => ".heap",
            ImageKind::Data => ".data",
        };
        write!(s, "{kw} {:#x}, {}", img.addr, img.bytes.len()).unwrap();
        let used = img.bytes.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
        for b in &img.bytes[..used] {
            write!(s, ", {b}").unwrap();
        }
        s.push('\n');
    }
    let mut index: u32 = 0;
    for f in &p.functions {
        writeln!(s, "\nfunc {} {{", f.name).unwrap();
        for sl in &f.slots {
            writeln!(s, "    .slot {}, {}, {}", sl.id, sl.offset, sl.size).unwrap();
        }
        for b in &f.blocks {
            writeln!(s, "{}:", b.label).unwrap();
            for i in &b.instrs {
                if i.site == index {
                    writeln!(s, "    {}", op_text(&i.op)).unwrap();
                } else {
                    writeln!(s, "    @{} {}", i.site, op_text(&i.op)).unwrap();
                }
                index += 1;
            }
        }
        s.push_str("}\n");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn immediates_round_trip() {
        for v in [
            0u64,
            1,
            0xFFFF,
            0x1_0000,
            u64::MAX,
            (-(1i64 << 31)) as u64,
            i64::MIN as u64,
            1 << 63,
        ] {
            let src = format!(
                "func f {{\nentry:\n mov g0, {}\n store [g1{}], 1\n}}",
                imm(v),
                {
                    let o = v as i64;
                    if o < 0 {
                        format!("-{}", imm(o.unsigned_abs()))
                    } else {
                        format!("+{}", imm(v))
                    }
                }
            );
            let p = parse_program(&src).unwrap();
            let ins: Vec<_> = p.instructions().collect();
            assert_eq!(
                ins[0].op,
                Op::Mov {
                    dst: Reg::gpr(0),
                    src: Operand::Imm(v)
                },
                "{src}"
            );
            assert_eq!(ins[1].op.mem().unwrap().offset, v as i64);
            assert_eq!(parse_program(&print_program(&p)).unwrap(), p);
        }
    }

    #[test]
    fn minimal_program_prints_back() {
        let p = parse_program("func f { entry: halt }").unwrap();
        let text = print_program(&p);
        let norm = |t: &str| t.split_whitespace().collect::<Vec<_>>().join(" ");
        assert_eq!(norm(&text), ".entry f func f { entry: halt }");
    }
}
