use std::collections::HashSet;

use super::*;
use crate::error::ParseError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(u64),
    Punct(char),
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$'
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    for (li, raw) in text.lines().enumerate() {
        let line = li + 1;
        let code = raw.split(';').next().unwrap_or("");
        let chars: Vec<char> = code.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c.is_whitespace() {
                i += 1;
            } else if is_ident_start(c) {
                let start = i;
                while i < chars.len() && is_ident_char(chars[i]) {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    line,
                    col,
                });
            } else if c.is_ascii_digit() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                let v = if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                    u64::from_str_radix(h, 16)
                } else {
                    s.parse::<u64>()
                }
                .map_err(|_| syntax(line, col, format!("bad number `{s}`")))?;
                out.push(Token {
                    tok: Tok::Num(v),
                    line,
                    col,
                });
            } else if ",:{}[]+-@".contains(c) {
                out.push(Token {
                    tok: Tok::Punct(c),
                    line,
                    col,
                });
                i += 1;
            } else {
                return Err(syntax(line, col, format!("unexpected character `{c}`")));
            }
        }
        out.push(Token {
            tok: Tok::Newline,
            line,
            col: chars.len() + 1,
        });
    }
    Ok(out)
}

/// Raw operand before opcode-specific interpretation.
#[derive(Debug, Clone)]
enum Raw {
    Reg(Reg),
    Sp,
    Imm(u64),
    Mem(MemOperand),
    Name(String),
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn peek_tok(&self) -> Option<&Tok> {
        self.peek().map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        match self.peek().or(self.toks.last()) {
            Some(t) => (t.line, t.col),
            None => (1, 1),
        }
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        let (l, c) = self.here();
        syntax(l, c, msg)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn skip_newlines(&mut self) {
        while self.peek_tok() == Some(&Tok::Newline) {
            self.pos += 1;
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if self.peek_tok() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat_punct(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    fn expect_ident(&mut self) -> Result<(String, usize, usize), ParseError> {
        match self.next() {
            Some(Token {
                tok: Tok::Ident(s),
                line,
                col,
            }) => Ok((s, line, col)),
            _ => {
                self.pos -= 1;
                Err(self.err("expected identifier"))
            }
        }
    }

    fn number(&mut self) -> Result<u64, ParseError> {
        let neg = self.eat_punct('-');
        match self.next() {
            Some(Token {
                tok: Tok::Num(v), ..
            }) => Ok(if neg { v.wrapping_neg() } else { v }),
            _ => {
                self.pos -= 1;
                Err(self.err("expected number"))
            }
        }
    }

    fn at_line_end(&self) -> bool {
        matches!(
            self.peek_tok(),
            None | Some(Tok::Newline) | Some(Tok::Punct('}'))
        )
    }

    fn mem_operand(&mut self) -> Result<MemOperand, ParseError> {
        let (name, line, col) = self.expect_ident()?;
        let base = if name == "sp" {
            Base::Sp
        } else {
            Base::Reg(
                Reg::parse(&name)
                    .ok_or_else(|| syntax(line, col, format!("bad base register `{name}`")))?,
            )
        };
        let mut offset = 0i64;
        if self.eat_punct('+') {
            offset = self.number()? as i64;
        } else if self.eat_punct('-') {
            offset = (self.number()? as i64).wrapping_neg();
        }
        self.expect_punct(']')?;
        let mut width = 8u8;
        if self.eat_punct(':') {
            let (l, c) = self.here();
            let w = self.number()?;
            if !matches!(w, 1 | 2 | 4 | 8) {
                return Err(syntax(l, c, format!("bad access width {w}")));
            }
            width = w as u8;
        }
        Ok(MemOperand {
            base,
            offset,
            width,
        })
    }

    fn raw_operand(&mut self) -> Result<Raw, ParseError> {
        match self.peek_tok().cloned() {
            Some(Tok::Punct('[')) => {
                self.pos += 1;
                Ok(Raw::Mem(self.mem_operand()?))
            }
            Some(Tok::Punct('-')) | Some(Tok::Num(_)) => Ok(Raw::Imm(self.number()?)),
            Some(Tok::Ident(s)) => {
                self.pos += 1;
                Ok(if s == "sp" {
                    Raw::Sp
                } else if let Some(r) = Reg::parse(&s) {
                    Raw::Reg(r)
                } else {
                    Raw::Name(s)
                })
            }
            _ => Err(self.err("expected operand")),
        }
    }

    fn operands(&mut self) -> Result<Vec<(Raw, usize, usize)>, ParseError> {
        let mut v = Vec::new();
        if self.at_line_end() {
            return Ok(v);
        }
        loop {
            let (l, c) = self.here();
            v.push((self.raw_operand()?, l, c));
            if !self.eat_punct(',') {
                break;
            }
        }
        if !self.at_line_end() {
            return Err(self.err("expected end of instruction"));
        }
        Ok(v)
    }

    /// Comma-separated numbers to end of line.
    fn number_list(&mut self) -> Result<Vec<u64>, ParseError> {
        let mut v = vec![self.number()?];
        while self.eat_punct(',') {
            v.push(self.number()?);
        }
        if !self.at_line_end() {
            return Err(self.err("expected end of directive"));
        }
        Ok(v)
    }
}

fn build_op(
    op: &str,
    line: usize,
    col: usize,
    args: Vec<(Raw, usize, usize)>,
) -> Result<Option<Op>, ParseError> {
    let n = args.len();
    let arity = |expected: &str| ParseError::Arity {
        line,
        col,
        op: op.to_string(),
        expected: expected.to_string(),
        found: n,
    };
    let bad = |(_, l, c): &(Raw, usize, usize), what: &str| {
        syntax(*l, *c, format!("`{op}` expects {what} here"))
    };
    let reg = |a: &(Raw, usize, usize)| match &a.0 {
        Raw::Reg(r) => Ok(*r),
        _ => Err(bad(a, "a register")),
    };
    let val = |a: &(Raw, usize, usize)| match &a.0 {
        Raw::Reg(r) => Ok(Operand::Reg(*r)),
        Raw::Imm(v) => Ok(Operand::Imm(*v)),
        Raw::Sp => Ok(Operand::Sp),
        _ => Err(bad(a, "a register or immediate")),
    };
    let mem = |a: &(Raw, usize, usize)| match &a.0 {
        Raw::Mem(m) => Ok(*m),
        _ => Err(bad(a, "a memory operand")),
    };
    let name = |a: &(Raw, usize, usize)| match &a.0 {
        Raw::Name(s) => Ok(s.clone()),
        Raw::Reg(r) => Ok(r.to_string()),
        Raw::Sp => Ok("sp".to_string()),
        _ => Err(bad(a, "a name")),
    };
    let cond = |a: &(Raw, usize, usize)| {
        let s = name(a)?;
        Cond::ALL
            .into_iter()
            .find(|c| c.mnemonic() == s)
            .ok_or_else(|| bad(a, "a condition"))
    };
    let want = |k: usize| {
        if n == k {
            Ok(())
        } else {
            Err(arity(&k.to_string()))
        }
    };

    if let Some(alu) = AluOp::ALL.into_iter().find(|a| a.mnemonic() == op) {
        want(3)?;
        return Ok(Some(Op::Alu {
            op: alu,
            dst: reg(&args[0])?,
            a: val(&args[1])?,
            b: val(&args[2])?,
        }));
    }
    let o = match op {
        "load" => {
            want(2)?;
            Op::Load {
                dst: reg(&args[0])?,
                mem: mem(&args[1])?,
            }
        }
        "store" => {
            want(2)?;
            let src = val(&args[1])?;
            if src == Operand::Sp {
                return Err(bad(&args[1], "a register or immediate"));
            }
            Op::Store {
                mem: mem(&args[0])?,
                src,
            }
        }
        "mov" => {
            want(2)?;
            Op::Mov {
                dst: reg(&args[0])?,
                src: val(&args[1])?,
            }
        }
        "cmp" | "test" => {
            want(2)?;
            let (a, b) = (val(&args[0])?, val(&args[1])?);
            if op == "cmp" {
                Op::Cmp { a, b }
            } else {
                Op::Test { a, b }
            }
        }
        "select" => {
            want(4)?;
            Op::Select {
                dst: reg(&args[0])?,
                cond: cond(&args[1])?,
                a: val(&args[2])?,
                b: val(&args[3])?,
            }
        }
        "jmp" => {
            want(1)?;
            Op::Jmp {
                target: name(&args[0])?,
            }
        }
        "br_cond" => {
            want(3)?;
            Op::BrCond {
                cond: cond(&args[0])?,
                taken: name(&args[1])?,
                not_taken: name(&args[2])?,
            }
        }
        "call" => {
            want(1)?;
            Op::Call {
                func: name(&args[0])?,
            }
        }
        "ret" => {
            want(0)?;
            Op::Ret
        }
        "halt" => {
            want(0)?;
            Op::Halt
        }
        "saveflags" => {
            want(1)?;
            Op::SaveFlags {
                dst: reg(&args[0])?,
            }
        }
        "restoreflags" => {
            want(1)?;
            Op::RestoreFlags {
                src: reg(&args[0])?,
            }
        }
        "rdrand" => {
            want(1)?;
            Op::Rdrand {
                dst: reg(&args[0])?,
            }
        }
        "prf_enc" => {
            want(2)?;
            Op::PrfEnc {
                dst: reg(&args[0])?,
                key: reg(&args[1])?,
            }
        }
        "heap_alloc" => {
            want(2)?;
            Op::HeapAlloc {
                dst: reg(&args[0])?,
                size: val(&args[1])?,
            }
        }
        "taint_label" => {
            want(2)?;
            let len = match &args[1].0 {
                Raw::Imm(v) => *v,
                _ => return Err(bad(&args[1], "an immediate length")),
            };
            Op::TaintLabel {
                mem: mem(&args[0])?,
                len,
            }
        }
        _ => return Ok(None),
    };
    Ok(Some(o))
}

fn image(
    kind: ImageKind,
    addr: u64,
    len: u64,
    bytes: &[u64],
    line: usize,
) -> Result<Image, ParseError> {
    if bytes.len() as u64 > len {
        return Err(syntax(line, 1, "more bytes than the declared length"));
    }
    let mut data = Vec::with_capacity(len as usize);
    for &b in bytes {
        if b > 0xFF {
            return Err(syntax(line, 1, format!("byte value {b} out of range")));
        }
        data.push(b as u8);
    }
    data.resize(len as usize, 0);
    Ok(Image {
        kind,
        addr,
        bytes: data,
    })
}

/// Parses MIR text. Instructions without an explicit `@N` prefix receive
/// their textual index as site id.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
    };
    let mut prog = Program {
        entry: String::new(),
        functions: Vec::new(),
        secrets: Vec::new(),
        images: Vec::new(),
        output: None,
    };
    let mut entry: Option<String> = None;
    let mut index: u32 = 0;
    loop {
        p.skip_newlines();
        let Some(tok) = p.peek().cloned() else { break };
        let Tok::Ident(word) = &tok.tok else {
            return Err(p.err("expected directive or `func`"));
        };
        p.pos += 1;
        match word.as_str() {
            ".entry" => {
                let (n, _, _) = p.expect_ident()?;
                entry = Some(n);
            }
            ".secret" | ".output" => {
                let addr = p.number()?;
                p.expect_punct(',')?;
                let len = p.number()?;
                let span = Span { addr, len };
                if word == ".secret" {
                    prog.secrets.push(span);
                } else {
                    prog.output = Some(span);
                }
            }
            ".heap" | ".data" => {
                let v = p.number_list()?;
                if v.len() < 2 {
                    return Err(syntax(tok.line, tok.col, "expected ADDR, LEN"));
                }
                let kind = if word == ".heap" {
                    ImageKind::Heap
                } else {
                    ImageKind::Data
                };
                prog.images
                    .push(image(kind, v[0], v[1], &v[2..], tok.line)?);
            }
            "func" => {
                let f = parse_function(&mut p, &mut index)?;
                prog.functions.push(f);
            }
            _ => return Err(syntax(tok.line, tok.col, format!("unexpected `{word}`"))),
        }
        if !p.at_line_end() && p.peek_tok() != Some(&Tok::Punct('}')) {
            return Err(p.err("expected end of line"));
        }
    }
    prog.entry = match entry {
        Some(e) => e,
        None => prog
            .functions
            .first()
            .map(|f| f.name.clone())
            .ok_or_else(|| ParseError::Invalid("no functions".into()))?,
    };
    for f in &prog.functions {
        for i in f.instructions() {
            for l in i.op.labels() {
                if f.block_index(l).is_none() {
                    return Err(ParseError::UnknownLabel {
                        func: f.name.clone(),
                        label: l.to_string(),
                    });
                }
            }
        }
    }
    Ok(prog)
}

fn parse_function(p: &mut Parser, index: &mut u32) -> Result<Function, ParseError> {
    let (name, _, _) = p.expect_ident()?;
    p.skip_newlines();
    p.expect_punct('{')?;
    let mut f = Function {
        name,
        slots: Vec::new(),
        blocks: Vec::new(),
    };
    let mut labels = HashSet::new();
    loop {
        p.skip_newlines();
        if p.eat_punct('}') {
            break;
        }
        let site = if p.eat_punct('@') {
            Some(p.number()? as u32)
        } else {
            None
        };
        let (word, line, col) = p.expect_ident()?;
        if word == ".slot" && site.is_none() {
            if !f.blocks.is_empty() {
                return Err(syntax(line, col, "`.slot` after the first label"));
            }
            let v = p.number_list()?;
            if v.len() != 3 {
                return Err(syntax(line, col, "`.slot` expects ID, OFF, SIZE"));
            }
            f.slots.push(StackSlot {
                id: v[0] as u32,
                offset: v[1],
                size: v[2],
            });
            continue;
        }
        if site.is_none() && p.eat_punct(':') {
            if !labels.insert(word.clone()) {
                return Err(ParseError::DuplicateLabel {
                    line,
                    col,
                    label: word,
                });
            }
            f.blocks.push(Block {
                label: word,
                instrs: Vec::new(),
            });
            continue;
        }
        let args = p.operands()?;
        let op = build_op(&word, line, col, args)?.ok_or(ParseError::UnknownOpcode {
            line,
            col,
            op: word.clone(),
        })?;
        let Some(block) = f.blocks.last_mut() else {
            return Err(syntax(line, col, "instruction before the first label"));
        };
        block.instrs.push(Instruction {
            site: site.unwrap_or(*index),
            op,
        });
        *index += 1;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_function_on_one_line() {
        let p = parse_program("func f { entry: halt }").unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.functions[0].blocks.len(), 1);
        assert_eq!(p.instruction_count(), 1);
        assert_eq!(p.entry, "f");
    }

    #[test]
    fn operands_and_directives() {
        let src = "
            .entry main
            .secret 0x10000000, 8
            .heap 0x10000000, 16, 1, 2, 0xff
            .output 0x40010000, 64
            func main {
                .slot 0, 0, 8
                .slot 1, 8, 8
            entry:
                load g1, [g2+0x10]:4   ; comment
                store [sp-8], -1
                @90 add g3, g1, sp
                select g4, lt, g1, 7
                br_cond ne, entry, done
            done:
                ret
            }";
        let p = parse_program(src).unwrap();
        assert_eq!(p.entry, "main");
        assert_eq!(p.images[0].bytes.len(), 16);
        assert_eq!(p.images[0].bytes[2], 0xff);
        let f = &p.functions[0];
        assert_eq!(f.slots.len(), 2);
        let ins: Vec<_> = f.instructions().collect();
        assert_eq!(
            ins[0].op,
            Op::Load {
                dst: Reg::gpr(1),
                mem: MemOperand::reg(Reg::gpr(2), 16).with_width(4)
            }
        );
        assert_eq!(
            ins[1].op,
            Op::Store {
                mem: MemOperand::sp(-8),
                src: Operand::Imm(u64::MAX)
            }
        );
        assert_eq!(ins[2].site, 90);
        assert_eq!(ins[3].site, 3);
    }

    #[test]
    fn unknown_label_is_reported() {
        let e = parse_program("func f {\nentry:\n jmp nowhere\n}").unwrap_err();
        assert!(matches!(e, ParseError::UnknownLabel { ref label, .. } if label == "nowhere"));
        assert!(e.to_string().contains("unknown label"));
    }

    #[test]
    fn errors_carry_position() {
        let e = parse_program("func f {\nentry:\n  frob g1\n}").unwrap_err();
        assert_eq!(
            e,
            ParseError::UnknownOpcode {
                line: 3,
                col: 3,
                op: "frob".into()
            }
        );
        let e = parse_program("func f {\nentry:\n  mov g1\n}").unwrap_err();
        assert!(matches!(
            e,
            ParseError::Arity {
                found: 1,
                line: 3,
                ..
            }
        ));
        let e = parse_program("func f {\na:\nhalt\na:\nhalt\n}").unwrap_err();
        assert!(matches!(e, ParseError::DuplicateLabel { line: 4, .. }));
        let e = parse_program("func f {\nentry:\n  mov g1, #\n}").unwrap_err();
        assert!(matches!(
            e,
            ParseError::Syntax {
                line: 3,
                col: 11,
                ..
            }
        ));
    }
}
