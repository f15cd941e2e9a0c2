use std::collections::{HashMap, HashSet};

use serde::Serialize;

use super::*;
use crate::layout::Layout;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub func: Option<String>,
    pub site: Option<SiteId>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(func) = &self.func {
            write!(f, "{func}: ")?;
        }
        if let Some(s) = self.site {
            write!(f, "@{s}: ")?;
        }
        f.write_str(&self.message)
    }
}

fn diag(func: Option<&str>, site: Option<SiteId>, message: String) -> Diagnostic {
    Diagnostic {
        func: func.map(str::to_string),
        site,
        message,
    }
}

/// Structural checks against the default memory layout.
pub fn validate(p: &Program) -> Vec<Diagnostic> {
    validate_with(p, &Layout::default())
}

pub fn validate_with(p: &Program, layout: &Layout) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if p.function(&p.entry).is_none() {
        out.push(diag(
            None,
            None,
            format!("entry function `{}` not defined", p.entry),
        ));
    }
    let mut names = HashSet::new();
    for f in &p.functions {
        if !names.insert(f.name.as_str()) {
            out.push(diag(Some(&f.name), None, "duplicate function name".into()));
        }
    }
    let mut seen: HashMap<SiteId, &str> = HashMap::new();
    for f in &p.functions {
        let fname = Some(f.name.as_str());
        if f.blocks.is_empty() {
            out.push(diag(fname, None, "function has no blocks".into()));
        }
        let mut labels = HashSet::new();
        for b in &f.blocks {
            if !labels.insert(b.label.as_str()) {
                out.push(diag(fname, None, format!("duplicate label `{}`", b.label)));
            }
        }
        check_slots(f, &mut out);
        for (bi, b) in f.blocks.iter().enumerate() {
            for (k, i) in b.instrs.iter().enumerate() {
                if seen.insert(i.site, &f.name).is_some() {
                    out.push(diag(fname, Some(i.site), "site id reused".into()));
                }
                if i.op.is_terminator() && k + 1 != b.instrs.len() {
                    out.push(diag(
                        fname,
                        Some(i.site),
                        "terminator in the middle of a block".into(),
                    ));
                }
                check_instr(p, f, i, &mut out);
            }
            let falls = !b.instrs.last().is_some_and(|i| i.op.is_terminator());
            if falls && bi + 1 == f.blocks.len() {
                out.push(diag(
                    fname,
                    None,
                    format!("block `{}` falls off the end", b.label),
                ));
            }
        }
    }
    for s in &p.secrets {
        if s.len == 0 || layout.contains_range(s.addr, s.len).is_none() {
            out.push(diag(
                None,
                None,
                format!(
                    "secret region {:#x}+{} outside declared memory",
                    s.addr, s.len
                ),
            ));
        }
    }
    for img in &p.images {
        if !img.bytes.is_empty()
            && layout
                .contains_range(img.addr, img.bytes.len() as u64)
                .is_none()
        {
            out.push(diag(
                None,
                None,
                format!("image at {:#x} outside declared memory", img.addr),
            ));
        }
    }
    if let Some(o) = p.output {
        if o.len == 0 || layout.contains_range(o.addr, o.len).is_none() {
            out.push(diag(
                None,
                None,
                format!("output region {:#x} outside declared memory", o.addr),
            ));
        }
    }
    out
}

fn check_slots(f: &Function, out: &mut Vec<Diagnostic>) {
    let mut ids = HashSet::new();
    for (k, a) in f.slots.iter().enumerate() {
        if !ids.insert(a.id) {
            out.push(diag(
                Some(&f.name),
                None,
                format!("duplicate slot id {}", a.id),
            ));
        }
        if a.size == 0 {
            out.push(diag(
                Some(&f.name),
                None,
                format!("slot {} has zero size", a.id),
            ));
        }
        for b in &f.slots[k + 1..] {
            if a.offset < b.end() && b.offset < a.end() {
                out.push(diag(
                    Some(&f.name),
                    None,
                    format!("stack slots {} and {} overlap", a.id, b.id),
                ));
            }
        }
    }
}

fn check_instr(p: &Program, f: &Function, i: &Instruction, out: &mut Vec<Diagnostic>) {
    let fname = Some(f.name.as_str());
    for l in i.op.labels() {
        if f.block_index(l).is_none() {
            out.push(diag(fname, Some(i.site), format!("unknown label `{l}`")));
        }
    }
    if let Op::Call { func } = &i.op {
        if p.function(func).is_none() {
            out.push(diag(
                fname,
                Some(i.site),
                format!("call to unknown function `{func}`"),
            ));
        }
    }
    if let Some(m) = i.op.mem() {
        if !matches!(m.width, 1 | 2 | 4 | 8) {
            out.push(diag(
                fname,
                Some(i.site),
                format!("bad access width {}", m.width),
            ));
        }
        if m.base == Base::Reg(Reg::FLAGS) {
            out.push(diag(
                fname,
                Some(i.site),
                "flags used as address base".into(),
            ));
        }
    }
    let flags_def = i.op.def() == Some(Reg::FLAGS);
    let flags_use = i.op.uses().contains(&Reg::FLAGS);
    if flags_def || flags_use {
        out.push(diag(
            fname,
            Some(i.site),
            "flags accessed directly; use saveflags/restoreflags".into(),
        ));
    }
}

/// Checks a rewrite kept every original site id and gave all inserted
/// instructions ids above the original maximum.
pub fn check_fresh_ids(original: &Program, rewritten: &Program) -> Vec<Diagnostic> {
    let max = original.max_site();
    let orig: HashSet<SiteId> = original.instructions().map(|i| i.site).collect();
    let mut out = Vec::new();
    let mut kept = HashSet::new();
    for f in &rewritten.functions {
        for i in f.instructions() {
            if orig.contains(&i.site) {
                if !kept.insert(i.site) {
                    out.push(diag(
                        Some(&f.name),
                        Some(i.site),
                        "original id duplicated".into(),
                    ));
                }
            } else if max.is_some_and(|m| i.site <= m) {
                out.push(diag(
                    Some(&f.name),
                    Some(i.site),
                    "inserted instruction reuses an id below the original maximum".into(),
                ));
            }
        }
    }
    out.extend(
        orig.difference(&kept)
            .map(|s| diag(None, Some(*s), "original site missing after rewrite".into())),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_program_has_no_diagnostics() {
        let p = parse_program("func f {\n.slot 0, 0, 8\nentry:\nstore [sp], 1\nhalt\n}").unwrap();
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn overlapping_slots_give_one_diagnostic() {
        let p = parse_program("func f {\n.slot 0, 0, 8\n.slot 1, 4, 8\nentry:\nhalt\n}").unwrap();
        let d = validate(&p);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("overlap"));
    }

    #[test]
    fn reused_id_after_rewrite_gives_one_diagnostic() {
        let orig = parse_program("func f {\nentry:\nmov g0, 1\nhalt\n}").unwrap();
        let mut p = orig.clone();
        p.functions[0].blocks[0].instrs.insert(
            0,
            Instruction::new(
                1,
                Op::Mov {
                    dst: Reg::gpr(1),
                    src: Operand::Imm(0),
                },
            ),
        );
        let d = validate(&p);
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("reused"));
        assert!(!check_fresh_ids(&orig, &p).is_empty());
    }

    #[test]
    fn flags_as_operand_rejected() {
        let p = parse_program("func f {\nentry:\nmov g0, flags\nhalt\n}").unwrap();
        assert_eq!(validate(&p).len(), 1);
    }
}
