"""Command-line front end.

Subcommands:
    run PROG --state CFG [--trace] [--no-accessed] [--no-rw]
    check PROG --state CFG --pre FILE --root HEX [--mode coexec|resource]
          [--report json|text]
    walk --state CFG --root HEX --va HEX
    case NAME --emit DIR

Exit codes: 0 success, 1 fault or violation, 2 usage or parse error.
Output is deterministic: identical invocations print identical bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .machine import (
    Fault,
    MachineState,
    PhysAddr,
    Reg,
    StepOpts,
    step as machine_step,
    walk,
)
from .checker import (
    COEXEC,
    InstrStep,
    RESOURCE_ONLY,
    check_double,
    frame_audit,
)
from .cases import CASE_NAMES, STUB_LIBRARY, UnknownCase, case_study
from .config import ConfigError, StateConfig, dump_config, load_config
from .parsing import (
    ParseError,
    parse_assertion,
    parse_program,
    print_assertion,
    print_instr,
    print_program,
)


class UsageError(ValueError):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err.strerror}") from None


def _parse_hex(text: str, what: str) -> int:
    try:
        return int(text, 16) if text.lower().startswith("0x") else int(text)
    except ValueError:
        raise UsageError(f"bad {what}: {text!r}") from None


def _load_state(path: str) -> StateConfig:
    try:
        return load_config(_read(path))
    except ConfigError as err:
        raise UsageError(f"{path}: {err}") from None


def _pte_flags(pte) -> str:
    flags = []
    flags.append("present" if pte.present else "not-present")
    if pte.writable:
        flags.append("rw")
    if pte.accessed:
        flags.append("accessed")
    return ",".join(flags)


# --------------------------------------------------------------------------
# run


def _fault_text(fault: Fault) -> str:
    return repr(fault)


def cmd_run(args) -> int:
    cfg = _load_state(args.state)
    script = parse_program(_read(args.prog))
    instrs = []
    for s in script:
        if not isinstance(s, InstrStep):
            raise UsageError(
                "program contains checker-only steps (@ghost/@assert/call); "
                "use the check subcommand")
        instrs.append(s.instr)

    opts = StepOpts(enforce_rw=not args.no_rw,
                    set_accessed=not args.no_accessed)
    initial = cfg.to_machine_state()
    state = initial
    out = []
    fault = None
    while state.pc < len(instrs):
        instr = instrs[state.pc]
        result = machine_step(state, instr, opts)
        if isinstance(result, Fault):
            if args.trace:
                out.append(f"{state.pc:4d} | {print_instr(instr):<24} | "
                           f"{state.reg(Reg.CR3):#x} | "
                           f"fault: {_fault_text(result)}")
            fault = (state.pc, result)
            break
        if args.trace:
            out.append(f"{state.pc:4d} | {print_instr(instr):<24} | "
                       f"{result.reg(Reg.CR3):#x} | "
                       f"{_delta_text(state, result)}")
        state = result

    if fault is not None:
        out.append(f"fault at pc {fault[0]}: {_fault_text(fault[1])}")
        print("\n".join(out))
        return 1

    out.append("registers:")
    for reg in sorted(state.regs, key=lambda r: r.value):
        val = state.reg(reg)
        if val:
            out.append(f"  {reg.value}={val:#x}")
    out.append("memory:")
    for frame in sorted(set(initial.mem) | set(state.mem)):
        before = initial.mem.get(frame, {})
        after = state.mem.get(frame, {})
        for off in sorted(set(before) | set(after)):
            if before.get(off) != after.get(off):
                out.append(f"  {frame:#x}:{off:#x}={after.get(off, 0):#x}")
    print("\n".join(out))
    return 0


def _delta_text(before: MachineState, after: MachineState) -> str:
    deltas = []
    for reg in sorted(set(before.regs) | set(after.regs),
                      key=lambda r: r.value):
        if before.reg(reg) != after.reg(reg):
            deltas.append(f"{reg.value}={after.reg(reg):#x}")
    for frame in sorted(set(before.mem) | set(after.mem)):
        b = before.mem.get(frame, {})
        a = after.mem.get(frame, {})
        for off in sorted(set(b) | set(a)):
            if b.get(off) != a.get(off):
                deltas.append(f"mem[{frame:#x}:{off:#x}]={a.get(off, 0):#x}")
    return " ".join(deltas) if deltas else "-"


# --------------------------------------------------------------------------
# check


def cmd_check(args) -> int:
    cfg = _load_state(args.state)
    script = parse_program(_read(args.prog))
    pre = parse_assertion(_read(args.pre).strip())
    root = _parse_hex(args.root, "--root")
    mode = COEXEC if args.mode == "coexec" else RESOURCE_ONLY

    report = check_double(pre, root, script, stubs=STUB_LIBRARY, mode=mode,
                          init=cfg.to_machine_state(), registry=cfg.registry,
                          free_list=cfg.free_list)
    warnings = frame_audit(pre, root, script)
    if args.report == "json":
        payload = report.payload()
        payload["frame_audit"] = [
            {"kind": w.kind, "step": w.step, "location": w.location,
             "narrative": w.narrative} for w in warnings]
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    else:
        sys.stdout.write(report.to_text())
        for w in warnings:
            sys.stdout.write(f"audit: {w}\n")
    return 0 if report.ok else 1


# --------------------------------------------------------------------------
# walk


def cmd_walk(args) -> int:
    cfg = _load_state(args.state)
    root = _parse_hex(args.root, "--root")
    va = _parse_hex(args.va, "--va")
    state = cfg.to_machine_state()
    if root % 4096:
        raise UsageError(f"--root {root:#x} is not page aligned")
    trace = walk(root, state.mem, va)
    for level, frame, off, pte in trace.steps:
        print(f"l{level} slot {frame:#x}:{off:#x} entry {pte.raw:#018x} "
              f"{_pte_flags(pte)}")
    if isinstance(trace.result, PhysAddr):
        print(f"pa {trace.result.byte:#x}")
        return 0
    print(f"fault: {_fault_text(trace.result)}")
    return 1


# --------------------------------------------------------------------------
# case


def cmd_case(args) -> int:
    try:
        case = case_study(args.name)
    except UnknownCase as err:
        raise UsageError(str(err)) from None
    outdir = Path(args.emit)
    outdir.mkdir(parents=True, exist_ok=True)
    prog_path = outdir / f"{case.name}.prog"
    state_path = outdir / f"{case.name}.state.json"
    pre_path = outdir / f"{case.name}.pre"
    prog_path.write_text(print_program(case.script))
    state_path.write_text(dump_config(
        StateConfig.of(case.state, case.registry, case.free_list)))
    pre_path.write_text(print_assertion(case.pre) + "\n")
    print(f"wrote {prog_path}")
    print(f"wrote {state_path}")
    print(f"wrote {pre_path}")
    print(f"check with: vmcheck check {prog_path} --state {state_path} "
          f"--pre {pre_path} --root {case.root:#x}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vmcheck",
        description="emulate a paged x86-64 fragment and check resource "
                    "specifications over instruction scripts")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a program")
    p_run.add_argument("prog")
    p_run.add_argument("--state", required=True)
    p_run.add_argument("--trace", action="store_true")
    p_run.add_argument("--no-accessed", action="store_true",
                       help="do not set accessed bits during walks")
    p_run.add_argument("--no-rw", action="store_true",
                       help="do not enforce the read-write bit on writes")
    p_run.set_defaults(func=cmd_run)

    p_check = sub.add_parser("check", help="check a script against a "
                                           "precondition")
    p_check.add_argument("prog")
    p_check.add_argument("--state", required=True)
    p_check.add_argument("--pre", required=True)
    p_check.add_argument("--root", required=True)
    p_check.add_argument("--mode", choices=["coexec", "resource"],
                         default="coexec")
    p_check.add_argument("--report", choices=["text", "json"],
                         default="text")
    p_check.set_defaults(func=cmd_check)

    p_walk = sub.add_parser("walk", help="print one address translation")
    p_walk.add_argument("--state", required=True)
    p_walk.add_argument("--root", required=True)
    p_walk.add_argument("--va", required=True)
    p_walk.set_defaults(func=cmd_walk)

    p_case = sub.add_parser("case", help="emit a case-study fixture")
    p_case.add_argument("name", choices=list(CASE_NAMES))
    p_case.add_argument("--emit", required=True)
    p_case.set_defaults(func=cmd_case)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 2 if err.code not in (0, None) else 0
    try:
        return args.func(args)
    except (UsageError, ParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
