import json

import pytest

from vmcheck.cli import main
from vmcheck.cases import CASE_NAMES, case_study
from vmcheck.config import StateConfig, dump_config

from gen import multi_space_fixture


def invoke(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def workdir(tmp_path):
    state, registry, roots = multi_space_fixture()
    cfg = dump_config(StateConfig.of(state, registry))
    state_path = tmp_path / "state.json"
    state_path.write_text(cfg)
    return tmp_path, state_path, roots


def test_run_simple_program(capsys, workdir):
    tmp, state_path, roots = workdir
    prog = tmp / "prog.s"
    prog.write_text("mov rax, 0x2a\nmov rbx, rax\n")
    code, out, _ = invoke(capsys, "run", str(prog), "--state",
                          str(state_path))
    assert code == 0
    assert "rax=0x2a" in out
    assert "rbx=0x2a" in out


def test_run_trace_and_fault_exit(capsys, workdir):
    tmp, state_path, roots = workdir
    prog = tmp / "prog.s"
    prog.write_text("mov rsi, 0x10000000000\nmov rax, [rsi]\n")
    code, out, _ = invoke(capsys, "run", str(prog), "--state",
                          str(state_path), "--trace")
    assert code == 1
    assert "NotPresent" in out
    assert "level=4" in out


def test_run_rejects_checker_steps(capsys, workdir):
    tmp, state_path, roots = workdir
    prog = tmp / "prog.s"
    prog.write_text("@ghost remove_walk va=0x200000\n")
    code, _out, err = invoke(capsys, "run", str(prog), "--state",
                             str(state_path))
    assert code == 2
    assert "check" in err


def test_run_parse_error_exit_code(capsys, workdir):
    tmp, state_path, roots = workdir
    prog = tmp / "prog.s"
    prog.write_text("mov rax, [rdi+4]\n")
    code, _out, err = invoke(capsys, "run", str(prog), "--state",
                             str(state_path))
    assert code == 2
    assert "error" in err


def test_walk_resolves(capsys, workdir):
    tmp, state_path, roots = workdir
    code, out, _ = invoke(capsys, "walk", "--state", str(state_path),
                          "--root", f"{roots[0]:#x}", "--va", "0x200000")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 5  # four levels plus the result
    assert all(f"l{lvl} slot" in line
               for lvl, line in zip((4, 3, 2, 1), lines))
    assert "present" in lines[0]
    assert lines[-1] == "pa 0x5000"


def test_walk_reports_fault_level(capsys, workdir):
    tmp, state_path, roots = workdir
    code, out, _ = invoke(capsys, "walk", "--state", str(state_path),
                          "--root", f"{roots[2]:#x}", "--va", "0x200000")
    assert code == 1
    assert "fault" in out
    assert "NotPresent" in out


@pytest.mark.parametrize("name", CASE_NAMES)
def test_case_emit_then_check(capsys, tmp_path, name):
    code, out, _ = invoke(capsys, "case", name, "--emit", str(tmp_path))
    assert code == 0
    case = case_study(name)
    prog = tmp_path / f"{name}.prog"
    state = tmp_path / f"{name}.state.json"
    pre = tmp_path / f"{name}.pre"
    assert prog.exists() and state.exists() and pre.exists()

    code, out, _ = invoke(capsys, "check", str(prog), "--state", str(state),
                          "--pre", str(pre), "--root", f"{case.root:#x}")
    assert code == 0
    assert "result: ok" in out


def test_check_json_report_and_determinism(capsys, tmp_path):
    invoke(capsys, "case", "swtch", "--emit", str(tmp_path))
    case = case_study("swtch")
    argv = ["check", str(tmp_path / "swtch.prog"),
            "--state", str(tmp_path / "swtch.state.json"),
            "--pre", str(tmp_path / "swtch.pre"),
            "--root", f"{case.root:#x}", "--report", "json"]
    code1, out1, _ = invoke(capsys, *argv)
    code2, out2, _ = invoke(capsys, *argv)
    assert code1 == code2 == 0
    assert out1 == out2
    payload = json.loads(out1)
    assert payload["ok"] is True
    assert payload["final_root"] == f"{case.state.mem[0x211][56]:#x}"
    assert len(payload["frame_audit"]) == 1


def test_check_violation_exit_code(capsys, tmp_path):
    invoke(capsys, "case", "map_new_page", "--emit", str(tmp_path))
    case = case_study("map_new_page")
    prog = tmp_path / "map_new_page.prog"
    # sabotage: demand a claim that is never established
    bad = prog.read_text() + "@assert { 0x500000 |->v 0x0 }\n"
    prog.write_text(bad)
    code, out, _ = invoke(capsys, "check", str(prog),
                          "--state", str(tmp_path / "map_new_page.state.json"),
                          "--pre", str(tmp_path / "map_new_page.pre"),
                          "--root", f"{case.root:#x}")
    assert code == 1
    assert "FAIL" in out


def test_case_emission_is_deterministic(capsys, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    invoke(capsys, "case", "unmap_page", "--emit", str(a))
    invoke(capsys, "case", "unmap_page", "--emit", str(b))
    for name in ("unmap_page.prog", "unmap_page.state.json",
                 "unmap_page.pre"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_usage_error_exit_code(capsys, tmp_path):
    code, _out, _err = invoke(capsys, "case", "map_new_page", "--emit")
    assert code == 2
    code, _out, err = invoke(capsys, "walk", "--state",
                             str(tmp_path / "missing.json"),
                             "--root", "0x1000", "--va", "0x0")
    assert code == 2
