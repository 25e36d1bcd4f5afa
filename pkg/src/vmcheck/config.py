"""On-disk machine/ghost state: registers, memory words, the space
registry, and the allocation free list.  Serialized as JSON with all
numbers as 0x-hex strings; dumping is canonical (numeric key order), so
load-then-dump is byte-stable."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .machine import MachineState, Reg, WORD_BYTES
from .assertions import Registry


class ConfigError(ValueError):
    pass


@dataclass
class StateConfig:
    registers: dict = field(default_factory=dict)  # {Reg: int}
    memory: dict = field(default_factory=dict)  # {frame: {off: word}}
    registry: Registry = field(default_factory=dict)
    free_list: tuple = ()

    def to_machine_state(self) -> MachineState:
        return MachineState(
            regs=dict(self.registers),
            mem={f: dict(words) for f, words in self.memory.items()})

    @classmethod
    def of(cls, state: MachineState, registry: Registry,
           free_list=()) -> "StateConfig":
        return cls(registers=dict(state.regs),
                   memory={f: dict(w) for f, w in state.mem.items()},
                   registry={r: dict(t) for r, t in registry.items()},
                   free_list=tuple(free_list))


def _num(value, what: str) -> int:
    if not isinstance(value, str):
        raise ConfigError(f"{what} must be a 0x-hex string, got {value!r}")
    try:
        return int(value, 16) if value.lower().startswith("0x") \
            else int(value)
    except ValueError:
        raise ConfigError(f"bad number {value!r} for {what}") from None


def load_config(text: str) -> StateConfig:
    try:
        body = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"not valid JSON: {err}") from None
    if not isinstance(body, dict):
        raise ConfigError("top level must be an object")

    registers = {}
    for name, value in body.get("registers", {}).items():
        try:
            reg = Reg(name)
        except ValueError:
            raise ConfigError(f"unknown register {name!r}") from None
        registers[reg] = _num(value, f"register {name}")

    memory = {}
    for frame_text, words in body.get("memory", {}).items():
        frame = _num(frame_text, "memory frame")
        if not (0 <= frame < (1 << 52)):
            raise ConfigError(f"frame {frame:#x} out of range")
        inner = {}
        for off_text, val in words.items():
            off = _num(off_text, "memory offset")
            if off % WORD_BYTES or not (0 <= off < 4096):
                raise ConfigError(f"offset {off:#x} is not a word slot")
            inner[off] = _num(val, "memory word")
        memory[frame] = inner

    registry = {}
    for root_text, theta in body.get("registry", {}).items():
        root = _num(root_text, "space root")
        if root % 4096:
            raise ConfigError(f"space root {root:#x} is not page aligned")
        registry[root] = {_num(va, "walk-map key"): _num(pa, "walk-map value")
                          for va, pa in theta.items()}

    free_list = tuple(_num(x, "free-list entry")
                      for x in body.get("free_list", []))
    return StateConfig(registers=registers, memory=memory,
                       registry=registry, free_list=free_list)


def dump_config(cfg: StateConfig) -> str:
    body = {
        "registers": {reg.value: f"{val:#x}"
                      for reg, val in sorted(cfg.registers.items(),
                                             key=lambda kv: kv[0].value)},
        "memory": {
            f"{frame:#x}": {f"{off:#x}": f"{val:#x}"
                            for off, val in sorted(words.items())}
            for frame, words in sorted(cfg.memory.items())
        },
        "registry": {
            f"{root:#x}": {f"{va:#x}": f"{pa:#x}"
                           for va, pa in sorted(theta.items())}
            for root, theta in sorted(cfg.registry.items())
        },
        "free_list": [f"{x:#x}" for x in cfg.free_list],
    }
    return json.dumps(body, indent=2) + "\n"
