"""Reduced x86 subset: operands, instructions, machine state and a simulator.

Only four two-operand instructions are modelled (addl, subl, movl, imull) over
up to four 32-bit registers, single-digit immediates and, optionally, four
fixed stack slots addressed relative to %rbp.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence, Union

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def wrap32(x: int) -> int:
    """Two's-complement wrap of an arbitrary Python int into int32."""
    return ((x + 2**31) & 0xFFFFFFFF) - 2**31


class MachineError(Exception):
    pass


class IllegalInstruction(MachineError):
    pass


class RamDisabled(MachineError):
    pass


class ConfigMismatch(MachineError):
    pass


class AsmSyntaxError(MachineError, ValueError):
    pass


class ConstraintError(MachineError, ValueError):
    pass


class ExecutionError(MachineError):
    def __init__(self, line: int, cause: Exception):
        super().__init__(f"line {line}: {cause}")
        self.line = line
        self.cause = cause


class Opcode(enum.IntEnum):
    ADDL = 0
    SUBL = 1
    MOVL = 2
    IMULL = 3

    @property
    def mnemonic(self) -> str:
        return self.name.lower()


class Register(enum.IntEnum):
    EAX = 0
    EBX = 1
    ECX = 2
    EDX = 3

    @property
    def display(self) -> str:
        return "%" + self.name.lower()


class MemSlot(enum.IntEnum):
    M0 = 0
    M4 = 1
    M8 = 2
    M12 = 3

    @property
    def offset(self) -> int:
        return 4 * int(self)

    @property
    def display(self) -> str:
        return f"-{self.offset}(%rbp)"


@dataclass(frozen=True, order=True)
class Imm:
    digit: int

    def __post_init__(self):
        if not isinstance(self.digit, int) or not 0 <= self.digit <= 9:
            raise ConstraintError(f"immediate must be a digit 0..9, got {self.digit!r}")

    def __str__(self) -> str:
        return f"${self.digit}"


@dataclass(frozen=True, order=True)
class Reg:
    reg: Register

    def __str__(self) -> str:
        return self.reg.display


@dataclass(frozen=True, order=True)
class Mem:
    slot: MemSlot

    def __str__(self) -> str:
        return self.slot.display


Operand = Union[Imm, Reg, Mem]


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    src: Operand
    dst: Operand

    def __post_init__(self):
        if isinstance(self.dst, Imm):
            raise ConstraintError("destination cannot be an immediate")
        if isinstance(self.src, Mem) and isinstance(self.dst, Mem):
            raise ConstraintError("memory-to-memory operands are not encodable")
        if self.opcode is Opcode.IMULL and not isinstance(self.dst, Reg):
            raise ConstraintError("imull destination must be a register")

    def uses_ram(self) -> bool:
        return isinstance(self.src, Mem) or isinstance(self.dst, Mem)

    def max_register(self) -> int:
        """Highest register index referenced, or -1."""
        regs = [op.reg for op in (self.src, self.dst) if isinstance(op, Reg)]
        return max(regs) if regs else -1

    def __str__(self) -> str:
        return format_instruction(self)


Program = tuple[Instruction, ...]


@dataclass(frozen=True)
class MachineState:
    """Register file plus optional RAM.

    ``regs`` holds only the registers in use (a prefix of eax, ebx, ecx, edx);
    ``ram`` is ``None`` when RAM is disabled, else the four slots in
    [-0, -4, -8, -12] order.
    """

    regs: tuple[int, ...]
    ram: tuple[int, ...] | None = None

    def __post_init__(self):
        regs = tuple(int(v) for v in self.regs)
        if not 1 <= len(regs) <= 4:
            raise ValueError(f"expected 1..4 registers, got {len(regs)}")
        object.__setattr__(self, "regs", tuple(wrap32(v) for v in regs))
        if self.ram is not None:
            ram = tuple(int(v) for v in self.ram)
            if len(ram) != 4:
                raise ValueError(f"expected 4 RAM slots, got {len(ram)}")
            object.__setattr__(self, "ram", tuple(wrap32(v) for v in ram))

    @property
    def num_registers(self) -> int:
        return len(self.regs)

    @property
    def ram_enabled(self) -> bool:
        return self.ram is not None

    def cells(self) -> tuple[int, ...]:
        return self.regs + (self.ram or ())

    @classmethod
    def from_cells(cls, cells: Sequence[int], num_registers: int, ram: bool) -> "MachineState":
        cells = list(cells)
        expected = num_registers + (4 if ram else 0)
        if len(cells) != expected:
            raise ValueError(f"expected {expected} cells, got {len(cells)}")
        return cls(tuple(cells[:num_registers]), tuple(cells[num_registers:]) if ram else None)

    def __str__(self) -> str:
        text = "CPU:" + str(list(self.regs))
        if self.ram is not None:
            text += " RAM:" + str(list(self.ram))
        return text


@dataclass(frozen=True)
class SpaceConfig:
    num_registers: int = 4
    ram: bool = False

    def __post_init__(self):
        if not 1 <= self.num_registers <= 4:
            raise ValueError("num_registers must be in 1..4")

    @property
    def cells(self) -> int:
        return self.num_registers + (4 if self.ram else 0)


def _read(state: MachineState, op: Operand) -> int:
    if isinstance(op, Imm):
        return op.digit
    if isinstance(op, Reg):
        if op.reg >= len(state.regs):
            raise IllegalInstruction(f"register {op} not present in this machine")
        return state.regs[op.reg]
    if state.ram is None:
        raise RamDisabled(f"operand {op} needs RAM")
    return state.ram[op.slot]


def step(state: MachineState, instr: Instruction) -> MachineState:
    """Execute one instruction and return the successor state."""
    src = _read(state, instr.src)
    cur = _read(state, instr.dst)
    op = instr.opcode
    if op is Opcode.ADDL:
        val = cur + src
    elif op is Opcode.SUBL:
        val = cur - src
    elif op is Opcode.MOVL:
        val = src
    else:
        val = cur * src
    val = wrap32(val)
    dst = instr.dst
    if isinstance(dst, Reg):
        regs = list(state.regs)
        regs[dst.reg] = val
        return MachineState(tuple(regs), state.ram)
    ram = list(state.ram)  # _read already checked RAM presence
    ram[dst.slot] = val
    return MachineState(state.regs, tuple(ram))


def run(state: MachineState, prog: Iterable[Instruction]) -> MachineState:
    for i, instr in enumerate(prog):
        try:
            state = step(state, instr)
        except MachineError as exc:
            raise ExecutionError(i, exc) from exc
    return state


def state_equals(a: MachineState, b: MachineState) -> bool:
    if a.ram_enabled != b.ram_enabled or a.num_registers != b.num_registers:
        raise ConfigMismatch("states have different register/RAM layouts")
    return a.regs == b.regs and a.ram == b.ram


# --- text codec -------------------------------------------------------------

_REG_NAMES = {r.display: r for r in Register}
_MEM_RE = re.compile(r"^-(\d+)\(%rbp\)$")
_LINE_RE = re.compile(r"^\s*([a-z]+)\s+(\S+?)\s*,\s*(\S+?)\s*$")


def parse_operand(token: str) -> Operand:
    token = token.strip()
    if token.startswith("$"):
        body = token[1:]
        if not re.fullmatch(r"\d", body):
            raise AsmSyntaxError(f"bad immediate {token!r}: only single digits 0..9")
        return Imm(int(body))
    if token in _REG_NAMES:
        return Reg(_REG_NAMES[token])
    m = _MEM_RE.match(token)
    if m:
        offset = int(m.group(1))
        if offset % 4 or not 0 <= offset <= 12:
            raise AsmSyntaxError(f"bad stack slot {token!r}")
        return Mem(MemSlot(offset // 4))
    raise AsmSyntaxError(f"unknown operand {token!r}")


def parse_instruction(text: str) -> Instruction:
    m = _LINE_RE.match(text.lower())
    if not m:
        raise AsmSyntaxError(f"cannot parse {text!r}; expected '<opcode> <src>, <dst>'")
    name, src, dst = m.groups()
    try:
        opcode = Opcode[name.upper()]
    except KeyError:
        raise AsmSyntaxError(f"unknown opcode {name!r}") from None
    return Instruction(opcode, parse_operand(src), parse_operand(dst))


def format_instruction(instr: Instruction) -> str:
    return f"{instr.opcode.mnemonic} {instr.src}, {instr.dst}"


def parse_program(text: str) -> tuple[Instruction, ...]:
    """Parse AT&T text, one instruction per line; blank and ``#`` lines skipped."""
    prog = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            prog.append(parse_instruction(line))
        except MachineError as exc:
            raise type(exc)(f"line {lineno}: {exc}") from exc
    return tuple(prog)


def format_program(prog: Iterable[Instruction]) -> str:
    return "\n".join(format_instruction(i) for i in prog)


# --- action space -------------------------------------------------------------

def _operands(config: SpaceConfig) -> tuple[list[Operand], list[Operand]]:
    regs = [Reg(Register(i)) for i in range(config.num_registers)]
    mems = [Mem(s) for s in MemSlot] if config.ram else []
    srcs = regs + [Imm(d) for d in range(10)] + mems
    dsts = regs + mems
    return srcs, dsts


@lru_cache(maxsize=None)
def _actions(config: SpaceConfig) -> tuple[Instruction, ...]:
    srcs, dsts = _operands(config)
    out = []
    for op in Opcode:
        for src in srcs:
            for dst in dsts:
                try:
                    out.append(Instruction(op, src, dst))
                except ConstraintError:
                    continue
    return tuple(out)


def enumerate_actions(config: SpaceConfig) -> list[Instruction]:
    """All legal instructions, ordered by (opcode, src, dst) token index.

    The position in the returned list is the action's stable index.
    """
    return list(_actions(config))


@lru_cache(maxsize=None)
def action_index(config: SpaceConfig) -> dict[Instruction, int]:
    return {a: i for i, a in enumerate(_actions(config))}


def check_instruction(instr: Instruction, config: SpaceConfig) -> None:
    if instr.uses_ram() and not config.ram:
        raise RamDisabled(f"{instr} uses RAM but RAM is disabled")
    if instr.max_register() >= config.num_registers:
        raise IllegalInstruction(f"{instr} uses a register outside the first {config.num_registers}")


def solvable_within(states: Sequence[MachineState], targets: Sequence[MachineState], depth: int,
                    config: SpaceConfig) -> bool:
    """Exhaustive check: does some program of at most ``depth`` lines map every state to its target?"""
    targets = tuple(targets)
    frontier = {tuple(states)}
    seen = set(frontier)
    if tuple(states) == targets:
        return True
    actions = _actions(config)
    for _ in range(depth):
        nxt = set()
        for sts in frontier:
            for a in actions:
                succ = tuple(step(s, a) for s in sts)
                if succ == targets:
                    return True
                if succ not in seen:
                    seen.add(succ)
                    nxt.add(succ)
        frontier = nxt
    return False
