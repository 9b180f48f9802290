"""Token vocabulary for instruction lines and integer ids for machine states."""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from ..machine import (
    ConfigMismatch,
    Imm,
    Instruction,
    MachineState,
    Mem,
    MemSlot,
    Opcode,
    Reg,
    Register,
    SpaceConfig,
    enumerate_actions,
)

VOCAB = (
    ["addl", "subl", "movl", "imull"]
    + ["%eax", "%ebx", "%ecx", "%edx"]
    + [f"${d}" for d in range(10)]
    + ["-0(%rbp)", "-4(%rbp)", "-8(%rbp)", "-12(%rbp)"]
)
VOCAB_SIZE = len(VOCAB)  # 22
OPCODE0, REG0, DIGIT0, MEM0 = 0, 4, 8, 18
START_TOKEN = VOCAB_SIZE  # decoder input at the first slot

# state value ids: value + 128 for values in [-128, 127], then two overflow buckets
VALUE_OFFSET = 128
ID_LOW = 256
ID_HIGH = 257
NUM_VALUE_IDS = 258


def operand_token(op) -> int:
    if isinstance(op, Reg):
        return REG0 + int(op.reg)
    if isinstance(op, Imm):
        return DIGIT0 + op.digit
    return MEM0 + int(op.slot)


def token_operand(tok: int):
    tok = int(tok)
    if REG0 <= tok < DIGIT0:
        return Reg(Register(tok - REG0))
    if DIGIT0 <= tok < MEM0:
        return Imm(tok - DIGIT0)
    if MEM0 <= tok < VOCAB_SIZE:
        return Mem(MemSlot(tok - MEM0))
    raise ValueError(f"token {tok} is not an operand")


def instruction_tokens(instr: Instruction) -> tuple[int, int, int]:
    return int(instr.opcode), operand_token(instr.src), operand_token(instr.dst)


def tokens_instruction(toks: Sequence[int]) -> Instruction:
    return Instruction(Opcode(int(toks[0])), token_operand(toks[1]), token_operand(toks[2]))


def value_ids(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    ids = v + VALUE_OFFSET
    ids = np.where(v < -VALUE_OFFSET, ID_LOW, ids)
    ids = np.where(v > VALUE_OFFSET - 1, ID_HIGH, ids)
    return ids


def encode_state(pairs: Sequence[tuple[MachineState, MachineState]]) -> np.ndarray:
    """Ids laid out pair-major: for each pair, current cells then target cells."""
    layouts = {(c.num_registers, c.ram_enabled) for p in pairs for c in p}
    if len(layouts) != 1:
        raise ConfigMismatch("all states must share one register/RAM layout")
    flat = [v for cur, tgt in pairs for v in cur.cells() + tgt.cells()]
    return value_ids(flat)


def encode_batch(currents: Sequence[Sequence[MachineState]], targets: Sequence[Sequence[MachineState]]) -> np.ndarray:
    """Encode B tasks at once; ``currents[b]`` and ``targets[b]`` hold K states."""
    rows = []
    for cur, tgt in zip(currents, targets):
        rows.append([v for c, t in zip(cur, tgt) for v in c.cells() + t.cells()])
    return value_ids(np.array(rows, dtype=np.int64).reshape(len(rows), -1))


# --- legality masks --------------------------------------------------------------

@lru_cache(maxsize=None)
def slot_masks(space: SpaceConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Masks for opcode, source, and destination given (opcode, source).

    The last mask has shape (22, 22, 22) indexed by [opcode, src, token]; rows
    for non-opcode/non-source prefixes are all False.
    """
    m0 = np.zeros(VOCAB_SIZE, dtype=bool)
    m0[OPCODE0:REG0] = True
    m1 = np.zeros(VOCAB_SIZE, dtype=bool)
    m1[REG0:REG0 + space.num_registers] = True
    m1[DIGIT0:MEM0] = True
    if space.ram:
        m1[MEM0:VOCAB_SIZE] = True
    m2 = np.zeros((VOCAB_SIZE, VOCAB_SIZE, VOCAB_SIZE), dtype=bool)
    for op in range(4):
        for src in np.flatnonzero(m1):
            m2[op, src, REG0:REG0 + space.num_registers] = True
            if space.ram and op != Opcode.IMULL and src < MEM0:
                m2[op, src, MEM0:VOCAB_SIZE] = True
    for arr in (m0, m1, m2):
        arr.setflags(write=False)
    return m0, m1, m2


@lru_cache(maxsize=None)
def action_tokens(space: SpaceConfig) -> np.ndarray:
    """(A, 3) token triples aligned with ``enumerate_actions(space)``."""
    arr = np.array([instruction_tokens(a) for a in enumerate_actions(space)], dtype=np.int64)
    arr.setflags(write=False)
    return arr
