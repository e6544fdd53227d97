"""Abstract RV32G-style ISA shared by both code generators.

A `CoreProgram` is a flat instruction list with labels plus the stream
metadata its configuration instructions refer to (index sets and affine
descriptors). This module also owns the pieces both generators need:
per-core iteration sets, the TCDM layout, list scheduling of unrolled
point ops, linear-scan register allocation, the point-loop skeleton and
the listing serializer.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

from stencil_ir import StencilSpec, TileShape

TCDM_BYTES = 128 * 1024
IMM_MIN, IMM_MAX = -2048, 2047

SR_REGS = ("ft0", "ft1", "ft2")
FP_TEMP_ORDER = tuple(f"ft{i}" for i in range(12)) + tuple(f"fa{i}" for i in range(8)) \
    + tuple(f"fs{i}" for i in range(11, -1, -1))
FP_COEFF_ORDER = tuple(f"fs{i}" for i in range(12)) + tuple(f"fa{i}" for i in range(7, -1, -1)) \
    + tuple(f"ft{i}" for i in range(11, -1, -1))
INT_POINTER_ORDER = ("t0", "t1", "t2", "t3", "t4", "t5", "a1", "a2", "a3", "a4", "a5", "a6",
                     "a7", "s0", "s2", "s5", "s6", "s7", "s8", "s9", "s10", "s11")

FP_ARITH = {"fadd.d": "add", "fmul.d": "mul", "fmadd.d": "fma"}
FP_OPS = set(FP_ARITH) | {"fmv.d", "fld", "fsd"}
OP_FOR = {v: k for k, v in FP_ARITH.items()} | {"mov": "fmv.d"}

CATEGORY = {
    "fadd.d": "compute", "fmul.d": "compute", "fmadd.d": "compute",
    "fld": "memory", "fsd": "memory", "sw": "memory", "fmv.d": "memory",
    "li": "address", "addi": "address", "add": "address", "mv": "address",
    "scfgw": "address", "srlaunch": "address", "srlaunch.aff": "address",
    "srcfg.idx": "address", "srenable": "address", "srdisable": "address",
    "bne": "control", "beq": "control", "frep.o": "control", "srfence": "control",
}


class RegisterAllocationError(RuntimeError):
    pass


class TcdmCapacityError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Program representation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Instr:
    op: str
    rd: str | None = None
    rs: tuple = ()
    imm: int = 0
    label: str | None = None
    args: tuple = ()
    note: str = ""

    @property
    def is_fp(self) -> bool:
        return self.op in FP_OPS

    def text(self) -> str:
        op, rd, rs = self.op, self.rd, self.rs
        if op == "fld":
            ops = f"{rd}, {self.imm}({rs[0]})"
        elif op in ("fsd", "sw"):
            ops = f"{rs[0]}, {self.imm}({rs[1]})"
        elif op == "li":
            ops = f"{rd}, {self.imm}"
        elif op == "addi":
            ops = f"{rd}, {rs[0]}, {self.imm}"
        elif op in ("bne", "beq"):
            ops = f"{rs[0]}, {rs[1]}, {self.label}"
        elif op == "frep.o":
            ops = f"{rs[0]}, {self.imm}"
        elif op == "srlaunch":
            mask, set_name = self.args
            ops = "|".join(f"sr{s}" for s in mask) + f", {rs[0]}, {set_name}"
        elif op in ("srlaunch.aff", "srcfg.idx"):
            ops = f"sr{self.args[0]}, {self.args[1]}"
        else:
            ops = ", ".join(([rd] if rd else []) + list(rs))
        line = f"    {op:<13}{ops}".rstrip()
        if self.note:
            line = f"{line:<44}# {self.note}"
        return line


@dataclass(frozen=True)
class IndexSet:
    """16-bit element indices of one indirect SR, stored four per 64-bit word."""
    indices: tuple
    addr: int

    @property
    def words(self) -> int:
        return (len(self.indices) + 3) // 4


@dataclass(frozen=True)
class AffineDesc:
    """Up to four nested loops, innermost first; strides in bytes."""
    base: int
    bounds: tuple
    strides: tuple
    write: bool = False

    @property
    def length(self) -> int:
        n = 1
        for b in self.bounds:
            n *= b
        return n

    def addresses(self):
        counters = [0] * len(self.bounds)
        for _ in range(self.length):
            yield self.base + sum(c * s for c, s in zip(counters, self.strides))
            for d, bound in enumerate(self.bounds):
                counters[d] += 1
                if counters[d] < bound:
                    break
                counters[d] = 0


@dataclass
class CoreProgram:
    kernel: str
    variant: str
    core: int
    instrs: list
    labels: dict
    body: tuple = (0, 0)
    index_sets: dict = field(default_factory=dict)
    affine: dict = field(default_factory=dict)
    unroll: int = 1
    points: int = 0
    header: tuple = ()
    preload: tuple = ()

    def body_instrs(self) -> list:
        return self.instrs[self.body[0]:self.body[1]]


# ----------------------------------------------------------------------------
# Work distribution
# ----------------------------------------------------------------------------

def interleave_for(cores: int) -> tuple:
    """(x, y) interleave factors; eight cores give 4 x 2."""
    ix = min(cores, 4)
    while cores % ix:
        ix -= 1
    return ix, cores // ix


@dataclass(frozen=True)
class CoreIteration:
    """Interior points owned by one core: x = x0 + k*ix, y = y0 + j*iy, all z."""
    core: int
    start: tuple
    counts: tuple
    steps: tuple

    @property
    def points(self) -> int:
        n = 1
        for c in self.counts:
            n *= c
        return n

    def coords(self):
        """Interior coordinates in loop order (x fastest)."""
        if len(self.counts) == 2:
            (ny, nx), (y0, x0), (sy, sx) = self.counts, self.start, self.steps
            for j in range(ny):
                for k in range(nx):
                    yield (y0 + j * sy, x0 + k * sx)
        else:
            (nz, ny, nx), (_, y0, x0), (_, sy, sx) = self.counts, self.start, self.steps
            for z in range(nz):
                for j in range(ny):
                    for k in range(nx):
                        yield (z, y0 + j * sy, x0 + k * sx)


def core_iterations(tile: TileShape, cores: int) -> list:
    """Interleaved ownership; non-divisible remainders land on lower-index cores."""
    ix, iy = interleave_for(cores)
    interior = tile.interior
    out = []
    for core in range(cores):
        i, j = core % ix, core // ix
        nx = len(range(i, interior[-1], ix))
        ny = len(range(j, interior[-2], iy))
        if tile.dims == 2:
            out.append(CoreIteration(core, (j, i), (ny, nx), (iy, ix)))
        else:
            out.append(CoreIteration(core, (0, j, i), (interior[0], ny, nx), (1, iy, ix)))
    return out


# ----------------------------------------------------------------------------
# TCDM layout
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TcdmLayout:
    array_base: dict
    coeff_base: int
    cseq_base: int
    index_base: int
    index_stride: int
    stack_base: int
    stack_stride: int
    end: int

    def index_region(self, core: int) -> int:
        return self.index_base + core * self.index_stride

    def stack_top(self, core: int) -> int:
        return self.stack_base + core * self.stack_stride


def _align(n: int, a: int = 64) -> int:
    return (n + a - 1) // a * a


def plan_layout(spec: StencilSpec, tile: TileShape, cores: int = 8,
                capacity: int = TCDM_BYTES) -> TcdmLayout:
    """Arrays back to back (inputs, then output), then tables, indices and stacks."""
    names = list(spec.input_arrays) + [spec.output_array]
    bases = {name: spec.array_slot(name) * tile.nbytes for name in names}
    cursor = len(names) * tile.nbytes
    coeff_base = cursor
    cursor = _align(cursor + 8 * max(1, len(spec.coeffs)))
    cseq_base = cursor
    cursor = _align(cursor + 8 * 5 * max(1, len(spec.coeffs)) * 2)
    index_base, index_stride = cursor, 512
    cursor += index_stride * cores
    stack_base, stack_stride = cursor, 512
    cursor += stack_stride * cores
    if cursor > capacity:
        raise TcdmCapacityError(f"{spec.name} working set needs {cursor} B, TCDM holds {capacity} B")
    return TcdmLayout(bases, coeff_base, cseq_base, index_base, index_stride,
                      stack_base, stack_stride, cursor)


# ----------------------------------------------------------------------------
# Scheduling and register allocation
# ----------------------------------------------------------------------------

def list_schedule(ops: list, unroll: int, policy: str, latency: int) -> list:
    """Order the ops of `unroll` points as (point, LinearOp) slots.

    `none` keeps point-major source order. Otherwise ops are list-scheduled
    on a single-issue FPU with the given latency, preferring slot-major
    order among equally ready ops. Point results stay in point order.
    """
    if policy == "none":
        return [(p, op) for p in range(unroll) for op in ops]

    final = ops[-1].index
    deps = {}
    for p in range(unroll):
        for op in ops:
            d = [(p, s[1]) for s in op.srcs if s[0] == "val"]
            if op.index == final and p > 0:
                d.append((p - 1, final))
            deps[(p, op.index)] = d
    by_key = {(p, op.index): op for p in range(unroll) for op in ops}
    done: dict = {}
    order = []
    t = 0
    pending = set(by_key)
    while pending:
        best = None
        for key in pending:
            if any(d not in done for d in deps[key]):
                continue
            ready = max([t] + [done[d] + latency for d in deps[key]
                               if not (key[1] == final and d[1] == final)])
            rank = (ready, key[1], key[0])
            if best is None or rank < best[0]:
                best = (rank, key)
        (ready, _, _), key = best
        done[key] = ready
        order.append((key[0], by_key[key]))
        pending.remove(key)
        t = ready + 1
    return order


def allocate_registers(instrs: list, pool: list, fixed: dict | None = None) -> list:
    """Linear scan over straight-line code with virtual registers named `%...`.

    A register whose last read is at instruction i may be reused as the
    destination of instruction i. Raises RegisterAllocationError when the
    pool runs dry.
    """
    fixed = dict(fixed or {})
    last_use: dict = {}
    for i, ins in enumerate(instrs):
        for r in ins.rs:
            if r.startswith("%"):
                last_use[r] = i
    free = [(pos, reg) for pos, reg in enumerate(pool)]
    heapq.heapify(free)
    rank = {reg: pos for pos, reg in enumerate(pool)}
    mapping = dict(fixed)
    out = []
    for i, ins in enumerate(instrs):
        srcs = tuple(mapping.get(r, r) if r.startswith("%") else r for r in ins.rs)
        for r in set(ins.rs):
            if r.startswith("%") and last_use.get(r) == i and r in mapping and r not in fixed:
                heapq.heappush(free, (rank[mapping[r]], mapping[r]))
        rd = ins.rd
        if rd and rd.startswith("%"):
            if rd not in mapping:
                if not free:
                    raise RegisterAllocationError(f"out of FP registers at `{ins.op}` (slot {i})")
                mapping[rd] = heapq.heappop(free)[1]
                if rd not in last_use:
                    # dead definition; release right away
                    heapq.heappush(free, (rank[mapping[rd]], mapping[rd]))
            rd = mapping[rd]
        out.append(replace(ins, rd=rd, rs=srcs))
    return out


# ----------------------------------------------------------------------------
# Program construction
# ----------------------------------------------------------------------------

def fits_imm(value: int) -> bool:
    return IMM_MIN <= value <= IMM_MAX


class ProgramBuilder:
    def __init__(self):
        self.instrs: list = []
        self.labels: dict = {}

    def emit(self, op, rd=None, rs=(), imm=0, label=None, args=(), note=""):
        self.instrs.append(Instr(op, rd, tuple(rs), imm, label, tuple(args), note))

    def extend(self, instrs):
        self.instrs.extend(instrs)

    def mark(self, label: str) -> None:
        self.labels[label] = len(self.instrs)

    def here(self) -> int:
        return len(self.instrs)

    def add_const(self, rd: str, rs: str, value: int, note: str = "") -> None:
        if fits_imm(value):
            self.emit("addi", rd, (rs,), value, note=note)
        else:
            self.emit("li", "t6", imm=value)
            self.emit("add", rd, (rs, "t6"), note=note)


def emit_point_loops(b: ProgramBuilder, it: CoreIteration, tile: TileShape, pointers: list,
                     start_values: dict, unroll: int, block, tail,
                     row_hook=None, lead=None, block_advances=False, point_exits=False) -> tuple:
    """Emit the z/y/x loop nest for one core and return the block-loop body range.

    `pointers[0]` controls the loops; every pointer advances by the same byte
    amounts. `block(b)` emits one unrolled block, `tail(b, k)` one remainder
    point, `row_hook(b, segment)` runs before each row segment ("blocks" or
    "tail"). `lead(b)` replaces the first block of every row and the block
    loop then covers the remaining ones. With `block_advances` the block code
    moves the pointers itself. With `point_exits` it also leaves the row
    through `beq t0, a0, xdone` after any point, so rows need no tail.
    """
    if it.points == 0:
        return (b.here(), b.here())
    elem = tile.elem_size
    strides = tile.strides
    nx = it.counts[-1]
    ny = it.counts[-2]
    sx, sy = it.steps[-1], it.steps[-2]
    nblocks, ntail = divmod(nx, unroll)
    if point_exits:
        nblocks, ntail, block_advances = 1, 0, True
    x_step = sx * elem
    row_span = nx * x_step if point_exits else nblocks * unroll * x_step
    row_bytes = sy * strides[-2] * elem
    row_adv = row_bytes - nx * x_step
    t0 = pointers[0]

    for reg in pointers:
        b.emit("li", reg, imm=start_values[reg])
    if tile.dims == 3:
        nz = it.counts[0]
        plane_bytes = strides[0] * elem
        b.emit("li", "s4", imm=ny * row_bytes, note="row span of a plane")
        b.emit("li", "s1", imm=start_values[t0] + nz * plane_bytes, note="end of z loop")
        b.mark("zloop")
        b.emit("add", "s3", (t0, "s4"))
    else:
        b.emit("li", "s3", imm=start_values[t0] + ny * row_bytes, note="end of y loop")

    b.mark("yloop")
    body = (b.here(), b.here())
    if nblocks:
        if row_hook:
            row_hook(b, "blocks")
        b.add_const("a0", t0, row_span)
        if lead:
            lead(b)
            for reg in pointers:
                b.emit("addi", reg, (reg,), unroll * x_step)
            b.emit("beq", rs=(t0, "a0"), label="xdone")
        b.mark("xloop")
        start = b.here()
        block(b)
        if not block_advances:
            for reg in pointers:
                b.emit("addi", reg, (reg,), unroll * x_step)
        b.emit("bne", rs=(t0, "a0"), label="xloop")
        body = (start, b.here())
        if lead or point_exits:
            b.mark("xdone")
    if ntail:
        if row_hook:
            row_hook(b, "tail")
        for k in range(ntail):
            tail_start = b.here()
            tail(b, k)
            for reg in pointers:
                b.emit("addi", reg, (reg,), x_step)
            if not nblocks and k == 0:
                body = (tail_start, b.here())
    if row_adv:
        for reg in pointers:
            b.add_const(reg, reg, row_adv)
    b.emit("bne", rs=(t0, "s3"), label="yloop")
    if tile.dims == 3:
        plane_adv = plane_bytes - ny * row_bytes
        if plane_adv:
            for reg in pointers:
                b.add_const(reg, reg, plane_adv)
        b.emit("bne", rs=(t0, "s1"), label="zloop")
    return body


def format_listing(prog: CoreProgram) -> str:
    """Assembly-like listing: header comments, stream data, then labelled code."""
    lines = [f"# {h}" for h in prog.header]
    for (sr, name), iset in sorted(prog.index_sets.items()):
        lines.append(f".indices sr{sr}.{name} @{iset.addr}: " + ", ".join(str(i) for i in iset.indices))
    for name, desc in sorted(prog.affine.items()):
        kind = "write" if desc.write else "read"
        lines.append(f".affine {name} {kind} base={desc.base} bounds={list(desc.bounds)} "
                     f"strides={list(desc.strides)}")
    at = {}
    for label, pos in prog.labels.items():
        at.setdefault(pos, []).append(label)
    for i, ins in enumerate(prog.instrs):
        for label in sorted(at.get(i, [])):
            lines.append(f"{label}:")
        lines.append(ins.text())
    for label in sorted(at.get(len(prog.instrs), [])):
        lines.append(f"{label}:")
    return "\n".join(lines) + "\n"

