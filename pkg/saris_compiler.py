"""SARIS compiler.

Every grid load of a kernel becomes an indirect stream read on SR0/SR1; the
affine SR2 either stores the results or, when the coefficients do not fit in
the register file, streams the ones left over. Each core then runs a point
loop whose body is a stream launch, one pointer increment and a branch.

When SR2 stores the results and one block fits the FREP buffer, a single
`frep.o` per row repeats the block's FP code for every block of the row and
the integer loop only launches streams. Otherwise each block issues its own
FREP windows.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

from core_program import (
    FP_COEFF_ORDER,
    FP_TEMP_ORDER,
    OP_FOR,
    SR_REGS,
    AffineDesc,
    CoreProgram,
    IndexSet,
    Instr,
    ProgramBuilder,
    TcdmLayout,
    allocate_registers,
    core_iterations,
    emit_point_loops,
    interleave_for,
    list_schedule,
    plan_layout,
)
from stencil_ir import (
    LinearOp,
    StencilSpec,
    TileShape,
    apply_association,
    association_tag,
    lower,
)

POLICIES = ("none", "interleave", "aggressive")
INDEX_LIMIT = 1 << 16


class CompileError(ValueError):
    pass


class InternalConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptConfig:
    """Code generation options shared by the SARIS compiler and the baseline."""
    unroll: int = 1
    reassociation: str = "interleave"
    hardware_loop: bool = True
    cores: int = 8
    accumulators: int = 4
    regfile_budget: int = 12
    launch_cost: int = 3
    frep_length: int = 16
    fpu_latency: int = 3
    allow_spills: bool = True
    reuse_loads: bool = False

    def __post_init__(self):
        if not 1 <= self.unroll <= 4:
            raise CompileError(f"unroll factor must be 1..4, got {self.unroll}")
        if self.reassociation not in POLICIES:
            raise CompileError(f"unknown reassociation policy {self.reassociation!r}")
        if self.cores < 1 or self.launch_cost < 1 or self.frep_length < 1:
            raise CompileError("cores, launch cost and FREP length must be positive")

    @property
    def interleave(self) -> tuple:
        return interleave_for(self.cores)

    @property
    def association(self) -> str:
        return association_tag(self.reassociation, self.accumulators)


@dataclass(frozen=True)
class StreamAssignment:
    """Taps per indirect SR in assignment order, the role of SR2 and the coefficients it streams."""
    sr0: tuple
    sr1: tuple
    sr2_role: str = "output"
    streamed: tuple = ()

    def sr_of(self, tap: str) -> int:
        if tap in self.sr0:
            return 0
        if tap in self.sr1:
            return 1
        raise InternalConsistencyError(f"tap {tap!r} is not mapped to a stream")


@dataclass(frozen=True)
class Slot:
    point: int
    op: LinearOp
    reads: tuple
    writes_sr: bool


@dataclass(frozen=True)
class PointLoopSchedule:
    spec: StencilSpec
    slots: tuple
    unroll: int
    association: str

    def sr_order(self, sr: int) -> list:
        """(point, tap) pairs in the order SR `sr` delivers them."""
        out = []
        for slot in self.slots:
            for read in slot.reads:
                if read[0] == "sr" and read[1] == sr:
                    out.append((slot.point, read[2]))
        return out

    def coefficient_order(self) -> list:
        """Streamed coefficients in the order SR2 delivers them."""
        return [r[1] for slot in self.slots for r in slot.reads if r[0] == "cstream"]


@dataclass(frozen=True)
class IndexArrays:
    sr0: tuple
    sr1: tuple

    def for_sr(self, sr: int) -> tuple:
        return self.sr0 if sr == 0 else self.sr1


@dataclass
class StreamProgram:
    spec: StencilSpec
    tile: TileShape
    opt: OptConfig
    layout: TcdmLayout
    assignment: StreamAssignment
    schedule: PointLoopSchedule
    tail_schedule: PointLoopSchedule
    index_arrays: IndexArrays
    tail_index_arrays: IndexArrays
    cores: list = field(default_factory=list)

    @property
    def association(self) -> str:
        return self.schedule.association


# ----------------------------------------------------------------------------
# Steps 1-3: stream mapping
# ----------------------------------------------------------------------------

def map_loads(spec: StencilSpec) -> set:
    """All taps over all input arrays; none stays a scalar load."""
    return {t.name for t in spec.taps}


def _tap_key(spec: StencilSpec, name: str) -> tuple:
    tap = spec.tap_map[name]
    return (spec.array_slot(tap.array), tap.offset)


def _mirror(offset: tuple) -> tuple | None:
    for axis in range(len(offset) - 1, -1, -1):
        if offset[axis]:
            flipped = list(offset)
            flipped[axis] = -flipped[axis]
            return tuple(flipped)
    return None


def partition(taps, spec: StencilSpec) -> StreamAssignment:
    """Split taps over SR0/SR1 so that operands of one op stream concurrently.

    Operand pairs of one operation go first, then mirror-image pairs, then the
    rest; each goes to the less loaded SR with ties to SR0 and the
    lexicographically greater tap of a pair placed first.
    """
    taps = set(taps)
    lists: tuple = ([], [])
    placed: set = set()

    def less_loaded() -> int:
        return 0 if len(lists[0]) <= len(lists[1]) else 1

    def place_pair(a: str, b: str) -> None:
        hi, lo = sorted((a, b), key=lambda t: _tap_key(spec, t), reverse=True)
        first = less_loaded()
        lists[first].append(hi)
        lists[1 - first].append(lo)
        placed.update((a, b))

    for op in lower(spec):
        operands = []
        for src in op.srcs:
            if src[0] == "tap" and src[1] in taps and src[1] not in placed and src[1] not in operands:
                operands.append(src[1])
        if len(operands) >= 2:
            place_pair(operands[0], operands[1])

    by_position = {(t.array, t.offset): t.name for t in spec.taps if t.name in taps}
    for name in sorted(taps, key=lambda t: _tap_key(spec, t)):
        if name in placed:
            continue
        tap = spec.tap_map[name]
        mirror = _mirror(tap.offset)
        other = by_position.get((tap.array, mirror)) if mirror else None
        if other and other not in placed and other != name:
            place_pair(name, other)

    for name in sorted(taps - placed, key=lambda t: _tap_key(spec, t)):
        lists[less_loaded()].append(name)
        placed.add(name)
    return StreamAssignment(tuple(lists[0]), tuple(lists[1]))


def map_residuals(spec: StencilSpec, assignment: StreamAssignment, regfile_budget: int = 12) -> StreamAssignment:
    """Stream coefficients on SR2 only when they exceed the register budget.

    The most used coefficients keep `regfile_budget` registers; only the rest
    go through SR2, and the outputs then leave through scalar stores.
    """
    if len(spec.coeffs) <= regfile_budget:
        return replace(assignment, sr2_role="output", streamed=())
    uses = Counter(src[1] for op in lower(spec) for src in op.srcs if src[0] == "coeff")
    ranked = sorted(spec.coeffs, key=lambda c: -uses[c.name])
    spill = {c.name for c in ranked[max(regfile_budget, 0):]}
    streamed = tuple(c.name for c in spec.coeffs if c.name in spill)
    return replace(assignment, sr2_role="coefficients", streamed=streamed)


# ----------------------------------------------------------------------------
# Step 4: schedule and index arrays
# ----------------------------------------------------------------------------

def schedule(spec: StencilSpec, assignment: StreamAssignment, opt: OptConfig) -> PointLoopSchedule:
    tag = opt.association
    ops = lower(spec, apply_association(spec.expr, tag))
    final = ops[-1].index
    slots = []
    for point, op in list_schedule(ops, opt.unroll, opt.reassociation, opt.fpu_latency):
        reads = []
        for kind, ref in op.srcs:
            if kind == "tap":
                reads.append(("sr", assignment.sr_of(ref), ref))
            elif kind == "coeff":
                reads.append(("cstream" if ref in assignment.streamed else "coeff", ref))
            else:
                reads.append(("val", ref))
        writes_sr = op.index == final and assignment.sr2_role == "output"
        slots.append(Slot(point, op, tuple(reads), writes_sr))
    return PointLoopSchedule(spec, tuple(slots), opt.unroll, tag)


def emit_index_arrays(sched: PointLoopSchedule, assignment: StreamAssignment,
                      tile: TileShape, opt: OptConfig) -> IndexArrays:
    """Element offsets from the shifted iteration origin, in consumption order."""
    spec = sched.spec
    step_x = opt.interleave[0]
    h = tile.halo
    arrays = []
    for sr in (0, 1):
        out = []
        for point, tap_name in sched.sr_order(sr):
            if tap_name not in (assignment.sr0 if sr == 0 else assignment.sr1):
                raise InternalConsistencyError(f"tap {tap_name!r} read from SR{sr} it is not mapped to")
            tap = spec.tap_map[tap_name]
            shifted = tuple(o + h for o in tap.offset)
            index = spec.array_slot(tap.array) * tile.cells + tile.lin(shifted) + point * step_x
            if not 0 <= index < INDEX_LIMIT:
                raise CompileError(f"index {index} of tap {tap_name} does not fit 16 bits")
            out.append(index)
        arrays.append(tuple(out))
    return IndexArrays(*arrays)


# ----------------------------------------------------------------------------
# Code generation
# ----------------------------------------------------------------------------

def _fp_code(sched: PointLoopSchedule, assignment: StreamAssignment, coeff_regs: dict,
             tile: TileShape, opt: OptConfig) -> tuple:
    """Virtual-register FP code for one schedule, plus scalar stores when SR2 streams coefficients."""
    final = sched.slots[-1].op.index if sched.slots else None
    code = []
    stores = []
    step_bytes = opt.interleave[0] * tile.elem_size
    for slot in sched.slots:
        srcs = []
        for read in slot.reads:
            if read[0] == "sr":
                srcs.append(SR_REGS[read[1]])
            elif read[0] == "coeff":
                srcs.append(coeff_regs[read[1]])
            elif read[0] == "cstream":
                srcs.append(SR_REGS[2])
            else:
                srcs.append(f"%p{slot.point}v{read[1]}")
        value = f"%p{slot.point}v{slot.op.index}"
        rd = SR_REGS[2] if slot.writes_sr else value
        code.append(Instr(OP_FOR[slot.op.op], rd, tuple(srcs)))
        if slot.op.index == final and not slot.writes_sr:
            stores.append(Instr("fsd", rs=(value, "t3"), imm=slot.point * step_bytes))
    pool = [r for r in FP_TEMP_ORDER if r not in SR_REGS and r not in coeff_regs.values()]
    allocated = allocate_registers(code + stores, pool)
    return allocated[:len(code)], allocated[len(code):]


def _launch(b: ProgramBuilder, opt: OptConfig, op: str, args: tuple, rs: tuple = ()) -> None:
    for _ in range(opt.launch_cost - 1):
        b.emit("scfgw", note="launch")
    b.emit(op, rs=rs, args=args)


def _emit_fp(b: ProgramBuilder, code: list, opt: OptConfig, reps: str = "t1") -> None:
    """FP code as FREP windows of near-equal size repeated `reps` times."""
    if not opt.hardware_loop:
        b.extend(code)
        return
    n = -(-len(code) // opt.frep_length)
    start = 0
    for k in range(n):
        size = len(code) // n + (1 if k < len(code) % n else 0)
        b.emit("frep.o", rs=(reps,), imm=size)
        b.extend(code[start:start + size])
        start += size


def _pack_index_words(indices: tuple) -> list:
    """32-bit store values, two 16-bit indices each."""
    padded = list(indices) + [0] * (-len(indices) % 4)
    return [padded[i] | (padded[i + 1] << 16) for i in range(0, len(padded), 2)]


def _core_program(spec: StencilSpec, tile: TileShape, opt: OptConfig, layout: TcdmLayout,
                  assignment: StreamAssignment, blk: PointLoopSchedule, one: PointLoopSchedule,
                  idx_blk: IndexArrays, idx_one: IndexArrays, it) -> CoreProgram:
    core = it.core
    header = (
        f"kernel: {spec.name}  variant: saris  core: {core}",
        f"tile: {'x'.join(map(str, tile.extents))} halo {tile.halo}  unroll: {opt.unroll}  "
        f"policy: {opt.reassociation}  association: {blk.association}",
        f"sr0: {' '.join(assignment.sr0)}  sr1: {' '.join(assignment.sr1)}  sr2: {assignment.sr2_role}",
    )
    b = ProgramBuilder()
    prog = CoreProgram(spec.name, "saris", core, b.instrs, b.labels, unroll=opt.unroll,
                       points=it.points, header=header)
    if it.points == 0:
        return prog

    nx = it.counts[-1]
    nblocks, ntail = divmod(nx, opt.unroll)
    streaming_coeffs = assignment.sr2_role == "coefficients"
    resident = [c.name for c in spec.coeffs if c.name not in assignment.streamed]
    coeff_regs = {name: FP_COEFF_ORDER[i] for i, name in enumerate(resident)}
    blk_code, blk_stores = _fp_code(blk, assignment, coeff_regs, tile, opt)
    one_code, one_stores = _fp_code(one, assignment, coeff_regs, tile, opt)

    # index arrays, each core writes its own copy
    region = layout.index_region(core)
    offset = 0
    sets = []
    for set_name, arrays, needed in (("blk", idx_blk, nblocks), ("one", idx_one, ntail)):
        if not needed:
            continue
        for sr in (0, 1):
            indices = arrays.for_sr(sr)
            if not indices:
                continue
            iset = IndexSet(indices, region + offset)
            prog.index_sets[(sr, set_name)] = iset
            sets.append((sr, set_name, offset, indices))
            offset += iset.words * 8
    if offset > layout.index_stride:
        raise CompileError(f"index arrays need {offset} B, region holds {layout.index_stride} B")
    b.emit("li", "t6", imm=region, note="index arrays")
    for sr, set_name, start, indices in sets:
        for k, word in enumerate(_pack_index_words(indices)):
            b.emit("li", "t4", imm=word)
            b.emit("sw", rs=("t4", "t6"), imm=start + 4 * k)

    prog.preload = ((layout.coeff_base, tuple(c.name for c in spec.coeffs)),)
    if coeff_regs:
        b.emit("li", "t6", imm=layout.coeff_base, note="coefficients")
        for i, c in enumerate(spec.coeffs):
            if c.name in coeff_regs:
                b.emit("fld", coeff_regs[c.name], ("t6",), 8 * i)

    for sr, set_name, _, _ in sets:
        b.emit("srcfg.idx", args=(sr, set_name))

    elem = tile.elem_size
    h = tile.halo
    strides = tile.strides
    first = next(it.coords())
    out_origin = layout.array_base[spec.output_array] + elem * tile.lin(tuple(c + h for c in first))
    inp_base = layout.array_base[spec.input_arrays[0]]
    step_x, step_y = it.steps[-1], it.steps[-2]
    if streaming_coeffs:
        blk_seq = blk.coefficient_order()
        one_seq = one.coefficient_order()
        prog.preload += ((layout.cseq_base, tuple(blk_seq) + tuple(one_seq)),)
        if nblocks:
            prog.affine["cblk"] = AffineDesc(layout.cseq_base, (len(blk_seq), nblocks), (elem, 0))
        if ntail:
            prog.affine["ctail"] = AffineDesc(layout.cseq_base + elem * len(blk_seq),
                                              (len(one_seq), ntail), (elem, 0))
        b.emit("li", "s7", imm=out_origin - (inp_base + elem * tile.lin(first)), note="output distance")
    else:
        bounds = tuple(reversed(it.counts))
        byte_strides = (step_x * elem, step_y * strides[-2] * elem) + \
            ((strides[0] * elem,) if tile.dims == 3 else ())
        prog.affine["out"] = AffineDesc(out_origin, bounds, byte_strides, write=True)
        _launch(b, opt, "srlaunch.aff", (2, "out"))
    row_frep = bool(opt.hardware_loop and nblocks and not blk_stores and len(blk_code) <= opt.frep_length)
    if row_frep:
        b.emit("li", "t5", imm=nblocks, note="block repetitions")
    if opt.hardware_loop:
        b.emit("li", "t1", imm=1, note="single repetition")
    b.emit("srenable")

    def row_hook(b: ProgramBuilder, segment: str) -> None:
        if streaming_coeffs:
            _launch(b, opt, "srlaunch.aff", (2, "cblk" if segment == "blocks" else "ctail"))

    def launcher(set_name: str):
        mask = tuple(sr for sr in (0, 1) if (sr, set_name) in prog.index_sets)

        def emit(b: ProgramBuilder, *_):
            if mask:
                _launch(b, opt, "srlaunch", (mask, set_name), rs=("t0",))
        return emit

    def block_or_tail(set_name: str, code: list, stores: list):
        launch = launcher(set_name)

        def emit(b: ProgramBuilder, *_):
            launch(b)
            _emit_fp(b, code, opt)
            if stores:
                b.emit("add", "t3", ("t0", "s7"))
                b.extend(stores)
        return emit

    def row_lead(b: ProgramBuilder) -> None:
        launcher("blk")(b)
        _emit_fp(b, blk_code, opt, reps="t5")

    start_t0 = inp_base + elem * tile.lin(first)
    prog.body = emit_point_loops(
        b, it, tile, ["t0"], {"t0": start_t0}, opt.unroll,
        launcher("blk") if row_frep else block_or_tail("blk", blk_code, blk_stores),
        block_or_tail("one", one_code, one_stores),
        row_hook=row_hook if streaming_coeffs else None,
        lead=row_lead if row_frep else None,
    )
    b.emit("srfence")
    b.emit("srdisable")
    return prog


def compile(spec: StencilSpec, tile: TileShape, opt: OptConfig | None = None,
            layout: TcdmLayout | None = None) -> StreamProgram:
    opt = opt or OptConfig()
    layout = layout or plan_layout(spec, tile, opt.cores)
    assignment = map_residuals(spec, partition(map_loads(spec), spec), opt.regfile_budget)
    blk = schedule(spec, assignment, opt)
    one = schedule(spec, assignment, replace(opt, unroll=1))
    idx_blk = emit_index_arrays(blk, assignment, tile, opt)
    idx_one = emit_index_arrays(one, assignment, tile, opt)
    tap_reads = sum(1 for op in lower(spec) for src in op.srcs if src[0] == "tap")
    for sched, idx in ((blk, idx_blk), (one, idx_one)):
        if len(idx.sr0) + len(idx.sr1) != sched.unroll * tap_reads:
            raise InternalConsistencyError("stream reads do not cover every tap once per point")

    program = StreamProgram(spec, tile, opt, layout, assignment, blk, one, idx_blk, idx_one)
    for it in core_iterations(tile, opt.cores):
        program.cores.append(
            _core_program(spec, tile, opt, layout, assignment, blk, one, idx_blk, idx_one, it)
        )
    return program
