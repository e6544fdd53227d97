"""Optimized scalar baseline: every tap is an FP load with an immediate offset.

y-neighbours are reached through 12-bit immediates, z-neighbours (and rows
beyond immediate range) through their own base pointers. Coefficients live in
FP registers while they fit; the rest are spilled to the core's stack and
reloaded at each use.
"""
from __future__ import annotations

from dataclasses import dataclass

from core_program import (
    CATEGORY,
    FP_COEFF_ORDER,
    FP_TEMP_ORDER,
    INT_POINTER_ORDER,
    OP_FOR,
    CoreProgram,
    Instr,
    ProgramBuilder,
    RegisterAllocationError,
    TcdmLayout,
    allocate_registers,
    core_iterations,
    emit_point_loops,
    fits_imm,
    list_schedule,
    plan_layout,
)
from saris_compiler import OptConfig
from stencil_ir import StencilSpec, TileShape, apply_association, lower


@dataclass(frozen=True)
class InstructionMix:
    compute: float
    memory: float
    address: float
    control: float
    total: int
    degenerate: bool = False

    @property
    def memory_and_address(self) -> float:
        return self.memory + self.address


def compute_instruction_mix(prog: CoreProgram, scope: str = "body") -> InstructionMix:
    """Share of compute, memory, address and control instructions.

    `scope="body"` looks at the point-loop body only, `"all"` at the whole
    program. An empty selection yields zeros flagged degenerate.
    """
    instrs = prog.body_instrs() if scope == "body" else prog.instrs
    if not instrs:
        return InstructionMix(0.0, 0.0, 0.0, 0.0, 0, degenerate=True)
    counts = {"compute": 0, "memory": 0, "address": 0, "control": 0}
    for ins in instrs:
        counts[CATEGORY[ins.op]] += 1
    n = len(instrs)
    return InstructionMix(counts["compute"] / n, counts["memory"] / n,
                          counts["address"] / n, counts["control"] / n, n)


def _pointer_plan(spec: StencilSpec, tile: TileShape, opt: OptConfig) -> tuple:
    """Base-pointer keys and, per tap, (key, byte offset of point 0)."""
    elem = tile.elem_size
    row = tile.strides[-2]
    step_x = opt.interleave[0]
    reach = (opt.unroll - 1) * step_x

    def split_rows(tap) -> bool:
        dy, dx = tap.offset[-2], tap.offset[-1]
        return not (fits_imm(elem * (dy * row + dx)) and fits_imm(elem * (dy * row + dx + reach)))

    taps = {}
    for tap in spec.taps:
        dz = tap.offset[0] if spec.dims == 3 else 0
        if split_rows(tap):
            key = (tap.array, dz, tap.offset[-2])
            imm = elem * tap.offset[-1]
        else:
            key = (tap.array, dz, 0)
            imm = elem * (tap.offset[-2] * row + tap.offset[-1])
        taps[tap.name] = (key, imm)

    main = (spec.input_arrays[0], 0, 0)
    others = sorted({k for k, _ in taps.values()} - {main},
                    key=lambda k: (spec.array_slot(k[0]), k[1], k[2]))
    keys = [main] + others + [(spec.output_array, 0, 0)]
    if len(keys) > len(INT_POINTER_ORDER):
        raise RegisterAllocationError(f"{spec.name} needs {len(keys)} base pointers")
    return keys, taps


@dataclass(frozen=True)
class LoadRing:
    """x-axis register tiling over taps one point apart in one pointer group.

    `taps` runs lowest x first. Each point loads only the last tap into
    `regs[point % len(regs)]`; the others are the values earlier points loaded.
    """
    key: tuple
    taps: tuple
    regs: tuple

    def reg_for(self, tap: str, point: int) -> str:
        behind = len(self.taps) - 1 - self.taps.index(tap)
        return self.regs[(point - behind) % len(self.regs)]


def _ring_plan(keys: list, taps: dict, step_bytes: int, unroll: int) -> tuple:
    """(key, taps) of the longest run of at most three taps one point apart, trimmed to fit the unroll."""
    best_key, best = None, ()
    for key in keys:
        at = {imm: name for name, (k, imm) in taps.items() if k == key}
        for imm in sorted(at):
            run = [at[imm]]
            while len(run) < 3 and imm + len(run) * step_bytes in at:
                run.append(at[imm + len(run) * step_bytes])
            if len(run) > len(best):
                best_key, best = key, tuple(run)
    width = len(best)
    while width > 1 and not any(q >= width for q in _divisors(unroll)):
        width -= 1
    if width < 2:
        return None, ()
    return best_key, best[-width:]


def _divisors(n: int) -> list:
    return [q for q in range(1, n + 1) if n % q == 0]


def _block_code(spec, ops_order, taps, regs, coeff_regs, spill_slots, tile, opt, hoist,
                advance=(), ring=None, exit_label=None) -> list:
    """Virtual-register body of one block: loads, FP ops, reloads and stores.

    With `advance` every point moves those pointers right after its store, and
    later immediates shrink to match; `exit_label` adds the row-exit test
    after each point but the last.
    """
    step_bytes = opt.interleave[0] * tile.elem_size
    final = max(op.index for _, op in ops_order)
    last_point = max(p for p, _ in ops_order)
    ring_taps = set(ring.taps) if ring else set()
    loads_for = []
    src_reg: dict = {}
    loaded_ring: set = set()
    count = 0
    for i, (point, op) in enumerate(ops_order):
        loads = []
        for j, (kind, ref) in enumerate(op.srcs):
            if kind != "tap":
                continue
            key, imm = taps[ref]
            if ref in ring_taps:
                src_reg[(i, j)] = ring.reg_for(ref, point)
                if ref == ring.taps[-1] and point not in loaded_ring:
                    loaded_ring.add(point)
                    loads.append((src_reg[(i, j)], regs[key], imm, point))
                continue
            src_reg[(i, j)] = f"%L{count}"
            count += 1
            loads.append((src_reg[(i, j)], regs[key], imm, point))
        loads_for.append(loads)

    code = []
    n = len(ops_order)
    emitted = set()
    advanced = 0

    def emit_loads(i):
        if i < n and i not in emitted:
            for rd, base, imm, point in loads_for[i]:
                code.append(Instr("fld", rd, (base,), imm + (point - advanced) * step_bytes))
            emitted.add(i)

    emit_loads(0)
    reload = 0
    out_reg = regs[(spec.output_array, 0, 0)]
    for i, (point, op) in enumerate(ops_order):
        if hoist and (exit_label is None or (i + 1 < n and ops_order[i + 1][0] == point)):
            emit_loads(i + 1)
        emit_loads(i)
        srcs = []
        for j, (kind, ref) in enumerate(op.srcs):
            if kind == "tap":
                srcs.append(src_reg[(i, j)])
            elif kind == "coeff":
                if ref in coeff_regs:
                    srcs.append(coeff_regs[ref])
                else:
                    vreg = f"%R{reload}"
                    reload += 1
                    code.append(Instr("fld", vreg, ("sp",), spill_slots[ref], note="spill reload"))
                    srcs.append(vreg)
            else:
                srcs.append(f"%p{point}v{ref}")
        value = f"%p{point}v{op.index}"
        code.append(Instr(OP_FOR[op.op], value, tuple(srcs)))
        if op.index != final:
            continue
        code.append(Instr("fsd", rs=(value, out_reg), imm=(point - advanced) * step_bytes))
        if advance:
            code.extend(Instr("addi", reg, (reg,), step_bytes) for reg in advance)
            advanced += 1
            if exit_label and point < last_point:
                code.append(Instr("beq", rs=(advance[0], "a0"), label=exit_label))
    return code


def _allocate(spec, tile, opt, taps, regs, ops_blk, ops_one, pointers, ring_plan) -> tuple:
    """Keep as many coefficients resident as the register file allows."""
    names = [c.name for c in spec.coeffs]
    hoist = opt.reassociation != "none"
    ring_key, ring_taps = ring_plan
    for resident in range(len(names), -1, -1):
        coeff_regs = {name: FP_COEFF_ORDER[i] for i, name in enumerate(names[:resident])}
        spill_slots = {name: 8 * k for k, name in enumerate(names[resident:])}
        pool = [r for r in FP_TEMP_ORDER if r not in coeff_regs.values()]
        ring = None
        if opt.reuse_loads and ring_taps:
            q = min(d for d in _divisors(opt.unroll) if d >= len(ring_taps))
            ring = LoadRing(ring_key, ring_taps, tuple(pool[-q:]))
            pool = pool[:-q]
        try:
            if opt.reuse_loads:
                blk = allocate_registers(_block_code(spec, ops_blk, taps, regs, coeff_regs, spill_slots,
                                                     tile, opt, hoist, pointers, ring, "xdone"), pool)
                one = []
            else:
                blk = allocate_registers(_block_code(spec, ops_blk, taps, regs, coeff_regs, spill_slots,
                                                     tile, opt, hoist, pointers), pool)
                one = allocate_registers(_block_code(spec, ops_one, taps, regs, coeff_regs, spill_slots,
                                                     tile, opt, hoist), pool)
        except RegisterAllocationError:
            if not opt.allow_spills:
                raise
            continue
        return coeff_regs, spill_slots, ring, blk, one
    raise RegisterAllocationError(f"{spec.name}: no allocation even with all coefficients spilled")


def compile_baseline(spec: StencilSpec, tile: TileShape, opt: OptConfig | None = None,
                     core: int = 0, layout: TcdmLayout | None = None) -> CoreProgram:
    """BASE code for one core.

    Every point advances its base pointers. `reuse_loads` turns on register
    tiling along x: points run in order, each testing the row exit, and up to
    two loads per point come from registers the previous points filled.
    """
    opt = opt or OptConfig()
    layout = layout or plan_layout(spec, tile, opt.cores)
    it = core_iterations(tile, opt.cores)[core]
    expr = apply_association(spec.expr, opt.association)
    ops = lower(spec, expr)
    ops_one = list_schedule(ops, 1, opt.reassociation, opt.fpu_latency)
    if opt.reuse_loads:
        ops_blk = [(p, op) for p in range(opt.unroll) for _, op in ops_one]
    else:
        ops_blk = list_schedule(ops, opt.unroll, opt.reassociation, opt.fpu_latency)

    keys, taps = _pointer_plan(spec, tile, opt)
    regs = dict(zip(keys, INT_POINTER_ORDER))
    pointers = [regs[k] for k in keys]
    step_bytes = opt.interleave[0] * tile.elem_size
    ring_plan = _ring_plan(keys, taps, step_bytes, opt.unroll) if opt.reuse_loads else (None, ())
    coeff_regs, spill_slots, ring, blk, one = _allocate(
        spec, tile, opt, taps, regs, ops_blk, ops_one, pointers, ring_plan)

    header = (
        f"kernel: {spec.name}  variant: base  core: {core}",
        f"tile: {'x'.join(map(str, tile.extents))} halo {tile.halo}  unroll: {opt.unroll}  "
        f"policy: {opt.reassociation}  association: {opt.association}",
        f"resident coefficients: {len(coeff_regs)}  spilled: {len(spill_slots)}"
        + (f"  register tiling: {' '.join(ring.taps)}" if ring else ""),
    )
    b = ProgramBuilder()
    prog = CoreProgram(spec.name, "base", core, b.instrs, b.labels, unroll=opt.unroll,
                       points=it.points, header=header,
                       preload=((layout.coeff_base, tuple(c.name for c in spec.coeffs)),))
    if it.points == 0:
        return prog

    if spec.coeffs:
        b.emit("li", "t6", imm=layout.coeff_base, note="coefficients")
        index = {c.name: i for i, c in enumerate(spec.coeffs)}
        for name, reg in coeff_regs.items():
            b.emit("fld", reg, ("t6",), 8 * index[name])
        if spill_slots:
            b.emit("li", "sp", imm=layout.stack_top(core), note="stack")
            for name, slot in spill_slots.items():
                b.emit("fld", "ft0", ("t6",), 8 * index[name])
                b.emit("fsd", rs=("ft0", "sp"), imm=slot, note="spill")

    elem = tile.elem_size
    h = tile.halo
    first = next(it.coords())
    starts = {}
    for key in keys:
        array, dz, dy = key
        coords = list(c + h for c in first)
        if spec.dims == 3:
            coords[0] += dz
        coords[-2] += dy
        starts[regs[key]] = layout.array_base[array] + elem * tile.lin(tuple(coords))

    def ring_prologue(b: ProgramBuilder, segment: str) -> None:
        # values the first point of a row reads from points before it
        lead_imm = taps[ring.taps[-1]][1]
        for behind in range(1, len(ring.taps)):
            b.emit("fld", ring.regs[-behind % len(ring.regs)], (regs[ring.key],),
                   lead_imm - behind * step_bytes, note="register tiling")

    prog.body = emit_point_loops(
        b, it, tile, pointers, starts, opt.unroll,
        lambda b: b.extend(blk),
        lambda b, k: b.extend(one),
        row_hook=ring_prologue if ring else None,
        block_advances=True,
        point_exits=opt.reuse_loads,
    )
    return prog


def compile_baseline_cluster(spec: StencilSpec, tile: TileShape, opt: OptConfig | None = None) -> list:
    opt = opt or OptConfig()
    layout = plan_layout(spec, tile, opt.cores)
    return [compile_baseline(spec, tile, opt, core, layout) for core in range(opt.cores)]


def uses_stack(prog: CoreProgram) -> bool:
    return any("sp" in ins.rs for ins in prog.instrs)
