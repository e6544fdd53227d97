"""Stencil kernel intermediate representation.

Holds the declarative kernel description (`StencilSpec`), tile geometry
(`TileShape`), the line-oriented kernel grammar with its canonical
serializer, the shipped kernel catalog, and the two expression transforms
shared by both code generators: lowering to three-address operations and
sum reassociation into partial accumulators.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Union

KERNEL_DIR = Path(__file__).resolve().parent / "kernels"

CATALOG_ORDER = (
    "jacobi_2d",
    "j2d5pt",
    "box2d1r",
    "j2d9pt",
    "j2d9pt_gol",
    "star2d3r",
    "star3d2r",
    "ac_iso_cd",
    "box3d1r",
    "j3d27pt",
)

ARITY = {"add": 2, "mul": 2, "fma": 3}
FLOPS = {"add": 1, "mul": 1, "fma": 2}
ARRAY_ROLES = ("input", "extra", "output")
SECTIONS = ("grid", "taps", "coeffs", "expr")


class StencilSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class StencilInvariantError(ValueError):
    pass


class StencilStructureError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Types
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Ref:
    """Leaf of an expression: names a tap or a coefficient."""
    name: str


@dataclass(frozen=True)
class Node:
    """Arithmetic node. `fma(a, b, c)` computes a*b + c."""
    op: str
    args: tuple

    def __post_init__(self):
        if self.op not in ARITY or len(self.args) != ARITY[self.op]:
            raise StencilStructureError(f"malformed node {self.op!r} with {len(self.args)} operands")


Expr = Union[Ref, Node]


@dataclass(frozen=True)
class IoArray:
    name: str
    role: str


@dataclass(frozen=True)
class Tap:
    name: str
    offset: tuple
    array: str


@dataclass(frozen=True)
class Coeff:
    name: str
    value: float
    dynamic: bool = False


@dataclass(frozen=True)
class StencilSpec:
    name: str
    dims: int
    radius: int
    io_arrays: tuple
    taps: tuple
    coeffs: tuple
    expr: Expr

    def __post_init__(self):
        validate_spec(self)

    @property
    def tap_map(self) -> dict:
        return {t.name: t for t in self.taps}

    @property
    def coeff_map(self) -> dict:
        return {c.name: c for c in self.coeffs}

    @property
    def output_array(self) -> str:
        return next(a.name for a in self.io_arrays if a.role == "output")

    @property
    def input_arrays(self) -> tuple:
        """Arrays that are read, in declaration order (current input first)."""
        return tuple(a.name for a in self.io_arrays if a.role != "output")

    def array_slot(self, name: str) -> int:
        """Position of an array in the tile layout: inputs first, output last."""
        order = list(self.input_arrays) + [self.output_array]
        return order.index(name)


@dataclass(frozen=True)
class TileShape:
    """Tile geometry in cells, halo included; axes ordered (z, y, x) or (y, x)."""
    extents: tuple
    halo: int
    elem_size: int = 8

    def __post_init__(self):
        if any(n - 2 * self.halo <= 0 for n in self.extents):
            raise StencilInvariantError(
                f"tile {self.extents} has no interior for halo {self.halo}"
            )

    @classmethod
    def for_spec(cls, spec: StencilSpec, extent: int | None = None) -> "TileShape":
        if extent is None:
            extent = 64 if spec.dims == 2 else 16
        return cls(extents=(extent,) * spec.dims, halo=spec.radius)

    @property
    def dims(self) -> int:
        return len(self.extents)

    @property
    def interior(self) -> tuple:
        return tuple(n - 2 * self.halo for n in self.extents)

    @property
    def cells(self) -> int:
        return math.prod(self.extents)

    @property
    def interior_cells(self) -> int:
        return math.prod(self.interior)

    @property
    def nbytes(self) -> int:
        return self.cells * self.elem_size

    @property
    def strides(self) -> tuple:
        """Cell strides per axis (x fastest)."""
        out, acc = [], 1
        for n in reversed(self.extents):
            out.append(acc)
            acc *= n
        return tuple(reversed(out))

    def lin(self, coords) -> int:
        return sum(c * s for c, s in zip(coords, self.strides))


# ----------------------------------------------------------------------------
# Validation and counting
# ----------------------------------------------------------------------------

def iter_refs(expr: Expr):
    if isinstance(expr, Ref):
        yield expr.name
        return
    if not isinstance(expr, Node):
        raise StencilStructureError(f"malformed expression node {expr!r}")
    for arg in expr.args:
        yield from iter_refs(arg)


def _expr_flops(expr: Expr) -> int:
    if isinstance(expr, Ref):
        return 0
    if not isinstance(expr, Node) or expr.op not in FLOPS:
        raise StencilStructureError(f"malformed expression node {expr!r}")
    return FLOPS[expr.op] + sum(_expr_flops(a) for a in expr.args)


def flop_count(spec_or_expr) -> int:
    """FLOPs per grid point: add and mul count 1, fma counts 2."""
    expr = spec_or_expr.expr if isinstance(spec_or_expr, StencilSpec) else spec_or_expr
    return _expr_flops(expr)


def validate_spec(spec: StencilSpec) -> None:
    if spec.dims not in (2, 3):
        raise StencilInvariantError(f"dims must be 2 or 3, got {spec.dims}")
    if spec.radius < 0:
        raise StencilInvariantError(f"negative radius {spec.radius}")
    roles = [a.role for a in spec.io_arrays]
    if any(r not in ARRAY_ROLES for r in roles):
        raise StencilInvariantError(f"unknown array role in {roles}")
    if roles.count("output") != 1 or roles.count("input") != 1:
        raise StencilInvariantError("exactly one input and one output array required")
    if not spec.taps:
        raise StencilInvariantError("no taps")

    names = [t.name for t in spec.taps] + [c.name for c in spec.coeffs]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise StencilInvariantError(f"duplicate identifiers {sorted(dup)}")

    readable = set(spec.input_arrays)
    for tap in spec.taps:
        if len(tap.offset) != spec.dims:
            raise StencilInvariantError(f"tap {tap.name} offset {tap.offset} has wrong rank")
        if max(abs(o) for o in tap.offset) > spec.radius:
            raise StencilInvariantError(
                f"tap {tap.name} offset {tap.offset} exceeds radius {spec.radius}"
            )
        if tap.array not in readable:
            raise StencilInvariantError(f"tap {tap.name} reads unknown array {tap.array!r}")

    declared = set(names)
    used = set(iter_refs(spec.expr))
    dangling = used - declared
    if dangling:
        raise StencilInvariantError(f"expression references undeclared ids {sorted(dangling)}")
    unused = declared - used
    if unused:
        raise StencilInvariantError(f"declared but unused ids {sorted(unused)}")
    _expr_flops(spec.expr)


# ----------------------------------------------------------------------------
# Grammar
# ----------------------------------------------------------------------------

_TOKEN = re.compile(r"(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<punct>[(),])")


class _ExprParser:
    def __init__(self, text: str, line: int, col0: int, env: dict):
        self.text, self.line, self.col0, self.env = text, line, col0, env
        self.tokens = []
        pos = 0
        while True:
            while pos < len(text) and text[pos].isspace():
                pos += 1
            if pos >= len(text):
                break
            m = _TOKEN.match(text, pos)
            if not m:
                raise StencilSyntaxError(f"unexpected character {text[pos]!r}", line, col0 + pos)
            kind = "id" if m.group("id") else "punct"
            self.tokens.append((m.group(kind), col0 + m.start(kind)))
            pos = m.end()
        self.i = 0

    def _peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, self.col0 + len(self.text))

    def _take(self, expected=None):
        tok, col = self._peek()
        if tok is None:
            raise StencilSyntaxError("unexpected end of expression", self.line, col)
        if expected is not None and tok != expected:
            raise StencilSyntaxError(f"expected {expected!r}, found {tok!r}", self.line, col)
        self.i += 1
        return tok, col

    def parse(self) -> Expr:
        expr = self._expr()
        tok, col = self._peek()
        if tok is not None:
            raise StencilSyntaxError(f"trailing token {tok!r}", self.line, col)
        return expr

    def _expr(self) -> Expr:
        tok, col = self._take()
        if tok in ARITY:
            self._take("(")
            args = [self._expr()]
            while self._peek()[0] == ",":
                self._take(",")
                args.append(self._expr())
            self._take(")")
            if len(args) != ARITY[tok]:
                raise StencilSyntaxError(f"{tok} takes {ARITY[tok]} operands, got {len(args)}",
                                         self.line, col)
            return Node(tok, tuple(args))
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", tok):
            raise StencilSyntaxError(f"unexpected {tok!r}", self.line, col)
        return self.env.get(tok, Ref(tok))


def parse_spec(text: str) -> StencilSpec:
    """Parse the sectioned kernel grammar into a validated `StencilSpec`."""
    section = None
    grid = {}
    taps, coeffs, arrays = [], [], []
    env: dict = {}
    result = None
    last_line = 0

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indent = len(line) - len(line.lstrip())
        words = line.split()
        if words[0] in SECTIONS and len(words) == 1:
            section = words[0]
            continue
        if section is None:
            raise StencilSyntaxError(f"content outside a section: {words[0]!r}", lineno, indent + 1)

        if section == "grid":
            key = words[0]
            if key == "arrays":
                for item in words[1:]:
                    name, _, role = item.partition(":")
                    if role not in ARRAY_ROLES:
                        raise StencilSyntaxError(f"bad array role in {item!r}", lineno,
                                                 line.index(item) + 1)
                    arrays.append(IoArray(name, role))
            elif key in ("name", "dims", "radius") and len(words) == 2:
                grid[key] = words[1]
            else:
                raise StencilSyntaxError(f"unknown grid entry {key!r}", lineno, indent + 1)

        elif section == "taps":
            if len(words) < 3:
                raise StencilSyntaxError("tap needs a name, an array and offsets", lineno, indent + 1)
            try:
                offset = tuple(int(w) for w in words[2:])
            except ValueError:
                raise StencilSyntaxError(f"non-integer offset in {words[2:]}", lineno,
                                         line.index(words[2]) + 1) from None
            taps.append(Tap(words[0], offset, words[1]))

        elif section == "coeffs":
            if len(words) == 3 and words[1] == "dynamic":
                value_word, dynamic = words[2], True
            elif len(words) == 2:
                value_word, dynamic = words[1], False
            else:
                raise StencilSyntaxError("coefficient needs a name and a value", lineno, indent + 1)
            try:
                value = float(value_word)
            except ValueError:
                raise StencilSyntaxError(f"bad coefficient value {value_word!r}", lineno,
                                         line.index(value_word) + 1) from None
            coeffs.append(Coeff(words[0], value, dynamic))

        else:
            target, eq, rhs = line.partition("=")
            target = target.strip()
            if not eq or not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", target):
                raise StencilSyntaxError("expected `name = expression`", lineno, indent + 1)
            expr = _ExprParser(rhs, lineno, line.index("=") + 2, env).parse()
            env[target] = expr
            result = (target, expr)
            last_line = lineno

    for key in ("name", "dims", "radius"):
        if key not in grid:
            raise StencilSyntaxError(f"grid section lacks {key!r}", max(last_line, 1))
    if result is None:
        raise StencilSyntaxError("missing expr section", max(last_line, 1))
    try:
        dims, radius = int(grid["dims"]), int(grid["radius"])
    except ValueError:
        raise StencilSyntaxError("dims and radius must be integers", 1) from None

    spec = StencilSpec(
        name=grid["name"],
        dims=dims,
        radius=radius,
        io_arrays=tuple(arrays),
        taps=tuple(taps),
        coeffs=tuple(coeffs),
        expr=result[1],
    )
    if result[0] != spec.output_array:
        raise StencilSyntaxError(f"last statement must assign {spec.output_array!r}", last_line)
    return spec


def format_expr(expr: Expr) -> str:
    if isinstance(expr, Ref):
        return expr.name
    return f"{expr.op}({', '.join(format_expr(a) for a in expr.args)})"


def serialize_spec(spec: StencilSpec) -> str:
    """Canonical text form; `parse_spec(serialize_spec(s)) == s`."""
    lines = [
        "grid",
        f"  name {spec.name}",
        f"  dims {spec.dims}",
        f"  radius {spec.radius}",
        "  arrays " + " ".join(f"{a.name}:{a.role}" for a in spec.io_arrays),
        "taps",
    ]
    lines += [f"  {t.name} {t.array} " + " ".join(str(o) for o in t.offset) for t in spec.taps]
    lines.append("coeffs")
    for c in spec.coeffs:
        marker = "dynamic " if c.dynamic else ""
        lines.append(f"  {c.name} {marker}{c.value!r}")
    lines += ["expr", f"  {spec.output_array} = {format_expr(spec.expr)}"]
    return "\n".join(lines) + "\n"


def load_kernel(path) -> StencilSpec:
    return parse_spec(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def catalog() -> tuple:
    """The ten shipped kernels, ordered by FLOPs per grid point."""
    return tuple(load_kernel(KERNEL_DIR / f"{name}.stencil") for name in CATALOG_ORDER)


def kernel_by_name(name: str) -> StencilSpec:
    for path in (KERNEL_DIR / f"{name}.stencil", KERNEL_DIR / "extra" / f"{name}.stencil"):
        if path.exists():
            return load_kernel(path)
    raise KeyError(f"unknown kernel {name!r}")


# ----------------------------------------------------------------------------
# Reassociation
# ----------------------------------------------------------------------------

def _sum_terms(expr: Expr) -> list:
    """Flatten an add/fma chain into terms in evaluation order.

    A term is either ("prod", a, b) or ("val", e).
    """
    if isinstance(expr, Node) and expr.op == "add":
        return _sum_terms(expr.args[0]) + _sum_terms(expr.args[1])
    if isinstance(expr, Node) and expr.op == "fma":
        return _sum_terms(expr.args[2]) + [("prod", expr.args[0], expr.args[1])]
    if isinstance(expr, Node) and expr.op == "mul":
        return [("prod", expr.args[0], expr.args[1])]
    return [("val", expr)]


def reassociate(expr: Expr, accumulators: int) -> Expr:
    """Rewrite sums into `accumulators` partial chains joined by a balanced tree.

    Terms go round-robin to the chains; the FLOP count is unchanged.
    """
    if isinstance(expr, Ref):
        return expr
    if expr.op == "mul":
        return Node("mul", tuple(reassociate(a, accumulators) for a in expr.args))

    terms = []
    for term in _sum_terms(expr):
        if term[0] == "prod":
            terms.append(("prod", reassociate(term[1], accumulators), reassociate(term[2], accumulators)))
        else:
            terms.append(("val", reassociate(term[1], accumulators)))

    k = max(1, min(accumulators, len(terms)))
    chains: list = [None] * k
    for i, term in enumerate(terms):
        acc = chains[i % k]
        if term[0] == "prod":
            chains[i % k] = Node("mul", term[1:]) if acc is None else Node("fma", (term[1], term[2], acc))
        else:
            chains[i % k] = term[1] if acc is None else Node("add", (acc, term[1]))

    while len(chains) > 1:
        paired = [Node("add", (chains[i], chains[i + 1])) for i in range(0, len(chains) - 1, 2)]
        if len(chains) % 2:
            paired.append(chains[-1])
        chains = paired
    return chains[0]


def association_tag(policy: str, accumulators: int) -> str:
    return f"balanced{accumulators}" if policy == "aggressive" else "source"


def apply_association(expr: Expr, tag: str) -> Expr:
    if tag == "source":
        return expr
    m = re.fullmatch(r"balanced(\d+)", tag)
    if not m:
        raise ValueError(f"unknown association tag {tag!r}")
    return reassociate(expr, int(m.group(1)))


# ----------------------------------------------------------------------------
# Lowering
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearOp:
    """Three-address op of one grid point.

    Operands are ("tap", name), ("coeff", name) or ("val", index of an
    earlier op). `mov` copies a lone tap for expressions without arithmetic.
    """
    index: int
    op: str
    srcs: tuple

    @property
    def flops(self) -> int:
        return FLOPS.get(self.op, 0)


def lower(spec: StencilSpec, expr: Expr | None = None) -> list:
    """Linearize an expression; fma evaluates its addend first."""
    expr = spec.expr if expr is None else expr
    taps, coeffs = spec.tap_map, spec.coeff_map
    ops: list = []

    def operand(e):
        if isinstance(e, Ref):
            if e.name in taps:
                return ("tap", e.name)
            if e.name in coeffs:
                return ("coeff", e.name)
            raise StencilStructureError(f"dangling reference {e.name!r}")
        return ("val", emit(e))

    def emit(e: Node) -> int:
        if e.op == "fma":
            c = operand(e.args[2])
            a = operand(e.args[0])
            b = operand(e.args[1])
            srcs = (a, b, c)
        else:
            srcs = tuple(operand(a) for a in e.args)
        ops.append(LinearOp(len(ops), e.op, srcs))
        return len(ops) - 1

    if isinstance(expr, Ref):
        src = operand(expr)
        ops.append(LinearOp(0, "mov", (src,)))
    else:
        emit(expr)
    return ops
