"""Golden model: one stencil time iteration evaluated with numpy over a tile."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from stencil_ir import Node, Ref, StencilSpec, TileShape, apply_association

HEADER_WORDS = 8


class TileTooSmallError(ValueError):
    pass


class TileFormatError(ValueError):
    pass


@dataclass
class Tile:
    """Double-buffered tile: one FP64 array per io array, x fastest."""
    shape: TileShape
    arrays: dict
    input_name: str = "inp"
    output_name: str = "out"
    seed: int = 0
    dynamic: dict = field(default_factory=dict)

    @property
    def inp(self) -> np.ndarray:
        return self.arrays[self.input_name]

    @property
    def out(self) -> np.ndarray:
        return self.arrays[self.output_name]

    def interior(self, name: str) -> np.ndarray:
        h = self.shape.halo
        return self.arrays[name][tuple(slice(h, n - h) for n in self.shape.extents)]


def make_tile(spec: StencilSpec, shape: TileShape, seed: int = 0) -> Tile:
    """Seeded random tile; the output starts as a copy of the input so its halo is defined."""
    rng = np.random.default_rng(seed)
    arrays = {name: rng.random(shape.extents) for name in spec.input_arrays}
    inp_name = spec.input_arrays[0]
    arrays[spec.output_array] = arrays[inp_name].copy()
    return Tile(shape=shape, arrays=arrays, input_name=inp_name,
                output_name=spec.output_array, seed=seed)


def coefficient_values(spec: StencilSpec, tile: Tile) -> dict:
    return {c.name: tile.dynamic.get(c.name, c.value) if c.dynamic else c.value
            for c in spec.coeffs}


def _check_tile(spec: StencilSpec, tile: Tile) -> None:
    if tile.shape.dims != spec.dims:
        raise TileTooSmallError(f"{spec.name} needs a {spec.dims}D tile, got {tile.shape.extents}")
    if tile.shape.halo < spec.radius or any(n < 2 * spec.radius + 1 for n in tile.shape.extents):
        raise TileTooSmallError(
            f"tile {tile.shape.extents} with halo {tile.shape.halo} too small for radius {spec.radius}"
        )


def run_reference(spec: StencilSpec, tile: Tile, assoc: str = "source") -> Tile:
    """Evaluate the kernel on every interior point; the halo of `out` is left as is.

    `assoc` selects the association order: "source" or "balanced<k>".
    """
    _check_tile(spec, tile)
    shape = tile.shape
    h = shape.halo
    coeffs = coefficient_values(spec, tile)
    taps = spec.tap_map

    def view(tap):
        arr = tile.arrays[tap.array]
        return arr[tuple(slice(h + o, n - h + o) for o, n in zip(tap.offset, shape.extents))]

    def evaluate(expr):
        if isinstance(expr, Ref):
            if expr.name in taps:
                return view(taps[expr.name])
            return np.float64(coeffs[expr.name])
        assert isinstance(expr, Node)
        if expr.op == "add":
            return evaluate(expr.args[0]) + evaluate(expr.args[1])
        if expr.op == "mul":
            return evaluate(expr.args[0]) * evaluate(expr.args[1])
        addend = evaluate(expr.args[2])
        return evaluate(expr.args[0]) * evaluate(expr.args[1]) + addend

    result = evaluate(apply_association(spec.expr, assoc))
    out = tile.out.copy()
    out[tuple(slice(h, n - h) for n in shape.extents)] = result
    arrays = dict(tile.arrays)
    arrays[tile.output_name] = out
    return replace(tile, arrays=arrays)


def swap_buffers(tile: Tile) -> Tile:
    """Exchange the input and output roles; array objects are not copied."""
    arrays = dict(tile.arrays)
    arrays[tile.input_name], arrays[tile.output_name] = tile.out, tile.inp
    return replace(tile, arrays=arrays)


def dump_tile(spec: StencilSpec, tile: Tile, path) -> None:
    """Raw little-endian FP64: an 8-word header followed by every array in layout order."""
    ext = (1,) * (3 - tile.shape.dims) + tuple(tile.shape.extents)
    names = list(spec.input_arrays) + [spec.output_array]
    header = np.array([tile.shape.dims, *ext, tile.shape.halo, tile.seed, len(names), 0],
                      dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        for name in names:
            fh.write(np.ascontiguousarray(tile.arrays[name], dtype="<f8").tobytes())


def load_tile(spec: StencilSpec, path) -> Tile:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if raw.size < HEADER_WORDS:
        raise TileFormatError("file shorter than the tile header")
    dims, ez, ey, ex, halo, seed, count, _ = (int(v) for v in raw[:HEADER_WORDS])
    if dims not in (2, 3):
        raise TileFormatError(f"bad dimension count {dims}")
    extents = (ez, ey, ex)[3 - dims:]
    shape = TileShape(extents=extents, halo=halo)
    names = list(spec.input_arrays) + [spec.output_array]
    if count != len(names) or raw.size != HEADER_WORDS + count * shape.cells:
        raise TileFormatError(f"payload does not match {count} arrays of {extents}")
    arrays = {}
    for i, name in enumerate(names):
        start = HEADER_WORDS + i * shape.cells
        arrays[name] = raw[start:start + shape.cells].reshape(extents).copy()
    return Tile(shape=shape, arrays=arrays, input_name=spec.input_arrays[0],
                output_name=spec.output_array, seed=seed)
