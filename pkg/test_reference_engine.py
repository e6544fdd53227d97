import os
import tempfile
import unittest

import numpy as np

from reference_engine import (
    TileFormatError,
    TileTooSmallError,
    dump_tile,
    load_tile,
    make_tile,
    run_reference,
    swap_buffers,
)
from stencil_ir import TileShape, kernel_by_name


class TestRunReference(unittest.TestCase):
    def test_identity_copies_input(self):
        spec = kernel_by_name("identity")
        tile = make_tile(spec, TileShape((5, 7), halo=0), seed=3)
        result = run_reference(spec, tile)
        np.testing.assert_array_equal(result.out, tile.inp)

    def test_jacobi_point_by_hand(self):
        spec = kernel_by_name("jacobi_2d")
        tile = make_tile(spec, TileShape((6, 6), halo=1), seed=1)
        result = run_reference(spec, tile)
        a = tile.inp
        y, x = 2, 3
        expected = 0.2 * ((((a[y, x] + a[y, x - 1]) + a[y, x + 1]) + a[y - 1, x]) + a[y + 1, x])
        self.assertEqual(result.out[y, x], expected)

    def test_halo_is_preserved(self):
        spec = kernel_by_name("star2d3r")
        tile = make_tile(spec, TileShape.for_spec(spec, 12), seed=5)
        result = run_reference(spec, tile)
        h = spec.radius
        np.testing.assert_array_equal(result.out[:h, :], tile.out[:h, :])
        np.testing.assert_array_equal(result.out[:, -h:], tile.out[:, -h:])

    def test_input_is_not_modified(self):
        spec = kernel_by_name("box2d1r")
        tile = make_tile(spec, TileShape.for_spec(spec, 8), seed=2)
        before = tile.inp.copy()
        run_reference(spec, tile)
        np.testing.assert_array_equal(tile.inp, before)

    def test_single_interior_point(self):
        spec = kernel_by_name("sym7pt")
        tile = make_tile(spec, TileShape((3, 3, 3), halo=1), seed=0)
        a = tile.inp
        acc = 0.4 * a[1, 1, 1]
        acc = 0.1 * (a[1, 1, 0] + a[1, 1, 2]) + acc
        acc = 0.1 * (a[1, 0, 1] + a[1, 2, 1]) + acc
        acc = 0.1 * (a[0, 1, 1] + a[2, 1, 1]) + acc
        self.assertEqual(run_reference(spec, tile).out[1, 1, 1], acc)

    def test_tile_too_small(self):
        spec = kernel_by_name("j2d9pt")
        tile = make_tile(spec, TileShape((4, 4), halo=1), seed=0)
        with self.assertRaises(TileTooSmallError):
            run_reference(spec, tile)

    def test_balanced_association_close_to_source(self):
        spec = kernel_by_name("box3d1r")
        tile = make_tile(spec, TileShape.for_spec(spec, 6), seed=9)
        a = run_reference(spec, tile, "source").out
        b = run_reference(spec, tile, "balanced4").out
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_dynamic_coefficient_override(self):
        spec = kernel_by_name("ac_iso_cd")
        shape = TileShape.for_spec(spec, 9)
        tile = make_tile(spec, shape, seed=4)
        base = run_reference(spec, tile).out
        tile.dynamic["imp"] = 0.0
        changed = run_reference(spec, tile).out
        self.assertFalse(np.array_equal(base, changed))


class TestTileHelpers(unittest.TestCase):
    def test_swap_buffers(self):
        spec = kernel_by_name("jacobi_2d")
        tile = make_tile(spec, TileShape((6, 6), halo=1), seed=1)
        swapped = swap_buffers(tile)
        self.assertIs(swapped.inp, tile.out)
        self.assertIs(swapped.out, tile.inp)

    def test_dump_and_load(self):
        spec = kernel_by_name("ac_iso_cd")
        tile = make_tile(spec, TileShape.for_spec(spec, 9), seed=11)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "tile.bin")
            dump_tile(spec, tile, path)
            loaded = load_tile(spec, path)
        self.assertEqual(loaded.shape, tile.shape)
        self.assertEqual(loaded.seed, 11)
        for name in tile.arrays:
            np.testing.assert_array_equal(loaded.arrays[name], tile.arrays[name])

    def test_truncated_file(self):
        spec = kernel_by_name("jacobi_2d")
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "short.bin")
            with open(path, "wb") as fh:
                fh.write(b"\0" * 16)
            with self.assertRaises(TileFormatError):
                load_tile(spec, path)


if __name__ == "__main__":
    unittest.main()
